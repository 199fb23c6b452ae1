use super::params::{init_uniform, ParamId, ParamSet};
use super::tape::{Tape, Var};
use super::{Result, Tensor, TensorError};
use crate::rng::Rng;

/// Affine map `x·W + b` with `W: d_in×d_out` stored as `{name}.w` and `b`
/// as `{name}.b`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    /// Uniform weights scaled by fan-in, zero bias.
    pub fn init(set: &mut ParamSet, name: &str, d_in: usize, d_out: usize, rng: &mut Rng) -> Self {
        Self {
            w: set.add(format!("{name}.w"), init_uniform(rng, d_in, d_out, d_in)),
            b: set.add(format!("{name}.b"), Tensor::zeros(vec![1, d_out])),
        }
    }

    pub fn locate(set: &ParamSet, name: &str) -> Result<Self> {
        Ok(Self {
            w: find_param(set, &format!("{name}.w"))?,
            b: find_param(set, &format!("{name}.b"))?,
        })
    }

    pub fn bind<'t>(&self, tape: &'t Tape, set: &ParamSet) -> BoundLinear<'t> {
        BoundLinear {
            w: set.bind(tape, self.w),
            b: set.bind(tape, self.b),
        }
    }
}

/// Looks up a parameter by name, failing as a checkpoint format error.
pub fn find_param(set: &ParamSet, name: &str) -> Result<ParamId> {
    set.find(name)
        .ok_or_else(|| TensorError::Checkpoint(format!("missing tensor {name}")))
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLinear<'t> {
    pub w: Var<'t>,
    pub b: Var<'t>,
}

impl<'t> BoundLinear<'t> {
    pub fn apply(&self, x: Var<'t>) -> Result<Var<'t>> {
        x.matmul(self.w)?.add_row(self.b)
    }
}
