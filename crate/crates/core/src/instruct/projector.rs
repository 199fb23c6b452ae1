use super::{InstructError, Result};
use crate::rng::{rng_from, tag};
use crate::tensor::{BoundLinear, Checkpoint, Linear, ParamSet, Tape, Tensor, TensorError, Var};

/// Row-wise `Linear(d → d_dec) · GELU · Linear(d_dec → d_dec)`.
#[derive(Clone, Debug)]
pub struct ProjectorParams {
    pub set: ParamSet,
    first: Linear,
    second: Linear,
    pub d: usize,
    pub d_dec: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundProjector<'t> {
    first: BoundLinear<'t>,
    second: BoundLinear<'t>,
    d: usize,
}

impl ProjectorParams {
    pub fn init(d: usize, d_dec: usize, seed: u64) -> Self {
        let mut rng = rng_from(seed, &[tag("projector-init")]);
        let mut set = ParamSet::new();
        let first = Linear::init(&mut set, "proj.first", d, d_dec, &mut rng);
        let second = Linear::init(&mut set, "proj.second", d_dec, d_dec, &mut rng);
        Self {
            set,
            first,
            second,
            d,
            d_dec,
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        self.set
            .to_checkpoint(vec![("kind".into(), "projector".into())])
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.meta("kind") != Some("projector") {
            return Err(TensorError::Checkpoint("not a projector checkpoint".into()).into());
        }
        let set = ParamSet::from_checkpoint(ckpt);
        let first = Linear::locate(&set, "proj.first")?;
        let second = Linear::locate(&set, "proj.second")?;
        let (d, d_dec) = (set.value(first.w).rows(), set.value(second.w).cols());
        Ok(Self {
            set,
            first,
            second,
            d,
            d_dec,
        })
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundProjector<'t> {
        self.bind_in(tape, &self.set)
    }

    /// Binds the values held in `set`, which must have this projector's layout.
    pub fn bind_in<'t>(&self, tape: &'t Tape, set: &ParamSet) -> BoundProjector<'t> {
        BoundProjector {
            first: self.first.bind(tape, set),
            second: self.second.bind(tape, set),
            d: self.d,
        }
    }

    /// Projects `rows × d` aligner-space rows to `rows × d_dec`.
    pub fn project(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let out = self.bind(&tape).apply(tape.constant(x.clone()))?;
        Ok(out.value().as_ref().clone())
    }
}

impl<'t> BoundProjector<'t> {
    pub fn apply(&self, x: Var<'t>) -> Result<Var<'t>> {
        if x.cols() != self.d {
            return Err(InstructError::DimMismatch {
                what: "projector input width",
                expected: self.d,
                actual: x.cols(),
            });
        }
        Ok(self.second.apply(self.first.apply(x)?.gelu()?)?)
    }
}
