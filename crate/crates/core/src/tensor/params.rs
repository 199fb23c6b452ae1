use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng as _;
use sha2::{Digest, Sha256};

use super::tape::{Gradients, Tape, Var};
use super::{checkpoint, shape_err, Result, Tensor, TensorError};
use crate::rng::Rng;

static NEXT_SET_ID: AtomicU64 = AtomicU64::new(1);

/// Index of a parameter inside its [`ParamSet`].
pub type ParamId = usize;

/// Identifies a parameter across sets: which set, which slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamRef {
    pub set: u64,
    pub index: ParamId,
}

#[derive(Debug)]
struct Param {
    name: String,
    value: Tensor,
    grad: Vec<f64>,
}

/// Named trainable tensors plus their gradient buffers.
///
/// A frozen set binds onto a tape as constants, so no gradient can be
/// recorded for it; [`ParamSet::accumulate`] additionally refuses to write
/// into a frozen set.
#[derive(Debug)]
pub struct ParamSet {
    id: u64,
    params: Vec<Param>,
    frozen: bool,
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

impl Clone for ParamSet {
    fn clone(&self) -> Self {
        Self {
            id: NEXT_SET_ID.fetch_add(1, Ordering::Relaxed),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.clone(),
                    grad: p.grad.clone(),
                })
                .collect(),
            frozen: self.frozen,
        }
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self {
            id: NEXT_SET_ID.fetch_add(1, Ordering::Relaxed),
            params: Vec::new(),
            frozen: false,
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let grad = vec![0.0; value.len()];
        self.params.push(Param {
            name: name.into(),
            value,
            grad,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id].value
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.params[id].grad
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn ids(&self) -> std::ops::Range<ParamId> {
        0..self.params.len()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Records parameter `id` on `tape` as a leaf (a constant when frozen).
    pub fn bind<'t>(&self, tape: &'t Tape, id: ParamId) -> Var<'t> {
        tape.param(
            self.params[id].value.clone(),
            ParamRef {
                set: self.id,
                index: id,
            },
            !self.frozen,
        )
    }

    /// Adds the gradients of every leaf of this set recorded on `tape`.
    ///
    /// A parameter bound several times receives the sum of its leaves.
    pub fn accumulate(&mut self, tape: &Tape, grads: &Gradients) -> Result<()> {
        for (pref, var_id) in tape.param_leaves() {
            if pref.set != self.id {
                continue;
            }
            let Some(g) = grads.get_id(var_id) else {
                continue;
            };
            if self.frozen {
                return Err(TensorError::FrozenGradient(
                    self.params[pref.index].name.clone(),
                ));
            }
            let p = &mut self.params[pref.index];
            if g.len() != p.grad.len() {
                return Err(shape_err("accumulate", format!("gradient for {}", p.name)));
            }
            for (a, b) in p.grad.iter_mut().zip(g) {
                *a += b;
            }
        }
        Ok(())
    }

    /// True when any gradient buffer holds a nonzero entry.
    pub fn has_nonzero_grad(&self) -> bool {
        self.params.iter().any(|p| p.grad.iter().any(|g| *g != 0.0))
    }

    pub fn to_checkpoint(&self, meta: Vec<(String, String)>) -> checkpoint::Checkpoint {
        checkpoint::Checkpoint {
            meta,
            tensors: self
                .params
                .iter()
                .map(|p| (p.name.clone(), p.value.clone()))
                .collect(),
        }
    }

    /// Rebuilds a set from a checkpoint, in checkpoint order.
    pub fn from_checkpoint(ckpt: &checkpoint::Checkpoint) -> Self {
        let mut set = Self::new();
        for (name, t) in &ckpt.tensors {
            set.add(name.clone(), t.clone());
        }
        set
    }

    /// Copies values from a checkpoint whose names and shapes match exactly.
    pub fn load_values(&mut self, ckpt: &checkpoint::Checkpoint) -> Result<()> {
        if ckpt.tensors.len() != self.params.len() {
            return Err(TensorError::Checkpoint(format!(
                "expected {} tensors, found {}",
                self.params.len(),
                ckpt.tensors.len()
            )));
        }
        for (p, (name, t)) in self.params.iter_mut().zip(&ckpt.tensors) {
            if &p.name != name || p.value.shape() != t.shape() {
                return Err(TensorError::Checkpoint(format!(
                    "tensor `{name}` {:?} does not match `{}` {:?}",
                    t.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            p.value = t.clone();
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and value bits, as lowercase hex.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            h.update([0u8]);
            for d in p.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in p.value.data() {
                h.update(x.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) matrix.
pub fn init_uniform(rng: &mut Rng, rows: usize, cols: usize, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::matrix(rows, cols, data).expect("shape by construction")
}
