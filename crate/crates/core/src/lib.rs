//! Multimodal graph learning at desk scale.

// `!(x > 0.0)` rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Tape operations take `self` by value and carry a tape lifetime.
#![allow(clippy::should_implement_trait)]

pub mod aligner;
pub mod demo;
pub mod gradsuite;
pub mod graph;
pub mod instruct;
pub mod rng;
pub mod tensor;
