//! Minimal reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Graph`] is an eager tape: each op computes its value immediately and
//! records how to push gradients back to its parents. Graphs are built per
//! step and thrown away; parameters live outside and are bound in as leaves.

mod array;
mod graph;
mod ops;

pub use array::{broadcast_shapes, numel, strides_of, Array};
pub use graph::{BackwardFn, Gradients, Graph, Var};
pub use ops::avg_pool_array;
