//! Dense `f64` tensors and a reverse-mode tape.
//!
//! Every op records its inputs on a [`Graph`]; [`Graph::backward`] sweeps the
//! tape once in reverse. Parameters enter a graph as leaves via
//! [`Graph::param`] and read their gradient back with [`Gradients::wrt`].

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_check_many, GradCheck, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub(crate) use graph::sigmoid;
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
