//! Reverse-mode differentiation over dense arrays.
//!
//! A [`Graph`] is rebuilt for every forward pass. Ops append nodes holding
//! their values; [`Graph::backward`] sweeps the node list in reverse and
//! accumulates gradients into every node that depends on a trainable leaf.
//! Broadcasting is limited to [`Graph::add_bias`].

pub mod gradcheck;
mod graph;

pub use gradcheck::{
    check_gradient, finite_difference_check, finite_difference_check_with, GradCheckReport,
    Stencil, DEFAULT_EPS, REFINE_BELOW, RICHARDSON_EPS, RIDDERS_STEP,
};
pub use graph::{sigmoid, Gradients, Graph, Padding, Unary, Var};

#[cfg(test)]
mod tests;
