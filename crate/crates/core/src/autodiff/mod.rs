//! Reverse-mode differentiation, parameter storage and the Adam optimizer.

pub mod adam;
pub mod gradcheck;
pub mod graph;
pub mod params;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{check_gradients, compare_gradients, GradCheckReport};
pub use graph::{evaluate_graph, sigmoid, Bindings, Evaluation, Gradients, Graph, NodeId, Op};
pub use params::{ParamGrads, ParamStore};
