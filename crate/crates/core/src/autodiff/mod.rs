//! Minimal reverse-mode differentiation engine.

mod conv;
pub mod gradcheck;
mod graph;
pub mod optim;
mod params;

pub use conv::ConvGeometry;
pub use gradcheck::{grad_check, grad_check_network, Forward, GradCheckConfig, GradCheckReport};
pub use graph::{Graph, Var};
pub(crate) use graph::focal_term;
pub use optim::AdamW;
pub use params::{Module, Param, ParamId, ParamStore};
