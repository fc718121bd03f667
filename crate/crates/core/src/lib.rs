//! Desk-scale federated learning with foundation-model guidance for small
//! clients and asymmetric dual distillation for large clients.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod experiments;
pub mod federation;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod optim;
pub mod oracle;
pub mod rng;
pub mod tensor;

pub use autodiff::{Graph, Var};
pub use error::{FedHelpError, Result};
pub use tensor::Tensor;
