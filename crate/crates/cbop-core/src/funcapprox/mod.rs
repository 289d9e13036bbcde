//! Dense networks, activations, Adam, and gradient verification utilities.

pub mod activation;
pub mod adam;
pub mod gradcheck;
pub mod net;

pub use activation::{Hidden, Output};
pub use adam::AdamState;
pub use net::{DenseNet, ForwardCache, Gradients};
