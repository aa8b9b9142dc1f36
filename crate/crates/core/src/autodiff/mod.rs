//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records one forward pass. Parameters live in a
//! [`ParamStore`] and are copied onto the tape by name, so a store can be
//! shared by any number of graphs; after [`Graph::backward`] the parameter
//! gradients are pushed back with [`Graph::accumulate_into`] and consumed by
//! [`adam_step`].

mod gradcheck;
mod graph;
mod optim;
mod params;
mod tensor;

pub use gradcheck::{grad_check, grad_check_params, DEFAULT_EPS};
pub use graph::{Graph, Var, LN_EPS, PAD};
pub use optim::{adam_step, clip_grad_norm, cosine_lr, AdamConfig};
pub use params::ParamStore;
pub use tensor::{Real, Tensor};
