//! Differentiable rotated-rectangle spatial attention, built on a small
//! reverse-mode autodiff engine, with a position-wise baseline, an
//! equivariance-constrained training loop, and numerical checks for the
//! generalization theory behind it.

pub mod autodiff;
pub mod checkpoint;
pub mod equivariance;
pub mod error;
pub mod harness;
mod kernels;
pub mod netpbm;
pub mod nn;
pub mod ops;
pub mod pw;
pub mod rect;
pub mod synthdata;
pub mod tensor;
pub mod verify;
pub mod theory;

pub use autodiff::{grad_check, Gradients, NodeId, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
