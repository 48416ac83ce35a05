//! Dendrites-activated connection (DAC) micro-framework.
//!
//! DAC units preactivate each incoming edge with its own bias before the
//! linear aggregation: `z_i = sum_j w_ij relu(b_ij + z_j)`. This crate
//! implements DAC and standard dense/convolutional layers on a minimal
//! reverse-mode autodiff engine, the equivalence transforms between
//! preactivated and standard networks, FLOPs/weights accounting, CIFAR-style
//! ResNet assembly with the DAC rewrite, a training harness with the
//! early-stopping error estimator, and the constructive universal
//! approximator built from piecewise-linear spike functions.

pub mod approximator;
pub mod complexity;
pub mod datasets;
pub mod equivalence;
pub mod error;
pub mod graph;
pub mod layers;
pub mod netspec;
pub mod ops;
pub mod resnet;
pub mod tensor;
pub mod training;

pub use error::{DacError, Result};
pub use graph::{grad_check, Gradients, Graph, NodeId, Precision};
pub use ops::{Activation, Padding};
pub use tensor::Tensor;
