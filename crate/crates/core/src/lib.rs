//! Sobolev training toolkit for operator learning.
//!
//! * [`geometry`]: point clouds and exact KNN search.
//! * [`mls`]: moving-least-squares derivative estimation on irregular meshes.
//! * [`training`]: Sobolev-loss training of a kernel-form operator network
//!   with gradient surgery and synthetic operator tasks.
//! * [`convlab`]: closed-form population gradients and gradient flows of the
//!   one-neuron ReLU operator model.
//!
//! Every numerical type is generic over [`Scalar`] (`f32` or `f64`); the
//! `*64` aliases below fix the common double-precision case.

// `!(x > 0)` is used on purpose so that NaN falls into the rejecting branch.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod convlab;
pub mod geometry;
pub mod linalg;
pub mod mls;
pub mod scalar;
pub mod training;

pub use scalar::Scalar;

pub type PointCloud64 = geometry::PointCloud<f64>;
pub type SpatialIndex64 = geometry::SpatialIndex<f64>;
pub type JetField64 = mls::JetField<f64>;
pub type OperatorNet64 = training::OperatorNet<f64>;
pub type OperatorDataset64 = training::OperatorDataset<f64>;
pub type FlowConfig64 = convlab::FlowConfig<f64>;
pub type FlowTrajectory64 = convlab::FlowTrajectory<f64>;
