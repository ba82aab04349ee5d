//! Gated path selection over atrous-convolution graphs.
//!
//! * [`tensor`]: NCHW tensors, the op set the network needs, and a
//!   reverse-mode tape with a finite-difference oracle.
//! * [`netspec`]: declarative atrous-convolution DAGs and the canonical
//!   ASPP / DenseASPP / SuperNet builders.
//! * [`model`]: the runtime network (gates, branches, parameter counting,
//!   OHEM loss, poly schedule, synthetic data and a training loop).
//! * [`rf`]: static receptive-field and sample-rate analysis.

pub mod model;
pub mod netspec;
pub mod rf;
pub mod tensor;
