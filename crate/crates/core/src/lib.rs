//! SineFM: convolutional layers that learn a handful of seed feature maps and
//! generate the rest through fixed, seeded nonlinear transforms.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] and [`tape`] form a small rank-4 tensor type with a
//!   reverse-mode differentiation tape, plus [`gradcheck`] for
//!   finite-difference validation.
//! * [`rng`] is the bit-exact splitmix64 / xoshiro256** generator every seeded
//!   quantity flows from.
//! * [`transforms`] holds the nine feature-generating families and their
//!   seeded hyperparameter sampling.
//! * [`layer`] is the SineFM layer itself and the least-squares fit of
//!   combination weights against a standard filter.
//! * [`network`] describes, builds and converts whole architectures.
//! * [`codec`] packs a model into the seed payload sent to a remote device.
//! * [`cost`] counts parameters and FLOPs analytically.
//! * [`train`] has datasets, optimizers, metrics and the ablation harness.
//! * [`cli`] wires it all into the `sinefm` command.

pub mod cli;
pub mod codec;
pub mod cost;
pub mod error;
pub mod gradcheck;
pub mod layer;
pub mod network;
pub mod real;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod transforms;

pub use error::{Error, Result};
pub use layer::{ChannelPlan, SineFMConfig, SineFMLayer};
pub use network::{ArchDescriptor, LayerSpec, Model};
pub use real::Real;
pub use tape::{Tape, Var};
pub use tensor::{Shape, Tensor};
pub use transforms::{HyperBounds, TransformFamily, TransformSpec};
