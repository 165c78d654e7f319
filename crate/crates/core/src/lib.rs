//! snnf-core: a desk-scale reference implementation of spiking-network
//! training pipelines that warm-start from conventional networks.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`]: dense row-major f64 tensors, the conv/dense/pool kernels, and
//!   a pinned deterministic RNG.
//! * [`autograd`]: a flat tape over tensor primitives with surrogate-gradient
//!   spike steps and a finite-difference checker.
//! * [`neurons`]: LIF / LIAF cell updates, the annealed soft-ReLU activation,
//!   and rate decoding.
//! * [`model`]: declarative network specs, parameter checkpoints, forward
//!   passes in all regimes, and the checkpoint file format.
//! * [`eventdata`]: event streams, frame binning, frame-to-event conversion,
//!   and the bundled synthetic datasets.
//! * [`pipeline`]: SGD training stages, parameter transplant, warmup, and the
//!   two bundled pretrain-then-finetune pipelines.
//! * [`analysis`]: SSIM kernel similarity, Hungarian channel matching,
//!   similarity curves, and grayscale map export.
//!
//! Everything is deterministic given a seed: batch-level parallelism reduces
//! in a fixed order, random streams are derived from labeled child seeds, and
//! checkpoints round-trip bit-exactly.

pub mod analysis;
pub mod autograd;
pub mod error;
pub mod eventdata;
pub mod model;
pub mod neurons;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, Result};
