//! Class-controlled DeepDream for images and video.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`], [`ops`], [`tape`] and [`adam`]: dense `f32` tensors, the
//!   small set of differentiable operations the dream network needs, a
//!   reverse-mode tape and the Adam optimizer.
//! * [`net`]: the VGG-style network description, its weights file and the
//!   feature/logit entry points.
//! * [`flow`]: `.flo` ingestion, backward warping, consistency masks and
//!   synthetic flow fixtures.
//! * [`losses`]: the dream, class, temporal and flow-trail objectives.
//! * [`tiler`]: randomised circular-roll tiling for fixed-size networks.
//! * [`pipeline`]: effect presets and frame-by-frame orchestration.
//! * [`ppm`]: binary P6 frame I/O.

pub mod adam;
pub mod error;
pub mod flow;
pub mod losses;
pub mod net;
pub mod ops;
pub mod pipeline;
pub mod ppm;
pub mod tape;
pub mod tensor;
pub mod tiler;

#[cfg(any(test, feature = "test-util"))]
pub mod gradcheck;

pub use adam::{adam_step, AdamState};
pub use error::{Error, FormatError, Result};
pub use flow::{ConsistencyMask, ConsistencyParams, FlowField, SynthFlow};
pub use losses::{FrameContext, LossWeights, TemporalPrior};
pub use net::{LayerSpec, Network, NetworkSpec, Weights};
pub use pipeline::{EffectPreset, FrameKind, InitPolicy, PresetName, RunManifest};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
pub use tiler::{TileRng, TileSchedule};
