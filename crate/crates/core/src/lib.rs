//! Conversational-focus speech enhancement toolkit.
//!
//! A wearable microphone array is steered toward a tracked talker with a
//! maximum directivity index (max-DI) beamformer whose noise model is the
//! spherically isotropic covariance built from the array transfer function
//! (ATF) set. Around the beamformer sit a free-field scene simulator,
//! evaluation metrics, GCC-PHAT alignment and a head-tracklet associator.
//!
//! Module map:
//!
//! - [`atf`]: ATF sets, nearest-direction lookup, isotropic covariance.
//! - [`beamformer`]: distortionless targets, max-DI weights, DI.
//! - [`wola`]: STFT analysis, WOLA synthesis, frame-wise stream filtering.
//! - [`steering`]: poses, device-frame directions, ATF selection.
//! - [`metrics`]: SNR, SegSNR, SI-SDR, segment selection, GCC-PHAT.
//! - [`tracker`]: assignment, trajectory life cycle, majority-vote IDs.
//! - [`simscene`]: free-field ATFs, diffuse noise, moving sources.
//! - [`harness`]: file formats and the enhance/evaluate/simulate/track commands.

#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::needless_range_loop,
    clippy::type_complexity
)]

pub mod atf;
pub mod audio;
pub mod beamformer;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod simscene;
pub mod steering;
pub mod tracker;
pub mod wola;

pub use atf::{AtfSet, Direction, IsotropicCovariance};
pub use beamformer::{BeamformerWeights, DistortionlessTarget};
pub use error::{Error, Result};
pub use metrics::{TestCase, VaSegments};
pub use steering::{Pose, PoseTrack};
pub use tracker::{Detection, MotionTransform, TrackerConfig, Trajectory};
pub use wola::{SpectralFrame, StftConfig};

pub use num_complex::Complex64;

/// Speed of sound used by default throughout the toolkit, in m/s.
pub const SPEED_OF_SOUND: f64 = 343.0;
