//! Training-free multi-step inference for one-step audio source separators.
//!
//! The crate is organised around a small set of modules:
//!
//! * [`audio`], [`wav`], [`stft`]: buffers, file I/O and spectral analysis.
//! * [`metrics`]: SI-SNR, SDR and the aggregate variants used for search and
//!   evaluation.
//! * [`separators`]: the [`separators::SeparationModel`] trait, simple
//!   reference models and the out-of-process model pool.
//! * [`refine`]: the mixture/estimate blending search.
//! * [`theory`]: numerical checks of the search guarantees.
//! * [`synth`]: seeded synthetic problems.
//! * [`wire`]: the framing used to talk to external processes.

pub mod audio;
pub mod metrics;
pub mod refine;
pub mod separators;
pub mod stft;
pub mod synth;
pub mod theory;
pub mod wav;
pub mod wire;

pub use audio::{mix, AudioBuffer, AudioError};
pub use metrics::{MetricKind, MetricScore};
pub use refine::{refine, MixtureProblem, RefinementConfig, RefinementTrace};
pub use separators::SeparationModel;
