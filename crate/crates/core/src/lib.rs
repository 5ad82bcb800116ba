//! Raw Bayer video denoising.
//!
//! Sensor noise modeling and calibration, Bayer packing, a single-frame
//! pre-denoiser, pyramid deformable alignment, non-local attention,
//! temporal and spatial fusion, reference and learned ISPs, and the
//! training, evaluation and ablation harness around them.

pub mod align;
pub mod attention;
pub mod bayer;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod io;
pub mod isp;
pub mod model;
pub mod nn;
pub mod noise;
pub mod predenoise;
pub mod training;

pub use bayer::{BayerFrame, BayerPattern, PackedFrame, RawMeta, Sequence, SequenceRole, SrgbFrame};
pub use error::{Error, Result};
pub use isp::{LearnedIsp, LearnedIspSpec, ReferenceIspConfig};
pub use model::{Domain, ModelConfig, RawVideoDenoiser};
pub use noise::{NoiseParams, NoiseTable};
pub use predenoise::{Predenoiser, UNetSpec};
pub use training::loss::{LossTerms, LossWeights};
pub use training::{ModelState, Stage, TrainConfig};
