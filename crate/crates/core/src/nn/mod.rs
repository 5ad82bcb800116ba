//! Minimal neural-network plumbing over candle tensors.

pub mod checkpoint;
pub mod conv;
pub mod layers;
pub mod optim;
pub mod params;

pub use checkpoint::Checkpoint;
pub use layers::Conv2d;
pub use optim::{Adam, AdamConfig, LrGroup};
pub use params::{Init, ParamStore};
