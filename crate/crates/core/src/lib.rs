//! Joint undersampled MRI reconstruction with optimal-transport based
//! cross-modal alignment and synthesis.
//!
//! The crate is organized bottom-up: [`kspace`] and [`warp`] hold the
//! physics and geometry operators, [`graph`] a small reverse-mode autodiff
//! engine, [`nets`] the learned maps, [`otcore`] transport utilities,
//! [`metrics`] image quality measures and [`trainer`] the alternating
//! optimization loop.

pub mod checkpoint;
pub mod error;
pub mod graph;
pub mod imageio;
pub mod kspace;
pub mod metrics;
pub mod nets;
pub mod otcore;
pub mod tensor;
pub mod trainer;
pub mod warp;

pub use error::{Error, Result};
pub use imageio::{Dataset, DatasetManifest, PairSample, PhantomPair, RasterImage, Split};
pub use kspace::{ComplexImage, MaskScheme, SamplingMask};
pub use nets::{ModelState, NetSpec};
pub use otcore::{BoundReport, DiscreteMeasure, DualLossReport, TransportCost};
pub use tensor::Tensor;
pub use trainer::{Ablation, TrainConfig, TrainLog};
pub use warp::DeformationField;
