//! Data plumbing for the restoration pipeline: the [`ImageTensor`] type,
//! procedural toy scenes, synthetic raindrop / haze / noise degradations,
//! paired dataset manifests and training patch sampling.

pub mod corpus;
pub mod error;
pub mod filter;
pub mod image;
pub mod label;
pub mod manifest;
pub mod patch;
pub mod scene;
pub mod seed;
pub mod synth;

pub use crate::corpus::{build_corpus, generate_toy_scenes};
pub use crate::error::{DataError, Result};
pub use crate::image::ImageTensor;
pub use crate::label::DegradationLabel;
pub use crate::manifest::{DatasetManifest, ManifestMetadata, ManifestRecord, Split, TaskMixing};
pub use crate::patch::{sample_patch, Augment};
pub use crate::scene::ToyScene;
pub use crate::seed::{derive_seed, fnv1a64};
pub use crate::synth::{HazeParams, RaindropParams, SynthParams};
