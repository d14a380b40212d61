//! Caption supply for the alignment stage.
//!
//! Captions are produced once, at corpus-build time, and stored in the
//! manifest and an append-only cache. A deterministic [`MockCaptioner`]
//! serves tests and toy corpora; [`RemoteCaptioner`] talks to an external
//! captioning service over HTTP.

pub mod cache;
pub mod error;
pub mod mock;
pub mod provider;
pub mod remote;

pub use crate::cache::{CaptionCache, CaptionRecord};
pub use crate::error::{CaptionError, Result};
pub use crate::mock::MockCaptioner;
pub use crate::provider::{caption_manifest, CaptionProvider, CaptionRequest, CaptionSource, CaptionStats};
pub use crate::remote::RemoteCaptioner;
