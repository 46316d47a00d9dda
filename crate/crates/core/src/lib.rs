//! Clustering-based hard negative sampling for contrastive speaker
//! verification at desk scale: corpora, voiceprint clustering, batch
//! sampling, contrastive losses, a small encoder with its trainer, and
//! verification metrics.

pub mod clustering;
pub mod corpus;
pub mod embedding;
pub mod encoder;
pub mod error;
pub mod evalkit;
pub mod io;
pub mod loss;
pub mod sampler;
pub mod seeds;
pub mod synthdata;

pub use corpus::{Corpus, CorpusManifest, SpeakerId, UtteranceId};
pub use embedding::Embedding;
pub use error::{Error, Result};
