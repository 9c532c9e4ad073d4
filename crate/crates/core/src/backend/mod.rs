//! Denoising model stack abstraction.
//!
//! [`Backend`] covers the latent codec, prompt conditioning and noise
//! prediction. [`ToyBackend`] is an analytic stand-in whose whole inference
//! recurrence is closed-form; [`RemoteBackend`] forwards every call to an
//! out-of-process model server over the adapter wire contract.

mod adapters;
mod remote;
mod toy;
pub mod wire;

use std::collections::{BTreeMap, BTreeSet};

use image::RgbImage;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use adapters::{
    ObjectAdapters, RecordMode, RecordReplayAdapters, RemoteAdapters, StubAdapters,
    UnconfiguredAdapters,
};
pub use remote::RemoteBackend;
pub use toy::ToyBackend;
pub use wire::Transport;

use crate::diffusion::LatentTensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendProfile {
    pub name: String,
    pub latent_channels: usize,
    pub downsample_factor: u32,
    pub supports_identity_embeddings: bool,
    pub max_prompt_tokens: usize,
    pub embedding_dim: usize,
}

impl BackendProfile {
    /// Latent shape for an image of the given pixel size.
    pub fn latent_shape(&self, width: u32, height: u32) -> Result<(usize, usize, usize)> {
        let f = self.downsample_factor;
        if width == 0 || height == 0 || !width.is_multiple_of(f) || !height.is_multiple_of(f) {
            return Err(Error::shape(format!(
                "image {width}x{height} is not divisible by the downsample factor {f}"
            )));
        }
        Ok((
            self.latent_channels,
            (height / f) as usize,
            (width / f) as usize,
        ))
    }
}

/// Trained vectors bound to identity tokens, plus tokens the caller
/// explicitly allows to fall back to their vocabulary embedding.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingBindings {
    pub bound: BTreeMap<String, Vec<f64>>,
    pub untrained: BTreeSet<String>,
}

impl EmbeddingBindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(mut self, token: impl Into<String>, vector: Vec<f64>) -> Self {
        self.bound.insert(token.into(), vector);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentitySlot {
    pub token: String,
    pub position: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptEncoding {
    pub prompt_text: String,
    pub token_ids: Vec<u32>,
    /// One row per token.
    pub embedding_matrix: Vec<Vec<f64>>,
    pub identity_slots: Vec<IdentitySlot>,
    /// Passed through untouched; guidance mixing is the model server's concern.
    pub guidance_scale: f64,
}

impl PromptEncoding {
    pub fn with_guidance(mut self, scale: f64) -> Self {
        self.guidance_scale = scale;
        self
    }

    /// Stable digest of the encoding, identity vectors included.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.prompt_text.as_bytes());
        for row in &self.embedding_matrix {
            for v in row {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }
}

pub fn is_identity_token(word: &str) -> bool {
    word.len() > 2 && word.starts_with('<') && word.ends_with('>')
}

/// Whitespace tokenizer; identity tokens keep their case, other words are lowercased.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            if is_identity_token(w) {
                w.to_owned()
            } else {
                w.to_lowercase()
            }
        })
        .collect()
}

/// Stable 64-bit hash of a string.
pub(crate) fn stable_hash(s: &str) -> u64 {
    let digest = Sha256::digest(s.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

pub trait Backend: Send + Sync {
    fn profile(&self) -> &BackendProfile;

    fn encode_image(&self, image: &RgbImage) -> Result<LatentTensor>;

    fn decode_latent(&self, z: &LatentTensor) -> Result<RgbImage>;

    /// Vocabulary embedding of a single word.
    fn token_embedding(&self, word: &str) -> Result<Vec<f64>>;

    fn token_id(&self, word: &str) -> u32 {
        stable_hash(word) as u32
    }

    /// Tokenizes `text`, binding identity tokens to their trained vectors.
    fn encode_prompt(&self, text: &str, bindings: &EmbeddingBindings) -> Result<PromptEncoding> {
        let profile = self.profile();
        let words = tokenize(text);
        if words.len() > profile.max_prompt_tokens {
            return Err(Error::Tokenization(format!(
                "prompt has {} tokens, limit is {}",
                words.len(),
                profile.max_prompt_tokens
            )));
        }
        let mut token_ids = Vec::with_capacity(words.len());
        let mut rows = Vec::with_capacity(words.len());
        let mut identity_slots = Vec::new();
        for (position, word) in words.iter().enumerate() {
            token_ids.push(self.token_id(word));
            if is_identity_token(word) {
                let row = match bindings.bound.get(word) {
                    Some(v) => {
                        if v.len() != profile.embedding_dim {
                            return Err(Error::shape(format!(
                                "embedding for {word} has dim {}, expected {}",
                                v.len(),
                                profile.embedding_dim
                            )));
                        }
                        v.clone()
                    }
                    None if bindings.untrained.contains(word) => self.token_embedding(word)?,
                    None => return Err(Error::Binding(word.clone())),
                };
                identity_slots.push(IdentitySlot {
                    token: word.clone(),
                    position,
                });
                rows.push(row);
            } else {
                rows.push(self.token_embedding(word)?);
            }
        }
        Ok(PromptEncoding {
            prompt_text: text.to_owned(),
            token_ids,
            embedding_matrix: rows,
            identity_slots,
            guidance_scale: 0.0,
        })
    }

    fn predict_noise(
        &self,
        z_t: &LatentTensor,
        t: usize,
        cond: &PromptEncoding,
    ) -> Result<LatentTensor>;

    /// Vector-Jacobian product of `predict_noise` with respect to each
    /// identity slot's embedding row, in slot order.
    fn identity_gradients(
        &self,
        _z_t: &LatentTensor,
        _t: usize,
        _cond: &PromptEncoding,
        _upstream: &LatentTensor,
    ) -> Result<Vec<Vec<f64>>> {
        Err(Error::Capability(format!(
            "backend {} cannot differentiate identity embeddings",
            self.profile().name
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_keeps_identity_tokens() {
        assert_eq!(
            tokenize("A photo of a <Obj-1>  in a Room"),
            vec!["a", "photo", "of", "a", "<Obj-1>", "in", "a", "room"]
        );
        assert!(!is_identity_token("<>"));
    }
}
