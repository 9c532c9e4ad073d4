//! Identity inversion: learns one embedding vector per object so that the
//! frozen denoiser reconstructs the object's noise under a masked diffusion
//! loss. Only the embedding vectors are updated.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::backend::{tokenize, Backend, EmbeddingBindings};
use crate::diffusion::{
    downsample_mask, forward_noise, make_schedule, LatentMask, LatentTensor, ScheduleKind,
    TRAIN_TIMESTEPS,
};
use crate::error::{Error, Result};
use crate::objects::ObjectAsset;
use crate::store::{sha256_hex, write_atomic};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityEmbedding {
    pub token: String,
    pub vector: Vec<f64>,
    pub init_source: String,
    pub train_steps: usize,
    pub loss_trace: Vec<f64>,
}

impl IdentityEmbedding {
    /// Content id of the vector, used to reference it from assets and manifests.
    pub fn embedding_id(&self) -> String {
        let bytes: Vec<u8> = self.vector.iter().flat_map(|v| v.to_le_bytes()).collect();
        sha256_hex(&bytes)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.loss_trace.last().copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    GradientDescent,
    Adam {
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Number of noise levels timesteps are drawn from, uniformly in `[1, timesteps]`.
    pub timesteps: usize,
    pub schedule: ScheduleKind,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl TrainConfig {
    pub fn toy() -> Self {
        Self {
            steps: 50,
            learning_rate: 1e-2,
            seed: 0,
            timesteps: TRAIN_TIMESTEPS,
            schedule: ScheduleKind::default(),
            optimizer: Optimizer::GradientDescent,
        }
    }

    pub fn pretrained() -> Self {
        Self {
            steps: 400,
            learning_rate: 5e-3,
            optimizer: Optimizer::Adam {
                beta1: 0.9,
                beta2: 0.999,
                epsilon: 1e-8,
            },
            ..Self::toy()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.timesteps == 0 || self.timesteps > TRAIN_TIMESTEPS {
            return Err(Error::Config(format!(
                "timesteps must lie in [1, {TRAIN_TIMESTEPS}]"
            )));
        }
        Ok(())
    }
}

/// Initializes an identity from the first token of its class label.
pub fn init_identity(token: &str, class_label: &str, backend: &dyn Backend) -> Result<IdentityEmbedding> {
    let first = tokenize(class_label)
        .into_iter()
        .next()
        .ok_or_else(|| Error::Tokenization(format!("class label {class_label:?} has no tokens")))?;
    Ok(IdentityEmbedding {
        token: token.to_owned(),
        vector: backend.token_embedding(&first)?,
        init_source: first,
        train_steps: 0,
        loss_trace: Vec::new(),
    })
}

fn check_mask(eps: &LatentTensor, m: &LatentMask) -> Result<()> {
    if (m.height(), m.width()) != (eps.height(), eps.width()) {
        return Err(Error::shape(format!(
            "mask {}x{} does not match latent {}x{}",
            m.height(),
            m.width(),
            eps.height(),
            eps.width()
        )));
    }
    Ok(())
}

/// Mean over all elements of `((eps - eps_hat) * m)^2`.
pub fn masked_diffusion_loss(eps: &LatentTensor, eps_hat: &LatentTensor, m: &LatentMask) -> Result<f64> {
    eps.ensure_same_shape(eps_hat, "masked_diffusion_loss")?;
    check_mask(eps, m)?;
    let plane = eps.height() * eps.width();
    let mask = m.as_raw();
    let sum: f64 = eps
        .as_slice()
        .iter()
        .zip(eps_hat.as_slice())
        .enumerate()
        .filter(|(i, _)| mask[i % plane] != 0)
        .map(|(_, (a, b))| (a - b) * (a - b))
        .sum();
    Ok(sum / eps.len() as f64)
}

/// Gradient of [`masked_diffusion_loss`] with respect to `eps_hat`.
pub fn masked_loss_grad(eps: &LatentTensor, eps_hat: &LatentTensor, m: &LatentMask) -> Result<LatentTensor> {
    eps.ensure_same_shape(eps_hat, "masked_loss_grad")?;
    check_mask(eps, m)?;
    let (c, h, w) = eps.shape();
    let plane = h * w;
    let n = eps.len() as f64;
    let mask = m.as_raw();
    let data = eps
        .as_slice()
        .iter()
        .zip(eps_hat.as_slice())
        .enumerate()
        .map(|(i, (a, b))| {
            if mask[i % plane] != 0 {
                2.0 * (b - a) / n
            } else {
                0.0
            }
        })
        .collect();
    LatentTensor::from_vec(c, h, w, data)
}

/// The prompt each identity is trained under.
pub fn training_prompt(token: &str) -> String {
    format!("a photo of a {token}")
}

/// Timestep and noise sample for one training step.
pub fn training_draw(cfg: &TrainConfig, step: usize, shape: (usize, usize, usize)) -> (usize, LatentTensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(step as u64);
    let t = rng.random_range(1..=cfg.timesteps);
    let (c, h, w) = shape;
    let data = (0..c * h * w).map(|_| rng.sample(StandardNormal)).collect();
    (t, LatentTensor::from_vec(c, h, w, data).expect("shape is consistent"))
}

/// Latent target and latent mask used to train one asset.
pub fn asset_latents(asset: &ObjectAsset, backend: &dyn Backend) -> Result<(LatentTensor, LatentMask)> {
    let z0 = backend.encode_image(&asset.image)?;
    let m = downsample_mask(&asset.mask, backend.profile().downsample_factor)?;
    Ok((z0, m))
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

/// Trains one identity per asset, visiting assets round-robin.
pub fn train_identities(
    assets: &[ObjectAsset],
    cfg: &TrainConfig,
    backend: &dyn Backend,
    class_labels: &[String],
    mut on_step: impl FnMut(usize, f64),
) -> Result<Vec<IdentityEmbedding>> {
    cfg.validate()?;
    if class_labels.len() != assets.len() {
        return Err(Error::Config("one class label per asset is required".into()));
    }
    let mut embeddings = assets
        .iter()
        .zip(class_labels)
        .map(|(a, label)| init_identity(&a.identity_token, label, backend))
        .collect::<Result<Vec<_>>>()?;
    if cfg.steps == 0 || assets.is_empty() {
        return Ok(embeddings);
    }
    if !backend.profile().supports_identity_embeddings {
        return Err(Error::Capability(format!(
            "backend {} cannot train identity embeddings",
            backend.profile().name
        )));
    }
    for a in assets {
        if a.mask.is_empty() {
            return Err(Error::EmptyMask(a.object_id.0.clone()));
        }
    }
    let sched = make_schedule(cfg.timesteps, cfg.schedule)?;
    let targets = assets
        .iter()
        .map(|a| asset_latents(a, backend))
        .collect::<Result<Vec<_>>>()?;
    let dim = backend.profile().embedding_dim;
    let mut adam: Vec<AdamState> = (0..assets.len())
        .map(|_| AdamState {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        })
        .collect();

    for step in 0..cfg.steps {
        let i = step % assets.len();
        let (z0, mask) = &targets[i];
        let (t, eps) = training_draw(cfg, step, z0.shape());
        let z_t = forward_noise(z0, t, &eps, &sched)?;
        let mut bindings = EmbeddingBindings::new();
        for e in &embeddings {
            bindings.bound.insert(e.token.clone(), e.vector.clone());
        }
        let token = embeddings[i].token.clone();
        let cond = backend.encode_prompt(&training_prompt(&token), &bindings)?;
        let eps_hat = backend.predict_noise(&z_t, t, &cond)?;
        let loss = masked_diffusion_loss(&eps, &eps_hat, mask)?;
        if !loss.is_finite() {
            return Err(Error::Numeric {
                step,
                detail: "non-finite training loss".into(),
            });
        }
        let upstream = masked_loss_grad(&eps, &eps_hat, mask)?;
        let slot_grads = backend.identity_gradients(&z_t, t, &cond, &upstream)?;
        let mut grad = vec![0.0; dim];
        for (slot, g) in cond.identity_slots.iter().zip(&slot_grads) {
            if slot.token == token {
                grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
        let emb = &mut embeddings[i];
        match cfg.optimizer {
            Optimizer::GradientDescent => {
                for (v, g) in emb.vector.iter_mut().zip(&grad) {
                    *v -= cfg.learning_rate * g;
                }
            }
            Optimizer::Adam {
                beta1,
                beta2,
                epsilon,
            } => {
                let st = &mut adam[i];
                st.t += 1;
                for k in 0..dim {
                    st.m[k] = beta1 * st.m[k] + (1.0 - beta1) * grad[k];
                    st.v[k] = beta2 * st.v[k] + (1.0 - beta2) * grad[k] * grad[k];
                    let m_hat = st.m[k] / (1.0 - beta1.powi(st.t));
                    let v_hat = st.v[k] / (1.0 - beta2.powi(st.t));
                    emb.vector[k] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + epsilon);
                }
            }
        }
        emb.train_steps += 1;
        emb.loss_trace.push(loss);
        on_step(step, loss);
    }
    Ok(embeddings)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingMetadata {
    pub token: String,
    pub dim: usize,
    pub steps: usize,
    pub lr: f64,
    pub init_source: String,
    pub final_loss: Option<f64>,
    pub loss_trace: Vec<f64>,
}

/// Encodes an embedding as (little-endian f64 vector, metadata JSON).
pub fn encode_embedding(e: &IdentityEmbedding, lr: f64) -> Result<(Vec<u8>, Vec<u8>)> {
    let vector = e.vector.iter().flat_map(|v| v.to_le_bytes()).collect();
    let meta = EmbeddingMetadata {
        token: e.token.clone(),
        dim: e.vector.len(),
        steps: e.train_steps,
        lr,
        init_source: e.init_source.clone(),
        final_loss: e.final_loss(),
        loss_trace: e.loss_trace.clone(),
    };
    Ok((vector, serde_json::to_vec_pretty(&meta)?))
}

pub fn decode_embedding(vector: &[u8], meta: &[u8]) -> Result<IdentityEmbedding> {
    let meta: EmbeddingMetadata = serde_json::from_slice(meta)?;
    if vector.len() != meta.dim * 8 {
        return Err(Error::shape(format!(
            "embedding file holds {} bytes, metadata says dim {}",
            vector.len(),
            meta.dim
        )));
    }
    Ok(IdentityEmbedding {
        token: meta.token,
        vector: vector
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        init_source: meta.init_source,
        train_steps: meta.steps,
        loss_trace: meta.loss_trace,
    })
}

pub fn embedding_file_stem(token: &str) -> String {
    token
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}

/// Writes `{dir}/{token}.bin` and `{dir}/{token}.json`.
pub fn save_embedding(e: &IdentityEmbedding, lr: f64, dir: &Path) -> Result<()> {
    let (vector, meta) = encode_embedding(e, lr)?;
    let stem = embedding_file_stem(&e.token);
    write_atomic(&dir.join(format!("{stem}.bin")), &vector)?;
    write_atomic(&dir.join(format!("{stem}.json")), &meta)
}

pub fn load_embedding(dir: &Path, token: &str) -> Result<IdentityEmbedding> {
    let stem = embedding_file_stem(token);
    let read = |p: std::path::PathBuf| {
        std::fs::read(&p).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound(p.display().to_string()),
            _ => Error::io(&p, e),
        })
    };
    decode_embedding(
        &read(dir.join(format!("{stem}.bin")))?,
        &read(dir.join(format!("{stem}.json")))?,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::ToyBackend;
    use crate::diffusion::SeededNoise;

    #[test]
    fn init_uses_the_class_word() {
        let toy = ToyBackend::new();
        let e = init_identity("<obj-1>", "chair", &toy).unwrap();
        assert_eq!(e.vector, toy.token_embedding("chair").unwrap());
        assert_eq!(e.train_steps, 0);
        assert_eq!(e, init_identity("<obj-1>", "chair", &toy).unwrap());
        assert!(matches!(
            init_identity("<obj-1>", "  ", &toy),
            Err(Error::Tokenization(_))
        ));
    }

    #[test]
    fn loss_examples() {
        let noise = SeededNoise::new(1);
        let eps = noise.stream(0, (2, 4, 4));
        let eps_hat = noise.stream(1, (2, 4, 4));
        assert_eq!(
            masked_diffusion_loss(&eps, &eps_hat, &LatentMask::zeros(4, 4)).unwrap(),
            0.0
        );
        let mse = eps
            .as_slice()
            .iter()
            .zip(eps_hat.as_slice())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / 32.0;
        let full = masked_diffusion_loss(&eps, &eps_hat, &LatentMask::ones(4, 4)).unwrap();
        assert!((full - mse).abs() <= 1e-15 * mse);

        let ones = LatentTensor::from_fn(2, 4, 4, |_, _, _| 1.0);
        let zeros = LatentTensor::zeros(2, 4, 4);
        let half = LatentMask::from_fn(4, 4, |y, _| y < 2);
        assert_eq!(masked_diffusion_loss(&ones, &zeros, &half).unwrap(), 0.5);
        assert!(matches!(
            masked_diffusion_loss(&ones, &zeros, &LatentMask::ones(2, 4)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn embedding_files_round_trip() {
        let toy = ToyBackend::new();
        let mut e = init_identity("<obj-a>", "table", &toy).unwrap();
        e.loss_trace = vec![0.5, 0.25];
        e.train_steps = 2;
        let dir = tempfile::tempdir().unwrap();
        save_embedding(&e, 0.01, dir.path()).unwrap();
        assert_eq!(load_embedding(dir.path(), "<obj-a>").unwrap(), e);
    }
}
