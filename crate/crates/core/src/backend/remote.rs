use std::path::PathBuf;

use image::RgbImage;
use serde_json::json;

use super::wire::{self, AdapterRequest, Transport};
use super::{Backend, BackendProfile, PromptEncoding};
use crate::diffusion::LatentTensor;
use crate::error::{Error, Result};
use crate::raster;
use crate::store::write_atomic;

/// A pretrained model stack running in another process.
///
/// Identity embeddings can be bound at inference time but not trained:
/// gradients are not part of the wire contract.
#[derive(Debug, Clone)]
pub struct RemoteBackend {
    profile: BackendProfile,
    transport: Transport,
    workdir: PathBuf,
}

impl RemoteBackend {
    pub fn new(profile: BackendProfile, transport: Transport, workdir: impl Into<PathBuf>) -> Self {
        Self {
            profile,
            transport,
            workdir: workdir.into(),
        }
    }

    fn stage(&self, ext: &str, bytes: &[u8]) -> Result<PathBuf> {
        let name = wire::request_hash("payload", &serde_json::Value::Null, &[bytes]);
        let path = self.workdir.join(format!("{name}.{ext}"));
        if !path.exists() {
            write_atomic(&path, bytes)?;
        }
        Ok(path)
    }

    fn fetch(&self, req: &AdapterRequest, artifact: &str) -> Result<Vec<u8>> {
        let resp = self.transport.call(req)?;
        let path = resp.artifact(artifact)?;
        std::fs::read(path).map_err(|e| Error::io(path, e))
    }

    fn check_shape(&self, z: &LatentTensor, want: (usize, usize, usize)) -> Result<()> {
        if z.shape() != want {
            return Err(Error::ContractViolation(format!(
                "server returned latent {:?}, expected {want:?}",
                z.shape()
            )));
        }
        Ok(())
    }
}

impl Backend for RemoteBackend {
    fn profile(&self) -> &BackendProfile {
        &self.profile
    }

    fn encode_image(&self, image: &RgbImage) -> Result<LatentTensor> {
        let shape = self.profile.latent_shape(image.width(), image.height())?;
        let mut req = AdapterRequest::new("encode_image");
        req.payload.insert(
            "image".into(),
            self.stage("png", &raster::encode_png_rgb(image)?)?,
        );
        req.resolution = Some([image.width(), image.height()]);
        let z = wire::latent_from_bytes(&self.fetch(&req, "latent")?)?;
        self.check_shape(&z, shape)?;
        Ok(z)
    }

    fn decode_latent(&self, z: &LatentTensor) -> Result<RgbImage> {
        let f = self.profile.downsample_factor;
        let (w, h) = (z.width() as u32 * f, z.height() as u32 * f);
        let mut req = AdapterRequest::new("decode_latent");
        req.payload
            .insert("latent".into(), self.stage("latent", &wire::latent_to_bytes(z))?);
        req.resolution = Some([w, h]);
        let img = raster::decode_png_rgb(&self.fetch(&req, "image")?)
            .map_err(|e| Error::ContractViolation(e.to_string()))?;
        if img.dimensions() != (w, h) {
            return Err(Error::ContractViolation(format!(
                "decoded image is {}x{}, expected {w}x{h}",
                img.width(),
                img.height()
            )));
        }
        Ok(img)
    }

    fn token_embedding(&self, word: &str) -> Result<Vec<f64>> {
        if word.is_empty() {
            return Err(Error::Tokenization("empty token".into()));
        }
        let mut req = AdapterRequest::new("token_embedding");
        req.prompt_text = word.to_owned();
        let rows = wire::matrix_from_bytes(&self.fetch(&req, "vector")?)?;
        match rows.into_iter().next() {
            Some(v) if v.len() == self.profile.embedding_dim => Ok(v),
            _ => Err(Error::ContractViolation(
                "token embedding has the wrong dimension".into(),
            )),
        }
    }

    fn predict_noise(
        &self,
        z_t: &LatentTensor,
        t: usize,
        cond: &PromptEncoding,
    ) -> Result<LatentTensor> {
        if z_t.channels() != self.profile.latent_channels {
            return Err(Error::shape(format!(
                "latent has {} channels, backend expects {}",
                z_t.channels(),
                self.profile.latent_channels
            )));
        }
        let mut req = AdapterRequest::new("predict_noise");
        req.payload.insert(
            "latent".into(),
            self.stage("latent", &wire::latent_to_bytes(z_t))?,
        );
        req.payload.insert(
            "prompt_embedding".into(),
            self.stage("mat", &wire::matrix_to_bytes(&cond.embedding_matrix))?,
        );
        req.prompt_text = cond.prompt_text.clone();
        req.params.insert("t".into(), json!(t));
        req.params
            .insert("guidance_scale".into(), json!(cond.guidance_scale));
        let eps = wire::latent_from_bytes(&self.fetch(&req, "latent")?)?;
        self.check_shape(&eps, z_t.shape())?;
        Ok(eps)
    }
}
