use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use image::{Rgb, RgbImage};

use super::{stable_hash, Backend, BackendProfile, PromptEncoding};
use crate::diffusion::LatentTensor;
use crate::error::{Error, Result};

pub const TOY_EMBEDDING_DIM: usize = 16;
/// Half-width of the uniform distribution vocabulary embeddings are drawn from.
const TOKEN_SCALE: f64 = 0.3;
/// Gain applied to the projected prompt embedding.
const BIAS_GAIN: f64 = 12.0;
const WEIGHT_SALT: u64 = 0x5eed_70e1_b1a5_0001;

/// Analytic denoiser: `eps_hat = A * z + b(cond)`.
///
/// `A` is a fixed per-channel diagonal. `b(cond)` projects the mean prompt
/// embedding through hash-generated weights, so it is linear in every
/// identity vector and trained embeddings change predictions. The codec is
/// block-average encode and nearest-neighbour decode.
pub struct ToyBackend {
    profile: BackendProfile,
    weights: Mutex<HashMap<(usize, usize, usize), Arc<Vec<f64>>>>,
}

impl std::fmt::Debug for ToyBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ToyBackend")
            .field("profile", &self.profile)
            .finish()
    }
}

impl Default for ToyBackend {
    fn default() -> Self {
        Self::with_geometry(2, 2)
    }
}

impl ToyBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_geometry(latent_channels: usize, downsample_factor: u32) -> Self {
        assert!(latent_channels >= 1 && downsample_factor >= 1);
        Self {
            profile: BackendProfile {
                name: "toy".into(),
                latent_channels,
                downsample_factor,
                supports_identity_embeddings: true,
                max_prompt_tokens: 77,
                embedding_dim: TOY_EMBEDDING_DIM,
            },
            weights: Mutex::new(HashMap::new()),
        }
    }

    /// Diagonal entry of `A` for a channel.
    pub fn channel_gain(&self, channel: usize) -> f64 {
        0.95 - 0.05 * (channel % 4) as f64
    }

    fn projection(&self, shape: (usize, usize, usize)) -> Arc<Vec<f64>> {
        let mut cache = self.weights.lock().unwrap();
        cache
            .entry(shape)
            .or_insert_with(|| {
                let (c, h, w) = shape;
                let n = c * h * w * TOY_EMBEDDING_DIM;
                let mut state = WEIGHT_SALT ^ ((c as u64) << 40) ^ ((h as u64) << 20) ^ w as u64;
                let scale = 3f64.sqrt();
                Arc::new((0..n).map(|_| unit_uniform(&mut state) * scale).collect())
            })
            .clone()
    }

    fn pooled(cond: &PromptEncoding) -> Vec<f64> {
        let mut e = vec![0.0; TOY_EMBEDDING_DIM];
        if cond.embedding_matrix.is_empty() {
            return e;
        }
        for row in &cond.embedding_matrix {
            for (acc, v) in e.iter_mut().zip(row) {
                *acc += v;
            }
        }
        let n = cond.embedding_matrix.len() as f64;
        e.iter_mut().for_each(|v| *v /= n);
        e
    }

    /// The conditioning offset `b(cond)` for a latent shape.
    pub fn bias(&self, cond: &PromptEncoding, shape: (usize, usize, usize)) -> LatentTensor {
        let e = Self::pooled(cond);
        let w = self.projection(shape);
        let (c, h, wd) = shape;
        let data = w
            .chunks_exact(TOY_EMBEDDING_DIM)
            .map(|row| BIAS_GAIN * row.iter().zip(&e).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        LatentTensor::from_vec(c, h, wd, data).expect("shape is consistent")
    }

    fn check_latent(&self, z: &LatentTensor) -> Result<()> {
        if z.channels() != self.profile.latent_channels {
            return Err(Error::shape(format!(
                "latent has {} channels, backend expects {}",
                z.channels(),
                self.profile.latent_channels
            )));
        }
        Ok(())
    }

    fn rgb_to_channels(&self, rgb: [f64; 3], out: &mut [f64]) {
        let [r, g, b] = rgb;
        match out.len() {
            1 => out[0] = (r + g + b) / 3.0,
            2 => {
                out[0] = (r + g + b) / 3.0;
                out[1] = (r - b) / 2.0;
            }
            _ => {
                out[..3].copy_from_slice(&rgb);
                out[3..].iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    fn channels_to_rgb(&self, ch: &[f64]) -> [f64; 3] {
        match ch.len() {
            1 => [ch[0]; 3],
            2 => [ch[0] + ch[1], ch[0], ch[0] - ch[1]],
            _ => [ch[0], ch[1], ch[2]],
        }
    }
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Uniform in [-1, 1).
fn unit_uniform(state: &mut u64) -> f64 {
    (splitmix64(state) >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

fn to_unit(v: u8) -> f64 {
    v as f64 / 127.5 - 1.0
}

fn to_byte(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

impl Backend for ToyBackend {
    fn profile(&self) -> &BackendProfile {
        &self.profile
    }

    fn encode_image(&self, image: &RgbImage) -> Result<LatentTensor> {
        let (c, h, w) = self.profile.latent_shape(image.width(), image.height())?;
        let f = self.profile.downsample_factor as usize;
        let mut z = LatentTensor::zeros(c, h, w);
        let mut ch = vec![0.0; c];
        let plane = h * w;
        let data = z.as_mut_slice();
        for (x, y, p) in image.enumerate_pixels() {
            self.rgb_to_channels(p.0.map(to_unit), &mut ch);
            let cell = (y as usize / f) * w + x as usize / f;
            for (k, v) in ch.iter().enumerate() {
                data[k * plane + cell] += v;
            }
        }
        let n = (f * f) as f64;
        data.iter_mut().for_each(|v| *v /= n);
        Ok(z)
    }

    fn decode_latent(&self, z: &LatentTensor) -> Result<RgbImage> {
        self.check_latent(z)?;
        let f = self.profile.downsample_factor;
        let (c, h, w) = z.shape();
        let mut ch = vec![0.0; c];
        let mut cells = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                for (k, v) in ch.iter_mut().enumerate() {
                    *v = z.get(k, y, x);
                }
                cells.push(Rgb(self.channels_to_rgb(&ch).map(to_byte)));
            }
        }
        Ok(RgbImage::from_fn(w as u32 * f, h as u32 * f, |x, y| {
            cells[(y / f) as usize * w + (x / f) as usize]
        }))
    }

    fn token_embedding(&self, word: &str) -> Result<Vec<f64>> {
        if word.is_empty() {
            return Err(Error::Tokenization("empty token".into()));
        }
        let mut state = stable_hash(word);
        Ok((0..TOY_EMBEDDING_DIM)
            .map(|_| unit_uniform(&mut state) * TOKEN_SCALE)
            .collect())
    }

    fn predict_noise(
        &self,
        z_t: &LatentTensor,
        t: usize,
        cond: &PromptEncoding,
    ) -> Result<LatentTensor> {
        self.check_latent(z_t)?;
        if t == 0 {
            return Err(Error::Range("noise prediction needs t >= 1".into()));
        }
        let shape = z_t.shape();
        let mut out = self.bias(cond, shape);
        let plane = shape.1 * shape.2;
        for (i, (o, z)) in out
            .as_mut_slice()
            .iter_mut()
            .zip(z_t.as_slice())
            .enumerate()
        {
            *o += self.channel_gain(i / plane) * z;
        }
        Ok(out)
    }

    fn identity_gradients(
        &self,
        z_t: &LatentTensor,
        _t: usize,
        cond: &PromptEncoding,
        upstream: &LatentTensor,
    ) -> Result<Vec<Vec<f64>>> {
        self.check_latent(z_t)?;
        z_t.ensure_same_shape(upstream, "identity_gradients")?;
        let w = self.projection(z_t.shape());
        let mut g = vec![0.0; TOY_EMBEDDING_DIM];
        for (row, u) in w.chunks_exact(TOY_EMBEDDING_DIM).zip(upstream.as_slice()) {
            if *u == 0.0 {
                continue;
            }
            for (acc, wd) in g.iter_mut().zip(row) {
                *acc += u * wd;
            }
        }
        let n = cond.embedding_matrix.len().max(1) as f64;
        g.iter_mut().for_each(|v| *v *= BIAS_GAIN / n);
        Ok(vec![g; cond.identity_slots.len()])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::EmbeddingBindings;
    use crate::diffusion::SeededNoise;

    #[test]
    fn constant_gray_round_trips_exactly() {
        let toy = ToyBackend::new();
        let img = RgbImage::from_pixel(8, 6, Rgb([90, 90, 90]));
        let z = toy.encode_image(&img).unwrap();
        assert_eq!(z.shape(), (2, 3, 4));
        let first = z.get(0, 0, 0);
        assert!(z.as_slice()[..12].iter().all(|v| *v == first));
        assert_eq!(toy.decode_latent(&z).unwrap(), img);
    }

    #[test]
    fn odd_dimensions_are_a_shape_error() {
        let toy = ToyBackend::with_geometry(4, 8);
        let img = RgbImage::new(511, 512);
        assert!(matches!(toy.encode_image(&img), Err(Error::Shape(_))));
    }

    #[test]
    fn prediction_at_zero_is_the_bias() {
        let toy = ToyBackend::new();
        let cond = toy
            .encode_prompt("a photo of a room", &EmbeddingBindings::new())
            .unwrap();
        let z = LatentTensor::zeros(2, 3, 3);
        assert_eq!(
            toy.predict_noise(&z, 4, &cond).unwrap(),
            toy.bias(&cond, (2, 3, 3))
        );
        let wrong = LatentTensor::zeros(3, 3, 3);
        assert!(matches!(
            toy.predict_noise(&wrong, 4, &cond),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn prediction_matches_scalar_loop() {
        let toy = ToyBackend::new();
        let cond = toy
            .encode_prompt("a photo of the road", &EmbeddingBindings::new())
            .unwrap();
        let z = SeededNoise::new(5).stream(0, (2, 4, 5));
        let out = toy.predict_noise(&z, 7, &cond).unwrap();
        let b = toy.bias(&cond, z.shape());
        for c in 0..2 {
            for y in 0..4 {
                for x in 0..5 {
                    let want = toy.channel_gain(c) * z.get(c, y, x) + b.get(c, y, x);
                    assert_eq!(out.get(c, y, x), want);
                }
            }
        }
    }
}
