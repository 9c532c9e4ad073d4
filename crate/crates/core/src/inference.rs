//! Two-phase scene inference.
//!
//! Levels `t > alpha * T` run the blended phase: the latent is denoised
//! under the background prompt and every foreground cell is replaced by the
//! guide's latent re-noised to the output level. The remaining levels
//! denoise freely under the global prompt. Each iteration at level `t`
//! produces the level `t - 1` latent.

use std::collections::BTreeMap;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::backend::{Backend, EmbeddingBindings};
use crate::compose::CompositeGuide;
use crate::diffusion::{
    blend_latents, forward_noise, sampler_step, LatentTensor, NoiseSchedule, SeededNoise,
};
use crate::error::{Error, Result};
use crate::identity::IdentityEmbedding;
use crate::raster::BinaryMask;
use crate::scene::{ObjectId, RenderConfig, SceneSpec};

const PREPOSITIONS: &[&str] = &[
    "in", "on", "at", "by", "under", "near", "inside", "beside", "over", "across", "along",
    "behind", "above", "below", "within", "onto", "into", "beneath", "around", "through",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptPair {
    pub global_prompt: String,
    pub background_prompt: String,
}

/// Turns a locative background ("in a room") into a noun phrase ("a room").
pub fn background_noun_phrase(background: &str) -> String {
    let text = background.trim();
    let mut words = text.splitn(2, char::is_whitespace);
    match (words.next(), words.next()) {
        (Some(first), Some(rest))
            if PREPOSITIONS.contains(&first.to_lowercase().as_str()) && !rest.trim().is_empty() =>
        {
            rest.trim().to_owned()
        }
        _ => text.to_owned(),
    }
}

/// Builds the global and background prompts for a scene.
///
/// Objects with a trained embedding are referred to by their identity token.
/// Objects without one are an error unless `allow_untrained` is set, in which
/// case their class label is used verbatim.
pub fn build_prompts(
    spec: &SceneSpec,
    embeddings: &BTreeMap<ObjectId, IdentityEmbedding>,
    allow_untrained: bool,
) -> Result<PromptPair> {
    let mut names = Vec::with_capacity(spec.objects.len());
    for obj in &spec.objects {
        match embeddings.get(&obj.object_id) {
            Some(e) => names.push(e.token.clone()),
            None if allow_untrained => names.push(obj.class_label.clone()),
            None => return Err(Error::Binding(obj.identity_token())),
        }
    }
    let background = spec.background_text.trim();
    let mut global = format!("a photo of a {}", names.join(" and "));
    if !background.is_empty() {
        global.push(' ');
        global.push_str(background);
    }
    let noun = background_noun_phrase(background);
    let background_prompt = if noun.is_empty() {
        "a photo".to_owned()
    } else {
        format!("a photo of {noun}")
    };
    Ok(PromptPair {
        global_prompt: global,
        background_prompt,
    })
}

pub fn bindings_for(embeddings: &BTreeMap<ObjectId, IdentityEmbedding>) -> EmbeddingBindings {
    let mut b = EmbeddingBindings::new();
    for e in embeddings.values() {
        b.bound.insert(e.token.clone(), e.vector.clone());
    }
    b
}

/// Applies the config's prompt overrides, if any.
pub fn effective_prompts(built: &PromptPair, cfg: &RenderConfig) -> PromptPair {
    PromptPair {
        global_prompt: cfg
            .global_prompt
            .clone()
            .unwrap_or_else(|| built.global_prompt.clone()),
        background_prompt: cfg
            .background_prompt
            .clone()
            .unwrap_or_else(|| built.background_prompt.clone()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Blended,
    Customized,
}

/// Whether the iteration at level `t` is blended.
pub fn is_blended(t: usize, alpha: f64, steps: usize) -> bool {
    t as f64 > alpha * steps as f64
}

/// What one iteration produced. `background` and `foreground` are only
/// present in the blended phase.
#[derive(Debug)]
pub struct StepRecord<'a> {
    pub t: usize,
    pub phase: Phase,
    pub output: &'a LatentTensor,
    pub background: Option<&'a LatentTensor>,
    pub foreground: Option<&'a LatentTensor>,
}

#[derive(Debug, Clone, Copy)]
pub struct InferenceRequest<'a> {
    pub guide: &'a CompositeGuide,
    pub config: &'a RenderConfig,
    pub prompts: &'a PromptPair,
    pub bindings: &'a EmbeddingBindings,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceOutput {
    pub image: RgbImage,
    pub latent: LatentTensor,
}

/// Runs the full recurrence and decodes the final latent.
pub fn run_scene_inference(
    req: InferenceRequest<'_>,
    backend: &dyn Backend,
    sched: &NoiseSchedule,
    observer: &mut dyn FnMut(&StepRecord<'_>),
) -> Result<InferenceOutput> {
    let cfg = req.config;
    let guide = req.guide;
    let res = cfg.resolution;
    if guide.x_init.dimensions() != (res.width, res.height) {
        return Err(Error::shape(format!(
            "guide is {:?} but the render resolution is {}x{}",
            guide.x_init.dimensions(),
            res.width,
            res.height
        )));
    }
    if !(0.0..=1.0).contains(&cfg.alpha) {
        return Err(Error::Config(format!("alpha {} outside [0, 1]", cfg.alpha)));
    }
    if sched.steps() != cfg.steps {
        return Err(Error::Config(format!(
            "schedule has {} steps, config asks for {}",
            sched.steps(),
            cfg.steps
        )));
    }
    let z_init = backend.encode_image(&guide.x_init)?;
    let shape = z_init.shape();
    let mask = &guide.mask_latent;
    if (mask.height(), mask.width()) != (shape.1, shape.2) {
        return Err(Error::shape("latent mask does not match the encoded guide"));
    }
    let cond_bg = backend
        .encode_prompt(&req.prompts.background_prompt, req.bindings)?
        .with_guidance(cfg.guidance_scale);
    let cond_global = backend
        .encode_prompt(&req.prompts.global_prompt, req.bindings)?
        .with_guidance(cfg.guidance_scale);

    let noise = SeededNoise::new(cfg.seed);
    let mut z = noise.initial_latent(shape);
    let steps = cfg.steps;
    for t in (1..=steps).rev() {
        let next = if is_blended(t, cfg.alpha, steps) {
            let eps_hat = backend.predict_noise(&z, t, &cond_bg)?;
            let z_bg = sampler_step(&z, &eps_hat, t, sched)?;
            let eps_t = noise.step_noise(t, shape);
            let z_fg = forward_noise(&z_init, t - 1, &eps_t, sched)?;
            let blended = blend_latents(&z_bg, &z_fg, mask)?;
            observer(&StepRecord {
                t,
                phase: Phase::Blended,
                output: &blended,
                background: Some(&z_bg),
                foreground: Some(&z_fg),
            });
            blended
        } else {
            let eps_hat = backend.predict_noise(&z, t, &cond_global)?;
            let out = sampler_step(&z, &eps_hat, t, sched)?;
            observer(&StepRecord {
                t,
                phase: Phase::Customized,
                output: &out,
                background: None,
                foreground: None,
            });
            out
        };
        if !next.is_finite() {
            return Err(Error::Numeric {
                step: t,
                detail: "latent became non-finite".into(),
            });
        }
        z = next;
    }
    Ok(InferenceOutput {
        image: backend.decode_latent(&z)?,
        latent: z,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Mean absolute deviation from the guide inside the foreground mask, in [0, 1].
    pub fg_fidelity: f64,
    /// Mean luminance gradient magnitude along the mask boundary, in [0, 1]-units per pixel.
    pub seam_score: f64,
}

fn luma(img: &RgbImage, x: u32, y: u32) -> f64 {
    let p = img.get_pixel(x, y);
    (p[0] as f64 + p[1] as f64 + p[2] as f64) / (3.0 * 255.0)
}

pub fn diagnostics(output: &RgbImage, guide: &CompositeGuide) -> Diagnostics {
    let mask: &BinaryMask = &guide.mask_full;
    let (w, h) = output.dimensions();
    let mut dev = 0.0;
    let mut inside = 0usize;
    let mut seam = 0.0;
    let mut boundary = 0usize;
    for y in 0..h {
        for x in 0..w {
            if !mask.get(x, y) {
                continue;
            }
            inside += 1;
            let (a, b) = (output.get_pixel(x, y), guide.x_init.get_pixel(x, y));
            dev += (0..3)
                .map(|c| (a[c] as f64 - b[c] as f64).abs())
                .sum::<f64>()
                / (3.0 * 255.0);
            let on_edge = (x > 0 && !mask.get(x - 1, y))
                || (y > 0 && !mask.get(x, y - 1))
                || (x + 1 < w && !mask.get(x + 1, y))
                || (y + 1 < h && !mask.get(x, y + 1));
            if on_edge {
                boundary += 1;
                let dx = luma(output, (x + 1).min(w - 1), y) - luma(output, x.saturating_sub(1), y);
                let dy = luma(output, x, (y + 1).min(h - 1)) - luma(output, x, y.saturating_sub(1));
                seam += (dx * dx + dy * dy).sqrt() / 2.0;
            }
        }
    }
    Diagnostics {
        fg_fidelity: if inside == 0 { 0.0 } else { dev / inside as f64 },
        seam_score: if boundary == 0 { 0.0 } else { seam / boundary as f64 },
    }
}

#[derive(Debug)]
pub struct SweepEntry {
    pub alpha: f64,
    pub result: Result<(RgbImage, Diagnostics)>,
}

/// Renders once per alpha with a shared seed. A failing entry does not stop the sweep.
pub fn render_alpha_sweep(
    guide: &CompositeGuide,
    base: &RenderConfig,
    alphas: &[f64],
    prompts: &PromptPair,
    bindings: &EmbeddingBindings,
    backend: &dyn Backend,
    sched: &NoiseSchedule,
) -> Vec<SweepEntry> {
    alphas
        .iter()
        .map(|&alpha| {
            let cfg = RenderConfig {
                alpha,
                ..base.clone()
            };
            let req = InferenceRequest {
                guide,
                config: &cfg,
                prompts,
                bindings,
            };
            let result = run_scene_inference(req, backend, sched, &mut |_| {}).map(|out| {
                let d = diagnostics(&out.image, guide);
                (out.image, d)
            });
            SweepEntry { alpha, result }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{BoxRegion, Canvas, ObjectAnnotation};
    use chrono::DateTime;
    use image::GrayImage;

    fn spec(objects: &[(&str, &str)], background: &str) -> SceneSpec {
        SceneSpec {
            scene_id: "s".into(),
            sketch: GrayImage::new(8, 8),
            sketch_path: "sketch.png".into(),
            canvas: Canvas {
                width: 8,
                height: 8,
            },
            objects: objects
                .iter()
                .map(|(id, label)| ObjectAnnotation::new(*id, label, BoxRegion::new(0, 0, 4, 4)))
                .collect(),
            background_text: background.into(),
            created_at: DateTime::from_timestamp(0, 0).unwrap(),
        }
    }

    #[test]
    fn class_label_prompts_match_the_reference_example() {
        let s = spec(&[("1", "chair"), ("2", "table")], "in a room");
        let p = build_prompts(&s, &BTreeMap::new(), true).unwrap();
        assert_eq!(p.global_prompt, "a photo of a chair and table in a room");
        assert_eq!(p.background_prompt, "a photo of a room");
    }

    #[test]
    fn identity_token_prompts() {
        let s = spec(&[("cat", "cat")], "on the road");
        let e = IdentityEmbedding {
            token: "<obj-cat>".into(),
            vector: vec![0.0; 4],
            init_source: "cat".into(),
            train_steps: 0,
            loss_trace: vec![],
        };
        let map = BTreeMap::from([(ObjectId("cat".into()), e)]);
        let p = build_prompts(&s, &map, false).unwrap();
        assert_eq!(p.global_prompt, "a photo of a <obj-cat> on the road");
        assert_eq!(p.background_prompt, "a photo of the road");
        assert!(!p.background_prompt.contains('<'));
    }

    #[test]
    fn missing_embedding_without_opt_in_is_a_binding_error() {
        let s = spec(&[("1", "chair")], "in a room");
        assert!(matches!(
            build_prompts(&s, &BTreeMap::new(), false),
            Err(Error::Binding(t)) if t == "<obj-1>"
        ));
    }

    #[test]
    fn phase_boundary_is_strict() {
        assert!(!is_blended(5, 0.5, 10));
        assert!(is_blended(6, 0.5, 10));
        assert!(is_blended(1, 0.0, 10));
        assert!(!is_blended(10, 1.0, 10));
    }
}
