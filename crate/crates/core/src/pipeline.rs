//! End-to-end stages shared by the CLI and the HTTP service.
//!
//! Every stage returns its outputs as named, encoded [`Artifact`]s. The CLI
//! writes them below its output directory and the service stores them in the
//! artifact store, so both surfaces produce byte-identical files.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::backend::{Backend, ObjectAdapters};
use crate::compose::{compose_guide, encode_guide, CompositeGuide, FILLER};
use crate::diffusion::{make_schedule, ScheduleKind};
use crate::error::{Error, Result};
use crate::identity::{embedding_file_stem, encode_embedding, train_identities, IdentityEmbedding, TrainConfig};
use crate::inference::{
    bindings_for, build_prompts, diagnostics, effective_prompts, run_scene_inference, Diagnostics,
    InferenceRequest, PromptPair,
};
use crate::objects::{self, encode_asset, generate_objects, ObjectAsset, DEFAULT_RETRIES};
use crate::raster;
use crate::scene::{self, ObjectId, RenderConfig, SceneSpec};
use crate::store::{sha256_hex, write_atomic};

pub const MEDIA_PNG: &str = "image/png";
pub const MEDIA_JSON: &str = "application/json";
pub const MEDIA_BINARY: &str = "application/octet-stream";

/// An encoded output file, named by its path relative to the scene workspace.
#[derive(Debug, Clone, PartialEq)]
pub struct Artifact {
    pub name: String,
    pub media_type: &'static str,
    pub bytes: Vec<u8>,
}

impl Artifact {
    fn new(name: impl Into<String>, media_type: &'static str, bytes: Vec<u8>) -> Self {
        Self {
            name: name.into(),
            media_type,
            bytes,
        }
    }

    pub fn sha256(&self) -> String {
        sha256_hex(&self.bytes)
    }
}

/// Writes artifacts below `root`, creating directories as needed.
pub fn write_artifacts(root: &Path, artifacts: &[Artifact]) -> Result<()> {
    for a in artifacts {
        write_atomic(&root.join(&a.name), &a.bytes)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgressEvent {
    pub step: usize,
    pub total: usize,
    pub note: String,
}

pub type Progress<'a> = &'a mut dyn FnMut(ProgressEvent);

/// A scene together with whatever stages have already run for it.
#[derive(Debug, Clone)]
pub struct SceneState {
    pub spec: SceneSpec,
    pub assets: BTreeMap<ObjectId, ObjectAsset>,
    pub embeddings: BTreeMap<ObjectId, IdentityEmbedding>,
}

impl SceneState {
    pub fn new(spec: SceneSpec) -> Self {
        Self {
            spec,
            assets: BTreeMap::new(),
            embeddings: BTreeMap::new(),
        }
    }

    /// Loads the scene document plus any assets and embeddings already saved
    /// in `workspace`.
    pub fn load(doc_path: &Path, workspace: &Path) -> Result<Self> {
        let mut state = Self::new(scene::load_scene(doc_path)?);
        let asset_dir = workspace.join("assets");
        let emb_dir = workspace.join("embeddings");
        for obj in &state.spec.objects {
            match objects::load_asset(&asset_dir, &obj.object_id) {
                Ok(a) => {
                    state.assets.insert(obj.object_id.clone(), a);
                }
                Err(Error::NotFound(_)) => continue,
                Err(e) => return Err(e),
            }
            match crate::identity::load_embedding(&emb_dir, &obj.identity_token()) {
                Ok(e) => {
                    state.embeddings.insert(obj.object_id.clone(), e);
                }
                Err(Error::NotFound(_)) => {}
                Err(e) => return Err(e),
            }
        }
        Ok(state)
    }

    fn ordered_assets(&self) -> Result<Vec<ObjectAsset>> {
        self.spec
            .objects
            .iter()
            .map(|o| {
                self.assets.get(&o.object_id).cloned().ok_or_else(|| {
                    Error::NotFound(format!("no generated asset for object {}", o.object_id))
                })
            })
            .collect()
    }
}

fn asset_artifacts(asset: &ObjectAsset, prompt: &str) -> Result<Vec<Artifact>> {
    let (image, mask, meta) = encode_asset(asset, prompt)?;
    let base = format!("assets/{}", asset.object_id);
    Ok(vec![
        Artifact::new(format!("{base}/image.png"), MEDIA_PNG, image),
        Artifact::new(format!("{base}/mask.png"), MEDIA_PNG, mask),
        Artifact::new(format!("{base}/asset.json"), MEDIA_JSON, meta),
    ])
}

fn embedding_artifacts(e: &IdentityEmbedding, lr: f64) -> Result<Vec<Artifact>> {
    let (vector, meta) = encode_embedding(e, lr)?;
    let stem = embedding_file_stem(&e.token);
    Ok(vec![
        Artifact::new(format!("embeddings/{stem}.bin"), MEDIA_BINARY, vector),
        Artifact::new(format!("embeddings/{stem}.json"), MEDIA_JSON, meta),
    ])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuideHashes {
    pub x_init: String,
    pub mask_full: String,
    pub mask_latent: String,
    pub placement: String,
}

/// Deterministic record of one render. Wall-clock timing lives in a separate file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderManifest {
    pub scene_id: String,
    pub config: RenderConfig,
    pub prompts: PromptPair,
    pub backend: String,
    pub schedule: ScheduleKind,
    pub guide: GuideHashes,
    pub assets: BTreeMap<String, String>,
    pub embeddings: BTreeMap<String, String>,
    pub diagnostics: Diagnostics,
    pub image_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderTiming {
    pub total_ms: f64,
    pub step_ms: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RenderOutcome {
    pub image: RgbImage,
    pub manifest: RenderManifest,
    pub timing: RenderTiming,
    /// Directory (relative to the workspace) holding image, manifest and timing.
    pub dir: String,
    /// Render files plus any assets, embeddings and guide files produced on the way.
    pub artifacts: Vec<Artifact>,
}

impl RenderOutcome {
    pub fn image_artifact(&self) -> &Artifact {
        self.artifact("image.png")
    }

    pub fn manifest_artifact(&self) -> &Artifact {
        self.artifact("manifest.json")
    }

    fn artifact(&self, file: &str) -> &Artifact {
        let name = format!("{}/{file}", self.dir);
        self.artifacts
            .iter()
            .find(|a| a.name == name)
            .expect("render outcome always carries its own files")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub alpha: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub render_dir: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image_sha256: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<Diagnostics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub records: Vec<SweepRecord>,
    pub grid: RgbImage,
    pub dir: String,
    pub artifacts: Vec<Artifact>,
}

/// Names a render directory by its config.
pub fn render_dir(cfg: &RenderConfig) -> String {
    let digest = sha256_hex(&serde_json::to_vec(cfg).expect("config serializes"));
    format!("renders/a{}_s{}_t{}_{}", cfg.alpha, cfg.seed, cfg.steps, &digest[..8])
}

pub fn sweep_dir(base: &RenderConfig, alphas: &[f64]) -> String {
    let digest = sha256_hex(
        &serde_json::to_vec(&(base, alphas)).expect("sweep parameters serialize"),
    );
    format!("sweeps/s{}_t{}_{}", base.seed, base.steps, &digest[..8])
}

/// Horizontal strip of renders; failed entries show as filler tiles.
pub fn sweep_grid(tiles: &[Option<&RgbImage>], width: u32, height: u32) -> RgbImage {
    let n = tiles.len().max(1) as u32;
    let mut grid = RgbImage::from_pixel(width * n, height, Rgb([255, 255, 255]));
    for (i, tile) in tiles.iter().enumerate() {
        let x = i as i64 * width as i64;
        match tile {
            Some(img) => image::imageops::replace(&mut grid, *img, x, 0),
            None => image::imageops::replace(
                &mut grid,
                &RgbImage::from_pixel(width, height, FILLER),
                x,
                0,
            ),
        }
    }
    grid
}

pub struct Pipeline {
    pub backend: Arc<dyn Backend>,
    pub adapters: Arc<dyn ObjectAdapters>,
    pub retries: u32,
    pub schedule: ScheduleKind,
    pub train: TrainConfig,
}

impl Pipeline {
    pub fn new(backend: Arc<dyn Backend>, adapters: Arc<dyn ObjectAdapters>) -> Self {
        Self {
            backend,
            adapters,
            retries: DEFAULT_RETRIES,
            schedule: ScheduleKind::default(),
            train: TrainConfig::default(),
        }
    }

    pub fn factor(&self) -> u32 {
        self.backend.profile().downsample_factor
    }

    /// Generates assets for every object, or just `only`. Regenerated objects
    /// lose their trained embeddings.
    pub fn generate(
        &self,
        state: &mut SceneState,
        seed: u64,
        only: Option<&ObjectId>,
    ) -> Result<Vec<Artifact>> {
        let assets = generate_objects(&state.spec, seed, self.adapters.as_ref(), self.retries, only)?;
        let mut out = Vec::new();
        for asset in assets {
            let prompt = state
                .spec
                .object(&asset.object_id)
                .map(|o| o.effective_prompt())
                .unwrap_or_default();
            out.extend(asset_artifacts(&asset, &prompt)?);
            state.embeddings.remove(&asset.object_id);
            state.assets.insert(asset.object_id.clone(), asset);
        }
        Ok(out)
    }

    /// Trains identity embeddings for all objects jointly.
    pub fn train(
        &self,
        state: &mut SceneState,
        cfg: &TrainConfig,
        progress: Progress<'_>,
    ) -> Result<Vec<Artifact>> {
        let assets = state.ordered_assets()?;
        let labels: Vec<String> = state
            .spec
            .objects
            .iter()
            .map(|o| o.class_label.clone())
            .collect();
        let total = cfg.steps;
        let trained = train_identities(&assets, cfg, self.backend.as_ref(), &labels, |step, loss| {
            progress(ProgressEvent {
                step: step + 1,
                total,
                note: format!("loss {loss:.6}"),
            })
        })?;
        let mut out = Vec::new();
        for (obj, e) in state.spec.objects.iter().zip(trained) {
            out.extend(embedding_artifacts(&e, cfg.learning_rate)?);
            if let Some(asset) = state.assets.get_mut(&obj.object_id) {
                asset.embedding_id = Some(e.embedding_id());
                out.extend(asset_artifacts(asset, &obj.effective_prompt())?);
            }
            state.embeddings.insert(obj.object_id.clone(), e);
        }
        Ok(out)
    }

    pub fn compose(&self, state: &SceneState) -> Result<(CompositeGuide, Vec<Artifact>)> {
        let guide = compose_guide(&state.spec, &state.ordered_assets()?, self.factor())?;
        let [x_init, mask_full, mask_latent, placement] = encode_guide(&guide)?;
        let artifacts = vec![
            Artifact::new("guide/x_init.png", MEDIA_PNG, x_init),
            Artifact::new("guide/mask_full.png", MEDIA_PNG, mask_full),
            Artifact::new("guide/mask_latent.png", MEDIA_PNG, mask_latent),
            Artifact::new("guide/placement.json", MEDIA_JSON, placement),
        ];
        Ok((guide, artifacts))
    }

    /// Runs whichever earlier stages are missing: object generation with the
    /// render seed, then identity training with the pipeline's train config.
    pub fn prepare(&self, state: &mut SceneState, seed: u64, progress: Progress<'_>) -> Result<Vec<Artifact>> {
        let mut out = Vec::new();
        let missing: Vec<ObjectId> = state
            .spec
            .objects
            .iter()
            .filter(|o| !state.assets.contains_key(&o.object_id))
            .map(|o| o.object_id.clone())
            .collect();
        if missing.len() == state.spec.objects.len() && !missing.is_empty() {
            out.extend(self.generate(state, seed, None)?);
        } else {
            for id in &missing {
                out.extend(self.generate(state, seed, Some(id))?);
            }
        }
        let untrained = state
            .spec
            .objects
            .iter()
            .any(|o| !state.embeddings.contains_key(&o.object_id));
        if untrained && self.backend.profile().supports_identity_embeddings {
            out.extend(self.train(state, &self.train, progress)?);
        }
        Ok(out)
    }

    fn prompts(&self, state: &SceneState, cfg: &RenderConfig) -> Result<PromptPair> {
        let allow_untrained = !self.backend.profile().supports_identity_embeddings;
        let built = build_prompts(&state.spec, &state.embeddings, allow_untrained)?;
        Ok(effective_prompts(&built, cfg))
    }

    pub fn render(
        &self,
        state: &mut SceneState,
        cfg: &RenderConfig,
        progress: Progress<'_>,
    ) -> Result<RenderOutcome> {
        cfg.validate(self.factor())?;
        let mut artifacts = self.prepare(state, cfg.seed, progress)?;
        let (guide, guide_files) = self.compose(state)?;
        let guide_hashes = GuideHashes {
            x_init: guide_files[0].sha256(),
            mask_full: guide_files[1].sha256(),
            mask_latent: guide_files[2].sha256(),
            placement: guide_files[3].sha256(),
        };
        artifacts.extend(guide_files);
        let outcome = self.render_with_guide(state, &guide, &guide_hashes, cfg, progress)?;
        artifacts.extend(outcome.artifacts);
        Ok(RenderOutcome {
            artifacts,
            ..outcome
        })
    }

    fn render_with_guide(
        &self,
        state: &SceneState,
        guide: &CompositeGuide,
        guide_hashes: &GuideHashes,
        cfg: &RenderConfig,
        progress: Progress<'_>,
    ) -> Result<RenderOutcome> {
        cfg.validate(self.factor())?;
        let prompts = self.prompts(state, cfg)?;
        let bindings = bindings_for(&state.embeddings);
        let sched = make_schedule(cfg.steps, self.schedule)?;
        let started = Instant::now();
        let mut last = started;
        let mut step_ms = Vec::with_capacity(cfg.steps);
        let total = cfg.steps;
        let out = run_scene_inference(
            InferenceRequest {
                guide,
                config: cfg,
                prompts: &prompts,
                bindings: &bindings,
            },
            self.backend.as_ref(),
            &sched,
            &mut |rec| {
                let now = Instant::now();
                step_ms.push(now.duration_since(last).as_secs_f64() * 1e3);
                last = now;
                progress(ProgressEvent {
                    step: total - rec.t + 1,
                    total,
                    note: format!("t={} {:?}", rec.t, rec.phase).to_lowercase(),
                });
            },
        )?;
        let timing = RenderTiming {
            total_ms: started.elapsed().as_secs_f64() * 1e3,
            step_ms,
        };
        let diag = diagnostics(&out.image, guide);
        let image_png = raster::encode_png_rgb(&out.image)?;
        let manifest = RenderManifest {
            scene_id: state.spec.scene_id.0.clone(),
            config: cfg.clone(),
            prompts,
            backend: self.backend.profile().name.clone(),
            schedule: self.schedule,
            guide: guide_hashes.clone(),
            assets: state
                .assets
                .iter()
                .map(|(id, a)| Ok((id.0.clone(), sha256_hex(&raster::encode_png_rgb(&a.image)?))))
                .collect::<Result<_>>()?,
            embeddings: state
                .embeddings
                .values()
                .map(|e| (e.token.clone(), e.embedding_id()))
                .collect(),
            diagnostics: diag,
            image_sha256: sha256_hex(&image_png),
        };
        let dir = render_dir(cfg);
        let artifacts = vec![
            Artifact::new(format!("{dir}/image.png"), MEDIA_PNG, image_png),
            Artifact::new(
                format!("{dir}/manifest.json"),
                MEDIA_JSON,
                serde_json::to_vec_pretty(&manifest)?,
            ),
            Artifact::new(
                format!("{dir}/timing.json"),
                MEDIA_JSON,
                serde_json::to_vec_pretty(&timing)?,
            ),
        ];
        Ok(RenderOutcome {
            image: out.image,
            manifest,
            timing,
            dir,
            artifacts,
        })
    }

    /// One render per alpha with a shared seed. Per-alpha failures are
    /// recorded in the sweep summary instead of aborting it.
    pub fn sweep(
        &self,
        state: &mut SceneState,
        base: &RenderConfig,
        alphas: &[f64],
        progress: Progress<'_>,
    ) -> Result<SweepOutcome> {
        let mut artifacts = self.prepare(state, base.seed, progress)?;
        let (guide, guide_files) = self.compose(state)?;
        let guide_hashes = GuideHashes {
            x_init: guide_files[0].sha256(),
            mask_full: guide_files[1].sha256(),
            mask_latent: guide_files[2].sha256(),
            placement: guide_files[3].sha256(),
        };
        artifacts.extend(guide_files);
        let mut records = Vec::with_capacity(alphas.len());
        let mut images = Vec::with_capacity(alphas.len());
        for (i, &alpha) in alphas.iter().enumerate() {
            let cfg = RenderConfig {
                alpha,
                ..base.clone()
            };
            let result = self.render_with_guide(state, &guide, &guide_hashes, &cfg, &mut |mut ev| {
                ev.note = format!("alpha {alpha} ({}/{}): {}", i + 1, alphas.len(), ev.note);
                progress(ev)
            });
            match result {
                Ok(r) => {
                    records.push(SweepRecord {
                        alpha,
                        render_dir: Some(r.dir.clone()),
                        image_sha256: Some(r.manifest.image_sha256.clone()),
                        diagnostics: Some(r.manifest.diagnostics),
                        error: None,
                    });
                    artifacts.extend(r.artifacts);
                    images.push(Some(r.image));
                }
                Err(e) => {
                    records.push(SweepRecord {
                        alpha,
                        render_dir: None,
                        image_sha256: None,
                        diagnostics: None,
                        error: Some(e.to_string()),
                    });
                    images.push(None);
                }
            }
        }
        let (w, h) = guide.x_init.dimensions();
        let tiles: Vec<Option<&RgbImage>> = images.iter().map(Option::as_ref).collect();
        let grid = sweep_grid(&tiles, w, h);
        let dir = sweep_dir(base, alphas);
        artifacts.push(Artifact::new(
            format!("{dir}/grid.png"),
            MEDIA_PNG,
            raster::encode_png_rgb(&grid)?,
        ));
        artifacts.push(Artifact::new(
            format!("{dir}/sweep.json"),
            MEDIA_JSON,
            serde_json::to_vec_pretty(&records)?,
        ));
        Ok(SweepOutcome {
            records,
            grid,
            dir,
            artifacts,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{StubAdapters, ToyBackend};
    use crate::scene::{BoxRegion, Canvas, ObjectAnnotation, Resolution};
    use chrono::DateTime;
    use image::{GrayImage, Luma};

    fn scene() -> SceneSpec {
        let sketch = GrayImage::from_fn(32, 32, |x, y| {
            let inside = (4..12).contains(&x) && (4..12).contains(&y)
                || (18..28).contains(&x) && (16..28).contains(&y);
            Luma([if inside { 0 } else { 255 }])
        });
        SceneSpec {
            scene_id: "demo".into(),
            sketch,
            sketch_path: "sketch.png".into(),
            canvas: Canvas {
                width: 32,
                height: 32,
            },
            objects: vec![
                ObjectAnnotation::new("a", "chair", BoxRegion::new(2, 2, 12, 12)),
                ObjectAnnotation::new("b", "table", BoxRegion::new(16, 14, 14, 16)),
            ],
            background_text: "in a room".into(),
            created_at: DateTime::from_timestamp(0, 0).unwrap(),
        }
    }

    fn pipeline() -> Pipeline {
        let mut p = Pipeline::new(Arc::new(ToyBackend::new()), Arc::new(StubAdapters));
        p.train.steps = 4;
        p
    }

    fn cfg(alpha: f64) -> RenderConfig {
        RenderConfig {
            steps: 6,
            alpha,
            seed: 3,
            resolution: Resolution {
                width: 32,
                height: 32,
            },
            ..RenderConfig::default()
        }
    }

    #[test]
    fn render_fills_missing_stages_and_is_deterministic() {
        let p = pipeline();
        let mut s1 = SceneState::new(scene());
        let a = p.render(&mut s1, &cfg(0.5), &mut |_| {}).unwrap();
        assert_eq!(s1.assets.len(), 2);
        assert_eq!(s1.embeddings.len(), 2);
        assert!(a.manifest.prompts.global_prompt.contains("<obj-a>"));
        let mut s2 = SceneState::new(scene());
        let b = p.render(&mut s2, &cfg(0.5), &mut |_| {}).unwrap();
        assert_eq!(a.image_artifact(), b.image_artifact());
        assert_eq!(a.manifest_artifact(), b.manifest_artifact());
    }

    #[test]
    fn progress_ticks_once_per_inference_step() {
        let p = pipeline();
        let mut s = SceneState::new(scene());
        p.prepare(&mut s, 0, &mut |_| {}).unwrap();
        let mut events = Vec::new();
        p.render(&mut s, &cfg(0.5), &mut |e| events.push(e)).unwrap();
        assert_eq!(events.len(), 6);
        assert_eq!(events.last().unwrap().step, 6);
    }

    #[test]
    fn sweep_records_failures_per_entry() {
        let p = pipeline();
        let mut s = SceneState::new(scene());
        let out = p.sweep(&mut s, &cfg(0.5), &[0.4, 1.5, 0.6], &mut |_| {}).unwrap();
        assert_eq!(out.records.len(), 3);
        assert!(out.records[0].error.is_none() && out.records[2].error.is_none());
        assert!(out.records[1].error.as_deref().unwrap().contains("alpha"));
        assert_eq!(out.grid.dimensions(), (96, 32));
    }

    #[test]
    fn workspace_round_trip_restores_stages() {
        let dir = tempfile::tempdir().unwrap();
        let p = pipeline();
        let spec = scene();
        let doc = scene::save_scene(&spec, dir.path()).unwrap();
        let mut s = SceneState::new(spec);
        let files = p.prepare(&mut s, 0, &mut |_| {}).unwrap();
        write_artifacts(dir.path(), &files).unwrap();
        let restored = SceneState::load(&doc, dir.path()).unwrap();
        assert_eq!(restored.embeddings, s.embeddings);
        assert_eq!(restored.assets, s.assets);
    }
}
