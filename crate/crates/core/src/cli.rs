//! Command-line driver. Exit codes: 0 success, 1 validation failure,
//! 2 runtime failure or usage error.

use std::ffi::OsString;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use clap::builder::TypedValueParser;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::config::{BackendConfig, Config};
use crate::error::{Error, Result};
use crate::identity::TrainConfig;
use crate::pipeline::{write_artifacts, Pipeline, SceneState};
use crate::scene::{
    load_scene, validate_scene, ObjectId, RenderConfig, DEFAULT_ALPHA, DEFAULT_GUIDANCE_SCALE,
    DEFAULT_STEPS,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_FAILURE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "sketchscene", version, about = "Sketch-guided scene image generation")]
pub struct Cli {
    /// Configuration file (defaults to $SKETCHSCENE_CONFIG, then built-in defaults).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Backend to use; `config` takes it from the configuration file.
    #[arg(long, global = true, value_enum)]
    backend: Option<BackendChoice>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BackendChoice {
    Toy,
    Config,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Scene validation, rendering and alpha sweeps.
    #[command(subcommand)]
    Scene(SceneCommand),
    /// Per-object image generation.
    #[command(subcommand)]
    Objects(ObjectsCommand),
    /// Identity embedding training.
    #[command(subcommand)]
    Identity(IdentityCommand),
    /// Batch runs over a directory of scenes.
    #[command(subcommand)]
    Bench(BenchCommand),
    /// Run the HTTP service.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Worker pool size (overrides the config).
        #[arg(long)]
        jobs: Option<usize>,
    },
}

#[derive(Debug, Subcommand)]
enum SceneCommand {
    /// Print the validation report of a scene document.
    Validate { doc: PathBuf },
    /// Render one image.
    Render {
        doc: PathBuf,
        #[command(flatten)]
        render: RenderArgs,
        #[arg(long, value_parser = parse_alpha, default_value_t = DEFAULT_ALPHA)]
        alpha: f64,
    },
    /// Render once per alpha with a shared seed, plus a grid image.
    Sweep {
        doc: PathBuf,
        #[command(flatten)]
        render: RenderArgs,
        /// Comma-separated alphas in [0, 1].
        #[arg(long, value_parser = parse_alphas, default_value = "0.4,0.5,0.6")]
        alphas: AlphaList,
    },
}

#[derive(Debug, Args)]
struct RenderArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Inference steps T.
    #[arg(long, default_value_t = DEFAULT_STEPS, value_parser = clap::value_parser!(u64).range(1..=1000).map(|v| v as usize))]
    steps: usize,
    #[arg(long)]
    global_prompt: Option<String>,
    #[arg(long)]
    background_prompt: Option<String>,
    #[arg(long, default_value_t = DEFAULT_GUIDANCE_SCALE)]
    guidance_scale: f64,
}

impl RenderArgs {
    fn config(&self, alpha: f64, state: &SceneState) -> RenderConfig {
        RenderConfig {
            steps: self.steps,
            alpha,
            seed: self.seed,
            resolution: state.spec.canvas.into(),
            global_prompt: self.global_prompt.clone(),
            background_prompt: self.background_prompt.clone(),
            guidance_scale: self.guidance_scale,
        }
    }
}

#[derive(Debug, Subcommand)]
enum ObjectsCommand {
    /// Generate object images and masks.
    Generate {
        doc: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Only this object.
        #[arg(long)]
        object: Option<String>,
    },
}

#[derive(Debug, Subcommand)]
enum IdentityCommand {
    /// Train identity embeddings for the generated objects.
    Train {
        doc: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Debug, Subcommand)]
enum BenchCommand {
    /// Render every scene in a directory once per seed and write bench.csv.
    Run {
        dir: PathBuf,
        /// Seeds: "A..B" (both ends included), or a comma-separated list.
        #[arg(long, value_parser = parse_seeds, default_value = "0..50")]
        seeds: SeedList,
        #[arg(long, value_parser = parse_alpha, default_value_t = DEFAULT_ALPHA)]
        alpha: f64,
        #[arg(long, default_value_t = DEFAULT_STEPS)]
        steps: usize,
        /// Scenes processed in parallel.
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..).map(|v| v as usize))]
        jobs: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlphaList(pub Vec<f64>);

#[derive(Debug, Clone, PartialEq)]
pub struct SeedList(pub Vec<u64>);

pub fn parse_alpha(s: &str) -> std::result::Result<f64, String> {
    let a: f64 = s.trim().parse().map_err(|_| format!("{s:?} is not a number"))?;
    if (0.0..=1.0).contains(&a) {
        Ok(a)
    } else {
        Err(format!("alpha must lie in [0, 1], got {a}"))
    }
}

pub fn parse_alphas(s: &str) -> std::result::Result<AlphaList, String> {
    if s.trim().is_empty() {
        return Err("at least one alpha is required".into());
    }
    s.split(',').map(parse_alpha).collect::<std::result::Result<_, _>>().map(AlphaList)
}

/// "A..B" and "A..=B" both include B, so "0..50" is the 51 seeds 0 through 50.
pub fn parse_seeds(s: &str) -> std::result::Result<SeedList, String> {
    let s = s.trim();
    let num = |v: &str| v.trim().parse::<u64>().map_err(|_| format!("{v:?} is not a seed"));
    if let Some((a, b)) = s.split_once("..") {
        let (a, b) = (num(a)?, num(b.trim_start_matches('='))?);
        if a > b {
            return Err(format!("empty seed range {s}"));
        }
        return Ok(SeedList((a..=b).collect()));
    }
    if s.is_empty() {
        return Err("at least one seed is required".into());
    }
    s.split(',').map(num).collect::<std::result::Result<_, _>>().map(SeedList)
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    }
}

fn load_config(cli: &Cli) -> Result<Config> {
    let mut cfg = Config::discover(cli.config.as_deref())?;
    if cli.backend == Some(BackendChoice::Toy) {
        cfg.backend = BackendConfig::Toy;
    }
    Ok(cfg)
}

fn out_dir(cli: &Cli) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from("out"))
}

fn print_json<T: Serialize>(value: &T) {
    let mut stdout = std::io::stdout().lock();
    let _ = serde_json::to_writer_pretty(&mut stdout, value);
    let _ = writeln!(stdout);
}

/// Loads a scene with any stages already in `out`; an invalid scene prints
/// its report and yields `Err(EXIT_INVALID)`.
fn load_valid(doc: &Path, out: &Path) -> Result<std::result::Result<SceneState, i32>> {
    let state = SceneState::load(doc, out)?;
    let report = validate_scene(&state.spec);
    if report.is_empty() {
        Ok(Ok(state))
    } else {
        print_json(&report);
        Ok(Err(EXIT_INVALID))
    }
}

fn execute(cli: Cli) -> Result<i32> {
    let config = load_config(&cli)?;
    let out = out_dir(&cli);
    match &cli.command {
        Command::Scene(SceneCommand::Validate { doc }) => {
            let spec = load_scene(doc)?;
            let report = validate_scene(&spec);
            print_json(&report);
            Ok(if report.is_empty() { EXIT_OK } else { EXIT_INVALID })
        }
        Command::Scene(SceneCommand::Render { doc, render, alpha }) => {
            let pipeline = config.build_pipeline()?;
            let mut state = match load_valid(doc, &out)? {
                Ok(s) => s,
                Err(code) => return Ok(code),
            };
            let cfg = render.config(*alpha, &state);
            if let Some(code) = check_render_config(&cfg, &pipeline) {
                return Ok(code);
            }
            let outcome = pipeline.render(&mut state, &cfg, &mut |_| {})?;
            write_artifacts(&out, &outcome.artifacts)?;
            println!("{}", out.join(&outcome.dir).join("image.png").display());
            println!("{}", out.join(&outcome.dir).join("manifest.json").display());
            Ok(EXIT_OK)
        }
        Command::Scene(SceneCommand::Sweep { doc, render, alphas }) => {
            let pipeline = config.build_pipeline()?;
            let mut state = match load_valid(doc, &out)? {
                Ok(s) => s,
                Err(code) => return Ok(code),
            };
            let base = render.config(alphas.0[0], &state);
            if let Some(code) = check_render_config(&base, &pipeline) {
                return Ok(code);
            }
            let outcome = pipeline.sweep(&mut state, &base, &alphas.0, &mut |_| {})?;
            write_artifacts(&out, &outcome.artifacts)?;
            print_json(&outcome.records);
            println!("{}", out.join(&outcome.dir).join("grid.png").display());
            Ok(if outcome.records.iter().all(|r| r.error.is_none()) {
                EXIT_OK
            } else {
                EXIT_FAILURE
            })
        }
        Command::Objects(ObjectsCommand::Generate { doc, seed, object }) => {
            let pipeline = config.build_pipeline()?;
            let mut state = match load_valid(doc, &out)? {
                Ok(s) => s,
                Err(code) => return Ok(code),
            };
            let only = object.as_deref().map(ObjectId::from);
            let files = pipeline.generate(&mut state, *seed, only.as_ref())?;
            write_artifacts(&out, &files)?;
            for f in files.iter().filter(|f| f.name.ends_with("image.png")) {
                println!("{}", out.join(&f.name).display());
            }
            Ok(EXIT_OK)
        }
        Command::Identity(IdentityCommand::Train {
            doc,
            steps,
            lr,
            seed,
        }) => {
            let pipeline = config.build_pipeline()?;
            let mut state = match load_valid(doc, &out)? {
                Ok(s) => s,
                Err(code) => return Ok(code),
            };
            let mut cfg: TrainConfig = config.train.clone();
            cfg.steps = steps.unwrap_or(cfg.steps);
            cfg.learning_rate = lr.unwrap_or(cfg.learning_rate);
            cfg.seed = seed.unwrap_or(cfg.seed);
            let files = pipeline.train(&mut state, &cfg, &mut |_| {})?;
            write_artifacts(&out, &files)?;
            for e in state.embeddings.values() {
                println!(
                    "{} final_loss={}",
                    e.token,
                    e.final_loss().map_or("n/a".into(), |l| format!("{l:.6}"))
                );
            }
            Ok(EXIT_OK)
        }
        Command::Bench(BenchCommand::Run {
            dir,
            seeds,
            alpha,
            steps,
            jobs,
        }) => {
            let pipeline = config.build_pipeline()?;
            let backend_name = pipeline.backend.profile().name.clone();
            let rows = bench(&pipeline, dir, &out, &seeds.0, *alpha, *steps, *jobs)?;
            let path = out.join("bench.csv");
            let mut w = csv::Writer::from_writer(Vec::new());
            for row in rows {
                w.serialize(BenchRow {
                    backend: backend_name.clone(),
                    ..row
                })
                .map_err(|e| Error::Validation(e.to_string()))?;
            }
            let bytes = w.into_inner().map_err(|e| Error::Validation(e.to_string()))?;
            crate::store::write_atomic(&path, &bytes)?;
            println!("{}", path.display());
            Ok(EXIT_OK)
        }
        Command::Serve { addr, jobs } => {
            let mut config = config;
            if let Some(o) = &cli.out {
                config.artifact_root = o.clone();
            }
            if let Some(j) = jobs {
                config.pool_size = *j;
            }
            let service = crate::service::Service::new(&config)?;
            let runtime = tokio::runtime::Runtime::new()
                .map_err(|e| Error::Config(format!("cannot start runtime: {e}")))?;
            runtime.block_on(crate::service::serve(service, *addr))?;
            Ok(EXIT_OK)
        }
    }
}

fn check_render_config(cfg: &RenderConfig, pipeline: &Pipeline) -> Option<i32> {
    let violations = cfg.violations(pipeline.factor());
    if violations.is_empty() {
        None
    } else {
        print_json(&violations);
        Some(EXIT_INVALID)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub scene_id: String,
    pub alpha: f64,
    pub seed: u64,
    #[serde(rename = "T")]
    pub steps: usize,
    pub backend: String,
    pub fg_fidelity: f64,
    pub seam_score: f64,
    pub wall_ms: f64,
    pub output_path: String,
}

/// Scene documents in `dir`: `*.json` files and `*/scene.json`, sorted.
pub fn scene_documents(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut docs = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            let doc = path.join("scene.json");
            if doc.is_file() {
                docs.push(doc);
            }
        } else if path.extension().is_some_and(|e| e == "json") {
            docs.push(path);
        }
    }
    docs.sort();
    Ok(docs)
}

/// Generates and trains each scene once, then renders it once per seed.
fn bench(
    pipeline: &Pipeline,
    dir: &Path,
    out: &Path,
    seeds: &[u64],
    alpha: f64,
    steps: usize,
    jobs: usize,
) -> Result<Vec<BenchRow>> {
    let docs = scene_documents(dir)?;
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<(usize, Result<Vec<BenchRow>>)>> = Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..jobs.min(docs.len()).max(1) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(doc) = docs.get(i) else { break };
                let r = bench_scene(pipeline, doc, out, seeds, alpha, steps);
                results.lock().unwrap().push((i, r));
            });
        }
    });
    let mut results = results.into_inner().unwrap();
    results.sort_by_key(|(i, _)| *i);
    let mut rows = Vec::new();
    for (_, r) in results {
        rows.extend(r?);
    }
    Ok(rows)
}

fn bench_scene(
    pipeline: &Pipeline,
    doc: &Path,
    out: &Path,
    seeds: &[u64],
    alpha: f64,
    steps: usize,
) -> Result<Vec<BenchRow>> {
    let spec = load_scene(doc)?;
    let report = validate_scene(&spec);
    if !report.is_empty() {
        return Err(Error::Validation(format!(
            "{}: {}",
            doc.display(),
            report[0].message
        )));
    }
    let workspace = out.join(&spec.scene_id.0);
    let mut state = SceneState::new(spec);
    let prepared = pipeline.prepare(&mut state, 0, &mut |_| {})?;
    write_artifacts(&workspace, &prepared)?;
    let mut rows = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let cfg = RenderConfig {
            steps,
            alpha,
            seed,
            resolution: state.spec.canvas.into(),
            ..RenderConfig::default()
        };
        let started = Instant::now();
        let outcome = pipeline.render(&mut state, &cfg, &mut |_| {})?;
        let wall_ms = started.elapsed().as_secs_f64() * 1e3;
        write_artifacts(&workspace, &outcome.artifacts)?;
        rows.push(BenchRow {
            scene_id: state.spec.scene_id.0.clone(),
            alpha,
            seed,
            steps,
            backend: String::new(),
            fg_fidelity: outcome.manifest.diagnostics.fg_fidelity,
            seam_score: outcome.manifest.diagnostics.seam_score,
            wall_ms,
            output_path: workspace
                .join(&outcome.dir)
                .join("image.png")
                .display()
                .to_string(),
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alpha_lists_reject_empty_and_out_of_range_values() {
        assert_eq!(parse_alphas("0.4,0.5,0.6").unwrap().0, vec![0.4, 0.5, 0.6]);
        assert!(parse_alphas("").is_err());
        assert!(parse_alphas("0.4,1.5").is_err());
        assert!(parse_alpha("x").is_err());
    }

    #[test]
    fn seed_ranges_include_both_ends() {
        assert_eq!(parse_seeds("0..50").unwrap().0.len(), 51);
        assert_eq!(parse_seeds("0..=2").unwrap().0, vec![0, 1, 2]);
        assert_eq!(parse_seeds("3,1").unwrap().0, vec![3, 1]);
        assert!(parse_seeds("5..1").is_err());
        assert_eq!(
            parse_seeds("0..50").unwrap().0,
            crate::scene::SEED_RANGE.collect::<Vec<_>>()
        );
    }

    #[test]
    fn usage_errors_exit_with_two() {
        assert_eq!(run(["sketchscene", "scene", "sweep", "x.json", "--alphas", ""]), 2);
        assert_eq!(run(["sketchscene", "scene", "render", "x.json", "--alpha", "1.5"]), 2);
        assert_eq!(run(["sketchscene", "frobnicate"]), 2);
    }

    #[test]
    fn missing_input_is_a_runtime_failure() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.json");
        let code = run([
            "sketchscene".into(),
            "scene".into(),
            "validate".into(),
            missing.into_os_string(),
        ]);
        assert_eq!(code, 2);
    }
}
