//! Runtime configuration: which backend and adapters to use, where artifacts
//! live and how many workers run jobs. Read from a TOML file whose path may
//! be given by the `SKETCHSCENE_CONFIG` environment variable; command-line
//! flags override individual fields.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backend::{
    Backend, BackendProfile, ObjectAdapters, RecordMode, RecordReplayAdapters, RemoteAdapters,
    RemoteBackend, StubAdapters, ToyBackend, Transport, UnconfiguredAdapters,
};
use crate::diffusion::ScheduleKind;
use crate::error::{Error, Result};
use crate::identity::TrainConfig;
use crate::objects::DEFAULT_RETRIES;
use crate::pipeline::Pipeline;

pub const CONFIG_ENV: &str = "SKETCHSCENE_CONFIG";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendConfig {
    #[default]
    Toy,
    Remote {
        profile: BackendProfile,
        transport: Transport,
        workdir: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AdapterConfig {
    /// Echo the sketch as the object image and segment its ink.
    #[default]
    Stub,
    /// No adapters: object generation fails with a connectivity error.
    None,
    Remote {
        generator: Transport,
        segmenter: Transport,
        workdir: PathBuf,
    },
    Replay {
        recordings: PathBuf,
    },
    Record {
        recordings: PathBuf,
        mode: RecordMode,
        inner: Box<AdapterConfig>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub artifact_root: PathBuf,
    pub pool_size: usize,
    pub retries: u32,
    pub schedule: ScheduleKind,
    pub backend: BackendConfig,
    pub adapters: AdapterConfig,
    pub train: TrainConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            artifact_root: PathBuf::from("artifacts"),
            pool_size: 2,
            retries: DEFAULT_RETRIES,
            schedule: ScheduleKind::default(),
            backend: BackendConfig::default(),
            adapters: AdapterConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Loads the file named by `explicit`, else by the environment variable,
    /// else returns the defaults.
    pub fn discover(explicit: Option<&Path>) -> Result<Self> {
        match explicit {
            Some(p) => Self::load(p),
            None => match std::env::var_os(CONFIG_ENV) {
                Some(p) => Self::load(Path::new(&p)),
                None => Ok(Self::default()),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.pool_size == 0 {
            return Err(Error::Config("pool_size must be at least 1".into()));
        }
        self.train.validate()
    }

    pub fn build_backend(&self) -> Arc<dyn Backend> {
        match &self.backend {
            BackendConfig::Toy => Arc::new(ToyBackend::new()),
            BackendConfig::Remote {
                profile,
                transport,
                workdir,
            } => Arc::new(RemoteBackend::new(
                profile.clone(),
                transport.clone(),
                workdir.clone(),
            )),
        }
    }

    pub fn build_adapters(&self) -> Arc<dyn ObjectAdapters> {
        build_adapters(&self.adapters)
    }

    pub fn build_pipeline(&self) -> Result<Pipeline> {
        self.validate()?;
        let mut p = Pipeline::new(self.build_backend(), self.build_adapters());
        p.retries = self.retries;
        p.schedule = self.schedule;
        p.train = self.train.clone();
        Ok(p)
    }
}

fn build_adapters(cfg: &AdapterConfig) -> Arc<dyn ObjectAdapters> {
    match cfg {
        AdapterConfig::Stub => Arc::new(StubAdapters),
        AdapterConfig::None => Arc::new(UnconfiguredAdapters),
        AdapterConfig::Remote {
            generator,
            segmenter,
            workdir,
        } => Arc::new(RemoteAdapters {
            generator: generator.clone(),
            segmenter: segmenter.clone(),
            workdir: workdir.clone(),
        }),
        AdapterConfig::Replay { recordings } => Arc::new(RecordReplayAdapters::replay(recordings)),
        AdapterConfig::Record {
            recordings,
            mode,
            inner,
        } => Arc::new(RecordReplayAdapters::new(
            Some(build_adapters(inner)),
            recordings,
            *mode,
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(Config::from_toml("").unwrap(), Config::default());
    }

    #[test]
    fn parses_remote_backend_and_recorded_adapters() {
        let cfg = Config::from_toml(
            r#"
            artifact_root = "/tmp/a"
            pool_size = 4

            [backend]
            kind = "remote"
            workdir = "/tmp/w"
            transport = { kind = "http", endpoint = "http://127.0.0.1:9000" }
            profile = { name = "sd21", latent_channels = 4, downsample_factor = 8, supports_identity_embeddings = false, max_prompt_tokens = 77, embedding_dim = 1024 }

            [adapters]
            kind = "record"
            recordings = "/tmp/rec"
            mode = "auto"
            inner = { kind = "stub" }

            [train]
            steps = 10
            "#,
        )
        .unwrap();
        assert_eq!(cfg.pool_size, 4);
        assert_eq!(cfg.train.steps, 10);
        assert_eq!(cfg.train.learning_rate, TrainConfig::toy().learning_rate);
        assert!(matches!(cfg.backend, BackendConfig::Remote { .. }));
        assert_eq!(cfg.build_backend().profile().name, "sd21");
    }

    #[test]
    fn unknown_backend_kind_is_a_config_error() {
        assert!(matches!(
            Config::from_toml("[backend]\nkind = \"gpu\""),
            Err(Error::Config(_))
        ));
        assert!(Config::from_toml("pool_size = 0").unwrap().validate().is_err());
    }
}
