//! Run configuration: a flat TOML file of `key = value` lines, overridable by
//! environment variables named `FSBBT_<KEY>` (for example `FSBBT_ALPHA=0.1` or
//! `FSBBT_SEEDS=[0,1]`). Override values are parsed as TOML and fall back to a
//! plain string.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::DatasetId;
use crate::distill::{Regime, TrainRegimeConfig};
use crate::error::{Error, Result};
use crate::nn::{AdamConfig, Architecture};
use crate::teacher::{EndpointKind, TeacherEndpoint};

pub const ENV_PREFIX: &str = "FSBBT_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub dataset: DatasetId,
    /// Defaults to `data/<dataset>`.
    pub data_dir: Option<PathBuf>,
    pub n_original: usize,
    pub m_synthetic: usize,
    pub alpha: f64,
    pub beta_a: f64,
    pub beta_b: f64,
    pub omega: f64,

    pub latent_dim: usize,
    pub cvae_hidden: usize,
    pub cvae_epochs: usize,
    pub cvae_batch_size: usize,
    pub cvae_lr: f32,

    pub student_architecture: String,
    pub student_epochs: usize,
    pub student_batch_size: usize,
    pub student_lr: f32,

    pub teacher_kind: EndpointKind,
    /// Checkpoint path for `in_process`, base URL for `remote`.
    pub teacher_address: String,
    pub teacher_batch_limit: usize,
    pub teacher_epochs: usize,
    pub teacher_batch_size: usize,
    pub teacher_lr: f32,
    /// Train and save an in-process teacher when its checkpoint is missing.
    pub train_teacher_if_missing: bool,
    pub degrade_to_top1: bool,

    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Independent runs executed at once.
    pub parallelism: usize,
    /// Also train Standard-KD and Student-Alone for every seed.
    pub baselines: bool,
    /// Reload a stored CVAE when its training settings match.
    pub reuse_artifacts: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetId::Mnist,
            data_dir: None,
            n_original: 2000,
            m_synthetic: 24000,
            alpha: 0.05,
            beta_a: 1.0,
            beta_b: 1.0,
            omega: 0.9,
            latent_dim: 2,
            cvae_hidden: 512,
            cvae_epochs: 100,
            cvae_batch_size: 256,
            cvae_lr: 1e-3,
            student_architecture: "lenet5_half".into(),
            student_epochs: 50,
            student_batch_size: 64,
            student_lr: 1e-3,
            teacher_kind: EndpointKind::InProcess,
            teacher_address: "runs/teacher-mnist.safetensors".into(),
            teacher_batch_limit: 1024,
            teacher_epochs: 20,
            teacher_batch_size: 64,
            teacher_lr: 1e-3,
            train_teacher_if_missing: true,
            degrade_to_top1: false,
            seeds: vec![0, 1, 2, 3, 4],
            output_dir: "runs/mnist".into(),
            parallelism: 1,
            baselines: true,
            reuse_artifacts: true,
        }
    }
}

fn parse_override(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

impl DistillConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::from_toml_with(text, std::iter::empty())
    }

    /// Parses `text`, then applies `FSBBT_*` pairs from `vars`.
    pub fn from_toml_with(text: &str, vars: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for (key, value) in vars {
            if let Some(name) = key.strip_prefix(ENV_PREFIX) {
                table.insert(name.to_ascii_lowercase(), parse_override(&value));
            }
        }
        let cfg: Self = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file and applies overrides from the process environment.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_with(&text, std::env::vars())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_original == 0 {
            return fail("n_original must be at least 1".into());
        }
        if !(0.0..=0.5).contains(&self.alpha) {
            return fail(format!("alpha {} outside [0, 0.5]", self.alpha));
        }
        if self.beta_a <= 0.0 || self.beta_b <= 0.0 || !self.beta_a.is_finite() || !self.beta_b.is_finite() {
            return fail("beta_a and beta_b must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.omega) {
            return fail(format!("omega {} outside [0, 1]", self.omega));
        }
        if self.seeds.is_empty() {
            return fail("seed list is empty".into());
        }
        for (name, v) in [
            ("latent_dim", self.latent_dim),
            ("cvae_hidden", self.cvae_hidden),
            ("cvae_batch_size", self.cvae_batch_size),
            ("student_batch_size", self.student_batch_size),
            ("teacher_batch_size", self.teacher_batch_size),
            ("teacher_batch_limit", self.teacher_batch_limit),
            ("parallelism", self.parallelism),
        ] {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        Architecture::parse(&self.student_architecture).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn data_dir(&self) -> PathBuf {
        self.data_dir.clone().unwrap_or_else(|| Path::new("data").join(self.dataset.as_str()))
    }

    pub fn teacher_endpoint(&self) -> TeacherEndpoint {
        TeacherEndpoint { kind: self.teacher_kind, address: self.teacher_address.clone(), batch_limit: self.teacher_batch_limit }
    }

    pub fn student_config(&self, regime: Regime, seed: u64) -> TrainRegimeConfig {
        TrainRegimeConfig {
            regime,
            architecture: Architecture::parse(&self.student_architecture).expect("validated"),
            epochs: self.student_epochs,
            batch_size: self.student_batch_size,
            seed,
            adam: AdamConfig { lr: self.student_lr, ..AdamConfig::default() },
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
