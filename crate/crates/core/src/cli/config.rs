//! Experiment configuration.
//!
//! A TOML file names the objective, dataset files, backend, debate and fit
//! settings. Endpoint, model and API key may be overridden from the
//! environment. The config hash covers everything that can change results
//! and nothing that cannot: the experiment directory, parallelism, execution
//! mode and API key are left out, and dataset files are hashed by content
//! rather than by path.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::analysis::{Resampling, DEFAULT_ITERATIONS, PANEL_SIZE};
use crate::debate::DebateConfig;
use crate::evolution::{EvolutionSettings, SeedBank};
use crate::gateway::{HttpConfig, SyntheticAgentModel};
use crate::rating::{FitConfig, Objective};
use crate::seed::sha256_hex;
use crate::template::TemplateSet;
use crate::Execution;

pub const ENV_ENDPOINT: &str = "DEBATEQD_ENDPOINT";
pub const ENV_API_KEY: &str = "DEBATEQD_API_KEY";
pub const ENV_MODEL: &str = "DEBATEQD_MODEL";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {}: {source}", .path.display())]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse config {}: {message}", .path.display())]
    Parse { path: PathBuf, message: String },
    #[error("invalid config:\n  {}", .0.join("\n  "))]
    Invalid(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    /// QuALITY file the training questions come from.
    pub train_file: PathBuf,
    /// QuALITY file the held-out questions come from.
    pub test_file: PathBuf,
    #[serde(default = "default_train_size")]
    pub train_size: usize,
    #[serde(default = "default_test_size")]
    pub test_size: usize,
}

fn default_train_size() -> usize {
    3
}
fn default_test_size() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendSection {
    Synthetic {
        #[serde(default)]
        seed: u64,
        #[serde(default = "one")]
        judge_temperature: f64,
        #[serde(default)]
        correct_side_bonus: f64,
        #[serde(default = "default_noise")]
        mutation_noise: f64,
    },
    Http {
        #[serde(default)]
        endpoint: String,
        #[serde(default)]
        model: String,
        #[serde(default, skip_serializing)]
        api_key: Option<String>,
        /// Embedding model on the same endpoint. Without one, the hash
        /// embedder is used for diversity.
        #[serde(default)]
        embedding_model: Option<String>,
        #[serde(default = "default_attempts")]
        max_attempts: u32,
        #[serde(default = "default_backoff_ms")]
        backoff_base_ms: u64,
        #[serde(default = "default_timeout_s")]
        timeout_s: u64,
    },
}

fn one() -> f64 {
    1.0
}
fn default_noise() -> f64 {
    0.3
}
fn default_attempts() -> u32 {
    5
}
fn default_backoff_ms() -> u64 {
    1000
}
fn default_timeout_s() -> u64 {
    600
}

impl BackendSection {
    pub fn synthetic_model(&self) -> Option<SyntheticAgentModel> {
        match *self {
            BackendSection::Synthetic {
                seed,
                judge_temperature,
                correct_side_bonus,
                mutation_noise,
            } => Some(SyntheticAgentModel {
                judge_temperature,
                correct_side_bonus,
                mutation_noise,
                rng_seed: seed,
            }),
            BackendSection::Http { .. } => None,
        }
    }

    pub fn http_config(&self) -> Option<HttpConfig> {
        match self {
            BackendSection::Http {
                endpoint,
                model,
                api_key,
                max_attempts,
                backoff_base_ms,
                timeout_s,
                ..
            } => {
                let mut c = HttpConfig::new(endpoint, model);
                c.api_key = api_key.clone();
                c.max_attempts = *max_attempts;
                c.backoff_base_ms = *backoff_base_ms;
                c.timeout_s = *timeout_s;
                Some(c)
            }
            BackendSection::Synthetic { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DebateSection {
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default = "default_word_limit")]
    pub word_limit_per_argument: usize,
    #[serde(default = "default_transcript_limit")]
    pub transcript_word_limit: usize,
}

fn default_rounds() -> usize {
    2
}
fn default_word_limit() -> usize {
    150
}
fn default_transcript_limit() -> usize {
    600
}

impl Default for DebateSection {
    fn default() -> Self {
        DebateSection {
            rounds: default_rounds(),
            word_limit_per_argument: default_word_limit(),
            transcript_word_limit: default_transcript_limit(),
        }
    }
}

impl DebateSection {
    pub fn debate_config(&self) -> DebateConfig {
        DebateConfig {
            rounds: self.rounds,
            word_limit_per_argument: self.word_limit_per_argument,
            transcript_word_limit: self.transcript_word_limit,
            ..DebateConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationSection {
    #[serde(default = "default_panel")]
    pub panel_size: usize,
    #[serde(default = "default_iterations")]
    pub bootstrap_iterations: usize,
    #[serde(default)]
    pub resampling: Resampling,
    /// StaticGen pool size; defaults to the lifetime strategy count of an
    /// evolution run with the same generations and kill fraction.
    #[serde(default)]
    pub staticgen_target: Option<usize>,
}

fn default_panel() -> usize {
    PANEL_SIZE
}
fn default_iterations() -> usize {
    DEFAULT_ITERATIONS
}

impl Default for EvaluationSection {
    fn default() -> Self {
        EvaluationSection {
            panel_size: PANEL_SIZE,
            bootstrap_iterations: DEFAULT_ITERATIONS,
            resampling: Resampling::default(),
            staticgen_target: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub objective: Objective,
    #[serde(default = "default_generations")]
    pub generations: usize,
    #[serde(default = "default_kill")]
    pub kill_fraction: f64,
    #[serde(default)]
    pub master_seed: u64,
    pub experiment_dir: PathBuf,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default)]
    pub execution: Execution,
    /// Seed strategy file; the built-in bank when absent.
    #[serde(default)]
    pub seeds_file: Option<PathBuf>,
    /// Directory of prompt template overrides.
    #[serde(default)]
    pub templates_dir: Option<PathBuf>,
    pub dataset: DatasetSection,
    pub backend: BackendSection,
    #[serde(default)]
    pub debate: DebateSection,
    #[serde(default)]
    pub fit: FitConfig,
    #[serde(default)]
    pub evaluation: EvaluationSection,
}

fn default_generations() -> usize {
    20
}
fn default_kill() -> f64 {
    0.5
}
fn default_parallelism() -> usize {
    16
}

/// Lookup used for environment overrides; tests pass a closure instead of
/// touching the process environment.
pub type EnvLookup<'a> = &'a dyn Fn(&str) -> Option<String>;

pub fn process_env(key: &str) -> Option<String> {
    std::env::var(key).ok().filter(|v| !v.is_empty())
}

impl ExperimentConfig {
    /// Parse TOML text. Relative paths resolve against `base`.
    pub fn parse(text: &str, origin: &Path, base: &Path) -> Result<Self, ConfigError> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.experiment_dir);
        resolve(&mut cfg.dataset.train_file);
        resolve(&mut cfg.dataset.test_file);
        if let Some(p) = cfg.seeds_file.as_mut() {
            resolve(p);
        }
        if let Some(p) = cfg.templates_dir.as_mut() {
            resolve(p);
        }
        Ok(cfg)
    }

    /// Read a config file, apply environment overrides and validate.
    pub fn load(path: &Path, env: EnvLookup<'_>) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut cfg = Self::parse(&text, path, base)?;
        cfg.apply_env(env);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self, env: EnvLookup<'_>) {
        if let BackendSection::Http {
            endpoint,
            model,
            api_key,
            ..
        } = &mut self.backend
        {
            if let Some(v) = env(ENV_ENDPOINT) {
                *endpoint = v;
            }
            if let Some(v) = env(ENV_MODEL) {
                *model = v;
            }
            if let Some(v) = env(ENV_API_KEY) {
                *api_key = Some(v);
            }
        }
    }

    /// Every problem at once, not just the first.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut errs = Vec::new();
        if !(self.kill_fraction > 0.0 && self.kill_fraction < 1.0) {
            errs.push(format!("kill_fraction must be in (0, 1), got {}", self.kill_fraction));
        }
        if self.parallelism == 0 {
            errs.push("parallelism must be at least 1".into());
        }
        for (name, p) in [("train_file", &self.dataset.train_file), ("test_file", &self.dataset.test_file)] {
            if !p.is_file() {
                errs.push(format!("dataset.{name} does not exist: {}", p.display()));
            }
        }
        if self.dataset.train_size == 0 || self.dataset.test_size == 0 {
            errs.push("dataset sizes must be at least 1".into());
        }
        if let Some(p) = &self.seeds_file {
            if let Err(e) = SeedBank::load(p) {
                errs.push(e.to_string());
            }
        }
        if let Some(d) = &self.templates_dir {
            if !d.is_dir() {
                errs.push(format!("templates_dir does not exist: {}", d.display()));
            } else if let Err(e) = TemplateSet::load_dir(d) {
                errs.push(e.to_string());
            }
        }
        match &self.backend {
            BackendSection::Synthetic {
                judge_temperature,
                mutation_noise,
                ..
            } => {
                if !(*judge_temperature > 0.0) {
                    errs.push("backend.judge_temperature must be positive".into());
                }
                if !(*mutation_noise >= 0.0) {
                    errs.push("backend.mutation_noise must be non-negative".into());
                }
            }
            BackendSection::Http { endpoint, model, .. } => {
                if endpoint.is_empty() {
                    errs.push(format!("backend.endpoint is empty (set it or {ENV_ENDPOINT})"));
                }
                if model.is_empty() {
                    errs.push(format!("backend.model is empty (set it or {ENV_MODEL})"));
                }
            }
        }
        if let Err(e) = self.debate.debate_config().validate() {
            errs.push(e.to_string());
        }
        if let Err(e) = self.fit.validate() {
            errs.push(e.to_string());
        }
        if self.evaluation.panel_size == 0 {
            errs.push("evaluation.panel_size must be at least 1".into());
        }
        if self.evaluation.bootstrap_iterations == 0 {
            errs.push("evaluation.bootstrap_iterations must be at least 1".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(errs))
        }
    }

    pub fn seed_bank(&self) -> Result<SeedBank, crate::evolution::EvolutionError> {
        match &self.seeds_file {
            Some(p) => SeedBank::load(p),
            None => Ok(SeedBank::builtin()),
        }
    }

    pub fn templates(&self) -> Result<TemplateSet, crate::template::TemplateError> {
        match &self.templates_dir {
            Some(d) => TemplateSet::load_dir(d),
            None => Ok(TemplateSet::default()),
        }
    }

    pub fn settings(&self) -> EvolutionSettings {
        EvolutionSettings {
            objective: self.objective,
            generations: self.generations,
            kill_fraction: self.kill_fraction,
            master_seed: self.master_seed,
            debate: self.debate.debate_config(),
            fit: self.fit.clone(),
        }
    }

    /// The snapshot written to `config.json`. The API key never appears.
    pub fn snapshot(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// SHA-256 over the result-relevant part of the config plus the content
    /// of every input file it names.
    pub fn hash(&self) -> Result<String, ConfigError> {
        let mut v = self.snapshot();
        let obj = v.as_object_mut().expect("config is an object");
        for k in ["experiment_dir", "parallelism", "execution"] {
            obj.remove(k);
        }
        let digest = |p: &Path| -> Result<String, ConfigError> {
            std::fs::read(p)
                .map(|b| sha256_hex(&b))
                .map_err(|source| ConfigError::Read {
                    path: p.to_path_buf(),
                    source,
                })
        };
        obj.insert(
            "dataset".into(),
            serde_json::json!({
                "train": digest(&self.dataset.train_file)?,
                "test": digest(&self.dataset.test_file)?,
                "train_size": self.dataset.train_size,
                "test_size": self.dataset.test_size,
            }),
        );
        if let Some(p) = &self.seeds_file {
            obj.insert("seeds_file".into(), Value::String(digest(p)?));
        }
        // Effective templates, whether overridden or built in.
        let templates = self
            .templates()
            .map_err(|e| ConfigError::Invalid(vec![e.to_string()]))?;
        obj.insert("templates_dir".into(), serde_json::to_value(&templates).expect("templates serialize"));
        // serde_json maps are ordered, so this encoding is canonical.
        Ok(sha256_hex(&serde_json::to_vec(&v).expect("value serializes")))
    }
}
