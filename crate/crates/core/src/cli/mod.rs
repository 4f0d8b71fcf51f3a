//! Command surface: one function per subcommand, each a thin layer over the
//! library that adds config snapshots, locking, resume and persistence.
//!
//! Every command that computes takes the directory lock first, refuses a
//! directory written under a different config hash before touching
//! anything, and reuses whatever completed work it finds.

pub mod config;

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;

pub use config::{BackendSection, ConfigError, ExperimentConfig};

use crate::analysis::report::{export_report, Comparison, DiversityRecord, ReportError, ReportSidecar};
use crate::analysis::{
    bootstrap_gap_difference, build_elite_panel, embedding_diversity, AnalysisError, ElitePanel, PanelEnv,
};
use crate::dataset::{load_quality, select_questions, DatasetError, QuestionSet, Split};
use crate::debate::DebateEnv;
use crate::evolution::{
    evolve, lifetime_count, lifetime_texts, rate_population, staticgen, EvolutionError, EvolutionSummary,
    EvolveEnv, GenerationState, Mutator, PopulationState, StaticGenPool, STATE_FORMAT,
};
use crate::gateway::{Backend, Embedder, Gateway, GatewayError, HashEmbedder, HttpBackend, HttpEmbedder, ResponseCache, SyntheticBackend};
use crate::layout::{write_atomic, RunLayout};
use crate::rating::Objective;
use crate::seed;

/// Process exit codes, one per error class.
pub mod exit {
    pub const OK: i32 = 0;
    pub const INTERNAL: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const CONFIG_MISMATCH: i32 = 3;
    pub const LOCKED: i32 = 4;
    pub const MISSING_INPUT: i32 = 5;
    pub const DATASET: i32 = 6;
    pub const BACKEND: i32 = 7;
    pub const IO: i32 = 8;
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(
        "{} was written under config hash {found}, current config hashes to {expected}; \
         use a fresh experiment_dir or restore the original config",
        .dir.display()
    )]
    ConfigMismatch {
        dir: PathBuf,
        expected: String,
        found: String,
    },
    #[error("{} is locked by another process (pid {pid}); remove it if that process is gone", .path.display())]
    Locked { path: PathBuf, pid: String },
    #[error("missing inputs:\n  {}", .0.join("\n  "))]
    Missing(Vec<String>),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Evolution(#[from] EvolutionError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Report(ReportError),
    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Usage(String),
}

impl From<ReportError> for CliError {
    fn from(e: ReportError) -> Self {
        match e {
            ReportError::Missing(m) => CliError::Missing(m),
            other => CliError::Report(other),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        // A backend failure deep inside a tournament is still a backend failure.
        let mut cur: Option<&(dyn std::error::Error + 'static)> = Some(self);
        while let Some(e) = cur {
            if e.downcast_ref::<GatewayError>().is_some() {
                return exit::BACKEND;
            }
            cur = e.source();
        }
        match self {
            CliError::Config(_) | CliError::Usage(_) => exit::CONFIG,
            CliError::ConfigMismatch { .. } => exit::CONFIG_MISMATCH,
            CliError::Locked { .. } => exit::LOCKED,
            CliError::Missing(_) => exit::MISSING_INPUT,
            CliError::Analysis(AnalysisError::Precondition(_) | AnalysisError::Unrated) => exit::MISSING_INPUT,
            CliError::Dataset(_) => exit::DATASET,
            CliError::Io { .. } | CliError::Report(_) => exit::IO,
            CliError::Evolution(EvolutionError::Io { .. }) => exit::IO,
            CliError::Evolution(EvolutionError::State { .. }) => exit::CONFIG_MISMATCH,
            _ => exit::INTERNAL,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Single-writer lock on an experiment directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

fn pid_alive(pid: &str) -> bool {
    // Without /proc the owner cannot be checked, so assume it is alive.
    let proc_root = Path::new("/proc");
    !proc_root.is_dir() || proc_root.join(pid.trim()).exists()
}

impl DirLock {
    pub fn acquire(layout: &RunLayout) -> Result<Self, CliError> {
        let path = layout.lock();
        fs::create_dir_all(layout.root()).map_err(io_err(layout.root()))?;
        for _ in 0..2 {
            match OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(mut f) => {
                    write!(f, "{}", std::process::id()).map_err(io_err(&path))?;
                    return Ok(DirLock { path });
                }
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    let pid = fs::read_to_string(&path).unwrap_or_default();
                    if pid_alive(&pid) {
                        return Err(CliError::Locked { path, pid });
                    }
                    tracing::warn!(path = %path.display(), pid = pid.trim(), "removing stale lock");
                    fs::remove_file(&path).map_err(io_err(&path))?;
                }
                Err(e) => return Err(io_err(&path)(e)),
            }
        }
        Err(CliError::Locked {
            path,
            pid: "unknown".into(),
        })
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// An experiment directory opened for writing.
#[derive(Debug)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub layout: RunLayout,
    pub hash: String,
    _lock: DirLock,
}

fn stored_hash(layout: &RunLayout) -> Result<Option<String>, CliError> {
    let p = layout.config_hash();
    if !p.exists() {
        return Ok(None);
    }
    fs::read_to_string(&p)
        .map(|s| Some(s.trim().to_string()))
        .map_err(io_err(&p))
}

impl Experiment {
    /// Open `config.experiment_dir` for a computing command. A directory
    /// holding a different config hash is refused before anything is
    /// written; otherwise the snapshot is written (once) before returning.
    pub fn open(config: ExperimentConfig) -> Result<Self, CliError> {
        let layout = RunLayout::new(&config.experiment_dir);
        let hash = config.hash()?;
        if let Some(found) = stored_hash(&layout)? {
            if found != hash {
                return Err(CliError::ConfigMismatch {
                    dir: layout.root().to_path_buf(),
                    expected: hash,
                    found,
                });
            }
        }
        let lock = DirLock::acquire(&layout)?;
        layout.create_dirs().map_err(io_err(layout.root()))?;
        if !layout.config_snapshot().exists() {
            let text = serde_json::to_string_pretty(&config.snapshot()).expect("snapshot serializes") + "\n";
            write_atomic(&layout.config_snapshot(), text.as_bytes()).map_err(io_err(&layout.config_snapshot()))?;
        }
        if !layout.config_hash().exists() {
            write_atomic(&layout.config_hash(), format!("{hash}\n").as_bytes()).map_err(io_err(&layout.config_hash()))?;
        }
        Ok(Experiment {
            config,
            layout,
            hash,
            _lock: lock,
        })
    }

    /// Reopen a finished directory from its own snapshot. Environment
    /// overrides apply so HTTP credentials need not be stored.
    pub fn reopen(dir: &Path) -> Result<Self, CliError> {
        let layout = RunLayout::new(dir);
        let mut missing = Vec::new();
        for p in [layout.config_snapshot(), layout.config_hash()] {
            if !p.exists() {
                missing.push(p.display().to_string());
            }
        }
        if !missing.is_empty() {
            return Err(CliError::Missing(missing));
        }
        let snap = layout.config_snapshot();
        let text = fs::read_to_string(&snap).map_err(io_err(&snap))?;
        let mut config: ExperimentConfig = serde_json::from_str(&text).map_err(|e| ConfigError::Parse {
            path: snap.clone(),
            message: e.to_string(),
        })?;
        config.experiment_dir = dir.to_path_buf();
        config.apply_env(&config::process_env);
        let hash = stored_hash(&layout)?.unwrap_or_default();
        let lock = DirLock::acquire(&layout)?;
        Ok(Experiment {
            config,
            layout,
            hash,
            _lock: lock,
        })
    }

    /// Load the persisted question sets, selecting and writing them first
    /// when absent.
    pub fn questions(&self) -> Result<(QuestionSet, QuestionSet), CliError> {
        let c = &self.config;
        let one = |split: Split, file: &Path, n: usize| -> Result<QuestionSet, CliError> {
            let path = self.layout.questions(&split.to_string());
            if path.exists() {
                return Ok(QuestionSet::read_json(&path)?);
            }
            let records = load_quality(file, split)?;
            let set = select_questions(&records, n, seed::derive(c.master_seed, &format!("dataset:{split}")))?;
            set.write_json(&path)?;
            Ok(set)
        };
        let train = one(Split::Train, &c.dataset.train_file, c.dataset.train_size)?;
        let test = one(Split::Test, &c.dataset.test_file, c.dataset.test_size)?;
        let overlap = train
            .questions
            .iter()
            .filter(|q| test.questions.iter().any(|t| t.id == q.id))
            .count();
        if overlap > 0 {
            tracing::warn!(overlap, "train and test question sets share questions");
        }
        Ok((train, test))
    }

    /// Gateway over the given backend with this directory's response cache.
    pub fn gateway(&self, backend: Arc<dyn Backend>, embedder: Arc<dyn Embedder>) -> Result<Gateway, CliError> {
        let cache = ResponseCache::open(&self.layout.cache())?;
        Ok(Gateway::new(backend, embedder, self.config.parallelism).with_cache(cache))
    }

    pub fn states(&self) -> Result<Vec<GenerationState>, CliError> {
        let gens = self.layout.generations().map_err(io_err(self.layout.root()))?;
        let mut out = Vec::with_capacity(gens.len());
        for g in gens {
            out.push(GenerationState::read(&self.layout.generation(g))?);
        }
        Ok(out)
    }
}

pub type Backends = (Arc<dyn Backend>, Arc<dyn Embedder>);

/// Backend and embedder described by the config.
pub fn backends(config: &ExperimentConfig) -> Result<Backends, CliError> {
    if let Some(model) = config.backend.synthetic_model() {
        return Ok((Arc::new(SyntheticBackend::new(model)), Arc::new(HashEmbedder::default())));
    }
    let http = config.backend.http_config().expect("non-synthetic backend is http");
    let backend: Arc<dyn Backend> = Arc::new(HttpBackend::new(http.clone())?);
    let embedder: Arc<dyn Embedder> = match &config.backend {
        BackendSection::Http {
            embedding_model: Some(m),
            ..
        } => {
            let mut e = http;
            e.model = m.clone();
            Arc::new(HttpEmbedder::new(e)?)
        }
        _ => {
            tracing::warn!("no embedding_model configured; diversity uses the hash embedder");
            Arc::new(HashEmbedder::default())
        }
    };
    Ok((backend, embedder))
}

/// Run or resume evolution with the configured backend.
pub fn cmd_evolve(config: ExperimentConfig) -> Result<EvolutionSummary, CliError> {
    let (b, e) = backends(&config)?;
    evolve_with(config, b, e)
}

/// Run or resume evolution over an explicit backend.
pub fn evolve_with(
    config: ExperimentConfig,
    backend: Arc<dyn Backend>,
    embedder: Arc<dyn Embedder>,
) -> Result<EvolutionSummary, CliError> {
    let exp = Experiment::open(config)?;
    let (train, _test) = exp.questions()?;
    let gateway = exp.gateway(backend, embedder)?;
    let bank = exp.config.seed_bank()?;
    let templates = exp.config.templates().map_err(EvolutionError::from)?;
    let settings = exp.config.settings();
    let env = EvolveEnv {
        gateway: &gateway,
        templates: &templates,
        bank: &bank,
        train: &train.questions,
        settings: &settings,
        exec: exp.config.execution,
        layout: &exp.layout,
        config_hash: &exp.hash,
    };
    let summary = evolve(&env)?;
    tracing::info!(
        computed = summary.computed.len(),
        resumed = summary.states.len() - summary.computed.len(),
        stats = ?gateway.stats(),
        "evolution finished"
    );
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StaticGenOutcome {
    pub pool_size: usize,
    pub state: GenerationState,
}

pub fn cmd_staticgen(config: ExperimentConfig) -> Result<StaticGenOutcome, CliError> {
    let (b, e) = backends(&config)?;
    staticgen_with(config, b, e)
}

/// Generate the StaticGen pool and rate it in one Swiss tournament. The
/// rated pool is stored as generation 0 so evaluation treats it like any
/// other run.
pub fn staticgen_with(
    config: ExperimentConfig,
    backend: Arc<dyn Backend>,
    embedder: Arc<dyn Embedder>,
) -> Result<StaticGenOutcome, CliError> {
    if config.objective != Objective::Persuasion {
        return Err(CliError::Usage("staticgen produces persuasion strategies; set objective = \"persuasion\"".into()));
    }
    let exp = Experiment::open(config)?;
    let (train, _test) = exp.questions()?;
    let gateway = exp.gateway(backend, embedder)?;
    let bank = exp.config.seed_bank()?;
    let templates = exp.config.templates().map_err(EvolutionError::from)?;
    let settings = exp.config.settings();
    let c = &exp.config;

    let pool_path = exp.layout.staticgen_pool();
    let pool: StaticGenPool = if pool_path.exists() {
        let text = fs::read_to_string(&pool_path).map_err(io_err(&pool_path))?;
        serde_json::from_str(&text).map_err(|e| EvolutionError::State {
            path: pool_path.clone(),
            reason: e.to_string(),
        })?
    } else {
        let target = c
            .evaluation
            .staticgen_target
            .unwrap_or_else(|| lifetime_count(&bank, c.generations, c.kill_fraction));
        let mutator = Mutator {
            gateway: &gateway,
            templates: &templates,
            bank: &bank,
            exec: c.execution,
        };
        let pool = staticgen(&mutator, target, c.master_seed)?;
        let text = serde_json::to_string_pretty(&pool).expect("pool serializes") + "\n";
        write_atomic(&pool_path, text.as_bytes()).map_err(io_err(&pool_path))?;
        pool
    };

    let gen_path = exp.layout.generation(0);
    if gen_path.exists() {
        let state = GenerationState::read(&gen_path)?;
        return Ok(StaticGenOutcome {
            pool_size: pool.strategies.len(),
            state,
        });
    }
    let env = EvolveEnv {
        gateway: &gateway,
        templates: &templates,
        bank: &bank,
        train: &train.questions,
        settings: &settings,
        exec: c.execution,
        layout: &exp.layout,
        config_hash: &exp.hash,
    };
    let pop = PopulationState {
        generation: 0,
        objective: Objective::Persuasion,
        strategies: pool.strategies.clone(),
        teams: Vec::new(),
    };
    let (rated, records, model, debates) = rate_population(&env, &pop, 0, seed::derive(c.master_seed, "staticgen:tournament"))?;
    let mut lines = String::new();
    for r in &records {
        lines.push_str(&serde_json::to_string(r).expect("record serializes"));
        lines.push('\n');
    }
    let matches = exp.layout.matches(0);
    write_atomic(&matches, lines.as_bytes()).map_err(io_err(&matches))?;
    let ratings = exp.layout.ratings(0);
    model.write_json(&ratings).map_err(io_err(&ratings))?;
    let state = GenerationState {
        format: STATE_FORMAT,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: exp.hash.clone(),
        generation: 0,
        population: rated,
        matches: records.len(),
        debates,
        fit_epochs: model.best_epoch,
        fit_converged: model.converged,
        fit_cost: model.final_cost(),
        kill_count: None,
        selection: None,
        children: Vec::new(),
        next_population: None,
    };
    state.write(&gen_path)?;
    tracing::info!(pool = pool.strategies.len(), stats = ?gateway.stats(), "staticgen finished");
    Ok(StaticGenOutcome {
        pool_size: pool.strategies.len(),
        state,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EvaluateOptions {
    pub iterations: Option<usize>,
    pub seed: Option<u64>,
}

fn label(dir: &Path, objective: Objective) -> String {
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    format!("{objective}:{name}")
}

fn panel_for(exp: &Experiment) -> Result<ElitePanel, CliError> {
    let path = exp.layout.panel();
    if path.exists() {
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        return serde_json::from_str(&text).map_err(|e| {
            CliError::Evolution(EvolutionError::State {
                path,
                reason: e.to_string(),
            })
        });
    }
    let states = exp.states()?;
    if states.is_empty() {
        return Err(CliError::Missing(vec![exp.layout.generation(0).display().to_string()]));
    }
    let train_p = exp.layout.questions("train");
    let test_p = exp.layout.questions("test");
    let missing: Vec<String> = [&train_p, &test_p]
        .iter()
        .filter(|p| !p.exists())
        .map(|p| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(CliError::Missing(missing));
    }
    let train = QuestionSet::read_json(&train_p)?;
    let test = QuestionSet::read_json(&test_p)?;
    let (b, e) = backends(&exp.config)?;
    let gateway = exp.gateway(b, e)?;
    let templates = exp.config.templates().map_err(EvolutionError::from)?;
    let p = PanelEnv {
        env: DebateEnv {
            gateway: &gateway,
            templates: &templates,
        },
        train: &train.questions,
        test: &test.questions,
        debate: exp.config.debate.debate_config(),
        seed: seed::derive(exp.config.master_seed, "panel"),
        exec: exp.config.execution,
    };
    let panel = build_elite_panel(&p, &states, exp.config.evaluation.panel_size)?;
    let text = serde_json::to_string_pretty(&panel).expect("panel serializes") + "\n";
    write_atomic(&path, text.as_bytes()).map_err(io_err(&path))?;
    Ok(panel)
}

fn distinct(dirs: &[&Path]) -> Result<(), CliError> {
    for (i, a) in dirs.iter().enumerate() {
        for b in &dirs[..i] {
            let same = match (a.canonicalize(), b.canonicalize()) {
                (Ok(x), Ok(y)) => x == y,
                _ => a == b,
            };
            if same {
                return Err(CliError::Usage(format!("{} given twice", a.display())));
            }
        }
    }
    Ok(())
}

/// Elite panels for two finished runs and the bootstrap comparison of
/// their generalization gaps, `mean(gap_a) - mean(gap_b)`. The panels land
/// in each directory; the comparison is written to both.
pub fn cmd_evaluate(dir_a: &Path, dir_b: &Path, opts: EvaluateOptions) -> Result<Comparison, CliError> {
    distinct(&[dir_a, dir_b])?;
    let a = Experiment::reopen(dir_a)?;
    let b = Experiment::reopen(dir_b)?;
    let panel_a = panel_for(&a)?;
    let panel_b = panel_for(&b)?;
    let ev = &a.config.evaluation;
    let iterations = opts.iterations.unwrap_or(ev.bootstrap_iterations);
    let rng_seed = opts.seed.unwrap_or_else(|| seed::derive(a.config.master_seed, "bootstrap"));
    let bootstrap = bootstrap_gap_difference(
        &panel_a.gaps(),
        &panel_b.gaps(),
        iterations,
        rng_seed,
        ev.resampling,
        a.config.execution,
    )?;
    let cmp = Comparison {
        panel_a: label(dir_a, panel_a.objective),
        panel_b: label(dir_b, panel_b.objective),
        n_a: panel_a.entities.len(),
        n_b: panel_b.entities.len(),
        mean_gap_a: panel_a.mean_gap(),
        mean_gap_b: panel_b.mean_gap(),
        bootstrap,
    };
    let text = serde_json::to_string_pretty(&cmp).expect("comparison serializes") + "\n";
    for exp in [&a, &b] {
        let p = exp.layout.comparison();
        write_atomic(&p, text.as_bytes()).map_err(io_err(&p))?;
    }
    Ok(cmp)
}

/// Export the report bundle for one directory. Absent later stages give a
/// partial report; absent generation states are an error.
pub fn cmd_report(dir: &Path) -> Result<ReportSidecar, CliError> {
    let layout = RunLayout::new(dir);
    let _lock = DirLock::acquire(&layout)?;
    Ok(export_report(&layout)?)
}

/// Mean pairwise cosine distance over every strategy each run ever created.
/// The full list of records is written to every directory.
pub fn cmd_diversity(dirs: &[PathBuf]) -> Result<Vec<DiversityRecord>, CliError> {
    if dirs.is_empty() {
        return Err(CliError::Usage("diversity needs at least one experiment directory".into()));
    }
    let refs: Vec<&Path> = dirs.iter().map(PathBuf::as_path).collect();
    distinct(&refs)?;
    let mut exps = Vec::new();
    let mut records = Vec::new();
    for d in dirs {
        let exp = Experiment::reopen(d)?;
        let states = exp.states()?;
        if states.is_empty() {
            return Err(CliError::Missing(vec![exp.layout.generation(0).display().to_string()]));
        }
        let texts = lifetime_texts(&states);
        let (b, e) = backends(&exp.config)?;
        let gateway = exp.gateway(b, e)?;
        let diversity = embedding_diversity(&texts, &gateway)?;
        records.push(DiversityRecord {
            label: label(d, exp.config.objective),
            texts: texts.len(),
            diversity,
            embedder: gateway.embedder_id(),
        });
        exps.push(exp);
    }
    let text = serde_json::to_string_pretty(&records).expect("records serialize") + "\n";
    for exp in &exps {
        let p = exp.layout.diversity();
        write_atomic(&p, text.as_bytes()).map_err(io_err(&p))?;
    }
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationSummary {
    pub config_hash: String,
    pub objective: Objective,
    pub generations: usize,
    pub backend: String,
    pub lifetime_strategies: usize,
    pub experiment_dir: PathBuf,
    /// Present when the directory already holds a run.
    pub existing_hash: Option<String>,
}

/// Load and validate a config without touching the experiment directory.
pub fn cmd_validate_config(path: &Path) -> Result<ValidationSummary, CliError> {
    let c = ExperimentConfig::load(path, &config::process_env)?;
    let bank = c.seed_bank()?;
    Ok(ValidationSummary {
        config_hash: c.hash()?,
        objective: c.objective,
        generations: c.generations,
        backend: match &c.backend {
            BackendSection::Synthetic { .. } => "synthetic".into(),
            BackendSection::Http { endpoint, model, .. } => format!("http {model} at {endpoint}"),
        },
        lifetime_strategies: lifetime_count(&bank, c.generations, c.kill_fraction),
        existing_hash: stored_hash(&RunLayout::new(&c.experiment_dir))?,
        experiment_dir: c.experiment_dir,
    })
}
