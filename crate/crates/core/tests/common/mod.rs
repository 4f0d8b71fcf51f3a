#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use debateqd::cli::ExperimentConfig;
use debateqd::gateway::{Backend, CompletionRequest, CompletionResponse, GatewayError, SyntheticAgentModel, SyntheticBackend};

/// Sentence planted in every generated article so leaks are easy to spot.
pub fn marker(article_id: &str) -> String {
    format!("The lighthouse keeper of {article_id} counted seventeen gulls.")
}

/// QuALITY-format file with `n` articles, one clean hard question each.
/// Article lengths grow with the index so selection order is the file order.
pub fn write_quality(path: &Path, n: usize, prefix: &str) {
    let mut out = String::new();
    for i in 0..n {
        let id = format!("{prefix}-{i:03}");
        let body = format!("{} {}", marker(&id), "The tide rose over the old pier. ".repeat(i + 1));
        let line = serde_json::json!({
            "article_id": id,
            "article": body,
            "questions": [{
                "question": format!("What did the keeper of {id} count?"),
                "options": ["Gulls", "Boats", "Stars", "Waves"],
                "gold_label": 1 + (i % 4),
                "difficult": 1,
                "question_unique_id": format!("{id}-q"),
            }],
        });
        out.push_str(&line.to_string());
        out.push('\n');
    }
    std::fs::write(path, out).unwrap();
}

pub struct RunSpec<'a> {
    pub objective: &'a str,
    pub generations: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub master_seed: u64,
    pub bonus: f64,
    pub extra: &'a str,
}

impl Default for RunSpec<'_> {
    fn default() -> Self {
        RunSpec {
            objective: "persuasion",
            generations: 2,
            train_size: 2,
            test_size: 2,
            master_seed: 11,
            bonus: 0.0,
            extra: "",
        }
    }
}

/// Write dataset files (once) and a synthetic-backend config under `root`,
/// returning the loaded config for experiment directory `root/dir`.
pub fn synthetic_config(root: &Path, dir: &str, run: &RunSpec<'_>) -> ExperimentConfig {
    let train = root.join("train.jsonl");
    let dev = root.join("dev.jsonl");
    if !train.exists() {
        write_quality(&train, 12, "tr");
        write_quality(&dev, 12, "dv");
    }
    let text = format!(
        r#"
objective = "{objective}"
generations = {generations}
master_seed = {seed}
experiment_dir = "{dir}"
parallelism = 8
{extra}

[dataset]
train_file = "train.jsonl"
test_file = "dev.jsonl"
train_size = {train_size}
test_size = {test_size}

[backend]
kind = "synthetic"
seed = {seed}
correct_side_bonus = {bonus}

[debate]
rounds = 1
word_limit_per_argument = 80
transcript_word_limit = 300

[evaluation]
bootstrap_iterations = 2000
"#,
        objective = run.objective,
        generations = run.generations,
        seed = run.master_seed,
        extra = run.extra,
        train_size = run.train_size,
        test_size = run.test_size,
        bonus = run.bonus,
    );
    let path = root.join(format!("{dir}.toml"));
    std::fs::write(&path, text).unwrap();
    ExperimentConfig::load(&path, &|_| None).unwrap()
}

pub fn synthetic_backend(cfg: &ExperimentConfig) -> Arc<dyn Backend> {
    let model: SyntheticAgentModel = cfg.backend.synthetic_model().expect("synthetic backend");
    Arc::new(SyntheticBackend::new(model))
}

/// Counts calls reaching the wrapped backend.
pub struct Counting {
    pub inner: Arc<dyn Backend>,
    pub calls: AtomicU64,
}

impl Backend for Counting {
    fn id(&self) -> &str {
        self.inner.id()
    }
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, GatewayError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.complete(req)
    }
}

/// Fails every call after the first `budget`, like a process killed mid-run.
pub struct FailAfter {
    pub inner: Arc<dyn Backend>,
    pub budget: u64,
    pub used: AtomicU64,
}

impl Backend for FailAfter {
    fn id(&self) -> &str {
        self.inner.id()
    }
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, GatewayError> {
        if self.used.fetch_add(1, Ordering::SeqCst) >= self.budget {
            return Err(GatewayError::Unreachable {
                attempts: 1,
                message: "killed".into(),
            });
        }
        self.inner.complete(req)
    }
}

/// Relative path -> bytes for every file under `dir`.
pub fn snapshot_files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    if !dir.exists() {
        return out;
    }
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}
