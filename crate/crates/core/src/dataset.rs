//! QuALITY ingestion and binary-choice question selection.
//!
//! Records are read from line-delimited JSON. Selection keeps hard questions,
//! at most one per article, drops options with degenerate phrasing, favours
//! the shortest articles, and reduces each question to the gold option plus
//! the option that follows it.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::seed;

/// Options containing any of these (case-insensitive) disqualify a question.
pub const EXCLUDED_PHRASES: [&str; 3] = ["all of the", "both are", "none of the"];

pub const DEFAULT_DIFFICULTY: f64 = 400.0;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("dataset file not found: {0}")]
    Missing(PathBuf),
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed records in {path}: {}", format_lines(.lines))]
    Malformed {
        path: PathBuf,
        lines: Vec<(usize, String)>,
    },
    #[error("only {available} questions survive filtering, {requested} requested")]
    Shortfall { available: usize, requested: usize },
    #[error("question set size must be at least 1")]
    EmptyRequest,
    #[error("question set file {path}: {message}")]
    QuestionSetFile { path: PathBuf, message: String },
}

fn format_lines(lines: &[(usize, String)]) -> String {
    lines
        .iter()
        .map(|(n, m)| format!("line {n}: {m}"))
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => f.write_str("train"),
            Split::Test => f.write_str("test"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawQuestion {
    pub id: String,
    pub question: String,
    pub options: Vec<String>,
    /// Zero-based index of the gold option.
    pub gold_index: usize,
    pub hard: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRecord {
    /// One-based line number in the source file.
    pub line: usize,
    pub split: Split,
    pub article_id: String,
    pub article: String,
    pub questions: Vec<RawQuestion>,
}

// QuALITY on-disk shape. `gold_label` is one-based there.
#[derive(Deserialize)]
struct QualityLine {
    article_id: String,
    article: String,
    #[serde(default)]
    questions: Vec<QualityQuestion>,
}

#[derive(Deserialize)]
struct QualityQuestion {
    question: String,
    options: Vec<String>,
    gold_label: Option<i64>,
    #[serde(default, alias = "hard")]
    difficult: Flag,
    #[serde(default)]
    question_unique_id: Option<String>,
}

#[derive(Default, Deserialize)]
#[serde(untagged)]
enum Flag {
    Bool(bool),
    Int(i64),
    #[default]
    Absent,
}

impl Flag {
    fn is_set(&self) -> bool {
        match self {
            Flag::Bool(b) => *b,
            Flag::Int(i) => *i != 0,
            Flag::Absent => false,
        }
    }
}

/// Read a QuALITY-format file. Every malformed line is reported, not just the
/// first one.
pub fn load_quality(path: &Path, split: Split) -> Result<Vec<RawRecord>, DatasetError> {
    if !path.exists() {
        return Err(DatasetError::Missing(path.to_path_buf()));
    }
    let file = std::fs::File::open(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut records = Vec::new();
    let mut bad = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_line(&line, line_no, split) {
            Ok(r) => records.push(r),
            Err(msg) => bad.push((line_no, msg)),
        }
    }
    if !bad.is_empty() {
        return Err(DatasetError::Malformed {
            path: path.to_path_buf(),
            lines: bad,
        });
    }
    Ok(records)
}

fn parse_line(line: &str, line_no: usize, split: Split) -> Result<RawRecord, String> {
    let raw: QualityLine = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let mut questions = Vec::with_capacity(raw.questions.len());
    for (qi, q) in raw.questions.into_iter().enumerate() {
        let gold = q
            .gold_label
            .ok_or_else(|| format!("question {qi} has no gold label"))?;
        if gold < 1 || gold as usize > q.options.len() {
            return Err(format!(
                "question {qi} gold label {gold} outside 1..={}",
                q.options.len()
            ));
        }
        questions.push(RawQuestion {
            id: q
                .question_unique_id
                .unwrap_or_else(|| format!("{}#{qi}", raw.article_id)),
            question: q.question,
            options: q.options,
            gold_index: (gold - 1) as usize,
            hard: q.difficult.is_set(),
        });
    }
    Ok(RawRecord {
        line: line_no,
        split,
        article_id: raw.article_id,
        article: raw.article,
        questions,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DebateQuestion {
    pub id: String,
    pub article_id: String,
    pub article_text: String,
    pub question_text: String,
    pub correct_answer: String,
    pub incorrect_answer: String,
    pub split: Split,
    pub difficulty_rating: f64,
}

/// Counts after each selection rule, stored alongside the selected set.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterProvenance {
    pub input_questions: usize,
    pub hard: usize,
    pub one_per_article: usize,
    pub phrase_filtered: usize,
    pub selected: usize,
    pub excluded_phrases: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionSet {
    pub split: Split,
    pub requested_size: usize,
    pub seed: u64,
    pub provenance: FilterProvenance,
    pub questions: Vec<DebateQuestion>,
}

fn has_excluded_phrase(option: &str) -> bool {
    let lower = option.to_lowercase();
    EXCLUDED_PHRASES.iter().any(|p| lower.contains(p))
}

/// Select `n` binary-choice questions. Rules apply in order:
/// hard flag, first hard question per article, excluded phrases, shortest
/// articles first (character count; ties ordered by a seeded hash of the
/// article id), then reduction to the gold option and the option after it.
pub fn select_questions(
    records: &[RawRecord],
    n: usize,
    seed: u64,
) -> Result<QuestionSet, DatasetError> {
    if n == 0 {
        return Err(DatasetError::EmptyRequest);
    }
    let split = records.first().map(|r| r.split).unwrap_or(Split::Train);
    let mut prov = FilterProvenance {
        excluded_phrases: EXCLUDED_PHRASES.iter().map(|s| s.to_string()).collect(),
        ..Default::default()
    };

    // (1) hard only, remembering the owning record
    let mut hard: Vec<(&RawRecord, &RawQuestion)> = Vec::new();
    for r in records {
        prov.input_questions += r.questions.len();
        hard.extend(r.questions.iter().filter(|q| q.hard).map(|q| (r, q)));
    }
    prov.hard = hard.len();

    // (2) first hard question per article
    let mut seen = HashSet::new();
    let per_article: Vec<_> = hard
        .into_iter()
        .filter(|(r, _)| seen.insert(r.article_id.as_str()))
        .collect();
    prov.one_per_article = per_article.len();

    // (3) excluded phrases in any option; degenerate duplicate distractors too
    let clean: Vec<_> = per_article
        .into_iter()
        .filter(|(_, q)| !q.options.iter().any(|o| has_excluded_phrase(o)))
        .filter(|(_, q)| {
            let d = (q.gold_index + 1) % q.options.len();
            q.options[d] != q.options[q.gold_index]
        })
        .collect();
    prov.phrase_filtered = clean.len();

    if clean.len() < n {
        return Err(DatasetError::Shortfall {
            available: clean.len(),
            requested: n,
        });
    }

    // (4) shortest articles first
    let mut keyed: Vec<_> = clean
        .into_iter()
        .map(|(r, q)| {
            let tie = seed::hash64(format!("{seed}:{}", r.article_id).as_bytes());
            ((r.article.chars().count(), tie, r.article_id.clone()), r, q)
        })
        .collect();
    keyed.sort_by(|a, b| a.0.cmp(&b.0));

    // (5) gold option plus the one after it, wrapping
    let questions: Vec<DebateQuestion> = keyed
        .into_iter()
        .take(n)
        .map(|(_, r, q)| {
            let d = (q.gold_index + 1) % q.options.len();
            DebateQuestion {
                id: q.id.clone(),
                article_id: r.article_id.clone(),
                article_text: r.article.clone(),
                question_text: q.question.clone(),
                correct_answer: q.options[q.gold_index].clone(),
                incorrect_answer: q.options[d].clone(),
                split: r.split,
                difficulty_rating: DEFAULT_DIFFICULTY,
            }
        })
        .collect();
    prov.selected = questions.len();

    Ok(QuestionSet {
        split,
        requested_size: n,
        seed,
        provenance: prov,
        questions,
    })
}

impl QuestionSet {
    pub fn len(&self) -> usize {
        self.questions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.questions.is_empty()
    }

    /// Check the set-level invariants.
    pub fn validate(&self) -> Result<(), String> {
        if self.questions.len() != self.requested_size {
            return Err(format!(
                "{} questions for requested size {}",
                self.questions.len(),
                self.requested_size
            ));
        }
        let mut articles = HashSet::new();
        for q in &self.questions {
            if q.split != self.split {
                return Err(format!("question {} has split {}", q.id, q.split));
            }
            if !articles.insert(&q.article_id) {
                return Err(format!("article {} used twice", q.article_id));
            }
            if q.correct_answer == q.incorrect_answer {
                return Err(format!("question {} has identical answers", q.id));
            }
            if has_excluded_phrase(&q.correct_answer) || has_excluded_phrase(&q.incorrect_answer) {
                return Err(format!("question {} has an excluded phrase", q.id));
            }
        }
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<(), DatasetError> {
        let body = serde_json::to_string_pretty(self).expect("question set serializes");
        std::fs::write(path, body + "\n").map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn read_json(path: &Path) -> Result<Self, DatasetError> {
        let body = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let set: QuestionSet =
            serde_json::from_str(&body).map_err(|e| DatasetError::QuestionSetFile {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?;
        set.validate()
            .map_err(|message| DatasetError::QuestionSetFile {
                path: path.to_path_buf(),
                message,
            })?;
        Ok(set)
    }

    /// Lookup by question id.
    pub fn by_id(&self) -> BTreeMap<&str, &DebateQuestion> {
        self.questions.iter().map(|q| (q.id.as_str(), q)).collect()
    }
}
