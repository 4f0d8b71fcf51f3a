//! Plot-ready report tables for one experiment directory.
//!
//! Five CSV tables plus a JSON sidecar (schema version, row counts, absent
//! stages) and a plain-text summary. Output depends only on persisted state,
//! so re-exporting is byte-identical.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{elo_accuracy_correlation, BootstrapResult, ElitePanel};
use crate::debate::word_count;
use crate::evolution::GenerationState;
use crate::layout::{write_atomic, RunLayout};

pub const SCHEMA_VERSION: u32 = 1;

pub const CATEGORY_ELO: &str = "category_elo.csv";
pub const ELO_ACCURACY: &str = "elo_accuracy.csv";
pub const GAP_DIFFERENCE: &str = "gap_difference.csv";
pub const DIVERSITY: &str = "diversity.csv";
pub const WORD_COUNTS: &str = "word_counts.csv";
pub const SIDECAR: &str = "report.json";
pub const SUMMARY: &str = "summary.txt";

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("missing: {}", .0.join(", "))]
    Missing(Vec<String>),
    #[error("{path}: {reason}")]
    Read { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Gap comparison between two elite panels, written by `evaluate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub panel_a: String,
    pub panel_b: String,
    pub n_a: usize,
    pub n_b: usize,
    pub mean_gap_a: f64,
    pub mean_gap_b: f64,
    pub bootstrap: BootstrapResult,
}

/// Diversity of one run's strategy texts, written by `diversity`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityRecord {
    pub label: String,
    pub texts: usize,
    pub diversity: f64,
    pub embedder: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableInfo {
    pub file: String,
    pub columns: Vec<String>,
    pub rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSidecar {
    pub schema_version: u32,
    pub generations: Vec<usize>,
    pub tables: Vec<TableInfo>,
    /// Stages whose outputs were absent; their tables are empty.
    pub missing: Vec<String>,
    pub elo_accuracy_pearson: Option<f64>,
    pub gauge: String,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, ReportError> {
    let text = std::fs::read_to_string(path).map_err(|e| ReportError::Read {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    serde_json::from_str(&text).map_err(|e| ReportError::Read {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn optional<T: for<'de> Deserialize<'de>>(path: &Path, missing: &mut Vec<String>, root: &Path) -> Result<Option<T>, ReportError> {
    if path.exists() {
        read_json(path).map(Some)
    } else {
        missing.push(path.strip_prefix(root).unwrap_or(path).display().to_string());
        Ok(None)
    }
}

fn csv_table<R: Serialize>(columns: &[&str], rows: &[R]) -> Vec<u8> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(columns).expect("in-memory write");
    for r in rows {
        w.serialize(r).expect("row serializes");
    }
    w.into_inner().expect("in-memory flush")
}

#[derive(Serialize)]
struct CategoryEloRow<'a> {
    generation: usize,
    category: &'a str,
    members: usize,
    mean_elo: f64,
}

#[derive(Serialize)]
struct WordCountRow<'a> {
    generation: usize,
    id: &'a str,
    words: usize,
}

#[derive(Serialize)]
struct GapRow<'a> {
    panel_a: &'a str,
    panel_b: &'a str,
    n_a: usize,
    n_b: usize,
    mean_gap_a: f64,
    mean_gap_b: f64,
    mean_difference: f64,
    ci_low: f64,
    ci_high: f64,
    iterations: usize,
    resampling: super::Resampling,
    rng_seed: u64,
}

/// Write the report bundle into `reports/`. Fails only when no generation
/// state exists; later stages that have not run yield empty tables and are
/// listed in the sidecar.
pub fn export_report(layout: &RunLayout) -> Result<ReportSidecar, ReportError> {
    let root = layout.root();
    let gens = layout.generations().unwrap_or_default();
    let mut absent = Vec::new();
    if !layout.config_snapshot().exists() {
        absent.push("config.json".to_string());
    }
    if gens.is_empty() {
        absent.push("generations/gen_000.json".to_string());
    }
    if !absent.is_empty() {
        return Err(ReportError::Missing(absent));
    }
    let states: Vec<GenerationState> = gens
        .iter()
        .map(|&g| read_json(&layout.generation(g)))
        .collect::<Result<_, _>>()?;

    let mut missing = Vec::new();
    let panel: Option<ElitePanel> = optional(&layout.panel(), &mut missing, root)?;
    let comparison: Option<Comparison> = optional(&layout.comparison(), &mut missing, root)?;
    let diversity: Option<Vec<DiversityRecord>> = optional(&layout.diversity(), &mut missing, root)?;
    if let Some(last) = states.last() {
        if last.next_population.is_some() {
            missing.push(format!("generations/gen_{:03}.json", last.generation + 1));
        }
    }
    if !missing.is_empty() {
        tracing::warn!(missing = ?missing, "report is partial");
    }

    let mut cat_rows = Vec::new();
    for s in &states {
        let mut by_cat: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for c in s.population.candidates() {
            if let Some(r) = c.rating {
                let e = by_cat.entry(c.category).or_insert((0.0, 0));
                e.0 += r;
                e.1 += 1;
            }
        }
        for (cat, (sum, n)) in by_cat {
            cat_rows.push((s.generation, cat, n, sum / n as f64));
        }
    }
    let cat_rows: Vec<CategoryEloRow> = cat_rows
        .iter()
        .map(|(g, c, n, m)| CategoryEloRow {
            generation: *g,
            category: c,
            members: *n,
            mean_elo: *m,
        })
        .collect();

    let mut word_rows = Vec::new();
    for s in &states {
        for (id, text) in s.population.texts() {
            word_rows.push(WordCountRow {
                generation: s.generation,
                id,
                words: word_count(text),
            });
        }
    }

    let elite_rows: Vec<super::EliteEntry> = panel.as_ref().map(|p| p.entities.clone()).unwrap_or_default();
    let gap_rows: Vec<GapRow> = comparison
        .iter()
        .map(|c| GapRow {
            panel_a: &c.panel_a,
            panel_b: &c.panel_b,
            n_a: c.n_a,
            n_b: c.n_b,
            mean_gap_a: c.mean_gap_a,
            mean_gap_b: c.mean_gap_b,
            mean_difference: c.bootstrap.mean_difference,
            ci_low: c.bootstrap.ci_low,
            ci_high: c.bootstrap.ci_high,
            iterations: c.bootstrap.iterations,
            resampling: c.bootstrap.resampling,
            rng_seed: c.bootstrap.rng_seed,
        })
        .collect();
    let div_rows = diversity.unwrap_or_default();

    let tables: Vec<(&str, Vec<&str>, Vec<u8>, usize)> = vec![
        {
            let cols = vec!["generation", "category", "members", "mean_elo"];
            (CATEGORY_ELO, cols.clone(), csv_table(&cols, &cat_rows), cat_rows.len())
        },
        {
            let cols = vec!["id", "category", "rating", "train_accuracy", "test_accuracy", "gap"];
            (ELO_ACCURACY, cols.clone(), csv_table(&cols, &elite_rows), elite_rows.len())
        },
        {
            let cols = vec![
                "panel_a",
                "panel_b",
                "n_a",
                "n_b",
                "mean_gap_a",
                "mean_gap_b",
                "mean_difference",
                "ci_low",
                "ci_high",
                "iterations",
                "resampling",
                "rng_seed",
            ];
            (GAP_DIFFERENCE, cols.clone(), csv_table(&cols, &gap_rows), gap_rows.len())
        },
        {
            let cols = vec!["label", "texts", "diversity", "embedder"];
            (DIVERSITY, cols.clone(), csv_table(&cols, &div_rows), div_rows.len())
        },
        {
            let cols = vec!["generation", "id", "words"];
            (WORD_COUNTS, cols.clone(), csv_table(&cols, &word_rows), word_rows.len())
        },
    ];

    let out_dir = layout.reports();
    let write = |name: &str, bytes: &[u8]| {
        let path = out_dir.join(name);
        write_atomic(&path, bytes).map_err(|source| ReportError::Write { path, source })
    };
    let mut infos = Vec::new();
    for (name, cols, bytes, rows) in &tables {
        write(name, bytes)?;
        infos.push(TableInfo {
            file: name.to_string(),
            columns: cols.iter().map(|c| c.to_string()).collect(),
            rows: *rows,
        });
    }

    let pearson = panel.as_ref().and_then(|p| elo_accuracy_correlation(p).ok());
    let sidecar = ReportSidecar {
        schema_version: SCHEMA_VERSION,
        generations: gens.clone(),
        tables: infos,
        missing,
        elo_accuracy_pearson: pearson,
        gauge: "ratings shifted so each generation's population mean is 400".into(),
    };
    write(SIDECAR, (serde_json::to_string_pretty(&sidecar).expect("sidecar serializes") + "\n").as_bytes())?;
    write(SUMMARY, summary(&states, panel.as_ref(), comparison.as_ref(), &div_rows, &sidecar).as_bytes())?;
    Ok(sidecar)
}

fn summary(
    states: &[GenerationState],
    panel: Option<&ElitePanel>,
    comparison: Option<&Comparison>,
    diversity: &[DiversityRecord],
    sidecar: &ReportSidecar,
) -> String {
    use std::fmt::Write;
    let mut s = String::new();
    let last = states.last().expect("at least one state");
    let _ = writeln!(s, "objective: {}", last.population.objective);
    let _ = writeln!(s, "generations recorded: {}", states.len());
    let _ = writeln!(s, "final population: {}", last.population.len());
    if let Some(p) = panel {
        let _ = writeln!(
            s,
            "elite panel: {} entities from generation {}{}, mean gap {:.4}",
            p.entities.len(),
            p.generation,
            if p.shortfall { " (smaller than requested)" } else { "" },
            p.mean_gap()
        );
    }
    if let Some(r) = sidecar.elo_accuracy_pearson {
        let _ = writeln!(s, "elo vs test accuracy: r = {r:.4}");
    }
    if let Some(c) = comparison {
        let b = &c.bootstrap;
        let _ = writeln!(
            s,
            "gap difference {} - {}: {:.4} (95% CI {:.4} to {:.4}, {} iterations)",
            c.panel_a, c.panel_b, b.mean_difference, b.ci_low, b.ci_high, b.iterations
        );
    }
    for d in diversity {
        let _ = writeln!(s, "diversity {}: {:.4} over {} texts", d.label, d.diversity, d.texts);
    }
    if !sidecar.missing.is_empty() {
        let _ = writeln!(s, "absent: {}", sidecar.missing.join(", "));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_dir_lists_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        match export_report(&RunLayout::new(dir.path())) {
            Err(ReportError::Missing(m)) => {
                assert!(m.contains(&"config.json".to_string()));
                assert!(m.iter().any(|x| x.starts_with("generations/")));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn csv_has_header_and_rows() {
        let rows = vec![CategoryEloRow {
            generation: 1,
            category: "Liking",
            members: 5,
            mean_elo: 401.5,
        }];
        let bytes = csv_table(&["generation", "category", "members", "mean_elo"], &rows);
        assert_eq!(String::from_utf8(bytes).unwrap(), "generation,category,members,mean_elo\n1,Liking,5,401.5\n");
    }
}
