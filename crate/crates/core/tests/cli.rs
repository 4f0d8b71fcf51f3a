mod common;

use std::process::Command;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use common::{snapshot_files, synthetic_backend, synthetic_config, Counting, RunSpec};
use debateqd::analysis::report;
use debateqd::analysis::ElitePanel;
use debateqd::cli::{self, exit, CliError, EvaluateOptions, Experiment};
use debateqd::evolution::{GenerationState, StaticGenPool};
use debateqd::gateway::HashEmbedder;
use debateqd::layout::RunLayout;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_debateqd"))
}

#[test]
fn evolve_writes_every_artifact() {
    let root = tempfile::tempdir().unwrap();
    let cfg = synthetic_config(
        root.path(),
        "run",
        &RunSpec {
            generations: 2,
            train_size: 3,
            ..RunSpec::default()
        },
    );
    let dir = cfg.experiment_dir.clone();
    let summary = cli::cmd_evolve(cfg).unwrap();
    let l = RunLayout::new(&dir);

    // Generations 0 and 1 are selected; generation 2 is the rated final pool.
    assert_eq!(l.generations().unwrap(), vec![0, 1, 2]);
    assert_eq!(summary.computed, vec![0, 1, 2]);
    for g in 0..=2 {
        assert!(l.matches(g).exists() && l.transcripts(g).exists() && l.ratings(g).exists());
        let st = GenerationState::read(&l.generation(g)).unwrap();
        // 35 players -> 6 rounds of 17 matches, 4 configs on 3 questions each
        assert_eq!(st.matches, 6 * 17);
        assert_eq!(st.debates, 6 * 17 * 4 * 3);
        let lines = std::fs::read_to_string(l.transcripts(g)).unwrap().lines().count();
        assert_eq!(lines, st.debates);
        assert_eq!(st.selection.is_some(), g < 2);
    }
    assert!(l.config_snapshot().exists() && l.config_hash().exists() && l.cache().exists());
    assert!(!l.lock().exists());
    assert_eq!(
        debateqd::dataset::QuestionSet::read_json(&l.questions("train")).unwrap().len(),
        3
    );
}

#[test]
fn rerun_on_completed_dir_makes_no_backend_calls() {
    let root = tempfile::tempdir().unwrap();
    let cfg = synthetic_config(root.path(), "run", &RunSpec::default());
    let dir = cfg.experiment_dir.clone();
    cli::cmd_evolve(cfg.clone()).unwrap();
    let before = snapshot_files(&dir);
    let counter = Arc::new(Counting {
        inner: synthetic_backend(&cfg),
        calls: AtomicU64::new(0),
    });
    let s = cli::evolve_with(cfg, counter.clone(), Arc::new(HashEmbedder::default())).unwrap();
    assert!(s.computed.is_empty());
    assert_eq!(counter.calls.load(Ordering::SeqCst), 0);
    assert_eq!(snapshot_files(&dir), before);
}

#[test]
fn mismatched_config_is_refused_without_touching_files() {
    let root = tempfile::tempdir().unwrap();
    let cfg = synthetic_config(
        root.path(),
        "run",
        &RunSpec {
            generations: 1,
            ..RunSpec::default()
        },
    );
    let dir = cfg.experiment_dir.clone();
    cli::cmd_evolve(cfg).unwrap();
    let before = snapshot_files(&dir);

    // Same directory, different seed.
    synthetic_config(
        root.path(),
        "run",
        &RunSpec {
            generations: 1,
            master_seed: 12,
            ..RunSpec::default()
        },
    );
    let out = bin().arg("evolve").arg(root.path().join("run.toml")).output().unwrap();
    assert_eq!(out.status.code(), Some(exit::CONFIG_MISMATCH));
    assert!(String::from_utf8_lossy(&out.stderr).contains("config hash"));
    assert_eq!(snapshot_files(&dir), before);
}

#[test]
fn held_lock_blocks_a_second_writer() {
    let root = tempfile::tempdir().unwrap();
    let cfg = synthetic_config(root.path(), "run", &RunSpec::default());
    let held = Experiment::open(cfg.clone()).unwrap();
    let err = cli::cmd_evolve(cfg).unwrap_err();
    assert!(matches!(err, CliError::Locked { .. }));
    assert_eq!(err.exit_code(), exit::LOCKED);
    drop(held);
}

#[test]
fn partial_report_lists_absent_stages() {
    let root = tempfile::tempdir().unwrap();
    let cfg = synthetic_config(
        root.path(),
        "run",
        &RunSpec {
            generations: 1,
            ..RunSpec::default()
        },
    );
    let dir = cfg.experiment_dir.clone();
    cli::cmd_evolve(cfg).unwrap();
    let side = cli::cmd_report(&dir).unwrap();
    assert_eq!(side.generations, vec![0, 1]);
    for m in ["panel.json", "comparison.json", "diversity.json"] {
        assert!(side.missing.iter().any(|s| s.ends_with(m)), "{:?}", side.missing);
    }
    let rows = |name: &str| side.tables.iter().find(|t| t.file == name).unwrap().rows;
    // two rated generations x seven categories
    assert_eq!(rows(report::CATEGORY_ELO), 14);
    assert_eq!(rows(report::WORD_COUNTS), 70);
    assert_eq!(rows(report::GAP_DIFFERENCE), 0);
    let csv = std::fs::read_to_string(dir.join("reports").join(report::CATEGORY_ELO)).unwrap();
    assert_eq!(csv.lines().count(), 15);

    // Through the binary: success with a warning on stderr.
    let out = bin().arg("report").arg(&dir).output().unwrap();
    assert_eq!(out.status.code(), Some(exit::OK));
    assert!(String::from_utf8_lossy(&out.stderr).contains("partial report"));
}

#[test]
fn report_without_a_run_exits_missing_input() {
    let root = tempfile::tempdir().unwrap();
    let out = bin().arg("report").arg(root.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(exit::MISSING_INPUT));
    assert!(String::from_utf8_lossy(&out.stderr).contains("gen_000.json"));
}

#[test]
fn evaluate_staticgen_and_diversity_end_to_end() {
    let root = tempfile::tempdir().unwrap();
    let p = synthetic_config(
        root.path(),
        "persuasion",
        &RunSpec {
            generations: 2,
            test_size: 3,
            ..RunSpec::default()
        },
    );
    let t = synthetic_config(
        root.path(),
        "truth",
        &RunSpec {
            objective: "truth",
            generations: 2,
            test_size: 3,
            bonus: 0.5,
            ..RunSpec::default()
        },
    );
    let s = synthetic_config(
        root.path(),
        "staticgen",
        &RunSpec {
            generations: 2,
            ..RunSpec::default()
        },
    );
    let (pd, td, sd) = (p.experiment_dir.clone(), t.experiment_dir.clone(), s.experiment_dir.clone());
    cli::cmd_evolve(p).unwrap();
    cli::cmd_evolve(t).unwrap();

    let cmp = cli::cmd_evaluate(&pd, &td, EvaluateOptions::default()).unwrap();
    // 35 strategies and 35 teams, so both panels are full
    assert_eq!((cmp.n_a, cmp.n_b), (15, 15));
    assert!(cmp.bootstrap.ci_low <= cmp.bootstrap.mean_difference);
    assert!(cmp.bootstrap.mean_difference <= cmp.bootstrap.ci_high);
    assert!((cmp.bootstrap.mean_difference - (cmp.mean_gap_a - cmp.mean_gap_b)).abs() < 1e-12);
    let panel: ElitePanel = serde_json::from_str(&std::fs::read_to_string(RunLayout::new(&pd).panel()).unwrap()).unwrap();
    assert!(panel.entities.windows(2).all(|w| w[0].rating >= w[1].rating));
    assert!(RunLayout::new(&td).comparison().exists());

    // Lifetime count for 2 generations: 35 + 14 + 21.
    let out = cli::cmd_staticgen(s).unwrap();
    assert_eq!(out.pool_size, 70);
    assert!(out.state.population.strategies.iter().all(|x| x.id.starts_with("sg-") && x.persuasion_rating.is_some()));
    let pool: StaticGenPool =
        serde_json::from_str(&std::fs::read_to_string(RunLayout::new(&sd).staticgen_pool()).unwrap()).unwrap();
    assert!(pool.exemplars.values().all(|v| v.len() == 3));
    // Every generated strategy cites exactly its category's exemplars.
    for st in &pool.strategies {
        assert_eq!(&st.parent_ids, &pool.exemplars[&st.category]);
    }

    let recs = cli::cmd_diversity(&[pd.clone(), sd.clone()]).unwrap();
    assert_eq!(recs.len(), 2);
    assert_eq!(recs[0].texts, 70);
    assert_eq!(recs[1].texts, 70);
    assert!(recs.iter().all(|r| r.diversity > 0.0 && r.diversity < 1.0));

    let side = cli::cmd_report(&pd).unwrap();
    assert!(side.missing.is_empty(), "{:?}", side.missing);
    // Synthetic self-play accuracy is the same for every strategy, so the
    // persuasion correlation is undefined; truth teams mix two skills.
    assert!(side.elo_accuracy_pearson.is_none());
    assert!(cli::cmd_report(&td).unwrap().elo_accuracy_pearson.is_some());
    let gap = std::fs::read_to_string(pd.join("reports").join(report::GAP_DIFFERENCE)).unwrap();
    assert_eq!(gap.lines().count(), 2);

    let out = bin().arg("diversity").arg(&pd).arg(&sd).output().unwrap();
    assert_eq!(out.status.code(), Some(exit::OK));
    assert!(String::from_utf8_lossy(&out.stdout).contains("ratio"));
}

#[test]
fn staticgen_rejects_truth_objective() {
    let root = tempfile::tempdir().unwrap();
    let cfg = synthetic_config(
        root.path(),
        "sg",
        &RunSpec {
            objective: "truth",
            ..RunSpec::default()
        },
    );
    let dir = cfg.experiment_dir.clone();
    let err = cli::cmd_staticgen(cfg).unwrap_err();
    assert_eq!(err.exit_code(), exit::CONFIG);
    assert!(!dir.exists());
}

#[test]
fn validate_config_exit_codes() {
    let root = tempfile::tempdir().unwrap();
    synthetic_config(root.path(), "ok", &RunSpec::default());
    let out = bin().arg("validate-config").arg(root.path().join("ok.toml")).output().unwrap();
    assert_eq!(out.status.code(), Some(exit::OK));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["lifetime_strategies"], 70);
    assert_eq!(v["config_hash"].as_str().unwrap().len(), 64);
    assert!(!root.path().join("ok").exists());

    let bad = root.path().join("bad.toml");
    std::fs::write(
        &bad,
        "objective = \"truth\"\nexperiment_dir = \"x\"\nkill_fraction = 2.0\n[dataset]\ntrain_file = \"nope.jsonl\"\ntest_file = \"dev.jsonl\"\n[backend]\nkind = \"synthetic\"\n",
    )
    .unwrap();
    let out = bin().arg("validate-config").arg(&bad).output().unwrap();
    assert_eq!(out.status.code(), Some(exit::CONFIG));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("kill_fraction") && err.contains("nope.jsonl"), "{err}");
}

#[test]
fn http_backend_needs_endpoint() {
    let root = tempfile::tempdir().unwrap();
    common::write_quality(&root.path().join("t.jsonl"), 3, "t");
    let path = root.path().join("http.toml");
    std::fs::write(
        &path,
        "objective = \"persuasion\"\nexperiment_dir = \"x\"\n[dataset]\ntrain_file = \"t.jsonl\"\ntest_file = \"t.jsonl\"\n[backend]\nkind = \"http\"\nmodel = \"m\"\n",
    )
    .unwrap();
    let out = bin().arg("validate-config").arg(&path).env_remove("DEBATEQD_ENDPOINT").output().unwrap();
    assert_eq!(out.status.code(), Some(exit::CONFIG));
    let out = bin()
        .arg("validate-config")
        .arg(&path)
        .env("DEBATEQD_ENDPOINT", "http://127.0.0.1:9/v1")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(exit::OK));
    assert!(String::from_utf8_lossy(&out.stdout).contains("127.0.0.1:9"));
}
