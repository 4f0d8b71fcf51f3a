//! Evaluation statistics: elite panels and their generalization gaps,
//! bootstrap intervals for gap differences, embedding diversity, and the
//! Elo-accuracy correlation.

pub mod report;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::DebateQuestion;
use crate::debate::{judge_accuracy_selfplay, DebateConfig, DebateEnv, DebateError, Debater};
use crate::evolution::GenerationState;
use crate::exec::Execution;
use crate::gateway::{Gateway, GatewayError};
use crate::rating::Objective;
use crate::seed;
use crate::tournament::{run_truth_evaluation, MatchContext, Participant, Team, TournamentError};

pub const PANEL_SIZE: usize = 15;
pub const DEFAULT_ITERATIONS: usize = 100_000;
/// Bootstrap draws per RNG stream. Fixed so results do not depend on the
/// executor.
const CHUNK: usize = 10_000;

#[derive(Debug, thiserror::Error)]
pub enum AnalysisError {
    #[error("{0}")]
    Precondition(String),
    #[error("no rated generation in the run")]
    Unrated,
    #[error(transparent)]
    Debate(#[from] DebateError),
    #[error(transparent)]
    Tournament(#[from] TournamentError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EliteEntry {
    pub id: String,
    pub category: String,
    pub rating: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElitePanel {
    pub objective: Objective,
    pub generation: usize,
    pub requested: usize,
    /// The population was smaller than `requested`.
    pub shortfall: bool,
    pub entities: Vec<EliteEntry>,
}

impl ElitePanel {
    pub fn gaps(&self) -> Vec<f64> {
        self.entities.iter().map(|e| e.gap).collect()
    }

    pub fn mean_gap(&self) -> f64 {
        mean(&self.gaps())
    }
}

/// Last generation whose population carries ratings.
pub fn final_rated(states: &[GenerationState]) -> Result<&GenerationState, AnalysisError> {
    states
        .iter()
        .rev()
        .find(|s| s.population.candidates().iter().all(|c| c.rating.is_some()) && !s.population.is_empty())
        .ok_or(AnalysisError::Unrated)
}

/// `(id, category, rating)` best first; ties by id.
pub fn top_by_rating(state: &GenerationState, n: usize) -> Vec<(String, String, f64)> {
    let mut c: Vec<(String, String, f64)> = state
        .population
        .candidates()
        .into_iter()
        .map(|c| (c.id, c.category, c.rating.unwrap_or(f64::NEG_INFINITY)))
        .collect();
    c.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
    c.truncate(n);
    c
}

pub struct PanelEnv<'a> {
    pub env: DebateEnv<'a>,
    pub train: &'a [DebateQuestion],
    pub test: &'a [DebateQuestion],
    pub debate: DebateConfig,
    pub seed: u64,
    pub exec: Execution,
}

fn accuracy(
    p: &PanelEnv<'_>,
    state: &GenerationState,
    id: &str,
    questions: &[DebateQuestion],
    label: &str,
) -> Result<f64, AnalysisError> {
    let s = seed::derive(p.seed, &format!("panel:{label}"));
    match state.population.objective {
        Objective::Persuasion => {
            let st = state
                .population
                .strategies
                .iter()
                .find(|x| x.id == id)
                .expect("panel member in population");
            let d = Debater {
                id: &st.id,
                strategy: &st.text,
            };
            Ok(judge_accuracy_selfplay(&p.env, d, questions, &p.debate, s, p.exec)?.0)
        }
        Objective::Truth => {
            let t = state
                .population
                .teams
                .iter()
                .find(|x| x.id == id)
                .expect("panel member in population");
            let team = Team {
                id: t.id.clone(),
                members: [
                    Participant::new(&t.member1.id, &t.member1.text),
                    Participant::new(&t.member2.id, &t.member2.text),
                ],
            };
            let ctx = MatchContext {
                env: DebateEnv {
                    gateway: p.env.gateway,
                    templates: p.env.templates,
                },
                questions,
                debate: p.debate,
                seed: s,
                exec: p.exec,
            };
            let (records, _) = run_truth_evaluation(&ctx, &[team])?;
            Ok(mean(&records.iter().map(|r| r.aggregate_score_a).collect::<Vec<_>>()))
        }
    }
}

/// Top-`size` entities of the last rated generation with soft self-play
/// (persuasion) or team (truth) accuracy on both splits.
pub fn build_elite_panel(
    p: &PanelEnv<'_>,
    states: &[GenerationState],
    size: usize,
) -> Result<ElitePanel, AnalysisError> {
    if p.train.is_empty() || p.test.is_empty() {
        return Err(AnalysisError::Precondition("panel needs train and test questions".into()));
    }
    let state = final_rated(states)?;
    let top = top_by_rating(state, size);
    let entities = p.exec.try_map(&top, |(id, category, rating)| {
        let train_accuracy = accuracy(p, state, id, p.train, "train")?;
        let test_accuracy = accuracy(p, state, id, p.test, "test")?;
        Ok::<_, AnalysisError>(EliteEntry {
            id: id.clone(),
            category: category.clone(),
            rating: *rating,
            train_accuracy,
            test_accuracy,
            gap: train_accuracy - test_accuracy,
        })
    })?;
    if entities.len() < size {
        tracing::warn!(available = entities.len(), size, "population smaller than elite panel");
    }
    Ok(ElitePanel {
        objective: state.population.objective,
        generation: state.generation,
        requested: size,
        shortfall: entities.len() < size,
        entities,
    })
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resampling {
    /// Each list resampled on its own.
    #[default]
    Independent,
    /// Index-aligned pairs resampled together; lists must match in length.
    Paired,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub iterations: usize,
    pub mean_difference: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub rng_seed: u64,
    pub resampling: Resampling,
}

/// Linear-interpolated percentile of sorted data (`q` in [0, 100]).
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
    }
}

fn resample_mean(rng: &mut ChaCha8Rng, xs: &[f64]) -> f64 {
    let n = xs.len();
    (0..n).map(|_| xs[rng.random_range(0..n)]).sum::<f64>() / n as f64
}

/// Percentile bootstrap of `mean(a) - mean(b)` with a 95% interval.
pub fn bootstrap_gap_difference(
    a: &[f64],
    b: &[f64],
    iterations: usize,
    rng_seed: u64,
    resampling: Resampling,
    exec: Execution,
) -> Result<BootstrapResult, AnalysisError> {
    if a.is_empty() || b.is_empty() {
        return Err(AnalysisError::Precondition("bootstrap needs two nonempty lists".into()));
    }
    if iterations == 0 {
        return Err(AnalysisError::Precondition("bootstrap needs at least one iteration".into()));
    }
    if resampling == Resampling::Paired && a.len() != b.len() {
        return Err(AnalysisError::Precondition(format!(
            "paired bootstrap needs equal lengths, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let chunks = iterations.div_ceil(CHUNK);
    let parts = exec.map_range(chunks, |c| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(rng_seed, &format!("bootstrap:{c}")));
        let len = CHUNK.min(iterations - c * CHUNK);
        (0..len)
            .map(|_| match resampling {
                Resampling::Independent => resample_mean(&mut rng, a) - resample_mean(&mut rng, b),
                Resampling::Paired => {
                    let n = a.len();
                    let (mut sa, mut sb) = (0.0, 0.0);
                    for _ in 0..n {
                        let i = rng.random_range(0..n);
                        sa += a[i];
                        sb += b[i];
                    }
                    sa / n as f64 - sb / n as f64
                }
            })
            .collect::<Vec<f64>>()
    });
    let mut diffs: Vec<f64> = parts.into_iter().flatten().collect();
    diffs.sort_by(f64::total_cmp);
    Ok(BootstrapResult {
        iterations,
        mean_difference: mean(a) - mean(b),
        ci_low: percentile(&diffs, 2.5),
        ci_high: percentile(&diffs, 97.5),
        rng_seed,
        resampling,
    })
}

/// Mean over unordered pairs of `1 - cos(u, v)`.
pub fn pairwise_cosine_distance(vectors: &[Vec<f64>]) -> Result<f64, AnalysisError> {
    if vectors.len() < 2 {
        return Err(AnalysisError::Precondition("diversity needs at least 2 texts".into()));
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let norms: Vec<f64> = vectors.iter().map(|v| norm(v)).collect();
    if norms.contains(&0.0) {
        return Err(AnalysisError::Precondition("zero embedding vector".into()));
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..vectors.len() {
        for j in i + 1..vectors.len() {
            let dot: f64 = vectors[i].iter().zip(&vectors[j]).map(|(x, y)| x * y).sum();
            total += 1.0 - dot / (norms[i] * norms[j]);
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

pub fn embedding_diversity(texts: &[String], gateway: &Gateway) -> Result<f64, AnalysisError> {
    if texts.len() < 2 {
        return Err(AnalysisError::Precondition("diversity needs at least 2 texts".into()));
    }
    pairwise_cosine_distance(&gateway.embed(texts)?)
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, AnalysisError> {
    if x.len() != y.len() {
        return Err(AnalysisError::Precondition("correlation inputs differ in length".into()));
    }
    if x.len() < 3 {
        return Err(AnalysisError::Precondition("correlation needs at least 3 points".into()));
    }
    let (mx, my) = (mean(x), mean(y));
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    if sxx == 0.0 || syy == 0.0 {
        return Err(AnalysisError::Precondition("zero variance in correlation input".into()));
    }
    Ok(sxy / (sxx.sqrt() * syy.sqrt()))
}

/// Pearson r between rating and test accuracy over a panel.
pub fn elo_accuracy_correlation(panel: &ElitePanel) -> Result<f64, AnalysisError> {
    let r: Vec<f64> = panel.entities.iter().map(|e| e.rating).collect();
    let a: Vec<f64> = panel.entities.iter().map(|e| e.test_accuracy).collect();
    pearson(&r, &a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Split;
    use crate::evolution::{evolve, EvolutionSettings, EvolveEnv, SeedBank};
    use crate::gateway::SyntheticAgentModel;
    use crate::layout::RunLayout;
    use crate::template::TemplateSet;

    #[test]
    fn percentile_interpolates_like_numpy() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(percentile(&xs, 0.0), 1.0);
        assert_eq!(percentile(&xs, 100.0), 4.0);
        assert!((percentile(&xs, 50.0) - 2.5).abs() < 1e-12);
        // numpy.percentile([1,2,3,4], 2.5) == 1.075
        assert!((percentile(&xs, 2.5) - 1.075).abs() < 1e-12);
    }

    #[test]
    fn degenerate_bootstraps_have_zero_width() {
        let r = bootstrap_gap_difference(&[0.1; 15], &[0.1; 15], 10_000, 3, Resampling::Independent, Execution::Sequential)
            .unwrap();
        assert_eq!((r.mean_difference, r.ci_low, r.ci_high), (0.0, 0.0, 0.0));
        let r = bootstrap_gap_difference(&[1.0; 3], &[0.0; 3], 10_000, 3, Resampling::Independent, Execution::Parallel)
            .unwrap();
        assert_eq!((r.mean_difference, r.ci_low, r.ci_high), (1.0, 1.0, 1.0));
    }

    #[test]
    fn bootstrap_is_executor_independent() {
        let a: Vec<f64> = (0..15).map(|i| (i as f64 * 0.37).sin() * 0.1).collect();
        let b: Vec<f64> = (0..15).map(|i| (i as f64 * 0.91).cos() * 0.08).collect();
        for mode in [Resampling::Independent, Resampling::Paired] {
            let s = bootstrap_gap_difference(&a, &b, 25_000, 9, mode, Execution::Sequential).unwrap();
            let p = bootstrap_gap_difference(&a, &b, 25_000, 9, mode, Execution::Parallel).unwrap();
            assert_eq!(s, p);
            assert!(s.ci_low <= s.ci_high);
        }
    }

    #[test]
    fn bootstrap_rejects_bad_input() {
        let e = Execution::Sequential;
        assert!(bootstrap_gap_difference(&[], &[1.0], 10, 0, Resampling::Independent, e).is_err());
        assert!(bootstrap_gap_difference(&[1.0], &[1.0, 2.0], 10, 0, Resampling::Paired, e).is_err());
    }

    #[test]
    fn ci_width_stable_between_10k_and_100k() {
        let a: Vec<f64> = (0..15).map(|i| 0.05 + 0.01 * ((i * 7) % 11) as f64).collect();
        let b: Vec<f64> = (0..15).map(|i| 0.02 + 0.012 * ((i * 5) % 13) as f64).collect();
        let w = |n| {
            let r = bootstrap_gap_difference(&a, &b, n, 1, Resampling::Independent, Execution::Parallel).unwrap();
            r.ci_high - r.ci_low
        };
        let (small, big) = (w(10_000), w(100_000));
        assert!(((small - big) / big).abs() < 0.1, "{small} vs {big}");
    }

    #[test]
    fn cosine_fixtures() {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let d = pairwise_cosine_distance(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![s, s]]).unwrap();
        let want = (1.0 + 2.0 * (1.0 - s)) / 3.0;
        assert!((d - want).abs() < 1e-12);
        assert!((d - 0.5286).abs() < 1e-4);
        assert_eq!(pairwise_cosine_distance(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(), 1.0);
        assert!(pairwise_cosine_distance(&[vec![1.0]]).is_err());
    }

    #[test]
    fn identical_texts_have_no_diversity() {
        let gw = Gateway::synthetic(SyntheticAgentModel::new(0));
        let d = embedding_diversity(&["same words here".into(), "same words here".into()], &gw).unwrap();
        assert!(d.abs() < 1e-12);
        let d = embedding_diversity(&["alpha".into(), "beta gamma".into(), "delta".into()], &gw).unwrap();
        assert!((0.0..=2.0).contains(&d));
    }

    #[test]
    fn pearson_fixtures() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert!((pearson(&x, &[2.0, 4.0, 6.0, 8.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&x, &[8.0, 6.0, 4.0, 2.0]).unwrap() + 1.0).abs() < 1e-12);
        // x = 1..5, y = [2, 1, 4, 3, 5]: sxy = 8, sxx = syy = 10 -> r = 0.8
        let r = pearson(&[1.0, 2.0, 3.0, 4.0, 5.0], &[2.0, 1.0, 4.0, 3.0, 5.0]).unwrap();
        assert!((r - 0.8).abs() < 1e-12);
        let scaled = pearson(&[10.0, 20.0, 30.0, 40.0, 50.0], &[-3.0, -5.0, 1.0, -1.0, 3.0]).unwrap();
        assert!((scaled - 0.8).abs() < 1e-12);
        assert!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
        assert!(pearson(&[1.0, 2.0], &[1.0, 2.0]).is_err());
    }

    fn q(i: usize, split: Split) -> DebateQuestion {
        DebateQuestion {
            id: format!("{split:?}{i}"),
            article_id: format!("a{i}"),
            article_text: "The bell rang twice.".into(),
            question_text: "How often did the bell ring?".into(),
            correct_answer: "Twice".into(),
            incorrect_answer: "Once".into(),
            split,
            difficulty_rating: 400.0,
        }
    }

    fn small_run(dir: &std::path::Path, objective: Objective) -> (Gateway, Vec<GenerationState>) {
        let gw = Gateway::synthetic(SyntheticAgentModel::new(1));
        let bank = SeedBank::builtin();
        let t = TemplateSet::default();
        let train = [q(0, Split::Train)];
        let settings = EvolutionSettings {
            objective,
            generations: 1,
            ..Default::default()
        };
        let layout = RunLayout::new(dir);
        let env = EvolveEnv {
            gateway: &gw,
            templates: &t,
            bank: &bank,
            train: &train,
            settings: &settings,
            exec: Execution::Parallel,
            layout: &layout,
            config_hash: "h",
        };
        let states = evolve(&env).unwrap().states;
        (gw, states)
    }

    #[test]
    fn symmetric_world_gives_zero_gaps() {
        for objective in [Objective::Persuasion, Objective::Truth] {
            let dir = tempfile::tempdir().unwrap();
            let (gw, states) = small_run(dir.path(), objective);
            let t = TemplateSet::default();
            let train = [q(0, Split::Train), q(1, Split::Train)];
            let test = [q(0, Split::Test)];
            let p = PanelEnv {
                env: DebateEnv {
                    gateway: &gw,
                    templates: &t,
                },
                train: &train,
                test: &test,
                debate: DebateConfig::default(),
                seed: 4,
                exec: Execution::Parallel,
            };
            let panel = build_elite_panel(&p, &states, PANEL_SIZE).unwrap();
            assert_eq!(panel.entities.len(), 15);
            assert!(!panel.shortfall);
            for e in &panel.entities {
                assert!((e.train_accuracy - 0.5).abs() < 1e-12);
                assert!((e.test_accuracy - 0.5).abs() < 1e-12);
                assert_eq!(e.gap, e.train_accuracy - e.test_accuracy);
            }
            let ratings: Vec<f64> = panel.entities.iter().map(|e| e.rating).collect();
            assert!(ratings.windows(2).all(|w| w[0] >= w[1]));
            let small = build_elite_panel(&p, &states, 40).unwrap();
            assert_eq!(small.entities.len(), 35);
            assert!(small.shortfall);
        }
    }

    #[test]
    fn unrated_run_has_no_panel() {
        let dir = tempfile::tempdir().unwrap();
        let gw = Gateway::synthetic(SyntheticAgentModel::new(1));
        let bank = SeedBank::builtin();
        let t = TemplateSet::default();
        let settings = EvolutionSettings {
            generations: 0,
            ..Default::default()
        };
        let layout = RunLayout::new(dir.path());
        let env = EvolveEnv {
            gateway: &gw,
            templates: &t,
            bank: &bank,
            train: &[],
            settings: &settings,
            exec: Execution::Sequential,
            layout: &layout,
            config_hash: "h",
        };
        let states = evolve(&env).unwrap().states;
        assert!(matches!(final_rated(&states), Err(AnalysisError::Unrated)));
    }
}
