//! The generational quality-diversity loop.
//!
//! The population is partitioned into fixed categories. Each generation the
//! population plays its objective's tournament, ratings are fitted, each
//! category drops its weakest members (its strongest, for categories marked
//! `truncate_top`) and the survivors inspire replacements through the
//! mutator. StaticGen is the non-evolving baseline: one batch of
//! strategies generated from fixed few-shot exemplars.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::DebateQuestion;
use crate::debate::{truncate_words, DebateConfig, DebateEnv};
use crate::exec::Execution;
use crate::gateway::synthetic::{HINT_CATEGORY, HINT_CATEGORY_2, HINT_INSPIRATIONS, HINT_INSPIRATIONS_1, HINT_INSPIRATIONS_2};
use crate::gateway::{CompletionRequest, Gateway, GatewayError};
use crate::layout::{write_atomic, RunLayout};
use crate::rating::{fit, EloModel, FitConfig, Objective, Observations, PairObservation, RatingError, TeamObservation};
use crate::seed;
use crate::template::{TemplateError, TemplateSet};
use crate::tournament::{
    append_transcripts, run_swiss_tournament, run_truth_evaluation, MatchContext, MatchRecord, Participant, Team,
    TournamentError, TournamentFiles,
};

pub const BUILTIN_SEEDS: &str = include_str!("../data/seeds.toml");
pub const MAX_PROMPT_WORDS: usize = 200;
pub const MUTATION_RETRIES: usize = 3;
pub const STATE_FORMAT: u32 = 1;
pub const EXEMPLARS_PER_CATEGORY: usize = 3;

#[derive(Debug, thiserror::Error)]
pub enum EvolutionError {
    #[error("seed file {path}: {reason}")]
    SeedFile { path: String, reason: String },
    #[error("{0} has no rating")]
    Unrated(String),
    #[error("category `{0}` has no survivors to mutate from")]
    NoSurvivors(String),
    #[error("unknown category `{0}`")]
    UnknownCategory(String),
    #[error("mutator output for `{category}` unparseable after {attempts} attempts: {raw}")]
    MutatorOutput {
        category: String,
        attempts: usize,
        raw: String,
    },
    #[error("mutator call for `{category}`: {source}")]
    Gateway {
        category: String,
        #[source]
        source: GatewayError,
    },
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Tournament(#[from] TournamentError),
    #[error(transparent)]
    Rating(#[from] RatingError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("state {path}: {reason}")]
    State { path: PathBuf, reason: String },
    #[error("no training questions")]
    NoQuestions,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvolutionError + '_ {
    move |source| EvolutionError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionRule {
    /// Eliminate the lowest rated.
    TruncateBottom,
    /// Eliminate the highest rated.
    TruncateTop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategorySpec {
    pub name: String,
    pub description: String,
    pub selection: SelectionRule,
    pub prompts: Vec<String>,
}

impl CategorySpec {
    pub fn slug(&self) -> String {
        slug(&self.name)
    }
}

pub fn slug(name: &str) -> String {
    name.to_lowercase().split_whitespace().collect::<Vec<_>>().join("-")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedBank {
    pub version: u32,
    #[serde(rename = "category")]
    pub categories: Vec<CategorySpec>,
}

impl SeedBank {
    pub fn builtin() -> SeedBank {
        SeedBank::parse(BUILTIN_SEEDS, "<builtin>").expect("builtin seed file is valid")
    }

    pub fn load(path: &Path) -> Result<SeedBank, EvolutionError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        SeedBank::parse(&text, &path.display().to_string())
    }

    pub fn parse(text: &str, origin: &str) -> Result<SeedBank, EvolutionError> {
        let bad = |reason: String| EvolutionError::SeedFile {
            path: origin.to_string(),
            reason,
        };
        let bank: SeedBank = toml::from_str(text).map_err(|e| bad(e.to_string()))?;
        if bank.categories.is_empty() {
            return Err(bad("no categories".into()));
        }
        let mut names = BTreeSet::new();
        for c in &bank.categories {
            if !names.insert(c.slug()) {
                return Err(bad(format!("duplicate category `{}`", c.name)));
            }
            if c.prompts.is_empty() || c.prompts.iter().any(|p| p.trim().is_empty()) {
                return Err(bad(format!("category `{}` has an empty prompt list or prompt", c.name)));
            }
        }
        Ok(bank)
    }

    pub fn category(&self, name: &str) -> Result<&CategorySpec, EvolutionError> {
        self.categories
            .iter()
            .find(|c| c.name == name)
            .ok_or_else(|| EvolutionError::UnknownCategory(name.to_string()))
    }

    pub fn rules(&self) -> BTreeMap<String, SelectionRule> {
        self.categories.iter().map(|c| (c.name.clone(), c.selection)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyPrompt {
    pub id: String,
    pub category: String,
    pub text: String,
    pub generation_born: usize,
    pub parent_ids: Vec<String>,
    pub persuasion_rating: Option<f64>,
    pub alive: bool,
    /// Mutator output exceeded the word limit and was cut.
    #[serde(default)]
    pub truncated: bool,
}

impl StrategyPrompt {
    fn participant(&self) -> Participant {
        Participant::new(&self.id, &self.text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DebateTeam {
    pub id: String,
    pub member1: StrategyPrompt,
    pub member2: StrategyPrompt,
    pub truth_rating: Option<f64>,
}

impl DebateTeam {
    /// Selection groups teams by their first member's category.
    pub fn category(&self) -> &str {
        &self.member1.category
    }

    fn team(&self) -> Team {
        Team {
            id: self.id.clone(),
            members: [self.member1.participant(), self.member2.participant()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationState {
    pub generation: usize,
    pub objective: Objective,
    #[serde(default)]
    pub strategies: Vec<StrategyPrompt>,
    #[serde(default)]
    pub teams: Vec<DebateTeam>,
}

impl PopulationState {
    pub fn len(&self) -> usize {
        match self.objective {
            Objective::Persuasion => self.strategies.len(),
            Objective::Truth => self.teams.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn census(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for c in self.categories() {
            *out.entry(c.to_string()).or_insert(0) += 1;
        }
        out
    }

    fn categories(&self) -> Vec<&str> {
        match self.objective {
            Objective::Persuasion => self.strategies.iter().map(|s| s.category.as_str()).collect(),
            Objective::Truth => self.teams.iter().map(|t| t.category()).collect(),
        }
    }

    /// Entity ids with category and rating, for selection.
    pub fn candidates(&self) -> Vec<Candidate> {
        match self.objective {
            Objective::Persuasion => self
                .strategies
                .iter()
                .map(|s| Candidate {
                    id: s.id.clone(),
                    category: s.category.clone(),
                    rating: s.persuasion_rating,
                })
                .collect(),
            Objective::Truth => self
                .teams
                .iter()
                .map(|t| Candidate {
                    id: t.id.clone(),
                    category: t.category().to_string(),
                    rating: t.truth_rating,
                })
                .collect(),
        }
    }

    /// Every strategy text in the population (both members of each team).
    pub fn texts(&self) -> Vec<(&str, &str)> {
        match self.objective {
            Objective::Persuasion => self.strategies.iter().map(|s| (s.id.as_str(), s.text.as_str())).collect(),
            Objective::Truth => self
                .teams
                .iter()
                .flat_map(|t| [&t.member1, &t.member2])
                .map(|s| (s.id.as_str(), s.text.as_str()))
                .collect(),
        }
    }

    fn apply_ratings(&mut self, ratings: &BTreeMap<String, f64>) {
        for s in &mut self.strategies {
            s.persuasion_rating = ratings.get(&s.id).copied();
        }
        for t in &mut self.teams {
            t.truth_rating = ratings.get(&t.id).copied();
        }
    }
}

fn seed_strategy(cat: &CategorySpec, j: usize, text: &str, suffix: &str) -> StrategyPrompt {
    StrategyPrompt {
        id: format!("g00-{}-{j}{suffix}", cat.slug()),
        category: cat.name.clone(),
        text: text.to_string(),
        generation_born: 0,
        parent_ids: Vec::new(),
        persuasion_rating: None,
        alive: true,
        truncated: false,
    }
}

/// Persuasion: every seed prompt is one strategy. Truth: team `(c, j)`
/// pairs seed `j` of category `c` with seed `j` of category `c + 1`
/// (cyclically), giving one team per seed prompt.
pub fn seed_population(bank: &SeedBank, objective: Objective) -> PopulationState {
    let cats = &bank.categories;
    let mut pop = PopulationState {
        generation: 0,
        objective,
        strategies: Vec::new(),
        teams: Vec::new(),
    };
    for (c, cat) in cats.iter().enumerate() {
        for (j, text) in cat.prompts.iter().enumerate() {
            match objective {
                Objective::Persuasion => pop.strategies.push(seed_strategy(cat, j, text, "")),
                Objective::Truth => {
                    let partner = &cats[(c + 1) % cats.len()];
                    let ptext = &partner.prompts[j % partner.prompts.len()];
                    pop.teams.push(DebateTeam {
                        id: format!("g00-{}-{j}", cat.slug()),
                        member1: seed_strategy(cat, j, text, "/1"),
                        member2: seed_strategy(partner, j, ptext, "/2"),
                        truth_rating: None,
                    });
                }
            }
        }
    }
    pop
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: String,
    pub category: String,
    pub rating: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SelectionOutcome {
    /// Per category, best first (under that category's rule).
    pub survivors: BTreeMap<String, Vec<String>>,
    pub eliminated: BTreeMap<String, Vec<String>>,
}

/// Members eliminated from a category of `size` in generation `g`:
/// `floor(size * f)` in even generations and `ceil(size * f)` in odd ones,
/// keeping at least one survivor. For five members and `f = 0.5` this
/// alternates 2 and 3.
pub fn kill_count(size: usize, kill_fraction: f64, g: usize) -> usize {
    let exact = size as f64 * kill_fraction;
    let k = if g.is_multiple_of(2) { exact.floor() } else { exact.ceil() } as usize;
    k.min(size.saturating_sub(1))
}

/// Per-category truncation selection. Ties at the cut eliminate the larger id.
pub fn select(
    candidates: &[Candidate],
    rules: &BTreeMap<String, SelectionRule>,
    kill_fraction: f64,
    generation: usize,
) -> Result<SelectionOutcome, EvolutionError> {
    let mut groups: BTreeMap<&str, Vec<(&str, f64)>> = BTreeMap::new();
    for c in candidates {
        let r = c.rating.ok_or_else(|| EvolutionError::Unrated(c.id.clone()))?;
        groups.entry(&c.category).or_default().push((&c.id, r));
    }
    let mut out = SelectionOutcome::default();
    for (cat, mut members) in groups {
        let rule = *rules
            .get(cat)
            .ok_or_else(|| EvolutionError::UnknownCategory(cat.to_string()))?;
        // Order from "keep first" to "eliminate first"; ids ascending among ties.
        members.sort_by(|(ia, ra), (ib, rb)| {
            let by_rating = match rule {
                SelectionRule::TruncateBottom => rb.total_cmp(ra),
                SelectionRule::TruncateTop => ra.total_cmp(rb),
            };
            by_rating.then(ia.cmp(ib))
        });
        let k = kill_count(members.len(), kill_fraction, generation);
        let cut = members.len() - k;
        out.survivors
            .insert(cat.to_string(), members[..cut].iter().map(|(id, _)| id.to_string()).collect());
        out.eliminated
            .insert(cat.to_string(), members[cut..].iter().map(|(id, _)| id.to_string()).collect());
    }
    Ok(out)
}

/// Pull string fields out of a mutator answer. Accepts surrounding prose or
/// code fences around the JSON object.
pub fn parse_mutator_answer(text: &str, keys: &[&str]) -> Option<Vec<String>> {
    let value: serde_json::Value = serde_json::from_str(text.trim()).ok().or_else(|| {
        let start = text.find('{')?;
        let end = text.rfind('}')?;
        (start < end).then(|| serde_json::from_str(&text[start..=end]).ok()).flatten()
    })?;
    keys.iter()
        .map(|k| {
            value
                .get(*k)
                .and_then(|v| v.as_str())
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(str::to_string)
        })
        .collect()
}

fn numbered(texts: &[&str]) -> String {
    texts
        .iter()
        .enumerate()
        .map(|(i, t)| format!("{}. {}", i + 1, t))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Issue one mutator request, retrying on unparseable output. Retries use
/// a fresh seed so a cached bad answer is not replayed.
fn mutator_call(
    gateway: &Gateway,
    prompt: &str,
    hints: &[(&str, String)],
    keys: &[&str],
    category: &str,
    seed_base: u64,
) -> Result<Vec<String>, EvolutionError> {
    let mut last = String::new();
    for attempt in 0..=MUTATION_RETRIES {
        let mut req = CompletionRequest::mutator(prompt.to_string(), seed::derive(seed_base, &format!("attempt{attempt}")));
        for (k, v) in hints {
            req = req.with_hint(k, v.clone());
        }
        let resp = gateway.complete(&req).map_err(|source| EvolutionError::Gateway {
            category: category.to_string(),
            source,
        })?;
        if let Some(v) = parse_mutator_answer(&resp.text, keys) {
            return Ok(v);
        }
        tracing::warn!(category, attempt, "mutator answer missing required keys");
        last = resp.text;
    }
    Err(EvolutionError::MutatorOutput {
        category: category.to_string(),
        attempts: MUTATION_RETRIES + 1,
        raw: last,
    })
}

fn child(id: String, category: &str, text: &str, born: usize, parents: Vec<String>) -> StrategyPrompt {
    let (text, truncated) = truncate_words(text, MAX_PROMPT_WORDS);
    if truncated {
        tracing::warn!(%id, "mutated prompt exceeded {MAX_PROMPT_WORDS} words; truncated");
    }
    StrategyPrompt {
        id,
        category: category.to_string(),
        text,
        generation_born: born,
        parent_ids: parents,
        persuasion_rating: None,
        alive: true,
        truncated,
    }
}

/// Shared inputs for mutation calls.
pub struct Mutator<'a> {
    pub gateway: &'a Gateway,
    pub templates: &'a TemplateSet,
    pub bank: &'a SeedBank,
    pub exec: Execution,
}

impl Mutator<'_> {
    fn persuasion_request(
        &self,
        cat: &CategorySpec,
        inspirations: &[&StrategyPrompt],
        seed_base: u64,
    ) -> Result<String, EvolutionError> {
        let texts: Vec<&str> = inspirations.iter().map(|s| s.text.as_str()).collect();
        let prompt = self.templates.persuasion_mutator.render(&[
            ("cat", &cat.name),
            ("category_description", &cat.description),
            ("inspiration_prompts", &numbered(&texts)),
        ])?;
        let hints = [
            (HINT_CATEGORY, cat.name.clone()),
            (HINT_INSPIRATIONS, serde_json::to_string(&texts).expect("strings serialize")),
        ];
        let mut out = mutator_call(self.gateway, &prompt, &hints, &["new_debater_prompt"], &cat.name, seed_base)?;
        Ok(out.remove(0))
    }

    /// `count` children for one category, each inspired by all `survivors`.
    pub fn mutate_persuasion(
        &self,
        category: &str,
        survivors: &[&StrategyPrompt],
        count: usize,
        born: usize,
        seed_root: u64,
    ) -> Result<Vec<StrategyPrompt>, EvolutionError> {
        let cat = self.bank.category(category)?;
        if survivors.is_empty() {
            return Err(EvolutionError::NoSurvivors(category.to_string()));
        }
        let parents: Vec<String> = survivors.iter().map(|s| s.id.clone()).collect();
        let idx: Vec<usize> = (0..count).collect();
        self.exec.try_map(&idx, |&i| {
            let s = seed::derive(seed_root, &format!("mutate:{}:{i}", cat.slug()));
            let text = self.persuasion_request(cat, survivors, s)?;
            Ok(child(format!("g{born:02}-{}-{i}", cat.slug()), &cat.name, &text, born, parents.clone()))
        })
    }

    /// `count` new teams for the category group of `survivors` (teams whose
    /// first member is in `category`).
    pub fn mutate_truth(
        &self,
        category: &str,
        survivors: &[&DebateTeam],
        count: usize,
        born: usize,
        seed_root: u64,
    ) -> Result<Vec<DebateTeam>, EvolutionError> {
        let cat1 = self.bank.category(category)?;
        let first = survivors
            .first()
            .ok_or_else(|| EvolutionError::NoSurvivors(category.to_string()))?;
        let cat2 = self.bank.category(&first.member2.category)?;
        let t1: Vec<&str> = survivors.iter().map(|t| t.member1.text.as_str()).collect();
        let t2: Vec<&str> = survivors.iter().map(|t| t.member2.text.as_str()).collect();
        let p1: Vec<String> = survivors.iter().map(|t| t.member1.id.clone()).collect();
        let p2: Vec<String> = survivors.iter().map(|t| t.member2.id.clone()).collect();
        let prompt = self.templates.truth_mutator.render(&[
            ("cat1", &cat1.name),
            ("cat2", &cat2.name),
            ("inspiration_prompt1", &numbered(&t1)),
            ("inspiration_prompt2", &numbered(&t2)),
        ])?;
        let hints = [
            (HINT_CATEGORY, cat1.name.clone()),
            (HINT_CATEGORY_2, cat2.name.clone()),
            (HINT_INSPIRATIONS_1, serde_json::to_string(&t1).expect("strings serialize")),
            (HINT_INSPIRATIONS_2, serde_json::to_string(&t2).expect("strings serialize")),
        ];
        let idx: Vec<usize> = (0..count).collect();
        self.exec.try_map(&idx, |&i| {
            let s = seed::derive(seed_root, &format!("mutate-team:{}:{i}", cat1.slug()));
            let out = mutator_call(
                self.gateway,
                &prompt,
                &hints,
                &["new_debater_1_prompt", "new_debater_2_prompt"],
                &cat1.name,
                s,
            )?;
            let id = format!("g{born:02}-{}-{i}", cat1.slug());
            Ok(DebateTeam {
                member1: child(format!("{id}/1"), &cat1.name, &out[0], born, p1.clone()),
                member2: child(format!("{id}/2"), &cat2.name, &out[1], born, p2.clone()),
                id,
                truth_rating: None,
            })
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvolutionSettings {
    pub objective: Objective,
    pub generations: usize,
    pub kill_fraction: f64,
    pub master_seed: u64,
    pub debate: DebateConfig,
    pub fit: FitConfig,
}

impl Default for EvolutionSettings {
    fn default() -> Self {
        EvolutionSettings {
            objective: Objective::Persuasion,
            generations: 20,
            kill_fraction: 0.5,
            master_seed: 0,
            debate: DebateConfig::default(),
            fit: FitConfig::default(),
        }
    }
}

/// Everything recorded about one generation. The last generation of a run
/// is rated but not selected, so `selection` and `next_population` are empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationState {
    pub format: u32,
    pub code_version: String,
    pub config_hash: String,
    pub generation: usize,
    /// Rated population (ratings mean-anchored to 400).
    pub population: PopulationState,
    pub matches: usize,
    pub debates: usize,
    pub fit_epochs: usize,
    pub fit_converged: bool,
    pub fit_cost: f64,
    pub kill_count: Option<usize>,
    pub selection: Option<SelectionOutcome>,
    pub children: Vec<String>,
    pub next_population: Option<PopulationState>,
}

impl GenerationState {
    pub fn read(path: &Path) -> Result<GenerationState, EvolutionError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| EvolutionError::State {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<(), EvolutionError> {
        let text = serde_json::to_string_pretty(self).expect("state serializes") + "\n";
        write_atomic(path, text.as_bytes()).map_err(io_err(path))
    }
}

pub struct EvolveEnv<'a> {
    pub gateway: &'a Gateway,
    pub templates: &'a TemplateSet,
    pub bank: &'a SeedBank,
    pub train: &'a [DebateQuestion],
    pub settings: &'a EvolutionSettings,
    pub exec: Execution,
    pub layout: &'a RunLayout,
    pub config_hash: &'a str,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvolutionSummary {
    pub states: Vec<GenerationState>,
    /// Generations computed in this call (the rest were loaded).
    pub computed: Vec<usize>,
}

impl EvolutionSummary {
    pub fn final_state(&self) -> Option<&GenerationState> {
        self.states.last()
    }
}

/// Ids of every strategy (persuasion) or team (truth) that ever existed.
pub fn lifetime_ids(states: &[GenerationState]) -> BTreeSet<String> {
    let mut ids = BTreeSet::new();
    for s in states {
        for c in s.population.candidates() {
            ids.insert(c.id);
        }
        if let Some(next) = &s.next_population {
            for c in next.candidates() {
                ids.insert(c.id);
            }
        }
    }
    ids
}

/// Every distinct strategy text that ever existed, in id order.
pub fn lifetime_texts(states: &[GenerationState]) -> Vec<String> {
    let mut by_id: BTreeMap<String, String> = BTreeMap::new();
    for s in states {
        let pops = std::iter::once(&s.population).chain(s.next_population.as_ref());
        for p in pops {
            for (id, text) in p.texts() {
                by_id.entry(id.to_string()).or_insert_with(|| text.to_string());
            }
        }
    }
    by_id.into_values().collect()
}

/// Tournament plus fit for one population. Returns the rated population,
/// match records, and the raw model.
pub fn rate_population(
    env: &EvolveEnv<'_>,
    pop: &PopulationState,
    g: usize,
    stage_seed: u64,
) -> Result<(PopulationState, Vec<MatchRecord>, EloModel, usize), EvolutionError> {
    let ctx = MatchContext {
        env: DebateEnv {
            gateway: env.gateway,
            templates: env.templates,
        },
        questions: env.train,
        debate: env.settings.debate,
        seed: stage_seed,
        exec: env.exec,
    };
    let (records, debates) = match pop.objective {
        Objective::Persuasion => {
            let ps: Vec<Participant> = pop.strategies.iter().map(StrategyPrompt::participant).collect();
            let files = TournamentFiles {
                checkpoint: Some(env.layout.swiss_checkpoint(g)),
                transcripts: Some(env.layout.transcripts(g)),
            };
            let out = run_swiss_tournament(&ctx, &ps, &files)?;
            let n = out.rounds.len() * (ps.len() / 2) * 4 * env.train.len();
            (out.records().cloned().collect::<Vec<_>>(), n)
        }
        Objective::Truth => {
            let teams: Vec<Team> = pop.teams.iter().map(DebateTeam::team).collect();
            let (records, transcripts) = run_truth_evaluation(&ctx, &teams)?;
            let path = env.layout.transcripts(g);
            if path.exists() {
                std::fs::remove_file(&path).map_err(io_err(&path))?;
            }
            append_transcripts(&path, &transcripts)?;
            let n = transcripts.len();
            (records, n)
        }
    };
    let obs = match pop.objective {
        Objective::Persuasion => Observations::Persuasion(
            records
                .iter()
                .map(|r| PairObservation {
                    a: r.participant_a.clone(),
                    b: r.participant_b.clone(),
                    score: r.aggregate_score_a,
                })
                .collect(),
        ),
        Objective::Truth => Observations::Truth(
            records
                .iter()
                .map(|r| TeamObservation {
                    team: r.participant_a.clone(),
                    question: r.participant_b.clone(),
                    accuracy: r.aggregate_score_a,
                })
                .collect(),
        ),
    };
    let model = fit(&obs, &env.settings.fit)?;
    let anchored = model.anchored(crate::rating::INITIAL_RATING);
    let mut rated = pop.clone();
    rated.apply_ratings(&anchored.ratings);
    Ok((rated, records, model, debates))
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), EvolutionError> {
    let mut text = String::new();
    for it in items {
        text.push_str(&serde_json::to_string(it).expect("record serializes"));
        text.push('\n');
    }
    write_atomic(path, text.as_bytes()).map_err(io_err(path))
}

fn next_generation(
    env: &EvolveEnv<'_>,
    rated: &PopulationState,
    selection: &SelectionOutcome,
    g: usize,
    seed_g: u64,
) -> Result<(PopulationState, Vec<String>), EvolutionError> {
    let mutator = Mutator {
        gateway: env.gateway,
        templates: env.templates,
        bank: env.bank,
        exec: env.exec,
    };
    let born = g + 1;
    let mut next = PopulationState {
        generation: born,
        objective: rated.objective,
        strategies: Vec::new(),
        teams: Vec::new(),
    };
    let mut children = Vec::new();
    // Categories in seed-file order, so ids and output order are stable.
    for cat in &env.bank.categories {
        let (Some(keep), Some(drop)) = (selection.survivors.get(&cat.name), selection.eliminated.get(&cat.name)) else {
            continue;
        };
        match rated.objective {
            Objective::Persuasion => {
                let survivors: Vec<&StrategyPrompt> = keep
                    .iter()
                    .map(|id| rated.strategies.iter().find(|s| &s.id == id).expect("survivor in population"))
                    .collect();
                let kids = mutator.mutate_persuasion(&cat.name, &survivors, drop.len(), born, seed_g)?;
                next.strategies.extend(survivors.into_iter().cloned());
                children.extend(kids.iter().map(|k| k.id.clone()));
                next.strategies.extend(kids);
            }
            Objective::Truth => {
                let survivors: Vec<&DebateTeam> = keep
                    .iter()
                    .map(|id| rated.teams.iter().find(|t| &t.id == id).expect("survivor in population"))
                    .collect();
                let kids = mutator.mutate_truth(&cat.name, &survivors, drop.len(), born, seed_g)?;
                next.teams.extend(survivors.into_iter().cloned());
                children.extend(kids.iter().map(|k| k.id.clone()));
                next.teams.extend(kids);
            }
        }
    }
    for s in &mut next.strategies {
        s.persuasion_rating = None;
    }
    for t in &mut next.teams {
        t.truth_rating = None;
    }
    Ok((next, children))
}

/// Run (or resume) the generational loop. Generation `g < G` is rated,
/// selected and mutated; generation `G` is only rated. With `G = 0` the
/// seed population is recorded unrated and nothing is played.
pub fn evolve(env: &EvolveEnv<'_>) -> Result<EvolutionSummary, EvolutionError> {
    let st = env.settings;
    if env.train.is_empty() && st.generations > 0 {
        return Err(EvolutionError::NoQuestions);
    }
    env.layout.create_dirs().map_err(io_err(env.layout.root()))?;
    let mut states: Vec<GenerationState> = Vec::new();
    let mut computed = Vec::new();
    let mut pop = seed_population(env.bank, st.objective);

    for g in 0..=st.generations {
        let path = env.layout.generation(g);
        if path.exists() {
            let state = GenerationState::read(&path)?;
            if state.config_hash != env.config_hash {
                return Err(EvolutionError::State {
                    path,
                    reason: "written under a different config".into(),
                });
            }
            if let Some(next) = &state.next_population {
                pop = next.clone();
            }
            states.push(state);
            continue;
        }
        let seed_g = seed::derive(st.master_seed, &format!("generation{g}"));
        let mut state = GenerationState {
            format: STATE_FORMAT,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: env.config_hash.to_string(),
            generation: g,
            population: pop.clone(),
            matches: 0,
            debates: 0,
            fit_epochs: 0,
            fit_converged: false,
            fit_cost: f64::NAN,
            kill_count: None,
            selection: None,
            children: Vec::new(),
            next_population: None,
        };
        if st.generations > 0 {
            let (rated, records, model, debates) = rate_population(env, &pop, g, seed::derive(seed_g, "tournament"))?;
            write_jsonl(&env.layout.matches(g), &records)?;
            model.write_json(&env.layout.ratings(g)).map_err(io_err(&env.layout.ratings(g)))?;
            state.population = rated;
            state.matches = records.len();
            state.debates = debates;
            state.fit_epochs = model.best_epoch;
            state.fit_converged = model.converged;
            state.fit_cost = model.final_cost();
        }
        if g < st.generations {
            let selection = select(&state.population.candidates(), &env.bank.rules(), st.kill_fraction, g)?;
            let k = selection.eliminated.values().map(Vec::len).max().unwrap_or(0);
            let (next, children) = next_generation(env, &state.population, &selection, g, seed::derive(seed_g, "mutation"))?;
            state.kill_count = Some(k);
            state.selection = Some(selection);
            state.children = children;
            state.next_population = Some(next.clone());
            pop = next;
        }
        state.write(&path)?;
        tracing::info!(generation = g, population = state.population.len(), "generation complete");
        computed.push(g);
        states.push(state);
    }
    Ok(EvolutionSummary { states, computed })
}

/// Split `target` across `k` categories: equal shares, the remainder going
/// to the first categories in seed-file order.
pub fn per_category_quota(target: usize, k: usize) -> Vec<usize> {
    (0..k).map(|i| target / k + usize::from(i < target % k)).collect()
}

/// Strategies ever created by a persuasion run of `generations` with
/// five-member categories: the seeds plus every replacement.
pub fn lifetime_count(bank: &SeedBank, generations: usize, kill_fraction: f64) -> usize {
    let seeds: usize = bank.categories.iter().map(|c| c.prompts.len()).sum();
    let replaced: usize = (0..generations)
        .map(|g| {
            bank.categories
                .iter()
                .map(|c| kill_count(c.prompts.len(), kill_fraction, g))
                .sum::<usize>()
        })
        .sum();
    seeds + replaced
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaticGenPool {
    /// Few-shot exemplar ids per category, drawn once per run.
    pub exemplars: BTreeMap<String, Vec<String>>,
    pub strategies: Vec<StrategyPrompt>,
}

/// Generate `target` strategies from three seed exemplars per category.
/// Exemplars are sampled once; generated strategies never serve as
/// few-shots.
pub fn staticgen(
    mutator: &Mutator<'_>,
    target: usize,
    master_seed: u64,
) -> Result<StaticGenPool, EvolutionError> {
    let seeds = seed_population(mutator.bank, Objective::Persuasion);
    let quotas = per_category_quota(target, mutator.bank.categories.len());
    let mut pool = StaticGenPool {
        exemplars: BTreeMap::new(),
        strategies: Vec::new(),
    };
    for (cat, &quota) in mutator.bank.categories.iter().zip(&quotas) {
        let members: Vec<&StrategyPrompt> = seeds.strategies.iter().filter(|s| s.category == cat.name).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(master_seed, &format!("staticgen:exemplars:{}", cat.slug())));
        let mut chosen: Vec<&StrategyPrompt> = members
            .choose_multiple(&mut rng, EXEMPLARS_PER_CATEGORY.min(members.len()))
            .copied()
            .collect();
        chosen.sort_by(|a, b| a.id.cmp(&b.id));
        pool.exemplars
            .insert(cat.name.clone(), chosen.iter().map(|s| s.id.clone()).collect());
        let kids = mutator.mutate_persuasion(
            &cat.name,
            &chosen,
            quota,
            1,
            seed::derive(master_seed, "staticgen:generate"),
        )?;
        pool.strategies.extend(kids.into_iter().map(|mut k| {
            k.id = format!("sg-{}", k.id.trim_start_matches("g01-"));
            k
        }));
    }
    Ok(pool)
}
