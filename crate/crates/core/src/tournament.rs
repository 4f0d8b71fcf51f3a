//! Swiss tournaments among strategies and exhaustive team-versus-question
//! evaluation.
//!
//! Every pairing is played on every question under the four
//! [`RoleConfig`]s, so neither answer assignment nor speaking order favors a
//! participant. Rounds are a barrier; the debates of one round (and all
//! truth-mode debates) are flattened into a single job list for the
//! executor.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::DebateQuestion;
use crate::debate::{run_debate, DebateConfig, DebateEnv, DebateError, DebateTranscript, Debater, RoleConfig};
use crate::exec::Execution;
use crate::layout::write_atomic;
use crate::seed;

#[derive(Debug, thiserror::Error)]
pub enum TournamentError {
    #[error(transparent)]
    Debate(#[from] DebateError),
    #[error("a tournament needs at least 2 participants, got {0}")]
    TooFew(usize),
    #[error("participant `{0}` appears more than once")]
    DuplicateId(String),
    #[error("`{0}` cannot play itself")]
    SelfMatch(String),
    #[error("no questions to debate")]
    NoQuestions,
    #[error("no teams to evaluate")]
    NoTeams,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error("expected {expected} debates, ran {actual}")]
    DebateCount { expected: usize, actual: usize },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TournamentError + '_ {
    move |source| TournamentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Participant {
    pub id: String,
    pub strategy: String,
}

impl Participant {
    pub fn new(id: impl Into<String>, strategy: impl Into<String>) -> Self {
        Participant {
            id: id.into(),
            strategy: strategy.into(),
        }
    }

    fn debater(&self) -> Debater<'_> {
        Debater {
            id: &self.id,
            strategy: &self.strategy,
        }
    }
}

/// Two strategies debating together. `members[0]` takes the debater-1 slot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Team {
    pub id: String,
    pub members: [Participant; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchRecord {
    pub participant_a: String,
    /// Opposing strategy in persuasion mode, question id in truth mode.
    pub participant_b: String,
    /// In [`RoleConfig::ALL`] order, each averaged over questions.
    pub per_config_scores: [f64; 4],
    pub aggregate_score_a: f64,
    pub points_a: u8,
    pub points_b: u8,
    pub round_index: usize,
    pub transcript_refs: Vec<String>,
    pub tie_flag: bool,
    pub repeat_flag: bool,
}

impl MatchRecord {
    fn from_scores(
        a: &str,
        b: &str,
        round_index: usize,
        scores: &[(RoleConfig, f64)],
        transcript_refs: Vec<String>,
        repeat_flag: bool,
    ) -> MatchRecord {
        let mut sums = [0.0; 4];
        let mut counts = [0usize; 4];
        for &(role, p) in scores {
            let k = RoleConfig::ALL.iter().position(|r| *r == role).expect("known role");
            sums[k] += p;
            counts[k] += 1;
        }
        let per_config_scores: [f64; 4] = std::array::from_fn(|k| sums[k] / counts[k].max(1) as f64);
        let aggregate_score_a = per_config_scores.iter().sum::<f64>() / 4.0;
        let tie_flag = aggregate_score_a == 0.5;
        let a_wins = if tie_flag { a < b } else { aggregate_score_a > 0.5 };
        MatchRecord {
            participant_a: a.to_string(),
            participant_b: b.to_string(),
            per_config_scores,
            aggregate_score_a,
            points_a: a_wins as u8,
            points_b: (!a_wins) as u8,
            round_index,
            transcript_refs,
            tie_flag,
            repeat_flag,
        }
    }
}

/// Everything a match needs besides its participants.
pub struct MatchContext<'a> {
    pub env: DebateEnv<'a>,
    pub questions: &'a [DebateQuestion],
    pub debate: DebateConfig,
    pub seed: u64,
    pub exec: Execution,
}

fn debate_seed(root: u64, kind: &str, who: &str, round: usize, q: &str, role: RoleConfig) -> u64 {
    seed::derive(root, &format!("{kind}:{round}:{who}:{q}:{}", role.label()))
}

/// Jobs are (pairing index, question index, role). Results come back in job order.
fn play_jobs<'p>(
    ctx: &MatchContext<'_>,
    kind: &str,
    round: usize,
    pairings: &[(Debater<'p>, Debater<'p>, String)],
) -> Result<Vec<Vec<(RoleConfig, DebateTranscript)>>, TournamentError> {
    let jobs: Vec<(usize, usize, RoleConfig)> = (0..pairings.len())
        .flat_map(|m| (0..ctx.questions.len()).flat_map(move |q| RoleConfig::ALL.map(|r| (m, q, r))))
        .collect();
    let out = ctx.exec.try_map(&jobs, |&(m, qi, role)| {
        let (d1, d2, ref label) = pairings[m];
        let q = &ctx.questions[qi];
        let s = debate_seed(ctx.seed, kind, label, round, &q.id, role);
        run_debate(&ctx.env, q, d1, d2, &ctx.debate.with_roles(role), s).map(|t| (m, role, t))
    })?;
    let mut grouped: Vec<Vec<(RoleConfig, DebateTranscript)>> = vec![Vec::new(); pairings.len()];
    for (m, role, t) in out {
        grouped[m].push((role, t));
    }
    Ok(grouped)
}

/// Play `a` against `b` on every question under all four role configs.
/// `a` always holds the debater-1 slot; its score in each debate is the
/// judge's probability for debater 1.
pub fn run_persuasion_match(
    ctx: &MatchContext<'_>,
    a: &Participant,
    b: &Participant,
    round_index: usize,
) -> Result<(MatchRecord, Vec<DebateTranscript>), TournamentError> {
    let mut out = run_persuasion_round(ctx, &[(a, b, false)], round_index)?;
    Ok(out.pop().expect("one pairing"))
}

fn run_persuasion_round(
    ctx: &MatchContext<'_>,
    pairs: &[(&Participant, &Participant, bool)],
    round_index: usize,
) -> Result<Vec<(MatchRecord, Vec<DebateTranscript>)>, TournamentError> {
    if ctx.questions.is_empty() {
        return Err(TournamentError::NoQuestions);
    }
    for (a, b, _) in pairs {
        if a.id == b.id {
            return Err(TournamentError::SelfMatch(a.id.clone()));
        }
    }
    let pairings: Vec<_> = pairs
        .iter()
        .map(|(a, b, _)| (a.debater(), b.debater(), format!("{}|{}", a.id, b.id)))
        .collect();
    let grouped = play_jobs(ctx, "persuasion", round_index, &pairings)?;
    Ok(pairs
        .iter()
        .zip(grouped)
        .map(|((a, b, repeat), debates)| {
            let scores: Vec<_> = debates.iter().map(|(r, t)| (*r, t.judge_p_debater1)).collect();
            let refs = debates.iter().map(|(_, t)| t.id.clone()).collect();
            let record = MatchRecord::from_scores(&a.id, &b.id, round_index, &scores, refs, *repeat);
            (record, debates.into_iter().map(|(_, t)| t).collect())
        })
        .collect())
}

/// Every team debates every question under the four configs (which member
/// argues the correct answer × who speaks first). One record per
/// (team, question); its aggregate is the mean judge mass on the correct answer.
pub fn run_truth_evaluation(
    ctx: &MatchContext<'_>,
    teams: &[Team],
) -> Result<(Vec<MatchRecord>, Vec<DebateTranscript>), TournamentError> {
    if teams.is_empty() {
        return Err(TournamentError::NoTeams);
    }
    if ctx.questions.is_empty() {
        return Err(TournamentError::NoQuestions);
    }
    let jobs: Vec<(usize, usize, RoleConfig)> = (0..teams.len())
        .flat_map(|t| (0..ctx.questions.len()).flat_map(move |q| RoleConfig::ALL.map(|r| (t, q, r))))
        .collect();
    let debates = ctx.exec.try_map(&jobs, |&(ti, qi, role)| {
        let team = &teams[ti];
        let q = &ctx.questions[qi];
        let s = debate_seed(ctx.seed, "truth", &team.id, 0, &q.id, role);
        run_debate(
            &ctx.env,
            q,
            team.members[0].debater(),
            team.members[1].debater(),
            &ctx.debate.with_roles(role),
            s,
        )
        .map(|t| (role, t))
    })?;
    let expected = teams.len() * ctx.questions.len() * 4;
    if debates.len() != expected {
        return Err(TournamentError::DebateCount {
            expected,
            actual: debates.len(),
        });
    }
    let mut records = Vec::with_capacity(teams.len() * ctx.questions.len());
    for (chunk, &(ti, qi, _)) in debates.chunks(4).zip(jobs.iter().step_by(4)) {
        let scores: Vec<_> = chunk.iter().map(|(r, t)| (*r, t.judge_p_correct)).collect();
        let refs = chunk.iter().map(|(_, t)| t.id.clone()).collect();
        records.push(MatchRecord::from_scores(
            &teams[ti].id,
            &ctx.questions[qi].id,
            0,
            &scores,
            refs,
            false,
        ));
    }
    Ok((records, debates.into_iter().map(|(_, t)| t).collect()))
}

pub fn total_rounds(n: usize) -> usize {
    if n < 2 {
        0
    } else {
        (usize::BITS - (n - 1).leading_zeros()) as usize
    }
}

fn pair_key(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Standing {
    pub points: u32,
    pub score_sum: f64,
    pub byes: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwissState {
    pub standings: BTreeMap<String, Standing>,
    pub played_pairs: BTreeSet<(String, String)>,
    pub round: usize,
    pub total_rounds: usize,
}

impl SwissState {
    pub fn new<'a>(ids: impl IntoIterator<Item = &'a str>) -> SwissState {
        let standings: BTreeMap<String, Standing> =
            ids.into_iter().map(|id| (id.to_string(), Standing::default())).collect();
        let total_rounds = total_rounds(standings.len());
        SwissState {
            standings,
            played_pairs: BTreeSet::new(),
            round: 0,
            total_rounds,
        }
    }

    pub fn has_played(&self, a: &str, b: &str) -> bool {
        self.played_pairs.contains(&pair_key(a, b))
    }

    /// Points desc, then summed soft score desc, then id.
    pub fn ranking(&self) -> Vec<String> {
        let mut ids: Vec<(&String, &Standing)> = self.standings.iter().collect();
        ids.sort_by(|(ia, a), (ib, b)| {
            b.points
                .cmp(&a.points)
                .then(b.score_sum.total_cmp(&a.score_sum))
                .then(ia.cmp(ib))
        });
        ids.into_iter().map(|(id, _)| id.clone()).collect()
    }

    pub fn apply(&mut self, round: &SwissRound) {
        if let Some(bye) = &round.bye {
            let s = self.standings.entry(bye.clone()).or_default();
            s.points += 1;
            s.byes += 1;
        }
        for r in &round.records {
            let a = self.standings.entry(r.participant_a.clone()).or_default();
            a.points += r.points_a as u32;
            a.score_sum += r.aggregate_score_a;
            let b = self.standings.entry(r.participant_b.clone()).or_default();
            b.points += r.points_b as u32;
            b.score_sum += 1.0 - r.aggregate_score_a;
            self.played_pairs.insert(pair_key(&r.participant_a, &r.participant_b));
        }
        self.round = self.round.max(round.index + 1);
    }

    /// Standings are a pure function of the rounds played.
    pub fn replay<'a>(ids: impl IntoIterator<Item = &'a str>, rounds: &[SwissRound]) -> SwissState {
        let mut s = SwissState::new(ids);
        for r in rounds {
            s.apply(r);
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pairing {
    pub a: String,
    pub b: String,
    pub repeat: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundPlan {
    pub pairs: Vec<Pairing>,
    pub bye: Option<String>,
}

/// Greedy top-down Swiss pairing.
///
/// With an odd count the bye goes first to the lowest-ranked participant
/// who has not had one. Then the highest-ranked unpaired participant meets
/// the nearest-ranked unpaired one it has not played; if every remaining
/// opponent is a rematch, the nearest one is taken and flagged.
pub fn swiss_pairings(state: &SwissState, ranking: &[String]) -> RoundPlan {
    let mut pool: Vec<&String> = ranking.iter().collect();
    let mut bye = None;
    if pool.len() % 2 == 1 {
        let pos = pool
            .iter()
            .rposition(|id| state.standings.get(*id).map(|s| s.byes == 0).unwrap_or(true))
            .unwrap_or(pool.len() - 1);
        bye = Some(pool.remove(pos).clone());
    }
    let mut pairs = Vec::with_capacity(pool.len() / 2);
    while !pool.is_empty() {
        let top = pool.remove(0);
        let (pos, repeat) = match pool.iter().position(|o| !state.has_played(top, o)) {
            Some(p) => (p, false),
            None => (0, true),
        };
        let opp = pool.remove(pos);
        if repeat {
            tracing::warn!(a = %top, b = %opp, "no unplayed opponent left; repeating a pairing");
        }
        pairs.push(Pairing {
            a: top.clone(),
            b: opp.clone(),
            repeat,
        });
    }
    RoundPlan { pairs, bye }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwissRound {
    pub index: usize,
    pub bye: Option<String>,
    pub records: Vec<MatchRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Checkpoint {
    participants: Vec<String>,
    questions: Vec<String>,
    seed: u64,
    total_rounds: usize,
    rounds: Vec<SwissRound>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwissOutcome {
    pub rounds: Vec<SwissRound>,
    pub state: SwissState,
    /// Transcripts of rounds played in this call (resumed rounds excluded).
    pub transcripts: Vec<DebateTranscript>,
    pub debates_run: usize,
}

impl SwissOutcome {
    pub fn records(&self) -> impl Iterator<Item = &MatchRecord> {
        self.rounds.iter().flat_map(|r| r.records.iter())
    }
}

/// Where a tournament persists progress. The checkpoint is rewritten after
/// each round; transcripts are appended as JSON lines.
#[derive(Debug, Clone, Default)]
pub struct TournamentFiles {
    pub checkpoint: Option<PathBuf>,
    pub transcripts: Option<PathBuf>,
}

pub fn append_transcripts(path: &Path, transcripts: &[DebateTranscript]) -> Result<(), TournamentError> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_err(path))?;
    let mut buf = String::new();
    for t in transcripts {
        buf.push_str(&serde_json::to_string(t).expect("transcript serializes"));
        buf.push('\n');
    }
    f.write_all(buf.as_bytes()).map_err(io_err(path))
}

/// Reads a transcript log, keeping the first copy of each id. A torn final
/// line (from an interrupted append) is ignored.
pub fn read_transcripts(path: &Path) -> Result<Vec<DebateTranscript>, TournamentError> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    let lines: Vec<String> = BufReader::new(f)
        .lines()
        .collect::<Result<_, _>>()
        .map_err(io_err(path))?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    let last = lines.len().saturating_sub(1);
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<DebateTranscript>(line) {
            Ok(t) => {
                if seen.insert(t.id.clone()) {
                    out.push(t);
                }
            }
            Err(_) if i == last => tracing::warn!(path = %path.display(), "dropping torn final transcript line"),
            Err(e) => {
                return Err(TournamentError::Checkpoint {
                    path: path.to_path_buf(),
                    reason: format!("line {}: {e}", i + 1),
                })
            }
        }
    }
    Ok(out)
}

fn load_checkpoint(path: &Path, expect: &Checkpoint) -> Result<Vec<SwissRound>, TournamentError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let cp: Checkpoint = serde_json::from_str(&text).map_err(|e| TournamentError::Checkpoint {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    if cp.participants != expect.participants
        || cp.questions != expect.questions
        || cp.seed != expect.seed
        || cp.total_rounds != expect.total_rounds
    {
        return Err(TournamentError::Checkpoint {
            path: path.to_path_buf(),
            reason: "belongs to a different tournament".into(),
        });
    }
    Ok(cp.rounds)
}

/// Swiss tournament over `⌈log₂ n⌉` rounds. With a checkpoint path, rounds
/// already recorded there are replayed instead of played.
pub fn run_swiss_tournament(
    ctx: &MatchContext<'_>,
    participants: &[Participant],
    files: &TournamentFiles,
) -> Result<SwissOutcome, TournamentError> {
    if participants.len() < 2 {
        return Err(TournamentError::TooFew(participants.len()));
    }
    if ctx.questions.is_empty() {
        return Err(TournamentError::NoQuestions);
    }
    let mut by_id: BTreeMap<&str, &Participant> = BTreeMap::new();
    for p in participants {
        if by_id.insert(&p.id, p).is_some() {
            return Err(TournamentError::DuplicateId(p.id.clone()));
        }
    }
    let ids: Vec<String> = by_id.keys().map(|s| s.to_string()).collect();
    let mut cp = Checkpoint {
        participants: ids.clone(),
        questions: ctx.questions.iter().map(|q| q.id.clone()).collect(),
        seed: ctx.seed,
        total_rounds: total_rounds(ids.len()),
        rounds: Vec::new(),
    };
    if let Some(path) = &files.checkpoint {
        cp.rounds = load_checkpoint(path, &cp)?;
        if !cp.rounds.is_empty() {
            tracing::info!(rounds = cp.rounds.len(), "resuming tournament from checkpoint");
        }
    }
    let mut state = SwissState::replay(ids.iter().map(String::as_str), &cp.rounds);
    let mut transcripts = Vec::new();
    let mut debates_run = 0;

    for index in cp.rounds.len()..cp.total_rounds {
        let plan = swiss_pairings(&state, &state.ranking());
        let pairs: Vec<_> = plan
            .pairs
            .iter()
            .map(|p| (by_id[p.a.as_str()], by_id[p.b.as_str()], p.repeat))
            .collect();
        let played = run_persuasion_round(ctx, &pairs, index)?;
        let expected = pairs.len() * 4 * ctx.questions.len();
        let actual: usize = played.iter().map(|(_, t)| t.len()).sum();
        if actual != expected {
            return Err(TournamentError::DebateCount { expected, actual });
        }
        debates_run += actual;
        let mut records = Vec::with_capacity(played.len());
        let mut round_transcripts = Vec::with_capacity(actual);
        for (r, ts) in played {
            records.push(r);
            round_transcripts.extend(ts);
        }
        let round = SwissRound {
            index,
            bye: plan.bye,
            records,
        };
        state.apply(&round);
        cp.rounds.push(round);
        if let Some(path) = &files.transcripts {
            append_transcripts(path, &round_transcripts)?;
        }
        if let Some(path) = &files.checkpoint {
            let bytes = serde_json::to_vec_pretty(&cp).expect("checkpoint serializes");
            write_atomic(path, &bytes).map_err(io_err(path))?;
        }
        tracing::debug!(round = index, matches = pairs.len(), "swiss round complete");
        transcripts.extend(round_transcripts);
    }
    Ok(SwissOutcome {
        rounds: cp.rounds,
        state,
        transcripts,
        debates_run,
    })
}
