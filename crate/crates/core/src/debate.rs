//! One information-asymmetric debate.
//!
//! Both debaters see the article; the judge sees only the question, the two
//! stances and the transcript. Each round every debater speaks once, seeing
//! an egocentric rendering of the transcript so far. After the last round the
//! judge returns a guided "1"/"2" choice whose log-probabilities become the
//! soft outcome.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dataset::DebateQuestion;
use crate::exec::Execution;
use crate::gateway::synthetic::{HINT_CORRECT_DEBATER, HINT_STRATEGY};
use crate::gateway::{CompletionRequest, Gateway, GatewayError};
use crate::seed;
use crate::template::{TemplateError, TemplateSet};

/// Value bound to `{debate_text}` before anyone has spoken.
pub const NO_HISTORY: &str = "None";

#[derive(Debug, thiserror::Error)]
pub enum DebateError {
    #[error("debate on {question_id}, round {round}, {speaker}: {source}")]
    Gateway {
        question_id: String,
        round: usize,
        speaker: Speaker,
        #[source]
        source: GatewayError,
    },
    #[error("judge call on {question_id}: {source}")]
    Judge {
        question_id: String,
        #[source]
        source: GatewayError,
    },
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("invalid debate config: {0}")]
    Config(String),
    #[error("no questions to debate")]
    NoQuestions,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Speaker {
    Debater1,
    Debater2,
}

impl Speaker {
    pub fn other(self) -> Speaker {
        match self {
            Speaker::Debater1 => Speaker::Debater2,
            Speaker::Debater2 => Speaker::Debater1,
        }
    }

    pub fn number(self) -> u8 {
        match self {
            Speaker::Debater1 => 1,
            Speaker::Debater2 => 2,
        }
    }
}

impl fmt::Display for Speaker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "debater {}", self.number())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DebateConfig {
    pub rounds: usize,
    pub word_limit_per_argument: usize,
    pub transcript_word_limit: usize,
    pub first_speaker: Speaker,
    /// Which debater argues the correct answer.
    pub correct_debater: Speaker,
}

impl Default for DebateConfig {
    fn default() -> Self {
        DebateConfig {
            rounds: 2,
            word_limit_per_argument: 150,
            transcript_word_limit: 600,
            first_speaker: Speaker::Debater1,
            correct_debater: Speaker::Debater1,
        }
    }
}

impl DebateConfig {
    pub fn validate(&self) -> Result<(), DebateError> {
        if self.rounds == 0 {
            return Err(DebateError::Config("rounds must be at least 1".into()));
        }
        if self.word_limit_per_argument == 0 || self.transcript_word_limit == 0 {
            return Err(DebateError::Config("word limits must be positive".into()));
        }
        Ok(())
    }

    pub fn with_roles(self, role: RoleConfig) -> Self {
        DebateConfig {
            first_speaker: if role.a_first {
                Speaker::Debater1
            } else {
                Speaker::Debater2
            },
            correct_debater: if role.a_correct {
                Speaker::Debater1
            } else {
                Speaker::Debater2
            },
            ..self
        }
    }
}

/// One of the four (answer × speaking order) assignments for a pairing.
/// Participant A always occupies the debater-1 slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RoleConfig {
    pub a_correct: bool,
    pub a_first: bool,
}

impl RoleConfig {
    pub const ALL: [RoleConfig; 4] = [
        RoleConfig { a_correct: true, a_first: true },
        RoleConfig { a_correct: true, a_first: false },
        RoleConfig { a_correct: false, a_first: true },
        RoleConfig { a_correct: false, a_first: false },
    ];

    pub fn label(self) -> &'static str {
        match (self.a_correct, self.a_first) {
            (true, true) => "correct-first",
            (true, false) => "correct-second",
            (false, true) => "incorrect-first",
            (false, false) => "incorrect-second",
        }
    }
}

/// A strategy as seen by the debate: an id and its instruction text.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Debater<'a> {
    pub id: &'a str,
    pub strategy: &'a str,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub round: usize,
    pub speaker: Speaker,
    pub argument: String,
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DebateTranscript {
    pub id: String,
    pub question_id: String,
    pub debater_ids: [String; 2],
    pub config: DebateConfig,
    pub turns: Vec<Turn>,
    pub judge_p_debater1: f64,
    pub judge_p_correct: f64,
    pub winner: Speaker,
    pub seed: u64,
}

impl DebateTranscript {
    /// Judge probability mass on `speaker`'s answer.
    pub fn p_for(&self, speaker: Speaker) -> f64 {
        match speaker {
            Speaker::Debater1 => self.judge_p_debater1,
            Speaker::Debater2 => 1.0 - self.judge_p_debater1,
        }
    }
}

/// Keep the first `limit` whitespace-separated words.
pub fn truncate_words(text: &str, limit: usize) -> (String, bool) {
    let words: Vec<&str> = text.split_whitespace().collect();
    if words.len() <= limit {
        (text.to_string(), false)
    } else {
        (words[..limit].join(" "), true)
    }
}

pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Transcript as `viewer` sees it: rounds in order, the viewer's argument
/// first within each round.
pub fn egocentric_view(turns: &[Turn], viewer: Speaker) -> String {
    let mut rounds: Vec<usize> = turns.iter().map(|t| t.round).collect();
    rounds.dedup();
    let mut blocks = Vec::new();
    for r in rounds {
        let mut lines = vec![format!("Round {r}")];
        for who in [viewer, viewer.other()] {
            for t in turns.iter().filter(|t| t.round == r && t.speaker == who) {
                let label = if who == viewer { "You" } else { "Opponent" };
                lines.push(format!("{label}: {}", t.argument));
            }
        }
        blocks.push(lines.join("\n"));
    }
    blocks.join("\n\n")
}

/// Transcript as the judge sees it: speaking order, slot labels.
pub fn judge_view(turns: &[Turn]) -> String {
    turns
        .iter()
        .map(|t| format!("Debater {}: {}", t.speaker.number(), t.argument))
        .collect::<Vec<_>>()
        .join("\n\n")
}

pub struct DebateEnv<'a> {
    pub gateway: &'a Gateway,
    pub templates: &'a TemplateSet,
}

fn stance<'q>(q: &'q DebateQuestion, cfg: &DebateConfig, who: Speaker) -> &'q str {
    if cfg.correct_debater == who {
        &q.correct_answer
    } else {
        &q.incorrect_answer
    }
}

/// Judge prompt for a finished transcript. Never includes the article.
pub fn judge_prompt(
    templates: &TemplateSet,
    q: &DebateQuestion,
    cfg: &DebateConfig,
    turns: &[Turn],
) -> Result<String, TemplateError> {
    let transcript = judge_view(turns);
    templates.judge.render(&[
        ("question", &q.question_text),
        ("answer_1", stance(q, cfg, Speaker::Debater1)),
        ("answer_2", stance(q, cfg, Speaker::Debater2)),
        ("debate_text", &transcript),
    ])
}

pub fn run_debate(
    env: &DebateEnv<'_>,
    q: &DebateQuestion,
    d1: Debater<'_>,
    d2: Debater<'_>,
    cfg: &DebateConfig,
    debate_seed: u64,
) -> Result<DebateTranscript, DebateError> {
    cfg.validate()?;
    let mut turns: Vec<Turn> = Vec::with_capacity(cfg.rounds * 2);
    let mut words_used = 0usize;
    for round in 1..=cfg.rounds {
        for speaker in [cfg.first_speaker, cfg.first_speaker.other()] {
            let me = if speaker == Speaker::Debater1 { d1 } else { d2 };
            let history = egocentric_view(&turns, speaker);
            let number = speaker.number().to_string();
            let prompt = env.templates.debater.render(&[
                ("debater_id", &number),
                ("question", &q.question_text),
                ("pov", stance(q, cfg, speaker)),
                ("interlocutor_pov", stance(q, cfg, speaker.other())),
                ("article", &q.article_text),
                ("strategy", me.strategy),
                ("debate_text", if history.is_empty() { NO_HISTORY } else { &history }),
            ])?;
            let req_seed = seed::derive(debate_seed, &format!("round{round}:{speaker:?}"));
            let req = CompletionRequest::debater(prompt, req_seed).with_hint(HINT_STRATEGY, me.strategy);
            let resp = env.gateway.complete(&req).map_err(|source| DebateError::Gateway {
                question_id: q.id.clone(),
                round,
                speaker,
                source,
            })?;
            let budget = cfg
                .word_limit_per_argument
                .min(cfg.transcript_word_limit.saturating_sub(words_used));
            let (argument, truncated) = if budget == 0 {
                (String::new(), word_count(&resp.text) > 0)
            } else {
                truncate_words(resp.text.trim(), budget)
            };
            if argument.trim().is_empty() {
                tracing::warn!(question = %q.id, round, %speaker, debater = me.id, "empty argument");
            }
            words_used += word_count(&argument);
            turns.push(Turn {
                round,
                speaker,
                argument,
                truncated,
            });
        }
    }

    let prompt = judge_prompt(env.templates, q, cfg, &turns)?;
    let req = CompletionRequest::judge(prompt)
        .with_hint(HINT_CORRECT_DEBATER, cfg.correct_debater.number().to_string());
    let decision = env.gateway.judge(&req).map_err(|source| DebateError::Judge {
        question_id: q.id.clone(),
        source,
    })?;
    let judge_p_correct = match cfg.correct_debater {
        Speaker::Debater1 => decision.p1,
        Speaker::Debater2 => decision.p2,
    };
    let winner = match decision.winner {
        crate::gateway::Verdict::Debater1 => Speaker::Debater1,
        crate::gateway::Verdict::Debater2 => Speaker::Debater2,
    };
    Ok(DebateTranscript {
        id: format!("{:016x}", debate_seed),
        question_id: q.id.clone(),
        debater_ids: [d1.id.to_string(), d2.id.to_string()],
        config: *cfg,
        turns,
        judge_p_debater1: decision.p1,
        judge_p_correct,
        winner,
        seed: debate_seed,
    })
}

/// Soft self-play judge accuracy: the strategy debates a copy of itself on
/// every question under all four role assignments; the result is the mean
/// judge mass on the correct answer.
pub fn judge_accuracy_selfplay(
    env: &DebateEnv<'_>,
    d: Debater<'_>,
    questions: &[DebateQuestion],
    base: &DebateConfig,
    seed_root: u64,
    exec: Execution,
) -> Result<(f64, Vec<DebateTranscript>), DebateError> {
    if questions.is_empty() {
        return Err(DebateError::NoQuestions);
    }
    let jobs: Vec<(usize, RoleConfig)> = (0..questions.len())
        .flat_map(|qi| RoleConfig::ALL.map(|r| (qi, r)))
        .collect();
    let transcripts = exec.try_map(&jobs, |&(qi, role)| {
        let q = &questions[qi];
        let s = seed::derive(seed_root, &format!("selfplay:{}:{}:{}", d.id, q.id, role.label()));
        run_debate(env, q, d, d, &base.with_roles(role), s)
    })?;
    let acc = transcripts.iter().map(|t| t.judge_p_correct).sum::<f64>() / transcripts.len() as f64;
    Ok((acc, transcripts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Split;
    use crate::gateway::synthetic::skill_tag;
    use crate::gateway::SyntheticAgentModel;

    fn question() -> DebateQuestion {
        DebateQuestion {
            id: "q1".into(),
            article_id: "a1".into(),
            article_text: "ARTICLE-BODY-7f3c the lighthouse keeper left at dawn".into(),
            question_text: "When did the keeper leave?".into(),
            correct_answer: "At dawn".into(),
            incorrect_answer: "At dusk".into(),
            split: Split::Train,
            difficulty_rating: 400.0,
        }
    }

    fn turn(round: usize, speaker: Speaker, arg: &str) -> Turn {
        Turn {
            round,
            speaker,
            argument: arg.into(),
            truncated: false,
        }
    }

    #[test]
    fn truncate_boundaries() {
        let hundred = vec!["w"; 100].join(" ");
        assert_eq!(truncate_words(&hundred, 150), (hundred.clone(), false));
        let long = vec!["w"; 151].join(" ");
        let (t, cut) = truncate_words(&long, 150);
        assert!(cut);
        assert_eq!(word_count(&t), 150);
        let exact = vec!["w"; 150].join(" ");
        assert!(!truncate_words(&exact, 150).1);
    }

    #[test]
    fn truncate_mixed_whitespace_matches_reference_count() {
        let text = "  alpha\t\tbeta \n gamma\r\n\n delta   epsilon\u{3000}zeta ";
        // reference: count maximal runs of non-whitespace characters
        let mut reference = 0;
        let mut in_word = false;
        for c in text.chars() {
            if c.is_whitespace() {
                in_word = false;
            } else if !in_word {
                in_word = true;
                reference += 1;
            }
        }
        assert_eq!(reference, 6);
        assert_eq!(word_count(text), reference);
        let (t, cut) = truncate_words(text, 4);
        assert!(cut);
        assert_eq!(t, "alpha beta gamma delta");
    }

    #[test]
    fn egocentric_empty() {
        assert_eq!(egocentric_view(&[], Speaker::Debater1), "");
    }

    #[test]
    fn egocentric_viewer_first() {
        let turns = vec![turn(1, Speaker::Debater1, "one"), turn(1, Speaker::Debater2, "two")];
        assert_eq!(
            egocentric_view(&turns, Speaker::Debater2),
            "Round 1\nYou: two\nOpponent: one"
        );
    }

    #[test]
    fn egocentric_two_rounds() {
        let turns = vec![
            turn(1, Speaker::Debater2, "b1"),
            turn(1, Speaker::Debater1, "a1"),
            turn(2, Speaker::Debater2, "b2"),
            turn(2, Speaker::Debater1, "a2"),
        ];
        let expected = "Round 1\nYou: a1\nOpponent: b1\n\nRound 2\nYou: a2\nOpponent: b2";
        assert_eq!(egocentric_view(&turns, Speaker::Debater1), expected);
        let partial = &turns[..3];
        assert_eq!(
            egocentric_view(partial, Speaker::Debater1),
            "Round 1\nYou: a1\nOpponent: b1\n\nRound 2\nOpponent: b2"
        );
    }

    fn env_for(model: SyntheticAgentModel) -> (Gateway, TemplateSet) {
        (Gateway::synthetic(model), TemplateSet::default())
    }

    #[test]
    fn one_round_two_turns_one_judge_call() {
        let (gw, t) = env_for(SyntheticAgentModel::new(0));
        let env = DebateEnv { gateway: &gw, templates: &t };
        let cfg = DebateConfig { rounds: 1, ..Default::default() };
        let a = Debater { id: "a", strategy: "You lie" };
        let tr = run_debate(&env, &question(), a, a, &cfg, 1).unwrap();
        assert_eq!(tr.turns.len(), 2);
        assert_eq!(gw.stats().judge, 1);
        assert_eq!(gw.stats().debater, 2);
    }

    #[test]
    fn second_speaker_order() {
        let (gw, t) = env_for(SyntheticAgentModel::new(0));
        let env = DebateEnv { gateway: &gw, templates: &t };
        let cfg = DebateConfig {
            first_speaker: Speaker::Debater2,
            ..Default::default()
        };
        let a = Debater { id: "a", strategy: "x" };
        let tr = run_debate(&env, &question(), a, a, &cfg, 1).unwrap();
        let order: Vec<Speaker> = tr.turns.iter().map(|t| t.speaker).collect();
        assert_eq!(
            order,
            [Speaker::Debater2, Speaker::Debater1, Speaker::Debater2, Speaker::Debater1]
        );
        assert!(tr.turns.iter().all(|t| word_count(&t.argument) <= 150));
    }

    #[test]
    fn large_skill_gap_dominates() {
        let (gw, t) = env_for(SyntheticAgentModel::new(0));
        let env = DebateEnv { gateway: &gw, templates: &t };
        let strong = format!("strong {}", skill_tag(6.0));
        let weak = format!("weak {}", skill_tag(-1.0));
        let tr = run_debate(
            &env,
            &question(),
            Debater { id: "s", strategy: &strong },
            Debater { id: "w", strategy: &weak },
            &DebateConfig::default(),
            3,
        )
        .unwrap();
        // sigmoid(7) = 0.99909
        assert!(tr.judge_p_debater1 > 0.99);
        assert_eq!(tr.winner, Speaker::Debater1);
    }

    #[test]
    fn judge_prompt_never_contains_article() {
        let (gw, t) = env_for(SyntheticAgentModel::new(0));
        let env = DebateEnv { gateway: &gw, templates: &t };
        let q = question();
        let a = Debater { id: "a", strategy: "x" };
        let tr = run_debate(&env, &q, a, a, &DebateConfig::default(), 5).unwrap();
        let prompt = judge_prompt(&t, &q, &tr.config, &tr.turns).unwrap();
        assert!(!prompt.contains(&q.article_text));
        assert!(prompt.contains(&q.correct_answer));
    }

    #[test]
    fn transcript_budget_caps_total_words() {
        let (gw, t) = env_for(SyntheticAgentModel::new(0));
        let env = DebateEnv { gateway: &gw, templates: &t };
        let cfg = DebateConfig {
            rounds: 3,
            word_limit_per_argument: 20,
            transcript_word_limit: 50,
            ..Default::default()
        };
        let a = Debater { id: "a", strategy: "x" };
        let tr = run_debate(&env, &question(), a, a, &cfg, 8).unwrap();
        assert_eq!(tr.turns.len(), 6);
        let total: usize = tr.turns.iter().map(|t| word_count(&t.argument)).sum();
        assert_eq!(total, 50);
        assert!(tr.turns[5].argument.is_empty());
    }

    #[test]
    fn selfplay_without_truth_signal_is_half() {
        let (gw, t) = env_for(SyntheticAgentModel::new(0));
        let env = DebateEnv { gateway: &gw, templates: &t };
        let d = Debater { id: "a", strategy: "You use data" };
        let (acc, trs) =
            judge_accuracy_selfplay(&env, d, &[question()], &DebateConfig::default(), 0, Execution::Sequential)
                .unwrap();
        assert_eq!(trs.len(), 4);
        assert_eq!(acc, 0.5);
    }

    #[test]
    fn selfplay_with_bonus_is_sigmoid_b() {
        let mut m = SyntheticAgentModel::new(0);
        m.correct_side_bonus = 0.8;
        let (gw, t) = env_for(m);
        let env = DebateEnv { gateway: &gw, templates: &t };
        let d = Debater { id: "a", strategy: "You use data" };
        let (acc, trs) =
            judge_accuracy_selfplay(&env, d, &[question()], &DebateConfig::default(), 0, Execution::Parallel)
                .unwrap();
        let expected = 1.0 / (1.0 + (-0.8f64).exp());
        assert!((acc - expected).abs() < 1e-12);
        // hand check: mean of the four per-config probabilities
        let mean = trs.iter().map(|t| t.judge_p_correct).sum::<f64>() / 4.0;
        assert!((acc - mean).abs() < 1e-15);
    }

    #[test]
    fn transcript_json_roundtrip() {
        let (gw, t) = env_for(SyntheticAgentModel::new(0));
        let env = DebateEnv { gateway: &gw, templates: &t };
        let a = Debater { id: "a", strategy: "x" };
        let tr = run_debate(&env, &question(), a, a, &DebateConfig::default(), 11).unwrap();
        let line = serde_json::to_string(&tr).unwrap();
        let back: DebateTranscript = serde_json::from_str(&line).unwrap();
        assert_eq!(back, tr);
    }

    #[test]
    fn zero_rounds_rejected() {
        let cfg = DebateConfig { rounds: 0, ..Default::default() };
        assert!(cfg.validate().is_err());
    }
}
