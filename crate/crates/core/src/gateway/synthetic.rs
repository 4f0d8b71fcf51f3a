//! Deterministic stand-in for an LLM with planted debater skills.
//!
//! Every strategy text maps to a latent skill: an explicit `[skill=x]` token
//! wins, otherwise the skill is a standard-normal draw seeded by the text and
//! the world seed. Debaters prefix each argument with their skill tag. The
//! judge reads the tags back out of the transcript it is shown and answers
//! with Bradley-Terry probabilities
//!
//! ```text
//! P(debater 1) = sigmoid((s1 - s2) / tau + b * [1 correct] - b * [2 correct])
//! ```
//!
//! Which slot argues the correct answer reaches the judge through the
//! `correct_debater` hint, standing in for the judge's ability to spot truth.
//! Mutators return children whose skill is the mean parent skill plus
//! Gaussian noise. All randomness is derived from `(rng_seed, request)`, so
//! scheduling can never change an outcome.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::types::{CompletionRequest, CompletionResponse, RequestKind, Usage};
use super::{Backend, GatewayError};
use crate::seed;

pub const HINT_STRATEGY: &str = "strategy";
pub const HINT_CORRECT_DEBATER: &str = "correct_debater";
pub const HINT_INSPIRATIONS: &str = "inspirations";
pub const HINT_INSPIRATIONS_1: &str = "inspirations_1";
pub const HINT_INSPIRATIONS_2: &str = "inspirations_2";
pub const HINT_CATEGORY: &str = "category";
pub const HINT_CATEGORY_2: &str = "category_2";

const VOCAB: [&str; 48] = [
    "evidence", "clearly", "passage", "shows", "because", "therefore", "consider", "the",
    "author", "states", "detail", "context", "reader", "implies", "character", "motive",
    "timeline", "earlier", "later", "contradicts", "supports", "strongly", "indeed", "notice",
    "claim", "reason", "argument", "fact", "point", "scene", "plainly", "truth", "opponent",
    "mistaken", "careful", "reading", "reveals", "key", "moment", "explains", "why", "answer",
    "correct", "simply", "logic", "follows", "from", "text",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticAgentModel {
    /// Judge temperature `tau`.
    pub judge_temperature: f64,
    /// Bonus `b` for arguing the correct answer.
    pub correct_side_bonus: f64,
    /// Standard deviation of the skill noise added by the mutator.
    pub mutation_noise: f64,
    pub rng_seed: u64,
}

impl Default for SyntheticAgentModel {
    fn default() -> Self {
        SyntheticAgentModel {
            judge_temperature: 1.0,
            correct_side_bonus: 0.0,
            mutation_noise: 0.3,
            rng_seed: 0,
        }
    }
}

/// Format a skill tag.
pub fn skill_tag(skill: f64) -> String {
    format!("[skill={skill:+.6}]")
}

/// Parse the first `[skill=x]` tag in `text`.
pub fn parse_skill_tag(text: &str) -> Option<f64> {
    let start = text.find("[skill=")? + "[skill=".len();
    let end = text[start..].find(']')? + start;
    text[start..end].trim().parse().ok().filter(|v: &f64| v.is_finite())
}

/// Remove every skill tag from `text`.
pub fn strip_skill_tags(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(i) = rest.find("[skill=") {
        out.push_str(&rest[..i]);
        match rest[i..].find(']') {
            Some(j) => rest = &rest[i + j + 1..],
            None => {
                rest = "";
            }
        }
    }
    out.push_str(rest);
    out.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(sigmoid(x))` without cancellation.
fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

impl SyntheticAgentModel {
    pub fn new(rng_seed: u64) -> Self {
        SyntheticAgentModel {
            rng_seed,
            ..Default::default()
        }
    }

    pub fn backend_id(&self) -> String {
        format!(
            "synthetic:tau={}:b={}:noise={}:seed={}",
            self.judge_temperature, self.correct_side_bonus, self.mutation_noise, self.rng_seed
        )
    }

    /// Latent skill of a strategy text.
    pub fn skill(&self, text: &str) -> f64 {
        if let Some(s) = parse_skill_tag(text) {
            return s;
        }
        let h = seed::hash64(format!("skill:{}:{}", self.rng_seed, text).as_bytes());
        let mut rng = ChaCha8Rng::seed_from_u64(h);
        StandardNormal.sample(&mut rng)
    }

    /// Judge probability that debater 1 wins.
    pub fn judge_p1(&self, s1: f64, s2: f64, correct: Option<u8>) -> f64 {
        sigmoid(self.judge_logit(s1, s2, correct))
    }

    fn judge_logit(&self, s1: f64, s2: f64, correct: Option<u8>) -> f64 {
        let b = self.correct_side_bonus;
        let bonus = match correct {
            Some(1) => b,
            Some(2) => -b,
            _ => 0.0,
        };
        (s1 - s2) / self.judge_temperature + bonus
    }

    fn request_rng(&self, req: &CompletionRequest) -> ChaCha8Rng {
        let body = serde_json::to_vec(req).expect("request serializes");
        ChaCha8Rng::seed_from_u64(seed::derive(self.rng_seed, &seed::sha256_hex(&body)))
    }

    fn debater(&self, req: &CompletionRequest) -> String {
        let strategy = req.hints.get(HINT_STRATEGY).map(String::as_str).unwrap_or("");
        let skill = self.skill(strategy);
        let mut rng = self.request_rng(req);
        let n = rng.random_range(30..=60);
        let words: Vec<&str> = (0..n).map(|_| VOCAB[rng.random_range(0..VOCAB.len())]).collect();
        format!("{} {}", skill_tag(skill), words.join(" "))
    }

    /// Mean skill per debater slot from `Debater k: [skill=x]` segments.
    fn transcript_skills(&self, prompt: &str) -> [f64; 2] {
        let mut sums = [0.0f64; 2];
        let mut counts = [0usize; 2];
        for (slot, label) in ["Debater 1:", "Debater 2:"].iter().enumerate() {
            let mut rest = prompt;
            while let Some(i) = rest.find(label) {
                let seg = rest[i + label.len()..].trim_start();
                if seg.starts_with("[skill=") {
                    if let Some(s) = parse_skill_tag(seg) {
                        sums[slot] += s;
                        counts[slot] += 1;
                    }
                }
                rest = &rest[i + label.len()..];
            }
        }
        [0, 1].map(|k| if counts[k] > 0 { sums[k] / counts[k] as f64 } else { 0.0 })
    }

    fn judge(&self, req: &CompletionRequest) -> (String, BTreeMap<String, f64>) {
        let [s1, s2] = self.transcript_skills(&req.prompt_text());
        let correct = req
            .hints
            .get(HINT_CORRECT_DEBATER)
            .and_then(|c| c.parse::<u8>().ok());
        let x = self.judge_logit(s1, s2, correct);
        let mut lp = BTreeMap::new();
        lp.insert("1".to_string(), log_sigmoid(x));
        lp.insert("2".to_string(), log_sigmoid(-x));
        let text = if x >= 0.0 { "1" } else { "2" };
        (text.to_string(), lp)
    }

    fn child_text(&self, rng: &mut ChaCha8Rng, category: &str, parents: &[String]) -> String {
        let skills: Vec<f64> = parents.iter().map(|p| self.skill(p)).collect();
        let mean = if skills.is_empty() {
            0.0
        } else {
            skills.iter().sum::<f64>() / skills.len() as f64
        };
        let noise = Normal::new(0.0, self.mutation_noise.max(0.0))
            .map(|d| d.sample(rng))
            .unwrap_or(0.0);
        let base = parents
            .get(rng.random_range(0..parents.len().max(1)))
            .map(|p| strip_skill_tags(p))
            .unwrap_or_default();
        let mut words: Vec<String> = base.split_whitespace().take(24).map(str::to_string).collect();
        let extra = rng.random_range(2..=6);
        words.extend((0..extra).map(|_| VOCAB[rng.random_range(0..VOCAB.len())].to_string()));
        format!(
            "{} ({}) {}",
            words.join(" "),
            category.to_lowercase(),
            skill_tag(mean + noise)
        )
    }

    fn mutator(&self, req: &CompletionRequest) -> Result<String, GatewayError> {
        let mut rng = self.request_rng(req);
        let parse = |key: &str| -> Result<Vec<String>, GatewayError> {
            match req.hints.get(key) {
                Some(raw) => serde_json::from_str(raw)
                    .map_err(|e| GatewayError::InvalidRequest(format!("hint {key}: {e}"))),
                None => Ok(Vec::new()),
            }
        };
        let cat = req.hints.get(HINT_CATEGORY).cloned().unwrap_or_default();
        if req.hints.contains_key(HINT_INSPIRATIONS_1) {
            let cat2 = req.hints.get(HINT_CATEGORY_2).cloned().unwrap_or_default();
            let p1 = parse(HINT_INSPIRATIONS_1)?;
            let p2 = parse(HINT_INSPIRATIONS_2)?;
            let c1 = self.child_text(&mut rng, &cat, &p1);
            let c2 = self.child_text(&mut rng, &cat2, &p2);
            Ok(serde_json::json!({
                "reasoning": "synthetic recombination",
                "new_debater_1_prompt": c1,
                "new_debater_2_prompt": c2,
            })
            .to_string())
        } else {
            let parents = parse(HINT_INSPIRATIONS)?;
            let child = self.child_text(&mut rng, &cat, &parents);
            Ok(serde_json::json!({
                "reasoning": "synthetic recombination",
                "new_debater_prompt": child,
            })
            .to_string())
        }
    }
}

pub struct SyntheticBackend {
    pub model: SyntheticAgentModel,
    id: String,
}

impl SyntheticBackend {
    pub fn new(model: SyntheticAgentModel) -> Self {
        let id = model.backend_id();
        SyntheticBackend { model, id }
    }
}

impl Backend for SyntheticBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, GatewayError> {
        let prompt_tokens = req.prompt_text().split_whitespace().count() as u64;
        let (text, choice_logprobs) = match req.kind {
            RequestKind::Judge => {
                let (t, lp) = self.model.judge(req);
                (t, Some(lp))
            }
            RequestKind::Debater => (self.model.debater(req), None),
            RequestKind::Mutator => (self.model.mutator(req)?, None),
            RequestKind::Embedder => {
                return Err(GatewayError::InvalidRequest(
                    "embedding requests go through embed()".into(),
                ))
            }
        };
        Ok(CompletionResponse {
            usage: Usage {
                prompt_tokens,
                completion_tokens: text.split_whitespace().count() as u64,
            },
            text,
            choice_logprobs,
            backend_id: self.id.clone(),
            cache_hit: false,
        })
    }
}
