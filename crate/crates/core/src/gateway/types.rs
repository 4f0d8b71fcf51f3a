use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

pub const JUDGE_CHOICES: [&str; 2] = ["1", "2"];
pub const JUDGE_LOGPROBS: u32 = 5;
pub const JUDGE_TOP_LOGPROBS: u32 = 10;
pub const DEBATER_MAX_TOKENS: u32 = 32_000;
pub const DEBATER_TEMPERATURE: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn user(content: impl Into<String>) -> Self {
        Message {
            role: Role::User,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestKind {
    Debater,
    Judge,
    Mutator,
    Embedder,
}

impl fmt::Display for RequestKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            RequestKind::Debater => "debater",
            RequestKind::Judge => "judge",
            RequestKind::Mutator => "mutator",
            RequestKind::Embedder => "embedder",
        };
        f.write_str(s)
    }
}

/// How log-probabilities are requested on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Logprobs {
    Off,
    /// `"logprobs": true`
    Enabled,
    /// `"logprobs": n`
    Count(u32),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub kind: RequestKind,
    pub messages: Vec<Message>,
    pub max_tokens: u32,
    pub temperature: Option<f64>,
    pub guided_choice: Option<Vec<String>>,
    pub logprobs: Logprobs,
    pub top_logprobs: Option<u32>,
    /// Sampling seed; distinguishes repeated samples of the same prompt.
    pub seed: Option<u64>,
    /// Side-channel annotations read only by the synthetic backend. They take
    /// part in the cache key but are never sent over HTTP.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub hints: BTreeMap<String, String>,
}

impl CompletionRequest {
    /// Judge call: one token, constrained to "1" or "2".
    pub fn judge(prompt: String) -> Self {
        CompletionRequest {
            kind: RequestKind::Judge,
            messages: vec![Message::user(prompt)],
            max_tokens: 1,
            temperature: None,
            guided_choice: Some(JUDGE_CHOICES.iter().map(|s| s.to_string()).collect()),
            logprobs: Logprobs::Count(JUDGE_LOGPROBS),
            top_logprobs: Some(JUDGE_TOP_LOGPROBS),
            seed: None,
            hints: BTreeMap::new(),
        }
    }

    pub fn debater(prompt: String, seed: u64) -> Self {
        CompletionRequest {
            kind: RequestKind::Debater,
            messages: vec![Message::user(prompt)],
            max_tokens: DEBATER_MAX_TOKENS,
            temperature: Some(DEBATER_TEMPERATURE),
            guided_choice: None,
            logprobs: Logprobs::Enabled,
            top_logprobs: None,
            seed: Some(seed),
            hints: BTreeMap::new(),
        }
    }

    /// Mutators reuse debater decoding.
    pub fn mutator(prompt: String, seed: u64) -> Self {
        CompletionRequest {
            kind: RequestKind::Mutator,
            ..CompletionRequest::debater(prompt, seed)
        }
    }

    pub fn with_hint(mut self, key: &str, value: impl Into<String>) -> Self {
        self.hints.insert(key.to_string(), value.into());
        self
    }

    /// Concatenated message text.
    pub fn prompt_text(&self) -> String {
        self.messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.max_tokens == 0 {
            return Err("max_tokens must be positive".into());
        }
        if let Some(t) = self.temperature {
            if !(t >= 0.0) {
                return Err(format!("temperature {t} must be non-negative"));
            }
        }
        if let Some(g) = &self.guided_choice {
            if g.is_empty() {
                return Err("guided_choice must be nonempty".into());
            }
        }
        if self.kind == RequestKind::Judge {
            let ok = self
                .guided_choice
                .as_ref()
                .is_some_and(|g| g.iter().map(String::as_str).eq(JUDGE_CHOICES));
            if !ok || self.max_tokens != 1 {
                return Err("judge requests need guided_choice [\"1\",\"2\"] and max_tokens 1".into());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub text: String,
    pub choice_logprobs: Option<BTreeMap<String, f64>>,
    pub usage: Usage,
    pub backend_id: String,
    pub cache_hit: bool,
}

impl CompletionResponse {
    /// Check the guided-choice contract against the originating request.
    pub fn check_contract(&self, req: &CompletionRequest) -> Result<(), String> {
        let Some(choices) = &req.guided_choice else {
            return Ok(());
        };
        if !choices.iter().any(|c| c == self.text.trim()) {
            return Err(format!(
                "response `{}` is not one of the allowed choices {:?}",
                self.text, choices
            ));
        }
        let lp = self
            .choice_logprobs
            .as_ref()
            .ok_or_else(|| "guided response carries no logprobs".to_string())?;
        for c in choices {
            match lp.get(c) {
                Some(v) if !v.is_nan() => {}
                _ => return Err(format!("missing logprob for allowed choice `{c}`")),
            }
        }
        Ok(())
    }
}
