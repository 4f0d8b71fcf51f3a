//! Prompt templates with `{name}` placeholders.
//!
//! Rendering is a single left-to-right pass: only identifiers present in the
//! supplied bindings are substituted, every other brace is copied verbatim.
//! Substituted values are never re-scanned, so article text containing
//! braces cannot inject placeholders.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub const DEBATER: &str = include_str!("../templates/debater.txt");
pub const JUDGE: &str = include_str!("../templates/judge.txt");
pub const PERSUASION_MUTATOR: &str = include_str!("../templates/persuasion_mutator.txt");
pub const TRUTH_MUTATOR: &str = include_str!("../templates/truth_mutator.txt");

#[derive(Debug, thiserror::Error)]
pub enum TemplateError {
    #[error("template `{name}` references unbound placeholder `{placeholder}`")]
    Unbound { name: String, placeholder: String },
    #[error("cannot read template {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Template {
    pub name: String,
    pub body: String,
    /// Placeholders the template must bind.
    pub required: Vec<String>,
}

impl Template {
    pub fn new(name: &str, body: &str, required: &[&str]) -> Self {
        Template {
            name: name.to_string(),
            body: body.to_string(),
            required: required.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn render(&self, bindings: &[(&str, &str)]) -> Result<String, TemplateError> {
        let map: BTreeMap<&str, &str> = bindings.iter().copied().collect();
        for r in &self.required {
            if !map.contains_key(r.as_str()) {
                return Err(TemplateError::Unbound {
                    name: self.name.clone(),
                    placeholder: r.clone(),
                });
            }
        }
        Ok(render_str(&self.body, &map))
    }
}

fn is_ident(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Substitute `{key}` for every key in `bindings`.
pub fn render_str(body: &str, bindings: &BTreeMap<&str, &str>) -> String {
    let mut out = String::with_capacity(body.len());
    let mut rest = body;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) if is_ident(&after[..close]) => {
                let key = &after[..close];
                if let Some(v) = bindings.get(key) {
                    out.push_str(v);
                } else {
                    out.push('{');
                    out.push_str(key);
                    out.push('}');
                }
                rest = &after[close + 1..];
            }
            _ => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

/// The four prompt templates used by an experiment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateSet {
    pub debater: Template,
    pub judge: Template,
    pub persuasion_mutator: Template,
    pub truth_mutator: Template,
}

impl Default for TemplateSet {
    fn default() -> Self {
        TemplateSet {
            debater: Template::new(
                "debater",
                DEBATER,
                &[
                    "debater_id",
                    "question",
                    "pov",
                    "interlocutor_pov",
                    "article",
                    "strategy",
                    "debate_text",
                ],
            ),
            judge: Template::new("judge", JUDGE, &["question", "answer_1", "answer_2", "debate_text"]),
            persuasion_mutator: Template::new(
                "persuasion_mutator",
                PERSUASION_MUTATOR,
                &["cat", "category_description", "inspiration_prompts"],
            ),
            truth_mutator: Template::new(
                "truth_mutator",
                TRUTH_MUTATOR,
                &["cat1", "cat2", "inspiration_prompt1", "inspiration_prompt2"],
            ),
        }
    }
}

impl TemplateSet {
    /// Load overrides from a directory; files absent there keep the defaults.
    pub fn load_dir(dir: &Path) -> Result<Self, TemplateError> {
        let mut set = TemplateSet::default();
        for t in [
            &mut set.debater,
            &mut set.judge,
            &mut set.persuasion_mutator,
            &mut set.truth_mutator,
        ] {
            let path = dir.join(format!("{}.txt", t.name));
            if path.exists() {
                t.body = std::fs::read_to_string(&path).map_err(|source| TemplateError::Io {
                    path: path.display().to_string(),
                    source,
                })?;
            }
        }
        Ok(set)
    }
}
