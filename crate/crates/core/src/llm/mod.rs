//! Prompt construction for the craft, refine and fix stages, language-model
//! backends, and parsing of model output into rule drafts.

mod backend;
mod parse;
mod prompt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use backend::{
    build_backend, complete, BackendKind, LlmBackend, LlmConfig, RecordBackend, RemoteChat,
    ReplayBackend, ReplayEntry,
};
pub use parse::{extract_rule_block, parse_rule_output, parse_scores, RuleDraft};
pub use prompt::{
    build_craft_prompt, build_fix_prompt, build_refine_prompt, render, CraftInput, Templates,
    MAX_CRAFT_UNITS,
};

use crate::rule::RuleFormat;

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("basic unit from {file} has {chars} characters (limit {limit})")]
    UnitTooLarge {
        file: String,
        chars: usize,
        limit: usize,
    },
    #[error("craft prompts take 1 to {max} units, got {got}")]
    UnitCount { got: usize, max: usize },
    #[error("empty {0}")]
    EmptyInput(&'static str),
    #[error("fix prompt needs at least one error message")]
    NoErrors,
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("no recorded response for request digest {0}")]
    ReplayMiss(String),
    #[error("response contains no rule")]
    NoRuleFound,
    #[error("bad fixture file {path}: {reason}")]
    BadFixture { path: String, reason: String },
    #[error("template error: {0}")]
    Template(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Craft,
    Refine,
    Fix,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub system_text: String,
    pub user_text: String,
    pub stage: Stage,
    pub rule_format: RuleFormat,
    /// Example rule embedded in craft prompts.
    pub few_shot: String,
}

impl Prompt {
    /// SHA-256 over the canonical JSON of stage, format and both texts.
    pub fn request_digest(&self) -> String {
        let canonical = serde_json::json!({
            "format": self.rule_format,
            "stage": self.stage,
            "system": self.system_text,
            "user": self.user_text,
        });
        crate::digest::sha256_hex(canonical.to_string().as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlmResponse {
    pub text: String,
    pub backend_id: String,
    pub request_digest: String,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_depends_on_every_field() {
        let p = Prompt {
            system_text: "s".into(),
            user_text: "u".into(),
            stage: Stage::Craft,
            rule_format: RuleFormat::Yara,
            few_shot: String::new(),
        };
        let d = p.request_digest();
        assert_eq!(d, p.clone().request_digest());
        assert_eq!(d.len(), 64);
        let mut q = p.clone();
        q.stage = Stage::Refine;
        assert_ne!(q.request_digest(), d);
        let mut q = p.clone();
        q.rule_format = RuleFormat::Semgrep;
        assert_ne!(q.request_digest(), d);
        let mut q = p;
        q.user_text.push(' ');
        assert_ne!(q.request_digest(), d);
    }
}
