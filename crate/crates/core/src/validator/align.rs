use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{compile_with, CompileError, ExternalCompilers};
use crate::llm::{build_fix_prompt, complete, parse_rule_output, LlmBackend, RuleDraft, Templates};
use crate::rule::{Provenance, Rule};

/// Fix prompts sent after the first failed compile.
pub const MAX_FIX_ATTEMPTS: u32 = 5;
/// Error lists the agent remembers.
pub const MEMORY_SIZE: usize = 2;

/// Short-term memory of the fix loop: the newest compile error lists and
/// the number of fix attempts spent.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AgentMemory {
    recent: VecDeque<Vec<CompileError>>,
    attempt: u32,
}

impl AgentMemory {
    pub fn new() -> Self {
        Self::default()
    }

    /// Stores one compile's errors, forgetting the oldest beyond [`MEMORY_SIZE`].
    pub fn remember(&mut self, errors: Vec<CompileError>) {
        self.recent.push_back(errors);
        while self.recent.len() > MEMORY_SIZE {
            self.recent.pop_front();
        }
    }

    pub fn recent(&self) -> Vec<Vec<CompileError>> {
        self.recent.iter().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.recent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.recent.is_empty()
    }

    pub fn attempt(&self) -> u32 {
        self.attempt
    }

    /// Claims the next fix attempt; false once the budget is spent.
    pub fn begin_attempt(&mut self) -> bool {
        if self.attempt >= MAX_FIX_ATTEMPTS {
            return false;
        }
        self.attempt += 1;
        true
    }
}

#[derive(Debug, Clone, Default)]
pub struct AlignConfig {
    pub templates: Templates,
    pub external: ExternalCompilers,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Error)]
#[error("rule still fails to compile after {attempts} fix attempts")]
pub struct AlignmentFailure {
    pub provenance: Provenance,
    pub attempts: u32,
    /// Every compile's errors, oldest first; not trimmed like the memory.
    pub history: Vec<Vec<CompileError>>,
    pub last_rule_text: String,
    /// Set when the backend itself failed.
    pub backend_error: Option<String>,
}

/// Compile, and on failure ask the model for a fix using the remembered
/// errors, until the rule compiles or [`MAX_FIX_ATTEMPTS`] fixes were tried.
#[allow(clippy::result_large_err)]
pub fn align_rule(
    draft: &RuleDraft,
    backend: &dyn LlmBackend,
    cfg: &AlignConfig,
) -> Result<Rule, AlignmentFailure> {
    let format = draft.rule_format;
    let mut text = draft.rule_text.clone();
    let mut scores = draft.scores;
    let mut memory = AgentMemory::new();
    let mut history = Vec::new();
    loop {
        let errors = match compile_with(&text, format, &cfg.external) {
            Ok(mut rule) => {
                rule.attempts = memory.attempt();
                rule.provenance = draft.provenance.clone();
                rule.scores = scores;
                return Ok(rule);
            }
            Err(errors) => errors,
        };
        history.push(errors.clone());
        memory.remember(errors);
        let fail = |attempts, history, last_rule_text, backend_error| AlignmentFailure {
            provenance: draft.provenance.clone(),
            attempts,
            history,
            last_rule_text,
            backend_error,
        };
        if !memory.begin_attempt() {
            return Err(fail(memory.attempt(), history, text, None));
        }
        let reply = build_fix_prompt(
            &draft.analysis_text,
            &text,
            &memory.recent(),
            format,
            &cfg.templates,
        )
        .and_then(|prompt| complete(&prompt, backend));
        let reply = match reply {
            Ok(r) => r,
            Err(e) => return Err(fail(memory.attempt(), history, text, Some(e.to_string()))),
        };
        match parse_rule_output(&reply, format) {
            Ok(fixed) => {
                text = fixed.rule_text;
                scores.confidence = scores.confidence.or(fixed.scores.confidence);
                scores.maliciousness = scores.maliciousness.or(fixed.scores.maliciousness);
                scores.risk = scores.risk.or(fixed.scores.risk);
            }
            Err(e) => log::debug!("fix reply without rule: {e}"),
        }
    }
}
