//! Detection-rule synthesis for malicious open-source packages.
//!
//! The crate walks a corpus of package archives through a fixed set of
//! stages: unpack and describe each package ([`corpus`]), cut sources into
//! token segments and self-contained code blocks ([`segmenter`]), embed and
//! group similar blocks ([`embedding`], [`clusterer`]), have a language model
//! draft, refine and repair YARA or Semgrep rules ([`llm`], [`validator`]),
//! then scan the corpus with the result ([`matcher`]) and report on it
//! ([`analytics`]). A score-based generator ([`baseline`]) provides the
//! comparison point. [`cli`] wires the stages to run directories.

pub mod analytics;
pub mod baseline;
pub mod cli;
pub mod clusterer;
pub mod corpus;
pub mod digest;
pub mod embedding;
pub mod llm;
pub mod matcher;
pub mod rule;
pub use rule::{Rule, RuleFormat};
pub mod segmenter;
#[cfg(test)]
mod testutil;
pub mod textdist;
pub mod validator;
