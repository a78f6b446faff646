//! Score-based rule generator used as a comparison point: candidate
//! strings from a malware group are ranked by isolation-forest, TF-IDF and
//! entropy scores, and the best ones fill a YARA template.

mod candidates;
mod iforest;

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use candidates::{
    extract_candidate_strings, MAX_LITERAL_BYTES, MAX_NGRAM, MIN_CANDIDATE_CHARS,
};
pub use iforest::{average_path_length, IsolationForest, DEFAULT_TREES, MAX_SUBSAMPLE};

use crate::corpus::SourceFile;
use crate::llm::render;
use crate::rule::{escape_yara_text, Provenance, Rule};
use crate::validator::{compile_yara, CompileError};

pub const DEFAULT_SCORE_THRESHOLD: f64 = 0.9;
pub const DEFAULT_SEED: u64 = 42;
pub const DEFAULT_TEMPLATE: &str = include_str!("../../templates/baseline.yar");

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("{0} group is empty")]
    EmptyGroup(&'static str),
    #[error("every candidate occurs in every document; no term carries signal")]
    DegenerateCorpus,
    #[error("no string scored at or above {threshold}")]
    NoSignal { threshold: f64 },
    #[error("template produced an invalid rule: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Template(Vec<CompileError>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    pub iso: f64,
    pub tfidf: f64,
    pub entropy: f64,
}

impl Default for Weights {
    fn default() -> Self {
        Self {
            iso: 1.2,
            tfidf: 1.0,
            entropy: 0.8,
        }
    }
}

impl Weights {
    /// Weighted sum divided by three.
    pub fn combine(&self, iso: f64, tfidf: f64, entropy: f64) -> f64 {
        (self.iso * iso + self.tfidf * tfidf + self.entropy * entropy) / 3.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    pub weights: Weights,
    pub threshold: f64,
    pub trees: usize,
    pub seed: u64,
    /// Template text; `{name}`, `{date}`, `{group}` and `{strings}` are filled in.
    #[serde(skip)]
    pub template: String,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            weights: Weights::default(),
            threshold: DEFAULT_SCORE_THRESHOLD,
            trees: DEFAULT_TREES,
            seed: DEFAULT_SEED,
            template: DEFAULT_TEMPLATE.to_owned(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredString {
    pub text: String,
    pub iso_score: f64,
    pub tfidf_score: f64,
    pub entropy_score: f64,
    pub combined: f64,
}

/// Shannon entropy of the characters, divided by `log2` of the number of
/// distinct characters.
pub fn entropy_score(s: &str) -> f64 {
    let mut counts = std::collections::BTreeMap::new();
    let mut total = 0usize;
    for c in s.chars() {
        *counts.entry(c).or_insert(0usize) += 1;
        total += 1;
    }
    if counts.len() < 2 {
        return 0.0;
    }
    let h: f64 = counts
        .values()
        .map(|&n| {
            let p = n as f64 / total as f64;
            -p * p.log2()
        })
        .sum();
    (h / (counts.len() as f64).log2()).clamp(0.0, 1.0)
}

/// Features the forest sees: length, entropy score, digit ratio and
/// punctuation ratio.
pub fn shape_features(s: &str) -> Vec<f64> {
    let n = s.chars().count().max(1) as f64;
    let digits = s.chars().filter(char::is_ascii_digit).count() as f64;
    let punct = s.chars().filter(char::is_ascii_punctuation).count() as f64;
    vec![
        s.chars().count() as f64,
        entropy_score(s),
        digits / n,
        punct / n,
    ]
}

/// Scores the given candidates. Documents are file texts; term frequency
/// counts occurrences in the malicious documents and document frequency
/// spans both groups.
pub fn score_candidates(
    candidates: &[String],
    malicious: &[&str],
    legitimate: &[&str],
    cfg: &BaselineConfig,
) -> Result<Vec<ScoredString>, BaselineError> {
    if malicious.is_empty() {
        return Err(BaselineError::EmptyGroup("malicious"));
    }
    if legitimate.is_empty() {
        return Err(BaselineError::EmptyGroup("legitimate"));
    }
    let unique: BTreeSet<&String> = candidates.iter().filter(|c| !c.is_empty()).collect();
    let terms: Vec<&String> = unique.into_iter().collect();
    if terms.is_empty() {
        return Ok(Vec::new());
    }
    let docs = malicious.len() + legitimate.len();
    let raw: Vec<f64> = terms
        .par_iter()
        .map(|t| {
            let tf: usize = malicious
                .iter()
                .map(|d| d.matches(t.as_str()).count())
                .sum();
            let df = malicious
                .iter()
                .chain(legitimate)
                .filter(|d| d.contains(t.as_str()))
                .count();
            let idf = if df == 0 {
                0.0
            } else {
                (docs as f64 / df as f64).ln()
            };
            tf as f64 * idf
        })
        .collect();
    let max = raw.iter().copied().fold(0.0, f64::max);
    if max <= 0.0 {
        return Err(BaselineError::DegenerateCorpus);
    }
    let features: Vec<Vec<f64>> = terms.iter().map(|t| shape_features(t)).collect();
    let forest = IsolationForest::fit(&features, cfg.trees, cfg.seed);
    Ok(terms
        .iter()
        .zip(raw)
        .zip(&features)
        .map(|((t, r), f)| {
            let iso_score = forest.score(f);
            let tfidf_score = r / max;
            let entropy_score = f[1];
            ScoredString {
                text: (*t).clone(),
                iso_score,
                tfidf_score,
                entropy_score,
                combined: cfg.weights.combine(iso_score, tfidf_score, entropy_score),
            }
        })
        .collect())
}

/// Candidates from the malicious files, scored against both groups.
pub fn score_strings(
    malicious: &[SourceFile],
    legitimate: &[SourceFile],
    cfg: &BaselineConfig,
) -> Result<Vec<ScoredString>, BaselineError> {
    let candidates = extract_candidate_strings(malicious);
    let mal: Vec<&str> = malicious.iter().map(|f| f.content.as_str()).collect();
    let legit: Vec<&str> = legitimate.iter().map(|f| f.content.as_str()).collect();
    score_candidates(&candidates, &mal, &legit, cfg)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleMeta {
    pub name: String,
    pub group_id: String,
    pub date: String,
}

/// Fills the template with every string at or above `threshold`, highest
/// combined score first, as `$s0..$sN`.
pub fn generate_baseline_rule(
    scored: &[ScoredString],
    threshold: f64,
    template: &str,
    meta: &RuleMeta,
) -> Result<Rule, BaselineError> {
    let mut picked: Vec<&ScoredString> =
        scored.iter().filter(|s| s.combined >= threshold).collect();
    if picked.is_empty() {
        return Err(BaselineError::NoSignal { threshold });
    }
    picked.sort_by(|a, b| {
        b.combined
            .total_cmp(&a.combined)
            .then_with(|| a.text.cmp(&b.text))
    });
    let strings: Vec<String> = picked
        .iter()
        .enumerate()
        .map(|(i, s)| {
            format!(
                "        $s{i} = \"{}\"",
                escape_yara_text(s.text.as_bytes())
            )
        })
        .collect();
    let text = render(
        template,
        &[
            ("name", meta.name.as_str()),
            ("date", meta.date.as_str()),
            ("group", meta.group_id.as_str()),
            ("strings", strings.join("\n").as_str()),
        ],
    );
    compile_yara(&text).map_err(BaselineError::Template)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedPair {
    pub malware_group: usize,
    pub legit_group: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BaselineOutcome {
    pub rules: Vec<Rule>,
    pub skipped: Vec<SkippedPair>,
}

/// One rule per (malware group, legitimate group) pair.
pub fn run_pairs(
    malware_groups: &[Vec<SourceFile>],
    legit_groups: &[Vec<SourceFile>],
    cfg: &BaselineConfig,
    date: &str,
) -> BaselineOutcome {
    let pairs: Vec<(usize, usize)> = (0..malware_groups.len())
        .flat_map(|m| (0..legit_groups.len()).map(move |l| (m, l)))
        .collect();
    let results: Vec<((usize, usize), Result<Rule, BaselineError>)> = pairs
        .par_iter()
        .map(|&(m, l)| {
            let meta = RuleMeta {
                name: format!("baseline_m{m}_l{l}"),
                group_id: format!("m{m}-l{l}"),
                date: date.to_owned(),
            };
            let rule = score_strings(&malware_groups[m], &legit_groups[l], cfg)
                .and_then(|scored| {
                    generate_baseline_rule(&scored, cfg.threshold, &cfg.template, &meta)
                })
                .map(|mut r| {
                    r.provenance = Provenance::Baseline {
                        malware_group: m,
                        legit_group: l,
                    };
                    r
                });
            ((m, l), rule)
        })
        .collect();
    let mut out = BaselineOutcome::default();
    for ((m, l), r) in results {
        match r {
            Ok(rule) => out.rules.push(rule),
            Err(e) => out.skipped.push(SkippedPair {
                malware_group: m,
                legit_group: l,
                reason: e.to_string(),
            }),
        }
    }
    out
}
