//! Runs compiled rules over package files and turns per-package match
//! counts into verdicts.

mod semgrep;
mod yara;

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use self::semgrep::language_matches;
pub use self::yara::{evaluate, EvalContext, Timeout};
use self::yara::{CompiledYara, Deadline};
use crate::corpus::{Label, PackageRecord, SourceFile};
use crate::rule::{Rule, RuleBody, RuleFormat, SemgrepRuleSet};
use crate::validator::ExternalTool;

/// Per-(rule, file) time budget.
pub const DEFAULT_BUDGET_MS: u64 = 2_000;
/// Matched-rule count at which a package is predicted malicious.
pub const DEFAULT_THRESHOLD: usize = 1;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MatchResult {
    pub rule_id: String,
    pub package: String,
    pub file: String,
    /// Byte offsets for YARA, 1-based line numbers for Semgrep.
    pub offsets: Vec<usize>,
    /// Produced by the Semgrep fallback matcher.
    pub approximate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IssueKind {
    EngineTimeout,
    ExternalFailure,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ScanIssue {
    pub kind: IssueKind,
    pub rule_id: String,
    pub package: String,
    pub file: String,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatcherConfig {
    pub budget_ms: u64,
    /// Semgrep binary; `{config}` and `{target}` are substituted in args.
    pub semgrep: Option<ExternalTool>,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        Self {
            budget_ms: DEFAULT_BUDGET_MS,
            semgrep: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackageVerdict {
    pub package: String,
    pub matched_rules: BTreeSet<String>,
    pub matched_count: usize,
    pub predicted: bool,
    pub label: Label,
}

impl PackageVerdict {
    pub fn new(
        package: String,
        matched_rules: BTreeSet<String>,
        label: Label,
        threshold: usize,
    ) -> Self {
        let matched_count = matched_rules.len();
        Self {
            package,
            matched_rules,
            matched_count,
            predicted: matched_count >= threshold,
            label,
        }
    }
}

/// Which packages a rule matched, split by ground truth.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleTally {
    pub rule_id: String,
    pub format: Option<RuleFormat>,
    pub malicious: BTreeSet<String>,
    pub legitimate: BTreeSet<String>,
    pub unlabeled: BTreeSet<String>,
}

impl RuleTally {
    pub fn matched_count(&self) -> usize {
        self.malicious.len() + self.legitimate.len() + self.unlabeled.len()
    }

    fn add(&mut self, package: &str, label: Label) {
        let set = match label {
            Label::Malicious => &mut self.malicious,
            Label::Legitimate => &mut self.legitimate,
            Label::Unknown => &mut self.unlabeled,
        };
        set.insert(package.to_owned());
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileScan {
    pub matches: Vec<MatchResult>,
    pub issues: Vec<ScanIssue>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanReport {
    pub threshold: usize,
    /// Sorted by package name.
    pub verdicts: Vec<PackageVerdict>,
    /// One per rule, sorted by rule id.
    pub tallies: Vec<RuleTally>,
    pub matches: Vec<MatchResult>,
    pub issues: Vec<ScanIssue>,
    /// Some Semgrep result came from the fallback matcher.
    pub approximate: bool,
}

impl ScanReport {
    /// Verdicts recomputed for another threshold.
    pub fn verdicts_at(&self, threshold: usize) -> Vec<PackageVerdict> {
        self.verdicts
            .iter()
            .map(|v| {
                PackageVerdict::new(
                    v.package.clone(),
                    v.matched_rules.clone(),
                    v.label,
                    threshold,
                )
            })
            .collect()
    }

    /// Findings as JSON lines, one match per line.
    pub fn write_findings<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for m in &self.matches {
            serde_json::to_writer(&mut out, m)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

enum Engine {
    Yara(CompiledYara),
    Semgrep(SemgrepRuleSet),
}

struct CompiledRule {
    id: String,
    format: RuleFormat,
    text: String,
    engine: Engine,
}

pub struct Matcher {
    rules: Vec<CompiledRule>,
    config: MatcherConfig,
}

impl Matcher {
    /// Prepares compiled rules. Repeated names get `_2`, `_3`, ... suffixes.
    pub fn new(rules: &[Rule], config: MatcherConfig) -> Self {
        let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
        let rules = rules
            .iter()
            .map(|r| {
                let n = seen.entry(r.name.as_str()).or_default();
                *n += 1;
                let id = if *n == 1 {
                    r.name.clone()
                } else {
                    log::warn!("duplicate rule name {}; scanning as {}_{n}", r.name, r.name);
                    format!("{}_{n}", r.name)
                };
                let engine = match &r.body {
                    RuleBody::Yara(y) => Engine::Yara(CompiledYara::new(y)),
                    RuleBody::Semgrep(s) => Engine::Semgrep(s.clone()),
                };
                CompiledRule {
                    id,
                    format: r.format,
                    text: r.text.clone(),
                    engine,
                }
            })
            .collect();
        Self { rules, config }
    }

    pub fn rule_ids(&self) -> impl Iterator<Item = &str> {
        self.rules.iter().map(|r| r.id.as_str())
    }

    fn deadline(&self) -> Deadline {
        Deadline(Instant::now().checked_add(Duration::from_millis(self.config.budget_ms)))
    }

    pub fn scan_file(&self, package: &str, file: &SourceFile) -> FileScan {
        let hay = file.content.as_bytes();
        let lower = hay.to_ascii_lowercase();
        let mut scan = FileScan::default();
        for rule in &self.rules {
            let deadline = self.deadline();
            let issue = |kind, detail: String| ScanIssue {
                kind,
                rule_id: rule.id.clone(),
                package: package.to_owned(),
                file: file.relative_path.clone(),
                detail,
            };
            let (outcome, approximate) = match &rule.engine {
                Engine::Yara(y) => (y.scan(hay, &lower, &deadline).map(|o| o.map(Ok)), false),
                Engine::Semgrep(set) => match &self.config.semgrep {
                    Some(tool) => {
                        let languages: Vec<String> =
                            set.rules.iter().flat_map(|r| r.languages.clone()).collect();
                        let lines = if language_matches(&languages, &file.relative_path) {
                            semgrep::external_scan(
                                tool,
                                &rule.text,
                                &file.relative_path,
                                &file.content,
                            )
                        } else {
                            Ok(Vec::new())
                        };
                        (Ok(Some(lines)), false)
                    }
                    None => (
                        semgrep::fallback_set(set, &file.relative_path, &file.content, &deadline)
                            .map(|l| Some(Ok(l))),
                        true,
                    ),
                },
            };
            match outcome {
                Err(Timeout) => scan.issues.push(issue(
                    IssueKind::EngineTimeout,
                    format!("exceeded {} ms budget", self.config.budget_ms),
                )),
                Ok(Some(Err(detail))) => {
                    scan.issues.push(issue(IssueKind::ExternalFailure, detail))
                }
                Ok(Some(Ok(offsets))) if rule.format == RuleFormat::Yara || !offsets.is_empty() => {
                    scan.matches.push(MatchResult {
                        rule_id: rule.id.clone(),
                        package: package.to_owned(),
                        file: file.relative_path.clone(),
                        offsets,
                        approximate,
                    })
                }
                Ok(_) => {}
            }
        }
        scan
    }

    fn scan_package(&self, pkg: &PackageRecord) -> FileScan {
        let mut out = FileScan::default();
        for file in &pkg.files {
            let scan = self.scan_file(pkg.name(), file);
            out.matches.extend(scan.matches);
            out.issues.extend(scan.issues);
        }
        out
    }

    pub fn scan_corpus(&self, packages: &[PackageRecord], threshold: usize) -> ScanReport {
        let scans: Vec<(&PackageRecord, FileScan)> = packages
            .par_iter()
            .map(|p| (p, self.scan_package(p)))
            .collect();
        let mut tallies: BTreeMap<&str, RuleTally> = self
            .rules
            .iter()
            .map(|r| {
                (
                    r.id.as_str(),
                    RuleTally {
                        rule_id: r.id.clone(),
                        format: Some(r.format),
                        ..Default::default()
                    },
                )
            })
            .collect();
        let mut verdicts = Vec::with_capacity(scans.len());
        let mut matches = Vec::new();
        let mut issues = Vec::new();
        for (pkg, scan) in scans {
            let matched: BTreeSet<String> =
                scan.matches.iter().map(|m| m.rule_id.clone()).collect();
            for id in &matched {
                if let Some(t) = tallies.get_mut(id.as_str()) {
                    t.add(pkg.name(), pkg.label);
                }
            }
            verdicts.push(PackageVerdict::new(
                pkg.name().to_owned(),
                matched,
                pkg.label,
                threshold,
            ));
            matches.extend(scan.matches);
            issues.extend(scan.issues);
        }
        verdicts.sort_by(|a, b| a.package.cmp(&b.package));
        matches.sort();
        issues.sort();
        let approximate = matches.iter().any(|m| m.approximate)
            || (self.config.semgrep.is_none()
                && self.rules.iter().any(|r| r.format == RuleFormat::Semgrep));
        ScanReport {
            threshold,
            verdicts,
            tallies: tallies.into_values().collect(),
            matches,
            issues,
            approximate,
        }
    }
}

/// Scans one file with the default configuration.
pub fn scan_file(rules: &[Rule], package: &str, file: &SourceFile) -> Vec<MatchResult> {
    Matcher::new(rules, MatcherConfig::default())
        .scan_file(package, file)
        .matches
}

/// Scans a corpus with the default configuration.
pub fn scan_corpus(rules: &[Rule], packages: &[PackageRecord], threshold: usize) -> ScanReport {
    Matcher::new(rules, MatcherConfig::default()).scan_corpus(packages, threshold)
}

#[cfg(test)]
mod tests;
