//! Evaluation reports: confusion metrics, per-rule precision, coverage and
//! score distributions, rule-set overlap and taxonomy breakdowns.

mod overlap;
mod taxonomy;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use overlap::{
    normalize_rule_text, rule_overlap, OverlapPair, OverlapReport, DEFAULT_OVERLAP_THRESHOLD,
};
pub use taxonomy::{classify_rule, Category, Subcategory, Taxonomy, DEFAULT_TAXONOMY};

use crate::corpus::Label;
use crate::matcher::{PackageVerdict, RuleTally};
use crate::rule::{Rule, TaxonomyTag};

#[derive(Debug, Error)]
pub enum AnalyticsError {
    #[error("no verdicts to evaluate")]
    EmptyInput,
    #[error("package '{0}' has no ground-truth label")]
    Unlabeled(String),
    #[error("bad taxonomy file: {0}")]
    BadTaxonomyFile(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub accuracy: f64,
    /// `None` when nothing was predicted positive.
    pub precision: Option<f64>,
    /// `None` when there are no positives.
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

impl Metrics {
    pub fn from_counts(tp: u64, fp: u64, tn: u64, fn_: u64) -> Result<Self, AnalyticsError> {
        let total = tp + fp + tn + fn_;
        if total == 0 {
            return Err(AnalyticsError::EmptyInput);
        }
        let ratio = |n: u64, d: u64| (d > 0).then(|| n as f64 / d as f64);
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = match (precision, recall) {
            (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
            (Some(_), Some(_)) => Some(0.0),
            _ => None,
        };
        Ok(Self {
            tp,
            fp,
            tn,
            fn_,
            accuracy: (tp + tn) as f64 / total as f64,
            precision,
            recall,
            f1,
        })
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// Accuracy, precision, recall and F1 as percentages with one decimal;
    /// undefined values print as `null`.
    pub fn percent_row(&self) -> [String; 4] {
        let pct =
            |v: Option<f64>| v.map_or_else(|| "null".to_owned(), |x| format!("{:.1}", x * 100.0));
        [
            pct(Some(self.accuracy)),
            pct(self.precision),
            pct(self.recall),
            pct(self.f1),
        ]
    }
}

pub fn confusion_metrics(verdicts: &[PackageVerdict]) -> Result<Metrics, AnalyticsError> {
    if verdicts.is_empty() {
        return Err(AnalyticsError::EmptyInput);
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for v in verdicts {
        match (v.label, v.predicted) {
            (Label::Unknown, _) => return Err(AnalyticsError::Unlabeled(v.package.clone())),
            (Label::Malicious, true) => tp += 1,
            (Label::Legitimate, true) => fp += 1,
            (Label::Legitimate, false) => tn += 1,
            (Label::Malicious, false) => fn_ += 1,
        }
    }
    Metrics::from_counts(tp, fp, tn, fn_)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RulePrecision {
    pub rule_id: String,
    /// Malicious share of labeled matches; `None` when only unlabeled
    /// packages matched.
    pub precision: Option<f64>,
    pub matched_count: usize,
    pub malicious: usize,
    pub legitimate: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lower: f64,
    pub upper: f64,
    pub rules: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecisionReport {
    pub rules: Vec<RulePrecision>,
    /// Rules that matched no package at all.
    pub unmatched: Vec<String>,
    /// Ten bins of width 0.1; the last includes 1.0.
    pub histogram: Vec<HistogramBin>,
}

pub fn per_rule_precision(tallies: &[RuleTally]) -> PrecisionReport {
    let mut rules = Vec::new();
    let mut unmatched = Vec::new();
    let mut bins = [0usize; 10];
    for t in tallies {
        if t.matched_count() == 0 {
            unmatched.push(t.rule_id.clone());
            continue;
        }
        let (m, l) = (t.malicious.len(), t.legitimate.len());
        let precision = (m + l > 0).then(|| m as f64 / (m + l) as f64);
        if let Some(p) = precision {
            bins[((p * 10.0).floor() as usize).min(9)] += 1;
        }
        rules.push(RulePrecision {
            rule_id: t.rule_id.clone(),
            precision,
            matched_count: t.matched_count(),
            malicious: m,
            legitimate: l,
        });
    }
    let histogram = bins
        .iter()
        .enumerate()
        .map(|(i, &n)| HistogramBin {
            lower: i as f64 / 10.0,
            upper: (i + 1) as f64 / 10.0,
            rules: n,
        })
        .collect();
    PrecisionReport {
        rules,
        unmatched,
        histogram,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CdfPoint {
    pub x: f64,
    /// Fraction of values at or below `x`.
    pub y: f64,
}

/// Empirical CDF at each distinct value.
pub fn empirical_cdf(values: &[f64]) -> Vec<CdfPoint> {
    let mut sorted: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut out: Vec<CdfPoint> = Vec::new();
    for (i, &x) in sorted.iter().enumerate() {
        let y = (i + 1) as f64 / n;
        match out.last_mut() {
            Some(last) if last.x == x => last.y = y,
            _ => out.push(CdfPoint { x, y }),
        }
    }
    out
}

/// CDF of how many distinct malicious packages each rule detects.
pub fn coverage_cdf(match_counts: &[usize]) -> Vec<CdfPoint> {
    empirical_cdf(&match_counts.iter().map(|&c| c as f64).collect::<Vec<_>>())
}

/// Per-rule malicious-package coverage, in tally order.
pub fn coverage_counts(tallies: &[RuleTally]) -> Vec<usize> {
    tallies.iter().map(|t| t.malicious.len()).collect()
}

pub fn cdf_csv(points: &[CdfPoint], x_name: &str) -> Result<String, AnalyticsError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([x_name, "cumulative_fraction"])?;
    for p in points {
        w.write_record([format_number(p.x), format!("{:.6}", p.y)])?;
    }
    Ok(finish(w))
}

fn format_number(x: f64) -> String {
    if x.fract() == 0.0 && x.abs() < 1e15 {
        format!("{}", x as i64)
    } else {
        format!("{x:.6}")
    }
}

fn finish(w: csv::Writer<Vec<u8>>) -> String {
    String::from_utf8(w.into_inner().expect("in-memory writer")).expect("utf-8 csv")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreCdfs {
    pub maliciousness: Vec<CdfPoint>,
    pub risk: Vec<CdfPoint>,
    pub confidence: Vec<CdfPoint>,
    /// Rules without the score, per score.
    pub missing_maliciousness: usize,
    pub missing_risk: usize,
    pub missing_confidence: usize,
}

pub fn score_cdf(rules: &[Rule]) -> ScoreCdfs {
    let pick = |f: fn(&Rule) -> Option<f64>| {
        let present: Vec<f64> = rules.iter().filter_map(f).collect();
        let missing = rules.len() - present.len();
        (empirical_cdf(&present), missing)
    };
    let (maliciousness, missing_maliciousness) = pick(|r| r.scores.maliciousness);
    let (risk, missing_risk) = pick(|r| r.scores.risk);
    let (confidence, missing_confidence) = pick(|r| r.scores.confidence);
    ScoreCdfs {
        maliciousness,
        risk,
        confidence,
        missing_maliciousness,
        missing_risk,
        missing_confidence,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Heatmap {
    pub categories: Vec<String>,
    /// `matrix[i][j]`: rules tagged with both categories.
    pub matrix: Vec<Vec<usize>>,
}

pub fn category_heatmap(tags: &[BTreeSet<TaxonomyTag>], categories: &[&str]) -> Heatmap {
    let n = categories.len();
    let mut matrix = vec![vec![0usize; n]; n];
    for set in tags {
        let present: BTreeSet<usize> = set
            .iter()
            .filter_map(|t| categories.iter().position(|c| *c == t.category))
            .collect();
        for &i in &present {
            for &j in &present {
                matrix[i][j] += 1;
            }
        }
    }
    Heatmap {
        categories: categories.iter().map(|c| c.to_string()).collect(),
        matrix,
    }
}

impl Heatmap {
    pub fn to_csv(&self) -> Result<String, AnalyticsError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["category".to_owned()];
        header.extend(self.categories.iter().cloned());
        w.write_record(&header)?;
        for (name, row) in self.categories.iter().zip(&self.matrix) {
            let mut rec = vec![name.clone()];
            rec.extend(row.iter().map(ToString::to_string));
            w.write_record(&rec)?;
        }
        Ok(finish(w))
    }
}

/// Rules per (category, subcategory), in taxonomy order, including zeros.
pub fn subcategory_counts(
    tags: &[BTreeSet<TaxonomyTag>],
    taxonomy: &Taxonomy,
) -> Vec<(TaxonomyTag, usize)> {
    let mut counts: BTreeMap<&TaxonomyTag, usize> = BTreeMap::new();
    for set in tags {
        for t in set {
            *counts.entry(t).or_default() += 1;
        }
    }
    taxonomy
        .categories
        .iter()
        .flat_map(|c| {
            c.subcategories.iter().map(|s| TaxonomyTag {
                category: c.name.clone(),
                subcategory: s.name.clone(),
            })
        })
        .map(|t| {
            let n = counts.get(&t).copied().unwrap_or(0);
            (t, n)
        })
        .collect()
}

pub fn subcategory_csv(rows: &[(TaxonomyTag, usize)]) -> Result<String, AnalyticsError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["category", "subcategory", "rules"])?;
    for (t, n) in rows {
        w.write_record([t.category.as_str(), t.subcategory.as_str(), &n.to_string()])?;
    }
    Ok(finish(w))
}

pub fn precision_csv(report: &PrecisionReport) -> Result<String, AnalyticsError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "rule_id",
        "precision",
        "matched_packages",
        "malicious",
        "legitimate",
    ])?;
    for r in &report.rules {
        w.write_record([
            r.rule_id.clone(),
            r.precision
                .map_or_else(|| "null".into(), |p| format!("{p:.6}")),
            r.matched_count.to_string(),
            r.malicious.to_string(),
            r.legitimate.to_string(),
        ])?;
    }
    for id in &report.unmatched {
        w.write_record([id.as_str(), "unmatched", "0", "0", "0"])?;
    }
    Ok(finish(w))
}

#[cfg(test)]
mod tests;
