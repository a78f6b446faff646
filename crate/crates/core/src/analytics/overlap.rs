use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::rule::{Rule, RuleFormat};
use crate::textdist::similarity;

pub const DEFAULT_OVERLAP_THRESHOLD: f64 = 0.8;

/// Drops comments outside string literals, collapses whitespace runs to a
/// single space and lowercases.
pub fn normalize_rule_text(text: &str, format: RuleFormat) -> String {
    let stripped = match format {
        RuleFormat::Yara => strip_c_comments(text),
        RuleFormat::Semgrep => strip_hash_comments(text),
    };
    stripped
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

fn strip_c_comments(text: &str) -> String {
    let b = text.as_bytes();
    let mut out = Vec::with_capacity(b.len());
    let mut i = 0;
    while i < b.len() {
        match b[i] {
            b'"' => {
                let start = i;
                i += 1;
                while i < b.len() && b[i] != b'"' && b[i] != b'\n' {
                    i += if b[i] == b'\\' { 2 } else { 1 };
                }
                i = (i + 1).min(b.len());
                out.extend_from_slice(&b[start..i]);
            }
            b'/' if b.get(i + 1) == Some(&b'/') => {
                while i < b.len() && b[i] != b'\n' {
                    i += 1;
                }
            }
            b'/' if b.get(i + 1) == Some(&b'*') => {
                i += 2;
                while i < b.len() && !(b[i] == b'*' && b.get(i + 1) == Some(&b'/')) {
                    i += 1;
                }
                i = (i + 2).min(b.len());
                out.push(b' ');
            }
            c => {
                out.push(c);
                i += 1;
            }
        }
    }
    String::from_utf8_lossy(&out).into_owned()
}

fn strip_hash_comments(text: &str) -> String {
    text.lines()
        .map(|line| {
            let mut quote: Option<char> = None;
            let mut prev_space = true;
            for (i, c) in line.char_indices() {
                match quote {
                    Some(q) if c == q => quote = None,
                    Some(_) => {}
                    None if c == '"' || c == '\'' => quote = Some(c),
                    None if c == '#' && prev_space => return &line[..i],
                    None => {}
                }
                prev_space = c.is_whitespace();
            }
            line
        })
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapPair {
    pub a: String,
    pub b: String,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub threshold: f64,
    pub set_a: usize,
    pub set_b: usize,
    /// Pairs at or above the threshold, in input order.
    pub pairs: Vec<OverlapPair>,
    /// Rules of set A with at least one overlapping partner.
    pub overlapping_a: usize,
    pub overlapping_b: usize,
}

pub fn rule_overlap(set_a: &[Rule], set_b: &[Rule], threshold: f64) -> OverlapReport {
    let norm_a: Vec<String> = set_a
        .iter()
        .map(|r| normalize_rule_text(&r.text, r.format))
        .collect();
    let norm_b: Vec<String> = set_b
        .iter()
        .map(|r| normalize_rule_text(&r.text, r.format))
        .collect();
    let hits: Vec<(usize, usize, f64)> = (0..set_a.len())
        .into_par_iter()
        .flat_map_iter(|i| {
            let a = &norm_a[i];
            norm_b
                .iter()
                .enumerate()
                .map(move |(j, b)| (i, j, similarity(a, b)))
                .filter(|&(_, _, s)| s >= threshold)
                .collect::<Vec<_>>()
        })
        .collect();
    let mut hit_a = vec![false; set_a.len()];
    let mut hit_b = vec![false; set_b.len()];
    let pairs = hits
        .into_iter()
        .map(|(i, j, s)| {
            hit_a[i] = true;
            hit_b[j] = true;
            OverlapPair {
                a: set_a[i].name.clone(),
                b: set_b[j].name.clone(),
                similarity: s,
            }
        })
        .collect();
    OverlapReport {
        threshold,
        set_a: set_a.len(),
        set_b: set_b.len(),
        pairs,
        overlapping_a: hit_a.iter().filter(|h| **h).count(),
        overlapping_b: hit_b.iter().filter(|h| **h).count(),
    }
}
