use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::PackageMetadata;
use crate::textdist::levenshtein;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlagKind {
    EmptyInformation,
    ReleaseZero,
    Typosquatting,
    MaliciousDependency,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MetadataFlag {
    pub kind: FlagKind,
    pub evidence: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AuditConfig {
    pub typo_max_distance: usize,
    pub typo_min_len: usize,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self {
            typo_max_distance: 2,
            typo_min_len: 4,
        }
    }
}

/// Starter lists shipped with the crate.
pub const DEFAULT_POPULAR: &str = include_str!("../../data/popular_packages.txt");
pub const DEFAULT_DENYLIST: &str = include_str!("../../data/dependency_denylist.txt");

/// Newline-delimited names; blank lines and `#` comments skipped.
pub fn parse_name_list(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_owned)
        .collect()
}

pub fn load_name_list(path: &Path) -> std::io::Result<Vec<String>> {
    Ok(parse_name_list(&std::fs::read_to_string(path)?))
}

fn normalize_name(name: &str) -> String {
    name.trim().to_ascii_lowercase().replace('_', "-")
}

/// `v0.0.0` -> true, `0.1` -> false, `0.0a` -> false.
pub fn is_release_zero(version: &str) -> bool {
    let v = version.trim();
    let v = v.strip_prefix(['v', 'V']).unwrap_or(v);
    if v.is_empty() {
        return false;
    }
    v.split('.')
        .all(|part| !part.is_empty() && part.bytes().all(|b| b == b'0'))
}

/// Flags suspicious metadata. The result is a sorted set.
pub fn audit_metadata(
    meta: &PackageMetadata,
    popular: &[String],
    denylist: &[String],
    cfg: &AuditConfig,
) -> Vec<MetadataFlag> {
    let mut flags = BTreeSet::new();
    if meta.description.trim().is_empty() {
        flags.insert(MetadataFlag {
            kind: FlagKind::EmptyInformation,
            evidence: "description is empty".to_owned(),
        });
    }
    if is_release_zero(&meta.version) {
        flags.insert(MetadataFlag {
            kind: FlagKind::ReleaseZero,
            evidence: format!("version {:?} has only zero components", meta.version),
        });
    }
    let name = normalize_name(&meta.name);
    if name.chars().count() >= cfg.typo_min_len {
        let closest = popular
            .iter()
            .map(|p| normalize_name(p))
            .filter(|p| *p != name)
            .map(|p| (levenshtein(&name, &p), p))
            .filter(|(d, _)| *d <= cfg.typo_max_distance)
            .min();
        if !popular.iter().any(|p| normalize_name(p) == name) {
            if let Some((d, target)) = closest {
                flags.insert(MetadataFlag {
                    kind: FlagKind::Typosquatting,
                    evidence: format!(
                        "name {:?} is {d} edit(s) from popular package {target:?}",
                        meta.name
                    ),
                });
            }
        }
    }
    let deny: BTreeSet<String> = denylist.iter().map(|d| normalize_name(d)).collect();
    for dep in &meta.dependencies {
        if deny.contains(&normalize_name(&dep.name)) {
            flags.insert(MetadataFlag {
                kind: FlagKind::MaliciousDependency,
                evidence: format!("depends on denylisted package {:?}", dep.name),
            });
        }
    }
    flags.into_iter().collect()
}
