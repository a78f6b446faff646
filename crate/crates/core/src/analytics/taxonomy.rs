use std::collections::{BTreeSet, HashSet};
use std::path::Path;

use regex::{Regex, RegexBuilder};
use serde::Deserialize;

use super::AnalyticsError;
use crate::rule::{Rule, TaxonomyTag};

pub const DEFAULT_TAXONOMY: &str = include_str!("../../data/taxonomy.toml");

#[derive(Debug, Deserialize)]
struct TaxonomyFile {
    #[serde(default)]
    version: u32,
    #[serde(default)]
    heuristic: bool,
    fallback: FallbackEntry,
    category: Vec<CategoryEntry>,
}

#[derive(Debug, Deserialize)]
struct FallbackEntry {
    category: String,
    subcategory: String,
}

#[derive(Debug, Deserialize)]
struct CategoryEntry {
    name: String,
    subcategory: Vec<SubcategoryEntry>,
}

#[derive(Debug, Deserialize)]
struct SubcategoryEntry {
    name: String,
    #[serde(default)]
    keywords: Vec<String>,
    #[serde(default)]
    patterns: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Subcategory {
    pub name: String,
    /// Lowercased.
    pub keywords: Vec<String>,
    pub patterns: Vec<Regex>,
}

#[derive(Debug, Clone)]
pub struct Category {
    pub name: String,
    pub subcategories: Vec<Subcategory>,
}

/// Keyword classifier for rules. Categories keep file order.
#[derive(Debug, Clone)]
pub struct Taxonomy {
    pub version: u32,
    pub heuristic: bool,
    pub categories: Vec<Category>,
    pub fallback: TaxonomyTag,
}

impl Taxonomy {
    pub fn parse(text: &str) -> Result<Self, AnalyticsError> {
        let bad = |m: String| AnalyticsError::BadTaxonomyFile(m);
        let file: TaxonomyFile = toml::from_str(text).map_err(|e| bad(e.to_string()))?;
        if file.category.is_empty() {
            return Err(bad("no categories".into()));
        }
        let mut seen_categories = HashSet::new();
        let mut categories = Vec::with_capacity(file.category.len());
        for c in file.category {
            if !seen_categories.insert(c.name.clone()) {
                return Err(bad(format!("duplicate category '{}'", c.name)));
            }
            if c.subcategory.is_empty() {
                return Err(bad(format!("category '{}' has no subcategories", c.name)));
            }
            let mut seen = HashSet::new();
            let mut subcategories = Vec::new();
            for s in c.subcategory {
                if !seen.insert(s.name.clone()) {
                    return Err(bad(format!(
                        "duplicate subcategory '{}' in '{}'",
                        s.name, c.name
                    )));
                }
                let patterns = s
                    .patterns
                    .iter()
                    .map(|p| {
                        RegexBuilder::new(p)
                            .case_insensitive(true)
                            .build()
                            .map_err(|e| bad(format!("'{}': bad pattern {p:?}: {e}", s.name)))
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                subcategories.push(Subcategory {
                    keywords: s
                        .keywords
                        .iter()
                        .map(|k| k.to_lowercase())
                        .filter(|k| !k.is_empty())
                        .collect(),
                    name: s.name,
                    patterns,
                });
            }
            categories.push(Category {
                name: c.name,
                subcategories,
            });
        }
        let fallback = TaxonomyTag {
            category: file.fallback.category,
            subcategory: file.fallback.subcategory,
        };
        let known = categories.iter().any(|c| {
            c.name == fallback.category
                && c.subcategories
                    .iter()
                    .any(|s| s.name == fallback.subcategory)
        });
        if !known {
            return Err(bad(format!(
                "fallback {} / {} is not in the table",
                fallback.category, fallback.subcategory
            )));
        }
        Ok(Self {
            version: file.version,
            heuristic: file.heuristic,
            categories,
            fallback,
        })
    }

    pub fn load(path: &Path) -> Result<Self, AnalyticsError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| AnalyticsError::BadTaxonomyFile(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn category_names(&self) -> Vec<&str> {
        self.categories.iter().map(|c| c.name.as_str()).collect()
    }

    pub fn subcategory_count(&self) -> usize {
        self.categories.iter().map(|c| c.subcategories.len()).sum()
    }

    /// Whether `tag` names a subcategory of its category.
    pub fn contains(&self, tag: &TaxonomyTag) -> bool {
        self.categories.iter().any(|c| {
            c.name == tag.category && c.subcategories.iter().any(|s| s.name == tag.subcategory)
        })
    }

    /// Every subcategory triggered by the text; the fallback when none is.
    pub fn classify_text(&self, text: &str) -> BTreeSet<TaxonomyTag> {
        let lower = text.to_lowercase();
        let mut tags = BTreeSet::new();
        for c in &self.categories {
            for s in &c.subcategories {
                let hit = s.keywords.iter().any(|k| lower.contains(k.as_str()))
                    || s.patterns.iter().any(|p| p.is_match(text));
                if hit {
                    tags.insert(TaxonomyTag {
                        category: c.name.clone(),
                        subcategory: s.name.clone(),
                    });
                }
            }
        }
        if tags.is_empty() {
            tags.insert(self.fallback.clone());
        }
        tags
    }
}

impl Default for Taxonomy {
    fn default() -> Self {
        Self::parse(DEFAULT_TAXONOMY).expect("shipped taxonomy parses")
    }
}

pub fn classify_rule(rule: &Rule, taxonomy: &Taxonomy) -> BTreeSet<TaxonomyTag> {
    taxonomy.classify_text(&rule.text)
}
