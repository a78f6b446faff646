//! Parsed rule model shared by the validator, matcher and analytics.

use std::collections::BTreeSet;
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::segmenter::FlagKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RuleFormat {
    Yara,
    Semgrep,
}

impl RuleFormat {
    pub fn extension(self) -> &'static str {
        match self {
            RuleFormat::Yara => "yar",
            RuleFormat::Semgrep => "yaml",
        }
    }

    /// Name used in prompts.
    pub fn display_name(self) -> &'static str {
        match self {
            RuleFormat::Yara => "YARA",
            RuleFormat::Semgrep => "Semgrep",
        }
    }

    pub fn from_path(path: &std::path::Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "yar" | "yara" => Some(RuleFormat::Yara),
            "yaml" | "yml" => Some(RuleFormat::Semgrep),
            _ => None,
        }
    }
}

impl fmt::Display for RuleFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RuleFormat::Yara => "yara",
            RuleFormat::Semgrep => "semgrep",
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub confidence: Option<f64>,
    pub maliciousness: Option<f64>,
    pub risk: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Cluster {
        id: usize,
    },
    Metadata {
        package: String,
        flags: Vec<FlagKind>,
    },
    Baseline {
        malware_group: usize,
        legit_group: usize,
    },
    External {
        source: String,
    },
    #[default]
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TaxonomyTag {
    pub category: String,
    pub subcategory: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    pub text: String,
    pub format: RuleFormat,
    /// YARA rule identifier or first Semgrep rule id.
    pub name: String,
    pub body: RuleBody,
    #[serde(default)]
    pub provenance: Provenance,
    #[serde(default)]
    pub scores: Scores,
    #[serde(default)]
    pub taxonomy_tags: BTreeSet<TaxonomyTag>,
    /// Fix attempts needed before the rule compiled.
    #[serde(default)]
    pub attempts: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "lowercase")]
pub enum RuleBody {
    Yara(YaraRule),
    Semgrep(SemgrepRuleSet),
}

// ---------------------------------------------------------------- YARA

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YaraRule {
    pub name: String,
    pub tags: Vec<String>,
    pub meta: Vec<(String, MetaValue)>,
    pub strings: Vec<StringDef>,
    pub condition: Condition,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MetaValue {
    Bool(bool),
    Int(i64),
    Str(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StringDef {
    /// Identifier without the leading `$`.
    pub id: String,
    pub pattern: StringPattern,
    pub modifiers: StringModifiers,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StringModifiers {
    pub nocase: bool,
    pub wide: bool,
    pub ascii: bool,
    pub fullword: bool,
    pub private: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum StringPattern {
    /// Unescaped bytes.
    Text {
        bytes: Vec<u8>,
    },
    Regex {
        source: String,
        case_insensitive: bool,
        dot_all: bool,
    },
    Hex {
        tokens: Vec<HexToken>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HexToken {
    Byte(u8),
    Wildcard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl CmpOp {
    pub fn apply(self, lhs: u64, rhs: u64) -> bool {
        match self {
            CmpOp::Eq => lhs == rhs,
            CmpOp::Ne => lhs != rhs,
            CmpOp::Lt => lhs < rhs,
            CmpOp::Le => lhs <= rhs,
            CmpOp::Gt => lhs > rhs,
            CmpOp::Ge => lhs >= rhs,
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            CmpOp::Eq => "==",
            CmpOp::Ne => "!=",
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Quantifier {
    All,
    Any,
    None,
    Count(u64),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum StringSet {
    Them,
    /// Identifiers without `$`; a trailing `*` is a prefix wildcard.
    Ids(Vec<String>),
}

impl StringSet {
    /// Expands against defined identifiers, preserving definition order.
    pub fn resolve<'a>(&self, defined: &'a [StringDef]) -> Vec<&'a str> {
        match self {
            StringSet::Them => defined.iter().map(|d| d.id.as_str()).collect(),
            StringSet::Ids(ids) => defined
                .iter()
                .map(|d| d.id.as_str())
                .filter(|id| ids.iter().any(|pat| id_matches(pat, id)))
                .collect(),
        }
    }
}

pub fn id_matches(pattern: &str, id: &str) -> bool {
    match pattern.strip_suffix('*') {
        Some(prefix) => id.starts_with(prefix),
        None => pattern == id,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Condition {
    Bool(bool),
    /// `$id`
    Str(String),
    /// `#id <op> n`
    Count {
        id: String,
        op: CmpOp,
        value: u64,
    },
    /// `filesize <op> n`
    Filesize {
        op: CmpOp,
        value: u64,
    },
    Of {
        quantifier: Quantifier,
        set: StringSet,
    },
    Not(Box<Condition>),
    And(Vec<Condition>),
    Or(Vec<Condition>),
}

impl Condition {
    /// Every `$id`/`#id` reference and set member, in order of appearance.
    pub fn references(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.collect_refs(&mut out);
        out
    }

    fn collect_refs<'a>(&'a self, out: &mut Vec<&'a str>) {
        match self {
            Condition::Str(id) | Condition::Count { id, .. } => out.push(id),
            Condition::Of {
                set: StringSet::Ids(ids),
                ..
            } => out.extend(ids.iter().map(String::as_str)),
            Condition::Not(c) => c.collect_refs(out),
            Condition::And(cs) | Condition::Or(cs) => cs.iter().for_each(|c| c.collect_refs(out)),
            _ => {}
        }
    }

    fn precedence(&self) -> u8 {
        match self {
            Condition::Or(_) => 0,
            Condition::And(_) => 1,
            Condition::Not(_) => 2,
            _ => 3,
        }
    }

    fn write_child(&self, child: &Condition, out: &mut String) {
        if child.precedence() <= self.precedence() && child.precedence() < 2 {
            out.push('(');
            child.write(out);
            out.push(')');
        } else {
            child.write(out);
        }
    }

    fn write(&self, out: &mut String) {
        match self {
            Condition::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
            Condition::Str(id) => {
                let _ = write!(out, "${id}");
            }
            Condition::Count { id, op, value } => {
                let _ = write!(out, "#{id} {} {value}", op.symbol());
            }
            Condition::Filesize { op, value } => {
                let _ = write!(out, "filesize {} {value}", op.symbol());
            }
            Condition::Of { quantifier, set } => {
                match quantifier {
                    Quantifier::All => out.push_str("all"),
                    Quantifier::Any => out.push_str("any"),
                    Quantifier::None => out.push_str("none"),
                    Quantifier::Count(n) => {
                        let _ = write!(out, "{n}");
                    }
                }
                out.push_str(" of ");
                match set {
                    StringSet::Them => out.push_str("them"),
                    StringSet::Ids(ids) => {
                        out.push('(');
                        for (i, id) in ids.iter().enumerate() {
                            if i > 0 {
                                out.push_str(", ");
                            }
                            out.push('$');
                            out.push_str(id);
                        }
                        out.push(')');
                    }
                }
            }
            Condition::Not(c) => {
                out.push_str("not ");
                if c.precedence() < 2 {
                    out.push('(');
                    c.write(out);
                    out.push(')');
                } else {
                    c.write(out);
                }
            }
            Condition::And(cs) | Condition::Or(cs) => {
                let sep = if matches!(self, Condition::And(_)) {
                    " and "
                } else {
                    " or "
                };
                for (i, c) in cs.iter().enumerate() {
                    if i > 0 {
                        out.push_str(sep);
                    }
                    self.write_child(c, out);
                }
            }
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = String::new();
        self.write(&mut s);
        f.write_str(&s)
    }
}

/// Escapes bytes for a YARA text string.
pub fn escape_yara_text(bytes: &[u8]) -> String {
    let mut out = String::new();
    for &b in bytes {
        match b {
            b'"' => out.push_str("\\\""),
            b'\\' => out.push_str("\\\\"),
            b'\n' => out.push_str("\\n"),
            b'\t' => out.push_str("\\t"),
            b'\r' => out.push_str("\\r"),
            0x20..=0x7e => out.push(b as char),
            _ => {
                let _ = write!(out, "\\x{b:02x}");
            }
        }
    }
    out
}

impl YaraRule {
    /// Canonical source text.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "rule {}", self.name);
        if !self.tags.is_empty() {
            let _ = write!(out, " : {}", self.tags.join(" "));
        }
        out.push_str("\n{\n    meta:\n");
        for (k, v) in &self.meta {
            let value = match v {
                MetaValue::Str(s) => format!("\"{}\"", escape_yara_text(s.as_bytes())),
                MetaValue::Int(i) => i.to_string(),
                MetaValue::Bool(b) => b.to_string(),
            };
            let _ = writeln!(out, "        {k} = {value}");
        }
        out.push_str("    strings:\n");
        for s in &self.strings {
            let pattern = match &s.pattern {
                StringPattern::Text { bytes } => format!("\"{}\"", escape_yara_text(bytes)),
                StringPattern::Regex {
                    source,
                    case_insensitive,
                    dot_all,
                } => format!(
                    "/{source}/{}{}",
                    if *case_insensitive { "i" } else { "" },
                    if *dot_all { "s" } else { "" }
                ),
                StringPattern::Hex { tokens } => {
                    let body: Vec<String> = tokens
                        .iter()
                        .map(|t| match t {
                            HexToken::Byte(b) => format!("{b:02X}"),
                            HexToken::Wildcard => "??".to_owned(),
                        })
                        .collect();
                    format!("{{ {} }}", body.join(" "))
                }
            };
            let _ = write!(out, "        ${} = {pattern}", s.id);
            let m = &s.modifiers;
            for (on, word) in [
                (m.nocase, "nocase"),
                (m.wide, "wide"),
                (m.ascii, "ascii"),
                (m.fullword, "fullword"),
                (m.private, "private"),
            ] {
                if on {
                    let _ = write!(out, " {word}");
                }
            }
            out.push('\n');
        }
        let _ = write!(out, "    condition:\n        {}\n}}\n", self.condition);
        out
    }
}

// ------------------------------------------------------------- Semgrep

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemgrepRuleSet {
    pub rules: Vec<SemgrepRule>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemgrepRule {
    pub id: String,
    pub message: String,
    pub languages: Vec<String>,
    pub severity: String,
    pub clause: PatternClause,
    #[serde(default)]
    pub metadata: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PatternClause {
    Pattern(String),
    Patterns(Vec<PatternItem>),
    PatternEither(Vec<PatternItem>),
    PatternRegex(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PatternItem {
    Pattern(String),
    PatternNot(String),
    PatternRegex(String),
    PatternNotRegex(String),
    PatternInside(String),
    PatternNotInside(String),
    PatternEither(Vec<PatternItem>),
    Patterns(Vec<PatternItem>),
    /// Keys the fallback matcher does not interpret (e.g. `metavariable-regex`).
    Other(String),
}

impl Rule {
    pub fn yara(&self) -> Option<&YaraRule> {
        match &self.body {
            RuleBody::Yara(y) => Some(y),
            RuleBody::Semgrep(_) => None,
        }
    }

    pub fn semgrep(&self) -> Option<&SemgrepRuleSet> {
        match &self.body {
            RuleBody::Semgrep(s) => Some(s),
            RuleBody::Yara(_) => None,
        }
    }

    /// Literal strings the rule searches for (YARA text strings, Semgrep
    /// pattern bodies). Used for taxonomy keywords and reports.
    pub fn pattern_strings(&self) -> Vec<String> {
        match &self.body {
            RuleBody::Yara(y) => y
                .strings
                .iter()
                .map(|s| match &s.pattern {
                    StringPattern::Text { bytes } => String::from_utf8_lossy(bytes).into_owned(),
                    StringPattern::Regex { source, .. } => source.clone(),
                    StringPattern::Hex { .. } => String::new(),
                })
                .collect(),
            RuleBody::Semgrep(set) => {
                fn items(list: &[PatternItem], out: &mut Vec<String>) {
                    for i in list {
                        match i {
                            PatternItem::Pattern(s)
                            | PatternItem::PatternRegex(s)
                            | PatternItem::PatternInside(s) => out.push(s.clone()),
                            PatternItem::PatternEither(l) | PatternItem::Patterns(l) => {
                                items(l, out)
                            }
                            _ => {}
                        }
                    }
                }
                let mut out = Vec::new();
                for r in &set.rules {
                    match &r.clause {
                        PatternClause::Pattern(s) | PatternClause::PatternRegex(s) => {
                            out.push(s.clone())
                        }
                        PatternClause::Patterns(l) | PatternClause::PatternEither(l) => {
                            items(l, &mut out)
                        }
                    }
                }
                out
            }
        }
    }
}
