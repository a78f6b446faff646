//! Structural checker for Semgrep rule files.

use std::collections::BTreeSet;

use serde_yaml::Value;

use super::messages as msg;
use super::{CompileError, ErrorCode};
use crate::rule::{
    PatternClause, PatternItem, Rule, RuleBody, RuleFormat, SemgrepRule, SemgrepRuleSet,
};
use crate::segmenter::{tokenize, Lexicon};

const SEVERITIES: &[&str] = &["INFO", "WARNING", "ERROR", "INVENTORY", "EXPERIMENT"];

const LANGUAGES: &[&str] = &[
    "python",
    "python2",
    "python3",
    "py",
    "javascript",
    "js",
    "typescript",
    "ts",
    "json",
    "yaml",
    "generic",
    "regex",
    "bash",
    "sh",
    "go",
    "java",
    "c",
    "cpp",
    "ruby",
    "php",
    "rust",
    "dockerfile",
    "html",
];

const TOP_CLAUSES: &[&str] = &["pattern", "patterns", "pattern-either", "pattern-regex"];

/// Compiles a Semgrep pattern-regex. Semgrep uses PCRE, so lookaround and
/// backreferences are accepted.
#[allow(clippy::result_large_err)]
pub fn build_pattern_regex(source: &str) -> Result<fancy_regex::Regex, fancy_regex::Error> {
    fancy_regex::RegexBuilder::new(source)
        .backtrack_limit(1_000_000)
        .build()
}

pub fn check_semgrep(text: &str) -> Result<Rule, Vec<CompileError>> {
    if text.starts_with('\u{feff}') {
        return Err(vec![CompileError::located(
            ErrorCode::Encoding,
            msg::bom(),
            1,
            1,
        )]);
    }
    let doc: Value = serde_yaml::from_str(text).map_err(|e| {
        let err = CompileError::new(ErrorCode::YamlStructure, msg::invalid_yaml(&e.to_string()));
        vec![match e.location() {
            Some(loc) => CompileError {
                line: Some(loc.line() as u32),
                column: Some(loc.column() as u32),
                ..err
            },
            None => err,
        }]
    })?;
    let structural = |m: String| CompileError::new(ErrorCode::YamlStructure, m);
    let Some(rules) = doc.as_mapping().and_then(|m| m.get("rules")) else {
        return Err(vec![structural(msg::missing_rules_list())]);
    };
    let Some(list) = rules.as_sequence().filter(|l| !l.is_empty()) else {
        return Err(vec![structural(msg::empty_rules_list())]);
    };

    let mut errors = Vec::new();
    let mut parsed = Vec::new();
    let mut ids = BTreeSet::new();
    for (index, entry) in list.iter().enumerate() {
        let Some(map) = entry.as_mapping() else {
            errors.push(structural(msg::rule_not_mapping(index)));
            continue;
        };
        let label = map
            .get("id")
            .and_then(Value::as_str)
            .filter(|s| !s.trim().is_empty())
            .map(str::to_owned);
        let name = label.clone().unwrap_or_else(|| format!("rules[{index}]"));
        let mut local = Vec::new();
        if label.is_none() {
            local.push(structural(msg::missing_field(&name, "id")));
        } else if !ids.insert(name.clone()) {
            local.push(structural(msg::duplicate_rule_id(&name)));
        }

        let message = map
            .get("message")
            .and_then(Value::as_str)
            .map(str::to_owned);
        match map.get("message") {
            None => local.push(structural(msg::missing_field(&name, "message"))),
            Some(v) if v.as_str().is_none_or(|s| s.trim().is_empty()) => local.push(structural(
                msg::field_type(&name, "message", "a non-empty string"),
            )),
            _ => {}
        }

        let mut languages = Vec::new();
        match map.get("languages") {
            None => local.push(structural(msg::missing_field(&name, "languages"))),
            Some(Value::Sequence(seq)) if !seq.is_empty() => {
                for l in seq {
                    match l.as_str() {
                        Some(s) if LANGUAGES.contains(&s.to_ascii_lowercase().as_str()) => {
                            languages.push(s.to_owned())
                        }
                        Some(s) => local.push(structural(msg::bad_language(&name, s))),
                        None => local.push(structural(msg::field_type(
                            &name,
                            "languages",
                            "a list of strings",
                        ))),
                    }
                }
            }
            Some(_) => local.push(structural(msg::field_type(
                &name,
                "languages",
                "a non-empty list",
            ))),
        }

        let severity = map
            .get("severity")
            .and_then(Value::as_str)
            .map(str::to_owned);
        match (&severity, map.get("severity")) {
            (_, None) => local.push(structural(msg::missing_field(&name, "severity"))),
            (Some(s), _) if SEVERITIES.contains(&s.to_ascii_uppercase().as_str()) => {}
            (Some(s), _) => local.push(structural(msg::bad_severity(&name, s))),
            (None, Some(v)) => local.push(structural(msg::bad_severity(&name, &scalar_text(v)))),
        }

        if let Some(meta) = map.get("metadata") {
            if !meta.is_mapping() {
                local.push(structural(msg::field_type(&name, "metadata", "a mapping")));
            }
        }

        let present: Vec<&str> = TOP_CLAUSES
            .iter()
            .copied()
            .filter(|k| map.contains_key(*k))
            .collect();
        let lexicon = lexicon_for(&languages);
        let clause = match present.as_slice() {
            [] => {
                local.push(structural(msg::missing_pattern(&name)));
                None
            }
            [key] => {
                let value = &map[*key];
                let mut ctx = ClauseCtx {
                    rule: &name,
                    lexicon,
                    errors: &mut local,
                };
                match *key {
                    "pattern" => ctx
                        .code_pattern("pattern", value)
                        .map(PatternClause::Pattern),
                    "pattern-regex" => ctx
                        .regex("pattern-regex", value)
                        .map(PatternClause::PatternRegex),
                    "patterns" => ctx.items("patterns", value).map(PatternClause::Patterns),
                    _ => ctx
                        .items("pattern-either", value)
                        .map(PatternClause::PatternEither),
                }
            }
            _ => {
                local.push(structural(msg::multiple_patterns(&name)));
                None
            }
        };

        if local.is_empty() {
            parsed.push(SemgrepRule {
                id: name,
                message: message.unwrap_or_default(),
                languages,
                severity: severity.unwrap_or_default(),
                clause: clause.expect("clause checked"),
                metadata: map
                    .get("metadata")
                    .and_then(|m| serde_json::to_value(m).ok()),
            });
        }
        errors.extend(local);
    }
    if !errors.is_empty() {
        return Err(errors);
    }
    Ok(Rule {
        text: text.to_owned(),
        format: RuleFormat::Semgrep,
        name: parsed[0].id.clone(),
        body: RuleBody::Semgrep(SemgrepRuleSet { rules: parsed }),
        provenance: Default::default(),
        scores: Default::default(),
        taxonomy_tags: Default::default(),
        attempts: 0,
    })
}

fn scalar_text(v: &Value) -> String {
    serde_yaml::to_string(v)
        .map(|s| s.trim().to_owned())
        .unwrap_or_default()
}

fn lexicon_for(languages: &[String]) -> Lexicon {
    if languages.iter().any(|l| {
        matches!(
            l.to_ascii_lowercase().as_str(),
            "javascript" | "js" | "typescript" | "ts"
        )
    }) {
        Lexicon::JavaScript
    } else {
        Lexicon::Python
    }
}

struct ClauseCtx<'a> {
    rule: &'a str,
    lexicon: Lexicon,
    errors: &'a mut Vec<CompileError>,
}

impl ClauseCtx<'_> {
    fn string(&mut self, key: &str, v: &Value) -> Option<String> {
        match v.as_str() {
            Some(s) if !s.trim().is_empty() => Some(s.to_owned()),
            Some(_) => {
                self.errors.push(CompileError::new(
                    ErrorCode::YamlStructure,
                    msg::empty_operator(self.rule, key),
                ));
                None
            }
            None => {
                self.errors.push(CompileError::new(
                    ErrorCode::YamlStructure,
                    msg::field_type(self.rule, key, "a string"),
                ));
                None
            }
        }
    }

    fn code_pattern(&mut self, key: &str, v: &Value) -> Option<String> {
        let s = self.string(key, v)?;
        if let Err(detail) = bracket_balance(&s, self.lexicon) {
            self.errors.push(CompileError::new(
                ErrorCode::Syntax,
                msg::pattern_not_code(self.rule, &detail),
            ));
            return None;
        }
        Some(s)
    }

    fn regex(&mut self, key: &str, v: &Value) -> Option<String> {
        let s = self.string(key, v)?;
        if let Err(e) = build_pattern_regex(&s) {
            self.errors.push(CompileError::new(
                ErrorCode::BadRegex,
                msg::bad_pattern_regex(self.rule, &e.to_string()),
            ));
            return None;
        }
        Some(s)
    }

    fn items(&mut self, key: &str, v: &Value) -> Option<Vec<PatternItem>> {
        let Some(seq) = v.as_sequence() else {
            self.errors.push(CompileError::new(
                ErrorCode::YamlStructure,
                msg::field_type(self.rule, key, "a list"),
            ));
            return None;
        };
        if seq.is_empty() {
            self.errors.push(CompileError::new(
                ErrorCode::YamlStructure,
                msg::empty_operator(self.rule, key),
            ));
            return None;
        }
        let mut out = Vec::new();
        let mut ok = true;
        for item in seq {
            match self.item(key, item) {
                Some(i) => out.push(i),
                None => ok = false,
            }
        }
        ok.then_some(out)
    }

    fn item(&mut self, parent: &str, v: &Value) -> Option<PatternItem> {
        let Some(map) = v.as_mapping() else {
            self.errors.push(CompileError::new(
                ErrorCode::YamlStructure,
                msg::operator_shape(self.rule, parent),
            ));
            return None;
        };
        // `focus-metavariable` and friends may sit next to one operator.
        let (key, value) = match map.iter().next() {
            Some((k, v)) if map.len() == 1 => (k.as_str().unwrap_or("").to_owned(), v),
            _ => {
                self.errors.push(CompileError::new(
                    ErrorCode::YamlStructure,
                    msg::operator_shape(self.rule, parent),
                ));
                return None;
            }
        };
        Some(match key.as_str() {
            "pattern" => PatternItem::Pattern(self.code_pattern(&key, value)?),
            "pattern-not" => PatternItem::PatternNot(self.code_pattern(&key, value)?),
            "pattern-inside" => PatternItem::PatternInside(self.code_pattern(&key, value)?),
            "pattern-not-inside" => PatternItem::PatternNotInside(self.code_pattern(&key, value)?),
            "pattern-regex" => PatternItem::PatternRegex(self.regex(&key, value)?),
            "pattern-not-regex" => PatternItem::PatternNotRegex(self.regex(&key, value)?),
            "pattern-either" => PatternItem::PatternEither(self.items(&key, value)?),
            "patterns" => PatternItem::Patterns(self.items(&key, value)?),
            "metavariable-regex" => {
                if let Some(re) = value.as_mapping().and_then(|m| m.get("regex")) {
                    self.regex("metavariable-regex", re)?;
                }
                PatternItem::Other(key)
            }
            "metavariable-pattern" | "metavariable-comparison" | "focus-metavariable" => {
                PatternItem::Other(key)
            }
            other => {
                self.errors.push(CompileError::new(
                    ErrorCode::YamlStructure,
                    msg::unknown_operator(self.rule, other),
                ));
                return None;
            }
        })
    }
}

/// Checks that brackets outside string literals pair up.
fn bracket_balance(code: &str, lexicon: Lexicon) -> Result<(), String> {
    let mut stack = Vec::new();
    for tok in tokenize(code, lexicon) {
        let Some(c) = tok.text.chars().next().filter(|_| tok.text.len() == 1) else {
            continue;
        };
        match c {
            '(' | '[' | '{' => stack.push(c),
            ')' | ']' | '}' => {
                let want = match c {
                    ')' => '(',
                    ']' => '[',
                    _ => '{',
                };
                if stack.pop() != Some(want) {
                    return Err(format!("unbalanced '{c}'"));
                }
            }
            _ => {}
        }
    }
    match stack.last() {
        Some(c) => Err(format!("unbalanced '{c}'")),
        None => Ok(()),
    }
}
