//! Semgrep execution: an adapter for the real binary and an approximate
//! text matcher used when no binary is configured.

use std::path::Path;
use std::process::Command;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::OnceLock;

use regex::Regex;
use serde::Deserialize;

use super::yara::{Deadline, Timeout};
use crate::rule::{PatternClause, PatternItem, SemgrepRule, SemgrepRuleSet};
use crate::validator::{build_pattern_regex, ExternalTool};

type Span = (usize, usize);

/// Whether a rule language covers a file path.
pub fn language_matches(languages: &[String], path: &str) -> bool {
    let ext = Path::new(path)
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase();
    languages.iter().any(|l| {
        let exts: &[&str] = match l.to_ascii_lowercase().as_str() {
            "generic" | "regex" => return true,
            "python" | "python2" | "python3" | "py" => &["py", "pyw"],
            "javascript" | "js" => &["js", "mjs", "cjs", "jsx"],
            "typescript" | "ts" => &["ts", "tsx", "js", "mjs", "cjs"],
            "json" => &["json"],
            "yaml" => &["yml", "yaml"],
            "bash" | "sh" => &["sh", "bash"],
            "ruby" => &["rb"],
            "rust" => &["rs"],
            "cpp" => &["cc", "cpp", "cxx", "hpp", "h"],
            "dockerfile" => return path.to_ascii_lowercase().ends_with("dockerfile"),
            other => return ext == other,
        };
        exts.contains(&ext.as_str())
    })
}

/// Text with whitespace removed except single spaces between word
/// characters, plus the source offset of every kept byte.
struct Normalized {
    text: String,
    origin: Vec<usize>,
}

fn is_word(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

fn normalize(src: &str) -> Normalized {
    let mut text = String::with_capacity(src.len());
    let mut origin = Vec::with_capacity(src.len());
    let mut pending_space: Option<usize> = None;
    for (i, c) in src.char_indices() {
        if c.is_whitespace() {
            if pending_space.is_none() && text.chars().next_back().is_some_and(is_word) {
                pending_space = Some(i);
            }
            continue;
        }
        if let Some(at) = pending_space.take() {
            if is_word(c) {
                text.push(' ');
                origin.push(at);
            }
        }
        text.push(c);
        origin.extend(std::iter::repeat_n(i, c.len_utf8()));
    }
    Normalized { text, origin }
}

fn metavar_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\$(?:\.\.\.)?[A-Z_][A-Z0-9_]*|\.\.\.").unwrap())
}

/// Pattern pieces between `...` and metavariable gaps.
fn pieces(pattern: &str) -> Vec<String> {
    metavar_re()
        .split(pattern)
        .map(|p| normalize(p).text)
        .filter(|p| !p.is_empty())
        .collect()
}

struct Fallback<'a> {
    src: &'a str,
    norm: Normalized,
    deadline: &'a Deadline,
}

impl Fallback<'_> {
    fn span(&self, nstart: usize, nend: usize) -> Span {
        let start = self.norm.origin[nstart];
        let end = if nend == 0 {
            start
        } else {
            let last = self.norm.origin[nend - 1];
            last + self.src[last..].chars().next().map_or(1, char::len_utf8)
        };
        (start, end)
    }

    fn pattern(&self, pattern: &str) -> Result<Vec<Span>, Timeout> {
        let parts = pieces(pattern);
        let Some(first) = parts.first() else {
            return Ok(Vec::new());
        };
        let open_ended = pattern.trim_end().ends_with("...");
        let hay = self.norm.text.as_str();
        let mut out = Vec::new();
        for (start, _) in hay.match_indices(first.as_str()) {
            self.deadline.check()?;
            let mut cursor = start + first.len();
            let mut ok = true;
            for p in &parts[1..] {
                match hay[cursor..].find(p.as_str()) {
                    Some(i) => cursor += i + p.len(),
                    None => {
                        ok = false;
                        break;
                    }
                }
            }
            if !ok {
                break;
            }
            let (s, e) = self.span(start, cursor);
            out.push((s, if open_ended { self.src.len() } else { e }));
        }
        Ok(out)
    }

    fn regex(&self, source: &str) -> Result<Vec<Span>, Timeout> {
        let Ok(re) = build_pattern_regex(source) else {
            return Ok(Vec::new());
        };
        let mut out = Vec::new();
        for m in re.find_iter(self.src) {
            self.deadline.check()?;
            match m {
                Ok(m) => out.push((m.start(), m.end())),
                Err(e) => {
                    log::debug!("pattern-regex gave up: {e}");
                    break;
                }
            }
        }
        Ok(out)
    }

    fn clause(&self, clause: &PatternClause) -> Result<Vec<Span>, Timeout> {
        match clause {
            PatternClause::Pattern(p) => self.pattern(p),
            PatternClause::PatternRegex(r) => self.regex(r),
            PatternClause::PatternEither(items) => self.either(items),
            PatternClause::Patterns(items) => self.conjunction(items),
        }
    }

    fn either(&self, items: &[PatternItem]) -> Result<Vec<Span>, Timeout> {
        let mut out = Vec::new();
        for item in items {
            if let Some(spans) = self.positive(item)? {
                out.extend(spans);
            }
        }
        out.sort_unstable();
        out.dedup();
        Ok(out)
    }

    fn positive(&self, item: &PatternItem) -> Result<Option<Vec<Span>>, Timeout> {
        Ok(Some(match item {
            PatternItem::Pattern(p) => self.pattern(p)?,
            PatternItem::PatternRegex(r) => self.regex(r)?,
            PatternItem::PatternEither(l) => self.either(l)?,
            PatternItem::Patterns(l) => self.conjunction(l)?,
            _ => return Ok(None),
        }))
    }

    fn conjunction(&self, items: &[PatternItem]) -> Result<Vec<Span>, Timeout> {
        let mut positives = Vec::new();
        for item in items {
            if let Some(spans) = self.positive(item)? {
                positives.push(spans);
            }
        }
        let Some((first, rest)) = positives.split_first() else {
            return Ok(Vec::new());
        };
        let overlaps = |a: &Span, b: &Span| a.0 < b.1.max(b.0 + 1) && b.0 < a.1.max(a.0 + 1);
        let within = |a: &Span, b: &Span| b.0 <= a.0 && a.1 <= b.1;
        let mut kept: Vec<Span> = first
            .iter()
            .filter(|s| {
                rest.iter()
                    .all(|other| other.iter().any(|o| overlaps(s, o)))
            })
            .copied()
            .collect();
        for item in items {
            match item {
                PatternItem::PatternInside(p) => {
                    let inside = self.pattern(p)?;
                    kept.retain(|s| inside.iter().any(|i| within(s, i)));
                }
                PatternItem::PatternNotInside(p) => {
                    let outside = self.pattern(p)?;
                    kept.retain(|s| !outside.iter().any(|i| within(s, i)));
                }
                PatternItem::PatternNot(p) => {
                    let not = self.pattern(p)?;
                    kept.retain(|s| !not.iter().any(|n| overlaps(s, n)));
                }
                PatternItem::PatternNotRegex(r) => {
                    let not = self.regex(r)?;
                    kept.retain(|s| !not.iter().any(|n| overlaps(s, n)));
                }
                _ => {}
            }
        }
        Ok(kept)
    }
}

fn line_of(src: &str, offset: usize) -> usize {
    memchr::memchr_iter(b'\n', &src.as_bytes()[..offset]).count() + 1
}

/// Approximate evaluation of one Semgrep rule over a file. Returns the
/// 1-based lines where matches start.
pub(crate) fn fallback_rule(
    rule: &SemgrepRule,
    path: &str,
    src: &str,
    deadline: &Deadline,
) -> Result<Vec<usize>, Timeout> {
    if !language_matches(&rule.languages, path) {
        return Ok(Vec::new());
    }
    deadline.check()?;
    let fb = Fallback {
        src,
        norm: normalize(src),
        deadline,
    };
    let mut lines: Vec<usize> = fb
        .clause(&rule.clause)?
        .into_iter()
        .map(|(s, _)| line_of(src, s))
        .collect();
    lines.sort_unstable();
    lines.dedup();
    Ok(lines)
}

/// Lines matched by any rule of the set, via the fallback matcher.
pub(crate) fn fallback_set(
    set: &SemgrepRuleSet,
    path: &str,
    src: &str,
    deadline: &Deadline,
) -> Result<Vec<usize>, Timeout> {
    let mut lines = Vec::new();
    for rule in &set.rules {
        lines.extend(fallback_rule(rule, path, src, deadline)?);
    }
    lines.sort_unstable();
    lines.dedup();
    Ok(lines)
}

#[derive(Debug, Deserialize)]
struct SemgrepOutput {
    #[serde(default)]
    results: Vec<SemgrepFinding>,
}

#[derive(Debug, Deserialize)]
struct SemgrepFinding {
    start: SemgrepPosition,
}

#[derive(Debug, Deserialize)]
struct SemgrepPosition {
    line: usize,
}

static COUNTER: AtomicU64 = AtomicU64::new(0);

/// Runs the configured Semgrep binary. `{config}` in the tool args is the
/// rule file and `{target}` the staged source file; stdout must be
/// Semgrep's JSON report.
pub(crate) fn external_scan(
    tool: &ExternalTool,
    rule_text: &str,
    path: &str,
    src: &str,
) -> Result<Vec<usize>, String> {
    let dir = std::env::temp_dir().join(format!(
        "rulesmith-scan-{}-{}",
        std::process::id(),
        COUNTER.fetch_add(1, Ordering::Relaxed)
    ));
    let name = Path::new(path)
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "target".into());
    let config = dir.join("rule.yaml");
    let target = dir.join(name);
    let staged = std::fs::create_dir_all(&dir)
        .and_then(|_| std::fs::write(&config, rule_text))
        .and_then(|_| std::fs::write(&target, src));
    let result = staged.map_err(|e| e.to_string()).and_then(|_| {
        let args: Vec<String> = tool
            .args
            .iter()
            .map(|a| {
                a.replace("{config}", &config.to_string_lossy())
                    .replace("{target}", &target.to_string_lossy())
            })
            .collect();
        Command::new(&tool.program)
            .args(&args)
            .output()
            .map_err(|e| format!("cannot run {}: {e}", tool.program.display()))
    });
    let _ = std::fs::remove_dir_all(&dir);
    let output = result?;
    let report: SemgrepOutput = serde_json::from_slice(&output.stdout).map_err(|e| {
        format!(
            "unreadable semgrep output ({}): {e}: {}",
            output.status,
            String::from_utf8_lossy(&output.stderr).trim()
        )
    })?;
    let mut lines: Vec<usize> = report.results.into_iter().map(|f| f.start.line).collect();
    lines.sort_unstable();
    lines.dedup();
    Ok(lines)
}
