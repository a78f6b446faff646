use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{LlmError, LlmResponse};
use crate::rule::{Provenance, RuleFormat, Scores};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleDraft {
    /// Model prose with the rule block cut out.
    pub analysis_text: String,
    pub rule_text: String,
    pub rule_format: RuleFormat,
    pub provenance: Provenance,
    pub scores: Scores,
}

fn fence_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?ms)^[ \t]*```([A-Za-z0-9_+-]*)[ \t]*\n(.*?)^[ \t]*```").unwrap()
    })
}

fn yara_start_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?m)^[ \t]*(?:(?:private|global)[ \t]+)*rule[ \t]+[A-Za-z_]").unwrap()
    })
}

fn semgrep_start_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?m)^rules:").unwrap())
}

fn score_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"(?im)^[ \t>*#-]*\**[ \t]*(confidence|maliciousness|malicious|risk)(?:[ \t]+score)?\**[ \t]*[:=][ \t]*\**[ \t]*([0-9]*\.?[0-9]+)[ \t]*(%?)",
        )
        .unwrap()
    })
}

fn looks_like(format: RuleFormat, body: &str) -> bool {
    match format {
        RuleFormat::Yara => yara_start_re().is_match(body),
        RuleFormat::Semgrep => semgrep_start_re().is_match(body),
    }
}

fn tag_matches(format: RuleFormat, tag: &str) -> bool {
    let tag = tag.to_ascii_lowercase();
    match format {
        RuleFormat::Yara => tag == "yara" || tag == "yar",
        RuleFormat::Semgrep => tag == "yaml" || tag == "yml" || tag == "semgrep",
    }
}

/// Locates the rule block: first the fenced block whose body looks like a
/// rule (or carries a matching language tag), then a delimiter scan.
/// Returns the byte span to cut from the response and the rule text.
pub fn extract_rule_block(text: &str, format: RuleFormat) -> Option<((usize, usize), String)> {
    let fences: Vec<_> = fence_re().captures_iter(text).collect();
    let pick = fences
        .iter()
        .find(|c| looks_like(format, &c[2]))
        .or_else(|| fences.iter().find(|c| tag_matches(format, &c[1])));
    if let Some(c) = pick {
        let whole = c.get(0).unwrap();
        let body = &c[2];
        let inner = match format {
            RuleFormat::Yara => yara_start_re()
                .find(body)
                .map_or(body, |m| &body[m.start()..]),
            RuleFormat::Semgrep => semgrep_start_re()
                .find(body)
                .map_or(body, |m| &body[m.start()..]),
        };
        return normalized(inner).map(|r| ((whole.start(), whole.end()), r));
    }
    let (start, end) = match format {
        RuleFormat::Yara => {
            let start = yara_start_re().find(text)?.start();
            (start, yara_block_end(text, start))
        }
        RuleFormat::Semgrep => {
            let start = semgrep_start_re().find(text)?.start();
            (start, yaml_block_end(text, start))
        }
    };
    normalized(&text[start..end]).map(|r| ((start, end), r))
}

fn normalized(block: &str) -> Option<String> {
    let trimmed = block.trim_end();
    (!trimmed.trim().is_empty()).then(|| format!("{trimmed}\n"))
}

/// End of the balanced `{ ... }` body after a rule header, skipping
/// quoted text and comments. Runs to end of text when unbalanced.
fn yara_block_end(text: &str, start: usize) -> usize {
    let bytes = text.as_bytes();
    let mut depth = 0usize;
    let mut opened = false;
    let mut i = start;
    while i < bytes.len() {
        match bytes[i] {
            b'"' => {
                i += 1;
                while i < bytes.len() && bytes[i] != b'"' && bytes[i] != b'\n' {
                    if bytes[i] == b'\\' {
                        i += 1;
                    }
                    i += 1;
                }
            }
            b'/' if bytes.get(i + 1) == Some(&b'/') => {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
                continue;
            }
            b'{' => {
                depth += 1;
                opened = true;
            }
            b'}' if opened => {
                depth = depth.saturating_sub(1);
                if depth == 0 {
                    return i + 1;
                }
            }
            _ => {}
        }
        i += 1;
    }
    bytes.len()
}

/// End of a YAML document starting at `rules:`: stops at the first
/// non-blank line that is not indented or a list item.
fn yaml_block_end(text: &str, start: usize) -> usize {
    let mut pos = start;
    let mut first = true;
    for line in text[start..].split_inclusive('\n') {
        let continues = first
            || line.trim().is_empty()
            || line.starts_with(' ')
            || line.starts_with('\t')
            || line.starts_with('-');
        if !continues {
            break;
        }
        first = false;
        pos += line.len();
    }
    pos
}

/// Parses `confidence|maliciousness|risk: <value>` lines. Percentages are
/// scaled; values outside [0,1] are dropped.
pub fn parse_scores(text: &str) -> Scores {
    let mut scores = Scores::default();
    for c in score_re().captures_iter(text) {
        let Ok(mut v) = c[2].parse::<f64>() else {
            continue;
        };
        if &c[3] == "%" {
            v /= 100.0;
        }
        if !(0.0..=1.0).contains(&v) {
            log::debug!("ignoring out-of-range score {}", &c[0]);
            continue;
        }
        let slot = match c[1].to_ascii_lowercase().as_str() {
            "confidence" => &mut scores.confidence,
            "risk" => &mut scores.risk,
            _ => &mut scores.maliciousness,
        };
        slot.get_or_insert(v);
    }
    scores
}

pub fn parse_rule_output(
    response: &LlmResponse,
    format: RuleFormat,
) -> Result<RuleDraft, LlmError> {
    let text = &response.text;
    let ((start, end), rule_text) =
        extract_rule_block(text, format).ok_or(LlmError::NoRuleFound)?;
    let analysis_text = format!("{}\n{}", text[..start].trim_end(), text[end..].trim_start())
        .trim()
        .to_owned();
    Ok(RuleDraft {
        analysis_text,
        rule_text,
        rule_format: format,
        provenance: Provenance::Unknown,
        scores: parse_scores(text),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn resp(text: &str) -> LlmResponse {
        LlmResponse {
            text: text.into(),
            backend_id: "t".into(),
            request_digest: "d".into(),
        }
    }

    const RESPONSE: &str = "Analysis: the sample posts host data.\n\n```yara\nrule Exfil {\n  meta:\n    a = \"}\"\n  strings:\n    $a = \"x\"\n  condition:\n    $a\n}\n```\n\nconfidence: 0.9\nmaliciousness: 85%\n";

    #[test]
    fn fenced_rule_with_prose_and_scores() {
        let d = parse_rule_output(&resp(RESPONSE), RuleFormat::Yara).unwrap();
        assert!(d.rule_text.starts_with("rule Exfil {"));
        assert!(d.rule_text.ends_with("}\n"));
        assert!(d.analysis_text.starts_with("Analysis: the sample"));
        assert!(d.analysis_text.contains("confidence: 0.9"));
        assert!(!d.analysis_text.contains("rule Exfil"));
        assert_eq!(d.scores.confidence, Some(0.9));
        assert_eq!(d.scores.maliciousness, Some(0.85));
        assert_eq!(d.scores.risk, None);
    }

    #[test]
    fn unfenced_rule_uses_brace_balance() {
        let text = "Here:\nrule A {\n meta:\n  s = \"{\"\n strings:\n  $a = \"x\"\n condition:\n  $a\n}\nDone.";
        let d = parse_rule_output(&resp(text), RuleFormat::Yara).unwrap();
        assert!(d.rule_text.ends_with("  $a\n}\n"));
        assert_eq!(d.analysis_text, "Here:\nDone.");
    }

    #[test]
    fn semgrep_unfenced_block() {
        let text = "Rule follows.\nrules:\n  - id: x\n    pattern: eval(...)\nRisk score: 0.4\n";
        let d = parse_rule_output(&resp(text), RuleFormat::Semgrep).unwrap();
        assert_eq!(d.rule_text, "rules:\n  - id: x\n    pattern: eval(...)\n");
        assert_eq!(d.scores.risk, Some(0.4));
    }

    #[test]
    fn no_rule() {
        assert!(matches!(
            parse_rule_output(&resp("I cannot help."), RuleFormat::Yara),
            Err(LlmError::NoRuleFound)
        ));
    }

    #[test]
    fn out_of_range_scores_dropped() {
        let s = parse_scores("confidence: 7\n**Risk**: 0.3\nrisk: 0.9");
        assert_eq!(s.confidence, None);
        assert_eq!(s.risk, Some(0.3));
    }

    proptest! {
        #[test]
        fn extraction_is_stable(
            pre in "[a-z .\n]{0,40}",
            name in "[A-Za-z_][A-Za-z0-9_]{0,10}",
            body in "[a-z$ =\"\n]{0,60}",
            post in "[a-z .\n]{0,40}",
            fenced in any::<bool>(),
        ) {
            let body = body.replace(['{', '}'], "");
            let rule = format!("rule {name} {{\n{body}\n}}");
            let text = if fenced {
                format!("{pre}\n```yara\n{rule}\n```\n{post}")
            } else {
                format!("{pre}\n{rule}\n{post}")
            };
            if let Some((_, block)) = extract_rule_block(&text, RuleFormat::Yara) {
                let (_, again) = extract_rule_block(&block, RuleFormat::Yara).unwrap();
                prop_assert_eq!(again, block);
            }
        }
    }
}
