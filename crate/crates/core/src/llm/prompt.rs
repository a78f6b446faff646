use std::fmt::Write as _;
use std::path::Path;

use super::{LlmError, Prompt, Stage};
use crate::corpus::PackageMetadata;
use crate::rule::RuleFormat;
use crate::segmenter::{BasicUnit, MetadataFlag, UNIT_CHAR_CAP};
use crate::validator::CompileError;

/// Upper bound on units per craft prompt.
pub const MAX_CRAFT_UNITS: usize = 4;

/// Error lists kept in a fix prompt.
const FIX_MEMORY: usize = 2;

/// Prompt template set. Every field can be replaced by a file of the same
/// name in a template directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Templates {
    pub craft_system: String,
    pub craft_user: String,
    pub craft_metadata_system: String,
    pub craft_metadata_user: String,
    pub refine_system: String,
    pub refine_user: String,
    pub fix_system: String,
    pub fix_user: String,
    pub few_shot_yara: String,
    pub few_shot_semgrep: String,
}

impl Default for Templates {
    fn default() -> Self {
        Self {
            craft_system: include_str!("../../templates/craft_system.txt").into(),
            craft_user: include_str!("../../templates/craft_user.txt").into(),
            craft_metadata_system: include_str!("../../templates/craft_metadata_system.txt").into(),
            craft_metadata_user: include_str!("../../templates/craft_metadata_user.txt").into(),
            refine_system: include_str!("../../templates/refine_system.txt").into(),
            refine_user: include_str!("../../templates/refine_user.txt").into(),
            fix_system: include_str!("../../templates/fix_system.txt").into(),
            fix_user: include_str!("../../templates/fix_user.txt").into(),
            few_shot_yara: include_str!("../../templates/few_shot.yar").into(),
            few_shot_semgrep: include_str!("../../templates/few_shot.yaml").into(),
        }
    }
}

impl Templates {
    /// Built-in templates overridden by whichever files exist in `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self, LlmError> {
        let mut t = Self::default();
        let slots: [(&str, &mut String); 10] = [
            ("craft_system.txt", &mut t.craft_system),
            ("craft_user.txt", &mut t.craft_user),
            ("craft_metadata_system.txt", &mut t.craft_metadata_system),
            ("craft_metadata_user.txt", &mut t.craft_metadata_user),
            ("refine_system.txt", &mut t.refine_system),
            ("refine_user.txt", &mut t.refine_user),
            ("fix_system.txt", &mut t.fix_system),
            ("fix_user.txt", &mut t.fix_user),
            ("few_shot.yar", &mut t.few_shot_yara),
            ("few_shot.yaml", &mut t.few_shot_semgrep),
        ];
        if !dir.is_dir() {
            return Err(LlmError::Template(format!(
                "{} is not a directory",
                dir.display()
            )));
        }
        for (name, slot) in slots {
            let path = dir.join(name);
            if path.is_file() {
                *slot = std::fs::read_to_string(&path)?;
            }
        }
        Ok(t)
    }

    pub fn few_shot(&self, format: RuleFormat) -> &str {
        match format {
            RuleFormat::Yara => &self.few_shot_yara,
            RuleFormat::Semgrep => &self.few_shot_semgrep,
        }
    }
}

/// Replaces `{key}` placeholders in one pass; inserted values are never
/// rescanned and unknown braces are kept literally.
pub fn render(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let key_len = after
            .find(|c: char| !(c.is_ascii_lowercase() || c == '_'))
            .unwrap_or(after.len());
        let key = &after[..key_len];
        match values.iter().find(|(k, _)| *k == key) {
            Some((_, v)) if after[key_len..].starts_with('}') => {
                out.push_str(v);
                rest = &after[key_len + 1..];
            }
            _ => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

struct FormatText {
    name: &'static str,
    fence: &'static str,
    structure: &'static str,
    components: &'static str,
}

fn format_text(format: RuleFormat) -> FormatText {
    match format {
        RuleFormat::Yara => FormatText {
            name: "YARA",
            fence: "yara",
            structure: "a valid rule begins with the keyword rule followed by a unique identifier and contains the three sections meta, strings and condition.",
            components: "meta, strings and condition",
        },
        RuleFormat::Semgrep => FormatText {
            name: "Semgrep",
            fence: "yaml",
            structure: "a valid rule file has a top-level rules list, and every rule has id, message, languages, severity and one pattern clause.",
            components: "id, message, languages, severity and one pattern clause (pattern, patterns, pattern-either or pattern-regex)",
        },
    }
}

fn code_fence(path: &str) -> &'static str {
    if path.ends_with(".js") || path.ends_with(".json") {
        "javascript"
    } else {
        "python"
    }
}

pub enum CraftInput<'a> {
    Units(&'a [BasicUnit]),
    Metadata {
        metadata: &'a PackageMetadata,
        flags: &'a [MetadataFlag],
    },
}

pub fn build_craft_prompt(
    input: CraftInput<'_>,
    format: RuleFormat,
    few_shot: &str,
    templates: &Templates,
) -> Result<Prompt, LlmError> {
    let ft = format_text(format);
    let (system_t, user) = match input {
        CraftInput::Units(units) => {
            if units.is_empty() || units.len() > MAX_CRAFT_UNITS {
                return Err(LlmError::UnitCount {
                    got: units.len(),
                    max: MAX_CRAFT_UNITS,
                });
            }
            let mut samples = String::new();
            for (i, u) in units.iter().enumerate() {
                let chars = u.text.chars().count();
                if chars > UNIT_CHAR_CAP {
                    return Err(LlmError::UnitTooLarge {
                        file: u.origin.file.clone(),
                        chars,
                        limit: UNIT_CHAR_CAP,
                    });
                }
                let _ = write!(
                    samples,
                    "Sample {}: {} lines {}-{}\n```{}\n{}\n```\n\n",
                    i + 1,
                    u.origin.file,
                    u.origin.start_line,
                    u.origin.end_line,
                    code_fence(&u.origin.file),
                    u.text.trim_end_matches('\n'),
                );
            }
            let user = render(
                &templates.craft_user,
                &[
                    ("samples", &samples),
                    ("fence", ft.fence),
                    ("few_shot", few_shot.trim_end()),
                ],
            );
            (&templates.craft_system, user)
        }
        CraftInput::Metadata { metadata, flags } => {
            let json = serde_json::to_string_pretty(metadata)
                .map_err(|e| LlmError::Template(e.to_string()))?;
            let flag_text = if flags.is_empty() {
                "none".to_owned()
            } else {
                flags
                    .iter()
                    .map(|f| {
                        let kind = serde_json::to_value(f.kind)
                            .ok()
                            .and_then(|v| v.as_str().map(str::to_owned))
                            .unwrap_or_default();
                        format!("{kind} ({})", f.evidence)
                    })
                    .collect::<Vec<_>>()
                    .join("; ")
            };
            let user = render(
                &templates.craft_metadata_user,
                &[
                    ("metadata", &json),
                    ("flags", &flag_text),
                    ("fence", ft.fence),
                    ("few_shot", few_shot.trim_end()),
                ],
            );
            (&templates.craft_metadata_system, user)
        }
    };
    Ok(Prompt {
        system_text: render(system_t, &[("format", ft.name)]),
        user_text: user,
        stage: Stage::Craft,
        rule_format: format,
        few_shot: few_shot.to_owned(),
    })
}

pub fn build_refine_prompt(
    analysis: &str,
    rule: &str,
    format: RuleFormat,
    templates: &Templates,
) -> Result<Prompt, LlmError> {
    if analysis.trim().is_empty() {
        return Err(LlmError::EmptyInput("analysis"));
    }
    if rule.trim().is_empty() {
        return Err(LlmError::EmptyInput("rule"));
    }
    let ft = format_text(format);
    Ok(Prompt {
        system_text: render(
            &templates.refine_system,
            &[("format", ft.name), ("structure", ft.structure)],
        ),
        user_text: render(
            &templates.refine_user,
            &[
                ("analysis", analysis.trim_end()),
                ("rule", rule.trim_end()),
                ("fence", ft.fence),
            ],
        ),
        stage: Stage::Refine,
        rule_format: format,
        few_shot: String::new(),
    })
}

/// Embeds at most the two newest error lists, one `Error:` block each.
pub fn build_fix_prompt(
    analysis: &str,
    rule: &str,
    errors: &[Vec<CompileError>],
    format: RuleFormat,
    templates: &Templates,
) -> Result<Prompt, LlmError> {
    let recent: Vec<&Vec<CompileError>> = errors.iter().filter(|e| !e.is_empty()).collect();
    if recent.is_empty() {
        return Err(LlmError::NoErrors);
    }
    let mut blocks = String::new();
    for list in &recent[recent.len().saturating_sub(FIX_MEMORY)..] {
        blocks.push_str("Error:\n");
        for e in list.iter() {
            let _ = writeln!(blocks, "- {e}");
        }
    }
    let ft = format_text(format);
    let analysis = if analysis.trim().is_empty() {
        "(none)"
    } else {
        analysis.trim_end()
    };
    Ok(Prompt {
        system_text: render(
            &templates.fix_system,
            &[("format", ft.name), ("components", ft.components)],
        ),
        user_text: render(
            &templates.fix_user,
            &[
                ("errors", &blocks),
                ("analysis", analysis),
                ("rule", rule.trim_end()),
                ("fence", ft.fence),
            ],
        ),
        stage: Stage::Fix,
        rule_format: format,
        few_shot: String::new(),
    })
}
