use std::path::PathBuf;
use std::process::Command;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{CompileError, ErrorCode};
use crate::rule::RuleFormat;

/// A compiler binary. `{file}` in `args` is replaced by the rule path and
/// `{out}` by a scratch output path.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExternalTool {
    pub program: PathBuf,
    pub args: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExternalCompilers {
    /// e.g. `yarac {file} {out}`
    pub yara: Option<ExternalTool>,
    /// e.g. `semgrep --validate --metrics off --config {file}`
    pub semgrep: Option<ExternalTool>,
}

static COUNTER: AtomicU64 = AtomicU64::new(0);

fn yara_diag_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\((\d+)\):\s*(?:error|warning):\s*(.+)$").unwrap())
}

fn classify_yara(message: &str) -> ErrorCode {
    let m = message.to_ascii_lowercase();
    if m.contains("undefined string") || m.contains("undefined identifier") {
        ErrorCode::UndefinedString
    } else if m.contains("regular expression") || m.contains("regex") {
        ErrorCode::BadRegex
    } else if m.contains("meta") {
        ErrorCode::BadMeta
    } else {
        ErrorCode::Syntax
    }
}

impl ExternalCompilers {
    pub fn is_enabled(&self, format: RuleFormat) -> bool {
        self.tool(format).is_some()
    }

    fn tool(&self, format: RuleFormat) -> Option<&ExternalTool> {
        match format {
            RuleFormat::Yara => self.yara.as_ref(),
            RuleFormat::Semgrep => self.semgrep.as_ref(),
        }
    }

    /// Runs the configured binary. A missing tool is a pass.
    pub fn check(&self, text: &str, format: RuleFormat) -> Result<(), Vec<CompileError>> {
        let Some(tool) = self.tool(format) else {
            return Ok(());
        };
        let stem = format!(
            "rulesmith-{}-{}",
            std::process::id(),
            COUNTER.fetch_add(1, Ordering::Relaxed)
        );
        let dir = std::env::temp_dir();
        let file = dir.join(format!("{stem}.{}", format.extension()));
        let out = dir.join(format!("{stem}.out"));
        let tool_error = |m: String| {
            vec![CompileError::new(
                match format {
                    RuleFormat::Yara => ErrorCode::Syntax,
                    RuleFormat::Semgrep => ErrorCode::YamlStructure,
                },
                m,
            )]
        };
        if let Err(e) = std::fs::write(&file, text) {
            return Err(tool_error(format!(
                "cannot stage rule for external compiler: {e}"
            )));
        }
        let args: Vec<String> = tool
            .args
            .iter()
            .map(|a| {
                a.replace("{file}", &file.to_string_lossy())
                    .replace("{out}", &out.to_string_lossy())
            })
            .collect();
        let result = Command::new(&tool.program).args(&args).output();
        let _ = std::fs::remove_file(&file);
        let _ = std::fs::remove_file(&out);
        let output = match result {
            Ok(o) => o,
            Err(e) => {
                return Err(tool_error(format!(
                    "cannot run {}: {e}",
                    tool.program.display()
                )))
            }
        };
        if output.status.success() {
            return Ok(());
        }
        let stderr = String::from_utf8_lossy(&output.stderr);
        let stdout = String::from_utf8_lossy(&output.stdout);
        let mut errors = Vec::new();
        for line in stderr.lines().chain(stdout.lines()) {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            match format {
                RuleFormat::Yara => {
                    if let Some(c) = yara_diag_re().captures(line) {
                        let message = c[2].to_owned();
                        errors.push(CompileError::located(
                            classify_yara(&message),
                            message,
                            c[1].parse().unwrap_or(0),
                            1,
                        ));
                    }
                }
                RuleFormat::Semgrep => {
                    errors.push(CompileError::new(ErrorCode::YamlStructure, line.to_owned()))
                }
            }
        }
        if errors.is_empty() {
            errors = tool_error(format!("external compiler exited with {}", output.status));
        }
        Err(errors)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sh(script: &str) -> ExternalTool {
        ExternalTool {
            program: "sh".into(),
            args: vec!["-c".into(), script.into(), "sh".into(), "{file}".into()],
        }
    }

    #[test]
    fn disabled_is_pass() {
        assert!(ExternalCompilers::default()
            .check("x", RuleFormat::Yara)
            .is_ok());
    }

    #[test]
    fn parses_yara_diagnostics() {
        let ext = ExternalCompilers {
            yara: Some(sh(
                "echo \"$1(4): error: undefined string identifier \\\"\\$b\\\"\" >&2; exit 1",
            )),
            semgrep: None,
        };
        let errs = ext.check("rule r {}", RuleFormat::Yara).unwrap_err();
        assert_eq!(errs.len(), 1);
        assert_eq!(errs[0].code, ErrorCode::UndefinedString);
        assert_eq!(errs[0].line, Some(4));
    }

    #[test]
    fn passes_rule_file_to_tool() {
        let ext = ExternalCompilers {
            yara: None,
            semgrep: Some(sh("grep -q '^rules:' \"$1\"")),
        };
        assert!(ext.check("rules:\n", RuleFormat::Semgrep).is_ok());
        let errs = ext.check("nope\n", RuleFormat::Semgrep).unwrap_err();
        assert_eq!(errs[0].code, ErrorCode::YamlStructure);
    }
}
