//! Rule compilers and the compile/fix loop that repairs model output.

mod align;
mod external;
pub mod messages;
mod semgrep;
mod yara;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use align::{
    align_rule, AgentMemory, AlignConfig, AlignmentFailure, MAX_FIX_ATTEMPTS, MEMORY_SIZE,
};
pub use external::{ExternalCompilers, ExternalTool};
pub use semgrep::{build_pattern_regex, check_semgrep};
pub use yara::{build_regex, compile_yara, compile_yara_bytes, unescape};

use crate::rule::{Rule, RuleFormat};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    MissingSection,
    Syntax,
    UndefinedString,
    BadRegex,
    BadMeta,
    Encoding,
    YamlStructure,
}

impl ErrorCode {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCode::MissingSection => "missing_section",
            ErrorCode::Syntax => "syntax",
            ErrorCode::UndefinedString => "undefined_string",
            ErrorCode::BadRegex => "bad_regex",
            ErrorCode::BadMeta => "bad_meta",
            ErrorCode::Encoding => "encoding",
            ErrorCode::YamlStructure => "yaml_structure",
        }
    }
}

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompileError {
    pub code: ErrorCode,
    /// Includes the location when one is known.
    pub message: String,
    pub line: Option<u32>,
    pub column: Option<u32>,
}

impl CompileError {
    pub fn new(code: ErrorCode, message: String) -> Self {
        debug_assert!(!message.is_empty());
        Self {
            code,
            message,
            line: None,
            column: None,
        }
    }

    pub fn located(code: ErrorCode, message: String, line: u32, column: u32) -> Self {
        Self {
            code,
            message: format!("line {line}, column {column}: {message}"),
            line: Some(line),
            column: Some(column),
        }
    }
}

impl fmt::Display for CompileError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.code, self.message)
    }
}

impl std::error::Error for CompileError {}

/// Built-in compiler for `format`.
pub fn compile(text: &str, format: RuleFormat) -> Result<Rule, Vec<CompileError>> {
    match format {
        RuleFormat::Yara => compile_yara(text),
        RuleFormat::Semgrep => check_semgrep(text),
    }
}

/// Like [`compile`] on raw bytes; invalid UTF-8 is an encoding error.
pub fn compile_bytes(bytes: &[u8], format: RuleFormat) -> Result<Rule, Vec<CompileError>> {
    match std::str::from_utf8(bytes) {
        Ok(text) => compile(text, format),
        Err(e) => Err(vec![CompileError::new(
            ErrorCode::Encoding,
            messages::invalid_utf8(e.valid_up_to()),
        )]),
    }
}

/// Built-in compiler followed by the external one, when configured.
pub fn compile_with(
    text: &str,
    format: RuleFormat,
    external: &ExternalCompilers,
) -> Result<Rule, Vec<CompileError>> {
    let rule = compile(text, format)?;
    match external.check(text, format) {
        Ok(()) => Ok(rule),
        Err(errors) => Err(errors),
    }
}

/// Applies the configured line-ending convention to rule text.
pub fn with_line_endings(text: &str, crlf: bool) -> String {
    let lf = text.replace("\r\n", "\n");
    if crlf {
        lf.replace('\n', "\r\n")
    } else {
        lf
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn located_message() {
        let e = CompileError::located(ErrorCode::Syntax, "bad".into(), 3, 7);
        assert_eq!(e.to_string(), "syntax: line 3, column 7: bad");
        assert_eq!(serde_json::to_value(e.code).unwrap(), "syntax");
    }

    #[test]
    fn line_endings() {
        assert_eq!(with_line_endings("a\r\nb\n", false), "a\nb\n");
        assert_eq!(with_line_endings("a\nb", true), "a\r\nb");
    }
}
