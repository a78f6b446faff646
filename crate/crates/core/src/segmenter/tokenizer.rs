use serde::{Deserialize, Serialize};

use crate::corpus::SourceFile;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenKind {
    Ident,
    Number,
    Str,
    Op,
    Punct,
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub kind: TokenKind,
    pub text: String,
    /// Byte offsets into the source text.
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Lexicon {
    Python,
    JavaScript,
}

impl Lexicon {
    pub fn for_path(path: &str) -> Self {
        let lower = path.to_ascii_lowercase();
        if [".js", ".mjs", ".cjs", ".ts", ".json"]
            .iter()
            .any(|e| lower.ends_with(e))
        {
            Lexicon::JavaScript
        } else {
            Lexicon::Python
        }
    }

    fn operators(self) -> &'static [&'static str] {
        match self {
            Lexicon::Python => &[
                "**=", "//=", ">>=", "<<=", "...", "->", ":=", "==", "!=", "<=", ">=", "**", "//",
                "<<", ">>", "+=", "-=", "*=", "/=", "%=", "&=", "|=", "^=", "@=",
            ],
            Lexicon::JavaScript => &[
                ">>>=", "===", "!==", "**=", "<<=", ">>=", ">>>", "&&=", "||=", "??=", "...", "=>",
                "==", "!=", "<=", ">=", "&&", "||", "??", "?.", "++", "--", "**", "<<", ">>", "+=",
                "-=", "*=", "/=", "%=", "&=", "|=", "^=",
            ],
        }
    }
}

pub fn tokenize_source(file: &SourceFile) -> Vec<Token> {
    tokenize(&file.content, Lexicon::for_path(&file.relative_path))
}

/// Lexes identifiers, numbers, string literals (text kept verbatim),
/// operators and punctuation. Whitespace and comments are skipped; offsets
/// of the surviving tokens still point into the original text.
pub fn tokenize(text: &str, lexicon: Lexicon) -> Vec<Token> {
    let bytes = text.as_bytes();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = text[i..].chars().next().unwrap();
        let b = bytes[i];

        if c.is_whitespace() {
            i += c.len_utf8();
            continue;
        }
        if b == b'\\' && matches!(bytes.get(i + 1), Some(b'\n') | Some(b'\r')) {
            i += 1;
            continue;
        }
        let comment_end = match (lexicon, b, bytes.get(i + 1)) {
            (Lexicon::Python, b'#', _) | (Lexicon::JavaScript, b'/', Some(b'/')) => {
                Some(memchr::memchr(b'\n', &bytes[i..]).map_or(bytes.len(), |n| i + n))
            }
            (Lexicon::JavaScript, b'/', Some(b'*')) => Some(
                memchr::memmem::find(&bytes[i + 2..], b"*/").map_or(bytes.len(), |n| i + 2 + n + 2),
            ),
            _ => None,
        };
        if let Some(end) = comment_end {
            i = end;
            continue;
        }

        let start = i;
        let (kind, end) = if is_ident_start(c, lexicon) {
            let mut j = i;
            for ch in text[i..].chars() {
                if is_ident_continue(ch, lexicon) {
                    j += ch.len_utf8();
                } else {
                    break;
                }
            }
            let word = &text[i..j];
            if lexicon == Lexicon::Python
                && is_string_prefix(word)
                && matches!(bytes.get(j), Some(b'\'') | Some(b'"'))
            {
                (TokenKind::Str, scan_string(bytes, j, lexicon))
            } else {
                (TokenKind::Ident, j)
            }
        } else if b.is_ascii_digit()
            || (b == b'.' && bytes.get(i + 1).is_some_and(u8::is_ascii_digit))
        {
            (TokenKind::Number, scan_number(bytes, i))
        } else if b == b'\'' || b == b'"' || (b == b'`' && lexicon == Lexicon::JavaScript) {
            (TokenKind::Str, scan_string(bytes, i, lexicon))
        } else if let Some(op) = lexicon
            .operators()
            .iter()
            .find(|op| text[i..].starts_with(**op))
        {
            (TokenKind::Op, i + op.len())
        } else if b"()[]{},:;.".contains(&b) {
            (TokenKind::Punct, i + 1)
        } else if b"+-*/%<>=!&|^~@?".contains(&b) {
            (TokenKind::Op, i + 1)
        } else {
            (TokenKind::Unknown, i + c.len_utf8())
        };
        tokens.push(Token {
            kind,
            text: text[start..end].to_owned(),
            start,
            end,
        });
        i = end;
    }
    tokens
}

fn is_ident_start(c: char, lexicon: Lexicon) -> bool {
    c == '_' || c.is_alphabetic() || (lexicon == Lexicon::JavaScript && c == '$')
}

fn is_ident_continue(c: char, lexicon: Lexicon) -> bool {
    c == '_' || c.is_alphanumeric() || (lexicon == Lexicon::JavaScript && c == '$')
}

fn is_string_prefix(word: &str) -> bool {
    matches!(
        word.to_ascii_lowercase().as_str(),
        "r" | "u" | "b" | "f" | "br" | "rb" | "fr" | "rf"
    )
}

fn scan_number(bytes: &[u8], start: usize) -> usize {
    let mut i = start;
    if bytes[i] == b'0'
        && matches!(
            bytes.get(i + 1),
            Some(b'x' | b'X' | b'o' | b'O' | b'b' | b'B')
        )
    {
        i += 2;
        while i < bytes.len() && (bytes[i].is_ascii_hexdigit() || bytes[i] == b'_') {
            i += 1;
        }
        return i;
    }
    while i < bytes.len() {
        let b = bytes[i];
        if b.is_ascii_alphanumeric()
            || b == b'_'
            || b == b'.'
            || ((b == b'+' || b == b'-') && matches!(bytes[i - 1], b'e' | b'E'))
        {
            i += 1;
        } else {
            break;
        }
    }
    i
}

/// Returns the end offset of the string literal opening at `start`.
/// Unterminated single-line strings stop at end of line.
fn scan_string(bytes: &[u8], start: usize, lexicon: Lexicon) -> usize {
    let quote = bytes[start];
    let triple = lexicon == Lexicon::Python
        && bytes.get(start + 1) == Some(&quote)
        && bytes.get(start + 2) == Some(&quote);
    let multiline = triple || quote == b'`';
    let mut i = start + if triple { 3 } else { 1 };
    while i < bytes.len() {
        let b = bytes[i];
        if b == b'\\' {
            i += 2;
            continue;
        }
        if b == quote {
            if !triple {
                return i + 1;
            }
            if bytes.get(i + 1) == Some(&quote) && bytes.get(i + 2) == Some(&quote) {
                return i + 3;
            }
        }
        if b == b'\n' && !multiline {
            return i;
        }
        i += 1;
    }
    bytes.len()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kinds(text: &str) -> Vec<(TokenKind, String)> {
        tokenize(text, Lexicon::Python)
            .into_iter()
            .map(|t| (t.kind, t.text))
            .collect()
    }

    #[test]
    fn simple_assignment() {
        assert_eq!(
            kinds("x = 1"),
            [
                (TokenKind::Ident, "x".into()),
                (TokenKind::Op, "=".into()),
                (TokenKind::Number, "1".into())
            ]
        );
        assert!(kinds("").is_empty());
    }

    #[test]
    fn strings_comments_offsets() {
        let src = "s = b'a\\'b'  # gone\nt = \"\"\"multi\nline\"\"\"";
        let toks = tokenize(src, Lexicon::Python);
        let texts: Vec<_> = toks.iter().map(|t| t.text.as_str()).collect();
        assert_eq!(
            texts,
            ["s", "=", "b'a\\'b'", "t", "=", "\"\"\"multi\nline\"\"\""]
        );
        for t in &toks {
            assert_eq!(&src[t.start..t.end], t.text);
        }
    }

    #[test]
    fn javascript_lexicon() {
        let src = "const a = b === c; // x\n/* y */ f(`t${1}`) => $q";
        let texts: Vec<_> = tokenize(src, Lexicon::JavaScript)
            .into_iter()
            .map(|t| t.text)
            .collect();
        assert_eq!(
            texts,
            ["const", "a", "=", "b", "===", "c", ";", "f", "(", "`t${1}`", ")", "=>", "$q"]
        );
    }

    #[test]
    fn numbers_and_unknown() {
        let texts: Vec<_> = kinds("1e-5 0x1F .5 3.14j $").into_iter().collect();
        assert_eq!(texts[0], (TokenKind::Number, "1e-5".into()));
        assert_eq!(texts[1], (TokenKind::Number, "0x1F".into()));
        assert_eq!(texts[2], (TokenKind::Number, ".5".into()));
        assert_eq!(texts[3], (TokenKind::Number, "3.14j".into()));
        assert_eq!(texts[4].0, TokenKind::Unknown);
    }
}
