use std::collections::BTreeSet;

use crate::corpus::SourceFile;
use crate::segmenter::{tokenize, Lexicon, Token, TokenKind};

/// Shortest candidate kept, in characters.
pub const MIN_CANDIDATE_CHARS: usize = 6;
/// Longest string literal kept, in bytes.
pub const MAX_LITERAL_BYTES: usize = 256;
/// Longest identifier n-gram.
pub const MAX_NGRAM: usize = 3;

/// Inner text of a string literal token, as written in the source.
fn literal_body(text: &str) -> &str {
    let s = text.trim_start_matches(|c: char| c.is_ascii_alphabetic());
    for q in ["\"\"\"", "'''"] {
        if let Some(inner) = s.strip_prefix(q) {
            return inner.strip_suffix(q).unwrap_or(inner);
        }
    }
    let Some(q) = s.chars().next() else { return "" };
    let inner = &s[q.len_utf8()..];
    inner.strip_suffix(q).unwrap_or(inner)
}

/// Dotted identifier chains such as `socket.gethostname`, written without
/// spaces.
fn chains(tokens: &[Token]) -> Vec<Vec<&str>> {
    let mut out = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        let t = &tokens[i];
        if t.kind == TokenKind::Ident {
            current.push(&t.text);
            let dot = tokens.get(i + 1);
            let next = tokens.get(i + 2);
            if let (Some(d), Some(n)) = (dot, next) {
                if d.text == "."
                    && n.kind == TokenKind::Ident
                    && d.start == t.end
                    && n.start == d.end
                {
                    i += 2;
                    continue;
                }
            }
        }
        if !current.is_empty() {
            out.push(std::mem::take(&mut current));
        }
        i += 1;
    }
    if !current.is_empty() {
        out.push(current);
    }
    out
}

/// String literals and identifier n-grams (1 to 3 dotted parts) of at least
/// six characters, deduplicated and sorted.
pub fn extract_candidate_strings(group: &[SourceFile]) -> Vec<String> {
    let mut out = BTreeSet::new();
    for file in group {
        let tokens = tokenize(&file.content, Lexicon::for_path(&file.relative_path));
        for t in &tokens {
            if t.kind == TokenKind::Str {
                let body = literal_body(&t.text);
                if body.chars().count() >= MIN_CANDIDATE_CHARS && body.len() <= MAX_LITERAL_BYTES {
                    out.insert(body.to_owned());
                }
            }
        }
        for chain in chains(&tokens) {
            for n in 1..=MAX_NGRAM.min(chain.len()) {
                for w in chain.windows(n) {
                    let gram = w.join(".");
                    if gram.chars().count() >= MIN_CANDIDATE_CHARS {
                        out.insert(gram);
                    }
                }
            }
        }
    }
    out.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn f(path: &str, text: &str) -> SourceFile {
        SourceFile::from_bytes(path, text.as_bytes())
    }

    #[test]
    fn literal_is_candidate() {
        let c = extract_candidate_strings(&[f("a.py", "u = \"http://evil.example\"\n")]);
        assert!(c.contains(&"http://evil.example".to_owned()));
    }

    #[test]
    fn empty_file() {
        assert!(extract_candidate_strings(&[f("a.py", "")]).is_empty());
    }

    #[test]
    fn golden_snapshot() {
        let src = "import socket, os\nh = socket.gethostname()\nos.path.expanduser('~/.ssh/id_rsa')\nx = r'''secret_blob'''\n";
        let c = extract_candidate_strings(&[f("setup.py", src)]);
        assert_eq!(
            c,
            [
                "expanduser",
                "gethostname",
                "import",
                "os.path",
                "os.path.expanduser",
                "path.expanduser",
                "secret_blob",
                "socket",
                "socket.gethostname",
                "~/.ssh/id_rsa",
            ]
        );
    }

    #[test]
    fn spaced_dots_break_chains() {
        let c = extract_candidate_strings(&[f("a.py", "alpha . betaa\n")]);
        assert!(c.is_empty());
    }
}
