//! Tokens, fixed-length segments, basic units and metadata audit.

mod audit;
mod tokenizer;
mod units;

use serde::{Deserialize, Serialize};

pub use audit::{
    audit_metadata, is_release_zero, load_name_list, parse_name_list, AuditConfig, FlagKind,
    MetadataFlag, DEFAULT_DENYLIST, DEFAULT_POPULAR,
};
pub use tokenizer::{tokenize, tokenize_source, Lexicon, Token, TokenKind};
pub use units::{extract_basic_units, BasicUnit, UnitKind, UnitOrigin, UNIT_CHAR_CAP};

/// Default segment length in tokens.
pub const SEGMENT_THRESHOLD: usize = 512;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentOrigin {
    pub file: String,
    /// Byte span from the first token's start to the last token's end.
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeSegment {
    pub tokens: Vec<Token>,
    pub token_count: usize,
    pub origin: SegmentOrigin,
    pub index: usize,
}

impl CodeSegment {
    /// Token texts joined by single spaces.
    pub fn text(&self) -> String {
        let mut out = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            out.push_str(&t.text);
        }
        out
    }
}

/// Chunks a token stream into consecutive segments of `threshold` tokens;
/// only the last may be shorter. A zero threshold is treated as one.
pub fn split_segments(file: &str, tokens: &[Token], threshold: usize) -> Vec<CodeSegment> {
    let threshold = threshold.max(1);
    tokens
        .chunks(threshold)
        .enumerate()
        .map(|(index, chunk)| CodeSegment {
            tokens: chunk.to_vec(),
            token_count: chunk.len(),
            origin: SegmentOrigin {
                file: file.to_owned(),
                start: chunk[0].start,
                end: chunk[chunk.len() - 1].end,
            },
            index,
        })
        .collect()
}
