use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::corpus::SourceFile;

/// Character cap for one basic unit.
pub const UNIT_CHAR_CAP: usize = 4000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitKind {
    ModulePrelude,
    Function,
    Class,
    ControlBlock,
    OverflowChunk,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitOrigin {
    pub file: String,
    /// 1-based, inclusive.
    pub start_line: usize,
    pub end_line: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasicUnit {
    pub text: String,
    pub kind: UnitKind,
    pub origin: UnitOrigin,
    pub char_len: usize,
}

fn starter_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"^(?:(async\s+def |def |function )|(class )|(if |for |while |try:|with |async ))",
        )
        .unwrap()
    })
}

fn starter_kind(stripped: &str) -> Option<UnitKind> {
    let caps = starter_re().captures(stripped)?;
    Some(if caps.get(1).is_some() {
        UnitKind::Function
    } else if caps.get(2).is_some() {
        UnitKind::Class
    } else {
        UnitKind::ControlBlock
    })
}

struct Block {
    kind: UnitKind,
    /// Indentation of the starter line; `None` for the prelude.
    indent: Option<usize>,
    text: String,
    start_line: usize,
}

/// Splits a file into self-contained blocks.
///
/// A block starts on a line whose code begins with a starter keyword and
/// whose indentation is not deeper than the starter of the block currently
/// open, so nested bodies stay with their parent. Lines before the first
/// starter form the prelude. Blocks longer than [`UNIT_CHAR_CAP`] characters
/// are cut into consecutive overflow chunks of at most that size.
pub fn extract_basic_units(file: &SourceFile) -> Vec<BasicUnit> {
    let mut blocks: Vec<Block> = Vec::new();
    for (idx, line) in file.content.split_inclusive('\n').enumerate() {
        let stripped = line.trim_start_matches([' ', '\t']);
        let indent = line.len() - stripped.len();
        let opens = starter_kind(stripped).filter(|_| match blocks.last() {
            None => true,
            Some(b) => b.indent.is_none_or(|open| indent <= open),
        });
        match (opens, blocks.last_mut()) {
            (Some(kind), _) => blocks.push(Block {
                kind,
                indent: Some(indent),
                text: line.to_owned(),
                start_line: idx + 1,
            }),
            (None, Some(open)) => open.text.push_str(line),
            (None, None) => blocks.push(Block {
                kind: UnitKind::ModulePrelude,
                indent: None,
                text: line.to_owned(),
                start_line: idx + 1,
            }),
        }
    }

    let mut units = Vec::new();
    for block in blocks {
        let chars = block.text.chars().count();
        if chars <= UNIT_CHAR_CAP {
            let end_line = block.start_line + newlines_before_last_char(&block.text);
            units.push(BasicUnit {
                char_len: chars,
                kind: block.kind,
                origin: UnitOrigin {
                    file: file.relative_path.clone(),
                    start_line: block.start_line,
                    end_line,
                },
                text: block.text,
            });
            continue;
        }
        let mut line = block.start_line;
        let mut rest = block.text.as_str();
        while !rest.is_empty() {
            let cut = rest
                .char_indices()
                .nth(UNIT_CHAR_CAP)
                .map_or(rest.len(), |(i, _)| i);
            let piece = &rest[..cut];
            let end_line = line + newlines_before_last_char(piece);
            units.push(BasicUnit {
                text: piece.to_owned(),
                kind: UnitKind::OverflowChunk,
                origin: UnitOrigin {
                    file: file.relative_path.clone(),
                    start_line: line,
                    end_line,
                },
                char_len: piece.chars().count(),
            });
            line += piece.matches('\n').count();
            rest = &rest[cut..];
        }
    }
    units
}

fn newlines_before_last_char(text: &str) -> usize {
    let trimmed = text.strip_suffix('\n').unwrap_or(text);
    trimmed.matches('\n').count()
}
