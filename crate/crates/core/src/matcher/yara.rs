use std::time::Instant;

use memchr::memmem::Finder;

use crate::rule::{Condition, HexToken, Quantifier, StringDef, StringPattern, YaraRule};
use crate::validator::build_regex;

/// Signals that the time budget ran out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Timeout;

pub(crate) struct Deadline(pub Option<Instant>);

impl Deadline {
    pub(crate) fn check(&self) -> Result<(), Timeout> {
        match self.0 {
            Some(d) if Instant::now() >= d => Err(Timeout),
            _ => Ok(()),
        }
    }
}

enum Searcher {
    Literal {
        needles: Vec<Vec<u8>>,
        nocase: bool,
        fullword: bool,
    },
    Regex {
        re: regex::bytes::Regex,
        fullword: bool,
    },
    Hex(Vec<HexToken>),
}

pub(crate) struct CompiledString {
    id: String,
    searcher: Searcher,
}

fn widen(bytes: &[u8]) -> Vec<u8> {
    bytes.iter().flat_map(|&b| [b, 0]).collect()
}

impl CompiledString {
    pub(crate) fn new(def: &StringDef) -> Self {
        let m = def.modifiers;
        let searcher = match &def.pattern {
            StringPattern::Text { bytes } => {
                let base = if m.nocase {
                    bytes.to_ascii_lowercase()
                } else {
                    bytes.clone()
                };
                let mut needles = Vec::new();
                if m.ascii || !m.wide {
                    needles.push(base.clone());
                }
                if m.wide {
                    needles.push(widen(&base));
                }
                Searcher::Literal {
                    needles,
                    nocase: m.nocase,
                    fullword: m.fullword,
                }
            }
            StringPattern::Regex {
                source,
                case_insensitive,
                dot_all,
            } => Searcher::Regex {
                re: build_regex(source, *case_insensitive || m.nocase, *dot_all)
                    .expect("validated regex"),
                fullword: m.fullword,
            },
            StringPattern::Hex { tokens } => Searcher::Hex(tokens.clone()),
        };
        Self {
            id: def.id.clone(),
            searcher,
        }
    }

    /// Sorted start offsets of every (overlapping) occurrence.
    pub(crate) fn find_all(
        &self,
        hay: &[u8],
        lower: &[u8],
        deadline: &Deadline,
    ) -> Result<Vec<usize>, Timeout> {
        let mut out = Vec::new();
        match &self.searcher {
            Searcher::Literal {
                needles,
                nocase,
                fullword,
            } => {
                let text = if *nocase { lower } else { hay };
                for needle in needles {
                    if needle.is_empty() {
                        continue;
                    }
                    let finder = Finder::new(needle);
                    let mut start = 0;
                    while let Some(i) = finder.find(&text[start..]) {
                        let at = start + i;
                        if !fullword || is_word_bounded(hay, at, needle.len()) {
                            out.push(at);
                        }
                        start = at + 1;
                        deadline.check()?;
                    }
                }
                out.sort_unstable();
                out.dedup();
            }
            Searcher::Regex { re, fullword } => {
                for m in re.find_iter(hay) {
                    if !fullword || is_word_bounded(hay, m.start(), m.len()) {
                        out.push(m.start());
                    }
                    deadline.check()?;
                }
            }
            Searcher::Hex(tokens) => {
                let anchor = tokens.iter().position(|t| matches!(t, HexToken::Byte(_)));
                let len = tokens.len();
                if hay.len() < len {
                    return Ok(out);
                }
                let fits = |at: usize| {
                    tokens.iter().enumerate().all(|(k, t)| match t {
                        HexToken::Byte(b) => hay[at + k] == *b,
                        HexToken::Wildcard => true,
                    })
                };
                match anchor {
                    None => out.extend(0..=hay.len() - len),
                    Some(a) => {
                        let HexToken::Byte(first) = tokens[a] else {
                            unreachable!()
                        };
                        for pos in memchr::memchr_iter(first, hay) {
                            if pos < a || pos - a + len > hay.len() {
                                continue;
                            }
                            if fits(pos - a) {
                                out.push(pos - a);
                            }
                            deadline.check()?;
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

fn is_word_bounded(hay: &[u8], start: usize, len: usize) -> bool {
    let word = |b: u8| b.is_ascii_alphanumeric();
    let before = start == 0 || !word(hay[start - 1]);
    let after = start + len >= hay.len() || !word(hay[start + len]);
    before && after
}

pub(crate) struct CompiledYara {
    strings: Vec<CompiledString>,
    condition: Condition,
    defs: Vec<StringDef>,
}

impl CompiledYara {
    pub(crate) fn new(rule: &YaraRule) -> Self {
        Self {
            strings: rule.strings.iter().map(CompiledString::new).collect(),
            condition: rule.condition.clone(),
            defs: rule.strings.clone(),
        }
    }

    /// Offsets of all string hits when the condition holds.
    pub(crate) fn scan(
        &self,
        hay: &[u8],
        lower: &[u8],
        deadline: &Deadline,
    ) -> Result<Option<Vec<usize>>, Timeout> {
        let mut hits = Vec::with_capacity(self.strings.len());
        for s in &self.strings {
            deadline.check()?;
            hits.push((s.id.as_str(), s.find_all(hay, lower, deadline)?));
        }
        let ctx = EvalContext {
            counts: hits.iter().map(|(id, o)| (*id, o.len() as u64)).collect(),
            defs: &self.defs,
            filesize: hay.len() as u64,
        };
        if !evaluate(&self.condition, &ctx) {
            return Ok(None);
        }
        let mut offsets: Vec<usize> = hits.into_iter().flat_map(|(_, o)| o).collect();
        offsets.sort_unstable();
        offsets.dedup();
        Ok(Some(offsets))
    }
}

pub struct EvalContext<'a> {
    /// Hit count per string identifier.
    pub counts: Vec<(&'a str, u64)>,
    pub defs: &'a [StringDef],
    pub filesize: u64,
}

impl EvalContext<'_> {
    fn count(&self, id: &str) -> u64 {
        self.counts
            .iter()
            .find(|(k, _)| *k == id)
            .map_or(0, |(_, c)| *c)
    }
}

/// Evaluates a parsed condition.
pub fn evaluate(cond: &Condition, ctx: &EvalContext<'_>) -> bool {
    match cond {
        Condition::Bool(b) => *b,
        Condition::Str(id) => ctx.count(id) > 0,
        Condition::Count { id, op, value } => op.apply(ctx.count(id), *value),
        Condition::Filesize { op, value } => op.apply(ctx.filesize, *value),
        Condition::Of { quantifier, set } => {
            let members = set.resolve(ctx.defs);
            let matched = members.iter().filter(|id| ctx.count(id) > 0).count() as u64;
            match quantifier {
                Quantifier::All => matched == members.len() as u64,
                Quantifier::Any => matched >= 1,
                Quantifier::None => matched == 0,
                Quantifier::Count(n) => matched >= *n,
            }
        }
        Condition::Not(c) => !evaluate(c, ctx),
        Condition::And(cs) => cs.iter().all(|c| evaluate(c, ctx)),
        Condition::Or(cs) => cs.iter().any(|c| evaluate(c, ctx)),
    }
}
