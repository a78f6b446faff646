//! Compiler for a YARA subset: one rule per text with meta, strings and
//! condition sections; text, regex and hex strings; boolean conditions with
//! string references, counts, `filesize` and `of` quantifiers.

use std::collections::BTreeSet;

use super::messages as msg;
use super::{CompileError, ErrorCode};
use crate::rule::{
    id_matches, CmpOp, Condition, HexToken, MetaValue, Quantifier, Rule, RuleBody, RuleFormat,
    StringDef, StringModifiers, StringPattern, StringSet, YaraRule,
};

const KEYWORDS: &[&str] = &[
    "all",
    "and",
    "any",
    "ascii",
    "at",
    "condition",
    "contains",
    "entrypoint",
    "false",
    "filesize",
    "for",
    "fullword",
    "global",
    "import",
    "in",
    "include",
    "matches",
    "meta",
    "nocase",
    "none",
    "not",
    "of",
    "or",
    "private",
    "rule",
    "strings",
    "them",
    "true",
    "wide",
];

#[derive(Debug, Clone, PartialEq)]
enum Kind {
    Ident(String),
    /// `$name`, with `wildcard` set for `$name*`.
    StrId {
        name: String,
        wildcard: bool,
    },
    CountId(String),
    Int(u64),
    Float(String),
    /// Raw text between the quotes, escapes untouched.
    Text(String),
    Regex {
        source: String,
        flags: String,
    },
    LBrace,
    RBrace,
    LParen,
    RParen,
    Comma,
    Colon,
    Assign,
    Cmp(CmpOp),
    Minus,
    Other(char),
}

#[derive(Debug, Clone)]
struct Tok {
    kind: Kind,
    line: u32,
    col: u32,
    start: usize,
    end: usize,
}

impl Tok {
    fn text<'a>(&self, src: &'a str) -> &'a str {
        &src[self.start..self.end]
    }
}

fn err_at(code: ErrorCode, text: String, line: u32, col: u32) -> CompileError {
    CompileError::located(code, text, line, col)
}

struct Lexer<'a> {
    src: &'a str,
    bytes: &'a [u8],
    pos: usize,
    line: u32,
    col: u32,
}

impl<'a> Lexer<'a> {
    fn bump(&mut self) -> Option<char> {
        let c = self.src[self.pos..].chars().next()?;
        self.pos += c.len_utf8();
        if c == '\n' {
            self.line += 1;
            self.col = 1;
        } else {
            self.col += 1;
        }
        Some(c)
    }

    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    fn peek_at(&self, n: usize) -> Option<u8> {
        self.bytes.get(self.pos + n).copied()
    }

    fn ident_tail(&mut self) -> String {
        let start = self.pos;
        while self
            .peek()
            .is_some_and(|b| b.is_ascii_alphanumeric() || b == b'_')
        {
            self.bump();
        }
        self.src[start..self.pos].to_owned()
    }
}

fn lex(src: &str) -> Result<Vec<Tok>, CompileError> {
    let mut lx = Lexer {
        src,
        bytes: src.as_bytes(),
        pos: 0,
        line: 1,
        col: 1,
    };
    let mut toks: Vec<Tok> = Vec::new();
    while let Some(b) = lx.peek() {
        let (line, col, start) = (lx.line, lx.col, lx.pos);
        if (b as char).is_ascii_whitespace() {
            lx.bump();
            continue;
        }
        if b == b'/' && lx.peek_at(1) == Some(b'/') {
            while lx.peek().is_some_and(|b| b != b'\n') {
                lx.bump();
            }
            continue;
        }
        if b == b'/' && lx.peek_at(1) == Some(b'*') {
            lx.bump();
            lx.bump();
            loop {
                match lx.peek() {
                    None => {
                        return Err(err_at(
                            ErrorCode::Syntax,
                            msg::unterminated_comment(),
                            line,
                            col,
                        ))
                    }
                    Some(b'*') if lx.peek_at(1) == Some(b'/') => {
                        lx.bump();
                        lx.bump();
                        break;
                    }
                    _ => {
                        lx.bump();
                    }
                }
            }
            continue;
        }
        let kind = match b {
            b'"' => {
                lx.bump();
                let body_start = lx.pos;
                loop {
                    match lx.peek() {
                        None | Some(b'\n') => {
                            return Err(err_at(
                                ErrorCode::Syntax,
                                msg::unterminated_string(),
                                line,
                                col,
                            ))
                        }
                        Some(b'\\') => {
                            lx.bump();
                            lx.bump();
                        }
                        Some(b'"') => break,
                        _ => {
                            lx.bump();
                        }
                    }
                }
                let body = src[body_start..lx.pos].to_owned();
                lx.bump();
                Kind::Text(body)
            }
            b'/' if matches!(toks.last().map(|t| &t.kind), Some(Kind::Assign)) => {
                lx.bump();
                let body_start = lx.pos;
                loop {
                    match lx.peek() {
                        None | Some(b'\n') => {
                            return Err(err_at(
                                ErrorCode::Syntax,
                                msg::unterminated_regex(),
                                line,
                                col,
                            ))
                        }
                        Some(b'\\') => {
                            lx.bump();
                            lx.bump();
                        }
                        Some(b'/') => break,
                        _ => {
                            lx.bump();
                        }
                    }
                }
                let source = src[body_start..lx.pos].to_owned();
                lx.bump();
                let flags = lx.ident_tail();
                Kind::Regex { source, flags }
            }
            b'$' | b'#' => {
                lx.bump();
                let name = lx.ident_tail();
                if b == b'#' {
                    Kind::CountId(name)
                } else {
                    let wildcard = lx.peek() == Some(b'*');
                    if wildcard {
                        lx.bump();
                    }
                    Kind::StrId { name, wildcard }
                }
            }
            b'0'..=b'9' => lex_number(&mut lx),
            b'a'..=b'z' | b'A'..=b'Z' | b'_' => Kind::Ident(lx.ident_tail()),
            _ => {
                let c = lx.bump().unwrap();
                let two = |lx: &mut Lexer, next: u8, yes: Kind, no: Kind| {
                    if lx.peek() == Some(next) {
                        lx.bump();
                        yes
                    } else {
                        no
                    }
                };
                match c {
                    '{' => Kind::LBrace,
                    '}' => Kind::RBrace,
                    '(' => Kind::LParen,
                    ')' => Kind::RParen,
                    ',' => Kind::Comma,
                    ':' => Kind::Colon,
                    '-' => Kind::Minus,
                    '=' => two(&mut lx, b'=', Kind::Cmp(CmpOp::Eq), Kind::Assign),
                    '!' => two(&mut lx, b'=', Kind::Cmp(CmpOp::Ne), Kind::Other('!')),
                    '<' => two(&mut lx, b'=', Kind::Cmp(CmpOp::Le), Kind::Cmp(CmpOp::Lt)),
                    '>' => two(&mut lx, b'=', Kind::Cmp(CmpOp::Ge), Kind::Cmp(CmpOp::Gt)),
                    other => Kind::Other(other),
                }
            }
        };
        toks.push(Tok {
            kind,
            line,
            col,
            start,
            end: lx.pos,
        });
    }
    Ok(toks)
}

fn lex_number(lx: &mut Lexer) -> Kind {
    let start = lx.pos;
    if lx.peek() == Some(b'0') && matches!(lx.peek_at(1), Some(b'x' | b'X')) {
        lx.bump();
        lx.bump();
        let digits_start = lx.pos;
        while lx.peek().is_some_and(|b| b.is_ascii_hexdigit()) {
            lx.bump();
        }
        return match u64::from_str_radix(&lx.src[digits_start..lx.pos], 16) {
            Ok(v) => Kind::Int(v),
            Err(_) => Kind::Other('0'),
        };
    }
    while lx.peek().is_some_and(|b| b.is_ascii_digit()) {
        lx.bump();
    }
    if lx.peek() == Some(b'.') && lx.peek_at(1).is_some_and(|b| b.is_ascii_digit()) {
        lx.bump();
        while lx.peek().is_some_and(|b| b.is_ascii_digit()) {
            lx.bump();
        }
        return Kind::Float(lx.src[start..lx.pos].to_owned());
    }
    let Ok(mut value) = lx.src[start..lx.pos].parse::<u64>() else {
        return Kind::Other('0');
    };
    let rest = &lx.src[lx.pos..];
    let unit_follows = |u: &str| {
        rest.starts_with(u)
            && !rest[2..]
                .bytes()
                .next()
                .is_some_and(|b| b.is_ascii_alphanumeric() || b == b'_')
    };
    if unit_follows("KB") {
        value = value.saturating_mul(1024);
        lx.bump();
        lx.bump();
    } else if unit_follows("MB") {
        value = value.saturating_mul(1024 * 1024);
        lx.bump();
        lx.bump();
    }
    Kind::Int(value)
}

fn check_balance(toks: &[Tok]) -> Result<(), CompileError> {
    let mut stack: Vec<(char, &Tok)> = Vec::new();
    for t in toks {
        match t.kind {
            Kind::LBrace => stack.push(('{', t)),
            Kind::LParen => stack.push(('(', t)),
            Kind::RBrace | Kind::RParen => {
                let (found, want) = if t.kind == Kind::RBrace {
                    ('}', '{')
                } else {
                    (')', '(')
                };
                match stack.pop() {
                    None => {
                        return Err(err_at(
                            ErrorCode::Syntax,
                            msg::unexpected_closer(found),
                            t.line,
                            t.col,
                        ))
                    }
                    Some((open, _)) if open != want => {
                        let expected = if open == '{' { '}' } else { ')' };
                        return Err(err_at(
                            ErrorCode::Syntax,
                            msg::mismatched_closer(found, expected),
                            t.line,
                            t.col,
                        ));
                    }
                    Some(_) => {}
                }
            }
            _ => {}
        }
    }
    match stack.first() {
        Some((open, t)) => Err(err_at(
            ErrorCode::Syntax,
            msg::unclosed(*open),
            t.line,
            t.col,
        )),
        None => Ok(()),
    }
}

/// Index of the token closing the bracket opened at `open`.
fn matching(toks: &[Tok], open: usize) -> usize {
    let mut depth = 0usize;
    for (i, t) in toks.iter().enumerate().skip(open) {
        match t.kind {
            Kind::LBrace | Kind::LParen => depth += 1,
            Kind::RBrace | Kind::RParen => {
                depth -= 1;
                if depth == 0 {
                    return i;
                }
            }
            _ => {}
        }
    }
    toks.len() - 1
}

/// Compiles UTF-8 bytes, reporting invalid encodings.
pub fn compile_yara_bytes(bytes: &[u8]) -> Result<Rule, Vec<CompileError>> {
    super::compile_bytes(bytes, RuleFormat::Yara)
}

pub fn compile_yara(text: &str) -> Result<Rule, Vec<CompileError>> {
    if text.starts_with('\u{feff}') {
        return Err(vec![CompileError::located(
            ErrorCode::Encoding,
            msg::bom(),
            1,
            1,
        )]);
    }
    let toks = lex(text).map_err(|e| vec![e])?;
    check_balance(&toks).map_err(|e| vec![e])?;
    let yara = Parser {
        src: text,
        toks: &toks,
    }
    .parse()?;
    Ok(Rule {
        text: text.to_owned(),
        format: RuleFormat::Yara,
        name: yara.name.clone(),
        body: RuleBody::Yara(yara),
        provenance: Default::default(),
        scores: Default::default(),
        taxonomy_tags: Default::default(),
        attempts: 0,
    })
}

struct Parser<'a> {
    src: &'a str,
    toks: &'a [Tok],
}

#[derive(Clone, Copy)]
struct Section {
    label: usize,
    start: usize,
    end: usize,
}

impl<'a> Parser<'a> {
    fn show(&self, t: &Tok) -> String {
        t.text(self.src).chars().take(40).collect()
    }

    fn syntax(&self, t: &Tok, text: String) -> CompileError {
        err_at(ErrorCode::Syntax, text, t.line, t.col)
    }

    fn parse(&self) -> Result<YaraRule, Vec<CompileError>> {
        let toks = self.toks;
        let Some(rule_at) = toks
            .iter()
            .position(|t| t.kind == Kind::Ident("rule".into()))
        else {
            if let Some(t) = toks.first() {
                if let Kind::Ident(w) = &t.kind {
                    if w == "import" || w == "include" {
                        return Err(vec![self.syntax(t, msg::unsupported_directive(w))]);
                    }
                }
            }
            return Err(vec![CompileError::new(
                ErrorCode::MissingSection,
                msg::missing_header(),
            )]);
        };
        for t in &toks[..rule_at] {
            match &t.kind {
                Kind::Ident(w) if w == "private" || w == "global" => {}
                Kind::Ident(w) if w == "import" || w == "include" => {
                    return Err(vec![self.syntax(t, msg::unsupported_directive(w))]);
                }
                _ => {
                    return Err(vec![self.syntax(
                        t,
                        msg::unexpected_token(&self.show(t), "before the rule header"),
                    )])
                }
            }
        }

        let rule_tok = &toks[rule_at];
        let mut i = rule_at + 1;
        let name = match toks.get(i).map(|t| &t.kind) {
            Some(Kind::Ident(n)) if KEYWORDS.contains(&n.as_str()) => {
                return Err(vec![self.syntax(&toks[i], msg::keyword_as_identifier(n))])
            }
            Some(Kind::Ident(n)) => n.clone(),
            Some(_) => return Err(vec![self.syntax(&toks[i], msg::expected_rule_identifier())]),
            None => return Err(vec![self.syntax(rule_tok, msg::expected_rule_identifier())]),
        };
        i += 1;
        let mut tags = Vec::new();
        if toks.get(i).map(|t| &t.kind) == Some(&Kind::Colon) {
            i += 1;
            while let Some(Kind::Ident(tag)) = toks.get(i).map(|t| &t.kind) {
                tags.push(tag.clone());
                i += 1;
            }
        }
        match toks.get(i) {
            Some(t) if t.kind == Kind::LBrace => {}
            Some(t) => return Err(vec![self.syntax(t, msg::expected_open_brace())]),
            None => return Err(vec![self.syntax(rule_tok, msg::expected_open_brace())]),
        }
        let open = i;
        let close = matching(toks, open);
        if let Some(t) = toks.get(close + 1) {
            let text = if t.kind == Kind::Ident("rule".into()) {
                msg::multiple_rules()
            } else {
                msg::trailing_content(&self.show(t))
            };
            return Err(vec![self.syntax(t, text)]);
        }

        let sections = self.find_sections(open + 1, close)?;
        let [meta, strings, condition] = sections;

        let mut syntax = Vec::new();
        let mut semantic = Vec::new();
        let meta = self.parse_meta(meta, &mut syntax, &mut semantic);
        let strings = self.parse_strings(strings, &mut syntax);
        let condition = match self.parse_condition(condition) {
            Ok(c) => Some(c),
            Err(e) => {
                syntax.push(e);
                None
            }
        };
        if !syntax.is_empty() {
            return Err(syntax);
        }
        let condition = condition.expect("condition parsed");

        let mut undefined = Vec::new();
        let mut seen = BTreeSet::new();
        for r in condition.references() {
            if !seen.insert(r) {
                continue;
            }
            if strings.iter().any(|s| id_matches(r, &s.id)) {
                continue;
            }
            let text = if r.ends_with('*') {
                msg::undefined_string_set(r)
            } else {
                msg::undefined_string(r)
            };
            let tok = self.ref_token(condition_range(&sections[2]), r);
            undefined.push(match tok {
                Some(t) => err_at(ErrorCode::UndefinedString, text, t.line, t.col),
                None => CompileError::new(ErrorCode::UndefinedString, text),
            });
        }
        let mut regex_errors = Vec::new();
        for s in &strings {
            if let StringPattern::Regex {
                source,
                case_insensitive,
                dot_all,
            } = &s.pattern
            {
                if let Err(e) =
                    build_regex(source, *case_insensitive || s.modifiers.nocase, *dot_all)
                {
                    regex_errors.push(CompileError::new(
                        ErrorCode::BadRegex,
                        msg::bad_regex(&s.id, &first_line(&e.to_string())),
                    ));
                }
            }
        }
        let mut errors = undefined;
        errors.extend(regex_errors);
        errors.extend(semantic);
        if !errors.is_empty() {
            return Err(errors);
        }
        Ok(YaraRule {
            name,
            tags,
            meta,
            strings,
            condition,
        })
    }

    fn ref_token(&self, range: (usize, usize), id: &str) -> Option<&Tok> {
        self.toks[range.0..range.1].iter().find(|t| match &t.kind {
            Kind::StrId { name, wildcard } => {
                if *wildcard {
                    format!("{name}*") == id
                } else {
                    name == id
                }
            }
            Kind::CountId(name) => name == id,
            _ => false,
        })
    }

    /// Locates `meta:`, `strings:` and `condition:` labels at body depth.
    fn find_sections(&self, start: usize, end: usize) -> Result<[Section; 3], Vec<CompileError>> {
        let toks = self.toks;
        let names = ["meta", "strings", "condition"];
        let mut found: [Option<usize>; 3] = [None; 3];
        let mut order = Vec::new();
        let mut errors = Vec::new();
        let mut depth = 0i32;
        for i in start..end {
            match &toks[i].kind {
                Kind::LBrace | Kind::LParen => depth += 1,
                Kind::RBrace | Kind::RParen => depth -= 1,
                Kind::Ident(w) if depth == 0 => {
                    if let Some(slot) = names.iter().position(|n| n == w) {
                        if toks.get(i + 1).map(|t| &t.kind) == Some(&Kind::Colon) {
                            if found[slot].is_some() {
                                errors.push(self.syntax(&toks[i], msg::duplicate_section(w)));
                            } else {
                                found[slot] = Some(i);
                                order.push(slot);
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        if !errors.is_empty() {
            return Err(errors);
        }
        let missing: Vec<CompileError> = names
            .iter()
            .zip(found)
            .filter(|(_, f)| f.is_none())
            .map(|(n, _)| CompileError::new(ErrorCode::MissingSection, msg::missing_section(n)))
            .collect();
        if !missing.is_empty() {
            return Err(missing);
        }
        if order != [0, 1, 2] {
            let t = &toks[found[order[1]].unwrap()];
            return Err(vec![self.syntax(t, msg::section_order())]);
        }
        let labels = found.map(|f| f.unwrap());
        if labels[0] > start {
            let t = &toks[start];
            return Err(vec![self.syntax(
                t,
                msg::unexpected_token(&self.show(t), "before the first section"),
            )]);
        }
        let bounds = [labels[1], labels[2], end];
        let mut out = [Section {
            label: 0,
            start: 0,
            end: 0,
        }; 3];
        let mut empty = Vec::new();
        for k in 0..3 {
            out[k] = Section {
                label: labels[k],
                start: labels[k] + 2,
                end: bounds[k],
            };
            if k > 0 && out[k].start >= out[k].end {
                let t = &toks[labels[k]];
                empty.push(err_at(
                    ErrorCode::MissingSection,
                    msg::empty_section(names[k]),
                    t.line,
                    t.col,
                ));
            }
        }
        if !empty.is_empty() {
            return Err(empty);
        }
        Ok(out)
    }

    fn parse_meta(
        &self,
        sec: Section,
        syntax: &mut Vec<CompileError>,
        semantic: &mut Vec<CompileError>,
    ) -> Vec<(String, MetaValue)> {
        let toks = &self.toks[sec.start..sec.end];
        let mut out = Vec::new();
        let mut i = 0;
        let next_entry = |from: usize| {
            (from..toks.len())
                .find(|&j| {
                    matches!(toks[j].kind, Kind::Ident(_))
                        && toks.get(j + 1).map(|t| &t.kind) == Some(&Kind::Assign)
                        && toks[j].line > toks[from - 1].line
                })
                .unwrap_or(toks.len())
        };
        while i < toks.len() {
            let key = match &toks[i].kind {
                Kind::Ident(k) => k.clone(),
                _ => {
                    syntax.push(self.syntax(
                        &toks[i],
                        msg::expected_meta_identifier(&self.show(&toks[i])),
                    ));
                    return out;
                }
            };
            if toks.get(i + 1).map(|t| &t.kind) != Some(&Kind::Assign) {
                let t = toks.get(i + 1).unwrap_or(&toks[i]);
                syntax.push(self.syntax(t, msg::expected_equals(&key)));
                return out;
            }
            let vi = i + 2;
            let Some(vt) = toks.get(vi) else {
                syntax.push(self.syntax(&toks[i + 1], msg::bad_meta_value(&key, "")));
                return out;
            };
            let parsed = match &vt.kind {
                Kind::Text(raw) => match unescape(raw) {
                    Ok(bytes) => Some((
                        MetaValue::Str(String::from_utf8_lossy(&bytes).into_owned()),
                        1,
                    )),
                    Err(seq) => {
                        syntax.push(self.syntax(vt, msg::bad_escape(&key, &seq)));
                        Some((MetaValue::Str(String::new()), 1))
                    }
                },
                Kind::Int(v) => i64::try_from(*v).ok().map(|v| (MetaValue::Int(v), 1)),
                Kind::Minus => match toks.get(vi + 1).map(|t| &t.kind) {
                    Some(Kind::Int(v)) => i64::try_from(*v).ok().map(|v| (MetaValue::Int(-v), 2)),
                    _ => None,
                },
                Kind::Ident(w) if w == "true" => Some((MetaValue::Bool(true), 1)),
                Kind::Ident(w) if w == "false" => Some((MetaValue::Bool(false), 1)),
                _ => None,
            };
            let used = match parsed {
                Some((value, used)) => {
                    out.push((key, value));
                    used
                }
                None => {
                    let stop = next_entry(vi + 1).max(vi + 1);
                    let value = &self.src[vt.start..toks[stop - 1].end];
                    semantic.push(err_at(
                        ErrorCode::BadMeta,
                        msg::bad_meta_value(&key, value),
                        vt.line,
                        vt.col,
                    ));
                    stop - vi
                }
            };
            i = vi + used;
        }
        out
    }

    fn parse_strings(&self, sec: Section, syntax: &mut Vec<CompileError>) -> Vec<StringDef> {
        let toks = self.toks;
        let mut out: Vec<StringDef> = Vec::new();
        let mut i = sec.start;
        while i < sec.end {
            let t = &toks[i];
            let id = match &t.kind {
                Kind::StrId {
                    name,
                    wildcard: false,
                } if name.is_empty() => {
                    syntax.push(self.syntax(t, msg::anonymous_string()));
                    return out;
                }
                Kind::StrId {
                    name,
                    wildcard: false,
                } => name.clone(),
                _ => {
                    syntax.push(self.syntax(t, msg::expected_string_identifier(&self.show(t))));
                    return out;
                }
            };
            if out.iter().any(|s| s.id == id) {
                syntax.push(self.syntax(t, msg::duplicate_string(&id)));
            }
            if toks.get(i + 1).map(|t| &t.kind) != Some(&Kind::Assign) || i + 1 >= sec.end {
                let at = toks.get(i + 1).filter(|_| i + 1 < sec.end).unwrap_or(t);
                syntax.push(self.syntax(at, msg::expected_equals(&format!("${id}"))));
                return out;
            }
            i += 2;
            let Some(vt) = toks.get(i).filter(|_| i < sec.end) else {
                syntax.push(self.syntax(t, msg::expected_string_value(&id, "")));
                return out;
            };
            let pattern = match &vt.kind {
                Kind::Text(raw) => {
                    i += 1;
                    match unescape(raw) {
                        Ok(bytes) if bytes.is_empty() => {
                            syntax.push(self.syntax(vt, msg::empty_string(&id)));
                            None
                        }
                        Ok(bytes) => Some(StringPattern::Text { bytes }),
                        Err(seq) => {
                            syntax.push(self.syntax(vt, msg::bad_escape(&id, &seq)));
                            None
                        }
                    }
                }
                Kind::Regex { source, flags } => {
                    i += 1;
                    let mut ci = false;
                    let mut dot_all = false;
                    for f in flags.chars() {
                        match f {
                            'i' => ci = true,
                            's' => dot_all = true,
                            other => syntax.push(self.syntax(vt, msg::bad_regex_flag(&id, other))),
                        }
                    }
                    if source.is_empty() {
                        syntax.push(self.syntax(vt, msg::empty_string(&id)));
                    }
                    Some(StringPattern::Regex {
                        source: source.clone(),
                        case_insensitive: ci,
                        dot_all,
                    })
                }
                Kind::LBrace => {
                    let close = matching(toks, i);
                    let body = &self.src[vt.end..toks[close].start];
                    i = close + 1;
                    match parse_hex(body) {
                        Ok(tokens) if tokens.is_empty() => {
                            syntax.push(self.syntax(vt, msg::empty_hex(&id)));
                            None
                        }
                        Ok(tokens) => Some(StringPattern::Hex { tokens }),
                        Err(chunk) => {
                            syntax.push(self.syntax(vt, msg::bad_hex(&id, &chunk)));
                            None
                        }
                    }
                }
                _ => {
                    syntax.push(self.syntax(vt, msg::expected_string_value(&id, &self.show(vt))));
                    return out;
                }
            };
            let mut modifiers = StringModifiers::default();
            while i < sec.end {
                let Kind::Ident(word) = &toks[i].kind else {
                    break;
                };
                let is_hex = matches!(pattern, Some(StringPattern::Hex { .. }));
                let flag = match word.as_str() {
                    "nocase" => &mut modifiers.nocase,
                    "wide" => &mut modifiers.wide,
                    "ascii" => &mut modifiers.ascii,
                    "fullword" => &mut modifiers.fullword,
                    "private" => &mut modifiers.private,
                    _ => {
                        syntax.push(self.syntax(&toks[i], msg::unknown_modifier(&id, word)));
                        i += 1;
                        continue;
                    }
                };
                *flag = true;
                if is_hex && word != "private" {
                    syntax.push(self.syntax(&toks[i], msg::hex_modifier(&id, word)));
                }
                i += 1;
            }
            if let Some(pattern) = pattern {
                out.push(StringDef {
                    id,
                    pattern,
                    modifiers,
                });
            }
        }
        out
    }

    fn parse_condition(&self, sec: Section) -> Result<Condition, CompileError> {
        let mut cp = CondParser {
            p: self,
            pos: sec.start,
            end: sec.end,
        };
        let c = cp.or()?;
        if cp.pos < cp.end {
            let t = &self.toks[cp.pos];
            return Err(self.syntax(t, msg::condition_unexpected(&self.show(t))));
        }
        let _ = sec.label;
        Ok(c)
    }
}

fn condition_range(sec: &Section) -> (usize, usize) {
    (sec.start, sec.end)
}

struct CondParser<'p, 'a> {
    p: &'p Parser<'a>,
    pos: usize,
    end: usize,
}

impl CondParser<'_, '_> {
    fn peek(&self) -> Option<&Kind> {
        (self.pos < self.end).then(|| &self.p.toks[self.pos].kind)
    }

    fn peek_word(&self) -> Option<&str> {
        match self.peek() {
            Some(Kind::Ident(w)) => Some(w),
            _ => None,
        }
    }

    fn error_here(&self) -> CompileError {
        if self.pos < self.end {
            let t = &self.p.toks[self.pos];
            let word = self.p.show(t);
            let text = if matches!(
                word.as_str(),
                "at" | "in" | "for" | "matches" | "contains" | "entrypoint"
            ) {
                msg::condition_unsupported(&word)
            } else {
                msg::condition_unexpected(&word)
            };
            self.p.syntax(t, text)
        } else {
            let t = &self.p.toks[self.end.saturating_sub(1)];
            self.p.syntax(t, msg::condition_unexpected_end())
        }
    }

    fn or(&mut self) -> Result<Condition, CompileError> {
        let mut items = vec![self.and()?];
        while self.peek_word() == Some("or") {
            self.pos += 1;
            items.push(self.and()?);
        }
        Ok(flatten(items, false))
    }

    fn and(&mut self) -> Result<Condition, CompileError> {
        let mut items = vec![self.unary()?];
        while self.peek_word() == Some("and") {
            self.pos += 1;
            items.push(self.unary()?);
        }
        Ok(flatten(items, true))
    }

    fn unary(&mut self) -> Result<Condition, CompileError> {
        if self.peek_word() == Some("not") {
            self.pos += 1;
            return Ok(Condition::Not(Box::new(self.unary()?)));
        }
        self.primary()
    }

    fn cmp_int(&mut self) -> Result<(CmpOp, u64), CompileError> {
        let Some(Kind::Cmp(op)) = self.peek().cloned() else {
            return Err(self.error_here());
        };
        self.pos += 1;
        let Some(Kind::Int(v)) = self.peek().cloned() else {
            return Err(self.error_here());
        };
        self.pos += 1;
        Ok((op, v))
    }

    fn primary(&mut self) -> Result<Condition, CompileError> {
        let Some(kind) = self.peek().cloned() else {
            return Err(self.error_here());
        };
        match kind {
            Kind::LParen => {
                self.pos += 1;
                let inner = self.or()?;
                if self.peek() != Some(&Kind::RParen) {
                    return Err(self.error_here());
                }
                self.pos += 1;
                Ok(inner)
            }
            Kind::StrId {
                name,
                wildcard: false,
            } if !name.is_empty() => {
                self.pos += 1;
                Ok(Condition::Str(name))
            }
            Kind::CountId(id) if !id.is_empty() => {
                self.pos += 1;
                let (op, value) = self.cmp_int()?;
                Ok(Condition::Count { id, op, value })
            }
            Kind::Ident(w) if w == "true" || w == "false" => {
                self.pos += 1;
                Ok(Condition::Bool(w == "true"))
            }
            Kind::Ident(w) if w == "filesize" => {
                self.pos += 1;
                let (op, value) = self.cmp_int()?;
                Ok(Condition::Filesize { op, value })
            }
            Kind::Ident(w) if matches!(w.as_str(), "all" | "any" | "none") => {
                self.pos += 1;
                let q = match w.as_str() {
                    "all" => Quantifier::All,
                    "any" => Quantifier::Any,
                    _ => Quantifier::None,
                };
                self.of(q)
            }
            Kind::Int(n) => {
                self.pos += 1;
                self.of(Quantifier::Count(n))
            }
            _ => Err(self.error_here()),
        }
    }

    fn of(&mut self, quantifier: Quantifier) -> Result<Condition, CompileError> {
        if self.peek_word() != Some("of") {
            return Err(self.error_here());
        }
        self.pos += 1;
        if self.peek_word() == Some("them") {
            self.pos += 1;
            return Ok(Condition::Of {
                quantifier,
                set: StringSet::Them,
            });
        }
        if self.peek() != Some(&Kind::LParen) {
            return Err(self.error_here());
        }
        self.pos += 1;
        let mut ids = Vec::new();
        loop {
            match self.peek().cloned() {
                Some(Kind::StrId { name, wildcard }) if !name.is_empty() || wildcard => {
                    self.pos += 1;
                    ids.push(if wildcard { format!("{name}*") } else { name });
                }
                _ => return Err(self.error_here()),
            }
            match self.peek() {
                Some(Kind::Comma) => self.pos += 1,
                Some(Kind::RParen) => {
                    self.pos += 1;
                    break;
                }
                _ => return Err(self.error_here()),
            }
        }
        Ok(Condition::Of {
            quantifier,
            set: StringSet::Ids(ids),
        })
    }
}

fn flatten(items: Vec<Condition>, and: bool) -> Condition {
    if items.len() == 1 {
        return items.into_iter().next().unwrap();
    }
    let mut out = Vec::new();
    for c in items {
        match (c, and) {
            (Condition::And(inner), true) | (Condition::Or(inner), false) => out.extend(inner),
            (c, _) => out.push(c),
        }
    }
    if and {
        Condition::And(out)
    } else {
        Condition::Or(out)
    }
}

/// Resolves YARA text escapes. Returns the offending sequence on error.
pub fn unescape(raw: &str) -> Result<Vec<u8>, String> {
    let bytes = raw.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] != b'\\' {
            out.push(bytes[i]);
            i += 1;
            continue;
        }
        match bytes.get(i + 1) {
            Some(b'"') => out.push(b'"'),
            Some(b'\\') => out.push(b'\\'),
            Some(b'n') => out.push(b'\n'),
            Some(b't') => out.push(b'\t'),
            Some(b'r') => out.push(b'\r'),
            Some(b'x') => {
                let hex = raw.get(i + 2..i + 4).unwrap_or("");
                match u8::from_str_radix(hex, 16) {
                    Ok(v) if hex.len() == 2 => {
                        out.push(v);
                        i += 4;
                        continue;
                    }
                    _ => return Err(raw[i..(i + 4).min(raw.len())].to_owned()),
                }
            }
            _ => {
                let end = raw[i + 1..]
                    .chars()
                    .next()
                    .map_or(raw.len(), |c| i + 1 + c.len_utf8());
                return Err(raw[i..end].to_owned());
            }
        }
        i += 2;
    }
    Ok(out)
}

fn parse_hex(body: &str) -> Result<Vec<HexToken>, String> {
    let mut out = Vec::new();
    for chunk in body.split_ascii_whitespace() {
        let b = chunk.as_bytes();
        if b.len() % 2 != 0 {
            return Err(chunk.to_owned());
        }
        for pair in b.chunks(2) {
            match pair {
                [b'?', b'?'] => out.push(HexToken::Wildcard),
                [h, l] if h.is_ascii_hexdigit() && l.is_ascii_hexdigit() => {
                    let s = std::str::from_utf8(pair).unwrap();
                    out.push(HexToken::Byte(u8::from_str_radix(s, 16).unwrap()));
                }
                _ => return Err(chunk.to_owned()),
            }
        }
    }
    Ok(out)
}

/// Builds the byte regex used for a YARA regex string.
pub fn build_regex(
    source: &str,
    case_insensitive: bool,
    dot_all: bool,
) -> Result<regex::bytes::Regex, regex::Error> {
    regex::bytes::RegexBuilder::new(source)
        .unicode(false)
        .case_insensitive(case_insensitive)
        .dot_matches_new_line(dot_all)
        .size_limit(1 << 22)
        .build()
}

fn first_line(s: &str) -> String {
    s.lines()
        .filter(|l| l.trim_start().starts_with("error:"))
        .map(|l| l.trim().trim_start_matches("error:").trim().to_owned())
        .next()
        .unwrap_or_else(|| s.lines().last().unwrap_or("").trim().to_owned())
}
