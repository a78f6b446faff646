//! Diagnostic wording. Fix prompts quote these strings verbatim, so changes
//! here change replay fixture digests.

pub fn bom() -> String {
    "file starts with a UTF-8 byte order mark; save the rule as UTF-8 without BOM".into()
}

pub fn invalid_utf8(offset: usize) -> String {
    format!("invalid UTF-8 byte sequence at byte offset {offset}")
}

pub fn unterminated_string() -> String {
    "unterminated string literal".into()
}

pub fn unterminated_regex() -> String {
    "unterminated regular expression".into()
}

pub fn unterminated_comment() -> String {
    "unterminated block comment".into()
}

pub fn unexpected_closer(found: char) -> String {
    format!("unexpected '{found}' without a matching opening bracket")
}

pub fn mismatched_closer(found: char, expected: char) -> String {
    format!("found '{found}' but expected '{expected}'")
}

pub fn unclosed(open: char) -> String {
    format!("'{open}' is never closed")
}

pub fn missing_header() -> String {
    "missing rule header: a rule must begin with the keyword 'rule' followed by an identifier"
        .into()
}

pub fn unsupported_directive(word: &str) -> String {
    format!("'{word}' directives are not supported")
}

pub fn expected_rule_identifier() -> String {
    "expected a rule identifier after 'rule'".into()
}

pub fn keyword_as_identifier(word: &str) -> String {
    format!("'{word}' is a reserved keyword and cannot be used as an identifier")
}

pub fn expected_open_brace() -> String {
    "expected '{' after the rule header".into()
}

pub fn multiple_rules() -> String {
    "only one rule per file is supported".into()
}

pub fn trailing_content(found: &str) -> String {
    format!("unexpected '{found}' after the end of the rule")
}

pub fn unexpected_token(found: &str, context: &str) -> String {
    format!("unexpected '{found}' {context}")
}

pub fn missing_section(name: &str) -> String {
    format!("missing '{name}' section")
}

pub fn empty_section(name: &str) -> String {
    format!("empty '{name}' section")
}

pub fn duplicate_section(name: &str) -> String {
    format!("duplicate '{name}' section")
}

pub fn section_order() -> String {
    "sections must appear in the order meta, strings, condition".into()
}

pub fn expected_meta_identifier(found: &str) -> String {
    format!("expected a meta identifier, found '{found}'")
}

pub fn expected_equals(after: &str) -> String {
    format!("expected '=' after '{after}'")
}

pub fn bad_meta_value(key: &str, value: &str) -> String {
    format!("meta field '{key}' has invalid value '{value}': values must be quoted strings, integers or true/false")
}

pub fn expected_string_identifier(found: &str) -> String {
    format!("expected a string identifier such as $a, found '{found}'")
}

pub fn anonymous_string() -> String {
    "anonymous strings ('$ = ...') are not supported; give every string a name".into()
}

pub fn duplicate_string(id: &str) -> String {
    format!("duplicated string identifier ${id}")
}

pub fn expected_string_value(id: &str, found: &str) -> String {
    format!("string ${id} must be a quoted text, a /regex/ or a {{ hex }} pattern, found '{found}'")
}

pub fn empty_string(id: &str) -> String {
    format!("string ${id} is empty")
}

pub fn bad_escape(id: &str, seq: &str) -> String {
    format!("invalid escape sequence '{seq}' in string ${id}")
}

pub fn unknown_modifier(id: &str, word: &str) -> String {
    format!("unsupported modifier '{word}' on string ${id}")
}

pub fn hex_modifier(id: &str, word: &str) -> String {
    format!("modifier '{word}' cannot be used with hex string ${id}")
}

pub fn bad_hex(id: &str, chunk: &str) -> String {
    format!("invalid hex token '{chunk}' in string ${id}: use byte pairs like 4D or ?? wildcards")
}

pub fn empty_hex(id: &str) -> String {
    format!("hex string ${id} has no bytes")
}

pub fn bad_regex_flag(id: &str, flag: char) -> String {
    format!("unsupported regular expression flag '{flag}' on string ${id}")
}

pub fn condition_unexpected(found: &str) -> String {
    format!("syntax error in condition near '{found}'")
}

pub fn condition_unexpected_end() -> String {
    "condition ends unexpectedly".into()
}

pub fn condition_unsupported(word: &str) -> String {
    format!("'{word}' is not supported in conditions")
}

pub fn undefined_string(id: &str) -> String {
    format!("undefined string identifier ${id} used in condition")
}

pub fn undefined_string_set(pattern: &str) -> String {
    format!("string set entry ${pattern} does not match any defined string")
}

pub fn bad_regex(id: &str, detail: &str) -> String {
    format!("regular expression in ${id} does not compile: {detail}")
}

pub fn invalid_yaml(detail: &str) -> String {
    format!("invalid YAML: {detail}")
}

pub fn missing_rules_list() -> String {
    "missing top-level 'rules' list".into()
}

pub fn empty_rules_list() -> String {
    "'rules' must be a non-empty list".into()
}

pub fn rule_not_mapping(index: usize) -> String {
    format!("rules[{index}] is not a mapping")
}

pub fn missing_field(rule: &str, field: &str) -> String {
    format!("rule '{rule}': missing {field}")
}

pub fn field_type(rule: &str, field: &str, expected: &str) -> String {
    format!("rule '{rule}': field '{field}' must be {expected}")
}

pub fn bad_severity(rule: &str, value: &str) -> String {
    format!("rule '{rule}': invalid severity '{value}' (expected INFO, WARNING or ERROR)")
}

pub fn bad_language(rule: &str, value: &str) -> String {
    format!("rule '{rule}': unsupported language '{value}'")
}

pub fn missing_pattern(rule: &str) -> String {
    format!("rule '{rule}': missing pattern clause (one of pattern, patterns, pattern-either, pattern-regex)")
}

pub fn multiple_patterns(rule: &str) -> String {
    format!("rule '{rule}': more than one top-level pattern clause")
}

pub fn unknown_operator(rule: &str, key: &str) -> String {
    format!("rule '{rule}': unknown pattern operator '{key}'")
}

pub fn operator_shape(rule: &str, key: &str) -> String {
    format!("rule '{rule}': '{key}' entries must be single-key mappings")
}

pub fn empty_operator(rule: &str, key: &str) -> String {
    format!("rule '{rule}': '{key}' must not be empty")
}

pub fn pattern_not_code(rule: &str, detail: &str) -> String {
    format!("rule '{rule}': pattern is not valid code: {detail}")
}

pub fn bad_pattern_regex(rule: &str, detail: &str) -> String {
    format!("rule '{rule}': pattern-regex does not compile: {detail}")
}

pub fn duplicate_rule_id(rule: &str) -> String {
    format!("duplicate rule id '{rule}'")
}
