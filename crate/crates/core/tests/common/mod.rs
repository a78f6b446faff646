//! Fixture kit shared by the integration tests and the `make_fixtures`
//! example: a deterministic archive packer, a rule-writing stand-in for the
//! language model, and helpers that lay out runnable configs.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use regex::Regex;
use rulesmith::digest::sha256_hex;
use rulesmith::llm::{LlmBackend, LlmError, Prompt, Stage};
use rulesmith::rule::RuleFormat;

pub fn crate_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

pub fn fixtures_dir() -> PathBuf {
    crate_dir().join("fixtures")
}

// ---------------------------------------------------------------- packing

/// Every regular file under `dir`, as sorted `(relative path, bytes)`.
pub fn read_tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = walkdir::WalkDir::new(dir)
        .sort_by_file_name()
        .into_iter()
        .filter_map(Result::ok)
        .filter(|e| e.file_type().is_file())
        .map(|e| {
            let rel = e
                .path()
                .strip_prefix(dir)
                .unwrap()
                .to_string_lossy()
                .replace('\\', "/");
            (rel, std::fs::read(e.path()).unwrap())
        })
        .collect();
    out.sort();
    out
}

/// Gzipped tarball with fixed owner, mode and `mtime` on every entry.
pub fn tar_gz_bytes(members: &[(String, Vec<u8>)], mtime: u64) -> Vec<u8> {
    let enc = flate2::GzBuilder::new()
        .mtime(0)
        .write(Vec::new(), flate2::Compression::default());
    let mut builder = tar::Builder::new(enc);
    for (name, data) in members {
        let mut header = tar::Header::new_gnu();
        header.set_size(data.len() as u64);
        header.set_mode(0o644);
        header.set_mtime(mtime);
        header.set_uid(0);
        header.set_gid(0);
        header.set_entry_type(tar::EntryType::Regular);
        builder
            .append_data(&mut header, name, data.as_slice())
            .unwrap();
    }
    builder.into_inner().unwrap().finish().unwrap()
}

pub fn zip_bytes(members: &[(String, Vec<u8>)]) -> Vec<u8> {
    let mut zw = zip::ZipWriter::new(std::io::Cursor::new(Vec::new()));
    let opts = zip::write::SimpleFileOptions::default()
        .last_modified_time(zip::DateTime::default())
        .unix_permissions(0o644);
    for (name, data) in members {
        zw.start_file(name.as_str(), opts).unwrap();
        zw.write_all(data).unwrap();
    }
    zw.finish().unwrap().into_inner()
}

/// Packs each `src/<eco>/<label>/<stem>/` tree to `dest/<eco>/<label>/<stem>.tar.gz`.
/// The stem directory itself is the single top-level entry of the archive.
pub fn pack_corpus(src: &Path, dest: &Path) -> Vec<PathBuf> {
    let mut written = Vec::new();
    for eco in ["pypi", "npm"] {
        for label in ["malicious", "legitimate"] {
            let dir = src.join(eco).join(label);
            let Ok(entries) = std::fs::read_dir(&dir) else {
                continue;
            };
            let mut stems: Vec<PathBuf> =
                entries.filter_map(Result::ok).map(|e| e.path()).collect();
            stems.sort();
            let out_dir = dest.join(eco).join(label);
            std::fs::create_dir_all(&out_dir).unwrap();
            for stem_dir in stems {
                let stem = stem_dir.file_name().unwrap().to_string_lossy().into_owned();
                let path = out_dir.join(format!("{stem}.tar.gz"));
                std::fs::write(&path, tar_gz_bytes(&read_tree(&stem_dir), 0)).unwrap();
                written.push(path);
            }
        }
    }
    written
}

/// Ten archives of six distinct packages: four copies differ only in
/// timestamps, container format or file name.
pub fn pack_dedup_set(corpus_src: &Path, dest: &Path) -> Vec<PathBuf> {
    std::fs::create_dir_all(dest).unwrap();
    let pkg = |label: &str, stem: &str| read_tree(&corpus_src.join("pypi").join(label).join(stem));
    let sets = [
        ("tinyslug-1.2.0", pkg("legitimate", "tinyslug-1.2.0")),
        ("envreport-0.9.1", pkg("legitimate", "envreport-0.9.1")),
        ("csvkit-lite-2.0.3", pkg("legitimate", "csvkit-lite-2.0.3")),
        ("reqeusts-2.31.0", pkg("malicious", "reqeusts-2.31.0")),
        ("colorsama-0.4.6", pkg("malicious", "colorsama-0.4.6")),
        ("pyhttpx-0.0.0", pkg("malicious", "pyhttpx-0.0.0")),
    ];
    let mut written = Vec::new();
    let mut put = |name: String, bytes: Vec<u8>| {
        let path = dest.join(name);
        std::fs::write(&path, bytes).unwrap();
        written.push(path);
    };
    for (stem, files) in &sets {
        put(format!("{stem}.tar.gz"), tar_gz_bytes(files, 0));
    }
    put(
        "tinyslug-1.2.0-rebuild.tar.gz".into(),
        tar_gz_bytes(&sets[0].1, 1_700_000_000),
    );
    put(
        "envreport-0.9.1.tgz".into(),
        tar_gz_bytes(&sets[1].1, 1_600_000_000),
    );
    put(
        "reqeusts-2.31.0-py3-none-any.zip".into(),
        zip_bytes(&sets[3].1),
    );
    put(
        "pyhttpx-0.0.0-mirror.tar.gz".into(),
        tar_gz_bytes(&sets[5].1, 86_400),
    );
    written.sort();
    written
}

// ------------------------------------------------------- synthetic analyst

fn sample_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?s)Sample \d+: \S+ lines \d+-\d+\n```(\w+)\n(.*?)\n```\n").unwrap()
    })
}

fn literal_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r#""([^"\\\n{}]{6,80})"|'([^'\\\n{}]{6,80})'"#).unwrap())
}

fn call_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"\b([A-Za-z_][A-Za-z0-9_]*(?:\.[A-Za-z_][A-Za-z0-9_]*)+)\(").unwrap()
    })
}

fn fenced_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?s)```(\w*)\n(.*?)\n```").unwrap())
}

const GENERIC_LITERALS: &[&str] = &[
    "utf-8",
    "Content-Type",
    "application/json",
    "User-Agent",
    "Mozilla/5.0",
    "__main__",
    "platform",
];

const CALL_MODULES: &[&str] = &[
    "socket",
    "getpass",
    "platform",
    "subprocess",
    "base64",
    "urllib",
    "requests",
    "https",
    "http",
    "child_process",
    "ctypes",
    "marshal",
    "zlib",
    "tempfile",
    "process",
    "os",
];

const GENERIC_CALLS: &[&str] = &[
    "os.path.join",
    "os.path.exists",
    "os.path.isfile",
    "os.path.expanduser",
    "os.environ.get",
];

/// Literal strings and module-qualified calls, in order of appearance.
pub fn features(code: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    let mut push = |s: &str| {
        if !out.iter().any(|o| o == s) {
            out.push(s.to_owned());
        }
    };
    for c in literal_re().captures_iter(code) {
        let s = c.get(1).or_else(|| c.get(2)).unwrap().as_str();
        if !GENERIC_LITERALS.contains(&s) && s.chars().any(|ch| !ch.is_whitespace()) {
            push(s);
        }
    }
    for c in call_re().captures_iter(code) {
        let s = &c[1];
        let module = s.split('.').next().unwrap();
        if CALL_MODULES.contains(&module) && !GENERIC_CALLS.contains(&s) {
            push(s);
        }
    }
    out
}

/// Features shared by every sample, or when fewer than two are shared the
/// most frequent ones. At most four. The flag tells whether they were shared.
pub fn pick_features(samples: &[String]) -> (Vec<String>, bool) {
    let per: Vec<Vec<String>> = samples.iter().map(|s| features(s)).collect();
    let Some(first) = per.first() else {
        return (Vec::new(), false);
    };
    let common: Vec<String> = first
        .iter()
        .filter(|f| per.iter().all(|p| p.contains(f)))
        .cloned()
        .collect();
    if common.len() >= 2 {
        return (common.into_iter().take(4).collect(), true);
    }
    let mut counts: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    let mut order = 0;
    for p in &per {
        for f in p {
            let e = counts.entry(f.as_str()).or_insert((0, order));
            e.0 += 1;
            order += 1;
        }
    }
    let mut ranked: Vec<(&str, (usize, usize))> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1 .0.cmp(&a.1 .0).then(a.1 .1.cmp(&b.1 .1)));
    (
        ranked
            .into_iter()
            .take(4)
            .map(|(f, _)| f.to_owned())
            .collect(),
        false,
    )
}

fn yara_escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

fn regex_escape_single_quoted(s: &str) -> String {
    regex::escape(s).replace('\'', "''")
}

fn slug(s: &str) -> String {
    let mut out: String = s
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() {
                c.to_ascii_lowercase()
            } else {
                '_'
            }
        })
        .collect();
    while out.contains("__") {
        out = out.replace("__", "_");
    }
    out.trim_matches('_').chars().take(24).collect()
}

fn yara_rule(name: &str, description: &str, feats: &[String], condition: &str) -> String {
    let mut t = format!("rule {name}\n{{\n    meta:\n        description = \"{}\"\n        author = \"rulesmith\"\n    strings:\n", yara_escape(description));
    for (i, f) in feats.iter().enumerate() {
        t.push_str(&format!("        $s{i} = \"{}\"\n", yara_escape(f)));
    }
    t.push_str(&format!("    condition:\n        {condition}\n}}"));
    t
}

fn condition(n: usize, shared: bool) -> &'static str {
    match (shared, n) {
        (false, _) => "any of them",
        (true, 3..) => "2 of them",
        (true, _) => "all of them",
    }
}

fn semgrep_rule(id: &str, message: &str, language: &str, feats: &[String]) -> String {
    let mut t = format!(
        "rules:\n  - id: {id}\n    message: '{}'\n    languages: [{language}]\n    severity: ERROR\n    pattern-either:\n",
        message.replace('\'', "''")
    );
    for f in feats {
        t.push_str(&format!(
            "      - pattern-regex: '{}'\n",
            regex_escape_single_quoted(f)
        ));
    }
    t.trim_end().to_owned()
}

fn reply(analysis: &str, fence: &str, rule: &str, scores: (f64, f64, f64)) -> String {
    format!(
        "Analysis:\n{analysis}\n\n```{fence}\n{rule}\n```\n\nconfidence: {:.2}\nmaliciousness: {:.2}\nrisk: {:.2}\n",
        scores.0, scores.1, scores.2
    )
}

fn fence_of(format: RuleFormat) -> &'static str {
    match format {
        RuleFormat::Yara => "yara",
        RuleFormat::Semgrep => "yaml",
    }
}

/// Deterministic stand-in for the analyst model. It writes rules from the
/// literal strings and module calls the samples share, and slips once: a
/// YARA draft for webhook-posting code references a string it never defines.
/// Fix prompts get the rule rebuilt from its own string table.
pub struct SyntheticAnalyst;

impl SyntheticAnalyst {
    fn craft_units(&self, prompt: &Prompt) -> String {
        let samples: Vec<(String, String)> = sample_re()
            .captures_iter(&prompt.user_text)
            .map(|c| (c[1].to_owned(), c[2].to_owned()))
            .collect();
        let code: Vec<String> = samples.iter().map(|(_, c)| c.clone()).collect();
        let (mut feats, shared) = pick_features(&code);
        if feats.is_empty() {
            let line = code
                .first()
                .and_then(|c| c.lines().map(str::trim).find(|l| l.len() >= 8))
                .unwrap_or("import os");
            feats.push(line.to_owned());
        }
        let language = samples
            .first()
            .map_or("python", |(l, _)| l.as_str())
            .to_owned();
        let tag = &sha256_hex(feats.join("\n").as_bytes())[..8];
        let stem = slug(&feats[0]);
        let description = format!("{} sample code sharing {}", language, feats.join(", "));
        let analysis = format!(
            "The samples are variants of one {language} routine. They share {} distinctive \
             indicators: {}. Matching on these keeps the rule tied to this family.",
            feats.len(),
            feats.join("; ")
        );
        let n = feats.len() as f64;
        let scores = (
            0.55 + 0.1 * n.min(4.0),
            0.7 + 0.05 * n.min(4.0),
            0.6 + 0.05 * n.min(4.0),
        );
        match prompt.rule_format {
            RuleFormat::Yara => {
                let slip = code.iter().any(|c| c.contains("discord.com/api/webhooks"));
                let base = condition(feats.len(), shared);
                let condition = if slip {
                    format!("{base} and $s{}", feats.len() + 4)
                } else {
                    base.to_owned()
                };
                let rule = yara_rule(
                    &format!("{language}_{stem}_{tag}"),
                    &description,
                    &feats,
                    &condition,
                );
                reply(&analysis, "yara", &rule, scores)
            }
            RuleFormat::Semgrep => {
                let id = format!("{language}-{}-{tag}", stem.replace('_', "-"));
                let rule = semgrep_rule(&id, &description, &language, &feats);
                reply(&analysis, "yaml", &rule, scores)
            }
        }
    }

    fn craft_metadata(&self, prompt: &Prompt) -> String {
        let json = fenced_re()
            .captures_iter(&prompt.user_text)
            .find(|c| &c[1] == "json")
            .map(|c| c[2].to_owned())
            .unwrap_or_default();
        let meta: serde_json::Value = serde_json::from_str(&json).unwrap_or_default();
        let name = meta["name"].as_str().unwrap_or("unknown").to_owned();
        let version = meta["version"].as_str().unwrap_or("").to_owned();
        let flags = prompt
            .user_text
            .lines()
            .find_map(|l| l.strip_prefix("Audit flags: "))
            .unwrap_or("none")
            .to_owned();
        let mut feats = vec![format!("\"{name}\"")];
        if version == "0.0.0" {
            feats.push("\"0.0.0\"".to_owned());
        }
        let analysis = format!(
            "Package {name} {version} was flagged by the metadata audit: {flags}. \
             The rule pins the package manifest that declares it."
        );
        let tag = &sha256_hex(format!("{name}\n{version}").as_bytes())[..8];
        match prompt.rule_format {
            RuleFormat::Yara => {
                let rule = yara_rule(
                    &format!("meta_{}_{tag}", slug(&name)),
                    &format!("manifest of flagged package {name}"),
                    &feats,
                    "all of them",
                );
                reply(&analysis, "yara", &rule, (0.6, 0.65, 0.55))
            }
            RuleFormat::Semgrep => {
                let id = format!("meta-{}-{tag}", slug(&name).replace('_', "-"));
                let rule = semgrep_rule(
                    &id,
                    &format!("manifest of flagged package {name}"),
                    "generic",
                    &feats[..1],
                );
                reply(&analysis, "yaml", &rule, (0.6, 0.65, 0.55))
            }
        }
    }

    fn refine(&self, prompt: &Prompt) -> String {
        let text = &prompt.user_text;
        let analysis = text
            .split_once("Analysis result:\n")
            .and_then(|(_, rest)| rest.split_once("\n\nRule:\n"))
            .map_or("", |(a, _)| a)
            .to_owned();
        let rule = fenced_re()
            .captures_iter(text)
            .last()
            .map(|c| c[2].to_owned())
            .unwrap_or_default();
        format!(
            "Analysis:\n{analysis}\nThe rule already follows the required structure; no change needed.\n\n```{}\n{rule}\n```\n",
            fence_of(prompt.rule_format)
        )
    }

    fn fix(&self, prompt: &Prompt) -> String {
        let rule = fenced_re()
            .captures_iter(&prompt.user_text)
            .last()
            .map(|c| c[2].to_owned())
            .unwrap_or_default();
        let fixed = match prompt.rule_format {
            RuleFormat::Yara => {
                let defined: BTreeSet<String> = rule
                    .lines()
                    .filter_map(|l| {
                        l.trim_start()
                            .split_once(" = ")
                            .map(|(id, _)| id.trim().to_owned())
                    })
                    .filter(|id| id.starts_with('$'))
                    .collect();
                let dangling = Regex::new(r" and (\$[A-Za-z0-9_]+)").unwrap();
                dangling
                    .replace_all(&rule, |c: &regex::Captures| {
                        if defined.contains(&c[1]) {
                            c[0].to_owned()
                        } else {
                            String::new()
                        }
                    })
                    .into_owned()
            }
            RuleFormat::Semgrep => rule,
        };
        format!(
            "The condition referenced a string that is not declared. The reference is removed.\n\n```{}\n{fixed}\n```\n",
            fence_of(prompt.rule_format)
        )
    }
}

impl LlmBackend for SyntheticAnalyst {
    fn id(&self) -> String {
        "synthetic-analyst".into()
    }

    fn complete_text(&self, prompt: &Prompt) -> Result<String, LlmError> {
        Ok(match prompt.stage {
            Stage::Craft if prompt.user_text.starts_with("Metadata:") => {
                self.craft_metadata(prompt)
            }
            Stage::Craft => self.craft_units(prompt),
            Stage::Refine => self.refine(prompt),
            Stage::Fix => self.fix(prompt),
        })
    }
}

/// Answers every fix prompt with the same broken rule.
pub struct StubbornAnalyst {
    pub rule: String,
}

impl LlmBackend for StubbornAnalyst {
    fn id(&self) -> String {
        "stubborn-analyst".into()
    }

    fn complete_text(&self, prompt: &Prompt) -> Result<String, LlmError> {
        Ok(format!(
            "I checked the rule again and it looks correct to me.\n\n```{}\n{}\n```\n",
            fence_of(prompt.rule_format),
            self.rule.trim_end()
        ))
    }
}

/// Sorts a recorded JSONL fixture so its bytes do not depend on thread timing.
pub fn sort_jsonl(path: &Path) {
    let text = std::fs::read_to_string(path).unwrap();
    let lines: BTreeSet<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    let mut out = lines.into_iter().collect::<Vec<_>>().join("\n");
    out.push('\n');
    std::fs::write(path, out).unwrap();
}

// ------------------------------------------------------------- harnesses

pub const STUBBORN_ANALYSIS: &str =
    "The loader downloads a second stage from a paste site and executes it in process.";

pub fn stubborn_draft() -> rulesmith::llm::RuleDraft {
    rulesmith::llm::RuleDraft {
        analysis_text: STUBBORN_ANALYSIS.to_owned(),
        rule_text: std::fs::read_to_string(fixtures_dir().join("stubborn/draft.yar")).unwrap(),
        rule_format: RuleFormat::Yara,
        provenance: rulesmith::rule::Provenance::Cluster { id: 0 },
        scores: Default::default(),
    }
}

pub const VARIANT_REPRESENTATIVES: [&str; 2] = ["v1.py", "v2.py"];
pub const VARIANT_HELD_OUT: [&str; 5] = ["v3.py", "v4.py", "v5.py", "v6.py", "v7.py"];

pub fn variant_file(name: &str) -> rulesmith::corpus::SourceFile {
    let bytes = std::fs::read(fixtures_dir().join("variants").join(name)).unwrap();
    rulesmith::corpus::SourceFile::from_bytes(name, &bytes)
}

/// The largest basic unit of each representative variant.
pub fn variant_units() -> Vec<rulesmith::segmenter::BasicUnit> {
    VARIANT_REPRESENTATIVES
        .iter()
        .map(|name| {
            rulesmith::segmenter::extract_basic_units(&variant_file(name))
                .into_iter()
                .max_by_key(|u| u.char_len)
                .unwrap()
        })
        .collect()
}

fn recorder(upstream: Box<dyn LlmBackend>, path: &Path) -> Box<dyn LlmBackend> {
    let _ = std::fs::remove_file(path);
    Box::new(rulesmith::llm::RecordBackend::new(upstream, path).unwrap())
}

/// Runs ingest through generate on the replay corpus against the synthetic
/// analyst, recording every exchange to `path`.
pub fn record_pipeline(path: &Path) -> rulesmith::cli::stages::GenerateReport {
    let scratch = tempfile::tempdir().unwrap();
    let mut cfg = rulesmith::cli::RunConfig::load(&fixtures_dir().join("replay.toml")).unwrap();
    cfg.out_dir = scratch.path().to_path_buf();
    let mut runner = rulesmith::cli::Runner::new(cfg)
        .unwrap()
        .with_backend(recorder(Box::new(SyntheticAnalyst), path));
    runner.ingest().unwrap();
    runner.segment().unwrap();
    runner.cluster().unwrap();
    let report = runner.generate().unwrap();
    sort_jsonl(path);
    report
}

/// Records the variant family rule to `path`.
pub fn record_variants(path: &Path) -> rulesmith::rule::Rule {
    let backend = recorder(Box::new(SyntheticAnalyst), path);
    let units = variant_units();
    let rule = rulesmith::cli::stages::generate_rule(
        rulesmith::llm::CraftInput::Units(&units),
        &rulesmith::rule::Provenance::Cluster { id: 0 },
        rulesmith::rule::RuleFormat::Yara,
        backend.as_ref(),
        &rulesmith::validator::AlignConfig::default(),
    )
    .unwrap();
    sort_jsonl(path);
    rule
}

/// Records the stubborn fix loop to `path`.
pub fn record_stubborn(path: &Path) -> rulesmith::validator::AlignmentFailure {
    let draft = stubborn_draft();
    let backend = recorder(
        Box::new(StubbornAnalyst {
            rule: draft.rule_text.clone(),
        }),
        path,
    );
    let failure = rulesmith::validator::align_rule(
        &draft,
        backend.as_ref(),
        &rulesmith::validator::AlignConfig::default(),
    )
    .unwrap_err();
    sort_jsonl(path);
    failure
}
