//! Static metadata extraction. Nothing here ever runs package code.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use regex::Regex;
use walkdir::WalkDir;

use super::registry::{self, RegistryConfig};
use super::{Dependency, Ecosystem, MetadataError, MetadataSource, PackageMetadata, PackageRecord};

/// Tries, in order: PKG-INFO / egg-info / dist-info METADATA, the setup file
/// (`setup.py`, or `package.json` for npm), and, when allowed, the registry.
/// The first method yielding a non-empty name wins.
#[allow(clippy::result_large_err)]
pub fn extract_metadata(
    record: &PackageRecord,
    allow_network: bool,
    registry_cfg: &RegistryConfig,
) -> Result<PackageMetadata, MetadataError> {
    if let Some(meta) = from_info_files(&record.root) {
        return Ok(meta);
    }
    if let Some(meta) = from_setup_file(record) {
        return Ok(meta);
    }
    if allow_network {
        let name = package_name_from_stem(&record.archive_stem);
        match registry::fetch_metadata(registry_cfg, record.ecosystem, &name) {
            Ok(meta) if !meta.name.is_empty() => return Ok(meta),
            Ok(_) => {}
            Err(e) => log::warn!("registry lookup for {name} failed: {e}"),
        }
    }
    let mut fallback = PackageMetadata::empty(MetadataSource::ArchiveName);
    fallback.name = package_name_from_stem(&record.archive_stem);
    Err(MetadataError::NoMetadataFound { fallback })
}

/// `reqests-0.0.0` -> `reqests`; `pkg-1.0-py3-none-any` -> `pkg`.
pub fn package_name_from_stem(stem: &str) -> String {
    let parts: Vec<&str> = stem.split('-').collect();
    let mut name = Vec::new();
    for p in &parts {
        if !name.is_empty() && p.chars().next().is_some_and(|c| c.is_ascii_digit()) {
            break;
        }
        name.push(*p);
    }
    name.join("-")
}

fn from_info_files(root: &Path) -> Option<PackageMetadata> {
    let mut pkg_info: Vec<PathBuf> = Vec::new();
    let mut egg_info: Vec<PathBuf> = Vec::new();
    for entry in WalkDir::new(root).sort_by_file_name().into_iter().flatten() {
        if !entry.file_type().is_file() {
            continue;
        }
        let path = entry.path();
        let parent_is = |suffix: &str| {
            path.parent()
                .and_then(|p| p.file_name())
                .is_some_and(|n| n.to_string_lossy().ends_with(suffix))
        };
        match entry.file_name().to_string_lossy().as_ref() {
            "PKG-INFO" if parent_is(".egg-info") => egg_info.push(path.to_path_buf()),
            "PKG-INFO" => pkg_info.push(path.to_path_buf()),
            "METADATA" if parent_is(".dist-info") => pkg_info.push(path.to_path_buf()),
            _ => {}
        }
    }
    let by_depth = |v: &mut Vec<PathBuf>| v.sort_by_key(|p| (p.components().count(), p.clone()));
    by_depth(&mut pkg_info);
    by_depth(&mut egg_info);

    for path in pkg_info {
        let text = read_lossy(&path)?;
        let meta = parse_pkg_info(&text, MetadataSource::PkgInfo);
        if !meta.name.is_empty() {
            return Some(meta);
        }
    }
    for path in egg_info {
        let text = read_lossy(&path)?;
        let mut meta = parse_pkg_info(&text, MetadataSource::EggInfo);
        if meta.dependencies.is_empty() {
            if let Some(req) = path
                .parent()
                .and_then(|d| read_lossy(&d.join("requires.txt")))
            {
                meta.dependencies = parse_requires_txt(&req);
            }
        }
        if !meta.name.is_empty() {
            return Some(meta);
        }
    }
    None
}

fn from_setup_file(record: &PackageRecord) -> Option<PackageMetadata> {
    let (wanted, parse): (&str, fn(&str) -> PackageMetadata) = match record.ecosystem {
        Ecosystem::Pypi => ("setup.py", parse_setup_py),
        Ecosystem::Npm => ("package.json", parse_package_json),
    };
    let mut candidates: Vec<_> = record
        .files
        .iter()
        .filter(|f| f.file_name() == wanted)
        .collect();
    candidates.sort_by_key(|f| {
        (
            f.relative_path.matches('/').count(),
            f.relative_path.clone(),
        )
    });
    candidates
        .into_iter()
        .map(|f| parse(&f.content))
        .find(|m| !m.name.is_empty())
}

fn read_lossy(path: &Path) -> Option<String> {
    std::fs::read(path)
        .ok()
        .map(|b| String::from_utf8_lossy(&b).into_owned())
}

fn clean(value: &str) -> String {
    let v = value.trim();
    if v.eq_ignore_ascii_case("unknown") {
        String::new()
    } else {
        v.to_owned()
    }
}

/// Parses RFC-822 style `Key: value` headers up to the first blank line.
pub fn parse_pkg_info(text: &str, source: MetadataSource) -> PackageMetadata {
    let mut meta = PackageMetadata::empty(source);
    let mut headers: Vec<(String, String)> = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            break;
        }
        if line.starts_with([' ', '\t']) {
            if let Some((_, v)) = headers.last_mut() {
                v.push('\n');
                v.push_str(line.trim());
            }
            continue;
        }
        if let Some((k, v)) = line.split_once(':') {
            headers.push((k.trim().to_ascii_lowercase(), v.trim().to_owned()));
        }
    }
    let mut long_description = String::new();
    for (key, value) in headers {
        match key.as_str() {
            "name" => meta.name = clean(&value),
            "version" => meta.version = clean(&value),
            "summary" => meta.description = clean(&value),
            "description" => long_description = clean(&value),
            "author" => meta.author = clean(&value),
            "author-email" => meta.author_email = clean(&value),
            "home-page" | "download-url" => push_url(&mut meta.urls, &value),
            "project-url" => {
                let url = value.split_once(',').map_or(value.as_str(), |(_, u)| u);
                push_url(&mut meta.urls, url);
            }
            "requires-dist" => meta.dependencies.extend(parse_requirement(&value)),
            _ => {}
        }
    }
    if meta.description.is_empty() {
        meta.description = long_description;
    }
    meta
}

fn push_url(urls: &mut Vec<String>, value: &str) {
    let v = clean(value);
    if !v.is_empty() && !urls.contains(&v) {
        urls.push(v);
    }
}

fn parse_requires_txt(text: &str) -> Vec<Dependency> {
    text.lines()
        .take_while(|l| !l.trim_start().starts_with('['))
        .filter_map(parse_requirement)
        .collect()
}

/// `requests (>=2.0); python_version<'3'` -> `("requests", ">=2.0")`.
pub fn parse_requirement(spec: &str) -> Option<Dependency> {
    let spec = spec.split(';').next().unwrap_or("").trim();
    if spec.is_empty() || spec.starts_with('#') {
        return None;
    }
    let end = spec
        .find(|c: char| !(c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-')))
        .unwrap_or(spec.len());
    let name = &spec[..end];
    if name.is_empty() {
        return None;
    }
    let mut rest = spec[end..].trim();
    if rest.starts_with('[') {
        rest = rest.split_once(']').map_or("", |(_, r)| r).trim();
    }
    let version_spec = rest
        .trim_start_matches('(')
        .trim_end_matches(')')
        .trim()
        .to_owned();
    Some(Dependency {
        name: name.to_owned(),
        version_spec,
    })
}

fn setup_call_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?:^|[^\w.])(?:setuptools\.)?setup\s*\(").unwrap())
}

fn keyword_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?s)^\s*([A-Za-z_]\w*)\s*=\s*(.*?)\s*$").unwrap())
}

fn string_literal_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r#"(?s)^[rRuUbB]{0,2}(?:'''(.*?)'''|"""(.*?)"""|'((?:[^'\\\n]|\\.)*)'|"((?:[^"\\\n]|\\.)*)")$"#,
        )
        .unwrap()
    })
}

/// Static read of `setup(...)` keyword arguments. Only literal values count;
/// variables, calls and concatenations leave the field empty.
pub fn parse_setup_py(text: &str) -> PackageMetadata {
    let mut meta = PackageMetadata::empty(MetadataSource::SetupFile);
    let Some(m) = setup_call_re().find(text) else {
        return meta;
    };
    let args = top_level_args(&text[m.end()..]);
    for arg in args {
        let Some(caps) = keyword_re().captures(&arg) else {
            continue;
        };
        let key = &caps[1];
        let value = &caps[2];
        match key {
            "name" => meta.name = literal(value).unwrap_or_default(),
            "version" => meta.version = literal(value).unwrap_or_default(),
            "description" => meta.description = literal(value).unwrap_or_default(),
            "author" => meta.author = literal(value).unwrap_or_default(),
            "author_email" => meta.author_email = literal(value).unwrap_or_default(),
            "url" | "download_url" => {
                if let Some(u) = literal(value) {
                    push_url(&mut meta.urls, &u);
                }
            }
            "install_requires" => {
                meta.dependencies = literal_list(value)
                    .unwrap_or_default()
                    .iter()
                    .filter_map(|s| parse_requirement(s))
                    .collect();
            }
            _ => {}
        }
    }
    meta.name = meta.name.trim().to_owned();
    meta
}

fn literal(value: &str) -> Option<String> {
    let caps = string_literal_re().captures(value.trim())?;
    let body = (1..=4).find_map(|i| caps.get(i))?.as_str();
    Some(unescape(body))
}

fn literal_list(value: &str) -> Option<Vec<String>> {
    let v = value.trim();
    let inner = v
        .strip_prefix('[')
        .and_then(|s| s.strip_suffix(']'))
        .or_else(|| v.strip_prefix('(').and_then(|s| s.strip_suffix(')')))?;
    top_level_args_closed(inner)
        .iter()
        .filter(|a| !a.trim().is_empty())
        .map(|a| literal(a))
        .collect()
}

fn unescape(body: &str) -> String {
    let mut out = String::with_capacity(body.len());
    let mut chars = body.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('n') => out.push('\n'),
            Some('t') => out.push('\t'),
            Some(other) => out.push(other),
            None => out.push('\\'),
        }
    }
    out
}

/// Splits the text after `setup(` into top-level arguments, stopping at the
/// matching `)` (or end of text when unbalanced).
fn top_level_args(text: &str) -> Vec<String> {
    split_args(text, true)
}

fn top_level_args_closed(text: &str) -> Vec<String> {
    split_args(text, false)
}

fn split_args(text: &str, stop_at_close: bool) -> Vec<String> {
    let mut args = Vec::new();
    let mut cur = String::new();
    let mut depth = 0usize;
    let mut chars = text.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '\'' | '"' => {
                cur.push(c);
                let triple = {
                    let mut look = chars.clone();
                    look.next() == Some(c) && look.next() == Some(c)
                };
                if triple {
                    cur.push(chars.next().unwrap());
                    cur.push(chars.next().unwrap());
                }
                let mut run = 0;
                while let Some(n) = chars.next() {
                    cur.push(n);
                    if n == '\\' {
                        if let Some(esc) = chars.next() {
                            cur.push(esc);
                        }
                        run = 0;
                        continue;
                    }
                    if n == c {
                        run += 1;
                        if !triple || run == 3 {
                            break;
                        }
                    } else {
                        run = 0;
                        if n == '\n' && !triple {
                            break;
                        }
                    }
                }
            }
            '#' => {
                for n in chars.by_ref() {
                    if n == '\n' {
                        cur.push('\n');
                        break;
                    }
                }
            }
            '(' | '[' | '{' => {
                depth += 1;
                cur.push(c);
            }
            ')' | ']' | '}' => {
                if depth == 0 {
                    if stop_at_close {
                        break;
                    }
                } else {
                    depth -= 1;
                }
                cur.push(c);
            }
            ',' if depth == 0 => args.push(std::mem::take(&mut cur)),
            _ => cur.push(c),
        }
    }
    if !cur.trim().is_empty() {
        args.push(cur);
    }
    args
}

/// npm manifest read as that ecosystem's setup file.
pub fn parse_package_json(text: &str) -> PackageMetadata {
    let mut meta = PackageMetadata::empty(MetadataSource::SetupFile);
    let Ok(value) = serde_json::from_str::<serde_json::Value>(text) else {
        return meta;
    };
    registry::fill_from_npm_version(&mut meta, &value);
    meta
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Label, SourceFile};

    fn record_in(root: &Path, files: &[(&str, &str)], stem: &str) -> PackageRecord {
        let mut out = Vec::new();
        for (rel, content) in files {
            let p = root.join(rel);
            std::fs::create_dir_all(p.parent().unwrap()).unwrap();
            std::fs::write(&p, content).unwrap();
            if rel.ends_with(".py") {
                out.push(SourceFile::from_bytes(*rel, content.as_bytes()));
            }
        }
        PackageRecord {
            metadata: PackageMetadata::empty(MetadataSource::ArchiveName),
            files: out,
            signature: String::new(),
            label: Label::Malicious,
            ecosystem: Ecosystem::Pypi,
            archive_stem: stem.to_owned(),
            root: root.to_path_buf(),
        }
    }

    #[test]
    fn pkg_info_direct_parse() {
        let dir = tempfile::tempdir().unwrap();
        let rec = record_in(
            dir.path(),
            &[("foo-0.0.0/PKG-INFO", "Name: foo\nVersion: 0.0.0\n")],
            "foo-0.0.0",
        );
        let meta = extract_metadata(&rec, false, &RegistryConfig::default()).unwrap();
        assert_eq!(meta.name, "foo");
        assert_eq!(meta.version, "0.0.0");
        assert_eq!(meta.source, MetadataSource::PkgInfo);
        assert_eq!(meta.description, "");
    }

    #[test]
    fn pkg_info_full_headers() {
        let text = "Metadata-Version: 2.1\nName: demo\nVersion: 1.2\nSummary: UNKNOWN\n\
                    Author: A B\nAuthor-email: a@b.c\nHome-page: https://x.example\n\
                    Project-URL: Source, https://src.example\nRequires-Dist: requests (>=2.0)\n\
                    Requires-Dist: six; python_version < '3'\n\nlong body: ignored\n";
        let m = parse_pkg_info(text, MetadataSource::PkgInfo);
        assert_eq!(m.description, "");
        assert_eq!(m.author_email, "a@b.c");
        assert_eq!(m.urls, ["https://x.example", "https://src.example"]);
        assert_eq!(
            m.dependencies,
            [
                Dependency {
                    name: "requests".into(),
                    version_spec: ">=2.0".into()
                },
                Dependency {
                    name: "six".into(),
                    version_spec: String::new()
                },
            ]
        );
    }

    #[test]
    fn egg_info_is_labeled_and_reads_requires() {
        let dir = tempfile::tempdir().unwrap();
        let rec = record_in(
            dir.path(),
            &[
                ("p/p.egg-info/PKG-INFO", "Name: p\nVersion: 1\n"),
                (
                    "p/p.egg-info/requires.txt",
                    "requests>=2\n\n[dev]\npytest\n",
                ),
            ],
            "p-1",
        );
        let meta = extract_metadata(&rec, false, &RegistryConfig::default()).unwrap();
        assert_eq!(meta.source, MetadataSource::EggInfo);
        assert_eq!(meta.dependencies.len(), 1);
        assert_eq!(meta.dependencies[0].name, "requests");
    }

    #[test]
    fn setup_py_typosquat_example() {
        let m = parse_setup_py(
            "from setuptools import setup\nsetup(name='reqests', install_requires=['requests'])\n",
        );
        assert_eq!(m.name, "reqests");
        assert_eq!(
            m.dependencies,
            [Dependency {
                name: "requests".into(),
                version_spec: String::new()
            }]
        );
    }

    #[test]
    fn setup_py_dynamic_values_stay_empty() {
        let src = r#"
import os
VERSION = get_version()
setup(
    name="evil",  # comment, with comma
    version=VERSION,
    description="x" + "y",
    author='''Triple''',
    install_requires=deps,
    packages=find_packages(exclude=["name='nested'"]),
)
"#;
        let m = parse_setup_py(src);
        assert_eq!(m.name, "evil");
        assert_eq!(m.version, "");
        assert_eq!(m.description, "");
        assert_eq!(m.author, "Triple");
        assert!(m.dependencies.is_empty());
    }

    #[test]
    fn setup_py_is_never_executed() {
        let dir = tempfile::tempdir().unwrap();
        let sentinel = dir.path().join("SENTINEL");
        let setup = format!(
            "open({:?}, 'w').write('ran')\nfrom setuptools import setup\nsetup(name='quiet')\n",
            sentinel.display().to_string()
        );
        let rec = record_in(
            &dir.path().join("pkg"),
            &[("quiet-1/setup.py", &setup)],
            "quiet-1",
        );
        let meta = extract_metadata(&rec, false, &RegistryConfig::default()).unwrap();
        assert_eq!(meta.name, "quiet");
        assert_eq!(meta.source, MetadataSource::SetupFile);
        assert!(!sentinel.exists());
    }

    #[test]
    fn exhaustion_falls_back_to_archive_stem() {
        let dir = tempfile::tempdir().unwrap();
        let rec = record_in(
            dir.path(),
            &[("x/mod.py", "print(1)\n")],
            "mystery-pkg-0.1.2",
        );
        match extract_metadata(&rec, false, &RegistryConfig::default()) {
            Err(MetadataError::NoMetadataFound { fallback }) => {
                assert_eq!(fallback.name, "mystery-pkg");
                assert_eq!(fallback.source, MetadataSource::ArchiveName);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn stem_names() {
        assert_eq!(package_name_from_stem("reqests-0.0.0"), "reqests");
        assert_eq!(package_name_from_stem("pkg-1.0-py3-none-any"), "pkg");
        assert_eq!(package_name_from_stem("123"), "123");
        assert_eq!(package_name_from_stem("a-b-c"), "a-b-c");
    }

    #[test]
    fn package_json_fields() {
        let m = parse_package_json(
            r#"{"name":"lodahs","version":"0.0.1","description":"","author":{"name":"x","email":"x@y"},
               "dependencies":{"request":"^2.0"},"homepage":"https://h.example"}"#,
        );
        assert_eq!(m.name, "lodahs");
        assert_eq!(m.author_email, "x@y");
        assert_eq!(m.dependencies[0].version_spec, "^2.0");
        assert_eq!(m.urls, ["https://h.example"]);
    }
}
