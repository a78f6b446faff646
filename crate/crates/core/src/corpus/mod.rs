//! Package ingestion: unpack archives, describe them, drop duplicates.

mod archive;
mod metadata;
pub mod registry;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use archive::unpack_package;
pub use metadata::{
    extract_metadata, package_name_from_stem, parse_package_json, parse_pkg_info,
    parse_requirement, parse_setup_py,
};
pub use registry::RegistryConfig;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("unsupported archive format: {0}")]
    UnsupportedFormat(PathBuf),
    #[error("corrupt archive {path}: {reason}")]
    CorruptArchive { path: PathBuf, reason: String },
    #[error("archive entry escapes the destination directory: {entry}")]
    PathTraversal { entry: String },
    #[error("not a regular file: {0}")]
    NotAFile(PathBuf),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum MetadataError {
    /// Every extraction method came back empty. The fallback carries the
    /// name derived from the archive file name.
    #[error("no metadata found for {}", fallback.name)]
    NoMetadataFound { fallback: PackageMetadata },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ecosystem {
    Pypi,
    Npm,
}

impl Ecosystem {
    pub fn source_extension(self) -> &'static str {
        match self {
            Ecosystem::Pypi => ".py",
            Ecosystem::Npm => ".js",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Malicious,
    Legitimate,
    Unknown,
}

/// Install scripts kept alongside ordinary sources.
pub const INSTALL_SCRIPTS: &[&str] = &["setup.py", "setup.cfg", "pyproject.toml", "package.json"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackageArchive {
    pub path: PathBuf,
    pub ecosystem: Ecosystem,
    pub label: Label,
}

impl PackageArchive {
    pub fn new(
        path: impl Into<PathBuf>,
        ecosystem: Ecosystem,
        label: Label,
    ) -> Result<Self, CorpusError> {
        let path = path.into();
        if !path.is_file() {
            return Err(CorpusError::NotAFile(path));
        }
        Ok(Self {
            path,
            ecosystem,
            label,
        })
    }

    /// File name with the archive suffix removed (`foo-1.0.tar.gz` -> `foo-1.0`).
    pub fn stem(&self) -> String {
        let name = self
            .path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        for suffix in [".tar.gz", ".tgz", ".zip", ".whl"] {
            if let Some(stripped) = name.strip_suffix(suffix) {
                return stripped.to_owned();
            }
        }
        name
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetadataSource {
    PkgInfo,
    SetupFile,
    EggInfo,
    RegistryApi,
    /// Nothing was found; only the archive-derived name is filled in.
    ArchiveName,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dependency {
    pub name: String,
    pub version_spec: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackageMetadata {
    pub name: String,
    pub version: String,
    pub description: String,
    pub author: String,
    pub author_email: String,
    pub dependencies: Vec<Dependency>,
    pub urls: Vec<String>,
    pub source: MetadataSource,
}

impl PackageMetadata {
    pub fn empty(source: MetadataSource) -> Self {
        Self {
            name: String::new(),
            version: String::new(),
            description: String::new(),
            author: String::new(),
            author_email: String::new(),
            dependencies: Vec::new(),
            urls: Vec::new(),
            source,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceFile {
    pub relative_path: String,
    /// Lossy UTF-8 decoding of the raw bytes.
    pub content: String,
    pub byte_len: usize,
    pub loc: usize,
    /// Digest of the raw bytes.
    pub digest: String,
}

impl SourceFile {
    pub fn from_bytes(relative_path: impl Into<String>, bytes: &[u8]) -> Self {
        let content = String::from_utf8_lossy(bytes).into_owned();
        let loc = line_count(&content);
        Self {
            relative_path: relative_path.into(),
            content,
            byte_len: bytes.len(),
            loc,
            digest: crate::digest::sha256_hex(bytes),
        }
    }

    pub fn file_name(&self) -> &str {
        self.relative_path
            .rsplit('/')
            .next()
            .unwrap_or(&self.relative_path)
    }
}

/// Newline count plus one for non-empty text.
pub fn line_count(text: &str) -> usize {
    if text.is_empty() {
        0
    } else {
        text.bytes().filter(|&b| b == b'\n').count() + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackageRecord {
    pub metadata: PackageMetadata,
    pub files: Vec<SourceFile>,
    pub signature: String,
    pub label: Label,
    pub ecosystem: Ecosystem,
    pub archive_stem: String,
    /// Directory the archive was extracted into.
    pub root: PathBuf,
}

impl PackageRecord {
    /// Record built from in-memory files rather than an archive.
    pub fn from_files(
        name: &str,
        ecosystem: Ecosystem,
        label: Label,
        mut files: Vec<SourceFile>,
    ) -> Self {
        files.sort_by(|a, b| a.relative_path.cmp(&b.relative_path));
        let signature = crate::digest::digest_of_digests(files.iter().map(|f| f.digest.as_str()));
        let mut metadata = PackageMetadata::empty(MetadataSource::ArchiveName);
        metadata.name = name.to_owned();
        Self {
            metadata,
            files,
            signature,
            label,
            ecosystem,
            archive_stem: name.to_owned(),
            root: PathBuf::new(),
        }
    }

    /// Stable display key: package name, falling back to the archive stem.
    pub fn name(&self) -> &str {
        if self.metadata.name.is_empty() {
            &self.archive_stem
        } else {
            &self.metadata.name
        }
    }

    pub fn total_loc(&self) -> usize {
        self.files.iter().map(|f| f.loc).sum()
    }
}

/// Keeps one record per signature. Among duplicates the record with the
/// lexicographically smallest package name wins; survivors keep input order.
pub fn dedup_corpus(records: Vec<PackageRecord>) -> Vec<PackageRecord> {
    use std::collections::HashMap;

    let mut winner: HashMap<&str, usize> = HashMap::new();
    for (i, rec) in records.iter().enumerate() {
        winner
            .entry(rec.signature.as_str())
            .and_modify(|w| {
                let cur = &records[*w];
                if (rec.name(), rec.archive_stem.as_str()) < (cur.name(), cur.archive_stem.as_str())
                {
                    *w = i;
                }
            })
            .or_insert(i);
    }
    let mut keep = vec![false; records.len()];
    for &i in winner.values() {
        keep[i] = true;
    }
    records
        .into_iter()
        .zip(keep)
        .filter_map(|(r, k)| k.then_some(r))
        .collect()
}

/// Lists archives of supported formats directly under `dir`, sorted by path.
pub fn discover_archives(dir: &Path) -> Result<Vec<PathBuf>, CorpusError> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_file() && archive::ArchiveKind::from_path(&path).is_some() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(name: &str, sig: &str) -> PackageRecord {
        let mut metadata = PackageMetadata::empty(MetadataSource::PkgInfo);
        metadata.name = name.to_owned();
        PackageRecord {
            metadata,
            files: Vec::new(),
            signature: sig.to_owned(),
            label: Label::Malicious,
            ecosystem: Ecosystem::Pypi,
            archive_stem: name.to_owned(),
            root: PathBuf::new(),
        }
    }

    #[test]
    fn dedup_keeps_smallest_name_in_input_order() {
        let recs = vec![
            record("zeta", "s1"),
            record("beta", "s2"),
            record("alpha", "s1"),
        ];
        let out = dedup_corpus(recs);
        let names: Vec<_> = out.iter().map(|r| r.name().to_owned()).collect();
        assert_eq!(names, ["beta", "alpha"]);
    }

    #[test]
    fn dedup_empty() {
        assert!(dedup_corpus(Vec::new()).is_empty());
    }

    #[test]
    fn dedup_idempotent() {
        let recs = vec![
            record("a", "x"),
            record("b", "y"),
            record("c", "x"),
            record("d", "z"),
        ];
        let once = dedup_corpus(recs);
        let twice = dedup_corpus(once.clone());
        assert_eq!(once, twice);
        assert_eq!(once.len(), 3);
    }

    #[test]
    fn loc_counts() {
        assert_eq!(line_count(""), 0);
        assert_eq!(line_count("x"), 1);
        assert_eq!(line_count("x\ny"), 2);
        assert_eq!(line_count("x\n"), 2);
    }

    #[test]
    fn lossy_decoding_never_fails() {
        let f = SourceFile::from_bytes("a.py", b"x = '\xff'\n");
        assert!(f.content.contains('\u{FFFD}'));
        assert_eq!(f.byte_len, 8);
    }

    #[test]
    fn stem_strips_known_suffixes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("foo-1.0.tar.gz");
        std::fs::write(&p, b"").unwrap();
        let a = PackageArchive::new(&p, Ecosystem::Pypi, Label::Unknown).unwrap();
        assert_eq!(a.stem(), "foo-1.0");
        assert!(PackageArchive::new(dir.path(), Ecosystem::Pypi, Label::Unknown).is_err());
    }
}
