use std::fs;
use std::io::Read;
use std::path::{Component, Path, PathBuf};

use flate2::read::GzDecoder;

use super::{
    CorpusError, PackageArchive, PackageMetadata, PackageRecord, SourceFile, INSTALL_SCRIPTS,
};
use crate::digest::digest_of_digests;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum ArchiveKind {
    TarGz,
    Zip,
}

impl ArchiveKind {
    pub(crate) fn from_path(path: &Path) -> Option<Self> {
        let name = path.file_name()?.to_string_lossy().to_ascii_lowercase();
        if name.ends_with(".tar.gz") || name.ends_with(".tgz") {
            Some(ArchiveKind::TarGz)
        } else if name.ends_with(".zip") || name.ends_with(".whl") {
            Some(ArchiveKind::Zip)
        } else {
            None
        }
    }
}

/// Extracts `archive` into `dest` and builds its record.
///
/// Every entry is read into memory and checked before anything is written,
/// so a hostile archive leaves no partial tree behind. Metadata is left
/// empty apart from the archive-derived name; see [`super::extract_metadata`].
pub fn unpack_package(archive: &PackageArchive, dest: &Path) -> Result<PackageRecord, CorpusError> {
    let kind = ArchiveKind::from_path(&archive.path)
        .ok_or_else(|| CorpusError::UnsupportedFormat(archive.path.clone()))?;
    let bytes = fs::read(&archive.path)?;
    let entries = match kind {
        ArchiveKind::TarGz => read_tar_gz(&bytes),
        ArchiveKind::Zip => read_zip(&bytes),
    }
    .map_err(|e| match e {
        ReadError::Traversal(entry) => CorpusError::PathTraversal { entry },
        ReadError::Corrupt(reason) => CorpusError::CorruptArchive {
            path: archive.path.clone(),
            reason,
        },
    })?;

    fs::create_dir_all(dest)?;
    let ext = archive.ecosystem.source_extension();
    let mut files = Vec::new();
    for (rel, data) in &entries {
        let target = dest.join(rel);
        if let Some(parent) = target.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&target, data)?;
        let file_name = rel.rsplit('/').next().unwrap_or(rel);
        if file_name.ends_with(ext) || INSTALL_SCRIPTS.contains(&file_name) {
            files.push(SourceFile::from_bytes(rel.clone(), data));
        }
    }
    files.sort_by(|a, b| a.relative_path.cmp(&b.relative_path));
    let signature = digest_of_digests(files.iter().map(|f| f.digest.as_str()));

    let mut metadata = PackageMetadata::empty(super::MetadataSource::ArchiveName);
    metadata.name = super::package_name_from_stem(&archive.stem());
    Ok(PackageRecord {
        metadata,
        files,
        signature,
        label: archive.label,
        ecosystem: archive.ecosystem,
        archive_stem: archive.stem(),
        root: dest.to_path_buf(),
    })
}

enum ReadError {
    Traversal(String),
    Corrupt(String),
}

/// Validates an archive member name and returns it normalized to `/` separators.
fn checked_entry_path(raw: &str) -> Result<String, ReadError> {
    let normalized = raw.replace('\\', "/");
    let looks_absolute = normalized.starts_with('/')
        || normalized
            .as_bytes()
            .get(1)
            .is_some_and(|&b| b == b':' && normalized.as_bytes()[0].is_ascii_alphabetic());
    if looks_absolute {
        return Err(ReadError::Traversal(raw.to_owned()));
    }
    let mut parts = Vec::new();
    for comp in PathBuf::from(&normalized).components() {
        match comp {
            Component::Normal(p) => parts.push(p.to_string_lossy().into_owned()),
            Component::CurDir => {}
            Component::ParentDir | Component::RootDir | Component::Prefix(_) => {
                return Err(ReadError::Traversal(raw.to_owned()))
            }
        }
    }
    Ok(parts.join("/"))
}

fn read_tar_gz(bytes: &[u8]) -> Result<Vec<(String, Vec<u8>)>, ReadError> {
    let corrupt = |e: std::io::Error| ReadError::Corrupt(e.to_string());
    let mut archive = tar::Archive::new(GzDecoder::new(bytes));
    let mut out = Vec::new();
    for entry in archive.entries().map_err(corrupt)? {
        let mut entry = entry.map_err(corrupt)?;
        let raw = String::from_utf8_lossy(&entry.path_bytes()).into_owned();
        let rel = checked_entry_path(&raw)?;
        if !entry.header().entry_type().is_file() || rel.is_empty() {
            continue;
        }
        let mut data = Vec::new();
        entry.read_to_end(&mut data).map_err(corrupt)?;
        out.push((rel, data));
    }
    Ok(out)
}

fn read_zip(bytes: &[u8]) -> Result<Vec<(String, Vec<u8>)>, ReadError> {
    let corrupt = |e: zip::result::ZipError| ReadError::Corrupt(e.to_string());
    let mut archive = zip::ZipArchive::new(std::io::Cursor::new(bytes)).map_err(corrupt)?;
    let mut out = Vec::new();
    for i in 0..archive.len() {
        let mut file = archive.by_index(i).map_err(corrupt)?;
        let rel = checked_entry_path(file.name())?;
        if file.is_dir() || rel.is_empty() {
            continue;
        }
        let mut data = Vec::new();
        file.read_to_end(&mut data)
            .map_err(|e| ReadError::Corrupt(e.to_string()))?;
        out.push((rel, data));
    }
    Ok(out)
}
