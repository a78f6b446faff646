use std::collections::{BTreeSet, HashMap, HashSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::config::RunConfig;
use super::manifest::{record, RunManifest};
use super::CliError;
use crate::analytics::{
    category_heatmap, cdf_csv, classify_rule, confusion_metrics, coverage_cdf, coverage_counts,
    per_rule_precision, precision_csv, rule_overlap, score_cdf, subcategory_counts,
    subcategory_csv, Metrics, Taxonomy,
};
use crate::baseline::run_pairs;
use crate::clusterer::{
    default_k, filter_clusters, kmeans, select_representatives, ClusterError, ClusterManifest,
    ClusterPoint, ClusterSummary, MemberRef,
};
use crate::corpus::{
    dedup_corpus, discover_archives, extract_metadata, unpack_package, Label, MetadataError,
    PackageArchive, PackageMetadata, PackageRecord, SourceFile,
};
use crate::embedding::{
    aggregate_vectors, build_embedder, embed_segment, pad_to, AggregateMode, CodeVector,
};
use crate::llm::{
    build_backend, build_craft_prompt, build_refine_prompt, complete, parse_rule_output,
    BackendKind, CraftInput, LlmBackend, LlmError, RuleDraft, Templates,
};
use crate::matcher::{Matcher, ScanReport};
use crate::rule::{Provenance, Rule, RuleFormat};
use crate::segmenter::{
    audit_metadata, extract_basic_units, load_name_list, parse_name_list, split_segments, tokenize,
    BasicUnit, Lexicon, MetadataFlag, DEFAULT_DENYLIST, DEFAULT_POPULAR,
};
use crate::validator::{align_rule, compile_with, AlignConfig, AlignmentFailure, CompileError};

pub const CORPUS: &str = "ingest/corpus.json";
pub const INGEST_REPORT: &str = "ingest/report.json";
pub const UNITS: &str = "segment/units.json";
pub const AUDIT: &str = "segment/audit.json";
pub const CLUSTERS: &str = "cluster/clusters.json";
pub const RULES: &str = "generate/rules.json";
pub const GENERATE_REPORT: &str = "generate/report.json";
pub const RULE_DIR: &str = "rules";
pub const VALIDATE_REPORT: &str = "validate/report.json";
pub const SCAN: &str = "scan/report.json";
pub const FINDINGS: &str = "scan/findings.jsonl";
pub const METRICS: &str = "eval/metrics.json";
pub const THRESHOLDS: &str = "eval/thresholds.csv";
pub const PRECISION: &str = "eval/precision.json";
pub const PRECISION_CSV: &str = "eval/precision.csv";
pub const COVERAGE_CSV: &str = "eval/coverage_cdf.csv";
pub const BASELINE_RULES: &str = "baseline/rules.json";
pub const BASELINE_REPORT: &str = "baseline/report.json";
pub const BASELINE_RULE_DIR: &str = "baseline/rules";
pub const BASELINE_SCAN: &str = "baseline/scan.json";
pub const BASELINE_METRICS: &str = "baseline/metrics.json";
pub const ANALYZED_RULES: &str = "analyze/rules.json";
pub const HEATMAP_CSV: &str = "analyze/heatmap.csv";
pub const SUBCATEGORY_CSV: &str = "analyze/subcategories.csv";
pub const SCORES: &str = "analyze/scores.json";
pub const OVERLAP: &str = "analyze/overlap.json";
pub const SUMMARY: &str = "analyze/summary.json";

// ------------------------------------------------------------ artifacts

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejected {
    pub archive: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Duplicate {
    pub archive: String,
    /// Archive file name of the record that was kept.
    pub kept: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub archives: usize,
    pub rejected: Vec<Rejected>,
    /// Packages whose name came from the archive file name.
    pub metadata_fallbacks: Vec<String>,
    pub duplicates: Vec<Duplicate>,
    pub records: usize,
    pub malicious: usize,
    pub legitimate: usize,
    pub unknown: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitEntry {
    pub member: MemberRef,
    pub unit: BasicUnit,
    pub tokens: usize,
    pub segments: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub package: String,
    pub label: Label,
    pub metadata: PackageMetadata,
    pub flags: Vec<MetadataFlag>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateFailure {
    pub provenance: Provenance,
    pub format: RuleFormat,
    /// `craft`, `refine` or `align`.
    pub stage: String,
    pub error: String,
    pub alignment: Option<AlignmentFailure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateReport {
    pub backend: String,
    pub jobs: usize,
    pub rules: usize,
    /// Written rule files, run-relative.
    pub files: Vec<String>,
    pub failures: Vec<GenerateFailure>,
    /// Names of rules dropped because an earlier rule had the same text.
    pub duplicates: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Validation {
    pub path: String,
    pub format: RuleFormat,
    pub ok: bool,
    pub name: Option<String>,
    pub errors: Vec<CompileError>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub threshold: usize,
    pub metrics: Metrics,
    /// Accuracy, precision, recall and F1 in percent.
    pub percent: [String; 4],
    pub excluded_unlabeled: usize,
    pub approximate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    /// `cluster` when groups follow retained clusters, `package` otherwise.
    pub grouping: String,
    pub malware_groups: Vec<Vec<String>>,
    pub legit_groups: Vec<String>,
    pub rules: usize,
    pub skipped: Vec<crate::baseline::SkippedPair>,
    pub metrics: Option<EvalReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeSummary {
    pub rules: usize,
    pub yara: usize,
    pub semgrep: usize,
    pub taxonomy_heuristic: bool,
    pub categories_used: usize,
    pub fallback_rules: usize,
    pub overlap: Option<OverlapSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapSummary {
    pub against: String,
    pub threshold: f64,
    pub pairs: usize,
    pub overlapping_generated: usize,
    pub overlapping_reference: usize,
}

// -------------------------------------------------------------- file io

fn archive_file_name(a: &PackageArchive) -> String {
    a.path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| a.stem())
}

fn read_json<T: DeserializeOwned>(
    out: &Path,
    rel: &str,
    stage: &'static str,
) -> Result<T, CliError> {
    let path = out.join(rel);
    let text = std::fs::read_to_string(&path).map_err(|_| CliError::StageInputMissing {
        stage,
        path: rel.to_owned(),
    })?;
    serde_json::from_str(&text).map_err(|e| CliError::Stage {
        stage,
        message: format!("{rel}: {e}"),
    })
}

fn write_text(out: &Path, rel: &str, text: &str) -> Result<(), CliError> {
    let path = out.join(rel);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn write_json<T: Serialize + ?Sized>(out: &Path, rel: &str, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Stage {
        stage: "write",
        message: e.to_string(),
    })?;
    write_text(out, rel, &(text + "\n"))
}

fn stage_err(stage: &'static str) -> impl Fn(String) -> CliError {
    move |message| CliError::Stage { stage, message }
}

fn file_slug(name: &str) -> String {
    let s: String = name
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '_' || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect();
    if s.is_empty() {
        "rule".into()
    } else {
        s
    }
}

/// Replaces `dir` with the given rules, one file each.
fn write_rule_files(
    out: &Path,
    dir: &str,
    rules: &[Rule],
    crlf: bool,
) -> Result<Vec<String>, CliError> {
    let abs = out.join(dir);
    if abs.exists() {
        std::fs::remove_dir_all(&abs)?;
    }
    std::fs::create_dir_all(&abs)?;
    let mut files = Vec::with_capacity(rules.len());
    for (i, r) in rules.iter().enumerate() {
        let rel = format!(
            "{dir}/{i:03}_{}.{}",
            file_slug(&r.name),
            r.format.extension()
        );
        write_text(
            out,
            &rel,
            &crate::validator::with_line_endings(&r.text, crlf),
        )?;
        files.push(rel);
    }
    Ok(files)
}

fn rule_paths(path: &Path) -> Result<Vec<PathBuf>, CliError> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    if !path.is_dir() {
        return Err(CliError::StageInputMissing {
            stage: "rules",
            path: path.display().to_string(),
        });
    }
    let mut out: Vec<PathBuf> = walkdir::WalkDir::new(path)
        .sort_by_file_name()
        .into_iter()
        .filter_map(Result::ok)
        .filter(|e| e.file_type().is_file() && RuleFormat::from_path(e.path()).is_some())
        .map(|e| e.into_path())
        .collect();
    out.sort();
    Ok(out)
}

fn sniff_format(path: &Path, bytes: &[u8]) -> RuleFormat {
    RuleFormat::from_path(path).unwrap_or_else(|| {
        let head = String::from_utf8_lossy(&bytes[..bytes.len().min(4096)]);
        if head.lines().any(|l| l.trim_end() == "rules:") {
            RuleFormat::Semgrep
        } else {
            RuleFormat::Yara
        }
    })
}

/// Compiles one rule file with the built-in and any configured external compiler.
pub fn validate_file(
    path: &Path,
    external: &crate::validator::ExternalCompilers,
) -> Result<Validation, CliError> {
    let bytes = std::fs::read(path).map_err(|_| CliError::StageInputMissing {
        stage: "validate",
        path: path.display().to_string(),
    })?;
    let format = sniff_format(path, &bytes);
    let result = crate::validator::compile_bytes(&bytes, format)
        .and_then(|r| compile_with(&r.text, format, external).map(|_| r));
    Ok(match result {
        Ok(rule) => Validation {
            path: path.display().to_string(),
            format,
            ok: true,
            name: Some(rule.name),
            errors: Vec::new(),
        },
        Err(errors) => Validation {
            path: path.display().to_string(),
            format,
            ok: false,
            name: None,
            errors,
        },
    })
}

/// Rules from a file or directory; files that fail to compile are returned separately.
pub fn load_rules(path: &Path) -> Result<(Vec<Rule>, Vec<Validation>), CliError> {
    let mut rules = Vec::new();
    let mut bad = Vec::new();
    for p in rule_paths(path)? {
        let text = std::fs::read(&p)?;
        let format = sniff_format(&p, &text);
        let text = String::from_utf8_lossy(&text);
        match crate::validator::compile(&text, format) {
            Ok(mut r) => {
                r.provenance = Provenance::External {
                    source: p.display().to_string(),
                };
                rules.push(r);
            }
            Err(errors) => bad.push(Validation {
                path: p.display().to_string(),
                format,
                ok: false,
                name: None,
                errors,
            }),
        }
    }
    Ok((rules, bad))
}

// --------------------------------------------------------------- runner

/// Executes stages against one run directory and keeps its manifest.
pub struct Runner {
    pub cfg: RunConfig,
    pub out: PathBuf,
    backend: Option<Box<dyn LlmBackend>>,
}

impl Runner {
    pub fn new(cfg: RunConfig) -> Result<Self, CliError> {
        cfg.check()?;
        let out = cfg.out_dir.clone();
        std::fs::create_dir_all(&out)?;
        Ok(Self {
            cfg,
            out,
            backend: None,
        })
    }

    /// Uses `backend` for the generate stage instead of the configured one.
    pub fn with_backend(mut self, backend: Box<dyn LlmBackend>) -> Self {
        self.backend = Some(backend);
        self
    }

    fn save_stage(
        &self,
        name: &str,
        inputs: &[&str],
        outputs: &[&str],
        details: serde_json::Value,
    ) -> Result<(), CliError> {
        let mut m = RunManifest::open(&self.out, &self.cfg);
        m.stages
            .insert(name.to_owned(), record(&self.out, inputs, outputs, details));
        m.save(&self.out)
    }

    // ------------------------------------------------------------ ingest

    pub fn ingest(&self) -> Result<IngestReport, CliError> {
        let cfg = &self.cfg;
        if cfg.corpus.sources.is_empty() {
            return Err(CliError::Config("corpus.sources is empty".into()));
        }
        let mut archives = Vec::new();
        for s in &cfg.corpus.sources {
            let found = discover_archives(&s.path).map_err(|_| CliError::StageInputMissing {
                stage: "ingest",
                path: s.path.display().to_string(),
            })?;
            for p in found {
                archives.push(PackageArchive::new(p, s.ecosystem, s.label).map_err(|e| {
                    CliError::Stage {
                        stage: "ingest",
                        message: e.to_string(),
                    }
                })?);
            }
        }
        let mut taken = HashSet::new();
        let dirs: Vec<String> = archives
            .iter()
            .map(|a| {
                let label = serde_json::to_value(a.label).unwrap_or_default();
                let base = format!(
                    "unpacked/{}/{}",
                    label.as_str().unwrap_or("unknown"),
                    archive_file_name(a)
                );
                let mut rel = base.clone();
                let mut n = 2;
                while !taken.insert(rel.clone()) {
                    rel = format!("{base}~{n}");
                    n += 1;
                }
                rel
            })
            .collect();
        let unpacked: Vec<Result<(PackageRecord, bool), Rejected>> = archives
            .par_iter()
            .zip(&dirs)
            .map(|(a, rel)| {
                let dest = self.out.join(rel);
                let reject = |reason: String| Rejected {
                    archive: a.path.display().to_string(),
                    reason,
                };
                if dest.exists() {
                    std::fs::remove_dir_all(&dest).map_err(|e| reject(e.to_string()))?;
                }
                let mut rec = unpack_package(a, &dest).map_err(|e| reject(e.to_string()))?;
                let fallback = match extract_metadata(&rec, cfg.allow_network, &cfg.corpus.registry)
                {
                    Ok(meta) => {
                        rec.metadata = meta;
                        false
                    }
                    Err(MetadataError::NoMetadataFound { fallback }) => {
                        rec.metadata = fallback;
                        true
                    }
                };
                rec.root = PathBuf::from(rel);
                Ok((rec, fallback))
            })
            .collect();
        let mut rejected = Vec::new();
        let mut records = Vec::new();
        let mut metadata_fallbacks = Vec::new();
        for r in unpacked {
            match r {
                Ok((rec, fallback)) => {
                    if fallback {
                        metadata_fallbacks.push(rec.archive_stem.clone());
                    }
                    records.push(rec);
                }
                Err(rej) => {
                    log::warn!("skipping {}: {}", rej.archive, rej.reason);
                    rejected.push(rej);
                }
            }
        }
        let file_of = |root: &Path| {
            root.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default()
        };
        let all: Vec<(PathBuf, String)> = records
            .iter()
            .map(|r| (r.root.clone(), r.signature.clone()))
            .collect();
        let kept = dedup_corpus(records);
        let kept_by_sig: HashMap<&str, &Path> = kept
            .iter()
            .map(|r| (r.signature.as_str(), r.root.as_path()))
            .collect();
        let duplicates = all
            .iter()
            .filter(|(root, sig)| kept_by_sig.get(sig.as_str()) != Some(&root.as_path()))
            .map(|(root, sig)| Duplicate {
                archive: file_of(root),
                kept: file_of(kept_by_sig[sig.as_str()]),
            })
            .collect();
        let count = |l: Label| kept.iter().filter(|r| r.label == l).count();
        let report = IngestReport {
            archives: archives.len(),
            rejected,
            metadata_fallbacks,
            duplicates,
            records: kept.len(),
            malicious: count(Label::Malicious),
            legitimate: count(Label::Legitimate),
            unknown: count(Label::Unknown),
        };
        write_json(&self.out, CORPUS, &kept)?;
        write_json(&self.out, INGEST_REPORT, &report)?;
        self.save_stage(
            "ingest",
            &[],
            &[CORPUS, INGEST_REPORT],
            json!({ "records": report.records, "rejected": report.rejected.len(), "duplicates": report.duplicates.len() }),
        )?;
        Ok(report)
    }

    fn corpus(&self, stage: &'static str) -> Result<Vec<PackageRecord>, CliError> {
        read_json(&self.out, CORPUS, stage)
    }

    // ----------------------------------------------------------- segment

    pub fn segment(&self) -> Result<(Vec<UnitEntry>, Vec<AuditEntry>), CliError> {
        let corpus = self.corpus("segment")?;
        let seg = &self.cfg.segment;
        let read_list = |p: &Option<PathBuf>, builtin: &str| -> Result<Vec<String>, CliError> {
            match p {
                Some(p) => {
                    load_name_list(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))
                }
                None => Ok(parse_name_list(builtin)),
            }
        };
        let popular = read_list(&seg.popular, DEFAULT_POPULAR)?;
        let denylist = read_list(&seg.denylist, DEFAULT_DENYLIST)?;

        let units: Vec<UnitEntry> = corpus
            .par_iter()
            .filter(|r| r.label == Label::Malicious)
            .flat_map_iter(|r| {
                let ext = r.ecosystem.source_extension();
                r.files
                    .iter()
                    .filter(|f| f.relative_path.ends_with(ext))
                    .flat_map(|f| {
                        extract_basic_units(f)
                            .into_iter()
                            .enumerate()
                            .filter_map(|(i, unit)| {
                                let tokens =
                                    tokenize(&unit.text, Lexicon::for_path(&f.relative_path));
                                if tokens.is_empty() {
                                    return None;
                                }
                                let segments = tokens.len().div_ceil(seg.threshold);
                                Some(UnitEntry {
                                    member: MemberRef {
                                        package: r.name().to_owned(),
                                        file: f.relative_path.clone(),
                                        unit: i,
                                    },
                                    tokens: tokens.len(),
                                    segments,
                                    unit,
                                })
                            })
                    })
                    .collect::<Vec<_>>()
            })
            .collect();
        let audit: Vec<AuditEntry> = corpus
            .iter()
            .map(|r| AuditEntry {
                package: r.name().to_owned(),
                label: r.label,
                metadata: r.metadata.clone(),
                flags: audit_metadata(&r.metadata, &popular, &denylist, &seg.audit),
            })
            .collect();
        write_json(&self.out, UNITS, &units)?;
        write_json(&self.out, AUDIT, &audit)?;
        let flagged = audit.iter().filter(|a| !a.flags.is_empty()).count();
        self.save_stage(
            "segment",
            &[CORPUS],
            &[UNITS, AUDIT],
            json!({ "units": units.len(), "flagged_packages": flagged, "segment_threshold": seg.threshold }),
        )?;
        Ok((units, audit))
    }

    // ----------------------------------------------------------- cluster

    pub fn cluster(&self) -> Result<ClusterManifest, CliError> {
        let units: Vec<UnitEntry> = read_json(&self.out, UNITS, "cluster")?;
        let cc = &self.cfg.cluster;
        let ec = &self.cfg.embedding;
        let embedder = build_embedder(ec).map_err(|e| CliError::Config(e.to_string()))?;
        let vectors: Vec<CodeVector> = units
            .par_iter()
            .map(|u| {
                let tokens = tokenize(&u.unit.text, Lexicon::for_path(&u.member.file));
                let segs = split_segments(&u.member.file, &tokens, self.cfg.segment.threshold);
                let vs = segs
                    .iter()
                    .map(|s| embed_segment(s, embedder.as_ref()))
                    .collect::<Result<Vec<_>, _>>()?;
                aggregate_vectors(&vs, ec.aggregate)
            })
            .collect::<Result<_, _>>()
            .map_err(|e| CliError::Stage {
                stage: "cluster",
                message: e.to_string(),
            })?;
        let vectors = if ec.aggregate == AggregateMode::Concat {
            let len = vectors.iter().map(CodeVector::dim).max().unwrap_or(0);
            vectors.iter().map(|v| pad_to(v, len)).collect()
        } else {
            vectors
        };
        let n = vectors.len();
        let (k, k_source) = match cc.k {
            Some(k) if k > n => (n.max(1), "clamped".to_owned()),
            Some(k) => (k, "config".to_owned()),
            None => (default_k(n), "default".to_owned()),
        };
        let points: Vec<ClusterPoint> = vectors
            .into_iter()
            .zip(&units)
            .map(|(vector, u)| ClusterPoint {
                vector,
                member: u.member.clone(),
            })
            .collect();
        let clusters = if points.is_empty() {
            Vec::new()
        } else {
            kmeans(&points, k, cc.seed, cc.max_iter, cc.similarity).map_err(|e| {
                CliError::Stage {
                    stage: "cluster",
                    message: e.to_string(),
                }
            })?
        };
        let retained: BTreeSet<usize> = filter_clusters(clusters.clone(), cc.threshold)
            .iter()
            .map(|c| c.id)
            .collect();
        let summaries = clusters
            .iter()
            .map(|c| {
                let keep = retained.contains(&c.id);
                let representatives = if keep {
                    match select_representatives(c, cc.representatives) {
                        Ok(r) => r,
                        Err(ClusterError::ClusterTooSmall { available, .. }) => available,
                        Err(e) => return Err(stage_err("cluster")(e.to_string())),
                    }
                } else {
                    Vec::new()
                };
                Ok(ClusterSummary {
                    id: c.id,
                    intra_similarity: c.intra_similarity,
                    retained: keep,
                    member_refs: c.member_refs.clone(),
                    representatives,
                })
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        let manifest = ClusterManifest {
            k,
            k_source,
            seed: cc.seed,
            max_iter: cc.max_iter,
            threshold: cc.threshold,
            similarity: cc.similarity,
            points: n,
            clusters: summaries,
        };
        write_json(&self.out, CLUSTERS, &manifest)?;
        self.save_stage(
            "cluster",
            &[UNITS],
            &[CLUSTERS],
            json!({
                "embedder": embedder.id(),
                "aggregate": ec.aggregate,
                "k": manifest.k,
                "k_source": manifest.k_source,
                "clusters": manifest.clusters.len(),
                "retained": retained.len(),
            }),
        )?;
        Ok(manifest)
    }

    // ---------------------------------------------------------- generate

    fn backend(&self) -> Result<Box<dyn LlmBackend>, CliError> {
        let cfg = &self.cfg.llm;
        if cfg.backend == BackendKind::Replay && cfg.fixtures.is_empty() {
            return Err(CliError::Config(
                "the replay backend needs llm.fixtures".into(),
            ));
        }
        for f in &cfg.fixtures {
            if cfg.backend == BackendKind::Replay && !f.is_file() {
                return Err(CliError::StageInputMissing {
                    stage: "generate",
                    path: f.display().to_string(),
                });
            }
        }
        build_backend(cfg).map_err(|e| match e {
            LlmError::BadFixture { .. } => CliError::Config(e.to_string()),
            other => CliError::Stage {
                stage: "generate",
                message: other.to_string(),
            },
        })
    }

    pub fn generate(&mut self) -> Result<GenerateReport, CliError> {
        let units: Vec<UnitEntry> = read_json(&self.out, UNITS, "generate")?;
        let audit: Vec<AuditEntry> = read_json(&self.out, AUDIT, "generate")?;
        let clusters: ClusterManifest = read_json(&self.out, CLUSTERS, "generate")?;
        let templates = match &self.cfg.llm.templates_dir {
            Some(d) => Templates::load_dir(d).map_err(|e| CliError::Config(e.to_string()))?,
            None => Templates::default(),
        };
        if self.backend.is_none() {
            self.backend = Some(self.backend()?);
        }
        let backend = self.backend.as_deref().expect("backend set above");
        let by_ref: HashMap<&MemberRef, &BasicUnit> =
            units.iter().map(|u| (&u.member, &u.unit)).collect();

        let mut jobs = Vec::new();
        for format in self.cfg.formats.formats() {
            for c in clusters.clusters.iter().filter(|c| c.retained) {
                let reps: Vec<BasicUnit> = c
                    .representatives
                    .iter()
                    .filter_map(|m| by_ref.get(m).map(|u| (*u).clone()))
                    .collect();
                if !reps.is_empty() {
                    jobs.push(Job {
                        provenance: Provenance::Cluster { id: c.id },
                        format,
                        input: JobInput::Units(reps),
                    });
                }
            }
            if self.cfg.generate.metadata_rules {
                for a in audit
                    .iter()
                    .filter(|a| a.label == Label::Malicious && !a.flags.is_empty())
                {
                    jobs.push(Job {
                        provenance: Provenance::Metadata {
                            package: a.package.clone(),
                            flags: a.flags.iter().map(|f| f.kind).collect(),
                        },
                        format,
                        input: JobInput::Metadata {
                            metadata: a.metadata.clone(),
                            flags: a.flags.clone(),
                        },
                    });
                }
            }
        }
        let align_cfg = AlignConfig {
            templates,
            external: self.cfg.validator.clone(),
        };
        let results: Vec<Result<Rule, Box<GenerateFailure>>> = jobs
            .par_iter()
            .map(|j| run_job(j, backend, &align_cfg))
            .collect();

        let mut rules: Vec<Rule> = Vec::new();
        let mut failures = Vec::new();
        let mut duplicates = Vec::new();
        let mut seen_text = BTreeSet::new();
        for r in results {
            match r {
                Ok(rule) => {
                    if seen_text.insert(rule.text.clone()) {
                        rules.push(rule);
                    } else {
                        duplicates.push(rule.name);
                    }
                }
                Err(f) => failures.push(*f),
            }
        }
        let files = write_rule_files(&self.out, RULE_DIR, &rules, self.cfg.generate.crlf)?;
        let report = GenerateReport {
            backend: backend.id(),
            jobs: jobs.len(),
            rules: rules.len(),
            files,
            failures,
            duplicates,
        };
        write_json(&self.out, RULES, &rules)?;
        write_json(&self.out, GENERATE_REPORT, &report)?;
        let dropped: Vec<serde_json::Value> = report
            .failures
            .iter()
            .map(|f| json!({ "provenance": f.provenance, "format": f.format, "stage": f.stage, "error": f.error }))
            .collect();
        self.save_stage(
            "generate",
            &[UNITS, AUDIT, CLUSTERS],
            &[RULES, GENERATE_REPORT],
            json!({
                "backend": report.backend,
                "model": self.cfg.llm.model,
                "temperature": self.cfg.llm.temperature,
                "jobs": report.jobs,
                "rules": report.rules,
                "dropped": dropped,
            }),
        )?;
        Ok(report)
    }

    // ---------------------------------------------------------- validate

    /// Compiles rule files; defaults to the run's rule directory.
    pub fn validate(&self, paths: &[PathBuf]) -> Result<Vec<Validation>, CliError> {
        let default = [self.out.join(RULE_DIR)];
        let targets = if paths.is_empty() {
            &default[..]
        } else {
            paths
        };
        let mut results = Vec::new();
        for t in targets {
            let files = rule_paths(t).map_err(|_| CliError::StageInputMissing {
                stage: "validate",
                path: if paths.is_empty() {
                    RULE_DIR.to_owned()
                } else {
                    t.display().to_string()
                },
            })?;
            for f in files {
                results.push(validate_file(&f, &self.cfg.validator)?);
            }
        }
        if paths.is_empty() {
            let rel: Vec<Validation> = results
                .iter()
                .cloned()
                .map(|mut v| {
                    if let Ok(p) = Path::new(&v.path).strip_prefix(&self.out) {
                        v.path = p.display().to_string();
                    }
                    v
                })
                .collect();
            write_json(&self.out, VALIDATE_REPORT, &rel)?;
            let failed = rel.iter().filter(|v| !v.ok).count();
            self.save_stage(
                "validate",
                &[RULES],
                &[VALIDATE_REPORT],
                json!({ "files": rel.len(), "failed": failed }),
            )?;
        }
        Ok(results)
    }

    // -------------------------------------------------------------- scan

    fn generated_rules(&self, stage: &'static str) -> Result<Vec<Rule>, CliError> {
        read_json(&self.out, RULES, stage)
    }

    /// Scans the corpus with the generated rules, or with rule files at `rules`.
    pub fn scan(&self, rules: Option<&Path>) -> Result<ScanReport, CliError> {
        let corpus = self.corpus("scan")?;
        let (rules, skipped, rule_source) = match rules {
            Some(p) => {
                let (r, s) = load_rules(p)?;
                (r, s, p.display().to_string())
            }
            None => (self.generated_rules("scan")?, Vec::new(), RULES.to_owned()),
        };
        let matcher = Matcher::new(&rules, self.cfg.matcher.clone());
        let report = matcher.scan_corpus(&corpus, self.cfg.threshold);
        write_json(&self.out, SCAN, &report)?;
        let mut findings = Vec::new();
        report.write_findings(&mut findings)?;
        write_text(&self.out, FINDINGS, &String::from_utf8_lossy(&findings))?;
        self.save_stage(
            "scan",
            &[CORPUS, RULES],
            &[SCAN, FINDINGS],
            json!({
                "rules": rules.len(),
                "rule_source": rule_source,
                "skipped_rule_files": skipped,
                "threshold": report.threshold,
                "matches": report.matches.len(),
                "issues": report.issues.len(),
                "approximate": report.approximate,
            }),
        )?;
        Ok(report)
    }

    // -------------------------------------------------------------- eval

    pub fn eval(&self) -> Result<EvalReport, CliError> {
        let scan: ScanReport = read_json(&self.out, SCAN, "eval")?;
        let report = evaluate(&scan, self.cfg.threshold)?;
        let max_t = scan
            .verdicts
            .iter()
            .map(|v| v.matched_count)
            .max()
            .unwrap_or(0)
            .max(1);
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| CliError::Stage {
            stage: "eval",
            message: e.to_string(),
        };
        w.write_record([
            "threshold",
            "tp",
            "fp",
            "tn",
            "fn",
            "accuracy",
            "precision",
            "recall",
            "f1",
        ])
        .map_err(csv_err)?;
        for t in 1..=max_t {
            let m = evaluate(&scan, t)?.metrics;
            let opt = |v: Option<f64>| v.map_or_else(|| "null".to_owned(), |x| format!("{x:.6}"));
            w.write_record([
                t.to_string(),
                m.tp.to_string(),
                m.fp.to_string(),
                m.tn.to_string(),
                m.fn_.to_string(),
                format!("{:.6}", m.accuracy),
                opt(m.precision),
                opt(m.recall),
                opt(m.f1),
            ])
            .map_err(csv_err)?;
        }
        let thresholds =
            String::from_utf8(w.into_inner().expect("in-memory writer")).expect("utf-8 csv");
        let precision = per_rule_precision(&scan.tallies);
        let analytics_err = |e: crate::analytics::AnalyticsError| CliError::Stage {
            stage: "eval",
            message: e.to_string(),
        };
        let coverage = cdf_csv(
            &coverage_cdf(&coverage_counts(&scan.tallies)),
            "detected_packages",
        )
        .map_err(analytics_err)?;
        write_json(&self.out, METRICS, &report)?;
        write_text(&self.out, THRESHOLDS, &thresholds)?;
        write_json(&self.out, PRECISION, &precision)?;
        write_text(
            &self.out,
            PRECISION_CSV,
            &precision_csv(&precision).map_err(analytics_err)?,
        )?;
        write_text(&self.out, COVERAGE_CSV, &coverage)?;
        self.save_stage(
            "eval",
            &[SCAN],
            &[METRICS, THRESHOLDS, PRECISION, PRECISION_CSV, COVERAGE_CSV],
            json!({ "threshold": report.threshold, "percent": report.percent }),
        )?;
        Ok(report)
    }

    // ---------------------------------------------------------- baseline

    pub fn baseline(&self) -> Result<BaselineReport, CliError> {
        let corpus = self.corpus("baseline")?;
        let clusters: ClusterManifest = read_json(&self.out, CLUSTERS, "baseline")?;
        let bcfg = self.cfg.baseline_config()?;
        let by_name: HashMap<&str, &PackageRecord> = corpus.iter().map(|r| (r.name(), r)).collect();
        let file_of = |pkg: &str, path: &str| -> Option<SourceFile> {
            by_name
                .get(pkg)?
                .files
                .iter()
                .find(|f| f.relative_path == path)
                .cloned()
        };
        let mut grouping = "cluster";
        let mut group_names: Vec<Vec<String>> = clusters
            .clusters
            .iter()
            .filter(|c| c.retained)
            .map(|c| {
                c.member_refs
                    .iter()
                    .map(|m| format!("{}/{}", m.package, m.file))
                    .collect::<BTreeSet<_>>()
                    .into_iter()
                    .collect()
            })
            .collect();
        let mut seen_groups = BTreeSet::new();
        group_names.retain(|g| seen_groups.insert(g.clone()));
        if group_names.is_empty() {
            grouping = "package";
            group_names = corpus
                .iter()
                .filter(|r| r.label == Label::Malicious)
                .map(|r| {
                    r.files
                        .iter()
                        .map(|f| format!("{}/{}", r.name(), f.relative_path))
                        .collect()
                })
                .collect();
        }
        let malware_groups: Vec<Vec<SourceFile>> = group_names
            .iter()
            .map(|g| {
                g.iter()
                    .filter_map(|key| {
                        let (pkg, path) = key.split_once('/')?;
                        file_of(pkg, path)
                    })
                    .collect()
            })
            .collect();
        let legit: Vec<&PackageRecord> = corpus
            .iter()
            .filter(|r| r.label == Label::Legitimate)
            .collect();
        let legit_groups: Vec<Vec<SourceFile>> = legit.iter().map(|r| r.files.clone()).collect();
        let outcome = run_pairs(
            &malware_groups,
            &legit_groups,
            &bcfg,
            &self.cfg.baseline.date,
        );
        write_rule_files(
            &self.out,
            BASELINE_RULE_DIR,
            &outcome.rules,
            self.cfg.generate.crlf,
        )?;
        write_json(&self.out, BASELINE_RULES, &outcome.rules)?;
        let scan = Matcher::new(&outcome.rules, self.cfg.matcher.clone())
            .scan_corpus(&corpus, self.cfg.threshold);
        write_json(&self.out, BASELINE_SCAN, &scan)?;
        let metrics = if outcome.rules.is_empty() {
            None
        } else {
            evaluate(&scan, self.cfg.threshold).ok()
        };
        if let Some(m) = &metrics {
            write_json(&self.out, BASELINE_METRICS, m)?;
        }
        let report = BaselineReport {
            grouping: grouping.to_owned(),
            malware_groups: group_names,
            legit_groups: legit.iter().map(|r| r.name().to_owned()).collect(),
            rules: outcome.rules.len(),
            skipped: outcome.skipped,
            metrics,
        };
        write_json(&self.out, BASELINE_REPORT, &report)?;
        self.save_stage(
            "baseline",
            &[CORPUS, CLUSTERS],
            &[
                BASELINE_RULES,
                BASELINE_SCAN,
                BASELINE_METRICS,
                BASELINE_REPORT,
            ],
            json!({
                "grouping": report.grouping,
                "rules": report.rules,
                "skipped": report.skipped.len(),
                "weights": self.cfg.baseline.weights,
                "threshold": self.cfg.baseline.threshold,
            }),
        )?;
        Ok(report)
    }

    // ----------------------------------------------------------- analyze

    pub fn analyze(&self) -> Result<AnalyzeSummary, CliError> {
        let mut rules = self.generated_rules("analyze")?;
        let taxonomy = match &self.cfg.analytics.taxonomy {
            Some(p) => Taxonomy::load(p).map_err(|e| CliError::Config(e.to_string()))?,
            None => Taxonomy::default(),
        };
        for r in &mut rules {
            r.taxonomy_tags = classify_rule(r, &taxonomy);
        }
        let tags: Vec<_> = rules.iter().map(|r| r.taxonomy_tags.clone()).collect();
        let err = |e: crate::analytics::AnalyticsError| CliError::Stage {
            stage: "analyze",
            message: e.to_string(),
        };
        let heatmap = category_heatmap(&tags, &taxonomy.category_names());
        let subcats = subcategory_counts(&tags, &taxonomy);
        write_json(&self.out, ANALYZED_RULES, &rules)?;
        write_text(&self.out, HEATMAP_CSV, &heatmap.to_csv().map_err(err)?)?;
        write_text(
            &self.out,
            SUBCATEGORY_CSV,
            &subcategory_csv(&subcats).map_err(err)?,
        )?;
        write_json(&self.out, SCORES, &score_cdf(&rules))?;

        let reference = match &self.cfg.analytics.compare_rules {
            Some(p) => Some((p.display().to_string(), load_rules(p)?.0)),
            None => match read_json::<Vec<Rule>>(&self.out, BASELINE_RULES, "analyze") {
                Ok(r) => Some((BASELINE_RULES.to_owned(), r)),
                Err(CliError::StageInputMissing { .. }) => None,
                Err(e) => return Err(e),
            },
        };
        let threshold = self.cfg.analytics.overlap_threshold;
        let overlap = reference.map(|(against, reference)| {
            let rep = rule_overlap(&rules, &reference, threshold);
            (against, rep)
        });
        let mut outputs = vec![
            ANALYZED_RULES,
            HEATMAP_CSV,
            SUBCATEGORY_CSV,
            SCORES,
            SUMMARY,
        ];
        if let Some((_, rep)) = &overlap {
            write_json(&self.out, OVERLAP, rep)?;
            outputs.push(OVERLAP);
        }
        let fallback = &taxonomy.fallback;
        let summary = AnalyzeSummary {
            rules: rules.len(),
            yara: rules
                .iter()
                .filter(|r| r.format == RuleFormat::Yara)
                .count(),
            semgrep: rules
                .iter()
                .filter(|r| r.format == RuleFormat::Semgrep)
                .count(),
            taxonomy_heuristic: taxonomy.heuristic,
            categories_used: tags
                .iter()
                .flatten()
                .map(|t| t.category.as_str())
                .collect::<BTreeSet<_>>()
                .len(),
            fallback_rules: tags.iter().filter(|t| t.contains(fallback)).count(),
            overlap: overlap.map(|(against, rep)| OverlapSummary {
                against,
                threshold,
                pairs: rep.pairs.len(),
                overlapping_generated: rep.overlapping_a,
                overlapping_reference: rep.overlapping_b,
            }),
        };
        write_json(&self.out, SUMMARY, &summary)?;
        self.save_stage(
            "analyze",
            &[RULES, BASELINE_RULES],
            &outputs,
            json!({ "summary": summary }),
        )?;
        Ok(summary)
    }

    // ---------------------------------------------------------- pipeline

    pub fn pipeline(&mut self) -> Result<PipelineSummary, CliError> {
        let ingest = self.ingest()?;
        let (units, _) = self.segment()?;
        let clusters = self.cluster()?;
        let generate = self.generate()?;
        let validation = self.validate(&[])?;
        let failed = validation.iter().filter(|v| !v.ok).count();
        if failed > 0 {
            return Err(CliError::Invalid {
                failed,
                total: validation.len(),
            });
        }
        self.scan(None)?;
        let eval = self.eval()?;
        let baseline = self.baseline()?;
        let analyze = self.analyze()?;
        Ok(PipelineSummary {
            packages: ingest.records,
            units: units.len(),
            clusters_retained: clusters.clusters.iter().filter(|c| c.retained).count(),
            rules: generate.rules,
            failures: generate.failures.len(),
            valid_rules: validation.len(),
            eval,
            baseline_rules: baseline.rules,
            categories_used: analyze.categories_used,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub packages: usize,
    pub units: usize,
    pub clusters_retained: usize,
    pub rules: usize,
    pub failures: usize,
    pub valid_rules: usize,
    pub eval: EvalReport,
    pub baseline_rules: usize,
    pub categories_used: usize,
}

/// Confusion metrics over labeled packages at threshold `t`.
pub fn evaluate(scan: &ScanReport, t: usize) -> Result<EvalReport, CliError> {
    let verdicts = scan.verdicts_at(t);
    let (labeled, unlabeled): (Vec<_>, Vec<_>) = verdicts
        .into_iter()
        .partition(|v| v.label != Label::Unknown);
    let metrics = confusion_metrics(&labeled).map_err(|e| CliError::Stage {
        stage: "eval",
        message: e.to_string(),
    })?;
    Ok(EvalReport {
        threshold: t,
        percent: metrics.percent_row(),
        metrics,
        excluded_unlabeled: unlabeled.len(),
        approximate: scan.approximate,
    })
}

// ---------------------------------------------------------------- jobs

struct Job {
    provenance: Provenance,
    format: RuleFormat,
    input: JobInput,
}

enum JobInput {
    Units(Vec<BasicUnit>),
    Metadata {
        metadata: PackageMetadata,
        flags: Vec<MetadataFlag>,
    },
}

fn run_job(
    job: &Job,
    backend: &dyn LlmBackend,
    cfg: &AlignConfig,
) -> Result<Rule, Box<GenerateFailure>> {
    let input = match &job.input {
        JobInput::Units(units) => CraftInput::Units(units),
        JobInput::Metadata { metadata, flags } => CraftInput::Metadata { metadata, flags },
    };
    generate_rule(input, &job.provenance, job.format, backend, cfg)
}

/// Craft, refine and align one rule.
pub fn generate_rule(
    input: CraftInput<'_>,
    provenance: &Provenance,
    format: RuleFormat,
    backend: &dyn LlmBackend,
    cfg: &AlignConfig,
) -> Result<Rule, Box<GenerateFailure>> {
    let fail = |stage: &str, error: String, alignment: Option<AlignmentFailure>| {
        Box::new(GenerateFailure {
            provenance: provenance.clone(),
            format,
            stage: stage.to_owned(),
            error,
            alignment,
        })
    };
    let templates = &cfg.templates;
    let crafted = build_craft_prompt(input, format, templates.few_shot(format), templates)
        .and_then(|p| complete(&p, backend))
        .and_then(|r| parse_rule_output(&r, format))
        .map_err(|e| fail("craft", e.to_string(), None))?;
    let refined = build_refine_prompt(
        &crafted.analysis_text,
        &crafted.rule_text,
        format,
        templates,
    )
    .or_else(|_| build_refine_prompt("(no analysis given)", &crafted.rule_text, format, templates))
    .and_then(|p| complete(&p, backend))
    .map_err(|e| fail("refine", e.to_string(), None))?;
    let mut draft = match parse_rule_output(&refined, format) {
        Ok(r) => RuleDraft {
            analysis_text: if r.analysis_text.trim().is_empty() {
                crafted.analysis_text.clone()
            } else {
                r.analysis_text
            },
            rule_text: r.rule_text,
            rule_format: format,
            provenance: Provenance::Unknown,
            scores: crate::rule::Scores {
                confidence: r.scores.confidence.or(crafted.scores.confidence),
                maliciousness: r.scores.maliciousness.or(crafted.scores.maliciousness),
                risk: r.scores.risk.or(crafted.scores.risk),
            },
        },
        Err(e) => {
            log::debug!("refine reply without rule ({e}); keeping the crafted rule");
            crafted
        }
    };
    draft.provenance = provenance.clone();
    align_rule(&draft, backend, cfg).map_err(|a| fail("align", a.to_string(), Some(a)))
}
