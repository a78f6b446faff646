use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::CliError;
use crate::baseline::{BaselineConfig, Weights};
use crate::clusterer::{self, SimilarityMode};
use crate::corpus::{Ecosystem, Label, RegistryConfig};
use crate::embedding::{EmbedderKind, EmbeddingConfig};
use crate::llm::{BackendKind, LlmConfig};
use crate::matcher::MatcherConfig;
use crate::rule::RuleFormat;
use crate::segmenter::{AuditConfig, SEGMENT_THRESHOLD};
use crate::validator::ExternalCompilers;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum FormatChoice {
    #[default]
    Yara,
    Semgrep,
    Both,
}

impl FormatChoice {
    pub fn formats(self) -> Vec<RuleFormat> {
        match self {
            FormatChoice::Yara => vec![RuleFormat::Yara],
            FormatChoice::Semgrep => vec![RuleFormat::Semgrep],
            FormatChoice::Both => vec![RuleFormat::Yara, RuleFormat::Semgrep],
        }
    }
}

/// A directory of archives sharing one ecosystem and label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSource {
    pub path: PathBuf,
    pub ecosystem: Ecosystem,
    pub label: Label,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSection {
    pub sources: Vec<CorpusSource>,
    pub registry: RegistryConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentSection {
    /// Tokens per embedding segment.
    pub threshold: usize,
    /// Popular package names for the typosquatting check; built-in list when unset.
    pub popular: Option<PathBuf>,
    pub denylist: Option<PathBuf>,
    pub audit: AuditConfig,
}

impl Default for SegmentSection {
    fn default() -> Self {
        Self {
            threshold: SEGMENT_THRESHOLD,
            popular: None,
            denylist: None,
            audit: AuditConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterSection {
    /// `max(1, floor(sqrt(n / 2)))` when unset.
    pub k: Option<usize>,
    pub seed: u64,
    pub max_iter: usize,
    pub threshold: f64,
    pub representatives: usize,
    pub similarity: SimilarityMode,
}

impl Default for ClusterSection {
    fn default() -> Self {
        Self {
            k: None,
            seed: clusterer::DEFAULT_SEED,
            max_iter: clusterer::DEFAULT_MAX_ITER,
            threshold: clusterer::DEFAULT_THRESHOLD,
            representatives: clusterer::DEFAULT_REPRESENTATIVES,
            similarity: SimilarityMode::InverseDistance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerateSection {
    /// Also craft rules from flagged package metadata.
    pub metadata_rules: bool,
    /// Write rule files with CRLF line endings.
    pub crlf: bool,
}

impl Default for GenerateSection {
    fn default() -> Self {
        Self {
            metadata_rules: true,
            crlf: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineSection {
    pub weights: Weights,
    pub threshold: f64,
    pub trees: usize,
    pub seed: u64,
    /// Written into each rule's `date` meta field.
    pub date: String,
    /// Replaces the built-in YARA template.
    pub template: Option<PathBuf>,
}

impl Default for BaselineSection {
    fn default() -> Self {
        let b = BaselineConfig::default();
        Self {
            weights: b.weights,
            threshold: b.threshold,
            trees: b.trees,
            seed: b.seed,
            date: "1970-01-01".into(),
            template: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalyticsSection {
    /// Replaces the built-in taxonomy table.
    pub taxonomy: Option<PathBuf>,
    pub overlap_threshold: f64,
    /// Rule file or directory compared against the generated rules.
    pub compare_rules: Option<PathBuf>,
}

impl Default for AnalyticsSection {
    fn default() -> Self {
        Self {
            taxonomy: None,
            overlap_threshold: crate::analytics::DEFAULT_OVERLAP_THRESHOLD,
            compare_rules: None,
        }
    }
}

/// Everything a run depends on. Relative paths are resolved against the
/// directory of the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    /// Worker threads; 0 lets the runtime decide.
    pub jobs: usize,
    pub formats: FormatChoice,
    /// Matched rules needed to call a package malicious.
    pub threshold: usize,
    pub allow_network: bool,
    pub corpus: CorpusSection,
    pub segment: SegmentSection,
    pub embedding: EmbeddingConfig,
    pub cluster: ClusterSection,
    pub llm: LlmConfig,
    pub generate: GenerateSection,
    pub validator: ExternalCompilers,
    pub matcher: MatcherConfig,
    pub baseline: BaselineSection,
    pub analytics: AnalyticsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("run"),
            jobs: 0,
            formats: FormatChoice::Yara,
            threshold: crate::matcher::DEFAULT_THRESHOLD,
            allow_network: false,
            corpus: CorpusSection::default(),
            segment: SegmentSection::default(),
            embedding: EmbeddingConfig::default(),
            cluster: ClusterSection::default(),
            llm: LlmConfig::default(),
            generate: GenerateSection::default(),
            validator: ExternalCompilers::default(),
            matcher: MatcherConfig::default(),
            baseline: BaselineSection::default(),
            analytics: AnalyticsSection::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out_dir: Option<PathBuf>,
    pub jobs: Option<usize>,
    pub seed: Option<u64>,
    pub formats: Option<FormatChoice>,
    pub threshold: Option<usize>,
    pub llm_backend: Option<BackendKind>,
    pub record_fixtures: Option<PathBuf>,
    pub allow_network: bool,
}

impl RunConfig {
    /// Reads a TOML config, or the `config` object of a run manifest when
    /// the file ends in `.json`.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig = if path.extension().is_some_and(|e| e == "json") {
            let value: serde_json::Value = serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            let config = value
                .get("config")
                .cloned()
                .ok_or_else(|| CliError::Config(format!("{}: no config object", path.display())))?;
            serde_json::from_value(config)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        };
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let fix_opt = |p: &mut Option<PathBuf>| {
            if let Some(p) = p {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        };
        fix(&mut self.out_dir);
        for s in &mut self.corpus.sources {
            fix(&mut s.path);
        }
        fix_opt(&mut self.segment.popular);
        fix_opt(&mut self.segment.denylist);
        self.llm.fixtures.iter_mut().for_each(fix);
        fix_opt(&mut self.llm.record_to);
        fix_opt(&mut self.llm.templates_dir);
        fix_opt(&mut self.baseline.template);
        fix_opt(&mut self.analytics.taxonomy);
        fix_opt(&mut self.analytics.compare_rules);
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<(), CliError> {
        if let Some(p) = &o.out_dir {
            self.out_dir = p.clone();
        }
        if let Some(j) = o.jobs {
            self.jobs = j;
        }
        if let Some(s) = o.seed {
            self.cluster.seed = s;
            self.baseline.seed = s;
        }
        if let Some(f) = o.formats {
            self.formats = f;
        }
        if let Some(t) = o.threshold {
            self.threshold = t;
        }
        if let Some(b) = o.llm_backend {
            self.llm.backend = b;
        }
        if let Some(p) = &o.record_fixtures {
            if o.llm_backend.is_some_and(|b| b != BackendKind::Record) {
                return Err(CliError::Config(
                    "--record-fixtures needs the record backend".into(),
                ));
            }
            self.llm.backend = BackendKind::Record;
            self.llm.record_to = Some(p.clone());
        }
        if o.allow_network {
            self.allow_network = true;
        }
        self.check()
    }

    pub fn check(&self) -> Result<(), CliError> {
        if self.llm.backend == BackendKind::Replay {
            if self.allow_network {
                return Err(CliError::Config(
                    "replay mode forbids --allow-network".into(),
                ));
            }
            if self.embedding.backend == EmbedderKind::Remote {
                return Err(CliError::Config(
                    "replay mode forbids the remote embedding backend".into(),
                ));
            }
        }
        if self.llm.backend == BackendKind::Record && self.llm.record_to.is_none() {
            return Err(CliError::Config(
                "record mode needs llm.record_to or --record-fixtures".into(),
            ));
        }
        if self.segment.threshold == 0 {
            return Err(CliError::Config(
                "segment.threshold must be at least 1".into(),
            ));
        }
        if self.cluster.k == Some(0) {
            return Err(CliError::Config("cluster.k must be at least 1".into()));
        }
        if self.cluster.representatives == 0 {
            return Err(CliError::Config(
                "cluster.representatives must be at least 1".into(),
            ));
        }
        if self.embedding.dim == 0 {
            return Err(CliError::Config("embedding.dim must be at least 1".into()));
        }
        Ok(())
    }

    pub fn baseline_config(&self) -> Result<BaselineConfig, CliError> {
        let template = match &self.baseline.template {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?,
            None => crate::baseline::DEFAULT_TEMPLATE.to_owned(),
        };
        Ok(BaselineConfig {
            weights: self.baseline.weights,
            threshold: self.baseline.threshold,
            trees: self.baseline.trees,
            seed: self.baseline.seed,
            template,
        })
    }

    /// Copy for the run manifest. The output directory is left out so runs
    /// into different directories record identical configs.
    pub fn for_manifest(&self) -> Self {
        let mut c = self.clone();
        c.out_dir = PathBuf::from(".");
        c
    }
}
