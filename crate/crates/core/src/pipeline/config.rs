use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::discovery::{ClusteringConfig, DiscoveryConfig};
use crate::encoder::{MlmConfig, TinyConfig};
use crate::error::{Error, Result};
use crate::segmenter::SegmentationConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    #[default]
    Tiny,
    External,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub seeds: Option<PathBuf>,
    /// Gold clusters, `{type: {attribute: [values]}}`.
    pub gold: Option<PathBuf>,
    /// Gold phrase spans, used to pick the segmentation threshold.
    pub gold_spans: Option<PathBuf>,
    pub workdir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            corpus: None,
            seeds: None,
            gold: None,
            gold_spans: None,
            workdir: PathBuf::from("work"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExternalConfig {
    pub program: String,
    pub args: Vec<String>,
}

/// Threshold selection from gold spans.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    /// Leading products used as the validation set; 0 keeps the configured threshold.
    pub products: usize,
    /// Points of the evenly spaced threshold grid over [0, 2].
    pub grid: usize,
    /// Score each threshold on the candidates after pattern merging instead
    /// of on the raw segmentation.
    pub merged: bool,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            products: 200,
            grid: 41,
            merged: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateFilter {
    /// Candidate values seen fewer times are dropped.
    pub min_occurrences: usize,
}

impl Default for CandidateFilter {
    fn default() -> Self {
        CandidateFilter { min_occurrences: 2 }
    }
}

/// Every setting of the command-line pipeline.
///
/// On disk this is a TOML document whose dotted keys mirror the field
/// paths, e.g. `clustering.eps = 0.3` or `paths.corpus = "titles.jsonl"`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub seed: u64,
    pub max_iter: usize,
    pub max_tokens: usize,
    pub backend: Backend,
    pub paths: Paths,
    pub external: ExternalConfig,
    pub encoder: TinyConfig,
    pub pretrain: MlmConfig,
    pub segmentation: SegmentationConfig,
    pub calibration: CalibrationConfig,
    pub candidates: CandidateFilter,
    pub train: TrainConfig,
    pub clustering: ClusteringConfig,
    pub discovery: DiscoveryConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 7,
            max_iter: 5,
            max_tokens: crate::corpus::DEFAULT_MAX_TOKENS,
            backend: Backend::Tiny,
            paths: Paths::default(),
            external: ExternalConfig::default(),
            encoder: TinyConfig::default(),
            pretrain: MlmConfig::default(),
            segmentation: SegmentationConfig::default(),
            calibration: CalibrationConfig::default(),
            candidates: CandidateFilter::default(),
            train: TrainConfig::default(),
            clustering: ClusteringConfig::default(),
            discovery: DiscoveryConfig::default(),
        }
    }
}

fn flatten(prefix: &str, value: &toml::Value, out: &mut Vec<(String, toml::Value)>) {
    match value {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => out.push((prefix.to_owned(), other.clone())),
    }
}

/// Parses the right-hand side of `key=value`; bare words become strings.
fn parse_scalar(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_owned()))
}

impl PipelineConfig {
    /// Defaults overridden by every key of a TOML document.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table =
            toml::from_str(text).map_err(|e| Error::config("config", e.message().to_owned()))?;
        let mut entries = Vec::new();
        flatten("", &toml::Value::Table(table), &mut entries);
        let mut config = PipelineConfig::default();
        for (key, value) in entries {
            config.set_value(&key, value)?;
        }
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Applies one `key=value` override.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        self.set_value(key, parse_scalar(raw))
    }

    /// Applies a `key=value` string as given on the command line.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::config(assignment, "expected key=value"))?;
        self.set(key.trim(), raw.trim())
    }

    fn set_value(&mut self, key: &str, value: toml::Value) -> Result<()> {
        let value = serde_json::to_value(&value).map_err(|e| Error::config(key, e.to_string()))?;
        let mut root = serde_json::to_value(&*self)?;
        let pristine = serde_json::to_value(PipelineConfig::default())?;
        let parts: Vec<&str> = key.split('.').collect();
        if parts.iter().any(|p| p.is_empty()) {
            return Err(Error::config(key, "malformed key"));
        }
        // new keys are only accepted inside maps that are open-ended by default
        let mut open = false;
        let mut probe = Some(&pristine);
        let mut node = &mut root;
        for (i, part) in parts.iter().enumerate() {
            if let Some(Value::Object(m)) = probe {
                open |= m.is_empty();
            }
            probe = probe.and_then(|p| p.get(*part));
            let Value::Object(map) = node else {
                return Err(Error::config(key, "not a section"));
            };
            if probe.is_none() && !open {
                return Err(Error::config(key, "unknown key"));
            }
            if i + 1 == parts.len() {
                if matches!(map.get(*part), Some(Value::Object(_))) {
                    return Err(Error::config(key, "is a section, not a value"));
                }
                map.insert((*part).to_owned(), value);
                break;
            }
            node = map.entry((*part).to_owned()).or_insert_with(|| Value::Object(Map::new()));
        }
        *self = serde_json::from_value(root).map_err(|e| Error::config(key, e.to_string()))?;
        Ok(())
    }

    /// The discovery settings with the top-level clustering and training sections.
    pub fn discovery_config(&self) -> DiscoveryConfig {
        DiscoveryConfig {
            clustering: self.clustering.clone(),
            train: self.train.clone(),
            ..self.discovery.clone()
        }
    }

    /// Checks every section; file paths are checked by [`Self::require`].
    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0 {
            return Err(Error::config("max_iter", "must be at least 1"));
        }
        if self.max_tokens == 0 {
            return Err(Error::config("max_tokens", "must be positive"));
        }
        if self.backend == Backend::External && self.external.program.is_empty() {
            return Err(Error::config("external.program", "required by the external backend"));
        }
        if self.encoder.dim == 0 || self.encoder.heads == 0 || self.encoder.dim % self.encoder.heads != 0 {
            return Err(Error::config("encoder.dim", "must be a positive multiple of encoder.heads"));
        }
        if self.encoder.max_len < 2 {
            return Err(Error::config("encoder.max_len", "must be at least 2"));
        }
        if self.calibration.products > 0 && self.calibration.grid < 2 {
            return Err(Error::config("calibration.grid", "must have at least 2 points"));
        }
        if !(0.0..=1.0).contains(&self.pretrain.mask_rate) {
            return Err(Error::config("pretrain.mask_rate", "must be within [0, 1]"));
        }
        if self.pretrain.batch_size == 0 {
            return Err(Error::config("pretrain.batch_size", "must be positive"));
        }
        self.segmentation.validate()?;
        self.discovery_config().validate()
    }

    /// Path configured under `field`, which must exist on disk.
    pub fn require(&self, field: &str) -> Result<&Path> {
        let path = match field {
            "paths.corpus" => self.paths.corpus.as_deref(),
            "paths.seeds" => self.paths.seeds.as_deref(),
            "paths.gold" => self.paths.gold.as_deref(),
            "paths.gold_spans" => self.paths.gold_spans.as_deref(),
            _ => return Err(Error::config(field, "not a path setting")),
        };
        let path = path.ok_or_else(|| Error::config(field, "missing"))?;
        if !path.exists() {
            return Err(Error::config(field, format!("{} does not exist", path.display())));
        }
        Ok(path)
    }

    /// Like [`Self::require`], but an unset path is `None`.
    pub fn optional(&self, field: &str) -> Result<Option<&Path>> {
        match self.require(field) {
            Err(Error::Config { message, .. }) if message == "missing" => Ok(None),
            other => other.map(Some),
        }
    }

    pub fn to_toml_string(&self) -> Result<String> {
        let value = serde_json::to_value(self)?;
        toml::to_string(&strip_nulls(value)).map_err(|e| Error::config("config", e.to_string()))
    }
}

fn strip_nulls(value: Value) -> Value {
    match value {
        Value::Object(m) => Value::Object(
            m.into_iter()
                .filter(|(_, v)| !v.is_null())
                .map(|(k, v)| (k, strip_nulls(v)))
                .collect(),
        ),
        other => other,
    }
}
