use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize};
use serde_json::Value;

use pcp_core::backbones::{GmmOptions, KnnOptions};
use pcp_core::{
    BetaChoice, BetaFold, BetaGrid, MeasureEstimator, NormKind, PcpConfig, PcpError, QuantileMode, Result,
    SplitFractions, SynthSpec, WscConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Pcp,
    Hdpcp,
    NaiveInterval,
    BonferroniNaive,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Pcp => "pcp",
            Method::Hdpcp => "hdpcp",
            Method::NaiveInterval => "naive_interval",
            Method::BonferroniNaive => "bonferroni_naive",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Where the labeled points come from: exactly one of `synth` or `csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<PathBuf>,
    /// Subset of target columns to keep.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub targets: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackboneConfig {
    Gmm(GmmOptions),
    Knn(KnnOptions),
    /// The generating law of a synthetic family.
    Truth,
    /// External process speaking the line-delimited JSON protocol.
    Bridge { command: Vec<String> },
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig::Gmm(GmmOptions::default())
    }
}

/// PCP settings; `k_samples` defaults by target dimension and `beta` to
/// the standard grid for HD-PCP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PcpSection {
    pub alpha: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k_samples: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<BetaChoice>,
    pub beta_fold: BetaFold,
    pub norm: NormKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub quantile_mode: Option<QuantileMode>,
}

impl Default for PcpSection {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            k_samples: None,
            beta: None,
            beta_fold: BetaFold::Calibration,
            norm: NormKind::L2,
            quantile_mode: None,
        }
    }
}

impl PcpSection {
    pub fn default_k(d: usize) -> usize {
        if d == 1 {
            40
        } else {
            1000
        }
    }

    /// Core configuration for `method` on `d`-dimensional targets.
    pub fn resolve(&self, method: Method, d: usize, seed: u64) -> Result<PcpConfig> {
        let beta = match method {
            Method::Hdpcp => self.beta.clone().unwrap_or_else(|| BetaChoice::Grid(BetaGrid::standard())),
            _ => BetaChoice::Fixed(0.0),
        };
        let cfg = PcpConfig {
            alpha: self.alpha,
            k_samples: self.k_samples.unwrap_or_else(|| Self::default_k(d)),
            beta,
            beta_fold: self.beta_fold,
            norm: self.norm,
            quantile_mode: self.quantile_mode,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    #[serde(default)]
    pub split: SplitFractions,
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub pcp: PcpSection,
    /// One method or a list; every method runs on the same splits.
    #[serde(default = "default_methods", deserialize_with = "one_or_many")]
    pub method: Vec<Method>,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub wsc: WscConfig,
    #[serde(default)]
    pub measure: MeasureEstimator,
    pub output_dir: PathBuf,
    /// Write per-point predictive sets (needed by `plot`).
    #[serde(default = "yes")]
    pub save_sets: bool,
}

fn default_methods() -> Vec<Method> {
    vec![Method::Pcp]
}

fn default_repetitions() -> usize {
    5
}

fn yes() -> bool {
    true
}

fn one_or_many<'de, D: Deserializer<'de>>(de: D) -> std::result::Result<Vec<Method>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany {
        One(Method),
        Many(Vec<Method>),
    }
    Ok(match OneOrMany::deserialize(de)? {
        OneOrMany::One(m) => vec![m],
        OneOrMany::Many(v) => v,
    })
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        match (&self.data.synth, &self.data.csv) {
            (Some(spec), None) => spec.validate()?,
            (None, Some(_)) => {}
            _ => return Err(PcpError::Config("data needs exactly one of `synth` or `csv`".into())),
        }
        if matches!(self.backbone, BackboneConfig::Truth) && self.data.synth.is_none() {
            return Err(PcpError::Config("the truth backbone needs synthetic data".into()));
        }
        if let BackboneConfig::Bridge { command } = &self.backbone {
            if command.is_empty() {
                return Err(PcpError::Config("bridge command is empty".into()));
            }
        }
        self.split.validate()?;
        if self.repetitions == 0 {
            return Err(PcpError::Config("repetitions must be >= 1".into()));
        }
        if self.method.is_empty() {
            return Err(PcpError::Config("at least one method is required".into()));
        }
        let mut seen = self.method.clone();
        seen.sort_by_key(|m| m.as_str());
        seen.dedup();
        if seen.len() != self.method.len() {
            return Err(PcpError::Config("methods must be distinct".into()));
        }
        self.wsc.validate()?;
        self.pcp.resolve(Method::Hdpcp, 1, 0)?;
        Ok(())
    }

    pub fn from_value(value: Value) -> Result<Self> {
        let cfg: Self = serde_json::from_value(value).map_err(|e| PcpError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Parses a config document: JSON when it starts with `{`, TOML otherwise.
pub fn parse_document(text: &str) -> Result<Value> {
    if text.trim_start().starts_with('{') {
        serde_json::from_str(text).map_err(|e| PcpError::Config(format!("invalid JSON config: {e}")))
    } else {
        toml::from_str(text).map_err(|e| PcpError::Config(format!("invalid TOML config: {e}")))
    }
}

/// A `--key=value` override. Dotted keys address nested sections; the value
/// is read as JSON when it parses, as a plain string otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct Override {
    pub path: Vec<String>,
    pub value: Value,
}

impl FromStr for Override {
    type Err = PcpError;

    fn from_str(s: &str) -> Result<Self> {
        let body = s.strip_prefix("--").unwrap_or(s);
        let (key, raw) = body
            .split_once('=')
            .ok_or_else(|| PcpError::Config(format!("override {s:?} is not of the form --key=value")))?;
        let path: Vec<String> = key.split('.').map(str::to_owned).collect();
        if path.iter().any(|p| p.is_empty()) {
            return Err(PcpError::Config(format!("override {s:?} has an empty key segment")));
        }
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
        Ok(Self { path, value })
    }
}

impl Override {
    pub fn apply(&self, doc: &mut Value) -> Result<()> {
        let mut node = doc;
        for (depth, key) in self.path.iter().enumerate() {
            let obj = node.as_object_mut().ok_or_else(|| {
                PcpError::Config(format!("cannot override {}: {} is not a table", self.path.join("."), self.path[..depth].join(".")))
            })?;
            if depth + 1 == self.path.len() {
                obj.insert(key.clone(), self.value.clone());
                return Ok(());
            }
            node = obj.entry(key.clone()).or_insert_with(|| Value::Object(Default::default()));
        }
        Ok(())
    }
}

/// Reads a config file and applies overrides in order.
pub fn load_config(path: &Path, overrides: &[Override]) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| PcpError::Config(format!("cannot read config {}: {e}", path.display())))?;
    let mut doc = parse_document(&text)?;
    for o in overrides {
        o.apply(&mut doc)?;
    }
    ExperimentConfig::from_value(doc)
}
