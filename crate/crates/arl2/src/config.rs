//! JSON run configurations (schema version 1).
//!
//! Unknown fields are rejected, missing ones take the defaults below, and
//! every config is validated before any compute. `--seed` and
//! `--precision` override the file.

use std::path::{Path, PathBuf};

use arl2_core::hybrid::Policy;
use arl2_core::streaming::{Backend, ModelDims};
use arl2_core::Precision;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrecisionName {
    Double,
    Single,
}

impl From<PrecisionName> for Precision {
    fn from(p: PrecisionName) -> Self {
        match p {
            PrecisionName::Double => Precision::Double,
            PrecisionName::Single => Precision::Single,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendName {
    Softmax,
    Hybrid,
}

impl From<BackendName> for Backend {
    fn from(b: BackendName) -> Self {
        match b {
            BackendName::Softmax => Backend::Softmax,
            BackendName::Hybrid => Backend::Hybrid,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerName {
    Momentum,
    Adam,
}

fn version() -> u32 {
    SCHEMA_VERSION
}

/// Toy backbone geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub num_layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub ff_dim: usize,
    pub tokens_per_frame: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            num_layers: 4,
            heads: 4,
            head_dim: 16,
            ff_dim: 128,
            tokens_per_frame: 16,
        }
    }
}

impl ModelSpec {
    pub fn dims(&self) -> ModelDims {
        ModelDims {
            num_layers: self.num_layers,
            heads: self.heads,
            head_dim: self.head_dim,
            ff_dim: self.ff_dim,
        }
    }

    fn validate(&self) -> Result<()> {
        positive(&[
            ("model.num_layers", self.num_layers),
            ("model.heads", self.heads),
            ("model.head_dim", self.head_dim),
            ("model.ff_dim", self.ff_dim),
            ("model.tokens_per_frame", self.tokens_per_frame),
        ])?;
        if !self.head_dim.is_multiple_of(2) {
            return Err(invalid("model.head_dim must be even for rotary embeddings"));
        }
        Ok(())
    }

    fn check_layers(&self, field: &str, layers: &[usize]) -> Result<()> {
        for (i, &l) in layers.iter().enumerate() {
            if l >= self.num_layers {
                return Err(invalid(format!(
                    "{field}: layer {l} out of range 0..{}",
                    self.num_layers
                )));
            }
            if layers[..i].contains(&l) {
                return Err(invalid(format!("{field}: layer {l} listed twice")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicySpec {
    pub frame_level_access: bool,
    pub clean_pass_only: bool,
}

impl Default for PolicySpec {
    fn default() -> Self {
        let p = Policy::default();
        Self {
            frame_level_access: p.frame_level_access,
            clean_pass_only: p.clean_pass_only,
        }
    }
}

impl From<PolicySpec> for Policy {
    fn from(p: PolicySpec) -> Self {
        Policy {
            frame_level_access: p.frame_level_access,
            clean_pass_only: p.clean_pass_only,
        }
    }
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn positive(fields: &[(&str, usize)]) -> Result<()> {
    for (name, v) in fields {
        if *v == 0 {
            return Err(invalid(format!("{name} must be positive")));
        }
    }
    Ok(())
}

fn check_version(v: u32) -> Result<()> {
    if v != SCHEMA_VERSION {
        return Err(invalid(format!(
            "schema version {v} is not supported (expected {SCHEMA_VERSION})"
        )));
    }
    Ok(())
}

/// Behavior shared by every subcommand config.
pub trait RunConfig: Serialize + DeserializeOwned + Default {
    fn validate(&self) -> Result<()>;
    fn set_seed(&mut self, seed: u64);
    fn set_precision(&mut self, precision: PrecisionName);
    fn seed(&self) -> u64;
    /// Resolves relative paths inside the config against its directory.
    fn rebase_paths(&mut self, _dir: &Path) {}
}

/// Reads `path` (or the defaults when absent), applies flag overrides and
/// validates.
pub fn load<C: RunConfig>(path: Option<&Path>, seed: Option<u64>, precision: Option<PrecisionName>) -> Result<C> {
    let mut cfg: C = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            let mut c: C = serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", p.display())))?;
            c.rebase_paths(p.parent().unwrap_or(Path::new(".")));
            c
        }
        None => C::default(),
    };
    if let Some(s) = seed {
        cfg.set_seed(s);
    }
    if let Some(p) = precision {
        cfg.set_precision(p);
    }
    cfg.validate()?;
    Ok(cfg)
}

macro_rules! common_fields {
    ($t:ty) => {
        impl $t {
            pub fn precision(&self) -> Precision {
                self.precision.into()
            }
        }
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub version: u32,
    pub model: ModelSpec,
    /// Frame counts to sweep.
    pub frames: Vec<usize>,
    pub backends: Vec<BackendName>,
    pub denoise_steps: usize,
    pub chunk_size: usize,
    pub seed: u64,
    pub precision: PrecisionName,
    /// Record wall-clock times; off keeps every output deterministic.
    pub timing: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            version: version(),
            model: ModelSpec::default(),
            frames: vec![5, 10, 20, 40, 80],
            backends: vec![BackendName::Softmax, BackendName::Hybrid],
            denoise_steps: 1,
            chunk_size: 16,
            seed: 0,
            precision: PrecisionName::Double,
            timing: false,
        }
    }
}

common_fields!(BenchConfig);

impl RunConfig for BenchConfig {
    fn validate(&self) -> Result<()> {
        check_version(self.version)?;
        self.model.validate()?;
        positive(&[("denoise_steps", self.denoise_steps), ("chunk_size", self.chunk_size)])?;
        if self.frames.is_empty() {
            return Err(invalid("frames: the sweep list is empty"));
        }
        if self.frames.contains(&0) {
            return Err(invalid("frames: every frame count must be positive"));
        }
        if self.backends.is_empty() {
            return Err(invalid("backends: no backend to run"));
        }
        Ok(())
    }
    fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
    }
    fn set_precision(&mut self, p: PrecisionName) {
        self.precision = p;
    }
    fn seed(&self) -> u64 {
        self.seed
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateConfig {
    pub version: u32,
    pub model: ModelSpec,
    /// Layers running hybrid attention; the rest stay softmax.
    pub hybrid_layers: Vec<usize>,
    /// Optional parameter blobs for hybrid layers, as `[layer, path]`.
    pub layer_params: Vec<(usize, PathBuf)>,
    pub num_frames: usize,
    pub denoise_steps: usize,
    pub chunk_size: usize,
    pub policy: PolicySpec,
    pub seed: u64,
    pub precision: PrecisionName,
    pub timing: bool,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            version: version(),
            model: ModelSpec::default(),
            hybrid_layers: vec![1, 3],
            layer_params: Vec::new(),
            num_frames: 8,
            denoise_steps: 4,
            chunk_size: 16,
            policy: PolicySpec::default(),
            seed: 0,
            precision: PrecisionName::Double,
            timing: false,
        }
    }
}

common_fields!(GenerateConfig);

impl RunConfig for GenerateConfig {
    fn validate(&self) -> Result<()> {
        check_version(self.version)?;
        self.model.validate()?;
        self.model.check_layers("hybrid_layers", &self.hybrid_layers)?;
        positive(&[
            ("num_frames", self.num_frames),
            ("denoise_steps", self.denoise_steps),
            ("chunk_size", self.chunk_size),
        ])?;
        for (l, _) in &self.layer_params {
            if !self.hybrid_layers.contains(l) {
                return Err(invalid(format!("layer_params: layer {l} is not in hybrid_layers")));
            }
        }
        Ok(())
    }
    fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
    }
    fn set_precision(&mut self, p: PrecisionName) {
        self.precision = p;
    }
    fn seed(&self) -> u64 {
        self.seed
    }
    fn rebase_paths(&mut self, dir: &Path) {
        for (_, p) in &mut self.layer_params {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub version: u32,
    pub model: ModelSpec,
    /// 1: align one layer with its softmax teacher; 2: joint velocity
    /// matching of the partly hybrid model.
    pub stage: u8,
    /// Stage 1 target layer.
    pub layer: usize,
    /// Stage 2 hybrid layers.
    pub hybrid_layers: Vec<usize>,
    pub history_frames: usize,
    pub batch: usize,
    pub correlation: f64,
    pub steps: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerName,
    pub seed: u64,
    pub precision: PrecisionName,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            version: version(),
            model: ModelSpec {
                num_layers: 2,
                heads: 2,
                head_dim: 8,
                ff_dim: 32,
                tokens_per_frame: 4,
            },
            stage: 1,
            layer: 0,
            hybrid_layers: vec![1],
            history_frames: 2,
            batch: 8,
            correlation: 0.8,
            steps: 500,
            learning_rate: 0.01,
            optimizer: OptimizerName::Adam,
            seed: 0,
            precision: PrecisionName::Double,
        }
    }
}

common_fields!(DistillConfig);

impl RunConfig for DistillConfig {
    fn validate(&self) -> Result<()> {
        check_version(self.version)?;
        self.model.validate()?;
        positive(&[("batch", self.batch)])?;
        match self.stage {
            1 => self.model.check_layers("layer", &[self.layer])?,
            2 => {
                self.model.check_layers("hybrid_layers", &self.hybrid_layers)?;
                if self.hybrid_layers.is_empty() {
                    return Err(invalid("hybrid_layers: stage 2 needs at least one hybrid layer"));
                }
            }
            s => return Err(invalid(format!("stage {s}: expected 1 or 2"))),
        }
        if !(0.0..=1.0).contains(&self.correlation) {
            return Err(invalid("correlation must lie in [0, 1]"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(invalid("learning_rate must be finite and non-negative"));
        }
        if self.precision != PrecisionName::Double {
            return Err(invalid("distillation runs in double precision"));
        }
        Ok(())
    }
    fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
    }
    fn set_precision(&mut self, p: PrecisionName) {
        self.precision = p;
    }
    fn seed(&self) -> u64 {
        self.seed
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectConfig {
    pub version: u32,
    /// Score file, CSV or JSON.
    pub scores: Option<PathBuf>,
    pub threshold_hr: f64,
    pub beta: f64,
    /// Number of layers to replace; overrides `budget_fraction`.
    pub budget: Option<usize>,
    pub budget_fraction: f64,
    pub seed: u64,
}

impl Default for SelectConfig {
    fn default() -> Self {
        Self {
            version: version(),
            scores: None,
            threshold_hr: arl2_core::selection::DEFAULT_THRESHOLD_HR,
            beta: arl2_core::selection::DEFAULT_BETA,
            budget: None,
            budget_fraction: 0.5,
            seed: 0,
        }
    }
}

impl SelectConfig {
    pub fn budget_for(&self, layers: usize) -> usize {
        self.budget
            .unwrap_or_else(|| (self.budget_fraction * layers as f64).floor() as usize)
    }
}

impl RunConfig for SelectConfig {
    fn validate(&self) -> Result<()> {
        check_version(self.version)?;
        if self.scores.is_none() {
            return Err(invalid("scores: no score file given"));
        }
        if !(self.threshold_hr > 0.0 && self.threshold_hr < 1.0) {
            return Err(invalid("threshold_hr must lie in (0, 1)"));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(invalid("beta must be finite and non-negative"));
        }
        if !(0.0..=1.0).contains(&self.budget_fraction) {
            return Err(invalid("budget_fraction must lie in [0, 1]"));
        }
        Ok(())
    }
    fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
    }
    fn set_precision(&mut self, _: PrecisionName) {}
    fn seed(&self) -> u64 {
        self.seed
    }
    fn rebase_paths(&mut self, dir: &Path) {
        if let Some(p) = &mut self.scores {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostConfig {
    pub version: u32,
    pub heads: usize,
    pub head_dim: usize,
    pub tokens_per_frame: usize,
    pub max_history: usize,
    pub precision: PrecisionName,
    pub seed: u64,
}

impl Default for CostConfig {
    fn default() -> Self {
        Self {
            version: version(),
            heads: 4,
            head_dim: 16,
            tokens_per_frame: 16,
            max_history: 100,
            precision: PrecisionName::Double,
            seed: 0,
        }
    }
}

common_fields!(CostConfig);

impl RunConfig for CostConfig {
    fn validate(&self) -> Result<()> {
        check_version(self.version)?;
        positive(&[
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("tokens_per_frame", self.tokens_per_frame),
        ])
    }
    fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
    }
    fn set_precision(&mut self, p: PrecisionName) {
        self.precision = p;
    }
    fn seed(&self) -> u64 {
        self.seed
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse<C: RunConfig>(json: &str) -> Result<C> {
        let c: C = serde_json::from_str(json).map_err(|e| invalid(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    #[test]
    fn defaults_are_valid() {
        BenchConfig::default().validate().unwrap();
        GenerateConfig::default().validate().unwrap();
        DistillConfig::default().validate().unwrap();
        CostConfig::default().validate().unwrap();
        assert!(SelectConfig::default().validate().is_err());
    }

    #[test]
    fn schema_violations() {
        assert!(parse::<BenchConfig>(r#"{"frames": []}"#).is_err());
        assert!(parse::<BenchConfig>(r#"{"frame": [5]}"#).is_err());
        assert!(parse::<BenchConfig>(r#"{"version": 2}"#).is_err());
        assert!(parse::<BenchConfig>(r#"{"model": {"head_dim": 3}}"#).is_err());
        assert!(parse::<GenerateConfig>(r#"{"hybrid_layers": [9]}"#).is_err());
        assert!(parse::<DistillConfig>(r#"{"stage": 3}"#).is_err());
        assert!(parse::<BenchConfig>(r#"{"frames": [3, 6], "backends": ["hybrid"]}"#).is_ok());
    }

    #[test]
    fn flags_override_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"seed": 5, "precision": "double"}"#).unwrap();
        let c: BenchConfig = load(Some(&p), Some(9), Some(PrecisionName::Single)).unwrap();
        assert_eq!((c.seed, c.precision), (9, PrecisionName::Single));
        let c: BenchConfig = load(Some(&p), None, None).unwrap();
        assert_eq!(c.seed, 5);
    }

    #[test]
    fn budget_defaults_to_half() {
        let c = SelectConfig::default();
        assert_eq!(c.budget_for(30), 15);
        let c = SelectConfig { budget: Some(4), ..c };
        assert_eq!(c.budget_for(30), 4);
    }
}
