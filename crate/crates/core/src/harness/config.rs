use std::path::Path;

use serde::{Deserialize, Serialize};

use super::synthetic::Corruption;
use super::HarnessError;
use crate::direct::GridSearchConfig;
use crate::estimate::Method;
use crate::features::{DetectorConfig, DEFAULT_RATIO};
use crate::fusion::FusionStrategy;
use crate::pipelines::PipelineConfig;
use crate::pnp::RansacConfig;
use crate::retrieval::DEFAULT_VOCABULARY_SIZE;
use crate::scene::DEFAULT_LIFT_GATE;

/// Upper bound on the reference count.
pub const MAX_REFERENCES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabularyConfig {
    pub size: usize,
    /// Descriptors subsampled for clustering.
    pub sample: usize,
    pub iterations: usize,
}

impl Default for VocabularyConfig {
    fn default() -> Self {
        Self { size: DEFAULT_VOCABULARY_SIZE, sample: 5000, iterations: 20 }
    }
}

/// Everything needed to reproduce an experiment. Serialized as TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub methods: Vec<Method>,
    /// Uncertainty radius around the query position, meters.
    pub radius: f64,
    /// Number of references per query.
    pub refs: usize,
    pub fusion: FusionStrategy,
    /// Translation error above which a reported success counts as a failure, meters.
    pub threshold: f64,
    pub query_fraction: f64,
    pub seed: u64,
    /// Select references by retrieval instead of uniform sampling.
    pub large_uncertainty: bool,
    /// Appearance change applied to query images.
    pub corruption: Option<Corruption>,
    /// Fill the timing column; off by default so seeded reports are reproducible byte for byte.
    pub record_timing: bool,
    pub ratio: f64,
    pub lift_gate: f64,
    pub detector: DetectorConfig,
    pub ransac: RansacConfig,
    pub grid: GridSearchConfig,
    pub vocabulary: VocabularyConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            methods: Method::ALL.to_vec(),
            radius: 10.0,
            refs: 1,
            fusion: FusionStrategy::Rwavg,
            threshold: 10.0,
            query_fraction: 0.1,
            seed: 0,
            large_uncertainty: false,
            corruption: None,
            record_timing: false,
            ratio: DEFAULT_RATIO,
            lift_gate: DEFAULT_LIFT_GATE,
            detector: DetectorConfig::default(),
            ransac: RansacConfig::default(),
            grid: GridSearchConfig::default(),
            vocabulary: VocabularyConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        if !path.exists() {
            return Err(HarnessError::MissingFile(path.to_path_buf()));
        }
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let fail = |m: &str| Err(HarnessError::Config(m.to_string()));
        if self.methods.is_empty() {
            return fail("at least one method is required");
        }
        if !(self.radius > 0.0) {
            return fail("radius must be positive");
        }
        if !(1..=MAX_REFERENCES).contains(&self.refs) {
            return fail("refs must be between 1 and 5");
        }
        if !(self.query_fraction > 0.0 && self.query_fraction < 1.0) {
            return fail("query_fraction must lie strictly between 0 and 1");
        }
        if !(self.threshold > 0.0) {
            return fail("threshold must be positive");
        }
        if !(self.ransac.inlier_threshold > 0.0 && self.ransac.confidence > 0.0 && self.ransac.confidence < 1.0) {
            return fail("ransac needs a positive threshold and confidence in (0, 1)");
        }
        self.grid.validate().map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            detector: self.detector,
            ratio: self.ratio,
            lift_gate: self.lift_gate,
            ransac: self.ransac,
            grid: self.grid,
        }
    }
}
