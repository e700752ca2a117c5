//! Run configuration: one TOML file covering data, networks, every stage
//! and the analyses. Missing keys take defaults; unknown keys are errors.

use std::path::Path;

use dptq_core::budget::{feasible_budget_range, validate_options, FeasibleSampler};
use dptq_core::data::DatasetSpec;
use dptq_core::nn::MlpSpec;
use dptq_core::train::{KDConfig, PairMode, PairTrainConfig, TeacherConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{LabError, LabResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub student_hidden: Vec<usize>,
    pub teacher_hidden: Vec<usize>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            student_hidden: vec![64; 8],
            teacher_hidden: vec![96; 8],
        }
    }
}

/// Where sweep widths come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepSource {
    Policy,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Cap on test examples used for histograms (`0` = whole split).
    pub histogram_sample: usize,
    pub sweep_source: SweepSource,
    pub transforms: Vec<String>,
    pub degrees: Vec<f64>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            histogram_sample: 0,
            sweep_source: SweepSource::Policy,
            transforms: ["gaussian_noise", "feature_erasing", "scale_jitter", "contrast_jitter", "normalization_shift"]
                .map(String::from)
                .to_vec(),
            degrees: vec![0.0, 0.25, 0.5, 0.75, 1.0, 1.5, 2.0],
        }
    }
}

/// One cell family of the reproduction grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridVersion {
    pub name: String,
    pub options: Vec<u32>,
    /// Budgets A, B, C.
    pub budgets: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub versions: Vec<GridVersion>,
}

impl Default for GridConfig {
    fn default() -> Self {
        let v = |name: &str, lo: u32, shift: u32| GridVersion {
            name: name.into(),
            options: (lo..=10).collect(),
            budgets: [32, 44, 56].iter().map(|b| b + shift).collect(),
        };
        Self {
            versions: vec![v("I", 3, 0), v("II", 4, 8), v("III", 5, 8)],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every stage derives its own streams from it.
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub network: NetworkConfig,
    pub teacher: TeacherConfig,
    pub kd: KDConfig,
    pub pair: PairTrainConfig,
    pub analysis: AnalysisConfig,
    pub grid: GridConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset: DatasetSpec::default(),
            network: NetworkConfig::default(),
            teacher: TeacherConfig::default(),
            kd: KDConfig::default(),
            pair: PairTrainConfig::default(),
            analysis: AnalysisConfig::default(),
            grid: GridConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> LabResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> LabResult<Self> {
        toml::from_str(text).map_err(|e| LabError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> LabResult<String> {
        toml::to_string(self).map_err(|e| LabError::Config(e.to_string()))
    }

    /// Hex sha256 of the effective TOML.
    pub fn hash(&self) -> LabResult<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }

    /// Applies the master seed to every stage.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.sync_seeds();
        self
    }

    fn sync_seeds(&mut self) {
        self.teacher.seed = self.seed;
        self.kd.seed = self.seed;
        self.pair.seed = self.seed;
    }

    /// Checks everything that can be checked before a stage runs. A budget
    /// outside the feasible range is reported as infeasible, everything
    /// else as a configuration error.
    pub fn validate(&mut self) -> LabResult<()> {
        if self.seed > i64::MAX as u64 {
            return Err(LabError::Config("seed must fit in a signed 64-bit integer".into()));
        }
        self.sync_seeds();
        self.dataset.validate()?;
        self.student_spec()?;
        self.teacher_spec()?;
        self.teacher.validate()?;
        self.kd.validate()?;
        self.pair.validate()?;
        if self.analysis.degrees.first() != Some(&0.0) || self.analysis.degrees.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(LabError::Config("analysis.degrees must start at 0 and increase".into()));
        }
        for t in &self.analysis.transforms {
            dptq_core::analysis::Transform::parse(t)?;
        }
        let l = self.network.student_hidden.len();
        check_budget(l, &self.pair.options, self.pair.budget)?;
        for v in &self.grid.versions {
            validate_options(&v.options).map_err(|e| LabError::Config(format!("grid {}: {e}", v.name)))?;
            for &c in &v.budgets {
                check_budget(l, &v.options, c)?;
            }
        }
        Ok(())
    }

    pub fn student_spec(&self) -> LabResult<MlpSpec> {
        if self.network.student_hidden.is_empty() {
            return Err(LabError::Config("the student needs at least one hidden layer".into()));
        }
        Ok(MlpSpec::new(
            self.dataset.input_dim,
            self.network.student_hidden.clone(),
            self.dataset.num_classes,
        )?)
    }

    pub fn teacher_spec(&self) -> LabResult<MlpSpec> {
        Ok(MlpSpec::new(
            self.dataset.input_dim,
            self.network.teacher_hidden.clone(),
            self.dataset.num_classes,
        )?)
    }

    pub fn pair_config(&self, mode: PairMode) -> PairTrainConfig {
        PairTrainConfig {
            mode,
            ..self.pair.clone()
        }
    }
}

fn check_budget(layers: usize, options: &[u32], capacity: u32) -> LabResult<()> {
    validate_options(options).map_err(|e| LabError::Config(e.to_string()))?;
    let (lo, hi) = feasible_budget_range(layers, options);
    if capacity < lo || capacity > hi {
        return Err(dptq_core::Error::BudgetInfeasible {
            capacity,
            layers,
            min: lo,
            max: hi,
        }
        .into());
    }
    FeasibleSampler::new(layers, options, capacity)?;
    Ok(())
}
