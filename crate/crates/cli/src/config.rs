//! Pipeline configuration file (TOML).
//!
//! Every section rejects unknown keys, and each section can be validated on
//! its own. Omitted keys take the defaults of the double-integrator study.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use barrier_synth::fitter::SearchConfig;
use barrier_synth::{
    BoxSet, ExtraFeasible, FilterConfig, FitConfig, FitMode, ObjectiveKind, Plant, SamplingConfig, SimConfig,
    SystemRegistry,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub system: SystemSection,
    pub sampling: SamplingSection,
    #[serde(default)]
    pub boundary: BoundarySection,
    #[serde(default)]
    pub fit: FitSection,
    #[serde(default)]
    pub simulate: SimulateSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    pub name: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtraRule {
    DriftPositive,
    Always,
    Never,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingSection {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    #[serde(default = "d::n_min")]
    pub n_min: usize,
    #[serde(default = "d::delta")]
    pub delta: f64,
    #[serde(default = "d::growth")]
    pub growth: f64,
    #[serde(default = "d::n_first")]
    pub n_first: usize,
    #[serde(default = "d::n_max")]
    pub n_max: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d::zero_tol")]
    pub zero_tol: f64,
    #[serde(default = "d::extra")]
    pub extra_feasible: ExtraRule,
}

/// `"auto"` or a positive number (normalized units).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Epsilon {
    Fixed(f64),
    Named(EpsilonName),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EpsilonName {
    Auto,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundarySection {
    #[serde(default = "d::epsilon")]
    pub epsilon: Epsilon,
    #[serde(default)]
    pub box_face_is_boundary: bool,
}

impl Default for BoundarySection {
    fn default() -> Self {
        Self {
            epsilon: d::epsilon(),
            box_face_is_boundary: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveName {
    SampleCount,
    IntegralSurrogate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSection {
    #[serde(default)]
    pub margin: f64,
    #[serde(default = "d::objective")]
    pub objective: ObjectiveName,
    #[serde(default = "d::multi_count")]
    pub multi_count: usize,
    #[serde(default = "d::probes")]
    pub probes: usize,
    #[serde(default = "d::containment_tol")]
    pub containment_tol: f64,
    /// Optional `[lower, upper]` region for the area objective.
    #[serde(default)]
    pub volume_lower: Option<Vec<f64>>,
    #[serde(default)]
    pub volume_upper: Option<Vec<f64>>,
    #[serde(default)]
    pub search: SearchConfig,
}

impl Default for FitSection {
    fn default() -> Self {
        toml::from_str("").expect("fit defaults")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    #[serde(default = "d::starts")]
    pub starts: Vec<Vec<f64>>,
    #[serde(default = "d::goal")]
    pub goal: Vec<f64>,
    #[serde(default = "d::horizon")]
    pub horizon: f64,
    #[serde(default = "d::dt")]
    pub dt: f64,
    #[serde(default = "d::kp")]
    pub kp: f64,
    #[serde(default = "d::alphas")]
    pub alphas: Vec<f64>,
    #[serde(default)]
    pub relaxation: Option<f64>,
    #[serde(default = "d::yes")]
    pub sampled_data: bool,
    #[serde(default)]
    pub stop_on_infeasible: bool,
    #[serde(default = "d::yes")]
    pub require_safe_start: bool,
    /// Also run the unfiltered controller from the first start.
    #[serde(default = "d::yes")]
    pub unfiltered_demo: bool,
    /// Side of the start grid for the `u ≡ u_max` sweep; 0 disables it.
    #[serde(default = "d::sweep_grid")]
    pub sweep_grid: usize,
}

impl Default for SimulateSection {
    fn default() -> Self {
        toml::from_str("").expect("simulate defaults")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "d::out_dir")]
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: d::out_dir() }
    }
}

mod d {
    use super::*;
    pub fn n_min() -> usize {
        1000
    }
    pub fn delta() -> f64 {
        1e-3
    }
    pub fn growth() -> f64 {
        3.0
    }
    pub fn n_first() -> usize {
        243
    }
    pub fn n_max() -> usize {
        1_594_323
    }
    pub fn zero_tol() -> f64 {
        1e-9
    }
    pub fn extra() -> ExtraRule {
        ExtraRule::DriftPositive
    }
    pub fn epsilon() -> Epsilon {
        Epsilon::Named(EpsilonName::Auto)
    }
    pub fn objective() -> ObjectiveName {
        ObjectiveName::SampleCount
    }
    pub fn multi_count() -> usize {
        2
    }
    pub fn probes() -> usize {
        256
    }
    pub fn containment_tol() -> f64 {
        1e-3
    }
    pub fn starts() -> Vec<Vec<f64>> {
        vec![vec![-9.0, 15.0], vec![-9.0, 0.0], vec![-7.0, -5.0], vec![-4.0, 20.0]]
    }
    pub fn goal() -> Vec<f64> {
        vec![0.0, 0.0]
    }
    pub fn horizon() -> f64 {
        10.0
    }
    pub fn dt() -> f64 {
        0.01
    }
    pub fn kp() -> f64 {
        10.0
    }
    pub fn alphas() -> Vec<f64> {
        vec![5.0]
    }
    pub fn yes() -> bool {
        true
    }
    pub fn sweep_grid() -> usize {
        20
    }
    pub fn out_dir() -> PathBuf {
        PathBuf::from("out")
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Invalid(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    /// Parse errors carry the line and column of the offending entry.
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(ConfigError::Parse)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let plant = self.plant()?;
        self.sampling_config()?
            .validate()
            .map_err(ConfigError::wrap("sampling"))?;
        if self.sampling.lower.len() != plant.model.state_dim() {
            return Err(ConfigError::Invalid(format!(
                "sampling: box has {} axes but the system has {} states",
                self.sampling.lower.len(),
                plant.model.state_dim()
            ))
            .into());
        }
        if let Epsilon::Fixed(e) = self.boundary.epsilon {
            if !(e > 0.0) || !e.is_finite() {
                return Err(ConfigError::Invalid(format!("boundary: epsilon must be > 0 (got {e})")).into());
            }
        }
        for mode in self.fit_modes() {
            self.fit_config(mode)?.validate().map_err(ConfigError::wrap("fit"))?;
        }
        let n = plant.model.state_dim();
        for (i, x) in self.simulate.starts.iter().enumerate() {
            self.sim_config(x).validate().map_err(ConfigError::wrap("simulate"))?;
            if x.len() != n {
                return Err(ConfigError::Invalid(format!(
                    "simulate: start {i} has {} components, expected {n}",
                    x.len()
                ))
                .into());
            }
        }
        let fc = self.filter_config(&plant);
        fc.validate(if fc.alphas.len() == 1 { 1 } else { self.fit.multi_count })
            .map_err(ConfigError::wrap("simulate"))?;
        Ok(())
    }

    pub fn plant(&self) -> anyhow::Result<Plant> {
        SystemRegistry::with_builtins()
            .build(&self.system.name, &self.system.params)
            .map_err(|e| ConfigError::Invalid(format!("system: {e}")).into())
    }

    pub fn sampling_config(&self) -> anyhow::Result<SamplingConfig> {
        let s = &self.sampling;
        let bounds = BoxSet::new(s.lower.clone(), s.upper.clone()).map_err(ConfigError::wrap("sampling"))?;
        let mut cfg = SamplingConfig::new(bounds);
        cfg.n_min = s.n_min;
        cfg.delta = s.delta;
        cfg.growth = s.growth;
        cfg.n_first = s.n_first;
        cfg.n_max = s.n_max;
        cfg.seed = s.seed;
        cfg.zero_tol = s.zero_tol;
        Ok(cfg)
    }

    pub fn extra_feasible(&self) -> ExtraFeasible {
        match self.sampling.extra_feasible {
            ExtraRule::DriftPositive => ExtraFeasible::DriftPositive,
            ExtraRule::Always => ExtraFeasible::Always,
            ExtraRule::Never => ExtraFeasible::Never,
        }
    }

    pub fn fit_modes(&self) -> [FitMode; 3] {
        [
            FitMode::Uniform,
            FitMode::NonUniform,
            FitMode::Multi(self.fit.multi_count),
        ]
    }

    pub fn fit_config(&self, mode: FitMode) -> anyhow::Result<FitConfig> {
        let f = &self.fit;
        let mut cfg = FitConfig::new(mode);
        cfg.margin = f.margin;
        cfg.objective = match f.objective {
            ObjectiveName::SampleCount => ObjectiveKind::SampleCount,
            ObjectiveName::IntegralSurrogate => ObjectiveKind::IntegralSurrogate,
        };
        cfg.probes = f.probes;
        cfg.containment_tol = f.containment_tol;
        cfg.search = f.search.clone();
        cfg.volume_region = match (&f.volume_lower, &f.volume_upper) {
            (None, None) => None,
            (Some(lo), Some(hi)) => Some(BoxSet::new(lo.clone(), hi.clone()).map_err(ConfigError::wrap("fit"))?),
            _ => bail!(ConfigError::Invalid(
                "fit: volume_lower and volume_upper go together".into()
            )),
        };
        Ok(cfg)
    }

    pub fn sim_config(&self, x_init: &[f64]) -> SimConfig {
        let s = &self.simulate;
        let mut cfg = SimConfig::new(x_init.to_vec(), s.goal.clone());
        cfg.horizon = s.horizon;
        cfg.dt = s.dt;
        cfg.kp = s.kp;
        cfg.require_safe_start = s.require_safe_start;
        cfg
    }

    pub fn filter_config(&self, plant: &Plant) -> FilterConfig {
        let s = &self.simulate;
        let mut fc = FilterConfig::new(plant.input_box.clone());
        fc.alphas = s.alphas.clone();
        fc.relaxation = s.relaxation;
        fc.sampled_data = s.sampled_data;
        fc.stop_on_infeasible = s.stop_on_infeasible;
        fc
    }

    /// Stable digest of one section, used as a cache key.
    pub fn section_digest<T: Serialize>(section: &T) -> String {
        let bytes = serde_json::to_vec(section).expect("config sections serialize");
        hex::encode(Sha256::digest(&bytes))
    }
}

/// Configuration problems; all map to the usage exit code.
#[derive(Debug)]
pub enum ConfigError {
    Parse(toml::de::Error),
    Invalid(String),
}

impl ConfigError {
    fn wrap<E: std::fmt::Display>(section: &'static str) -> impl Fn(E) -> ConfigError {
        move |e| ConfigError::Invalid(format!("{section}: {e}"))
    }
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ConfigError::Parse(e) => write!(f, "config parse error: {e}"),
            ConfigError::Invalid(m) => write!(f, "invalid config: {m}"),
        }
    }
}

impl std::error::Error for ConfigError {}
