//! Pipeline configuration: one TOML document with a section per stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::abstraction::{ImcOptions, TransitionVariance, DEFAULT_PRUNE_THRESHOLD};
use crate::errbound::{Eps1Branch, ErrorConfig, DEFAULT_DENSE_CAP};
use crate::error::{Error, Result};
use crate::kernel::{BtKernel, SeKernel};
use crate::partition::{PartitionScheme, StateBox, MAX_PRECISION};
use crate::systems::BenchmarkSystem;
use crate::verify::{IterationOptions, DEFAULT_MAX_ITERS, DEFAULT_NU};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub domain: DomainConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub errbound: ErrboundConfig,
    #[serde(default)]
    pub abstraction: AbstractionConfig,
    pub verify: VerifyConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Built-in system to simulate; ignored when `dataset` is set.
    #[serde(default)]
    pub system: Option<String>,
    /// CSV with header `x1..xn,y1..yn`.
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    #[serde(default)]
    pub samples: usize,
    #[serde(default)]
    pub seed: u64,
    /// Measurement noise `sigma_v`; defaults to the built-in system's.
    #[serde(default)]
    pub noise_std: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub precision: usize,
    /// BT level weights; uniform when absent.
    #[serde(default)]
    pub weights: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrboundConfig {
    pub delta: f64,
    /// RKHS norm bound per output dimension.
    pub bounds: Vec<f64>,
    /// SE amplitude `c_d` per output dimension.
    pub amplitudes: Vec<f64>,
    /// SE lengthscales per output dimension, one entry per input dimension.
    pub lengthscales: Vec<Vec<f64>>,
    #[serde(default = "default_branch")]
    pub branch: Eps1Branch,
    #[serde(default)]
    pub scale_noise: bool,
    #[serde(default = "default_dense_cap")]
    pub dense_cap: usize,
    #[serde(default)]
    pub subsample: bool,
}

fn default_branch() -> Eps1Branch {
    Eps1Branch::Min
}

fn default_dense_cap() -> usize {
    DEFAULT_DENSE_CAP
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AbstractionConfig {
    #[serde(default = "default_prune")]
    pub prune_threshold: f64,
    #[serde(default)]
    pub variance: TransitionVariance,
}

fn default_prune() -> f64 {
    DEFAULT_PRUNE_THRESHOLD
}

impl Default for AbstractionConfig {
    fn default() -> Self {
        AbstractionConfig {
            prune_threshold: DEFAULT_PRUNE_THRESHOLD,
            variance: TransitionVariance::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyConfig {
    pub target_lower: Vec<f64>,
    pub target_upper: Vec<f64>,
    pub x_init: Vec<f64>,
    #[serde(default = "default_nu")]
    pub nu: f64,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
}

fn default_nu() -> f64 {
    DEFAULT_NU
}

fn default_max_iters() -> usize {
    DEFAULT_MAX_ITERS
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_dir")]
    pub dir: PathBuf,
    /// Also write the IMC triplet files (large at high precision).
    #[serde(default = "default_true")]
    pub write_imc: bool,
}

fn default_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_true() -> bool {
    true
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: default_dir(),
            write_imc: true,
        }
    }
}

/// Sets `key` (dotted path such as `model.precision`) in a TOML table.
/// The value is read as a TOML value, or as a string if that fails.
fn apply_override(table: &mut toml::Table, key: &str, value: &str) -> Result<()> {
    let parsed: toml::Value = match format!("v = {value}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key just written"),
        Err(_) => toml::Value::String(value.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::invalid(format!("bad config key `{key}`")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::invalid(format!("config key `{key}`: `{p}` is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}

impl PipelineConfig {
    /// Parses a config document, applies `key=value` overrides and
    /// validates the result.
    pub fn parse(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::parse(e.to_string()))?;
        for (k, v) in overrides {
            apply_override(&mut table, k, v)?;
        }
        let cfg: PipelineConfig = table.try_into().map_err(|e: toml::de::Error| Error::parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file. A relative dataset path is resolved against the
    /// file's directory.
    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::parse(&text, overrides)?;
        if let (Some(ds), Some(dir)) = (&cfg.data.dataset, path.parent()) {
            if ds.is_relative() {
                cfg.data.dataset = Some(dir.join(ds));
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::parse(e.to_string()))
    }

    pub fn dim(&self) -> usize {
        self.domain.lower.len()
    }

    pub fn validate(&self) -> Result<()> {
        let domain = self.domain_box()?;
        let n = domain.dim();
        let q = self.model.precision;
        if q == 0 || q > MAX_PRECISION.min(31) {
            return Err(Error::invalid(format!("precision must lie in 1..=31, got {q}")));
        }
        if let Some(w) = &self.model.weights {
            if w.len() != q || w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
                return Err(Error::invalid(format!("weights need {q} nonnegative entries with a positive sum")));
            }
        }
        match (&self.data.dataset, &self.data.system) {
            (None, None) => return Err(Error::invalid("set either data.system or data.dataset")),
            (Some(_), _) if self.data.noise_std.is_none() => {
                return Err(Error::invalid("data.noise_std is required with a dataset file"));
            }
            (None, Some(name)) => {
                let s = BenchmarkSystem::<f64>::builtin(name)?;
                if s.dim != n {
                    return Err(Error::invalid(format!("system `{name}` is {}-D, domain is {n}-D", s.dim)));
                }
                if self.data.samples == 0 {
                    return Err(Error::invalid("data.samples must be positive"));
                }
            }
            _ => {}
        }
        if let Some(s) = self.data.noise_std {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::invalid("data.noise_std must be positive"));
            }
        }
        self.error_config()?.validate()?;
        if self.errbound.bounds.len() != n {
            return Err(Error::invalid(format!("errbound.bounds needs {n} entries")));
        }
        let target = self.target_box()?;
        if !domain.contains_box(&target) {
            return Err(Error::invalid("target box must lie inside the domain"));
        }
        if self.verify.x_init.len() != n || !domain.contains(&self.verify.x_init) {
            return Err(Error::invalid("x_init must be a point of the domain"));
        }
        if !(self.verify.nu > 0.0 && self.verify.nu.is_finite()) || self.verify.max_iters == 0 {
            return Err(Error::invalid("verify.nu and verify.max_iters must be positive"));
        }
        if !(self.abstraction.prune_threshold >= 0.0 && self.abstraction.prune_threshold < 1.0) {
            return Err(Error::invalid("abstraction.prune_threshold must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn domain_box(&self) -> Result<StateBox<f64>> {
        StateBox::new(self.domain.lower.clone(), self.domain.upper.clone())
    }

    pub fn target_box(&self) -> Result<StateBox<f64>> {
        StateBox::new(self.verify.target_lower.clone(), self.verify.target_upper.clone())
    }

    pub fn scheme(&self) -> Result<PartitionScheme<f64>> {
        PartitionScheme::cyclic(self.domain_box()?, self.model.precision)
    }

    pub fn kernel(&self) -> Result<BtKernel<f64>> {
        let scheme = self.scheme()?;
        match &self.model.weights {
            Some(w) => BtKernel::new(scheme, w.clone()),
            None => BtKernel::uniform(scheme),
        }
    }

    pub fn error_config(&self) -> Result<ErrorConfig<f64>> {
        let e = &self.errbound;
        if e.amplitudes.len() != e.lengthscales.len() {
            return Err(Error::invalid("errbound.amplitudes and errbound.lengthscales differ in length"));
        }
        let kernels = e
            .amplitudes
            .iter()
            .zip(&e.lengthscales)
            .map(|(&c, l)| {
                if l.len() != self.dim() {
                    return Err(Error::invalid(format!("each lengthscale vector needs {} entries", self.dim())));
                }
                SeKernel::new(c, l.clone())
            })
            .collect::<Result<Vec<_>>>()?;
        let mut cfg = ErrorConfig::new(e.delta, e.bounds.clone(), kernels)?;
        cfg.branch = e.branch;
        cfg.scale_noise = e.scale_noise;
        cfg.dense_cap = e.dense_cap;
        cfg.subsample = e.subsample;
        cfg.seed = self.data.seed;
        Ok(cfg)
    }

    pub fn imc_options(&self) -> ImcOptions<f64> {
        ImcOptions {
            prune_threshold: self.abstraction.prune_threshold,
            variance: self.abstraction.variance,
        }
    }

    pub fn iteration_options(&self) -> IterationOptions<f64> {
        IterationOptions {
            nu: self.verify.nu,
            max_iters: self.verify.max_iters,
        }
    }

    /// Built-in system with the configured noise level.
    pub fn system(&self) -> Result<Option<BenchmarkSystem<f64>>> {
        let Some(name) = &self.data.system else { return Ok(None) };
        let s = BenchmarkSystem::builtin(name)?;
        Ok(Some(match self.data.noise_std {
            Some(v) => s.with_noise(v),
            None => s,
        }))
    }
}
