//! Experiment configuration: JSON file plus command-line overrides.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::dynamics::{Schedule, StepPolicy};
use crate::network::{build_topology, lazy_mix, metropolis_weights, MixingSystem, Topology};
use crate::noise::NoiseStream;
use crate::potential::{
    logistic_ensemble, read_logistic_csv, PotentialEnsemble, QuadraticComponentSpec, QuadraticSpec,
};

/// Upper limit on checkpoints per decade.
pub const MAX_CHECKPOINTS_PER_DECADE: u32 = 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PotentialConfig {
    /// Inline quadratic components.
    Quadratic { components: Vec<QuadraticComponentSpec> },
    /// Quadratic components read from a JSON file.
    QuadraticFile { path: PathBuf },
    /// Logistic regression on a CSV data set, split into contiguous shards.
    Logistic { path: PathBuf, ridge: f64 },
    /// Zero potential on every agent.
    Flat { dim: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitConfig {
    Zeros,
    /// Every agent starts at `point`.
    Point {
        point: Vec<f64>,
    },
    /// Explicit `m x d` matrix, one row per agent.
    Matrix {
        rows: Vec<Vec<f64>>,
    },
    /// Independent `N(center, scale^2 I)` entries, redrawn per replica.
    Gaussian {
        #[serde(default)]
        center: Option<Vec<f64>>,
        scale: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FineSdeConfig {
    pub dt: f64,
    pub eps: f64,
    /// Defaults to the consensus time bound when it exists.
    #[serde(default)]
    pub horizon: Option<f64>,
    #[serde(default = "default_record_every")]
    pub record_every: u64,
}

fn default_record_every() -> u64 {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub topology: Topology,
    /// Agent count; inferred from the potential when absent.
    #[serde(default)]
    pub agents: Option<usize>,
    /// Laziness `theta` in `theta W + (1 - theta) I`.
    #[serde(default = "default_lazy")]
    pub lazy: f64,
    pub potential: PotentialConfig,
    pub schedule: Schedule,
    pub steps: u64,
    #[serde(default = "default_per_decade")]
    pub checkpoints_per_decade: u32,
    pub replicas: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    /// Fraction of checkpoints dropped before rate fits.
    #[serde(default = "default_burn_in")]
    pub burn_in: f64,
    /// Explicit `[k_min, k_max]` fit window; overrides `burn_in`.
    #[serde(default)]
    pub fit_window: Option<(u64, u64)>,
    /// Constant-step plateau starts at `plateau_start * steps`.
    #[serde(default = "default_plateau_start")]
    pub plateau_start: f64,
    #[serde(default = "default_init")]
    pub init: InitConfig,
    #[serde(default)]
    pub fine_sde: Option<FineSdeConfig>,
    /// Write per-replica rows alongside the aggregated series.
    #[serde(default = "default_true")]
    pub write_trajectory: bool,
}

fn default_lazy() -> f64 {
    1.0
}
fn default_per_decade() -> u32 {
    20
}
fn default_out() -> PathBuf {
    PathBuf::from("runs/latest")
}
fn default_burn_in() -> f64 {
    0.2
}
fn default_plateau_start() -> f64 {
    0.5
}
fn default_init() -> InitConfig {
    InitConfig::Zeros
}
fn default_true() -> bool {
    true
}

/// Command-line values that replace file values when present.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub replicas: Option<usize>,
    pub steps: Option<u64>,
    pub out: Option<PathBuf>,
    pub h: Option<StepPolicy>,
    pub sigma: Option<f64>,
}

/// Parses `--h`: `0.01`, `const:0.01` or `inverse_k:OFFSET`.
pub fn parse_step_policy(s: &str) -> Result<StepPolicy, HarnessError> {
    let bad = || HarnessError::Config(format!("cannot parse step policy {s:?}; use const:H or inverse_k:OFFSET"));
    let (kind, value) = s.split_once(':').unwrap_or(("const", s));
    match kind {
        "const" | "constant" => value.parse().map(StepPolicy::Constant).map_err(|_| bad()),
        "inverse_k" | "1/k" => value.parse().map(|offset| StepPolicy::InverseK { offset }).map_err(|_| bad()),
        _ => Err(bad()),
    }
}

/// Everything a run needs, built and validated from a config.
pub struct Instance {
    pub config: ExperimentConfig,
    pub system: MixingSystem,
    pub ensemble: PotentialEnsemble,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        serde_json::from_str(text).map_err(|e| HarnessError::Config(format!("config: {e}")))
    }

    pub fn read(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = o.replicas {
            self.replicas = v;
        }
        if let Some(v) = o.steps {
            self.steps = v;
            // a shortened run keeps whatever part of the fit window survives
            self.fit_window = self.fit_window.and_then(|(lo, hi)| (lo < v).then_some((lo, hi.min(v))));
        }
        if let Some(v) = &o.out {
            self.out = v.clone();
        }
        if let Some(v) = o.h {
            self.schedule.step = v;
        }
        if let Some(v) = o.sigma {
            self.schedule.sigma = v;
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let fail = |msg: String| Err(HarnessError::Config(msg));
        if self.replicas < 1 {
            return fail("replicas must be >= 1".into());
        }
        if !(0.0..=0.9).contains(&self.burn_in) {
            return fail(format!("burn_in must lie in [0, 0.9], got {}", self.burn_in));
        }
        if !(0.0..1.0).contains(&self.plateau_start) {
            return fail(format!("plateau_start must lie in [0, 1), got {}", self.plateau_start));
        }
        if self.checkpoints_per_decade == 0 || self.checkpoints_per_decade > MAX_CHECKPOINTS_PER_DECADE {
            return fail(format!(
                "checkpoints_per_decade must lie in [1, {MAX_CHECKPOINTS_PER_DECADE}], got {}",
                self.checkpoints_per_decade
            ));
        }
        if let Some((lo, hi)) = self.fit_window {
            if !(lo >= 1 && lo < hi && hi <= self.steps) {
                return fail(format!("fit_window ({lo}, {hi}) must satisfy 1 <= k_min < k_max <= steps"));
            }
        }
        self.schedule.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(())
    }

    /// Builds the network and potential.
    pub fn instantiate(&self) -> Result<Instance, HarnessError> {
        self.validate()?;
        let cfg = |e: String| HarnessError::Config(e);
        let inferred = match &self.potential {
            PotentialConfig::Quadratic { components } => Some(components.len()),
            _ => None,
        };
        let ensemble = match &self.potential {
            PotentialConfig::Quadratic { components } => {
                QuadraticSpec { components: components.clone() }.build().map_err(|e| cfg(e.to_string()))?
            }
            PotentialConfig::QuadraticFile { path } => {
                QuadraticSpec::read(path).and_then(|s| s.build()).map_err(|e| cfg(e.to_string()))?
            }
            PotentialConfig::Logistic { path, ridge } => {
                let m = self.agents.ok_or_else(|| cfg("logistic potential needs an explicit agent count".into()))?;
                let shards = read_logistic_csv(path, m).map_err(|e| cfg(e.to_string()))?;
                logistic_ensemble(shards, *ridge).map_err(|e| cfg(e.to_string()))?
            }
            PotentialConfig::Flat { dim } => {
                let m = self.agents.ok_or_else(|| cfg("flat potential needs an explicit agent count".into()))?;
                if m == 0 || *dim == 0 {
                    return Err(cfg("flat potential needs agents >= 1 and dim >= 1".into()));
                }
                PotentialEnsemble::flat(m, *dim)
            }
        };
        let m = ensemble.agent_count();
        if let Some(a) = self.agents.or(inferred) {
            if a != m {
                return Err(cfg(format!("config names {a} agents but the potential has {m} components")));
            }
        }
        let system = if m == 1 {
            MixingSystem::single_agent()
        } else {
            let graph = build_topology(self.topology, m).map_err(|e| cfg(e.to_string()))?;
            let sys = metropolis_weights(&graph).map_err(|e| cfg(e.to_string()))?;
            lazy_mix(&sys, self.lazy).map_err(|e| cfg(e.to_string()))?
        };
        Ok(Instance { config: self.clone(), system, ensemble })
    }
}

impl Instance {
    /// Initial stacked state for replica `r`.
    pub fn initial_state(&self, r: usize) -> Result<DMatrix<f64>, HarnessError> {
        let (m, d) = (self.ensemble.agent_count(), self.ensemble.dim());
        let check_len = |v: &[f64]| {
            if v.len() == d {
                Ok(())
            } else {
                Err(HarnessError::Config(format!("init point has length {}, expected {d}", v.len())))
            }
        };
        match &self.config.init {
            InitConfig::Zeros => Ok(DMatrix::zeros(m, d)),
            InitConfig::Point { point } => {
                check_len(point)?;
                Ok(DMatrix::from_fn(m, d, |_, j| point[j]))
            }
            InitConfig::Matrix { rows } => {
                if rows.len() != m {
                    return Err(HarnessError::Config(format!("init matrix has {} rows, expected {m}", rows.len())));
                }
                for row in rows {
                    check_len(row)?;
                }
                Ok(DMatrix::from_fn(m, d, |i, j| rows[i][j]))
            }
            InitConfig::Gaussian { center, scale } => {
                let c = center.clone().unwrap_or_else(|| vec![0.0; d]);
                check_len(&c)?;
                let mut z = vec![0.0; m * d];
                NoiseStream::auxiliary(self.config.seed, r as u64).fill_normals(0, &mut z);
                Ok(DMatrix::from_fn(m, d, |i, j| c[j] + scale * z[i * d + j]))
            }
        }
    }

    /// Log-spaced checkpoint grid over `[1, steps]`, always containing `steps`.
    pub fn checkpoints(&self) -> Vec<u64> {
        log_checkpoints(self.config.steps, self.config.checkpoints_per_decade)
    }
}

pub fn log_checkpoints(steps: u64, per_decade: u32) -> Vec<u64> {
    if steps == 0 {
        return Vec::new();
    }
    let decades = (steps as f64).log10();
    let count = (decades * per_decade as f64).ceil() as u64;
    let mut out: Vec<u64> = (0..=count)
        .map(|j| 10f64.powf(j as f64 / per_decade as f64).round() as u64)
        .filter(|&k| k >= 1 && k <= steps)
        .collect();
    out.push(steps);
    out.dedup();
    out
}

/// Gaussian mean/covariance fitted to rows of `x`.
pub fn sample_moments(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows() as f64;
    let mean = x.row_mean().transpose();
    let centered = DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] - mean[j]);
    let cov = (centered.transpose() * &centered).scale(1.0 / (n - 1.0).max(1.0));
    (mean, cov)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_grid() {
        let g = log_checkpoints(1000, 10);
        assert_eq!(g[0], 1);
        assert_eq!(*g.last().unwrap(), 1000);
        assert!(g.windows(2).all(|w| w[0] < w[1]));
        assert!(g.contains(&100) && g.contains(&10));
        assert_eq!(log_checkpoints(1, 10), vec![1]);
        assert!(log_checkpoints(0, 10).is_empty());
    }

    #[test]
    fn step_policy_parsing() {
        assert_eq!(parse_step_policy("0.01").unwrap(), StepPolicy::Constant(0.01));
        assert_eq!(parse_step_policy("const:0.5").unwrap(), StepPolicy::Constant(0.5));
        assert_eq!(parse_step_policy("inverse_k:3").unwrap(), StepPolicy::InverseK { offset: 3 });
        assert!(parse_step_policy("bogus:1").is_err());
    }

    #[test]
    fn config_roundtrip_and_validation() {
        let json = r#"{
            "topology": {"kind": "ring"},
            "potential": {"kind": "flat", "dim": 2},
            "agents": 4,
            "schedule": {"step": {"constant": 0.1}, "anneal": "harmonic", "sigma": 0.5},
            "steps": 100,
            "replicas": 3
        }"#;
        let mut c = ExperimentConfig::from_json(json).unwrap();
        let inst = c.instantiate().unwrap();
        assert_eq!(inst.system.agent_count(), 4);
        let back = ExperimentConfig::from_json(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        c.apply(&Overrides { replicas: Some(0), ..Default::default() });
        assert!(matches!(c.validate(), Err(HarnessError::Config(_))));
        c.replicas = 2;
        c.burn_in = 0.95;
        assert!(c.validate().is_err());
    }
}
