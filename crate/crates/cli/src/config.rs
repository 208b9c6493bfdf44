//! Experiment configuration (JSON), mirroring the solver's parameters plus
//! the experiment grids and I/O paths.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use tc_core::error::{Error, Result};
use tc_core::solver::{CoreTopology, FactorStrategy, SolverConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Synthetic,
    Phase,
    Inpaint,
}

/// Core topology selection; tt/tr weights default to 8 per internal edge
/// when omitted.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TopologyChoice {
    #[default]
    Single,
    Cp {
        rank: usize,
    },
    Tt {
        #[serde(default)]
        weights: Vec<usize>,
    },
    Tr {
        #[serde(default)]
        weights: Vec<usize>,
    },
}

pub const DEFAULT_TT_WEIGHT: usize = 8;

impl TopologyChoice {
    /// Concrete topology for an order-`n` model.
    pub fn to_core(&self, n_modes: usize) -> CoreTopology {
        match self {
            TopologyChoice::Single => CoreTopology::Single,
            TopologyChoice::Cp { rank } => CoreTopology::Cp { rank: *rank },
            TopologyChoice::Tt { weights } => CoreTopology::Tt {
                weights: if weights.is_empty() {
                    vec![DEFAULT_TT_WEIGHT; n_modes.saturating_sub(1)]
                } else {
                    weights.clone()
                },
            },
            TopologyChoice::Tr { weights } => CoreTopology::Tr {
                weights: if weights.is_empty() {
                    vec![DEFAULT_TT_WEIGHT; n_modes]
                } else {
                    weights.clone()
                },
            },
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            TopologyChoice::Single => "single",
            TopologyChoice::Cp { .. } => "cp",
            TopologyChoice::Tt { .. } => "tt",
            TopologyChoice::Tr { .. } => "tr",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StrategyChoice {
    #[default]
    Direct,
    Subsampled {
        #[serde(default = "default_subsample_factor")]
        c: f64,
    },
    Iterative {
        max_mv: usize,
        atol: f64,
    },
}

fn default_subsample_factor() -> f64 {
    3.0
}

impl StrategyChoice {
    pub fn to_core(&self) -> FactorStrategy {
        match *self {
            StrategyChoice::Direct => FactorStrategy::DirectRowwise,
            StrategyChoice::Subsampled { c } => FactorStrategy::SubsampledRowwise { c },
            StrategyChoice::Iterative { max_mv, atol } => {
                FactorStrategy::Iterative { max_mv, atol }
            }
        }
    }
}

/// Solver parameters as they appear in config files; `d0` empty means
/// "derive from the experiment" (planted rank, or the inpainting default).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverSettings {
    pub d0: Vec<usize>,
    pub kappa: f64,
    pub tol: f64,
    pub max_outer: usize,
    pub inner_tol: f64,
    pub inner_max: usize,
    pub factor_strategy: StrategyChoice,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            d0: Vec::new(),
            kappa: 100.0,
            tol: 1e-4,
            max_outer: 50,
            inner_tol: 1e-3,
            inner_max: 10,
            factor_strategy: StrategyChoice::Direct,
        }
    }
}

impl SolverSettings {
    /// Solver config at a concrete rank vector and seed.
    pub fn build(&self, d0: Vec<usize>, seed: u64) -> SolverConfig {
        let n = d0.len();
        let mut cfg = SolverConfig::new(d0);
        cfg.kappa = vec![self.kappa; n];
        cfg.tol = self.tol;
        cfg.max_outer = self.max_outer;
        cfg.inner_tol = self.inner_tol;
        cfg.inner_max = self.inner_max;
        cfg.factor_strategy = self.factor_strategy.to_core();
        cfg.seed = seed;
        cfg
    }
}

/// One experiment: what to run, over which grid, and where to write.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    /// Tensor dims for synthetic/phase runs.
    #[serde(default)]
    pub dims: Vec<usize>,
    /// Planted multilinear rank (synthetic; per-mode).
    #[serde(default)]
    pub rank: Vec<usize>,
    /// Single sampling probability (synthetic with no grid, inpaint).
    #[serde(default)]
    pub p: Option<f64>,
    /// Probability grid (synthetic settings, phase).
    #[serde(default)]
    pub p_grid: Vec<f64>,
    /// Rank grid, one scalar per cell meaning rank (r, .., r) (phase,
    /// synthetic setting sweeps).
    #[serde(default)]
    pub r_grid: Vec<usize>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub topology: TopologyChoice,
    #[serde(default)]
    pub solver: SolverSettings,
    /// Input image path for inpainting; empty uses the bundled texture.
    #[serde(default)]
    pub image: String,
    /// Output directory; the CLI `--out` flag overrides it.
    #[serde(default)]
    pub out_dir: String,
    #[serde(default)]
    pub seed: u64,
    /// Wall-time columns are omitted by default so reruns are byte-identical.
    #[serde(default)]
    pub record_wall_time: bool,
}

fn default_trials() -> usize {
    1
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::InvalidArgument("trials must be >= 1".into()));
        }
        match self.experiment {
            ExperimentKind::Synthetic => {
                if self.dims.is_empty() || self.rank.is_empty() && self.r_grid.is_empty() {
                    return Err(Error::InvalidArgument(
                        "synthetic runs need dims and a planted rank (or r_grid)".into(),
                    ));
                }
            }
            ExperimentKind::Phase => {
                if self.dims.is_empty() || self.r_grid.is_empty() || self.p_grid.is_empty() {
                    return Err(Error::InvalidArgument(
                        "phase runs need dims, r_grid, and p_grid".into(),
                    ));
                }
            }
            ExperimentKind::Inpaint => {
                let p = self.p.unwrap_or(0.0);
                if !(0.0 < p && p <= 1.0) {
                    return Err(Error::InvalidArgument(
                        "inpaint runs need p in (0, 1]".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Probability list for grid experiments.
    pub fn p_list(&self) -> Vec<f64> {
        if !self.p_grid.is_empty() {
            self.p_grid.clone()
        } else {
            vec![self.p.unwrap_or(1.0)]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_json_roundtrip() {
        let cfg = ExperimentConfig {
            experiment: ExperimentKind::Phase,
            dims: vec![30, 30, 30],
            rank: vec![],
            p: None,
            p_grid: vec![0.05, 0.1, 0.2],
            r_grid: vec![3, 5, 8],
            trials: 10,
            topology: TopologyChoice::Single,
            solver: SolverSettings::default(),
            image: String::new(),
            out_dir: "out".into(),
            seed: 7,
            record_wall_time: false,
        };
        let js = serde_json::to_string_pretty(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&js).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn minimal_configs_parse_with_defaults() {
        let js = r#"{
            "experiment": "synthetic",
            "dims": [10, 10, 10],
            "rank": [2, 2, 2],
            "p": 0.5
        }"#;
        let cfg: ExperimentConfig = serde_json::from_str(js).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.trials, 1);
        assert_eq!(cfg.solver.kappa, 100.0);
        assert_eq!(cfg.topology, TopologyChoice::Single);

        let js = r#"{
            "experiment": "inpaint",
            "p": 0.5,
            "topology": {"kind": "tt"}
        }"#;
        let cfg: ExperimentConfig = serde_json::from_str(js).unwrap();
        cfg.validate().unwrap();
        match cfg.topology.to_core(5) {
            CoreTopology::Tt { weights } => assert_eq!(weights, vec![8, 8, 8, 8]),
            _ => panic!(),
        }

        // Subsampled strategy defaults to c = 3 rows per unknown.
        let s: StrategyChoice = serde_json::from_str(r#"{"kind": "subsampled"}"#).unwrap();
        assert_eq!(s, StrategyChoice::Subsampled { c: 3.0 });
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let js = r#"{"experiment": "phase", "dims": [10, 10, 10]}"#;
        let cfg: ExperimentConfig = serde_json::from_str(js).unwrap();
        assert!(cfg.validate().is_err());

        let js = r#"{"experiment": "inpaint", "p": 0.0}"#;
        let cfg: ExperimentConfig = serde_json::from_str(js).unwrap();
        assert!(cfg.validate().is_err());
    }
}
