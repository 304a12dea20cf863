//! Run configuration: one JSON document describing inputs, outputs and every
//! tunable used by the pipeline stages.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jumps::{CalibrationBounds, ModelKind};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Raw option quote CSV (ticker,quote_date,expiry,strike,cp_flag,...).
    pub quotes: PathBuf,
    /// Zip-level exposure share CSV.
    pub exposures: PathBuf,
    /// Fire event CSV (zip,start_date,end_date).
    pub fires: PathBuf,
    /// Daily return CSV (date,market_return,stock_return,wildfire), optional;
    /// required by the garch and kernel stages.
    pub returns: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// Exposure-share threshold for treatment (any measure ≥ threshold).
    pub threshold: f64,
    /// Quotes carry American prices and need the binomial-tree adjustment.
    pub american: bool,
    /// Binomial tree steps for de-Americanization.
    pub n_steps: usize,
    /// Density-extraction bandwidth multiplier on the Silverman value.
    pub bandwidth_mult: f64,
    /// Kernel bandwidth (moneyness units) for the kernel-weighted TE profile.
    pub te_bandwidth: f64,
    /// Density grid points per slice.
    pub grid_size: usize,
    /// Monte Carlo paths (physical density forecast, Proposition-1 checks).
    pub n_paths: usize,
    pub seed: u64,
    /// Maturity bins for the pooled elasticity regression.
    pub maturity_bins: usize,
    /// Calibration model and box bounds.
    pub model: ModelKind,
    pub bounds: CalibrationBounds,
    pub calibration_starts: usize,
    /// Thread cap; 0 means all cores (RND_THREADS overrides).
    pub threads: usize,
    /// Wildfire exposure lag window (days) in the stock variance equation.
    pub n_lags: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            quotes: PathBuf::from("quotes.csv"),
            exposures: PathBuf::from("exposures.csv"),
            fires: PathBuf::from("fires.csv"),
            returns: None,
            output_dir: PathBuf::from("out"),
            threshold: 0.10,
            american: false,
            n_steps: 500,
            bandwidth_mult: crate::rnd::DEFAULT_BANDWIDTH_MULT,
            te_bandwidth: 0.05,
            grid_size: crate::rnd::GRID_POINTS,
            n_paths: 100_000,
            seed: 7,
            maturity_bins: 10,
            model: ModelKind::Merton,
            bounds: CalibrationBounds::default(),
            calibration_starts: 8,
            threads: 0,
            n_lags: 1,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Parameter(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Parameter(format!("invalid config JSON: {e}")))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_size < 20 {
            return Err(Error::Parameter(format!(
                "grid_size must be >= 20, got {}",
                self.grid_size
            )));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Parameter(format!(
                "threshold must lie in [0,1], got {}",
                self.threshold
            )));
        }
        if self.bandwidth_mult <= 0.0 || self.te_bandwidth <= 0.0 {
            return Err(Error::Parameter("bandwidth multipliers must be positive".into()));
        }
        if self.maturity_bins == 0 || self.n_steps == 0 || self.calibration_starts == 0 {
            return Err(Error::Parameter(
                "maturity_bins, n_steps and calibration_starts must be positive".into(),
            ));
        }
        for (name, p) in [
            ("quotes", &self.quotes),
            ("exposures", &self.exposures),
            ("fires", &self.fires),
        ] {
            if !p.exists() {
                return Err(Error::Parameter(format!(
                    "{name} path does not exist: {}",
                    p.display()
                )));
            }
        }
        if let Some(r) = &self.returns {
            if !r.exists() {
                return Err(Error::Parameter(format!(
                    "returns path does not exist: {}",
                    r.display()
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
