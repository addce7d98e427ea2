//! Experiment configuration files (TOML).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrate::{Rk45Options, TimeGrid};
use crate::koopman::{training_detunings, TrainingConfig, Variant};
use crate::metrics::DEFAULT_ECHO_WINDOW;
use crate::physics::{DetuningGrid, PhysConstants, Pulse, PulseSequence, WeightDistribution};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    /// Number of two-level systems N.
    pub count: usize,
    /// Detuning range R in meV.
    pub range_mev: f64,
    pub fwhm_mev: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeConfig {
    pub t_start: f64,
    pub t_end: f64,
    pub dt: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelVariant {
    #[serde(rename = "BE")]
    Be,
    #[serde(rename = "BERG")]
    Berg,
}

impl From<ModelVariant> for Variant {
    fn from(v: ModelVariant) -> Self {
        match v {
            ModelVariant::Be => Variant::Be,
            ModelVariant::Berg => Variant::Berg,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: ModelVariant,
    /// Number of BERG training detunings spanning [−R, R] (m + 1 in the
    /// sweep convention). Ignored for BE.
    #[serde(default = "default_detuning_count")]
    pub detuning_count: usize,
    #[serde(default = "default_omega_grid")]
    pub omega_grid: Vec<f64>,
    #[serde(default = "default_samples")]
    pub n_samples: usize,
    pub seed: u64,
}

fn default_detuning_count() -> usize {
    101
}

fn default_omega_grid() -> Vec<f64> {
    vec![0.0, 1.0]
}

fn default_samples() -> usize {
    TrainingConfig::DEFAULT_SAMPLES
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsConfig {
    pub echo_window: [f64; 2],
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            echo_window: [DEFAULT_ECHO_WINDOW.0, DEFAULT_ECHO_WINDOW.1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub rtol: f64,
    pub atol: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_step: Option<f64>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let o = Rk45Options::default();
        Self {
            rtol: o.rtol,
            atol: o.atol,
            max_step: o.max_step,
        }
    }
}

/// Parameter sweep attached to an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum SweepConfig {
    /// BE over detuning ranges R (meV).
    Range {
        ranges: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        dts: Option<Vec<f64>>,
    },
    /// BERG over training-grid sizes m (m + 1 detunings).
    M {
        m_values: Vec<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        dts: Option<Vec<f64>>,
    },
    /// BERG on m ≪ N detunings evaluated on the full ensemble.
    Convergence { m_values: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub ensemble: EnsembleConfig,
    #[serde(default)]
    pub pulses: Vec<Pulse>,
    pub time: TimeConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub metrics: MetricsConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::Parse {
            path: path.into(),
            message: e.to_string(),
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration is always representable as TOML")
    }

    pub fn validate(&self) -> Result<()> {
        let c = PhysConstants::default();
        DetuningGrid::new(self.ensemble.range_mev, self.ensemble.count, &c)?;
        WeightDistribution::new(self.ensemble.fwhm_mev)?;
        PulseSequence::new(self.pulses.clone())?;
        TimeGrid::new(self.time.t_start, self.time.t_end, self.time.dt)?;
        let steps = (self.time.t_end - self.time.t_start) / self.time.dt;
        if (steps - steps.round()).abs() > 1e-6 {
            return Err(Error::config(format!(
                "time.dt = {} must divide the window [{}, {}] for surrogate stepping",
                self.time.dt, self.time.t_start, self.time.t_end
            )));
        }
        if self.model.omega_grid != [0.0, 1.0] {
            return Err(Error::config("model.omega_grid must be [0.0, 1.0]"));
        }
        if self.model.n_samples < crate::koopman::LIFTED_DIM {
            return Err(Error::config("model.n_samples must be at least 5"));
        }
        if self.model.variant == ModelVariant::Berg && self.model.detuning_count < 2 {
            return Err(Error::config(
                "model.detuning_count must be at least 2 for BERG",
            ));
        }
        let [lo, hi] = self.metrics.echo_window;
        if !(lo < hi) {
            return Err(Error::config(format!("echo window [{lo}, {hi}] is empty")));
        }
        if !(self.solver.rtol > 0.0 && self.solver.atol > 0.0) {
            return Err(Error::config("solver rtol and atol must be positive"));
        }
        if let Some(ms) = self.solver.max_step {
            if !(ms > 0.0) {
                return Err(Error::config("solver.max_step must be positive"));
            }
        }
        match &self.sweep {
            Some(SweepConfig::Range { ranges, dts }) => {
                if ranges.is_empty() || ranges.iter().any(|r| !(*r > 0.0)) {
                    return Err(Error::config("sweep.ranges must be non-empty and positive"));
                }
                check_dts(dts)?;
            }
            Some(SweepConfig::M { m_values, dts }) => {
                check_m_values(m_values)?;
                check_dts(dts)?;
            }
            Some(SweepConfig::Convergence { m_values }) => check_m_values(m_values)?,
            None => {}
        }
        Ok(())
    }

    pub fn constants(&self) -> PhysConstants {
        PhysConstants::default()
    }

    pub fn detuning_grid(&self) -> Result<DetuningGrid> {
        DetuningGrid::new(
            self.ensemble.range_mev,
            self.ensemble.count,
            &self.constants(),
        )
    }

    pub fn weights(&self) -> Result<WeightDistribution> {
        WeightDistribution::new(self.ensemble.fwhm_mev)
    }

    pub fn pulse_sequence(&self) -> Result<PulseSequence> {
        PulseSequence::new(self.pulses.clone())
    }

    pub fn time_grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.time.t_start, self.time.t_end, self.time.dt)
    }

    pub fn rk45(&self) -> Rk45Options {
        Rk45Options {
            rtol: self.solver.rtol,
            atol: self.solver.atol,
            max_step: self.solver.max_step,
        }
    }

    pub fn echo_window(&self) -> (f64, f64) {
        (self.metrics.echo_window[0], self.metrics.echo_window[1])
    }

    /// Training setup for the configured model variant.
    pub fn training(&self) -> Result<TrainingConfig> {
        let dt = self.time.dt;
        let seed = self.model.seed;
        let mut t = match self.model.variant {
            ModelVariant::Be => TrainingConfig::be(dt, seed),
            ModelVariant::Berg => {
                let d = training_detunings(
                    self.ensemble.range_mev,
                    self.model.detuning_count,
                    &self.constants(),
                )?;
                TrainingConfig::berg(dt, seed, &d)
            }
        };
        t.n_samples = self.model.n_samples;
        Ok(t)
    }
}

fn check_dts(dts: &Option<Vec<f64>>) -> Result<()> {
    if let Some(d) = dts {
        if d.is_empty() || d.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::config("sweep.dts must be non-empty and positive"));
        }
    }
    Ok(())
}

fn check_m_values(m: &[usize]) -> Result<()> {
    if m.is_empty() || m.contains(&0) {
        return Err(Error::config(
            "sweep.m_values must be non-empty and at least 1",
        ));
    }
    Ok(())
}
