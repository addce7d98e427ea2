//! Experiment runners: reference simulation, surrogate training and
//! prediction, parameter sweeps, and CSV export.

use std::fmt::Write as _;
use std::path::Path;

use num_complex::Complex64;
use rayon::prelude::*;

use crate::config::{ExperimentConfig, ModelVariant, SweepConfig};
use crate::error::{Error, Result};
use crate::integrate::{simulate_ensemble, PolarizationTrace, Solver, TimeGrid};
use crate::koopman::{train_be, train_berg, KoopmanModel};
use crate::metrics::{evaluate, ErrorReport};

/// RK45 ensemble reference for the configured experiment.
pub fn reference_trace(cfg: &ExperimentConfig) -> Result<PolarizationTrace> {
    simulate_ensemble(
        &cfg.detuning_grid()?,
        &cfg.weights()?,
        &cfg.pulse_sequence()?,
        &cfg.time_grid()?,
        Solver::Rk45(cfg.rk45()),
        &cfg.constants(),
    )
}

pub fn train_model(cfg: &ExperimentConfig) -> Result<KoopmanModel> {
    let t = cfg.training()?;
    match cfg.model.variant {
        ModelVariant::Be => train_be(&t),
        ModelVariant::Berg => train_berg(&t),
    }
}

/// Surrogate ensemble prediction. `Ok(None)` means the lifted state blew up.
pub fn predict_trace(
    cfg: &ExperimentConfig,
    model: &KoopmanModel,
) -> Result<Option<PolarizationTrace>> {
    let out = model.predict_ensemble(
        &cfg.detuning_grid()?,
        &cfg.weights()?,
        &cfg.pulse_sequence()?,
        &cfg.time_grid()?,
        &cfg.constants(),
    );
    match out {
        Ok(trace) => Ok(Some(trace)),
        Err(e) if matches!(e.root(), Error::Diverged { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Report for a diverged prediction: both errors are infinite.
pub fn diverged_report(reference: &PolarizationTrace, window: (f64, f64)) -> Result<ErrorReport> {
    let (t, s) = crate::metrics::find_echo_peak(reference, window)?;
    Ok(ErrorReport {
        l2: f64::INFINITY,
        rel_peak: f64::INFINITY,
        peak_time_ref: t,
        peak_time_model: f64::NAN,
        peak_value_ref: s,
        peak_value_model: f64::NAN,
    })
}

/// Errors of a prediction, or of a divergence. A non-finite prediction that
/// slipped through as finite values is scored the same way.
pub fn score(
    reference: &PolarizationTrace,
    prediction: Option<&PolarizationTrace>,
    window: (f64, f64),
) -> Result<ErrorReport> {
    match prediction {
        Some(p) => {
            let r = evaluate(reference, p, window)?;
            if r.l2.is_finite() {
                Ok(r)
            } else {
                Ok(ErrorReport {
                    l2: f64::INFINITY,
                    rel_peak: f64::INFINITY,
                    ..r
                })
            }
        }
        None => diverged_report(reference, window),
    }
}

#[derive(Debug, Clone)]
pub struct EchoRun {
    pub reference: PolarizationTrace,
    pub model: KoopmanModel,
    pub prediction: Option<PolarizationTrace>,
    pub report: ErrorReport,
}

pub fn run_photon_echo(cfg: &ExperimentConfig) -> Result<EchoRun> {
    let reference = reference_trace(cfg)?;
    let model = train_model(cfg)?;
    let prediction = predict_trace(cfg, &model)?;
    let report = score(&reference, prediction.as_ref(), cfg.echo_window())?;
    Ok(EchoRun {
        reference,
        model,
        prediction,
        report,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    /// R in meV for range sweeps, m for m sweeps.
    pub param: f64,
    pub dt: f64,
    pub l2: f64,
    pub rel_peak: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub param_name: &'static str,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{},dt,l2,rel_peak\n", self.param_name);
        for r in &self.rows {
            writeln!(s, "{},{},{:.16e},{:.16e}", r.param, r.dt, r.l2, r.rel_peak).unwrap();
        }
        s
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

fn with_dt(cfg: &ExperimentConfig, dt: f64) -> Result<ExperimentConfig> {
    let mut c = cfg.clone();
    c.time.dt = dt;
    c.validate()?;
    Ok(c)
}

/// BE error for each (R, Δt) pair; the ensemble and reference follow R.
pub fn run_range_sweep(cfg: &ExperimentConfig, ranges: &[f64], dts: &[f64]) -> Result<SweepTable> {
    let jobs: Vec<(f64, f64)> = dts
        .iter()
        .flat_map(|&dt| ranges.iter().map(move |&r| (r, dt)))
        .collect();
    let rows = jobs
        .par_iter()
        .map(|&(r, dt)| {
            let mut c = with_dt(cfg, dt)?;
            c.ensemble.range_mev = r;
            c.model.variant = ModelVariant::Be;
            c.validate()?;
            let run = run_photon_echo(&c)?;
            Ok(SweepRow {
                param: r,
                dt,
                l2: run.report.l2,
                rel_peak: run.report.rel_peak,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepTable {
        param_name: "R",
        rows,
    })
}

/// BERG error for each (m, Δt) pair, trained on m + 1 detunings spanning
/// [−R, R]. One reference per Δt is shared by all m.
pub fn run_m_sweep(cfg: &ExperimentConfig, m_values: &[usize], dts: &[f64]) -> Result<SweepTable> {
    let mut rows = Vec::with_capacity(m_values.len() * dts.len());
    for &dt in dts {
        let base = with_dt(cfg, dt)?;
        let reference = reference_trace(&base)?;
        let part = m_values
            .par_iter()
            .map(|&m| {
                let mut c = base.clone();
                c.model.variant = ModelVariant::Berg;
                c.model.detuning_count = m + 1;
                c.validate()?;
                let model = train_model(&c)?;
                let prediction = predict_trace(&c, &model)?;
                let r = score(&reference, prediction.as_ref(), c.echo_window())?;
                Ok(SweepRow {
                    param: m as f64,
                    dt,
                    l2: r.l2,
                    rel_peak: r.rel_peak,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.extend(part);
    }
    Ok(SweepTable {
        param_name: "m",
        rows,
    })
}

/// BERG trained on m ≪ N detunings, evaluated on the configured ensemble
/// at the configured Δt.
pub fn run_convergence_study(cfg: &ExperimentConfig, m_values: &[usize]) -> Result<SweepTable> {
    run_m_sweep(cfg, m_values, &[cfg.time.dt])
}

/// Runs the sweep attached to `cfg`.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SweepTable> {
    let own_dt = [cfg.time.dt];
    match &cfg.sweep {
        Some(SweepConfig::Range { ranges, dts }) => {
            run_range_sweep(cfg, ranges, dts.as_deref().unwrap_or(&own_dt))
        }
        Some(SweepConfig::M { m_values, dts }) => {
            run_m_sweep(cfg, m_values, dts.as_deref().unwrap_or(&own_dt))
        }
        Some(SweepConfig::Convergence { m_values }) => run_convergence_study(cfg, m_values),
        None => Err(Error::config("configuration has no [sweep] table")),
    }
}

pub const TRACE_HEADER: &str = "t,re_P,im_P,abs_P_normalized";

pub fn trace_to_csv(trace: &PolarizationTrace) -> String {
    let mut s = String::with_capacity(80 * (trace.values.len() + 1));
    s.push_str(TRACE_HEADER);
    s.push('\n');
    let abs = trace.normalized_abs();
    for (k, (v, a)) in trace.values.iter().zip(abs).enumerate() {
        writeln!(
            s,
            "{:.16e},{:.16e},{:.16e},{:.16e}",
            trace.grid.time(k),
            v.re,
            v.im,
            a
        )
        .unwrap();
    }
    s
}

pub fn export_trace(trace: &PolarizationTrace, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, trace_to_csv(trace)).map_err(|e| Error::io(path, e))
}

/// Parses an exported trace. The time column must reproduce `grid` exactly.
pub fn parse_trace(text: &str, grid: TimeGrid, ensemble_count: usize) -> Result<PolarizationTrace> {
    let mut lines = text.lines();
    if lines.next() != Some(TRACE_HEADER) {
        return Err(Error::GridMismatch(format!(
            "trace header must be `{TRACE_HEADER}`"
        )));
    }
    let mut values = Vec::with_capacity(grid.samples());
    for (k, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::GridMismatch(format!(
                "row {}: expected 4 fields",
                k + 1
            )));
        }
        let num = |i: usize| {
            fields[i]
                .parse::<f64>()
                .map_err(|e| Error::GridMismatch(format!("row {}: `{}`: {e}", k + 1, fields[i])))
        };
        if k >= grid.samples() || num(0)? != grid.time(k) {
            return Err(Error::GridMismatch(format!(
                "row {}: time does not match the grid",
                k + 1
            )));
        }
        values.push(Complex64::new(num(1)?, num(2)?));
    }
    if values.len() != grid.samples() {
        return Err(Error::GridMismatch(format!(
            "{} rows for a grid of {} samples",
            values.len(),
            grid.samples()
        )));
    }
    Ok(PolarizationTrace {
        grid,
        values,
        ensemble_count,
    })
}

pub fn read_trace(
    path: impl AsRef<Path>,
    grid: TimeGrid,
    ensemble_count: usize,
) -> Result<PolarizationTrace> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_trace(&text, grid, ensemble_count).map_err(|e| Error::Parse {
        path: path.into(),
        message: e.to_string(),
    })
}

pub const REPORT_HEADER: &str =
    "l2,rel_peak,peak_time_ref,peak_time_model,peak_value_ref,peak_value_model";

pub fn report_to_csv(r: &ErrorReport) -> String {
    format!(
        "{REPORT_HEADER}\n{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}\n",
        r.l2, r.rel_peak, r.peak_time_ref, r.peak_time_model, r.peak_value_ref, r.peak_value_model
    )
}

pub fn write_report(r: &ErrorReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, report_to_csv(r)).map_err(|e| Error::io(path, e))
}
