//! Time integration of the Bloch equations and ensemble polarization.

use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::physics::{
    obe_rhs, DetuningGrid, PhysConstants, PulseSequence, TlsState, WeightDistribution,
};

/// Uniform sample times `t_start + k·dt`; when `dt` does not divide the
/// window the last sample is `t_end` itself.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    pub t_start: f64,
    pub t_end: f64,
    pub dt: f64,
    samples: usize,
}

impl TimeGrid {
    pub fn new(t_start: f64, t_end: f64, dt: f64) -> Result<Self> {
        if !(t_start.is_finite() && t_end.is_finite() && t_end > t_start) {
            return Err(Error::config(format!(
                "time window [{t_start}, {t_end}] is empty or not finite"
            )));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::config(format!(
                "time step must be positive, got {dt}"
            )));
        }
        let ratio = (t_end - t_start) / dt;
        let full = (ratio + 1e-9).floor() as usize;
        let samples = if ratio - full as f64 > 1e-9 {
            full + 2
        } else {
            full + 1
        };
        Ok(Self {
            t_start,
            t_end,
            dt,
            samples,
        })
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn time(&self, k: usize) -> f64 {
        if k + 1 == self.samples {
            self.t_end
        } else {
            self.t_start + k as f64 * self.dt
        }
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.samples).map(|k| self.time(k))
    }
}

/// Macroscopic polarization P(t_k) = Σ σ(δ_ℓ) p_ℓ(t_k) on a time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PolarizationTrace {
    pub grid: TimeGrid,
    pub values: Vec<Complex64>,
    pub ensemble_count: usize,
}

impl PolarizationTrace {
    pub fn zeros(grid: TimeGrid, ensemble_count: usize) -> Self {
        Self {
            grid,
            values: vec![Complex64::new(0.0, 0.0); grid.samples()],
            ensemble_count,
        }
    }

    /// |P(t_k)| / N
    pub fn normalized_abs(&self) -> Vec<f64> {
        let n = self.ensemble_count as f64;
        self.values.iter().map(|v| v.norm() / n).collect()
    }
}

/// One classical fourth-order Runge–Kutta step with Ω sampled at the
/// standard stage times t, t + dt/2, t + dt.
#[inline]
pub fn rk4_step(
    x: TlsState,
    t: f64,
    dt: f64,
    omega_of_t: impl Fn(f64) -> f64,
    delta: f64,
) -> TlsState {
    let w0 = omega_of_t(t);
    let wm = omega_of_t(t + 0.5 * dt);
    let w1 = omega_of_t(t + dt);
    rk4_step_sampled(x, dt, [w0, wm, w1], delta)
}

/// RK4 step with the three stage Rabi frequencies supplied directly.
#[inline]
pub(crate) fn rk4_step_sampled(x: TlsState, dt: f64, omega: [f64; 3], delta: f64) -> TlsState {
    let k1 = obe_rhs(x, omega[0], delta);
    let k2 = obe_rhs(x + (0.5 * dt) * k1, omega[1], delta);
    let k3 = obe_rhs(x + (0.5 * dt) * k2, omega[1], delta);
    let k4 = obe_rhs(x + dt * k3, omega[2], delta);
    x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
}

/// Fixed-step RK4 trajectory sampled at every grid point.
pub fn rk4_solve(
    x0: TlsState,
    grid: &TimeGrid,
    omega_of_t: impl Fn(f64) -> f64,
    delta: f64,
) -> Vec<TlsState> {
    let mut out = Vec::with_capacity(grid.samples());
    let mut x = x0;
    out.push(x);
    for k in 0..grid.samples() - 1 {
        let t = grid.time(k);
        x = rk4_step(x, t, grid.time(k + 1) - t, &omega_of_t, delta);
        out.push(x);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rk45Options {
    pub rtol: f64,
    pub atol: f64,
    /// Upper bound on the internal step; `None` derives one from the pulse
    /// sequence when integrating an ensemble, infinity otherwise.
    pub max_step: Option<f64>,
}

impl Default for Rk45Options {
    fn default() -> Self {
        Self {
            rtol: 1e-8,
            atol: 1e-11,
            max_step: None,
        }
    }
}

/// Smallest internal step before the integration is abandoned.
pub const MIN_STEP: f64 = 1e-14;

// Dormand–Prince 5(4) tableau.
const C: [f64; 6] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0];
const A: [[f64; 5]; 6] = [
    [0.0, 0.0, 0.0, 0.0, 0.0],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
    ],
];
const B: [f64; 6] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
];
// Difference between the 4th- and 5th-order weights, seven stages (FSAL).
const E: [f64; 7] = [
    -71.0 / 57600.0,
    0.0,
    71.0 / 16695.0,
    -71.0 / 1920.0,
    17253.0 / 339200.0,
    -22.0 / 525.0,
    1.0 / 40.0,
];
// Quartic continuous extension: y(t + θh) = y + h Σ_i K_i Σ_j P[i][j] θ^(j+1).
const P: [[f64; 4]; 7] = [
    [
        1.0,
        -8048581381.0 / 2820520608.0,
        8663915743.0 / 2820520608.0,
        -12715105075.0 / 11282082432.0,
    ],
    [0.0, 0.0, 0.0, 0.0],
    [
        0.0,
        131558114200.0 / 32700410799.0,
        -68118460800.0 / 10900136933.0,
        87487479700.0 / 32700410799.0,
    ],
    [
        0.0,
        -1754552775.0 / 470086768.0,
        14199869525.0 / 1410260304.0,
        -10690763975.0 / 1880347072.0,
    ],
    [
        0.0,
        127303824393.0 / 49829197408.0,
        -318862633887.0 / 49829197408.0,
        701980252875.0 / 199316789632.0,
    ],
    [
        0.0,
        -282668133.0 / 205662961.0,
        2019193451.0 / 616988883.0,
        -1453857185.0 / 822651844.0,
    ],
    [
        0.0,
        40617522.0 / 29380423.0,
        -110615467.0 / 29380423.0,
        69997945.0 / 29380423.0,
    ],
];

const SAFETY: f64 = 0.9;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 10.0;

fn rms_scaled(v: [f64; 4], scale: [f64; 4]) -> f64 {
    (v.iter()
        .zip(scale)
        .map(|(a, s)| (a / s).powi(2))
        .sum::<f64>()
        / 4.0)
        .sqrt()
}

fn combine(x: TlsState, h: f64, k: &[TlsState], w: &[f64]) -> TlsState {
    let mut acc = TlsState::GROUND;
    for (ki, wi) in k.iter().zip(w) {
        if *wi != 0.0 {
            acc = acc + *wi * *ki;
        }
    }
    x + h * acc
}

/// Starting step from Hairer, Nørsett & Wanner (II.4), as used by SciPy.
fn initial_step(
    f: &impl Fn(f64, TlsState) -> TlsState,
    t0: f64,
    y0: TlsState,
    f0: TlsState,
    span: f64,
    opts: &Rk45Options,
    max_step: f64,
) -> f64 {
    let scale = y0.to_array().map(|v| opts.atol + v.abs() * opts.rtol);
    let d0 = rms_scaled(y0.to_array(), scale);
    let d1 = rms_scaled(f0.to_array(), scale);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 {
        1e-6
    } else {
        0.01 * d0 / d1
    };
    let h0 = h0.min(span);
    let y1 = y0 + h0 * f0;
    let f1 = f(t0 + h0, y1);
    let d2 = rms_scaled((f1 - f0).to_array(), scale) / h0;
    let h1 = if d1 <= 1e-15 && d2 <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(1.0 / 5.0)
    };
    (100.0 * h0).min(h1).min(span).min(max_step)
}

/// Adaptive Dormand–Prince 5(4) integration sampled on `grid` through the
/// quartic dense output. The error norm is the RMS of the embedded error
/// estimate scaled by `atol + rtol·max(|y_old|, |y_new|)` per component.
pub fn rk45_solve(
    x0: TlsState,
    grid: &TimeGrid,
    omega_of_t: impl Fn(f64) -> f64,
    delta: f64,
    opts: &Rk45Options,
) -> Result<Vec<TlsState>> {
    if !(opts.rtol > 0.0 && opts.atol > 0.0) {
        return Err(Error::config("rtol and atol must be positive"));
    }
    let max_step = opts.max_step.unwrap_or(f64::INFINITY);
    if !(max_step > 0.0) {
        return Err(Error::config("max_step must be positive"));
    }
    let f = |t: f64, x: TlsState| obe_rhs(x, omega_of_t(t), delta);

    let t_end = grid.t_end;
    let mut out = Vec::with_capacity(grid.samples());
    out.push(x0);
    let mut next = 1usize;

    let mut t = grid.t_start;
    let mut y = x0;
    let mut fy = f(t, y);
    let mut h_abs = initial_step(&f, t, y, fy, t_end - t, opts, max_step);
    let mut k = [TlsState::GROUND; 7];

    while next < grid.samples() {
        let min_step = MIN_STEP.max(10.0 * (t.next_up() - t));
        h_abs = h_abs.min(max_step).max(min_step);
        let mut rejected = false;
        let (t_new, y_new, f_new) = loop {
            if h_abs < min_step {
                return Err(Error::StepUnderflow { time: t, min_step });
            }
            let t_new = if t + h_abs > t_end { t_end } else { t + h_abs };
            let h = t_new - t;

            k[0] = fy;
            for s in 1..6 {
                let ys = combine(y, h, &k[..s], &A[s][..s]);
                k[s] = f(t + C[s] * h, ys);
            }
            let y_new = combine(y, h, &k[..6], &B);
            let f_new = f(t_new, y_new);
            k[6] = f_new;

            let err = combine(TlsState::GROUND, h, &k, &E);
            let scale = {
                let (a, b) = (y.to_array(), y_new.to_array());
                [0, 1, 2, 3].map(|i| opts.atol + a[i].abs().max(b[i].abs()) * opts.rtol)
            };
            let norm = rms_scaled(err.to_array(), scale);

            if norm < 1.0 {
                let mut factor = if norm == 0.0 {
                    MAX_FACTOR
                } else {
                    MAX_FACTOR.min(SAFETY * norm.powf(-0.2))
                };
                if rejected {
                    factor = factor.min(1.0);
                }
                h_abs = h * factor;
                break (t_new, y_new, f_new);
            }
            h_abs = h * MIN_FACTOR.max(SAFETY * norm.powf(-0.2));
            rejected = true;
        };

        let h = t_new - t;
        while next < grid.samples() && grid.time(next) <= t_new {
            let ts = grid.time(next);
            let sample = if ts == t_new {
                y_new
            } else {
                dense_output(y, h, &k, (ts - t) / h)
            };
            out.push(sample);
            next += 1;
        }

        t = t_new;
        y = y_new;
        fy = f_new;
    }
    Ok(out)
}

fn dense_output(y: TlsState, h: f64, k: &[TlsState; 7], theta: f64) -> TlsState {
    let powers = [theta, theta * theta, theta.powi(3), theta.powi(4)];
    let mut w = [0.0; 7];
    for (wi, row) in w.iter_mut().zip(P.iter()) {
        *wi = row.iter().zip(powers).map(|(p, q)| p * q).sum();
    }
    combine(y, h, k, &w)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Solver {
    Rk4,
    Rk45(Rk45Options),
}

/// Number of systems integrated concurrently before their coherences are
/// folded into the running sum. Fixed so the reduction order never depends
/// on the thread count.
const ENSEMBLE_WAVE: usize = 256;

/// Accumulates Σ_ℓ w_ℓ p_ℓ(t_k) in ascending ℓ. Trajectories are produced in
/// parallel, the sum is formed sequentially.
pub(crate) fn weighted_coherence_sum<F>(
    deltas: &[f64],
    weights: &[f64],
    samples: usize,
    trajectory: F,
) -> Result<Vec<Complex64>>
where
    F: Fn(f64) -> Result<Vec<TlsState>> + Sync,
{
    let mut total = vec![Complex64::new(0.0, 0.0); samples];
    for start in (0..deltas.len()).step_by(ENSEMBLE_WAVE) {
        let end = (start + ENSEMBLE_WAVE).min(deltas.len());
        let wave: Vec<Vec<TlsState>> = (start..end)
            .into_par_iter()
            .map(|l| trajectory(deltas[l]).map_err(|e| Error::at_detuning(l, e)))
            .collect::<Result<_>>()?;
        for (traj, &w) in wave.iter().zip(&weights[start..end]) {
            for (acc, x) in total.iter_mut().zip(traj) {
                *acc += Complex64::new(w * x.p_re, w * x.p_im);
            }
        }
    }
    Ok(total)
}

/// Default RK45 step cap: half the shortest pulse, so no pulse can be
/// stepped over while the state sits at a fixed point.
pub fn default_max_step(seq: &PulseSequence) -> f64 {
    seq.shortest_duration().map_or(f64::INFINITY, |d| 0.5 * d)
}

/// Integrates every detuning of the ensemble from the ground state at
/// `tg.t_start` and returns the weighted coherence sum.
pub fn simulate_ensemble(
    grid: &DetuningGrid,
    w: &WeightDistribution,
    seq: &PulseSequence,
    tg: &TimeGrid,
    solver: Solver,
    c: &PhysConstants,
) -> Result<PolarizationTrace> {
    let weights: Vec<f64> = grid.values.iter().map(|&d| w.weight(d, c)).collect();
    let omega = |t: f64| seq.rabi_frequency(t);
    let values = match solver {
        Solver::Rk4 => weighted_coherence_sum(&grid.values, &weights, tg.samples(), |delta| {
            Ok(rk4_solve(TlsState::GROUND, tg, omega, delta))
        })?,
        Solver::Rk45(opts) => {
            let opts = Rk45Options {
                max_step: Some(opts.max_step.unwrap_or_else(|| default_max_step(seq))),
                ..opts
            };
            weighted_coherence_sum(&grid.values, &weights, tg.samples(), |delta| {
                rk45_solve(TlsState::GROUND, tg, omega, delta, &opts)
            })?
        }
    };
    Ok(PolarizationTrace {
        grid: *tg,
        values,
        ensemble_count: grid.count,
    })
}
