//! Optical Bloch model of an inhomogeneously broadened two-level ensemble.
//!
//! Units are fixed throughout the crate: times in ps, rates in 1/ps and
//! energies in meV. Conversions between meV and 1/ps go through
//! [`PhysConstants::hbar`] and happen only where a configuration value
//! enters the model.

use std::f64::consts::{LN_2, PI};
use std::ops::{Add, Mul, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reduced Planck constant in meV·ps (CODATA 2018).
pub const HBAR_MEV_PS: f64 = 0.658_211_956_9;

/// Envelopes are zero farther than this many FWHM from the pulse center.
pub const PULSE_CUTOFF_FWHM: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhysConstants {
    /// meV·ps
    pub hbar: f64,
}

impl Default for PhysConstants {
    fn default() -> Self {
        Self { hbar: HBAR_MEV_PS }
    }
}

impl PhysConstants {
    /// Converts an energy in meV into an angular rate in 1/ps.
    pub fn mev_to_rate(&self, mev: f64) -> f64 {
        mev / self.hbar
    }

    pub fn rate_to_mev(&self, rate: f64) -> f64 {
        rate * self.hbar
    }
}

/// A Gaussian Rabi-frequency envelope.
///
/// `duration` is the FWHM of Ω_R(t). `area` is the Bloch-vector rotation
/// angle ∫ 2Ω_R dt in radians: the Bloch equations rotate at rate 2Ω_R, so a
/// π/2 pulse takes the ground state to n = 1/2 and a π pulse inverts it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pulse {
    pub center: f64,
    pub duration: f64,
    pub area: f64,
}

impl Pulse {
    pub fn new(center: f64, duration: f64, area: f64) -> Result<Self> {
        let pulse = Self {
            center,
            duration,
            area,
        };
        pulse.validate()?;
        Ok(pulse)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(Error::config(format!(
                "pulse duration must be positive and finite, got {}",
                self.duration
            )));
        }
        if !self.area.is_finite() || !self.center.is_finite() {
            return Err(Error::config("pulse center and area must be finite"));
        }
        Ok(())
    }

    /// Peak Rabi frequency in 1/ps.
    pub fn amplitude(&self) -> f64 {
        0.5 * self.area / (self.duration * (PI / (4.0 * LN_2)).sqrt())
    }

    pub fn envelope(&self, t: f64) -> f64 {
        let s = t - self.center;
        if s.abs() > PULSE_CUTOFF_FWHM * self.duration {
            return 0.0;
        }
        self.amplitude() * (-4.0 * LN_2 * s * s / (self.duration * self.duration)).exp()
    }

    /// Interval outside of which the envelope is identically zero.
    pub fn support(&self) -> (f64, f64) {
        let half = PULSE_CUTOFF_FWHM * self.duration;
        (self.center - half, self.center + half)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PulseSequence {
    pub pulses: Vec<Pulse>,
}

impl PulseSequence {
    pub fn new(pulses: Vec<Pulse>) -> Result<Self> {
        for p in &pulses {
            p.validate()?;
        }
        Ok(Self { pulses })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    /// Ω_R(t): pointwise sum of the member envelopes.
    pub fn rabi_frequency(&self, t: f64) -> f64 {
        self.pulses.iter().map(|p| p.envelope(t)).sum()
    }

    pub fn shortest_duration(&self) -> Option<f64> {
        self.pulses.iter().map(|p| p.duration).reduce(f64::min)
    }
}

/// Gaussian weight σ(δ) of the inhomogeneous line, normalised to σ(0) = 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightDistribution {
    pub fwhm_mev: f64,
}

impl WeightDistribution {
    pub fn new(fwhm_mev: f64) -> Result<Self> {
        if !(fwhm_mev > 0.0 && fwhm_mev.is_finite()) {
            return Err(Error::config(format!(
                "FWHM must be positive, got {fwhm_mev} meV"
            )));
        }
        Ok(Self { fwhm_mev })
    }

    pub fn weight(&self, delta: f64, c: &PhysConstants) -> f64 {
        gaussian_weight(delta, self, c)
    }
}

pub fn gaussian_weight(delta: f64, w: &WeightDistribution, c: &PhysConstants) -> f64 {
    let x = 2.0 * (2.0 * LN_2).sqrt() * c.rate_to_mev(delta) / w.fwhm_mev;
    (-0.5 * x * x).exp()
}

/// Linearly spaced detunings covering [−R, R] meV/ħ, stored in 1/ps.
#[derive(Debug, Clone, PartialEq)]
pub struct DetuningGrid {
    pub range_mev: f64,
    pub count: usize,
    pub values: Vec<f64>,
}

impl DetuningGrid {
    pub fn new(range_mev: f64, count: usize, c: &PhysConstants) -> Result<Self> {
        build_detuning_grid(range_mev, count, c)
    }

    pub fn spacing(&self) -> f64 {
        (self.values[self.count - 1] - self.values[0]) / (self.count - 1) as f64
    }

    /// A grid holding a single detuning; used to run one TLS through the
    /// ensemble machinery.
    pub fn single(delta: f64) -> Self {
        Self {
            range_mev: 0.0,
            count: 1,
            values: vec![delta],
        }
    }
}

fn check_range_count(range_mev: f64, count: usize) -> Result<()> {
    if count < 2 {
        return Err(Error::config(format!(
            "detuning count must be at least 2, got {count}"
        )));
    }
    if !(range_mev > 0.0 && range_mev.is_finite()) {
        return Err(Error::config(format!(
            "detuning range must be positive, got {range_mev} meV"
        )));
    }
    Ok(())
}

/// Evenly spaced points from `lo` to `hi` inclusive. Points are placed
/// about the midpoint with integer offsets, so a grid with `lo = -hi` is
/// exactly antisymmetric and hits both endpoints exactly.
pub(crate) fn linspace(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![lo];
    }
    let mid = 0.5 * (lo + hi);
    let half = 0.5 * (hi - lo);
    let last = (count - 1) as i64;
    (0..count as i64)
        .map(|k| mid + half * ((2 * k - last) as f64 / last as f64))
        .collect()
}

pub fn build_detuning_grid(
    range_mev: f64,
    count: usize,
    c: &PhysConstants,
) -> Result<DetuningGrid> {
    check_range_count(range_mev, count)?;
    let edge = c.mev_to_rate(range_mev);
    Ok(DetuningGrid {
        range_mev,
        count,
        values: linspace(-edge, edge, count),
    })
}

/// Time after the echo at which the discretised ensemble spuriously rephases.
pub fn revival_time(count: usize, range_mev: f64, c: &PhysConstants) -> Result<f64> {
    check_range_count(range_mev, count)?;
    Ok(c.hbar * PI * (count - 1) as f64 / range_mev)
}

/// Coherence p and occupation n of one two-level system as four reals.
///
/// n is carried complex for a uniform four-dimensional state; physical
/// trajectories keep `n_im = 0`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TlsState {
    pub p_re: f64,
    pub p_im: f64,
    pub n_re: f64,
    pub n_im: f64,
}

impl TlsState {
    pub const GROUND: TlsState = TlsState {
        p_re: 0.0,
        p_im: 0.0,
        n_re: 0.0,
        n_im: 0.0,
    };

    pub fn new(p_re: f64, p_im: f64, n_re: f64, n_im: f64) -> Self {
        Self {
            p_re,
            p_im,
            n_re,
            n_im,
        }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.p_re, self.p_im, self.n_re, self.n_im]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn max_abs(self) -> f64 {
        self.to_array().iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

impl Add for TlsState {
    type Output = TlsState;
    fn add(self, o: TlsState) -> TlsState {
        TlsState::new(
            self.p_re + o.p_re,
            self.p_im + o.p_im,
            self.n_re + o.n_re,
            self.n_im + o.n_im,
        )
    }
}

impl Sub for TlsState {
    type Output = TlsState;
    fn sub(self, o: TlsState) -> TlsState {
        TlsState::new(
            self.p_re - o.p_re,
            self.p_im - o.p_im,
            self.n_re - o.n_re,
            self.n_im - o.n_im,
        )
    }
}

impl Mul<TlsState> for f64 {
    type Output = TlsState;
    fn mul(self, x: TlsState) -> TlsState {
        TlsState::new(self * x.p_re, self * x.p_im, self * x.n_re, self * x.n_im)
    }
}

/// Lossless optical Bloch equations in the rotating frame:
/// ṗ = −iδp + iΩ(1 − 2n), ṅ = 2Ω Im p.
#[inline]
pub fn obe_rhs(x: TlsState, omega: f64, delta: f64) -> TlsState {
    TlsState {
        p_re: delta * x.p_im + 2.0 * omega * x.n_im,
        p_im: -delta * x.p_re + omega * (1.0 - 2.0 * x.n_re),
        n_re: 2.0 * omega * x.p_im,
        n_im: 0.0,
    }
}

/// 4|p|² + (1 − 2n)², equal to 1 on the Bloch sphere.
pub fn bloch_invariant(x: TlsState) -> f64 {
    let inv = 1.0 - 2.0 * x.n_re;
    4.0 * (x.p_re * x.p_re + x.p_im * x.p_im) + inv * inv
}
