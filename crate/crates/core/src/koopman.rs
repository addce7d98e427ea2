//! Bilinear Koopman surrogates learned from constant-control snapshot pairs.
//!
//! Training draws `n` random states, propagates each one RK4 step at every
//! constant control point, and regresses the finite-time operator
//! `K_u = Ψ(X'_u) Ψ(X)⁺` on the order-1 monomial dictionary
//! `Ψ(x) = [1, p_re, p_im, n_re, n_im]`. Prediction combines the trained
//! operators affinely in the control:
//!
//! ```text
//! K_u(t_k) = K_0 + Ω(t_k)·B_Ω + B_δ,    B_u = K_u − K_0
//! ```
//!
//! where `B_δ = δ·B_(0,1)` for BE and a linear interpolation between the two
//! bracketing trained detunings for BERG.

use nalgebra::{DMatrix, Matrix4x5, Matrix5, Vector5};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::integrate::{rk4_step_sampled, weighted_coherence_sum, PolarizationTrace, TimeGrid};
use crate::physics::{DetuningGrid, PhysConstants, PulseSequence, TlsState, WeightDistribution};

/// Number of dictionary functions.
pub const LIFTED_DIM: usize = 5;

pub type Lifted = Vector5<f64>;
pub type Operator = Matrix5<f64>;
pub type BackProjection = Matrix4x5<f64>;

/// Order-1 monomial dictionary: the constant plus the four state components.
pub fn lift(x: TlsState) -> Lifted {
    Lifted::new(1.0, x.p_re, x.p_im, x.n_re, x.n_im)
}

pub fn project(c: &BackProjection, z: &Lifted) -> TlsState {
    let x = c * z;
    TlsState::new(x[0], x[1], x[2], x[3])
}

pub const DEFAULT_RCOND: f64 = 1e-12;

/// Moore–Penrose pseudoinverse through the SVD; singular values at or below
/// `rcond·σ_max` are treated as zero.
pub fn pseudoinverse(m: &DMatrix<f64>, rcond: f64) -> Result<DMatrix<f64>> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::SvdFailure);
    }
    if m.is_empty() {
        return Ok(DMatrix::zeros(m.ncols(), m.nrows()));
    }
    let svd = m
        .clone()
        .try_svd(true, true, f64::EPSILON, 0)
        .ok_or(Error::SvdFailure)?;
    let u = svd.u.as_ref().ok_or(Error::SvdFailure)?;
    let v_t = svd.v_t.as_ref().ok_or(Error::SvdFailure)?;
    let sigma_max = svd.singular_values.max();
    let cutoff = rcond * sigma_max;
    let mut out = DMatrix::zeros(m.ncols(), m.nrows());
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > cutoff && s > 0.0 {
            // out += v_i · u_iᵀ / s
            out += (v_t.row(i).transpose() * u.column(i).transpose()) / s;
        }
    }
    Ok(out)
}

fn numerical_rank(m: &DMatrix<f64>, rcond: f64) -> Result<usize> {
    let sv = m
        .clone()
        .try_svd(false, false, f64::EPSILON, 0)
        .ok_or(Error::SvdFailure)?
        .singular_values;
    let cutoff = rcond * sv.max();
    Ok(sv.iter().filter(|&&s| s > cutoff && s > 0.0).count())
}

/// A constant control u = [Ω, δ] in 1/ps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlPoint {
    pub omega: f64,
    pub delta: f64,
}

impl ControlPoint {
    pub const ZERO: ControlPoint = ControlPoint {
        omega: 0.0,
        delta: 0.0,
    };

    pub fn new(omega: f64, delta: f64) -> Self {
        Self { omega, delta }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub n_samples: usize,
    /// Per-component sampling interval for (p_re, p_im, n_re, n_im).
    pub sample_box: [(f64, f64); 4],
    pub dt: f64,
    pub seed: u64,
    /// Non-zero training controls; the zero control is always trained.
    pub control_points: Vec<ControlPoint>,
    pub rcond: f64,
}

impl TrainingConfig {
    pub const DEFAULT_SAMPLES: usize = 100;

    fn base(dt: f64, seed: u64, control_points: Vec<ControlPoint>) -> Self {
        Self {
            n_samples: Self::DEFAULT_SAMPLES,
            sample_box: [(-1.0, 1.0); 4],
            dt,
            seed,
            control_points,
            rcond: DEFAULT_RCOND,
        }
    }

    /// Unit controls [1, 0] and [0, 1].
    pub fn be(dt: f64, seed: u64) -> Self {
        Self::base(
            dt,
            seed,
            vec![ControlPoint::new(1.0, 0.0), ControlPoint::new(0.0, 1.0)],
        )
    }

    /// [1, 0] plus [0, δ_k] for every training detuning.
    pub fn berg(dt: f64, seed: u64, detunings: &[f64]) -> Self {
        let mut points = vec![ControlPoint::new(1.0, 0.0)];
        points.extend(detunings.iter().map(|&d| ControlPoint::new(0.0, d)));
        Self::base(dt, seed, points)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_samples < LIFTED_DIM {
            return Err(Error::config(format!(
                "need at least {LIFTED_DIM} training samples, got {}",
                self.n_samples
            )));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::config(format!(
                "training dt must be positive, got {}",
                self.dt
            )));
        }
        if self
            .sample_box
            .iter()
            .any(|&(lo, hi)| !(lo < hi && lo.is_finite() && hi.is_finite()))
        {
            return Err(Error::config(
                "sample box intervals must be finite with lo < hi",
            ));
        }
        if self
            .control_points
            .iter()
            .any(|u| !(u.omega.is_finite() && u.delta.is_finite()))
        {
            return Err(Error::config("control points must be finite"));
        }
        if !(self.rcond > 0.0 && self.rcond < 1.0) {
            return Err(Error::config("rcond must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// The snapshot states X shared by every control point, with Ψ(X)⁺ and the
/// back-projection C = X·Ψ(X)⁺.
#[derive(Debug, Clone)]
pub struct SnapshotSet {
    states: Vec<TlsState>,
    lifted_pinv: DMatrix<f64>,
    back_projection: BackProjection,
    dt: f64,
}

impl SnapshotSet {
    pub fn new(cfg: &TrainingConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let dists = cfg
            .sample_box
            .map(|(lo, hi)| Uniform::new_inclusive(lo, hi));
        let states: Vec<TlsState> = (0..cfg.n_samples)
            .map(|_| TlsState::from_array([0, 1, 2, 3].map(|i| dists[i].sample(&mut rng))))
            .collect();

        let lifted = lifted_matrix(&states);
        let rank = numerical_rank(&lifted, cfg.rcond)?;
        if rank < LIFTED_DIM {
            return Err(Error::RankDeficient {
                rank,
                required: LIFTED_DIM,
            });
        }
        let lifted_pinv = pseudoinverse(&lifted, cfg.rcond)?;

        let x = DMatrix::from_fn(4, states.len(), |i, j| states[j].to_array()[i]);
        let c = &x * &lifted_pinv;
        let back_projection = BackProjection::from_fn(|i, j| c[(i, j)]);
        Ok(Self {
            states,
            lifted_pinv,
            back_projection,
            dt: cfg.dt,
        })
    }

    pub fn states(&self) -> &[TlsState] {
        &self.states
    }

    pub fn back_projection(&self) -> &BackProjection {
        &self.back_projection
    }

    /// K_u = Ψ(X'_u)·Ψ(X)⁺ with X'_u one RK4 step of length dt at constant u.
    pub fn operator(&self, u: ControlPoint) -> Operator {
        let w = [u.omega; 3];
        let propagated: Vec<TlsState> = self
            .states
            .iter()
            .map(|&x| rk4_step_sampled(x, self.dt, w, u.delta))
            .collect();
        let k = lifted_matrix(&propagated) * &self.lifted_pinv;
        Operator::from_fn(|i, j| k[(i, j)])
    }
}

fn lifted_matrix(states: &[TlsState]) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(LIFTED_DIM, states.len());
    for (j, &x) in states.iter().enumerate() {
        m.set_column(j, &lift(x));
    }
    m
}

/// Trains the finite-time operator for a single control point.
pub fn train_operator(u: ControlPoint, cfg: &TrainingConfig) -> Result<Operator> {
    Ok(SnapshotSet::new(cfg)?.operator(u))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Be,
    Berg,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Be => "BE",
            Variant::Berg => "BERG",
        }
    }
}

/// A trained bilinear surrogate. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct KoopmanModel {
    pub variant: Variant,
    pub dt: f64,
    pub k0: Operator,
    pub b_omega: Operator,
    /// Sorted training detunings (BERG only).
    pub berg_detunings: Vec<f64>,
    /// One matrix per training detuning (BERG) or the single B_(0,1) (BE).
    pub b_delta: Vec<Operator>,
    pub c: BackProjection,
}

fn is_unit_controls(points: &[ControlPoint]) -> bool {
    points.len() == 2
        && points.contains(&ControlPoint::new(1.0, 0.0))
        && points.contains(&ControlPoint::new(0.0, 1.0))
}

/// BilinearEDMDc with the unit controls [1, 0] and [0, 1].
pub fn train_be(cfg: &TrainingConfig) -> Result<KoopmanModel> {
    if !is_unit_controls(&cfg.control_points) {
        return Err(Error::config(
            "BE trains exactly the unit controls [1,0] and [0,1]",
        ));
    }
    let set = SnapshotSet::new(cfg)?;
    let controls = [
        ControlPoint::ZERO,
        ControlPoint::new(1.0, 0.0),
        ControlPoint::new(0.0, 1.0),
    ];
    let ops: Vec<Operator> = controls.par_iter().map(|&u| set.operator(u)).collect();
    Ok(KoopmanModel {
        variant: Variant::Be,
        dt: cfg.dt,
        k0: ops[0],
        b_omega: ops[1] - ops[0],
        berg_detunings: Vec::new(),
        b_delta: vec![ops[2] - ops[0]],
        c: *set.back_projection(),
    })
}

/// BE on a refined detuning grid: Ω grid {0, 1}, detuning grid from the
/// config's `[0, δ_k]` control points.
pub fn train_berg(cfg: &TrainingConfig) -> Result<KoopmanModel> {
    let mut has_unit_omega = false;
    let mut detunings = Vec::new();
    for u in &cfg.control_points {
        if *u == ControlPoint::new(1.0, 0.0) {
            has_unit_omega = true;
        } else if u.omega == 0.0 {
            detunings.push(u.delta);
        } else {
            return Err(Error::config(format!(
                "BERG control points are [1,0] or [0,δ]; got [{}, {}]",
                u.omega, u.delta
            )));
        }
    }
    if !has_unit_omega {
        return Err(Error::config("BERG needs the control point [1,0]"));
    }
    if detunings.len() < 2 {
        return Err(Error::config("BERG needs at least two training detunings"));
    }
    if detunings.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::config(
            "BERG training detunings must be strictly increasing",
        ));
    }

    let set = SnapshotSet::new(cfg)?;
    let k0 = set.operator(ControlPoint::ZERO);
    let b_omega = set.operator(ControlPoint::new(1.0, 0.0)) - k0;
    let b_delta: Vec<Operator> = detunings
        .par_iter()
        .map(|&d| set.operator(ControlPoint::new(0.0, d)) - k0)
        .collect();
    Ok(KoopmanModel {
        variant: Variant::Berg,
        dt: cfg.dt,
        k0,
        b_omega,
        berg_detunings: detunings,
        b_delta,
        c: *set.back_projection(),
    })
}

/// Linearly spaced training detunings: `count` points from −R/ħ to R/ħ.
pub fn training_detunings(range_mev: f64, count: usize, c: &PhysConstants) -> Result<Vec<f64>> {
    Ok(DetuningGrid::new(range_mev, count, c)?.values)
}

/// Interpolation bracket δ = (1 − a)·δ_lo + a·δ_hi on the training grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bracket {
    pub lo: usize,
    pub hi: usize,
    pub delta_lo: f64,
    pub delta_hi: f64,
    pub a: f64,
}

/// The two training detunings around `delta`. Exact grid hits return
/// `lo == hi` and `a = 0`; values outside the grid clamp to the nearest end.
pub fn nearest_two_detunings(delta: f64, grid: &[f64]) -> Result<Bracket> {
    if grid.is_empty() {
        return Err(Error::config("training detuning grid is empty"));
    }
    let at = |i: usize| Bracket {
        lo: i,
        hi: i,
        delta_lo: grid[i],
        delta_hi: grid[i],
        a: 0.0,
    };
    let i = grid.partition_point(|&d| d < delta);
    if i == grid.len() {
        return Ok(at(grid.len() - 1));
    }
    if grid[i] == delta || i == 0 {
        return Ok(at(i));
    }
    let (lo, hi) = (grid[i - 1], grid[i]);
    Ok(Bracket {
        lo: i - 1,
        hi: i,
        delta_lo: lo,
        delta_hi: hi,
        a: (delta - lo) / (hi - lo),
    })
}

impl KoopmanModel {
    pub fn lifted_dim(&self) -> usize {
        LIFTED_DIM
    }

    /// The detuning part B_δ of the step operator.
    pub fn detuning_operator(&self, delta: f64) -> Result<Operator> {
        match self.variant {
            Variant::Be => Ok(self.b_delta[0] * delta),
            Variant::Berg => {
                let b = nearest_two_detunings(delta, &self.berg_detunings)?;
                if b.lo == b.hi {
                    Ok(self.b_delta[b.lo])
                } else {
                    Ok(self.b_delta[b.lo] * (1.0 - b.a) + self.b_delta[b.hi] * b.a)
                }
            }
        }
    }

    /// K0 + Ω·B_Ω + B_δ
    pub fn step_operator(&self, omega: f64, delta: f64) -> Result<Operator> {
        Ok(self.k0 + self.b_omega * omega + self.detuning_operator(delta)?)
    }

    fn check_grid(&self, tg: &TimeGrid) -> Result<()> {
        let steps = (tg.samples() - 1) as f64;
        let tol = 1e-9 * self.dt;
        if (tg.dt - self.dt).abs() > tol
            || ((tg.t_end - tg.t_start) - steps * self.dt).abs() > 1e-6 * self.dt * steps.max(1.0)
        {
            return Err(Error::config(format!(
                "prediction grid (dt = {}, window [{}, {}]) must be a whole number of model steps of {}",
                tg.dt, tg.t_start, tg.t_end, self.dt
            )));
        }
        Ok(())
    }

    /// Iterates the lifted state from `x0`, sampling Ω at the left end of
    /// each step, and projects every sample back through C.
    pub fn predict_trajectory(
        &self,
        x0: TlsState,
        delta: f64,
        seq: &PulseSequence,
        tg: &TimeGrid,
    ) -> Result<Vec<TlsState>> {
        self.check_grid(tg)?;
        let omega: Vec<f64> = tg.times().map(|t| seq.rabi_frequency(t)).collect();
        self.predict_sampled(x0, delta, &omega)
    }

    fn predict_sampled(&self, x0: TlsState, delta: f64, omega: &[f64]) -> Result<Vec<TlsState>> {
        let base = self.k0 + self.detuning_operator(delta)?;
        let mut z = lift(x0);
        let mut out = Vec::with_capacity(omega.len());
        out.push(project(&self.c, &z));
        for (k, &w) in omega[..omega.len() - 1].iter().enumerate() {
            z = if w == 0.0 {
                base * z
            } else {
                base * z + (self.b_omega * z) * w
            };
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::Diverged { step: k + 1 });
            }
            out.push(project(&self.c, &z));
        }
        Ok(out)
    }

    /// Surrogate counterpart of [`crate::integrate::simulate_ensemble`].
    pub fn predict_ensemble(
        &self,
        grid: &DetuningGrid,
        w: &WeightDistribution,
        seq: &PulseSequence,
        tg: &TimeGrid,
        c: &PhysConstants,
    ) -> Result<PolarizationTrace> {
        self.check_grid(tg)?;
        let omega: Vec<f64> = tg.times().map(|t| seq.rabi_frequency(t)).collect();
        let weights: Vec<f64> = grid.values.iter().map(|&d| w.weight(d, c)).collect();
        let values = weighted_coherence_sum(&grid.values, &weights, tg.samples(), |delta| {
            self.predict_sampled(TlsState::GROUND, delta, &omega)
        })?;
        Ok(PolarizationTrace {
            grid: *tg,
            values,
            ensemble_count: grid.count,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::integrate::rk4_step;
    use crate::physics::Pulse;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_states(n: usize, seed: u64) -> Vec<TlsState> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| TlsState::from_array([0; 4].map(|_| rng.gen_range(-1.0..=1.0))))
            .collect()
    }

    fn rel_err(a: &Lifted, b: &Lifted) -> f64 {
        (a - b).norm() / b.norm()
    }

    #[test]
    fn lift_examples() {
        assert_eq!(lift(TlsState::GROUND), Lifted::new(1.0, 0.0, 0.0, 0.0, 0.0));
        assert_eq!(
            lift(TlsState::new(0.1, 0.2, 0.3, 0.0)),
            Lifted::new(1.0, 0.1, 0.2, 0.3, 0.0)
        );
    }

    #[test]
    fn pinv_identity_and_diagonal() {
        let i5 = DMatrix::<f64>::identity(5, 5);
        assert!((pseudoinverse(&i5, DEFAULT_RCOND).unwrap() - &i5).norm() < 1e-15);
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![2.0, 1.0, 0.0]));
        let expected = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![0.5, 1.0, 0.0]));
        assert!((pseudoinverse(&d, DEFAULT_RCOND).unwrap() - expected).norm() < 1e-15);
    }

    #[test]
    fn pinv_penrose_conditions() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = DMatrix::from_fn(5, 100, |_, _| rng.gen_range(-1.0..1.0));
        let p = pseudoinverse(&m, DEFAULT_RCOND).unwrap();
        assert!((&m * &p * &m - &m).norm() < 1e-10 * m.norm());
        assert!((&p * &m * &p - &p).norm() < 1e-10 * p.norm());
        let mp = &m * &p;
        assert!((&mp - mp.transpose()).norm() < 1e-10);
    }

    #[test]
    fn pinv_rejects_nan() {
        let m = DMatrix::from_element(2, 2, f64::NAN);
        assert!(matches!(
            pseudoinverse(&m, DEFAULT_RCOND),
            Err(Error::SvdFailure)
        ));
    }

    #[test]
    fn too_few_samples_rejected() {
        let mut cfg = TrainingConfig::be(0.01, 1);
        cfg.n_samples = 4;
        assert!(matches!(SnapshotSet::new(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn degenerate_samples_are_rank_deficient() {
        // n_im pinned to a constant makes it collinear with the constant function.
        let mut cfg = TrainingConfig::be(0.01, 1);
        cfg.sample_box[3] = (0.25, 0.25 + 1e-14);
        assert!(matches!(
            SnapshotSet::new(&cfg),
            Err(Error::RankDeficient {
                rank: 4,
                required: 5
            })
        ));
    }

    #[test]
    fn zero_control_is_identity() {
        let k = train_operator(ControlPoint::ZERO, &TrainingConfig::be(0.01, 3)).unwrap();
        assert!((k - Operator::identity()).abs().max() < 1e-10);
    }

    #[test]
    fn free_rotation_block() {
        let (delta, dt) = (3.0, 0.01);
        let k = train_operator(ControlPoint::new(0.0, delta), &TrainingConfig::be(dt, 3)).unwrap();
        let block = k.fixed_view::<2, 2>(1, 1);
        // p' = p e^{-iδ dt}: [re; im] rotates by −δ·dt
        let (s, c) = (delta * dt).sin_cos();
        assert!((block[(0, 0)] - c).abs() < 1e-9);
        assert!((block[(0, 1)] - s).abs() < 1e-9);
        assert!((block[(1, 0)] + s).abs() < 1e-9);
        assert!((block.determinant() - 1.0).abs() < (delta * dt).powi(5));
    }

    #[test]
    fn held_out_representability() {
        let cfg = TrainingConfig::berg(0.01, 11, &[-20.0, -3.0, 0.0, 4.5, 20.0]);
        let set = SnapshotSet::new(&cfg).unwrap();
        let held_out = random_states(1000, 99);
        for &u in cfg.control_points.iter().chain([ControlPoint::ZERO].iter()) {
            let k = set.operator(u);
            for &x in &held_out {
                let truth = lift(rk4_step(x, 0.0, cfg.dt, |_| u.omega, u.delta));
                assert!(rel_err(&(k * lift(x)), &truth) < 1e-8);
            }
        }
    }

    #[test]
    fn back_projection_recovers_state() {
        let model = train_be(&TrainingConfig::be(0.01, 5)).unwrap();
        for x in random_states(200, 8) {
            let y = project(&model.c, &lift(x));
            assert!((y - x).max_abs() < 1e-10);
        }
    }

    #[test]
    fn be_reproduces_trained_controls() {
        let cfg = TrainingConfig::be(0.01, 5);
        let model = train_be(&cfg).unwrap();
        let k_omega = train_operator(ControlPoint::new(1.0, 0.0), &cfg).unwrap();
        let k_delta = train_operator(ControlPoint::new(0.0, 1.0), &cfg).unwrap();
        assert!(
            (model.step_operator(1.0, 0.0).unwrap() - k_omega)
                .abs()
                .max()
                < 1e-14
        );
        assert!(
            (model.step_operator(0.0, 1.0).unwrap() - k_delta)
                .abs()
                .max()
                < 1e-14
        );
    }

    #[test]
    fn be_rejects_other_controls() {
        let mut cfg = TrainingConfig::be(0.01, 5);
        cfg.control_points.push(ControlPoint::new(2.0, 0.0));
        assert!(train_be(&cfg).is_err());
    }

    #[test]
    fn bracket_examples() {
        let g = [-1.0, 0.0, 1.0];
        let b = nearest_two_detunings(0.25, &g).unwrap();
        assert_eq!((b.delta_lo, b.delta_hi, b.a), (0.0, 1.0, 0.25));
        let b = nearest_two_detunings(0.5, &g).unwrap();
        assert_eq!((b.delta_lo, b.delta_hi, b.a), (0.0, 1.0, 0.5));
        let b = nearest_two_detunings(-1.0, &g).unwrap();
        assert_eq!((b.delta_lo, b.a), (-1.0, 0.0));
        let b = nearest_two_detunings(0.0, &g).unwrap();
        assert_eq!((b.lo, b.hi, b.a), (1, 1, 0.0));
        // clamped
        assert_eq!(nearest_two_detunings(-3.0, &g).unwrap().delta_lo, -1.0);
        assert_eq!(nearest_two_detunings(3.0, &g).unwrap().delta_hi, 1.0);
        assert!(nearest_two_detunings(0.0, &[]).is_err());
    }

    #[test]
    fn berg_interpolation_on_and_between_grid_points() {
        let d = [-4.0, -1.0, 2.0, 5.0];
        let model = train_berg(&TrainingConfig::berg(0.01, 2, &d)).unwrap();
        for (k, &dk) in d.iter().enumerate() {
            assert_eq!(model.detuning_operator(dk).unwrap(), model.b_delta[k]);
        }
        let mid = model.detuning_operator(0.5).unwrap();
        let expected = model.b_delta[1] * 0.5 + model.b_delta[2] * 0.5;
        assert!((mid - expected).abs().max() < 1e-15);
    }

    #[test]
    fn b_operators_round_trip() {
        let cfg = TrainingConfig::berg(0.01, 4, &[-2.0, 0.0, 2.0]);
        let set = SnapshotSet::new(&cfg).unwrap();
        let model = train_berg(&cfg).unwrap();
        let k = set.operator(ControlPoint::new(0.0, 2.0));
        assert!((model.k0 + model.b_delta[2] - k).abs().max() < 1e-14);
        let k = set.operator(ControlPoint::new(1.0, 0.0));
        assert!((model.k0 + model.b_omega - k).abs().max() < 1e-14);
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = TrainingConfig::berg(0.01, 42, &[-1.0, 0.5, 3.0]);
        assert_eq!(train_berg(&cfg).unwrap(), train_berg(&cfg).unwrap());
        let other = TrainingConfig {
            seed: 43,
            ..cfg.clone()
        };
        assert_ne!(train_berg(&cfg).unwrap().c, train_berg(&other).unwrap().c);
    }

    #[test]
    fn prediction_without_drive_stays_at_ground() {
        let model = train_be(&TrainingConfig::be(0.01, 1)).unwrap();
        let tg = TimeGrid::new(0.0, 1.0, 0.01).unwrap();
        let traj = model
            .predict_trajectory(TlsState::GROUND, 0.0, &PulseSequence::empty(), &tg)
            .unwrap();
        assert_eq!(traj.len(), 101);
        assert!(traj.iter().all(|x| x.max_abs() < 1e-12));
    }

    #[test]
    fn prediction_free_rotation_phase() {
        let model = train_be(&TrainingConfig::be(0.01, 1)).unwrap();
        let tg = TimeGrid::new(0.0, 1.0, 0.01).unwrap();
        let x0 = TlsState::new(0.4, 0.0, 0.0, 0.0);
        let traj = model
            .predict_trajectory(x0, 1.0, &PulseSequence::empty(), &tg)
            .unwrap();
        let last = traj[100];
        let phase = last.p_im.atan2(last.p_re);
        assert!((phase + 1.0).abs() < 1e-3, "phase {phase}");
    }

    #[test]
    fn prediction_requires_matching_dt() {
        let model = train_be(&TrainingConfig::be(0.01, 1)).unwrap();
        let tg = TimeGrid::new(0.0, 1.0, 0.02).unwrap();
        assert!(model
            .predict_trajectory(TlsState::GROUND, 0.0, &PulseSequence::empty(), &tg)
            .is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let mut model = train_be(&TrainingConfig::be(0.01, 1)).unwrap();
        model.k0 *= 1e80;
        let tg = TimeGrid::new(0.0, 1.0, 0.01).unwrap();
        let err = model
            .predict_trajectory(TlsState::GROUND, 0.0, &PulseSequence::empty(), &tg)
            .unwrap_err();
        assert!(matches!(err, Error::Diverged { step: 4 }), "{err}");
    }

    #[test]
    fn ensemble_of_one_matches_trajectory() {
        let c = PhysConstants::default();
        let model = train_be(&TrainingConfig::be(0.01, 1)).unwrap();
        let seq = PulseSequence::new(vec![
            Pulse::new(0.0, 2.5, std::f64::consts::FRAC_PI_2).unwrap()
        ])
        .unwrap();
        let tg = TimeGrid::new(-5.0, 5.0, 0.01).unwrap();
        let w = WeightDistribution::new(1.0).unwrap();
        let tr = model
            .predict_ensemble(&DetuningGrid::single(0.0), &w, &seq, &tg, &c)
            .unwrap();
        let traj = model
            .predict_trajectory(TlsState::GROUND, 0.0, &seq, &tg)
            .unwrap();
        for (v, x) in tr.values.iter().zip(&traj) {
            assert_eq!((v.re, v.im), (x.p_re, x.p_im));
        }
        let empty = model
            .predict_ensemble(
                &DetuningGrid::new(2.0, 9, &c).unwrap(),
                &w,
                &PulseSequence::empty(),
                &tg,
                &c,
            )
            .unwrap();
        assert!(empty.values.iter().all(|v| v.norm() < 1e-12));
    }

    #[test]
    fn off_grid_control_error_is_second_order() {
        // One step at Ω = 0.5 interpolated between Ω = 0 and Ω = 1.
        let x = TlsState::new(0.2, -0.3, 0.4, 0.0);
        let errs: Vec<f64> = [0.04, 0.02, 0.01]
            .iter()
            .map(|&dt| {
                let model = train_be(&TrainingConfig::be(dt, 9)).unwrap();
                let pred = project(
                    &model.c,
                    &(model.step_operator(0.5, 0.0).unwrap() * lift(x)),
                );
                let truth = rk4_step(x, 0.0, dt, |_| 0.5, 0.0);
                (pred - truth).max_abs()
            })
            .collect();
        let order = (errs[0] / errs[2]).log2() / 2.0;
        assert!(order >= 1.8, "{errs:?} order {order}");
        assert_relative_eq!(errs[0] / errs[1], 4.0, max_relative = 0.1);
    }

    proptest! {
        #[test]
        fn lift_is_affine(a in 0.0..1.0f64, x in proptest::array::uniform4(-1.0..1.0f64), y in proptest::array::uniform4(-1.0..1.0f64)) {
            let (x, y) = (TlsState::from_array(x), TlsState::from_array(y));
            let lhs = lift(a * x + (1.0 - a) * y);
            let rhs = lift(x) * a + lift(y) * (1.0 - a);
            prop_assert!((lhs - rhs).abs().max() < 1e-15);
        }
    }
}
