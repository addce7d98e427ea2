use std::f64::consts::{FRAC_PI_2, PI};

use echo_koopman::integrate::{
    rk45_solve, rk4_solve, simulate_ensemble, PolarizationTrace, Rk45Options, Solver, TimeGrid,
};
use echo_koopman::metrics::find_echo_peak;
use echo_koopman::physics::{
    revival_time, DetuningGrid, PhysConstants, Pulse, PulseSequence, TlsState, WeightDistribution,
};
use num_complex::Complex64;

fn two_pulse(tau: f64) -> PulseSequence {
    PulseSequence::new(vec![
        Pulse::new(0.0, 2.5, FRAC_PI_2).unwrap(),
        Pulse::new(tau, 2.5, PI).unwrap(),
    ])
    .unwrap()
}

fn reference(
    count: usize,
    range: f64,
    fwhm: f64,
    seq: &PulseSequence,
    tg: &TimeGrid,
) -> PolarizationTrace {
    let c = PhysConstants::default();
    simulate_ensemble(
        &DetuningGrid::new(range, count, &c).unwrap(),
        &WeightDistribution::new(fwhm).unwrap(),
        seq,
        tg,
        Solver::Rk45(Rk45Options::default()),
        &c,
    )
    .unwrap()
}

#[test]
fn echo_appears_at_twice_the_pulse_delay() {
    let tg = TimeGrid::new(-5.0, 110.0, 0.01).unwrap();
    for tau in [30.0, 40.0, 50.0] {
        let p = reference(800, 15.0, 7.5, &two_pulse(tau), &tg);
        let (t, s) = find_echo_peak(&p, (2.0 * tau - 8.0, 2.0 * tau + 8.0)).unwrap();
        assert!((t - 2.0 * tau).abs() <= 1.0, "tau {tau}: echo at {t}");
        // Away from the echo the ensemble stays dephased.
        let (_, quiet) = find_echo_peak(&p, (tau + 8.0, 2.0 * tau - 8.0)).unwrap();
        assert!(
            quiet < 0.05 * s,
            "tau {tau}: background {quiet} vs echo {s}"
        );
    }
}

#[test]
fn coarse_grid_produces_revival_echo() {
    let c = PhysConstants::default();
    let t_rev = revival_time(80, 15.0, &c).unwrap();
    let tg = TimeGrid::new(-5.0, 100.0, 0.01).unwrap();
    let p = reference(80, 15.0, 7.5, &two_pulse(40.0), &tg);
    let (t_echo, s_echo) = find_echo_peak(&p, (72.0, 88.0)).unwrap();
    let (t_spur, s_spur) = find_echo_peak(&p, (80.0 + t_rev - 4.0, 100.0)).unwrap();
    assert!((t_echo - 80.0).abs() <= 1.0);
    assert!(
        (t_spur - (80.0 + t_rev)).abs() <= 1.0,
        "spurious echo at {t_spur}, expected {}",
        80.0 + t_rev
    );
    assert!(s_spur > 0.5 * s_echo, "{s_spur} vs {s_echo}");

    // The dense grid pushes the revival past the window.
    let dense = reference(800, 15.0, 7.5, &two_pulse(40.0), &tg);
    let (_, s_dense) = find_echo_peak(&dense, (80.0 + t_rev - 1.0, 80.0 + t_rev + 1.0)).unwrap();
    assert!(s_dense < 0.05 * s_echo);
}

#[test]
fn rk4_is_fourth_order() {
    let seq = two_pulse(20.0);
    let omega = |t: f64| seq.rabi_frequency(t);
    let fine = TimeGrid::new(-5.0, 30.0, 0.000_625).unwrap();
    let truth = *rk4_solve(TlsState::GROUND, &fine, omega, 1.3)
        .last()
        .unwrap();
    let err = |dt: f64| {
        let g = TimeGrid::new(-5.0, 30.0, dt).unwrap();
        (*rk4_solve(TlsState::GROUND, &g, omega, 1.3).last().unwrap() - truth).max_abs()
    };
    let (e1, e2) = (err(0.08), err(0.04));
    let order = (e1 / e2).log2();
    assert!(order >= 3.8, "errors {e1:e} {e2:e}, order {order}");
}

#[test]
fn rk4_fine_step_agrees_with_rk45() {
    let seq = two_pulse(40.0);
    let omega = |t: f64| seq.rabi_frequency(t);
    let tg = TimeGrid::new(-5.0, 100.0, 0.001).unwrap();
    let opts = Rk45Options {
        max_step: Some(1.25),
        ..Rk45Options::default()
    };
    for delta in [-3.0, 0.0, 0.7, 10.0] {
        let a = rk4_solve(TlsState::GROUND, &tg, omega, delta);
        let b = rk45_solve(TlsState::GROUND, &tg, omega, delta, &opts).unwrap();
        let worst = a
            .iter()
            .zip(&b)
            .map(|(x, y)| (*x - *y).max_abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-6, "delta {delta}: {worst:e}");
    }
}

#[test]
fn ensemble_sum_is_the_weighted_sequential_sum() {
    let c = PhysConstants::default();
    let grid = DetuningGrid::new(15.0, 300, &c).unwrap();
    let w = WeightDistribution::new(7.5).unwrap();
    let seq = two_pulse(10.0);
    let tg = TimeGrid::new(-5.0, 25.0, 0.02).unwrap();
    let p = simulate_ensemble(&grid, &w, &seq, &tg, Solver::Rk4, &c).unwrap();

    let mut expected = vec![Complex64::new(0.0, 0.0); tg.samples()];
    for &d in &grid.values {
        let weight = w.weight(d, &c);
        let traj = rk4_solve(TlsState::GROUND, &tg, |t| seq.rabi_frequency(t), d);
        for (acc, x) in expected.iter_mut().zip(&traj) {
            *acc += Complex64::new(weight * x.p_re, weight * x.p_im);
        }
    }
    assert_eq!(p.values, expected);
    assert_eq!(p.ensemble_count, 300);
}

#[test]
fn ensemble_is_additive_in_disjoint_subsets() {
    let c = PhysConstants::default();
    let w = WeightDistribution::new(3.0).unwrap();
    let seq = two_pulse(10.0);
    let tg = TimeGrid::new(-5.0, 25.0, 0.02).unwrap();
    let full = DetuningGrid::new(4.0, 41, &c).unwrap();
    let sub = |vals: Vec<f64>| DetuningGrid {
        count: vals.len(),
        values: vals,
        ..full.clone()
    };
    let (left, right): (Vec<f64>, Vec<f64>) = full.values.iter().partition(|&&d| d < 0.0);
    let run = |g: &DetuningGrid| simulate_ensemble(g, &w, &seq, &tg, Solver::Rk4, &c).unwrap();
    let (a, b, all) = (run(&sub(left)), run(&sub(right)), run(&full));
    for ((x, y), z) in a.values.iter().zip(&b.values).zip(&all.values) {
        assert!((x + y - z).norm() <= 1e-13 * (1.0 + z.norm()));
    }
}
