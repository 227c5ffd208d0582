use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use timelocal_core::integrator::{
    analytic_two_level, apply_map, cp_check, dynamical_map, dynamical_maps, propagate, DEFAULT_CP_TOLERANCE,
};
use timelocal_core::quantum::{CMatrix, EXCITED};
use timelocal_core::{DensityMatrix, RateFunction, StateVector, TimeLocalGenerator, C64};

fn random_profile(rng: &mut ChaCha8Rng) -> RateFunction {
    let pieces = rng.random_range(2..8);
    let mut bps: Vec<f64> = (0..pieces - 1).map(|_| rng.random_range(0.2..9.8)).collect();
    bps.sort_by(f64::total_cmp);
    bps.dedup_by(|a, b| (*a - *b).abs() < 1e-3);
    let values = (0..=bps.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    RateFunction::piecewise(bps, values).unwrap()
}

fn random_state(rng: &mut ChaCha8Rng) -> DensityMatrix {
    let psi = StateVector::from_slice(&[
        C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
        C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
    ])
    .unwrap();
    let phi = StateVector::from_slice(&[C64::new(0.3, 0.0), C64::new(0.1, -0.9)]).unwrap();
    let w = rng.random_range(0.0..1.0);
    DensityMatrix::new(DensityMatrix::pure(&psi).matrix().scale(w) + DensityMatrix::pure(&phi).matrix().scale(1.0 - w))
        .unwrap()
}

#[test]
fn cp_iff_nonnegative_integral() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let grid: Vec<f64> = (1..=20).map(|i| i as f64 * 0.5).collect();
    let (mut cp, mut not_cp) = (0, 0);
    for _ in 0..10 {
        let rate = random_profile(&mut rng);
        let g = TimeLocalGenerator::two_level_decay(rate.clone()).unwrap();
        for report in cp_check(&g, &grid, 1e-3, DEFAULT_CP_TOLERANCE).unwrap() {
            let expected = rate.integral(0.0, report.time).unwrap() >= 0.0;
            assert_eq!(report.is_cp, expected, "{rate:?} at t = {}", report.time);
            if expected {
                cp += 1;
            } else {
                not_cp += 1;
            }
        }
    }
    assert!(cp > 0 && not_cp > 0, "profiles exercised only one branch");
}

#[test]
fn ode_matches_closed_form_for_random_profiles() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..5 {
        let rate = random_profile(&mut rng);
        let rho0 = random_state(&mut rng);
        let g = TimeLocalGenerator::two_level_decay(rate.clone()).unwrap();
        let run = propagate(&g, &rho0, 10.0, 1e-3).unwrap();
        for (t, rho) in run.times.iter().zip(&run.states).step_by(250) {
            let exact = analytic_two_level(&rate, &rho0, *t).unwrap();
            assert!(rho.max_abs_diff(&exact) < 1e-9, "t = {t}");
        }
    }
}

fn max_error(dt: f64) -> f64 {
    let rate = RateFunction::constant(0.4);
    let g = TimeLocalGenerator::two_level_decay(rate.clone()).unwrap();
    let rho0 = DensityMatrix::pure(&StateVector::basis(2, EXCITED).unwrap());
    let run = propagate(&g, &rho0, 10.0, dt).unwrap();
    run.times
        .iter()
        .zip(&run.states)
        .map(|(t, rho)| rho.max_abs_diff(&analytic_two_level(&rate, &rho0, *t).unwrap()))
        .fold(0.0, f64::max)
}

#[test]
fn rk4_is_fourth_order() {
    let ratio = max_error(0.25) / max_error(0.125);
    assert!((12.0..=20.0).contains(&ratio), "ratio {ratio}");
    let ratio = max_error(0.5) / max_error(0.25);
    assert!((12.0..=20.0).contains(&ratio), "ratio {ratio}");
}

#[test]
fn constant_rate_maps_compose() {
    let mut h = CMatrix::zeros(2, 2);
    h[(0, 1)] = C64::new(0.3, 0.1);
    h[(1, 0)] = C64::new(0.3, -0.1);
    h[(0, 0)] = C64::new(0.2, 0.0);
    let g = TimeLocalGenerator::new(
        h,
        vec![timelocal_core::Channel::new(timelocal_core::quantum::sigma_minus(), RateFunction::constant(0.7), "s").unwrap()],
    )
    .unwrap();
    let maps = dynamical_maps(&g, &[1.0, 2.0, 3.0], 1e-3).unwrap();
    let composed = &maps[1] * &maps[0];
    assert!((&composed - &maps[2]).camax() < 1e-10);
}

#[test]
fn map_reproduces_direct_propagation() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let rate = random_profile(&mut rng);
    let g = TimeLocalGenerator::two_level_decay(rate).unwrap();
    let rho0 = random_state(&mut rng);
    let map = dynamical_map(&g, 6.0, 1e-3).unwrap();
    let via_map = apply_map(&map, rho0.matrix());
    let direct = propagate(&g, &rho0, 6.0, 1e-3).unwrap();
    assert!((via_map - direct.final_state().matrix()).camax() < 1e-10);
}
