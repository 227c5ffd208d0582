use timelocal_core::classical::{
    build_ring, build_two_state, effective_rate_matrix, integrate, integrate_sampled, sample_replicates, ClassicalEnsemble,
    ProbabilityVector, RingVariant, TwoStateVariant,
};
use timelocal_core::RateFunction;

fn start() -> ProbabilityVector {
    ProbabilityVector::basis(4, 0).unwrap()
}

fn uniform_distance(p: &ProbabilityVector) -> f64 {
    p.as_slice().iter().map(|x| (x - 0.25).abs()).fold(0.0, f64::max)
}

#[test]
fn two_state_closed_form() {
    let spec = build_two_state(TwoStateVariant::Nonmarkov, 0.4, 5.0, 10.0).unwrap();
    let gamma = spec.rate(1, 0).unwrap().clone();
    for a in [1.0, 0.5, 0.3, 0.0] {
        let p0 = ProbabilityVector::new(vec![a, 1.0 - a]).unwrap();
        let run = integrate(&spec, &p0, 12.0, 1e-3).unwrap();
        for (t, p) in run.times.iter().zip(&run.states) {
            let exact = a * (-gamma.integral(0.0, *t).unwrap()).exp();
            assert!((p.get(0) - exact).abs() < 1e-8, "a = {a}, t = {t}");
        }
    }
}

#[test]
fn markov_and_nonmarkov_agree_before_the_negative_interval() {
    let m = build_two_state(TwoStateVariant::Markov, 0.4, 5.0, 10.0).unwrap();
    let nm = build_two_state(TwoStateVariant::Nonmarkov, 0.4, 5.0, 10.0).unwrap();
    let p0 = ProbabilityVector::new(vec![0.5, 0.5]).unwrap();
    let (a, b) = (integrate(&m, &p0, 12.0, 1e-3).unwrap(), integrate(&nm, &p0, 12.0, 1e-3).unwrap());
    for ((t, pa), pb) in a.times.iter().zip(&a.states).zip(&b.states) {
        if *t <= 5.0 {
            assert!(pa.max_abs_diff(pb) < 1e-9);
        }
    }
    assert!(a.at(8.0).unwrap().max_abs_diff(b.at(8.0).unwrap()) > 0.05);
}

#[test]
fn ring_a_returns_every_period() {
    let spec = build_ring(RingVariant::A, 0.5, 4).unwrap();
    let run = integrate(&spec, &start(), 12.0, 1e-3).unwrap();
    for t in [4.0, 8.0, 12.0] {
        assert!(run.at(t).unwrap().max_abs_diff(&start()) < 1e-6, "t = {t}");
    }
    assert!(uniform_distance(run.at(2.0).unwrap()) < 0.2);
}

#[test]
fn rings_b_c_d_relax_to_uniform() {
    for v in [RingVariant::B, RingVariant::C, RingVariant::D] {
        let run = integrate_sampled(&build_ring(v, 0.5, 4).unwrap(), &start(), 40.0, 1e-3, 1000, &[]).unwrap();
        assert!(uniform_distance(run.at(40.0).unwrap()) < 0.01, "ring {v}");
    }
    let a = integrate_sampled(&build_ring(RingVariant::A, 0.5, 4).unwrap(), &start(), 40.0, 1e-3, 1000, &[]).unwrap();
    assert!(uniform_distance(a.at(40.0).unwrap()) > 0.7);
}

/// `y_i = exp(int_0^t r) p_i` obeys `dy_i/dt = r y_{i-1}` and stays
/// non-negative although `r` changes sign.
#[test]
fn ring_a_change_of_variable() {
    let spec = build_ring(RingVariant::A, 0.5, 4).unwrap();
    let r = spec.rate(1, 0).unwrap().clone();
    let h = 1e-3;
    let run = integrate(&spec, &start(), 12.0, h).unwrap();
    let y: Vec<Vec<f64>> = run
        .times
        .iter()
        .zip(&run.states)
        .map(|(t, p)| {
            let w = r.integral(0.0, *t).unwrap().exp();
            p.as_slice().iter().map(|x| w * x).collect()
        })
        .collect();
    assert!(y.iter().flatten().all(|&v| v >= -1e-12));
    for k in 1..run.times.len() - 1 {
        let (t0, t1) = (run.times[k - 1], run.times[k + 1]);
        let mid = run.times[k];
        if r.breakpoints(t0, t1).unwrap().iter().any(|&b| b > t0 && b < t1 + 1e-12) {
            continue;
        }
        for i in 0..4 {
            let derivative = (y[k + 1][i] - y[k - 1][i]) / (t1 - t0);
            let expected = r.evaluate(mid).unwrap() * y[k][(i + 3) % 4];
            assert!((derivative - expected).abs() < 1e-5, "t = {mid}, state {i}");
        }
    }
}

#[test]
fn ring_c_effective_rate_settles_at_twice_gamma() {
    let spec = build_ring(RingVariant::C, 0.5, 4).unwrap();
    let run = integrate_sampled(&spec, &start(), 40.0, 1e-3, 50, &[]).unwrap();
    let mut worst: f64 = 0.0;
    for (t, p) in run.times.iter().zip(&run.states) {
        if (38.0..40.0).contains(t) {
            let m = effective_rate_matrix(&spec, p, *t).unwrap();
            for i in 0..4 {
                let cw = m[((i + 1) % 4, i)].unwrap();
                worst = worst.max((cw - 1.0).abs());
            }
        }
    }
    assert!(worst < 0.05, "largest deviation {worst}");
}

/// Members of a Markov chain move independently, so the spread of the
/// sampled fractions is binomial. Negative rates couple the members through
/// the occupation ratios and widen it; there the spread is measured from
/// independent replicates.
#[test]
fn sampler_tracks_the_rate_equation() {
    let n = 10_000u64;
    let replicates = 24;
    let checkpoints = [1.0, 2.5, 5.0, 6.5, 9.0];
    let mut specs: Vec<_> = RingVariant::ALL
        .iter()
        .map(|&v| (build_ring(v, 0.5, 4).unwrap(), start(), v.is_markov()))
        .collect();
    for v in [TwoStateVariant::Markov, TwoStateVariant::Nonmarkov] {
        let spec = build_two_state(v, 0.4, 5.0, 10.0).unwrap();
        specs.push((spec, ProbabilityVector::basis(2, 0).unwrap(), v == TwoStateVariant::Markov));
    }
    for (idx, (spec, p0, markov)) in specs.iter().enumerate() {
        let ode = integrate_sampled(spec, p0, 10.0, 1e-3, 100, &checkpoints).unwrap();
        let c0 = ClassicalEnsemble::from_probabilities(p0, n).unwrap();
        let runs = sample_replicates(spec, &c0, 10.0, 1e-3, 40 + idx as u64, replicates, 100).unwrap();
        for &t in &checkpoints {
            let slot = runs[0].times.iter().position(|s| (s - t).abs() < 1e-9).unwrap();
            let p = ode.at(t).unwrap();
            for k in 0..spec.n() {
                let xs: Vec<f64> = runs.iter().map(|r| r.ensembles[slot].fractions()[k]).collect();
                let mean = xs.iter().sum::<f64>() / xs.len() as f64;
                let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt();
                let binomial = (p.get(k) * (1.0 - p.get(k)) / n as f64).sqrt();
                if *markov {
                    assert!((0.5..1.7).contains(&(sd / binomial)), "{}: spread {sd} vs {binomial}", spec.topology());
                }
                let sigma = if *markov { binomial } else { binomial.max(sd) };
                assert!(
                    (xs[0] - p.get(k)).abs() < 4.0 * sigma,
                    "{}: t = {t}, state {}: {} vs {}",
                    spec.topology(),
                    k + 1,
                    xs[0],
                    p.get(k)
                );
            }
        }
    }
}

#[test]
fn rates_of_built_chains_are_piecewise_constant_on_their_grid() {
    let spec = build_ring(RingVariant::D, 0.5, 4).unwrap();
    let bps = spec.breakpoints(0.0, 40.0).unwrap();
    assert_eq!(bps.len(), 20);
    let r: &RateFunction = spec.rate(1, 0).unwrap();
    for w in bps.windows(2) {
        let mid = 0.5 * (w[0] + w[1]);
        assert_eq!(r.evaluate(w[0]).unwrap(), r.evaluate(mid).unwrap());
    }
}
