//! Classical rate equations with possibly negative rates.
//!
//! `gamma_kl` is the rate of the transition `l -> k`, so
//! `dp_k/dt = sum_{l != k} (gamma_kl p_l - gamma_lk p_k)`, or `dP/dt = Q P`
//! with `q_kl = gamma_kl` off the diagonal and zero column sums.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, structural, Error, Result};
use crate::mcwf::MAX_STEP_PROBABILITY;
use crate::rates::{RateFunction, TimeGrid};
use crate::rng::substream;

const SUM_TOLERANCE: f64 = 1e-9;
const CLAMP_TOLERANCE: f64 = 1e-12;
/// `integrate` fails once any probability drops below this.
pub const POSITIVITY_TOLERANCE: f64 = 1e-8;

/// Occupation probabilities summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityVector(Vec<f64>);

impl ProbabilityVector {
    /// Entries within 1e-12 below zero are clamped to zero.
    pub fn new(mut p: Vec<f64>) -> Result<Self> {
        if p.is_empty() {
            return Err(domain("probability vector is empty"));
        }
        for (k, x) in p.iter_mut().enumerate() {
            if !x.is_finite() || *x < -CLAMP_TOLERANCE {
                return Err(domain(format!("p{} = {x} is not a probability", k + 1)));
            }
            *x = x.max(0.0);
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(domain(format!("probabilities sum to {sum}, expected 1")));
        }
        Ok(ProbabilityVector(p))
    }

    /// All weight on state `k`.
    pub fn basis(n: usize, k: usize) -> Result<Self> {
        if k >= n {
            return Err(domain(format!("state {k} out of range for {n} states")));
        }
        let mut p = vec![0.0; n];
        p[k] = 1.0;
        Ok(ProbabilityVector(p))
    }

    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(domain("probability vector is empty"));
        }
        Ok(ProbabilityVector(vec![1.0 / n as f64; n]))
    }

    fn clamped(mut p: Vec<f64>) -> Self {
        for x in p.iter_mut() {
            if *x < 0.0 && *x >= -CLAMP_TOLERANCE {
                *x = 0.0;
            }
        }
        ProbabilityVector(p)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn get(&self, k: usize) -> f64 {
        self.0[k]
    }

    pub fn max_abs_diff(&self, other: &ProbabilityVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

/// Rate functions `gamma_kl` (transition `l -> k`) of an `n`-state chain.
#[derive(Debug, Clone, PartialEq)]
pub struct RateMatrixSpec {
    n: usize,
    rates: BTreeMap<(usize, usize), RateFunction>,
    topology: String,
}

impl RateMatrixSpec {
    /// `rates` holds `(k, l, gamma_kl)`; repeated pairs are rejected.
    pub fn new(n: usize, rates: Vec<(usize, usize, RateFunction)>, topology: impl Into<String>) -> Result<Self> {
        if n == 0 {
            return Err(structural("a chain needs at least one state"));
        }
        let mut map = BTreeMap::new();
        for (k, l, rate) in rates {
            if k >= n || l >= n {
                return Err(structural(format!("rate ({k}, {l}) refers to a state outside 0..{n}")));
            }
            if k == l {
                return Err(structural(format!("self-rate ({k}, {k}) is not allowed")));
            }
            rate.validate()?;
            if map.insert((k, l), rate).is_some() {
                return Err(structural(format!("rate ({k}, {l}) given twice")));
            }
        }
        Ok(RateMatrixSpec {
            n,
            rates: map,
            topology: topology.into(),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn topology(&self) -> &str {
        &self.topology
    }

    /// `gamma_kl`, if the pair has a rate.
    pub fn rate(&self, k: usize, l: usize) -> Option<&RateFunction> {
        self.rates.get(&(k, l))
    }

    /// `((k, l), gamma_kl)` in lexicographic order.
    pub fn rates(&self) -> impl Iterator<Item = (&(usize, usize), &RateFunction)> {
        self.rates.iter()
    }

    pub fn breakpoints(&self, t0: f64, t1: f64) -> Result<Vec<f64>> {
        let mut all = Vec::new();
        for r in self.rates.values() {
            all.extend(r.breakpoints(t0, t1)?);
        }
        all.sort_by(f64::total_cmp);
        Ok(crate::rates::dedup_sorted(all))
    }

    fn values(&self, t: f64, left: bool) -> Result<Vec<((usize, usize), f64)>> {
        self.rates
            .iter()
            .map(|(&kl, r)| Ok((kl, if left { r.evaluate_left(t)? } else { r.evaluate(t)? })))
            .collect()
    }
}

fn rhs_with(n: usize, rates: &[((usize, usize), f64)], p: &[f64], out: &mut [f64]) {
    out.iter_mut().for_each(|x| *x = 0.0);
    for &((k, l), g) in rates {
        let flow = g * p[l];
        out[k] += flow;
        out[l] -= flow;
    }
    debug_assert_eq!(out.len(), n);
}

/// `dp_k/dt = sum_{l != k} (gamma_kl(t) p_l - gamma_lk(t) p_k)`.
pub fn rate_rhs(spec: &RateMatrixSpec, p: &ProbabilityVector, t: f64) -> Result<Vec<f64>> {
    if p.dim() != spec.n {
        return Err(structural(format!("vector has {} entries, chain {} states", p.dim(), spec.n)));
    }
    let rates = spec.values(t, false)?;
    let mut out = vec![0.0; spec.n];
    rhs_with(spec.n, &rates, &p.0, &mut out);
    Ok(out)
}

/// The generator `Q(t)` of `dP/dt = Q P`.
pub fn q_matrix(spec: &RateMatrixSpec, t: f64) -> Result<DMatrix<f64>> {
    let mut q = DMatrix::zeros(spec.n, spec.n);
    for ((k, l), g) in spec.values(t, false)? {
        q[(k, l)] += g;
        q[(l, l)] -= g;
    }
    Ok(q)
}

/// A negative rate found by [`validate_markov`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NegativeRateIncident {
    pub k: usize,
    pub l: usize,
    pub time: f64,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarkovReport {
    pub is_markov: bool,
    pub incidents: Vec<NegativeRateIncident>,
}

/// Checks `gamma_kl(t) >= 0` for every rate on every grid time.
pub fn validate_markov(spec: &RateMatrixSpec, t_grid: &[f64]) -> Result<MarkovReport> {
    let mut incidents = Vec::new();
    for &t in t_grid {
        for ((k, l), g) in spec.values(t, false)? {
            if g < 0.0 {
                incidents.push(NegativeRateIncident { k, l, time: t, rate: g });
            }
        }
    }
    Ok(MarkovReport {
        is_markov: incidents.is_empty(),
        incidents,
    })
}

/// `|gamma_kl| p_l / p_k`: the positive rate of the reversed transition
/// `k -> l` realizing a negative `gamma_kl`.
pub fn effective_rate_classical(gamma_kl: f64, p: &ProbabilityVector, k: usize, l: usize) -> Result<f64> {
    if gamma_kl >= 0.0 {
        return Err(domain(format!("effective rates need a negative rate, got {gamma_kl}")));
    }
    if k >= p.dim() || l >= p.dim() {
        return Err(domain(format!("states ({k}, {l}) out of range")));
    }
    let (pk, pl) = (p.get(k), p.get(l));
    if pl == 0.0 {
        return Ok(0.0);
    }
    if pk == 0.0 {
        return Err(Error::UndefinedEffectiveRate(pl));
    }
    Ok(gamma_kl.abs() * pl / pk)
}

/// Positive-rate rewriting of the chain at `t`: entry `(k, l)` is the total
/// rate of `l -> k`, i.e. `max(gamma_kl, 0)` plus the effective reversed rate
/// `|gamma_lk| p_k / p_l` when `gamma_lk < 0`. Entries whose effective part
/// is undefined (`p_l = 0 < p_k`) are `None`.
pub fn effective_rate_matrix(spec: &RateMatrixSpec, p: &ProbabilityVector, t: f64) -> Result<DMatrix<Option<f64>>> {
    if p.dim() != spec.n {
        return Err(structural(format!("vector has {} entries, chain {} states", p.dim(), spec.n)));
    }
    let mut m = DMatrix::from_element(spec.n, spec.n, Some(0.0));
    for ((k, l), g) in spec.values(t, false)? {
        if g >= 0.0 {
            m[(k, l)] = m[(k, l)].map(|x| x + g);
        } else {
            // reversed flow k -> l
            let eff = effective_rate_classical(g, p, k, l).ok();
            m[(l, k)] = m[(l, k)].zip(eff).map(|(x, e)| x + e);
        }
    }
    for i in 0..spec.n {
        m[(i, i)] = None;
    }
    Ok(m)
}

/// Probability vectors on a time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassicalSeries {
    pub times: Vec<f64>,
    pub states: Vec<ProbabilityVector>,
}

impl ClassicalSeries {
    /// Index of the stored time within 1e-9 of `t`.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let i = self.times.partition_point(|&s| s < t - 1e-9);
        (i < self.times.len() && (self.times[i] - t).abs() <= 1e-9).then_some(i)
    }

    pub fn at(&self, t: f64) -> Option<&ProbabilityVector> {
        self.index_of(t).map(|i| &self.states[i])
    }
}

/// RK4 on the rate equation with every breakpoint on the grid; all points
/// of the grid are stored.
pub fn integrate(spec: &RateMatrixSpec, p0: &ProbabilityVector, t_end: f64, dt: f64) -> Result<ClassicalSeries> {
    integrate_sampled(spec, p0, t_end, dt, 1, &[])
}

/// As [`integrate`], storing every `stride`-th regular point, the end point,
/// and each time in `stops`.
pub fn integrate_sampled(
    spec: &RateMatrixSpec,
    p0: &ProbabilityVector,
    t_end: f64,
    dt: f64,
    stride: usize,
    stops: &[f64],
) -> Result<ClassicalSeries> {
    if p0.dim() != spec.n {
        return Err(structural(format!("vector has {} entries, chain {} states", p0.dim(), spec.n)));
    }
    if stride == 0 {
        return Err(domain("stride must be at least 1"));
    }
    let grid = TimeGrid::new(t_end, dt, &spec.breakpoints(0.0, t_end)?, stops)?;
    let n = spec.n;
    let mut p = p0.0.clone();
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut tmp = vec![0.0; n];
    let mut times = vec![0.0];
    let mut states = vec![p0.clone()];
    for i in 0..grid.steps() {
        let (t, t_next) = (grid.times[i], grid.times[i + 1]);
        let h = t_next - t;
        let r_start = spec.values(t, false)?;
        let r_mid = spec.values(t + 0.5 * h, false)?;
        let r_end = spec.values(t_next, true)?;
        rhs_with(n, &r_start, &p, &mut k1);
        axpy(&p, &k1, 0.5 * h, &mut tmp);
        rhs_with(n, &r_mid, &tmp, &mut k2);
        axpy(&p, &k2, 0.5 * h, &mut tmp);
        rhs_with(n, &r_mid, &tmp, &mut k3);
        axpy(&p, &k3, h, &mut tmp);
        rhs_with(n, &r_end, &tmp, &mut k4);
        for j in 0..n {
            p[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
        }
        for (j, &x) in p.iter().enumerate() {
            if !x.is_finite() {
                return Err(Error::Blowup { time: t_next });
            }
            if x < -POSITIVITY_TOLERANCE {
                return Err(Error::Positivity {
                    state: j + 1,
                    value: x,
                    time: t_next,
                });
            }
        }
        let stop = stops.iter().any(|s| (s - t_next).abs() <= 1e-9);
        if grid.is_output(i + 1, stride) || stop {
            times.push(t_next);
            states.push(ProbabilityVector::clamped(p.clone()));
        }
    }
    Ok(ClassicalSeries { times, states })
}

fn axpy(x: &[f64], y: &[f64], a: f64, out: &mut [f64]) {
    for ((o, xi), yi) in out.iter_mut().zip(x).zip(y) {
        *o = xi + a * yi;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TwoStateVariant {
    Markov,
    Nonmarkov,
}

impl fmt::Display for TwoStateVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TwoStateVariant::Markov => "markov",
            TwoStateVariant::Nonmarkov => "nonmarkov",
        })
    }
}

impl FromStr for TwoStateVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "markov" => Ok(TwoStateVariant::Markov),
            "nonmarkov" => Ok(TwoStateVariant::Nonmarkov),
            _ => Err(domain(format!("unknown two-state variant `{s}`"))),
        }
    }
}

/// The alternating rate tables `gamma_1`, `gamma_2`: `gamma_1 = Gamma` on
/// `[0, s1)`, then the pair swaps on `[s1, s2)`, `[s2, 2 s2 - s1)`, ...
pub fn two_state_tables(gamma: f64, s1: f64, s2: f64) -> Result<(RateFunction, RateFunction)> {
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(domain(format!("Gamma must be positive, got {gamma}")));
    }
    if !(s1 > 0.0 && s2 > s1 && s2.is_finite()) {
        return Err(domain(format!("need 0 < s1 < s2, got s1 = {s1}, s2 = {s2}")));
    }
    let period = 2.0 * (s2 - s1);
    let g1 = RateFunction::periodic(RateFunction::piecewise(vec![s1, s2], vec![gamma, 0.0, gamma])?, s1, period)?;
    let g2 = RateFunction::periodic(RateFunction::piecewise(vec![s1, s2], vec![0.0, gamma, 0.0])?, s1, period)?;
    Ok((g1, g2))
}

/// Two-state chain; state 1 is index 0. The Markovian variant has
/// `gamma_21 = gamma_1`, `gamma_12 = gamma_2`; the non-Markovian one a single
/// channel `gamma_21 = gamma_1 - gamma_2`.
pub fn build_two_state(variant: TwoStateVariant, gamma: f64, s1: f64, s2: f64) -> Result<RateMatrixSpec> {
    let (g1, g2) = two_state_tables(gamma, s1, s2)?;
    match variant {
        TwoStateVariant::Markov => RateMatrixSpec::new(2, vec![(1, 0, g1), (0, 1, g2)], "two-state markov"),
        TwoStateVariant::Nonmarkov => {
            RateMatrixSpec::new(2, vec![(1, 0, RateFunction::difference(g1, g2))], "two-state nonmarkov")
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RingVariant {
    A,
    B,
    C,
    D,
}

impl RingVariant {
    pub const ALL: [RingVariant; 4] = [RingVariant::A, RingVariant::B, RingVariant::C, RingVariant::D];

    pub fn is_markov(self) -> bool {
        matches!(self, RingVariant::B | RingVariant::D)
    }
}

impl fmt::Display for RingVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RingVariant::A => "a",
            RingVariant::B => "b",
            RingVariant::C => "c",
            RingVariant::D => "d",
        })
    }
}

impl FromStr for RingVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "a" => Ok(RingVariant::A),
            "b" => Ok(RingVariant::B),
            "c" => Ok(RingVariant::C),
            "d" => Ok(RingVariant::D),
            _ => Err(domain(format!("unknown ring variant `{s}`"))),
        }
    }
}

/// `f(t) = (Gamma/2)(1 + sgn cos(Gamma pi t - pi/2))`.
pub fn ring_f(gamma: f64) -> Result<RateFunction> {
    RateFunction::sign_periodic(gamma, -std::f64::consts::FRAC_PI_2, 1)
}

/// `g(t) = (Gamma/2)(1 + sgn cos(Gamma pi t + pi/2))`.
pub fn ring_g(gamma: f64) -> Result<RateFunction> {
    RateFunction::sign_periodic(gamma, std::f64::consts::FRAC_PI_2, 1)
}

/// `n`-state ring. Clockwise is `i -> i+1` (rate `gamma_{i+1,i}`),
/// anti-clockwise `i -> i-1`, indices modulo `n`.
///
/// | variant | clockwise | anti-clockwise |
/// |---|---|---|
/// | a | `f - g` | none |
/// | b | `f` | `g` |
/// | c | `Gamma` | `f - g` |
/// | d | `Gamma + g` | `Gamma - g` |
pub fn build_ring(variant: RingVariant, gamma: f64, n: usize) -> Result<RateMatrixSpec> {
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(domain(format!("Gamma must be positive, got {gamma}")));
    }
    if n < 3 {
        return Err(domain(format!("a ring needs at least 3 states, got {n}")));
    }
    let (f, g) = (ring_f(gamma)?, ring_g(gamma)?);
    let r = RateFunction::difference(f.clone(), g.clone());
    let (cw, acw) = match variant {
        RingVariant::A => (r, None),
        RingVariant::B => (f, Some(g)),
        RingVariant::C => (RateFunction::constant(gamma), Some(r)),
        RingVariant::D => (
            // Gamma + g written as 2 Gamma - (Gamma - g); Gamma - g is g with the sign flipped.
            RateFunction::difference(
                RateFunction::constant(2.0 * gamma),
                RateFunction::sign_periodic(gamma, std::f64::consts::FRAC_PI_2, -1)?,
            ),
            Some(RateFunction::difference(RateFunction::constant(gamma), g)),
        ),
    };
    let mut rates = Vec::new();
    for i in 0..n {
        rates.push(((i + 1) % n, i, cw.clone()));
        if let Some(a) = &acw {
            rates.push(((i + n - 1) % n, i, a.clone()));
        }
    }
    RateMatrixSpec::new(n, rates, format!("ring ({variant})"))
}

/// Integer occupations of the chain states.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassicalEnsemble {
    counts: Vec<u64>,
    total: u64,
}

impl ClassicalEnsemble {
    pub fn new(counts: Vec<u64>) -> Result<Self> {
        let total = counts.iter().sum();
        if counts.is_empty() || total == 0 {
            return Err(domain("ensemble must hold at least one member"));
        }
        Ok(ClassicalEnsemble { counts, total })
    }

    /// Rounds `n p` to integers summing to `n` (largest remainders first).
    pub fn from_probabilities(p: &ProbabilityVector, n: u64) -> Result<Self> {
        let exact: Vec<f64> = p.0.iter().map(|x| x * n as f64).collect();
        let mut counts: Vec<u64> = exact.iter().map(|x| x.floor() as u64).collect();
        let mut missing = n.saturating_sub(counts.iter().sum());
        let mut order: Vec<usize> = (0..counts.len()).collect();
        order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())));
        for &k in order.iter().cycle() {
            if missing == 0 {
                break;
            }
            counts[k] += 1;
            missing -= 1;
        }
        ClassicalEnsemble::new(counts)
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn fractions(&self) -> Vec<f64> {
        self.counts.iter().map(|&c| c as f64 / self.total as f64).collect()
    }
}

/// Members moved `from -> to` (0-based) during the step ending at `time`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChainEvent {
    pub time: f64,
    pub from: usize,
    pub to: usize,
    pub count: u64,
}

/// Time-ordered transitions of one sampled ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainTrajectory {
    pub seed: u64,
    pub replicate: u64,
    pub events: Vec<ChainEvent>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledChain {
    pub times: Vec<f64>,
    pub ensembles: Vec<ClassicalEnsemble>,
    pub trajectory: ChainTrajectory,
    /// Largest per-member step probability without occupation ratios.
    pub max_bare_probability: f64,
    /// Largest per-member step probability including occupation ratios.
    pub max_probability: f64,
    /// State-steps whose ratio-weighted total exceeded one and was rescaled.
    pub saturated: u64,
}

/// Samples the chain with `counts0.total()` members on a fixed grid; see the
/// module docs for the rate convention.
///
/// Per step a member in `k` moves to `j` with probability `gamma_jk dt` when
/// `gamma_jk > 0`; a negative `gamma_kl` instead moves members `k -> l` with
/// probability `|gamma_kl| (n_l / n_k) dt`. All moves use the counts at the
/// start of the step. Every `stride`-th regular point is stored.
pub fn sample_ensemble(
    spec: &RateMatrixSpec,
    counts0: &ClassicalEnsemble,
    t_end: f64,
    dt: f64,
    seed: u64,
    stride: usize,
) -> Result<SampledChain> {
    sample_replicate(spec, counts0, t_end, dt, seed, 0, stride)
}

/// Independent replicates `0..replicates`, one substream each, run in parallel.
pub fn sample_replicates(
    spec: &RateMatrixSpec,
    counts0: &ClassicalEnsemble,
    t_end: f64,
    dt: f64,
    seed: u64,
    replicates: u64,
    stride: usize,
) -> Result<Vec<SampledChain>> {
    (0..replicates)
        .into_par_iter()
        .map(|r| sample_replicate(spec, counts0, t_end, dt, seed, r, stride))
        .collect()
}

fn sample_replicate(
    spec: &RateMatrixSpec,
    counts0: &ClassicalEnsemble,
    t_end: f64,
    dt: f64,
    seed: u64,
    replicate: u64,
    stride: usize,
) -> Result<SampledChain> {
    if counts0.counts.len() != spec.n {
        return Err(structural(format!(
            "ensemble has {} states, chain {}",
            counts0.counts.len(),
            spec.n
        )));
    }
    if stride == 0 {
        return Err(domain("stride must be at least 1"));
    }
    let grid = TimeGrid::new(t_end, dt, &spec.breakpoints(0.0, t_end)?, &[])?;
    let mut rng = substream(seed, replicate);
    let mut counts = counts0.counts.clone();
    let mut out = SampledChain {
        times: vec![0.0],
        ensembles: vec![counts0.clone()],
        trajectory: ChainTrajectory {
            seed,
            replicate,
            events: Vec::new(),
        },
        max_bare_probability: 0.0,
        max_probability: 0.0,
        saturated: 0,
    };
    // per source state: (probability, destination)
    let mut options: Vec<Vec<(f64, usize)>> = vec![Vec::new(); spec.n];
    for i in 0..grid.steps() {
        let (t, t_next) = (grid.times[i], grid.times[i + 1]);
        let h = t_next - t;
        options.iter_mut().for_each(Vec::clear);
        let mut bare = vec![0.0; spec.n];
        for ((k, l), g) in spec.values(t, false)? {
            if g > 0.0 {
                options[l].push((g * h, k));
                bare[l] += g * h;
            } else if g < 0.0 {
                bare[k] += g.abs() * h;
                if counts[k] > 0 && counts[l] > 0 {
                    options[k].push((g.abs() * counts[l] as f64 / counts[k] as f64 * h, l));
                }
            }
        }
        let start = counts.clone();
        for (from, opts) in options.iter_mut().enumerate() {
            out.max_bare_probability = out.max_bare_probability.max(bare[from]);
            if bare[from] > MAX_STEP_PROBABILITY {
                return Err(Error::StepSize {
                    time: t,
                    detail: format!(
                        "jump probability {:.4} per member and step exceeds {MAX_STEP_PROBABILITY}; reduce dt",
                        bare[from]
                    ),
                });
            }
            let n_from = start[from];
            if n_from == 0 {
                continue;
            }
            let total: f64 = opts.iter().map(|o| o.0).sum();
            out.max_probability = out.max_probability.max(total);
            if total > 1.0 {
                out.saturated += 1;
                opts.iter_mut().for_each(|o| o.0 /= total);
            }
            let mut remaining = n_from;
            let mut remaining_prob = 1.0;
            for &(p, to) in opts.iter() {
                if remaining == 0 {
                    break;
                }
                let conditional = (p / remaining_prob).clamp(0.0, 1.0);
                remaining_prob -= p;
                let moved = if conditional >= 1.0 {
                    remaining
                } else {
                    Binomial::new(remaining, conditional)
                        .map_err(|e| domain(format!("binomial draw failed: {e}")))?
                        .sample(&mut rng)
                };
                if moved == 0 {
                    continue;
                }
                remaining -= moved;
                counts[from] -= moved;
                counts[to] += moved;
                out.trajectory.events.push(ChainEvent {
                    time: t_next,
                    from,
                    to,
                    count: moved,
                });
            }
        }
        if grid.is_output(i + 1, stride) {
            out.times.push(t_next);
            out.ensembles.push(ClassicalEnsemble {
                counts: counts.clone(),
                total: counts0.total,
            });
        }
    }
    Ok(out)
}

/// Shared by the tests of this crate: the rate tables at `Gamma = 0.4`,
/// `s1 = 5`, `s2 = 10`.
#[cfg(test)]
pub(crate) fn default_two_state(variant: TwoStateVariant) -> RateMatrixSpec {
    build_two_state(variant, 0.4, 5.0, 10.0).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;
    use proptest::prelude::*;

    fn pv(p: &[f64]) -> ProbabilityVector {
        ProbabilityVector::new(p.to_vec()).unwrap()
    }

    #[test]
    fn rhs_examples() {
        let markov = default_two_state(TwoStateVariant::Markov);
        assert_eq!(rate_rhs(&markov, &pv(&[1.0, 0.0]), 1.0).unwrap(), vec![-0.4, 0.4]);
        let sym = RateMatrixSpec::new(
            2,
            vec![(0, 1, RateFunction::constant(0.3)), (1, 0, RateFunction::constant(0.3))],
            "sym",
        )
        .unwrap();
        assert_eq!(rate_rhs(&sym, &pv(&[0.5, 0.5]), 0.0).unwrap(), vec![0.0, 0.0]);
        let zero = RateMatrixSpec::new(3, vec![(0, 1, RateFunction::constant(0.0))], "zero").unwrap();
        assert_eq!(rate_rhs(&zero, &pv(&[0.2, 0.3, 0.5]), 4.0).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn q_matrix_examples() {
        let spec = RateMatrixSpec::new(2, vec![(1, 0, RateFunction::constant(0.4))], "decay").unwrap();
        let q = q_matrix(&spec, 0.0).unwrap();
        assert_eq!(q, DMatrix::from_row_slice(2, 2, &[-0.4, 0.0, 0.4, 0.0]));
        let zero = RateMatrixSpec::new(2, vec![], "empty").unwrap();
        assert_eq!(q_matrix(&zero, 0.0).unwrap(), DMatrix::zeros(2, 2));
    }

    #[test]
    fn structural_errors() {
        assert!(RateMatrixSpec::new(2, vec![(0, 0, RateFunction::constant(1.0))], "").is_err());
        assert!(RateMatrixSpec::new(2, vec![(0, 2, RateFunction::constant(1.0))], "").is_err());
        let spec = default_two_state(TwoStateVariant::Markov);
        assert!(rate_rhs(&spec, &pv(&[0.2, 0.3, 0.5]), 0.0).is_err());
        assert!(ProbabilityVector::new(vec![0.5, 0.6]).is_err());
        assert_eq!(ProbabilityVector::new(vec![-1e-13, 1.0]).unwrap().get(0), 0.0);
        assert!(ProbabilityVector::new(vec![-1e-6, 1.0 + 1e-6]).is_err());
    }

    #[test]
    fn markov_validation() {
        let grid: Vec<f64> = (0..=120).map(|i| i as f64 * 0.1).collect();
        assert!(validate_markov(&default_two_state(TwoStateVariant::Markov), &grid).unwrap().is_markov);
        let report = validate_markov(&default_two_state(TwoStateVariant::Nonmarkov), &grid).unwrap();
        assert!(!report.is_markov);
        assert!(report.incidents.iter().any(|i| i.time >= 5.0 && i.time < 10.0));
        assert!(report.incidents.iter().all(|i| i.time >= 5.0 - 1e-12));
        assert!(report
            .incidents
            .iter()
            .filter(|i| i.time <= 12.0)
            .all(|i| i.time < 10.0 - 1e-12));
        let zero = RateMatrixSpec::new(2, vec![(0, 1, RateFunction::constant(0.0))], "zero").unwrap();
        assert!(validate_markov(&zero, &grid).unwrap().is_markov);
        assert!(validate_markov(&build_ring(RingVariant::B, 0.5, 4).unwrap(), &grid).unwrap().is_markov);
    }

    #[test]
    fn effective_rate_examples() {
        assert!((effective_rate_classical(-0.4, &pv(&[0.5, 0.25, 0.25]), 0, 1).unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(effective_rate_classical(-0.4, &pv(&[1.0, 0.0]), 0, 1).unwrap(), 0.0);
        assert!((effective_rate_classical(-0.4, &pv(&[0.5, 0.5]), 0, 1).unwrap() - 0.4).abs() < 1e-15);
        assert!(matches!(
            effective_rate_classical(-0.4, &pv(&[0.0, 1.0]), 0, 1),
            Err(Error::UndefinedEffectiveRate(_))
        ));
        assert!(effective_rate_classical(0.4, &pv(&[0.5, 0.5]), 0, 1).is_err());
    }

    #[test]
    fn two_state_builders() {
        let markov = default_two_state(TwoStateVariant::Markov);
        assert_eq!(markov.rate(1, 0).unwrap().evaluate(2.0).unwrap(), 0.4);
        assert_eq!(markov.rate(0, 1).unwrap().evaluate(2.0).unwrap(), 0.0);
        let nm = default_two_state(TwoStateVariant::Nonmarkov);
        let gamma = nm.rate(1, 0).unwrap();
        assert_eq!(gamma.evaluate(7.0).unwrap(), -0.4);
        assert!(gamma.integral(0.0, 10.0).unwrap().abs() < 1e-12);
        assert!(build_two_state(TwoStateVariant::Markov, 0.4, 10.0, 5.0).is_err());
        assert!(build_two_state(TwoStateVariant::Markov, 0.4, 0.0, 5.0).is_err());
    }

    #[test]
    fn ring_builders() {
        let a = build_ring(RingVariant::A, 0.5, 4).unwrap();
        let cw = a.rate(1, 0).unwrap();
        assert_eq!(cw.evaluate(1.0).unwrap(), 0.5);
        assert_eq!(cw.evaluate(3.0).unwrap(), -0.5);
        assert!(a.rate(3, 0).is_none());
        let d = build_ring(RingVariant::D, 0.5, 4).unwrap();
        let cw = d.rate(0, 3).unwrap();
        let acw = d.rate(2, 3).unwrap();
        for i in 0..80 {
            let t = 0.05 + i as f64 * 0.1;
            let (c, a) = (cw.evaluate(t).unwrap(), acw.evaluate(t).unwrap());
            assert!(c == 0.5 || c == 1.0, "{c} at {t}");
            assert!(a == 0.5 || a == 0.0);
            assert!((c + a - 1.0).abs() < 1e-15);
        }
        assert_eq!(cw.evaluate(1.0).unwrap(), 0.5);
        assert_eq!(cw.evaluate(3.0).unwrap(), 1.0);
        assert!(build_ring(RingVariant::A, 0.0, 4).is_err());
        assert!(build_ring(RingVariant::A, 0.5, 2).is_err());
    }

    #[test]
    fn integrate_examples() {
        let nm = default_two_state(TwoStateVariant::Nonmarkov);
        let zero = integrate(&nm, &pv(&[0.0, 1.0]), 12.0, 1e-3).unwrap();
        assert!(zero.states.iter().all(|p| p.get(0).abs() < 1e-12));
        let one = integrate(&nm, &pv(&[1.0, 0.0]), 12.0, 1e-3).unwrap();
        assert!((one.at(10.0).unwrap().get(0) - 1.0).abs() < 1e-9);
        let ring = build_ring(RingVariant::A, 0.5, 4).unwrap();
        let series = integrate(&ring, &ProbabilityVector::basis(4, 0).unwrap(), 4.0, 1e-3).unwrap();
        assert!(series.at(4.0).unwrap().max_abs_diff(&ProbabilityVector::basis(4, 0).unwrap()) < 1e-6);
    }

    #[test]
    fn positivity_violation_is_reported() {
        // a negative rate out of an empty state drives p1 below zero
        let spec = RateMatrixSpec::new(2, vec![(0, 1, RateFunction::constant(-0.5))], "bad").unwrap();
        let err = integrate(&spec, &pv(&[0.0, 1.0]), 1.0, 1e-2).unwrap_err();
        assert!(matches!(err, Error::Positivity { state: 1, .. }), "{err:?}");
    }

    #[test]
    fn sampler_examples() {
        let zero = RateMatrixSpec::new(3, vec![(0, 1, RateFunction::constant(0.0))], "zero").unwrap();
        let c0 = ClassicalEnsemble::new(vec![5, 3, 2]).unwrap();
        let run = sample_ensemble(&zero, &c0, 2.0, 1e-2, 1, 10).unwrap();
        assert!(run.ensembles.iter().all(|e| e == &c0));

        let nm = default_two_state(TwoStateVariant::Nonmarkov);
        for seed in 0..5 {
            let run = sample_ensemble(&nm, &ClassicalEnsemble::new(vec![0, 1000]).unwrap(), 12.0, 1e-2, seed, 1).unwrap();
            assert!(run.ensembles.iter().all(|e| e.counts()[0] == 0));
        }
    }

    #[test]
    fn sampler_is_deterministic_and_conserves_members() {
        let ring = build_ring(RingVariant::C, 0.5, 4).unwrap();
        let c0 = ClassicalEnsemble::new(vec![1000, 0, 0, 0]).unwrap();
        let a = sample_ensemble(&ring, &c0, 10.0, 1e-2, 9, 10).unwrap();
        let b = sample_ensemble(&ring, &c0, 10.0, 1e-2, 9, 10).unwrap();
        assert_eq!(a, b);
        assert!(a.ensembles.iter().all(|e| e.counts().iter().sum::<u64>() == 1000));
        let c = sample_ensemble(&ring, &c0, 10.0, 1e-2, 10, 10).unwrap();
        assert_ne!(a.ensembles, c.ensembles);
        let events = &a.trajectory.events;
        assert!(events.windows(2).all(|w| w[0].time <= w[1].time));
    }

    #[test]
    fn sampler_rejects_coarse_steps() {
        let ring = build_ring(RingVariant::D, 0.5, 4).unwrap();
        let c0 = ClassicalEnsemble::new(vec![10, 0, 0, 0]).unwrap();
        assert!(matches!(sample_ensemble(&ring, &c0, 1.0, 0.5, 0, 1), Err(Error::StepSize { .. })));
    }

    #[test]
    fn rounding_to_counts() {
        let e = ClassicalEnsemble::from_probabilities(&pv(&[1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]), 10).unwrap();
        assert_eq!(e.counts().iter().sum::<u64>(), 10);
        assert_eq!(e.counts(), &[4, 3, 3]);
    }

    fn arb_spec() -> impl Strategy<Value = (RateMatrixSpec, ProbabilityVector, f64)> {
        (2usize..6).prop_flat_map(|n| {
            (
                proptest::collection::vec(((0..n), (0..n), -1.0f64..1.0), 0..12),
                proptest::collection::vec(0.01f64..1.0, n),
                0.0f64..10.0,
            )
                .prop_map(move |(entries, w, t)| {
                    let mut seen = std::collections::BTreeSet::new();
                    let rates = entries
                        .into_iter()
                        .filter(|(k, l, _)| k != l && seen.insert((*k, *l)))
                        .map(|(k, l, v)| (k, l, RateFunction::constant(v)))
                        .collect();
                    let sum: f64 = w.iter().sum();
                    let p = ProbabilityVector::new(w.iter().map(|x| x / sum).collect()).unwrap();
                    (RateMatrixSpec::new(n, rates, "random").unwrap(), p, t)
                })
        })
    }

    proptest! {
        #[test]
        fn rhs_conserves_probability((spec, p, t) in arb_spec()) {
            let rhs = rate_rhs(&spec, &p, t).unwrap();
            prop_assert!(rhs.iter().sum::<f64>().abs() < 1e-12);
        }

        #[test]
        fn q_matrix_reproduces_rhs((spec, p, t) in arb_spec()) {
            let q = q_matrix(&spec, t).unwrap();
            let qp = &q * DVector::from_column_slice(p.as_slice());
            let rhs = rate_rhs(&spec, &p, t).unwrap();
            for k in 0..spec.n() {
                prop_assert!((qp[k] - rhs[k]).abs() < 1e-12);
                prop_assert!(q.column(k).sum().abs() < 1e-12);
            }
        }

        #[test]
        fn sampler_conserves_members(seed in 0u64..1000, n0 in 0u64..50, n1 in 0u64..50) {
            prop_assume!(n0 + n1 > 0);
            let nm = default_two_state(TwoStateVariant::Nonmarkov);
            let run = sample_ensemble(&nm, &ClassicalEnsemble::new(vec![n0, n1]).unwrap(), 12.0, 0.05, seed, 4).unwrap();
            for e in &run.ensembles {
                prop_assert_eq!(e.counts().iter().sum::<u64>(), n0 + n1);
            }
            if n0 == 0 {
                prop_assert!(run.ensembles.iter().all(|e| e.counts()[0] == 0));
            }
        }
    }
}
