//! Monte Carlo wave-function unraveling for non-negative rates.
//!
//! Each step either applies the first-order non-Hermitian evolution
//! `(1 - i H_eff dt)` and renormalizes, or performs a jump `L_i psi / |L_i psi|`.
//! Jump selection uses one uniform draw per step: `[0, 1)` is partitioned into
//! one subinterval of length `p_i = gamma_i dt <L_i^+ L_i>` per channel, in
//! channel order, followed by the no-jump remainder.

use std::collections::HashMap;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{domain, structural, Error, Result};
use crate::integrator::PropagationResult;
use crate::quantum::{CMatrix, Channel, DensityMatrix, StateVector, TimeLocalGenerator, C64};
use crate::rates::TimeGrid;
use crate::rng::{substream, SimRng};

/// Largest total jump probability allowed in one step.
pub const MAX_STEP_PROBABILITY: f64 = 0.1;

const NORM_FLOOR: f64 = 1e-12;
const I: C64 = C64::new(0.0, 1.0);
/// Trajectories per reduction chunk. Fixed so the floating-point summation
/// order does not depend on the worker count.
const CHUNK: usize = 128;

#[derive(Debug, Clone, PartialEq)]
pub struct JumpRecord {
    pub time: f64,
    pub channel: String,
}

/// One stochastic realization.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub seed: u64,
    pub index: u64,
    pub times: Vec<f64>,
    pub states: Vec<StateVector>,
    pub jump_records: Vec<JumpRecord>,
}

#[derive(Debug, Clone, Copy)]
pub struct EnsembleOptions {
    pub t_end: f64,
    pub dt: f64,
    pub trajectories: usize,
    pub seed: u64,
    /// Store every `stride`-th regular grid point (plus the final time).
    pub stride: usize,
}

impl EnsembleOptions {
    pub fn new(t_end: f64, dt: f64, trajectories: usize, seed: u64) -> Self {
        EnsembleOptions {
            t_end,
            dt,
            trajectories,
            seed,
            stride: 1,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride.max(1);
        self
    }

    pub(crate) fn check(&self) -> Result<()> {
        if self.trajectories == 0 {
            return Err(domain("ensemble size must be at least 1"));
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(domain(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.t_end.is_finite() && self.t_end >= 0.0) {
            return Err(domain(format!("t_end must be >= 0, got {}", self.t_end)));
        }
        Ok(())
    }
}

/// Ensemble average plus jump statistics.
#[derive(Debug, Clone)]
pub struct EnsembleRun {
    pub result: PropagationResult,
    /// Fraction of trajectories with at least one jump by each stored time.
    pub jumped_fraction: Vec<f64>,
    pub total_jumps: u64,
    pub max_step_probability: f64,
}

fn check_rates_non_negative(g: &TimeLocalGenerator, rates: &[f64], t: f64) -> Result<()> {
    for (c, &r) in g.channels().iter().zip(rates) {
        if r < 0.0 {
            return Err(Error::NegativeRate {
                channel: c.label().to_string(),
                time: t,
            });
        }
    }
    Ok(())
}

fn check_dim(g: &TimeLocalGenerator, psi: &StateVector) -> Result<()> {
    if psi.dim() != g.dim() {
        return Err(structural(format!("state has dimension {}, generator {}", psi.dim(), g.dim())));
    }
    Ok(())
}

/// `(1 - i H_eff dt) psi`, renormalized.
pub fn deterministic_step(g: &TimeLocalGenerator, psi: &StateVector, t: f64, dt: f64) -> Result<StateVector> {
    check_dim(g, psi)?;
    let rates = g.rates_at(t)?;
    check_rates_non_negative(g, &rates, t)?;
    no_jump_evolution(g, psi, &rates, t, dt)
}

/// Deterministic step without the sign restriction on the rates.
pub(crate) fn no_jump_evolution(
    g: &TimeLocalGenerator,
    psi: &StateVector,
    rates: &[f64],
    t: f64,
    dt: f64,
) -> Result<StateVector> {
    evolve_with(&step_operator(g, rates, dt), psi, t)
}

/// Applies a precomputed `1 - i H_eff dt` and renormalizes.
pub(crate) fn evolve_with(step: &CMatrix, psi: &StateVector, t: f64) -> Result<StateVector> {
    let phi = step * psi.amplitudes();
    let norm_sqr = phi.norm_squared();
    if !(norm_sqr.is_finite() && norm_sqr >= NORM_FLOOR) {
        return Err(Error::StepSize {
            time: t,
            detail: format!("state norm^2 {norm_sqr:e} underflowed during the no-jump step"),
        });
    }
    Ok(StateVector::from_normalized(phi.unscale(norm_sqr.sqrt())))
}

pub(crate) fn step_operator(g: &TimeLocalGenerator, rates: &[f64], dt: f64) -> CMatrix {
    let d = g.dim();
    CMatrix::identity(d, d) - g.effective_hamiltonian_with_rates(rates) * (I * dt)
}

/// `gamma_i(t) dt <psi| L_i^+ L_i |psi>` for one channel.
pub fn jump_probability(g: &TimeLocalGenerator, psi: &StateVector, channel: usize, t: f64, dt: f64) -> Result<f64> {
    check_dim(g, psi)?;
    let c = g
        .channels()
        .get(channel)
        .ok_or_else(|| domain(format!("no channel with index {channel}")))?;
    let rate = c.rate().evaluate(t)?;
    if rate < 0.0 {
        return Err(Error::NegativeRate {
            channel: c.label().to_string(),
            time: t,
        });
    }
    let p = rate * dt * psi.expectation(c.number_operator()).re;
    if p > MAX_STEP_PROBABILITY {
        return Err(step_error(t, p));
    }
    Ok(p)
}

/// Jump probabilities for every channel; fails if their sum exceeds
/// [`MAX_STEP_PROBABILITY`].
pub fn jump_probabilities(g: &TimeLocalGenerator, psi: &StateVector, t: f64, dt: f64) -> Result<Vec<f64>> {
    check_dim(g, psi)?;
    let rates = g.rates_at(t)?;
    check_rates_non_negative(g, &rates, t)?;
    let ps: Vec<f64> = g
        .channels()
        .iter()
        .zip(&rates)
        .map(|(c, r)| r * dt * psi.expectation(c.number_operator()).re)
        .collect();
    let total: f64 = ps.iter().sum();
    if total > MAX_STEP_PROBABILITY {
        return Err(step_error(t, total));
    }
    Ok(ps)
}

fn step_error(t: f64, p: f64) -> Error {
    Error::StepSize {
        time: t,
        detail: format!("jump probability {p:.4} per step exceeds {MAX_STEP_PROBABILITY}; reduce dt"),
    }
}

/// `L psi / |L psi|`.
pub fn apply_jump(channel: &Channel, psi: &StateVector) -> Result<StateVector> {
    if psi.dim() != channel.dim() {
        return Err(structural("state and Lindblad operator dimensions differ"));
    }
    let out = channel.operator() * psi.amplitudes();
    let norm = out.norm();
    if !(norm > 1e-12) {
        return Err(Error::ImpossibleJump {
            channel: channel.label().to_string(),
            norm,
        });
    }
    Ok(StateVector::from_normalized(out.unscale(norm)))
}

/// Per-step data shared by every trajectory.
struct Plan {
    grid: TimeGrid,
    /// Output slot of each grid point.
    output: Vec<Option<usize>>,
    n_out: usize,
    rates: Vec<Vec<f64>>,
    propagator: Vec<usize>,
    propagators: Vec<CMatrix>,
    operators: Vec<CMatrix>,
}

impl Plan {
    fn new(g: &TimeLocalGenerator, opts: &EnsembleOptions) -> Result<Self> {
        opts.check()?;
        let grid = TimeGrid::new(opts.t_end, opts.dt, &g.breakpoints(0.0, opts.t_end)?, &[])?;
        let mut output = Vec::with_capacity(grid.times.len());
        let mut n_out = 0;
        for i in 0..grid.times.len() {
            if grid.is_output(i, opts.stride) {
                output.push(Some(n_out));
                n_out += 1;
            } else {
                output.push(None);
            }
        }
        let mut cache: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut propagators = Vec::new();
        let mut propagator = Vec::with_capacity(grid.steps());
        let mut rates = Vec::with_capacity(grid.steps());
        for i in 0..grid.steps() {
            let t = grid.times[i];
            let h = grid.times[i + 1] - t;
            let r = g.rates_at(t)?;
            check_rates_non_negative(g, &r, t)?;
            let key: Vec<u64> = r.iter().chain(std::iter::once(&h)).map(|x| x.to_bits()).collect();
            let idx = *cache.entry(key).or_insert_with(|| {
                propagators.push(step_operator(g, &r, h));
                propagators.len() - 1
            });
            propagator.push(idx);
            rates.push(r);
        }
        Ok(Plan {
            grid,
            output,
            n_out,
            rates,
            propagator,
            propagators,
            operators: g.channels().iter().map(|c| c.operator().clone()).collect(),
        })
    }

    /// Runs one trajectory, reporting stored states and jumps through the
    /// callbacks. Returns the largest per-step jump probability seen.
    fn run(
        &self,
        psi0: &StateVector,
        rng: &mut SimRng,
        mut on_output: impl FnMut(usize, &[C64]),
        mut on_jump: impl FnMut(f64, usize),
    ) -> Result<f64> {
        let d = psi0.dim();
        let n_ch = self.operators.len();
        let mut psi: Vec<C64> = psi0.amplitudes().iter().copied().collect();
        let mut next = vec![C64::new(0.0, 0.0); d];
        let mut jumped = vec![C64::new(0.0, 0.0); d * n_ch];
        let mut probs = vec![0.0; n_ch];
        let mut max_p: f64 = 0.0;
        if let Some(slot) = self.output[0] {
            on_output(slot, &psi);
        }
        for i in 0..self.grid.steps() {
            let t = self.grid.times[i];
            let h = self.grid.times[i + 1] - t;
            let mut total = 0.0;
            for (c, op) in self.operators.iter().enumerate() {
                let rate = self.rates[i][c];
                let buf = &mut jumped[c * d..(c + 1) * d];
                let w = if rate > 0.0 { matvec(op, &psi, buf) } else { 0.0 };
                probs[c] = rate * h * w;
                total += probs[c];
            }
            max_p = max_p.max(total);
            if total > MAX_STEP_PROBABILITY {
                return Err(step_error(t, total));
            }
            let u: f64 = rng.random();
            if u < total {
                let mut acc = 0.0;
                let mut chosen = n_ch - 1;
                for (c, p) in probs.iter().enumerate() {
                    acc += p;
                    if u < acc && *p > 0.0 {
                        chosen = c;
                        break;
                    }
                }
                let buf = &jumped[chosen * d..(chosen + 1) * d];
                let norm = buf.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
                for (dst, src) in psi.iter_mut().zip(buf) {
                    *dst = src / norm;
                }
                on_jump(self.grid.times[i + 1], chosen);
            } else {
                let norm_sqr = matvec(&self.propagators[self.propagator[i]], &psi, &mut next);
                if !(norm_sqr.is_finite() && norm_sqr >= NORM_FLOOR) {
                    return Err(Error::StepSize {
                        time: t,
                        detail: format!("state norm^2 {norm_sqr:e} underflowed during the no-jump step"),
                    });
                }
                let inv = 1.0 / norm_sqr.sqrt();
                for (dst, src) in psi.iter_mut().zip(&next) {
                    *dst = src * inv;
                }
            }
            if let Some(slot) = self.output[i + 1] {
                on_output(slot, &psi);
            }
        }
        Ok(max_p)
    }

    fn output_times(&self) -> Vec<f64> {
        self.grid
            .times
            .iter()
            .zip(&self.output)
            .filter_map(|(t, o)| o.map(|_| *t))
            .collect()
    }
}

/// `out = m x`; returns `|out|^2`.
fn matvec(m: &CMatrix, x: &[C64], out: &mut [C64]) -> f64 {
    let d = x.len();
    out.iter_mut().for_each(|z| *z = C64::new(0.0, 0.0));
    let data = m.as_slice();
    for (j, xj) in x.iter().enumerate() {
        if *xj == C64::new(0.0, 0.0) {
            continue;
        }
        let col = &data[j * d..(j + 1) * d];
        for (o, a) in out.iter_mut().zip(col) {
            *o += a * xj;
        }
    }
    out.iter().map(|z| z.norm_sqr()).sum()
}

/// Trajectory `index` of the ensemble seeded with `opts.seed`.
pub fn run_trajectory(
    g: &TimeLocalGenerator,
    psi0: &StateVector,
    opts: &EnsembleOptions,
    index: u64,
) -> Result<Trajectory> {
    check_dim(g, psi0)?;
    let plan = Plan::new(g, opts)?;
    let mut states = Vec::with_capacity(plan.n_out);
    let mut jump_records = Vec::new();
    let mut rng = substream(opts.seed, index);
    plan.run(
        psi0,
        &mut rng,
        |_, psi| states.push(StateVector::from_normalized(crate::quantum::CVector::from_column_slice(psi))),
        |time, c| {
            jump_records.push(JumpRecord {
                time,
                channel: g.channels()[c].label().to_string(),
            })
        },
    )?;
    Ok(Trajectory {
        seed: opts.seed,
        index,
        times: plan.output_times(),
        states,
        jump_records,
    })
}

struct Partial {
    rho: Vec<C64>,
    jumped: Vec<u64>,
    jumps: u64,
    max_p: f64,
}

/// `rho(t) = (1/N) sum_k |psi_k(t)><psi_k(t)|` over `N` independent
/// trajectories; trajectory `k` uses substream `k` of `opts.seed`.
pub fn run_ensemble(g: &TimeLocalGenerator, psi0: &StateVector, opts: &EnsembleOptions) -> Result<EnsembleRun> {
    check_dim(g, psi0)?;
    let plan = Plan::new(g, opts)?;
    let d = g.dim();
    let n = opts.trajectories;
    let chunks: Vec<(usize, usize)> = (0..n).step_by(CHUNK).map(|s| (s, (s + CHUNK).min(n))).collect();

    let partials: Vec<Partial> = chunks
        .par_iter()
        .map(|&(start, end)| {
            let mut part = Partial {
                rho: vec![C64::new(0.0, 0.0); plan.n_out * d * d],
                jumped: vec![0; plan.n_out],
                jumps: 0,
                max_p: 0.0,
            };
            for k in start..end {
                let mut rng = substream(opts.seed, k as u64);
                let jumps = std::cell::Cell::new(0u64);
                let rho = &mut part.rho;
                let jumped = &mut part.jumped;
                let max_p = plan.run(
                    psi0,
                    &mut rng,
                    |slot, psi| {
                        let block = &mut rho[slot * d * d..(slot + 1) * d * d];
                        for j in 0..d {
                            for i in 0..d {
                                block[i + j * d] += psi[i] * psi[j].conj();
                            }
                        }
                        if jumps.get() > 0 {
                            jumped[slot] += 1;
                        }
                    },
                    |_, _| jumps.set(jumps.get() + 1),
                )?;
                part.jumps += jumps.get();
                part.max_p = part.max_p.max(max_p);
            }
            Ok(part)
        })
        .collect::<Result<_>>()?;

    let mut rho = vec![C64::new(0.0, 0.0); plan.n_out * d * d];
    let mut jumped = vec![0u64; plan.n_out];
    let mut total_jumps = 0;
    let mut max_p: f64 = 0.0;
    for p in &partials {
        for (a, b) in rho.iter_mut().zip(&p.rho) {
            *a += b;
        }
        for (a, b) in jumped.iter_mut().zip(&p.jumped) {
            *a += b;
        }
        total_jumps += p.jumps;
        max_p = max_p.max(p.max_p);
    }
    let scale = 1.0 / n as f64;
    let states = rho
        .chunks(d * d)
        .map(|block| DensityMatrix::from_raw(CMatrix::from_column_slice(d, d, block).scale(scale)))
        .collect();
    Ok(EnsembleRun {
        result: PropagationResult {
            times: plan.output_times(),
            states,
            step: opts.dt * opts.stride.max(1) as f64,
        },
        jumped_fraction: jumped.iter().map(|&c| c as f64 * scale).collect(),
        total_jumps,
        max_step_probability: max_p,
    })
}
