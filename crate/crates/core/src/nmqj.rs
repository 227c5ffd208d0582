//! Non-Markovian quantum jumps.
//!
//! The ensemble is kept as distinct state vectors with integer occupations.
//! Channels with a positive rate jump forward exactly as in the Markovian
//! method. While a channel rate is negative its jumps run backwards: a member
//! in the source state `psi_a = L psi_b / |L psi_b|` returns to the target
//! `psi_b` with probability `(N_b / N_a) |gamma| dt <psi_b|L^+ L|psi_b>`, which
//! vanishes when the target is empty.
//!
//! All jumps of a step are sampled from the occupations at the start of the
//! step; the jump results are matched against the members at that same time,
//! then every member advances by the no-jump evolution.

use log::{debug, warn};
use rand_distr::{Binomial, Distribution};

use crate::error::{domain, structural, Error, Result};
use crate::integrator::PropagationResult;
use crate::mcwf::{evolve_with, step_operator, EnsembleOptions, MAX_STEP_PROBABILITY};
use crate::quantum::{CMatrix, Channel, DensityMatrix, StateVector, TimeLocalGenerator, PHASE_MATCH_TOLERANCE};
use crate::rates::TimeGrid;
use crate::rng::{substream, SimRng};

#[derive(Debug, Clone, PartialEq)]
pub struct Member {
    pub state: StateVector,
    pub count: u64,
    /// Channel whose forward jump created this member, if any.
    pub origin: Option<usize>,
}

/// Distinct states with occupation numbers summing to `total`.
#[derive(Debug, Clone, PartialEq)]
pub struct JumpEnsemble {
    members: Vec<Member>,
    total: u64,
}

impl JumpEnsemble {
    /// All `n` members start in `psi0`.
    pub fn new(psi0: StateVector, n: u64) -> Result<Self> {
        if n == 0 {
            return Err(domain("ensemble size must be at least 1"));
        }
        Ok(JumpEnsemble {
            members: vec![Member { state: psi0, count: n, origin: None }],
            total: n,
        })
    }

    pub fn from_members(members: Vec<(StateVector, u64)>) -> Result<Self> {
        let Some(d) = members.first().map(|m| m.0.dim()) else {
            return Err(domain("ensemble needs at least one member"));
        };
        if members.iter().any(|m| m.0.dim() != d) {
            return Err(structural("ensemble members have different dimensions"));
        }
        for (i, a) in members.iter().enumerate() {
            if members[i + 1..].iter().any(|b| a.0.same_ray(&b.0)) {
                return Err(domain("ensemble members must be distinct modulo global phase"));
            }
        }
        let total = members.iter().map(|m| m.1).sum();
        if total == 0 {
            return Err(domain("ensemble size must be at least 1"));
        }
        Ok(JumpEnsemble {
            members: members
                .into_iter()
                .map(|(state, count)| Member { state, count, origin: None })
                .collect(),
            total,
        })
    }

    pub fn members(&self) -> &[Member] {
        &self.members
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn count(&self, alpha: usize) -> u64 {
        self.members[alpha].count
    }

    pub fn dim(&self) -> usize {
        self.members[0].state.dim()
    }

    /// Index of the member equal to `state` modulo global phase.
    pub fn find(&self, state: &StateVector) -> Option<usize> {
        self.members.iter().position(|m| m.state.same_ray(state))
    }

    /// `rho = sum_a (N_a / N) |psi_a><psi_a|`.
    pub fn density_matrix(&self) -> DensityMatrix {
        let d = self.dim();
        let mut rho = CMatrix::zeros(d, d);
        for m in &self.members {
            if m.count > 0 {
                rho += m.state.projector().scale(m.count as f64 / self.total as f64);
            }
        }
        DensityMatrix::from_raw(rho)
    }

    fn member(&self, alpha: usize) -> Result<&Member> {
        self.members
            .get(alpha)
            .ok_or_else(|| domain(format!("no ensemble member with index {alpha}")))
    }
}

/// A reversed jump `|psi_target><psi_source|` on one channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReverseJumpOperator {
    pub source: usize,
    pub target: usize,
    pub channel: usize,
}

fn jump_result(channel: &Channel, psi: &StateVector) -> Option<StateVector> {
    let v = channel.operator() * psi.amplitudes();
    let norm = v.norm();
    (norm > 1e-12).then(|| StateVector::from_normalized(v.unscale(norm)))
}

/// Every member `b != source` with `L psi_b / |L psi_b|` equal to
/// `psi_source` modulo global phase.
pub fn reverse_targets(ensemble: &JumpEnsemble, source: usize, channel: &Channel) -> Vec<usize> {
    let Some(src) = ensemble.members.get(source) else {
        return Vec::new();
    };
    ensemble
        .members
        .iter()
        .enumerate()
        .filter(|(b, _)| *b != source)
        .filter(|(_, m)| jump_result(channel, &m.state).is_some_and(|r| r.same_ray(&src.state)))
        .map(|(b, _)| b)
        .collect()
}

/// The member a reversed jump out of `source` returns to. When several
/// members qualify the most occupied one is returned and a warning logged.
pub fn reverse_target(ensemble: &JumpEnsemble, source: usize, channel: &Channel) -> Option<usize> {
    let targets = reverse_targets(ensemble, source, channel);
    if targets.len() > 1 {
        warn!(
            "{} members qualify as reverse target of member {source} on `{}`; using the most occupied",
            targets.len(),
            channel.label()
        );
    }
    let best = targets.into_iter().max_by_key(|&b| (ensemble.members[b].count, std::cmp::Reverse(b)));
    if best.is_none() {
        debug!("no reverse target for member {source} on `{}`", channel.label());
    }
    best
}

fn negative_rate(g: &TimeLocalGenerator, channel: usize, t: f64) -> Result<(f64, &Channel)> {
    let c = g
        .channels()
        .get(channel)
        .ok_or_else(|| domain(format!("no channel with index {channel}")))?;
    let rate = c.rate().evaluate(t)?;
    if rate >= 0.0 {
        return Err(domain(format!(
            "reversed jumps need a negative rate; `{}` has rate {rate} at t = {t}",
            c.label()
        )));
    }
    Ok((rate, c))
}

/// `(N_target / N_source) |gamma_i(t)| dt <psi_target|L^+ L|psi_target>`.
pub fn reverse_jump_probability(
    g: &TimeLocalGenerator,
    ensemble: &JumpEnsemble,
    source: usize,
    target: usize,
    channel: usize,
    t: f64,
    dt: f64,
) -> Result<f64> {
    let (rate, c) = negative_rate(g, channel, t)?;
    let src = ensemble.member(source)?;
    let tgt = ensemble.member(target)?;
    if src.count == 0 {
        return Err(Error::UndefinedSource(source));
    }
    if tgt.count == 0 {
        return Ok(0.0);
    }
    let weight = tgt.state.expectation(c.number_operator()).re;
    Ok(tgt.count as f64 / src.count as f64 * rate.abs() * dt * weight)
}

/// `|gamma_i(t)| N_target / N_source`.
pub fn effective_rate(
    g: &TimeLocalGenerator,
    ensemble: &JumpEnsemble,
    source: usize,
    target: usize,
    channel: usize,
    t: f64,
) -> Result<f64> {
    let (rate, _) = negative_rate(g, channel, t)?;
    let src = ensemble.member(source)?;
    let tgt = ensemble.member(target)?;
    if src.count == 0 {
        return Err(Error::UndefinedSource(source));
    }
    Ok(rate.abs() * tgt.count as f64 / src.count as f64)
}

/// Counters gathered while stepping.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepStats {
    pub forward_jumps: u64,
    pub reverse_jumps: u64,
    /// Reversed jumps performed into an empty target. Always zero.
    pub zero_target_reversals: u64,
    /// Member-steps where a member created by a jump on a channel that is
    /// now negative has no state to return to. Nonzero when the evolution
    /// moves jump results off the range of the jump operator (e.g. a drive),
    /// in which case the negative part of the rate is not represented.
    pub unmatched_reversals: u64,
    /// Largest per-member sum of `|gamma| dt <L^+ L>` over the options,
    /// without occupation ratios. Bounded by [`MAX_STEP_PROBABILITY`].
    pub max_bare_probability: f64,
    /// Largest per-member total jump probability including occupation ratios.
    pub max_probability: f64,
    /// Member-steps whose ratio-weighted total exceeded one and was rescaled.
    pub saturated: u64,
}

impl StepStats {
    fn absorb(&mut self, other: &StepStats) {
        self.forward_jumps += other.forward_jumps;
        self.reverse_jumps += other.reverse_jumps;
        self.zero_target_reversals += other.zero_target_reversals;
        self.unmatched_reversals += other.unmatched_reversals;
        self.max_bare_probability = self.max_bare_probability.max(other.max_bare_probability);
        self.max_probability = self.max_probability.max(other.max_probability);
        self.saturated += other.saturated;
    }
}

#[derive(Debug, Clone, Copy)]
enum Destination {
    /// Forward jump on this channel; the result state is matched later.
    Forward(usize),
    Reverse(usize),
}

/// Advances the ensemble from `t` to `t + dt`.
pub fn step(
    g: &TimeLocalGenerator,
    ensemble: &JumpEnsemble,
    t: f64,
    dt: f64,
    rng: &mut SimRng,
) -> Result<JumpEnsemble> {
    Ok(step_with_stats(g, ensemble, t, dt, rng, false)?.0)
}

/// As [`step`], also returning the step counters. Zero-occupation members
/// are dropped when `prune` is set.
pub fn step_with_stats(
    g: &TimeLocalGenerator,
    ensemble: &JumpEnsemble,
    t: f64,
    dt: f64,
    rng: &mut SimRng,
    prune: bool,
) -> Result<(JumpEnsemble, StepStats)> {
    if ensemble.dim() != g.dim() {
        return Err(structural(format!("ensemble has dimension {}, generator {}", ensemble.dim(), g.dim())));
    }
    if !(dt.is_finite() && dt > 0.0) {
        return Err(domain(format!("dt must be positive, got {dt}")));
    }
    let rates = g.rates_at(t)?;
    let channels = g.channels();
    let members = &ensemble.members;
    let m = members.len();
    let mut stats = StepStats::default();

    // <psi_a| L_i^+ L_i |psi_a> for every member and channel.
    let weights: Vec<Vec<f64>> = members
        .iter()
        .map(|mem| channels.iter().map(|c| mem.state.expectation(c.number_operator()).re).collect())
        .collect();
    // Reverse targets only matter on negative channels: member b is a target
    // of source a when L psi_b / |L psi_b| = psi_a.
    let mut targets: Vec<Vec<Vec<usize>>> = vec![Vec::new(); channels.len()];
    for (i, (c, &r)) in channels.iter().zip(&rates).enumerate() {
        if r >= 0.0 {
            continue;
        }
        let results: Vec<Option<StateVector>> = members.iter().map(|mem| jump_result(c, &mem.state)).collect();
        let index = RayIndex::new(results.iter().enumerate().filter_map(|(b, s)| s.as_ref().map(|s| (b, s))));
        targets[i] = (0..m)
            .map(|a| {
                index
                    .candidates(&members[a].state)
                    .filter(|&b| b != a && results[b].as_ref().is_some_and(|s| s.same_ray(&members[a].state)))
                    .collect()
            })
            .collect();
    }

    let mut counts: Vec<u64> = members.iter().map(|mem| mem.count).collect();
    let mut forward: Vec<(usize, usize, u64)> = Vec::new();

    for a in 0..m {
        let n_a = members[a].count;
        if n_a == 0 {
            continue;
        }
        let mut options: Vec<(f64, Destination)> = Vec::new();
        let mut bare = 0.0;
        for (i, &r) in rates.iter().enumerate() {
            if r > 0.0 {
                let p = r * dt * weights[a][i];
                bare += p;
                if p > 0.0 {
                    options.push((p, Destination::Forward(i)));
                }
            } else if r < 0.0 {
                if targets[i][a].is_empty() && members[a].origin == Some(i) {
                    stats.unmatched_reversals += 1;
                }
                for &b in &targets[i][a] {
                    let base = r.abs() * dt * weights[b][i];
                    bare += base;
                    let p = members[b].count as f64 / n_a as f64 * base;
                    if p > 0.0 {
                        options.push((p, Destination::Reverse(b)));
                    }
                }
            }
        }
        stats.max_bare_probability = stats.max_bare_probability.max(bare);
        if bare > MAX_STEP_PROBABILITY {
            return Err(Error::StepSize {
                time: t,
                detail: format!(
                    "jump probability {bare:.4} per member and step exceeds {MAX_STEP_PROBABILITY}; reduce dt"
                ),
            });
        }
        let total: f64 = options.iter().map(|o| o.0).sum();
        stats.max_probability = stats.max_probability.max(total);
        if total > 1.0 {
            // More expected reversals than members left in the source: all go.
            stats.saturated += 1;
            for o in options.iter_mut() {
                o.0 /= total;
            }
        }

        let mut remaining = n_a;
        let mut remaining_prob = 1.0;
        for (p, dest) in options {
            if remaining == 0 {
                break;
            }
            let conditional = (p / remaining_prob).clamp(0.0, 1.0);
            remaining_prob -= p;
            let k = if conditional >= 1.0 {
                remaining
            } else {
                Binomial::new(remaining, conditional)
                    .map_err(|e| domain(format!("binomial draw failed: {e}")))?
                    .sample(rng)
            };
            if k == 0 {
                continue;
            }
            remaining -= k;
            counts[a] -= k;
            match dest {
                Destination::Forward(i) => {
                    forward.push((a, i, k));
                    stats.forward_jumps += k;
                }
                Destination::Reverse(b) => {
                    if members[b].count == 0 {
                        stats.zero_target_reversals += k;
                    }
                    counts[b] += k;
                    stats.reverse_jumps += k;
                }
            }
        }
    }

    let mut states: Vec<StateVector> = members.iter().map(|mem| mem.state.clone()).collect();
    let mut origins: Vec<Option<usize>> = members.iter().map(|mem| mem.origin).collect();
    for (a, i, k) in forward {
        let result = jump_result(&channels[i], &members[a].state).ok_or_else(|| Error::ImpossibleJump {
            channel: channels[i].label().to_string(),
            norm: 0.0,
        })?;
        match states.iter().position(|s| s.same_ray(&result)) {
            Some(b) => counts[b] += k,
            None => {
                states.push(result);
                counts.push(k);
                origins.push(Some(i));
            }
        }
    }

    let propagator = step_operator(g, &rates, dt);
    let evolved: Vec<StateVector> = states
        .iter()
        .map(|s| evolve_with(&propagator, s, t))
        .collect::<Result<_>>()?;
    let mut next = merge_coincident(evolved, counts, origins);
    if prune {
        next.retain(|mem| mem.count > 0);
    }
    debug_assert_eq!(next.iter().map(|mem| mem.count).sum::<u64>(), ensemble.total);
    Ok((
        JumpEnsemble {
            members: next,
            total: ensemble.total,
        },
        stats,
    ))
}

/// Rays sorted by the population of the first basis state, which is
/// invariant under global phase and moves by at most `2 d` when two rays are
/// a phase distance `d` apart, so matches only need a narrow window.
struct RayIndex {
    keys: Vec<(f64, usize)>,
}

const KEY_WINDOW: f64 = 2.5 * PHASE_MATCH_TOLERANCE;

fn ray_key(s: &StateVector) -> f64 {
    s.amplitudes()[0].norm_sqr()
}

impl RayIndex {
    fn new<'a>(states: impl Iterator<Item = (usize, &'a StateVector)>) -> Self {
        let mut keys: Vec<(f64, usize)> = states.map(|(i, s)| (ray_key(s), i)).collect();
        keys.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        RayIndex { keys }
    }

    /// Indices whose key lies within the window around `s`.
    fn candidates(&self, s: &StateVector) -> impl Iterator<Item = usize> + '_ {
        let key = ray_key(s);
        let start = self.keys.partition_point(|k| k.0 < key - KEY_WINDOW);
        self.keys[start..].iter().take_while(move |k| k.0 <= key + KEY_WINDOW).map(|k| k.1)
    }
}

/// Merges states equal modulo global phase, keeping first-occurrence order.
fn merge_coincident(states: Vec<StateVector>, counts: Vec<u64>, origins: Vec<Option<usize>>) -> Vec<Member> {
    fn root(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    let index = RayIndex::new(states.iter().enumerate());
    let mut parent: Vec<usize> = (0..states.len()).collect();
    for (pos, &(key, i)) in index.keys.iter().enumerate() {
        for &(other_key, j) in &index.keys[pos + 1..] {
            if other_key > key + KEY_WINDOW {
                break;
            }
            if states[i].same_ray(&states[j]) {
                let (ri, rj) = (root(&mut parent, i), root(&mut parent, j));
                // the smaller index represents the group
                parent[ri.max(rj)] = ri.min(rj);
            }
        }
    }
    let mut slot = vec![usize::MAX; states.len()];
    let mut members: Vec<Member> = Vec::new();
    for (i, ((state, count), origin)) in states.into_iter().zip(counts).zip(origins).enumerate() {
        let r = root(&mut parent, i);
        if r == i {
            slot[i] = members.len();
            members.push(Member { state, count, origin });
        } else {
            let rep = &mut members[slot[r]];
            rep.count += count;
            rep.origin = rep.origin.or(origin);
        }
    }
    members
}

/// Jumps recorded during one step ending at `time`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JumpEvent {
    pub time: f64,
    pub forward: u64,
    pub reverse: u64,
}

#[derive(Debug, Clone)]
pub struct NmEnsembleRun {
    pub result: PropagationResult,
    pub events: Vec<JumpEvent>,
    pub stats: StepStats,
    pub max_members: usize,
    pub final_ensemble: JumpEnsemble,
}

/// Evolves an ensemble of `opts.trajectories` members from `psi0` and
/// returns the ensemble average on the stored grid. Uses substream 0 of
/// `opts.seed`; see [`run_replicate`] for independent replicates.
pub fn run_ensemble_nm(g: &TimeLocalGenerator, psi0: &StateVector, opts: &EnsembleOptions) -> Result<NmEnsembleRun> {
    run_replicate(g, psi0, opts, 0)
}

/// Replicate `replicate` of the ensemble, using that substream of `opts.seed`.
pub fn run_replicate(
    g: &TimeLocalGenerator,
    psi0: &StateVector,
    opts: &EnsembleOptions,
    replicate: u64,
) -> Result<NmEnsembleRun> {
    opts.check()?;
    if psi0.dim() != g.dim() {
        return Err(structural(format!("state has dimension {}, generator {}", psi0.dim(), g.dim())));
    }
    let grid = TimeGrid::new(opts.t_end, opts.dt, &g.breakpoints(0.0, opts.t_end)?, &[])?;
    let steps = grid.steps();
    // negative_ahead[i]: some rate is negative on a step >= i
    let mut negative_ahead = vec![false; steps + 1];
    for i in (0..steps).rev() {
        let any_negative = g.rates_at(grid.times[i])?.iter().any(|r| *r < 0.0);
        negative_ahead[i] = any_negative || negative_ahead[i + 1];
    }

    let mut rng = substream(opts.seed, replicate);
    let mut ensemble = JumpEnsemble::new(psi0.clone(), opts.trajectories as u64)?;
    let mut times = vec![0.0];
    let mut states = vec![ensemble.density_matrix()];
    let mut events = Vec::new();
    let mut stats = StepStats::default();
    let mut max_members = 1;
    for i in 0..steps {
        let (t, t_next) = (grid.times[i], grid.times[i + 1]);
        let (next, s) = step_with_stats(g, &ensemble, t, t_next - t, &mut rng, !negative_ahead[i])?;
        ensemble = next;
        max_members = max_members.max(ensemble.members.len());
        if s.forward_jumps + s.reverse_jumps > 0 {
            events.push(JumpEvent {
                time: t_next,
                forward: s.forward_jumps,
                reverse: s.reverse_jumps,
            });
        }
        stats.absorb(&s);
        if grid.is_output(i + 1, opts.stride) {
            times.push(t_next);
            states.push(ensemble.density_matrix());
        }
    }
    Ok(NmEnsembleRun {
        result: PropagationResult {
            times,
            states,
            step: opts.dt * opts.stride.max(1) as f64,
        },
        events,
        stats,
        max_members,
        final_ensemble: ensemble,
    })
}
