//! Time-dependent decay rates.
//!
//! Every built-in variant is piecewise constant, so values, exact integrals and
//! the full list of discontinuities are all available in closed form. Values
//! are right-continuous: at a switching instant `evaluate` returns the limit
//! from above, and `evaluate_left` the limit from below.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};

/// Two breakpoints closer than this (in seconds) are the same breakpoint.
pub const BREAKPOINT_TOLERANCE: f64 = 1e-12;

/// A real-valued rate `gamma(t)` in 1/s, possibly negative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum RateFunction {
    Constant {
        value: f64,
    },
    /// `values[0]` on `[0, b0)`, `values[i]` on `[b(i-1), b(i))`, and the last
    /// value from the last breakpoint on.
    PiecewiseConstant {
        breakpoints: Vec<f64>,
        values: Vec<f64>,
    },
    /// `(gamma/2) * (1 + sign * sgn[cos(gamma*pi*t + phase)])`, taking values in
    /// `{0, gamma}` with period `2/gamma`.
    SignPeriodic {
        gamma: f64,
        phase: f64,
        #[serde(default = "positive_sign")]
        sign: i8,
    },
    Difference {
        a: Box<RateFunction>,
        b: Box<RateFunction>,
    },
    /// Previous-sample step interpolation over `[t_first, t_last]`.
    Tabulated {
        samples: Vec<(f64, f64)>,
    },
    /// `base(t)` before `start`; afterwards `base` restricted to
    /// `[start, start + period)` and repeated.
    Periodic {
        base: Box<RateFunction>,
        start: f64,
        period: f64,
    },
}

fn positive_sign() -> i8 {
    1
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Side {
    Right,
    Left,
}

impl RateFunction {
    pub fn constant(value: f64) -> Self {
        RateFunction::Constant { value }
    }

    pub fn piecewise(breakpoints: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        let f = RateFunction::PiecewiseConstant { breakpoints, values };
        f.validate()?;
        Ok(f)
    }

    pub fn sign_periodic(gamma: f64, phase: f64, sign: i8) -> Result<Self> {
        let f = RateFunction::SignPeriodic { gamma, phase, sign };
        f.validate()?;
        Ok(f)
    }

    pub fn difference(a: RateFunction, b: RateFunction) -> Self {
        RateFunction::Difference {
            a: Box::new(a),
            b: Box::new(b),
        }
    }

    pub fn tabulated(samples: Vec<(f64, f64)>) -> Result<Self> {
        let f = RateFunction::Tabulated { samples };
        f.validate()?;
        Ok(f)
    }

    pub fn periodic(base: RateFunction, start: f64, period: f64) -> Result<Self> {
        let f = RateFunction::Periodic {
            base: Box::new(base),
            start,
            period,
        };
        f.validate()?;
        Ok(f)
    }

    /// Checks the structural invariants. Values built through the
    /// constructors are always valid; deserialized values must be checked.
    pub fn validate(&self) -> Result<()> {
        match self {
            RateFunction::Constant { value } => finite(*value, "constant rate"),
            RateFunction::PiecewiseConstant { breakpoints, values } => {
                if values.len() != breakpoints.len() + 1 {
                    return Err(domain(format!(
                        "piecewise rate needs {} values for {} breakpoints, got {}",
                        breakpoints.len() + 1,
                        breakpoints.len(),
                        values.len()
                    )));
                }
                for v in values {
                    finite(*v, "piecewise rate value")?;
                }
                for b in breakpoints {
                    finite(*b, "piecewise breakpoint")?;
                    if *b < 0.0 {
                        return Err(domain("piecewise breakpoints must be >= 0"));
                    }
                }
                if breakpoints.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(domain("piecewise breakpoints must be strictly increasing"));
                }
                Ok(())
            }
            RateFunction::SignPeriodic { gamma, phase, sign } => {
                finite(*phase, "sign-periodic phase")?;
                if !(gamma.is_finite() && *gamma > 0.0) {
                    return Err(domain("sign-periodic gamma must be positive"));
                }
                if *sign != 1 && *sign != -1 {
                    return Err(domain("sign-periodic sign must be +1 or -1"));
                }
                Ok(())
            }
            RateFunction::Difference { a, b } => {
                a.validate()?;
                b.validate()
            }
            RateFunction::Tabulated { samples } => {
                if samples.is_empty() {
                    return Err(domain("tabulated rate needs at least one sample"));
                }
                for (t, v) in samples {
                    finite(*t, "tabulated sample time")?;
                    finite(*v, "tabulated sample value")?;
                }
                if samples[0].0 < 0.0 {
                    return Err(domain("tabulated sample times must be >= 0"));
                }
                if samples.windows(2).any(|w| w[1].0 <= w[0].0) {
                    return Err(domain("tabulated sample times must be strictly increasing"));
                }
                Ok(())
            }
            RateFunction::Periodic {
                base,
                start,
                period,
            } => {
                base.validate()?;
                if !(start.is_finite() && *start >= 0.0) {
                    return Err(domain("periodic start must be >= 0"));
                }
                if !(period.is_finite() && *period > 0.0) {
                    return Err(domain("periodic period must be positive"));
                }
                Ok(())
            }
        }
    }

    /// Value at `t`, right-continuous at switching instants.
    pub fn evaluate(&self, t: f64) -> Result<f64> {
        check_time(t)?;
        self.value(t, Side::Right)
    }

    /// Limit from below at `t`. At `t = 0` this is the value at 0.
    pub fn evaluate_left(&self, t: f64) -> Result<f64> {
        check_time(t)?;
        if t == 0.0 {
            return self.value(t, Side::Right);
        }
        self.value(t, Side::Left)
    }

    fn value(&self, t: f64, side: Side) -> Result<f64> {
        Ok(match self {
            RateFunction::Constant { value } => *value,
            RateFunction::PiecewiseConstant { breakpoints, values } => {
                values[piece_index(breakpoints, t, side)]
            }
            RateFunction::SignPeriodic { gamma, phase, sign } => {
                let w = snap(sign_coordinate(*gamma, *phase, t), gamma * BREAKPOINT_TOLERANCE);
                let m = w.rem_euclid(2.0);
                let on = match side {
                    Side::Right => m < 1.0,
                    Side::Left => m > 0.0 && m <= 1.0,
                };
                let s = if on { 1.0 } else { -1.0 } * f64::from(*sign);
                0.5 * gamma * (1.0 + s)
            }
            RateFunction::Difference { a, b } => a.value(t, side)? - b.value(t, side)?,
            RateFunction::Tabulated { samples } => {
                let (first, last) = (samples[0].0, samples[samples.len() - 1].0);
                if t < first - BREAKPOINT_TOLERANCE || t > last + BREAKPOINT_TOLERANCE {
                    return Err(domain(format!(
                        "t = {t} outside tabulated range [{first}, {last}]"
                    )));
                }
                let idx = match side {
                    Side::Right => samples.partition_point(|s| s.0 <= t + BREAKPOINT_TOLERANCE),
                    Side::Left => samples.partition_point(|s| s.0 < t - BREAKPOINT_TOLERANCE),
                };
                samples[idx.saturating_sub(1)].1
            }
            RateFunction::Periodic {
                base,
                start,
                period,
            } => {
                if t < *start - BREAKPOINT_TOLERANCE
                    || (side == Side::Left && t <= *start + BREAKPOINT_TOLERANCE)
                {
                    return base.value(t, side);
                }
                let (_, offset) = fold(t, *start, *period);
                if side == Side::Left && offset == 0.0 {
                    base.value(start + period, Side::Left)?
                } else {
                    base.value(start + offset, side)?
                }
            }
        })
    }

    /// Exact `int_{t0}^{t1} f(s) ds`.
    pub fn integral(&self, t0: f64, t1: f64) -> Result<f64> {
        check_time(t0)?;
        check_time(t1)?;
        if t1 < t0 {
            return Err(domain(format!("integral bounds reversed: [{t0}, {t1}]")));
        }
        if t1 == t0 {
            return Ok(0.0);
        }
        Ok(self.antiderivative(t1)? - self.antiderivative(t0)?)
    }

    /// `int_0^t f`, or from the first sample for tabulated rates.
    fn antiderivative(&self, t: f64) -> Result<f64> {
        Ok(match self {
            RateFunction::Constant { value } => value * t,
            RateFunction::PiecewiseConstant { breakpoints, values } => {
                let mut acc = 0.0;
                let mut left = 0.0;
                for (b, v) in breakpoints.iter().zip(values) {
                    if *b >= t {
                        return Ok(acc + v * (t - left));
                    }
                    acc += v * (b - left);
                    left = *b;
                }
                acc + values[values.len() - 1] * (t - left)
            }
            RateFunction::SignPeriodic { gamma, phase, sign } => {
                // In the coordinate w the rate is gamma on [2k, 2k+1) and dt = dw/gamma.
                let w = snap(sign_coordinate(*gamma, *phase, t), gamma * BREAKPOINT_TOLERANCE);
                let w0 = sign_coordinate(*gamma, *phase, 0.0);
                let on = |w: f64| (w / 2.0).floor() + w.rem_euclid(2.0).min(1.0);
                let on_measure = on(w) - on(w0);
                if *sign > 0 {
                    on_measure
                } else {
                    (w - w0) - on_measure
                }
            }
            RateFunction::Difference { a, b } => a.antiderivative(t)? - b.antiderivative(t)?,
            RateFunction::Tabulated { samples } => {
                let last = samples[samples.len() - 1].0;
                if t < samples[0].0 - BREAKPOINT_TOLERANCE || t > last + BREAKPOINT_TOLERANCE {
                    return Err(domain(format!(
                        "t = {t} outside tabulated range [{}, {last}]",
                        samples[0].0
                    )));
                }
                let mut acc = 0.0;
                for w in samples.windows(2) {
                    let (ta, va) = w[0];
                    let tb = w[1].0;
                    if tb >= t {
                        return Ok(acc + va * (t - ta).max(0.0));
                    }
                    acc += va * (tb - ta);
                }
                acc
            }
            RateFunction::Periodic {
                base,
                start,
                period,
            } => {
                if t <= *start {
                    return base.antiderivative(t);
                }
                let head = base.antiderivative(*start)?;
                let per_period = base.antiderivative(start + period)? - head;
                let (cycles, offset) = fold(t, *start, *period);
                head + cycles * per_period + base.antiderivative(start + offset)? - head
            }
        })
    }

    /// All discontinuity times in `(t0, t1]`, sorted and deduplicated.
    pub fn breakpoints(&self, t0: f64, t1: f64) -> Result<Vec<f64>> {
        check_time(t0)?;
        check_time(t1)?;
        if t1 < t0 {
            return Err(domain(format!("breakpoint window reversed: [{t0}, {t1}]")));
        }
        let mut out = Vec::new();
        self.collect_breakpoints(t0, t1, &mut out);
        Ok(dedup_sorted(out))
    }

    fn collect_breakpoints(&self, t0: f64, t1: f64, out: &mut Vec<f64>) {
        let keep = |b: f64| b > t0 + BREAKPOINT_TOLERANCE && b <= t1 + BREAKPOINT_TOLERANCE;
        match self {
            RateFunction::Constant { .. } => {}
            RateFunction::PiecewiseConstant { breakpoints, .. } => {
                out.extend(breakpoints.iter().copied().filter(|b| keep(*b)))
            }
            RateFunction::SignPeriodic { gamma, phase, .. } => {
                let w0 = sign_coordinate(*gamma, *phase, t0);
                let w1 = sign_coordinate(*gamma, *phase, t1);
                let c = sign_coordinate(*gamma, *phase, 0.0);
                let mut k = w0.floor() - 1.0;
                while k <= w1.ceil() + 1.0 {
                    let b = (k - c) / gamma;
                    if b >= 0.0 && keep(b) {
                        out.push(b);
                    }
                    k += 1.0;
                }
            }
            RateFunction::Difference { a, b } => {
                a.collect_breakpoints(t0, t1, out);
                b.collect_breakpoints(t0, t1, out);
            }
            RateFunction::Tabulated { samples } => {
                out.extend(samples.iter().map(|s| s.0).skip(1).filter(|b| keep(*b)))
            }
            RateFunction::Periodic {
                base,
                start,
                period,
            } => {
                base.collect_breakpoints(t0, t1.min(*start), out);
                let mut inner = Vec::new();
                base.collect_breakpoints(*start, start + period, &mut inner);
                inner.retain(|b| *b < start + period - BREAKPOINT_TOLERANCE);
                let first = ((t0 - start) / period).floor().max(0.0);
                let mut cycle = first;
                while start + cycle * period <= t1 + BREAKPOINT_TOLERANCE {
                    let origin = start + cycle * period;
                    for b in &inner {
                        let shifted = origin + (b - start);
                        if keep(shifted) {
                            out.push(shifted);
                        }
                    }
                    let boundary = origin + period;
                    if keep(boundary) {
                        out.push(boundary);
                    }
                    cycle += 1.0;
                }
            }
        }
    }
}

fn finite(v: f64, what: &str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(domain(format!("{what} must be finite, got {v}")))
    }
}

fn check_time(t: f64) -> Result<()> {
    if !t.is_finite() || t < 0.0 {
        return Err(domain(format!("time must be finite and >= 0, got {t}")));
    }
    Ok(())
}

/// Index of the piece containing `t`; a breakpoint within tolerance counts as
/// reached from the right and not reached from the left.
fn piece_index(breakpoints: &[f64], t: f64, side: Side) -> usize {
    match side {
        Side::Right => breakpoints.partition_point(|b| *b <= t + BREAKPOINT_TOLERANCE),
        Side::Left => breakpoints.partition_point(|b| *b < t - BREAKPOINT_TOLERANCE),
    }
}

/// `w = gamma*t + phase/pi + 1/2`; `sgn cos` is +1 exactly when `w mod 2` is in `[0, 1)`.
fn sign_coordinate(gamma: f64, phase: f64, t: f64) -> f64 {
    gamma * t + phase / PI + 0.5
}

fn snap(w: f64, tol: f64) -> f64 {
    let r = w.round();
    if (w - r).abs() <= tol.max(4.0 * f64::EPSILON * w.abs()) {
        r
    } else {
        w
    }
}

/// Splits `t >= start` into whole periods and an offset in `[0, period)`.
fn fold(t: f64, start: f64, period: f64) -> (f64, f64) {
    let elapsed = t - start;
    let mut cycles = (elapsed / period).floor();
    let mut offset = elapsed - cycles * period;
    if offset >= period - BREAKPOINT_TOLERANCE {
        cycles += 1.0;
        offset = 0.0;
    } else if offset < BREAKPOINT_TOLERANCE {
        offset = 0.0;
    }
    (cycles, offset)
}

pub(crate) fn dedup_sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    let mut out: Vec<f64> = Vec::with_capacity(v.len());
    for b in v {
        match out.last() {
            Some(last) if b - last <= BREAKPOINT_TOLERANCE => {}
            _ => out.push(b),
        }
    }
    out
}

/// Integration grid from 0 to `t_end`.
///
/// Regular points sit at `k * dt`; every breakpoint and every requested stop
/// is inserted so no step straddles a discontinuity. Points closer than 1e-9 s
/// are merged, keeping the breakpoint time when one is involved.
#[derive(Debug, Clone)]
pub struct TimeGrid {
    pub times: Vec<f64>,
    /// `Some(k)` when the point is the regular point `k * dt`.
    pub regular: Vec<Option<usize>>,
    pub dt: f64,
}

const GRID_MERGE: f64 = 1e-9;

impl TimeGrid {
    pub fn new(t_end: f64, dt: f64, breakpoints: &[f64], stops: &[f64]) -> Result<Self> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(domain(format!("dt must be positive, got {dt}")));
        }
        check_time(t_end)?;
        let n_regular = (t_end / dt + 1e-9).floor() as usize;
        // (time, priority, regular index)
        let mut pts: Vec<(f64, u8, Option<usize>)> = (0..=n_regular)
            .map(|k| (k as f64 * dt, 0, Some(k)))
            .collect();
        pts.push((t_end, 1, None));
        for s in stops {
            if *s >= 0.0 && *s <= t_end + GRID_MERGE {
                pts.push((s.min(t_end), 1, None));
            }
        }
        for b in breakpoints {
            if *b > 0.0 && *b < t_end - GRID_MERGE {
                pts.push((*b, 2, None));
            }
        }
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));

        let mut times: Vec<f64> = Vec::with_capacity(pts.len());
        let mut regular: Vec<Option<usize>> = Vec::with_capacity(pts.len());
        let mut prio: Vec<u8> = Vec::with_capacity(pts.len());
        for (t, p, r) in pts {
            if let Some(last) = times.last_mut() {
                if t - *last <= GRID_MERGE {
                    let i = regular.len() - 1;
                    if p > prio[i] {
                        *last = t;
                        prio[i] = p;
                    }
                    if regular[i].is_none() {
                        regular[i] = r;
                    }
                    continue;
                }
            }
            times.push(t);
            regular.push(r);
            prio.push(p);
        }
        // The endpoint is always exactly t_end.
        if let Some(last) = times.last_mut() {
            *last = t_end;
        }
        if times.len() == 1 && t_end > 0.0 {
            times.push(t_end);
            regular.push(None);
        }
        Ok(TimeGrid { times, regular, dt })
    }

    pub fn steps(&self) -> usize {
        self.times.len().saturating_sub(1)
    }

    /// Whether point `i` is stored when keeping every `stride`-th regular
    /// point plus the final time.
    pub fn is_output(&self, i: usize, stride: usize) -> bool {
        i + 1 == self.times.len() || matches!(self.regular[i], Some(k) if k % stride.max(1) == 0)
    }
}
