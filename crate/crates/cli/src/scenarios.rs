//! Built-in scenarios with fixed physical parameters.
//!
//! | name | content |
//! |---|---|
//! | `fig1` | two-state chains, `p1` and the effective rate for three initial values |
//! | `fig3` | rings (a) and (b) |
//! | `fig4` | rings (c) and (d) |
//! | `fig5` | effective rates of rings (a) and (c) against their Markovian counterparts |
//! | `two_level_q` | quantum two-level analogue of the two-state chain: closed form, ODE, jump ensemble |
//! | `cp_demo` | Choi spectrum and rate integral for four decay profiles |

use timelocal_core::classical::{
    build_ring, build_two_state, effective_rate_classical, effective_rate_matrix, integrate_sampled, ring_g,
    two_state_tables, RingVariant, TwoStateVariant,
};
use timelocal_core::integrator::{analytic_two_level, propagate_sampled};
use timelocal_core::nmqj::run_ensemble_nm;
use timelocal_core::quantum::{EXCITED, GROUND};
use timelocal_core::{DensityMatrix, ProbabilityVector, RateFunction, StateVector, TimeLocalGenerator};

use crate::output::{Cell, Table};
use crate::runner::{classical_columns, cp_table, nmqj_guard, nmqj_warnings, Outcome, RunError, RunParams};

pub const TWO_STATE_GAMMA: f64 = 0.4;
pub const TWO_STATE_S1: f64 = 5.0;
pub const TWO_STATE_S2: f64 = 10.0;
pub const RING_GAMMA: f64 = 0.5;
pub const RING_SIZE: usize = 4;
pub const FIG1_INITIAL_P1: [f64; 3] = [1.0, 0.5, 0.0];

pub struct Scenario {
    pub name: &'static str,
    pub description: &'static str,
    pub engine: &'static str,
    pub defaults: RunParams,
    pub run: fn(&RunParams) -> Result<Outcome, RunError>,
}

const fn params(t_end: f64, dt: f64, stride: usize, ensemble_size: Option<u64>) -> RunParams {
    RunParams {
        t_end,
        dt,
        stride,
        ensemble_size,
        seed: 1,
    }
}

static BUILTINS: [Scenario; 6] = [
    Scenario {
        name: "fig1",
        description: "two-state chain (Gamma = 0.4, s1 = 5, s2 = 10), Markov and non-Markov, p1(0) in {1, 0.5, 0}",
        engine: "classical-ode",
        defaults: params(12.0, 1e-3, 50, None),
        run: fig1,
    },
    Scenario {
        name: "fig3",
        description: "rings (a) and (b), Gamma = 0.5, p(0) = (1, 0, 0, 0)",
        engine: "classical-ode",
        defaults: params(40.0, 1e-3, 50, None),
        run: fig3,
    },
    Scenario {
        name: "fig4",
        description: "rings (c) and (d), Gamma = 0.5, p(0) = (1, 0, 0, 0)",
        engine: "classical-ode",
        defaults: params(40.0, 1e-3, 50, None),
        run: fig4,
    },
    Scenario {
        name: "fig5",
        description: "effective-rate time series for rings (a) and (c) with their Markovian counterparts",
        engine: "classical-ode",
        defaults: params(40.0, 1e-3, 50, None),
        run: fig5,
    },
    Scenario {
        name: "two_level_q",
        description: "two-level atom with the two-state rate gamma_1 - gamma_2: closed form, ODE and jump ensemble (N = 10^4)",
        engine: "nmqj",
        defaults: params(10.0, 1e-3, 100, Some(10_000)),
        run: two_level_q,
    },
    Scenario {
        name: "cp_demo",
        description: "Choi-matrix audit of four single-channel decay profiles against the sign of the rate integral",
        engine: "cp-audit",
        defaults: params(10.0, 1e-3, 500, None),
        run: cp_demo,
    },
];

pub fn builtins() -> &'static [Scenario] {
    &BUILTINS
}

pub fn find(name: &str) -> Option<&'static Scenario> {
    BUILTINS.iter().find(|s| s.name == name)
}

/// Rate of `2 -> 1` seen by the process: `gamma_2` itself in the Markov
/// chain, `gamma_2 p1 / p2` for the reversed jumps of the non-Markov chain.
fn two_state_effective_rate(variant: TwoStateVariant, gamma2: f64, p: &ProbabilityVector) -> Option<f64> {
    match variant {
        TwoStateVariant::Markov => Some(gamma2),
        TwoStateVariant::Nonmarkov if gamma2 == 0.0 => Some(0.0),
        TwoStateVariant::Nonmarkov => effective_rate_classical(-gamma2, p, 1, 0).ok(),
    }
}

fn fig1(p: &RunParams) -> Result<Outcome, RunError> {
    let (_, gamma2) = two_state_tables(TWO_STATE_GAMMA, TWO_STATE_S1, TWO_STATE_S2)?;
    let mut table = Table::new(["t", "variant", "p1_init", "p1", "eff_rate"]);
    for variant in [TwoStateVariant::Markov, TwoStateVariant::Nonmarkov] {
        let spec = build_two_state(variant, TWO_STATE_GAMMA, TWO_STATE_S1, TWO_STATE_S2)?;
        for p1 in FIG1_INITIAL_P1 {
            let p0 = ProbabilityVector::new(vec![p1, 1.0 - p1])?;
            let run = integrate_sampled(&spec, &p0, p.t_end, p.dt, p.stride, &[])?;
            for (t, pv) in run.times.iter().zip(&run.states) {
                let eff = two_state_effective_rate(variant, gamma2.evaluate(*t)?, pv);
                table.push(vec![(*t).into(), variant.to_string().into(), p1.into(), pv.get(0).into(), eff.into()]);
            }
        }
    }
    Ok(Outcome::deterministic(table))
}

fn rings(p: &RunParams, variants: [RingVariant; 2]) -> Result<Outcome, RunError> {
    let mut table = Table::new(classical_columns(RING_SIZE, "variant"));
    let p0 = ProbabilityVector::basis(RING_SIZE, 0)?;
    for v in variants {
        let run = integrate_sampled(&build_ring(v, RING_GAMMA, RING_SIZE)?, &p0, p.t_end, p.dt, p.stride, &[])?;
        for (t, pv) in run.times.iter().zip(&run.states) {
            let mut row: Vec<Cell> = vec![(*t).into(), v.to_string().into()];
            row.extend(pv.as_slice().iter().map(|&x| Cell::Num(x)));
            table.push(row);
        }
    }
    Ok(Outcome::deterministic(table))
}

fn fig3(p: &RunParams) -> Result<Outcome, RunError> {
    rings(p, [RingVariant::A, RingVariant::B])
}

fn fig4(p: &RunParams) -> Result<Outcome, RunError> {
    rings(p, [RingVariant::C, RingVariant::D])
}

/// Ring (a): anti-clockwise `i -> i-1` against `g(t)` of ring (b).
/// Ring (c): clockwise `i -> i+1` against `Gamma + g(t)` of ring (d).
/// States are 1-based; undefined rates (empty source) are left blank.
fn fig5(p: &RunParams) -> Result<Outcome, RunError> {
    let g = ring_g(RING_GAMMA)?;
    let n = RING_SIZE;
    let p0 = ProbabilityVector::basis(n, 0)?;
    let mut table = Table::new(["t", "variant", "from", "to", "eff_rate", "markov_rate"]);
    for v in [RingVariant::A, RingVariant::C] {
        let spec = build_ring(v, RING_GAMMA, n)?;
        let run = integrate_sampled(&spec, &p0, p.t_end, p.dt, p.stride, &[])?;
        for (t, pv) in run.times.iter().zip(&run.states) {
            let m = effective_rate_matrix(&spec, pv, *t)?;
            let gt = g.evaluate(*t)?;
            for i in 0..n {
                let (to, markov) = match v {
                    RingVariant::A => ((i + n - 1) % n, gt),
                    _ => ((i + 1) % n, RING_GAMMA + gt),
                };
                table.push(vec![
                    (*t).into(),
                    v.to_string().into(),
                    (i + 1).into(),
                    (to + 1).into(),
                    m[(to, i)].into(),
                    markov.into(),
                ]);
            }
        }
    }
    Ok(Outcome::deterministic(table))
}

pub fn two_level_rate() -> Result<RateFunction, RunError> {
    let (g1, g2) = two_state_tables(TWO_STATE_GAMMA, TWO_STATE_S1, TWO_STATE_S2)?;
    Ok(RateFunction::difference(g1, g2))
}

fn two_level_q(p: &RunParams) -> Result<Outcome, RunError> {
    let rate = two_level_rate()?;
    let g = TimeLocalGenerator::two_level_decay(rate.clone())?;
    let psi0 = StateVector::basis(2, EXCITED)?;
    let rho0 = DensityMatrix::pure(&psi0);
    let ode = propagate_sampled(&g, &rho0, p.t_end, p.dt, p.stride)?;
    let nm = run_ensemble_nm(&g, &psi0, &p.ensemble_options())?;
    let mut table = Table::new(["t", "method", "rho_ee", "rho_gg"]);
    for t in &ode.times {
        let exact = analytic_two_level(&rate, &rho0, *t)?;
        table.push(vec![(*t).into(), "analytic".into(), exact.population(EXCITED).into(), exact.population(GROUND).into()]);
    }
    for (label, run) in [("ode", &ode), ("nmqj", &nm.result)] {
        for (t, rho) in run.times.iter().zip(&run.states) {
            table.push(vec![(*t).into(), label.into(), rho.population(EXCITED).into(), rho.population(GROUND).into()]);
        }
    }
    Ok(Outcome {
        table,
        guard: Some(nmqj_guard(&nm.stats)),
        warnings: nmqj_warnings(&nm.stats),
    })
}

/// `(label, rate)` pairs of the CP audit.
pub fn cp_profiles() -> Result<Vec<(&'static str, RateFunction)>, RunError> {
    Ok(vec![
        ("decay", RateFunction::constant(TWO_STATE_GAMMA)),
        ("gain", RateFunction::constant(-TWO_STATE_GAMMA)),
        ("two_state", two_level_rate()?),
        // integral turns negative at t = 3.2
        ("sign_change", RateFunction::piecewise(vec![2.0], vec![0.3, -0.5])?),
    ])
}

fn cp_demo(p: &RunParams) -> Result<Outcome, RunError> {
    let profiles = cp_profiles()?
        .into_iter()
        .map(|(label, rate)| Ok((label, TimeLocalGenerator::two_level_decay(rate)?)))
        .collect::<Result<Vec<_>, RunError>>()?;
    let mut table = cp_table(&profiles, &p.output_times(), p.dt)?;
    table.columns[1] = "profile".to_string();
    Ok(Outcome::deterministic(table))
}
