//! Deterministic propagation of the master equation, the closed-form
//! two-level solution, dynamical maps and the complete-positivity audit.

use rayon::prelude::*;

use crate::error::{domain, structural, Error, Result};
use crate::quantum::{hermitian_eigenvalues, CMatrix, DensityMatrix, TimeLocalGenerator, C64, EXCITED, GROUND};
use crate::rates::{RateFunction, TimeGrid};

/// Default lower bound on Choi eigenvalues accepted as CP.
pub const DEFAULT_CP_TOLERANCE: f64 = 1e-8;

/// A density-matrix trajectory on the stored time grid.
#[derive(Debug, Clone)]
pub struct PropagationResult {
    pub times: Vec<f64>,
    pub states: Vec<DensityMatrix>,
    pub step: f64,
}

impl PropagationResult {
    /// Index of the stored time closest to `t`, if one lies within `step / 2`.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let i = self.times.partition_point(|s| *s < t);
        let candidates = [i.checked_sub(1), Some(i)];
        candidates
            .into_iter()
            .flatten()
            .filter(|&j| j < self.times.len())
            .min_by(|&a, &b| (self.times[a] - t).abs().total_cmp(&(self.times[b] - t).abs()))
            .filter(|&j| (self.times[j] - t).abs() <= 0.5 * self.step + 1e-12)
    }

    pub fn state_at(&self, t: f64) -> Option<&DensityMatrix> {
        self.index_of(t).map(|i| &self.states[i])
    }

    pub fn final_state(&self) -> &DensityMatrix {
        self.states.last().expect("propagation stores at least one state")
    }
}

/// One classic RK4 step over `[t, t + h]`. The grid never lets a step
/// straddle a breakpoint, so the last stage uses the rates from below `t + h`.
fn rk4_step(g: &TimeLocalGenerator, m: &CMatrix, t: f64, h: f64) -> Result<CMatrix> {
    let r_start = g.rates_at(t)?;
    let r_mid = g.rates_at(t + 0.5 * h)?;
    let r_end = g.rates_left_of(t + h)?;
    let k1 = g.apply_with_rates(m, &r_start)?;
    let k2 = g.apply_with_rates(&(m + k1.scale(0.5 * h)), &r_mid)?;
    let k3 = g.apply_with_rates(&(m + k2.scale(0.5 * h)), &r_mid)?;
    let k4 = g.apply_with_rates(&(m + k3.scale(h)), &r_end)?;
    Ok(m + (k1 + k2.scale(2.0) + k3.scale(2.0) + k4).scale(h / 6.0))
}

fn check_finite(m: &CMatrix, time: f64) -> Result<()> {
    if m.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
        Ok(())
    } else {
        Err(Error::Blowup { time })
    }
}

/// Integrates an arbitrary matrix along `grid`, calling `visit(i, m)` at
/// every grid point.
fn evolve(
    g: &TimeLocalGenerator,
    m0: &CMatrix,
    grid: &TimeGrid,
    project: bool,
    mut visit: impl FnMut(usize, &CMatrix),
) -> Result<CMatrix> {
    let mut m = m0.clone();
    visit(0, &m);
    for i in 0..grid.steps() {
        let (t, t_next) = (grid.times[i], grid.times[i + 1]);
        m = rk4_step(g, &m, t, t_next - t)?;
        check_finite(&m, t_next)?;
        if project {
            m = DensityMatrix::project(m).into_matrix();
        }
        visit(i + 1, &m);
    }
    Ok(m)
}

fn generator_grid(g: &TimeLocalGenerator, t_end: f64, dt: f64, stops: &[f64]) -> Result<TimeGrid> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(domain(format!("dt must be positive, got {dt}")));
    }
    if !(t_end.is_finite() && t_end >= 0.0) {
        return Err(domain(format!("t_end must be >= 0, got {t_end}")));
    }
    TimeGrid::new(t_end, dt, &g.breakpoints(0.0, t_end)?, stops)
}

/// RK4 propagation storing every grid point that is a multiple of `dt`.
pub fn propagate(g: &TimeLocalGenerator, rho0: &DensityMatrix, t_end: f64, dt: f64) -> Result<PropagationResult> {
    propagate_sampled(g, rho0, t_end, dt, 1)
}

/// As [`propagate`], storing every `stride`-th regular point and the final time.
pub fn propagate_sampled(
    g: &TimeLocalGenerator,
    rho0: &DensityMatrix,
    t_end: f64,
    dt: f64,
    stride: usize,
) -> Result<PropagationResult> {
    if rho0.dim() != g.dim() {
        return Err(structural(format!("initial state has dimension {}, generator {}", rho0.dim(), g.dim())));
    }
    let grid = generator_grid(g, t_end, dt, &[])?;
    let mut times = Vec::new();
    let mut states = Vec::new();
    evolve(g, rho0.matrix(), &grid, true, |i, m| {
        if grid.is_output(i, stride) {
            times.push(grid.times[i]);
            states.push(DensityMatrix::from_raw(m.clone()));
        }
    })?;
    Ok(PropagationResult { times, states, step: dt * stride.max(1) as f64 })
}

/// Closed-form solution for `H = 0` and the single channel `sigma_-`:
/// populations scale with `kappa(t) = exp(-int_0^t gamma)`, coherences with
/// `sqrt(kappa)`.
pub fn analytic_two_level(rate: &RateFunction, rho0: &DensityMatrix, t: f64) -> Result<DensityMatrix> {
    if rho0.dim() != 2 {
        return Err(domain(format!("closed-form solution needs a two-level state, got dimension {}", rho0.dim())));
    }
    let kappa = (-rate.integral(0.0, t)?).exp();
    let ee = rho0.population(EXCITED);
    let mut m = CMatrix::zeros(2, 2);
    m[(EXCITED, EXCITED)] = C64::new(kappa * ee, 0.0);
    // equals 1 - kappa*ee for unit trace, and is exact at kappa = 1
    m[(GROUND, GROUND)] = C64::new(rho0.population(GROUND) + (1.0 - kappa) * ee, 0.0);
    let root = kappa.sqrt();
    m[(EXCITED, GROUND)] = rho0.entry(EXCITED, GROUND) * root;
    m[(GROUND, EXCITED)] = rho0.entry(GROUND, EXCITED) * root;
    Ok(DensityMatrix::from_raw(m))
}

/// Column-stacking index of the matrix unit `|k><l|` in dimension `d`.
pub fn vec_index(d: usize, k: usize, l: usize) -> usize {
    k + l * d
}

/// The `d^2 x d^2` matrix of `Phi_t`: column `vec_index(k, l)` holds
/// `vec(Phi_t(|k><l|))` in column-stacking order.
pub fn dynamical_map(g: &TimeLocalGenerator, t: f64, dt: f64) -> Result<CMatrix> {
    Ok(dynamical_maps(g, &[t], dt)?.pop().expect("one map per requested time"))
}

/// Maps `Phi_t` for every `t` in `times`, from a single pass per matrix unit.
pub fn dynamical_maps(g: &TimeLocalGenerator, times: &[f64], dt: f64) -> Result<Vec<CMatrix>> {
    let d = g.dim();
    if times.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
        return Err(domain("map times must be finite and >= 0"));
    }
    let t_max = times.iter().copied().fold(0.0, f64::max);
    let grid = generator_grid(g, t_max, dt, times)?;
    let slots: Vec<usize> = times
        .iter()
        .map(|t| {
            let i = grid.times.partition_point(|s| *s < t - 1e-9);
            i.min(grid.times.len() - 1)
        })
        .collect();

    // One column of every requested map per matrix unit.
    let columns: Vec<Vec<CMatrix>> = (0..d * d)
        .into_par_iter()
        .map(|unit| {
            let (k, l) = (unit % d, unit / d);
            let mut e = CMatrix::zeros(d, d);
            e[(k, l)] = C64::new(1.0, 0.0);
            let mut out = vec![CMatrix::zeros(d, d); times.len()];
            evolve(g, &e, &grid, false, |i, m| {
                for (slot, target) in slots.iter().zip(out.iter_mut()) {
                    if *slot == i {
                        *target = m.clone();
                    }
                }
            })?;
            Ok(out)
        })
        .collect::<Result<_>>()?;

    Ok((0..times.len())
        .map(|s| {
            let mut map = CMatrix::zeros(d * d, d * d);
            for (unit, col) in columns.iter().enumerate() {
                map.column_mut(unit).copy_from_slice(col[s].as_slice());
            }
            map
        })
        .collect())
}

/// `Phi(rho)` from the map matrix.
pub fn apply_map(map: &CMatrix, rho: &CMatrix) -> CMatrix {
    let d = rho.nrows();
    let v = nalgebra::DVector::from_column_slice(rho.as_slice());
    let out = map * v;
    CMatrix::from_column_slice(d, d, out.as_slice())
}

/// Choi matrix `C = sum_kl |k><l| (x) Phi(|k><l|)`; block `(k, l)` of `C` is
/// `Phi(|k><l|)`. The map is CP iff `C` is positive semidefinite.
pub fn choi_matrix(map: &CMatrix, d: usize) -> CMatrix {
    CMatrix::from_fn(d * d, d * d, |row, col| {
        let (k, i) = (row / d, row % d);
        let (l, j) = (col / d, col % d);
        map[(vec_index(d, i, j), vec_index(d, k, l))]
    })
}

/// Result of a Choi-spectrum test at one time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChoiReport {
    pub time: f64,
    pub min_eigenvalue: f64,
    pub is_cp: bool,
    pub tolerance: f64,
}

/// Builds `Phi_t` on `t_grid` and reports whether each is completely positive.
pub fn cp_check(g: &TimeLocalGenerator, t_grid: &[f64], dt: f64, tol: f64) -> Result<Vec<ChoiReport>> {
    if !(tol.is_finite() && tol > 0.0) {
        return Err(domain(format!("CP tolerance must be positive, got {tol}")));
    }
    let d = g.dim();
    let maps = dynamical_maps(g, t_grid, dt)?;
    Ok(t_grid
        .iter()
        .zip(maps)
        .map(|(&time, map)| {
            let min_eigenvalue = hermitian_eigenvalues(&choi_matrix(&map, d))[0];
            ChoiReport {
                time,
                min_eigenvalue,
                is_cp: min_eigenvalue >= -tol,
                tolerance: tol,
            }
        })
        .collect())
}
