//! States, dissipation channels and the time-local generator.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;

use crate::error::{domain, structural, Result};
use crate::rates::RateFunction;

pub type C64 = Complex64;
pub type CMatrix = DMatrix<C64>;
pub type CVector = DVector<C64>;

/// Index of the excited state `|e>` in the two-level basis `{|e>, |g>}`.
pub const EXCITED: usize = 0;
/// Index of the ground state `|g>`.
pub const GROUND: usize = 1;

/// Two state vectors closer than this (modulo global phase) are the same state.
pub const PHASE_MATCH_TOLERANCE: f64 = 1e-9;

const I: C64 = C64::new(0.0, 1.0);

/// Lowering operator `|g><e|` in the `{|e>, |g>}` basis.
pub fn sigma_minus() -> CMatrix {
    let mut m = CMatrix::zeros(2, 2);
    m[(GROUND, EXCITED)] = C64::new(1.0, 0.0);
    m
}

/// Matrix unit `|k><l|` of dimension `d`.
pub fn transition(d: usize, k: usize, l: usize) -> CMatrix {
    let mut m = CMatrix::zeros(d, d);
    m[(k, l)] = C64::new(1.0, 0.0);
    m
}

/// Largest entrywise deviation from Hermiticity.
pub fn hermiticity_defect(m: &CMatrix) -> f64 {
    let d = m.nrows();
    let mut worst: f64 = 0.0;
    for i in 0..d {
        for j in i..d {
            worst = worst.max((m[(i, j)] - m[(j, i)].conj()).norm());
        }
    }
    worst
}

/// Real eigenvalues of a Hermitian matrix, ascending. The input is
/// symmetrized first so tiny anti-Hermitian noise is ignored.
pub fn hermitian_eigenvalues(m: &CMatrix) -> Vec<f64> {
    let h = (m + m.adjoint()).scale(0.5);
    let mut ev: Vec<f64> = SymmetricEigen::new(h).eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

/// A normalized pure state `|psi>`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector(CVector);

impl StateVector {
    /// Normalizes `amplitudes`; fails on a (numerically) null vector.
    pub fn new(amplitudes: CVector) -> Result<Self> {
        let norm = amplitudes.norm();
        if !(norm.is_finite() && norm > 1e-12) {
            return Err(domain(format!("cannot normalize state vector with norm {norm:e}")));
        }
        Ok(StateVector(amplitudes.unscale(norm)))
    }

    pub fn from_slice(amplitudes: &[C64]) -> Result<Self> {
        Self::new(CVector::from_column_slice(amplitudes))
    }

    pub fn basis(d: usize, k: usize) -> Result<Self> {
        if k >= d {
            return Err(domain(format!("basis index {k} out of range for dimension {d}")));
        }
        let mut v = CVector::zeros(d);
        v[k] = C64::new(1.0, 0.0);
        Ok(StateVector(v))
    }

    pub(crate) fn from_normalized(v: CVector) -> Self {
        StateVector(v)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn amplitudes(&self) -> &CVector {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.norm()
    }

    /// `min_theta || self - e^{i theta} other ||`.
    pub fn phase_distance(&self, other: &StateVector) -> f64 {
        if self.dim() != other.dim() {
            return f64::INFINITY;
        }
        let overlap = other.0.dotc(&self.0);
        let phase = if overlap.norm() > 0.0 {
            overlap / overlap.norm()
        } else {
            C64::new(1.0, 0.0)
        };
        self.0
            .iter()
            .zip(other.0.iter())
            .map(|(a, b)| (a - phase * b).norm_sqr())
            .sum::<f64>()
            .sqrt()
    }

    pub fn same_ray(&self, other: &StateVector) -> bool {
        self.phase_distance(other) <= PHASE_MATCH_TOLERANCE
    }

    /// `<psi| A |psi>`.
    pub fn expectation(&self, a: &CMatrix) -> C64 {
        self.0.dotc(&(a * &self.0))
    }

    pub fn projector(&self) -> CMatrix {
        &self.0 * self.0.adjoint()
    }
}

/// A density matrix: Hermitian with unit trace. Positivity is deliberately not
/// part of the type; that is what the CP audit measures.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix(CMatrix);

impl DensityMatrix {
    pub fn new(m: CMatrix) -> Result<Self> {
        if !m.is_square() {
            return Err(structural(format!("density matrix must be square, got {}x{}", m.nrows(), m.ncols())));
        }
        let defect = hermiticity_defect(&m);
        if defect > 1e-10 {
            return Err(domain(format!("density matrix not Hermitian (defect {defect:e})")));
        }
        let tr = m.trace();
        if (tr - C64::new(1.0, 0.0)).norm() > 1e-9 {
            return Err(domain(format!("density matrix trace is {tr}, expected 1")));
        }
        Ok(DensityMatrix(m))
    }

    pub fn pure(psi: &StateVector) -> Self {
        DensityMatrix(psi.projector())
    }

    /// Symmetrizes and renormalizes the trace. Used on integrator output where
    /// the drift is round-off sized.
    pub(crate) fn project(m: CMatrix) -> Self {
        let mut h = (&m + m.adjoint()).scale(0.5);
        let tr = h.trace().re;
        if tr != 0.0 && tr.is_finite() {
            h.unscale_mut(tr);
        }
        DensityMatrix(h)
    }

    pub(crate) fn from_raw(m: CMatrix) -> Self {
        DensityMatrix(m)
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.0
    }

    pub fn into_matrix(self) -> CMatrix {
        self.0
    }

    pub fn entry(&self, i: usize, j: usize) -> C64 {
        self.0[(i, j)]
    }

    pub fn population(&self, i: usize) -> f64 {
        self.0[(i, i)].re
    }

    pub fn min_eigenvalue(&self) -> f64 {
        hermitian_eigenvalues(&self.0)[0]
    }

    pub fn max_abs_diff(&self, other: &DensityMatrix) -> f64 {
        (&self.0 - &other.0).iter().map(|z| z.norm()).fold(0.0, f64::max)
    }
}

/// One dissipation channel `gamma_i(t) (L rho L^+ - {L^+ L, rho}/2)`.
#[derive(Debug, Clone)]
pub struct Channel {
    operator: CMatrix,
    adjoint: CMatrix,
    number: CMatrix,
    rate: RateFunction,
    label: String,
}

impl Channel {
    pub fn new(operator: CMatrix, rate: RateFunction, label: impl Into<String>) -> Result<Self> {
        let label = label.into();
        if !operator.is_square() {
            return Err(structural(format!("Lindblad operator `{label}` must be square")));
        }
        if operator.iter().all(|z| *z == C64::new(0.0, 0.0)) {
            return Err(domain(format!("Lindblad operator `{label}` is identically zero")));
        }
        rate.validate()?;
        let adjoint = operator.adjoint();
        let number = &adjoint * &operator;
        Ok(Channel {
            operator,
            adjoint,
            number,
            rate,
            label,
        })
    }

    pub fn operator(&self) -> &CMatrix {
        &self.operator
    }

    /// `L^+ L`.
    pub fn number_operator(&self) -> &CMatrix {
        &self.number
    }

    pub fn rate(&self) -> &RateFunction {
        &self.rate
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn dim(&self) -> usize {
        self.operator.nrows()
    }
}

/// Right-hand side of the time-local master equation with a constant
/// Hamiltonian and constant Lindblad operators.
#[derive(Debug, Clone)]
pub struct TimeLocalGenerator {
    hamiltonian: CMatrix,
    channels: Vec<Channel>,
}

impl TimeLocalGenerator {
    pub fn new(hamiltonian: CMatrix, channels: Vec<Channel>) -> Result<Self> {
        if !hamiltonian.is_square() {
            return Err(structural("Hamiltonian must be square"));
        }
        let defect = hermiticity_defect(&hamiltonian);
        if defect > 1e-12 {
            return Err(domain(format!("Hamiltonian not Hermitian (defect {defect:e})")));
        }
        let d = hamiltonian.nrows();
        if d == 0 {
            return Err(structural("dimension must be at least 1"));
        }
        if let Some(c) = channels.iter().find(|c| c.dim() != d) {
            return Err(structural(format!(
                "channel `{}` has dimension {}, Hamiltonian has {d}",
                c.label,
                c.dim()
            )));
        }
        Ok(TimeLocalGenerator {
            hamiltonian,
            channels,
        })
    }

    /// Two-level system with `H = 0` and the single channel `sigma_-`.
    pub fn two_level_decay(rate: RateFunction) -> Result<Self> {
        Self::new(
            CMatrix::zeros(2, 2),
            vec![Channel::new(sigma_minus(), rate, "sigma_minus")?],
        )
    }

    pub fn dim(&self) -> usize {
        self.hamiltonian.nrows()
    }

    pub fn hamiltonian(&self) -> &CMatrix {
        &self.hamiltonian
    }

    pub fn channels(&self) -> &[Channel] {
        &self.channels
    }

    /// Right-continuous channel rates at `t`.
    pub fn rates_at(&self, t: f64) -> Result<Vec<f64>> {
        self.channels.iter().map(|c| c.rate.evaluate(t)).collect()
    }

    /// Channel rates as limits from below at `t`.
    pub fn rates_left_of(&self, t: f64) -> Result<Vec<f64>> {
        self.channels.iter().map(|c| c.rate.evaluate_left(t)).collect()
    }

    /// Union of the channel rate breakpoints in `(t0, t1]`.
    pub fn breakpoints(&self, t0: f64, t1: f64) -> Result<Vec<f64>> {
        let mut all = Vec::new();
        for c in &self.channels {
            all.extend(c.rate.breakpoints(t0, t1)?);
        }
        Ok(crate::rates::dedup_sorted(all))
    }

    /// `d rho / dt` at time `t`. Works on any square matrix (the map is
    /// linear), not only on valid density matrices.
    pub fn apply(&self, rho: &CMatrix, t: f64) -> Result<CMatrix> {
        let rates = self.rates_at(t)?;
        self.apply_with_rates(rho, &rates)
    }

    pub fn apply_to(&self, rho: &DensityMatrix, t: f64) -> Result<CMatrix> {
        self.apply(rho.matrix(), t)
    }

    pub fn apply_with_rates(&self, rho: &CMatrix, rates: &[f64]) -> Result<CMatrix> {
        let d = self.dim();
        if rho.nrows() != d || rho.ncols() != d {
            return Err(structural(format!(
                "state is {}x{}, generator acts on dimension {d}",
                rho.nrows(),
                rho.ncols()
            )));
        }
        let h = &self.hamiltonian;
        let mut out = (h * rho - rho * h) * (-I);
        for (c, &g) in self.channels.iter().zip(rates) {
            if g == 0.0 {
                continue;
            }
            let jump = &c.operator * rho * &c.adjoint;
            let anti = &c.number * rho + rho * &c.number;
            out += (jump - anti.scale(0.5)).scale(g);
        }
        Ok(out)
    }

    /// `H - (i/2) sum_i gamma_i(t) L_i^+ L_i`.
    pub fn effective_hamiltonian(&self, t: f64) -> Result<CMatrix> {
        let rates = self.rates_at(t)?;
        Ok(self.effective_hamiltonian_with_rates(&rates))
    }

    pub(crate) fn effective_hamiltonian_with_rates(&self, rates: &[f64]) -> CMatrix {
        let mut heff = self.hamiltonian.clone();
        for (c, &g) in self.channels.iter().zip(rates) {
            if g != 0.0 {
                heff -= c.number.scale(0.5 * g) * I;
            }
        }
        heff
    }
}
