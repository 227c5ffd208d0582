//! JSON run configuration (schema version 1).
//!
//! State indices in a configuration are 1-based, matching the `p1..pn`
//! columns of the output. Complex numbers are `[re, im]` pairs.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use timelocal_core::classical::{build_ring, build_two_state, RingVariant, TwoStateVariant};
use timelocal_core::quantum::CMatrix;
use timelocal_core::{
    Channel, ClassicalEnsemble, DensityMatrix, ProbabilityVector, RateFunction, RateMatrixSpec, StateVector,
    TimeLocalGenerator, C64,
};

use crate::runner::RunError;

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_ENSEMBLE_SIZE: u64 = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Engine {
    Ode,
    Mcwf,
    Nmqj,
    ClassicalOde,
    ClassicalEnsemble,
    CpAudit,
}

impl Engine {
    pub fn is_quantum(self) -> bool {
        !matches!(self, Engine::ClassicalOde | Engine::ClassicalEnsemble)
    }

    pub fn uses_ensemble(self) -> bool {
        matches!(self, Engine::Mcwf | Engine::Nmqj | Engine::ClassicalEnsemble)
    }

    pub fn name(self) -> &'static str {
        match self {
            Engine::Ode => "ode",
            Engine::Mcwf => "mcwf",
            Engine::Nmqj => "nmqj",
            Engine::ClassicalOde => "classical-ode",
            Engine::ClassicalEnsemble => "classical-ensemble",
            Engine::CpAudit => "cp-audit",
        }
    }
}

impl fmt::Display for Engine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Csv,
    Json,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }
}

pub type Complex = [f64; 2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelSpec {
    pub label: String,
    pub operator: Vec<Vec<Complex>>,
    pub rate: RateFunction,
}

/// One rate `gamma_{to,from}` of a classical chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateEntry {
    pub to: usize,
    pub from: usize,
    pub rate: RateFunction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SystemSpec {
    /// General generator; the Hamiltonian defaults to zero.
    Quantum {
        dim: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        hamiltonian: Option<Vec<Vec<Complex>>>,
        channels: Vec<ChannelSpec>,
    },
    /// Two-level system with the single channel `sigma_-`; basis state 1 is
    /// the excited state.
    TwoLevelDecay { rate: RateFunction },
    Chain {
        n: usize,
        rates: Vec<RateEntry>,
    },
    Ring {
        variant: RingVariant,
        gamma: f64,
        #[serde(default = "four")]
        n: usize,
    },
    TwoState {
        variant: TwoStateVariant,
        gamma: f64,
        s1: f64,
        s2: f64,
    },
}

fn four() -> usize {
    4
}

impl SystemSpec {
    pub fn is_quantum(&self) -> bool {
        matches!(self, SystemSpec::Quantum { .. } | SystemSpec::TwoLevelDecay { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialState {
    /// 1-based basis state (quantum) or chain state (classical).
    Basis(usize),
    Amplitudes(Vec<Complex>),
    Probabilities(Vec<f64>),
}

impl Default for InitialState {
    fn default() -> Self {
        InitialState::Basis(1)
    }
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub schema_version: u32,
    pub name: String,
    pub engine: Engine,
    pub system: SystemSpec,
    #[serde(default)]
    pub initial: InitialState,
    pub t_end: f64,
    pub dt: f64,
    #[serde(default = "one")]
    pub stride: usize,
    /// Trajectories (mcwf), ensemble members (nmqj, classical-ensemble).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ensemble_size: Option<u64>,
    #[serde(default)]
    pub seed: u64,
    /// Evaluation times of the CP audit; defaults to the output grid.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cp_times: Option<Vec<f64>>,
    #[serde(default)]
    pub format: Format,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

/// A validated system ready for an engine.
pub enum Model {
    Quantum { generator: TimeLocalGenerator, psi0: StateVector },
    Classical { spec: RateMatrixSpec, p0: ProbabilityVector },
}

fn config_error(field: &str, msg: impl fmt::Display) -> RunError {
    RunError::Config(format!("{field}: {msg}"))
}

fn complex_matrix(field: &str, rows: &[Vec<Complex>], d: usize) -> Result<CMatrix, RunError> {
    if rows.len() != d || rows.iter().any(|r| r.len() != d) {
        return Err(config_error(field, format!("expected a {d}x{d} matrix")));
    }
    let mut m = CMatrix::zeros(d, d);
    for (i, row) in rows.iter().enumerate() {
        for (j, z) in row.iter().enumerate() {
            if !(z[0].is_finite() && z[1].is_finite()) {
                return Err(config_error(field, format!("entry ({}, {}) is not finite", i + 1, j + 1)));
            }
            m[(i, j)] = C64::new(z[0], z[1]);
        }
    }
    Ok(m)
}

fn core_error(field: &str, e: timelocal_core::Error) -> RunError {
    config_error(field, e)
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self, RunError> {
        let cfg: ScenarioConfig =
            serde_json::from_str(text).map_err(|e| RunError::Config(format!("invalid configuration: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, RunError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| RunError::Io(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Checks the scalar fields and builds the model once to catch
    /// inconsistent system descriptions.
    pub fn validate(&self) -> Result<(), RunError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(config_error(
                "schema_version",
                format!("unsupported version {}, expected {SCHEMA_VERSION}", self.schema_version),
            ));
        }
        if self.name.trim().is_empty() {
            return Err(config_error("name", "must not be empty"));
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(config_error("dt", format!("must be a positive number of seconds, got {}", self.dt)));
        }
        if !(self.t_end.is_finite() && self.t_end > 0.0) {
            return Err(config_error("t_end", format!("must be positive, got {}", self.t_end)));
        }
        if self.dt > self.t_end {
            return Err(config_error("dt", format!("{} exceeds t_end = {}", self.dt, self.t_end)));
        }
        if self.stride == 0 {
            return Err(config_error("stride", "must be at least 1"));
        }
        if self.ensemble_size == Some(0) {
            return Err(config_error("ensemble_size", "must be at least 1"));
        }
        if self.engine.is_quantum() != self.system.is_quantum() {
            return Err(config_error(
                "engine",
                format!("`{}` cannot run a {} system", self.engine, if self.system.is_quantum() { "quantum" } else { "classical" }),
            ));
        }
        if let Some(times) = &self.cp_times {
            if self.engine != Engine::CpAudit {
                return Err(config_error("cp_times", "only used by the cp-audit engine"));
            }
            if let Some(t) = times.iter().find(|t| !(t.is_finite() && **t >= 0.0 && **t <= self.t_end)) {
                return Err(config_error("cp_times", format!("{t} lies outside [0, t_end]")));
            }
        }
        self.model().map(|_| ())
    }

    pub fn ensemble_size(&self) -> u64 {
        self.ensemble_size.unwrap_or(DEFAULT_ENSEMBLE_SIZE)
    }

    pub fn model(&self) -> Result<Model, RunError> {
        match &self.system {
            SystemSpec::Quantum {
                dim,
                hamiltonian,
                channels,
            } => {
                let d = *dim;
                if d < 2 {
                    return Err(config_error("system.dim", "must be at least 2"));
                }
                let h = match hamiltonian {
                    Some(rows) => complex_matrix("system.hamiltonian", rows, d)?,
                    None => CMatrix::zeros(d, d),
                };
                let mut chans = Vec::new();
                for (i, c) in channels.iter().enumerate() {
                    let field = format!("system.channels[{i}]");
                    let op = complex_matrix(&format!("{field}.operator"), &c.operator, d)?;
                    c.rate.validate().map_err(|e| core_error(&format!("{field}.rate"), e))?;
                    chans.push(Channel::new(op, c.rate.clone(), c.label.clone()).map_err(|e| core_error(&field, e))?);
                }
                let generator = TimeLocalGenerator::new(h, chans).map_err(|e| core_error("system", e))?;
                let psi0 = self.quantum_initial(d)?;
                Ok(Model::Quantum { generator, psi0 })
            }
            SystemSpec::TwoLevelDecay { rate } => {
                rate.validate().map_err(|e| core_error("system.rate", e))?;
                let generator = TimeLocalGenerator::two_level_decay(rate.clone()).map_err(|e| core_error("system", e))?;
                let psi0 = self.quantum_initial(2)?;
                Ok(Model::Quantum { generator, psi0 })
            }
            SystemSpec::Chain { n, rates } => {
                let mut entries = Vec::new();
                for (i, r) in rates.iter().enumerate() {
                    let field = format!("system.rates[{i}]");
                    if r.to == 0 || r.from == 0 || r.to > *n || r.from > *n {
                        return Err(config_error(&field, format!("states must lie in 1..={n}")));
                    }
                    r.rate.validate().map_err(|e| core_error(&format!("{field}.rate"), e))?;
                    entries.push((r.to - 1, r.from - 1, r.rate.clone()));
                }
                let spec = RateMatrixSpec::new(*n, entries, format!("chain ({n} states)")).map_err(|e| core_error("system", e))?;
                let p0 = self.classical_initial(*n)?;
                Ok(Model::Classical { spec, p0 })
            }
            SystemSpec::Ring { variant, gamma, n } => {
                let spec = build_ring(*variant, *gamma, *n).map_err(|e| core_error("system", e))?;
                let p0 = self.classical_initial(*n)?;
                Ok(Model::Classical { spec, p0 })
            }
            SystemSpec::TwoState { variant, gamma, s1, s2 } => {
                let spec = build_two_state(*variant, *gamma, *s1, *s2).map_err(|e| core_error("system", e))?;
                let p0 = self.classical_initial(2)?;
                Ok(Model::Classical { spec, p0 })
            }
        }
    }

    fn quantum_initial(&self, d: usize) -> Result<StateVector, RunError> {
        match &self.initial {
            InitialState::Basis(k) if (1..=d).contains(k) => Ok(StateVector::basis(d, k - 1).expect("index checked")),
            InitialState::Basis(k) => Err(config_error("initial.basis", format!("{k} outside 1..={d}"))),
            InitialState::Amplitudes(a) => {
                if a.len() != d {
                    return Err(config_error("initial.amplitudes", format!("expected {d} amplitudes, got {}", a.len())));
                }
                let amps: Vec<C64> = a.iter().map(|z| C64::new(z[0], z[1])).collect();
                StateVector::from_slice(&amps).map_err(|e| core_error("initial.amplitudes", e))
            }
            InitialState::Probabilities(_) => Err(config_error("initial", "quantum systems take `basis` or `amplitudes`")),
        }
    }

    fn classical_initial(&self, n: usize) -> Result<ProbabilityVector, RunError> {
        match &self.initial {
            InitialState::Basis(k) if (1..=n).contains(k) => Ok(ProbabilityVector::basis(n, k - 1).expect("index checked")),
            InitialState::Basis(k) => Err(config_error("initial.basis", format!("{k} outside 1..={n}"))),
            InitialState::Probabilities(p) => {
                if p.len() != n {
                    return Err(config_error("initial.probabilities", format!("expected {n} entries, got {}", p.len())));
                }
                ProbabilityVector::new(p.clone()).map_err(|e| core_error("initial.probabilities", e))
            }
            InitialState::Amplitudes(_) => Err(config_error("initial", "classical systems take `basis` or `probabilities`")),
        }
    }

    /// SHA-256 of the compact JSON serialization with the output location
    /// removed. Field order is fixed by the schema and floats print in
    /// shortest round-trip form, so the hash is platform independent.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output = None;
        c.format = Format::default();
        sha256_json(&c)
    }
}

pub fn sha256_json<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("configuration serializes");
    hex::encode(Sha256::digest(&bytes))
}

pub(crate) fn initial_density(psi: &StateVector) -> DensityMatrix {
    DensityMatrix::pure(psi)
}

pub(crate) fn initial_counts(p: &ProbabilityVector, n: u64) -> Result<ClassicalEnsemble, RunError> {
    ClassicalEnsemble::from_probabilities(p, n).map_err(|e| core_error("initial", e))
}
