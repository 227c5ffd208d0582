//! Executes built-in scenarios and configured systems and writes the data
//! and metadata files.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use thiserror::Error;
use timelocal_core::classical::{integrate_sampled, sample_ensemble};
use timelocal_core::integrator::{cp_check, propagate_sampled, PropagationResult, DEFAULT_CP_TOLERANCE};
use timelocal_core::mcwf::{run_ensemble, EnsembleOptions};
use timelocal_core::nmqj::{run_ensemble_nm, StepStats};
use timelocal_core::TimeLocalGenerator;

use crate::config::{initial_counts, initial_density, sha256_json, Engine, Format, Model, ScenarioConfig, SCHEMA_VERSION};
use crate::output::{metadata_path, write_file, write_metadata, Cell, GuardReport, GuardStats, RunMetadata, Table, GUARD_ERROR, GUARD_WARN};
use crate::scenarios::{self, Scenario};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RunError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("I/O error: {0}")]
    Io(String),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            RunError::Numerical(_) => 3,
            RunError::Io(_) => 4,
        }
    }
}

impl From<timelocal_core::Error> for RunError {
    fn from(e: timelocal_core::Error) -> Self {
        if e.is_numerical() {
            RunError::Numerical(e.to_string())
        } else {
            RunError::Config(e.to_string())
        }
    }
}

/// Resolved numerical parameters of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RunParams {
    pub t_end: f64,
    pub dt: f64,
    pub stride: usize,
    pub ensemble_size: Option<u64>,
    pub seed: u64,
}

impl RunParams {
    /// Stored times `k * stride * dt` up to `t_end`, which is always included.
    pub fn output_times(&self) -> Vec<f64> {
        let mut times = Vec::new();
        let mut k = 0usize;
        loop {
            let t = (k * self.stride) as f64 * self.dt;
            if t > self.t_end + 1e-9 {
                break;
            }
            times.push(t);
            k += 1;
        }
        if times.last().is_some_and(|&t| (t - self.t_end).abs() > 1e-9) {
            times.push(self.t_end);
        }
        times
    }

    pub fn ensemble_size(&self) -> u64 {
        self.ensemble_size.unwrap_or(crate::config::DEFAULT_ENSEMBLE_SIZE)
    }

    pub(crate) fn ensemble_options(&self) -> EnsembleOptions {
        EnsembleOptions::new(self.t_end, self.dt, self.ensemble_size() as usize, self.seed).with_stride(self.stride)
    }
}

/// Table plus diagnostics of one run.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub table: Table,
    pub guard: Option<GuardStats>,
    pub warnings: Vec<String>,
}

impl Outcome {
    pub fn deterministic(table: Table) -> Self {
        Outcome {
            table,
            guard: None,
            warnings: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub dt: Option<f64>,
    pub format: Option<Format>,
    pub out: Option<PathBuf>,
}

pub enum Job {
    Builtin { scenario: &'static Scenario, params: RunParams },
    Config(Box<ScenarioConfig>),
}

impl Job {
    pub fn builtin(name: &str, o: &Overrides) -> Result<Self, RunError> {
        let scenario = scenarios::find(name).ok_or_else(|| {
            let known: Vec<_> = scenarios::builtins().iter().map(|s| s.name).collect();
            RunError::Config(format!("scenario: unknown name `{name}` (known: {})", known.join(", ")))
        })?;
        let mut params = scenario.defaults;
        if let Some(dt) = o.dt {
            check_dt(dt, params.t_end)?;
            params.dt = dt;
        }
        if let Some(seed) = o.seed {
            params.seed = seed;
        }
        Ok(Job::Builtin { scenario, params })
    }

    pub fn config(mut cfg: ScenarioConfig, o: &Overrides) -> Result<Self, RunError> {
        if let Some(dt) = o.dt {
            check_dt(dt, cfg.t_end)?;
            cfg.dt = dt;
        }
        if let Some(seed) = o.seed {
            cfg.seed = seed;
        }
        if let Some(f) = o.format {
            cfg.format = f;
        }
        if let Some(out) = &o.out {
            cfg.output = Some(out.clone());
        }
        cfg.validate()?;
        Ok(Job::Config(Box::new(cfg)))
    }

    pub fn name(&self) -> &str {
        match self {
            Job::Builtin { scenario, .. } => scenario.name,
            Job::Config(cfg) => &cfg.name,
        }
    }

    pub fn engine(&self) -> String {
        match self {
            Job::Builtin { scenario, .. } => scenario.engine.to_string(),
            Job::Config(cfg) => cfg.engine.to_string(),
        }
    }

    pub fn params(&self) -> RunParams {
        match self {
            Job::Builtin { params, .. } => *params,
            Job::Config(cfg) => RunParams {
                t_end: cfg.t_end,
                dt: cfg.dt,
                stride: cfg.stride,
                ensemble_size: cfg.engine.uses_ensemble().then(|| cfg.ensemble_size()),
                seed: cfg.seed,
            },
        }
    }

    pub fn config_hash(&self) -> String {
        match self {
            Job::Builtin { scenario, params } => {
                sha256_json(&serde_json::json!({ "scenario": scenario.name, "params": params }))
            }
            Job::Config(cfg) => cfg.hash(),
        }
    }

    pub fn execute(&self) -> Result<Outcome, RunError> {
        let outcome = match self {
            Job::Builtin { scenario, params } => (scenario.run)(params)?,
            Job::Config(cfg) => run_config(cfg)?,
        };
        if let Some(g) = &outcome.guard {
            if g.max_step_probability > GUARD_ERROR {
                return Err(RunError::Numerical(format!(
                    "largest jump probability per step {} exceeds {GUARD_ERROR}; reduce dt",
                    g.max_step_probability
                )));
            }
        }
        Ok(outcome)
    }

    fn default_output(&self, format: Format) -> PathBuf {
        match self {
            Job::Config(cfg) if cfg.output.is_some() => cfg.output.clone().expect("checked"),
            _ => PathBuf::from(format!("{}.{}", self.name(), format.extension())),
        }
    }

    fn default_format(&self) -> Format {
        match self {
            Job::Config(cfg) => cfg.format,
            Job::Builtin { .. } => Format::Csv,
        }
    }
}

fn check_dt(dt: f64, t_end: f64) -> Result<(), RunError> {
    if !(dt.is_finite() && dt > 0.0 && dt <= t_end) {
        return Err(RunError::Config(format!("dt: must lie in (0, t_end = {t_end}], got {dt}")));
    }
    Ok(())
}

pub struct RunSummary {
    pub data_path: PathBuf,
    pub metadata_path: PathBuf,
    pub metadata: RunMetadata,
}

/// Runs the job and writes `<out>` plus `<out>.meta.json`.
pub fn run_to_files(job: &Job, format: Option<Format>, out: Option<&Path>) -> Result<RunSummary, RunError> {
    let format = format.unwrap_or_else(|| job.default_format());
    let data_path = out.map(Path::to_path_buf).unwrap_or_else(|| job.default_output(format));
    let start = Instant::now();
    let mut outcome = job.execute()?;
    let wall_time_s = start.elapsed().as_secs_f64();

    let guard = outcome.guard.map(GuardReport::new);
    if let Some(g) = &guard {
        if g.stats.max_step_probability > GUARD_WARN {
            outcome.warnings.push(format!(
                "largest jump probability per step {} exceeds {GUARD_WARN}",
                g.stats.max_step_probability
            ));
        }
    }
    for w in &outcome.warnings {
        log::warn!("{}: {w}", job.name());
    }

    write_file(&data_path, &outcome.table.encode(format))?;
    let params = job.params();
    let metadata = RunMetadata {
        toolkit_version: env!("CARGO_PKG_VERSION"),
        schema_version: SCHEMA_VERSION,
        scenario: job.name().to_string(),
        engine: job.engine(),
        config_hash: job.config_hash(),
        seed: params.seed,
        dt: params.dt,
        t_end: params.t_end,
        stride: params.stride,
        ensemble_size: params.ensemble_size,
        threads: rayon::current_num_threads(),
        wall_time_s,
        data_file: data_path.display().to_string(),
        format,
        rows: outcome.table.rows.len(),
        guard,
        warnings: outcome.warnings,
    };
    let meta_path = metadata_path(&data_path);
    write_metadata(&meta_path, &metadata)?;
    Ok(RunSummary {
        data_path,
        metadata_path: meta_path,
        metadata,
    })
}

fn quantum_columns(d: usize) -> Vec<String> {
    let mut cols = vec!["t".to_string(), "series".to_string()];
    cols.extend((1..=d).map(|i| format!("p{i}")));
    for i in 1..=d {
        for j in i + 1..=d {
            cols.push(format!("rho_{i}_{j}_re"));
            cols.push(format!("rho_{i}_{j}_im"));
        }
    }
    cols
}

fn quantum_table(series: &str, run: &PropagationResult, d: usize) -> Table {
    let mut table = Table::new(quantum_columns(d));
    for (t, rho) in run.times.iter().zip(&run.states) {
        let mut row: Vec<Cell> = vec![(*t).into(), series.into()];
        row.extend((0..d).map(|i| Cell::Num(rho.population(i))));
        for i in 0..d {
            for j in i + 1..d {
                let z = rho.entry(i, j);
                row.push(z.re.into());
                row.push(z.im.into());
            }
        }
        table.push(row);
    }
    table
}

pub(crate) fn cp_table(profiles: &[(&str, TimeLocalGenerator)], times: &[f64], dt: f64) -> Result<Table, RunError> {
    let single = profiles.iter().all(|(_, g)| g.channels().len() == 1);
    let mut cols = vec!["t", "series", "min_choi_eigenvalue", "is_cp"];
    if single {
        cols.push("rate_integral");
    }
    let mut table = Table::new(cols);
    for (label, g) in profiles {
        for report in cp_check(g, times, dt, DEFAULT_CP_TOLERANCE)? {
            let mut row: Vec<Cell> = vec![
                report.time.into(),
                (*label).into(),
                report.min_eigenvalue.into(),
                report.is_cp.into(),
            ];
            if single {
                row.push(g.channels()[0].rate().integral(0.0, report.time)?.into());
            }
            table.push(row);
        }
    }
    Ok(table)
}

pub(crate) fn nmqj_guard(stats: &StepStats) -> GuardStats {
    GuardStats {
        max_step_probability: stats.max_bare_probability,
        max_weighted_probability: stats.max_probability,
        saturated_steps: stats.saturated,
    }
}

pub(crate) fn nmqj_warnings(stats: &StepStats) -> Vec<String> {
    let mut warnings = Vec::new();
    if stats.saturated > 0 {
        warnings.push(format!("{} steps had reversed-jump totals above one and were rescaled", stats.saturated));
    }
    if stats.zero_target_reversals > 0 {
        warnings.push(format!("{} reversed jumps went into an empty target", stats.zero_target_reversals));
    }
    if stats.unmatched_reversals > 0 {
        warnings.push(format!(
            "{} member-steps under a negative rate found no member to return to (jump results drifted, e.g. under a drive); the negative part of the rate was not applied there",
            stats.unmatched_reversals
        ));
    }
    warnings
}

pub(crate) fn classical_columns(n: usize, series: &str) -> Vec<String> {
    let mut cols = vec!["t".to_string(), series.to_string()];
    cols.extend((1..=n).map(|i| format!("p{i}")));
    cols
}

/// Runs a configured system with its engine.
pub fn run_config(cfg: &ScenarioConfig) -> Result<Outcome, RunError> {
    let job = Job::Config(Box::new(cfg.clone()));
    let params = job.params();
    match (cfg.model()?, cfg.engine) {
        (Model::Quantum { generator, psi0 }, Engine::Ode) => {
            let run = propagate_sampled(&generator, &initial_density(&psi0), cfg.t_end, cfg.dt, cfg.stride)?;
            Ok(Outcome::deterministic(quantum_table("ode", &run, generator.dim())))
        }
        (Model::Quantum { generator, psi0 }, Engine::Mcwf) => {
            let run = run_ensemble(&generator, &psi0, &params.ensemble_options())?;
            Ok(Outcome {
                table: quantum_table("mcwf", &run.result, generator.dim()),
                guard: Some(GuardStats {
                    max_step_probability: run.max_step_probability,
                    max_weighted_probability: run.max_step_probability,
                    saturated_steps: 0,
                }),
                warnings: Vec::new(),
            })
        }
        (Model::Quantum { generator, psi0 }, Engine::Nmqj) => {
            let run = run_ensemble_nm(&generator, &psi0, &params.ensemble_options())?;
            Ok(Outcome {
                table: quantum_table("nmqj", &run.result, generator.dim()),
                guard: Some(nmqj_guard(&run.stats)),
                warnings: nmqj_warnings(&run.stats),
            })
        }
        (Model::Quantum { generator, .. }, Engine::CpAudit) => {
            let times = cfg.cp_times.clone().unwrap_or_else(|| params.output_times());
            Ok(Outcome::deterministic(cp_table(&[("cp", generator)], &times, cfg.dt)?))
        }
        (Model::Classical { spec, p0 }, Engine::ClassicalOde) => {
            let run = integrate_sampled(&spec, &p0, cfg.t_end, cfg.dt, cfg.stride, &[])?;
            let mut table = Table::new(classical_columns(spec.n(), "series"));
            for (t, p) in run.times.iter().zip(&run.states) {
                let mut row: Vec<Cell> = vec![(*t).into(), "ode".into()];
                row.extend(p.as_slice().iter().map(|&x| Cell::Num(x)));
                table.push(row);
            }
            Ok(Outcome::deterministic(table))
        }
        (Model::Classical { spec, p0 }, Engine::ClassicalEnsemble) => {
            let c0 = initial_counts(&p0, cfg.ensemble_size())?;
            let run = sample_ensemble(&spec, &c0, cfg.t_end, cfg.dt, cfg.seed, cfg.stride)?;
            let mut table = Table::new(classical_columns(spec.n(), "series"));
            for (t, c) in run.times.iter().zip(&run.ensembles) {
                let mut row: Vec<Cell> = vec![(*t).into(), "ensemble".into()];
                row.extend(c.fractions().into_iter().map(Cell::Num));
                table.push(row);
            }
            let mut warnings = Vec::new();
            if run.saturated > 0 {
                warnings.push(format!("{} steps had reversed-jump totals above one and were rescaled", run.saturated));
            }
            Ok(Outcome {
                table,
                guard: Some(GuardStats {
                    max_step_probability: run.max_bare_probability,
                    max_weighted_probability: run.max_probability,
                    saturated_steps: run.saturated,
                }),
                warnings,
            })
        }
        (_, engine) => Err(RunError::Config(format!("engine: `{engine}` does not match the system kind"))),
    }
}
