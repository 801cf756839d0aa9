//! Task execution and JSON report assembly.

use std::time::Instant;

use nalgebra::DVector;
use serde_json::{json, Map, Value};

use super::scenario::{measure, ConfigError, Scenario, TaskKind, TaskSpec};
use crate::feynman_kac::estimate_lambda;
use crate::generator::{check_condition_a, Potential};
use crate::hohenberg_kohn::{
    equilibrium_marginal, hk_verify, i_hk, invert_potential, reduced_variational, HkConclusion, IhkOptions, InversionOptions,
    ReducedOptions,
};
use crate::measure::ProbMeasure;
use crate::multiparticle::is_symmetric;
use crate::rate_function::{dv_sup, rate_i, rate_iv_with, relative_entropy, BoundaryPolicy, RateOptions};
use crate::semigroup::{check_condition_b, growth_bound, SchrodingerOperator};
use crate::spectral::{averaged_ground_measure, doob_transform, principal_eigen_op, GroundData};

const DEFAULT_HORIZONS: [f64; 6] = [1.0, 2.0, 4.0, 8.0, 16.0, 32.0];
const DEFAULT_GRID_POINTS: usize = 1025;
const DEFAULT_MC_TIME: f64 = 50.0;
const DEFAULT_MC_PATHS: usize = 20_000;

/// JSON number, or `"infinity"` / `"-infinity"` / `"nan"` for non-finite values.
pub fn num(x: f64) -> Value {
    if x.is_finite() {
        json!(x)
    } else if x == f64::INFINITY {
        json!("infinity")
    } else if x == f64::NEG_INFINITY {
        json!("-infinity")
    } else {
        json!("nan")
    }
}

pub fn nums<'a>(xs: impl IntoIterator<Item = &'a f64>) -> Value {
    Value::Array(xs.into_iter().map(|&x| num(x)).collect())
}

/// Why a task produced no section.
#[derive(Debug, Clone, PartialEq)]
pub enum TaskFailure {
    Config(ConfigError),
    Compute(String),
}

impl<E: std::error::Error> From<E> for TaskFailure {
    fn from(e: E) -> Self {
        TaskFailure::Compute(e.to_string())
    }
}

fn config(task: &TaskSpec, field: &str, message: impl std::fmt::Display) -> TaskFailure {
    TaskFailure::Config(ConfigError::at(format!("tasks[{}].{field}", task.index), message))
}

/// A finished task: its report section plus measure-valued columns for CSV.
#[derive(Debug, Clone)]
pub struct TaskOutput {
    pub section: Map<String, Value>,
    pub measures: Vec<(String, Vec<f64>)>,
}

impl TaskOutput {
    fn new() -> Self {
        TaskOutput { section: Map::new(), measures: Vec::new() }
    }

    fn put(&mut self, key: &str, value: Value) {
        self.section.insert(key.to_string(), value);
    }

    fn measure(&mut self, key: &str, values: &DVector<f64>) {
        self.put(key, nums(values.iter()));
        self.measures.push((key.to_string(), values.iter().copied().collect()));
    }
}

struct Context<'a> {
    scenario: &'a Scenario,
    op: SchrodingerOperator,
    ground: Option<GroundData>,
}

impl Context<'_> {
    fn ground(&mut self) -> Result<&GroundData, TaskFailure> {
        if self.ground.is_none() {
            self.ground = Some(principal_eigen_op(&self.op)?);
        }
        Ok(self.ground.as_ref().expect("just computed"))
    }

    fn rate_options(&self) -> RateOptions {
        let tol = &self.scenario.tolerances;
        RateOptions {
            tol: tol.rate_gradient,
            dual_tol: tol.dual,
            seed: self.scenario.seed,
            boundary: BoundaryPolicy::RestrictToSupport,
            ..RateOptions::default()
        }
    }

    fn single_potential(&self, task: &TaskSpec) -> Result<&Potential, TaskFailure> {
        self.scenario.v.as_ref().ok_or_else(|| config(task, "v", "this task needs a single-particle potential \"v\""))
    }

    fn single_vector(&self, task: &TaskSpec, field: &str, values: &[f64]) -> Result<Potential, TaskFailure> {
        let d = self.scenario.q1.dim();
        if values.len() != d {
            return Err(config(task, field, format!("expected {d} entries, found {}", values.len())));
        }
        Potential::from_slice(values).map_err(|e| config(task, field, e))
    }

    fn target_marginal(&self, task: &TaskSpec, out: &mut TaskOutput) -> Result<(ProbMeasure, Option<Potential>), TaskFailure> {
        let sc = self.scenario;
        match &task.rho {
            Some(r) => Ok((measure(&format!("tasks[{}].rho", task.index), r, sc.q1.dim()).map_err(TaskFailure::Config)?, None)),
            None => {
                let v = self.single_potential(task)?.clone();
                let (_, rho) = equilibrium_marginal(&sc.tensor_system(), &sc.v0, &v)?;
                out.put("rho_source", json!("equilibrium marginal of v"));
                Ok((rho, Some(v)))
            }
        }
    }
}

fn validate(ctx: &mut Context) -> Result<TaskOutput, TaskFailure> {
    let sc = ctx.scenario;
    let q1 = &sc.q1;
    let mut out = TaskOutput::new();
    let row_sum = q1.rates().row_iter().map(|r| r.sum().abs()).fold(0.0, f64::max);
    out.put("single_particle_states", json!(q1.dim()));
    out.put("particles", json!(sc.particles()));
    out.put("states", json!(sc.states()));
    out.put("max_row_sum", num(row_sum));
    out.put("connected", json!(true));
    out.put("condition_a_epsilon", num(check_condition_a(q1, 1.0)?));
    out.put("condition_b", json!(check_condition_b(q1, 1.0)?));
    if let Some(sys) = &sc.system {
        let tol = 1e-12 * sc.potential.values().amax().max(1.0);
        out.put("potential_symmetric", json!(is_symmetric(sc.potential.values(), sys, tol)?));
    }
    Ok(out)
}

fn spectral(ctx: &mut Context) -> Result<TaskOutput, TaskFailure> {
    let sc = ctx.scenario;
    let gd = ctx.ground()?.clone();
    let mut out = TaskOutput::new();
    out.put("lambda", num(gd.lambda));
    out.measure("psi", &gd.psi);
    out.measure("pi", gd.pi.weights());
    out.measure("mu", gd.mu.weights());
    let (right, left) = gd.residuals(&ctx.op);
    out.put("residual_right", num(right));
    out.put("residual_left", num(left));
    let doob = doob_transform(sc.generator(), &sc.potential, &gd)?;
    let doob_rows = doob.rates().row_iter().map(|r| r.sum().abs()).fold(0.0, f64::max);
    out.put("doob_max_row_sum", num(doob_rows));
    out.put("doob_stationarity", num(doob.rates().tr_mul(gd.mu.weights()).amax()));
    let grid = sc.t_grid.clone().unwrap_or_else(|| (0..=50).map(f64::from).collect());
    out.put("growth_bound", num(growth_bound(&ctx.op, gd.lambda, &grid)?));
    Ok(out)
}

fn rate(ctx: &mut Context, task: &TaskSpec) -> Result<TaskOutput, TaskFailure> {
    let sc = ctx.scenario;
    let n = sc.states();
    let mu = match &task.mu {
        Some(m) => measure(&format!("tasks[{}].mu", task.index), m, n).map_err(TaskFailure::Config)?,
        None => ProbMeasure::uniform(n),
    };
    let opts = ctx.rate_options();
    let lambda = ctx.ground()?.lambda;
    let i = rate_i(sc.generator(), &mu, &opts)?;
    let iv = rate_iv_with(sc.generator(), &sc.potential, &mu, lambda, &opts)?;
    let dual = dv_sup(sc.generator(), &sc.potential, &opts)?;
    let mut out = TaskOutput::new();
    out.measure("mu", mu.weights());
    out.put("I", num(i.value));
    out.put("IV", num(iv));
    out.put("lambda", num(lambda));
    out.put("lambda_dual", num(dual.lambda_hat));
    out.put("duality_gap", num((dual.lambda_hat - lambda).abs()));
    out.measure("mu_star", dual.mu_star.weights());
    Ok(out)
}

fn hk_verify_task(ctx: &mut Context, task: &TaskSpec) -> Result<(TaskOutput, Option<String>), TaskFailure> {
    let sc = ctx.scenario;
    let v1 = match &task.v1 {
        Some(v) => ctx.single_vector(task, "v1", v)?,
        None => ctx.single_potential(task)?.clone(),
    };
    let v2 = match &task.v2 {
        Some(v) => ctx.single_vector(task, "v2", v)?,
        None => return Err(config(task, "v2", "hk-verify needs a second potential \"v2\"")),
    };
    let rep = hk_verify(&sc.tensor_system(), &sc.v0, &v1, &v2, sc.tolerances.hk)?;
    let mut out = TaskOutput::new();
    out.put("marginal_distance", num(rep.marginal_distance));
    out.put("potential_residual", num(rep.potential_residual));
    out.put("lambdas", nums([rep.lambdas.0, rep.lambdas.1].iter()));
    out.put("kappa", rep.kappa.map_or(Value::Null, num));
    out.put("strict_gaps", rep.strict_gaps.map_or(Value::Null, |(a, b)| nums([a, b].iter())));
    out.measure("rho1", &DVector::from_vec(rep.rho1.clone()));
    out.measure("rho2", &DVector::from_vec(rep.rho2.clone()));
    out.put("conclusion", json!(format!("{:?}", rep.conclusion)));
    let violation = (rep.conclusion == HkConclusion::Violation).then(|| "uniqueness check reported a violation".to_string());
    Ok((out, violation))
}

fn hk_invert(ctx: &mut Context, task: &TaskSpec) -> Result<TaskOutput, TaskFailure> {
    let sc = ctx.scenario;
    let mut out = TaskOutput::new();
    let (target, source) = ctx.target_marginal(task, &mut out)?;
    let tol = &sc.tolerances;
    let opts = InversionOptions { step: tol.inversion_step, tol: tol.inversion, max_iter: tol.inversion_max_iter };
    let inv = invert_potential(&sc.tensor_system(), &sc.v0, &target, &opts)?;
    out.measure("rho_target", target.weights());
    out.put("v_recovered", nums(inv.v_recovered.values().iter()));
    out.put("iterations", json!(inv.iterations));
    out.put("marginal_error", num(inv.marginal_error));
    out.put("converged", json!(inv.converged));
    if let Some(v) = source {
        let reference = v.centered();
        out.put("v_reference", nums(reference.values().iter()));
        out.put("recovery_error", num((inv.v_recovered.values() - reference.values()).amax()));
    }
    Ok(out)
}

fn ihk(ctx: &mut Context, task: &TaskSpec) -> Result<TaskOutput, TaskFailure> {
    let sc = ctx.scenario;
    let sys = sc.tensor_system();
    let mut out = TaskOutput::new();
    let (rho, _) = ctx.target_marginal(task, &mut out)?;
    let tol = &sc.tolerances;
    let opts = IhkOptions { tol: tol.ihk_violation, rate: RateOptions { tol: tol.rate_gradient, ..RateOptions::default() }, ..IhkOptions::default() };
    let r = i_hk(&sys, &sc.v0, &rho, &opts)?;
    out.measure("rho", rho.weights());
    out.put("I_HK", num(r.value));
    out.put("violation", num(r.violation));
    out.put("outer_iterations", json!(r.outer_iterations));
    out.put("multiplier", nums(r.multiplier.iter()));
    out.measure("mu", r.mu.weights());
    if task.reduced.unwrap_or(sc.v.is_some()) {
        let v = ctx.single_potential(task)?.clone();
        let reduced = reduced_variational(&sys, &sc.v0, &v, &ReducedOptions { tol: tol.reduced, ihk: opts, ..ReducedOptions::default() })?;
        let (lambda, rho_eq) = equilibrium_marginal(&sys, &sc.v0, &v)?;
        let mut sub = Map::new();
        sub.insert("lambda_hat".into(), num(reduced.lambda_hat));
        sub.insert("lambda_spectral".into(), num(lambda));
        sub.insert("rho_star".into(), nums(reduced.rho_star.weights().iter()));
        sub.insert("rho_equilibrium".into(), nums(rho_eq.weights().iter()));
        sub.insert("iterations".into(), json!(reduced.iterations));
        sub.insert("converged".into(), json!(reduced.converged));
        out.put("reduced", Value::Object(sub));
        out.measures.push(("rho_star".into(), reduced.rho_star.weights().iter().copied().collect()));
    }
    Ok(out)
}

fn mc(ctx: &mut Context, task: &TaskSpec) -> Result<TaskOutput, TaskFailure> {
    let sc = ctx.scenario;
    let t = task.t.unwrap_or(DEFAULT_MC_TIME);
    let paths = task.paths.unwrap_or(DEFAULT_MC_PATHS);
    let seed = task.seed.unwrap_or(sc.seed);
    let est = estimate_lambda(sc.generator(), &sc.potential, t, paths, seed)?;
    let lambda = ctx.ground()?.lambda;
    let mut out = TaskOutput::new();
    out.put("lambda_mc", num(est.estimate));
    out.put("stderr", num(est.std_error));
    out.put("lambda_spectral", num(lambda));
    out.put("t", num(t));
    out.put("paths", json!(paths));
    out.put("seed", json!(seed));
    Ok(out)
}

fn averaging(ctx: &mut Context, task: &TaskSpec) -> Result<TaskOutput, TaskFailure> {
    let sc = ctx.scenario;
    let gd = ctx.ground()?.clone();
    let horizons = task.horizons.clone().unwrap_or_else(|| DEFAULT_HORIZONS.to_vec());
    if horizons.is_empty() || horizons.iter().any(|t| !(*t > 0.0) || !t.is_finite()) {
        return Err(config(task, "horizons", "expected positive finite horizons"));
    }
    let grid_points = task.grid_points.unwrap_or(DEFAULT_GRID_POINTS);
    if grid_points < 2 {
        return Err(config(task, "grid_points", "need at least 2 grid points"));
    }
    let mu0 = match &task.mu0 {
        Some(m) => measure(&format!("tasks[{}].mu0", task.index), m, sc.states()).map_err(TaskFailure::Config)?,
        None => gd.mu.clone(),
    };
    let t_max = horizons.iter().copied().fold(0.0, f64::max);
    let grid = sc.t_grid.clone().unwrap_or_else(|| (0..=(4.0 * t_max).ceil() as usize).map(|k| k as f64 / 4.0).collect());
    let log_c = growth_bound(&ctx.op, gd.lambda, &grid)?.ln();

    let mut rows = Vec::with_capacity(horizons.len());
    let mut last = None;
    for &horizon in &horizons {
        let bar = averaged_ground_measure(&ctx.op, gd.lambda, &mu0, horizon, grid_points)?;
        rows.push(json!({
            "T": num(horizon),
            "tv_to_pi": num(bar.tv_distance(&gd.pi)),
            "entropy": num(relative_entropy(&gd.mu, &bar)),
        }));
        last = Some(bar);
    }
    let mut out = TaskOutput::new();
    out.put("log_growth_bound", num(log_c));
    out.put("horizons", Value::Array(rows));
    if let Some(bar) = last {
        out.measure("pi_bar", bar.weights());
    }
    out.measure("pi", gd.pi.weights());
    Ok(out)
}

/// Outcome of one scenario run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: Value,
    /// `(task name, measures)` for CSV emission.
    pub measures: Vec<(String, Vec<(String, Vec<f64>)>)>,
    pub config_error: bool,
    pub compute_error: bool,
}

/// Runs every task of `scenario` in order and assembles the report.
pub fn run_scenario(scenario: &Scenario, timings: bool) -> RunOutcome {
    let op = SchrodingerOperator::new(scenario.generator(), &scenario.potential).expect("scenario dimensions validated");
    let mut ctx = Context { scenario, op, ground: None };
    let mut sections = Vec::new();
    let mut errors = Vec::new();
    let mut measures = Vec::new();
    let (mut config_error, mut compute_error) = (false, false);

    for task in &scenario.tasks {
        let started = Instant::now();
        let result = match task.task {
            TaskKind::Validate => validate(&mut ctx).map(|o| (o, None)),
            TaskKind::Spectral => spectral(&mut ctx).map(|o| (o, None)),
            TaskKind::Rate => rate(&mut ctx, task).map(|o| (o, None)),
            TaskKind::HkVerify => hk_verify_task(&mut ctx, task),
            TaskKind::HkInvert => hk_invert(&mut ctx, task).map(|o| (o, None)),
            TaskKind::Ihk => ihk(&mut ctx, task).map(|o| (o, None)),
            TaskKind::Mc => mc(&mut ctx, task).map(|o| (o, None)),
            TaskKind::Averaging => averaging(&mut ctx, task).map(|o| (o, None)),
        };
        let elapsed_ms = started.elapsed().as_secs_f64() * 1e3;
        let name = task.task.name();
        match result {
            Ok((mut out, problem)) => {
                if let Some(message) = problem {
                    compute_error = true;
                    errors.push(json!({"task": name, "kind": "computation", "message": message}));
                }
                if timings {
                    out.put("elapsed_ms", num(elapsed_ms));
                }
                let mut section = Map::new();
                section.insert("task".into(), json!(name));
                section.insert("result".into(), Value::Object(out.section));
                sections.push(Value::Object(section));
                measures.push((name.to_string(), out.measures));
            }
            Err(TaskFailure::Config(e)) => {
                config_error = true;
                log::error!("{name}: {e}");
                errors.push(json!({"task": name, "kind": "config", "key": e.key, "message": e.to_string()}));
            }
            Err(TaskFailure::Compute(message)) => {
                compute_error = true;
                log::error!("{name}: {message}");
                errors.push(json!({"task": name, "kind": "computation", "message": message}));
            }
        }
    }

    let report = json!({
        "name": scenario.name,
        "version": crate::VERSION,
        "config": scenario.config,
        "tasks": sections,
        "errors": errors,
    });
    RunOutcome { report, measures, config_error, compute_error }
}
