//! Scenario files: parsing, validation and assembly of the numerical problem.

use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::generator::{matrix_from_rows, validate_generator, Generator, GeneratorError, Potential};
use crate::measure::ProbMeasure;
use crate::multiparticle::{kronecker_sum, pairwise_potential, separable_potential, MultiparticleError, TensorSystem};

/// A configuration problem, with the offending key and, for syntax errors,
/// the position in the file.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub key: Option<String>,
    pub line: Option<usize>,
    pub column: Option<usize>,
    pub message: String,
}

impl ConfigError {
    pub fn at(key: impl Into<String>, message: impl fmt::Display) -> Self {
        ConfigError { key: Some(key.into()), line: None, column: None, message: message.to_string() }
    }

    fn from_json(err: serde_json::Error, key: Option<String>) -> Self {
        let line = (err.line() > 0).then(|| err.line());
        let column = (err.column() > 0).then(|| err.column());
        ConfigError { key, line, column, message: err.to_string() }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("config error")?;
        if let Some(k) = &self.key {
            write!(f, " at `{k}`")?;
        }
        if let (Some(l), None) = (self.line, &self.key) {
            write!(f, " (line {l}, column {})", self.column.unwrap_or(0))?;
        }
        write!(f, ": {}", self.message)
    }
}

impl std::error::Error for ConfigError {}

/// Tolerances and iteration limits. Every field may be overridden under the
/// scenario key `"tolerances"`.
///
/// | key | default | used by |
/// |---|---|---|
/// | `row_sum` | 1e-12 | row-sum check in `validate` (relative to `max|Q|`) |
/// | `rate_gradient` | 1e-10 | Newton gradient for `I(μ)` |
/// | `dual` | 1e-8 | agreement target of the dual problems in `rate` |
/// | `hk` | 1e-10 | marginal and potential tolerance in `hk-verify` |
/// | `inversion` | 1e-8 | marginal TV target in `hk-invert` |
/// | `inversion_step` | 0.5 | initial damping in `hk-invert` |
/// | `inversion_max_iter` | 500 | iteration cap in `hk-invert` |
/// | `ihk_violation` | 1e-10 | marginal constraint violation in `ihk` |
/// | `reduced` | 1e-8 | outer gradient tolerance of the reduced principle in `ihk` |
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    pub row_sum: f64,
    pub rate_gradient: f64,
    pub dual: f64,
    pub hk: f64,
    pub inversion: f64,
    pub inversion_step: f64,
    pub inversion_max_iter: usize,
    pub ihk_violation: f64,
    pub reduced: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            row_sum: 1e-12,
            rate_gradient: 1e-10,
            dual: 1e-8,
            hk: 1e-10,
            inversion: 1e-8,
            inversion_step: 0.5,
            inversion_max_iter: 500,
            ihk_violation: 1e-10,
            reduced: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Validate,
    Spectral,
    Rate,
    HkVerify,
    HkInvert,
    Ihk,
    Mc,
    Averaging,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Validate => "validate",
            TaskKind::Spectral => "spectral",
            TaskKind::Rate => "rate",
            TaskKind::HkVerify => "hk-verify",
            TaskKind::HkInvert => "hk-invert",
            TaskKind::Ihk => "ihk",
            TaskKind::Mc => "mc",
            TaskKind::Averaging => "averaging",
        }
    }
}

/// One entry of `"tasks"`: either a bare task name or an object with a
/// `"task"` key and options.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub task: TaskKind,
    /// Position in the scenario's `"tasks"` list, for error messages.
    #[serde(skip)]
    pub index: usize,
    /// `rate`: measure to evaluate (default uniform).
    pub mu: Option<Vec<f64>>,
    /// `hk-verify`: the two single-particle potentials (`v1` defaults to `"v"`).
    pub v1: Option<Vec<f64>>,
    pub v2: Option<Vec<f64>>,
    /// `hk-invert`, `ihk`: target marginal (default: marginal generated by `"v"`).
    pub rho: Option<Vec<f64>>,
    /// `ihk`: also run the reduced variational principle.
    pub reduced: Option<bool>,
    /// `mc`: horizon, path count and seed (seed defaults to the scenario seed).
    pub t: Option<f64>,
    pub paths: Option<usize>,
    pub seed: Option<u64>,
    /// `averaging`: horizons `T`, grid points per horizon, and initial measure.
    pub horizons: Option<Vec<f64>>,
    pub grid_points: Option<usize>,
    pub mu0: Option<Vec<f64>>,
}

impl TaskSpec {
    pub fn bare(task: TaskKind) -> Self {
        TaskSpec {
            task,
            index: 0,
            mu: None,
            v1: None,
            v2: None,
            rho: None,
            reduced: None,
            t: None,
            paths: None,
            seed: None,
            horizons: None,
            grid_points: None,
            mu0: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
enum RawInteraction {
    Flat(Vec<f64>),
    Pairwise(PairwiseSpec),
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
struct PairwiseSpec {
    pairwise: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    #[serde(default)]
    name: Option<String>,
    #[serde(rename = "Q")]
    q: Vec<Vec<f64>>,
    #[serde(rename = "V", default)]
    full_v: Option<Vec<f64>>,
    #[serde(rename = "v", default)]
    single_v: Option<Vec<f64>>,
    #[serde(rename = "N", default)]
    n: Option<usize>,
    #[serde(rename = "V0", default)]
    v0: Option<RawInteraction>,
    #[serde(default)]
    tasks: Vec<Value>,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    tolerances: Tolerances,
    #[serde(default)]
    t_grid: Option<Vec<f64>>,
}

/// A validated scenario, ready to run.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    /// The parsed input, echoed in reports.
    pub config: Value,
    /// Single-particle generator.
    pub q1: Generator,
    /// Product system when `N > 1`.
    pub system: Option<TensorSystem>,
    /// Interaction potential on the full state space (zero if absent).
    pub v0: Potential,
    /// Single-particle potential, when given as `"v"`.
    pub v: Option<Potential>,
    /// Full potential `V_0 + V` on the state space.
    pub potential: Potential,
    pub tasks: Vec<TaskSpec>,
    pub seed: u64,
    pub tolerances: Tolerances,
    pub t_grid: Option<Vec<f64>>,
}

impl Scenario {
    /// Generator on the full state space.
    pub fn generator(&self) -> &Generator {
        self.system.as_ref().map_or(&self.q1, |s| s.generator())
    }

    pub fn states(&self) -> usize {
        self.generator().dim()
    }

    pub fn particles(&self) -> usize {
        self.system.as_ref().map_or(1, |s| s.particles())
    }

    /// Product system, built on demand for `N = 1`.
    pub fn tensor_system(&self) -> TensorSystem {
        self.system.clone().unwrap_or_else(|| kronecker_sum(&self.q1, 1).expect("one particle always fits"))
    }
}

fn generator_error(key: &str, err: GeneratorError) -> ConfigError {
    let at = match &err {
        GeneratorError::NonFinite { row, col } | GeneratorError::NegativeOffDiagonal { row, col, .. } => format!("{key}[{row}][{col}]"),
        GeneratorError::RowSumNonzero { row, .. } => format!("{key}[{row}]"),
        _ => key.to_string(),
    };
    ConfigError::at(at, err)
}

fn multiparticle_error(key: &str, err: MultiparticleError) -> ConfigError {
    match err {
        MultiparticleError::Generator(g) => generator_error(key, g),
        other => ConfigError::at(key, other),
    }
}

fn potential(key: &str, values: &[f64], len: usize) -> Result<Potential, ConfigError> {
    if values.len() != len {
        return Err(ConfigError::at(key, format!("expected {len} entries, found {}", values.len())));
    }
    Potential::from_slice(values).map_err(|e| ConfigError::at(key, e))
}

/// Parses a measure-valued option of length `len`, normalizing positive mass.
pub fn measure(key: &str, values: &[f64], len: usize) -> Result<ProbMeasure, ConfigError> {
    if values.len() != len {
        return Err(ConfigError::at(key, format!("expected {len} entries, found {}", values.len())));
    }
    ProbMeasure::normalized(nalgebra::DVector::from_column_slice(values)).map_err(|e| ConfigError::at(key, e))
}

/// Parses and validates scenario JSON text.
pub fn parse_scenario(text: &str, fallback_name: &str) -> Result<Scenario, ConfigError> {
    let config: Value = serde_json::from_str(text).map_err(|e| ConfigError::from_json(e, None))?;
    let raw: RawScenario = serde_json::from_str(text).map_err(|e| ConfigError::from_json(e, None))?;

    let tol = raw.tolerances;
    let q_raw = matrix_from_rows(&raw.q).map_err(|e| generator_error("Q", e))?;
    let q1 = validate_generator(&q_raw, tol.row_sum).map_err(|e| generator_error("Q", e))?;
    let d = q1.dim();
    let n = raw.n.unwrap_or(1);

    if n == 0 {
        return Err(ConfigError::at("N", "particle count must be positive"));
    }
    let system = if n > 1 { Some(kronecker_sum(&q1, n).map_err(|e| multiparticle_error("N", e))?) } else { None };
    let states = system.as_ref().map_or(d, |s| s.states());

    let v0 = match &raw.v0 {
        None => Potential::zeros(states),
        Some(RawInteraction::Flat(vals)) => potential("V0", vals, states)?,
        Some(RawInteraction::Pairwise(spec)) => {
            let w = matrix_from_rows(&spec.pairwise).map_err(|e| ConfigError::at("V0.pairwise", e))?;
            if w.nrows() != d {
                return Err(ConfigError::at("V0.pairwise", format!("expected a {d}x{d} matrix, found {}x{}", w.nrows(), w.ncols())));
            }
            pairwise_potential(&w, n).map_err(|e| ConfigError::at("V0.pairwise", e))?
        }
    };

    let (v, full) = match (&raw.single_v, &raw.full_v) {
        (Some(_), Some(_)) => return Err(ConfigError::at("V", "give either \"V\" or \"v\", not both")),
        (Some(vals), None) => {
            let v = potential("v", vals, d)?;
            let sep = separable_potential(&v, n).map_err(|e| multiparticle_error("v", e))?;
            (Some(v), sep)
        }
        (None, Some(vals)) => {
            let full = potential("V", vals, states)?;
            let single = (n == 1).then(|| full.clone());
            (single, full)
        }
        (None, None) => (Some(Potential::zeros(d)), Potential::zeros(states)),
    };
    let potential = v0.add(&full);

    let mut tasks = Vec::with_capacity(raw.tasks.len());
    for (i, entry) in raw.tasks.into_iter().enumerate() {
        let key = format!("tasks[{i}]");
        let mut spec: TaskSpec = match entry {
            Value::String(_) => TaskSpec::bare(serde_json::from_value(entry).map_err(|e| ConfigError::at(&key, e))?),
            Value::Object(_) => serde_json::from_value(entry).map_err(|e| ConfigError::at(&key, e))?,
            _ => return Err(ConfigError::at(key, "expected a task name or an object with a \"task\" key")),
        };
        spec.index = i;
        tasks.push(spec);
    }
    // Later tasks may consume earlier ones; run in the canonical order.
    tasks.sort_by_key(|t| t.task);

    if let Some(grid) = &raw.t_grid {
        if grid.is_empty() || grid.iter().any(|t| !(*t >= 0.0) || !t.is_finite()) {
            return Err(ConfigError::at("t_grid", "expected a nonempty list of finite nonnegative times"));
        }
    }

    Ok(Scenario {
        name: raw.name.unwrap_or_else(|| fallback_name.to_string()),
        config,
        q1,
        system,
        v0,
        v,
        potential,
        tasks,
        seed: raw.seed,
        tolerances: tol,
        t_grid: raw.t_grid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_scenario() {
        let s = parse_scenario(r#"{"Q": [[-1, 1], [2, -2]], "V": [1, 0]}"#, "demo").unwrap();
        assert_eq!(s.name, "demo");
        assert_eq!(s.states(), 2);
        assert!(s.tasks.is_empty());
        assert_eq!(s.tolerances, Tolerances::default());
    }

    #[test]
    fn negative_rate_names_entry() {
        let err = parse_scenario(r#"{"Q": [[-1, 1], [-1, 1]]}"#, "x").unwrap_err();
        assert_eq!(err.key.as_deref(), Some("Q[1][0]"));
    }

    #[test]
    fn unknown_key_reports_line() {
        let err = parse_scenario("{\n  \"Q\": [[0]],\n  \"bogus\": 1\n}", "x").unwrap_err();
        assert_eq!(err.line, Some(3));
        assert!(err.message.contains("bogus"));
    }

    #[test]
    fn unknown_task_option_names_task() {
        let err = parse_scenario(r#"{"Q": [[0]], "tasks": ["spectral", {"task": "mc", "pathz": 3}]}"#, "x").unwrap_err();
        assert_eq!(err.key.as_deref(), Some("tasks[1]"));
    }

    #[test]
    fn tasks_sorted_canonically() {
        let s = parse_scenario(r#"{"Q": [[0]], "tasks": ["mc", "validate", {"task": "rate"}]}"#, "x").unwrap();
        let kinds: Vec<TaskKind> = s.tasks.iter().map(|t| t.task).collect();
        assert_eq!(kinds, vec![TaskKind::Validate, TaskKind::Rate, TaskKind::Mc]);
    }

    #[test]
    fn multiparticle_assembly() {
        let s = parse_scenario(r#"{"Q": [[-1, 1], [2, -2]], "N": 2, "v": [0, 1], "V0": {"pairwise": [[1, 0], [0, 1]]}}"#, "x").unwrap();
        assert_eq!(s.states(), 4);
        assert_eq!(s.potential.values().as_slice(), &[1.0, 0.5, 0.5, 2.0]);
    }

    #[test]
    fn dimension_mismatch() {
        let err = parse_scenario(r#"{"Q": [[-1, 1], [2, -2]], "N": 2, "V": [0, 1]}"#, "x").unwrap_err();
        assert_eq!(err.key.as_deref(), Some("V"));
        let both = parse_scenario(r#"{"Q": [[0]], "V": [0], "v": [0]}"#, "x").unwrap_err();
        assert_eq!(both.key.as_deref(), Some("V"));
    }

    #[test]
    fn tolerance_override() {
        let s = parse_scenario(r#"{"Q": [[0]], "tolerances": {"hk": 1e-6}}"#, "x").unwrap();
        assert_eq!(s.tolerances.hk, 1e-6);
        assert_eq!(s.tolerances.dual, 1e-8);
        assert!(parse_scenario(r#"{"Q": [[0]], "tolerances": {"hkk": 1e-6}}"#, "x").is_err());
    }
}
