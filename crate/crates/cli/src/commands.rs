//! Experiment commands: solve, openloop, validate, robustness, compare.

use std::path::Path;

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use riskfb::galerkin::{tracking_error, ControlTrajectory};
use riskfb::riccati::{closed_loop_solve, FeedbackLaw};
use riskfb::sqp::{run_openloop_gd, run_sqp_with, SqpReport, SqpState};
use serde::{Deserialize, Serialize};

use crate::artifacts::{self as io, CONFIG_FILE, CONTROL_FILE, FEEDBACK_FILE, STATE_FILE, SUMMARY_FILE};
use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::experiment::{stream_rng, Experiment, NOISE_STREAM, VALIDATION_STREAM};

pub const CLOSED_LOOP: &str = "closed-loop";
pub const OPEN_LOOP: &str = "open-loop";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub kind: String,
    pub theta: f64,
    pub iterations: usize,
    pub termination: String,
    pub objective: f64,
    pub gradient_norm: f64,
    pub warnings: Vec<String>,
    pub fem_nodes: usize,
    pub modes: usize,
    pub state_dimension: usize,
    pub time_steps: usize,
    pub actuators: usize,
}

fn solver_error(context: impl std::fmt::Display, e: riskfb::Error) -> CliError {
    CliError::Solver(format!("{context}: {e}"))
}

/// Runs SQP and returns the final iterate with the feedback law of the last subproblem.
pub fn run_solver(exp: &Experiment) -> Result<(SqpState, FeedbackLaw, SqpReport), CliError> {
    let start = exp.initial_expansion()?;
    let mut reached = 0;
    let (state, ric, report) = run_sqp_with(&exp.problem, start, exp.sqp_options(), |rec, _| {
        reached = rec.iteration
    })
    .map_err(|e| solver_error(format!("SQP iteration {}", reached + 1), e))?;
    Ok((state, ric.law, report))
}

fn write_config_echo(out: &Path, config: &ExperimentConfig) -> Result<(), CliError> {
    let path = out.join(CONFIG_FILE);
    let mut text = config.to_json();
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| CliError::io(path.display(), e))
}

fn base_summary(exp: &Experiment, kind: &str) -> RunSummary {
    let sys = &exp.problem.system;
    RunSummary {
        kind: kind.to_string(),
        theta: exp.config.risk.theta,
        iterations: 0,
        termination: String::new(),
        objective: f64::NAN,
        gradient_norm: f64::NAN,
        warnings: Vec::new(),
        fem_nodes: sys.fem_nodes(),
        modes: sys.modes(),
        state_dimension: sys.dim(),
        time_steps: exp.grid().steps(),
        actuators: sys.inputs(),
    }
}

/// Closed-loop SQP solve written to `out`.
pub fn solve(config: &ExperimentConfig, out: &Path) -> Result<RunSummary, CliError> {
    let exp = Experiment::build(config)?;
    let (state, law, report) = run_solver(&exp)?;
    io::ensure_dir(out)?;
    write_config_echo(out, config)?;
    io::write_control(&out.join(CONTROL_FILE), &state.control)?;
    io::write_feedback(&out.join(FEEDBACK_FILE), &law)?;
    io::write_iterations(&out.join("sqp_report.csv"), &report.records, "control_change")?;

    let traj = &state.expansion;
    let mut header = vec!["time".to_string()];
    header.extend((0..exp.problem.system.dim()).map(|j| format!("y{j}")));
    let rows: Vec<Vec<String>> = traj
        .coeffs
        .iter()
        .enumerate()
        .map(|(k, y)| {
            let mut row = vec![io::fmt_f64(traj.grid.time(k))];
            row.extend(y.iter().map(|&v| io::fmt_f64(v)));
            row
        })
        .collect();
    io::write_table(&out.join(STATE_FILE), &header, &rows)?;

    let summary = RunSummary {
        iterations: state.k,
        termination: report.termination.as_str().to_string(),
        objective: state.objective_value,
        gradient_norm: state.gradient_norm,
        warnings: report.warnings.clone(),
        ..base_summary(&exp, CLOSED_LOOP)
    };
    io::write_json(&out.join(SUMMARY_FILE), &summary)?;
    io::refresh_manifest(out)?;
    Ok(summary)
}

/// Open-loop gradient-descent baseline written to `out`.
pub fn openloop(config: &ExperimentConfig, out: &Path, iterations: Option<usize>) -> Result<RunSummary, CliError> {
    let exp = Experiment::build(config)?;
    let iterations = iterations.unwrap_or(config.solver.gd_iterations);
    let (u, report) = run_openloop_gd(
        &exp.problem,
        exp.problem.zero_control(),
        iterations,
        exp.step_rule(),
        config.solver.tolerance,
    )
    .map_err(|e| solver_error("gradient descent", e))?;
    io::ensure_dir(out)?;
    write_config_echo(out, config)?;
    io::write_control(&out.join(CONTROL_FILE), &u)?;
    io::write_iterations(&out.join("gd_report.csv"), &report.records, "step_length")?;
    let termination = if report.final_gradient_norm < config.solver.tolerance {
        "tolerance"
    } else {
        "max-iterations"
    };
    let summary = RunSummary {
        iterations: report.records.len(),
        termination: termination.to_string(),
        objective: report.final_objective,
        gradient_norm: report.final_gradient_norm,
        ..base_summary(&exp, OPEN_LOOP)
    };
    io::write_json(&out.join(SUMMARY_FILE), &summary)?;
    io::refresh_manifest(out)?;
    Ok(summary)
}

/// A solved run loaded back from disk.
#[derive(Debug)]
pub struct LoadedRun {
    pub experiment: Experiment,
    pub summary: RunSummary,
    pub control: ControlTrajectory,
    pub feedback: Option<FeedbackLaw>,
}

pub fn load_run(dir: &Path) -> Result<LoadedRun, CliError> {
    if !dir.is_dir() {
        return Err(CliError::MissingArtifact(dir.display().to_string()));
    }
    let config_path = dir.join(CONFIG_FILE);
    io::require_file(&config_path)?;
    let config = ExperimentConfig::load(&config_path)?;
    let summary: RunSummary = io::read_json(&dir.join(SUMMARY_FILE))?;
    let experiment = Experiment::build(&config)?;
    let grid = experiment.grid();
    let control = io::read_control(&dir.join(CONTROL_FILE), grid)?;
    if control.values.iter().any(|v| v.len() != experiment.problem.system.inputs()) {
        return Err(CliError::Io(format!("{}: actuator count mismatch", dir.display())));
    }
    let feedback = if summary.kind == CLOSED_LOOP {
        Some(io::read_feedback(
            &dir.join(FEEDBACK_FILE),
            grid,
            experiment.problem.system.inputs(),
            experiment.problem.system.dim(),
        )?)
    } else {
        None
    };
    Ok(LoadedRun {
        experiment,
        summary,
        control,
        feedback,
    })
}

/// How the control of one realization is produced.
#[derive(Debug, Clone, Copy)]
pub enum Scenario<'a> {
    Uncontrolled,
    /// Stored control signal applied as is.
    OpenLoop(&'a ControlTrajectory),
    /// Feedback law driven by the chaos state started from the realization's
    /// initial condition.
    Feedback(&'a FeedbackLaw),
}

/// i.i.d. uniform parameter draws on the validation stream.
pub fn draw_parameters(dim: usize, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = stream_rng(seed, VALIDATION_STREAM);
    (0..n)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0..=1.0)).collect())
        .collect()
}

/// Standard normal noise vectors on the noise stream.
pub fn draw_noise(nodes: usize, n: usize, seed: u64) -> Vec<DVector<f64>> {
    let mut rng = stream_rng(seed, NOISE_STREAM);
    (0..n)
        .map(|_| DVector::from_fn(nodes, |_, _| rng.sample(StandardNormal)))
        .collect()
}

/// Tracking errors at `report_nodes` for each realization; realization `i`
/// uses parameter `sigmas[i]` and initial state `initial(i)`.
pub fn tracking_errors(
    exp: &Experiment,
    scenario: Scenario<'_>,
    sigmas: &[Vec<f64>],
    initial: &(dyn Fn(usize) -> DVector<f64> + Sync),
    report_nodes: &[usize],
) -> Result<Vec<Vec<f64>>, CliError> {
    let problem = &exp.problem;
    let sys = &problem.system;
    let zero = problem.zero_control();
    sigmas
        .par_iter()
        .enumerate()
        .map(|(i, sigma)| {
            let y0 = initial(i);
            let feedback_control;
            let u = match scenario {
                Scenario::Uncontrolled => &zero,
                Scenario::OpenLoop(u) => u,
                Scenario::Feedback(law) => {
                    let lifted = sys.lift_initial(&y0).map_err(|e| solver_error("feedback", e))?;
                    let (_, u) = closed_loop_solve(problem.stepper(), law, &lifted, None, sys.modes(), sys.fem_nodes())
                        .map_err(|e| solver_error("closed-loop surrogate", e))?;
                    feedback_control = u;
                    &feedback_control
                }
            };
            let path = sys
                .sample_path_solve(sigma, u, &y0)
                .map_err(|e| solver_error(format!("realization {i}"), e))?;
            let errors = tracking_error(&path, exp.target(), &exp.observed_mass)
                .map_err(|e| solver_error(format!("realization {i}"), e))?;
            Ok(report_nodes.iter().map(|&k| errors[k]).collect())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSummary {
    pub name: String,
    pub terminal_mean: f64,
    pub terminal_median: f64,
    /// Terminal-time percentiles in the order of `percentiles`.
    pub terminal_percentiles: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationSummary {
    pub realizations: usize,
    pub seed: u64,
    pub report_times: Vec<f64>,
    pub percentiles: Vec<f64>,
    pub scenarios: Vec<ScenarioSummary>,
}

fn summarize(name: &str, rows: &[Vec<f64>], percentiles: &[f64]) -> ScenarioSummary {
    let last = rows.first().map_or(0, |r| r.len().saturating_sub(1));
    let col = io::sorted_column(rows, last);
    ScenarioSummary {
        name: name.to_string(),
        terminal_mean: col.iter().sum::<f64>() / col.len().max(1) as f64,
        terminal_median: io::percentile(&col, 50.0),
        terminal_percentiles: percentiles.iter().map(|&p| io::percentile(&col, p)).collect(),
    }
}

fn percentile_rows(rows: &[Vec<f64>], percentiles: &[f64]) -> Vec<Vec<f64>> {
    let columns = rows.first().map_or(0, Vec::len);
    let sorted: Vec<Vec<f64>> = (0..columns).map(|j| io::sorted_column(rows, j)).collect();
    percentiles
        .iter()
        .map(|&p| {
            let mut row = vec![p];
            row.extend(sorted.iter().map(|c| io::percentile(c, p)));
            row
        })
        .collect()
}

fn write_percentiles(path: &Path, times: &[f64], rows: &[Vec<f64>], percentiles: &[f64]) -> Result<(), CliError> {
    let mut header = vec!["percentile".to_string()];
    header.extend(times.iter().map(|&t| io::fmt_f64(t)));
    let body: Vec<Vec<String>> = percentile_rows(rows, percentiles)
        .iter()
        .map(|r| r.iter().map(|&v| io::fmt_f64(v)).collect())
        .collect();
    io::write_table(path, &header, &body)
}

fn report_times(exp: &Experiment) -> (Vec<usize>, Vec<f64>) {
    let nodes = exp.config.report_nodes();
    let times = nodes.iter().map(|&k| exp.grid().time(k)).collect();
    (nodes, times)
}

/// Monte Carlo validation of a run directory, written to `<run>/validation`.
pub fn validate(run: &Path, n: usize, seed: u64) -> Result<ValidationSummary, CliError> {
    if n == 0 {
        return Err(CliError::Config("--n: must be at least 1".into()));
    }
    let loaded = load_run(run)?;
    let exp = &loaded.experiment;
    let (nodes, times) = report_times(exp);
    let sigmas = draw_parameters(exp.config.pde.parameters, n, seed);
    let y0 = exp.problem.y0.clone();
    let initial = move |_: usize| y0.clone();

    let mut scenarios: Vec<(&str, Scenario)> = vec![
        ("uncontrolled", Scenario::Uncontrolled),
        ("controlled", Scenario::OpenLoop(&loaded.control)),
    ];
    if let Some(law) = &loaded.feedback {
        scenarios.push(("feedback", Scenario::Feedback(law)));
    }

    let out = run.join("validation");
    io::ensure_dir(&out)?;
    if exp.config.pde.parameters > 0 {
        let header: Vec<String> = (1..=exp.config.pde.parameters).map(|j| format!("sigma{j}")).collect();
        let rows: Vec<Vec<String>> = sigmas.iter().map(|s| s.iter().map(|&v| io::fmt_f64(v)).collect()).collect();
        io::write_table(&out.join("parameters.csv"), &header, &rows)?;
    }
    let percentiles = exp.config.validation.percentiles.clone();
    let mut summaries = Vec::new();
    for (name, scenario) in scenarios {
        let rows = tracking_errors(exp, scenario, &sigmas, &initial, &nodes)?;
        io::write_matrix(&out.join(format!("errors_{name}.csv")), &times, &rows)?;
        write_percentiles(&out.join(format!("percentiles_{name}.csv")), &times, &rows, &percentiles)?;
        summaries.push(summarize(name, &rows, &percentiles));
    }
    let summary = ValidationSummary {
        realizations: n,
        seed,
        report_times: times,
        percentiles,
        scenarios: summaries,
    };
    io::write_json(&out.join(SUMMARY_FILE), &summary)?;
    io::refresh_manifest(run)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRecord {
    pub level: f64,
    pub direction: String,
    pub control: String,
    pub terminal_mean: f64,
    pub terminal_median: f64,
    pub terminal_percentiles: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessSummary {
    pub realizations: usize,
    pub seed: u64,
    pub report_times: Vec<f64>,
    pub percentiles: Vec<f64>,
    pub records: Vec<RobustnessRecord>,
}

impl RobustnessSummary {
    pub fn median(&self, level: f64, direction: &str, control: &str) -> Option<f64> {
        self.records
            .iter()
            .find(|r| r.level == level && r.direction == direction && r.control == control)
            .map(|r| r.terminal_median)
    }
}

/// Perturbed-initial-condition study of a closed-loop and an open-loop run.
pub fn robustness(
    run_cl: &Path,
    run_ol: &Path,
    levels: Option<&[f64]>,
    n: Option<usize>,
    seed: Option<u64>,
    out: Option<&Path>,
) -> Result<RobustnessSummary, CliError> {
    let cl = load_run(run_cl)?;
    let ol = load_run(run_ol)?;
    let law = cl
        .feedback
        .as_ref()
        .ok_or_else(|| CliError::MissingArtifact(format!("{} is not a closed-loop run", run_cl.display())))?;
    let exp = &cl.experiment;
    let other = &ol.experiment;
    if exp.grid() != other.grid()
        || exp.mesh != other.mesh
        || exp.problem.system.inputs() != other.problem.system.inputs()
        || exp.config.pde != other.config.pde
        || exp.config.actuators != other.config.actuators
        || exp.config.profiles != other.config.profiles
    {
        return Err(CliError::Config(
            "closed-loop and open-loop runs describe different problems".into(),
        ));
    }
    let levels: Vec<f64> = levels.map_or_else(|| exp.config.validation.noise_levels.clone(), <[f64]>::to_vec);
    for &l in &levels {
        if !(l.is_finite() && l >= 0.0) {
            return Err(CliError::Config(format!("--levels: {l} must be finite and >= 0")));
        }
    }
    let n = n.unwrap_or(exp.config.validation.realizations);
    let seed = seed.unwrap_or(exp.config.validation.seed);
    if n == 0 {
        return Err(CliError::Config("--n: must be at least 1".into()));
    }
    let default_out;
    let out = match out {
        Some(o) => o,
        None => {
            default_out = run_cl.join("robustness");
            &default_out
        }
    };
    io::ensure_dir(out)?;

    let (nodes, times) = report_times(exp);
    let sigmas = draw_parameters(exp.config.pde.parameters, n, seed);
    let noise = draw_noise(exp.mesh.len(), n, seed);
    let percentiles = exp.config.validation.percentiles.clone();
    let y0 = &exp.problem.y0;

    let mut records = Vec::new();
    let mut table = Vec::new();
    for (idx, &level) in levels.iter().enumerate() {
        for (direction, sign) in [("plus", 1.0), ("minus", -1.0)] {
            let initial = |i: usize| y0.add_scalar(sign * level) + (sign * 0.01 * level) * &noise[i];
            for (control, scenario) in [("cl", Scenario::Feedback(law)), ("ol", Scenario::OpenLoop(&ol.control))] {
                let rows = tracking_errors(exp, scenario, &sigmas, &initial, &nodes)?;
                io::write_matrix(&out.join(format!("level{idx}_{direction}_{control}.csv")), &times, &rows)?;
                let s = summarize(control, &rows, &percentiles);
                let mut row = vec![io::fmt_f64(level), direction.to_string(), control.to_string()];
                row.push(io::fmt_f64(s.terminal_mean));
                row.push(io::fmt_f64(s.terminal_median));
                row.extend(s.terminal_percentiles.iter().map(|&v| io::fmt_f64(v)));
                table.push(row);
                records.push(RobustnessRecord {
                    level,
                    direction: direction.to_string(),
                    control: control.to_string(),
                    terminal_mean: s.terminal_mean,
                    terminal_median: s.terminal_median,
                    terminal_percentiles: s.terminal_percentiles,
                });
            }
        }
    }
    let mut header: Vec<String> = ["level", "direction", "control", "terminal_mean", "terminal_median"]
        .map(String::from)
        .to_vec();
    header.extend(percentiles.iter().map(|p| format!("terminal_p{p}")));
    io::write_table(&out.join("summary.csv"), &header, &table)?;
    let summary = RobustnessSummary {
        realizations: n,
        seed,
        report_times: times,
        percentiles,
        records,
    };
    io::write_json(&out.join(SUMMARY_FILE), &summary)?;
    if out.starts_with(run_cl) {
        io::refresh_manifest(run_cl)?;
    } else {
        io::refresh_manifest(out)?;
    }
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareSummary {
    pub theta: f64,
    pub realizations: usize,
    pub seed: u64,
    pub report_times: Vec<f64>,
    pub percentiles: Vec<f64>,
    /// Percentiles of the risk-averse run minus the risk-neutral run, one
    /// row per percentile and one column per report time.
    pub percentile_deltas: Vec<Vec<f64>>,
    pub averse: RunSummary,
    pub neutral: RunSummary,
}

/// Solves at the configured θ and at θ = 0 and validates both on shared draws.
pub fn compare(
    config: &ExperimentConfig,
    out: &Path,
    n: Option<usize>,
    seed: Option<u64>,
) -> Result<CompareSummary, CliError> {
    let mut neutral_config = config.clone();
    neutral_config.risk.theta = 0.0;
    let averse_dir = out.join("averse");
    let neutral_dir = out.join("neutral");
    let averse = solve(config, &averse_dir)?;
    let neutral = solve(&neutral_config, &neutral_dir)?;

    let n = n.unwrap_or(config.validation.realizations);
    let seed = seed.unwrap_or(config.validation.seed);
    if n == 0 {
        return Err(CliError::Config("--n: must be at least 1".into()));
    }
    let percentiles = config.validation.percentiles.clone();
    let mut tables = Vec::new();
    let mut times = Vec::new();
    for (name, dir) in [("averse", &averse_dir), ("neutral", &neutral_dir)] {
        let run = load_run(dir)?;
        let exp = &run.experiment;
        let (nodes, t) = report_times(exp);
        let sigmas = draw_parameters(exp.config.pde.parameters, n, seed);
        let y0 = exp.problem.y0.clone();
        let rows = tracking_errors(exp, Scenario::OpenLoop(&run.control), &sigmas, &move |_| y0.clone(), &nodes)?;
        io::write_matrix(&out.join(format!("errors_{name}.csv")), &t, &rows)?;
        write_percentiles(&out.join(format!("percentiles_{name}.csv")), &t, &rows, &percentiles)?;
        tables.push(percentile_rows(&rows, &percentiles));
        times = t;
    }
    let deltas: Vec<Vec<f64>> = tables[0]
        .iter()
        .zip(&tables[1])
        .map(|(a, b)| a.iter().zip(b).skip(1).map(|(x, y)| x - y).collect())
        .collect();
    let mut header = vec!["percentile".to_string()];
    header.extend(times.iter().map(|&t| io::fmt_f64(t)));
    let body: Vec<Vec<String>> = percentiles
        .iter()
        .zip(&deltas)
        .map(|(p, row)| {
            let mut r = vec![io::fmt_f64(*p)];
            r.extend(row.iter().map(|&v| io::fmt_f64(v)));
            r
        })
        .collect();
    io::write_table(&out.join("percentile_deltas.csv"), &header, &body)?;
    let summary = CompareSummary {
        theta: config.risk.theta,
        realizations: n,
        seed,
        report_times: times,
        percentiles,
        percentile_deltas: deltas,
        averse,
        neutral,
    };
    io::write_json(&out.join(SUMMARY_FILE), &summary)?;
    io::refresh_manifest(out)?;
    Ok(summary)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    ExperimentConfig::load(path)
}

/// Parses a comma-separated list of noise levels.
pub fn parse_levels(text: &str) -> Result<Vec<f64>, CliError> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| CliError::Config(format!("--levels: {s:?}: {e}")))
        })
        .collect()
}

