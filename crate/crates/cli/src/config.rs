//! Versioned JSON experiment configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub pde: PdeConfig,
    #[serde(default)]
    pub discretization: DiscretizationConfig,
    #[serde(default)]
    pub risk: RiskConfig,
    #[serde(default)]
    pub observation: ObservationConfig,
    #[serde(default)]
    pub actuators: ActuatorConfig,
    #[serde(default)]
    pub profiles: ProfileConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub validation: ValidationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            pde: PdeConfig::default(),
            discretization: DiscretizationConfig::default(),
            risk: RiskConfig::default(),
            observation: ObservationConfig::default(),
            actuators: ActuatorConfig::default(),
            profiles: ProfileConfig::default(),
            solver: SolverConfig::default(),
            validation: ValidationConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PdeConfig {
    pub diffusion: f64,
    pub reaction_mean: f64,
    /// Decay exponent of the parametric reaction fields.
    pub decay: f64,
    /// Number of random parameters `s`.
    pub parameters: usize,
    pub horizon: f64,
}

impl Default for PdeConfig {
    fn default() -> Self {
        Self {
            diffusion: 0.5,
            reaction_mean: 0.2,
            decay: 2.0,
            parameters: 2,
            horizon: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscretizationConfig {
    pub mesh_width: f64,
    pub time_steps: usize,
    pub chaos_degree: usize,
}

impl Default for DiscretizationConfig {
    fn default() -> Self {
        Self {
            mesh_width: 0.03125,
            time_steps: 200,
            chaos_degree: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NodeKind {
    MonteCarlo,
    TensorGauss,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovarianceKind {
    Unbiased,
    PlugIn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RiskConfig {
    pub theta: f64,
    pub samples: usize,
    pub seed: u64,
    pub nodes: NodeKind,
    /// Points per dimension for the tensor Gauss rule.
    pub gauss_points: usize,
    pub covariance: CovarianceKind,
}

impl Default for RiskConfig {
    fn default() -> Self {
        Self {
            theta: 10.0,
            samples: 100,
            seed: 20_240_917,
            nodes: NodeKind::MonteCarlo,
            gauss_points: 3,
            covariance: CovarianceKind::Unbiased,
        }
    }
}

/// Observation operators `C = tracking·I` and `P = terminal·I`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObservationConfig {
    pub tracking: f64,
    pub terminal: f64,
}

impl Default for ObservationConfig {
    fn default() -> Self {
        Self {
            tracking: 1.0,
            terminal: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ActuatorConfig {
    pub intervals: Vec<[f64; 2]>,
    pub scaling: f64,
}

impl Default for ActuatorConfig {
    fn default() -> Self {
        Self {
            intervals: vec![[0.1, 0.3], [0.4, 0.6], [0.7, 0.9]],
            scaling: 10f64.sqrt(),
        }
    }
}

/// Spatial profile catalog.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Profile {
    /// `offset − amplitude·cos(2π·frequency·x)`.
    ShiftedCosine {
        offset: f64,
        amplitude: f64,
        frequency: f64,
    },
    Constant {
        value: f64,
    },
}

impl Profile {
    pub fn shifted_cosine(offset: f64) -> Self {
        Profile::ShiftedCosine {
            offset,
            amplitude: 1.0,
            frequency: 1.0,
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            Profile::ShiftedCosine {
                offset,
                amplitude,
                frequency,
            } => offset - amplitude * (2.0 * std::f64::consts::PI * frequency * x).cos(),
            Profile::Constant { value } => value,
        }
    }

    fn is_finite(&self) -> bool {
        match *self {
            Profile::ShiftedCosine {
                offset,
                amplitude,
                frequency,
            } => offset.is_finite() && amplitude.is_finite() && frequency.is_finite(),
            Profile::Constant { value } => value.is_finite(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProfileConfig {
    pub initial: Profile,
    /// Initial condition of the uncontrolled run used as first expansion point.
    pub expansion_initial: Profile,
    /// Initial value of the target, which evolves by the reaction-free equation.
    pub target_initial: Profile,
    /// Terminal target; the target at `T` when absent.
    pub terminal_target: Option<Profile>,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        Self {
            initial: Profile::shifted_cosine(4.0),
            expansion_initial: Profile::shifted_cosine(1.0),
            target_initial: Profile::shifted_cosine(1.25),
            terminal_target: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RiccatiKind {
    Discrete,
    Rk4,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepKind {
    Armijo,
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub tolerance: f64,
    pub max_iterations: usize,
    pub gd_iterations: usize,
    pub gd_step: StepKind,
    /// Step length for the fixed-step rule, initial trial step for Armijo.
    pub gd_step_length: f64,
    pub riccati: RiccatiKind,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-6,
            max_iterations: 20,
            gd_iterations: 200,
            gd_step: StepKind::Armijo,
            gd_step_length: 1.0,
            riccati: RiccatiKind::Discrete,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValidationConfig {
    pub realizations: usize,
    pub seed: u64,
    /// Report times; six equispaced nodes ending at `T` when absent.
    pub report_times: Option<Vec<f64>>,
    pub percentiles: Vec<f64>,
    pub noise_levels: Vec<f64>,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        Self {
            realizations: 10_000,
            seed: 7,
            report_times: None,
            percentiles: vec![5.0, 50.0, 95.0],
            noise_levels: vec![0.0, 0.5, 1.0, 1.5, 2.0],
        }
    }
}

fn invalid(field: &str, message: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{field}: {message}"))
}

fn positive(field: &str, v: f64) -> Result<(), CliError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(invalid(field, format!("must be finite and positive, got {v}")))
    }
}

fn finite(field: &str, v: f64) -> Result<(), CliError> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(invalid(field, format!("must be finite, got {v}")))
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let config: Self = serde_json::from_str(text).map_err(|e| {
            CliError::Config(format!("line {}, column {}: {e}", e.line(), e.column()))
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(invalid(
                "schema_version",
                format!("unsupported version {} (expected {SCHEMA_VERSION})", self.schema_version),
            ));
        }
        positive("pde.diffusion", self.pde.diffusion)?;
        finite("pde.reaction_mean", self.pde.reaction_mean)?;
        finite("pde.decay", self.pde.decay)?;
        positive("pde.horizon", self.pde.horizon)?;

        positive("discretization.mesh_width", self.discretization.mesh_width)?;
        let inv = 1.0 / self.discretization.mesh_width;
        if (inv - inv.round()).abs() > 1e-9 * inv || inv.round() < 2.0 {
            return Err(invalid(
                "discretization.mesh_width",
                "must be 1/n for an integer n >= 2",
            ));
        }
        if self.discretization.time_steps == 0 {
            return Err(invalid("discretization.time_steps", "must be at least 1"));
        }

        if !(self.risk.theta.is_finite() && self.risk.theta >= 0.0) {
            return Err(invalid("risk.theta", format!("must be finite and >= 0, got {}", self.risk.theta)));
        }
        if self.risk.samples < 2 && self.risk.nodes == NodeKind::MonteCarlo {
            return Err(invalid("risk.samples", "must be at least 2"));
        }
        if self.risk.nodes == NodeKind::TensorGauss {
            if self.risk.gauss_points == 0 {
                return Err(invalid("risk.gauss_points", "must be at least 1"));
            }
            if self.risk.covariance == CovarianceKind::Unbiased {
                return Err(invalid(
                    "risk.covariance",
                    "tensor-gauss nodes have unequal weights; use plug-in",
                ));
            }
        }

        finite("observation.tracking", self.observation.tracking)?;
        finite("observation.terminal", self.observation.terminal)?;

        positive("actuators.scaling", self.actuators.scaling)?;
        if self.actuators.intervals.is_empty() {
            return Err(invalid("actuators.intervals", "at least one actuator is required"));
        }
        for (i, [a, b]) in self.actuators.intervals.iter().enumerate() {
            if !(a.is_finite() && b.is_finite() && 0.0 <= *a && a < b && *b <= 1.0) {
                return Err(invalid(
                    &format!("actuators.intervals[{i}]"),
                    format!("[{a}, {b}] is not a subinterval of [0, 1]"),
                ));
            }
        }

        for (name, p) in [
            ("profiles.initial", &self.profiles.initial),
            ("profiles.expansion_initial", &self.profiles.expansion_initial),
            ("profiles.target_initial", &self.profiles.target_initial),
        ] {
            if !p.is_finite() {
                return Err(invalid(name, "parameters must be finite"));
            }
        }
        if let Some(p) = &self.profiles.terminal_target {
            if !p.is_finite() {
                return Err(invalid("profiles.terminal_target", "parameters must be finite"));
            }
        }

        positive("solver.tolerance", self.solver.tolerance)?;
        if self.solver.max_iterations == 0 {
            return Err(invalid("solver.max_iterations", "must be at least 1"));
        }
        positive("solver.gd_step_length", self.solver.gd_step_length)?;

        if self.validation.realizations == 0 {
            return Err(invalid("validation.realizations", "must be at least 1"));
        }
        if let Some(times) = &self.validation.report_times {
            if times.is_empty() {
                return Err(invalid("validation.report_times", "must not be empty"));
            }
            for &t in times {
                if !(t.is_finite() && (0.0..=self.pde.horizon).contains(&t)) {
                    return Err(invalid(
                        "validation.report_times",
                        format!("{t} lies outside [0, {}]", self.pde.horizon),
                    ));
                }
            }
        }
        for &p in &self.validation.percentiles {
            if !(p > 0.0 && p < 100.0) {
                return Err(invalid("validation.percentiles", format!("{p} is not in (0, 100)")));
            }
        }
        for &l in &self.validation.noise_levels {
            if !(l.is_finite() && l >= 0.0) {
                return Err(invalid("validation.noise_levels", format!("{l} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    /// Time-node indices of the report times.
    pub fn report_nodes(&self) -> Vec<usize> {
        let n = self.discretization.time_steps;
        match &self.validation.report_times {
            Some(times) => {
                let dt = self.pde.horizon / n as f64;
                times
                    .iter()
                    .map(|t| ((t / dt).round() as usize).min(n))
                    .collect()
            }
            None => (1..=6)
                .map(|j| ((j * n) as f64 / 6.0).round() as usize)
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_reference_experiment() {
        let c = ExperimentConfig::default();
        assert_eq!(c.pde.horizon, 0.5);
        assert_eq!(c.pde.diffusion, 0.5);
        assert_eq!(c.pde.reaction_mean, 0.2);
        assert_eq!(c.pde.parameters, 2);
        assert_eq!(c.discretization.mesh_width, 1.0 / 32.0);
        assert_eq!(c.discretization.chaos_degree, 2);
        assert_eq!(c.risk.samples, 100);
        assert_eq!(c.risk.theta, 10.0);
        assert_eq!(c.actuators.intervals.len(), 3);
        assert_eq!(c.solver.max_iterations, 20);
        assert_eq!(c.solver.gd_iterations, 200);
        assert_eq!(c.validation.realizations, 10_000);
        assert_eq!(c.profiles.initial.eval(0.0), 3.0);
        assert_eq!(c.profiles.target_initial.eval(0.5), 2.25);
        c.validate().unwrap();
    }

    #[test]
    fn minimal_document_uses_defaults() {
        let c = ExperimentConfig::from_json(r#"{"schema_version": 1}"#).unwrap();
        assert_eq!(c, ExperimentConfig::default());
    }

    #[test]
    fn echo_round_trips() {
        let mut c = ExperimentConfig::default();
        c.risk.theta = 0.125;
        c.profiles.terminal_target = Some(Profile::Constant { value: 1.5 });
        c.validation.report_times = Some(vec![0.1, 0.5]);
        assert_eq!(ExperimentConfig::from_json(&c.to_json()).unwrap(), c);
    }

    fn error_text(json: &str) -> String {
        match ExperimentConfig::from_json(json) {
            Err(CliError::Config(msg)) => msg,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn negative_theta_names_the_field() {
        let msg = error_text(r#"{"schema_version": 1, "risk": {"theta": -1.0}}"#);
        assert!(msg.contains("risk.theta"), "{msg}");
    }

    #[test]
    fn parse_errors_carry_the_line() {
        let msg = error_text("{\n  \"schema_version\": 1,\n  \"pde\": {\"diffusion\": }\n}");
        assert!(msg.contains("line 3"), "{msg}");
        let msg = error_text(r#"{"schema_version": 1, "pde": {"difusion": 1.0}}"#);
        assert!(msg.contains("difusion"), "{msg}");
    }

    #[test]
    fn invalid_fields_are_named() {
        for (json, field) in [
            (r#"{"schema_version": 2}"#, "schema_version"),
            (r#"{"schema_version": 1, "discretization": {"mesh_width": 0.3}}"#, "discretization.mesh_width"),
            (r#"{"schema_version": 1, "validation": {"percentiles": [100.0]}}"#, "validation.percentiles"),
            (r#"{"schema_version": 1, "actuators": {"intervals": [[0.5, 0.2]]}}"#, "actuators.intervals[0]"),
            (r#"{"schema_version": 1, "validation": {"report_times": [0.9]}}"#, "validation.report_times"),
            (r#"{"schema_version": 1, "risk": {"nodes": "tensor-gauss"}}"#, "risk.covariance"),
            (r#"{"schema_version": 1, "pde": {"diffusion": 0.0}}"#, "pde.diffusion"),
        ] {
            let msg = error_text(json);
            assert!(msg.starts_with(field), "{field}: {msg}");
        }
    }

    #[test]
    fn default_report_nodes_end_at_the_horizon() {
        let c = ExperimentConfig::default();
        assert_eq!(c.report_nodes(), vec![33, 67, 100, 133, 167, 200]);
        let mut c = c;
        c.validation.report_times = Some(vec![0.0, 0.25, 0.5]);
        assert_eq!(c.report_nodes(), vec![0, 100, 200]);
    }
}
