//! Run configuration.
//!
//! A TOML file with sections `mesh`, `material`, `damping`, `forcing`,
//! `pipeline`, `problem`, `schedule` and `outputs`. Dimensional values are
//! strings with a unit suffix (`"5 um"`, `"300 kHz"`, `"148e9 Pa"`) and are
//! converted to the ng–μm–ms system on load; frequencies end up in rad/ms.

use crate::density::{DensityPipeline, PipelineParams};
use crate::error::{Error, Result};
use crate::fe::{EdgeSupport, FeProblem, Material, Mesh, MeshSpec, PointLoad, Rect};
use crate::optimize::{initial_damping, Evaluator, ProblemKind, ProblemSpec, RunOptions, Schedule, Stage};
use crate::fe::Rayleigh;
use crate::ssm::W11Convention;
use serde::{Deserialize, Deserializer, Serialize};
use std::f64::consts::PI;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dim {
    Length,
    Frequency,
    Modulus,
    Density,
    Force,
    Rate,
    Time,
}

/// Unit table: suffix → factor into the internal system.
fn unit_factor(dim: Dim, unit: &str) -> Option<f64> {
    let f = match (dim, unit) {
        (Dim::Length, "um" | "μm") => 1.0,
        (Dim::Length, "nm") => 1e-3,
        (Dim::Length, "mm") => 1e3,
        (Dim::Length, "m") => 1e6,
        // cycles per ms are kHz
        (Dim::Frequency, "kHz") => 2.0 * PI,
        (Dim::Frequency, "Hz") => 2.0 * PI * 1e-3,
        (Dim::Frequency, "MHz") => 2.0 * PI * 1e3,
        (Dim::Frequency, "rad/ms") => 1.0,
        (Dim::Frequency, "rad/s") => 1e-3,
        // 1 Pa = 1 kg/(m s²) = 1 ng/(μm ms²)
        (Dim::Modulus, "Pa") => 1.0,
        (Dim::Modulus, "MPa") => 1e6,
        (Dim::Modulus, "GPa") => 1e9,
        (Dim::Density, "ng/um^3" | "ng/μm^3" | "ng/μm³") => 1.0,
        (Dim::Density, "kg/m^3" | "kg/m³") => 1e-6,
        (Dim::Density, "g/cm^3" | "g/cm³") => 1e-3,
        (Dim::Force, "ng*um/ms^2" | "ng·μm/ms²" | "ng um/ms^2") => 1.0,
        (Dim::Force, "N") => 1e12,
        (Dim::Force, "mN") => 1e9,
        (Dim::Force, "uN" | "μN") => 1e6,
        (Dim::Force, "nN") => 1e3,
        (Dim::Rate, "1/ms") => 1.0,
        (Dim::Rate, "1/s") => 1e-3,
        (Dim::Time, "ms") => 1.0,
        (Dim::Time, "s") => 1e3,
        (Dim::Time, "us" | "μs") => 1e-3,
        _ => return None,
    };
    Some(f)
}

/// Parses `"<number> <unit>"` into internal units.
pub fn parse_quantity(text: &str, dim: Dim) -> std::result::Result<f64, String> {
    let t = text.trim();
    let split = t.find(|c: char| c.is_whitespace()).ok_or_else(|| format!("`{t}` has no unit suffix (expected {dim:?})"))?;
    let (num, unit) = (&t[..split], t[split..].trim());
    let v: f64 = num.parse().map_err(|_| format!("`{num}` is not a number"))?;
    let f = unit_factor(dim, unit).ok_or_else(|| format!("unknown {dim:?} unit `{unit}`"))?;
    Ok(v * f)
}

macro_rules! quantity {
    ($name:ident, $dim:expr) => {
        #[derive(Debug, Clone, Copy, PartialEq)]
        pub struct $name(pub f64);

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                parse_quantity(&s, $dim).map($name).map_err(serde::de::Error::custom)
            }
        }
    };
}

quantity!(Length, Dim::Length);
quantity!(Frequency, Dim::Frequency);
quantity!(Modulus, Dim::Modulus);
quantity!(Density, Dim::Density);
quantity!(Force, Dim::Force);
quantity!(Rate, Dim::Rate);
quantity!(Time, Dim::Time);

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RectConfig {
    pub x0: Length,
    pub x1: Length,
    pub y0: Length,
    pub y1: Length,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshConfig {
    pub nx: usize,
    pub ny: usize,
    pub element_size: Length,
    /// Passive solid regions.
    #[serde(default)]
    pub proof_mass: Vec<RectConfig>,
    #[serde(default = "clamped")]
    pub left: EdgeSupport,
    #[serde(default = "fixed_x")]
    pub right: EdgeSupport,
}

fn clamped() -> EdgeSupport {
    EdgeSupport::Clamped
}

fn fixed_x() -> EdgeSupport {
    EdgeSupport::FixedX
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaterialConfig {
    pub youngs_modulus: Modulus,
    pub poisson_ratio: f64,
    pub density: Density,
    pub thickness: Length,
}

impl Default for MaterialConfig {
    fn default() -> Self {
        let m = Material::silicon();
        MaterialConfig {
            youngs_modulus: Modulus(m.youngs_modulus),
            poisson_ratio: m.poisson_ratio,
            density: Density(m.density),
            thickness: Length(m.thickness),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DampingConfig {
    /// Damping ratio of the first two modes of the initial layout.
    pub xi: Option<f64>,
    /// Explicit Rayleigh constants; override `xi` when both are given.
    pub alpha: Option<Rate>,
    pub beta: Option<Time>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadConfig {
    pub x: Length,
    pub y: Length,
    pub fx: Option<Force>,
    pub fy: Option<Force>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub x: Length,
    pub y: Length,
    pub component: Axis,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForcingConfig {
    /// Force scale ε multiplying the loads.
    pub eps: f64,
    pub loads: Vec<LoadConfig>,
    pub outputs: Vec<OutputConfig>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Filter radius in element sizes.
    #[serde(default = "default_radius")]
    pub radius: f64,
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "default_mu_min")]
    pub mu_min: f64,
}

fn default_radius() -> f64 {
    4.0
}

fn default_eta() -> f64 {
    0.5
}

fn default_mu_min() -> f64 {
    1e-6
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig { radius: default_radius(), eta: default_eta(), mu_min: default_mu_min() }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub kind: ProblemKind,
    #[serde(default = "default_tol")]
    pub tol: f64,
    pub gamma_target: Option<f64>,
    #[serde(default)]
    pub one_sided_gamma: bool,
    pub omega_y: Option<Frequency>,
    pub omega_x: Option<Frequency>,
    pub area_max: Option<f64>,
    pub area_target: Option<f64>,
    pub b_target: Option<f64>,
    #[serde(default)]
    pub w11: W11Convention,
}

fn default_tol() -> f64 {
    0.02
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    /// Explicit stages; otherwise the p = 1 → 3 continuation at `sigma0`
    /// followed by σ doubling up to `sigma_max`.
    pub stages: Option<Vec<Stage>>,
    #[serde(default = "default_sigma")]
    pub sigma0: f64,
    pub sigma_max: Option<f64>,
    #[serde(default = "default_stage_iters")]
    pub stage_iterations: usize,
    #[serde(default = "default_max_iters")]
    pub max_iterations: usize,
    #[serde(default = "default_move")]
    pub move_limit: f64,
    #[serde(default = "default_change_tol")]
    pub change_tol: f64,
    /// Uniform starting design; defaults to the area bound.
    pub initial_density: Option<f64>,
}

fn default_sigma() -> f64 {
    10.0
}

fn default_stage_iters() -> usize {
    50
}

fn default_max_iters() -> usize {
    300
}

fn default_move() -> f64 {
    0.2
}

fn default_change_tol() -> f64 {
    1e-2
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            stages: None,
            sigma0: default_sigma(),
            sigma_max: None,
            stage_iterations: default_stage_iters(),
            max_iterations: default_max_iters(),
            move_limit: default_move(),
            change_tol: default_change_tol(),
            initial_density: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputsConfig {
    /// Force scales at which final FRCs are exported; defaults to `forcing.eps`.
    #[serde(default)]
    pub frc_eps: Vec<f64>,
    #[serde(default = "default_frc_points")]
    pub frc_points: usize,
    /// Half-width of the exported Ω window relative to ω₁, widened to cover
    /// the backbone at the peak.
    #[serde(default = "default_frc_span")]
    pub frc_span: f64,
    /// ε grid of the saddle-node sweep as multiples of `forcing.eps`.
    #[serde(default = "default_sn_range")]
    pub sn_range: [f64; 2],
    #[serde(default = "default_sn_points")]
    pub sn_points: usize,
    /// Write the layout every this many iterations (0: final only).
    #[serde(default)]
    pub layout_every: usize,
}

fn default_frc_points() -> usize {
    400
}

fn default_frc_span() -> f64 {
    0.01
}

fn default_sn_range() -> [f64; 2] {
    [0.01, 1.2]
}

fn default_sn_points() -> usize {
    50
}

impl Default for OutputsConfig {
    fn default() -> Self {
        OutputsConfig {
            frc_eps: Vec::new(),
            frc_points: default_frc_points(),
            frc_span: default_frc_span(),
            sn_range: default_sn_range(),
            sn_points: default_sn_points(),
            layout_every: 0,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub mesh: MeshConfig,
    #[serde(default)]
    pub material: MaterialConfig,
    pub damping: DampingConfig,
    pub forcing: ForcingConfig,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    pub problem: ProblemConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub outputs: OutputsConfig,
}

/// Everything a run needs, built from a [`Config`].
pub struct Setup {
    pub evaluator: Evaluator,
    pub mu0: Vec<f64>,
    pub schedule: Schedule,
    pub options: RunOptions,
}

fn bad(field: &str, message: impl Into<String>) -> Error {
    Error::Config { field: field.into(), message: message.into() }
}

/// Resolved values in internal units, for the run directory.
#[derive(Debug, Clone, Serialize)]
pub struct ResolvedUnits {
    pub system: &'static str,
    pub element_size_um: f64,
    pub youngs_modulus: f64,
    pub density: f64,
    pub thickness_um: f64,
    pub omega_y_rad_per_ms: Option<f64>,
    pub omega_x_rad_per_ms: Option<f64>,
    pub rayleigh: Rayleigh,
    pub n_dofs: usize,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        // toml reports the offending line, column and key
        toml::from_str(text).map_err(|e| bad("config", e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Config::from_toml(&text).map_err(|e| match e {
            Error::Config { field, message } => Error::Config { field, message: format!("{}: {message}", path.display()) },
            other => other,
        })
    }

    pub fn mesh_spec(&self) -> Result<MeshSpec> {
        let m = &self.mesh;
        if m.nx == 0 || m.ny == 0 {
            return Err(bad("mesh", "nx and ny must be at least 1"));
        }
        if !(m.element_size.0 > 0.0) {
            return Err(bad("mesh.element_size", "must be positive"));
        }
        let mut spec = MeshSpec::beam(m.nx, m.ny, m.element_size.0);
        spec.left = m.left;
        spec.right = m.right;
        spec.non_design = m.proof_mass.iter().map(|r| Rect { x0: r.x0.0, y0: r.y0.0, x1: r.x1.0, y1: r.y1.0 }).collect();
        Ok(spec)
    }

    pub fn material(&self) -> Material {
        let m = &self.material;
        Material {
            youngs_modulus: m.youngs_modulus.0,
            poisson_ratio: m.poisson_ratio,
            density: m.density.0,
            thickness: m.thickness.0,
        }
    }

    fn node_on_grid(mesh: &Mesh, x: f64, y: f64, field: &str) -> Result<usize> {
        let h = mesh.element_size;
        let on = |v: f64, n: usize| (v / h - (v / h).round()).abs() < 1e-9 && v >= -1e-9 && v <= n as f64 * h + 1e-9;
        if !on(x, mesh.nx) || !on(y, mesh.ny) {
            return Err(bad(field, format!("point ({x}, {y}) um is not a mesh node")));
        }
        Ok(mesh.node_at(x, y))
    }

    pub fn fe_problem(&self) -> Result<FeProblem> {
        let mesh = Mesh::build(&self.mesh_spec()?)?;
        let loads = self
            .forcing
            .loads
            .iter()
            .map(|l| {
                let node = Self::node_on_grid(&mesh, l.x.0, l.y.0, "forcing.loads")?;
                Ok(PointLoad { node, fx: l.fx.map_or(0.0, |f| f.0), fy: l.fy.map_or(0.0, |f| f.0) })
            })
            .collect::<Result<Vec<_>>>()?;
        if loads.is_empty() {
            return Err(bad("forcing.loads", "at least one load required"));
        }
        let outputs = self
            .forcing
            .outputs
            .iter()
            .map(|o| {
                let node = Self::node_on_grid(&mesh, o.x.0, o.y.0, "forcing.outputs")?;
                Ok((node, if o.component == Axis::X { 0 } else { 1 }))
            })
            .collect::<Result<Vec<_>>>()?;
        if outputs.is_empty() {
            return Err(bad("forcing.outputs", "at least one output DOF required"));
        }
        FeProblem::new(mesh, self.material(), &loads, &outputs)
    }

    pub fn problem_spec(&self) -> Result<ProblemSpec> {
        let p = &self.problem;
        if !(self.forcing.eps > 0.0) {
            return Err(bad("forcing.eps", "must be positive"));
        }
        let mut s = ProblemSpec::new(p.kind, self.forcing.eps);
        s.tol = p.tol;
        s.gamma_target = p.gamma_target;
        s.one_sided_gamma = p.one_sided_gamma;
        s.omega_y_target = p.omega_y.map(|f| f.0);
        s.omega_x_target = p.omega_x.map(|f| f.0);
        s.area_max = p.area_max;
        s.area_target = p.area_target;
        s.b_target = p.b_target;
        s.convention = p.w11;
        s.validate()?;
        Ok(s)
    }

    pub fn schedule(&self) -> Result<Schedule> {
        let s = &self.schedule;
        let sched = match &s.stages {
            Some(stages) => Schedule { stages: stages.clone() },
            None => Schedule::continuation(s.sigma0, s.sigma_max.unwrap_or(s.sigma0), s.stage_iterations),
        };
        sched.validate()?;
        Ok(sched)
    }

    pub fn run_options(&self) -> Result<RunOptions> {
        let s = &self.schedule;
        if !(s.move_limit > 0.0 && s.move_limit <= 1.0) {
            return Err(bad("schedule.move_limit", "must lie in (0, 1]"));
        }
        Ok(RunOptions { max_iters: s.max_iterations, move_limit: s.move_limit, change_tol: s.change_tol, ..Default::default() })
    }

    pub fn pipeline_params(&self, stage: &Stage) -> PipelineParams {
        PipelineParams { radius: self.pipeline.radius, sigma: stage.sigma, eta: self.pipeline.eta, penal: stage.penal, mu_min: self.pipeline.mu_min }
    }

    /// Builds the evaluator, the uniform starting design and the schedule.
    pub fn setup(&self) -> Result<Setup> {
        let problem = self.fe_problem()?;
        let spec = self.problem_spec()?;
        let schedule = self.schedule()?;
        let options = self.run_options()?;
        let pipeline = DensityPipeline::new(&problem.mesh, self.pipeline_params(&schedule.stages[0]))?;
        let rho0 = self.schedule.initial_density.unwrap_or_else(|| spec.initial_density());
        if !(rho0 > 0.0 && rho0 <= 1.0) {
            return Err(bad("schedule.initial_density", "must lie in (0, 1]"));
        }
        let mu0 = vec![rho0; problem.mesh.n_elements()];
        let damping = match (&self.damping.alpha, &self.damping.beta, self.damping.xi) {
            (Some(a), Some(b), _) => Rayleigh { alpha: a.0, beta: b.0 },
            (None, None, Some(xi)) => initial_damping(&problem, &pipeline, &mu0, xi)?,
            _ => return Err(bad("damping", "give either xi or both alpha and beta")),
        };
        let evaluator = Evaluator::new(problem, pipeline, damping, spec)?;
        Ok(Setup { evaluator, mu0, schedule, options })
    }

    pub fn resolved_units(&self, setup: &Setup) -> ResolvedUnits {
        let m = self.material();
        ResolvedUnits {
            system: "ng-um-ms (forces ng*um/ms^2, frequencies rad/ms)",
            element_size_um: self.mesh.element_size.0,
            youngs_modulus: m.youngs_modulus,
            density: m.density,
            thickness_um: m.thickness,
            omega_y_rad_per_ms: setup.evaluator.spec.omega_y_target,
            omega_x_rad_per_ms: setup.evaluator.spec.omega_x_target,
            rayleigh: setup.evaluator.damping,
            n_dofs: setup.evaluator.problem.mesh.n_free,
        }
    }

    /// Force scales for the final FRC export.
    pub fn frc_eps(&self) -> Vec<f64> {
        if self.outputs.frc_eps.is_empty() {
            vec![self.forcing.eps]
        } else {
            self.outputs.frc_eps.clone()
        }
    }
}
