//! Optimization problem formulations, their evaluation and the MMA loop with
//! continuation of the SIMP exponent and projection steepness.

use crate::density::{DensityPipeline, DesignField, PipelineParams};
use crate::error::{Error, Result};
use crate::fe::{AssembledModel, FeProblem, Rayleigh};
use crate::frc;
use crate::mma::{Mma, MmaSettings};
use crate::modal::{rayleigh_constants, solve_modes, ModalData};
use crate::sensitivity::{self, chain_coefficients, cusp_gradient, d_linear_objective, d_rho_max};
use crate::ssm::{build_rom, Rom, W11Convention};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::time::Instant;

type C64 = Complex64;

/// Number of modes computed per analysis (master, ω_X and spares for tracking).
pub const MODE_COUNT: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemKind {
    /// Minimize ρ_max with a backbone constraint.
    PeakMin,
    /// Minimize the linear resonant response `Σ_L |U|²`.
    LinearRef,
    /// Minimize `(Im γ / γ_target − 1)²`.
    BackboneOnly,
    /// Maximize ρ_max with `|b| ≤ b_target`.
    SnControl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub kind: ProblemKind,
    /// Force scale ε.
    pub eps: f64,
    /// Constraint band half-width (relative).
    pub tol: f64,
    pub gamma_target: Option<f64>,
    /// Replace the two-sided γ band by `Im γ ≥ γ_t` (γ_t > 0) or `Im γ ≤ γ_t` (γ_t < 0).
    pub one_sided_gamma: bool,
    /// rad/ms.
    pub omega_y_target: Option<f64>,
    /// rad/ms.
    pub omega_x_target: Option<f64>,
    pub area_max: Option<f64>,
    pub area_target: Option<f64>,
    pub b_target: Option<f64>,
    pub convention: W11Convention,
}

impl ProblemSpec {
    pub fn new(kind: ProblemKind, eps: f64) -> Self {
        ProblemSpec {
            kind,
            eps,
            tol: 0.02,
            gamma_target: None,
            one_sided_gamma: false,
            omega_y_target: None,
            omega_x_target: None,
            area_max: None,
            area_target: None,
            b_target: None,
            convention: W11Convention::Double,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config { field: "problem".into(), message: m.into() });
        if !(self.eps > 0.0) {
            return bad("force scale eps must be positive");
        }
        if !(self.tol > 0.0 && self.tol < 1.0) {
            return bad("tol must lie in (0, 1)");
        }
        if let (ProblemKind::PeakMin, Some(y), Some(x)) = (self.kind, self.omega_y_target, self.omega_x_target) {
            if !(x > 3.0 * y) {
                return bad("peak_min requires omega_x_target > 3 omega_y_target (cubic internal resonance)");
            }
        }
        match self.kind {
            ProblemKind::BackboneOnly if self.gamma_target.is_none() => {
                return bad("backbone_only requires gamma_target");
            }
            ProblemKind::SnControl => match self.b_target {
                Some(b) if b > 0.0 => {}
                _ => return bad("sn_control requires b_target > 0"),
            },
            _ => {}
        }
        if self.gamma_target == Some(0.0) {
            return bad("gamma_target must be nonzero");
        }
        for (name, v) in [("area_max", self.area_max), ("area_target", self.area_target)] {
            if let Some(a) = v {
                if !(a > 0.0 && a <= 1.0) {
                    return bad(&format!("{name} must lie in (0, 1]"));
                }
            }
        }
        Ok(())
    }

    /// The constraints of this formulation in evaluation order.
    pub fn constraints(&self) -> Vec<ConstraintKind> {
        let mut out = Vec::new();
        if self.kind == ProblemKind::PeakMin && self.gamma_target.is_some() {
            out.push(if self.one_sided_gamma { ConstraintKind::GammaOneSided } else { ConstraintKind::GammaBand });
        }
        if self.omega_y_target.is_some() {
            out.push(ConstraintKind::OmegaYBand);
        }
        if self.omega_x_target.is_some() {
            // every computed non-master mode is bounded so the constraint stays
            // smooth when modes cross
            out.extend((0..MODE_COUNT - 1).map(ConstraintKind::OmegaXMin));
        }
        if self.kind == ProblemKind::SnControl {
            out.push(ConstraintKind::CuspMax);
            if self.area_target.is_some() {
                out.push(ConstraintKind::AreaBand);
            }
        } else if self.area_max.is_some() {
            out.push(ConstraintKind::AreaMax);
        }
        out
    }

    /// Uniform starting density: the area bound.
    pub fn initial_density(&self) -> f64 {
        self.area_max.or(self.area_target).unwrap_or(0.5)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintKind {
    /// `(Im γ/γ_t − 1)² − tol² ≤ 0`.
    GammaBand,
    /// `1 − Im γ/γ_t ≤ 0`.
    GammaOneSided,
    /// `(ω_Y/ω_Y,t − 1)² − tol² ≤ 0`.
    OmegaYBand,
    /// `1 − ω_X/ω_X,t ≤ 0` for the non-master mode of the given rank.
    OmegaXMin(usize),
    /// `A/A_max − 1 ≤ 0`.
    AreaMax,
    /// `(A/A_t − 1)² − tol² ≤ 0`.
    AreaBand,
    /// `|b| ≤ b_t` through [`cusp_measure`].
    CuspMax,
}

impl ConstraintKind {
    pub fn name(self) -> String {
        match self {
            ConstraintKind::OmegaXMin(0) => "omega_x_min".into(),
            ConstraintKind::OmegaXMin(k) => format!("omega_x_min_{}", k + 1),
            k => k.base_name().into(),
        }
    }

    fn base_name(self) -> &'static str {
        match self {
            ConstraintKind::GammaBand => "gamma_band",
            ConstraintKind::GammaOneSided => "gamma_one_sided",
            ConstraintKind::OmegaYBand => "omega_y_band",
            ConstraintKind::OmegaXMin(_) => "omega_x_min",
            ConstraintKind::AreaMax => "area_max",
            ConstraintKind::AreaBand => "area_band",
            ConstraintKind::CuspMax => "cusp_max",
        }
    }

    fn is_band(self) -> bool {
        matches!(self, ConstraintKind::GammaBand | ConstraintKind::OmegaYBand | ConstraintKind::AreaBand)
    }
}

/// Which optional quantities to evaluate.
#[derive(Debug, Clone, Copy, Default)]
pub struct Wanted {
    pub rho_max: bool,
    pub cusp: bool,
    pub linear: bool,
    pub gradients: bool,
}

/// Scalar results of one analysis.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Quantities {
    pub omega1: f64,
    pub omega2: f64,
    /// Non-master frequencies in ascending order.
    pub omega_other: Vec<f64>,
    pub lambda: C64,
    pub gamma: C64,
    pub f_tilde: C64,
    pub area: f64,
    pub rho_max: Option<f64>,
    pub omega_max: Option<f64>,
    /// Cusp coefficient at the controlling saddle-node, 0 without folds.
    pub b: Option<f64>,
    /// Signed distance to the cusp, positive with two folds.
    pub fold_margin: Option<f64>,
    /// `b²/fold_margin` near the cusp, used below it.
    pub cusp_scale: Option<f64>,
    /// Frequencies of the saddle-node points.
    pub sn_omegas: Vec<f64>,
    pub c_lin: Option<f64>,
}

impl Quantities {
    pub fn sn_separation(&self) -> f64 {
        match self.sn_omegas.as_slice() {
            [a, .., b] => (b - a).abs(),
            _ => 0.0,
        }
    }
}

/// Gradients with respect to the design variables μ (one entry per element,
/// zero on non-design elements).
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    pub omega1: Vec<f64>,
    pub omega2: Vec<f64>,
    pub omega_other: Vec<Vec<f64>>,
    pub lambda: Vec<C64>,
    pub gamma: Vec<C64>,
    pub f_tilde: Vec<C64>,
    pub area: Vec<f64>,
    pub rho_max: Option<Vec<f64>>,
    /// Gradient of `b` (not `|b|`).
    pub b: Option<Vec<f64>>,
    pub fold_margin: Option<Vec<f64>>,
    pub c_lin: Option<Vec<f64>>,
}

/// One full analysis: fields, model, modes and reduced model.
pub struct Analysis {
    pub field: DesignField,
    pub model: AssembledModel,
    pub modal: ModalData,
    pub rom: Rom,
}

/// Fixed problem data plus the continuation-dependent pipeline.
#[derive(Debug, Clone)]
pub struct Evaluator {
    pub problem: FeProblem,
    pub pipeline: DensityPipeline,
    pub damping: Rayleigh,
    pub spec: ProblemSpec,
    /// Master mode of the last accepted design, for mode tracking.
    pub prev_phi: Option<Vec<f64>>,
}

/// Rayleigh constants from the first two modes of the layout `mu`.
pub fn initial_damping(problem: &FeProblem, pipeline: &DensityPipeline, mu: &[f64], xi0: f64) -> Result<Rayleigh> {
    let field = pipeline.forward(mu)?;
    let model = problem.assemble(&field.mu_hat)?;
    let modes = solve_modes(&model.m, &model.k, 2)?;
    rayleigh_constants(modes.omega[0], modes.omega[1], xi0)
}

fn split<T: Copy>(v: &[T], f: impl Fn(T) -> f64) -> Vec<f64> {
    v.iter().map(|&x| f(x)).collect()
}

impl Evaluator {
    pub fn new(problem: FeProblem, pipeline: DensityPipeline, damping: Rayleigh, spec: ProblemSpec) -> Result<Self> {
        spec.validate()?;
        if pipeline.n_elements() != problem.mesh.n_elements() {
            return Err(Error::Dimension { expected: problem.mesh.n_elements(), got: pipeline.n_elements() });
        }
        Ok(Evaluator { problem, pipeline, damping, spec, prev_phi: None })
    }

    pub fn analyze(&self, mu: &[f64]) -> Result<Analysis> {
        let field = self.pipeline.forward(mu)?;
        let model = self.problem.assemble(&field.mu_hat)?.with_damping(self.damping);
        let modal = ModalData::compute(&model, MODE_COUNT.min(model.n), self.prev_phi.as_deref())?;
        let rom = build_rom(&model, &modal, self.spec.convention)?;
        Ok(Analysis { field, model, modal, rom })
    }

    fn back(&self, field: &DesignField, d_hat: &[f64]) -> Result<Vec<f64>> {
        sensitivity::chain_to_design(&self.pipeline, field, d_hat)
    }

    fn back_c(&self, field: &DesignField, d_hat: &[C64]) -> Result<Vec<C64>> {
        let re = self.back(field, &split(d_hat, |z| z.re))?;
        let im = self.back(field, &split(d_hat, |z| z.im))?;
        Ok(re.iter().zip(&im).map(|(&a, &b)| C64::new(a, b)).collect())
    }

    /// Evaluates the requested quantities (and gradients) at `mu` with force scale `eps`.
    pub fn quantities(&self, mu: &[f64], eps: f64, want: Wanted) -> Result<(Quantities, Option<Gradients>, Analysis)> {
        let an = self.analyze(mu)?;
        let (model, modal, rom, field) = (&an.model, &an.modal, &an.rom, &an.field);
        let c = rom.coefficients();
        let (area, d_area) = self.pipeline.area_fraction(field)?;
        let mut q = Quantities {
            omega1: modal.omega_master(),
            omega2: modal.omega[modal.secondary()],
            omega_other: modal.others().map(|j| modal.omega[j]).collect(),
            lambda: rom.lambda,
            gamma: rom.gamma,
            f_tilde: rom.f_tilde,
            area,
            ..Default::default()
        };
        let peak = if want.rho_max || want.cusp { Some(frc::peak(&c, eps)?) } else { None };
        if want.rho_max {
            let (r, w) = peak.unwrap();
            q.rho_max = Some(r);
            q.omega_max = Some(w);
        }
        let mut margin = None;
        let cusp = if want.cusp {
            let sn = frc::sn_points(&c, eps);
            q.sn_omegas = sn.iter().map(|p| p.omega).collect();
            let cc = frc::controlling_cusp(&c, eps)?;
            q.b = Some(cc.map_or(0.0, |(_, d)| d.b));
            if cc.is_none() {
                let m = frc::fold_margin(&c, eps)?;
                q.fold_margin = Some(m.value);
                q.cusp_scale = frc::cusp_scale(&c, eps, CUSP_PROBE)?;
                margin = Some(m);
            }
            cc
        } else {
            None
        };
        let lin = if want.linear {
            let l = d_linear_objective(model, q.omega1, eps, &model.outputs)?;
            q.c_lin = Some(l.value);
            Some(l)
        } else {
            None
        };
        if !want.gradients {
            return Ok((q, None, an));
        }

        let bundle = sensitivity::core_bundle(model, modal, rom)?;
        let mut g = Gradients {
            omega1: self.back(field, &bundle.d_omega1)?,
            omega2: self.back(field, &bundle.d_omega2)?,
            lambda: self.back_c(field, &bundle.d_lambda)?,
            gamma: self.back_c(field, &bundle.d_gamma)?,
            f_tilde: self.back_c(field, &bundle.d_ftilde)?,
            area: d_area,
            ..Default::default()
        };
        if self.spec.omega_x_target.is_some() {
            for j in modal.others() {
                let d = sensitivity::d_omega(model, &modal.phi[j], modal.omega[j]);
                g.omega_other.push(self.back(field, &d)?);
            }
        }
        if let Some((rho, _)) = peak.filter(|_| want.rho_max) {
            let d = d_rho_max(&c, eps, rho, &bundle.d_lambda, &bundle.d_gamma, &bundle.d_ftilde)?;
            g.rho_max = Some(self.back(field, &d)?);
        }
        if want.cusp {
            let db = match &cusp {
                Some((sn, data)) => {
                    let cg = cusp_gradient(&c, eps, sn, data)?;
                    chain_coefficients(&c, &cg.b, &bundle.d_lambda, &bundle.d_gamma, &bundle.d_ftilde)
                }
                None => vec![0.0; bundle.d_omega1.len()],
            };
            g.b = Some(self.back(field, &db)?);
            if let Some(m) = &margin {
                let dm = chain_coefficients(&c, &m.grad, &bundle.d_lambda, &bundle.d_gamma, &bundle.d_ftilde);
                g.fold_margin = Some(self.back(field, &dm)?);
            }
        }
        if let Some(l) = lin {
            let total: Vec<f64> = l.grad.iter().zip(&bundle.d_omega1).map(|(a, w)| a + l.d_big_omega * w).collect();
            g.c_lin = Some(self.back(field, &total)?);
        }
        Ok((q, Some(g), an))
    }

    fn wanted(&self) -> Wanted {
        let k = self.spec.kind;
        Wanted {
            // ρ_max is logged for every formulation
            rho_max: true,
            cusp: k == ProblemKind::SnControl,
            linear: k == ProblemKind::LinearRef,
            gradients: true,
        }
    }

    /// Objective and canonical constraints `g ≤ 0` with design gradients.
    pub fn evaluate(&self, mu: &[f64]) -> Result<Evaluation> {
        let s = &self.spec;
        let (q, g, an) = self.quantities(mu, s.eps, self.wanted())?;
        let g = g.expect("gradients requested");
        let n = mu.len();
        let zero = vec![0.0; n];
        let im_gamma_grad: Vec<f64> = split(&g.gamma, |z| z.im);
        let (objective, grad_objective) = match s.kind {
            ProblemKind::PeakMin => (q.rho_max.unwrap(), g.rho_max.clone().unwrap()),
            ProblemKind::SnControl => (-q.rho_max.unwrap(), g.rho_max.clone().unwrap().iter().map(|v| -v).collect()),
            ProblemKind::LinearRef => (q.c_lin.unwrap(), g.c_lin.clone().unwrap()),
            ProblemKind::BackboneOnly => {
                let gt = s.gamma_target.unwrap();
                let r = q.gamma.im / gt - 1.0;
                // one-sided: only shortfalls relative to the target are penalized
                let r = if s.one_sided_gamma { r.min(0.0) } else { r };
                (r * r, im_gamma_grad.iter().map(|d| 2.0 * r * d / gt).collect())
            }
        };
        let mut constraints = Vec::new();
        let mut grad_constraints = Vec::new();
        let tol2 = s.tol * s.tol;
        for kind in s.constraints() {
            let (v, d): (f64, Vec<f64>) = match kind {
                ConstraintKind::GammaBand => {
                    let gt = s.gamma_target.unwrap();
                    let r = q.gamma.im / gt - 1.0;
                    (r * r - tol2, im_gamma_grad.iter().map(|d| 2.0 * r * d / gt).collect())
                }
                ConstraintKind::GammaOneSided => {
                    let gt = s.gamma_target.unwrap();
                    (1.0 - q.gamma.im / gt, im_gamma_grad.iter().map(|d| -d / gt).collect())
                }
                ConstraintKind::OmegaYBand => {
                    let t = s.omega_y_target.unwrap();
                    let r = q.omega1 / t - 1.0;
                    (r * r - tol2, g.omega1.iter().map(|d| 2.0 * r * d / t).collect())
                }
                ConstraintKind::OmegaXMin(k) => {
                    let t = s.omega_x_target.unwrap();
                    match (q.omega_other.get(k), g.omega_other.get(k)) {
                        (Some(w), Some(dw)) => (1.0 - w / t, dw.iter().map(|d| -d / t).collect()),
                        // fewer modes than guarded (tiny models): inactive
                        _ => (-1.0, zero.clone()),
                    }
                }
                ConstraintKind::AreaMax => {
                    let t = s.area_max.unwrap();
                    (q.area / t - 1.0, g.area.iter().map(|d| d / t).collect())
                }
                ConstraintKind::AreaBand => {
                    let t = s.area_target.unwrap();
                    let r = q.area / t - 1.0;
                    (r * r - tol2, g.area.iter().map(|d| 2.0 * r * d / t).collect())
                }
                ConstraintKind::CuspMax => {
                    let bt = s.b_target.unwrap();
                    match (q.fold_margin, q.cusp_scale, &g.fold_margin) {
                        // no folds: continue b² ≈ K·m below the cusp
                        (Some(m), Some(k), Some(dm)) if q.b == Some(0.0) => {
                            let f = k / (bt * bt);
                            (f * m.min(0.0) - 1.0, if m < 0.0 { dm.iter().map(|x| f * x).collect() } else { zero.clone() })
                        }
                        _ => {
                            let (v, slope) = cusp_measure(q.b.unwrap() / bt);
                            (v, g.b.as_ref().map_or(zero.clone(), |d| d.iter().map(|x| slope * x / bt).collect()))
                        }
                    }
                }
            };
            constraints.push(v);
            grad_constraints.push(d);
        }
        Ok(Evaluation { objective, grad_objective, constraints, grad_constraints, quantities: q, analysis: an })
    }

    /// Whether a canonical constraint value counts as satisfied for
    /// convergence: band forms already contain tol, ratio forms get tol slack.
    pub fn within_tol(&self, kind: ConstraintKind, value: f64) -> bool {
        if kind.is_band() {
            value <= FEASIBILITY_TOL
        } else {
            value <= self.spec.tol
        }
    }
}

/// Cusp constraint value and its derivative in `r = b/b_t`: `r² − 1` for
/// `|r| ≤ 1` and `2 ln|r|` beyond, so `g ≤ 0 ⇔ |b| ≤ b_t`. `b` grows like the
/// square root of the distance past the cusp, which `r²` removes; the
/// logarithm keeps runaway values of `b` from swamping the subproblem.
pub fn cusp_measure(r: f64) -> (f64, f64) {
    if r.abs() <= 1.0 {
        (r * r - 1.0, 2.0 * r)
    } else {
        (2.0 * r.abs().ln(), 2.0 / r)
    }
}

/// Fold margin at which [`frc::cusp_scale`] probes `b`.
pub const CUSP_PROBE: f64 = 1e-4;

/// Strict feasibility threshold on canonical constraint values.
pub const FEASIBILITY_TOL: f64 = 1e-6;

pub struct Evaluation {
    pub objective: f64,
    pub grad_objective: Vec<f64>,
    pub constraints: Vec<f64>,
    pub grad_constraints: Vec<Vec<f64>>,
    pub quantities: Quantities,
    pub analysis: Analysis,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub penal: f64,
    pub sigma: f64,
    /// Maximum iterations in this stage; the last stage runs to the cap.
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub stages: Vec<Stage>,
}

impl Schedule {
    /// p = 1 → 3 in steps of 0.5 at σ = `sigma0`, then σ doubled up to `sigma_max`.
    pub fn continuation(sigma0: f64, sigma_max: f64, stage_iters: usize) -> Self {
        let mut stages: Vec<Stage> = [1.0, 1.5, 2.0, 2.5, 3.0]
            .iter()
            .map(|&p| Stage { penal: p, sigma: sigma0, iterations: stage_iters })
            .collect();
        let mut s = sigma0;
        while s * 2.0 <= sigma_max + 1e-9 {
            s *= 2.0;
            stages.push(Stage { penal: 3.0, sigma: s, iterations: stage_iters });
        }
        Schedule { stages }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config { field: "schedule".into(), message: "at least one stage required".into() });
        }
        for s in &self.stages {
            if !(s.penal >= 1.0 && s.sigma > 0.0 && s.iterations > 0) {
                return Err(Error::Config { field: "schedule".into(), message: format!("invalid stage {s:?}") });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunOptions {
    pub max_iters: usize,
    pub move_limit: f64,
    /// Stop when `max |Δμ|` falls below this with all constraints within tol.
    pub change_tol: f64,
    /// Consecutive failed analyses tolerated before aborting.
    pub max_rollbacks: usize,
    pub start_iter: usize,
    pub start_stage: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions { max_iters: 300, move_limit: 0.2, change_tol: 1e-2, max_rollbacks: 8, start_iter: 0, start_stage: 0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub objective: f64,
    pub constraints: Vec<(String, f64)>,
    pub im_gamma: f64,
    pub re_gamma: f64,
    pub omega1: f64,
    pub omega2: f64,
    pub area: f64,
    pub rho_max: Option<f64>,
    pub b: Option<f64>,
    pub c_lin: Option<f64>,
    pub max_change: f64,
    pub stage: usize,
    pub penal: f64,
    pub sigma: f64,
    pub move_limit: f64,
    pub rolled_back: bool,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunResult {
    pub mu: Vec<f64>,
    pub history: Vec<IterationRecord>,
    pub converged: bool,
    pub iterations: usize,
    pub final_quantities: Quantities,
    pub final_objective: f64,
    pub final_constraints: Vec<(String, f64)>,
    pub seconds_per_iteration: f64,
}

fn names(spec: &ProblemSpec, values: &[f64]) -> Vec<(String, f64)> {
    spec.constraints().iter().zip(values).map(|(k, &v)| (k.name().to_string(), v)).collect()
}

/// Runs the optimization from `mu0`. `observer` sees every iteration record
/// together with the current design.
pub fn run(
    ev: &mut Evaluator,
    mu0: &[f64],
    schedule: &Schedule,
    opts: &RunOptions,
    observer: &mut dyn FnMut(&IterationRecord, &[f64]),
) -> Result<RunResult> {
    schedule.validate()?;
    let design: Vec<usize> = (0..ev.pipeline.n_elements()).filter(|&e| !ev.pipeline.non_design[e]).collect();
    let nd = design.len();
    let kinds = ev.spec.constraints();
    let tol2 = ev.spec.tol * ev.spec.tol;
    // band constraints are O(tol²); rescale them to O(1) for MMA
    let g_scale: Vec<f64> = kinds.iter().map(|k| if k.is_band() { 1.0 / tol2 } else { 1.0 }).collect();
    let mut stage = opts.start_stage.min(schedule.stages.len() - 1);
    let set_stage = |ev: &mut Evaluator, st: &Stage| -> Result<()> {
        let p = PipelineParams { penal: st.penal, sigma: st.sigma, ..ev.pipeline.params };
        ev.pipeline.set_params(p)
    };
    set_stage(ev, &schedule.stages[stage])?;

    let mut mu = mu0.to_vec();
    let t0 = Instant::now();
    let mut eval = ev.evaluate(&mu)?;
    ev.prev_phi = Some(eval.analysis.modal.phi_master().to_vec());
    let f_scale = match ev.spec.kind {
        ProblemKind::BackboneOnly => 1.0,
        _ => eval.objective.abs().max(f64::MIN_POSITIVE),
    };
    let settings = MmaSettings { move_limit: opts.move_limit, ..Default::default() };
    let mut mma = Mma::new(vec![0.0; nd], vec![1.0; nd], kinds.len(), settings)?;
    let mut history = Vec::new();
    let mut move_limit = opts.move_limit;
    let mut stage_iter = 0;
    let mut rollbacks = 0;
    let mut converged = false;
    let mut iter = opts.start_iter;
    let record = |eval: &Evaluation, iter: usize, change: f64, stage: usize, ml: f64, rb: bool, secs: f64, ev: &Evaluator| {
        let q = &eval.quantities;
        IterationRecord {
            iteration: iter,
            objective: eval.objective,
            constraints: names(&ev.spec, &eval.constraints),
            im_gamma: q.gamma.im,
            re_gamma: q.gamma.re,
            omega1: q.omega1,
            omega2: q.omega2,
            area: q.area,
            rho_max: q.rho_max,
            b: q.b,
            c_lin: q.c_lin,
            max_change: change,
            stage,
            penal: ev.pipeline.params.penal,
            sigma: ev.pipeline.params.sigma,
            move_limit: ml,
            rolled_back: rb,
            seconds: secs,
        }
    };
    let rec0 = record(&eval, iter, f64::NAN, stage, move_limit, false, t0.elapsed().as_secs_f64(), ev);
    observer(&rec0, &mu);
    history.push(rec0);

    let loop_start = Instant::now();
    let mut steps = 0usize;
    while iter < opts.max_iters {
        let t = Instant::now();
        iter += 1;
        stage_iter += 1;
        let x: Vec<f64> = design.iter().map(|&e| mu[e]).collect();
        let df0: Vec<f64> = design.iter().map(|&e| eval.grad_objective[e] / f_scale).collect();
        let gv: Vec<f64> = eval.constraints.iter().zip(&g_scale).map(|(v, s)| v * s).collect();
        let dg: Vec<Vec<f64>> =
            eval.grad_constraints.iter().zip(&g_scale).map(|(g, s)| design.iter().map(|&e| g[e] * s).collect()).collect();
        mma.settings.move_limit = move_limit;
        let mut trial = mu.clone();
        let outcome = mma.update(&x, eval.objective / f_scale, &df0, &gv, &dg).and_then(|step| {
            for (k, &e) in design.iter().enumerate() {
                trial[e] = step.x[k].clamp(0.0, 1.0);
            }
            ev.evaluate(&trial)
        });
        let change = design.iter().map(|&e| (trial[e] - mu[e]).abs()).fold(0.0, f64::max);
        let change = match outcome {
            Ok(new_eval) => {
                rollbacks = 0;
                mu = trial;
                eval = new_eval;
                ev.prev_phi = Some(eval.analysis.modal.phi_master().to_vec());
                let rec = record(&eval, iter, change, stage, move_limit, false, t.elapsed().as_secs_f64(), ev);
                observer(&rec, &mu);
                history.push(rec);
                change
            }
            Err(err) => {
                rollbacks += 1;
                log::warn!("iteration {iter}: step rejected ({err}); rolling back with move limit {}", move_limit / 2.0);
                move_limit /= 2.0;
                let rec = record(&eval, iter, change, stage, move_limit, true, t.elapsed().as_secs_f64(), ev);
                observer(&rec, &mu);
                history.push(rec);
                if rollbacks > opts.max_rollbacks {
                    return Err(err);
                }
                continue;
            }
        };
        steps += 1;
        let feasible = kinds.iter().zip(&eval.constraints).all(|(&k, &v)| ev.within_tol(k, v));
        let settled = change < opts.change_tol && feasible;
        let last_stage = stage + 1 == schedule.stages.len();
        if settled && last_stage {
            converged = true;
            break;
        }
        if !last_stage && (settled || stage_iter >= schedule.stages[stage].iterations) {
            stage += 1;
            stage_iter = 0;
            set_stage(ev, &schedule.stages[stage])?;
            mma.reset_asymptotes();
            move_limit = opts.move_limit;
            match ev.evaluate(&mu) {
                Ok(e) => {
                    eval = e;
                    log::info!("stage {stage}: p = {}, sigma = {}", ev.pipeline.params.penal, ev.pipeline.params.sigma);
                }
                Err(err) => {
                    // the current design has no valid analysis under the next
                    // stage; stay in the previous one and retry after its budget
                    log::warn!("iteration {iter}: stage {stage} rejected ({err}); staying in stage {}", stage - 1);
                    stage -= 1;
                    set_stage(ev, &schedule.stages[stage])?;
                }
            }
        }
    }
    let spi = loop_start.elapsed().as_secs_f64() / steps.max(1) as f64;
    Ok(RunResult {
        final_objective: eval.objective,
        final_constraints: names(&ev.spec, &eval.constraints),
        final_quantities: eval.quantities.clone(),
        mu,
        history,
        converged,
        iterations: iter,
        seconds_per_iteration: spi,
    })
}
