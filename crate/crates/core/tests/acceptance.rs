//! Acceptance suite. Prints one line per criterion and exits non-zero if any
//! hard criterion fails.

use frc_topopt::check::{check_gradients, DEFAULT_STEP};
use frc_topopt::config::Config;
use frc_topopt::density::{DensityPipeline, PipelineParams};
use frc_topopt::fe::*;
use frc_topopt::frc;
use frc_topopt::modal::ModalData;
use frc_topopt::optimize::*;
use frc_topopt::oracle::{self, NewmarkSettings};
use frc_topopt::ssm::{build_rom, f21_vector, gamma, nonautonomous_x0, reconstruct, RomCoefficients, W11Convention};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;
use std::path::PathBuf;
use std::time::Instant;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn khz(f: f64) -> f64 {
    2.0 * PI * f
}

fn configs() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

// 1. Free DOF counts of the three example meshes (quoted values).
fn dof_counts() -> Outcome {
    let expect = [("ex1_peak.toml", 6699), ("ex2_harden_peak.toml", 4179), ("ex3_b1.toml", 5019)];
    let mut got = Vec::new();
    for (file, n) in expect {
        let cfg = Config::load(&configs().join(file)).expect("config loads");
        let p = cfg.fe_problem().expect("mesh builds");
        got.push((p.mesh.n_free, n));
    }
    let pass = got.iter().all(|(a, b)| a == b);
    outcome(pass, format!("free DOFs {:?} (expected 6699, 4179, 5019 exactly)", got.iter().map(|g| g.0).collect::<Vec<_>>()))
}

// 2. Every element of every example mesh under rigid rotations up to 30°.
fn rigid_rotations() -> Outcome {
    let mut worst = 0.0f64;
    for (nx, ny, size) in [(160, 20, 5.0), (100, 20, 5.0), (120, 20, 5.0), (50, 10, 12.0)] {
        let mesh = Mesh::build(&MeshSpec::beam(nx, ny, size)).unwrap();
        let ops = element_operators(&Material::silicon(), size).unwrap();
        for deg in [1.0, 5.0, 10.0, 20.0, 30.0] {
            let (s, c) = (deg * PI / 180.0f64).sin_cos();
            // rotation of the whole beam about its lower-left corner
            for el in &mesh.elements {
                let mut u = [0.0; 8];
                for (k, &n) in el.iter().enumerate() {
                    let [x, y] = mesh.nodes[n];
                    u[2 * k] = c * x - s * y - x;
                    u[2 * k + 1] = s * x + c * y - y;
                }
                let f = frc_topopt::fe::element::internal_force(&ops, &u);
                let lin: f64 = (0..8).map(|a| (0..8).map(|b| ops.ke[a * 8 + b] * u[b]).sum::<f64>().powi(2)).sum::<f64>().sqrt();
                let tot = f.iter().map(|v| v * v).sum::<f64>().sqrt();
                worst = worst.max(tot / lin);
            }
        }
    }
    outcome(worst <= 1e-9, format!("max |f_int|/|K u| = {worst:.2e} over 4 meshes x 5 angles (tol 1e-9)"))
}

// 3. Closed-form Duffing ROM.
fn duffing_rom() -> Outcome {
    let (w, xi, force) = (1.0, 0.001, 1.0);
    let model = oracle::duffing(w, xi, 1.0, force).unwrap();
    let modal = ModalData::compute(&model, 1, None).unwrap();
    let rom = build_rom(&model, &modal, W11Convention::Double).unwrap();
    let s = (1.0 - xi * xi as f64).sqrt();
    let c = rom.coefficients();
    let eps = 0.01;
    let (rho, _) = frc::peak(&c, eps).unwrap();
    let errs = [
        rom.gamma.re.abs(),
        (rom.gamma.im - 3.0 / (2.0 * w * s)).abs(),
        (rom.f_tilde.norm() - force / (4.0 * w * s)).abs(),
        (rho - eps * rom.f_tilde.norm() / (xi * w)).abs(),
    ];
    let pass = errs[0] <= 1e-12 && errs[1] <= 1e-10 && errs[2] <= 1e-12 && errs[3] <= 1e-10;
    outcome(pass, format!("|Re γ| {:.1e}, Im γ err {:.1e}, |f̃| err {:.1e}, ρ_max err {:.1e} (tol 1e-12/1e-10/1e-12/1e-10)", errs[0], errs[1], errs[2], errs[3]))
}

/// `G(s) = s[(a + b s)² + (d + c s)²] − e²` with `s = ρ²`.
fn amplitude_terms(c: &RomCoefficients, eps: f64, omega: f64) -> (f64, f64, f64, f64, f64) {
    (c.lambda.re, c.gamma.re, c.gamma.im, c.lambda.im - omega, (eps * c.f_tilde.norm()).powi(2))
}

fn frc_rel(c: &RomCoefficients, eps: f64, rho: f64, omega: f64) -> f64 {
    let (a, b, g, d, e2) = amplitude_terms(c, eps, omega);
    let s = rho * rho;
    (s * ((a + b * s).powi(2) + (d + g * s).powi(2)) - e2).abs() / e2
}

fn fold_rel(c: &RomCoefficients, eps: f64, rho: f64, omega: f64) -> f64 {
    let (a, b, g, d, _) = amplitude_terms(c, eps, omega);
    let s = rho * rho;
    let (p, q) = (a + b * s, d + g * s);
    let terms = [p * p, q * q, 2.0 * s * b * p, 2.0 * s * g * q];
    terms.iter().sum::<f64>().abs() / terms.iter().map(|t| t.abs()).sum::<f64>()
}

// 4. FRC roots, peaks and saddle-nodes satisfy their defining equations.
fn frc_consistency() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut worst_root, mut worst_peak, mut worst_sn, mut worst_max) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut n_sn = 0;
    for _ in 0..50 {
        let w = rng.random_range(0.5..2.0);
        let r = w * rng.random_range(1e-3..5e-2);
        let c = RomCoefficients {
            lambda: Complex64::new(-r, w),
            gamma: Complex64::new(-rng.random_range(0.0..0.5), rng.random_range(-1.0..1.0)),
            f_tilde: Complex64::from_polar(rng.random_range(0.1..1.0), rng.random_range(-PI..PI)),
        };
        // ε spans linear to strongly folded responses
        let eps = r / c.f_tilde.norm() * (r / c.gamma.im.abs()).sqrt() * rng.random_range(0.1..5.0);
        let (rho_pk, om_pk) = frc::peak(&c, eps).unwrap();
        let (a, b, _, _, e2) = amplitude_terms(&c, eps, om_pk);
        worst_peak = worst_peak.max((rho_pk.powi(2) * (a + b * rho_pk * rho_pk).powi(2) - e2).abs() / e2);
        worst_peak = worst_peak.max((om_pk - c.lambda.im - c.gamma.im * rho_pk * rho_pk).abs() / om_pk);
        let half = 4.0 * r + 2.0 * c.gamma.im.abs() * rho_pk * rho_pk;
        let mut grid: Vec<f64> = (0..=600).map(|i| om_pk - half + 2.0 * half * i as f64 / 600.0).collect();
        grid.push(om_pk);
        let mut sweep_max = 0.0f64;
        for s in frc::frc_sweep(&c, eps, &grid) {
            worst_root = worst_root.max(frc_rel(&c, eps, s.rho, s.omega));
            sweep_max = sweep_max.max(s.rho);
        }
        worst_max = worst_max.max((sweep_max - rho_pk).abs() / rho_pk);
        for p in frc::sn_points(&c, eps) {
            n_sn += 1;
            worst_sn = worst_sn.max(frc_rel(&c, eps, p.rho, p.omega)).max(fold_rel(&c, eps, p.rho, p.omega));
        }
    }
    let pass = worst_root <= 1e-8 && worst_peak <= 1e-8 && worst_sn <= 1e-8 && worst_max <= 1e-8 && n_sn > 0;
    outcome(
        pass,
        format!("residuals: roots {worst_root:.1e}, peaks {worst_peak:.1e}, {n_sn} SN points {worst_sn:.1e}; peak vs sweep max {worst_max:.1e} (tol 1e-8)"),
    )
}

// 5. Full-order time integration against the SSM reconstruction.
fn rom_vs_full() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut worst, mut worst_single) = (0.0f64, 0.0f64);
    let mut unconverged = 0;
    for k in 0..10 {
        let n = 2 + k % 5;
        let model = oracle::random_system(&mut rng, n, 0.02, 1.0).unwrap();
        let modal = ModalData::compute(&model, n.min(2), None).unwrap();
        let rom = build_rom(&model, &modal, W11Convention::Double).unwrap();
        // the other W11 convention read as the physical coefficient
        let mut single = rom.clone();
        single.w11.iter_mut().for_each(|v| *v *= 0.5);
        single.f21 = f21_vector(&model, &single.phi, &single.w20, &single.x11()).unwrap();
        single.gamma = gamma(&single.psi, &single.f21);
        let c = rom.coefficients();
        let mut eps = 0.1 * c.lambda.re.abs() / c.f_tilde.norm();
        let (mut rho, mut big_omega) = frc::peak(&c, eps).unwrap();
        while rho > 0.1 {
            eps *= 0.95 * 0.1 / rho;
            (rho, big_omega) = frc::peak(&c, eps).unwrap();
        }
        let full = oracle::integrate_full(&model, eps, big_omega, &NewmarkSettings::default()).unwrap();
        if !full.converged {
            unconverged += 1;
        }
        let x0 = nonautonomous_x0(&model, big_omega, &model.f_ext, &rom.phi).unwrap();
        let err = |r: &frc_topopt::ssm::Rom| {
            frc::frc_at(&r.coefficients(), eps, big_omega)
                .iter()
                .filter(|s| s.stable)
                .map(|s| {
                    let rec = reconstruct(r, Some(&x0), eps, s.rho, s.theta, &[0])[0];
                    (full.amplitude[0] - rec).abs() / full.amplitude[0]
                })
                .fold(f64::INFINITY, f64::min)
        };
        worst = worst.max(err(&rom));
        worst_single = worst_single.max(err(&single));
    }
    outcome(
        worst <= 0.02 && unconverged == 0,
        format!("max rel. amplitude error {worst:.2e} (tol 2e-2); half-size W11 would give {worst_single:.2e}; {unconverged} unconverged"),
    )
}

// 6. Adjoint gradients against central differences on a 40×8 mesh.
fn adjoint_gradients() -> Outcome {
    let cfg = Config::load(&configs().join("desk.toml")).unwrap();
    let setup = cfg.setup().unwrap();
    let ev = setup.evaluator;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mu: Vec<f64> = setup.mu0.iter().map(|m| (m + rng.random_range(-0.2..0.2)).clamp(0.05, 1.0)).collect();
    let want = Wanted { rho_max: true, cusp: true, linear: true, gradients: false };
    // raise ε until the FRC folds, then go well past the cusp where b is smooth
    let mut eps = ev.spec.eps;
    for _ in 0..30 {
        if ev.quantities(&mu, eps, want).unwrap().0.b.is_some_and(|b| b != 0.0) {
            break;
        }
        eps *= 1.5;
    }
    eps *= 3.0;
    let design: Vec<usize> = (0..mu.len()).filter(|&e| !ev.pipeline.non_design[e]).collect();
    let elements: Vec<usize> = rand::seq::index::sample(&mut rng, design.len(), 10).into_iter().map(|i| design[i]).collect();
    let rows = check_gradients(&ev, &mu, eps, &elements, DEFAULT_STEP).unwrap();
    let worst = |b: bool| rows.iter().filter(|r| (r.quantity == "b") == b).map(|r| r.rel_err).fold(0.0f64, f64::max);
    let has_b = rows.iter().any(|r| r.quantity == "b");
    let mut names: Vec<&str> = rows.iter().map(|r| r.quantity.as_str()).collect();
    names.dedup();
    let (w, wb) = (worst(false), worst(true));
    outcome(
        w <= 1e-5 && wb <= 1e-4 && has_b,
        format!("{} quantities x 10 elements: max rel. err {w:.1e} (tol 1e-5), b {wb:.1e} (tol 1e-4)", rows.len() / 10),
    )
}

// 7. Cusp degeneracy on the Duffing family.
fn cusp_degeneracy() -> Outcome {
    let mut worst_b = 0.0f64;
    let mut worst_loc = 0.0f64;
    for (xi, kappa) in [(0.001, 1.0), (0.005, 0.5), (0.02, 2.0), (0.01, -1.0)] {
        let model = oracle::duffing(1.0, xi, kappa, 1.0).unwrap();
        let modal = ModalData::compute(&model, 1, None).unwrap();
        let c = build_rom(&model, &modal, W11Convention::Double).unwrap().coefficients();
        let guess = oracle::duffing_cusp(&c);
        let (_, hi) = oracle::locate_cusp(&c, 0.3 * guess, 3.0 * guess, 1e-13).unwrap();
        worst_loc = worst_loc.max((hi - guess).abs() / guess);
        let b = match frc::controlling_cusp(&c, hi).unwrap() {
            Some((_, d)) => d.b.abs(),
            None => f64::INFINITY,
        };
        worst_b = worst_b.max(b);
    }
    outcome(worst_b <= 1e-4, format!("|b| at coalescence ≤ {worst_b:.1e} (tol 1e-4); cusp ε within {worst_loc:.1e} of closed form"))
}

/// Scaled example geometry on 50×10 elements.
fn scaled(spec: ProblemSpec, size: f64, mass: (f64, f64), load_x: f64, force: f64, radius: f64) -> (Evaluator, Vec<f64>) {
    let mut ms = MeshSpec::beam(50, 10, size);
    ms.non_design.push(Rect { x0: mass.0, y0: 0.0, x1: mass.1, y1: 10.0 * size });
    let mesh = Mesh::build(&ms).unwrap();
    let node = mesh.node_at(load_x, 5.0 * size);
    let problem = FeProblem::new(mesh, Material::silicon(), &[PointLoad { node, fx: 0.0, fy: force }], &[(node, 1)]).unwrap();
    let pipeline = DensityPipeline::new(&problem.mesh, PipelineParams { radius, ..Default::default() }).unwrap();
    let mu0 = vec![spec.initial_density(); problem.mesh.n_elements()];
    let damping = initial_damping(&problem, &pipeline, &mu0, 0.001).unwrap();
    (Evaluator::new(problem, pipeline, damping, spec).unwrap(), mu0)
}

// 8. Hardening and softening designs.
fn hardening_softening() -> Outcome {
    let mut parts = Vec::new();
    let mut pass = true;
    for gt in [1e-3, -1e-3] {
        let mut rho = [0.0; 2];
        for (i, kind) in [ProblemKind::PeakMin, ProblemKind::BackboneOnly].into_iter().enumerate() {
            let mut s = ProblemSpec::new(kind, 0.01);
            s.gamma_target = Some(gt);
            s.omega_y_target = Some(khz(600.0));
            s.area_max = Some(0.5);
            let (mut ev, mu0) = scaled(s, 10.0, (400.0, 500.0), 500.0, 5e9, 1.5);
            let opts = RunOptions { max_iters: 400, ..Default::default() };
            let r = run(&mut ev, &mu0, &Schedule::continuation(10.0, 10.0, 40), &opts, &mut |_, _| {}).unwrap();
            let q = &r.final_quantities;
            let ok = r.converged && q.gamma.im.signum() == gt.signum();
            pass &= ok;
            rho[i] = q.rho_max.unwrap_or(f64::NAN);
            parts.push(format!("{kind:?}({gt:+.0e}) conv {} it {} Im γ {:+.2e} ρ {:.2}", r.converged, r.iterations, q.gamma.im, rho[i]));
        }
        pass &= rho[0] <= rho[1];
    }
    outcome(pass, parts.join("; "))
}

// 9. Saddle-node distance control.
fn sn_distance() -> Outcome {
    let mut rows = Vec::new();
    for bt in [2.0, 1.0, 0.1] {
        let mut s = ProblemSpec::new(ProblemKind::SnControl, 0.3);
        s.b_target = Some(bt);
        s.area_target = Some(0.4);
        s.omega_x_target = Some(khz(1500.0));
        s.omega_y_target = Some(khz(440.0));
        let (mut ev, mu0) = scaled(s, 12.0, (240.0, 360.0), 600.0, 2e8, 1.25);
        let opts = RunOptions { max_iters: 400, move_limit: 0.03, ..Default::default() };
        let r = run(&mut ev, &mu0, &Schedule::continuation(10.0, 10.0, 40), &opts, &mut |_, _| {}).unwrap();
        let q = &r.final_quantities;
        rows.push((bt, q.b.unwrap_or(0.0).abs(), q.sn_separation(), r.iterations, r.converged));
    }
    let dec_b = rows.windows(2).all(|w| w[1].1 < w[0].1);
    let dec_sep = rows.windows(2).all(|w| w[1].2 < w[0].2);
    let inc_it = rows.windows(2).all(|w| w[1].3 > w[0].3);
    let detail = rows
        .iter()
        .map(|(bt, b, sep, it, conv)| format!("b_t {bt}: |b| {b:.3} ΔΩ {sep:.3} it {it} conv {conv}"))
        .collect::<Vec<_>>()
        .join("; ");
    outcome(dec_b && dec_sep && inc_it, format!("{detail} | |b| decreasing {dec_b}, ΔΩ decreasing {dec_sep}, iterations increasing {inc_it}"))
}

// 10. Time per iteration on the 100×20 example (informational).
fn performance() -> Outcome {
    let cfg = Config::load(&configs().join("ex2_harden_peak.toml")).unwrap();
    let setup = cfg.setup().unwrap();
    let mut ev = setup.evaluator;
    let opts = RunOptions { max_iters: 3, ..setup.options };
    let r = run(&mut ev, &setup.mu0, &setup.schedule, &opts, &mut |_, _| {}).unwrap();
    let t = r.seconds_per_iteration;
    outcome(t <= 30.0, format!("{t:.2} s/iteration at 100x20 on {} thread(s) (target 30 s, not a gate)", rayon::current_num_threads()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome, bool); 10] = [
        ("DOF bookkeeping", dof_counts, true),
        ("rigid-body exactness", rigid_rotations, true),
        ("closed-form Duffing ROM", duffing_rom, true),
        ("FRC self-consistency", frc_consistency, true),
        ("ROM vs full oracle", rom_vs_full, true),
        ("adjoint correctness", adjoint_gradients, true),
        ("cusp degeneracy", cusp_degeneracy, true),
        ("hardening/softening control", hardening_softening, true),
        ("SN-distance control", sn_distance, true),
        ("performance note", performance, false),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = Vec::new();
    for (i, (name, f, hard)) in criteria.iter().enumerate() {
        let id = (i + 1).to_string();
        if !filter.is_empty() && !filter.contains(&id) {
            continue;
        }
        let t = Instant::now();
        let o = f();
        let verdict = match (o.pass, hard) {
            (true, _) => "PASS",
            (false, true) => "FAIL",
            (false, false) => "NOTE",
        };
        println!("criterion {:>2} {verdict} {name}: {} [{:.1} s]", i + 1, o.detail, t.elapsed().as_secs_f64());
        if !o.pass && *hard {
            failed.push(i + 1);
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
