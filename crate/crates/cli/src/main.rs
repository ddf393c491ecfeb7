use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use frc_topopt::check::{check_gradients, DEFAULT_STEP};
use frc_topopt::config::Config;
use frc_topopt::frc;
use frc_topopt::io;
use frc_topopt::mma::MmaSettings;
use frc_topopt::optimize::{run, Evaluator, IterationRecord, Quantities, RunResult};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::cell::RefCell;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "frc-topopt", version, about = "Topology optimization of nonlinear forced response curves")]
struct Cli {
    /// Worker threads (1 gives bit-reproducible runs).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Seed for randomized choices (gradient-check sampling).
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = "run")]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Run the optimization and write the run directory.
    Optimize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        max_iters: Option<usize>,
        /// Continue from the checkpoint in the run directory.
        #[arg(long)]
        resume: bool,
    },
    /// FRCs, peaks and saddle-nodes of a layout.
    AnalyzeFrc {
        #[command(flatten)]
        common: Common,
        /// Layout CSV or PGM.
        #[arg(long)]
        density: PathBuf,
        /// Force scales; defaults to `outputs.frc_eps` of the config.
        #[arg(long, value_delimiter = ',')]
        eps: Vec<f64>,
    },
    /// Compare adjoint gradients with finite differences.
    CheckGradients {
        #[command(flatten)]
        common: Common,
        /// Layout to check at; default is a seeded perturbation of the start design.
        #[arg(long)]
        density: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        elements: usize,
        #[arg(long, default_value_t = DEFAULT_STEP)]
        step: f64,
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
        /// Tolerance for the cusp coefficient `b`.
        #[arg(long, default_value_t = 1e-4)]
        tol_b: f64,
    },
    /// Saddle-node points over the configured ε range.
    SweepSn {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        density: PathBuf,
    },
    /// Density fields of a layout as CSV and PGM.
    ExportLayout {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        density: PathBuf,
    },
}

#[derive(Serialize)]
struct RunHeader<'a> {
    version: &'static str,
    command: &'a str,
    seed: u64,
    threads: usize,
    units: frc_topopt::config::ResolvedUnits,
    problem: &'a frc_topopt::optimize::ProblemSpec,
    pipeline: frc_topopt::density::PipelineParams,
    schedule: &'a frc_topopt::optimize::Schedule,
    options: &'a frc_topopt::optimize::RunOptions,
    mma: MmaSettings,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    iteration: usize,
    stage: usize,
    mu: Vec<f64>,
}

#[derive(Serialize)]
struct Summary {
    converged: bool,
    error: Option<String>,
    iterations: usize,
    final_objective: Option<f64>,
    final_constraints: Vec<(String, f64)>,
    final_quantities: Option<Quantities>,
    sn_separation: Option<f64>,
    seconds_per_iteration: Option<f64>,
    total_seconds: f64,
}

#[derive(Serialize)]
struct FrcSummary {
    eps: f64,
    rho_max: f64,
    omega_peak: f64,
    saddle_nodes: Vec<(f64, f64)>,
    b: Option<f64>,
    samples: usize,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring the thread pool")?;
    }
    match cli.command {
        Command::Optimize { common, max_iters, resume } => optimize(&common, max_iters, resume, cli.seed),
        Command::AnalyzeFrc { common, density, eps } => {
            let (cfg, ev, mu) = load_layout(&common, &density)?;
            let eps = if eps.is_empty() { cfg.frc_eps() } else { eps };
            analyze_frc(&cfg, &ev, &mu, &eps, &common.out_dir)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::CheckGradients { common, density, elements, step, tol, tol_b } => {
            check(&common, density.as_deref(), elements, step, tol, tol_b, cli.seed)
        }
        Command::SweepSn { common, density } => {
            let (cfg, ev, mu) = load_layout(&common, &density)?;
            sweep_sn(&cfg, &ev, &mu, &common.out_dir)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::ExportLayout { common, density } => {
            let (_, ev, mu) = load_layout(&common, &density)?;
            export_layout(&ev, &mu, &common.out_dir, "layout")?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn load_config(path: &Path) -> Result<Config> {
    Ok(Config::load(path)?)
}

fn prepare_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Evaluator at the final continuation stage together with a layout file.
fn load_layout(common: &Common, density: &Path) -> Result<(Config, Evaluator, Vec<f64>)> {
    let cfg = load_config(&common.config)?;
    let mut setup = cfg.setup()?;
    let last = *setup.schedule.stages.last().expect("validated schedule");
    setup.evaluator.pipeline.set_params(cfg.pipeline_params(&last))?;
    let mu = io::read_density(density, &setup.evaluator.problem.mesh)?;
    prepare_dir(&common.out_dir)?;
    Ok((cfg, setup.evaluator, mu))
}

fn export_layout(ev: &Evaluator, mu: &[f64], dir: &Path, stem: &str) -> Result<()> {
    let field = ev.pipeline.forward(mu)?;
    let mesh = &ev.problem.mesh;
    io::write_layout_csv(&dir.join(format!("{stem}.csv")), mesh, &field)?;
    io::write_pgm(&dir.join(format!("{stem}.pgm")), mesh, &field.mu)?;
    io::write_pgm(&dir.join(format!("{stem}_physical.pgm")), mesh, &field.mu_bar)?;
    Ok(())
}

fn frequency_grid(c: &frc_topopt::ssm::RomCoefficients, eps: &[f64], span: f64, points: usize) -> Result<Vec<f64>> {
    let w0 = c.lambda.im;
    let (mut lo, mut hi) = (w0 * (1.0 - span), w0 * (1.0 + span));
    for &e in eps {
        let (_, w) = frc::peak(c, e)?;
        lo = lo.min(w - span * w0);
        hi = hi.max(w + span * w0);
    }
    let n = points.max(2);
    Ok((0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect())
}

fn analyze_frc(cfg: &Config, ev: &Evaluator, mu: &[f64], eps: &[f64], dir: &Path) -> Result<()> {
    let an = ev.analyze(mu)?;
    let c = an.rom.coefficients();
    let grid = frequency_grid(&c, eps, cfg.outputs.frc_span, cfg.outputs.frc_points)?;
    let mut curves = Vec::new();
    let mut summary = Vec::new();
    for &e in eps {
        let mut samples = frc::frc_sweep(&c, e, &grid);
        frc::attach_physical(&mut samples, &an.model, &an.rom, e, &an.model.outputs)?;
        let (rho_max, omega_peak) = frc::peak(&c, e)?;
        let sn = frc::sn_points(&c, e);
        let b = frc::controlling_cusp(&c, e)?.map(|(_, d)| d.b);
        summary.push(FrcSummary {
            eps: e,
            rho_max,
            omega_peak,
            saddle_nodes: sn.iter().map(|p| (p.rho, p.omega)).collect(),
            b,
            samples: samples.len(),
        });
        log::info!("ε = {e}: ρ_max = {rho_max:.6e} at Ω = {omega_peak:.6} rad/ms, {} saddle-nodes", sn.len());
        curves.push((e, samples));
    }
    io::write_frc_csv(&dir.join("frc.csv"), &curves, an.model.outputs.len())?;
    io::write_json(&dir.join("frc_summary.json"), &summary)?;
    Ok(())
}

fn sweep_sn(cfg: &Config, ev: &Evaluator, mu: &[f64], dir: &Path) -> Result<()> {
    let an = ev.analyze(mu)?;
    let c = an.rom.coefficients();
    let [a, b] = cfg.outputs.sn_range;
    let n = cfg.outputs.sn_points.max(2);
    let e0 = cfg.forcing.eps;
    let grid: Vec<f64> = (0..n).map(|i| e0 * (a + (b - a) * i as f64 / (n - 1) as f64)).collect();
    let samples = frc::sn_sweep(&c, &grid);
    io::write_sn_csv(&dir.join("sn_curve.csv"), &samples)?;
    log::info!("{} saddle-node samples over ε ∈ [{}, {}]", samples.len(), grid[0], grid[n - 1]);
    Ok(())
}

fn optimize(common: &Common, max_iters: Option<usize>, resume: bool, seed: u64) -> Result<ExitCode> {
    let cfg = load_config(&common.config)?;
    let mut setup = cfg.setup()?;
    if let Some(m) = max_iters {
        setup.options.max_iters = m;
    }
    let dir = &common.out_dir;
    prepare_dir(dir)?;
    let checkpoint_path = dir.join("checkpoint.json");
    let mut mu0 = setup.mu0.clone();
    if resume {
        let text = std::fs::read_to_string(&checkpoint_path)
            .with_context(|| format!("--resume needs {}", checkpoint_path.display()))?;
        let cp: Checkpoint = serde_json::from_str(&text).context("reading the checkpoint")?;
        if cp.mu.len() != mu0.len() {
            bail!("checkpoint holds {} densities, the mesh has {} elements", cp.mu.len(), mu0.len());
        }
        log::info!("resuming at iteration {} (stage {})", cp.iteration, cp.stage);
        mu0 = cp.mu;
        setup.options.start_iter = cp.iteration;
        setup.options.start_stage = cp.stage;
    } else {
        std::fs::copy(&common.config, dir.join("config.toml")).context("copying the config")?;
        let header = RunHeader {
            version: env!("CARGO_PKG_VERSION"),
            command: "optimize",
            seed,
            threads: rayon::current_num_threads(),
            units: cfg.resolved_units(&setup),
            problem: &setup.evaluator.spec,
            pipeline: cfg.pipeline_params(&setup.schedule.stages[0]),
            schedule: &setup.schedule,
            options: &setup.options,
            mma: MmaSettings { move_limit: setup.options.move_limit, ..Default::default() },
        };
        io::write_json(&dir.join("run.json"), &header)?;
    }
    let log = RefCell::new(io::JsonLines::create(&dir.join("iterations.jsonl"), resume)?);
    let io_error: RefCell<Option<anyhow::Error>> = RefCell::new(None);
    let every = cfg.outputs.layout_every;
    let start_iter = setup.options.start_iter;
    let start = std::time::Instant::now();
    let mut ev = setup.evaluator;
    let mesh = ev.problem.mesh.clone();
    let outcome = {
        let mut observer = |rec: &IterationRecord, mu: &[f64]| {
            // the resumed start point is already in the log
            if resume && rec.iteration == start_iter && rec.max_change.is_nan() {
                return;
            }
            let write = || -> Result<()> {
                log.borrow_mut().write(rec)?;
                if !rec.rolled_back {
                    let cp = Checkpoint { iteration: rec.iteration, stage: rec.stage, mu: mu.to_vec() };
                    let tmp = dir.join("checkpoint.json.tmp");
                    std::fs::write(&tmp, serde_json::to_vec(&cp)?)?;
                    std::fs::rename(&tmp, &checkpoint_path)?;
                }
                Ok(())
            };
            if let Err(e) = write() {
                io_error.borrow_mut().get_or_insert(e);
            }
            log::info!(
                "it {:4} stage {} f = {:.6e} max|Δμ| = {:.3} ω1 = {:.2} kHz Im γ = {:.3e}",
                rec.iteration,
                rec.stage,
                rec.objective,
                rec.max_change,
                rec.omega1 / (2.0 * std::f64::consts::PI),
                rec.im_gamma
            );
            if every > 0 && rec.iteration % every == 0 && !rec.rolled_back {
                let snap = dir.join(format!("layout_{:05}.pgm", rec.iteration));
                if let Err(e) = io::write_pgm(&snap, &mesh, mu) {
                    io_error.borrow_mut().get_or_insert(e.into());
                }
            }
        };
        run(&mut ev, &mu0, &setup.schedule, &setup.options, &mut observer)
    };
    if let Some(e) = io_error.into_inner() {
        return Err(e.context("writing run outputs"));
    }
    finish(&cfg, &ev, dir, outcome, start.elapsed().as_secs_f64(), &checkpoint_path)
}

fn finish(
    cfg: &Config,
    ev: &Evaluator,
    dir: &Path,
    outcome: frc_topopt::Result<RunResult>,
    total: f64,
    checkpoint: &Path,
) -> Result<ExitCode> {
    let (result, error) = match outcome {
        Ok(r) => (Some(r), None),
        Err(e) => {
            log::error!("optimization stopped: {e}");
            (None, Some(e.to_string()))
        }
    };
    // the last accepted design survives an aborted run through the checkpoint
    let mu = match &result {
        Some(r) => r.mu.clone(),
        None => {
            let cp: Checkpoint = serde_json::from_str(&std::fs::read_to_string(checkpoint)?)?;
            cp.mu
        }
    };
    export_layout(ev, &mu, dir, "layout")?;
    let mut post_error = None;
    if let Err(e) = analyze_frc(cfg, ev, &mu, &cfg.frc_eps(), dir).and_then(|_| sweep_sn(cfg, ev, &mu, dir)) {
        log::warn!("post-processing failed: {e:#}");
        post_error = Some(format!("{e:#}"));
    }
    let summary = Summary {
        converged: result.as_ref().is_some_and(|r| r.converged),
        error: error.or(post_error),
        iterations: result.as_ref().map_or(0, |r| r.iterations),
        final_objective: result.as_ref().map(|r| r.final_objective),
        final_constraints: result.as_ref().map_or_else(Vec::new, |r| r.final_constraints.clone()),
        final_quantities: result.as_ref().map(|r| r.final_quantities.clone()),
        sn_separation: result.as_ref().map(|r| r.final_quantities.sn_separation()),
        seconds_per_iteration: result.as_ref().map(|r| r.seconds_per_iteration),
        total_seconds: total,
    };
    io::write_json(&dir.join("summary.json"), &summary)?;
    match &result {
        Some(r) => {
            log::info!(
                "{} after {} iterations, objective {:.6e}, {:.3} s/iteration",
                if r.converged { "converged" } else { "not converged" },
                r.iterations,
                r.final_objective,
                r.seconds_per_iteration
            );
            Ok(if r.converged { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
        None => Ok(ExitCode::from(1)),
    }
}

fn check(common: &Common, density: Option<&Path>, count: usize, step: f64, tol: f64, tol_b: f64, seed: u64) -> Result<ExitCode> {
    let cfg = load_config(&common.config)?;
    let setup = cfg.setup()?;
    let ev = setup.evaluator;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mu = match density {
        Some(p) => io::read_density(p, &ev.problem.mesh)?,
        None => setup.mu0.iter().map(|&m| (m + rng.random_range(-0.2..0.2)).clamp(0.05, 0.95)).collect(),
    };
    let design: Vec<usize> = (0..mu.len()).filter(|&e| !ev.pipeline.non_design[e]).collect();
    let picks = sample(&mut rng, design.len(), count.min(design.len()));
    let mut elements: Vec<usize> = picks.iter().map(|i| design[i]).collect();
    elements.sort_unstable();
    prepare_dir(&common.out_dir)?;
    let rows = check_gradients(&ev, &mu, ev.spec.eps, &elements, step)?;
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| vec![r.quantity.clone(), r.element.to_string(), r.analytic.to_string(), r.fd.to_string(), r.rel_err.to_string()])
        .collect();
    io::write_table(&common.out_dir.join("gradients.csv"), &["quantity", "element", "analytic", "fd", "rel_err"], &table)?;
    let mut worst: Vec<(String, f64)> = Vec::new();
    for r in &rows {
        match worst.iter_mut().find(|(q, _)| *q == r.quantity) {
            Some((_, w)) => *w = w.max(r.rel_err),
            None => worst.push((r.quantity.clone(), r.rel_err)),
        }
    }
    let mut ok = true;
    for (q, w) in &worst {
        let limit = if q == "b" { tol_b } else { tol };
        let pass = *w <= limit;
        ok &= pass;
        println!("{q:>14}  max rel. error {w:.3e}  {}", if pass { "ok" } else { "FAIL" });
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(1) })
}
