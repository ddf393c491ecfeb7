use frc_topopt::config::Config;
use frc_topopt::optimize::ProblemKind;
use std::f64::consts::PI;
use std::path::PathBuf;

fn configs() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn load(name: &str) -> Config {
    Config::load(&configs().join(name)).unwrap()
}

#[test]
fn every_shipped_config_validates() {
    let mut n = 0;
    for entry in std::fs::read_dir(configs()).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().and_then(|e| e.to_str()) != Some("toml") {
            continue;
        }
        let cfg = Config::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        cfg.problem_spec().unwrap();
        cfg.schedule().unwrap();
        cfg.run_options().unwrap();
        cfg.fe_problem().unwrap();
        n += 1;
    }
    assert!(n >= 10);
}

#[test]
fn example_targets_are_converted_to_rad_per_ms() {
    let s = load("ex1_peak.toml").problem_spec().unwrap();
    assert_eq!(s.kind, ProblemKind::PeakMin);
    assert!((s.omega_y_target.unwrap() - 2.0 * PI * 300.0).abs() < 1e-9);
    assert!((s.omega_x_target.unwrap() - 2.0 * PI * 1200.0).abs() < 1e-9);
    assert_eq!(s.gamma_target, Some(5e-5));
    assert_eq!(s.area_max, Some(0.5));

    let soft = load("ex2_soften_backbone.toml").problem_spec().unwrap();
    assert_eq!(soft.kind, ProblemKind::BackboneOnly);
    assert_eq!(soft.gamma_target, Some(-1e-3));
    assert!(soft.omega_x_target.is_none());

    for (file, bt) in [("ex3_b2.toml", 2.0), ("ex3_b1.toml", 1.0), ("ex3_b0.1.toml", 0.1)] {
        let s = load(file).problem_spec().unwrap();
        assert_eq!(s.kind, ProblemKind::SnControl);
        assert_eq!(s.b_target, Some(bt));
        assert_eq!(s.area_target, Some(0.4));
        assert!((s.omega_x_target.unwrap() - 2.0 * PI * 1500.0).abs() < 1e-9);
    }
}

#[test]
fn example_loads_sit_on_the_quoted_nodes() {
    let p = load("ex1_peak.toml").fe_problem().unwrap();
    let node = p.mesh.node_at(800.0, 50.0);
    assert_eq!(p.mesh.nodes[node], [800.0, 50.0]);
    let dof = p.mesh.free_dof(node, 1).unwrap();
    assert!((p.f_ext[dof] - 5e9).abs() < 1e-3);
    assert!(p.outputs.contains(&dof));
    assert!((p.f_ext.iter().map(|f| f.abs()).sum::<f64>() - 5e9).abs() < 1e-3);
}

// quoted Rayleigh constants of the initial layouts (α in 1/ms, β in ms)
#[test]
fn initial_rayleigh_constants_match_quoted_values() {
    for (file, alpha, beta) in [("ex1_peak.toml", 2.99, 1.72e-7), ("ex2_harden_peak.toml", 6.90, 7.41e-8)] {
        let cfg = load(file);
        let setup = cfg.setup().unwrap();
        let d = setup.evaluator.damping;
        assert!((d.alpha - alpha).abs() <= 0.06 * alpha, "{file}: α {} vs {alpha}", d.alpha);
        assert!((d.beta - beta).abs() <= 0.02 * beta, "{file}: β {} vs {beta}", d.beta);
    }
}
