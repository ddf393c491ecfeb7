use frc_topopt::density::{interpolate, project, DensityPipeline, PipelineParams};
use frc_topopt::fe::element::{internal_force, rigid_rotation};
use frc_topopt::fe::{element_operators, Material, Mesh, MeshSpec, Rect};
use frc_topopt::frc;
use frc_topopt::mma::{Mma, MmaSettings};
use frc_topopt::modal::{damping_ratio, rayleigh_constants};
use frc_topopt::optimize::cusp_measure;
use frc_topopt::ssm::RomCoefficients;
use num_complex::Complex64;
use proptest::prelude::*;

fn coeffs() -> impl Strategy<Value = (RomCoefficients, f64)> {
    (0.5f64..2.0, 1e-3f64..5e-2, -0.5f64..0.0, -1.0f64..1.0, 0.1f64..1.0, -3.0f64..3.0, 0.1f64..5.0).prop_map(
        |(w, zeta, gr, gi, fa, fp, level)| {
            let r = zeta * w;
            let c = RomCoefficients {
                lambda: Complex64::new(-r, w),
                gamma: Complex64::new(gr, gi),
                f_tilde: Complex64::from_polar(fa, fp),
            };
            let eps = r / fa * (r / gi.abs().max(1e-3)).sqrt() * level;
            (c, eps)
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mesh_counts_follow_the_grid(nx in 1usize..30, ny in 1usize..8) {
        let mesh = Mesh::build(&MeshSpec::beam(nx, ny, 5.0)).unwrap();
        prop_assert_eq!(mesh.nodes.len(), (nx + 1) * (ny + 1));
        prop_assert_eq!(mesh.n_elements(), nx * ny);
        // clamped left edge, x fixed on the right edge
        prop_assert_eq!(mesh.n_free, 2 * (nx + 1) * (ny + 1) - 2 * (ny + 1) - (ny + 1));
        for el in &mesh.elements {
            let [a, b, c, d] = el.map(|n| mesh.nodes[n]);
            let area2 = (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1])
                + (c[0] - a[0]) * (d[1] - a[1]) - (d[0] - a[0]) * (c[1] - a[1]);
            prop_assert!((area2 - 2.0 * 25.0).abs() < 1e-9);
        }
    }

    #[test]
    fn rigid_motion_produces_no_internal_force(angle in -0.6f64..0.6, tx in -3.0f64..3.0, ty in -3.0f64..3.0) {
        let ops = element_operators(&Material::silicon(), 5.0).unwrap();
        let mut u = rigid_rotation(5.0, angle);
        for k in 0..4 {
            u[2 * k] += tx;
            u[2 * k + 1] += ty;
        }
        let f = internal_force(&ops, &u);
        let scale: f64 = ops.ke.iter().map(|v| v.abs()).fold(0.0, f64::max) * u.iter().map(|v| v.abs()).fold(0.0, f64::max);
        prop_assert!(f.iter().all(|v| v.abs() <= 1e-9 * scale.max(1e-300)), "{:?}", f);
    }

    #[test]
    fn pipeline_stays_in_bounds_and_keeps_constants(level in 0.0f64..1.0, sigma in 1.0f64..64.0, penal in 1.0f64..3.0, radius in 1.0f64..4.0) {
        let mut spec = MeshSpec::beam(12, 4, 5.0);
        spec.non_design.push(Rect { x0: 50.0, y0: 0.0, x1: 60.0, y1: 20.0 });
        let mesh = Mesh::build(&spec).unwrap();
        let params = PipelineParams { radius, sigma, penal, ..Default::default() };
        let pipe = DensityPipeline::new(&mesh, params).unwrap();
        let field = pipe.forward(&vec![level; mesh.n_elements()]).unwrap();
        for e in 0..mesh.n_elements() {
            prop_assert!(field.mu_hat[e] >= params.mu_min - 1e-15 && field.mu_hat[e] <= 1.0 + 1e-15);
            if mesh.non_design[e] {
                prop_assert!((field.mu_hat[e] - 1.0).abs() < 1e-12);
            }
        }
        // elements whose filter support holds only design elements see the constant
        let expect = interpolate(project(level, sigma, 0.5), penal, params.mu_min);
        prop_assert!((field.mu_hat[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn projection_is_monotone_with_fixed_ends(a in 0.0f64..1.0, b in 0.0f64..1.0, sigma in 0.5f64..100.0, eta in 0.1f64..0.9) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assert!(project(lo, sigma, eta) <= project(hi, sigma, eta) + 1e-15);
        prop_assert!(project(0.0, sigma, eta).abs() < 1e-14);
        prop_assert!((project(1.0, sigma, eta) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn rayleigh_damping_hits_both_anchor_frequencies(w1 in 1.0f64..1e4, ratio in 1.01f64..10.0, xi in 0.0f64..0.2) {
        let w2 = w1 * ratio;
        let r = rayleigh_constants(w1, w2, xi).unwrap();
        prop_assert!((damping_ratio(w1, &r) - xi).abs() <= 1e-12 * xi.max(1e-12));
        prop_assert!((damping_ratio(w2, &r) - xi).abs() <= 1e-12 * xi.max(1e-12));
        // between the anchors the ratio dips below ξ
        prop_assert!(damping_ratio((w1 * w2).sqrt(), &r) <= xi + 1e-15);
    }

    #[test]
    fn frc_roots_solve_the_amplitude_equation((c, eps) in coeffs(), shift in -3.0f64..3.0) {
        let omega = c.lambda.im + shift * c.lambda.re.abs() * 4.0;
        let e2 = (eps * c.f_tilde.norm()).powi(2);
        for s in frc::frc_at(&c, eps, omega) {
            let q = s.rho * s.rho;
            let g = q * ((c.lambda.re + c.gamma.re * q).powi(2) + (c.lambda.im - omega + c.gamma.im * q).powi(2));
            prop_assert!((g - e2).abs() <= 1e-8 * e2);
            // the phase reproduces the forcing term of the fixed point
            let lhs = Complex64::new(c.lambda.re + c.gamma.re * q, c.lambda.im - omega + c.gamma.im * q) * s.rho;
            let rhs = -eps * c.f_tilde * Complex64::from_polar(1.0, -s.theta);
            prop_assert!((lhs - rhs).norm() <= 1e-6 * rhs.norm());
        }
    }

    #[test]
    fn peak_bounds_every_frc_root((c, eps) in coeffs(), shift in -3.0f64..3.0) {
        let (rho_max, _) = frc::peak(&c, eps).unwrap();
        let omega = c.lambda.im + shift * c.lambda.re.abs() * 4.0;
        for s in frc::frc_at(&c, eps, omega) {
            prop_assert!(s.rho <= rho_max * (1.0 + 1e-9));
        }
    }

    #[test]
    fn saddle_nodes_are_folds_of_the_frc((c, eps) in coeffs()) {
        let pts = frc::sn_points(&c, eps);
        prop_assert!(pts.len() % 2 == 0, "{:?}", pts);
        for p in &pts {
            // the root count changes across a fold
            let (r1, r2) = (frc::frc_at(&c, eps, p.omega).len(), frc::frc_at(&c, eps, p.omega * (1.0 + 1e-7)).len());
            let r0 = frc::frc_at(&c, eps, p.omega * (1.0 - 1e-7)).len();
            prop_assert!(r1 >= 1 && r0 != r2, "{} {} {}", r0, r1, r2);
        }
    }

    #[test]
    fn cusp_measure_is_c1_and_sign_exact(r in -20.0f64..20.0) {
        let (g, dg) = cusp_measure(r);
        prop_assert_eq!(g <= 0.0, r.abs() <= 1.0);
        let h = 1e-6;
        let fd = (cusp_measure(r + h).0 - cusp_measure(r - h).0) / (2.0 * h);
        prop_assert!((fd - dg).abs() <= 1e-5 * (1.0 + dg.abs()));
    }

    #[test]
    fn mma_step_respects_bounds_and_move_limit(x0 in proptest::collection::vec(0.05f64..0.95, 6), g in proptest::collection::vec(-1.0f64..1.0, 6)) {
        let n = x0.len();
        let settings = MmaSettings::default();
        let mut mma = Mma::new(vec![0.0; n], vec![1.0; n], 1, settings).unwrap();
        let cons = x0.iter().sum::<f64>() / n as f64 - 0.5;
        let step = mma.update(&x0, 0.0, &g, &[cons], &[vec![1.0 / n as f64; n]]).unwrap();
        for (x, x_old) in step.x.iter().zip(&x0) {
            prop_assert!(*x >= 0.0 && *x <= 1.0);
            prop_assert!((x - x_old).abs() <= settings.move_limit + 1e-12);
        }
        prop_assert!(step.lambda.iter().all(|l| *l >= 0.0));
    }
}
