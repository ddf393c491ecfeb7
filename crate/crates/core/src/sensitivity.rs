//! Derivatives of modal, reduced-order and FRC quantities with respect to the
//! physical element densities `μ̂_e`, computed by adjoints.
//!
//! Every model operator is linear in `μ̂_e`, so `∂/∂μ̂_e` of `M`, `K`, `F2`,
//! `F3` is simply the unit element operator.

use crate::density::{DensityPipeline, DesignField};
use crate::error::{Error, Result};
use crate::fe::model::{local_f2, local_f3, local_form};
use crate::fe::AssembledModel;
use crate::frc::{CuspData, Mat2, SnPoint};
use crate::linalg::{dot, dot_real, norm2, to_complex, BandLu};
use crate::modal::{damping_ratio_slope, lambda_derivative, ModalData};
use crate::ssm::{solve_refined, Rom, RomCoefficients};
use nalgebra::{Matrix3, Vector3};
use num_complex::Complex64;

type C64 = Complex64;

/// Relative shift used to factor the singular eigen-operator `K − ω²M`.
const EIGEN_SHIFT: f64 = 1e-8;

/// `dω/dμ̂_e = φᵀ(K_e − ω²M_e)φ / (2ω)` for an M-normalized mode.
pub fn d_omega(model: &AssembledModel, phi: &[f64], omega: f64) -> Vec<f64> {
    let w2 = omega * omega;
    model.per_component(|c| {
        let p = c.gather(phi);
        (local_form(&c.ops.ke, &p, &p) - w2 * local_form(&c.ops.me, &p, &p)) / (2.0 * omega)
    })
}

pub fn d_lambda(modal: &ModalData, d_omega: &[f64]) -> Result<Vec<C64>> {
    let w = modal.omega_master();
    d_omega.iter().map(|&dw| lambda_derivative(w, dw, &modal.damping)).collect()
}

/// Solver for `(K − ω²M) x = r` restricted to the M-orthogonal complement of
/// the master mode.
pub struct EigenAdjoint<'a> {
    model: &'a AssembledModel,
    omega: f64,
    phi: &'a [f64],
    mphi: Vec<f64>,
    lu: BandLu<f64>,
}

impl<'a> EigenAdjoint<'a> {
    pub fn new(model: &'a AssembledModel, omega: f64, phi: &'a [f64]) -> Result<Self> {
        let shift = omega * omega * (1.0 + EIGEN_SHIFT);
        let lu = model
            .pencil(-shift, 0.0, 1.0)
            .lu("eigen adjoint operator")
            .map_err(|_| Error::Singular { context: "eigen adjoint (repeated eigenvalue?)".into(), pivot: 0 })?;
        Ok(EigenAdjoint { model, omega, phi, mphi: model.m.matvec(phi), lu })
    }

    fn project_rhs(&self, r: &mut [f64]) {
        let c = dot(self.phi, r);
        r.iter_mut().zip(&self.mphi).for_each(|(v, m)| *v -= c * m);
    }

    fn project_sol(&self, x: &mut [f64]) {
        let c = dot(&self.mphi, x);
        x.iter_mut().zip(self.phi).for_each(|(v, p)| *v -= c * p);
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let w2 = self.omega * self.omega;
        let kx = self.model.k.matvec(x);
        let mx = self.model.m.matvec(x);
        kx.iter().zip(&mx).map(|(k, m)| k - w2 * m).collect()
    }

    fn solve_real(&self, rhs: &[f64]) -> Vec<f64> {
        let mut r = rhs.to_vec();
        self.project_rhs(&mut r);
        let rn = norm2(&r);
        if rn == 0.0 {
            return vec![0.0; r.len()];
        }
        let mut x = self.lu.solve(&r);
        self.project_sol(&mut x);
        for _ in 0..4 {
            let ax = self.apply(&x);
            let mut res: Vec<f64> = r.iter().zip(&ax).map(|(a, b)| a - b).collect();
            self.project_rhs(&mut res);
            if norm2(&res) <= 1e-14 * rn {
                break;
            }
            let mut dx = self.lu.solve(&res);
            self.project_sol(&mut dx);
            x.iter_mut().zip(&dx).for_each(|(a, b)| *a += b);
        }
        x
    }

    /// Solution of `(K − ω²M) x = r − (φᵀr) Mφ` with `φᵀMx = 0`.
    pub fn solve(&self, rhs: &[C64]) -> Vec<C64> {
        let re: Vec<f64> = rhs.iter().map(|v| v.re).collect();
        let im: Vec<f64> = rhs.iter().map(|v| v.im).collect();
        let xr = self.solve_real(&re);
        let xi = self.solve_real(&im);
        xr.iter().zip(&xi).map(|(&a, &b)| C64::new(a, b)).collect()
    }

    /// Element-wise `δq = g_φᵀ δφ + g_ω δω`, given the explicit gradients of a
    /// quantity `q(φ, ω)` with respect to the master mode and frequency.
    pub fn mode_contributions(&self, g_phi: &[C64], g_omega: C64) -> Vec<C64> {
        let eta = self.solve(g_phi);
        let g_dot_phi = dot_real(self.phi, g_phi);
        let w = self.omega;
        let w2 = w * w;
        let phi = self.phi;
        self.model.per_component(|c| {
            let p = c.gather(phi);
            let e = c.gather(&eta);
            let pc = to_complex(&p);
            let kpp = local_form(&c.ops.ke, &p, &p);
            let mpp = local_form(&c.ops.me, &p, &p);
            let eta_term = local_form(&c.ops.ke, &e, &pc) - w2 * local_form(&c.ops.me, &e, &pc);
            -eta_term - 0.5 * g_dot_phi * mpp + g_omega * (kpp - w2 * mpp) / (2.0 * w)
        })
    }
}

/// `dκ/dω` for `κ = −i / (2ω√(1−ξ²))` with `ξ = ξ(ω)`.
fn d_kappa_d_omega(rom: &Rom, modal: &ModalData) -> C64 {
    let w = rom.omega;
    let xi = rom.xi;
    let dxi = damping_ratio_slope(w, &modal.damping);
    rom.kappa * (-1.0 / w + xi * dxi / (1.0 - xi * xi))
}

/// `dγ/dμ̂_e` for every component.
pub fn adjoint_gamma(model: &AssembledModel, modal: &ModalData, rom: &Rom, eig: &EigenAdjoint) -> Result<Vec<C64>> {
    let factors = rom.factors.as_ref().ok_or_else(|| Error::invalid("reduced model lacks cached factorizations"))?;
    let phi = &rom.phi;
    let phic = to_complex(phi);
    let x11 = rom.x11();
    let x11c = to_complex(&x11);
    let (alpha, beta) = (modal.damping.alpha, modal.damping.beta);
    let lam = rom.lambda;
    let r = lam.re;

    // gradient of γ with respect to W20 and x11 (both −2 F2·ψ·φ)
    let g_w = model.f2_adj(&rom.psi, &phic)?;
    let g_w: Vec<C64> = g_w.iter().map(|v| -2.0 * v).collect();
    let (a20m, a20c) = (4.0 * lam * lam, 2.0 * lam);
    let (lam20, _) = solve_refined(model, &factors.d20, a20m, a20c, &g_w);
    let (a11m, a11c) = (4.0 * r * r, 2.0 * r);
    let re: Vec<f64> = g_w.iter().map(|v| v.re).collect();
    let im: Vec<f64> = g_w.iter().map(|v| v.im).collect();
    let (l_re, _) = solve_refined(model, &factors.d11, a11m, a11c, &re);
    let (l_im, _) = solve_refined(model, &factors.d11, a11m, a11c, &im);
    let lam11: Vec<C64> = l_re.iter().zip(&l_im).map(|(&a, &b)| C64::new(a, b)).collect();

    // explicit dependence on φ
    let f2pw = model.f2(&phic, &rom.w20)?;
    let f2px = model.f2(phi, &x11)?;
    let f3 = model.f3(phi, phi, phi)?;
    let a20 = model.f2_adj(&lam20, &phic)?;
    let a11 = model.f2_adj(&lam11, &phic)?;
    let g_phi: Vec<C64> = (0..phi.len())
        .map(|i| -rom.kappa * (4.0 * f2pw[i] + 4.0 * f2px[i] + 12.0 * f3[i]) - 2.0 * a20[i] - 4.0 * a11[i])
        .collect();

    // explicit dependence on ω through κ, λ in D20 and Re λ in D11
    let dl = lambda_derivative(rom.omega, 1.0, &modal.damping)?;
    let dd20 = |v: &[C64]| -> Vec<C64> {
        let mv = model.m.matvec(v);
        let kv = model.k.matvec(v);
        mv.iter().zip(&kv).map(|(&m, &k)| (8.0 * lam + 2.0 * alpha) * m + 2.0 * beta * k).collect()
    };
    let dd11 = |v: &[C64]| -> Vec<C64> {
        let mv = model.m.matvec(v);
        let kv = model.k.matvec(v);
        mv.iter().zip(&kv).map(|(&m, &k)| (8.0 * r + 2.0 * alpha) * m + 2.0 * beta * k).collect()
    };
    let g_omega = d_kappa_d_omega(rom, modal) / rom.kappa * rom.gamma
        - dot(&lam20, &dd20(&rom.w20)) * dl
        - dot(&lam11, &dd11(&x11c)) * dl.re;

    let mode = eig.mode_contributions(&g_phi, g_omega);

    let (m20, k20) = (a20m + a20c * alpha, 1.0 + a20c * beta);
    let (m11, k11) = (a11m + a11c * alpha, 1.0 + a11c * beta);
    let psi = &rom.psi;
    let w20 = &rom.w20;
    let explicit = model.per_component(|c| {
        let ops = &c.ops;
        let p = c.gather(&phic);
        let ps = c.gather(psi);
        let w = c.gather(w20);
        let x = c.gather(&x11c);
        let l20 = c.gather(&lam20);
        let l11 = c.gather(&lam11);
        let f2pp = local_f2(ops, &p, &p);
        let t_f21 = 2.0 * dot(&ps, &local_f2(ops, &p, &w))
            + 2.0 * dot(&ps, &local_f2(ops, &p, &x))
            + 3.0 * dot(&ps, &local_f3(ops, &p, &p, &p));
        let t_rhs = dot(&l20, &f2pp) + 2.0 * dot(&l11, &f2pp);
        let t_op = m20 * local_form(&ops.me, &l20, &w)
            + k20 * local_form(&ops.ke, &l20, &w)
            + m11 * local_form(&ops.me, &l11, &x)
            + k11 * local_form(&ops.ke, &l11, &x);
        -(t_f21 + t_rhs + t_op)
    });
    Ok(explicit.iter().zip(&mode).map(|(a, b)| a + b).collect())
}

/// `df̃/dμ̂_e` by the generic mode-adjoint route.
pub fn adjoint_ftilde(model: &AssembledModel, modal: &ModalData, rom: &Rom, eig: &EigenAdjoint) -> Vec<C64> {
    let g_phi: Vec<C64> = model.f_ext.iter().map(|&f| 0.5 * rom.kappa * f).collect();
    let g_omega = d_kappa_d_omega(rom, modal) / rom.kappa * rom.f_tilde;
    eig.mode_contributions(&g_phi, g_omega)
}

/// `df̃/dμ̂_e` from the Lagrangian multipliers `η_φ`, `η_norm` of the bordered
/// eigen-adjoint system.
pub fn adjoint_ftilde_bordered(model: &AssembledModel, modal: &ModalData, rom: &Rom, eig: &EigenAdjoint) -> Vec<C64> {
    let (w, xi, kappa) = (rom.omega, rom.xi, rom.kappa);
    let beta = modal.damping.beta;
    let phi = &rom.phi;
    let eta_f = -1.0;
    let eta_psi: Vec<f64> = model.f_ext.iter().map(|&f| 0.5 * eta_f * f).collect();
    let eta_kappa = dot(&eta_psi, phi) / w;
    let eta_xi = -eta_kappa * C64::i() * xi / (4.0 * w * (1.0 - xi * xi).powf(1.5));
    let b_norm: Vec<C64> = eta_psi.iter().map(|&v| kappa * v).collect();
    let b_phi = eta_kappa * kappa + 2.0 * eta_xi * (xi - beta * w);
    let eta_norm = 0.5 * dot_real(phi, &b_norm);
    let mut eta_phi = eig.solve(&b_norm);
    eta_phi.iter_mut().zip(phi).for_each(|(v, &p)| *v += b_phi / (2.0 * w) * p);
    let w2 = w * w;
    model.per_component(|c| {
        let p = c.gather(phi);
        let pc = to_complex(&p);
        let e = c.gather(&eta_phi);
        local_form(&c.ops.ke, &e, &pc) - w2 * local_form(&c.ops.me, &e, &pc) + eta_norm * local_form(&c.ops.me, &p, &p)
    })
}

fn abs_derivative(z: C64, dz: C64) -> f64 {
    (z.conj() * dz).re / z.norm()
}

/// `dρ_max` from the derivatives of the reduced coefficients.
pub fn d_rho_max(c: &RomCoefficients, eps: f64, rho: f64, dl: &[C64], dg: &[C64], df: &[C64]) -> Result<Vec<f64>> {
    let den = c.lambda.re + 3.0 * c.gamma.re * rho * rho;
    if den.abs() < 1e-12 * c.lambda.re.abs() {
        return Err(Error::RomBreakdown("peak amplitude sits at a fold of its defining cubic".into()));
    }
    let sgn = c.lambda.re.signum();
    Ok((0..dl.len())
        .map(|e| {
            let dfa = abs_derivative(c.f_tilde, df[e]);
            (eps * dfa * sgn - dl[e].re * rho - dg[e].re * rho.powi(3)) / den
        })
        .collect())
}

/// Derivatives of a quantity with respect to `(Re λ, Im λ, Re γ, Im γ, |f̃|)`.
pub type CoefficientGradient = [f64; 5];

/// Sensitivities of `ρ_SN`, `Ω_SN` and `b` at a saddle-node point with
/// respect to the five real reduced-model parameters.
#[derive(Debug, Clone, Copy)]
pub struct CuspGradient {
    pub rho: CoefficientGradient,
    pub omega: CoefficientGradient,
    pub b: CoefficientGradient,
}

fn mat_add(a: &Mat2, b: &Mat2, s: f64) -> Mat2 {
    [[a[0][0] + s * b[0][0], a[0][1] + s * b[0][1]], [a[1][0] + s * b[1][0], a[1][1] + s * b[1][1]]]
}

fn mat_vec(a: &Mat2, v: &[f64; 2]) -> [f64; 2] {
    [a[0][0] * v[0] + a[0][1] * v[1], a[1][0] * v[0] + a[1][1] * v[1]]
}

fn transpose(a: &Mat2) -> Mat2 {
    [[a[0][0], a[1][0]], [a[0][1], a[1][1]]]
}

fn bilinear(m: &Mat2, u: &[f64; 2], v: &[f64; 2]) -> f64 {
    let mv = mat_vec(m, v);
    u[0] * mv[0] + u[1] * mv[1]
}

fn bordered_solve(a: &Mat2, border: &[f64; 2], rhs: [f64; 3]) -> Result<[f64; 2]> {
    let m = Matrix3::new(
        a[0][0], a[0][1], border[0], //
        a[1][0], a[1][1], border[1], //
        border[0], border[1], 0.0,
    );
    let x = m
        .lu()
        .solve(&Vector3::new(rhs[0], rhs[1], rhs[2]))
        .ok_or_else(|| Error::DegenerateSaddleNode("bordered null-vector system is singular".into()))?;
    Ok([x[0], x[1]])
}

/// Appendix-style sensitivity of the saddle-node point and its cusp
/// coefficient, with `c2 = −∂G/∂ρ` and `ψ` in the last term of `b'`.
pub fn cusp_gradient(c: &RomCoefficients, eps: f64, sn: &SnPoint, cusp: &CuspData) -> Result<CuspGradient> {
    let (lr, li, gr, gi) = (c.lambda.re, c.lambda.im, c.gamma.re, c.gamma.im);
    let fa = c.f_tilde.norm();
    let e = eps * fa;
    let (rho, om) = (sn.rho, sn.omega);
    let r2 = rho * rho;
    let p = lr * rho + gr * rho.powi(3);
    let q = e * e + 2.0 * lr * gr * rho.powi(4) + 2.0 * gr * gr * rho.powi(6);
    let det_i = li - om + gi * r2;

    let c2_terms = [
        2.0 * q * (8.0 * lr * gr * rho.powi(3) + 12.0 * gr * gr * rho.powi(5)),
        24.0 * gi * gi * rho.powi(5) * (p * p - e * e),
        8.0 * gi * gi * p * (lr + 3.0 * gr * r2) * rho.powi(6),
    ];
    let c2: f64 = c2_terms.iter().sum();
    let c2_scale: f64 = c2_terms.iter().map(|t| t.abs()).sum();
    if c2.abs() <= 1e-10 * c2_scale {
        return Err(Error::AtCusp("saddle-node amplitude derivative is singular".into()));
    }
    let c5 = 2.0 * det_i * r2;
    if c5.abs() <= 1e-14 * (li.abs() * r2).max(f64::MIN_POSITIVE) {
        return Err(Error::AtCusp("saddle-node frequency derivative is singular".into()));
    }

    let a = cusp.a;
    let (phi, psi) = (cusp.phi, cusp.psi);
    let b_phi = [bilinear(&cusp.b1, &phi, &phi), bilinear(&cusp.b2, &phi, &phi)];
    let da_domega: Mat2 = [[0.0, rho], [-1.0 / rho, 0.0]];
    let da_drho: Mat2 = [
        [6.0 * gr * rho, -li + om - 3.0 * gi * r2],
        [2.0 * gi - (li - om) / r2 + gi, 2.0 * gr * rho],
    ];
    let db1_drho: Mat2 = [[6.0 * gr, 0.0], [0.0, lr + 3.0 * gr * r2]];
    let db2_domega: Mat2 = [[2.0 / r2, 0.0], [0.0, -1.0]];
    let db2_drho: Mat2 = [
        [4.0 * (li - om) / rho.powi(3), lr / r2 - gr],
        [lr / r2 - gr, 2.0 * gi * rho],
    ];

    let mut out = CuspGradient { rho: [0.0; 5], omega: [0.0; 5], b: [0.0; 5] };
    for k in 0..5 {
        let mut d = [0.0; 5];
        d[k] = 1.0;
        let [dlr, dli, dgr, dgi, dfa] = d;
        let ede = e * eps * dfa;
        let c1 = 8.0 * gi * dgi * rho.powi(6) * (e * e - p * p)
            + 4.0 * gi * gi * rho.powi(6) * (2.0 * ede - 2.0 * p * (dlr * rho + dgr * rho.powi(3)))
            - 2.0 * q * (2.0 * ede + 2.0 * dlr * gr * rho.powi(4) + 2.0 * lr * dgr * rho.powi(4) + 4.0 * gr * dgr * rho.powi(6));
        let drho = c1 / c2;
        let c3 = dli + dgi * r2 + 2.0 * gi * rho * drho;
        let c4 = 2.0 * ede
            - 2.0 * p * (dlr * rho + lr * drho + dgr * rho.powi(3) + 3.0 * gr * r2 * drho)
            - 2.0 * det_i * det_i * rho * drho;
        let domega = c3 - c4 / c5;

        let dmu_a: Mat2 = [
            [dlr + 3.0 * dgr * r2, -(dli + dgi * r2) * rho],
            [2.0 * dgi * rho + (dli + dgi * r2) / rho, dlr + dgr * r2],
        ];
        let da = mat_add(&mat_add(&dmu_a, &da_domega, domega), &da_drho, drho);
        let dmu_b1: Mat2 = [[6.0 * dgr * rho, 0.0], [0.0, dlr * rho + dgr * rho.powi(3)]];
        let db1 = mat_add(&dmu_b1, &db1_drho, drho);
        let off = -(dlr + dgr * r2) / rho;
        let dmu_b2: Mat2 = [[2.0 * dgi - 2.0 * (dli + dgi * r2) / r2, off], [off, dli + dgi * r2]];
        let db2 = mat_add(&mat_add(&dmu_b2, &db2_domega, domega), &db2_drho, drho);

        let rhs_psi = mat_vec(&transpose(&da), &psi);
        let dpsi = bordered_solve(&transpose(&a), &psi, [-rhs_psi[0], -rhs_psi[1], 0.0])?;
        let rhs_phi = mat_vec(&da, &phi);
        let dphi = bordered_solve(&a, &psi, [-rhs_phi[0], -rhs_phi[1], -(phi[0] * dpsi[0] + phi[1] * dpsi[1])])?;

        let db_phi = [bilinear(&db1, &phi, &phi), bilinear(&db2, &phi, &phi)];
        let b_mixed = [bilinear(&cusp.b1, &phi, &dphi), bilinear(&cusp.b2, &phi, &dphi)];
        let db = dpsi[0] * b_phi[0] + dpsi[1] * b_phi[1]
            + psi[0] * db_phi[0] + psi[1] * db_phi[1]
            + 2.0 * (psi[0] * b_mixed[0] + psi[1] * b_mixed[1]);
        out.rho[k] = drho;
        out.omega[k] = domega;
        out.b[k] = db;
    }
    Ok(out)
}

/// Chains a coefficient gradient to per-element derivatives.
pub fn chain_coefficients(c: &RomCoefficients, g: &CoefficientGradient, dl: &[C64], dg: &[C64], df: &[C64]) -> Vec<f64> {
    (0..dl.len())
        .map(|e| {
            g[0] * dl[e].re + g[1] * dl[e].im + g[2] * dg[e].re + g[3] * dg[e].im + g[4] * abs_derivative(c.f_tilde, df[e])
        })
        .collect()
}

/// Linear harmonic response `Z U = ε f_ext` at frequency `Ω`, where
/// `Z = K + iΩC − Ω²M`.
#[derive(Debug, Clone)]
pub struct LinearResponse {
    pub big_omega: f64,
    pub u: Vec<C64>,
    /// `c_lin = Σ_{j∈L} |U_j|²`.
    pub value: f64,
    /// `dc_lin/dμ̂_e` at fixed `Ω`.
    pub grad: Vec<f64>,
    /// `∂c_lin/∂Ω`.
    pub d_big_omega: f64,
}

pub fn d_linear_objective(model: &AssembledModel, big_omega: f64, eps: f64, selection: &[usize]) -> Result<LinearResponse> {
    let w = big_omega;
    let (alpha, beta) = (model.damping.alpha, model.damping.beta);
    let (am, ac) = (C64::new(-w * w, 0.0), C64::new(0.0, w));
    let lu = model
        .pencil(am, ac, C64::new(1.0, 0.0))
        .lu("dynamic stiffness")?;
    let rhs: Vec<C64> = model.f_ext.iter().map(|&f| C64::new(eps * f, 0.0)).collect();
    let (u, _) = solve_refined(model, &lu, am, ac, &rhs);
    let mut seed = vec![C64::new(0.0, 0.0); model.n];
    let mut value = 0.0;
    for &j in selection {
        seed[j] += u[j].conj();
        value += u[j].norm_sqr();
    }
    let (adj, _) = solve_refined(model, &lu, am, ac, &seed);
    let (zm, zk) = (C64::new(-w * w, w * alpha), C64::new(1.0, w * beta));
    let grad = model.per_component(|c| {
        let a = c.gather(&adj);
        let x = c.gather(&u);
        -2.0 * (zm * local_form(&c.ops.me, &a, &x) + zk * local_form(&c.ops.ke, &a, &x)).re
    });
    let mu = model.m.matvec(&u);
    let cu = model.c_matvec(&u);
    let dz_u: Vec<C64> = (0..model.n).map(|i| C64::i() * cu[i] - 2.0 * w * mu[i]).collect();
    let d_big_omega = -2.0 * dot(&adj, &dz_u).re;
    Ok(LinearResponse { big_omega, u, value, grad, d_big_omega })
}

/// Per-μ̂ derivatives of every quantity the optimizer uses.
#[derive(Debug, Clone, Default)]
pub struct SensitivityBundle {
    pub d_omega1: Vec<f64>,
    pub d_omega2: Vec<f64>,
    pub d_lambda: Vec<C64>,
    pub d_gamma: Vec<C64>,
    pub d_ftilde: Vec<C64>,
    pub d_rho_max: Option<Vec<f64>>,
    pub d_b: Option<Vec<f64>>,
    pub d_clin: Option<Vec<f64>>,
}

/// Modal, backbone and forcing sensitivities shared by all formulations.
pub fn core_bundle(model: &AssembledModel, modal: &ModalData, rom: &Rom) -> Result<SensitivityBundle> {
    let w = modal.omega_master();
    let d_omega1 = d_omega(model, modal.phi_master(), w);
    let sec = modal.secondary();
    let d_omega2 = d_omega(model, &modal.phi[sec], modal.omega[sec]);
    let d_lambda = d_lambda(modal, &d_omega1)?;
    let eig = EigenAdjoint::new(model, w, &rom.phi)?;
    let d_gamma = adjoint_gamma(model, modal, rom, &eig)?;
    let d_ftilde = adjoint_ftilde(model, modal, rom, &eig);
    Ok(SensitivityBundle { d_omega1, d_omega2, d_lambda, d_gamma, d_ftilde, ..Default::default() })
}

/// Pulls a `dJ/dμ̂` array back to the design variables.
pub fn chain_to_design(pipeline: &DensityPipeline, field: &DesignField, d_hat: &[f64]) -> Result<Vec<f64>> {
    pipeline.backprop(field, d_hat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frc;
    use crate::fe::{FeProblem, Material, Mesh, MeshSpec, PointLoad};
    use crate::modal::rayleigh_constants;
    use crate::ssm::{build_rom, W11Convention};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Desk {
        problem: FeProblem,
        damping: crate::fe::Rayleigh,
    }

    fn desk(nx: usize, ny: usize) -> Desk {
        let mesh = Mesh::build(&MeshSpec::beam(nx, ny, 5.0)).unwrap();
        let load = mesh.node_at(nx as f64 * 5.0, ny as f64 * 2.5);
        let problem = FeProblem::new(mesh, Material::silicon(), &[PointLoad { node: load, fx: 0.0, fy: 1e8 }], &[(load, 1)]).unwrap();
        let base = problem.assemble(&vec![1.0; nx * ny]).unwrap();
        let modes = crate::modal::solve_modes(&base.m, &base.k, 2).unwrap();
        let damping = rayleigh_constants(modes.omega[0], modes.omega[1], 0.001).unwrap();
        Desk { problem, damping }
    }

    fn analyze(d: &Desk, mu: &[f64], prev: Option<&[f64]>) -> (AssembledModel, ModalData, Rom) {
        let model = d.problem.assemble(mu).unwrap().with_damping(d.damping);
        let modal = ModalData::compute(&model, 4, prev).unwrap();
        let rom = build_rom(&model, &modal, W11Convention::Double).unwrap();
        (model, modal, rom)
    }

    fn random_design(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(0.4..1.0)).collect()
    }

    fn rel(a: f64, b: f64, floor: f64) -> f64 {
        (a - b).abs() / b.abs().max(floor)
    }

    #[test]
    fn weight_scaling_leaves_one_dof_frequency_fixed() {
        // m and k both scale with the single weight, so ω is independent of it
        let (model, modal) = crate::ssm::tests::oscillator(4.0, 0.0, 0.0, 0.01, 1.0);
        let d = d_omega(&model, modal.phi_master(), modal.omega_master());
        assert!(d[0].abs() < 1e-15);
    }

    #[test]
    fn undamped_lambda_derivative_is_imaginary() {
        let r = crate::fe::Rayleigh { alpha: 0.0, beta: 0.0 };
        let dl = lambda_derivative(2.0, 0.3, &r).unwrap();
        assert!((dl - C64::new(0.0, 0.3)).norm() < 1e-15);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let d = desk(8, 3);
        let n = 24;
        let mu = random_design(n, 7);
        let (model, modal, rom) = analyze(&d, &mu, None);
        let eps = 0.05;
        let bundle = core_bundle(&model, &modal, &rom).unwrap();
        let c = rom.coefficients();
        let (rho, _) = frc::peak(&c, eps).unwrap();
        let drho = d_rho_max(&c, eps, rho, &bundle.d_lambda, &bundle.d_gamma, &bundle.d_ftilde).unwrap();
        let f_bordered = adjoint_ftilde_bordered(&model, &modal, &rom, &EigenAdjoint::new(&model, rom.omega, &rom.phi).unwrap());
        let lin = d_linear_objective(&model, modal.omega_master(), eps, &model.outputs).unwrap();

        let max_g = bundle.d_gamma.iter().fold(0.0f64, |m, v| m.max(v.norm()));
        let max_f = bundle.d_ftilde.iter().fold(0.0f64, |m, v| m.max(v.norm()));
        let h = 1e-5;
        for e in [0, 5, 11, 17, 23] {
            let eval = |s: f64| {
                let mut m = mu.clone();
                m[e] += s;
                let (mm, md, r) = analyze(&d, &m, Some(&modal.phi[modal.master]));
                let cc = r.coefficients();
                let lin = d_linear_objective(&mm, modal.omega_master(), eps, &mm.outputs).unwrap().value;
                let peak = frc::peak(&cc, eps).unwrap().0;
                [md.omega_master(), md.omega[md.secondary()], cc.lambda.re, cc.lambda.im, cc.gamma.re, cc.gamma.im, cc.f_tilde.re, cc.f_tilde.im, peak, lin]
            };
            // fourth-order central difference
            let (p1, m1, p2, m2) = (eval(h), eval(-h), eval(2.0 * h), eval(-2.0 * h));
            let fd: Vec<f64> = (0..10).map(|k| (8.0 * (p1[k] - m1[k]) - (p2[k] - m2[k])) / (12.0 * h)).collect();
            let fdc = |k: usize| C64::new(fd[k], fd[k + 1]);
            assert!(rel(bundle.d_omega1[e], fd[0], 1e-12) < 1e-7, "ω1 e{e}: {} vs {} (ω {})", bundle.d_omega1[e], fd[0], modal.omega_master());
            assert!(rel(bundle.d_omega2[e], fd[1], 1e-12) < 1e-7, "ω2 e{e}: {} vs {}", bundle.d_omega2[e], fd[1]);
            assert!((bundle.d_lambda[e] - fdc(2)).norm() <= 1e-7 * fdc(2).norm(), "λ e{e}");
            let dg = fdc(4);
            assert!((bundle.d_gamma[e] - dg).norm() <= 1e-5 * dg.norm().max(1e-2 * max_g), "γ e{e}: {} vs {dg}", bundle.d_gamma[e]);
            let df = fdc(6);
            assert!((bundle.d_ftilde[e] - df).norm() <= 1e-5 * df.norm().max(1e-2 * max_f), "f̃ e{e}");
            assert!((f_bordered[e] - bundle.d_ftilde[e]).norm() <= 1e-8 * max_f, "f̃ routes e{e}");
            assert!(rel(drho[e], fd[8], 1e-12) < 1e-5, "ρmax e{e}: {} vs {}", drho[e], fd[8]);
            assert!(rel(lin.grad[e], fd[9], 1e-30) < 1e-5, "clin e{e}: {} vs {}", lin.grad[e], fd[9]);
        }
    }

    #[test]
    fn cusp_gradient_matches_coefficient_perturbation() {
        let c = RomCoefficients {
            lambda: C64::new(-0.01, 1.0),
            gamma: C64::new(-0.02, 0.6),
            f_tilde: C64::new(0.03, -0.25),
        };
        let eps = 0.15;
        let pts = frc::sn_points(&c, eps);
        assert_eq!(pts.len(), 2);
        for sn in &pts {
            let cusp = frc::cusp_coefficient(&c, sn).unwrap();
            let g = cusp_gradient(&c, eps, sn, &cusp).unwrap();
            for k in 0..5 {
                let h = 1e-6;
                let perturb = |s: f64| {
                    let mut cc = c;
                    match k {
                        0 => cc.lambda.re += s,
                        1 => cc.lambda.im += s,
                        2 => cc.gamma.re += s,
                        3 => cc.gamma.im += s,
                        _ => cc.f_tilde *= 1.0 + s / c.f_tilde.norm(),
                    }
                    let near = frc::sn_points(&cc, eps)
                        .into_iter()
                        .min_by(|a, b| (a.omega - sn.omega).abs().total_cmp(&(b.omega - sn.omega).abs()))
                        .unwrap();
                    (near.rho, near.omega, frc::cusp_coefficient(&cc, &near).unwrap().b)
                };
                let (p, m) = (perturb(h), perturb(-h));
                let fd = [(p.0 - m.0) / (2.0 * h), (p.1 - m.1) / (2.0 * h), (p.2 - m.2) / (2.0 * h)];
                let scale = |v: &[f64; 5]| v.iter().fold(0.0f64, |a, x| a.max(x.abs()));
                assert!(rel(g.rho[k], fd[0], 1e-3 * scale(&g.rho)) < 1e-5, "ρ_SN k{k}: {} vs {}", g.rho[k], fd[0]);
                assert!(rel(g.omega[k], fd[1], 1e-3 * scale(&g.omega)) < 1e-5, "Ω_SN k{k}: {} vs {}", g.omega[k], fd[1]);
                assert!(rel(g.b[k], fd[2], 1e-3 * scale(&g.b)) < 1e-4, "b k{k}: {} vs {}", g.b[k], fd[2]);
            }
        }
    }

    #[test]
    fn linear_objective_one_dof_resonance() {
        let (model, modal) = crate::ssm::tests::oscillator(4.0, 0.0, 0.0, 0.01, 3.0);
        let w = modal.omega_master();
        let lin = d_linear_objective(&model, w, 0.1, &[0]).unwrap();
        let expect = (0.1 * 3.0 / (2.0 * 0.01 * w * w)).powi(2);
        assert!(rel(lin.value, expect, 0.0) < 1e-12);
    }
}
