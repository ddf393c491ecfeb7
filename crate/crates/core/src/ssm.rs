//! Cubic-order spectral-submanifold reduction onto the master mode pair.
//!
//! The reduced dynamics are `ṗ = λp + γp²p̄ + ε f̃ e^{iΩt}`. The autonomous
//! manifold is `x = φ(p + p̄) + W20 p² + W̄20 p̄² + x11 p p̄ + O(3)`.

use crate::error::{Error, Result};
use crate::fe::AssembledModel;
use crate::linalg::{dot, dot_real, norm2, to_complex, BandLu, Scalar};
use crate::modal::ModalData;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::sync::Arc;

/// Condition estimate beyond which a cohomological operator is treated as
/// resonant.
pub const RESONANCE_CONDITION: f64 = 1e12;

/// Right-hand-side factor `c` in `(4Re(λ)²M + 2Re(λ)C + K) W11 = −c f2(φ,φ)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum W11Convention {
    /// `c = 1`; the physical `p p̄` coefficient is then `2·W11`.
    Single,
    /// `c = 2`; `W11` is the physical `p p̄` coefficient itself.
    #[default]
    Double,
}

impl W11Convention {
    pub fn rhs_factor(self) -> f64 {
        match self {
            W11Convention::Single => 1.0,
            W11Convention::Double => 2.0,
        }
    }
}

/// `κ = −i / (2ω√(1−ξ²))`, with `ψ = κφ`.
pub fn left_scale(omega: f64, xi: f64) -> Complex64 {
    Complex64::new(0.0, -1.0 / (2.0 * omega * (1.0 - xi * xi).sqrt()))
}

pub fn left_vector(phi: &[f64], omega: f64, xi: f64) -> (Vec<Complex64>, Complex64) {
    let kappa = left_scale(omega, xi);
    (phi.iter().map(|&p| kappa * p).collect(), kappa)
}

fn factor_checked<T: Scalar>(
    model: &AssembledModel,
    a_m: T,
    a_c: T,
    context: &str,
) -> Result<BandLu<T>> {
    let lu = model.pencil(a_m, a_c, T::one()).lu(context).map_err(|e| match e {
        Error::Singular { .. } => Error::InternalResonance { context: context.into(), condition: f64::INFINITY },
        other => other,
    })?;
    let cond = lu.condition_estimate();
    if !(cond < RESONANCE_CONDITION) {
        return Err(Error::InternalResonance { context: context.into(), condition: cond });
    }
    Ok(lu)
}

pub(crate) fn solve_refined<T: Scalar>(
    model: &AssembledModel,
    lu: &BandLu<T>,
    a_m: T,
    a_c: T,
    rhs: &[T],
) -> (Vec<T>, f64) {
    let apply = |x: &[T]| -> Vec<T> {
        let mx = model.m.matvec(x);
        let cx = model.c_matvec(x);
        let kx = model.k.matvec(x);
        (0..x.len()).map(|i| mx[i] * a_m + cx[i] * a_c + kx[i]).collect()
    };
    let mut x = lu.solve(rhs);
    let mut res = f64::INFINITY;
    for _ in 0..2 {
        let ax = apply(&x);
        let r: Vec<T> = rhs.iter().zip(&ax).map(|(&b, &a)| b - a).collect();
        res = norm2(&r) / norm2(rhs).max(f64::MIN_POSITIVE);
        if res < 1e-14 {
            break;
        }
        let dx = lu.solve(&r);
        x.iter_mut().zip(&dx).for_each(|(a, &d)| *a += d);
    }
    let ax = apply(&x);
    let r: Vec<T> = rhs.iter().zip(&ax).map(|(&b, &a)| b - a).collect();
    res = res.min(norm2(&r) / norm2(rhs).max(f64::MIN_POSITIVE));
    (x, res)
}

/// Factorizations reused by the adjoint solves.
#[derive(Debug)]
pub struct RomFactors {
    pub d20: BandLu<Complex64>,
    pub d11: BandLu<f64>,
}

#[derive(Debug, Clone)]
pub struct Rom {
    pub omega: f64,
    pub xi: f64,
    pub lambda: Complex64,
    pub kappa: Complex64,
    pub phi: Vec<f64>,
    pub psi: Vec<Complex64>,
    pub w20: Vec<Complex64>,
    pub w11: Vec<f64>,
    pub convention: W11Convention,
    pub f2_phi_phi: Vec<f64>,
    pub f21: Vec<Complex64>,
    pub gamma: Complex64,
    /// Modal force of the unscaled load `f_ext`.
    pub f_tilde: Complex64,
    /// Relative residuals of the W20 and W11 solves.
    pub residuals: [f64; 2],
    pub factors: Option<Arc<RomFactors>>,
}

impl Rom {
    /// Physical `p p̄` coefficient of the manifold.
    pub fn x11(&self) -> Vec<f64> {
        let s = 2.0 / self.convention.rhs_factor();
        self.w11.iter().map(|v| v * s).collect()
    }

    pub fn coefficients(&self) -> RomCoefficients {
        RomCoefficients { lambda: self.lambda, gamma: self.gamma, f_tilde: self.f_tilde }
    }
}

/// The three complex numbers that fully determine the reduced dynamics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RomCoefficients {
    pub lambda: Complex64,
    pub gamma: Complex64,
    pub f_tilde: Complex64,
}

pub fn solve_w20(model: &AssembledModel, f2pp: &[f64], lambda: Complex64) -> Result<(Vec<Complex64>, BandLu<Complex64>, f64)> {
    let a_m = 4.0 * lambda * lambda;
    let a_c = 2.0 * lambda;
    let lu = factor_checked(model, a_m, a_c, "W20 operator (2:1 resonance)")?;
    let rhs: Vec<Complex64> = f2pp.iter().map(|&v| Complex64::new(-v, 0.0)).collect();
    if norm2(&rhs) == 0.0 {
        return Ok((rhs, lu, 0.0));
    }
    let (x, res) = solve_refined(model, &lu, a_m, a_c, &rhs);
    Ok((x, lu, res))
}

pub fn solve_w11(
    model: &AssembledModel,
    f2pp: &[f64],
    lambda: Complex64,
    convention: W11Convention,
) -> Result<(Vec<f64>, BandLu<f64>, f64)> {
    let r = lambda.re;
    let a_m = 4.0 * r * r;
    let a_c = 2.0 * r;
    let lu = factor_checked(model, a_m, a_c, "W11 operator")?;
    let c = convention.rhs_factor();
    let rhs: Vec<f64> = f2pp.iter().map(|&v| -c * v).collect();
    if norm2(&rhs) == 0.0 {
        return Ok((rhs, lu, 0.0));
    }
    let (x, res) = solve_refined(model, &lu, a_m, a_c, &rhs);
    Ok((x, lu, res))
}

/// `f21 = 2 f2(φ, W20) + 2 f2(φ, x11) + 3 f3(φ, φ, φ)` with the physical `x11`.
pub fn f21_vector(model: &AssembledModel, phi: &[f64], w20: &[Complex64], x11: &[f64]) -> Result<Vec<Complex64>> {
    let pc = to_complex(phi);
    let a = model.f2(&pc, w20)?;
    let b = model.f2(phi, x11)?;
    let c = model.f3(phi, phi, phi)?;
    Ok((0..phi.len()).map(|i| 2.0 * a[i] + 2.0 * b[i] + 3.0 * c[i]).collect())
}

pub fn gamma(psi: &[Complex64], f21: &[Complex64]) -> Complex64 {
    -dot(psi, f21)
}

pub fn modal_force(psi: &[Complex64], f_ext: &[f64]) -> Complex64 {
    0.5 * dot_real(f_ext, psi)
}

/// Builds the reduced-order model about the master mode of `modal`.
pub fn build_rom(model: &AssembledModel, modal: &ModalData, convention: W11Convention) -> Result<Rom> {
    let phi = modal.phi_master().to_vec();
    let omega = modal.omega_master();
    let (xi, lambda) = (modal.xi, modal.lambda);
    let (psi, kappa) = left_vector(&phi, omega, xi);
    let f2pp = model.f2(&phi, &phi)?;
    let (w20, d20, r20) = solve_w20(model, &f2pp, lambda)?;
    let (w11, d11, r11) = solve_w11(model, &f2pp, lambda, convention)?;
    let s = 2.0 / convention.rhs_factor();
    let x11: Vec<f64> = w11.iter().map(|v| v * s).collect();
    let f21 = f21_vector(model, &phi, &w20, &x11)?;
    let g = gamma(&psi, &f21);
    let ft = modal_force(&psi, &model.f_ext);
    for r in [r20, r11] {
        if r > 1e-9 {
            log::warn!("cohomological solve residual {r:.2e} exceeds 1e-9");
        }
    }
    if !(g.re.is_finite() && g.im.is_finite()) {
        return Err(Error::RomBreakdown("non-finite backbone coefficient".into()));
    }
    Ok(Rom {
        omega,
        xi,
        lambda,
        kappa,
        phi,
        psi,
        w20,
        w11,
        convention,
        f2_phi_phi: f2pp,
        f21,
        gamma: g,
        f_tilde: ft,
        residuals: [r20, r11],
        factors: Some(Arc::new(RomFactors { d20, d11 })),
    })
}

/// Leading non-autonomous manifold coefficient for forcing `f cos Ωt`, with
/// the master-mode component deflated (it is carried by the reduced dynamics).
pub fn nonautonomous_x0(model: &AssembledModel, big_omega: f64, f: &[f64], phi: &[f64]) -> Result<Vec<Complex64>> {
    if norm2(f) == 0.0 {
        return Ok(vec![Complex64::new(0.0, 0.0); f.len()]);
    }
    let mphi = model.m.matvec(phi);
    let pf = dot(phi, f);
    let rhs: Vec<Complex64> = f.iter().zip(&mphi).map(|(&fi, &mp)| Complex64::new(0.5 * (fi - mp * pf), 0.0)).collect();
    let z = model.pencil(Complex64::new(-big_omega * big_omega, 0.0), Complex64::new(0.0, big_omega), Complex64::new(1.0, 0.0));
    let mut y = z.lu("dynamic stiffness for x0")?.solve(&rhs);
    let c = dot_real(&mphi, &y);
    y.iter_mut().zip(phi).for_each(|(v, &p)| *v -= c * p);
    Ok(y)
}

/// Samples of the reconstructed periodic orbit at selected DOFs over one period.
pub fn reconstruct_series(
    rom: &Rom,
    x0: Option<&[Complex64]>,
    eps: f64,
    rho: f64,
    theta: f64,
    dofs: &[usize],
    samples: usize,
) -> Vec<Vec<f64>> {
    let x11 = rom.x11();
    (0..samples)
        .map(|k| {
            let tau = 2.0 * PI * k as f64 / samples as f64;
            let e1 = Complex64::from_polar(rho, theta + tau);
            let e2 = e1 * e1;
            let ef = Complex64::from_polar(eps, tau);
            dofs.iter()
                .map(|&d| {
                    let mut z = 2.0 * rom.phi[d] * e1.re + 2.0 * (rom.w20[d] * e2).re + x11[d] * rho * rho;
                    if let Some(x0) = x0 {
                        z += 2.0 * (x0[d] * ef).re;
                    }
                    z
                })
                .collect()
        })
        .collect()
}

/// Time-domain infinity norm of the reconstructed response at each DOF.
pub fn reconstruct(
    rom: &Rom,
    x0: Option<&[Complex64]>,
    eps: f64,
    rho: f64,
    theta: f64,
    dofs: &[usize],
) -> Vec<f64> {
    let series = reconstruct_series(rom, x0, eps, rho, theta, dofs, 256);
    (0..dofs.len()).map(|j| series.iter().map(|s| s[j].abs()).fold(0.0, f64::max)).collect()
}
