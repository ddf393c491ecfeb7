//! Undamped modes, Rayleigh damping and the master eigenvalue.

use crate::error::{Error, Result};
use crate::fe::{AssembledModel, Rayleigh};
use crate::linalg::{dot, sym_gen_eigen, SymBand};
use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Below this size the generalized eigenproblem is solved densely.
pub const DENSE_LIMIT: usize = 400;

const MAX_SUBSPACE_ITERS: usize = 400;

#[derive(Debug, Clone)]
pub struct Modes {
    /// Natural frequencies in rad/ms, ascending.
    pub omega: Vec<f64>,
    /// Mass-normalized mode shapes.
    pub phi: Vec<Vec<f64>>,
    /// Relative residuals `‖Kφ − ω²Mφ‖ / ‖Kφ‖`.
    pub residual: Vec<f64>,
}

fn fix_sign(v: &mut [f64]) {
    let mut best = 0.0f64;
    let mut s = 1.0;
    for &x in v.iter() {
        if x.abs() > best * (1.0 + 1e-12) {
            best = x.abs();
            s = x.signum();
        }
    }
    if s < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

fn residuals(m: &SymBand, k: &SymBand, omega: &[f64], phi: &[Vec<f64>]) -> Vec<f64> {
    omega
        .iter()
        .zip(phi)
        .map(|(&w, p)| {
            let kp = k.matvec(p);
            let mp = m.matvec(p);
            let r: f64 = kp.iter().zip(&mp).map(|(a, b)| (a - w * w * b).powi(2)).sum::<f64>().sqrt();
            r / kp.iter().map(|a| a * a).sum::<f64>().sqrt()
        })
        .collect()
}

fn dense_modes(m: &SymBand, k: &SymBand, count: usize) -> Result<Modes> {
    let (vals, vecs) = sym_gen_eigen(&k.to_dense(), &m.to_dense())?;
    let mut omega = Vec::with_capacity(count);
    let mut phi = Vec::with_capacity(count);
    for j in 0..count {
        if !(vals[j] > 0.0) {
            return Err(Error::Singular { context: format!("eigenvalue {} is not positive", vals[j]), pivot: j });
        }
        let mut v: Vec<f64> = vecs.column(j).iter().copied().collect();
        // the Rayleigh quotient is accurate to the square of the vector error
        omega.push((k.form(&v, &v) / m.form(&v, &v)).sqrt());
        fix_sign(&mut v);
        phi.push(v);
    }
    let residual = residuals(m, k, &omega, &phi);
    Ok(Modes { omega, phi, residual })
}

fn subspace_modes(m: &SymBand, k: &SymBand, count: usize) -> Result<Modes> {
    let n = m.n();
    let q = (2 * count).max(count + 8).min(n);
    let lu = SymBand::combine(&[(1.0, k)]).lu("stiffness for eigen solve")?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut x: Vec<Vec<f64>> = (0..q).map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let mut prev_worst = f64::INFINITY;
    for it in 0..MAX_SUBSPACE_ITERS {
        let y: Vec<Vec<f64>> = x.iter().map(|v| lu.solve(&m.matvec(v))).collect();
        let ky: Vec<Vec<f64>> = y.iter().map(|v| k.matvec(v)).collect();
        let my: Vec<Vec<f64>> = y.iter().map(|v| m.matvec(v)).collect();
        let kr = DMatrix::from_fn(q, q, |i, j| 0.5 * (dot(&y[i], &ky[j]) + dot(&y[j], &ky[i])));
        let mr = DMatrix::from_fn(q, q, |i, j| 0.5 * (dot(&y[i], &my[j]) + dot(&y[j], &my[i])));
        let (vals, vecs) = sym_gen_eigen(&kr, &mr)?;
        x = (0..q)
            .map(|c| {
                let mut v = vec![0.0; n];
                for (r, yr) in y.iter().enumerate() {
                    let s = vecs[(r, c)];
                    v.iter_mut().zip(yr).for_each(|(a, b)| *a += s * b);
                }
                v
            })
            .collect();
        let omega: Vec<f64> = vals[..count].iter().map(|v| v.sqrt()).collect();
        let worst = residuals(m, k, &omega, &x[..count]).iter().fold(0.0f64, |a, &b| a.max(b));
        // stop once the residual has hit its rounding floor; high stiffness
        // contrast (near-void regions) lifts that floor above 1e-8
        let stalled = (worst < 1e-8 && worst > 0.5 * prev_worst) || (worst < 1e-6 && worst > 0.95 * prev_worst);
        if worst < 1e-13 || stalled || it == MAX_SUBSPACE_ITERS - 1 {
            let mut phi: Vec<Vec<f64>> = x[..count].to_vec();
            phi.iter_mut().for_each(|v| fix_sign(v));
            let residual = residuals(m, k, &omega, &phi);
            if worst > 1e-6 {
                return Err(Error::EigenNonConvergence { residual: worst, iterations: it + 1 });
            }
            log::debug!("subspace iteration converged in {} steps, residual {worst:.2e}", it + 1);
            return Ok(Modes { omega, phi, residual });
        }
        prev_worst = worst;
    }
    unreachable!()
}

/// The `count` lowest modes of `K φ = ω² M φ`.
pub fn solve_modes(m: &SymBand, k: &SymBand, count: usize) -> Result<Modes> {
    let n = m.n();
    if count == 0 || count > n {
        return Err(Error::invalid(format!("cannot compute {count} modes of a {n}-DOF system")));
    }
    if n <= DENSE_LIMIT {
        dense_modes(m, k, count)
    } else {
        subspace_modes(m, k, count)
    }
}

pub fn rayleigh_constants(omega1: f64, omega2: f64, xi0: f64) -> Result<Rayleigh> {
    if !(omega1 > 0.0 && omega2 > omega1) || !(xi0 >= 0.0 && xi0 < 1.0) {
        return Err(Error::invalid(format!("Rayleigh constants need 0 < ω1 < ω2 and ξ0 in [0, 1), got {omega1}, {omega2}, {xi0}")));
    }
    Ok(Rayleigh { alpha: xi0 * 2.0 * omega1 * omega2 / (omega1 + omega2), beta: xi0 * 2.0 / (omega1 + omega2) })
}

pub fn damping_ratio(omega: f64, r: &Rayleigh) -> f64 {
    0.5 * (r.alpha / omega + r.beta * omega)
}

pub fn master_eigenvalue(omega: f64, xi: f64) -> Result<Complex64> {
    if !(0.0..1.0).contains(&xi) {
        return Err(Error::invalid(format!("damping ratio {xi} is not underdamped")));
    }
    Ok(Complex64::new(-xi * omega, omega * (1.0 - xi * xi).sqrt()))
}

/// `dξ/dω` with frozen Rayleigh constants.
pub fn damping_ratio_slope(omega: f64, r: &Rayleigh) -> f64 {
    0.5 * (r.beta - r.alpha / (omega * omega))
}

/// `λ'` from `ω'` with `ξ' = (β − α/ω²) ω'/2`.
pub fn lambda_derivative(omega: f64, d_omega: f64, r: &Rayleigh) -> Result<Complex64> {
    let xi = damping_ratio(omega, r);
    let lam = master_eigenvalue(omega, xi)?;
    let dxi = damping_ratio_slope(omega, r) * d_omega;
    Ok(-(lam * omega * dxi + (lam * xi + omega) * d_omega) / (lam + xi * omega))
}

/// Index of the mode closest in shape to `prev` (mass-weighted assurance).
///
/// Returns `None` if the best match is below 0.5.
pub fn track_mode(prev: &[f64], m: &SymBand, phi: &[Vec<f64>]) -> Option<usize> {
    let mp = m.matvec(prev);
    let norm = dot(prev, &mp).sqrt();
    let (best, score) = phi
        .iter()
        .enumerate()
        .map(|(j, p)| (j, dot(&mp, p).abs() / norm))
        .fold((0, -1.0), |a, b| if b.1 > a.1 { b } else { a });
    (score >= 0.5).then_some(best)
}

/// Modal quantities of one design.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModalData {
    pub omega: Vec<f64>,
    #[serde(skip)]
    pub phi: Vec<Vec<f64>>,
    /// Index of the master mode.
    pub master: usize,
    pub damping: Rayleigh,
    pub xi: f64,
    pub lambda: Complex64,
}

impl ModalData {
    /// Solves `count` modes and selects the master by tracking `prev` if given.
    pub fn compute(model: &AssembledModel, count: usize, prev: Option<&[f64]>) -> Result<Self> {
        let modes = solve_modes(&model.m, &model.k, count)?;
        let master = match prev {
            None => 0,
            Some(p) => track_mode(p, &model.m, &modes.phi).unwrap_or_else(|| {
                log::warn!("master mode lost (assurance below 0.5); falling back to the lowest mode");
                0
            }),
        };
        let mut phi = modes.phi;
        if let Some(p) = prev {
            // keep the sign continuous with the previous design
            let mp = model.m.matvec(p);
            if dot(&mp, &phi[master]) < 0.0 {
                phi[master].iter_mut().for_each(|v| *v = -*v);
            }
        }
        let omega = modes.omega;
        let w = omega[master];
        let xi = damping_ratio(w, &model.damping);
        let lambda = master_eigenvalue(w, xi)?;
        for j in [master.wrapping_sub(1), master + 1] {
            if let Some(&o) = omega.get(j) {
                if ((o - w) / w).abs() < 1e-6 {
                    log::warn!("master frequency {w} is nearly repeated; eigenvalue sensitivities are invalid");
                }
            }
        }
        Ok(ModalData { omega, phi, master, damping: model.damping, xi, lambda })
    }

    pub fn omega_master(&self) -> f64 {
        self.omega[self.master]
    }

    pub fn phi_master(&self) -> &[f64] {
        &self.phi[self.master]
    }

    /// Indices of the non-master modes in ascending frequency.
    pub fn others(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.omega.len()).filter(move |&j| j != self.master)
    }

    /// Lowest mode other than the master.
    pub fn secondary(&self) -> usize {
        if self.master == 0 { 1 } else { 0 }
    }
}
