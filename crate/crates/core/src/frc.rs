//! Forced response curves, peaks, saddle-node points and the cusp coefficient
//! of the polar reduced dynamics
//!
//! ```text
//! ρ' = Re(λ)ρ + Re(γ)ρ³ + ε Re(f̃ e^{-iθ})
//! θ' = Im(λ) − Ω + Im(γ)ρ² + ε Im(f̃ e^{-iθ}) / ρ
//! ```

use crate::error::{Error, Result};
use crate::fe::AssembledModel;
use crate::linalg::poly::{eval, real_roots};
use crate::ssm::{nonautonomous_x0, reconstruct, Rom, RomCoefficients};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

pub type Mat2 = [[f64; 2]; 2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrcSample {
    pub omega: f64,
    pub rho: f64,
    pub theta: f64,
    pub stable: bool,
    /// Peak physical amplitude at each output DOF; empty until attached.
    pub physical_amp: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SnPoint {
    pub rho: f64,
    pub omega: f64,
    pub k_sn: f64,
    /// Sign multiplying `k_sn` in `Ω = Im(λ) + Im(γ)ρ² ± k_sn`.
    pub branch_sign: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CuspData {
    pub b: f64,
    pub phi: [f64; 2],
    pub psi: [f64; 2],
    pub a: Mat2,
    pub b1: Mat2,
    pub b2: Mat2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SnCurveSample {
    pub eps: f64,
    pub rho: f64,
    pub omega: f64,
    pub branch: usize,
}

fn forcing(c: &RomCoefficients, eps: f64) -> f64 {
    eps * c.f_tilde.norm()
}

/// Relative residual of the FRC equation at `(ρ, Ω)`.
pub fn frc_residual(c: &RomCoefficients, eps: f64, rho: f64, omega: f64) -> f64 {
    let e2 = forcing(c, eps).powi(2);
    let r = c.lambda.re * rho + c.gamma.re * rho.powi(3);
    let i = (c.lambda.im - omega + c.gamma.im * rho * rho) * rho;
    (r * r + i * i - e2).abs() / e2.max(f64::MIN_POSITIVE)
}

/// Right-hand side of the polar reduced dynamics.
pub fn vector_field(c: &RomCoefficients, eps: f64, big_omega: f64, rho: f64, theta: f64) -> [f64; 2] {
    let f = eps * c.f_tilde * num_complex::Complex64::from_polar(1.0, -theta);
    [
        c.lambda.re * rho + c.gamma.re * rho.powi(3) + f.re,
        c.lambda.im - big_omega + c.gamma.im * rho * rho + f.im / rho,
    ]
}

/// Jacobian of the polar dynamics at a fixed point `(ρ, Ω)`.
pub fn jacobian(c: &RomCoefficients, rho: f64, omega: f64) -> Mat2 {
    let s = rho * rho;
    let detune = c.lambda.im - omega + c.gamma.im * s;
    [
        [c.lambda.re + 3.0 * c.gamma.re * s, -detune * rho],
        [2.0 * c.gamma.im * rho + detune / rho, c.lambda.re + c.gamma.re * s],
    ]
}

pub fn det2(a: &Mat2) -> f64 {
    a[0][0] * a[1][1] - a[0][1] * a[1][0]
}

fn det_scale(a: &Mat2) -> f64 {
    (a[0][0] * a[1][1]).abs() + (a[0][1] * a[1][0]).abs()
}

fn fixed_point_phase(c: &RomCoefficients, rho: f64, omega: f64) -> f64 {
    let re = c.lambda.re * rho + c.gamma.re * rho.powi(3);
    let im = (c.lambda.im - omega + c.gamma.im * rho * rho) * rho;
    let mut t = c.f_tilde.arg() + im.atan2(-re);
    while t > PI {
        t -= 2.0 * PI;
    }
    while t <= -PI {
        t += 2.0 * PI;
    }
    t
}

/// All fixed points of the reduced dynamics at forcing frequency `omega`.
pub fn frc_at(c: &RomCoefficients, eps: f64, omega: f64) -> Vec<FrcSample> {
    let e2 = forcing(c, eps).powi(2);
    if !(e2 > 0.0) {
        return Vec::new();
    }
    let sigma = c.lambda.im - omega;
    let g2 = c.gamma.norm_sqr();
    let coeffs = [
        -e2,
        c.lambda.re.powi(2) + sigma * sigma,
        2.0 * (c.lambda.re * c.gamma.re + sigma * c.gamma.im),
        g2,
    ];
    let scale = e2 / coeffs[1];
    real_roots(&coeffs, scale)
        .into_iter()
        .filter(|&s| s > 0.0)
        .map(|s| {
            let rho = s.sqrt();
            let a = jacobian(c, rho, omega);
            let stable = a[0][0] + a[1][1] < 0.0 && det2(&a) > 0.0;
            FrcSample { omega, rho, theta: fixed_point_phase(c, rho, omega), stable, physical_amp: Vec::new() }
        })
        .collect()
}

/// FRC over a frequency grid; samples ordered by frequency then amplitude.
pub fn frc_sweep(c: &RomCoefficients, eps: f64, omegas: &[f64]) -> Vec<FrcSample> {
    omegas.par_iter().flat_map_iter(|&w| frc_at(c, eps, w)).collect()
}

/// Fills `physical_amp` by reconstructing each periodic orbit at `dofs`.
pub fn attach_physical(
    samples: &mut [FrcSample],
    model: &AssembledModel,
    rom: &Rom,
    eps: f64,
    dofs: &[usize],
) -> Result<()> {
    samples.par_iter_mut().try_for_each(|s| {
        let x0 = nonautonomous_x0(model, s.omega, &model.f_ext, &rom.phi)?;
        s.physical_amp = reconstruct(rom, Some(&x0), eps, s.rho, s.theta, dofs);
        Ok(())
    })
}

/// Peak amplitude and its frequency on the backbone.
pub fn peak(c: &RomCoefficients, eps: f64) -> Result<(f64, f64)> {
    if !(c.lambda.re < 0.0) {
        return Err(Error::invalid("peak requires Re(λ) < 0"));
    }
    let e = forcing(c, eps);
    if !(e > 0.0) {
        return Err(Error::invalid("peak requires ε|f̃| > 0"));
    }
    let rho = peak_root(c.lambda.re, c.gamma.re, e)?;
    Ok((rho, backbone(c, rho)))
}

/// Smallest positive root of `Re(γ)ρ³ + Re(λ)ρ + e = 0`.
pub(crate) fn peak_root(re_lambda: f64, re_gamma: f64, e: f64) -> Result<f64> {
    let coeffs = [e, re_lambda, 0.0, re_gamma];
    let scale = e / re_lambda.abs();
    real_roots(&coeffs, scale)
        .into_iter()
        .filter(|&r| r > 0.0)
        .map(|r| polish(&coeffs, r))
        .next()
        .ok_or_else(|| Error::RomBreakdown(format!("no positive peak amplitude (Re γ = {re_gamma:.3e})")))
}

fn polish(coeffs: &[f64], mut x: f64) -> f64 {
    let d: Vec<f64> = coeffs.iter().enumerate().skip(1).map(|(k, &a)| k as f64 * a).collect();
    for _ in 0..3 {
        let dp = eval(&d, x);
        if dp == 0.0 {
            break;
        }
        let step = eval(coeffs, x) / dp;
        if !step.is_finite() {
            break;
        }
        x -= step;
    }
    x
}

pub fn backbone(c: &RomCoefficients, rho: f64) -> f64 {
    c.lambda.im + c.gamma.im * rho * rho
}

/// Distance to the cusp measured on the FRC branch that folds.
#[derive(Debug, Clone, Copy)]
pub struct FoldMargin {
    /// `|Im γ|/h_min − 1`; positive exactly when the FRC has two folds.
    pub value: f64,
    /// Minimizer `s* = ρ²` of `h(s) = −dk/ds` on `(0, ρ_peak²)`.
    pub s_star: f64,
    /// Derivative of `value` w.r.t. (Re λ, Im λ, Re γ, Im γ, |f̃|).
    pub grad: [f64; 5],
}

/// Along the branch `Ω = Im λ + Im γ s ± k(s)` with
/// `k² = e²/s − (Re λ + Re γ s)²`, folds sit where `h(s) = |Im γ|`. The
/// margin is defined on both sides of the cusp and is smooth across it.
pub fn fold_margin(c: &RomCoefficients, eps: f64) -> Result<FoldMargin> {
    let (lr, gr, gi) = (c.lambda.re, c.gamma.re, c.gamma.im);
    let e = forcing(c, eps);
    let s_peak = peak_root(lr, gr, e)?.powi(2);
    let h = |s: f64| {
        let r = lr + gr * s;
        let k2 = e * e / s - r * r;
        if k2 <= 0.0 {
            return f64::INFINITY;
        }
        (e * e / (s * s) + 2.0 * r * gr) / (2.0 * k2.sqrt())
    };
    let (t_hi, n) = (s_peak.ln() - 1e-9, 400usize);
    let t_lo = t_hi - 30.0;
    let dt = (t_hi - t_lo) / n as f64;
    let best = (0..=n).min_by(|&i, &j| h((t_lo + i as f64 * dt).exp()).total_cmp(&h((t_lo + j as f64 * dt).exp()))).unwrap();
    let (mut a, mut b) = (t_lo + best.saturating_sub(1) as f64 * dt, t_lo + (best + 1).min(n) as f64 * dt);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..80 {
        let (x1, x2) = (b - g * (b - a), a + g * (b - a));
        if h(x1.exp()) <= h(x2.exp()) {
            b = x2;
        } else {
            a = x1;
        }
    }
    let s = (0.5 * (a + b)).exp();
    let r = lr + gr * s;
    let k2 = e * e / s - r * r;
    let k = k2.sqrt();
    let num = e * e / (s * s) + 2.0 * r * gr;
    let h_min = num / (2.0 * k);
    if !(h_min > 0.0 && h_min.is_finite()) {
        return Err(Error::RomBreakdown(format!("fold margin undefined (h_min = {h_min:.3e})")));
    }
    // envelope theorem: s* is stationary, so only explicit dependencies count
    let dh = |d_num: f64, d_k2: f64| d_num / (2.0 * k) - num * d_k2 / (4.0 * k * k2);
    let dh_lr = dh(2.0 * gr, -2.0 * r);
    let dh_gr = dh(2.0 * (s * gr + r), -2.0 * r * s);
    let dh_e = dh(2.0 * e / (s * s), 2.0 * e / s);
    let q = -gi.abs() / (h_min * h_min);
    Ok(FoldMargin {
        value: gi.abs() / h_min - 1.0,
        s_star: s,
        grad: [q * dh_lr, 0.0, q * dh_gr, gi.signum() / h_min, q * dh_e * eps],
    })
}

/// Ratio `b²/m` just past the cusp, probed by raising `|Im γ|` until the
/// fold margin equals `delta`. Near the cusp `b² ≈ K·m`.
pub fn cusp_scale(c: &RomCoefficients, eps: f64, delta: f64) -> Result<Option<f64>> {
    let m = fold_margin(c, eps)?;
    let h_min = c.gamma.im.abs() / (1.0 + m.value);
    let mut probe = *c;
    probe.gamma.im = if c.gamma.im < 0.0 { -1.0 } else { 1.0 } * h_min * (1.0 + delta);
    let d = fold_margin(&probe, eps)?.value;
    Ok(controlling_cusp(&probe, eps)?.map(|(_, cd)| cd.b * cd.b / d).filter(|k| k.is_finite() && *k > 0.0))
}

/// Coefficients of the saddle-node polynomial in `s = ρ²`, ascending.
pub fn sn_polynomial(c: &RomCoefficients, eps: f64) -> [f64; 7] {
    let (lr, gr, gi) = (c.lambda.re, c.gamma.re, c.gamma.im);
    let g2 = gr * gr + gi * gi;
    let e2 = forcing(c, eps).powi(2);
    [
        e2 * e2,
        0.0,
        4.0 * e2 * lr * gr,
        4.0 * e2 * (gr * gr - gi * gi),
        4.0 * lr * lr * g2,
        8.0 * lr * gr * g2,
        4.0 * gr * gr * g2,
    ]
}

fn sn_valid(c: &RomCoefficients, eps: f64, rho: f64, omega: f64) -> bool {
    let a = jacobian(c, rho, omega);
    let scale = det_scale(&a);
    (det2(&a).abs() <= 1e-8 * scale || scale == 0.0) && frc_residual(c, eps, rho, omega) <= 1e-8
}

/// Saddle-node bifurcation points of the FRC at forcing scale `eps`.
pub fn sn_points(c: &RomCoefficients, eps: f64) -> Vec<SnPoint> {
    let e = forcing(c, eps);
    if !(e > 0.0) || c.lambda.re == 0.0 {
        return Vec::new();
    }
    let coeffs = sn_polynomial(c, eps);
    let scale = (e / c.lambda.re).powi(2);
    let primary = if c.gamma.im < 0.0 { -1.0 } else { 1.0 };
    let mut out: Vec<SnPoint> = Vec::new();
    for s in real_roots(&coeffs, scale) {
        if !(s > 0.0) {
            continue;
        }
        let s = polish(&coeffs, s);
        let rho = s.sqrt();
        let r = c.lambda.re + c.gamma.re * s;
        let rad = e * e / s - r * r;
        if rad < -1e-8 * e * e / s {
            continue;
        }
        let k_sn = rad.max(0.0).sqrt();
        let base = c.lambda.im + c.gamma.im * s;
        // detuning from det A = 0, exact where the radicand cancels badly
        let mut candidates = vec![base + primary * k_sn, base - primary * k_sn];
        if c.gamma.im != 0.0 {
            candidates.push(base + (e * e / s + 2.0 * c.gamma.re * s * r) / (2.0 * c.gamma.im * s));
        }
        let score = |w: f64| {
            let a = jacobian(c, rho, w);
            det2(&a).abs() / det_scale(&a).max(f64::MIN_POSITIVE) + frc_residual(c, eps, rho, w)
        };
        let omega = candidates.into_iter().min_by(|&a, &b| score(a).total_cmp(&score(b))).unwrap();
        if !sn_valid(c, eps, rho, omega) {
            continue;
        }
        let dup = out.iter().any(|p| (p.rho - rho).abs() <= 1e-10 * rho && (p.omega - omega).abs() <= 1e-12 * omega.abs());
        if !dup {
            let branch_sign = if omega - base > 0.0 || (omega == base && primary > 0.0) { 1.0 } else { -1.0 };
            out.push(SnPoint { rho, omega, k_sn, branch_sign });
        }
    }
    out.sort_by(|a, b| a.omega.partial_cmp(&b.omega).unwrap());
    out
}

/// Null vectors and the quadratic normal-form coefficient `b` at a saddle-node.
pub fn cusp_coefficient(c: &RomCoefficients, sn: &SnPoint) -> Result<CuspData> {
    let (rho, omega) = (sn.rho, sn.omega);
    let a = jacobian(c, rho, omega);
    let b21 = c.lambda.im - omega + c.gamma.im * rho * rho;
    let b22 = -(c.lambda.re + c.gamma.re * rho * rho) / rho;
    let b1 = [[6.0 * c.gamma.re * rho, 0.0], [0.0, c.lambda.re * rho + c.gamma.re * rho.powi(3)]];
    let b2 = [[2.0 * c.gamma.im - 2.0 * b21 / (rho * rho), b22], [b22, b21]];
    let (phi, psi) = null_vectors(&a)?;
    let quad = |m: &Mat2| phi[0] * (m[0][0] * phi[0] + m[0][1] * phi[1]) + phi[1] * (m[1][0] * phi[0] + m[1][1] * phi[1]);
    let b = psi[0] * quad(&b1) + psi[1] * quad(&b2);
    Ok(CuspData { b, phi, psi, a, b1, b2 })
}

/// Right and left null vectors of a singular 2×2 matrix, normalized so that
/// `ψᵀψ = 1`, `ψᵀφ = 1`, with the largest entry of `ψ` positive.
pub fn null_vectors(a: &Mat2) -> Result<([f64; 2], [f64; 2])> {
    let row0 = a[0][0].hypot(a[0][1]);
    let row1 = a[1][0].hypot(a[1][1]);
    let phi = if row0 >= row1 { [-a[0][1], a[0][0]] } else { [-a[1][1], a[1][0]] };
    let col0 = a[0][0].hypot(a[1][0]);
    let col1 = a[0][1].hypot(a[1][1]);
    let mut psi = if col0 >= col1 { [-a[1][0], a[0][0]] } else { [-a[1][1], a[0][1]] };
    let pn = psi[0].hypot(psi[1]);
    let fn_ = phi[0].hypot(phi[1]);
    if pn == 0.0 || fn_ == 0.0 {
        return Err(Error::DegenerateSaddleNode("Jacobian vanishes identically".into()));
    }
    psi = [psi[0] / pn, psi[1] / pn];
    if psi[0].abs() >= psi[1].abs() && psi[0] < 0.0 || psi[1].abs() > psi[0].abs() && psi[1] < 0.0 {
        psi = [-psi[0], -psi[1]];
    }
    let pf = psi[0] * phi[0] + psi[1] * phi[1];
    if pf.abs() <= 1e-12 * fn_ {
        return Err(Error::DegenerateSaddleNode("left and right null vectors are orthogonal".into()));
    }
    Ok(([phi[0] / pf, phi[1] / pf], psi))
}

/// The saddle-node point with the larger `|b|`, if any exist.
pub fn controlling_cusp(c: &RomCoefficients, eps: f64) -> Result<Option<(SnPoint, CuspData)>> {
    let mut best: Option<(SnPoint, CuspData)> = None;
    for p in sn_points(c, eps) {
        let d = cusp_coefficient(c, &p)?;
        if best.as_ref().is_none_or(|(_, bd)| d.b.abs() > bd.b.abs()) {
            best = Some((p, d));
        }
    }
    Ok(best)
}

/// Saddle-node curves over an ε grid, with branches matched to their nearest
/// predecessor in `(ρ, Ω)`.
pub fn sn_sweep(c: &RomCoefficients, eps_grid: &[f64]) -> Vec<SnCurveSample> {
    let per_eps: Vec<Vec<SnPoint>> = eps_grid.par_iter().map(|&e| sn_points(c, e)).collect();
    let mut last: Vec<(f64, f64)> = Vec::new();
    let mut out = Vec::new();
    let w_scale = c.lambda.re.abs().max(f64::MIN_POSITIVE);
    for (&eps, pts) in eps_grid.iter().zip(&per_eps) {
        let cost = |i: usize, j: usize| {
            let (r, w) = last[j];
            ((pts[i].rho - r) / pts[i].rho.max(r)).hypot((pts[i].omega - w) / w_scale)
        };
        let assign = best_assignment(pts.len(), last.len(), &cost);
        for (i, p) in pts.iter().enumerate() {
            let branch = match assign[i] {
                Some(j) => j,
                None => {
                    last.push((p.rho, p.omega));
                    last.len() - 1
                }
            };
            last[branch] = (p.rho, p.omega);
            out.push(SnCurveSample { eps, rho: p.rho, omega: p.omega, branch });
        }
    }
    out
}

/// Minimum-total-cost matching of `n` points to `m` branches by exhaustive
/// search; saddle-node sets are tiny.
fn best_assignment(n: usize, m: usize, cost: &dyn Fn(usize, usize) -> f64) -> Vec<Option<usize>> {
    fn rec(
        i: usize,
        n: usize,
        m: usize,
        used: &mut Vec<bool>,
        cur: &mut Vec<Option<usize>>,
        acc: f64,
        best: &mut (f64, Vec<Option<usize>>),
        cost: &dyn Fn(usize, usize) -> f64,
    ) {
        if acc >= best.0 {
            return;
        }
        if i == n {
            *best = (acc, cur.clone());
            return;
        }
        let free = used.iter().filter(|u| !**u).count();
        if n - i > free {
            cur.push(None);
            rec(i + 1, n, m, used, cur, acc, best, cost);
            cur.pop();
        }
        for j in 0..m {
            if !used[j] {
                used[j] = true;
                cur.push(Some(j));
                rec(i + 1, n, m, used, cur, acc + cost(i, j), best, cost);
                cur.pop();
                used[j] = false;
            }
        }
    }
    let mut best = (f64::INFINITY, vec![None; n]);
    rec(0, n, m, &mut vec![false; m], &mut Vec::new(), 0.0, &mut best, cost);
    best.1
}
