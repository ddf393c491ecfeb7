//! Brute-force reference computations used to check the analytic paths.
//!
//! Nothing here reuses the closed-form FRC, saddle-node or polynomial root
//! machinery: the reduced dynamics are integrated in time, full models are
//! stepped with Newmark's method and the cusp is located from the cubic
//! discriminant of the amplitude equation.

use crate::error::{Error, Result};
use crate::fe::{AssembledModel, Component, LocalOperators, Rayleigh};
use crate::ssm::RomCoefficients;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use std::f64::consts::PI;
use std::sync::Arc;

/// Steady state of the reduced dynamics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RomSteady {
    pub rho: f64,
    pub theta: f64,
    /// False when the time budget ran out before `|Δρ|` per period settled.
    pub converged: bool,
    pub time: f64,
}

fn rom_rate(c: &RomCoefficients, eps: f64, big_omega: f64, q: Complex64) -> Complex64 {
    (c.lambda - Complex64::new(0.0, big_omega)) * q + c.gamma * q.norm_sqr() * q + eps * c.f_tilde
}

/// Integrates the reduced dynamics in the frame rotating with the forcing,
/// `q' = (λ − iΩ) q + γ|q|² q + ε f̃` with `q = ρ e^{iθ}`, by classical RK4.
/// `t_end` defaults to `50/|Re λ|`.
pub fn integrate_rom(c: &RomCoefficients, eps: f64, big_omega: f64, rho0: f64, theta0: f64, t_end: Option<f64>) -> Result<RomSteady> {
    if !(c.lambda.re < 0.0) || !(big_omega > 0.0) {
        return Err(Error::invalid("integrate_rom needs Re λ < 0 and Ω > 0"));
    }
    let t_end = t_end.unwrap_or(50.0 / c.lambda.re.abs());
    let period = 2.0 * PI / big_omega;
    let linear = eps * c.f_tilde.norm() / c.lambda.re.abs();
    let rho_ref = rho0.max(linear);
    let rate = (c.lambda - Complex64::new(0.0, big_omega)).norm() + 3.0 * c.gamma.norm() * rho_ref * rho_ref;
    // whole number of steps per period so period checks land on step boundaries
    let per_period = ((period * rate / 0.05).ceil() as usize).max(16);
    let dt = period / per_period as f64;
    let mut q = Complex64::from_polar(rho0, theta0);
    let mut t = 0.0;
    let mut last = q.norm();
    loop {
        for _ in 0..per_period {
            let k1 = rom_rate(c, eps, big_omega, q);
            let k2 = rom_rate(c, eps, big_omega, q + 0.5 * dt * k1);
            let k3 = rom_rate(c, eps, big_omega, q + 0.5 * dt * k2);
            let k4 = rom_rate(c, eps, big_omega, q + dt * k3);
            q += dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        t += period;
        if !q.norm().is_finite() {
            return Err(Error::Integration(format!("reduced dynamics diverged at t = {t:.3e}")));
        }
        let rho = q.norm();
        if (rho - last).abs() < 1e-10 * rho.max(1.0) {
            return Ok(RomSteady { rho, theta: q.arg(), converged: true, time: t });
        }
        last = rho;
        if t >= t_end {
            return Ok(RomSteady { rho, theta: q.arg(), converged: false, time: t });
        }
    }
}

/// Settings of the full-order time integration.
#[derive(Debug, Clone, Copy)]
pub struct NewmarkSettings {
    pub steps_per_period: usize,
    pub max_periods: usize,
    /// Relative change of the per-period amplitude that counts as steady.
    pub steady_tol: f64,
    pub newton_tol: f64,
    pub newton_iters: usize,
}

impl Default for NewmarkSettings {
    fn default() -> Self {
        NewmarkSettings { steps_per_period: 400, max_periods: 20_000, steady_tol: 1e-8, newton_tol: 1e-12, newton_iters: 30 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FullSteady {
    /// Infinity norm over the last period at each output DOF.
    pub amplitude: Vec<f64>,
    pub converged: bool,
    pub periods: usize,
}

/// Largest model the dense full-order integrator accepts.
pub const FULL_LIMIT: usize = 200;

/// Steps `M ü + C u̇ + f_int(u) = ε f_ext cos Ωt` from rest with the
/// average-acceleration Newmark scheme and Newton iterations.
pub fn integrate_full(model: &AssembledModel, eps: f64, big_omega: f64, settings: &NewmarkSettings) -> Result<FullSteady> {
    let n = model.n;
    if n > FULL_LIMIT {
        return Err(Error::invalid(format!("integrate_full is limited to n ≤ {FULL_LIMIT}, got {n}")));
    }
    if !(big_omega > 0.0) || settings.steps_per_period < 8 {
        return Err(Error::invalid("integrate_full needs Ω > 0 and at least 8 steps per period"));
    }
    let m = model.m.to_dense();
    let k = model.k.to_dense();
    let c = &m * model.damping.alpha + &k * model.damping.beta;
    let f = DVector::from_column_slice(&model.f_ext) * eps;
    let period = 2.0 * PI / big_omega;
    let dt = period / settings.steps_per_period as f64;
    let (a0, a1) = (4.0 / (dt * dt), 2.0 / dt);
    let lhs_lin = &m * a0 + &c * a1;
    let internal = |u: &DVector<f64>| DVector::from_vec(model.internal_force(u.as_slice()));

    let mut u = DVector::zeros(n);
    let mut v = DVector::zeros(n);
    // initial acceleration from equilibrium at t = 0
    let mut a = m.clone().lu().solve(&(&f - &c * &v - internal(&u))).ok_or_else(|| Error::Singular { context: "mass matrix".into(), pivot: 0 })?;
    let mut prev_amp: Option<Vec<f64>> = None;
    let mut step = 0usize;
    // static deflection under the peak load, a floor for the Newton test
    let u_scale = k.clone().lu().solve(&f).map_or(0.0, |x| x.norm()).max(1e-300);
    for period_idx in 1..=settings.max_periods {
        let mut amp = vec![0.0f64; model.outputs.len()];
        for _ in 0..settings.steps_per_period {
            step += 1;
            let t = step as f64 * dt;
            let load = &f * (big_omega * t).cos();
            // predictor: same displacement, Newton corrects
            let mut un = u.clone();
            let mut converged = false;
            for _ in 0..settings.newton_iters {
                let an = (&un - &u - &v * dt) * a0 - &a;
                let vn = &v + (&a + &an) * (0.5 * dt);
                let r = &m * &an + &c * &vn + internal(&un) - &load;
                let jac = &lhs_lin + model.tangent_dense(un.as_slice());
                let du = jac.lu().solve(&r).ok_or_else(|| Error::Integration("singular Newmark Jacobian".into()))?;
                un -= &du;
                // the inertia term a0·(u − uₙ − v dt) rounds at ~1e-16·a0·|u|, so
                // the correction is tested rather than the residual
                if du.norm() <= settings.newton_tol * un.norm().max(u_scale) {
                    converged = true;
                    break;
                }
            }
            if !converged {
                return Err(Error::Integration(format!("Newton did not converge at t = {t:.6e}")));
            }
            let an = (&un - &u - &v * dt) * a0 - &a;
            v += (&a + &an) * (0.5 * dt);
            a = an;
            u = un;
            for (o, &d) in amp.iter_mut().zip(&model.outputs) {
                *o = o.max(u[d].abs());
            }
        }
        if let Some(p) = &prev_amp {
            let change = p.iter().zip(&amp).map(|(x, y)| (x - y).abs() / y.abs().max(1e-300)).fold(0.0, f64::max);
            if change < settings.steady_tol {
                return Ok(FullSteady { amplitude: amp, converged: true, periods: period_idx });
            }
        }
        prev_amp = Some(amp);
    }
    Ok(FullSteady { amplitude: prev_amp.unwrap_or_default(), converged: false, periods: settings.max_periods })
}

/// Output amplitudes of the linearized model from the harmonic solve
/// `(K − Ω² M + iΩ C) U = ε f_ext`.
pub fn harmonic_amplitude(model: &AssembledModel, eps: f64, big_omega: f64) -> Result<Vec<f64>> {
    let m = model.m.to_dense();
    let k = model.k.to_dense();
    let c = &m * model.damping.alpha + &k * model.damping.beta;
    let z: DMatrix<Complex64> = (k - m * (big_omega * big_omega)).map(|x| Complex64::new(x, 0.0)) + c.map(|x| Complex64::new(0.0, big_omega * x));
    let rhs = DVector::from_iterator(model.n, model.f_ext.iter().map(|&x| Complex64::new(eps * x, 0.0)));
    let u = z.lu().solve(&rhs).ok_or_else(|| Error::Singular { context: "dynamic stiffness".into(), pivot: 0 })?;
    Ok(model.outputs.iter().map(|&d| u[d].norm()).collect())
}

/// Amplitude equation `ρ²[(Re λ + Re γ ρ²)² + (δ + Im γ ρ²)²] = ε²|f̃|²` with
/// `δ = Im λ − Ω`, written as a cubic in `s = ρ²`: `[a, b, c, d]`.
fn amplitude_cubic(c: &RomCoefficients, eps: f64, delta: f64) -> [f64; 4] {
    let (r, g, h) = (c.lambda.re, c.gamma.re, c.gamma.im);
    let e2 = eps * eps * c.f_tilde.norm_sqr();
    [g * g + h * h, 2.0 * (r * g + delta * h), r * r + delta * delta, -e2]
}

/// Signed width of the bistable window at detuning `δ`: positive when `ε²|f̃|²`
/// lies strictly between the local maximum `E(s₁)` and local minimum `E(s₂)`
/// of `E(s) = a s³ + b s² + c s`, normalized by `ε²|f̃|²`. Negative infinity
/// when `E` is monotone on `s > 0`.
fn fold_gap(p: [f64; 4]) -> f64 {
    let [a, b, c, d] = p;
    let e2 = -d;
    let disc = b * b - 3.0 * a * c;
    if !(b < 0.0 && disc > 0.0) || e2 <= 0.0 {
        return f64::NEG_INFINITY;
    }
    let s2 = (-b + disc.sqrt()) / (3.0 * a);
    let s1 = c / (3.0 * a * s2);
    let big_e = |s: f64| ((a * s + b) * s + c) * s;
    (e2 - big_e(s2)).min(big_e(s1) - e2) / e2
}

/// Largest fold gap over detuning. Returns `(gap, δ)`.
pub fn max_fold_gap(c: &RomCoefficients, eps: f64) -> (f64, f64) {
    let h = c.gamma.im;
    let r = c.lambda.re.abs();
    let e = eps * c.f_tilde.norm();
    if c.gamma.norm() == 0.0 || e == 0.0 {
        return (f64::NEG_INFINITY, 0.0);
    }
    // relevant detunings lie between the linear resonance and the backbone
    // shift at the linear peak amplitude
    let s_lin = (e / r).powi(2);
    let shift = h.abs() * s_lin;
    let lo = -shift * 2.0 - 4.0 * r;
    let hi = shift * 2.0 + 4.0 * r;
    let value = |d: f64| fold_gap(amplitude_cubic(c, eps, d));
    let n = 4000;
    let mut best = (f64::NEG_INFINITY, 0.0);
    for i in 0..=n {
        let d = lo + (hi - lo) * i as f64 / n as f64;
        let v = value(d);
        if v > best.0 {
            best = (v, d);
        }
    }
    if best.0 == f64::NEG_INFINITY {
        return best;
    }
    // golden-section refinement around the best sample
    let step = (hi - lo) / n as f64;
    let (mut a, mut b) = (best.1 - step, best.1 + step);
    let gr = 0.5 * (5f64.sqrt() - 1.0);
    let mut x1 = b - gr * (b - a);
    let mut x2 = a + gr * (b - a);
    let (mut f1, mut f2) = (value(x1), value(x2));
    for _ in 0..200 {
        if f1 > f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - gr * (b - a);
            f1 = value(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + gr * (b - a);
            f2 = value(x2);
        }
        if (b - a).abs() <= 1e-15 * (a.abs() + b.abs()).max(r) {
            break;
        }
    }
    let (fx, x) = if f1 > f2 { (f1, x1) } else { (f2, x2) };
    if fx > best.0 { (fx, x) } else { best }
}

/// Whether the FRC at force scale `eps` has a bistable window (two folds).
pub fn is_bistable(c: &RomCoefficients, eps: f64) -> bool {
    max_fold_gap(c, eps).0 > 0.0
}

/// Bisects on the fold count between `eps_lo` (no folds) and `eps_hi`
/// (two folds) and returns the bracket `[lo, hi]` around the cusp.
pub fn locate_cusp(c: &RomCoefficients, eps_lo: f64, eps_hi: f64, rel_tol: f64) -> Result<(f64, f64)> {
    if !(eps_lo > 0.0 && eps_hi > eps_lo) {
        return Err(Error::invalid("cusp bracket needs 0 < eps_lo < eps_hi"));
    }
    if is_bistable(c, eps_lo) || !is_bistable(c, eps_hi) {
        return Err(Error::invalid(format!("[{eps_lo}, {eps_hi}] does not bracket the onset of folds")));
    }
    let (mut lo, mut hi) = (eps_lo, eps_hi);
    while hi - lo > rel_tol * hi {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if is_bistable(c, mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok((lo, hi))
}

/// Cusp force scale of the Duffing-type family (`Re γ = 0`):
/// `ε_c²|f̃|² = 8|Re λ|³/(3√3 |Im γ|)`.
pub fn duffing_cusp(c: &RomCoefficients) -> f64 {
    let r = c.lambda.re.abs();
    (8.0 * r.powi(3) / (3.0 * 3f64.sqrt() * c.gamma.im.abs())).sqrt() / c.f_tilde.norm()
}

/// Random `n`-DOF system with symmetric positive definite mass and
/// stiffness and quadratic and cubic forces derived from a potential.
/// Frequency ratios to the lowest mode keep 0.5 away from 2:1 and 3:1 and
/// 0.25 away from 4:1 and 5:1. The forces are scaled so that at unit modal
/// amplitude of the lowest mode `max(|f2(φ,φ)|, |f3(φ,φ,φ)|) = nonlinearity·|Kφ|`.
pub fn random_system<R: Rng>(rng: &mut R, n: usize, xi: f64, nonlinearity: f64) -> Result<AssembledModel> {
    if n == 0 {
        return Err(Error::invalid("random_system needs n ≥ 1"));
    }
    let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let m = &a * a.transpose() / n as f64 + DMatrix::identity(n, n) * 0.5;
    // frequencies: ω₁ = 1, the rest away from 2:1 and 3:1 and from each other
    let mut w = vec![1.0];
    let mut tries = 0;
    while w.len() < n {
        tries += 1;
        if tries > 100_000 {
            return Err(Error::invalid("could not draw frequencies free of internal resonances"));
        }
        let x: f64 = rng.random_range(1.3..8.0);
        let near = |p: f64, gap: f64| (x - p).abs() < gap;
        if near(2.0, 0.5) || near(3.0, 0.5) || near(4.0, 0.25) || near(5.0, 0.25) || w.iter().any(|&y| (x / y - 1.0).abs() < 0.1) {
            continue;
        }
        w.push(x);
    }
    w.sort_by(f64::total_cmp);
    // K = M Φ diag(ω²) Φᵀ M with Φ = L⁻ᵀ Q mass-orthonormal
    let l = m.clone().cholesky().ok_or_else(|| Error::invalid("random mass matrix not definite"))?.l();
    let q = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0)).qr().q();
    let phi = l.transpose().try_inverse().ok_or_else(|| Error::invalid("singular Cholesky factor"))? * q;
    let mp = &m * &phi;
    let k = &mp * DMatrix::from_diagonal(&DVector::from_iterator(n, w.iter().map(|x| x * x))) * mp.transpose();
    let k = (&k + k.transpose()) * 0.5;
    {
        let mut ops = LocalOperators::zeros(n);
        for i in 0..n {
            for j in 0..n {
                ops.me[i * n + j] = m[(i, j)];
                ops.ke[i * n + j] = k[(i, j)];
            }
        }
        // fully symmetric tensors from random coefficients on sorted index tuples
        let mut a3 = std::collections::HashMap::new();
        let mut a4 = std::collections::HashMap::new();
        for i in 0..n {
            for j in 0..n {
                for l in 0..n {
                    let mut key = [i, j, l];
                    key.sort();
                    let v = *a3.entry(key).or_insert_with(|| nonlinearity * rng.random_range(-1.0..1.0));
                    ops.f2[(i * n + j) * n + l] = v;
                    for p in 0..n {
                        let mut key = [i, j, l, p];
                        key.sort();
                        let v = *a4.entry(key).or_insert_with(|| nonlinearity * rng.random_range(0.0..1.0));
                        ops.f3[((i * n + j) * n + l) * n + p] = v;
                    }
                }
            }
        }
        // amplitude rescaling x → s·x: f2 scales by s, f3 by s²
        let p1: Vec<f64> = phi.column(0).iter().copied().collect();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let kp = (&k * DVector::from_column_slice(&p1)).norm();
        let (mut q2, mut q3) = (vec![0.0; n], vec![0.0; n]);
        for a in 0..n {
            for b in 0..n {
                for c in 0..n {
                    q2[a] += ops.f2[(a * n + b) * n + c] * p1[b] * p1[c];
                    for d in 0..n {
                        q3[a] += ops.f3[((a * n + b) * n + c) * n + d] * p1[b] * p1[c] * p1[d];
                    }
                }
            }
        }
        let strength = (norm(&q2) / kp).max((norm(&q3) / kp).sqrt());
        if strength > 0.0 {
            let t = nonlinearity / strength;
            ops.f2.iter_mut().for_each(|v| *v *= t);
            ops.f3.iter_mut().for_each(|v| *v *= t * t);
        }
        let f_ext: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let comp = Component { dofs: (0..n).map(Some).collect(), ops: Arc::new(ops) };
        let model = AssembledModel::new(n, vec![comp], vec![1.0], f_ext, vec![0])?;
        let damping = crate::modal::rayleigh_constants(w[0], *w.get(1).unwrap_or(&(2.0 * w[0])), xi)?;
        Ok(model.with_damping(damping))
    }
}

/// Single-DOF Duffing oscillator `x'' + 2ξω x' + ω² x + κ x³ = F cos Ωt`.
pub fn duffing(omega: f64, xi: f64, kappa: f64, force: f64) -> Result<AssembledModel> {
    let mut ops = LocalOperators::zeros(1);
    ops.me[0] = 1.0;
    ops.ke[0] = omega * omega;
    ops.f3[0] = kappa;
    let comp = Component { dofs: vec![Some(0)], ops: Arc::new(ops) };
    let model = AssembledModel::new(1, vec![comp], vec![1.0], vec![force], vec![0])?;
    Ok(model.with_damping(Rayleigh { alpha: 2.0 * xi * omega, beta: 0.0 }))
}
