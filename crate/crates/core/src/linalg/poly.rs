//! Real polynomial roots via companion-matrix eigenvalues with Newton polish.

use nalgebra::DMatrix;
use num_complex::Complex64;

/// Evaluates `Σ c_k x^k` (ascending coefficients) by Horner's rule.
pub fn eval<T>(coeffs: &[f64], x: T) -> T
where
    T: Copy + std::ops::Mul<Output = T> + std::ops::Add<f64, Output = T> + From<f64>,
{
    let mut acc = T::from(0.0);
    for &c in coeffs.iter().rev() {
        acc = acc * x + c;
    }
    acc
}

fn eval_c(coeffs: &[f64], x: Complex64) -> (Complex64, Complex64) {
    let mut p = Complex64::new(0.0, 0.0);
    let mut dp = Complex64::new(0.0, 0.0);
    for &c in coeffs.iter().rev() {
        dp = dp * x + p;
        p = p * x + c;
    }
    (p, dp)
}

/// All complex roots of the polynomial with ascending coefficients.
///
/// The variable is rescaled by the Fujiwara root bound before forming the
/// companion matrix; `scale` only sets the realness tolerance in
/// [`real_roots`]. Exactly vanishing leading coefficients are dropped.
pub fn roots(coeffs: &[f64], _scale: f64) -> Vec<Complex64> {
    let mut c: Vec<f64> = coeffs.to_vec();
    while c.len() > 1 && *c.last().unwrap() == 0.0 {
        c.pop();
    }
    if c.iter().all(|&v| v == 0.0) {
        return Vec::new();
    }
    let n = c.len() - 1;
    let lead = c[n];
    let bound = (0..n).map(|k| (c[k] / lead).abs().powf(1.0 / (n - k) as f64)).fold(0.0f64, f64::max);
    let s = if bound > 0.0 && bound.is_finite() { 2.0 * bound } else { 1.0 };
    for (k, v) in c.iter_mut().enumerate() {
        *v *= s.powi(k as i32);
    }
    let mut zero_roots = 0;
    while c.len() > 1 && c[0] == 0.0 {
        c.remove(0);
        zero_roots += 1;
    }
    let deg = c.len() - 1;
    let mut out = vec![Complex64::new(0.0, 0.0); zero_roots];
    if deg == 0 {
        return out;
    }
    let lead = c[deg];
    let mut comp = DMatrix::<f64>::zeros(deg, deg);
    for i in 1..deg {
        comp[(i, i - 1)] = 1.0;
    }
    for i in 0..deg {
        comp[(i, deg - 1)] = -c[i] / lead;
    }
    for mut z in comp.complex_eigenvalues().iter().copied() {
        for _ in 0..8 {
            let (p, dp) = eval_c(&c, z);
            if dp.norm() == 0.0 {
                break;
            }
            let step = p / dp;
            let znew = z - step;
            if eval_c(&c, znew).0.norm() < p.norm() {
                z = znew;
            } else {
                break;
            }
        }
        out.push(z * s);
    }
    out
}

/// Real roots (imaginary part below `1e-9·max(scale, |z|)`), sorted ascending.
pub fn real_roots(coeffs: &[f64], scale: f64) -> Vec<f64> {
    let scale = if scale > 0.0 { scale } else { 0.0 };
    let mut r: Vec<f64> = roots(coeffs, scale)
        .into_iter()
        .filter(|z| z.im.abs() <= 1e-9 * scale.max(z.norm()))
        .map(|z| z.re)
        .collect();
    r.sort_by(|a, b| a.partial_cmp(b).unwrap());
    r
}
