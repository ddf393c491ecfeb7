//! Finite-difference verification of the design gradients.

use crate::error::{Error, Result};
use crate::optimize::{Evaluator, Gradients, Quantities, Wanted};
use serde::Serialize;

#[derive(Debug, Clone, Serialize)]
pub struct GradientCheckRow {
    pub quantity: String,
    pub element: usize,
    pub analytic: f64,
    pub fd: f64,
    pub rel_err: f64,
}

type Getter = Box<dyn Fn(&Quantities) -> Option<f64>>;
type GradGetter = Box<dyn Fn(&Gradients) -> Option<Vec<f64>>>;

fn probes(n_other: usize) -> Vec<(String, Getter, GradGetter)> {
    let mut v: Vec<(String, Getter, GradGetter)> = vec![
        ("omega1".into(), Box::new(|q| Some(q.omega1)), Box::new(|g| Some(g.omega1.clone()))),
        ("omega2".into(), Box::new(|q| Some(q.omega2)), Box::new(|g| Some(g.omega2.clone()))),
        ("re_lambda".into(), Box::new(|q| Some(q.lambda.re)), Box::new(|g| Some(g.lambda.iter().map(|z| z.re).collect()))),
        ("im_lambda".into(), Box::new(|q| Some(q.lambda.im)), Box::new(|g| Some(g.lambda.iter().map(|z| z.im).collect()))),
        ("re_gamma".into(), Box::new(|q| Some(q.gamma.re)), Box::new(|g| Some(g.gamma.iter().map(|z| z.re).collect()))),
        ("im_gamma".into(), Box::new(|q| Some(q.gamma.im)), Box::new(|g| Some(g.gamma.iter().map(|z| z.im).collect()))),
        ("re_f_tilde".into(), Box::new(|q| Some(q.f_tilde.re)), Box::new(|g| Some(g.f_tilde.iter().map(|z| z.re).collect()))),
        ("im_f_tilde".into(), Box::new(|q| Some(q.f_tilde.im)), Box::new(|g| Some(g.f_tilde.iter().map(|z| z.im).collect()))),
        ("rho_max".into(), Box::new(|q| q.rho_max), Box::new(|g| g.rho_max.clone())),
        ("b".into(), Box::new(|q| q.b.filter(|&b| b != 0.0)), Box::new(|g| g.b.clone())),
        ("c_lin".into(), Box::new(|q| q.c_lin), Box::new(|g| g.c_lin.clone())),
        ("area".into(), Box::new(|q| Some(q.area)), Box::new(|g| Some(g.area.clone()))),
    ];
    for k in 0..n_other {
        v.push((
            format!("omega_other_{}", k + 1),
            Box::new(move |q| q.omega_other.get(k).copied()),
            Box::new(move |g| g.omega_other.get(k).cloned()),
        ));
    }
    v
}

/// Step of the fourth-order stencil. Its truncation error is O(h⁴); smaller
/// steps are dominated by round-off in Im γ.
pub const DEFAULT_STEP: f64 = 1e-3;

/// Compares every analytic gradient with fourth-order central differences
/// of step `h` in μ at the given elements. The relative error is taken
/// against `max(|fd|, 1e-2·max_e |analytic|)` so entries near zero are
/// judged on the scale of the whole gradient.
pub fn check_gradients(ev: &Evaluator, mu: &[f64], eps: f64, elements: &[usize], h: f64) -> Result<Vec<GradientCheckRow>> {
    let want = Wanted { rho_max: true, cusp: true, linear: true, gradients: true };
    let (q0, g, _) = ev.quantities(mu, eps, want)?;
    let g = g.expect("gradients requested");
    let probes = probes(q0.omega_other.len().min(g.omega_other.len()));
    let values = |m: &[f64]| ev.quantities(m, eps, Wanted { gradients: false, ..want }).map(|r| r.0);
    let mut rows = Vec::new();
    for &e in elements {
        if e >= mu.len() {
            return Err(Error::invalid(format!("element {e} out of range ({} elements)", mu.len())));
        }
        let shifted = |d: f64| {
            let mut m = mu.to_vec();
            m[e] += d;
            values(&m)
        };
        let (p1, m1, p2, m2) = (shifted(h)?, shifted(-h)?, shifted(2.0 * h)?, shifted(-2.0 * h)?);
        for (name, get, grad) in &probes {
            let (Some(_), Some(an)) = (get(&q0), grad(&g)) else { continue };
            let pts: Option<Vec<f64>> = [&p1, &m1, &p2, &m2].iter().map(|q| get(q)).collect();
            let Some(p) = pts else { continue };
            let fd = (8.0 * (p[0] - p[1]) - (p[2] - p[3])) / (12.0 * h);
            let scale = an.iter().fold(0.0f64, |a, x| a.max(x.abs()));
            let denom = fd.abs().max(1e-2 * scale).max(f64::MIN_POSITIVE);
            rows.push(GradientCheckRow { quantity: name.clone(), element: e, analytic: an[e], fd, rel_err: (an[e] - fd).abs() / denom });
        }
    }
    Ok(rows)
}
