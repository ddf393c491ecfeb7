//! Design variables → filtered → projected → physical densities, and back.

use crate::error::{Error, Result};
use crate::fe::Mesh;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineParams {
    /// Filter radius in element sizes.
    pub radius: f64,
    /// Projection steepness σ.
    pub sigma: f64,
    /// Projection threshold η.
    pub eta: f64,
    /// SIMP exponent p.
    pub penal: f64,
    /// Lower bound μ̂₀ of the physical density.
    pub mu_min: f64,
}

impl Default for PipelineParams {
    fn default() -> Self {
        PipelineParams { radius: 4.0, sigma: 10.0, eta: 0.5, penal: 1.0, mu_min: 1e-6 }
    }
}

/// Linear density filter in compressed-row form; rows sum to one.
#[derive(Debug, Clone)]
pub struct DensityFilter {
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    weights: Vec<f64>,
}

impl DensityFilter {
    pub fn new(mesh: &Mesh, radius: f64) -> Result<Self> {
        if !(radius >= 1.0) {
            return Err(Error::invalid(format!("filter radius {radius} must be at least one element")));
        }
        let (nx, ny) = (mesh.nx as isize, mesh.ny as isize);
        let reach = radius.ceil() as isize;
        let mut row_ptr = vec![0];
        let mut cols = Vec::new();
        let mut weights = Vec::new();
        for ix in 0..nx {
            for iy in 0..ny {
                let start = cols.len();
                let mut total = 0.0;
                for jx in (ix - reach).max(0)..(ix + reach + 1).min(nx) {
                    for jy in (iy - reach).max(0)..(iy + reach + 1).min(ny) {
                        let d = (((jx - ix).pow(2) + (jy - iy).pow(2)) as f64).sqrt();
                        if d < radius {
                            cols.push((jx * ny + jy) as usize);
                            weights.push(radius - d);
                            total += radius - d;
                        }
                    }
                }
                weights[start..].iter_mut().for_each(|w| *w /= total);
                row_ptr.push(cols.len());
            }
        }
        Ok(DensityFilter { row_ptr, cols, weights })
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.row_ptr.len() - 1)
            .map(|e| {
                let r = self.row_ptr[e]..self.row_ptr[e + 1];
                self.cols[r.clone()].iter().zip(&self.weights[r]).map(|(&j, &w)| w * x[j]).sum()
            })
            .collect()
    }

    pub fn apply_transpose(&self, y: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; y.len()];
        for (e, &ye) in y.iter().enumerate() {
            let r = self.row_ptr[e]..self.row_ptr[e + 1];
            for (&j, &w) in self.cols[r.clone()].iter().zip(&self.weights[r]) {
                x[j] += w * ye;
            }
        }
        x
    }

    /// Normalized weight of `j` in row `e`.
    pub fn weight(&self, e: usize, j: usize) -> f64 {
        let r = self.row_ptr[e]..self.row_ptr[e + 1];
        self.cols[r.clone()].iter().zip(&self.weights[r]).find(|(&c, _)| c == j).map_or(0.0, |(_, &w)| w)
    }
}

/// Heaviside-type projection.
pub fn project(mu_tilde: f64, sigma: f64, eta: f64) -> f64 {
    let den = (sigma * eta).tanh() + (sigma * (1.0 - eta)).tanh();
    ((sigma * eta).tanh() + (sigma * (mu_tilde - eta)).tanh()) / den
}

pub fn project_derivative(mu_tilde: f64, sigma: f64, eta: f64) -> f64 {
    let den = (sigma * eta).tanh() + (sigma * (1.0 - eta)).tanh();
    let t = (sigma * (mu_tilde - eta)).tanh();
    sigma * (1.0 - t * t) / den
}

pub fn interpolate(mu_bar: f64, penal: f64, mu_min: f64) -> f64 {
    mu_min + (1.0 - mu_min) * mu_bar.powf(penal)
}

/// All four density fields for one forward pass, tagged with the parameters
/// used so that stale fields are detected.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignField {
    pub mu: Vec<f64>,
    pub mu_tilde: Vec<f64>,
    pub mu_bar: Vec<f64>,
    pub mu_hat: Vec<f64>,
    pub params: PipelineParams,
}

#[derive(Debug, Clone)]
pub struct DensityPipeline {
    pub filter: DensityFilter,
    pub non_design: Vec<bool>,
    pub params: PipelineParams,
}

impl DensityPipeline {
    pub fn new(mesh: &Mesh, params: PipelineParams) -> Result<Self> {
        if !(params.sigma > 0.0) || !(params.eta > 0.0 && params.eta < 1.0) || !(params.penal >= 1.0) {
            return Err(Error::invalid(format!("invalid pipeline parameters {params:?}")));
        }
        Ok(DensityPipeline { filter: DensityFilter::new(mesh, params.radius)?, non_design: mesh.non_design.clone(), params })
    }

    pub fn n_elements(&self) -> usize {
        self.non_design.len()
    }

    pub fn n_design(&self) -> usize {
        self.non_design.iter().filter(|&&b| !b).count()
    }

    /// Changes σ or p; the filter radius is fixed at construction.
    pub fn set_params(&mut self, params: PipelineParams) -> Result<()> {
        if params.radius != self.params.radius {
            return Err(Error::invalid("filter radius cannot change after construction"));
        }
        self.params = params;
        Ok(())
    }

    pub fn forward(&self, mu: &[f64]) -> Result<DesignField> {
        let n = self.n_elements();
        if mu.len() != n {
            return Err(Error::Dimension { expected: n, got: mu.len() });
        }
        let p = &self.params;
        let mu: Vec<f64> =
            mu.iter().zip(&self.non_design).map(|(&v, &nd)| if nd { 1.0 } else { v.clamp(0.0, 1.0) }).collect();
        let mu_tilde = self.filter.apply(&mu);
        let mu_bar: Vec<f64> = mu_tilde
            .iter()
            .zip(&self.non_design)
            .map(|(&t, &nd)| if nd { 1.0 } else { project(t, p.sigma, p.eta).clamp(0.0, 1.0) })
            .collect();
        let mu_hat: Vec<f64> = mu_bar
            .iter()
            .zip(&self.non_design)
            .map(|(&b, &nd)| if nd { 1.0 } else { interpolate(b, p.penal, p.mu_min) })
            .collect();
        Ok(DesignField { mu, mu_tilde, mu_bar, mu_hat, params: *p })
    }

    fn check(&self, field: &DesignField, grad: &[f64]) -> Result<()> {
        if field.params != self.params {
            return Err(Error::StaleCache);
        }
        if grad.len() != self.n_elements() {
            return Err(Error::Dimension { expected: self.n_elements(), got: grad.len() });
        }
        Ok(())
    }

    /// Chain rule from `dJ/dμ̄` to `dJ/dμ`.
    pub fn backprop_bar(&self, field: &DesignField, dj_dbar: &[f64]) -> Result<Vec<f64>> {
        self.check(field, dj_dbar)?;
        let p = &self.params;
        let g_tilde: Vec<f64> = dj_dbar
            .iter()
            .zip(&field.mu_tilde)
            .zip(&self.non_design)
            .map(|((&g, &t), &nd)| if nd { 0.0 } else { g * project_derivative(t, p.sigma, p.eta) })
            .collect();
        let mut g = self.filter.apply_transpose(&g_tilde);
        for (gi, &nd) in g.iter_mut().zip(&self.non_design) {
            if nd {
                *gi = 0.0;
            }
        }
        Ok(g)
    }

    /// Chain rule from `dJ/dμ̂` to `dJ/dμ`.
    pub fn backprop(&self, field: &DesignField, dj_dhat: &[f64]) -> Result<Vec<f64>> {
        self.check(field, dj_dhat)?;
        let p = &self.params;
        let g_bar: Vec<f64> = dj_dhat
            .iter()
            .zip(&field.mu_bar)
            .map(|(&g, &b)| g * p.penal * (1.0 - p.mu_min) * b.powf(p.penal - 1.0))
            .collect();
        self.backprop_bar(field, &g_bar)
    }

    /// Mean projected density over design elements and its gradient w.r.t. μ.
    pub fn area_fraction(&self, field: &DesignField) -> Result<(f64, Vec<f64>)> {
        let nd = self.n_design().max(1) as f64;
        let a = field.mu_bar.iter().zip(&self.non_design).filter(|(_, &n)| !n).map(|(&b, _)| b).sum::<f64>() / nd;
        let seed: Vec<f64> = self.non_design.iter().map(|&n| if n { 0.0 } else { 1.0 / nd }).collect();
        Ok((a, self.backprop_bar(field, &seed)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fe::{MeshSpec, Rect};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mesh(nx: usize, ny: usize) -> Mesh {
        Mesh::build(&MeshSpec::beam(nx, ny, 5.0)).unwrap()
    }

    #[test]
    fn uniform_field_is_preserved() {
        let m = mesh(12, 6);
        let f = DensityFilter::new(&m, 4.0).unwrap();
        for v in f.apply(&vec![0.37; 72]) {
            assert!((v - 0.37).abs() < 1e-15);
        }
    }

    #[test]
    fn single_element_stencil_by_hand() {
        let m = mesh(9, 9);
        let f = DensityFilter::new(&m, 2.0).unwrap();
        let e = 4 * 9 + 4;
        let mut x = vec![0.0; 81];
        x[e] = 1.0;
        // self 2, four edge neighbours 1, four diagonal neighbours 2-√2
        let total = 2.0 + 4.0 + 4.0 * (2.0 - 2f64.sqrt());
        assert!((f.apply(&x)[e] - 2.0 / total).abs() < 1e-15);
    }

    #[test]
    fn projection_endpoints_and_threshold() {
        for sigma in [1.0, 10.0, 160.0] {
            assert!(project(0.0, sigma, 0.5).abs() < 1e-15);
            assert!((project(1.0, sigma, 0.5) - 1.0).abs() < 1e-15);
            let t = (sigma * 0.5f64).tanh();
            assert!((project(0.5, sigma, 0.5) - t / (2.0 * t)).abs() < 1e-15);
        }
        assert_eq!(interpolate(0.0, 3.0, 1e-6), 1e-6);
        assert_eq!(interpolate(1.0, 3.0, 1e-6), 1.0);
        assert!((interpolate(0.5, 3.0, 1e-6) - (1e-6 + (1.0 - 1e-6) * 0.125)).abs() < 1e-16);
    }

    #[test]
    fn non_design_pinned_and_zero_gradient() {
        let mut spec = MeshSpec::beam(10, 4, 5.0);
        spec.non_design.push(Rect { x0: 40.0, y0: 0.0, x1: 50.0, y1: 20.0 });
        let m = Mesh::build(&spec).unwrap();
        let pipe = DensityPipeline::new(&m, PipelineParams { radius: 2.0, penal: 3.0, ..Default::default() }).unwrap();
        let field = pipe.forward(&vec![0.3; 40]).unwrap();
        let g = pipe.backprop(&field, &vec![1.0; 40]).unwrap();
        for e in 0..40 {
            if m.non_design[e] {
                assert_eq!(field.mu_hat[e], 1.0);
                assert_eq!(g[e], 0.0);
            }
        }
        let (a, _) = pipe.area_fraction(&pipe.forward(&vec![1.0; 40]).unwrap()).unwrap();
        assert!((a - 1.0).abs() < 1e-14);
    }

    #[test]
    fn near_identity_chain() {
        let m = mesh(6, 3);
        let pipe = DensityPipeline::new(&m, PipelineParams { radius: 1.0, sigma: 1e-4, penal: 1.0, ..Default::default() })
            .unwrap();
        let field = pipe.forward(&vec![0.5; 18]).unwrap();
        let mut seed = vec![0.0; 18];
        seed[7] = 1.0;
        let g = pipe.backprop(&field, &seed).unwrap();
        // dμ̄/dμ̃ at σ→0 is 1 (normalized slope), filter with R=1 is the identity
        assert!((g[7] - (1.0 - 1e-6)).abs() < 1e-6);
    }

    #[test]
    fn stale_cache_rejected() {
        let m = mesh(4, 2);
        let mut pipe = DensityPipeline::new(&m, PipelineParams::default()).unwrap();
        let field = pipe.forward(&[0.5; 8]).unwrap();
        pipe.set_params(PipelineParams { penal: 2.0, ..PipelineParams::default() }).unwrap();
        assert!(matches!(pipe.backprop(&field, &[1.0; 8]), Err(Error::StaleCache)));
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let mut spec = MeshSpec::beam(8, 4, 5.0);
        spec.non_design.push(Rect { x0: 35.0, y0: 0.0, x1: 40.0, y1: 10.0 });
        let m = Mesh::build(&spec).unwrap();
        let pipe =
            DensityPipeline::new(&m, PipelineParams { radius: 2.5, sigma: 5.0, eta: 0.5, penal: 3.0, mu_min: 1e-6 })
                .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let mu: Vec<f64> = (0..32).map(|_| rng.random_range(0.05..0.95)).collect();
            let w: Vec<f64> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
            let j = |mu: &[f64]| -> f64 { pipe.forward(mu).unwrap().mu_hat.iter().zip(&w).map(|(a, b)| a * b).sum() };
            let g = pipe.backprop(&pipe.forward(&mu).unwrap(), &w).unwrap();
            let e = rng.random_range(0..32);
            if m.non_design[e] {
                continue;
            }
            let h = 1e-6;
            let mut p = mu.clone();
            let mut q = mu.clone();
            p[e] += h;
            q[e] -= h;
            let fd = (j(&p) - j(&q)) / (2.0 * h);
            assert!((fd - g[e]).abs() <= 1e-7 * g[e].abs().max(1e-3), "{fd} {}", g[e]);
        }
    }
}
