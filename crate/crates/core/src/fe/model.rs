//! Assembled model as a weighted sum of components.
//!
//! Each component carries local operators and a map from local to free DOFs.
//! For the finite element mesh every component is one element sharing a single
//! reference operator set; small hand-built systems use the same structure, so
//! every analysis and sensitivity routine works on both.

use super::element::LocalOperators;
use crate::error::{Error, Result};
use crate::linalg::{BandLu, BandMatrix, Scalar, SymBand};
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

#[derive(Debug, Clone)]
pub struct Component {
    /// Local DOF → free DOF (`None` for constrained DOFs).
    pub dofs: Vec<Option<usize>>,
    pub ops: Arc<LocalOperators>,
}

impl Component {
    pub fn gather<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        self.dofs.iter().map(|d| d.map_or(T::zero(), |i| x[i])).collect()
    }

    fn scatter<T: Scalar>(&self, local: &[T], out: &mut [T]) {
        for (d, &v) in self.dofs.iter().zip(local) {
            if let Some(i) = d {
                out[*i] += v;
            }
        }
    }
}

/// Rayleigh damping constants, `C = αM + βK`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Rayleigh {
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Debug, Clone)]
pub struct AssembledModel {
    pub n: usize,
    pub components: Vec<Component>,
    /// Physical density of each component.
    pub weights: Vec<f64>,
    pub m: SymBand,
    pub k: SymBand,
    pub f_ext: Vec<f64>,
    /// Free DOF indices selected for output (the diagonal of L).
    pub outputs: Vec<usize>,
    pub damping: Rayleigh,
}

const PAR_THRESHOLD: usize = 64;

impl AssembledModel {
    pub fn new(
        n: usize,
        components: Vec<Component>,
        weights: Vec<f64>,
        f_ext: Vec<f64>,
        outputs: Vec<usize>,
    ) -> Result<Self> {
        if weights.len() != components.len() {
            return Err(Error::Dimension { expected: components.len(), got: weights.len() });
        }
        if f_ext.len() != n {
            return Err(Error::Dimension { expected: n, got: f_ext.len() });
        }
        if let Some(&o) = outputs.iter().find(|&&o| o >= n) {
            return Err(Error::invalid(format!("output DOF {o} out of range")));
        }
        let mut kd = 0;
        for c in &components {
            if c.dofs.len() != c.ops.nd {
                return Err(Error::Dimension { expected: c.ops.nd, got: c.dofs.len() });
            }
            let free: Vec<usize> = c.dofs.iter().flatten().copied().collect();
            if let (Some(lo), Some(hi)) = (free.iter().min(), free.iter().max()) {
                if *hi >= n {
                    return Err(Error::invalid(format!("component DOF {hi} out of range")));
                }
                kd = kd.max(hi - lo);
            }
        }
        let mut m = SymBand::zeros(n, kd);
        let mut k = SymBand::zeros(n, kd);
        for (c, &w) in components.iter().zip(&weights) {
            let nd = c.ops.nd;
            for (a, da) in c.dofs.iter().enumerate() {
                let Some(i) = *da else { continue };
                for (b, db) in c.dofs.iter().enumerate().take(a + 1) {
                    let Some(j) = *db else { continue };
                    let (mv, kv) = (c.ops.me[a * nd + b], c.ops.ke[a * nd + b]);
                    if mv != 0.0 {
                        m.add(i, j, w * mv);
                    }
                    if kv != 0.0 {
                        k.add(i, j, w * kv);
                    }
                    if a != b && i == j {
                        // two local DOFs on one global DOF: the (b, a) term lands here too
                        m.add(i, j, w * mv);
                        k.add(i, j, w * kv);
                    }
                }
            }
        }
        Ok(AssembledModel { n, components, weights, m, k, f_ext, outputs, damping: Rayleigh::default() })
    }

    pub fn with_damping(mut self, damping: Rayleigh) -> Self {
        self.damping = damping;
        self
    }

    /// Factors K and rejects the model if it is singular.
    pub fn check_stiffness(&self) -> Result<BandLu<f64>> {
        SymBand::combine(&[(1.0, &self.k)]).lu("stiffness after boundary conditions")
    }

    pub fn c_matvec<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let mx = self.m.matvec(x);
        let kx = self.k.matvec(x);
        mx.iter().zip(&kx).map(|(&a, &b)| a * self.damping.alpha + b * self.damping.beta).collect()
    }

    /// Band matrix `a_m M + a_c C + a_k K`.
    pub fn pencil<T: Scalar>(&self, a_m: T, a_c: T, a_k: T) -> BandMatrix<T> {
        let Rayleigh { alpha, beta } = self.damping;
        SymBand::combine(&[(a_m + a_c * alpha, &self.m), (a_k + a_c * beta, &self.k)])
    }

    fn accumulate<T, F>(&self, f: F) -> Vec<T>
    where
        T: Scalar,
        F: Fn(&Component) -> Vec<T> + Sync,
    {
        let locals: Vec<Vec<T>> = if self.components.len() >= PAR_THRESHOLD {
            self.components.par_iter().map(&f).collect()
        } else {
            self.components.iter().map(&f).collect()
        };
        let mut out = vec![T::zero(); self.n];
        for ((c, l), &w) in self.components.iter().zip(&locals).zip(&self.weights) {
            let scaled: Vec<T> = l.iter().map(|&v| v * w).collect();
            c.scatter(&scaled, &mut out);
        }
        out
    }

    fn check_len(&self, v: &[impl Sized]) -> Result<()> {
        if v.len() != self.n {
            return Err(Error::Dimension { expected: self.n, got: v.len() });
        }
        Ok(())
    }

    /// `f2(a, b)_i = Σ F2_ijk a_j b_k`.
    pub fn f2<T: Scalar>(&self, a: &[T], b: &[T]) -> Result<Vec<T>> {
        self.check_len(a)?;
        self.check_len(b)?;
        Ok(self.accumulate(|c| local_f2(&c.ops, &c.gather(a), &c.gather(b))))
    }

    /// `f3(a, b, c)_i = Σ F3_ijkl a_j b_k c_l`.
    pub fn f3<T: Scalar>(&self, a: &[T], b: &[T], cc: &[T]) -> Result<Vec<T>> {
        self.check_len(a)?;
        self.check_len(b)?;
        self.check_len(cc)?;
        Ok(self.accumulate(|c| local_f3(&c.ops, &c.gather(a), &c.gather(b), &c.gather(cc))))
    }

    /// Gradient of `yᵀ f2(x, b)` with respect to `x`: `Σ_i y_i F2_ijk b_k`.
    pub fn f2_adj<T: Scalar>(&self, y: &[T], b: &[T]) -> Result<Vec<T>> {
        self.check_len(y)?;
        self.check_len(b)?;
        Ok(self.accumulate(|c| local_f2_adj(&c.ops, &c.gather(y), &c.gather(b))))
    }

    /// Gradient of `yᵀ f3(x, b, c)` with respect to `x`.
    pub fn f3_adj<T: Scalar>(&self, y: &[T], b: &[T], cc: &[T]) -> Result<Vec<T>> {
        self.check_len(y)?;
        self.check_len(b)?;
        self.check_len(cc)?;
        Ok(self.accumulate(|c| local_f3_adj(&c.ops, &c.gather(y), &c.gather(b), &c.gather(cc))))
    }

    /// Full internal force `K x + f2(x,x) + f3(x,x,x)`.
    pub fn internal_force(&self, x: &[f64]) -> Vec<f64> {
        let mut f = self.k.matvec(x);
        let nl = self.accumulate(|c| {
            let u = c.gather(x);
            let q = local_f2(&c.ops, &u, &u);
            let r = local_f3(&c.ops, &u, &u, &u);
            q.iter().zip(&r).map(|(a, b)| a + b).collect()
        });
        for (a, b) in f.iter_mut().zip(&nl) {
            *a += b;
        }
        f
    }

    /// Dense tangent `∂/∂x [K x + f2(x,x) + f3(x,x,x)]`; intended for small systems.
    pub fn tangent_dense(&self, x: &[f64]) -> DMatrix<f64> {
        let mut t = self.k.to_dense();
        for (c, &w) in self.components.iter().zip(&self.weights) {
            let nd = c.ops.nd;
            let u = c.gather(x);
            for a in 0..nd {
                let Some(i) = c.dofs[a] else { continue };
                for b in 0..nd {
                    let Some(j) = c.dofs[b] else { continue };
                    let mut s = 0.0;
                    for k in 0..nd {
                        s += (c.ops.f2[(a * nd + b) * nd + k] + c.ops.f2[(a * nd + k) * nd + b]) * u[k];
                        for l in 0..nd {
                            let ukl = u[k] * u[l];
                            s += (c.ops.f3[((a * nd + b) * nd + k) * nd + l]
                                + c.ops.f3[((a * nd + k) * nd + b) * nd + l]
                                + c.ops.f3[((a * nd + k) * nd + l) * nd + b])
                                * ukl;
                        }
                    }
                    t[(i, j)] += w * s;
                }
            }
        }
        t
    }

    /// Per-component values of a local functional, unweighted (i.e. the
    /// derivative of a weighted-sum quantity with respect to each weight).
    pub fn per_component<T, F>(&self, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(&Component) -> T + Sync + Send,
    {
        if self.components.len() >= PAR_THRESHOLD {
            self.components.par_iter().map(f).collect()
        } else {
            self.components.iter().map(f).collect()
        }
    }

    /// Same model with new component weights (mass/stiffness reassembled).
    pub fn reweighted(&self, weights: Vec<f64>) -> Result<Self> {
        let m = AssembledModel::new(self.n, self.components.clone(), weights, self.f_ext.clone(), self.outputs.clone())?;
        Ok(m.with_damping(self.damping))
    }
}

/// `aᵀ A b` for a dense row-major local matrix.
pub fn local_form<T: Scalar>(mat: &[f64], a: &[T], b: &[T]) -> T {
    let nd = a.len();
    let mut s = T::zero();
    for i in 0..nd {
        if a[i] == T::zero() {
            continue;
        }
        let mut r = T::zero();
        for j in 0..nd {
            r += b[j] * mat[i * nd + j];
        }
        s += a[i] * r;
    }
    s
}

pub fn local_f2<T: Scalar>(ops: &LocalOperators, a: &[T], b: &[T]) -> Vec<T> {
    let nd = ops.nd;
    let mut out = vec![T::zero(); nd];
    for (i, o) in out.iter_mut().enumerate() {
        let mut s = T::zero();
        for j in 0..nd {
            let mut r = T::zero();
            let base = (i * nd + j) * nd;
            for k in 0..nd {
                r += b[k] * ops.f2[base + k];
            }
            s += a[j] * r;
        }
        *o = s;
    }
    out
}

pub fn local_f2_adj<T: Scalar>(ops: &LocalOperators, y: &[T], b: &[T]) -> Vec<T> {
    let nd = ops.nd;
    let mut out = vec![T::zero(); nd];
    for i in 0..nd {
        if y[i] == T::zero() {
            continue;
        }
        for (j, o) in out.iter_mut().enumerate() {
            let base = (i * nd + j) * nd;
            let mut r = T::zero();
            for k in 0..nd {
                r += b[k] * ops.f2[base + k];
            }
            *o += y[i] * r;
        }
    }
    out
}

pub fn local_f3<T: Scalar>(ops: &LocalOperators, a: &[T], b: &[T], c: &[T]) -> Vec<T> {
    let nd = ops.nd;
    let mut bc = vec![T::zero(); nd * nd];
    for k in 0..nd {
        for l in 0..nd {
            bc[k * nd + l] = b[k] * c[l];
        }
    }
    let mut out = vec![T::zero(); nd];
    for (i, o) in out.iter_mut().enumerate() {
        let mut s = T::zero();
        for j in 0..nd {
            if a[j] == T::zero() {
                continue;
            }
            let base = (i * nd + j) * nd * nd;
            let mut r = T::zero();
            for (kl, &v) in bc.iter().enumerate() {
                r += v * ops.f3[base + kl];
            }
            s += a[j] * r;
        }
        *o = s;
    }
    out
}

pub fn local_f3_adj<T: Scalar>(ops: &LocalOperators, y: &[T], b: &[T], c: &[T]) -> Vec<T> {
    let nd = ops.nd;
    let mut bc = vec![T::zero(); nd * nd];
    for k in 0..nd {
        for l in 0..nd {
            bc[k * nd + l] = b[k] * c[l];
        }
    }
    let mut out = vec![T::zero(); nd];
    for i in 0..nd {
        if y[i] == T::zero() {
            continue;
        }
        for (j, o) in out.iter_mut().enumerate() {
            let base = (i * nd + j) * nd * nd;
            let mut r = T::zero();
            for (kl, &v) in bc.iter().enumerate() {
                r += v * ops.f3[base + kl];
            }
            *o += y[i] * r;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{dot, to_complex};
    use num_complex::Complex64;

    /// Two masses, ground springs, quadratic and cubic coupling terms
    /// derived from a potential so that the tensors are fully symmetric.
    fn tiny() -> AssembledModel {
        let mut ops = LocalOperators::zeros(2);
        ops.me = vec![1.0, 0.0, 0.0, 2.0];
        ops.ke = vec![3.0, -1.0, -1.0, 2.0];
        ops.f2[0] = 0.7; // x0^3 potential
        ops.f2[1] = 0.2;
        ops.f2[2] = 0.2;
        ops.f2[4] = 0.2;
        ops.f3[0] = 1.5;
        ops.f3[15] = -0.4;
        let comp = Component { dofs: vec![Some(0), Some(1)], ops: Arc::new(ops) };
        AssembledModel::new(2, vec![comp], vec![1.0], vec![1.0, 0.0], vec![0]).unwrap()
    }

    #[test]
    fn contractions_are_multilinear_and_symmetric() {
        let m = tiny();
        let a = [0.3, -0.5];
        let b = [1.2, 0.4];
        let ab = m.f2(&a, &b).unwrap();
        let ba = m.f2(&b, &a).unwrap();
        assert!((ab[0] - ba[0]).abs() < 1e-15 && (ab[1] - ba[1]).abs() < 1e-15);
        assert_eq!(m.f2(&[0.0, 0.0], &b).unwrap(), vec![0.0, 0.0]);
        let ac: Vec<Complex64> = to_complex(&a).iter().map(|v| v * Complex64::new(0.0, 2.0)).collect();
        let abc = m.f2(&ac, &to_complex(&b)).unwrap();
        assert!((abc[0] - Complex64::new(0.0, 2.0 * ab[0])).norm() < 1e-15);
        assert!(m.f2(&[1.0], &b).is_err());
    }

    #[test]
    fn adjoint_contractions_are_transposes() {
        let m = tiny();
        let (y, a, b, c) = ([0.4, -1.1], [0.3, -0.5], [1.2, 0.4], [-0.7, 0.9]);
        let lhs = dot(&y, &m.f2(&a, &b).unwrap());
        let rhs = dot(&a, &m.f2_adj(&y, &b).unwrap());
        assert!((lhs - rhs).abs() < 1e-14);
        let lhs = dot(&y, &m.f3(&a, &b, &c).unwrap());
        let rhs = dot(&a, &m.f3_adj(&y, &b, &c).unwrap());
        assert!((lhs - rhs).abs() < 1e-14);
    }

    #[test]
    fn tangent_matches_finite_differences() {
        let m = tiny();
        let x = [0.2, -0.3];
        let t = m.tangent_dense(&x);
        let h = 1e-6;
        for j in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[j] += h;
            xm[j] -= h;
            let (fp, fm) = (m.internal_force(&xp), m.internal_force(&xm));
            for i in 0..2 {
                let fd = (fp[i] - fm[i]) / (2.0 * h);
                assert!((fd - t[(i, j)]).abs() < 1e-8, "{i}{j}");
            }
        }
    }
}
