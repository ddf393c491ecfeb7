//! Banded storage and a partial-pivoting band LU.
//!
//! `SymBand` holds the lower band of a real symmetric matrix and is used for
//! the assembled mass and stiffness. Shifted combinations `a·M + b·K` are
//! copied into a general `BandMatrix<T>` and factored with the LAPACK
//! `gbtf2` scheme, which keeps the factor inside `2·kl + ku + 1` rows.

use super::scalar::Scalar;
use crate::error::{Error, Result};
use std::sync::atomic::{AtomicUsize, Ordering};

static SOLVES: AtomicUsize = AtomicUsize::new(0);
static FACTORIZATIONS: AtomicUsize = AtomicUsize::new(0);

/// Number of band triangular solves performed so far (all threads).
pub fn solve_count() -> usize {
    SOLVES.load(Ordering::Relaxed)
}

/// Number of band factorizations performed so far (all threads).
pub fn factorization_count() -> usize {
    FACTORIZATIONS.load(Ordering::Relaxed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SymBand {
    n: usize,
    kd: usize,
    data: Vec<f64>,
}

impl SymBand {
    pub fn zeros(n: usize, kd: usize) -> Self {
        let kd = kd.min(n.saturating_sub(1));
        SymBand { n, kd, data: vec![0.0; n * (kd + 1)] }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn bandwidth(&self) -> usize {
        self.kd
    }

    #[inline]
    fn slot(&self, i: usize, j: usize) -> Option<usize> {
        let (r, c) = if i >= j { (i, j) } else { (j, i) };
        (r - c <= self.kd).then(|| c * (self.kd + 1) + (r - c))
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.slot(i, j).map_or(0.0, |s| self.data[s])
    }

    /// Adds `v` to entry (i, j) (and implicitly (j, i)). Panics outside the band.
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let s = self
            .slot(i, j)
            .unwrap_or_else(|| panic!("entry ({i}, {j}) outside bandwidth {}", self.kd));
        self.data[s] += v;
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    /// `self += s * other`; both must share the bandwidth.
    pub fn add_scaled(&mut self, s: f64, other: &SymBand) {
        assert_eq!((self.n, self.kd), (other.n, other.kd));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn matvec<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        assert_eq!(x.len(), self.n);
        let mut y = vec![T::zero(); self.n];
        for j in 0..self.n {
            let col = &self.data[j * (self.kd + 1)..(j + 1) * (self.kd + 1)];
            let xj = x[j];
            let mut acc = xj * col[0];
            for (d, &a) in col.iter().enumerate().skip(1) {
                let i = j + d;
                if i >= self.n {
                    break;
                }
                acc += x[i] * a;
                y[i] += xj * a;
            }
            y[j] += acc;
        }
        y
    }

    /// `aᵀ A b` without conjugation.
    pub fn form<T: Scalar>(&self, a: &[T], b: &[T]) -> T {
        super::scalar::dot(a, &self.matvec(b))
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_fn(self.n, self.n, |i, j| self.get(i, j))
    }

    /// General band copy of `Σ c_k A_k` over matrices sharing this shape.
    pub fn combine<T: Scalar>(terms: &[(T, &SymBand)]) -> BandMatrix<T> {
        let first = terms[0].1;
        let (n, kd) = (first.n, first.kd);
        let mut out = BandMatrix::zeros(n, kd, kd);
        for &(c, m) in terms {
            assert_eq!((m.n, m.kd), (n, kd));
            for j in 0..n {
                for d in 0..=kd.min(n - 1 - j) {
                    let v = m.data[j * (kd + 1) + d];
                    if v != 0.0 {
                        let cv = c * v;
                        out.add(j + d, j, cv);
                        if d > 0 {
                            out.add(j, j + d, cv);
                        }
                    }
                }
            }
        }
        out
    }
}

/// General band matrix with room for LU fill-in.
#[derive(Debug, Clone)]
pub struct BandMatrix<T> {
    n: usize,
    kl: usize,
    ku: usize,
    ld: usize,
    ab: Vec<T>,
}

impl<T: Scalar> BandMatrix<T> {
    pub fn zeros(n: usize, kl: usize, ku: usize) -> Self {
        let ld = 2 * kl + ku + 1;
        BandMatrix { n, kl, ku, ld, ab: vec![T::zero(); ld * n] }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        j * self.ld + self.kl + self.ku + i - j
    }

    #[inline]
    fn in_band(&self, i: usize, j: usize) -> bool {
        i <= j + self.kl && j <= i + self.ku
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        if self.in_band(i, j) {
            self.ab[self.idx(i, j)]
        } else {
            T::zero()
        }
    }

    pub fn add(&mut self, i: usize, j: usize, v: T) {
        assert!(self.in_band(i, j), "entry ({i}, {j}) outside band");
        let k = self.idx(i, j);
        self.ab[k] += v;
    }

    pub fn matvec(&self, x: &[T]) -> Vec<T> {
        let mut y = vec![T::zero(); self.n];
        for j in 0..self.n {
            let lo = j.saturating_sub(self.ku);
            let hi = (j + self.kl).min(self.n - 1);
            for (i, yi) in y.iter_mut().enumerate().take(hi + 1).skip(lo) {
                *yi += self.ab[self.idx(i, j)] * x[j];
            }
        }
        y
    }

    /// Maximum absolute column sum.
    pub fn norm1(&self) -> f64 {
        (0..self.n)
            .map(|j| {
                let lo = j.saturating_sub(self.ku);
                let hi = (j + self.kl).min(self.n - 1);
                (lo..=hi).map(|i| self.ab[self.idx(i, j)].modulus()).sum::<f64>()
            })
            .fold(0.0, f64::max)
    }

    /// LU factorization with partial pivoting.
    pub fn lu(mut self, context: &str) -> Result<BandLu<T>> {
        FACTORIZATIONS.fetch_add(1, Ordering::Relaxed);
        let anorm = self.norm1();
        let (n, kl, ku) = (self.n, self.kl, self.ku);
        let kv = kl + ku;
        let mut ipiv = vec![0usize; n];
        let mut ju = 0usize;
        let tiny = f64::EPSILON * anorm * 1e-3;
        for j in 0..n {
            let km = kl.min(n - 1 - j);
            let base = self.idx(j, j);
            let mut jp = 0;
            let mut best = -1.0;
            for i in 0..=km {
                let m = self.ab[base + i].modulus();
                if m > best {
                    best = m;
                    jp = i;
                }
            }
            ipiv[j] = j + jp;
            if !(best > tiny) || !best.is_finite() {
                return Err(Error::Singular { context: context.to_string(), pivot: j });
            }
            ju = ju.max((j + ku + jp).min(n - 1));
            if jp != 0 {
                for c in j..=ju {
                    let a = c * self.ld + kv + j - c;
                    let b = a + jp;
                    self.ab.swap(a, b);
                }
            }
            let piv = self.ab[base];
            let inv = T::one() / piv;
            for i in 1..=km {
                self.ab[base + i] *= inv;
            }
            for c in j + 1..=ju {
                let cb = c * self.ld + kv + j - c;
                let t = self.ab[cb];
                if t == T::zero() {
                    continue;
                }
                for i in 1..=km {
                    let l = self.ab[base + i];
                    self.ab[cb + i] -= l * t;
                }
            }
        }
        Ok(BandLu { m: self, ipiv, anorm })
    }
}

#[derive(Debug, Clone)]
pub struct BandLu<T> {
    m: BandMatrix<T>,
    ipiv: Vec<usize>,
    anorm: f64,
}

impl<T: Scalar> BandLu<T> {
    pub fn n(&self) -> usize {
        self.m.n
    }

    pub fn solve_in_place(&self, b: &mut [T]) {
        SOLVES.fetch_add(1, Ordering::Relaxed);
        let m = &self.m;
        let n = m.n;
        assert_eq!(b.len(), n);
        let kv = m.kl + m.ku;
        for j in 0..n.saturating_sub(1) {
            let l = self.ipiv[j];
            if l != j {
                b.swap(l, j);
            }
            let km = m.kl.min(n - 1 - j);
            let bj = b[j];
            if bj == T::zero() {
                continue;
            }
            let base = m.idx(j, j);
            for i in 1..=km {
                b[j + i] -= m.ab[base + i] * bj;
            }
        }
        for j in (0..n).rev() {
            let base = j * m.ld + kv;
            b[j] = b[j] / m.ab[base];
            let bj = b[j];
            let lo = j.saturating_sub(kv);
            for i in lo..j {
                b[i] -= m.ab[base + i - j] * bj;
            }
        }
    }

    pub fn solve(&self, b: &[T]) -> Vec<T> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }

    /// Estimated 1-norm condition number (Hager–Higham), valid for
    /// symmetric (possibly complex-symmetric) matrices, where
    /// `A⁻ᴴ v = conj(A⁻¹ conj(v))`.
    pub fn condition_estimate(&self) -> f64 {
        let n = self.n();
        if n == 0 {
            return 1.0;
        }
        let mut x = vec![T::from_real(1.0 / n as f64); n];
        let mut est = 0.0;
        let mut last_j = usize::MAX;
        for _ in 0..5 {
            let y = self.solve(&x);
            let ny: f64 = y.iter().map(|v| v.modulus()).sum();
            if ny <= est {
                break;
            }
            est = ny;
            let xi: Vec<T> = y
                .iter()
                .map(|v| {
                    let m = v.modulus();
                    if m > 0.0 { v.conjugate() * (1.0 / m) } else { T::one() }
                })
                .collect();
            let z = self.solve(&xi).into_iter().map(|v| v.conjugate()).collect::<Vec<_>>();
            let (j, zmax) = z
                .iter()
                .enumerate()
                .map(|(i, v)| (i, v.modulus()))
                .fold((0, -1.0), |a, b| if b.1 > a.1 { b } else { a });
            let zx: f64 = z.iter().zip(&x).map(|(a, b)| (*a * *b).modulus()).sum::<f64>();
            if zmax <= zx.abs() || j == last_j {
                break;
            }
            last_j = j;
            x = vec![T::zero(); n];
            x[j] = T::one();
        }
        // Higham's alternating-sign safeguard vector
        let alt: Vec<T> = (0..n)
            .map(|i| {
                let s = if i % 2 == 0 { 1.0 } else { -1.0 };
                T::from_real(s * (1.0 + i as f64 / (n.max(2) - 1) as f64))
            })
            .collect();
        let y = self.solve(&alt);
        let alt_est = 2.0 * y.iter().map(|v| v.modulus()).sum::<f64>() / (3.0 * n as f64);
        self.anorm * est.max(alt_est)
    }
}
