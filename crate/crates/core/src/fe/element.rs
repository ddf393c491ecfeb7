//! Bilinear plane-stress element with exact polynomial internal force.
//!
//! Total-Lagrangian kinematics with Green–Lagrange strain and a
//! St. Venant–Kirchhoff law give an internal force that is exactly
//! `K u + f2(u,u) + f3(u,u,u)`. The tensors are stored fully symmetric.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Material {
    /// Young's modulus in ng/(μm·ms²) (numerically equal to Pa).
    pub youngs_modulus: f64,
    pub poisson_ratio: f64,
    /// Mass density in ng/μm³.
    pub density: f64,
    /// Out-of-plane thickness in μm.
    pub thickness: f64,
}

impl Material {
    /// Silicon as used for the MEMS beams.
    pub fn silicon() -> Self {
        Material { youngs_modulus: 148e9, poisson_ratio: 0.23, density: 2330e-6, thickness: 24.0 }
    }
}

/// Dense local operators over `nd` DOFs: mass, stiffness, quadratic and cubic
/// force tensors, all row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalOperators {
    pub nd: usize,
    pub me: Vec<f64>,
    pub ke: Vec<f64>,
    pub f2: Vec<f64>,
    pub f3: Vec<f64>,
}

impl LocalOperators {
    pub fn zeros(nd: usize) -> Self {
        LocalOperators {
            nd,
            me: vec![0.0; nd * nd],
            ke: vec![0.0; nd * nd],
            f2: vec![0.0; nd * nd * nd],
            f3: vec![0.0; nd * nd * nd * nd],
        }
    }

    pub fn has_f2(&self) -> bool {
        self.f2.iter().any(|&v| v != 0.0)
    }

    pub fn has_f3(&self) -> bool {
        self.f3.iter().any(|&v| v != 0.0)
    }
}

const GAUSS: f64 = 0.577_350_269_189_625_8;
const XI: [f64; 4] = [-1.0, 1.0, 1.0, -1.0];
const ETA: [f64; 4] = [-1.0, -1.0, 1.0, 1.0];

/// Plane-stress constitutive matrix in Voigt form `[11, 22, 2·12]`.
pub fn plane_stress(e: f64, nu: f64) -> [[f64; 3]; 3] {
    let c = e / (1.0 - nu * nu);
    [[c, c * nu, 0.0], [c * nu, c, 0.0], [0.0, 0.0, c * (1.0 - nu) / 2.0]]
}

fn vdot(a: &[f64; 3], d: &[[f64; 3]; 3], b: &[f64; 3]) -> f64 {
    let mut s = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            s += a[i] * d[i][j] * b[j];
        }
    }
    s
}

/// Element operators for a square bilinear element of side `size`.
pub fn element_operators(mat: &Material, size: f64) -> Result<LocalOperators> {
    let Material { youngs_modulus: e, poisson_ratio: nu, density: rho, thickness: t } = *mat;
    if !(e > 0.0 && rho > 0.0 && t > 0.0 && size > 0.0) {
        return Err(Error::invalid("material constants and element size must be positive"));
    }
    if !(0.0..0.5).contains(&nu) {
        return Err(Error::invalid(format!("Poisson ratio {nu} outside [0, 0.5)")));
    }
    let d = plane_stress(e, nu);
    let nd = 8;
    let mut ops = LocalOperators::zeros(nd);
    let detj = size * size / 4.0;
    for gx in [-GAUSS, GAUSS] {
        for gy in [-GAUSS, GAUSS] {
            let w = t * detj;
            let n: Vec<f64> = (0..4).map(|k| 0.25 * (1.0 + XI[k] * gx) * (1.0 + ETA[k] * gy)).collect();
            let dndx: Vec<[f64; 2]> = (0..4)
                .map(|k| {
                    [
                        0.25 * XI[k] * (1.0 + ETA[k] * gy) * 2.0 / size,
                        0.25 * ETA[k] * (1.0 + XI[k] * gx) * 2.0 / size,
                    ]
                })
                .collect();
            // displacement gradient of unit DOF a: H[comp][j] = dN/dX_j
            let grad: Vec<[[f64; 2]; 2]> = (0..nd)
                .map(|a| {
                    let (node, comp) = (a / 2, a % 2);
                    let mut h = [[0.0; 2]; 2];
                    h[comp] = dndx[node];
                    h
                })
                .collect();
            let lin: Vec<[f64; 3]> =
                grad.iter().map(|h| [h[0][0], h[1][1], h[0][1] + h[1][0]]).collect();
            let mut quad = vec![[0.0; 3]; nd * nd];
            for a in 0..nd {
                for b in 0..nd {
                    let (ha, hb) = (&grad[a], &grad[b]);
                    let q = |i: usize, j: usize| {
                        0.5 * (0..2).map(|k| ha[k][i] * hb[k][j] + hb[k][i] * ha[k][j]).sum::<f64>()
                    };
                    quad[a * nd + b] = [q(0, 0), q(1, 1), 2.0 * q(0, 1)];
                }
            }
            for a in 0..nd {
                for b in 0..nd {
                    let na = n[a / 2];
                    let nb = n[b / 2];
                    if a % 2 == b % 2 {
                        ops.me[a * nd + b] += rho * w * na * nb;
                    }
                    ops.ke[a * nd + b] += w * vdot(&lin[a], &d, &lin[b]);
                }
            }
            for a in 0..nd {
                for b in 0..nd {
                    for c in 0..nd {
                        let v = 0.5
                            * (vdot(&lin[a], &d, &quad[b * nd + c])
                                + vdot(&lin[b], &d, &quad[a * nd + c])
                                + vdot(&lin[c], &d, &quad[a * nd + b]));
                        ops.f2[(a * nd + b) * nd + c] += w * v;
                    }
                }
            }
            for a in 0..nd {
                for b in 0..nd {
                    let qab = &quad[a * nd + b];
                    for c in 0..nd {
                        let qac = &quad[a * nd + c];
                        let qbc = &quad[b * nd + c];
                        for dd in 0..nd {
                            let v = vdot(qab, &d, &quad[c * nd + dd])
                                + vdot(qac, &d, &quad[b * nd + dd])
                                + vdot(&quad[a * nd + dd], &d, qbc);
                            ops.f3[((a * nd + b) * nd + c) * nd + dd] += w * v / 6.0;
                        }
                    }
                }
            }
        }
    }
    Ok(ops)
}

/// Local internal force `Ke u + f2e(u,u) + f3e(u,u,u)`.
pub fn internal_force(ops: &LocalOperators, u: &[f64]) -> Vec<f64> {
    let nd = ops.nd;
    let mut f = vec![0.0; nd];
    for a in 0..nd {
        let mut s = 0.0;
        for b in 0..nd {
            s += ops.ke[a * nd + b] * u[b];
            for c in 0..nd {
                let uc = u[b] * u[c];
                s += ops.f2[(a * nd + b) * nd + c] * uc;
                let base = ((a * nd + b) * nd + c) * nd;
                for d in 0..nd {
                    s += ops.f3[base + d] * uc * u[d];
                }
            }
        }
        f[a] = s;
    }
    f
}

/// Displacements of a rigid rotation by `angle` about the element centre.
pub fn rigid_rotation(size: f64, angle: f64) -> Vec<f64> {
    let (s, c) = angle.sin_cos();
    let mut u = vec![0.0; 8];
    for k in 0..4 {
        let x = XI[k] * size / 2.0;
        let y = ETA[k] * size / 2.0;
        u[2 * k] = c * x - s * y - x;
        u[2 * k + 1] = s * x + c * y - y;
    }
    u
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ops() -> LocalOperators {
        element_operators(&Material::silicon(), 5.0).unwrap()
    }

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn total_mass_per_direction() {
        let o = ops();
        let m = Material::silicon();
        let mut tx = vec![0.0; 8];
        for k in 0..4 {
            tx[2 * k] = 1.0;
        }
        let total: f64 = (0..8).flat_map(|a| (0..8).map(move |b| (a, b))).map(|(a, b)| tx[a] * o.me[a * 8 + b] * tx[b]).sum();
        let expected = m.density * m.thickness * 25.0;
        assert!((total - expected).abs() < 1e-14 * expected);
    }

    #[test]
    fn stiffness_symmetric_and_translation_free() {
        let o = ops();
        for a in 0..8 {
            for b in 0..8 {
                assert!((o.ke[a * 8 + b] - o.ke[b * 8 + a]).abs() < 1e-6 * o.ke[0].abs().max(1.0) * 1e-6);
            }
        }
        let mut ty = vec![0.0; 8];
        for k in 0..4 {
            ty[2 * k + 1] = 1.0;
        }
        let f = internal_force(&o, &ty);
        assert!(norm(&f) < 1e-12 * o.ke[0]);
    }

    #[test]
    fn finite_rotation_is_stress_free() {
        let o = ops();
        for deg in [1.0f64, 10.0, 30.0] {
            let u = rigid_rotation(5.0, deg.to_radians());
            let f = internal_force(&o, &u);
            let ku: Vec<f64> = (0..8).map(|a| (0..8).map(|b| o.ke[a * 8 + b] * u[b]).sum()).collect();
            assert!(norm(&f) <= 1e-10 * norm(&ku), "{deg}: {}", norm(&f) / norm(&ku));
        }
    }

    #[test]
    fn tensors_fully_symmetric() {
        let o = ops();
        let scale = o.f3.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for a in 0..8 {
            for b in 0..8 {
                for c in 0..8 {
                    let v = o.f2[(a * 8 + b) * 8 + c];
                    assert!((v - o.f2[(b * 8 + a) * 8 + c]).abs() < 1e-9 * scale.max(1.0));
                    assert!((v - o.f2[(a * 8 + c) * 8 + b]).abs() < 1e-9 * scale.max(1.0));
                    for d in 0..8 {
                        let w = o.f3[((a * 8 + b) * 8 + c) * 8 + d];
                        assert!((w - o.f3[((b * 8 + a) * 8 + c) * 8 + d]).abs() <= 1e-12 * scale);
                        assert!((w - o.f3[((a * 8 + d) * 8 + c) * 8 + b]).abs() <= 1e-12 * scale);
                    }
                }
            }
        }
    }

    #[test]
    fn rejects_incompressible() {
        let mut m = Material::silicon();
        m.poisson_ratio = 0.5;
        assert!(element_operators(&m, 5.0).is_err());
    }
}
