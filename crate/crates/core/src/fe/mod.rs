//! Finite element model: mesh, element operators, assembly.

pub mod element;
pub mod mesh;
pub mod model;

pub use element::{element_operators, LocalOperators, Material};
pub use mesh::{EdgeSupport, Mesh, MeshSpec, Rect};
pub use model::{AssembledModel, Component, Rayleigh};

use crate::error::{Error, Result};
use std::sync::Arc;

/// Point load on a node, in ng·μm/ms².
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointLoad {
    pub node: usize,
    pub fx: f64,
    pub fy: f64,
}

/// Mesh plus everything that stays fixed while densities change.
#[derive(Debug, Clone)]
pub struct FeProblem {
    pub mesh: Mesh,
    pub material: Material,
    pub ops: Arc<LocalOperators>,
    pub components: Vec<Component>,
    pub f_ext: Vec<f64>,
    pub outputs: Vec<usize>,
}

impl FeProblem {
    pub fn new(mesh: Mesh, material: Material, loads: &[PointLoad], output_nodes: &[(usize, usize)]) -> Result<Self> {
        let ops = Arc::new(element_operators(&material, mesh.element_size)?);
        let components = (0..mesh.n_elements())
            .map(|e| Component {
                dofs: mesh.element_dofs(e).iter().map(|&d| mesh.dof_map[d]).collect(),
                ops: ops.clone(),
            })
            .collect();
        let mut f_ext = vec![0.0; mesh.n_free];
        for l in loads {
            for (comp, v) in [(0, l.fx), (1, l.fy)] {
                if v == 0.0 {
                    continue;
                }
                let d = mesh.free_dof(l.node, comp).ok_or_else(|| {
                    Error::invalid(format!("load on constrained DOF (node {}, component {comp})", l.node))
                })?;
                f_ext[d] += v;
            }
        }
        let outputs = output_nodes
            .iter()
            .map(|&(node, comp)| {
                mesh.free_dof(node, comp)
                    .ok_or_else(|| Error::invalid(format!("output on constrained DOF (node {node}, component {comp})")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FeProblem { mesh, material, ops, components, f_ext, outputs })
    }

    /// Assembles the reduced system for physical densities `mu_hat`.
    pub fn assemble(&self, mu_hat: &[f64]) -> Result<AssembledModel> {
        if mu_hat.len() != self.mesh.n_elements() {
            return Err(Error::Dimension { expected: self.mesh.n_elements(), got: mu_hat.len() });
        }
        if let Some(e) = mu_hat.iter().position(|&v| !(v > 0.0 && v <= 1.0 + 1e-12)) {
            return Err(Error::invalid(format!("physical density {} of element {e} outside (0, 1]", mu_hat[e])));
        }
        AssembledModel::new(
            self.mesh.n_free,
            self.components.clone(),
            mu_hat.to_vec(),
            self.f_ext.clone(),
            self.outputs.clone(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{dot, norm2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn problem(nx: usize, ny: usize) -> FeProblem {
        let mesh = Mesh::build(&MeshSpec::beam(nx, ny, 5.0)).unwrap();
        let node = mesh.node_at(nx as f64 * 5.0, ny as f64 * 2.5);
        FeProblem::new(mesh, Material::silicon(), &[PointLoad { node, fx: 0.0, fy: 1.0 }], &[(node, 1)]).unwrap()
    }

    #[test]
    fn tangent_fd_and_symmetry() {
        let p = problem(4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w: Vec<f64> = (0..8).map(|_| rng.random_range(0.2..1.0)).collect();
        let m = p.assemble(&w).unwrap();
        let x: Vec<f64> = (0..m.n).map(|_| rng.random_range(-0.5..0.5)).collect();
        let t = m.tangent_dense(&x);
        assert!((&t - t.transpose()).abs().max() <= 1e-10 * t.abs().max());
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for j in 0..m.n {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += h;
            xm[j] -= h;
            let (fp, fm) = (m.internal_force(&xp), m.internal_force(&xm));
            let col: Vec<f64> = (0..m.n).map(|i| (fp[i] - fm[i]) / (2.0 * h) - t[(i, j)]).collect();
            let tc: Vec<f64> = (0..m.n).map(|i| t[(i, j)]).collect();
            worst = worst.max(norm2(&col) / norm2(&tc));
        }
        assert!(worst < 1e-6, "{worst}");
    }

    #[test]
    fn assembly_is_linear_in_weights() {
        let p = problem(3, 2);
        let mut w = vec![0.5; 6];
        let m0 = p.assemble(&w).unwrap();
        w[2] = 0.75;
        let m1 = p.assemble(&w).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a: Vec<f64> = (0..m0.n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..m0.n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let c = &m0.components[2];
        let local = crate::fe::model::local_form(&c.ops.ke, &c.gather(&a), &c.gather(&b));
        let diff = m1.k.form(&a, &b) - m0.k.form(&a, &b);
        assert!((diff - 0.25 * local).abs() < 1e-9 * local.abs());
        let df2 = dot(&a, &m1.f2(&a, &b).unwrap()) - dot(&a, &m0.f2(&a, &b).unwrap());
        let l2 = dot(&c.gather(&a), &crate::fe::model::local_f2(&c.ops, &c.gather(&a), &c.gather(&b)));
        assert!((df2 - 0.25 * l2).abs() < 1e-9 * l2.abs());
    }

    #[test]
    fn rejects_bad_density() {
        let p = problem(2, 2);
        assert!(p.assemble(&[1.0; 3]).is_err());
        assert!(p.assemble(&[0.0, 1.0, 1.0, 1.0]).is_err());
    }
}
