//! Structured rectangular mesh of square elements.
//!
//! Node `(ix, iy)` has index `ix·(ny+1) + iy` and element `(ix, iy)` has index
//! `ix·ny + iy`, so columns of the beam are contiguous and the DOF bandwidth
//! grows with `ny` only.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Axis-aligned rectangle in μm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

/// Supports on the left and right edges of the beam.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EdgeSupport {
    #[default]
    Free,
    /// Both displacement components fixed.
    Clamped,
    /// Only the x component fixed (symmetry plane).
    FixedX,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeshSpec {
    pub nx: usize,
    pub ny: usize,
    pub element_size: f64,
    pub non_design: Vec<Rect>,
    pub left: EdgeSupport,
    pub right: EdgeSupport,
}

impl MeshSpec {
    /// Left edge clamped, right edge on a symmetry plane, no passive regions.
    pub fn beam(nx: usize, ny: usize, element_size: f64) -> Self {
        MeshSpec {
            nx,
            ny,
            element_size,
            non_design: Vec::new(),
            left: EdgeSupport::Clamped,
            right: EdgeSupport::FixedX,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Mesh {
    pub nx: usize,
    pub ny: usize,
    pub element_size: f64,
    pub nodes: Vec<[f64; 2]>,
    pub elements: Vec<[usize; 4]>,
    pub non_design: Vec<bool>,
    /// Constrained global DOFs (sorted).
    pub constrained: Vec<usize>,
    /// Full DOF → free DOF index.
    pub dof_map: Vec<Option<usize>>,
    pub n_free: usize,
}

impl Mesh {
    pub fn build(spec: &MeshSpec) -> Result<Mesh> {
        let (nx, ny, h) = (spec.nx, spec.ny, spec.element_size);
        if nx == 0 || ny == 0 {
            return Err(Error::invalid("mesh needs nx, ny >= 1"));
        }
        if !(h > 0.0) {
            return Err(Error::invalid("element size must be positive"));
        }
        let node = |ix: usize, iy: usize| ix * (ny + 1) + iy;
        let mut nodes = Vec::with_capacity((nx + 1) * (ny + 1));
        for ix in 0..=nx {
            for iy in 0..=ny {
                nodes.push([ix as f64 * h, iy as f64 * h]);
            }
        }
        let mut elements = Vec::with_capacity(nx * ny);
        for ix in 0..nx {
            for iy in 0..ny {
                elements.push([node(ix, iy), node(ix + 1, iy), node(ix + 1, iy + 1), node(ix, iy + 1)]);
            }
        }
        let mut non_design = vec![false; nx * ny];
        for r in &spec.non_design {
            let [ix0, ix1] = [grid_index(r.x0, h, 'x')?, grid_index(r.x1, h, 'x')?];
            let [iy0, iy1] = [grid_index(r.y0, h, 'y')?, grid_index(r.y1, h, 'y')?];
            if ix1 <= ix0 || iy1 <= iy0 || ix1 > nx || iy1 > ny {
                return Err(Error::invalid(format!("non-design region {r:?} is empty or outside the mesh")));
            }
            for ix in ix0..ix1 {
                for iy in iy0..iy1 {
                    non_design[ix * ny + iy] = true;
                }
            }
        }
        let mut fixed = vec![false; 2 * nodes.len()];
        for (ix, support) in [(0, spec.left), (nx, spec.right)] {
            for iy in 0..=ny {
                let nd = node(ix, iy);
                match support {
                    EdgeSupport::Free => {}
                    EdgeSupport::Clamped => {
                        fixed[2 * nd] = true;
                        fixed[2 * nd + 1] = true;
                    }
                    EdgeSupport::FixedX => fixed[2 * nd] = true,
                }
            }
        }
        let mut dof_map = vec![None; fixed.len()];
        let mut constrained = Vec::new();
        let mut n_free = 0;
        for (d, &f) in fixed.iter().enumerate() {
            if f {
                constrained.push(d);
            } else {
                dof_map[d] = Some(n_free);
                n_free += 1;
            }
        }
        Ok(Mesh { nx, ny, element_size: h, nodes, elements, non_design, constrained, dof_map, n_free })
    }

    pub fn n_elements(&self) -> usize {
        self.elements.len()
    }

    pub fn n_design(&self) -> usize {
        self.non_design.iter().filter(|&&b| !b).count()
    }

    /// Element centroid in element-size units.
    pub fn centroid(&self, e: usize) -> [f64; 2] {
        let (ix, iy) = (e / self.ny, e % self.ny);
        [ix as f64 + 0.5, iy as f64 + 0.5]
    }

    /// Node closest to a point in μm.
    pub fn node_at(&self, x: f64, y: f64) -> usize {
        let ix = ((x / self.element_size).round().max(0.0) as usize).min(self.nx);
        let iy = ((y / self.element_size).round().max(0.0) as usize).min(self.ny);
        ix * (self.ny + 1) + iy
    }

    /// Free index of a node's DOF (`comp` 0 = x, 1 = y).
    pub fn free_dof(&self, node: usize, comp: usize) -> Option<usize> {
        self.dof_map[2 * node + comp]
    }

    pub fn element_dofs(&self, e: usize) -> [usize; 8] {
        let n = self.elements[e];
        let mut d = [0; 8];
        for (k, &nd) in n.iter().enumerate() {
            d[2 * k] = 2 * nd;
            d[2 * k + 1] = 2 * nd + 1;
        }
        d
    }

    /// Half-bandwidth of the free-DOF system matrices.
    pub fn bandwidth(&self) -> usize {
        let mut kd = 0;
        for e in 0..self.n_elements() {
            let free: Vec<usize> = self.element_dofs(e).iter().filter_map(|&d| self.dof_map[d]).collect();
            if let (Some(lo), Some(hi)) = (free.iter().min(), free.iter().max()) {
                kd = kd.max(hi - lo);
            }
        }
        kd
    }
}

fn grid_index(coord: f64, h: f64, axis: char) -> Result<usize> {
    let q = coord / h;
    let r = q.round();
    if (q - r).abs() > 1e-9 * q.abs().max(1.0) || r < 0.0 {
        return Err(Error::MisalignedRegion { axis, coord, size: h });
    }
    Ok(r as usize)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn example_mesh_counts() {
        for (nx, ny, nodes, n) in [(160, 20, 3381, 6699), (100, 20, 2121, 4179), (120, 20, 2541, 5019)] {
            let m = Mesh::build(&MeshSpec::beam(nx, ny, 5.0)).unwrap();
            assert_eq!(m.nodes.len(), nodes);
            assert_eq!(m.n_elements(), nx * ny);
            assert_eq!(m.n_free, n);
        }
    }

    #[test]
    fn central_region_counts() {
        let mut spec = MeshSpec::beam(120, 20, 5.0);
        spec.non_design.push(Rect { x0: 240.0, y0: 0.0, x1: 360.0, y1: 100.0 });
        let m = Mesh::build(&spec).unwrap();
        assert_eq!(m.non_design.iter().filter(|&&b| b).count(), 480);
        assert_eq!(m.n_design(), 2400 - 480);
    }

    #[test]
    fn misaligned_region_rejected() {
        let mut spec = MeshSpec::beam(10, 4, 5.0);
        spec.non_design.push(Rect { x0: 7.0, y0: 0.0, x1: 20.0, y1: 20.0 });
        match Mesh::build(&spec) {
            Err(Error::MisalignedRegion { axis, coord, .. }) => assert_eq!((axis, coord), ('x', 7.0)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn elements_are_counter_clockwise() {
        let m = Mesh::build(&MeshSpec::beam(3, 2, 5.0)).unwrap();
        for el in &m.elements {
            let p: Vec<[f64; 2]> = el.iter().map(|&n| m.nodes[n]).collect();
            let area2: f64 = (0..4).map(|k| p[k][0] * p[(k + 1) % 4][1] - p[(k + 1) % 4][0] * p[k][1]).sum();
            assert!((area2 - 50.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bandwidth_is_column_height() {
        let m = Mesh::build(&MeshSpec::beam(160, 20, 5.0)).unwrap();
        assert!(m.bandwidth() <= 2 * 20 + 5);
    }
}
