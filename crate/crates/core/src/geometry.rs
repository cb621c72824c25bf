//! Planar lattice heart inside a ring of surface leads, tissue maps and the
//! inverse-distance measurement operator.

use serde::{Deserialize, Serialize};
use tmpib_tensor::Tensor;

use crate::error::{CoreError, Result};

/// Kernel distances are clamped below at this value.
pub const D_MIN: f64 = 0.1;

/// Largest rotation accepted by [`build_forward_operator`], in degrees.
pub const MAX_ROTATION_DEG: f64 = 45.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Geometry {
    pub nx: usize,
    pub ny: usize,
    pub heart_nodes: Vec<[f64; 3]>,
    pub leads: Vec<[f64; 3]>,
    pub adjacency: Vec<Vec<usize>>,
}

/// Parameters of [`build_grid`], kept so a geometry can be rebuilt from a
/// manifest.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    pub lead_count: usize,
    pub ring_radius: f64,
}

impl GridSpec {
    pub fn build(&self) -> Result<Geometry> {
        build_grid(self.nx, self.ny, self.lead_count, self.ring_radius)
    }
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            nx: 8,
            ny: 8,
            lead_count: 16,
            ring_radius: 12.0,
        }
    }
}

pub fn build_grid(nx: usize, ny: usize, lead_count: usize, ring_radius: f64) -> Result<Geometry> {
    if nx < 2 || ny < 2 {
        return Err(CoreError::config(format!(
            "lattice must be at least 2×2, got {nx}×{ny}"
        )));
    }
    if lead_count == 0 {
        return Err(CoreError::config("lead_count must be at least 1"));
    }
    let diagonal = (((nx - 1).pow(2) + (ny - 1).pow(2)) as f64).sqrt();
    if !(ring_radius > diagonal) {
        return Err(CoreError::config(format!(
            "ring_radius {ring_radius} must exceed the lattice diagonal {diagonal:.3}"
        )));
    }
    let cx = (nx - 1) as f64 / 2.0;
    let cy = (ny - 1) as f64 / 2.0;
    let mut heart_nodes = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            heart_nodes.push([i as f64 - cx, j as f64 - cy, 0.0]);
        }
    }
    let leads = (0..lead_count)
        .map(|k| {
            let phi = 2.0 * std::f64::consts::PI * k as f64 / lead_count as f64;
            [ring_radius * phi.cos(), ring_radius * phi.sin(), 0.0]
        })
        .collect();
    let mut adjacency = vec![Vec::with_capacity(4); nx * ny];
    for j in 0..ny {
        for i in 0..nx {
            let n = &mut adjacency[j * nx + i];
            if i > 0 {
                n.push(j * nx + i - 1);
            }
            if i + 1 < nx {
                n.push(j * nx + i + 1);
            }
            if j > 0 {
                n.push((j - 1) * nx + i);
            }
            if j + 1 < ny {
                n.push((j + 1) * nx + i);
            }
        }
    }
    let geom = Geometry {
        nx,
        ny,
        heart_nodes,
        leads,
        adjacency,
    };
    geom.check_lead_clearance()?;
    Ok(geom)
}

impl Geometry {
    /// One heart node at the origin and one lead on the +x axis. Used for
    /// single-cell simulation and kernel checks.
    pub fn single_node(lead_distance: f64) -> Result<Self> {
        let geom = Self {
            nx: 1,
            ny: 1,
            heart_nodes: vec![[0.0; 3]],
            leads: vec![[lead_distance, 0.0, 0.0]],
            adjacency: vec![Vec::new()],
        };
        geom.check_lead_clearance()?;
        Ok(geom)
    }

    pub fn num_nodes(&self) -> usize {
        self.heart_nodes.len()
    }

    pub fn num_leads(&self) -> usize {
        self.leads.len()
    }

    /// `(i, j)` lattice position of node `n`.
    pub fn coords(&self, n: usize) -> (usize, usize) {
        (n % self.nx, n / self.nx)
    }

    pub fn node(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    /// Manhattan distance between two nodes in lattice steps.
    pub fn lattice_distance(&self, a: usize, b: usize) -> usize {
        let (ai, aj) = self.coords(a);
        let (bi, bj) = self.coords(b);
        ai.abs_diff(bi) + aj.abs_diff(bj)
    }

    fn check_lead_clearance(&self) -> Result<()> {
        for (l, lead) in self.leads.iter().enumerate() {
            for (n, node) in self.heart_nodes.iter().enumerate() {
                if dist(lead, node) <= D_MIN {
                    return Err(CoreError::config(format!(
                        "lead {l} lies within d_min of heart node {n}"
                    )));
                }
            }
        }
        Ok(())
    }
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Rotates points about the Z axis by `deg` degrees (counter-clockwise).
pub fn rotate_z(points: &[[f64; 3]], deg: f64) -> Vec<[f64; 3]> {
    let (s, c) = deg.to_radians().sin_cos();
    points
        .iter()
        .map(|p| [c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]])
        .collect()
}

/// Unnormalized kernel `k_ij = 1 / max(‖lead_i − node_j‖, D_MIN)`.
pub fn kernel_matrix(leads: &[[f64; 3]], nodes: &[[f64; 3]]) -> Tensor {
    let data = leads
        .iter()
        .flat_map(|l| nodes.iter().map(move |n| 1.0 / dist(l, n).max(D_MIN)))
        .collect();
    Tensor::matrix(leads.len(), nodes.len(), data).expect("sized from inputs")
}

/// Row-normalizes a kernel so every row sums to one.
pub fn normalize_rows(mut k: Tensor) -> Tensor {
    let cols = k.shape()[1];
    for row in k.data_mut().chunks_mut(cols) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= s);
    }
    k
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOperator {
    /// `M×U` weights.
    pub h: Tensor,
    pub rotation_deg: f64,
}

pub fn build_forward_operator(geom: &Geometry, rotation_deg: f64) -> Result<ForwardOperator> {
    if !(rotation_deg.abs() <= MAX_ROTATION_DEG) {
        return Err(CoreError::config(format!(
            "rotation {rotation_deg}° outside ±{MAX_ROTATION_DEG}°"
        )));
    }
    let nodes = if rotation_deg == 0.0 {
        geom.heart_nodes.clone()
    } else {
        rotate_z(&geom.heart_nodes, rotation_deg)
    };
    Ok(ForwardOperator {
        h: normalize_rows(kernel_matrix(&geom.leads, &nodes)),
        rotation_deg,
    })
}

impl ForwardOperator {
    pub fn num_leads(&self) -> usize {
        self.h.shape()[0]
    }

    pub fn num_nodes(&self) -> usize {
        self.h.shape()[1]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScarRegion {
    pub center: usize,
    pub radius: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TissueMap {
    pub excitability: Vec<f64>,
    pub scar_mask: Vec<bool>,
    pub scar: Option<ScarRegion>,
}

impl TissueMap {
    pub fn healthy(geom: &Geometry, a_healthy: f64) -> Self {
        let u = geom.num_nodes();
        Self {
            excitability: vec![a_healthy; u],
            scar_mask: vec![false; u],
            scar: None,
        }
    }

    /// Nodes within lattice distance `radius` of `center` get `a_scar`.
    pub fn with_scar(
        geom: &Geometry,
        center: usize,
        radius: usize,
        a_healthy: f64,
        a_scar: f64,
    ) -> Result<Self> {
        if center >= geom.num_nodes() {
            return Err(CoreError::config(format!(
                "scar center {center} out of range for {} nodes",
                geom.num_nodes()
            )));
        }
        if !(a_scar > a_healthy) {
            return Err(CoreError::config(format!(
                "a_scar {a_scar} must exceed a_healthy {a_healthy}"
            )));
        }
        let scar_mask: Vec<bool> = (0..geom.num_nodes())
            .map(|n| geom.lattice_distance(n, center) <= radius)
            .collect();
        let excitability = scar_mask
            .iter()
            .map(|&s| if s { a_scar } else { a_healthy })
            .collect();
        Ok(Self {
            excitability,
            scar_mask,
            scar: Some(ScarRegion { center, radius }),
        })
    }

    pub fn scar_nodes(&self) -> Vec<usize> {
        (0..self.scar_mask.len())
            .filter(|&n| self.scar_mask[n])
            .collect()
    }
}
