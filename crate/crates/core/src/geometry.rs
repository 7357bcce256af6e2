//! Spatial domain, discrete velocity sphere and inflow/outflow bookkeeping.
//!
//! Degrees of freedom of a grid field are laid out cell-major:
//! `dof = cell * n_velocities + velocity`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Result, StcError};

pub type Point = [f64; 2];

fn dot(a: Point, b: Point) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

fn norm(a: Point) -> f64 {
    dot(a, a).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Domain {
    Interval { lo: f64, hi: f64 },
    Disk { radius: f64 },
}

impl Domain {
    pub fn dim(&self) -> usize {
        match self {
            Domain::Interval { .. } => 1,
            Domain::Disk { .. } => 2,
        }
    }

    pub fn measure(&self) -> f64 {
        match *self {
            Domain::Interval { lo, hi } => hi - lo,
            Domain::Disk { radius } => PI * radius * radius,
        }
    }
}

/// Input to [`Geometry::build`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometrySpec {
    pub dim: usize,
    pub domain: Domain,
    /// Cells of the interval, or cells per axis of the disk's bounding box.
    pub n_cells: usize,
    /// Number of equally spaced directions on the circle (d = 2 only).
    pub n_velocities: usize,
    /// Optional explicit `(velocity, weight)` set for d = 1. Velocities must
    /// be ±1 and the weights must sum to 2.
    pub velocities_1d: Option<Vec<(f64, f64)>>,
}

impl GeometrySpec {
    pub fn interval(lo: f64, hi: f64, n_cells: usize) -> Self {
        Self {
            dim: 1,
            domain: Domain::Interval { lo, hi },
            n_cells,
            n_velocities: 2,
            velocities_1d: None,
        }
    }

    pub fn disk(radius: f64, n_cells: usize, n_velocities: usize) -> Self {
        Self {
            dim: 2,
            domain: Domain::Disk { radius },
            n_cells,
            n_velocities,
            velocities_1d: None,
        }
    }

    pub fn with_velocities_1d(mut self, set: Vec<(f64, f64)>) -> Self {
        self.n_velocities = set.len();
        self.velocities_1d = Some(set);
        self
    }
}

/// Face shared by two cells; `normal` points from `left` to `right`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteriorFace {
    pub left: usize,
    pub right: usize,
    pub normal: Point,
    pub length: f64,
}

/// Cell face lying on the discrete boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundarySide {
    pub cell: usize,
    pub position: Point,
    pub normal: Point,
    pub length: f64,
}

/// One (boundary face, velocity) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryFace {
    pub face_id: usize,
    pub cell: usize,
    pub position: Point,
    pub normal: Point,
    pub velocity: usize,
    /// `U · ν`.
    pub sign: f64,
    pub inflow: bool,
    pub length: f64,
}

impl BoundaryFace {
    /// Weight of this pair in the inflow norm: `(-U·ν) · |face| · w_j`.
    pub fn weight(&self, vel_weights: &[f64]) -> f64 {
        (-self.sign).max(0.0) * self.length * vel_weights[self.velocity]
    }
}

/// `U · ν <= 0` is inflow; tangential directions count as inflow.
pub fn is_inflow(velocity: Point, normal: Point) -> bool {
    dot(velocity, normal) <= 0.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub dim: usize,
    pub domain: Domain,
    pub n_cells_axis: usize,
    /// Axis spacing between neighbouring cell centres.
    pub dx: f64,
    pub cell_measure: f64,
    pub centers: Vec<Point>,
    pub velocities: Vec<Point>,
    pub vel_weights: Vec<f64>,
    #[serde(rename = "R")]
    pub radius: f64,
    pub interior_faces: Vec<InteriorFace>,
    pub boundary_sides: Vec<BoundarySide>,
}

impl Geometry {
    pub fn build(spec: &GeometrySpec) -> Result<Self> {
        if spec.dim != spec.domain.dim() || !(1..=2).contains(&spec.dim) {
            return Err(StcError::UnsupportedDimension(spec.dim));
        }
        if spec.n_cells < 2 {
            return Err(StcError::InvalidParameter(format!(
                "n_cells must be at least 2, got {}",
                spec.n_cells
            )));
        }
        match spec.domain {
            Domain::Interval { lo, hi } => Self::build_interval(spec, lo, hi),
            Domain::Disk { radius } => Self::build_disk(spec, radius),
        }
    }

    fn build_interval(spec: &GeometrySpec, lo: f64, hi: f64) -> Result<Self> {
        if !(lo < 0.0 && 0.0 < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(StcError::InvalidDomain(format!(
                "interval ({lo}, {hi}) must contain the origin in its interior"
            )));
        }
        let (velocities, vel_weights) = match &spec.velocities_1d {
            None => (vec![[-1.0, 0.0], [1.0, 0.0]], vec![1.0, 1.0]),
            Some(set) => {
                if set.is_empty() {
                    return Err(StcError::InvalidParameter("empty velocity set".into()));
                }
                let total: f64 = set.iter().map(|p| p.1).sum();
                if set
                    .iter()
                    .any(|&(u, w)| (u.abs() - 1.0).abs() > 1e-12 || w <= 0.0)
                    || (total - 2.0).abs() > 1e-12
                {
                    return Err(StcError::InvalidParameter(
                        "d = 1 velocities must be ±1 with positive weights summing to 2".into(),
                    ));
                }
                (
                    set.iter().map(|&(u, _)| [u.signum(), 0.0]).collect(),
                    set.iter().map(|p| p.1).collect(),
                )
            }
        };
        let n = spec.n_cells;
        let dx = (hi - lo) / n as f64;
        let centers = (0..n).map(|i| [lo + (i as f64 + 0.5) * dx, 0.0]).collect();
        let interior_faces = (0..n - 1)
            .map(|i| InteriorFace {
                left: i,
                right: i + 1,
                normal: [1.0, 0.0],
                length: 1.0,
            })
            .collect();
        let boundary_sides = vec![
            BoundarySide {
                cell: 0,
                position: [lo, 0.0],
                normal: [-1.0, 0.0],
                length: 1.0,
            },
            BoundarySide {
                cell: n - 1,
                position: [hi, 0.0],
                normal: [1.0, 0.0],
                length: 1.0,
            },
        ];
        Ok(Self {
            dim: 1,
            domain: spec.domain.clone(),
            n_cells_axis: n,
            dx,
            cell_measure: dx,
            centers,
            velocities,
            vel_weights,
            radius: lo.abs().max(hi.abs()),
            interior_faces,
            boundary_sides,
        })
    }

    fn build_disk(spec: &GeometrySpec, radius: f64) -> Result<Self> {
        if !(radius.is_finite() && radius > 0.0) {
            return Err(StcError::InvalidDomain(format!(
                "disk radius must be positive, got {radius}"
            )));
        }
        if spec.n_velocities < 2 {
            return Err(StcError::InvalidParameter(
                "need at least two directions on the circle".into(),
            ));
        }
        let n = spec.n_cells;
        let h = 2.0 * radius / n as f64;
        let mut index = vec![usize::MAX; n * n];
        let mut centers = Vec::new();
        for iy in 0..n {
            for ix in 0..n {
                let c = [
                    -radius + (ix as f64 + 0.5) * h,
                    -radius + (iy as f64 + 0.5) * h,
                ];
                if norm(c) < radius {
                    index[iy * n + ix] = centers.len();
                    centers.push(c);
                }
            }
        }
        if centers.is_empty() {
            return Err(StcError::InvalidDomain("disk resolves to no cells".into()));
        }
        let mut interior_faces = Vec::new();
        let mut boundary_sides = Vec::new();
        let dirs: [(i64, i64, Point); 4] = [
            (1, 0, [1.0, 0.0]),
            (-1, 0, [-1.0, 0.0]),
            (0, 1, [0.0, 1.0]),
            (0, -1, [0.0, -1.0]),
        ];
        for iy in 0..n {
            for ix in 0..n {
                let c = index[iy * n + ix];
                if c == usize::MAX {
                    continue;
                }
                for &(sx, sy, normal) in &dirs {
                    let (jx, jy) = (ix as i64 + sx, iy as i64 + sy);
                    let nb = if (0..n as i64).contains(&jx) && (0..n as i64).contains(&jy) {
                        index[jy as usize * n + jx as usize]
                    } else {
                        usize::MAX
                    };
                    if nb == usize::MAX {
                        let p = centers[c];
                        boundary_sides.push(BoundarySide {
                            cell: c,
                            position: [p[0] + 0.5 * h * normal[0], p[1] + 0.5 * h * normal[1]],
                            normal,
                            length: h,
                        });
                    } else if sx + sy > 0 {
                        interior_faces.push(InteriorFace {
                            left: c,
                            right: nb,
                            normal,
                            length: h,
                        });
                    }
                }
            }
        }
        let m = spec.n_velocities;
        let velocities = (0..m)
            .map(|j| {
                let a = 2.0 * PI * j as f64 / m as f64;
                [a.cos(), a.sin()]
            })
            .collect();
        let domain = spec.domain.clone();
        // area-preserving cells: the discrete disk carries the exact measure
        let cell_measure = domain.measure() / centers.len() as f64;
        Ok(Self {
            dim: 2,
            domain,
            n_cells_axis: n,
            dx: h,
            cell_measure,
            centers,
            velocities,
            vel_weights: vec![2.0 * PI / m as f64; m],
            radius,
            interior_faces,
            boundary_sides,
        })
    }

    pub fn n_cells(&self) -> usize {
        self.centers.len()
    }

    pub fn n_velocities(&self) -> usize {
        self.velocities.len()
    }

    pub fn n_dof(&self) -> usize {
        self.n_cells() * self.n_velocities()
    }

    pub fn dof(&self, cell: usize, velocity: usize) -> usize {
        cell * self.n_velocities() + velocity
    }

    /// Quadrature weight of one degree of freedom: `|cell| · w_j`.
    pub fn dof_weight(&self, dof: usize) -> f64 {
        self.cell_measure * self.vel_weights[dof % self.n_velocities()]
    }

    pub fn dof_weights(&self) -> Vec<f64> {
        (0..self.n_dof()).map(|p| self.dof_weight(p)).collect()
    }

    /// `∫∫ a b dS dx` for two grid fields.
    pub fn inner(&self, a: &[f64], b: &[f64]) -> f64 {
        let nv = self.n_velocities();
        a.chunks(nv)
            .zip(b.chunks(nv))
            .map(|(x, y)| {
                x.iter()
                    .zip(y)
                    .zip(&self.vel_weights)
                    .map(|((p, q), w)| w * p * q)
                    .sum::<f64>()
            })
            .sum::<f64>()
            * self.cell_measure
    }

    pub fn norm_sq(&self, a: &[f64]) -> f64 {
        self.inner(a, a)
    }

    pub fn velocity_sum(&self) -> f64 {
        self.vel_weights.iter().sum()
    }

    /// Every (boundary side, velocity) pair, in side-major order.
    pub fn classify_boundary(&self) -> Vec<BoundaryFace> {
        let mut out = Vec::with_capacity(self.boundary_sides.len() * self.n_velocities());
        for (face_id, side) in self.boundary_sides.iter().enumerate() {
            for (j, &u) in self.velocities.iter().enumerate() {
                let sign = dot(u, side.normal);
                out.push(BoundaryFace {
                    face_id,
                    cell: side.cell,
                    position: side.position,
                    normal: side.normal,
                    velocity: j,
                    sign,
                    inflow: is_inflow(u, side.normal),
                    length: side.length,
                });
            }
        }
        out
    }

    pub fn inflow_faces(&self) -> Vec<BoundaryFace> {
        self.classify_boundary()
            .into_iter()
            .filter(|f| f.inflow)
            .collect()
    }

    /// Smallest horizon for which exact controllability is asserted: `2R`.
    pub fn min_control_time(&self) -> f64 {
        2.0 * self.radius
    }

    /// Checks the structural invariants; used by tests and after deserialization.
    pub fn validate(&self) -> Result<()> {
        let sphere = if self.dim == 1 { 2.0 } else { 2.0 * PI };
        if (self.velocity_sum() - sphere).abs() > 1e-12 {
            return Err(StcError::InvalidParameter(format!(
                "velocity weights sum to {}, expected {sphere}",
                self.velocity_sum()
            )));
        }
        if self
            .velocities
            .iter()
            .any(|&u| (norm(u) - 1.0).abs() > 1e-12)
        {
            return Err(StcError::InvalidParameter("non-unit velocity".into()));
        }
        let total = self.cell_measure * self.n_cells() as f64;
        if (total - self.domain.measure()).abs() > 1e-12 {
            return Err(StcError::InvalidParameter(format!(
                "cells cover {total}, domain measure is {}",
                self.domain.measure()
            )));
        }
        if self.radius <= 0.0 {
            return Err(StcError::InvalidDomain("R must be positive".into()));
        }
        Ok(())
    }
}

/// Boundary data on inflow pairs, one value per (level, node, transport
/// substep of that level, inflow pair).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryTrace {
    pub n_inflow: usize,
    /// Substeps belonging to each tree level.
    pub substeps: Vec<usize>,
    /// Duration of one substep.
    pub substep_len: f64,
    pub levels: Vec<Vec<f64>>,
}

impl BoundaryTrace {
    pub fn zeros(n_inflow: usize, substeps: Vec<usize>, substep_len: f64) -> Self {
        let levels = substeps
            .iter()
            .enumerate()
            .map(|(k, &m)| vec![0.0; (m * n_inflow) << k])
            .collect();
        Self {
            n_inflow,
            substeps,
            substep_len,
            levels,
        }
    }

    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    /// Values of all substeps and inflow pairs at one node.
    pub fn node(&self, level: usize, node: usize) -> &[f64] {
        let w = self.substeps[level] * self.n_inflow;
        &self.levels[level][node * w..(node + 1) * w]
    }

    pub fn node_width(&self, level: usize) -> usize {
        self.substeps[level] * self.n_inflow
    }

    pub fn same_shape(&self, other: &BoundaryTrace) -> bool {
        self.n_inflow == other.n_inflow && self.substeps == other.substeps
    }

    pub fn scale(&mut self, a: f64) {
        self.levels.iter_mut().flatten().for_each(|x| *x *= a);
    }

    pub fn axpy(&mut self, a: f64, other: &BoundaryTrace) {
        for (l, o) in self.levels.iter_mut().zip(&other.levels) {
            l.iter_mut().zip(o).for_each(|(x, y)| *x += a * y);
        }
    }

    /// `E Σ_s h Σ_b w_b g_b h_b` over the whole horizon.
    pub fn inner(&self, other: &BoundaryTrace, g: &Geometry) -> f64 {
        let weights: Vec<f64> = g
            .inflow_faces()
            .iter()
            .map(|f| f.weight(&g.vel_weights))
            .collect();
        self.inner_with(other, &weights)
    }

    pub(crate) fn inner_with(&self, other: &BoundaryTrace, weights: &[f64]) -> f64 {
        let nb = self.n_inflow;
        self.levels
            .iter()
            .zip(&other.levels)
            .enumerate()
            .map(|(k, (a, b))| {
                let p = 0.5f64.powi(k as i32);
                let s: f64 = a
                    .chunks(nb.max(1))
                    .zip(b.chunks(nb.max(1)))
                    .map(|(x, y)| {
                        x.iter()
                            .zip(y)
                            .zip(weights)
                            .map(|((p, q), w)| w * p * q)
                            .sum::<f64>()
                    })
                    .sum();
                p * s
            })
            .sum::<f64>()
            * self.substep_len
    }
}

/// `sqrt(Σ_{k,node,substep,face} p(node) · h · (-U·ν) · |face| · w_j · |h|^2)`.
pub fn weighted_inflow_norm(trace: &BoundaryTrace, g: &Geometry) -> Result<f64> {
    let inflow = g.inflow_faces();
    if trace.n_inflow != inflow.len() {
        return Err(StcError::Shape(format!(
            "trace carries {} inflow pairs, geometry has {}",
            trace.n_inflow,
            inflow.len()
        )));
    }
    for (k, l) in trace.levels.iter().enumerate() {
        if l.len() != (trace.substeps[k] * trace.n_inflow) << k {
            return Err(StcError::Shape(format!("trace level {k} has wrong length")));
        }
    }
    Ok(trace.inner(trace, g).max(0.0).sqrt())
}
