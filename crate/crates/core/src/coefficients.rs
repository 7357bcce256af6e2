//! Coefficients of the forward equation and their random generators.
//!
//! A coefficient is stored per degree of freedom (`a1`, `a3`, `f`) or per
//! `(cell, velocity, velocity)` triple (`a2`, index `(cell * nv + j) * nv + m`).
//! Each may be zero, a constant, a deterministic function of the level, or a
//! fully adapted field on the tree.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, StcError};
use crate::tree::AdaptedField;

/// Generator for one named purpose of a run seed.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub enum Coef {
    #[default]
    Zero,
    Constant(f64),
    /// One vector per tree level, or a single vector used at every level.
    Deterministic(Vec<Vec<f64>>),
    Adapted(AdaptedField),
}

/// Borrowed view of a coefficient at one node.
#[derive(Debug, Clone, Copy)]
pub enum NodeCoef<'a> {
    Zero,
    Constant(f64),
    Values(&'a [f64]),
}

impl NodeCoef<'_> {
    #[inline]
    pub fn get(&self, i: usize) -> f64 {
        match *self {
            NodeCoef::Zero => 0.0,
            NodeCoef::Constant(c) => c,
            NodeCoef::Values(v) => v[i],
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, NodeCoef::Zero)
    }
}

impl Coef {
    pub fn at(&self, level: usize, node: usize) -> NodeCoef<'_> {
        match self {
            Coef::Zero => NodeCoef::Zero,
            Coef::Constant(c) => NodeCoef::Constant(*c),
            Coef::Deterministic(l) if l.len() == 1 => NodeCoef::Values(&l[0]),
            Coef::Deterministic(l) => NodeCoef::Values(&l[level]),
            Coef::Adapted(f) => NodeCoef::Values(f.node(level, node)),
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            Coef::Zero => true,
            Coef::Constant(c) => *c == 0.0,
            Coef::Deterministic(l) => l.iter().flatten().all(|&x| x == 0.0),
            Coef::Adapted(f) => f.max_abs() == 0.0,
        }
    }

    pub fn is_deterministic(&self) -> bool {
        !matches!(self, Coef::Adapted(_))
    }

    pub fn sup_norm(&self) -> f64 {
        match self {
            Coef::Zero => 0.0,
            Coef::Constant(c) => c.abs(),
            Coef::Deterministic(l) => l.iter().flatten().fold(0.0, |m, x| m.max(x.abs())),
            Coef::Adapted(f) => f.max_abs(),
        }
    }

    pub fn negated(&self) -> Coef {
        match self {
            Coef::Zero => Coef::Zero,
            Coef::Constant(c) => Coef::Constant(-c),
            Coef::Deterministic(l) => {
                Coef::Deterministic(l.iter().map(|v| v.iter().map(|x| -x).collect()).collect())
            }
            Coef::Adapted(f) => {
                let mut f = f.clone();
                f.scale(-1.0);
                Coef::Adapted(f)
            }
        }
    }

    /// Applies `op` to the per-node vector of every stored sample.
    pub fn map_vectors(&self, op: impl Fn(&[f64]) -> Vec<f64>) -> Coef {
        match self {
            Coef::Zero => Coef::Zero,
            Coef::Constant(c) => Coef::Constant(*c),
            Coef::Deterministic(l) => Coef::Deterministic(l.iter().map(|v| op(v)).collect()),
            Coef::Adapted(f) => {
                let w = f.width();
                let levels = f
                    .levels()
                    .iter()
                    .map(|l| l.chunks(w).flat_map(&op).collect())
                    .collect();
                Coef::Adapted(AdaptedField::from_levels(w, levels).expect("width preserved"))
            }
        }
    }

    fn check_shape(&self, name: &str, width: usize, n_levels: usize) -> Result<()> {
        match self {
            Coef::Zero | Coef::Constant(_) => Ok(()),
            Coef::Deterministic(l) => {
                if !(l.len() == 1 || l.len() >= n_levels) || l.iter().any(|v| v.len() != width) {
                    return Err(StcError::Shape(format!(
                        "{name}: deterministic samples must be {width} wide, one per level"
                    )));
                }
                Ok(())
            }
            Coef::Adapted(f) => {
                if f.width() != width || f.n_levels() < n_levels {
                    return Err(StcError::Shape(format!(
                        "{name}: adapted field is {} wide with {} levels, need {width} wide and {n_levels} levels",
                        f.width(),
                        f.n_levels()
                    )));
                }
                Ok(())
            }
        }
    }
}

/// Declared sup-norm bounds of `a1, a2, a3`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoefBounds {
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct CoefficientSet {
    pub a1: Coef,
    pub a2: Coef,
    pub a3: Coef,
    pub f: Coef,
    pub bounds: Option<CoefBounds>,
}

impl CoefficientSet {
    pub fn zero() -> Self {
        Self::default()
    }

    /// Checks shapes against the grid and samples against declared bounds.
    pub fn validate(&self, n_cells: usize, n_vel: usize, n_steps: usize) -> Result<()> {
        let nd = n_cells * n_vel;
        self.a1.check_shape("a1", nd, n_steps)?;
        self.a2.check_shape("a2", nd * n_vel, n_steps)?;
        self.a3.check_shape("a3", nd, n_steps)?;
        self.f.check_shape("f", nd, n_steps)?;
        if let Some(b) = self.bounds {
            for (name, c, bound) in [
                ("a1", &self.a1, b.a1),
                ("a2", &self.a2, b.a2),
                ("a3", &self.a3, b.a3),
            ] {
                let s = c.sup_norm();
                if s > bound * (1.0 + 1e-12) {
                    return Err(StcError::InvalidParameter(format!(
                        "{name} has sup norm {s}, declared bound {bound}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// `|a1|² + |a2| + |a3| + 1`.
    pub fn r1(&self) -> f64 {
        let (a1, a2, a3) = match self.bounds {
            Some(b) => (b.a1, b.a2, b.a3),
            None => (self.a1.sup_norm(), self.a2.sup_norm(), self.a3.sup_norm()),
        };
        a1 * a1 + a2 + a3 + 1.0
    }

    /// True when `a1`, `a2`, `a3` and `f` are all non-random.
    pub fn is_deterministic(&self) -> bool {
        self.a1.is_deterministic()
            && self.a2.is_deterministic()
            && self.a3.is_deterministic()
            && self.f.is_deterministic()
    }
}

/// Recipe for random bounded coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RandomCoefSpec {
    pub bound_a1: f64,
    pub bound_a2: f64,
    pub bound_a3: f64,
    /// Amplitude of the source `f`; zero disables it.
    pub source: f64,
    /// Adapted samples when true, one deterministic sample per level otherwise.
    pub adapted: bool,
}

impl RandomCoefSpec {
    pub fn uniform(bound: f64, adapted: bool) -> Self {
        Self {
            bound_a1: bound,
            bound_a2: bound,
            bound_a3: bound,
            source: 0.0,
            adapted,
        }
    }

    /// Samples `|a_i| <= bound_i` uniformly per node and entry.
    pub fn sample(
        &self,
        n_cells: usize,
        n_vel: usize,
        n_steps: usize,
        rng: &mut impl Rng,
    ) -> CoefficientSet {
        let nd = n_cells * n_vel;
        let mut draw = |width: usize, b: f64| -> Coef {
            if b == 0.0 {
                return Coef::Zero;
            }
            if self.adapted {
                Coef::Adapted(AdaptedField::from_fn(width, n_steps, |_, _, _| {
                    rng.random_range(-b..=b)
                }))
            } else {
                Coef::Deterministic(
                    (0..n_steps)
                        .map(|_| (0..width).map(|_| rng.random_range(-b..=b)).collect())
                        .collect(),
                )
            }
        };
        let a1 = draw(nd, self.bound_a1);
        let a2 = draw(nd * n_vel, self.bound_a2);
        let a3 = draw(nd, self.bound_a3);
        let f = draw(nd, self.source);
        CoefficientSet {
            a1,
            a2,
            a3,
            f,
            bounds: Some(CoefBounds {
                a1: self.bound_a1,
                a2: self.bound_a2,
                a3: self.bound_a3,
            }),
        }
    }
}
