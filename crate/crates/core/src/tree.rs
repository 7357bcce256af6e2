//! Binomial discretization of a one-dimensional Brownian filtration.
//!
//! Level `k` of the tree holds `2^k` nodes. Bit `i` of a node id records the
//! sign of increment `i + 1` (set bit means `+sqrt(dt)`), so the two children
//! of node `n` at level `k` are `n` (down move) and `n + 2^k` (up move). A
//! level-`k+1` array therefore splits into a contiguous "down" half followed
//! by a contiguous "up" half, which is what every per-level kernel exploits.

use serde::{Deserialize, Serialize};

use crate::error::{Result, StcError};
use crate::par;

/// Deepest tree accepted by [`ScenarioTree::new`] (2^24 leaves).
pub const MAX_DEPTH: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioTree {
    horizon: f64,
    n_steps: usize,
    dt: f64,
    sqrt_dt: f64,
}

impl ScenarioTree {
    pub fn new(horizon: f64, n_steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(StcError::InvalidParameter(format!(
                "horizon must be positive, got {horizon}"
            )));
        }
        if n_steps == 0 || n_steps > MAX_DEPTH {
            return Err(StcError::ResourceLimit {
                requested: n_steps,
                max: MAX_DEPTH,
            });
        }
        let dt = horizon / n_steps as f64;
        Ok(Self {
            horizon,
            n_steps,
            dt,
            sqrt_dt: dt.sqrt(),
        })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn sqrt_dt(&self) -> f64 {
        self.sqrt_dt
    }

    pub fn n_nodes(&self, level: usize) -> usize {
        1usize << level
    }

    pub fn n_leaves(&self) -> usize {
        1usize << self.n_steps
    }

    /// Probability of a single node at `level`.
    pub fn prob(&self, level: usize) -> f64 {
        (0.5f64).powi(level as i32)
    }

    pub fn time(&self, level: usize) -> f64 {
        level as f64 * self.dt
    }

    /// Increment `ΔB_{level}` leading into `node` (which lives at `level >= 1`).
    pub fn increment(&self, level: usize, node: usize) -> f64 {
        debug_assert!(level >= 1);
        if (node >> (level - 1)) & 1 == 1 {
            self.sqrt_dt
        } else {
            -self.sqrt_dt
        }
    }

    /// Ancestor of leaf-or-inner `node` (at any deeper level) at `level`.
    pub fn ancestor(&self, node: usize, level: usize) -> usize {
        node & ((1usize << level) - 1)
    }

    /// Discrete `E[x | F_k]` for `x` measurable at level `k + 1`.
    pub fn conditional_expectation(&self, x: &AdaptedScalar, level: usize) -> Result<Vec<f64>> {
        let slice = x.level_checked(level + 1)?;
        Ok(cond_expectation(slice, 1, level))
    }

    /// Discrete stochastic integral `Σ_k ρ_k ΔB_{k+1}` on the terminal level.
    ///
    /// `rho` must carry levels `0..n_steps`.
    pub fn ito_integral(&self, rho: &AdaptedScalar) -> Result<Vec<f64>> {
        if rho.n_levels() != self.n_steps || rho.width() != 1 {
            return Err(StcError::Shape(format!(
                "integrand needs {} scalar levels, got {} levels of width {}",
                self.n_steps,
                rho.n_levels(),
                rho.width()
            )));
        }
        let mut acc = vec![0.0];
        for k in 0..self.n_steps {
            let half = 1usize << k;
            let r = rho.level(k);
            let mut next = vec![0.0; 2 * half];
            let (down, up) = next.split_at_mut(half);
            for n in 0..half {
                down[n] = acc[n] - r[n] * self.sqrt_dt;
                up[n] = acc[n] + r[n] * self.sqrt_dt;
            }
            acc = next;
        }
        Ok(acc)
    }

    /// Exact representation `ξ = x0 + Σ_k ρ_k ΔB_{k+1}` of a terminal variable.
    pub fn martingale_representation(&self, xi: &[f64]) -> Result<(f64, AdaptedScalar)> {
        if xi.len() != self.n_leaves() {
            return Err(StcError::Shape(format!(
                "terminal variable needs {} leaves, got {}",
                self.n_leaves(),
                xi.len()
            )));
        }
        let mut levels = vec![Vec::new(); self.n_steps];
        let mut cur = xi.to_vec();
        for k in (0..self.n_steps).rev() {
            levels[k] = cond_increment(&cur, 1, k, self.sqrt_dt);
            cur = cond_expectation(&cur, 1, k);
        }
        Ok((cur[0], AdaptedField::from_levels(1, levels)?))
    }

    /// `E[x]` of a terminal variable by direct leaf averaging.
    pub fn mean_terminal(&self, x: &[f64]) -> f64 {
        x.iter().sum::<f64>() / x.len() as f64
    }
}

/// Values of an adapted process on consecutive levels `0..n_levels`, each
/// node carrying `width` reals. Level `k` is stored contiguously node-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptedField {
    width: usize,
    levels: Vec<Vec<f64>>,
}

/// Width-one adapted field.
pub type AdaptedScalar = AdaptedField;

impl AdaptedField {
    pub fn zeros(width: usize, n_levels: usize) -> Self {
        let levels = (0..n_levels).map(|k| vec![0.0; width << k]).collect();
        Self { width, levels }
    }

    pub fn from_levels(width: usize, levels: Vec<Vec<f64>>) -> Result<Self> {
        for (k, l) in levels.iter().enumerate() {
            if l.len() != width << k {
                return Err(StcError::Shape(format!(
                    "level {k} has {} values, expected {}",
                    l.len(),
                    width << k
                )));
            }
        }
        Ok(Self { width, levels })
    }

    /// Builds a field by evaluating `f(level, node, slot)`.
    pub fn from_fn(
        width: usize,
        n_levels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let levels = (0..n_levels)
            .map(|k| {
                (0..(1usize << k))
                    .flat_map(|n| (0..width).map(move |i| (n, i)))
                    .map(|(n, i)| f(k, n, i))
                    .collect()
            })
            .collect();
        Self { width, levels }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn level(&self, k: usize) -> &[f64] {
        &self.levels[k]
    }

    pub fn level_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.levels[k]
    }

    pub fn level_checked(&self, k: usize) -> Result<&[f64]> {
        self.levels
            .get(k)
            .map(Vec::as_slice)
            .ok_or(StcError::LevelMismatch {
                expected: k,
                got: self.levels.len().saturating_sub(1),
            })
    }

    pub fn node(&self, k: usize, n: usize) -> &[f64] {
        &self.levels[k][n * self.width..(n + 1) * self.width]
    }

    pub fn node_mut(&mut self, k: usize, n: usize) -> &mut [f64] {
        let w = self.width;
        &mut self.levels[k][n * w..(n + 1) * w]
    }

    pub fn levels(&self) -> &[Vec<f64>] {
        &self.levels
    }

    pub fn into_levels(self) -> Vec<Vec<f64>> {
        self.levels
    }

    pub fn last(&self) -> &[f64] {
        self.levels.last().map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn push_level(&mut self, values: Vec<f64>) -> Result<()> {
        let k = self.levels.len();
        if values.len() != self.width << k {
            return Err(StcError::Shape(format!(
                "level {k} needs {} values, got {}",
                self.width << k,
                values.len()
            )));
        }
        self.levels.push(values);
        Ok(())
    }

    pub fn scale(&mut self, a: f64) {
        self.levels.iter_mut().flatten().for_each(|x| *x *= a);
    }

    /// `self += a * other`.
    pub fn axpy(&mut self, a: f64, other: &AdaptedField) {
        for (l, o) in self.levels.iter_mut().zip(&other.levels) {
            l.iter_mut().zip(o).for_each(|(x, y)| *x += a * y);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.levels
            .iter()
            .flatten()
            .fold(0.0f64, |m, x| m.max(x.abs()))
    }
}

/// `E_k[x]` for a level-`k+1` slice of the given width.
pub fn cond_expectation(next: &[f64], width: usize, level: usize) -> Vec<f64> {
    let half = (1usize << level) * width;
    let (down, up) = next.split_at(half);
    let mut out = vec![0.0; half];
    par::for_each_chunk(&mut out, width.max(1) * 64, |c, chunk| {
        let off = c * width.max(1) * 64;
        for (i, o) in chunk.iter_mut().enumerate() {
            *o = 0.5 * (down[off + i] + up[off + i]);
        }
    });
    out
}

/// `E_k[x ΔB_{k+1}] / dt` for a level-`k+1` slice.
pub fn cond_increment(next: &[f64], width: usize, level: usize, sqrt_dt: f64) -> Vec<f64> {
    let half = (1usize << level) * width;
    let (down, up) = next.split_at(half);
    let s = 0.5 / sqrt_dt;
    let mut out = vec![0.0; half];
    par::for_each_chunk(&mut out, width.max(1) * 64, |c, chunk| {
        let off = c * width.max(1) * 64;
        for (i, o) in chunk.iter_mut().enumerate() {
            *o = s * (up[off + i] - down[off + i]);
        }
    });
    out
}

/// The dyadic ±1 schedule: `+1` on `[(1 - 4^{-i})T, (1 - 2^{-2i-1})T)`,
/// `-1` elsewhere on `[0, T)`.
pub fn peng_eta(t: f64, horizon: f64) -> Result<f64> {
    if !(t >= 0.0 && t < horizon) {
        return Err(StcError::InvalidParameter(format!(
            "time {t} outside [0, {horizon})"
        )));
    }
    // s in (2^{-m-1}, 2^{-m}] with m even <=> eta = +1
    let s = 1.0 - t / horizon;
    let mut m = 0u32;
    while s <= 0.5f64.powi(m as i32 + 1) {
        m += 1;
    }
    Ok(if m.is_multiple_of(2) { 1.0 } else { -1.0 })
}

/// `η(t_k)` on the grid `t_k = k T / n`, evaluated in exact integer arithmetic.
pub fn peng_eta_grid(k: usize, n: usize) -> f64 {
    debug_assert!(k < n);
    let rem = (n - k) as u128;
    let n = n as u128;
    let mut m = 0u32;
    while rem << (m + 1) <= n {
        m += 1;
    }
    if m.is_multiple_of(2) {
        1.0
    } else {
        -1.0
    }
}

/// `ξ = Σ_k η(t_k) ΔB_{k+1}` on the terminal level.
pub fn peng_xi(tree: &ScenarioTree) -> Vec<f64> {
    let n = tree.n_steps();
    let rho = AdaptedField::from_fn(1, n, |k, _, _| peng_eta_grid(k, n));
    tree.ito_integral(&rho)
        .expect("shape is consistent by construction")
}

/// Number of sign changes of `η` sampled at `t_0, …, t_{n-1}`.
pub fn peng_sign_changes(n: usize) -> usize {
    (1..n)
        .filter(|&k| peng_eta_grid(k, n) != peng_eta_grid(k - 1, n))
        .count()
}
