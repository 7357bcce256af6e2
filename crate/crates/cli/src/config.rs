//! Run configuration: `[section]` headers with `key = value` lines.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stc_core::carleman::{default_c, lambda_one};
use stc_core::{
    adjoint_from_forward, rng_for, Coef, CoefBounds, CoefficientSet, Discretization, Geometry,
    GeometrySpec, RandomCoefSpec, ScenarioTree, SubstepRule,
};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub geometry: GeometryConfig,
    pub tree: TreeConfig,
    pub coefficients: CoefConfig,
    pub weight: WeightConfig,
    pub solver: SolverConfig,
    pub data: DataConfig,
    pub negative: NegativeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("stc-out"),
            geometry: GeometryConfig::default(),
            tree: TreeConfig::default(),
            coefficients: CoefConfig::default(),
            weight: WeightConfig::default(),
            solver: SolverConfig::default(),
            data: DataConfig::default(),
            negative: NegativeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainKind {
    Interval,
    Disk,
}

/// Either the keyword `"auto"` or a number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AutoOr<T> {
    Value(T),
    Keyword(String),
}

impl<T: Copy> AutoOr<T> {
    fn resolve(
        &self,
        key: &str,
        auto: impl FnOnce() -> Result<T, CliError>,
    ) -> Result<T, CliError> {
        match self {
            AutoOr::Value(v) => Ok(*v),
            AutoOr::Keyword(k) if k == "auto" => auto(),
            AutoOr::Keyword(k) => Err(CliError::Config(format!(
                "{key}: expected a number or \"auto\", got \"{k}\""
            ))),
        }
    }
}

fn auto<T>() -> AutoOr<T> {
    AutoOr::Keyword("auto".into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryConfig {
    pub domain: DomainKind,
    pub lo: f64,
    pub hi: f64,
    pub radius: f64,
    /// Interval cells, or cells per axis of the disk's bounding box.
    pub cells: usize,
    /// Directions on the circle; the interval always uses ±1.
    pub velocities: usize,
    /// Transport substeps per tree level.
    pub substeps: AutoOr<usize>,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self {
            domain: DomainKind::Interval,
            lo: -0.5,
            hi: 0.5,
            radius: 1.0,
            cells: 32,
            velocities: 4,
            substeps: auto(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TreeConfig {
    pub horizon: f64,
    pub steps: usize,
}

impl Default for TreeConfig {
    fn default() -> Self {
        Self {
            horizon: 1.5,
            steps: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoefKind {
    Zero,
    Constant,
    /// `a_i cos(time_freq·t) cos(space_freq·x₁)`.
    Separable,
    /// Uniform samples bounded by `bound` (and `source` for `f`).
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoefConfig {
    pub kind: CoefKind,
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    pub f: f64,
    pub time_freq: f64,
    pub space_freq: f64,
    pub bound: f64,
    pub source: f64,
    pub adapted: bool,
}

impl Default for CoefConfig {
    fn default() -> Self {
        Self {
            kind: CoefKind::Zero,
            a1: 0.0,
            a2: 0.0,
            a3: 0.0,
            f: 0.0,
            time_freq: 1.0,
            space_freq: 1.0,
            bound: 1.0,
            source: 0.0,
            adapted: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightConfig {
    pub lambda: AutoOr<f64>,
    pub c: AutoOr<f64>,
}

impl Default for WeightConfig {
    fn default() -> Self {
        Self {
            lambda: auto(),
            c: auto(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub tol: f64,
    pub max_iter: usize,
    pub eig_iterations: usize,
    pub eig_cg_tol: f64,
    pub eig_cg_max_iter: usize,
    /// Random instances for the sampled checks.
    pub samples: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 200,
            eig_iterations: 20,
            eig_cg_tol: 1e-12,
            eig_cg_max_iter: 2000,
            samples: 20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Field {
    Zero,
    One,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Controls {
    None,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub initial: Field,
    pub target: Field,
    pub controls: Controls,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            initial: Field::Random,
            target: Field::Random,
            controls: Controls::None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeChoice {
    VOffG0,
    DriftOnly,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NegativeConfig {
    pub half_width: f64,
    pub cells: usize,
    pub horizon: f64,
    pub a3: f64,
    pub depths: Vec<usize>,
    pub g0: [f64; 2],
    pub mode: ModeChoice,
    pub budget: usize,
    pub random_v: usize,
}

impl Default for NegativeConfig {
    fn default() -> Self {
        Self {
            half_width: 0.5,
            cells: 16,
            horizon: 1.0,
            a3: 1.0,
            depths: vec![2, 4, 6],
            g0: [-0.25, 0.25],
            mode: ModeChoice::Both,
            budget: 4000,
            random_v: 20,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn geometry_spec(&self) -> GeometrySpec {
        let g = &self.geometry;
        match g.domain {
            DomainKind::Interval => GeometrySpec::interval(g.lo, g.hi, g.cells),
            DomainKind::Disk => GeometrySpec::disk(g.radius, g.cells * g.cells, g.velocities),
        }
    }

    pub fn substep_rule(&self) -> Result<SubstepRule, CliError> {
        Ok(match self.geometry.substeps {
            AutoOr::Value(m) => SubstepRule::PerLevel(m),
            ref k => {
                k.resolve("geometry.substeps", || Ok(0))?;
                SubstepRule::Auto
            }
        })
    }

    pub fn discretization(&self) -> Result<Discretization, CliError> {
        let g = Geometry::build(&self.geometry_spec())?;
        let tree = ScenarioTree::new(self.tree.horizon, self.tree.steps)?;
        Ok(Discretization::new(g, tree, self.substep_rule()?)?)
    }

    pub fn coefficients(&self, disc: &Discretization) -> Result<CoefficientSet, CliError> {
        let c = &self.coefficients;
        let g = &disc.geometry;
        let (nc, nv, n) = (g.n_cells(), g.n_velocities(), disc.n_steps());
        let set = match c.kind {
            CoefKind::Zero => CoefficientSet::zero(),
            CoefKind::Constant => CoefficientSet {
                a1: constant(c.a1),
                a2: constant(c.a2),
                a3: constant(c.a3),
                f: constant(c.f),
                bounds: None,
            },
            CoefKind::Separable => {
                let profile = |amp: f64, per_cell: usize| -> Coef {
                    if amp == 0.0 {
                        return Coef::Zero;
                    }
                    Coef::Deterministic(
                        (0..n)
                            .map(|k| {
                                let gt = (c.time_freq * disc.tree.time(k)).cos();
                                g.centers
                                    .iter()
                                    .flat_map(|x| {
                                        let v = amp * gt * (c.space_freq * x[0]).cos();
                                        std::iter::repeat_n(v, per_cell)
                                    })
                                    .collect()
                            })
                            .collect(),
                    )
                };
                CoefficientSet {
                    a1: profile(c.a1, nv),
                    a2: profile(c.a2, nv * nv),
                    a3: profile(c.a3, nv),
                    f: profile(c.f, nv),
                    bounds: Some(CoefBounds {
                        a1: c.a1.abs(),
                        a2: c.a2.abs(),
                        a3: c.a3.abs(),
                    }),
                }
            }
            CoefKind::Random => {
                if c.bound.is_nan() || c.source.is_nan() || c.bound < 0.0 || c.source < 0.0 {
                    return Err(CliError::Config(
                        "coefficients.bound and coefficients.source must be >= 0".into(),
                    ));
                }
                let spec = RandomCoefSpec {
                    source: c.source,
                    ..RandomCoefSpec::uniform(c.bound, c.adapted)
                };
                spec.sample(nc, nv, n, &mut rng_for(self.seed, streams::COEFFICIENTS))
            }
        };
        set.validate(nc, nv, n)?;
        Ok(set)
    }

    /// `(λ, c, λ₁)` with `"auto"` resolved to `λ = max(λ₁, 1)` and the
    /// midpoint rule for `c`.
    pub fn weight(
        &self,
        disc: &Discretization,
        coeffs: &CoefficientSet,
    ) -> Result<(f64, f64, f64), CliError> {
        let radius = disc.geometry.radius;
        let horizon = disc.tree.horizon();
        let c = self
            .weight
            .c
            .resolve("weight.c", || Ok(default_c(radius, horizon)?))?;
        let b = adjoint_from_forward(coeffs, disc.geometry.n_velocities());
        let l1 = lambda_one(&b, c)?;
        let lambda = self
            .weight
            .lambda
            .resolve("weight.lambda", || Ok(l1.max(1.0)))?;
        Ok((lambda, c, l1))
    }
}

fn constant(v: f64) -> Coef {
    if v == 0.0 {
        Coef::Zero
    } else {
        Coef::Constant(v)
    }
}

/// Named generator streams drawn from the run seed.
pub mod streams {
    pub const COEFFICIENTS: u64 = 1;
    pub const INITIAL: u64 = 2;
    pub const TARGET: u64 = 3;
    pub const CONTROLS: u64 = 4;
    pub const SAMPLES: u64 = 5;
}
