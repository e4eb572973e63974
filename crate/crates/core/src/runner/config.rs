use std::path::Path;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::RunError;
use crate::action::{DiscreteLoop, SolverOptions, MIN_NODES};
use crate::continuation::{AssembleOptions, ClusterOptions, CollapseKind, EpsSchedule};
use crate::dynamics::PotentialSpec;
use crate::geometry::{DomainSpec, Point};
use crate::orbit::{tangent_basis, ShootingOptions};

pub const SCHEMA_VERSION: u32 = 1;

/// Shape of the initial loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitShape {
    /// Back-and-forth motion along `direction` through `center`, close to a
    /// triangle wave of the given amplitude, with an optional transverse wobble.
    Diameter {
        direction: Vec<f64>,
        amplitude: f64,
        #[serde(default)]
        center: Option<Vec<f64>>,
        #[serde(default)]
        wobble: f64,
    },
    Circle {
        radius: f64,
        #[serde(default)]
        center: Option<Vec<f64>>,
    },
    /// Ellipse with semi-axes along the first two coordinates.
    Ellipse {
        semi_axes: [f64; 2],
        #[serde(default)]
        center: Option<Vec<f64>>,
    },
    Constant { point: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitSpec {
    #[serde(flatten)]
    pub shape: InitShape,
    /// Initial period guess.
    pub period: f64,
    /// Standard deviation of the seeded Gaussian perturbation of every node.
    #[serde(default)]
    pub noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContinuationSection {
    pub enforce_regularity: bool,
    pub max_collapsed: usize,
}

impl Default for ContinuationSection {
    fn default() -> Self {
        Self {
            enforce_regularity: true,
            max_collapsed: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerifySection {
    pub reflection_tol: f64,
    pub energy_tol: f64,
    /// Agreement required between the continuation limit and the refined orbit.
    pub agreement_tol: f64,
    /// Largest density mass allowed for a smooth orbit.
    pub smooth_mass_max: f64,
    pub refine: bool,
}

impl Default for VerifySection {
    fn default() -> Self {
        Self {
            reflection_tol: 1e-9,
            energy_tol: 1e-9,
            agreement_tol: 1e-3,
            smooth_mass_max: 1e-6,
            refine: true,
        }
    }
}

/// Optional regression expectations; a mismatch fails the run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Expectations {
    pub bounces: Option<usize>,
    pub period: Option<f64>,
    pub period_tol: Option<f64>,
    pub collapse: Option<CollapseKind>,
    pub morse_index: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputSection {
    pub summary: bool,
    pub trace: bool,
    pub csv: bool,
    pub plot: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            summary: true,
            trace: true,
            csv: true,
            plot: true,
        }
    }
}

/// Free flight used by the `oracle` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSection {
    pub start: Vec<f64>,
    /// Launch direction; the speed follows from the energy.
    pub direction: Vec<f64>,
    pub duration: f64,
    /// Refine the first this many impacts into a periodic orbit.
    #[serde(default)]
    pub periodic_bounces: Option<usize>,
    #[serde(default = "default_oracle_tol")]
    pub tol: f64,
}

fn default_oracle_tol() -> f64 {
    1e-12
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub schema_version: u32,
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub energy: f64,
    /// Number of loop nodes.
    pub nodes: usize,
    pub domain: DomainSpec,
    pub potential: PotentialSpec,
    /// One or more initial loops, solved independently.
    pub init: Vec<InitSpec>,
    #[serde(default)]
    pub schedule: EpsSchedule,
    #[serde(default)]
    pub solver: SolverOptions,
    #[serde(default)]
    pub continuation: ContinuationSection,
    #[serde(default)]
    pub clusters: ClusterOptions,
    #[serde(default)]
    pub assemble: AssembleOptions,
    #[serde(default)]
    pub shooting: ShootingOptions,
    #[serde(default)]
    pub verify: VerifySection,
    #[serde(default)]
    pub expect: Expectations,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub oracle: Option<OracleSection>,
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self, RunError> {
        let cfg: Self = toml::from_str(text).map_err(|e| RunError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, RunError> {
        let text = std::fs::read_to_string(path).map_err(|e| RunError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let bad = |m: String| Err(RunError::Config(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if !self.energy.is_finite() {
            return bad(format!("energy {} is not finite", self.energy));
        }
        if self.nodes < MIN_NODES {
            return bad(format!("nodes = {} is below the minimum {MIN_NODES}", self.nodes));
        }
        if self.init.is_empty() {
            return bad("at least one [[init]] loop is required".into());
        }
        let dim = self.dim();
        for (k, init) in self.init.iter().enumerate() {
            if !(init.period > 0.0) {
                return bad(format!("init {k}: period must be positive"));
            }
            if !(init.noise >= 0.0) {
                return bad(format!("init {k}: noise must be nonnegative"));
            }
            let lens: Vec<usize> = match &init.shape {
                InitShape::Diameter { direction, center, .. } => {
                    let mut v = vec![direction.len()];
                    v.extend(center.as_ref().map(|c| c.len()));
                    v
                }
                InitShape::Circle { center, .. } | InitShape::Ellipse { center, .. } => {
                    center.as_ref().map(|c| vec![c.len()]).unwrap_or_default()
                }
                InitShape::Constant { point } => vec![point.len()],
            };
            if lens.iter().any(|&l| l != dim) {
                return bad(format!("init {k}: vectors must have {dim} components"));
            }
            if matches!(init.shape, InitShape::Circle { .. } | InitShape::Ellipse { .. }) && dim < 2 {
                return bad(format!("init {k}: planar loops need at least two dimensions"));
            }
        }
        if let Some(o) = &self.oracle {
            if o.start.len() != dim || o.direction.len() != dim {
                return bad(format!("oracle start and direction must have {dim} components"));
            }
            if !(o.duration > 0.0) {
                return bad("oracle duration must be positive".into());
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        match &self.domain {
            DomainSpec::Disk { dim, .. } => *dim,
            DomainSpec::Ellipse { .. } | DomainSpec::SmoothRect { .. } => 2,
        }
    }

    /// Initial loop `k`, perturbed with a generator seeded from the scenario seed.
    pub fn initial_loop(&self, k: usize) -> Result<DiscreteLoop, RunError> {
        let init = &self.init[k];
        let dim = self.dim();
        let tau = std::f64::consts::TAU;
        let vec = |v: &Option<Vec<f64>>| v.as_ref().map_or(Point::zeros(dim), |c| DVector::from_column_slice(c));
        let shape = 0.99_f64;
        let lp = match &init.shape {
            InitShape::Diameter {
                direction,
                amplitude,
                center,
                wobble,
            } => {
                let dir = DVector::from_column_slice(direction);
                let len = dir.norm();
                if !(len > 0.0) {
                    return Err(RunError::Config(format!("init {k}: zero direction")));
                }
                let dir = dir / len;
                let side = if dim > 1 {
                    tangent_basis(&dir).column(0).into_owned()
                } else {
                    Point::zeros(1)
                };
                let c = vec(center);
                DiscreteLoop::from_fn(self.nodes, dim, init.period, |t| {
                    let s = (tau * t).sin();
                    let along = amplitude * (shape * s).asin() / shape.asin();
                    &c + &dir * along + &side * (wobble * (tau * t).cos())
                })
            }
            InitShape::Circle { radius, center } => {
                let c = vec(center);
                DiscreteLoop::from_fn(self.nodes, dim, init.period, |t| {
                    let mut q = c.clone();
                    q[0] += radius * (tau * t).cos();
                    q[1] += radius * (tau * t).sin();
                    q
                })
            }
            InitShape::Ellipse { semi_axes, center } => {
                let c = vec(center);
                DiscreteLoop::from_fn(self.nodes, dim, init.period, |t| {
                    let mut q = c.clone();
                    q[0] += semi_axes[0] * (tau * t).cos();
                    q[1] += semi_axes[1] * (tau * t).sin();
                    q
                })
            }
            InitShape::Constant { point } => {
                let p = DVector::from_column_slice(point);
                DiscreteLoop::from_fn(self.nodes, dim, init.period, |_| p.clone())
            }
        }
        .map_err(|e| RunError::Config(format!("init {k}: {e}")))?;
        if init.noise == 0.0 {
            return Ok(lp);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(k as u64));
        let normal = Normal::new(0.0, init.noise).map_err(|e| RunError::Config(e.to_string()))?;
        let mut nodes = lp.nodes.clone();
        nodes.iter_mut().for_each(|x| *x += normal.sample(&mut rng));
        DiscreteLoop::new(nodes, lp.tau).map_err(|e| RunError::Config(format!("init {k}: {e}")))
    }
}
