//! The `eps -> 0` limit: a warm-started sequence of penalized critical
//! points, bounce extraction from the concentrating penalty density and
//! assembly of the limiting bounce orbit.

mod assemble;
mod extract;

pub use assemble::{assemble_bounce_orbit, AssembleOptions, Assembly};
pub use extract::{
    detect_collapse, extract_bounce_times, extract_from_density, BounceExtraction, ClusterOptions,
    CollapseKind, CollapseOptions, CollapseReport,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::{find_critical_point, morse_index, ActionProblem, CriticalPoint, DiscreteLoop, SolveError, SolverOptions};
use crate::dynamics::{PenalizedSystem, PotentialField, PotentialStats};
use crate::geometry::{CollarProfile, Domain, GeometryError, Penalty};

#[derive(Debug, Error)]
pub enum ContinuationError {
    #[error("energy {energy} must exceed the maximum {v_max} of the potential over the closed domain")]
    Regularity { energy: f64, v_max: f64 },
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Geometric schedule of dimensionless penalty strengths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpsSchedule {
    pub start: f64,
    pub floor: f64,
    pub ratio: f64,
}

impl Default for EpsSchedule {
    fn default() -> Self {
        Self {
            start: 0.1,
            floor: 1e-5,
            ratio: 0.5,
        }
    }
}

impl EpsSchedule {
    /// `start, start * ratio, ...` down to `floor`, which is always the last entry.
    pub fn values(&self) -> Result<Vec<f64>, ContinuationError> {
        if !(self.start > 0.0 && self.floor > 0.0 && self.floor <= self.start) {
            return Err(ContinuationError::InvalidSchedule(format!(
                "need 0 < floor <= start, got start {} floor {}",
                self.start, self.floor
            )));
        }
        if !(self.ratio > 0.0 && self.ratio < 1.0) {
            return Err(ContinuationError::InvalidSchedule(format!(
                "ratio {} must lie in (0, 1)",
                self.ratio
            )));
        }
        let mut out = Vec::new();
        let mut e = self.start;
        while e > self.floor * (1.0 + 1e-12) {
            out.push(e);
            e *= self.ratio;
        }
        out.push(self.floor);
        Ok(out)
    }
}

/// Physical penalty strength per unit of dimensionless strength: the energy
/// gap times the squared plateau value of the collar function, so that
/// `eps U` on the plateau equals the dimensionless strength times the gap.
pub fn eps_unit(energy: f64, stats: &PotentialStats, profile: &CollarProfile) -> f64 {
    let gap = if energy > stats.v_max {
        energy - stats.v_max
    } else if stats.v_max > stats.v_min {
        stats.v_max - stats.v_min
    } else {
        1.0
    };
    gap * profile.plateau().powi(2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContinuationOptions {
    pub solver: SolverOptions,
    /// Refuse to start unless the energy exceeds the maximum of the potential.
    pub enforce_regularity: bool,
    /// Loops with smaller diameter count as collapsed.
    pub diam_floor: f64,
    /// Stop after this many consecutive collapsed records.
    pub max_collapsed: usize,
}

impl Default for ContinuationOptions {
    fn default() -> Self {
        Self {
            solver: SolverOptions::default(),
            enforce_regularity: true,
            diam_floor: 0.0,
            max_collapsed: 2,
        }
    }
}

/// Scale-aware floors for the period and loop diameter.
pub fn collapse_floors(domain: &Domain, energy: f64, v_min: f64) -> (f64, f64) {
    let speed = (2.0 * (energy - v_min)).max(1e-300).sqrt();
    (1e-3 * domain.diameter() / speed, 1e-3 * domain.diameter())
}

/// Solve at one penalty strength.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuationRecord {
    /// Physical penalty strength.
    pub eps: f64,
    /// Dimensionless strength from the schedule.
    pub eps_scaled: f64,
    pub critical_point: CriticalPoint,
    pub converged: bool,
    pub collapsed: bool,
    /// `2 eps h^-3 |grad h|^2` at every node.
    pub penalty_density: Vec<f64>,
    /// Mean of the density over the nodes (integral over normalized time).
    pub density_mass: f64,
    /// `H^1` distance to the previous loop.
    pub h1_step: Option<f64>,
    pub message: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuationRun {
    pub records: Vec<ContinuationRecord>,
    /// Why the run ended before the schedule was exhausted.
    pub stopped: Option<String>,
    /// Every density mass stayed within ten times the first one.
    pub mass_bounded: bool,
}

impl ContinuationRun {
    pub fn last_converged(&self) -> Option<&ContinuationRecord> {
        self.records.iter().rev().find(|r| r.converged && !r.collapsed)
    }

    /// Schedule completed with a converged, non-collapsed final record.
    pub fn completed(&self) -> bool {
        self.stopped.is_none() && self.records.last().is_some_and(|r| r.converged && !r.collapsed)
    }
}

/// `2 eps h^-3 |grad h|^2` at every node; zero on the plateau of the collar.
pub fn penalty_density(
    lp: &DiscreteLoop,
    penalty: &Penalty<'_>,
    eps: f64,
) -> Result<Vec<f64>, GeometryError> {
    (0..lp.len())
        .map(|i| {
            let c = penalty.collar_h(&lp.node(i))?;
            let h = c.h.value;
            Ok(2.0 * eps * c.h.gradient.norm_squared() / (h * h * h))
        })
        .collect()
}

/// Solves the penalized problems along `schedule` (dimensionless strengths),
/// each warm-started from the previous solution.
#[allow(clippy::too_many_arguments)]
pub fn run_continuation(
    init: &DiscreteLoop,
    schedule: &[f64],
    energy: f64,
    pot: &PotentialField,
    domain: &Domain,
    profile: &CollarProfile,
    opts: &ContinuationOptions,
) -> Result<ContinuationRun, ContinuationError> {
    let stats = pot.stats();
    if opts.enforce_regularity && energy <= stats.v_max {
        return Err(ContinuationError::Regularity {
            energy,
            v_max: stats.v_max,
        });
    }
    if schedule.is_empty() || schedule.windows(2).any(|w| w[1] >= w[0]) || schedule.iter().any(|e| *e <= 0.0) {
        return Err(ContinuationError::InvalidSchedule(
            "schedule must be positive and strictly decreasing".into(),
        ));
    }
    let penalty = Penalty::new(domain, *profile);
    let unit = eps_unit(energy, stats, profile);
    let mut records: Vec<ContinuationRecord> = Vec::new();
    let mut current = init.clone();
    let mut previous: Option<DiscreteLoop> = None;
    let mut collapsed_run = 0;
    let mut stopped = None;
    for &scaled in schedule {
        let eps = scaled * unit;
        let system = PenalizedSystem::new(pot, Some(penalty), eps);
        let problem = ActionProblem::new(system, energy);
        let outcome = find_critical_point(&current, &problem, &opts.solver);
        let (cp, converged, message) = match outcome {
            Ok(cp) => (cp, true, None),
            Err(err @ (SolveError::Collapse(_) | SolveError::TauFloor(_))) => {
                let best = err.best().expect("collapse carries an iterate").clone();
                let cp = CriticalPoint {
                    morse_index: morse_index(&best.curve, &system, opts.solver.index_tol).unwrap_or(0),
                    energy_residual: problem.energy_residual(&best.curve).unwrap_or(f64::NAN),
                    curve: best.curve,
                    gradient_norm: best.gradient_norm,
                    iterations: best.iterations,
                };
                (cp, false, Some(err.to_string()))
            }
            Err(err) => {
                stopped = Some(format!("solve failed at eps = {eps:.3e}: {err}"));
                break;
            }
        };
        let collapsed = !converged
            || cp.curve.tau < opts.solver.tau_floor
            || cp.curve.diameter() < opts.diam_floor;
        let density = penalty_density(&cp.curve, &penalty, eps)?;
        let density_mass = density.iter().sum::<f64>() / density.len() as f64;
        let h1_step = previous.as_ref().map(|p| p.h1_distance(&cp.curve));
        log::info!(
            "eps = {eps:.3e}: tau = {:.6}, |grad| = {:.2e}, index = {}, mass = {density_mass:.4}{}",
            cp.curve.tau,
            cp.gradient_norm,
            cp.morse_index,
            if collapsed { ", collapsed" } else { "" }
        );
        previous = Some(cp.curve.clone());
        current = cp.curve.clone();
        records.push(ContinuationRecord {
            eps,
            eps_scaled: scaled,
            critical_point: cp,
            converged,
            collapsed,
            penalty_density: density,
            density_mass,
            h1_step,
            message,
        });
        if collapsed {
            collapsed_run += 1;
            if collapsed_run >= opts.max_collapsed {
                stopped = Some(format!("loop collapsed on {collapsed_run} consecutive strengths"));
                break;
            }
        } else {
            collapsed_run = 0;
        }
    }
    let mass_bounded = match records.first() {
        Some(first) => records
            .iter()
            .all(|r| r.density_mass <= 10.0 * first.density_mass + 1e-12),
        None => true,
    };
    Ok(ContinuationRun {
        records,
        stopped,
        mass_bounded,
    })
}
