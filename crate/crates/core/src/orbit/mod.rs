//! Event-driven billiard flow of the unpenalized system: exact reflections,
//! invariant checks and periodic shooting.

mod events;
mod shooting;

pub use events::{first_impact, flight_arc, integrate_with_bounces, EventOptions, Impact};
pub use shooting::{refine_periodic_shooting, ShootingOptions};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{PhaseState, PotentialField};
use crate::geometry::{Domain, GeometryError, Point};

#[derive(Debug, Error)]
pub enum ReflectError {
    #[error("normal has length {0}, expected 1")]
    NotUnit(f64),
    #[error("grazing impact: normal velocity {normal_speed:.3e} below threshold {threshold:.3e}")]
    Grazing { normal_speed: f64, threshold: f64 },
}

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("grazing impact at t = {t}")]
    Grazing { t: f64, partial: Box<BounceOrbit> },
    #[error("more than {limit} impacts")]
    EventAccumulation { limit: usize, partial: Box<BounceOrbit> },
    #[error("step size underflow at t = {t}")]
    StepUnderflow { t: f64 },
    #[error("shooting needs a candidate with at least one impact")]
    NoEvents,
    #[error("shooting did not converge: residual {residual:.3e} after {iterations} iterations")]
    ShootingDiverged { residual: f64, iterations: usize },
    #[error("refined orbit has {found} impacts per period, candidate had {expected}")]
    BounceCountChanged { expected: usize, found: usize },
    #[error("start point is not inside the domain")]
    StartOutside,
    #[error(transparent)]
    Reflect(#[from] ReflectError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// One impact with the boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BounceEvent {
    pub t: f64,
    pub q: Point,
    pub v_in: Point,
    pub v_out: Point,
    /// Outer unit normal at `q`.
    pub normal: Point,
}

/// Smooth piece between impacts, sampled uniformly in time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arc {
    pub samples: Vec<PhaseState>,
}

impl Arc {
    pub fn start(&self) -> &PhaseState {
        &self.samples[0]
    }

    pub fn end(&self) -> &PhaseState {
        self.samples.last().expect("arcs have at least two samples")
    }
}

/// Piecewise smooth closed (or open, for plain integrations) trajectory with impacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BounceOrbit {
    pub arcs: Vec<Arc>,
    pub events: Vec<BounceEvent>,
    pub period: f64,
    pub energy: f64,
    pub bounce_count: usize,
}

impl BounceOrbit {
    /// All arc samples in time order.
    pub fn samples(&self) -> impl Iterator<Item = &PhaseState> {
        self.arcs.iter().flat_map(|a| a.samples.iter())
    }

    /// Distance between the end of the last arc and the start of the first.
    pub fn closure_error(&self) -> f64 {
        match (self.arcs.first(), self.arcs.last()) {
            (Some(a), Some(b)) => (&b.end().q - &a.start().q).norm(),
            _ => f64::INFINITY,
        }
    }
}

/// `v - 2 <v, n> n` for an impact with positive normal velocity.
pub fn reflect_velocity(v_in: &Point, normal: &Point, grazing_tol: f64) -> Result<Point, ReflectError> {
    let len = normal.norm();
    if (len - 1.0).abs() > 1e-12 {
        return Err(ReflectError::NotUnit(len));
    }
    let vn = v_in.dot(normal);
    if vn <= grazing_tol {
        return Err(ReflectError::Grazing {
            normal_speed: vn,
            threshold: grazing_tol,
        });
    }
    Ok(v_in - normal * (2.0 * vn))
}

/// `1e-6 * sqrt(2 (E - V_min))`: normal speeds below this are treated as grazing.
pub fn grazing_tolerance(energy: f64, v_min: f64) -> f64 {
    1e-6 * (2.0 * (energy - v_min)).max(0.0).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventResidual {
    pub index: usize,
    pub t: f64,
    /// `|<v_out, n> + <v_in, n>|`.
    pub normal_flip: f64,
    /// `|tangential(v_out) - tangential(v_in)|`.
    pub tangential: f64,
    /// `<v_in, n>`, must exceed the grazing threshold.
    pub normal_speed: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReflectionReport {
    pub events: Vec<EventResidual>,
    pub max_residual: f64,
    /// No impacts at all: the check holds vacuously.
    pub smooth: bool,
    pub pass: bool,
}

pub fn check_reflection_law(orbit: &BounceOrbit, tol: f64, grazing_tol: f64) -> ReflectionReport {
    let mut max_residual = 0.0_f64;
    let events: Vec<EventResidual> = orbit
        .events
        .iter()
        .enumerate()
        .map(|(index, ev)| {
            let n = &ev.normal;
            let vin_n = ev.v_in.dot(n);
            let vout_n = ev.v_out.dot(n);
            let tan_in = &ev.v_in - n * vin_n;
            let tan_out = &ev.v_out - n * vout_n;
            let normal_flip = (vout_n + vin_n).abs();
            let tangential = (tan_out - tan_in).norm();
            max_residual = max_residual.max(normal_flip).max(tangential);
            EventResidual {
                index,
                t: ev.t,
                normal_flip,
                tangential,
                normal_speed: vin_n,
                pass: normal_flip <= tol && tangential <= tol && vin_n > grazing_tol,
            }
        })
        .collect();
    let pass = events.iter().all(|e| e.pass);
    ReflectionReport {
        smooth: events.is_empty(),
        max_residual,
        events,
        pass,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub max_deviation: f64,
    /// Arc index and sample index of the worst sample, or `None` if it was an event side.
    pub worst_sample: Option<(usize, usize)>,
    pub pass: bool,
}

/// Largest `| |v|^2/2 + V - E |` over arc samples and both sides of every impact.
pub fn check_energy_invariant(orbit: &BounceOrbit, pot: &PotentialField, tol: f64) -> EnergyReport {
    let e = orbit.energy;
    let dev = |q: &Point, v: &Point| (0.5 * v.norm_squared() + pot.value(q) - e).abs();
    let mut max_deviation = 0.0_f64;
    let mut worst_sample = None;
    for (ai, arc) in orbit.arcs.iter().enumerate() {
        for (si, s) in arc.samples.iter().enumerate() {
            let d = dev(&s.q, &s.v);
            if d > max_deviation {
                max_deviation = d;
                worst_sample = Some((ai, si));
            }
        }
    }
    for ev in &orbit.events {
        for v in [&ev.v_in, &ev.v_out] {
            let d = dev(&ev.q, v);
            if d > max_deviation {
                max_deviation = d;
                worst_sample = None;
            }
        }
    }
    EnergyReport {
        max_deviation,
        worst_sample,
        pass: max_deviation <= tol,
    }
}

/// Orthonormal basis of the hyperplane orthogonal to the unit vector `n`, as columns.
pub(crate) fn tangent_basis(n: &Point) -> nalgebra::DMatrix<f64> {
    let dim = n.len();
    let mut basis: Vec<Point> = Vec::with_capacity(dim - 1);
    for k in 0..dim {
        if basis.len() == dim - 1 {
            break;
        }
        let mut e = Point::zeros(dim);
        e[k] = 1.0;
        let mut w = &e - n * n.dot(&e);
        for b in &basis {
            w -= b * b.dot(&w);
        }
        let len = w.norm();
        if len > 1e-6 {
            basis.push(w / len);
        }
    }
    nalgebra::DMatrix::from_columns(&basis)
}

/// Speed on the energy shell at `q`, or `None` where `V(q) > E`.
pub(crate) fn shell_speed(pot: &PotentialField, energy: f64, q: &Point) -> Option<f64> {
    let k = 2.0 * (energy - pot.value(q));
    (k >= 0.0).then(|| k.sqrt())
}

pub(crate) fn check_inside(domain: &Domain, q: &Point) -> Result<(), OracleError> {
    if domain.implicit(q) > 1e-10 {
        Err(OracleError::StartOutside)
    } else {
        Ok(())
    }
}
