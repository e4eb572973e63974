//! Penalized Lagrangian `|v|^2/2 - V - eps U` and its Euler-Lagrange flow.

mod integrator;
mod potential;

pub use integrator::{integrate_smooth, IntegrationError, Trajectory};
pub(crate) use integrator::{adaptive_step, dopri_step, hermite, pack, unpack, OdeSystem};
pub use potential::{default_resolution, PotentialField, PotentialSpec, PotentialStats, StatsSource};

use serde::{Deserialize, Serialize};

use crate::geometry::{GeometryError, Jet, Penalty, Point};

/// Position, velocity and time of a trajectory sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseState {
    pub q: Point,
    pub v: Point,
    pub t: f64,
}

impl PhaseState {
    pub fn new(q: Point, v: Point, t: f64) -> Self {
        Self { q, v, t }
    }
}

/// Potential plus penalty at a fixed strength `eps`.
///
/// With `eps == 0` or no penalty the penalty is never evaluated, so the
/// system is also usable outside the collar-admissible region.
#[derive(Debug, Clone, Copy)]
pub struct PenalizedSystem<'a> {
    pub potential: &'a PotentialField,
    pub penalty: Option<Penalty<'a>>,
    pub eps: f64,
}

impl<'a> PenalizedSystem<'a> {
    pub fn new(potential: &'a PotentialField, penalty: Option<Penalty<'a>>, eps: f64) -> Self {
        Self {
            potential,
            penalty,
            eps,
        }
    }

    fn active_penalty(&self) -> Option<&Penalty<'a>> {
        if self.eps > 0.0 {
            self.penalty.as_ref()
        } else {
            None
        }
    }

    /// Value and derivatives of the effective potential `V + eps U`.
    pub fn effective_jet(&self, q: &Point) -> Result<Jet, GeometryError> {
        let mut jet = self.potential.jet(q);
        if let Some(pen) = self.active_penalty() {
            let u = pen.penalty_u(q)?;
            jet.value += self.eps * u.value;
            jet.gradient += u.gradient * self.eps;
            jet.hessian += u.hessian * self.eps;
        }
        Ok(jet)
    }

    pub fn effective_value(&self, q: &Point) -> Result<f64, GeometryError> {
        let mut w = self.potential.value(q);
        if let Some(pen) = self.active_penalty() {
            w += self.eps * pen.penalty_u(q)?.value;
        }
        Ok(w)
    }

    pub fn acceleration(&self, q: &Point) -> Result<Point, GeometryError> {
        let mut a = -self.potential.gradient(q);
        if let Some(pen) = self.active_penalty() {
            a -= pen.penalty_u(q)?.gradient * self.eps;
        }
        Ok(a)
    }

    pub fn energy(&self, q: &Point, v: &Point) -> Result<f64, GeometryError> {
        Ok(0.5 * v.norm_squared() + self.effective_value(q)?)
    }
}

/// `-grad V(q) - eps grad U(q)`.
pub fn el_acceleration(
    q: &Point,
    pot: &PotentialField,
    pen: Option<&Penalty<'_>>,
    eps: f64,
) -> Result<Point, GeometryError> {
    PenalizedSystem::new(pot, pen.copied(), eps).acceleration(q)
}

/// `|v|^2/2 + V(q) + eps U(q)`.
pub fn energy(
    q: &Point,
    v: &Point,
    pot: &PotentialField,
    pen: Option<&Penalty<'_>>,
    eps: f64,
) -> Result<f64, GeometryError> {
    PenalizedSystem::new(pot, pen.copied(), eps).energy(q, v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{CollarProfile, Domain, DomainSpec};
    use approx::assert_relative_eq;
    use nalgebra::dvector;

    fn unit_disk() -> Domain {
        Domain::new(DomainSpec::Disk { radius: 1.0, dim: 2 }).unwrap()
    }

    #[test]
    fn acceleration_examples() {
        let d = unit_disk();
        let zero = PotentialField::new(PotentialSpec::Zero, &d).unwrap();
        let a = el_acceleration(&dvector![0.2, 0.9], &zero, None, 0.0).unwrap();
        assert_eq!(a, dvector![0.0, 0.0]);
        let harm = PotentialField::new(
            PotentialSpec::Harmonic {
                omega: 1.0,
                center: None,
            },
            &d,
        )
        .unwrap();
        let a = el_acceleration(&dvector![0.3, 0.0], &harm, None, 0.0).unwrap();
        assert_relative_eq!(a, dvector![-0.3, 0.0], epsilon = 1e-15);
    }

    #[test]
    fn penalized_acceleration_matches_finite_differences() {
        let d = unit_disk();
        let zero = PotentialField::new(PotentialSpec::Zero, &d).unwrap();
        let pen = Penalty::new(&d, CollarProfile::for_domain(&d));
        let eps = 1e-3;
        let sys = PenalizedSystem::new(&zero, Some(pen), eps);
        let q = dvector![0.6, 0.7];
        let a = el_acceleration(&q, &zero, Some(&pen), eps).unwrap();
        let h = 1e-7;
        for i in 0..2 {
            let mut e = dvector![0.0, 0.0];
            e[i] = h;
            let fd = (sys.effective_value(&(&q + &e)).unwrap()
                - sys.effective_value(&(&q - &e)).unwrap())
                / (2.0 * h);
            assert!((-fd - a[i]).abs() <= 1e-6 * a.norm());
        }
        assert!(a.norm() > 0.0);
    }

    #[test]
    fn zero_eps_never_touches_penalty() {
        // The penalty would fail outside the domain; with eps = 0 it must not be consulted.
        let d = unit_disk();
        let zero = PotentialField::new(PotentialSpec::Zero, &d).unwrap();
        let pen = Penalty::new(&d, CollarProfile::for_domain(&d));
        let q = dvector![3.0, 0.0];
        assert!(el_acceleration(&q, &zero, Some(&pen), 0.0).is_ok());
        assert!(el_acceleration(&q, &zero, Some(&pen), 1e-3).is_err());
    }

    #[test]
    fn energy_examples() {
        let d = unit_disk();
        let zero = PotentialField::new(PotentialSpec::Zero, &d).unwrap();
        let e = energy(&dvector![0.0, 0.0], &dvector![0.6, 0.8], &zero, None, 0.0).unwrap();
        assert_relative_eq!(e, 0.5);
        let harm = PotentialField::new(
            PotentialSpec::Harmonic {
                omega: 1.0,
                center: None,
            },
            &d,
        )
        .unwrap();
        let e = energy(&dvector![1.0, 0.0], &dvector![0.0, 0.0], &harm, None, 0.0).unwrap();
        assert_relative_eq!(e, 0.5);
        // h = 0.1 at distance 0.1 from the circle, inside the identity part of the cutoff
        let pen = Penalty::new(&d, CollarProfile::new(0.2).unwrap());
        let e = energy(&dvector![0.9, 0.0], &dvector![0.0, 0.0], &zero, Some(&pen), 0.01).unwrap();
        assert_relative_eq!(e, 1.0, epsilon = 1e-12);
    }
}
