use nalgebra::DVector;
use thiserror::Error;

use super::{PenalizedSystem, PhaseState};
use crate::geometry::{GeometryError, Point};

#[derive(Debug, Error)]
pub enum IntegrationError {
    #[error("step size underflow at t = {}: h = {h:.3e}", .last.t)]
    StepUnderflow { last: PhaseState, h: f64 },
    #[error("trajectory left the domain at t = {}", .last.t)]
    DomainExit { last: PhaseState },
    #[error("invalid integration request: {0}")]
    Invalid(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// First-order system `y' = f(y)` with a conserved energy.
pub(crate) trait OdeSystem {
    fn rhs(&self, y: &DVector<f64>) -> Result<DVector<f64>, GeometryError>;
    fn energy(&self, y: &DVector<f64>) -> Result<f64, GeometryError>;
    /// Whether a state may be accepted as a step endpoint.
    fn admissible(&self, _y: &DVector<f64>) -> bool {
        true
    }
}

pub(crate) fn pack(q: &Point, v: &Point) -> DVector<f64> {
    let n = q.len();
    DVector::from_fn(2 * n, |i, _| if i < n { q[i] } else { v[i - n] })
}

pub(crate) fn unpack(y: &DVector<f64>, t: f64) -> PhaseState {
    let n = y.len() / 2;
    PhaseState {
        q: y.rows(0, n).into_owned(),
        v: y.rows(n, n).into_owned(),
        t,
    }
}

impl OdeSystem for PenalizedSystem<'_> {
    fn rhs(&self, y: &DVector<f64>) -> Result<DVector<f64>, GeometryError> {
        let n = y.len() / 2;
        let q = y.rows(0, n).into_owned();
        let a = self.acceleration(&q)?;
        Ok(DVector::from_fn(2 * n, |i, _| if i < n { y[n + i] } else { a[i - n] }))
    }

    fn energy(&self, y: &DVector<f64>) -> Result<f64, GeometryError> {
        let n = y.len() / 2;
        let q = y.rows(0, n).into_owned();
        let v = y.rows(n, n).into_owned();
        PenalizedSystem::energy(self, &q, &v)
    }

    fn admissible(&self, y: &DVector<f64>) -> bool {
        match (&self.penalty, self.eps > 0.0) {
            (Some(pen), true) => {
                let n = y.len() / 2;
                pen.domain.implicit(&y.rows(0, n).into_owned()) < 0.0
            }
            _ => true,
        }
    }
}

const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

/// One Dormand-Prince step of size `h` from `y` with `f0 = f(y)`.
/// Returns the fifth-order solution, the embedded error estimate and `f` at the new point.
pub(crate) fn dopri_step<S: OdeSystem + ?Sized>(
    sys: &S,
    y: &DVector<f64>,
    f0: &DVector<f64>,
    h: f64,
) -> Result<(DVector<f64>, DVector<f64>, DVector<f64>), GeometryError> {
    let k1 = f0;
    let k2 = sys.rhs(&(y + k1 * (h * A21)))?;
    let k3 = sys.rhs(&(y + (k1 * A31 + &k2 * A32) * h))?;
    let k4 = sys.rhs(&(y + (k1 * A41 + &k2 * A42 + &k3 * A43) * h))?;
    let k5 = sys.rhs(&(y + (k1 * A51 + &k2 * A52 + &k3 * A53 + &k4 * A54) * h))?;
    let k6 = sys.rhs(&(y + (k1 * A61 + &k2 * A62 + &k3 * A63 + &k4 * A64 + &k5 * A65) * h))?;
    let y5 = y + (k1 * B1 + &k3 * B3 + &k4 * B4 + &k5 * B5 + &k6 * B6) * h;
    let k7 = sys.rhs(&y5)?;
    let err = (k1 * E1 + &k3 * E3 + &k4 * E4 + &k5 * E5 + &k6 * E6 + &k7 * E7) * h;
    Ok((y5, err, k7))
}

pub(crate) struct Accepted {
    pub y: DVector<f64>,
    pub f: DVector<f64>,
    pub energy: f64,
    pub h_done: f64,
    pub h_next: f64,
}

/// Error-controlled step of at most `h_max`, retried with smaller sizes on
/// rejection. A step is rejected when the embedded error exceeds `tol`, when
/// the energy jumps by more than `tol * h`, or when the endpoint is not admissible.
pub(crate) fn adaptive_step<S: OdeSystem + ?Sized>(
    sys: &S,
    y: &DVector<f64>,
    f0: &DVector<f64>,
    e_prev: f64,
    mut h: f64,
    h_max: f64,
    h_min: f64,
    tol: f64,
) -> Result<Accepted, f64> {
    h = h.min(h_max);
    loop {
        if h < h_min {
            return Err(h);
        }
        let trial = dopri_step(sys, y, f0, h);
        let factor = match trial {
            Ok((y5, err, f5)) => {
                let mut ratio = 0.0_f64;
                for i in 0..y.len() {
                    let scale = tol * (1.0 + y[i].abs().max(y5[i].abs()));
                    ratio = ratio.max(err[i].abs() / scale);
                }
                let energy = if sys.admissible(&y5) {
                    sys.energy(&y5).ok()
                } else {
                    None
                };
                match energy {
                    Some(e1) => {
                        let budget = tol * h + 1e3 * f64::EPSILON * (1.0 + e_prev.abs());
                        let drift = (e1 - e_prev).abs() / budget;
                        if ratio <= 1.0 && drift <= 1.0 {
                            let grow = if ratio == 0.0 {
                                5.0
                            } else {
                                (0.9 * ratio.powf(-0.2)).clamp(0.2, 5.0)
                            };
                            return Ok(Accepted {
                                y: y5,
                                f: f5,
                                energy: e1,
                                h_done: h,
                                h_next: h * grow,
                            });
                        }
                        if ratio > 1.0 {
                            (0.9 * ratio.powf(-0.2)).clamp(0.1, 0.9)
                        } else {
                            0.5
                        }
                    }
                    None => 0.25,
                }
            }
            Err(_) => 0.25,
        };
        h *= factor;
    }
}

/// Densely sampled solution of the penalized flow.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub states: Vec<PhaseState>,
    accelerations: Vec<Point>,
    pub energy_start: f64,
    pub energy_end: f64,
    /// `max |E(t) - E(0)|` over the accepted steps.
    pub energy_drift: f64,
    pub steps: usize,
}

impl Trajectory {
    pub fn start(&self) -> &PhaseState {
        &self.states[0]
    }

    pub fn end(&self) -> &PhaseState {
        self.states.last().expect("trajectory is never empty")
    }

    pub fn duration(&self) -> f64 {
        self.end().t - self.start().t
    }

    /// Cubic Hermite interpolation between accepted steps.
    pub fn sample(&self, t: f64) -> PhaseState {
        let t0 = self.start().t;
        let t1 = self.end().t;
        let t = t.clamp(t0, t1);
        let idx = match self
            .states
            .binary_search_by(|s| s.t.partial_cmp(&t).expect("finite times"))
        {
            Ok(i) => return self.states[i].clone(),
            Err(i) => i.max(1) - 1,
        };
        hermite(
            &self.states[idx],
            &self.accelerations[idx],
            &self.states[idx + 1],
            &self.accelerations[idx + 1],
            t,
        )
    }
}

/// Cubic Hermite interpolation of position (with velocity slopes) and of
/// velocity (with acceleration slopes) between two states.
pub(crate) fn hermite(a: &PhaseState, fa: &Point, b: &PhaseState, fb: &Point, t: f64) -> PhaseState {
    let h = b.t - a.t;
    if h == 0.0 {
        return a.clone();
    }
    let s = (t - a.t) / h;
    let s2 = s * s;
    let s3 = s2 * s;
    let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
    let h10 = s3 - 2.0 * s2 + s;
    let h01 = -2.0 * s3 + 3.0 * s2;
    let h11 = s3 - s2;
    let q = &a.q * h00 + &a.v * (h10 * h) + &b.q * h01 + &b.v * (h11 * h);
    let v = &a.v * h00 + fa * (h10 * h) + &b.v * h01 + fb * (h11 * h);
    PhaseState { q, v, t }
}

/// Integrates the penalized Euler-Lagrange flow for `duration` time units.
pub fn integrate_smooth(
    start: &PhaseState,
    sys: &PenalizedSystem<'_>,
    duration: f64,
    tol: f64,
) -> Result<Trajectory, IntegrationError> {
    if !(duration > 0.0) || !(tol > 0.0) {
        return Err(IntegrationError::Invalid(format!(
            "duration {duration} and tol {tol} must be positive"
        )));
    }
    let mut y = pack(&start.q, &start.v);
    if !sys.admissible(&y) {
        return Err(IntegrationError::DomainExit {
            last: start.clone(),
        });
    }
    let mut f = sys.rhs(&y)?;
    let e0 = OdeSystem::energy(sys, &y)?;
    let n = start.q.len();
    let accel_of = |f: &DVector<f64>| f.rows(n, n).into_owned();
    let mut t = start.t;
    let t_end = start.t + duration;
    let mut states = vec![start.clone()];
    let mut accelerations = vec![accel_of(&f)];
    let mut drift = 0.0_f64;
    let mut energy_end = e0;
    let scale = (y.norm() + 1.0) / (f.norm() + 1.0);
    let mut h = (0.01 * scale * tol.powf(0.2)).min(duration);
    let h_min = 1e-13 * duration.max(1.0);
    let mut steps = 0usize;
    while t_end - t > 1e-14 * duration.max(1.0) {
        let h_max = t_end - t;
        let acc = adaptive_step(sys, &y, &f, energy_end, h, h_max, h_min.min(0.5 * h_max), tol)
            .map_err(|h| IntegrationError::StepUnderflow {
                last: unpack(&y, t),
                h,
            })?;
        t = if acc.h_done >= h_max { t_end } else { t + acc.h_done };
        y = acc.y;
        f = acc.f;
        drift = drift.max((acc.energy - e0).abs());
        energy_end = acc.energy;
        states.push(unpack(&y, t));
        accelerations.push(accel_of(&f));
        h = acc.h_next;
        steps += 1;
    }
    Ok(Trajectory {
        states,
        accelerations,
        energy_start: e0,
        energy_end,
        energy_drift: drift,
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{PotentialField, PotentialSpec};
    use crate::geometry::{CollarProfile, Domain, DomainSpec, Penalty};
    use approx::assert_relative_eq;
    use nalgebra::dvector;
    use std::f64::consts::PI;

    fn unit_disk() -> Domain {
        Domain::new(DomainSpec::Disk { radius: 1.0, dim: 2 }).unwrap()
    }

    #[test]
    fn free_particle_moves_in_a_straight_line() {
        let d = unit_disk();
        let pot = PotentialField::new(PotentialSpec::Zero, &d).unwrap();
        let sys = PenalizedSystem::new(&pot, None, 0.0);
        let start = PhaseState::new(dvector![0.0, 0.0], dvector![1.0, 0.0], 0.0);
        let traj = integrate_smooth(&start, &sys, 0.5, 1e-10).unwrap();
        assert_relative_eq!(traj.end().q, dvector![0.5, 0.0], epsilon = 1e-12);
        assert_relative_eq!(traj.end().v, dvector![1.0, 0.0], epsilon = 1e-12);
        assert_relative_eq!(traj.end().t, 0.5);
    }

    #[test]
    fn isotropic_oscillator_circle_closes_after_one_period() {
        let d = unit_disk();
        let pot = PotentialField::new(
            PotentialSpec::Harmonic {
                omega: 1.0,
                center: None,
            },
            &d,
        )
        .unwrap();
        let sys = PenalizedSystem::new(&pot, None, 0.0);
        let start = PhaseState::new(dvector![0.5, 0.0], dvector![0.0, 0.5], 0.0);
        let traj = integrate_smooth(&start, &sys, 2.0 * PI, 1e-10).unwrap();
        assert!((&traj.end().q - &start.q).norm() < 1e-6);
        assert!((&traj.end().v - &start.v).norm() < 1e-6);
        assert!(traj.energy_drift < 1e-8 * traj.energy_start);
        // dense output follows the closed form
        for k in 0..50 {
            let t = 2.0 * PI * k as f64 / 50.0;
            let s = traj.sample(t);
            let exact = dvector![0.5 * t.cos(), 0.5 * t.sin()];
            assert!((s.q - exact).norm() < 1e-6);
        }
    }

    /// Turning time of the radial motion `r'' = -eps U'(r)` with `U = (1-r)^-2`
    /// in the identity part of the collar, from the energy quadrature
    /// `t = int dr / sqrt(2(E - eps U(r)))`.
    fn radial_turning_oracle(eps: f64, d0: f64, e: f64) -> (f64, f64) {
        // Plateau region: free motion until 1 - r = 2 d0 (U constant there).
        let profile = CollarProfile::new(d0).unwrap();
        let w = |r: f64| {
            let (k, _, _) = profile.eval(1.0 - r);
            eps / (k * k)
        };
        // turning radius: W(r*) = E, bisect on the monotone part
        let (mut lo, mut hi) = (1.0 - 2.0 * d0, 1.0 - 1e-9);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if w(mid) < e {
                lo = mid
            } else {
                hi = mid
            }
        }
        let r_star = 0.5 * (lo + hi);
        // substitution r = r* - s^2 removes the inverse square root singularity
        let s_max = (r_star - 0.0).sqrt();
        let n = 200_000;
        let mut t = 0.0;
        for i in 0..n {
            let s = s_max * (i as f64 + 0.5) / n as f64;
            let r = r_star - s * s;
            let speed = (2.0 * (e - w(r))).max(0.0).sqrt();
            t += 2.0 * s / speed * (s_max / n as f64);
        }
        (r_star, t)
    }

    #[test]
    fn penalized_radial_motion_turns_at_the_quadrature_radius() {
        let d = unit_disk();
        let pot = PotentialField::new(PotentialSpec::Zero, &d).unwrap();
        let profile = CollarProfile::for_domain(&d);
        let pen = Penalty::new(&d, profile);
        let eps = 1e-2;
        let sys = PenalizedSystem::new(&pot, Some(pen), eps);
        let start = PhaseState::new(dvector![0.0, 0.0], dvector![1.0, 0.0], 0.0);
        let e = sys.energy(&start.q, &start.v).unwrap();
        let (r_star, t_turn) = radial_turning_oracle(eps, profile.d0(), e);
        let traj = integrate_smooth(&start, &sys, 2.0 * t_turn, 1e-11).unwrap();
        assert!(traj.energy_drift < 1e-8);
        let turn = traj.sample(t_turn);
        assert!((turn.q[0] - r_star).abs() < 1e-5, "{} vs {r_star}", turn.q[0]);
        assert!(turn.v.norm() < 1e-3);
        // reversed and back at the origin after twice the turning time
        assert!(traj.end().q.norm() < 1e-5);
        assert!(traj.end().v[0] < -0.99);
        for s in &traj.states {
            assert!(s.q.norm() < 1.0);
        }
    }

    #[test]
    fn time_reversal_returns_to_start() {
        let d = unit_disk();
        let pot = PotentialField::new(
            PotentialSpec::Gaussian {
                amplitude: 0.3,
                center: vec![0.2, -0.1],
                width: 0.5,
            },
            &d,
        )
        .unwrap();
        let pen = Penalty::new(&d, CollarProfile::for_domain(&d));
        let sys = PenalizedSystem::new(&pot, Some(pen), 1e-3);
        let start = PhaseState::new(dvector![0.1, 0.2], dvector![0.7, 0.4], 0.0);
        let fwd = integrate_smooth(&start, &sys, 3.0, 1e-11).unwrap();
        let end = fwd.end();
        let back_start = PhaseState::new(end.q.clone(), -&end.v, 0.0);
        let back = integrate_smooth(&back_start, &sys, 3.0, 1e-11).unwrap();
        assert!((&back.end().q - &start.q).norm() < 1e-6);
        assert!((&back.end().v + &start.v).norm() < 1e-6);
    }

    #[test]
    fn drift_is_reported_within_budget() {
        let d = unit_disk();
        let pot = PotentialField::new(
            PotentialSpec::Linear {
                g: 1.0,
                direction: vec![0.0, 1.0],
            },
            &d,
        )
        .unwrap();
        let pen = Penalty::new(&d, CollarProfile::for_domain(&d));
        let sys = PenalizedSystem::new(&pot, Some(pen), 1e-4);
        let start = PhaseState::new(dvector![0.0, 0.0], dvector![0.3, 2.0], 0.0);
        let tol = 1e-9;
        let traj = integrate_smooth(&start, &sys, 4.0, tol).unwrap();
        assert!(traj.energy_drift <= (10.0 * tol * 4.0f64).max(1e-12));
        assert!((traj.energy_end - traj.energy_start).abs() <= traj.energy_drift + 1e-15);
    }
}
