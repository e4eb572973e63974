use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::events::{free_flow, integrate_with_bounces, resample, EventOptions};
use super::{tangent_basis, BounceEvent, BounceOrbit, OracleError};
use crate::dynamics::{PenalizedSystem, PhaseState, PotentialField};
use crate::geometry::{Domain, Point};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShootingOptions {
    /// Integration tolerance of each flight.
    pub flow_tol: f64,
    /// Target norm of the matching residual.
    pub residual_tol: f64,
    pub max_iters: usize,
    /// Relative finite-difference step of the Jacobian.
    pub fd_step: f64,
    pub samples_per_arc: usize,
}

impl Default for ShootingOptions {
    fn default() -> Self {
        Self {
            flow_tol: 1e-13,
            residual_tol: 1e-11,
            max_iters: 60,
            fd_step: 1e-7,
            samples_per_arc: 256,
        }
    }
}

struct Chart {
    center: Point,
    basis: DMatrix<f64>,
}

struct Shooter<'a> {
    sys: PenalizedSystem<'a>,
    pot: &'a PotentialField,
    domain: &'a Domain,
    energy: f64,
    charts: Vec<Chart>,
    dim: usize,
    tol: f64,
}

/// Impact point, outer normal and outgoing velocity of one bounce.
struct Launch {
    q: Point,
    normal: Point,
    v: Point,
}

impl Shooter<'_> {
    fn block(&self) -> usize {
        2 * (self.dim - 1) + 1
    }

    fn launch(&self, j: usize, x: &DVector<f64>) -> Result<Launch, OracleError> {
        let m = self.dim - 1;
        let b = self.block();
        let alpha = x.rows(j * b, m);
        let beta = x.rows(j * b + m, m);
        let chart = &self.charts[j];
        let (q, normal) = self.domain.boundary_projection(&(&chart.center + &chart.basis * alpha))?;
        let dir = (-&normal + &chart.basis * beta).normalize();
        let speed = (2.0 * (self.energy - self.pot.value(&q))).max(0.0).sqrt();
        Ok(Launch {
            q,
            normal,
            v: dir * speed,
        })
    }

    fn flight_time(&self, j: usize, x: &DVector<f64>) -> f64 {
        x[j * self.block() + self.block() - 1]
    }

    fn residual(&self, x: &DVector<f64>) -> Result<DVector<f64>, OracleError> {
        let k = self.charts.len();
        let n = self.dim;
        let launches: Vec<Launch> = (0..k).map(|j| self.launch(j, x)).collect::<Result<_, _>>()?;
        let mut r = DVector::zeros(2 * n * k);
        for j in 0..k {
            let next = &launches[(j + 1) % k];
            let start = PhaseState::new(launches[j].q.clone(), launches[j].v.clone(), 0.0);
            let path = free_flow(&self.sys, &start, self.flight_time(j, x), self.tol)?;
            let end = &path.last().expect("flow has a start state").0;
            let vn = end.v.dot(&next.normal);
            let reflected = &end.v - &next.normal * (2.0 * vn);
            r.rows_mut(2 * n * j, n).copy_from(&(&end.q - &next.q));
            r.rows_mut(2 * n * j + n, n).copy_from(&(reflected - &next.v));
        }
        Ok(r)
    }
}

/// Multiple-shooting Gauss-Newton refinement of a periodic bounce orbit.
///
/// Unknowns per impact are a boundary chart coordinate, the outgoing
/// direction relative to the inner normal and the flight time to the next
/// impact; speeds follow from the energy. The result starts at the first
/// impact at `t = 0` and has one arc per impact.
pub fn refine_periodic_shooting(
    candidate: &BounceOrbit,
    pot: &PotentialField,
    domain: &Domain,
    opts: &ShootingOptions,
) -> Result<BounceOrbit, OracleError> {
    let k = candidate.events.len();
    if k == 0 {
        return Err(OracleError::NoEvents);
    }
    let dim = domain.dim();
    let charts: Vec<Chart> = candidate
        .events
        .iter()
        .map(|ev| Chart {
            center: ev.q.clone(),
            basis: tangent_basis(&ev.normal),
        })
        .collect();
    let shooter = Shooter {
        sys: PenalizedSystem::new(pot, None, 0.0),
        pot,
        domain,
        energy: candidate.energy,
        charts,
        dim,
        tol: opts.flow_tol,
    };
    let b = shooter.block();
    let mut x = DVector::zeros(b * k);
    let t0 = candidate.events[0].t;
    for (j, ev) in candidate.events.iter().enumerate() {
        let d = ev.v_out.normalize();
        let inward = -d.dot(&ev.normal);
        let beta = shooter.charts[j].basis.transpose() * &d / inward;
        x.rows_mut(j * b + dim - 1, dim - 1).copy_from(&beta);
        let t_next = if j + 1 < k {
            candidate.events[j + 1].t
        } else {
            t0 + candidate.period
        };
        x[j * b + b - 1] = t_next - ev.t;
    }
    let mut r = shooter.residual(&x)?;
    let mut iterations = 0;
    while r.norm() > opts.residual_tol {
        if iterations >= opts.max_iters {
            return Err(OracleError::ShootingDiverged {
                residual: r.norm(),
                iterations,
            });
        }
        iterations += 1;
        let mut jac = DMatrix::zeros(r.len(), x.len());
        for c in 0..x.len() {
            let step = opts.fd_step * x[c].abs().max(1.0);
            let mut xp = x.clone();
            xp[c] += step;
            let mut xm = x.clone();
            xm[c] -= step;
            let col = (shooter.residual(&xp)? - shooter.residual(&xm)?) / (2.0 * step);
            jac.set_column(c, &col);
        }
        let svd = jac.svd(true, true);
        let cutoff = 1e-12 * svd.singular_values.max();
        let delta = svd
            .solve(&(-&r), cutoff)
            .map_err(|_| OracleError::ShootingDiverged {
                residual: r.norm(),
                iterations,
            })?;
        let mut alpha = 1.0;
        let mut improved = false;
        for _ in 0..30 {
            let cand = &x + &delta * alpha;
            let times_ok = (0..k).all(|j| cand[j * b + b - 1] > 0.0);
            if times_ok {
                if let Ok(rc) = shooter.residual(&cand) {
                    if rc.norm() < r.norm() {
                        x = cand;
                        r = rc;
                        improved = true;
                        break;
                    }
                }
            }
            alpha *= 0.5;
        }
        if !improved {
            return Err(OracleError::ShootingDiverged {
                residual: r.norm(),
                iterations,
            });
        }
    }
    log::debug!("shooting converged in {iterations} iterations, residual {:.3e}", r.norm());

    let launches: Vec<Launch> = (0..k).map(|j| shooter.launch(j, &x)).collect::<Result<_, _>>()?;
    let mut arcs = Vec::with_capacity(k);
    let mut arrivals = Vec::with_capacity(k);
    let mut t = 0.0;
    let mut event_times = Vec::with_capacity(k);
    for (j, l) in launches.iter().enumerate() {
        event_times.push(t);
        let tj = shooter.flight_time(j, &x);
        let start = PhaseState::new(l.q.clone(), l.v.clone(), t);
        let path = free_flow(&shooter.sys, &start, tj, opts.flow_tol)?;
        arrivals.push(path.last().expect("flow has a start state").0.v.clone());
        arcs.push(resample(&path, opts.samples_per_arc));
        t += tj;
    }
    let period = t;
    let events: Vec<BounceEvent> = (0..k)
        .map(|j| BounceEvent {
            t: event_times[j],
            q: launches[j].q.clone(),
            v_in: arrivals[(j + k - 1) % k].clone(),
            v_out: launches[j].v.clone(),
            normal: launches[j].normal.clone(),
        })
        .collect();
    // replay from the middle of the first arc to catch arcs that leave the domain
    let mid = arcs[0].samples[arcs[0].samples.len() / 2].clone();
    let replay = integrate_with_bounces(
        &PhaseState::new(mid.q, mid.v, 0.0),
        pot,
        domain,
        period,
        opts.flow_tol.max(1e-13),
        &EventOptions::default(),
    )?;
    if replay.bounce_count != k {
        return Err(OracleError::BounceCountChanged {
            expected: k,
            found: replay.bounce_count,
        });
    }
    Ok(BounceOrbit {
        arcs,
        events,
        period,
        energy: candidate.energy,
        bounce_count: k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::PotentialSpec;
    use crate::geometry::DomainSpec;
    use crate::orbit::{check_energy_invariant, check_reflection_law};
    use nalgebra::dvector;

    #[test]
    fn perturbed_disk_diameter_refines_to_exact_orbit() {
        let d = Domain::new(DomainSpec::Disk { radius: 1.0, dim: 2 }).unwrap();
        let pot = PotentialField::new(PotentialSpec::Zero, &d).unwrap();
        let start = PhaseState::new(dvector![0.0, 0.01], dvector![0.999, 0.03].normalize(), 0.0);
        let rough = integrate_with_bounces(&start, &pot, &d, 4.05, 1e-12, &EventOptions::default()).unwrap();
        assert_eq!(rough.bounce_count, 2);
        let mut candidate = rough.clone();
        candidate.arcs.clear();
        candidate.period = 4.05;
        let refined = refine_periodic_shooting(&candidate, &pot, &d, &ShootingOptions::default()).unwrap();
        assert_eq!(refined.bounce_count, 2);
        assert!((refined.period - 4.0).abs() < 1e-9, "{}", refined.period);
        assert!((&refined.events[0].q + &refined.events[1].q).norm() < 1e-9);
        assert!(refined.closure_error() < 1e-10);
        assert!(check_reflection_law(&refined, 1e-9, 1e-9).pass);
        assert!(check_energy_invariant(&refined, &pot, 1e-9).pass);
    }

    #[test]
    fn ellipse_chord_is_orthogonal_at_both_ends() {
        let d = Domain::new(DomainSpec::Ellipse { a: 1.5, b: 1.0 }).unwrap();
        let pot = PotentialField::new(PotentialSpec::Zero, &d).unwrap();
        // near the minor axis, which is a stable two-bounce orbit
        let start = PhaseState::new(dvector![0.02, 0.0], dvector![0.05, 1.0].normalize(), 0.0);
        let rough = integrate_with_bounces(&start, &pot, &d, 4.0, 1e-12, &EventOptions::default()).unwrap();
        let mut candidate = rough.clone();
        candidate.events.truncate(2);
        candidate.period = candidate.events[1].t - candidate.events[0].t + 2.0;
        candidate.energy = 0.5;
        let refined = refine_periodic_shooting(&candidate, &pot, &d, &ShootingOptions::default()).unwrap();
        let chord = (&refined.events[1].q - &refined.events[0].q).normalize();
        for ev in &refined.events {
            assert!((chord.dot(&ev.normal).abs() - 1.0).abs() < 1e-9);
        }
        assert!((refined.period - 4.0).abs() < 1e-9);
    }

    #[test]
    fn candidate_without_events_is_rejected() {
        let d = Domain::new(DomainSpec::Disk { radius: 1.0, dim: 2 }).unwrap();
        let pot = PotentialField::new(PotentialSpec::Zero, &d).unwrap();
        let orbit = BounceOrbit {
            arcs: vec![],
            events: vec![],
            period: 1.0,
            energy: 0.5,
            bounce_count: 0,
        };
        assert!(matches!(
            refine_periodic_shooting(&orbit, &pot, &d, &ShootingOptions::default()),
            Err(OracleError::NoEvents)
        ));
    }
}
