use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::{check_inside, grazing_tolerance, reflect_velocity, Arc, BounceEvent, BounceOrbit, OracleError};
use crate::dynamics::{adaptive_step, dopri_step, hermite, pack, unpack, OdeSystem, PenalizedSystem, PhaseState, PotentialField};
use crate::geometry::{Domain, Point};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EventOptions {
    pub max_events: usize,
    /// Overrides the default grazing threshold derived from the energy.
    pub grazing_tol: Option<f64>,
    pub samples_per_arc: usize,
    /// Step cap as a fraction of the time to cross the domain at top speed.
    pub max_step_fraction: f64,
}

impl Default for EventOptions {
    fn default() -> Self {
        Self {
            max_events: 10_000,
            grazing_tol: None,
            samples_per_arc: 256,
            max_step_fraction: 0.05,
        }
    }
}

/// Where and how a free flight first meets the boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Impact {
    pub t: f64,
    /// Foot point on the boundary.
    pub q: Point,
    pub v_in: Point,
    pub normal: Point,
}

struct Flight<'a> {
    sys: PenalizedSystem<'a>,
    domain: &'a Domain,
    tol: f64,
    h_cap: f64,
}

impl<'a> Flight<'a> {
    fn new(pot: &'a PotentialField, domain: &'a Domain, tol: f64, energy: f64, fraction: f64) -> Self {
        let speed = (2.0 * (energy - pot.stats().v_min)).max(1e-300).sqrt();
        Self {
            sys: PenalizedSystem::new(pot, None, 0.0),
            domain,
            tol,
            h_cap: fraction * domain.diameter() / speed,
        }
    }

    fn f_of(&self, y: &DVector<f64>) -> f64 {
        let n = y.len() / 2;
        self.domain.implicit(&y.rows(0, n).into_owned())
    }

    /// Locates the first zero of `F` along the step of size `h` from `y`.
    fn locate(&self, y: &DVector<f64>, f: &DVector<f64>, h: f64) -> Result<(f64, DVector<f64>, DVector<f64>), OracleError> {
        let n = y.len() / 2;
        let eval = |s: f64| -> Result<(DVector<f64>, DVector<f64>, f64, f64), OracleError> {
            let (ys, _, fs) = dopri_step(&self.sys, y, f, s)?;
            let q = ys.rows(0, n).into_owned();
            let v = ys.rows(n, n).into_owned();
            let g = self.domain.implicit(&q);
            let dg = self.domain.implicit_gradient(&q).dot(&v);
            Ok((ys, fs, g, dg))
        };
        let (mut a, mut b) = (0.0, h);
        let (yb, fb, mut gb, mut dgb) = eval(b)?;
        let mut best = (b, yb, fb, gb.abs());
        for _ in 0..200 {
            if b - a <= 1e-15 * h.max(1.0) || gb.abs() <= 1e-16 {
                break;
            }
            let newton = if dgb > 0.0 { b - gb / dgb } else { f64::NAN };
            let s = if newton > a && newton < b { newton } else { 0.5 * (a + b) };
            let (ys, fs, gs, dgs) = eval(s)?;
            if gs.abs() < best.3 {
                best = (s, ys.clone(), fs.clone(), gs.abs());
            }
            if gs >= 0.0 {
                b = s;
                gb = gs;
                dgb = dgs;
            } else {
                a = s;
            }
        }
        Ok((best.0, best.1, best.2))
    }

    /// Integrates from `(y, t)` towards `t_end`, calling `record` on every accepted
    /// state, and stops at the first boundary crossing.
    fn run(
        &self,
        y0: DVector<f64>,
        t0: f64,
        t_end: f64,
        mut record: impl FnMut(&PhaseState, &Point),
    ) -> Result<Option<(f64, PhaseState)>, OracleError> {
        let n = y0.len() / 2;
        let mut y = y0;
        let mut f = self.sys.rhs(&y)?;
        let mut e = OdeSystem::energy(&self.sys, &y)?;
        let mut t = t0;
        let span = (t_end - t0).max(1e-300);
        let mut h = (0.01 * self.h_cap).min(span);
        let h_min = 1e-14 * span.max(1.0);
        while t_end - t > 1e-15 * span.max(1.0) {
            let h_max = (t_end - t).min(self.h_cap);
            let acc = adaptive_step(&self.sys, &y, &f, e, h, h_max, h_min.min(0.5 * h_max), self.tol)
                .map_err(|_| OracleError::StepUnderflow { t })?;
            if self.f_of(&acc.y) >= 0.0 {
                let (s, ys, _) = self.locate(&y, &f, acc.h_done)?;
                let t_hit = t + s;
                return Ok(Some((t_hit, unpack(&ys, t_hit))));
            }
            t = if acc.h_done >= t_end - t { t_end } else { t + acc.h_done };
            y = acc.y;
            f = acc.f;
            e = acc.energy;
            record(&unpack(&y, t), &f.rows(n, n).into_owned());
            h = acc.h_next;
        }
        Ok(None)
    }
}

/// Resamples an arc on `count` uniform times from its accepted states.
pub(super) fn resample(path: &[(PhaseState, Point)], count: usize) -> Arc {
    let t0 = path[0].0.t;
    let t1 = path.last().expect("non-empty path").0.t;
    let count = count.max(2);
    let mut idx = 0;
    let samples = (0..count)
        .map(|i| {
            if i == 0 {
                return path[0].0.clone();
            }
            if i + 1 == count || path.len() == 1 {
                return path.last().expect("non-empty path").0.clone();
            }
            let t = t0 + (t1 - t0) * i as f64 / (count - 1) as f64;
            while idx + 2 < path.len() && path[idx + 1].0.t < t {
                idx += 1;
            }
            let (a, fa) = &path[idx];
            let (b, fb) = &path[idx + 1];
            hermite(a, fa, b, fb, t)
        })
        .collect();
    Arc { samples }
}

/// Flight for time `duration` without boundary checks, with the accepted states.
pub(super) fn free_flow(
    sys: &PenalizedSystem<'_>,
    start: &PhaseState,
    duration: f64,
    tol: f64,
) -> Result<Vec<(PhaseState, Point)>, OracleError> {
    let n = start.q.len();
    let mut y = pack(&start.q, &start.v);
    let mut f = sys.rhs(&y)?;
    let mut e = OdeSystem::energy(sys, &y)?;
    let mut t = 0.0;
    let mut out = vec![(start.clone(), f.rows(n, n).into_owned())];
    if duration <= 0.0 {
        return Ok(out);
    }
    let mut h = 0.01 * duration;
    while duration - t > 1e-15 * duration.max(1.0) {
        let h_max = duration - t;
        let acc = adaptive_step(sys, &y, &f, e, h, h_max, (1e-14 * duration).min(0.5 * h_max), tol)
            .map_err(|_| OracleError::StepUnderflow { t: start.t + t })?;
        t = if acc.h_done >= h_max { duration } else { t + acc.h_done };
        y = acc.y;
        f = acc.f;
        e = acc.energy;
        out.push((unpack(&y, start.t + t), f.rows(n, n).into_owned()));
        h = acc.h_next;
    }
    Ok(out)
}

/// Free flight from `start` for `duration`, sampled uniformly, ignoring the boundary.
pub fn flight_arc(
    pot: &PotentialField,
    start: &PhaseState,
    duration: f64,
    tol: f64,
    samples: usize,
) -> Result<Arc, OracleError> {
    let sys = PenalizedSystem::new(pot, None, 0.0);
    Ok(resample(&free_flow(&sys, start, duration, tol)?, samples))
}

/// First boundary impact of the free flight from `start` within `max_time`.
pub fn first_impact(
    start: &PhaseState,
    pot: &PotentialField,
    domain: &Domain,
    tol: f64,
    max_time: f64,
) -> Result<Option<Impact>, OracleError> {
    check_inside(domain, &start.q)?;
    let energy = 0.5 * start.v.norm_squared() + pot.value(&start.q);
    let flight = Flight::new(pot, domain, tol, energy, EventOptions::default().max_step_fraction);
    let hit = flight.run(pack(&start.q, &start.v), start.t, start.t + max_time, |_, _| {})?;
    match hit {
        None => Ok(None),
        Some((t, state)) => {
            let (foot, normal) = domain.boundary_projection(&state.q)?;
            Ok(Some(Impact {
                t,
                q: foot,
                v_in: state.v,
                normal,
            }))
        }
    }
}

/// Integrates the unpenalized flow with specular reflections for `duration`.
///
/// The returned orbit starts at `start`; arcs are split at every impact, so
/// an orbit with `k` impacts has `k + 1` arcs.
pub fn integrate_with_bounces(
    start: &PhaseState,
    pot: &PotentialField,
    domain: &Domain,
    duration: f64,
    tol: f64,
    opts: &EventOptions,
) -> Result<BounceOrbit, OracleError> {
    check_inside(domain, &start.q)?;
    let energy = 0.5 * start.v.norm_squared() + pot.value(&start.q);
    let grazing = opts
        .grazing_tol
        .unwrap_or_else(|| grazing_tolerance(energy, pot.stats().v_min));
    let flight = Flight::new(pot, domain, tol, energy, opts.max_step_fraction);
    let t_end = start.t + duration;
    let accel = |q: &Point| -pot.gradient(q);
    let mut arcs = Vec::new();
    let mut events: Vec<BounceEvent> = Vec::new();
    let mut current = vec![(start.clone(), accel(&start.q))];
    let mut state = start.clone();
    let partial = |arcs: &Vec<Arc>, events: &Vec<BounceEvent>, current: &[(PhaseState, Point)], t: f64| {
        let mut arcs = arcs.clone();
        arcs.push(resample(current, opts.samples_per_arc));
        Box::new(BounceOrbit {
            arcs,
            events: events.clone(),
            period: t - start.t,
            energy,
            bounce_count: events.len(),
        })
    };
    loop {
        let hit = flight.run(pack(&state.q, &state.v), state.t, t_end, |s, a| {
            current.push((s.clone(), a.clone()))
        })?;
        let Some((t_hit, at)) = hit else { break };
        let (foot, normal) = domain.boundary_projection(&at.q)?;
        let impact = PhaseState::new(foot.clone(), at.v.clone(), t_hit);
        current.push((impact, accel(&foot)));
        let v_out = match reflect_velocity(&at.v, &normal, grazing) {
            Ok(v) => v,
            Err(_) => {
                return Err(OracleError::Grazing {
                    t: t_hit,
                    partial: partial(&arcs, &events, &current, t_hit),
                })
            }
        };
        events.push(BounceEvent {
            t: t_hit,
            q: foot.clone(),
            v_in: at.v,
            v_out: v_out.clone(),
            normal,
        });
        arcs.push(resample(&current, opts.samples_per_arc));
        if events.len() > opts.max_events {
            return Err(OracleError::EventAccumulation {
                limit: opts.max_events,
                partial: Box::new(BounceOrbit {
                    arcs,
                    events: events.clone(),
                    period: t_hit - start.t,
                    energy,
                    bounce_count: events.len(),
                }),
            });
        }
        state = PhaseState::new(foot.clone(), v_out, t_hit);
        current = vec![(state.clone(), accel(&foot))];
    }
    if current.len() == 1 {
        let mut end = current[0].0.clone();
        end.t = t_end;
        let a = current[0].1.clone();
        current.push((end, a));
    }
    arcs.push(resample(&current, opts.samples_per_arc));
    Ok(BounceOrbit {
        arcs,
        bounce_count: events.len(),
        events,
        period: duration,
        energy,
    })
}
