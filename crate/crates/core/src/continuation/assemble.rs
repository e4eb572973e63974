use serde::{Deserialize, Serialize};

use crate::action::DiscreteLoop;
use crate::dynamics::{PhaseState, PotentialField};
use crate::geometry::{CollarProfile, Domain, Point};
use crate::orbit::{first_impact, flight_arc, shell_speed, Arc, BounceEvent, BounceOrbit, Impact, OracleError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AssembleOptions {
    /// Largest accepted distance between the two impact estimates of a bounce,
    /// as a fraction of the domain diameter.
    pub snap_max: f64,
    pub tol: f64,
    pub samples: usize,
}

impl Default for AssembleOptions {
    fn default() -> Self {
        Self {
            snap_max: 0.05,
            tol: 1e-12,
            samples: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assembly {
    pub orbit: BounceOrbit,
    /// Distance between the forward and backward estimate of every impact.
    pub bounce_gaps: Vec<f64>,
    /// All gaps (or the closure error without impacts) are within the snap limit.
    pub consistent: bool,
}

/// Index of the node used to launch the flow for the arc spanning
/// normalized times `[from, from + len)`.
fn arc_anchor(lp: &DiscreteLoop, domain: &Domain, from: f64, len: f64, min_clearance: f64) -> Result<usize, OracleError> {
    let m = lp.len();
    let mid = from + 0.5 * len;
    let mut inside: Vec<(f64, usize)> = (0..m)
        .filter_map(|i| {
            let s = i as f64 / m as f64;
            let u = from + (s - from).rem_euclid(1.0);
            (u > from && u < from + len).then_some(((u - mid).abs(), i))
        })
        .collect();
    if inside.is_empty() {
        let i = ((mid.rem_euclid(1.0)) * m as f64).round() as usize % m;
        inside.push((0.0, i));
    }
    inside.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut best = (f64::NEG_INFINITY, inside[0].1);
    for &(_, i) in &inside {
        let clearance = -domain.signed_distance(&lp.node(i))?;
        if clearance >= min_clearance {
            return Ok(i);
        }
        if clearance > best.0 {
            best = (clearance, i);
        }
    }
    Ok(best.1)
}

/// Node state with a central-difference velocity rescaled to the energy shell.
fn launch_state(lp: &DiscreteLoop, i: usize, pot: &PotentialField, energy: f64) -> PhaseState {
    let m = lp.len();
    let q = lp.node(i);
    let v = (lp.node(i + 1) - lp.node(i + m - 1)) * (m as f64 / (2.0 * lp.tau));
    let speed = shell_speed(pot, energy, &q).unwrap_or(0.0);
    let len = v.norm();
    let v = if len > 0.0 { v * (speed / len) } else { v };
    PhaseState::new(q, v, 0.0)
}

/// Builds a bounce orbit from a penalized critical loop and its extracted
/// bounce times (normalized, increasing) by flowing the unpenalized system
/// forward and backward from one interior node of every arc.
pub fn assemble_bounce_orbit(
    lp: &DiscreteLoop,
    bounce_times: &[f64],
    energy: f64,
    pot: &PotentialField,
    domain: &Domain,
    profile: &CollarProfile,
    opts: &AssembleOptions,
) -> Result<Assembly, OracleError> {
    let snap_limit = opts.snap_max * domain.diameter();
    let k = bounce_times.len();
    if k == 0 {
        let start = launch_state(lp, 0, pot, energy);
        let arc = flight_arc(pot, &start, lp.tau, opts.tol, opts.samples)?;
        let orbit = BounceOrbit {
            arcs: vec![arc],
            events: vec![],
            period: lp.tau,
            energy,
            bounce_count: 0,
        };
        let consistent = orbit.closure_error() <= snap_limit;
        return Ok(Assembly {
            orbit,
            bounce_gaps: vec![],
            consistent,
        });
    }
    let max_time = 2.0 * lp.tau;
    let missing = || OracleError::NoEvents;
    // per arc: backward impact (start of the arc) and forward impact (end)
    let mut backward: Vec<Impact> = Vec::with_capacity(k);
    let mut forward: Vec<Impact> = Vec::with_capacity(k);
    for j in 0..k {
        let from = bounce_times[j];
        let len = if j + 1 < k {
            bounce_times[j + 1] - from
        } else {
            bounce_times[0] + 1.0 - from
        };
        let i = arc_anchor(lp, domain, from, len, 2.0 * profile.d0())?;
        let start = launch_state(lp, i, pot, energy);
        let fwd = first_impact(&start, pot, domain, opts.tol, max_time)?.ok_or_else(missing)?;
        let reversed = PhaseState::new(start.q.clone(), -&start.v, 0.0);
        let bwd = first_impact(&reversed, pot, domain, opts.tol, max_time)?.ok_or_else(missing)?;
        forward.push(fwd);
        backward.push(bwd);
    }
    let mut arcs: Vec<Arc> = Vec::with_capacity(k);
    let mut events = Vec::with_capacity(k);
    let mut gaps = Vec::with_capacity(k);
    let mut t = 0.0;
    for j in 0..k {
        let before = &forward[(j + k - 1) % k];
        let after = &backward[j];
        let gap = (&before.q - &after.q).norm();
        let (q, normal) = domain.boundary_projection(&((&before.q + &after.q) * 0.5))?;
        let v_out: Point = -&after.v_in;
        events.push(BounceEvent {
            t,
            q,
            v_in: before.v_in.clone(),
            v_out: v_out.clone(),
            normal,
        });
        gaps.push(gap);
        let duration = after.t + forward[j].t;
        let start = PhaseState::new(after.q.clone(), v_out, t);
        arcs.push(flight_arc(pot, &start, duration, opts.tol, opts.samples)?);
        t += duration;
    }
    let consistent = gaps.iter().all(|g| *g <= snap_limit);
    Ok(Assembly {
        orbit: BounceOrbit {
            arcs,
            events,
            period: t,
            energy,
            bounce_count: k,
        },
        bounce_gaps: gaps,
        consistent,
    })
}
