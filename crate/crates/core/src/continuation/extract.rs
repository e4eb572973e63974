use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;

use super::ContinuationRecord;
use crate::dynamics::PotentialField;
use crate::geometry::{CollarProfile, Domain, Point};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterOptions {
    /// Nodes with density at least this fraction of the maximum seed clusters.
    pub threshold: f64,
    /// Clusters separated by fewer grid steps are merged.
    pub merge_gap: usize,
    /// Clusters below this fraction of the total mass are dropped.
    pub mass_fraction: f64,
    /// Wider clusters (in normalized time) are flagged as non-isolated.
    pub width_max: f64,
    /// Total mass below this means no concentration at all.
    pub mass_floor: f64,
}

impl Default for ClusterOptions {
    fn default() -> Self {
        Self {
            threshold: 0.1,
            merge_gap: 4,
            mass_fraction: 0.05,
            width_max: 0.1,
            mass_floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BounceExtraction {
    /// Normalized times in `[0, 1)`, increasing.
    pub times: Vec<f64>,
    pub masses: Vec<f64>,
    pub widths: Vec<f64>,
    pub total_mass: f64,
    /// Some cluster is wider than the isolation limit.
    pub non_isolated: bool,
}

impl BounceExtraction {
    pub fn count(&self) -> usize {
        self.times.len()
    }
}

/// Cyclic runs `[start, start + len)` of indices.
fn runs(flags: &[bool]) -> Vec<(usize, usize)> {
    let m = flags.len();
    if flags.iter().all(|&f| f) {
        return vec![(0, m)];
    }
    let Some(anchor) = flags.iter().position(|&f| !f) else {
        return vec![];
    };
    let mut out = Vec::new();
    let mut k = 1;
    while k <= m {
        let i = (anchor + k) % m;
        if flags[i] {
            let start = i;
            let mut len = 0;
            while flags[(start + len) % m] {
                len += 1;
            }
            out.push((start, len));
            k += len;
        } else {
            k += 1;
        }
    }
    out
}

/// Reduces concentrated clusters of a periodic density to one time each.
pub fn extract_from_density(density: &[f64], opts: &ClusterOptions) -> BounceExtraction {
    let m = density.len();
    let total_mass = density.iter().sum::<f64>() / m.max(1) as f64;
    let empty = BounceExtraction {
        times: vec![],
        masses: vec![],
        widths: vec![],
        total_mass,
        non_isolated: false,
    };
    let max = density.iter().copied().fold(0.0_f64, f64::max);
    if m == 0 || total_mass < opts.mass_floor || max <= 0.0 {
        return empty;
    }
    let flags: Vec<bool> = density.iter().map(|&x| x >= opts.threshold * max).collect();
    let mut clusters = runs(&flags);
    // merge neighbours separated by short gaps, cyclically
    if clusters.len() > 1 {
        let mut merged: Vec<(usize, usize)> = Vec::new();
        for c in clusters {
            if let Some(last) = merged.last_mut() {
                let gap = (c.0 + m - (last.0 + last.1) % m) % m;
                if gap < opts.merge_gap {
                    last.1 = (c.0 + c.1 + m - last.0) % m;
                    if last.1 == 0 {
                        last.1 = m;
                    }
                    continue;
                }
            }
            merged.push(c);
        }
        if merged.len() > 1 {
            let first = merged[0];
            let last = *merged.last().expect("non-empty");
            let gap = (first.0 + m - (last.0 + last.1) % m) % m;
            if gap < opts.merge_gap {
                merged.pop();
                merged[0] = (last.0, (first.0 + first.1 + m - last.0) % m);
            }
        }
        clusters = merged;
    }
    let mut found: Vec<(f64, f64, f64)> = clusters
        .into_iter()
        .filter_map(|(start, len)| {
            let mut mass = 0.0;
            let (mut c, mut s) = (0.0, 0.0);
            for k in 0..len {
                let i = (start + k) % m;
                let w = density[i] / m as f64;
                mass += w;
                let ang = TAU * i as f64 / m as f64;
                c += w * ang.cos();
                s += w * ang.sin();
            }
            if mass < opts.mass_fraction * total_mass {
                return None;
            }
            let t = (s.atan2(c) / TAU).rem_euclid(1.0);
            Some((t, mass, len as f64 / m as f64))
        })
        .collect();
    found.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite times"));
    BounceExtraction {
        non_isolated: found.iter().any(|f| f.2 > opts.width_max),
        times: found.iter().map(|f| f.0).collect(),
        masses: found.iter().map(|f| f.1).collect(),
        widths: found.iter().map(|f| f.2).collect(),
        total_mass,
    }
}

pub fn extract_bounce_times(record: &ContinuationRecord, opts: &ClusterOptions) -> BounceExtraction {
    extract_from_density(&record.penalty_density, opts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollapseKind {
    InteriorCriticalPoint,
    BoundaryEquilibrium,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CollapseOptions {
    pub tau_floor: f64,
    pub diam_floor: f64,
    /// `|grad V| <= gradient_tol * max(1, grad_max)` counts as a critical point.
    pub gradient_tol: f64,
    /// Relative residual allowed in `grad V + a n = 0`.
    pub balance_tol: f64,
}

impl Default for CollapseOptions {
    fn default() -> Self {
        Self {
            tau_floor: 0.0,
            diam_floor: 0.0,
            gradient_tol: 1e-6,
            balance_tol: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapseReport {
    pub kind: CollapseKind,
    pub point: Option<Point>,
    /// Fitted `a` in `grad V = -a n` for a boundary equilibrium.
    pub multiplier: Option<f64>,
    pub tau: f64,
    pub diameter: f64,
    pub note: String,
}

/// Classifies a family whose loops shrink to a point or whose period vanishes.
pub fn detect_collapse(
    records: &[ContinuationRecord],
    pot: &PotentialField,
    domain: &Domain,
    profile: &CollarProfile,
    opts: &CollapseOptions,
) -> CollapseReport {
    let none = |tau: f64, diameter: f64, note: String| CollapseReport {
        kind: CollapseKind::None,
        point: None,
        multiplier: None,
        tau,
        diameter,
        note,
    };
    if records.len() < 2 {
        return none(f64::NAN, f64::NAN, "fewer than two records".into());
    }
    let last = records.last().expect("checked length");
    let curve = &last.critical_point.curve;
    let tau = curve.tau;
    let diameter = curve.diameter();
    let shrinking = tau < opts.tau_floor || diameter < opts.diam_floor;
    if !shrinking {
        return none(tau, diameter, "period and diameter above their floors".into());
    }
    let q = curve.centroid();
    let grad = pot.gradient(&q);
    let scale = pot.stats().grad_max.max(1.0);
    if grad.norm() <= opts.gradient_tol * scale {
        return CollapseReport {
            kind: CollapseKind::InteriorCriticalPoint,
            point: Some(q),
            multiplier: None,
            tau,
            diameter,
            note: format!("|grad V| = {:.3e}", grad.norm()),
        };
    }
    let proj = match domain.nearest_boundary_point(&q) {
        Ok(p) => p,
        Err(e) => return none(tau, diameter, format!("no boundary projection: {e}")),
    };
    let distance = -proj.signed_distance;
    if distance > 2.0 * profile.d0() {
        return none(tau, diameter, format!("limit point at distance {distance:.3e} outside the collar"));
    }
    let a = -grad.dot(&proj.normal);
    let residual = (&grad + &proj.normal * a).norm();
    if a > 0.0 && residual <= opts.balance_tol * grad.norm() {
        CollapseReport {
            kind: CollapseKind::BoundaryEquilibrium,
            point: Some(proj.foot),
            multiplier: Some(a),
            tau,
            diameter,
            note: format!("force balance residual {residual:.3e}"),
        }
    } else {
        none(tau, diameter, format!("no force balance: a = {a:.3e}, residual {residual:.3e}"))
    }
}
