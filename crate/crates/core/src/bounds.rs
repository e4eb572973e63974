//! Closed-form action, period and bounce-count estimates, and the audit of
//! computed orbits against them.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::PotentialStats;
use crate::orbit::BounceOrbit;

#[derive(Debug, Error, PartialEq)]
pub enum BoundsError {
    #[error(
        "energy {energy} must exceed the maximum {v_max} of the potential over the closed domain \
         for the energy surface to be regular"
    )]
    Regularity { energy: f64, v_max: f64 },
    #[error("energy {energy} must exceed the minimum {v_min} of the potential")]
    BelowMinimum { energy: f64, v_min: f64 },
    #[error("internal inconsistency: 6 C (E - V_min)^2 = {0} is not below 1")]
    Inconsistent(f64),
    #[error("invalid input: {0}")]
    Invalid(String),
}

fn regular(energy: f64, v_max: f64) -> Result<(), BoundsError> {
    if energy.is_finite() && v_max.is_finite() && energy > v_max {
        Ok(())
    } else {
        Err(BoundsError::Regularity { energy, v_max })
    }
}

fn denominator(energy: f64, v_min: f64, v_max: f64) -> f64 {
    (energy - v_max).powi(2) + 48.0 * (energy - v_min).powi(2)
}

/// Lower bound on the contact form's positivity:
/// `(E - V_max)^3 / (2 [(E - V_max)^2 + 48 (E - V_min)^2])`.
pub fn lambda_e(energy: f64, v_min: f64, v_max: f64) -> Result<f64, BoundsError> {
    regular(energy, v_max)?;
    Ok((energy - v_max).powi(3) / (2.0 * denominator(energy, v_min, v_max)))
}

/// `8 / [(E - V_max)^2 + 48 (E - V_min)^2]`, checked against `6 C (E - V_min)^2 < 1`.
pub fn c_of_e(energy: f64, v_min: f64, v_max: f64) -> Result<f64, BoundsError> {
    regular(energy, v_max)?;
    let c = 8.0 / denominator(energy, v_min, v_max);
    let check = 6.0 * c * (energy - v_min).powi(2);
    if check < 1.0 {
        Ok(c)
    } else {
        Err(BoundsError::Inconsistent(check))
    }
}

/// `2 sqrt(2E - 2 V_min) diam`.
pub fn displacement_energy_bound(energy: f64, v_min: f64, diam: f64) -> Result<f64, BoundsError> {
    if !(energy > v_min) {
        return Err(BoundsError::BelowMinimum { energy, v_min });
    }
    if !(diam >= 0.0 && diam.is_finite()) {
        return Err(BoundsError::Invalid(format!("diameter {diam}")));
    }
    Ok(2.0 * (2.0 * energy - 2.0 * v_min).sqrt() * diam)
}

/// Displacement-energy bound divided by `lambda_e`.
pub fn period_upper_bound(energy: f64, v_min: f64, v_max: f64, diam: f64) -> Result<f64, BoundsError> {
    let lambda = lambda_e(energy, v_min, v_max)?;
    Ok(displacement_energy_bound(energy, v_min, diam)? / lambda)
}

/// Energy above which every bounce orbit must touch the boundary:
/// `V_max + diam * grad_max / 2`.
pub fn corollary_threshold(v_max: f64, grad_max: f64, diam: f64) -> f64 {
    v_max + 0.5 * diam * grad_max
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsReport {
    pub energy: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub grad_max: f64,
    pub diam: f64,
    pub dim: usize,
    pub lambda: f64,
    pub c_of_e: f64,
    pub displacement_bound: f64,
    pub period_bound: f64,
    pub corollary_threshold: f64,
    pub bounce_count_bound: usize,
}

impl BoundsReport {
    pub fn new(energy: f64, stats: &PotentialStats, diam: f64, dim: usize) -> Result<Self, BoundsError> {
        let (v_min, v_max) = (stats.v_min, stats.v_max);
        Ok(Self {
            energy,
            v_min,
            v_max,
            grad_max: stats.grad_max,
            diam,
            dim,
            lambda: lambda_e(energy, v_min, v_max)?,
            c_of_e: c_of_e(energy, v_min, v_max)?,
            displacement_bound: displacement_energy_bound(energy, v_min, diam)?,
            period_bound: period_upper_bound(energy, v_min, v_max, diam)?,
            corollary_threshold: corollary_threshold(v_max, stats.grad_max, diam),
            bounce_count_bound: dim + 1,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditResult {
    /// `period_bound - period`.
    pub period_margin: f64,
    /// `(N + 1) - bounce_count`.
    pub bounce_margin: i64,
    /// `bounce_count - 1` when the energy is above the threshold.
    pub corollary_margin: Option<i64>,
    pub period_ok: bool,
    pub bounce_ok: bool,
    pub corollary_ok: bool,
    pub pass: bool,
}

pub fn audit_orbit(orbit: &BounceOrbit, report: &BoundsReport) -> AuditResult {
    audit_values(orbit.period, orbit.bounce_count, report)
}

/// Audit of a period and bounce count, for orbits known only through these numbers.
pub fn audit_values(period: f64, bounce_count: usize, report: &BoundsReport) -> AuditResult {
    let period_margin = report.period_bound - period;
    let bounce_margin = report.bounce_count_bound as i64 - bounce_count as i64;
    let corollary_margin = (report.energy > report.corollary_threshold).then(|| bounce_count as i64 - 1);
    let period_ok = period.is_finite() && period > 0.0 && period_margin >= 0.0;
    let bounce_ok = bounce_margin >= 0;
    let corollary_ok = corollary_margin.map_or(true, |m| m >= 0);
    AuditResult {
        period_margin,
        bounce_margin,
        corollary_margin,
        period_ok,
        bounce_ok,
        corollary_ok,
        pass: period_ok && bounce_ok && corollary_ok,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::StatsSource;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn flat(v: f64) -> PotentialStats {
        PotentialStats {
            v_min: v,
            v_max: v,
            grad_max: 0.0,
            source: StatsSource::Analytic,
            per_axis: 0,
            samples: 0,
        }
    }

    #[test]
    fn closed_form_examples() {
        assert_relative_eq!(lambda_e(0.5, 0.0, 0.0).unwrap(), 0.125 / 24.5, max_relative = 1e-15);
        assert_relative_eq!(c_of_e(0.5, 0.0, 0.0).unwrap(), 8.0 / 12.25, max_relative = 1e-15);
        assert_relative_eq!(c_of_e(1.0, -1.0, 0.0).unwrap(), 8.0 / 193.0, max_relative = 1e-15);
        assert_relative_eq!(displacement_energy_bound(0.5, 0.0, 2.0).unwrap(), 4.0, max_relative = 1e-15);
        assert_relative_eq!(
            displacement_energy_bound(0.5, -0.5, 2.0).unwrap(),
            4.0 * 2f64.sqrt(),
            max_relative = 1e-15
        );
        assert_relative_eq!(period_upper_bound(0.5, 0.0, 0.0, 2.0).unwrap(), 784.0, max_relative = 1e-12);
        assert_eq!(corollary_threshold(0.0, 0.0, 2.0), 0.0);
        assert_eq!(corollary_threshold(1.0, 1.0, 2.0), 2.0);
    }

    #[test]
    fn flat_lambda_is_linear_in_energy() {
        for e in [0.01, 0.3, 1.0, 7.5, 100.0] {
            assert_relative_eq!(lambda_e(e, 0.0, 0.0).unwrap(), e / 98.0, max_relative = 1e-14);
        }
    }

    #[test]
    fn lambda_vanishes_at_the_regularity_edge() {
        let near = lambda_e(1.0 + 1e-6, 0.0, 1.0).unwrap();
        assert!(near > 0.0 && near < 1e-19);
        assert!(matches!(lambda_e(1.0, 0.0, 1.0), Err(BoundsError::Regularity { .. })));
        assert!(matches!(period_upper_bound(0.5, 0.0, 1.0, 2.0), Err(BoundsError::Regularity { .. })));
    }

    #[test]
    fn disk_diameter_audit_margins() {
        let report = BoundsReport::new(0.5, &flat(0.0), 2.0, 2).unwrap();
        let audit = audit_values(4.0, 2, &report);
        assert!(audit.pass);
        assert_relative_eq!(audit.period_margin, 780.0, max_relative = 1e-12);
        assert_eq!(audit.bounce_margin, 1);
        assert_eq!(audit.corollary_margin, Some(1));
        assert!(!audit_values(4.0, 4, &report).pass);
        assert!(!audit_values(4.0, 0, &report).corollary_ok);
    }

    #[test]
    fn smooth_orbit_below_threshold_is_vacuous() {
        let stats = PotentialStats {
            v_min: 0.0,
            v_max: 0.08,
            grad_max: 0.4,
            source: StatsSource::Analytic,
            per_axis: 0,
            samples: 0,
        };
        let report = BoundsReport::new(0.09, &stats, 0.8, 2).unwrap();
        let audit = audit_values(std::f64::consts::TAU, 0, &report);
        assert_eq!(audit.corollary_margin, None);
        assert!(audit.pass);
    }

    #[test]
    fn flat_bound_scales_like_inverse_root_energy() {
        let a = period_upper_bound(0.5, 0.0, 0.0, 2.0).unwrap();
        let b = period_upper_bound(2.0, 0.0, 0.0, 2.0).unwrap();
        assert_relative_eq!(a / b, 2.0, max_relative = 1e-12);
    }

    #[test]
    fn shape_factor_is_bounded_on_a_log_grid() {
        // bound * (E - V_max)^3 / (E - V_min)^(5/2) / diam stays below 2^(7/2) * 49
        for k in 0..60 {
            let e = 1.0 + 10f64.powf(-4.0 + 0.1 * k as f64);
            let (v_min, v_max, diam) = (-1.0, 1.0, 3.0);
            let shape = period_upper_bound(e, v_min, v_max, diam).unwrap() * (e - v_max).powi(3)
                / (e - v_min).powf(2.5)
                / diam;
            assert!(shape > 0.0 && shape <= 49.0 * 2f64.powf(3.5) * (1.0 + 1e-12), "{shape}");
        }
    }

    proptest! {
        #[test]
        fn monotone_in_inputs(
            v_min in -2.0..0.0f64,
            spread in 0.0..2.0f64,
            gap in 1e-3..5.0f64,
            diam in 0.1..10.0f64,
            bump in 1e-3..1.0f64,
        ) {
            let v_max = v_min + spread;
            let e = v_max + gap;
            let p = period_upper_bound(e, v_min, v_max, diam).unwrap();
            prop_assert!(period_upper_bound(e, v_min, v_max, diam * (1.0 + bump)).unwrap() > p);
            prop_assert!(lambda_e(e, v_min, v_max).unwrap() > 0.0);
            prop_assert!(
                displacement_energy_bound(e + bump, v_min, diam).unwrap()
                    > displacement_energy_bound(e, v_min, diam).unwrap()
            );
            // raising V_max towards E shrinks the action bound
            prop_assert!(lambda_e(e, v_min, v_max + 0.5 * gap).unwrap() < lambda_e(e, v_min, v_max).unwrap());
            let c = c_of_e(e, v_min, v_max).unwrap();
            prop_assert!(6.0 * c * (e - v_min).powi(2) < 1.0);
            prop_assert!(c_of_e(e + bump, v_min, v_max).unwrap() < c);
        }
    }
}
