use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ActionError, ActionProblem, DiscreteLoop};
use crate::dynamics::PenalizedSystem;
use crate::geometry::Point;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    /// Convergence threshold on the Euclidean norm of the full gradient.
    pub grad_tol: f64,
    pub max_iters: usize,
    /// Solves whose period falls below this are abandoned as collapsing.
    pub tau_floor: f64,
    pub tau_max: f64,
    /// Eigenvalues below `-index_tol * max |lambda|` count towards the Morse index.
    pub index_tol: f64,
    /// A step may shrink the boundary distance of a node at most to this fraction.
    pub boundary_fraction: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            grad_tol: 1e-8,
            max_iters: 200,
            tau_floor: 0.0,
            tau_max: f64::INFINITY,
            index_tol: 1e-8,
            boundary_fraction: 0.2,
        }
    }
}

/// Best point reached by a solve, kept for diagnostics on failure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Iterate {
    pub curve: DiscreteLoop,
    pub gradient_norm: f64,
    pub iterations: usize,
}

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("no convergence after {} iterations (gradient norm {:.3e})", .0.iterations, .0.gradient_norm)]
    IterationCap(Box<Iterate>),
    #[error("period {:.3e} fell below its floor", .0.curve.tau)]
    TauFloor(Box<Iterate>),
    #[error("period {:.3e} exceeded its ceiling", .0.curve.tau)]
    TauCeiling(Box<Iterate>),
    #[error("loop is constant and its energy equation has no solution (residual {:.3e})", .0.gradient_norm)]
    Collapse(Box<Iterate>),
    #[error("no step reduced the gradient norm {:.3e}", .0.gradient_norm)]
    Stalled(Box<Iterate>),
    #[error(transparent)]
    Action(#[from] ActionError),
}

impl SolveError {
    pub fn best(&self) -> Option<&Iterate> {
        match self {
            SolveError::IterationCap(b)
            | SolveError::TauFloor(b)
            | SolveError::TauCeiling(b)
            | SolveError::Collapse(b)
            | SolveError::Stalled(b) => Some(b),
            SolveError::Action(_) => None,
        }
    }
}

/// Converged critical point of the discrete action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticalPoint {
    pub curve: DiscreteLoop,
    pub gradient_norm: f64,
    pub energy_residual: f64,
    pub morse_index: usize,
    pub iterations: usize,
}

/// Number of negative eigenvalues of the fixed-period Hessian.
pub fn morse_index(
    lp: &DiscreteLoop,
    sys: &PenalizedSystem<'_>,
    index_tol: f64,
) -> Result<usize, ActionError> {
    let h = super::action_hessian_fixed_tau(lp, sys)?;
    let eig = h.symmetric_eigenvalues();
    let scale = eig.iter().fold(0.0_f64, |m, l| m.max(l.abs()));
    Ok(eig.iter().filter(|&&l| l < -index_tol * scale).count())
}

struct Search<'p, 'a> {
    problem: &'p ActionProblem<'a>,
    opts: &'p SolverOptions,
}

impl Search<'_, '_> {
    /// Boundary distance of every node, or `None` when the penalty is inactive.
    fn clearances(&self, lp: &DiscreteLoop) -> Option<Vec<f64>> {
        let sys = &self.problem.system;
        let pen = sys.penalty.as_ref().filter(|_| sys.eps > 0.0)?;
        Some(
            (0..lp.len())
                .map(|i| {
                    let q = lp.node(i);
                    if pen.domain.implicit(&q) >= 0.0 {
                        return -1.0;
                    }
                    match pen.domain.nearest_boundary_point(&q) {
                        Ok(p) => -p.signed_distance,
                        Err(_) => -1.0,
                    }
                })
                .collect(),
        )
    }

    fn admissible(&self, old: &Option<Vec<f64>>, lp: &DiscreteLoop) -> bool {
        if !(lp.tau > 0.0) {
            return false;
        }
        match (old, self.clearances(lp)) {
            (Some(old), Some(new)) => old
                .iter()
                .zip(&new)
                .all(|(o, n)| *n > 0.0 && *n >= self.opts.boundary_fraction * o),
            _ => true,
        }
    }

    /// Resets the period to its root when one exists.
    fn settle_tau(&self, mut lp: DiscreteLoop) -> Result<DiscreteLoop, ActionError> {
        if let Some(t) = self.problem.tau_root(&lp)? {
            lp.tau = t;
        }
        Ok(lp)
    }

    fn merit(&self, lp: &DiscreteLoop) -> Option<f64> {
        self.problem.gradient(lp).ok().map(|g| g.norm())
    }

    fn apply(&self, lp: &DiscreteLoop, step: &DVector<f64>, alpha: f64) -> Option<DiscreteLoop> {
        let x = lp.flatten(true) + step * alpha;
        let mn = x.len() - 1;
        let mut next = lp.with_flat_nodes(&x.rows(0, mn).into_owned());
        next.tau = x[mn];
        self.settle_tau(next).ok()
    }

    /// Tries the step with halving; returns the first iterate reducing the merit.
    fn line_search(
        &self,
        lp: &DiscreteLoop,
        step: &DVector<f64>,
        merit: f64,
        clear: &Option<Vec<f64>>,
        halvings: usize,
    ) -> Option<(DiscreteLoop, f64)> {
        let mut alpha = 1.0;
        for _ in 0..=halvings {
            if let Some(cand) = self.apply(lp, step, alpha) {
                if self.admissible(clear, &cand) {
                    if let Some(m) = self.merit(&cand) {
                        if m < merit {
                            log::trace!("step accepted at length {alpha:.3e}");
                            return Some((cand, m));
                        }
                    }
                }
            }
            alpha *= 0.5;
        }
        None
    }

    /// Levenberg-Marquardt steps `-(H^2 + mu)^-1 H g` for increasing `mu`.
    fn damped_step(
        &self,
        lp: &DiscreteLoop,
        hess: &DMatrix<f64>,
        grad: &DVector<f64>,
        merit: f64,
        clear: &Option<Vec<f64>>,
    ) -> Option<(DiscreteLoop, f64)> {
        let eig = hess.clone().symmetric_eigen();
        let scale = eig.eigenvalues.iter().fold(0.0_f64, |m, l| m.max(l.abs()));
        let proj = eig.eigenvectors.transpose() * grad;
        for k in -8..=2 {
            let mu = (scale * 10f64.powi(k)).powi(2);
            let coeff = DVector::from_fn(proj.len(), |i, _| {
                let l = eig.eigenvalues[i];
                -proj[i] * l / (l * l + mu)
            });
            let step = &eig.eigenvectors * coeff;
            if let Some(found) = self.line_search(lp, &step, merit, clear, 3) {
                log::trace!("damped step with mu = {mu:.3e}");
                return Some(found);
            }
        }
        None
    }

    fn constant_branch(&self, init: &DiscreteLoop) -> Result<CriticalPoint, SolveError> {
        let sys = &self.problem.system;
        let mut q = init.centroid();
        let n = q.len();
        let clearance = |q: &Point| -> Option<f64> {
            let pen = sys.penalty.as_ref().filter(|_| sys.eps > 0.0)?;
            if pen.domain.implicit(q) >= 0.0 {
                return Some(-1.0);
            }
            Some(
                pen.domain
                    .nearest_boundary_point(q)
                    .map(|p| -p.signed_distance)
                    .unwrap_or(-1.0),
            )
        };
        let mut iterations = 0;
        let mut jet = sys.effective_jet(&q).map_err(ActionError::from)?;
        while iterations < self.opts.max_iters {
            let g = jet.gradient.norm();
            if g <= self.opts.grad_tol {
                break;
            }
            iterations += 1;
            let shift = 1e-12 * jet.hessian.amax().max(1.0);
            let step = (&jet.hessian + DMatrix::identity(n, n) * shift)
                .lu()
                .solve(&(-&jet.gradient))
                .unwrap_or_else(|| -&jet.gradient);
            let c0 = clearance(&q);
            let mut alpha = 1.0;
            let mut accepted = None;
            for _ in 0..40 {
                let cand = &q + &step * alpha;
                let ok = match (c0, clearance(&cand)) {
                    (Some(a), Some(b)) => b > 0.0 && b >= self.opts.boundary_fraction * a,
                    _ => true,
                };
                if ok {
                    if let Ok(j) = sys.effective_jet(&cand) {
                        if j.gradient.norm() < g {
                            accepted = Some((cand, j));
                            break;
                        }
                    }
                }
                alpha *= 0.5;
            }
            // flat regions: walk downhill on W, at most a quarter of the clearance per step
            if accepted.is_none() {
                let reach = c0.map_or(0.1 * init.diameter().max(1.0), |c| 0.25 * c);
                let mut step = -&jet.gradient * (reach / g);
                for _ in 0..40 {
                    let cand = &q + &step;
                    let ok = match (c0, clearance(&cand)) {
                        (Some(a), Some(b)) => b > 0.0 && b >= self.opts.boundary_fraction * a,
                        _ => true,
                    };
                    if ok {
                        if let Ok(j) = sys.effective_jet(&cand) {
                            if j.value < jet.value {
                                accepted = Some((cand, j));
                                break;
                            }
                        }
                    }
                    step *= 0.5;
                }
            }
            match accepted {
                Some((c, j)) => {
                    q = c;
                    jet = j;
                }
                None => break,
            }
        }
        let m = init.len();
        let curve = DiscreteLoop::from_fn(m, n, init.tau, |_| q.clone())?;
        let residual = self.problem.energy - jet.value;
        let gradient_norm = (jet.gradient.norm_squared() * (init.tau / m as f64).powi(2) * m as f64
            + residual * residual)
            .sqrt();
        let best = Box::new(Iterate {
            curve: curve.clone(),
            gradient_norm,
            iterations,
        });
        if gradient_norm > self.opts.grad_tol {
            return Err(SolveError::Collapse(best));
        }
        Ok(CriticalPoint {
            morse_index: morse_index(&curve, sys, self.opts.index_tol)?,
            energy_residual: self.problem.energy_residual(&curve)?,
            curve,
            gradient_norm,
            iterations,
        })
    }
}

/// Newton iteration on the full `(nodes, tau)` gradient, with a damped
/// fallback and the period reset to its root after every step.
pub fn find_critical_point(
    init: &DiscreteLoop,
    problem: &ActionProblem<'_>,
    opts: &SolverOptions,
) -> Result<CriticalPoint, SolveError> {
    let search = Search { problem, opts };
    let scale = init.diameter().max(1.0);
    if init.stretch() <= 1e-24 * scale * scale {
        return search.constant_branch(init);
    }
    let mut cur = search.settle_tau(init.clone())?;
    let mut best: Option<Iterate> = None;
    let boxed = |b: &Option<Iterate>, cur: &DiscreteLoop, gn: f64, it: usize| {
        Box::new(b.clone().unwrap_or(Iterate {
            curve: cur.clone(),
            gradient_norm: gn,
            iterations: it,
        }))
    };
    for iter in 0..=opts.max_iters {
        let (grad, hess) = problem.gradient_and_hessian(&cur)?;
        let gn = grad.norm();
        if best.as_ref().map_or(true, |b| gn < b.gradient_norm) {
            best = Some(Iterate {
                curve: cur.clone(),
                gradient_norm: gn,
                iterations: iter,
            });
        }
        log::trace!("iter {iter}: |grad| = {gn:.3e}, tau = {:.6}", cur.tau);
        if cur.tau < opts.tau_floor {
            return Err(SolveError::TauFloor(boxed(&best, &cur, gn, iter)));
        }
        if cur.tau > opts.tau_max {
            return Err(SolveError::TauCeiling(boxed(&best, &cur, gn, iter)));
        }
        if gn <= opts.grad_tol {
            return Ok(CriticalPoint {
                morse_index: morse_index(&cur, &problem.system, opts.index_tol)?,
                energy_residual: problem.energy_residual(&cur)?,
                curve: cur,
                gradient_norm: gn,
                iterations: iter,
            });
        }
        if iter == opts.max_iters {
            break;
        }
        let g = grad.flatten();
        let clear = search.clearances(&cur);
        let mn = g.len() - 1;
        let shift = 1e-9 * hess.amax();
        let mut shifted = hess.clone();
        for i in 0..mn {
            shifted[(i, i)] += shift;
        }
        let newton = shifted.lu().solve(&(-&g));
        let next = newton
            .and_then(|s| search.line_search(&cur, &s, gn, &clear, 12))
            .or_else(|| search.damped_step(&cur, &hess, &g, gn, &clear));
        match next {
            Some((lp, _)) => cur = lp,
            None => return Err(SolveError::Stalled(boxed(&best, &cur, gn, iter))),
        }
    }
    let gn = best.as_ref().map_or(f64::NAN, |b| b.gradient_norm);
    Err(SolveError::IterationCap(boxed(&best, &cur, gn, opts.max_iters)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{PotentialField, PotentialSpec};
    use crate::geometry::{CollarProfile, Domain, DomainSpec, Penalty};
    use nalgebra::dvector;
    use std::f64::consts::PI;

    #[test]
    fn harmonic_circle_is_recovered() {
        let d = Domain::new(DomainSpec::Disk { radius: 0.4, dim: 2 }).unwrap();
        let pot = PotentialField::new(
            PotentialSpec::Harmonic {
                omega: 1.0,
                center: None,
            },
            &d,
        )
        .unwrap();
        let pen = Penalty::new(&d, CollarProfile::for_domain(&d));
        let eps = 1e-6;
        let sys = PenalizedSystem::new(&pot, Some(pen), eps);
        let plateau = pen.profile.plateau();
        let e = 0.09 + eps / (plateau * plateau);
        let problem = ActionProblem::new(sys, e);
        let opts = SolverOptions::default();
        let circle = DiscreteLoop::from_fn(128, 2, 6.0, |t| {
            let a = 2.0 * PI * t;
            dvector![0.3 * a.cos(), 0.3 * a.sin()]
        })
        .unwrap();
        let cp = find_critical_point(&circle, &problem, &opts).unwrap();
        assert!(cp.gradient_norm <= 1e-8);
        assert!((cp.curve.tau - 2.0 * PI).abs() < 1e-3, "tau {}", cp.curve.tau);
        for i in 0..cp.curve.len() {
            assert!((cp.curve.node(i).norm() - 0.3).abs() < 1e-3);
        }
        // every centered ellipse with a^2 + b^2 = 2E is a solution, so a
        // perturbed start lands on one of them
        let ellipse = DiscreteLoop::from_fn(128, 2, 6.0, |t| {
            let a = 2.0 * PI * t;
            dvector![0.28 * a.cos(), 0.31 * a.sin()]
        })
        .unwrap();
        let cp = find_critical_point(&ellipse, &problem, &opts).unwrap();
        assert!((cp.curve.tau - 2.0 * PI).abs() < 1e-3);
        assert!(cp.energy_residual < 1e-3);
        let r2: Vec<f64> = (0..128).map(|i| cp.curve.node(i).norm_squared()).collect();
        let (lo, hi) = r2.iter().fold((f64::MAX, 0.0_f64), |(l, h), &x| (l.min(x), h.max(x)));
        assert!((lo + hi - 0.18).abs() < 1e-3);
    }

    #[test]
    fn constant_loop_at_bump_maximum_with_matching_energy() {
        let d = Domain::new(DomainSpec::Disk { radius: 1.0, dim: 2 }).unwrap();
        let pot = PotentialField::new(
            PotentialSpec::Gaussian {
                amplitude: 1.0,
                center: vec![0.0, 0.0],
                width: 0.5,
            },
            &d,
        )
        .unwrap();
        let sys = PenalizedSystem::new(&pot, None, 0.0);
        let init = DiscreteLoop::from_fn(32, 2, 1.0, |_| dvector![0.05, -0.03]).unwrap();
        let cp = find_critical_point(&init, &ActionProblem::new(sys, 1.0), &SolverOptions::default())
            .unwrap();
        assert!(cp.curve.centroid().norm() < 1e-9);
        assert_eq!(cp.curve.diameter(), 0.0);
        // mismatched energy: the constant loop has no admissible period
        let err = find_critical_point(&init, &ActionProblem::new(sys, 0.8), &SolverOptions::default())
            .unwrap_err();
        assert!(matches!(err, SolveError::Collapse(_)));
        assert!(err.best().unwrap().curve.centroid().norm() < 1e-9);
    }

    #[test]
    fn morse_index_of_flat_constant_loop_is_zero() {
        let d = Domain::new(DomainSpec::Disk { radius: 1.0, dim: 2 }).unwrap();
        let pot = PotentialField::new(PotentialSpec::Zero, &d).unwrap();
        let sys = PenalizedSystem::new(&pot, None, 0.0);
        let lp = DiscreteLoop::from_fn(32, 2, 1.0, |_| dvector![0.1, 0.1]).unwrap();
        assert_eq!(morse_index(&lp, &sys, 1e-8).unwrap(), 0);
    }

    #[test]
    fn morse_index_grows_with_period_in_a_well() {
        // thresholds tau_k = 2 M sin(pi k / M), each crossing adds a mode pair per coordinate
        let d = Domain::new(DomainSpec::Disk { radius: 1.0, dim: 2 }).unwrap();
        let pot = PotentialField::new(
            PotentialSpec::Harmonic {
                omega: 1.0,
                center: None,
            },
            &d,
        )
        .unwrap();
        let sys = PenalizedSystem::new(&pot, None, 0.0);
        let m = 64;
        let thresholds: Vec<f64> = (1..4)
            .map(|k| 2.0 * m as f64 * (PI * k as f64 / m as f64).sin())
            .collect();
        let index_at = |tau: f64| {
            let lp = DiscreteLoop::from_fn(m, 2, tau, |_| dvector![0.0, 0.0]).unwrap();
            morse_index(&lp, &sys, 1e-8).unwrap()
        };
        assert_eq!(index_at(0.5 * thresholds[0]), 2);
        assert_eq!(index_at(0.5 * (thresholds[0] + thresholds[1])), 6);
        assert_eq!(index_at(0.5 * (thresholds[1] + thresholds[2])), 10);
    }
}
