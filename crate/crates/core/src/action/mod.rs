//! Discrete free-time action on closed loops with a free period.
//!
//! A loop is `M` nodes `x_0 .. x_{M-1}` on the uniform periodic grid of
//! normalized time plus a period `tau`. With `W = V + eps U`,
//!
//! ```text
//! A(x, tau) = sum_i M |x_{i+1} - x_i|^2 / (2 tau) - (tau / M) sum_i W(x_i) + tau E
//! ```
//!
//! which is the trapezoidal rule for `tau * int_0^1 [|x'|^2/(2 tau^2) - W(x) + E] dt`
//! with forward differences on the edges. All derivatives below are exact
//! derivatives of this discrete function.

mod solver;

pub use solver::{find_critical_point, morse_index, CriticalPoint, Iterate, SolveError, SolverOptions};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::PenalizedSystem;
use crate::geometry::{GeometryError, Jet, Point};

pub const MIN_NODES: usize = 16;

#[derive(Debug, Error)]
pub enum ActionError {
    #[error("invalid loop: {0}")]
    InvalidLoop(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Closed polygon sampled on the uniform grid `t_i = i / M`, with its period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteLoop {
    /// Row `i` is node `i`.
    pub nodes: DMatrix<f64>,
    pub tau: f64,
}

impl DiscreteLoop {
    pub fn new(nodes: DMatrix<f64>, tau: f64) -> Result<Self, ActionError> {
        if nodes.nrows() < MIN_NODES {
            return Err(ActionError::InvalidLoop(format!(
                "{} nodes, at least {MIN_NODES} required",
                nodes.nrows()
            )));
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(ActionError::InvalidLoop(format!("period {tau} must be positive")));
        }
        if nodes.iter().any(|x| !x.is_finite()) {
            return Err(ActionError::InvalidLoop("non-finite node coordinate".into()));
        }
        Ok(Self { nodes, tau })
    }

    /// Samples `curve(t)` for `t = i / m`.
    pub fn from_fn(
        m: usize,
        dim: usize,
        tau: f64,
        curve: impl Fn(f64) -> Point,
    ) -> Result<Self, ActionError> {
        let mut nodes = DMatrix::zeros(m, dim);
        for i in 0..m {
            let p = curve(i as f64 / m as f64);
            nodes.row_mut(i).copy_from(&p.transpose());
        }
        Self::new(nodes, tau)
    }

    pub fn len(&self) -> usize {
        self.nodes.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.nodes.ncols()
    }

    pub fn node(&self, i: usize) -> Point {
        let m = self.len();
        self.nodes.row(i % m).transpose()
    }

    /// Node `i + k` in place of node `i`.
    pub fn cyclic_shift(&self, k: usize) -> Self {
        let m = self.len();
        let nodes = DMatrix::from_fn(m, self.dim(), |i, d| self.nodes[((i + k) % m, d)]);
        Self {
            nodes,
            tau: self.tau,
        }
    }

    /// Largest distance between two nodes.
    pub fn diameter(&self) -> f64 {
        let m = self.len();
        let mut best = 0.0_f64;
        for i in 0..m {
            for j in (i + 1)..m {
                best = best.max((self.nodes.row(i) - self.nodes.row(j)).norm());
            }
        }
        best
    }

    pub fn centroid(&self) -> Point {
        self.nodes.row_mean().transpose()
    }

    /// `S = (M/2) sum |x_{i+1} - x_i|^2`, so the kinetic part of the action is `S / tau`.
    pub fn stretch(&self) -> f64 {
        let m = self.len();
        let mut s = 0.0;
        for i in 0..m {
            let j = (i + 1) % m;
            s += (self.nodes.row(j) - self.nodes.row(i)).norm_squared();
        }
        0.5 * m as f64 * s
    }

    /// Physical velocity on edge `i -> i+1`.
    pub fn edge_velocity(&self, i: usize) -> Point {
        let m = self.len();
        let scale = m as f64 / self.tau;
        (self.node(i + 1) - self.node(i)) * scale
    }

    /// Discrete `H^1` distance between the node sequences of two loops.
    pub fn h1_distance(&self, other: &Self) -> f64 {
        let m = self.len();
        let diff = &self.nodes - &other.nodes;
        let mut l2 = 0.0;
        let mut d1 = 0.0;
        for i in 0..m {
            let j = (i + 1) % m;
            l2 += diff.row(i).norm_squared();
            d1 += (diff.row(j) - diff.row(i)).norm_squared();
        }
        (l2 / m as f64 + d1 * m as f64).sqrt()
    }

    /// Flattened `(node, coordinate)` vector, optionally followed by `tau`.
    pub(crate) fn flatten(&self, with_tau: bool) -> DVector<f64> {
        let (m, n) = (self.len(), self.dim());
        let extra = usize::from(with_tau);
        DVector::from_fn(m * n + extra, |k, _| {
            if k < m * n {
                self.nodes[(k / n, k % n)]
            } else {
                self.tau
            }
        })
    }

    pub(crate) fn with_flat_nodes(&self, flat: &DVector<f64>) -> Self {
        let (m, n) = (self.len(), self.dim());
        Self {
            nodes: DMatrix::from_fn(m, n, |i, d| flat[i * n + d]),
            tau: self.tau,
        }
    }
}

/// Gradient with respect to the nodes (row `i` for node `i`) and the period.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionGradient {
    pub nodes: DMatrix<f64>,
    pub tau: f64,
}

impl ActionGradient {
    pub fn flatten(&self) -> DVector<f64> {
        let (m, n) = (self.nodes.nrows(), self.nodes.ncols());
        DVector::from_fn(m * n + 1, |k, _| {
            if k < m * n {
                self.nodes[(k / n, k % n)]
            } else {
                self.tau
            }
        })
    }

    pub fn norm(&self) -> f64 {
        (self.nodes.norm_squared() + self.tau * self.tau).sqrt()
    }
}

/// Discrete action at a fixed energy and penalty strength.
#[derive(Debug, Clone, Copy)]
pub struct ActionProblem<'a> {
    pub system: PenalizedSystem<'a>,
    pub energy: f64,
}

impl<'a> ActionProblem<'a> {
    pub fn new(system: PenalizedSystem<'a>, energy: f64) -> Self {
        Self { system, energy }
    }

    fn node_values(&self, lp: &DiscreteLoop) -> Result<Vec<f64>, ActionError> {
        (0..lp.len())
            .map(|i| Ok(self.system.effective_value(&lp.node(i))?))
            .collect()
    }

    fn node_jets(&self, lp: &DiscreteLoop) -> Result<Vec<Jet>, ActionError> {
        (0..lp.len())
            .map(|i| Ok(self.system.effective_jet(&lp.node(i))?))
            .collect()
    }

    /// Mean of `V + eps U` over the nodes.
    pub fn mean_potential(&self, lp: &DiscreteLoop) -> Result<f64, ActionError> {
        let w = self.node_values(lp)?;
        Ok(w.iter().sum::<f64>() / w.len() as f64)
    }

    pub fn value(&self, lp: &DiscreteLoop) -> Result<f64, ActionError> {
        let m = lp.len() as f64;
        let w: f64 = self.node_values(lp)?.iter().sum();
        Ok(lp.stretch() / lp.tau - lp.tau / m * w + lp.tau * self.energy)
    }

    pub fn gradient(&self, lp: &DiscreteLoop) -> Result<ActionGradient, ActionError> {
        let jets = self.node_jets(lp)?;
        Ok(self.gradient_from_jets(lp, &jets))
    }

    fn gradient_from_jets(&self, lp: &DiscreteLoop, jets: &[Jet]) -> ActionGradient {
        let m = lp.len();
        let mf = m as f64;
        let tau = lp.tau;
        let mut nodes = DMatrix::zeros(m, lp.dim());
        let mut w_sum = 0.0;
        for i in 0..m {
            let lap = lp.node(i) * 2.0 - lp.node(i + m - 1) - lp.node(i + 1);
            let g = lap * (mf / tau) - &jets[i].gradient * (tau / mf);
            nodes.row_mut(i).copy_from(&g.transpose());
            w_sum += jets[i].value;
        }
        let d_tau = self.energy - w_sum / mf - lp.stretch() / (tau * tau);
        ActionGradient { nodes, tau: d_tau }
    }

    /// Second derivative in the nodes with `tau` frozen, `(MN) x (MN)`.
    pub fn hessian_fixed_tau(&self, lp: &DiscreteLoop) -> Result<DMatrix<f64>, ActionError> {
        let jets = self.node_jets(lp)?;
        Ok(self.hessian_from_jets(lp, &jets))
    }

    fn hessian_from_jets(&self, lp: &DiscreteLoop, jets: &[Jet]) -> DMatrix<f64> {
        let (m, n) = (lp.len(), lp.dim());
        let mf = m as f64;
        let k = mf / lp.tau;
        let c = lp.tau / mf;
        let mut h = DMatrix::zeros(m * n, m * n);
        for i in 0..m {
            let prev = (i + m - 1) % m;
            let next = (i + 1) % m;
            for d in 0..n {
                h[(i * n + d, i * n + d)] += 2.0 * k;
                h[(i * n + d, prev * n + d)] -= k;
                h[(i * n + d, next * n + d)] -= k;
            }
            for a in 0..n {
                for b in 0..n {
                    h[(i * n + a, i * n + b)] -= c * jets[i].hessian[(a, b)];
                }
            }
        }
        h
    }

    /// Hessian in all `MN + 1` variables, the period last.
    pub fn hessian_full(&self, lp: &DiscreteLoop) -> Result<DMatrix<f64>, ActionError> {
        let jets = self.node_jets(lp)?;
        Ok(self.full_from_jets(lp, &jets))
    }

    fn full_from_jets(&self, lp: &DiscreteLoop, jets: &[Jet]) -> DMatrix<f64> {
        let (m, n) = (lp.len(), lp.dim());
        let mf = m as f64;
        let tau = lp.tau;
        let inner = self.hessian_from_jets(lp, jets);
        let size = m * n + 1;
        let mut h = DMatrix::zeros(size, size);
        h.view_mut((0, 0), (m * n, m * n)).copy_from(&inner);
        for i in 0..m {
            let lap = lp.node(i) * 2.0 - lp.node(i + m - 1) - lp.node(i + 1);
            let col = lap * (-mf / (tau * tau)) - &jets[i].gradient / mf;
            for d in 0..n {
                h[(i * n + d, m * n)] = col[d];
                h[(m * n, i * n + d)] = col[d];
            }
        }
        h[(m * n, m * n)] = 2.0 * lp.stretch() / (tau * tau * tau);
        h
    }

    /// Gradient and full Hessian from one pass of potential evaluations.
    pub(crate) fn gradient_and_hessian(
        &self,
        lp: &DiscreteLoop,
    ) -> Result<(ActionGradient, DMatrix<f64>), ActionError> {
        let jets = self.node_jets(lp)?;
        Ok((self.gradient_from_jets(lp, &jets), self.full_from_jets(lp, &jets)))
    }

    /// Per-node energy `|v|^2/2 + V + eps U`, with `|v|^2` averaged over the two adjacent edges.
    pub fn node_energies(&self, lp: &DiscreteLoop) -> Result<Vec<f64>, ActionError> {
        let m = lp.len();
        let w = self.node_values(lp)?;
        Ok((0..m)
            .map(|i| {
                let kin = 0.25
                    * (lp.edge_velocity(i).norm_squared()
                        + lp.edge_velocity(i + m - 1).norm_squared());
                kin + w[i]
            })
            .collect())
    }

    /// `max_i |E_i - E|`.
    pub fn energy_residual(&self, lp: &DiscreteLoop) -> Result<f64, ActionError> {
        Ok(self
            .node_energies(lp)?
            .iter()
            .map(|e| (e - self.energy).abs())
            .fold(0.0, f64::max))
    }

    /// Period solving the `tau` equation for fixed nodes, `sqrt(S / (E - mean W))`.
    pub fn tau_root(&self, lp: &DiscreteLoop) -> Result<Option<f64>, ActionError> {
        let gap = self.energy - self.mean_potential(lp)?;
        let s = lp.stretch();
        if gap > 0.0 && s > 0.0 {
            Ok(Some((s / gap).sqrt()))
        } else {
            Ok(None)
        }
    }
}

/// Discrete action value.
pub fn action_value(lp: &DiscreteLoop, sys: &PenalizedSystem<'_>, energy: f64) -> Result<f64, ActionError> {
    ActionProblem::new(*sys, energy).value(lp)
}

/// Exact gradient of [`action_value`].
pub fn action_gradient(
    lp: &DiscreteLoop,
    sys: &PenalizedSystem<'_>,
    energy: f64,
) -> Result<ActionGradient, ActionError> {
    ActionProblem::new(*sys, energy).gradient(lp)
}

/// Node Hessian at frozen period; independent of the energy level.
pub fn action_hessian_fixed_tau(
    lp: &DiscreteLoop,
    sys: &PenalizedSystem<'_>,
) -> Result<DMatrix<f64>, ActionError> {
    ActionProblem::new(*sys, 0.0).hessian_fixed_tau(lp)
}
