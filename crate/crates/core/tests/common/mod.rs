#![allow(dead_code)]

use std::path::PathBuf;

use bounce_core::action::{ActionProblem, DiscreteLoop};
use bounce_core::runner::ScenarioConfig;
use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn scenario(name: &str) -> ScenarioConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(format!("{name}.cfg"));
    ScenarioConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// Smooth random planar loop inside the disk of radius `r_max`, with a few
/// low Fourier modes and node jitter.
pub fn random_loop(rng: &mut ChaCha8Rng, m: usize, r_max: f64) -> DiscreteLoop {
    let tau = std::f64::consts::TAU;
    let coeffs: Vec<[f64; 4]> = (0..3)
        .map(|_| std::array::from_fn(|_| rng.gen_range(-1.0..1.0)))
        .collect();
    let center: [f64; 2] = [rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2)];
    let raw = DMatrix::from_fn(m, 2, |i, d| {
        let t = i as f64 / m as f64;
        let mut x = 0.0;
        for (k, c) in coeffs.iter().enumerate() {
            let w = tau * (k + 1) as f64 * t;
            x += (c[2 * d] * w.cos() + c[2 * d + 1] * w.sin()) / (k + 1) as f64;
        }
        x
    });
    let jitter = DMatrix::from_fn(m, 2, |_, _| rng.gen_range(-1e-3..1e-3));
    let mut nodes = raw + jitter;
    let radius = (0..m).map(|i| nodes.row(i).norm()).fold(0.0_f64, f64::max);
    let offset = (center[0] * center[0] + center[1] * center[1]).sqrt();
    let scale = (rng.gen_range(0.6..0.97) * r_max - offset) / radius;
    for i in 0..m {
        for d in 0..2 {
            nodes[(i, d)] = nodes[(i, d)] * scale + center[d];
        }
    }
    DiscreteLoop::new(nodes, rng.gen_range(0.5..5.0)).unwrap()
}

/// Largest gradient entry error against central differences of the action,
/// relative to the largest gradient entry. The period is the last entry.
pub fn gradient_fd_error(problem: &ActionProblem<'_>, lp: &DiscreteLoop, step: f64) -> f64 {
    let g = problem.gradient(lp).unwrap().flatten();
    let (m, n) = (lp.len(), lp.dim());
    let value = |x: &DiscreteLoop| problem.value(x).unwrap();
    let mut worst = 0.0_f64;
    for k in 0..=m * n {
        let (mut plus, mut minus) = (lp.clone(), lp.clone());
        if k < m * n {
            plus.nodes[(k / n, k % n)] += step;
            minus.nodes[(k / n, k % n)] -= step;
        } else {
            plus.tau += step;
            minus.tau -= step;
        }
        let fd = (value(&plus) - value(&minus)) / (2.0 * step);
        worst = worst.max((fd - g[k]).abs());
    }
    worst / g.amax()
}

/// Largest full-Hessian entry error against central differences of the
/// gradient, relative to the largest Hessian entry.
pub fn hessian_fd_error(problem: &ActionProblem<'_>, lp: &DiscreteLoop, step: f64) -> f64 {
    let h = problem.hessian_full(lp).unwrap();
    let (m, n) = (lp.len(), lp.dim());
    let grad = |x: &DiscreteLoop| problem.gradient(x).unwrap().flatten();
    let mut worst = 0.0_f64;
    for k in 0..=m * n {
        let (mut plus, mut minus) = (lp.clone(), lp.clone());
        if k < m * n {
            plus.nodes[(k / n, k % n)] += step;
            minus.nodes[(k / n, k % n)] -= step;
        } else {
            plus.tau += step;
            minus.tau -= step;
        }
        let col = (grad(&plus) - grad(&minus)) / (2.0 * step);
        worst = worst.max((col - h.column(k)).amax());
    }
    worst / h.amax()
}
