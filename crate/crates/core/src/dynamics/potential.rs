use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::geometry::{Domain, DomainSpec, Jet, Point};

/// Built-in potentials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PotentialSpec {
    /// `V = 0`.
    Zero,
    /// Uniform field `V = g <e, q>`.
    Linear { g: f64, direction: Vec<f64> },
    /// Isotropic well `V = omega^2 |q - c|^2 / 2`.
    Harmonic {
        omega: f64,
        #[serde(default)]
        center: Option<Vec<f64>>,
    },
    /// Bump `V = A exp(-|q - c|^2 / s^2)`.
    Gaussian {
        amplitude: f64,
        center: Vec<f64>,
        width: f64,
    },
}

/// Where the extremal statistics came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatsSource {
    Analytic,
    Sampled,
}

/// Bounds on `V` and `|grad V|` over the closed domain.
///
/// Sampled bounds are inflated by a Lipschitz margin over half a grid cell so
/// they also dominate values at points between the samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PotentialStats {
    pub v_min: f64,
    pub v_max: f64,
    pub grad_max: f64,
    pub source: StatsSource,
    /// Grid points per axis of the sampling lattice.
    pub per_axis: usize,
    /// Number of points of the lattice (plus boundary samples) inside the closed domain.
    pub samples: usize,
}

/// A potential together with its extremal statistics over a domain.
#[derive(Debug, Clone)]
pub struct PotentialField {
    spec: PotentialSpec,
    dim: usize,
    sampled: PotentialStats,
    effective: PotentialStats,
}

impl PotentialField {
    pub fn new(spec: PotentialSpec, domain: &Domain) -> Result<Self, String> {
        let dim = domain.dim();
        check_spec(&spec, dim)?;
        let per_axis = default_resolution(dim);
        let sampled = sample_stats(&spec, domain, per_axis);
        let effective = analytic_stats(&spec, domain).unwrap_or_else(|| sampled.clone());
        Ok(Self {
            spec,
            dim,
            sampled,
            effective,
        })
    }

    pub fn spec(&self) -> &PotentialSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Statistics from the sampling lattice, always available.
    pub fn sampled_stats(&self) -> &PotentialStats {
        &self.sampled
    }

    /// Analytic statistics when a closed form exists, otherwise the sampled ones.
    pub fn stats(&self) -> &PotentialStats {
        &self.effective
    }

    pub fn value(&self, q: &Point) -> f64 {
        spec_value(&self.spec, q)
    }

    pub fn gradient(&self, q: &Point) -> Point {
        spec_jet(&self.spec, q).gradient
    }

    pub fn jet(&self, q: &Point) -> Jet {
        spec_jet(&self.spec, q)
    }
}

/// 256 points per axis in the plane; coarser lattices in higher dimension keep
/// the total below a few million points.
pub fn default_resolution(dim: usize) -> usize {
    match dim {
        1 | 2 => 256,
        3 => 96,
        _ => 36,
    }
}

fn check_spec(spec: &PotentialSpec, dim: usize) -> Result<(), String> {
    let check = |name: &str, v: &[f64]| {
        if v.len() != dim {
            Err(format!("{name} has length {}, domain dimension is {dim}", v.len()))
        } else {
            Ok(())
        }
    };
    match spec {
        PotentialSpec::Zero => Ok(()),
        PotentialSpec::Linear { direction, .. } => check("direction", direction),
        PotentialSpec::Harmonic { center, .. } => match center {
            Some(c) => check("center", c),
            None => Ok(()),
        },
        PotentialSpec::Gaussian { center, width, .. } => {
            if !(*width > 0.0) {
                return Err(format!("gaussian width must be positive, got {width}"));
            }
            check("center", center)
        }
    }
}

fn vec_of(v: &[f64]) -> Point {
    DVector::from_column_slice(v)
}

fn harmonic_center(center: &Option<Vec<f64>>, dim: usize) -> Point {
    center
        .as_ref()
        .map(|c| vec_of(c))
        .unwrap_or_else(|| DVector::zeros(dim))
}

fn spec_value(spec: &PotentialSpec, q: &Point) -> f64 {
    match spec {
        PotentialSpec::Zero => 0.0,
        PotentialSpec::Linear { g, direction } => g * vec_of(direction).dot(q),
        PotentialSpec::Harmonic { omega, center } => {
            let d = q - harmonic_center(center, q.len());
            0.5 * omega * omega * d.norm_squared()
        }
        PotentialSpec::Gaussian {
            amplitude,
            center,
            width,
        } => {
            let d = q - vec_of(center);
            amplitude * (-d.norm_squared() / (width * width)).exp()
        }
    }
}

fn spec_jet(spec: &PotentialSpec, q: &Point) -> Jet {
    let n = q.len();
    match spec {
        PotentialSpec::Zero => Jet::zero(n),
        PotentialSpec::Linear { g, direction } => {
            let e = vec_of(direction);
            Jet {
                value: g * e.dot(q),
                gradient: e * *g,
                hessian: DMatrix::zeros(n, n),
            }
        }
        PotentialSpec::Harmonic { omega, center } => {
            let w2 = omega * omega;
            let d = q - harmonic_center(center, n);
            Jet {
                value: 0.5 * w2 * d.norm_squared(),
                gradient: &d * w2,
                hessian: DMatrix::identity(n, n) * w2,
            }
        }
        PotentialSpec::Gaussian {
            amplitude,
            center,
            width,
        } => {
            let s2 = width * width;
            let d = q - vec_of(center);
            let value = amplitude * (-d.norm_squared() / s2).exp();
            let gradient = &d * (-2.0 * value / s2);
            let hessian = (&d * d.transpose() * (4.0 / s2) - DMatrix::identity(n, n) * 2.0)
                * (value / s2);
            Jet {
                value,
                gradient,
                hessian,
            }
        }
    }
}

fn sample_stats(spec: &PotentialSpec, domain: &Domain, per_axis: usize) -> PotentialStats {
    let dim = domain.dim();
    let (lo, hi) = domain.bounding_box();
    let spacing: Vec<f64> = (0..dim)
        .map(|i| (hi[i] - lo[i]) / (per_axis - 1) as f64)
        .collect();
    let mut v_min = f64::INFINITY;
    let mut v_max = f64::NEG_INFINITY;
    let mut grad_max = 0.0_f64;
    let mut hess_max = 0.0_f64;
    let mut count = 0usize;
    let mut visit = |q: &Point| {
        let jet = spec_jet(spec, q);
        v_min = v_min.min(jet.value);
        v_max = v_max.max(jet.value);
        grad_max = grad_max.max(jet.gradient.norm());
        hess_max = hess_max.max(jet.hessian.norm());
        count += 1;
    };
    let total = per_axis.pow(dim as u32);
    let mut q = DVector::zeros(dim);
    for flat in 0..total {
        let mut rem = flat;
        for i in 0..dim {
            let idx = rem % per_axis;
            rem /= per_axis;
            q[i] = lo[i] + idx as f64 * spacing[i];
        }
        if domain.implicit(&q) <= 0.0 {
            visit(&q);
        }
    }
    for b in domain.boundary_samples() {
        visit(b);
    }
    let half_diag = 0.5 * spacing.iter().map(|s| s * s).sum::<f64>().sqrt();
    let margin = grad_max * half_diag + 0.5 * hess_max * half_diag * half_diag;
    PotentialStats {
        v_min: v_min - margin,
        v_max: v_max + margin,
        grad_max: grad_max + hess_max * half_diag,
        source: StatsSource::Sampled,
        per_axis,
        samples: count,
    }
}

/// Closed-form extremes for the combinations where they are elementary.
fn analytic_stats(spec: &PotentialSpec, domain: &Domain) -> Option<PotentialStats> {
    let base = |v_min: f64, v_max: f64, grad_max: f64| PotentialStats {
        v_min,
        v_max,
        grad_max,
        source: StatsSource::Analytic,
        per_axis: 0,
        samples: 0,
    };
    match spec {
        PotentialSpec::Zero => Some(base(0.0, 0.0, 0.0)),
        PotentialSpec::Linear { g, direction } => {
            let e = vec_of(direction);
            let w = e * *g;
            // support function of the domain in direction w
            let support = match *domain.spec() {
                DomainSpec::Disk { radius, .. } => radius * w.norm(),
                DomainSpec::Ellipse { a, b } => {
                    ((a * w[0]).powi(2) + (b * w[1]).powi(2)).sqrt()
                }
                DomainSpec::SmoothRect { .. } => return None,
            };
            Some(base(-support, support, w.norm()))
        }
        PotentialSpec::Harmonic { omega, center } => match *domain.spec() {
            DomainSpec::Disk { radius, dim } => {
                let c = harmonic_center(center, dim).norm();
                let w2 = omega * omega;
                let near = (c - radius).max(0.0);
                let far = c + radius;
                Some(base(0.5 * w2 * near * near, 0.5 * w2 * far * far, w2 * far))
            }
            _ => None,
        },
        PotentialSpec::Gaussian { .. } => None,
    }
}
