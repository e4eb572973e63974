//! Implicit domains, nearest-boundary projection, and the collar/penalty fields.
//!
//! A domain is the sublevel set `{F < 0}` of a smooth function `F`. Distances
//! to the boundary come from nearest-point projection onto `{F = 0}`: closed
//! form for balls, a robust one-dimensional root for ellipses, and a seeded
//! Newton iteration on the Lagrange conditions for every other shape.
//!
//! The collar function `h = k(dist)` equals the boundary distance inside a
//! band of width `d0`, blends to a constant between `d0` and `2 d0`, and is
//! flat beyond. The penalty `U = 1 / h^2` built from it confines penalized
//! trajectories to the domain.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Points and vectors of the configuration space.
pub type Point = DVector<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("boundary projection did not converge at point {point:?}")]
    ProjectionFailed { point: Vec<f64> },
    #[error("point {point:?} is at distance {distance} >= reach {reach}; projection is not unique")]
    CollarViolation {
        point: Vec<f64>,
        distance: f64,
        reach: f64,
    },
    #[error("point {point:?} lies outside the closed domain (signed distance {distance})")]
    OutsideDomain { point: Vec<f64>, distance: f64 },
    #[error("collar value {h} below 1e-12 at {point:?}: penalty blows up at the boundary")]
    BoundaryContact { point: Vec<f64>, h: f64 },
    #[error("point has dimension {got}, domain has dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid domain: {0}")]
    Invalid(String),
}

/// Serializable description of a built-in domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DomainSpec {
    /// Euclidean ball centered at the origin.
    Disk {
        radius: f64,
        #[serde(default = "default_dim")]
        dim: usize,
    },
    /// Axis-aligned ellipse `(x/a)^2 + (y/b)^2 < 1`.
    Ellipse { a: f64, b: f64 },
    /// Rounded rectangle `(x/a)^p + (y/b)^p < 1` with even `p`.
    SmoothRect {
        a: f64,
        b: f64,
        #[serde(default = "default_rect_power")]
        p: u32,
    },
}

fn default_dim() -> usize {
    2
}

fn default_rect_power() -> u32 {
    4
}

#[derive(Debug, Clone, PartialEq)]
enum Shape {
    Ball { radius: f64, dim: usize },
    Ellipse { a: f64, b: f64 },
    SmoothRect { a: f64, b: f64, p: i32 },
}

/// Nearest boundary point of a query point together with the outer normal there.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub foot: Point,
    pub normal: Point,
    /// Signed distance of the query point: negative inside.
    pub signed_distance: f64,
}

/// An implicitly described smooth bounded domain. Immutable after construction.
#[derive(Debug, Clone)]
pub struct Domain {
    spec: DomainSpec,
    shape: Shape,
    lower: Point,
    upper: Point,
    diameter: f64,
    reach: f64,
    samples: Arc<Vec<Point>>,
}

const BOUNDARY_SAMPLES_2D: usize = 2048;
const BOUNDARY_SAMPLES_ND: usize = 4096;

impl Domain {
    pub fn new(spec: DomainSpec) -> Result<Self, GeometryError> {
        let shape = match spec {
            DomainSpec::Disk { radius, dim } => {
                if !(radius > 0.0 && radius.is_finite()) {
                    return Err(GeometryError::Invalid(format!("disk radius {radius}")));
                }
                if !(1..=4).contains(&dim) {
                    return Err(GeometryError::Invalid(format!(
                        "dimension {dim} not supported (1..=4)"
                    )));
                }
                Shape::Ball { radius, dim }
            }
            DomainSpec::Ellipse { a, b } => {
                if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()) {
                    return Err(GeometryError::Invalid(format!("ellipse axes {a}, {b}")));
                }
                Shape::Ellipse { a, b }
            }
            DomainSpec::SmoothRect { a, b, p } => {
                if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()) {
                    return Err(GeometryError::Invalid(format!("rectangle half-sides {a}, {b}")));
                }
                if p < 2 || p % 2 != 0 {
                    return Err(GeometryError::Invalid(format!(
                        "smooth_rect exponent must be even and >= 2, got {p}"
                    )));
                }
                Shape::SmoothRect { a, b, p: p as i32 }
            }
        };
        let dim = shape.dim();
        let (lower, upper) = match shape {
            Shape::Ball { radius, dim } => (
                DVector::from_element(dim, -radius),
                DVector::from_element(dim, radius),
            ),
            Shape::Ellipse { a, b } | Shape::SmoothRect { a, b, .. } => (
                DVector::from_vec(vec![-a, -b]),
                DVector::from_vec(vec![a, b]),
            ),
        };
        let samples = Arc::new(sample_boundary(&shape, dim));
        let mut domain = Domain {
            spec,
            shape,
            lower,
            upper,
            diameter: 0.0,
            reach: 0.0,
            samples,
        };
        domain.diameter = domain.compute_diameter();
        domain.reach = domain.compute_reach();
        Ok(domain)
    }

    pub fn spec(&self) -> &DomainSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.shape.dim()
    }

    pub fn bounding_box(&self) -> (&Point, &Point) {
        (&self.lower, &self.upper)
    }

    pub fn diameter(&self) -> f64 {
        self.diameter
    }

    /// Lower bound on the boundary reach (smallest radius of curvature for the
    /// convex built-ins).
    pub fn reach(&self) -> f64 {
        self.reach
    }

    /// Ray-cast boundary samples used for seeding, diameter and plotting.
    pub fn boundary_samples(&self) -> &[Point] {
        &self.samples
    }

    /// Implicit function `F`; the domain is `{F < 0}`.
    pub fn implicit(&self, q: &Point) -> f64 {
        match self.shape {
            Shape::Ball { radius, .. } => q.norm() - radius,
            Shape::Ellipse { a, b } => (q[0] / a).powi(2) + (q[1] / b).powi(2) - 1.0,
            Shape::SmoothRect { a, b, p } => (q[0] / a).powi(p) + (q[1] / b).powi(p) - 1.0,
        }
    }

    pub fn implicit_gradient(&self, q: &Point) -> Point {
        match self.shape {
            Shape::Ball { .. } => {
                let r = q.norm();
                if r == 0.0 {
                    DVector::zeros(q.len())
                } else {
                    q / r
                }
            }
            Shape::Ellipse { a, b } => {
                DVector::from_vec(vec![2.0 * q[0] / (a * a), 2.0 * q[1] / (b * b)])
            }
            Shape::SmoothRect { a, b, p } => {
                let pf = p as f64;
                DVector::from_vec(vec![
                    pf * q[0].powi(p - 1) / a.powi(p),
                    pf * q[1].powi(p - 1) / b.powi(p),
                ])
            }
        }
    }

    pub fn implicit_hessian(&self, q: &Point) -> DMatrix<f64> {
        match self.shape {
            Shape::Ball { .. } => {
                let n = q.len();
                let r = q.norm();
                if r == 0.0 {
                    return DMatrix::zeros(n, n);
                }
                let u = q / r;
                (DMatrix::identity(n, n) - &u * u.transpose()) / r
            }
            Shape::Ellipse { a, b } => {
                DMatrix::from_diagonal(&DVector::from_vec(vec![2.0 / (a * a), 2.0 / (b * b)]))
            }
            Shape::SmoothRect { a, b, p } => {
                let c = (p * (p - 1)) as f64;
                DMatrix::from_diagonal(&DVector::from_vec(vec![
                    c * q[0].powi(p - 2) / a.powi(p),
                    c * q[1].powi(p - 2) / b.powi(p),
                ]))
            }
        }
    }

    /// Outer unit normal at a boundary point (normalized gradient of `F`).
    pub fn outer_normal(&self, foot: &Point) -> Point {
        let g = self.implicit_gradient(foot);
        let n = g.norm();
        g / n
    }

    fn check_dim(&self, q: &Point) -> Result<(), GeometryError> {
        if q.len() != self.dim() {
            return Err(GeometryError::DimensionMismatch {
                expected: self.dim(),
                got: q.len(),
            });
        }
        Ok(())
    }

    /// Nearest boundary point without any reach check.
    pub fn nearest_boundary_point(&self, q: &Point) -> Result<Projection, GeometryError> {
        self.check_dim(q)?;
        let foot = match self.shape {
            Shape::Ball { radius, dim } => {
                let r = q.norm();
                if r == 0.0 {
                    let mut e = DVector::zeros(dim);
                    e[0] = radius;
                    e
                } else {
                    q * (radius / r)
                }
            }
            Shape::Ellipse { a, b } => ellipse_foot(a, b, q[0], q[1]),
            Shape::SmoothRect { .. } => self.project_newton(q)?,
        };
        let normal = self.outer_normal(&foot);
        let dist = (q - &foot).norm();
        let sign = if self.implicit(q) > 0.0 { 1.0 } else { -1.0 };
        Ok(Projection {
            foot,
            normal,
            signed_distance: sign * dist,
        })
    }

    /// Signed distance to the boundary: negative inside, positive outside.
    pub fn signed_distance(&self, q: &Point) -> Result<f64, GeometryError> {
        Ok(self.nearest_boundary_point(q)?.signed_distance)
    }

    /// Nearest boundary point and outer normal, refusing points whose
    /// projection is not guaranteed unique (distance at or beyond the reach).
    pub fn boundary_projection(&self, q: &Point) -> Result<(Point, Point), GeometryError> {
        let proj = self.nearest_boundary_point(q)?;
        let distance = proj.signed_distance.abs();
        if distance >= self.reach {
            return Err(GeometryError::CollarViolation {
                point: q.iter().copied().collect(),
                distance,
                reach: self.reach,
            });
        }
        Ok((proj.foot, proj.normal))
    }

    /// Generic projection: Newton on `p - q + lambda grad F(p) = 0, F(p) = 0`,
    /// seeded from the nearest boundary sample and from a Gauss-Newton descent
    /// on `F^2` starting at `q`. Works for every shape; used directly for
    /// shapes without a closed form.
    pub fn project_newton(&self, q: &Point) -> Result<Point, GeometryError> {
        self.check_dim(q)?;
        let seed_sample = self
            .samples
            .iter()
            .min_by(|x, y| {
                (*x - q)
                    .norm_squared()
                    .total_cmp(&(*y - q).norm_squared())
            })
            .cloned()
            .ok_or_else(|| GeometryError::Invalid("no boundary samples".into()))?;
        let mut seed_descent = q.clone();
        for _ in 0..60 {
            let f = self.implicit(&seed_descent);
            let g = self.implicit_gradient(&seed_descent);
            let gg = g.norm_squared();
            if gg < 1e-300 {
                break;
            }
            seed_descent -= g * (f / gg);
            if f.abs() < 1e-14 {
                break;
            }
        }
        let mut best: Option<Point> = None;
        for seed in [seed_sample, seed_descent] {
            if let Some(foot) = self.newton_foot(q, seed) {
                let better = match &best {
                    None => true,
                    Some(b) => (&foot - q).norm() < (b - q).norm(),
                };
                if better {
                    best = Some(foot);
                }
            }
        }
        best.ok_or_else(|| GeometryError::ProjectionFailed {
            point: q.iter().copied().collect(),
        })
    }

    fn newton_foot(&self, q: &Point, seed: Point) -> Option<Point> {
        let n = q.len();
        let mut p = seed;
        let g0 = self.implicit_gradient(&p);
        let gg = g0.norm_squared();
        if !(gg > 0.0) {
            return None;
        }
        let mut lambda = -(q - &p).dot(&g0) / gg;
        let scale = self.diameter.max(1.0);
        for _ in 0..60 {
            let g = self.implicit_gradient(&p);
            let hess = self.implicit_hessian(&p);
            let mut r = DVector::zeros(n + 1);
            let r1 = &p - q + &g * lambda;
            r.rows_mut(0, n).copy_from(&r1);
            r[n] = self.implicit(&p);
            let gnorm = g.norm();
            if r1.norm() <= 1e-14 * scale && r[n].abs() <= 1e-15 * gnorm.max(1.0) * scale {
                return Some(p);
            }
            let mut jac = DMatrix::zeros(n + 1, n + 1);
            let top = DMatrix::identity(n, n) + hess * lambda;
            jac.view_mut((0, 0), (n, n)).copy_from(&top);
            for i in 0..n {
                jac[(i, n)] = g[i];
                jac[(n, i)] = g[i];
            }
            let step = jac.lu().solve(&(-r))?;
            p += step.rows(0, n);
            lambda += step[n];
            if !p.iter().all(|x| x.is_finite()) {
                return None;
            }
        }
        // Accept a stalled iterate only if it satisfies the equations to
        // a slightly looser tolerance (rounding floor).
        let g = self.implicit_gradient(&p);
        let r1 = (&p - q + &g * lambda).norm();
        let f = self.implicit(&p).abs();
        if r1 <= 1e-11 * scale && f <= 1e-12 {
            Some(p)
        } else {
            None
        }
    }

    fn compute_diameter(&self) -> f64 {
        match self.shape {
            Shape::Ball { radius, .. } => 2.0 * radius,
            Shape::Ellipse { a, b } => 2.0 * a.max(b),
            Shape::SmoothRect { a, b, p } => {
                // Centrally symmetric and convex: diameter is twice the largest radius.
                let radius = |t: f64| smooth_rect_radius(a, b, p, t);
                2.0 * maximize_periodic(radius, 720)
            }
        }
    }

    fn compute_reach(&self) -> f64 {
        match self.shape {
            Shape::Ball { radius, .. } => radius,
            Shape::Ellipse { a, b } => {
                let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
                lo * lo / hi
            }
            Shape::SmoothRect { a, b, p } => {
                let curvature = |t: f64| {
                    let r = smooth_rect_radius(a, b, p, t);
                    let q = DVector::from_vec(vec![r * t.cos(), r * t.sin()]);
                    self.max_principal_curvature(&q)
                };
                1.0 / maximize_periodic(curvature, 2048)
            }
        }
    }

    /// Largest absolute principal curvature of the level set through `q`,
    /// from the shape operator `P Hess F P / |grad F|`.
    pub fn max_principal_curvature(&self, q: &Point) -> f64 {
        let shape_op = self.shape_operator(q);
        shape_op
            .symmetric_eigenvalues()
            .iter()
            .fold(0.0_f64, |m, x| m.max(x.abs()))
    }

    fn shape_operator(&self, foot: &Point) -> DMatrix<f64> {
        let n = foot.len();
        let g = self.implicit_gradient(foot);
        let gn = g.norm();
        let nu = &g / gn;
        let proj = DMatrix::identity(n, n) - &nu * nu.transpose();
        &proj * self.implicit_hessian(foot) * &proj / gn
    }

    /// Hessian of the signed distance at `q`, given its projection: on the
    /// tangent space `S (I + s S)^{-1}`, zero along the normal.
    fn signed_distance_hessian(&self, proj: &Projection) -> DMatrix<f64> {
        let n = proj.foot.len();
        let s = self.shape_operator(&proj.foot);
        let m = DMatrix::identity(n, n) + &s * proj.signed_distance;
        let inv = m.try_inverse().unwrap_or_else(|| DMatrix::identity(n, n));
        let h = s * inv;
        (&h + h.transpose()) * 0.5
    }
}

impl Shape {
    fn dim(&self) -> usize {
        match *self {
            Shape::Ball { dim, .. } => dim,
            Shape::Ellipse { .. } | Shape::SmoothRect { .. } => 2,
        }
    }
}

fn smooth_rect_radius(a: f64, b: f64, p: i32, t: f64) -> f64 {
    let s = (t.cos() / a).abs().powi(p) + (t.sin() / b).abs().powi(p);
    s.powf(-1.0 / p as f64)
}

/// Maximum of a smooth 2π-periodic function: grid search then golden section.
fn maximize_periodic<F: Fn(f64) -> f64>(f: F, grid: usize) -> f64 {
    let step = 2.0 * PI / grid as f64;
    let (mut best_t, mut best) = (0.0, f64::NEG_INFINITY);
    for i in 0..grid {
        let t = i as f64 * step;
        let v = f(t);
        if v > best {
            best = v;
            best_t = t;
        }
    }
    let (mut lo, mut hi) = (best_t - step, best_t + step);
    let inv_phi = (5.0_f64.sqrt() - 1.0) / 2.0;
    for _ in 0..100 {
        let m1 = hi - inv_phi * (hi - lo);
        let m2 = lo + inv_phi * (hi - lo);
        if f(m1) < f(m2) {
            lo = m1;
        } else {
            hi = m2;
        }
    }
    best.max(f(0.5 * (lo + hi)))
}

fn sample_boundary(shape: &Shape, dim: usize) -> Vec<Point> {
    match *shape {
        Shape::Ball { radius, dim } if dim != 2 => {
            if dim == 1 {
                return vec![
                    DVector::from_element(1, -radius),
                    DVector::from_element(1, radius),
                ];
            }
            let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_b0a1);
            (0..BOUNDARY_SAMPLES_ND)
                .map(|_| {
                    let v = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
                    let n = v.norm();
                    v * (radius / n)
                })
                .collect()
        }
        _ => {
            debug_assert_eq!(dim, 2);
            (0..BOUNDARY_SAMPLES_2D)
                .map(|i| {
                    let t = 2.0 * PI * i as f64 / BOUNDARY_SAMPLES_2D as f64;
                    let (c, s) = (t.cos(), t.sin());
                    let (x, y) = match *shape {
                        Shape::Ball { radius, .. } => (radius * c, radius * s),
                        Shape::Ellipse { a, b } => (a * c, b * s),
                        Shape::SmoothRect { a, b, p } => {
                            let r = smooth_rect_radius(a, b, p, t);
                            (r * c, r * s)
                        }
                    };
                    DVector::from_vec(vec![x, y])
                })
                .collect()
        }
    }
}

/// Closest point on the ellipse `(x/a)^2 + (y/b)^2 = 1` by bisection on the
/// Lagrange multiplier (Eberly's robust formulation), in any quadrant.
fn ellipse_foot(a: f64, b: f64, x: f64, y: f64) -> Point {
    let swap = b > a;
    let (e0, e1, y0, y1) = if swap {
        (b, a, y.abs(), x.abs())
    } else {
        (a, b, x.abs(), y.abs())
    };
    let (x0, x1) = ellipse_foot_first_quadrant(e0, e1, y0, y1);
    let (fx, fy) = if swap { (x1, x0) } else { (x0, x1) };
    DVector::from_vec(vec![fx.copysign(x), fy.copysign(y)])
}

fn ellipse_foot_first_quadrant(e0: f64, e1: f64, y0: f64, y1: f64) -> (f64, f64) {
    if y1 > 0.0 {
        if y0 > 0.0 {
            let z0 = y0 / e0;
            let z1 = y1 / e1;
            let g = z0 * z0 + z1 * z1 - 1.0;
            if g != 0.0 {
                let r0 = (e0 / e1) * (e0 / e1);
                let sbar = bisect_ellipse_root(r0, z0, z1, g);
                (r0 * y0 / (sbar + r0), y1 / (sbar + 1.0))
            } else {
                (y0, y1)
            }
        } else {
            (0.0, e1)
        }
    } else {
        let numer0 = e0 * y0;
        let denom0 = e0 * e0 - e1 * e1;
        if numer0 < denom0 {
            let xde0 = numer0 / denom0;
            (e0 * xde0, e1 * (1.0 - xde0 * xde0).max(0.0).sqrt())
        } else {
            (e0, 0.0)
        }
    }
}

fn bisect_ellipse_root(r0: f64, z0: f64, z1: f64, g: f64) -> f64 {
    let n0 = r0 * z0;
    let mut s0 = z1 - 1.0;
    let mut s1 = if g < 0.0 {
        0.0
    } else {
        (n0 * n0 + z1 * z1).sqrt() - 1.0
    };
    let mut s = 0.0;
    for _ in 0..2000 {
        s = 0.5 * (s0 + s1);
        if s == s0 || s == s1 {
            break;
        }
        let ratio0 = n0 / (s + r0);
        let ratio1 = z1 / (s + 1.0);
        let gs = ratio0 * ratio0 + ratio1 * ratio1 - 1.0;
        if gs > 0.0 {
            s0 = s;
        } else if gs < 0.0 {
            s1 = s;
        } else {
            break;
        }
    }
    s
}

/// Smooth cutoff `k` of the collar construction.
///
/// `k(x) = x` on `[0, d0]`; on `[d0, 2 d0]` it is the quintic
/// `d0 (1 + u - u^4 + 3u^5/5)` with `u = (x - d0)/d0`, whose slope
/// `1 - 4u^3 + 3u^4` decreases monotonically from 1 to 0 with vanishing
/// curvature at both ends; `k = 1.6 d0` beyond `2 d0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollarProfile {
    d0: f64,
}

impl CollarProfile {
    pub fn new(d0: f64) -> Result<Self, GeometryError> {
        if !(d0 > 0.0 && d0 < 0.5) {
            return Err(GeometryError::Invalid(format!(
                "collar width d0 = {d0} must lie in (0, 1/2)"
            )));
        }
        Ok(Self { d0 })
    }

    /// `d0 = min(0.1 * reach, 0.45)`.
    pub fn for_domain(domain: &Domain) -> Self {
        Self {
            d0: (0.1 * domain.reach()).min(0.45),
        }
    }

    /// Same as [`CollarProfile::new`] but also requires `d0 <= reach / 2`.
    pub fn checked(domain: &Domain, d0: f64) -> Result<Self, GeometryError> {
        let p = Self::new(d0)?;
        if d0 > 0.5 * domain.reach() {
            return Err(GeometryError::Invalid(format!(
                "collar width d0 = {d0} exceeds half the reach {}",
                domain.reach()
            )));
        }
        Ok(p)
    }

    pub fn d0(&self) -> f64 {
        self.d0
    }

    /// Value of `k` on the plateau `x >= 2 d0`.
    pub fn plateau(&self) -> f64 {
        1.6 * self.d0
    }

    /// `(k, k', k'')` at `x >= 0`.
    pub fn eval(&self, x: f64) -> (f64, f64, f64) {
        let d0 = self.d0;
        if x <= d0 {
            (x, 1.0, 0.0)
        } else if x >= 2.0 * d0 {
            (self.plateau(), 0.0, 0.0)
        } else {
            let u = (x - d0) / d0;
            let u2 = u * u;
            let u3 = u2 * u;
            let k = d0 * (1.0 + u - u2 * u2 + 0.6 * u3 * u2);
            let dk = 1.0 - 4.0 * u3 + 3.0 * u2 * u2;
            let ddk = (-12.0 * u2 + 12.0 * u3) / d0;
            (k, dk, ddk)
        }
    }
}

/// Value, gradient and Hessian of a scalar field at a point.
#[derive(Debug, Clone, PartialEq)]
pub struct Jet {
    pub value: f64,
    pub gradient: Point,
    pub hessian: DMatrix<f64>,
}

impl Jet {
    pub fn zero(n: usize) -> Self {
        Jet {
            value: 0.0,
            gradient: DVector::zeros(n),
            hessian: DMatrix::zeros(n, n),
        }
    }
}

/// Collar function together with the boundary distance it was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct CollarValue {
    pub h: Jet,
    /// Distance to the boundary (positive inside).
    pub distance: f64,
}

/// Domain plus collar profile: everything the penalty needs.
#[derive(Debug, Clone, Copy)]
pub struct Penalty<'a> {
    pub domain: &'a Domain,
    pub profile: CollarProfile,
}

impl<'a> Penalty<'a> {
    pub fn new(domain: &'a Domain, profile: CollarProfile) -> Self {
        Self { domain, profile }
    }

    /// `h = k(dist)` with gradient and Hessian.
    pub fn collar_h(&self, q: &Point) -> Result<CollarValue, GeometryError> {
        let n = q.len();
        let proj = self.domain.nearest_boundary_point(q)?;
        let distance = -proj.signed_distance;
        if distance < 0.0 {
            return Err(GeometryError::OutsideDomain {
                point: q.iter().copied().collect(),
                distance: proj.signed_distance,
            });
        }
        let (k, dk, ddk) = self.profile.eval(distance);
        if distance >= 2.0 * self.profile.d0() {
            let mut jet = Jet::zero(n);
            jet.value = k;
            return Ok(CollarValue { h: jet, distance });
        }
        let grad_d = -&proj.normal;
        let hess_d = -self.domain.signed_distance_hessian(&proj);
        let gradient = &grad_d * dk;
        let hessian = &grad_d * grad_d.transpose() * ddk + hess_d * dk;
        Ok(CollarValue {
            h: Jet {
                value: k,
                gradient,
                hessian,
            },
            distance,
        })
    }

    /// `U = 1/h^2`, `grad U = -2 h^-3 grad h`,
    /// `Hess U = 6 h^-4 grad h grad h^T - 2 h^-3 Hess h`.
    pub fn penalty_u(&self, q: &Point) -> Result<Jet, GeometryError> {
        let c = self.collar_h(q)?;
        penalty_from_collar(q, &c.h)
    }
}

pub(crate) fn penalty_from_collar(q: &Point, h: &Jet) -> Result<Jet, GeometryError> {
    let hv = h.value;
    if hv < 1e-12 {
        return Err(GeometryError::BoundaryContact {
            point: q.iter().copied().collect(),
            h: hv,
        });
    }
    let inv = 1.0 / hv;
    let inv2 = inv * inv;
    let inv3 = inv2 * inv;
    let gradient = &h.gradient * (-2.0 * inv3);
    let hessian = &h.gradient * h.gradient.transpose() * (6.0 * inv2 * inv2) - &h.hessian * (2.0 * inv3);
    Ok(Jet {
        value: inv2,
        gradient,
        hessian,
    })
}
