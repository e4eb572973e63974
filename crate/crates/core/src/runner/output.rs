use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use super::RunError;
use crate::geometry::{Domain, Point};
use crate::orbit::BounceOrbit;

const CANVAS: f64 = 600.0;
const MARGIN: f64 = 30.0;
const BOUNDARY_POINTS: usize = 720;

/// Boundary crossing along the ray from `center` in direction `(cos a, sin a)`
/// in the plane of the first two coordinates.
fn boundary_along_ray(domain: &Domain, center: &Point, angle: f64) -> Point {
    let mut dir = Point::zeros(center.len());
    dir[0] = angle.cos();
    dir[1] = angle.sin();
    let (mut lo, mut hi) = (0.0, domain.diameter());
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if domain.implicit(&(center + &dir * mid)) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    center + dir * lo
}

/// Closed boundary trace in the plane of the first two coordinates; the
/// built-in domains are star-shaped about the center of their bounding box.
pub fn boundary_curve(domain: &Domain, count: usize) -> Vec<Point> {
    let (lo, hi) = domain.bounding_box();
    let center = (lo + hi) * 0.5;
    (0..count)
        .map(|i| boundary_along_ray(domain, &center, std::f64::consts::TAU * i as f64 / count as f64))
        .collect()
}

struct Frame {
    x0: f64,
    y1: f64,
    scale: f64,
}

impl Frame {
    fn new(domain: &Domain) -> Self {
        let (lo, hi) = domain.bounding_box();
        let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(f64::MIN_POSITIVE);
        Self {
            x0: lo[0],
            y1: hi[1],
            scale: (CANVAS - 2.0 * MARGIN) / span,
        }
    }

    fn map(&self, q: &Point) -> (f64, f64) {
        (
            MARGIN + (q[0] - self.x0) * self.scale,
            MARGIN + (self.y1 - q[1]) * self.scale,
        )
    }
}

fn polyline(out: &mut String, frame: &Frame, points: &[&Point], class: &str, closed: bool) {
    let tag = if closed { "polygon" } else { "polyline" };
    let _ = write!(out, "  <{tag} class=\"{class}\" points=\"");
    for (i, q) in points.iter().enumerate() {
        let (x, y) = frame.map(q);
        if i > 0 {
            out.push(' ');
        }
        let _ = write!(out, "{x:.3},{y:.3}");
    }
    out.push_str("\"/>\n");
}

/// SVG drawing of the boundary, the orbit arcs and one marker per impact.
pub fn render_svg(orbit: &BounceOrbit, domain: &Domain) -> Result<String, RunError> {
    if domain.dim() < 2 {
        return Err(RunError::Config("plots need at least two dimensions".into()));
    }
    let frame = Frame::new(domain);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{CANVAS}\" height=\"{CANVAS}\" viewBox=\"0 0 {CANVAS} {CANVAS}\">"
    );
    out.push_str(
        "  <style>.boundary{fill:none;stroke:#222;stroke-width:2}.arc{fill:none;stroke:#1f6fb2;stroke-width:1.5}\
         .bounce{fill:#c0392b}</style>\n",
    );
    let boundary = boundary_curve(domain, BOUNDARY_POINTS);
    polyline(&mut out, &frame, &boundary.iter().collect::<Vec<_>>(), "boundary", true);
    for arc in &orbit.arcs {
        let pts: Vec<&Point> = arc.samples.iter().map(|s| &s.q).collect();
        polyline(&mut out, &frame, &pts, "arc", false);
    }
    for ev in &orbit.events {
        let (x, y) = frame.map(&ev.q);
        let _ = writeln!(out, "  <circle class=\"bounce\" cx=\"{x:.3}\" cy=\"{y:.3}\" r=\"5\"/>");
    }
    out.push_str("</svg>\n");
    Ok(out)
}

pub fn emit_plot(orbit: &BounceOrbit, domain: &Domain, path: &Path) -> Result<(), RunError> {
    write_file(path, &render_svg(orbit, domain)?)
}

/// One row per arc sample: `arc, t, q_0.., v_0..`.
pub fn orbit_csv(orbit: &BounceOrbit) -> String {
    let dim = orbit
        .arcs
        .first()
        .and_then(|a| a.samples.first())
        .map_or(0, |s| s.q.len());
    let mut out = String::from("arc,t");
    for k in 0..dim {
        let _ = write!(out, ",q{k}");
    }
    for k in 0..dim {
        let _ = write!(out, ",v{k}");
    }
    out.push('\n');
    for (a, arc) in orbit.arcs.iter().enumerate() {
        for s in &arc.samples {
            let _ = write!(out, "{a},{:e}", s.t);
            for x in s.q.iter().chain(s.v.iter()) {
                let _ = write!(out, ",{x:e}");
            }
            out.push('\n');
        }
    }
    out
}

pub fn json_lines<T: Serialize>(items: &[T]) -> Result<String, RunError> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).map_err(|e| RunError::Io(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

pub(crate) fn write_file(path: &Path, contents: &str) -> Result<(), RunError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| RunError::Io(format!("{}: {e}", parent.display())))?;
    }
    std::fs::write(path, contents).map_err(|e| RunError::Io(format!("{}: {e}", path.display())))
}
