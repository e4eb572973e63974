//! One PASS/FAIL line per acceptance criterion. Exits nonzero if any fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use bounce_core::action::ActionProblem;
use bounce_core::continuation::CollapseKind;
use bounce_core::dynamics::{PenalizedSystem, PhaseState, PotentialField, PotentialSpec};
use bounce_core::geometry::{CollarProfile, Domain, DomainSpec, Penalty, Point};
use bounce_core::orbit::{check_energy_invariant, integrate_with_bounces, reflect_velocity, EventOptions};
use bounce_core::runner::{run_scenario, OrbitSummary, Outcome, RunOptions, RunResult};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Verdict = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn run(name: &str) -> RunResult {
    run_scenario(&common::scenario(name), &RunOptions::default()).unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn orbit(r: &RunResult) -> Result<&OrbitSummary, String> {
    match &r.summary.outcome {
        Outcome::Orbit(o) => Ok(o),
        other => Err(format!("{}: no orbit, {other:?}", r.summary.name)),
    }
}

struct Runs {
    disk: RunResult,
    disk_seconds: f64,
    gravity: RunResult,
    ellipse: RunResult,
    harmonic: RunResult,
    interior: RunResult,
    boundary: RunResult,
}

fn disk_reproduction(r: &Runs) -> Verdict {
    let o = orbit(&r.disk)?;
    let cfg = common::scenario("disk_billiard");
    let last_eps = r.disk.trace.iter().filter(|t| t.converged).map(|t| t.eps_scaled).fold(f64::INFINITY, f64::min);
    let completed = r.disk.summary.inits[r.disk.summary.selected].completed;
    let tau_rel = (o.period_continuation - 4.0).abs() / 4.0;
    ensure(
        completed
            && cfg.nodes == 256
            && last_eps <= 1e-5 * (1.0 + 1e-12)
            && o.bounce_count == 2
            && (o.period - 4.0).abs() <= 1e-6
            && tau_rel <= 0.01
            && r.disk_seconds <= 60.0,
        format!(
            "M = {}, {} bounces, refined period {:.10}, continuation period {:.6} at eps {:.0e}, {:.1} s",
            cfg.nodes, o.bounce_count, o.period, o.period_continuation, last_eps, r.disk_seconds
        ),
    )
}

fn bounds_audit(r: &Runs) -> Verdict {
    let mut lines = Vec::new();
    let mut ok = true;
    for run in [&r.disk, &r.gravity, &r.ellipse, &r.harmonic] {
        let o = orbit(run)?;
        let b = run.summary.bounds.as_ref().ok_or("no bounds")?;
        let a = run.summary.audit.as_ref().ok_or("no audit")?;
        let pass = a.pass && o.bounce_count <= b.bounce_count_bound && o.period <= b.period_bound;
        ok &= pass;
        lines.push(format!(
            "{} {}<={} {:.3}<={:.1}",
            run.summary.name, o.bounce_count, b.bounce_count_bound, o.period, b.period_bound
        ));
    }
    let disk_bound = r.disk.summary.bounds.as_ref().unwrap().period_bound;
    ok &= (disk_bound - 784.0).abs() <= 0.5;
    ensure(ok, format!("disk bound {disk_bound:.3}; {}", lines.join(", ")))
}

fn gravity_threshold(r: &Runs) -> Verdict {
    let o = orbit(&r.gravity)?;
    let b = r.gravity.summary.bounds.as_ref().ok_or("no bounds")?;
    ensure(
        (b.corollary_threshold - 2.0).abs() <= 1e-12 && b.energy > b.corollary_threshold && o.bounce_count >= 1,
        format!("threshold {}, energy {}, {} bounces", b.corollary_threshold, b.energy, o.bounce_count),
    )
}

fn gradient_exactness() -> Verdict {
    let d = Domain::new(DomainSpec::Disk { radius: 1.0, dim: 2 }).unwrap();
    let pot = PotentialField::new(
        PotentialSpec::Gaussian {
            amplitude: 0.7,
            center: vec![0.2, -0.1],
            width: 0.6,
        },
        &d,
    )
    .unwrap();
    let pen = Penalty::new(&d, CollarProfile::for_domain(&d));
    let sys = PenalizedSystem::new(&pot, Some(pen), 1e-2);
    let problem = ActionProblem::new(sys, 1.3);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut g_worst, mut h_worst) = (0.0_f64, 0.0_f64);
    for _ in 0..20 {
        let lp = common::random_loop(&mut rng, 32, 1.0);
        g_worst = g_worst.max(common::gradient_fd_error(&problem, &lp, 1e-6));
        h_worst = h_worst.max(common::hessian_fd_error(&problem, &lp, 1e-6));
    }
    ensure(
        g_worst <= 1e-6 && h_worst <= 1e-5,
        format!("20 loops, gradient {g_worst:.2e}, Hessian {h_worst:.2e}"),
    )
}

fn reflection_energy() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0_f64;
    let mut done = 0;
    while done < 1000 {
        let n = Point::from_fn(3, |_, _| rng.gen_range(-1.0..1.0));
        if n.norm() < 1e-3 {
            continue;
        }
        let n = &n / n.norm();
        let mut v = Point::from_fn(3, |_, _| rng.gen_range(-10.0..10.0));
        if v.dot(&n) < 0.0 {
            v = -v;
        }
        let speed = v.norm();
        let Ok(out) = reflect_velocity(&v, &n, 1e-6) else { continue };
        let flip = (out.dot(&n) + v.dot(&n)).abs();
        let tangential = ((&out - &n * out.dot(&n)) - (&v - &n * v.dot(&n))).norm();
        worst = worst.max((out.norm() - speed).abs().max(flip).max(tangential) / speed.max(1.0));
        done += 1;
    }
    let domain = Domain::new(DomainSpec::Ellipse { a: 1.5, b: 1.0 }).unwrap();
    let pot = PotentialField::new(
        PotentialSpec::Linear {
            g: 0.7,
            direction: vec![0.3, 1.0],
        },
        &domain,
    )
    .unwrap();
    let q = Point::from_vec(vec![0.1, 0.2]);
    let speed = (2.0 * (2.0 - pot.value(&q))).sqrt();
    let v = Point::from_vec(vec![0.6, 0.8]) * speed;
    let o = integrate_with_bounces(&PhaseState::new(q, v, 0.0), &pot, &domain, 20.0, 1e-12, &EventOptions::default())
        .map_err(|e| e.to_string())?;
    let e = check_energy_invariant(&o, &pot, 1e-9);
    ensure(
        worst <= 4e-15 && e.pass,
        format!(
            "1000 pairs, worst relative residual {worst:.1e}; {} impacts, energy drift {:.1e}",
            o.bounce_count, e.max_deviation
        ),
    )
}

fn oracle_equivalence(r: &Runs) -> Verdict {
    let o = orbit(&r.disk)?;
    let a = o.agreement.as_ref().ok_or("no agreement data")?;
    ensure(
        a.bounce_distance <= 1e-3 && a.period_difference <= 1e-3 && a.hausdorff <= 1e-3,
        format!(
            "bounce points {:.1e}, period {:.1e}, Hausdorff {:.1e}",
            a.bounce_distance, a.period_difference, a.hausdorff
        ),
    )
}

fn morse_bound(r: &Runs) -> Verdict {
    let mut ok = true;
    let mut lines = Vec::new();
    for run in [&r.disk, &r.gravity, &r.ellipse, &r.harmonic] {
        let o = orbit(run)?;
        ok &= o.bounce_count <= o.morse_index;
        lines.push(format!("{} {}<={}", run.summary.name, o.bounce_count, o.morse_index));
    }
    let disk = orbit(&r.disk)?.morse_index;
    ok &= (2..=3).contains(&disk);
    ensure(ok, format!("disk index {disk}; {}", lines.join(", ")))
}

fn collapse_classification(r: &Runs) -> Verdict {
    let (Outcome::Collapse(i), Outcome::Collapse(b)) = (&r.interior.summary.outcome, &r.boundary.summary.outcome) else {
        return Err("a collapse scenario did not collapse".into());
    };
    let cfg = common::scenario("boundary_collapse");
    let domain = Domain::new(cfg.domain.clone()).unwrap();
    let pot = PotentialField::new(cfg.potential.clone(), &domain).unwrap();
    let point = b.point.as_ref().ok_or("no boundary point")?;
    let grad = pot.gradient(point).norm();
    let a = b.multiplier.ok_or("no multiplier")?;
    let rel = (a - grad).abs() / grad;
    ensure(
        i.kind == CollapseKind::InteriorCriticalPoint && b.kind == CollapseKind::BoundaryEquilibrium && rel <= 0.05,
        format!(
            "interior {:?}, boundary {:?} at {:?} with a = {a:.4} vs |grad V| = {grad:.4}",
            i.kind,
            b.kind,
            point.as_slice()
        ),
    )
}

fn smooth_control(r: &Runs) -> Verdict {
    let o = orbit(&r.harmonic)?;
    let eps = r.harmonic.trace.iter().filter(|t| t.converged).map(|t| t.eps_scaled).fold(f64::INFINITY, f64::min);
    let audit = r.harmonic.summary.audit.as_ref().is_some_and(|a| a.pass);
    ensure(
        o.bounce_count == 0 && o.density_mass < 1e-6 && eps <= 1e-5 * (1.0 + 1e-12) && audit && r.harmonic.summary.pass,
        format!("{} bounces, density mass {:.1e} at eps {eps:.0e}", o.bounce_count, o.density_mass),
    )
}

fn main() {
    let start = Instant::now();
    let disk = run("disk_billiard");
    let disk_seconds = start.elapsed().as_secs_f64();
    let runs = Runs {
        disk,
        disk_seconds,
        gravity: run("gravity_disk"),
        ellipse: run("ellipse_billiard"),
        harmonic: run("harmonic_interior"),
        interior: run("interior_collapse"),
        boundary: run("boundary_collapse"),
    };
    let criteria: Vec<(&str, Box<dyn Fn() -> Verdict + '_>)> = vec![
        ("disk billiard reproduction", Box::new(|| disk_reproduction(&runs))),
        ("period and bounce-count audit", Box::new(|| bounds_audit(&runs))),
        ("gravity threshold bounce", Box::new(|| gravity_threshold(&runs))),
        ("gradient and Hessian exactness", Box::new(gradient_exactness)),
        ("reflection and energy invariants", Box::new(reflection_energy)),
        ("continuation limit agrees with shooting", Box::new(|| oracle_equivalence(&runs))),
        ("Morse index bound", Box::new(|| morse_bound(&runs))),
        ("collapse classification", Box::new(|| collapse_classification(&runs))),
        ("smooth orbit negative control", Box::new(|| smooth_control(&runs))),
    ];
    let mut failures = 0;
    for (name, f) in &criteria {
        let verdict = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));
        match verdict {
            Ok(d) => println!("PASS {name}: {d}"),
            Err(d) => {
                failures += 1;
                println!("FAIL {name}: {d}");
            }
        }
    }
    println!("{} of {} criteria pass", criteria.len() - failures, criteria.len());
    if failures > 0 {
        std::process::exit(1);
    }
}
