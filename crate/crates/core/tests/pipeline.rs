mod common;

use bounce_core::continuation::CollapseKind;
use bounce_core::geometry::Domain;
use bounce_core::runner::{render_svg, run_scenario, write_outputs, Outcome, RunError, RunOptions, ScenarioConfig};

fn opts() -> RunOptions {
    RunOptions { threads: Some(2) }
}

fn orbit_of(cfg: &ScenarioConfig) -> (bounce_core::runner::RunResult, bounce_core::runner::OrbitSummary) {
    let result = run_scenario(cfg, &opts()).unwrap();
    let o = match &result.summary.outcome {
        Outcome::Orbit(o) => (**o).clone(),
        other => panic!("{}: expected an orbit, got {other:?}", cfg.name),
    };
    (result, o)
}

#[test]
fn disk_run_finds_the_two_impact_diameter() {
    let cfg = common::scenario("disk_billiard");
    let (result, o) = orbit_of(&cfg);
    let failed: Vec<_> = result.summary.failed_checks().map(|c| c.name.clone()).collect();
    assert!(result.summary.pass, "failed checks {failed:?}");
    assert_eq!(o.bounce_count, 2);
    assert!((o.period - 4.0).abs() <= 1e-6);
    let gap = (o.bounce_times[1] - o.bounce_times[0]).abs();
    assert!((gap - 0.5).abs() <= 1e-2, "bounce times {:?}", o.bounce_times);
    assert!((o.density_mass - 1.0).abs() <= 0.05, "density mass {}", o.density_mass);
    assert!((2..=3).contains(&o.morse_index));
    let last = result.trace.iter().filter(|r| r.converged).last().unwrap();
    assert!(last.eps_scaled <= 1e-5 * (1.0 + 1e-12));
}

#[test]
fn identical_inputs_give_identical_summaries() {
    let cfg = common::scenario("disk_billiard");
    let a = serde_json::to_string(&run_scenario(&cfg, &opts()).unwrap().summary).unwrap();
    let b = serde_json::to_string(&run_scenario(&cfg, &RunOptions { threads: Some(1) }).unwrap().summary).unwrap();
    assert_eq!(a, b);
}

#[test]
fn energy_below_the_potential_maximum_is_refused() {
    let mut cfg = common::scenario("gravity_disk");
    cfg.energy = 0.5;
    match run_scenario(&cfg, &opts()) {
        Err(e @ RunError::Regularity { .. }) => assert!(e.to_string().contains("regularity criterion violated")),
        Err(e) => panic!("wrong error {e}"),
        Ok(_) => panic!("run was not refused"),
    }
}

#[test]
fn plots_mark_one_circle_per_impact() {
    let cfg = common::scenario("disk_billiard");
    let (result, _) = orbit_of(&cfg);
    let domain = Domain::new(cfg.domain.clone()).unwrap();
    let svg = render_svg(result.summary.orbit.as_ref().unwrap(), &domain).unwrap();
    assert_eq!(svg.matches("class=\"bounce\"").count(), 2);

    let cfg = common::scenario("harmonic_interior");
    let (result, o) = orbit_of(&cfg);
    assert_eq!(o.bounce_count, 0);
    assert!(o.density_mass <= 1e-6);
    let domain = Domain::new(cfg.domain.clone()).unwrap();
    let svg = render_svg(result.summary.orbit.as_ref().unwrap(), &domain).unwrap();
    assert_eq!(svg.matches("class=\"bounce\"").count(), 0);
}

#[test]
fn outputs_are_written_and_replot_identically() {
    let cfg = common::scenario("disk_billiard");
    let result = run_scenario(&cfg, &opts()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let written = write_outputs(&result, &cfg, dir.path()).unwrap();
    assert_eq!(written.len(), 4);
    let svg = std::fs::read_to_string(dir.path().join("orbit.svg")).unwrap();
    let again = dir.path().join("again.svg");
    let markers = bounce_core::runner::plot_summary(&dir.path().join("summary.json"), &again).unwrap();
    assert_eq!(markers, 2);
    assert_eq!(std::fs::read_to_string(again).unwrap(), svg);
    let trace = std::fs::read_to_string(dir.path().join("trace.jsonl")).unwrap();
    assert_eq!(trace.lines().count(), result.trace.len());
}

#[test]
fn gravity_and_ellipse_orbits_match_their_closed_forms() {
    let (_, o) = orbit_of(&common::scenario("gravity_disk"));
    assert_eq!(o.bounce_count, 2);
    // vertical bounce between the poles at energy 3 under unit gravity
    let speed = |height: f64| (2.0 * (3.0 - height)).sqrt();
    let exact = 2.0 * (speed(-1.0) - speed(1.0));
    assert!((o.period - exact).abs() <= 1e-6, "period {} vs {exact}", o.period);

    let (_, o) = orbit_of(&common::scenario("ellipse_billiard"));
    assert_eq!(o.bounce_count, 2);
    assert!((o.period - 4.0).abs() <= 1e-6);
}

#[test]
fn collapses_are_classified() {
    let r = run_scenario(&common::scenario("interior_collapse"), &opts()).unwrap();
    match &r.summary.outcome {
        Outcome::Collapse(c) => {
            assert_eq!(c.kind, CollapseKind::InteriorCriticalPoint);
            assert!(c.point.as_ref().unwrap().norm() <= 1e-3);
        }
        other => panic!("{other:?}"),
    }
    let r = run_scenario(&common::scenario("boundary_collapse"), &opts()).unwrap();
    match &r.summary.outcome {
        Outcome::Collapse(c) => {
            assert_eq!(c.kind, CollapseKind::BoundaryEquilibrium);
            let p = c.point.as_ref().unwrap();
            assert!((p[0]).abs() <= 1e-3 && (p[1] + 1.0).abs() <= 1e-2, "{p:?}");
        }
        other => panic!("{other:?}"),
    }
}
