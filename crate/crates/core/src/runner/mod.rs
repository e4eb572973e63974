//! Scenario files, the end-to-end pipeline and its outputs.

mod config;
mod output;

pub use config::{
    ContinuationSection, Expectations, InitShape, InitSpec, OracleSection, OutputSection, ScenarioConfig, VerifySection,
    SCHEMA_VERSION,
};
pub use output::{boundary_curve, emit_plot, json_lines, orbit_csv, render_svg};

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bounds::{audit_orbit, AuditResult, BoundsError, BoundsReport};
use crate::continuation::{
    assemble_bounce_orbit, collapse_floors, detect_collapse, extract_bounce_times, run_continuation, CollapseKind,
    CollapseOptions, CollapseReport, ContinuationError, ContinuationOptions, ContinuationRun,
};
use crate::dynamics::{PhaseState, PotentialField, PotentialStats};
use crate::geometry::{CollarProfile, Domain, DomainSpec, GeometryError, Point};
use crate::orbit::{
    check_energy_invariant, check_reflection_law, grazing_tolerance, integrate_with_bounces, refine_periodic_shooting,
    BounceOrbit, EnergyReport, EventOptions, OracleError, ReflectionReport,
};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("config: {0}")]
    Config(String),
    #[error(
        "config: regularity criterion violated, energy {energy} must exceed the maximum {v_max} of the potential \
         over the closed domain"
    )]
    Regularity { energy: f64, v_max: f64 },
    #[error("domain: {0}")]
    Geometry(#[from] GeometryError),
    #[error("continuation: {0}")]
    Continuation(#[from] ContinuationError),
    #[error("bounce orbit oracle: {0}")]
    Oracle(#[from] OracleError),
    #[error("bounds: {0}")]
    Bounds(#[from] BoundsError),
    #[error("io: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Worker threads for independent initial loops; `None` uses all cores.
    pub threads: Option<usize>,
}

/// One continuation step, as written to the per-strength trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub init: usize,
    pub eps: f64,
    pub eps_scaled: f64,
    pub tau: f64,
    pub gradient_norm: f64,
    pub morse_index: usize,
    pub density_mass: f64,
    pub bounce_count: usize,
    pub h1_step: Option<f64>,
    pub converged: bool,
    pub collapsed: bool,
    pub message: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

fn check(name: &str, pass: bool, detail: String) -> Check {
    Check {
        name: name.into(),
        pass,
        detail,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitOutcome {
    pub index: usize,
    pub records: usize,
    pub completed: bool,
    pub stopped: Option<String>,
    pub final_tau: Option<f64>,
}

/// Distances between the continuation limit and the shooting-refined orbit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Agreement {
    pub bounce_distance: f64,
    pub period_difference: f64,
    pub hausdorff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpactSummary {
    pub t: f64,
    pub q: Point,
    pub normal: Point,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrbitSummary {
    pub bounce_count: usize,
    /// Normalized bounce times of the final penalized loop.
    pub bounce_times: Vec<f64>,
    pub non_isolated: bool,
    /// Period of the final penalized loop.
    pub period_continuation: f64,
    /// Period of the assembled limit orbit.
    pub period_assembled: f64,
    /// Period of the reported orbit (refined when impacts exist).
    pub period: f64,
    pub refined: bool,
    pub morse_index: usize,
    pub density_mass: f64,
    pub assembly_gaps: Vec<f64>,
    pub impacts: Vec<ImpactSummary>,
    pub reflection: ReflectionReport,
    pub energy: EnergyReport,
    pub closure_error: f64,
    pub agreement: Option<Agreement>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Outcome {
    Orbit(Box<OrbitSummary>),
    Collapse(CollapseReport),
    Failed { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub name: String,
    pub seed: u64,
    pub energy: f64,
    pub nodes: usize,
    pub domain: DomainSpec,
    pub stats: PotentialStats,
    pub bounds: Option<BoundsReport>,
    pub audit: Option<AuditResult>,
    pub inits: Vec<InitOutcome>,
    /// Index of the initial loop whose run is reported.
    pub selected: usize,
    pub morse_history: Vec<usize>,
    pub outcome: Outcome,
    pub checks: Vec<Check>,
    pub pass: bool,
    /// Reported orbit, sampled along every arc.
    pub orbit: Option<BounceOrbit>,
}

impl RunSummary {
    pub fn failed_checks(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.pass)
    }
}

pub struct RunResult {
    pub summary: RunSummary,
    pub trace: Vec<TraceRow>,
}

struct Setup {
    domain: Domain,
    pot: PotentialField,
    profile: CollarProfile,
}

fn setup(cfg: &ScenarioConfig) -> Result<Setup, RunError> {
    cfg.validate()?;
    let domain = Domain::new(cfg.domain.clone())?;
    let pot = PotentialField::new(cfg.potential.clone(), &domain).map_err(RunError::Config)?;
    let profile = CollarProfile::for_domain(&domain);
    Ok(Setup { domain, pot, profile })
}

/// Closed-form bounds for the scenario's energy and potential.
pub fn bounds_report(cfg: &ScenarioConfig) -> Result<BoundsReport, RunError> {
    let s = setup(cfg)?;
    Ok(BoundsReport::new(cfg.energy, s.pot.stats(), s.domain.diameter(), s.domain.dim())?)
}

fn hausdorff(a: &BounceOrbit, b: &BounceOrbit) -> f64 {
    let pa: Vec<&Point> = a.samples().map(|s| &s.q).collect();
    let pb: Vec<&Point> = b.samples().map(|s| &s.q).collect();
    let one_way = |x: &[&Point], y: &[&Point]| {
        x.iter()
            .map(|p| y.iter().map(|q| (*p - *q).norm()).fold(f64::INFINITY, f64::min))
            .fold(0.0_f64, f64::max)
    };
    one_way(&pa, &pb).max(one_way(&pb, &pa))
}

fn trace_rows(init: usize, run: &ContinuationRun, cfg: &ScenarioConfig) -> Vec<TraceRow> {
    run.records
        .iter()
        .map(|r| TraceRow {
            init,
            eps: r.eps,
            eps_scaled: r.eps_scaled,
            tau: r.critical_point.curve.tau,
            gradient_norm: r.critical_point.gradient_norm,
            morse_index: r.critical_point.morse_index,
            density_mass: r.density_mass,
            bounce_count: extract_bounce_times(r, &cfg.clusters).count(),
            h1_step: r.h1_step,
            converged: r.converged,
            collapsed: r.collapsed,
            message: r.message.clone(),
        })
        .collect()
}

/// Runs continuation, extraction, refinement, verification and the bounds audit.
pub fn run_scenario(cfg: &ScenarioConfig, opts: &RunOptions) -> Result<RunResult, RunError> {
    let Setup { domain, pot, profile } = setup(cfg)?;
    let stats = pot.stats().clone();
    if cfg.continuation.enforce_regularity && cfg.energy <= stats.v_max {
        return Err(RunError::Regularity {
            energy: cfg.energy,
            v_max: stats.v_max,
        });
    }
    let schedule = cfg.schedule.values()?;
    let (tau_floor, diam_floor) = collapse_floors(&domain, cfg.energy, stats.v_min);
    let mut solver = cfg.solver.clone();
    if solver.tau_floor <= 0.0 {
        solver.tau_floor = tau_floor;
    }
    let copts = ContinuationOptions {
        solver,
        enforce_regularity: cfg.continuation.enforce_regularity,
        diam_floor,
        max_collapsed: cfg.continuation.max_collapsed,
    };
    let inits = (0..cfg.init.len())
        .map(|k| cfg.initial_loop(k))
        .collect::<Result<Vec<_>, _>>()?;
    let solve = || {
        inits
            .par_iter()
            .map(|init| run_continuation(init, &schedule, cfg.energy, &pot, &domain, &profile, &copts))
            .collect::<Vec<_>>()
    };
    let runs = match opts.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| RunError::Config(format!("thread pool: {e}")))?
            .install(solve),
        None => solve(),
    };
    let runs = runs.into_iter().collect::<Result<Vec<_>, _>>()?;

    let trace: Vec<TraceRow> = runs.iter().enumerate().flat_map(|(k, r)| trace_rows(k, r, cfg)).collect();
    let init_outcomes: Vec<InitOutcome> = runs
        .iter()
        .enumerate()
        .map(|(index, r)| InitOutcome {
            index,
            records: r.records.len(),
            completed: r.completed(),
            stopped: r.stopped.clone(),
            final_tau: r.records.last().map(|x| x.critical_point.curve.tau),
        })
        .collect();
    let collapse_opts = CollapseOptions {
        tau_floor,
        diam_floor,
        ..CollapseOptions::default()
    };
    let collapse_of = |r: &ContinuationRun| detect_collapse(&r.records, &pot, &domain, &profile, &collapse_opts);
    let selected = runs
        .iter()
        .position(|r| r.completed())
        .or_else(|| runs.iter().position(|r| collapse_of(r).kind != CollapseKind::None))
        .unwrap_or(0);
    let run = &runs[selected];
    let morse_history: Vec<usize> = run.records.iter().map(|r| r.critical_point.morse_index).collect();

    let bounds = BoundsReport::new(cfg.energy, &stats, domain.diameter(), domain.dim()).ok();
    let mut checks = Vec::new();
    let mut orbit_out = None;
    let mut audit = None;

    let outcome = if run.completed() {
        checks.push(check("continuation", true, format!("{} strengths solved", run.records.len())));
        let last = run.records.last().expect("completed runs have records");
        let (summary, orbit) = finish_orbit(cfg, &domain, &pot, &profile, last, &mut checks)?;
        if let Some(b) = &bounds {
            let a = audit_orbit(&orbit, b);
            checks.push(check(
                "bounce_count_bound",
                a.bounce_ok,
                format!("{} impacts, bound {}", orbit.bounce_count, b.bounce_count_bound),
            ));
            checks.push(check(
                "period_bound",
                a.period_ok,
                format!("period {:.6}, bound {:.6}", orbit.period, b.period_bound),
            ));
            checks.push(check(
                "corollary",
                a.corollary_ok,
                format!("energy {} vs threshold {}", cfg.energy, b.corollary_threshold),
            ));
            audit = Some(a);
        }
        if let Some(n) = cfg.expect.bounces {
            checks.push(check(
                "expected_bounces",
                summary.bounce_count == n,
                format!("found {}, expected {n}", summary.bounce_count),
            ));
        }
        if let Some(p) = cfg.expect.period {
            let tol = cfg.expect.period_tol.unwrap_or(1e-6);
            checks.push(check(
                "expected_period",
                (summary.period - p).abs() <= tol,
                format!("period {:.9}, expected {p} within {tol:e}", summary.period),
            ));
        }
        if let Some(window) = &cfg.expect.morse_index {
            checks.push(check(
                "expected_morse_index",
                window.contains(&summary.morse_index),
                format!("index {}, expected one of {window:?}", summary.morse_index),
            ));
        }
        orbit_out = Some(orbit);
        Outcome::Orbit(Box::new(summary))
    } else {
        let report = collapse_of(run);
        if report.kind != CollapseKind::None {
            checks.push(check(
                "collapse_classified",
                true,
                format!("{:?} at {:?}", report.kind, report.point.as_ref().map(|p| p.as_slice().to_vec())),
            ));
            if let Some(kind) = cfg.expect.collapse {
                checks.push(check(
                    "expected_collapse",
                    report.kind == kind,
                    format!("found {:?}, expected {kind:?}", report.kind),
                ));
            }
            Outcome::Collapse(report)
        } else {
            let reason = run
                .stopped
                .clone()
                .unwrap_or_else(|| "final strength did not converge".into());
            checks.push(check("continuation", false, reason.clone()));
            Outcome::Failed { reason }
        }
    };
    if cfg.expect.collapse.is_some() && !matches!(outcome, Outcome::Collapse(_)) {
        checks.push(check("expected_collapse", false, "no collapse detected".into()));
    }
    let pass = checks.iter().all(|c| c.pass);
    Ok(RunResult {
        summary: RunSummary {
            schema_version: SCHEMA_VERSION,
            name: cfg.name.clone(),
            seed: cfg.seed,
            energy: cfg.energy,
            nodes: cfg.nodes,
            domain: cfg.domain.clone(),
            stats,
            bounds,
            audit,
            inits: init_outcomes,
            selected,
            morse_history,
            outcome,
            checks,
            pass,
            orbit: orbit_out,
        },
        trace,
    })
}

fn finish_orbit(
    cfg: &ScenarioConfig,
    domain: &Domain,
    pot: &PotentialField,
    profile: &CollarProfile,
    last: &crate::continuation::ContinuationRecord,
    checks: &mut Vec<Check>,
) -> Result<(OrbitSummary, BounceOrbit), RunError> {
    let curve = &last.critical_point.curve;
    let extraction = extract_bounce_times(last, &cfg.clusters);
    checks.push(check(
        "isolated_bounces",
        !extraction.non_isolated,
        format!("cluster widths {:?}", extraction.widths),
    ));
    let assembly = assemble_bounce_orbit(curve, &extraction.times, cfg.energy, pot, domain, profile, &cfg.assemble)?;
    checks.push(check(
        "assembly_consistent",
        assembly.consistent,
        format!("impact estimate gaps {:?}", assembly.bounce_gaps),
    ));
    let assembled = assembly.orbit;
    let k = assembled.bounce_count;
    let (orbit, agreement) = if k > 0 && cfg.verify.refine {
        let refined = refine_periodic_shooting(&assembled, pot, domain, &cfg.shooting)?;
        let agreement = Agreement {
            bounce_distance: assembled
                .events
                .iter()
                .zip(&refined.events)
                .map(|(a, b)| (&a.q - &b.q).norm())
                .fold(0.0, f64::max),
            period_difference: (assembled.period - refined.period).abs(),
            hausdorff: hausdorff(&assembled, &refined),
        };
        let tol = cfg.verify.agreement_tol;
        checks.push(check(
            "oracle_agreement",
            agreement.bounce_distance <= tol && agreement.period_difference <= tol && agreement.hausdorff <= tol,
            format!(
                "impacts {:.3e}, period {:.3e}, trace {:.3e}",
                agreement.bounce_distance, agreement.period_difference, agreement.hausdorff
            ),
        ));
        (refined, Some(agreement))
    } else {
        (assembled.clone(), None)
    };
    let grazing = grazing_tolerance(cfg.energy, pot.stats().v_min);
    let reflection = check_reflection_law(&orbit, cfg.verify.reflection_tol, grazing);
    checks.push(check(
        "reflection_law",
        reflection.pass,
        format!("max residual {:.3e} over {} impacts", reflection.max_residual, reflection.events.len()),
    ));
    let energy = check_energy_invariant(&orbit, pot, cfg.verify.energy_tol);
    checks.push(check(
        "energy_invariant",
        energy.pass,
        format!("max deviation {:.3e}", energy.max_deviation),
    ));
    let closure = orbit.closure_error();
    checks.push(check(
        "closed_orbit",
        closure <= cfg.verify.agreement_tol * domain.diameter(),
        format!("closure error {closure:.3e}"),
    ));
    let index = last.critical_point.morse_index;
    checks.push(check(
        "morse_index_bound",
        k <= index,
        format!("{k} impacts, Morse index {index}"),
    ));
    if k == 0 {
        checks.push(check(
            "smooth_density",
            last.density_mass < cfg.verify.smooth_mass_max,
            format!("density mass {:.3e}", last.density_mass),
        ));
    }
    let summary = OrbitSummary {
        bounce_count: k,
        bounce_times: extraction.times,
        non_isolated: extraction.non_isolated,
        period_continuation: curve.tau,
        period_assembled: assembled.period,
        period: orbit.period,
        refined: agreement.is_some(),
        morse_index: index,
        density_mass: last.density_mass,
        assembly_gaps: assembly.bounce_gaps,
        impacts: orbit
            .events
            .iter()
            .map(|e| ImpactSummary {
                t: e.t,
                q: e.q.clone(),
                normal: e.normal.clone(),
            })
            .collect(),
        reflection,
        energy,
        closure_error: closure,
        agreement,
    };
    Ok((summary, orbit))
}

/// Result of the event-driven flight of the `oracle` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSummary {
    pub name: String,
    pub energy: f64,
    pub domain: DomainSpec,
    pub bounce_count: usize,
    pub impacts: Vec<ImpactSummary>,
    pub reflection: ReflectionReport,
    pub energy_check: EnergyReport,
    pub periodic: Option<PeriodicSummary>,
    pub checks: Vec<Check>,
    pub pass: bool,
    pub orbit: BounceOrbit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodicSummary {
    pub period: f64,
    pub bounce_count: usize,
    pub impacts: Vec<ImpactSummary>,
    pub closure_error: f64,
}

/// Integrates the unpenalized flow with reflections from the `[oracle]` start,
/// optionally refining the first impacts into a periodic orbit.
pub fn run_oracle(cfg: &ScenarioConfig) -> Result<OracleSummary, RunError> {
    let Setup { domain, pot, .. } = setup(cfg)?;
    let o = cfg
        .oracle
        .as_ref()
        .ok_or_else(|| RunError::Config("the oracle command needs an [oracle] section".into()))?;
    let q = Point::from_column_slice(&o.start);
    let dir = Point::from_column_slice(&o.direction);
    let speed = crate::orbit::shell_speed(&pot, cfg.energy, &q)
        .ok_or_else(|| RunError::Config("the potential exceeds the energy at the oracle start".into()))?;
    if !(dir.norm() > 0.0) {
        return Err(RunError::Config("oracle direction must be nonzero".into()));
    }
    let start = PhaseState::new(q, dir.normalize() * speed, 0.0);
    let flight = integrate_with_bounces(&start, &pot, &domain, o.duration, o.tol, &EventOptions::default())?;
    let grazing = grazing_tolerance(cfg.energy, pot.stats().v_min);
    let reflection = check_reflection_law(&flight, cfg.verify.reflection_tol, grazing);
    let energy_check = check_energy_invariant(&flight, &pot, cfg.verify.energy_tol);
    let mut checks = vec![
        check(
            "reflection_law",
            reflection.pass,
            format!("max residual {:.3e}", reflection.max_residual),
        ),
        check(
            "energy_invariant",
            energy_check.pass,
            format!("max deviation {:.3e}", energy_check.max_deviation),
        ),
    ];
    let impacts = |orbit: &BounceOrbit| {
        orbit
            .events
            .iter()
            .map(|e| ImpactSummary {
                t: e.t,
                q: e.q.clone(),
                normal: e.normal.clone(),
            })
            .collect::<Vec<_>>()
    };
    let periodic = match o.periodic_bounces {
        Some(k) if k > 0 => {
            if flight.events.len() < k + 1 {
                return Err(RunError::Config(format!(
                    "flight has {} impacts, {} needed to close a {k}-impact orbit",
                    flight.events.len(),
                    k + 1
                )));
            }
            let mut candidate = flight.clone();
            candidate.period = flight.events[k].t - flight.events[0].t;
            candidate.events.truncate(k);
            candidate.bounce_count = k;
            let refined = refine_periodic_shooting(&candidate, &pot, &domain, &cfg.shooting)?;
            let closure = refined.closure_error();
            checks.push(check("closed_orbit", closure <= 1e-6, format!("closure error {closure:.3e}")));
            if let Some(b) = BoundsReport::new(cfg.energy, pot.stats(), domain.diameter(), domain.dim()).ok() {
                let a = audit_orbit(&refined, &b);
                checks.push(check(
                    "bounds_audit",
                    a.pass,
                    format!("period margin {:.3}, bounce margin {}", a.period_margin, a.bounce_margin),
                ));
            }
            Some(PeriodicSummary {
                period: refined.period,
                bounce_count: refined.bounce_count,
                impacts: impacts(&refined),
                closure_error: closure,
            })
        }
        _ => None,
    };
    let pass = checks.iter().all(|c| c.pass);
    Ok(OracleSummary {
        name: cfg.name.clone(),
        energy: cfg.energy,
        domain: cfg.domain.clone(),
        bounce_count: flight.bounce_count,
        impacts: impacts(&flight),
        reflection,
        energy_check,
        periodic,
        checks,
        pass,
        orbit: flight,
    })
}

/// Writes the enabled outputs of a scenario run into `dir`.
pub fn write_outputs(result: &RunResult, cfg: &ScenarioConfig, dir: &Path) -> Result<Vec<std::path::PathBuf>, RunError> {
    let mut written = Vec::new();
    let mut put = |name: &str, contents: String| -> Result<(), RunError> {
        let path = dir.join(name);
        output::write_file(&path, &contents)?;
        written.push(path);
        Ok(())
    };
    if cfg.output.summary {
        let json = serde_json::to_string_pretty(&result.summary).map_err(|e| RunError::Io(e.to_string()))?;
        put("summary.json", json + "\n")?;
    }
    if cfg.output.trace {
        put("trace.jsonl", json_lines(&result.trace)?)?;
    }
    if let Some(orbit) = &result.summary.orbit {
        if cfg.output.csv {
            put("orbit.csv", orbit_csv(orbit))?;
        }
        if cfg.output.plot && orbit_plottable(&result.summary.domain) {
            let domain = Domain::new(result.summary.domain.clone())?;
            put("orbit.svg", render_svg(orbit, &domain)?)?;
        }
    }
    Ok(written)
}

fn orbit_plottable(spec: &DomainSpec) -> bool {
    !matches!(spec, DomainSpec::Disk { dim, .. } if *dim < 2)
}

/// The part of a run summary needed to redraw its orbit.
#[derive(Debug, Clone, Deserialize)]
pub struct PlotSource {
    pub domain: DomainSpec,
    pub orbit: Option<BounceOrbit>,
}

/// Redraws the orbit stored in a summary written by a scenario or oracle run.
pub fn plot_summary(summary_path: &Path, svg_path: &Path) -> Result<usize, RunError> {
    let text = std::fs::read_to_string(summary_path)
        .map_err(|e| RunError::Io(format!("{}: {e}", summary_path.display())))?;
    let src: PlotSource = serde_json::from_str(&text).map_err(|e| RunError::Config(e.to_string()))?;
    let orbit = src
        .orbit
        .ok_or_else(|| RunError::Config("summary holds no orbit (collapsed or failed run)".into()))?;
    let domain = Domain::new(src.domain)?;
    emit_plot(&orbit, &domain, svg_path)?;
    Ok(orbit.events.len())
}
