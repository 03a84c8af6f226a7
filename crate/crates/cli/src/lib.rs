//! Pipeline orchestration behind the `ccto` binary.
//!
//! Each `run_*` function reads a scenario (and earlier outputs), writes its
//! artifacts into an output directory and returns a one-line summary. Failures
//! carry the process exit code.

pub mod svg;

use std::fs;
use std::path::{Path, PathBuf};

use ccto_core::contraction::{ContractionMethod, SamplingDomain};
use ccto_core::dynamics::{uniform_grid, Curve};
use ccto_core::optimizer::{PlanResult, SolveStatus};
use ccto_core::scenario::{Resolved, Scenario};
use ccto_core::tube::{tube_curve, TubeParams};
use ccto_core::verify::{check_cost_gap, mc_chance_constraint, mc_tube_containment, CostCurve, GapCheck, McReport};
use ccto_core::Error;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use svg::{draw_cover, draw_obstacles, equal_aspect, obstacle_extent, projections, range, Figure};

/// Recorded times per ensemble, and sample paths kept for plots.
const RECORD_POINTS: usize = 500;
const KEEP_PATHS: usize = 40;

#[derive(Error, Debug)]
pub enum CliError {
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Compute(String),
    #[error("{0}")]
    Infeasible(String),
    #[error("{0}")]
    BelowTarget(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Invalid(_) => 2,
            Self::Compute(_) => 3,
            Self::Infeasible(_) => 4,
            Self::BelowTarget(_) => 5,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::InvalidParameter(_) | Error::DimensionMismatch { .. } | Error::MissingDt | Error::Scenario(_) => {
                Self::Invalid(msg)
            }
            Error::InfeasibleErosion { .. } => Self::Infeasible(msg),
            _ => Self::Compute(msg),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Command-line overrides of the scenario's Monte Carlo settings.
#[derive(Debug, Clone, Copy, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub trials: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractionSummary {
    pub c: f64,
    pub method: ContractionMethod,
    pub samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub witness_condition: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<SamplingDomain>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanFile {
    pub scenario: String,
    pub scenario_hash: String,
    pub contraction: ContractionSummary,
    pub tube: TubeParams,
    pub notes: Vec<String>,
    pub result: PlanResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McFile {
    pub scenario: String,
    pub scenario_hash: String,
    pub tube: TubeParams,
    pub contraction: ContractionSummary,
    pub delta: f64,
    pub passed: bool,
    pub report: McReport,
    pub curve: CostCurve,
    /// Per-coordinate range of simulated states at recorded times.
    pub state_box: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TubeCheck {
    pub scenario: String,
    pub tube: TubeParams,
    pub contraction: ContractionSummary,
    pub target: f64,
    pub passed: bool,
    pub report: McReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: String,
    pub scenario_hash: String,
    pub tube: TubeParams,
    pub contraction: ContractionSummary,
    /// Rate used in the cost-gap bounds and how it was obtained.
    pub bound_rate: f64,
    pub bound_rate_source: String,
    /// Cost of the collocation plan.
    pub j_d: f64,
    /// Cost of the noise-free closed loop on the Monte Carlo grid.
    pub j_d_simulated: f64,
    pub mean_j_s: f64,
    pub j_s_se: f64,
    pub trials: usize,
    pub seed: u64,
    pub safety_fraction: Option<f64>,
    pub gap: GapCheck,
    pub notes: Vec<String>,
}

fn load(path: &Path, overrides: Overrides) -> CliResult<Resolved> {
    let mut scenario = Scenario::load(path)?;
    if let Some(s) = overrides.seed {
        scenario.mc.seed = s;
    }
    if let Some(t) = overrides.trials {
        scenario.mc.trials = t;
    }
    Ok(scenario.resolve()?)
}

fn summary(r: &Resolved) -> ContractionSummary {
    ContractionSummary {
        c: r.contraction.c,
        method: r.contraction.method,
        samples: r.contraction.samples,
        witness_condition: r.contraction.witness_condition(),
        domain: r.contraction.domain.clone(),
    }
}

fn write(dir: &Path, name: &str, contents: &str) -> CliResult<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| CliError::Compute(format!("cannot create {}: {e}", dir.display())))?;
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| CliError::Compute(format!("cannot write {}: {e}", path.display())))?;
    Ok(path)
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> CliResult<PathBuf> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Compute(e.to_string()))?;
    write(dir, name, &text)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Invalid(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))
}

fn tube_header(r: &Resolved) -> String {
    let t = &r.tube;
    let mut h = format!(
        "# scenario: {}\n# c = {} ({:?}), sigma = {}, n = {}, delta = {}, epsilon = {}, dt = {}, horizon = {}\n",
        r.scenario.name,
        t.c,
        r.contraction.method,
        t.sigma,
        t.n,
        t.delta,
        t.epsilon,
        t.dt.map_or("unset".into(), |d| d.to_string()),
        t.horizon
    );
    for n in &r.notes {
        h.push_str(&format!("# note: {n}\n"));
    }
    h
}

/// Writes `tube.csv` and `tube.svg`; with `check`, also a containment ensemble in `tube_mc.json`.
pub fn run_tube(scenario: &Path, out: &Path, overrides: Overrides, check: bool) -> CliResult<String> {
    let r = load(scenario, overrides)?;
    let grid = uniform_grid(r.tube.horizon, 500);
    let curve = tube_curve(&r.tube, &grid)?;
    let mut csv = tube_header(&r);
    csv.push_str("t,r\n");
    for (t, rad) in curve.grid.iter().zip(&curve.radii) {
        csv.push_str(&format!("{t},{rad}\n"));
    }
    write(out, "tube.csv", &csv)?;

    let mut fig = Figure::new(1, &format!("{}: tube radius", r.scenario.name));
    let p = fig.panel(
        0,
        range(grid.iter().copied()),
        range(curve.radii.iter().copied().chain([0.0])),
        "t",
        "r(t)",
    );
    fig.polyline(&p, grid.iter().copied().zip(curve.radii.iter().copied()), "#1f4e79", 2.0, 1.0);
    write(out, "tube.svg", &fig.finish())?;

    let mut line = format!("tube: c = {:.4}, r(T) = {:.6}", r.tube.c, curve.radii.last().unwrap());
    if check {
        let n = r.model.state_dim();
        let controls = Curve::zeros(r.model.control_dim());
        let report = mc_tube_containment(r.model.as_ref(), &r.start_state()[..n], &controls, &r.tube, &r.scenario.mc)?;
        let target = 1.0 - r.tube.delta;
        let frac = report.containment_fraction.unwrap_or(0.0);
        let passed = frac >= target;
        write_json(
            out,
            "tube_mc.json",
            &TubeCheck {
                scenario: r.scenario.name.clone(),
                tube: r.tube,
                contraction: summary(&r),
                target,
                passed,
                report,
            },
        )?;
        line.push_str(&format!(", containment {frac:.5} (target {target})"));
        if !passed {
            return Err(CliError::BelowTarget(line));
        }
    }
    Ok(line)
}

fn position_axes(r: &Resolved) -> Vec<usize> {
    let mut axes: Vec<usize> = r.scenario.obstacles.iter().flat_map(|o| o.dims().to_vec()).collect();
    axes.sort_unstable();
    axes.dedup();
    if axes.is_empty() {
        axes = (0..r.model.state_dim().min(3)).collect();
    }
    axes
}

const AXIS_NAMES: [&str; 6] = ["x0", "x1", "x2", "x3", "x4", "x5"];

fn axis_name(i: usize) -> String {
    AXIS_NAMES.get(i).map_or(format!("x{i}"), |s| s.to_string())
}

/// Draws state paths over obstacles, one panel per axis pair; scalar states are drawn against time.
fn trajectory_figure(
    r: &Resolved,
    title: &str,
    main: (&[f64], &[Vec<f64>]),
    samples: &[(Vec<f64>, Vec<Vec<f64>>)],
    cover: Option<(&[ccto_core::geometry::CoverSphere], f64)>,
) -> String {
    let pairs = projections(&position_axes(r));
    if pairs.is_empty() {
        let mut fig = Figure::new(1, title);
        let ys = main.1.iter().map(|x| x[0]).chain(samples.iter().flat_map(|s| s.1.iter().map(|x| x[0])));
        let p = fig.panel(0, range(main.0.iter().copied()), range(ys), "t", "x0");
        for (t, xs) in samples {
            fig.polyline(&p, t.iter().copied().zip(xs.iter().map(|x| x[0])), "#7f8c8d", 0.8, 0.35);
        }
        fig.polyline(&p, main.0.iter().copied().zip(main.1.iter().map(|x| x[0])), "#1f4e79", 2.0, 1.0);
        return fig.finish();
    }
    let mut fig = Figure::new(pairs.len(), title);
    for (k, &(a, b)) in pairs.iter().enumerate() {
        let mut xs: Vec<f64> = main.1.iter().map(|x| x[a]).collect();
        let mut ys: Vec<f64> = main.1.iter().map(|x| x[b]).collect();
        for (_, path) in samples {
            xs.extend(path.iter().map(|x| x[a]));
            ys.extend(path.iter().map(|x| x[b]));
        }
        xs.extend(obstacle_extent(&r.scenario.obstacles, a));
        ys.extend(obstacle_extent(&r.scenario.obstacles, b));
        let (xr, yr) = equal_aspect(range(xs), range(ys));
        let p = fig.panel(k, xr, yr, &axis_name(a), &axis_name(b));
        draw_obstacles(&mut fig, &p, &r.scenario.obstacles, a, b);
        if let Some((spheres, radius)) = cover {
            draw_cover(&mut fig, &p, spheres, radius, a, b);
        }
        for (_, path) in samples {
            fig.polyline(&p, path.iter().map(|x| (x[a], x[b])), "#7f8c8d", 0.8, 0.35);
        }
        fig.polyline(&p, main.1.iter().map(|x| (x[a], x[b])), "#1f4e79", 2.0, 1.0);
    }
    fig.finish()
}

/// Plans the deterministic trajectory; writes `plan.json` and `plan.svg`.
pub fn run_plan(scenario: &Path, out: &Path) -> CliResult<String> {
    let r = load(scenario, Overrides::default())?;
    let result = r.plan()?;
    let status = result.report.status;
    let file = PlanFile {
        scenario: r.scenario.name.clone(),
        scenario_hash: r.scenario.hash(),
        contraction: summary(&r),
        tube: r.tube,
        notes: r.notes.clone(),
        result,
    };
    write_json(out, "plan.json", &file)?;
    let res = &file.result;
    let svg = trajectory_figure(
        &r,
        &format!("{}: plan (J_d = {:.4})", r.scenario.name, res.cost),
        (&res.trajectory.grid, &res.trajectory.states),
        &[],
        Some((&res.inflated.spheres, res.radius.max_radius())),
    );
    write(out, "plan.svg", &svg)?;
    let line = format!(
        "plan: {:?}, J_d = {:.6}, violation = {:.2e}, {} outer / {} inner iterations",
        status, res.cost, res.report.constraint_violation, res.report.outer_iterations, res.report.inner_iterations
    );
    match status {
        SolveStatus::Optimal | SolveStatus::FeasibleSuboptimal => Ok(line),
        SolveStatus::Infeasible => Err(CliError::Infeasible(line)),
        SolveStatus::MaxIter => Err(CliError::Compute(line)),
    }
}

fn load_plan(r: &Resolved, plan: &Path) -> CliResult<PlanFile> {
    let file: PlanFile = read_json(plan)?;
    let hash = r.scenario.hash();
    if file.scenario_hash != hash {
        return Err(CliError::Invalid(format!(
            "plan {} was made for a different scenario (hash {} vs {})",
            plan.display(),
            file.scenario_hash,
            hash
        )));
    }
    Ok(file)
}

/// Simulates the planned controls; writes `mc.json`, `cost_curve.csv` and `ensemble.svg`.
pub fn run_verify(scenario: &Path, plan: &Path, out: &Path, overrides: Overrides) -> CliResult<String> {
    let r = load(scenario, overrides)?;
    let file = load_plan(&r, plan)?;
    let cost = r.cost()?;
    let outcome = mc_chance_constraint(
        &file.result.trajectory,
        r.model.as_ref(),
        &r.scenario.obstacles,
        &cost,
        &r.scenario.mc,
        RECORD_POINTS,
        KEEP_PATHS,
    )?;
    let target = 1.0 - r.tube.delta;
    let frac = outcome.report.safety_fraction.unwrap_or(0.0);
    let passed = frac >= target;

    let mut csv = tube_header(&r);
    csv.push_str(&format!(
        "# trials = {}, seed = {}, step = {}\n# deterministic cost = {}, mean cost = {}, se = {}\nt,cost_mean,cost_se,cost_det\n",
        outcome.report.trials,
        outcome.report.seed,
        outcome.report.step,
        outcome.report.deterministic_cost.unwrap_or(f64::NAN),
        outcome.report.mean_cost.unwrap_or(f64::NAN),
        outcome.report.cost_se.unwrap_or(f64::NAN)
    ));
    let c = &outcome.curve;
    for j in 0..c.times.len() {
        csv.push_str(&format!("{},{},{},{}\n", c.times[j], c.mean[j], c.se[j], c.det[j]));
    }
    write(out, "cost_curve.csv", &csv)?;

    let samples: Vec<(Vec<f64>, Vec<Vec<f64>>)> =
        outcome.paths.iter().map(|p| (outcome.twin.grid.clone(), p.clone())).collect();
    let svg = trajectory_figure(
        &r,
        &format!("{}: {} of {} sample paths, safety {:.5}", r.scenario.name, samples.len(), outcome.report.trials, frac),
        (&outcome.twin.grid, &outcome.twin.states),
        &samples,
        None,
    );
    write(out, "ensemble.svg", &svg)?;

    let line = format!(
        "verify: safety {frac:.5} (target {target}), {} violations, mean cost {:.6} +- {:.2e}",
        outcome.report.violation_count,
        outcome.report.mean_cost.unwrap_or(f64::NAN),
        outcome.report.cost_se.unwrap_or(f64::NAN)
    );
    write_json(
        out,
        "mc.json",
        &McFile {
            scenario: r.scenario.name.clone(),
            scenario_hash: file.scenario_hash,
            tube: r.tube,
            contraction: summary(&r),
            delta: r.tube.delta,
            passed,
            report: outcome.report,
            curve: outcome.curve,
            state_box: outcome.state_box,
        },
    )?;
    if passed {
        Ok(line)
    } else {
        Err(CliError::BelowTarget(line))
    }
}

/// Combines plan and ensemble into `report.json` with the cost-gap bounds.
pub fn run_report(scenario: &Path, plan: &Path, mc: &Path, out: &Path) -> CliResult<String> {
    for p in [scenario, plan, mc] {
        if !p.exists() {
            return Err(CliError::Invalid(format!("missing input {}", p.display())));
        }
    }
    let r = load(scenario, Overrides::default())?;
    let file = load_plan(&r, plan)?;
    let mcf: McFile = read_json(mc)?;
    if mcf.scenario_hash != file.scenario_hash {
        return Err(CliError::Invalid("ensemble and plan come from different scenarios".into()));
    }
    let cost = r.cost()?;
    let (c, source) = r.euclidean_rate()?;
    let gap = check_cost_gap(
        &cost,
        &file.result.trajectory.control_curve(),
        &mcf.report,
        &mcf.curve,
        &mcf.state_box,
        c,
        r.tube.sigma,
        r.tube.horizon,
        r.model.linear_state_matrix().is_some(),
    )?;
    let mut notes = r.notes.clone();
    notes.push("measured gap is the mean stochastic cost minus the noise-free closed-loop cost on the same grid".into());
    notes.push("Lipschitz constants are the largest cost-gradient norms over the box of simulated states".into());
    let report = RunReport {
        scenario: r.scenario.name.clone(),
        scenario_hash: file.scenario_hash,
        tube: r.tube,
        contraction: summary(&r),
        bound_rate: c,
        bound_rate_source: source.to_string(),
        j_d: file.result.cost,
        j_d_simulated: mcf.report.deterministic_cost.unwrap_or(f64::NAN),
        mean_j_s: mcf.report.mean_cost.unwrap_or(f64::NAN),
        j_s_se: mcf.report.cost_se.unwrap_or(f64::NAN),
        trials: mcf.report.trials,
        seed: mcf.report.seed,
        safety_fraction: mcf.report.safety_fraction,
        gap,
        notes,
    };
    write_json(out, "report.json", &report)?;
    Ok(format!(
        "report: gap {:.4e} +- {:.1e}, Lipschitz bound {:.4e}{}, envelope {}",
        report.gap.measured_gap,
        report.gap.gap_se,
        report.gap.bound_lipschitz,
        report
            .gap
            .smooth
            .as_ref()
            .map_or(String::new(), |s| format!(", smooth bound {:.4e}", s.bound)),
        if report.gap.envelope_ok { "ok" } else { "exceeded" }
    ))
}
