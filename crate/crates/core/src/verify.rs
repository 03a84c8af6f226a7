//! Monte Carlo checks of the tube and chance guarantees, and cost-gap bounds.
//!
//! Every trial `i` draws from its own stream `(seed, i)`. Trials are grouped
//! into fixed chunks whose partial sums are combined in chunk order, so reports
//! are bit-identical regardless of the thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{control_table, euler_maruyama, trial_rng, Curve, StepGrid, SystemModel, Trajectory};
use crate::error::{Error, Result};
use crate::geometry::{is_safe, Obstacle};
use crate::optimizer::{trapezoid_weights, CostSpec};
use crate::tube::{mean_square_gap_bound, tube_radius, TubeParams, C_ZERO_THRESHOLD};

const CHUNK: usize = 64;

/// Trials, simulation step and seed of an ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McSettings {
    pub trials: usize,
    pub step: f64,
    pub seed: u64,
}

impl McSettings {
    fn validate(&self, min_trials: usize) -> Result<()> {
        if self.trials < min_trials {
            return Err(Error::InvalidParameter(format!(
                "need at least {min_trials} trials, got {}",
                self.trials
            )));
        }
        if !(self.step > 0.0) {
            return Err(Error::InvalidParameter(format!("step must be positive, got {}", self.step)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub trials: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub containment_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub safety_fraction: Option<f64>,
    pub violation_count: usize,
    /// Trials whose state became non-finite; each also counts as a violation.
    pub divergence_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_cost: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost_se: Option<f64>,
    /// Cost of the noise-free twin on the same grid and quadrature.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deterministic_cost: Option<f64>,
    pub seed: u64,
    /// Simulation step actually used.
    pub step: f64,
    pub notes: Vec<String>,
}

/// Compensated (Neumaier) running sum.
#[derive(Debug, Clone, Copy, Default)]
struct Sum {
    s: f64,
    c: f64,
}

impl Sum {
    fn add(&mut self, x: f64) {
        let t = self.s + x;
        if self.s.abs() >= x.abs() {
            self.c += (self.s - t) + x;
        } else {
            self.c += (x - t) + self.s;
        }
        self.s = t;
    }

    fn value(&self) -> f64 {
        self.s + self.c
    }
}

/// Sample mean and standard error from sums of values and squares.
fn mean_se(sum: f64, sumsq: f64, count: usize) -> (f64, f64) {
    if count == 0 {
        return (f64::NAN, f64::NAN);
    }
    let k = count as f64;
    let mean = sum / k;
    if count < 2 {
        return (mean, f64::NAN);
    }
    let var = ((sumsq - k * mean * mean) / (k - 1.0)).max(0.0);
    (mean, (var / k).sqrt())
}

/// Simulation indices at which ensemble statistics are recorded (about `points` of them).
pub fn record_indices(steps: usize, points: usize) -> Vec<usize> {
    let stride = steps.div_ceil(points.max(1)).max(1);
    let mut idx: Vec<usize> = (0..=steps).step_by(stride).collect();
    if *idx.last().unwrap() != steps {
        idx.push(steps);
    }
    idx
}

/// Noise-free Euler path on the simulation grid, one row per step.
fn twin_path<M: SystemModel + ?Sized>(model: &M, x0: &[f64], table: &[f64], grid: &StepGrid) -> Result<Vec<Vec<f64>>> {
    let mut path = Vec::with_capacity(grid.steps + 1);
    euler_maruyama(model, x0, table, grid, None, |_, _, x| path.push(x.to_vec()))?;
    Ok(path)
}

fn check_inputs<M: SystemModel + ?Sized>(model: &M, x0: &[f64], controls: &Curve) -> Result<()> {
    if x0.len() != model.state_dim() {
        return Err(Error::DimensionMismatch {
            what: "initial state",
            expected: model.state_dim(),
            got: x0.len(),
        });
    }
    if controls.dim() != model.control_dim() {
        return Err(Error::DimensionMismatch {
            what: "control curve",
            expected: model.control_dim(),
            got: controls.dim(),
        });
    }
    Ok(())
}

fn chunks(trials: usize) -> Vec<std::ops::Range<usize>> {
    (0..trials.div_ceil(CHUNK))
        .map(|c| c * CHUNK..((c + 1) * CHUNK).min(trials))
        .collect()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Fraction of trials whose whole path stays within the tube around the noise-free twin.
///
/// The comparison is made at every simulation step.
pub fn mc_tube_containment<M: SystemModel + ?Sized>(
    model: &M,
    x0: &[f64],
    controls: &Curve,
    params: &TubeParams,
    mc: &McSettings,
) -> Result<McReport> {
    mc.validate(1)?;
    check_inputs(model, x0, controls)?;
    params.validate()?;
    let grid = StepGrid::new(params.horizon, mc.step)?;
    let table = control_table(controls, &grid);
    let twin = twin_path(model, x0, &table, &grid)?;
    let radii = (0..=grid.steps)
        .map(|k| tube_radius(params, grid.time(k).min(params.horizon)))
        .collect::<Result<Vec<_>>>()?;

    let counts: Vec<(usize, usize)> = chunks(mc.trials)
        .into_par_iter()
        .map(|range| {
            let mut violations = 0;
            let mut divergences = 0;
            for i in range {
                let mut rng = trial_rng(mc.seed, i as u64);
                let mut outside = false;
                let run = euler_maruyama(model, x0, &table, &grid, Some(&mut rng), |k, _, x| {
                    outside |= dist(x, &twin[k]) > radii[k];
                });
                if run.is_err() {
                    divergences += 1;
                    violations += 1;
                } else if outside {
                    violations += 1;
                }
            }
            (violations, divergences)
        })
        .collect();
    let violation_count = counts.iter().map(|c| c.0).sum();
    let divergence_count = counts.iter().map(|c| c.1).sum();
    let mut notes = vec![format!(
        "tube c = {}, sigma = {}, n = {}, delta = {}, epsilon = {}, dt = {}",
        params.c,
        params.sigma,
        params.n,
        params.delta,
        params.epsilon,
        params.dt.map_or("unset".to_string(), |d| d.to_string())
    )];
    notes.push("deterministic comparator: noise-free Euler path on the same step grid".into());
    Ok(McReport {
        trials: mc.trials,
        containment_fraction: Some(1.0 - violation_count as f64 / mc.trials as f64),
        safety_fraction: None,
        violation_count,
        divergence_count,
        mean_cost: None,
        cost_se: None,
        deterministic_cost: None,
        seed: mc.seed,
        step: grid.h,
        notes,
    })
}

/// Pointwise estimate of `E |X_t - x_t|^2` with standard errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapCurve {
    pub times: Vec<f64>,
    pub mean: Vec<f64>,
    pub se: Vec<f64>,
    pub divergence_count: usize,
}

impl GapCurve {
    /// Largest `mean - bound - 3 se` over recorded times; `<= 0` means the bound dominates.
    pub fn worst_excess(&self, c: f64, sigma: f64, n: usize) -> f64 {
        self.times
            .iter()
            .zip(self.mean.iter().zip(&self.se))
            .map(|(&t, (m, s))| m - mean_square_gap_bound(c, sigma, n, t) - 3.0 * s)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

pub fn mc_mean_square_gap<M: SystemModel + ?Sized>(
    model: &M,
    x0: &[f64],
    controls: &Curve,
    horizon: f64,
    mc: &McSettings,
    record_points: usize,
) -> Result<GapCurve> {
    mc.validate(2)?;
    check_inputs(model, x0, controls)?;
    let grid = StepGrid::new(horizon, mc.step)?;
    let table = control_table(controls, &grid);
    let twin = twin_path(model, x0, &table, &grid)?;
    let rec = record_indices(grid.steps, record_points);
    let mut slot = vec![usize::MAX; grid.steps + 1];
    for (j, &k) in rec.iter().enumerate() {
        slot[k] = j;
    }
    let m = rec.len();

    let parts: Vec<(Vec<Sum>, Vec<Sum>, usize, usize)> = chunks(mc.trials)
        .into_par_iter()
        .map(|range| {
            let mut sum = vec![Sum::default(); m];
            let mut sumsq = vec![Sum::default(); m];
            let mut row = vec![0.0; m];
            let (mut ok, mut diverged) = (0, 0);
            for i in range {
                let mut rng = trial_rng(mc.seed, i as u64);
                let run = euler_maruyama(model, x0, &table, &grid, Some(&mut rng), |k, _, x| {
                    if slot[k] != usize::MAX {
                        row[slot[k]] = dist(x, &twin[k]).powi(2);
                    }
                });
                if run.is_err() {
                    diverged += 1;
                    continue;
                }
                ok += 1;
                for j in 0..m {
                    sum[j].add(row[j]);
                    sumsq[j].add(row[j] * row[j]);
                }
            }
            (sum, sumsq, ok, diverged)
        })
        .collect();
    let mut sum = vec![Sum::default(); m];
    let mut sumsq = vec![Sum::default(); m];
    let (mut ok, mut diverged) = (0, 0);
    for (s, q, o, d) in parts {
        for j in 0..m {
            sum[j].add(s[j].value());
            sumsq[j].add(q[j].value());
        }
        ok += o;
        diverged += d;
    }
    let (mean, se) = (0..m)
        .map(|j| mean_se(sum[j].value(), sumsq[j].value(), ok))
        .unzip();
    Ok(GapCurve {
        times: rec.iter().map(|&k| grid.time(k)).collect(),
        mean,
        se,
        divergence_count: diverged,
    })
}

/// Per-time running cost of the ensemble and of the noise-free twin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostCurve {
    pub times: Vec<f64>,
    pub mean: Vec<f64>,
    pub se: Vec<f64>,
    pub det: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChanceOutcome {
    pub report: McReport,
    pub curve: CostCurve,
    /// Per-coordinate `[min, max]` of simulated states at recorded times, twin included.
    pub state_box: Vec<[f64; 2]>,
    /// Noise-free twin at recorded times.
    pub twin: Trajectory,
    /// The first few sample paths at recorded times.
    pub paths: Vec<Vec<Vec<f64>>>,
}

struct ChanceChunk {
    violations: usize,
    divergences: usize,
    cost: Sum,
    cost_sq: Sum,
    finished: usize,
    curve: Vec<Sum>,
    curve_sq: Vec<Sum>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    paths: Vec<Vec<Vec<f64>>>,
}

/// Applies the planned controls to the stochastic closed loop and checks the ORIGINAL obstacles at every step.
#[allow(clippy::too_many_arguments)]
pub fn mc_chance_constraint<M: SystemModel + ?Sized>(
    plan: &Trajectory,
    model: &M,
    obstacles: &[Obstacle],
    cost: &CostSpec,
    mc: &McSettings,
    record_points: usize,
    keep_paths: usize,
) -> Result<ChanceOutcome> {
    mc.validate(1)?;
    let controls = plan.control_curve();
    let x0 = plan.states[0].clone();
    check_inputs(model, &x0, &controls)?;
    let n = model.state_dim();
    let grid = StepGrid::new(plan.horizon(), mc.step)?;
    let table = control_table(&controls, &grid);
    let twin_rows = twin_path(model, &x0, &table, &grid)?;
    let rec = record_indices(grid.steps, record_points);
    let times: Vec<f64> = rec.iter().map(|&k| grid.time(k)).collect();
    let rec_controls: Vec<Vec<f64>> = times.iter().map(|&t| controls.eval(t)).collect();
    let weights = trapezoid_weights(&times);
    let mut slot = vec![usize::MAX; grid.steps + 1];
    for (j, &k) in rec.iter().enumerate() {
        slot[k] = j;
    }
    let m = rec.len();
    let twin = Trajectory {
        grid: times.clone(),
        states: rec.iter().map(|&k| twin_rows[k].clone()).collect(),
        controls: rec_controls.clone(),
    };
    let det: Vec<f64> = (0..m)
        .map(|j| cost.running(times[j], &twin.states[j], &rec_controls[j]))
        .collect();
    let det_cost = det.iter().zip(&weights).map(|(l, w)| l * w).sum::<f64>() + cost.terminal(twin.final_state());

    let parts: Vec<ChanceChunk> = chunks(mc.trials)
        .into_par_iter()
        .map(|range| {
            let mut out = ChanceChunk {
                violations: 0,
                divergences: 0,
                cost: Sum::default(),
                cost_sq: Sum::default(),
                finished: 0,
                curve: vec![Sum::default(); m],
                curve_sq: vec![Sum::default(); m],
                lo: vec![f64::INFINITY; n],
                hi: vec![f64::NEG_INFINITY; n],
                paths: Vec::new(),
            };
            let mut row = vec![0.0; m];
            let mut states = vec![vec![0.0; n]; m];
            for i in range {
                let mut rng = trial_rng(mc.seed, i as u64);
                let mut unsafe_hit = false;
                let run = euler_maruyama(model, &x0, &table, &grid, Some(&mut rng), |k, _, x| {
                    unsafe_hit |= !is_safe(x, obstacles);
                    let j = slot[k];
                    if j != usize::MAX {
                        states[j].copy_from_slice(x);
                    }
                });
                if run.is_err() {
                    out.violations += 1;
                    out.divergences += 1;
                    continue;
                }
                if unsafe_hit {
                    out.violations += 1;
                }
                let mut total = 0.0;
                for j in 0..m {
                    row[j] = cost.running(times[j], &states[j], &rec_controls[j]);
                    total += weights[j] * row[j];
                    out.curve[j].add(row[j]);
                    out.curve_sq[j].add(row[j] * row[j]);
                    for (d, v) in states[j].iter().enumerate() {
                        out.lo[d] = out.lo[d].min(*v);
                        out.hi[d] = out.hi[d].max(*v);
                    }
                }
                total += cost.terminal(&states[m - 1]);
                out.cost.add(total);
                out.cost_sq.add(total * total);
                out.finished += 1;
                if i < keep_paths {
                    out.paths.push(states.clone());
                }
            }
            out
        })
        .collect();

    let mut violation_count = 0;
    let mut divergence_count = 0;
    let mut finished = 0;
    let (mut cost_sum, mut cost_sq) = (Sum::default(), Sum::default());
    let mut curve = vec![Sum::default(); m];
    let mut curve_sq = vec![Sum::default(); m];
    let mut lo: Vec<f64> = vec![f64::INFINITY; n];
    let mut hi: Vec<f64> = vec![f64::NEG_INFINITY; n];
    for x in &twin.states {
        for d in 0..n {
            lo[d] = lo[d].min(x[d]);
            hi[d] = hi[d].max(x[d]);
        }
    }
    let mut paths = Vec::new();
    for part in parts {
        violation_count += part.violations;
        divergence_count += part.divergences;
        finished += part.finished;
        cost_sum.add(part.cost.value());
        cost_sq.add(part.cost_sq.value());
        for j in 0..m {
            curve[j].add(part.curve[j].value());
            curve_sq[j].add(part.curve_sq[j].value());
        }
        for d in 0..n {
            lo[d] = lo[d].min(part.lo[d]);
            hi[d] = hi[d].max(part.hi[d]);
        }
        paths.extend(part.paths);
    }
    let (mean_cost, cost_se) = mean_se(cost_sum.value(), cost_sq.value(), finished);
    let (mean, se): (Vec<f64>, Vec<f64>) = (0..m)
        .map(|j| mean_se(curve[j].value(), curve_sq[j].value(), finished))
        .unzip();
    let mut notes = vec![
        "safety checked against the original obstacles at every simulation step".to_string(),
        format!("costs use trapezoidal quadrature on {m} recorded times"),
    ];
    if divergence_count > 0 {
        notes.push(format!("{divergence_count} diverged trials counted as violations and excluded from cost statistics"));
    }
    Ok(ChanceOutcome {
        report: McReport {
            trials: mc.trials,
            containment_fraction: None,
            safety_fraction: Some(1.0 - violation_count as f64 / mc.trials as f64),
            violation_count,
            divergence_count,
            mean_cost: Some(mean_cost),
            cost_se: Some(cost_se),
            deterministic_cost: Some(det_cost),
            seed: mc.seed,
            step: grid.h,
            notes,
        },
        curve: CostCurve {
            times,
            mean,
            se,
            det,
        },
        state_box: lo.into_iter().zip(hi).map(|(a, b)| [a, b]).collect(),
        twin,
        paths,
    })
}

/// `(e^{2ct} - 1) / (2c)`, equal to `t` at `c = 0`.
fn growth(c: f64, t: f64) -> f64 {
    if c.abs() < C_ZERO_THRESHOLD {
        t
    } else {
        (2.0 * c * t).exp_m1() / (2.0 * c)
    }
}

fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

#[allow(clippy::too_many_arguments)]
fn adaptive(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = simpson(a, m, fa, flm, fm);
    let right = simpson(m, b, fm, frm, fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    adaptive(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1) + adaptive(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
}

/// Adaptive Simpson quadrature of `f` on `[a, b]` to absolute tolerance `tol`.
pub fn integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    let (fa, fm, fb) = (f(a), f(0.5 * (a + b)), f(b));
    let whole = simpson(a, b, fa, fm, fb);
    adaptive(f, a, b, fa, fm, fb, whole, tol, 50)
}

/// Cost-gap bound for an `L`-Lipschitz running cost and `L_T`-Lipschitz terminal cost.
///
/// `int_0^T sqrt(L^2 n sigma^2 (e^{2ct} - 1)/(2c)) dt + sqrt(L_T^2 n sigma^2 (e^{2cT} - 1)/(2c))`,
/// integrated in `s = sqrt(t)` so the integrand is smooth at the origin.
pub fn cost_gap_bound_lipschitz(l: f64, l_t: f64, n: usize, sigma: f64, c: f64, horizon: f64) -> f64 {
    let k = n as f64 * sigma * sigma;
    if k == 0.0 || horizon <= 0.0 {
        return 0.0;
    }
    let integrand = |s: f64| 2.0 * s * (l * l * k * growth(c, s * s)).sqrt();
    let upper = horizon.sqrt();
    let scale = (l * l * k * growth(c, horizon)).sqrt() * horizon;
    let running = if l == 0.0 {
        0.0
    } else {
        integrate(&integrand, 0.0, upper, 1e-13 * scale.max(f64::MIN_POSITIVE))
    };
    running + (l_t * l_t * k * growth(c, horizon)).sqrt()
}

/// Cost-gap bound for `L`-smooth running and `L_T`-smooth terminal costs of a linear system.
///
/// `L n sigma^2 ((e^{2cT} - 1)/(2c) - T)/(4c) + L_T n sigma^2 (e^{2cT} - 1)/(4c)`,
/// with the removable singularity at `c = 0` handled by series.
pub fn cost_gap_bound_smooth(l: f64, l_t: f64, n: usize, sigma: f64, c: f64, horizon: f64) -> f64 {
    let k = n as f64 * sigma * sigma;
    let x = 2.0 * c * horizon;
    // (e^x - 1 - x) / x^2 and (e^x - 1) / x
    let (q, r) = if x.abs() < 1e-3 {
        (
            0.5 + x / 6.0 + x * x / 24.0 + x.powi(3) / 120.0,
            1.0 + x / 2.0 + x * x / 6.0 + x.powi(3) / 24.0,
        )
    } else {
        ((x.exp_m1() - x) / (x * x), x.exp_m1() / x)
    };
    l * k * horizon * horizon * q / 2.0 + l_t * k * horizon * r / 2.0
}

/// Lipschitz constants `(L, L_T)` of the running and terminal costs over a state box.
///
/// The cost gradients are affine in the state, so their largest norm over the
/// box is attained at a vertex; `L` is also maximised over the given times.
pub fn lipschitz_constants(cost: &CostSpec, state_box: &[[f64; 2]], times: &[f64], controls: &[Vec<f64>]) -> (f64, f64) {
    let n = state_box.len();
    let vertices = 1usize << n;
    let mut x = vec![0.0; n];
    let mut g = vec![0.0; n];
    let mut l = 0.0f64;
    let mut l_t = 0.0f64;
    for v in 0..vertices {
        for d in 0..n {
            x[d] = state_box[d][(v >> d) & 1];
        }
        for (t, u) in times.iter().zip(controls) {
            cost.running_state_grad(*t, &x, u, &mut g);
            l = l.max(g.iter().map(|a| a * a).sum::<f64>().sqrt());
        }
        cost.terminal_grad(&x, &mut g);
        l_t = l_t.max(g.iter().map(|a| a * a).sum::<f64>().sqrt());
    }
    (l, l_t)
}

/// Per-time envelope for the running-cost gap, `L sqrt(n sigma^2 (e^{2ct} - 1)/(2c))`.
pub fn running_gap_envelope(l: f64, n: usize, sigma: f64, c: f64, t: f64) -> f64 {
    l * mean_square_gap_bound(c, sigma, n, t).max(0.0).sqrt()
}

/// Measured cost gap against the Lipschitz and smooth bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapCheck {
    /// Rate used in the bounds.
    pub c: f64,
    pub sigma: f64,
    pub n: usize,
    pub horizon: f64,
    pub lipschitz: f64,
    pub lipschitz_terminal: f64,
    pub bound_lipschitz: f64,
    /// Smoothness constants and bound, for linear dynamics only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub smooth: Option<SmoothBound>,
    /// Mean stochastic cost minus the noise-free cost.
    pub measured_gap: f64,
    pub gap_se: f64,
    /// `measured_gap <= bound_lipschitz + 3 se`.
    pub dominated: bool,
    /// Largest `mean - det - envelope - 3 se` over recorded times.
    pub worst_envelope_excess: f64,
    pub envelope_ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothBound {
    pub l: f64,
    pub l_terminal: f64,
    pub bound: f64,
    /// `measured_gap <= bound + 3 se`.
    pub dominated: bool,
}

/// Compares an ensemble's cost statistics with the cost-gap bounds.
///
/// `controls` is the planned control curve, used by running costs that
/// depend on the reference. `linear` enables the smooth-cost bound.
#[allow(clippy::too_many_arguments)]
pub fn check_cost_gap(
    cost: &CostSpec,
    controls: &Curve,
    report: &McReport,
    curve: &CostCurve,
    state_box: &[[f64; 2]],
    c: f64,
    sigma: f64,
    horizon: f64,
    linear: bool,
) -> Result<GapCheck> {
    let n = cost.state_dim();
    if state_box.len() != n {
        return Err(Error::DimensionMismatch {
            what: "state box",
            expected: n,
            got: state_box.len(),
        });
    }
    let (Some(mean), Some(se), Some(det)) = (report.mean_cost, report.cost_se, report.deterministic_cost) else {
        return Err(Error::InvalidParameter("report carries no cost statistics".into()));
    };
    let us: Vec<Vec<f64>> = curve.times.iter().map(|&t| controls.eval(t)).collect();
    let (l, l_t) = lipschitz_constants(cost, state_box, &curve.times, &us);
    let bound = cost_gap_bound_lipschitz(l, l_t, n, sigma, c, horizon);
    let se = if se.is_finite() { se } else { 0.0 };
    let measured_gap = mean - det;
    let smooth = linear.then(|| {
        let (ls, lts) = cost.smooth_constants();
        let bound = cost_gap_bound_smooth(ls, lts, n, sigma, c, horizon);
        SmoothBound {
            l: ls,
            l_terminal: lts,
            bound,
            dominated: measured_gap <= bound + 3.0 * se,
        }
    });
    let worst = curve
        .times
        .iter()
        .enumerate()
        .map(|(j, &t)| {
            let s = if curve.se[j].is_finite() { curve.se[j] } else { 0.0 };
            curve.mean[j] - curve.det[j] - running_gap_envelope(l, n, sigma, c, t) - 3.0 * s
        })
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(GapCheck {
        c,
        sigma,
        n,
        horizon,
        lipschitz: l,
        lipschitz_terminal: l_t,
        bound_lipschitz: bound,
        smooth,
        measured_gap,
        gap_se: se,
        dominated: measured_gap <= bound + 3.0 * se,
        worst_envelope_excess: worst,
        envelope_ok: worst <= 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{double_integrator_gain, make_double_integrator, make_scalar_linear};
    use crate::optimizer::CostWeights;
    use crate::dynamics::ControlLayout;

    fn scalar_params(c: f64, horizon: f64) -> TubeParams {
        TubeParams {
            c,
            sigma: 0.1f64.sqrt(),
            n: 1,
            delta: 1e-3,
            epsilon: 15.0 / 16.0,
            dt: (c < 0.0).then_some(0.01),
            horizon,
        }
    }

    #[test]
    fn record_indices_cover_ends() {
        assert_eq!(record_indices(10, 4), vec![0, 3, 6, 9, 10]);
        assert_eq!(record_indices(10, 100), (0..=10).collect::<Vec<_>>());
        assert_eq!(record_indices(8, 4), vec![0, 2, 4, 6, 8]);
    }

    #[test]
    fn neumaier_sum_is_compensated() {
        let mut s = Sum::default();
        for x in [1.0, 1e100, 1.0, -1e100] {
            s.add(x);
        }
        assert_eq!(s.value(), 2.0);
    }

    #[test]
    fn zero_noise_is_always_contained() {
        let model = make_scalar_linear(1.0, 0.0).unwrap();
        let mut p = scalar_params(1.0, 2.0);
        p.sigma = 0.0;
        let mc = McSettings {
            trials: 200,
            step: 1e-2,
            seed: 1,
        };
        let r = mc_tube_containment(&model, &[1.0], &Curve::zeros(1), &p, &mc).unwrap();
        assert_eq!(r.containment_fraction, Some(1.0));
        assert_eq!(r.violation_count, 0);
    }

    #[test]
    fn ou_containment_and_reproducibility() {
        let model = make_scalar_linear(-0.5, 0.1f64.sqrt()).unwrap();
        let mc = McSettings {
            trials: 500,
            step: 1e-2,
            seed: 7,
        };
        let a = mc_tube_containment(&model, &[0.0], &Curve::zeros(1), &scalar_params(-0.5, 5.0), &mc).unwrap();
        let b = mc_tube_containment(&model, &[0.0], &Curve::zeros(1), &scalar_params(-0.5, 5.0), &mc).unwrap();
        assert_eq!(a, b);
        assert!(a.containment_fraction.unwrap() >= 0.999);
        assert_eq!(
            a.containment_fraction.unwrap(),
            1.0 - a.violation_count as f64 / a.trials as f64
        );
    }

    #[test]
    fn ou_mean_square_gap_approaches_stationary_variance() {
        let (c, sigma2): (f64, f64) = (-0.5, 0.1);
        let model = make_scalar_linear(c, sigma2.sqrt()).unwrap();
        let mc = McSettings {
            trials: 4000,
            step: 1e-2,
            seed: 3,
        };
        let gap = mc_mean_square_gap(&model, &[0.0], &Curve::zeros(1), 8.0, &mc, 80).unwrap();
        let last = gap.mean.len() - 1;
        // Euler on dX = cX dt + s dW has stationary variance s^2 h / (1 - (1 + c h)^2)
        let h = 1e-2;
        let stationary = sigma2 * h / (1.0 - (1.0 + c * h).powi(2));
        assert!((gap.mean[last] - stationary).abs() <= 3.0 * gap.se[last], "{} vs {stationary}", gap.mean[last]);
        assert!(gap.mean[last] <= sigma2 / (-2.0 * c) + 3.0 * gap.se[last]);
        assert!(gap.worst_excess(c, sigma2.sqrt(), 1) <= 0.0);
        assert_eq!(gap.mean[0], 0.0);
    }

    #[test]
    fn zero_noise_gap_is_identically_zero() {
        let model = make_scalar_linear(0.3, 0.0).unwrap();
        let mc = McSettings {
            trials: 10,
            step: 1e-2,
            seed: 0,
        };
        let gap = mc_mean_square_gap(&model, &[1.0], &Curve::constant(vec![0.2]), 1.0, &mc, 20).unwrap();
        assert!(gap.mean.iter().all(|&m| m == 0.0));
    }

    #[test]
    fn zero_noise_chance_check_reproduces_twin_cost() {
        let model = make_double_integrator(1.0, double_integrator_gain(-10.0, -5.0), 0.0).unwrap();
        let grid = crate::dynamics::uniform_grid(2.0, 20);
        let states: Vec<Vec<f64>> = grid.iter().map(|t| vec![t * 0.5, 0.0, 0.0, 0.5, 0.0, 0.0]).collect();
        let controls: Vec<Vec<f64>> = states
            .iter()
            .map(|x| {
                let mut u = x.clone();
                u.extend([0.0; 3]);
                u
            })
            .collect();
        let plan = Trajectory::new(grid, states, controls).unwrap();
        let cost = CostSpec::new(
            &CostWeights::default(),
            Curve::line(vec![0.0; 6], vec![1.0, 0.0, 0.0, 0.5, 0.0, 0.0], 2.0).unwrap(),
            vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            ControlLayout {
                reference_dim: 6,
                feedforward_dim: 3,
            },
        )
        .unwrap();
        let obstacles = vec![Obstacle::Sphere {
            center: vec![0.5, 1.0, 0.0],
            radius: 0.3,
            dims: vec![0, 1, 2],
        }];
        let mc = McSettings {
            trials: 64,
            step: 1e-3,
            seed: 9,
        };
        let out = mc_chance_constraint(&plan, &model, &obstacles, &cost, &mc, 100, 3).unwrap();
        assert_eq!(out.report.safety_fraction, Some(1.0));
        assert_eq!(out.report.mean_cost, out.report.deterministic_cost);
        assert_eq!(out.report.cost_se, Some(0.0));
        assert_eq!(out.paths.len(), 3);
        assert_eq!(out.curve.mean, out.curve.det);
    }

    #[test]
    fn quadrature_matches_closed_forms() {
        // c = 0: (2/3) sqrt(L^2 n s^2) T^{3/2} + sqrt(L_T^2 n s^2 T)
        for t in [0.5, 1.0, 2.0] {
            let q = cost_gap_bound_lipschitz(1.3, 0.7, 2, 0.4, 0.0, t);
            let k: f64 = 2.0 * 0.16;
            let exact = 2.0 / 3.0 * (1.69 * k).sqrt() * t.powf(1.5) + (0.49 * k * t).sqrt();
            assert!((q - exact).abs() <= 1e-9 * exact);
        }
        assert!((cost_gap_bound_lipschitz(1.0, 0.0, 1, 1.0, 0.0, 1.0) - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(cost_gap_bound_lipschitz(1.0, 1.0, 3, 0.0, 0.5, 2.0), 0.0);
        // c = 1, L_T = 0: sqrt(L^2 n s^2 / (2 c^3)) (sqrt(e^{2cT} - 1) - arctan sqrt(e^{2cT} - 1))
        for t in [0.5f64, 1.0, 2.0] {
            let w = (2.0 * t).exp_m1().sqrt();
            let exact = (1.0f64 / 2.0).sqrt() * (w - w.atan());
            let q = cost_gap_bound_lipschitz(1.0, 0.0, 1, 1.0, 1.0, t);
            assert!((q - exact).abs() <= 1e-9 * exact, "{q} vs {exact}");
        }
    }

    #[test]
    fn smooth_bound_examples() {
        assert_eq!(cost_gap_bound_smooth(4.0, 2.0, 1, 0.0, 0.3, 2.0), 0.0);
        assert!((cost_gap_bound_smooth(4.0, 0.0, 1, 1.0, 0.0, 2.0) - 4.0).abs() < 1e-15);
        for c in [1e-6, -1e-6] {
            let v = cost_gap_bound_smooth(4.0, 0.0, 1, 1.0, c, 2.0);
            assert!((v - 4.0).abs() <= 1e-4 * 4.0);
        }
        // direct formula away from zero
        let (l, lt, n, s, c, t): (f64, f64, usize, f64, f64, f64) = (1.5, 0.5, 3, 0.2, -0.7, 2.5);
        let k = n as f64 * s * s;
        let direct = l * k * (((2.0 * c * t).exp() - 1.0) / (2.0 * c) - t) / (4.0 * c)
            + lt * k * ((2.0 * c * t).exp() - 1.0) / (4.0 * c);
        assert!((cost_gap_bound_smooth(l, lt, n, s, c, t) - direct).abs() <= 1e-12 * direct.abs());
    }

    #[test]
    fn lipschitz_constants_from_box() {
        let cost = CostSpec::new(
            &CostWeights {
                w_init: 1.0,
                w_u: 0.0,
                w_ref: 0.0,
                w_terminal: 2.0,
                ..CostWeights::default()
            },
            Curve::zeros(2),
            vec![0.0, 0.0],
            ControlLayout::open_loop(1),
        )
        .unwrap();
        let (l, lt) = lipschitz_constants(&cost, &[[-1.0, 3.0], [0.0, 4.0]], &[0.0, 1.0], &[vec![0.0], vec![0.0]]);
        assert!((l - 10.0).abs() < 1e-12);
        assert!((lt - 20.0).abs() < 1e-12);
    }
}
