//! Deterministic trajectory optimisation over the eroded safe set.

mod cost;
mod solver;
mod transcription;

pub use cost::{evaluate_cost, trapezoid_weights, CostSpec, CostWeights};
pub use solver::{solve, Nlp, SolveStatus, SolverOptions, SolverReport};
pub use transcription::{transcribe, Boundary, ControlBound, TranscribedProblem};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{trial_rng, uniform_grid, Curve, SystemModel, Trajectory};
use crate::error::Result;
use crate::geometry::{inflate_obstacles, CoverOptions, InflatedSet, Obstacle};
use crate::tube::{tube_curve, RadiusCurve, TubeParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanOptions {
    /// Number of collocation intervals.
    pub knots: usize,
    pub solver: SolverOptions,
    pub control_bounds: Vec<ControlBound>,
    /// Extra perturbed starts solved alongside the straight-line guess.
    pub multistart: usize,
    pub multistart_scale: f64,
    pub seed: u64,
}

impl Default for PlanOptions {
    fn default() -> Self {
        Self {
            knots: 50,
            solver: SolverOptions::default(),
            control_bounds: Vec::new(),
            multistart: 0,
            multistart_scale: 0.25,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanResult {
    pub trajectory: Trajectory,
    /// Deterministic cost `J_d` of the plan.
    pub cost: f64,
    pub report: SolverReport,
    /// Largest unscaled collocation defect.
    pub max_defect: f64,
    /// Largest covering-sphere constraint value at knots and midpoints.
    pub max_obstacle_value: Option<f64>,
    /// Index of the winning start (0 is the straight-line guess).
    pub start_index: usize,
    /// Tube radii at knots and midpoints.
    pub radius: RadiusCurve,
    pub inflated: InflatedSet,
}

/// Everything the planner needs besides the model.
pub struct PlanInput<'a> {
    pub model: &'a dyn SystemModel,
    pub tube: &'a TubeParams,
    pub obstacles: &'a [Obstacle],
    pub cover: &'a CoverOptions,
    pub weights: &'a CostWeights,
    pub boundary: &'a Boundary,
    pub options: &'a PlanOptions,
}

/// Cost specification used for planning: the initial guess is the straight line between boundary states.
pub fn plan_cost(model: &dyn SystemModel, weights: &CostWeights, boundary: &Boundary, horizon: f64) -> Result<CostSpec> {
    boundary.validate(model.state_dim())?;
    let x_init = Curve::line(boundary.start.clone(), boundary.goal_state(), horizon)?;
    CostSpec::new(weights, x_init, boundary.goal.clone(), model.control_layout())
}

fn perturbed_start(problem: &TranscribedProblem, base: &[f64], index: usize, scale: f64, seed: u64, n: usize, nr: usize) -> Vec<f64> {
    let mut rng = trial_rng(seed, index as u64);
    let shift: Vec<f64> = (0..n).map(|_| rng.random_range(-scale..=scale)).collect();
    let knots = problem.knots();
    let off = (knots + 1) * n;
    let p = (base.len() - off) / (knots + 1);
    let mut z = base.to_vec();
    for k in 1..knots {
        let bump = (std::f64::consts::PI * k as f64 / knots as f64).sin();
        for i in 0..n {
            z[k * n + i] += bump * shift[i];
            if i < nr {
                z[off + k * p + i] += bump * shift[i];
            }
        }
    }
    z
}

/// Tube radius, obstacle inflation, transcription and solve.
pub fn plan(input: &PlanInput) -> Result<PlanResult> {
    let opts = input.options;
    let horizon = input.tube.horizon;
    let samples = uniform_grid(horizon, 2 * opts.knots.max(1));
    let radius = tube_curve(input.tube, &samples)?;
    let inflated = inflate_obstacles(input.obstacles, &radius, input.cover)?;
    let cost = plan_cost(input.model, input.weights, input.boundary, horizon)?;
    let problem = transcribe(
        input.model,
        &cost,
        &inflated,
        input.boundary,
        horizon,
        opts.knots,
        &opts.control_bounds,
    )?;
    let base = problem.initial_guess();
    let n = input.model.state_dim();
    let nr = input.model.control_layout().reference_dim;
    let runs: Vec<(Vec<f64>, SolverReport)> = (0..=opts.multistart)
        .into_par_iter()
        .map(|i| {
            let z0 = if i == 0 {
                base.clone()
            } else {
                perturbed_start(&problem, &base, i, opts.multistart_scale, opts.seed, n, nr)
            };
            solve(&problem, &z0, &opts.solver)
        })
        .collect();
    // Best objective among points within the feasibility tolerance, ties to the
    // lower index; otherwise the least violated.
    let tol = opts.solver.feas_tol;
    let best = runs
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| {
            let key = |r: &SolverReport| {
                let feasible = r.constraint_violation <= tol;
                (!feasible, if feasible { r.objective } else { r.constraint_violation })
            };
            let (fa, va) = key(&a.1);
            let (fb, vb) = key(&b.1);
            fa.cmp(&fb).then(va.total_cmp(&vb))
        })
        .map(|(i, _)| i)
        .unwrap_or(0);
    let (z, report) = runs.into_iter().nth(best).unwrap();
    Ok(PlanResult {
        trajectory: problem.trajectory(&z),
        cost: report.objective,
        max_defect: problem.max_defect(&z),
        max_obstacle_value: problem.max_obstacle_value(&z),
        report,
        start_index: best,
        radius,
        inflated,
    })
}

#[cfg(test)]
mod tests {
    use super::transcription::transcribe_unchecked;
    use super::*;
    use crate::dynamics::{
        double_integrator_gain, integrate_deterministic, make_double_integrator, make_unicycle, ControlLayout,
        LinearSystem,
    };
    use crate::error::Error;
    use nalgebra::DMatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn one_d_double_integrator() -> LinearSystem {
        LinearSystem::new(
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]),
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            DMatrix::zeros(2, 2),
        )
        .unwrap()
    }

    fn no_obstacles(horizon: f64, knots: usize) -> InflatedSet {
        let r = RadiusCurve::constant(uniform_grid(horizon, 2 * knots), 0.0);
        inflate_obstacles(&[], &r, &CoverOptions::default()).unwrap()
    }

    fn effort_only() -> CostWeights {
        CostWeights {
            w_init: 0.0,
            w_u: 1.0,
            w_ref: 0.0,
            ..CostWeights::default()
        }
    }

    fn min_effort(d: f64, horizon: f64, knots: usize) -> (Trajectory, f64) {
        let model = one_d_double_integrator();
        let boundary = Boundary {
            start: vec![0.0, 0.0],
            goal: vec![d, 0.0],
            goal_pinned: vec![0, 1],
        };
        let cost = plan_cost(&model, &effort_only(), &boundary, horizon).unwrap();
        let inflated = no_obstacles(horizon, knots);
        let problem = transcribe(&model, &cost, &inflated, &boundary, horizon, knots, &[]).unwrap();
        let (z, rep) = solve(&problem, &problem.initial_guess(), &SolverOptions::default());
        assert_eq!(rep.status, SolveStatus::Optimal, "{rep:?}");
        (problem.trajectory(&z), rep.objective)
    }

    #[test]
    fn minimum_effort_rest_to_rest() {
        // x*(t) = D (3 s^2 - 2 s^3), u*(t) = 6 D / T^2 (1 - 2 t / T), J* = 12 D^2 / T^3
        let (d, horizon): (f64, f64) = (1.0, 1.0);
        let j_exact = 12.0 * d * d / horizon.powi(3);
        let umax = 6.0 * d / horizon.powi(2);
        let (traj, j) = min_effort(d, horizon, 100);
        for (t, x) in traj.grid.iter().zip(&traj.states) {
            let s = t / horizon;
            let exact = d * (3.0 * s * s - 2.0 * s.powi(3));
            assert!((x[0] - exact).abs() <= 1e-3 * d, "t={t}");
        }
        // The end knots carry half quadrature weight, so their controls are
        // biased at O(1); the comparison uses the interior knots.
        let last = traj.grid.len() - 1;
        for (t, u) in traj.grid.iter().zip(&traj.controls).take(last).skip(1) {
            let exact = umax * (1.0 - 2.0 * t / horizon);
            assert!((u[0] - exact).abs() <= 1e-3 * umax, "t={t}: {} vs {exact}", u[0]);
        }
        assert!((j - j_exact).abs() <= 1e-3 * j_exact, "{j}");
        // the cost error is second order in the knot spacing
        let (_, j_coarse) = min_effort(d, horizon, 50);
        let ratio = (j_coarse - j_exact) / (j - j_exact);
        assert!((3.5..4.5).contains(&ratio), "{ratio}");
    }

    #[test]
    fn convex_problem_has_one_optimum() {
        let model = make_double_integrator(1.0, double_integrator_gain(-10.0, -5.0), 0.0).unwrap();
        let (horizon, knots) = (2.0, 20);
        let boundary = Boundary {
            start: vec![0.0; 6],
            goal: vec![1.0, 0.5, -0.5, 0.0, 0.0, 0.0],
            goal_pinned: (0..6).collect(),
        };
        let cost = plan_cost(&model, &CostWeights::default(), &boundary, horizon).unwrap();
        let inflated = no_obstacles(horizon, knots);
        let problem = transcribe(&model, &cost, &inflated, &boundary, horizon, knots, &[]).unwrap();

        // Quadratic objective with PSD Hessian, affine constraints.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rand_z = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..problem.num_vars()).map(|_| rng.random_range(-1.0..1.0)).collect() };
        let (za, zb) = (rand_z(&mut rng), rand_z(&mut rng));
        let f = |z: &[f64]| problem.objective(z);
        let plus: Vec<f64> = za.iter().zip(&zb).map(|(a, b)| a + b).collect();
        let minus: Vec<f64> = za.iter().zip(&zb).map(|(a, b)| a - b).collect();
        assert!(f(&plus) + f(&minus) - 2.0 * f(&za) >= -1e-9);
        let e = |z: &[f64]| {
            let mut eq = vec![0.0; problem.num_eq()];
            let mut iq = vec![0.0; problem.num_ineq()];
            problem.constraints(z, &mut eq, &mut iq);
            eq
        };
        let mid: Vec<f64> = za.iter().zip(&zb).map(|(a, b)| 0.5 * (a + b)).collect();
        let (ea, eb, em) = (e(&za), e(&zb), e(&mid));
        for i in 0..ea.len() {
            assert!((em[i] - 0.5 * (ea[i] + eb[i])).abs() < 1e-10);
        }

        let opts = SolverOptions::default();
        let (z1, r1) = solve(&problem, &problem.initial_guess(), &opts);
        let (z2, r2) = solve(&problem, &rand_z(&mut rng), &opts);
        assert_eq!(r1.status, SolveStatus::Optimal);
        assert_eq!(r2.status, SolveStatus::Optimal);
        assert!((r1.objective - r2.objective).abs() <= 1e-6 * r1.objective.max(1.0));
        let dz = z1.iter().zip(&z2).fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
        assert!(dz < 1e-2, "{dz}");
    }

    #[test]
    fn gradients_match_finite_differences() {
        let model = make_unicycle(0.5, 0.5, 0.8, 0.04).unwrap();
        let (horizon, knots) = (3.0, 6);
        let boundary = Boundary {
            start: vec![0.0, 0.0, 0.7],
            goal: vec![2.0, 2.0, 0.7],
            goal_pinned: vec![0, 1],
        };
        let w = CostWeights {
            w_terminal: 0.3,
            ..CostWeights::default()
        };
        let cost = plan_cost(&model, &w, &boundary, horizon).unwrap();
        let obstacles = vec![
            Obstacle::Sphere {
                center: vec![0.9, 1.1],
                radius: 0.2,
                dims: vec![0, 1],
            },
            Obstacle::Box {
                min: vec![1.4, 0.3],
                max: vec![1.8, 0.6],
                dims: vec![0, 1],
            },
        ];
        let r = RadiusCurve {
            grid: uniform_grid(horizon, 2 * knots),
            radii: (0..=2 * knots).map(|k| 0.1 + 0.01 * k as f64).collect(),
        };
        let inflated = inflate_obstacles(&obstacles, &r, &CoverOptions::default()).unwrap();
        let bounds = [ControlBound {
            index: 3,
            min: 0.0,
            max: 1.5,
        }];
        let problem = transcribe_unchecked(&model, &cost, &inflated, &boundary, horizon, knots, &bounds).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let z: Vec<f64> = (0..problem.num_vars()).map(|_| rng.random_range(-1.0..2.0)).collect();
        let we: Vec<f64> = (0..problem.num_eq()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let wi: Vec<f64> = (0..problem.num_ineq()).map(|_| rng.random_range(0.0..1.0)).collect();
        let phi = |z: &[f64]| {
            let mut eq = vec![0.0; problem.num_eq()];
            let mut iq = vec![0.0; problem.num_ineq()];
            problem.constraints(z, &mut eq, &mut iq);
            eq.iter().zip(&we).map(|(a, b)| a * b).sum::<f64>() + iq.iter().zip(&wi).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut jt = vec![0.0; problem.num_vars()];
        problem.jacobian_transpose_product(&z, &we, &wi, &mut jt);
        let mut og = vec![0.0; problem.num_vars()];
        problem.objective_grad(&z, &mut og);
        let h = 1e-6;
        for j in 0..problem.num_vars() {
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[j] += h;
            zm[j] -= h;
            let fd = (phi(&zp) - phi(&zm)) / (2.0 * h);
            assert!((fd - jt[j]).abs() <= 1e-4 * jt[j].abs().max(1.0), "constraint {j}: {fd} vs {}", jt[j]);
            let fd = (problem.objective(&zp) - problem.objective(&zm)) / (2.0 * h);
            assert!((fd - og[j]).abs() <= 1e-4 * og[j].abs().max(1.0), "objective {j}: {fd} vs {}", og[j]);
        }
    }

    #[test]
    fn defect_of_true_solution_shrinks_quadratically() {
        let model = make_unicycle(0.5, 0.5, 0.8, 0.0).unwrap();
        let horizon = 2.0;
        let ctrl = Curve::new(
            uniform_grid(horizon, 200),
            uniform_grid(horizon, 200)
                .iter()
                .map(|t| vec![t.sin(), t.cos(), 0.3 * t, 1.0, 0.5 * t.cos()])
                .collect(),
        )
        .unwrap();
        let x0 = vec![0.1, -0.2, 0.3];
        let mut defects = Vec::new();
        for knots in [10, 20, 40] {
            let traj = integrate_deterministic(&model, &x0, &ctrl, &uniform_grid(horizon, knots)).unwrap();
            let boundary = Boundary {
                start: x0.clone(),
                goal: x0.clone(),
                goal_pinned: vec![],
            };
            let cost = plan_cost(&model, &CostWeights::default(), &boundary, horizon).unwrap();
            let inflated = no_obstacles(horizon, knots);
            let problem = transcribe(&model, &cost, &inflated, &boundary, horizon, knots, &[]).unwrap();
            let z = problem.pack(&traj.states, &traj.controls);
            defects.push(problem.max_scaled_defect(&z));
        }
        for w in defects.windows(2) {
            let ratio = w[0] / w[1];
            assert!((3.5..4.6).contains(&ratio), "{defects:?}");
        }
    }

    #[test]
    fn goal_inside_inflated_obstacle_is_infeasible() {
        let model = one_d_double_integrator();
        let (horizon, knots) = (1.0, 10);
        let boundary = Boundary {
            start: vec![0.0, 0.0],
            goal: vec![1.0, 0.0],
            goal_pinned: vec![0, 1],
        };
        let obstacles = vec![Obstacle::Sphere {
            center: vec![1.05],
            radius: 0.1,
            dims: vec![0],
        }];
        let r = RadiusCurve::constant(uniform_grid(horizon, 2 * knots), 0.05);
        let inflated = inflate_obstacles(&obstacles, &r, &CoverOptions::default()).unwrap();
        let cost = plan_cost(&model, &effort_only(), &boundary, horizon).unwrap();
        let err = transcribe(&model, &cost, &inflated, &boundary, horizon, knots, &[]).err().unwrap();
        assert_eq!(
            err,
            Error::InfeasibleErosion {
                which: "goal",
                obstacle: 0,
                time: 1.0
            }
        );
        let problem = transcribe_unchecked(&model, &cost, &inflated, &boundary, horizon, knots, &[]).unwrap();
        let opts = SolverOptions {
            max_outer: 12,
            ..SolverOptions::default()
        };
        let (_, rep) = solve(&problem, &problem.initial_guess(), &opts);
        assert_eq!(rep.status, SolveStatus::Infeasible);
    }

    #[test]
    fn obstacle_free_plan_is_straight_and_deterministic() {
        let model = make_double_integrator(1.0, double_integrator_gain(-10.0, -5.0), 0.05).unwrap();
        let tube = TubeParams {
            c: -2.5,
            sigma: 0.05,
            n: 6,
            delta: 1e-3,
            epsilon: 0.9,
            dt: Some(0.01),
            horizon: 3.0,
        };
        let boundary = Boundary {
            start: vec![0.0; 6],
            goal: vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0],
            goal_pinned: (0..6).collect(),
        };
        let options = PlanOptions {
            knots: 20,
            ..PlanOptions::default()
        };
        let input = PlanInput {
            model: &model,
            tube: &tube,
            obstacles: &[],
            cover: &CoverOptions::default(),
            weights: &CostWeights::default(),
            boundary: &boundary,
            options: &options,
        };
        let a = plan(&input).unwrap();
        let b = plan(&input).unwrap();
        assert_eq!(a, b);
        assert!(a.report.status.is_feasible());
        // positions stay on the diagonal
        for x in &a.trajectory.states {
            assert!((x[0] - x[1]).abs() < 1e-4 && (x[1] - x[2]).abs() < 1e-4);
        }
        assert_eq!(model.control_layout(), ControlLayout { reference_dim: 6, feedforward_dim: 3 });
    }
}
