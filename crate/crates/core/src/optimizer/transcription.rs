//! Trapezoidal direct collocation.
//!
//! Decision vector `z = [x_0, .., x_N, u_0, .., u_N]` on a uniform knot grid.
//! Equalities: `x_0 = start`, defects per unit time
//! `(x_{k+1} - x_k) / dt - (f_k + f_{k+1}) / 2`, pinned goal components.
//! Inequalities: covering-sphere constraints at knots and interval midpoints,
//! then control bounds at every knot.

use serde::{Deserialize, Serialize};

use super::cost::{trapezoid_weights, CostSpec};
use super::solver::Nlp;
use crate::dynamics::{uniform_grid, SystemModel, Trajectory};
use crate::error::{Error, Result};
use crate::geometry::InflatedSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Boundary {
    pub start: Vec<f64>,
    /// Full goal state; only `goal_pinned` components are constrained.
    pub goal: Vec<f64>,
    pub goal_pinned: Vec<usize>,
}

impl Boundary {
    /// Start state with the pinned goal components substituted.
    pub fn goal_state(&self) -> Vec<f64> {
        let mut g = self.start.clone();
        for &i in &self.goal_pinned {
            g[i] = self.goal[i];
        }
        g
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        for (what, v) in [("start state", &self.start), ("goal state", &self.goal)] {
            if v.len() != n {
                return Err(Error::DimensionMismatch {
                    what,
                    expected: n,
                    got: v.len(),
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidParameter(format!("{what} must be finite")));
            }
        }
        if let Some(&i) = self.goal_pinned.iter().find(|&&i| i >= n) {
            return Err(Error::InvalidParameter(format!("pinned goal index {i} out of range")));
        }
        Ok(())
    }
}

/// Box bound `min <= u[index] <= max` on one control component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlBound {
    pub index: usize,
    pub min: f64,
    pub max: f64,
}

pub struct TranscribedProblem<'a> {
    model: &'a dyn SystemModel,
    cost: &'a CostSpec,
    inflated: &'a InflatedSet,
    boundary: &'a Boundary,
    bounds: Vec<ControlBound>,
    grid: Vec<f64>,
    weights: Vec<f64>,
    dt: f64,
    n: usize,
    p: usize,
}

/// Builds the collocation program; checks the boundary states against the inflated obstacles.
pub fn transcribe<'a>(
    model: &'a dyn SystemModel,
    cost: &'a CostSpec,
    inflated: &'a InflatedSet,
    boundary: &'a Boundary,
    horizon: f64,
    knots: usize,
    bounds: &[ControlBound],
) -> Result<TranscribedProblem<'a>> {
    let problem = transcribe_unchecked(model, cost, inflated, boundary, horizon, knots, bounds)?;
    if let Some((which, obstacle, time)) = inflated.erosion_violation(&boundary.start, &boundary.goal_state()) {
        return Err(Error::InfeasibleErosion { which, obstacle, time });
    }
    Ok(problem)
}

pub(crate) fn transcribe_unchecked<'a>(
    model: &'a dyn SystemModel,
    cost: &'a CostSpec,
    inflated: &'a InflatedSet,
    boundary: &'a Boundary,
    horizon: f64,
    knots: usize,
    bounds: &[ControlBound],
) -> Result<TranscribedProblem<'a>> {
    if knots < 2 {
        return Err(Error::InvalidParameter("collocation needs at least 2 intervals".into()));
    }
    if !(horizon > 0.0) || !horizon.is_finite() {
        return Err(Error::InvalidParameter(format!("horizon must be positive, got {horizon}")));
    }
    let n = model.state_dim();
    let p = model.control_dim();
    boundary.validate(n)?;
    if cost.state_dim() != n || cost.layout.total() != p {
        return Err(Error::DimensionMismatch {
            what: "cost dimensions",
            expected: n + p,
            got: cost.state_dim() + cost.layout.total(),
        });
    }
    if inflated.time_samples() != 2 * knots + 1 {
        return Err(Error::DimensionMismatch {
            what: "inflated time samples (knots and midpoints)",
            expected: 2 * knots + 1,
            got: inflated.time_samples(),
        });
    }
    for b in bounds {
        if b.index >= p || !(b.min <= b.max) {
            return Err(Error::InvalidParameter(format!(
                "control bound on index {} must satisfy index < {p} and min <= max",
                b.index
            )));
        }
    }
    let grid = uniform_grid(horizon, knots);
    let weights = trapezoid_weights(&grid);
    Ok(TranscribedProblem {
        model,
        cost,
        inflated,
        boundary,
        bounds: bounds.to_vec(),
        dt: horizon / knots as f64,
        grid,
        weights,
        n,
        p,
    })
}

impl TranscribedProblem<'_> {
    pub fn knots(&self) -> usize {
        self.grid.len() - 1
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    fn x<'z>(&self, z: &'z [f64], k: usize) -> &'z [f64] {
        &z[k * self.n..(k + 1) * self.n]
    }

    fn u<'z>(&self, z: &'z [f64], k: usize) -> &'z [f64] {
        let off = self.grid.len() * self.n;
        &z[off + k * self.p..off + (k + 1) * self.p]
    }

    fn u_offset(&self) -> usize {
        self.grid.len() * self.n
    }

    fn drifts(&self, z: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut f = vec![0.0; self.grid.len() * n];
        for (k, &t) in self.grid.iter().enumerate() {
            self.model.drift(self.x(z, k), self.u(z, k), t, &mut f[k * n..(k + 1) * n]);
        }
        f
    }

    /// Packs knot states and controls into a decision vector.
    pub fn pack(&self, states: &[Vec<f64>], controls: &[Vec<f64>]) -> Vec<f64> {
        let mut z = Vec::with_capacity(self.num_vars());
        states.iter().for_each(|x| z.extend_from_slice(x));
        controls.iter().for_each(|u| z.extend_from_slice(u));
        z
    }

    /// Straight line between the boundary states; reference equals the line, zero feedforward.
    pub fn initial_guess(&self) -> Vec<f64> {
        let goal = self.boundary.goal_state();
        let horizon = *self.grid.last().unwrap();
        let layout = self.cost.layout;
        let mut states = Vec::with_capacity(self.grid.len());
        let mut controls = Vec::with_capacity(self.grid.len());
        for &t in &self.grid {
            let s = t / horizon;
            let x: Vec<f64> = self
                .boundary
                .start
                .iter()
                .zip(&goal)
                .map(|(a, b)| a + s * (b - a))
                .collect();
            let mut u = vec![0.0; self.p];
            u[..layout.reference_dim].copy_from_slice(&x[..layout.reference_dim]);
            states.push(x);
            controls.push(u);
        }
        self.pack(&states, &controls)
    }

    pub fn trajectory(&self, z: &[f64]) -> Trajectory {
        let states = (0..self.grid.len()).map(|k| self.x(z, k).to_vec()).collect();
        let controls = (0..self.grid.len()).map(|k| self.u(z, k).to_vec()).collect();
        Trajectory {
            grid: self.grid.clone(),
            states,
            controls,
        }
    }

    /// Largest unscaled trapezoidal defect `|x_{k+1} - x_k - dt/2 (f_k + f_{k+1})|_inf`.
    pub fn max_defect(&self, z: &[f64]) -> f64 {
        let mut eq = vec![0.0; self.num_eq()];
        let mut ineq = vec![0.0; self.num_ineq()];
        self.constraints(z, &mut eq, &mut ineq);
        eq[self.n..self.n + self.knots() * self.n]
            .iter()
            .fold(0.0f64, |a, d| a.max(d.abs() * self.dt))
    }

    /// Largest defect per unit time (the scaled equality residual).
    pub fn max_scaled_defect(&self, z: &[f64]) -> f64 {
        self.max_defect(z) / self.dt
    }

    /// Largest covering-sphere constraint value over knots and midpoints (`<= 0` is safe);
    /// `None` without obstacles.
    pub fn max_obstacle_value(&self, z: &[f64]) -> Option<f64> {
        let mut eq = vec![0.0; self.num_eq()];
        let mut ineq = vec![0.0; self.num_ineq()];
        self.constraints(z, &mut eq, &mut ineq);
        let s = self.inflated.len() * (2 * self.knots() + 1);
        ineq[..s].iter().copied().reduce(f64::max)
    }
}

impl Nlp for TranscribedProblem<'_> {
    fn num_vars(&self) -> usize {
        self.grid.len() * (self.n + self.p)
    }

    fn num_eq(&self) -> usize {
        self.n + self.knots() * self.n + self.boundary.goal_pinned.len()
    }

    fn num_ineq(&self) -> usize {
        self.inflated.len() * (2 * self.knots() + 1) + 2 * self.bounds.len() * self.grid.len()
    }

    fn stages(&self) -> Option<Vec<usize>> {
        let knots = self.grid.len();
        let states = (0..knots).flat_map(|k| std::iter::repeat_n(k, self.n));
        let controls = (0..knots).flat_map(|k| std::iter::repeat_n(k, self.p));
        Some(states.chain(controls).collect())
    }

    fn objective(&self, z: &[f64]) -> f64 {
        let running: f64 = (0..self.grid.len())
            .map(|k| self.weights[k] * self.cost.running(self.grid[k], self.x(z, k), self.u(z, k)))
            .sum();
        running + self.cost.terminal(self.x(z, self.knots()))
    }

    fn objective_grad(&self, z: &[f64], grad: &mut [f64]) {
        let (n, p) = (self.n, self.p);
        let off = self.u_offset();
        for k in 0..self.grid.len() {
            let (x, u) = (self.x(z, k), self.u(z, k));
            let gx = &mut grad[k * n..(k + 1) * n];
            self.cost.running_state_grad(self.grid[k], x, u, gx);
            gx.iter_mut().for_each(|g| *g *= self.weights[k]);
            let gu = &mut grad[off + k * p..off + (k + 1) * p];
            self.cost.running_control_grad(x, u, gu);
            gu.iter_mut().for_each(|g| *g *= self.weights[k]);
        }
        let last = self.knots();
        let mut gt = vec![0.0; n];
        self.cost.terminal_grad(self.x(z, last), &mut gt);
        for (g, t) in grad[last * n..(last + 1) * n].iter_mut().zip(&gt) {
            *g += t;
        }
    }

    fn constraints(&self, z: &[f64], eq: &mut [f64], ineq: &mut [f64]) {
        let n = self.n;
        let knots = self.knots();
        for i in 0..n {
            eq[i] = self.x(z, 0)[i] - self.boundary.start[i];
        }
        let f = self.drifts(z);
        for k in 0..knots {
            let (x0, x1) = (self.x(z, k), self.x(z, k + 1));
            let d = &mut eq[n + k * n..n + (k + 1) * n];
            for i in 0..n {
                d[i] = (x1[i] - x0[i]) / self.dt - 0.5 * (f[k * n + i] + f[(k + 1) * n + i]);
            }
        }
        let pin_off = n + knots * n;
        let last = self.x(z, knots);
        for (j, &i) in self.boundary.goal_pinned.iter().enumerate() {
            eq[pin_off + j] = last[i] - self.boundary.goal[i];
        }

        let s = self.inflated.len();
        let mut mid = vec![0.0; n];
        for k in 0..=knots {
            self.inflated
                .values_into(self.x(z, k), 2 * k, &mut ineq[2 * k * s..(2 * k + 1) * s]);
            if k < knots {
                let (x0, x1) = (self.x(z, k), self.x(z, k + 1));
                for i in 0..n {
                    mid[i] = 0.5 * (x0[i] + x1[i]);
                }
                self.inflated
                    .values_into(&mid, 2 * k + 1, &mut ineq[(2 * k + 1) * s..(2 * k + 2) * s]);
            }
        }
        let mut j = s * (2 * knots + 1);
        for k in 0..=knots {
            let u = self.u(z, k);
            for b in &self.bounds {
                ineq[j] = u[b.index] - b.max;
                ineq[j + 1] = b.min - u[b.index];
                j += 2;
            }
        }
    }

    fn jacobian_transpose_product(&self, z: &[f64], w_eq: &[f64], w_ineq: &[f64], out: &mut [f64]) {
        let (n, p) = (self.n, self.p);
        let knots = self.knots();
        let off = self.u_offset();
        out.iter_mut().for_each(|o| *o = 0.0);
        out[..n].copy_from_slice(&w_eq[..n]);

        // Defects: d_k = (x_{k+1} - x_k)/dt - (f_k + f_{k+1})/2.
        let wd = &w_eq[n..n + knots * n];
        let mut v = vec![0.0; n];
        for k in 0..=knots {
            // v = -(w_{k-1} + w_k) / 2 multiplies the drift Jacobians at knot k.
            v.iter_mut().for_each(|x| *x = 0.0);
            if k > 0 {
                for i in 0..n {
                    out[k * n + i] += wd[(k - 1) * n + i] / self.dt;
                    v[i] -= 0.5 * wd[(k - 1) * n + i];
                }
            }
            if k < knots {
                for i in 0..n {
                    out[k * n + i] -= wd[k * n + i] / self.dt;
                    v[i] -= 0.5 * wd[k * n + i];
                }
            }
            if v.iter().all(|x| *x == 0.0) {
                continue;
            }
            let (x, u, t) = (self.x(z, k), self.u(z, k), self.grid[k]);
            let a = self.model.drift_jacobian(x, u, t);
            let b = self.model.control_jacobian(x, u, t);
            for j in 0..n {
                out[k * n + j] += (0..n).map(|i| a[(i, j)] * v[i]).sum::<f64>();
            }
            for j in 0..p {
                out[off + k * p + j] += (0..n).map(|i| b[(i, j)] * v[i]).sum::<f64>();
            }
        }
        let pin_off = n + knots * n;
        for (j, &i) in self.boundary.goal_pinned.iter().enumerate() {
            out[knots * n + i] += w_eq[pin_off + j];
        }

        let s = self.inflated.len();
        let mut mid = vec![0.0; n];
        let mut acc = vec![0.0; n];
        for k in 0..=knots {
            let w = &w_ineq[2 * k * s..(2 * k + 1) * s];
            if w.iter().any(|x| *x != 0.0) {
                self.inflated
                    .add_weighted_gradient(self.x(z, k), w, &mut out[k * n..(k + 1) * n]);
            }
            if k < knots {
                let w = &w_ineq[(2 * k + 1) * s..(2 * k + 2) * s];
                if w.iter().any(|x| *x != 0.0) {
                    let (x0, x1) = (self.x(z, k), self.x(z, k + 1));
                    for i in 0..n {
                        mid[i] = 0.5 * (x0[i] + x1[i]);
                    }
                    acc.iter_mut().for_each(|x| *x = 0.0);
                    self.inflated.add_weighted_gradient(&mid, w, &mut acc);
                    for i in 0..n {
                        out[k * n + i] += 0.5 * acc[i];
                        out[(k + 1) * n + i] += 0.5 * acc[i];
                    }
                }
            }
        }
        let mut j = s * (2 * knots + 1);
        for k in 0..=knots {
            for b in &self.bounds {
                out[off + k * p + b.index] += w_ineq[j] - w_ineq[j + 1];
                j += 2;
            }
        }
    }
}
