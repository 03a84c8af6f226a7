use nalgebra::{Cholesky, DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::dynamics::{ControlLayout, Curve, Trajectory};
use crate::error::{Error, Result};

/// Cost weights as written in a scenario.
///
/// Running cost `w_init |x - x_init|^2 + w_u |u_ff|^2 + w_ref |x - x_ref|^2
/// + x'Qx + u_ff'R u_ff`, terminal cost `w_terminal |x_T - goal|^2 + x_T'S x_T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostWeights {
    pub w_init: f64,
    pub w_u: f64,
    pub w_ref: f64,
    pub w_terminal: f64,
    pub q: Option<Vec<Vec<f64>>>,
    pub r: Option<Vec<Vec<f64>>>,
    pub s: Option<Vec<Vec<f64>>>,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            w_init: 1.0,
            w_u: 0.5,
            w_ref: 1.0,
            w_terminal: 0.0,
            q: None,
            r: None,
            s: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostSpec {
    pub w_init: f64,
    pub w_u: f64,
    pub w_ref: f64,
    pub w_terminal: f64,
    pub q: Option<DMatrix<f64>>,
    pub r: Option<DMatrix<f64>>,
    pub s: Option<DMatrix<f64>>,
    pub x_init: Curve,
    pub goal: Vec<f64>,
    pub layout: ControlLayout,
}

fn spd_matrix(name: &str, rows: &Option<Vec<Vec<f64>>>, dim: usize) -> Result<Option<DMatrix<f64>>> {
    let Some(rows) = rows else {
        return Ok(None);
    };
    if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
        return Err(Error::InvalidParameter(format!("{name} must be {dim}x{dim}")));
    }
    let m = DMatrix::from_fn(dim, dim, |i, j| rows[i][j]);
    if (&m - m.transpose()).abs().max() > 1e-12 * m.abs().max().max(1.0) {
        return Err(Error::InvalidParameter(format!("{name} must be symmetric")));
    }
    if Cholesky::new(m.clone()).is_none() {
        return Err(Error::InvalidParameter(format!("{name} must be positive definite")));
    }
    Ok(Some(m))
}

fn quad(m: &DMatrix<f64>, v: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..v.len() {
        for j in 0..v.len() {
            acc += v[i] * m[(i, j)] * v[j];
        }
    }
    acc
}

fn add_quad_grad(m: &DMatrix<f64>, v: &[f64], out: &mut [f64]) {
    for i in 0..v.len() {
        out[i] += 2.0 * (0..v.len()).map(|j| m[(i, j)] * v[j]).sum::<f64>();
    }
}

fn max_eig(m: &Option<DMatrix<f64>>) -> f64 {
    m.as_ref()
        .map(|m| SymmetricEigen::new(m.clone()).eigenvalues.max())
        .unwrap_or(0.0)
}

impl CostSpec {
    pub fn new(weights: &CostWeights, x_init: Curve, goal: Vec<f64>, layout: ControlLayout) -> Result<Self> {
        let n = goal.len();
        for (name, w) in [
            ("w_init", weights.w_init),
            ("w_u", weights.w_u),
            ("w_ref", weights.w_ref),
            ("w_terminal", weights.w_terminal),
        ] {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::InvalidParameter(format!("{name} must be non-negative, got {w}")));
            }
        }
        if x_init.dim() != n {
            return Err(Error::DimensionMismatch {
                what: "initial-guess curve",
                expected: n,
                got: x_init.dim(),
            });
        }
        if layout.reference_dim != 0 && layout.reference_dim != n {
            return Err(Error::DimensionMismatch {
                what: "reference state",
                expected: n,
                got: layout.reference_dim,
            });
        }
        Ok(Self {
            w_init: weights.w_init,
            w_u: weights.w_u,
            w_ref: weights.w_ref,
            w_terminal: weights.w_terminal,
            q: spd_matrix("Q", &weights.q, n)?,
            r: spd_matrix("R", &weights.r, layout.feedforward_dim)?,
            s: spd_matrix("S", &weights.s, n)?,
            x_init,
            goal,
            layout,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.goal.len()
    }

    pub fn running(&self, t: f64, x: &[f64], u: &[f64]) -> f64 {
        let xi = self.x_init.eval(t);
        let x_ref = self.layout.reference(u);
        let u_ff = self.layout.feedforward(u);
        let mut v = self.w_init * x.iter().zip(&xi).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        v += self.w_u * u_ff.iter().map(|a| a * a).sum::<f64>();
        v += self.w_ref * x.iter().zip(x_ref).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        if let Some(q) = &self.q {
            v += quad(q, x);
        }
        if let Some(r) = &self.r {
            v += quad(r, u_ff);
        }
        v
    }

    /// Gradient of the running cost in `x`.
    pub fn running_state_grad(&self, t: f64, x: &[f64], u: &[f64], gx: &mut [f64]) {
        let xi = self.x_init.eval(t);
        let x_ref = self.layout.reference(u);
        for i in 0..x.len() {
            gx[i] = 2.0 * self.w_init * (x[i] - xi[i]);
            if !x_ref.is_empty() {
                gx[i] += 2.0 * self.w_ref * (x[i] - x_ref[i]);
            }
        }
        if let Some(q) = &self.q {
            add_quad_grad(q, x, gx);
        }
    }

    /// Gradient of the running cost in the full control `u = [x_ref, u_ff]`.
    pub fn running_control_grad(&self, x: &[f64], u: &[f64], gu: &mut [f64]) {
        let nr = self.layout.reference_dim;
        for i in 0..nr {
            gu[i] = -2.0 * self.w_ref * (x[i] - u[i]);
        }
        let u_ff = self.layout.feedforward(u);
        for (g, a) in gu[nr..].iter_mut().zip(u_ff) {
            *g = 2.0 * self.w_u * a;
        }
        if let Some(r) = &self.r {
            add_quad_grad(r, u_ff, &mut gu[nr..]);
        }
    }

    pub fn terminal(&self, x: &[f64]) -> f64 {
        let mut v = self.w_terminal * x.iter().zip(&self.goal).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        if let Some(s) = &self.s {
            v += quad(s, x);
        }
        v
    }

    pub fn terminal_grad(&self, x: &[f64], g: &mut [f64]) {
        for i in 0..x.len() {
            g[i] = 2.0 * self.w_terminal * (x[i] - self.goal[i]);
        }
        if let Some(s) = &self.s {
            add_quad_grad(s, x, g);
        }
    }

    /// Smoothness constants `(L, L_T)` of the running and terminal costs in the state.
    pub fn smooth_constants(&self) -> (f64, f64) {
        let l = 2.0 * (self.w_init + self.w_ref) + 2.0 * max_eig(&self.q);
        let lt = 2.0 * self.w_terminal + 2.0 * max_eig(&self.s);
        (l, lt)
    }

    /// Largest eigenvalues of `Q` and `S` (zero when absent).
    pub fn quadratic_form_eigs(&self) -> (f64, f64) {
        (max_eig(&self.q), max_eig(&self.s))
    }
}

/// Trapezoidal quadrature weights on a grid.
pub fn trapezoid_weights(grid: &[f64]) -> Vec<f64> {
    let mut w = vec![0.0; grid.len()];
    for (k, win) in grid.windows(2).enumerate() {
        let h = 0.5 * (win[1] - win[0]);
        w[k] += h;
        w[k + 1] += h;
    }
    w
}

/// `J = integral of L_t + Phi_T` by the trapezoidal rule on the trajectory grid.
pub fn evaluate_cost(traj: &Trajectory, cost: &CostSpec) -> Result<f64> {
    let n = cost.state_dim();
    if traj.states[0].len() != n {
        return Err(Error::DimensionMismatch {
            what: "trajectory state",
            expected: n,
            got: traj.states[0].len(),
        });
    }
    if traj.controls[0].len() != cost.layout.total() {
        return Err(Error::DimensionMismatch {
            what: "trajectory control",
            expected: cost.layout.total(),
            got: traj.controls[0].len(),
        });
    }
    let w = trapezoid_weights(&traj.grid);
    let running: f64 = traj
        .grid
        .iter()
        .zip(&traj.states)
        .zip(&traj.controls)
        .zip(&w)
        .map(|(((t, x), u), wk)| wk * cost.running(*t, x, u))
        .sum();
    Ok(running + cost.terminal(traj.final_state()))
}
