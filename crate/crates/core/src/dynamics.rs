//! Continuous-time system models and their integrators.
//!
//! A model describes `dX = f(X, u, t) dt + g(X, t) dW`. Dropping the `dW`
//! term gives the deterministic twin `dx/dt = f(x, u, t)` used by the planner.
//! Closed-loop models wrap a plant and a feedback law; their "control" is the
//! pair `(x_ref, u_ff)` that the planner optimises.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use smallvec::{smallvec, SmallVec};

use crate::error::{Error, Result};

type Buf = SmallVec<[f64; 16]>;

/// How a control vector splits into a reference state and a feedforward input.
///
/// Open-loop models have `reference_dim == 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlLayout {
    pub reference_dim: usize,
    pub feedforward_dim: usize,
}

impl ControlLayout {
    pub fn open_loop(p: usize) -> Self {
        Self {
            reference_dim: 0,
            feedforward_dim: p,
        }
    }

    pub fn total(&self) -> usize {
        self.reference_dim + self.feedforward_dim
    }

    pub fn reference<'a>(&self, u: &'a [f64]) -> &'a [f64] {
        &u[..self.reference_dim]
    }

    pub fn feedforward<'a>(&self, u: &'a [f64]) -> &'a [f64] {
        &u[self.reference_dim..]
    }
}

/// A controlled stochastic system.
///
/// Implementations must be immutable after construction so that ensembles can
/// share one model across worker threads.
pub trait SystemModel: Send + Sync {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn noise_dim(&self) -> usize;

    /// Writes `f(x, u, t)` into `out`.
    fn drift(&self, x: &[f64], u: &[f64], t: f64, out: &mut [f64]);

    /// The `n x m` diffusion matrix `g(x, t)`.
    fn diffusion(&self, x: &[f64], t: f64) -> DMatrix<f64>;

    /// Writes `g(x, t) w` into `out`. Override when `g` is cheap to apply.
    fn apply_diffusion(&self, x: &[f64], t: f64, w: &[f64], out: &mut [f64]) {
        let g = self.diffusion(x, t);
        for (i, o) in out.iter_mut().enumerate() {
            *o = (0..g.ncols()).map(|j| g[(i, j)] * w[j]).sum();
        }
    }

    /// `D_x f`. Defaults to central finite differences.
    fn drift_jacobian(&self, x: &[f64], u: &[f64], t: f64) -> DMatrix<f64> {
        fd_state_jacobian(self, x, u, t)
    }

    /// `D_u f`. Defaults to central finite differences.
    fn control_jacobian(&self, x: &[f64], u: &[f64], t: f64) -> DMatrix<f64> {
        fd_control_jacobian(self, x, u, t)
    }

    /// Smallest `sigma` with `g g^T <= sigma^2 I` for state-independent diffusion.
    fn noise_bound(&self) -> Option<f64> {
        None
    }

    fn control_layout(&self) -> ControlLayout {
        ControlLayout::open_loop(self.control_dim())
    }

    /// Constant state Jacobian, when the drift is affine in the state.
    fn linear_state_matrix(&self) -> Option<DMatrix<f64>> {
        None
    }
}

fn fd_step(v: f64) -> f64 {
    1e-6 * v.abs().max(1.0)
}

/// Central-difference state Jacobian of the drift.
pub fn fd_state_jacobian<M: SystemModel + ?Sized>(
    model: &M,
    x: &[f64],
    u: &[f64],
    t: f64,
) -> DMatrix<f64> {
    let n = model.state_dim();
    let mut jac = DMatrix::zeros(n, x.len());
    let mut xp: Buf = SmallVec::from_slice(x);
    let mut fp: Buf = smallvec![0.0; n];
    let mut fm: Buf = smallvec![0.0; n];
    for j in 0..x.len() {
        let h = fd_step(x[j]);
        xp[j] = x[j] + h;
        model.drift(&xp, u, t, &mut fp);
        xp[j] = x[j] - h;
        model.drift(&xp, u, t, &mut fm);
        xp[j] = x[j];
        for i in 0..n {
            jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    jac
}

/// Central-difference control Jacobian of the drift.
pub fn fd_control_jacobian<M: SystemModel + ?Sized>(
    model: &M,
    x: &[f64],
    u: &[f64],
    t: f64,
) -> DMatrix<f64> {
    let n = model.state_dim();
    let mut jac = DMatrix::zeros(n, u.len());
    let mut up: Buf = SmallVec::from_slice(u);
    let mut fp: Buf = smallvec![0.0; n];
    let mut fm: Buf = smallvec![0.0; n];
    for j in 0..u.len() {
        let h = fd_step(u[j]);
        up[j] = u[j] + h;
        model.drift(x, &up, t, &mut fp);
        up[j] = u[j] - h;
        model.drift(x, &up, t, &mut fm);
        up[j] = u[j];
        for i in 0..n {
            jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    jac
}

fn max_eigen_ggt(g: &DMatrix<f64>) -> f64 {
    let ggt = g * g.transpose();
    SymmetricEigen::new(ggt).eigenvalues.max().max(0.0)
}

/// `dX = (A X + B u) dt + G dW` with constant matrices.
#[derive(Debug, Clone)]
pub struct LinearSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub g: DMatrix<f64>,
}

impl LinearSystem {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, g: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if n == 0 || a.ncols() != n {
            return Err(Error::InvalidParameter("A must be square and non-empty".into()));
        }
        if b.nrows() != n || b.ncols() == 0 {
            return Err(Error::DimensionMismatch {
                what: "rows of B",
                expected: n,
                got: b.nrows(),
            });
        }
        if g.nrows() != n || g.ncols() == 0 {
            return Err(Error::DimensionMismatch {
                what: "rows of G",
                expected: n,
                got: g.nrows(),
            });
        }
        Ok(Self { a, b, g })
    }
}

impl SystemModel for LinearSystem {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    fn control_dim(&self) -> usize {
        self.b.ncols()
    }

    fn noise_dim(&self) -> usize {
        self.g.ncols()
    }

    fn drift(&self, x: &[f64], u: &[f64], _t: f64, out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (j, xj) in x.iter().enumerate() {
                acc += self.a[(i, j)] * xj;
            }
            for (j, uj) in u.iter().enumerate() {
                acc += self.b[(i, j)] * uj;
            }
            *o = acc;
        }
    }

    fn diffusion(&self, _x: &[f64], _t: f64) -> DMatrix<f64> {
        self.g.clone()
    }

    fn apply_diffusion(&self, _x: &[f64], _t: f64, w: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = w.iter().enumerate().map(|(j, wj)| self.g[(i, j)] * wj).sum();
        }
    }

    fn drift_jacobian(&self, _x: &[f64], _u: &[f64], _t: f64) -> DMatrix<f64> {
        self.a.clone()
    }

    fn control_jacobian(&self, _x: &[f64], _u: &[f64], _t: f64) -> DMatrix<f64> {
        self.b.clone()
    }

    fn noise_bound(&self) -> Option<f64> {
        Some(max_eigen_ggt(&self.g).sqrt())
    }

    fn linear_state_matrix(&self) -> Option<DMatrix<f64>> {
        Some(self.a.clone())
    }
}

/// Scalar `dX = (c X + u) dt + sigma dW`.
pub fn make_scalar_linear(c: f64, sigma: f64) -> Result<LinearSystem> {
    if !c.is_finite() || !sigma.is_finite() || sigma < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "scalar linear system needs finite c and sigma >= 0 (c = {c}, sigma = {sigma})"
        )));
    }
    LinearSystem::new(
        DMatrix::from_element(1, 1, c),
        DMatrix::from_element(1, 1, 1.0),
        DMatrix::from_element(1, 1, sigma),
    )
}

/// Kinematic unicycle with state `[p_x, p_y, theta]` and input `[v, omega]`.
#[derive(Debug, Clone)]
pub struct UnicyclePlant {
    pub noise_scale: f64,
}

impl SystemModel for UnicyclePlant {
    fn state_dim(&self) -> usize {
        3
    }

    fn control_dim(&self) -> usize {
        2
    }

    fn noise_dim(&self) -> usize {
        3
    }

    fn drift(&self, x: &[f64], u: &[f64], _t: f64, out: &mut [f64]) {
        let (s, c) = x[2].sin_cos();
        out[0] = u[0] * c;
        out[1] = u[0] * s;
        out[2] = u[1];
    }

    fn diffusion(&self, _x: &[f64], _t: f64) -> DMatrix<f64> {
        DMatrix::identity(3, 3) * self.noise_scale
    }

    fn apply_diffusion(&self, _x: &[f64], _t: f64, w: &[f64], out: &mut [f64]) {
        for (o, wi) in out.iter_mut().zip(w) {
            *o = self.noise_scale * wi;
        }
    }

    fn drift_jacobian(&self, x: &[f64], u: &[f64], _t: f64) -> DMatrix<f64> {
        let (s, c) = x[2].sin_cos();
        let mut j = DMatrix::zeros(3, 3);
        j[(0, 2)] = -u[0] * s;
        j[(1, 2)] = u[0] * c;
        j
    }

    fn control_jacobian(&self, x: &[f64], _u: &[f64], _t: f64) -> DMatrix<f64> {
        let (s, c) = x[2].sin_cos();
        DMatrix::from_row_slice(3, 2, &[c, 0.0, s, 0.0, 0.0, 1.0])
    }

    fn noise_bound(&self) -> Option<f64> {
        Some(self.noise_scale.abs())
    }
}

/// Partial derivatives of a feedback law with respect to its three arguments.
pub struct FeedbackJacobians {
    pub state: DMatrix<f64>,
    pub reference: DMatrix<f64>,
    pub feedforward: DMatrix<f64>,
}

/// A feedback law `u = k(x, x_ref, u_ff, t)` closing the loop around a plant.
pub trait Feedback: Send + Sync {
    fn feedforward_dim(&self) -> usize;
    fn input(&self, x: &[f64], x_ref: &[f64], u_ff: &[f64], t: f64, out: &mut [f64]);
    fn jacobians(&self, x: &[f64], x_ref: &[f64], u_ff: &[f64], t: f64) -> FeedbackJacobians;
    /// Named gains for provenance records.
    fn gains(&self) -> Vec<(&'static str, Vec<f64>)>;
    /// `dk/dx` when the law is affine in the state.
    fn linear_state_gain(&self) -> Option<DMatrix<f64>> {
        None
    }
}

/// `u = u_ff + K (x - x_ref)`.
#[derive(Debug, Clone)]
pub struct LinearFeedback {
    pub k: DMatrix<f64>,
}

impl Feedback for LinearFeedback {
    fn feedforward_dim(&self) -> usize {
        self.k.nrows()
    }

    fn input(&self, x: &[f64], x_ref: &[f64], u_ff: &[f64], _t: f64, out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            let mut acc = u_ff[i];
            for j in 0..x.len() {
                acc += self.k[(i, j)] * (x[j] - x_ref[j]);
            }
            *o = acc;
        }
    }

    fn jacobians(&self, _x: &[f64], _x_ref: &[f64], _u_ff: &[f64], _t: f64) -> FeedbackJacobians {
        let p = self.k.nrows();
        FeedbackJacobians {
            state: self.k.clone(),
            reference: -&self.k,
            feedforward: DMatrix::identity(p, p),
        }
    }

    fn gains(&self) -> Vec<(&'static str, Vec<f64>)> {
        let rows: Vec<f64> = self.k.transpose().iter().copied().collect();
        vec![("K", rows)]
    }

    fn linear_state_gain(&self) -> Option<DMatrix<f64>> {
        Some(self.k.clone())
    }
}

/// Unicycle tracking law with body-frame position errors and heading error.
#[derive(Debug, Clone, Copy)]
pub struct UnicycleTracking {
    pub kx: f64,
    pub ky: f64,
    pub ktheta: f64,
}

impl Feedback for UnicycleTracking {
    fn feedforward_dim(&self) -> usize {
        2
    }

    fn input(&self, x: &[f64], x_ref: &[f64], u_ff: &[f64], _t: f64, out: &mut [f64]) {
        let (s, c) = x[2].sin_cos();
        let ex = x_ref[0] - x[0];
        let ey = x_ref[1] - x[1];
        out[0] = u_ff[0] + self.kx * (c * ex + s * ey);
        out[1] = u_ff[1] + self.ky * (-s * ex + c * ey) + self.ktheta * (x_ref[2] - x[2]);
    }

    fn jacobians(&self, x: &[f64], x_ref: &[f64], _u_ff: &[f64], _t: f64) -> FeedbackJacobians {
        let (s, c) = x[2].sin_cos();
        let ex = x_ref[0] - x[0];
        let ey = x_ref[1] - x[1];
        let (kx, ky, kt) = (self.kx, self.ky, self.ktheta);
        let state = DMatrix::from_row_slice(
            2,
            3,
            &[
                -kx * c,
                -kx * s,
                kx * (-s * ex + c * ey),
                ky * s,
                -ky * c,
                ky * (-c * ex - s * ey) - kt,
            ],
        );
        let reference =
            DMatrix::from_row_slice(2, 3, &[kx * c, kx * s, 0.0, -ky * s, ky * c, kt]);
        FeedbackJacobians {
            state,
            reference,
            feedforward: DMatrix::identity(2, 2),
        }
    }

    fn gains(&self) -> Vec<(&'static str, Vec<f64>)> {
        vec![
            ("K_x", vec![self.kx]),
            ("K_y", vec![self.ky]),
            ("K_theta", vec![self.ktheta]),
        ]
    }
}

/// A plant with a feedback law; the control is `[x_ref, u_ff]`.
#[derive(Debug, Clone)]
pub struct ClosedLoop<P, F> {
    pub plant: P,
    pub feedback: F,
}

impl<P: SystemModel, F: Feedback> ClosedLoop<P, F> {
    pub fn new(plant: P, feedback: F) -> Self {
        Self { plant, feedback }
    }

    fn plant_input(&self, x: &[f64], u: &[f64], t: f64) -> Buf {
        let n = self.plant.state_dim();
        let mut v: Buf = smallvec![0.0; self.plant.control_dim()];
        self.feedback.input(x, &u[..n], &u[n..], t, &mut v);
        v
    }
}

impl<P: SystemModel, F: Feedback> SystemModel for ClosedLoop<P, F> {
    fn state_dim(&self) -> usize {
        self.plant.state_dim()
    }

    fn control_dim(&self) -> usize {
        self.plant.state_dim() + self.feedback.feedforward_dim()
    }

    fn noise_dim(&self) -> usize {
        self.plant.noise_dim()
    }

    fn drift(&self, x: &[f64], u: &[f64], t: f64, out: &mut [f64]) {
        let v = self.plant_input(x, u, t);
        self.plant.drift(x, &v, t, out);
    }

    fn diffusion(&self, x: &[f64], t: f64) -> DMatrix<f64> {
        self.plant.diffusion(x, t)
    }

    fn apply_diffusion(&self, x: &[f64], t: f64, w: &[f64], out: &mut [f64]) {
        self.plant.apply_diffusion(x, t, w, out)
    }

    fn drift_jacobian(&self, x: &[f64], u: &[f64], t: f64) -> DMatrix<f64> {
        let n = self.plant.state_dim();
        let v = self.plant_input(x, u, t);
        let fb = self.feedback.jacobians(x, &u[..n], &u[n..], t);
        self.plant.drift_jacobian(x, &v, t) + self.plant.control_jacobian(x, &v, t) * fb.state
    }

    fn control_jacobian(&self, x: &[f64], u: &[f64], t: f64) -> DMatrix<f64> {
        let n = self.plant.state_dim();
        let v = self.plant_input(x, u, t);
        let fb = self.feedback.jacobians(x, &u[..n], &u[n..], t);
        let bu = self.plant.control_jacobian(x, &v, t);
        let mut jac = DMatrix::zeros(n, self.control_dim());
        jac.columns_mut(0, n).copy_from(&(&bu * fb.reference));
        jac.columns_mut(n, fb.feedforward.ncols())
            .copy_from(&(&bu * fb.feedforward));
        jac
    }

    fn noise_bound(&self) -> Option<f64> {
        self.plant.noise_bound()
    }

    fn control_layout(&self) -> ControlLayout {
        ControlLayout {
            reference_dim: self.plant.state_dim(),
            feedforward_dim: self.feedback.feedforward_dim(),
        }
    }

    fn linear_state_matrix(&self) -> Option<DMatrix<f64>> {
        let a = self.plant.linear_state_matrix()?;
        let kx = self.feedback.linear_state_gain()?;
        // Plant input Jacobian must be constant too; linear plants expose it at any point.
        let n = self.plant.state_dim();
        let zero_x = vec![0.0; n];
        let zero_u = vec![0.0; self.plant.control_dim()];
        let b = self.plant.control_jacobian(&zero_x, &zero_u, 0.0);
        Some(a + b * kx)
    }
}

pub type DoubleIntegrator = ClosedLoop<LinearSystem, LinearFeedback>;
pub type Unicycle = ClosedLoop<UnicyclePlant, UnicycleTracking>;

/// 3-D double integrator `[p; v]` with `u = u_ff + K (x - x_ref)` and
/// diffusion `noise_scale * I_6`.
pub fn make_double_integrator(mass: f64, k: DMatrix<f64>, noise_scale: f64) -> Result<DoubleIntegrator> {
    if !(mass > 0.0) || !mass.is_finite() {
        return Err(Error::InvalidParameter(format!("mass must be positive, got {mass}")));
    }
    if k.nrows() != 3 || k.ncols() != 6 {
        return Err(Error::InvalidParameter(format!(
            "gain must be 3x6, got {}x{}",
            k.nrows(),
            k.ncols()
        )));
    }
    let mut a = DMatrix::zeros(6, 6);
    let mut b = DMatrix::zeros(6, 3);
    for i in 0..3 {
        a[(i, i + 3)] = 1.0;
        b[(i + 3, i)] = 1.0 / mass;
    }
    let plant = LinearSystem::new(a, b, DMatrix::identity(6, 6) * noise_scale)?;
    Ok(ClosedLoop::new(plant, LinearFeedback { k }))
}

/// `K = [kp I_3, kd I_3]` for the double integrator.
pub fn double_integrator_gain(kp: f64, kd: f64) -> DMatrix<f64> {
    let mut k = DMatrix::zeros(3, 6);
    for i in 0..3 {
        k[(i, i)] = kp;
        k[(i, i + 3)] = kd;
    }
    k
}

/// Unicycle with the tracking controller and diffusion `noise_scale * I_3`.
pub fn make_unicycle(kx: f64, ky: f64, ktheta: f64, noise_scale: f64) -> Result<Unicycle> {
    if ![kx, ky, ktheta, noise_scale].iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidParameter("unicycle gains must be finite".into()));
    }
    Ok(ClosedLoop::new(
        UnicyclePlant { noise_scale },
        UnicycleTracking { kx, ky, ktheta },
    ))
}

/// Piecewise-linear curve through knot values, held constant outside its knots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    times: Vec<f64>,
    values: Vec<Vec<f64>>,
}

impl Curve {
    pub fn new(times: Vec<f64>, values: Vec<Vec<f64>>) -> Result<Self> {
        if times.is_empty() || times.len() != values.len() {
            return Err(Error::InvalidParameter(
                "curve needs one value per knot and at least one knot".into(),
            ));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidParameter("curve knots must be strictly increasing".into()));
        }
        let dim = values[0].len();
        if values.iter().any(|v| v.len() != dim) {
            return Err(Error::InvalidParameter("curve values must share one dimension".into()));
        }
        Ok(Self { times, values })
    }

    pub fn constant(value: Vec<f64>) -> Self {
        Self {
            times: vec![0.0],
            values: vec![value],
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self::constant(vec![0.0; dim])
    }

    /// Straight line from `a` at t = 0 to `b` at t = `horizon`.
    pub fn line(a: Vec<f64>, b: Vec<f64>, horizon: f64) -> Result<Self> {
        Self::new(vec![0.0, horizon], vec![a, b])
    }

    pub fn dim(&self) -> usize {
        self.values[0].len()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn eval_into(&self, t: f64, out: &mut [f64]) {
        let last = self.times.len() - 1;
        if t <= self.times[0] || last == 0 {
            out.copy_from_slice(&self.values[0]);
            return;
        }
        if t >= self.times[last] {
            out.copy_from_slice(&self.values[last]);
            return;
        }
        let k = self.times.partition_point(|&s| s <= t) - 1;
        let (t0, t1) = (self.times[k], self.times[k + 1]);
        let w = (t - t0) / (t1 - t0);
        for ((o, a), b) in out.iter_mut().zip(&self.values[k]).zip(&self.values[k + 1]) {
            *o = a + w * (b - a);
        }
    }

    pub fn eval(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.eval_into(t, &mut out);
        out
    }
}

/// States and controls sampled on a time grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub grid: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub controls: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn new(grid: Vec<f64>, states: Vec<Vec<f64>>, controls: Vec<Vec<f64>>) -> Result<Self> {
        if grid.is_empty() || grid.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidParameter("trajectory grid must be strictly increasing".into()));
        }
        if states.len() != grid.len() || controls.len() != grid.len() {
            return Err(Error::DimensionMismatch {
                what: "trajectory rows",
                expected: grid.len(),
                got: states.len().min(controls.len()),
            });
        }
        Ok(Self {
            grid,
            states,
            controls,
        })
    }

    pub fn horizon(&self) -> f64 {
        *self.grid.last().unwrap()
    }

    pub fn final_state(&self) -> &[f64] {
        self.states.last().unwrap()
    }

    /// The control knots as a piecewise-linear curve.
    pub fn control_curve(&self) -> Curve {
        Curve {
            times: self.grid.clone(),
            values: self.controls.clone(),
        }
    }
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() || grid[0] != 0.0 {
        return Err(Error::InvalidParameter("time grid must start at 0".into()));
    }
    if grid.windows(2).any(|w| !(w[1] > w[0])) || grid.iter().any(|t| !t.is_finite()) {
        return Err(Error::InvalidParameter("time grid must be strictly increasing".into()));
    }
    Ok(())
}

fn check_dims<M: SystemModel + ?Sized>(model: &M, x0: &[f64], controls: &Curve) -> Result<()> {
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

struct Rk4Scratch {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
    u: Vec<f64>,
}

impl Rk4Scratch {
    fn new(n: usize, p: usize) -> Self {
        Self {
            k1: vec![0.0; n],
            k2: vec![0.0; n],
            k3: vec![0.0; n],
            k4: vec![0.0; n],
            tmp: vec![0.0; n],
            u: vec![0.0; p],
        }
    }
}

fn rk4_step<M: SystemModel + ?Sized>(
    model: &M,
    controls: &Curve,
    x: &mut [f64],
    t: f64,
    h: f64,
    s: &mut Rk4Scratch,
) {
    controls.eval_into(t, &mut s.u);
    model.drift(x, &s.u, t, &mut s.k1);
    controls.eval_into(t + 0.5 * h, &mut s.u);
    for i in 0..x.len() {
        s.tmp[i] = x[i] + 0.5 * h * s.k1[i];
    }
    model.drift(&s.tmp, &s.u, t + 0.5 * h, &mut s.k2);
    for i in 0..x.len() {
        s.tmp[i] = x[i] + 0.5 * h * s.k2[i];
    }
    model.drift(&s.tmp, &s.u, t + 0.5 * h, &mut s.k3);
    controls.eval_into(t + h, &mut s.u);
    for i in 0..x.len() {
        s.tmp[i] = x[i] + h * s.k3[i];
    }
    model.drift(&s.tmp, &s.u, t + h, &mut s.k4);
    for i in 0..x.len() {
        x[i] += h / 6.0 * (s.k1[i] + 2.0 * s.k2[i] + 2.0 * s.k3[i] + s.k4[i]);
    }
}

/// Integrates the noise-free system with classical RK4.
///
/// Each grid interval is split into equal substeps no longer than `1e-3 T`.
pub fn integrate_deterministic<M: SystemModel + ?Sized>(
    model: &M,
    x0: &[f64],
    controls: &Curve,
    grid: &[f64],
) -> Result<Trajectory> {
    integrate_with_substep(model, x0, controls, grid, 1e-3)
}

pub(crate) fn integrate_with_substep<M: SystemModel + ?Sized>(
    model: &M,
    x0: &[f64],
    controls: &Curve,
    grid: &[f64],
    relative_substep: f64,
) -> Result<Trajectory> {
    check_grid(grid)?;
    check_dims(model, x0, controls)?;
    let horizon = *grid.last().unwrap();
    let hmax = relative_substep * horizon;
    let mut scratch = Rk4Scratch::new(x0.len(), model.control_dim());
    let mut x = x0.to_vec();
    let mut states = Vec::with_capacity(grid.len());
    states.push(x.clone());
    for w in grid.windows(2) {
        let span = w[1] - w[0];
        let substeps = ((span / hmax) - 1e-9).ceil().max(1.0) as usize;
        let h = span / substeps as f64;
        for k in 0..substeps {
            let t = w[0] + k as f64 * h;
            rk4_step(model, controls, &mut x, t, h, &mut scratch);
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence { time: t + h });
            }
        }
        states.push(x.clone());
    }
    let controls = grid.iter().map(|&t| controls.eval(t)).collect();
    Trajectory::new(grid.to_vec(), states, controls)
}

/// Independent random stream for ensemble member `index` under `seed`.
pub fn trial_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Uniform simulation grid `t_k = k h`, `k = 0..=steps`, covering `[0, horizon]`.
///
/// The step is the largest value not exceeding the requested one that divides the horizon.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepGrid {
    pub steps: usize,
    pub h: f64,
}

impl StepGrid {
    pub fn new(horizon: f64, step: f64) -> Result<Self> {
        if !(step > 0.0) || !(horizon > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "simulation step and horizon must be positive (step = {step}, horizon = {horizon})"
            )));
        }
        let steps = ((horizon / step) - 1e-9).ceil().max(1.0) as usize;
        Ok(Self {
            steps,
            h: horizon / steps as f64,
        })
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.h
    }

    pub fn horizon(&self) -> f64 {
        self.steps as f64 * self.h
    }

    /// Index of the grid point nearest to `t`.
    pub fn nearest(&self, t: f64) -> usize {
        ((t / self.h).round() as usize).min(self.steps)
    }
}

/// Control values at every point of a step grid, row-major `(steps + 1) x p`.
pub(crate) fn control_table(controls: &Curve, grid: &StepGrid) -> Vec<f64> {
    let p = controls.dim();
    let mut table = vec![0.0; (grid.steps + 1) * p];
    for k in 0..=grid.steps {
        controls.eval_into(grid.time(k), &mut table[k * p..(k + 1) * p]);
    }
    table
}

/// Euler-Maruyama path on a step grid; `visit(k, t_k, x_k)` sees every point.
///
/// With `rng = None` the noise term is dropped, giving the explicit Euler path
/// of the deterministic twin on the same grid.
pub(crate) fn euler_maruyama<M, V>(
    model: &M,
    x0: &[f64],
    table: &[f64],
    grid: &StepGrid,
    mut rng: Option<&mut ChaCha8Rng>,
    mut visit: V,
) -> Result<()>
where
    M: SystemModel + ?Sized,
    V: FnMut(usize, f64, &[f64]),
{
    let n = model.state_dim();
    let p = model.control_dim();
    let m = model.noise_dim();
    let sqrt_h = grid.h.sqrt();
    let mut x: Buf = SmallVec::from_slice(x0);
    let mut f: Buf = smallvec![0.0; n];
    let mut gw: Buf = smallvec![0.0; n];
    let mut w: Buf = smallvec![0.0; m];
    visit(0, 0.0, &x);
    for k in 0..grid.steps {
        let t = grid.time(k);
        let u = &table[k * p..(k + 1) * p];
        model.drift(&x, u, t, &mut f);
        match rng.as_deref_mut() {
            Some(rng) => {
                for wi in w.iter_mut() {
                    let xi: f64 = rng.sample(StandardNormal);
                    *wi = xi * sqrt_h;
                }
                model.apply_diffusion(&x, t, &w, &mut gw);
                for i in 0..n {
                    x[i] += f[i] * grid.h + gw[i];
                }
            }
            None => {
                for i in 0..n {
                    x[i] += f[i] * grid.h;
                }
            }
        }
        let t_next = grid.time(k + 1);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { time: t_next });
        }
        visit(k + 1, t_next, &x);
    }
    Ok(())
}

/// One Euler-Maruyama sample path recorded at the nearest simulation step to each grid time.
pub fn simulate_stochastic<M: SystemModel + ?Sized>(
    model: &M,
    x0: &[f64],
    controls: &Curve,
    grid: &[f64],
    step: f64,
    seed: u64,
) -> Result<Trajectory> {
    simulate_member(model, x0, controls, grid, step, seed, 0)
}

/// Like [`simulate_stochastic`] for ensemble member `index`.
pub fn simulate_member<M: SystemModel + ?Sized>(
    model: &M,
    x0: &[f64],
    controls: &Curve,
    grid: &[f64],
    step: f64,
    seed: u64,
    index: u64,
) -> Result<Trajectory> {
    check_grid(grid)?;
    check_dims(model, x0, controls)?;
    if grid.len() == 1 {
        return Trajectory::new(vec![0.0], vec![x0.to_vec()], vec![controls.eval(0.0)]);
    }
    let steps = StepGrid::new(*grid.last().unwrap(), step)?;
    let table = control_table(controls, &steps);
    let wanted: Vec<usize> = grid.iter().map(|&t| steps.nearest(t)).collect();
    let mut states = vec![Vec::new(); grid.len()];
    let mut next = 0;
    let mut rng = trial_rng(seed, index);
    euler_maruyama(model, x0, &table, &steps, Some(&mut rng), |k, _t, x| {
        while next < wanted.len() && wanted[next] == k {
            states[next] = x.to_vec();
            next += 1;
        }
    })?;
    let controls = grid.iter().map(|&t| controls.eval(t)).collect();
    Trajectory::new(grid.to_vec(), states, controls)
}

/// Uniform grid of `points` times on `[0, horizon]`.
pub fn uniform_grid(horizon: f64, intervals: usize) -> Vec<f64> {
    let intervals = intervals.max(1);
    (0..=intervals)
        .map(|k| horizon * k as f64 / intervals as f64)
        .collect()
}
