//! Augmented-Lagrangian method with a modified-Newton inner solver.
//!
//! The inner Hessian is assembled from central differences of the analytic
//! gradient. When the program declares stages that only couple to their
//! neighbours, columns three stages apart share one difference and the
//! Hessian is banded, so a banded Cholesky factorisation suffices.

use serde::{Deserialize, Serialize};

/// Smooth nonlinear program `min f(z)` s.t. `h(z) = 0`, `g(z) <= 0`.
pub trait Nlp: Sync {
    fn num_vars(&self) -> usize;
    fn num_eq(&self) -> usize;
    fn num_ineq(&self) -> usize;
    fn objective(&self, z: &[f64]) -> f64;
    fn objective_grad(&self, z: &[f64], grad: &mut [f64]);
    fn constraints(&self, z: &[f64], eq: &mut [f64], ineq: &mut [f64]);
    /// Sets `out = J_h^T w_eq + J_g^T w_ineq`.
    fn jacobian_transpose_product(&self, z: &[f64], w_eq: &[f64], w_ineq: &[f64], out: &mut [f64]);
    /// Stage index of every variable, if objective and constraints only couple neighbouring stages.
    fn stages(&self) -> Option<Vec<usize>> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverOptions {
    pub feas_tol: f64,
    pub opt_tol: f64,
    pub max_outer: usize,
    pub max_inner: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            feas_tol: 1e-6,
            opt_tol: 1e-4,
            max_outer: 30,
            max_inner: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    FeasibleSuboptimal,
    Infeasible,
    MaxIter,
}

impl SolveStatus {
    pub fn is_feasible(self) -> bool {
        matches!(self, SolveStatus::Optimal | SolveStatus::FeasibleSuboptimal)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverReport {
    pub status: SolveStatus,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    /// `max(|h|_inf, max(g, 0))` at the returned point.
    pub constraint_violation: f64,
    pub kkt_residual: f64,
    pub penalty: f64,
    pub objective: f64,
}

const RHO_INIT: f64 = 10.0;
const RHO_MAX: f64 = 1e8;

struct AugLag<'a, P: Nlp + ?Sized> {
    nlp: &'a P,
    lambda: Vec<f64>,
    mu: Vec<f64>,
    rho: f64,
    eq: Vec<f64>,
    ineq: Vec<f64>,
    w_eq: Vec<f64>,
    w_ineq: Vec<f64>,
    jt: Vec<f64>,
}

impl<'a, P: Nlp + ?Sized> AugLag<'a, P> {
    fn new(nlp: &'a P) -> Self {
        let (m, q, n) = (nlp.num_eq(), nlp.num_ineq(), nlp.num_vars());
        Self {
            nlp,
            lambda: vec![0.0; m],
            mu: vec![0.0; q],
            rho: RHO_INIT,
            eq: vec![0.0; m],
            ineq: vec![0.0; q],
            w_eq: vec![0.0; m],
            w_ineq: vec![0.0; q],
            jt: vec![0.0; n],
        }
    }

    fn value(&mut self, z: &[f64]) -> f64 {
        self.nlp.constraints(z, &mut self.eq, &mut self.ineq);
        let rho = self.rho;
        let mut v = self.nlp.objective(z);
        for (h, l) in self.eq.iter().zip(&self.lambda) {
            v += l * h + 0.5 * rho * h * h;
        }
        for (g, m) in self.ineq.iter().zip(&self.mu) {
            let s = (m + rho * g).max(0.0);
            v += (s * s - m * m) / (2.0 * rho);
        }
        v
    }

    /// Value and gradient; the gradient uses the multiplier estimates implied at `z`.
    fn value_grad(&mut self, z: &[f64], grad: &mut [f64]) -> f64 {
        let v = self.value(z);
        let rho = self.rho;
        for i in 0..self.eq.len() {
            self.w_eq[i] = self.lambda[i] + rho * self.eq[i];
        }
        for j in 0..self.ineq.len() {
            self.w_ineq[j] = (self.mu[j] + rho * self.ineq[j]).max(0.0);
        }
        self.nlp.objective_grad(z, grad);
        self.nlp
            .jacobian_transpose_product(z, &self.w_eq, &self.w_ineq, &mut self.jt);
        for (g, j) in grad.iter_mut().zip(&self.jt) {
            *g += j;
        }
        v
    }

    fn violation(&self) -> f64 {
        let e = self.eq.iter().fold(0.0f64, |a, h| a.max(h.abs()));
        self.ineq.iter().fold(e, |a, g| a.max(*g))
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |a, x| a.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct InnerOutcome {
    iterations: usize,
    converged: bool,
}

/// Column groups for the difference Hessian and the banded layout they imply.
struct HessianPattern {
    /// Variable order with stages contiguous.
    order: Vec<usize>,
    /// Position of each variable in `order`.
    pos: Vec<usize>,
    /// Each group lists `(stage, variable)` pairs differenced together.
    groups: Vec<Vec<(usize, usize)>>,
    /// Stage of each variable (all zero for unstructured programs).
    stage: Vec<usize>,
    structured: bool,
    bandwidth: usize,
}

impl HessianPattern {
    fn new(nvars: usize, stages: Option<Vec<usize>>) -> Self {
        let Some(stage) = stages.filter(|s| s.len() == nvars && nvars > 0) else {
            return Self {
                order: (0..nvars).collect(),
                pos: (0..nvars).collect(),
                groups: (0..nvars).map(|j| vec![(0, j)]).collect(),
                stage: vec![0; nvars],
                structured: false,
                bandwidth: nvars.saturating_sub(1),
            };
        };
        let count = stage.iter().max().unwrap() + 1;
        let mut members = vec![Vec::new(); count];
        for (v, &s) in stage.iter().enumerate() {
            members[s].push(v);
        }
        let order: Vec<usize> = members.iter().flatten().copied().collect();
        let mut pos = vec![0; nvars];
        for (i, &v) in order.iter().enumerate() {
            pos[v] = i;
        }
        let width = members.iter().map(Vec::len).max().unwrap_or(0);
        let mut groups = Vec::new();
        for color in 0..3 {
            for j in 0..width {
                let g: Vec<(usize, usize)> = (color..count)
                    .step_by(3)
                    .filter_map(|s| members[s].get(j).map(|&v| (s, v)))
                    .collect();
                if !g.is_empty() {
                    groups.push(g);
                }
            }
        }
        let mut bandwidth = 0;
        let mut start = 0;
        for s in 0..count {
            let span = members[s].len() + members.get(s + 1).map_or(0, Vec::len);
            bandwidth = bandwidth.max(span.saturating_sub(1));
            start += members[s].len();
        }
        debug_assert_eq!(start, nvars);
        Self {
            order,
            pos,
            groups,
            stage,
            structured: true,
            bandwidth,
        }
    }
}

/// Lower band of a symmetric matrix in the permuted order, `a[i][i - j]`.
struct Band {
    n: usize,
    b: usize,
    a: Vec<f64>,
}

impl Band {
    fn new(n: usize, b: usize) -> Self {
        Self {
            n,
            b,
            a: vec![0.0; n * (b + 1)],
        }
    }

    fn at(&self, i: usize, j: usize) -> f64 {
        self.a[i * (self.b + 1) + (i - j)]
    }

    fn at_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        &mut self.a[i * (self.b + 1) + (i - j)]
    }

    /// Cholesky factor of `self + tau I`, or `None` if not positive definite.
    fn cholesky(&self, tau: f64) -> Option<Band> {
        let (n, b) = (self.n, self.b);
        let mut l = Band::new(n, b);
        for i in 0..n {
            let lo = i.saturating_sub(b);
            for j in lo..=i {
                let mut sum = self.at(i, j) + if i == j { tau } else { 0.0 };
                for k in lo.max(j.saturating_sub(b))..j {
                    sum -= l.at(i, k) * l.at(j, k);
                }
                if i == j {
                    if !(sum > 0.0) {
                        return None;
                    }
                    *l.at_mut(i, i) = sum.sqrt();
                } else {
                    *l.at_mut(i, j) = sum / l.at(j, j);
                }
            }
        }
        Some(l)
    }

    /// Solves `L L^T x = r` in place.
    fn solve(&self, r: &mut [f64]) {
        let (n, b) = (self.n, self.b);
        for i in 0..n {
            let mut s = r[i];
            for k in i.saturating_sub(b)..i {
                s -= self.at(i, k) * r[k];
            }
            r[i] = s / self.at(i, i);
        }
        for i in (0..n).rev() {
            let mut s = r[i];
            for k in i + 1..(i + b + 1).min(n) {
                s -= self.at(k, i) * r[k];
            }
            r[i] = s / self.at(i, i);
        }
    }
}

fn difference_hessian<P: Nlp + ?Sized>(al: &mut AugLag<P>, z: &[f64], pat: &HessianPattern) -> Band {
    let n = z.len();
    let mut band = Band::new(n, pat.bandwidth);
    let mut zp = z.to_vec();
    let mut gp = vec![0.0; n];
    let mut gm = vec![0.0; n];
    let step = |v: f64| 1e-5 * v.abs().max(1.0);
    let stages = pat.stage.iter().max().map_or(0, |m| m + 1);
    let mut owner = vec![usize::MAX; stages];
    for group in &pat.groups {
        for &(_, v) in group {
            zp[v] = z[v] + step(z[v]);
        }
        al.value_grad(&zp, &mut gp);
        for &(_, v) in group {
            zp[v] = z[v] - step(z[v]);
        }
        al.value_grad(&zp, &mut gm);
        for &(_, v) in group {
            zp[v] = z[v];
        }
        if pat.structured {
            for &(s, v) in group {
                owner[s] = v;
            }
        }
        for i in 0..n {
            let col = if pat.structured {
                let si = pat.stage[i];
                // exactly one of si - 1, si, si + 1 has the group's colour
                (si.saturating_sub(1)..=si + 1)
                    .filter_map(|s| owner.get(s).copied())
                    .find(|&v| v != usize::MAX)
            } else {
                Some(group[0].1)
            };
            let Some(j) = col else { continue };
            let (pi, pj) = (pat.pos[i], pat.pos[j]);
            if pi.abs_diff(pj) > pat.bandwidth {
                continue;
            }
            let h = (gp[i] - gm[i]) / (2.0 * step(z[j]));
            // each off-diagonal entry is seen twice; average the two estimates
            let (r, c) = if pi >= pj { (pi, pj) } else { (pj, pi) };
            *band.at_mut(r, c) += if r == c { h } else { 0.5 * h };
        }
        if pat.structured {
            for &(s, _) in group {
                owner[s] = usize::MAX;
            }
        }
    }
    band
}

/// Modified Newton with Armijo backtracking on the augmented Lagrangian.
fn minimize<P: Nlp + ?Sized>(
    al: &mut AugLag<P>,
    z: &mut [f64],
    pat: &HessianPattern,
    tol: f64,
    max_iter: usize,
) -> InnerOutcome {
    let n = z.len();
    let mut grad = vec![0.0; n];
    let mut f = al.value_grad(z, &mut grad);
    let mut trial = vec![0.0; n];
    let mut trial_grad = vec![0.0; n];
    let mut dir = vec![0.0; n];
    for it in 0..max_iter {
        if inf_norm(&grad) <= tol {
            return InnerOutcome {
                iterations: it,
                converged: true,
            };
        }
        let hess = difference_hessian(al, z, pat);
        let diag: Vec<f64> = (0..n).map(|i| hess.at(i, i)).collect();
        let beta = 1e-8 * diag.iter().fold(1.0f64, |a, d| a.max(d.abs()));
        let min_diag = diag.iter().copied().fold(f64::INFINITY, f64::min);
        let mut tau = if min_diag > 0.0 { 0.0 } else { beta - min_diag };
        let factor = loop {
            if let Some(l) = hess.cholesky(tau) {
                break l;
            }
            tau = (2.0 * tau).max(beta);
        };
        for (i, &v) in pat.order.iter().enumerate() {
            dir[i] = -grad[v];
        }
        factor.solve(&mut dir);
        let mut d = vec![0.0; n];
        for (i, &v) in pat.order.iter().enumerate() {
            d[v] = dir[i];
        }
        let mut slope = dot(&grad, &d);
        if !(slope < 0.0) {
            d.iter_mut().zip(&grad).for_each(|(di, g)| *di = -g);
            slope = dot(&grad, &d);
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            for i in 0..n {
                trial[i] = z[i] + step * d[i];
            }
            let ft = al.value_grad(&trial, &mut trial_grad);
            if ft.is_finite() && ft <= f + 1e-4 * step * slope {
                accepted = Some(ft);
                break;
            }
            step *= 0.5;
        }
        let Some(ft) = accepted else {
            return InnerOutcome {
                iterations: it,
                converged: false,
            };
        };
        z.copy_from_slice(&trial);
        grad.copy_from_slice(&trial_grad);
        f = ft;
    }
    InnerOutcome {
        iterations: max_iter,
        converged: inf_norm(&grad) <= tol,
    }
}

/// Solves the program from `z0`; deterministic for fixed inputs.
pub fn solve<P: Nlp + ?Sized>(nlp: &P, z0: &[f64], opts: &SolverOptions) -> (Vec<f64>, SolverReport) {
    assert_eq!(z0.len(), nlp.num_vars(), "initial guess dimension");
    let mut al = AugLag::new(nlp);
    let pattern = HessianPattern::new(z0.len(), nlp.stages());
    let mut z = z0.to_vec();
    let mut grad = vec![0.0; z.len()];
    let mut inner_total = 0;
    let mut prev_violation = f64::INFINITY;
    let mut last_converged = false;
    let mut outer = 0;
    let mut kkt = f64::INFINITY;
    let mut violation = f64::INFINITY;
    while outer < opts.max_outer {
        outer += 1;
        let inner = minimize(&mut al, &mut z, &pattern, 0.5 * opts.opt_tol, opts.max_inner);
        inner_total += inner.iterations;
        last_converged = inner.converged;
        // Gradient of the augmented Lagrangian equals the Lagrangian gradient at the updated multipliers.
        al.value_grad(&z, &mut grad);
        violation = al.violation();
        let rho = al.rho;
        for (l, h) in al.lambda.iter_mut().zip(&al.eq) {
            *l += rho * h;
        }
        for (m, g) in al.mu.iter_mut().zip(&al.ineq) {
            *m = (*m + rho * g).max(0.0);
        }
        let complementarity = al
            .mu
            .iter()
            .zip(&al.ineq)
            .fold(0.0f64, |a, (m, g)| a.max(m.min(-g).abs()));
        kkt = inf_norm(&grad).max(complementarity);
        if violation <= opts.feas_tol && kkt <= opts.opt_tol {
            break;
        }
        if violation > opts.feas_tol && (violation > 0.25 * prev_violation || !inner.converged) {
            al.rho = (al.rho * 10.0).min(RHO_MAX);
        }
        prev_violation = violation;
    }
    let status = if violation > opts.feas_tol {
        SolveStatus::Infeasible
    } else if kkt <= opts.opt_tol {
        SolveStatus::Optimal
    } else if last_converged {
        SolveStatus::FeasibleSuboptimal
    } else {
        SolveStatus::MaxIter
    };
    let objective = nlp.objective(&z);
    let report = SolverReport {
        status,
        outer_iterations: outer,
        inner_iterations: inner_total,
        constraint_violation: violation,
        kkt_residual: kkt,
        penalty: al.rho,
        objective,
    };
    (z, report)
}
