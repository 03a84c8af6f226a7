//! Estimates of the contraction rate `c` with `mu(D_x f) <= c`.
//!
//! Three routes are offered: the Euclidean log-norm of a constant Jacobian, a
//! bisection on the Lyapunov inequality `A^T P + P A <= 2 c P` for linear
//! closed loops, and a grid maximum of the Euclidean log-norm over an
//! operating box for nonlinear closed loops.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::SystemModel;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContractionMethod {
    /// Declared by the user, not computed.
    Given,
    L2Measure,
    LmiBisection,
    Sampled,
}

/// Per-axis closed intervals for the sampled estimate.
///
/// The closed-loop Jacobian is evaluated at `x` in `state`, `x_ref = x + e`
/// with `e` in `error`, and `u_ff` in `feedforward`. Degenerate intervals
/// (`lo == hi`) contribute a single point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingDomain {
    pub state: Vec<[f64; 2]>,
    #[serde(default)]
    pub error: Vec<[f64; 2]>,
    #[serde(default)]
    pub feedforward: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContractionEstimate {
    pub c: f64,
    pub method: ContractionMethod,
    pub witness: Option<DMatrix<f64>>,
    pub domain: Option<SamplingDomain>,
    pub samples: usize,
}

impl ContractionEstimate {
    /// Condition number of the Lyapunov witness, if any.
    pub fn witness_condition(&self) -> Option<f64> {
        let p = self.witness.as_ref()?;
        let eig = SymmetricEigen::new(p.clone()).eigenvalues;
        Some(eig.max() / eig.min())
    }
}

fn require_square(j: &DMatrix<f64>) -> Result<()> {
    if j.nrows() != j.ncols() || j.nrows() == 0 {
        return Err(Error::DimensionMismatch {
            what: "square matrix columns",
            expected: j.nrows(),
            got: j.ncols(),
        });
    }
    Ok(())
}

fn symmetric_part(j: &DMatrix<f64>) -> DMatrix<f64> {
    (j + j.transpose()) * 0.5
}

/// Euclidean matrix measure `lambda_max((J + J^T) / 2)`.
pub fn matrix_measure_l2(j: &DMatrix<f64>) -> Result<f64> {
    require_square(j)?;
    Ok(SymmetricEigen::new(symmetric_part(j)).eigenvalues.max())
}

/// Outcome of one Lyapunov feasibility test.
#[derive(Debug, Clone, PartialEq)]
pub struct LyapunovCheck {
    pub feasible: bool,
    /// Symmetric positive-definite witness when feasible.
    pub p: Option<DMatrix<f64>>,
    /// The Lyapunov operator was singular: `c` sits on a sum of shifted eigenvalues.
    pub at_boundary: bool,
}

/// Solves `M^T P + P M = -I` for `M = A - c I` and tests `P > 0`.
///
/// A positive-definite solution exists iff `A - c I` is Hurwitz, which is the
/// condition for `A^T P + P A <= 2 c P` to admit some `P > 0`.
pub fn lyapunov_feasible(a: &DMatrix<f64>, c: f64) -> Result<LyapunovCheck> {
    require_square(a)?;
    let n = a.nrows();
    let m = a - DMatrix::identity(n, n) * c;
    let nn = n * n;
    // Row (i, j) of vec(M^T P + P M), column-major vec.
    let mut op = DMatrix::zeros(nn, nn);
    for j in 0..n {
        for i in 0..n {
            let row = i + j * n;
            for k in 0..n {
                op[(row, k + j * n)] += m[(k, i)];
                op[(row, i + k * n)] += m[(k, j)];
            }
        }
    }
    let mut rhs = DVector::zeros(nn);
    for i in 0..n {
        rhs[i + i * n] = -1.0;
    }
    let Some(sol) = op.lu().solve(&rhs) else {
        return Ok(LyapunovCheck {
            feasible: false,
            p: None,
            at_boundary: true,
        });
    };
    if sol.iter().any(|v| !v.is_finite()) {
        return Ok(LyapunovCheck {
            feasible: false,
            p: None,
            at_boundary: true,
        });
    }
    let p = DMatrix::from_column_slice(n, n, sol.as_slice());
    let p = symmetric_part(&p);
    let feasible = Cholesky::new(p.clone()).is_some();
    Ok(LyapunovCheck {
        feasible,
        p: feasible.then_some(p),
        at_boundary: false,
    })
}

/// `lambda_max(A^T P + P A - 2 c P)`, the residual of the Lyapunov inequality.
pub fn lmi_residual(a: &DMatrix<f64>, p: &DMatrix<f64>, c: f64) -> f64 {
    let r = a.transpose() * p + p * a - p * (2.0 * c);
    SymmetricEigen::new(symmetric_part(&r)).eigenvalues.max()
}

/// Smallest `c` (within `tol`) for which the Lyapunov inequality is feasible.
pub fn optimal_contraction_rate(a: &DMatrix<f64>, tol: f64) -> Result<ContractionEstimate> {
    require_square(a)?;
    if !(tol > 0.0) {
        return Err(Error::InvalidParameter(format!("bisection tolerance must be positive, got {tol}")));
    }
    // Every eigenvalue has real part within the spectrum of the symmetric part.
    let eig = SymmetricEigen::new(symmetric_part(a)).eigenvalues;
    let mut lo = eig.min() - 1.0;
    let mut hi = eig.max() + 1.0;
    let mut solves = 0;
    let mut witness = loop {
        solves += 1;
        let check = lyapunov_feasible(a, hi)?;
        if let Some(p) = check.p {
            break p;
        }
        let width = hi - lo;
        lo = hi;
        hi += width;
    };
    while hi - lo >= tol {
        let mid = 0.5 * (lo + hi);
        solves += 1;
        let check = lyapunov_feasible(a, mid)?;
        match check.p {
            Some(p) => {
                hi = mid;
                witness = p;
            }
            None => lo = mid,
        }
    }
    Ok(ContractionEstimate {
        c: hi,
        method: ContractionMethod::LmiBisection,
        witness: Some(witness),
        domain: None,
        samples: solves,
    })
}

/// Log-norm of a constant Jacobian.
pub fn l2_contraction_rate(a: &DMatrix<f64>) -> Result<ContractionEstimate> {
    Ok(ContractionEstimate {
        c: matrix_measure_l2(a)?,
        method: ContractionMethod::L2Measure,
        witness: None,
        domain: None,
        samples: 1,
    })
}

/// Maximum of the Euclidean log-norm of the closed-loop state Jacobian over a grid.
///
/// `grid_density` is the number of intervals per non-degenerate axis, so
/// doubling it refines the grid to a superset.
pub fn sampled_contraction_rate<M: SystemModel + ?Sized>(
    model: &M,
    domain: &SamplingDomain,
    grid_density: usize,
) -> Result<ContractionEstimate> {
    let n = model.state_dim();
    let layout = model.control_layout();
    let expect = |what: &'static str, expected: usize, got: usize| {
        if expected == got {
            Ok(())
        } else {
            Err(Error::DimensionMismatch { what, expected, got })
        }
    };
    expect("state box axes", n, domain.state.len())?;
    expect("error box axes", layout.reference_dim, domain.error.len())?;
    expect("feedforward box axes", layout.feedforward_dim, domain.feedforward.len())?;
    if grid_density < 2 {
        return Err(Error::InvalidParameter("grid density must be at least 2".into()));
    }
    let axes: Vec<[f64; 2]> = domain
        .state
        .iter()
        .chain(&domain.error)
        .chain(&domain.feedforward)
        .copied()
        .collect();
    if axes.iter().any(|[lo, hi]| !(lo.is_finite() && hi.is_finite() && lo <= hi)) {
        return Err(Error::InvalidParameter("sampling box must be finite with lo <= hi".into()));
    }
    let counts: Vec<usize> = axes
        .iter()
        .map(|[lo, hi]| if hi > lo { grid_density + 1 } else { 1 })
        .collect();
    let total = counts
        .iter()
        .try_fold(1usize, |acc, &k| acc.checked_mul(k))
        .filter(|&t| t <= 50_000_000)
        .ok_or_else(|| Error::InvalidParameter("sampling grid too large".into()))?;

    let point = |mut idx: usize| -> Vec<f64> {
        axes.iter()
            .zip(&counts)
            .map(|([lo, hi], &k)| {
                let i = idx % k;
                idx /= k;
                if k == 1 {
                    *lo
                } else {
                    lo + (hi - lo) * i as f64 / (k - 1) as f64
                }
            })
            .collect()
    };

    let c = (0..total)
        .into_par_iter()
        .map(|idx| {
            let v = point(idx);
            let x = &v[..n];
            let mut u = Vec::with_capacity(layout.total());
            if layout.reference_dim > 0 {
                u.extend(x.iter().zip(&v[n..2 * n]).map(|(xi, ei)| xi + ei));
            }
            u.extend_from_slice(&v[n + layout.reference_dim..]);
            let jac = model.drift_jacobian(x, &u, 0.0);
            if jac.iter().any(|v| !v.is_finite()) {
                return Err(Error::Jacobian(format!("non-finite Jacobian at {v:?}")));
            }
            matrix_measure_l2(&jac)
        })
        .try_reduce(|| f64::NEG_INFINITY, |a, b| Ok(a.max(b)))?;

    Ok(ContractionEstimate {
        c,
        method: ContractionMethod::Sampled,
        witness: None,
        domain: Some(domain.clone()),
        samples: total,
    })
}
