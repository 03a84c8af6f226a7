//! Probabilistic tube radius around the deterministic twin.
//!
//! For a system with matrix-measure bound `c` and diffusion bound `sigma`, the
//! stochastic path stays within `r(t)` of its associated deterministic path on
//! the whole horizon with probability at least `1 - delta`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Below this magnitude `c` is treated as zero in the removable singularities.
pub const C_ZERO_THRESHOLD: f64 = 1e-9;

/// Parameters of the tube radius.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TubeParams {
    /// Matrix-measure bound (1/s).
    pub c: f64,
    /// Diffusion bound, `g g^T <= sigma^2 I`.
    pub sigma: f64,
    /// State dimension.
    pub n: usize,
    /// Violation budget.
    pub delta: f64,
    pub epsilon: f64,
    /// Discretisation parameter, only consulted when `c < 0`.
    pub dt: Option<f64>,
    pub horizon: f64,
}

impl TubeParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if !self.c.is_finite() {
            return bad(format!("c must be finite, got {}", self.c));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return bad(format!("sigma must be finite and >= 0, got {}", self.sigma));
        }
        if self.n == 0 {
            return bad("state dimension must be positive".into());
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad(format!("delta must lie in (0, 1), got {}", self.delta));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return bad(format!("epsilon must lie in (0, 1), got {}", self.epsilon));
        }
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return bad(format!("horizon must be positive, got {}", self.horizon));
        }
        match self.dt {
            Some(dt) if !(dt > 0.0 && dt < self.horizon) => {
                bad(format!("dt must lie in (0, T), got {dt}"))
            }
            None if self.c < 0.0 => Err(Error::MissingDt),
            _ => Ok(()),
        }
    }
}

/// Default discretisation parameter when a scenario leaves it unset.
pub fn default_dt(horizon: f64) -> f64 {
    0.01f64.min(horizon / 100.0)
}

/// `(eps1, eps2) = (ln(1 / (1 - eps^2)) / eps^2, 2 / eps^2)`.
pub fn epsilon_coeffs(epsilon: f64) -> Result<(f64, f64)> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "epsilon must lie in (0, 1), got {epsilon}"
        )));
    }
    let e2 = epsilon * epsilon;
    Ok((-(-e2).ln_1p() / e2, 2.0 / e2))
}

/// Tube radius at time `t`.
pub fn tube_radius(params: &TubeParams, t: f64) -> Result<f64> {
    params.validate()?;
    if !(t >= 0.0 && t <= params.horizon) {
        return Err(Error::TimeOutOfRange {
            t,
            horizon: params.horizon,
        });
    }
    Ok(radius_unchecked(params, t))
}

fn radius_unchecked(p: &TubeParams, t: f64) -> f64 {
    let (e1, e2) = epsilon_coeffs(p.epsilon).expect("validated");
    let n = p.n as f64;
    let c = p.c;
    if c >= 0.0 {
        let spread = if c.abs() < C_ZERO_THRESHOLD {
            p.horizon
        } else {
            -(-2.0 * c * p.horizon).exp_m1() / (2.0 * c)
        };
        (c * t).exp() * p.sigma * (spread * (e1 * n + e2 * (1.0 / p.delta).ln())).sqrt()
    } else {
        let dt = p.dt.expect("validated");
        let shape = ((-(2.0 * c * t).exp_m1()).max(0.0).sqrt() + (-2.0 * c * dt).exp_m1().sqrt())
            / (-2.0 * c).sqrt();
        let log_term = (2.0 * p.horizon / (p.delta * dt)).ln();
        p.sigma * shape * (e1 * n + e2 * log_term).sqrt()
    }
}

/// Tube radii sampled on a time grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadiusCurve {
    pub grid: Vec<f64>,
    pub radii: Vec<f64>,
}

impl RadiusCurve {
    pub fn max_radius(&self) -> f64 {
        self.radii.iter().copied().fold(0.0, f64::max)
    }

    /// Constant radius on a grid; handy for obstacle-only checks.
    pub fn constant(grid: Vec<f64>, radius: f64) -> Self {
        let radii = vec![radius; grid.len()];
        Self { grid, radii }
    }
}

pub fn tube_curve(params: &TubeParams, grid: &[f64]) -> Result<RadiusCurve> {
    params.validate()?;
    let radii = grid
        .iter()
        .map(|&t| tube_radius(params, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(RadiusCurve {
        grid: grid.to_vec(),
        radii,
    })
}

/// Upper bound `n sigma^2 (e^{2ct} - 1) / (2c)` on `E ||X_t - x_t||^2`.
pub fn mean_square_gap_bound(c: f64, sigma: f64, n: usize, t: f64) -> f64 {
    let n = n as f64;
    if c.abs() < C_ZERO_THRESHOLD {
        n * sigma * sigma * t
    } else {
        n * sigma * sigma * (2.0 * c * t).exp_m1() / (2.0 * c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scalar_params(c: f64, horizon: f64, dt: Option<f64>) -> TubeParams {
        TubeParams {
            c,
            sigma: 0.1f64.sqrt(),
            n: 1,
            delta: 1e-3,
            epsilon: 15.0 / 16.0,
            dt,
            horizon,
        }
    }

    // Reference values below were evaluated with 30-digit arithmetic.

    #[test]
    fn epsilon_coefficients() {
        let (e1, e2) = epsilon_coeffs(0.9).unwrap();
        assert!((e1 - 2.050_285_440_520_556_7).abs() < 1e-12);
        assert!((e2 - 2.469_135_802_469_135_8).abs() < 1e-12);
        let (e1, e2) = epsilon_coeffs(15.0 / 16.0).unwrap();
        assert!((e1 - 2.402_065_339_726_980_2).abs() < 1e-12);
        assert!((e2 - 2.275_555_555_555_555_6).abs() < 1e-12);
        for bad in [0.0, 1.0, -0.2, 1.5, f64::NAN] {
            assert!(epsilon_coeffs(bad).is_err());
        }
    }

    #[test]
    fn epsilon_coefficients_limit_near_one() {
        let grid: Vec<f64> = (1..200).map(|k| 0.9 + 0.1 * k as f64 / 200.0).collect();
        let coeffs: Vec<(f64, f64)> = grid.iter().map(|&e| epsilon_coeffs(e).unwrap()).collect();
        assert!(coeffs.windows(2).all(|w| w[1].0 > w[0].0 && w[1].1 < w[0].1));
        let (e1, e2) = epsilon_coeffs(1.0 - 1e-12).unwrap();
        assert!((e2 - 2.0).abs() < 1e-9);
        assert!(e1 > 25.0);
    }

    #[test]
    fn contractive_branch_value() {
        let p = scalar_params(-0.5, 5.0, Some(0.05));
        let r = tube_radius(&p, 5.0).unwrap();
        assert!((r - 2.124_659_458_861_274).abs() < 1e-10, "{r}");
        assert!((r - 2.12).abs() < 5e-3);
        let r0 = tube_radius(&p, 0.0).unwrap();
        assert!((r0 - 0.393_349_946_547_425_6).abs() < 1e-10, "{r0}");
    }

    #[test]
    fn expanding_branch_values() {
        let p = scalar_params(1.0, 2.0, None);
        let r0 = tube_radius(&p, 0.0).unwrap();
        let r2 = tube_radius(&p, 2.0).unwrap();
        assert!((r0 - 0.943_110_484_036_534_3).abs() < 1e-10, "{r0}");
        assert!((r2 - 6.968_696_274_035_591_6).abs() < 1e-9, "{r2}");
        assert!((r2 / r0 - 2.0f64.exp()).abs() < 1e-12);
    }

    #[test]
    fn zero_c_uses_horizon_limit() {
        let p = scalar_params(0.0, 2.0, None);
        let r = tube_radius(&p, 1.0).unwrap();
        assert!((r - 1.903_735_603_555_966_4).abs() < 1e-10, "{r}");
        let near = tube_radius(&scalar_params(1e-7, 2.0, None), 1.0).unwrap();
        assert!((near - r).abs() < 1e-6);
    }

    #[test]
    fn zero_sigma_gives_zero_radius() {
        for c in [-1.0, 0.0, 2.0] {
            let mut p = scalar_params(c, 3.0, Some(0.01));
            p.sigma = 0.0;
            let curve = tube_curve(&p, &[0.0, 1.0, 3.0]).unwrap();
            assert!(curve.radii.iter().all(|&r| r == 0.0));
        }
    }

    #[test]
    fn rejects_invalid_inputs() {
        let p = scalar_params(-0.5, 5.0, None);
        assert_eq!(tube_radius(&p, 1.0), Err(Error::MissingDt));
        let p = scalar_params(-0.5, 5.0, Some(0.05));
        assert!(matches!(tube_radius(&p, 5.5), Err(Error::TimeOutOfRange { .. })));
        assert!(matches!(tube_radius(&p, -0.1), Err(Error::TimeOutOfRange { .. })));
        let mut q = p;
        q.delta = 0.0;
        assert!(tube_radius(&q, 1.0).is_err());
        q = p;
        q.dt = Some(6.0);
        assert!(tube_radius(&q, 1.0).is_err());
    }

    #[test]
    fn curve_matches_pointwise_and_single_point() {
        let p = scalar_params(1.0, 2.0, None);
        let a = tube_curve(&p, &[0.0, 0.5, 1.0, 2.0]).unwrap();
        let b = tube_curve(&p, &[0.0, 1.0, 1.5]).unwrap();
        assert_eq!(a.radii[0], b.radii[0]);
        assert_eq!(a.radii[2], b.radii[1]);
        let single = tube_curve(&p, &[0.0]).unwrap();
        let (e1, e2) = epsilon_coeffs(p.epsilon).unwrap();
        let expected =
            p.sigma * ((1.0 - (-4.0f64).exp()) / 2.0 * (e1 + e2 * (1e3f64).ln())).sqrt();
        assert!((single.radii[0] - expected).abs() < 1e-14);
    }

    #[test]
    fn mean_square_bound_examples() {
        assert_eq!(mean_square_gap_bound(0.3, 1.0, 2, 0.0), 0.0);
        assert!((mean_square_gap_bound(0.0, 1.0, 1, 3.0) - 3.0).abs() < 1e-15);
        assert!((mean_square_gap_bound(1e-12, 1.0, 1, 3.0) - 3.0).abs() < 1e-9);
        let stationary = mean_square_gap_bound(-0.5, 0.1f64.sqrt(), 1, 200.0);
        assert!((stationary - 0.1).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn monotone_in_time(c in -3.0f64..3.0, t1 in 0.0f64..1.0, t2 in 0.0f64..1.0) {
            let p = TubeParams { c, sigma: 0.2, n: 2, delta: 1e-3, epsilon: 0.9, dt: Some(0.01), horizon: 4.0 };
            let (a, b) = (4.0 * t1.min(t2), 4.0 * t1.max(t2));
            prop_assert!(tube_radius(&p, b).unwrap() >= tube_radius(&p, a).unwrap());
        }

        #[test]
        fn monotone_in_parameters(
            c in -3.0f64..3.0,
            t in 0.0f64..1.0,
            n in 1usize..10,
            sigma in 0.01f64..1.0,
            dsig in 0.0f64..1.0,
            log_delta in -12.0f64..-0.1,
            dlog in 0.0f64..5.0,
            horizon in 1.0f64..5.0,
            dh in 0.0f64..3.0,
        ) {
            let base = TubeParams { c, sigma, n, delta: log_delta.exp(), epsilon: 0.9, dt: Some(0.01), horizon };
            let t = t * horizon;
            let r = tube_radius(&base, t).unwrap();
            let more_n = TubeParams { n: n + 1, ..base };
            prop_assert!(tube_radius(&more_n, t).unwrap() > r);
            let more_sigma = TubeParams { sigma: sigma + dsig, ..base };
            prop_assert!(tube_radius(&more_sigma, t).unwrap() >= r);
            let smaller_delta = TubeParams { delta: (log_delta - dlog).exp(), ..base };
            prop_assert!(tube_radius(&smaller_delta, t).unwrap() >= r);
            let longer = TubeParams { horizon: horizon + dh, ..base };
            prop_assert!(tube_radius(&longer, t).unwrap() >= r * (1.0 - 1e-12));
        }
    }
}
