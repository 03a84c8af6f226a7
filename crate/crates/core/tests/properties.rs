use ccto_core::contraction::{l2_contraction_rate, matrix_measure_l2, optimal_contraction_rate};
use ccto_core::dynamics::{make_scalar_linear, simulate_stochastic, Curve};
use ccto_core::tube::{mean_square_gap_bound, tube_radius, TubeParams};
use ccto_core::verify::{cost_gap_bound_lipschitz, cost_gap_bound_smooth};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn params(c: f64, sigma: f64, n: usize, delta: f64, horizon: f64) -> TubeParams {
    TubeParams {
        c,
        sigma,
        n,
        delta,
        epsilon: 0.9,
        dt: Some(0.01 * horizon),
        horizon,
    }
}

/// Running part of the Lipschitz bound with `L = K = 1`, in closed form.
fn running_closed_form(c: f64, t: f64) -> f64 {
    if c == 0.0 {
        return 2.0 / 3.0 * t.powf(1.5);
    }
    let a = c.abs();
    let scale = a * (2.0 * a).sqrt();
    if c > 0.0 {
        let u = (2.0 * a * t).exp_m1().sqrt();
        (u - u.atan()) / scale
    } else {
        let w = (-(-2.0 * a * t).exp_m1()).sqrt();
        (w.atanh() - w) / scale
    }
}

#[test]
fn lipschitz_quadrature_matches_closed_forms() {
    for c in [-1.0, -0.5, 0.0, 0.5, 1.0] {
        for t in [0.5, 2.0, 5.0] {
            let got = cost_gap_bound_lipschitz(1.0, 0.0, 1, 1.0, c, t);
            let want = running_closed_form(c, t);
            assert!(((got - want) / want).abs() < 1e-6, "c={c} T={t}: {got} vs {want}");
        }
    }
}

#[test]
fn euler_is_first_order_without_noise() {
    let sys = make_scalar_linear(-1.0, 0.0).unwrap();
    let zero = Curve::constant(vec![0.0]);
    let exact = (-1.0f64).exp();
    let err = |h: f64| {
        let path = simulate_stochastic(&sys, &[1.0], &zero, &[0.0, 1.0], h, 3).unwrap();
        (path.final_state()[0] - exact).abs()
    };
    let (e1, e2, e3) = (err(0.01), err(0.005), err(0.0025));
    assert!((e1 / e2).log2() > 0.9 && (e2 / e3).log2() > 0.9, "{e1} {e2} {e3}");
}

proptest! {
    #[test]
    fn tube_grows_with_noise_dimension_and_confidence(
        c in -2.0f64..2.0,
        sigma in 0.01f64..1.0,
        n in 1usize..8,
        delta in 1e-6f64..0.1,
        frac in 0.05f64..1.0,
    ) {
        let base = params(c, sigma, n, delta, 2.0);
        let t = frac * base.horizon;
        let r = tube_radius(&base, t).unwrap();
        let wider = [
            TubeParams { n: n + 1, ..base },
            TubeParams { sigma: 1.5 * sigma, ..base },
            TubeParams { delta: 0.5 * delta, ..base },
        ];
        for p in &wider {
            prop_assert!(tube_radius(p, t).unwrap() > r, "{:?}", p);
        }
    }

    #[test]
    fn tube_radius_nondecreasing_in_horizon(
        c in -2.0f64..2.0,
        sigma in 0.01f64..1.0,
        horizon in 0.5f64..5.0,
        frac in 0.05f64..1.0,
    ) {
        let short = TubeParams { dt: Some(0.005), ..params(c, sigma, 2, 1e-3, horizon) };
        let long = TubeParams { horizon: 1.5 * horizon, ..short };
        let t = frac * horizon;
        let (a, b) = (tube_radius(&short, t).unwrap(), tube_radius(&long, t).unwrap());
        prop_assert!(b >= a, "{} < {}", b, a);
    }

    #[test]
    fn gap_bounds_scale_with_noise(
        c in -2.0f64..2.0,
        sigma in 0.01f64..1.0,
        horizon in 0.1f64..4.0,
    ) {
        let lip = |s| cost_gap_bound_lipschitz(1.0, 2.0, 2, s, c, horizon);
        let smooth = |s| cost_gap_bound_smooth(1.0, 2.0, 2, s, c, horizon);
        prop_assert_eq!(lip(0.0), 0.0);
        prop_assert_eq!(smooth(0.0), 0.0);
        // linear in sigma and sigma^2 respectively
        prop_assert!((lip(2.0 * sigma) / lip(sigma) - 2.0).abs() < 1e-6);
        prop_assert!((smooth(2.0 * sigma) / smooth(sigma) - 4.0).abs() < 1e-9);
        prop_assert!(mean_square_gap_bound(c, sigma, 2, horizon) >= 0.0);
    }

    #[test]
    fn l2_measure_dominates_spectral_abscissa(
        n in 1usize..8,
        entries in prop::collection::vec(-3.0f64..3.0, 64),
    ) {
        let a = DMatrix::from_fn(n, n, |i, j| entries[i * 8 + j]);
        let alpha = a.complex_eigenvalues().iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max);
        let mu = matrix_measure_l2(&a).unwrap();
        prop_assert!(mu >= alpha - 1e-9 * (1.0 + alpha.abs()));
        prop_assert_eq!(l2_contraction_rate(&a).unwrap().c, mu);
        if alpha < -0.05 {
            let lmi = optimal_contraction_rate(&a, 1e-6).unwrap();
            prop_assert!(lmi.c >= alpha - 1e-6);
            prop_assert!(lmi.c <= mu + 1e-6);
        }
    }
}
