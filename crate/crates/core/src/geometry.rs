//! Obstacles, safety checks and obstacle inflation by the tube radius.
//!
//! Obstacles are closed sets living in a subset of the state coordinates
//! (`dims`). Inflation replaces each obstacle by a union of spheres that
//! contains `obstacle + ball(r_t)`; spheres inflate exactly, boxes are covered
//! by a grid of cell spheres.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tube::RadiusCurve;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Obstacle {
    Sphere {
        center: Vec<f64>,
        radius: f64,
        dims: Vec<usize>,
    },
    Box {
        min: Vec<f64>,
        max: Vec<f64>,
        dims: Vec<usize>,
    },
}

impl Obstacle {
    pub fn dims(&self) -> &[usize] {
        match self {
            Obstacle::Sphere { dims, .. } | Obstacle::Box { dims, .. } => dims,
        }
    }

    pub fn validate(&self, state_dim: usize) -> Result<()> {
        let dims = self.dims();
        if dims.is_empty() {
            return Err(Error::InvalidParameter("obstacle needs at least one coordinate".into()));
        }
        for (i, &d) in dims.iter().enumerate() {
            if d >= state_dim {
                return Err(Error::InvalidParameter(format!(
                    "obstacle coordinate {d} outside state dimension {state_dim}"
                )));
            }
            if dims[..i].contains(&d) {
                return Err(Error::InvalidParameter(format!("obstacle coordinate {d} repeated")));
            }
        }
        let check_len = |what: &'static str, v: &[f64]| {
            if v.len() != dims.len() {
                return Err(Error::DimensionMismatch {
                    what,
                    expected: dims.len(),
                    got: v.len(),
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidParameter(format!("{what} must be finite")));
            }
            Ok(())
        };
        match self {
            Obstacle::Sphere { center, radius, .. } => {
                check_len("sphere center", center)?;
                if !(*radius > 0.0) || !radius.is_finite() {
                    return Err(Error::InvalidParameter(format!(
                        "sphere radius must be positive, got {radius}"
                    )));
                }
            }
            Obstacle::Box { min, max, .. } => {
                check_len("box min corner", min)?;
                check_len("box max corner", max)?;
                if min.iter().zip(max).any(|(a, b)| a > b) {
                    return Err(Error::InvalidParameter("box corners must be ordered".into()));
                }
            }
        }
        Ok(())
    }

    /// Closed membership test of the projected state.
    pub fn contains(&self, x: &[f64]) -> bool {
        match self {
            Obstacle::Sphere { center, radius, dims } => {
                let d2: f64 = dims
                    .iter()
                    .zip(center)
                    .map(|(&d, a)| (x[d] - a).powi(2))
                    .sum();
                d2 <= radius * radius
            }
            Obstacle::Box { min, max, dims } => dims
                .iter()
                .zip(min.iter().zip(max))
                .all(|(&d, (lo, hi))| x[d] >= *lo && x[d] <= *hi),
        }
    }
}

pub fn validate_obstacles(obstacles: &[Obstacle], state_dim: usize) -> Result<()> {
    obstacles.iter().try_for_each(|o| o.validate(state_dim))
}

/// True iff the state lies outside every (closed) obstacle.
pub fn is_safe(x: &[f64], obstacles: &[Obstacle]) -> bool {
    !obstacles.iter().any(|o| o.contains(x))
}

/// Settings for covering boxes with spheres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoverOptions {
    /// Upper bound on the half-diagonal of a box cell.
    pub tolerance: f64,
    /// Maximum number of spheres per obstacle.
    pub budget: usize,
}

impl Default for CoverOptions {
    fn default() -> Self {
        Self {
            tolerance: 0.3,
            budget: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverSphere {
    pub center: Vec<f64>,
    /// Radius before inflation.
    pub base_radius: f64,
    pub dims: Vec<usize>,
    pub obstacle: usize,
}

impl CoverSphere {
    fn dist2(&self, x: &[f64]) -> f64 {
        self.dims
            .iter()
            .zip(&self.center)
            .map(|(&d, a)| (x[d] - a).powi(2))
            .sum()
    }
}

/// Covering spheres with one inflation radius per time sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InflatedSet {
    pub spheres: Vec<CoverSphere>,
    pub times: Vec<f64>,
    pub tube_radii: Vec<f64>,
}

fn cover_box(
    index: usize,
    min: &[f64],
    max: &[f64],
    dims: &[usize],
    opts: &CoverOptions,
) -> Result<Vec<CoverSphere>> {
    let d = dims.len();
    // Cells with side <= 2 tol / sqrt(d) have half-diagonal <= tol.
    let side = 2.0 * opts.tolerance / (d as f64).sqrt();
    let counts: Vec<usize> = min
        .iter()
        .zip(max)
        .map(|(lo, hi)| (((hi - lo) / side) - 1e-12).ceil().max(1.0) as usize)
        .collect();
    let needed = counts.iter().try_fold(1usize, |a, &k| a.checked_mul(k)).unwrap_or(usize::MAX);
    if needed > opts.budget {
        return Err(Error::CoverBudget {
            obstacle: index,
            needed,
            budget: opts.budget,
        });
    }
    let cell: Vec<f64> = min
        .iter()
        .zip(max)
        .zip(&counts)
        .map(|((lo, hi), &k)| (hi - lo) / k as f64)
        .collect();
    let half_diag = 0.5 * cell.iter().map(|s| s * s).sum::<f64>().sqrt();
    let mut spheres = Vec::with_capacity(needed);
    for mut idx in 0..needed {
        let center = (0..d)
            .map(|j| {
                let i = idx % counts[j];
                idx /= counts[j];
                min[j] + (i as f64 + 0.5) * cell[j]
            })
            .collect();
        spheres.push(CoverSphere {
            center,
            base_radius: half_diag,
            dims: dims.to_vec(),
            obstacle: index,
        });
    }
    Ok(spheres)
}

const COVER_SAMPLES: usize = 10_000;

/// Rejection-samples `samples` points of `box + ball(r)` and counts those outside the cover.
pub fn cover_escapes(
    min: &[f64],
    max: &[f64],
    spheres: &[CoverSphere],
    r: f64,
    samples: usize,
    seed: u64,
) -> usize {
    let d = min.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = vec![0.0; d];
    let mut escapes = 0;
    let mut accepted = 0;
    while accepted < samples {
        for j in 0..d {
            p[j] = rng.random_range((min[j] - r)..=(max[j] + r));
        }
        let gap2: f64 = (0..d)
            .map(|j| (min[j] - p[j]).max(p[j] - max[j]).max(0.0).powi(2))
            .sum();
        if gap2 > r * r {
            continue;
        }
        accepted += 1;
        let covered = spheres.iter().any(|s| {
            let rr = s.base_radius + r;
            let d2: f64 = s.center.iter().zip(&p).map(|(a, x)| (x - a).powi(2)).sum();
            d2 <= rr * rr
        });
        if !covered {
            escapes += 1;
        }
    }
    escapes
}

/// Inflates every obstacle by the tube radius at each sample of `radius`.
pub fn inflate_obstacles(
    obstacles: &[Obstacle],
    radius: &RadiusCurve,
    opts: &CoverOptions,
) -> Result<InflatedSet> {
    if radius.radii.iter().any(|r| !r.is_finite() || *r < 0.0) {
        return Err(Error::InvalidParameter("tube radii must be finite and non-negative".into()));
    }
    if !(opts.tolerance > 0.0) || opts.budget == 0 {
        return Err(Error::InvalidParameter("cover tolerance and budget must be positive".into()));
    }
    let r_min = radius.radii.iter().copied().fold(f64::INFINITY, f64::min);
    let r_max = radius.max_radius();
    let mut spheres = Vec::new();
    for (i, obs) in obstacles.iter().enumerate() {
        match obs {
            Obstacle::Sphere { center, radius, dims } => spheres.push(CoverSphere {
                center: center.clone(),
                base_radius: *radius,
                dims: dims.clone(),
                obstacle: i,
            }),
            Obstacle::Box { min, max, dims } => {
                let cover = cover_box(i, min, max, dims, opts)?;
                for (k, r) in [r_min, r_max].into_iter().enumerate() {
                    let escapes = cover_escapes(min, max, &cover, r, COVER_SAMPLES, (i * 2 + k) as u64);
                    if escapes > 0 {
                        return Err(Error::CoverEscape { obstacle: i, escapes });
                    }
                }
                spheres.extend(cover);
            }
        }
    }
    Ok(InflatedSet {
        spheres,
        times: radius.grid.clone(),
        tube_radii: radius.radii.clone(),
    })
}

impl InflatedSet {
    pub fn len(&self) -> usize {
        self.spheres.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spheres.is_empty()
    }

    pub fn time_samples(&self) -> usize {
        self.times.len()
    }

    /// Radius of covering sphere `i` at time sample `k`.
    pub fn radius(&self, i: usize, k: usize) -> f64 {
        self.spheres[i].base_radius + self.tube_radii[k]
    }

    /// `g_i = r_i^2 - |proj(x) - a_i|^2` for every covering sphere; `g <= 0` is safe.
    pub fn values_into(&self, x: &[f64], k: usize, out: &mut [f64]) {
        for (i, (s, o)) in self.spheres.iter().zip(out.iter_mut()).enumerate() {
            let r = self.radius(i, k);
            *o = r * r - s.dist2(x);
        }
    }

    /// Adds `sum_i w_i grad g_i(x)` to `out`.
    pub fn add_weighted_gradient(&self, x: &[f64], w: &[f64], out: &mut [f64]) {
        for (s, &wi) in self.spheres.iter().zip(w) {
            if wi == 0.0 {
                continue;
            }
            for (&d, a) in s.dims.iter().zip(&s.center) {
                out[d] += wi * 2.0 * (a - x[d]);
            }
        }
    }

    /// Values and dense gradients (one state-sized row per sphere).
    pub fn constraint_values(&self, x: &[f64], k: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
        let mut g = vec![0.0; self.len()];
        self.values_into(x, k, &mut g);
        let grads = self
            .spheres
            .iter()
            .map(|s| {
                let mut row = vec![0.0; x.len()];
                for (&d, a) in s.dims.iter().zip(&s.center) {
                    row[d] = 2.0 * (a - x[d]);
                }
                row
            })
            .collect();
        (g, grads)
    }

    /// First covering sphere violated by `x` at sample `k`, if any.
    pub fn first_violation(&self, x: &[f64], k: usize) -> Option<usize> {
        (0..self.len()).find(|&i| {
            let r = self.radius(i, k);
            self.spheres[i].dist2(x) < r * r
        })
    }

    /// Source obstacle and time of the first boundary-state violation.
    pub fn erosion_violation(&self, start: &[f64], goal: &[f64]) -> Option<(&'static str, usize, f64)> {
        let last = self.time_samples() - 1;
        if let Some(i) = self.first_violation(start, 0) {
            return Some(("start", self.spheres[i].obstacle, self.times[0]));
        }
        self.first_violation(goal, last)
            .map(|i| ("goal", self.spheres[i].obstacle, self.times[last]))
    }

    /// True iff the start is outside the t = 0 inflation and the goal outside the t = T inflation.
    pub fn erosion_feasible(&self, start: &[f64], goal: &[f64]) -> bool {
        self.erosion_violation(start, goal).is_none()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn sphere(center: Vec<f64>, radius: f64) -> Obstacle {
        let dims = (0..center.len()).collect();
        Obstacle::Sphere { center, radius, dims }
    }

    fn unit_cube() -> Obstacle {
        Obstacle::Box {
            min: vec![0.0; 3],
            max: vec![1.0; 3],
            dims: vec![0, 1, 2],
        }
    }

    fn constant(r: f64) -> RadiusCurve {
        RadiusCurve::constant(vec![0.0, 1.0], r)
    }

    #[test]
    fn validation() {
        assert!(sphere(vec![0.0, 0.0], 0.3).validate(2).is_ok());
        assert!(sphere(vec![0.0, 0.0], 0.0).validate(2).is_err());
        assert!(sphere(vec![0.0, 0.0], 0.3).validate(1).is_err());
        let bad = Obstacle::Box {
            min: vec![1.0],
            max: vec![0.0],
            dims: vec![0],
        };
        assert!(bad.validate(1).is_err());
        let repeated = Obstacle::Sphere {
            center: vec![0.0, 0.0],
            radius: 1.0,
            dims: vec![0, 0],
        };
        assert!(repeated.validate(3).is_err());
    }

    #[test]
    fn safety_checks() {
        let obs = vec![sphere(vec![0.0, 0.0], 1.0)];
        assert!(!is_safe(&[0.2, 0.1], &obs));
        assert!(!is_safe(&[1.0, 0.0], &obs));
        assert!(is_safe(&[1.0 + 1e-12, 0.0], &obs));
        assert!(is_safe(&[5.0, 5.0], &[]));
        // projection: obstacle in the first two coordinates of a 4-D state
        let proj = Obstacle::Box {
            min: vec![0.0, 0.0],
            max: vec![1.0, 1.0],
            dims: vec![2, 3],
        };
        assert!(!is_safe(&[9.0, 9.0, 0.5, 0.5], &[proj.clone()]));
        assert!(is_safe(&[0.5, 0.5, 9.0, 9.0], &[proj]));
    }

    #[test]
    fn sphere_inflates_exactly() {
        let set = inflate_obstacles(&[sphere(vec![1.0, 2.0], 0.3)], &constant(0.2), &CoverOptions::default()).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.spheres[0].center, vec![1.0, 2.0]);
        assert!((set.radius(0, 0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn zero_radius_covers_obstacle() {
        let set = inflate_obstacles(&[unit_cube()], &constant(0.0), &CoverOptions::default()).unwrap();
        assert_eq!(cover_escapes(&[0.0; 3], &[1.0; 3], &set.spheres, 0.0, 10_000, 5), 0);
    }

    #[test]
    fn unit_cube_cover_is_sound() {
        let set = inflate_obstacles(&[unit_cube()], &constant(0.1), &CoverOptions::default()).unwrap();
        assert!(set.len() <= 64);
        assert_eq!(cover_escapes(&[0.0; 3], &[1.0; 3], &set.spheres, 0.1, 10_000, 99), 0);
    }

    #[test]
    fn cover_budget_is_enforced() {
        let opts = CoverOptions {
            tolerance: 0.05,
            budget: 64,
        };
        let err = inflate_obstacles(&[unit_cube()], &constant(0.1), &opts).unwrap_err();
        assert!(matches!(err, Error::CoverBudget { obstacle: 0, .. }));
    }

    #[test]
    fn constraint_values_and_boundary() {
        let set = inflate_obstacles(&[sphere(vec![1.0, 0.0], 0.5)], &constant(0.5), &CoverOptions::default()).unwrap();
        let (g, _) = set.constraint_values(&[1.0, 0.0], 0);
        assert!((g[0] - 1.0).abs() < 1e-15);
        let (g, _) = set.constraint_values(&[2.0, 0.0], 0);
        assert_eq!(g[0], 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let obstacles = vec![
            Obstacle::Sphere {
                center: vec![0.3, -0.2],
                radius: 0.4,
                dims: vec![1, 2],
            },
            Obstacle::Box {
                min: vec![-0.5, 0.0],
                max: vec![0.5, 0.4],
                dims: vec![0, 2],
            },
        ];
        let set = inflate_obstacles(&obstacles, &constant(0.2), &CoverOptions::default()).unwrap();
        let x = [0.11, 0.7, -0.35, 4.0];
        let (_, grads) = set.constraint_values(&x, 0);
        let h = 1e-6;
        for (i, row) in grads.iter().enumerate() {
            for j in 0..x.len() {
                let mut xp = x;
                let mut xm = x;
                xp[j] += h;
                xm[j] -= h;
                let (gp, _) = set.constraint_values(&xp, 0);
                let (gm, _) = set.constraint_values(&xm, 0);
                let fd = (gp[i] - gm[i]) / (2.0 * h);
                assert!((fd - row[j]).abs() <= 1e-6 * row[j].abs().max(1.0), "{i},{j}: {fd} vs {}", row[j]);
            }
        }
        // weighted accumulation agrees with the dense rows
        let w: Vec<f64> = (0..set.len()).map(|i| 0.5 + i as f64).collect();
        let mut acc = vec![0.0; 4];
        set.add_weighted_gradient(&x, &w, &mut acc);
        for j in 0..4 {
            let dense: f64 = grads.iter().zip(&w).map(|(row, wi)| wi * row[j]).sum();
            assert!((acc[j] - dense).abs() < 1e-12);
        }
    }

    #[test]
    fn erosion_preflight() {
        let obs = vec![sphere(vec![1.0, 1.0], 0.3)];
        let set = inflate_obstacles(&obs, &constant(0.2), &CoverOptions::default()).unwrap();
        assert!(set.erosion_feasible(&[0.0, 0.0], &[2.0, 2.0]));
        assert!(!set.erosion_feasible(&[1.2, 1.2], &[2.0, 2.0]));
        assert_eq!(set.erosion_violation(&[0.0, 0.0], &[1.4, 1.0]), Some(("goal", 0, 1.0)));
        let empty = inflate_obstacles(&[], &constant(0.2), &CoverOptions::default()).unwrap();
        assert!(empty.erosion_feasible(&[1.0, 1.0], &[1.0, 1.0]));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn cover_is_sound_and_monotone(
            sides in proptest::collection::vec(0.05f64..1.2, 3),
            r in 0.0f64..0.5,
            dr in 0.0f64..0.3,
            seed in 0u64..1000,
        ) {
            let min = vec![-0.2, 0.1, 0.0];
            let max: Vec<f64> = min.iter().zip(&sides).map(|(a, s)| a + s).collect();
            let obs = Obstacle::Box { min: min.clone(), max: max.clone(), dims: vec![0, 1, 2] };
            let set = inflate_obstacles(&[obs], &constant(r), &CoverOptions::default()).unwrap();
            prop_assert_eq!(cover_escapes(&min, &max, &set.spheres, r, 2000, seed), 0);
            // points covered at r stay covered at r + dr
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..500 {
                let p: Vec<f64> = (0..3).map(|j| rng.random_range(min[j] - 1.0..max[j] + 1.0)).collect();
                let covered = |rad: f64| set.spheres.iter().any(|s| s.dist2(&p) <= (s.base_radius + rad).powi(2));
                if covered(r) {
                    prop_assert!(covered(r + dr));
                }
            }
        }
    }
}
