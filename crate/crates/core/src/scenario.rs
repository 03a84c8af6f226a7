//! Scenario files: one TOML (or JSON) document describing a full experiment.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::contraction::{
    l2_contraction_rate, matrix_measure_l2, optimal_contraction_rate, sampled_contraction_rate, ContractionEstimate, ContractionMethod,
    SamplingDomain,
};
use crate::dynamics::{
    double_integrator_gain, make_double_integrator, make_scalar_linear, make_unicycle, LinearSystem, SystemModel,
};
use crate::error::{Error, Result};
use crate::geometry::{validate_obstacles, CoverOptions, Obstacle};
use crate::optimizer::{plan, plan_cost, Boundary, CostSpec, CostWeights, PlanInput, PlanOptions, PlanResult};
use crate::tube::{default_dt, TubeParams};
use crate::verify::McSettings;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SystemSpec {
    /// `dX = c X dt + sigma dW` with a scalar control added to the drift.
    ScalarLinear { c: f64, sigma: f64 },
    DoubleIntegrator {
        mass: f64,
        gain_position: f64,
        gain_velocity: f64,
        noise_scale: f64,
    },
    Unicycle {
        kx: f64,
        ky: f64,
        ktheta: f64,
        noise_scale: f64,
    },
    /// `dX = (A X + B u) dt + G dW`, matrices given row by row.
    Linear {
        a: Vec<Vec<f64>>,
        b: Vec<Vec<f64>>,
        g: Vec<Vec<f64>>,
    },
}

fn matrix(name: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || cols == 0 || rows.iter().any(|r| r.len() != cols) {
        return Err(Error::Scenario(format!("matrix {name} must be a non-empty rectangular array")));
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

impl SystemSpec {
    pub fn build(&self) -> Result<Box<dyn SystemModel>> {
        Ok(match self {
            Self::ScalarLinear { c, sigma } => Box::new(make_scalar_linear(*c, *sigma)?),
            Self::DoubleIntegrator {
                mass,
                gain_position,
                gain_velocity,
                noise_scale,
            } => Box::new(make_double_integrator(
                *mass,
                double_integrator_gain(*gain_position, *gain_velocity),
                *noise_scale,
            )?),
            Self::Unicycle {
                kx,
                ky,
                ktheta,
                noise_scale,
            } => Box::new(make_unicycle(*kx, *ky, *ktheta, *noise_scale)?),
            Self::Linear { a, b, g } => Box::new(LinearSystem::new(matrix("a", a)?, matrix("b", b)?, matrix("g", g)?)?),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum ContractionSpec {
    Given { value: f64 },
    /// Euclidean log-norm of the constant closed-loop Jacobian.
    L2,
    /// Lyapunov bisection on the constant closed-loop Jacobian.
    Lmi { tol: f64 },
    Sampled { density: usize, domain: SamplingDomain },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TubeSpec {
    pub delta: f64,
    pub epsilon: f64,
    pub horizon: f64,
    #[serde(default)]
    pub dt: Option<f64>,
    /// Overrides the diffusion bound derived from the system.
    #[serde(default)]
    pub sigma: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub system: SystemSpec,
    pub tube: TubeSpec,
    pub contraction: ContractionSpec,
    #[serde(default)]
    pub obstacles: Vec<Obstacle>,
    /// Absent for tube-only experiments, which start at the origin with zero control.
    #[serde(default)]
    pub boundary: Option<Boundary>,
    #[serde(default)]
    pub cost: CostWeights,
    #[serde(default)]
    pub solver: PlanOptions,
    pub mc: McSettings,
    #[serde(default)]
    pub cover: CoverOptions,
}

/// A scenario with its model, contraction estimate and tube parameters resolved.
pub struct Resolved {
    pub scenario: Scenario,
    pub model: Box<dyn SystemModel>,
    pub contraction: ContractionEstimate,
    pub tube: TubeParams,
    /// Caveats and defaulted values, for reports.
    pub notes: Vec<String>,
}

#[derive(Serialize)]
struct HashedPart<'a> {
    system: &'a SystemSpec,
    obstacles: &'a [Obstacle],
    boundary: &'a Option<Boundary>,
    horizon: f64,
}

impl Scenario {
    /// Parses JSON when the extension is `.json`, TOML otherwise.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Scenario(format!("cannot read {}: {e}", path.display())))?;
        if path.extension().is_some_and(|e| e == "json") {
            Self::from_json(&text)
        } else {
            Self::from_toml(&text)
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Scenario(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Scenario(e.to_string()))
    }

    /// SHA-256 of the system, obstacles, boundary and horizon.
    ///
    /// Plans stay valid when only tube, cost, solver or Monte Carlo settings change.
    pub fn hash(&self) -> String {
        let part = HashedPart {
            system: &self.system,
            obstacles: &self.obstacles,
            boundary: &self.boundary,
            horizon: self.tube.horizon,
        };
        let bytes = serde_json::to_vec(&part).expect("scenario parts serialise");
        hex::encode(Sha256::digest(bytes))
    }

    /// Builds the model, estimates `c` and assembles the tube parameters.
    pub fn resolve(self) -> Result<Resolved> {
        let model = self.system.build()?;
        let n = model.state_dim();
        validate_obstacles(&self.obstacles, n)?;
        if let Some(b) = &self.boundary {
            b.validate(n)?;
        }
        let mut notes = Vec::new();
        let contraction = match &self.contraction {
            ContractionSpec::Given { value } => {
                if !value.is_finite() {
                    return Err(Error::Scenario(format!("contraction value must be finite, got {value}")));
                }
                ContractionEstimate {
                    c: *value,
                    method: ContractionMethod::Given,
                    witness: None,
                    domain: None,
                    samples: 0,
                }
            }
            ContractionSpec::L2 => l2_contraction_rate(&linear_matrix(model.as_ref())?)?,
            ContractionSpec::Lmi { tol } => {
                let est = optimal_contraction_rate(&linear_matrix(model.as_ref())?, *tol)?;
                if let Some(k) = est.witness_condition() {
                    notes.push(format!(
                        "contraction certified in a P-weighted norm (cond(P) = {k:.3e}); the Euclidean tube is applied with that rate"
                    ));
                }
                notes.push("Lyapunov inequality implemented as A'P + PA <= 2cP".into());
                est
            }
            ContractionSpec::Sampled { density, domain } => {
                notes.push("contraction rate is a grid maximum over the declared operating box".into());
                sampled_contraction_rate(model.as_ref(), domain, *density)?
            }
        };
        let sigma = match self.tube.sigma {
            Some(s) => s,
            None => model
                .noise_bound()
                .ok_or_else(|| Error::Scenario("system has no diffusion bound; set tube.sigma".into()))?,
        };
        let mut dt = self.tube.dt;
        if dt.is_none() && contraction.c < 0.0 {
            let d = default_dt(self.tube.horizon);
            notes.push(format!("tube dt not given; defaulted to {d}"));
            dt = Some(d);
        }
        let tube = TubeParams {
            c: contraction.c,
            sigma,
            n,
            delta: self.tube.delta,
            epsilon: self.tube.epsilon,
            dt,
            horizon: self.tube.horizon,
        };
        tube.validate()?;
        if self.mc.trials == 0 || !(self.mc.step > 0.0) {
            return Err(Error::Scenario("mc needs trials > 0 and step > 0".into()));
        }
        Ok(Resolved {
            scenario: self,
            model,
            contraction,
            tube,
            notes,
        })
    }
}

fn linear_matrix(model: &dyn SystemModel) -> Result<DMatrix<f64>> {
    model
        .linear_state_matrix()
        .ok_or_else(|| Error::Scenario("l2 and lmi contraction modes need a linear closed loop".into()))
}

impl Resolved {
    pub fn boundary(&self) -> Result<&Boundary> {
        self.scenario
            .boundary
            .as_ref()
            .ok_or_else(|| Error::Scenario("scenario has no boundary section".into()))
    }

    /// Initial state for tube-only experiments.
    pub fn start_state(&self) -> Vec<f64> {
        match &self.scenario.boundary {
            Some(b) => b.start.clone(),
            None => vec![0.0; self.model.state_dim()],
        }
    }

    /// Rate for Euclidean bounds: Lyapunov rates hold in a weighted norm, so linear loops fall back to their log-norm.
    pub fn euclidean_rate(&self) -> Result<(f64, &'static str)> {
        match self.contraction.method {
            ContractionMethod::LmiBisection => Ok((
                matrix_measure_l2(&linear_matrix(self.model.as_ref())?)?,
                "euclidean log-norm of the closed-loop matrix",
            )),
            ContractionMethod::Given => Ok((self.contraction.c, "given")),
            ContractionMethod::L2Measure => Ok((self.contraction.c, "euclidean log-norm")),
            ContractionMethod::Sampled => Ok((self.contraction.c, "sampled euclidean log-norm")),
        }
    }

    pub fn plan(&self) -> Result<PlanResult> {
        plan(&PlanInput {
            model: self.model.as_ref(),
            tube: &self.tube,
            obstacles: &self.scenario.obstacles,
            cover: &self.scenario.cover,
            weights: &self.scenario.cost,
            boundary: self.boundary()?,
            options: &self.scenario.solver,
        })
    }

    /// The cost the plan optimises, reused to score stochastic runs.
    pub fn cost(&self) -> Result<CostSpec> {
        plan_cost(
            self.model.as_ref(),
            &self.scenario.cost,
            self.boundary()?,
            self.tube.horizon,
        )
    }
}
