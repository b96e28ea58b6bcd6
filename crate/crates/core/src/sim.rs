//! Closed-loop rollouts, the open-loop direct-optimization reference, and
//! the bounding-value comparison at an initial state.

use std::collections::VecDeque;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::avi::{solve_control, AviError, InnerConfig};
use crate::basis::{LinearActor, LinearCritic};
use crate::dynamics::{DomainBox, DynamicsError, SystemModel};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Avi(#[from] AviError),
    #[error("open-loop descent stagnated after {iterations} iterations at cost {cost} (gradient norm {grad_norm:e})")]
    OracleStagnation {
        cost: f64,
        grad_norm: f64,
        iterations: usize,
    },
    #[error("open-loop horizon {horizon} leaves terminal state norm {terminal_norm:e}")]
    HorizonTooShort { horizon: usize, terminal_norm: f64 },
    #[error("csv export: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// A state-feedback law.
pub trait Policy {
    fn control(&self, x: &[f64]) -> Result<Vec<f64>, SimError>;
}

impl Policy for LinearActor {
    fn control(&self, x: &[f64]) -> Result<Vec<f64>, SimError> {
        Ok(LinearActor::control(self, x))
    }
}

/// Control from the critic directly, via the inner loop at every step.
pub struct GreedyPolicy<'a> {
    pub model: &'a SystemModel,
    pub critic: &'a LinearCritic,
    pub inner: InnerConfig,
}

impl Policy for GreedyPolicy<'_> {
    fn control(&self, x: &[f64]) -> Result<Vec<f64>, SimError> {
        Ok(solve_control(self.model, self.critic, x, &self.inner)?.control)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub max_steps: usize,
    pub stop_radius: f64,
    /// Validity domain of the controller; exits are recorded, not fatal.
    pub domain: Option<DomainBox>,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            max_steps: 5000,
            stop_radius: 1e-4,
            domain: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub controls: Vec<Vec<f64>>,
    pub stage_costs: Vec<f64>,
    pub total_cost: f64,
    pub exited_domain_at: Option<usize>,
    pub reached_stop_radius: bool,
    pub diverged: bool,
}

impl Trajectory {
    pub fn final_state(&self) -> &[f64] {
        self.states.last().expect("trajectory has an initial state")
    }

    /// CSV rows: step, state components, control components (empty on the
    /// last row), stage cost, cumulative cost.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), SimError> {
        let mut w = csv::Writer::from_writer(out);
        let n = self.states[0].len();
        let m = self.controls.first().map_or(0, Vec::len);
        let mut header = vec!["step".to_string()];
        header.extend((1..=n).map(|i| format!("x{i}")));
        header.extend((1..=m).map(|i| format!("u{i}")));
        header.extend(["stage_cost", "cumulative_cost"].map(String::from));
        w.write_record(&header)?;
        let mut cumulative = 0.0;
        for (k, x) in self.states.iter().enumerate() {
            let mut rec = vec![k.to_string()];
            rec.extend(x.iter().map(|v| v.to_string()));
            match self.controls.get(k) {
                Some(u) => {
                    rec.extend(u.iter().map(|v| v.to_string()));
                    cumulative += self.stage_costs[k];
                    rec.push(self.stage_costs[k].to_string());
                }
                None => {
                    rec.extend(std::iter::repeat_n(String::new(), m + 1));
                }
            }
            rec.push(cumulative.to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Rolls the plant forward under `policy` until `‖x‖ ≤ stop_radius` or the
/// step budget runs out. Numerical blow-up truncates the trajectory and
/// sets `diverged`.
pub fn simulate(
    model: &SystemModel,
    policy: &dyn Policy,
    x0: &[f64],
    cfg: &SimConfig,
) -> Result<Trajectory, SimError> {
    if x0.len() != model.state_dim() {
        return Err(DynamicsError::Dimension {
            expected: model.state_dim(),
            got: x0.len(),
        }
        .into());
    }
    let mut traj = Trajectory {
        states: vec![x0.to_vec()],
        controls: Vec::new(),
        stage_costs: Vec::new(),
        total_cost: 0.0,
        exited_domain_at: None,
        reached_stop_radius: false,
        diverged: false,
    };
    let outside = |x: &[f64]| cfg.domain.as_ref().is_some_and(|d| !d.contains(x));
    if outside(x0) {
        traj.exited_domain_at = Some(0);
    }
    let mut x = x0.to_vec();
    for k in 0..cfg.max_steps {
        if norm(&x) <= cfg.stop_radius {
            traj.reached_stop_radius = true;
            break;
        }
        let u = policy.control(&x)?;
        let next = match model.step(&x, &u) {
            Ok(next) => next,
            Err(DynamicsError::DomainEscape { .. } | DynamicsError::Singularity { .. }) => {
                traj.diverged = true;
                break;
            }
            Err(e) => return Err(e.into()),
        };
        let cost = model.utility(&x, &u);
        if !cost.is_finite() {
            traj.diverged = true;
            break;
        }
        traj.total_cost += cost;
        traj.stage_costs.push(cost);
        traj.controls.push(u);
        if traj.exited_domain_at.is_none() && outside(&next) {
            traj.exited_domain_at = Some(k + 1);
        }
        traj.states.push(next.clone());
        x = next;
    }
    if !traj.reached_stop_radius && norm(&x) <= cfg.stop_radius {
        traj.reached_stop_radius = true;
    }
    Ok(traj)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    pub horizon: usize,
    pub max_horizon: usize,
    /// Required `‖x_H‖`; the horizon is doubled until it is met.
    pub terminal_tolerance: f64,
    pub grad_tolerance: f64,
    pub max_iterations: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            horizon: 2000,
            max_horizon: 32000,
            terminal_tolerance: 1e-3,
            grad_tolerance: 1e-8,
            max_iterations: 20000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub controls: Vec<Vec<f64>>,
    pub states: Vec<Vec<f64>>,
    pub cost: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub horizon: usize,
}

impl OracleResult {
    pub fn trajectory(&self, model: &SystemModel) -> Trajectory {
        let stage_costs: Vec<f64> = self
            .states
            .iter()
            .zip(&self.controls)
            .map(|(x, u)| model.utility(x, u))
            .collect();
        Trajectory {
            total_cost: stage_costs.iter().sum(),
            states: self.states.clone(),
            controls: self.controls.clone(),
            stage_costs,
            exited_domain_at: None,
            reached_stop_radius: false,
            diverged: false,
        }
    }
}

fn rollout(
    model: &SystemModel,
    x0: &[f64],
    controls: &[Vec<f64>],
) -> Result<(Vec<Vec<f64>>, f64), DynamicsError> {
    let mut states = Vec::with_capacity(controls.len() + 1);
    states.push(x0.to_vec());
    let mut cost = 0.0;
    for u in controls {
        let x = states.last().unwrap();
        cost += model.utility(x, u);
        let next = model.step(x, u)?;
        states.push(next);
    }
    Ok((states, cost))
}

/// `∂J/∂u_k` by the adjoint recursion `λ_k = 2Qx_k + A_kᵀλ_{k+1}`.
fn cost_gradient(
    model: &SystemModel,
    states: &[Vec<f64>],
    controls: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>, DynamicsError> {
    let (n, m) = (model.state_dim(), model.control_dim());
    let q = model.state_weight();
    let r = model.control_weight();
    let g = model.input_map();
    let mut lambda = vec![0.0; n];
    let mut grad = vec![vec![0.0; m]; controls.len()];
    for k in (0..controls.len()).rev() {
        let x = &states[k];
        let u = &controls[k];
        for a in 0..m {
            let ru: f64 = (0..m).map(|b| r[(a, b)] * u[b]).sum();
            let gl: f64 = (0..n).map(|i| g[(i, a)] * lambda[i]).sum();
            grad[k][a] = 2.0 * ru + gl;
        }
        let jac = model.drift_jacobian(x)?;
        lambda = (0..n)
            .map(|j| {
                let qx: f64 = (0..n).map(|i| q[(j, i)] * x[i]).sum();
                2.0 * qx + (0..n).map(|i| jac[(i, j)] * lambda[i]).sum::<f64>()
            })
            .collect();
    }
    Ok(grad)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| p * q).sum()
}

fn unflatten(flat: &[f64], m: usize) -> Vec<Vec<f64>> {
    flat.chunks(m).map(<[f64]>::to_vec).collect()
}

/// Open-loop minimization of the truncated cost `Σ_{k<H} U(x_k, u_k)` over
/// the raw control sequence, using adjoint gradients with limited-memory
/// BFGS directions and Armijo backtracking.
///
/// `initial` seeds the sequence (zeros when absent, padded with zeros to
/// the horizon). The horizon is doubled while `‖x_H‖` exceeds the terminal
/// tolerance.
pub fn open_loop_oracle(
    model: &SystemModel,
    x0: &[f64],
    cfg: &OracleConfig,
    initial: Option<&[Vec<f64>]>,
) -> Result<OracleResult, SimError> {
    let m = model.control_dim();
    let mut horizon = cfg.horizon.max(1);
    let mut seed: Vec<Vec<f64>> = initial.map(<[_]>::to_vec).unwrap_or_default();
    loop {
        seed.resize(horizon, vec![0.0; m]);
        seed.truncate(horizon);
        let result = descend(model, x0, seed, cfg)?;
        let terminal = norm(result.states.last().unwrap());
        if terminal <= cfg.terminal_tolerance {
            return Ok(OracleResult { horizon, ..result });
        }
        if horizon * 2 > cfg.max_horizon {
            return Err(SimError::HorizonTooShort {
                horizon,
                terminal_norm: terminal,
            });
        }
        horizon *= 2;
        seed = result.controls;
    }
}

const LBFGS_MEMORY: usize = 12;

fn descend(
    model: &SystemModel,
    x0: &[f64],
    controls: Vec<Vec<f64>>,
    cfg: &OracleConfig,
) -> Result<OracleResult, SimError> {
    let m = model.control_dim();
    let eval = |flat: &[f64]| -> Result<(Vec<Vec<f64>>, f64), DynamicsError> {
        rollout(model, x0, &unflatten(flat, m))
    };
    let gradient = |flat: &[f64], states: &[Vec<f64>]| -> Result<Vec<f64>, DynamicsError> {
        Ok(cost_gradient(model, states, &unflatten(flat, m))?
            .into_iter()
            .flatten()
            .collect())
    };
    let mut u: Vec<f64> = controls.into_iter().flatten().collect();
    let (mut states, mut cost) = eval(&u)?;
    let mut grad = gradient(&u, &states)?;
    let mut grad_norm = dot(&grad, &grad).sqrt();
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut iterations = 0;
    while grad_norm > cfg.grad_tolerance {
        if iterations == cfg.max_iterations {
            return Err(SimError::OracleStagnation {
                cost,
                grad_norm,
                iterations,
            });
        }
        iterations += 1;
        // two-loop recursion
        let mut dir: Vec<f64> = grad.iter().map(|g| -g).collect();
        let mut alphas = Vec::with_capacity(history.len());
        for (s, y, rho) in history.iter().rev() {
            let a = rho * dot(s, &dir);
            dir.iter_mut().zip(y).for_each(|(d, yi)| *d -= a * yi);
            alphas.push(a);
        }
        let gamma = history
            .back()
            .map_or(1.0 / (1.0 + grad_norm), |(s, y, _)| dot(s, y) / dot(y, y));
        dir.iter_mut().for_each(|d| *d *= gamma);
        for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &dir);
            dir.iter_mut().zip(s).for_each(|(d, si)| *d += (a - b) * si);
        }
        let mut slope = dot(&grad, &dir);
        if !(slope < 0.0) {
            history.clear();
            dir = grad.iter().map(|g| -g / (1.0 + grad_norm)).collect();
            slope = dot(&grad, &dir);
        }
        let mut t = 1.0;
        let (trial, trial_states, trial_cost) = loop {
            let trial: Vec<f64> = u.iter().zip(&dir).map(|(a, d)| a + t * d).collect();
            match eval(&trial) {
                Ok((s, c)) if c <= cost + 1e-4 * t * slope => break (trial, s, c),
                _ => {}
            }
            t *= 0.5;
            if t < 1e-20 {
                return Err(SimError::OracleStagnation {
                    cost,
                    grad_norm,
                    iterations,
                });
            }
        };
        let new_grad = gradient(&trial, &trial_states)?;
        let s: Vec<f64> = trial.iter().zip(&u).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = new_grad.iter().zip(&grad).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-16 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if history.len() == LBFGS_MEMORY {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        let decrease = cost - trial_cost;
        u = trial;
        states = trial_states;
        cost = trial_cost;
        grad = new_grad;
        grad_norm = dot(&grad, &grad).sqrt();
        if decrease <= 4.0 * f64::EPSILON * cost.abs() {
            // no further progress representable in the cost
            break;
        }
    }
    let controls = unflatten(&u, m);
    Ok(OracleResult {
        horizon: controls.len(),
        controls,
        states,
        cost,
        grad_norm,
        iterations,
    })
}

/// `V̲(x₀) ≤ V̂(x₀) ≤ V̄(x₀)` at one initial state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub lower: f64,
    pub plain: f64,
    pub upper: f64,
    pub ordered: bool,
}

pub fn bound_check(
    plain: &LinearCritic,
    upper: &LinearCritic,
    lower: &LinearCritic,
    x0: &[f64],
) -> BoundReport {
    let (l, p, u) = (lower.value(x0), plain.value(x0), upper.value(x0));
    BoundReport {
        lower: l,
        plain: p,
        upper: u,
        ordered: l <= p && p <= u,
    }
}
