//! Post-training certification of an AVI run and its actor.
//!
//! Approximation errors `εⁱ` are re-evaluated on an equidistant lattice that
//! was not used for training; the bound constant `c = max |εⁱ| / U(x,0)`,
//! the termination residual `δ(x)`, the actor error `μ(x)` and the
//! control-Lipschitz constants `L_U`, `L_V` then decide the two stability
//! conditions
//!
//! ```text
//! δ(x) < (1 − c)·U(x,0)                        (x ≠ 0)
//! ‖μ(x)‖ ≤ ((1 − c)·U(x,0) − δ(x)) / (L_U + L_V)
//! ```
//!
//! and the region-of-attraction level `r̄` is the largest `r` whose critic
//! sublevel set stays inside the domain.

use std::collections::VecDeque;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::avi::{solve_control, AviError, AviRun, InnerConfig};
use crate::basis::{LinearActor, LinearCritic};
use crate::dynamics::{DomainBox, SystemModel};

/// States with `U(x,0)` below this are left out of ratios against `U(x,0)`.
pub const DEFAULT_EXCLUSION_THRESHOLD: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum CertifyError {
    #[error(transparent)]
    Avi(#[from] AviError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("critic is not positive at x = {state:?} (value {value:e}); no sublevel-set estimate exists")]
    PositivityViolation { state: Vec<f64>, value: f64 },
    #[error("csv export: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Equidistant, corner-inclusive lattice over a box.
#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationGrid {
    domain: DomainBox,
    per_axis: usize,
    states: Vec<Vec<f64>>,
}

fn lattice_coordinate(lo: f64, hi: f64, k: usize, per_axis: usize) -> f64 {
    let t = k as f64 / (per_axis - 1) as f64;
    lo * (1.0 - t) + hi * t
}

fn lattice_states(lower: &[f64], upper: &[f64], per_axis: usize) -> Vec<Vec<f64>> {
    let n = lower.len();
    let total = per_axis.pow(n as u32);
    (0..total)
        .map(|mut flat| {
            // last axis varies fastest
            let mut x = vec![0.0; n];
            for i in (0..n).rev() {
                let k = flat % per_axis;
                flat /= per_axis;
                x[i] = lattice_coordinate(lower[i], upper[i], k, per_axis);
            }
            x
        })
        .collect()
}

impl EvaluationGrid {
    pub fn new(domain: &DomainBox, per_axis: usize) -> Result<Self, CertifyError> {
        if per_axis < 2 {
            return Err(CertifyError::Config(format!(
                "grid needs at least 2 points per axis, got {per_axis}"
            )));
        }
        let states = lattice_states(domain.lower(), domain.upper(), per_axis);
        Ok(EvaluationGrid {
            domain: domain.clone(),
            per_axis,
            states,
        })
    }

    pub fn domain(&self) -> &DomainBox {
        &self.domain
    }

    pub fn per_axis(&self) -> usize {
        self.per_axis
    }

    pub fn states(&self) -> &[Vec<f64>] {
        &self.states
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    fn axis_index(&self, flat: usize, axis: usize) -> usize {
        let n = self.domain.dim();
        (flat / self.per_axis.pow((n - 1 - axis) as u32)) % self.per_axis
    }

    /// Whether lattice state `flat` lies on a face of the box.
    pub fn on_boundary(&self, flat: usize) -> bool {
        (0..self.domain.dim()).any(|i| {
            let k = self.axis_index(flat, i);
            k == 0 || k == self.per_axis - 1
        })
    }

    pub fn boundary_states(&self) -> impl Iterator<Item = &[f64]> + '_ {
        (0..self.states.len())
            .filter(|&p| self.on_boundary(p))
            .map(|p| self.states[p].as_slice())
    }
}

pub fn build_grid(domain: &DomainBox, per_axis: usize) -> Result<EvaluationGrid, CertifyError> {
    EvaluationGrid::new(domain, per_axis)
}

/// Re-evaluated approximation errors `εⁱ(y)` of a run at a set of states.
#[derive(Debug, Clone, PartialEq)]
pub struct EpsilonTable {
    iterations: usize,
    /// `per_state[p][i]`; `None` where the inner loop failed at some
    /// iteration.
    per_state: Vec<Option<Vec<f64>>>,
}

impl EpsilonTable {
    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn state_count(&self) -> usize {
        self.per_state.len()
    }

    pub fn get(&self, iteration: usize, state: usize) -> Option<f64> {
        self.per_state[state].as_ref().map(|v| v[iteration])
    }

    pub fn state(&self, state: usize) -> Option<&[f64]> {
        self.per_state[state].as_deref()
    }

    pub fn failed_states(&self) -> Vec<usize> {
        (0..self.per_state.len())
            .filter(|&p| self.per_state[p].is_none())
            .collect()
    }

    /// `maxᵢ |εⁱ(y)|` per state.
    pub fn max_abs_per_state(&self) -> Vec<Option<f64>> {
        self.per_state
            .iter()
            .map(|v| {
                v.as_ref()
                    .map(|e| e.iter().fold(0.0, |a, b| f64::max(a, b.abs())))
            })
            .collect()
    }
}

/// `εⁱ(y) = V̂ⁱ⁺¹(y) − (U(y,w) + s·U(y,0) + V̂ⁱ(f(y,w)))` for every stored
/// iteration, with `w` the inner-loop control of `V̂ⁱ` at `y` and `s` the
/// run's utility shift.
pub fn estimate_epsilon(
    model: &SystemModel,
    run: &AviRun,
    states: &[Vec<f64>],
    inner: &InnerConfig,
) -> EpsilonTable {
    let critics: Vec<LinearCritic> = (0..=run.iterations()).map(|i| run.critic(i)).collect();
    let shift = run.config.utility_shift;
    let per_state = states
        .par_iter()
        .map(|y| {
            let u0 = model.state_cost(y);
            (0..run.iterations())
                .map(|i| {
                    let sol = solve_control(model, &critics[i], y, inner).ok()?;
                    let target = model.utility(y, &sol.control)
                        + shift * u0
                        + critics[i].value(&sol.next_state);
                    Some(critics[i + 1].value(y) - target)
                })
                .collect::<Option<Vec<f64>>>()
        })
        .collect();
    EpsilonTable {
        iterations: run.iterations(),
        per_state,
    }
}

/// `c = max |εⁱ(y)| / U(y,0)` over states with `U(y,0) ≥ exclusion_threshold`.
pub fn estimate_c(
    table: &EpsilonTable,
    states: &[Vec<f64>],
    model: &SystemModel,
    exclusion_threshold: f64,
) -> Result<f64, CertifyError> {
    if states.len() != table.state_count() {
        return Err(CertifyError::Config(
            "state list does not match epsilon table".into(),
        ));
    }
    let mut c: Option<f64> = None;
    for (p, y) in states.iter().enumerate() {
        let u0 = model.state_cost(y);
        if u0 < exclusion_threshold {
            continue;
        }
        if let Some(eps) = table.state(p) {
            let worst = eps.iter().fold(0.0, |a, b| f64::max(a, b.abs()));
            c = Some(c.map_or(worst / u0, |c| c.max(worst / u0)));
        }
    }
    c.ok_or_else(|| CertifyError::Config("every state was excluded from the c estimate".into()))
}

/// `(L_U, L_V)`: maxima of `‖2uᵀR‖₂` and `‖∇V̂(f(x,u))ᵀ g‖₂` over the states,
/// with `u` taken both as the inner-loop control and as the actor output.
pub fn estimate_lipschitz(
    model: &SystemModel,
    critic: &LinearCritic,
    actor: &LinearActor,
    states: &[Vec<f64>],
    inner_controls: &[Vec<f64>],
) -> Result<(f64, f64), CertifyError> {
    if states.len() != inner_controls.len() {
        return Err(CertifyError::Config(
            "one inner control per state required".into(),
        ));
    }
    let g = model.input_map();
    let r = model.control_weight();
    let (n, m) = (model.state_dim(), model.control_dim());
    let per_state: Vec<(f64, f64)> = states
        .par_iter()
        .zip(inner_controls)
        .map(|(x, w)| {
            let mut lu = 0.0f64;
            let mut lv = 0.0f64;
            for u in [w.clone(), actor.control(x)] {
                let ru: f64 = (0..m)
                    .map(|a| (2.0 * (0..m).map(|b| r[(a, b)] * u[b]).sum::<f64>()).powi(2))
                    .sum::<f64>()
                    .sqrt();
                lu = lu.max(ru);
                let grad = critic.gradient(&model.step(x, &u)?);
                let row: f64 = (0..m)
                    .map(|a| (0..n).map(|i| grad[i] * g[(i, a)]).sum::<f64>().powi(2))
                    .sum::<f64>()
                    .sqrt();
                lv = lv.max(row);
            }
            Ok((lu, lv))
        })
        .collect::<Result<_, AviError>>()?;
    Ok(per_state
        .into_iter()
        .fold((0.0, 0.0), |(a, b), (u, v)| (a.max(u), b.max(v))))
}

/// `r̄ = min V̂` over the lattice states on the faces of the box, after
/// checking `V̂ > 0` at every non-origin lattice state.
pub fn estimate_roa(critic: &LinearCritic, grid: &EvaluationGrid) -> Result<f64, CertifyError> {
    check_positive(critic, grid.states())?;
    Ok(grid
        .boundary_states()
        .map(|x| critic.value(x))
        .fold(f64::INFINITY, f64::min))
}

fn check_positive(critic: &LinearCritic, states: &[Vec<f64>]) -> Result<(), CertifyError> {
    for x in states {
        if x.iter().all(|v| *v == 0.0) {
            continue;
        }
        let v = critic.value(x);
        if !(v > 0.0) {
            return Err(CertifyError::PositivityViolation {
                state: x.clone(),
                value: v,
            });
        }
    }
    Ok(())
}

/// Sublevel-set containment by bisection on `r`.
///
/// Every axis of the grid lattice gets one extra coordinate `shell` outside
/// each face. For a trial `r` the axis-connected component of `{V̂ ≤ r}`
/// containing the lattice point nearest the origin is flood-filled, and `r`
/// is admissible when that component reaches no shell point. With a thin
/// shell the result approaches the boundary minimum from above.
pub fn estimate_roa_bisection(
    critic: &LinearCritic,
    grid: &EvaluationGrid,
    shell: f64,
    tolerance: f64,
) -> Result<f64, CertifyError> {
    if !(shell > 0.0) {
        return Err(CertifyError::Config(format!(
            "shell must be positive, got {shell}"
        )));
    }
    check_positive(critic, grid.states())?;
    let domain = grid.domain();
    let n = domain.dim();
    let inner_n = grid.per_axis();
    let per_axis = inner_n + 2;
    let coords: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let (lo, hi) = (domain.lower()[i], domain.upper()[i]);
            let mut c = vec![lo - shell];
            c.extend((0..inner_n).map(|k| lattice_coordinate(lo, hi, k, inner_n)));
            c.push(hi + shell);
            c
        })
        .collect();
    let total = per_axis.pow(n as u32);
    let index = |p: usize, i: usize| (p / per_axis.pow((n - 1 - i) as u32)) % per_axis;
    let states: Vec<Vec<f64>> = (0..total)
        .map(|p| (0..n).map(|i| coords[i][index(p, i)]).collect())
        .collect();
    let values: Vec<f64> = states.par_iter().map(|x| critic.value(x)).collect();
    let outside: Vec<bool> = (0..total)
        .map(|p| (0..n).any(|i| matches!(index(p, i), k if k == 0 || k == per_axis - 1)))
        .collect();
    let seed = (0..total)
        .filter(|&p| !outside[p])
        .min_by(|&a, &b| {
            let na: f64 = states[a].iter().map(|v| v * v).sum();
            let nb: f64 = states[b].iter().map(|v| v * v).sum();
            na.total_cmp(&nb)
        })
        .expect("non-empty lattice");
    let escapes = |r: f64| -> bool {
        if values[seed] > r {
            return false;
        }
        let mut seen = vec![false; total];
        let mut queue = VecDeque::from([seed]);
        seen[seed] = true;
        while let Some(p) = queue.pop_front() {
            if outside[p] {
                return true;
            }
            for i in 0..n {
                let stride = per_axis.pow((n - 1 - i) as u32);
                let k = index(p, i);
                let mut nbrs = [None, None];
                if k > 0 {
                    nbrs[0] = Some(p - stride);
                }
                if k + 1 < per_axis {
                    nbrs[1] = Some(p + stride);
                }
                for q in nbrs.into_iter().flatten() {
                    if !seen[q] && values[q] <= r {
                        seen[q] = true;
                        queue.push_back(q);
                    }
                }
            }
        }
        false
    };
    let mut lo = values[seed].max(0.0);
    let mut hi = values.iter().copied().fold(lo, f64::max);
    if !escapes(hi) {
        return Ok(hi);
    }
    while hi - lo > tolerance {
        let mid = 0.5 * (lo + hi);
        if escapes(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(lo)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub state: Vec<f64>,
    pub value: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridMeta {
    pub per_axis: usize,
    pub states: usize,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CertifyOptions {
    pub exclusion_threshold: f64,
    pub inner: InnerConfig,
}

impl Default for CertifyOptions {
    fn default() -> Self {
        CertifyOptions {
            exclusion_threshold: DEFAULT_EXCLUSION_THRESHOLD,
            inner: InnerConfig::default(),
        }
    }
}

/// Stability and region-of-attraction certificate for a trained critic and
/// actor. Per-state arrays follow the grid order and are not serialized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub c: f64,
    /// `c` re-estimated at the training samples.
    pub c_training: f64,
    pub lipschitz_u: f64,
    pub lipschitz_v: f64,
    pub norm: String,
    pub delta_max: f64,
    pub mu_max: f64,
    pub control_norm_max: f64,
    /// `δ(x) < (1 − c)U(x,0)` at every non-excluded grid state.
    pub residual_condition_holds: bool,
    pub residual_witness: Option<Witness>,
    /// `max ‖μ(x)‖ / bound(x)`; below 1 when the actor error bound holds.
    pub actor_error_margin: f64,
    pub actor_error_witness: Option<Witness>,
    pub stable: bool,
    /// `None` when the critic is not positive on the grid.
    pub r_bar: Option<f64>,
    pub positivity_witness: Option<Witness>,
    pub excluded_states: usize,
    pub inner_failures: usize,
    pub iteration: usize,
    pub grid: GridMeta,
    pub critic: LinearCritic,
    #[serde(skip)]
    delta: Vec<f64>,
    #[serde(skip)]
    mu_norm: Vec<f64>,
    #[serde(skip)]
    eps_max: Vec<Option<f64>>,
}

impl Certificate {
    pub fn delta(&self, state: usize) -> f64 {
        self.delta[state]
    }

    pub fn mu_norm(&self, state: usize) -> f64 {
        self.mu_norm[state]
    }

    pub fn epsilon_max(&self, state: usize) -> Option<f64> {
        self.eps_max[state]
    }

    pub fn has_state_data(&self) -> bool {
        !self.delta.is_empty()
    }

    /// `V̂(x) ≤ r̄`.
    pub fn roa_member(&self, x: &[f64]) -> bool {
        match self.r_bar {
            Some(r) => self.critic.value(x) <= r,
            None => false,
        }
    }

    pub fn verdict(&self) -> &'static str {
        if self.stable {
            "STABLE"
        } else {
            "UNSTABLE"
        }
    }

    /// Human-readable summary.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let r_bar = self
            .r_bar
            .map_or_else(|| "n/a".to_string(), |r| format!("{r:.6}"));
        s.push_str(&format!("verdict            {}\n", self.verdict()));
        s.push_str(&format!("iteration          {}\n", self.iteration));
        s.push_str(&format!(
            "grid               {}^{} = {} states\n",
            self.grid.per_axis,
            self.grid.lower.len(),
            self.grid.states
        ));
        s.push_str(&format!("c (grid)           {:.6}\n", self.c));
        s.push_str(&format!("c (training)       {:.6}\n", self.c_training));
        s.push_str(&format!("L_U                {:.6}\n", self.lipschitz_u));
        s.push_str(&format!("L_V                {:.6}\n", self.lipschitz_v));
        s.push_str(&format!("delta max          {:.6e}\n", self.delta_max));
        s.push_str(&format!("mu max             {:.6e}\n", self.mu_max));
        s.push_str(&format!(
            "control norm max   {:.6}\n",
            self.control_norm_max
        ));
        s.push_str(&format!(
            "residual condition {}\n",
            if self.residual_condition_holds {
                "holds"
            } else {
                "VIOLATED"
            }
        ));
        s.push_str(&format!(
            "actor error margin {:.6}\n",
            self.actor_error_margin
        ));
        s.push_str(&format!("r_bar              {r_bar}\n"));
        for (name, w) in [
            ("residual witness", &self.residual_witness),
            ("actor witness", &self.actor_error_witness),
            ("positivity witness", &self.positivity_witness),
        ] {
            if let Some(w) = w {
                s.push_str(&format!(
                    "{name:<18} x = {:?}, value {:.6e}, bound {:.6e}\n",
                    w.state, w.value, w.bound
                ));
            }
        }
        s
    }

    /// Per-state CSV: state components, `U(x,0)`, `δ`, `‖μ‖`, `maxᵢ|εⁱ|`.
    pub fn write_state_csv<W: Write>(
        &self,
        grid: &EvaluationGrid,
        model: &SystemModel,
        out: W,
    ) -> Result<(), CertifyError> {
        if !self.has_state_data() || grid.len() != self.delta.len() {
            return Err(CertifyError::Precondition(
                "per-state data is not available for this grid".into(),
            ));
        }
        let mut w = csv::Writer::from_writer(out);
        let n = grid.domain().dim();
        let mut header: Vec<String> = (1..=n).map(|i| format!("x{i}")).collect();
        header.extend(["state_cost", "delta", "mu_norm", "epsilon_max"].map(String::from));
        w.write_record(&header)?;
        for (p, x) in grid.states().iter().enumerate() {
            let mut rec: Vec<String> = x.iter().map(|v| v.to_string()).collect();
            rec.push(model.state_cost(x).to_string());
            rec.push(self.delta[p].to_string());
            rec.push(self.mu_norm[p].to_string());
            rec.push(self.eps_max[p].map_or_else(String::new, |v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs every estimator on `grid` and issues the certificate for the last
/// critic of `run` together with `actor`.
pub fn issue_certificate(
    model: &SystemModel,
    run: &AviRun,
    actor: &LinearActor,
    grid: &EvaluationGrid,
    options: &CertifyOptions,
) -> Result<Certificate, CertifyError> {
    if !run.converged() {
        return Err(CertifyError::Precondition("run did not converge".into()));
    }
    if run.iterations() < 1 {
        return Err(CertifyError::Precondition(
            "termination residual needs at least one iteration".into(),
        ));
    }
    if grid.domain().dim() != model.state_dim() {
        return Err(CertifyError::Config(
            "grid dimension differs from model".into(),
        ));
    }
    let thr = options.exclusion_threshold;
    let states = grid.states();

    let eps = estimate_epsilon(model, run, states, &options.inner);
    let c = estimate_c(&eps, states, model, thr)?;
    let c_training = estimate_c(
        &estimate_epsilon(model, run, &run.samples, &options.inner),
        &run.samples,
        model,
        thr,
    )?;

    let critic = run.final_critic();
    let previous = run.critic(run.iterations() - 1);
    let inner_controls: Vec<Option<Vec<f64>>> = states
        .par_iter()
        .map(|x| {
            solve_control(model, &critic, x, &options.inner)
                .ok()
                .map(|s| s.control)
        })
        .collect();
    let inner_failures = eps
        .failed_states()
        .len()
        .max(inner_controls.iter().filter(|c| c.is_none()).count());
    let usable: Vec<usize> = (0..states.len())
        .filter(|&p| inner_controls[p].is_some())
        .collect();
    let usable_states: Vec<Vec<f64>> = usable.iter().map(|&p| states[p].clone()).collect();
    let usable_controls: Vec<Vec<f64>> = usable
        .iter()
        .map(|&p| inner_controls[p].clone().unwrap())
        .collect();
    let (lipschitz_u, lipschitz_v) =
        estimate_lipschitz(model, &critic, actor, &usable_states, &usable_controls)?;

    let delta: Vec<f64> = states
        .iter()
        .map(|x| (critic.value(x) - previous.value(x)).abs())
        .collect();
    let mu_norm: Vec<f64> = states
        .iter()
        .zip(&inner_controls)
        .map(|(x, w)| match w {
            Some(w) => actor
                .control(x)
                .iter()
                .zip(w)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt(),
            None => f64::NAN,
        })
        .collect();
    let control_norm_max = usable_controls
        .iter()
        .map(|u| u.iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0, f64::max);

    let mut residual_witness: Option<Witness> = None;
    let mut actor_error_witness: Option<Witness> = None;
    let mut margin = 0.0f64;
    let mut excluded = 0;
    let lsum = lipschitz_u + lipschitz_v;
    for (p, x) in states.iter().enumerate() {
        let u0 = model.state_cost(x);
        if u0 < thr {
            excluded += 1;
            continue;
        }
        let allowance = (1.0 - c) * u0;
        if !(delta[p] < allowance) {
            let gap = delta[p] / allowance;
            let worse = residual_witness
                .as_ref()
                .is_none_or(|w| gap > w.value / w.bound);
            if worse {
                residual_witness = Some(Witness {
                    state: x.clone(),
                    value: delta[p],
                    bound: allowance,
                });
            }
        }
        if mu_norm[p].is_nan() {
            continue;
        }
        let bound = (allowance - delta[p]) / lsum;
        let ratio = if bound > 0.0 {
            mu_norm[p] / bound
        } else {
            f64::INFINITY
        };
        if ratio > margin || actor_error_witness.is_none() {
            margin = margin.max(ratio);
            actor_error_witness = Some(Witness {
                state: x.clone(),
                value: mu_norm[p],
                bound,
            });
        }
    }
    let residual_condition_holds = residual_witness.is_none();
    let (r_bar, positivity_witness) = match estimate_roa(&critic, grid) {
        Ok(r) => (Some(r), None),
        Err(CertifyError::PositivityViolation { state, value }) => (
            None,
            Some(Witness {
                state,
                value,
                bound: 0.0,
            }),
        ),
        Err(e) => return Err(e),
    };
    let stable = residual_condition_holds && margin < 1.0;
    if stable {
        // the worst-case state is only interesting as a failure witness
        actor_error_witness = None;
    }

    Ok(Certificate {
        c,
        c_training,
        lipschitz_u,
        lipschitz_v,
        norm: "l2".into(),
        delta_max: delta.iter().copied().fold(0.0, f64::max),
        mu_max: mu_norm
            .iter()
            .copied()
            .filter(|v| !v.is_nan())
            .fold(0.0, f64::max),
        control_norm_max,
        residual_condition_holds,
        residual_witness,
        actor_error_margin: margin,
        actor_error_witness,
        stable,
        r_bar,
        positivity_witness,
        excluded_states: excluded,
        inner_failures,
        iteration: run.iterations(),
        grid: GridMeta {
            per_axis: grid.per_axis(),
            states: grid.len(),
            lower: grid.domain().lower().to_vec(),
            upper: grid.domain().upper().to_vec(),
        },
        critic,
        eps_max: eps.max_abs_per_state(),
        delta,
        mu_norm,
    })
}

/// Outcome of checking `ΔV̂(x) = V̂(f(x, ĥ(x))) − V̂(x)` inside `B_r̄`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LyapunovReport {
    pub checked: usize,
    /// Largest `ΔV̂` over checked non-origin states.
    pub max_increment: f64,
    pub decrease_violations: usize,
    /// States in `B_r̄` whose successor leaves `B_r̄`.
    pub invariance_violations: usize,
}

pub fn lyapunov_check(
    model: &SystemModel,
    critic: &LinearCritic,
    actor: &LinearActor,
    states: &[Vec<f64>],
    r_bar: f64,
) -> Result<LyapunovReport, CertifyError> {
    let rows: Vec<Option<(f64, bool)>> = states
        .par_iter()
        .map(|x| {
            let v = critic.value(x);
            if v > r_bar || x.iter().all(|c| *c == 0.0) {
                return Ok(None);
            }
            let next = model.step(x, &actor.control(x))?;
            let vn = critic.value(&next);
            Ok(Some((vn - v, vn <= r_bar)))
        })
        .collect::<Result<_, AviError>>()?;
    let mut report = LyapunovReport {
        checked: 0,
        max_increment: f64::NEG_INFINITY,
        decrease_violations: 0,
        invariance_violations: 0,
    };
    for (dv, stays) in rows.into_iter().flatten() {
        report.checked += 1;
        report.max_increment = report.max_increment.max(dv);
        if !(dv < 0.0) {
            report.decrease_violations += 1;
        }
        if !stays {
            report.invariance_violations += 1;
        }
    }
    Ok(report)
}
