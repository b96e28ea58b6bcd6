//! Discrete-time control-affine plants `x⁺ = F(x) + g·u` and the stage
//! utility `U(x, u) = Q(x) + uᵀRu`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default guard on the orbital radius below which the gravity term is
/// treated as singular.
pub const DEFAULT_R_MIN: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("state left the representable domain (non-finite successor) from x = {state:?}")]
    DomainEscape { state: Vec<f64> },
    #[error("orbital radius {radius:e} below singularity guard at x = {state:?}")]
    Singularity { state: Vec<f64>, radius: f64 },
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
}

/// The state-dependent part `F(x)` of the discrete map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Drift {
    /// Euler-discretized planar relative orbital motion about a circular
    /// destination orbit, state `(X, Y, Ẋ, Ẏ)`.
    Orbital { dt: f64, r_min: f64 },
    /// `F(x) = A x` with `A` stored row-major.
    Linear { a: Vec<Vec<f64>> },
}

impl Drift {
    fn eval(&self, x: &[f64], out: &mut [f64]) -> Result<(), DynamicsError> {
        match self {
            Drift::Orbital { dt, r_min } => {
                let r = ((1.0 + x[0]).powi(2) + x[1] * x[1]).sqrt();
                if !(r > *r_min) {
                    return Err(DynamicsError::Singularity {
                        state: x.to_vec(),
                        radius: r,
                    });
                }
                let grav = 1.0 / (r * r * r) - 1.0;
                out[0] = x[0] + dt * x[2];
                out[1] = x[1] + dt * x[3];
                out[2] = x[2] + dt * (2.0 * x[3] - (1.0 + x[0]) * grav);
                out[3] = x[3] + dt * (-2.0 * x[2] - x[1] * grav);
            }
            Drift::Linear { a } => {
                for (o, row) in out.iter_mut().zip(a) {
                    *o = row.iter().zip(x).map(|(aij, xj)| aij * xj).sum();
                }
            }
        }
        Ok(())
    }

    fn jacobian(&self, x: &[f64], out: &mut DMatrix<f64>) -> Result<(), DynamicsError> {
        match self {
            Drift::Orbital { dt, r_min } => {
                let r2 = (1.0 + x[0]).powi(2) + x[1] * x[1];
                let r = r2.sqrt();
                if !(r > *r_min) {
                    return Err(DynamicsError::Singularity {
                        state: x.to_vec(),
                        radius: r,
                    });
                }
                let k = 1.0 / (r2 * r) - 1.0;
                let r5 = 3.0 / (r2 * r2 * r);
                let (px, py) = (1.0 + x[0], x[1]);
                out.fill_with_identity();
                out[(0, 2)] += dt;
                out[(1, 3)] += dt;
                out[(2, 0)] += dt * (-k + r5 * px * px);
                out[(2, 1)] += dt * r5 * px * py;
                out[(2, 3)] += dt * 2.0;
                out[(3, 0)] += dt * r5 * px * py;
                out[(3, 1)] += dt * (-k + r5 * py * py);
                out[(3, 2)] -= dt * 2.0;
            }
            Drift::Linear { a } => {
                for (i, row) in a.iter().enumerate() {
                    for (j, v) in row.iter().enumerate() {
                        out[(i, j)] = *v;
                    }
                }
            }
        }
        Ok(())
    }
}

/// A control-affine plant with quadratic state and control weights.
///
/// `Q(x) = xᵀ Q x` covers every plant shipped here; `Q` and `R` are
/// validated as symmetric positive definite on construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "SystemModelRepr", into = "SystemModelRepr")]
pub struct SystemModel {
    n: usize,
    m: usize,
    drift: Drift,
    input_map: DMatrix<f64>,
    state_weight: DMatrix<f64>,
    control_weight: DMatrix<f64>,
    control_weight_inv: DMatrix<f64>,
    dt: f64,
}

#[derive(Serialize, Deserialize)]
struct SystemModelRepr {
    drift: Drift,
    input_map: Vec<Vec<f64>>,
    state_weight: Vec<Vec<f64>>,
    control_weight: Vec<Vec<f64>>,
    dt: f64,
}

impl TryFrom<SystemModelRepr> for SystemModel {
    type Error = DynamicsError;

    fn try_from(r: SystemModelRepr) -> Result<Self, Self::Error> {
        SystemModel::new(
            r.drift,
            rows_to_matrix(&r.input_map)?,
            rows_to_matrix(&r.state_weight)?,
            rows_to_matrix(&r.control_weight)?,
            r.dt,
        )
    }
}

impl From<SystemModel> for SystemModelRepr {
    fn from(m: SystemModel) -> Self {
        SystemModelRepr {
            drift: m.drift,
            input_map: matrix_to_rows(&m.input_map),
            state_weight: matrix_to_rows(&m.state_weight),
            control_weight: matrix_to_rows(&m.control_weight),
            dt: m.dt,
        }
    }
}

pub(crate) fn rows_to_matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>, DynamicsError> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if nrows == 0 || ncols == 0 {
        return Err(DynamicsError::InvalidModel("empty matrix".into()));
    }
    if let Some(bad) = rows.iter().find(|r| r.len() != ncols) {
        return Err(DynamicsError::InvalidModel(format!(
            "ragged matrix: row of length {} in a {}-column matrix",
            bad.len(),
            ncols
        )));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub(crate) fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

fn check_spd(name: &str, mat: &DMatrix<f64>) -> Result<(), DynamicsError> {
    if !mat.is_square() {
        return Err(DynamicsError::InvalidModel(format!(
            "{name} must be square"
        )));
    }
    let asym = (mat - mat.transpose()).amax();
    if asym > 1e-12 * mat.amax().max(1.0) {
        return Err(DynamicsError::InvalidModel(format!(
            "{name} must be symmetric"
        )));
    }
    let eig = mat.clone().symmetric_eigenvalues();
    let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
    if !(min > 0.0) {
        return Err(DynamicsError::InvalidModel(format!(
            "{name} must be positive definite (smallest eigenvalue {min:e})"
        )));
    }
    Ok(())
}

impl SystemModel {
    pub fn new(
        drift: Drift,
        input_map: DMatrix<f64>,
        state_weight: DMatrix<f64>,
        control_weight: DMatrix<f64>,
        dt: f64,
    ) -> Result<Self, DynamicsError> {
        let n = input_map.nrows();
        let m = input_map.ncols();
        if n == 0 || m == 0 {
            return Err(DynamicsError::InvalidModel("empty input map".into()));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(DynamicsError::InvalidModel(format!(
                "sampling interval must be positive, got {dt}"
            )));
        }
        match &drift {
            Drift::Orbital { dt: ddt, r_min } => {
                if n != 4 || m != 2 {
                    return Err(DynamicsError::InvalidModel(
                        "orbital drift needs n = 4, m = 2".into(),
                    ));
                }
                if !(*ddt > 0.0) || !(*r_min >= 0.0) {
                    return Err(DynamicsError::InvalidModel(
                        "orbital drift needs dt > 0 and r_min >= 0".into(),
                    ));
                }
            }
            Drift::Linear { a } => {
                if a.len() != n || a.iter().any(|r| r.len() != n) {
                    return Err(DynamicsError::InvalidModel(format!(
                        "linear drift must be {n}x{n}"
                    )));
                }
            }
        }
        if state_weight.shape() != (n, n) {
            return Err(DynamicsError::InvalidModel(format!("Q must be {n}x{n}")));
        }
        if control_weight.shape() != (m, m) {
            return Err(DynamicsError::InvalidModel(format!("R must be {m}x{m}")));
        }
        check_spd("Q", &state_weight)?;
        check_spd("R", &control_weight)?;
        let control_weight_inv = control_weight
            .clone()
            .cholesky()
            .ok_or_else(|| DynamicsError::InvalidModel("R is not invertible".into()))?
            .inverse();
        Ok(SystemModel {
            n,
            m,
            drift,
            input_map,
            state_weight,
            control_weight,
            control_weight_inv,
            dt,
        })
    }

    /// The orbital-maneuver benchmark with `Q(x) = 100·dt·xᵀx`, `R = dt·I₂`.
    pub fn orbital(dt: f64) -> Result<Self, DynamicsError> {
        Self::orbital_scaled(dt, 100.0, 1.0, DEFAULT_R_MIN)
    }

    /// Orbital plant with `Q = q_scale·dt·I₄`, `R = r_scale·dt·I₂`.
    pub fn orbital_scaled(
        dt: f64,
        q_scale: f64,
        r_scale: f64,
        r_min: f64,
    ) -> Result<Self, DynamicsError> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(DynamicsError::InvalidModel(format!(
                "sampling interval must be positive, got {dt}"
            )));
        }
        let mut g = DMatrix::zeros(4, 2);
        g[(2, 0)] = dt;
        g[(3, 1)] = dt;
        Self::new(
            Drift::Orbital { dt, r_min },
            g,
            DMatrix::identity(4, 4) * (q_scale * dt),
            DMatrix::identity(2, 2) * (r_scale * dt),
            dt,
        )
    }

    /// `x⁺ = A x + B u` with utility `xᵀQx + uᵀRu`.
    pub fn linear(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
    ) -> Result<Self, DynamicsError> {
        Self::new(
            Drift::Linear {
                a: matrix_to_rows(&a),
            },
            b,
            q,
            r,
            1.0,
        )
    }

    /// Scalar plant `x⁺ = a x + b u`, `U = q x² + r u²`.
    pub fn scalar_linear(a: f64, b: f64, q: f64, r: f64) -> Result<Self, DynamicsError> {
        Self::linear(
            DMatrix::from_element(1, 1, a),
            DMatrix::from_element(1, 1, b),
            DMatrix::from_element(1, 1, q),
            DMatrix::from_element(1, 1, r),
        )
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    pub fn control_dim(&self) -> usize {
        self.m
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn drift_kind(&self) -> &Drift {
        &self.drift
    }

    pub fn input_map(&self) -> &DMatrix<f64> {
        &self.input_map
    }

    pub fn state_weight(&self) -> &DMatrix<f64> {
        &self.state_weight
    }

    pub fn control_weight(&self) -> &DMatrix<f64> {
        &self.control_weight
    }

    pub fn control_weight_inv(&self) -> &DMatrix<f64> {
        &self.control_weight_inv
    }

    fn check_state(&self, x: &[f64]) -> Result<(), DynamicsError> {
        if x.len() != self.n {
            return Err(DynamicsError::Dimension {
                expected: self.n,
                got: x.len(),
            });
        }
        Ok(())
    }

    /// `F(x)` alone.
    pub fn drift(&self, x: &[f64]) -> Result<Vec<f64>, DynamicsError> {
        self.check_state(x)?;
        let mut out = vec![0.0; self.n];
        self.drift.eval(x, &mut out)?;
        Ok(out)
    }

    /// `∂F/∂x`; the full step's Jacobian in `u` is the constant `g`.
    pub fn drift_jacobian(&self, x: &[f64]) -> Result<DMatrix<f64>, DynamicsError> {
        self.check_state(x)?;
        let mut out = DMatrix::zeros(self.n, self.n);
        self.drift.jacobian(x, &mut out)?;
        Ok(out)
    }

    /// Adds `g·u` onto `out` in place.
    pub fn add_input(&self, u: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            for (j, uj) in u.iter().enumerate() {
                *o += self.input_map[(i, j)] * uj;
            }
        }
    }

    /// One step of the plant, `F(x) + g·u`.
    pub fn step(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>, DynamicsError> {
        if u.len() != self.m {
            return Err(DynamicsError::Dimension {
                expected: self.m,
                got: u.len(),
            });
        }
        let mut next = self.drift(x)?;
        self.add_input(u, &mut next);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(DynamicsError::DomainEscape { state: x.to_vec() });
        }
        Ok(next)
    }

    /// `Q(x)`, the utility at zero control.
    pub fn state_cost(&self, x: &[f64]) -> f64 {
        quad_form(&self.state_weight, x)
    }

    pub fn control_cost(&self, u: &[f64]) -> f64 {
        quad_form(&self.control_weight, u)
    }

    pub fn utility(&self, x: &[f64], u: &[f64]) -> f64 {
        self.state_cost(x) + self.control_cost(u)
    }

    /// `-½ R⁻¹ gᵀ p` for a costate-like vector `p ∈ ℝⁿ`.
    pub fn minimizing_control(&self, p: &[f64]) -> Vec<f64> {
        let gtp: Vec<f64> = (0..self.m)
            .map(|j| (0..self.n).map(|i| self.input_map[(i, j)] * p[i]).sum())
            .collect();
        (0..self.m)
            .map(|a| {
                -0.5 * (0..self.m)
                    .map(|b| self.control_weight_inv[(a, b)] * gtp[b])
                    .sum::<f64>()
            })
            .collect()
    }
}

fn quad_form(mat: &DMatrix<f64>, v: &[f64]) -> f64 {
    let k = v.len();
    let mut acc = 0.0;
    for i in 0..k {
        let mut row = 0.0;
        for j in 0..k {
            row += mat[(i, j)] * v[j];
        }
        acc += v[i] * row;
    }
    acc
}

/// Componentwise box `lower ≤ x ≤ upper`, the training domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DomainBoxRepr")]
pub struct DomainBox {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

#[derive(Deserialize)]
struct DomainBoxRepr {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl TryFrom<DomainBoxRepr> for DomainBox {
    type Error = DynamicsError;
    fn try_from(r: DomainBoxRepr) -> Result<Self, Self::Error> {
        DomainBox::new(r.lower, r.upper)
    }
}

impl DomainBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self, DynamicsError> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(DynamicsError::InvalidModel(
                "domain bounds must be non-empty and of equal length".into(),
            ));
        }
        for (i, (lo, hi)) in lower.iter().zip(&upper).enumerate() {
            if !(lo.is_finite() && hi.is_finite() && *lo < 0.0 && 0.0 < *hi) {
                return Err(DynamicsError::InvalidModel(format!(
                    "axis {i}: need lower < 0 < upper, got [{lo}, {hi}]"
                )));
            }
        }
        Ok(DomainBox { lower, upper })
    }

    /// `[-half_width, half_width]ⁿ`.
    pub fn symmetric(dim: usize, half_width: f64) -> Result<Self, DynamicsError> {
        Self::new(vec![-half_width; dim], vec![half_width; dim])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (lo, hi))| *lo <= *v && *v <= *hi)
    }
}
