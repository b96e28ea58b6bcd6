//! Non-repeating multivariate monomial features, linear-in-weight critics
//! and actors over them, and the least-squares fit that trains both.
//!
//! Terms are enumerated in graded lexicographic order: ascending total
//! degree, and within one degree lexicographically descending exponent
//! tuples (`x₁² , x₁x₂, x₂²` for two variables). The order is part of the
//! weight file format.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const TERM_ORDER: &str = "grlex";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BasisError {
    #[error("basis configuration: {0}")]
    Config(String),
    #[error("weight shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FitError {
    #[error("least-squares system is rank deficient (smallest singular value {smallest_singular_value:e}, largest {largest_singular_value:e})")]
    IllConditioned {
        smallest_singular_value: f64,
        largest_singular_value: f64,
    },
    #[error("least-squares inputs: {0}")]
    Input(String),
}

/// Ordered set of monomials `∏ᵢ xᵢ^{eᵢ}` of selected total degrees.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "BasisRepr", into = "BasisRepr")]
pub struct PolynomialBasis {
    dim: usize,
    degrees: Vec<u32>,
    terms: Vec<Vec<u32>>,
    table: MonomialTable,
}

/// Every monomial of degree `0..=max_degree`, each built from a lower one
/// by a single multiplication, plus the table positions each basis term
/// and each of its partial derivatives read from.
#[derive(Debug, Clone, PartialEq, Eq)]
struct MonomialTable {
    /// `(parent, var)`: entry `k` is entry `parent` times `x[var]`.
    recipe: Vec<(usize, usize)>,
    term_index: Vec<usize>,
    /// Per term: `(var, exponent, index of the term divided by x[var])`.
    partials: Vec<Vec<(usize, u32, usize)>>,
}

impl MonomialTable {
    fn build(dim: usize, max_degree: u32, terms: &[Vec<u32>]) -> Self {
        let mut all: Vec<Vec<u32>> = Vec::new();
        for d in 0..=max_degree {
            all.extend(monomials_of_degree(dim, d));
        }
        let index: std::collections::HashMap<&[u32], usize> = all
            .iter()
            .enumerate()
            .map(|(k, e)| (e.as_slice(), k))
            .collect();
        let lower = |e: &[u32], var: usize| {
            let mut p = e.to_vec();
            p[var] -= 1;
            index[p.as_slice()]
        };
        let recipe = all
            .iter()
            .map(|e| match e.iter().position(|&v| v > 0) {
                Some(var) => (lower(e, var), var),
                None => (0, 0),
            })
            .collect();
        let term_index = terms.iter().map(|t| index[t.as_slice()]).collect();
        let partials = terms
            .iter()
            .map(|t| {
                (0..dim)
                    .filter(|&i| t[i] > 0)
                    .map(|i| (i, t[i], lower(t, i)))
                    .collect()
            })
            .collect();
        MonomialTable {
            recipe,
            term_index,
            partials,
        }
    }

    fn fill(&self, x: &[f64]) -> Vec<f64> {
        let mut m = vec![1.0; self.recipe.len()];
        for k in 1..m.len() {
            let (parent, var) = self.recipe[k];
            m[k] = m[parent] * x[var];
        }
        m
    }
}

#[derive(Serialize, Deserialize)]
struct BasisRepr {
    dim: usize,
    degrees: Vec<u32>,
    term_order: String,
}

impl TryFrom<BasisRepr> for PolynomialBasis {
    type Error = BasisError;
    fn try_from(r: BasisRepr) -> Result<Self, Self::Error> {
        if r.term_order != TERM_ORDER {
            return Err(BasisError::Config(format!(
                "unsupported term order {:?}",
                r.term_order
            )));
        }
        PolynomialBasis::new(r.dim, &r.degrees)
    }
}

impl From<PolynomialBasis> for BasisRepr {
    fn from(b: PolynomialBasis) -> Self {
        BasisRepr {
            dim: b.dim,
            degrees: b.degrees,
            term_order: TERM_ORDER.to_string(),
        }
    }
}

/// Exponent tuples of total degree `degree` in `dim` variables, in
/// lexicographically descending order.
fn monomials_of_degree(dim: usize, degree: u32) -> Vec<Vec<u32>> {
    fn rec(pos: usize, remaining: u32, cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if pos + 1 == cur.len() {
            cur[pos] = remaining;
            out.push(cur.clone());
            return;
        }
        for e in (0..=remaining).rev() {
            cur[pos] = e;
            rec(pos + 1, remaining - e, cur, out);
        }
    }
    let mut out = Vec::new();
    rec(0, degree, &mut vec![0; dim], &mut out);
    out
}

impl PolynomialBasis {
    pub fn new(dim: usize, degrees: &[u32]) -> Result<Self, BasisError> {
        if dim == 0 {
            return Err(BasisError::Config("dimension must be at least 1".into()));
        }
        if degrees.is_empty() {
            return Err(BasisError::Config("degree set is empty".into()));
        }
        if degrees.contains(&0) {
            return Err(BasisError::Config("degrees must be at least 1".into()));
        }
        let mut degrees = degrees.to_vec();
        degrees.sort_unstable();
        degrees.dedup();
        let terms: Vec<Vec<u32>> = degrees
            .iter()
            .flat_map(|&d| monomials_of_degree(dim, d))
            .collect();
        let table = MonomialTable::build(dim, *degrees.last().unwrap(), &terms);
        Ok(PolynomialBasis {
            dim,
            degrees,
            terms,
            table,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn degrees(&self) -> &[u32] {
        &self.degrees
    }

    pub fn min_degree(&self) -> u32 {
        self.degrees[0]
    }

    pub fn terms(&self) -> &[Vec<u32>] {
        &self.terms
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.dim);
        let m = self.table.fill(x);
        for (o, &k) in out.iter_mut().zip(&self.table.term_index) {
            *o = m[k];
        }
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        self.eval_into(x, &mut out);
        out
    }

    /// Jacobian of the feature map, `len() × dim`.
    pub fn gradient(&self, x: &[f64]) -> DMatrix<f64> {
        let m = self.table.fill(x);
        let mut jac = DMatrix::zeros(self.len(), self.dim);
        for (j, parts) in self.table.partials.iter().enumerate() {
            for &(i, e, k) in parts {
                jac[(j, i)] = e as f64 * m[k];
            }
        }
        jac
    }

    /// `Σⱼ wⱼ φⱼ(x)`.
    pub fn weighted_value(&self, w: &[f64], x: &[f64]) -> f64 {
        let m = self.table.fill(x);
        self.table
            .term_index
            .iter()
            .zip(w)
            .map(|(&k, wj)| wj * m[k])
            .sum()
    }

    /// `Σⱼ wⱼ φⱼ(x)` and its gradient in one pass.
    pub fn weighted_value_and_gradient(&self, w: &[f64], x: &[f64]) -> (f64, Vec<f64>) {
        let m = self.table.fill(x);
        let mut value = 0.0;
        let mut grad = vec![0.0; self.dim];
        for ((&k, parts), wj) in self
            .table
            .term_index
            .iter()
            .zip(&self.table.partials)
            .zip(w)
        {
            value += wj * m[k];
            for &(i, e, p) in parts {
                grad[i] += wj * e as f64 * m[p];
            }
        }
        (value, grad)
    }

    /// Rows of the design matrix for a list of states.
    pub fn design_matrix(&self, states: &[Vec<f64>]) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(states.len(), self.len());
        let mut row = vec![0.0; self.len()];
        for (p, x) in states.iter().enumerate() {
            self.eval_into(x, &mut row);
            for (j, v) in row.iter().enumerate() {
                m[(p, j)] = *v;
            }
        }
        m
    }
}

/// `V̂(x) = Wᵀφ(x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CriticRepr")]
pub struct LinearCritic {
    basis: PolynomialBasis,
    weights: Vec<f64>,
}

#[derive(Deserialize)]
struct CriticRepr {
    basis: PolynomialBasis,
    weights: Vec<f64>,
}

impl TryFrom<CriticRepr> for LinearCritic {
    type Error = BasisError;
    fn try_from(r: CriticRepr) -> Result<Self, Self::Error> {
        LinearCritic::new(r.basis, r.weights)
    }
}

impl LinearCritic {
    pub fn new(basis: PolynomialBasis, weights: Vec<f64>) -> Result<Self, BasisError> {
        if weights.len() != basis.len() {
            return Err(BasisError::Shape {
                expected: basis.len().to_string(),
                got: weights.len().to_string(),
            });
        }
        Ok(LinearCritic { basis, weights })
    }

    pub fn zero(basis: PolynomialBasis) -> Self {
        let weights = vec![0.0; basis.len()];
        LinearCritic { basis, weights }
    }

    pub fn basis(&self) -> &PolynomialBasis {
        &self.basis
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn with_weights(&self, weights: Vec<f64>) -> Result<Self, BasisError> {
        LinearCritic::new(self.basis.clone(), weights)
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        self.basis.weighted_value(&self.weights, x)
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        self.basis.weighted_value_and_gradient(&self.weights, x).1
    }

    pub fn value_and_gradient(&self, x: &[f64]) -> (f64, Vec<f64>) {
        self.basis.weighted_value_and_gradient(&self.weights, x)
    }
}

/// `ĥ(x) = W_aᵀσ(x)` with `W_a` of shape `n_a × m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ActorRepr", into = "ActorRepr")]
pub struct LinearActor {
    basis: PolynomialBasis,
    weights: DMatrix<f64>,
}

#[derive(Serialize, Deserialize)]
struct ActorRepr {
    basis: PolynomialBasis,
    weights: Vec<Vec<f64>>,
}

impl TryFrom<ActorRepr> for LinearActor {
    type Error = BasisError;
    fn try_from(r: ActorRepr) -> Result<Self, Self::Error> {
        let m = r.weights.first().map_or(0, Vec::len);
        if r.weights.iter().any(|row| row.len() != m) || m == 0 {
            return Err(BasisError::Shape {
                expected: "rectangular weight rows".into(),
                got: "ragged or empty rows".into(),
            });
        }
        let w = DMatrix::from_fn(r.weights.len(), m, |i, j| r.weights[i][j]);
        LinearActor::new(r.basis, w)
    }
}

impl From<LinearActor> for ActorRepr {
    fn from(a: LinearActor) -> Self {
        ActorRepr {
            weights: crate::dynamics::matrix_to_rows(&a.weights),
            basis: a.basis,
        }
    }
}

impl LinearActor {
    pub fn new(basis: PolynomialBasis, weights: DMatrix<f64>) -> Result<Self, BasisError> {
        if weights.nrows() != basis.len() || weights.ncols() == 0 {
            return Err(BasisError::Shape {
                expected: format!("{}×m", basis.len()),
                got: format!("{}×{}", weights.nrows(), weights.ncols()),
            });
        }
        Ok(LinearActor { basis, weights })
    }

    pub fn basis(&self) -> &PolynomialBasis {
        &self.basis
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn control_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn control(&self, x: &[f64]) -> Vec<f64> {
        let feats = self.basis.eval(x);
        (0..self.weights.ncols())
            .map(|k| {
                feats
                    .iter()
                    .enumerate()
                    .map(|(j, f)| f * self.weights[(j, k)])
                    .sum()
            })
            .collect()
    }
}

/// SVD of a design matrix, reusable across right-hand sides.
///
/// The training samples stay fixed over all value iterations, so the
/// factorization is computed once per run and every Bellman sweep only
/// pays for a projection.
#[derive(Debug, Clone)]
pub struct LeastSquares {
    u: DMatrix<f64>,
    singular_values: DVector<f64>,
    v_t: DMatrix<f64>,
    rows: usize,
    cols: usize,
}

impl LeastSquares {
    pub fn factor(features: &DMatrix<f64>) -> Result<Self, FitError> {
        let (rows, cols) = features.shape();
        if rows == 0 || cols == 0 {
            return Err(FitError::Input("empty design matrix".into()));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(FitError::Input("non-finite feature value".into()));
        }
        if rows < cols {
            log::warn!("least squares: {rows} samples for {cols} unknowns");
        }
        let svd = features.clone().svd(true, true);
        Ok(LeastSquares {
            u: svd.u.expect("requested U"),
            singular_values: svd.singular_values,
            v_t: svd.v_t.expect("requested Vᵀ"),
            rows,
            cols,
        })
    }

    pub fn largest_singular_value(&self) -> f64 {
        self.singular_values.iter().copied().fold(0.0, f64::max)
    }

    /// Smallest singular value, counting the missing ones of a wide
    /// system as zero.
    pub fn smallest_singular_value(&self) -> f64 {
        if self.rows < self.cols {
            return 0.0;
        }
        self.singular_values
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    pub fn is_rank_deficient(&self) -> bool {
        let smax = self.largest_singular_value();
        let tol = self.rows.max(self.cols) as f64 * f64::EPSILON * smax;
        smax == 0.0 || self.smallest_singular_value() <= tol
    }

    /// `1e-10 · σ_max²`, used when plain least squares is singular.
    pub fn fallback_ridge(&self) -> f64 {
        1e-10 * self.largest_singular_value().powi(2)
    }

    /// Minimizer of `‖A W − T‖² + ridge·‖W‖²`.
    pub fn solve(&self, targets: &DMatrix<f64>, ridge: f64) -> Result<DMatrix<f64>, FitError> {
        if targets.nrows() != self.rows {
            return Err(FitError::Input(format!(
                "{} target rows for {} samples",
                targets.nrows(),
                self.rows
            )));
        }
        if !(ridge >= 0.0 && ridge.is_finite()) {
            return Err(FitError::Input(format!("invalid ridge {ridge}")));
        }
        if ridge == 0.0 && self.is_rank_deficient() {
            return Err(FitError::IllConditioned {
                smallest_singular_value: self.smallest_singular_value(),
                largest_singular_value: self.largest_singular_value(),
            });
        }
        let mut proj = self.u.transpose() * targets;
        for (k, s) in self.singular_values.iter().enumerate() {
            let f = if ridge == 0.0 {
                1.0 / s
            } else {
                s / (s * s + ridge)
            };
            proj.row_mut(k).scale_mut(f);
        }
        Ok(self.v_t.transpose() * proj)
    }

    /// Plain least squares, retrying with [`Self::fallback_ridge`] on rank
    /// deficiency. Returns the weights and the ridge that was used.
    pub fn solve_with_fallback(
        &self,
        targets: &DMatrix<f64>,
    ) -> Result<(DMatrix<f64>, f64), FitError> {
        match self.solve(targets, 0.0) {
            Ok(w) => Ok((w, 0.0)),
            Err(FitError::IllConditioned { .. }) => {
                let ridge = self.fallback_ridge();
                if ridge == 0.0 {
                    return Ok((DMatrix::zeros(self.cols, targets.ncols()), 0.0));
                }
                log::warn!(
                    "rank-deficient fit (σ_min = {:e}); falling back to ridge {ridge:e}",
                    self.smallest_singular_value()
                );
                Ok((self.solve(targets, ridge)?, ridge))
            }
            Err(e) => Err(e),
        }
    }
}

/// One-shot least-squares fit of `features · W ≈ targets`.
pub fn least_squares_fit(
    features: &DMatrix<f64>,
    targets: &DMatrix<f64>,
    ridge: f64,
) -> Result<DMatrix<f64>, FitError> {
    LeastSquares::factor(features)?.solve(targets, ridge)
}
