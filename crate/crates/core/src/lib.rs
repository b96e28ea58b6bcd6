//! Approximate value iteration (AVI) for deterministic control-affine
//! plants with quadratic control cost, plus the certificate machinery for
//! the resulting neurocontroller: error bound `c`, bounding value
//! functions, actor-error stability test and region-of-attraction level.

// `!(a < b)` is used on purpose so that NaN fails every check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod avi;
pub mod basis;
pub mod certify;
pub mod dynamics;
pub mod sim;

pub use avi::{
    run_avi, run_avi_with, run_coupled, solve_control, train_actor, AviConfig, AviError, AviRun,
    CoupledRuns, InnerConfig, RidgePolicy,
};
pub use basis::{least_squares_fit, LeastSquares, LinearActor, LinearCritic, PolynomialBasis};
pub use certify::{
    build_grid, issue_certificate, Certificate, CertifyError, CertifyOptions, EvaluationGrid,
};
pub use dynamics::{DomainBox, Drift, DynamicsError, SystemModel};
pub use sim::{
    bound_check, open_loop_oracle, simulate, OracleConfig, SimConfig, SimError, Trajectory,
};

pub use nalgebra::DMatrix;
