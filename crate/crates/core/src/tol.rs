//! Numerical tolerances shared by the library and its test suites.

/// Clamp applied to predicted confidences before taking logarithms.
pub const BCE_EPS: f64 = 1e-7;

/// Finite-difference step used by gradient checks at f64.
pub const FD_EPS: f64 = 1e-5;

/// Accepted finite-difference step range for [`crate::gradcheck::grad_check`].
pub const FD_EPS_MIN: f64 = 1e-7;
pub const FD_EPS_MAX: f64 = 1e-3;

/// Max relative gradient error for single primitives and modules.
pub const GRAD_REL_OP: f64 = 1e-4;

/// Max relative gradient error for the whole pipeline.
pub const GRAD_REL_PIPELINE: f64 = 1e-3;

/// Agreement with brute-force attention / gating / loss oracles.
pub const ORACLE_ABS: f64 = 1e-10;

/// Agreement of convolution with the nested-loop oracle.
pub const CONV_ABS: f64 = 1e-12;

/// Softmax rows must sum to one within this.
pub const SOFTMAX_SUM: f64 = 1e-12;
