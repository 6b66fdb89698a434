//! Small nonlinear-programming toolkit: hyper-dual automatic differentiation,
//! banded LU, and a primal-dual interior-point solver for problems whose KKT
//! matrix can be ordered into a narrow band (optimal-control transcriptions).

pub mod ad;
pub mod band;
mod ipm;

pub use ipm::{InteriorPoint, IpmOptions, IpmResult, IpmStatus, IterationLog, KktReport};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NlpError {
    #[error("KKT matrix is singular at column {column}")]
    SingularMatrix { column: usize },
    #[error("invalid problem structure: {0}")]
    BadStructure(String),
}

/// Entry of the KKT ordering: a primal variable or an equality constraint.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KktEntry {
    Var(usize),
    Con(usize),
}

/// `min f(x)` subject to `c(x) = 0` and `l <= x <= u`.
pub trait NlpProblem {
    fn num_vars(&self) -> usize;
    fn num_constraints(&self) -> usize;
    /// Lower and upper bounds; use infinities for free directions.
    fn bounds(&self) -> (Vec<f64>, Vec<f64>);
    fn objective(&self, x: &[f64]) -> f64;
    fn constraints(&self, x: &[f64], c: &mut [f64]);
    /// `(row, col)` pairs of the constraint Jacobian.
    fn jacobian_structure(&self) -> Vec<(usize, usize)>;
    /// `(i, j)` pairs with `i >= j` of the Lagrangian Hessian.
    fn hessian_structure(&self) -> Vec<(usize, usize)>;
    /// Objective gradient, Jacobian values and the Hessian of
    /// `f + lambda^T c`, in the order given by the structure methods.
    fn derivatives(&self, x: &[f64], lambda: &[f64], grad: &mut [f64], jac: &mut [f64], hess: &mut [f64]);

    /// Permutation of the KKT system that keeps it banded. The default puts
    /// all variables first, which is only sensible for small problems.
    fn kkt_ordering(&self) -> Vec<KktEntry> {
        (0..self.num_vars())
            .map(KktEntry::Var)
            .chain((0..self.num_constraints()).map(KktEntry::Con))
            .collect()
    }
}
