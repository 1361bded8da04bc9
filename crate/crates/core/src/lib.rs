//! Numeric core: dense matrices, elementwise nonlinearities, analytic
//! derivatives, a finite-difference oracle, a symmetric eigensolver, and a
//! small reverse-mode tape.
//!
//! All math is generic over the scalar type through the [`Real`] trait
//! (`f32` or `f64`); the concrete aliases at the crate root fix `f64`, which
//! is the working precision everything downstream verifies against.

pub mod eigen;
pub mod error;
pub mod fdiff;
pub mod matrix;
pub mod ops;
pub mod simplex;
pub mod tape;

pub use error::CoreError;
pub use matrix::DenseMatrix;
pub use simplex::SimplexVector;
pub use tape::{Graph, PairMetric, Var};

use std::fmt::{Debug, Display};

/// Floating-point scalar the numeric core is generic over.
pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::NumAssignOps
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from an `f64` constant.
    fn cast(x: f64) -> Self {
        Self::from_f64(x).expect("f64 constant not representable")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Double-precision matrix, the universal tensor carrier.
pub type Mat = DenseMatrix<f64>;
/// Single-precision matrix.
pub type Mat32 = DenseMatrix<f32>;
/// Double-precision point on the probability simplex.
pub type Simplex = SimplexVector<f64>;
/// Double-precision reverse-mode tape.
pub type Tape = Graph<f64>;
