use std::fmt::{Debug, Display};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssignOps};

/// Floating point type usable by the numerical modules.
///
/// Implemented for `f32` and `f64`. Gradient checks and the pipeline run in
/// `f64`; `f32` is supported for inference and experiments.
pub trait Scalar:
    Float + FromPrimitive + NumAssignOps + LinalgScalar + ScalarOperand + Debug + Display + Send + Sync + 'static
{
    /// Converts an `f64` literal. Never fails for the finite values used here.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("finite literal")
    }

    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count fits in float")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl<T> Scalar for T where
    T: Float + FromPrimitive + NumAssignOps + LinalgScalar + ScalarOperand + Debug + Display + Send + Sync + 'static
{
}
