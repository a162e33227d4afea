use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::NdFloat;
use num_traits::FromPrimitive;

/// Floating point scalar used throughout the model: `f32` by default, `f64`
/// for gradient checking.
pub trait Real: NdFloat + FromPrimitive + Sum + Default + Debug + Display {
    /// Checkpoint dtype tag for this scalar.
    const DTYPE: crate::checkpoint::DType;

    fn erf(self) -> Self;

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite conversion")
    }
}

impl Real for f32 {
    const DTYPE: crate::checkpoint::DType = crate::checkpoint::DType::F32;

    fn erf(self) -> Self {
        libm::erff(self)
    }
}

impl Real for f64 {
    const DTYPE: crate::checkpoint::DType = crate::checkpoint::DType::F64;

    fn erf(self) -> Self {
        libm::erf(self)
    }
}
