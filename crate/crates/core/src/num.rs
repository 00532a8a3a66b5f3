//! Scalar abstraction over the element types the numeric core supports.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps};

/// Element type of real-valued tensors.
///
/// Everything the math core needs from a float, bundled so signatures stay
/// readable. Implemented for `f32` (the training precision) and `f64` (used
/// by oracles and finite-difference checks).
pub trait Scalar:
    Float + FromPrimitive + NumAssignOps + Sum + Default + Copy + Send + Sync + Debug + Display + 'static
{
    /// Lossy conversion from `f64`.
    fn cast(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 is representable")
    }

    /// Widening conversion to `f64`.
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar is representable as f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
