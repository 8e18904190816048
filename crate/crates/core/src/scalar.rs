//! Scalar abstraction so the whole stack runs in either f32 or f64.
//!
//! Training and inference use f32; gradient-check builds instantiate the
//! same code with f64 to isolate finite-difference noise from kernel bugs.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, NumAssign, ToPrimitive};

/// On-disk dtype tag used by the checkpoint and dataset containers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }
}

/// Element type of all tensors in the toolkit.
pub trait Scalar:
    Float + NumAssign + ToPrimitive + Sum + Default + Debug + Display + Send + Sync + 'static
{
    const DTYPE: Dtype;

    fn from_f64(x: f64) -> Self {
        Self::from(x).expect("f64 conversion")
    }

    fn to_f64x(self) -> f64 {
        self.to_f64().expect("finite scalar")
    }

    fn from_usize(x: usize) -> Self {
        Self::from(x as f64).expect("usize conversion")
    }
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;
}
