//! Scalar abstraction for the numeric core.
//!
//! Everything numeric in this crate is generic over [`Real`], which is any
//! IEEE float with the conversions we need. The crate root exports concrete
//! `f64` aliases; `f32` works too but the default tolerances assume `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

pub trait Real:
    Float + FromPrimitive + ToPrimitive + NumAssignOps + Sum + Debug + Display + Send + Sync
{
    /// Lossy conversion from `f64`, for literals and rng draws.
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 literal converts to Real")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("Real converts to f64")
    }
}

impl<T> Real for T where
    T: Float + FromPrimitive + ToPrimitive + NumAssignOps + Sum + Debug + Display + Send + Sync
{
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrips_both_widths() {
        assert_eq!(f64::of(1.5), 1.5_f64);
        assert_eq!(f32::of(1.5), 1.5_f32);
        assert_eq!(0.25_f32.to_f64_lossy(), 0.25_f64);
    }
}
