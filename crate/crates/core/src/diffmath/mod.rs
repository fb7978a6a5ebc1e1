//! Dense tensor arithmetic with reverse-mode differentiation.
//!
//! Small by design: enough primitives for the recurrent world model, its
//! heads, and gradient ascent on the model state. No broadcasting beyond
//! what those networks need, no higher-order derivatives.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, primitive_suite, CheckOutcome};
pub use params::{Adam, DiffError, ParamId, ParamSet, Watcher};
pub use tape::{Gradients, Tape};
pub use tensor::{NodeRef, Tensor};

use crate::scalar::Scalar;

/// Scalar symlog: sign(x) * ln(1 + |x|).
pub fn symlog<F: Scalar>(x: F) -> F {
    tape::symlog_scalar(x)
}

/// Scalar symexp: sign(x) * (e^|x| - 1), inverse of [`symlog`].
pub fn symexp<F: Scalar>(x: F) -> F {
    tape::symexp_scalar(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symlog_symexp_roundtrip_over_range() {
        let mut x = -1e3;
        while x <= 1e3 {
            let back: f64 = symexp(symlog(x));
            assert!((back - x).abs() <= 1e-9, "x={x} back={back}");
            x += 7.3;
        }
    }
}
