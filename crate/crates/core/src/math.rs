//! Float routines that `core` does not provide.

pub use libm::{cos, exp, log, sin, sqrt, tanh};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// ln(1 + e^x) without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + libm::log1p(exp(-x))
    } else {
        libm::log1p(exp(x))
    }
}

/// Logistic sigmoid, the derivative of `softplus`.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + exp(-x))
    } else {
        let e = exp(x);
        e / (1.0 + e)
    }
}
