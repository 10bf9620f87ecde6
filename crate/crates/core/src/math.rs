//! `f64` helpers that work without `std`.

pub use libm::{cos, exp, floor, log, log1p, round, sqrt};

pub const PI: f64 = core::f64::consts::PI;

pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    relu(x) + log1p(exp(-x.abs()))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + exp(-x))
    } else {
        let e = exp(x);
        e / (1.0 + e)
    }
}
