//! Floating point type used by the language model and the trainers.
//!
//! 64-bit by default; the `f32` feature switches to 32-bit arithmetic.

#[cfg(not(feature = "f32"))]
pub type Float = f64;
#[cfg(feature = "f32")]
pub type Float = f32;

type M = libm::Libm<Float>;

#[inline]
pub fn exp(x: Float) -> Float {
    M::exp(x)
}

#[inline]
pub fn ln(x: Float) -> Float {
    M::log(x)
}

#[inline]
pub fn sqrt(x: Float) -> Float {
    M::sqrt(x)
}

#[inline]
pub fn tanh(x: Float) -> Float {
    M::tanh(x)
}

#[inline]
pub fn powi(x: Float, n: i32) -> Float {
    M::pow(x, n as Float)
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: Float) -> Float {
    if x > 0.0 {
        x + M::log1p(M::exp(-x))
    } else {
        M::log1p(M::exp(x))
    }
}

/// Logistic function.
#[inline]
pub fn sigmoid(x: Float) -> Float {
    if x >= 0.0 {
        1.0 / (1.0 + M::exp(-x))
    } else {
        let e = M::exp(x);
        e / (1.0 + e)
    }
}
