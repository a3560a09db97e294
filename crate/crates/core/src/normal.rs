//! Standard normal density and distribution function.

use std::f64::consts::PI;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal density.
pub fn pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Standard normal distribution function, accurate in both tails.
pub fn cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Density of N(0, s).
pub fn pdf_var(x: f64, s: f64) -> f64 {
    (-x * x / (2.0 * s)).exp() / (2.0 * PI * s).sqrt()
}

/// Distribution function of N(0, s).
pub fn cdf_var(x: f64, s: f64) -> f64 {
    cdf(x / s.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_values() {
        assert_eq!(cdf(0.0), 0.5);
        assert!((cdf(1.959_963_984_540_054) - 0.975).abs() < 1e-15);
        assert!((cdf(-8.0) - 6.220_960_574_271_785e-16).abs() < 1e-28);
        assert!((pdf(1.0) - 0.241_970_724_519_143_37).abs() < 1e-16);
        assert!((pdf_var(0.3, 2.0) - pdf(0.3 / 2f64.sqrt()) / 2f64.sqrt()).abs() < 1e-16);
    }
}
