//! Scalar special functions used by the likelihoods and the variational solver.

use libm::erfc;
use statrs::function::erf::erfc_inv;

pub const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_7;
const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn norm_pdf(x: f64) -> f64 {
    FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

pub fn log_norm_pdf(x: f64) -> f64 {
    -0.5 * x * x - LN_SQRT_2PI
}

pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// `log Φ(x)`, accurate far into the lower tail.
pub fn log_norm_cdf(x: f64) -> f64 {
    if x > -20.0 {
        let c = norm_cdf(x);
        if x > 0.0 {
            // Φ close to 1
            (-(0.5 * erfc(x / std::f64::consts::SQRT_2))).ln_1p()
        } else {
            c.ln()
        }
    } else {
        // Φ(x) ~ φ(x)/|x| · (1 - 1/x² + 3/x⁴ - 15/x⁶ + 105/x⁸)
        let t = 1.0 / (x * x);
        let series = 1.0 - t + 3.0 * t * t - 15.0 * t * t * t + 105.0 * t * t * t * t;
        log_norm_pdf(x) - (-x).ln() + series.ln()
    }
}

/// Inverse Mills ratio `φ(x)/Φ(x)`.
pub fn inv_mills(x: f64) -> f64 {
    if x > -20.0 {
        norm_pdf(x) / norm_cdf(x)
    } else {
        (log_norm_pdf(x) - log_norm_cdf(x)).exp()
    }
}

/// Standard normal quantile.
pub fn norm_quantile(p: f64) -> f64 {
    -std::f64::consts::SQRT_2 * erfc_inv(2.0 * p)
}

/// `log Σ exp(a_i)`; `-inf` for an empty or all `-inf` input.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    if m == f64::INFINITY {
        return m;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Streaming log-sum-exp accumulator.
#[derive(Clone, Copy, Debug)]
pub struct LogSumExp {
    max: f64,
    scaled: f64,
}

impl Default for LogSumExp {
    fn default() -> Self {
        Self {
            max: f64::NEG_INFINITY,
            scaled: 0.0,
        }
    }
}

impl LogSumExp {
    pub fn push(&mut self, v: f64) {
        if v == f64::NEG_INFINITY {
            return;
        }
        if v > self.max {
            self.scaled = self.scaled * (self.max - v).exp() + 1.0;
            self.max = v;
        } else {
            self.scaled += (v - self.max).exp();
        }
    }

    pub fn merge(&mut self, other: &LogSumExp) {
        if other.max == f64::NEG_INFINITY {
            return;
        }
        if other.max > self.max {
            self.scaled = self.scaled * (self.max - other.max).exp() + other.scaled;
            self.max = other.max;
        } else {
            self.scaled += other.scaled * (other.max - self.max).exp();
        }
    }

    pub fn value(&self) -> f64 {
        if self.max == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else {
            self.max + self.scaled.ln()
        }
    }
}

pub fn ln_factorial(k: u64) -> f64 {
    statrs::function::factorial::ln_factorial(k)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_cdf_is_continuous_across_branches() {
        for &x in &[-20.0 - 1e-9, -19.999_999_999] {
            let a = log_norm_cdf(x);
            let b = log_norm_cdf(-20.0);
            assert!((a - b).abs() < 1e-6, "{a} {b}");
        }
        assert!((log_norm_cdf(0.0) - 0.5f64.ln()).abs() < 1e-15);
        assert!(log_norm_cdf(10.0).abs() < 1e-20);
    }

    #[test]
    fn quantile_inverts_cdf() {
        for &p in &[1e-10, 0.01, 0.3, 0.5, 0.77, 0.999] {
            assert!((norm_cdf(norm_quantile(p)) - p).abs() < 1e-12 * p.max(1e-3) * 1e3);
        }
    }

    #[test]
    fn streaming_lse_matches_batch() {
        let v = [1.0, -300.0, 700.0, 699.5, f64::NEG_INFINITY];
        let mut acc = LogSumExp::default();
        v.iter().for_each(|&x| acc.push(x));
        assert!((acc.value() - log_sum_exp(&v)).abs() < 1e-12);
        let mut left = LogSumExp::default();
        let mut right = LogSumExp::default();
        v[..2].iter().for_each(|&x| left.push(x));
        v[2..].iter().for_each(|&x| right.push(x));
        left.merge(&right);
        assert!((left.value() - acc.value()).abs() < 1e-12);
    }
}
