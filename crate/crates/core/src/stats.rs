//! Sample moments and standard-normal helpers shared by the encoder and
//! the metric suite.

/// Below this population standard deviation skew and kurtosis are defined as 0.
pub const DEGENERATE_SIGMA: f64 = 1e-8;

/// Population moments of a sample: mean, standard deviation, skewness
/// `m3/σ³` and excess kurtosis `m4/σ⁴ − 3`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Moments {
    pub mean: f64,
    pub std: f64,
    pub skew: f64,
    pub kurt: f64,
}

impl Moments {
    pub fn of(xs: impl Iterator<Item = f64> + Clone) -> Self {
        let n = xs.clone().count();
        if n == 0 {
            return Moments { mean: 0.0, std: 0.0, skew: 0.0, kurt: 0.0 };
        }
        let nf = n as f64;
        let mean = xs.clone().sum::<f64>() / nf;
        let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
        for x in xs {
            let d = x - mean;
            let d2 = d * d;
            m2 += d2;
            m3 += d2 * d;
            m4 += d2 * d2;
        }
        m2 /= nf;
        m3 /= nf;
        m4 /= nf;
        let std = libm::sqrt(m2);
        if std < DEGENERATE_SIGMA {
            return Moments { mean, std, skew: 0.0, kurt: 0.0 };
        }
        Moments { mean, std, skew: m3 / (m2 * std), kurt: m4 / (m2 * m2) - 3.0 }
    }

    pub fn of_slice(xs: &[f64]) -> Self {
        Self::of(xs.iter().copied())
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.mean, self.std, self.skew, self.kurt]
    }
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / core::f64::consts::SQRT_2)
}

pub fn normal_pdf(x: f64) -> f64 {
    libm::exp(-0.5 * x * x) / libm::sqrt(2.0 * core::f64::consts::PI)
}

/// Standard-normal quantile for `p ∈ (0, 1)`.
///
/// Bracketing bisection to get close, then Newton steps on the CDF.
pub fn normal_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let (mut lo, mut hi) = (-40.0_f64, 40.0_f64);
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if normal_cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut x = 0.5 * (lo + hi);
    for _ in 0..3 {
        let pdf = normal_pdf(x);
        if pdf <= 0.0 {
            break;
        }
        x -= (normal_cdf(x) - p) / pdf;
    }
    x
}
