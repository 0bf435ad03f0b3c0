//! Scalar helpers shared by the model, the baselines and the metrics.

use serde::{Deserialize, Serialize};

pub const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal CDF, `0.5 * (1 + erf(z / sqrt 2))`.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / SQRT_2)
}

pub fn normal_pdf(z: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * z * z).exp()
}

/// Inverse of [`normal_cdf`] on the open unit interval.
pub fn normal_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let mut x = SQRT_2 * statrs::function::erf::erf_inv(2.0 * p - 1.0);
    // Halley refinement against the accurate CDF.
    for _ in 0..2 {
        let err = normal_cdf(x) - p;
        let u = err / normal_pdf(x);
        x -= u / (1.0 + 0.5 * x * u);
    }
    x
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Inverse link applied to the linear predictor of every species.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    #[default]
    Probit,
    Logit,
}

impl Link {
    /// Maps the linear predictor to a probability.
    pub fn inverse(self, eta: f64) -> f64 {
        match self {
            Link::Probit => normal_cdf(eta),
            Link::Logit => sigmoid(eta),
        }
    }

    /// Derivative of [`Link::inverse`] with respect to the linear predictor.
    pub fn inverse_derivative(self, eta: f64) -> f64 {
        match self {
            Link::Probit => normal_pdf(eta),
            Link::Logit => {
                let p = sigmoid(eta);
                p * (1.0 - p)
            }
        }
    }

    /// The link itself, `g(p)`.
    pub fn apply(self, p: f64) -> f64 {
        match self {
            Link::Probit => normal_quantile(p),
            Link::Logit => (p / (1.0 - p)).ln(),
        }
    }
}

pub(crate) fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n - 1 denominator); zero for fewer than two values.
pub(crate) fn sample_sd(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let ss: f64 = xs.iter().map(|x| (x - m).powi(2)).sum();
    (ss / (xs.len() - 1) as f64).sqrt()
}

pub(crate) fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
