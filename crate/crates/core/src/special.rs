//! Scalar special functions used by the updates and the ELBO.
//!
//! The probit augmentation needs `log Φ(x)` and the two inverse Mills ratios
//! well into both tails, so the normal CDF is evaluated through `erfc` and an
//! asymptotic expansion takes over where `erfc` underflows.

use nalgebra::{DMatrix, SymmetricEigen};
use statrs::function::erf::erfc;
use statrs::function::gamma::{digamma, ln_gamma};

pub const LN_2PI: f64 = 1.837_877_066_409_345_3;
const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// Below this point `erfc(-x/√2)` is close to underflow and the asymptotic
/// series is used instead.
const LOG_PHI_ASYMPTOTIC: f64 = -35.0;

#[inline]
pub fn ln_norm_pdf(x: f64) -> f64 {
    -0.5 * (LN_2PI + x * x)
}

#[inline]
pub fn norm_pdf(x: f64) -> f64 {
    ln_norm_pdf(x).exp()
}

#[inline]
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

/// `log Φ(x)`, accurate in both tails.
pub fn ln_norm_cdf(x: f64) -> f64 {
    if x > 5.0 {
        (-0.5 * erfc(x * FRAC_1_SQRT_2)).ln_1p()
    } else if x > LOG_PHI_ASYMPTOTIC {
        (0.5 * erfc(-x * FRAC_1_SQRT_2)).ln()
    } else {
        // Φ(x) = φ(x)/|x| · (1 - 1/x² + 3/x⁴ - 15/x⁶ + 105/x⁸ ...)
        let z2 = 1.0 / (x * x);
        let series = 1.0 - z2 * (1.0 - 3.0 * z2 * (1.0 - 5.0 * z2 * (1.0 - 7.0 * z2)));
        ln_norm_pdf(x) - (-x).ln() + series.ln()
    }
}

/// `φ(x) / Φ(x)`: the mean shift of a unit normal centred at `x` truncated to `(0, ∞)`.
#[inline]
pub fn mills_upper(x: f64) -> f64 {
    (ln_norm_pdf(x) - ln_norm_cdf(x)).exp()
}

/// `φ(x) / Φ(-x)`: the magnitude of the mean shift when truncating to `(-∞, 0]`.
#[inline]
pub fn mills_lower(x: f64) -> f64 {
    mills_upper(-x)
}

#[inline]
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `-g ln g - (1-g) ln(1-g)` with the `0 ln 0 = 0` convention.
pub fn bernoulli_entropy(g: f64) -> f64 {
    let mut h = 0.0;
    if g > 0.0 {
        h -= g * g.ln();
    }
    if g < 1.0 {
        h -= (1.0 - g) * (-g).ln_1p();
    }
    h
}

/// `a ln b` that returns zero when the weight is zero, even if `b` is.
#[inline]
pub fn xlogy(a: f64, b: f64) -> f64 {
    if a == 0.0 {
        0.0
    } else {
        a * b.ln()
    }
}

/// Mean and log-mean of a Gamma(shape, rate) variable.
#[inline]
pub fn gamma_moments(shape: f64, rate: f64) -> (f64, f64) {
    (shape / rate, digamma(shape) - rate.ln())
}

pub fn gamma_entropy(shape: f64, rate: f64) -> f64 {
    shape - rate.ln() + ln_gamma(shape) + (1.0 - shape) * digamma(shape)
}

/// `E[log Gamma(x; shape0, rate0)]` under a variable with the given moments.
pub fn gamma_expected_log_density(shape0: f64, rate0: f64, mean: f64, log_mean: f64) -> f64 {
    shape0 * rate0.ln() - ln_gamma(shape0) + (shape0 - 1.0) * log_mean - rate0 * mean
}

/// Raises the Gamma(shape, rate) optimum of an update to the power `1/T`.
#[inline]
pub fn temper_gamma(shape: f64, rate: f64, temperature: f64) -> (f64, f64) {
    ((shape - 1.0) / temperature + 1.0, rate / temperature)
}

/// Moments and entropy of a unit-variance normal centred at `m`, truncated to
/// the positive half-line (`upper = true`) or the non-positive one.
#[derive(Debug, Clone, Copy)]
pub struct TruncatedUnitNormal {
    /// `E[(z - m)²]`
    pub second_moment: f64,
    pub entropy: f64,
}

impl TruncatedUnitNormal {
    pub fn new(m: f64, upper: bool) -> Self {
        let (ln_mass, shift) = if upper {
            (ln_norm_cdf(m), mills_upper(m))
        } else {
            (ln_norm_cdf(-m), -mills_lower(m))
        };
        // For the positive side: E[(z-m)²] = 1 - m λ, H = ½ln(2πe) + lnΦ(m) - mλ/2,
        // with λ the signed mean shift; the lower side follows by symmetry.
        let second_moment = 1.0 - m * shift;
        let entropy = 0.5 * (LN_2PI + 1.0) + ln_mass - 0.5 * m * shift;
        Self {
            second_moment,
            entropy,
        }
    }
}

/// Gauss-Hermite rule for expectations under a standard normal:
/// `E[f(Z)] ≈ Σ w_i f(x_i)`. Built by Golub-Welsch on the probabilists'
/// Hermite recurrence.
#[derive(Debug, Clone)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussHermite {
    pub fn new(order: usize) -> Self {
        assert!(order >= 1);
        let mut jacobi = DMatrix::<f64>::zeros(order, order);
        for k in 1..order {
            let b = (k as f64).sqrt();
            jacobi[(k - 1, k)] = b;
            jacobi[(k, k - 1)] = b;
        }
        let eig = SymmetricEigen::new(jacobi);
        let mut pairs: Vec<(f64, f64)> = (0..order)
            .map(|i| {
                let v0 = eig.eigenvectors[(0, i)];
                (eig.eigenvalues[i], v0 * v0)
            })
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let total: f64 = pairs.iter().map(|p| p.1).sum();
        Self {
            nodes: pairs.iter().map(|p| p.0).collect(),
            weights: pairs.iter().map(|p| p.1 / total).collect(),
        }
    }

    pub fn expect(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(x))
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ln_norm_cdf_matches_direct_evaluation_in_the_body() {
        for &x in &[-30.0, -8.0, -2.0, -0.3, 0.0, 0.7, 3.0, 6.0, 9.0] {
            let direct = norm_cdf(x).ln();
            assert!((ln_norm_cdf(x) - direct).abs() < 1e-12 * direct.abs().max(1e-3), "x={x}");
        }
    }

    #[test]
    fn ln_norm_cdf_is_continuous_at_the_asymptotic_switch() {
        let a = ln_norm_cdf(LOG_PHI_ASYMPTOTIC + 1e-9);
        let b = ln_norm_cdf(LOG_PHI_ASYMPTOTIC - 1e-9);
        assert!((a - b).abs() < 1e-9 * a.abs());
        assert!(ln_norm_cdf(-60.0).is_finite());
    }

    #[test]
    fn mills_ratios_are_consistent_with_truncated_means() {
        // Mean of N(m,1) truncated to (0,∞) is m + φ(m)/Φ(m); check by quadrature.
        let m = -1.3;
        let h = 1e-4;
        let (mut mass, mut first) = (0.0, 0.0);
        let mut z = 0.0;
        while z < 12.0 {
            let w = norm_pdf(z - m) * h;
            mass += w;
            first += w * z;
            z += h;
        }
        let mean = first / mass;
        assert!((mean - (m + mills_upper(m))).abs() < 1e-3);
        assert!(mills_upper(-50.0) > 49.0);
        assert!((mills_lower(0.0) - mills_upper(0.0)).abs() < 1e-15);
    }

    #[test]
    fn truncated_entropy_plus_expected_log_density_is_log_mass() {
        for &m in &[-4.0, -0.5, 0.0, 1.2, 5.0] {
            for &upper in &[true, false] {
                let t = TruncatedUnitNormal::new(m, upper);
                let val = -0.5 * LN_2PI - 0.5 * t.second_moment + t.entropy;
                let expect = if upper { ln_norm_cdf(m) } else { ln_norm_cdf(-m) };
                assert!((val - expect).abs() < 1e-12, "m={m} upper={upper}");
            }
        }
    }

    #[test]
    fn gauss_hermite_integrates_normal_moments() {
        let gh = GaussHermite::new(48);
        assert!((gh.expect(|_| 1.0) - 1.0).abs() < 1e-13);
        assert!(gh.expect(|x| x).abs() < 1e-12);
        assert!((gh.expect(|x| x * x) - 1.0).abs() < 1e-12);
        assert!((gh.expect(|x| x.powi(4)) - 3.0).abs() < 1e-10);
        // E[Φ(a + bZ)] = Φ(a / sqrt(1 + b²))
        let (a, b): (f64, f64) = (-2.5, 0.8);
        let exact = norm_cdf(a / (1.0 + b * b).sqrt());
        assert!((gh.expect(|x| norm_cdf(a + b * x)) - exact).abs() < 1e-10);
    }

    #[test]
    fn bernoulli_entropy_edges() {
        assert_eq!(bernoulli_entropy(0.0), 0.0);
        assert_eq!(bernoulli_entropy(1.0), 0.0);
        assert!((bernoulli_entropy(0.5) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn logistic_is_stable() {
        assert_eq!(logistic(-1000.0), 0.0);
        assert_eq!(logistic(1000.0), 1.0);
        assert!((logistic(0.0) - 0.5).abs() < 1e-16);
    }
}
