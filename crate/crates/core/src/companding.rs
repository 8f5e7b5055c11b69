//! Per-group mu-law companding.
//!
//! `F(x) = sgn(x) ln(1 + mu|x|) / ln(1 + mu)` maps `[-1, 1]` onto itself and
//! `F^{-1}(y) = sgn(y) ((1 + mu)^|y| - 1) / mu` undoes it.

use serde::{Deserialize, Serialize};

use crate::error::{GlvqError, Result};

pub const MU_MIN: f64 = 10.0;
pub const MU_MAX: f64 = 255.0;

/// Companding strength, always inside `[MU_MIN, MU_MAX]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct CompandingParam(f64);

impl CompandingParam {
    /// Rejects values outside the admissible range.
    pub fn new(mu: f64) -> Result<Self> {
        if !mu.is_finite() {
            return Err(GlvqError::NonFinite("companding parameter"));
        }
        if !(MU_MIN..=MU_MAX).contains(&mu) {
            return Err(GlvqError::InvalidArgument(format!(
                "mu = {mu} outside [{MU_MIN}, {MU_MAX}]"
            )));
        }
        Ok(Self(mu))
    }

    /// Projects any finite value onto the admissible range; NaN maps to `MU_MIN`.
    pub fn projected(mu: f64) -> Self {
        if mu.is_nan() {
            return Self(MU_MIN);
        }
        Self(mu.clamp(MU_MIN, MU_MAX))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// `ln(1 + mu)`, shared by every evaluation.
    pub fn log1p_mu(self) -> f64 {
        self.0.ln_1p()
    }

    pub fn curve(self) -> MuLaw {
        MuLaw::new(self)
    }
}

/// A mu-law curve with `ln(1 + mu)` precomputed.
#[derive(Debug, Clone, Copy)]
pub struct MuLaw {
    mu: f64,
    log1p_mu: f64,
}

impl MuLaw {
    pub fn new(param: CompandingParam) -> Self {
        Self { mu: param.0, log1p_mu: param.log1p_mu() }
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    #[inline]
    pub fn compress(&self, x: f64) -> f64 {
        if x == 0.0 {
            return 0.0;
        }
        (self.mu * x.abs()).ln_1p().copysign(x) / self.log1p_mu
    }

    #[inline]
    pub fn expand(&self, y: f64) -> f64 {
        if y == 0.0 {
            return 0.0;
        }
        ((y.abs() * self.log1p_mu).exp_m1() / self.mu).copysign(y)
    }

    /// `dF/dx`; even in `x`, equal to `mu / ln(1+mu)` at the origin.
    #[inline]
    pub fn compress_dx(&self, x: f64) -> f64 {
        self.mu / ((1.0 + self.mu * x.abs()) * self.log1p_mu)
    }

    /// `dF/dmu`; zero at the origin.
    #[inline]
    pub fn compress_dmu(&self, x: f64) -> f64 {
        if x == 0.0 {
            return 0.0;
        }
        let a = x.abs();
        let l = self.log1p_mu;
        let v = a / ((1.0 + self.mu * a) * l) - (self.mu * a).ln_1p() / ((1.0 + self.mu) * l * l);
        v * x.signum()
    }

    /// `dF^{-1}/dy`; even in `y`.
    #[inline]
    pub fn expand_dy(&self, y: f64) -> f64 {
        (y.abs() * self.log1p_mu).exp() * self.log1p_mu / self.mu
    }

    /// `dF^{-1}/dmu`; zero at the origin.
    #[inline]
    pub fn expand_dmu(&self, y: f64) -> f64 {
        if y == 0.0 {
            return 0.0;
        }
        let a = y.abs();
        let mu = self.mu;
        let pow = (a * self.log1p_mu).exp();
        let v = a * pow / ((1.0 + mu) * mu) - (pow - 1.0) / (mu * mu);
        v * y.signum()
    }
}

pub fn compand(x: f64, mu: CompandingParam) -> Result<f64> {
    if !x.is_finite() {
        return Err(GlvqError::NonFinite("compand input"));
    }
    Ok(mu.curve().compress(x))
}

pub fn expand(y: f64, mu: CompandingParam) -> Result<f64> {
    if !y.is_finite() {
        return Err(GlvqError::NonFinite("expand input"));
    }
    Ok(mu.curve().expand(y))
}

/// Closed-form derivatives of the forward and inverse curves.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompandGrad {
    pub dcompand_dx: f64,
    pub dcompand_dmu: f64,
    /// Derivative of the inverse, evaluated at `y = compand(x)`.
    pub dexpand_dy: f64,
    /// Derivative of the inverse w.r.t. `mu`, evaluated at `y = compand(x)`.
    pub dexpand_dmu: f64,
}

pub fn grad(x: f64, mu: CompandingParam) -> CompandGrad {
    let c = mu.curve();
    let y = c.compress(x);
    CompandGrad {
        dcompand_dx: c.compress_dx(x),
        dcompand_dmu: c.compress_dmu(x),
        dexpand_dy: c.expand_dy(y),
        dexpand_dmu: c.expand_dmu(y),
    }
}

/// Which kurtosis convention feeds the mu initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum KurtosisConvention {
    /// `m4 / m2^2 - 3` (zero for a Gaussian).
    #[default]
    Excess,
    /// `m4 / m2^2` (three for a Gaussian).
    Raw,
}

/// Sample kurtosis from biased central moments.
pub fn kurtosis(sample: &[f64], convention: KurtosisConvention) -> Result<f64> {
    if sample.len() < 4 {
        return Err(GlvqError::DegenerateSample("kurtosis needs at least 4 values"));
    }
    if sample.iter().any(|v| !v.is_finite()) {
        return Err(GlvqError::NonFinite("kurtosis sample"));
    }
    let n = sample.len() as f64;
    let mean = sample.iter().sum::<f64>() / n;
    let (mut m2, mut m4) = (0.0, 0.0);
    for &v in sample {
        let d2 = (v - mean) * (v - mean);
        m2 += d2;
        m4 += d2 * d2;
    }
    m2 /= n;
    m4 /= n;
    if m2 == 0.0 || m2 <= (1e-12 * mean.abs()).powi(2) {
        return Err(GlvqError::DegenerateSample("zero variance"));
    }
    let k = m4 / (m2 * m2);
    Ok(match convention {
        KurtosisConvention::Excess => k - 3.0,
        KurtosisConvention::Raw => k,
    })
}

/// `100 tanh(kappa / 10)` projected onto `[MU_MIN, MU_MAX]`.
pub fn init_mu(kurtosis_value: f64) -> CompandingParam {
    CompandingParam::projected(100.0 * (kurtosis_value / 10.0).tanh())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn mu(v: f64) -> CompandingParam {
        CompandingParam::new(v).unwrap()
    }

    #[test]
    fn compand_examples() {
        assert_eq!(compand(0.0, mu(255.0)).unwrap(), 0.0);
        assert_abs_diff_eq!(compand(1.0, mu(255.0)).unwrap(), 1.0, epsilon = 1e-15);
        let y = compand(0.1, mu(255.0)).unwrap();
        assert_abs_diff_eq!(y, 26.5f64.ln() / 256f64.ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(y, 0.59099, epsilon = 1e-5);
    }

    #[test]
    fn expand_examples() {
        assert_eq!(expand(0.0, mu(255.0)).unwrap(), 0.0);
        assert_abs_diff_eq!(expand(1.0, mu(255.0)).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(expand(0.5911, mu(255.0)).unwrap(), 0.1, epsilon = 1e-4);
    }

    #[test]
    fn non_finite_inputs_rejected() {
        assert!(compand(f64::NAN, mu(100.0)).is_err());
        assert!(expand(f64::INFINITY, mu(100.0)).is_err());
    }

    #[test]
    fn param_range_enforced() {
        assert!(CompandingParam::new(9.99).is_err());
        assert!(CompandingParam::new(255.01).is_err());
        assert_eq!(CompandingParam::projected(1e9).value(), MU_MAX);
        assert_eq!(CompandingParam::projected(-3.0).value(), MU_MIN);
    }

    #[test]
    fn derivative_limits() {
        let g = grad(0.0, mu(255.0));
        assert_abs_diff_eq!(g.dcompand_dx, 255.0 / 256f64.ln(), epsilon = 1e-12);
        assert_eq!(g.dcompand_dmu, 0.0);
        assert_eq!(g.dexpand_dmu, 0.0);
        // F(1) = 1 for every mu.
        assert_abs_diff_eq!(grad(1.0, mu(40.0)).dcompand_dmu, 0.0, epsilon = 1e-15);
        // Stronger companding pulls expanded values toward zero.
        let c = MuLaw::new(mu(40.0));
        assert!(c.expand_dmu(0.5) < 0.0);
        assert!(c.expand_dmu(-0.5) > 0.0);
        assert!(c.compress_dmu(0.5) > 0.0);
        assert!(c.compress_dmu(-0.5) < 0.0);
    }

    #[test]
    fn kurtosis_examples() {
        let rademacher: Vec<f64> = (0..1000).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        assert_abs_diff_eq!(
            kurtosis(&rademacher, KurtosisConvention::Excess).unwrap(),
            -2.0,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            kurtosis(&rademacher, KurtosisConvention::Raw).unwrap(),
            1.0,
            epsilon = 1e-12
        );
        assert!(matches!(
            kurtosis(&[0.3; 16], KurtosisConvention::Excess),
            Err(GlvqError::DegenerateSample(_))
        ));
        assert!(kurtosis(&[1.0, 2.0, 3.0], KurtosisConvention::Excess).is_err());
    }

    #[test]
    fn kurtosis_of_large_gaussian_sample() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let s: Vec<f64> = (0..1_000_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let k = kurtosis(&s, KurtosisConvention::Excess).unwrap();
        assert!(k.abs() < 0.05, "excess kurtosis {k}");
    }

    #[test]
    fn init_mu_examples() {
        assert_abs_diff_eq!(init_mu(10.0).value(), 100.0 * 1f64.tanh(), epsilon = 1e-12);
        assert_abs_diff_eq!(init_mu(10.0).value(), 76.159, epsilon = 1e-3);
        assert_eq!(init_mu(-2.0).value(), MU_MIN);
        assert_abs_diff_eq!(init_mu(1e6).value(), 100.0, epsilon = 1e-12);
        assert_eq!(init_mu(0.0).value(), MU_MIN);
    }
}
