//! Negative binomial primitives, the softplus inverse link and the
//! multiply-inflated outcome distribution on `{0..32}`.
//!
//! The base distribution is the mean/dispersion negative binomial
//!
//! ```text
//! f(z | mu, delta) = Gamma(delta + z) / (Gamma(delta) z!) * (delta/(delta+mu))^delta * (mu/(mu+delta))^z
//! ```
//!
//! with variance `mu + mu^2 / delta`. The inflated distribution mixes this
//! base with point masses at 0, at the attraction set [`ATTRACT_SET`] and at 31;
//! whatever base mass lies above 31 is lumped at 32 so that the outcome is a
//! proper distribution on the 33 possible card counts.

use rand::Rng;
use rand_distr::{Distribution, Gamma, Poisson};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{CmmError, Result};

/// Largest observable card count.
pub const MAX_CARDS: u32 = 32;

/// Number of support points of the outcome distribution (`0..=32`).
pub const SUPPORT_LEN: usize = MAX_CARDS as usize + 1;

/// Outcome values that attract extra probability mass besides 0 and 31.
pub const ATTRACT_SET: [u32; 7] = [4, 8, 10, 12, 16, 20, 24];

/// True if `ell` is a member of [`ATTRACT_SET`].
#[inline]
pub fn in_attract_set(ell: u32) -> bool {
    matches!(ell, 4 | 8 | 10 | 12 | 16 | 20 | 24)
}

/// Mean/dispersion parameters of the negative binomial base distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NegBinParams {
    pub mu: f64,
    pub delta: f64,
}

impl NegBinParams {
    pub fn new(mu: f64, delta: f64) -> Result<Self> {
        let p = NegBinParams { mu, delta };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mu.is_finite() && self.mu > 0.0) {
            return Err(CmmError::InvalidParameter(format!(
                "mu must be finite and > 0, got {}",
                self.mu
            )));
        }
        if !(self.delta.is_finite() && self.delta > 0.0) {
            return Err(CmmError::InvalidParameter(format!(
                "delta must be finite and > 0, got {}",
                self.delta
            )));
        }
        Ok(())
    }

    pub fn variance(&self) -> f64 {
        self.mu + self.mu * self.mu / self.delta
    }
}

/// Simplex weights `(phi1, phi2, phi3, phi4)`: base distribution, mass at 0,
/// mass spread over the attraction set, mass at 31.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct InflationWeights(pub [f64; 4]);

impl InflationWeights {
    const SIMPLEX_TOL: f64 = 1e-9;

    pub fn new(phi: [f64; 4]) -> Result<Self> {
        let w = InflationWeights(phi);
        w.validate()?;
        Ok(w)
    }

    /// All mass on the base distribution.
    pub fn base_only() -> Self {
        InflationWeights([1.0, 0.0, 0.0, 0.0])
    }

    pub fn validate(&self) -> Result<()> {
        if self
            .0
            .iter()
            .any(|&p| !p.is_finite() || !(-Self::SIMPLEX_TOL..=1.0 + Self::SIMPLEX_TOL).contains(&p))
        {
            return Err(CmmError::InvalidParameter(format!(
                "inflation weights must lie in [0,1], got {:?}",
                self.0
            )));
        }
        let total: f64 = self.0.iter().sum();
        if (total - 1.0).abs() > Self::SIMPLEX_TOL {
            return Err(CmmError::InvalidParameter(format!(
                "inflation weights must sum to 1, got {total}"
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn base(&self) -> f64 {
        self.0[0]
    }
    #[inline]
    pub fn zero(&self) -> f64 {
        self.0[1]
    }
    #[inline]
    pub fn attract(&self) -> f64 {
        self.0[2]
    }
    #[inline]
    pub fn thirty_one(&self) -> f64 {
        self.0[3]
    }
}

/// Log of the negative binomial pmf, evaluated through log-gamma.
pub fn nb_ln_pmf(z: u32, p: NegBinParams) -> Result<f64> {
    p.validate()?;
    Ok(nb_ln_pmf_unchecked(z, p.mu, p.delta))
}

#[inline]
pub(crate) fn nb_ln_pmf_unchecked(z: u32, mu: f64, delta: f64) -> f64 {
    let zf = f64::from(z);
    let ln_coeff = ln_gamma(delta + zf) - ln_gamma(delta) - ln_gamma(zf + 1.0);
    let ln_p = (delta / (delta + mu)).ln();
    let ln_q = (mu / (mu + delta)).ln();
    // z * ln_q is 0 at z = 0 even when mu underflows relative to delta
    let tail = if z == 0 { 0.0 } else { zf * ln_q };
    ln_coeff + delta * ln_p + tail
}

/// Negative binomial probability mass at `z`.
pub fn nb_pmf(z: u32, p: NegBinParams) -> Result<f64> {
    Ok(nb_ln_pmf(z, p)?.exp())
}

/// `Pr(X <= k)`; `k = -1` gives 0.
pub fn nb_cdf(k: i64, p: NegBinParams) -> Result<f64> {
    p.validate()?;
    if k < -1 {
        return Err(CmmError::OutOfRange(format!("cdf argument {k} < -1")));
    }
    let mut total = 0.0;
    for z in 0..=k {
        total += nb_ln_pmf_unchecked(z as u32, p.mu, p.delta).exp();
    }
    Ok(total.min(1.0))
}

/// Softplus inverse link `log(exp(eta) + 1)`, stable for any finite `eta`.
#[inline]
pub fn softplus(eta: f64) -> f64 {
    if eta > 0.0 {
        eta + (-eta).exp().ln_1p()
    } else {
        eta.exp().ln_1p()
    }
}

/// Derivative of [`softplus`], the logistic function.
#[inline]
pub fn softplus_deriv(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// Draw from the (unbounded) negative binomial as a gamma-Poisson mixture.
pub fn sample_nb<R: Rng + ?Sized>(p: NegBinParams, rng: &mut R) -> u64 {
    let gamma = Gamma::new(p.delta, p.mu / p.delta).expect("validated gamma parameters");
    let lambda: f64 = gamma.sample(rng);
    if !(lambda > 0.0) {
        return 0;
    }
    match Poisson::new(lambda) {
        Ok(poisson) => poisson.sample(rng) as u64,
        // lambda beyond the sampler's range: far above any card count
        Err(_) => u64::MAX,
    }
}

/// The multiply-inflated negative binomial on `{0..32}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InflatedNB {
    pub base: NegBinParams,
    pub weights: InflationWeights,
}

impl InflatedNB {
    pub fn new(base: NegBinParams, weights: InflationWeights) -> Result<Self> {
        base.validate()?;
        weights.validate()?;
        Ok(InflatedNB { base, weights })
    }

    /// All 33 probabilities at once.
    pub fn masses(&self) -> [f64; SUPPORT_LEN] {
        let w = self.weights;
        let mut out = [0.0; SUPPORT_LEN];
        let mut base_cdf = 0.0;
        for (ell, slot) in out.iter_mut().enumerate().take(SUPPORT_LEN - 1) {
            let f = nb_ln_pmf_unchecked(ell as u32, self.base.mu, self.base.delta).exp();
            base_cdf += f;
            *slot = w.base() * f + inflation_mass(ell as u32, &w);
        }
        out[SUPPORT_LEN - 1] = w.base() * (1.0 - base_cdf).max(0.0);
        out
    }

    pub fn pmf(&self, ell: i64) -> Result<f64> {
        check_support(ell)?;
        Ok(self.masses()[ell as usize])
    }

    pub fn cdf(&self, k: i64) -> Result<f64> {
        if k == -1 {
            return Ok(0.0);
        }
        check_support(k)?;
        if k == i64::from(MAX_CARDS) {
            return Ok(1.0);
        }
        Ok(self.masses()[..=k as usize].iter().sum::<f64>().min(1.0))
    }

    pub fn mean(&self) -> f64 {
        self.masses()
            .iter()
            .enumerate()
            .map(|(ell, p)| ell as f64 * p)
            .sum()
    }

    /// Draw an intended card count.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u32 {
        let u: f64 = rng.random();
        let w = self.weights.0;
        if u < w[0] {
            sample_nb(self.base, rng).min(u64::from(MAX_CARDS)) as u32
        } else if u < w[0] + w[1] {
            0
        } else if u < w[0] + w[1] + w[2] {
            ATTRACT_SET[rng.random_range(0..ATTRACT_SET.len())]
        } else {
            31
        }
    }
}

/// Extra (non-base) mass at `ell`.
#[inline]
pub(crate) fn inflation_mass(ell: u32, w: &InflationWeights) -> f64 {
    match ell {
        0 => w.zero(),
        31 => w.thirty_one(),
        e if in_attract_set(e) => w.attract() / ATTRACT_SET.len() as f64,
        _ => 0.0,
    }
}

fn check_support(ell: i64) -> Result<()> {
    if !(0..=i64::from(MAX_CARDS)).contains(&ell) {
        return Err(CmmError::OutOfSupport {
            value: ell,
            max: i64::from(MAX_CARDS),
        });
    }
    Ok(())
}

/// `Pr(Z = ell)` for the inflated distribution.
pub fn inflated_pmf(ell: i64, d: &InflatedNB) -> Result<f64> {
    d.pmf(ell)
}

/// `Pr(Z <= k)` for `k` in `-1..=32`.
pub fn inflated_cdf(k: i64, d: &InflatedNB) -> Result<f64> {
    d.cdf(k)
}
