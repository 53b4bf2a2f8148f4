//! Point predictions, aggregated outcome distributions and fit measures.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::TrialRecord;
use crate::design::DesignMatrix;
use crate::dist::{inflation_mass, nb_cdf, softplus, InflatedNB, NegBinParams, MAX_CARDS, SUPPORT_LEN};
use crate::error::{CmmError, Result};
use crate::game::{marginal_censor_prob, GameSetting};
use crate::params::ModelParams;

/// Truncation point of the literal expected-value formula.
pub const LITERAL_M: u32 = 100;

const CHUNK: usize = 256;

/// Outcome support used for predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Support {
    /// The fitted distribution on `{0..32}` with the base tail lumped at 32.
    #[default]
    Truncated,
    /// Base pmf evaluated up to [`LITERAL_M`], remaining tail folded onto it.
    Literal,
}

fn segment_mu(params: &ModelParams, x: &[f64], s: usize) -> f64 {
    let eta = params.alpha[s] + x.iter().zip(&params.beta).map(|(a, b)| a * b).sum::<f64>();
    softplus(eta)
}

fn check_row(params: &ModelParams, x: &[f64]) -> Result<()> {
    if x.len() != params.beta.len() {
        return Err(CmmError::DimensionMismatch(format!(
            "design row has {} entries, beta has {}",
            x.len(),
            params.beta.len()
        )));
    }
    Ok(())
}

/// Masses on `0..=LITERAL_M` of the untruncated inflated distribution.
pub fn literal_masses(mu: f64, delta: f64, phi: &crate::dist::InflationWeights) -> Result<Vec<f64>> {
    let base = NegBinParams::new(mu, delta)?;
    phi.validate()?;
    let mut out = vec![0.0; LITERAL_M as usize + 1];
    let mut cdf = 0.0;
    for (ell, slot) in out.iter_mut().enumerate() {
        let f = crate::dist::nb_pmf(ell as u32, base)?;
        cdf += f;
        *slot = phi.base() * f;
        if ell <= MAX_CARDS as usize {
            *slot += inflation_mass(ell as u32, phi);
        }
    }
    out[LITERAL_M as usize] += phi.base() * (1.0 - cdf).max(0.0);
    Ok(out)
}

fn segment_masses(params: &ModelParams, mu: f64, support: Support) -> Result<Vec<f64>> {
    match support {
        Support::Truncated => {
            Ok(InflatedNB::new(NegBinParams::new(mu, params.delta)?, params.phi)?.masses().to_vec())
        }
        Support::Literal => literal_masses(mu, params.delta, &params.phi),
    }
}

fn mean_of(masses: &[f64]) -> f64 {
    masses.iter().enumerate().map(|(l, p)| l as f64 * p).sum()
}

/// Expected card count for one design row, weighting segments by `weights`.
fn weighted_expectation(params: &ModelParams, x: &[f64], weights: &[f64], support: Support) -> Result<f64> {
    check_row(params, x)?;
    let mut total = 0.0;
    for (s, w) in weights.iter().enumerate() {
        if *w == 0.0 {
            continue;
        }
        total += w * mean_of(&segment_masses(params, segment_mu(params, x, s), support)?);
    }
    Ok(total)
}

/// Prior-weighted expected number of cards for one design row.
pub fn expected_cards(params: &ModelParams, x: &[f64], support: Support) -> Result<f64> {
    weighted_expectation(params, x, &params.pi, support)
}

/// Extension: segments weighted by one child's posterior probabilities
/// instead of the mixing weights.
pub fn expected_cards_posterior(
    params: &ModelParams,
    x: &[f64],
    posterior: &[f64],
    support: Support,
) -> Result<f64> {
    if posterior.len() != params.n_segments() {
        return Err(CmmError::DimensionMismatch(format!(
            "posterior row has {} entries for {} segments",
            posterior.len(),
            params.n_segments()
        )));
    }
    weighted_expectation(params, x, posterior, support)
}

/// Prior-weighted prediction for every row of `x`.
pub fn predict_rows(params: &ModelParams, x: &DesignMatrix, support: Support) -> Result<Vec<f64>> {
    (0..x.n_rows())
        .into_par_iter()
        .map(|i| expected_cards(params, x.row(i), support))
        .collect()
}

/// Average predicted outcome distribution over a set of rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedDistribution {
    pub mass: Vec<f64>,
}

/// Mean over `rows` of the prior-weighted pmf on `{0..32}`. In literal mode
/// the entries are those of the untruncated form and sum to less than one
/// by the mass above 32.
pub fn aggregate_distribution(
    params: &ModelParams,
    rows: &[&[f64]],
    support: Support,
) -> Result<PredictedDistribution> {
    if rows.is_empty() {
        return Err(CmmError::InvalidParameter("aggregate over zero rows".into()));
    }
    let partial: Vec<Vec<f64>> = rows
        .par_chunks(CHUNK)
        .map(|chunk| -> Result<Vec<f64>> {
            let mut acc = vec![0.0; SUPPORT_LEN];
            for x in chunk {
                check_row(params, x)?;
                for s in 0..params.n_segments() {
                    let m = segment_masses(params, segment_mu(params, x, s), support)?;
                    for (a, p) in acc.iter_mut().zip(&m) {
                        *a += params.pi[s] * p;
                    }
                }
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut mass = vec![0.0; SUPPORT_LEN];
    for p in &partial {
        for (a, v) in mass.iter_mut().zip(p) {
            *a += v;
        }
    }
    let n = rows.len() as f64;
    mass.iter_mut().for_each(|v| *v /= n);
    Ok(PredictedDistribution { mass })
}

/// Scale entry `k` by the unconditional probability of being censored at
/// card `k`. Card 0 cannot be censored.
pub fn censor_correct(dist: &PredictedDistribution, s: GameSetting) -> Result<Vec<f64>> {
    check_len(dist)?;
    let mut out = vec![0.0; SUPPORT_LEN];
    for k in 1..SUPPORT_LEN {
        out[k] = dist.mass[k] * marginal_censor_prob(k as u32, s)?;
    }
    Ok(out)
}

/// Probability of a round ending with a loss at card `k`, given the intended
/// card distribution: `Pr(Z >= k)` times the censoring probability at `k`.
/// This is the exact counterpart of [`censor_correct`], which uses
/// `Pr(Z = k)`.
pub fn censored_distribution(dist: &PredictedDistribution, s: GameSetting) -> Result<Vec<f64>> {
    check_len(dist)?;
    let mut out = vec![0.0; SUPPORT_LEN];
    let mut upper: f64 = dist.mass.iter().sum();
    for k in 0..SUPPORT_LEN {
        if k >= 1 {
            out[k] = upper.max(0.0) * marginal_censor_prob(k as u32, s)?;
        }
        upper -= dist.mass[k];
    }
    Ok(out)
}

fn check_len(dist: &PredictedDistribution) -> Result<()> {
    if dist.mass.len() != SUPPORT_LEN {
        return Err(CmmError::DimensionMismatch(format!(
            "distribution has {} entries, expected {SUPPORT_LEN}",
            dist.mass.len()
        )));
    }
    Ok(())
}

/// Share of uncensored trials at each card count.
pub fn empirical_uncensored(trials: &[&TrialRecord]) -> Vec<f64> {
    let mut h = vec![0.0; SUPPORT_LEN];
    let mut n = 0.0;
    for t in trials.iter().filter(|t| !t.censored) {
        h[t.y as usize] += 1.0;
        n += 1.0;
    }
    if n > 0.0 {
        h.iter_mut().for_each(|v| *v /= n);
    }
    h
}

/// Share of all trials that ended with a loss at each card.
pub fn empirical_censored(trials: &[&TrialRecord]) -> Vec<f64> {
    let mut h = vec![0.0; SUPPORT_LEN];
    for t in trials.iter().filter(|t| t.censored) {
        h[t.y as usize] += 1.0;
    }
    if !trials.is_empty() {
        let n = trials.len() as f64;
        h.iter_mut().for_each(|v| *v /= n);
    }
    h
}

/// Root-mean-square and mean absolute error over the uncensored trials.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitMeasures {
    pub rmse: f64,
    pub mad: f64,
    pub n_uncensored: usize,
}

pub fn evaluate(preds: &[f64], trials: &[TrialRecord]) -> Result<FitMeasures> {
    if preds.len() != trials.len() {
        return Err(CmmError::DimensionMismatch(format!(
            "{} predictions for {} trials",
            preds.len(),
            trials.len()
        )));
    }
    let (mut sq, mut abs, mut n) = (0.0, 0.0, 0usize);
    for (p, t) in preds.iter().zip(trials).filter(|(_, t)| !t.censored) {
        let e = f64::from(t.y) - p;
        sq += e * e;
        abs += e.abs();
        n += 1;
    }
    if n == 0 {
        return Err(CmmError::EmptyUncensored);
    }
    Ok(FitMeasures {
        rmse: (sq / n as f64).sqrt(),
        mad: abs / n as f64,
        n_uncensored: n,
    })
}

/// Base negative binomial mass above `m`.
pub fn tail_mass_above(mu: f64, delta: f64, m: u32) -> Result<f64> {
    Ok((1.0 - nb_cdf(i64::from(m), NegBinParams::new(mu, delta)?)?).max(0.0))
}

/// Largest base mass above [`LITERAL_M`] over every row and segment.
pub fn max_tail_mass(params: &ModelParams, x: &DesignMatrix) -> Result<f64> {
    let per_row: Vec<f64> = (0..x.n_rows())
        .into_par_iter()
        .map(|i| -> Result<f64> {
            let mut worst: f64 = 0.0;
            for s in 0..params.n_segments() {
                let mu = segment_mu(params, x.row(i), s);
                worst = worst.max(tail_mass_above(mu, params.delta, LITERAL_M)?);
            }
            Ok(worst)
        })
        .collect::<Result<_>>()?;
    Ok(per_row.into_iter().fold(0.0, f64::max))
}
