//! Mixture log-likelihood over children with analytic gradient.
//!
//! Each trial contributes a point mass (uncensored) or an upper tail
//! (censored) of the inflated negative binomial. Children are evaluated in
//! fixed-size chunks; chunk sums are combined in chunk order so totals do not
//! depend on the number of worker threads.

use rayon::prelude::*;

use crate::data::{Dataset, TrialRecord};
use crate::design::DesignMatrix;
use crate::dist::{
    inflated_cdf, inflated_pmf, nb_ln_pmf_unchecked, softplus, softplus_deriv, InflatedNB,
    MAX_CARDS,
};
use crate::error::{CmmError, Result};
use crate::game::{omega_at, GameSetting};
use crate::params::{ModelParams, ParamLayout};

/// Smallest value a trial factor may take before the log.
pub const THETA_FLOOR: f64 = 1e-300;

const CHUNK: usize = 32;

/// Per-trial likelihood factor.
pub fn theta(y: u32, censored: bool, d: &InflatedNB) -> Result<f64> {
    if y > MAX_CARDS {
        return Err(CmmError::OutOfSupport {
            value: y as i64,
            max: MAX_CARDS as i64,
        });
    }
    if censored {
        if y == 0 {
            return Err(CmmError::InvalidParameter("censored trial with y = 0".into()));
        }
        Ok((1.0 - inflated_cdf(y as i64 - 1, d)?).max(0.0))
    } else {
        inflated_pmf(y as i64, d)
    }
}

/// Inflation mass at or above `y`.
fn inflation_tail(y: u32) -> [f64; 3] {
    let zero = if y == 0 { 1.0 } else { 0.0 };
    let attract = crate::dist::ATTRACT_SET.iter().filter(|&&a| a >= y).count() as f64 / 7.0;
    let last = if y <= 31 { 1.0 } else { 0.0 };
    [zero, attract, last]
}

fn inflation_point(y: u32) -> [f64; 3] {
    [
        if y == 0 { 1.0 } else { 0.0 },
        if crate::dist::in_attract_set(y) { 1.0 / 7.0 } else { 0.0 },
        if y == 31 { 1.0 } else { 0.0 },
    ]
}

/// A trial factor and its partial derivatives in the natural parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThetaEval {
    pub theta: f64,
    pub d_mu: f64,
    pub d_delta: f64,
    pub d_phi: [f64; 4],
}

/// Base pmf f(0..=k_max) plus the partials of ln f in delta, by recurrence.
fn nb_table(k_max: u32, mu: f64, delta: f64, buf: &mut Vec<(f64, f64)>) {
    buf.clear();
    let log_ratio = (delta / (delta + mu)).ln();
    let tail_term = |k: f64| (mu - k) / (delta + mu);
    let ln_f0 = -delta * (mu / delta).ln_1p();
    let mut digamma_diff = 0.0;
    if ln_f0 > -700.0 {
        let r = mu / (delta + mu);
        let mut f = ln_f0.exp();
        for k in 0..=k_max {
            let kf = k as f64;
            buf.push((f, digamma_diff + log_ratio + tail_term(kf)));
            f *= (delta + kf) / (kf + 1.0) * r;
            digamma_diff += 1.0 / (delta + kf);
        }
    } else {
        for k in 0..=k_max {
            let kf = k as f64;
            let f = nb_ln_pmf_unchecked(k, mu, delta).exp();
            buf.push((f, digamma_diff + log_ratio + tail_term(kf)));
            digamma_diff += 1.0 / (delta + kf);
        }
    }
}

/// Sum of f(k) and f(k) * dln f/d delta over k >= start, continuing the
/// recurrence from the last tabulated term. Used when the upper tail is too
/// small to take as `1 - F`.
fn nb_upper_tail(start: u32, mu: f64, delta: f64, f_prev: f64) -> (f64, f64) {
    let log_ratio = (delta / (delta + mu)).ln();
    let r = mu / (delta + mu);
    let mut digamma_diff: f64 = (0..start).map(|j| 1.0 / (delta + j as f64)).sum();
    let mut f = f_prev * (delta + (start - 1) as f64) / start as f64 * r;
    let (mut sum, mut dsum) = (0.0, 0.0);
    let mode = ((delta - 1.0) * r / (1.0 - r)).max(0.0);
    let mut k = start as f64;
    for _ in 0..100_000 {
        sum += f;
        dsum += f * (digamma_diff + log_ratio + (mu - k) / (delta + mu));
        if k > mode && f <= 1e-18 * sum {
            break;
        }
        digamma_diff += 1.0 / (delta + k);
        f *= (delta + k) / (k + 1.0) * r;
        k += 1.0;
    }
    (sum, dsum)
}

/// Trial factor with partials; `buf` is scratch space.
pub fn theta_eval(
    y: u32,
    censored: bool,
    mu: f64,
    delta: f64,
    phi: &[f64; 4],
    buf: &mut Vec<(f64, f64)>,
) -> ThetaEval {
    let mu = mu.max(1e-300);
    let tail_start = if censored {
        Some(y)
    } else if y == MAX_CARDS {
        Some(MAX_CARDS)
    } else {
        None
    };
    match tail_start {
        None => {
            nb_table(y, mu, delta, buf);
            let (f, gd) = buf[y as usize];
            let yf = y as f64;
            let infl = inflation_point(y);
            let theta = phi[0] * f + phi[1] * infl[0] + phi[2] * infl[1] + phi[3] * infl[2];
            ThetaEval {
                theta,
                d_mu: phi[0] * f * (yf / mu - (delta + yf) / (delta + mu)),
                d_delta: phi[0] * f * gd,
                d_phi: [f, infl[0], infl[1], infl[2]],
            }
        }
        Some(start) => {
            // start >= 1 here
            nb_table(start - 1, mu, delta, buf);
            let cdf: f64 = buf.iter().map(|(f, _)| f).sum();
            let (tail, d_tail_delta) = if cdf > 0.9 {
                nb_upper_tail(start, mu, delta, buf[(start - 1) as usize].0)
            } else {
                (1.0 - cdf, -buf.iter().map(|(f, g)| f * g).sum::<f64>())
            };
            let f_last = buf[(start - 1) as usize].0;
            let d_tail_mu = f_last * (delta + (start - 1) as f64) / (delta + mu);
            let infl = inflation_tail(start);
            let theta = phi[0] * tail + phi[1] * infl[0] + phi[2] * infl[1] + phi[3] * infl[2];
            ThetaEval {
                theta,
                d_mu: phi[0] * d_tail_mu,
                d_delta: phi[0] * d_tail_delta,
                d_phi: [tail, infl[0], infl[1], infl[2]],
            }
        }
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Log-likelihood of one child: `log sum_s pi_s prod_t theta_ts`.
pub fn person_loglik(trials: &[TrialRecord], rows: &[&[f64]], params: &ModelParams) -> Result<f64> {
    if trials.is_empty() || trials.len() != rows.len() {
        return Err(CmmError::DimensionMismatch(format!(
            "{} trials, {} design rows",
            trials.len(),
            rows.len()
        )));
    }
    let mut buf = Vec::new();
    let terms: Vec<f64> = (0..params.n_segments())
        .map(|s| {
            let mut l = params.pi[s].ln();
            for (t, x) in trials.iter().zip(rows) {
                let eta = params.alpha[s] + dot(x, &params.beta);
                let e = theta_eval(t.y, t.censored, softplus(eta), params.delta, &params.phi.0, &mut buf);
                l += e.theta.max(THETA_FLOOR).ln();
            }
            l
        })
        .collect();
    let ll = log_sum_exp(&terms);
    if !ll.is_finite() {
        return Err(CmmError::NonFinite {
            child_id: trials[0].child_id.clone(),
        });
    }
    Ok(ll)
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Objective value, optional gradient in unconstrained coordinates, and the
/// number of floored trial factors.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub negloglik: f64,
    pub gradient: Option<Vec<f64>>,
    pub floored: usize,
}

#[derive(Debug, Clone)]
struct ChunkOut {
    loglik: f64,
    /// Gradient of the log-likelihood in natural coordinates: alpha, beta,
    /// delta, phi, then the sigma block directly.
    grad: Vec<f64>,
    floored: usize,
}

/// Likelihood problem: observations and design rows, laid out per child.
#[derive(Debug, Clone)]
pub struct LikelihoodModel {
    layout: ParamLayout,
    x: DesignMatrix,
    y: Vec<u32>,
    censored: Vec<bool>,
    settings: Vec<GameSetting>,
    offsets: Vec<usize>,
    child_ids: Vec<String>,
}

impl LikelihoodModel {
    pub fn new(data: &Dataset, x: &DesignMatrix, layout: ParamLayout) -> Result<Self> {
        if x.n_rows() != data.n_trials() || x.n_cols() != layout.block_map.n_columns {
            return Err(CmmError::DimensionMismatch(format!(
                "design is {}x{}, data has {} trials and layout {} columns",
                x.n_rows(),
                x.n_cols(),
                data.n_trials(),
                layout.block_map.n_columns
            )));
        }
        let mut offsets = vec![0];
        for i in 0..data.n_children() {
            offsets.push(data.child_range(i).end);
        }
        Ok(LikelihoodModel {
            layout,
            x: x.clone(),
            y: data.trials.iter().map(|t| t.y).collect(),
            censored: data.trials.iter().map(|t| t.censored).collect(),
            settings: data.trials.iter().map(|t| t.setting).collect(),
            offsets,
            child_ids: data.children.rows.iter().map(|r| r.child_id.clone()).collect(),
        })
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn n_children(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Sum of `log Omega` over trials: the game-mechanics factor that does
    /// not depend on the parameters.
    pub fn omega_constant(&self) -> f64 {
        (0..self.y.len())
            .map(|r| omega_at(self.y[r], self.censored[r], self.settings[r]).ln())
            .sum()
    }

    /// `ln pi_s + sum_t ln theta_its` for every child and segment.
    pub fn segment_logliks(&self, params: &ModelParams) -> Result<Vec<Vec<f64>>> {
        params.validate(self.layout.block_map.n_columns)?;
        let out: Vec<Vec<f64>> = (0..self.n_children())
            .into_par_iter()
            .with_min_len(CHUNK)
            .map(|i| {
                let mut buf = Vec::new();
                let rows = self.offsets[i]..self.offsets[i + 1];
                (0..params.n_segments())
                    .map(|s| {
                        let mut l = params.pi[s].ln();
                        for r in rows.clone() {
                            let eta = params.alpha[s] + dot(self.x.row(r), &params.beta);
                            let e = theta_eval(
                                self.y[r],
                                self.censored[r],
                                softplus(eta),
                                params.delta,
                                &params.phi.0,
                                &mut buf,
                            );
                            l += e.theta.max(THETA_FLOOR).ln();
                        }
                        l
                    })
                    .collect()
            })
            .collect();
        for (i, row) in out.iter().enumerate() {
            if row.iter().any(|v| v.is_nan()) || !log_sum_exp(row).is_finite() {
                return Err(CmmError::NonFinite {
                    child_id: self.child_ids[i].clone(),
                });
            }
        }
        Ok(out)
    }

    /// Per-child log-likelihood contributions.
    pub fn person_logliks(&self, params: &ModelParams) -> Result<Vec<f64>> {
        Ok(self
            .segment_logliks(params)?
            .iter()
            .map(|r| log_sum_exp(r))
            .collect())
    }

    pub fn negloglik(&self, u: &[f64]) -> Result<f64> {
        Ok(self.evaluate(u, false)?.negloglik)
    }

    pub fn negloglik_and_gradient(&self, u: &[f64]) -> Result<(f64, Vec<f64>)> {
        let e = self.evaluate(u, true)?;
        Ok((e.negloglik, e.gradient.expect("requested")))
    }

    pub fn evaluate(&self, u: &[f64], want_grad: bool) -> Result<Evaluation> {
        let params = self.layout.expand(u)?;
        if u.iter().any(|v| !v.is_finite()) {
            return Err(CmmError::InvalidParameter("non-finite parameter vector".into()));
        }
        let n_chunks = self.n_children().div_ceil(CHUNK);
        let chunks: Vec<ChunkOut> = (0..n_chunks)
            .into_par_iter()
            .map(|c| {
                let lo = c * CHUNK;
                let hi = (lo + CHUNK).min(self.n_children());
                self.eval_children(lo..hi, &params, want_grad)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut loglik = 0.0;
        let mut floored = 0;
        let mut grad_nat = vec![0.0; if want_grad { chunks[0].grad.len() } else { 0 }];
        for c in &chunks {
            loglik += c.loglik;
            floored += c.floored;
            for (g, v) in grad_nat.iter_mut().zip(&c.grad) {
                *g += v;
            }
        }
        let gradient = want_grad.then(|| self.to_unconstrained(&grad_nat, &params));
        Ok(Evaluation {
            negloglik: -loglik,
            gradient,
            floored,
        })
    }

    fn eval_children(
        &self,
        children: std::ops::Range<usize>,
        p: &ModelParams,
        want_grad: bool,
    ) -> Result<ChunkOut> {
        let s_count = p.n_segments();
        let n_cols = p.beta.len();
        let base_len = s_count + n_cols + 1 + 4;
        let mut out = ChunkOut {
            loglik: 0.0,
            grad: vec![0.0; if want_grad { base_len + s_count } else { 0 }],
            floored: 0,
        };
        let mut buf = Vec::with_capacity(MAX_CARDS as usize + 1);
        let ln_pi: Vec<f64> = p.pi.iter().map(|v| v.ln()).collect();
        let mut seg_ll = vec![0.0; s_count];
        // per segment: d/dalpha, d/ddelta, d/dphi[4]
        let mut seg_grad = vec![[0.0f64; 6]; s_count];
        let mut coef: Vec<f64> = Vec::new();
        let mut xb: Vec<f64> = Vec::new();
        for i in children {
            let rows = self.offsets[i]..self.offsets[i + 1];
            let n_t = rows.len();
            xb.clear();
            xb.extend(rows.clone().map(|r| dot(self.x.row(r), &p.beta)));
            coef.clear();
            coef.resize(n_t * s_count, 0.0);
            for s in 0..s_count {
                let mut l = ln_pi[s];
                let mut g = [0.0; 6];
                for (t, r) in rows.clone().enumerate() {
                    let eta = p.alpha[s] + xb[t];
                    let mu = softplus(eta);
                    let e = theta_eval(self.y[r], self.censored[r], mu, p.delta, &p.phi.0, &mut buf);
                    if e.theta < THETA_FLOOR || e.theta.is_nan() {
                        out.floored += 1;
                        l += THETA_FLOOR.ln();
                        continue;
                    }
                    l += e.theta.ln();
                    if want_grad {
                        let c = e.d_mu / e.theta * softplus_deriv(eta);
                        coef[t * s_count + s] = c;
                        g[0] += c;
                        g[1] += e.d_delta / e.theta;
                        for m in 0..4 {
                            g[2 + m] += e.d_phi[m] / e.theta;
                        }
                    }
                }
                seg_ll[s] = l;
                seg_grad[s] = g;
            }
            let ll = log_sum_exp(&seg_ll);
            if !ll.is_finite() {
                return Err(CmmError::NonFinite {
                    child_id: self.child_ids[i].clone(),
                });
            }
            out.loglik += ll;
            if want_grad {
                let w: Vec<f64> = seg_ll.iter().map(|l| (l - ll).exp()).collect();
                let gr = &mut out.grad;
                for s in 0..s_count {
                    gr[s] += w[s] * seg_grad[s][0];
                    gr[s_count + n_cols] += w[s] * seg_grad[s][1];
                    for m in 0..4 {
                        gr[s_count + n_cols + 1 + m] += w[s] * seg_grad[s][2 + m];
                    }
                    gr[base_len + s] += w[s] - p.pi[s];
                }
                for (t, r) in rows.clone().enumerate() {
                    let c: f64 = (0..s_count).map(|s| w[s] * coef[t * s_count + s]).sum();
                    if c != 0.0 {
                        for (g, x) in gr[s_count..s_count + n_cols].iter_mut().zip(self.x.row(r)) {
                            *g += c * x;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Chain natural-coordinate log-likelihood gradient into the negative
    /// log-likelihood gradient in unconstrained coordinates.
    fn to_unconstrained(&self, g: &[f64], p: &ModelParams) -> Vec<f64> {
        let l = &self.layout;
        let s_count = l.n_segments;
        let n_cols = l.block_map.n_columns;
        let a = l.block_map.expansion_matrix(s_count);
        let mut out = vec![0.0; l.dim()];
        for col in 0..l.n_gamma() {
            out[col] = -(0..s_count + n_cols).map(|r| a[(r, col)] * g[r]).sum::<f64>();
        }
        let gd = g[s_count + n_cols];
        out[l.log_delta_index()] = -p.delta * gd;
        let gphi = &g[s_count + n_cols + 1..s_count + n_cols + 5];
        let phi = p.phi.0;
        for (k, idx) in l.tau_range().enumerate() {
            out[idx] = -(0..4)
                .map(|m| gphi[m] * phi[m] * (if m == k { 1.0 } else { 0.0 } - phi[k]))
                .sum::<f64>();
        }
        let gsig = &g[s_count + n_cols + 5..];
        for (k, idx) in l.sigma_range().enumerate() {
            out[idx] = -gsig[k];
        }
        out
    }

    /// Central finite-difference gradient, for debugging and tests.
    pub fn fd_gradient(&self, u: &[f64], rel_step: f64) -> Result<Vec<f64>> {
        let mut g = vec![0.0; u.len()];
        let mut w = u.to_vec();
        for k in 0..u.len() {
            let h = rel_step * u[k].abs().max(1.0);
            w[k] = u[k] + h;
            let up = self.negloglik(&w)?;
            w[k] = u[k] - h;
            let dn = self.negloglik(&w)?;
            w[k] = u[k];
            g[k] = (up - dn) / (2.0 * h);
        }
        Ok(g)
    }
}

/// Negative log-likelihood, optionally including the Omega constant.
pub fn total_negloglik(model: &LikelihoodModel, u: &[f64], with_omega: bool) -> Result<f64> {
    let v = model.negloglik(u)?;
    Ok(if with_omega { v - model.omega_constant() } else { v })
}

/// Analytic gradient of [`total_negloglik`].
pub fn loglik_gradient(model: &LikelihoodModel, u: &[f64]) -> Result<Vec<f64>> {
    Ok(model.negloglik_and_gradient(u)?.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ChildTable;
    use crate::design::{build_design, BlockMap, CategoricalSpec, CovariateSchema};
    use crate::dist::{InflationWeights, NegBinParams};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn d(mu: f64, delta: f64, phi: [f64; 4]) -> InflatedNB {
        InflatedNB::new(NegBinParams::new(mu, delta).unwrap(), InflationWeights::new(phi).unwrap())
            .unwrap()
    }

    #[test]
    fn theta_examples() {
        let dist = d(9.0, 2.0, [0.8, 0.05, 0.1, 0.05]);
        let brute: f64 = (12..=32).map(|l| inflated_pmf(l, &dist).unwrap()).sum();
        assert_abs_diff_eq!(theta(12, true, &dist).unwrap(), brute, epsilon = 1e-12);
        assert_abs_diff_eq!(
            theta(1, true, &dist).unwrap(),
            1.0 - inflated_pmf(0, &dist).unwrap(),
            epsilon = 1e-15
        );
        assert!(theta(0, true, &dist).is_err());
        assert!(theta(33, false, &dist).is_err());
    }

    #[test]
    fn theta_eval_matches_theta() {
        let mut buf = Vec::new();
        for &(mu, delta) in &[(0.3, 0.5), (9.0, 2.0), (20.0, 8.0), (45.0, 1.5), (2.0, 40.0)] {
            let phi = [0.7, 0.1, 0.15, 0.05];
            let dist = d(mu, delta, phi);
            for y in 0..=32u32 {
                for c in [false, true] {
                    if c && y == 0 {
                        continue;
                    }
                    let e = theta_eval(y, c, mu, delta, &phi, &mut buf);
                    let t = theta(y, c, &dist).unwrap();
                    assert!((e.theta - t).abs() <= 1e-13, "{mu} {delta} {y} {c}");
                }
            }
        }
    }

    #[test]
    fn theta_partials_match_finite_differences() {
        let mut buf = Vec::new();
        let phi = [0.7, 0.1, 0.15, 0.05];
        for &(mu, delta) in &[(0.8, 0.6), (9.0, 2.0), (30.0, 6.0), (3.0, 25.0)] {
            for y in [0u32, 1, 4, 13, 31, 32] {
                for c in [false, true] {
                    if c && y == 0 {
                        continue;
                    }
                    let e = theta_eval(y, c, mu, delta, &phi, &mut buf);
                    let h = 1e-6;
                    let fm = |m: f64, dl: f64| theta_eval(y, c, m, dl, &phi, &mut Vec::new()).theta;
                    let dmu = (fm(mu + h, delta) - fm(mu - h, delta)) / (2.0 * h);
                    let ddl = (fm(mu, delta + h) - fm(mu, delta - h)) / (2.0 * h);
                    assert!((e.d_mu - dmu).abs() < 1e-7, "mu {mu} {delta} {y} {c}: {} {dmu}", e.d_mu);
                    assert!((e.d_delta - ddl).abs() < 1e-7, "delta {mu} {delta} {y} {c}: {} {ddl}", e.d_delta);
                }
            }
        }
    }

    #[test]
    fn small_tail_is_accurate() {
        // censored at 32 with tiny mean: tail far below double rounding of 1 - F
        let mut buf = Vec::new();
        let e = theta_eval(32, true, 2.0, 10.0, &[1.0, 0.0, 0.0, 0.0], &mut buf);
        let direct: f64 = (32..400u32).map(|k| nb_ln_pmf_unchecked(k, 2.0, 10.0).exp()).sum();
        assert!(e.theta > 0.0);
        assert!((e.theta - direct).abs() < 1e-10 * direct);
    }

    proptest! {
        #[test]
        fn theta_telescopes(mu in 0.1f64..50.0, delta in 0.2f64..30.0, raw in proptest::collection::vec(0.01f64..1.0, 4)) {
            let total: f64 = raw.iter().sum();
            let phi = [raw[0] / total, raw[1] / total, raw[2] / total, raw[3] / total];
            let dist = d(mu, delta, phi);
            let point: Vec<f64> = (0..=32u32).map(|y| theta(y, false, &dist).unwrap()).collect();
            prop_assert!((point.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let mut prev = 1.0;
            for y in 1..=32u32 {
                let c = theta(y, true, &dist).unwrap();
                let tail: f64 = point[y as usize..].iter().sum();
                prop_assert!((c - tail).abs() < 1e-12);
                prop_assert!(c <= prev + 1e-15);
                prev = c;
            }
        }
    }

    fn trial(child: &str, idx: u32, y: u32, censored: bool) -> TrialRecord {
        TrialRecord {
            child_id: child.into(),
            trial_index: idx,
            setting: GameSetting::from_values(10, 250, 1).unwrap(),
            prev_loss: false,
            prev2_loss: false,
            y,
            censored,
            score: 0,
            z_true: None,
        }
    }

    fn plain_params(alpha: Vec<f64>, pi: Vec<f64>) -> ModelParams {
        ModelParams {
            alpha,
            beta: vec![],
            delta: 2.0,
            phi: InflationWeights([0.8, 0.05, 0.1, 0.05]),
            pi,
        }
    }

    #[test]
    fn person_loglik_examples() {
        let trials = vec![trial("a", 1, 7, false)];
        let rows: Vec<&[f64]> = vec![&[]];
        let p = plain_params(vec![6.0], vec![1.0]);
        let dist = d(softplus(6.0), 2.0, p.phi.0);
        assert_abs_diff_eq!(
            person_loglik(&trials, &rows, &p).unwrap(),
            inflated_pmf(7, &dist).unwrap().ln(),
            epsilon = 1e-12
        );
        let trials = vec![trial("a", 1, 7, false), trial("a", 2, 3, true)];
        let rows: Vec<&[f64]> = vec![&[], &[]];
        let p2 = plain_params(vec![6.0, 6.0], vec![0.5, 0.5]);
        let p1 = plain_params(vec![6.0], vec![1.0]);
        assert_abs_diff_eq!(
            person_loglik(&trials, &rows, &p2).unwrap(),
            person_loglik(&trials, &rows, &p1).unwrap(),
            epsilon = 1e-12
        );
        // hand mixture
        let p = plain_params(vec![3.0, 15.0], vec![0.3, 0.7]);
        let th = |a: f64| {
            let dist = d(softplus(a), 2.0, p.phi.0);
            theta(7, false, &dist).unwrap() * theta(3, true, &dist).unwrap()
        };
        let expect = (0.3 * th(3.0) + 0.7 * th(15.0)).ln();
        assert_abs_diff_eq!(person_loglik(&trials, &rows, &p).unwrap(), expect, epsilon = 1e-12);
        // trial order does not matter
        let rev: Vec<TrialRecord> = trials.iter().rev().cloned().collect();
        assert_abs_diff_eq!(
            person_loglik(&rev, &rows, &p).unwrap(),
            expect,
            epsilon = 1e-12
        );
    }

    fn toy_dataset(n: usize) -> Dataset {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut csv = String::from("child_id,sex,iq\n");
        let mut trials = Vec::new();
        for i in 0..n {
            let sex = if rng.random::<bool>() { "boy" } else { "girl" };
            csv += &format!("c{i},{sex},{}\n", 80 + rng.random_range(0..40));
            for t in 1..=4u32 {
                let y = rng.random_range(0..=32u32);
                let censored = y > 0 && rng.random::<f64>() < 0.5;
                let mut tr = trial(&format!("c{i}"), t, y, censored);
                tr.setting = GameSetting::all()[rng.random_range(0..8)];
                tr.prev_loss = rng.random();
                trials.push(tr);
            }
        }
        Dataset::new(ChildTable::read_csv(csv.as_bytes()).unwrap(), trials).unwrap()
    }

    fn toy_schema() -> CovariateSchema {
        let cat = |n: &str, l: &[&str]| CategoricalSpec {
            name: n.into(),
            levels: l.iter().map(|s| s.to_string()).collect(),
        };
        CovariateSchema {
            numeric: vec!["iq".into()],
            categorical: vec![
                cat("sex", &["boy", "girl"]),
                cat("n_loss_cards", &["1", "3"]),
                cat("prev_loss", &["0", "1"]),
            ],
            interactions: vec![["n_loss_cards".into(), "sex".into()]],
        }
    }

    fn toy_model(n: usize, s: usize) -> (Dataset, LikelihoodModel) {
        let data = toy_dataset(n);
        let design = build_design(&data, &toy_schema()).unwrap();
        let layout = ParamLayout::new(s, BlockMap::from_schema(&toy_schema()).unwrap()).unwrap();
        let m = LikelihoodModel::new(&data, &design.matrix, layout).unwrap();
        (data, m)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (_, m) = toy_model(30, 2);
        let dim = m.layout().dim();
        for seed in 0..3 {
            let u: Vec<f64> = (0..dim)
                .map(|i| {
                    let v = ((i * 31 + seed * 17) % 13) as f64 / 13.0 - 0.5;
                    if i < 2 { 8.0 + 6.0 * v + 4.0 * i as f64 } else { v }
                })
                .collect();
            let (_, g) = m.negloglik_and_gradient(&u).unwrap();
            let fd = m.fd_gradient(&u, 1e-5).unwrap();
            for k in 0..dim {
                assert!(
                    (g[k] - fd[k]).abs() <= 1e-5 * g[k].abs().max(1.0),
                    "coord {k}: {} vs {}",
                    g[k],
                    fd[k]
                );
            }
        }
    }

    #[test]
    fn label_switching_symmetry() {
        let (_, m) = toy_model(20, 2);
        let l = m.layout().clone();
        let mut u = vec![0.1; l.dim()];
        u[0] = 4.0;
        u[1] = 12.0;
        u[l.sigma_range().start] = 0.4;
        let p = l.expand(&u).unwrap();
        let mut swapped = p.clone();
        swapped.alpha.swap(0, 1);
        swapped.pi.swap(0, 1);
        let a: f64 = m.person_logliks(&p).unwrap().iter().sum();
        let b: f64 = m.person_logliks(&swapped).unwrap().iter().sum();
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        assert_abs_diff_eq!(-a, m.negloglik(&u).unwrap(), epsilon = 1e-9);
    }

    #[test]
    fn single_censored_trial_objective() {
        let children = ChildTable::read_csv("child_id\na\n".as_bytes()).unwrap();
        let data = Dataset::new(children, vec![trial("a", 1, 1, true)]).unwrap();
        let schema = CovariateSchema::default();
        let design = build_design(&data, &schema).unwrap();
        let layout = ParamLayout::new(1, BlockMap::from_schema(&schema).unwrap()).unwrap();
        let m = LikelihoodModel::new(&data, &design.matrix, layout.clone()).unwrap();
        let u = vec![5.0, 0.3, 1.0, -1.0, 0.5];
        let p = layout.expand(&u).unwrap();
        let dist = d(softplus(5.0), p.delta, p.phi.0);
        let expect = -(1.0 - inflated_pmf(0, &dist).unwrap()).ln();
        assert_abs_diff_eq!(total_negloglik(&m, &u, false).unwrap(), expect, epsilon = 1e-12);
        // Omega for censoring at card 1 with one loss card is 1/32
        assert_abs_diff_eq!(
            total_negloglik(&m, &u, true).unwrap(),
            expect + 32f64.ln(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn zero_inflation_limit() {
        let children = ChildTable::read_csv("child_id\na\nb\n".as_bytes()).unwrap();
        let data =
            Dataset::new(children, vec![trial("a", 1, 0, false), trial("b", 1, 0, false)]).unwrap();
        let schema = CovariateSchema::default();
        let design = build_design(&data, &schema).unwrap();
        let layout = ParamLayout::new(1, BlockMap::from_schema(&schema).unwrap()).unwrap();
        let m = LikelihoodModel::new(&data, &design.matrix, layout).unwrap();
        let mut prev = f64::INFINITY;
        for big in [2.0, 6.0, 12.0, 24.0] {
            let v = m.negloglik(&[20.0, 0.0, -big, big, -big]).unwrap();
            assert!(v < prev && v > 0.0);
            prev = v;
        }
        assert!(prev < 1e-9);
    }
}
