//! Posterior segment membership, BIC-based segment selection and the Wald
//! test on posterior-weighted segment means.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{CmmError, Result};
use crate::estimate::{FitResult, DEGENERATE_PI};
use crate::likelihood::LikelihoodModel;
use crate::params::ModelParams;

/// Posterior segment probabilities, one row per child.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorMatrix {
    pub rows: Vec<Vec<f64>>,
}

impl PosteriorMatrix {
    pub fn n_segments(&self) -> usize {
        self.rows.first().map_or(0, |r| r.len())
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.rows.len(), self.n_segments(), |i, j| self.rows[i][j])
    }

    /// Largest posterior of each child.
    pub fn max_posterior(&self) -> Vec<f64> {
        self.rows
            .iter()
            .map(|r| r.iter().copied().fold(0.0, f64::max))
            .collect()
    }
}

/// Bayes posteriors from per-segment log-likelihoods (`ln pi_s` included).
pub fn posteriors_from_logliks(seg: &[Vec<f64>]) -> PosteriorMatrix {
    let rows = seg
        .iter()
        .map(|r| {
            let m = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = r.iter().map(|v| (v - m).exp()).collect();
            let total: f64 = w.iter().sum();
            w.iter().map(|v| v / total).collect()
        })
        .collect();
    PosteriorMatrix { rows }
}

/// Posterior membership of every child under `params`.
pub fn posteriors(model: &LikelihoodModel, params: &ModelParams) -> Result<PosteriorMatrix> {
    Ok(posteriors_from_logliks(&model.segment_logliks(params)?))
}

/// `-2 loglik + n_params ln(n_units)`.
pub fn bic(loglik: f64, n_params: usize, n_units: usize) -> Result<f64> {
    if n_units == 0 {
        return Err(CmmError::InvalidParameter("BIC needs at least one unit".into()));
    }
    Ok(-2.0 * loglik + n_params as f64 * (n_units as f64).ln())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionCriteria {
    pub min_share: f64,
    /// Adjacent sorted intercepts must differ by this many joint SEs.
    pub min_alpha_gap_se: f64,
    /// Also require BIC to improve on the next smaller candidate.
    pub require_bic_improvement: bool,
}

impl Default for SelectionCriteria {
    fn default() -> Self {
        SelectionCriteria {
            min_share: 0.05,
            min_alpha_gap_se: 2.0,
            require_bic_improvement: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentCandidate {
    pub n_segments: usize,
    pub loglik: f64,
    pub bic: f64,
    pub n_params: usize,
    pub converged: bool,
    pub min_share: f64,
    /// Smallest adjacent intercept gap in joint SEs; `None` without SEs.
    pub min_alpha_gap_se: Option<f64>,
    pub bic_improves: bool,
    pub passes_share: bool,
    pub passes_gap: bool,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentSelectionReport {
    pub criteria: SelectionCriteria,
    pub candidates: Vec<SegmentCandidate>,
    pub recommended: usize,
    /// No candidate met every enabled criterion; the smallest was chosen.
    pub overridden: bool,
}

/// Smallest gap between adjacent intercepts (sorted) in joint standard errors.
pub fn min_alpha_gap(alpha: &[f64], alpha_cov: &DMatrix<f64>) -> f64 {
    let mut order: Vec<usize> = (0..alpha.len()).collect();
    order.sort_by(|&a, &b| alpha[a].total_cmp(&alpha[b]));
    order
        .windows(2)
        .map(|w| {
            let (a, b) = (w[0], w[1]);
            let var = alpha_cov[(a, a)] + alpha_cov[(b, b)] - 2.0 * alpha_cov[(a, b)];
            let gap = alpha[b] - alpha[a];
            if var > 0.0 {
                gap / var.sqrt()
            } else if gap > 0.0 {
                f64::INFINITY
            } else {
                0.0
            }
        })
        .fold(f64::INFINITY, f64::min)
}

/// Evaluate each candidate on the three criteria and recommend the largest
/// segment count meeting all enabled ones.
pub fn select_segments(fits: &[FitResult], criteria: SelectionCriteria) -> Result<SegmentSelectionReport> {
    if fits.is_empty() {
        return Err(CmmError::InvalidParameter("no fits to compare".into()));
    }
    let mut sorted: Vec<&FitResult> = fits.iter().collect();
    sorted.sort_by_key(|f| f.n_segments);
    let mut candidates = Vec::with_capacity(sorted.len());
    let mut prev_bic: Option<f64> = None;
    for f in sorted {
        let s = f.n_segments;
        let min_share = f.params.pi.iter().copied().fold(f64::INFINITY, f64::min);
        let gap = if s == 1 {
            Some(f64::INFINITY)
        } else {
            f.natural_cov_matrix().map(|c| {
                let ac = c.view((0, 0), (s, s)).into_owned();
                min_alpha_gap(&f.params.alpha, &ac)
            })
        };
        let bic_improves = prev_bic.is_none_or(|b| f.bic < b);
        prev_bic = Some(f.bic);
        candidates.push(SegmentCandidate {
            n_segments: s,
            loglik: f.loglik,
            bic: f.bic,
            n_params: f.n_params,
            converged: f.converged,
            min_share,
            min_alpha_gap_se: gap.filter(|g| g.is_finite()),
            bic_improves,
            passes_share: min_share >= criteria.min_share,
            passes_gap: gap.is_some_and(|g| g >= criteria.min_alpha_gap_se),
            degenerate: min_share < DEGENERATE_PI,
        });
    }
    let passing = |c: &SegmentCandidate| {
        c.passes_share && c.passes_gap && (!criteria.require_bic_improvement || c.bic_improves)
    };
    let best = candidates.iter().filter(|c| passing(c)).map(|c| c.n_segments).max();
    Ok(SegmentSelectionReport {
        criteria,
        recommended: best.unwrap_or(candidates[0].n_segments),
        overridden: best.is_none(),
        candidates,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Covariance {
    /// `sigma^2 (P'P)^-1`.
    #[default]
    Homoskedastic,
    /// White's sandwich estimator.
    Robust,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaldProfile {
    /// Weighted segment means; `NaN` for dropped segments.
    pub psi_star: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
    pub stars: String,
    /// 1-based segments without posterior mass, left out of the test.
    pub dropped: Vec<usize>,
}

/// Significance stars: `***` below 0.01, `**` below 0.05, `*` below 0.10.
pub fn stars(p: f64) -> &'static str {
    if p < 0.01 {
        "***"
    } else if p < 0.05 {
        "**"
    } else if p < 0.10 {
        "*"
    } else {
        ""
    }
}

/// Adjacent-difference contrast matrix, `(k - 1) x k`.
pub fn adjacent_contrast(k: usize) -> DMatrix<f64> {
    let mut d = DMatrix::zeros(k.saturating_sub(1), k);
    for i in 0..k.saturating_sub(1) {
        d[(i, i)] = 1.0;
        d[(i, i + 1)] = -1.0;
    }
    d
}

/// Regress `score` on the posteriors without intercept, map the coefficients
/// to posterior-weighted means and test their equality.
pub fn weighted_profile(p: &PosteriorMatrix, score: &[f64], cov_kind: Covariance) -> Result<WaldProfile> {
    let n = p.rows.len();
    let s_all = p.n_segments();
    if n != score.len() {
        return Err(CmmError::DimensionMismatch(format!(
            "{n} posterior rows, {} scores",
            score.len()
        )));
    }
    if score.iter().any(|v| !v.is_finite()) {
        return Err(CmmError::Data("score contains non-finite values".into()));
    }
    let full = p.to_matrix();
    let mass: Vec<f64> = (0..s_all).map(|j| full.column(j).sum()).collect();
    let keep: Vec<usize> = (0..s_all).filter(|&j| mass[j] > 1e-8 * n as f64).collect();
    let dropped: Vec<usize> = (0..s_all).filter(|j| !keep.contains(j)).map(|j| j + 1).collect();
    let k = keep.len();
    if k == 0 || n <= k {
        return Err(CmmError::Singular("not enough children per segment".into()));
    }
    let pm = DMatrix::from_fn(n, k, |i, j| full[(i, keep[j])]);
    let y = DVector::from_column_slice(score);
    let ptp = pm.transpose() * &pm;
    let ptp_inv = ptp
        .clone()
        .try_inverse()
        .filter(|m| m.iter().all(|v| v.is_finite()))
        .ok_or_else(|| CmmError::Singular("P'P".into()))?;
    let psi = &ptp_inv * (pm.transpose() * &y);
    let resid = &y - &pm * &psi;
    let cov_psi = match cov_kind {
        Covariance::Homoskedastic => &ptp_inv * (resid.norm_squared() / (n - k) as f64),
        Covariance::Robust => {
            let mut meat = DMatrix::zeros(k, k);
            for i in 0..n {
                let row = pm.row(i);
                meat += row.transpose() * row * resid[i].powi(2);
            }
            &ptp_inv * meat * &ptp_inv
        }
    };
    let b = DMatrix::from_fn(k, k, |i, j| ptp[(i, j)] / mass[keep[i]]);
    let psi_star = &b * &psi;
    let cov_star = &b * cov_psi * b.transpose();
    let d = adjacent_contrast(k);
    let diff = &d * &psi_star;
    let scale = psi_star.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
    let statistic = if k < 2 || diff.iter().all(|v| v.abs() <= 1e-12 * scale) {
        0.0
    } else {
        let v = &d * &cov_star * d.transpose();
        let sol = v
            .clone()
            .cholesky()
            .ok_or_else(|| CmmError::Singular("contrast covariance".into()))?
            .solve(&diff);
        diff.dot(&sol).max(0.0)
    };
    let df = k.saturating_sub(1);
    let p_value = if df == 0 || statistic == 0.0 {
        1.0
    } else {
        ChiSquared::new(df as f64)
            .map_err(|e| CmmError::Invariant(e.to_string()))?
            .sf(statistic)
    };
    let mut out_psi = vec![f64::NAN; s_all];
    for (j, &col) in keep.iter().enumerate() {
        out_psi[col] = psi_star[j];
    }
    Ok(WaldProfile {
        psi_star: out_psi,
        cov: (0..k)
            .map(|i| (0..k).map(|j| cov_star[(i, j)]).collect())
            .collect(),
        statistic,
        df,
        p_value,
        stars: stars(p_value).to_string(),
        dropped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn bic_examples() {
        assert_abs_diff_eq!(
            bic(-1000.0, 10, 3404).unwrap(),
            2000.0 + 10.0 * 3404f64.ln(),
            epsilon = 1e-9
        );
        assert!((bic(-1000.0, 10, 3404).unwrap() - 2081.327).abs() < 1e-3);
        assert!(bic(-1.0, 11, 5).unwrap() > bic(-1.0, 10, 5).unwrap());
        assert!(bic(0.0, 1, 0).is_err());
    }

    #[test]
    fn posterior_examples() {
        let p = posteriors_from_logliks(&[vec![-3.0], vec![-900.0]]);
        assert_eq!(p.rows, vec![vec![1.0], vec![1.0]]);
        let l = [0.2f64.ln() - 5.0, 0.8f64.ln() - 5.0];
        let p = posteriors_from_logliks(&[l.to_vec()]);
        assert_abs_diff_eq!(p.rows[0][0], 0.2, epsilon = 1e-12);
        // hand Bayes: prior (0.4, 0.6), likelihoods (0.1, 0.3)
        let p = posteriors_from_logliks(&[vec![(0.4f64 * 0.1).ln(), (0.6f64 * 0.3).ln()]]);
        assert_abs_diff_eq!(p.rows[0][0], 0.04 / 0.22, epsilon = 1e-12);
        // extreme log values stay finite
        let p = posteriors_from_logliks(&[vec![-1e6, -1e6 - 2.0]]);
        assert_abs_diff_eq!(p.rows[0].iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn stars_thresholds() {
        assert_eq!(stars(0.005), "***");
        assert_eq!(stars(0.01), "**");
        assert_eq!(stars(0.049), "**");
        assert_eq!(stars(0.05), "*");
        assert_eq!(stars(0.099), "*");
        assert_eq!(stars(0.10), "");
    }

    #[test]
    fn alpha_gap() {
        let cov = DMatrix::from_row_slice(2, 2, &[0.164f64.powi(2), 0.0, 0.0, 0.313f64.powi(2)]);
        let g = min_alpha_gap(&[9.90, 26.35], &cov);
        assert!(g > 40.0);
        assert_eq!(min_alpha_gap(&[5.0, 5.0], &cov), 0.0);
    }

    fn one_hot(groups: &[usize], k: usize) -> PosteriorMatrix {
        PosteriorMatrix {
            rows: groups
                .iter()
                .map(|&g| (0..k).map(|j| if j == g { 1.0 } else { 0.0 }).collect())
                .collect(),
        }
    }

    #[test]
    fn hard_assignment_matches_anova() {
        let groups = [0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2, 2];
        let score = [1.0, 2.0, 3.0, 2.5, 3.5, 4.0, 5.0, 6.0, 4.0, 5.5, 7.0, 6.5];
        let w = weighted_profile(&one_hot(&groups, 3), &score, Covariance::Homoskedastic).unwrap();
        let mean = |g: usize| {
            let v: Vec<f64> = groups
                .iter()
                .zip(&score)
                .filter(|(a, _)| **a == g)
                .map(|(_, s)| *s)
                .collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        for g in 0..3 {
            assert_abs_diff_eq!(w.psi_star[g], mean(g), epsilon = 1e-10);
        }
        let grand = score.iter().sum::<f64>() / score.len() as f64;
        let ssb: f64 = groups.iter().map(|&g| (mean(g) - grand).powi(2)).sum();
        let ssw: f64 = groups
            .iter()
            .zip(&score)
            .map(|(&g, s)| (s - mean(g)).powi(2))
            .sum();
        let f = (ssb / 2.0) / (ssw / 9.0);
        assert_abs_diff_eq!(w.statistic, 2.0 * f, epsilon = 1e-10);
        assert_eq!(w.df, 2);
    }

    #[test]
    fn constant_score_gives_zero_statistic() {
        let p = PosteriorMatrix {
            rows: vec![vec![0.7, 0.3], vec![0.2, 0.8], vec![0.5, 0.5], vec![0.9, 0.1]],
        };
        let w = weighted_profile(&p, &[4.0; 4], Covariance::Homoskedastic).unwrap();
        assert_eq!(w.statistic, 0.0);
        assert_eq!(w.p_value, 1.0);
        for v in &w.psi_star {
            assert_abs_diff_eq!(*v, 4.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn soft_assignment_matches_matrix_oracle() {
        let p = PosteriorMatrix {
            rows: vec![
                vec![0.6, 0.3, 0.1],
                vec![0.1, 0.8, 0.1],
                vec![0.2, 0.2, 0.6],
                vec![0.5, 0.4, 0.1],
                vec![0.05, 0.15, 0.8],
                vec![0.3, 0.6, 0.1],
                vec![0.7, 0.1, 0.2],
            ],
        };
        let score = [3.0, 5.0, 8.0, 2.0, 9.0, 4.5, 1.0];
        let w = weighted_profile(&p, &score, Covariance::Homoskedastic).unwrap();
        // B psi with psi from the normal equations, written out by index
        let k = 3;
        let mut ptp = [[0.0; 3]; 3];
        let mut pty = [0.0; 3];
        let mut colsum = [0.0; 3];
        for (r, s) in p.rows.iter().zip(&score) {
            for a in 0..k {
                pty[a] += r[a] * s;
                colsum[a] += r[a];
                for b in 0..k {
                    ptp[a][b] += r[a] * r[b];
                }
            }
        }
        let m = DMatrix::from_fn(3, 3, |i, j| ptp[i][j]);
        let psi = m.clone().try_inverse().unwrap() * DVector::from_row_slice(&pty);
        for a in 0..k {
            let expect: f64 = (0..k).map(|b| ptp[a][b] * psi[b]).sum::<f64>() / colsum[a];
            assert_abs_diff_eq!(w.psi_star[a], expect, epsilon = 1e-10);
        }
        // shift and scale invariance
        let shifted: Vec<f64> = score.iter().map(|s| s + 10.0).collect();
        let ws = weighted_profile(&p, &shifted, Covariance::Homoskedastic).unwrap();
        assert_abs_diff_eq!(ws.statistic, w.statistic, epsilon = 1e-8);
        let scaled: Vec<f64> = score.iter().map(|s| s * 3.0).collect();
        let wc = weighted_profile(&p, &scaled, Covariance::Robust).unwrap();
        let wr = weighted_profile(&p, &score, Covariance::Robust).unwrap();
        assert_abs_diff_eq!(wc.p_value, wr.p_value, epsilon = 1e-10);
        assert_abs_diff_eq!(wc.psi_star[1] - wc.psi_star[0], 3.0 * (wr.psi_star[1] - wr.psi_star[0]), epsilon = 1e-9);
    }

    #[test]
    fn empty_segment_is_dropped() {
        let p = PosteriorMatrix {
            rows: vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]],
        };
        let w = weighted_profile(&p, &[1.0, 2.0, 1.5, 2.5], Covariance::Homoskedastic).unwrap();
        assert_eq!(w.dropped, vec![3]);
        assert!(w.psi_star[2].is_nan());
        assert_eq!(w.df, 1);
    }
}
