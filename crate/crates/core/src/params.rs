//! Natural and unconstrained parameterizations of the mixture model.
//!
//! The unconstrained vector is laid out as
//! `[alpha_u (S) | beta_free (q) | log_delta | tau (3) | sigma (S - 1)]`
//! and the natural vector as
//! `[alpha (S) | beta (p) | delta | phi (4) | pi (S)]`.
//! `phi` and `pi` use a softmax with the last component as pivot.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::design::{sum_zero_expand, BlockMap};
use crate::dist::InflationWeights;
use crate::error::{CmmError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub delta: f64,
    pub phi: InflationWeights,
    pub pi: Vec<f64>,
}

impl ModelParams {
    pub fn n_segments(&self) -> usize {
        self.alpha.len()
    }

    pub fn validate(&self, n_columns: usize) -> Result<()> {
        let s = self.alpha.len();
        if s == 0 || self.pi.len() != s {
            return Err(CmmError::DimensionMismatch(format!(
                "{} intercepts but {} mixing weights",
                s,
                self.pi.len()
            )));
        }
        if self.beta.len() != n_columns {
            return Err(CmmError::DimensionMismatch(format!(
                "beta has {} entries, design has {n_columns} columns",
                self.beta.len()
            )));
        }
        if !(self.delta.is_finite() && self.delta > 0.0) {
            return Err(CmmError::InvalidParameter(format!("delta = {}", self.delta)));
        }
        self.phi.validate()?;
        let total: f64 = self.pi.iter().sum();
        if self.pi.iter().any(|p| !(*p >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(CmmError::InvalidParameter(format!("pi = {:?}", self.pi)));
        }
        if self.alpha.iter().chain(&self.beta).any(|v| !v.is_finite()) {
            return Err(CmmError::InvalidParameter("non-finite alpha or beta".into()));
        }
        Ok(())
    }

    /// Flatten in natural-vector order.
    pub fn to_natural_vec(&self) -> Vec<f64> {
        let mut v = self.alpha.clone();
        v.extend(&self.beta);
        v.push(self.delta);
        v.extend(self.phi.0);
        v.extend(&self.pi);
        v
    }

    /// Reorder segments by ascending intercept. Returns the permutation
    /// (`new[i] = old[perm[i]]`).
    pub fn sort_segments(&mut self) -> Vec<usize> {
        let mut perm: Vec<usize> = (0..self.alpha.len()).collect();
        perm.sort_by(|&a, &b| self.alpha[a].total_cmp(&self.alpha[b]).then(a.cmp(&b)));
        self.alpha = perm.iter().map(|&i| self.alpha[i]).collect();
        self.pi = perm.iter().map(|&i| self.pi[i]).collect();
        perm
    }
}

/// Softmax with an implicit trailing zero logit.
pub fn softmax_pivot(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(0.0_f64, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|t| (t - m).exp()).collect();
    out.push((-m).exp());
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= total);
    out
}

fn log_ratio_to_pivot(probs: &[f64], what: &str) -> Result<Vec<f64>> {
    let last = *probs.last().expect("non-empty");
    if probs.iter().any(|p| !(*p > 0.0)) {
        return Err(CmmError::InvalidParameter(format!(
            "{what} must be strictly positive to map to logits: {probs:?}"
        )));
    }
    Ok(probs[..probs.len() - 1]
        .iter()
        .map(|p| (p / last).ln())
        .collect())
}

/// Sizes and maps between the two parameterizations.
#[derive(Debug, Clone)]
pub struct ParamLayout {
    pub n_segments: usize,
    pub block_map: BlockMap,
    n_free_beta: usize,
}

impl ParamLayout {
    pub fn new(n_segments: usize, block_map: BlockMap) -> Result<Self> {
        if n_segments == 0 {
            return Err(CmmError::InvalidParameter("need at least one segment".into()));
        }
        let n_free_beta = block_map.n_free();
        Ok(ParamLayout {
            n_segments,
            block_map,
            n_free_beta,
        })
    }

    pub fn n_gamma(&self) -> usize {
        self.n_segments + self.n_free_beta
    }

    pub fn log_delta_index(&self) -> usize {
        self.n_gamma()
    }

    pub fn tau_range(&self) -> std::ops::Range<usize> {
        self.n_gamma() + 1..self.n_gamma() + 4
    }

    pub fn sigma_range(&self) -> std::ops::Range<usize> {
        let start = self.n_gamma() + 4;
        start..start + self.n_segments - 1
    }

    /// Length of the unconstrained vector; also the number of estimated
    /// parameters.
    pub fn dim(&self) -> usize {
        self.n_gamma() + 4 + self.n_segments - 1
    }

    /// Length of the natural vector.
    pub fn natural_dim(&self) -> usize {
        2 * self.n_segments + self.block_map.n_columns + 5
    }

    fn check(&self, u: &[f64]) -> Result<()> {
        if u.len() != self.dim() {
            return Err(CmmError::DimensionMismatch(format!(
                "unconstrained vector has {} entries, expected {}",
                u.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    pub fn expand(&self, u: &[f64]) -> Result<ModelParams> {
        self.check(u)?;
        let (alpha, beta) = sum_zero_expand(&u[..self.n_gamma()], &self.block_map, self.n_segments)?;
        let phi = softmax_pivot(&u[self.tau_range()]);
        Ok(ModelParams {
            alpha,
            beta,
            delta: u[self.log_delta_index()].exp(),
            phi: InflationWeights([phi[0], phi[1], phi[2], phi[3]]),
            pi: softmax_pivot(&u[self.sigma_range()]),
        })
    }

    /// Inverse of [`expand`](Self::expand) for centered parameters with
    /// strictly positive weights.
    pub fn collapse(&self, p: &ModelParams) -> Result<Vec<f64>> {
        p.validate(self.block_map.n_columns)?;
        if p.n_segments() != self.n_segments {
            return Err(CmmError::DimensionMismatch(format!(
                "{} segments, layout has {}",
                p.n_segments(),
                self.n_segments
            )));
        }
        let a = self.block_map.expansion_matrix(self.n_segments);
        let target = DVector::from_iterator(
            self.n_segments + self.block_map.n_columns,
            p.alpha.iter().chain(&p.beta).copied(),
        );
        let ata = a.transpose() * &a;
        let gamma = ata
            .cholesky()
            .ok_or_else(|| CmmError::Singular("expansion map".into()))?
            .solve(&(a.transpose() * target));
        let mut u: Vec<f64> = gamma.iter().copied().collect();
        u.push(p.delta.ln());
        u.extend(log_ratio_to_pivot(&p.phi.0, "phi")?);
        u.extend(log_ratio_to_pivot(&p.pi, "pi")?);
        Ok(u)
    }

    /// Jacobian of the natural vector with respect to `u`.
    pub fn jacobian(&self, u: &[f64]) -> Result<DMatrix<f64>> {
        let p = self.expand(u)?;
        let (s, ng) = (self.n_segments, self.n_gamma());
        let nc = self.block_map.n_columns;
        let mut j = DMatrix::zeros(self.natural_dim(), self.dim());
        let a = self.block_map.expansion_matrix(s);
        j.view_mut((0, 0), (s + nc, ng)).copy_from(&a);
        let row_delta = s + nc;
        j[(row_delta, self.log_delta_index())] = p.delta;
        let phi = p.phi.0;
        for m in 0..4 {
            for (k, col) in self.tau_range().enumerate() {
                let ind = if m == k { 1.0 } else { 0.0 };
                j[(row_delta + 1 + m, col)] = phi[m] * (ind - phi[k]);
            }
        }
        let row_pi = row_delta + 5;
        for m in 0..s {
            for (k, col) in self.sigma_range().enumerate() {
                let ind = if m == k { 1.0 } else { 0.0 };
                j[(row_pi + m, col)] = p.pi[m] * (ind - p.pi[k]);
            }
        }
        Ok(j)
    }

    /// Labels of the natural vector.
    pub fn natural_names(&self, beta_names: &[String]) -> Vec<String> {
        let s = self.n_segments;
        let mut out: Vec<String> = (1..=s).map(|i| format!("alpha[{i}]")).collect();
        out.extend(beta_names.iter().map(|n| format!("beta[{n}]")));
        out.push("delta".into());
        out.extend(["phi_base", "phi_zero", "phi_attract", "phi_31"].map(String::from));
        out.extend((1..=s).map(|i| format!("pi[{i}]")));
        out
    }
}

/// Covariance of a smooth transform: `J * cov * J'`.
pub fn delta_method_cov(jac: &DMatrix<f64>, cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if cov.nrows() != cov.ncols() || jac.ncols() != cov.nrows() {
        return Err(CmmError::DimensionMismatch(format!(
            "jacobian {}x{} vs covariance {}x{}",
            jac.nrows(),
            jac.ncols(),
            cov.nrows(),
            cov.ncols()
        )));
    }
    Ok(jac * cov * jac.transpose())
}
