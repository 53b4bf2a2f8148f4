//! Maximum-likelihood fitting: start values, BFGS, one Newton step on a
//! numerical Hessian, and delta-method standard errors.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::design::{BlockMap, ColumnScale, CovariateSchema, Design};
use crate::dist::{in_attract_set, MAX_CARDS};
use crate::error::{CmmError, Result};
use crate::inference::bic;
use crate::likelihood::LikelihoodModel;
use crate::optim::{bfgs, numerical_hessian, spd_inverse, BfgsOptions};
use crate::params::{delta_method_cov, ModelParams, ParamLayout};

/// Mixing weights below this are reported as empty segments.
pub const DEGENERATE_PI: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub n_segments: usize,
    pub reltol: f64,
    pub max_iters: usize,
    /// Children in the warm-start subsample; 0 disables the warm start.
    pub warm_start_n: usize,
    pub seed: u64,
    /// Largest absolute gradient entry accepted as converged after the
    /// Newton step.
    pub gradient_tol: f64,
    /// Also controls the Hessian and the Newton step; off, the BFGS iterate
    /// is reported as is.
    pub compute_se: bool,
    /// Candidate starts screened before the final run; each extra candidate
    /// warm-starts from a different subsample.
    pub n_starts: usize,
    /// Explicit unconstrained start vector; bypasses both start rules.
    pub start: Option<Vec<f64>>,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            n_segments: 4,
            reltol: 1e-10,
            max_iters: 2000,
            warm_start_n: 100,
            seed: 1,
            gradient_tol: 1e-4,
            compute_se: true,
            n_starts: 4,
            start: None,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_segments == 0 {
            return Err(CmmError::Config("fit.n_segments must be at least 1".into()));
        }
        if !(self.reltol > 0.0) {
            return Err(CmmError::Config("fit.reltol must be positive".into()));
        }
        if self.max_iters == 0 {
            return Err(CmmError::Config("fit.max_iters must be positive".into()));
        }
        if self.n_starts == 0 {
            return Err(CmmError::Config("fit.n_starts must be at least 1".into()));
        }
        Ok(())
    }
}

/// What happened to the Newton step after BFGS.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolishOutcome {
    Accepted,
    Rejected,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub n_segments: usize,
    pub params: ModelParams,
    /// Unconstrained optimum.
    pub free: Vec<f64>,
    /// Labels of the natural parameter vector.
    pub natural_names: Vec<String>,
    /// Standard errors of the natural parameters, when the Hessian allowed.
    pub se: Option<Vec<f64>>,
    /// Covariance of the natural parameters.
    pub natural_cov: Option<Vec<Vec<f64>>>,
    pub loglik: f64,
    /// Log-likelihood including the game-mechanics constant.
    pub loglik_with_omega: f64,
    pub bic: f64,
    pub n_params: usize,
    pub n_children: usize,
    pub n_trials: usize,
    pub converged: bool,
    pub iterations: usize,
    pub evaluations: usize,
    /// Largest absolute gradient entry at the reported optimum.
    pub gradient_norm: f64,
    pub hessian_condition: Option<f64>,
    pub polish: PolishOutcome,
    pub floored_terms: usize,
    /// 1-based segments with mixing weight below [`DEGENERATE_PI`].
    pub degenerate_segments: Vec<usize>,
    pub warm_started: bool,
    pub diagnostics: Vec<String>,
    pub schema: CovariateSchema,
    pub block_map: BlockMap,
    pub scales: Vec<ColumnScale>,
    pub covariate_names: Vec<String>,
    #[serde(skip)]
    pub hessian: Option<DMatrix<f64>>,
}

impl FitResult {
    /// Rebuild the covariance matrix.
    pub fn natural_cov_matrix(&self) -> Option<DMatrix<f64>> {
        let rows = self.natural_cov.as_ref()?;
        let n = rows.len();
        Some(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
    }

    /// Standard errors of the intercepts.
    pub fn alpha_se(&self) -> Option<Vec<f64>> {
        self.se.as_ref().map(|se| se[..self.n_segments].to_vec())
    }

    /// Standard errors of the mixing weights.
    pub fn pi_se(&self) -> Option<Vec<f64>> {
        self.se
            .as_ref()
            .map(|se| se[se.len() - self.n_segments..].to_vec())
    }

    pub fn beta_se(&self) -> Option<Vec<f64>> {
        let s = self.n_segments;
        self.se
            .as_ref()
            .map(|se| se[s..s + self.params.beta.len()].to_vec())
    }
}

/// Start values from the declared rules: evenly spaced intercepts, inflation
/// weights from excess empirical mass, zero weights, unit dispersion,
/// uniform mixing.
pub fn initialize(data: &Dataset, layout: &ParamLayout) -> Vec<f64> {
    let s = layout.n_segments;
    let mut u = vec![0.0; layout.dim()];
    for k in 0..s {
        u[k] = 32.0 * (k + 1) as f64 / (s + 1) as f64;
    }
    u[layout.log_delta_index()] = 0.0;
    let phi = initial_phi(data);
    for (k, idx) in layout.tau_range().enumerate() {
        u[idx] = (phi[k] / phi[3]).ln();
    }
    u
}

/// Inflation start weights from the uncensored outcome histogram.
pub fn initial_phi(data: &Dataset) -> [f64; 4] {
    const EPS: f64 = 0.01;
    let mut counts = [0.0; MAX_CARDS as usize + 1];
    let mut n = 0.0;
    for t in data.trials.iter().filter(|t| !t.censored) {
        counts[t.y as usize] += 1.0;
        n += 1.0;
    }
    let (zero, attract, last) = if n > 0.0 {
        let p: Vec<f64> = counts.iter().map(|c| c / n).collect();
        let bump = |k: usize| p[k] - 0.5 * (p[k - 1] + p[k + 1]);
        let attract: f64 = (1..MAX_CARDS)
            .filter(|&k| in_attract_set(k))
            .map(|k| bump(k as usize).max(0.0))
            .sum();
        ((p[0] - p[1]).max(0.0), attract, bump(31).max(0.0))
    } else {
        (0.0, 0.0, 0.0)
    };
    let mut phi = [0.0, zero.max(EPS), attract.max(EPS), last.max(EPS)];
    let infl: f64 = phi[1..].iter().sum();
    if infl > 0.5 {
        for v in &mut phi[1..] {
            *v *= 0.5 / infl;
        }
    }
    phi[0] = 1.0 - phi[1..].iter().sum::<f64>();
    phi
}

/// Start vector from a fit on a seeded subsample of children. Falls back to
/// [`initialize`] when the subsample is the whole data or its fit fails.
pub fn warm_start(data: &Dataset, design: &Design, cfg: &FitConfig) -> Result<(Vec<f64>, bool)> {
    let layout = ParamLayout::new(cfg.n_segments, design.block_map().clone())?;
    let n = data.n_children();
    if cfg.warm_start_n == 0 || cfg.warm_start_n >= n {
        return Ok((initialize(data, &layout), false));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut idx = rand::seq::index::sample(&mut rng, n, cfg.warm_start_n).into_vec();
    idx.sort_unstable();
    let sub = data.subset(&idx);
    let sub_design = design.subset(data, &idx);
    let sub_cfg = FitConfig {
        warm_start_n: 0,
        compute_se: false,
        n_starts: 1,
        start: None,
        ..cfg.clone()
    };
    match fit(&sub, &sub_design, &sub_cfg) {
        Ok(r) if r.free.iter().all(|v| v.is_finite()) => Ok((r.free, true)),
        _ => Ok((initialize(data, &layout), false)),
    }
}

/// Relabel segments so intercepts ascend; exact in the unconstrained
/// coordinates.
fn sort_free(u: &mut [f64], layout: &ParamLayout) {
    let s = layout.n_segments;
    let mut perm: Vec<usize> = (0..s).collect();
    perm.sort_by(|&a, &b| u[a].total_cmp(&u[b]).then(a.cmp(&b)));
    if perm.iter().enumerate().all(|(i, p)| i == *p) {
        return;
    }
    let alpha: Vec<f64> = perm.iter().map(|&i| u[i]).collect();
    u[..s].copy_from_slice(&alpha);
    let sr = layout.sigma_range();
    let mut logits: Vec<f64> = u[sr.clone()].to_vec();
    logits.push(0.0);
    let permuted: Vec<f64> = perm.iter().map(|&i| logits[i]).collect();
    let pivot = permuted[s - 1];
    for (k, idx) in sr.enumerate() {
        u[idx] = permuted[k] - pivot;
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

/// Looser tolerance used while screening candidate starts.
const SCREEN_RELTOL: f64 = 1e-6;

/// Run every candidate start to the screening tolerance and return the best
/// iterate. Candidate `k` warm-starts from the subsample drawn with seed
/// `cfg.seed + k`; repeated start vectors are run once.
fn screen_starts(
    data: &Dataset,
    design: &Design,
    cfg: &FitConfig,
    model: &LikelihoodModel,
    diagnostics: &mut Vec<String>,
) -> Result<(Vec<f64>, bool)> {
    let mut starts: Vec<(Vec<f64>, bool)> = Vec::new();
    for k in 0..cfg.n_starts {
        let c = FitConfig {
            seed: cfg.seed.wrapping_add(k as u64),
            ..cfg.clone()
        };
        let cand = warm_start(data, design, &c)?;
        if !starts.iter().any(|s| s.0 == cand.0) {
            starts.push(cand);
        }
    }
    if starts.len() == 1 {
        return Ok(starts.pop().expect("one start"));
    }
    let opts = BfgsOptions {
        reltol: cfg.reltol.max(SCREEN_RELTOL),
        max_iters: cfg.max_iters,
        ..Default::default()
    };
    let mut best: Option<(f64, Vec<f64>, bool)> = None;
    for (k, (u0, warm)) in starts.into_iter().enumerate() {
        let run = match bfgs(|u: &[f64]| model.negloglik_and_gradient(u), &u0, &opts) {
            Ok(r) => r,
            Err(e) => {
                diagnostics.push(format!("start {}: {e}", k + 1));
                continue;
            }
        };
        diagnostics.push(format!("start {}: loglik {:.6}", k + 1, -run.f));
        if best.as_ref().is_none_or(|b| run.f < b.0) {
            best = Some((run.f, run.x, warm));
        }
    }
    match best {
        Some((_, u, warm)) => Ok((u, warm)),
        None => Err(CmmError::Invariant("no candidate start could be evaluated".into())),
    }
}

/// Fit the mixture with `cfg.n_segments` segments.
pub fn fit(data: &Dataset, design: &Design, cfg: &FitConfig) -> Result<FitResult> {
    cfg.validate()?;
    let layout = ParamLayout::new(cfg.n_segments, design.block_map().clone())?;
    let model = LikelihoodModel::new(data, &design.matrix, layout.clone())?;
    let mut diagnostics = Vec::new();
    let (start, warm_started) = match &cfg.start {
        Some(u) => {
            if u.len() != layout.dim() {
                return Err(CmmError::DimensionMismatch(format!(
                    "start vector has {} entries, expected {}",
                    u.len(),
                    layout.dim()
                )));
            }
            (u.clone(), false)
        }
        None => screen_starts(data, design, cfg, &model, &mut diagnostics)?,
    };
    let opts = BfgsOptions {
        reltol: cfg.reltol,
        max_iters: cfg.max_iters,
        ..Default::default()
    };
    let run = bfgs(|u: &[f64]| model.negloglik_and_gradient(u), &start, &opts)?;
    diagnostics.push(format!("bfgs: {}", run.message));
    let mut u = run.x.clone();
    sort_free(&mut u, &layout);

    let mut polish = PolishOutcome::Skipped;
    let mut hessian = None;
    let mut cov_u = None;
    let mut hessian_condition = None;
    if cfg.compute_se {
        match numerical_hessian(|w: &[f64]| model.negloglik(w), &u) {
            Ok(h) => {
                let (f0, g0) = model.negloglik_and_gradient(&u)?;
                let step = h.clone().lu().solve(&DVector::from_column_slice(&g0));
                match step {
                    Some(d) if d.iter().all(|v| v.is_finite()) => {
                        let cand: Vec<f64> = u.iter().zip(d.iter()).map(|(a, b)| a - b).collect();
                        match model.negloglik(&cand) {
                            Ok(f1) if f1 <= f0 => {
                                u = cand;
                                polish = PolishOutcome::Accepted;
                            }
                            _ => polish = PolishOutcome::Rejected,
                        }
                    }
                    _ => {
                        polish = PolishOutcome::Rejected;
                        diagnostics.push("newton step: Hessian not invertible".into());
                    }
                }
                match spd_inverse(&h) {
                    Ok((inv, cond)) => {
                        cov_u = Some(inv);
                        hessian_condition = Some(cond);
                    }
                    Err(e) => diagnostics.push(format!("standard errors omitted: {e}")),
                }
                hessian = Some(h);
            }
            Err(e) => diagnostics.push(format!("hessian: {e}")),
        }
    }
    sort_free(&mut u, &layout);

    let eval = model.evaluate(&u, true)?;
    let gradient = eval.gradient.expect("requested");
    let gradient_norm = max_abs(&gradient);
    let loglik = -eval.negloglik;
    let converged = run.converged && gradient_norm <= cfg.gradient_tol;
    if run.converged && !converged {
        diagnostics.push(format!(
            "gradient max |g| = {gradient_norm:.3e} exceeds tolerance {:.1e}",
            cfg.gradient_tol
        ));
    }
    if eval.floored > 0 {
        diagnostics.push(format!(
            "{} trial factors floored at 1e-300; fit is not trustworthy",
            eval.floored
        ));
    }
    let params = layout.expand(&u)?;
    let (se, natural_cov) = match (&cov_u, cfg.compute_se) {
        (Some(c), true) => {
            let j = layout.jacobian(&u)?;
            let cov = delta_method_cov(&j, c)?;
            let se: Vec<f64> = (0..cov.nrows()).map(|i| cov[(i, i)].max(0.0).sqrt()).collect();
            (Some(se), Some(to_rows(&cov)))
        }
        _ => (None, None),
    };
    let degenerate_segments: Vec<usize> = params
        .pi
        .iter()
        .enumerate()
        .filter(|(_, p)| **p < DEGENERATE_PI)
        .map(|(i, _)| i + 1)
        .collect();
    if !degenerate_segments.is_empty() {
        diagnostics.push(format!("empty segments: {degenerate_segments:?}"));
    }
    let covariate_names = design.column_names();
    let n_params = layout.dim();
    Ok(FitResult {
        n_segments: cfg.n_segments,
        natural_names: layout.natural_names(&covariate_names),
        params,
        free: u,
        se,
        natural_cov,
        loglik,
        loglik_with_omega: loglik + model.omega_constant(),
        bic: bic(loglik, n_params, data.n_children())?,
        n_params,
        n_children: data.n_children(),
        n_trials: data.n_trials(),
        converged,
        iterations: run.iterations,
        evaluations: run.evaluations,
        gradient_norm,
        hessian_condition,
        polish,
        floored_terms: eval.floored,
        degenerate_segments,
        warm_started,
        diagnostics,
        schema: design.schema.clone(),
        block_map: design.block_map().clone(),
        scales: design.scales().to_vec(),
        covariate_names,
        hessian: if cfg.compute_se { hessian } else { None },
    })
}
