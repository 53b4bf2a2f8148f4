//! Synthetic children and card-game rounds drawn from a known model.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ChildRecord, ChildTable, Dataset, TrialRecord};
use crate::design::{ColumnScale, CovariateSchema, RowEncoder};
use crate::dist::{softplus, InflatedNB, NegBinParams};
use crate::error::{CmmError, Result};
use crate::game::{round_score, simulate_trial, GameSetting};
use crate::params::ModelParams;

/// How one child-level covariate column is drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ColumnGenerator {
    Normal {
        name: String,
        mean: f64,
        sd: f64,
        /// Decimal places kept in the written value.
        #[serde(default = "default_decimals")]
        decimals: u32,
    },
    Categorical {
        name: String,
        levels: Vec<String>,
        weights: Vec<f64>,
    },
}

fn default_decimals() -> u32 {
    3
}

impl ColumnGenerator {
    pub fn name(&self) -> &str {
        match self {
            ColumnGenerator::Normal { name, .. } | ColumnGenerator::Categorical { name, .. } => {
                name
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            ColumnGenerator::Normal { name, mean, sd, .. } => {
                if !(mean.is_finite() && sd.is_finite() && *sd > 0.0) {
                    return Err(CmmError::Config(format!(
                        "generator '{name}': needs finite mean and positive sd"
                    )));
                }
            }
            ColumnGenerator::Categorical {
                name,
                levels,
                weights,
            } => {
                if levels.is_empty()
                    || levels.len() != weights.len()
                    || weights.iter().any(|w| !(*w >= 0.0))
                    || weights.iter().sum::<f64>() <= 0.0
                {
                    return Err(CmmError::Config(format!(
                        "generator '{name}': levels and non-negative weights must align"
                    )));
                }
            }
        }
        Ok(())
    }

    fn draw<R: Rng>(&self, rng: &mut R) -> String {
        match self {
            ColumnGenerator::Normal {
                mean, sd, decimals, ..
            } => {
                let v = Normal::new(*mean, *sd).expect("validated").sample(rng);
                format!("{:.*}", *decimals as usize, v)
            }
            ColumnGenerator::Categorical {
                levels, weights, ..
            } => levels[pick(weights, rng)].clone(),
        }
    }

    /// Population z-score statistics for numeric columns.
    fn scale(&self) -> Option<ColumnScale> {
        match self {
            ColumnGenerator::Normal { name, mean, sd, .. } => Some(ColumnScale {
                name: name.clone(),
                mean: *mean,
                sd: *sd,
            }),
            ColumnGenerator::Categorical { .. } => None,
        }
    }
}

fn pick<R: Rng>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_children: usize,
    pub n_trials: u32,
    pub seed: u64,
    pub schema: CovariateSchema,
    pub covariates: Vec<ColumnGenerator>,
    /// True parameters, with `beta` in full (all-levels) coordinates of
    /// `schema` and numeric covariates on the population z-score scale.
    pub truth: ModelParams,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_children == 0 || self.n_trials == 0 {
            return Err(CmmError::Config("n_children and n_trials must be positive".into()));
        }
        self.schema.validate()?;
        for g in &self.covariates {
            g.validate()?;
        }
        let bm = crate::design::BlockMap::from_schema(&self.schema)?;
        self.truth
            .validate(bm.n_columns)
            .map_err(|e| CmmError::Config(format!("truth: {e}")))?;
        for n in &self.schema.numeric {
            match self.covariates.iter().find(|g| g.name() == n) {
                Some(ColumnGenerator::Normal { .. }) => {}
                _ => {
                    return Err(CmmError::Config(format!(
                        "schema.numeric '{n}' has no normal generator"
                    )))
                }
            }
        }
        Ok(())
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream for child `index` under master `seed`.
pub fn child_rng(seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(index)))
}

/// Game settings for `n` rounds: every block of eight rounds plays each
/// setting once, in shuffled order.
fn schedule<R: Rng>(n: u32, rng: &mut R) -> Vec<GameSetting> {
    let mut out = Vec::with_capacity(n as usize);
    while out.len() < n as usize {
        let mut block = GameSetting::all();
        block.shuffle(rng);
        out.extend(block);
    }
    out.truncate(n as usize);
    out
}

/// Draw a dataset. Deterministic for a given config, independent of the
/// number of worker threads.
pub fn generate_dataset(cfg: &SimConfig) -> Result<Dataset> {
    cfg.validate()?;
    let columns: Vec<String> = cfg.covariates.iter().map(|g| g.name().to_string()).collect();
    let scales: Vec<ColumnScale> = cfg
        .schema
        .numeric
        .iter()
        .map(|n| {
            cfg.covariates
                .iter()
                .find(|g| g.name() == n)
                .and_then(|g| g.scale())
                .expect("validated")
        })
        .collect();
    let encoder = RowEncoder::new(&cfg.schema, &columns, scales)?;
    let width = cfg.n_children.to_string().len();
    let truth = &cfg.truth;
    let per_child: Vec<(ChildRecord, Vec<TrialRecord>)> = (0..cfg.n_children)
        .into_par_iter()
        .map(|i| -> Result<_> {
            let mut rng = child_rng(cfg.seed, i as u64);
            let segment = pick(&truth.pi, &mut rng);
            let child = ChildRecord {
                child_id: format!("C{:0width$}", i + 1),
                segment_true: Some(segment + 1),
                values: cfg.covariates.iter().map(|g| g.draw(&mut rng)).collect(),
            };
            let settings = schedule(cfg.n_trials, &mut rng);
            let mut trials: Vec<TrialRecord> = Vec::with_capacity(settings.len());
            for (t, setting) in settings.into_iter().enumerate() {
                let lost = |back: usize| t >= back && trials[t - back].censored;
                let mut rec = TrialRecord {
                    child_id: child.child_id.clone(),
                    trial_index: t as u32 + 1,
                    setting,
                    prev_loss: lost(1),
                    prev2_loss: lost(2),
                    y: 0,
                    censored: false,
                    score: 0,
                    z_true: None,
                };
                let x = encoder.encode(&child, &rec)?;
                let eta = truth.alpha[segment]
                    + x.iter().zip(&truth.beta).map(|(a, b)| a * b).sum::<f64>();
                let d = InflatedNB::new(NegBinParams::new(softplus(eta), truth.delta)?, truth.phi)?;
                let z = d.sample(&mut rng);
                let outcome = simulate_trial(z, setting, &mut rng);
                rec.y = outcome.y;
                rec.censored = outcome.censored;
                rec.score = round_score(outcome.y, outcome.censored, setting);
                rec.z_true = Some(z);
                trials.push(rec);
            }
            Ok((child, trials))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(per_child.len());
    let mut trials = Vec::with_capacity(per_child.len() * cfg.n_trials as usize);
    for (c, t) in per_child {
        rows.push(c);
        trials.extend(t);
    }
    Dataset::new(ChildTable { columns, rows }, trials)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets;

    fn small(n: usize, seed: u64) -> SimConfig {
        let mut cfg = presets::cohort_sim_config(n, seed);
        cfg.n_trials = 16;
        cfg
    }

    #[test]
    fn deterministic_and_shaped() {
        let a = generate_dataset(&small(40, 3)).unwrap();
        let b = generate_dataset(&small(40, 3)).unwrap();
        assert_eq!(a.trials, b.trials);
        assert_eq!(a.children, b.children);
        assert_eq!(a.n_children(), 40);
        assert_eq!(a.n_trials(), 640);
        let c = generate_dataset(&small(40, 4)).unwrap();
        assert_ne!(a.trials, c.trials);
        for i in 0..a.n_children() {
            let ts = a.child_trials(i);
            assert!(!ts[0].prev_loss && !ts[0].prev2_loss && !ts[1].prev2_loss);
            for t in 1..ts.len() {
                assert_eq!(ts[t].prev_loss, ts[t - 1].censored);
            }
            // two full blocks of the eight settings
            let mut seen: Vec<_> = ts[..8].iter().map(|t| t.setting.to_string()).collect();
            seen.sort();
            seen.dedup();
            assert_eq!(seen.len(), 8);
        }
    }

    #[test]
    fn degenerate_mixing_puts_everyone_in_segment_one() {
        let mut cfg = small(30, 1);
        cfg.truth.pi = vec![1.0, 0.0, 0.0, 0.0];
        let d = generate_dataset(&cfg).unwrap();
        assert!(d.children.rows.iter().all(|r| r.segment_true == Some(1)));
    }

    #[test]
    fn more_cards_with_one_loss_card() {
        let d = generate_dataset(&small(300, 9)).unwrap();
        let mean = |n: u32| {
            let v: Vec<f64> = d
                .trials
                .iter()
                .filter(|t| t.setting.n_loss_cards() == n)
                .map(|t| t.z_true.unwrap() as f64)
                .collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        assert!(mean(1) > mean(3));
    }

    #[test]
    fn invalid_truth_is_a_config_error() {
        let mut cfg = small(5, 1);
        cfg.truth.beta.pop();
        assert!(matches!(generate_dataset(&cfg), Err(CmmError::Config(_))));
        let mut cfg = small(5, 1);
        cfg.schema.numeric.push("height".into());
        assert!(generate_dataset(&cfg).is_err());
    }
}
