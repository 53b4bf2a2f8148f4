//! Built-in covariate schemas, covariate generators and true parameters
//! for a four-segment cohort and a small three-segment design.

use crate::design::{BlockMap, CategoricalSpec, CovariateSchema};
use crate::dist::InflationWeights;
use crate::params::ModelParams;
use crate::sim::{ColumnGenerator, SimConfig};

/// Dispersion used for simulation truth, calibrated to a censoring rate near 0.68.
pub const COHORT_DELTA: f64 = 30.0;

/// Inflation weights used for simulation truth.
pub const COHORT_PHI: [f64; 4] = [0.90, 0.02, 0.05, 0.03];

fn cat(name: &str, levels: &[&str]) -> CategoricalSpec {
    CategoricalSpec {
        name: name.into(),
        levels: levels.iter().map(|s| s.to_string()).collect(),
    }
}

fn game_blocks() -> Vec<CategoricalSpec> {
    vec![
        cat("gain_amount", &["10", "30"]),
        cat("loss_amount", &["250", "750"]),
        cat("n_loss_cards", &["1", "3"]),
        cat("prev_loss", &["0", "1"]),
        cat("prev2_loss", &["0", "1"]),
    ]
}

/// Background variables, game settings, previous-loss indicators and the
/// game-setting by sex interactions.
pub fn cohort_schema() -> CovariateSchema {
    let mut categorical = vec![
        cat("sex", &["boy", "girl"]),
        cat(
            "ethnicity",
            &[
                "dutch",
                "asian",
                "african",
                "moroccan",
                "dutch_antilles",
                "surinamese",
                "turkish",
                "other_western",
            ],
        ),
        cat("education", &["low", "mid", "high"]),
        cat("income", &["low", "mid", "high"]),
    ];
    categorical.extend(game_blocks());
    CovariateSchema {
        numeric: vec!["age".into(), "iq".into()],
        categorical,
        interactions: vec![
            ["gain_amount".into(), "sex".into()],
            ["loss_amount".into(), "sex".into()],
            ["n_loss_cards".into(), "sex".into()],
        ],
    }
}

/// Game settings and previous-loss indicators only.
pub fn game_schema() -> CovariateSchema {
    CovariateSchema {
        numeric: vec![],
        categorical: game_blocks(),
        interactions: vec![],
    }
}

/// Covariate marginals of the cohort. The ethnic groups without a
/// reported share split the remainder.
pub fn cohort_generators() -> Vec<ColumnGenerator> {
    let categorical = |name: &str, levels: &[&str], weights: &[f64]| ColumnGenerator::Categorical {
        name: name.into(),
        levels: levels.iter().map(|s| s.to_string()).collect(),
        weights: weights.to_vec(),
    };
    vec![
        ColumnGenerator::Normal {
            name: "age".into(),
            mean: 9.8,
            sd: 0.26,
            decimals: 2,
        },
        ColumnGenerator::Normal {
            name: "iq".into(),
            mean: 102.0,
            sd: 14.7,
            decimals: 1,
        },
        categorical("sex", &["boy", "girl"], &[0.5, 0.5]),
        categorical(
            "ethnicity",
            &[
                "dutch",
                "asian",
                "african",
                "moroccan",
                "dutch_antilles",
                "surinamese",
                "turkish",
                "other_western",
            ],
            &[59.8, 5.7, 4.7, 4.7, 2.1, 7.1, 5.8, 10.1],
        ),
        categorical("education", &["low", "mid", "high"], &[6.7, 42.2, 51.2]),
        categorical("income", &["low", "mid", "high"], &[20.5, 43.8, 35.7]),
    ]
}

/// Full-coordinate weights for [`cohort_schema`], in block-map order.
pub fn cohort_beta() -> Vec<f64> {
    let mut b = vec![
        -0.012, -0.539, // age, iq
        -0.286, 0.286, // boy, girl
        -1.170, -0.875, 0.570, 0.477, -0.139, 0.288, 0.527, 0.322, // ethnicity
        0.571, -0.231, -0.340, // education
        -0.134, -0.231, 0.365, // income
        0.343, -0.343, // gain 10, 30
        0.195, -0.195, // loss 250, 750
        0.850, -0.850, // 1 or 3 loss cards
        0.823, -0.823, // previous loss no, yes
        0.502, -0.502, // second previous loss no, yes
    ];
    // (gain, sex), (loss, sex), (cards, sex) cells, first factor major
    b.extend([-0.170, 0.170, 0.170, -0.170]);
    b.extend([0.154, -0.154, -0.154, 0.154]);
    b.extend([0.169, -0.169, -0.169, 0.169]);
    debug_assert_eq!(
        b.len(),
        BlockMap::from_schema(&cohort_schema()).unwrap().n_columns
    );
    b
}

/// Four-segment truth.
pub fn cohort_truth() -> ModelParams {
    ModelParams {
        alpha: vec![5.85, 11.04, 18.68, 37.52],
        beta: cohort_beta(),
        delta: COHORT_DELTA,
        phi: InflationWeights(COHORT_PHI),
        pi: vec![0.097, 0.275, 0.357, 0.271],
    }
}

/// Reference standard errors of the four cohort intercepts.
pub const COHORT_ALPHA_SE: [f64; 4] = [0.152, 0.188, 0.295, 0.772];

pub fn cohort_sim_config(n_children: usize, seed: u64) -> SimConfig {
    SimConfig {
        n_children,
        n_trials: 16,
        seed,
        schema: cohort_schema(),
        covariates: cohort_generators(),
        truth: cohort_truth(),
    }
}

/// Three well-separated segments over the game-setting schema.
pub fn three_segment_sim_config(n_children: usize, seed: u64) -> SimConfig {
    let schema = game_schema();
    SimConfig {
        n_children,
        n_trials: 16,
        seed,
        covariates: vec![ColumnGenerator::Categorical {
            name: "sex".into(),
            levels: vec!["boy".into(), "girl".into()],
            weights: vec![0.5, 0.5],
        }],
        truth: ModelParams {
            alpha: vec![5.0, 14.0, 24.0],
            beta: vec![0.343, -0.343, 0.195, -0.195, 0.850, -0.850, 0.823, -0.823, 0.502, -0.502],
            delta: COHORT_DELTA,
            phi: InflationWeights(COHORT_PHI),
            pi: vec![0.3, 0.4, 0.3],
        },
        schema,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_consistent() {
        cohort_sim_config(10, 1).validate().unwrap();
        three_segment_sim_config(10, 1).validate().unwrap();
        let bm = BlockMap::from_schema(&cohort_schema()).unwrap();
        let beta = cohort_beta();
        for b in &bm.blocks {
            let s: f64 = beta[b.offset..b.offset + b.len].iter().sum();
            assert!(s.abs() < 1e-12, "{}", b.name);
        }
        // interaction tables are double-centered
        let mut a = vec![0.0; 4];
        let mut centered = beta.clone();
        bm.center_blocks(&mut a, &mut centered);
        for (x, y) in beta.iter().zip(&centered) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
