//! Run configuration read from TOML, with command-line overrides applied by
//! the CLI.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::design::CovariateSchema;
use crate::error::{CmmError, Result};
use crate::estimate::FitConfig;
use crate::inference::{Covariance, SelectionCriteria};
use crate::params::ModelParams;
use crate::presets;
use crate::sim::{ColumnGenerator, SimConfig};

pub const DEFAULT_SEED: u64 = 1;

/// A named preset or an explicit covariate schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SchemaSpec {
    Preset(String),
    Explicit(CovariateSchema),
}

impl Default for SchemaSpec {
    fn default() -> Self {
        SchemaSpec::Preset("cohort".into())
    }
}

impl SchemaSpec {
    pub fn resolve(&self) -> Result<CovariateSchema> {
        let schema = match self {
            SchemaSpec::Preset(p) => match p.as_str() {
                "cohort" => presets::cohort_schema(),
                "game" => presets::game_schema(),
                other => {
                    return Err(CmmError::Config(format!(
                        "schema: unknown preset '{other}' (expected 'cohort' or 'game')"
                    )))
                }
            },
            SchemaSpec::Explicit(s) => s.clone(),
        };
        schema
            .validate()
            .map_err(|e| CmmError::Config(format!("schema: {e}")))?;
        Ok(schema)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    pub children: Option<PathBuf>,
    pub trials: Option<PathBuf>,
    /// Fitted model consumed by posteriors, profile and predict.
    pub fit: Option<PathBuf>,
    /// Prediction table consumed by evaluate.
    pub predictions: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    /// `cohort` or `three_segment`.
    pub preset: String,
    pub n_children: Option<usize>,
    pub n_trials: Option<u32>,
    pub covariates: Option<Vec<ColumnGenerator>>,
    pub truth: Option<ModelParams>,
}

impl Default for SimulateSection {
    fn default() -> Self {
        SimulateSection {
            preset: "cohort".into(),
            n_children: None,
            n_trials: None,
            covariates: None,
            truth: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectSection {
    /// `"a..b"` or a single count.
    pub segments: Option<String>,
    pub min_share: f64,
    pub min_alpha_gap_se: f64,
    pub require_bic_improvement: bool,
}

impl Default for SelectSection {
    fn default() -> Self {
        let c = SelectionCriteria::default();
        SelectSection {
            segments: None,
            min_share: c.min_share,
            min_alpha_gap_se: c.min_alpha_gap_se,
            require_bic_improvement: c.require_bic_improvement,
        }
    }
}

impl SelectSection {
    pub fn criteria(&self) -> SelectionCriteria {
        SelectionCriteria {
            min_share: self.min_share,
            min_alpha_gap_se: self.min_alpha_gap_se,
            require_bic_improvement: self.require_bic_improvement,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfileSection {
    /// CSV with `child_id` and score columns; the children table if absent.
    pub scores: Option<PathBuf>,
    /// Columns to profile; every non-id column if empty.
    pub columns: Vec<String>,
    pub covariance: Covariance,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictSection {
    /// Untruncated expected value with the tail folded at 100.
    pub literal: bool,
    /// Add a `y_hat_posterior` column weighting segments by each child's
    /// posterior (not part of the model's prediction rule).
    pub posterior_weighted: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    /// When set, refit on the remaining children and report held-out error.
    pub holdout_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    /// Also write the numerical Hessian of a fit as CSV.
    pub hessian: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    /// Worker threads; excluded from the config hash.
    pub threads: Option<usize>,
    /// Output directory; excluded from the config hash.
    pub out: Option<PathBuf>,
    pub schema: SchemaSpec,
    pub data: DataPaths,
    pub simulate: SimulateSection,
    pub fit: FitConfig,
    pub select: SelectSection,
    pub profile: ProfileSection,
    pub predict: PredictSection,
    pub evaluate: EvaluateSection,
    pub output: OutputSection,
}

fn rebase(p: &mut Option<PathBuf>, base: &Path) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CmmError::Config(e.to_string()))
    }

    /// Parse a file; relative paths inside it are taken relative to the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CmmError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)
            .map_err(|e| CmmError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        rebase(&mut cfg.out, base);
        rebase(&mut cfg.data.children, base);
        rebase(&mut cfg.data.trials, base);
        rebase(&mut cfg.data.fit, base);
        rebase(&mut cfg.data.predictions, base);
        rebase(&mut cfg.profile.scores, base);
        Ok(cfg)
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(DEFAULT_SEED)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("."))
    }

    pub fn children_path(&self) -> PathBuf {
        self.data.children.clone().unwrap_or_else(|| self.out_dir().join("children.csv"))
    }

    pub fn trials_path(&self) -> PathBuf {
        self.data.trials.clone().unwrap_or_else(|| self.out_dir().join("trials.csv"))
    }

    pub fn fit_path(&self) -> PathBuf {
        self.data.fit.clone().unwrap_or_else(|| self.out_dir().join("fit.json"))
    }

    pub fn predictions_path(&self) -> PathBuf {
        self.data
            .predictions
            .clone()
            .unwrap_or_else(|| self.out_dir().join("predictions.csv"))
    }

    /// Fit settings with the run seed applied.
    pub fn fit_config(&self) -> Result<FitConfig> {
        let mut f = self.fit.clone();
        f.seed = self.seed();
        f.validate()?;
        Ok(f)
    }

    pub fn sim_config(&self) -> Result<SimConfig> {
        let s = &self.simulate;
        let mut cfg = match s.preset.as_str() {
            "cohort" => presets::cohort_sim_config(3404, self.seed()),
            "three_segment" => presets::three_segment_sim_config(1000, self.seed()),
            other => {
                return Err(CmmError::Config(format!(
                    "simulate.preset: unknown preset '{other}' (expected 'cohort' or 'three_segment')"
                )))
            }
        };
        if let SchemaSpec::Explicit(_) = self.schema {
            cfg.schema = self.schema.resolve()?;
        }
        if let Some(n) = s.n_children {
            cfg.n_children = n;
        }
        if let Some(t) = s.n_trials {
            cfg.n_trials = t;
        }
        if let Some(c) = &s.covariates {
            cfg.covariates = c.clone();
        }
        if let Some(t) = &s.truth {
            cfg.truth = t.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Hex SHA-256 of the settings that determine results; thread count and
    /// output location do not enter.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.threads = None;
        c.out = None;
        c.seed = Some(self.seed());
        let text = serde_json::to_string(&c).expect("config serializes");
        hex(&Sha256::digest(text.as_bytes()))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Segment counts from `"n"` or `"a..b"` (inclusive).
pub fn parse_segments(text: &str) -> Result<Vec<usize>> {
    let bad = || CmmError::Config(format!("segments: expected 'n' or 'a..b', got '{text}'"));
    let t = text.trim();
    let (a, b) = match t.split_once("..") {
        Some((a, b)) => (a.trim(), b.trim().trim_start_matches('=')),
        None => (t, t),
    };
    let a: usize = a.parse().map_err(|_| bad())?;
    let b: usize = b.parse().map_err(|_| bad())?;
    if a == 0 || b < a {
        return Err(bad());
    }
    Ok((a..=b).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_defaults() {
        let cfg = RunConfig::from_toml_str(
            r#"
seed = 7
schema = "game"
[fit]
n_segments = 3
n_starts = 2
[select]
segments = "2..4"
min_share = 0.1
[simulate]
preset = "three_segment"
n_children = 50
"#,
        )
        .unwrap();
        assert_eq!(cfg.seed(), 7);
        assert_eq!(cfg.fit_config().unwrap().seed, 7);
        assert_eq!(cfg.fit.n_segments, 3);
        assert_eq!(cfg.select.criteria().min_share, 0.1);
        assert!(cfg.select.criteria().require_bic_improvement);
        assert_eq!(cfg.schema.resolve().unwrap(), presets::game_schema());
        let sim = cfg.sim_config().unwrap();
        assert_eq!((sim.n_children, sim.seed), (50, 7));
        assert_eq!(RunConfig::default().seed(), DEFAULT_SEED);
    }

    #[test]
    fn rejects_unknown_fields_and_presets() {
        assert!(matches!(
            RunConfig::from_toml_str("[fit]\nsegments = 3\n"),
            Err(CmmError::Config(_))
        ));
        let cfg = RunConfig::from_toml_str("schema = \"nope\"\n").unwrap();
        assert!(matches!(cfg.schema.resolve(), Err(CmmError::Config(_))));
        let cfg = RunConfig::from_toml_str("[fit]\nreltol = -1.0\n").unwrap();
        assert!(cfg.fit_config().is_err());
    }

    #[test]
    fn explicit_schema() {
        let cfg = RunConfig::from_toml_str(
            r#"
[schema]
numeric = ["age"]
categorical = [{ name = "sex", levels = ["boy", "girl"] }]
"#,
        )
        .unwrap();
        let s = cfg.schema.resolve().unwrap();
        assert_eq!(s.numeric, vec!["age".to_string()]);
        assert_eq!(s.categorical[0].levels.len(), 2);
    }

    #[test]
    fn hash_ignores_threads_and_out() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.threads = Some(8);
        b.out = Some("elsewhere".into());
        assert_eq!(a.hash(), b.hash());
        b.seed = Some(2);
        assert_ne!(a.hash(), b.hash());
        // an explicit default seed is the same run
        let mut c = a.clone();
        c.seed = Some(DEFAULT_SEED);
        assert_eq!(a.hash(), c.hash());
    }

    #[test]
    fn segment_ranges() {
        assert_eq!(parse_segments("3").unwrap(), vec![3]);
        assert_eq!(parse_segments("2..4").unwrap(), vec![2, 3, 4]);
        assert_eq!(parse_segments("2..=3").unwrap(), vec![2, 3]);
        for bad in ["0", "4..2", "x", "1..y"] {
            assert!(parse_segments(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn relative_paths_follow_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "out = \"res\"\n[data]\nchildren = \"c.csv\"\n").unwrap();
        let cfg = RunConfig::load(&p).unwrap();
        assert_eq!(cfg.children_path(), dir.path().join("c.csv"));
        assert_eq!(cfg.trials_path(), dir.path().join("res").join("trials.csv"));
    }
}
