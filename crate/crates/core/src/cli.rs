//! The `cmm` command line: simulate, fit, select, posteriors, profile,
//! predict and evaluate, each writing CSV/JSON artifacts plus a run manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{hex, parse_segments, RunConfig};
use crate::data::{ChildTable, Dataset, TrialRecord};
use crate::design::{build_design, build_design_with_scales, Design};
use crate::error::{CmmError, Result};
use crate::estimate::{fit, FitResult};
use crate::inference::{posteriors, select_segments, weighted_profile, PosteriorMatrix};
use crate::likelihood::LikelihoodModel;
use crate::params::ParamLayout;
use crate::predict::{
    aggregate_distribution, censor_correct, censored_distribution, empirical_censored,
    empirical_uncensored, evaluate, expected_cards_posterior, max_tail_mass, predict_rows, FitMeasures,
    Support, LITERAL_M,
};
use crate::sim::generate_dataset;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const CONFIG: i32 = 2;
    pub const DATA: i32 = 3;
    pub const CONVERGENCE: i32 = 4;
    pub const INVARIANT: i32 = 5;
}

impl CmmError {
    /// Exit code for a failed command.
    pub fn exit_code(&self) -> i32 {
        match self {
            CmmError::Config(_) => exit::CONFIG,
            CmmError::InvalidParameter(_)
            | CmmError::OutOfSupport { .. }
            | CmmError::OutOfRange(_)
            | CmmError::DegenerateColumn(_)
            | CmmError::MissingColumn(_)
            | CmmError::UnknownCategory { .. }
            | CmmError::DimensionMismatch(_)
            | CmmError::Data(_)
            | CmmError::EmptyUncensored
            | CmmError::Io { .. }
            | CmmError::Csv(_)
            | CmmError::Json(_) => exit::DATA,
            CmmError::NonFinite { .. } | CmmError::Singular(_) | CmmError::Invariant(_) => exit::INVARIANT,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "cmm", version, about = "Censored mixture model for card-game data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (default: the config's `out`, else the current directory).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for the parallel likelihood and simulation.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Segment count, or an inclusive range `a..b` for `select`.
    #[arg(long, global = true)]
    pub segments: Option<String>,
    /// Predict with the untruncated expected value folded at 100 cards.
    #[arg(long, global = true)]
    pub appendix_c_literal: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Draw children and rounds from a known model.
    Simulate,
    /// Fit the mixture for one segment count.
    Fit,
    /// Fit a range of segment counts and recommend one.
    Select,
    /// Per-child segment probabilities from a saved fit.
    Posteriors,
    /// Posterior-weighted segment means of scores, with Wald tests.
    Profile,
    /// Expected cards per round and aggregated outcome distributions.
    Predict,
    /// RMSE and MAD of predictions over uncensored rounds.
    Evaluate,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Fit => "fit",
            Command::Select => "select",
            Command::Posteriors => "posteriors",
            Command::Profile => "profile",
            Command::Predict => "predict",
            Command::Evaluate => "evaluate",
        }
    }
}

/// Provenance stored in every JSON artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub tool_version: String,
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Serialize)]
struct WithMeta<'a, T: Serialize> {
    meta: &'a Meta,
    #[serde(flatten)]
    body: &'a T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactDigest {
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub meta: Meta,
    pub threads: usize,
    pub exit_code: i32,
    pub wall_time_seconds: f64,
    pub artifacts: Vec<ArtifactDigest>,
}

/// `run_manifest.json`: the latest run of each command in this directory.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub runs: BTreeMap<String, ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "run_manifest.json";

struct Run {
    cfg: RunConfig,
    meta: Meta,
    out: PathBuf,
    written: Vec<PathBuf>,
}

impl Run {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let p = self.path(name);
        fs::write(&p, bytes).map_err(|e| CmmError::io(&p, e))?;
        self.written.push(p);
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, body: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(&WithMeta {
            meta: &self.meta,
            body,
        })?;
        text.push('\n');
        self.write_bytes(name, text.as_bytes())
    }

    fn write_csv(&mut self, name: &str, header: &[String], rows: &[Vec<String>]) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        let bytes = w.into_inner().map_err(|e| CmmError::Data(e.to_string()))?;
        self.write_bytes(name, &bytes)
    }
}

/// Format a float so that it round-trips exactly.
fn num(v: f64) -> String {
    if v.is_nan() {
        "NA".into()
    } else {
        format!("{v}")
    }
}

fn header(cols: &[&str]) -> Vec<String> {
    cols.iter().map(|s| s.to_string()).collect()
}

/// Resolve config and overrides, run the command inside a thread pool of
/// the requested size and record the manifest. Returns the exit code.
pub fn run(cli: &Cli) -> Result<i32> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = Some(s);
    }
    if let Some(o) = &cli.out {
        cfg.out = Some(o.clone());
    }
    if let Some(t) = cli.threads {
        cfg.threads = Some(t);
    }
    if cli.appendix_c_literal {
        cfg.predict.literal = true;
    }
    if let Some(seg) = &cli.segments {
        match cli.command {
            Command::Select => cfg.select.segments = Some(seg.clone()),
            _ => {
                let v = parse_segments(seg)?;
                if v.len() != 1 {
                    return Err(CmmError::Config(format!(
                        "--segments '{seg}': a range is only valid for select"
                    )));
                }
                cfg.fit.n_segments = v[0];
            }
        }
    }
    let threads = cfg.threads.unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CmmError::Config(format!("threads: {e}")))?;
    let out = cfg.out_dir();
    fs::create_dir_all(&out).map_err(|e| CmmError::io(&out, e))?;
    let mut run = Run {
        meta: Meta {
            tool_version: TOOL_VERSION.into(),
            command: cli.command.name().into(),
            config_hash: cfg.hash(),
            seed: cfg.seed(),
        },
        cfg,
        out,
        written: Vec::new(),
    };
    let start = Instant::now();
    let code = pool.install(|| dispatch(cli.command, &mut run))?;
    let wall = start.elapsed().as_secs_f64();
    write_manifest(&run, pool.current_num_threads(), code, wall)?;
    Ok(code)
}

fn dispatch(cmd: Command, run: &mut Run) -> Result<i32> {
    match cmd {
        Command::Simulate => cmd_simulate(run),
        Command::Fit => cmd_fit(run),
        Command::Select => cmd_select(run),
        Command::Posteriors => cmd_posteriors(run),
        Command::Profile => cmd_profile(run),
        Command::Predict => cmd_predict(run),
        Command::Evaluate => cmd_evaluate(run),
    }
}

fn write_manifest(run: &Run, threads: usize, code: i32, wall: f64) -> Result<()> {
    let path = run.path(MANIFEST_FILE);
    let mut manifest: Manifest = fs::read(&path)
        .ok()
        .and_then(|b| serde_json::from_slice(&b).ok())
        .unwrap_or_default();
    let mut artifacts = Vec::new();
    for p in &run.written {
        let bytes = fs::read(p).map_err(|e| CmmError::io(p, e))?;
        artifacts.push(ArtifactDigest {
            file: p
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
            sha256: hex(&Sha256::digest(&bytes)),
        });
    }
    manifest.runs.insert(
        run.meta.command.clone(),
        ManifestEntry {
            meta: run.meta.clone(),
            threads,
            exit_code: code,
            wall_time_seconds: wall,
            artifacts,
        },
    );
    let text = serde_json::to_string_pretty(&manifest)? + "\n";
    fs::write(&path, text).map_err(|e| CmmError::io(&path, e))
}

fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    Dataset::load(&cfg.children_path(), &cfg.trials_path())
}

pub fn load_fit(path: &Path) -> Result<FitResult> {
    let bytes = fs::read(path).map_err(|e| CmmError::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Design rows of `data` encoded the way `fit` was.
pub fn design_for_fit(fit: &FitResult, data: &Dataset) -> Result<Design> {
    build_design_with_scales(data, &fit.schema, fit.scales.clone())
}

fn model_for_fit(fit: &FitResult, data: &Dataset, design: &Design) -> Result<LikelihoodModel> {
    let layout = ParamLayout::new(fit.n_segments, fit.block_map.clone())?;
    LikelihoodModel::new(data, &design.matrix, layout)
}

fn cmd_simulate(run: &mut Run) -> Result<i32> {
    let sim = run.cfg.sim_config()?;
    let data = generate_dataset(&sim)?;
    let mut buf = Vec::new();
    data.children.write_csv(&mut buf)?;
    run.write_bytes("children.csv", &buf)?;
    let mut buf = Vec::new();
    crate::data::write_trials_csv(&data.trials, &mut buf)?;
    run.write_bytes("trials.csv", &buf)?;
    run.write_json("truth.json", &sim.truth)?;
    Ok(exit::OK)
}

fn posterior_rows(names: &[String], post: &PosteriorMatrix) -> (Vec<String>, Vec<Vec<String>>) {
    let s = post.n_segments();
    let mut h = vec!["child_id".to_string()];
    h.extend((1..=s).map(|k| format!("p_{k}")));
    h.push("max_posterior".into());
    h.push("segment".into());
    let rows = post
        .rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut rec = vec![names[i].clone()];
            rec.extend(r.iter().map(|v| num(*v)));
            let (arg, max) = r
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |b, (k, v)| if *v > b.1 { (k, *v) } else { b });
            rec.push(num(max));
            rec.push((arg + 1).to_string());
            rec
        })
        .collect();
    (h, rows)
}

fn child_ids(data: &Dataset) -> Vec<String> {
    data.children.rows.iter().map(|r| r.child_id.clone()).collect()
}

fn write_fit_artifacts(run: &mut Run, result: &FitResult, data: &Dataset, design: &Design) -> Result<()> {
    run.write_json("fit.json", result)?;
    if run.cfg.output.hessian {
        if let Some(h) = &result.hessian {
            let hdr: Vec<String> = (0..h.ncols()).map(|j| format!("u{j}")).collect();
            let rows: Vec<Vec<String>> = (0..h.nrows())
                .map(|i| (0..h.ncols()).map(|j| num(h[(i, j)])).collect())
                .collect();
            run.write_csv("hessian.csv", &hdr, &rows)?;
        }
    }
    let model = model_for_fit(result, data, design)?;
    let post = posteriors(&model, &result.params)?;
    let (h, rows) = posterior_rows(&child_ids(data), &post);
    run.write_csv("posteriors.csv", &h, &rows)
}

fn cmd_fit(run: &mut Run) -> Result<i32> {
    let schema = run.cfg.schema.resolve()?;
    let fc = run.cfg.fit_config()?;
    let data = load_data(&run.cfg)?;
    let design = build_design(&data, &schema)?;
    let result = fit(&data, &design, &fc)?;
    write_fit_artifacts(run, &result, &data, &design)?;
    Ok(if result.converged { exit::OK } else { exit::CONVERGENCE })
}

fn cmd_select(run: &mut Run) -> Result<i32> {
    let schema = run.cfg.schema.resolve()?;
    let segs = parse_segments(run.cfg.select.segments.as_deref().unwrap_or("1..4"))?;
    let data = load_data(&run.cfg)?;
    let design = build_design(&data, &schema)?;
    let mut fits = Vec::with_capacity(segs.len());
    for s in segs {
        let mut fc = run.cfg.fit_config()?;
        fc.n_segments = s;
        let r = fit(&data, &design, &fc)?;
        run.write_json(&format!("fit_s{s}.json"), &r)?;
        fits.push(r);
    }
    let report = select_segments(&fits, run.cfg.select.criteria())?;
    run.write_json("selection_report.json", &report)?;
    Ok(exit::OK)
}

fn cmd_posteriors(run: &mut Run) -> Result<i32> {
    let fr = load_fit(&run.cfg.fit_path())?;
    let data = load_data(&run.cfg)?;
    let design = design_for_fit(&fr, &data)?;
    let model = model_for_fit(&fr, &data, &design)?;
    let post = posteriors(&model, &fr.params)?;
    let (h, rows) = posterior_rows(&child_ids(&data), &post);
    run.write_csv("posteriors.csv", &h, &rows)?;
    Ok(exit::OK)
}

/// Named score vectors aligned with the dataset's children. Non-numeric
/// columns become one indicator per level.
fn score_columns(table: &ChildTable, data: &Dataset, wanted: &[String]) -> Result<Vec<(String, Vec<f64>)>> {
    let index: BTreeMap<&str, usize> = table
        .rows
        .iter()
        .enumerate()
        .map(|(i, r)| (r.child_id.as_str(), i))
        .collect();
    let order: Vec<usize> = data
        .children
        .rows
        .iter()
        .map(|c| {
            index
                .get(c.child_id.as_str())
                .copied()
                .ok_or_else(|| CmmError::Data(format!("no scores for child '{}'", c.child_id)))
        })
        .collect::<Result<_>>()?;
    let cols: Vec<String> = if wanted.is_empty() {
        table.columns.clone()
    } else {
        wanted.to_vec()
    };
    let mut out = Vec::new();
    for name in cols {
        let j = table
            .column_index(&name)
            .ok_or_else(|| CmmError::MissingColumn(name.clone()))?;
        let raw: Vec<&str> = order.iter().map(|&i| table.rows[i].values[j].as_str()).collect();
        let parsed: Option<Vec<f64>> = raw.iter().map(|v| v.parse::<f64>().ok()).collect();
        match parsed {
            Some(v) => out.push((name, v)),
            None => {
                let mut levels: Vec<&str> = raw.clone();
                levels.sort_unstable();
                levels.dedup();
                for l in levels {
                    out.push((
                        format!("{name}={l}"),
                        raw.iter().map(|v| if *v == l { 1.0 } else { 0.0 }).collect(),
                    ));
                }
            }
        }
    }
    Ok(out)
}

fn cmd_profile(run: &mut Run) -> Result<i32> {
    let fr = load_fit(&run.cfg.fit_path())?;
    let data = load_data(&run.cfg)?;
    let design = design_for_fit(&fr, &data)?;
    let model = model_for_fit(&fr, &data, &design)?;
    let post = posteriors(&model, &fr.params)?;
    let table = match &run.cfg.profile.scores {
        Some(p) => ChildTable::read_csv(fs::File::open(p).map_err(|e| CmmError::io(p, e))?)?,
        None => data.children.clone(),
    };
    let scores = score_columns(&table, &data, &run.cfg.profile.columns)?;
    let s = post.n_segments();
    let mut h = vec!["variable".to_string()];
    h.extend((1..=s).map(|k| format!("psi_{k}")));
    h.extend(header(&["statistic", "df", "p_value", "stars"]));
    let mut rows = Vec::new();
    for (name, v) in scores {
        let w = weighted_profile(&post, &v, run.cfg.profile.covariance)?;
        let mut rec = vec![name];
        rec.extend(w.psi_star.iter().map(|x| num(*x)));
        rec.push(num(w.statistic));
        rec.push(w.df.to_string());
        rec.push(num(w.p_value));
        rec.push(w.stars.clone());
        rows.push(rec);
    }
    run.write_csv("profile.csv", &h, &rows)?;
    Ok(exit::OK)
}

#[derive(Debug, Serialize)]
struct PredictSummary {
    support: Support,
    n_rows: usize,
    min_y_hat: f64,
    max_y_hat: f64,
    /// Largest base mass above 100 cards over rows and segments.
    max_tail_mass_above_m: f64,
    tail_m: u32,
}

fn cmd_predict(run: &mut Run) -> Result<i32> {
    let fr = load_fit(&run.cfg.fit_path())?;
    let data = load_data(&run.cfg)?;
    let design = design_for_fit(&fr, &data)?;
    let support = if run.cfg.predict.literal {
        Support::Literal
    } else {
        Support::Truncated
    };
    let preds = predict_rows(&fr.params, &design.matrix, support)?;
    let post_preds = if run.cfg.predict.posterior_weighted {
        let model = model_for_fit(&fr, &data, &design)?;
        let post = posteriors(&model, &fr.params)?;
        let mut v = Vec::with_capacity(preds.len());
        for i in 0..data.n_children() {
            for r in data.child_range(i) {
                v.push(expected_cards_posterior(&fr.params, design.matrix.row(r), &post.rows[i], support)?);
            }
        }
        Some(v)
    } else {
        None
    };
    let mut h = header(&["child_id", "trial_index", "y", "censored", "y_hat"]);
    if post_preds.is_some() {
        h.push("y_hat_posterior".into());
    }
    let rows: Vec<Vec<String>> = data
        .trials
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let mut r = vec![
                t.child_id.clone(),
                t.trial_index.to_string(),
                t.y.to_string(),
                u8::from(t.censored).to_string(),
                num(preds[i]),
            ];
            if let Some(p) = &post_preds {
                r.push(num(p[i]));
            }
            r
        })
        .collect();
    run.write_csv("predictions.csv", &h, &rows)?;

    // uncensored comparison over the uncensored rounds
    let all: Vec<&TrialRecord> = data.trials.iter().collect();
    let unc_rows: Vec<&[f64]> = (0..data.n_trials())
        .filter(|&i| !data.trials[i].censored)
        .map(|i| design.matrix.row(i))
        .collect();
    let emp = empirical_uncensored(&all);
    let rows: Vec<Vec<String>> = if unc_rows.is_empty() {
        Vec::new()
    } else {
        let pred = aggregate_distribution(&fr.params, &unc_rows, support)?;
        (0..emp.len())
            .map(|k| vec![k.to_string(), num(emp[k]), num(pred.mass[k])])
            .collect()
    };
    run.write_csv("distribution.csv", &header(&["card", "empirical", "predicted"]), &rows)?;

    // censored comparison, per loss-card count, over all rounds of that kind
    let mut rows = Vec::new();
    for n_cards in [1u32, 3] {
        let idx: Vec<usize> = (0..data.n_trials())
            .filter(|&i| data.trials[i].setting.n_loss_cards() == n_cards)
            .collect();
        if idx.is_empty() {
            continue;
        }
        let setting = data.trials[idx[0]].setting;
        let group: Vec<&TrialRecord> = idx.iter().map(|&i| &data.trials[i]).collect();
        let xs: Vec<&[f64]> = idx.iter().map(|&i| design.matrix.row(i)).collect();
        let pred = aggregate_distribution(&fr.params, &xs, support)?;
        let corrected = censor_correct(&pred, setting)?;
        let exact = censored_distribution(&pred, setting)?;
        let emp = empirical_censored(&group);
        for k in 0..emp.len() {
            rows.push(vec![
                n_cards.to_string(),
                k.to_string(),
                num(emp[k]),
                num(corrected[k]),
                num(exact[k]),
            ]);
        }
    }
    run.write_csv(
        "distribution_censored.csv",
        &header(&["n_loss_cards", "card", "empirical", "predicted", "predicted_exact"]),
        &rows,
    )?;

    let summary = PredictSummary {
        support,
        n_rows: preds.len(),
        min_y_hat: preds.iter().copied().fold(f64::INFINITY, f64::min),
        max_y_hat: preds.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        max_tail_mass_above_m: max_tail_mass(&fr.params, &design.matrix)?,
        tail_m: LITERAL_M,
    };
    run.write_json("prediction_summary.json", &summary)?;
    Ok(exit::OK)
}

#[derive(Debug, Serialize)]
struct Evaluation {
    in_sample: FitMeasures,
    #[serde(skip_serializing_if = "Option::is_none")]
    held_out: Option<HoldOut>,
}

#[derive(Debug, Serialize)]
struct HoldOut {
    fraction: f64,
    n_train_children: usize,
    n_test_children: usize,
    converged: bool,
    train: FitMeasures,
    test: FitMeasures,
}

/// Read `predictions.csv` back into (trials stub, predictions).
fn read_predictions(path: &Path) -> Result<(Vec<TrialRecord>, Vec<f64>)> {
    let file = fs::File::open(path).map_err(|e| CmmError::io(path, e))?;
    let mut rdr = csv::Reader::from_reader(file);
    let hdr = rdr.headers()?.clone();
    let col = |name: &str| {
        hdr.iter()
            .position(|h| h == name)
            .ok_or_else(|| CmmError::MissingColumn(name.to_string()))
    };
    let (ci, yi, cen, yh) = (col("child_id")?, col("y")?, col("censored")?, col("y_hat")?);
    let setting = crate::game::GameSetting::all()[0];
    let mut trials = Vec::new();
    let mut preds = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let bad = |what: &str| CmmError::Data(format!("predictions: bad {what} '{}'", rec.iter().collect::<Vec<_>>().join(",")));
        let y: u32 = rec[yi].parse().map_err(|_| bad("y"))?;
        let censored = match &rec[cen] {
            "0" => false,
            "1" => true,
            _ => return Err(bad("censored")),
        };
        let p: f64 = rec[yh].parse().map_err(|_| bad("y_hat"))?;
        trials.push(TrialRecord {
            child_id: rec[ci].to_string(),
            trial_index: 0,
            setting,
            prev_loss: false,
            prev2_loss: false,
            y,
            censored,
            score: 0,
            z_true: None,
        });
        preds.push(p);
    }
    Ok((trials, preds))
}

/// Split children with a seeded shuffle; the first `fraction` of them are
/// held out. Both index lists come back sorted.
pub fn holdout_split(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut rng);
    let n_test = ((n as f64) * fraction).round() as usize;
    let mut test = idx[..n_test].to_vec();
    let mut train = idx[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    (train, test)
}

/// Fit on the training children, then score both parts with the training
/// fit's frozen encoding.
pub fn holdout_evaluate(
    data: &Dataset,
    schema: &crate::design::CovariateSchema,
    fc: &crate::estimate::FitConfig,
    fraction: f64,
    support: Support,
) -> Result<(FitResult, FitMeasures, FitMeasures, usize, usize)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(CmmError::Config("evaluate.holdout_fraction must lie in (0, 1)".into()));
    }
    let (train_idx, test_idx) = holdout_split(data.n_children(), fraction, fc.seed);
    if train_idx.is_empty() || test_idx.is_empty() {
        return Err(CmmError::Data("holdout split leaves an empty part".into()));
    }
    let train = data.subset(&train_idx);
    let test = data.subset(&test_idx);
    let design = build_design(&train, schema)?;
    let fr = fit(&train, &design, fc)?;
    let train_pred = predict_rows(&fr.params, &design.matrix, support)?;
    let test_design = design_for_fit(&fr, &test)?;
    let test_pred = predict_rows(&fr.params, &test_design.matrix, support)?;
    let a = evaluate(&train_pred, &train.trials)?;
    let b = evaluate(&test_pred, &test.trials)?;
    Ok((fr, a, b, train_idx.len(), test_idx.len()))
}

fn cmd_evaluate(run: &mut Run) -> Result<i32> {
    let (trials, preds) = read_predictions(&run.cfg.predictions_path())?;
    let in_sample = evaluate(&preds, &trials)?;
    let mut code = exit::OK;
    let held_out = match run.cfg.evaluate.holdout_fraction {
        Some(f) => {
            let schema = run.cfg.schema.resolve()?;
            let fc = run.cfg.fit_config()?;
            let data = load_data(&run.cfg)?;
            let support = if run.cfg.predict.literal {
                Support::Literal
            } else {
                Support::Truncated
            };
            let (fr, train, test, n_train, n_test) = holdout_evaluate(&data, &schema, &fc, f, support)?;
            if !fr.converged {
                code = exit::CONVERGENCE;
            }
            Some(HoldOut {
                fraction: f,
                n_train_children: n_train,
                n_test_children: n_test,
                converged: fr.converged,
                train,
                test,
            })
        }
        None => None,
    };
    run.write_json("evaluation.json", &Evaluation { in_sample, held_out })?;
    Ok(code)
}
