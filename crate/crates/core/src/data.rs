//! Children and trial tables, their CSV layouts, and the grouped dataset the
//! likelihood consumes.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use crate::dist::MAX_CARDS;
use crate::error::{CmmError, Result};
use crate::game::GameSetting;

/// Trial-table columns that can be referenced as covariates.
pub const TRIAL_COVARIATE_COLUMNS: [&str; 5] = [
    "gain_amount",
    "loss_amount",
    "n_loss_cards",
    "prev_loss",
    "prev2_loss",
];

const TRIAL_HEADER: [&str; 11] = [
    "child_id",
    "trial_index",
    "gain_amount",
    "loss_amount",
    "n_loss_cards",
    "prev_loss",
    "prev2_loss",
    "y",
    "censored",
    "score",
    "z_true",
];

#[derive(Debug, Clone, PartialEq)]
pub struct ChildRecord {
    pub child_id: String,
    /// Generating segment (1-based), known only for simulated data.
    pub segment_true: Option<usize>,
    /// Raw covariate values, aligned with [`ChildTable::columns`].
    pub values: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ChildTable {
    pub columns: Vec<String>,
    pub rows: Vec<ChildRecord>,
}

impl ChildTable {
    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let id_col = headers
            .iter()
            .position(|h| h == "child_id")
            .ok_or_else(|| CmmError::MissingColumn("child_id".into()))?;
        let seg_col = headers.iter().position(|h| h == "segment_true");
        let cov_cols: Vec<usize> = (0..headers.len())
            .filter(|&i| i != id_col && Some(i) != seg_col)
            .collect();
        let columns = cov_cols.iter().map(|&i| headers[i].to_string()).collect();
        let mut rows = Vec::new();
        for record in rdr.records() {
            let record = record?;
            let segment_true = match seg_col.map(|i| record[i].trim()) {
                None | Some("") => None,
                Some(v) => Some(v.parse::<usize>().map_err(|_| {
                    CmmError::Data(format!("segment_true '{v}' is not a positive integer"))
                })?),
            };
            rows.push(ChildRecord {
                child_id: record[id_col].trim().to_string(),
                segment_true,
                values: cov_cols.iter().map(|&i| record[i].trim().to_string()).collect(),
            });
        }
        Ok(ChildTable { columns, rows })
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["child_id".to_string(), "segment_true".to_string()];
        header.extend(self.columns.iter().cloned());
        w.write_record(&header)?;
        for row in &self.rows {
            let mut rec = vec![
                row.child_id.clone(),
                row.segment_true.map(|s| s.to_string()).unwrap_or_default(),
            ];
            rec.extend(row.values.iter().cloned());
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| CmmError::io("children table", e))?;
        Ok(())
    }
}

/// One observed round.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub child_id: String,
    pub trial_index: u32,
    pub setting: GameSetting,
    pub prev_loss: bool,
    pub prev2_loss: bool,
    pub y: u32,
    pub censored: bool,
    pub score: i64,
    /// Intended count, known only for simulated data.
    pub z_true: Option<u32>,
}

impl TrialRecord {
    /// String value of a trial-level covariate column.
    pub fn covariate_value(&self, column: &str) -> Option<String> {
        let b = |v: bool| if v { "1" } else { "0" }.to_string();
        Some(match column {
            "gain_amount" => self.setting.gain.points().to_string(),
            "loss_amount" => self.setting.loss.points().to_string(),
            "n_loss_cards" => self.setting.n_loss_cards().to_string(),
            "prev_loss" => b(self.prev_loss),
            "prev2_loss" => b(self.prev2_loss),
            _ => return None,
        })
    }

    fn validate(&self) -> Result<()> {
        if self.y > MAX_CARDS {
            return Err(CmmError::Data(format!(
                "child {} trial {}: y={} exceeds 32",
                self.child_id, self.trial_index, self.y
            )));
        }
        if self.censored && (self.y == 0 || self.y > self.setting.last_reachable_card()) {
            return Err(CmmError::Data(format!(
                "child {} trial {}: censored at impossible card {}",
                self.child_id, self.trial_index, self.y
            )));
        }
        Ok(())
    }
}

fn parse_field<T: std::str::FromStr>(value: &str, column: &str, line: usize) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| CmmError::Data(format!("line {line}: cannot parse {column}='{value}'")))
}

fn parse_flag(value: &str, column: &str, line: usize) -> Result<bool> {
    match value.trim() {
        "0" => Ok(false),
        "1" => Ok(true),
        v => Err(CmmError::Data(format!("line {line}: {column}='{v}' must be 0 or 1"))),
    }
}

pub fn read_trials_csv<R: Read>(reader: R) -> Result<Vec<TrialRecord>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let mut idx = HashMap::new();
    for name in TRIAL_HEADER {
        match headers.iter().position(|h| h == name) {
            Some(i) => {
                idx.insert(name, i);
            }
            None if name == "z_true" || name == "score" => {}
            None => return Err(CmmError::MissingColumn(name.into())),
        }
    }
    let mut out = Vec::new();
    for (n, record) in rdr.records().enumerate() {
        let record = record?;
        let line = n + 2;
        let get = |name: &str| idx.get(name).map(|&i| &record[i]);
        let setting = GameSetting::from_values(
            parse_field(get("gain_amount").unwrap(), "gain_amount", line)?,
            parse_field(get("loss_amount").unwrap(), "loss_amount", line)?,
            parse_field(get("n_loss_cards").unwrap(), "n_loss_cards", line)?,
        )
        .map_err(|e| CmmError::Data(format!("line {line}: {e}")))?;
        let y: u32 = parse_field(get("y").unwrap(), "y", line)?;
        let censored = parse_flag(get("censored").unwrap(), "censored", line)?;
        let score = match get("score").map(str::trim) {
            Some(v) if !v.is_empty() => parse_field(v, "score", line)?,
            _ => crate::game::round_score(y.max(u32::from(censored)), censored, setting),
        };
        let z_true = match get("z_true").map(str::trim) {
            Some(v) if !v.is_empty() => Some(parse_field(v, "z_true", line)?),
            _ => None,
        };
        let rec = TrialRecord {
            child_id: get("child_id").unwrap().trim().to_string(),
            trial_index: parse_field(get("trial_index").unwrap(), "trial_index", line)?,
            setting,
            prev_loss: parse_flag(get("prev_loss").unwrap(), "prev_loss", line)?,
            prev2_loss: parse_flag(get("prev2_loss").unwrap(), "prev2_loss", line)?,
            y,
            censored,
            score,
            z_true,
        };
        rec.validate()?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_trials_csv<W: Write>(trials: &[TrialRecord], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(TRIAL_HEADER)?;
    for t in trials {
        w.write_record([
            t.child_id.clone(),
            t.trial_index.to_string(),
            t.setting.gain.points().to_string(),
            t.setting.loss.points().to_string(),
            t.setting.n_loss_cards().to_string(),
            u8::from(t.prev_loss).to_string(),
            u8::from(t.prev2_loss).to_string(),
            t.y.to_string(),
            u8::from(t.censored).to_string(),
            t.score.to_string(),
            t.z_true.map(|z| z.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|e| CmmError::io("trials table", e))?;
    Ok(())
}

/// Children with their trials grouped contiguously, in children-table order.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub children: ChildTable,
    pub trials: Vec<TrialRecord>,
    groups: Vec<Range<usize>>,
}

impl Dataset {
    /// Group trials by child (trials sorted by `trial_index` within a child).
    pub fn new(children: ChildTable, trials: Vec<TrialRecord>) -> Result<Self> {
        let mut by_child: HashMap<&str, Vec<&TrialRecord>> = HashMap::new();
        for t in &trials {
            by_child.entry(t.child_id.as_str()).or_default().push(t);
        }
        let mut seen = std::collections::HashSet::new();
        let mut ordered = Vec::with_capacity(trials.len());
        let mut groups = Vec::with_capacity(children.rows.len());
        for child in &children.rows {
            if !seen.insert(child.child_id.as_str()) {
                return Err(CmmError::Data(format!("duplicate child_id '{}'", child.child_id)));
            }
            let mut list = by_child.remove(child.child_id.as_str()).ok_or_else(|| {
                CmmError::Data(format!("child '{}' has no trials", child.child_id))
            })?;
            list.sort_by_key(|t| t.trial_index);
            if list.windows(2).any(|w| w[0].trial_index == w[1].trial_index) {
                return Err(CmmError::Data(format!(
                    "child '{}' has duplicate trial indices",
                    child.child_id
                )));
            }
            let start = ordered.len();
            ordered.extend(list.into_iter().cloned());
            groups.push(start..ordered.len());
        }
        if let Some(orphan) = by_child.keys().next() {
            return Err(CmmError::Data(format!(
                "trials reference unknown child '{orphan}'"
            )));
        }
        Ok(Dataset {
            children,
            trials: ordered,
            groups,
        })
    }

    pub fn load(children_csv: &Path, trials_csv: &Path) -> Result<Self> {
        let children = ChildTable::read_csv(
            std::fs::File::open(children_csv).map_err(|e| CmmError::io(children_csv, e))?,
        )?;
        let trials = read_trials_csv(
            std::fs::File::open(trials_csv).map_err(|e| CmmError::io(trials_csv, e))?,
        )?;
        Dataset::new(children, trials)
    }

    pub fn n_children(&self) -> usize {
        self.groups.len()
    }

    pub fn n_trials(&self) -> usize {
        self.trials.len()
    }

    /// Trial index range of child `i` (into [`Dataset::trials`] and design rows).
    pub fn child_range(&self, i: usize) -> Range<usize> {
        self.groups[i].clone()
    }

    pub fn child_trials(&self, i: usize) -> &[TrialRecord] {
        &self.trials[self.groups[i].clone()]
    }

    /// Keep only the listed children (by position), in the given order.
    pub fn subset(&self, children: &[usize]) -> Dataset {
        let mut rows = Vec::with_capacity(children.len());
        let mut trials = Vec::new();
        let mut groups = Vec::with_capacity(children.len());
        for &i in children {
            rows.push(self.children.rows[i].clone());
            let start = trials.len();
            trials.extend_from_slice(self.child_trials(i));
            groups.push(start..trials.len());
        }
        Dataset {
            children: ChildTable {
                columns: self.children.columns.clone(),
                rows,
            },
            trials,
            groups,
        }
    }

    /// Share of censored trials.
    pub fn censoring_prevalence(&self) -> f64 {
        if self.trials.is_empty() {
            return 0.0;
        }
        self.trials.iter().filter(|t| t.censored).count() as f64 / self.trials.len() as f64
    }
}
