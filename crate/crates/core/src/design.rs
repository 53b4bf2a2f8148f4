//! Design-matrix construction: z-scored numeric covariates, one dummy per
//! category for every categorical block, product dummies for interactions,
//! and the sum-zero expansion that maps reference-coded weights onto
//! centered ones.
//!
//! Column layout of a design row: numeric covariates first (schema order),
//! then one block per categorical variable, then one block per interaction.
//! Interaction levels are ordered first-factor-major, so level `(i, j)` sits
//! at `i * K_second + j` within its block.

use std::collections::HashSet;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{ChildRecord, Dataset, TrialRecord, TRIAL_COVARIATE_COLUMNS};
use crate::error::{CmmError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategoricalSpec {
    pub name: String,
    /// Category labels; the first one is the reference category.
    pub levels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovariateSchema {
    #[serde(default)]
    pub numeric: Vec<String>,
    #[serde(default)]
    pub categorical: Vec<CategoricalSpec>,
    #[serde(default)]
    pub interactions: Vec<[String; 2]>,
}

impl CovariateSchema {
    pub fn validate(&self) -> Result<()> {
        let mut names = HashSet::new();
        for n in self
            .numeric
            .iter()
            .chain(self.categorical.iter().map(|c| &c.name))
        {
            if n.is_empty() {
                return Err(CmmError::Config("schema: empty covariate name".into()));
            }
            if !names.insert(n.as_str()) {
                return Err(CmmError::Config(format!("schema: duplicate covariate '{n}'")));
            }
        }
        for c in &self.categorical {
            if c.levels.len() < 2 {
                return Err(CmmError::Config(format!(
                    "schema.categorical '{}': needs at least 2 levels",
                    c.name
                )));
            }
            let unique: HashSet<_> = c.levels.iter().collect();
            if unique.len() != c.levels.len() {
                return Err(CmmError::Config(format!(
                    "schema.categorical '{}': duplicate level",
                    c.name
                )));
            }
        }
        let mut pairs = HashSet::new();
        for [a, b] in &self.interactions {
            for side in [a, b] {
                if !self.categorical.iter().any(|c| &c.name == side) {
                    return Err(CmmError::Config(format!(
                        "schema.interactions: '{side}' is not a declared categorical block"
                    )));
                }
            }
            if a == b {
                return Err(CmmError::Config(format!(
                    "schema.interactions: '{a}' interacts with itself"
                )));
            }
            let key = if a < b { (a, b) } else { (b, a) };
            if !pairs.insert(key) {
                return Err(CmmError::Config(format!(
                    "schema.interactions: duplicate pair ({a}, {b})"
                )));
            }
        }
        Ok(())
    }

    fn categorical_index(&self, name: &str) -> usize {
        self.categorical
            .iter()
            .position(|c| c.name == name)
            .expect("validated schema")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BlockKind {
    Categorical,
    /// Product of two categorical blocks, referenced by block position.
    Interaction { first: usize, second: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    pub reference: usize,
    #[serde(flatten)]
    pub kind: BlockKind,
}

/// Where every dummy block lives inside the full weight vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockMap {
    pub n_numeric: usize,
    pub blocks: Vec<Block>,
    pub n_columns: usize,
}

impl BlockMap {
    pub fn from_schema(schema: &CovariateSchema) -> Result<Self> {
        schema.validate()?;
        let n_numeric = schema.numeric.len();
        let mut offset = n_numeric;
        let mut blocks = Vec::new();
        for c in &schema.categorical {
            blocks.push(Block {
                name: c.name.clone(),
                offset,
                len: c.levels.len(),
                reference: 0,
                kind: BlockKind::Categorical,
            });
            offset += c.levels.len();
        }
        for [a, b] in &schema.interactions {
            let (ia, ib) = (schema.categorical_index(a), schema.categorical_index(b));
            let len = blocks[ia].len * blocks[ib].len;
            blocks.push(Block {
                name: format!("{a}:{b}"),
                offset,
                len,
                reference: 0,
                kind: BlockKind::Interaction {
                    first: ia,
                    second: ib,
                },
            });
            offset += len;
        }
        Ok(BlockMap {
            n_numeric,
            blocks,
            n_columns: offset,
        })
    }

    /// Number of free (non-reference) weights.
    pub fn n_free(&self) -> usize {
        self.n_numeric
            + self
                .blocks
                .iter()
                .map(|b| match b.kind {
                    BlockKind::Categorical => b.len - 1,
                    BlockKind::Interaction { first, second } => {
                        (self.blocks[first].len - 1) * (self.blocks[second].len - 1)
                    }
                })
                .sum::<usize>()
    }

    /// Full-vector positions of the free weights, in free-vector order.
    pub fn free_positions(&self) -> Vec<usize> {
        let mut out: Vec<usize> = (0..self.n_numeric).collect();
        for b in &self.blocks {
            match b.kind {
                BlockKind::Categorical => out.extend(b.offset + 1..b.offset + b.len),
                BlockKind::Interaction { second, .. } => {
                    let kb = self.blocks[second].len;
                    for i in 1..b.len / kb {
                        for j in 1..kb {
                            out.push(b.offset + i * kb + j);
                        }
                    }
                }
            }
        }
        out
    }

    /// Reference-coded full weights from the free weights.
    pub fn scatter_free(&self, beta_free: &[f64]) -> Result<Vec<f64>> {
        if beta_free.len() != self.n_free() {
            return Err(CmmError::DimensionMismatch(format!(
                "expected {} free weights, got {}",
                self.n_free(),
                beta_free.len()
            )));
        }
        let mut full = vec![0.0; self.n_columns];
        for (pos, v) in self.free_positions().into_iter().zip(beta_free) {
            full[pos] = *v;
        }
        Ok(full)
    }

    /// Center every block in place, pushing the removed level into the
    /// intercepts so that `alpha_s + x'beta` is unchanged for every valid row.
    ///
    /// Interaction blocks are double-centered (rows and columns sum to zero);
    /// their margins move into the two main-effect blocks, which are
    /// centered afterwards.
    pub fn center_blocks(&self, alpha: &mut [f64], beta: &mut [f64]) {
        let mut shift = 0.0;
        for b in &self.blocks {
            if let BlockKind::Interaction { first, second } = b.kind {
                let (ka, kb) = (self.blocks[first].len, self.blocks[second].len);
                let cell = |beta: &[f64], i: usize, j: usize| beta[b.offset + i * kb + j];
                let row_mean: Vec<f64> = (0..ka)
                    .map(|i| (0..kb).map(|j| cell(beta, i, j)).sum::<f64>() / kb as f64)
                    .collect();
                let col_mean: Vec<f64> = (0..kb)
                    .map(|j| (0..ka).map(|i| cell(beta, i, j)).sum::<f64>() / ka as f64)
                    .collect();
                let grand = row_mean.iter().sum::<f64>() / ka as f64;
                for i in 0..ka {
                    for j in 0..kb {
                        beta[b.offset + i * kb + j] -= row_mean[i] + col_mean[j] - grand;
                    }
                }
                let (oa, ob) = (self.blocks[first].offset, self.blocks[second].offset);
                for (i, m) in row_mean.iter().enumerate() {
                    beta[oa + i] += m - grand;
                }
                for (j, m) in col_mean.iter().enumerate() {
                    beta[ob + j] += m - grand;
                }
                shift += grand;
            }
        }
        for b in &self.blocks {
            if b.kind == BlockKind::Categorical {
                let slice = &mut beta[b.offset..b.offset + b.len];
                let mean = slice.iter().sum::<f64>() / b.len as f64;
                slice.iter_mut().for_each(|v| *v -= mean);
                shift += mean;
            }
        }
        alpha.iter_mut().for_each(|a| *a += shift);
    }

    /// Linear map `A` from `(alpha_u, beta_free)` to `(alpha, beta_full)`.
    pub fn expansion_matrix(&self, n_segments: usize) -> DMatrix<f64> {
        let q = n_segments + self.n_free();
        let p = n_segments + self.n_columns;
        let mut a = DMatrix::zeros(p, q);
        let mut unit = vec![0.0; q];
        for col in 0..q {
            unit.iter_mut().for_each(|v| *v = 0.0);
            unit[col] = 1.0;
            let (alpha, beta) = sum_zero_expand(&unit, self, n_segments).expect("sized unit");
            for (row, v) in alpha.iter().chain(beta.iter()).enumerate() {
                a[(row, col)] = *v;
            }
        }
        a
    }

    /// Human-readable names of the full weight vector.
    pub fn column_names(&self, schema: &CovariateSchema) -> Vec<String> {
        let mut out = schema.numeric.clone();
        for b in &self.blocks {
            match b.kind {
                BlockKind::Categorical => {
                    let spec = &schema.categorical[schema.categorical_index(&b.name)];
                    out.extend(spec.levels.iter().map(|l| format!("{}={}", spec.name, l)));
                }
                BlockKind::Interaction { first, second } => {
                    let sa = &schema.categorical[schema.categorical_index(&self.blocks[first].name)];
                    let sb =
                        &schema.categorical[schema.categorical_index(&self.blocks[second].name)];
                    for la in &sa.levels {
                        for lb in &sb.levels {
                            out.push(format!("{}={}:{}={}", sa.name, la, sb.name, lb));
                        }
                    }
                }
            }
        }
        out
    }
}

/// Map `gamma_u = (alpha_u, beta_free)` onto intercepts and sum-zero weights.
pub fn sum_zero_expand(
    gamma_u: &[f64],
    bm: &BlockMap,
    n_segments: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if gamma_u.len() != n_segments + bm.n_free() {
        return Err(CmmError::DimensionMismatch(format!(
            "gamma_u has {} entries, expected {} intercepts + {} weights",
            gamma_u.len(),
            n_segments,
            bm.n_free()
        )));
    }
    let mut alpha = gamma_u[..n_segments].to_vec();
    let mut beta = bm.scatter_free(&gamma_u[n_segments..])?;
    bm.center_blocks(&mut alpha, &mut beta);
    Ok((alpha, beta))
}

/// Z-scores with the sample (n - 1) standard deviation.
pub fn standardize(values: &[f64]) -> Result<(Vec<f64>, f64, f64)> {
    standardize_named(values, "<column>")
}

fn standardize_named(values: &[f64], name: &str) -> Result<(Vec<f64>, f64, f64)> {
    if values.len() < 2 {
        return Err(CmmError::DegenerateColumn(name.to_string()));
    }
    if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
        return Err(CmmError::Data(format!("column '{name}' has non-finite value {bad}")));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let sd = var.sqrt();
    if !(sd > 1e-12 * mean.abs().max(1.0)) {
        return Err(CmmError::DegenerateColumn(name.to_string()));
    }
    Ok((values.iter().map(|v| (v - mean) / sd).collect(), mean, sd))
}

/// Frozen z-score statistics of one numeric column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnScale {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
}

impl ColumnScale {
    pub fn apply(&self, v: f64) -> f64 {
        (v - self.mean) / self.sd
    }
}

/// Dense row-major design matrix, one row per trial.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    n_rows: usize,
    n_cols: usize,
    values: Vec<f64>,
}

impl DesignMatrix {
    pub fn from_rows(n_cols: usize, rows: Vec<Vec<f64>>) -> Result<Self> {
        let n_rows = rows.len();
        let mut values = Vec::with_capacity(n_rows * n_cols);
        for r in rows {
            if r.len() != n_cols {
                return Err(CmmError::DimensionMismatch(format!(
                    "design row has {} columns, expected {n_cols}",
                    r.len()
                )));
            }
            values.extend(r);
        }
        Ok(DesignMatrix {
            n_rows,
            n_cols,
            values,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n_cols..(i + 1) * self.n_cols]
    }

    /// Rows `range` as a new matrix.
    pub fn slice_rows(&self, rows: impl Iterator<Item = usize>) -> DesignMatrix {
        let mut values = Vec::new();
        let mut n_rows = 0;
        for i in rows {
            values.extend_from_slice(self.row(i));
            n_rows += 1;
        }
        DesignMatrix {
            n_rows,
            n_cols: self.n_cols,
            values,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Source {
    Child(usize),
    Trial,
}

/// Encodes raw child/trial values into design rows.
#[derive(Debug, Clone)]
pub struct RowEncoder {
    schema: CovariateSchema,
    block_map: BlockMap,
    scales: Vec<ColumnScale>,
    numeric_src: Vec<Source>,
    categorical_src: Vec<Source>,
}

impl RowEncoder {
    pub fn new(
        schema: &CovariateSchema,
        child_columns: &[String],
        scales: Vec<ColumnScale>,
    ) -> Result<Self> {
        let block_map = BlockMap::from_schema(schema)?;
        let locate = |name: &str| -> Result<Source> {
            if let Some(i) = child_columns.iter().position(|c| c == name) {
                Ok(Source::Child(i))
            } else if TRIAL_COVARIATE_COLUMNS.contains(&name) {
                Ok(Source::Trial)
            } else {
                Err(CmmError::MissingColumn(name.to_string()))
            }
        };
        let numeric_src = schema
            .numeric
            .iter()
            .map(|n| locate(n))
            .collect::<Result<Vec<_>>>()?;
        let categorical_src = schema
            .categorical
            .iter()
            .map(|c| locate(&c.name))
            .collect::<Result<Vec<_>>>()?;
        if scales.len() != schema.numeric.len()
            || scales.iter().zip(&schema.numeric).any(|(s, n)| &s.name != n)
        {
            return Err(CmmError::DimensionMismatch(
                "standardization does not match numeric covariates".into(),
            ));
        }
        Ok(RowEncoder {
            schema: schema.clone(),
            block_map,
            scales,
            numeric_src,
            categorical_src,
        })
    }

    pub fn block_map(&self) -> &BlockMap {
        &self.block_map
    }

    pub fn scales(&self) -> &[ColumnScale] {
        &self.scales
    }

    fn raw<'a>(&self, src: Source, name: &str, child: &'a ChildRecord, trial: &TrialRecord) -> Result<std::borrow::Cow<'a, str>> {
        match src {
            Source::Child(i) => Ok(std::borrow::Cow::Borrowed(child.values[i].as_str())),
            Source::Trial => trial
                .covariate_value(name)
                .map(std::borrow::Cow::Owned)
                .ok_or_else(|| CmmError::MissingColumn(name.to_string())),
        }
    }

    pub fn encode(&self, child: &ChildRecord, trial: &TrialRecord) -> Result<Vec<f64>> {
        let bm = &self.block_map;
        let mut x = vec![0.0; bm.n_columns];
        for (k, name) in self.schema.numeric.iter().enumerate() {
            let raw = self.raw(self.numeric_src[k], name, child, trial)?;
            let v: f64 = raw.trim().parse().map_err(|_| {
                CmmError::Data(format!(
                    "child '{}': numeric '{name}' has value '{raw}'",
                    child.child_id
                ))
            })?;
            if !v.is_finite() {
                return Err(CmmError::Data(format!(
                    "child '{}': numeric '{name}' is not finite",
                    child.child_id
                )));
            }
            x[k] = self.scales[k].apply(v);
        }
        let mut level = Vec::with_capacity(self.schema.categorical.len());
        for (k, spec) in self.schema.categorical.iter().enumerate() {
            let raw = self.raw(self.categorical_src[k], &spec.name, child, trial)?;
            let idx = spec
                .levels
                .iter()
                .position(|l| l == raw.as_ref())
                .ok_or_else(|| CmmError::UnknownCategory {
                    column: spec.name.clone(),
                    value: raw.to_string(),
                })?;
            x[bm.blocks[k].offset + idx] = 1.0;
            level.push(idx);
        }
        for b in &bm.blocks {
            if let BlockKind::Interaction { first, second } = b.kind {
                let kb = bm.blocks[second].len;
                x[b.offset + level[first] * kb + level[second]] = 1.0;
            }
        }
        Ok(x)
    }
}

/// Design rows for a dataset plus everything needed to encode new data the
/// same way.
#[derive(Debug, Clone)]
pub struct Design {
    pub schema: CovariateSchema,
    pub encoder: RowEncoder,
    pub matrix: DesignMatrix,
}

impl Design {
    pub fn block_map(&self) -> &BlockMap {
        self.encoder.block_map()
    }

    pub fn scales(&self) -> &[ColumnScale] {
        self.encoder.scales()
    }

    pub fn column_names(&self) -> Vec<String> {
        self.block_map().column_names(&self.schema)
    }

    /// Restrict to a subset produced by [`Dataset::subset`] with the same children.
    pub fn subset(&self, data: &Dataset, children: &[usize]) -> Design {
        let rows = children.iter().flat_map(|&i| data.child_range(i));
        Design {
            schema: self.schema.clone(),
            encoder: self.encoder.clone(),
            matrix: self.matrix.slice_rows(rows),
        }
    }
}

/// Compute z-score statistics for the schema's numeric columns. Child-level
/// columns are scaled over children, trial-level ones over trials.
pub fn fit_scales(data: &Dataset, schema: &CovariateSchema) -> Result<Vec<ColumnScale>> {
    schema
        .numeric
        .iter()
        .map(|name| {
            let values: Vec<f64> = if let Some(i) = data.children.column_index(name) {
                data.children
                    .rows
                    .iter()
                    .map(|r| {
                        r.values[i].trim().parse::<f64>().map_err(|_| {
                            CmmError::Data(format!(
                                "child '{}': numeric '{name}' has value '{}'",
                                r.child_id, r.values[i]
                            ))
                        })
                    })
                    .collect::<Result<_>>()?
            } else if TRIAL_COVARIATE_COLUMNS.contains(&name.as_str()) {
                data.trials
                    .iter()
                    .map(|t| t.covariate_value(name).unwrap().parse::<f64>().unwrap())
                    .collect()
            } else {
                return Err(CmmError::MissingColumn(name.clone()));
            };
            let (_, mean, sd) = standardize_named(&values, name)?;
            Ok(ColumnScale {
                name: name.clone(),
                mean,
                sd,
            })
        })
        .collect()
}

/// Build the design with statistics computed from `data`.
pub fn build_design(data: &Dataset, schema: &CovariateSchema) -> Result<Design> {
    schema.validate()?;
    let scales = fit_scales(data, schema)?;
    build_design_with_scales(data, schema, scales)
}

/// Build the design reusing frozen z-score statistics.
pub fn build_design_with_scales(
    data: &Dataset,
    schema: &CovariateSchema,
    scales: Vec<ColumnScale>,
) -> Result<Design> {
    let encoder = RowEncoder::new(schema, &data.children.columns, scales)?;
    let mut rows = Vec::with_capacity(data.n_trials());
    for i in 0..data.n_children() {
        let child = &data.children.rows[i];
        for t in data.child_trials(i) {
            rows.push(encoder.encode(child, t)?);
        }
    }
    let matrix = DesignMatrix::from_rows(encoder.block_map().n_columns, rows)?;
    Ok(Design {
        schema: schema.clone(),
        encoder,
        matrix,
    })
}
