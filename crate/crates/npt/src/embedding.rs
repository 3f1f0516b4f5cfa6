//! Attribute schemas, per-column encodings, and the learned input/output
//! embeddings that move between raw table space and the n x d x e hidden
//! representation.
//!
//! Each column j is encoded to width `e_j + 1`: a one-hot block (width
//! `C_j`) or a standardized value (width 1), plus one mask channel. The
//! input embedding projects that to width `e` and adds learned index and
//! type embeddings. The output embedding maps the final hidden state back
//! to per-column logits or a standardized prediction.

use serde::{Deserialize, Serialize};

use crate::attention::glorot;
use crate::data::{Cell, DataTable, Role};
use crate::error::{NptError, Result};
use crate::masking::MaskMatrix;
use crate::rng::DeterministicRng;
use crate::tensor::{stack, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttrKind {
    Categorical,
    Continuous,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnDecl {
    pub name: String,
    pub kind: AttrKind,
    #[serde(default)]
    pub target: bool,
}

/// Declared column layout. Order must match the CSV column order.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeSchema {
    pub columns: Vec<ColumnDecl>,
}

impl AttributeSchema {
    pub fn from_json(text: &str) -> Result<Self> {
        let schema: AttributeSchema = serde_json::from_str(text)
            .map_err(|e| NptError::config(format!("bad schema JSON: {e}")))?;
        if schema.columns.is_empty() {
            return Err(NptError::config("schema declares no columns".to_string()));
        }
        Ok(schema)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schema serializes")
    }

    /// Standard regression layout: `features` continuous columns named
    /// x1..xF plus a continuous target `y`.
    pub fn regression(features: usize) -> Self {
        let mut columns: Vec<ColumnDecl> = (1..=features)
            .map(|i| ColumnDecl {
                name: format!("x{i}"),
                kind: AttrKind::Continuous,
                target: false,
            })
            .collect();
        columns.push(ColumnDecl {
            name: "y".to_string(),
            kind: AttrKind::Continuous,
            target: true,
        });
        AttributeSchema { columns }
    }

    pub fn d(&self) -> usize {
        self.columns.len()
    }

    pub fn target_indices(&self) -> Vec<usize> {
        (0..self.d()).filter(|&j| self.columns[j].target).collect()
    }

    pub fn feature_indices(&self) -> Vec<usize> {
        (0..self.d()).filter(|&j| !self.columns[j].target).collect()
    }

    pub fn single_target(&self) -> Result<usize> {
        let targets = self.target_indices();
        match targets.as_slice() {
            [j] => Ok(*j),
            _ => Err(NptError::config(format!(
                "expected exactly one target column, schema declares {}",
                targets.len()
            ))),
        }
    }
}

/// Fitted per-column state: vocabulary for categorical columns,
/// standardization statistics for continuous ones. Fitting only ever sees
/// training rows, so appending evaluation data cannot shift the encoding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnStats {
    Categorical { vocab: Vec<String> },
    Continuous { mean: f64, std: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FittedSchema {
    pub schema: AttributeSchema,
    pub stats: Vec<ColumnStats>,
}

impl FittedSchema {
    /// Fit vocabularies and standardization statistics on the table's
    /// `Train` rows. Population (biased) standard deviation.
    pub fn fit(table: &DataTable) -> Result<Self> {
        let train = table.rows_with_role(Role::Train);
        let mut stats = Vec::with_capacity(table.d());
        for (j, col) in table.schema.columns.iter().enumerate() {
            let cells: Vec<&Cell> = train
                .iter()
                .map(|&i| table.cell(i, j))
                .filter(|c| !c.is_missing())
                .collect();
            if cells.is_empty() {
                return Err(NptError::data(format!(
                    "column {:?} has no observed training values to fit",
                    col.name
                )));
            }
            let stat = match col.kind {
                AttrKind::Continuous => {
                    let mut vals = Vec::with_capacity(cells.len());
                    for c in &cells {
                        vals.push(c.as_num().ok_or_else(|| {
                            NptError::data(format!(
                                "column {:?} declared continuous but holds {c:?}",
                                col.name
                            ))
                        })?);
                    }
                    let n = vals.len() as f64;
                    let mean = vals.iter().sum::<f64>() / n;
                    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    let std = var.sqrt();
                    if std == 0.0 {
                        return Err(NptError::data(format!(
                            "column {:?} is constant on the training rows; cannot standardize",
                            col.name
                        )));
                    }
                    ColumnStats::Continuous { mean, std }
                }
                AttrKind::Categorical => {
                    let mut vocab: Vec<String> = Vec::new();
                    for c in &cells {
                        let label = c.as_cat().ok_or_else(|| {
                            NptError::data(format!(
                                "column {:?} declared categorical but holds {c:?}",
                                col.name
                            ))
                        })?;
                        if !vocab.iter().any(|v| v == label) {
                            vocab.push(label.to_string());
                        }
                    }
                    vocab.sort();
                    if vocab.len() < 2 {
                        return Err(NptError::data(format!(
                            "column {:?} has {} training category; need at least 2",
                            col.name,
                            vocab.len()
                        )));
                    }
                    ColumnStats::Categorical { vocab }
                }
            };
            stats.push(stat);
        }
        Ok(FittedSchema {
            schema: table.schema.clone(),
            stats,
        })
    }

    /// Encoded width `e_j` before the mask channel.
    pub fn encoded_width(&self, j: usize) -> usize {
        match &self.stats[j] {
            ColumnStats::Categorical { vocab } => vocab.len(),
            ColumnStats::Continuous { .. } => 1,
        }
    }

    pub fn cat_index(&self, j: usize, label: &str) -> Result<usize> {
        match &self.stats[j] {
            ColumnStats::Categorical { vocab } => {
                vocab.iter().position(|v| v == label).ok_or_else(|| {
                    NptError::data(format!(
                        "category {label:?} in column {:?} was never seen during fitting",
                        self.schema.columns[j].name
                    ))
                })
            }
            ColumnStats::Continuous { .. } => Err(NptError::internal(format!(
                "column {j} is continuous, no vocabulary"
            ))),
        }
    }

    pub fn continuous_stats(&self, j: usize) -> Result<(f64, f64)> {
        match &self.stats[j] {
            ColumnStats::Continuous { mean, std } => Ok((*mean, *std)),
            ColumnStats::Categorical { .. } => Err(NptError::internal(format!(
                "column {j} is categorical, no standardization stats"
            ))),
        }
    }

    pub fn standardize(&self, j: usize, x: f64) -> Result<f64> {
        let (mean, std) = self.continuous_stats(j)?;
        Ok((x - mean) / std)
    }

    pub fn destandardize(&self, j: usize, z: f64) -> Result<f64> {
        let (mean, std) = self.continuous_stats(j)?;
        Ok(z * std + mean)
    }

    /// Encode column j of the table as an `[n, e_j + 1]` constant tensor.
    /// Masked entries have zeroed value slots and a 1 in the mask channel;
    /// everything the model sees of a hidden value is that single bit.
    pub fn encode_column<T: Scalar>(
        &self,
        table: &DataTable,
        j: usize,
        mask: &MaskMatrix,
    ) -> Result<Tensor<T>> {
        let n = table.n();
        let width = self.encoded_width(j) + 1;
        let mut data = vec![T::ZERO; n * width];
        for i in 0..n {
            let slot = &mut data[i * width..(i + 1) * width];
            if mask.bit(i, j) {
                slot[width - 1] = T::ONE;
                continue;
            }
            match table.cell(i, j) {
                Cell::Num(v) => {
                    slot[0] = T::from_f64(self.standardize(j, *v)?);
                }
                Cell::Cat(label) => {
                    slot[self.cat_index(j, label)?] = T::ONE;
                }
                Cell::Missing => {
                    return Err(NptError::internal(format!(
                        "missing cell ({i}, {j}) reached the encoder unmasked"
                    )));
                }
            }
        }
        Tensor::from_vec(&[n, width], data)
    }
}

fn kind_row(kind: AttrKind) -> usize {
    match kind {
        AttrKind::Categorical => 0,
        AttrKind::Continuous => 1,
    }
}

/// Learned embedding weights plus the fitted schema they were built for.
#[derive(Clone)]
pub struct EmbedParams<T: Scalar = f32> {
    pub fitted: FittedSchema,
    pub e: usize,
    /// Per column: `[(e_j + 1), e]`.
    pub w_in: Vec<Tensor<T>>,
    /// Per column: `[e, e_j]`.
    pub w_out: Vec<Tensor<T>>,
    /// `[d, e]` learned index embeddings.
    pub h_index: Tensor<T>,
    /// `[2, e]` learned type embeddings (categorical row 0, continuous row 1).
    pub h_type: Tensor<T>,
}

impl<T: Scalar> EmbedParams<T> {
    pub fn init(fitted: FittedSchema, e: usize, rng: &mut DeterministicRng) -> Result<Self> {
        if e == 0 {
            return Err(NptError::config("embedding width e must be positive".to_string()));
        }
        let d = fitted.schema.d();
        let mut w_in = Vec::with_capacity(d);
        let mut w_out = Vec::with_capacity(d);
        for j in 0..d {
            let ej = fitted.encoded_width(j);
            w_in.push(glorot(ej + 1, e, rng)?);
            w_out.push(glorot(e, ej, rng)?);
        }
        Ok(EmbedParams {
            fitted,
            e,
            w_in,
            w_out,
            h_index: glorot(d, e, rng)?,
            h_type: glorot(2, e, rng)?,
        })
    }

    pub fn named(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for (j, t) in self.w_in.iter().enumerate() {
            out.push((format!("embed.win.{j}"), t.clone()));
        }
        for (j, t) in self.w_out.iter().enumerate() {
            out.push((format!("embed.wout.{j}"), t.clone()));
        }
        out.push(("embed.index".to_string(), self.h_index.clone()));
        out.push(("embed.type".to_string(), self.h_type.clone()));
        out
    }

    pub fn slots_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = Vec::new();
        out.extend(self.w_in.iter_mut());
        out.extend(self.w_out.iter_mut());
        out.push(&mut self.h_index);
        out.push(&mut self.h_type);
        out
    }
}

/// Build the `[n, d, e]` input representation: per column, encode, project
/// through `W_in_j`, and add that column's index and type embeddings.
pub fn input_embed<T: Scalar>(
    table: &DataTable,
    mask: &MaskMatrix,
    params: &EmbedParams<T>,
) -> Result<Tensor<T>> {
    let d = params.fitted.schema.d();
    if table.d() != d {
        return Err(NptError::shape(format!(
            "table has {} columns, embedding expects {d}",
            table.d()
        )));
    }
    let mut cols = Vec::with_capacity(d);
    for j in 0..d {
        let enc = params.fitted.encode_column::<T>(table, j, mask)?;
        let idx = params.h_index.select_axis(0, j)?;
        let ty = params
            .h_type
            .select_axis(0, kind_row(params.fitted.schema.columns[j].kind))?;
        let col = enc.matmul(&params.w_in[j])?.add_bias(&idx)?.add_bias(&ty)?;
        cols.push(col);
    }
    stack(&cols)?.permute(&[1, 0, 2])
}

/// Map the final `[n, d, e]` hidden state to per-column predictions
/// `Z_j = H_j · W_out_j`, one `[n, e_j]` tensor per column. The mask
/// channel is not predicted.
pub fn output_embed<T: Scalar>(h: &Tensor<T>, params: &EmbedParams<T>) -> Result<Vec<Tensor<T>>> {
    let d = params.fitted.schema.d();
    if h.rank() != 3 || h.shape()[1] != d || h.shape()[2] != params.e {
        return Err(NptError::shape(format!(
            "output embedding expects [n, {d}, {}], got {:?}",
            params.e,
            h.shape()
        )));
    }
    (0..d)
        .map(|j| h.select_axis(1, j)?.matmul(&params.w_out[j]))
        .collect()
}

/// Turn per-column predictions into table cells: argmax class (lowest
/// index wins ties) for categorical columns, de-standardized value for
/// continuous ones.
pub fn decode_predictions<T: Scalar>(
    z: &[Tensor<T>],
    fitted: &FittedSchema,
) -> Result<Vec<Vec<Cell>>> {
    let d = fitted.schema.d();
    if z.len() != d {
        return Err(NptError::shape(format!("{} prediction columns for {d} attributes", z.len())));
    }
    let n = z.first().map(|t| t.shape()[0]).unwrap_or(0);
    let mut rows = vec![Vec::with_capacity(d); n];
    for j in 0..d {
        let ej = fitted.encoded_width(j);
        if z[j].shape() != [n, ej] {
            return Err(NptError::shape(format!(
                "column {j} predictions are {:?}, expected [{n}, {ej}]",
                z[j].shape()
            )));
        }
        let data = z[j].data();
        for i in 0..n {
            let row = &data[i * ej..(i + 1) * ej];
            let cell = match &fitted.stats[j] {
                ColumnStats::Categorical { vocab } => {
                    let mut best = 0;
                    for (c, v) in row.iter().enumerate() {
                        if *v > row[best] {
                            best = c;
                        }
                    }
                    Cell::Cat(vocab[best].clone())
                }
                ColumnStats::Continuous { .. } => {
                    Cell::Num(fitted.destandardize(j, row[0].to_f64())?)
                }
            };
            rows[i].push(cell);
        }
    }
    Ok(rows)
}
