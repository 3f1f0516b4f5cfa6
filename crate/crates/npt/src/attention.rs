//! Multi-head self-attention, applied two ways: between datapoints (each
//! row of the dataset attends to every other row) and between attributes
//! (each datapoint's attributes attend to each other, batched over rows).
//!
//! A block computes, with LN the layer norm and rFF a two-layer GeLU net:
//!
//! ```text
//! Res(H)  = H·W_res + MHSelfAtt(LN(H))
//! out(H)  = Res(H) + rFF(LN(Res(H)))
//! ```
//!
//! Dropout (train mode only) hits the post-softmax attention weights, the
//! multi-head output projection, and the rFF hidden activations.

use crate::error::{NptError, Result};
use crate::rng::DeterministicRng;
use crate::tensor::{concat_last, dropout, Scalar, Tensor};
use crate::Mode;

/// Layer-norm epsilon used everywhere in the model.
pub const LN_EPS: f64 = 1e-5;

/// Weights of one attention block operating on width `width` with `heads`
/// heads. Per-head projections are `[width, width/heads]`.
#[derive(Clone)]
pub struct MhsaParams<T: Scalar = f32> {
    pub width: usize,
    pub heads: usize,
    pub w_q: Vec<Tensor<T>>,
    pub w_k: Vec<Tensor<T>>,
    pub w_v: Vec<Tensor<T>>,
    pub w_o: Tensor<T>,
    pub w_res: Tensor<T>,
    pub ln1_gain: Tensor<T>,
    pub ln1_bias: Tensor<T>,
    pub ln2_gain: Tensor<T>,
    pub ln2_bias: Tensor<T>,
    pub rff_w1: Tensor<T>,
    pub rff_b1: Tensor<T>,
    pub rff_w2: Tensor<T>,
    pub rff_b2: Tensor<T>,
}

pub(crate) fn glorot<T: Scalar>(
    rows: usize,
    cols: usize,
    rng: &mut DeterministicRng,
) -> Result<Tensor<T>> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| T::from_f64(rng.uniform_in(-limit, limit)))
        .collect();
    Tensor::param(&[rows, cols], data)
}

fn identity<T: Scalar>(n: usize) -> Result<Tensor<T>> {
    let mut data = vec![T::ZERO; n * n];
    for i in 0..n {
        data[i * n + i] = T::ONE;
    }
    Tensor::param(&[n, n], data)
}

impl<T: Scalar> MhsaParams<T> {
    /// Glorot-uniform projections, identity residual map, unit layer norms,
    /// zero biases. The rFF expands by 4x.
    pub fn init(width: usize, heads: usize, rng: &mut DeterministicRng) -> Result<Self> {
        if heads == 0 || width == 0 || width % heads != 0 {
            return Err(NptError::config(format!(
                "attention width {width} must be a positive multiple of heads {heads}"
            )));
        }
        let head_dim = width / heads;
        let proj = |rng: &mut DeterministicRng| -> Result<Vec<Tensor<T>>> {
            (0..heads).map(|_| glorot(width, head_dim, rng)).collect()
        };
        let w_q = proj(rng)?;
        // Keys start as a copy of the queries (still Glorot-distributed), so
        // q_i·k_j begins as a similarity kernel and rows with matching content
        // get the largest logits from the first step. The two matrices are
        // independent parameters and diverge freely during training.
        let w_k: Vec<Tensor<T>> = w_q
            .iter()
            .map(|q| Tensor::param(&q.shape().to_vec(), q.data().to_vec()))
            .collect::<Result<_>>()?;
        let w_v = proj(rng)?;
        let hidden = 4 * width;
        Ok(MhsaParams {
            width,
            heads,
            w_q,
            w_k,
            w_v,
            w_o: glorot(width, width, rng)?,
            w_res: identity(width)?,
            ln1_gain: Tensor::param(&[width], vec![T::ONE; width])?,
            ln1_bias: Tensor::param(&[width], vec![T::ZERO; width])?,
            ln2_gain: Tensor::param(&[width], vec![T::ONE; width])?,
            ln2_bias: Tensor::param(&[width], vec![T::ZERO; width])?,
            rff_w1: glorot(width, hidden, rng)?,
            rff_b1: Tensor::param(&[hidden], vec![T::ZERO; hidden])?,
            rff_w2: glorot(hidden, width, rng)?,
            rff_b2: Tensor::param(&[width], vec![T::ZERO; width])?,
        })
    }

    /// Stable (name, tensor) enumeration; checkpointing and the optimizer
    /// both rely on this order.
    pub fn named(&self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for (j, t) in self.w_q.iter().enumerate() {
            out.push((format!("{prefix}.wq.{j}"), t.clone()));
        }
        for (j, t) in self.w_k.iter().enumerate() {
            out.push((format!("{prefix}.wk.{j}"), t.clone()));
        }
        for (j, t) in self.w_v.iter().enumerate() {
            out.push((format!("{prefix}.wv.{j}"), t.clone()));
        }
        out.push((format!("{prefix}.wo"), self.w_o.clone()));
        out.push((format!("{prefix}.wres"), self.w_res.clone()));
        out.push((format!("{prefix}.ln1.gain"), self.ln1_gain.clone()));
        out.push((format!("{prefix}.ln1.bias"), self.ln1_bias.clone()));
        out.push((format!("{prefix}.ln2.gain"), self.ln2_gain.clone()));
        out.push((format!("{prefix}.ln2.bias"), self.ln2_bias.clone()));
        out.push((format!("{prefix}.rff.w1"), self.rff_w1.clone()));
        out.push((format!("{prefix}.rff.b1"), self.rff_b1.clone()));
        out.push((format!("{prefix}.rff.w2"), self.rff_w2.clone()));
        out.push((format!("{prefix}.rff.b2"), self.rff_b2.clone()));
        out
    }

    /// Mutable slots in the same order as [`MhsaParams::named`].
    pub fn slots_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = Vec::new();
        out.extend(self.w_q.iter_mut());
        out.extend(self.w_k.iter_mut());
        out.extend(self.w_v.iter_mut());
        out.push(&mut self.w_o);
        out.push(&mut self.w_res);
        out.push(&mut self.ln1_gain);
        out.push(&mut self.ln1_bias);
        out.push(&mut self.ln2_gain);
        out.push(&mut self.ln2_bias);
        out.push(&mut self.rff_w1);
        out.push(&mut self.rff_b1);
        out.push(&mut self.rff_w2);
        out.push(&mut self.rff_b2);
        out
    }
}

/// One attention matrix captured during a forward pass. For attention
/// between datapoints `batch == 1` and `rows == n`; for attention between
/// attributes there is one `rows x rows` matrix per datapoint.
#[derive(Debug, Clone)]
pub struct AttentionMap {
    pub layer: usize,
    pub head: usize,
    pub batch: usize,
    pub rows: usize,
    /// Row-stochastic weights, `batch * rows * rows` values, pre-dropout.
    pub weights: Vec<f64>,
}

#[derive(Debug, Default, Clone)]
pub struct AttentionMaps {
    pub maps: Vec<AttentionMap>,
}

/// Everything a block needs besides its weights: stochastic-layer state,
/// dropout rates, and the optional attention-map sink.
pub struct AttnContext<'a> {
    pub mode: Mode,
    pub attn_dropout: f64,
    pub hidden_dropout: f64,
    pub rng: &'a mut DeterministicRng,
    pub capture: Option<&'a mut AttentionMaps>,
    pub layer: usize,
}

impl<'a> AttnContext<'a> {
    pub fn eval(rng: &'a mut DeterministicRng) -> Self {
        AttnContext {
            mode: Mode::Eval,
            attn_dropout: 0.0,
            hidden_dropout: 0.0,
            rng,
            capture: None,
            layer: 0,
        }
    }
}

/// Scaled dot-product attention over the second-to-last axis. Leading axes
/// are batch dimensions. Returns the output and the pre-dropout weights.
pub fn dot_product_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    attn_dropout: f64,
    mode: Mode,
    rng: &mut DeterministicRng,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if q.rank() < 2 {
        return Err(NptError::shape("attention operands must have rank >= 2"));
    }
    let head_dim = *q.shape().last().unwrap();
    if head_dim == 0 {
        return Err(NptError::shape("attention head dim is 0"));
    }
    let scale = T::from_f64(1.0 / (head_dim as f64).sqrt());
    let scores = q.matmul(&k.transpose_last2()?)?.scale(scale);
    let weights = scores.softmax_last()?;
    let dropped = dropout(&weights, attn_dropout, mode, rng)?;
    let out = dropped.matmul(v)?;
    Ok((out, weights))
}

/// Multi-head self-attention: per-head projections, scaled dot-product
/// attention, concatenation, output projection, output dropout.
pub fn multi_head_self_attention<T: Scalar>(
    h: &Tensor<T>,
    params: &MhsaParams<T>,
    ctx: &mut AttnContext,
) -> Result<Tensor<T>> {
    if *h.shape().last().unwrap_or(&0) != params.width {
        return Err(NptError::shape(format!(
            "attention input {:?} does not end in width {}",
            h.shape(),
            params.width
        )));
    }
    let rank = h.rank();
    let rows = h.shape()[rank - 2];
    let batch: usize = h.shape()[..rank - 2].iter().product();
    let mut outs = Vec::with_capacity(params.heads);
    for j in 0..params.heads {
        let q = h.matmul(&params.w_q[j])?;
        let k = h.matmul(&params.w_k[j])?;
        let v = h.matmul(&params.w_v[j])?;
        let (out, weights) =
            dot_product_attention(&q, &k, &v, ctx.attn_dropout, ctx.mode, ctx.rng)?;
        if let Some(maps) = ctx.capture.as_deref_mut() {
            maps.maps.push(AttentionMap {
                layer: ctx.layer,
                head: j,
                batch,
                rows,
                weights: weights.data().iter().map(|w| w.to_f64()).collect(),
            });
        }
        outs.push(out);
    }
    let cat = concat_last(&outs)?;
    let proj = cat.matmul(&params.w_o)?;
    dropout(&proj, ctx.hidden_dropout, ctx.mode, ctx.rng)
}

/// Full pre-norm block: residual attention sublayer plus residual rFF
/// sublayer. Works on `[.., m, width]` with any number of batch axes.
pub fn mhsa_block<T: Scalar>(
    h: &Tensor<T>,
    params: &MhsaParams<T>,
    ctx: &mut AttnContext,
) -> Result<Tensor<T>> {
    let normed = h.layer_norm(&params.ln1_gain, &params.ln1_bias, LN_EPS)?;
    let att = multi_head_self_attention(&normed, params, ctx)?;
    let res = h.matmul(&params.w_res)?.add(&att)?;

    let normed2 = res.layer_norm(&params.ln2_gain, &params.ln2_bias, LN_EPS)?;
    let hidden = normed2.matmul(&params.rff_w1)?.add_bias(&params.rff_b1)?.gelu();
    let hidden = dropout(&hidden, ctx.hidden_dropout, ctx.mode, ctx.rng)?;
    let ff = hidden.matmul(&params.rff_w2)?.add_bias(&params.rff_b2)?;
    res.add(&ff)
}

/// Attention between datapoints: flattens `[n, d, e]` to `[n, d*e]` so every
/// row attends to every other row, then restores the shape.
pub fn abd<T: Scalar>(
    h: &Tensor<T>,
    params: &MhsaParams<T>,
    ctx: &mut AttnContext,
) -> Result<Tensor<T>> {
    if h.rank() != 3 {
        return Err(NptError::shape(format!(
            "between-datapoint attention expects [n, d, e], got {:?}",
            h.shape()
        )));
    }
    let (n, d, e) = (h.shape()[0], h.shape()[1], h.shape()[2]);
    if d * e != params.width {
        return Err(NptError::shape(format!(
            "flattened width {} does not match block width {}",
            d * e,
            params.width
        )));
    }
    let flat = h.reshape(&[n, d * e])?;
    let out = mhsa_block(&flat, params, ctx)?;
    out.reshape(&[n, d, e])
}

/// Attention between attributes: each datapoint's `[d, e]` slice runs the
/// block independently, batched over the n rows. No information crosses
/// rows here.
pub fn aba<T: Scalar>(
    h: &Tensor<T>,
    params: &MhsaParams<T>,
    ctx: &mut AttnContext,
) -> Result<Tensor<T>> {
    if h.rank() != 3 {
        return Err(NptError::shape(format!(
            "between-attribute attention expects [n, d, e], got {:?}",
            h.shape()
        )));
    }
    if h.shape()[2] != params.width {
        return Err(NptError::shape(format!(
            "embedding width {} does not match block width {}",
            h.shape()[2],
            params.width
        )));
    }
    mhsa_block(h, params, ctx)
}

/// Write captured maps as CSV, one file `attention_l{layer}_h{head}.csv`
/// per (layer, head). Columns are `batch,row,k0..k{rows-1}`; each data row
/// is one row-stochastic attention row, so the k-columns sum to 1. Row
/// and column indices are datapoints in between-datapoint layers and
/// attributes in between-attribute layers.
pub fn write_attention_csvs(
    maps: &AttentionMaps,
    dir: &std::path::Path,
) -> Result<Vec<std::path::PathBuf>> {
    use std::collections::BTreeMap;
    use std::io::Write;

    let mut groups: BTreeMap<(usize, usize), Vec<&AttentionMap>> = BTreeMap::new();
    for map in &maps.maps {
        groups.entry((map.layer, map.head)).or_default().push(map);
    }
    let mut written = Vec::with_capacity(groups.len());
    for ((layer, head), group) in groups {
        let path = dir.join(format!("attention_l{layer}_h{head}.csv"));
        let mut file = std::io::BufWriter::new(std::fs::File::create(&path)?);
        let rows = group[0].rows;
        write!(file, "batch,row")?;
        for k in 0..rows {
            write!(file, ",k{k}")?;
        }
        writeln!(file)?;
        for map in group {
            if map.rows != rows {
                return Err(NptError::internal(format!(
                    "layer {layer} head {head} mixes map sizes {} and {rows}",
                    map.rows
                )));
            }
            for b in 0..map.batch {
                for r in 0..rows {
                    write!(file, "{b},{r}")?;
                    let base = (b * rows + r) * rows;
                    for k in 0..rows {
                        write!(file, ",{}", map.weights[base + k])?;
                    }
                    writeln!(file)?;
                }
            }
        }
        file.flush()?;
        written.push(path);
    }
    Ok(written)
}
