//! Forward operations. Each op validates shapes, computes its output
//! buffer, and records an [`Op`] node for the backward sweep.
//!
//! Matrix multiplication treats leading axes as batch dimensions: the
//! left operand is `[batch.., m, k]` and the right is either a shared
//! `[k, p]` matrix or a `[batch.., k, p]` stack. Output elements are
//! each produced by exactly one thread, so results are bitwise
//! independent of the worker count.

use rayon::prelude::*;

use super::{strides, Op, Scalar, Tensor};
use crate::error::{NptError, Result};
use crate::rng::DeterministicRng;
use crate::Mode;

/// Below this many scalar multiply-adds the rayon dispatch overhead wins.
const PAR_WORK_THRESHOLD: usize = 1 << 21;

fn par_rows<T, F>(out: &mut [T], row_len: usize, work_per_row: usize, f: F)
where
    T: Scalar,
    F: Fn(usize, &mut [T]) + Sync,
{
    if row_len == 0 || out.is_empty() {
        return;
    }
    let rows = out.len() / row_len;
    if rows > 1 && rows.saturating_mul(work_per_row) >= PAR_WORK_THRESHOLD {
        out.par_chunks_mut(row_len)
            .enumerate()
            .for_each(|(r, chunk)| f(r, chunk));
    } else {
        for (r, chunk) in out.chunks_mut(row_len).enumerate() {
            f(r, chunk);
        }
    }
}

/// C[b] = A[b] · B[b], with `B` shared across batches when `shared_b`.
pub(crate) fn mm_nn<T: Scalar>(
    a: &[T],
    b: &[T],
    batch: usize,
    m: usize,
    k: usize,
    p: usize,
    shared_b: bool,
) -> Vec<T> {
    let mut out = vec![T::ZERO; batch * m * p];
    par_rows(&mut out, p, k, |row, c| {
        let bi = row / m;
        let a_row = &a[row * k..(row + 1) * k];
        let b_base = if shared_b { 0 } else { bi * k * p };
        for (l, &av) in a_row.iter().enumerate() {
            if av == T::ZERO {
                continue;
            }
            let b_row = &b[b_base + l * p..b_base + (l + 1) * p];
            for (cj, &bj) in c.iter_mut().zip(b_row) {
                *cj += av * bj;
            }
        }
    });
    out
}

/// C[b] = A[b] · B[b]ᵀ where A is `[batch, m, p]` and B is `[batch|1, k, p]`.
pub(crate) fn mm_nt<T: Scalar>(
    a: &[T],
    b: &[T],
    batch: usize,
    m: usize,
    p: usize,
    k: usize,
    shared_b: bool,
) -> Vec<T> {
    let mut out = vec![T::ZERO; batch * m * k];
    par_rows(&mut out, k, p, |row, c| {
        let bi = row / m;
        let a_row = &a[row * p..(row + 1) * p];
        let b_base = if shared_b { 0 } else { bi * k * p };
        for (l, cl) in c.iter_mut().enumerate() {
            let b_row = &b[b_base + l * p..b_base + (l + 1) * p];
            let mut acc = T::ZERO;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            *cl = acc;
        }
    });
    out
}

/// C[b] = A[b]ᵀ · G[b] where A is `[batch, m, k]` and G is `[batch, m, p]`.
/// With `sum_batches` the per-batch products are summed into one `[k, p]`.
pub(crate) fn mm_tn<T: Scalar>(
    a: &[T],
    g: &[T],
    batch: usize,
    m: usize,
    k: usize,
    p: usize,
    sum_batches: bool,
) -> Vec<T> {
    let out_batches = if sum_batches { 1 } else { batch };
    let mut out = vec![T::ZERO; out_batches * k * p];
    par_rows(&mut out, p, m * if sum_batches { batch } else { 1 }, |row, c| {
        let (b_range, l) = if sum_batches {
            (0..batch, row)
        } else {
            (row / k..row / k + 1, row % k)
        };
        for bi in b_range {
            for i in 0..m {
                let av = a[(bi * m + i) * k + l];
                if av == T::ZERO {
                    continue;
                }
                let g_row = &g[(bi * m + i) * p..(bi * m + i + 1) * p];
                for (cj, &gj) in c.iter_mut().zip(g_row) {
                    *cj += av * gj;
                }
            }
        }
    });
    out
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(NptError::shape(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

impl<T: Scalar> Tensor<T> {
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape(self, other, "add")?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::Add,
            vec![self.clone(), other.clone()],
        ))
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape(self, other, "sub")?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a - b)
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::Sub,
            vec![self.clone(), other.clone()],
        ))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape(self, other, "mul")?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a * b)
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::Mul,
            vec![self.clone(), other.clone()],
        ))
    }

    pub fn scale(&self, c: T) -> Tensor<T> {
        let data = self.data().iter().map(|&a| a * c).collect();
        Tensor::from_op(self.shape().to_vec(), data, Op::Scale(c), vec![self.clone()])
    }

    /// Adds a rank-1 `[h]` vector to every `h`-length row of `self`.
    pub fn add_bias(&self, bias: &Tensor<T>) -> Result<Tensor<T>> {
        let h = *self.shape().last().ok_or_else(|| {
            NptError::shape("add_bias: operand has rank 0".to_string())
        })?;
        if bias.rank() != 1 || bias.shape()[0] != h {
            return Err(NptError::shape(format!(
                "add_bias: bias shape {:?} does not match last dim {h}",
                bias.shape()
            )));
        }
        let bdata = bias.data();
        let data = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, &a)| a + bdata[i % h])
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::AddBias,
            vec![self.clone(), bias.clone()],
        ))
    }

    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let ar = self.rank();
        let br = other.rank();
        if ar < 2 || br < 2 {
            return Err(NptError::shape(format!(
                "matmul: ranks {ar} and {br}, both must be >= 2"
            )));
        }
        let (m, k) = (self.shape()[ar - 2], self.shape()[ar - 1]);
        let (k2, p) = (other.shape()[br - 2], other.shape()[br - 1]);
        if k != k2 {
            return Err(NptError::shape(format!(
                "matmul: inner dims {k} and {k2} differ ({:?} x {:?})",
                self.shape(),
                other.shape()
            )));
        }
        let batch_dims = &self.shape()[..ar - 2];
        if br != 2 && &other.shape()[..br - 2] != batch_dims {
            return Err(NptError::shape(format!(
                "matmul: batch dims {:?} and {:?} differ",
                batch_dims,
                &other.shape()[..br - 2]
            )));
        }
        let batch: usize = batch_dims.iter().product();
        let data = mm_nn(self.data(), other.data(), batch, m, k, p, br == 2);
        let mut shape = batch_dims.to_vec();
        shape.push(m);
        shape.push(p);
        Ok(Tensor::from_op(
            shape,
            data,
            Op::Matmul,
            vec![self.clone(), other.clone()],
        ))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Tensor<T>> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&d| d >= rank || std::mem::replace(&mut seen[d], true)) {
            return Err(NptError::shape(format!(
                "permute: {:?} is not a permutation of 0..{rank}",
                perm
            )));
        }
        let in_strides = strides(self.shape());
        let out_shape: Vec<usize> = perm.iter().map(|&d| self.shape()[d]).collect();
        let step: Vec<usize> = perm.iter().map(|&d| in_strides[d]).collect();
        let numel = self.numel();
        let mut out = vec![T::ZERO; numel];
        let src = self.data();
        let mut midx = vec![0usize; rank];
        let mut in_flat = 0usize;
        for slot in out.iter_mut() {
            *slot = src[in_flat];
            for d in (0..rank).rev() {
                midx[d] += 1;
                in_flat += step[d];
                if midx[d] < out_shape[d] {
                    break;
                }
                in_flat -= step[d] * out_shape[d];
                midx[d] = 0;
            }
        }
        Ok(Tensor::from_op(
            out_shape,
            out,
            Op::Permute(perm.to_vec()),
            vec![self.clone()],
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&self) -> Result<Tensor<T>> {
        let rank = self.rank();
        if rank < 2 {
            return Err(NptError::shape("transpose_last2: rank < 2".to_string()));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(&perm)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(NptError::shape(format!(
                "reshape: {:?} -> {:?} changes element count",
                self.shape(),
                shape
            )));
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.data().to_vec(),
            Op::Reshape,
            vec![self.clone()],
        ))
    }

    /// Extracts the subtensor at `index` along `axis`, dropping that axis.
    pub fn select_axis(&self, axis: usize, index: usize) -> Result<Tensor<T>> {
        if axis >= self.rank() {
            return Err(NptError::shape(format!(
                "select_axis: axis {axis} out of range for rank {}",
                self.rank()
            )));
        }
        let len = self.shape()[axis];
        if index >= len {
            return Err(NptError::shape(format!(
                "select_axis: index {index} out of range for axis of length {len}"
            )));
        }
        let pre: usize = self.shape()[..axis].iter().product();
        let post: usize = self.shape()[axis + 1..].iter().product();
        let src = self.data();
        let mut out = Vec::with_capacity(pre * post);
        for pi in 0..pre {
            let base = (pi * len + index) * post;
            out.extend_from_slice(&src[base..base + post]);
        }
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        Ok(Tensor::from_op(
            shape,
            out,
            Op::SelectAxis { axis, index },
            vec![self.clone()],
        ))
    }

    /// Softmax over the last axis, stabilized by max subtraction.
    pub fn softmax_last(&self) -> Result<Tensor<T>> {
        let h = *self
            .shape()
            .last()
            .ok_or_else(|| NptError::shape("softmax_last: rank 0".to_string()))?;
        if h == 0 {
            return Err(NptError::shape("softmax_last: empty last axis".to_string()));
        }
        let mut out = self.data().to_vec();
        par_rows(&mut out, h, 4 * h, |_, row| {
            let mut mx = row[0];
            for &v in row.iter() {
                mx = mx.maxs(v);
            }
            let mut sum = T::ZERO;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v = *v / sum;
            }
        });
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            Op::SoftmaxLast,
            vec![self.clone()],
        ))
    }

    /// Log-softmax over the last axis; numerically safe for small probabilities.
    pub fn log_softmax_last(&self) -> Result<Tensor<T>> {
        let h = *self
            .shape()
            .last()
            .ok_or_else(|| NptError::shape("log_softmax_last: rank 0".to_string()))?;
        if h == 0 {
            return Err(NptError::shape(
                "log_softmax_last: empty last axis".to_string(),
            ));
        }
        let mut out = self.data().to_vec();
        par_rows(&mut out, h, 4 * h, |_, row| {
            let mut mx = row[0];
            for &v in row.iter() {
                mx = mx.maxs(v);
            }
            let mut sum = T::ZERO;
            for &v in row.iter() {
                sum += (v - mx).exp();
            }
            let log_z = mx + sum.ln();
            for v in row.iter_mut() {
                *v = *v - log_z;
            }
        });
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            Op::LogSoftmaxLast,
            vec![self.clone()],
        ))
    }

    /// Normalizes each row of the last axis to zero mean and unit variance
    /// (biased estimator), then applies a learnable gain and bias.
    pub fn layer_norm(&self, gain: &Tensor<T>, bias: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
        let h = *self
            .shape()
            .last()
            .ok_or_else(|| NptError::shape("layer_norm: rank 0".to_string()))?;
        if gain.rank() != 1 || gain.shape()[0] != h || bias.rank() != 1 || bias.shape()[0] != h {
            return Err(NptError::shape(format!(
                "layer_norm: gain {:?} / bias {:?} do not match last dim {h}",
                gain.shape(),
                bias.shape()
            )));
        }
        if !(eps >= 0.0) {
            return Err(NptError::config(format!("layer_norm: eps {eps} < 0")));
        }
        let gd = gain.data();
        let bd = bias.data();
        let inv_h = T::from_f64(1.0 / h as f64);
        let eps_t = T::from_f64(eps);
        let mut out = self.data().to_vec();
        par_rows(&mut out, h, 6 * h, |_, row| {
            let mut mean = T::ZERO;
            for &v in row.iter() {
                mean += v;
            }
            mean *= inv_h;
            let mut var = T::ZERO;
            for &v in row.iter() {
                let d = v - mean;
                var += d * d;
            }
            var *= inv_h;
            let inv_std = T::ONE / (var + eps_t).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = gd[j] * ((*v - mean) * inv_std) + bd[j];
            }
        });
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            Op::LayerNorm { eps },
            vec![self.clone(), gain.clone(), bias.clone()],
        ))
    }

    /// Exact GeLU, `x * Phi(x)` with `Phi` the standard normal CDF via erf.
    pub fn gelu(&self) -> Tensor<T> {
        let half = T::from_f64(0.5);
        let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
        let data = self
            .data()
            .iter()
            .map(|&x| half * x * (T::ONE + (x * inv_sqrt2).erf()))
            .collect();
        Tensor::from_op(self.shape().to_vec(), data, Op::Gelu, vec![self.clone()])
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum_all(&self) -> Tensor<T> {
        let mut acc = T::ZERO;
        for &v in self.data() {
            acc += v;
        }
        Tensor::from_op(vec![1], vec![acc], Op::SumAll, vec![self.clone()])
    }
}

/// Concatenates along the last axis; all other axes must agree.
pub fn concat_last<T: Scalar>(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
    if parts.is_empty() {
        return Err(NptError::shape("concat_last: no parts".to_string()));
    }
    let rank = parts[0].rank();
    if rank == 0 {
        return Err(NptError::shape("concat_last: rank 0 parts".to_string()));
    }
    let lead = &parts[0].shape()[..rank - 1];
    let mut total_h = 0;
    for p in parts {
        if p.rank() != rank || &p.shape()[..rank - 1] != lead {
            return Err(NptError::shape(format!(
                "concat_last: incompatible shapes {:?} and {:?}",
                parts[0].shape(),
                p.shape()
            )));
        }
        total_h += p.shape()[rank - 1];
    }
    let rows: usize = lead.iter().product();
    let mut out = Vec::with_capacity(rows * total_h);
    for r in 0..rows {
        for p in parts {
            let h = p.shape()[rank - 1];
            out.extend_from_slice(&p.data()[r * h..(r + 1) * h]);
        }
    }
    let mut shape = lead.to_vec();
    shape.push(total_h);
    Ok(Tensor::from_op(shape, out, Op::ConcatLast, parts.to_vec()))
}

/// Stacks equally shaped tensors along a new leading axis.
pub fn stack<T: Scalar>(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
    if parts.is_empty() {
        return Err(NptError::shape("stack: no parts".to_string()));
    }
    let item_shape = parts[0].shape().to_vec();
    let mut out = Vec::with_capacity(parts.len() * parts[0].numel());
    for p in parts {
        if p.shape() != item_shape.as_slice() {
            return Err(NptError::shape(format!(
                "stack: incompatible shapes {:?} and {:?}",
                item_shape,
                p.shape()
            )));
        }
        out.extend_from_slice(p.data());
    }
    let mut shape = vec![parts.len()];
    shape.extend_from_slice(&item_shape);
    Ok(Tensor::from_op(shape, out, Op::Stack, parts.to_vec()))
}

/// Inverted dropout: keeps each element with probability `1 - p` and scales
/// survivors by `1/(1 - p)`, so activations keep their expectation. Identity
/// in eval mode and at `p = 0`.
pub fn dropout<T: Scalar>(
    x: &Tensor<T>,
    p: f64,
    mode: Mode,
    rng: &mut DeterministicRng,
) -> Result<Tensor<T>> {
    if !(0.0..1.0).contains(&p) {
        return Err(NptError::config(format!("dropout rate {p} outside [0, 1)")));
    }
    if mode == Mode::Eval || p == 0.0 {
        return Ok(x.clone());
    }
    let keep_scale = T::from_f64(1.0 / (1.0 - p));
    let mask: Vec<T> = (0..x.numel())
        .map(|_| {
            if rng.bernoulli(p) {
                T::ZERO
            } else {
                keep_scale
            }
        })
        .collect();
    let mask = Tensor::from_vec(x.shape(), mask)?;
    x.mul(&mask)
}
