//! Reverse sweep: topological ordering plus one vector-Jacobian product
//! per recorded op. Gradients accumulate additively, so a tensor used in
//! several places receives the sum of all its downstream contributions.

use std::collections::HashSet;

use super::ops::{mm_nt, mm_tn};
use super::{strides, Node, Op, Scalar, Tensor};
use crate::error::{NptError, Result};

impl<T: Scalar> Tensor<T> {
    /// Backpropagates from a single-element loss. Populates `grad` on every
    /// reachable tensor created with [`Tensor::param`]. Running backward a
    /// second time through any already-swept node is an error; call
    /// [`Tensor::clear_grad`] on the leaves (or rebuild the graph) first.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(NptError::shape(format!(
                "backward: loss must be a single element, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            // No trainable tensor upstream; all gradients stay zero.
            return Ok(());
        }
        let order = topo_order(self);
        if let Some(hit) = order.iter().find(|t| t.node().swept().get()) {
            return Err(NptError::internal(format!(
                "backward: graph through tensor {} was already backpropagated; \
                 clear gradients before reusing it",
                hit.id()
            )));
        }
        for t in &order {
            t.node().swept().set(true);
        }
        self.accumulate_grad(&[T::ONE]);
        for t in order.iter().rev() {
            let node = t.node();
            if node.op().is_none() {
                continue;
            }
            let slot = node.grad_slot().borrow();
            let Some(g) = slot.as_ref() else { continue };
            apply_vjp(node, g)?;
        }
        Ok(())
    }
}

/// Parents-before-children order over the subgraph that requires gradients.
fn topo_order<T: Scalar>(root: &Tensor<T>) -> Vec<Tensor<T>> {
    let mut order = Vec::new();
    let mut visited = HashSet::new();
    let mut stack = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !visited.insert(t.id()) {
            continue;
        }
        stack.push((t.clone(), true));
        for p in t.node().parents() {
            if p.requires_grad() && !visited.contains(&p.id()) {
                stack.push((p.clone(), false));
            }
        }
    }
    order
}

fn acc<T: Scalar>(parent: &Tensor<T>, contribution: &[T]) {
    if parent.requires_grad() {
        parent.accumulate_grad(contribution);
    }
}

fn apply_vjp<T: Scalar>(node: &Node<T>, g: &[T]) -> Result<()> {
    let parents = node.parents();
    match node.op().expect("apply_vjp on leaf") {
        Op::Add => {
            acc(&parents[0], g);
            acc(&parents[1], g);
        }
        Op::Sub => {
            acc(&parents[0], g);
            if parents[1].requires_grad() {
                let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                parents[1].accumulate_grad(&neg);
            }
        }
        Op::Mul => {
            if parents[0].requires_grad() {
                let da: Vec<T> = g
                    .iter()
                    .zip(parents[1].data())
                    .map(|(&gi, &b)| gi * b)
                    .collect();
                parents[0].accumulate_grad(&da);
            }
            if parents[1].requires_grad() {
                let db: Vec<T> = g
                    .iter()
                    .zip(parents[0].data())
                    .map(|(&gi, &a)| gi * a)
                    .collect();
                parents[1].accumulate_grad(&db);
            }
        }
        Op::Scale(c) => {
            if parents[0].requires_grad() {
                let da: Vec<T> = g.iter().map(|&v| v * *c).collect();
                parents[0].accumulate_grad(&da);
            }
        }
        Op::AddBias => {
            acc(&parents[0], g);
            if parents[1].requires_grad() {
                let h = parents[1].numel();
                let mut db = vec![T::ZERO; h];
                for (i, &gi) in g.iter().enumerate() {
                    db[i % h] += gi;
                }
                parents[1].accumulate_grad(&db);
            }
        }
        Op::Matmul => {
            let a = &parents[0];
            let b = &parents[1];
            let ar = a.rank();
            let (m, k) = (a.shape()[ar - 2], a.shape()[ar - 1]);
            let p = *b.shape().last().unwrap();
            let batch: usize = a.shape()[..ar - 2].iter().product();
            let shared_b = b.rank() == 2;
            if a.requires_grad() {
                let da = mm_nt(g, b.data(), batch, m, p, k, shared_b);
                a.accumulate_grad(&da);
            }
            if b.requires_grad() {
                let db = mm_tn(a.data(), g, batch, m, k, p, shared_b);
                b.accumulate_grad(&db);
            }
        }
        Op::Permute(perm) => {
            if parents[0].requires_grad() {
                let mut inverse = vec![0usize; perm.len()];
                for (i, &d) in perm.iter().enumerate() {
                    inverse[d] = i;
                }
                let da = permute_raw(g, node.shape(), &inverse);
                parents[0].accumulate_grad(&da);
            }
        }
        Op::Reshape => acc(&parents[0], g),
        Op::ConcatLast => {
            let total_h = *node.shape().last().unwrap();
            let rows = node.data().len() / total_h;
            let mut offset = 0;
            for part in parents {
                let h = *part.shape().last().unwrap();
                if part.requires_grad() {
                    let mut dp = Vec::with_capacity(rows * h);
                    for r in 0..rows {
                        dp.extend_from_slice(&g[r * total_h + offset..r * total_h + offset + h]);
                    }
                    part.accumulate_grad(&dp);
                }
                offset += h;
            }
        }
        Op::Stack => {
            let item = if parents.is_empty() {
                0
            } else {
                parents[0].numel()
            };
            for (i, part) in parents.iter().enumerate() {
                if part.requires_grad() {
                    part.accumulate_grad(&g[i * item..(i + 1) * item]);
                }
            }
        }
        Op::SelectAxis { axis, index } => {
            if parents[0].requires_grad() {
                let pshape = parents[0].shape();
                let len = pshape[*axis];
                let pre: usize = pshape[..*axis].iter().product();
                let post: usize = pshape[*axis + 1..].iter().product();
                let mut da = vec![T::ZERO; parents[0].numel()];
                for pi in 0..pre {
                    let dst = (pi * len + index) * post;
                    da[dst..dst + post].copy_from_slice(&g[pi * post..(pi + 1) * post]);
                }
                parents[0].accumulate_grad(&da);
            }
        }
        Op::SoftmaxLast => {
            if parents[0].requires_grad() {
                let h = *node.shape().last().unwrap();
                let y = node.data();
                let mut da = vec![T::ZERO; y.len()];
                for r in 0..y.len() / h {
                    let ys = &y[r * h..(r + 1) * h];
                    let gs = &g[r * h..(r + 1) * h];
                    let mut dot = T::ZERO;
                    for (&yv, &gv) in ys.iter().zip(gs) {
                        dot += yv * gv;
                    }
                    for (o, (&yv, &gv)) in da[r * h..(r + 1) * h].iter_mut().zip(ys.iter().zip(gs))
                    {
                        *o = yv * (gv - dot);
                    }
                }
                parents[0].accumulate_grad(&da);
            }
        }
        Op::LogSoftmaxLast => {
            if parents[0].requires_grad() {
                let h = *node.shape().last().unwrap();
                let y = node.data();
                let mut da = vec![T::ZERO; y.len()];
                for r in 0..y.len() / h {
                    let ys = &y[r * h..(r + 1) * h];
                    let gs = &g[r * h..(r + 1) * h];
                    let mut gsum = T::ZERO;
                    for &gv in gs {
                        gsum += gv;
                    }
                    for (o, (&yv, &gv)) in da[r * h..(r + 1) * h].iter_mut().zip(ys.iter().zip(gs))
                    {
                        *o = gv - yv.exp() * gsum;
                    }
                }
                parents[0].accumulate_grad(&da);
            }
        }
        Op::LayerNorm { eps } => {
            let x = &parents[0];
            let gain = &parents[1];
            let bias = &parents[2];
            let h = *node.shape().last().unwrap();
            let rows = x.numel() / h;
            let inv_h = T::from_f64(1.0 / h as f64);
            let eps_t = T::from_f64(*eps);
            let xd = x.data();
            let gaind = gain.data();
            let mut dx = vec![T::ZERO; x.numel()];
            let mut dgain = vec![T::ZERO; h];
            let mut dbias = vec![T::ZERO; h];
            let mut xhat = vec![T::ZERO; h];
            for r in 0..rows {
                let xs = &xd[r * h..(r + 1) * h];
                let gs = &g[r * h..(r + 1) * h];
                let mut mean = T::ZERO;
                for &v in xs {
                    mean += v;
                }
                mean *= inv_h;
                let mut var = T::ZERO;
                for &v in xs {
                    let d = v - mean;
                    var += d * d;
                }
                var *= inv_h;
                let inv_std = T::ONE / (var + eps_t).sqrt();
                for (j, o) in xhat.iter_mut().enumerate() {
                    *o = (xs[j] - mean) * inv_std;
                }
                let mut gh_mean = T::ZERO;
                let mut ghx_mean = T::ZERO;
                for j in 0..h {
                    let gh = gs[j] * gaind[j];
                    gh_mean += gh;
                    ghx_mean += gh * xhat[j];
                    dgain[j] += gs[j] * xhat[j];
                    dbias[j] += gs[j];
                }
                gh_mean *= inv_h;
                ghx_mean *= inv_h;
                for j in 0..h {
                    let gh = gs[j] * gaind[j];
                    dx[r * h + j] = inv_std * (gh - gh_mean - xhat[j] * ghx_mean);
                }
            }
            acc(x, &dx);
            acc(gain, &dgain);
            acc(bias, &dbias);
        }
        Op::Gelu => {
            if parents[0].requires_grad() {
                let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
                let inv_sqrt_2pi = T::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
                let half = T::from_f64(0.5);
                let da: Vec<T> = parents[0]
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&x, &gv)| {
                        let cdf = half * (T::ONE + (x * inv_sqrt2).erf());
                        let pdf = inv_sqrt_2pi * (-half * x * x).exp();
                        gv * (cdf + x * pdf)
                    })
                    .collect();
                parents[0].accumulate_grad(&da);
            }
        }
        Op::SumAll => {
            if parents[0].requires_grad() {
                let da = vec![g[0]; parents[0].numel()];
                parents[0].accumulate_grad(&da);
            }
        }
    }
    Ok(())
}

/// Rearranges `src` (row-major, `shape`) by `perm`; used for the permute vjp.
fn permute_raw<T: Scalar>(src: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&d| shape[d]).collect();
    let step: Vec<usize> = perm.iter().map(|&d| in_strides[d]).collect();
    let rank = out_shape.len();
    let mut out = vec![T::ZERO; src.len()];
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
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops::dropout;
    use crate::tensor::{concat_last, stack};
    use crate::Mode;

    #[test]
    fn product_gradients_cross() {
        let a = Tensor::param(&[2], vec![2.0f64, 3.0]).unwrap();
        let b = Tensor::param(&[2], vec![5.0f64, 7.0]).unwrap();
        let loss = a.mul(&b).unwrap().sum_all();
        loss.backward().unwrap();
        assert_eq!(a.grad(), vec![5.0, 7.0]);
        assert_eq!(b.grad(), vec![2.0, 3.0]);
    }

    #[test]
    fn fan_out_gradients_accumulate() {
        let a = Tensor::param(&[3], vec![1.0f64, -2.0, 0.5]).unwrap();
        // loss = sum(a*a): gradient must be 2a, one contribution per use.
        let loss = a.mul(&a).unwrap().sum_all();
        loss.backward().unwrap();
        assert_eq!(a.grad(), vec![2.0, -4.0, 1.0]);
    }

    #[test]
    fn matmul_chain_rule_frozen() {
        // loss = sum(A @ B); dA = ones @ B^T, dB = A^T @ ones.
        let a = Tensor::param(&[2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::param(&[2, 2], vec![5.0f64, 6.0, 7.0, 8.0]).unwrap();
        let loss = a.matmul(&b).unwrap().sum_all();
        loss.backward().unwrap();
        assert_eq!(a.grad(), vec![11.0, 15.0, 11.0, 15.0]);
        assert_eq!(b.grad(), vec![4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn unreachable_tensors_have_zero_grad() {
        let a = Tensor::param(&[2], vec![1.0f64, 1.0]).unwrap();
        let orphan = Tensor::param(&[2], vec![9.0f64, 9.0]).unwrap();
        let loss = a.sum_all();
        loss.backward().unwrap();
        assert_eq!(orphan.grad(), vec![0.0, 0.0]);
        assert!(!orphan.has_grad());
    }

    #[test]
    fn repeated_backward_is_error_until_cleared() {
        let a = Tensor::param(&[1], vec![3.0f64]).unwrap();
        let loss = a.scale(2.0).sum_all();
        loss.backward().unwrap();
        let err = loss.backward().unwrap_err();
        assert!(err.to_string().contains("already backpropagated"), "{err}");

        // A second graph over the same (still swept) leaf is also an error.
        let loss2 = a.scale(4.0).sum_all();
        assert!(loss2.backward().is_err());

        // After clearing the leaf, a fresh graph works again.
        a.clear_grad();
        let loss3 = a.scale(4.0).sum_all();
        loss3.backward().unwrap();
        assert_eq!(a.grad(), vec![4.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let a = Tensor::param(&[2], vec![1.0f64, 2.0]).unwrap();
        let y = a.scale(1.0);
        assert!(y.backward().is_err());
    }

    #[test]
    fn backward_through_constant_graph_is_noop() {
        let c = Tensor::from_vec(&[2], vec![1.0f64, 2.0]).unwrap();
        let loss = c.sum_all();
        loss.backward().unwrap();
        assert!(!c.has_grad());
    }

    #[test]
    fn structural_op_gradients_route_correctly() {
        let a = Tensor::param(&[2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::param(&[2, 1], vec![10.0f64, 20.0]).unwrap();
        let cat = concat_last(&[a.clone(), b.clone()]).unwrap(); // [[1,2,10],[3,4,20]]
        let picked = cat.select_axis(1, 1).unwrap(); // column 1: [2, 4]
        assert_eq!(picked.data(), &[2.0, 4.0]);
        let loss = picked.sum_all();
        loss.backward().unwrap();
        assert_eq!(a.grad(), vec![0.0, 1.0, 0.0, 1.0]);
        assert_eq!(b.grad(), vec![0.0, 0.0]);
    }

    #[test]
    fn stack_and_permute_gradients_round_trip() {
        let a = Tensor::param(&[2, 3], vec![0.0f64; 6]).unwrap();
        let b = Tensor::param(&[2, 3], vec![0.0f64; 6]).unwrap();
        let s = stack(&[a.clone(), b.clone()]).unwrap(); // [2, 2, 3]
        let p = s.permute(&[1, 0, 2]).unwrap(); // [2, 2, 3] swapped
        let w = Tensor::from_vec(&[2, 2, 3], (1..=12).map(f64::from).collect()).unwrap();
        let loss = p.mul(&w).unwrap().sum_all();
        loss.backward().unwrap();
        // p[i, 0, :] came from a's row i, p[i, 1, :] from b's row i.
        assert_eq!(a.grad(), vec![1.0, 2.0, 3.0, 7.0, 8.0, 9.0]);
        assert_eq!(b.grad(), vec![4.0, 5.0, 6.0, 10.0, 11.0, 12.0]);
    }

    #[test]
    fn dropout_gradient_uses_scaled_mask() {
        let mut rng = crate::rng::DeterministicRng::new(4);
        let a = Tensor::param(&[1000], vec![1.0f64; 1000]).unwrap();
        let y = dropout(&a, 0.5, Mode::Train, &mut rng).unwrap();
        let loss = y.sum_all();
        loss.backward().unwrap();
        let g = a.grad();
        for (gv, yv) in g.iter().zip(y.data()) {
            assert_eq!(*gv, *yv, "dropout grad must equal its forward mask");
        }
    }
}
