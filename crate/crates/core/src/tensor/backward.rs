//! Reverse-mode pass. The tape is acyclic by construction (ops only hold
//! handles to already-built tensors), so one reverse-topological sweep visits
//! every node exactly once; each consumer adds its contribution into its
//! inputs' buffers in a fixed order, keeping the whole pass deterministic.

use std::collections::{HashMap, HashSet};

use super::gemm::{self, conv_out_dims};
use super::ops::{broadcast_strides, permute_raw, reduce_to};
use super::{Op, Scalar, Tensor};
use crate::error::{Error, Result};

/// Backpropagates from a scalar loss, accumulating `∂loss/∂leaf` into every
/// trainable leaf the tape reaches.
///
/// Rejected: non-scalar roots, detached roots (built with recording off or
/// from constants only), and a second call through an already-consumed tape.
pub fn backward<S: Scalar>(root: &Tensor<S>) -> Result<()> {
    if root.numel() != 1 {
        return Err(Error::Autodiff(format!(
            "backward needs a scalar loss, got shape {:?}",
            root.shape()
        )));
    }
    if !root.requires_grad_flag() {
        return Err(Error::Autodiff(
            "backward on a detached tensor: nothing on the tape leads here".into(),
        ));
    }
    if root.mark_backward_done() {
        return Err(Error::Autodiff(
            "backward already ran for this tape; rebuild the graph or reset before repeating"
                .into(),
        ));
    }

    // Iterative DFS post-order; two-phase stack entries (expand, then emit).
    let mut topo: Vec<Tensor<S>> = Vec::new();
    let mut visited: HashSet<u64> = HashSet::new();
    let mut stack: Vec<(Tensor<S>, bool)> = vec![(root.clone(), false)];
    while let Some((t, emit)) = stack.pop() {
        if emit {
            topo.push(t);
            continue;
        }
        if !visited.insert(t.id()) {
            continue;
        }
        stack.push((t.clone(), true));
        for inp in op_inputs(t.op()) {
            if !visited.contains(&inp.id()) {
                stack.push((inp.clone(), false));
            }
        }
    }

    let mut grads: HashMap<u64, Vec<S>> = HashMap::new();
    grads.insert(root.id(), vec![S::one()]);

    for node in topo.iter().rev() {
        let Some(g) = grads.remove(&node.id()) else {
            continue;
        };
        if node.is_leaf() {
            if node.requires_grad_flag() {
                node.accumulate_grad(&g);
            }
            continue;
        }
        distribute(node, &g, &mut grads);
    }
    Ok(())
}

fn op_inputs<S: Scalar>(op: &Op<S>) -> Vec<&Tensor<S>> {
    match op {
        Op::None => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::Min(a, b)
        | Op::Max(a, b) | Op::MatMul(a, b) => vec![a, b],
        Op::Neg(x)
        | Op::Relu(x)
        | Op::Sigmoid(x)
        | Op::Silu(x)
        | Op::Exp(x)
        | Op::Ln(x)
        | Op::Sqrt(x)
        | Op::Atan(x)
        | Op::Clamp(x, _, _)
        | Op::Scale(x, _)
        | Op::AddScalar(x, _)
        | Op::Reshape(x)
        | Op::Permute(x, _)
        | Op::Narrow(x, _, _)
        | Op::IndexSelect(x, _, _)
        | Op::UpsampleNearest2(x)
        | Op::Sum(x)
        | Op::SumAxis(x, _)
        | Op::Softmax(x, _) => vec![x],
        Op::MaxAxis { x, .. } | Op::MaxPool2d { x, .. } => vec![x],
        Op::Cat(parts, _) => parts.iter().collect(),
        Op::Linear { x, w, b } => {
            let mut v = vec![x, w];
            if let Some(b) = b {
                v.push(b);
            }
            v
        }
        Op::Conv2d { x, w, b, .. } => {
            let mut v = vec![x, w];
            if let Some(b) = b {
                v.push(b);
            }
            v
        }
    }
}

fn acc<S: Scalar>(grads: &mut HashMap<u64, Vec<S>>, t: &Tensor<S>, contrib: Vec<S>) {
    if !t.requires_grad_flag() {
        return;
    }
    grads
        .entry(t.id())
        .and_modify(|buf| {
            for (a, b) in buf.iter_mut().zip(&contrib) {
                *a = *a + *b;
            }
        })
        .or_insert(contrib);
}

/// Reads tensor `t` broadcast against `out_shape` and combines it with the
/// already out-shaped buffer `g`.
fn apply_with<S: Scalar>(
    g: &[S],
    t: &Tensor<S>,
    out_shape: &[usize],
    f: impl Fn(S, S) -> S,
) -> Vec<S> {
    t.with_data(|td| {
        if t.shape() == out_shape {
            return g.iter().zip(td).map(|(&gv, &tv)| f(gv, tv)).collect();
        }
        let rank = out_shape.len();
        let st = broadcast_strides(t.shape(), rank);
        let mut out = Vec::with_capacity(g.len());
        let mut idx = vec![0usize; rank];
        let mut ot = 0usize;
        for &gv in g {
            out.push(f(gv, td[ot]));
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                ot += st[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                idx[ax] = 0;
                ot -= st[ax] * out_shape[ax];
            }
        }
        out
    })
}

/// Three-way variant for rules that need both operands (div, min, max).
fn apply_with2<S: Scalar>(
    g: &[S],
    a: &Tensor<S>,
    b: &Tensor<S>,
    out_shape: &[usize],
    f: impl Fn(S, S, S) -> S,
) -> Vec<S> {
    a.with_data(|ad| {
        b.with_data(|bd| {
            let rank = out_shape.len();
            let sa = broadcast_strides(a.shape(), rank);
            let sb = broadcast_strides(b.shape(), rank);
            let mut out = Vec::with_capacity(g.len());
            let mut idx = vec![0usize; rank];
            let (mut oa, mut ob) = (0usize, 0usize);
            for &gv in g {
                out.push(f(gv, ad[oa], bd[ob]));
                for ax in (0..rank).rev() {
                    idx[ax] += 1;
                    oa += sa[ax];
                    ob += sb[ax];
                    if idx[ax] < out_shape[ax] {
                        break;
                    }
                    idx[ax] = 0;
                    oa -= sa[ax] * out_shape[ax];
                    ob -= sb[ax] * out_shape[ax];
                }
            }
            out
        })
    })
}

fn transpose<S: Scalar>(a: &[S], m: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); a.len()];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

fn distribute<S: Scalar>(node: &Tensor<S>, g: &[S], grads: &mut HashMap<u64, Vec<S>>) {
    let out_shape = node.shape().to_vec();
    match node.op() {
        Op::None => unreachable!("leaves are handled by the caller"),
        Op::Add(a, b) => {
            acc(grads, a, reduce_to(g, &out_shape, a.shape()));
            acc(grads, b, reduce_to(g, &out_shape, b.shape()));
        }
        Op::Sub(a, b) => {
            acc(grads, a, reduce_to(g, &out_shape, a.shape()));
            let neg: Vec<S> = g.iter().map(|&v| -v).collect();
            acc(grads, b, reduce_to(&neg, &out_shape, b.shape()));
        }
        Op::Mul(a, b) => {
            let ga = apply_with(g, b, &out_shape, |gv, bv| gv * bv);
            acc(grads, a, reduce_to(&ga, &out_shape, a.shape()));
            let gb = apply_with(g, a, &out_shape, |gv, av| gv * av);
            acc(grads, b, reduce_to(&gb, &out_shape, b.shape()));
        }
        Op::Div(a, b) => {
            let ga = apply_with(g, b, &out_shape, |gv, bv| gv / bv);
            acc(grads, a, reduce_to(&ga, &out_shape, a.shape()));
            let gb = apply_with2(g, a, b, &out_shape, |gv, av, bv| -gv * av / (bv * bv));
            acc(grads, b, reduce_to(&gb, &out_shape, b.shape()));
        }
        Op::Min(a, b) => {
            let ga = apply_with2(g, a, b, &out_shape, |gv, av, bv| {
                if av <= bv {
                    gv
                } else {
                    S::zero()
                }
            });
            acc(grads, a, reduce_to(&ga, &out_shape, a.shape()));
            let gb = apply_with2(g, a, b, &out_shape, |gv, av, bv| {
                if av <= bv {
                    S::zero()
                } else {
                    gv
                }
            });
            acc(grads, b, reduce_to(&gb, &out_shape, b.shape()));
        }
        Op::Max(a, b) => {
            let ga = apply_with2(g, a, b, &out_shape, |gv, av, bv| {
                if av >= bv {
                    gv
                } else {
                    S::zero()
                }
            });
            acc(grads, a, reduce_to(&ga, &out_shape, a.shape()));
            let gb = apply_with2(g, a, b, &out_shape, |gv, av, bv| {
                if av >= bv {
                    S::zero()
                } else {
                    gv
                }
            });
            acc(grads, b, reduce_to(&gb, &out_shape, b.shape()));
        }
        Op::Neg(x) => acc(grads, x, g.iter().map(|&v| -v).collect()),
        Op::Relu(x) => {
            let gx = apply_with(g, x, &out_shape, |gv, xv| {
                if xv > S::zero() {
                    gv
                } else {
                    S::zero()
                }
            });
            acc(grads, x, gx);
        }
        Op::Sigmoid(x) => {
            // σ' = y(1−y) in terms of the saved output
            let gx = node.with_data(|y| {
                g.iter()
                    .zip(y)
                    .map(|(&gv, &yv)| gv * yv * (S::one() - yv))
                    .collect()
            });
            acc(grads, x, gx);
        }
        Op::Silu(x) => {
            let gx = apply_with(g, x, &out_shape, |gv, xv| {
                let s = S::one() / (S::one() + (-xv).exp());
                gv * s * (S::one() + xv * (S::one() - s))
            });
            acc(grads, x, gx);
        }
        Op::Exp(x) => {
            let gx = node.with_data(|y| g.iter().zip(y).map(|(&gv, &yv)| gv * yv).collect());
            acc(grads, x, gx);
        }
        Op::Ln(x) => {
            let gx = apply_with(g, x, &out_shape, |gv, xv| gv / xv);
            acc(grads, x, gx);
        }
        Op::Sqrt(x) => {
            let half = S::from_f64(0.5);
            let gx = node.with_data(|y| {
                g.iter().zip(y).map(|(&gv, &yv)| gv * half / yv).collect()
            });
            acc(grads, x, gx);
        }
        Op::Atan(x) => {
            let gx = apply_with(g, x, &out_shape, |gv, xv| gv / (S::one() + xv * xv));
            acc(grads, x, gx);
        }
        Op::Clamp(x, lo, hi) => {
            let (lo, hi) = (*lo, *hi);
            let gx = apply_with(g, x, &out_shape, |gv, xv| {
                if xv > lo && xv < hi {
                    gv
                } else {
                    S::zero()
                }
            });
            acc(grads, x, gx);
        }
        Op::Scale(x, c) => {
            let c = *c;
            acc(grads, x, g.iter().map(|&v| v * c).collect());
        }
        Op::AddScalar(x, _) => acc(grads, x, g.to_vec()),
        Op::Reshape(x) => acc(grads, x, g.to_vec()),
        Op::Permute(x, axes) => {
            let mut inverse = vec![0usize; axes.len()];
            for (pos, &ax) in axes.iter().enumerate() {
                inverse[ax] = pos;
            }
            let (gx, _) = permute_raw(g, &out_shape, &inverse);
            acc(grads, x, gx);
        }
        Op::Narrow(x, axis, start) => {
            let (outer, d, inner) = x.axis_split(*axis);
            let len = node.dim(*axis);
            let mut gx = vec![S::zero(); x.numel()];
            for o in 0..outer {
                let src = &g[o * len * inner..(o + 1) * len * inner];
                let dst = &mut gx[o * d * inner + start * inner..];
                dst[..len * inner].copy_from_slice(src);
            }
            acc(grads, x, gx);
        }
        Op::Cat(parts, axis) => {
            let (outer, dcat, inner) = node.axis_split(*axis);
            let mut offset = 0usize;
            for p in parts {
                let d = p.dim(*axis);
                let mut gp = Vec::with_capacity(p.numel());
                for o in 0..outer {
                    let base = o * dcat * inner + offset * inner;
                    gp.extend_from_slice(&g[base..base + d * inner]);
                }
                acc(grads, p, gp);
                offset += d;
            }
        }
        Op::IndexSelect(x, axis, indices) => {
            let (outer, d, inner) = x.axis_split(*axis);
            let mut gx = vec![S::zero(); x.numel()];
            for o in 0..outer {
                for (j, &i) in indices.iter().enumerate() {
                    let src = &g[(o * indices.len() + j) * inner..(o * indices.len() + j + 1) * inner];
                    let dst = &mut gx[o * d * inner + i * inner..o * d * inner + (i + 1) * inner];
                    for (dv, sv) in dst.iter_mut().zip(src) {
                        *dv = *dv + *sv;
                    }
                }
            }
            acc(grads, x, gx);
        }
        Op::UpsampleNearest2(x) => {
            let (n, c, h, w) = x.dims4();
            let mut gx = vec![S::zero(); x.numel()];
            for nc in 0..n * c {
                let src = &g[nc * 4 * h * w..(nc + 1) * 4 * h * w];
                let dst = &mut gx[nc * h * w..(nc + 1) * h * w];
                for y in 0..h {
                    for xx in 0..w {
                        let b = 2 * y * 2 * w + 2 * xx;
                        dst[y * w + xx] =
                            src[b] + src[b + 1] + src[b + 2 * w] + src[b + 2 * w + 1];
                    }
                }
            }
            acc(grads, x, gx);
        }
        Op::Sum(x) => acc(grads, x, vec![g[0]; x.numel()]),
        Op::SumAxis(x, axis) => {
            let (outer, d, inner) = x.axis_split(*axis);
            let mut gx = vec![S::zero(); x.numel()];
            for o in 0..outer {
                let src = &g[o * inner..(o + 1) * inner];
                for j in 0..d {
                    let dst = &mut gx[o * d * inner + j * inner..o * d * inner + (j + 1) * inner];
                    dst.copy_from_slice(src);
                }
            }
            acc(grads, x, gx);
        }
        Op::MaxAxis { x, argmax, .. } => {
            let mut gx = vec![S::zero(); x.numel()];
            for (gi, &src_idx) in argmax.iter().enumerate() {
                gx[src_idx] = gx[src_idx] + g[gi];
            }
            acc(grads, x, gx);
        }
        Op::Softmax(x, axis) => {
            let (outer, d, inner) = x.axis_split(*axis);
            let gx = node.with_data(|y| {
                let mut gx = vec![S::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * d * inner + j * inner + i;
                        let mut s = S::zero();
                        for j in 0..d {
                            s = s + g[at(j)] * y[at(j)];
                        }
                        for j in 0..d {
                            gx[at(j)] = y[at(j)] * (g[at(j)] - s);
                        }
                    }
                }
                gx
            });
            acc(grads, x, gx);
        }
        Op::MatMul(a, b) => {
            let (m, k) = (a.dim(0), a.dim(1));
            let n = b.dim(1);
            let ga = b.with_data(|bd| gemm::gemm_nt(g, bd, m, n, k));
            acc(grads, a, ga);
            let mut gb = vec![S::zero(); k * n];
            a.with_data(|ad| gemm::gemm_tn_acc(ad, g, &mut gb, m, k, n));
            acc(grads, b, gb);
        }
        Op::Linear { x, w, b } => {
            let (m, kin) = (x.dim(0), x.dim(1));
            let out = w.dim(0);
            let mut gx = vec![S::zero(); m * kin];
            w.with_data(|wd| gemm::gemm_nn_acc(g, wd, &mut gx, m, out, kin));
            acc(grads, x, gx);
            let mut gw = vec![S::zero(); out * kin];
            x.with_data(|xd| gemm::gemm_tn_acc(g, xd, &mut gw, m, out, kin));
            acc(grads, w, gw);
            if let Some(bias) = b {
                let mut gb = vec![S::zero(); out];
                for row in g.chunks(out) {
                    for (bv, gv) in gb.iter_mut().zip(row) {
                        *bv = *bv + *gv;
                    }
                }
                acc(grads, bias, gb);
            }
        }
        Op::Conv2d { x, w, b, stride, pad, groups } => {
            let (stride, pad, groups) = (*stride, *pad, *groups);
            let (n, cin, h, wd) = x.dims4();
            let (cout, _, kh, kw) = (w.dim(0), w.dim(1), w.dim(2), w.dim(3));
            let (oh, ow) = conv_out_dims(h, wd, kh, kw, stride, pad);
            let p = oh * ow;
            let cing = cin / groups;
            let coutg = cout / groups;
            let feat = cing * kh * kw;

            if let Some(bias) = b {
                let mut gb = vec![S::zero(); cout];
                for img in 0..n {
                    for c in 0..cout {
                        let s: S = g[(img * cout + c) * p..(img * cout + c + 1) * p]
                            .iter()
                            .copied()
                            .sum();
                        gb[c] = gb[c] + s;
                    }
                }
                acc(grads, bias, gb);
            }

            let needs_gw = w.requires_grad_flag();
            let needs_gx = x.requires_grad_flag();
            let mut gw = vec![S::zero(); w.numel()];
            let mut gx = vec![S::zero(); x.numel()];
            x.with_data(|xd| {
                w.with_data(|wdat| {
                    for img in 0..n {
                        let xi = &xd[img * cin * h * wd..(img + 1) * cin * h * wd];
                        for grp in 0..groups {
                            let g_out = &g[img * cout * p + grp * coutg * p
                                ..img * cout * p + (grp + 1) * coutg * p];
                            if needs_gw {
                                let cols = gemm::im2col(
                                    &xi[grp * cing * h * wd..(grp + 1) * cing * h * wd],
                                    cing,
                                    h,
                                    wd,
                                    kh,
                                    kw,
                                    stride,
                                    pad,
                                );
                                gemm::gemm_nn_acc(
                                    g_out,
                                    &cols,
                                    &mut gw[grp * coutg * feat..(grp + 1) * coutg * feat],
                                    coutg,
                                    p,
                                    feat,
                                );
                            }
                            if needs_gx {
                                let g_t = transpose(g_out, coutg, p);
                                let wg = &wdat[grp * coutg * feat..(grp + 1) * coutg * feat];
                                let mut dcols = vec![S::zero(); p * feat];
                                gemm::gemm_nn_acc(&g_t, wg, &mut dcols, p, coutg, feat);
                                gemm::col2im_acc(
                                    &dcols,
                                    &mut gx[img * cin * h * wd + grp * cing * h * wd
                                        ..img * cin * h * wd + (grp + 1) * cing * h * wd],
                                    cing,
                                    h,
                                    wd,
                                    kh,
                                    kw,
                                    stride,
                                    pad,
                                );
                            }
                        }
                    }
                })
            });
            if needs_gw {
                acc(grads, w, gw);
            }
            if needs_gx {
                acc(grads, x, gx);
            }
        }
        Op::MaxPool2d { x, argmax } => {
            let mut gx = vec![S::zero(); x.numel()];
            for (gi, &src_idx) in argmax.iter().enumerate() {
                gx[src_idx] = gx[src_idx] + g[gi];
            }
            acc(grads, x, gx);
        }
    }
}
