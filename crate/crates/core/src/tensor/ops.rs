//! Forward operations. Each op validates shapes, computes its result
//! sequentially, and — when recording is enabled and an input is on the tape —
//! stores an [`Op`] node holding its inputs and whatever the gradient rule
//! will need.

use std::sync::Arc;

use super::gemm::{self, conv_out_dims};
use super::{grad_enabled, strides_of, Op, Scalar, Tensor};
use crate::error::{Error, Result};

/// Right-aligned broadcast result shape; every axis pair must match or one
/// side must be 1. This covers the gate patterns the models use
/// (`[N,C,1,1]⊗[N,C,H,W]`, `[N,1,H,W]⊗[N,C,H,W]`, scalars, bias rows).
pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return Err(Error::shape(
                op,
                format!("cannot broadcast {a:?} with {b:?} (axis {i}: {da} vs {db})"),
            ));
        };
    }
    Ok(out)
}

/// Strides for reading a tensor of `shape` as if it had `out_rank` axes,
/// with zero stride on broadcast (size-1 or missing) axes.
pub(crate) fn broadcast_strides(shape: &[usize], out_rank: usize) -> Vec<usize> {
    let natural = strides_of(shape);
    let mut s = vec![0usize; out_rank];
    let off = out_rank - shape.len();
    for i in 0..shape.len() {
        s[off + i] = if shape[i] == 1 { 0 } else { natural[i] };
    }
    s
}

/// Elementwise combine under broadcasting. Returns the raw output buffer.
pub(crate) fn broadcast_apply<S: Scalar>(
    a: &Tensor<S>,
    b: &Tensor<S>,
    out_shape: &[usize],
    f: impl Fn(S, S) -> S,
) -> Vec<S> {
    let numel: usize = out_shape.iter().product();
    a.with_data(|ad| {
        b.with_data(|bd| {
            if a.shape() == out_shape && b.shape() == out_shape {
                return ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect();
            }
            let rank = out_shape.len();
            let sa = broadcast_strides(a.shape(), rank);
            let sb = broadcast_strides(b.shape(), rank);
            let mut out = Vec::with_capacity(numel);
            let mut idx = vec![0usize; rank];
            let (mut oa, mut ob) = (0usize, 0usize);
            for _ in 0..numel {
                out.push(f(ad[oa], bd[ob]));
                // odometer increment, updating both offsets in place
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

/// Sums `buf` (laid out as `out_shape`) down to `target_shape`, adding over
/// every broadcast axis. Exact adjoint of the broadcast read.
pub(crate) fn reduce_to<S: Scalar>(buf: &[S], out_shape: &[usize], target_shape: &[usize]) -> Vec<S> {
    if out_shape == target_shape {
        return buf.to_vec();
    }
    let rank = out_shape.len();
    let st = broadcast_strides(target_shape, rank);
    let tlen: usize = target_shape.iter().product();
    let mut out = vec![S::zero(); tlen];
    let mut idx = vec![0usize; rank];
    let mut ot = 0usize;
    for &v in buf {
        out[ot] = out[ot] + v;
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
}

fn track<S: Scalar>(inputs: &[&Tensor<S>]) -> bool {
    grad_enabled() && inputs.iter().any(|t| t.requires_grad_flag())
}

fn binary<S: Scalar>(
    name: &'static str,
    a: &Tensor<S>,
    b: &Tensor<S>,
    f: impl Fn(S, S) -> S,
    op: impl FnOnce(Tensor<S>, Tensor<S>) -> Op<S>,
) -> Result<Tensor<S>> {
    let shape = broadcast_shape(name, a.shape(), b.shape())?;
    let data = broadcast_apply(a, b, &shape, f);
    let rec = track(&[a, b]);
    let node = if rec { op(a.clone(), b.clone()) } else { Op::None };
    Ok(Tensor::make(data, shape, rec, node))
}

fn unary<S: Scalar>(
    x: &Tensor<S>,
    f: impl Fn(S) -> S,
    op: impl FnOnce(Tensor<S>) -> Op<S>,
) -> Tensor<S> {
    let data = x.with_data(|d| d.iter().map(|&v| f(v)).collect());
    let rec = track(&[x]);
    let node = if rec { op(x.clone()) } else { Op::None };
    Tensor::make(data, x.shape().to_vec(), rec, node)
}

impl<S: Scalar> Tensor<S> {
    pub fn add(&self, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        binary("add", self, rhs, |a, b| a + b, Op::Add)
    }

    pub fn sub(&self, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        binary("sub", self, rhs, |a, b| a - b, Op::Sub)
    }

    pub fn mul(&self, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        binary("mul", self, rhs, |a, b| a * b, Op::Mul)
    }

    pub fn div(&self, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        binary("div", self, rhs, |a, b| a / b, Op::Div)
    }

    /// Elementwise minimum; on ties the gradient routes to `self`.
    pub fn minimum(&self, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        binary("minimum", self, rhs, |a, b| if a <= b { a } else { b }, Op::Min)
    }

    /// Elementwise maximum; on ties the gradient routes to `self`.
    pub fn maximum(&self, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        binary("maximum", self, rhs, |a, b| if a >= b { a } else { b }, Op::Max)
    }

    pub fn neg(&self) -> Tensor<S> {
        unary(self, |v| -v, Op::Neg)
    }

    pub fn relu(&self) -> Tensor<S> {
        unary(self, |v| if v > S::zero() { v } else { S::zero() }, Op::Relu)
    }

    pub fn sigmoid(&self) -> Tensor<S> {
        unary(self, |v| S::one() / (S::one() + (-v).exp()), Op::Sigmoid)
    }

    /// `x · σ(x)`, the activation of every conv block in the detector.
    pub fn silu(&self) -> Tensor<S> {
        unary(self, |v| v / (S::one() + (-v).exp()), Op::Silu)
    }

    pub fn exp(&self) -> Tensor<S> {
        unary(self, |v| v.exp(), Op::Exp)
    }

    pub fn ln(&self) -> Tensor<S> {
        unary(self, |v| v.ln(), Op::Ln)
    }

    pub fn sqrt(&self) -> Tensor<S> {
        unary(self, |v| v.sqrt(), Op::Sqrt)
    }

    pub fn atan(&self) -> Tensor<S> {
        unary(self, |v| v.atan(), Op::Atan)
    }

    /// Clamp to `[lo, hi]`; gradient passes only strictly inside the interval.
    pub fn clamp(&self, lo: S, hi: S) -> Tensor<S> {
        unary(
            self,
            |v| if v < lo { lo } else if v > hi { hi } else { v },
            |x| Op::Clamp(x, lo, hi),
        )
    }

    pub fn scale(&self, c: S) -> Tensor<S> {
        unary(self, |v| v * c, |x| Op::Scale(x, c))
    }

    pub fn add_scalar(&self, c: S) -> Tensor<S> {
        unary(self, |v| v + c, |x| Op::AddScalar(x, c))
    }

    /// `c − x` as a convenience (used for `1 − p` in the losses).
    pub fn rsub_scalar(&self, c: S) -> Tensor<S> {
        self.neg().add_scalar(c)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<S>> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?} changes element count", self.shape(), shape),
            ));
        }
        let rec = track(&[self]);
        let node = if rec { Op::Reshape(self.clone()) } else { Op::None };
        Ok(Tensor::make(self.to_vec(), shape.to_vec(), rec, node))
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Tensor<S>> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::invalid(
                "permute",
                format!("{axes:?} is not a permutation of 0..{rank}"),
            ));
        }
        let (data, out_shape) = self.with_data(|d| permute_raw(d, self.shape(), axes));
        let rec = track(&[self]);
        let node = if rec { Op::Permute(self.clone(), axes.to_vec()) } else { Op::None };
        Ok(Tensor::make(data, out_shape, rec, node))
    }

    /// Contiguous slice `start..start+len` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<S>> {
        if axis >= self.rank() || start + len > self.dim(axis) {
            return Err(Error::invalid(
                "narrow",
                format!(
                    "range {start}..{} exceeds axis {axis} of {:?}",
                    start + len,
                    self.shape()
                ),
            ));
        }
        let (outer, d, inner) = self.axis_split(axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        self.with_data(|dta| {
            for o in 0..outer {
                let base = o * d * inner + start * inner;
                out.extend_from_slice(&dta[base..base + len * inner]);
            }
        });
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        let rec = track(&[self]);
        let node = if rec { Op::Narrow(self.clone(), axis, start) } else { Op::None };
        Ok(Tensor::make(out, shape, rec, node))
    }

    /// Concatenation along `axis`; all other dims must agree.
    pub fn cat(parts: &[Tensor<S>], axis: usize) -> Result<Tensor<S>> {
        if parts.is_empty() {
            return Err(Error::invalid("cat", "no tensors given"));
        }
        let rank = parts[0].rank();
        if axis >= rank {
            return Err(Error::invalid("cat", format!("axis {axis} out of rank {rank}")));
        }
        let mut shape = parts[0].shape().to_vec();
        for p in &parts[1..] {
            if p.rank() != rank {
                return Err(Error::shape("cat", "rank mismatch".to_string()));
            }
            for ax in 0..rank {
                if ax != axis && p.dim(ax) != shape[ax] {
                    return Err(Error::shape(
                        "cat",
                        format!("{:?} vs {:?} on axis {ax}", p.shape(), shape),
                    ));
                }
            }
            shape[axis] += p.dim(axis);
        }
        let (outer, _, inner) = parts[0].axis_split(axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let d = p.dim(axis);
                p.with_data(|dta| {
                    out.extend_from_slice(&dta[o * d * inner..(o + 1) * d * inner]);
                });
            }
        }
        let refs: Vec<&Tensor<S>> = parts.iter().collect();
        let rec = track(&refs);
        let node = if rec { Op::Cat(parts.to_vec(), axis) } else { Op::None };
        Ok(Tensor::make(out, shape, rec, node))
    }

    /// Gathers rows along `axis` in the given order (duplicates allowed).
    pub fn index_select(&self, axis: usize, indices: &[usize]) -> Result<Tensor<S>> {
        if axis >= self.rank() {
            return Err(Error::invalid("index_select", format!("axis {axis}")));
        }
        let d = self.dim(axis);
        if let Some(&bad) = indices.iter().find(|&&i| i >= d) {
            return Err(Error::invalid(
                "index_select",
                format!("index {bad} out of bounds for axis {axis} ({d})"),
            ));
        }
        let (outer, _, inner) = self.axis_split(axis);
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        self.with_data(|dta| {
            for o in 0..outer {
                for &i in indices {
                    let base = o * d * inner + i * inner;
                    out.extend_from_slice(&dta[base..base + inner]);
                }
            }
        });
        let mut shape = self.shape().to_vec();
        shape[axis] = indices.len();
        let rec = track(&[self]);
        let node = if rec {
            Op::IndexSelect(self.clone(), axis, Arc::new(indices.to_vec()))
        } else {
            Op::None
        };
        Ok(Tensor::make(out, shape, rec, node))
    }

    /// Nearest-neighbour ×2 upsampling of an `[N,C,H,W]` map.
    pub fn upsample_nearest2(&self) -> Result<Tensor<S>> {
        if self.rank() != 4 {
            return Err(Error::shape("upsample_nearest2", format!("{:?}", self.shape())));
        }
        let (n, c, h, w) = self.dims4();
        let mut out = vec![S::zero(); n * c * h * 2 * w * 2];
        self.with_data(|d| {
            for nc in 0..n * c {
                let src = &d[nc * h * w..(nc + 1) * h * w];
                let dst = &mut out[nc * 4 * h * w..(nc + 1) * 4 * h * w];
                for y in 0..h {
                    for x in 0..w {
                        let v = src[y * w + x];
                        let b = 2 * y * 2 * w + 2 * x;
                        dst[b] = v;
                        dst[b + 1] = v;
                        dst[b + 2 * w] = v;
                        dst[b + 2 * w + 1] = v;
                    }
                }
            }
        });
        let rec = track(&[self]);
        let node = if rec { Op::UpsampleNearest2(self.clone()) } else { Op::None };
        Ok(Tensor::make(out, vec![n, c, 2 * h, 2 * w], rec, node))
    }

    /// Total sum as a `[1]` tensor.
    pub fn sum_all(&self) -> Tensor<S> {
        let s = self.with_data(|d| d.iter().copied().sum::<S>());
        let rec = track(&[self]);
        let node = if rec { Op::Sum(self.clone()) } else { Op::None };
        Tensor::make(vec![s], vec![1], rec, node)
    }

    pub fn mean_all(&self) -> Tensor<S> {
        let n = S::from_f64(self.numel() as f64);
        self.sum_all().scale(S::one() / n)
    }

    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor<S>> {
        if axis >= self.rank() {
            return Err(Error::invalid("sum_axis", format!("axis {axis}")));
        }
        let (outer, d, inner) = self.axis_split(axis);
        let mut out = vec![S::zero(); outer * inner];
        self.with_data(|dta| {
            for o in 0..outer {
                for j in 0..d {
                    let base = o * d * inner + j * inner;
                    let dst = &mut out[o * inner..(o + 1) * inner];
                    for (dv, sv) in dst.iter_mut().zip(&dta[base..base + inner]) {
                        *dv = *dv + *sv;
                    }
                }
            }
        });
        let shape = reduced_shape(self.shape(), axis, keepdim);
        let rec = track(&[self]);
        let node = if rec { Op::SumAxis(self.clone(), axis) } else { Op::None };
        Ok(Tensor::make(out, shape, rec, node))
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor<S>> {
        let d = S::from_f64(self.dim(axis) as f64);
        Ok(self.sum_axis(axis, keepdim)?.scale(S::one() / d))
    }

    /// Max along `axis`; gradient flows to the first maximal element.
    pub fn max_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor<S>> {
        if axis >= self.rank() {
            return Err(Error::invalid("max_axis", format!("axis {axis}")));
        }
        let (outer, d, inner) = self.axis_split(axis);
        let mut out = vec![S::zero(); outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        self.with_data(|dta| {
            for o in 0..outer {
                for i in 0..inner {
                    let mut best = dta[o * d * inner + i];
                    let mut bidx = o * d * inner + i;
                    for j in 1..d {
                        let idx = o * d * inner + j * inner + i;
                        if dta[idx] > best {
                            best = dta[idx];
                            bidx = idx;
                        }
                    }
                    out[o * inner + i] = best;
                    argmax[o * inner + i] = bidx;
                }
            }
        });
        let shape = reduced_shape(self.shape(), axis, keepdim);
        let rec = track(&[self]);
        let node = if rec {
            Op::MaxAxis { x: self.clone(), argmax }
        } else {
            Op::None
        };
        Ok(Tensor::make(out, shape, rec, node))
    }

    /// Numerically-stable softmax along `axis` (max-shifted under the hood).
    pub fn softmax(&self, axis: usize) -> Result<Tensor<S>> {
        if axis >= self.rank() {
            return Err(Error::invalid("softmax", format!("axis {axis}")));
        }
        let (outer, d, inner) = self.axis_split(axis);
        let mut out = vec![S::zero(); self.numel()];
        self.with_data(|dta| {
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| o * d * inner + j * inner + i;
                    let mut m = dta[at(0)];
                    for j in 1..d {
                        if dta[at(j)] > m {
                            m = dta[at(j)];
                        }
                    }
                    let mut z = S::zero();
                    for j in 0..d {
                        let e = (dta[at(j)] - m).exp();
                        out[at(j)] = e;
                        z = z + e;
                    }
                    for j in 0..d {
                        out[at(j)] = out[at(j)] / z;
                    }
                }
            }
        });
        let rec = track(&[self]);
        let node = if rec { Op::Softmax(self.clone(), axis) } else { Op::None };
        Ok(Tensor::make(out, self.shape().to_vec(), rec, node))
    }

    /// 2-D matrix product `[m,k]·[k,n]`.
    pub fn matmul(&self, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        if self.rank() != 2 || rhs.rank() != 2 || self.dim(1) != rhs.dim(0) {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", self.shape(), rhs.shape()),
            ));
        }
        let (m, k, n) = (self.dim(0), self.dim(1), rhs.dim(1));
        let data = self.with_data(|a| {
            rhs.with_data(|b| {
                let mut c = vec![S::zero(); m * n];
                gemm::gemm_nn_acc(a, b, &mut c, m, k, n);
                c
            })
        });
        let rec = track(&[self, rhs]);
        let node = if rec { Op::MatMul(self.clone(), rhs.clone()) } else { Op::None };
        Ok(Tensor::make(data, vec![m, n], rec, node))
    }

    /// Affine map `x·wᵀ + b` with `x: [m, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&self, w: &Tensor<S>, b: Option<&Tensor<S>>) -> Result<Tensor<S>> {
        if self.rank() != 2 || w.rank() != 2 || self.dim(1) != w.dim(1) {
            return Err(Error::shape(
                "linear",
                format!("x {:?} w {:?}", self.shape(), w.shape()),
            ));
        }
        let (m, kin, out) = (self.dim(0), self.dim(1), w.dim(0));
        if let Some(bias) = b {
            if bias.shape() != [out] {
                return Err(Error::shape(
                    "linear",
                    format!("bias {:?} for out={out}", bias.shape()),
                ));
            }
        }
        let mut data = self.with_data(|x| w.with_data(|wd| gemm::gemm_nt(x, wd, m, kin, out)));
        if let Some(bias) = b {
            bias.with_data(|bd| {
                for row in data.chunks_mut(out) {
                    for (v, add) in row.iter_mut().zip(bd) {
                        *v = *v + *add;
                    }
                }
            });
        }
        let rec = track(&[self, w]) || b.map(|t| grad_enabled() && t.requires_grad_flag()).unwrap_or(false);
        let node = if rec {
            Op::Linear { x: self.clone(), w: w.clone(), b: b.cloned() }
        } else {
            Op::None
        };
        Ok(Tensor::make(data, vec![m, out], rec, node))
    }

    /// 2-D convolution.
    ///
    /// `x: [N,Cin,H,W]`, `w: [Cout, Cin/groups, kh, kw]`, optional `b: [Cout]`.
    /// Padding is per-axis `(ph, pw)`; stride is square. Grouped form splits
    /// channels into `groups` independent convolutions.
    pub fn conv2d(
        &self,
        w: &Tensor<S>,
        b: Option<&Tensor<S>>,
        stride: usize,
        pad: (usize, usize),
        groups: usize,
    ) -> Result<Tensor<S>> {
        if self.rank() != 4 || w.rank() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("x {:?} w {:?}", self.shape(), w.shape()),
            ));
        }
        let (n, cin, h, wd) = self.dims4();
        let (cout, wcin, kh, kw) = (w.dim(0), w.dim(1), w.dim(2), w.dim(3));
        if groups == 0 || cin % groups != 0 || cout % groups != 0 || wcin * groups != cin {
            return Err(Error::shape(
                "conv2d",
                format!("cin={cin} cout={cout} groups={groups} weight cin={wcin}"),
            ));
        }
        if h + 2 * pad.0 < kh || wd + 2 * pad.1 < kw {
            return Err(Error::invalid(
                "conv2d",
                format!("kernel {kh}x{kw} exceeds padded input {h}x{wd} pad {pad:?}"),
            ));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride 0"));
        }
        if let Some(bias) = b {
            if bias.shape() != [cout] {
                return Err(Error::shape("conv2d", format!("bias {:?}", bias.shape())));
            }
        }
        let (oh, ow) = conv_out_dims(h, wd, kh, kw, (stride, stride), pad);
        let cing = cin / groups;
        let coutg = cout / groups;
        let feat = cing * kh * kw;
        let p = oh * ow;
        let mut out = vec![S::zero(); n * cout * p];
        self.with_data(|xd| {
            w.with_data(|wdat| {
                for img in 0..n {
                    let xi = &xd[img * cin * h * wd..(img + 1) * cin * h * wd];
                    for g in 0..groups {
                        let cols = gemm::im2col(
                            &xi[g * cing * h * wd..(g + 1) * cing * h * wd],
                            cing,
                            h,
                            wd,
                            kh,
                            kw,
                            (stride, stride),
                            pad,
                        );
                        let wg = &wdat[g * coutg * feat..(g + 1) * coutg * feat];
                        let res = gemm::gemm_nt(wg, &cols, coutg, feat, p);
                        let dst = &mut out
                            [img * cout * p + g * coutg * p..img * cout * p + (g + 1) * coutg * p];
                        dst.copy_from_slice(&res);
                    }
                }
            })
        });
        if let Some(bias) = b {
            bias.with_data(|bd| {
                for img in 0..n {
                    for c in 0..cout {
                        let dst = &mut out[(img * cout + c) * p..(img * cout + c + 1) * p];
                        for v in dst {
                            *v = *v + bd[c];
                        }
                    }
                }
            });
        }
        let rec = track(&[self, w]) || b.map(|t| grad_enabled() && t.requires_grad_flag()).unwrap_or(false);
        let node = if rec {
            Op::Conv2d {
                x: self.clone(),
                w: w.clone(),
                b: b.cloned(),
                stride: (stride, stride),
                pad,
                groups,
            }
        } else {
            Op::None
        };
        Ok(Tensor::make(out, vec![n, cout, oh, ow], rec, node))
    }

    /// 1-D convolution over the channel axis, used by the adaptive-kernel
    /// channel gate: `x: [N,1,C]`, `w: [1,1,k]` with odd `k`, same-padding.
    pub fn conv1d_same(&self, w: &Tensor<S>) -> Result<Tensor<S>> {
        if self.rank() != 3 || self.dim(1) != 1 || w.rank() != 3 || w.dim(0) != 1 || w.dim(1) != 1 {
            return Err(Error::shape(
                "conv1d",
                format!("x {:?} w {:?}", self.shape(), w.shape()),
            ));
        }
        let k = w.dim(2);
        if k % 2 == 0 {
            return Err(Error::invalid("conv1d", format!("kernel size {k} must be odd")));
        }
        let (n, c) = (self.dim(0), self.dim(2));
        let x4 = self.reshape(&[n, 1, 1, c])?;
        let w4 = w.reshape(&[1, 1, 1, k])?;
        let y = x4.conv2d(&w4, None, 1, (0, (k - 1) / 2), 1)?;
        y.reshape(&[n, 1, c])
    }

    /// Max pooling with square kernel/stride and symmetric padding. Padded
    /// positions never win (treated as −∞).
    pub fn maxpool2d(&self, k: usize, stride: usize, pad: usize) -> Result<Tensor<S>> {
        if self.rank() != 4 {
            return Err(Error::shape("maxpool2d", format!("{:?}", self.shape())));
        }
        if k == 0 || stride == 0 || pad >= k {
            return Err(Error::invalid(
                "maxpool2d",
                format!("k={k} stride={stride} pad={pad}"),
            ));
        }
        let (n, c, h, w) = self.dims4();
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::invalid("maxpool2d", "window exceeds padded input"));
        }
        let (oh, ow) = conv_out_dims(h, w, k, k, (stride, stride), (pad, pad));
        let mut out = vec![S::zero(); n * c * oh * ow];
        let mut argmax = vec![0usize; n * c * oh * ow];
        self.with_data(|d| {
            for nc in 0..n * c {
                let plane = &d[nc * h * w..(nc + 1) * h * w];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = S::neg_infinity();
                        let mut bidx = 0usize;
                        for ky in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let idx = iy as usize * w + ix as usize;
                                if plane[idx] > best {
                                    best = plane[idx];
                                    bidx = nc * h * w + idx;
                                }
                            }
                        }
                        out[nc * oh * ow + oy * ow + ox] = best;
                        argmax[nc * oh * ow + oy * ow + ox] = bidx;
                    }
                }
            }
        });
        let rec = track(&[self]);
        let node = if rec {
            Op::MaxPool2d { x: self.clone(), argmax }
        } else {
            Op::None
        };
        Ok(Tensor::make(out, vec![n, c, oh, ow], rec, node))
    }

    /// Global average pool of `[N,C,H,W]` down to `[N,C,1,1]`.
    pub fn gap(&self) -> Result<Tensor<S>> {
        if self.rank() != 4 {
            return Err(Error::shape("gap", format!("{:?}", self.shape())));
        }
        let (n, c, h, w) = self.dims4();
        let flat = self.reshape(&[n, c, h * w])?;
        flat.mean_axis(2, false)?.reshape(&[n, c, 1, 1])
    }

    /// Global max pool of `[N,C,H,W]` down to `[N,C,1,1]`.
    pub fn gmp(&self) -> Result<Tensor<S>> {
        if self.rank() != 4 {
            return Err(Error::shape("gmp", format!("{:?}", self.shape())));
        }
        let (n, c, h, w) = self.dims4();
        let flat = self.reshape(&[n, c, h * w])?;
        flat.max_axis(2, false)?.reshape(&[n, c, 1, 1])
    }

    pub(crate) fn dims4(&self) -> (usize, usize, usize, usize) {
        (self.dim(0), self.dim(1), self.dim(2), self.dim(3))
    }

    /// Splits the shape around `axis` into (product-before, at, product-after).
    pub(crate) fn axis_split(&self, axis: usize) -> (usize, usize, usize) {
        let shape = self.shape();
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        (outer, shape[axis], inner)
    }
}

/// Reorders `data` (laid out as `shape`) so axis `axes[i]` of the input
/// becomes axis `i` of the output. Shared by the forward op and its adjoint
/// (which permutes by the inverse ordering).
pub(crate) fn permute_raw<S: Scalar>(
    data: &[S],
    shape: &[usize],
    axes: &[usize],
) -> (Vec<S>, Vec<usize>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let out_strides = strides_of(&out_shape);
    // stride each INPUT axis contributes to the output offset
    let mut contrib = vec![0usize; rank];
    for (pos, &ax) in axes.iter().enumerate() {
        contrib[ax] = out_strides[pos];
    }
    let mut out = vec![S::zero(); data.len()];
    let mut idx = vec![0usize; rank];
    let mut o = 0usize;
    for &v in data.iter() {
        out[o] = v;
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            o += contrib[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            idx[ax] = 0;
            o -= contrib[ax] * shape[ax];
        }
    }
    (out, out_shape)
}

fn reduced_shape(shape: &[usize], axis: usize, keepdim: bool) -> Vec<usize> {
    let mut s = shape.to_vec();
    if keepdim {
        s[axis] = 1;
    } else {
        s.remove(axis);
        if s.is_empty() {
            s.push(1);
        }
    }
    s
}
