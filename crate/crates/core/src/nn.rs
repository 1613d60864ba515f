//! Layer building blocks: conv/norm/linear primitives with seeded
//! initialization, and the composite blocks the detector is assembled from.
//!
//! Modules are plain structs holding parameter tensors. Each exposes
//! `forward` and `visit`; `visit` walks parameters in a fixed order with
//! dotted path names, which is what the optimizer, the profiler, and the
//! checkpoint format all key on.

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Distinguishes optimizer-visible parameters from state that is carried
/// along but never receives gradients (batch-norm running statistics).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    Buffer,
}

/// Callback alias for parameter walks.
pub type Visitor<'a, S> = dyn FnMut(&str, &Tensor<S>, ParamKind) + 'a;

/// Seeded weight initializer. One instance is threaded through model
/// construction so the full parameter set is a pure function of the seed.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// `n` draws from uniform(−bound, bound). Values are generated in f64
    /// and narrowed, so f32 and f64 models built from one seed agree to
    /// rounding.
    fn uniform<S: Scalar>(&mut self, n: usize, bound: f64) -> Vec<S> {
        (0..n)
            .map(|_| {
                // 53 random mantissa bits → u in [0,1)
                let u = (self.rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
                S::from_f64((2.0 * u - 1.0) * bound)
            })
            .collect()
    }

    /// Uniform(−1/√fan_in, 1/√fan_in), the fan-in rule used for every conv
    /// and linear weight (and their biases) in the detector.
    pub fn kaiming<S: Scalar>(&mut self, n: usize, fan_in: usize) -> Vec<S> {
        self.uniform(n, 1.0 / (fan_in as f64).sqrt())
    }
}

/// 2-D convolution layer. Weight `[cout, cin/groups, k, k]`, optional bias.
pub struct Conv2d<S: Scalar> {
    pub w: Tensor<S>,
    pub b: Option<Tensor<S>>,
    pub stride: usize,
    pub pad: (usize, usize),
    pub groups: usize,
}

impl<S: Scalar> Conv2d<S> {
    pub fn new(
        init: &mut Init,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: (usize, usize),
        groups: usize,
        bias: bool,
    ) -> Result<Self> {
        if cin % groups != 0 || cout % groups != 0 {
            return Err(Error::invalid(
                "conv2d",
                format!("channels {cin}->{cout} not divisible by {groups} groups"),
            ));
        }
        let fan_in = (cin / groups) * k * k;
        let w = Tensor::from_vec(
            init.kaiming(cout * (cin / groups) * k * k, fan_in),
            &[cout, cin / groups, k, k],
        )?
        .requires_grad(true);
        let b = if bias {
            Some(Tensor::from_vec(init.kaiming(cout, fan_in), &[cout])?.requires_grad(true))
        } else {
            None
        };
        Ok(Self { w, b, stride, pad, groups })
    }

    /// Odd-kernel convolution that preserves spatial size at stride 1
    /// (halves it at stride 2): pad = k/2 on both axes.
    pub fn same(
        init: &mut Init,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        bias: bool,
    ) -> Result<Self> {
        Self::new(init, cin, cout, k, stride, (k / 2, k / 2), 1, bias)
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        x.conv2d(&self.w, self.b.as_ref(), self.stride, self.pad, self.groups)
    }

    pub fn visit(&self, prefix: &str, f: &mut Visitor<S>) {
        f(&format!("{prefix}.w"), &self.w, ParamKind::Trainable);
        if let Some(b) = &self.b {
            f(&format!("{prefix}.b"), b, ParamKind::Trainable);
        }
    }
}

/// Batch normalization over `[N,C,H,W]`, statistics per channel.
///
/// Training mode normalizes by biased batch statistics (gradient flows
/// through them) and folds the batch into running estimates with
/// `running ← (1−m)·running + m·batch`, the variance entering unbiased.
/// Eval mode normalizes by the running estimates.
pub struct BatchNorm2d<S: Scalar> {
    pub gamma: Tensor<S>,
    pub beta: Tensor<S>,
    pub running_mean: Tensor<S>,
    pub running_var: Tensor<S>,
    pub eps: f64,
    pub momentum: f64,
}

impl<S: Scalar> BatchNorm2d<S> {
    pub fn new(c: usize) -> Result<Self> {
        Ok(Self {
            gamma: Tensor::from_vec(vec![S::one(); c], &[1, c, 1, 1])?.requires_grad(true),
            beta: Tensor::from_vec(vec![S::zero(); c], &[1, c, 1, 1])?.requires_grad(true),
            running_mean: Tensor::from_vec(vec![S::zero(); c], &[1, c, 1, 1])?,
            running_var: Tensor::from_vec(vec![S::one(); c], &[1, c, 1, 1])?,
            eps: 1e-5,
            momentum: 0.03,
        })
    }

    pub fn forward(&self, x: &Tensor<S>, train: bool) -> Result<Tensor<S>> {
        if x.rank() != 4 {
            return Err(Error::shape("batchnorm2d", format!("expected 4-D, got {:?}", x.shape())));
        }
        let (n, _c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let count = n * h * w;
        if train {
            if count == 1 {
                return Err(Error::invalid(
                    "batchnorm2d",
                    "one value per channel cannot be normalized in training mode",
                ));
            }
            // mean over (N,H,W): chained per-axis means divide by N·H·W total
            let mu = x.mean_axis(0, true)?.mean_axis(2, true)?.mean_axis(3, true)?;
            let centered = x.sub(&mu)?;
            let var = centered
                .mul(&centered)?
                .mean_axis(0, true)?
                .mean_axis(2, true)?
                .mean_axis(3, true)?;
            let xhat = centered.div(&var.add_scalar(S::from_f64(self.eps)).sqrt())?;
            let y = xhat.mul(&self.gamma)?.add(&self.beta)?;

            let m = self.momentum;
            let bessel = count as f64 / (count - 1) as f64;
            let (mu_v, var_v) = (mu.to_vec(), var.to_vec());
            self.running_mean.with_data_mut(|rm| {
                for (r, &b) in rm.iter_mut().zip(&mu_v) {
                    *r = S::from_f64((1.0 - m) * r.to_f64_() + m * b.to_f64_());
                }
            });
            self.running_var.with_data_mut(|rv| {
                for (r, &b) in rv.iter_mut().zip(&var_v) {
                    *r = S::from_f64((1.0 - m) * r.to_f64_() + m * b.to_f64_() * bessel);
                }
            });
            Ok(y)
        } else {
            let xhat = x
                .sub(&self.running_mean)?
                .div(&self.running_var.add_scalar(S::from_f64(self.eps)).sqrt())?;
            xhat.mul(&self.gamma)?.add(&self.beta)
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut Visitor<S>) {
        f(&format!("{prefix}.gamma"), &self.gamma, ParamKind::Trainable);
        f(&format!("{prefix}.beta"), &self.beta, ParamKind::Trainable);
        f(&format!("{prefix}.running_mean"), &self.running_mean, ParamKind::Buffer);
        f(&format!("{prefix}.running_var"), &self.running_var, ParamKind::Buffer);
    }
}

/// Group normalization: statistics per `(image, group)`, no running state.
pub struct GroupNorm<S: Scalar> {
    pub groups: usize,
    pub gamma: Tensor<S>,
    pub beta: Tensor<S>,
    pub eps: f64,
}

impl<S: Scalar> GroupNorm<S> {
    pub fn new(groups: usize, c: usize) -> Result<Self> {
        if c % groups != 0 {
            return Err(Error::invalid(
                "groupnorm",
                format!("{c} channels not divisible into {groups} groups"),
            ));
        }
        Ok(Self {
            groups,
            gamma: Tensor::from_vec(vec![S::one(); c], &[1, c, 1, 1])?.requires_grad(true),
            beta: Tensor::from_vec(vec![S::zero(); c], &[1, c, 1, 1])?.requires_grad(true),
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let grouped = x.reshape(&[n, self.groups, c / self.groups * h * w])?;
        let mu = grouped.mean_axis(2, true)?;
        let centered = grouped.sub(&mu)?;
        let var = centered.mul(&centered)?.mean_axis(2, true)?;
        let xhat = centered
            .div(&var.add_scalar(S::from_f64(self.eps)).sqrt())?
            .reshape(&[n, c, h, w])?;
        xhat.mul(&self.gamma)?.add(&self.beta)
    }

    pub fn visit(&self, prefix: &str, f: &mut Visitor<S>) {
        f(&format!("{prefix}.gamma"), &self.gamma, ParamKind::Trainable);
        f(&format!("{prefix}.beta"), &self.beta, ParamKind::Trainable);
    }
}

/// Fully connected layer on `[M, in]` matrices.
pub struct Linear<S: Scalar> {
    pub w: Tensor<S>,
    pub b: Option<Tensor<S>>,
}

impl<S: Scalar> Linear<S> {
    pub fn new(init: &mut Init, cin: usize, cout: usize, bias: bool) -> Result<Self> {
        let w = Tensor::from_vec(init.kaiming(cout * cin, cin), &[cout, cin])?
            .requires_grad(true);
        let b = if bias {
            Some(Tensor::from_vec(init.kaiming(cout, cin), &[cout])?.requires_grad(true))
        } else {
            None
        };
        Ok(Self { w, b })
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        x.linear(&self.w, self.b.as_ref())
    }

    pub fn visit(&self, prefix: &str, f: &mut Visitor<S>) {
        f(&format!("{prefix}.w"), &self.w, ParamKind::Trainable);
        if let Some(b) = &self.b {
            f(&format!("{prefix}.b"), b, ParamKind::Trainable);
        }
    }
}

/// Conv → BatchNorm → SiLU, the detector's universal conv block. The conv
/// carries no bias; BatchNorm's shift makes it redundant.
pub struct ConvBnSilu<S: Scalar> {
    pub conv: Conv2d<S>,
    pub bn: BatchNorm2d<S>,
}

impl<S: Scalar> ConvBnSilu<S> {
    pub fn new(init: &mut Init, cin: usize, cout: usize, k: usize, stride: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::same(init, cin, cout, k, stride, false)?,
            bn: BatchNorm2d::new(cout)?,
        })
    }

    pub fn forward(&self, x: &Tensor<S>, train: bool) -> Result<Tensor<S>> {
        Ok(self.bn.forward(&self.conv.forward(x)?, train)?.silu())
    }

    pub fn visit(&self, prefix: &str, f: &mut Visitor<S>) {
        self.conv.visit(&format!("{prefix}.conv"), f);
        self.bn.visit(&format!("{prefix}.bn"), f);
    }
}

/// Two 3×3 conv blocks with an optional identity shortcut (only when input
/// and output widths agree, which is always true inside [`C2f`]).
pub struct Bottleneck<S: Scalar> {
    pub cv1: ConvBnSilu<S>,
    pub cv2: ConvBnSilu<S>,
    pub shortcut: bool,
}

impl<S: Scalar> Bottleneck<S> {
    pub fn new(init: &mut Init, c: usize, shortcut: bool) -> Result<Self> {
        Ok(Self {
            cv1: ConvBnSilu::new(init, c, c, 3, 1)?,
            cv2: ConvBnSilu::new(init, c, c, 3, 1)?,
            shortcut,
        })
    }

    pub fn forward(&self, x: &Tensor<S>, train: bool) -> Result<Tensor<S>> {
        let y = self.cv2.forward(&self.cv1.forward(x, train)?, train)?;
        if self.shortcut {
            x.add(&y)
        } else {
            Ok(y)
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut Visitor<S>) {
        self.cv1.visit(&format!("{prefix}.cv1"), f);
        self.cv2.visit(&format!("{prefix}.cv2"), f);
    }
}

/// Split-transform-merge stage: a 1×1 expands to two half-width streams,
/// `n` bottlenecks chain off the second, and every intermediate (both
/// halves plus each bottleneck output) is concatenated into the closing
/// 1×1. Output width `c2`; hidden width `c2/2`.
pub struct C2f<S: Scalar> {
    pub cv1: ConvBnSilu<S>,
    pub blocks: Vec<Bottleneck<S>>,
    pub cv2: ConvBnSilu<S>,
    hidden: usize,
}

impl<S: Scalar> C2f<S> {
    pub fn new(init: &mut Init, cin: usize, cout: usize, n: usize, shortcut: bool) -> Result<Self> {
        let hidden = cout / 2;
        let cv1 = ConvBnSilu::new(init, cin, 2 * hidden, 1, 1)?;
        let blocks = (0..n)
            .map(|_| Bottleneck::new(init, hidden, shortcut))
            .collect::<Result<Vec<_>>>()?;
        let cv2 = ConvBnSilu::new(init, (2 + n) * hidden, cout, 1, 1)?;
        Ok(Self { cv1, blocks, cv2, hidden })
    }

    pub fn forward(&self, x: &Tensor<S>, train: bool) -> Result<Tensor<S>> {
        let y = self.cv1.forward(x, train)?;
        let mut parts = vec![y.narrow(1, 0, self.hidden)?, y.narrow(1, self.hidden, self.hidden)?];
        for b in &self.blocks {
            let last = parts.last().expect("starts with two halves");
            parts.push(b.forward(last, train)?);
        }
        self.cv2.forward(&Tensor::cat(&parts, 1)?, train)
    }

    pub fn visit(&self, prefix: &str, f: &mut Visitor<S>) {
        self.cv1.visit(&format!("{prefix}.cv1"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("{prefix}.m{i}"), f);
        }
        self.cv2.visit(&format!("{prefix}.cv2"), f);
    }
}

/// Spatial pyramid pooling (fast form): three chained 5×5 stride-1 max
/// pools emulate 5/9/13 receptive fields in one pass; all four scales are
/// concatenated between two 1×1 conv blocks.
pub struct Sppf<S: Scalar> {
    pub cv1: ConvBnSilu<S>,
    pub cv2: ConvBnSilu<S>,
    pub k: usize,
}

impl<S: Scalar> Sppf<S> {
    pub fn new(init: &mut Init, cin: usize, cout: usize) -> Result<Self> {
        let hidden = cin / 2;
        Ok(Self {
            cv1: ConvBnSilu::new(init, cin, hidden, 1, 1)?,
            cv2: ConvBnSilu::new(init, hidden * 4, cout, 1, 1)?,
            k: 5,
        })
    }

    pub fn forward(&self, x: &Tensor<S>, train: bool) -> Result<Tensor<S>> {
        let y0 = self.cv1.forward(x, train)?;
        let y1 = y0.maxpool2d(self.k, 1, self.k / 2)?;
        let y2 = y1.maxpool2d(self.k, 1, self.k / 2)?;
        let y3 = y2.maxpool2d(self.k, 1, self.k / 2)?;
        self.cv2.forward(&Tensor::cat(&[y0, y1, y2, y3], 1)?, train)
    }

    pub fn visit(&self, prefix: &str, f: &mut Visitor<S>) {
        self.cv1.visit(&format!("{prefix}.cv1"), f);
        self.cv2.visit(&format!("{prefix}.cv2"), f);
    }
}

/// Squeeze-expand channel MLP (`c → c/r → c`, ReLU between) applied to
/// `[M, C]` matrices. The channel-attention gates share one of these across
/// their pooled descriptors.
pub struct ChannelMlp<S: Scalar> {
    pub fc1: Linear<S>,
    pub fc2: Linear<S>,
}

impl<S: Scalar> ChannelMlp<S> {
    pub fn new(init: &mut Init, c: usize, reduction: usize, bias: bool) -> Result<Self> {
        let hidden = (c / reduction).max(1);
        Ok(Self {
            fc1: Linear::new(init, c, hidden, bias)?,
            fc2: Linear::new(init, hidden, c, bias)?,
        })
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        self.fc2.forward(&self.fc1.forward(x)?.relu())
    }

    pub fn visit(&self, prefix: &str, f: &mut Visitor<S>) {
        self.fc1.visit(&format!("{prefix}.fc1"), f);
        self.fc2.visit(&format!("{prefix}.fc2"), f);
    }
}

/// Collects every trainable parameter a `visit` walk reports.
pub fn collect_trainable<S: Scalar>(
    visit: impl FnOnce(&mut Visitor<S>),
) -> Vec<(String, Tensor<S>)> {
    let mut out = Vec::new();
    visit(&mut |name: &str, t: &Tensor<S>, kind| {
        if kind == ParamKind::Trainable {
            out.push((name.to_string(), t.clone()));
        }
    });
    out
}

/// Collects all parameters and buffers, for checkpointing.
pub fn collect_all<S: Scalar>(
    visit: impl FnOnce(&mut Visitor<S>),
) -> Vec<(String, Tensor<S>, ParamKind)> {
    let mut out = Vec::new();
    visit(&mut |name: &str, t: &Tensor<S>, kind| {
        out.push((name.to_string(), t.clone(), kind));
    });
    out
}
