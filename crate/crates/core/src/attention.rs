//! Six pluggable attention variants, each a shape-preserving map
//! `[N,C,H,W] → [N,C,H,W]` that rescales features by learned gates in (0,1):
//!
//! * channel+spatial gating (`Cbam`), and the same refinement applied to a
//!   residual-block transform of the input with a shortcut (`ResCbam`);
//! * a single shared 1-D conv over pooled channel statistics (`Eca`);
//! * grouped half-split channel/spatial gating with a closing channel
//!   shuffle (`Sa`);
//! * full-map channel MLP gating plus a grouped 7×7 conv spatial gate
//!   (`Gam`), and its shortcut wrapper (`ResGam`), which by construction
//!   adds zero parameters and zero FLOPs over `Gam`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, ChannelMlp, Conv2d, GroupNorm, Init, Visitor};
use crate::tensor::{Scalar, Tensor};

/// Which attention module (if any) sits after each neck stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    None,
    Cbam,
    ResCbam,
    Eca,
    Sa,
    Gam,
    ResGam,
}

impl AttentionKind {
    pub const ALL: [AttentionKind; 7] = [
        AttentionKind::None,
        AttentionKind::Cbam,
        AttentionKind::ResCbam,
        AttentionKind::Eca,
        AttentionKind::Sa,
        AttentionKind::Gam,
        AttentionKind::ResGam,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttentionKind::None => "none",
            AttentionKind::Cbam => "cbam",
            AttentionKind::ResCbam => "rescbam",
            AttentionKind::Eca => "eca",
            AttentionKind::Sa => "sa",
            AttentionKind::Gam => "gam",
            AttentionKind::ResGam => "resgam",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown attention kind '{s}'")))
    }
}

/// Hyper-parameters for attention construction. `r` is the channel
/// reduction used by the gating MLPs (and the grouped spatial convs of the
/// global-attention variant); `groups` is the shuffle group count; `gamma`
/// and `b` drive the adaptive 1-D kernel size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionSpec {
    pub kind: AttentionKind,
    pub r: usize,
    pub groups: usize,
    pub gamma: f64,
    pub b: f64,
}

impl AttentionSpec {
    /// Kind with its conventional defaults: r=16 for the CBAM family, r=4
    /// for the GAM family, 8 shuffle groups, gamma=2 / b=1.
    pub fn new(kind: AttentionKind) -> Self {
        let r = match kind {
            AttentionKind::Gam | AttentionKind::ResGam => 4,
            _ => 16,
        };
        Self { kind, r, groups: 8, gamma: 2.0, b: 1.0 }
    }
}

/// Adaptive odd kernel size for the 1-D channel conv: nearest odd integer to
/// `|log2(C)/gamma + b/gamma|`, resolving an exactly-even value downward.
/// {32,64,128,256,512,1024} channels map to {3,3,3,5,5,5}.
pub fn eca_kernel_size(c: usize, gamma: f64, b: f64) -> Result<usize> {
    if c < 2 {
        return Err(Error::invalid("eca_kernel_size", format!("needs C ≥ 2, got {c}")));
    }
    let v = ((c as f64).log2() / gamma + b / gamma).abs();
    let t = v.trunc() as usize;
    let k = if t % 2 == 1 {
        t
    } else if v > t as f64 {
        t + 1
    } else {
        t.saturating_sub(1)
    };
    Ok(k.max(1))
}

/// Fixed channel permutation: view channels as a `groups × C/groups` grid,
/// transpose it, flatten. Interleaves the groups; `groups=1` is the
/// identity, and shuffling again with `C/groups` undoes it.
pub fn channel_shuffle<S: Scalar>(x: &Tensor<S>, groups: usize) -> Result<Tensor<S>> {
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    if c % groups != 0 {
        return Err(Error::invalid(
            "channel_shuffle",
            format!("{c} channels not divisible by {groups} groups"),
        ));
    }
    x.reshape(&[n, groups, c / groups, h * w])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[n, c, h, w])
}

/// Channel gate from pooled descriptors: average- and max-pooled channel
/// vectors share one squeeze-expand MLP, and the sum of both responses is
/// squashed to (0,1).
pub struct CbamChannel<S: Scalar> {
    pub mlp: ChannelMlp<S>,
    c: usize,
}

impl<S: Scalar> CbamChannel<S> {
    pub fn new(init: &mut Init, c: usize, r: usize) -> Result<Self> {
        if r < 1 || c % r != 0 {
            return Err(Error::invalid(
                "cbam_channel",
                format!("reduction {r} must divide {c} channels"),
            ));
        }
        Ok(Self { mlp: ChannelMlp::new(init, c, r, true)?, c })
    }

    /// `[N,C,H,W] → [N,C,1,1]`, every value in (0,1).
    pub fn gate(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let n = x.dim(0);
        let avg = self.mlp.forward(&x.gap()?.reshape(&[n, self.c])?)?;
        let max = self.mlp.forward(&x.gmp()?.reshape(&[n, self.c])?)?;
        avg.add(&max)?.sigmoid().reshape(&[n, self.c, 1, 1])
    }

    pub fn visit(&self, prefix: &str, f: &mut Visitor<S>) {
        self.mlp.visit(&format!("{prefix}.mlp"), f);
    }
}

/// Spatial gate: per-position mean and max across channels, stacked into a
/// two-channel map, mixed by a 7×7 conv, squashed to (0,1).
pub struct CbamSpatial<S: Scalar> {
    pub conv: Conv2d<S>,
}

impl<S: Scalar> CbamSpatial<S> {
    pub fn new(init: &mut Init) -> Result<Self> {
        Ok(Self { conv: Conv2d::new(init, 2, 1, 7, 1, (3, 3), 1, true)? })
    }

    /// `[N,C,H,W] → [N,1,H,W]`, every value in (0,1).
    pub fn gate(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let mean = x.mean_axis(1, true)?;
        let max = x.max_axis(1, true)?;
        let stacked = Tensor::cat(&[mean, max], 1)?;
        Ok(self.conv.forward(&stacked)?.sigmoid())
    }

    pub fn visit(&self, prefix: &str, f: &mut Visitor<S>) {
        self.conv.visit(&format!("{prefix}.conv"), f);
    }
}

/// Sequential channel-then-spatial gating.
pub struct Cbam<S: Scalar> {
    pub channel: CbamChannel<S>,
    pub spatial: CbamSpatial<S>,
}

impl<S: Scalar> Cbam<S> {
    pub fn new(init: &mut Init, c: usize, r: usize) -> Result<Self> {
        Ok(Self { channel: CbamChannel::new(init, c, r)?, spatial: CbamSpatial::new(init)? })
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let refined = x.mul(&self.channel.gate(x)?)?;
        let gated = refined.mul(&self.spatial.gate(&refined)?)?;
        Ok(gated)
    }

    pub fn visit(&self, prefix: &str, f: &mut Visitor<S>) {
        self.channel.visit(&format!("{prefix}.channel"), f);
        self.spatial.visit(&format!("{prefix}.spatial"), f);
    }
}

/// Width-preserving residual transform: conv3×3 → BN → ReLU → conv3×3 → BN,
/// plus the identity; no activation after the sum.
pub struct ResBlock<S: Scalar> {
    pub conv1: Conv2d<S>,
    pub bn1: BatchNorm2d<S>,
    pub conv2: Conv2d<S>,
    pub bn2: BatchNorm2d<S>,
}

impl<S: Scalar> ResBlock<S> {
    pub fn new(init: &mut Init, c: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::same(init, c, c, 3, 1, false)?,
            bn1: BatchNorm2d::new(c)?,
            conv2: Conv2d::same(init, c, c, 3, 1, false)?,
            bn2: BatchNorm2d::new(c)?,
        })
    }

    pub fn forward(&self, x: &Tensor<S>, train: bool) -> Result<Tensor<S>> {
        let y = self.bn1.forward(&self.conv1.forward(x)?, train)?.relu();
        let y = self.bn2.forward(&self.conv2.forward(&y)?, train)?;
        x.add(&y)
    }

    pub fn visit(&self, prefix: &str, f: &mut Visitor<S>) {
        self.conv1.visit(&format!("{prefix}.conv1"), f);
        self.bn1.visit(&format!("{prefix}.bn1"), f);
        self.conv2.visit(&format!("{prefix}.conv2"), f);
        self.bn2.visit(&format!("{prefix}.bn2"), f);
    }
}

/// Residual refinement: the input plus the channel/spatial-gated output of a
/// residual block over it. The residual block is what gives this variant its
/// extra capacity (and cost) over plain gating.
pub struct ResCbam<S: Scalar> {
    pub resblock: ResBlock<S>,
    pub cbam: Cbam<S>,
}

impl<S: Scalar> ResCbam<S> {
    pub fn new(init: &mut Init, c: usize, r: usize) -> Result<Self> {
        Ok(Self { resblock: ResBlock::new(init, c)?, cbam: Cbam::new(init, c, r)? })
    }

    pub fn forward(&self, x: &Tensor<S>, train: bool) -> Result<Tensor<S>> {
        let refined = self.cbam.forward(&self.resblock.forward(x, train)?)?;
        x.add(&refined)
    }

    pub fn visit(&self, prefix: &str, f: &mut Visitor<S>) {
        self.resblock.visit(&format!("{prefix}.resblock"), f);
        self.cbam.visit(&format!("{prefix}.cbam"), f);
    }
}

/// Single shared 1-D convolution over the averaged channel vector; kernel
/// size adapts to the channel count. The cheapest gate here: `k` weights.
pub struct Eca<S: Scalar> {
    pub w: Tensor<S>,
    c: usize,
}

impl<S: Scalar> Eca<S> {
    pub fn new(init: &mut Init, c: usize, gamma: f64, b: f64) -> Result<Self> {
        let k = eca_kernel_size(c, gamma, b)?;
        let w = Tensor::from_vec(init.kaiming(k, k), &[1, 1, k])?.requires_grad(true);
        Ok(Self { w, c })
    }

    /// `[N,C,H,W] → [N,C,1,1]`, every value in (0,1).
    pub fn gate(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let n = x.dim(0);
        let pooled = x.gap()?.reshape(&[n, 1, self.c])?;
        pooled.conv1d_same(&self.w)?.sigmoid().reshape(&[n, self.c, 1, 1])
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        x.mul(&self.gate(x)?)
    }

    pub fn visit(&self, prefix: &str, f: &mut Visitor<S>) {
        f(&format!("{prefix}.w"), &self.w, crate::nn::ParamKind::Trainable);
    }
}

/// Grouped half-split gating. Channels split into `groups` groups; each
/// group's first half gets a channel gate (pooled statistic through a
/// per-channel affine), the second half a spatial gate (per-channel
/// normalization through a per-channel affine); halves are re-concatenated
/// and the groups interleaved by a channel shuffle. Affine parameters are
/// shared across groups, so the whole module costs a few dozen scalars.
pub struct Sa<S: Scalar> {
    pub cweight: Tensor<S>,
    pub cbias: Tensor<S>,
    pub sweight: Tensor<S>,
    pub sbias: Tensor<S>,
    pub gn: GroupNorm<S>,
    pub groups: usize,
}

impl<S: Scalar> Sa<S> {
    pub fn new(c: usize, groups: usize) -> Result<Self> {
        if groups < 1 || c % (2 * groups) != 0 {
            return Err(Error::invalid(
                "sa",
                format!("{c} channels must be divisible by 2·{groups} groups"),
            ));
        }
        let half = c / (2 * groups);
        // gate affines start at identity-of-nothing: zero scale and shift,
        // which makes the initial gates exactly 0.5
        Ok(Self {
            cweight: Tensor::from_vec(vec![S::zero(); half], &[1, half, 1, 1])?
                .requires_grad(true),
            cbias: Tensor::from_vec(vec![S::zero(); half], &[1, half, 1, 1])?
                .requires_grad(true),
            sweight: Tensor::from_vec(vec![S::zero(); half], &[1, half, 1, 1])?
                .requires_grad(true),
            sbias: Tensor::from_vec(vec![S::zero(); half], &[1, half, 1, 1])?
                .requires_grad(true),
            gn: GroupNorm::new(half, half)?,
            groups,
        })
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let half = c / (2 * self.groups);
        // fold groups into the batch axis; affines broadcast across it
        let grouped = x.reshape(&[n * self.groups, 2 * half, h, w])?;
        let x1 = grouped.narrow(1, 0, half)?;
        let x2 = grouped.narrow(1, half, half)?;

        let cgate = x1.gap()?.mul(&self.cweight)?.add(&self.cbias)?.sigmoid();
        let x1 = x1.mul(&cgate)?;

        let sgate = self.gn.forward(&x2)?.mul(&self.sweight)?.add(&self.sbias)?.sigmoid();
        let x2 = x2.mul(&sgate)?;

        let merged = Tensor::cat(&[x1, x2], 1)?.reshape(&[n, c, h, w])?;
        channel_shuffle(&merged, self.groups)
    }

    pub fn visit(&self, prefix: &str, f: &mut Visitor<S>) {
        use crate::nn::ParamKind::Trainable;
        f(&format!("{prefix}.cweight"), &self.cweight, Trainable);
        f(&format!("{prefix}.cbias"), &self.cbias, Trainable);
        f(&format!("{prefix}.sweight"), &self.sweight, Trainable);
        f(&format!("{prefix}.sbias"), &self.sbias, Trainable);
        self.gn.visit(&format!("{prefix}.gn"), f);
    }
}

/// Global gating without pooling: a channel MLP applied at every spatial
/// position (via permutation to channels-last), then a spatial gate from a
/// squeeze-expand pair of grouped 7×7 convolutions.
pub struct Gam<S: Scalar> {
    pub mlp: ChannelMlp<S>,
    pub conv1: Conv2d<S>,
    pub bn1: BatchNorm2d<S>,
    pub conv2: Conv2d<S>,
    pub bn2: BatchNorm2d<S>,
    c: usize,
}

impl<S: Scalar> Gam<S> {
    pub fn new(init: &mut Init, c: usize, r: usize) -> Result<Self> {
        if r < 1 || c % r != 0 || (c / r) % r != 0 {
            return Err(Error::invalid(
                "gam",
                format!("reduction {r} must divide {c} and {c}/{r} for the grouped convs"),
            ));
        }
        Ok(Self {
            mlp: ChannelMlp::new(init, c, r, true)?,
            conv1: Conv2d::new(init, c, c / r, 7, 1, (3, 3), r, false)?,
            bn1: BatchNorm2d::new(c / r)?,
            conv2: Conv2d::new(init, c / r, c, 7, 1, (3, 3), r, false)?,
            bn2: BatchNorm2d::new(c)?,
            c,
        })
    }

    /// Per-position channel gate `[N,C,H,W]`, every value in (0,1).
    pub fn channel_gate(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let flat = x.permute(&[0, 2, 3, 1])?.reshape(&[n * h * w, c])?;
        let mixed = self.mlp.forward(&flat)?;
        Ok(mixed.reshape(&[n, h, w, c])?.permute(&[0, 3, 1, 2])?.sigmoid())
    }

    /// Spatial gate `[N,C,H,W]` from the squeeze-expand conv pair.
    pub fn spatial_gate(&self, x: &Tensor<S>, train: bool) -> Result<Tensor<S>> {
        let y = self.bn1.forward(&self.conv1.forward(x)?, train)?.relu();
        Ok(self.bn2.forward(&self.conv2.forward(&y)?, train)?.sigmoid())
    }

    pub fn forward(&self, x: &Tensor<S>, train: bool) -> Result<Tensor<S>> {
        let f2 = x.mul(&self.channel_gate(x)?)?;
        let gated = f2.mul(&self.spatial_gate(&f2, train)?)?;
        Ok(gated)
    }

    pub fn visit(&self, prefix: &str, f: &mut Visitor<S>) {
        self.mlp.visit(&format!("{prefix}.mlp"), f);
        self.conv1.visit(&format!("{prefix}.conv1"), f);
        self.bn1.visit(&format!("{prefix}.bn1"), f);
        self.conv2.visit(&format!("{prefix}.conv2"), f);
        self.bn2.visit(&format!("{prefix}.bn2"), f);
    }

    pub fn channels(&self) -> usize {
        self.c
    }
}

/// Identity shortcut around [`Gam`]: `F + gam(F)`. Shares the inner
/// structure exactly, so parameter and FLOP counts are identical to `Gam`.
pub struct ResGam<S: Scalar> {
    pub inner: Gam<S>,
}

impl<S: Scalar> ResGam<S> {
    pub fn new(init: &mut Init, c: usize, r: usize) -> Result<Self> {
        Ok(Self { inner: Gam::new(init, c, r)? })
    }

    pub fn forward(&self, x: &Tensor<S>, train: bool) -> Result<Tensor<S>> {
        x.add(&self.inner.forward(x, train)?)
    }

    pub fn visit(&self, prefix: &str, f: &mut Visitor<S>) {
        self.inner.visit(prefix, f);
    }
}

/// One attention module of any kind, as placed after a neck stage.
pub enum Attention<S: Scalar> {
    None,
    Cbam(Cbam<S>),
    ResCbam(ResCbam<S>),
    Eca(Eca<S>),
    Sa(Sa<S>),
    Gam(Gam<S>),
    ResGam(ResGam<S>),
}

impl<S: Scalar> Attention<S> {
    pub fn build(init: &mut Init, spec: &AttentionSpec, c: usize) -> Result<Self> {
        Ok(match spec.kind {
            AttentionKind::None => Attention::None,
            AttentionKind::Cbam => Attention::Cbam(Cbam::new(init, c, spec.r)?),
            AttentionKind::ResCbam => Attention::ResCbam(ResCbam::new(init, c, spec.r)?),
            AttentionKind::Eca => Attention::Eca(Eca::new(init, c, spec.gamma, spec.b)?),
            AttentionKind::Sa => Attention::Sa(Sa::new(c, spec.groups)?),
            AttentionKind::Gam => Attention::Gam(Gam::new(init, c, spec.r)?),
            AttentionKind::ResGam => Attention::ResGam(ResGam::new(init, c, spec.r)?),
        })
    }

    pub fn forward(&self, x: &Tensor<S>, train: bool) -> Result<Tensor<S>> {
        match self {
            Attention::None => Ok(x.clone()),
            Attention::Cbam(m) => m.forward(x),
            Attention::ResCbam(m) => m.forward(x, train),
            Attention::Eca(m) => m.forward(x),
            Attention::Sa(m) => m.forward(x),
            Attention::Gam(m) => m.forward(x, train),
            Attention::ResGam(m) => m.forward(x, train),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut Visitor<S>) {
        match self {
            Attention::None => {}
            Attention::Cbam(m) => m.visit(prefix, f),
            Attention::ResCbam(m) => m.visit(prefix, f),
            Attention::Eca(m) => m.visit(prefix, f),
            Attention::Sa(m) => m.visit(prefix, f),
            Attention::Gam(m) => m.visit(prefix, f),
            Attention::ResGam(m) => m.visit(prefix, f),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{collect_trainable, ParamKind};
    use crate::tensor::gradcheck::{gradcheck, well_separated, DEFAULT_TOL};
    use approx::assert_relative_eq;

    fn feature_map(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
        Tensor::from_vec(well_separated(n * c * h * w, seed), &[n, c, h, w]).unwrap()
    }

    fn zero_trainable(visit: impl FnOnce(&mut Visitor<f64>)) {
        visit(&mut |_name, t, kind| {
            if kind == ParamKind::Trainable {
                t.with_data_mut(|d| d.iter_mut().for_each(|v| *v = 0.0));
            }
        });
    }

    fn build(kind: AttentionKind, c: usize, seed: u64) -> Attention<f64> {
        let mut init = Init::new(seed);
        let mut spec = AttentionSpec::new(kind);
        if c < 32 {
            // keep divisibility at test widths
            spec.r = match kind {
                AttentionKind::Gam | AttentionKind::ResGam => 4,
                _ => 4,
            };
            spec.groups = 4;
        }
        Attention::build(&mut init, &spec, c).unwrap()
    }

    #[test]
    fn kernel_size_table_is_frozen() {
        let expect = [(32, 3), (64, 3), (128, 3), (256, 5), (512, 5), (1024, 5)];
        for (c, k) in expect {
            assert_eq!(eca_kernel_size(c, 2.0, 1.0).unwrap(), k, "C={c}");
        }
        assert_eq!(eca_kernel_size(2, 2.0, 1.0).unwrap(), 1);
        assert!(eca_kernel_size(1, 2.0, 1.0).is_err());
    }

    #[test]
    fn shuffle_interleaves_and_inverts() {
        // channels [a,b,c,d] with 2 groups → [a,c,b,d]
        let x = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[1, 4, 1, 1]).unwrap();
        let y = channel_shuffle(&x, 2).unwrap();
        assert_eq!(y.to_vec(), vec![1.0, 3.0, 2.0, 4.0]);
        // shuffling with C/G undoes it
        let back = channel_shuffle(&y, 2).unwrap();
        assert_eq!(back.to_vec(), x.to_vec());

        let id = channel_shuffle(&x, 1).unwrap();
        assert_eq!(id.to_vec(), x.to_vec());

        // multiset preserved on a bigger map
        let big = feature_map(1, 8, 2, 2, 3);
        let shuf = channel_shuffle(&big, 4).unwrap();
        let mut a = big.to_vec();
        let mut b = shuf.to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        assert_eq!(a, b);
    }

    #[test]
    fn every_kind_preserves_shape() {
        for kind in AttentionKind::ALL {
            for c in [16, 32] {
                let m = build(kind, c, 7);
                let x = feature_map(2, c, 4, 4, 11);
                let y = m.forward(&x, false).unwrap();
                assert_eq!(y.shape(), x.shape(), "{} C={c}", kind.name());
            }
        }
    }

    #[test]
    fn zero_init_fixed_points() {
        let x = feature_map(2, 16, 3, 3, 21);
        let xv = x.to_vec();
        // (kind, expected coefficient on F)
        let cases = [
            (AttentionKind::Cbam, 0.25),
            (AttentionKind::ResCbam, 1.25),
            (AttentionKind::Eca, 0.5),
            (AttentionKind::Gam, 0.25),
            (AttentionKind::ResGam, 1.25),
        ];
        for (kind, coef) in cases {
            let m = build(kind, 16, 5);
            zero_trainable(|f| m.visit("a", f));
            let y = m.forward(&x, false).unwrap().to_vec();
            for i in 0..xv.len() {
                assert_relative_eq!(y[i], coef * xv[i], epsilon = 1e-6);
            }
        }
        // the shuffle variant lands on half the shuffled input
        let m = build(AttentionKind::Sa, 16, 5);
        zero_trainable(|f| m.visit("a", f));
        let y = m.forward(&x, false).unwrap().to_vec();
        let shuffled = channel_shuffle(&x, 4).unwrap().to_vec();
        for i in 0..xv.len() {
            assert_relative_eq!(y[i], 0.5 * shuffled[i], epsilon = 1e-6);
        }
    }

    #[test]
    fn gates_stay_strictly_inside_unit_interval() {
        // positive input ⇒ gated output strictly between 0 and the input
        let n = 2 * 16 * 4 * 4;
        let pos: Vec<f64> = well_separated(n, 31).into_iter().map(|v| v.abs() + 0.2).collect();
        let x = Tensor::from_vec(pos.clone(), &[2, 16, 4, 4]).unwrap();
        for kind in [AttentionKind::Cbam, AttentionKind::Eca, AttentionKind::Gam] {
            let m = build(kind, 16, 13);
            let y = m.forward(&x, false).unwrap().to_vec();
            for i in 0..n {
                assert!(
                    y[i] > 0.0 && y[i] < pos[i],
                    "{}: gate left (0,1) at {i}: {} vs input {}",
                    kind.name(),
                    y[i],
                    pos[i]
                );
            }
        }
    }

    #[test]
    fn pooled_gates_ignore_spatial_permutation() {
        let x = feature_map(1, 16, 2, 2, 17);
        // reverse the 4 spatial positions via index_select on a flattened view
        let perm = x
            .reshape(&[1, 16, 4])
            .unwrap()
            .index_select(2, &[3, 2, 1, 0])
            .unwrap()
            .reshape(&[1, 16, 2, 2])
            .unwrap();

        // pooling reorders the summation, so equality is mathematical, not
        // bitwise; 1e-12 is far below the contract tolerance and far above
        // rounding noise
        let mut init = Init::new(19);
        let cbam = CbamChannel::<f64>::new(&mut init, 16, 4).unwrap();
        let (a, b) = (cbam.gate(&x).unwrap().to_vec(), cbam.gate(&perm).unwrap().to_vec());
        for i in 0..a.len() {
            assert_relative_eq!(a[i], b[i], epsilon = 1e-12);
        }

        let mut init = Init::new(23);
        let eca = Eca::<f64>::new(&mut init, 16, 2.0, 1.0).unwrap();
        let (a, b) = (eca.gate(&x).unwrap().to_vec(), eca.gate(&perm).unwrap().to_vec());
        for i in 0..a.len() {
            assert_relative_eq!(a[i], b[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn constant_channels_collapse_avg_and_max_paths() {
        // per-channel constant maps: GAP = GMP, so the gate is σ(2·MLP(v))
        let mut vals = Vec::new();
        for ch in 0..8 {
            vals.extend(std::iter::repeat(0.25 * ch as f64 - 1.0).take(9));
        }
        let x = Tensor::from_vec(vals, &[1, 8, 3, 3]).unwrap();
        let mut init = Init::new(29);
        let ch = CbamChannel::<f64>::new(&mut init, 8, 4).unwrap();
        let gate = ch.gate(&x).unwrap();

        let v = x.gap().unwrap().reshape(&[1, 8]).unwrap();
        let expect = ch.mlp.forward(&v).unwrap().scale(2.0).sigmoid().to_vec();
        let got = gate.to_vec();
        for i in 0..8 {
            assert_relative_eq!(got[i], expect[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn single_weight_kernel_gates_by_scaled_mean() {
        // C=2 ⇒ k=1; with weight w the gate is σ(w·mean_c)
        let mut init = Init::new(37);
        let eca = Eca::<f64>::new(&mut init, 2, 2.0, 1.0).unwrap();
        assert_eq!(eca.w.shape(), &[1, 1, 1]);
        eca.w.with_data_mut(|d| d[0] = 1.0);
        // channel means 0 and 1
        let x = Tensor::from_vec(vec![-1.0, 1.0, 0.5, 1.5], &[1, 2, 2, 1]).unwrap();
        let g = eca.gate(&x).unwrap().to_vec();
        assert_relative_eq!(g[0], 0.5, epsilon = 1e-12);
        assert_relative_eq!(g[1], 1.0 / (1.0 + (-1.0f64).exp()), epsilon = 1e-12);
    }

    #[test]
    fn group_perturbation_stays_in_its_lanes() {
        // pre-shuffle, group g owns channels [g·C/G, (g+1)·C/G); the shuffle
        // sends those to positions {i·G + g}. Perturbing one group must leave
        // every other output channel untouched.
        let c = 16;
        let g = 4;
        let m = match build(AttentionKind::Sa, c, 41) {
            Attention::Sa(m) => m,
            _ => unreachable!(),
        };
        let x = feature_map(1, c, 3, 3, 43);
        let base = m.forward(&x).unwrap().to_vec();

        let mut bumped = x.to_vec();
        let per = c / g; // channels per group
        for v in bumped[2 * per * 9..3 * per * 9].iter_mut() {
            *v += 0.37; // perturb group 2 only
        }
        let xb = Tensor::from_vec(bumped, &[1, c, 3, 3]).unwrap();
        let out = m.forward(&xb).unwrap().to_vec();

        let expected_changed: Vec<usize> = (0..per).map(|i| i * g + 2).collect();
        for ch in 0..c {
            let differs = (0..9).any(|p| (out[ch * 9 + p] - base[ch * 9 + p]).abs() > 1e-12);
            assert_eq!(
                differs,
                expected_changed.contains(&ch),
                "channel {ch} change state wrong"
            );
        }
    }

    #[test]
    fn shortcut_identities_hold_with_shared_parameters() {
        let x = feature_map(1, 16, 3, 3, 47);
        let m = match build(AttentionKind::ResGam, 16, 53) {
            Attention::ResGam(m) => m,
            _ => unreachable!(),
        };
        let with = m.forward(&x, false).unwrap().to_vec();
        let inner = m.inner.forward(&x, false).unwrap().to_vec();
        let xv = x.to_vec();
        for i in 0..xv.len() {
            assert_relative_eq!(with[i], inner[i] + xv[i], epsilon = 1e-12);
        }

        let rc = match build(AttentionKind::ResCbam, 16, 59) {
            Attention::ResCbam(m) => m,
            _ => unreachable!(),
        };
        let whole = rc.forward(&x, false).unwrap().to_vec();
        let refined = rc
            .cbam
            .forward(&rc.resblock.forward(&x, false).unwrap())
            .unwrap()
            .to_vec();
        for i in 0..xv.len() {
            assert_relative_eq!(whole[i], refined[i] + xv[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn shortcut_variant_parameter_counts_match_exactly() {
        let gam = build(AttentionKind::Gam, 32, 61);
        let resgam = build(AttentionKind::ResGam, 32, 61);
        let count = |m: &Attention<f64>| -> usize {
            collect_trainable(|f| m.visit("a", f))
                .iter()
                .map(|(_, t)| t.numel())
                .sum()
        };
        assert_eq!(count(&gam), count(&resgam));
        // and the CBAM-with-resblock variant is strictly bigger than both
        let rescbam = build(AttentionKind::ResCbam, 32, 61);
        assert!(count(&rescbam) > count(&gam));
    }

    fn check_gradients(kind: AttentionKind, train: bool, tol: f64) {
        let m = build(kind, 16, 67);
        let params = collect_trainable(|f| m.visit("a", f));
        let x = feature_map(2, 16, 2, 2, 71).requires_grad(true);
        let mut inputs: Vec<&Tensor<f64>> = vec![&x];
        inputs.extend(params.iter().map(|(_, t)| t));
        gradcheck(
            &inputs,
            || {
                let y = m.forward(&x, train)?;
                Ok(y.mul(&y)?.sum_all())
            },
            tol,
        )
        .unwrap_or_else(|e| {
            panic!("{} (train={train}) gradient check failed: {e}", kind.name())
        });
    }

    #[test]
    fn every_kind_backprops_to_input_and_parameters() {
        // gated at the standard tolerance; the batch-norm-bearing kinds run
        // in eval mode here because batch statistics bend the loss surface
        // enough that central differences at h=1e-4 pick up truncation error
        // (the batch-stat gradient path has its own dedicated check)
        for kind in [AttentionKind::Cbam, AttentionKind::Eca, AttentionKind::Sa] {
            check_gradients(kind, true, DEFAULT_TOL);
        }
        for kind in [AttentionKind::ResCbam, AttentionKind::Gam, AttentionKind::ResGam] {
            check_gradients(kind, false, DEFAULT_TOL);
        }
    }

    #[test]
    fn batch_stat_paths_backprop_within_truncation_error() {
        for kind in [AttentionKind::ResCbam, AttentionKind::Gam, AttentionKind::ResGam] {
            check_gradients(kind, true, 2e-4);
        }
    }
}
