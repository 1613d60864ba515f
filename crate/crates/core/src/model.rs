//! The detector: a strided CBS/C2f backbone with three pyramid taps, a
//! top-down + bottom-up fusion neck whose four C2f outputs each pass through
//! one attention module, and a decoupled per-level head predicting class
//! logits and discretized box-side distributions.
//!
//! Also home to the label assigner (center-radius), the box decoder
//! (distribution expectation → corner boxes), and greedy per-class NMS.

use serde::{Deserialize, Serialize};

use crate::attention::{Attention, AttentionSpec};
use crate::error::{Error, Result};
use crate::nn::{collect_trainable, C2f, Conv2d, ConvBnSilu, Init, Sppf, Visitor};
use crate::tensor::{Scalar, Tensor};

/// Detection strides, smallest (finest) first. Input sizes must be divisible
/// by the largest.
pub const STRIDES: [usize; 3] = [8, 16, 32];

/// A positive cell must lie within this many strides (L∞) of its box center.
pub const CENTER_RADIUS: f64 = 2.5;

/// Classification bias starts at a prior of 1%: early training is not
/// swamped by the overwhelmingly negative cells.
const CLS_PRIOR: f64 = 0.01;

/// Scale preset: depth multiple, width multiple, channel cap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelSize {
    NanoDesk,
    Small,
    Medium,
    Large,
}

impl ModelSize {
    pub const ALL: [ModelSize; 4] =
        [ModelSize::NanoDesk, ModelSize::Small, ModelSize::Medium, ModelSize::Large];

    pub fn multiples(self) -> (f64, f64, usize) {
        match self {
            ModelSize::NanoDesk => (0.34, 0.25, 1024),
            ModelSize::Small => (0.33, 0.50, 1024),
            ModelSize::Medium => (0.67, 0.75, 768),
            ModelSize::Large => (1.00, 1.00, 512),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelSize::NanoDesk => "nano-desk",
            ModelSize::Small => "small",
            ModelSize::Medium => "medium",
            ModelSize::Large => "large",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown model size '{s}'")))
    }
}

fn default_reg_max() -> usize {
    16
}
fn default_input_size() -> usize {
    160
}
fn default_attention() -> AttentionSpec {
    AttentionSpec::new(crate::attention::AttentionKind::None)
}
fn default_conf_thresh() -> f64 {
    0.25
}
fn default_nms_iou() -> f64 {
    0.45
}

/// Everything needed to rebuild a model deterministically (given a seed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub size: ModelSize,
    pub num_classes: usize,
    #[serde(default = "default_reg_max")]
    pub reg_max: usize,
    #[serde(default = "default_input_size")]
    pub input_size: usize,
    #[serde(default = "default_attention")]
    pub attention: AttentionSpec,
    #[serde(default = "default_conf_thresh")]
    pub conf_thresh: f64,
    #[serde(default = "default_nms_iou")]
    pub nms_iou: f64,
}

impl ModelConfig {
    pub fn new(size: ModelSize, num_classes: usize) -> Self {
        Self {
            size,
            num_classes,
            reg_max: default_reg_max(),
            input_size: default_input_size(),
            attention: default_attention(),
            conf_thresh: default_conf_thresh(),
            nms_iou: default_nms_iou(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be at least 1".into()));
        }
        if self.reg_max < 2 {
            return Err(Error::Config(format!(
                "reg_max must be at least 2, got {}",
                self.reg_max
            )));
        }
        if self.input_size == 0 || self.input_size % STRIDES[2] != 0 {
            return Err(Error::Config(format!(
                "input_size {} not divisible by the coarsest stride {}",
                self.input_size, STRIDES[2]
            )));
        }
        Ok(())
    }

    /// Width-scaled channel count: cap at `max_channels`, scale, round up to
    /// a multiple of 8.
    pub fn channels(&self, base: usize) -> usize {
        let (_, width, mc) = self.size.multiples();
        let scaled = base.min(mc) as f64 * width;
        ((scaled / 8.0).ceil() as usize).max(1) * 8
    }

    /// Depth-scaled bottleneck repeat count, never below one.
    pub fn reps(&self, base: usize) -> usize {
        let (depth, _, _) = self.size.multiples();
        ((base as f64 * depth).round() as usize).max(1)
    }

    /// Output channels of the four neck C2f stages (= the four attention
    /// insertion widths), in forward order.
    pub fn neck_channels(&self) -> [usize; 4] {
        [
            self.channels(512),
            self.channels(256),
            self.channels(512),
            self.channels(1024),
        ]
    }

    /// Feature-map side length at each stride for this input size.
    pub fn level_dims(&self) -> [usize; 3] {
        [
            self.input_size / STRIDES[0],
            self.input_size / STRIDES[1],
            self.input_size / STRIDES[2],
        ]
    }
}

/// Per-level classification and box-distribution maps, finest stride first.
pub struct RawPrediction<S: Scalar> {
    /// `[N, num_classes, H_l, W_l]` logits.
    pub cls: Vec<Tensor<S>>,
    /// `[N, 4·reg_max, H_l, W_l]` box-side bin logits, sides ordered l,t,r,b.
    pub reg: Vec<Tensor<S>>,
}

/// One decoded, thresholded, NMS-surviving box in input-image pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class: usize,
    pub score: f64,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

/// Ground-truth box in absolute input-image pixels, corner form.
#[derive(Debug, Clone, PartialEq)]
pub struct GtBox {
    pub class: usize,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl GtBox {
    pub fn cx(&self) -> f64 {
        0.5 * (self.x1 + self.x2)
    }
    pub fn cy(&self) -> f64 {
        0.5 * (self.y1 + self.y2)
    }
    pub fn area(&self) -> f64 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }
}

/// Dense per-cell training targets, one entry per level.
pub struct Targets<S: Scalar> {
    /// `[N, num_classes, H, W]` one-hot class targets (zero at negatives).
    pub cls: Vec<Tensor<S>>,
    /// `[N, 4, H, W]` left/top/right/bottom distances in stride units.
    pub ltrb: Vec<Tensor<S>>,
    /// `[N, 1, H, W]` 1.0 at positive cells.
    pub pos: Vec<Tensor<S>>,
    /// Total positive cells across the batch and all levels.
    pub num_pos: usize,
}

/// One decoupled head level: two 3×3 CBS stacks feeding 1×1 projections.
struct Head<S: Scalar> {
    cls1: ConvBnSilu<S>,
    cls2: ConvBnSilu<S>,
    cls_out: Conv2d<S>,
    reg1: ConvBnSilu<S>,
    reg2: ConvBnSilu<S>,
    reg_out: Conv2d<S>,
}

impl<S: Scalar> Head<S> {
    fn new(
        init: &mut Init,
        cin: usize,
        c_reg: usize,
        c_cls: usize,
        num_classes: usize,
        reg_max: usize,
    ) -> Result<Self> {
        let head = Self {
            cls1: ConvBnSilu::new(init, cin, c_cls, 3, 1)?,
            cls2: ConvBnSilu::new(init, c_cls, c_cls, 3, 1)?,
            cls_out: Conv2d::new(init, c_cls, num_classes, 1, 1, (0, 0), 1, true)?,
            reg1: ConvBnSilu::new(init, cin, c_reg, 3, 1)?,
            reg2: ConvBnSilu::new(init, c_reg, c_reg, 3, 1)?,
            reg_out: Conv2d::new(init, c_reg, 4 * reg_max, 1, 1, (0, 0), 1, true)?,
        };
        // class scores start near the 1% prior; box bins start mildly positive
        let prior = S::from_f64((CLS_PRIOR / (1.0 - CLS_PRIOR)).ln());
        if let Some(b) = &head.cls_out.b {
            b.with_data_mut(|d| d.iter_mut().for_each(|v| *v = prior));
        }
        if let Some(b) = &head.reg_out.b {
            b.with_data_mut(|d| d.iter_mut().for_each(|v| *v = S::one()));
        }
        Ok(head)
    }

    fn forward(&self, x: &Tensor<S>, train: bool) -> Result<(Tensor<S>, Tensor<S>)> {
        let c = self.cls2.forward(&self.cls1.forward(x, train)?, train)?;
        let r = self.reg2.forward(&self.reg1.forward(x, train)?, train)?;
        Ok((self.cls_out.forward(&c)?, self.reg_out.forward(&r)?))
    }

    fn visit(&self, prefix: &str, f: &mut Visitor<S>) {
        self.cls1.visit(&format!("{prefix}.cls1"), f);
        self.cls2.visit(&format!("{prefix}.cls2"), f);
        self.cls_out.visit(&format!("{prefix}.cls_out"), f);
        self.reg1.visit(&format!("{prefix}.reg1"), f);
        self.reg2.visit(&format!("{prefix}.reg2"), f);
        self.reg_out.visit(&format!("{prefix}.reg_out"), f);
    }
}

/// The assembled detector.
pub struct Model<S: Scalar> {
    pub cfg: ModelConfig,
    // backbone: strided descent with taps at strides 8/16/32
    stem: ConvBnSilu<S>,
    down1: ConvBnSilu<S>,
    stage1: C2f<S>,
    down2: ConvBnSilu<S>,
    stage2: C2f<S>, // → P3 tap
    down3: ConvBnSilu<S>,
    stage3: C2f<S>, // → P4 tap
    down4: ConvBnSilu<S>,
    stage4: C2f<S>,
    sppf: Sppf<S>, // → P5 tap
    // neck: top-down fusion, then bottom-up re-aggregation; each C2f output
    // passes through one attention module before flowing on
    fpn1: C2f<S>,
    att1: Attention<S>,
    fpn2: C2f<S>,
    att2: Attention<S>,
    pan_down1: ConvBnSilu<S>,
    pan1: C2f<S>,
    att3: Attention<S>,
    pan_down2: ConvBnSilu<S>,
    pan2: C2f<S>,
    att4: Attention<S>,
    heads: [Head<S>; 3],
}

impl<S: Scalar> Model<S> {
    /// Deterministic construction: the same config and seed always produce
    /// bitwise-identical initial weights.
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let init = &mut Init::new(seed);
        let ch = |base| cfg.channels(base);
        let (c1, c2, c3, c4) = (ch(64), ch(128), ch(256), ch(512));
        let c5 = ch(1024);
        let nk = cfg.neck_channels();
        let (deep, shallow, neck_n) = (cfg.reps(6), cfg.reps(3), cfg.reps(3));

        let att = |init: &mut Init, c: usize| -> Result<Attention<S>> {
            Attention::build(init, &cfg.attention, c).map_err(|e| {
                Error::Config(format!(
                    "attention '{}' cannot sit on a {c}-channel neck stage: {e}",
                    cfg.attention.kind.name()
                ))
            })
        };

        // head widths follow the finest-level channel count
        let c_reg = 16usize.max(c3 / 4).max(4 * cfg.reg_max);
        let c_cls = c3.max(cfg.num_classes.min(100));

        Ok(Self {
            cfg: cfg.clone(),
            stem: ConvBnSilu::new(init, 3, c1, 3, 2)?,
            down1: ConvBnSilu::new(init, c1, c2, 3, 2)?,
            stage1: C2f::new(init, c2, c2, shallow, true)?,
            down2: ConvBnSilu::new(init, c2, c3, 3, 2)?,
            stage2: C2f::new(init, c3, c3, deep, true)?,
            down3: ConvBnSilu::new(init, c3, c4, 3, 2)?,
            stage3: C2f::new(init, c4, c4, deep, true)?,
            down4: ConvBnSilu::new(init, c4, c5, 3, 2)?,
            stage4: C2f::new(init, c5, c5, shallow, true)?,
            sppf: Sppf::new(init, c5, c5)?,
            fpn1: C2f::new(init, c5 + c4, nk[0], neck_n, false)?,
            att1: att(init, nk[0])?,
            fpn2: C2f::new(init, nk[0] + c3, nk[1], neck_n, false)?,
            att2: att(init, nk[1])?,
            pan_down1: ConvBnSilu::new(init, nk[1], nk[1], 3, 2)?,
            pan1: C2f::new(init, nk[1] + nk[0], nk[2], neck_n, false)?,
            att3: att(init, nk[2])?,
            pan_down2: ConvBnSilu::new(init, nk[2], nk[2], 3, 2)?,
            pan2: C2f::new(init, nk[2] + c5, nk[3], neck_n, false)?,
            att4: att(init, nk[3])?,
            heads: [
                Head::new(init, nk[1], c_reg, c_cls, cfg.num_classes, cfg.reg_max)?,
                Head::new(init, nk[2], c_reg, c_cls, cfg.num_classes, cfg.reg_max)?,
                Head::new(init, nk[3], c_reg, c_cls, cfg.num_classes, cfg.reg_max)?,
            ],
        })
    }

    /// `[N,3,S,S] →` three levels of (class logits, box-bin logits), finest
    /// stride first. `S` must be divisible by 32.
    pub fn forward(&self, x: &Tensor<S>, train: bool) -> Result<RawPrediction<S>> {
        if x.rank() != 4 || x.dim(1) != 3 {
            return Err(Error::invalid(
                "model_forward",
                format!("expected [N,3,S,S] input, got {:?}", x.shape()),
            ));
        }
        let s = x.dim(2);
        if s != x.dim(3) || s % STRIDES[2] != 0 {
            return Err(Error::invalid(
                "model_forward",
                format!("input side {s}×{} must be square and divisible by 32", x.dim(3)),
            ));
        }

        // backbone
        let y = self.stem.forward(x, train)?;
        let y = self.down1.forward(&y, train)?;
        let y = self.stage1.forward(&y, train)?;
        let y = self.down2.forward(&y, train)?;
        let p3 = self.stage2.forward(&y, train)?;
        let y = self.down3.forward(&p3, train)?;
        let p4 = self.stage3.forward(&y, train)?;
        let y = self.down4.forward(&p4, train)?;
        let y = self.stage4.forward(&y, train)?;
        let p5 = self.sppf.forward(&y, train)?;

        // top-down: enrich finer maps with upsampled coarser context
        let t1 = Tensor::cat(&[p5.upsample_nearest2()?, p4], 1)?;
        let t1 = self.att1.forward(&self.fpn1.forward(&t1, train)?, train)?;
        let t2 = Tensor::cat(&[t1.upsample_nearest2()?, p3], 1)?;
        let n3 = self.att2.forward(&self.fpn2.forward(&t2, train)?, train)?;

        // bottom-up: push refined detail back down the pyramid
        let d1 = Tensor::cat(&[self.pan_down1.forward(&n3, train)?, t1], 1)?;
        let n4 = self.att3.forward(&self.pan1.forward(&d1, train)?, train)?;
        let d2 = Tensor::cat(&[self.pan_down2.forward(&n4, train)?, p5], 1)?;
        let n5 = self.att4.forward(&self.pan2.forward(&d2, train)?, train)?;

        let mut cls = Vec::with_capacity(3);
        let mut reg = Vec::with_capacity(3);
        for (head, feat) in self.heads.iter().zip([&n3, &n4, &n5]) {
            let (c, r) = head.forward(feat, train)?;
            cls.push(c);
            reg.push(r);
        }
        Ok(RawPrediction { cls, reg })
    }

    /// Canonical parameter traversal; names are stable and are the
    /// checkpoint keys.
    pub fn visit(&self, f: &mut Visitor<S>) {
        self.stem.visit("backbone.stem", f);
        self.down1.visit("backbone.down1", f);
        self.stage1.visit("backbone.stage1", f);
        self.down2.visit("backbone.down2", f);
        self.stage2.visit("backbone.stage2", f);
        self.down3.visit("backbone.down3", f);
        self.stage3.visit("backbone.stage3", f);
        self.down4.visit("backbone.down4", f);
        self.stage4.visit("backbone.stage4", f);
        self.sppf.visit("backbone.sppf", f);
        self.fpn1.visit("neck.fpn1", f);
        self.att1.visit("neck.att1", f);
        self.fpn2.visit("neck.fpn2", f);
        self.att2.visit("neck.att2", f);
        self.pan_down1.visit("neck.pan_down1", f);
        self.pan1.visit("neck.pan1", f);
        self.att3.visit("neck.att3", f);
        self.pan_down2.visit("neck.pan_down2", f);
        self.pan2.visit("neck.pan2", f);
        self.att4.visit("neck.att4", f);
        for (i, head) in self.heads.iter().enumerate() {
            head.visit(&format!("head.p{}", i + 3), f);
        }
    }

    /// Total trainable parameter count.
    pub fn param_count(&self) -> usize {
        collect_trainable(|f| self.visit(f)).iter().map(|(_, t)| t.numel()).sum()
    }

    /// Trainable parameters per section, keyed by name prefix:
    /// (backbone, neck, head).
    pub fn section_counts(&self) -> (usize, usize, usize) {
        let (mut bb, mut nk, mut hd) = (0, 0, 0);
        for (name, t) in collect_trainable(|f| self.visit(f)) {
            let n = t.numel();
            if name.starts_with("backbone.") {
                bb += n;
            } else if name.starts_with("neck.") {
                nk += n;
            } else {
                hd += n;
            }
        }
        (bb, nk, hd)
    }
}

/// Center-radius label assignment. A cell is positive iff its center
/// (`col·stride`, `row·stride`) lies inside a ground-truth box and within
/// `CENTER_RADIUS` strides (L∞) of that box's center; contested cells go to
/// the smaller box, then the earlier one. Regression targets are
/// center-to-side distances in stride units, clamped to the representable
/// bin range.
pub fn assign_targets<S: Scalar>(
    cfg: &ModelConfig,
    batch_gt: &[Vec<GtBox>],
) -> Result<Targets<S>> {
    cfg.validate()?;
    let n = batch_gt.len();
    let nc = cfg.num_classes;
    let t_max = (cfg.reg_max - 1) as f64 - 1e-3;

    let mut cls = Vec::with_capacity(3);
    let mut ltrb = Vec::with_capacity(3);
    let mut pos = Vec::with_capacity(3);
    let mut num_pos = 0usize;

    for (lvl, &stride) in STRIDES.iter().enumerate() {
        let side = cfg.level_dims()[lvl];
        let s = stride as f64;
        let mut cls_d = vec![S::zero(); n * nc * side * side];
        let mut box_d = vec![S::zero(); n * 4 * side * side];
        let mut pos_d = vec![S::zero(); n * side * side];

        for (img, gts) in batch_gt.iter().enumerate() {
            for gt in gts {
                if gt.class >= nc {
                    return Err(Error::invalid(
                        "assign_targets",
                        format!("class {} out of range for {nc} classes", gt.class),
                    ));
                }
                if gt.x2 <= gt.x1 || gt.y2 <= gt.y1 {
                    return Err(Error::invalid(
                        "assign_targets",
                        format!("degenerate box [{}, {}, {}, {}]", gt.x1, gt.y1, gt.x2, gt.y2),
                    ));
                }
            }
            for row in 0..side {
                for col in 0..side {
                    let (cx, cy) = (col as f64 * s, row as f64 * s);
                    let mut best: Option<&GtBox> = None;
                    for gt in gts {
                        let inside =
                            cx >= gt.x1 && cx <= gt.x2 && cy >= gt.y1 && cy <= gt.y2;
                        let near = (cx - gt.cx()).abs().max((cy - gt.cy()).abs())
                            <= CENTER_RADIUS * s;
                        if inside && near && best.is_none_or(|b| gt.area() < b.area()) {
                            best = Some(gt);
                        }
                    }
                    let Some(gt) = best else { continue };
                    num_pos += 1;
                    let cell = row * side + col;
                    pos_d[img * side * side + cell] = S::one();
                    cls_d[(img * nc + gt.class) * side * side + cell] = S::one();
                    let dists = [cx - gt.x1, cy - gt.y1, gt.x2 - cx, gt.y2 - cy];
                    for (k, d) in dists.into_iter().enumerate() {
                        box_d[(img * 4 + k) * side * side + cell] =
                            S::from_f64((d / s).clamp(0.0, t_max));
                    }
                }
            }
        }

        cls.push(Tensor::from_vec(cls_d, &[n, nc, side, side])?);
        ltrb.push(Tensor::from_vec(box_d, &[n, 4, side, side])?);
        pos.push(Tensor::from_vec(pos_d, &[n, 1, side, side])?);
    }

    Ok(Targets { cls, ltrb, pos, num_pos })
}

/// Intersection-over-union of two corner-form boxes; empty or degenerate
/// overlap yields zero.
pub fn iou_xyxy(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area_a = (a[2] - a[0]).max(0.0) * (a[3] - a[1]).max(0.0);
    let area_b = (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0);
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Greedy per-class suppression: scan candidates in descending score order,
/// dropping any whose IoU with an already-kept box of the same class reaches
/// `iou_thresh`. At most `max_out` boxes survive, best-scored first.
pub fn nms(mut candidates: Vec<Detection>, iou_thresh: f64, max_out: usize) -> Vec<Detection> {
    // total order: score desc, then class/coords — ties never depend on
    // input order, keeping runs reproducible
    candidates.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.class.cmp(&b.class))
            .then(a.x1.total_cmp(&b.x1))
            .then(a.y1.total_cmp(&b.y1))
    });
    let mut kept: Vec<Detection> = Vec::new();
    for cand in candidates {
        if kept.len() >= max_out {
            break;
        }
        let suppressed = kept.iter().any(|k| {
            k.class == cand.class
                && iou_xyxy([k.x1, k.y1, k.x2, k.y2], [cand.x1, cand.y1, cand.x2, cand.y2])
                    >= iou_thresh
        });
        if !suppressed {
            kept.push(cand);
        }
    }
    kept
}

/// Decode raw maps into per-image detections: each box side is the
/// expectation over its softmaxed bin distribution times the stride; class
/// scores are sigmoids kept above `conf_thresh`; overlaps resolved by
/// [`nms`]. Returns one list per image, best-scored first, at most 300 each.
pub fn decode<S: Scalar>(
    cfg: &ModelConfig,
    raw: &RawPrediction<S>,
    conf_thresh: f64,
    nms_iou: f64,
) -> Result<Vec<Vec<Detection>>> {
    if raw.cls.len() != 3 || raw.reg.len() != 3 {
        return Err(Error::invalid("decode", "expected three prediction levels"));
    }
    let n = raw.cls[0].dim(0);
    let nc = cfg.num_classes;
    let rm = cfg.reg_max;
    // Canvas bounds recovered from the finest level; boxes are clamped here so
    // exported coordinates survive a round trip through label files exactly.
    let canvas_w = (raw.cls[0].dim(3) * STRIDES[0]) as f64;
    let canvas_h = (raw.cls[0].dim(2) * STRIDES[0]) as f64;
    let mut out: Vec<Vec<Detection>> = vec![Vec::new(); n];

    for (lvl, &stride) in STRIDES.iter().enumerate() {
        let (h, w) = (raw.cls[lvl].dim(2), raw.cls[lvl].dim(3));
        let cls: Vec<f64> = raw.cls[lvl].to_vec().into_iter().map(|v| v.to_f64_()).collect();
        let reg: Vec<f64> = raw.reg[lvl].to_vec().into_iter().map(|v| v.to_f64_()).collect();
        let s = stride as f64;

        for img in 0..n {
            for row in 0..h {
                for col in 0..w {
                    let cell = row * w + col;
                    // softmax expectation per side, numerically stabilized
                    let mut dist = [0.0f64; 4];
                    for (k, d) in dist.iter_mut().enumerate() {
                        let at = |b: usize| reg[((img * 4 + k) * rm + b) * h * w + cell];
                        let mut m = f64::NEG_INFINITY;
                        for b in 0..rm {
                            m = m.max(at(b));
                        }
                        let (mut z, mut e) = (0.0, 0.0);
                        for b in 0..rm {
                            let p = (at(b) - m).exp();
                            z += p;
                            e += b as f64 * p;
                        }
                        *d = e / z * s;
                    }
                    let (cx, cy) = (col as f64 * s, row as f64 * s);
                    let x1 = (cx - dist[0]).clamp(0.0, canvas_w);
                    let y1 = (cy - dist[1]).clamp(0.0, canvas_h);
                    let x2 = (cx + dist[2]).clamp(0.0, canvas_w);
                    let y2 = (cy + dist[3]).clamp(0.0, canvas_h);
                    if x2 - x1 <= 1e-6 || y2 - y1 <= 1e-6 {
                        continue;
                    }
                    for class in 0..nc {
                        let logit = cls[(img * nc + class) * h * w + cell];
                        let score = 1.0 / (1.0 + (-logit).exp());
                        if score >= conf_thresh {
                            out[img].push(Detection { class, score, x1, y1, x2, y2 });
                        }
                    }
                }
            }
        }
    }

    Ok(out.into_iter().map(|dets| nms(dets, nms_iou, 300)).collect())
}
