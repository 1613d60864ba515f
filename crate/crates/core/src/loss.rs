//! Training losses: binary cross-entropy over class probabilities, a
//! distribution loss that pulls each box side's bin distribution toward the
//! two bins bracketing the continuous target, and complete-IoU box loss.
//! `total_loss` composes all three over a raw prediction and its assigned
//! targets, normalizing every term by the positive-cell count.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, RawPrediction, Targets, STRIDES};
use crate::tensor::{Scalar, Tensor};

/// Probabilities are clamped to `[EPS, 1−EPS]` before any logarithm.
pub const EPS: f64 = 1e-7;

/// Element weight for the BCE term and the three branch weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w: f64,
    pub box_w: f64,
    pub cls_w: f64,
    pub dfl_w: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { w: 1.0, box_w: 7.5, cls_w: 0.5, dfl_w: 1.5 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in
            [("w", self.w), ("box", self.box_w), ("cls", self.cls_w), ("dfl", self.dfl_w)]
        {
            if !(v >= 0.0) {
                return Err(Error::Config(format!("loss weight {name} must be ≥ 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// The composed scalar loss (still on the autodiff tape) plus the weighted
/// per-term values and the positive count used for normalization.
pub struct LossBreakdown<S: Scalar> {
    pub total: Tensor<S>,
    pub box_term: f64,
    pub cls_term: f64,
    pub dfl_term: f64,
    pub num_pos: usize,
}

/// Mean binary cross-entropy over probability/target pairs:
/// `−w·[y·ln x + (1−y)·ln(1−x)]`, probabilities clamped away from {0,1}.
pub fn bce(probs: &[f64], targets: &[f64], w: f64) -> Result<f64> {
    if probs.len() != targets.len() || probs.is_empty() {
        return Err(Error::invalid(
            "bce",
            format!("{} probabilities vs {} targets", probs.len(), targets.len()),
        ));
    }
    let mut sum = 0.0;
    for (&x, &y) in probs.iter().zip(targets) {
        let x = x.clamp(EPS, 1.0 - EPS);
        sum -= w * (y * x.ln() + (1.0 - y) * (1.0 - x).ln());
    }
    Ok(sum / probs.len() as f64)
}

/// Distribution loss for one box side: the continuous target `y` sits
/// between bins `n` and `n+1`, and the loss is the cross-entropy of the bin
/// distribution against weights `(n+1−y, y−n)` on those two bins.
pub fn dfl(bin_probs: &[f64], y: f64) -> Result<f64> {
    let reg_max = bin_probs.len();
    if reg_max < 2 {
        return Err(Error::invalid("dfl", "needs at least two bins"));
    }
    let top = (reg_max - 1) as f64;
    if !(0.0..=top).contains(&y) {
        return Err(Error::invalid("dfl", format!("target {y} outside [0, {top}]")));
    }
    // an exactly-top target leans entirely on the last bin
    let n = (y.floor() as usize).min(reg_max - 2);
    let (wl, wr) = ((n + 1) as f64 - y, y - n as f64);
    let pl = bin_probs[n].clamp(EPS, 1.0);
    let pr = bin_probs[n + 1].clamp(EPS, 1.0);
    Ok(-(wl * pl.ln() + wr * pr.ln()))
}

/// Cross-entropy of a probability vector against an arbitrary target
/// distribution; the independent route for checking [`dfl`].
pub fn cross_entropy(probs: &[f64], target: &[f64]) -> f64 {
    probs
        .iter()
        .zip(target)
        .map(|(&p, &t)| if t == 0.0 { 0.0 } else { -t * p.clamp(EPS, 1.0).ln() })
        .sum()
}

/// Complete-IoU loss between two corner-form boxes:
/// `1 − IoU + d²/c² + v²/((1−IoU)+v)` where `d` is the center distance,
/// `c` the enclosing-box diagonal, and `v` the squared arctangent gap of the
/// aspect ratios. Zero iff the boxes coincide.
pub fn ciou_xyxy(p: [f64; 4], g: [f64; 4]) -> Result<f64> {
    let (pw, ph) = (p[2] - p[0], p[3] - p[1]);
    let (gw, gh) = (g[2] - g[0], g[3] - g[1]);
    if pw <= 0.0 || ph <= 0.0 || gw <= 0.0 || gh <= 0.0 {
        return Err(Error::invalid("ciou", format!("degenerate box: pred {p:?}, gt {g:?}")));
    }
    let iw = (p[2].min(g[2]) - p[0].max(g[0])).max(0.0);
    let ih = (p[3].min(g[3]) - p[1].max(g[1])).max(0.0);
    let inter = iw * ih;
    let union = pw * ph + gw * gh - inter;
    let iou = inter / union;

    let d2 = (0.5 * (p[0] + p[2]) - 0.5 * (g[0] + g[2])).powi(2)
        + (0.5 * (p[1] + p[3]) - 0.5 * (g[1] + g[3])).powi(2);
    let cw = p[2].max(g[2]) - p[0].min(g[0]);
    let chh = p[3].max(g[3]) - p[1].min(g[1]);
    let c2 = cw * cw + chh * chh;

    let v = 4.0 / (std::f64::consts::PI * std::f64::consts::PI)
        * ((gw / gh).atan() - (pw / ph).atan()).powi(2);
    let denom = (1.0 - iou) + v;
    let aspect = if denom > 0.0 { v * v / denom } else { 0.0 };
    Ok((1.0 - iou) + d2 / c2 + aspect)
}

/// Expected bin index per side: softmax over the bin axis, then Σ b·p_b.
/// `[N, 4·reg_max, H, W] → [N, 4, H·W]` in stride units, on the tape.
fn side_distances<S: Scalar>(reg: &Tensor<S>, reg_max: usize) -> Result<Tensor<S>> {
    let (n, h, w) = (reg.dim(0), reg.dim(2), reg.dim(3));
    let probs = reg.reshape(&[n, 4, reg_max, h * w])?.softmax(2)?;
    let bins = Tensor::from_vec(
        (0..reg_max).map(|b| S::from_f64(b as f64)).collect(),
        &[1, 1, reg_max, 1],
    )?;
    probs.mul(&bins)?.sum_axis(2, false)
}

/// Softmaxed bin distributions `[N, 4, reg_max, H·W]`, on the tape.
fn bin_probs<S: Scalar>(reg: &Tensor<S>, reg_max: usize) -> Result<Tensor<S>> {
    let (n, h, w) = (reg.dim(0), reg.dim(2), reg.dim(3));
    reg.reshape(&[n, 4, reg_max, h * w])?.softmax(2)
}

/// Two-hot DFL target distribution with the same layout as [`bin_probs`];
/// all-zero rows at negative cells so their cross-entropy vanishes.
fn two_hot_targets<S: Scalar>(
    ltrb: &Tensor<S>,
    pos: &Tensor<S>,
    reg_max: usize,
) -> Result<Tensor<S>> {
    let (n, h, w) = (ltrb.dim(0), ltrb.dim(2), ltrb.dim(3));
    let hw = h * w;
    let lt = ltrb.to_vec();
    let pv = pos.to_vec();
    let mut out = vec![S::zero(); n * 4 * reg_max * hw];
    for img in 0..n {
        for cell in 0..hw {
            if pv[img * hw + cell].to_f64_() == 0.0 {
                continue;
            }
            for k in 0..4 {
                let y = lt[(img * 4 + k) * hw + cell].to_f64_();
                let bin = (y.floor() as usize).min(reg_max - 2);
                let base = ((img * 4 + k) * reg_max + bin) * hw + cell;
                out[base] = S::from_f64((bin + 1) as f64 - y);
                out[base + hw] = S::from_f64(y - bin as f64);
            }
        }
    }
    Tensor::from_vec(out, &[n, 4, reg_max, hw])
}

/// Differentiable CIoU per cell, `[N, 1, H·W]`. Ground-truth tensors carry
/// no gradient; epsilon guards keep masked-out negative cells finite.
fn ciou_cells<S: Scalar>(
    dist: &Tensor<S>,
    ltrb: &Tensor<S>,
    h: usize,
    w: usize,
) -> Result<Tensor<S>> {
    let eps = S::from_f64(EPS);
    let n = dist.dim(0);
    let hw = h * w;
    let gt = ltrb.reshape(&[n, 4, hw])?;

    // cell centers in stride units, broadcast over the batch
    let mut cx_d = vec![S::zero(); hw];
    let mut cy_d = vec![S::zero(); hw];
    for row in 0..h {
        for col in 0..w {
            cx_d[row * w + col] = S::from_f64(col as f64);
            cy_d[row * w + col] = S::from_f64(row as f64);
        }
    }
    let cx = Tensor::from_vec(cx_d, &[1, 1, hw])?;
    let cy = Tensor::from_vec(cy_d, &[1, 1, hw])?;

    let side = |t: &Tensor<S>, k: usize| t.narrow(1, k, 1);
    let corners = |l: &Tensor<S>, t: &Tensor<S>, r: &Tensor<S>, b: &Tensor<S>| -> Result<_> {
        Ok((l.neg().add(&cx)?, t.neg().add(&cy)?, r.add(&cx)?, b.add(&cy)?))
    };
    let (pl, pt, pr, pb) = (side(dist, 0)?, side(dist, 1)?, side(dist, 2)?, side(dist, 3)?);
    let (px1, py1, px2, py2) = corners(&pl, &pt, &pr, &pb)?;
    let (gl, gt_, gr, gb) = (side(&gt, 0)?, side(&gt, 1)?, side(&gt, 2)?, side(&gt, 3)?);
    let (gx1, gy1, gx2, gy2) = corners(&gl, &gt_, &gr, &gb)?;

    let iw = px2.minimum(&gx2)?.sub(&px1.maximum(&gx1)?)?.relu();
    let ih = py2.minimum(&gy2)?.sub(&py1.maximum(&gy1)?)?.relu();
    let inter = iw.mul(&ih)?;
    let (pw, ph) = (pl.add(&pr)?, pt.add(&pb)?);
    let (gw, gh) = (gl.add(&gr)?, gt_.add(&gb)?);
    let union = pw.mul(&ph)?.add(&gw.mul(&gh)?)?.sub(&inter)?;
    let iou = inter.div(&union.add_scalar(eps))?;

    let half = S::from_f64(0.5);
    let dx = pr.sub(&pl)?.scale(half).sub(&gr.sub(&gl)?.scale(half))?;
    let dy = pb.sub(&pt)?.scale(half).sub(&gb.sub(&gt_)?.scale(half))?;
    let d2 = dx.mul(&dx)?.add(&dy.mul(&dy)?)?;
    let ew = px2.maximum(&gx2)?.sub(&px1.minimum(&gx1)?)?;
    let eh = py2.maximum(&gy2)?.sub(&py1.minimum(&gy1)?)?;
    let c2 = ew.mul(&ew)?.add(&eh.mul(&eh)?)?;

    let ratio_g = gw.div(&gh.add_scalar(eps))?.atan();
    let ratio_p = pw.div(&ph.add_scalar(eps))?.atan();
    let gap = ratio_g.sub(&ratio_p)?;
    let four_pi2 = S::from_f64(4.0 / (std::f64::consts::PI * std::f64::consts::PI));
    let v = gap.mul(&gap)?.scale(four_pi2);

    let one_minus_iou = iou.rsub_scalar(S::one());
    let aspect = v.mul(&v)?.div(&one_minus_iou.add(&v)?.add_scalar(S::from_f64(1e-9)))?;
    one_minus_iou.add(&d2.div(&c2.add_scalar(eps))?)?.add(&aspect)
}

/// Compose classification, box, and distribution terms over all levels.
/// Every term is a sum normalized by `max(num_pos, 1)`, then weighted:
/// classification BCE runs over every cell, the box and distribution terms
/// over positive cells only.
pub fn total_loss<S: Scalar>(
    cfg: &ModelConfig,
    raw: &RawPrediction<S>,
    targets: &Targets<S>,
    weights: &LossWeights,
) -> Result<LossBreakdown<S>> {
    weights.validate()?;
    if raw.cls.len() != STRIDES.len() || targets.cls.len() != STRIDES.len() {
        return Err(Error::invalid("total_loss", "prediction/target level count mismatch"));
    }
    let eps = S::from_f64(EPS);
    let one_m_eps = S::from_f64(1.0 - EPS);
    let norm = S::from_f64(1.0 / targets.num_pos.max(1) as f64);

    let mut cls_sum: Option<Tensor<S>> = None;
    let mut box_sum: Option<Tensor<S>> = None;
    let mut dfl_sum: Option<Tensor<S>> = None;
    let acc = |slot: &mut Option<Tensor<S>>, v: Tensor<S>| -> Result<()> {
        *slot = Some(match slot.take() {
            Some(prev) => prev.add(&v)?,
            None => v,
        });
        Ok(())
    };

    for lvl in 0..STRIDES.len() {
        let (h, w) = (raw.cls[lvl].dim(2), raw.cls[lvl].dim(3));

        // classification: BCE against one-hot targets, every cell
        let x = raw.cls[lvl].sigmoid().clamp(eps, one_m_eps);
        let y = &targets.cls[lvl];
        let pos_part = y.mul(&x.ln())?;
        let neg_part = y.rsub_scalar(S::one()).mul(&x.rsub_scalar(S::one()).ln())?;
        acc(&mut cls_sum, pos_part.add(&neg_part)?.neg().sum_all())?;

        // box: CIoU at positive cells
        let dist = side_distances(&raw.reg[lvl], cfg.reg_max)?;
        let ciou = ciou_cells(&dist, &targets.ltrb[lvl], h, w)?;
        let n = ciou.dim(0);
        let pos = targets.pos[lvl].reshape(&[n, 1, h * w])?;
        acc(&mut box_sum, ciou.mul(&pos)?.sum_all())?;

        // distribution: cross-entropy against the two-hot targets, averaged
        // over the four sides; zero rows make negatives vanish on their own
        let probs = bin_probs(&raw.reg[lvl], cfg.reg_max)?;
        let two_hot = two_hot_targets(&targets.ltrb[lvl], &targets.pos[lvl], cfg.reg_max)?;
        let ce = two_hot.mul(&probs.clamp(eps, S::one()).ln())?.neg();
        acc(&mut dfl_sum, ce.sum_all().scale(S::from_f64(0.25)))?;
    }

    let cls = cls_sum.unwrap().scale(norm).scale(S::from_f64(weights.w * weights.cls_w));
    let boxl = box_sum.unwrap().scale(norm).scale(S::from_f64(weights.box_w));
    let dfll = dfl_sum.unwrap().scale(norm).scale(S::from_f64(weights.dfl_w));

    let (cls_term, box_term, dfl_term) = (
        cls.to_vec()[0].to_f64_(),
        boxl.to_vec()[0].to_f64_(),
        dfll.to_vec()[0].to_f64_(),
    );
    let total = cls.add(&boxl)?.add(&dfll)?;
    Ok(LossBreakdown {
        total,
        box_term,
        cls_term,
        dfl_term,
        num_pos: targets.num_pos,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{AttentionKind, AttentionSpec};
    use crate::model::{assign_targets, GtBox, Model, ModelSize};
    use crate::tensor::backward;
    use crate::tensor::gradcheck::{gradcheck, well_separated};
    use approx::assert_relative_eq;

    #[test]
    fn bce_hand_values() {
        assert!(bce(&[1.0], &[1.0], 1.0).unwrap() < 1e-4);
        assert_relative_eq!(
            bce(&[0.5], &[1.0], 1.0).unwrap(),
            std::f64::consts::LN_2,
            epsilon = 1e-4
        );
        assert_relative_eq!(
            bce(&[0.5], &[0.0], 2.0).unwrap(),
            2.0 * std::f64::consts::LN_2,
            epsilon = 1e-4
        );
        // mean semantics over several elements
        let m = bce(&[0.5, 0.5], &[1.0, 0.0], 1.0).unwrap();
        assert_relative_eq!(m, std::f64::consts::LN_2, epsilon = 1e-9);
        assert!(bce(&[0.5], &[1.0, 0.0], 1.0).is_err());
    }

    #[test]
    fn dfl_hand_values_and_edges() {
        let mut exact = vec![0.0; 16];
        exact[4] = 1.0;
        assert!(dfl(&exact, 4.0).unwrap().abs() < 1e-12);

        let mut split = vec![0.0; 16];
        split[4] = 0.7;
        split[5] = 0.3;
        let got = dfl(&split, 4.3).unwrap();
        assert_relative_eq!(got, 0.6108643021, epsilon = 1e-4);

        // top-of-range target uses the final bin pair
        let mut top = vec![0.0; 16];
        top[15] = 1.0;
        assert!(dfl(&top, 15.0).unwrap().abs() < 1e-12);

        assert!(dfl(&split, -0.1).is_err());
        assert!(dfl(&split, 15.01).is_err());
        assert!(dfl(&[1.0], 0.0).is_err());
    }

    #[test]
    fn dfl_equals_cross_entropy_against_two_hot() {
        // two independent routes to the same number, random distributions
        let mut state = 0x1234_5678_u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for reg_max in [4, 8, 16] {
            for _ in 0..40 {
                let mut probs: Vec<f64> = (0..reg_max).map(|_| next() + 1e-3).collect();
                let z: f64 = probs.iter().sum();
                probs.iter_mut().for_each(|p| *p /= z);
                let y = next() * (reg_max as f64 - 1.0);
                let n = (y.floor() as usize).min(reg_max - 2);
                let mut two_hot = vec![0.0; reg_max];
                two_hot[n] = (n + 1) as f64 - y;
                two_hot[n + 1] = y - n as f64;
                let a = dfl(&probs, y).unwrap();
                let b = cross_entropy(&probs, &two_hot);
                assert!((a - b).abs() < 1e-9, "reg_max={reg_max} y={y}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn dfl_is_minimized_at_the_interpolating_distribution() {
        // grid over p4 ∈ (0,1) with p5 = 1−p4: minimum at p4 = 0.7 for y=4.3
        let mut best = (f64::MAX, 0.0);
        let mut p = vec![0.0; 16];
        for i in 1..1000 {
            let p4 = i as f64 / 1000.0;
            p[4] = p4;
            p[5] = 1.0 - p4;
            let l = dfl(&p, 4.3).unwrap();
            if l < best.0 {
                best = (l, p4);
            }
        }
        assert!((best.1 - 0.7).abs() < 1e-3 + 1e-9, "argmin at {}", best.1);
    }

    #[test]
    fn ciou_hand_values() {
        assert!(ciou_xyxy([0.0, 0.0, 2.0, 2.0], [0.0, 0.0, 2.0, 2.0]).unwrap() < 1e-9);
        // disjoint, equal aspect: 1 − 0 + 16/40 + 0
        let got = ciou_xyxy([4.0, 0.0, 6.0, 2.0], [0.0, 0.0, 2.0, 2.0]).unwrap();
        assert_relative_eq!(got, 1.4, epsilon = 1e-4);
        assert!(ciou_xyxy([0.0, 0.0, 0.0, 2.0], [0.0, 0.0, 2.0, 2.0]).is_err());
    }

    #[test]
    fn ciou_is_symmetric_and_nonnegative() {
        let vals = well_separated(80, 91);
        for c in vals.chunks(8) {
            let mk = |s: &[f64]| {
                [
                    s[0],
                    s[1],
                    s[0] + s[2].abs() + 0.1,
                    s[1] + s[3].abs() + 0.1,
                ]
            };
            let (a, b) = (mk(&c[..4]), mk(&c[4..]));
            let ab = ciou_xyxy(a, b).unwrap();
            let ba = ciou_xyxy(b, a).unwrap();
            assert!(ab >= 0.0);
            assert_relative_eq!(ab, ba, epsilon = 1e-12);
        }
    }

    /// IoU by counting sub-pixel cells whose centers land in each box.
    fn iou_raster(a: [f64; 4], b: [f64; 4], step: f64) -> f64 {
        let x0 = a[0].min(b[0]) - step;
        let x1 = a[2].max(b[2]) + step;
        let y0 = a[1].min(b[1]) - step;
        let y1 = a[3].max(b[3]) + step;
        let (mut inter, mut union) = (0u64, 0u64);
        let mut y = y0 + step / 2.0;
        while y < y1 {
            let mut x = x0 + step / 2.0;
            while x < x1 {
                let in_a = x >= a[0] && x <= a[2] && y >= a[1] && y <= a[3];
                let in_b = x >= b[0] && x <= b[2] && y >= b[1] && y <= b[3];
                inter += (in_a && in_b) as u64;
                union += (in_a || in_b) as u64;
                x += step;
            }
            y += step;
        }
        inter as f64 / union as f64
    }

    #[test]
    fn rasterized_overlap_agrees_with_analytic_geometry() {
        // same-center 2×2 vs 4×1: IoU = 2/6, v from the aspect gap
        let a = [-1.0, -1.0, 1.0, 1.0];
        let b = [-2.0, -0.5, 2.0, 0.5];
        assert!((iou_raster(a, b, 0.005) - 1.0 / 3.0).abs() < 1e-3);
        let v = 4.0 / (std::f64::consts::PI * std::f64::consts::PI)
            * ((4.0f64).atan() - (1.0f64).atan()).powi(2);
        assert_relative_eq!(v, 0.11836, epsilon = 1e-4);
        let expect = (1.0 - 1.0 / 3.0) + 0.0 + v * v / ((1.0 - 1.0 / 3.0) + v);
        assert_relative_eq!(ciou_xyxy(b, a).unwrap(), expect, epsilon = 1e-9);
    }

    fn tiny_cfg() -> ModelConfig {
        let mut c = ModelConfig::new(ModelSize::NanoDesk, 2);
        c.input_size = 32;
        c.reg_max = 8;
        c
    }

    /// Hand-built raw prediction: all class logits strongly negative,
    /// uniform box bins.
    fn blank_raw(c: &ModelConfig, n: usize) -> RawPrediction<f64> {
        let (mut cls, mut reg) = (Vec::new(), Vec::new());
        for &stride in &STRIDES {
            let side = c.input_size / stride;
            cls.push(Tensor::from_vec(
                vec![-30.0; n * c.num_classes * side * side],
                &[n, c.num_classes, side, side],
            )
            .unwrap());
            reg.push(Tensor::<f64>::zeros(&[n, 4 * c.reg_max, side, side]));
        }
        RawPrediction { cls, reg }
    }

    #[test]
    fn no_positives_zeroes_box_and_distribution_terms() {
        let c = tiny_cfg();
        let t = assign_targets::<f64>(&c, &[vec![]]).unwrap();
        let raw = blank_raw(&c, 1);
        let out = total_loss(&c, &raw, &t, &LossWeights::default()).unwrap();
        assert_eq!(out.num_pos, 0);
        assert_eq!(out.box_term, 0.0);
        assert_eq!(out.dfl_term, 0.0);
        // all-negative logits cost one ε-clamp log per cell, nothing more
        assert!(out.cls_term > 0.0 && out.cls_term < 1e-4);
    }

    #[test]
    fn ideal_predictions_drive_the_loss_to_zero() {
        // stride-aligned corners make every distance target an integer, so
        // the ideal bin distribution is a true one-hot (fractional targets
        // bottom out at the two-hot entropy instead of zero)
        let c = tiny_cfg();
        let gt = GtBox { class: 1, x1: 0.0, y1: 0.0, x2: 32.0, y2: 32.0 };
        let t = assign_targets::<f64>(&c, &[vec![gt]]).unwrap();
        assert!(t.num_pos > 0);
        let raw = blank_raw(&c, 1);
        for lvl in 0..3 {
            let side = c.input_size / STRIDES[lvl];
            let hw = side * side;
            let pos = t.pos[lvl].to_vec();
            let cls_t = t.cls[lvl].to_vec();
            let ltrb = t.ltrb[lvl].to_vec();
            for cell in (0..hw).filter(|&i| pos[i] == 1.0) {
                raw.cls[lvl].with_data_mut(|d| {
                    for class in 0..c.num_classes {
                        if cls_t[class * hw + cell] == 1.0 {
                            d[class * hw + cell] = 30.0;
                        }
                    }
                });
                raw.reg[lvl].with_data_mut(|d| {
                    for k in 0..4 {
                        let y = ltrb[k * hw + cell];
                        let bin = (y.floor() as usize).min(c.reg_max - 2);
                        let frac = y - bin as f64;
                        for b in 0..c.reg_max {
                            d[(k * c.reg_max + b) * hw + cell] = if b == bin {
                                (1.0 - frac).max(1e-12).ln() + 40.0
                            } else if b == bin + 1 && frac > 0.0 {
                                frac.ln() + 40.0
                            } else {
                                -40.0
                            };
                        }
                    }
                });
            }
        }
        let out = total_loss(&c, &raw, &t, &LossWeights::default()).unwrap();
        let total = out.total.to_vec()[0];
        assert!(total < 1e-3, "ideal logits left loss at {total}");
    }

    #[test]
    fn box_term_matches_the_scalar_route() {
        // a single positive cell: the tensor-path CIoU must equal the plain
        // scalar computation on the decoded box
        let c = tiny_cfg();
        let gt = GtBox { class: 0, x1: 6.0, y1: 6.0, x2: 10.0, y2: 10.0 };
        let t = assign_targets::<f64>(&c, &[vec![gt.clone()]]).unwrap();
        assert_eq!(t.num_pos, 1);
        let raw = blank_raw(&c, 1);
        let vals = well_separated(4 * c.reg_max, 97);
        let side = c.input_size / STRIDES[0];
        raw.reg[0].with_data_mut(|d| {
            let hw = side * side;
            for (i, &v) in vals.iter().enumerate() {
                d[i * hw + (side + 1)] = v; // positive cell (1,1)
            }
        });
        let out = total_loss(&c, &raw, &t, &LossWeights::default()).unwrap();

        // independent expectation decode of the same logits
        let s = STRIDES[0] as f64;
        let mut dist = [0.0; 4];
        for (k, dk) in dist.iter_mut().enumerate() {
            let logits = &vals[k * c.reg_max..(k + 1) * c.reg_max];
            let m = logits.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            *dk = logits
                .iter()
                .enumerate()
                .map(|(b, l)| b as f64 * (l - m).exp())
                .sum::<f64>()
                / z
                * s;
        }
        let (cx, cy) = (8.0, 8.0);
        let pred = [cx - dist[0], cy - dist[1], cx + dist[2], cy + dist[3]];
        let scalar = ciou_xyxy(
            [pred[0] / s, pred[1] / s, pred[2] / s, pred[3] / s],
            [gt.x1 / s, gt.y1 / s, gt.x2 / s, gt.y2 / s],
        )
        .unwrap();
        assert_relative_eq!(out.box_term, 7.5 * scalar, epsilon = 1e-6);
    }

    #[test]
    fn loss_backprops_through_every_branch() {
        let c = tiny_cfg();
        let gt = vec![GtBox { class: 0, x1: 4.0, y1: 4.0, x2: 20.0, y2: 20.0 }];
        let t = assign_targets::<f64>(&c, &[gt]).unwrap();
        // raw maps as leaf tensors with gradients
        let (mut cls, mut reg) = (Vec::new(), Vec::new());
        let mut seed = 101;
        for &stride in &STRIDES {
            let side = c.input_size / stride;
            let cn = c.num_classes * side * side;
            let rn = 4 * c.reg_max * side * side;
            cls.push(
                Tensor::from_vec(well_separated(cn, seed), &[1, c.num_classes, side, side])
                    .unwrap()
                    .requires_grad(true),
            );
            reg.push(
                Tensor::from_vec(well_separated(rn, seed + 1), &[1, 4 * c.reg_max, side, side])
                    .unwrap()
                    .requires_grad(true),
            );
            seed += 2;
        }
        let raw = RawPrediction { cls: cls.clone(), reg: reg.clone() };
        let inputs: Vec<&Tensor<f64>> = cls.iter().chain(reg.iter()).collect();
        gradcheck(
            &inputs,
            || Ok(total_loss(&c, &raw, &t, &LossWeights::default())?.total),
            1e-5,
        )
        .unwrap();
    }

    #[test]
    fn full_model_training_loss_reaches_the_backbone() {
        let mut c = ModelConfig::new(ModelSize::NanoDesk, 2);
        c.input_size = 64;
        c.attention = AttentionSpec::new(AttentionKind::Sa);
        let m = Model::<f32>::build(&c, 5).unwrap();
        let img = Tensor::from_vec(
            well_separated(3 * 64 * 64, 7).into_iter().map(|v| v as f32).collect(),
            &[1, 3, 64, 64],
        )
        .unwrap();
        let gt = vec![vec![GtBox { class: 1, x1: 8.0, y1: 8.0, x2: 40.0, y2: 48.0 }]];
        let t = assign_targets::<f32>(&c, &gt).unwrap();
        let raw = m.forward(&img, true).unwrap();
        let out = total_loss(&c, &raw, &t, &LossWeights::default()).unwrap();
        assert!(out.num_pos > 0);
        backward(&out.total).unwrap();
        let params = crate::nn::collect_trainable(|f| m.visit(f));
        let stem = params.iter().find(|(n, _)| n == "backbone.stem.conv.w").unwrap();
        let g = stem.1.grad().expect("no gradient on the stem");
        assert!(g.iter().any(|&v| v != 0.0));
    }
}
