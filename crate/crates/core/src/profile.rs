//! Analytic cost model: a per-layer parameter and FLOP table derived purely
//! from the configuration, mirroring the builder's structure layer for
//! layer. Conventions: FLOPs = 2·MACs; attention gate applications and
//! affine gate precursors count one operation per element; normalization,
//! activations, pooling, upsampling, concatenation, reshapes, and residual
//! additions are excluded; params count trainable tensors only.

use std::time::Instant;

use crate::attention::{eca_kernel_size, AttentionKind, AttentionSpec};
use crate::data::{prepare, Image};
use crate::error::{Error, Result};
use crate::model::{decode, Model, ModelConfig, STRIDES};
use crate::tensor::{no_grad, Scalar};

/// One row of the cost table. FLOPs are per image at the table's input size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerCost {
    pub name: String,
    pub params: u64,
    pub flops: u64,
}

/// Output side length of a same-padded convolution (odd kernel).
fn conv_out(h: usize, k: usize, stride: usize) -> usize {
    (h + 2 * (k / 2) - k) / stride + 1
}

struct Counter {
    rows: Vec<LayerCost>,
}

impl Counter {
    fn new() -> Self {
        Self { rows: Vec::new() }
    }

    fn push(&mut self, name: impl Into<String>, params: u64, flops: u64) {
        self.rows.push(LayerCost { name: name.into(), params, flops });
    }

    /// 2D convolution at `hw` output positions; weight `k²·(cin/g)·cout`.
    fn conv(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        groups: usize,
        bias: bool,
        hw: u64,
    ) {
        let weight = (k * k * (cin / groups) * cout) as u64;
        let mut params = weight;
        let mut flops = 2 * weight * hw;
        if bias {
            params += cout as u64;
            flops += cout as u64 * hw;
        }
        self.push(name, params, flops);
    }

    /// Batch norm: affine pair per channel; running statistics are buffers
    /// and normalization work is excluded by convention.
    fn bn(&mut self, name: &str, c: usize) {
        self.push(name, 2 * c as u64, 0);
    }

    fn linear(&mut self, name: &str, cin: usize, cout: usize, bias: bool, positions: u64) {
        let weight = (cin * cout) as u64;
        let mut params = weight;
        let mut flops = 2 * weight * positions;
        if bias {
            params += cout as u64;
            flops += cout as u64 * positions;
        }
        self.push(name, params, flops);
    }

    /// Pure elementwise work (gate applications, affine gate precursors).
    fn elementwise(&mut self, name: &str, flops: u64) {
        self.push(name, 0, flops);
    }

    fn cbs(&mut self, name: &str, cin: usize, cout: usize, k: usize, hw: u64) {
        self.conv(&format!("{name}.conv"), cin, cout, k, 1, false, hw);
        self.bn(&format!("{name}.bn"), cout);
    }

    fn c2f(&mut self, name: &str, cin: usize, cout: usize, n: usize, hw: u64) {
        let hidden = cout / 2;
        self.cbs(&format!("{name}.cv1"), cin, 2 * hidden, 1, hw);
        for i in 0..n {
            self.cbs(&format!("{name}.m{i}.cv1"), hidden, hidden, 3, hw);
            self.cbs(&format!("{name}.m{i}.cv2"), hidden, hidden, 3, hw);
        }
        self.cbs(&format!("{name}.cv2"), (2 + n) * hidden, cout, 1, hw);
    }

    fn sppf(&mut self, name: &str, cin: usize, cout: usize, hw: u64) {
        let hidden = cin / 2;
        self.cbs(&format!("{name}.cv1"), cin, hidden, 1, hw);
        self.cbs(&format!("{name}.cv2"), hidden * 4, cout, 1, hw);
    }

    fn head(
        &mut self,
        name: &str,
        cin: usize,
        c_reg: usize,
        c_cls: usize,
        num_classes: usize,
        reg_max: usize,
        hw: u64,
    ) {
        self.cbs(&format!("{name}.cls1"), cin, c_cls, 3, hw);
        self.cbs(&format!("{name}.cls2"), c_cls, c_cls, 3, hw);
        self.conv(&format!("{name}.cls_out"), c_cls, num_classes, 1, 1, true, hw);
        self.cbs(&format!("{name}.reg1"), cin, c_reg, 3, hw);
        self.cbs(&format!("{name}.reg2"), c_reg, c_reg, 3, hw);
        self.conv(&format!("{name}.reg_out"), c_reg, 4 * reg_max, 1, 1, true, hw);
    }

    fn channel_mlp(&mut self, name: &str, c: usize, r: usize, positions: u64) {
        let hidden = (c / r).max(1);
        self.linear(&format!("{name}.fc1"), c, hidden, true, positions);
        self.linear(&format!("{name}.fc2"), hidden, c, true, positions);
    }

    fn attention(&mut self, name: &str, spec: &AttentionSpec, c: usize, hw: u64) -> Result<()> {
        let chw = c as u64 * hw;
        match spec.kind {
            AttentionKind::None => {}
            AttentionKind::Cbam => {
                self.cbam(name, spec, c, hw);
            }
            AttentionKind::ResCbam => {
                self.conv(&format!("{name}.resblock.conv1"), c, c, 3, 1, false, hw);
                self.bn(&format!("{name}.resblock.bn1"), c);
                self.conv(&format!("{name}.resblock.conv2"), c, c, 3, 1, false, hw);
                self.bn(&format!("{name}.resblock.bn2"), c);
                self.cbam(&format!("{name}.cbam"), spec, c, hw);
            }
            AttentionKind::Eca => {
                let k = eca_kernel_size(c, spec.gamma, spec.b)?;
                // 1D convolution along the channel axis: c output positions
                self.push(&format!("{name}.w"), k as u64, 2 * (k * c) as u64);
                self.elementwise(&format!("{name}.gate"), chw);
            }
            AttentionKind::Sa => {
                let half = c / (2 * spec.groups);
                for t in ["cweight", "cbias", "sweight", "sbias"] {
                    self.push(&format!("{name}.{t}"), half as u64, 0);
                }
                self.push(&format!("{name}.gn"), 2 * half as u64, 0);
                // channel affine acts on pooled vectors, spatial affine on
                // the normalized half; each gate scales half the channels
                self.elementwise(&format!("{name}.channel_gate"), c as u64 + chw / 2);
                self.elementwise(&format!("{name}.spatial_gate"), chw + chw / 2);
            }
            AttentionKind::Gam | AttentionKind::ResGam => {
                self.channel_mlp(&format!("{name}.mlp"), c, spec.r, hw);
                self.elementwise(&format!("{name}.channel_gate"), chw);
                let mid = c / spec.r;
                self.conv(&format!("{name}.conv1"), c, mid, 7, spec.r, false, hw);
                self.bn(&format!("{name}.bn1"), mid);
                self.conv(&format!("{name}.conv2"), mid, c, 7, spec.r, false, hw);
                self.bn(&format!("{name}.bn2"), c);
                self.elementwise(&format!("{name}.spatial_gate"), chw);
            }
        }
        Ok(())
    }

    fn cbam(&mut self, name: &str, spec: &AttentionSpec, c: usize, hw: u64) {
        // the shared MLP runs twice, on the average- and max-pooled vectors
        self.channel_mlp(&format!("{name}.channel.mlp"), c, spec.r, 2);
        self.elementwise(&format!("{name}.channel.gate"), c as u64 * hw);
        self.conv(&format!("{name}.spatial.conv"), 2, 1, 7, 1, true, hw);
        self.elementwise(&format!("{name}.spatial.gate"), c as u64 * hw);
    }
}

/// Per-layer costs for one image at `input_size`, in builder order. Row
/// names follow the parameter-walk prefixes.
pub fn cost_table(cfg: &ModelConfig, input_size: usize) -> Result<Vec<LayerCost>> {
    cfg.validate()?;
    if input_size % STRIDES[2] != 0 || input_size == 0 {
        return Err(Error::invalid(
            "cost_table",
            format!("input size {input_size} must be a positive multiple of 32"),
        ));
    }
    let ch = |base| cfg.channels(base);
    let (c1, c2, c3, c4, c5) = (ch(64), ch(128), ch(256), ch(512), ch(1024));
    let nk = cfg.neck_channels();
    let (deep, shallow, neck_n) = (cfg.reps(6), cfg.reps(3), cfg.reps(3));
    let c_reg = 16usize.max(c3 / 4).max(4 * cfg.reg_max);
    let c_cls = c3.max(cfg.num_classes.min(100));

    let s = input_size;
    let sq = |side: usize| (side * side) as u64;
    let (d2, d4, d8, d16, d32) = (
        conv_out(s, 3, 2),
        conv_out(conv_out(s, 3, 2), 3, 2),
        s / STRIDES[0],
        s / STRIDES[1],
        s / STRIDES[2],
    );

    let t = &mut Counter::new();
    t.cbs("backbone.stem", 3, c1, 3, sq(d2));
    t.cbs("backbone.down1", c1, c2, 3, sq(d4));
    t.c2f("backbone.stage1", c2, c2, shallow, sq(d4));
    t.cbs("backbone.down2", c2, c3, 3, sq(d8));
    t.c2f("backbone.stage2", c3, c3, deep, sq(d8));
    t.cbs("backbone.down3", c3, c4, 3, sq(d16));
    t.c2f("backbone.stage3", c4, c4, deep, sq(d16));
    t.cbs("backbone.down4", c4, c5, 3, sq(d32));
    t.c2f("backbone.stage4", c5, c5, shallow, sq(d32));
    t.sppf("backbone.sppf", c5, c5, sq(d32));

    t.c2f("neck.fpn1", c5 + c4, nk[0], neck_n, sq(d16));
    t.attention("neck.att1", &cfg.attention, nk[0], sq(d16))?;
    t.c2f("neck.fpn2", nk[0] + c3, nk[1], neck_n, sq(d8));
    t.attention("neck.att2", &cfg.attention, nk[1], sq(d8))?;
    t.cbs("neck.pan_down1", nk[1], nk[1], 3, sq(d16));
    t.c2f("neck.pan1", nk[1] + nk[0], nk[2], neck_n, sq(d16));
    t.attention("neck.att3", &cfg.attention, nk[2], sq(d16))?;
    t.cbs("neck.pan_down2", nk[2], nk[2], 3, sq(d32));
    t.c2f("neck.pan2", nk[2] + c5, nk[3], neck_n, sq(d32));
    t.attention("neck.att4", &cfg.attention, nk[3], sq(d32))?;

    for (i, (cin, d)) in [(nk[1], d8), (nk[2], d16), (nk[3], d32)].into_iter().enumerate() {
        let level = ["p3", "p4", "p5"][i];
        t.head(&format!("head.{level}"), cin, c_reg, c_cls, cfg.num_classes, cfg.reg_max, sq(d));
    }
    Ok(std::mem::take(&mut t.rows))
}

/// Total trainable parameter count, independent of input size.
pub fn count_params(cfg: &ModelConfig) -> Result<u64> {
    Ok(cost_table(cfg, cfg.input_size)?.iter().map(|r| r.params).sum())
}

/// Total per-image FLOPs at the given input size.
pub fn count_flops(cfg: &ModelConfig, input_size: usize) -> Result<u64> {
    Ok(cost_table(cfg, input_size)?.iter().map(|r| r.flops).sum())
}

/// Aligned-text cost table with a header stating the counting conventions.
pub fn render_cost_table(cfg: &ModelConfig, input_size: usize) -> Result<String> {
    let table = cost_table(cfg, input_size)?;
    let name_w = table.iter().map(|r| r.name.len()).max().unwrap_or(5).max(5);
    let mut out = String::new();
    out.push_str("# FLOPs counted as 2*MACs per image: conv 2*k^2*(Cin/groups)*Cout*H'*W'\n");
    out.push_str("# (+Cout*H'*W' with bias), linear 2*in*out (+out with bias) per position,\n");
    out.push_str("# attention gates one op per element. Normalization, activations, pooling,\n");
    out.push_str("# upsampling, concatenation, reshapes, residual additions, and decode/NMS\n");
    out.push_str("# post-processing are excluded. Params count trainable tensors only;\n");
    out.push_str("# batch-norm running statistics are carried state, not parameters.\n");
    out.push_str(&format!(
        "# model={} attention={} classes={} input={}\n",
        cfg.size.name(),
        cfg.attention.kind.name(),
        cfg.num_classes,
        input_size
    ));
    out.push_str(&format!("{:<name_w$}  {:>12}  {:>16}\n", "layer", "params", "flops"));
    let (mut p, mut f) = (0u64, 0u64);
    for r in &table {
        out.push_str(&format!("{:<name_w$}  {:>12}  {:>16}\n", r.name, r.params, r.flops));
        p += r.params;
        f += r.flops;
    }
    out.push_str(&format!("{:<name_w$}  {:>12}  {:>16}\n", "total", p, f));
    Ok(out)
}

/// Wall-clock mean milliseconds per image for the full inference path —
/// letterbox preprocessing, the forward pass, and decode/NMS — averaged
/// over `reps` timed passes after `warmup` discarded ones.
pub fn time_inference<S: Scalar>(
    model: &Model<S>,
    images: &[Image],
    warmup: usize,
    reps: usize,
) -> Result<f64> {
    if reps == 0 {
        return Err(Error::invalid("time_inference", "need at least one timed rep"));
    }
    if images.is_empty() {
        return Err(Error::invalid("time_inference", "need at least one image"));
    }
    let cfg = &model.cfg;
    let size = cfg.input_size;
    let run = || -> Result<()> {
        no_grad(|| {
            for img in images {
                let (t, _, _) = prepare::<S>(img, &[], size)?;
                let x = t.reshape(&[1, 3, size, size])?;
                let raw = model.forward(&x, false)?;
                decode(cfg, &raw, cfg.conf_thresh, cfg.nms_iou)?;
            }
            Ok(())
        })
    };
    for _ in 0..warmup {
        run()?;
    }
    let start = Instant::now();
    for _ in 0..reps {
        run()?;
    }
    let total_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(total_ms / (reps * images.len()) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, ModelSize};

    fn cfg(size: ModelSize, kind: AttentionKind) -> ModelConfig {
        let mut c = ModelConfig::new(size, 2);
        c.attention = AttentionSpec::new(kind);
        c
    }

    #[test]
    fn frozen_conv_param_example() {
        let mut t = Counter::new();
        t.conv("probe", 2, 4, 3, 1, true, 1);
        assert_eq!(t.rows[0].params, 76);
    }

    #[test]
    fn analytic_params_match_built_models_exactly() {
        for size in ModelSize::ALL {
            for kind in AttentionKind::ALL {
                let cfg = cfg(size, kind);
                let model = Model::<f64>::build(&cfg, 11).unwrap();
                let analytic = count_params(&cfg).unwrap();
                assert_eq!(
                    analytic,
                    model.param_count() as u64,
                    "{} / {}",
                    size.name(),
                    kind.name()
                );
            }
        }
    }

    #[test]
    fn section_splits_match_the_parameter_walk() {
        for kind in AttentionKind::ALL {
            let cfg = cfg(ModelSize::NanoDesk, kind);
            let model = Model::<f64>::build(&cfg, 3).unwrap();
            let (bb, nk, hd) = model.section_counts();
            let table = cost_table(&cfg, cfg.input_size).unwrap();
            let sum = |p: &str| -> u64 {
                table.iter().filter(|r| r.name.starts_with(p)).map(|r| r.params).sum()
            };
            assert_eq!(sum("backbone."), bb as u64, "{}", kind.name());
            assert_eq!(sum("neck."), nk as u64, "{}", kind.name());
            assert_eq!(sum("head."), hd as u64, "{}", kind.name());
        }
    }

    #[test]
    fn shortcut_wrapper_costs_nothing_extra() {
        for size in [ModelSize::NanoDesk, ModelSize::Large] {
            let gam = cfg(size, AttentionKind::Gam);
            let resgam = cfg(size, AttentionKind::ResGam);
            assert_eq!(count_params(&gam).unwrap(), count_params(&resgam).unwrap());
            assert_eq!(
                count_flops(&gam, gam.input_size).unwrap(),
                count_flops(&resgam, resgam.input_size).unwrap()
            );
        }
    }

    #[test]
    fn added_cost_ordering_holds_at_both_scale_extremes() {
        for size in [ModelSize::NanoDesk, ModelSize::Large] {
            let base_p = count_params(&cfg(size, AttentionKind::None)).unwrap();
            let base_f = {
                let c = cfg(size, AttentionKind::None);
                count_flops(&c, c.input_size).unwrap()
            };
            let added = |kind: AttentionKind| -> (u64, u64) {
                let c = cfg(size, kind);
                (
                    count_params(&c).unwrap() - base_p,
                    count_flops(&c, c.input_size).unwrap() - base_f,
                )
            };
            let rescbam = added(AttentionKind::ResCbam);
            let gam = added(AttentionKind::Gam);
            let resgam = added(AttentionKind::ResGam);
            let sa = added(AttentionKind::Sa);
            let eca = added(AttentionKind::Eca);
            for pick in [|v: (u64, u64)| v.0, |v: (u64, u64)| v.1] {
                assert!(pick(rescbam) > pick(gam), "{}", size.name());
                assert_eq!(pick(gam), pick(resgam), "{}", size.name());
                assert!(pick(gam) > pick(sa), "{}", size.name());
                assert!(pick(sa) > 0 && pick(eca) > 0, "{}", size.name());
            }
            // the two lightweight kinds are indistinguishable at model scale
            let near = |a: u64, b: u64, whole: u64| {
                (a.abs_diff(b) as f64) / (whole as f64) < 1e-3
            };
            assert!(near(sa.0, eca.0, base_p), "{}", size.name());
            assert!(near(sa.1, eca.1, base_f), "{}", size.name());
        }
    }

    #[test]
    fn large_build_matches_frozen_parameter_budget() {
        // structural fingerprints at 9 classes; any drift in widths, depth,
        // or layer inventory moves these
        let mut base = ModelConfig::new(ModelSize::Large, 9);
        assert_eq!(count_params(&base).unwrap(), 43_636_763);
        base.attention = AttentionSpec::new(AttentionKind::Gam);
        assert_eq!(count_params(&base).unwrap(), 49_287_771);
    }

    #[test]
    fn flops_grow_strictly_with_input_size_and_params_do_not() {
        let c = cfg(ModelSize::NanoDesk, AttentionKind::ResCbam);
        let f = |s| count_flops(&c, s).unwrap();
        assert!(f(160) < f(320) && f(320) < f(640));
        let params = |s| cost_table(&c, s).unwrap().iter().map(|r| r.params).sum::<u64>();
        assert_eq!(params(160), params(640));
        assert!(cost_table(&c, 50).is_err());
    }

    #[test]
    fn measured_latency_is_positive_and_tracks_input_size() {
        let img = crate::data::synth_shapes(2, 1, 2, 96).unwrap().remove(0).image;
        let mut small = cfg(ModelSize::NanoDesk, AttentionKind::None);
        small.input_size = 64;
        let mut big = small.clone();
        big.input_size = 128;
        let m_small = Model::<f64>::build(&small, 5).unwrap();
        let m_big = Model::<f64>::build(&big, 5).unwrap();
        let t_small = time_inference(&m_small, &[img.clone()], 1, 3).unwrap();
        let t_big = time_inference(&m_big, &[img.clone()], 1, 3).unwrap();
        assert!(t_small > 0.0);
        // four times the pixels dwarf scheduler noise
        assert!(t_big >= t_small, "{t_big} ms at 128 vs {t_small} ms at 64");
        assert!(time_inference(&m_small, &[img.clone()], 0, 0).is_err());
        assert!(time_inference(&m_small, &[], 1, 1).is_err());
    }

    #[test]
    fn identity_attention_is_not_slower_than_the_heaviest() {
        let img = crate::data::synth_shapes(2, 1, 2, 96).unwrap().remove(0).image;
        let mut base = cfg(ModelSize::NanoDesk, AttentionKind::None);
        base.input_size = 64;
        let mut heavy = cfg(ModelSize::NanoDesk, AttentionKind::ResCbam);
        heavy.input_size = 64;
        let t_base = time_inference(&Model::<f64>::build(&base, 5).unwrap(), &[img.clone()], 1, 3)
            .unwrap();
        let t_heavy =
            time_inference(&Model::<f64>::build(&heavy, 5).unwrap(), &[img], 1, 3).unwrap();
        // ordering with ties allowed: a generous noise margin keeps this
        // meaningful without being flaky
        assert!(
            t_base <= t_heavy * 1.25,
            "identity neck took {t_base} ms vs {t_heavy} ms with the residual module"
        );
    }

    #[test]
    fn rendered_table_is_aligned_and_totals_agree() {
        let c = cfg(ModelSize::NanoDesk, AttentionKind::Cbam);
        let text = render_cost_table(&c, 160).unwrap();
        assert!(text.contains("2*MACs"));
        let total_line = text.lines().last().unwrap();
        let fields: Vec<&str> = total_line.split_whitespace().collect();
        assert_eq!(fields[0], "total");
        assert_eq!(fields[1].parse::<u64>().unwrap(), count_params(&c).unwrap());
        assert_eq!(fields[2].parse::<u64>().unwrap(), count_flops(&c, 160).unwrap());
        // every data row carries distinct names in walk order
        let mut names: Vec<&str> = text
            .lines()
            .filter(|l| !l.starts_with('#') && !l.starts_with("layer") && !l.starts_with("total"))
            .map(|l| l.split_whitespace().next().unwrap())
            .collect();
        let before = names.len();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), before);
    }
}
