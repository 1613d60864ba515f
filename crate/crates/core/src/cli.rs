//! Command-line front end: `train`, `eval`, `predict`, `info`, and `synth`
//! subcommands over a single merged configuration. Settings resolve in
//! precedence order command-line flag → config-file entry → `OXIDET_OUT`
//! environment variable (output root only) → built-in default, and every
//! run prints a reproducibility header (seed, config hash, version) so any
//! output can be traced back to its exact configuration.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::attention::{AttentionKind, AttentionSpec};
use crate::ckpt;
use crate::data::{self, write_synth_dataset, Dataset, Image, LabelBox};
use crate::error::{Error, Result};
use crate::model::{Detection, ModelConfig, ModelSize};
use crate::profile;
use crate::tensor::no_grad;
use crate::train::{config_fingerprint, evaluate_model, TrainConfig, Trainer, EVAL_CONF};

/// Weights move as f32 at the command line: desk-scale runs are
/// compute-bound and f32 values widen to the checkpoint's f64 container and
/// back without loss.
type RunScalar = f32;

/// Output root picked up when neither a flag nor a config entry names one.
pub const OUT_ENV: &str = "OXIDET_OUT";

#[derive(Parser)]
#[command(
    name = "oxidet",
    version,
    about = "Anchor-free object detection with pluggable attention modules"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a dataset directory and write checkpoints
    Train(TrainArgs),
    /// Score a checkpoint against a dataset split
    Eval(EvalArgs),
    /// Run a checkpoint over images, emitting detections and overlays
    Predict(PredictArgs),
    /// Print parameter and FLOP costs per attention kind and size
    Info(InfoArgs),
    /// Generate a synthetic shapes dataset with train/val/test splits
    Synth(SynthArgs),
}

/// Flags shared by every subcommand; each mirrors a config-file key of the
/// same name and overrides it when given.
#[derive(Args, Default)]
struct ConfigArgs {
    /// Key-value config file (`key=value` lines, `#` comments)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model size: nano-desk, small, medium, or large
    #[arg(long)]
    size: Option<String>,
    /// Attention kind: none, cbam, rescbam, eca, sa, gam, or resgam
    #[arg(long)]
    attention: Option<String>,
    #[arg(long)]
    num_classes: Option<usize>,
    /// Square input edge in pixels; must be divisible by 32
    #[arg(long)]
    input_size: Option<usize>,
    #[arg(long)]
    reg_max: Option<usize>,
    /// Score floor for reported detections
    #[arg(long)]
    conf_thresh: Option<f64>,
    /// IoU above which overlapping same-class boxes are suppressed
    #[arg(long)]
    nms_iou: Option<f64>,
    #[arg(long)]
    lr0: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Add a brightness/contrast-jittered copy of each training image
    #[arg(long)]
    augment: Option<bool>,
    /// Epochs of linear learning-rate ramp before the schedule proper
    #[arg(long)]
    warmup: Option<usize>,
    /// Decay the learning rate along a half cosine instead of holding it
    #[arg(long)]
    cosine: Option<bool>,
    /// Validate every N epochs
    #[arg(long)]
    eval_every: Option<usize>,
    /// Stop once validation mAP@0.5 reaches this value
    #[arg(long)]
    early_stop: Option<f64>,
    /// Dataset root (images/<split>/, labels/<split>/)
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for checkpoints, logs, reports, and overlays
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Continue from this checkpoint instead of initializing fresh weights
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Checkpoint to score
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset split to score against
    #[arg(long, default_value = "val")]
    split: String,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Checkpoint to run
    #[arg(long)]
    ckpt: PathBuf,
    /// Image files (PPM or PNG) to run the model over
    #[arg(required = true)]
    images: Vec<PathBuf>,
}

#[derive(Args)]
struct InfoArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Print the per-layer cost table for one size/attention combination
    #[arg(long)]
    layers: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Number of images to generate
    #[arg(long, default_value_t = 200)]
    count: usize,
    /// Number of shape classes (1 or 2)
    #[arg(long, default_value_t = 2)]
    classes: usize,
    /// Generated image edge length in pixels
    #[arg(long, default_value_t = 160)]
    image_size: usize,
}

/// The fully merged settings a subcommand actually runs with.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: Option<PathBuf>,
    pub out: PathBuf,
    /// Explicit decode-threshold choices, applied on top of a checkpoint's
    /// embedded config by `eval` and `predict`.
    pub conf_override: Option<f64>,
    pub nms_override: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::new(ModelSize::NanoDesk, 2),
            train: TrainConfig::default(),
            data: None,
            out: PathBuf::from("runs"),
            conf_override: None,
            nms_override: None,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value '{v}' for {key}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("invalid value '{v}' for {key}; use true or false"))),
    }
}

impl RunConfig {
    /// Defaults, then `OXIDET_OUT`, then the config file, then flags.
    fn from_sources(args: &ConfigArgs) -> Result<Self> {
        let mut rc = RunConfig::default();
        if let Ok(v) = std::env::var(OUT_ENV) {
            rc.out = PathBuf::from(v);
        }
        if let Some(path) = &args.config {
            rc.apply_file(path)?;
        }
        rc.apply_args(args)?;
        rc.model.validate()?;
        rc.train.validate()?;
        Ok(rc)
    }

    fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "{} line {}: expected key=value, got '{line}'",
                    path.display(),
                    i + 1,
                )));
            };
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "size" => self.model.size = ModelSize::parse(v)?,
            "attention" => self.model.attention = AttentionSpec::new(AttentionKind::parse(v)?),
            "num_classes" => self.model.num_classes = parse_num(key, v)?,
            "input_size" => self.model.input_size = parse_num(key, v)?,
            "reg_max" => self.model.reg_max = parse_num(key, v)?,
            "conf_thresh" => {
                self.model.conf_thresh = parse_num(key, v)?;
                self.conf_override = Some(self.model.conf_thresh);
            }
            "nms_iou" => {
                self.model.nms_iou = parse_num(key, v)?;
                self.nms_override = Some(self.model.nms_iou);
            }
            "lr0" => self.train.lr0 = parse_num(key, v)?,
            "final_lr_frac" => self.train.final_lr_frac = parse_num(key, v)?,
            "momentum" => self.train.momentum = parse_num(key, v)?,
            "weight_decay" => self.train.weight_decay = parse_num(key, v)?,
            "epochs" => self.train.epochs = parse_num(key, v)?,
            "batch" => self.train.batch_size = parse_num(key, v)?,
            "seed" => self.train.seed = parse_num(key, v)?,
            "augment" => self.train.augment = parse_bool(key, v)?,
            "warmup" => self.train.warmup_epochs = parse_num(key, v)?,
            "cosine" => self.train.cosine = parse_bool(key, v)?,
            "eval_every" => self.train.eval_every = parse_num(key, v)?,
            "early_stop" => self.train.early_stop_map50 = Some(parse_num(key, v)?),
            "data" => self.data = Some(PathBuf::from(v)),
            "out" => self.out = PathBuf::from(v),
            _ => return Err(Error::Config(format!("unknown configuration key '{key}'"))),
        }
        Ok(())
    }

    fn apply_args(&mut self, a: &ConfigArgs) -> Result<()> {
        if let Some(v) = &a.size {
            self.model.size = ModelSize::parse(v)?;
        }
        if let Some(v) = &a.attention {
            self.model.attention = AttentionSpec::new(AttentionKind::parse(v)?);
        }
        if let Some(v) = a.num_classes {
            self.model.num_classes = v;
        }
        if let Some(v) = a.input_size {
            self.model.input_size = v;
        }
        if let Some(v) = a.reg_max {
            self.model.reg_max = v;
        }
        if let Some(v) = a.conf_thresh {
            self.model.conf_thresh = v;
            self.conf_override = Some(v);
        }
        if let Some(v) = a.nms_iou {
            self.model.nms_iou = v;
            self.nms_override = Some(v);
        }
        if let Some(v) = a.lr0 {
            self.train.lr0 = v;
        }
        if let Some(v) = a.momentum {
            self.train.momentum = v;
        }
        if let Some(v) = a.weight_decay {
            self.train.weight_decay = v;
        }
        if let Some(v) = a.epochs {
            self.train.epochs = v;
        }
        if let Some(v) = a.batch {
            self.train.batch_size = v;
        }
        if let Some(v) = a.seed {
            self.train.seed = v;
        }
        if let Some(v) = a.augment {
            self.train.augment = v;
        }
        if let Some(v) = a.warmup {
            self.train.warmup_epochs = v;
        }
        if let Some(v) = a.cosine {
            self.train.cosine = v;
        }
        if let Some(v) = a.eval_every {
            self.train.eval_every = v;
        }
        if let Some(v) = a.early_stop {
            self.train.early_stop_map50 = Some(v);
        }
        if let Some(v) = &a.data {
            self.data = Some(v.clone());
        }
        if let Some(v) = &a.out {
            self.out = v.clone();
        }
        Ok(())
    }

    fn header(&self) -> String {
        format!(
            "# seed={} config_sha256={} version={}",
            self.train.seed,
            config_fingerprint(&self.model, &self.train),
            env!("CARGO_PKG_VERSION"),
        )
    }

    fn data_root(&self) -> Result<&Path> {
        self.data
            .as_deref()
            .ok_or_else(|| Error::Config("no dataset root; pass --data or set data= in the config".into()))
    }
}

/// Parse `std::env::args` and run the chosen subcommand.
pub fn run() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Info(a) => cmd_info(a),
        Command::Synth(a) => cmd_synth(a),
    }
}

/// Duplicates every write, so training logs land on the terminal and in
/// `train.log` byte-for-byte identically.
struct Tee<A: Write, B: Write>(A, B);

impl<A: Write, B: Write> Write for Tee<A, B> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0.write_all(buf)?;
        self.1.write_all(buf)?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.0.flush()?;
        self.1.flush()
    }
}

fn load_split(root: &Path, split: &str, num_classes: usize) -> Result<Vec<(Image, Vec<LabelBox>)>> {
    let ds = Dataset::open(root, split)?;
    (0..ds.len()).map(|i| ds.load(i, num_classes)).collect()
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut rc = RunConfig::from_sources(&args.cfg)?;
    let root = rc.data_root()?.to_path_buf();
    let train = load_split(&root, "train", rc.model.num_classes)?;
    let val = match load_split(&root, "val", rc.model.num_classes) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("note: validation split unavailable ({e}); training without validation");
            Vec::new()
        }
    };

    fs::create_dir_all(&rc.out)?;
    rc.train.out_dir = Some(rc.out.clone());
    let mut trainer = match &args.resume {
        Some(path) => Trainer::<RunScalar>::resume(path, rc.train.clone(), &train, &val)?,
        None => Trainer::<RunScalar>::new(&rc.model, rc.train.clone(), &train, &val)?,
    };

    let log_file = fs::File::create(rc.out.join("train.log"))?;
    let mut log = Tee(std::io::stdout(), log_file);
    let report = trainer.run(&mut log)?;
    if report.best_map50 >= 0.0 {
        writeln!(log, "# best_map50={:.6} best_epoch={}", report.best_map50, report.best_epoch)?;
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let mut rc = RunConfig::from_sources(&args.cfg)?;
    let (mut model, _state) = ckpt::load::<RunScalar>(&args.ckpt)?;
    if let Some(v) = rc.conf_override {
        model.cfg.conf_thresh = v;
    }
    if let Some(v) = rc.nms_override {
        model.cfg.nms_iou = v;
    }
    rc.model = model.cfg.clone();
    println!("{}", rc.header());

    let root = rc.data_root()?.to_path_buf();
    let raw = load_split(&root, &args.split, rc.model.num_classes)?;
    let size = rc.model.input_size;
    let mut rows = Vec::with_capacity(raw.len());
    for (img, boxes) in &raw {
        let (t, gts, _) = data::prepare::<RunScalar>(img, boxes, size)?;
        rows.push((t.reshape(&[1, 3, size, size])?, gts));
    }

    let mut report = evaluate_model(&model, &rows, EVAL_CONF)?;
    report.params = profile::count_params(&rc.model)?;
    report.flops = profile::count_flops(&rc.model, size)?;
    let timing_pool: Vec<Image> = raw.iter().take(4).map(|(img, _)| img.clone()).collect();
    report.inference_ms = profile::time_inference(&model, &timing_pool, 1, 1)?;

    print!("{}", report.to_kv_text());
    fs::create_dir_all(&rc.out)?;
    fs::write(rc.out.join("eval_report.txt"), report.to_kv_text())?;
    for (c, curve) in report.pr_curves.iter().enumerate() {
        let mut text = String::from("# recall precision\n");
        for (r, p) in curve {
            text.push_str(&format!("{r:.6} {p:.6}\n"));
        }
        fs::write(rc.out.join(format!("pr_class_{c}.txt")), text)?;
    }
    Ok(())
}

fn cmd_predict(args: PredictArgs) -> Result<()> {
    let rc = RunConfig::from_sources(&args.cfg)?;
    let (mut model, _state) = ckpt::load::<RunScalar>(&args.ckpt)?;
    if let Some(v) = rc.conf_override {
        model.cfg.conf_thresh = v;
    }
    if let Some(v) = rc.nms_override {
        model.cfg.nms_iou = v;
    }
    let mut rc = rc;
    rc.model = model.cfg.clone();
    println!("{}", rc.header());

    fs::create_dir_all(&rc.out)?;
    let mut records = fs::File::create(rc.out.join("predictions.jsonl"))?;
    let size = model.cfg.input_size;
    for path in &args.images {
        let img = Image::load(path)?;
        let (t, _, letterbox) = data::prepare::<RunScalar>(&img, &[], size)?;
        let x = t.reshape(&[1, 3, size, size])?;
        let dets = no_grad(|| -> Result<Vec<Detection>> {
            let raw = model.forward(&x, false)?;
            let mut all = crate::model::decode(&model.cfg, &raw, model.cfg.conf_thresh, model.cfg.nms_iou)?;
            Ok(all.remove(0))
        })?;

        let mut mapped = Vec::with_capacity(dets.len());
        for d in dets {
            let [x1, y1, x2, y2] = letterbox.unapply([d.x1, d.y1, d.x2, d.y2]);
            mapped.push(Detection { x1, y1, x2, y2, ..d });
        }
        for d in &mapped {
            let record = serde_json::json!({
                "image": path.display().to_string(),
                "class": d.class,
                "score": d.score,
                "xyxy": [d.x1, d.y1, d.x2, d.y2],
            });
            println!("{record}");
            writeln!(records, "{record}")?;
        }

        let mut overlay = img.clone();
        for (i, d) in mapped.iter().enumerate() {
            draw_detection(&mut overlay, d, i);
        }
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::invalid("predict", format!("bad image path {}", path.display())))?;
        let ext = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm")) {
            "ppm"
        } else {
            "png"
        };
        overlay.save(&rc.out.join(format!("{stem}.pred.{ext}")))?;
    }
    Ok(())
}

fn cmd_info(args: InfoArgs) -> Result<()> {
    let rc = RunConfig::from_sources(&args.cfg)?;
    println!("{}", rc.header());
    if args.layers {
        print!("{}", profile::render_cost_table(&rc.model, rc.model.input_size)?);
        return Ok(());
    }
    let sizes: Vec<ModelSize> = match &args.cfg.size {
        Some(v) => vec![ModelSize::parse(v)?],
        None => ModelSize::ALL.to_vec(),
    };
    let kinds: Vec<AttentionKind> = match &args.cfg.attention {
        Some(v) => vec![AttentionKind::parse(v)?],
        None => AttentionKind::ALL.to_vec(),
    };
    println!(
        "# input={} classes={} flops counted as 2*MACs",
        rc.model.input_size, rc.model.num_classes
    );
    println!("{:<10} {:<10} {:>12} {:>10} {:>10}", "size", "attention", "params", "params_m", "gflops");
    for &size in &sizes {
        for &kind in &kinds {
            let mut cfg = rc.model.clone();
            cfg.size = size;
            cfg.attention = AttentionSpec::new(kind);
            let params = profile::count_params(&cfg)?;
            let flops = profile::count_flops(&cfg, cfg.input_size)?;
            println!(
                "{:<10} {:<10} {:>12} {:>10.2} {:>10.2}",
                size.name(),
                kind.name(),
                params,
                params as f64 / 1e6,
                flops as f64 / 1e9,
            );
        }
    }
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let rc = RunConfig::from_sources(&args.cfg)?;
    println!("{}", rc.header());
    let manifest = write_synth_dataset(&rc.out, rc.train.seed, args.count, args.classes, args.image_size)?;
    println!(
        "# wrote {} images to {} (train={} val={} test={})",
        args.count,
        rc.out.display(),
        manifest.train.len(),
        manifest.val.len(),
        manifest.test.len(),
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// overlay drawing

/// Box outline colors, cycled by class index.
const PALETTE: [[u8; 3]; 8] = [
    [230, 60, 40],
    [40, 140, 230],
    [40, 190, 80],
    [240, 180, 30],
    [170, 70, 220],
    [30, 200, 200],
    [240, 110, 180],
    [150, 150, 150],
];

/// 3×5 glyphs for the label text; rows top to bottom, three low bits each.
fn glyph(ch: char) -> [u8; 5] {
    match ch {
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b111, 0b001, 0b111, 0b100, 0b111],
        '3' => [0b111, 0b001, 0b111, 0b001, 0b111],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b111, 0b001, 0b111],
        '6' => [0b111, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b010, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b111],
        '.' => [0b000, 0b000, 0b000, 0b000, 0b010],
        _ => [0b000, 0b000, 0b000, 0b000, 0b000],
    }
}

fn fill_rect(img: &mut Image, x0: i64, y0: i64, x1: i64, y1: i64, rgb: [u8; 3]) {
    let (w, h) = (img.width as i64, img.height as i64);
    for y in y0.max(0)..y1.min(h) {
        for x in x0.max(0)..x1.min(w) {
            img.set(x as usize, y as usize, rgb);
        }
    }
}

/// Two-pixel hollow rectangle, clipped to the image.
fn draw_box(img: &mut Image, x0: i64, y0: i64, x1: i64, y1: i64, rgb: [u8; 3]) {
    fill_rect(img, x0, y0, x1, y0 + 2, rgb);
    fill_rect(img, x0, y1 - 2, x1, y1, rgb);
    fill_rect(img, x0, y0, x0 + 2, y1, rgb);
    fill_rect(img, x1 - 2, y0, x1, y1, rgb);
}

/// Stamp `text` at 2× glyph scale; returns the width consumed.
fn stamp_text(img: &mut Image, x: i64, y: i64, text: &str, rgb: [u8; 3]) -> i64 {
    const SCALE: i64 = 2;
    let mut cx = x;
    for ch in text.chars() {
        let g = glyph(ch);
        for (row, bits) in g.iter().enumerate() {
            for col in 0..3 {
                if bits >> (2 - col) & 1 == 1 {
                    fill_rect(
                        img,
                        cx + col * SCALE,
                        y + row as i64 * SCALE,
                        cx + (col + 1) * SCALE,
                        y + (row as i64 + 1) * SCALE,
                        rgb,
                    );
                }
            }
        }
        cx += 4 * SCALE;
    }
    cx - x
}

/// Outline the detection and stamp `class score` on a filled tag. The tag
/// sits above the box when it fits, inside the top edge otherwise.
fn draw_detection(img: &mut Image, d: &Detection, _index: usize) {
    let color = PALETTE[d.class % PALETTE.len()];
    let (x0, y0) = (d.x1.round() as i64, d.y1.round() as i64);
    let (x1, y1) = (d.x2.round() as i64, d.y2.round() as i64);
    draw_box(img, x0, y0, x1, y1, color);

    let label = format!("{} {:.2}", d.class, d.score);
    let tag_w = 8 * label.chars().count() as i64 + 4;
    let tag_h = 14;
    let tag_y = if y0 - tag_h >= 0 { y0 - tag_h } else { y0 };
    fill_rect(img, x0, tag_y, x0 + tag_w, tag_y + tag_h, color);
    stamp_text(img, x0 + 2, tag_y + 2, &label, [255, 255, 255]);
}
