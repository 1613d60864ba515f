//! Dataset plumbing: RGB images (binary PPM hand-rolled, PNG via the image
//! crate), YOLO-convention label files, the seeded 70/20/10 split with a
//! line-oriented manifest, letterbox preprocessing, photometric
//! augmentation, and a synthetic-shapes dataset generator.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::GtBox;
use crate::tensor::{Scalar, Tensor};

/// Letterbox padding intensity (a mid-gray that is unlikely to collide with
/// content at the frame border).
pub const PAD_GRAY: u8 = 114;

/// Split fractions for train/val/test.
pub const SPLIT_FRACTIONS: (f64, f64, f64) = (0.7, 0.2, 0.1);

// ---------------------------------------------------------------------------
// images

/// Interleaved 8-bit RGB raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// `3·width·height` bytes, row-major, R then G then B per pixel.
    pub data: Vec<u8>,
}

impl Image {
    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * width * height);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self { width, height, data }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = 3 * (y * self.width + x);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Bilinear resample with edge clamping; pixel centers at half-integers.
    pub fn resize_bilinear(&self, new_w: usize, new_h: usize) -> Image {
        let mut out = Image::filled(new_w, new_h, [0, 0, 0]);
        let sx = self.width as f64 / new_w as f64;
        let sy = self.height as f64 / new_h as f64;
        for y in 0..new_h {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = fy - y0 as f64;
            for x in 0..new_w {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = fx - x0 as f64;
                let mut rgb = [0u8; 3];
                for c in 0..3 {
                    let p = |px: usize, py: usize| self.get(px, py)[c] as f64;
                    let top = p(x0, y0) * (1.0 - wx) + p(x1, y0) * wx;
                    let bot = p(x0, y1) * (1.0 - wx) + p(x1, y1) * wx;
                    rgb[c] = (top * (1.0 - wy) + bot * wy).round().clamp(0.0, 255.0) as u8;
                }
                out.set(x, y, rgb);
            }
        }
        out
    }

    /// Load by extension: `.ppm` via the built-in reader, anything else via
    /// the image crate (PNG enabled).
    pub fn load(path: &Path) -> Result<Image> {
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm")) {
            read_ppm(path)
        } else {
            let img = image::open(path)
                .map_err(|e| Error::Image { path: path.display().to_string(), msg: e.to_string() })?
                .to_rgb8();
            Ok(Image {
                width: img.width() as usize,
                height: img.height() as usize,
                data: img.into_raw(),
            })
        }
    }

    /// Save by extension, mirroring [`Image::load`].
    pub fn save(&self, path: &Path) -> Result<()> {
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm")) {
            write_ppm(path, self)
        } else {
            image::save_buffer(
                path,
                &self.data,
                self.width as u32,
                self.height as u32,
                image::ExtendedColorType::Rgb8,
            )
            .map_err(|e| Error::Image { path: path.display().to_string(), msg: e.to_string() })
        }
    }
}

/// Binary PPM (`P6`, maxval 255). Header tokens may be separated by any
/// whitespace and `#` comments.
pub fn read_ppm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path)?;
    let err = |msg: &str| Error::Image { path: path.display().to_string(), msg: msg.into() };
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Option<(usize, usize)> {
        // skip whitespace and comment lines, return token byte range
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        (pos > start).then_some((start, pos))
    };
    let mut next_str = |what: &'static str| -> Result<String> {
        let (a, b) = token(&bytes).ok_or_else(|| err(&format!("missing {what}")))?;
        Ok(String::from_utf8_lossy(&bytes[a..b]).into_owned())
    };
    if next_str("magic")? != "P6" {
        return Err(err("not a binary PPM (expected P6)"));
    }
    let parse = |s: String, what: &str| {
        s.parse::<usize>().map_err(|_| err(&format!("bad {what} '{s}'")))
    };
    let width = parse(next_str("width")?, "width")?;
    let height = parse(next_str("height")?, "height")?;
    let maxval = parse(next_str("maxval")?, "maxval")?;
    if maxval != 255 {
        return Err(err(&format!("unsupported maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    let start = pos + 1;
    let need = 3 * width * height;
    if bytes.len() < start + need {
        return Err(err(&format!(
            "truncated raster: need {need} bytes, have {}",
            bytes.len().saturating_sub(start)
        )));
    }
    Ok(Image { width, height, data: bytes[start..start + need].to_vec() })
}

pub fn write_ppm(path: &Path, img: &Image) -> Result<()> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    fs::write(path, out)?;
    Ok(())
}

/// `[3,H,W]` tensor in `[0,1]`, channel-major.
pub fn to_tensor<S: Scalar>(img: &Image) -> Result<Tensor<S>> {
    let (w, h) = (img.width, img.height);
    let mut v = vec![S::zero(); 3 * w * h];
    for y in 0..h {
        for x in 0..w {
            let px = img.get(x, y);
            for c in 0..3 {
                v[c * h * w + y * w + x] = S::from_f64(px[c] as f64 / 255.0);
            }
        }
    }
    Tensor::from_vec(v, &[3, h, w])
}

/// Stack same-sized images into a `[N,3,H,W]` batch in `[0,1]`.
pub fn batch_tensor<S: Scalar>(images: &[&Image]) -> Result<Tensor<S>> {
    let first = images.first().ok_or_else(|| Error::Dataset("empty batch".into()))?;
    let (w, h) = (first.width, first.height);
    let mut v = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if img.width != w || img.height != h {
            return Err(Error::Dataset(format!(
                "batch mixes sizes {w}x{h} and {}x{}",
                img.width, img.height
            )));
        }
        v.extend(to_tensor::<S>(img)?.to_vec());
    }
    Tensor::from_vec(v, &[images.len(), 3, h, w])
}

// ---------------------------------------------------------------------------
// letterbox

/// Geometry of a letterboxed image: uniform scale plus centering pads, all
/// in model-input pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Letterbox {
    pub scale: f64,
    pub pad_x: f64,
    pub pad_y: f64,
    pub orig_w: usize,
    pub orig_h: usize,
}

impl Letterbox {
    /// Original-image pixel box → model-input pixel box.
    pub fn apply(&self, b: [f64; 4]) -> [f64; 4] {
        [
            b[0] * self.scale + self.pad_x,
            b[1] * self.scale + self.pad_y,
            b[2] * self.scale + self.pad_x,
            b[3] * self.scale + self.pad_y,
        ]
    }

    /// Model-input pixel box → original-image pixel box, clamped to bounds.
    pub fn unapply(&self, b: [f64; 4]) -> [f64; 4] {
        let w = self.orig_w as f64;
        let h = self.orig_h as f64;
        [
            ((b[0] - self.pad_x) / self.scale).clamp(0.0, w),
            ((b[1] - self.pad_y) / self.scale).clamp(0.0, h),
            ((b[2] - self.pad_x) / self.scale).clamp(0.0, w),
            ((b[3] - self.pad_y) / self.scale).clamp(0.0, h),
        ]
    }
}

/// Resize preserving aspect ratio onto a `size`×`size` gray canvas, content
/// centered.
pub fn letterbox(img: &Image, size: usize) -> (Image, Letterbox) {
    let scale = (size as f64 / img.width as f64).min(size as f64 / img.height as f64);
    let new_w = ((img.width as f64 * scale).round() as usize).clamp(1, size);
    let new_h = ((img.height as f64 * scale).round() as usize).clamp(1, size);
    let resized = if (new_w, new_h) == (img.width, img.height) {
        img.clone()
    } else {
        img.resize_bilinear(new_w, new_h)
    };
    let pad_x = (size - new_w) / 2;
    let pad_y = (size - new_h) / 2;
    let mut canvas = Image::filled(size, size, [PAD_GRAY; 3]);
    for y in 0..new_h {
        for x in 0..new_w {
            canvas.set(x + pad_x, y + pad_y, resized.get(x, y));
        }
    }
    let info = Letterbox {
        scale,
        pad_x: pad_x as f64,
        pad_y: pad_y as f64,
        orig_w: img.width,
        orig_h: img.height,
    };
    (canvas, info)
}

// ---------------------------------------------------------------------------
// labels

/// One normalized label: class plus center/size in `[0,1]` image fractions.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LabelBox {
    pub class: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl LabelBox {
    /// Corner form in `[0,1]`, clamped to the unit square.
    pub fn corners(&self) -> [f64; 4] {
        [
            (self.cx - self.w / 2.0).clamp(0.0, 1.0),
            (self.cy - self.h / 2.0).clamp(0.0, 1.0),
            (self.cx + self.w / 2.0).clamp(0.0, 1.0),
            (self.cy + self.h / 2.0).clamp(0.0, 1.0),
        ]
    }

    /// Pixel-space ground truth on an `img_w`×`img_h` image.
    pub fn to_gt(&self, img_w: usize, img_h: usize) -> GtBox {
        let c = self.corners();
        GtBox {
            class: self.class,
            x1: c[0] * img_w as f64,
            y1: c[1] * img_h as f64,
            x2: c[2] * img_w as f64,
            y2: c[3] * img_h as f64,
        }
    }

    /// YOLO text line.
    pub fn to_line(&self) -> String {
        format!("{} {} {} {} {}", self.class, self.cx, self.cy, self.w, self.h)
    }
}

/// Parse a YOLO label file: one `class cx cy w h` line per box, all
/// coordinates normalized. Empty files are valid (background images).
pub fn load_yolo_labels(path: &Path, num_classes: usize) -> Result<Vec<LabelBox>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::LabelParse {
            path: path.display().to_string(),
            line: i + 1,
            msg,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(err(format!("expected 5 fields, got {}", fields.len())));
        }
        let class: usize = fields[0]
            .parse()
            .map_err(|_| err(format!("bad class '{}'", fields[0])))?;
        if class >= num_classes {
            return Err(err(format!("class {class} out of range (have {num_classes})")));
        }
        let mut coord = [0.0f64; 4];
        for (j, f) in fields[1..].iter().enumerate() {
            let v: f64 = f.parse().map_err(|_| err(format!("bad coordinate '{f}'")))?;
            if !(0.0..=1.0).contains(&v) {
                return Err(err(format!("coordinate {v} outside [0,1]")));
            }
            coord[j] = v;
        }
        out.push(LabelBox { class, cx: coord[0], cy: coord[1], w: coord[2], h: coord[3] });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// split

/// Deterministic train/val/test partition of a file list.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl SplitManifest {
    pub fn split_names() -> [&'static str; 3] {
        ["train", "val", "test"]
    }

    pub fn of(&self, split: &str) -> Result<&[String]> {
        match split {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::Dataset(format!("unknown split '{other}'"))),
        }
    }
}

/// Shuffle by seed, then cut `round(0.7n)` / `round(0.2n)` / remainder.
pub fn split(files: &[String], seed: u64) -> Result<SplitManifest> {
    if files.is_empty() {
        return Err(Error::Dataset("cannot split an empty file list".into()));
    }
    let mut order: Vec<String> = files.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fisher-Yates, walking from the back
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let n = order.len();
    let n_train = ((n as f64 * SPLIT_FRACTIONS.0).round() as usize).min(n);
    let n_val = ((n as f64 * SPLIT_FRACTIONS.1).round() as usize).min(n - n_train);
    let test = order.split_off(n_train + n_val);
    let val = order.split_off(n_train);
    Ok(SplitManifest { seed, train: order, val, test })
}

/// Line-oriented manifest text: a seed line, then one `[split]` section per
/// split with one file stem per line.
pub fn save_manifest(path: &Path, m: &SplitManifest) -> Result<()> {
    let mut s = String::new();
    let _ = writeln!(s, "seed={}", m.seed);
    let _ = writeln!(
        s,
        "fractions={} {} {}",
        SPLIT_FRACTIONS.0, SPLIT_FRACTIONS.1, SPLIT_FRACTIONS.2
    );
    for (name, list) in [("train", &m.train), ("val", &m.val), ("test", &m.test)] {
        let _ = writeln!(s, "[{name}]");
        for f in list {
            let _ = writeln!(s, "{f}");
        }
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn load_manifest(path: &Path) -> Result<SplitManifest> {
    let text = fs::read_to_string(path)?;
    let mut m = SplitManifest { seed: 0, train: vec![], val: vec![], test: vec![] };
    let mut section: Option<&str> = None;
    let mut saw_seed = false;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        let err = |msg: String| Error::Dataset(format!("{}:{}: {msg}", path.display(), i + 1));
        if line.is_empty() {
            continue;
        }
        if let Some(v) = line.strip_prefix("seed=") {
            m.seed = v.parse().map_err(|_| err(format!("bad seed '{v}'")))?;
            saw_seed = true;
        } else if line.starts_with("fractions=") {
            // informational; fixed by SPLIT_FRACTIONS
        } else if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = match name {
                "train" => Some("train"),
                "val" => Some("val"),
                "test" => Some("test"),
                other => return Err(err(format!("unknown section '{other}'"))),
            };
        } else {
            match section {
                Some("train") => m.train.push(line.to_string()),
                Some("val") => m.val.push(line.to_string()),
                Some("test") => m.test.push(line.to_string()),
                _ => return Err(err(format!("stray line '{line}' before any section"))),
            }
        }
    }
    if !saw_seed {
        return Err(Error::Dataset(format!("{}: missing seed line", path.display())));
    }
    Ok(m)
}

// ---------------------------------------------------------------------------
// augmentation

/// Per-pixel `clip(alpha·p + beta, 0, 1)`. Label geometry is untouched by
/// photometric changes.
pub fn augment_brightness_contrast<S: Scalar>(
    image: &Tensor<S>,
    alpha: f64,
    beta: f64,
) -> Result<Tensor<S>> {
    if alpha <= 0.0 {
        return Err(Error::invalid("augment", format!("alpha {alpha} must be positive")));
    }
    let v: Vec<S> = image
        .to_vec()
        .into_iter()
        .map(|p| S::from_f64((alpha * p.to_f64_() + beta).clamp(0.0, 1.0)))
        .collect();
    Tensor::from_vec(v, image.shape())
}

/// Seeded draw of augmentation strength: `alpha ∈ [0.8, 1.2]`,
/// `beta ∈ [−0.1, 0.1]`.
pub fn sample_augmentation(rng: &mut ChaCha8Rng) -> (f64, f64) {
    (rng.gen_range(0.8..=1.2), rng.gen_range(-0.1..=0.1))
}

// ---------------------------------------------------------------------------
// synthetic shapes

/// One generated image with exact labels, before any preprocessing.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub image: Image,
    pub boxes: Vec<LabelBox>,
}

/// Filled rectangles (class 0) and ellipses (class 1) in saturated colors on
/// a dark noise background, with raster-exact bounding boxes. Shapes never
/// overlap; the first shape of image `i` has class `i mod classes` so every
/// class appears.
pub fn synth_shapes(seed: u64, n: usize, classes: usize, size: usize) -> Result<Vec<SynthSample>> {
    if !(1..=2).contains(&classes) {
        return Err(Error::Dataset(format!("synthetic set draws 1 or 2 classes, not {classes}")));
    }
    if n == 0 || size < 64 {
        return Err(Error::Dataset(format!("need n ≥ 1 and size ≥ 64, got n={n} size={size}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut img = Image::filled(size, size, [0, 0, 0]);
        for p in img.data.iter_mut() {
            *p = rng.gen_range(10..=60);
        }
        let mut boxes: Vec<LabelBox> = Vec::new();
        let mut taken: Vec<[usize; 4]> = Vec::new();
        let shapes = 1 + rng.gen_range(0..2usize);
        for s in 0..shapes {
            let class = if s == 0 { i % classes } else { rng.gen_range(0..classes) };
            // rejection-place an extent that clears every prior shape
            let mut placed = None;
            for _ in 0..40 {
                let w = rng.gen_range(size / 5..=size / 2);
                let h = rng.gen_range(size / 5..=size / 2);
                let x0 = rng.gen_range(2..size - w - 2);
                let y0 = rng.gen_range(2..size - h - 2);
                let ext = [x0, y0, x0 + w, y0 + h];
                let clear = taken.iter().all(|t| {
                    ext[2] + 4 < t[0] || t[2] + 4 < ext[0] || ext[3] + 4 < t[1] || t[3] + 4 < ext[1]
                });
                if clear {
                    placed = Some(ext);
                    break;
                }
            }
            let Some([x0, y0, x1, y1]) = placed else { continue };
            taken.push([x0, y0, x1, y1]);
            let color = if class == 0 {
                [rng.gen_range(190..=255), rng.gen_range(60..=130), rng.gen_range(40..=100)]
            } else {
                [rng.gen_range(40..=100), rng.gen_range(120..=190), rng.gen_range(190..=255)]
            };
            // track the raster-exact extent of what was actually drawn
            let (mut dx0, mut dy0, mut dx1, mut dy1) = (usize::MAX, usize::MAX, 0usize, 0usize);
            for y in y0..y1 {
                for x in x0..x1 {
                    let inside = if class == 0 {
                        true
                    } else {
                        let a = (x1 - x0) as f64 / 2.0;
                        let b = (y1 - y0) as f64 / 2.0;
                        let dx = (x as f64 + 0.5) - (x0 as f64 + a);
                        let dy = (y as f64 + 0.5) - (y0 as f64 + b);
                        (dx / a).powi(2) + (dy / b).powi(2) <= 1.0
                    };
                    if inside {
                        img.set(x, y, color);
                        dx0 = dx0.min(x);
                        dy0 = dy0.min(y);
                        dx1 = dx1.max(x + 1);
                        dy1 = dy1.max(y + 1);
                    }
                }
            }
            if dx1 == 0 {
                continue;
            }
            boxes.push(LabelBox {
                class,
                cx: (dx0 + dx1) as f64 / 2.0 / size as f64,
                cy: (dy0 + dy1) as f64 / 2.0 / size as f64,
                w: (dx1 - dx0) as f64 / size as f64,
                h: (dy1 - dy0) as f64 / size as f64,
            });
        }
        out.push(SynthSample { image: img, boxes });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// on-disk dataset

/// Write a generated dataset in the standard layout: `images/{split}/*.ppm`,
/// `labels/{split}/*.txt`, and `manifest.txt` at the root.
pub fn write_synth_dataset(
    root: &Path,
    seed: u64,
    n: usize,
    classes: usize,
    size: usize,
) -> Result<SplitManifest> {
    let samples = synth_shapes(seed, n, classes, size)?;
    let stems: Vec<String> = (0..n).map(|i| format!("img_{i:04}")).collect();
    let manifest = split(&stems, seed)?;
    for split_name in SplitManifest::split_names() {
        fs::create_dir_all(root.join("images").join(split_name))?;
        fs::create_dir_all(root.join("labels").join(split_name))?;
        for stem in manifest.of(split_name)? {
            let idx: usize = stem[4..].parse().expect("generated stem");
            let sample = &samples[idx];
            sample.image.save(&root.join("images").join(split_name).join(format!("{stem}.ppm")))?;
            let lines: String =
                sample.boxes.iter().map(|b| b.to_line() + "\n").collect();
            fs::write(root.join("labels").join(split_name).join(format!("{stem}.txt")), lines)?;
        }
    }
    save_manifest(&root.join("manifest.txt"), &manifest)?;
    Ok(manifest)
}

/// Reader over one split of the standard layout. Stems are sorted, so
/// iteration order is deterministic.
pub struct Dataset {
    pub root: PathBuf,
    pub split: String,
    pub stems: Vec<String>,
    images: Vec<PathBuf>,
}

impl Dataset {
    pub fn open(root: &Path, split_name: &str) -> Result<Self> {
        let dir = root.join("images").join(split_name);
        if !dir.is_dir() {
            return Err(Error::Dataset(format!("no such split directory {}", dir.display())));
        }
        let mut entries: Vec<(String, PathBuf)> = Vec::new();
        for e in fs::read_dir(&dir)? {
            let path = e?.path();
            let is_image = path
                .extension()
                .is_some_and(|x| ["ppm", "png"].iter().any(|e| x.eq_ignore_ascii_case(e)));
            if is_image {
                let stem = path
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .ok_or_else(|| {
                        Error::Dataset(format!("unreadable file name {}", path.display()))
                    })?
                    .to_string();
                entries.push((stem, path));
            }
        }
        if entries.is_empty() {
            return Err(Error::Dataset(format!("split directory {} holds no images", dir.display())));
        }
        entries.sort();
        let (stems, images) = entries.into_iter().unzip();
        Ok(Self { root: root.to_path_buf(), split: split_name.to_string(), stems, images })
    }

    pub fn len(&self) -> usize {
        self.stems.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stems.is_empty()
    }

    /// Image plus its labels; a missing label file is a dataset error, an
    /// empty one is a background image.
    pub fn load(&self, i: usize, num_classes: usize) -> Result<(Image, Vec<LabelBox>)> {
        let img = Image::load(&self.images[i])?;
        let label_path = self
            .root
            .join("labels")
            .join(&self.split)
            .join(format!("{}.txt", self.stems[i]));
        if !label_path.is_file() {
            return Err(Error::Dataset(format!("missing label file {}", label_path.display())));
        }
        let boxes = load_yolo_labels(&label_path, num_classes)?;
        Ok((img, boxes))
    }
}

/// Letterbox an image and carry its labels into model-input pixel space:
/// the standard preprocessing for training, evaluation, and prediction.
pub fn prepare<S: Scalar>(
    img: &Image,
    boxes: &[LabelBox],
    size: usize,
) -> Result<(Tensor<S>, Vec<GtBox>, Letterbox)> {
    let (canvas, info) = letterbox(img, size);
    let tensor = to_tensor::<S>(&canvas)?;
    let gts = boxes
        .iter()
        .map(|b| {
            let g = b.to_gt(img.width, img.height);
            let m = info.apply([g.x1, g.y1, g.x2, g.y2]);
            GtBox { class: b.class, x1: m[0], y1: m[1], x2: m[2], y2: m[3] }
        })
        .collect();
    Ok((tensor, gts, info))
}
