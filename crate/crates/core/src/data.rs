//! Images, masks, synthetic datasets, augmentation and on-disk layout.
//!
//! Dataset directories look like
//!
//! ```text
//! images/{id}.pgm | images/{id}.ppm   8-bit binary grayscale / RGB
//! masks/{id}.pgm                      0 = background, 255 = foreground
//! split.txt                           one `{id} train|test` per line
//! ```

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageFormat};
use nlcen_tensor::Tensor;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{io_err, Error, Result};

/// 8-bit image, interleaved `H × W × channels`.
#[derive(Clone, PartialEq, Eq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl fmt::Debug for Image {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Image({}x{}x{})", self.height, self.width, self.channels)
    }
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width * channels || !(channels == 1 || channels == 3) {
            return Err(Error::Shape(format!(
                "{} bytes for a {height}x{width}x{channels} image",
                data.len()
            )));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    /// Planar `[C, H, W]` pixel values as f64, still in 0–255 units.
    pub fn to_planar(&self) -> Vec<f64> {
        let plane = self.height * self.width;
        let mut out = vec![0.0; plane * self.channels];
        for (i, px) in self.data.chunks_exact(self.channels).enumerate() {
            for (c, &v) in px.iter().enumerate() {
                out[c * plane + i] = v as f64;
            }
        }
        out
    }
}

/// Binary mask, row-major, values 0 or 1.
#[derive(Clone, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl fmt::Debug for Mask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Mask({}x{}, {} set)", self.height, self.width, self.count())
    }
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!("{} values for a {height}x{width} mask", data.len())));
        }
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, &v)| v > 1) {
            return Err(Error::NonBinaryMask { value, index });
        }
        Ok(Mask { height, width, data })
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn area_fraction(&self) -> f64 {
        self.count() as f64 / self.data.len() as f64
    }

    /// Number of 4-connected foreground components.
    pub fn components(&self) -> usize {
        let (h, w) = (self.height, self.width);
        let mut seen = vec![false; h * w];
        let mut stack = Vec::new();
        let mut n = 0;
        for start in 0..h * w {
            if self.data[start] == 0 || seen[start] {
                continue;
            }
            n += 1;
            seen[start] = true;
            stack.push(start);
            while let Some(i) = stack.pop() {
                let (y, x) = (i / w, i % w);
                let mut visit = |j: usize| {
                    if self.data[j] == 1 && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                };
                if y > 0 {
                    visit(i - w);
                }
                if y + 1 < h {
                    visit(i + w);
                }
                if x > 0 {
                    visit(i - 1);
                }
                if x + 1 < w {
                    visit(i + 1);
                }
            }
        }
        n
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::Dataset(format!("unknown split `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleRecord {
    pub id: String,
    pub image: Image,
    pub mask: Mask,
    pub split: Split,
}

impl SampleRecord {
    pub fn new(id: impl Into<String>, image: Image, mask: Mask, split: Split) -> Result<Self> {
        let id = id.into();
        if (image.height, image.width) != (mask.height, mask.width) {
            return Err(Error::Shape(format!(
                "{id}: image is {}x{}, mask is {}x{}",
                image.height, image.width, mask.height, mask.width
            )));
        }
        Ok(SampleRecord { id, image, mask, split })
    }
}

/// Stacks images into a `[B, C, H, W]` tensor of 0–255 values.
pub fn batch_tensor(images: &[&Image]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::Dataset("empty batch".into()))?;
    let (c, h, w) = (first.channels, first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for im in images {
        if (im.channels, im.height, im.width) != (c, h, w) {
            return Err(Error::Shape(format!("{im:?} in a batch of {first:?}")));
        }
        data.extend(im.to_planar());
    }
    Ok(Tensor::new([images.len(), c, h, w], data)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SyntheticKind {
    /// Grayscale chest-like images with two lung lobes.
    Lung,
    /// RGB skin-like images with one irregular lesion.
    Lesion,
}

impl SyntheticKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SyntheticKind::Lung => "lung",
            SyntheticKind::Lesion => "lesion",
        }
    }

    pub fn channels(self) -> usize {
        match self {
            SyntheticKind::Lung => 1,
            SyntheticKind::Lesion => 3,
        }
    }
}

impl FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lung" | "lung-like" => Ok(SyntheticKind::Lung),
            "lesion" | "lesion-like" => Ok(SyntheticKind::Lesion),
            _ => Err(Error::Invalid(format!("unknown dataset kind `{s}` (expected lung or lesion)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub kind: SyntheticKind,
    pub count: usize,
    pub side: usize,
    /// Background texture amplitude as a fraction of the pixel range.
    pub noise: f64,
    pub seed: u64,
    /// Trailing fraction of ids assigned to the test split.
    pub test_fraction: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            kind: SyntheticKind::Lung,
            count: 250,
            side: 64,
            noise: 0.1,
            seed: 0,
            test_fraction: 0.2,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.side < 32 {
            return Err(Error::Invalid(format!("side {} is too small for synthetic shapes (minimum 32)", self.side)));
        }
        if !(0.0..=1.0).contains(&self.test_fraction) {
            return Err(Error::Invalid(format!("test fraction {} outside [0, 1]", self.test_fraction)));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::Invalid(format!("noise {} outside [0, 1]", self.noise)));
        }
        Ok(())
    }

    pub fn test_count(&self) -> usize {
        (self.count as f64 * self.test_fraction).round() as usize
    }
}

/// Generator for sample `index`, independent of every other sample.
fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

pub fn synth_generate(cfg: &SyntheticConfig) -> Result<Vec<SampleRecord>> {
    cfg.validate()?;
    let n_test = cfg.test_count();
    (0..cfg.count)
        .into_par_iter()
        .map(|i| {
            let mut rng = sample_rng(cfg.seed, i);
            let (image, mask) = match cfg.kind {
                SyntheticKind::Lung => lung_sample(&mut rng, cfg.side, cfg.noise),
                SyntheticKind::Lesion => lesion_sample(&mut rng, cfg.side, cfg.noise),
            };
            let split = if i + n_test >= cfg.count { Split::Test } else { Split::Train };
            SampleRecord::new(format!("{}-{i:04}", cfg.kind.as_str()), image, mask, split)
        })
        .collect()
}

/// Smooth random field: a few low-frequency plane waves, roughly in [−1, 1].
fn texture(rng: &mut ChaCha8Rng, side: usize) -> Vec<f64> {
    let waves: Vec<(f64, f64, f64)> = (0..4)
        .map(|_| {
            let freq = rng.random_range(1.0..4.0) * 2.0 * PI / side as f64;
            let dir = rng.random_range(0.0..PI);
            (freq * dir.cos(), freq * dir.sin(), rng.random_range(0.0..2.0 * PI))
        })
        .collect();
    (0..side * side)
        .map(|i| {
            let (y, x) = ((i / side) as f64, (i % side) as f64);
            waves.iter().map(|(fx, fy, ph)| (fx * x + fy * y + ph).sin()).sum::<f64>() / 2.0
        })
        .collect()
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

fn lung_sample(rng: &mut ChaCha8Rng, side: usize, noise: f64) -> (Image, Mask) {
    let s = side as f64;
    // Mirrored pose: shared height, size and opposite tilt, small asymmetry.
    let cy = s * rng.random_range(0.45..0.55);
    let dx = s * rng.random_range(0.22..0.25);
    let cx = s * 0.5 + s * rng.random_range(-0.02..0.02);
    let a = s * rng.random_range(0.12..0.16);
    let b = s * rng.random_range(0.25..0.32);
    let tilt = rng.random_range(-10f64..10.0).to_radians();
    let lobes = [
        (cx - dx, cy, a * rng.random_range(0.95..1.0), b, tilt),
        (cx + dx, cy, a * rng.random_range(0.95..1.0), b, -tilt),
    ];
    let tex = texture(rng, side);
    let rib_freq = rng.random_range(5.0..7.0) * 2.0 * PI / s;
    let rib_phase = rng.random_range(0.0..2.0 * PI);
    let body = rng.random_range(150.0..190.0);
    let lung = rng.random_range(60.0..100.0);
    let amp = noise * 255.0;

    let mut img = Vec::with_capacity(side * side);
    let mut mask = Vec::with_capacity(side * side);
    for i in 0..side * side {
        let (y, x) = ((i / side) as f64 + 0.5, (i % side) as f64 + 0.5);
        let inside = lobes.iter().any(|&(ex, ey, ea, eb, t)| {
            let (u, v) = (x - ex, y - ey);
            let (ru, rv) = (u * t.cos() + v * t.sin(), -u * t.sin() + v * t.cos());
            (ru / ea).powi(2) + (rv / eb).powi(2) <= 1.0
        });
        // Ribs bend downwards away from the midline.
        let bend = ((x - s * 0.5) / s).powi(2) * s * 0.6;
        let ribs = ((y + bend) * rib_freq + rib_phase).sin().max(0.0).powi(2);
        let base = if inside { lung } else { body };
        let v = base + amp * tex[i] + 0.5 * amp * ribs + rng.random_range(-1.0..1.0) * amp * 0.3;
        img.push(to_u8(v));
        mask.push(u8::from(inside));
    }
    (
        Image::new(side, side, 1, img).expect("sized"),
        Mask::new(side, side, mask).expect("binary"),
    )
}

fn lesion_sample(rng: &mut ChaCha8Rng, side: usize, noise: f64) -> (Image, Mask) {
    let s = side as f64;
    let (cx, cy) = (s * rng.random_range(0.4..0.6), s * rng.random_range(0.4..0.6));
    let r0 = s * rng.random_range(0.2..0.3);
    // Star-shaped boundary r(φ) = r0 (1 + Σ a_j cos(jφ + p_j)); Σ a_j < 1
    // keeps the radius positive, so the blob is one component.
    let lobes: Vec<(f64, f64, f64)> = (2..5)
        .map(|j| (j as f64, rng.random_range(0.0..0.12), rng.random_range(0.0..2.0 * PI)))
        .collect();
    let skin = [
        rng.random_range(190.0..225.0),
        rng.random_range(150.0..180.0),
        rng.random_range(130.0..160.0),
    ];
    let spot = [
        rng.random_range(90.0..130.0),
        rng.random_range(55.0..85.0),
        rng.random_range(40.0..70.0),
    ];
    let tex = texture(rng, side);
    let amp = noise * 255.0;

    let mut img = Vec::with_capacity(side * side * 3);
    let mut mask = Vec::with_capacity(side * side);
    for i in 0..side * side {
        let (y, x) = ((i / side) as f64 + 0.5, (i % side) as f64 + 0.5);
        let (u, v) = (x - cx, y - cy);
        let phi = v.atan2(u);
        let r = r0 * (1.0 + lobes.iter().map(|(j, a, p)| a * (j * phi + p).cos()).sum::<f64>());
        let inside = u.hypot(v) <= r;
        let base = if inside { spot } else { skin };
        let jitter = rng.random_range(-1.0..1.0) * amp * 0.3;
        for c in base {
            img.push(to_u8(c + amp * tex[i] + jitter));
        }
        mask.push(u8::from(inside));
    }
    (
        Image::new(side, side, 3, img).expect("sized"),
        Mask::new(side, side, mask).expect("binary"),
    )
}

/// Which augmentations to apply to one sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentPlan {
    pub hflip: bool,
    pub vflip: bool,
    /// Rotation in degrees about the image centre.
    pub rotation: Option<f64>,
}

impl AugmentPlan {
    pub const IDENTITY: AugmentPlan = AugmentPlan {
        hflip: false,
        vflip: false,
        rotation: None,
    };

    /// Independent coin flips for each transform; angles uniform in ±10°.
    pub fn draw(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AugmentPlan {
            hflip: rng.random_bool(0.5),
            vflip: rng.random_bool(0.5),
            rotation: rng.random_bool(0.5).then(|| rng.random_range(-10.0..=10.0)),
        }
    }
}

pub fn augment(s: &SampleRecord, seed: u64) -> SampleRecord {
    apply_plan(s, &AugmentPlan::draw(seed))
}

pub fn apply_plan(s: &SampleRecord, plan: &AugmentPlan) -> SampleRecord {
    let (h, w, c) = (s.image.height, s.image.width, s.image.channels);
    let mut img = s.image.data.clone();
    let mut mask = s.mask.data.clone();
    if plan.hflip {
        img = remap(&img, h, w, c, |y, x| (y, w - 1 - x));
        mask = remap(&mask, h, w, 1, |y, x| (y, w - 1 - x));
    }
    if plan.vflip {
        img = remap(&img, h, w, c, |y, x| (h - 1 - y, x));
        mask = remap(&mask, h, w, 1, |y, x| (h - 1 - y, x));
    }
    if let Some(deg) = plan.rotation {
        img = rotate_bilinear(&img, h, w, c, deg);
        mask = rotate_nearest(&mask, h, w, deg);
    }
    SampleRecord {
        id: s.id.clone(),
        image: Image::new(h, w, c, img).expect("shape preserved"),
        mask: Mask::new(h, w, mask).expect("nearest resampling keeps labels binary"),
        split: s.split,
    }
}

fn remap(src: &[u8], h: usize, w: usize, c: usize, from: impl Fn(usize, usize) -> (usize, usize)) -> Vec<u8> {
    let mut out = vec![0; src.len()];
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = from(y, x);
            out[(y * w + x) * c..][..c].copy_from_slice(&src[(sy * w + sx) * c..][..c]);
        }
    }
    out
}

/// Source coordinates (pixel-centre convention) of output pixel `(y, x)`
/// under a rotation by `deg` about the centre.
fn rotation_source(y: usize, x: usize, h: usize, w: usize, deg: f64) -> (f64, f64) {
    let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
    let (sin, cos) = deg.to_radians().sin_cos();
    let (u, v) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
    (-u * sin + v * cos + cy - 0.5, u * cos + v * sin + cx - 0.5)
}

fn rotate_bilinear(src: &[u8], h: usize, w: usize, c: usize, deg: f64) -> Vec<u8> {
    let mut out = vec![0; src.len()];
    let clampf = |v: f64, n: usize| v.clamp(0.0, (n - 1) as f64);
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = rotation_source(y, x, h, w, deg);
            let (sy, sx) = (clampf(sy, h), clampf(sx, w));
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
            for ch in 0..c {
                let at = |yy: usize, xx: usize| src[(yy * w + xx) * c + ch] as f64;
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out[(y * w + x) * c + ch] = to_u8(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    out
}

fn rotate_nearest(src: &[u8], h: usize, w: usize, deg: f64) -> Vec<u8> {
    let mut out = vec![0; src.len()];
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = rotation_source(y, x, h, w, deg);
            let sy = sy.round().clamp(0.0, (h - 1) as f64) as usize;
            let sx = sx.round().clamp(0.0, (w - 1) as f64) as usize;
            out[y * w + x] = src[sy * w + sx];
        }
    }
    out
}

fn write_pnm(path: &Path, data: &[u8], w: usize, h: usize, channels: usize) -> Result<()> {
    let (subtype, color) = if channels == 1 {
        (PnmSubtype::Graymap(SampleEncoding::Binary), ExtendedColorType::L8)
    } else {
        (PnmSubtype::Pixmap(SampleEncoding::Binary), ExtendedColorType::Rgb8)
    };
    let mut buf = Vec::new();
    PnmEncoder::new(&mut buf)
        .with_subtype(subtype)
        .write_image(data, w as u32, h as u32, color)
        .map_err(|e| Error::Image {
            path: path.to_owned(),
            message: e.to_string(),
        })?;
    fs::write(path, buf).map_err(io_err(path))
}

fn read_pnm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let img = image::load_from_memory_with_format(&bytes, ImageFormat::Pnm).map_err(|e| Error::Image {
        path: path.to_owned(),
        message: e.to_string(),
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if img.color().channel_count() == 1 {
        Image::new(h, w, 1, img.into_luma8().into_raw())
    } else {
        Image::new(h, w, 3, img.into_rgb8().into_raw())
    }
}

pub fn save_dataset(records: &[SampleRecord], dir: &Path) -> Result<()> {
    let images = dir.join("images");
    let masks = dir.join("masks");
    fs::create_dir_all(&images).map_err(io_err(&images))?;
    fs::create_dir_all(&masks).map_err(io_err(&masks))?;
    let mut split = String::new();
    for r in records {
        let ext = if r.image.channels == 1 { "pgm" } else { "ppm" };
        let im = &r.image;
        write_pnm(&images.join(format!("{}.{ext}", r.id)), &im.data, im.width, im.height, im.channels)?;
        let m: Vec<u8> = r.mask.data.iter().map(|&v| v * 255).collect();
        write_pnm(&masks.join(format!("{}.pgm", r.id)), &m, r.mask.width, r.mask.height, 1)?;
        split.push_str(&format!("{} {}\n", r.id, r.split.as_str()));
    }
    let path = dir.join("split.txt");
    fs::write(&path, split).map_err(io_err(&path))
}

/// Loads a dataset directory. Ids follow `split.txt` order; images not
/// listed there default to the training split.
pub fn load_dataset(dir: &Path) -> Result<Vec<SampleRecord>> {
    let images = dir.join("images");
    let mut ids: Vec<(String, std::path::PathBuf)> = match fs::read_dir(&images) {
        Ok(entries) => {
            let mut v = Vec::new();
            for e in entries {
                let path = e.map_err(io_err(&images))?.path();
                let ext = path.extension().and_then(|e| e.to_str());
                if matches!(ext, Some("pgm" | "ppm")) {
                    let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_owned();
                    v.push((id, path));
                }
            }
            v
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(io_err(&images)(e)),
    };
    if ids.is_empty() {
        log::warn!("{}: no images found, dataset is empty", dir.display());
        return Ok(Vec::new());
    }
    ids.sort();

    let split_path = dir.join("split.txt");
    let mut splits = std::collections::HashMap::new();
    let mut order = Vec::new();
    match fs::read_to_string(&split_path) {
        Ok(text) => {
            for (n, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() {
                    continue;
                }
                let mut it = line.split_whitespace();
                let (Some(id), Some(split), None) = (it.next(), it.next(), it.next()) else {
                    return Err(Error::Dataset(format!("{}:{}: expected `id split`", split_path.display(), n + 1)));
                };
                splits.insert(id.to_owned(), split.parse::<Split>()?);
                order.push(id.to_owned());
            }
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            log::warn!("{}: missing, all samples treated as training data", split_path.display());
        }
        Err(e) => return Err(io_err(&split_path)(e)),
    }
    // split.txt order first, then any unlisted ids alphabetically.
    let rank = |id: &str| order.iter().position(|o| o == id).unwrap_or(usize::MAX);
    ids.sort_by_key(|(id, _)| (rank(id), id.clone()));

    let mut out = Vec::with_capacity(ids.len());
    for (id, path) in ids {
        let image = read_pnm(&path)?;
        let mask_path = dir.join("masks").join(format!("{id}.pgm"));
        if !mask_path.exists() {
            return Err(Error::MissingMask(id));
        }
        let raw = read_pnm(&mask_path)?;
        if raw.channels != 1 {
            return Err(Error::Dataset(format!("{}: mask is not grayscale", mask_path.display())));
        }
        let mut bits = Vec::with_capacity(raw.data.len());
        for (index, &v) in raw.data.iter().enumerate() {
            bits.push(match v {
                0 => 0,
                255 => 1,
                value => return Err(Error::NonBinaryMask { value, index }),
            });
        }
        let mask = Mask::new(raw.height, raw.width, bits)?;
        let split = splits.get(&id).copied().unwrap_or(Split::Train);
        out.push(SampleRecord::new(id, image, mask, split)?);
    }
    Ok(out)
}
