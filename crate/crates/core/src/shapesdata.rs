//! Procedural attribute-labelled shapes dataset.
//!
//! Every image is one filled, saturated shape (circle, square or equilateral
//! triangle) over a gray textured background. Backgrounds are exactly gray
//! (R = G = B), so per-pixel chroma equals the object coverage, which makes the
//! attributes recoverable from pixels by [`measure_attributes`].

use std::ffi::OsStr;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use crate::error::{Error, Result};

pub const SUPPORTED_RESOLUTIONS: [usize; 2] = [32, 64];

pub const HUE_RANGE: (f64, f64) = (0.0, 1.0);
pub const SIZE_RANGE: (f64, f64) = (0.15, 0.45);
pub const POS_RANGE: (f64, f64) = (0.3, 0.7);

/// Chroma below this level is treated as background by the measurement code.
const CHROMA_FLOOR: f64 = 0.1;
/// Lattice cells per image side for the background texture.
const BG_LATTICE: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeClass {
    Circle,
    Square,
    Triangle,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 3] = [ShapeClass::Circle, ShapeClass::Square, ShapeClass::Triangle];

    pub fn index(self) -> usize {
        match self {
            ShapeClass::Circle => 0,
            ShapeClass::Square => 1,
            ShapeClass::Triangle => 2,
        }
    }

    /// Signed distance (pixels) from `(dx, dy)` relative to the shape center
    /// to the boundary of a shape whose area equals a circle of radius `r`.
    fn sdf(self, dx: f64, dy: f64, r: f64) -> f64 {
        match self {
            ShapeClass::Circle => (dx * dx + dy * dy).sqrt() - r,
            ShapeClass::Square => {
                let half = 0.5 * r * std::f64::consts::PI.sqrt();
                (dx.abs() - half).max(dy.abs() - half)
            }
            ShapeClass::Triangle => {
                // Apex up (towards smaller y); inradius of the equal-area
                // equilateral triangle is half its circumradius.
                let circum = r * (4.0 * std::f64::consts::PI / (3.0 * 3f64.sqrt())).sqrt();
                let inradius = 0.5 * circum;
                let s = 3f64.sqrt() / 2.0;
                let d = dy.max(s * dx - 0.5 * dy).max(-s * dx - 0.5 * dy);
                d - inradius
            }
        }
    }
}

/// Ground-truth attributes of one rendered image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeVector {
    pub shape_class: ShapeClass,
    pub hue: f64,
    /// Object radius as a fraction of the image side (equal-area radius for
    /// non-circular shapes).
    pub size: f64,
    pub pos_x: f64,
    pub pos_y: f64,
    pub bg_seed: u64,
}

impl AttributeVector {
    pub fn validate(&self) -> Result<()> {
        fn check(field: &'static str, v: f64, lo: f64, hi: f64, hi_open: bool) -> Result<()> {
            let ok = v.is_finite() && v >= lo && if hi_open { v < hi } else { v <= hi };
            if ok {
                Ok(())
            } else {
                let close = if hi_open { ")" } else { "]" };
                Err(Error::validation(
                    field,
                    format!("{v} outside [{lo}, {hi}{close}"),
                ))
            }
        }
        check("hue", self.hue, HUE_RANGE.0, HUE_RANGE.1, true)?;
        check("size", self.size, SIZE_RANGE.0, SIZE_RANGE.1, false)?;
        check("pos_x", self.pos_x, POS_RANGE.0, POS_RANGE.1, false)?;
        check("pos_y", self.pos_y, POS_RANGE.0, POS_RANGE.1, false)?;
        Ok(())
    }
}

/// Dense B×3×R×R image batch with values in [-1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    batch: usize,
    resolution: usize,
    pixels: Vec<f32>,
}

impl ImageBatch {
    /// Builds a batch, rejecting non-finite values and clamping to [-1, 1].
    pub fn new(batch: usize, resolution: usize, mut pixels: Vec<f32>) -> Result<Self> {
        let expected = batch * 3 * resolution * resolution;
        if pixels.len() != expected {
            return Err(Error::Shape(format!(
                "image batch needs {expected} values for {batch}x3x{resolution}x{resolution}, got {}",
                pixels.len()
            )));
        }
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("pixels", "non-finite pixel value"));
        }
        for v in &mut pixels {
            *v = v.clamp(-1.0, 1.0);
        }
        Ok(Self {
            batch,
            resolution,
            pixels,
        })
    }

    pub fn concat(items: &[ImageBatch]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Shape("cannot concatenate an empty list of images".into()))?;
        let mut pixels = Vec::new();
        let mut batch = 0;
        for item in items {
            if item.resolution != first.resolution {
                return Err(Error::Shape("mixed resolutions in concatenation".into()));
            }
            pixels.extend_from_slice(&item.pixels);
            batch += item.batch;
        }
        Ok(Self {
            batch,
            resolution: first.resolution,
            pixels,
        })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    fn image_len(&self) -> usize {
        3 * self.resolution * self.resolution
    }

    /// The `i`-th image as a batch of one.
    pub fn get(&self, i: usize) -> ImageBatch {
        let n = self.image_len();
        ImageBatch {
            batch: 1,
            resolution: self.resolution,
            pixels: self.pixels[i * n..(i + 1) * n].to_vec(),
        }
    }

    pub fn split(&self) -> Vec<ImageBatch> {
        (0..self.batch).map(|i| self.get(i)).collect()
    }

    /// Pixel `(c, y, x)` of image `i`.
    #[inline]
    pub fn at(&self, i: usize, c: usize, y: usize, x: usize) -> f32 {
        let r = self.resolution;
        self.pixels[((i * 3 + c) * r + y) * r + x]
    }

    pub fn to_tensor(&self) -> Tensor {
        let r = self.resolution as i64;
        Tensor::from_slice(&self.pixels).view([self.batch as i64, 3, r, r])
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let size = t.size();
        if size.len() != 4 || size[1] != 3 || size[2] != size[3] {
            return Err(Error::Shape(format!("expected Bx3xRxR tensor, got {size:?}")));
        }
        let flat = t
            .detach()
            .to_kind(Kind::Float)
            .contiguous()
            .view([-1]);
        let pixels = Vec::<f32>::try_from(&flat)?;
        Self::new(size[0] as usize, size[2] as usize, pixels)
    }
}

fn check_resolution(resolution: usize) -> Result<()> {
    if SUPPORTED_RESOLUTIONS.contains(&resolution) {
        Ok(())
    } else {
        Err(Error::validation(
            "resolution",
            format!("{resolution} not in {SUPPORTED_RESOLUTIONS:?}"),
        ))
    }
}

/// HSV(hue, 1, 1) as RGB in [0, 1].
pub fn hue_to_rgb(hue: f64) -> [f64; 3] {
    let h = hue.rem_euclid(1.0) * 6.0;
    let x = 1.0 - ((h % 2.0) - 1.0).abs();
    match h as u32 {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        3 => [0.0, x, 1.0],
        4 => [x, 0.0, 1.0],
        _ => [1.0, 0.0, x],
    }
}

fn rgb_to_hue(rgb: [f64; 3]) -> Option<f64> {
    let max = rgb.iter().cloned().fold(f64::MIN, f64::max);
    let min = rgb.iter().cloned().fold(f64::MAX, f64::min);
    let c = max - min;
    if c <= 1e-9 {
        return None;
    }
    let [r, g, b] = rgb;
    let h = if max == r {
        ((g - b) / c).rem_euclid(6.0)
    } else if max == g {
        (b - r) / c + 2.0
    } else {
        (r - g) / c + 4.0
    };
    Some((h / 6.0).rem_euclid(1.0))
}

/// Gray background level in [0, 1] for every pixel, row-major.
pub fn background(bg_seed: u64, resolution: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(bg_seed);
    let base = rng.gen_range(0.30..0.45);
    let gx = rng.gen_range(-0.15..0.15);
    let gy = rng.gen_range(-0.15..0.15);
    let normal = Normal::new(0.0, 0.07).expect("valid sigma");
    let side = BG_LATTICE + 1;
    let lattice: Vec<f64> = (0..side * side).map(|_| normal.sample(&mut rng)).collect();

    let mut out = Vec::with_capacity(resolution * resolution);
    for y in 0..resolution {
        for x in 0..resolution {
            let u = (x as f64 + 0.5) / resolution as f64;
            let v = (y as f64 + 0.5) / resolution as f64;
            let fu = u * BG_LATTICE as f64;
            let fv = v * BG_LATTICE as f64;
            let (iu, iv) = (fu.floor() as usize, fv.floor() as usize);
            let (tu, tv) = (fu - iu as f64, fv - iv as f64);
            let at = |a: usize, b: usize| lattice[b * side + a];
            let noise = (1.0 - tu) * (1.0 - tv) * at(iu, iv)
                + tu * (1.0 - tv) * at(iu + 1, iv)
                + (1.0 - tu) * tv * at(iu, iv + 1)
                + tu * tv * at(iu + 1, iv + 1);
            let g = base + gx * (u - 0.5) + gy * (v - 0.5) + noise;
            out.push(g.clamp(0.0, 0.75));
        }
    }
    out
}

/// Anti-aliased object coverage in [0, 1] for a shape centred at `(cx, cy)`
/// with radius `r`, all in pixels, row-major.
pub fn coverage(shape: ShapeClass, cx: f64, cy: f64, r: f64, resolution: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(resolution * resolution);
    for y in 0..resolution {
        for x in 0..resolution {
            let d = shape.sdf(x as f64 + 0.5 - cx, y as f64 + 0.5 - cy, r);
            out.push((0.5 - d).clamp(0.0, 1.0));
        }
    }
    out
}

/// Rasterizes one image; a pure function of `(attrs, resolution)`.
pub fn render(attrs: &AttributeVector, resolution: usize) -> Result<ImageBatch> {
    check_resolution(resolution)?;
    attrs.validate()?;
    let res = resolution as f64;
    let bg = background(attrs.bg_seed, resolution);
    let cov = coverage(
        attrs.shape_class,
        attrs.pos_x * res,
        attrs.pos_y * res,
        attrs.size * res,
        resolution,
    );
    let color = hue_to_rgb(attrs.hue);
    let n = resolution * resolution;
    let mut pixels = vec![0f32; 3 * n];
    for c in 0..3 {
        for p in 0..n {
            let v = bg[p] * (1.0 - cov[p]) + color[c] * cov[p];
            pixels[c * n + p] = (v * 2.0 - 1.0) as f32;
        }
    }
    ImageBatch::new(1, resolution, pixels)
}

/// Draws attributes uniformly from their ranges.
pub fn sample_attributes<R: Rng>(rng: &mut R) -> AttributeVector {
    let shape_class = ShapeClass::ALL[rng.gen_range(0..3)];
    AttributeVector {
        shape_class,
        hue: rng.gen_range(HUE_RANGE.0..HUE_RANGE.1),
        size: rng.gen_range(SIZE_RANGE.0..=SIZE_RANGE.1),
        pos_x: rng.gen_range(POS_RANGE.0..=POS_RANGE.1),
        pos_y: rng.gen_range(POS_RANGE.0..=POS_RANGE.1),
        bg_seed: rng.gen(),
    }
}

pub fn sample_attribute_list(seed: u64, n: usize) -> Vec<AttributeVector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| sample_attributes(&mut rng)).collect()
}

/// Seeded dataset of `n` rendered images with their attributes.
pub fn sample_dataset(
    seed: u64,
    n: usize,
    resolution: usize,
) -> Result<Vec<(ImageBatch, AttributeVector)>> {
    check_resolution(resolution)?;
    if n == 0 {
        return Err(Error::validation("n", "dataset size must be at least 1"));
    }
    sample_attribute_list(seed, n)
        .into_iter()
        .map(|a| Ok((render(&a, resolution)?, a)))
        .collect()
}

/// Attribute estimate recovered from pixels. Fields the estimator could not
/// determine are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasuredAttributes {
    pub shape_class: Option<ShapeClass>,
    pub hue: Option<f64>,
    pub size: Option<f64>,
    pub pos_x: Option<f64>,
    pub pos_y: Option<f64>,
    /// Foreground area in pixels (sum of coverage).
    pub area: f64,
    /// Fitted shape model in pixels: (class, cx, cy, r).
    pub fit: Option<ShapeFit>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeFit {
    pub shape_class: ShapeClass,
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
    pub residual: f64,
}

impl ShapeFit {
    /// Binary mask of the fitted shape dilated by `scale` about its center.
    pub fn dilated_mask(&self, scale: f64, resolution: usize) -> Vec<bool> {
        coverage(self.shape_class, self.cx, self.cy, self.r * scale, resolution)
            .into_iter()
            .map(|c| c > 0.0)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum Measurement {
    Measured(MeasuredAttributes),
    Unmeasurable,
}

impl Measurement {
    pub fn attributes(&self) -> Option<&MeasuredAttributes> {
        match self {
            Measurement::Measured(m) => Some(m),
            Measurement::Unmeasurable => None,
        }
    }
}

/// Per-pixel chroma-derived coverage of image `i`, floored at [`CHROMA_FLOOR`].
pub fn foreground_coverage(img: &ImageBatch, i: usize) -> Vec<f64> {
    let r = img.resolution();
    let mut out = Vec::with_capacity(r * r);
    for y in 0..r {
        for x in 0..r {
            let px = [0, 1, 2].map(|c| (img.at(i, c, y, x) as f64 + 1.0) * 0.5);
            let max = px.iter().cloned().fold(f64::MIN, f64::max);
            let min = px.iter().cloned().fold(f64::MAX, f64::min);
            out.push(floor_chroma((max - min).clamp(0.0, 1.0)));
        }
    }
    out
}

fn floor_chroma(c: f64) -> f64 {
    if c < CHROMA_FLOOR {
        0.0
    } else {
        c
    }
}

/// Estimates the attributes of every image in `img`.
pub fn measure_batch(img: &ImageBatch) -> Vec<Measurement> {
    (0..img.batch()).map(|i| measure_one(img, i)).collect()
}

/// Estimates attributes of a single-image batch (the first image otherwise).
pub fn measure_attributes(img: &ImageBatch) -> Measurement {
    measure_one(img, 0)
}

fn measure_one(img: &ImageBatch, i: usize) -> Measurement {
    let res = img.resolution();
    let cov = foreground_coverage(img, i);
    let area: f64 = cov.iter().sum();
    if area < 3.0 {
        return Measurement::Unmeasurable;
    }
    let (mut sx, mut sy) = (0.0, 0.0);
    for (p, &c) in cov.iter().enumerate() {
        sx += c * ((p % res) as f64 + 0.5);
        sy += c * ((p / res) as f64 + 0.5);
    }
    let init = [sx / area, sy / area, (area / std::f64::consts::PI).sqrt()];

    let best = ShapeClass::ALL
        .iter()
        .map(|&shape| {
            let objective = |p: &[f64; 3]| {
                if p[2] <= 0.5 {
                    return 1e12;
                }
                let model = coverage(shape, p[0], p[1], p[2], res);
                model
                    .iter()
                    .zip(&cov)
                    .map(|(&m, &o)| {
                        let d = floor_chroma(m) - o;
                        d * d
                    })
                    .sum::<f64>()
            };
            let scale = 0.15 * init[2].max(1.0);
            let (p, f) = nelder_mead(objective, init, [scale, scale, scale], 400);
            ShapeFit {
                shape_class: shape,
                cx: p[0],
                cy: p[1],
                r: p[2],
                residual: f,
            }
        })
        .min_by(|a, b| a.residual.total_cmp(&b.residual))
        .expect("three candidate shapes");

    let good_fit = best.residual <= 0.5 * area;
    let resf = res as f64;
    let hue = estimate_hue(img, i, &cov);
    Measurement::Measured(MeasuredAttributes {
        shape_class: good_fit.then_some(best.shape_class),
        hue,
        size: good_fit.then_some(best.r / resf),
        pos_x: good_fit.then_some(best.cx / resf),
        pos_y: good_fit.then_some(best.cy / resf),
        area,
        fit: Some(best),
    })
}

fn estimate_hue(img: &ImageBatch, i: usize, cov: &[f64]) -> Option<f64> {
    let res = img.resolution();
    let (mut sx, mut sy, mut wsum) = (0.0, 0.0, 0.0);
    for (p, &c) in cov.iter().enumerate() {
        if c < 0.5 {
            continue;
        }
        let (y, x) = (p / res, p % res);
        let px = [0, 1, 2].map(|ch| (img.at(i, ch, y, x) as f64 + 1.0) * 0.5);
        let min = px.iter().cloned().fold(f64::MAX, f64::min);
        let color = px.map(|v| (v - min) / c);
        if let Some(h) = rgb_to_hue(color) {
            let angle = h * std::f64::consts::TAU;
            sx += c * angle.cos();
            sy += c * angle.sin();
            wsum += c;
        }
    }
    if wsum <= 0.0 || (sx * sx + sy * sy).sqrt() < 1e-9 {
        return None;
    }
    Some((sy.atan2(sx) / std::f64::consts::TAU).rem_euclid(1.0))
}

/// Circular distance between two hues in [0, 1).
pub fn hue_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(1.0);
    d.min(1.0 - d)
}

fn nelder_mead<F: Fn(&[f64; 3]) -> f64>(
    f: F,
    start: [f64; 3],
    step: [f64; 3],
    max_iter: usize,
) -> ([f64; 3], f64) {
    let mut simplex: Vec<([f64; 3], f64)> = (0..4)
        .map(|k| {
            let mut p = start;
            if k > 0 {
                p[k - 1] += step[k - 1];
            }
            (p, f(&p))
        })
        .collect();
    let lerp = |a: &[f64; 3], b: &[f64; 3], t: f64| -> [f64; 3] {
        [0, 1, 2].map(|i| a[i] + t * (b[i] - a[i]))
    };
    for _ in 0..max_iter {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        if (simplex[3].1 - simplex[0].1).abs() < 1e-10 {
            break;
        }
        let centroid = [0, 1, 2].map(|i| simplex[..3].iter().map(|s| s.0[i]).sum::<f64>() / 3.0);
        let worst = simplex[3];
        let reflected = lerp(&centroid, &worst.0, -1.0);
        let fr = f(&reflected);
        if fr < simplex[0].1 {
            let expanded = lerp(&centroid, &worst.0, -2.0);
            let fe = f(&expanded);
            simplex[3] = if fe < fr { (expanded, fe) } else { (reflected, fr) };
        } else if fr < simplex[2].1 {
            simplex[3] = (reflected, fr);
        } else {
            let contracted = if fr < worst.1 {
                lerp(&centroid, &reflected, 0.5)
            } else {
                lerp(&centroid, &worst.0, 0.5)
            };
            let fc = f(&contracted);
            if fc < worst.1.min(fr) {
                simplex[3] = (contracted, fc);
            } else {
                let best = simplex[0].0;
                for s in simplex.iter_mut().skip(1) {
                    s.0 = lerp(&best, &s.0, 0.5);
                    s.1 = f(&s.0);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    simplex[0]
}

fn to_u8(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Encodes image `i` of the batch as an 8-bit RGB image buffer.
pub fn to_rgb8(img: &ImageBatch, i: usize) -> image::RgbImage {
    let r = img.resolution() as u32;
    image::RgbImage::from_fn(r, r, |x, y| {
        image::Rgb([0, 1, 2].map(|c| to_u8(img.at(i, c, y as usize, x as usize))))
    })
}

pub fn save_png(img: &ImageBatch, i: usize, path: impl AsRef<Path>) -> Result<()> {
    to_rgb8(img, i).save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub fn png_bytes(img: &ImageBatch, i: usize) -> Result<Vec<u8>> {
    let mut out = std::io::Cursor::new(Vec::new());
    to_rgb8(img, i).write_to(&mut out, image::ImageFormat::Png)?;
    Ok(out.into_inner())
}

/// Tiles all images of `rows` (each row one batch) into one PNG.
pub fn save_grid(rows: &[&ImageBatch], path: impl AsRef<Path>) -> Result<()> {
    let Some(first) = rows.first() else {
        return Ok(());
    };
    let r = first.resolution() as u32;
    let cols = rows.iter().map(|b| b.batch()).max().unwrap_or(0) as u32;
    let mut canvas = image::RgbImage::new(cols * r, rows.len() as u32 * r);
    for (ri, row) in rows.iter().enumerate() {
        for i in 0..row.batch() {
            let tile = to_rgb8(row, i);
            image::imageops::replace(&mut canvas, &tile, (i as u32 * r) as i64, (ri as u32 * r) as i64);
        }
    }
    canvas.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Decodes image bytes, center-crops to a square and resizes to `resolution`.
pub fn decode_image(bytes: &[u8], resolution: usize) -> Result<ImageBatch> {
    let decoded = image::load_from_memory(bytes)?;
    Ok(ingest(decoded, resolution))
}

fn ingest(decoded: image::DynamicImage, resolution: usize) -> ImageBatch {
    let rgb = decoded.to_rgb8();
    let (w, h) = rgb.dimensions();
    let side = w.min(h);
    let cropped =
        image::imageops::crop_imm(&rgb, (w - side) / 2, (h - side) / 2, side, side).to_image();
    let target = resolution as u32;
    let sized = if side == target {
        cropped
    } else {
        image::imageops::resize(&cropped, target, target, image::imageops::FilterType::Triangle)
    };
    let n = resolution * resolution;
    let mut pixels = vec![0f32; 3 * n];
    for (x, y, p) in sized.enumerate_pixels() {
        let idx = y as usize * resolution + x as usize;
        for c in 0..3 {
            pixels[c * n + idx] = p[c] as f32 / 127.5 - 1.0;
        }
    }
    ImageBatch::new(1, resolution, pixels).expect("decoded pixels are finite")
}

#[derive(Debug)]
pub enum FolderItem {
    Image { path: PathBuf, image: ImageBatch },
    Warning { path: PathBuf, message: String },
}

/// Lazily decodes the PNG files of a folder in lexicographic order.
pub struct FolderStream {
    files: std::vec::IntoIter<PathBuf>,
    resolution: usize,
}

impl Iterator for FolderStream {
    type Item = FolderItem;

    fn next(&mut self) -> Option<FolderItem> {
        let path = self.files.next()?;
        let item = match std::fs::read(&path)
            .map_err(Error::from)
            .and_then(|b| decode_image(&b, self.resolution))
        {
            Ok(image) => FolderItem::Image { path, image },
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                FolderItem::Warning {
                    path,
                    message: e.to_string(),
                }
            }
        };
        Some(item)
    }
}

pub fn load_folder(dir: impl AsRef<Path>, resolution: usize) -> Result<FolderStream> {
    check_resolution(resolution)?;
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir.as_ref())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(OsStr::to_str)
                    .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        })
        .collect();
    files.sort();
    Ok(FolderStream {
        files: files.into_iter(),
        resolution,
    })
}
