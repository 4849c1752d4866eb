//! Reconstruction and editing metrics and the evaluation protocol over a set
//! of trained variants.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use crate::attrnet::AttrNet;
use crate::checkpoint::CheckpointBundle;
use crate::editops::{attribute_threshold, interp_edit, invert_edit, DirectionBank, EditSpec, ReverseMode};
use crate::encoders::Pipeline;
use crate::error::{Error, Result};
use crate::losses::PERCEPTUAL_LAYERS;
use crate::models::Models;
use crate::shapesdata::{load_folder, measure_batch, sample_dataset, save_grid, FolderItem, ImageBatch, MeasuredAttributes, Measurement};

pub const REPORT_VERSION: u32 = 1;

pub const SSIM_WINDOW: i64 = 11;
pub const SSIM_SIGMA: f64 = 1.5;
/// Dynamic range of images in [−1, 1].
const DATA_RANGE: f64 = 2.0;

fn gaussian_window() -> Tensor {
    let half = (SSIM_WINDOW - 1) as f64 / 2.0;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    let g = Tensor::from_slice(&g.iter().map(|v| v / s).collect::<Vec<_>>());
    g.outer(&g)
}

/// Per-image SSIM (mean over channels and valid window positions) with the
/// standard 11×11 Gaussian window (σ = 1.5) and K1 = 0.01, K2 = 0.03.
pub fn ssim_per_image(x: &Tensor, y: &Tensor) -> Result<Vec<f64>> {
    let s = x.size();
    if s != y.size() || s.len() != 4 {
        return Err(Error::Shape(format!("ssim needs equal BxCxHxW inputs, got {:?} and {:?}", s, y.size())));
    }
    if s[2] < SSIM_WINDOW || s[3] < SSIM_WINDOW {
        return Err(Error::validation(
            "image",
            format!("{}x{} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window", s[2], s[3]),
        ));
    }
    let c = s[1];
    let (x, y) = (x.detach().to_kind(Kind::Double), y.detach().to_kind(Kind::Double));
    let w = gaussian_window().view([1, 1, SSIM_WINDOW, SSIM_WINDOW]).repeat([c, 1, 1, 1]);
    let filt = |t: &Tensor| t.conv2d(&w, None::<Tensor>, [1, 1], [0, 0], [1, 1], c);
    let (mx, my) = (filt(&x), filt(&y));
    let sxx = filt(&(&x * &x)) - &mx * &mx;
    let syy = filt(&(&y * &y)) - &my * &my;
    let sxy = filt(&(&x * &y)) - &mx * &my;
    let c1 = (0.01 * DATA_RANGE).powi(2);
    let c2 = (0.03 * DATA_RANGE).powi(2);
    let num = (&mx * &my * 2.0 + c1) * (sxy * 2.0 + c2);
    let den = (&mx * &mx + &my * &my + c1) * (sxx + syy + c2);
    let map = num / den;
    Ok(Vec::<f64>::try_from(&map.mean_dim(&[1i64, 2, 3][..], false, Kind::Double))?)
}

/// Mean SSIM over a batch.
pub fn ssim(x: &Tensor, y: &Tensor) -> Result<f64> {
    let v = ssim_per_image(x, y)?;
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

/// Gaussian fit of a set of embeddings.
#[derive(Clone, Debug)]
pub struct FeatureStatistics {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub count: usize,
}

impl FeatureStatistics {
    /// Needs at least as many samples as embedding dimensions.
    pub fn fit(samples: &[Vec<f64>]) -> Result<Self> {
        let d = samples.first().map(Vec::len).unwrap_or(0);
        let min = d.max(2);
        if samples.len() < min {
            return Err(Error::TooFewSamples {
                got: samples.len(),
                min,
            });
        }
        if samples.iter().any(|s| s.len() != d) {
            return Err(Error::Shape("embeddings have different lengths".into()));
        }
        let n = samples.len();
        let x = DMatrix::from_fn(n, d, |i, j| samples[i][j]);
        let mean = x.row_mean().transpose();
        let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
        let cov = centered.transpose() * &centered / (n - 1) as f64;
        Ok(Self {
            mean,
            cov: (&cov + cov.transpose()) * 0.5,
            count: n,
        })
    }
}

/// Eigenvalues below zero but within this (scale-relative) tolerance are
/// treated as zero.
pub const EIGEN_CLAMP: f64 = 1e-6;

fn clamped_eigen(m: &DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let mut e = SymmetricEigen::new(m.clone());
    let scale = e.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    for v in e.eigenvalues.iter_mut() {
        if *v < 0.0 {
            if *v < -EIGEN_CLAMP * scale {
                return Err(Error::validation("covariance", format!("not positive semi-definite (eigenvalue {v})")));
            }
            *v = 0.0;
        }
    }
    Ok(e)
}

fn sqrtm_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let e = clamped_eigen(m)?;
    let s = DMatrix::from_diagonal(&e.eigenvalues.map(f64::sqrt));
    Ok(&e.eigenvectors * s * e.eigenvectors.transpose())
}

/// Fréchet distance between two Gaussian fits:
/// ‖μa−μb‖² + Tr(Σa + Σb − 2 (Σa Σb)^½), using
/// Tr (Σa Σb)^½ = Tr (Σa^½ Σb Σa^½)^½ so only symmetric roots are needed.
pub fn frechet_distance(a: &FeatureStatistics, b: &FeatureStatistics) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        return Err(Error::Shape("embedding widths differ".into()));
    }
    let diff = &a.mean - &b.mean;
    let ra = sqrtm_psd(&a.cov)?;
    let inner = &ra * &b.cov * &ra;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = clamped_eigen(&inner)?.eigenvalues.iter().map(|v| v.sqrt()).sum();
    let v = diff.norm_squared() + a.cov.trace() + b.cov.trace() - 2.0 * tr_sqrt;
    Ok(v.max(0.0))
}

/// Fréchet distance between Gaussian fits of two embedding sets.
pub fn toy_fid(set_a: &[Vec<f64>], set_b: &[Vec<f64>]) -> Result<f64> {
    frechet_distance(&FeatureStatistics::fit(set_a)?, &FeatureStatistics::fit(set_b)?)
}

/// Measured attributes that edit directions can target.
pub fn attribute_value(m: &MeasuredAttributes, attribute: &str) -> Option<f64> {
    match attribute {
        "size" => m.size,
        "pos_x" => m.pos_x,
        "pos_y" => m.pos_y,
        "hue" => m.hue,
        _ => None,
    }
}

fn attribute_delta(attribute: &str, before: f64, after: f64) -> f64 {
    if attribute == "hue" {
        // Signed circular difference in (−0.5, 0.5].
        let d = (after - before).rem_euclid(1.0);
        if d > 0.5 {
            d - 1.0
        } else {
            d
        }
    } else {
        after - before
    }
}

/// Signed attribute changes between paired measurements; `None` where
/// either side is unmeasurable.
pub fn attribute_deltas(before: &[Measurement], after: &[Measurement], attribute: &str) -> Vec<Option<f64>> {
    before
        .iter()
        .zip(after)
        .map(|(b, a)| {
            let b = attribute_value(b.attributes()?, attribute)?;
            let a = attribute_value(a.attributes()?, attribute)?;
            Some(attribute_delta(attribute, b, a))
        })
        .collect()
}

/// Linear-interpolated quantile of unsorted values.
pub fn quantile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    Some(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

/// 95th percentile of |Δattribute| between inputs and their unedited
/// reconstructions.
pub fn noise_floor(inputs: &[Measurement], reconstructions: &[Measurement], attribute: &str) -> f64 {
    let d: Vec<f64> = attribute_deltas(inputs, reconstructions, attribute)
        .into_iter()
        .flatten()
        .map(f64::abs)
        .collect();
    quantile(&d, 0.95).unwrap_or(0.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Validity {
    pub rate: f64,
    pub counted: usize,
    pub unmeasurable: usize,
}

/// Fraction of measurable pairs whose attribute moved in the direction of
/// `sign` by more than `floor`.
pub fn edit_validity(
    inputs: &[Measurement],
    edited: &[Measurement],
    attribute: &str,
    sign: f64,
    floor: f64,
) -> Result<Validity> {
    if inputs.len() != edited.len() {
        return Err(Error::Shape("input and edited sets differ in size".into()));
    }
    if !matches!(attribute, "size" | "pos_x" | "pos_y" | "hue") {
        return Err(Error::validation("attribute", format!("`{attribute}` is not measurable")));
    }
    let deltas = attribute_deltas(inputs, edited, attribute);
    let counted: Vec<f64> = deltas.iter().flatten().copied().collect();
    let hits = counted.iter().filter(|&&d| d * sign.signum() > floor).count();
    Ok(Validity {
        rate: if counted.is_empty() {
            0.0
        } else {
            hits as f64 / counted.len() as f64
        },
        counted: counted.len(),
        unmeasurable: deltas.len() - counted.len(),
    })
}

/// Dilation of the fitted foreground outline that counts as foreground.
pub const BG_DILATION: f64 = 1.2;

/// Background MSE of image `i`: pixels outside the dilated shape fitted on
/// the input. `None` when the input has no fitted shape.
pub fn bg_preservation(input: &ImageBatch, edited: &ImageBatch, i: usize, measured: &Measurement) -> Option<f64> {
    let fit = measured.attributes()?.fit?;
    let r = input.resolution();
    let mask = fit.dilated_mask(BG_DILATION, r);
    let (mut sum, mut n) = (0.0, 0usize);
    for y in 0..r {
        for x in 0..r {
            if mask[y * r + x] {
                continue;
            }
            for c in 0..3 {
                let d = (input.at(i, c, y, x) - edited.at(i, c, y, x)) as f64;
                sum += d * d;
            }
            n += 3;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconMetrics {
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub perc_dist: f64,
    pub toy_fid: f64,
    pub per_image_mse: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditMetrics {
    pub direction: String,
    pub sign: f64,
    pub beta: f64,
    pub validity_rate: f64,
    pub noise_floor: f64,
    pub counted: usize,
    pub unmeasurable: usize,
    pub bg_preservation: f64,
    pub bg_counted: usize,
    /// Absent when too few edited or real images carry the attribute.
    pub toy_fid_edit: Option<f64>,
}

/// Per-image RMS errors of the no-edit and cycle reconstructions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleMetrics {
    pub recon_rms: f64,
    pub cycle_rms: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Runtime {
    pub seconds: f64,
    pub images_per_sec: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub checkpoint: PathBuf,
    pub samples: usize,
    pub recon: ReconMetrics,
    pub edits: BTreeMap<String, EditMetrics>,
    pub cycle: Option<CycleMetrics>,
    pub runtime: Runtime,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum VariantEntry {
    Ok(Box<VariantReport>),
    Absent { reason: String },
}

impl VariantEntry {
    pub fn report(&self) -> Option<&VariantReport> {
        match self {
            VariantEntry::Ok(r) => Some(r),
            VariantEntry::Absent { .. } => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub version: u32,
    pub eval_images: usize,
    pub eval_seed: u64,
    pub variants: BTreeMap<String, VariantEntry>,
}

impl MetricReport {
    pub fn variant(&self, name: &str) -> Option<&VariantReport> {
        self.variants.get(name)?.report()
    }

    /// Every metric except wall-clock runtime, flattened to `path → value`,
    /// for run-to-run comparisons.
    pub fn deterministic_values(&self) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        for (name, entry) in &self.variants {
            let Some(r) = entry.report() else { continue };
            let mut v = serde_json::to_value(r).expect("report serializes");
            v.as_object_mut().expect("object").remove("runtime");
            flatten(name, &v, &mut out);
        }
        out
    }
}

fn flatten(prefix: &str, v: &serde_json::Value, out: &mut BTreeMap<String, f64>) {
    match v {
        serde_json::Value::Number(n) => {
            out.insert(prefix.to_string(), n.as_f64().unwrap_or(f64::NAN));
        }
        serde_json::Value::Array(a) => a.iter().enumerate().for_each(|(i, x)| flatten(&format!("{prefix}[{i}]"), x, out)),
        serde_json::Value::Object(o) => o.iter().for_each(|(k, x)| flatten(&format!("{prefix}.{k}"), x, out)),
        _ => {}
    }
}

/// A named checkpoint to evaluate. `wplus_only` is evaluated without its
/// residual encoders.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSource {
    pub name: String,
    pub checkpoint: PathBuf,
}

impl VariantSource {
    pub fn new(name: &str, checkpoint: impl Into<PathBuf>) -> Self {
        Self {
            name: name.to_string(),
            checkpoint: checkpoint.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolConfig {
    pub eval_images: usize,
    pub eval_seed: u64,
    /// Extra PNG images appended to the synthetic eval set.
    pub extra_folder: Option<PathBuf>,
    pub beta: f64,
    /// (direction, sign) pairs to evaluate.
    pub edits: Vec<(String, f64)>,
    pub batch_size: usize,
    pub grid_images: usize,
    pub write_csv: bool,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        let edits = ["size", "pos_x", "pos_y"]
            .iter()
            .flat_map(|d| [(d.to_string(), 1.0), (d.to_string(), -1.0)])
            .collect();
        Self {
            eval_images: 500,
            eval_seed: 10_000_019,
            extra_folder: None,
            beta: 3.0,
            edits,
            batch_size: 50,
            grid_images: 8,
            write_csv: true,
        }
    }
}

pub fn edit_key(direction: &str, sign: f64) -> String {
    format!("{direction}{}", if sign >= 0.0 { "+" } else { "-" })
}

/// Held-out images: the seeded synthetic split plus any user images.
pub fn eval_set(cfg: &ProtocolConfig, resolution: usize) -> Result<ImageBatch> {
    let mut items: Vec<ImageBatch> = sample_dataset(cfg.eval_seed, cfg.eval_images, resolution)?
        .into_iter()
        .map(|(img, _)| img)
        .collect();
    if let Some(dir) = &cfg.extra_folder {
        for item in load_folder(dir, resolution)? {
            if let FolderItem::Image { image, .. } = item {
                items.push(image);
            }
        }
    }
    ImageBatch::concat(&items)
}

fn embed_rows(attr: &AttrNet, x: &Tensor) -> Result<Vec<Vec<f64>>> {
    let e = attr.embed_raw(x)?.to_kind(Kind::Double);
    let d = e.size()[1] as usize;
    let flat = Vec::<f64>::try_from(&e.contiguous().view([-1]))?;
    Ok(flat.chunks(d).map(<[f64]>::to_vec).collect())
}

/// Per-image Σ_j RMS(Φ_j(a) − Φ_j(b)).
fn perceptual_per_image(attr: &AttrNet, a: &Tensor, b: &Tensor) -> Result<Vec<f64>> {
    let fa = attr.features(a, &PERCEPTUAL_LAYERS)?;
    let fb = attr.features(b, &PERCEPTUAL_LAYERS)?;
    let mut total: Option<Tensor> = None;
    for (x, y) in fa.iter().zip(&fb) {
        let d = (x - y).square().mean_dim(&[1i64, 2, 3][..], false, Kind::Double).sqrt();
        total = Some(match total {
            Some(t) => t + d,
            None => d,
        });
    }
    Ok(Vec::<f64>::try_from(&total.expect("three layers"))?)
}

fn per_image_mse(a: &Tensor, b: &Tensor) -> Result<Vec<f64>> {
    Ok(Vec::<f64>::try_from(
        &(a - b).square().mean_dim(&[1i64, 2, 3][..], false, Kind::Double),
    )?)
}

fn chunks(n: usize, b: usize) -> impl Iterator<Item = (i64, i64)> {
    (0..n).step_by(b.max(1)).map(move |s| (s as i64, (b.min(n - s)) as i64))
}

fn edit_spec(bank: &DirectionBank, name: &str, sign: f64, beta: f64) -> Result<EditSpec> {
    let entry = bank
        .get(name)
        .ok_or_else(|| Error::InvalidEdit(format!("unknown direction `{name}`")))?;
    let v: Vec<f32> = entry.vector.iter().map(|x| x * sign.signum() as f32).collect();
    EditSpec::direction(v, beta)
}

/// Cycle check: mean per-image RMS of x'' (edit toward a random latent,
/// re-encode, undo) against that of the unedited reconstruction.
fn cycle_batch(p: &Pipeline, x: &Tensor, rng: &mut ChaCha8Rng) -> Result<(Vec<f64>, Vec<f64>)> {
    let g = p.generator;
    let enc = p.encode(x)?;
    let rec = p.from_codes(&enc.f0, &enc.wplus, &enc.wplus)?.image;
    let w_r = g.replicate(&g.map(&g.sample_z(rng, x.size()[0] as usize)));
    let alpha = rng.gen_range(4.0..5.0);
    let edited = p.from_codes(&enc.f0, &enc.wplus, &interp_edit(&enc.wplus, &w_r, alpha)?)?.image;
    let enc2 = p.encode(&edited)?;
    let w_rev = invert_edit(&enc2.wplus, &w_r, alpha, ReverseMode::Exact)?;
    let cycled = p.from_codes(&enc2.f0, &enc2.wplus, &w_rev)?.image;
    let rms = |a: &Tensor| -> Result<Vec<f64>> { Ok(per_image_mse(a, x)?.into_iter().map(f64::sqrt).collect()) };
    Ok((rms(&rec)?, rms(&cycled)?))
}

struct Evaluated {
    report: VariantReport,
    grid_rows: Vec<ImageBatch>,
    per_image: Vec<[f64; 4]>,
}

fn evaluate_variant(
    src: &VariantSource,
    bank: &DirectionBank,
    cfg: &ProtocolConfig,
    eval: &ImageBatch,
    eval_measured: &[Measurement],
    real_embed: &[Vec<f64>],
) -> Result<Evaluated> {
    let bundle = CheckpointBundle::load(&src.checkpoint)?;
    let models = Models::from_bundle(&bundle)?;
    let with_residual = src.name != "wplus_only";
    let p = models.pipeline(with_residual)?;
    let attr = models.attr_net()?;
    if models.config.resolution() != eval.resolution() {
        return Err(Error::Config("checkpoint resolution differs from the eval set".into()));
    }
    let n = eval.batch();
    let x_all = eval.to_tensor();

    let t = Instant::now();
    let rec_all = tch::no_grad(|| -> Result<Tensor> {
        let parts = chunks(n, cfg.batch_size)
            .map(|(s, l)| Ok(p.forward(&x_all.narrow(0, s, l), None)?.image))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&parts, 0))
    })?;
    let seconds = t.elapsed().as_secs_f64();

    let (per_mse, per_ssim, per_perc, rec_embed) = tch::no_grad(|| -> Result<_> {
        let mut mse_v = Vec::new();
        let mut ssim_v = Vec::new();
        let mut perc_v = Vec::new();
        let mut emb = Vec::new();
        for (s, l) in chunks(n, cfg.batch_size) {
            let (x, r) = (x_all.narrow(0, s, l), rec_all.narrow(0, s, l));
            mse_v.extend(per_image_mse(&r, &x)?);
            ssim_v.extend(ssim_per_image(&r, &x)?);
            perc_v.extend(perceptual_per_image(attr, &r, &x)?);
            emb.extend(embed_rows(attr, &r)?);
        }
        Ok((mse_v, ssim_v, perc_v, emb))
    })?;
    let psnr: Vec<f64> = per_mse.iter().map(|m| 10.0 * (DATA_RANGE * DATA_RANGE / m.max(1e-12)).log10()).collect();
    let recon = ReconMetrics {
        mse: mean(&per_mse),
        psnr: mean(&psnr),
        ssim: mean(&per_ssim),
        perc_dist: mean(&per_perc),
        toy_fid: toy_fid(&rec_embed, real_embed)?,
        per_image_mse: per_mse.clone(),
    };
    let rec_batch = ImageBatch::from_tensor(&rec_all)?;
    let rec_measured = measure_batch(&rec_batch);

    let g_n = cfg.grid_images.min(n) as i64;
    let mut grid_rows = vec![
        ImageBatch::from_tensor(&x_all.narrow(0, 0, g_n))?,
        ImageBatch::from_tensor(&rec_all.narrow(0, 0, g_n))?,
    ];
    let mut edits = BTreeMap::new();
    for (direction, sign) in &cfg.edits {
        if bank.get(direction).is_none() {
            log::warn!("direction `{direction}` missing from the bank; skipped");
            continue;
        }
        let spec = edit_spec(bank, direction, *sign, cfg.beta)?;
        let edited = tch::no_grad(|| -> Result<Tensor> {
            let parts = chunks(n, cfg.batch_size)
                .map(|(s, l)| Ok(p.forward(&x_all.narrow(0, s, l), Some(&spec))?.image))
                .collect::<Result<Vec<_>>>()?;
            Ok(Tensor::cat(&parts, 0))
        })?;
        grid_rows.push(ImageBatch::from_tensor(&edited.narrow(0, 0, g_n))?);
        let edited_batch = ImageBatch::from_tensor(&edited)?;
        let edited_measured = measure_batch(&edited_batch);
        let floor = noise_floor(eval_measured, &rec_measured, direction);
        let validity = edit_validity(eval_measured, &edited_measured, direction, *sign, floor)?;
        let bg: Vec<f64> = (0..n)
            .filter_map(|i| bg_preservation(eval, &edited_batch, i, &eval_measured[i]))
            .collect();

        // Edited images the oracle places on the requested side of the
        // threshold, against real images on that side.
        let threshold = attribute_threshold(direction);
        let side = |m: &Measurement| {
            m.attributes()
                .and_then(|a| attribute_value(a, direction))
                .is_some_and(|v| (v - threshold) * sign > 0.0)
        };
        let edited_embed = tch::no_grad(|| embed_rows(attr, &edited))?;
        let pick = |measured: &[Measurement], emb: &[Vec<f64>]| -> Vec<Vec<f64>> {
            measured.iter().zip(emb).filter(|(m, _)| side(m)).map(|(_, e)| e.clone()).collect()
        };
        let toy_fid_edit = toy_fid(&pick(&edited_measured, &edited_embed), &pick(eval_measured, real_embed)).ok();

        edits.insert(
            edit_key(direction, *sign),
            EditMetrics {
                direction: direction.clone(),
                sign: *sign,
                beta: cfg.beta,
                validity_rate: validity.rate,
                noise_floor: floor,
                counted: validity.counted,
                unmeasurable: validity.unmeasurable,
                bg_preservation: mean(&bg),
                bg_counted: bg.len(),
                toy_fid_edit,
            },
        );
    }

    let cycle = if with_residual {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.eval_seed ^ 0xc1c1e);
        let (mut rec_rms, mut cyc_rms) = (Vec::new(), Vec::new());
        tch::no_grad(|| -> Result<()> {
            for (s, l) in chunks(n, cfg.batch_size) {
                let (a, b) = cycle_batch(&p, &x_all.narrow(0, s, l), &mut rng)?;
                rec_rms.extend(a);
                cyc_rms.extend(b);
            }
            Ok(())
        })?;
        let (r, c) = (mean(&rec_rms), mean(&cyc_rms));
        Some(CycleMetrics {
            recon_rms: r,
            cycle_rms: c,
            ratio: c / r,
        })
    } else {
        None
    };

    let per_image = (0..n).map(|i| [per_mse[i], psnr[i], per_ssim[i], per_perc[i]]).collect();
    Ok(Evaluated {
        report: VariantReport {
            checkpoint: src.checkpoint.clone(),
            samples: n,
            recon,
            edits,
            cycle,
            runtime: Runtime {
                seconds,
                images_per_sec: n as f64 / seconds.max(1e-9),
            },
        },
        grid_rows,
        per_image,
    })
}

/// Evaluates every source on the held-out set and writes `report.json`,
/// one comparison grid per variant (input, reconstruction, one row per
/// edit), a cross-variant grid per edit and optionally `per_image.csv`
/// into `out_dir`. Sources whose checkpoint is missing or unusable are
/// reported as absent.
pub fn run_protocol(
    sources: &[VariantSource],
    bank: &DirectionBank,
    cfg: &ProtocolConfig,
    out_dir: &Path,
) -> Result<MetricReport> {
    std::fs::create_dir_all(out_dir)?;
    let resolution = sources
        .iter()
        .find_map(|s| {
            let b = CheckpointBundle::load(&s.checkpoint).ok()?;
            Some(Models::from_bundle(&b).ok()?.config.resolution())
        })
        .ok_or_else(|| Error::Config("no loadable checkpoint among the requested variants".into()))?;
    let eval = eval_set(cfg, resolution)?;
    let eval_measured = measure_batch(&eval);

    let mut variants = BTreeMap::new();
    let mut real_embed: Option<Vec<Vec<f64>>> = None;
    let mut grids: Vec<(String, Vec<ImageBatch>)> = Vec::new();
    let mut csv_rows: Vec<(String, Vec<[f64; 4]>)> = Vec::new();
    for src in sources {
        if real_embed.is_none() {
            if let Ok(m) = CheckpointBundle::load(&src.checkpoint).and_then(|b| Models::from_bundle(&b)) {
                if let Ok(attr) = m.attr_net() {
                    let x = eval.to_tensor();
                    real_embed = Some(tch::no_grad(|| -> Result<Vec<Vec<f64>>> {
                        let mut out = Vec::new();
                        for (s, l) in chunks(eval.batch(), cfg.batch_size) {
                            out.extend(embed_rows(attr, &x.narrow(0, s, l))?);
                        }
                        Ok(out)
                    })?);
                }
            }
        }
        let entry = match real_embed
            .as_deref()
            .ok_or_else(|| Error::Config("no attribute network available".into()))
            .and_then(|re| evaluate_variant(src, bank, cfg, &eval, &eval_measured, re))
        {
            Ok(ev) => {
                save_grid(&ev.grid_rows.iter().collect::<Vec<_>>(), out_dir.join(format!("grid_{}.png", src.name)))?;
                grids.push((src.name.clone(), ev.grid_rows));
                csv_rows.push((src.name.clone(), ev.per_image));
                VariantEntry::Ok(Box::new(ev.report))
            }
            Err(e) => {
                log::warn!("variant {} absent: {e}", src.name);
                VariantEntry::Absent { reason: e.to_string() }
            }
        };
        variants.insert(src.name.clone(), entry);
    }

    // Rows: input, then each evaluated variant's result of the same edit.
    if let Some((_, first)) = grids.first() {
        for (k, (direction, sign)) in cfg.edits.iter().enumerate() {
            let row = k + 2;
            if grids.iter().any(|(_, g)| g.len() <= row) {
                continue;
            }
            let mut rows = vec![&first[0]];
            rows.extend(grids.iter().map(|(_, g)| &g[row]));
            save_grid(&rows, out_dir.join(format!("compare_{}.png", edit_key(direction, *sign))))?;
        }
    }
    if cfg.write_csv {
        let mut f = std::io::BufWriter::new(std::fs::File::create(out_dir.join("per_image.csv"))?);
        writeln!(f, "variant,image,mse,psnr,ssim,perc_dist")?;
        for (name, rows) in &csv_rows {
            for (i, r) in rows.iter().enumerate() {
                writeln!(f, "{name},{i},{},{},{},{}", r[0], r[1], r[2], r[3])?;
            }
        }
        f.flush()?;
    }

    let report = MetricReport {
        version: REPORT_VERSION,
        eval_images: eval.batch(),
        eval_seed: cfg.eval_seed,
        variants,
    };
    std::fs::write(out_dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tch::Device;

    fn rand_img(b: i64, r: i64, seed: i64) -> Tensor {
        tch::manual_seed(seed);
        Tensor::rand([b, 3, r, r], (Kind::Float, Device::Cpu)) * 2 - 1
    }

    #[test]
    fn ssim_identity_and_ordering() {
        let x = rand_img(2, 16, 0);
        assert_eq!(ssim(&x, &x).unwrap(), 1.0);
        assert!(ssim(&x, &(-&x)).unwrap() < 1.0);
        let mut last = f64::NEG_INFINITY;
        for eps in [0.2, 0.1, 0.05] {
            let noise = rand_img(2, 16, 1) * eps;
            let v = ssim(&x, &(&x + noise)).unwrap();
            assert!(v > last && v < 1.0);
            last = v;
        }
        assert!(ssim(&rand_img(1, 8, 0), &rand_img(1, 8, 1)).is_err());
    }

    #[test]
    fn quantile_interpolates() {
        assert_eq!(quantile(&[3.0, 1.0, 2.0], 0.5), Some(2.0));
        assert_eq!(quantile(&[0.0, 10.0], 0.95), Some(9.5));
        assert_eq!(quantile(&[], 0.5), None);
    }

    #[test]
    fn frechet_of_identical_sets_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s: Vec<Vec<f64>> = (0..200).map(|_| (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        assert!(toy_fid(&s, &s).unwrap() < 1e-6);
        assert!(matches!(toy_fid(&s[..3], &s), Err(Error::TooFewSamples { min: 5, .. })));
    }

    #[test]
    fn hue_delta_wraps() {
        assert!((attribute_delta("hue", 0.95, 0.05) - 0.1).abs() < 1e-12);
        assert!((attribute_delta("hue", 0.05, 0.95) + 0.1).abs() < 1e-12);
        assert_eq!(attribute_delta("size", 0.2, 0.3), 0.3 - 0.2);
    }
}
