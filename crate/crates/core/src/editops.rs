//! Latent edits: random-target interpolation used to simulate edits during
//! training, its exact inverse for the cycle path, direction edits at
//! inference, and discovery of edit directions in w space.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tch::Tensor;

use crate::error::{Error, Result};
use crate::shapesdata::{measure_batch, ImageBatch};
use crate::stylegen::{Generator, NoiseMode};

/// Paper-default range of the simulated edit strength on the cycle path.
pub const ALPHA_RANGE: (f64, f64) = (4.0, 5.0);
/// Default magnitude for direction edits.
pub const DEFAULT_BETA: f64 = 3.0;

fn check_same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.size() != b.size() {
        return Err(Error::Shape(format!("latent shapes differ: {:?} vs {:?}", a.size(), b.size())));
    }
    Ok(())
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !alpha.is_finite() || alpha < 0.0 {
        return Err(Error::InvalidEdit(format!("alpha must be finite and >= 0, got {alpha}")));
    }
    Ok(())
}

/// `W + α (W_r − W) / 10`, evaluated as `(1 − α/10) W + (α/10) W_r` so both
/// endpoints are reproduced exactly.
pub fn interp_edit(wplus: &Tensor, w_r: &Tensor, alpha: f64) -> Result<Tensor> {
    check_same_shape(wplus, w_r)?;
    check_alpha(alpha)?;
    let t = alpha / 10.0;
    Ok(wplus * (1.0 - t) + w_r * t)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReverseMode {
    /// Solve the interpolation for W exactly.
    #[default]
    Exact,
    /// Take the same step away from `W_r` again.
    Subtract,
}

/// Reverses [`interp_edit`] on a (re-encoded) edited latent.
pub fn invert_edit(w_alpha: &Tensor, w_r: &Tensor, alpha: f64, mode: ReverseMode) -> Result<Tensor> {
    check_same_shape(w_alpha, w_r)?;
    check_alpha(alpha)?;
    let t = alpha / 10.0;
    match mode {
        ReverseMode::Exact => {
            if (1.0 - t).abs() < 1e-12 {
                return Err(Error::SingularEdit);
            }
            Ok((w_alpha - w_r * t) / (1.0 - t))
        }
        ReverseMode::Subtract => Ok(w_alpha - (w_r - w_alpha) * t),
    }
}

/// Draws the edit strength: 0 with probability `1 − p_edit`, otherwise
/// uniform on the open interval `range`.
pub fn sample_alpha_with(rng: &mut ChaCha8Rng, p_edit: f64, range: (f64, f64)) -> f64 {
    if !rng.gen_bool(p_edit.clamp(0.0, 1.0)) {
        return 0.0;
    }
    loop {
        let a = rng.gen_range(range.0..range.1);
        if a > range.0 {
            return a;
        }
    }
}

/// 0 or U(4, 5) with equal probability.
pub fn sample_alpha(rng: &mut ChaCha8Rng) -> f64 {
    sample_alpha_with(rng, 0.5, ALPHA_RANGE)
}

#[derive(Debug)]
pub enum EditKind {
    Direction { direction: Vec<f32>, beta: f64 },
    Interpolate { target: Tensor, alpha: f64 },
}

/// A latent edit: either a unit direction scaled by β, or an interpolation
/// towards a target code; optionally restricted to a subset of style rows.
#[derive(Debug)]
pub struct EditSpec {
    pub kind: EditKind,
    pub layers: Option<Vec<usize>>,
}

impl EditSpec {
    pub fn direction(direction: Vec<f32>, beta: f64) -> Result<Self> {
        let spec = Self {
            kind: EditKind::Direction { direction, beta },
            layers: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn interpolate(target: Tensor, alpha: f64) -> Result<Self> {
        let spec = Self {
            kind: EditKind::Interpolate { target, alpha },
            layers: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_layers(mut self, layers: Option<Vec<usize>>) -> Self {
        self.layers = layers;
        self
    }

    pub fn validate(&self) -> Result<()> {
        match &self.kind {
            EditKind::Direction { direction, beta } => {
                if !beta.is_finite() {
                    return Err(Error::InvalidEdit("beta must be finite".into()));
                }
                let norm = direction.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
                if (norm - 1.0).abs() > 1e-4 {
                    return Err(Error::InvalidEdit(format!("direction must be unit norm, got {norm}")));
                }
                Ok(())
            }
            EditKind::Interpolate { alpha, .. } => check_alpha(*alpha),
        }
    }
}

/// Parses a style-row list such as `0-3,7`.
pub fn parse_layer_spec(spec: &str, num_layers: usize) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let bad = || Error::InvalidEdit(format!("bad layer range `{part}`"));
        let (lo, hi) = match part.split_once('-') {
            Some((a, b)) => (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?),
            None => {
                let v: usize = part.parse().map_err(|_| bad())?;
                (v, v)
            }
        };
        if lo > hi || hi >= num_layers {
            return Err(bad());
        }
        out.extend(lo..=hi);
    }
    out.sort_unstable();
    out.dedup();
    if out.is_empty() {
        return Err(Error::InvalidEdit("empty layer selection".into()));
    }
    Ok(out)
}

fn row_mask(layers: &Option<Vec<usize>>, num_layers: usize, like: &Tensor) -> Result<Tensor> {
    let mut mask = vec![1f32; num_layers];
    if let Some(sel) = layers {
        if let Some(&bad) = sel.iter().find(|&&l| l >= num_layers) {
            return Err(Error::InvalidEdit(format!("layer {bad} out of range (L = {num_layers})")));
        }
        mask.iter_mut().for_each(|m| *m = 0.0);
        for &l in sel {
            mask[l] = 1.0;
        }
    }
    Ok(Tensor::from_slice(&mask).to_kind(like.kind()).view([1, num_layers as i64, 1]))
}

/// Applies an edit to a B×L×d_w code.
pub fn apply_edit(wplus: &Tensor, spec: &EditSpec) -> Result<Tensor> {
    spec.validate()?;
    let s = wplus.size();
    if s.len() != 3 {
        return Err(Error::Shape(format!("W+ must be BxLxD, got {s:?}")));
    }
    let num_layers = s[1] as usize;
    match &spec.kind {
        EditKind::Direction { direction, beta } => {
            if direction.len() as i64 != s[2] {
                return Err(Error::Shape(format!(
                    "direction has {} entries, latent width is {}",
                    direction.len(),
                    s[2]
                )));
            }
            if *beta == 0.0 {
                return Ok(wplus.shallow_clone());
            }
            let dir = Tensor::from_slice(direction).to_kind(wplus.kind()).view([1, 1, s[2]]);
            let mask = row_mask(&spec.layers, num_layers, wplus)?;
            Ok(wplus + mask * dir * *beta)
        }
        EditKind::Interpolate { target, alpha } => {
            let edited = interp_edit(wplus, target, *alpha)?;
            match &spec.layers {
                None => Ok(edited),
                Some(_) => {
                    let mask = row_mask(&spec.layers, num_layers, wplus)?;
                    Ok(&mask * edited + (1.0 - &mask) * wplus)
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionEntry {
    pub vector: Vec<f32>,
    pub method: String,
    pub score: f64,
}

/// Named unit-norm edit directions.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DirectionBank {
    entries: BTreeMap<String, DirectionEntry>,
}

impl DirectionBank {
    pub fn insert(&mut self, name: &str, vector: &[f64], method: &str, score: f64) -> Result<()> {
        let norm = vector.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(Error::InvalidEdit(format!("direction `{name}` has zero or non-finite norm")));
        }
        let entry = DirectionEntry {
            vector: vector.iter().map(|v| (v / norm) as f32).collect(),
            method: method.to_string(),
            score,
        };
        self.entries.insert(name.to_string(), entry);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&DirectionEntry> {
        self.entries.get(name)
    }

    /// Entries ordered by name.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &DirectionEntry)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let bank: DirectionBank = serde_json::from_str(s)?;
        for (name, e) in &bank.entries {
            let norm = e.vector.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-4 {
                return Err(Error::InvalidEdit(format!("direction `{name}` is not unit norm ({norm})")));
            }
        }
        Ok(bank)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Clone, Debug)]
pub struct SupervisedDirection {
    pub direction: Vec<f64>,
    pub train_accuracy: f64,
    pub validation_accuracy: f64,
}

/// Default L2 penalty of the boundary fit.
pub const LOGISTIC_L2: f64 = 1e-2;

fn to_matrix(latents: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let d = latents.first().map(Vec::len).ok_or(Error::TooFewSamples { got: 0, min: 1 })?;
    if latents.iter().any(|l| l.len() != d) {
        return Err(Error::Shape("latent vectors have different lengths".into()));
    }
    Ok(DMatrix::from_fn(latents.len(), d, |i, j| latents[i][j]))
}

/// Fits an L2-regularized logistic regression (Newton iterations with
/// backtracking) and returns (weights, bias).
fn fit_logistic(x: &DMatrix<f64>, y: &[f64], l2: f64) -> (DVector<f64>, f64) {
    let (n, d) = x.shape();
    // Augment with a bias column; the bias is not penalized.
    let xa = DMatrix::from_fn(n, d + 1, |i, j| if j < d { x[(i, j)] } else { 1.0 });
    let mut penalty = DVector::from_element(d + 1, l2);
    penalty[d] = 0.0;
    let objective = |theta: &DVector<f64>| -> f64 {
        let z = &xa * theta;
        let nll: f64 = z
            .iter()
            .zip(y)
            .map(|(&zi, &yi)| softplus(zi) - yi * zi)
            .sum();
        nll + 0.5 * theta.iter().zip(penalty.iter()).map(|(t, p)| p * t * t).sum::<f64>()
    };
    let mut theta = DVector::zeros(d + 1);
    let mut f = objective(&theta);
    for _ in 0..200 {
        let z = &xa * &theta;
        let p: Vec<f64> = z.iter().map(|&zi| sigmoid(zi)).collect();
        let mut grad = xa.transpose() * DVector::from_iterator(n, p.iter().zip(y).map(|(pi, yi)| pi - yi));
        grad += penalty.component_mul(&theta);
        let weights = DVector::from_iterator(n, p.iter().map(|pi| (pi * (1.0 - pi)).max(1e-12)));
        let mut hess = xa.transpose() * DMatrix::from_fn(n, d + 1, |i, j| xa[(i, j)] * weights[i]);
        for k in 0..=d {
            hess[(k, k)] += penalty[k] + 1e-9;
        }
        let step = match hess.cholesky() {
            Some(ch) => ch.solve(&grad),
            None => grad.clone(),
        };
        let mut t = 1.0;
        let mut improved = false;
        while t > 1e-8 {
            let candidate = &theta - &step * t;
            let fc = objective(&candidate);
            if fc <= f {
                theta = candidate;
                improved = f - fc > 1e-12 * f.abs().max(1.0);
                f = fc;
                break;
            }
            t *= 0.5;
        }
        if !improved || step.norm() * t < 1e-10 {
            break;
        }
    }
    let w = theta.rows(0, d).into_owned();
    (w, theta[d])
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z
    } else {
        z.exp().ln_1p()
    }
}

fn accuracy(x: &DMatrix<f64>, y: &[f64], w: &DVector<f64>, b: f64) -> f64 {
    if y.is_empty() {
        return f64::NAN;
    }
    let z = x * w;
    let correct = z
        .iter()
        .zip(y)
        .filter(|(&zi, &yi)| (zi + b > 0.0) == (yi > 0.5))
        .count();
    correct as f64 / y.len() as f64
}

/// Linear attribute boundary normal (logistic regression). Every fifth sample
/// is held out to score the boundary.
pub fn discover_supervised(latents: &[Vec<f64>], labels: &[bool]) -> Result<SupervisedDirection> {
    if latents.len() != labels.len() {
        return Err(Error::Shape("latents and labels differ in length".into()));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 || positives == labels.len() {
        return Err(Error::DegenerateLabels);
    }
    let holdout = |i: usize| latents.len() >= 10 && i % 5 == 4;
    let split = |keep: bool| -> (Vec<Vec<f64>>, Vec<f64>) {
        latents
            .iter()
            .zip(labels)
            .enumerate()
            .filter(|(i, _)| holdout(*i) != keep)
            .map(|(_, (l, &y))| (l.clone(), if y { 1.0 } else { 0.0 }))
            .unzip()
    };
    let (train_x, train_y) = split(true);
    let (val_x, val_y) = split(false);
    if !train_y.iter().any(|&y| y > 0.5) || !train_y.iter().any(|&y| y < 0.5) {
        return Err(Error::DegenerateLabels);
    }
    let xt = to_matrix(&train_x)?;
    let (w, b) = fit_logistic(&xt, &train_y, LOGISTIC_L2);
    let train_accuracy = accuracy(&xt, &train_y, &w, b);
    let validation_accuracy = if val_x.is_empty() {
        train_accuracy
    } else {
        accuracy(&to_matrix(&val_x)?, &val_y, &w, b)
    };
    let norm = w.norm();
    if !(norm.is_finite() && norm > 0.0) {
        return Err(Error::DegenerateLabels);
    }
    Ok(SupervisedDirection {
        direction: w.iter().map(|v| v / norm).collect(),
        train_accuracy,
        validation_accuracy,
    })
}

#[derive(Clone, Debug)]
pub struct PcaDirections {
    /// Unit components in descending eigenvalue order.
    pub components: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    pub mean: Vec<f64>,
    /// Set when fewer than `d` components had non-negligible variance.
    pub rank_deficient: bool,
}

/// Principal directions of single-w samples.
pub fn discover_pca(latents: &[Vec<f64>]) -> Result<PcaDirections> {
    let x = to_matrix(latents)?;
    let (n, d) = x.shape();
    if n < d {
        return Err(Error::TooFewSamples { got: n, min: d });
    }
    let mean = x.row_mean();
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0).max(1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let mut components = Vec::new();
    let mut eigenvalues = Vec::new();
    for &k in &order {
        let lambda = eig.eigenvalues[k];
        if lambda <= 1e-10 * top.max(f64::MIN_POSITIVE) {
            continue;
        }
        let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().cloned().collect();
        let pivot = v.iter().cloned().fold(0.0f64, |m, e| if e.abs() > m.abs() { e } else { m });
        if pivot < 0.0 {
            v.iter_mut().for_each(|e| *e = -*e);
        }
        components.push(v);
        eigenvalues.push(lambda);
    }
    Ok(PcaDirections {
        rank_deficient: components.len() < d,
        components,
        eigenvalues,
        mean: mean.iter().cloned().collect(),
    })
}

/// Image attributes that have a supervised direction.
pub const ATTRIBUTE_DIRECTIONS: [&str; 3] = ["size", "pos_x", "pos_y"];

/// Threshold separating the two classes used to fit a direction.
pub fn attribute_threshold(name: &str) -> f64 {
    match name {
        "size" => 0.30,
        _ => 0.5,
    }
}

/// Generates `n` images from sampled latents, labels them with the
/// attribute oracle and fits one boundary per attribute plus the leading
/// principal directions.
pub fn discover_attribute_directions(
    generator: &Generator,
    n: usize,
    rng: &mut ChaCha8Rng,
    pca_components: usize,
) -> Result<DirectionBank> {
    let mut latents: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut measured = Vec::with_capacity(n);
    let chunk = 100;
    let mut done = 0;
    while done < n {
        let b = chunk.min(n - done);
        let (w, img) = tch::no_grad(|| -> Result<_> {
            let w = generator.map(&generator.sample_z(rng, b));
            let img = generator.synthesize(&generator.replicate(&w), &mut NoiseMode::Zero)?;
            Ok((w, img))
        })?;
        let flat = Vec::<f32>::try_from(&w.contiguous().view([-1]))?;
        let d = generator.config().w_dim;
        latents.extend(flat.chunks(d).map(|c| c.iter().map(|&v| v as f64).collect::<Vec<_>>()));
        measured.extend(measure_batch(&ImageBatch::from_tensor(&img)?));
        done += b;
    }

    let mut bank = DirectionBank::default();
    for name in ATTRIBUTE_DIRECTIONS {
        let threshold = attribute_threshold(name);
        let (xs, ys): (Vec<Vec<f64>>, Vec<bool>) = latents
            .iter()
            .zip(&measured)
            .filter_map(|(l, m)| {
                let a = m.attributes()?;
                let v = match name {
                    "size" => a.size,
                    "pos_x" => a.pos_x,
                    _ => a.pos_y,
                }?;
                Some((l.clone(), v > threshold))
            })
            .unzip();
        match discover_supervised(&xs, &ys) {
            Ok(dir) => bank.insert(name, &dir.direction, "supervised", dir.validation_accuracy)?,
            Err(e) => log::warn!("no direction for {name}: {e}"),
        }
    }
    if pca_components > 0 {
        let pca = discover_pca(&latents)?;
        let total: f64 = pca.eigenvalues.iter().sum();
        for (k, (v, lambda)) in pca.components.iter().zip(&pca.eigenvalues).take(pca_components).enumerate() {
            bank.insert(&format!("pc{k}"), v, "pca", lambda / total)?;
        }
    }
    Ok(bank)
}
