//! Training stages: the frozen attribute network (`classifier`), the toy GAN
//! (`gan`), the base W+ encoder (`e0`), and the residual encoders
//! (`styleres`) with the no-edit and cycle-translation paths.
//!
//! Every random choice of a run (batch indices, path selection, z, α) comes
//! from one ChaCha stream seeded by the config, and that stream's position is
//! checkpointed, so a run is a deterministic function of (config, seed) and
//! resuming from a checkpoint continues the same trajectory.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tch::{Kind, Tensor};

use crate::attrnet::{class_accuracy, head_loss, head_targets, AttrNet};
use crate::checkpoint::{json_hash, CheckpointBundle};
use crate::editops::{interp_edit, invert_edit, sample_alpha_with, ReverseMode, ALPHA_RANGE};
use crate::encoders::{BaseEncoder, EncoderVariant, Pipeline, ResidualModules};
use crate::error::{Error, Result};
use crate::losses::{
    adv_loss, feat_reg, full_objective, rec_identity, rec_l2, rec_perceptual, write_loss_records, LossTerms,
    LossWeights, NormConvention, PERCEPTUAL_LAYERS,
};
use crate::models::{ModelConfig, Models, NetRefs, RngState};
use crate::optim::{lr_at, scaled_milestones, Adam};
use crate::shapesdata::{render, sample_attributes, sample_dataset, save_grid, ImageBatch};
use crate::stylegen::{Discriminator, Generator, NoiseMode};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Classifier,
    #[default]
    Gan,
    E0,
    Styleres,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Classifier => "classifier",
            Stage::Gan => "gan",
            Stage::E0 => "e0",
            Stage::Styleres => "styleres",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classifier" => Ok(Stage::Classifier),
            "gan" => Ok(Stage::Gan),
            "e0" => Ok(Stage::E0),
            "styleres" => Ok(Stage::Styleres),
            other => Err(Error::Config(format!("unknown stage `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub seed: u64,
    pub batch_size: usize,
    pub iterations: u64,
    pub lr: f64,
    /// LR-halving iterations; `None` rescales the reference milestones.
    pub milestones: Option<Vec<u64>>,
    pub betas: (f64, f64),
    /// Probability of taking the cycle-translation path.
    pub p_edit: f64,
    pub alpha_range: (f64, f64),
    pub weights_no_edit: LossWeights,
    pub weights_cycle: LossWeights,
    pub feat_norm: NormConvention,
    pub r1_gamma: f64,
    /// R1 is evaluated every this many iterations (scaled accordingly).
    pub r1_interval: u64,
    pub adv_on_xpp: bool,
    pub reverse_mode: ReverseMode,
    pub variant: EncoderVariant,
    /// Size and seed of the rendered training split.
    pub train_images: usize,
    pub data_seed: u64,
    /// Train on the first `batch_size` images only (overfit runs).
    pub fixed_batch: bool,
    /// Generator weight averaging during the GAN stage.
    pub ema_beta: f64,
    pub mapping_lr_scale: f64,
    pub checkpoint_interval: u64,
    pub sample_interval: u64,
    pub log_interval: u64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Gan,
            seed: 0,
            batch_size: 16,
            iterations: 1000,
            lr: 1e-4,
            milestones: None,
            betas: (0.9, 0.999),
            p_edit: 0.5,
            alpha_range: ALPHA_RANGE,
            weights_no_edit: LossWeights::no_edit(),
            weights_cycle: LossWeights::cycle(),
            feat_norm: NormConvention::PerElementMean,
            r1_gamma: 1.0,
            r1_interval: 4,
            adv_on_xpp: false,
            reverse_mode: ReverseMode::Exact,
            variant: EncoderVariant::Full,
            train_images: 4000,
            data_seed: 1,
            fixed_batch: false,
            ema_beta: 0.999,
            mapping_lr_scale: 0.01,
            checkpoint_interval: 0,
            sample_interval: 0,
            log_interval: 10,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.p_edit) {
            return Err(Error::validation("p_edit", "must lie in [0, 1]"));
        }
        let (lo, hi) = self.alpha_range;
        if !(lo.is_finite() && hi.is_finite() && 0.0 < lo && lo < hi && hi < 10.0) {
            return Err(Error::validation("alpha_range", "need 0 < lo < hi < 10"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::validation("lr", "must be positive"));
        }
        let ms = self.milestone_list();
        if ms.windows(2).any(|w| w[0] >= w[1]) || ms.iter().any(|&m| m >= self.iterations) {
            return Err(Error::validation(
                "milestones",
                "must be strictly increasing and below the iteration count",
            ));
        }
        self.weights_no_edit.validate()?;
        self.weights_cycle.validate()?;
        if self.fixed_batch && self.train_images < self.batch_size {
            return Err(Error::validation("train_images", "fixed-batch runs need at least one batch"));
        }
        Ok(())
    }

    pub fn milestone_list(&self) -> Vec<u64> {
        self.milestones.clone().unwrap_or_else(|| scaled_milestones(self.iterations))
    }

    pub fn hash(&self) -> Result<String> {
        json_hash(self)
    }
}

/// Iteration counter, optimizer moments (held by the stage), RNG position
/// and best held-out metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub iteration: u64,
    pub rng: RngState,
    pub best_metric: Option<f64>,
}

/// Which path a styleres iteration took.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathKind {
    NoEdit,
    Cycle,
}

impl PathKind {
    pub fn name(self) -> &'static str {
        match self {
            PathKind::NoEdit => "no_edit",
            PathKind::Cycle => "cycle",
        }
    }
}

/// Rendered training split held as one tensor.
pub struct TrainingData {
    pub images: Tensor,
    pub len: usize,
}

impl TrainingData {
    pub fn render(seed: u64, n: usize, resolution: usize) -> Result<Self> {
        let items = sample_dataset(seed, n, resolution)?;
        let batch = ImageBatch::concat(&items.into_iter().map(|(img, _)| img).collect::<Vec<_>>())?;
        Ok(Self {
            images: batch.to_tensor(),
            len: n,
        })
    }

    pub fn batch(&self, rng: &mut ChaCha8Rng, b: usize, fixed: bool) -> Tensor {
        let idx: Vec<i64> = if fixed {
            (0..b as i64).collect()
        } else {
            (0..b).map(|_| rng.gen_range(0..self.len) as i64).collect()
        };
        self.images.index_select(0, &Tensor::from_slice(&idx))
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(f64::try_from(t.detach().to_kind(Kind::Double))?)
}

fn check_finite(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(name.to_string()))
    }
}

/// R1 penalty γ/2 · E‖∇_x D(x)‖², with exact double backward.
pub fn r1_penalty(d: &Discriminator, real: &Tensor, gamma: f64) -> Result<(Tensor, Tensor)> {
    let x = real.detach().set_requires_grad(true);
    let logits = d.forward(&x)?;
    let grad = Tensor::run_backward(&[logits.sum(Kind::Float)], &[&x], true, true);
    let b = real.size()[0] as f64;
    let pen = grad[0].square().sum(Kind::Float) / b * (gamma / 2.0);
    Ok((logits, pen))
}

/// Shared plumbing of all stages: output directory, loss log, RNG, state.
struct Run<'a> {
    cfg: &'a TrainConfig,
    out_dir: PathBuf,
    log: BufWriter<File>,
    rng: ChaCha8Rng,
    iteration: u64,
    best: Option<f64>,
}

impl<'a> Run<'a> {
    fn new(cfg: &'a TrainConfig, out_dir: &Path, resume: Option<&CheckpointBundle>) -> Result<Self> {
        std::fs::create_dir_all(out_dir)?;
        let (rng, iteration, best) = match resume {
            Some(b) => {
                let state: TrainState = serde_json::from_value(
                    b.metadata
                        .get("state")
                        .cloned()
                        .ok_or_else(|| Error::Integrity("checkpoint has no training state".into()))?,
                )?;
                let stage = b.metadata.get("stage").and_then(|s| s.as_str()).unwrap_or_default();
                if stage != cfg.stage.name() {
                    return Err(Error::Config(format!(
                        "cannot resume a `{stage}` checkpoint as stage `{}`",
                        cfg.stage.name()
                    )));
                }
                (state.rng.restore()?, state.iteration, state.best_metric)
            }
            None => (ChaCha8Rng::seed_from_u64(cfg.seed), 0, None),
        };
        let log_path = out_dir.join("losses.ndjson");
        let log = BufWriter::new(
            OpenOptions::new()
                .create(true)
                .append(resume.is_some())
                .write(true)
                .truncate(resume.is_none())
                .open(log_path)?,
        );
        Ok(Self {
            cfg,
            out_dir: out_dir.to_path_buf(),
            log,
            rng,
            iteration,
            best,
        })
    }

    fn lr(&self) -> f64 {
        lr_at(self.cfg.lr, &self.cfg.milestone_list(), self.iteration)
    }

    fn should(&self, interval: u64) -> bool {
        interval > 0 && self.iteration % interval == 0
    }

    fn log(&mut self, path: &str, values: &BTreeMap<String, f64>) -> Result<()> {
        if self.cfg.log_interval > 0 && (self.iteration % self.cfg.log_interval == 0 || self.iteration + 1 == self.cfg.iterations) {
            write_loss_records(&mut self.log, self.iteration, path, values)?;
        }
        Ok(())
    }

    fn metadata(&self) -> Result<serde_json::Value> {
        let state = TrainState {
            iteration: self.iteration,
            rng: RngState::capture(&self.rng),
            best_metric: self.best,
        };
        Ok(json!({
            "stage": self.cfg.stage.name(),
            "iteration": self.iteration,
            "config_hash": self.cfg.hash()?,
            "config": self.cfg,
            "state": state,
        }))
    }

    fn checkpoint(&mut self, bundle: &CheckpointBundle, final_: bool) -> Result<()> {
        self.log.flush()?;
        let name = if final_ {
            "final.ckpt".to_string()
        } else {
            format!("ckpt_{:06}.ckpt", self.iteration)
        };
        bundle.save(self.out_dir.join(name))
    }
}

fn prerequisite<T>(net: Option<T>, what: &str, stage: Stage) -> Result<T> {
    net.ok_or_else(|| {
        Error::Config(format!(
            "stage `{}` needs a checkpoint containing the {what}",
            stage.name()
        ))
    })
}

/// Runs one stage. `init` supplies networks from earlier stages; `resume`
/// continues an interrupted run of the same stage. Writes periodic
/// checkpoints, `final.ckpt`, loss logs and sample grids into `out_dir`.
pub fn train(
    cfg: &TrainConfig,
    init: Option<&CheckpointBundle>,
    resume: Option<&CheckpointBundle>,
    out_dir: &Path,
) -> Result<CheckpointBundle> {
    cfg.validate()?;
    let source = resume.or(init);
    let mut models = match source {
        Some(b) => {
            let m = Models::from_bundle(b)?;
            if m.config != cfg.model {
                return Err(Error::Config("model config differs from the checkpoint's".into()));
            }
            m
        }
        None => Models::new(cfg.model.clone())?,
    };
    let mut run = Run::new(cfg, out_dir, resume)?;
    match cfg.stage {
        Stage::Classifier => train_classifier(&mut run, &mut models, resume),
        Stage::Gan => train_gan(&mut run, &mut models, resume),
        Stage::E0 => train_e0(&mut run, &mut models, resume),
        Stage::Styleres => train_styleres(&mut run, &mut models, resume),
    }
}

fn net_seed(cfg: &TrainConfig, k: u64) -> u64 {
    cfg.seed.wrapping_mul(1_000_003).wrapping_add(k)
}

/// Writes a checkpoint of `nets` plus stage-specific extras (optimizer
/// moments) and returns it.
fn save_stage(
    run: &mut Run,
    nets: NetRefs,
    extra: impl FnOnce(&mut CheckpointBundle) -> Result<()>,
    final_: bool,
) -> Result<CheckpointBundle> {
    let mut b = nets.to_bundle(run.metadata()?)?;
    extra(&mut b)?;
    run.checkpoint(&b, final_)?;
    Ok(b)
}

fn periodic(run: &Run) -> bool {
    run.should(run.cfg.checkpoint_interval) && run.iteration < run.cfg.iterations
}

fn sample_due(run: &Run) -> bool {
    run.should(run.cfg.sample_interval) || run.iteration == run.cfg.iterations
}

fn sample_path(run: &Run) -> PathBuf {
    run.out_dir.join(format!("samples_{:06}.png", run.iteration))
}

/// Small held-out split used to track the best reconstruction error.
fn holdout(cfg: &TrainConfig) -> Result<Tensor> {
    Ok(TrainingData::render(cfg.data_seed.wrapping_add(1_000_000), 32, cfg.model.resolution())?.images)
}

fn track_best(run: &mut Run, mse: f64) {
    run.best = Some(run.best.map_or(mse, |b| b.min(mse)));
}

fn train_classifier(run: &mut Run, models: &mut Models, resume: Option<&CheckpointBundle>) -> Result<CheckpointBundle> {
    let cfg = run.cfg;
    let r = cfg.model.resolution();
    if resume.is_none() || models.attr.is_none() {
        models.attr = Some(AttrNet::new(&cfg.model.attrnet, r, net_seed(cfg, 1))?);
    }
    let net = models.attr.as_ref().expect("set above");
    let mut opt = Adam::new(net.var_store(), cfg.lr, cfg.betas);
    if let Some(b) = resume {
        opt.load_from(b, "attr")?;
    }
    while run.iteration < cfg.iterations {
        opt.lr = run.lr();
        let attrs: Vec<_> = (0..cfg.batch_size).map(|_| sample_attributes(&mut run.rng)).collect();
        let imgs = ImageBatch::concat(&attrs.iter().map(|a| render(a, r)).collect::<Result<Vec<_>>>()?)?;
        let (classes, regress) = head_targets(&attrs);
        let out = net.forward(&imgs.to_tensor())?;
        let loss = head_loss(&out.head, &classes, &regress);
        let v = check_finite("classifier", scalar(&loss)?)?;
        opt.zero_grad();
        loss.backward();
        opt.step();
        let acc = class_accuracy(&out.head, &classes);
        run.log("classifier", &[("head".to_string(), v), ("accuracy".to_string(), acc)].into())?;
        run.iteration += 1;
        if periodic(run) {
            save_stage(run, models.refs(), |b| opt.save_into(b, "attr"), false)?;
        }
    }
    save_stage(run, models.refs(), |b| opt.save_into(b, "attr"), true)
}

const GEN_TRAIN: &str = "g_train.";

fn ema_update(ema: &Generator, g: &Generator, beta: f64) {
    let src = g.var_store().variables();
    tch::no_grad(|| {
        for (name, mut dst) in ema.var_store().variables() {
            let s = &src[&name];
            if s.requires_grad() {
                dst.copy_(&(&dst * beta + s * (1.0 - beta)));
            } else {
                dst.copy_(s);
            }
        }
    });
}

/// Iterations before generator averaging kicks in.
const EMA_WARMUP: u64 = 100;

fn train_gan(run: &mut Run, models: &mut Models, resume: Option<&CheckpointBundle>) -> Result<CheckpointBundle> {
    let cfg = run.cfg;
    let gcfg = &cfg.model.generator;
    // The averaged generator is the one stored under `g.`; the raw training
    // copy only matters for resuming.
    let mut ema = match (resume, models.g.take()) {
        (Some(_), Some(g)) => g,
        _ => Generator::new(gcfg, net_seed(cfg, 2))?,
    };
    let mut g = Generator::new(gcfg, net_seed(cfg, 2))?;
    if let Some(b) = resume {
        b.load_var_store(GEN_TRAIN, g.var_store_mut())?;
    }
    ema.var_store_mut().freeze();
    let d = match (resume, models.d.take()) {
        (Some(_), Some(d)) => d,
        _ => Discriminator::new(gcfg, net_seed(cfg, 3))?,
    };
    let data = TrainingData::render(cfg.data_seed, cfg.train_images, gcfg.resolution)?;
    let scale = cfg.mapping_lr_scale;
    let mut og = Adam::new(g.var_store(), cfg.lr, cfg.betas).with_lr_scale(|n| if n.starts_with("mapping") { scale } else { 1.0 });
    let mut od = Adam::new(d.var_store(), cfg.lr, cfg.betas);
    if let Some(b) = resume {
        og.load_from(b, "g")?;
        od.load_from(b, "d")?;
    }
    let b = cfg.batch_size;
    let r1_every = cfg.r1_interval.max(1);

    while run.iteration < cfg.iterations {
        let lr = run.lr();
        og.lr = lr;
        od.lr = lr;
        let real = data.batch(&mut run.rng, b, cfg.fixed_batch);
        let z = g.sample_z(&mut run.rng, b);

        let fake = g.generate(&z, &mut NoiseMode::Zero)?;
        let loss_g = (-d.forward(&fake)?).softplus().mean(Kind::Float);
        let vg = check_finite("loss_g", scalar(&loss_g)?)?;
        og.zero_grad();
        loss_g.backward();
        og.step();

        let fake = fake.detach();
        let with_r1 = cfg.r1_gamma > 0.0 && run.iteration % r1_every == 0;
        let (d_real, r1) = if with_r1 {
            let (logits, pen) = r1_penalty(&d, &real, cfg.r1_gamma * r1_every as f64)?;
            (logits, Some(pen))
        } else {
            (d.forward(&real)?, None)
        };
        let (loss_d, _) = adv_loss(&d_real, &[&d.forward(&fake)?])?;
        let mut values: BTreeMap<String, f64> = [
            ("loss_g".to_string(), vg),
            ("loss_d".to_string(), check_finite("loss_d", scalar(&loss_d)?)?),
        ]
        .into();
        let total = match r1 {
            Some(p) => {
                values.insert("r1".into(), check_finite("r1", scalar(&p)?)?);
                loss_d + p
            }
            None => loss_d,
        };
        od.zero_grad();
        total.backward();
        od.step();

        ema_update(&ema, &g, if run.iteration < EMA_WARMUP { 0.0 } else { cfg.ema_beta });
        run.log("gan", &values)?;
        run.iteration += 1;

        if run.iteration == cfg.iterations {
            // Offset used by the encoders: mean mapped latent of the averaged generator.
            ema.update_w_avg(&mut ChaCha8Rng::seed_from_u64(net_seed(cfg, 4)), 4096);
        }
        if sample_due(run) {
            let z = ema.sample_z(&mut ChaCha8Rng::seed_from_u64(7), 16);
            let samples = tch::no_grad(|| ema.generate(&z, &mut NoiseMode::Zero))?;
            save_grid(&[&ImageBatch::from_tensor(&samples)?], sample_path(run))?;
        }
        if periodic(run) || run.iteration == cfg.iterations {
            let nets = NetRefs {
                config: &cfg.model,
                variant: None,
                attr: models.attr.as_ref(),
                g: Some(&ema),
                d: Some(&d),
                e0: None,
                res: None,
            };
            let extra = |bundle: &mut CheckpointBundle| -> Result<()> {
                bundle.insert_var_store(GEN_TRAIN, g.var_store())?;
                og.save_into(bundle, "g")?;
                od.save_into(bundle, "d")
            };
            let bundle = save_stage(run, nets, extra, run.iteration == cfg.iterations)?;
            if run.iteration == cfg.iterations {
                return Ok(bundle);
            }
        }
    }
    Err(Error::Config("no iterations left to run".into()))
}

/// Reconstruction terms shared by the encoder stages.
fn reconstruction_terms(
    outputs: &[&Tensor],
    target: &Tensor,
    attr: Option<&AttrNet>,
    weights: &LossWeights,
) -> Result<LossTerms> {
    let mut terms = LossTerms {
        rec_l2: Some(rec_l2(outputs, target)?),
        ..Default::default()
    };
    if let Some(a) = attr {
        if weights.lambda_r2 > 0.0 {
            terms.rec_p = Some(rec_perceptual(outputs, target, a, &PERCEPTUAL_LAYERS)?);
        }
        if weights.lambda_r3 > 0.0 {
            terms.rec_id = Some(rec_identity(outputs, target, a)?);
        }
    }
    Ok(terms)
}

fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    scalar(&(a - b).square().mean(Kind::Float))
}

fn train_e0(run: &mut Run, models: &mut Models, resume: Option<&CheckpointBundle>) -> Result<CheckpointBundle> {
    let cfg = run.cfg;
    if let Some(a) = models.attr.as_mut() {
        a.freeze();
    }
    prerequisite(models.g.as_mut(), "generator", Stage::E0)?.var_store_mut().freeze();
    let g = models.g.as_ref().expect("checked above");
    let mut e0 = match (resume, models.e0.take()) {
        (Some(_), Some(e)) => e,
        _ => BaseEncoder::new(&cfg.model.generator, &cfg.model.encoder, net_seed(cfg, 5))?,
    };
    e0.var_store_mut().unfreeze();
    e0.set_w_avg(g.w_avg());
    let mut opt = Adam::new(e0.var_store(), cfg.lr, cfg.betas);
    if let Some(b) = resume {
        opt.load_from(b, "e0")?;
    }
    let data = TrainingData::render(cfg.data_seed, cfg.train_images, cfg.model.resolution())?;
    let held_out = holdout(cfg)?;
    let weights = LossWeights {
        lambda_a: 0.0,
        lambda_f: 0.0,
        ..cfg.weights_no_edit
    };
    let attr = models.attr.as_ref();
    while run.iteration < cfg.iterations {
        opt.lr = run.lr();
        let x = data.batch(&mut run.rng, cfg.batch_size, cfg.fixed_batch);
        let img = g.synthesize(&e0.encode(&x)?.wplus, &mut NoiseMode::Zero)?;
        let terms = reconstruction_terms(&[&img], &x, attr, &weights)?;
        let (total, values) = full_objective(&terms, &weights)?;
        opt.zero_grad();
        total.backward();
        opt.step();
        run.log("e0", &values)?;
        run.iteration += 1;
        if sample_due(run) {
            let rec = tch::no_grad(|| -> Result<Tensor> { g.synthesize(&e0.encode(&held_out)?.wplus, &mut NoiseMode::Zero) })?;
            track_best(run, mse(&rec, &held_out)?);
            let n = 8.min(held_out.size()[0]);
            save_grid(
                &[
                    &ImageBatch::from_tensor(&held_out.narrow(0, 0, n))?,
                    &ImageBatch::from_tensor(&rec.narrow(0, 0, n))?,
                ],
                sample_path(run),
            )?;
        }
        if periodic(run) || run.iteration == cfg.iterations {
            let nets = NetRefs {
                config: &cfg.model,
                variant: None,
                attr,
                g: Some(g),
                d: models.d.as_ref(),
                e0: Some(&e0),
                res: None,
            };
            let bundle = save_stage(run, nets, |b| opt.save_into(b, "e0"), run.iteration == cfg.iterations)?;
            if run.iteration == cfg.iterations {
                return Ok(bundle);
            }
        }
    }
    Err(Error::Config("no iterations left to run".into()))
}

/// Loss values and images of one styleres iteration.
pub struct StepOutput {
    pub path: PathKind,
    pub values: BTreeMap<String, f64>,
    /// x' (no-edit) or x'_i (cycle).
    pub output: Tensor,
    /// x'' on the cycle path.
    pub cycle_output: Option<Tensor>,
    pub alpha: f64,
}

/// Residual-encoder training over frozen G, E0 and attribute net, with a
/// jointly trained discriminator.
pub struct StyleresTrainer<'m> {
    pub cfg: TrainConfig,
    pub g: &'m Generator,
    pub e0: &'m BaseEncoder,
    pub attr: Option<&'m AttrNet>,
    pub res: &'m ResidualModules,
    pub d: &'m Discriminator,
    pub opt_res: Adam,
    pub opt_d: Adam,
    iteration: u64,
}

impl<'m> StyleresTrainer<'m> {
    /// `g`, `e0` and `attr` must already be frozen.
    pub fn new(
        cfg: &TrainConfig,
        g: &'m Generator,
        e0: &'m BaseEncoder,
        attr: Option<&'m AttrNet>,
        res: &'m ResidualModules,
        d: &'m Discriminator,
    ) -> Self {
        Self {
            cfg: cfg.clone(),
            g,
            e0,
            attr,
            res,
            d,
            opt_res: Adam::new(res.var_store(), cfg.lr, cfg.betas),
            opt_d: Adam::new(d.var_store(), cfg.lr, cfg.betas),
            iteration: 0,
        }
    }

    pub fn set_iteration(&mut self, iteration: u64) {
        self.iteration = iteration;
    }

    pub fn pipeline(&self) -> Pipeline<'m> {
        Pipeline::new(self.g, self.e0, Some(self.res))
    }

    fn update_encoders(&mut self, terms: &LossTerms, weights: &LossWeights) -> Result<BTreeMap<String, f64>> {
        let (total, values) = full_objective(terms, weights)?;
        self.opt_res.zero_grad();
        total.backward();
        self.opt_res.step();
        Ok(values)
    }

    fn update_discriminator(&mut self, real: &Tensor, fakes: &[Tensor], values: &mut BTreeMap<String, f64>) -> Result<()> {
        let every = self.cfg.r1_interval.max(1);
        let with_r1 = self.cfg.r1_gamma > 0.0 && self.iteration % every == 0;
        let (d_real, r1) = if with_r1 {
            let (l, p) = r1_penalty(self.d, real, self.cfg.r1_gamma * every as f64)?;
            (l, Some(p))
        } else {
            (self.d.forward(real)?, None)
        };
        let fake_logits = fakes.iter().map(|f| self.d.forward(&f.detach())).collect::<Result<Vec<_>>>()?;
        let (loss_d, _) = adv_loss(&d_real, &fake_logits.iter().collect::<Vec<_>>())?;
        values.insert("d_loss".into(), check_finite("d_loss", scalar(&loss_d)?)?);
        let total = match r1 {
            Some(p) => {
                values.insert("r1".into(), check_finite("r1", scalar(&p)?)?);
                loss_d + p
            }
            None => loss_d,
        };
        self.opt_d.zero_grad();
        total.backward();
        self.opt_d.step();
        Ok(())
    }

    /// Non-saturating encoder-side adversarial term.
    fn adv_e(&self, fakes: &[&Tensor]) -> Result<Tensor> {
        let mut loss: Option<Tensor> = None;
        for f in fakes {
            let l = (-self.d.forward(f)?).softplus().mean(Kind::Float);
            loss = Some(match loss {
                Some(acc) => acc + l,
                None => l,
            });
        }
        loss.ok_or_else(|| Error::validation("fakes", "empty"))
    }

    /// α = 0: reconstruct `x` through the full pipeline.
    pub fn step_no_edit(&mut self, x: &Tensor) -> Result<StepOutput> {
        let p = self.pipeline();
        let enc = tch::no_grad(|| p.encode(x))?;
        let out = p.from_codes(&enc.f0, &enc.wplus, &enc.wplus)?;
        let weights = self.cfg.weights_no_edit;
        let mut terms = reconstruction_terms(&[&out.image], x, self.attr, &weights)?;
        if weights.lambda_a > 0.0 {
            terms.adv = Some(self.adv_e(&[&out.image])?);
        }
        if let Some(f) = &out.residual {
            terms.feat = Some(feat_reg(&[f], self.cfg.feat_norm));
        }
        let mut values = self.update_encoders(&terms, &weights)?;
        let image = out.image.detach();
        self.update_discriminator(x, &[image.shallow_clone()], &mut values)?;
        self.iteration += 1;
        Ok(StepOutput {
            path: PathKind::NoEdit,
            values,
            output: image,
            cycle_output: None,
            alpha: 0.0,
        })
    }

    /// Edit toward a random latent, re-encode, undo the edit and
    /// reconstruct.
    pub fn step_cycle(&mut self, x: &Tensor, rng: &mut ChaCha8Rng) -> Result<StepOutput> {
        let p = self.pipeline();
        let b = x.size()[0] as usize;
        let enc = tch::no_grad(|| p.encode(x))?;
        let w_r = tch::no_grad(|| self.g.replicate(&self.g.map(&self.g.sample_z(rng, b))));
        let alpha = sample_alpha_with(rng, 1.0, self.cfg.alpha_range);
        let w_alpha = interp_edit(&enc.wplus, &w_r, alpha)?;
        let edited = p.from_codes(&enc.f0, &enc.wplus, &w_alpha)?;
        // Gradients flow through the frozen E0 back into the edited image.
        let enc2 = p.encode(&edited.image)?;
        let w_rev = invert_edit(&enc2.wplus, &w_r, alpha, self.cfg.reverse_mode)?;
        let cycled = p.from_codes(&enc2.f0, &enc2.wplus, &w_rev)?;

        let weights = self.cfg.weights_cycle;
        let mut terms = reconstruction_terms(&[&cycled.image], x, self.attr, &weights)?;
        if weights.lambda_r1 == 0.0 {
            // Logged only.
            terms.rec_l2 = terms.rec_l2.map(|t| t.detach());
        }
        if weights.lambda_a > 0.0 {
            let fakes: Vec<&Tensor> = if self.cfg.adv_on_xpp {
                vec![&edited.image, &cycled.image]
            } else {
                vec![&edited.image]
            };
            terms.adv = Some(self.adv_e(&fakes)?);
        }
        let residuals: Vec<&Tensor> = [&edited.residual, &cycled.residual].into_iter().flatten().collect();
        if !residuals.is_empty() {
            terms.feat = Some(feat_reg(&residuals, self.cfg.feat_norm));
        }
        let mut values = self.update_encoders(&terms, &weights)?;
        let mut fakes = vec![edited.image.detach()];
        if self.cfg.adv_on_xpp {
            fakes.push(cycled.image.detach());
        }
        self.update_discriminator(x, &fakes, &mut values)?;
        self.iteration += 1;
        Ok(StepOutput {
            path: PathKind::Cycle,
            values,
            output: edited.image.detach(),
            cycle_output: Some(cycled.image.detach()),
            alpha,
        })
    }

    /// One iteration: the cycle path with probability `p_edit`, otherwise
    /// the no-edit path.
    pub fn step(&mut self, x: &Tensor, rng: &mut ChaCha8Rng, lr: f64) -> Result<StepOutput> {
        self.opt_res.lr = lr;
        self.opt_d.lr = lr;
        if choose_cycle(rng, self.cfg.p_edit) {
            self.step_cycle(x, rng)
        } else {
            self.step_no_edit(x)
        }
    }
}

/// Path selection draw; always consumes one value from the stream.
pub fn choose_cycle(rng: &mut ChaCha8Rng, p_edit: f64) -> bool {
    rng.gen::<f64>() < p_edit
}

fn train_styleres(run: &mut Run, models: &mut Models, resume: Option<&CheckpointBundle>) -> Result<CheckpointBundle> {
    let cfg = run.cfg;
    if let Some(a) = models.attr.as_mut() {
        a.freeze();
    }
    prerequisite(models.g.as_mut(), "generator", Stage::Styleres)?.var_store_mut().freeze();
    prerequisite(models.e0.as_mut(), "base encoder", Stage::Styleres)?.var_store_mut().freeze();
    if models.d.is_none() {
        models.d = Some(Discriminator::new(&cfg.model.generator, net_seed(cfg, 6))?);
    }
    match (resume, models.variant) {
        (Some(_), Some(v)) if v != cfg.variant => {
            return Err(Error::Config("resumed checkpoint was trained with a different variant".into()))
        }
        (Some(_), Some(_)) => {}
        _ => {
            models.res = Some(ResidualModules::new(&cfg.model.generator, &cfg.model.encoder, cfg.variant, net_seed(cfg, 7))?);
            models.variant = Some(cfg.variant);
        }
    }
    let data = TrainingData::render(cfg.data_seed, cfg.train_images, cfg.model.resolution())?;
    let held_out = holdout(cfg)?;

    let mut trainer = StyleresTrainer::new(
        cfg,
        models.generator()?,
        models.base_encoder()?,
        models.attr.as_ref(),
        models.res.as_ref().expect("set above"),
        models.discriminator()?,
    );
    if let Some(b) = resume {
        trainer.opt_res.load_from(b, "res")?;
        trainer.opt_d.load_from(b, "d")?;
    }
    trainer.set_iteration(run.iteration);
    while run.iteration < cfg.iterations {
        let lr = run.lr();
        let x = data.batch(&mut run.rng, cfg.batch_size, cfg.fixed_batch);
        let out = trainer.step(&x, &mut run.rng, lr)?;
        run.log(out.path.name(), &out.values)?;
        run.iteration += 1;
        if sample_due(run) {
            let m = write_styleres_samples(&trainer, &held_out, &sample_path(run))?;
            track_best(run, m);
        }
        if periodic(run) || run.iteration == cfg.iterations {
            let final_ = run.iteration == cfg.iterations;
            let bundle = save_stage(run, models.refs(), |b| {
                trainer.opt_res.save_into(b, "res")?;
                trainer.opt_d.save_into(b, "d")
            }, final_)?;
            if final_ {
                return Ok(bundle);
            }
        }
    }
    Err(Error::Config("no iterations left to run".into()))
}

/// Input / inversion / fixed-edit triplets for the first images of `x`;
/// returns the reconstruction MSE over all of `x`.
fn write_styleres_samples(t: &StyleresTrainer, x: &Tensor, path: &Path) -> Result<f64> {
    let p = t.pipeline();
    let (rec, edit) = tch::no_grad(|| -> Result<(Tensor, Tensor)> {
        let enc = p.encode(x)?;
        let rec = p.from_codes(&enc.f0, &enc.wplus, &enc.wplus)?.image;
        let b = x.size()[0] as usize;
        let w_r = t.g.replicate(&t.g.map(&t.g.sample_z(&mut ChaCha8Rng::seed_from_u64(11), b)));
        let w_e = interp_edit(&enc.wplus, &w_r, 5.0)?;
        let edit = p.from_codes(&enc.f0, &enc.wplus, &w_e)?.image;
        Ok((rec, edit))
    })?;
    let n = 8.min(x.size()[0]);
    save_grid(
        &[
            &ImageBatch::from_tensor(&x.narrow(0, 0, n))?,
            &ImageBatch::from_tensor(&rec.narrow(0, 0, n))?,
            &ImageBatch::from_tensor(&edit.narrow(0, 0, n))?,
        ],
        path,
    )?;
    mse(&rec, x)
}
