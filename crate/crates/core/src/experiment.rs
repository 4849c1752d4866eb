//! Compute profiles and the end-to-end ablation experiment: every training
//! stage, direction discovery and the evaluation protocol, driven from one
//! seed.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attrnet::AttrNetConfig;
use crate::checkpoint::CheckpointBundle;
use crate::editops::{discover_attribute_directions, DirectionBank};
use crate::encoders::{EncoderConfig, EncoderVariant};
use crate::error::{Error, Result};
use crate::evalharness::{run_protocol, MetricReport, ProtocolConfig, VariantSource};
use crate::models::{ModelConfig, Models};
use crate::stylegen::GeneratorConfig;
use crate::trainer::{train, Stage, TrainConfig};

/// Network sizes and per-stage budgets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub name: String,
    pub model: ModelConfig,
    pub batch_size: usize,
    pub train_images: usize,
    pub classifier_iters: u64,
    pub gan_iters: u64,
    pub e0_iters: u64,
    pub styleres_iters: u64,
    pub classifier_lr: f64,
    pub gan_lr: f64,
    pub e0_lr: f64,
    pub styleres_lr: f64,
    /// Residual-feature weight on both paths.
    pub lambda_f: f64,
    pub eval_images: usize,
    pub direction_samples: usize,
}

impl Profile {
    /// R=64 with the stated desk budgets (gan 10k, e0 5k, styleres 5k).
    pub fn desk() -> Self {
        Self {
            name: "desk".into(),
            model: ModelConfig::default(),
            batch_size: 16,
            train_images: 8000,
            classifier_iters: 3000,
            gan_iters: 10_000,
            e0_iters: 5000,
            styleres_iters: 5000,
            classifier_lr: 1e-3,
            gan_lr: 2e-3,
            e0_lr: 1e-4,
            styleres_lr: 1e-4,
            lambda_f: 5.0,
            eval_images: 500,
            direction_samples: 2000,
        }
    }

    /// R=32 with halved budgets, for overnight CPU runs.
    pub fn cpu() -> Self {
        Self {
            name: "cpu".into(),
            model: ModelConfig {
                generator: GeneratorConfig {
                    resolution: 32,
                    channels: vec![256, 256, 128, 64],
                    ..GeneratorConfig::default()
                },
                ..ModelConfig::default()
            },
            gan_iters: 5000,
            e0_iters: 2500,
            styleres_iters: 2500,
            classifier_iters: 2000,
            ..Self::desk()
        }
    }

    /// Narrow R=32 networks and short budgets; about an hour on one core.
    pub fn lite() -> Self {
        Self {
            name: "lite".into(),
            model: ModelConfig {
                generator: GeneratorConfig {
                    resolution: 32,
                    split_resolution: 16,
                    channels: vec![64, 64, 32, 16],
                    z_dim: 64,
                    w_dim: 64,
                    mapping_depth: 4,
                },
                encoder: EncoderConfig {
                    c0: 32,
                    e1_width: 64,
                    e1_resblocks: 1,
                    e2_resblocks: 1,
                },
                attrnet: AttrNetConfig::default(),
            },
            batch_size: 16,
            train_images: 4000,
            classifier_iters: 1500,
            gan_iters: 4000,
            e0_iters: 2000,
            styleres_iters: 2000,
            // At this width the residual path's gain is ~1, so λ_f=5 pins F at zero.
            styleres_lr: 3e-3,
            lambda_f: 0.5,
            ..Self::desk()
        }
    }

    /// Seconds, not minutes: only for exercising the plumbing.
    pub fn tiny() -> Self {
        Self {
            name: "tiny".into(),
            model: ModelConfig::tiny(),
            batch_size: 4,
            train_images: 64,
            classifier_iters: 4,
            gan_iters: 4,
            e0_iters: 4,
            styleres_iters: 4,
            eval_images: 32,
            direction_samples: 200,
            ..Self::desk()
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "cpu" => Ok(Self::cpu()),
            "lite" => Ok(Self::lite()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::Config(format!("unknown profile `{other}` (desk, cpu, lite, tiny)"))),
        }
    }

    /// Training config of one stage under this profile.
    pub fn stage_config(&self, stage: Stage, seed: u64) -> TrainConfig {
        let base = TrainConfig {
            stage,
            seed,
            batch_size: self.batch_size,
            train_images: self.train_images,
            model: self.model.clone(),
            sample_interval: 500,
            ..TrainConfig::default()
        };
        match stage {
            Stage::Classifier => TrainConfig {
                iterations: self.classifier_iters,
                lr: self.classifier_lr,
                ..base
            },
            Stage::Gan => TrainConfig {
                iterations: self.gan_iters,
                lr: self.gan_lr,
                betas: (0.0, 0.99),
                milestones: Some(Vec::new()),
                r1_gamma: 0.1,
                ..base
            },
            Stage::E0 => TrainConfig {
                iterations: self.e0_iters,
                lr: self.e0_lr,
                ..base
            },
            Stage::Styleres => {
                let mut cfg = TrainConfig {
                    iterations: self.styleres_iters,
                    lr: self.styleres_lr,
                    ..base
                };
                cfg.weights_no_edit.lambda_f = self.lambda_f;
                cfg.weights_cycle.lambda_f = self.lambda_f;
                cfg
            }
        }
    }
}

/// Trained variants of the ablation grid; `wplus_only` needs no training.
pub const TRAINED_VARIANTS: [&str; 3] = ["full", "full_no_cycle", "no_e1_no_e2"];

pub fn variant_config(profile: &Profile, name: &str, seed: u64) -> Result<TrainConfig> {
    let mut cfg = profile.stage_config(Stage::Styleres, seed);
    match name {
        "full_no_cycle" => {
            cfg.variant = EncoderVariant::Full;
            cfg.p_edit = 0.0;
        }
        other => cfg.variant = other.parse()?,
    }
    Ok(cfg)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentOutcome {
    pub profile: String,
    pub seed: u64,
    pub report: MetricReport,
    pub report_path: PathBuf,
    pub stage_seconds: Vec<(String, f64)>,
}

/// Loads `dir/final.ckpt` when a previous invocation already finished that
/// stage, otherwise trains it.
fn stage(
    dir: &Path,
    cfg: &TrainConfig,
    init: Option<&CheckpointBundle>,
    reuse: bool,
    timings: &mut Vec<(String, f64)>,
    label: &str,
) -> Result<CheckpointBundle> {
    let path = dir.join("final.ckpt");
    if reuse && path.exists() {
        let b = CheckpointBundle::load(&path)?;
        if b.metadata.get("config_hash").and_then(|h| h.as_str()) == Some(cfg.hash()?.as_str()) {
            log::info!("{label}: reusing {}", path.display());
            return Ok(b);
        }
    }
    log::info!("{label}: training {} iterations", cfg.iterations);
    let t = Instant::now();
    let b = train(cfg, init, None, dir)?;
    timings.push((label.to_string(), t.elapsed().as_secs_f64()));
    Ok(b)
}

/// Runs classifier → gan → e0 → styleres (per variant) → directions →
/// evaluation under `out_dir`. With `reuse`, stages whose final checkpoint
/// exists for the identical config are loaded instead of retrained.
pub fn run_experiment(profile: &Profile, seed: u64, out_dir: &Path, reuse: bool) -> Result<ExperimentOutcome> {
    std::fs::create_dir_all(out_dir)?;
    let mut timings = Vec::new();
    let classifier = stage(
        &out_dir.join("classifier"),
        &profile.stage_config(Stage::Classifier, seed),
        None,
        reuse,
        &mut timings,
        "classifier",
    )?;
    let gan = stage(
        &out_dir.join("gan"),
        &profile.stage_config(Stage::Gan, seed),
        Some(&classifier),
        reuse,
        &mut timings,
        "gan",
    )?;
    let e0 = stage(
        &out_dir.join("e0"),
        &profile.stage_config(Stage::E0, seed),
        Some(&gan),
        reuse,
        &mut timings,
        "e0",
    )?;
    let mut sources = vec![VariantSource::new("wplus_only", out_dir.join("e0/final.ckpt"))];
    for name in TRAINED_VARIANTS {
        let cfg = variant_config(profile, name, seed)?;
        stage(&out_dir.join(name), &cfg, Some(&e0), reuse, &mut timings, name)?;
        sources.push(VariantSource::new(name, out_dir.join(name).join("final.ckpt")));
    }

    let directions_path = out_dir.join("directions.json");
    let bank = {
        let models = Models::from_bundle(&e0)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd1ec);
        let bank = discover_attribute_directions(models.generator()?, profile.direction_samples, &mut rng, 3)?;
        bank.save(&directions_path)?;
        bank
    };

    let protocol = ProtocolConfig {
        eval_images: profile.eval_images,
        eval_seed: seed.wrapping_add(10_000_019),
        ..ProtocolConfig::default()
    };
    let t = Instant::now();
    let report = run_protocol(&sources, &bank, &protocol, &out_dir.join("eval"))?;
    timings.push(("eval".into(), t.elapsed().as_secs_f64()));
    let report_path = out_dir.join("eval/report.json");
    Ok(ExperimentOutcome {
        profile: profile.name.clone(),
        seed,
        report,
        report_path,
        stage_seconds: timings,
    })
}

/// Direction bank written by [`run_experiment`].
pub fn load_directions(out_dir: &Path) -> Result<DirectionBank> {
    DirectionBank::load(out_dir.join("directions.json"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_are_valid() {
        for name in ["desk", "cpu", "lite", "tiny"] {
            let p = Profile::by_name(name).unwrap();
            for stage in [Stage::Classifier, Stage::Gan, Stage::E0, Stage::Styleres] {
                p.stage_config(stage, 0).validate().unwrap();
            }
            for v in TRAINED_VARIANTS {
                variant_config(&p, v, 0).unwrap().validate().unwrap();
            }
        }
        let d = Profile::desk();
        assert_eq!((d.model.resolution(), d.gan_iters, d.e0_iters, d.styleres_iters), (64, 10_000, 5000, 5000));
        assert_eq!(variant_config(&d, "full_no_cycle", 0).unwrap().p_edit, 0.0);
        assert!(Profile::by_name("huge").is_err());
    }
}
