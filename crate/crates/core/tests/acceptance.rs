//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 6 and 7 train the whole experiment twice (profile from
//! `STYLERES_ACCEPT_PROFILE`, default `lite`) under `STYLERES_ACCEPT_DIR`
//! (default `target/acceptance`). Finished stages are reloaded when their
//! config hash matches, so repeated invocations only re-evaluate.
//! `STYLERES_ACCEPT_ONLY=1,2,3` restricts the run.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use tch::{Device, Kind, Tensor};

use common::gradcases::cases;
use common::{coordinate_check, directional_check, jacobi_eigen, seeded, spread};
use styleres::attrnet::AttrNet;
use styleres::checkpoint::CheckpointBundle;
use styleres::editops::{discover_pca, discover_supervised, interp_edit, invert_edit, sample_alpha, ReverseMode};
use styleres::encoders::{BaseEncoder, EncoderVariant, Pipeline, ResidualModules};
use styleres::evalharness::{bg_preservation, edit_key, toy_fid, ssim, MetricReport};
use styleres::experiment::{run_experiment, Profile};
use styleres::losses::rec_l2;
use styleres::models::{ModelConfig, Models};
use styleres::shapesdata::{measure_batch, sample_dataset, ImageBatch};
use styleres::stylegen::{Generator, NoiseMode};
use styleres::trainer::{train, Stage, TrainingData};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn value(t: &Tensor) -> f64 {
    f64::try_from(t.to_kind(Kind::Double)).unwrap()
}

fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
    value(&(a - b).norm()) / value(&b.norm()).max(1e-300)
}

fn within(elapsed: Duration, budget: Duration) -> Result<(), String> {
    ensure(elapsed <= budget, format!("took {:.1}s, budget {}s", elapsed.as_secs_f64(), budget.as_secs()))
}

fn formulas() -> Check {
    let t = Instant::now();
    let opts = (Kind::Double, Device::Cpu);
    tch::manual_seed(1);
    let w = Tensor::randn([2, 10, 64], opts);
    let r = Tensor::randn([2, 10, 64], opts);
    ensure(interp_edit(&w, &r, 0.0).map_err(err)?.equal(&w), "alpha=0 is not the identity")?;
    let end = rel_err(&interp_edit(&w, &r, 10.0).map_err(err)?, &r);
    ensure(end < 1e-12, format!("alpha=10 endpoint off by {end:.1e}"))?;
    let mid = rel_err(&interp_edit(&w, &r, 5.0).map_err(err)?, &((&w + &r) / 2.0));
    ensure(mid < 1e-12, format!("midpoint off by {mid:.1e}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for i in 0..1000 {
        tch::manual_seed(100 + i);
        let w = Tensor::randn([1, 10, 64], opts) * rng.gen_range(0.1..3.0);
        let r = Tensor::randn([1, 10, 64], opts) * rng.gen_range(0.1..3.0);
        let alpha = rng.gen_range(0.0..9.5);
        let back = invert_edit(&interp_edit(&w, &r, alpha).map_err(err)?, &r, alpha, ReverseMode::Exact).map_err(err)?;
        worst = worst.max(rel_err(&back, &w));
    }
    ensure(worst < 1e-6, format!("invert∘interp relative error {worst:.1e}"))?;

    let n = 20_000;
    let mut zeros = 0;
    for _ in 0..n {
        let a = sample_alpha(&mut rng);
        if a == 0.0 {
            zeros += 1;
        } else {
            ensure(a > 4.0 && a < 5.0, format!("alpha {a} outside (4,5)"))?;
        }
    }
    let p0 = zeros as f64 / n as f64;
    ensure((p0 - 0.5).abs() <= 0.02, format!("P(alpha=0) = {p0}"))?;
    within(t.elapsed(), Duration::from_secs(10))?;
    Ok(format!("invert∘interp max rel err {worst:.1e} over 1000 triples; P(0)={p0:.4}"))
}

fn gradients() -> Check {
    let t = Instant::now();
    let mut worst32 = (0.0f64, "");
    for (name, f, x) in cases(Kind::Float) {
        let e = directional_check(&*f, &x, 1e-3);
        ensure(e < 1e-3, format!("{name} float32 relative error {e:.2e}"))?;
        if e > worst32.0 {
            worst32 = (e, name);
        }
    }
    let mut worst64 = (0.0f64, "");
    for (name, f, x) in cases(Kind::Double) {
        let e = coordinate_check(&*f, &x, &spread(x.numel() as i64, 48), 1e-6);
        ensure(e < 1e-5, format!("{name} float64 relative error {e:.2e}"))?;
        if e > worst64.0 {
            worst64 = (e, name);
        }
    }
    within(t.elapsed(), Duration::from_secs(120))?;
    Ok(format!(
        "worst float32 {:.1e} ({}), worst float64 {:.1e} ({})",
        worst32.0, worst32.1, worst64.0, worst64.1
    ))
}

fn metric_sanity() -> Check {
    let t = Instant::now();
    let x = seeded(&[4, 3, 32, 32], Kind::Float, 3);
    let s = ssim(&x, &x).map_err(err)?;
    ensure(s == 1.0, format!("ssim(x,x) = {s}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let d = 4;
    let shift = [1.0, -0.5, 0.75, 0.25];
    let draw = |rng: &mut ChaCha8Rng, m: &[f64]| -> Vec<Vec<f64>> {
        (0..10_000)
            .map(|_| (0..d).map(|j| rng.sample::<f64, _>(rand_distr::StandardNormal) + m[j]).collect())
            .collect()
    };
    let a = draw(&mut rng, &[0.0; 4]);
    let b = draw(&mut rng, &shift);
    let same = toy_fid(&a, &a).map_err(err)?;
    ensure(same < 1e-6, format!("toy_fid(S,S) = {same:.2e}"))?;
    let expect: f64 = shift.iter().map(|v| v * v).sum();
    let got = toy_fid(&a, &b).map_err(err)?;
    ensure((got - expect).abs() <= 0.05 * expect, format!("toy_fid {got:.4} vs closed form {expect:.4}"))?;

    let imgs = ImageBatch::concat(&sample_dataset(4, 8, 32).map_err(err)?.into_iter().map(|(i, _)| i).collect::<Vec<_>>())
        .map_err(err)?;
    let measured = measure_batch(&imgs);
    for (i, m) in measured.iter().enumerate() {
        if let Some(v) = bg_preservation(&imgs, &imgs, i, m) {
            ensure(v == 0.0, format!("bg_preservation(x,x) = {v} on image {i}"))?;
        }
    }
    within(t.elapsed(), Duration::from_secs(60))?;
    Ok(format!("ssim(x,x)=1, toy_fid(S,S)={same:.1e}, shifted {got:.4} vs {expect:.4}, bg(x,x)=0"))
}

fn tiny_init_bundle() -> Result<(ModelConfig, CheckpointBundle), String> {
    let cfg = ModelConfig::tiny();
    let mut m = Models::new(cfg.clone()).map_err(err)?;
    m.attr = Some(AttrNet::new(&cfg.attrnet, cfg.resolution(), 1).map_err(err)?);
    m.g = Some(Generator::new(&cfg.generator, 2).map_err(err)?);
    m.e0 = Some(BaseEncoder::new(&cfg.generator, &cfg.encoder, 3).map_err(err)?);
    let b = m.to_bundle(json!({"stage": "e0"})).map_err(err)?;
    Ok((cfg, b))
}

fn architecture() -> Check {
    let t = Instant::now();
    let (cfg, init) = tiny_init_bundle()?;
    let models = Models::from_bundle(&init).map_err(err)?;
    let g = models.generator().map_err(err)?;
    let e0 = models.base_encoder().map_err(err)?;
    let x = seeded(&[3, 3, 32, 32], Kind::Float, 4);

    let wp = e0.encode(&x).map_err(err)?.wplus;
    let split = tch::no_grad(|| {
        let f = g.synth_part1(&wp, &mut NoiseMode::Zero)?;
        g.synth_part2(&f, &wp, &mut NoiseMode::Zero)
    })
    .map_err(err)?;
    let whole = tch::no_grad(|| g.synthesize(&wp, &mut NoiseMode::Zero)).map_err(err)?;
    ensure(split.equal(&whole), "Part1/Part2 split differs from the whole generator")?;

    for variant in [EncoderVariant::Full, EncoderVariant::NoE1NoE2] {
        let res = ResidualModules::new(&cfg.generator, &cfg.encoder, variant, 5).map_err(err)?;
        let full = tch::no_grad(|| Pipeline::new(g, e0, Some(&res)).forward(&x, None)).map_err(err)?;
        ensure(full.image.equal(&whole), format!("zero-init {} pipeline differs from W+ inversion", variant.name()))?;
    }

    let out = tempfile::tempdir().map_err(err)?;
    let mut tc = Profile::tiny().stage_config(Stage::Styleres, 0);
    tc.iterations = 3;
    let trained = train(&tc, Some(&init), None, out.path()).map_err(err)?;
    let mut frozen = 0;
    for name in init.names().filter(|n| n.starts_with("g.") || n.starts_with("e0.")) {
        let before = init.get_tensor(name).map_err(err)?;
        let after = trained.get_tensor(name).map_err(err)?;
        ensure(before.equal(&after), format!("{name} changed during styleres training"))?;
        frozen += 1;
    }
    let changed = trained
        .names()
        .filter(|n| n.starts_with("res."))
        .filter(|n| {
            let t = trained.get_tensor(n).unwrap();
            value(&t.abs().sum(Kind::Double)) > 0.0
        })
        .count();
    ensure(changed > 0, "residual modules did not train")?;

    let bytes = trained.to_bytes().map_err(err)?;
    let back = CheckpointBundle::from_bytes(&bytes).map_err(err)?;
    ensure(back == trained && back.to_bytes().map_err(err)? == bytes, "checkpoint round trip is not exact")?;
    let path = out.path().join("final.ckpt");
    ensure(CheckpointBundle::load(&path).map_err(err)? == trained, "saved final.ckpt differs from the returned bundle")?;
    within(t.elapsed(), Duration::from_secs(60))?;
    Ok(format!("split and zero-init bit-exact; {frozen} frozen tensors unchanged; {} checkpoint bytes round-trip", bytes.len()))
}

fn accept_dir() -> PathBuf {
    std::env::var_os("STYLERES_ACCEPT_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../target/acceptance"))
}

fn accept_profile() -> Result<Profile, String> {
    Profile::by_name(&std::env::var("STYLERES_ACCEPT_PROFILE").unwrap_or_else(|_| "lite".into())).map_err(err)
}

fn run_dir(profile: &Profile, tag: &str) -> PathBuf {
    accept_dir().join(format!("{}_seed0_{tag}", profile.name))
}

/// Runs (or reloads) the experiment for the acceptance profile.
fn experiment(tag: &str) -> Result<MetricReport, String> {
    let profile = accept_profile()?;
    Ok(run_experiment(&profile, 0, &run_dir(&profile, tag), true).map_err(err)?.report)
}

fn overfit() -> Check {
    let t = Instant::now();
    let profile = Profile::lite();
    let mut cfg = profile.stage_config(Stage::Styleres, 0);
    cfg.fixed_batch = true;
    cfg.iterations = 500;
    cfg.batch_size = 16;
    // Frozen networks come from the lite experiment when it has been run,
    // else they are freshly initialized.
    let e0_path = run_dir(&profile, "a").join("e0/final.ckpt");
    let (init, source) = if e0_path.exists() {
        (CheckpointBundle::load(&e0_path).map_err(err)?, "trained lite G/E0")
    } else {
        let cfg = profile.model.clone();
        let mut m = Models::new(cfg.clone()).map_err(err)?;
        m.attr = Some(AttrNet::new(&cfg.attrnet, cfg.resolution(), 1).map_err(err)?);
        m.g = Some(Generator::new(&cfg.generator, 2).map_err(err)?);
        m.e0 = Some(BaseEncoder::new(&cfg.generator, &cfg.encoder, 3).map_err(err)?);
        (m.to_bundle(json!({"stage": "e0"})).map_err(err)?, "untrained lite G/E0")
    };
    let x = TrainingData::render(cfg.data_seed, cfg.train_images, profile.model.resolution())
        .map_err(err)?
        .batch(&mut ChaCha8Rng::seed_from_u64(0), cfg.batch_size, true);
    let recon = |bundle: &CheckpointBundle, residual: bool| -> Result<f64, String> {
        let m = Models::from_bundle(bundle).map_err(err)?;
        let p = m.pipeline(residual).map_err(err)?;
        let out = tch::no_grad(|| p.forward(&x, None)).map_err(err)?;
        Ok(value(&rec_l2(&[&out.image], &x).map_err(err)?))
    };
    let before = recon(&init, false)?;
    let out = tempfile::tempdir().map_err(err)?;
    let trained = train(&cfg, Some(&init), None, out.path()).map_err(err)?;
    let after = recon(&trained, true)?;
    let ratio = after / before;
    within(t.elapsed(), Duration::from_secs(15 * 60))?;
    ensure(
        ratio < 0.1,
        format!("rec_l2 {before:.4} → {after:.4} ({:.1}% of initial, need < 10%; {source})", 100.0 * ratio),
    )?;
    Ok(format!("rec_l2 {before:.4} → {after:.4} ({:.1}% of initial; {source})", 100.0 * ratio))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn end_to_end() -> Check {
    let t = Instant::now();
    let report = experiment("a")?;
    let get = |name: &str| report.variant(name).ok_or_else(|| format!("variant {name} missing from the report"));
    let (full, wplus) = (get("full")?, get("wplus_only")?);
    let (no_res, no_cycle) = (get("no_e1_no_e2")?, get("full_no_cycle")?);

    let improvement: Vec<f64> = full
        .recon
        .per_image_mse
        .iter()
        .zip(&wplus.recon.per_image_mse)
        .map(|(f, w)| (w - f) / w.max(1e-12))
        .collect();
    let med = median(improvement);
    let a = full.recon.mse < wplus.recon.mse && med >= 0.30;

    let size_plus = full.edits.get(&edit_key("size", 1.0)).map(|e| e.validity_rate).unwrap_or(f64::NAN);
    let b = size_plus >= 0.80;

    let pos_bg = |r: &styleres::evalharness::VariantReport| -> f64 {
        let v: Vec<f64> = r
            .edits
            .values()
            .filter(|e| e.direction.starts_with("pos_"))
            .map(|e| e.bg_preservation)
            .collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    };
    let (bg_full, bg_nores, bg_nocycle) = (pos_bg(full), pos_bg(no_res), pos_bg(no_cycle));
    let c = bg_full < bg_nores && bg_full < bg_nocycle;

    let ratio = full.cycle.as_ref().map(|c| c.ratio).unwrap_or(f64::NAN);
    let d = ratio <= 1.5;

    let mark = |ok: bool| if ok { "ok" } else { "FAIL" };
    let detail = format!(
        "(a) mse full {:.5} vs wplus {:.5}, median improvement {:.1}% [{}]; (b) size+ validity {:.3} [{}]; \
         (c) pos bg full {:.5} vs no_e1_no_e2 {:.5} / full_no_cycle {:.5} [{}]; (d) cycle ratio {:.3} [{}]; {:.0}s",
        full.recon.mse,
        wplus.recon.mse,
        100.0 * med,
        mark(a),
        size_plus,
        mark(b),
        bg_full,
        bg_nores,
        bg_nocycle,
        mark(c),
        ratio,
        mark(d),
        t.elapsed().as_secs_f64()
    );
    if a && b && c && d {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn determinism() -> Check {
    let profile = accept_profile()?;
    let first = experiment("a")?.deterministic_values();
    let second = experiment("b")?.deterministic_values();
    ensure(
        first.keys().eq(second.keys()),
        "the two reports contain different metric sets",
    )?;
    let mut worst = (0.0f64, String::new());
    for (k, a) in &first {
        let b = second[k];
        let diff = if a.is_nan() && b.is_nan() { 0.0 } else { (a - b).abs() };
        if !(diff <= worst.0) {
            worst = (diff, k.clone());
        }
    }
    let hash = |tag: &str| {
        CheckpointBundle::load(run_dir(&profile, tag).join("full/final.ckpt"))
            .and_then(|b| b.manifest_hash())
            .map_err(err)
    };
    let same_ckpt = hash("a")? == hash("b")?;
    let detail = format!(
        "{} values, max |diff| {:.1e}{}; full checkpoints {}",
        first.len(),
        worst.0,
        if worst.1.is_empty() { String::new() } else { format!(" at {}", worst.1) },
        if same_ckpt { "identical" } else { "differ" }
    );
    ensure(worst.0 <= 1e-6, detail.clone())?;
    Ok(detail)
}

fn directions() -> Check {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut gauss = |n: usize, d: usize| -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..d).map(|_| rng.sample(rand_distr::StandardNormal)).collect()).collect()
    };
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();

    let d = 16;
    let raw = gauss(1, d).remove(0);
    let truth: Vec<f64> = raw.iter().map(|v| v / dot(&raw, &raw).sqrt()).collect();
    let xs = gauss(3000, d);
    let labels: Vec<bool> = xs.iter().map(|x| dot(x, &truth) > 0.0).collect();
    let found = discover_supervised(&xs, &labels).map_err(err)?;
    let cos = dot(&found.direction, &truth).abs();
    ensure(cos > 0.99, format!("supervised |cos| {cos:.4}"))?;

    let k = 6;
    let scales = [3.0, 2.0, 1.5, 1.0, 0.5, 0.25];
    let mix = gauss(k, k);
    let cloud: Vec<Vec<f64>> = gauss(4000, k)
        .into_iter()
        .map(|z| (0..k).map(|i| (0..k).map(|j| mix[i][j] * z[j] * scales[j]).sum()).collect())
        .collect();
    let pca = discover_pca(&cloud).map_err(err)?;
    let mut ortho = 0.0f64;
    for (i, a) in pca.components.iter().enumerate() {
        for (j, b) in pca.components.iter().enumerate() {
            ortho = ortho.max((dot(a, b) - if i == j { 1.0 } else { 0.0 }).abs());
        }
    }
    ensure(ortho <= 1e-5, format!("orthonormality error {ortho:.1e}"))?;
    let n = cloud.len() as f64;
    let mean: Vec<f64> = (0..k).map(|j| cloud.iter().map(|x| x[j]).sum::<f64>() / n).collect();
    let cov: Vec<Vec<f64>> = (0..k)
        .map(|i| {
            (0..k)
                .map(|j| cloud.iter().map(|x| (x[i] - mean[i]) * (x[j] - mean[j])).sum::<f64>() / (n - 1.0))
                .collect()
        })
        .collect();
    let (_, vectors) = jacobi_eigen(&cov);
    let top: Vec<f64> = (0..k).map(|r| vectors[r][0]).collect();
    let top_cos = dot(&top, &pca.components[0]).abs();
    ensure(top_cos > 1.0 - 1e-8, format!("top eigenvector |cos| {top_cos}"))?;
    Ok(format!(
        "supervised |cos| {cos:.5}; orthonormality {ortho:.1e}; top-eigenvector |cos| {top_cos:.10}; {:.1}s",
        t.elapsed().as_secs_f64()
    ))
}

fn main() {
    let only: Option<Vec<u32>> = std::env::var("STYLERES_ACCEPT_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|p| p.trim().parse().ok()).collect());
    let criteria: [(u32, &str, fn() -> Check); 8] = [
        (1, "formula unit suite", formulas),
        (2, "gradient checks", gradients),
        (3, "metric sanity", metric_sanity),
        (4, "architecture invariants", architecture),
        (5, "overfit smoke", overfit),
        (6, "end-to-end experiment", end_to_end),
        (7, "determinism", determinism),
        (8, "direction discovery", directions),
    ];
    let mut failed = 0;
    for (n, title, check) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let t = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = t.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {n} PASS {title} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n} FAIL {title} ({secs:.1}s): {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
