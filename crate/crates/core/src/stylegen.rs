//! Toy style-based generator (mapping network + modulated synthesis split into
//! two parts at `split_resolution`) and its discriminator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use tch::{nn, Device, Tensor};

use crate::blocks::{lrelu, DownResBlk, EqConv2d, EqLinear, Initializer, ModConv, ModConvSpec};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub resolution: usize,
    pub split_resolution: usize,
    /// Feature width per resolution, starting at 4×4 and doubling.
    pub channels: Vec<usize>,
    pub z_dim: usize,
    pub w_dim: usize,
    pub mapping_depth: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            split_resolution: 16,
            channels: vec![256, 256, 256, 128, 64],
            z_dim: 64,
            w_dim: 128,
            mapping_depth: 4,
        }
    }
}

fn log2_exact(v: usize) -> Option<usize> {
    (v.is_power_of_two()).then(|| v.trailing_zeros() as usize)
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let res = log2_exact(self.resolution)
            .filter(|&l| l >= 3)
            .ok_or_else(|| Error::Config(format!("resolution {} must be a power of two >= 8", self.resolution)))?;
        let split = log2_exact(self.split_resolution)
            .filter(|&l| l >= 2)
            .ok_or_else(|| {
                Error::Config(format!("split_resolution {} must be a power of two >= 4", self.split_resolution))
            })?;
        if split >= res {
            return Err(Error::Config(format!(
                "split_resolution {} must be below resolution {}",
                self.split_resolution, self.resolution
            )));
        }
        if self.channels.len() != res - 1 {
            return Err(Error::Config(format!(
                "channels must list {} widths (4x4 .. {r}x{r}), got {}",
                res - 1,
                self.channels.len(),
                r = self.resolution
            )));
        }
        if self.channels.iter().any(|&c| c == 0) || self.z_dim == 0 || self.w_dim == 0 || self.mapping_depth == 0 {
            return Err(Error::Config("widths and depths must be positive".into()));
        }
        Ok(())
    }

    /// Number of style-modulated layers L (two per resolution).
    pub fn num_layers(&self) -> usize {
        2 * (self.resolution.trailing_zeros() as usize - 1)
    }

    /// Index of the last style layer belonging to Part 1.
    pub fn n_split(&self) -> usize {
        2 * (self.split_resolution.trailing_zeros() as usize - 1) - 1
    }

    pub fn channels_at(&self, resolution: usize) -> usize {
        self.channels[resolution.trailing_zeros() as usize - 2]
    }

    /// Width of the Part 1 output (C_g).
    pub fn split_channels(&self) -> usize {
        self.channels_at(self.split_resolution)
    }

    pub fn layer_resolution(&self, layer: usize) -> usize {
        4 << (layer / 2)
    }
}

/// How per-layer noise inputs are filled.
pub enum NoiseMode<'a> {
    /// No noise (all inversion, editing and encoder training).
    Zero,
    /// Deterministic noise derived from a seed and the layer index.
    Seeded(u64),
    /// Fresh draws from the training RNG stream.
    Fresh(&'a mut ChaCha8Rng),
}

impl NoiseMode<'_> {
    fn sample(&mut self, layer: usize, b: i64, res: i64, like: &Tensor) -> Option<Tensor> {
        let n = (b * res * res) as usize;
        let draw = |rng: &mut ChaCha8Rng| -> Vec<f32> { (0..n).map(|_| StandardNormal.sample(rng)).collect() };
        let values = match self {
            NoiseMode::Zero => return None,
            NoiseMode::Seeded(seed) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ layer as u64);
                draw(&mut rng)
            }
            NoiseMode::Fresh(rng) => draw(rng),
        };
        Some(
            Tensor::from_slice(&values)
                .view([b, 1, res, res])
                .to_kind(like.kind()),
        )
    }
}

#[derive(Debug)]
pub struct Generator {
    vs: nn::VarStore,
    cfg: GeneratorConfig,
    mapping: Vec<EqLinear>,
    const_input: Tensor,
    layers: Vec<ModConv>,
    to_rgb: ModConv,
    w_avg: Tensor,
}

impl Generator {
    pub fn new(cfg: &GeneratorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let vs = nn::VarStore::new(Device::Cpu);
        let root = vs.root();
        let mut init = Initializer::new(seed);
        let (z, w) = (cfg.z_dim as i64, cfg.w_dim as i64);

        let mapping = (0..cfg.mapping_depth)
            .map(|i| {
                let din = if i == 0 { z } else { w };
                EqLinear::new(&(&root / "mapping" / i), &mut init, din, w, 0.0)
            })
            .collect();
        let c4 = cfg.channels[0] as i64;
        let const_input = init.randn(&root, "const", &[1, c4, 4, 4]);
        let layers = (0..cfg.num_layers())
            .map(|i| {
                let res = cfg.layer_resolution(i);
                let cout = cfg.channels_at(res) as i64;
                let cin = if i == 0 {
                    c4
                } else if i % 2 == 0 {
                    cfg.channels_at(res / 2) as i64
                } else {
                    cout
                };
                ModConv::new(
                    &(&root / "synth" / i),
                    &mut init,
                    ModConvSpec {
                        w_dim: w,
                        cin,
                        cout,
                        k: 3,
                        demodulate: true,
                        upsample: i >= 2 && i % 2 == 0,
                        activate: true,
                        noise: true,
                    },
                )
            })
            .collect();
        let c_last = cfg.channels_at(cfg.resolution) as i64;
        let to_rgb = ModConv::new(
            &(&root / "to_rgb"),
            &mut init,
            ModConvSpec {
                w_dim: w,
                cin: c_last,
                cout: 3,
                k: 1,
                demodulate: false,
                upsample: false,
                activate: false,
                noise: false,
            },
        );
        let w_avg = root.zeros_no_train("w_avg", &[w]);
        Ok(Self {
            vs,
            cfg: cfg.clone(),
            mapping,
            const_input,
            layers,
            to_rgb,
            w_avg,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn var_store(&self) -> &nn::VarStore {
        &self.vs
    }

    pub fn var_store_mut(&mut self) -> &mut nn::VarStore {
        &mut self.vs
    }

    /// Running mean of mapped latents, used as the encoder's W+ offset.
    pub fn w_avg(&self) -> &Tensor {
        &self.w_avg
    }

    /// Mapping network M: B×d_z → B×d_w.
    pub fn map(&self, z: &Tensor) -> Tensor {
        // Pixel norm on the input latent.
        let mut x = z * (z.square().mean_dim(&[1i64][..], true, None) + 1e-8).rsqrt();
        for layer in &self.mapping {
            x = lrelu(&layer.forward(&x));
        }
        x
    }

    /// Broadcasts B×d_w to identical rows B×L×d_w.
    pub fn replicate(&self, w: &Tensor) -> Tensor {
        let l = self.cfg.num_layers() as i64;
        w.unsqueeze(1).repeat([1, l, 1])
    }

    pub fn sample_z(&self, rng: &mut ChaCha8Rng, n: usize) -> Tensor {
        let values: Vec<f32> = (0..n * self.cfg.z_dim)
            .map(|_| StandardNormal.sample(rng))
            .collect();
        Tensor::from_slice(&values).view([n as i64, self.cfg.z_dim as i64])
    }

    /// Recomputes `w_avg` as the mean of `n` mapped latents.
    pub fn update_w_avg(&mut self, rng: &mut ChaCha8Rng, n: usize) {
        let mean = tch::no_grad(|| {
            let z = self.sample_z(rng, n);
            self.map(&z).mean_dim(&[0i64][..], false, None)
        });
        tch::no_grad(|| self.w_avg.copy_(&mean));
    }

    fn check_wplus(&self, wplus: &Tensor) -> Result<i64> {
        let s = wplus.size();
        let expected = [self.cfg.num_layers() as i64, self.cfg.w_dim as i64];
        if s.len() != 3 || s[1..] != expected {
            return Err(Error::Shape(format!(
                "W+ must be Bx{}x{}, got {s:?}",
                expected[0], expected[1]
            )));
        }
        Ok(s[0])
    }

    fn run_layers(&self, mut x: Tensor, wplus: &Tensor, range: std::ops::Range<usize>, noise: &mut NoiseMode) -> Tensor {
        let b = wplus.size()[0];
        for i in range {
            let res = self.cfg.layer_resolution(i) as i64;
            let n = noise.sample(i, b, res, &x);
            x = self.layers[i].forward(&x, &wplus.select(1, i as i64), n.as_ref());
        }
        x
    }

    fn const_batch(&self, b: i64, like: &Tensor) -> Tensor {
        self.const_input.to_kind(like.kind()).repeat([b, 1, 1, 1])
    }

    /// Part 1 (G_{0→n}): constant input through style layers `0..=n_split`,
    /// returning C_g × r_split × r_split features.
    pub fn synth_part1(&self, wplus: &Tensor, noise: &mut NoiseMode) -> Result<Tensor> {
        let b = self.check_wplus(wplus)?;
        let x = self.const_batch(b, wplus);
        Ok(self.run_layers(x, wplus, 0..self.cfg.n_split() + 1, noise))
    }

    /// Part 2: continues synthesis from split-resolution features with style
    /// rows `n_split+1..L` and emits RGB in [-1, 1].
    pub fn synth_part2(&self, feat: &Tensor, wplus: &Tensor, noise: &mut NoiseMode) -> Result<Tensor> {
        let b = self.check_wplus(wplus)?;
        let s = feat.size();
        let (r, c) = (self.cfg.split_resolution as i64, self.cfg.split_channels() as i64);
        if s != [b, c, r, r] {
            return Err(Error::Shape(format!("Part 2 input must be {:?}, got {s:?}", [b, c, r, r])));
        }
        let x = self.run_layers(feat.shallow_clone(), wplus, self.cfg.n_split() + 1..self.cfg.num_layers(), noise);
        Ok(self.rgb(&x, wplus))
    }

    fn rgb(&self, x: &Tensor, wplus: &Tensor) -> Tensor {
        let last = wplus.select(1, self.cfg.num_layers() as i64 - 1);
        self.to_rgb.forward(x, &last, None).tanh()
    }

    /// Single-pass synthesis through all layers.
    pub fn synthesize(&self, wplus: &Tensor, noise: &mut NoiseMode) -> Result<Tensor> {
        let b = self.check_wplus(wplus)?;
        let x = self.const_batch(b, wplus);
        let x = self.run_layers(x, wplus, 0..self.cfg.num_layers(), noise);
        Ok(self.rgb(&x, wplus))
    }

    pub fn generate(&self, z: &Tensor, noise: &mut NoiseMode) -> Result<Tensor> {
        self.synthesize(&self.replicate(&self.map(z)), noise)
    }
}

#[derive(Debug)]
pub struct Discriminator {
    vs: nn::VarStore,
    resolution: usize,
    from_rgb: EqConv2d,
    blocks: Vec<DownResBlk>,
    conv: EqConv2d,
    fc: EqLinear,
    out: EqLinear,
}

impl Discriminator {
    pub fn new(cfg: &GeneratorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let vs = nn::VarStore::new(Device::Cpu);
        let root = vs.root();
        let mut init = Initializer::new(seed);
        let r = cfg.resolution;
        let from_rgb = EqConv2d::new(&(&root / "from_rgb"), &mut init, 3, cfg.channels_at(r) as i64, 1, true);
        let mut blocks = Vec::new();
        let mut res = r;
        while res > 4 {
            blocks.push(DownResBlk::new(
                &(&root / "block" / blocks.len()),
                &mut init,
                cfg.channels_at(res) as i64,
                cfg.channels_at(res / 2) as i64,
            ));
            res /= 2;
        }
        let c4 = cfg.channels[0] as i64;
        let conv = EqConv2d::new(&(&root / "conv"), &mut init, c4 + 1, c4, 3, true);
        let fc = EqLinear::new(&(&root / "fc"), &mut init, c4 * 16, c4, 0.0);
        let out = EqLinear::new(&(&root / "out"), &mut init, c4, 1, 0.0);
        Ok(Self {
            vs,
            resolution: r,
            from_rgb,
            blocks,
            conv,
            fc,
            out,
        })
    }

    pub fn var_store(&self) -> &nn::VarStore {
        &self.vs
    }

    pub fn var_store_mut(&mut self) -> &mut nn::VarStore {
        &mut self.vs
    }

    /// One logit per image.
    pub fn forward(&self, img: &Tensor) -> Result<Tensor> {
        let s = img.size();
        let r = self.resolution as i64;
        if s.len() != 4 || s[1..] != [3, r, r] {
            return Err(Error::Shape(format!("discriminator expects Bx3x{r}x{r}, got {s:?}")));
        }
        let mut x = lrelu(&self.from_rgb.forward(img));
        for block in &self.blocks {
            x = block.forward(&x);
        }
        // Minibatch standard deviation as one extra feature channel.
        let b = s[0];
        let std = (x.var_dim(&[0i64][..], false, false) + 1e-8).sqrt().mean(None);
        let std_map = std.view([1, 1, 1, 1]).expand([b, 1, 4, 4], false);
        let x = lrelu(&self.conv.forward(&Tensor::cat(&[x, std_map], 1)));
        let x = lrelu(&self.fc.forward(&x.flatten(1, -1)));
        Ok(self.out.forward(&x).view([b]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tch::Kind;

    fn small_cfg() -> GeneratorConfig {
        GeneratorConfig {
            resolution: 32,
            split_resolution: 16,
            channels: vec![32, 32, 16, 8],
            z_dim: 16,
            w_dim: 16,
            mapping_depth: 2,
        }
    }

    fn rand_wplus(g: &Generator, b: i64, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = g.config();
        let n = b as usize * cfg.num_layers() * cfg.w_dim;
        let v: Vec<f32> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        Tensor::from_slice(&v).view([b, cfg.num_layers() as i64, cfg.w_dim as i64])
    }

    #[test]
    fn default_config_layout() {
        let cfg = GeneratorConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.num_layers(), 10);
        assert_eq!(cfg.n_split(), 5);
        assert_eq!(cfg.split_channels(), 256);
        let bad = GeneratorConfig {
            split_resolution: 64,
            ..GeneratorConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn replicate_gives_identical_rows() {
        let g = Generator::new(&small_cfg(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = g.map(&g.sample_z(&mut rng, 3));
        let wp = g.replicate(&w);
        for i in 0..g.config().num_layers() as i64 {
            assert!(wp.select(1, i).equal(&w));
        }
        assert!(g.map(&g.sample_z(&mut ChaCha8Rng::seed_from_u64(0), 3)).equal(&w));
    }

    #[test]
    fn part_shapes_and_split_consistency() {
        let g = Generator::new(&small_cfg(), 2).unwrap();
        let wp = rand_wplus(&g, 2, 3);
        let f = g.synth_part1(&wp, &mut NoiseMode::Zero).unwrap();
        assert_eq!(f.size(), [2, 16, 16, 16]);
        let img = g.synth_part2(&f, &wp, &mut NoiseMode::Zero).unwrap();
        assert_eq!(img.size(), [2, 3, 32, 32]);
        assert!(img.equal(&g.synthesize(&wp, &mut NoiseMode::Zero).unwrap()));
        // Seeded noise splits consistently too.
        let f = g.synth_part1(&wp, &mut NoiseMode::Seeded(5)).unwrap();
        let img = g.synth_part2(&f, &wp, &mut NoiseMode::Seeded(5)).unwrap();
        assert!(img.equal(&g.synthesize(&wp, &mut NoiseMode::Seeded(5)).unwrap()));
        assert!(f64::try_from(img.abs().max()).unwrap() <= 1.0);
        // Adding zero features before Part 2 is an identity.
        let f0 = g.synth_part1(&wp, &mut NoiseMode::Zero).unwrap();
        let plus = g.synth_part2(&(&f0 + f0.zeros_like()), &wp, &mut NoiseMode::Zero).unwrap();
        assert!(plus.equal(&g.synth_part2(&f0, &wp, &mut NoiseMode::Zero).unwrap()));
    }

    #[test]
    fn style_locality() {
        let g = Generator::new(&small_cfg(), 4).unwrap();
        let wp = rand_wplus(&g, 1, 9);
        let l = g.config().num_layers() as i64;
        let base_f = g.synth_part1(&wp, &mut NoiseMode::Zero).unwrap();
        let perturbed = wp.copy();
        let _ = perturbed.select(1, l - 1).g_add_scalar_(1.0);
        let f = g.synth_part1(&perturbed, &mut NoiseMode::Zero).unwrap();
        assert!(f.equal(&base_f));
        let full = g.synthesize(&wp, &mut NoiseMode::Zero).unwrap();
        assert!(!g.synthesize(&perturbed, &mut NoiseMode::Zero).unwrap().equal(&full));

        // Row i only affects layers >= i: the output of layer i-1 is unchanged.
        for i in 1..l as usize {
            let p = wp.copy();
            let _ = p.select(1, i as i64).g_add_scalar_(0.5);
            let a = g.run_layers(g.const_batch(1, &wp), &wp, 0..i, &mut NoiseMode::Zero);
            let b = g.run_layers(g.const_batch(1, &wp), &p, 0..i, &mut NoiseMode::Zero);
            assert!(a.equal(&b), "row {i} leaked into earlier layers");
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        let g = Generator::new(&small_cfg(), 2).unwrap();
        let bad = Tensor::zeros([1, 3, 16], (Kind::Float, Device::Cpu));
        assert!(matches!(g.synth_part1(&bad, &mut NoiseMode::Zero), Err(Error::Shape(_))));
        let wp = rand_wplus(&g, 1, 0);
        let feat = Tensor::zeros([1, 16, 8, 8], (Kind::Float, Device::Cpu));
        assert!(g.synth_part2(&feat, &wp, &mut NoiseMode::Zero).is_err());
    }

    #[test]
    fn discriminator_outputs_finite_logits() {
        let cfg = small_cfg();
        let d = Discriminator::new(&cfg, 3).unwrap();
        let x = Tensor::randn([5, 3, 32, 32], (Kind::Float, Device::Cpu));
        let logits = d.forward(&x).unwrap();
        assert_eq!(logits.size(), [5]);
        assert!(bool::try_from(logits.isfinite().all()).unwrap());
    }
}
