//! Small convolutional attribute network trained once on the shapes data and
//! then frozen. Its intermediate activations are the perceptual features Φ,
//! its normalized penultimate layer is the identity embedding A, and the same
//! embedding feeds the toy FID.

use tch::{nn, Device, Kind, Tensor};

use crate::blocks::{lrelu, DownResBlk, EqConv2d, EqLinear, Initializer};
use crate::error::{Error, Result};
use crate::shapesdata::{AttributeVector, ShapeClass};

/// Output layout of the head: 3 class logits, hue (cos, sin), size, pos x/y.
pub const HEAD_DIM: i64 = 8;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AttrNetConfig {
    pub widths: [usize; 4],
    pub embed_dim: usize,
}

impl Default for AttrNetConfig {
    fn default() -> Self {
        Self {
            widths: [16, 32, 64, 64],
            embed_dim: 32,
        }
    }
}

#[derive(Debug)]
pub struct AttrNet {
    vs: nn::VarStore,
    resolution: usize,
    stem: EqConv2d,
    blocks: Vec<DownResBlk>,
    fc: EqLinear,
    head: EqLinear,
}

/// Forward pass results.
pub struct AttrOutput {
    /// Activations after each downsampling block (the Φ_j, j = 1..3).
    pub features: Vec<Tensor>,
    /// Unnormalized penultimate embedding.
    pub embedding: Tensor,
    pub head: Tensor,
}

impl AttrNet {
    pub fn new(cfg: &AttrNetConfig, resolution: usize, seed: u64) -> Result<Self> {
        if resolution < 32 || !resolution.is_power_of_two() {
            return Err(Error::Config(format!("unsupported attribute-net resolution {resolution}")));
        }
        let vs = nn::VarStore::new(Device::Cpu);
        let root = vs.root();
        let mut init = Initializer::new(seed);
        let w = cfg.widths.map(|c| c as i64);
        let stem = EqConv2d::new(&(&root / "stem"), &mut init, 3, w[0], 3, true);
        let blocks = (0..3)
            .map(|i| DownResBlk::new(&(&root / "block" / i), &mut init, w[i], w[i + 1]))
            .collect();
        let fc = EqLinear::new(&(&root / "fc"), &mut init, w[3] * 16, cfg.embed_dim as i64, 0.0);
        let head = EqLinear::new(&(&root / "head"), &mut init, cfg.embed_dim as i64, HEAD_DIM, 0.0);
        Ok(Self {
            vs,
            resolution,
            stem,
            blocks,
            fc,
            head,
        })
    }

    pub fn var_store(&self) -> &nn::VarStore {
        &self.vs
    }

    pub fn var_store_mut(&mut self) -> &mut nn::VarStore {
        &mut self.vs
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    /// Stops gradient accumulation into the network's own parameters.
    pub fn freeze(&mut self) {
        self.vs.freeze();
    }

    pub fn forward(&self, x: &Tensor) -> Result<AttrOutput> {
        let s = x.size();
        let r = self.resolution as i64;
        if s.len() != 4 || s[1..] != [3, r, r] {
            return Err(Error::Shape(format!("attribute net expects Bx3x{r}x{r}, got {s:?}")));
        }
        let mut h = lrelu(&self.stem.forward(x));
        let mut features = Vec::with_capacity(3);
        for block in &self.blocks {
            h = block.forward(&h);
            features.push(h.shallow_clone());
        }
        let pooled = h.adaptive_avg_pool2d([4, 4]).flatten(1, -1);
        let embedding = lrelu(&self.fc.forward(&pooled));
        let head = self.head.forward(&embedding);
        Ok(AttrOutput {
            features,
            embedding,
            head,
        })
    }

    /// Φ_j for the requested 1-based depths.
    pub fn features(&self, x: &Tensor, layers: &[usize]) -> Result<Vec<Tensor>> {
        let mut out = self.forward(x)?.features;
        if let Some(&bad) = layers.iter().find(|&&j| j == 0 || j > out.len()) {
            return Err(Error::validation("layers", format!("perceptual depth {bad} not in 1..=3")));
        }
        Ok(layers.iter().map(|&j| std::mem::replace(&mut out[j - 1], Tensor::new())).collect())
    }

    /// A(x): unit-norm embedding per sample.
    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        Ok(normalize(&self.forward(x)?.embedding))
    }

    /// Raw penultimate activations, used for distribution statistics.
    pub fn embed_raw(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward(x)?.embedding)
    }
}

fn normalize(e: &Tensor) -> Tensor {
    let norm = e.square().sum_dim_intlist(&[1i64][..], true, None).clamp_min(1e-12).sqrt();
    e / norm
}

/// Regression/classification targets for a batch of attribute vectors.
pub fn head_targets(attrs: &[AttributeVector]) -> (Tensor, Tensor) {
    let classes: Vec<i64> = attrs
        .iter()
        .map(|a| match a.shape_class {
            ShapeClass::Circle => 0,
            ShapeClass::Square => 1,
            ShapeClass::Triangle => 2,
        })
        .collect();
    let regress: Vec<f32> = attrs
        .iter()
        .flat_map(|a| {
            let t = std::f64::consts::TAU * a.hue;
            [t.cos(), t.sin(), (a.size - 0.3) / 0.1, (a.pos_x - 0.5) / 0.1, (a.pos_y - 0.5) / 0.1].map(|v| v as f32)
        })
        .collect();
    (
        Tensor::from_slice(&classes),
        Tensor::from_slice(&regress).view([attrs.len() as i64, 5]),
    )
}

/// Supervised objective of the attribute network: class cross-entropy plus
/// squared error on the standardized regression targets.
pub fn head_loss(head: &Tensor, classes: &Tensor, regress: &Tensor) -> Tensor {
    let logits = head.narrow(1, 0, 3);
    let ce = logits.cross_entropy_for_logits(classes);
    let mse = (head.narrow(1, 3, 5) - regress.to_kind(head.kind())).square().mean(Kind::Float);
    ce + mse
}

/// Fraction of correct class predictions.
pub fn class_accuracy(head: &Tensor, classes: &Tensor) -> f64 {
    let pred = head.narrow(1, 0, 3).argmax(1, false);
    f64::try_from(pred.eq_tensor(classes).to_kind(Kind::Float).mean(Kind::Float)).unwrap_or(0.0)
}
