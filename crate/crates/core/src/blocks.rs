//! Layer building blocks shared by the generator, discriminator, encoders and
//! the frozen attribute network.
//!
//! Weights use the equalized learning-rate parameterization: stored as N(0, 1)
//! and scaled by `1/sqrt(fan_in)` at run time. Initial values are drawn from a
//! seeded ChaCha stream so parameter init does not depend on libtorch's RNG.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use tch::{nn, Tensor};

const LRELU_GAIN: f64 = std::f64::consts::SQRT_2;

/// Seeded source of initial parameter values.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn randn(&mut self, path: &nn::Path, name: &str, dims: &[i64]) -> Tensor {
        let n: i64 = dims.iter().product();
        let values: Vec<f32> = (0..n)
            .map(|_| StandardNormal.sample(&mut self.rng))
            .collect();
        path.var_copy(name, &Tensor::from_slice(&values).view(dims))
    }
}

/// Leaky ReLU (slope 0.2) with variance-preserving gain.
pub fn lrelu(x: &Tensor) -> Tensor {
    (x * 0.2 + x.relu() * 0.8) * LRELU_GAIN
}

pub fn downsample2x(x: &Tensor) -> Tensor {
    x.avg_pool2d([2, 2], [2, 2], [0, 0], false, true, None)
}

/// Doubles the spatial resolution by bilinear interpolation.
pub fn interpolate2x(x: &Tensor) -> Tensor {
    let s = x.size();
    x.upsample_bilinear2d([s[2] * 2, s[3] * 2], false, None, None)
}

#[derive(Debug)]
pub struct EqLinear {
    weight: Tensor,
    bias: Tensor,
    scale: f64,
}

impl EqLinear {
    pub fn new(p: &nn::Path, init: &mut Initializer, din: i64, dout: i64, bias_init: f64) -> Self {
        let weight = init.randn(p, "weight", &[dout, din]);
        let bias = p.var("bias", &[dout], nn::Init::Const(bias_init));
        Self {
            weight,
            bias,
            scale: 1.0 / (din as f64).sqrt(),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.linear(&(&self.weight * self.scale), Some(&self.bias))
    }
}

#[derive(Debug)]
pub struct EqConv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    scale: f64,
    padding: i64,
}

impl EqConv2d {
    pub fn new(p: &nn::Path, init: &mut Initializer, cin: i64, cout: i64, k: i64, bias: bool) -> Self {
        let weight = init.randn(p, "weight", &[cout, cin, k, k]);
        let bias = bias.then(|| p.zeros("bias", &[cout]));
        Self {
            weight,
            bias,
            scale: 1.0 / ((cin * k * k) as f64).sqrt(),
            padding: k / 2,
        }
    }

    /// A convolution whose weights and bias start at exactly zero.
    pub fn zero(p: &nn::Path, cin: i64, cout: i64, k: i64) -> Self {
        Self {
            weight: p.zeros("weight", &[cout, cin, k, k]),
            bias: Some(p.zeros("bias", &[cout])),
            scale: 1.0 / ((cin * k * k) as f64).sqrt(),
            padding: k / 2,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.conv2d(
            &(&self.weight * self.scale),
            self.bias.as_ref(),
            [1, 1],
            [self.padding, self.padding],
            [1, 1],
            1,
        )
    }
}

/// Residual block that halves the spatial resolution.
#[derive(Debug)]
pub struct DownResBlk {
    conv1: EqConv2d,
    conv2: EqConv2d,
    skip: EqConv2d,
}

impl DownResBlk {
    pub fn new(p: &nn::Path, init: &mut Initializer, cin: i64, cout: i64) -> Self {
        Self {
            conv1: EqConv2d::new(&(p / "conv1"), init, cin, cin, 3, true),
            conv2: EqConv2d::new(&(p / "conv2"), init, cin, cout, 3, true),
            skip: EqConv2d::new(&(p / "skip"), init, cin, cout, 1, false),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let h = lrelu(&self.conv1.forward(x));
        let h = downsample2x(&lrelu(&self.conv2.forward(&h)));
        let s = self.skip.forward(&downsample2x(x));
        (h + s) * std::f64::consts::FRAC_1_SQRT_2
    }
}

/// Constant-width residual block.
#[derive(Debug)]
pub struct ResBlk {
    conv1: EqConv2d,
    conv2: EqConv2d,
}

impl ResBlk {
    pub fn new(p: &nn::Path, init: &mut Initializer, c: i64) -> Self {
        Self {
            conv1: EqConv2d::new(&(p / "conv1"), init, c, c, 3, true),
            conv2: EqConv2d::new(&(p / "conv2"), init, c, c, 3, true),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let h = self.conv2.forward(&lrelu(&self.conv1.forward(x)));
        (x + h) * std::f64::consts::FRAC_1_SQRT_2
    }
}

/// Style-modulated convolution with optional weight demodulation, bilinear
/// upsampling of the input and per-pixel noise injection.
#[derive(Debug)]
pub struct ModConv {
    affine: EqLinear,
    weight: Tensor,
    bias: Tensor,
    noise_strength: Option<Tensor>,
    scale: f64,
    k: i64,
    demodulate: bool,
    upsample: bool,
    activate: bool,
}

pub struct ModConvSpec {
    pub w_dim: i64,
    pub cin: i64,
    pub cout: i64,
    pub k: i64,
    pub demodulate: bool,
    pub upsample: bool,
    pub activate: bool,
    pub noise: bool,
}

impl ModConv {
    pub fn new(p: &nn::Path, init: &mut Initializer, spec: ModConvSpec) -> Self {
        Self {
            affine: EqLinear::new(&(p / "affine"), init, spec.w_dim, spec.cin, 1.0),
            weight: init.randn(p, "weight", &[spec.cout, spec.cin, spec.k, spec.k]),
            bias: p.zeros("bias", &[spec.cout]),
            noise_strength: spec.noise.then(|| p.zeros("noise_strength", &[1])),
            scale: 1.0 / ((spec.cin * spec.k * spec.k) as f64).sqrt(),
            k: spec.k,
            demodulate: spec.demodulate,
            upsample: spec.upsample,
            activate: spec.activate,
        }
    }

    pub fn upsamples(&self) -> bool {
        self.upsample
    }

    /// `x`: B×Cin×H×W, `w`: B×w_dim style row, `noise`: B×1×H'×W' or none.
    pub fn forward(&self, x: &Tensor, w: &Tensor, noise: Option<&Tensor>) -> Tensor {
        let b = x.size()[0];
        let styles = self.affine.forward(w);
        let cin = styles.size()[1];
        let x = if self.upsample { interpolate2x(x) } else { x.shallow_clone() };
        let weight = &self.weight * self.scale;
        let cout = weight.size()[0];
        let mut y = (x * styles.view([b, cin, 1, 1])).conv2d(
            &weight,
            None::<Tensor>,
            [1, 1],
            [self.k / 2, self.k / 2],
            [1, 1],
            1,
        );
        if self.demodulate {
            let wsq = weight.square().sum_dim_intlist(&[2i64, 3][..], false, None);
            let d = (styles.square().matmul(&wsq.tr()) + 1e-8).rsqrt();
            y = y * d.view([b, cout, 1, 1]);
        }
        if let (Some(noise), Some(strength)) = (noise, &self.noise_strength) {
            y = y + noise * strength;
        }
        y = y + self.bias.view([1, cout, 1, 1]);
        if self.activate {
            lrelu(&y)
        } else {
            y
        }
    }
}
