//! Image encoders: the base W+ encoder E0, the residual feature encoder E1,
//! the edit-adaptive transformation encoder E2, and the inference pipeline
//! that combines them with the two generator parts.

use serde::{Deserialize, Serialize};
use tch::{nn, Device, Tensor};

use crate::blocks::{interpolate2x, lrelu, DownResBlk, EqConv2d, EqLinear, Initializer, ResBlk};
use crate::editops::{apply_edit, EditSpec};
use crate::error::{Error, Result};
use crate::stylegen::{Generator, GeneratorConfig, NoiseMode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Channels of the tapped base feature map F_0.
    pub c0: usize,
    /// Internal width of E1.
    pub e1_width: usize,
    pub e1_resblocks: usize,
    pub e2_resblocks: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            c0: 64,
            e1_width: 256,
            e1_resblocks: 2,
            e2_resblocks: 2,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self, g: &GeneratorConfig) -> Result<()> {
        if self.c0 == 0 || self.e1_width == 0 {
            return Err(Error::Config("encoder widths must be positive".into()));
        }
        if g.split_channels() % 2 != 0 {
            return Err(Error::Config("generator width at the split must be even".into()));
        }
        if g.split_resolution < 16 {
            return Err(Error::Config("E1 needs split_resolution >= 16 for two down stages".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderVariant {
    Full,
    NoE1NoE2,
    NoE1,
    NoE2,
}

impl EncoderVariant {
    pub fn name(self) -> &'static str {
        match self {
            EncoderVariant::Full => "full",
            EncoderVariant::NoE1NoE2 => "no_e1_no_e2",
            EncoderVariant::NoE1 => "no_e1",
            EncoderVariant::NoE2 => "no_e2",
        }
    }

    fn has_e1(self) -> bool {
        matches!(self, EncoderVariant::Full | EncoderVariant::NoE2)
    }

    fn has_e2(self) -> bool {
        matches!(self, EncoderVariant::Full | EncoderVariant::NoE1)
    }

    fn has_project(self) -> bool {
        matches!(self, EncoderVariant::NoE1NoE2 | EncoderVariant::NoE1)
    }
}

impl std::str::FromStr for EncoderVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(EncoderVariant::Full),
            "no_e1_no_e2" => Ok(EncoderVariant::NoE1NoE2),
            "no_e1" => Ok(EncoderVariant::NoE1),
            "no_e2" => Ok(EncoderVariant::NoE2),
            other => Err(Error::Config(format!("unknown encoder variant `{other}`"))),
        }
    }
}

/// Output of E0: base features and the W+ code.
#[derive(Debug)]
pub struct EncoderOutputs {
    /// B × C_0 × r_split × r_split.
    pub f0: Tensor,
    /// B × L × d_w.
    pub wplus: Tensor,
}

impl EncoderOutputs {
    pub fn shallow_clone(&self) -> Self {
        Self {
            f0: self.f0.shallow_clone(),
            wplus: self.wplus.shallow_clone(),
        }
    }
}

/// E0: residual downsampling backbone with one style head per W+ row.
#[derive(Debug)]
pub struct BaseEncoder {
    vs: nn::VarStore,
    gcfg: GeneratorConfig,
    from_rgb: EqConv2d,
    downs: Vec<DownResBlk>,
    f0_tap: EqConv2d,
    heads: Vec<(usize, EqLinear)>,
    w_avg: Tensor,
}

impl BaseEncoder {
    pub fn new(g: &GeneratorConfig, e: &EncoderConfig, seed: u64) -> Result<Self> {
        g.validate()?;
        e.validate(g)?;
        let vs = nn::VarStore::new(Device::Cpu);
        let root = vs.root();
        let mut init = Initializer::new(seed);
        let r = g.resolution;
        let from_rgb = EqConv2d::new(&(&root / "from_rgb"), &mut init, 3, g.channels_at(r) as i64, 3, true);
        let mut downs = Vec::new();
        let mut res = r;
        while res > 4 {
            downs.push(DownResBlk::new(
                &(&root / "down" / downs.len()),
                &mut init,
                g.channels_at(res) as i64,
                g.channels_at(res / 2) as i64,
            ));
            res /= 2;
        }
        let f0_tap = EqConv2d::new(
            &(&root / "f0_tap"),
            &mut init,
            g.split_channels() as i64,
            e.c0 as i64,
            1,
            true,
        );
        let heads = (0..g.num_layers())
            .map(|i| {
                let level = (g.layer_resolution(i) / 2).max(4);
                let c = g.channels_at(level) as i64;
                (level, EqLinear::new(&(&root / "head" / i), &mut init, c * 16, g.w_dim as i64, 0.0))
            })
            .collect();
        let w_avg = root.zeros_no_train("w_avg", &[g.w_dim as i64]);
        Ok(Self {
            vs,
            gcfg: g.clone(),
            from_rgb,
            downs,
            f0_tap,
            heads,
            w_avg,
        })
    }

    pub fn var_store(&self) -> &nn::VarStore {
        &self.vs
    }

    pub fn var_store_mut(&mut self) -> &mut nn::VarStore {
        &mut self.vs
    }

    /// Sets the W+ offset the style heads predict around.
    pub fn set_w_avg(&mut self, w_avg: &Tensor) {
        tch::no_grad(|| self.w_avg.copy_(w_avg));
    }

    pub fn encode(&self, x: &Tensor) -> Result<EncoderOutputs> {
        let s = x.size();
        let r = self.gcfg.resolution as i64;
        if s.len() != 4 || s[1..] != [3, r, r] {
            return Err(Error::Shape(format!("E0 expects Bx3x{r}x{r}, got {s:?}")));
        }
        let b = s[0];
        let mut levels: Vec<(usize, Tensor)> = Vec::new();
        let mut h = lrelu(&self.from_rgb.forward(x));
        let mut res = self.gcfg.resolution;
        levels.push((res, h.shallow_clone()));
        for down in &self.downs {
            h = down.forward(&h);
            res /= 2;
            levels.push((res, h.shallow_clone()));
        }
        let level = |res: usize| &levels.iter().find(|(r, _)| *r == res).expect("pyramid level").1;
        let f0 = self.f0_tap.forward(level(self.gcfg.split_resolution));
        let mut pooled: Vec<(usize, Tensor)> = Vec::new();
        let rows: Vec<Tensor> = self
            .heads
            .iter()
            .map(|(lvl, head)| {
                if !pooled.iter().any(|(r, _)| r == lvl) {
                    pooled.push((*lvl, level(*lvl).adaptive_avg_pool2d([4, 4]).flatten(1, -1)));
                }
                let feat = &pooled.iter().find(|(r, _)| r == lvl).expect("pooled level").1;
                head.forward(feat)
            })
            .collect();
        let delta = Tensor::stack(&rows, 1);
        let wplus = delta + self.w_avg.to_kind(x.kind()).view([1, 1, -1]);
        debug_assert_eq!(wplus.size()[0], b);
        Ok(EncoderOutputs { f0, wplus })
    }
}

/// E1: encoder-decoder over concat(F_0, G_W) producing residual features F_a.
#[derive(Debug)]
pub struct ResidualEncoder {
    stem: EqConv2d,
    down1: DownResBlk,
    down2: DownResBlk,
    mid: Vec<ResBlk>,
    up1: EqConv2d,
    up2: EqConv2d,
    out: EqConv2d,
}

impl ResidualEncoder {
    fn new(p: &nn::Path, init: &mut Initializer, c0: i64, cg: i64, width: i64, resblocks: usize) -> Self {
        Self {
            stem: EqConv2d::new(&(p / "stem"), init, c0 + cg, width, 3, true),
            down1: DownResBlk::new(&(p / "down1"), init, width, width),
            down2: DownResBlk::new(&(p / "down2"), init, width, width),
            mid: (0..resblocks).map(|i| ResBlk::new(&(p / "mid" / i), init, width)).collect(),
            up1: EqConv2d::new(&(p / "up1"), init, width, width, 3, true),
            up2: EqConv2d::new(&(p / "up2"), init, width, width, 3, true),
            out: EqConv2d::zero(&(p / "out"), width, cg, 3),
        }
    }

    pub fn forward(&self, f0: &Tensor, g_w: &Tensor) -> Result<Tensor> {
        check_spatial(f0, g_w, "E1")?;
        let h0 = lrelu(&self.stem.forward(&Tensor::cat(&[f0, g_w], 1)));
        let d1 = self.down1.forward(&h0);
        let mut h = self.down2.forward(&d1);
        for block in &self.mid {
            h = block.forward(&h);
        }
        let u1 = lrelu(&self.up1.forward(&interpolate2x(&h))) + d1;
        let u2 = lrelu(&self.up2.forward(&interpolate2x(&u1))) + h0;
        Ok(self.out.forward(&u2))
    }
}

/// E2: adapts residual features F_a to the (possibly edited) generator
/// features G_α.
#[derive(Debug)]
pub struct TransformEncoder {
    in_residual: EqConv2d,
    in_generated: EqConv2d,
    blocks: Vec<ResBlk>,
    out: EqConv2d,
}

impl TransformEncoder {
    fn new(p: &nn::Path, init: &mut Initializer, cg: i64, resblocks: usize) -> Self {
        Self {
            in_residual: EqConv2d::new(&(p / "in_residual"), init, cg, cg / 2, 3, true),
            in_generated: EqConv2d::new(&(p / "in_generated"), init, cg, cg / 2, 3, true),
            blocks: (0..resblocks).map(|i| ResBlk::new(&(p / "block" / i), init, cg)).collect(),
            out: EqConv2d::zero(&(p / "out"), cg, cg, 3),
        }
    }

    pub fn forward(&self, f_a: &Tensor, g_alpha: &Tensor) -> Result<Tensor> {
        check_spatial(f_a, g_alpha, "E2")?;
        let mut h = lrelu(&Tensor::cat(
            &[self.in_residual.forward(f_a), self.in_generated.forward(g_alpha)],
            1,
        ));
        for block in &self.blocks {
            h = block.forward(&h);
        }
        Ok(self.out.forward(&h))
    }
}

fn check_spatial(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    let (sa, sb) = (a.size(), b.size());
    if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2..] != sb[2..] {
        return Err(Error::Shape(format!("{what} inputs disagree: {sa:?} vs {sb:?}")));
    }
    Ok(())
}

/// The trainable residual modules of one encoder variant (E1, E2 and/or the
/// 1×1 projection adapter used by the ablations).
#[derive(Debug)]
pub struct ResidualModules {
    vs: nn::VarStore,
    variant: EncoderVariant,
    e1: Option<ResidualEncoder>,
    e2: Option<TransformEncoder>,
    project: Option<EqConv2d>,
    c0: i64,
    cg: i64,
}

impl ResidualModules {
    pub fn new(g: &GeneratorConfig, e: &EncoderConfig, variant: EncoderVariant, seed: u64) -> Result<Self> {
        g.validate()?;
        e.validate(g)?;
        let vs = nn::VarStore::new(Device::Cpu);
        let root = vs.root();
        let mut init = Initializer::new(seed);
        let (c0, cg) = (e.c0 as i64, g.split_channels() as i64);
        let e1 = variant
            .has_e1()
            .then(|| ResidualEncoder::new(&(&root / "e1"), &mut init, c0, cg, e.e1_width as i64, e.e1_resblocks));
        let e2 = variant
            .has_e2()
            .then(|| TransformEncoder::new(&(&root / "e2"), &mut init, cg, e.e2_resblocks));
        let project = variant.has_project().then(|| EqConv2d::zero(&(&root / "proj"), c0, cg, 1));
        Ok(Self {
            vs,
            variant,
            e1,
            e2,
            project,
            c0,
            cg,
        })
    }

    pub fn variant(&self) -> EncoderVariant {
        self.variant
    }

    pub fn var_store(&self) -> &nn::VarStore {
        &self.vs
    }

    pub fn var_store_mut(&mut self) -> &mut nn::VarStore {
        &mut self.vs
    }

    pub fn e1(&self) -> Option<&ResidualEncoder> {
        self.e1.as_ref()
    }

    pub fn e2(&self) -> Option<&TransformEncoder> {
        self.e2.as_ref()
    }

    /// Final residual feature map F for base features `f0`, unedited
    /// generator features `g_w` and edited generator features `g_e`.
    pub fn residual(&self, f0: &Tensor, g_w: &Tensor, g_e: &Tensor) -> Result<Tensor> {
        let s = f0.size();
        if s.len() != 4 || s[1] != self.c0 {
            return Err(Error::Shape(format!("F_0 must have {} channels, got {s:?}", self.c0)));
        }
        if g_e.size().get(1) != Some(&self.cg) {
            return Err(Error::Shape(format!("generator features must have {} channels", self.cg)));
        }
        let project = || self.project.as_ref().expect("variant has projection").forward(f0);
        let e1 = || self.e1.as_ref().expect("variant has E1").forward(f0, g_w);
        let e2 = |f_a: &Tensor| self.e2.as_ref().expect("variant has E2").forward(f_a, g_e);
        match self.variant {
            EncoderVariant::Full => e2(&e1()?),
            EncoderVariant::NoE1NoE2 => {
                check_spatial(f0, g_e, "projection")?;
                Ok(project())
            }
            EncoderVariant::NoE1 => e2(&project()),
            EncoderVariant::NoE2 => e1(),
        }
    }
}

/// Intermediate values of one pipeline pass.
#[derive(Debug)]
pub struct PipelineOutput {
    pub image: Tensor,
    /// Residual features F added to G_α (zeros for W+-only inversion).
    pub residual: Option<Tensor>,
    pub wplus: Tensor,
    pub w_edit: Tensor,
    pub g_w: Tensor,
    pub g_e: Tensor,
}

/// Inference pipeline over frozen E0 and G. Without residual modules it
/// performs plain W+ inversion.
pub struct Pipeline<'a> {
    pub generator: &'a Generator,
    pub e0: &'a BaseEncoder,
    pub residual: Option<&'a ResidualModules>,
}

impl<'a> Pipeline<'a> {
    pub fn new(generator: &'a Generator, e0: &'a BaseEncoder, residual: Option<&'a ResidualModules>) -> Self {
        Self {
            generator,
            e0,
            residual,
        }
    }

    pub fn encode(&self, x: &Tensor) -> Result<EncoderOutputs> {
        self.e0.encode(x)
    }

    /// Synthesizes from stored codes: `w_edit` drives the edited branch,
    /// `wplus` the residual encoder's reference branch.
    pub fn from_codes(&self, f0: &Tensor, wplus: &Tensor, w_edit: &Tensor) -> Result<PipelineOutput> {
        let g = self.generator;
        let g_w = g.synth_part1(wplus, &mut NoiseMode::Zero)?;
        let g_e = if w_edit.equal(wplus) {
            g_w.shallow_clone()
        } else {
            g.synth_part1(w_edit, &mut NoiseMode::Zero)?
        };
        let residual = match self.residual {
            Some(modules) => Some(modules.residual(f0, &g_w, &g_e)?),
            None => None,
        };
        let feat = match &residual {
            Some(f) => &g_e + f,
            None => g_e.shallow_clone(),
        };
        let image = g.synth_part2(&feat, w_edit, &mut NoiseMode::Zero)?;
        Ok(PipelineOutput {
            image,
            residual,
            wplus: wplus.shallow_clone(),
            w_edit: w_edit.shallow_clone(),
            g_w,
            g_e,
        })
    }

    /// Full inversion (and optional edit) of an image batch.
    pub fn forward(&self, x: &Tensor, edit: Option<&EditSpec>) -> Result<PipelineOutput> {
        let enc = self.encode(x)?;
        self.forward_encoded(&enc, edit)
    }

    pub fn forward_encoded(&self, enc: &EncoderOutputs, edit: Option<&EditSpec>) -> Result<PipelineOutput> {
        let w_edit = match edit {
            Some(spec) => apply_edit(&enc.wplus, spec)?,
            None => enc.wplus.shallow_clone(),
        };
        self.from_codes(&enc.f0, &enc.wplus, &w_edit)
    }
}
