//! The set of networks a run carries between stages, and their mapping onto
//! checkpoint prefixes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::attrnet::{AttrNet, AttrNetConfig};
use crate::checkpoint::CheckpointBundle;
use crate::encoders::{BaseEncoder, EncoderConfig, EncoderVariant, Pipeline, ResidualModules};
use crate::error::{Error, Result};
use crate::stylegen::{Discriminator, Generator, GeneratorConfig};

pub const ATTR: &str = "attr.";
pub const GEN: &str = "g.";
pub const DISC: &str = "d.";
pub const E0: &str = "e0.";
pub const RES: &str = "res.";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub generator: GeneratorConfig,
    pub encoder: EncoderConfig,
    pub attrnet: AttrNetConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.encoder.validate(&self.generator)
    }

    pub fn resolution(&self) -> usize {
        self.generator.resolution
    }

    /// Smallest sensible networks at R=32, for tests and smoke runs.
    pub fn tiny() -> Self {
        Self {
            generator: GeneratorConfig {
                resolution: 32,
                split_resolution: 16,
                channels: vec![32, 32, 16, 8],
                z_dim: 16,
                w_dim: 16,
                mapping_depth: 2,
            },
            encoder: EncoderConfig {
                c0: 8,
                e1_width: 16,
                e1_resblocks: 1,
                e2_resblocks: 1,
            },
            attrnet: AttrNetConfig {
                widths: [8, 8, 16, 16],
                embed_dim: 8,
            },
        }
    }
}

/// Networks present in a run. Absent members have not been trained yet.
#[derive(Default)]
pub struct Models {
    pub config: ModelConfig,
    pub variant: Option<EncoderVariant>,
    pub attr: Option<AttrNet>,
    pub g: Option<Generator>,
    pub d: Option<Discriminator>,
    pub e0: Option<BaseEncoder>,
    pub res: Option<ResidualModules>,
}

impl Models {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            ..Default::default()
        })
    }

    /// Rebuilds every network whose prefix appears in `bundle`.
    pub fn from_bundle(bundle: &CheckpointBundle) -> Result<Self> {
        let config: ModelConfig = serde_json::from_value(
            bundle
                .metadata
                .get("model")
                .cloned()
                .ok_or_else(|| Error::Integrity("checkpoint metadata lacks the model config".into()))?,
        )?;
        let mut m = Self::new(config)?;
        let cfg = m.config.clone();
        let r = cfg.resolution();
        if bundle.has_prefix(ATTR) {
            let mut net = AttrNet::new(&cfg.attrnet, r, 0)?;
            bundle.load_var_store(ATTR, net.var_store_mut())?;
            m.attr = Some(net);
        }
        if bundle.has_prefix(GEN) {
            let mut g = Generator::new(&cfg.generator, 0)?;
            bundle.load_var_store(GEN, g.var_store_mut())?;
            m.g = Some(g);
        }
        if bundle.has_prefix(DISC) {
            let mut d = Discriminator::new(&cfg.generator, 0)?;
            bundle.load_var_store(DISC, d.var_store_mut())?;
            m.d = Some(d);
        }
        if bundle.has_prefix(E0) {
            let mut e0 = BaseEncoder::new(&cfg.generator, &cfg.encoder, 0)?;
            bundle.load_var_store(E0, e0.var_store_mut())?;
            m.e0 = Some(e0);
        }
        if bundle.has_prefix(RES) {
            let variant: EncoderVariant = bundle
                .metadata
                .get("variant")
                .and_then(|v| v.as_str())
                .ok_or_else(|| Error::Integrity("residual modules stored without a variant".into()))?
                .parse()?;
            let mut res = ResidualModules::new(&cfg.generator, &cfg.encoder, variant, 0)?;
            bundle.load_var_store(RES, res.var_store_mut())?;
            m.res = Some(res);
            m.variant = Some(variant);
        }
        Ok(m)
    }

    pub fn refs(&self) -> NetRefs<'_> {
        NetRefs {
            config: &self.config,
            variant: self.variant,
            attr: self.attr.as_ref(),
            g: self.g.as_ref(),
            d: self.d.as_ref(),
            e0: self.e0.as_ref(),
            res: self.res.as_ref(),
        }
    }

    /// Stores all present networks; `metadata` is merged with the model
    /// config and variant.
    pub fn to_bundle(&self, metadata: serde_json::Value) -> Result<CheckpointBundle> {
        self.refs().to_bundle(metadata)
    }

    pub fn generator(&self) -> Result<&Generator> {
        self.g.as_ref().ok_or_else(|| missing("generator"))
    }

    pub fn discriminator(&self) -> Result<&Discriminator> {
        self.d.as_ref().ok_or_else(|| missing("discriminator"))
    }

    pub fn base_encoder(&self) -> Result<&BaseEncoder> {
        self.e0.as_ref().ok_or_else(|| missing("base encoder"))
    }

    pub fn attr_net(&self) -> Result<&AttrNet> {
        self.attr.as_ref().ok_or_else(|| missing("attribute network"))
    }

    /// Inference pipeline; `with_residual = false` gives plain W+ inversion.
    pub fn pipeline(&self, with_residual: bool) -> Result<Pipeline<'_>> {
        let residual = if with_residual {
            Some(self.res.as_ref().ok_or_else(|| missing("residual encoders"))?)
        } else {
            None
        };
        Ok(Pipeline::new(self.generator()?, self.base_encoder()?, residual))
    }
}

/// Borrowed set of networks, e.g. while a stage holds some of them mutably.
#[derive(Clone, Copy)]
pub struct NetRefs<'a> {
    pub config: &'a ModelConfig,
    pub variant: Option<EncoderVariant>,
    pub attr: Option<&'a AttrNet>,
    pub g: Option<&'a Generator>,
    pub d: Option<&'a Discriminator>,
    pub e0: Option<&'a BaseEncoder>,
    pub res: Option<&'a ResidualModules>,
}

impl NetRefs<'_> {
    pub fn to_bundle(&self, mut metadata: serde_json::Value) -> Result<CheckpointBundle> {
        if let Some(obj) = metadata.as_object_mut() {
            obj.insert("model".into(), serde_json::to_value(self.config)?);
            if let Some(v) = self.variant {
                obj.insert("variant".into(), json!(v.name()));
            }
        }
        let mut b = CheckpointBundle::new(metadata);
        if let Some(n) = self.attr {
            b.insert_var_store(ATTR, n.var_store())?;
        }
        if let Some(g) = self.g {
            b.insert_var_store(GEN, g.var_store())?;
        }
        if let Some(d) = self.d {
            b.insert_var_store(DISC, d.var_store())?;
        }
        if let Some(e) = self.e0 {
            b.insert_var_store(E0, e.var_store())?;
        }
        if let Some(r) = self.res {
            b.insert_var_store(RES, r.var_store())?;
        }
        Ok(b)
    }
}

fn missing(what: &str) -> Error {
    Error::Config(format!("checkpoint does not contain the {what}"))
}

/// Serializable position of a ChaCha stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::Integrity("corrupt RNG state".into());
        let seed: [u8; 32] = hex::decode(&self.seed).map_err(|_| bad())?.try_into().map_err(|_| bad())?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}
