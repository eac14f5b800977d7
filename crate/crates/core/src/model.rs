//! Full change-detection network and its ablation variants.

use std::path::Path;

use mmcd_autograd::{Graph, ParamStore, Scalar, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{config_hash, Checkpoint};
use crate::error::{Error, Result};
use crate::head::Decoder;
use crate::layers::ParamBuilder;
use crate::msfe::{Encoder, EncoderConfig, NUM_SCALES};
use crate::pgffm::{prior_distance, FusionMode, FusionPath, FusionScale};
use crate::spg::{Spg, SpgConfig, DEFAULT_SPG_SEED, SPG_PREFIX};
use crate::stcfm::Stcfm;
use crate::synth::{derive_seed, NUM_CHANGE_CLASSES};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Baseline,
    V1,
    V2,
    #[default]
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Baseline, Variant::V1, Variant::V2, Variant::Full];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::V1 => "v1",
            Variant::V2 => "v2",
            Variant::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| {
            Error::Config(format!("unknown variant {s:?}; valid variants: baseline, v1, v2, full"))
        })
    }

    pub fn flags(self) -> VariantFlags {
        let (use_fim, use_gsfm, use_pgffm) = match self {
            Variant::Baseline => (false, false, false),
            Variant::V1 => (true, false, false),
            Variant::V2 => (true, true, false),
            Variant::Full => (true, true, true),
        };
        VariantFlags { use_fim, use_gsfm, use_pgffm }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VariantFlags {
    pub use_fim: bool,
    pub use_gsfm: bool,
    pub use_pgffm: bool,
}

impl VariantFlags {
    pub fn to_variant(self) -> Result<Variant> {
        if self.use_gsfm && !self.use_fim {
            return Err(Error::Config("GSFM consumes FIM output: use_gsfm requires use_fim".into()));
        }
        Variant::ALL
            .into_iter()
            .find(|v| v.flags() == self)
            .ok_or_else(|| Error::Config(format!("flag combination {self:?} is not one of the ablation variants")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub fusion_mode: FusionMode,
    pub optical: EncoderConfig,
    pub sar: EncoderConfig,
    pub spg: SpgConfig,
    pub spg_seed: u64,
    pub decoder_dim: usize,
    pub num_classes: usize,
    pub projector_hidden: usize,
    pub connectivity: usize,
    /// Run the finest-scale graph stage on a 2× pooled grid.
    pub pool_first_scale: bool,
}

impl ModelConfig {
    pub fn desk(variant: Variant) -> Self {
        Self::with_size(variant, 64, 16)
    }

    pub fn with_size(variant: Variant, image_size: usize, base_channels: usize) -> Self {
        Self {
            variant,
            fusion_mode: FusionMode::GatedSum,
            optical: EncoderConfig::optical(image_size, base_channels),
            sar: EncoderConfig::sar(image_size, base_channels),
            spg: SpgConfig::desk(image_size, base_channels),
            spg_seed: DEFAULT_SPG_SEED,
            decoder_dim: 32,
            num_classes: NUM_CHANGE_CLASSES,
            projector_hidden: 8,
            connectivity: 8,
            pool_first_scale: true,
        }
    }

    /// Full-size encoder depths and widths; not exercised by the test suite.
    pub fn full_scale(variant: Variant, image_size: usize) -> Self {
        let optical = EncoderConfig::full_scale(true, image_size);
        let sar = EncoderConfig { base_channels: optical.base_channels, head_dim: optical.head_dim, ..EncoderConfig::full_scale(false, image_size) };
        let spg = SpgConfig {
            image_size,
            base_channels: optical.base_channels,
            depths: optical.depths,
            head_dim: optical.head_dim,
            mlp_ratio: optical.mlp_ratio,
        };
        Self { optical, sar, spg, decoder_dim: 256, ..Self::with_size(variant, image_size, 112) }
    }

    pub fn image_size(&self) -> usize {
        self.optical.image_size
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.optical.validate()?;
        self.sar.validate()?;
        if self.optical.in_channels != 3 || self.sar.in_channels != 4 {
            return Err(Error::Config("optical input has 3 channels and SAR input 4".into()));
        }
        if self.optical.image_size != self.sar.image_size || self.spg.image_size != self.optical.image_size {
            return Err(Error::Config("encoders and prior generator must share the image size".into()));
        }
        if (0..NUM_SCALES).any(|s| self.optical.channels(s) != self.sar.channels(s)) {
            return Err(Error::Config("optical and SAR pyramids must have equal widths".into()));
        }
        if self.num_classes < 2 || self.decoder_dim == 0 || self.projector_hidden == 0 {
            return Err(Error::Config("num_classes ≥ 2 and positive decoder/projector widths required".into()));
        }
        if self.connectivity != 4 && self.connectivity != 8 {
            return Err(Error::Config(format!("connectivity {} (expected 4 or 8)", self.connectivity)));
        }
        Ok(())
    }
}

pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub optical: Encoder,
    pub sar: Encoder,
    pub spg: Option<Spg>,
    pub stcfm: Vec<Stcfm<T>>,
    pub fusion: Vec<FusionScale>,
    pub decoder: Decoder,
}

pub struct ModelOutput {
    /// `[B, K, H, W]`.
    pub logits: Var,
    /// Change-intensity maps per scale, when the variant is gated.
    pub gates: Vec<Var>,
    /// FIM attention maps per scale, when present.
    pub attention: Vec<Var>,
}

impl<T: Scalar> Model<T> {
    /// Builds the network and its parameters. Each module draws from its own
    /// stream derived from `seed`, so modules shared between variants start
    /// from identical weights.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        config.validate()?;
        let flags = config.variant.flags();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = ParamBuilder::new(&mut store, &mut rng);
        let optical = b.reseeded(derive_seed(seed, 1), |b| Encoder::new(&mut b.sub("opt"), &config.optical))?;
        let sar = b.reseeded(derive_seed(seed, 2), |b| Encoder::new(&mut b.sub("sar"), &config.sar))?;
        let spg = if flags.use_pgffm { Some(Spg::new(&mut b.sub(SPG_PREFIX), &config.spg, config.spg_seed)?) } else { None };
        let path = match (flags.use_fim, flags.use_pgffm) {
            (false, _) => FusionPath::Specific,
            (true, false) => FusionPath::Sum,
            (true, true) => FusionPath::Gated(config.fusion_mode),
        };
        let mut stcfm = Vec::new();
        let mut fusion = Vec::with_capacity(NUM_SCALES);
        for s in 0..NUM_SCALES {
            let c = config.optical.channels(s);
            let side = config.optical.side(s);
            if flags.use_fim {
                let name = format!("stcfm{s}");
                let mut m = b.reseeded(derive_seed(seed, 10 + s as u64), |b| Stcfm::new(&mut b.sub(&name), c));
                if flags.use_gsfm {
                    let pool = s == 0 && config.pool_first_scale;
                    b.reseeded(derive_seed(seed, 20 + s as u64), |b| m.add_gsfm(&mut b.sub(&name), c, side, pool, config.connectivity))?;
                }
                stcfm.push(m);
            }
            fusion.push(b.reseeded(derive_seed(seed, 30 + s as u64), |b| {
                FusionScale::new(&mut b.sub(&format!("fusion{s}")), c, path, config.projector_hidden)
            }));
        }
        let widths: Vec<usize> = (0..NUM_SCALES).map(|s| config.optical.channels(s)).collect();
        let decoder = b.reseeded(derive_seed(seed, 40), |b| Decoder::new(b, &widths, config.decoder_dim, config.num_classes));
        drop(b);
        Ok((Self { config: config.clone(), optical, sar, spg, stcfm, fusion, decoder }, store))
    }

    /// Names of the pipeline stages, in execution order.
    pub fn stages(&self) -> Vec<&'static str> {
        let f = self.config.variant.flags();
        let mut v = vec!["msfe.optical", "msfe.sar"];
        if f.use_pgffm {
            v.push("spg");
        }
        if f.use_fim {
            v.push("stcfm.fim");
        }
        if f.use_gsfm {
            v.push("stcfm.gsfm");
        }
        v.push(match self.fusion[0].path {
            FusionPath::Specific => "diff.specific",
            FusionPath::Sum => "diff.dual_sum",
            FusionPath::Gated(FusionMode::GatedSum) => "pgffm.gated_sum",
            FusionPath::Gated(FusionMode::Concat) => "pgffm.concat",
        });
        v.push("decoder");
        v
    }

    pub fn needs_priors(&self) -> bool {
        self.spg.is_some()
    }

    /// Per-scale prior distances `[B, 1, h, w]` for a batch; empty when the
    /// variant has no prior generator. Always evaluated in inference mode.
    pub fn prior_distances(&self, store: &ParamStore<T>, optical: &Tensor<T>, sar: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let Some(spg) = &self.spg else { return Ok(Vec::new()) };
        let mut g = Graph::inference(store);
        let (o, s) = (g.input(optical.clone()), g.input(sar.clone()));
        let po = spg.forward(&mut g, o)?;
        let ps = spg.forward(&mut g, s)?;
        po.iter().zip(&ps).map(|(&a, &b)| prior_distance(g.value(a), g.value(b))).collect()
    }

    /// `optical[B, 3, S, S]`, `sar[B, 4, S, S]`; `distances` come from
    /// [`Model::prior_distances`] and are computed here when absent.
    pub fn forward(&self, g: &mut Graph<'_, T>, optical: Var, sar: Var, distances: Option<&[Tensor<T>]>) -> Result<ModelOutput> {
        let so = self.optical.forward(g, optical)?;
        let ss = self.sar.forward(g, sar)?;
        let dist: Vec<Var> = match (&self.spg, distances) {
            (None, _) => Vec::new(),
            (Some(_), Some(d)) => {
                if d.len() != NUM_SCALES {
                    return Err(Error::Shape(format!("expected {NUM_SCALES} prior distance maps, got {}", d.len())));
                }
                d.iter().map(|t| g.constant(t.clone())).collect()
            }
            (Some(_), None) => {
                let (o, s) = (g.value(optical).clone(), g.value(sar).clone());
                self.prior_distances(g.params(), &o, &s)?.into_iter().map(|t| g.constant(t)).collect()
            }
        };
        let mut fused = Vec::with_capacity(NUM_SCALES);
        let mut gates = Vec::new();
        let mut attention = Vec::new();
        for s in 0..NUM_SCALES {
            let common = match self.stcfm.get(s) {
                Some(m) => {
                    let (co, cs, a) = m.forward(g, so[s], ss[s])?;
                    attention.push(a);
                    Some((co, cs))
                }
                None => None,
            };
            let out = self.fusion[s].forward(g, so[s], ss[s], common, dist.get(s).copied())?;
            gates.extend(out.gate);
            fused.push(out.fused);
        }
        let logits = self.decoder.forward(g, &fused)?;
        Ok(ModelOutput { logits, gates, attention })
    }

    pub fn save(&self, store: &ParamStore<T>, path: &Path) -> Result<()> {
        Checkpoint::capture(store, &self.config, |_| true).save(path)
    }

    /// Restores every leaf from a checkpoint written for this exact configuration.
    pub fn restore(&self, store: &mut ParamStore<T>, path: &Path) -> Result<()> {
        Checkpoint::load(path)?.restore_into(store, &self.config.hash(), |_| true)
    }

    /// Rebuilds the model recorded in a checkpoint header and restores its leaves.
    pub fn load(path: &Path) -> Result<(Self, ParamStore<T>)> {
        let ck = Checkpoint::load(path)?;
        let config: ModelConfig = serde_json::from_value(ck.header.model_config.clone())
            .map_err(|e| Error::IncompatibleCheckpoint(format!("unreadable model configuration: {e}")))?;
        let (model, mut store) = Self::build(&config, 0).map_err(|e| Error::IncompatibleCheckpoint(e.to_string()))?;
        ck.restore_into(&mut store, &config.hash(), |_| true)?;
        Ok((model, store))
    }

    /// Replaces the prior generator's weights from an SPG checkpoint.
    pub fn load_external_prior_weights(&self, store: &mut ParamStore<T>, path: &Path) -> Result<()> {
        let spg = self.spg.as_ref().ok_or_else(|| Error::Config(format!("variant {} has no prior generator", self.config.variant.name())))?;
        Checkpoint::load(path)?.restore_into(store, &spg.hash(), Spg::is_leaf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_flags_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.flags().to_variant().unwrap(), v);
            assert_eq!(Variant::parse(v.name()).unwrap(), v);
        }
        let bad = VariantFlags { use_fim: false, use_gsfm: true, use_pgffm: false };
        assert!(matches!(bad.to_variant(), Err(Error::Config(_))));
        assert!(matches!(Variant::parse("v3"), Err(Error::Config(_))));
    }

    #[test]
    fn stage_lists_and_parameter_trees() {
        let build = |v| Model::<f32>::build(&ModelConfig::desk(v), 0).unwrap();
        let (full, full_store) = build(Variant::Full);
        let (base, base_store) = build(Variant::Baseline);
        let (_, v1) = build(Variant::V1);
        let (_, v2) = build(Variant::V2);
        for s in ["stcfm.fim", "stcfm.gsfm", "pgffm.gated_sum", "spg"] {
            assert!(full.stages().contains(&s));
        }
        assert!(!base.stages().contains(&"stcfm.fim"));
        assert_ne!(full_store.count_scalars(|_| true), base_store.count_scalars(|_| true));
        let names = |s: &ParamStore<f32>| s.iter().map(|(_, l)| l.name.clone()).collect::<Vec<_>>();
        let (n1, n2) = (names(&v1), names(&v2));
        assert!(n1.iter().all(|n| n2.contains(n)));
        assert!(n2.iter().filter(|n| !n1.contains(n)).all(|n| n.contains(".gsfm_")));
        for n in &n1 {
            let (a, b) = (v1.value(v1.id(n).unwrap()), v2.value(v2.id(n).unwrap()));
            assert_eq!(a, b, "{n} differs between variants");
        }
    }
}
