//! Frozen semantic prior generator.
//!
//! The trunk reuses the optical encoder topology without adapters; its weights
//! derive from a fixed seed unless replaced through
//! [`PriorGenerator::load_external_prior_weights`]. SAR input passes through a
//! fixed 4→3 channel mapping so both modalities share the trunk.

use std::path::Path;

use mmcd_autograd::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{config_hash, Checkpoint};
use crate::error::{Error, Result};
use crate::layers::ParamBuilder;
use crate::msfe::{Encoder, EncoderConfig, NUM_SCALES};

pub const DEFAULT_SPG_SEED: u64 = 0x5350_4720_5345_4544;
pub const SPG_PREFIX: &str = "spg";

/// HH, (HV + VH)/2, VV.
pub const SAR_TO_RGB: [[f64; 4]; 3] = [[1.0, 0.0, 0.0, 0.0], [0.0, 0.5, 0.5, 0.0], [0.0, 0.0, 0.0, 1.0]];

/// Architecture of the prior trunk; its hash guards external weight files.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpgConfig {
    pub image_size: usize,
    pub base_channels: usize,
    pub depths: [usize; NUM_SCALES],
    pub head_dim: usize,
    pub mlp_ratio: usize,
}

impl SpgConfig {
    pub fn desk(image_size: usize, base_channels: usize) -> Self {
        let e = EncoderConfig::optical(image_size, base_channels);
        Self { image_size, base_channels, depths: e.depths, head_dim: e.head_dim, mlp_ratio: e.mlp_ratio }
    }

    fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            in_channels: 3,
            base_channels: self.base_channels,
            depths: self.depths,
            head_dim: self.head_dim,
            mlp_ratio: self.mlp_ratio,
            image_size: self.image_size,
            patch_kernel: 7,
            window: None,
            adapter_reduction: None,
            frozen_backbone: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Spg {
    pub config: SpgConfig,
    pub trunk: Encoder,
    pub sar_proj: ParamId,
}

impl Spg {
    /// Registers the frozen leaves under `b`'s prefix, drawing from `seed` only.
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, config: &SpgConfig, seed: u64) -> Result<Self> {
        b.reseeded(seed, |b| {
            let mut b = b.with_frozen(true);
            let trunk = Encoder::new(&mut b.sub("trunk"), &config.encoder())?;
            let w: Vec<f64> = SAR_TO_RGB.iter().flatten().copied().collect();
            let sar_proj = b.sub("sar_proj").buffer("weight", Tensor::from_f64([3, 4, 1, 1], &w));
            Ok(Self { config: config.clone(), trunk, sar_proj })
        })
    }

    /// Four prior maps for a 3-channel optical or 4-channel SAR batch.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, image: Var) -> Result<Vec<Var>> {
        let s = g.shape(image).to_vec();
        let x = match s.get(1) {
            Some(3) if s.len() == 4 => image,
            Some(4) if s.len() == 4 => {
                let w = g.param(self.sar_proj);
                g.conv2d(image, w, None, 1, 0)
            }
            _ => return Err(Error::Shape(format!("prior generator takes [B, 3|4, H, W], got {s:?}"))),
        };
        self.trunk.forward(g, x)
    }

    pub fn hash(&self) -> String {
        config_hash(&self.config)
    }

    pub fn is_leaf(name: &str) -> bool {
        name.starts_with("spg.")
    }
}

/// Stand-alone prior generator owning its parameters.
pub struct PriorGenerator<T: Scalar> {
    pub spg: Spg,
    pub store: ParamStore<T>,
}

impl<T: Scalar> PriorGenerator<T> {
    pub fn new(config: &SpgConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spg = Spg::new(&mut ParamBuilder::new(&mut store, &mut rng).sub(SPG_PREFIX), config, seed)?;
        Ok(Self { spg, store })
    }

    /// Priors for `image[C, H, W]` or `[B, C, H, W]`; inference only.
    pub fn generate(&self, image: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let image = if image.rank() == 3 {
            let mut s = vec![1];
            s.extend_from_slice(image.shape());
            image.clone().reshape(s)
        } else {
            image.clone()
        };
        let mut g = Graph::inference(&self.store);
        let x = g.input(image);
        let outs = self.spg.forward(&mut g, x)?;
        Ok(outs.into_iter().map(|v| g.value(v).clone()).collect())
    }

    pub fn save_weights(&self, path: &Path) -> Result<()> {
        Checkpoint::capture(&self.store, &self.spg.config, Spg::is_leaf).save(path)
    }

    /// Replaces the seed-derived weights with a checkpoint of the same
    /// architecture. Frozen flags stay set; on error nothing changes.
    pub fn load_external_prior_weights(&mut self, path: &Path) -> Result<()> {
        let ck = Checkpoint::load(path)?;
        ck.restore_into(&mut self.store, &self.spg.hash(), Spg::is_leaf)
    }
}
