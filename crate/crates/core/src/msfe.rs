//! Modal-specific feature encoders.
//!
//! Both branches share one hierarchical topology: a stride-4 patch embedding,
//! stride-2 merges between stages, learned absolute position embeddings and
//! pre-norm transformer blocks. The optical branch uses global attention with a
//! trainable adapter in front of every block and keeps everything else frozen;
//! the SAR branch uses (shifted) windowed attention and trains from scratch.

use mmcd_autograd::{Graph, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{from_tokens, to_tokens, Conv2d, Init, LayerNorm, Linear, ParamBuilder};

pub const NUM_SCALES: usize = 4;

/// Mask value for cross-region pairs inside a shifted window.
const SHIFT_MASK: f64 = -1e4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub depths: [usize; NUM_SCALES],
    pub head_dim: usize,
    pub mlp_ratio: usize,
    /// Square input size; position embeddings are tied to it.
    pub image_size: usize,
    /// Stride-4 stem kernel; odd kernels overlap neighbouring patches.
    pub patch_kernel: usize,
    /// `Some(ws)` selects windowed attention with shifts on odd blocks.
    pub window: Option<usize>,
    /// `Some(r)` inserts an adapter with reduction ratio `r` before each block.
    pub adapter_reduction: Option<usize>,
    /// Freeze every leaf except adapters.
    pub frozen_backbone: bool,
}

impl EncoderConfig {
    /// Desk-scale optical branch: global attention, adapters, frozen trunk.
    pub fn optical(image_size: usize, base_channels: usize) -> Self {
        Self {
            in_channels: 3,
            base_channels,
            depths: [1, 1, 2, 1],
            head_dim: 16,
            mlp_ratio: 2,
            image_size,
            patch_kernel: 7,
            window: None,
            adapter_reduction: Some(4),
            frozen_backbone: true,
        }
    }

    /// Desk-scale SAR branch: windowed attention, all leaves trainable.
    pub fn sar(image_size: usize, base_channels: usize) -> Self {
        Self {
            in_channels: 4,
            patch_kernel: 4,
            window: Some(4),
            adapter_reduction: None,
            frozen_backbone: false,
            ..Self::optical(image_size, base_channels)
        }
    }

    /// Full-size depths and widths (Hiera-B+-like optical, Swin-T-like SAR).
    pub fn full_scale(optical: bool, image_size: usize) -> Self {
        if optical {
            Self { depths: [2, 3, 16, 3], base_channels: 112, head_dim: 56, mlp_ratio: 4, ..Self::optical(image_size, 112) }
        } else {
            Self { depths: [2, 2, 6, 2], base_channels: 96, head_dim: 32, mlp_ratio: 4, window: Some(7), ..Self::sar(image_size, 96) }
        }
    }

    pub fn channels(&self, scale: usize) -> usize {
        self.base_channels << scale
    }

    /// Spatial side of scale `s` (stride `4·2^s`).
    pub fn side(&self, scale: usize) -> usize {
        self.image_size >> (scale + 2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % 32 != 0 {
            return Err(Error::Config(format!("image size {} must be a positive multiple of 32", self.image_size)));
        }
        if self.base_channels == 0 || self.head_dim == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("encoder widths must be positive".into()));
        }
        for s in 0..NUM_SCALES {
            let c = self.channels(s);
            if c % self.head_dim != 0 {
                return Err(Error::Config(format!("stage {s}: {c} channels not divisible by head dim {}", self.head_dim)));
            }
            if let Some(r) = self.adapter_reduction {
                if r == 0 || c % r != 0 {
                    return Err(Error::Config(format!("stage {s}: adapter reduction {r} does not divide {c}")));
                }
            }
        }
        if self.patch_kernel < 4 || (self.patch_kernel % 2 == 0 && self.patch_kernel != 4) {
            return Err(Error::Config(format!("patch kernel {} must be 4 or an odd size above 4", self.patch_kernel)));
        }
        if self.window == Some(0) {
            return Err(Error::Config("window size must be positive".into()));
        }
        Ok(())
    }
}

/// Bottleneck `x + up(GELU(down(x)))` with `up` zero-initialised.
#[derive(Clone, Debug)]
pub struct Adapter {
    pub down: Linear,
    pub up: Linear,
}

impl Adapter {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, name: &str, dim: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || dim % reduction != 0 {
            return Err(Error::Config(format!("adapter reduction {reduction} does not divide {dim}")));
        }
        let mut s = b.sub(name);
        let hidden = dim / reduction;
        Ok(Self { down: Linear::new(&mut s, "down", dim, hidden), up: Linear::with_init(&mut s, "up", hidden, dim, Init::Zeros) })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let c = *g.shape(x).last().unwrap_or(&0);
        if c != self.down.in_dim {
            return Err(Error::Shape(format!("adapter expects {} channels, got {c}", self.down.in_dim)));
        }
        let h = self.down.forward(g, x);
        let h = g.gelu(h);
        let h = self.up.forward(g, h);
        Ok(g.add(x, h))
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
    pub head_dim: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, name: &str, dim: usize, head_dim: usize) -> Result<Self> {
        if head_dim == 0 || dim % head_dim != 0 {
            return Err(Error::Config(format!("{dim} channels cannot be split into heads of {head_dim}")));
        }
        let mut s = b.sub(name);
        Ok(Self { qkv: Linear::new(&mut s, "qkv", dim, 3 * dim), proj: Linear::new(&mut s, "proj", dim, dim), heads: dim / head_dim, head_dim })
    }

    /// Self-attention over `x[B, N, C]`. `mask[G, N, N]` is added to the
    /// scores of sequence `b` at `mask[b % G]`. Returns the output and the
    /// attention weights `[B·heads, N, N]`.
    pub fn forward_with_weights<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, mask: Option<&Tensor<T>>) -> (Var, Var) {
        let s = g.shape(x).to_vec();
        let (b, n, c) = (s[0], s[1], s[2]);
        let (h, d) = (self.heads, self.head_dim);
        let qkv = self.qkv.forward(g, x);
        let qkv = g.reshape(qkv, &[b, n, 3, h, d]);
        let qkv = g.permute(qkv, &[2, 0, 3, 1, 4]);
        let mut parts = (0..3).map(|i| {
            let p = g.narrow(qkv, 0, i, 1);
            g.reshape(p, &[b * h, n, d])
        });
        let (q, k, v) = (parts.next().unwrap(), parts.next().unwrap(), parts.next().unwrap());
        let scores = g.bmm(q, k, true);
        let mut scores = g.scale(scores, T::from_f64(1.0 / (d as f64).sqrt()));
        if let Some(m) = mask {
            let groups = m.dim(0);
            let sc = g.reshape(scores, &[b / groups, groups, h, n, n]);
            let mc = g.constant(m.clone().reshape([1, groups, 1, n, n]));
            let sc = g.add(sc, mc);
            scores = g.reshape(sc, &[b * h, n, n]);
        }
        let attn = g.softmax(scores);
        let out = g.bmm(attn, v, false);
        let out = g.reshape(out, &[b, h, n, d]);
        let out = g.permute(out, &[0, 2, 1, 3]);
        let out = g.reshape(out, &[b, n, c]);
        (self.proj.forward(g, out), attn)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, mask: Option<&Tensor<T>>) -> Var {
        self.forward_with_weights(g, x, mask).0
    }
}

/// Pre-norm transformer block: `x + MHSA(LN(x))`, then `+ MLP(LN(·))`.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    /// `(window, shift)`; `None` means global attention.
    pub window: Option<(usize, usize)>,
}

impl AttentionBlock {
    pub fn new<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        dim: usize,
        head_dim: usize,
        mlp_ratio: usize,
        window: Option<(usize, usize)>,
    ) -> Result<Self> {
        let mut s = b.sub(name);
        Ok(Self {
            norm1: LayerNorm::new(&mut s, "norm1", dim),
            attn: MultiHeadAttention::new(&mut s, "attn", dim, head_dim)?,
            norm2: LayerNorm::new(&mut s, "norm2", dim),
            fc1: Linear::new(&mut s, "fc1", dim, dim * mlp_ratio),
            fc2: Linear::new(&mut s, "fc2", dim * mlp_ratio, dim),
            window,
        })
    }

    /// `x[B, H·W, C]` tokens of an `h × w` map.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, h: usize, w: usize) -> Var {
        let y = self.norm1.forward(g, x);
        let y = match self.window {
            None => self.attn.forward(g, y, None),
            Some((ws, shift)) => self.windowed(g, y, h, w, ws, shift),
        };
        let x = g.add(x, y);
        let y = self.norm2.forward(g, x);
        let y = self.fc1.forward(g, y);
        let y = g.gelu(y);
        let y = self.fc2.forward(g, y);
        g.add(x, y)
    }

    fn windowed<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, h: usize, w: usize, ws: usize, shift: usize) -> Var {
        let s = g.shape(x).to_vec();
        let (b, c) = (s[0], s[2]);
        let ws = ws.min(h).min(w);
        let shift = if h > ws && w > ws { shift % ws } else { 0 };
        let (nh, nw) = (h / ws, w / ws);
        let mut grid = g.reshape(x, &[b, h, w, c]);
        if shift > 0 {
            grid = g.roll(grid, &[0, -(shift as isize), -(shift as isize), 0]);
        }
        let parts = g.reshape(grid, &[b, nh, ws, nw, ws, c]);
        let parts = g.permute(parts, &[0, 1, 3, 2, 4, 5]);
        let windows = g.reshape(parts, &[b * nh * nw, ws * ws, c]);
        let mask = (shift > 0).then(|| shift_mask::<T>(h, w, ws, shift));
        let out = self.attn.forward(g, windows, mask.as_ref());
        let out = g.reshape(out, &[b, nh, nw, ws, ws, c]);
        let out = g.permute(out, &[0, 1, 3, 2, 4, 5]);
        let mut out = g.reshape(out, &[b, h, w, c]);
        if shift > 0 {
            out = g.roll(out, &[0, shift as isize, shift as isize, 0]);
        }
        g.reshape(out, &[b, h * w, c])
    }
}

/// Attention mask `[windows, ws², ws²]` that blocks pairs which were not
/// neighbours before the cyclic shift.
pub fn shift_mask<T: Scalar>(h: usize, w: usize, ws: usize, shift: usize) -> Tensor<T> {
    let region = |i: usize, n: usize| {
        if i < n - ws {
            0
        } else if i < n - shift {
            1
        } else {
            2
        }
    };
    let (nh, nw) = (h / ws, w / ws);
    let n = ws * ws;
    let mut m = Tensor::zeros([nh * nw, n, n]);
    for wi in 0..nh {
        for wj in 0..nw {
            let ids: Vec<usize> = (0..n).map(|p| region(wi * ws + p / ws, h) * 3 + region(wj * ws + p % ws, w)).collect();
            for a in 0..n {
                for bb in 0..n {
                    if ids[a] != ids[bb] {
                        m.set(&[wi * nw + wj, a, bb], T::from_f64(SHIFT_MASK));
                    }
                }
            }
        }
    }
    m
}

#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub adapter: Option<Adapter>,
    pub block: AttentionBlock,
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub embed: Conv2d,
    pub pos: mmcd_autograd::ParamId,
    pub blocks: Vec<EncoderBlock>,
    pub norm: LayerNorm,
    pub side: usize,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub stages: Vec<Stage>,
}

impl Encoder {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut stages = Vec::with_capacity(NUM_SCALES);
        for s in 0..NUM_SCALES {
            let c = config.channels(s);
            let side = config.side(s);
            let mut sb = b.sub(&format!("stage{s}"));
            let mut trunk = sb.with_frozen(config.frozen_backbone || sb.is_frozen());
            let embed = if s == 0 {
                let k = config.patch_kernel;
                Conv2d { pad: if k % 2 == 1 { k / 2 } else { 0 }, ..Conv2d::new(&mut trunk, "embed", config.in_channels, c, k, 4) }
            } else {
                Conv2d::new(&mut trunk, "embed", config.channels(s - 1), c, 2, 2)
            };
            let pos = trunk.weight("pos", &[1, side * side, c], Init::Normal(0.02));
            let mut blocks = Vec::with_capacity(config.depths[s]);
            for i in 0..config.depths[s] {
                let window = config.window.map(|ws| (ws, if i % 2 == 1 { ws / 2 } else { 0 }));
                let mut bb = trunk.sub(&format!("block{i}"));
                let block = AttentionBlock::new(&mut bb, "blk", c, config.head_dim, config.mlp_ratio, window)?;
                let adapter = match config.adapter_reduction {
                    Some(r) => Some(Adapter::new(&mut bb.with_frozen(false), "adapter", c, r)?),
                    None => None,
                };
                blocks.push(EncoderBlock { adapter, block });
            }
            let norm = LayerNorm::new(&mut trunk, "norm", c);
            stages.push(Stage { embed, pos, blocks, norm, side });
        }
        Ok(Self { config: config.clone(), stages })
    }

    /// `image[B, C_in, S, S]` to four feature maps `[B, C_s, S/2^{s+2}, S/2^{s+2}]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, image: Var) -> Result<Vec<Var>> {
        let s = g.shape(image).to_vec();
        let size = self.config.image_size;
        if s.len() != 4 || s[1] != self.config.in_channels {
            return Err(Error::Shape(format!("encoder expects [B, {}, H, W], got {s:?}", self.config.in_channels)));
        }
        if s[2] % 32 != 0 || s[3] % 32 != 0 {
            return Err(Error::Shape(format!("input {}x{} is not divisible by 32", s[2], s[3])));
        }
        if s[2] != size || s[3] != size {
            return Err(Error::Shape(format!("input {}x{} differs from configured size {size}", s[2], s[3])));
        }
        let mut x = image;
        let mut outs = Vec::with_capacity(NUM_SCALES);
        for stage in &self.stages {
            let fm = stage.embed.forward(g, x);
            let mut t = to_tokens(g, fm);
            let pos = g.param(stage.pos);
            t = g.add(t, pos);
            for blk in &stage.blocks {
                if let Some(a) = &blk.adapter {
                    t = a.forward(g, t)?;
                }
                t = blk.block.forward(g, t, stage.side, stage.side);
            }
            t = stage.norm.forward(g, t);
            x = from_tokens(g, t, stage.side, stage.side);
            outs.push(x);
        }
        Ok(outs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use mmcd_autograd::{gelu, ParamStore};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(config: &EncoderConfig, seed: u64) -> (Encoder, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = Encoder::new(&mut ParamBuilder::new(&mut store, &mut rng), config).unwrap();
        (enc, store)
    }

    fn image(c: usize, size: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn([1, c, size, size], |_| rand::Rng::random_range(&mut rng, 0.0..1.0))
    }

    #[test]
    fn scalar_adapter_matches_gelu() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = Adapter::new(&mut ParamBuilder::new(&mut store, &mut rng), "a", 1, 1).unwrap();
        *store.value_mut(a.down.weight) = Tensor::full([1, 1], 1.0);
        *store.value_mut(a.up.weight) = Tensor::full([1, 1], 1.0);
        let mut g = Graph::inference(&store);
        let x = g.input(Tensor::full([1, 1], 2.0));
        let y = a.forward(&mut g, x).unwrap();
        assert!((g.value(y).item() - (2.0 + gelu(2.0))).abs() < 1e-12);
        assert!((g.value(y).item() - 3.954499736103642).abs() < 1e-12);
    }

    #[test]
    fn adapter_is_identity_at_init_and_keeps_shape() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = Adapter::new(&mut ParamBuilder::new(&mut store, &mut rng), "a", 8, 4).unwrap();
        let mut g = Graph::inference(&store);
        let xt = Tensor::from_fn([16, 8], |i| (i as f64 * 0.37).sin());
        let x = g.input(xt.clone());
        let y = a.forward(&mut g, x).unwrap();
        assert_eq!(g.value(y), &xt);
        let bad = g.input(Tensor::zeros([4, 6]));
        assert!(matches!(a.forward(&mut g, bad), Err(Error::Shape(_))));
    }

    #[test]
    fn attention_edge_cases() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mha = MultiHeadAttention::new(&mut ParamBuilder::new(&mut store, &mut rng), "m", 8, 4).unwrap();
        let mut g = Graph::inference(&store);
        let one = g.input(Tensor::from_fn([1, 1, 8], |i| i as f64));
        let (_, w) = mha.forward_with_weights(&mut g, one, None);
        assert!(g.value(w).data().iter().all(|&v| v == 1.0));
        let row: Vec<f64> = (0..8).map(|i| i as f64 * 0.1).collect();
        let twin = g.input(Tensor::new([1, 2, 8], [row.clone(), row].concat()));
        let (_, w) = mha.forward_with_weights(&mut g, twin, None);
        assert!(g.value(w).data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
        let many = g.input(Tensor::from_fn([2, 5, 8], |i| (i as f64 * 0.71).cos()));
        let (_, w) = mha.forward_with_weights(&mut g, many, None);
        for r in g.value(w).data().chunks(5) {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        assert!(MultiHeadAttention::new(&mut ParamBuilder::new(&mut store, &mut rng), "bad", 8, 3).is_err());
    }

    #[test]
    fn zero_projections_give_identity_block() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let blk = AttentionBlock::new(&mut ParamBuilder::new(&mut store, &mut rng), "b", 8, 4, 2, None).unwrap();
        for id in [blk.attn.qkv.weight, blk.attn.proj.weight, blk.fc1.weight, blk.fc2.weight] {
            let shape = store.value(id).shape().to_vec();
            *store.value_mut(id) = Tensor::zeros(shape);
        }
        let mut g = Graph::inference(&store);
        let xt = Tensor::from_fn([1, 4, 8], |i| i as f64 - 3.0);
        let x = g.input(xt.clone());
        let y = blk.forward(&mut g, x, 2, 2);
        assert_eq!(g.value(y), &xt);
    }

    #[test]
    fn shifted_windows_match_explicit_masking() {
        // 8×8 map, window 4, shift 2: every token must attend only to tokens of
        // its own shifted window and region.
        let mask = shift_mask::<f64>(8, 8, 4, 2);
        assert_eq!(mask.shape(), &[4, 16, 16]);
        // window (0,0) holds no wrapped cells
        assert!(mask.narrow(0, 0, 1).data().iter().all(|&v| v == 0.0));
        // the last window mixes four regions of four cells each
        let last = mask.narrow(0, 3, 1);
        let blocked = last.data().iter().filter(|&&v| v < 0.0).count();
        assert_eq!(blocked, 16 * 16 - 4 * 16);
    }

    #[test]
    fn windowed_block_without_shift_equals_per_window_global_attention() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let blk = AttentionBlock::new(&mut ParamBuilder::new(&mut store, &mut rng), "b", 4, 4, 2, Some((2, 0))).unwrap();
        let global = AttentionBlock { window: None, ..blk.clone() };
        let xt = Tensor::from_fn([1, 16, 4], |i| ((i * 7) as f64 * 0.13).sin());
        let mut g = Graph::inference(&store);
        let x = g.input(xt.clone());
        let y = blk.forward(&mut g, x, 4, 4);
        let y = g.value(y).clone();
        // top-left window holds tokens (0,0),(0,1),(1,0),(1,1)
        let idx = [0usize, 1, 4, 5];
        let sub = Tensor::from_fn([1, 4, 4], |i| xt.data()[idx[i / 4] * 4 + i % 4]);
        let s = g.input(sub);
        let z = global.forward(&mut g, s, 2, 2);
        for (k, &t) in idx.iter().enumerate() {
            for c in 0..4 {
                assert!((y.data()[t * 4 + c] - g.value(z).data()[k * 4 + c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shifted_block_equals_attention_within_window_regions() {
        // Reference: group tokens by (shifted window, pre-shift region) and run
        // global attention inside each group.
        let (h, ws, shift) = (4usize, 2usize, 1usize);
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let shifted = AttentionBlock::new(&mut ParamBuilder::new(&mut store, &mut rng), "b", 4, 4, 2, Some((ws, shift))).unwrap();
        let global = AttentionBlock { window: None, ..shifted.clone() };
        let xt = Tensor::from_fn([1, h * h, 4], |i| ((i * 3) as f64 * 0.29).cos());
        let mut g = Graph::inference(&store);
        let x = g.input(xt.clone());
        let y = shifted.forward(&mut g, x, h, h);
        let y = g.value(y).clone();
        let region = |i: usize| if i < h - ws { 0 } else if i < h - shift { 1 } else { 2 };
        let key = |t: usize| {
            let (r, c) = ((t / h + h - shift) % h, (t % h + h - shift) % h);
            (r / ws, c / ws, region(r), region(c))
        };
        let mut keys: Vec<_> = (0..h * h).map(key).collect();
        keys.sort();
        keys.dedup();
        for k in keys {
            let members: Vec<usize> = (0..h * h).filter(|&t| key(t) == k).collect();
            let sub = Tensor::from_fn([1, members.len(), 4], |i| xt.data()[members[i / 4] * 4 + i % 4]);
            let s = g.input(sub);
            let z = global.forward(&mut g, s, 1, members.len());
            for (m, &t) in members.iter().enumerate() {
                for c in 0..4 {
                    assert!((y.data()[t * 4 + c] - g.value(z).data()[m * 4 + c]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn scale_shapes_at_desk_size() {
        for cfg in [EncoderConfig::optical(64, 16), EncoderConfig::sar(64, 16)] {
            let (enc, store) = build(&cfg, 0);
            let mut g = Graph::inference(&store);
            let x = g.input(image(cfg.in_channels, 64, 1));
            let outs = enc.forward(&mut g, x).unwrap();
            let shapes: Vec<Vec<usize>> = outs.iter().map(|&v| g.shape(v).to_vec()).collect();
            assert_eq!(shapes, vec![vec![1, 16, 16, 16], vec![1, 32, 8, 8], vec![1, 64, 4, 4], vec![1, 128, 2, 2]]);
            assert!(outs.iter().all(|&v| g.value(v).all_finite()));
        }
    }

    #[test]
    fn optical_branch_freezes_all_but_adapters() {
        let (_, store) = build(&EncoderConfig::optical(64, 16), 0);
        for (_, leaf) in store.iter() {
            assert_eq!(leaf.frozen, !leaf.name.contains(".adapter."), "{}", leaf.name);
        }
        let (_, store) = build(&EncoderConfig::sar(64, 16), 0);
        assert!(store.iter().all(|(_, l)| !l.frozen));
    }

    #[test]
    fn indivisible_input_is_a_shape_error() {
        let (enc, store) = build(&EncoderConfig::optical(64, 16), 0);
        let mut g = Graph::inference(&store);
        let x = g.input(Tensor::zeros([1, 3, 48, 48]));
        assert!(matches!(enc.forward(&mut g, x), Err(Error::Shape(_))));
    }

    #[test]
    fn forward_is_deterministic() {
        let (enc, store) = build(&EncoderConfig::sar(64, 16), 3);
        let run = || {
            let mut g = Graph::inference(&store);
            let x = g.input(image(4, 64, 9));
            let outs = enc.forward(&mut g, x).unwrap();
            outs.iter().map(|&v| g.value(v).clone()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
