//! Spatio-temporal common-feature modelling: a shared spatial attention map
//! recalibrates both modalities, then a two-layer graph convolution over the
//! pixel grid refines each modality.

use std::sync::Arc;

use mmcd_autograd::{Csr, Graph, Scalar, Var};

use crate::error::{Error, Result};
use crate::layers::{broadcast_last, from_tokens, to_tokens, BatchNorm2d, Conv2d, Init, Linear, ParamBuilder};

/// Feature interaction: `A = σ(BN(conv3×3([S_opt'; S_sar'])))` with unshared
/// 1×1 alignment convolutions, then `C_m = S_m' ⊙ A`.
#[derive(Clone, Debug)]
pub struct Fim {
    pub align_opt: Conv2d,
    pub align_sar: Conv2d,
    pub attn_conv: Conv2d,
    pub bn: BatchNorm2d,
}

pub struct FimOutput {
    pub common_opt: Var,
    pub common_sar: Var,
    /// `[B, 1, H, W]` in (0, 1).
    pub attention: Var,
}

impl Fim {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, name: &str, channels: usize) -> Self {
        let mut s = b.sub(name);
        Self {
            align_opt: Conv2d::new(&mut s, "align_opt", channels, channels, 1, 1),
            align_sar: Conv2d::new(&mut s, "align_sar", channels, channels, 1, 1),
            attn_conv: Conv2d::new(&mut s, "attn_conv", 2 * channels, 1, 3, 1),
            bn: BatchNorm2d::new(&mut s, "bn", 1),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, s_opt: Var, s_sar: Var) -> Result<FimOutput> {
        let (a, b) = (g.shape(s_opt).to_vec(), g.shape(s_sar).to_vec());
        if a.len() != 4 || a != b || a[1] != self.align_opt.in_channels {
            return Err(Error::Shape(format!("FIM inputs {a:?} and {b:?} must match [B, {}, H, W]", self.align_opt.in_channels)));
        }
        let o = self.align_opt.forward(g, s_opt);
        let s = self.align_sar.forward(g, s_sar);
        let attention = self.attention(g, o, s);
        let common_opt = g.mul(o, attention);
        let common_sar = g.mul(s, attention);
        Ok(FimOutput { common_opt, common_sar, attention })
    }

    /// Attention map from already-aligned features.
    pub fn attention<T: Scalar>(&self, g: &mut Graph<'_, T>, aligned_opt: Var, aligned_sar: Var) -> Var {
        let cat = g.concat(&[aligned_opt, aligned_sar], 1);
        let z = self.attn_conv.forward(g, cat);
        let z = self.bn.forward(g, z);
        g.sigmoid(z)
    }
}

/// Renormalised grid adjacency `D̃^{-1/2}(A + I)D̃^{-1/2}` over `H·W` nodes.
#[derive(Clone, Debug)]
pub struct GridAdjacency<T: Scalar> {
    pub height: usize,
    pub width: usize,
    pub connectivity: usize,
    pub matrix: Arc<Csr<T>>,
}

pub fn build_grid_adjacency<T: Scalar>(height: usize, width: usize, connectivity: usize) -> Result<GridAdjacency<T>> {
    if height * width == 0 {
        return Err(Error::InvalidArgument("grid must have at least one node".into()));
    }
    let offsets: &[(isize, isize)] = match connectivity {
        4 => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
        8 => &[(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)],
        _ => return Err(Error::InvalidArgument(format!("connectivity {connectivity} (expected 4 or 8)"))),
    };
    let n = height * width;
    let mut neighbours: Vec<Vec<usize>> = vec![Vec::new(); n];
    for r in 0..height as isize {
        for c in 0..width as isize {
            let i = (r * width as isize + c) as usize;
            neighbours[i].push(i);
            for &(dr, dc) in offsets {
                let (rr, cc) = (r + dr, c + dc);
                if rr >= 0 && cc >= 0 && rr < height as isize && cc < width as isize {
                    neighbours[i].push((rr * width as isize + cc) as usize);
                }
            }
        }
    }
    let degree: Vec<f64> = neighbours.iter().map(|nb| nb.len() as f64).collect();
    let triplets = neighbours
        .iter()
        .enumerate()
        .flat_map(|(i, nb)| nb.iter().map(move |&j| (i, j)))
        .map(|(i, j)| (i, j, T::from_f64(1.0 / (degree[i] * degree[j]).sqrt())))
        .collect();
    Ok(GridAdjacency { height, width, connectivity, matrix: Arc::new(Csr::from_triplets(n, n, triplets)) })
}

/// Graph-structure feature modelling for one modality:
/// `h₁ = Â(XW₁) + b₁`, `r = h₁ − X`, `out = ReLU(Â(rW₂) + b₂)`, then a 3×3
/// convolutional refinement.
#[derive(Clone, Debug)]
pub struct Gsfm {
    pub layer1: Linear,
    pub layer2: Linear,
    pub refine: Conv2d,
}

impl Gsfm {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, name: &str, channels: usize) -> Self {
        let mut s = b.sub(name);
        let bound = (3.0 / channels as f64).sqrt();
        Self {
            layer1: Linear::with_init(&mut s, "gc1", channels, channels, Init::Uniform(bound)),
            layer2: Linear::with_init(&mut s, "gc2", channels, channels, Init::Uniform(bound)),
            refine: Conv2d::new(&mut s, "refine", channels, channels, 3, 1),
        }
    }

    /// Two graph-convolution layers on `x[B, C, H, W]`; no refinement.
    pub fn graph_stage<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, adj: &GridAdjacency<T>) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.layer1.in_dim {
            return Err(Error::Shape(format!("GSFM expects [B, {}, H, W], got {s:?}", self.layer1.in_dim)));
        }
        if s[2] * s[3] != adj.height * adj.width {
            return Err(Error::Shape(format!("{} nodes vs adjacency over {}", s[2] * s[3], adj.height * adj.width)));
        }
        let tokens = to_tokens(g, x);
        let h1 = self.aggregate(g, &self.layer1, tokens, adj);
        let r = g.sub(h1, tokens);
        let h2 = self.aggregate(g, &self.layer2, r, adj);
        let h2 = g.relu(h2);
        Ok(from_tokens(g, h2, s[2], s[3]))
    }

    fn aggregate<T: Scalar>(&self, g: &mut Graph<'_, T>, layer: &Linear, x: Var, adj: &GridAdjacency<T>) -> Var {
        let w = g.param(layer.weight);
        let xw = g.matmul(x, w);
        let agg = g.spmm(adj.matrix.clone(), xw);
        let b = g.param(layer.bias);
        let b = broadcast_last(g, b, 3);
        g.add(agg, b)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, adj: &GridAdjacency<T>) -> Result<Var> {
        let y = self.graph_stage(g, x, adj)?;
        Ok(self.refine.forward(g, y))
    }
}

/// Per-scale common-feature module. GSFM is optional (ablation) and, when
/// `pool` is set, runs on a 2×-average-pooled grid before bilinear upsampling.
#[derive(Clone, Debug)]
pub struct Stcfm<T: Scalar> {
    pub fim: Fim,
    pub gsfm: Option<(Gsfm, Gsfm)>,
    pub adjacency: Option<GridAdjacency<T>>,
    pub pool: bool,
}

impl<T: Scalar> Stcfm<T> {
    /// FIM only.
    pub fn new(b: &mut ParamBuilder<'_, T>, channels: usize) -> Self {
        Self { fim: Fim::new(b, "fim", channels), gsfm: None, adjacency: None, pool: false }
    }

    /// Adds per-modality GSFM over a `side × side` grid (halved when `pool`).
    pub fn add_gsfm(&mut self, b: &mut ParamBuilder<'_, T>, channels: usize, side: usize, pool: bool, connectivity: usize) -> Result<()> {
        let grid = if pool { (side / 2).max(1) } else { side };
        self.adjacency = Some(build_grid_adjacency(grid, grid, connectivity)?);
        self.gsfm = Some((Gsfm::new(b, "gsfm_opt", channels), Gsfm::new(b, "gsfm_sar", channels)));
        self.pool = pool;
        Ok(())
    }

    /// Returns `(C_opt, C_sar, A)`.
    pub fn forward(&self, g: &mut Graph<'_, T>, s_opt: Var, s_sar: Var) -> Result<(Var, Var, Var)> {
        let f = self.fim.forward(g, s_opt, s_sar)?;
        let (Some((go, gs)), Some(adj)) = (&self.gsfm, &self.adjacency) else {
            return Ok((f.common_opt, f.common_sar, f.attention));
        };
        let c_opt = self.graph(g, go, f.common_opt, adj)?;
        let c_sar = self.graph(g, gs, f.common_sar, adj)?;
        Ok((c_opt, c_sar, f.attention))
    }

    fn graph(&self, g: &mut Graph<'_, T>, gsfm: &Gsfm, x: Var, adj: &GridAdjacency<T>) -> Result<Var> {
        let y = if self.pool {
            let p = g.avg_pool2(x);
            let y = gsfm.graph_stage(g, p, adj)?;
            g.upsample_bilinear(y, 2)
        } else {
            gsfm.graph_stage(g, x, adj)?
        };
        Ok(gsfm.refine.forward(g, y))
    }
}
