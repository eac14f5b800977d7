//! Prior-guided fusion: a change-intensity gate from frozen prior pyramids
//! blends the modality-specific and common difference paths.

use mmcd_autograd::{Graph, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Conv2d, Init, ParamBuilder};

/// Per-pixel Euclidean distance over channels of `[.., C, H, W]` tensors;
/// the channel axis collapses to 1.
pub fn prior_distance<T: Scalar>(p_opt: &Tensor<T>, p_sar: &Tensor<T>) -> Result<Tensor<T>> {
    let s = p_opt.shape();
    if s != p_sar.shape() || s.len() < 3 {
        return Err(Error::Shape(format!("prior shapes {s:?} and {:?} differ", p_sar.shape())));
    }
    let r = s.len();
    let (c, hw) = (s[r - 3], s[r - 2] * s[r - 1]);
    let outer = p_opt.numel() / (c * hw);
    let mut out_shape = s.to_vec();
    out_shape[r - 3] = 1;
    let (a, b) = (p_opt.data(), p_sar.data());
    let data = (0..outer * hw)
        .map(|k| {
            let (o, i) = (k / hw, k % hw);
            let sq: T = (0..c)
                .map(|ch| {
                    let d = a[(o * c + ch) * hw + i] - b[(o * c + ch) * hw + i];
                    d * d
                })
                .sum();
            sq.sqrt()
        })
        .collect();
    Ok(Tensor::new(out_shape, data))
}

/// `M = σ(conv₂(ReLU(conv₁(D))))`, 3×3 kernels, `conv₂` zero-initialised.
#[derive(Clone, Debug)]
pub struct PriorProjector {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl PriorProjector {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, name: &str, hidden: usize) -> Self {
        let mut s = b.sub(name);
        Self { conv1: Conv2d::relu(&mut s, "conv1", 1, hidden, 3, 1), conv2: Conv2d::with_init(&mut s, "conv2", hidden, 1, 3, 1, Init::Zeros) }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, distance: Var) -> Var {
        let h = self.conv1.forward(g, distance);
        let h = g.relu(h);
        let z = self.conv2.forward(g, h);
        g.sigmoid(z)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// `G = M ⊙ F_s + (1 − M) ⊙ F_c`.
    #[default]
    GatedSum,
    /// `[M ⊙ F_s ; (1 − M) ⊙ F_c]` along channels.
    Concat,
}

#[derive(Clone, Copy, Debug)]
pub struct DualPathDiffs {
    pub specific: Var,
    pub common: Var,
}

/// `F_s = proj(S_opt) − proj(S_sar)` with one shared 1×1 projection, and
/// `F_c = C_opt − C_sar`.
pub fn dual_path_diff<T: Scalar>(
    g: &mut Graph<'_, T>,
    proj: &Conv2d,
    s_opt: Var,
    s_sar: Var,
    c_opt: Var,
    c_sar: Var,
) -> Result<DualPathDiffs> {
    let specific = specific_diff(g, proj, s_opt, s_sar)?;
    if g.shape(c_opt) != g.shape(c_sar) || g.shape(c_opt) != g.shape(specific) {
        return Err(Error::Shape(format!(
            "common features {:?}/{:?} do not match the specific path {:?}",
            g.shape(c_opt),
            g.shape(c_sar),
            g.shape(specific)
        )));
    }
    let common = g.sub(c_opt, c_sar);
    Ok(DualPathDiffs { specific, common })
}

pub fn specific_diff<T: Scalar>(g: &mut Graph<'_, T>, proj: &Conv2d, s_opt: Var, s_sar: Var) -> Result<Var> {
    let (a, b) = (g.shape(s_opt).to_vec(), g.shape(s_sar).to_vec());
    if a != b || a.len() != 4 || a[1] != proj.in_channels {
        return Err(Error::Shape(format!("specific features {a:?} and {b:?} must match [B, {}, H, W]", proj.in_channels)));
    }
    let po = proj.forward(g, s_opt);
    let ps = proj.forward(g, s_sar);
    Ok(g.sub(po, ps))
}

fn check_gate<T: Scalar>(g: &Graph<'_, T>, m: Var, d: &DualPathDiffs) -> Result<()> {
    let (ms, fs, fc) = (g.shape(m), g.shape(d.specific), g.shape(d.common));
    if fs != fc || ms.len() != 4 || ms[1] != 1 || ms[0] != fs[0] || ms[2..] != fs[2..] {
        return Err(Error::Shape(format!("gate {ms:?} incompatible with paths {fs:?}/{fc:?}")));
    }
    Ok(())
}

/// Pre-refinement gated sum `M ⊙ F_s + (1 − M) ⊙ F_c`, `M` broadcast over channels.
pub fn gated_fuse<T: Scalar>(g: &mut Graph<'_, T>, m: Var, d: &DualPathDiffs) -> Result<Var> {
    check_gate(g, m, d)?;
    let a = g.mul(m, d.specific);
    let om = g.one_minus(m);
    let b = g.mul(om, d.common);
    Ok(g.add(a, b))
}

/// Pre-refinement channel concatenation of the two weighted paths.
pub fn gated_concat<T: Scalar>(g: &mut Graph<'_, T>, m: Var, d: &DualPathDiffs) -> Result<Var> {
    check_gate(g, m, d)?;
    let a = g.mul(m, d.specific);
    let om = g.one_minus(m);
    let b = g.mul(om, d.common);
    Ok(g.concat(&[a, b], 1))
}

/// How the per-scale difference is formed; chosen by the model variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionPath {
    /// `F_s` alone.
    Specific,
    /// Ungated `F_s + F_c`.
    Sum,
    /// Prior-gated combination.
    Gated(FusionMode),
}

/// Per-scale fusion: difference paths, optional gate and a 3×3 conv + ReLU refinement.
#[derive(Clone, Debug)]
pub struct FusionScale {
    pub path: FusionPath,
    pub specific_proj: Conv2d,
    pub projector: Option<PriorProjector>,
    pub refine: Conv2d,
}

pub struct FusionOutput {
    pub fused: Var,
    pub gate: Option<Var>,
}

impl FusionScale {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, channels: usize, path: FusionPath, hidden: usize) -> Self {
        let specific_proj = Conv2d::new(b, "specific_proj", channels, channels, 1, 1);
        let projector = matches!(path, FusionPath::Gated(_)).then(|| PriorProjector::new(b, "prior_proj", hidden));
        let refine_in = if path == FusionPath::Gated(FusionMode::Concat) { 2 * channels } else { channels };
        let refine = Conv2d::relu(b, "refine", refine_in, channels, 3, 1);
        Self { path, specific_proj, projector, refine }
    }

    /// `common` is required unless the path is [`FusionPath::Specific`];
    /// `distance` (`[B, 1, H, W]`) is required for gated paths.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        s_opt: Var,
        s_sar: Var,
        common: Option<(Var, Var)>,
        distance: Option<Var>,
    ) -> Result<FusionOutput> {
        let missing = |what: &str| Error::InvalidArgument(format!("fusion path {:?} needs {what}", self.path));
        let (pre, gate) = match self.path {
            FusionPath::Specific => (specific_diff(g, &self.specific_proj, s_opt, s_sar)?, None),
            FusionPath::Sum => {
                let (co, cs) = common.ok_or_else(|| missing("common features"))?;
                let d = dual_path_diff(g, &self.specific_proj, s_opt, s_sar, co, cs)?;
                (g.add(d.specific, d.common), None)
            }
            FusionPath::Gated(mode) => {
                let (co, cs) = common.ok_or_else(|| missing("common features"))?;
                let dist = distance.ok_or_else(|| missing("a prior distance"))?;
                let d = dual_path_diff(g, &self.specific_proj, s_opt, s_sar, co, cs)?;
                let m = self.projector.as_ref().expect("gated paths own a projector").forward(g, dist);
                let pre = match mode {
                    FusionMode::GatedSum => gated_fuse(g, m, &d)?,
                    FusionMode::Concat => gated_concat(g, m, &d)?,
                };
                (pre, Some(m))
            }
        };
        let y = self.refine.forward(g, pre);
        Ok(FusionOutput { fused: g.relu(y), gate })
    }
}
