use mmcd_autograd::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::derive_seed;
use super::landcover::LandCoverMap;
use crate::error::{Error, Result};

/// Mean RGB reflectance per cover class, indexed by cover code.
pub const OPTICAL_SIGNATURES: [[f32; 3]; 4] = [
    [0.45, 0.50, 0.35],
    [0.80, 0.75, 0.70],
    [0.30, 0.30, 0.32],
    [0.10, 0.25, 0.45],
];

/// Mean backscatter per cover class in (HH, HV, VH, VV) order.
pub const SAR_BACKSCATTER: [[f32; 4]; 4] = [
    [0.30, 0.15, 0.15, 0.28],
    [0.80, 0.45, 0.45, 0.70],
    [0.18, 0.06, 0.06, 0.20],
    [0.03, 0.01, 0.01, 0.02],
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpticalConfig {
    /// Peak absolute texture offset per channel.
    pub texture_amplitude: f32,
    /// Lattice spacing of the value noise, in pixels.
    pub texture_cell: usize,
}

impl Default for OpticalConfig {
    fn default() -> Self {
        Self { texture_amplitude: 0.05, texture_cell: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SarConfig {
    /// Variance of the unit-mean gamma speckle (1 / number of looks); 0 disables speckle.
    pub speckle_variance: f64,
}

impl Default for SarConfig {
    fn default() -> Self {
        Self { speckle_variance: 0.25 }
    }
}

/// Renders a land-cover map as a 3×H×W optical image in [0, 1].
pub fn render_optical(map: &LandCoverMap, seed: u64, config: &OpticalConfig) -> Result<Tensor<f32>> {
    if config.texture_cell == 0 || !(0.0..=1.0).contains(&config.texture_amplitude) {
        return Err(Error::InvalidArgument(format!("bad optical config {config:?}")));
    }
    let (h, w) = (map.height(), map.width());
    let mut out = Tensor::zeros([3, h, w]);
    let data = out.data_mut();
    for ch in 0..3 {
        let noise = value_noise(derive_seed(seed, ch as u64), h, w, config.texture_cell, config.texture_amplitude);
        for r in 0..h {
            for c in 0..w {
                let base = OPTICAL_SIGNATURES[map.0.get(r, c) as usize][ch];
                data[(ch * h + r) * w + c] = (base + noise[r * w + c]).clamp(0.0, 1.0);
            }
        }
    }
    Ok(out)
}

/// Renders a land-cover map as a 4×H×W SAR intensity image in [0, 1]:
/// class backscatter times independent gamma speckle per channel and pixel.
pub fn render_sar(map: &LandCoverMap, seed: u64, config: &SarConfig) -> Result<Tensor<f32>> {
    let var = config.speckle_variance;
    if !var.is_finite() || var < 0.0 {
        return Err(Error::InvalidArgument(format!("speckle variance {var} must be finite and non-negative")));
    }
    let (h, w) = (map.height(), map.width());
    let mut out = Tensor::zeros([4, h, w]);
    let data = out.data_mut();
    let gamma = if var > 0.0 {
        Some(Gamma::new(1.0 / var, var).map_err(|e| Error::InvalidArgument(e.to_string()))?)
    } else {
        None
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for ch in 0..4 {
        for r in 0..h {
            for c in 0..w {
                let base = SAR_BACKSCATTER[map.0.get(r, c) as usize][ch] as f64;
                let speckle = gamma.as_ref().map_or(1.0, |g| g.sample(&mut rng));
                data[(ch * h + r) * w + c] = (base * speckle).clamp(0.0, 1.0) as f32;
            }
        }
    }
    Ok(out)
}

/// Bilinearly interpolated lattice noise with values in [-amplitude, amplitude].
fn value_noise(seed: u64, h: usize, w: usize, cell: usize, amplitude: f32) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lh, lw) = (h / cell + 2, w / cell + 2);
    let lattice: Vec<f32> = (0..lh * lw).map(|_| rng.random_range(-amplitude..=amplitude)).collect();
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        let (i, fy) = (r / cell, (r % cell) as f32 / cell as f32);
        for c in 0..w {
            let (j, fx) = (c / cell, (c % cell) as f32 / cell as f32);
            let at = |a: usize, b: usize| lattice[a * lw + b];
            let top = at(i, j) * (1.0 - fx) + at(i, j + 1) * fx;
            let bottom = at(i + 1, j) * (1.0 - fx) + at(i + 1, j + 1) * fx;
            out[r * w + c] = top * (1.0 - fy) + bottom * fy;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{Cover, Geometry};

    fn two_blocks() -> LandCoverMap {
        let mut m = LandCoverMap::empty(32, 32);
        m.paint(&Geometry::Rect { row: 0, col: 0, height: 32, width: 16 }.cells(32, 32).unwrap(), Cover::Building);
        m.paint(&Geometry::Rect { row: 0, col: 16, height: 32, width: 16 }.cells(32, 32).unwrap(), Cover::Water);
        m
    }

    fn channel_stats(t: &Tensor<f32>, ch: usize, mask: impl Fn(usize, usize) -> bool) -> (f64, f64) {
        let (h, w) = (t.dim(1), t.dim(2));
        let vals: Vec<f64> = (0..h * w).filter(|&i| mask(i / w, i % w)).map(|i| t.data()[ch * h * w + i] as f64).collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        (mean, var.sqrt())
    }

    #[test]
    fn signatures_are_pairwise_separated() {
        for a in 0..4 {
            for b in a + 1..4 {
                let gap = (0..3).map(|k| (OPTICAL_SIGNATURES[a][k] - OPTICAL_SIGNATURES[b][k]).abs()).fold(0.0, f32::max);
                assert!(gap >= 0.15, "classes {a} and {b} differ by only {gap}");
            }
        }
    }

    #[test]
    fn blank_map_has_only_texture_variation() {
        let img = render_optical(&LandCoverMap::empty(64, 64), 3, &OpticalConfig::default()).unwrap();
        for ch in 0..3 {
            let (_, std) = channel_stats(&img, ch, |_, _| true);
            assert!(std <= 0.05, "channel {ch} std {std}");
        }
        assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn building_and_water_regions_are_distinguishable() {
        let img = render_optical(&two_blocks(), 1, &OpticalConfig::default()).unwrap();
        let gap = (0..3)
            .map(|ch| (channel_stats(&img, ch, |_, c| c < 16).0 - channel_stats(&img, ch, |_, c| c >= 16).0).abs())
            .fold(0.0, f64::max);
        assert!(gap >= 0.15);
    }

    #[test]
    fn renders_are_deterministic() {
        let m = two_blocks();
        assert_eq!(render_optical(&m, 5, &OpticalConfig::default()).unwrap(), render_optical(&m, 5, &OpticalConfig::default()).unwrap());
        assert_eq!(render_sar(&m, 5, &SarConfig::default()).unwrap(), render_sar(&m, 5, &SarConfig::default()).unwrap());
    }

    #[test]
    fn speckle_off_gives_class_constants() {
        let m = two_blocks();
        let img = render_sar(&m, 9, &SarConfig { speckle_variance: 0.0 }).unwrap();
        for ch in 0..4 {
            for r in 0..32 {
                for c in 0..32 {
                    let cover = m.0.get(r, c) as usize;
                    assert_eq!(img.at(&[ch, r, c]), SAR_BACKSCATTER[cover][ch]);
                }
            }
        }
    }

    #[test]
    fn speckle_is_unit_mean() {
        let img = render_sar(&LandCoverMap::empty(128, 128), 11, &SarConfig::default()).unwrap();
        for ch in 0..4 {
            let (mean, _) = channel_stats(&img, ch, |_, _| true);
            let target = SAR_BACKSCATTER[0][ch] as f64;
            assert!((mean - target).abs() <= 0.05 * target, "channel {ch}: mean {mean} vs {target}");
        }
    }

    #[test]
    fn polarizations_differ() {
        for cover in 0..4 {
            let row = SAR_BACKSCATTER[cover];
            assert!(row[0] != row[1] && row[0] != row[3]);
        }
    }
}
