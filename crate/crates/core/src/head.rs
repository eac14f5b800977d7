//! Top-down decoder, weighted cross-entropy and arg-max prediction.

use std::sync::Arc;

use mmcd_autograd::{Graph, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Conv2d, ParamBuilder};
use crate::synth::ChangeLabelMap;

/// Inverse-frequency weights are clipped to this range.
pub const WEIGHT_CLIP: (f64, f64) = (0.2, 5.0);

#[derive(Clone, Debug)]
pub struct Decoder {
    pub laterals: Vec<Conv2d>,
    pub smooth: Vec<Conv2d>,
    pub classifier: Conv2d,
    pub num_classes: usize,
}

impl Decoder {
    /// `channels[s]` is the width of fused scale `s` (finest first).
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, channels: &[usize], dim: usize, num_classes: usize) -> Self {
        let mut s = b.sub("decoder");
        let laterals = channels.iter().enumerate().map(|(i, &c)| Conv2d::new(&mut s, &format!("lateral{i}"), c, dim, 1, 1)).collect();
        let smooth = (0..channels.len() - 1).map(|i| Conv2d::relu(&mut s, &format!("smooth{i}"), dim, dim, 3, 1)).collect();
        let classifier = Conv2d::new(&mut s, "classifier", dim, num_classes, 1, 1);
        Self { laterals, smooth, classifier, num_classes }
    }

    /// Fused pyramid (finest first, strides 4..32) to logits at input resolution.
    ///
    /// The 1×1 classifier runs before the final 4× bilinear upsampling; both
    /// are linear per pixel with interpolation weights summing to one, so the
    /// order does not change the result.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, fused: &[Var]) -> Result<Var> {
        if fused.len() != self.laterals.len() {
            return Err(Error::Shape(format!("decoder expects {} scales, got {}", self.laterals.len(), fused.len())));
        }
        for (i, (&f, lat)) in fused.iter().zip(&self.laterals).enumerate() {
            let s = g.shape(f);
            if s.len() != 4 || s[1] != lat.in_channels {
                return Err(Error::Shape(format!("scale {i}: expected [B, {}, H, W], got {s:?}", lat.in_channels)));
            }
            if i > 0 {
                let prev = g.shape(fused[i - 1]);
                if prev[2] != 2 * s[2] || prev[3] != 2 * s[3] || prev[0] != s[0] {
                    return Err(Error::Shape(format!("scale {i} is not half the size of scale {}", i - 1)));
                }
            }
        }
        let last = fused.len() - 1;
        let mut p = self.laterals[last].forward(g, fused[last]);
        for i in (0..last).rev() {
            let up = g.upsample_bilinear(p, 2);
            let lat = self.laterals[i].forward(g, fused[i]);
            let sum = g.add(up, lat);
            let y = self.smooth[i].forward(g, sum);
            p = g.relu(y);
        }
        let logits = self.classifier.forward(g, p);
        Ok(g.upsample_bilinear(logits, 4))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassWeightMode {
    Uniform,
    #[default]
    InverseFrequency,
}

/// `w_c = total / (K · count_c)` clipped to [`WEIGHT_CLIP`]; absent classes get the upper clip.
pub fn class_weights(labels: &[&ChangeLabelMap], num_classes: usize, mode: ClassWeightMode) -> Vec<f64> {
    if mode == ClassWeightMode::Uniform {
        return vec![1.0; num_classes];
    }
    let mut counts = vec![0usize; num_classes];
    for l in labels {
        for &v in l.cells() {
            if (v as usize) < num_classes {
                counts[v as usize] += 1;
            }
        }
    }
    let total: usize = counts.iter().sum();
    counts
        .iter()
        .map(|&c| {
            if c == 0 {
                WEIGHT_CLIP.1
            } else {
                (total as f64 / (num_classes * c) as f64).clamp(WEIGHT_CLIP.0, WEIGHT_CLIP.1)
            }
        })
        .collect()
}

/// Mean pixel-wise weighted cross-entropy of `logits[B, K, H, W]` against one label map per batch item.
pub fn loss<T: Scalar>(g: &mut Graph<'_, T>, logits: Var, labels: &[&ChangeLabelMap], weights: &[f64]) -> Result<Var> {
    let s = g.shape(logits).to_vec();
    if s.len() != 4 || s[0] != labels.len() || weights.len() != s[1] {
        return Err(Error::Shape(format!("logits {s:?} vs {} label maps and {} weights", labels.len(), weights.len())));
    }
    let (k, h, w) = (s[1], s[2], s[3]);
    let mut flat = Vec::with_capacity(labels.len() * h * w);
    for l in labels {
        if (l.height(), l.width()) != (h, w) {
            return Err(Error::Shape(format!("label {}x{} vs logits {h}x{w}", l.height(), l.width())));
        }
        for &v in l.cells() {
            if v as usize >= k {
                return Err(Error::InvalidLabel { label: v as usize, max: k - 1 });
            }
            flat.push(v as usize);
        }
    }
    let wts = weights.iter().map(|&x| T::from_f64(x)).collect();
    Ok(g.cross_entropy(logits, Arc::new(flat), Arc::new(wts)))
}

/// Per-pixel arg-max over classes; ties go to the smallest index.
pub fn predict<T: Scalar>(logits: &Tensor<T>) -> Vec<ChangeLabelMap> {
    let s = logits.shape();
    let (b, k, h, w) = (s[0], s[1], s[2], s[3]);
    let d = logits.data();
    (0..b)
        .map(|n| {
            let cells = (0..h * w)
                .map(|i| {
                    let mut best = 0;
                    for c in 1..k {
                        if d[(n * k + c) * h * w + i] > d[(n * k + best) * h * w + i] {
                            best = c;
                        }
                    }
                    best as u8
                })
                .collect();
            ChangeLabelMap::from_cells(h, w, cells, k.max(1)).expect("arg-max stays in range")
        })
        .collect()
}

/// Channel softmax of `logits[B, K, H, W]`.
pub fn probabilities<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let p = logits.permute(&[0, 2, 3, 1]);
    mmcd_autograd::softmax_last(&p).permute(&[0, 3, 1, 2])
}

#[cfg(test)]
mod tests {
    use super::*;
    use mmcd_autograd::ParamStore;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn labels(h: usize, w: usize, v: u8) -> ChangeLabelMap {
        ChangeLabelMap::from_cells(h, w, vec![v; h * w], 7).unwrap()
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::inference(&store);
        let x = g.input(Tensor::zeros([1, 7, 2, 2]));
        let l = labels(2, 2, 3);
        let v = loss(&mut g, x, &[&l], &[1.0; 7]).unwrap();
        assert!((g.value(v).item() - 7f64.ln()).abs() < 1e-12);
        assert!((g.value(v).item() - 1.945910149).abs() < 1e-6);
    }

    #[test]
    fn saturated_correct_logits_give_zero_loss() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::inference(&store);
        let mut t = Tensor::zeros([1, 7, 2, 2]);
        for i in 0..4 {
            t.data_mut()[2 * 4 + i] = 1000.0;
        }
        let x = g.input(t);
        let v = loss(&mut g, x, &[&labels(2, 2, 2)], &[1.0; 7]).unwrap();
        assert!(g.value(v).item() < 1e-6);
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::inference(&store);
        let x = g.input(Tensor::zeros([1, 3, 1, 2]));
        let l = ChangeLabelMap::from_cells(1, 2, vec![0, 5], 7).unwrap();
        assert!(matches!(loss(&mut g, x, &[&l], &[1.0; 3]), Err(Error::InvalidLabel { label: 5, max: 2 })));
    }

    #[test]
    fn predict_ties_and_shift_invariance() {
        let mut t = Tensor::<f64>::zeros([1, 7, 1, 2]);
        t.set(&[0, 3, 0, 0], 2.0);
        t.set(&[0, 3, 0, 1], 2.0);
        assert_eq!(predict(&t)[0].cells(), &[3, 3]);
        let mut tie = Tensor::<f64>::zeros([1, 7, 1, 1]);
        tie.set(&[0, 2, 0, 0], 1.0);
        tie.set(&[0, 5, 0, 0], 1.0);
        assert_eq!(predict(&tie)[0].cells(), &[2]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = Tensor::from_fn([2, 7, 3, 3], |_| rng.random_range(-2.0..2.0));
        assert_eq!(predict(&r), predict(&r.map(|v| v + 17.5)));
    }

    #[test]
    fn zero_weight_decoder_emits_bias() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let dec = Decoder::new(&mut ParamBuilder::new(&mut store, &mut rng), &[4, 8, 16, 32], 8, 7);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let shape = store.value(id).shape().to_vec();
            *store.value_mut(id) = Tensor::zeros(shape);
        }
        let bias: Vec<f64> = (0..7).map(|i| i as f64 * 0.3 - 1.0).collect();
        *store.value_mut(dec.classifier.bias.unwrap()) = Tensor::new([7], bias.clone());
        let mut g = Graph::inference(&store);
        let fused: Vec<Var> = (0..4).map(|s| g.input(Tensor::ones([1, 4 << s, 16 >> s, 16 >> s]))).collect();
        let y = dec.forward(&mut g, &fused).unwrap();
        assert_eq!(g.shape(y), &[1, 7, 64, 64]);
        for c in 0..7 {
            assert!(g.value(y).narrow(1, c, 1).data().iter().all(|&v| (v - bias[c]).abs() < 1e-12));
        }
    }

    #[test]
    fn inverse_frequency_weights_are_clipped() {
        let mut cells = vec![0u8; 100];
        cells[0] = 1;
        let l = ChangeLabelMap::from_cells(10, 10, cells, 7).unwrap();
        let w = class_weights(&[&l], 7, ClassWeightMode::InverseFrequency);
        // 100 / (7 · 99) ≈ 0.144 is clipped up; 100 / 7 is clipped down
        assert_eq!(w[0], 0.2);
        assert_eq!(w[1], 5.0);
        assert_eq!(w[6], 5.0);
        let l2 = ChangeLabelMap::from_cells(2, 7, (0..14).map(|i| (i % 7) as u8).collect(), 7).unwrap();
        assert_eq!(class_weights(&[&l2], 7, ClassWeightMode::InverseFrequency), vec![1.0; 7]);
        assert_eq!(w[6], 5.0);
        assert_eq!(class_weights(&[&l], 7, ClassWeightMode::Uniform), vec![1.0; 7]);
    }

    #[test]
    fn probabilities_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = Tensor::<f64>::from_fn([2, 7, 3, 3], |_| rng.random_range(-5.0..5.0));
        let p = probabilities(&t);
        for n in 0..2 {
            for i in 0..9 {
                let s: f64 = (0..7).map(|c| p.data()[(n * 7 + c) * 9 + i]).sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }
}
