use std::sync::Arc;

use crate::{Graph, Scalar, Tensor, Var};

impl<T: Scalar> Graph<'_, T> {
    /// Mean per-pixel weighted cross-entropy of `logits[N, K, H, W]` against
    /// class indices laid out as `[N, H, W]`:
    /// `-(1/NHW) Σ w[y] · log softmax(logits)[y]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: Arc<Vec<usize>>, weights: Arc<Vec<T>>) -> Var {
        let ls = self.shape(logits).to_vec();
        assert_eq!(ls.len(), 4, "cross_entropy expects NKHW logits");
        let (n, k, hw) = (ls[0], ls[1], ls[2] * ls[3]);
        assert_eq!(labels.len(), n * hw, "label count mismatch");
        assert_eq!(weights.len(), k, "class weight count mismatch");
        let count = T::from_f64((n * hw) as f64);
        let mut probs = vec![T::zero(); n * k * hw];
        let mut total = T::zero();
        {
            let d = self.value(logits).data();
            for b in 0..n {
                for i in 0..hw {
                    let y = labels[b * hw + i];
                    assert!(y < k, "label {y} out of range for {k} classes");
                    let at = |c: usize| d[(b * k + c) * hw + i];
                    let mx = (0..k).fold(T::neg_infinity(), |m, c| m.max(at(c)));
                    let z: T = (0..k).map(|c| (at(c) - mx).exp()).sum();
                    let lse = mx + z.ln();
                    total += weights[y] * (lse - at(y));
                    for c in 0..k {
                        probs[(b * k + c) * hw + i] = (at(c) - lse).exp();
                    }
                }
            }
        }
        self.push(
            Tensor::scalar(total / count),
            &[logits],
            Box::new(move |go, p, _, _| {
                let scale = go.item() / count;
                let mut gx = vec![T::zero(); n * k * hw];
                for b in 0..n {
                    for i in 0..hw {
                        let y = labels[b * hw + i];
                        let wy = weights[y] * scale;
                        for c in 0..k {
                            let idx = (b * k + c) * hw + i;
                            let onehot = if c == y { T::one() } else { T::zero() };
                            gx[idx] = wy * (probs[idx] - onehot);
                        }
                    }
                }
                vec![Some(Tensor::new(p[0].shape().to_vec(), gx))]
            }),
        )
    }
}
