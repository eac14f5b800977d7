use crate::{Graph, Scalar, Tensor, Var};

/// Per-axis source indices and weights for half-pixel-centred linear interpolation.
fn linear_taps(n_in: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..n_in * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

impl<T: Scalar> Graph<'_, T> {
    /// Bilinear upsampling of `[N, C, H, W]` by an integer factor (half-pixel centres, edge clamped).
    pub fn upsample_bilinear(&mut self, x: Var, factor: usize) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 4, "upsample expects NCHW");
        if factor == 1 {
            return x;
        }
        let (planes, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        let (oh, ow) = (h * factor, w * factor);
        let ty = linear_taps(h, factor);
        let tx = linear_taps(w, factor);
        let mut out = vec![T::zero(); planes * oh * ow];
        {
            let d = self.value(x).data();
            for p in 0..planes {
                let src = &d[p * h * w..(p + 1) * h * w];
                let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
                for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                    let ly = T::from_f64(ly);
                    for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                        let lx = T::from_f64(lx);
                        let top = src[y0 * w + x0] * (T::one() - lx) + src[y0 * w + x1] * lx;
                        let bot = src[y1 * w + x0] * (T::one() - lx) + src[y1 * w + x1] * lx;
                        dst[oy * ow + ox] = top * (T::one() - ly) + bot * ly;
                    }
                }
            }
        }
        self.push(
            Tensor::new(vec![xs[0], xs[1], oh, ow], out),
            &[x],
            Box::new(move |go, p, _, _| {
                let gd = go.data();
                let mut gx = vec![T::zero(); planes * h * w];
                for pl in 0..planes {
                    let src = &gd[pl * oh * ow..(pl + 1) * oh * ow];
                    let dst = &mut gx[pl * h * w..(pl + 1) * h * w];
                    for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                        let ly = T::from_f64(ly);
                        for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                            let lx = T::from_f64(lx);
                            let g = src[oy * ow + ox];
                            dst[y0 * w + x0] += g * (T::one() - ly) * (T::one() - lx);
                            dst[y0 * w + x1] += g * (T::one() - ly) * lx;
                            dst[y1 * w + x0] += g * ly * (T::one() - lx);
                            dst[y1 * w + x1] += g * ly * lx;
                        }
                    }
                }
                vec![Some(Tensor::new(p[0].shape().to_vec(), gx))]
            }),
        )
    }

    /// 2×2 average pooling with stride 2; spatial sizes must be even.
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 4, "avg_pool2 expects NCHW");
        let (planes, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even sizes");
        let (oh, ow) = (h / 2, w / 2);
        let q = T::from_f64(0.25);
        let mut out = vec![T::zero(); planes * oh * ow];
        {
            let d = self.value(x).data();
            for p in 0..planes {
                for y in 0..oh {
                    for xx in 0..ow {
                        let b = p * h * w;
                        let s = d[b + 2 * y * w + 2 * xx]
                            + d[b + 2 * y * w + 2 * xx + 1]
                            + d[b + (2 * y + 1) * w + 2 * xx]
                            + d[b + (2 * y + 1) * w + 2 * xx + 1];
                        out[p * oh * ow + y * ow + xx] = s * q;
                    }
                }
            }
        }
        self.push(
            Tensor::new(vec![xs[0], xs[1], oh, ow], out),
            &[x],
            Box::new(move |go, p, _, _| {
                let gd = go.data();
                let mut gx = vec![T::zero(); planes * h * w];
                for pl in 0..planes {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let g = gd[pl * oh * ow + y * ow + xx] * q;
                            let b = pl * h * w;
                            gx[b + 2 * y * w + 2 * xx] += g;
                            gx[b + 2 * y * w + 2 * xx + 1] += g;
                            gx[b + (2 * y + 1) * w + 2 * xx] += g;
                            gx[b + (2 * y + 1) * w + 2 * xx + 1] += g;
                        }
                    }
                }
                vec![Some(Tensor::new(p[0].shape().to_vec(), gx))]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ParamStore;

    #[test]
    fn constant_map_stays_constant() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::inference(&store);
        let x = g.constant(Tensor::full([1, 2, 3, 5], 0.7));
        let y = g.upsample_bilinear(x, 4);
        assert_eq!(g.shape(y), &[1, 2, 12, 20]);
        assert!(g.value(y).data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn ramp_interpolates_between_centres() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::inference(&store);
        let x = g.constant(Tensor::from_f64([1, 1, 1, 2], &[0.0, 1.0]));
        let y = g.upsample_bilinear(x, 2);
        // output centres at source coordinates -0.25, 0.25, 0.75, 1.25
        assert_eq!(g.value(y).data(), &[0.0, 0.25, 0.75, 1.0, 0.0, 0.25, 0.75, 1.0]);
    }
}
