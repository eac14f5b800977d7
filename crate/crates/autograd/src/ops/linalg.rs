use crate::scalar::gemm;
use crate::{Graph, Scalar, Tensor, Var};

impl<T: Scalar> Graph<'_, T> {
    /// `x[..., K] · w[K, N] -> [..., N]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 2, "matmul weight must be rank 2");
        let k = *xs.last().expect("matmul on scalar");
        assert_eq!(k, ws[0], "matmul inner dims {xs:?} x {ws:?}");
        let n = ws[1];
        let rows = self.value(x).numel() / k.max(1);
        let mut out = vec![T::zero(); rows * n];
        gemm(false, false, rows, k, n, self.value(x).data(), self.value(w).data(), &mut out, false);
        let mut oshape = xs.clone();
        *oshape.last_mut().unwrap() = n;
        self.push(
            Tensor::new(oshape, out),
            &[x, w],
            Box::new(move |go, p, _, need| {
                let gx = need[0].then(|| {
                    let mut d = vec![T::zero(); rows * k];
                    gemm(false, true, rows, n, k, go.data(), p[1].data(), &mut d, false);
                    Tensor::new(p[0].shape().to_vec(), d)
                });
                let gw = need[1].then(|| {
                    let mut d = vec![T::zero(); k * n];
                    gemm(true, false, k, rows, n, p[0].data(), go.data(), &mut d, false);
                    Tensor::new(vec![k, n], d)
                });
                vec![gx, gw]
            }),
        )
    }

    /// Batched matmul over rank-3 operands with optional transposition of `b`:
    /// `[B, M, K] · [B, K, N]` or `[B, M, K] · [B, N, K]ᵀ`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        assert!(as_.len() == 3 && bs.len() == 3 && as_[0] == bs[0], "bmm shapes {as_:?} {bs:?}");
        let (batch, m, k) = (as_[0], as_[1], as_[2]);
        let n = if trans_b { bs[1] } else { bs[2] };
        assert_eq!(if trans_b { bs[2] } else { bs[1] }, k, "bmm inner dims {as_:?} {bs:?}");
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                gemm(
                    false,
                    trans_b,
                    m,
                    k,
                    n,
                    &ad[i * m * k..],
                    &bd[i * k * n..],
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        self.push(
            Tensor::new(vec![batch, m, n], out),
            &[a, b],
            Box::new(move |go, p, _, need| {
                let (ad, bd, gd) = (p[0].data(), p[1].data(), go.data());
                let ga = need[0].then(|| {
                    let mut d = vec![T::zero(); batch * m * k];
                    for i in 0..batch {
                        // dA = dC · op(B)ᵀ
                        gemm(
                            false,
                            !trans_b,
                            m,
                            n,
                            k,
                            &gd[i * m * n..],
                            &bd[i * k * n..],
                            &mut d[i * m * k..(i + 1) * m * k],
                            false,
                        );
                    }
                    Tensor::new(vec![batch, m, k], d)
                });
                let gb = need[1].then(|| {
                    let mut d = vec![T::zero(); batch * k * n];
                    for i in 0..batch {
                        let dst = &mut d[i * k * n..(i + 1) * k * n];
                        if trans_b {
                            // B is [N, K]: dB = dCᵀ · A
                            gemm(true, false, n, m, k, &gd[i * m * n..], &ad[i * m * k..], dst, false);
                        } else {
                            // dB = Aᵀ · dC
                            gemm(true, false, k, m, n, &ad[i * m * k..], &gd[i * m * n..], dst, false);
                        }
                    }
                    Tensor::new(p[1].shape().to_vec(), d)
                });
                vec![ga, gb]
            }),
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let value = softmax_last(self.value(x));
        self.push(
            value,
            &[x],
            Box::new(|go, _, y, _| {
                let d = *y.shape().last().unwrap();
                let mut gx = vec![T::zero(); y.numel()];
                for ((gr, yr), out) in go.data().chunks(d).zip(y.data().chunks(d)).zip(gx.chunks_mut(d)) {
                    let dot: T = gr.iter().zip(yr).map(|(&g, &s)| g * s).sum();
                    for ((o, &g), &s) in out.iter_mut().zip(gr).zip(yr) {
                        *o = s * (g - dot);
                    }
                }
                vec![Some(Tensor::new(y.shape().to_vec(), gx))]
            }),
        )
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta` of shape `[D]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().unwrap();
        assert_eq!(self.shape(gamma), &[d], "layer_norm gamma shape");
        assert_eq!(self.shape(beta), &[d], "layer_norm beta shape");
        let eps = T::from_f64(eps);
        let dn = T::from_f64(d as f64);
        let rows = self.value(x).numel() / d;
        let mut xhat = vec![T::zero(); rows * d];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * d];
        {
            let (xd, gd, bd) = (self.value(x).data(), self.value(gamma).data(), self.value(beta).data());
            for r in 0..rows {
                let row = &xd[r * d..(r + 1) * d];
                let mean = row.iter().copied().sum::<T>() / dn;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
                let is = T::one() / (var + eps).sqrt();
                inv_std[r] = is;
                for j in 0..d {
                    let h = (row[j] - mean) * is;
                    xhat[r * d + j] = h;
                    out[r * d + j] = h * gd[j] + bd[j];
                }
            }
        }
        self.push(
            Tensor::new(xs.clone(), out),
            &[x, gamma, beta],
            Box::new(move |go, p, _, need| {
                let g = go.data();
                let gam = p[1].data();
                let gx = need[0].then(|| {
                    let mut dx = vec![T::zero(); rows * d];
                    for r in 0..rows {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..d {
                            let dh = g[r * d + j] * gam[j];
                            s1 += dh;
                            s2 += dh * xhat[r * d + j];
                        }
                        for j in 0..d {
                            let dh = g[r * d + j] * gam[j];
                            dx[r * d + j] = inv_std[r] / dn * (dn * dh - s1 - xhat[r * d + j] * s2);
                        }
                    }
                    Tensor::new(xs.clone(), dx)
                });
                let gg = need[1].then(|| {
                    let mut dg = vec![T::zero(); d];
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                    Tensor::new(vec![d], dg)
                });
                let gb = need[2].then(|| {
                    let mut db = vec![T::zero(); d];
                    for r in 0..rows {
                        for j in 0..d {
                            db[j] += g[r * d + j];
                        }
                    }
                    Tensor::new(vec![d], db)
                });
                vec![gx, gg, gb]
            }),
        )
    }

    /// Batch normalization of `[N, C, H, W]` with batch statistics.
    ///
    /// Returns the output and the per-channel batch mean and unbiased variance.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> (Var, Tensor<T>, Tensor<T>) {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 4, "batch_norm expects NCHW");
        let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        assert_eq!(self.shape(gamma), &[c]);
        assert_eq!(self.shape(beta), &[c]);
        let m = n * hw;
        let mn = T::from_f64(m as f64);
        let eps = T::from_f64(eps);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        let mut xhat = vec![T::zero(); n * c * hw];
        let mut out = vec![T::zero(); n * c * hw];
        let mut inv_std = vec![T::zero(); c];
        {
            let (xd, gd, bd) = (self.value(x).data(), self.value(gamma).data(), self.value(beta).data());
            for ch in 0..c {
                let mut s = T::zero();
                for b in 0..n {
                    s += xd[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().copied().sum::<T>();
                }
                let mu = s / mn;
                let mut v = T::zero();
                for b in 0..n {
                    for &val in &xd[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                        v += (val - mu) * (val - mu);
                    }
                }
                let biased = v / mn;
                mean[ch] = mu;
                var[ch] = if m > 1 { v / T::from_f64((m - 1) as f64) } else { biased };
                let is = T::one() / (biased + eps).sqrt();
                inv_std[ch] = is;
                for b in 0..n {
                    let base = (b * c + ch) * hw;
                    for i in 0..hw {
                        let h = (xd[base + i] - mu) * is;
                        xhat[base + i] = h;
                        out[base + i] = h * gd[ch] + bd[ch];
                    }
                }
            }
        }
        let y = self.push(
            Tensor::new(xs.clone(), out),
            &[x, gamma, beta],
            Box::new(move |go, p, _, need| {
                let g = go.data();
                let gam = p[1].data();
                let mut dg = vec![T::zero(); c];
                let mut db = vec![T::zero(); c];
                for ch in 0..c {
                    for b in 0..n {
                        let base = (b * c + ch) * hw;
                        for i in 0..hw {
                            db[ch] += g[base + i];
                            dg[ch] += g[base + i] * xhat[base + i];
                        }
                    }
                }
                let gx = need[0].then(|| {
                    let mut dx = vec![T::zero(); n * c * hw];
                    for ch in 0..c {
                        let k = gam[ch] * inv_std[ch] / mn;
                        for b in 0..n {
                            let base = (b * c + ch) * hw;
                            for i in 0..hw {
                                dx[base + i] = k * (mn * g[base + i] - db[ch] - xhat[base + i] * dg[ch]);
                            }
                        }
                    }
                    Tensor::new(xs.clone(), dx)
                });
                vec![gx, need[1].then(|| Tensor::new(vec![c], dg)), need[2].then(|| Tensor::new(vec![c], db))]
            }),
        );
        (y, Tensor::new(vec![c], mean), Tensor::new(vec![c], var))
    }
}

pub fn softmax_last<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let d = *x.shape().last().expect("softmax on scalar");
    let mut out = vec![T::zero(); x.numel()];
    for (row, o) in x.data().chunks(d).zip(out.chunks_mut(d)) {
        let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut s = T::zero();
        for (oi, &v) in o.iter_mut().zip(row) {
            *oi = (v - mx).exp();
            s += *oi;
        }
        for oi in o.iter_mut() {
            *oi /= s;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}
