use crate::scalar::gemm;
use crate::{Graph, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dGeometry {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    /// Unfolds one `[C, H, W]` image into `[C·kh·kw, Ho·Wo]`.
    fn im2col<T: Scalar>(&self, img: &[T], cols: &mut [T]) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let mut r = 0;
        for c in 0..self.c_in {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = &mut cols[r * oh * ow..(r + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            row[oy * ow + ox] = if iy >= 0 && ix >= 0 && (iy as usize) < self.h && (ix as usize) < self.w {
                                img[(c * self.h + iy as usize) * self.w + ix as usize]
                            } else {
                                T::zero()
                            };
                        }
                    }
                    r += 1;
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`], accumulating into `img`.
    fn col2im<T: Scalar>(&self, cols: &[T], img: &mut [T]) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let mut r = 0;
        for c in 0..self.c_in {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = &cols[r * oh * ow..(r + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy as usize >= self.h {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && (ix as usize) < self.w {
                                img[(c * self.h + iy as usize) * self.w + ix as usize] += row[oy * ow + ox];
                            }
                        }
                    }
                    r += 1;
                }
            }
        }
    }
}

impl<T: Scalar> Graph<'_, T> {
    /// 2-D cross-correlation of `x[N, Cin, H, W]` with `w[Cout, Cin, kh, kw]`, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be NCHW, got {xs:?}");
        assert_eq!(ws.len(), 4, "conv2d weight must be rank 4");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch {xs:?} vs {ws:?}");
        assert!(stride >= 1);
        let geo = Conv2dGeometry { c_in: xs[1], h: xs[2], w: xs[3], kh: ws[2], kw: ws[3], stride, pad };
        assert!(xs[2] + 2 * pad >= ws[2] && xs[3] + 2 * pad >= ws[3], "conv2d kernel larger than input");
        let (n, c_out) = (xs[0], ws[0]);
        let (oh, ow) = (geo.out_h(), geo.out_w());
        let (kdim, plane) = (geo.col_rows(), oh * ow);
        let in_plane = geo.c_in * geo.h * geo.w;
        let mut out = vec![T::zero(); n * c_out * plane];
        {
            let xd = self.value(x).data();
            let wd = self.value(w).data();
            let mut cols = if geo.is_pointwise() { Vec::new() } else { vec![T::zero(); kdim * plane] };
            for b in 0..n {
                let img = &xd[b * in_plane..(b + 1) * in_plane];
                let src: &[T] = if geo.is_pointwise() {
                    img
                } else {
                    geo.im2col(img, &mut cols);
                    &cols
                };
                gemm(false, false, c_out, kdim, plane, wd, src, &mut out[b * c_out * plane..(b + 1) * c_out * plane], false);
            }
            if let Some(bv) = bias {
                let bd = self.value(bv).data();
                assert_eq!(bd.len(), c_out, "conv2d bias length");
                for b in 0..n {
                    for co in 0..c_out {
                        let base = (b * c_out + co) * plane;
                        out[base..base + plane].iter_mut().for_each(|v| *v += bd[co]);
                    }
                }
            }
        }
        let parents: Vec<Var> = match bias {
            Some(bv) => vec![x, w, bv],
            None => vec![x, w],
        };
        self.push(
            Tensor::new(vec![n, c_out, oh, ow], out),
            &parents,
            Box::new(move |go, p, _, need| {
                let (xd, wd, gd) = (p[0].data(), p[1].data(), go.data());
                let mut dx = need[0].then(|| vec![T::zero(); n * in_plane]);
                let mut dw = need[1].then(|| vec![T::zero(); c_out * kdim]);
                let mut cols = vec![T::zero(); if geo.is_pointwise() { 0 } else { kdim * plane }];
                let mut dcols = vec![T::zero(); kdim * plane];
                for b in 0..n {
                    let gb = &gd[b * c_out * plane..(b + 1) * c_out * plane];
                    if let Some(dw) = dw.as_mut() {
                        let img = &xd[b * in_plane..(b + 1) * in_plane];
                        let src: &[T] = if geo.is_pointwise() {
                            img
                        } else {
                            geo.im2col(img, &mut cols);
                            &cols
                        };
                        gemm(false, true, c_out, plane, kdim, gb, src, dw, true);
                    }
                    if let Some(dx) = dx.as_mut() {
                        let dst = &mut dx[b * in_plane..(b + 1) * in_plane];
                        if geo.is_pointwise() {
                            gemm(true, false, kdim, c_out, plane, wd, gb, dst, false);
                        } else {
                            gemm(true, false, kdim, c_out, plane, wd, gb, &mut dcols, false);
                            geo.col2im(&dcols, dst);
                        }
                    }
                }
                let mut grads = vec![
                    dx.map(|d| Tensor::new(p[0].shape().to_vec(), d)),
                    dw.map(|d| Tensor::new(p[1].shape().to_vec(), d)),
                ];
                if p.len() == 3 {
                    grads.push(need[2].then(|| {
                        let mut db = vec![T::zero(); c_out];
                        for b in 0..n {
                            for (co, acc) in db.iter_mut().enumerate() {
                                let base = (b * c_out + co) * plane;
                                *acc += gd[base..base + plane].iter().copied().sum::<T>();
                            }
                        }
                        Tensor::new(vec![c_out], db)
                    }));
                }
                grads
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ParamStore;

    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let (n, ci, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (co, kh, kw) = (w.dim(0), w.dim(2), w.dim(3));
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let mut out = Tensor::zeros([n, co, oh, ow]);
        for b in 0..n {
            for o in 0..co {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut s = 0.0;
                        for c in 0..ci {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (y * stride + ky) as isize - pad as isize;
                                    let ix = (xx * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        s += x.at(&[b, c, iy as usize, ix as usize]) * w.at(&[o, c, ky, kx]);
                                    }
                                }
                            }
                        }
                        out.set(&[b, o, y, xx], s);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        let x = Tensor::<f64>::from_fn([2, 3, 5, 6], |i| ((i * 7919) % 13) as f64 / 13.0 - 0.5);
        let w = Tensor::<f64>::from_fn([4, 3, 3, 3], |i| ((i * 104_729) % 17) as f64 / 17.0 - 0.5);
        let store = ParamStore::new();
        for (stride, pad) in [(1, 1), (2, 1), (1, 0), (2, 0)] {
            let mut g = Graph::inference(&store);
            let xv = g.constant(x.clone());
            let wv = g.constant(w.clone());
            let y = g.conv2d(xv, wv, None, stride, pad);
            let want = naive_conv(&x, &w, stride, pad);
            assert_eq!(g.shape(y), want.shape());
            for (a, b) in g.value(y).data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
