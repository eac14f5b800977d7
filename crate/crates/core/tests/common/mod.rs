//! Independent reference implementations: plain loops and dense matrices.

#![allow(dead_code)]

use mmcd_autograd::{ParamStore, Tensor};
use mmcd_core::stcfm::{Fim, Gsfm};
use mmcd_core::synth::{ChangeLabelMap, Grid};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Stride-1 convolution with zero "same" padding; `w[Cout, Cin, k, k]`.
pub fn conv2d_same(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>) -> Tensor<f64> {
    let (n, cin, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (cout, k) = (w.dim(0), w.dim(2));
    let p = (k / 2) as isize;
    let mut out = Tensor::zeros([n, cout, h, wd]);
    for bi in 0..n {
        for co in 0..cout {
            for r in 0..h {
                for c in 0..wd {
                    let mut acc = b.map_or(0.0, |b| b.data()[co]);
                    for ci in 0..cin {
                        for kr in 0..k {
                            for kc in 0..k {
                                let (rr, cc) = (r as isize + kr as isize - p, c as isize + kc as isize - p);
                                if rr < 0 || cc < 0 || rr >= h as isize || cc >= wd as isize {
                                    continue;
                                }
                                acc += w.at(&[co, ci, kr, kc]) * x.at(&[bi, ci, rr as usize, cc as usize]);
                            }
                        }
                    }
                    out.set(&[bi, co, r, c], acc);
                }
            }
        }
    }
    out
}

/// Training-mode batch norm: per-channel biased statistics over (N, H, W).
pub fn batch_norm(x: &Tensor<f64>, gamma: &Tensor<f64>, beta: &Tensor<f64>, eps: f64) -> Tensor<f64> {
    let (n, ch, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let mut out = x.clone();
    for c in 0..ch {
        let vals: Vec<f64> = (0..n).flat_map(|b| (0..h * w).map(move |i| (b, i))).map(|(b, i)| x.at(&[b, c, i / w, i % w])).collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
        for b in 0..n {
            for i in 0..h * w {
                let y = (x.at(&[b, c, i / w, i % w]) - m) / (v + eps).sqrt();
                out.set(&[b, c, i / w, i % w], gamma.data()[c] * y + beta.data()[c]);
            }
        }
    }
    out
}

/// FIM in training mode: `(C_opt, C_sar, A)`.
pub fn fim(store: &ParamStore<f64>, f: &Fim, s_opt: &Tensor<f64>, s_sar: &Tensor<f64>) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
    let v = |id| store.value(id);
    let o = conv2d_same(s_opt, v(f.align_opt.weight), f.align_opt.bias.map(v));
    let s = conv2d_same(s_sar, v(f.align_sar.weight), f.align_sar.bias.map(v));
    let (n, c, h, w) = (o.dim(0), o.dim(1), o.dim(2), o.dim(3));
    let mut cat = Tensor::zeros([n, 2 * c, h, w]);
    for b in 0..n {
        for ch in 0..c {
            for r in 0..h {
                for col in 0..w {
                    cat.set(&[b, ch, r, col], o.at(&[b, ch, r, col]));
                    cat.set(&[b, c + ch, r, col], s.at(&[b, ch, r, col]));
                }
            }
        }
    }
    let z = conv2d_same(&cat, v(f.attn_conv.weight), f.attn_conv.bias.map(v));
    let z = batch_norm(&z, v(f.bn.gamma), v(f.bn.beta), 1e-5);
    let a = z.map(sigmoid);
    let mut co = o.clone();
    let mut cs = s.clone();
    for b in 0..n {
        for ch in 0..c {
            for r in 0..h {
                for col in 0..w {
                    let m = a.at(&[b, 0, r, col]);
                    co.set(&[b, ch, r, col], o.at(&[b, ch, r, col]) * m);
                    cs.set(&[b, ch, r, col], s.at(&[b, ch, r, col]) * m);
                }
            }
        }
    }
    (co, cs, a)
}

/// Dense `D̃^{-1/2}(A + I)D̃^{-1/2}` built from explicit neighbour tests.
pub fn dense_adjacency(h: usize, w: usize, connectivity: usize) -> DMatrix<f64> {
    let n = h * w;
    let mut a = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let (dr, dc) = ((i / w).abs_diff(j / w), (i % w).abs_diff(j % w));
            let linked = match connectivity {
                4 => dr + dc <= 1,
                8 => dr <= 1 && dc <= 1,
                _ => panic!("connectivity"),
            };
            if linked {
                a[(i, j)] = 1.0;
            }
        }
    }
    let d: Vec<f64> = (0..n).map(|i| a.row(i).sum()).collect();
    DMatrix::from_fn(n, n, |i, j| a[(i, j)] / (d[i] * d[j]).sqrt())
}

/// GSFM graph stage (no refinement) for one image `x[C, H, W]` via dense products.
pub fn gsfm_graph_stage(store: &ParamStore<f64>, g: &Gsfm, x: &Tensor<f64>, connectivity: usize) -> Tensor<f64> {
    let (c, h, w) = (x.dim(0), x.dim(1), x.dim(2));
    let n = h * w;
    let adj = dense_adjacency(h, w, connectivity);
    let xm = DMatrix::from_fn(n, c, |i, ch| x.at(&[ch, i / w, i % w]));
    let lin = |l: &mmcd_core::layers::Linear| {
        let wt = store.value(l.weight);
        let b = store.value(l.bias);
        (DMatrix::from_fn(l.in_dim, l.out_dim, |i, j| wt.at(&[i, j])), DMatrix::from_fn(n, l.out_dim, |_, j| b.data()[j]))
    };
    let (w1, b1) = lin(&g.layer1);
    let (w2, b2) = lin(&g.layer2);
    let h1 = &adj * (&xm * w1) + b1;
    let r = h1 - &xm;
    let out = (&adj * (r * w2) + b2).map(|v| v.max(0.0));
    Tensor::from_fn(vec![out.ncols(), h, w], |k| {
        let (ch, i) = (k / n, k % n);
        out[(i, ch)]
    })
}

pub fn prior_distance(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (n, c, h, w) = (a.dim(0), a.dim(1), a.dim(2), a.dim(3));
    let mut out = Tensor::zeros([n, 1, h, w]);
    for bi in 0..n {
        for r in 0..h {
            for col in 0..w {
                let mut s = 0.0;
                for ch in 0..c {
                    let d = a.at(&[bi, ch, r, col]) - b.at(&[bi, ch, r, col]);
                    s += d * d;
                }
                out.set(&[bi, 0, r, col], s.sqrt());
            }
        }
    }
    out
}

pub fn gated_fuse(m: &Tensor<f64>, fs: &Tensor<f64>, fc: &Tensor<f64>) -> Tensor<f64> {
    let (n, c, h, w) = (fs.dim(0), fs.dim(1), fs.dim(2), fs.dim(3));
    let mut out = Tensor::zeros([n, c, h, w]);
    for b in 0..n {
        for ch in 0..c {
            for r in 0..h {
                for col in 0..w {
                    let g = m.at(&[b, 0, r, col]);
                    out.set(&[b, ch, r, col], g * fs.at(&[b, ch, r, col]) + (1.0 - g) * fc.at(&[b, ch, r, col]));
                }
            }
        }
    }
    out
}

/// `−mean_{n,h,w} w_y log softmax(logits)_y`.
pub fn weighted_ce(logits: &Tensor<f64>, labels: &[ChangeLabelMap], weights: &[f64]) -> f64 {
    let (n, k, h, w) = (logits.dim(0), logits.dim(1), logits.dim(2), logits.dim(3));
    let mut total = 0.0;
    for b in 0..n {
        for r in 0..h {
            for c in 0..w {
                let zs: Vec<f64> = (0..k).map(|j| logits.at(&[b, j, r, c])).collect();
                let mx = zs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + zs.iter().map(|z| (z - mx).exp()).sum::<f64>().ln();
                let y = labels[b].0.get(r, c) as usize;
                total += weights[y] * (lse - zs[y]);
            }
        }
    }
    total / (n * h * w) as f64
}

pub fn label_map(h: usize, w: usize, cells: Vec<u8>) -> ChangeLabelMap {
    ChangeLabelMap(Grid { height: h, width: w, cells })
}

pub fn random_labels(rng: &mut ChaCha8Rng, h: usize, w: usize, k: u8) -> ChangeLabelMap {
    label_map(h, w, (0..h * w).map(|_| rng.random_range(0..k)).collect())
}

/// Metrics recomputed from raw `(pred, truth)` pixel pairs.
#[derive(Debug)]
pub struct BruteMetrics {
    pub counts: Vec<Vec<u64>>,
    pub oa: f64,
    pub iou: Vec<Option<f64>>,
    pub miou: Option<f64>,
    pub precision: f64,
    pub recall: f64,
    pub f1_bcd: f64,
    pub f1_clf: f64,
}

pub fn brute_metrics(pairs: &[(u8, u8)], k: usize) -> BruteMetrics {
    let count = |f: &dyn Fn(usize, usize) -> bool| pairs.iter().filter(|&&(p, t)| f(p as usize, t as usize)).count() as f64;
    let mut counts = vec![vec![0u64; k]; k];
    for &(p, t) in pairs {
        counts[p as usize][t as usize] += 1;
    }
    let oa = count(&|p, t| p == t) / pairs.len() as f64;
    let mut iou = Vec::new();
    let mut f1s = 0.0;
    for i in 0..k {
        let tp = count(&|p, t| p == i && t == i);
        let fp = count(&|p, t| p == i && t != i);
        let fn_ = count(&|p, t| p != i && t == i);
        iou.push(if tp + fp + fn_ == 0.0 { None } else { Some(tp / (tp + fp + fn_)) });
        f1s += if tp == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fn_) };
    }
    let defined: Vec<f64> = iou.iter().flatten().copied().collect();
    let miou = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    let tp = count(&|p, t| p >= 1 && t >= 1);
    let fp = count(&|p, t| p >= 1 && t == 0);
    let fn_ = count(&|p, t| p == 0 && t >= 1);
    let div = |a: f64, b: f64| if b == 0.0 { 0.0 } else { a / b };
    let (precision, recall) = (div(tp, tp + fp), div(tp, tp + fn_));
    BruteMetrics {
        counts,
        oa,
        iou,
        miou,
        precision,
        recall,
        f1_bcd: div(2.0 * tp, 2.0 * tp + fp + fn_),
        f1_clf: f1s / k as f64,
    }
}

/// Expands a `rows = predicted` count matrix into pixel pairs.
pub fn pairs_from_rows(rows: &[Vec<u64>]) -> Vec<(u8, u8)> {
    let mut out = Vec::new();
    for (p, row) in rows.iter().enumerate() {
        for (t, &n) in row.iter().enumerate() {
            out.extend(std::iter::repeat_n((p as u8, t as u8), n as usize));
        }
    }
    out
}
