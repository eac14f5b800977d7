//! Finite-difference gradient checks on tiny double-precision subnets.
//!
//! Each subnet is built from a fixed seed, fed fixed random inputs and reduced
//! to a scalar through a fixed random projection.

use std::sync::Arc;

use mmcd_autograd::check::{check_params, Corruption, GradCheckReport, DEFAULT_STEP};
use mmcd_autograd::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::head::{loss, Decoder};
use crate::layers::{from_tokens, to_tokens, Linear, ParamBuilder};
use crate::msfe::{Adapter, AttentionBlock, Encoder, EncoderConfig};
use crate::pgffm::{FusionMode, FusionPath, FusionScale};
use crate::stcfm::{build_grid_adjacency, Fim, Gsfm, Stcfm};
use crate::synth::{ChangeLabelMap, Grid};

pub const MAX_PARAMS: usize = 2000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Subnet {
    Linear,
    Adapter,
    Attention,
    Fim,
    Gsfm,
    Stcfm,
    Pgffm,
    Decoder,
    Loss,
    Encoder,
}

impl Subnet {
    pub const ALL: [Subnet; 10] = [
        Subnet::Linear,
        Subnet::Adapter,
        Subnet::Attention,
        Subnet::Fim,
        Subnet::Gsfm,
        Subnet::Stcfm,
        Subnet::Pgffm,
        Subnet::Decoder,
        Subnet::Loss,
        Subnet::Encoder,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Subnet::Linear => "linear",
            Subnet::Adapter => "adapter",
            Subnet::Attention => "attention",
            Subnet::Fim => "fim",
            Subnet::Gsfm => "gsfm",
            Subnet::Stcfm => "stcfm",
            Subnet::Pgffm => "pgffm",
            Subnet::Decoder => "decoder",
            Subnet::Loss => "loss",
            Subnet::Encoder => "encoder",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| {
            let names: Vec<_> = Self::ALL.iter().map(|v| v.name()).collect();
            Error::InvalidArgument(format!("unknown subnet {s:?}; expected one of {}", names.join(", ")))
        })
    }
}

type LossFn = Box<dyn Fn(&mut Graph<f64>) -> Var>;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Fixed random projection of `x` to a scalar.
fn project(g: &mut Graph<f64>, x: Var, r: &Tensor<f64>) -> Var {
    g.dot_const(x, r.clone())
}

/// Builds a subnet's parameters into `store` and returns its scalar loss.
fn build(subnet: Subnet, store: &mut ParamStore<f64>, seed: u64) -> Result<LossFn> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let mut b = ParamBuilder::new(store, &mut rng);
    // Zero-initialised leaves that would otherwise hide gradient paths.
    let mut randomize = Vec::new();
    let mut assign: Vec<(ParamId, Tensor<f64>)> = Vec::new();
    let f: LossFn = match subnet {
        Subnet::Linear => {
            let lin = Linear::new(&mut b, "lin", 5, 3);
            let x = rand_tensor(&mut data, &[2, 4, 5]);
            let r = rand_tensor(&mut data, &[2, 4, 3]);
            Box::new(move |g| {
                let xi = g.constant(x.clone());
                let y = lin.forward(g, xi);
                project(g, y, &r)
            })
        }
        Subnet::Adapter => {
            let ad = Adapter::new(&mut b, "adapter", 8, 2)?;
            randomize.extend([ad.up.weight, ad.up.bias]);
            let x = rand_tensor(&mut data, &[1, 6, 8]);
            let r = rand_tensor(&mut data, &[1, 6, 8]);
            Box::new(move |g| {
                let xi = g.constant(x.clone());
                let y = ad.forward(g, xi).expect("adapter shapes");
                project(g, y, &r)
            })
        }
        Subnet::Attention => {
            let blk = AttentionBlock::new(&mut b, "blk", 8, 4, 2, Some((2, 1)))?;
            let x = rand_tensor(&mut data, &[1, 16, 8]);
            let r = rand_tensor(&mut data, &[1, 16, 8]);
            Box::new(move |g| {
                let xi = g.constant(x.clone());
                let y = blk.forward(g, xi, 4, 4);
                project(g, y, &r)
            })
        }
        Subnet::Fim => {
            let fim = Fim::new(&mut b, "fim", 4);
            let (xo, xs) = (rand_tensor(&mut data, &[2, 4, 3, 3]), rand_tensor(&mut data, &[2, 4, 3, 3]));
            let (ro, rs) = (rand_tensor(&mut data, &[2, 4, 3, 3]), rand_tensor(&mut data, &[2, 4, 3, 3]));
            Box::new(move |g| {
                let (o, s) = (g.constant(xo.clone()), g.constant(xs.clone()));
                let out = fim.forward(g, o, s).expect("fim shapes");
                let a = project(g, out.common_opt, &ro);
                let c = project(g, out.common_sar, &rs);
                g.add(a, c)
            })
        }
        Subnet::Gsfm => {
            let gsfm = Gsfm::new(&mut b, "gsfm", 4);
            let adj = build_grid_adjacency::<f64>(4, 4, 8)?;
            let x = rand_tensor(&mut data, &[1, 4, 4, 4]);
            let r = rand_tensor(&mut data, &[1, 4, 4, 4]);
            Box::new(move |g| {
                let xi = g.constant(x.clone());
                let y = gsfm.forward(g, xi, &adj).expect("gsfm shapes");
                project(g, y, &r)
            })
        }
        Subnet::Stcfm => {
            let mut st = Stcfm::new(&mut b, 4);
            st.add_gsfm(&mut b, 4, 4, true, 8)?;
            let (xo, xs) = (rand_tensor(&mut data, &[1, 4, 4, 4]), rand_tensor(&mut data, &[1, 4, 4, 4]));
            let (ro, rs) = (rand_tensor(&mut data, &[1, 4, 4, 4]), rand_tensor(&mut data, &[1, 4, 4, 4]));
            Box::new(move |g| {
                let (o, s) = (g.constant(xo.clone()), g.constant(xs.clone()));
                let (co, cs, _) = st.forward(g, o, s).expect("stcfm shapes");
                let a = project(g, co, &ro);
                let c = project(g, cs, &rs);
                g.add(a, c)
            })
        }
        Subnet::Pgffm => {
            let fs = FusionScale::new(&mut b, 4, FusionPath::Gated(FusionMode::GatedSum), 4);
            let proj = fs.projector.as_ref().expect("gated path");
            randomize.push(proj.conv2.weight);
            randomize.extend(proj.conv2.bias);
            let shape = [1, 4, 3, 3];
            let ins: Vec<Tensor<f64>> = (0..4).map(|_| rand_tensor(&mut data, &shape)).collect();
            let dist = Tensor::from_fn(vec![1, 1, 3, 3], |_| data.random_range(0.0..2.0));
            let r = rand_tensor(&mut data, &shape);
            Box::new(move |g| {
                let v: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
                let d = g.constant(dist.clone());
                let out = fs.forward(g, v[0], v[1], Some((v[2], v[3])), Some(d)).expect("fusion shapes");
                project(g, out.fused, &r)
            })
        }
        Subnet::Decoder => {
            let widths = [4, 4, 6, 6];
            let dec = Decoder::new(&mut b, &widths, 4, 3);
            let feats: Vec<Tensor<f64>> = widths.iter().enumerate().map(|(s, &c)| rand_tensor(&mut data, &[1, c, 8 >> s, 8 >> s])).collect();
            let r = rand_tensor(&mut data, &[1, 3, 32, 32]);
            Box::new(move |g| {
                let v: Vec<Var> = feats.iter().map(|t| g.constant(t.clone())).collect();
                let y = dec.forward(g, &v).expect("decoder shapes");
                project(g, y, &r)
            })
        }
        Subnet::Loss => {
            let lin = Linear::new(&mut b, "cls", 4, 3);
            let x = rand_tensor(&mut data, &[2, 4, 3, 3]);
            let labels: Vec<ChangeLabelMap> = (0..2)
                .map(|_| ChangeLabelMap(Grid { height: 3, width: 3, cells: (0..9).map(|_| data.random_range(0..3u8)).collect() }))
                .collect();
            let weights = Arc::new(vec![0.5, 1.0, 2.0]);
            Box::new(move |g| {
                let xi = g.constant(x.clone());
                let t = to_tokens(g, xi);
                let y = lin.forward(g, t);
                let logits = from_tokens(g, y, 3, 3);
                let refs: Vec<&ChangeLabelMap> = labels.iter().collect();
                loss(g, logits, &refs, &weights).expect("loss shapes")
            })
        }
        Subnet::Encoder => {
            let cfg = EncoderConfig {
                in_channels: 2,
                base_channels: 2,
                depths: [1, 0, 0, 0],
                head_dim: 2,
                mlp_ratio: 1,
                image_size: 32,
                patch_kernel: 4,
                window: Some(4),
                adapter_reduction: None,
                frozen_backbone: false,
            };
            let enc = Encoder::new(&mut b, &cfg)?;
            // Layer norm over two channels is near-singular wherever they coincide;
            // a fixed gap keeps every token away from that set.
            if let Some(bias) = enc.stages[0].embed.bias {
                assign.push((bias, Tensor::new([2], vec![2.0, -2.0])));
            }
            let x = rand_tensor(&mut data, &[1, 2, 32, 32]);
            let rs: Vec<Tensor<f64>> = (0..4).map(|s| rand_tensor(&mut data, &[1, cfg.channels(s), cfg.side(s), cfg.side(s)])).collect();
            Box::new(move |g| {
                let xi = g.constant(x.clone());
                let ys = enc.forward(g, xi).expect("encoder shapes");
                let parts: Vec<Var> = ys.iter().zip(&rs).map(|(&y, r)| project(g, y, r)).collect();
                parts.into_iter().reduce(|a, c| g.add(a, c)).expect("four scales")
            })
        }
    };
    for id in randomize {
        let shape = store.value(id).shape().to_vec();
        *store.value_mut(id) = rand_tensor(&mut data, &shape);
    }
    for (id, v) in assign {
        *store.value_mut(id) = v;
    }
    let n: usize = store.iter().filter(|(_, l)| l.trainable()).map(|(_, l)| l.value.numel()).sum();
    if n > MAX_PARAMS {
        return Err(Error::InvalidArgument(format!("subnet {} has {n} parameters (limit {MAX_PARAMS})", subnet.name())));
    }
    Ok(f)
}

/// Trainable parameter count of the check instance.
pub fn param_count(subnet: Subnet) -> Result<usize> {
    let mut store = ParamStore::new();
    let _ = build(subnet, &mut store, 0)?;
    Ok(store.iter().filter(|(_, l)| l.trainable()).map(|(_, l)| l.value.numel()).sum())
}

pub fn grad_check(subnet: Subnet, tolerance: f64) -> Result<GradCheckReport> {
    grad_check_with(subnet, tolerance, 0, None)
}

/// Like [`grad_check`], scaling the analytic gradient of the first trainable
/// leaf by `1 + perturbation` as a negative control.
pub fn grad_check_corrupted(subnet: Subnet, tolerance: f64, perturbation: f64) -> Result<GradCheckReport> {
    grad_check_with(subnet, tolerance, 0, Some(perturbation))
}

pub fn grad_check_with(subnet: Subnet, tolerance: f64, seed: u64, perturbation: Option<f64>) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let f = build(subnet, &mut store, seed)?;
    let corruption = perturbation.and_then(|p| {
        store.iter().find(|(_, l)| l.trainable()).map(|(id, _)| Corruption { leaf: id, factor: 1.0 + p })
    });
    Ok(check_params(&mut store, |g| f(g), DEFAULT_STEP, tolerance, corruption))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_subnet_fits_the_parameter_budget() {
        for s in Subnet::ALL {
            let n = param_count(s).unwrap();
            assert!(n > 0 && n <= MAX_PARAMS, "{}: {n}", s.name());
        }
    }

    #[test]
    fn parse_round_trips() {
        for s in Subnet::ALL {
            assert_eq!(Subnet::parse(s.name()).unwrap(), s);
        }
        assert!(Subnet::parse("nope").is_err());
    }

    #[test]
    fn all_subnets_pass_and_corruption_fails() {
        for s in Subnet::ALL {
            let r = grad_check(s, 1e-4).unwrap();
            println!("{}: {} params, max rel {:.3e} at {:?}", s.name(), r.checked, r.max_rel_error, r.worst_leaf);
            assert!(r.passed(), "{}: {r:?}", s.name());
        }
        let lin = grad_check(Subnet::Linear, 1e-8).unwrap();
        assert!(lin.passed(), "{lin:?}");
        assert!(!grad_check_corrupted(Subnet::Fim, 1e-4, 0.1).unwrap().passed());
    }
}
