//! Parameterised building blocks shared by the encoders, fusion modules and decoder.

use mmcd_autograd::{Graph, LeafKind, ParamId, ParamStore, Scalar, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Weight initialisation scheme. Draws happen in `f64` so `f32` and `f64`
/// models built from the same seed hold the same (rounded) values.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    Uniform(f64),
    Normal(f64),
}

/// Registers named leaves under a dotted prefix with a shared RNG and frozen flag.
pub struct ParamBuilder<'a, T: Scalar> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
    frozen: bool,
}

impl<'a, T: Scalar> ParamBuilder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Self { store, rng, prefix: String::new(), frozen: false }
    }

    pub fn sub(&mut self, name: &str) -> ParamBuilder<'_, T> {
        let prefix = self.path(name);
        ParamBuilder { store: self.store, rng: self.rng, prefix, frozen: self.frozen }
    }

    /// Same prefix with a different frozen flag.
    pub fn with_frozen(&mut self, frozen: bool) -> ParamBuilder<'_, T> {
        ParamBuilder { store: self.store, rng: self.rng, prefix: self.prefix.clone(), frozen }
    }

    /// Child builder drawing from its own RNG stream seeded by `seed`.
    pub fn reseeded<R>(&mut self, seed: u64, f: impl FnOnce(&mut ParamBuilder<'_, T>) -> R) -> R {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = ParamBuilder { store: self.store, rng: &mut rng, prefix: self.prefix.clone(), frozen: self.frozen };
        f(&mut b)
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn weight(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        let t = self.draw(shape, init);
        let path = self.path(name);
        self.store.insert(path, t, self.frozen, LeafKind::Weight)
    }

    pub fn buffer(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        let path = self.path(name);
        self.store.insert(path, value, self.frozen, LeafKind::Buffer)
    }

    fn draw(&mut self, shape: &[usize], init: Init) -> Tensor<T> {
        let rng = &mut *self.rng;
        match init {
            Init::Zeros => Tensor::zeros(shape.to_vec()),
            Init::Ones => Tensor::ones(shape.to_vec()),
            Init::Uniform(b) => Tensor::from_fn(shape.to_vec(), |_| T::from_f64(rng.random_range(-b..=b))),
            Init::Normal(std) => Tensor::from_fn(shape.to_vec(), |_| {
                // Box-Muller keeps the stream independent of rand_distr internals.
                let u1: f64 = rng.random_range(f64::EPSILON..1.0);
                let u2: f64 = rng.random();
                T::from_f64(std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos())
            }),
        }
    }
}

/// `y = x·W + b` on the last axis; `W` is `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        Self::with_init(b, name, in_dim, out_dim, Init::Uniform(bound))
    }

    pub fn with_init<T: Scalar>(b: &mut ParamBuilder<'_, T>, name: &str, in_dim: usize, out_dim: usize, init: Init) -> Self {
        let mut s = b.sub(name);
        let weight = s.weight("weight", &[in_dim, out_dim], init);
        let bias = s.weight("bias", &[out_dim], Init::Zeros);
        Self { weight, bias, in_dim, out_dim }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let w = g.param(self.weight);
        let y = g.matmul(x, w);
        let b = g.param(self.bias);
        let b = broadcast_last(g, b, g.shape(y).len());
        g.add(y, b)
    }
}

/// Reshapes a `[C]` vector to `[1, .., 1, C]` of the given rank.
pub fn broadcast_last<T: Scalar>(g: &mut Graph<'_, T>, v: Var, rank: usize) -> Var {
    let c = g.shape(v)[0];
    let mut shape = vec![1; rank];
    shape[rank - 1] = c;
    g.reshape(v, &shape)
}

/// Reshapes a `[C]` vector to `[1, C, 1, 1]`.
pub fn broadcast_channel<T: Scalar>(g: &mut Graph<'_, T>, v: Var) -> Var {
    let c = g.shape(v)[0];
    g.reshape(v, &[1, c, 1, 1])
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// LeCun-uniform weights, zero bias, "same" padding for odd kernels at stride 1.
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, name: &str, c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Self {
        let bound = (3.0 / (c_in * kernel * kernel) as f64).sqrt();
        Self::with_init(b, name, c_in, c_out, kernel, stride, Init::Uniform(bound))
    }

    /// He-uniform variant for convolutions followed by ReLU.
    pub fn relu<T: Scalar>(b: &mut ParamBuilder<'_, T>, name: &str, c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Self {
        let bound = (6.0 / (c_in * kernel * kernel) as f64).sqrt();
        Self::with_init(b, name, c_in, c_out, kernel, stride, Init::Uniform(bound))
    }

    pub fn with_init<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        init: Init,
    ) -> Self {
        let mut s = b.sub(name);
        let weight = s.weight("weight", &[c_out, c_in, kernel, kernel], init);
        let bias = Some(s.weight("bias", &[c_out], Init::Zeros));
        let pad = if stride == 1 { kernel / 2 } else { 0 };
        Self { weight, bias, in_channels: c_in, out_channels: c_out, kernel, stride, pad }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub const NORM_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, name: &str, dim: usize) -> Self {
        let mut s = b.sub(name);
        Self { gamma: s.weight("gamma", &[dim], Init::Ones), beta: s.weight("beta", &[dim], Init::Zeros) }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let (gm, bt) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, gm, bt, NORM_EPS)
    }
}

/// Batch normalisation over `[N, C, H, W]`: batch statistics while training,
/// running averages otherwise.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, name: &str, channels: usize) -> Self {
        let mut s = b.sub(name);
        Self {
            gamma: s.weight("gamma", &[channels], Init::Ones),
            beta: s.weight("beta", &[channels], Init::Zeros),
            running_mean: s.buffer("running_mean", Tensor::zeros([channels])),
            running_var: s.buffer("running_var", Tensor::ones([channels])),
            momentum: 0.1,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let (gm, bt) = (g.param(self.gamma), g.param(self.beta));
        if g.is_training() {
            let (y, mean, var) = g.batch_norm_train(x, gm, bt, NORM_EPS);
            let m = T::from_f64(self.momentum);
            let keep = T::one() - m;
            let rm = g.params().value(self.running_mean).zip_map(&mean, |r, b| keep * r + m * b);
            let rv = g.params().value(self.running_var).zip_map(&var, |r, b| keep * r + m * b);
            g.queue_buffer_update(self.running_mean, rm);
            g.queue_buffer_update(self.running_var, rv);
            y
        } else {
            let rm = g.params().value(self.running_mean).clone();
            let eps = T::from_f64(NORM_EPS);
            let inv = g.params().value(self.running_var).map(|v| T::one() / (v + eps).sqrt());
            let c = rm.numel();
            let shift = g.constant(rm.map(|v| -v).reshape([1, c, 1, 1]));
            let inv = g.constant(inv.reshape([1, c, 1, 1]));
            let centred = g.add(x, shift);
            let normed = g.mul(centred, inv);
            let gm = broadcast_channel(g, gm);
            let bt = broadcast_channel(g, bt);
            let scaled = g.mul(normed, gm);
            g.add(scaled, bt)
        }
    }
}

/// `[B, C, H, W]` feature map to `[B, H·W, C]` tokens.
pub fn to_tokens<T: Scalar>(g: &mut Graph<'_, T>, x: Var) -> Var {
    let s = g.shape(x).to_vec();
    let p = g.permute(x, &[0, 2, 3, 1]);
    g.reshape(p, &[s[0], s[2] * s[3], s[1]])
}

/// `[B, H·W, C]` tokens back to a `[B, C, H, W]` feature map.
pub fn from_tokens<T: Scalar>(g: &mut Graph<'_, T>, x: Var, h: usize, w: usize) -> Var {
    let s = g.shape(x).to_vec();
    let r = g.reshape(x, &[s[0], h, w, s[2]]);
    g.permute(r, &[0, 3, 1, 2])
}
