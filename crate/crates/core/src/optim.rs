use mmcd_autograd::{Gradients, ParamStore, Scalar, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 5e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction. Only leaves whose [`mmcd_autograd::Leaf::trainable`]
/// is true are ever written.
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    moments: Vec<Option<(Tensor<T>, Tensor<T>)>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, moments: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) {
        self.step_scaled(store, grads, 1.0);
    }

    /// Adam step on `scale · grads`.
    pub fn step_scaled(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>, scale: f64) {
        let scale = T::from_f64(scale);
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (lr, eps) = (T::from_f64(c.lr), T::from_f64(c.eps));
        let (bc1, bc2) = (T::from_f64(bc1), T::from_f64(bc2));
        if self.moments.len() < store.len() {
            self.moments.resize_with(store.len(), || None);
        }
        for (id, g) in grads.params() {
            if !store.leaf(id).trainable() {
                continue;
            }
            let (m, v) = self.moments[id.0].get_or_insert_with(|| (Tensor::zeros(g.shape().to_vec()), Tensor::zeros(g.shape().to_vec())));
            let p = store.value_mut(id).data_mut();
            for (((pi, mi), vi), &gi) in p.iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                let gi = gi * scale;
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// L2 norm of the gradients of all trainable leaves.
pub fn global_grad_norm<T: Scalar>(store: &ParamStore<T>, grads: &Gradients<T>) -> f64 {
    grads
        .params()
        .into_iter()
        .filter(|(id, _)| store.leaf(*id).trainable())
        .flat_map(|(_, g)| g.data().iter().map(|v| v.to_f64().unwrap_or(f64::NAN)))
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Factor that rescales a gradient of norm `norm` to at most `max_norm`.
pub fn clip_factor(norm: f64, max_norm: Option<f64>) -> f64 {
    match max_norm {
        Some(m) if norm > m => m / norm,
        _ => 1.0,
    }
}
