//! Finite-difference checks for every differentiable op.

use std::sync::Arc;

use mmcd_autograd::check::{check_params, DEFAULT_STEP};
use mmcd_autograd::{Csr, Graph, LeafKind, ParamId, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-6;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

struct Case {
    store: ParamStore<f64>,
    rng: ChaCha8Rng,
}

impl Case {
    fn new(seed: u64) -> Self {
        Self { store: ParamStore::new(), rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    fn leaf(&mut self, name: &str, shape: &[usize]) -> ParamId {
        let t = rand_tensor(&mut self.rng, shape);
        self.store.insert(name, t, false, LeafKind::Weight)
    }

    fn run(mut self, f: impl Fn(&mut Graph<f64>) -> Var) {
        // probe shape from one inference pass
        let shape = {
            let mut g = Graph::inference(&self.store);
            let out = f(&mut g);
            g.shape(out).to_vec()
        };
        let probe = rand_tensor(&mut self.rng, &shape);
        let report = check_params(
            &mut self.store,
            |g| {
                let out = f(g);
                g.dot_const(out, probe.clone())
            },
            DEFAULT_STEP,
            TOL,
            None,
        );
        assert!(report.passed(), "{report:?}");
        assert!(report.checked > 0);
    }
}

#[test]
fn broadcast_arithmetic() {
    let mut c = Case::new(1);
    let a = c.leaf("a", &[2, 3, 4]);
    let b = c.leaf("b", &[1, 3, 1]);
    let m = c.leaf("m", &[2, 1, 4]);
    c.run(|g| {
        let (a, b, m) = (g.param(a), g.param(b), g.param(m));
        let s = g.add(a, b);
        let d = g.sub(s, m);
        let p = g.mul(d, m);
        let q = g.one_minus(p);
        g.scale(q, 0.7)
    });
}

#[test]
fn activations() {
    let mut c = Case::new(2);
    let a = c.leaf("a", &[3, 5]);
    c.run(|g| {
        let a = g.param(a);
        let s = g.sigmoid(a);
        let ge = g.gelu(a);
        let sq = g.square(a);
        let r = g.relu(a);
        let x = g.add(s, ge);
        let y = g.add(sq, r);
        g.mul(x, y)
    });
}

#[test]
fn matmul_and_bmm() {
    let mut c = Case::new(3);
    let x = c.leaf("x", &[2, 3, 4]);
    let w = c.leaf("w", &[4, 5]);
    let k = c.leaf("k", &[2, 6, 5]);
    let v = c.leaf("v", &[2, 6, 3]);
    c.run(|g| {
        let (x, w, k, v) = (g.param(x), g.param(w), g.param(k), g.param(v));
        let q = g.matmul(x, w); // [2,3,5]
        let s = g.bmm(q, k, true); // [2,3,6]
        let a = g.softmax(s);
        g.bmm(a, v, false) // [2,3,3]
    });
}

#[test]
fn normalizations() {
    let mut c = Case::new(4);
    let x = c.leaf("x", &[2, 3, 2, 3]);
    let gm = c.leaf("gm", &[3]);
    let bt = c.leaf("bt", &[3]);
    let t = c.leaf("t", &[4, 3]);
    c.run(|g| {
        let (x, gm, bt, t) = (g.param(x), g.param(gm), g.param(bt), g.param(t));
        let (y, _, _) = g.batch_norm_train(x, gm, bt, 1e-5);
        let z = g.layer_norm(t, gm, bt, 1e-5);
        let ys = g.sum_all(y);
        let zs = g.sum_all(z);
        let y2 = g.square(y);
        let y2s = g.sum_all(y2);
        let z2 = g.square(z);
        let z2s = g.sum_all(z2);
        let a = g.add(ys, zs);
        let b = g.add(y2s, z2s);
        let a = g.reshape(a, &[1]);
        let b = g.reshape(b, &[1]);
        g.concat(&[a, b], 0)
    });
}

#[test]
fn convolutions() {
    let mut c = Case::new(5);
    let x = c.leaf("x", &[2, 2, 5, 4]);
    let w3 = c.leaf("w3", &[3, 2, 3, 3]);
    let b3 = c.leaf("b3", &[3]);
    let w1 = c.leaf("w1", &[2, 3, 1, 1]);
    let w2 = c.leaf("w2", &[2, 2, 2, 2]);
    c.run(|g| {
        let (x, w3, b3, w1, w2) = (g.param(x), g.param(w3), g.param(b3), g.param(w1), g.param(w2));
        let y = g.conv2d(x, w3, Some(b3), 1, 1);
        let z = g.conv2d(y, w1, None, 1, 0);
        g.conv2d(z, w2, None, 2, 0)
    });
}

#[test]
fn strided_padded_conv() {
    let mut c = Case::new(6);
    let x = c.leaf("x", &[1, 2, 6, 6]);
    let w = c.leaf("w", &[2, 2, 3, 3]);
    c.run(|g| {
        let (x, w) = (g.param(x), g.param(w));
        g.conv2d(x, w, None, 2, 1)
    });
}

#[test]
fn shape_ops() {
    let mut c = Case::new(7);
    let x = c.leaf("x", &[2, 3, 4]);
    let y = c.leaf("y", &[2, 1, 4]);
    c.run(|g| {
        let (x, y) = (g.param(x), g.param(y));
        let cat = g.concat(&[x, y], 1); // [2,4,4]
        let p = g.permute(cat, &[2, 0, 1]);
        let r = g.roll(p, &[1, 0, -1]);
        let n = g.narrow(r, 0, 1, 2);
        g.reshape(n, &[4, 4])
    });
}

#[test]
fn resampling() {
    let mut c = Case::new(8);
    let x = c.leaf("x", &[1, 2, 3, 4]);
    c.run(|g| {
        let x = g.param(x);
        let u = g.upsample_bilinear(x, 2);
        let p = g.avg_pool2(u);
        let u4 = g.upsample_bilinear(p, 4);
        g.avg_pool2(u4)
    });
}

#[test]
fn sparse_product() {
    let mut c = Case::new(9);
    let x = c.leaf("x", &[2, 4, 3]);
    let adj = Arc::new(Csr::from_triplets(
        4,
        4,
        vec![(0, 0, 0.5), (0, 1, 0.25), (1, 0, 0.25), (1, 3, -1.0), (2, 2, 2.0), (3, 1, 0.75), (3, 1, 0.25)],
    ));
    c.run(move |g| {
        let x = g.param(x);
        g.spmm(adj.clone(), x)
    });
}

#[test]
fn weighted_cross_entropy() {
    let mut c = Case::new(10);
    let l = c.leaf("logits", &[2, 3, 2, 2]);
    let labels = Arc::new(vec![0, 1, 2, 1, 2, 2, 0, 1]);
    let weights = Arc::new(vec![0.5, 1.0, 2.0]);
    c.run(move |g| {
        let l = g.param(l);
        let ce = g.cross_entropy(l, labels.clone(), weights.clone());
        g.reshape(ce, &[1])
    });
}

#[test]
fn frozen_leaves_receive_no_gradient() {
    let mut store = ParamStore::<f64>::new();
    let a = store.insert("a", Tensor::from_f64([2], &[1.0, 2.0]), true, LeafKind::Weight);
    let b = store.insert("b", Tensor::from_f64([2], &[3.0, 4.0]), false, LeafKind::Weight);
    let mut g = Graph::training(&store);
    let (av, bv) = (g.param(a), g.param(b));
    let p = g.mul(av, bv);
    let s = g.sum_all(p);
    let grads = g.backward(s);
    assert!(grads.param(a).is_none());
    assert_eq!(grads.param(b).unwrap().data(), &[1.0, 2.0]);
}
