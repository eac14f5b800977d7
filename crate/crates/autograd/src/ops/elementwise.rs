use crate::tensor::{numel, strides};
use crate::{Graph, Scalar, Tensor, Var};

/// Output shape for equal-rank broadcasting where each axis matches or is 1.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    assert_eq!(a.len(), b.len(), "broadcast needs equal ranks: {a:?} vs {b:?}");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            assert!(x == y || x == 1 || y == 1, "shapes {a:?} and {b:?} do not broadcast");
            x.max(y)
        })
        .collect()
}

fn bcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let s = strides(shape);
    shape.iter().zip(&s).zip(out).map(|((&d, &st), &o)| if d == 1 && o != 1 { 0 } else { st }).collect()
}

/// Visits every output position with the matching offsets into `a` and `b`.
fn for_each_bcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n = numel(out);
    if n == 0 {
        return;
    }
    let rank = out.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let last = rank - 1;
    let run = out[last];
    let (ra, rb) = (sa[last], sb[last]);
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut o = 0usize;
    for _ in 0..n / run {
        let (mut pa, mut pb) = (oa, ob);
        for _ in 0..run {
            f(o, pa, pb);
            o += 1;
            pa += ra;
            pb += rb;
        }
        let mut ax = last;
        while ax > 0 {
            ax -= 1;
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            oa -= sa[ax] * out[ax];
            ob -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

pub fn broadcast_zip<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let out = broadcast_shape(a.shape(), b.shape());
    let sa = bcast_strides(a.shape(), &out);
    let sb = bcast_strides(b.shape(), &out);
    let mut data = vec![T::zero(); numel(&out)];
    let (ad, bd) = (a.data(), b.data());
    for_each_bcast(&out, &sa, &sb, |o, pa, pb| data[o] = f(ad[pa], bd[pb]));
    Tensor::new(out, data)
}

/// Sums `grad` (broadcast output shape) down to `shape`.
pub fn reduce_to<T: Scalar>(grad: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if grad.shape() == shape {
        return grad.clone();
    }
    let out = grad.shape().to_vec();
    let st = bcast_strides(shape, &out);
    let zeros = vec![0usize; out.len()];
    let mut data = vec![T::zero(); numel(shape)];
    let gd = grad.data();
    for_each_bcast(&out, &st, &zeros, |o, pt, _| data[pt] += gd[o]);
    Tensor::new(shape.to_vec(), data)
}

/// `grad ⊙ other` reduced to `shape`, where `other` broadcasts against `grad`.
fn mul_reduce<T: Scalar>(grad: &Tensor<T>, other: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    reduce_to(&broadcast_zip(grad, other, |g, o| g * o), shape)
}

impl<T: Scalar> Graph<'_, T> {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = broadcast_zip(self.value(a), self.value(b), |x, y| x + y);
        self.push(
            value,
            &[a, b],
            Box::new(|go, p, _, need| {
                vec![
                    need[0].then(|| reduce_to(go, p[0].shape())),
                    need[1].then(|| reduce_to(go, p[1].shape())),
                ]
            }),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = broadcast_zip(self.value(a), self.value(b), |x, y| x - y);
        self.push(
            value,
            &[a, b],
            Box::new(|go, p, _, need| {
                vec![
                    need[0].then(|| reduce_to(go, p[0].shape())),
                    need[1].then(|| reduce_to(go, p[1].shape()).map(|v| -v)),
                ]
            }),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = broadcast_zip(self.value(a), self.value(b), |x, y| x * y);
        self.push(
            value,
            &[a, b],
            Box::new(|go, p, _, need| {
                vec![
                    need[0].then(|| mul_reduce(go, p[1], p[0].shape())),
                    need[1].then(|| mul_reduce(go, p[0], p[1].shape())),
                ]
            }),
        )
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).scale(s);
        self.push(value, &[a], Box::new(move |go, _, _, _| vec![Some(go.scale(s))]))
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|v| v + s);
        self.push(value, &[a], Box::new(|go, _, _, _| vec![Some(go.clone())]))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -T::one())
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let n = self.neg(a);
        self.add_scalar(n, T::one())
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(
            value,
            &[a],
            Box::new(|go, p, _, _| vec![Some(go.zip_map(p[0], |g, x| if x > T::zero() { g } else { T::zero() }))]),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push(value, &[a], Box::new(|go, _, y, _| vec![Some(go.zip_map(y, |g, s| g * s * (T::one() - s)))]))
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        self.push(value, &[a], Box::new(|go, p, _, _| vec![Some(go.zip_map(p[0], |g, x| g * gelu_grad(x)))]))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v * v);
        let two = T::from_f64(2.0);
        self.push(value, &[a], Box::new(move |go, p, _, _| vec![Some(go.zip_map(p[0], |g, x| two * g * x))]))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(
            value,
            &[a],
            Box::new(|go, p, _, _| vec![Some(Tensor::full(p[0].shape().to_vec(), go.item()))]),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = T::from_f64(self.value(a).numel() as f64);
        let s = self.sum_all(a);
        self.scale(s, T::one() / n)
    }

    /// `Σ a ⊙ c` for a constant `c` of the same shape; the random-projection probe loss.
    pub fn dot_const(&mut self, a: Var, c: Tensor<T>) -> Var {
        assert_eq!(self.shape(a), c.shape(), "dot_const shape mismatch");
        let value = Tensor::scalar(self.value(a).data().iter().zip(c.data()).map(|(&x, &y)| x * y).sum());
        self.push(value, &[a], Box::new(move |go, _, _, _| vec![Some(c.scale(go.item()))]))
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn gelu<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    x * half * (T::one() + (x / T::from_f64(std::f64::consts::SQRT_2)).erf())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    let cdf = half * (T::one() + (x / T::from_f64(std::f64::consts::SQRT_2)).erf());
    let pdf = (-half * x * x).exp() / T::from_f64((2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}
