use crate::tensor::{inverse_permutation, numel};
use crate::{Graph, Scalar, Tensor, Var};

impl<T: Scalar> Graph<'_, T> {
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self.value(x).clone().reshape(shape.to_vec());
        self.push(
            value,
            &[x],
            Box::new(|go, p, _, _| vec![Some(go.clone().reshape(p[0].shape().to_vec()))]),
        )
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Var {
        let value = self.value(x).permute(perm);
        let inv = inverse_permutation(perm);
        self.push(value, &[x], Box::new(move |go, _, _, _| vec![Some(go.permute(&inv))]))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let value = self.value(x).narrow(axis, start, len);
        self.push(
            value,
            &[x],
            Box::new(move |go, p, _, _| {
                let shape = p[0].shape();
                let outer = numel(&shape[..axis]);
                let inner = numel(&shape[axis + 1..]);
                let d = shape[axis];
                let mut gx = vec![T::zero(); p[0].numel()];
                let gd = go.data();
                for o in 0..outer {
                    let dst = o * d * inner + start * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(Tensor::new(shape.to_vec(), gx))]
            }),
        )
    }

    /// Concatenation along `axis`; all other axes must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Var {
        assert!(!xs.is_empty(), "concat of nothing");
        let first = self.shape(xs[0]).to_vec();
        let mut sizes = Vec::with_capacity(xs.len());
        for &v in xs {
            let s = self.shape(v);
            assert_eq!(s.len(), first.len(), "concat rank mismatch");
            for (i, (&a, &b)) in s.iter().zip(&first).enumerate() {
                assert!(i == axis || a == b, "concat shape mismatch {s:?} vs {first:?}");
            }
            sizes.push(s[axis]);
        }
        let total: usize = sizes.iter().sum();
        let outer = numel(&first[..axis]);
        let inner = numel(&first[axis + 1..]);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &sz) in xs.iter().zip(&sizes) {
                let d = self.value(v).data();
                data.extend_from_slice(&d[o * sz * inner..(o + 1) * sz * inner]);
            }
        }
        let mut shape = first.clone();
        shape[axis] = total;
        self.push(
            Tensor::new(shape, data),
            xs,
            Box::new(move |go, _, _, need| {
                let mut start = 0;
                sizes
                    .iter()
                    .zip(need)
                    .map(|(&sz, &nd)| {
                        let g = nd.then(|| go.narrow(axis, start, sz));
                        start += sz;
                        g
                    })
                    .collect()
            }),
        )
    }

    /// Cyclic shift: `out[i] = x[(i - shift) mod n]` along each axis.
    pub fn roll(&mut self, x: Var, shifts: &[isize]) -> Var {
        assert_eq!(shifts.len(), self.shape(x).len(), "roll needs one shift per axis");
        let value = roll(self.value(x), shifts);
        let back: Vec<isize> = shifts.iter().map(|s| -s).collect();
        self.push(value, &[x], Box::new(move |go, _, _, _| vec![Some(roll(go, &back))]))
    }
}

pub fn roll<T: Scalar>(x: &Tensor<T>, shifts: &[isize]) -> Tensor<T> {
    let shape = x.shape().to_vec();
    let mut out = x.clone();
    for (axis, &s) in shifts.iter().enumerate() {
        let d = shape[axis] as isize;
        if d == 0 {
            continue;
        }
        let s = s.rem_euclid(d) as usize;
        if s == 0 {
            continue;
        }
        let d = d as usize;
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis + 1..]);
        let src = out.clone();
        let (sd, od) = (src.data(), out.data_mut());
        for o in 0..outer {
            for i in 0..d {
                let j = (i + s) % d;
                let from = (o * d + i) * inner;
                let to = (o * d + j) * inner;
                od[to..to + inner].copy_from_slice(&sd[from..from + inner]);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roll_shifts_forward() {
        let t = Tensor::<f64>::from_f64([4], &[1., 2., 3., 4.]);
        assert_eq!(roll(&t, &[1]).data(), &[4., 1., 2., 3.]);
        assert_eq!(roll(&t, &[-1]).data(), &[2., 3., 4., 1.]);
    }
}
