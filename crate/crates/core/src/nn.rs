//! Parameter containers and the layer primitives the networks are built from.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::tensor::sparse::{self, Kernel2d, SparseMap};
use crate::tensor::{Real, Tensor};

/// Named, ordered parameter tensors of one network.
#[derive(Clone, Debug)]
pub struct ParamSet<T: Real> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        ParamSet { names: Vec::new(), tensors: Vec::new() }
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, data: Vec<T>, shape: &[usize]) -> usize {
        self.names.push(name.into());
        self.tensors.push(Tensor::param(data, shape));
        self.tensors.len() - 1
    }

    pub fn get(&self, i: usize) -> &Tensor<T> {
        &self.tensors[i]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Replace the values of parameter `i` (shape unchanged).
    pub fn set(&mut self, i: usize, data: Vec<T>) {
        let shape = self.tensors[i].shape().to_vec();
        self.tensors[i] = Tensor::param(data, &shape);
    }

    /// Gradients of `loss` with respect to every parameter (zeros where unused).
    pub fn grads(&self, loss: &Tensor<T>) -> Vec<Vec<T>> {
        let refs: Vec<&Tensor<T>> = self.tensors.iter().collect();
        crate::tensor::grad(loss, &refs, false)
            .into_iter()
            .zip(&self.tensors)
            .map(|(g, p)| g.map_or_else(|| vec![T::zero(); p.numel()], |g| g.to_vec()))
            .collect()
    }

    /// Like [`ParamSet::grads`] for several sets sharing one backward pass.
    pub fn grads_joint(sets: &[&ParamSet<T>], loss: &Tensor<T>) -> Vec<Vec<Vec<T>>> {
        let refs: Vec<&Tensor<T>> = sets.iter().flat_map(|s| s.tensors.iter()).collect();
        let mut all = crate::tensor::grad(loss, &refs, false).into_iter().zip(refs.iter());
        sets.iter()
            .map(|s| {
                (&mut all)
                    .take(s.len())
                    .map(|(g, p)| g.map_or_else(|| vec![T::zero(); p.numel()], |g| g.to_vec()))
                    .collect()
            })
            .collect()
    }

    /// Same values in another precision.
    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor::param(t.data().iter().map(|v| U::of(v.f64())).collect(), t.shape()))
                .collect(),
        }
    }

    pub fn same_layout(&self, other: &ParamSet<T>) -> bool {
        self.names == other.names && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.shape() == b.shape())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

/// Allocates parameters with the fan-in uniform initialisation
/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` used for both weights and biases.
pub struct Init<'a, T: Real, R: Rng> {
    pub params: &'a mut ParamSet<T>,
    pub rng: &'a mut R,
}

impl<T: Real, R: Rng> Init<'_, T, R> {
    fn uniform(&mut self, name: String, shape: &[usize], fan_in: usize) -> usize {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::of(dist.sample(self.rng))).collect();
        self.params.push(name, data, shape)
    }

    pub fn linear(&mut self, name: &str, din: usize, dout: usize) -> Linear {
        let w = self.uniform(format!("{name}.weight"), &[din, dout], din);
        let b = self.uniform(format!("{name}.bias"), &[dout], din);
        Linear { w, b, din, dout }
    }

    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> Conv {
        let w = self.uniform(format!("{name}.weight"), &[k * k * cin, cout], k * k * cin);
        let b = self.uniform(format!("{name}.bias"), &[cout], k * k * cin);
        Conv { w, b, cin, cout, k }
    }

    pub fn scalar(&mut self, name: &str, value: f64) -> usize {
        self.params.push(name, vec![T::of(value)], &[1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    w: usize,
    b: usize,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn forward<T: Real>(&self, p: &ParamSet<T>, x: &Tensor<T>) -> Tensor<T> {
        x.matmul(p.get(self.w)).add_bias(p.get(self.b))
    }
}

/// Same-padded, stride-1 convolution on NHWC input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv {
    w: usize,
    b: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
}

impl Conv {
    pub fn forward<T: Real>(&self, p: &ParamSet<T>, x: &Tensor<T>) -> Tensor<T> {
        conv2d(x, p.get(self.w), p.get(self.b), self.k)
    }
}

/// I.i.d. standard-normal constant tensor.
pub fn randn<T: Real, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    let n: usize = shape.iter().product();
    Tensor::from_vec((0..n).map(|_| T::of(rng.sample::<f64, _>(StandardNormal))).collect(), shape)
}

fn dims4(x: &Tensor<impl Real>) -> [usize; 4] {
    let s = x.shape();
    assert_eq!(s.len(), 4, "expected NHWC tensor, got shape {s:?}");
    [s[0], s[1], s[2], s[3]]
}

pub fn conv2d<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, k: usize) -> Tensor<T> {
    let [n, h, wd, c] = dims4(x);
    let cout = w.shape()[1];
    assert_eq!(w.shape()[0], k * k * c, "conv weight rows must be k*k*cin");
    let cols = if k == 1 {
        x.reshape(&[n * h * wd, c])
    } else {
        x.sparse(&sparse::im2col(h, wd, c, k), false).reshape(&[n * h * wd, k * k * c])
    };
    cols.matmul(w).add_bias(b).reshape(&[n, h, wd, cout])
}

pub fn upsample2<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let [n, h, w, c] = dims4(x);
    x.sparse(&sparse::upsample2(h, w, c), false).reshape(&[n, 2 * h, 2 * w, c])
}

pub fn avgpool2<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let [n, h, w, c] = dims4(x);
    x.sparse(&sparse::avgpool2(h, w, c), false).reshape(&[n, h / 2, w / 2, c])
}

/// `[N, H, W, C] -> [N, C]`.
pub fn global_avg<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let [n, h, w, c] = dims4(x);
    x.sparse(&sparse::global_avg(h, w, c), false).reshape(&[n, c])
}

/// 2x2 max pooling. The selection is frozen at forward time, so the map is
/// rebuilt per call and not cached.
pub fn maxpool2<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let [n, h, w, c] = dims4(x);
    let (oh, ow) = (h / 2, w / 2);
    let d = x.data();
    let in_len = n * h * w * c;
    let mut e = Vec::with_capacity(n * oh * ow * c);
    for b in 0..n {
        for y in 0..oh {
            for xx in 0..ow {
                for ci in 0..c {
                    let mut best = usize::MAX;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let i = ((b * h + 2 * y + dy) * w + 2 * xx + dx) * c + ci;
                        if best == usize::MAX || d[i] > d[best] {
                            best = i;
                        }
                    }
                    e.push((((b * oh + y) * ow + xx) * c + ci, best, 1.0));
                }
            }
        }
    }
    let map = Arc::new(SparseMap::new(in_len, n * oh * ow * c, e));
    x.reshape(&[in_len]).sparse(&map, false).reshape(&[n, oh, ow, c])
}

/// Concatenate two tensors along the trailing axis (leading axes must agree).
pub fn concat_last<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (sa, sb) = (a.shape(), b.shape());
    assert_eq!(sa[..sa.len() - 1], sb[..sb.len() - 1], "concat leading dims differ");
    let (ca, cb) = (sa[sa.len() - 1], sb[sb.len() - 1]);
    let total = ca + cb;
    let mut shape = sa.to_vec();
    *shape.last_mut().expect("rank >= 1") = total;
    let ea = a.sparse(&sparse::embed_trailing(total, 0, ca), false);
    let eb = b.sparse(&sparse::embed_trailing(total, ca, cb), false);
    ea.add(&eb).reshape(&shape)
}

/// Depthwise reflection-padded filtering with every kernel in `kernels`,
/// stacked along channels.
pub fn filter_bank<T: Real>(x: &Tensor<T>, kernels: &[Kernel2d]) -> Tensor<T> {
    let [n, h, w, c] = dims4(x);
    x.sparse(&sparse::filter_bank(h, w, c, kernels), false).reshape(&[n, h, w, c * kernels.len()])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad;

    #[test]
    fn conv_matches_direct_loop() {
        let (n, h, w, c, co, k) = (2, 4, 3, 2, 3, 3);
        let x: Vec<f64> = (0..n * h * w * c).map(|i| ((i * 7) % 11) as f64 / 11.0 - 0.5).collect();
        let wt: Vec<f64> = (0..k * k * c * co).map(|i| ((i * 5) % 13) as f64 / 13.0 - 0.5).collect();
        let b = vec![0.1, -0.2, 0.3];
        let out = conv2d(
            &Tensor::<f64>::from_vec(x.clone(), &[n, h, w, c]),
            &Tensor::from_vec(wt.clone(), &[k * k * c, co]),
            &Tensor::from_vec(b.clone(), &[co]),
            k,
        );
        for bi in 0..n {
            for y in 0..h {
                for xx in 0..w {
                    for o in 0..co {
                        let mut acc = b[o];
                        for ky in 0..k {
                            for kx in 0..k {
                                let (sy, sx) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                for ci in 0..c {
                                    acc += x[((bi * h + sy as usize) * w + sx as usize) * c + ci]
                                        * wt[((ky * k + kx) * c + ci) * co + o];
                                }
                            }
                        }
                        let got = out.data()[((bi * h + y) * w + xx) * co + o];
                        assert!((got - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn concat_and_pools_have_expected_values() {
        let a = Tensor::<f64>::from_f64(&[1., 2., 3., 4.], &[2, 2]);
        let b = Tensor::<f64>::from_f64(&[9., 8.], &[2, 1]);
        assert_eq!(concat_last(&a, &b).data(), &[1., 2., 9., 3., 4., 8.]);
        let x = Tensor::<f64>::from_f64(&[1., 5., 3., 2.], &[1, 2, 2, 1]);
        assert_eq!(avgpool2(&x).data(), &[2.75]);
        assert_eq!(maxpool2(&x).data(), &[5.]);
        assert_eq!(upsample2(&avgpool2(&x)).data(), &[2.75; 4]);
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let x = Tensor::<f64>::param(vec![1., 5., 3., 2.], &[1, 2, 2, 1]);
        let g = grad(&maxpool2(&x).sum(), &[&x], false)[0].clone().unwrap();
        assert_eq!(g.data(), &[0., 1., 0., 0.]);
    }
}
