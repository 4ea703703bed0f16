//! A small reverse-mode autodiff engine over dense row-major tensors.
//!
//! Every backward rule is written in terms of the same differentiable
//! operations as the forward pass, so gradients can themselves be
//! differentiated (`grad(.., create_graph = true)`). The R1 penalty relies on
//! this: it differentiates the norm of an input gradient with respect to the
//! discriminator parameters.
//!
//! Images use NHWC layout throughout. Convolutions are lowered to a sparse
//! gather (`im2col`) followed by a dense matmul; pooling, upsampling, fixed
//! filters and spatial transforms are all sparse linear maps whose adjoint is
//! the transposed map.

mod autograd;
mod real;
pub mod sparse;

use std::fmt;
use std::sync::Arc;

pub use autograd::grad;
pub use real::Real;
use sparse::SparseMap;

#[derive(Clone)]
pub struct Tensor<T: Real>(Arc<Node<T>>);

struct Node<T: Real> {
    data: Arc<[T]>,
    shape: Vec<usize>,
    requires_grad: bool,
    grad_fn: Option<GradFn<T>>,
}

struct GradFn<T: Real> {
    op: Op<T>,
    inputs: Vec<Tensor<T>>,
}

#[derive(Clone)]
enum Op<T: Real> {
    Add,
    Sub,
    Mul,
    Scale(T),
    AddScalar,
    MulConst(Arc<[T]>),
    Pow(T),
    Tanh,
    Sigmoid,
    Softplus,
    MatMul { ta: bool, tb: bool },
    Sparse { map: Arc<SparseMap>, transpose: bool },
    Reduce { rows: usize, cols: usize, axis: usize },
    Expand { rows: usize, cols: usize, axis: usize },
    Reshape,
}

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Real> Tensor<T> {
    fn from_parts(data: Arc<[T]>, shape: Vec<usize>, requires_grad: bool, grad_fn: Option<GradFn<T>>) -> Self {
        debug_assert_eq!(data.len(), numel(&shape), "data length does not match shape {shape:?}");
        Tensor(Arc::new(Node { data, shape, requires_grad, grad_fn }))
    }

    /// Constant tensor (no gradient tracking).
    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Self {
        assert_eq!(data.len(), numel(shape), "data length {} does not match shape {shape:?}", data.len());
        Self::from_parts(data.into(), shape.to_vec(), false, None)
    }

    /// Leaf tensor that gradients can be taken with respect to.
    pub fn param(data: Vec<T>, shape: &[usize]) -> Self {
        assert_eq!(data.len(), numel(shape), "data length {} does not match shape {shape:?}", data.len());
        Self::from_parts(data.into(), shape.to_vec(), true, None)
    }

    pub fn from_f64(data: &[f64], shape: &[usize]) -> Self {
        Self::from_vec(data.iter().map(|&v| T::of(v)).collect(), shape)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(T::zero(), shape)
    }

    pub fn full(v: T, shape: &[usize]) -> Self {
        Self::from_vec(vec![v; numel(shape)], shape)
    }

    pub fn scalar(v: T) -> Self {
        Self::from_vec(vec![v], &[1])
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.to_vec()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.0.data.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::from_parts(self.0.data.clone(), self.0.shape.clone(), false, None)
    }

    /// Same values as a fresh gradient-tracking leaf.
    pub fn as_leaf(&self) -> Self {
        Self::from_parts(self.0.data.clone(), self.0.shape.clone(), true, None)
    }

    pub fn is_finite(&self) -> bool {
        self.0.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn id(&self) -> usize {
        Arc::as_ptr(&self.0) as usize
    }

    fn make(data: Vec<T>, shape: Vec<usize>, op: Op<T>, inputs: &[&Tensor<T>]) -> Self {
        let tracked = inputs.iter().any(|t| t.requires_grad());
        let grad_fn = tracked.then(|| GradFn { op, inputs: inputs.iter().map(|t| (*t).clone()).collect() });
        Self::from_parts(data.into(), shape, tracked, grad_fn)
    }

    fn map(&self, op: Op<T>, f: impl Fn(T) -> T) -> Self {
        let data = self.data().iter().map(|&v| f(v)).collect();
        Self::make(data, self.shape().to_vec(), op, &[self])
    }

    fn zip(&self, other: &Self, op: Op<T>, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape(), other.shape(), "elementwise shape mismatch");
        let data = self.data().iter().zip(other.data()).map(|(&a, &b)| f(a, b)).collect();
        Self::make(data, self.shape().to_vec(), op, &[self, other])
    }

    pub fn add(&self, other: &Self) -> Self {
        self.zip(other, Op::Add, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.zip(other, Op::Sub, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Self {
        self.zip(other, Op::Mul, |a, b| a * b)
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(Op::Scale(c), |v| v * c)
    }

    pub fn neg(&self) -> Self {
        self.scale(-T::one())
    }

    pub fn add_scalar(&self, c: T) -> Self {
        self.map(Op::AddScalar, |v| v + c)
    }

    /// Elementwise product with a constant (untracked) factor.
    pub fn mul_const(&self, factor: Arc<[T]>) -> Self {
        assert_eq!(factor.len(), self.numel(), "mul_const length mismatch");
        let data = self.data().iter().zip(factor.iter()).map(|(&a, &b)| a * b).collect();
        Self::make(data, self.shape().to_vec(), Op::MulConst(factor), &[self])
    }

    /// Product with an untracked tensor of the same shape.
    pub fn mul_fixed(&self, factor: &Tensor<T>) -> Self {
        assert_eq!(factor.shape(), self.shape(), "mul_fixed shape mismatch");
        self.mul_const(factor.0.data.clone())
    }

    fn masked(&self, f: impl Fn(T) -> T) -> Self {
        let mask: Arc<[T]> = self.data().iter().map(|&v| f(v)).collect();
        self.mul_const(mask)
    }

    pub fn relu(&self) -> Self {
        self.masked(|v| if v > T::zero() { T::one() } else { T::zero() })
    }

    pub fn leaky_relu(&self, slope: T) -> Self {
        self.masked(move |v| if v > T::zero() { T::one() } else { slope })
    }

    pub fn abs(&self) -> Self {
        self.masked(|v| if v < T::zero() { -T::one() } else { T::one() })
    }

    /// `min(self, bound)` elementwise.
    pub fn clamp_max(&self, bound: T) -> Self {
        let keep: Arc<[T]> = self.data().iter().map(|&v| if v < bound { T::one() } else { T::zero() }).collect();
        let fill: Vec<T> = keep.iter().map(|&k| (T::one() - k) * bound).collect();
        let fill = Tensor::from_vec(fill, self.shape());
        self.mul_const(keep).add(&fill)
    }

    pub fn pow(&self, p: T) -> Self {
        self.map(Op::Pow(p), |v| v.powf(p))
    }

    pub fn square(&self) -> Self {
        self.mul(self)
    }

    /// `sqrt(max(x, 0) + eps)`, finite derivative everywhere.
    pub fn sqrt_eps(&self, eps: T) -> Self {
        self.relu().add_scalar(eps).pow(T::of(0.5))
    }

    pub fn tanh(&self) -> Self {
        self.map(Op::Tanh, tanh)
    }

    pub fn sigmoid(&self) -> Self {
        self.map(Op::Sigmoid, sigmoid)
    }

    pub fn softplus(&self) -> Self {
        self.map(Op::Softplus, softplus)
    }

    /// `op(a) @ op(b)` for rank-2 operands, where `op` optionally transposes.
    pub fn matmul_t(&self, other: &Self, ta: bool, tb: bool) -> Self {
        let (sa, sb) = (self.shape(), other.shape());
        assert!(sa.len() == 2 && sb.len() == 2, "matmul expects rank-2 operands, got {sa:?} and {sb:?}");
        let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        assert_eq!(k, k2, "matmul inner dimension mismatch: {sa:?} x {sb:?} (ta={ta}, tb={tb})");
        let mut out = vec![T::zero(); m * n];
        let (rsa, csa) = if ta { (1, sa[1] as isize) } else { (sa[1] as isize, 1) };
        let (rsb, csb) = if tb { (1, sb[1] as isize) } else { (sb[1] as isize, 1) };
        if n <= 4 && m * k >= 4096 {
            narrow_matmul(self.data(), other.data(), (m, k, n), ta, (rsb as usize, csb as usize), &mut out);
        } else if m > 0 && n > 0 && k > 0 {
            // SAFETY: strides describe the row-major buffers of the checked shapes.
            unsafe {
                T::gemm(
                    m, k, n, T::one(),
                    self.data().as_ptr(), rsa, csa,
                    other.data().as_ptr(), rsb, csb,
                    T::zero(), out.as_mut_ptr(), n as isize, 1,
                );
            }
        }
        Self::make(out, vec![m, n], Op::MatMul { ta, tb }, &[self, other])
    }

    pub fn matmul(&self, other: &Self) -> Self {
        self.matmul_t(other, false, false)
    }

    /// Apply a per-block sparse linear map (or its transpose).
    pub fn sparse(&self, map: &Arc<SparseMap>, transpose: bool) -> Self {
        let (in_len, out_len) = if transpose { (map.out_len(), map.in_len()) } else { (map.in_len(), map.out_len()) };
        assert!(
            in_len > 0 && self.numel() % in_len == 0,
            "sparse map block {in_len} does not divide tensor of {} elements",
            self.numel()
        );
        let blocks = self.numel() / in_len;
        let out = map.apply(self.data(), transpose);
        let mut shape = vec![blocks];
        shape.push(out_len);
        Self::make(out, shape, Op::Sparse { map: map.clone(), transpose }, &[self])
    }

    pub fn reshape(&self, shape: &[usize]) -> Self {
        assert_eq!(numel(shape), self.numel(), "reshape {:?} -> {shape:?}", self.shape());
        if !self.requires_grad() {
            return Self::from_parts(self.0.data.clone(), shape.to_vec(), false, None);
        }
        Self::from_parts(
            self.0.data.clone(),
            shape.to_vec(),
            true,
            Some(GradFn { op: Op::Reshape, inputs: vec![self.clone()] }),
        )
    }

    /// Sum a `[rows, cols]` view along `axis` (0 → `[cols]`, 1 → `[rows]`).
    pub fn reduce(&self, rows: usize, cols: usize, axis: usize) -> Self {
        assert_eq!(rows * cols, self.numel(), "reduce view mismatch");
        let d = self.data();
        let out = if axis == 0 {
            let mut acc = vec![T::zero(); cols];
            for r in 0..rows {
                for (a, &v) in acc.iter_mut().zip(&d[r * cols..(r + 1) * cols]) {
                    *a = *a + v;
                }
            }
            acc
        } else {
            (0..rows).map(|r| d[r * cols..(r + 1) * cols].iter().fold(T::zero(), |a, &v| a + v)).collect()
        };
        let shape = vec![if axis == 0 { cols } else { rows }];
        Self::make(out, shape, Op::Reduce { rows, cols, axis }, &[self])
    }

    /// Broadcast a `[cols]` (axis 0) or `[rows]` (axis 1) tensor to `[rows, cols]`.
    pub fn expand(&self, rows: usize, cols: usize, axis: usize) -> Self {
        let d = self.data();
        let out = if axis == 0 {
            assert_eq!(d.len(), cols, "expand axis 0 expects {cols} elements");
            let mut v = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                v.extend_from_slice(d);
            }
            v
        } else {
            assert_eq!(d.len(), rows, "expand axis 1 expects {rows} elements");
            d.iter().flat_map(|&x| std::iter::repeat_n(x, cols)).collect()
        };
        Self::make(out, vec![rows, cols], Op::Expand { rows, cols, axis }, &[self])
    }

    pub fn sum(&self) -> Self {
        self.reduce(1, self.numel(), 1)
    }

    pub fn mean(&self) -> Self {
        let n = self.numel();
        self.sum().scale(T::of(1.0 / n as f64))
    }

    /// Sum over everything but the leading (batch) axis: `[N, ...] -> [N]`.
    pub fn sum_per_sample(&self) -> Self {
        let n = self.shape()[0];
        self.reduce(n, self.numel() / n, 1)
    }

    /// `[N] -> shape` with `shape[0] == N`.
    pub fn broadcast_per_sample(&self, shape: &[usize]) -> Self {
        let n = self.numel();
        assert_eq!(shape[0], n, "per-sample broadcast mismatch");
        self.expand(n, numel(shape) / n, 1).reshape(shape)
    }

    /// Broadcast a single-element tensor to `shape`.
    pub fn broadcast_scalar(&self, shape: &[usize]) -> Self {
        assert_eq!(self.numel(), 1);
        self.reshape(&[1]).expand(1, numel(shape), 1).reshape(shape)
    }

    /// Add a `[C]` bias along the trailing axis.
    pub fn add_bias(&self, bias: &Self) -> Self {
        let c = bias.numel();
        let rows = self.numel() / c;
        let shape = self.shape().to_vec();
        self.add(&bias.reshape(&[c]).expand(rows, c, 0).reshape(&shape))
    }
}

// Packing `a` dominates the blocked gemm when `b` has only a few columns.
fn narrow_matmul<T: Real>(a: &[T], b: &[T], (m, k, n): (usize, usize, usize), ta: bool, (rsb, csb): (usize, usize), out: &mut [T]) {
    let cols: Vec<Vec<T>> = (0..n).map(|j| (0..k).map(|kk| b[kk * rsb + j * csb]).collect()).collect();
    if !ta {
        for (i, row) in a.chunks_exact(k).enumerate() {
            for (j, col) in cols.iter().enumerate() {
                out[i * n + j] = dot(row, col);
            }
        }
    } else {
        let mut acc = vec![T::zero(); m * n];
        for (kk, row) in a.chunks_exact(m).enumerate() {
            for (j, col) in cols.iter().enumerate() {
                let c = col[kk];
                for (o, &v) in acc[j * m..(j + 1) * m].iter_mut().zip(row) {
                    *o = *o + v * c;
                }
            }
        }
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = acc[j * m + i];
            }
        }
    }
}

fn dot<T: Real>(x: &[T], y: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (xc, yc) = (x.chunks_exact(8), y.chunks_exact(8));
    let tail: T = xc.remainder().iter().zip(yc.remainder()).map(|(&a, &b)| a * b).sum();
    for (a, b) in xc.zip(yc) {
        for l in 0..8 {
            acc[l] = acc[l] + a[l] * b[l];
        }
    }
    acc.iter().copied().sum::<T>() + tail
}

// The libm tanh is several times slower than one exp.
fn tanh<T: Real>(v: T) -> T {
    if v.abs() < T::of(0.01) {
        let v2 = v * v;
        v * (T::one() - v2 * (T::of(1.0 / 3.0) - v2 * T::of(2.0 / 15.0)))
    } else {
        let e = (v + v).exp();
        T::one() - T::of(2.0) / (e + T::one())
    }
}

fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Real>(v: T) -> T {
    // log(1 + e^v) without overflow
    v.max(T::zero()) + (-v.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn narrow_matmul_matches_naive_product() {
        let (m, k) = (130, 37);
        let a: Vec<f64> = (0..m * k).map(|i| ((i * 7919) % 97) as f64 / 13.0 - 3.0).collect();
        for n in 1..=4 {
            let b: Vec<f64> = (0..k * n).map(|i| ((i * 31) % 11) as f64 - 5.0).collect();
            for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
                let sa = if ta { [k, m] } else { [m, k] };
                let sb = if tb { [n, k] } else { [k, n] };
                let at = Tensor::<f64>::from_f64(&a, &sa);
                let bt = Tensor::<f64>::from_f64(&b, &sb);
                let got = at.matmul_t(&bt, ta, tb).to_vec();
                for i in 0..m {
                    for j in 0..n {
                        let want: f64 = (0..k)
                            .map(|q| {
                                let x = if ta { a[q * m + i] } else { a[i * k + q] };
                                let y = if tb { b[j * k + q] } else { b[q * n + j] };
                                x * y
                            })
                            .sum();
                        assert!((got[i * n + j] - want).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn matmul_transposes_agree() {
        let a = Tensor::<f64>::from_f64(&[1., 2., 3., 4., 5., 6.], &[2, 3]);
        let b = Tensor::<f64>::from_f64(&[1., 0., -1., 2., 0.5, 1.], &[3, 2]);
        let c = a.matmul(&b);
        assert_eq!(c.data(), &[1. * 1. - 2. + 1.5, 0. + 4. + 3., 4. - 5. + 3., 0. + 10. + 6.]);
        let at = Tensor::<f64>::from_f64(&[1., 4., 2., 5., 3., 6.], &[3, 2]);
        assert_eq!(at.matmul_t(&b, true, false).data(), c.data());
        let bt = Tensor::<f64>::from_f64(&[1., -1., 0.5, 0., 2., 1.], &[2, 3]);
        assert_eq!(a.matmul_t(&bt, false, true).data(), c.data());
    }

    #[test]
    fn reduce_and_expand_are_adjoint_shapes() {
        let x = Tensor::<f64>::from_f64(&[1., 2., 3., 4., 5., 6.], &[2, 3]);
        assert_eq!(x.reduce(2, 3, 0).data(), &[5., 7., 9.]);
        assert_eq!(x.reduce(2, 3, 1).data(), &[6., 15.]);
        let b = Tensor::<f64>::from_f64(&[1., 2.], &[2]);
        assert_eq!(b.expand(2, 3, 1).data(), &[1., 1., 1., 2., 2., 2.]);
        assert_eq!(x.add_bias(&Tensor::from_f64(&[1., 1., 1.], &[3])).data(), &[2., 3., 4., 5., 6., 7.]);
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0f64) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(softplus(-1000.0f64), 0.0);
        assert_eq!(softplus(1000.0f64), 1000.0);
        assert!((sigmoid(0.0f64) - 0.5).abs() < 1e-15);
        for i in -400..=400 {
            let v = i as f64 * 0.0371;
            assert!((tanh(v) - v.tanh()).abs() < 1e-13, "{v}");
            assert!((tanh(v as f32) - (v as f32).tanh()).abs() < 1e-6, "{v}");
        }
        assert_eq!(tanh(1e6f32), 1.0);
        assert_eq!(tanh(-1e6f32), -1.0);
    }

    #[test]
    fn clamp_max_caps_values() {
        let x = Tensor::<f64>::from_f64(&[0.5, 2.0, 1.5], &[3]);
        assert_eq!(x.clamp_max(1.5).data(), &[0.5, 1.5, 1.5]);
    }

    #[test]
    fn scalar_broadcast_sums_gradient_back() {
        let p = Tensor::<f64>::param(vec![0.3], &[1]);
        let b = p.broadcast_scalar(&[2, 2, 3]);
        assert_eq!(b.shape(), &[2, 2, 3]);
        assert!(b.data().iter().all(|&v| v == 0.3));
        let g = crate::tensor::grad(&b.sum(), &[&p], false)[0].clone().unwrap();
        assert_eq!(g.data(), &[12.0]);
    }
}
