//! Reverse-mode automatic differentiation with higher-order support.
//!
//! Every backward rule is written in terms of [`Var`] operations, so a
//! gradient computed with `create_graph = true` is itself a differentiable
//! expression of the inputs. The meta-learning outer step relies on this to
//! differentiate through the inner gradient-descent update.
//!
//! Graphs are single-threaded (`Rc`). Node ids increase monotonically, which
//! makes descending-id order a valid reverse topological order.

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::ops::{Add, Mul, Neg, Sub};
use std::rc::Rc;

use crate::tensor::{broadcast_shape, ConvGeometry, Tensor};

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(Cell::get)
}

/// Runs `f` with graph recording switched on or off, restoring the previous
/// mode afterwards.
pub fn with_grad_mode<R>(enabled: bool, f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|c| c.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|c| c.replace(enabled)));
    f()
}

/// Evaluates `f` without recording any graph.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    with_grad_mode(false, f)
}

type BackwardFn = Box<dyn Fn(&Var, &[Var]) -> Vec<Option<Var>>>;

struct Node {
    id: u64,
    value: Tensor,
    requires_grad: bool,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
}

impl Drop for Node {
    // Long op chains would otherwise drop recursively.
    fn drop(&mut self) {
        let mut stack = std::mem::take(&mut self.parents);
        while let Some(v) = stack.pop() {
            if let Ok(mut node) = Rc::try_unwrap(v.0) {
                stack.append(&mut node.parents);
            }
        }
    }
}

/// A node in the computation graph.
#[derive(Clone)]
pub struct Var(Rc<Node>);

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}({:?}, grad={})", self.0.id, self.0.value, self.0.requires_grad)
    }
}

impl Var {
    fn leaf(value: Tensor, requires_grad: bool) -> Self {
        Var(Rc::new(Node { id: next_id(), value, requires_grad, parents: Vec::new(), backward: None }))
    }

    /// A trainable leaf.
    pub fn param(value: Tensor) -> Self {
        Self::leaf(value, true)
    }

    pub fn constant(value: Tensor) -> Self {
        Self::leaf(value, false)
    }

    pub fn scalar(value: f64) -> Self {
        Self::constant(Tensor::scalar(value))
    }

    fn from_op(value: Tensor, parents: Vec<Var>, backward: BackwardFn) -> Self {
        if grad_enabled() && parents.iter().any(Var::requires_grad) {
            Var(Rc::new(Node { id: next_id(), value, requires_grad: true, parents, backward: Some(backward) }))
        } else {
            Self::constant(value)
        }
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn item(&self) -> f64 {
        self.0.value.item()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn detach(&self) -> Var {
        Var::constant(self.0.value.clone())
    }

    // ---- shape ops -------------------------------------------------------

    pub fn broadcast_to(&self, shape: &[usize]) -> Var {
        if self.shape() == shape {
            return self.clone();
        }
        let src = self.shape().to_vec();
        Var::from_op(
            self.value().broadcast_to(shape),
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(g.sum_to(&src))]),
        )
    }

    pub fn sum_to(&self, shape: &[usize]) -> Var {
        if self.shape() == shape {
            return self.clone();
        }
        let src = self.shape().to_vec();
        Var::from_op(
            self.value().sum_to(shape),
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(g.broadcast_to(&src))]),
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Var {
        if self.shape() == shape {
            return self.clone();
        }
        let src = self.shape().to_vec();
        Var::from_op(
            self.value().reshape(shape),
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(g.reshape(&src))]),
        )
    }

    pub fn permute(&self, axes: &[usize]) -> Var {
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        Var::from_op(
            self.value().permute(axes),
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(g.permute(&inverse))]),
        )
    }

    pub fn transpose(&self) -> Var {
        self.permute(&[1, 0])
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Var {
        let full = self.shape()[axis];
        Var::from_op(
            self.value().narrow(axis, start, len),
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(g.pad_axis(axis, start, full))]),
        )
    }

    pub fn pad_axis(&self, axis: usize, start: usize, full: usize) -> Var {
        let len = self.shape()[axis];
        Var::from_op(
            self.value().pad_axis(axis, start, full),
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(g.narrow(axis, start, len))]),
        )
    }

    pub fn concat(parts: &[Var], axis: usize) -> Var {
        let values: Vec<&Tensor> = parts.iter().map(Var::value).collect();
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        Var::from_op(
            Tensor::concat(&values, axis),
            parts.to_vec(),
            Box::new(move |g, _| {
                let mut start = 0;
                sizes
                    .iter()
                    .map(|&len| {
                        let part = g.narrow(axis, start, len);
                        start += len;
                        Some(part)
                    })
                    .collect()
            }),
        )
    }

    // ---- elementwise -----------------------------------------------------

    fn binary_shapes(a: &Var, b: &Var) -> (Var, Var) {
        if a.shape() == b.shape() {
            return (a.clone(), b.clone());
        }
        let shape = broadcast_shape(a.shape(), b.shape())
            .unwrap_or_else(|| panic!("incompatible shapes {:?} and {:?}", a.shape(), b.shape()));
        (a.broadcast_to(&shape), b.broadcast_to(&shape))
    }

    pub fn add(&self, other: &Var) -> Var {
        let (a, b) = Self::binary_shapes(self, other);
        Var::from_op(
            a.value().zip_map(b.value(), |x, y| x + y),
            vec![a, b],
            Box::new(|g, _| vec![Some(g.clone()), Some(g.clone())]),
        )
    }

    pub fn sub(&self, other: &Var) -> Var {
        let (a, b) = Self::binary_shapes(self, other);
        Var::from_op(
            a.value().zip_map(b.value(), |x, y| x - y),
            vec![a, b],
            Box::new(|g, _| vec![Some(g.clone()), Some(g.neg())]),
        )
    }

    pub fn mul(&self, other: &Var) -> Var {
        let (a, b) = Self::binary_shapes(self, other);
        Var::from_op(
            a.value().zip_map(b.value(), |x, y| x * y),
            vec![a, b],
            Box::new(|g, p| {
                vec![
                    p[0].requires_grad().then(|| g.mul(&p[1])),
                    p[1].requires_grad().then(|| g.mul(&p[0])),
                ]
            }),
        )
    }

    pub fn div(&self, other: &Var) -> Var {
        let (a, b) = Self::binary_shapes(self, other);
        Var::from_op(
            a.value().zip_map(b.value(), |x, y| x / y),
            vec![a, b],
            Box::new(|g, p| {
                let ga = g.div(&p[1]);
                let gb = p[1].requires_grad().then(|| ga.mul(&p[0]).div(&p[1]).neg());
                vec![Some(ga), gb]
            }),
        )
    }

    pub fn neg(&self) -> Var {
        self.scale(-1.0)
    }

    pub fn scale(&self, c: f64) -> Var {
        Var::from_op(
            self.value().map(|x| c * x),
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(g.scale(c))]),
        )
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        Var::from_op(
            self.value().map(|x| x + c),
            vec![self.clone()],
            Box::new(|g, _| vec![Some(g.clone())]),
        )
    }

    /// Multiplies by a constant tensor of the same shape.
    fn mul_const(&self, mask: Tensor) -> Var {
        self.mul(&Var::constant(mask))
    }

    pub fn square(&self) -> Var {
        self.mul(self)
    }

    pub fn exp(&self) -> Var {
        Var::from_op(
            self.value().map(f64::exp),
            vec![self.clone()],
            Box::new(|g, p| vec![Some(g.mul(&p[0].exp()))]),
        )
    }

    pub fn ln(&self) -> Var {
        Var::from_op(
            self.value().map(f64::ln),
            vec![self.clone()],
            Box::new(|g, p| vec![Some(g.div(&p[0]))]),
        )
    }

    pub fn sqrt(&self) -> Var {
        Var::from_op(
            self.value().map(f64::sqrt),
            vec![self.clone()],
            Box::new(|g, p| vec![Some(g.div(&p[0].sqrt()).scale(0.5))]),
        )
    }

    pub fn abs(&self) -> Var {
        Var::from_op(
            self.value().map(f64::abs),
            vec![self.clone()],
            Box::new(|g, p| {
                let sign = p[0].value().map(|x| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 });
                vec![Some(g.mul_const(sign))]
            }),
        )
    }

    pub fn relu(&self) -> Var {
        self.leaky_relu(0.0)
    }

    pub fn leaky_relu(&self, slope: f64) -> Var {
        Var::from_op(
            self.value().map(|x| if x > 0.0 { x } else { slope * x }),
            vec![self.clone()],
            Box::new(move |g, p| {
                let d = p[0].value().map(|x| if x > 0.0 { 1.0 } else { slope });
                vec![Some(g.mul_const(d))]
            }),
        )
    }

    /// Clamps into `[lo, hi]`; gradient is zero outside the interval.
    pub fn clamp(&self, lo: f64, hi: f64) -> Var {
        Var::from_op(
            self.value().map(|x| x.clamp(lo, hi)),
            vec![self.clone()],
            Box::new(move |g, p| {
                let d = p[0].value().map(|x| if (lo..=hi).contains(&x) { 1.0 } else { 0.0 });
                vec![Some(g.mul_const(d))]
            }),
        )
    }

    pub fn sigmoid(&self) -> Var {
        Var::from_op(
            self.value().map(sigmoid),
            vec![self.clone()],
            Box::new(|g, p| {
                let s = p[0].sigmoid();
                let ds = s.mul(&s.neg().add_scalar(1.0));
                vec![Some(g.mul(&ds))]
            }),
        )
    }

    pub fn softplus(&self) -> Var {
        Var::from_op(
            self.value().map(softplus),
            vec![self.clone()],
            Box::new(|g, p| vec![Some(g.mul(&p[0].sigmoid()))]),
        )
    }

    // ---- reductions ------------------------------------------------------

    pub fn sum(&self) -> Var {
        self.sum_to(&[])
    }

    pub fn mean(&self) -> Var {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum over `axes`, keeping them as size-1 dimensions.
    pub fn sum_keepdim(&self, axes: &[usize]) -> Var {
        let mut shape = self.shape().to_vec();
        for &a in axes {
            shape[a] = 1;
        }
        self.sum_to(&shape)
    }

    pub fn mean_keepdim(&self, axes: &[usize]) -> Var {
        let n: usize = axes.iter().map(|&a| self.shape()[a]).product();
        self.sum_keepdim(axes).scale(1.0 / n as f64)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Var {
        let shifted = self.sub(&Var::constant(max_keepdim(self.value(), axis)));
        let e = shifted.exp();
        e.div(&e.sum_keepdim(&[axis]))
    }

    pub fn log_softmax(&self, axis: usize) -> Var {
        let shifted = self.sub(&Var::constant(max_keepdim(self.value(), axis)));
        shifted.sub(&shifted.exp().sum_keepdim(&[axis]).ln())
    }

    // ---- linear algebra --------------------------------------------------

    /// `op(self) · op(other)` for 2D operands.
    pub fn matmul_t(&self, other: &Var, trans_a: bool, trans_b: bool) -> Var {
        Var::from_op(
            Tensor::matmul(self.value(), other.value(), trans_a, trans_b),
            vec![self.clone(), other.clone()],
            Box::new(move |g, p| {
                let (a, b) = (&p[0], &p[1]);
                let (ga, gb) = match (trans_a, trans_b) {
                    (false, false) => (
                        a.requires_grad().then(|| g.matmul_t(b, false, true)),
                        b.requires_grad().then(|| a.matmul_t(g, true, false)),
                    ),
                    (false, true) => (
                        a.requires_grad().then(|| g.matmul_t(b, false, false)),
                        b.requires_grad().then(|| g.matmul_t(a, true, false)),
                    ),
                    (true, false) => (
                        a.requires_grad().then(|| b.matmul_t(g, false, true)),
                        b.requires_grad().then(|| a.matmul_t(g, false, false)),
                    ),
                    (true, true) => (
                        a.requires_grad().then(|| b.matmul_t(g, true, true)),
                        b.requires_grad().then(|| g.matmul_t(a, true, true)),
                    ),
                };
                vec![ga, gb]
            }),
        )
    }

    pub fn matmul(&self, other: &Var) -> Var {
        self.matmul_t(other, false, false)
    }

    // ---- image ops -------------------------------------------------------

    pub fn im2col(&self, geom: ConvGeometry) -> Var {
        Var::from_op(
            self.value().im2col(&geom),
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(g.col2im(geom))]),
        )
    }

    pub fn col2im(&self, geom: ConvGeometry) -> Var {
        Var::from_op(
            self.value().col2im(&geom),
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(g.im2col(geom))]),
        )
    }

    pub fn sum_pool(&self, f: usize) -> Var {
        Var::from_op(
            self.value().sum_pool(f),
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(g.upsample(f))]),
        )
    }

    pub fn avg_pool(&self, f: usize) -> Var {
        self.sum_pool(f).scale(1.0 / (f * f) as f64)
    }

    pub fn upsample(&self, f: usize) -> Var {
        Var::from_op(
            self.value().upsample(f),
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(g.sum_pool(f))]),
        )
    }

    /// 2D convolution of `[B,C,H,W]` with `weight [O, C*k*k]` and `bias [O]`.
    /// Convolution with weight `[O, C*k*k]` and bias `[O]`.
    pub fn conv2d(&self, weight: &Var, bias: &Var, kernel: usize, stride: usize, pad: usize) -> Var {
        let [b, c, h, w] = self.value().dims4();
        let geom = ConvGeometry { batch: b, channels: c, height: h, width: w, kernel, stride, pad };
        conv(self, weight, geom).add_channel_bias(bias)
    }

    /// Adds a bias `[C]` to every channel of `[B,C,H,W]`.
    pub fn add_channel_bias(&self, bias: &Var) -> Var {
        let c = bias.shape()[0];
        Var::from_op(
            self.value().add_channel_bias(bias.value()),
            vec![self.clone(), bias.clone()],
            Box::new(move |g, p| vec![Some(g.clone()), p[1].requires_grad().then(|| g.sum_keepdim(&[0, 2, 3]).reshape(&[c]))]),
        )
    }

    /// Builds a node whose value is `value` and whose vector-Jacobian product
    /// with respect to `self` is `g * jacobian` (the Jacobian treated as a
    /// constant). Used for ops such as singular values where the first
    /// derivative is available in closed form.
    pub(crate) fn custom_scalar(&self, value: f64, jacobian: Tensor) -> Var {
        assert_eq!(jacobian.shape(), self.shape());
        Var::from_op(
            Tensor::scalar(value),
            vec![self.clone()],
            Box::new(move |g, _| {
                let shape = jacobian.shape().to_vec();
                vec![Some(g.broadcast_to(&shape).mul_const(jacobian.clone()))]
            }),
        )
    }
}

// The three convolution ops below are closed under differentiation: each
// one's vector-Jacobian products are expressed with the other two.

/// `x [B,C,H,W]` ⋆ `w [O, C*k*k]`.
fn conv(x: &Var, w: &Var, geom: ConvGeometry) -> Var {
    Var::from_op(
        Tensor::conv2d(x.value(), w.value(), &geom),
        vec![x.clone(), w.clone()],
        Box::new(move |g, p| {
            vec![
                p[0].requires_grad().then(|| conv_input_grad(g, &p[1], geom)),
                p[1].requires_grad().then(|| conv_weight_grad(g, &p[0], geom)),
            ]
        }),
    )
}

/// Input-side VJP of [`conv`] (a transposed convolution of `gy`).
fn conv_input_grad(gy: &Var, w: &Var, geom: ConvGeometry) -> Var {
    Var::from_op(
        Tensor::conv2d_input_grad(gy.value(), w.value(), &geom),
        vec![gy.clone(), w.clone()],
        Box::new(move |g, p| {
            vec![
                p[0].requires_grad().then(|| conv(g, &p[1], geom)),
                p[1].requires_grad().then(|| conv_weight_grad(&p[0], g, geom)),
            ]
        }),
    )
}

/// Weight-side VJP of [`conv`].
fn conv_weight_grad(gy: &Var, x: &Var, geom: ConvGeometry) -> Var {
    Var::from_op(
        Tensor::conv2d_weight_grad(gy.value(), x.value(), &geom),
        vec![gy.clone(), x.clone()],
        Box::new(move |g, p| {
            vec![
                p[0].requires_grad().then(|| conv(&p[1], g, geom)),
                p[1].requires_grad().then(|| conv_input_grad(&p[0], g, geom)),
            ]
        }),
    )
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 { x } else { x.max(0.0) + (-x.abs()).exp().ln_1p() }
}

fn max_keepdim(t: &Tensor, axis: usize) -> Tensor {
    let shape = t.shape();
    let outer: usize = shape[..axis].iter().product();
    let dim = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![f64::NEG_INFINITY; outer * inner];
    for o in 0..outer {
        for d in 0..dim {
            let row = &t.data()[(o * dim + d) * inner..][..inner];
            for (m, &v) in out[o * inner..][..inner].iter_mut().zip(row) {
                *m = m.max(v);
            }
        }
    }
    let mut kept = shape.to_vec();
    kept[axis] = 1;
    Tensor::new(kept, out)
}

impl Add for &Var {
    type Output = Var;
    fn add(self, rhs: &Var) -> Var {
        Var::add(self, rhs)
    }
}

impl Sub for &Var {
    type Output = Var;
    fn sub(self, rhs: &Var) -> Var {
        Var::sub(self, rhs)
    }
}

impl Mul for &Var {
    type Output = Var;
    fn mul(self, rhs: &Var) -> Var {
        Var::mul(self, rhs)
    }
}

impl Neg for &Var {
    type Output = Var;
    fn neg(self) -> Var {
        Var::neg(self)
    }
}

/// Gradients of the scalar `output` with respect to each of `wrt`.
///
/// With `create_graph` the returned gradients are recorded in the graph and
/// can be differentiated again. Inputs that `output` does not depend on get
/// a zero gradient.
pub fn grad(output: &Var, wrt: &[Var], create_graph: bool) -> Vec<Var> {
    assert_eq!(output.value().len(), 1, "grad() needs a scalar output, got {:?}", output.shape());
    let zeros = |v: &Var| Var::constant(Tensor::zeros(v.shape()));
    if !output.requires_grad() {
        return wrt.iter().map(zeros).collect();
    }

    // Reachable nodes that require grad.
    let mut seen = HashSet::new();
    let mut order = Vec::new();
    let mut stack = vec![output.clone()];
    while let Some(v) = stack.pop() {
        if !v.requires_grad() || !seen.insert(v.id()) {
            continue;
        }
        stack.extend(v.0.parents.iter().cloned());
        order.push(v);
    }
    order.sort_unstable_by_key(|v| std::cmp::Reverse(v.id()));

    let keep: HashSet<u64> = wrt.iter().map(Var::id).collect();
    let mut grads: HashMap<u64, Var> = HashMap::new();
    let mut kept: HashMap<u64, Var> = HashMap::new();
    grads.insert(output.id(), Var::constant(Tensor::ones(output.shape())));

    with_grad_mode(create_graph, || {
        for node in &order {
            let Some(g) = grads.remove(&node.id()) else { continue };
            if keep.contains(&node.id()) {
                kept.insert(node.id(), g.clone());
            }
            let Some(backward) = node.0.backward.as_ref() else { continue };
            let parents = &node.0.parents;
            for (parent, pg) in parents.iter().zip(backward(&g, parents)) {
                let Some(pg) = pg else { continue };
                if !parent.requires_grad() {
                    continue;
                }
                debug_assert_eq!(pg.shape(), parent.shape());
                let acc = match grads.remove(&parent.id()) {
                    Some(prev) => prev.add(&pg),
                    None => pg,
                };
                grads.insert(parent.id(), acc);
            }
        }
    });

    wrt.iter().map(|v| kept.get(&v.id()).cloned().unwrap_or_else(|| zeros(v))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec())
    }

    /// Central finite-difference gradient of `f` at `x`.
    fn fd(f: &dyn Fn(&Var) -> Var, x: &Tensor) -> Tensor {
        let h = 1e-6;
        Tensor::from_fn(x.shape(), |i| {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            (f(&Var::param(p)).item() - f(&Var::param(m)).item()) / (2.0 * h)
        })
    }

    fn check(f: &dyn Fn(&Var) -> Var, x: Tensor) {
        let v = Var::param(x.clone());
        let g = grad(&f(&v), std::slice::from_ref(&v), false).remove(0);
        let n = fd(f, &x);
        let scale = n.data().iter().fold(1.0f64, |a, b| a.max(b.abs()));
        assert!(g.value().max_abs_diff(&n) / scale < 1e-6, "analytic {:?} vs fd {:?}", g.value(), n);
    }

    fn sample(shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |i| ((i as f64 * 1.37).sin() * 1.5) + 0.1)
    }

    #[test]
    fn elementwise_gradients() {
        check(&|x| x.exp().sum(), sample(&[3, 4]));
        check(&|x| x.abs().add_scalar(1.0).ln().sum(), sample(&[5]));
        check(&|x| x.square().add_scalar(0.5).sqrt().sum(), sample(&[5]));
        check(&|x| x.sigmoid().mul(x).sum(), sample(&[6]));
        check(&|x| x.softplus().sum(), sample(&[6]));
        check(&|x| x.leaky_relu(0.2).square().sum(), sample(&[6]));
        check(&|x| x.div(&x.square().add_scalar(1.0)).sum(), sample(&[6]));
    }

    #[test]
    fn structural_gradients() {
        check(&|x| x.softmax(1).square().sum(), sample(&[2, 3, 2]));
        check(&|x| x.log_softmax(0).narrow(0, 1, 2).sum(), sample(&[4, 2]));
        check(&|x| x.matmul_t(x, true, false).square().sum(), sample(&[3, 2]));
        check(&|x| x.matmul_t(x, false, true).square().sum(), sample(&[3, 2]));
        check(&|x| Var::concat(&[x.clone(), x.exp()], 1).permute(&[1, 0]).square().sum(), sample(&[2, 3]));
        check(&|x| x.upsample(2).avg_pool(2).square().sum(), sample(&[1, 2, 2, 2]));
        check(&|x| x.mean_keepdim(&[2, 3]).square().sum(), sample(&[2, 2, 3, 3]));
        let w = Var::constant(sample(&[3, 2 * 9]));
        let b = Var::constant(sample(&[3]));
        check(&move |x| x.conv2d(&w, &b, 3, 1, 1).square().sum(), sample(&[2, 2, 4, 4]));
    }

    #[test]
    fn conv_gradients_all_arguments() {
        let x = sample(&[2, 3, 5, 6]);
        for (k, stride, pad) in [(3, 1, 1), (3, 2, 1), (1, 1, 0), (4, 2, 1)] {
            let w = Var::constant(Tensor::from_fn(&[2, 3 * k * k], |i| (i as f64 * 0.71).cos()));
            let b = Var::constant(t(&[2], &[0.3, -0.2]));
            let xc = Var::constant(x.clone());
            check(&|x| x.conv2d(&w, &b, k, stride, pad).square().sum(), x.clone());
            check(&|w| xc.conv2d(w, &b, k, stride, pad).square().sum(), w.value().clone());
            check(&|b| xc.conv2d(&w, b, k, stride, pad).square().sum(), b.value().clone());
        }
    }

    #[test]
    fn conv_matches_im2col_lowering() {
        let x = Var::constant(sample(&[2, 3, 6, 5]));
        let w = Var::constant(Tensor::from_fn(&[4, 27], |i| (i as f64 * 0.3).sin()));
        let b = Var::constant(t(&[4], &[0.1, 0.2, 0.3, 0.4]));
        let geom = ConvGeometry { batch: 2, channels: 3, height: 6, width: 5, kernel: 3, stride: 2, pad: 1 };
        let lowered = w
            .matmul(&x.im2col(geom))
            .add(&b.reshape(&[4, 1]))
            .reshape(&[4, 2, geom.out_height(), geom.out_width()])
            .permute(&[1, 0, 2, 3]);
        assert!(x.conv2d(&w, &b, 3, 2, 1).value().max_abs_diff(lowered.value()) < 1e-12);
    }

    #[test]
    fn conv_second_order_matches_finite_differences() {
        // h(x, w) = |d/dx sum(conv(x, w)^2)|^2; its gradient needs all three
        // convolution ops.
        let x0 = sample(&[1, 2, 4, 4]);
        let w0 = Tensor::from_fn(&[2, 18], |i| (i as f64 * 0.53).sin());
        let b = Var::constant(t(&[2], &[0.1, -0.3]));
        let h = |x: &Var, w: &Var| {
            let gx = grad(&x.conv2d(w, &b, 3, 1, 1).square().sum(), std::slice::from_ref(x), true).remove(0);
            gx.square().sum()
        };
        let wc = Var::constant(w0.clone());
        check(&|x| h(x, &wc), x0.clone());
        let xc = Var::param(x0);
        check(&|w| h(&xc, w), w0);
    }

    #[test]
    fn second_order_matches_analytic() {
        // f(x) = sum(x^3) -> grad 3x^2 -> d/dx sum(grad) = 6x
        let x = Var::param(t(&[3], &[1.0, -2.0, 0.5]));
        let g = grad(&x.square().mul(&x).sum(), std::slice::from_ref(&x), true).remove(0);
        assert!(g.requires_grad());
        let h = grad(&g.sum(), std::slice::from_ref(&x), false).remove(0);
        assert_eq!(h.value().data(), &[6.0, -12.0, 3.0]);
    }

    #[test]
    fn first_order_grads_are_constants() {
        let x = Var::param(t(&[2], &[1.0, 2.0]));
        let g = grad(&x.exp().sum(), std::slice::from_ref(&x), false).remove(0);
        assert!(!g.requires_grad());
    }

    #[test]
    fn unused_inputs_get_zero_gradient() {
        let x = Var::param(t(&[2], &[1.0, 2.0]));
        let y = Var::param(t(&[3], &[1.0, 2.0, 3.0]));
        let gs = grad(&x.sum(), &[x.clone(), y.clone()], false);
        assert_eq!(gs[1].value(), &Tensor::zeros(&[3]));
    }

    #[test]
    fn no_grad_records_nothing() {
        let x = Var::param(t(&[2], &[1.0, 2.0]));
        let y = no_grad(|| x.exp());
        assert!(!y.requires_grad());
        assert!(x.exp().requires_grad());
    }

    #[test]
    fn deep_chains_drop_without_overflow() {
        let x = Var::param(Tensor::scalar(1.0));
        let mut y = x.clone();
        for _ in 0..200_000 {
            y = y.add_scalar(1e-6);
        }
        drop(y);
    }
}
