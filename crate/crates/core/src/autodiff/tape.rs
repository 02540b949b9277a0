use std::cell::{Cell, RefCell};
use std::rc::Rc;

use super::kernels;
use super::Tensor;
use crate::error::{arg_err, shape_err, Result};
use crate::scalar::Scalar;

/// Recorded primitive. Inputs are node ids that precede the node holding
/// the op, so the node list is always in topological order.
#[derive(Debug, Clone)]
enum Op<S> {
    Leaf,
    MatMul { a: usize, b: usize, n: usize, k: usize, m: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    AddRow { a: usize, b: usize },
    Scale { a: usize, c: S },
    AddScalar { a: usize },
    Gelu { a: usize },
    Relu { a: usize },
    Exp { a: usize },
    Log { a: usize },
    Softmax { a: usize },
    LogSoftmax { a: usize },
    SumAxis { a: usize, outer: usize, dim: usize, inner: usize, mean: bool },
    SumAll { a: usize, mean: bool },
    L2Normalize { a: usize, eps: S },
    Concat { parts: Vec<usize>, outer: usize, dims: Vec<usize>, inner: usize },
    Transpose { a: usize },
    Clamp { a: usize, lo: S, hi: S },
    StopGradient,
    GradReverse { a: usize, scale: S },
    AdaptivePool { a: usize, len: usize },
    Conv1d { input: usize, kernel: usize, bias: usize, dilation: usize },
    GatherRows { a: usize, index: Vec<usize> },
}

struct Node<S> {
    value: Rc<Tensor<S>>,
    op: Op<S>,
    /// Some requires-grad leaf is reachable through this node.
    needs_grad: bool,
    /// Accumulated gradient, only kept for requires-grad leaves.
    grad: Option<Vec<S>>,
}

/// Records primitive applications for one forward pass.
///
/// A tape is single-threaded and meant to be rebuilt for every step.
pub struct Tape<S: Scalar> {
    nodes: RefCell<Vec<Node<S>>>,
    stop_log: RefCell<Vec<Rc<Tensor<S>>>>,
    frozen: Option<Vec<Rc<Tensor<S>>>>,
    frozen_cursor: Cell<usize>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, S: Scalar> {
    tape: &'t Tape<S>,
    id: usize,
}

impl<S: Scalar> std::fmt::Debug for Var<'_, S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            stop_log: RefCell::new(Vec::new()),
            frozen: None,
            frozen_cursor: Cell::new(0),
        }
    }

    /// A tape whose `stop_gradient` calls return `values` in order instead of
    /// their inputs. Used to evaluate the surrogate objective that the
    /// backward pass differentiates.
    pub fn replaying(values: Vec<Rc<Tensor<S>>>) -> Self {
        Self {
            frozen: Some(values),
            ..Self::new()
        }
    }

    /// Outputs of every `stop_gradient` call so far, in call order.
    pub fn stop_gradient_values(&self) -> Vec<Rc<Tensor<S>>> {
        self.stop_log.borrow().clone()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf that receives a gradient.
    pub fn param(&self, value: Tensor<S>) -> Var<'_, S> {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<S>) -> Var<'_, S> {
        self.leaf(value, false)
    }

    fn leaf(&self, value: Tensor<S>, requires_grad: bool) -> Var<'_, S> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op: Op::Leaf,
            needs_grad: requires_grad,
            grad: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, value: Tensor<S>, op: Op<S>, inputs: &[usize]) -> Var<'_, S> {
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = match op {
            Op::StopGradient => false,
            _ => inputs.iter().any(|&i| nodes[i].needs_grad),
        };
        nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
            grad: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor<S>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Accumulated gradient of a requires-grad leaf.
    pub fn grad(&self, var: Var<'_, S>) -> Option<Tensor<S>> {
        let nodes = self.nodes.borrow();
        let node = &nodes[var.id];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }

    /// Back-propagates from the scalar `root` into every requires-grad leaf.
    /// Leaf gradients accumulate across calls.
    pub fn backward(&self, root: Var<'_, S>) -> Result<()> {
        self.check(root);
        let mut nodes = self.nodes.borrow_mut();
        if nodes[root.id].value.numel() != 1 {
            return Err(arg_err!(
                "backward needs a scalar root, got shape {:?}",
                nodes[root.id].value.shape()
            ));
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; root.id + 1];
        grads[root.id] = Some(vec![S::one()]);
        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !nodes[id].needs_grad {
                continue;
            }
            if let Op::Leaf = nodes[id].op {
                let node = &mut nodes[id];
                match node.grad.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                    None => node.grad = Some(g),
                }
                continue;
            }
            propagate(&nodes, id, &g, &mut grads);
        }
        Ok(())
    }

    fn check(&self, var: Var<'_, S>) {
        assert!(
            std::ptr::eq(self, var.tape),
            "variable belongs to a different tape"
        );
    }

    /// Concatenates along `axis`. All other dimensions must agree.
    pub fn concat<'t>(&'t self, parts: &[Var<'t, S>], axis: usize) -> Result<Var<'t, S>> {
        if parts.is_empty() {
            return Err(arg_err!("concat needs at least one input"));
        }
        let values: Vec<_> = parts
            .iter()
            .map(|p| {
                self.check(*p);
                self.value(p.id)
            })
            .collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return Err(arg_err!("axis {axis} out of range for shape {base:?}"));
        }
        for v in &values[1..] {
            let s = v.shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err!("cannot concat {s:?} with {base:?} on axis {axis}"));
            }
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let dims: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        let total: usize = dims.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &d) in values.iter().zip(&dims) {
                data.extend_from_slice(&v.data()[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Concat { parts: ids.clone(), outer, dims, inner }, &ids))
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    if s.is_empty() {
        s.push(1);
    }
    s
}

fn accumulate<S: Scalar>(grads: &mut [Option<Vec<S>>], id: usize, contrib: Vec<S>) {
    match grads[id].as_mut() {
        Some(acc) => acc.iter_mut().zip(contrib).for_each(|(a, b)| *a = *a + b),
        None => grads[id] = Some(contrib),
    }
}

/// Pushes the output gradient `g` of node `id` into its inputs.
fn propagate<S: Scalar>(nodes: &[Node<S>], id: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
    let out = &nodes[id].value;
    let wants = |i: usize| nodes[i].needs_grad;
    let val = |i: usize| &nodes[i].value;
    match &nodes[id].op {
        Op::Leaf | Op::StopGradient => {}
        &Op::MatMul { a, b, n, k, m } => {
            if wants(a) {
                // dA = G · Bᵀ
                let mut ga = vec![S::zero(); n * k];
                kernels::matmul_bt(g, val(b).data(), &mut ga, n, m, k);
                accumulate(grads, a, ga);
            }
            if wants(b) {
                // dB = Aᵀ · G
                let mut gb = vec![S::zero(); k * m];
                kernels::matmul_at(val(a).data(), g, &mut gb, n, k, m);
                accumulate(grads, b, gb);
            }
        }
        &Op::Add { a, b } => {
            if wants(a) {
                accumulate(grads, a, g.to_vec());
            }
            if wants(b) {
                accumulate(grads, b, g.to_vec());
            }
        }
        &Op::Sub { a, b } => {
            if wants(a) {
                accumulate(grads, a, g.to_vec());
            }
            if wants(b) {
                accumulate(grads, b, g.iter().map(|&v| -v).collect());
            }
        }
        &Op::Mul { a, b } => {
            if wants(a) {
                let gb: Vec<S> = g.iter().zip(val(b).data()).map(|(&g, &y)| g * y).collect();
                accumulate(grads, a, gb);
            }
            if wants(b) {
                let ga: Vec<S> = g.iter().zip(val(a).data()).map(|(&g, &x)| g * x).collect();
                accumulate(grads, b, ga);
            }
        }
        &Op::AddRow { a, b } => {
            if wants(a) {
                accumulate(grads, a, g.to_vec());
            }
            if wants(b) {
                let m = val(b).numel();
                let mut gb = vec![S::zero(); m];
                for row in g.chunks_exact(m) {
                    gb.iter_mut().zip(row).for_each(|(acc, &v)| *acc = *acc + v);
                }
                accumulate(grads, b, gb);
            }
        }
        &Op::Scale { a, c } => {
            accumulate(grads, a, g.iter().map(|&v| v * c).collect());
        }
        &Op::AddScalar { a } => accumulate(grads, a, g.to_vec()),
        &Op::Gelu { a } => {
            let ga = g
                .iter()
                .zip(val(a).data())
                .map(|(&g, &x)| g * kernels::gelu_grad(x))
                .collect();
            accumulate(grads, a, ga);
        }
        &Op::Relu { a } => {
            let ga = g
                .iter()
                .zip(val(a).data())
                .map(|(&g, &x)| if x > S::zero() { g } else { S::zero() })
                .collect();
            accumulate(grads, a, ga);
        }
        &Op::Exp { a } => {
            let ga = g.iter().zip(out.data()).map(|(&g, &y)| g * y).collect();
            accumulate(grads, a, ga);
        }
        &Op::Log { a } => {
            let ga = g.iter().zip(val(a).data()).map(|(&g, &x)| g / x).collect();
            accumulate(grads, a, ga);
        }
        &Op::Softmax { a } => {
            let cols = *out.shape().last().expect("rank");
            let mut ga = vec![S::zero(); g.len()];
            for ((gr, yr), dst) in g
                .chunks_exact(cols)
                .zip(out.data().chunks_exact(cols))
                .zip(ga.chunks_exact_mut(cols))
            {
                let dot: S = gr.iter().zip(yr).map(|(&g, &y)| g * y).sum();
                for ((d, &g), &y) in dst.iter_mut().zip(gr).zip(yr) {
                    *d = y * (g - dot);
                }
            }
            accumulate(grads, a, ga);
        }
        &Op::LogSoftmax { a } => {
            let cols = *out.shape().last().expect("rank");
            let mut ga = vec![S::zero(); g.len()];
            for ((gr, yr), dst) in g
                .chunks_exact(cols)
                .zip(out.data().chunks_exact(cols))
                .zip(ga.chunks_exact_mut(cols))
            {
                let total: S = gr.iter().copied().sum();
                for ((d, &g), &y) in dst.iter_mut().zip(gr).zip(yr) {
                    *d = g - y.exp() * total;
                }
            }
            accumulate(grads, a, ga);
        }
        &Op::SumAxis { a, outer, dim, inner, mean } => {
            let factor = if mean { S::one() / S::lit(dim as f64) } else { S::one() };
            let mut ga = vec![S::zero(); outer * dim * inner];
            for o in 0..outer {
                for d in 0..dim {
                    let dst = &mut ga[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                    let src = &g[o * inner..(o + 1) * inner];
                    dst.iter_mut().zip(src).for_each(|(x, &v)| *x = v * factor);
                }
            }
            accumulate(grads, a, ga);
        }
        &Op::SumAll { a, mean } => {
            let n = val(a).numel();
            let v = if mean { g[0] / S::lit(n as f64) } else { g[0] };
            accumulate(grads, a, vec![v; n]);
        }
        &Op::L2Normalize { a, eps } => {
            let x = val(a);
            let cols = *x.shape().last().expect("rank");
            let mut ga = vec![S::zero(); g.len()];
            for ((gr, xr), dst) in g
                .chunks_exact(cols)
                .zip(x.data().chunks_exact(cols))
                .zip(ga.chunks_exact_mut(cols))
            {
                let norm = xr.iter().map(|&v| v * v).sum::<S>().sqrt();
                if norm > eps {
                    let gx: S = gr.iter().zip(xr).map(|(&g, &x)| g * x).sum();
                    let coef = gx / (norm * norm * norm);
                    for ((d, &g), &x) in dst.iter_mut().zip(gr).zip(xr) {
                        *d = g / norm - x * coef;
                    }
                } else {
                    for (d, &g) in dst.iter_mut().zip(gr) {
                        *d = g / eps;
                    }
                }
            }
            accumulate(grads, a, ga);
        }
        Op::Concat { parts, outer, dims, inner } => {
            let total: usize = dims.iter().sum();
            let mut offset = 0;
            for (&p, &d) in parts.iter().zip(dims) {
                if wants(p) {
                    let mut gp = Vec::with_capacity(outer * d * inner);
                    for o in 0..*outer {
                        let start = (o * total + offset) * inner;
                        gp.extend_from_slice(&g[start..start + d * inner]);
                    }
                    accumulate(grads, p, gp);
                }
                offset += d;
            }
        }
        &Op::Transpose { a } => {
            let (r, c) = (out.shape()[0], out.shape()[1]);
            accumulate(grads, a, kernels::transpose(g, r, c));
        }
        &Op::Clamp { a, lo, hi } => {
            let ga = g
                .iter()
                .zip(val(a).data())
                .map(|(&g, &x)| if x >= lo && x <= hi { g } else { S::zero() })
                .collect();
            accumulate(grads, a, ga);
        }
        &Op::GradReverse { a, scale } => {
            accumulate(grads, a, g.iter().map(|&v| -scale * v).collect());
        }
        &Op::AdaptivePool { a, len } => {
            let x = val(a);
            let rows = x.rows();
            let w = x.row_len();
            let mut ga = vec![S::zero(); x.numel()];
            for t in 0..len {
                let (s, e) = kernels::pool_window(t, rows, len);
                let inv = S::one() / S::lit((e - s) as f64);
                let src = &g[t * w..(t + 1) * w];
                for r in s..e {
                    ga[r * w..(r + 1) * w]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(d, &v)| *d = *d + v * inv);
                }
            }
            accumulate(grads, a, ga);
        }
        &Op::Conv1d { input, kernel, bias, dilation } => {
            let x = val(input);
            let kt = val(kernel);
            let (t_len, cin) = (x.shape()[0], x.shape()[1]);
            let (k, cout) = (kt.shape()[0], kt.shape()[2]);
            let geom = kernels::ConvGeom { t_len, cin, cout, k, dilation };
            if wants(input) {
                let mut gx = vec![S::zero(); x.numel()];
                kernels::conv1d_grad_input(g, kt.data(), &mut gx, geom);
                accumulate(grads, input, gx);
            }
            if wants(kernel) {
                let mut gk = vec![S::zero(); kt.numel()];
                kernels::conv1d_grad_kernel(g, x.data(), &mut gk, geom);
                accumulate(grads, kernel, gk);
            }
            if wants(bias) {
                let mut gb = vec![S::zero(); cout];
                for row in g.chunks_exact(cout) {
                    gb.iter_mut().zip(row).for_each(|(d, &v)| *d = *d + v);
                }
                accumulate(grads, bias, gb);
            }
        }
        Op::GatherRows { a, index } => {
            let x = val(*a);
            let w = x.row_len();
            let mut ga = vec![S::zero(); x.numel()];
            for (t, &r) in index.iter().enumerate() {
                ga[r * w..(r + 1) * w]
                    .iter_mut()
                    .zip(&g[t * w..(t + 1) * w])
                    .for_each(|(d, &v)| *d = *d + v);
            }
            accumulate(grads, *a, ga);
        }
    }
}

impl<'t, S: Scalar> Var<'t, S> {
    pub fn tape(&self) -> &'t Tape<S> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<S>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// Value of a one-element variable.
    pub fn item(&self) -> Option<S> {
        self.value().item()
    }

    pub fn grad(&self) -> Option<Tensor<S>> {
        self.tape.grad(*self)
    }

    pub fn backward(&self) -> Result<()> {
        self.tape.backward(*self)
    }

    fn unary(&self, value: Tensor<S>, op: Op<S>) -> Var<'t, S> {
        self.tape.push(value, op, &[self.id])
    }

    fn binary_same_shape(&self, other: Var<'t, S>, name: &str) -> Result<(Rc<Tensor<S>>, Rc<Tensor<S>>)> {
        self.tape.check(other);
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(shape_err!("{name}: {:?} vs {:?}", a.shape(), b.shape()));
        }
        Ok((a, b))
    }

    fn zip_with(&self, other: Var<'t, S>, name: &str, f: impl Fn(S, S) -> S) -> Result<Tensor<S>> {
        let (a, b) = self.binary_same_shape(other, name)?;
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(a.shape().to_vec(), data)
    }

    /// Matrix product of `[n×k]` and `[k×m]`.
    pub fn matmul(&self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        self.tape.check(other);
        let (a, b) = (self.value(), other.value());
        if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(shape_err!("matmul: {:?} x {:?}", a.shape(), b.shape()));
        }
        let (n, k, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![S::zero(); n * m];
        kernels::matmul(a.data(), b.data(), &mut out, n, k, m);
        let value = Tensor::new(vec![n, m], out)?;
        Ok(self.tape.push(value, Op::MatMul { a: self.id, b: other.id, n, k, m }, &[self.id, other.id]))
    }

    pub fn add(&self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        let v = self.zip_with(other, "add", |x, y| x + y)?;
        Ok(self.tape.push(v, Op::Add { a: self.id, b: other.id }, &[self.id, other.id]))
    }

    pub fn sub(&self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        let v = self.zip_with(other, "sub", |x, y| x - y)?;
        Ok(self.tape.push(v, Op::Sub { a: self.id, b: other.id }, &[self.id, other.id]))
    }

    /// Elementwise product.
    pub fn mul(&self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        let v = self.zip_with(other, "mul", |x, y| x * y)?;
        Ok(self.tape.push(v, Op::Mul { a: self.id, b: other.id }, &[self.id, other.id]))
    }

    /// Adds a vector along the last axis of every row (bias broadcast).
    pub fn add_row(&self, row: Var<'t, S>) -> Result<Var<'t, S>> {
        self.tape.check(row);
        let (a, b) = (self.value(), row.value());
        let m = *a.shape().last().expect("rank");
        if b.numel() != m || b.ndim() != 1 {
            return Err(shape_err!("add_row: {:?} + {:?}", a.shape(), b.shape()));
        }
        let mut data = a.data().to_vec();
        for r in data.chunks_exact_mut(m) {
            r.iter_mut().zip(b.data()).for_each(|(x, &y)| *x = *x + y);
        }
        let value = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.tape.push(value, Op::AddRow { a: self.id, b: row.id }, &[self.id, row.id]))
    }

    /// Multiplies by a constant.
    pub fn scale(&self, c: S) -> Var<'t, S> {
        let v = self.value().map(|x| x * c);
        self.unary(v, Op::Scale { a: self.id, c })
    }

    pub fn neg(&self) -> Var<'t, S> {
        self.scale(-S::one())
    }

    pub fn add_scalar(&self, c: S) -> Var<'t, S> {
        let v = self.value().map(|x| x + c);
        self.unary(v, Op::AddScalar { a: self.id })
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&self) -> Var<'t, S> {
        let v = self.value().map(kernels::gelu);
        self.unary(v, Op::Gelu { a: self.id })
    }

    pub fn relu(&self) -> Var<'t, S> {
        let v = self.value().map(|x| if x > S::zero() { x } else { S::zero() });
        self.unary(v, Op::Relu { a: self.id })
    }

    pub fn exp(&self) -> Var<'t, S> {
        let v = self.value().map(|x| x.exp());
        self.unary(v, Op::Exp { a: self.id })
    }

    /// Natural logarithm.
    pub fn ln(&self) -> Var<'t, S> {
        let v = self.value().map(|x| x.ln());
        self.unary(v, Op::Log { a: self.id })
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Var<'t, S> {
        let x = self.value();
        let cols = *x.shape().last().expect("rank");
        let mut data = x.data().to_vec();
        data.chunks_exact_mut(cols).for_each(kernels::softmax_in_place);
        let v = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        self.unary(v, Op::Softmax { a: self.id })
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&self) -> Var<'t, S> {
        let x = self.value();
        let cols = *x.shape().last().expect("rank");
        let mut data = x.data().to_vec();
        data.chunks_exact_mut(cols).for_each(kernels::log_softmax_in_place);
        let v = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        self.unary(v, Op::LogSoftmax { a: self.id })
    }

    fn reduce_axis(&self, axis: usize, mean: bool) -> Result<Var<'t, S>> {
        let x = self.value();
        if axis >= x.ndim() {
            return Err(arg_err!("axis {axis} out of range for shape {:?}", x.shape()));
        }
        let (outer, dim, inner) = split_axis(x.shape(), axis);
        let mut data = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                let src = &x.data()[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                data[o * inner..(o + 1) * inner]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(acc, &v)| *acc = *acc + v);
            }
        }
        if mean {
            let inv = S::one() / S::lit(dim as f64);
            data.iter_mut().for_each(|v| *v = *v * inv);
        }
        let value = Tensor::new(reduced_shape(x.shape(), axis), data)?;
        Ok(self.unary(value, Op::SumAxis { a: self.id, outer, dim, inner, mean }))
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t, S>> {
        self.reduce_axis(axis, false)
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Var<'t, S>> {
        self.reduce_axis(axis, true)
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&self) -> Var<'t, S> {
        let total: S = self.value().data().iter().copied().sum();
        self.unary(Tensor::scalar(total), Op::SumAll { a: self.id, mean: false })
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(&self) -> Var<'t, S> {
        let x = self.value();
        let total: S = x.data().iter().copied().sum();
        let v = total / S::lit(x.numel() as f64);
        self.unary(Tensor::scalar(v), Op::SumAll { a: self.id, mean: true })
    }

    /// Divides every last-axis vector by `max(‖x‖, eps)`.
    pub fn l2_normalize(&self, eps: S) -> Var<'t, S> {
        let x = self.value();
        let cols = *x.shape().last().expect("rank");
        let mut data = x.data().to_vec();
        for row in data.chunks_exact_mut(cols) {
            let denom = row.iter().map(|&v| v * v).sum::<S>().sqrt().max(eps);
            row.iter_mut().for_each(|v| *v = *v / denom);
        }
        let v = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        self.unary(v, Op::L2Normalize { a: self.id, eps })
    }

    /// Transpose of a 2-D variable.
    pub fn transpose(&self) -> Result<Var<'t, S>> {
        let x = self.value();
        if x.ndim() != 2 {
            return Err(shape_err!("transpose needs rank 2, got {:?}", x.shape()));
        }
        let (r, c) = (x.shape()[0], x.shape()[1]);
        let v = Tensor::new(vec![c, r], kernels::transpose(x.data(), r, c))?;
        Ok(self.unary(v, Op::Transpose { a: self.id }))
    }

    pub fn clamp(&self, lo: S, hi: S) -> Var<'t, S> {
        let v = self.value().map(|x| x.max(lo).min(hi));
        self.unary(v, Op::Clamp { a: self.id, lo, hi })
    }

    /// Identity forward, no gradient backward.
    pub fn stop_gradient(&self) -> Var<'t, S> {
        let tape = self.tape;
        let value = match &tape.frozen {
            Some(frozen) => {
                let k = tape.frozen_cursor.get();
                tape.frozen_cursor.set(k + 1);
                frozen
                    .get(k)
                    .map(|v| Tensor::clone(v))
                    .filter(|v| v.shape() == self.value().shape())
                    .expect("replayed stop_gradient sequence diverged from the recorded one")
            }
            None => Tensor::clone(&self.value()),
        };
        let var = tape.push(value, Op::StopGradient, &[self.id]);
        tape.stop_log.borrow_mut().push(var.value());
        var
    }

    /// Identity forward, gradient multiplied by `-scale` backward.
    pub fn grad_reverse(&self, scale: S) -> Var<'t, S> {
        let v = Tensor::clone(&self.value());
        self.unary(v, Op::GradReverse { a: self.id, scale })
    }

    /// Averages windows of the leading axis down to `len` rows. Window `t`
    /// covers `[⌊t·T/len⌋, ⌊(t+1)·T/len⌋)`.
    pub fn adaptive_avg_pool(&self, len: usize) -> Result<Var<'t, S>> {
        let x = self.value();
        let rows = x.rows();
        if len == 0 || len > rows {
            return Err(arg_err!("cannot pool {rows} rows to {len}"));
        }
        let w = x.row_len();
        let mut data = vec![S::zero(); len * w];
        for t in 0..len {
            let (s, e) = kernels::pool_window(t, rows, len);
            let inv = S::one() / S::lit((e - s) as f64);
            let dst = &mut data[t * w..(t + 1) * w];
            for r in s..e {
                dst.iter_mut().zip(x.row(r)).for_each(|(d, &v)| *d = *d + v);
            }
            dst.iter_mut().for_each(|d| *d = *d * inv);
        }
        let mut shape = x.shape().to_vec();
        shape[0] = len;
        let v = Tensor::new(shape, data)?;
        Ok(self.unary(v, Op::AdaptivePool { a: self.id, len }))
    }

    /// Same-length dilated convolution over the leading (time) axis.
    ///
    /// `self` is `[T×C_in]`, `kernel` is `[k×C_in×C_out]` with odd `k`,
    /// `bias` is `[C_out]`. Out-of-range taps read zero.
    pub fn dilated_conv1d(&self, kernel: Var<'t, S>, bias: Var<'t, S>, dilation: usize) -> Result<Var<'t, S>> {
        self.tape.check(kernel);
        self.tape.check(bias);
        let (x, kt, b) = (self.value(), kernel.value(), bias.value());
        if x.ndim() != 2 || kt.ndim() != 3 || b.ndim() != 1 {
            return Err(shape_err!(
                "conv1d ranks: input {:?}, kernel {:?}, bias {:?}",
                x.shape(),
                kt.shape(),
                b.shape()
            ));
        }
        let (t_len, cin) = (x.shape()[0], x.shape()[1]);
        let (k, kcin, cout) = (kt.shape()[0], kt.shape()[1], kt.shape()[2]);
        if kcin != cin || b.numel() != cout {
            return Err(shape_err!(
                "conv1d channels: input {:?}, kernel {:?}, bias {:?}",
                x.shape(),
                kt.shape(),
                b.shape()
            ));
        }
        if k % 2 == 0 {
            return Err(arg_err!("conv1d kernel size must be odd, got {k}"));
        }
        if dilation == 0 {
            return Err(arg_err!("dilation must be positive"));
        }
        let geom = kernels::ConvGeom { t_len, cin, cout, k, dilation };
        let mut out = vec![S::zero(); t_len * cout];
        kernels::conv1d(x.data(), kt.data(), b.data(), &mut out, geom);
        let v = Tensor::new(vec![t_len, cout], out)?;
        Ok(self.tape.push(
            v,
            Op::Conv1d { input: self.id, kernel: kernel.id, bias: bias.id, dilation },
            &[self.id, kernel.id, bias.id],
        ))
    }

    /// Selects leading-axis slices by index; indices may repeat.
    pub fn gather_rows(&self, index: &[usize]) -> Result<Var<'t, S>> {
        let x = self.value();
        let rows = x.rows();
        if index.is_empty() {
            return Err(arg_err!("gather_rows needs at least one index"));
        }
        if let Some(&bad) = index.iter().find(|&&r| r >= rows) {
            return Err(arg_err!("row {bad} out of range for {rows} rows"));
        }
        let w = x.row_len();
        let mut data = Vec::with_capacity(index.len() * w);
        for &r in index {
            data.extend_from_slice(x.row(r));
        }
        let mut shape = x.shape().to_vec();
        shape[0] = index.len();
        let v = Tensor::new(shape, data)?;
        Ok(self.unary(v, Op::GatherRows { a: self.id, index: index.to_vec() }))
    }

    /// Rows `start..end` of the leading axis.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Var<'t, S>> {
        if start >= end {
            return Err(arg_err!("empty row range {start}..{end}"));
        }
        let index: Vec<usize> = (start..end).collect();
        self.gather_rows(&index)
    }
}
