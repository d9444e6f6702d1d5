//! Reverse-mode differentiation over an append-only operation tape.
//!
//! Every primitive records its output value and the ids of its inputs.
//! Because nodes can only refer to earlier nodes, walking the tape from the
//! last index down to zero visits nodes in reverse topological order, each
//! exactly once.

use std::cell::RefCell;

use super::tensor::{BroadcastPlan, MatmulPlan};
use super::{NumericsError, Real, Result, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T: Real> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Slice { src: Var, axis: usize, start: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Tanh(Var),
    Softmax(Var),
    LayerNorm { src: Var, rstd: Vec<T> },
    SumAll(Var),
    MeanAll(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    Broadcast(Var),
}

impl<T: Real> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::Slice { .. } => "slice",
            Op::Concat { .. } => "concat",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sqrt(..) => "sqrt",
            Op::Tanh(..) => "tanh",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::SumAll(..) => "sum",
            Op::MeanAll(..) => "mean",
            Op::SumAxis(..) => "sum_axis",
            Op::MeanAxis(..) => "mean_axis",
            Op::Broadcast(..) => "broadcast",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Concat { parts, .. } => parts.clone(),
            Op::Transpose(a)
            | Op::Reshape(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sqrt(a)
            | Op::Tanh(a)
            | Op::Softmax(a)
            | Op::SumAll(a)
            | Op::MeanAll(a)
            | Op::SumAxis(a, _)
            | Op::MeanAxis(a, _)
            | Op::Broadcast(a) => vec![*a],
            Op::Slice { src, .. } | Op::LayerNorm { src, .. } => vec![*src],
        }
    }
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a computation for later differentiation.
///
/// Operations take `&self`; the tape is single-threaded (not `Sync`).
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar root with respect to every node that required one.
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for `v`; `None` if `v` does not influence the root or does
    /// not require gradients.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or zeros of `like`'s shape when unused.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor<T>) -> Tensor<T> {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::from_parts(like.shape().to_vec(), vec![T::zero(); like.numel()]),
        }
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that gradients are computed for.
    pub fn param(&self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> Tensor<T> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn push(&self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        if !value.all_finite() {
            return Err(NumericsError::NonFinite { op: op.name(), node: Some(id) });
        }
        let requires_grad = op.inputs().iter().any(|i| nodes[i.0].requires_grad);
        nodes.push(Node { value, op, requires_grad });
        Ok(Var(id))
    }

    fn unary(&self, a: Var, f: impl FnOnce(&Tensor<T>) -> Result<Tensor<T>>, op: Op<T>) -> Result<Var> {
        let out = f(&self.nodes.borrow()[a.0].value)?;
        self.push(out, op)
    }

    fn binary(
        &self,
        a: Var,
        b: Var,
        f: impl FnOnce(&Tensor<T>, &Tensor<T>) -> Result<Tensor<T>>,
        op: Op<T>,
    ) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            f(&nodes[a.0].value, &nodes[b.0].value)?
        };
        self.push(out, op)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x.add(y), Op::Add(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x.mul(y), Op::Mul(a, b))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x.matmul(y), Op::MatMul(a, b))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.transpose(), Op::Transpose(a))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        self.unary(a, |x| x.reshape(shape), Op::Reshape(a))
    }

    pub fn slice(&self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.unary(a, |x| x.slice(axis, start, end), Op::Slice { src: a, axis, start })
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let refs: Vec<&Tensor<T>> = parts.iter().map(|p| &nodes[p.0].value).collect();
            Tensor::concat(&refs, axis)?
        };
        self.push(out, Op::Concat { parts: parts.to_vec(), axis })
    }

    pub fn exp(&self, a: Var) -> Result<Var> {
        self.unary(a, |x| Ok(x.exp()), Op::Exp(a))
    }

    pub fn log(&self, a: Var) -> Result<Var> {
        self.unary(a, |x| Ok(x.ln()), Op::Log(a))
    }

    pub fn sqrt(&self, a: Var) -> Result<Var> {
        self.unary(a, |x| Ok(x.sqrt()), Op::Sqrt(a))
    }

    pub fn tanh(&self, a: Var) -> Result<Var> {
        self.unary(a, |x| Ok(x.tanh()), Op::Tanh(a))
    }

    pub fn softmax(&self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.softmax_last_axis(), Op::Softmax(a))
    }

    /// Layer normalization over the last axis, without affine parameters.
    pub fn layer_norm(&self, a: Var, eps: T) -> Result<Var> {
        let (out, rstd) = self.nodes.borrow()[a.0].value.layer_norm_last_axis(eps)?;
        self.push(out, Op::LayerNorm { src: a, rstd })
    }

    pub fn sum(&self, a: Var) -> Result<Var> {
        self.unary(a, |x| Ok(x.sum_all()), Op::SumAll(a))
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        self.unary(a, |x| Ok(x.mean_all()), Op::MeanAll(a))
    }

    pub fn sum_axis(&self, a: Var, axis: usize) -> Result<Var> {
        self.unary(a, |x| x.sum_axis(axis), Op::SumAxis(a, axis))
    }

    pub fn mean_axis(&self, a: Var, axis: usize) -> Result<Var> {
        self.unary(a, |x| x.mean_axis(axis), Op::MeanAxis(a, axis))
    }

    pub fn broadcast(&self, a: Var, shape: &[usize]) -> Result<Var> {
        self.unary(a, |x| x.broadcast_to(shape), Op::Broadcast(a))
    }

    /// Reverse pass from a one-element root.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root_node = &nodes[root.0];
        if root_node.value.numel() != 1 {
            return Err(NumericsError::NotScalar { shape: root_node.value.shape().to_vec() });
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        if root_node.requires_grad {
            grads[root.0] = Some(vec![T::one()]);
        }

        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let wants = |v: &Var| nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    if wants(a) {
                        accumulate(&mut grads[a.0], &g);
                    }
                    if wants(b) {
                        accumulate(&mut grads[b.0], &g);
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    if wants(a) {
                        let ga: Vec<T> = g.iter().zip(bv).map(|(&g, &b)| g * b).collect();
                        accumulate_owned(&mut grads[a.0], ga);
                    }
                    if wants(b) {
                        let gb: Vec<T> = g.iter().zip(av).map(|(&g, &a)| g * a).collect();
                        accumulate_owned(&mut grads[b.0], gb);
                    }
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    let plan = MatmulPlan::new(av.shape(), bv.shape())?;
                    if wants(a) {
                        let da = grads[a.0].get_or_insert_with(|| vec![T::zero(); av.numel()]);
                        plan.grad_lhs(&g, bv.data(), da);
                    }
                    if wants(b) {
                        let db = grads[b.0].get_or_insert_with(|| vec![T::zero(); bv.numel()]);
                        plan.grad_rhs(&g, av.data(), db);
                    }
                }
                Op::Transpose(a) => {
                    if wants(a) {
                        let gt = Tensor::from_parts(node.value.shape().to_vec(), g).transpose()?;
                        accumulate(&mut grads[a.0], gt.data());
                    }
                }
                Op::Reshape(a) => {
                    if wants(a) {
                        accumulate_owned(&mut grads[a.0], g);
                    }
                }
                Op::Slice { src, axis, start } => {
                    if wants(src) {
                        let shape = nodes[src.0].value.shape();
                        let dst = grads[src.0].get_or_insert_with(|| vec![T::zero(); nodes[src.0].value.numel()]);
                        let outer: usize = shape[..*axis].iter().product();
                        let inner: usize = shape[axis + 1..].iter().product();
                        let len = shape[*axis];
                        let width = node.value.shape()[*axis];
                        for o in 0..outer {
                            let from = &g[o * width * inner..(o + 1) * width * inner];
                            let base = (o * len + start) * inner;
                            for (d, &v) in dst[base..base + width * inner].iter_mut().zip(from) {
                                *d += v;
                            }
                        }
                    }
                }
                Op::Concat { parts, axis } => {
                    let out_shape = node.value.shape();
                    let outer: usize = out_shape[..*axis].iter().product();
                    let inner: usize = out_shape[axis + 1..].iter().product();
                    let total = out_shape[*axis];
                    let mut offset = 0;
                    for p in parts {
                        let width = nodes[p.0].value.shape()[*axis];
                        if wants(p) {
                            let mut part = Vec::with_capacity(outer * width * inner);
                            for o in 0..outer {
                                let base = (o * total + offset) * inner;
                                part.extend_from_slice(&g[base..base + width * inner]);
                            }
                            accumulate_owned(&mut grads[p.0], part);
                        }
                        offset += width;
                    }
                }
                Op::Exp(a) => {
                    if wants(a) {
                        let y = node.value.data();
                        let ga = g.iter().zip(y).map(|(&g, &y)| g * y).collect();
                        accumulate_owned(&mut grads[a.0], ga);
                    }
                }
                Op::Log(a) => {
                    if wants(a) {
                        let x = nodes[a.0].value.data();
                        let ga = g.iter().zip(x).map(|(&g, &x)| g / x).collect();
                        accumulate_owned(&mut grads[a.0], ga);
                    }
                }
                Op::Sqrt(a) => {
                    if wants(a) {
                        let y = node.value.data();
                        let half = T::of(0.5);
                        let ga = g.iter().zip(y).map(|(&g, &y)| g * half / y).collect();
                        accumulate_owned(&mut grads[a.0], ga);
                    }
                }
                Op::Tanh(a) => {
                    if wants(a) {
                        let y = node.value.data();
                        let ga = g.iter().zip(y).map(|(&g, &y)| g * (T::one() - y * y)).collect();
                        accumulate_owned(&mut grads[a.0], ga);
                    }
                }
                Op::Softmax(a) => {
                    if wants(a) {
                        let y = node.value.data();
                        let n = *node.value.shape().last().unwrap();
                        let mut ga = Vec::with_capacity(g.len());
                        for (gr, yr) in g.chunks(n).zip(y.chunks(n)) {
                            let dot: T = gr.iter().zip(yr).map(|(&g, &y)| g * y).sum();
                            ga.extend(gr.iter().zip(yr).map(|(&g, &y)| y * (g - dot)));
                        }
                        accumulate_owned(&mut grads[a.0], ga);
                    }
                }
                Op::LayerNorm { src, rstd } => {
                    if wants(src) {
                        let y = node.value.data();
                        let n = *node.value.shape().last().unwrap();
                        let nf = T::of_usize(n);
                        let mut ga = Vec::with_capacity(g.len());
                        for ((gr, yr), &r) in g.chunks(n).zip(y.chunks(n)).zip(rstd) {
                            let mean_g = gr.iter().copied().sum::<T>() / nf;
                            let mean_gy = gr.iter().zip(yr).map(|(&g, &y)| g * y).sum::<T>() / nf;
                            ga.extend(gr.iter().zip(yr).map(|(&g, &y)| r * (g - mean_g - y * mean_gy)));
                        }
                        accumulate_owned(&mut grads[src.0], ga);
                    }
                }
                Op::SumAll(a) | Op::MeanAll(a) => {
                    if wants(a) {
                        let n = nodes[a.0].value.numel();
                        let scale = match node.op {
                            Op::MeanAll(_) => g[0] / T::of_usize(n),
                            _ => g[0],
                        };
                        accumulate_owned(&mut grads[a.0], vec![scale; n]);
                    }
                }
                Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
                    if wants(a) {
                        let shape = nodes[a.0].value.shape();
                        let len = shape[*axis];
                        let scale = match node.op {
                            Op::MeanAxis(..) => T::one() / T::of_usize(len),
                            _ => T::one(),
                        };
                        let outer: usize = shape[..*axis].iter().product();
                        let inner: usize = shape[axis + 1..].iter().product();
                        let mut ga = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let row = &g[o * inner..(o + 1) * inner];
                            for _ in 0..len {
                                ga.extend(row.iter().map(|&v| v * scale));
                            }
                        }
                        accumulate_owned(&mut grads[a.0], ga);
                    }
                }
                Op::Broadcast(a) => {
                    if wants(a) {
                        let src = &nodes[a.0].value;
                        let plan = BroadcastPlan::new(src.shape(), node.value.shape())?;
                        let dst = grads[a.0].get_or_insert_with(|| vec![T::zero(); src.numel()]);
                        for (i, &v) in g.iter().enumerate() {
                            dst[plan.source_index(i)] += v;
                        }
                    }
                }
            }
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(id, g)| g.map(|g| Tensor::from_parts(nodes[id].value.shape().to_vec(), g)))
            .collect();
        Ok(Gradients { grads })
    }
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, g: &[T]) {
    match slot {
        Some(acc) => {
            for (a, &v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
        None => *slot = Some(g.to_vec()),
    }
}

fn accumulate_owned<T: Real>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
        None => *slot = Some(g),
    }
}

/// Runs `f` on fresh parameter leaves and returns the scalar value together
/// with one gradient per parameter (zeros for unused parameters).
pub fn evaluate_with_gradients<T, F>(params: &[Tensor<T>], f: F) -> Result<(T, Vec<Tensor<T>>)>
where
    T: Real,
    F: FnOnce(&Tape<T>, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let root = f(&tape, &vars)?;
    let value = tape.value(root).item()?;
    let grads = tape.backward(root)?;
    let out = vars.iter().zip(params).map(|(&v, p)| grads.get_or_zeros(v, p)).collect();
    Ok((value, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn sum_of_squares() {
        let w = t(&[3], &[1.0, 2.0, 3.0]);
        let (v, g) = evaluate_with_gradients(&[w], |tape, p| {
            let sq = tape.mul(p[0], p[0])?;
            tape.sum(sq)
        })
        .unwrap();
        assert_eq!(v, 14.0);
        assert_eq!(g[0].data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn sum_has_unit_gradient() {
        let w = t(&[2, 2], &[0.3, -7.0, 2.5, 1e3]);
        let (_, g) = evaluate_with_gradients(&[w], |tape, p| tape.sum(p[0])).unwrap();
        assert_eq!(g[0].data(), &[1.0; 4]);
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let w = t(&[2], &[1.0, 2.0]);
        let dead = t(&[3], &[4.0, 5.0, 6.0]);
        let (_, g) = evaluate_with_gradients(&[w, dead], |tape, p| tape.sum(p[0])).unwrap();
        assert_eq!(g[1].data(), &[0.0; 3]);
    }

    #[test]
    fn shape_error_names_primitive() {
        let tape = Tape::<f64>::new();
        let a = tape.param(t(&[2], &[1.0, 2.0]));
        let b = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
        match tape.add(a, b) {
            Err(NumericsError::ShapeMismatch { op, lhs, rhs }) => {
                assert_eq!(op, "add");
                assert_eq!(lhs, vec![2]);
                assert_eq!(rhs, vec![3]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_finite_intermediate_names_node() {
        let tape = Tape::<f64>::new();
        let a = tape.param(t(&[2], &[-1.0, 2.0]));
        match tape.log(a) {
            Err(NumericsError::NonFinite { op, node }) => {
                assert_eq!(op, "log");
                assert_eq!(node, Some(1));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // f = sum(exp(w) * exp(w)) → df/dw = 2 exp(2w)
        let w = t(&[2], &[0.1, -0.4]);
        let (_, g) = evaluate_with_gradients(&[w.clone()], |tape, p| {
            let e = tape.exp(p[0])?;
            let sq = tape.mul(e, e)?;
            tape.sum(sq)
        })
        .unwrap();
        for (gi, wi) in g[0].data().iter().zip(w.data()) {
            assert!((gi - 2.0 * (2.0 * wi).exp()).abs() < 1e-12);
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::<f64>::new();
        let c = tape.constant(t(&[2], &[1.0, 2.0]));
        let p = tape.param(t(&[2], &[3.0, 4.0]));
        let prod = tape.mul(c, p).unwrap();
        let s = tape.sum(prod).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(p).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let tape = Tape::<f64>::new();
        let p = tape.param(t(&[2], &[3.0, 4.0]));
        assert!(matches!(tape.backward(p), Err(NumericsError::NotScalar { .. })));
    }
}
