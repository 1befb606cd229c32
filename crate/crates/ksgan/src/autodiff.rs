//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every operation appends a node to an append-only graph; node inputs always
//! reference earlier nodes, so the tape is topologically ordered by
//! construction. The backward pass is itself expressed through the same
//! primitives and recorded on the same tape, which is what makes second-order
//! use (gradients of gradients, e.g. the score penalty) work: [`grad`] with
//! `create_graph = true` returns live variables that can be differentiated
//! again.
//!
//! A graph is intended to live for one optimization step and be dropped
//! afterwards. Graphs are single-threaded; distinct graphs may live on
//! distinct threads.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Neg(usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Matmul(usize, usize),
    Transpose(usize),
    Sum(usize),
    Mean(usize),
    SumTo(usize),
    Broadcast(usize),
    Reshape(usize),
    Abs(usize),
    Exp(usize),
    Log(usize),
    Recip(usize),
    Sqrt(usize),
    Square(usize),
    Sigmoid(usize),
    Softplus(usize),
    Relu(usize),
    LeakyRelu(usize, f64),
    L2NormSq(usize),
    Concat(Vec<usize>, usize),
    SliceAxis {
        input: usize,
        axis: usize,
        start: usize,
        len: usize,
    },
    PadZeros {
        input: usize,
        axis: usize,
        before: usize,
    },
    IndicatorSte {
        c: usize,
        lam: usize,
        clip: Option<f64>,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

#[derive(Default)]
struct GraphInner {
    nodes: Vec<Node>,
}

/// Handle to a computation graph (tape). Cheap to clone.
#[derive(Clone, Default)]
pub struct Graph {
    inner: Rc<RefCell<GraphInner>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var {
            graph: self.clone(),
            id,
        }
    }

    /// New leaf variable. Gradients accumulate into it only when
    /// `requires_grad` is set.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// New constant leaf (never receives gradients).
    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    fn same_as(&self, other: &Graph) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    fn value_of(&self, id: usize) -> Tensor {
        self.inner.borrow().nodes[id].value.clone()
    }

    fn with_value<R>(&self, id: usize, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.inner.borrow().nodes[id].value)
    }

    fn requires_grad_of(&self, id: usize) -> bool {
        self.inner.borrow().nodes[id].requires_grad
    }
}

/// A value recorded on a graph.
#[derive(Clone)]
pub struct Var {
    graph: Graph,
    id: usize,
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.with_value(|t| {
            f.debug_struct("Var")
                .field("id", &self.id)
                .field("shape", &t.shape())
                .field("requires_grad", &self.requires_grad())
                .finish()
        })
    }
}

impl Var {
    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires_grad_of(self.id)
    }

    /// Clone of this variable's value.
    pub fn value(&self) -> Tensor {
        self.graph.value_of(self.id)
    }

    /// Read the value without cloning.
    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        self.graph.with_value(self.id, f)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.with_value(|t| t.shape().to_vec())
    }

    pub fn scalar(&self) -> Result<f64> {
        self.with_value(|t| t.scalar_value())
    }

    /// Value-equal variable with no backward edge and `requires_grad` false.
    pub fn detach(&self) -> Var {
        self.graph.constant(self.value())
    }

    fn check_same_graph(&self, other: &Var) -> Result<()> {
        if self.graph.same_as(&other.graph) {
            Ok(())
        } else {
            Err(Error::GraphMismatch)
        }
    }

    fn unary(&self, value: Tensor, op: Op) -> Var {
        let rg = self.requires_grad();
        self.graph.push(value, rg, op)
    }

    fn binary(&self, other: &Var, value: Tensor, op: Op) -> Var {
        let rg = self.requires_grad() || other.requires_grad();
        self.graph.push(value, rg, op)
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        self.check_same_graph(other)?;
        let value = self.with_value(|a| other.with_value(|b| a.zip_map(b, "add", |x, y| x + y)))?;
        Ok(self.binary(other, value, Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        self.check_same_graph(other)?;
        let value = self.with_value(|a| other.with_value(|b| a.zip_map(b, "sub", |x, y| x - y)))?;
        Ok(self.binary(other, value, Op::Sub(self.id, other.id)))
    }

    pub fn neg(&self) -> Var {
        let value = self.with_value(|a| a.map(|x| -x));
        self.unary(value, Op::Neg(self.id))
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        self.check_same_graph(other)?;
        let value = self.with_value(|a| other.with_value(|b| a.zip_map(b, "mul", |x, y| x * y)))?;
        Ok(self.binary(other, value, Op::Mul(self.id, other.id)))
    }

    pub fn scale(&self, k: f64) -> Var {
        let value = self.with_value(|a| a.map(|x| x * k));
        self.unary(value, Op::Scale(self.id, k))
    }

    pub fn matmul(&self, other: &Var) -> Result<Var> {
        self.check_same_graph(other)?;
        let value = self.with_value(|a| other.with_value(|b| a.matmul(b)))?;
        Ok(self.binary(other, value, Op::Matmul(self.id, other.id)))
    }

    pub fn transpose(&self) -> Result<Var> {
        let value = self.with_value(|a| a.transpose())?;
        Ok(self.unary(value, Op::Transpose(self.id)))
    }

    /// Sum of all elements (rank-0 result).
    pub fn sum(&self) -> Var {
        let value = self.with_value(|a| Tensor::scalar(a.data().iter().sum()));
        self.unary(value, Op::Sum(self.id))
    }

    /// Arithmetic mean of all elements (rank-0 result).
    pub fn mean(&self) -> Var {
        let value = self.with_value(|a| {
            let n = a.numel().max(1) as f64;
            Tensor::scalar(a.data().iter().sum::<f64>() / n)
        });
        self.unary(value, Op::Mean(self.id))
    }

    /// Sum over broadcast axes down to `target` shape.
    pub fn sum_to(&self, target: &[usize]) -> Result<Var> {
        let value = self.with_value(|a| a.sum_to(target))?;
        Ok(self.unary(value, Op::SumTo(self.id)))
    }

    pub fn broadcast_to(&self, target: &[usize]) -> Result<Var> {
        let value = self.with_value(|a| a.broadcast_to(target))?;
        Ok(self.unary(value, Op::Broadcast(self.id)))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        let value = self.with_value(|a| a.reshape(shape))?;
        Ok(self.unary(value, Op::Reshape(self.id)))
    }

    /// Elementwise absolute value; subgradient 0 at 0.
    pub fn abs(&self) -> Var {
        let value = self.with_value(|a| a.map(f64::abs));
        self.unary(value, Op::Abs(self.id))
    }

    pub fn exp(&self) -> Var {
        let value = self.with_value(|a| a.map(f64::exp));
        self.unary(value, Op::Exp(self.id))
    }

    pub fn log(&self) -> Var {
        let value = self.with_value(|a| a.map(f64::ln));
        self.unary(value, Op::Log(self.id))
    }

    pub fn recip(&self) -> Var {
        let value = self.with_value(|a| a.map(|x| 1.0 / x));
        self.unary(value, Op::Recip(self.id))
    }

    pub fn sqrt(&self) -> Var {
        let value = self.with_value(|a| a.map(f64::sqrt));
        self.unary(value, Op::Sqrt(self.id))
    }

    pub fn square(&self) -> Var {
        let value = self.with_value(|a| a.map(|x| x * x));
        self.unary(value, Op::Square(self.id))
    }

    pub fn sigmoid(&self) -> Var {
        let value = self.with_value(|a| a.map(sigmoid_stable));
        self.unary(value, Op::Sigmoid(self.id))
    }

    /// `ln(1 + exp(x))`, evaluated stably.
    pub fn softplus(&self) -> Var {
        let value = self.with_value(|a| a.map(softplus_stable));
        self.unary(value, Op::Softplus(self.id))
    }

    pub fn relu(&self) -> Var {
        let value = self.with_value(|a| a.map(|x| x.max(0.0)));
        self.unary(value, Op::Relu(self.id))
    }

    pub fn leaky_relu(&self, slope: f64) -> Var {
        let value = self.with_value(|a| a.map(|x| if x > 0.0 { x } else { slope * x }));
        self.unary(value, Op::LeakyRelu(self.id, slope))
    }

    /// Sum of squares of all elements (rank-0 result).
    pub fn l2_norm_sq(&self) -> Var {
        let value = self.with_value(|a| Tensor::scalar(a.data().iter().map(|v| v * v).sum()));
        self.unary(value, Op::L2NormSq(self.id))
    }

    /// Contiguous slice along `axis`.
    pub fn slice_axis(&self, axis: usize, start: usize, len: usize) -> Result<Var> {
        let value = self.with_value(|a| slice_axis_tensor(a, axis, start, len))?;
        Ok(self.unary(
            value,
            Op::SliceAxis {
                input: self.id,
                axis,
                start,
                len,
            },
        ))
    }

    /// Zero-padding along `axis`.
    pub fn pad_zeros(&self, axis: usize, before: usize, after: usize) -> Result<Var> {
        let value = self.with_value(|a| pad_zeros_tensor(a, axis, before, after))?;
        Ok(self.unary(
            value,
            Op::PadZeros {
                input: self.id,
                axis,
                before,
            },
        ))
    }
}

/// Concatenate along `axis`. All inputs must share the other dimensions.
pub fn concat(vars: &[&Var], axis: usize) -> Result<Var> {
    if vars.is_empty() {
        return Err(Error::EmptyBatch("concat".to_string()));
    }
    let graph = vars[0].graph.clone();
    for v in vars {
        if !graph.same_as(&v.graph) {
            return Err(Error::GraphMismatch);
        }
    }
    let values: Vec<Tensor> = vars.iter().map(|v| v.value()).collect();
    let value = concat_tensors(&values, axis)?;
    let rg = vars.iter().any(|v| v.requires_grad());
    let ids = vars.iter().map(|v| v.id).collect();
    Ok(graph.push(value, rg, Op::Concat(ids, axis)))
}

/// Hard indicator `1[c <= lambda]` with a straight-through surrogate in the
/// backward pass: gradients flow as if the op were the linear map
/// `lambda - c`, i.e. d/dc = -1 and d/dlambda = +1 elementwise. With
/// `clip = Some(r)` the surrogate is zeroed where `|c - lambda| > r`.
/// Inputs are broadcast to a common shape.
pub fn indicator_ste(c: &Var, lam: &Var, clip: Option<f64>) -> Result<Var> {
    c.check_same_graph(lam)?;
    let cs = c.shape();
    let ls = lam.shape();
    let common = common_broadcast_shape(&cs, &ls).ok_or_else(|| Error::ShapeMismatch {
        op: "indicator_ste".to_string(),
        lhs: cs.clone(),
        rhs: ls.clone(),
    })?;
    let cb = if cs == common { c.clone() } else { c.broadcast_to(&common)? };
    let lb = if ls == common { lam.clone() } else { lam.broadcast_to(&common)? };
    let value = cb.with_value(|cv| {
        lb.with_value(|lv| cv.zip_map(lv, "indicator_ste", |x, l| if x <= l { 1.0 } else { 0.0 }))
    })?;
    let rg = cb.requires_grad() || lb.requires_grad();
    Ok(cb.graph.push(
        value,
        rg,
        Op::IndicatorSte {
            c: cb.id,
            lam: lb.id,
            clip,
        },
    ))
}

fn common_broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da == db || da == 1 || db == 1 {
            out[i] = da.max(db);
        } else {
            return None;
        }
    }
    Some(out)
}

fn sigmoid_stable(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus_stable(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn axis_blocks(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::InvalidShape(format!(
            "axis {} out of range for shape {:?}",
            axis, shape
        )));
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn slice_axis_tensor(t: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    let (outer, dim, inner) = axis_blocks(t.shape(), axis)?;
    if start + len > dim {
        return Err(Error::InvalidShape(format!(
            "slice {}..{} out of range for axis {} of {:?}",
            start,
            start + len,
            axis,
            t.shape()
        )));
    }
    let mut shape = t.shape().to_vec();
    shape[axis] = len;
    let mut out = Vec::with_capacity(outer * len * inner);
    let src = t.data();
    for o in 0..outer {
        let base = o * dim * inner + start * inner;
        out.extend_from_slice(&src[base..base + len * inner]);
    }
    Tensor::new(shape, out)
}

fn pad_zeros_tensor(t: &Tensor, axis: usize, before: usize, after: usize) -> Result<Tensor> {
    let (outer, dim, inner) = axis_blocks(t.shape(), axis)?;
    let mut shape = t.shape().to_vec();
    shape[axis] = before + dim + after;
    let mut out = vec![0.0; outer * shape[axis] * inner];
    let src = t.data();
    for o in 0..outer {
        let dst_base = o * shape[axis] * inner + before * inner;
        let src_base = o * dim * inner;
        out[dst_base..dst_base + dim * inner]
            .copy_from_slice(&src[src_base..src_base + dim * inner]);
    }
    Tensor::new(shape, out)
}

fn concat_tensors(ts: &[Tensor], axis: usize) -> Result<Tensor> {
    let first = &ts[0];
    let (_, _, inner) = axis_blocks(first.shape(), axis)?;
    let mut dim_total = 0usize;
    for t in ts {
        if t.shape().len() != first.shape().len() {
            return Err(Error::ShapeMismatch {
                op: "concat".to_string(),
                lhs: first.shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
        for (d, (&a, &b)) in first.shape().iter().zip(t.shape()).enumerate() {
            if d != axis && a != b {
                return Err(Error::ShapeMismatch {
                    op: "concat".to_string(),
                    lhs: first.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
        }
        dim_total += t.shape()[axis];
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = dim_total;
    let outer: usize = shape[..axis].iter().product();
    let mut out = Vec::with_capacity(outer * dim_total * inner);
    for o in 0..outer {
        for t in ts {
            let dim = t.shape()[axis];
            let base = o * dim * inner;
            out.extend_from_slice(&t.data()[base..base + dim * inner]);
        }
    }
    Tensor::new(shape, out)
}

/// Gradients of a scalar `output` with respect to `inputs`.
///
/// The backward pass is recorded on the same graph; with
/// `create_graph = true` the returned variables stay differentiable, with
/// `create_graph = false` they are detached constants with bit-identical
/// values. Inputs unreachable from `output` get zero gradients of their own
/// shape.
pub fn grad(output: &Var, inputs: &[&Var], create_graph: bool) -> Result<Vec<Var>> {
    let graph = output.graph.clone();
    if !output.with_value(|t| t.is_scalar()) {
        return Err(Error::NotScalar(output.shape()));
    }
    for v in inputs {
        if !graph.same_as(&v.graph) {
            return Err(Error::GraphMismatch);
        }
    }

    let mut gmap: Vec<Option<usize>> = vec![None; output.id + 1];
    if output.requires_grad() {
        let seed = graph.constant(Tensor::ones(&output.with_value(|t| t.shape().to_vec())));
        gmap[output.id] = Some(seed.id);
        for id in (0..=output.id).rev() {
            let Some(gid) = gmap[id] else { continue };
            if !graph.requires_grad_of(id) {
                continue;
            }
            let op = graph.inner.borrow().nodes[id].op.clone();
            apply_vjp(&graph, id, gid, &op, &mut gmap)?;
        }
    }

    let mut out = Vec::with_capacity(inputs.len());
    for v in inputs {
        let g = match gmap.get(v.id).copied().flatten() {
            Some(gid) => Var {
                graph: graph.clone(),
                id: gid,
            },
            None => graph.constant(Tensor::zeros(&v.shape())),
        };
        out.push(if create_graph { g } else { g.detach() });
    }
    Ok(out)
}

fn accumulate(graph: &Graph, gmap: &mut Vec<Option<usize>>, target: usize, contribution: Var) -> Result<()> {
    if !graph.requires_grad_of(target) {
        return Ok(());
    }
    let merged = match gmap[target] {
        None => contribution,
        Some(old) => Var {
            graph: graph.clone(),
            id: old,
        }
        .add(&contribution)?,
    };
    gmap[target] = Some(merged.id);
    Ok(())
}

fn apply_vjp(
    graph: &Graph,
    node_id: usize,
    grad_id: usize,
    op: &Op,
    gmap: &mut Vec<Option<usize>>,
) -> Result<()> {
    let var = |id: usize| Var {
        graph: graph.clone(),
        id,
    };
    let g = var(grad_id);
    let out = var(node_id);
    match *op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(graph, gmap, a, g.clone())?;
            accumulate(graph, gmap, b, g)?;
        }
        Op::Sub(a, b) => {
            accumulate(graph, gmap, a, g.clone())?;
            accumulate(graph, gmap, b, g.neg())?;
        }
        Op::Neg(a) => accumulate(graph, gmap, a, g.neg())?,
        Op::Mul(a, b) => {
            accumulate(graph, gmap, a, g.mul(&var(b))?)?;
            accumulate(graph, gmap, b, g.mul(&var(a))?)?;
        }
        Op::Scale(a, k) => accumulate(graph, gmap, a, g.scale(k))?,
        Op::Matmul(a, b) => {
            accumulate(graph, gmap, a, g.matmul(&var(b).transpose()?)?)?;
            accumulate(graph, gmap, b, var(a).transpose()?.matmul(&g)?)?;
        }
        Op::Transpose(a) => accumulate(graph, gmap, a, g.transpose()?)?,
        Op::Sum(a) => {
            let shape = var(a).shape();
            accumulate(graph, gmap, a, g.broadcast_to(&shape)?)?;
        }
        Op::Mean(a) => {
            let shape = var(a).shape();
            let n: usize = shape.iter().product();
            accumulate(graph, gmap, a, g.broadcast_to(&shape)?.scale(1.0 / n.max(1) as f64))?;
        }
        Op::SumTo(a) => {
            let shape = var(a).shape();
            accumulate(graph, gmap, a, g.broadcast_to(&shape)?)?;
        }
        Op::Broadcast(a) => {
            let shape = var(a).shape();
            accumulate(graph, gmap, a, g.sum_to(&shape)?)?;
        }
        Op::Reshape(a) => {
            let shape = var(a).shape();
            accumulate(graph, gmap, a, g.reshape(&shape)?)?;
        }
        Op::Abs(a) => {
            let sign = var(a).with_value(|t| {
                t.map(|x| {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                })
            });
            accumulate(graph, gmap, a, g.mul(&graph.constant(sign))?)?;
        }
        Op::Exp(a) => accumulate(graph, gmap, a, g.mul(&out)?)?,
        Op::Log(a) => accumulate(graph, gmap, a, g.mul(&var(a).recip())?)?,
        Op::Recip(a) => accumulate(graph, gmap, a, g.mul(&out.square())?.neg())?,
        Op::Sqrt(a) => accumulate(graph, gmap, a, g.mul(&out.recip().scale(0.5))?)?,
        Op::Square(a) => accumulate(graph, gmap, a, g.mul(&var(a))?.scale(2.0))?,
        Op::Sigmoid(a) => {
            let ones = graph.constant(Tensor::ones(&out.shape()));
            let d = out.mul(&ones.sub(&out)?)?;
            accumulate(graph, gmap, a, g.mul(&d)?)?;
        }
        Op::Softplus(a) => accumulate(graph, gmap, a, g.mul(&var(a).sigmoid())?)?,
        Op::Relu(a) => {
            let mask = var(a).with_value(|t| t.map(|x| if x > 0.0 { 1.0 } else { 0.0 }));
            accumulate(graph, gmap, a, g.mul(&graph.constant(mask))?)?;
        }
        Op::LeakyRelu(a, slope) => {
            let mask = var(a).with_value(|t| t.map(|x| if x > 0.0 { 1.0 } else { slope }));
            accumulate(graph, gmap, a, g.mul(&graph.constant(mask))?)?;
        }
        Op::L2NormSq(a) => {
            let shape = var(a).shape();
            let gb = g.broadcast_to(&shape)?;
            accumulate(graph, gmap, a, gb.mul(&var(a))?.scale(2.0))?;
        }
        Op::Concat(ref ids, axis) => {
            let mut start = 0usize;
            for &aid in ids {
                let len = var(aid).shape()[axis];
                accumulate(graph, gmap, aid, g.slice_axis(axis, start, len)?)?;
                start += len;
            }
        }
        Op::SliceAxis {
            input,
            axis,
            start,
            len,
        } => {
            let dim = var(input).shape()[axis];
            accumulate(
                graph,
                gmap,
                input,
                g.pad_zeros(axis, start, dim - start - len)?,
            )?;
        }
        Op::PadZeros {
            input,
            axis,
            before,
        } => {
            let dim = var(input).shape()[axis];
            accumulate(graph, gmap, input, g.slice_axis(axis, before, dim)?)?;
        }
        Op::IndicatorSte { c, lam, clip } => {
            let (dc, dl) = match clip {
                None => (g.neg(), g.clone()),
                Some(r) => {
                    let mask = var(c).with_value(|cv| {
                        var(lam).with_value(|lv| {
                            cv.zip_map(lv, "ste_clip", |x, l| {
                                if (x - l).abs() <= r {
                                    1.0
                                } else {
                                    0.0
                                }
                            })
                        })
                    })?;
                    let m = graph.constant(mask);
                    (g.mul(&m)?.neg(), g.mul(&m)?)
                }
            };
            accumulate(graph, gmap, c, dc)?;
            accumulate(graph, gmap, lam, dl)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(graph: &Graph, values: &[f64]) -> Var {
        graph.leaf(Tensor::vector(values), true)
    }

    #[test]
    fn relu_and_leaky_relu_values() {
        let g = Graph::new();
        let x = leaf(&g, &[-2.0]);
        assert_eq!(x.relu().value().data(), &[0.0]);
        assert_eq!(x.leaky_relu(0.2).value().data(), &[-0.4]);
    }

    #[test]
    fn matmul_example() {
        let g = Graph::new();
        let a = g.leaf(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap(), true);
        let b = g.leaf(Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap(), true);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.value().data(), &[3.0, 7.0]);
    }

    #[test]
    fn square_gradient() {
        let g = Graph::new();
        let x = leaf(&g, &[3.0]);
        let y = x.square().sum();
        let gx = grad(&y, &[&x], false).unwrap();
        assert_eq!(gx[0].value().data(), &[6.0]);
    }

    #[test]
    fn double_backprop_cubed() {
        // g(x) = x^3, h(x) = (g'(x))^2 = 9x^4, h'(x) = 36x^3; at x=1 -> 36.
        let g = Graph::new();
        let x = leaf(&g, &[1.0]);
        let y = x.mul(&x).unwrap().mul(&x).unwrap().sum();
        let dy = grad(&y, &[&x], true).unwrap();
        let h = dy[0].square().sum();
        let dh = grad(&h, &[&x], false).unwrap();
        assert!((dh[0].value().data()[0] - 36.0).abs() < 1e-10);
    }

    #[test]
    fn grad_of_unrelated_input_is_zero() {
        let g = Graph::new();
        let x = leaf(&g, &[2.0]);
        let y = g.leaf(Tensor::vector(&[1.0, 5.0, 7.0]), true);
        let out = x.square().sum();
        let gy = grad(&out, &[&y], false).unwrap();
        assert_eq!(gy[0].value().shape(), &[3]);
        assert_eq!(gy[0].value().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let g = Graph::new();
        let x = leaf(&g, &[3.0]);
        let d = x.detach();
        assert_eq!(d.value().data(), &[3.0]);
        let y = d.square().sum();
        // y does not require grad at all, so gradients are zero.
        let gx = grad(&y, &[&x], false).unwrap();
        assert_eq!(gx[0].value().data(), &[0.0]);
    }

    #[test]
    fn create_graph_false_matches_true_bitwise() {
        let build = |create: bool| -> Vec<f64> {
            let g = Graph::new();
            let x = g.leaf(Tensor::vector(&[0.3, -1.2, 0.7]), true);
            let y = x.exp().mul(&x.sigmoid()).unwrap().sum();
            let gx = grad(&y, &[&x], create).unwrap();
            gx[0].value().data().to_vec()
        };
        let a = build(false);
        let b = build(true);
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn non_scalar_output_rejected() {
        let g = Graph::new();
        let x = leaf(&g, &[1.0, 2.0]);
        let y = x.square();
        assert!(matches!(grad(&y, &[&x], false), Err(Error::NotScalar(_))));
    }

    #[test]
    fn indicator_forward_and_backward() {
        let g = Graph::new();
        let c = leaf(&g, &[0.5, 2.0]);
        let lam = leaf(&g, &[1.0, 1.0]);
        let ind = indicator_ste(&c, &lam, None).unwrap();
        assert_eq!(ind.value().data(), &[1.0, 0.0]);
        let s = ind.sum();
        let gs = grad(&s, &[&c, &lam], false).unwrap();
        assert_eq!(gs[0].value().data(), &[-1.0, -1.0]);
        assert_eq!(gs[1].value().data(), &[1.0, 1.0]);
    }

    #[test]
    fn indicator_broadcasts_to_grid() {
        let g = Graph::new();
        let c = g.leaf(Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap(), true);
        let lam = g.constant(Tensor::matrix(2, 1, vec![1.5, 2.5]).unwrap());
        let ind = indicator_ste(&c, &lam, None).unwrap();
        assert_eq!(ind.value().shape(), &[2, 3]);
        assert_eq!(ind.value().data(), &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0]);
        // Gradient sums back over the lambda axis.
        let s = ind.sum();
        let gc = grad(&s, &[&c], false).unwrap();
        assert_eq!(gc[0].value().data(), &[-2.0, -2.0, -2.0]);
    }

    #[test]
    fn indicator_clip_masks_far_pairs() {
        let g = Graph::new();
        let c = leaf(&g, &[0.5, 5.0]);
        let lam = g.constant(Tensor::vector(&[1.0, 1.0]));
        let ind = indicator_ste(&c, &lam, Some(1.0)).unwrap();
        let s = ind.sum();
        let gc = grad(&s, &[&c], false).unwrap();
        assert_eq!(gc[0].value().data(), &[-1.0, 0.0]);
    }

    #[test]
    fn concat_and_slice_gradients() {
        let g = Graph::new();
        let a = leaf(&g, &[1.0, 2.0]);
        let b = leaf(&g, &[3.0]);
        let c = concat(&[&a, &b], 0).unwrap();
        assert_eq!(c.value().data(), &[1.0, 2.0, 3.0]);
        // Weighted sum so each slot has a distinct gradient.
        let w = g.constant(Tensor::vector(&[10.0, 20.0, 30.0]));
        let y = c.mul(&w).unwrap().sum();
        let gs = grad(&y, &[&a, &b], false).unwrap();
        assert_eq!(gs[0].value().data(), &[10.0, 20.0]);
        assert_eq!(gs[1].value().data(), &[30.0]);
    }

    /// Central finite differences of a scalar-valued function of flat inputs.
    pub(crate) fn finite_diff(
        f: &mut dyn FnMut(&[f64]) -> f64,
        x: &[f64],
        h: f64,
    ) -> Vec<f64> {
        let mut out = Vec::with_capacity(x.len());
        let mut xp = x.to_vec();
        for i in 0..x.len() {
            let orig = xp[i];
            xp[i] = orig + h;
            let fp = f(&xp);
            xp[i] = orig - h;
            let fm = f(&xp);
            xp[i] = orig;
            out.push((fp - fm) / (2.0 * h));
        }
        out
    }

    fn rel_close(a: f64, b: f64, rtol: f64, atol: f64) -> bool {
        (a - b).abs() <= atol + rtol * a.abs().max(b.abs())
    }

    /// Composite smooth function used for gradient checking:
    /// y = mean(sigmoid(x W) * exp(-square(x W))) + l2_norm_sq(x) / n.
    fn smooth_composite(graph: &Graph, x: &Var, w: &Var) -> Var {
        let h = x.matmul(w).unwrap();
        let s = h.sigmoid();
        let e = h.square().neg().exp();
        let m = s.mul(&e).unwrap().mean();
        let reg = x.l2_norm_sq().scale(1.0 / x.value().numel() as f64);
        let _ = graph;
        m.add(&reg).unwrap()
    }

    #[test]
    fn gradients_match_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let xv: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
            let wv: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();

            let g = Graph::new();
            let x = g.leaf(Tensor::matrix(2, 3, xv.clone()).unwrap(), true);
            let w = g.leaf(Tensor::matrix(3, 2, wv.clone()).unwrap(), true);
            let y = smooth_composite(&g, &x, &w);
            let grads = grad(&y, &[&x, &w], false).unwrap();

            let mut f_x = |xs: &[f64]| {
                let g = Graph::new();
                let x = g.leaf(Tensor::matrix(2, 3, xs.to_vec()).unwrap(), false);
                let w = g.leaf(Tensor::matrix(3, 2, wv.clone()).unwrap(), false);
                smooth_composite(&g, &x, &w).scalar().unwrap()
            };
            let fd_x = finite_diff(&mut f_x, &xv, 1e-5);
            for (a, b) in grads[0].value().data().iter().zip(&fd_x) {
                assert!(rel_close(*a, *b, 1e-4, 1e-8), "x grad {a} vs fd {b}");
            }

            let mut f_w = |ws: &[f64]| {
                let g = Graph::new();
                let x = g.leaf(Tensor::matrix(2, 3, xv.clone()).unwrap(), false);
                let w = g.leaf(Tensor::matrix(3, 2, ws.to_vec()).unwrap(), false);
                smooth_composite(&g, &x, &w).scalar().unwrap()
            };
            let fd_w = finite_diff(&mut f_w, &wv, 1e-5);
            for (a, b) in grads[1].value().data().iter().zip(&fd_w) {
                assert!(rel_close(*a, *b, 1e-4, 1e-8), "w grad {a} vs fd {b}");
            }
        }
    }

    #[test]
    fn second_order_matches_finite_differences_of_grad_norm() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        // phi(w) = || d/dx mean(sigmoid(x W)) ||^2, checked against central
        // finite differences of phi itself.
        let xv: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let wv: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();

        let phi = |ws: &[f64], create: bool| -> (f64, Option<Vec<f64>>) {
            let g = Graph::new();
            let x = g.leaf(Tensor::matrix(2, 2, xv.clone()).unwrap(), true);
            let w = g.leaf(Tensor::matrix(2, 2, ws.to_vec()).unwrap(), true);
            let y = x.matmul(&w).unwrap().sigmoid().mean();
            let gx = grad(&y, &[&x], true).unwrap();
            let norm = gx[0].l2_norm_sq();
            let value = norm.scalar().unwrap();
            if create {
                let gw = grad(&norm, &[&w], false).unwrap();
                (value, Some(gw[0].value().data().to_vec()))
            } else {
                (value, None)
            }
        };

        let (_, gw) = phi(&wv, true);
        let gw = gw.unwrap();
        let mut f = |ws: &[f64]| phi(ws, false).0;
        let fd = finite_diff(&mut f, &wv, 1e-5);
        for (a, b) in gw.iter().zip(&fd) {
            assert!(rel_close(*a, *b, 1e-3, 1e-9), "double backprop {a} vs fd {b}");
        }
    }
}
