//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Every operation records its parents and a backward rule on the result
//! node; [`Tensor::backward`] walks the graph once in reverse topological
//! order and accumulates gradients. Gradients are *additive* across
//! repeated backward calls on the same graph: callers that want fresh
//! gradients must zero them first (see [`Tensor::zero_grad`]).
//!
//! Broadcasting is intentionally limited to the two cases the layers use:
//! a scalar right-hand side, and a right-hand side whose shape equals a
//! trailing suffix of the left-hand shape.
//!
//! Tensors participating in a live graph are never mutated in place;
//! optimizers write through [`Tensor::set_data`] between passes, after the
//! graph of the previous step has been dropped.

use std::cell::{Ref, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};

/// Backward rule: receives the node's upstream gradient and returns one
/// gradient buffer per parent, in parent order.
pub(crate) type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Vec<f64>>>;

struct Node {
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

/// A node in the autodiff graph. Cloning is cheap (shared handle).
#[derive(Clone)]
pub struct Tensor {
    node: Rc<Node>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("data", &self.node.data.borrow())
            .finish()
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// A leaf tensor (no parents, no backward rule).
    pub fn leaf(data: Vec<f64>, shape: Vec<usize>) -> Tensor {
        assert_eq!(
            data.len(),
            numel(&shape),
            "data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor {
            node: Rc::new(Node {
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                parents: Vec::new(),
                backward: None,
            }),
        }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::leaf(vec![v], vec![])
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n = numel(&shape);
        Tensor::leaf(vec![0.0; n], shape)
    }

    pub(crate) fn from_op(
        data: Vec<f64>,
        shape: Vec<usize>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        assert_eq!(data.len(), numel(&shape));
        Tensor {
            node: Rc::new(Node {
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                parents,
                backward: Some(backward),
            }),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn numel(&self) -> usize {
        numel(&self.node.shape)
    }

    /// Borrow the value buffer (row-major).
    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.node.data.borrow()
    }

    /// Copy of the value buffer.
    pub fn to_vec(&self) -> Vec<f64> {
        self.node.data.borrow().clone()
    }

    pub fn item(&self) -> f64 {
        let d = self.node.data.borrow();
        assert_eq!(d.len(), 1, "item() on non-scalar tensor");
        d[0]
    }

    /// Overwrite the value buffer. Only meaningful for leaves between
    /// forward passes (optimizer updates).
    pub fn set_data(&self, values: &[f64]) {
        let mut d = self.node.data.borrow_mut();
        assert_eq!(d.len(), values.len());
        d.copy_from_slice(values);
    }

    /// Apply an in-place update to the raw value buffer.
    pub fn update_data(&self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.node.data.borrow_mut());
    }

    /// Accumulated gradient, if any backward pass has reached this node.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    fn ptr(&self) -> *const Node {
        Rc::as_ptr(&self.node)
    }

    /// Reverse-mode pass from a scalar loss. Seeds the loss gradient with
    /// 1.0, visits each reachable node exactly once in reverse topological
    /// order and adds this pass's gradient into every node's accumulator.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: self.node.shape.clone(),
            });
        }

        // Iterative post-order DFS; reversed, it yields consumers before
        // producers.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashMap<*const Node, ()> = HashMap::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.ptr(), ());
        while let Some((t, child)) = stack.pop() {
            if child < t.node.parents.len() {
                let next = t.node.parents[child].clone();
                stack.push((t, child + 1));
                if !visited.contains_key(&next.ptr()) {
                    visited.insert(next.ptr(), ());
                    stack.push((next, 0));
                }
            } else {
                order.push(t);
            }
        }

        let mut pass: HashMap<*const Node, Vec<f64>> = HashMap::new();
        pass.insert(self.ptr(), vec![1.0]);

        for t in order.iter().rev() {
            let upstream = match pass.get(&t.ptr()) {
                Some(g) => g.clone(),
                None => continue,
            };
            if let Some(back) = &t.node.backward {
                let contribs = back(&upstream);
                assert_eq!(
                    contribs.len(),
                    t.node.parents.len(),
                    "backward rule returned wrong number of parent gradients"
                );
                for (parent, c) in t.node.parents.iter().zip(contribs) {
                    assert_eq!(c.len(), parent.numel());
                    let entry = pass
                        .entry(parent.ptr())
                        .or_insert_with(|| vec![0.0; parent.numel()]);
                    for (e, v) in entry.iter_mut().zip(&c) {
                        *e += v;
                    }
                }
            }
        }

        for t in &order {
            if let Some(g) = pass.get(&t.ptr()) {
                let mut slot = t.node.grad.borrow_mut();
                match slot.as_mut() {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(g) {
                            *a += v;
                        }
                    }
                    None => *slot = Some(g.clone()),
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Broadcasting
// ---------------------------------------------------------------------------

/// How the right-hand operand maps onto the left-hand shape.
enum Broadcast {
    Same,
    Scalar,
    /// rhs shape equals a trailing suffix of lhs; rhs index = i % rhs_len.
    Trailing { rhs_len: usize },
}

fn broadcast_kind(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<Broadcast> {
    if lhs == rhs {
        return Ok(Broadcast::Same);
    }
    if numel(rhs) == 1 {
        return Ok(Broadcast::Scalar);
    }
    if rhs.len() < lhs.len() && lhs[lhs.len() - rhs.len()..] == *rhs {
        return Ok(Broadcast::Trailing {
            rhs_len: numel(rhs),
        });
    }
    Err(Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    })
}

/// Reduce a gradient over the lhs shape down to the rhs shape.
fn fold_to_rhs(grad: &[f64], kind: &Broadcast, rhs_numel: usize) -> Vec<f64> {
    match kind {
        Broadcast::Same => grad.to_vec(),
        Broadcast::Scalar => vec![grad.iter().sum()],
        Broadcast::Trailing { rhs_len } => {
            let mut out = vec![0.0; *rhs_len];
            for (i, g) in grad.iter().enumerate() {
                out[i % rhs_len] += g;
            }
            debug_assert_eq!(out.len(), rhs_numel);
            out
        }
    }
}

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

macro_rules! binary_op {
    ($name:ident, $opname:literal, $fwd:expr, $dlhs:expr, $drhs:expr) => {
        pub fn $name(&self, rhs: &Tensor) -> Result<Tensor> {
            let kind = broadcast_kind($opname, self.shape(), rhs.shape())?;
            let a = self.data();
            let b = rhs.data();
            let fwd: fn(f64, f64) -> f64 = $fwd;
            let out: Vec<f64> = match &kind {
                Broadcast::Same => a.iter().zip(b.iter()).map(|(&x, &y)| fwd(x, y)).collect(),
                Broadcast::Scalar => a.iter().map(|&x| fwd(x, b[0])).collect(),
                Broadcast::Trailing { rhs_len } => a
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| fwd(x, b[i % rhs_len]))
                    .collect(),
            };
            drop(a);
            drop(b);
            let shape = self.shape().to_vec();
            let lhs_c = self.clone();
            let rhs_c = rhs.clone();
            let rhs_numel = rhs.numel();
            Ok(Tensor::from_op(
                out,
                shape,
                vec![self.clone(), rhs.clone()],
                Box::new(move |up| {
                    let a = lhs_c.data();
                    let b = rhs_c.data();
                    let dl: fn(f64, f64) -> f64 = $dlhs;
                    let dr: fn(f64, f64) -> f64 = $drhs;
                    let rb = |i: usize| match &kind {
                        Broadcast::Same => b[i],
                        Broadcast::Scalar => b[0],
                        Broadcast::Trailing { rhs_len } => b[i % rhs_len],
                    };
                    let glhs: Vec<f64> = up
                        .iter()
                        .enumerate()
                        .map(|(i, &g)| g * dl(a[i], rb(i)))
                        .collect();
                    let grhs_full: Vec<f64> = up
                        .iter()
                        .enumerate()
                        .map(|(i, &g)| g * dr(a[i], rb(i)))
                        .collect();
                    vec![glhs, fold_to_rhs(&grhs_full, &kind, rhs_numel)]
                }),
            ))
        }
    };
}

macro_rules! unary_op {
    ($name:ident, $fwd:expr, $dfn:expr) => {
        pub fn $name(&self) -> Tensor {
            let fwd: fn(f64) -> f64 = $fwd;
            let out: Vec<f64> = self.data().iter().map(|&x| fwd(x)).collect();
            let shape = self.shape().to_vec();
            let src = self.clone();
            Tensor::from_op(
                out,
                shape,
                vec![self.clone()],
                Box::new(move |up| {
                    let a = src.data();
                    let d: fn(f64) -> f64 = $dfn;
                    vec![up
                        .iter()
                        .enumerate()
                        .map(|(i, &g)| g * d(a[i]))
                        .collect()]
                }),
            )
        }
    };
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tensor {
    binary_op!(add, "add", |a, b| a + b, |_a, _b| 1.0, |_a, _b| 1.0);
    binary_op!(sub, "sub", |a, b| a - b, |_a, _b| 1.0, |_a, _b| -1.0);
    binary_op!(mul, "mul", |a, b| a * b, |_a, b| b, |a, _b| a);
    binary_op!(div, "div", |a, b| a / b, |_a, b| 1.0 / b, |a, b| -a / (b * b));
    binary_op!(
        pow,
        "pow",
        |a, b| a.powf(b),
        |a, b| b * a.powf(b - 1.0),
        |a, b| a.powf(b) * a.ln()
    );

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.add(&Tensor::scalar(c)).expect("scalar broadcast")
    }
    pub fn sub_scalar(&self, c: f64) -> Tensor {
        self.sub(&Tensor::scalar(c)).expect("scalar broadcast")
    }
    pub fn mul_scalar(&self, c: f64) -> Tensor {
        self.mul(&Tensor::scalar(c)).expect("scalar broadcast")
    }
    pub fn div_scalar(&self, c: f64) -> Tensor {
        self.div(&Tensor::scalar(c)).expect("scalar broadcast")
    }
    pub fn pow_scalar(&self, c: f64) -> Tensor {
        self.pow(&Tensor::scalar(c)).expect("scalar broadcast")
    }

    unary_op!(exp, |x| x.exp(), |x| x.exp());
    unary_op!(ln, |x| x.ln(), |x| 1.0 / x);
    unary_op!(neg, |x| -x, |_x| -1.0);

    pub fn sigmoid(&self) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|&x| sigmoid(x)).collect();
        let shape = self.shape().to_vec();
        let out_c = out.clone();
        Tensor::from_op(
            out,
            shape,
            vec![self.clone()],
            Box::new(move |up| {
                vec![up
                    .iter()
                    .zip(&out_c)
                    .map(|(&g, &s)| g * s * (1.0 - s))
                    .collect()]
            }),
        )
    }

    /// Clamp floor: `max(x, c)` elementwise. Gradient passes where `x >= c`.
    pub fn max_scalar(&self, c: f64) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|&x| x.max(c)).collect();
        let shape = self.shape().to_vec();
        let src = self.clone();
        Tensor::from_op(
            out,
            shape,
            vec![self.clone()],
            Box::new(move |up| {
                let a = src.data();
                vec![up
                    .iter()
                    .enumerate()
                    .map(|(i, &g)| if a[i] >= c { g } else { 0.0 })
                    .collect()]
            }),
        )
    }

    /// Clamp ceiling: `min(x, c)` elementwise. Gradient passes where `x <= c`.
    pub fn min_scalar(&self, c: f64) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|&x| x.min(c)).collect();
        let shape = self.shape().to_vec();
        let src = self.clone();
        Tensor::from_op(
            out,
            shape,
            vec![self.clone()],
            Box::new(move |up| {
                let a = src.data();
                vec![up
                    .iter()
                    .enumerate()
                    .map(|(i, &g)| if a[i] <= c { g } else { 0.0 })
                    .collect()]
            }),
        )
    }

    /// Reinterpret the (row-major) buffer under a new shape.
    pub fn reshape(&self, new_shape: Vec<usize>) -> Result<Tensor> {
        if numel(&new_shape) != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: new_shape,
            });
        }
        Ok(Tensor::from_op(
            self.to_vec(),
            new_shape,
            vec![self.clone()],
            Box::new(move |up| vec![up.to_vec()]),
        ))
    }
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

fn axis_geometry(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

fn reduced_shape(shape: &[usize], axis: usize, keep_dims: bool) -> Vec<usize> {
    let mut s = shape.to_vec();
    if keep_dims {
        s[axis] = 1;
    } else {
        s.remove(axis);
    }
    s
}

impl Tensor {
    fn check_axis(&self, axis: usize) -> Result<()> {
        if axis >= self.shape().len() {
            return Err(Error::InvalidAxis {
                axis,
                shape: self.shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn sum_axis(&self, axis: usize, keep_dims: bool) -> Result<Tensor> {
        self.check_axis(axis)?;
        let shape = self.shape().to_vec();
        let (outer, len, inner) = axis_geometry(&shape, axis);
        let a = self.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let base = (o * len + j) * inner;
                for i in 0..inner {
                    out[o * inner + i] += a[base + i];
                }
            }
        }
        drop(a);
        Ok(Tensor::from_op(
            out,
            reduced_shape(&shape, axis, keep_dims),
            vec![self.clone()],
            Box::new(move |up| {
                let mut g = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for j in 0..len {
                        let base = (o * len + j) * inner;
                        for i in 0..inner {
                            g[base + i] = up[o * inner + i];
                        }
                    }
                }
                vec![g]
            }),
        ))
    }

    pub fn mean_axis(&self, axis: usize, keep_dims: bool) -> Result<Tensor> {
        let len = *self
            .shape()
            .get(axis)
            .ok_or_else(|| Error::InvalidAxis {
                axis,
                shape: self.shape().to_vec(),
            })? as f64;
        Ok(self.sum_axis(axis, keep_dims)?.div_scalar(len))
    }

    /// Max over an axis; ties route the gradient to the lowest index.
    pub fn max_axis(&self, axis: usize, keep_dims: bool) -> Result<Tensor> {
        self.check_axis(axis)?;
        let shape = self.shape().to_vec();
        let (outer, len, inner) = axis_geometry(&shape, axis);
        let a = self.data();
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let base = (o * len + j) * inner;
                for i in 0..inner {
                    let v = a[base + i];
                    let slot = o * inner + i;
                    if v > out[slot] {
                        out[slot] = v;
                        argmax[slot] = j;
                    }
                }
            }
        }
        drop(a);
        Ok(Tensor::from_op(
            out,
            reduced_shape(&shape, axis, keep_dims),
            vec![self.clone()],
            Box::new(move |up| {
                let mut g = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let slot = o * inner + i;
                        g[(o * len + argmax[slot]) * inner + i] = up[slot];
                    }
                }
                vec![g]
            }),
        ))
    }

    pub fn sum_all(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op(
            vec![s],
            vec![],
            vec![self.clone()],
            Box::new(move |up| vec![vec![up[0]; n]]),
        )
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel() as f64;
        self.sum_all().div_scalar(n)
    }
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub pass: bool,
}

/// Compare the analytic gradient of a scalar-valued function against
/// central finite differences with step `eps`.
///
/// The relative error per component is `|a - n| / max(|a|, |n|)`, falling
/// back to the absolute difference when both magnitudes are below 1e-6.
pub fn gradient_check<F>(f: F, x: &Tensor, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    assert!(eps > 0.0, "eps must be positive");
    let leaf = Tensor::leaf(x.to_vec(), x.shape().to_vec());
    let out = f(&leaf)?;
    if out.numel() != 1 {
        return Err(Error::NonScalarLoss {
            shape: out.shape().to_vec(),
        });
    }
    out.backward()?;
    let analytic = leaf
        .grad()
        .unwrap_or_else(|| vec![0.0; leaf.numel()]);

    let base = x.to_vec();
    let mut max_rel = 0.0f64;
    let mut worst = 0usize;
    let mut worst_pair = (0.0, 0.0);
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += eps;
        let mut minus = base.clone();
        minus[i] -= eps;
        let fp = f(&Tensor::leaf(plus, x.shape().to_vec()))?.item();
        let fm = f(&Tensor::leaf(minus, x.shape().to_vec()))?.item();
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs());
        let err = if denom < 1e-6 {
            (a - numeric).abs()
        } else {
            (a - numeric).abs() / denom
        };
        if err > max_rel {
            max_rel = err;
            worst = i;
            worst_pair = (a, numeric);
        }
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        worst_index: worst,
        analytic_at_worst: worst_pair.0,
        numeric_at_worst: worst_pair.1,
        pass: max_rel < tol,
    })
}
