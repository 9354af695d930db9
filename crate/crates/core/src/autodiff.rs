//! Tape-based reverse-mode automatic differentiation over rank-2 `f64`
//! tensors.
//!
//! Operations are recorded on a [`Tape`] in creation order, which is a
//! topological order by construction. [`Tape::backward`] walks the tape in
//! reverse with a fresh adjoint buffer and then adds the result into each
//! node's persistent `grad`, so repeated calls accumulate.
//!
//! The op set is deliberately small: exactly what the encoders and the
//! contrastive objective need. Scalars are `1 x 1` tensors. There is no
//! general broadcasting; the only shape relaxation is adding a `1 x n` row
//! (a bias) to every row of an `m x n` tensor.
//!
//! ```
//! use geoclap_core::autodiff::Tape;
//! use ndarray::array;
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(array![[1.0, -2.0, 3.0]]);
//! let y = tape.relu(x).unwrap();
//! let s = tape.sum(y).unwrap();
//! tape.backward(s).unwrap();
//! assert_eq!(tape.scalar(s), 4.0);
//! assert_eq!(tape.grad(x), &array![[1.0, 0.0, 1.0]]);
//! ```

use ndarray::{Array2, Axis, Zip};
use thiserror::Error;

pub type Tensor = Array2<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("backward root must be 1x1, got {0:?}")]
    NonScalarRoot((usize, usize)),
    #[error("non-finite value encountered: {0}")]
    NonFiniteValue(String),
    #[error("row {row} has zero norm and cannot be normalized")]
    ZeroNorm { row: usize },
    #[error("finite-difference step must be positive, got {0}")]
    InvalidStep(f64),
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf,
    Constant,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Relu(NodeId),
    Scale(NodeId, NodeId),
    Exp(NodeId),
    Transpose(NodeId),
    Sum(NodeId),
    RowL2Normalize(NodeId),
    RowLogSoftmax(NodeId),
    MeanDiagNegate(NodeId),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of a computation.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn shape(t: &Tensor) -> (usize, usize) {
    t.dim()
}

impl Tape {
    /// A tape that records backward rules.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// A tape that only evaluates forward values. Values are bit-identical
    /// to a recording tape; `backward` yields zero gradients everywhere.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        let (op, requires_grad) = if self.recording {
            (op, requires_grad)
        } else {
            (Op::Constant, false)
        };
        let grad = Tensor::zeros(value.raw_dim());
        self.nodes.push(Node {
            value,
            grad,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable input; its gradient stays zero.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Constant, false)
    }

    pub fn scalar_constant(&mut self, value: f64) -> NodeId {
        self.constant(Tensor::from_elem((1, 1), value))
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value[[0, 0]]
    }

    pub fn grad(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].grad
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad.fill(0.0);
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.nrows() {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                left: shape(va),
                right: shape(vb),
            });
        }
        let out = va.dot(vb);
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// Elementwise sum of equal shapes, or `m x n` plus a `1 x n` row added
    /// to every row.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let (va, vb) = (self.value(a), self.value(b));
        let rg = self.needs(&[a, b]);
        if va.dim() == vb.dim() {
            let out = va + vb;
            Ok(self.push(out, Op::Add(a, b), rg))
        } else if vb.nrows() == 1 && vb.ncols() == va.ncols() {
            let out = va + &vb.row(0);
            Ok(self.push(out, Op::AddRow(a, b), rg))
        } else {
            Err(AutodiffError::ShapeMismatch {
                op: "add",
                left: shape(va),
                right: shape(vb),
            })
        }
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let out = self.value(a).mapv(|x| if x > 0.0 { x } else { 0.0 });
        let rg = self.needs(&[a]);
        Ok(self.push(out, Op::Relu(a), rg))
    }

    /// Multiplies every entry of `a` by the `1 x 1` node `s`.
    pub fn scale(&mut self, a: NodeId, s: NodeId) -> Result<NodeId, AutodiffError> {
        let vs = self.value(s);
        if vs.dim() != (1, 1) {
            return Err(AutodiffError::ShapeMismatch {
                op: "scale",
                left: shape(self.value(a)),
                right: shape(vs),
            });
        }
        let k = vs[[0, 0]];
        let out = self.value(a) * k;
        let rg = self.needs(&[a, s]);
        Ok(self.push(out, Op::Scale(a, s), rg))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let out = self.value(a).mapv(f64::exp);
        let rg = self.needs(&[a]);
        Ok(self.push(out, Op::Exp(a), rg))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let out = self.value(a).t().to_owned();
        let rg = self.needs(&[a]);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let out = Tensor::from_elem((1, 1), self.value(a).sum());
        let rg = self.needs(&[a]);
        Ok(self.push(out, Op::Sum(a), rg))
    }

    /// Scales each row to unit Euclidean norm.
    pub fn row_l2_normalize(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let mut out = self.value(a).clone();
        for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
            let norm = row.dot(&row).sqrt();
            if norm < crate::embedding::ZERO_NORM_EPS {
                return Err(AutodiffError::ZeroNorm { row: i });
            }
            row.mapv_inplace(|x| x / norm);
        }
        let rg = self.needs(&[a]);
        Ok(self.push(out, Op::RowL2Normalize(a), rg))
    }

    /// Row-wise `x - log(sum(exp(x)))`, computed with max subtraction.
    pub fn row_log_softmax(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let mut out = self.value(a).clone();
        for mut row in out.axis_iter_mut(Axis(0)) {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            row.mapv_inplace(|x| x - lse);
        }
        let rg = self.needs(&[a]);
        Ok(self.push(out, Op::RowLogSoftmax(a), rg))
    }

    /// `-(1/N) * sum_k a[k][k]` for a square `N x N` input.
    pub fn mean_diag_negate(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let va = self.value(a);
        if va.nrows() != va.ncols() || va.nrows() == 0 {
            return Err(AutodiffError::ShapeMismatch {
                op: "mean_diag_negate",
                left: shape(va),
                right: (va.ncols(), va.nrows()),
            });
        }
        let n = va.nrows() as f64;
        let out = Tensor::from_elem((1, 1), -va.diag().sum() / n);
        let rg = self.needs(&[a]);
        Ok(self.push(out, Op::MeanDiagNegate(a), rg))
    }

    /// Propagates `d root / d node` into every node's gradient accumulator.
    pub fn backward(&mut self, root: NodeId) -> Result<(), AutodiffError> {
        let rs = shape(self.value(root));
        if rs != (1, 1) {
            return Err(AutodiffError::NonScalarRoot(rs));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        adj[root.0] = Some(Tensor::ones((1, 1)));

        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.nodes[i].grad += &g;
            let op = self.nodes[i].op;
            let send = |adj: &mut Vec<Option<Tensor>>, to: NodeId, d: Tensor| {
                if !self.nodes[to.0].requires_grad {
                    return;
                }
                match &mut adj[to.0] {
                    Some(acc) => *acc += &d,
                    slot @ None => *slot = Some(d),
                }
            };
            match op {
                Op::Leaf | Op::Constant => {}
                Op::MatMul(a, b) => {
                    let da = g.dot(&self.nodes[b.0].value.t());
                    let db = self.nodes[a.0].value.t().dot(&g);
                    send(&mut adj, a, da);
                    send(&mut adj, b, db);
                }
                Op::Add(a, b) => {
                    send(&mut adj, a, g.clone());
                    send(&mut adj, b, g);
                }
                Op::AddRow(a, b) => {
                    let db = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    send(&mut adj, a, g);
                    send(&mut adj, b, db);
                }
                Op::Relu(a) => {
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(&self.nodes[a.0].value)
                        .for_each(|d, &x| {
                            if x <= 0.0 {
                                *d = 0.0;
                            }
                        });
                    send(&mut adj, a, d);
                }
                Op::Scale(a, s) => {
                    let k = self.nodes[s.0].value[[0, 0]];
                    let ds = (&g * &self.nodes[a.0].value).sum();
                    send(&mut adj, a, &g * k);
                    send(&mut adj, s, Tensor::from_elem((1, 1), ds));
                }
                Op::Exp(a) => {
                    let d = &g * &self.nodes[i].value;
                    send(&mut adj, a, d);
                }
                Op::Transpose(a) => {
                    send(&mut adj, a, g.t().to_owned());
                }
                Op::Sum(a) => {
                    let d = Tensor::from_elem(self.nodes[a.0].value.raw_dim(), g[[0, 0]]);
                    send(&mut adj, a, d);
                }
                Op::RowL2Normalize(a) => {
                    let x = &self.nodes[a.0].value;
                    let y = &self.nodes[i].value;
                    let mut d = g;
                    for ((mut drow, xrow), yrow) in d
                        .axis_iter_mut(Axis(0))
                        .zip(x.axis_iter(Axis(0)))
                        .zip(y.axis_iter(Axis(0)))
                    {
                        let norm = xrow.dot(&xrow).sqrt();
                        let proj = yrow.dot(&drow);
                        Zip::from(&mut drow)
                            .and(&yrow)
                            .for_each(|dv, &yv| *dv = (*dv - yv * proj) / norm);
                    }
                    send(&mut adj, a, d);
                }
                Op::RowLogSoftmax(a) => {
                    let y = &self.nodes[i].value;
                    let mut d = g;
                    for (mut drow, yrow) in d.axis_iter_mut(Axis(0)).zip(y.axis_iter(Axis(0))) {
                        let total = drow.sum();
                        Zip::from(&mut drow)
                            .and(&yrow)
                            .for_each(|dv, &yv| *dv -= yv.exp() * total);
                    }
                    send(&mut adj, a, d);
                }
                Op::MeanDiagNegate(a) => {
                    let n = self.nodes[a.0].value.nrows();
                    let mut d = Tensor::zeros((n, n));
                    let v = -g[[0, 0]] / n as f64;
                    d.diag_mut().fill(v);
                    send(&mut adj, a, d);
                }
            }
        }
        Ok(())
    }
}

/// Outcome of [`finite_difference_check`].
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(|analytic|, |numeric|, floor)` over all
    /// coordinates, where `floor = 100 * eps * max(1, |f|) / h` is the
    /// round-off resolution of the central difference.
    pub max_rel_error: f64,
    /// `(parameter index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
}

const FD_ULPS: f64 = 100.0;

/// Compares tape gradients of `f` against central differences with step `h`.
///
/// `f` receives a fresh tape and one leaf per entry of `params` and must
/// return a `1 x 1` node.
pub fn finite_difference_check<F>(
    f: F,
    params: &[Tensor],
    h: f64,
) -> Result<GradCheckReport, AutodiffError>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId, AutodiffError>,
{
    if !(h > 0.0) {
        return Err(AutodiffError::InvalidStep(h));
    }
    let mut tape = Tape::new();
    let leaves: Vec<NodeId> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let root = f(&mut tape, &leaves)?;
    let base = tape.scalar(root);
    if !base.is_finite() {
        return Err(AutodiffError::NonFiniteValue(format!("f(x) = {base}")));
    }
    tape.backward(root)?;
    let analytic: Vec<Tensor> = leaves.iter().map(|&l| tape.grad(l).clone()).collect();

    let eval = |ps: &[Tensor]| -> Result<f64, AutodiffError> {
        let mut t = Tape::inference();
        let ls: Vec<NodeId> = ps.iter().map(|p| t.leaf(p.clone())).collect();
        let r = f(&mut t, &ls)?;
        let v = t.scalar(r);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(AutodiffError::NonFiniteValue(format!("f = {v}")))
        }
    };

    // Smallest derivative a central difference can resolve at this `h`:
    // round-off in f is a few ulps of |f|, divided by 2h.
    let floor = (FD_ULPS * f64::EPSILON * base.abs().max(1.0) / h).max(1e-12);
    let mut work: Vec<Tensor> = params.to_vec();
    let mut numeric = Vec::with_capacity(params.len());
    let mut max_rel_error = 0.0;
    let mut worst = None;
    for p in 0..params.len() {
        let mut num = Tensor::zeros(params[p].raw_dim());
        let n = params[p].len();
        for c in 0..n {
            let cols = params[p].ncols();
            let idx = [c / cols, c % cols];
            let orig = params[p][idx];
            work[p][idx] = orig + h;
            let up = eval(&work)?;
            work[p][idx] = orig - h;
            let down = eval(&work)?;
            work[p][idx] = orig;
            let d = (up - down) / (2.0 * h);
            num[idx] = d;
            let a = analytic[p][idx];
            let rel = (a - d).abs() / d.abs().max(a.abs()).max(floor);
            if worst.is_none() || rel > max_rel_error {
                max_rel_error = rel;
                worst = Some((p, c));
            }
        }
        numeric.push(num);
    }
    Ok(GradCheckReport {
        max_rel_error,
        worst,
        analytic,
        numeric,
    })
}
