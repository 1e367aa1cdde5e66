//! Operation tape for reverse-mode differentiation.
//!
//! Every operation appends one node holding its output value and the ids of
//! its inputs. Node ids grow monotonically, so walking the tape from the loss
//! back to id 0 visits every node after all of its consumers.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::error::{Error, Result};

use super::broadcast::{broadcast_shape, reduce_into, zip_map, Layout};
use super::gemm::gemm;
use super::tensor::{numel, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UnaryOp {
    Exp,
    Log,
    Square,
    Sqrt,
    Softplus,
    Gelu,
    Clamp { lo: f64, hi: f64 },
    Negate,
    Scale(f64),
    Offset(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

#[derive(Debug)]
struct MatPlan {
    m: usize,
    k: usize,
    n: usize,
    /// (a offset, b offset) per output batch; a single entry when flattened.
    batches: Vec<(usize, usize)>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        plan: MatPlan,
    },
    Softmax {
        x: Var,
        bias: Option<Var>,
    },
    LogSoftmax {
        x: Var,
    },
    Unary {
        x: Var,
        op: UnaryOp,
    },
    Binary {
        a: Var,
        b: Var,
        op: BinaryOp,
    },
    Reduce {
        x: Var,
        op: ReduceOp,
        axis: Option<usize>,
        argmax: Vec<usize>,
    },
    Reshape {
        x: Var,
    },
    Permute {
        x: Var,
        src: Vec<usize>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
    /// Accumulated gradient; only leaves that require grad keep one.
    grad: Option<Vec<f64>>,
}

/// Single-threaded record of executed operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

// `y` is gelu(x); away from zero the normal cdf is recovered as y / x,
// which avoids a second erf evaluation
fn gelu_grad(x: f64, y: f64) -> f64 {
    let cdf = if x.abs() > 1e-3 {
        y / x
    } else {
        0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
    };
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    cdf + x * pdf
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records `t` as a leaf; it is differentiable iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let requires_grad = t.requires_grad();
        let shape = t.shape().to_vec();
        let grad = requires_grad.then(|| vec![0.0; t.numel()]);
        let id = self.push(shape, t.into_data(), Op::Leaf, requires_grad);
        self.nodes[id.0].grad = grad;
        id
    }

    pub fn variable(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        Ok(self.leaf(Tensor::new(shape.to_vec(), data)?.requiring_grad()))
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        Ok(self.leaf(Tensor::new(shape.to_vec(), data)?))
    }

    pub fn scalar_constant(&mut self, value: f64) -> Var {
        self.leaf(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// First element of `v`'s value; intended for scalars.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    /// Accumulated gradient of a differentiable leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Value and accumulated gradient of `v` as a standalone tensor.
    pub fn to_tensor(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        let mut t = Tensor::new(node.shape.clone(), node.value.clone()).expect("node shapes are validated on creation");
        t.set_requires_grad(node.requires_grad);
        if let Some(g) = &node.grad {
            t.accumulate_grad(g);
        }
        t
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = &mut node.grad {
                g.iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }

    // ---------------------------------------------------------------- matmul

    /// Batched matrix product `[..., m, k] x [..., k, n] -> [..., m, n]` with
    /// broadcast batch dimensions.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::dim(
                "matmul",
                format!("operands need rank >= 2, got {sa:?} and {sb:?}"),
            ));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("inner dimensions differ: {sa:?} x {sb:?}"),
            ));
        }
        let a_batch = &sa[..sa.len() - 2];
        let b_batch = &sb[..sb.len() - 2];
        let out_batch = broadcast_shape("matmul", a_batch, b_batch)
            .map_err(|_| Error::dim("matmul", format!("batch dims not broadcastable: {sa:?} x {sb:?}")))?;
        let nb = numel(&out_batch);
        let plan = if numel(b_batch) == 1 && numel(a_batch) == nb {
            // fold a's batch into its rows: one large product
            MatPlan {
                m: m * nb,
                k,
                n,
                batches: vec![(0, 0)],
            }
        } else {
            let la = Layout::new(a_batch, &out_batch);
            let lb = Layout::new(b_batch, &out_batch);
            MatPlan {
                m,
                k,
                n,
                batches: (0..nb).map(|i| (la.get(i) * m * k, lb.get(i) * k * n)).collect(),
            }
        };
        let mut out = vec![0.0; nb * m * n];
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let step = plan.m * plan.n;
        for (i, &(ao, bo)) in plan.batches.iter().enumerate() {
            gemm(
                plan.m,
                plan.k,
                plan.n,
                &av[ao..],
                false,
                &bv[bo..],
                false,
                &mut out[i * step..(i + 1) * step],
                0.0,
            );
        }
        let mut shape = out_batch;
        shape.extend([m, n]);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, Op::MatMul { a, b, plan }, rg))
    }

    // --------------------------------------------------------------- softmax

    /// Softmax over the last dimension of `x + bias`.
    ///
    /// `bias` must broadcast to `x` and may hold `-inf`; masked positions get
    /// exactly zero weight and a row with no finite entry is all zeros.
    pub fn softmax_lastdim(&mut self, x: Var, bias: Option<Var>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let Some(&cols) = shape.last() else {
            return Err(Error::dim("softmax", "input must have rank >= 1"));
        };
        let layout = match bias {
            Some(b) => {
                let sb = self.shape(b);
                let out = broadcast_shape("softmax", &shape, sb)?;
                if out != shape {
                    return Err(Error::dim(
                        "softmax",
                        format!("bias {sb:?} does not broadcast to input {shape:?}"),
                    ));
                }
                Some(Layout::new(sb, &shape))
            }
            None => None,
        };
        let xv = &self.nodes[x.0].value;
        if let Some(i) = xv.iter().position(|v| v.is_nan()) {
            return Err(Error::numeric("softmax", i, "NaN input"));
        }
        let bv: &[f64] = bias.map_or(&[], |b| &self.nodes[b.0].value);
        let mut out = vec![0.0; xv.len()];
        for (r, row) in out.chunks_mut(cols).enumerate() {
            let base = r * cols;
            let mut max = f64::NEG_INFINITY;
            for (j, z) in row.iter_mut().enumerate() {
                let i = base + j;
                let b = layout.as_ref().map_or(0.0, |l| bv[l.get(i)]);
                *z = xv[i] + b;
                if z.is_nan() || *z == f64::INFINITY {
                    return Err(Error::numeric("softmax", i, format!("bias produced {z}")));
                }
                if *z > max {
                    max = *z;
                }
            }
            if max == f64::NEG_INFINITY {
                row.iter_mut().for_each(|z| *z = 0.0);
                continue;
            }
            let mut sum = 0.0;
            for z in row.iter_mut() {
                *z = (*z - max).exp();
                sum += *z;
            }
            for z in row.iter_mut() {
                *z /= sum;
            }
        }
        let rg = self.rg(x) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(shape, out, Op::Softmax { x, bias }, rg))
    }

    /// `x - logsumexp(x)` over the last dimension.
    pub fn log_softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let Some(&cols) = shape.last() else {
            return Err(Error::dim("log_softmax", "input must have rank >= 1"));
        };
        let xv = &self.nodes[x.0].value;
        if let Some(i) = xv.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric("log_softmax", i, "non-finite input"));
        }
        let mut out = vec![0.0; xv.len()];
        for (row_in, row_out) in xv.chunks(cols).zip(out.chunks_mut(cols)) {
            let max = row_in.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row_in.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (o, v) in row_out.iter_mut().zip(row_in) {
                *o = v - lse;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::LogSoftmax { x }, rg))
    }

    // ----------------------------------------------------------- elementwise

    pub fn unary(&mut self, x: Var, op: UnaryOp) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let out: Vec<f64> = match op {
            UnaryOp::Exp => xv.iter().map(|v| v.exp()).collect(),
            UnaryOp::Log => {
                if let Some(i) = xv.iter().position(|&v| v.is_nan() || v <= 0.0) {
                    return Err(Error::numeric("log", i, format!("log of {}", xv[i])));
                }
                xv.iter().map(|v| v.ln()).collect()
            }
            UnaryOp::Square => xv.iter().map(|v| v * v).collect(),
            UnaryOp::Sqrt => {
                if let Some(i) = xv.iter().position(|&v| v.is_nan() || v < 0.0) {
                    return Err(Error::numeric("sqrt", i, format!("sqrt of {}", xv[i])));
                }
                xv.iter().map(|v| v.sqrt()).collect()
            }
            UnaryOp::Softplus => xv.iter().map(|&v| softplus(v)).collect(),
            UnaryOp::Gelu => xv.iter().map(|&v| gelu(v)).collect(),
            UnaryOp::Clamp { lo, hi } => {
                if lo > hi {
                    return Err(Error::Contract(format!("clamp bounds {lo} > {hi}")));
                }
                xv.iter().map(|v| v.clamp(lo, hi)).collect()
            }
            UnaryOp::Negate => xv.iter().map(|v| -v).collect(),
            UnaryOp::Scale(c) => xv.iter().map(|v| c * v).collect(),
            UnaryOp::Offset(c) => xv.iter().map(|v| v + c).collect(),
        };
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::Unary { x, op }, rg))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryOp::Exp)
    }
    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryOp::Log)
    }
    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryOp::Square)
    }
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryOp::Sqrt)
    }
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryOp::Softplus)
    }
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryOp::Gelu)
    }
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary(x, UnaryOp::Clamp { lo, hi })
    }
    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryOp::Negate)
    }
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, UnaryOp::Scale(c))
    }
    pub fn offset(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, UnaryOp::Offset(c))
    }

    pub fn binary(&mut self, a: Var, b: Var, op: BinaryOp) -> Result<Var> {
        let name = match op {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
        };
        let shape = broadcast_shape(name, self.shape(a), self.shape(b))?;
        let la = Layout::new(self.shape(a), &shape);
        let lb = Layout::new(self.shape(b), &shape);
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if op == BinaryOp::Div {
            if let Some(i) = bv.iter().position(|&v| v == 0.0) {
                return Err(Error::numeric("div", i, "division by zero"));
            }
        }
        let n = numel(&shape);
        let out = match op {
            BinaryOp::Add => zip_map(&la, av, &lb, bv, n, |x, y| x + y),
            BinaryOp::Sub => zip_map(&la, av, &lb, bv, n, |x, y| x - y),
            BinaryOp::Mul => zip_map(&la, av, &lb, bv, n, |x, y| x * y),
            BinaryOp::Div => zip_map(&la, av, &lb, bv, n, |x, y| x / y),
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, Op::Binary { a, b, op }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Add)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Sub)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Mul)
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Div)
    }

    // ------------------------------------------------------------ reductions

    /// Reduces over `axis` (kept with size 1) or over everything (scalar).
    pub fn reduce(&mut self, x: Var, op: ReduceOp, axis: Option<usize>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let xv = &self.nodes[x.0].value;
        let (out_shape, outer, len, inner) = match axis {
            None => (Vec::new(), 1, xv.len(), 1),
            Some(ax) => {
                if ax >= shape.len() {
                    return Err(Error::dim(
                        "reduce",
                        format!("axis {ax} out of range for shape {shape:?}"),
                    ));
                }
                let mut s = shape.clone();
                s[ax] = 1;
                (s, numel(&shape[..ax]), shape[ax], numel(&shape[ax + 1..]))
            }
        };
        let mut out = vec![0.0; outer * inner];
        let mut argmax = Vec::new();
        if op == ReduceOp::Max {
            argmax = vec![0; outer * inner];
        }
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * len + a) * inner + i;
                let slot = o * inner + i;
                out[slot] = match op {
                    ReduceOp::Sum => (0..len).map(|a| xv[at(a)]).sum(),
                    ReduceOp::Mean => (0..len).map(|a| xv[at(a)]).sum::<f64>() / len as f64,
                    ReduceOp::Max => {
                        // first maximal element wins ties
                        let mut best = at(0);
                        for a in 1..len {
                            if xv[at(a)] > xv[best] {
                                best = at(a);
                            }
                        }
                        argmax[slot] = best;
                        xv[best]
                    }
                };
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out_shape, out, Op::Reduce { x, op, axis, argmax }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.reduce(x, ReduceOp::Sum, None)
    }
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.reduce(x, ReduceOp::Mean, None)
    }
    pub fn max(&mut self, x: Var) -> Result<Var> {
        self.reduce(x, ReduceOp::Max, None)
    }
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, ReduceOp::Sum, Some(axis))
    }
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, ReduceOp::Mean, Some(axis))
    }

    // ------------------------------------------------------------- structure

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.nodes[x.0].value.len() || shape.contains(&0) {
            return Err(Error::dim(
                "reshape",
                format!("cannot reshape {:?} into {shape:?}", self.shape(x)),
            ));
        }
        let value = self.nodes[x.0].value.clone();
        let rg = self.rg(x);
        Ok(self.push(shape.to_vec(), value, Op::Reshape { x }, rg))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::dim(
                "permute",
                format!("{perm:?} is not a permutation of rank {rank}"),
            ));
        }
        let mut in_strides = vec![1usize; rank];
        for i in (0..rank.saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * shape[i + 1];
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let n = numel(&shape);
        let mut src = Vec::with_capacity(n);
        let mut counter = vec![0usize; rank];
        let mut offset = 0usize;
        for _ in 0..n {
            src.push(offset);
            for d in (0..rank).rev() {
                counter[d] += 1;
                offset += strides[d];
                if counter[d] < out_shape[d] {
                    break;
                }
                offset -= strides[d] * counter[d];
                counter[d] = 0;
            }
        }
        let xv = &self.nodes[x.0].value;
        let out = src.iter().map(|&s| xv[s]).collect();
        let rg = self.rg(x);
        Ok(self.push(out_shape, out, Op::Permute { x, src }, rg))
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let rank = self.shape(x).len();
        if rank < 2 {
            return Err(Error::dim("transpose", "rank must be >= 2"));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(x, &perm)
    }

    /// Row lookup: `table [V, D]`, ids of length n -> `[n, D]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table);
        let [rows, cols] = shape[..] else {
            return Err(Error::dim("gather", format!("table must be 2-D, got {shape:?}")));
        };
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Index(format!("row {bad} outside table of {rows} rows")));
        }
        if ids.is_empty() {
            return Err(Error::dim("gather", "no ids"));
        }
        let tv = &self.nodes[table.0].value;
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            out.extend_from_slice(&tv[i * cols..(i + 1) * cols]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            vec![ids.len(), cols],
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    // -------------------------------------------------------------- backward

    /// Accumulates `d loss / d leaf` into every reachable differentiable leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[id].op {
                if let Some(acc) = &mut self.nodes[id].grad {
                    for (a, v) in acc.iter_mut().zip(&g) {
                        *a += v;
                    }
                }
                continue;
            }
            self.propagate(id, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let node = &nodes[id];
        let slot = |grads: &mut [Option<Vec<f64>>], v: Var| -> bool {
            if !nodes[v.0].requires_grad {
                return false;
            }
            if grads[v.0].is_none() {
                grads[v.0] = Some(vec![0.0; nodes[v.0].value.len()]);
            }
            true
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, plan } => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let step = plan.m * plan.n;
                if slot(grads, *a) {
                    let ga = grads[a.0].as_mut().unwrap();
                    for (i, &(ao, bo)) in plan.batches.iter().enumerate() {
                        // dA = dC · Bᵀ
                        gemm(
                            plan.m,
                            plan.n,
                            plan.k,
                            &g[i * step..],
                            false,
                            &bv[bo..],
                            true,
                            &mut ga[ao..ao + plan.m * plan.k],
                            1.0,
                        );
                    }
                }
                if slot(grads, *b) {
                    let gb = grads[b.0].as_mut().unwrap();
                    for (i, &(ao, bo)) in plan.batches.iter().enumerate() {
                        // dB = Aᵀ · dC
                        gemm(
                            plan.k,
                            plan.m,
                            plan.n,
                            &av[ao..],
                            true,
                            &g[i * step..],
                            false,
                            &mut gb[bo..bo + plan.k * plan.n],
                            1.0,
                        );
                    }
                }
            }
            Op::Softmax { x, bias } => {
                let y = &node.value;
                let cols = *node.shape.last().unwrap();
                let mut dz = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.chunks(cols).zip(g.chunks(cols)).zip(dz.chunks_mut(cols)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, &yy), &gg) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yy * (gg - dot);
                    }
                }
                if slot(grads, *x) {
                    let gx = grads[x.0].as_mut().unwrap();
                    for (a, v) in gx.iter_mut().zip(&dz) {
                        *a += v;
                    }
                }
                if let Some(b) = bias {
                    if slot(grads, *b) {
                        let layout = Layout::new(&nodes[b.0].shape, &node.shape);
                        reduce_into(&layout, &dz, grads[b.0].as_mut().unwrap());
                    }
                }
            }
            Op::LogSoftmax { x } => {
                if slot(grads, *x) {
                    let cols = *node.shape.last().unwrap();
                    let gx = grads[x.0].as_mut().unwrap();
                    for ((yr, gr), dr) in node.value.chunks(cols).zip(g.chunks(cols)).zip(gx.chunks_mut(cols)) {
                        let total: f64 = gr.iter().sum();
                        for ((d, &yy), &gg) in dr.iter_mut().zip(yr).zip(gr) {
                            *d += gg - yy.exp() * total;
                        }
                    }
                }
            }
            Op::Unary { x, op } => {
                if slot(grads, *x) {
                    let xv = &nodes[x.0].value;
                    let y = &node.value;
                    let gx = grads[x.0].as_mut().unwrap();
                    for i in 0..g.len() {
                        let gi = g[i];
                        gx[i] += match *op {
                            UnaryOp::Exp => gi * y[i],
                            UnaryOp::Log => gi / xv[i],
                            UnaryOp::Square => 2.0 * xv[i] * gi,
                            UnaryOp::Sqrt => gi / (2.0 * y[i]),
                            UnaryOp::Softplus => gi * sigmoid(xv[i]),
                            UnaryOp::Gelu => gi * gelu_grad(xv[i], y[i]),
                            UnaryOp::Clamp { lo, hi } => {
                                if xv[i] >= lo && xv[i] <= hi {
                                    gi
                                } else {
                                    0.0
                                }
                            }
                            UnaryOp::Negate => -gi,
                            UnaryOp::Scale(c) => c * gi,
                            UnaryOp::Offset(_) => gi,
                        };
                    }
                }
            }
            Op::Binary { a, b, op } => {
                let la = Layout::new(&nodes[a.0].shape, &node.shape);
                let lb = Layout::new(&nodes[b.0].shape, &node.shape);
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let n = g.len();
                let same = Layout::Same;
                if slot(grads, *a) {
                    let ga = grads[a.0].as_mut().unwrap();
                    match op {
                        BinaryOp::Add | BinaryOp::Sub => reduce_into(&la, g, ga),
                        BinaryOp::Mul => reduce_into(&la, &zip_map(&same, g, &lb, bv, n, |x, y| x * y), ga),
                        BinaryOp::Div => reduce_into(&la, &zip_map(&same, g, &lb, bv, n, |x, y| x / y), ga),
                    }
                }
                if slot(grads, *b) {
                    let gb = grads[b.0].as_mut().unwrap();
                    match op {
                        BinaryOp::Add => reduce_into(&lb, g, gb),
                        BinaryOp::Sub => {
                            let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                            reduce_into(&lb, &neg, gb);
                        }
                        BinaryOp::Mul => reduce_into(&lb, &zip_map(&same, g, &la, av, n, |x, y| x * y), gb),
                        BinaryOp::Div => {
                            let gy = zip_map(&same, g, &same, &node.value, n, |x, y| x * y);
                            reduce_into(&lb, &zip_map(&same, &gy, &lb, bv, n, |x, y| -x / y), gb);
                        }
                    }
                }
            }
            Op::Reduce { x, op, axis, argmax } => {
                if slot(grads, *x) {
                    let xshape = &nodes[x.0].shape;
                    let gx = grads[x.0].as_mut().unwrap();
                    match (op, axis) {
                        (ReduceOp::Max, _) => {
                            for (slot, &src) in argmax.iter().enumerate() {
                                gx[src] += g[slot];
                            }
                        }
                        (_, None) => {
                            let scale = if *op == ReduceOp::Mean {
                                1.0 / gx.len() as f64
                            } else {
                                1.0
                            };
                            gx.iter_mut().for_each(|v| *v += g[0] * scale);
                        }
                        (_, Some(ax)) => {
                            let len = xshape[*ax];
                            let inner = numel(&xshape[ax + 1..]);
                            let outer = numel(&xshape[..*ax]);
                            let scale = if *op == ReduceOp::Mean { 1.0 / len as f64 } else { 1.0 };
                            for o in 0..outer {
                                for a in 0..len {
                                    for i in 0..inner {
                                        gx[(o * len + a) * inner + i] += g[o * inner + i] * scale;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Reshape { x } => {
                if slot(grads, *x) {
                    let gx = grads[x.0].as_mut().unwrap();
                    for (a, v) in gx.iter_mut().zip(g) {
                        *a += v;
                    }
                }
            }
            Op::Permute { x, src } => {
                if slot(grads, *x) {
                    let gx = grads[x.0].as_mut().unwrap();
                    for (j, &s) in src.iter().enumerate() {
                        gx[s] += g[j];
                    }
                }
            }
            Op::Gather { table, ids } => {
                if slot(grads, *table) {
                    let cols = nodes[table.0].shape[1];
                    let gt = grads[table.0].as_mut().unwrap();
                    for (r, &i) in ids.iter().enumerate() {
                        for c in 0..cols {
                            gt[i * cols + c] += g[r * cols + c];
                        }
                    }
                }
            }
        }
    }
}
