use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeMap, HashMap};
use std::hash::{Hash, Hasher};

use super::kernels::{self, ConvGeom};
use super::{ModelParams, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        rstd: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<Option<usize>>),
    Reshape(Var),
    SegmentMax(Var, Vec<usize>),
    Conv {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        cols: Tensor,
    },
    Sum(Var),
    Mean(Var),
    RowSqNorm(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records a forward pass for one thread; replayed in reverse by [`Tape::backward`].
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
}

/// Gradients of one scalar with respect to every recorded node.
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
    by_name: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.by_node.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name)
    }

    /// Parameter gradients, zero-filled for parameters the loss never touched.
    pub fn for_params(&self, params: &ModelParams) -> BTreeMap<String, Tensor> {
        params
            .iter()
            .map(|(name, t)| {
                let g = self
                    .by_name
                    .get(name)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.shape()));
                (name.clone(), g)
            })
            .collect()
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::Shape {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        })
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(a.shape().to_vec(), a.data().iter().map(|&x| f(x)).collect())
}

fn col_sums(g: &Tensor) -> Vec<f64> {
    let n = g.cols();
    let mut out = vec![0.0; n];
    for row in g.data().chunks(n) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Hash of every piecewise choice in the recorded graph: which ReLU inputs
    /// are positive and which position each segment max picked. Two forward
    /// passes with equal signatures lie on the same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (i, node) in self.nodes.iter().enumerate() {
            match &node.op {
                Op::Relu(_) => {
                    i.hash(&mut h);
                    for &y in node.value.data() {
                        (y > 0.0).hash(&mut h);
                    }
                }
                Op::SegmentMax(_, arg) => {
                    i.hash(&mut h);
                    arg.hash(&mut h);
                }
                _ => {}
            }
        }
        h.finish()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// An input whose gradient is reported through [`Gradients::wrt`].
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Bind a named parameter. Repeated calls with the same name share one node.
    pub fn param(&mut self, params: &ModelParams, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = params
            .get(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name}")))?
            .clone();
        let v = self.push(t, Op::Param, true);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    fn matrix_check(&self, op: &'static str, a: Var) -> Result<()> {
        let s = self.value(a).shape();
        if s.len() == 2 {
            Ok(())
        } else {
            Err(Error::Shape {
                op,
                left: s.to_vec(),
                right: vec![],
            })
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matrix_check("matmul_nt", a)?;
        self.matrix_check("matmul_nt", b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.cols() {
            return Err(Error::Shape {
                op: "matmul_nt",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let out = kernels::matmul_nt(ta, tb);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMulNt(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.matrix_check("transpose", a)?;
        let out = kernels::transpose(self.value(a));
        let ng = self.needs(a);
        Ok(self.push(out, Op::Transpose(a), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    /// Broadcast-add a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tb.numel() != tx.cols() {
            return Err(Error::Shape {
                op: "add_row",
                left: tx.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let n = tx.cols();
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        let out = Tensor::from_parts(tx.shape().to_vec(), out);
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push(out, Op::AddRow(x, bias), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = map(self.value(a), |x| x * s);
        let ng = self.needs(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = map(self.value(a), |x| x + s);
        let ng = self.needs(a);
        self.push(out, Op::AddScalar(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = map(self.value(a), |x| x.max(0.0));
        let ng = self.needs(a);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.matrix_check("softmax_rows", a)?;
        let out = kernels::softmax_rows(self.value(a));
        let ng = self.needs(a);
        Ok(self.push(out, Op::SoftmaxRows(a), ng))
    }

    /// Row-wise layer normalization with learned gain and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.matrix_check("layer_norm", x)?;
        let n = self.value(x).cols();
        for p in [gamma, beta] {
            if self.value(p).numel() != n {
                return Err(Error::Shape {
                    op: "layer_norm",
                    left: self.value(x).shape().to_vec(),
                    right: self.value(p).shape().to_vec(),
                });
            }
        }
        let (xhat, rstd) = kernels::layer_norm_core(self.value(x), eps);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = xhat.data().to_vec();
        for row in out.chunks_mut(n) {
            for ((o, gv), bv) in row.iter_mut().zip(g).zip(b) {
                *o = *o * gv + bv;
            }
        }
        let out = Tensor::from_parts(xhat.shape().to_vec(), out);
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::contract("concat of nothing"))?;
        let m = self.value(first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            self.matrix_check("concat_cols", p)?;
            if self.value(p).rows() != m {
                return Err(Error::Shape {
                    op: "concat_cols",
                    left: self.value(first).shape().to_vec(),
                    right: self.value(p).shape().to_vec(),
                });
            }
            widths.push(self.value(p).cols());
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Tensor::from_parts(vec![m, total], out), Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::contract("concat of nothing"))?;
        let n = self.value(first).cols();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            self.matrix_check("concat_rows", p)?;
            let t = self.value(p);
            if t.cols() != n {
                return Err(Error::Shape {
                    op: "concat_rows",
                    left: self.value(first).shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            rows += t.rows();
            out.extend_from_slice(t.data());
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Tensor::from_parts(vec![rows, n], out), Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.matrix_check("slice_cols", a)?;
        let t = self.value(a);
        let n = t.cols();
        if len == 0 || start + len > n {
            return Err(Error::contract(format!("slice_cols {start}+{len} out of {n} columns")));
        }
        let out: Vec<f64> = t
            .data()
            .chunks(n)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let out = Tensor::from_parts(vec![t.rows(), len], out);
        let ng = self.needs(a);
        Ok(self.push(out, Op::SliceCols(a, start), ng))
    }

    /// Select rows by index; `None` yields a zero row.
    pub fn gather_rows(&mut self, a: Var, index: Vec<Option<usize>>) -> Result<Var> {
        self.matrix_check("gather_rows", a)?;
        let t = self.value(a);
        let (m, n) = (t.rows(), t.cols());
        if index.is_empty() {
            return Err(Error::contract("gather_rows with empty index"));
        }
        let mut out = Vec::with_capacity(index.len() * n);
        for idx in &index {
            match *idx {
                Some(r) if r < m => out.extend_from_slice(t.row(r)),
                Some(r) => return Err(Error::contract(format!("gather row {r} out of {m}"))),
                None => out.extend(std::iter::repeat_n(0.0, n)),
            }
        }
        let out = Tensor::from_parts(vec![index.len(), n], out);
        let ng = self.needs(a);
        Ok(self.push(out, Op::GatherRows(a, index), ng))
    }

    pub fn gather(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        self.gather_rows(a, index.iter().map(|&i| Some(i)).collect())
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(a).reshaped(shape)?;
        let ng = self.needs(a);
        Ok(self.push(out, Op::Reshape(a), ng))
    }

    /// Column-wise maximum over each contiguous row segment.
    pub fn segment_max(&mut self, a: Var, lengths: &[usize]) -> Result<Var> {
        self.matrix_check("segment_max", a)?;
        let t = self.value(a);
        let n = t.cols();
        if lengths.contains(&0) || lengths.iter().sum::<usize>() != t.rows() {
            return Err(Error::contract(format!(
                "segment lengths {lengths:?} do not tile {} rows",
                t.rows()
            )));
        }
        let mut out = Vec::with_capacity(lengths.len() * n);
        let mut arg = Vec::with_capacity(lengths.len() * n);
        let mut start = 0;
        for &len in lengths {
            for c in 0..n {
                let mut best = start;
                for r in start + 1..start + len {
                    if t.get(r, c) > t.get(best, c) {
                        best = r;
                    }
                }
                out.push(t.get(best, c));
                arg.push(best);
            }
            start += len;
        }
        let out = Tensor::from_parts(vec![lengths.len(), n], out);
        let ng = self.needs(a);
        Ok(self.push(out, Op::SegmentMax(a, arg), ng))
    }

    /// 3×3, stride-2, padding-1 convolution over an `(height·width)×cin` map.
    ///
    /// `w` is `(9·cin)×cout` with rows ordered (ky, kx, cin); `b` has `cout` entries.
    pub fn conv3x3_s2(&mut self, x: Var, w: Var, b: Var, height: usize, width: usize) -> Result<Var> {
        let tx = self.value(x);
        let cin = tx.cols();
        if tx.rows() != height * width {
            return Err(Error::Shape {
                op: "conv3x3_s2",
                left: tx.shape().to_vec(),
                right: vec![height, width],
            });
        }
        let tw = self.value(w);
        if tw.shape().len() != 2 || tw.rows() != 9 * cin || self.value(b).numel() != tw.cols() {
            return Err(Error::Shape {
                op: "conv3x3_s2",
                left: tw.shape().to_vec(),
                right: vec![9 * cin],
            });
        }
        let geom = ConvGeom { height, width, cin };
        let cols = kernels::im2col(tx.data(), geom);
        let cols = Tensor::from_parts(vec![geom.out_height() * geom.out_width(), 9 * cin], cols);
        let mut out = kernels::matmul(&cols, tw);
        let n = out.cols();
        let bias = self.value(b).data().to_vec();
        for row in out.data_mut().chunks_mut(n) {
            for (o, bv) in row.iter_mut().zip(&bias) {
                *o += bv;
            }
        }
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(out, Op::Conv { x, w, b, geom, cols }, ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let ng = self.needs(a);
        self.push(Tensor::scalar(s), Op::Mean(a), ng)
    }

    /// Squared Euclidean norm of each row, as an `m×1` column.
    pub fn row_sq_norm(&mut self, a: Var) -> Result<Var> {
        self.matrix_check("row_sq_norm", a)?;
        let t = self.value(a);
        let out: Vec<f64> = t
            .data()
            .chunks(t.cols())
            .map(|row| row.iter().map(|v| v * v).sum())
            .collect();
        let out = Tensor::from_parts(vec![t.rows(), 1], out);
        let ng = self.needs(a);
        Ok(self.push(out, Op::RowSqNorm(a), ng))
    }

    /// Mean negative log-softmax probability of `labels` under row logits.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.matrix_check("cross_entropy", logits)?;
        let t = self.value(logits);
        if t.rows() != labels.len() || labels.iter().any(|&l| l >= t.cols()) {
            return Err(Error::Shape {
                op: "cross_entropy",
                left: t.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        let n = t.cols();
        let mut loss = 0.0;
        for (row, &l) in t.data().chunks(n).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[l];
        }
        loss /= labels.len() as f64;
        let probs = kernels::softmax_rows(t);
        let ng = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Reverse sweep from a scalar.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::filled(lt.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let mut by_name = BTreeMap::new();
        for (name, &v) in &self.params {
            if let Some(g) = &grads[v.0] {
                by_name.insert(name.clone(), g.clone());
            }
        }
        Ok(Gradients {
            by_node: grads,
            by_name,
        })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, delta: Tensor| {
            if !self.needs(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                        *e += d;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    acc(*a, kernels::matmul_nt(g, self.value(*b)));
                }
                if self.needs(*b) {
                    acc(*b, kernels::matmul_tn(self.value(*a), g));
                }
            }
            Op::MatMulNt(a, b) => {
                if self.needs(*a) {
                    acc(*a, kernels::matmul(g, self.value(*b)));
                }
                if self.needs(*b) {
                    acc(*b, kernels::matmul_tn(g, self.value(*a)));
                }
            }
            Op::Transpose(a) => acc(*a, kernels::transpose(g)),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, map(g, |x| -x));
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    acc(*a, zip_map(g, self.value(*b), |x, y| x * y));
                }
                if self.needs(*b) {
                    acc(*b, zip_map(g, self.value(*a), |x, y| x * y));
                }
            }
            Op::AddRow(x, b) => {
                acc(*x, g.clone());
                if self.needs(*b) {
                    let shape = self.value(*b).shape().to_vec();
                    acc(*b, Tensor::from_parts(shape, col_sums(g)));
                }
            }
            Op::Scale(a, s) => acc(*a, map(g, |x| x * s)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::Relu(a) => acc(*a, zip_map(g, &node.value, |gv, y| if y > 0.0 { gv } else { 0.0 })),
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let n = y.cols();
                let mut out = vec![0.0; y.numel()];
                for ((orow, yrow), grow) in out.chunks_mut(n).zip(y.data().chunks(n)).zip(g.data().chunks(n)) {
                    let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                    for ((o, yv), gv) in orow.iter_mut().zip(yrow).zip(grow) {
                        *o = yv * (gv - dot);
                    }
                }
                acc(*a, Tensor::from_parts(y.shape().to_vec(), out));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = xhat.cols();
                if self.needs(*gamma) {
                    let gx = zip_map(g, xhat, |a, b| a * b);
                    acc(*gamma, Tensor::from_parts(self.value(*gamma).shape().to_vec(), col_sums(&gx)));
                }
                if self.needs(*beta) {
                    acc(*beta, Tensor::from_parts(self.value(*beta).shape().to_vec(), col_sums(g)));
                }
                if self.needs(*x) {
                    let gam = self.value(*gamma).data();
                    let mut out = vec![0.0; xhat.numel()];
                    for (r, ((orow, xrow), grow)) in out
                        .chunks_mut(n)
                        .zip(xhat.data().chunks(n))
                        .zip(g.data().chunks(n))
                        .enumerate()
                    {
                        let dxhat: Vec<f64> = grow.iter().zip(gam).map(|(a, b)| a * b).collect();
                        let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                        let mean_dx = dxhat.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for ((o, d), xh) in orow.iter_mut().zip(&dxhat).zip(xrow) {
                            *o = rstd[r] * (d - mean_d - xh * mean_dx);
                        }
                    }
                    acc(*x, Tensor::from_parts(xhat.shape().to_vec(), out));
                }
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.needs(p) {
                        let data: Vec<f64> = g
                            .data()
                            .chunks(total)
                            .flat_map(|row| row[offset..offset + w].iter().copied())
                            .collect();
                        acc(p, Tensor::from_parts(self.value(p).shape().to_vec(), data));
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    if self.needs(p) {
                        let data = g.data()[offset..offset + len].to_vec();
                        acc(p, Tensor::from_parts(self.value(p).shape().to_vec(), data));
                    }
                    offset += len;
                }
            }
            Op::SliceCols(a, start) => {
                let src = self.value(*a);
                let (n, w) = (src.cols(), g.cols());
                let mut out = vec![0.0; src.numel()];
                for (orow, grow) in out.chunks_mut(n).zip(g.data().chunks(w)) {
                    orow[*start..start + w].copy_from_slice(grow);
                }
                acc(*a, Tensor::from_parts(src.shape().to_vec(), out));
            }
            Op::GatherRows(a, index) => {
                let src = self.value(*a);
                let n = src.cols();
                let mut out = vec![0.0; src.numel()];
                for (grow, idx) in g.data().chunks(n).zip(index) {
                    if let Some(r) = idx {
                        for (o, v) in out[r * n..(r + 1) * n].iter_mut().zip(grow) {
                            *o += v;
                        }
                    }
                }
                acc(*a, Tensor::from_parts(src.shape().to_vec(), out));
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                acc(*a, Tensor::from_parts(shape, g.data().to_vec()));
            }
            Op::SegmentMax(a, arg) => {
                let src = self.value(*a);
                let n = src.cols();
                let mut out = vec![0.0; src.numel()];
                for (k, (&r, gv)) in arg.iter().zip(g.data()).enumerate() {
                    out[r * n + k % n] += gv;
                }
                acc(*a, Tensor::from_parts(src.shape().to_vec(), out));
            }
            Op::Conv { x, w, b, geom, cols } => {
                if self.needs(*w) {
                    acc(*w, kernels::matmul_tn(cols, g));
                }
                if self.needs(*b) {
                    acc(*b, Tensor::from_parts(self.value(*b).shape().to_vec(), col_sums(g)));
                }
                if self.needs(*x) {
                    let gcols = kernels::matmul_nt(g, self.value(*w));
                    let gx = kernels::col2im(gcols.data(), *geom);
                    acc(*x, Tensor::from_parts(self.value(*x).shape().to_vec(), gx));
                }
            }
            Op::Sum(a) => {
                let shape = self.value(*a).shape().to_vec();
                acc(*a, Tensor::filled(&shape, g.data()[0]));
            }
            Op::Mean(a) => {
                let t = self.value(*a);
                acc(*a, Tensor::filled(t.shape(), g.data()[0] / t.numel() as f64));
            }
            Op::RowSqNorm(a) => {
                let t = self.value(*a);
                let n = t.cols();
                let mut out = t.data().to_vec();
                for (row, gv) in out.chunks_mut(n).zip(g.data()) {
                    for v in row.iter_mut() {
                        *v *= 2.0 * gv;
                    }
                }
                acc(*a, Tensor::from_parts(t.shape().to_vec(), out));
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let n = probs.cols();
                let scale = g.data()[0] / labels.len() as f64;
                let mut out = probs.data().to_vec();
                for (row, &l) in out.chunks_mut(n).zip(labels) {
                    row[l] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                acc(*logits, Tensor::from_parts(probs.shape().to_vec(), out));
            }
        }
    }
}
