use super::tensor::{kernels, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberate defects used to prove the gradient checker catches broken adjoints.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    SigmoidBackwardSign,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    AddRow(Var, Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    SoftmaxRows(Var),
    Sigmoid(Var),
    ScaleRows { x: Var, gates: Var, col: usize },
    TopKSoftmaxRows(Var),
    SelectRow { x: Var, row: usize },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::MatMulNt(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b) => vec![a, b],
            Op::ScaleRows { x, gates, .. } => vec![x, gates],
            Op::Scale(a, _)
            | Op::AddConst(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::MeanRows(a)
            | Op::SoftmaxRows(a)
            | Op::Sigmoid(a)
            | Op::TopKSoftmaxRows(a)
            | Op::SelectRow { x: a, .. } => vec![a],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Wengert list for reverse-mode differentiation.
///
/// Every op appends one node holding its output value. `backward` walks the list
/// once in reverse, so each op's adjoint rule runs exactly once, and adjoints from
/// fan-out are summed.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    matmul_flops: u64,
    fault: Option<Fault>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    #[doc(hidden)]
    pub fn inject_fault(&mut self, fault: Fault) {
        self.fault = Some(fault);
    }

    /// Trainable leaf: receives a gradient on `backward`.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`, if `v` is an ancestor of it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-adds performed by matrix products recorded so far.
    pub fn matmul_flops(&self) -> u64 {
        self.matmul_flops
    }

    /// Shapes of every non-leaf value, in recording order.
    pub fn intermediate_shapes(&self) -> Vec<Vec<usize>> {
        self.nodes
            .iter()
            .filter(|n| !matches!(n.op, Op::Leaf))
            .map(|n| n.value.shape().to_vec())
            .collect()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op) -> Var {
        let rg = op.inputs().iter().any(|&v| self.nodes[v.0].requires_grad);
        self.push(value, op, rg)
    }

    fn dims(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Dimension {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a)?;
        let (k2, n) = self.dims(b)?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        self.matmul_flops += (m * k * n) as u64;
        Ok(self.push_op(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b)))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a)?;
        let (n, k2) = self.dims(b)?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul_nt",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let out = kernels::matmul_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        self.matmul_flops += (m * k * n) as u64;
        Ok(self.push_op(Tensor::new(vec![m, n], out)?, Op::MatMulNt(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push_op(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push_op(out, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push_op(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).scale(k);
        self.push_op(out, Op::Scale(a, k))
    }

    /// `a + c` for a constant tensor `c`.
    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        let out = self.value(a).add(c)?;
        Ok(self.push_op(out, Op::AddConst(a)))
    }

    /// Adds a length-`n` row (`[n]` or `[1, n]`) to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        let (rr, rn) = self.dims(row)?;
        if rr != 1 || rn != n {
            return Err(Error::Dimension {
                op: "add_row",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(row).shape().to_vec(),
            });
        }
        let r = self.value(row).data().to_vec();
        let mut data = self.value(a).data().to_vec();
        for i in 0..m {
            for (o, b) in data[i * n..(i + 1) * n].iter_mut().zip(&r) {
                *o += b;
            }
        }
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push_op(out, Op::AddRow(a, row)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push_op(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.sum() / t.len() as f64;
        self.push_op(Tensor::scalar(s), Op::Mean(a))
    }

    /// Column means of an `m×n` matrix, as a `1×n` row.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        let x = self.value(a).data();
        let mut out = vec![0.0; n];
        for i in 0..m {
            for (o, v) in out.iter_mut().zip(&x[i * n..(i + 1) * n]) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= m as f64;
        }
        Ok(self.push_op(Tensor::new(vec![1, n], out)?, Op::MeanRows(a)))
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        let mut data = self.value(a).data().to_vec();
        for i in 0..m {
            kernels::softmax_row(&mut data[i * n..(i + 1) * n]);
        }
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push_op(out, Op::SoftmaxRows(a)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(kernels::sigmoid);
        self.push_op(out, Op::Sigmoid(a))
    }

    /// `out[i, :] = gates[g(i), col] · x[i, :]`, where `g(i) = i` when `gates` has one
    /// row per row of `x` and `g(i) = 0` when `gates` is a single row.
    pub fn scale_rows(&mut self, x: Var, gates: Var, col: usize) -> Result<Var> {
        let (m, n) = self.dims(x)?;
        let (gm, gs) = self.dims(gates)?;
        if (gm != 1 && gm != m) || col >= gs {
            return Err(Error::Dimension {
                op: "scale_rows",
                lhs: self.value(x).shape().to_vec(),
                rhs: self.value(gates).shape().to_vec(),
            });
        }
        let g = self.value(gates).data();
        let mut data = self.value(x).data().to_vec();
        for i in 0..m {
            let gi = if gm == 1 { 0 } else { i };
            let k = g[gi * gs + col];
            for v in &mut data[i * n..(i + 1) * n] {
                *v *= k;
            }
        }
        let out = Tensor::new(vec![m, n], data)?;
        Ok(self.push_op(out, Op::ScaleRows { x, gates, col }))
    }

    /// Per row: keep the `k` largest entries (ties to the lowest index), softmax over
    /// them, zero elsewhere. The selection itself carries no gradient.
    pub fn topk_softmax_rows(&mut self, a: Var, k: usize) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        if k == 0 || k > n {
            return Err(Error::contract(format!("top-k needs 1 <= k <= {n}, got k = {k}")));
        }
        let x = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let kept = top_k_indices(row, k);
            let mut vals: Vec<f64> = kept.iter().map(|&j| row[j]).collect();
            kernels::softmax_row(&mut vals);
            for (&j, v) in kept.iter().zip(vals) {
                out[i * n + j] = v;
            }
        }
        let out = Tensor::new(self.value(a).shape().to_vec(), out)?;
        Ok(self.push_op(out, Op::TopKSoftmaxRows(a)))
    }

    /// Row `row` of a matrix, as a `1×n` row.
    pub fn select_row(&mut self, x: Var, row: usize) -> Result<Var> {
        let (m, n) = self.dims(x)?;
        if row >= m {
            return Err(Error::Lookup { id: row, len: m });
        }
        let out = Tensor::new(vec![1, n], self.value(x).row(row).to_vec())?;
        Ok(self.push_op(out, Op::SelectRow { x, row }))
    }

    /// Reverse sweep from a scalar `loss`. Gradients from a previous sweep are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::new(self.value(loss).shape().to_vec(), vec![1.0])?);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            for (input, contrib) in self.adjoints(idx, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                            *a += c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn adjoints(&self, idx: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[idx];
        let y = &node.value;
        let gd = g.data();
        let like = |v: Var, data: Vec<f64>| Tensor::new(self.value(v).shape().to_vec(), data);

        Ok(match node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(a)?;
                let n = self.dims(b)?.1;
                let da = kernels::matmul_nt(gd, self.value(b).data(), m, n, k);
                let db = kernels::matmul_tn(self.value(a).data(), gd, m, k, n);
                vec![(a, like(a, da)?), (b, like(b, db)?)]
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.dims(a)?;
                let n = self.dims(b)?.0;
                let da = kernels::matmul(gd, self.value(b).data(), m, n, k);
                let db = kernels::matmul_tn(gd, self.value(a).data(), m, n, k);
                vec![(a, like(a, da)?), (b, like(b, db)?)]
            }
            Op::Add(a, b) => vec![(a, g.clone()), (b, g.clone())],
            Op::Sub(a, b) => vec![(a, g.clone()), (b, g.scale(-1.0))],
            Op::Mul(a, b) => {
                let da = gd.iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
                let db = gd.iter().zip(self.value(a).data()).map(|(x, y)| x * y).collect();
                vec![(a, like(a, da)?), (b, like(b, db)?)]
            }
            Op::Scale(a, k) => vec![(a, g.scale(k))],
            Op::AddConst(a) => vec![(a, g.clone())],
            Op::AddRow(a, row) => {
                let (m, n) = self.dims(a)?;
                let mut dr = vec![0.0; n];
                for i in 0..m {
                    for (d, v) in dr.iter_mut().zip(&gd[i * n..(i + 1) * n]) {
                        *d += v;
                    }
                }
                vec![(a, g.clone()), (row, like(row, dr)?)]
            }
            Op::Sum(a) => vec![(a, Tensor::filled(self.value(a).shape(), gd[0]))],
            Op::Mean(a) => {
                let n = self.value(a).len() as f64;
                vec![(a, Tensor::filled(self.value(a).shape(), gd[0] / n))]
            }
            Op::MeanRows(a) => {
                let (m, n) = self.dims(a)?;
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    for (d, v) in da[i * n..(i + 1) * n].iter_mut().zip(gd) {
                        *d = v / m as f64;
                    }
                }
                vec![(a, like(a, da)?)]
            }
            Op::SoftmaxRows(a) | Op::TopKSoftmaxRows(a) => {
                let (m, n) = self.dims(a)?;
                let yd = y.data();
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    let r = i * n..(i + 1) * n;
                    let dot: f64 = gd[r.clone()].iter().zip(&yd[r.clone()]).map(|(a, b)| a * b).sum();
                    for j in r {
                        da[j] = yd[j] * (gd[j] - dot);
                    }
                }
                vec![(a, like(a, da)?)]
            }
            Op::Sigmoid(a) => {
                let sign = if self.fault == Some(Fault::SigmoidBackwardSign) {
                    -1.0
                } else {
                    1.0
                };
                let da = gd
                    .iter()
                    .zip(y.data())
                    .map(|(g, s)| sign * g * s * (1.0 - s))
                    .collect();
                vec![(a, like(a, da)?)]
            }
            Op::ScaleRows { x, gates, col } => {
                let (m, n) = self.dims(x)?;
                let (gm, gs) = self.dims(gates)?;
                let xv = self.value(x).data();
                let gv = self.value(gates).data();
                let mut dx = vec![0.0; m * n];
                let mut dg = vec![0.0; gm * gs];
                for i in 0..m {
                    let gi = if gm == 1 { 0 } else { i };
                    let k = gv[gi * gs + col];
                    let r = i * n..(i + 1) * n;
                    let mut dot = 0.0;
                    for j in r {
                        dx[j] = k * gd[j];
                        dot += gd[j] * xv[j];
                    }
                    dg[gi * gs + col] += dot;
                }
                vec![(x, like(x, dx)?), (gates, like(gates, dg)?)]
            }
            Op::SelectRow { x, row } => {
                let (m, n) = self.dims(x)?;
                let mut dx = vec![0.0; m * n];
                dx[row * n..(row + 1) * n].copy_from_slice(gd);
                vec![(x, like(x, dx)?)]
            }
        })
    }
}

/// Indices of the `k` largest entries, ordered by descending value; ties go to the lower index.
pub fn top_k_indices(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}
