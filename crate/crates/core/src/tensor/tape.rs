use std::collections::HashMap;

use super::{Tensor, TensorError};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Local gradient rule of a node, with the parents it routes gradient to.
#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Sigmoid(Var),
    Silu(Var),
    Tanh(Var),
    Exp(Var),
    SumRows(Var),
    SumAll(Var),
    SqNormRows(Var),
    AddRow(Var, Var),
    AddCol(Var, Var),
    MulCol(Var, Var),
    MulScalar(Var, Var),
    Concat(Vec<Var>),
    SliceCols(Var, usize),
    Recip(Var, f64),
    RowNormalize(Var, f64),
    GatherRows(Var, Vec<usize>),
    ScatterAddRows(Var, Vec<usize>),
    Minimum(Var, Var),
    MinAll(Var, usize),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records a computation as an append-only list of nodes.
///
/// Nodes are stored in creation order, which is a topological order of the
/// graph, so the backward pass is a single reverse sweep.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<usize, Var>,
}

/// Gradients of a scalar loss with respect to every node of a tape.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, zero when the loss does not depend on it.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
    }

    /// Gradient of a parameter previously registered with [`Tape::param`].
    pub fn param(&self, tape: &Tape, t: &Tensor) -> Tensor {
        match tape.param_var(t) {
            Some(v) => self.wrt(tape, v),
            None => Tensor::zeros(t.shape()),
        }
    }
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records an input value.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Records a borrowed parameter, reusing the existing leaf if the same
    /// tensor was registered before (tied weights share one gradient).
    pub fn param(&mut self, t: &Tensor) -> Var {
        let key = t as *const Tensor as usize;
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let v = self.leaf(t.clone());
        self.params.insert(key, v);
        v
    }

    pub fn param_var(&self, t: &Tensor) -> Option<Var> {
        self.params.get(&(t as *const Tensor as usize)).copied()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.value(a).mul(self.value(b))?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x + s);
        self.push(out, Op::AddScalar(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.value(a).matmul_nt(self.value(b))?;
        Ok(self.push(out, Op::MatMulNt(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.value(a).transpose()?;
        Ok(self.push(out, Op::Transpose(a)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(silu);
        self.push(out, Op::Silu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a))
    }

    /// `n×d → n×1` row sums.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.value(a).sum_rows()?;
        Ok(self.push(out, Op::SumRows(a)))
    }

    /// Sum of all entries, as a rank-0 tensor.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::SumAll(a))
    }

    /// `n×d → n×1` squared row norms.
    pub fn sq_norm_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let (r, _) = self.value(a).dims2()?;
        let v = self.value(a);
        let data = (0..r)
            .map(|i| v.row(i).iter().map(|x| x * x).sum())
            .collect();
        let out = Tensor::new(&[r, 1], data)?;
        Ok(self.push(out, Op::SqNormRows(a)))
    }

    /// Adds a `1×d` row vector to every row of an `n×d` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, TensorError> {
        let (r, c) = self.value(a).dims2()?;
        let b = self.value(row);
        if b.shape() != [1, c] {
            return Err(TensorError::Shape {
                op: "add_row",
                lhs: self.value(a).shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let mut out = self.value(a).clone();
        for i in 0..r {
            for (o, x) in out.row_mut(i).iter_mut().zip(self.value(row).data()) {
                *o += x;
            }
        }
        Ok(self.push(out, Op::AddRow(a, row)))
    }

    /// Adds an `n×1` column vector to every column of an `n×d` matrix.
    pub fn add_col(&mut self, a: Var, col: Var) -> Result<Var, TensorError> {
        let (r, c) = self.value(a).dims2()?;
        if self.value(col).shape() != [r, 1] {
            return Err(TensorError::Shape {
                op: "add_col",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(col).shape().to_vec(),
            });
        }
        let mut out = self.value(a).clone();
        for i in 0..r {
            let s = self.value(col).data()[i];
            for o in out.row_mut(i).iter_mut().take(c) {
                *o += s;
            }
        }
        Ok(self.push(out, Op::AddCol(a, col)))
    }

    /// Scales row `i` of `a` by `col[i]`, i.e. `diag(col) · a`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var, TensorError> {
        let (r, _) = self.value(a).dims2()?;
        if self.value(col).shape() != [r, 1] {
            return Err(TensorError::Shape {
                op: "mul_col",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(col).shape().to_vec(),
            });
        }
        let mut out = self.value(a).clone();
        for i in 0..r {
            let s = self.value(col).data()[i];
            for o in out.row_mut(i) {
                *o *= s;
            }
        }
        Ok(self.push(out, Op::MulCol(a, col)))
    }

    /// Multiplies every entry of `a` by the single-element tensor `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var, TensorError> {
        if self.value(s).numel() != 1 {
            return Err(TensorError::Shape {
                op: "mul_scalar",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(s).shape().to_vec(),
            });
        }
        let out = self.value(a).scale(self.value(s).item());
        Ok(self.push(out, Op::MulScalar(a, s)))
    }

    /// Concatenation along the feature (column) axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_cols(&vals)?;
        Ok(self.push(out, Op::Concat(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let out = self.value(a).slice_cols(start, end)?;
        Ok(self.push(out, Op::SliceCols(a, start)))
    }

    /// `1 / max(x, eps)` elementwise.
    pub fn recip(&mut self, a: Var, eps: f64) -> Var {
        let out = self.value(a).map(|x| 1.0 / x.max(eps));
        self.push(out, Op::Recip(a, eps))
    }

    /// Row-wise L2 normalization with the norm floored at `eps`.
    pub fn row_normalize(&mut self, a: Var, eps: f64) -> Result<Var, TensorError> {
        let out = super::rowwise_l2_normalize(self.value(a), eps)?;
        Ok(self.push(out, Op::RowNormalize(a, eps)))
    }

    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var, TensorError> {
        let out = self.value(a).gather_rows(index)?;
        Ok(self.push(out, Op::GatherRows(a, index.to_vec())))
    }

    pub fn scatter_add_rows(
        &mut self,
        a: Var,
        index: &[usize],
        n: usize,
    ) -> Result<Var, TensorError> {
        let out = self.value(a).scatter_add_rows(index, n)?;
        Ok(self.push(out, Op::ScatterAddRows(a, index.to_vec())))
    }

    /// Elementwise minimum; ties route gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.value(a).zip_map(self.value(b), "minimum", f64::min)?;
        Ok(self.push(out, Op::Minimum(a, b)))
    }

    /// Smallest entry, as a rank-0 tensor. Gradient goes to the first argmin.
    pub fn min_all(&mut self, a: Var) -> Var {
        let data = self.value(a).data();
        let (arg, min) =
            data.iter().enumerate().fold(
                (0, f64::INFINITY),
                |(ai, m), (i, &x)| if x < m { (i, x) } else { (ai, m) },
            );
        let out = Tensor::scalar(min);
        self.push(out, Op::MinAll(a, arg))
    }

    /// Reverse sweep from a scalar `loss`, seeded with gradient 1.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(lv.shape()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(
        &self,
        node: &Node,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<(), TensorError> {
        let mut acc = |v: Var, delta: Tensor| -> Result<(), TensorError> {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => {
                    *slot = Some(delta);
                    Ok(())
                }
            }
        };
        let val = |v: Var| self.value(v);

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.clone())?;
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                acc(*a, g.mul(val(*b))?)?;
                acc(*b, g.mul(val(*a))?)?;
            }
            Op::Scale(a, s) => acc(*a, g.scale(*s))?,
            Op::AddScalar(a) => acc(*a, g.clone())?,
            Op::MatMul(a, b) => {
                acc(*a, g.matmul_nt(val(*b))?)?;
                acc(*b, val(*a).matmul_tn(g)?)?;
            }
            Op::MatMulNt(a, b) => {
                // c = a bᵀ: da = g b, db = gᵀ a
                acc(*a, g.matmul(val(*b))?)?;
                acc(*b, g.matmul_tn(val(*a))?)?;
            }
            Op::Transpose(a) => acc(*a, g.transpose()?)?,
            Op::Sigmoid(a) => {
                let d = node.value.map(|s| s * (1.0 - s));
                acc(*a, g.mul(&d)?)?;
            }
            Op::Silu(a) => {
                let d = val(*a).map(|x| {
                    let s = sigmoid(x);
                    s * (1.0 + x * (1.0 - s))
                });
                acc(*a, g.mul(&d)?)?;
            }
            Op::Tanh(a) => {
                let d = node.value.map(|t| 1.0 - t * t);
                acc(*a, g.mul(&d)?)?;
            }
            Op::Exp(a) => acc(*a, g.mul(&node.value)?)?,
            Op::SumRows(a) => {
                let (r, c) = dims(val(*a));
                let mut d = Tensor::zeros(&[r, c]);
                for i in 0..r {
                    let gi = g.data()[i];
                    d.row_mut(i).fill(gi);
                }
                acc(*a, d)?;
            }
            Op::SumAll(a) => acc(*a, Tensor::full(val(*a).shape(), g.item()))?,
            Op::SqNormRows(a) => {
                let x = val(*a);
                let mut d = x.scale(2.0);
                for i in 0..x.rows() {
                    let gi = g.data()[i];
                    d.row_mut(i).iter_mut().for_each(|v| *v *= gi);
                }
                acc(*a, d)?;
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone())?;
                acc(*row, g.sum_cols()?)?;
            }
            Op::AddCol(a, col) => {
                acc(*a, g.clone())?;
                acc(*col, g.sum_rows()?)?;
            }
            Op::MulCol(a, col) => {
                let x = val(*a);
                let c = val(*col);
                let mut da = g.clone();
                let mut dc = Tensor::zeros(c.shape());
                for i in 0..x.rows() {
                    let s = c.data()[i];
                    let gi = g.row(i);
                    dc.data_mut()[i] = gi.iter().zip(x.row(i)).map(|(p, q)| p * q).sum();
                    da.row_mut(i).iter_mut().for_each(|v| *v *= s);
                }
                acc(*a, da)?;
                acc(*col, dc)?;
            }
            Op::MulScalar(a, s) => {
                let sv = val(*s);
                acc(*a, g.scale(sv.item()))?;
                let ds: f64 = g
                    .data()
                    .iter()
                    .zip(val(*a).data())
                    .map(|(p, q)| p * q)
                    .sum();
                acc(*s, Tensor::full(sv.shape(), ds))?;
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = val(p).cols();
                    acc(p, g.slice_cols(start, start + w)?)?;
                    start += w;
                }
            }
            Op::SliceCols(a, start) => {
                let (r, c) = dims(val(*a));
                let w = g.cols();
                let mut d = Tensor::zeros(&[r, c]);
                for i in 0..r {
                    d.row_mut(i)[*start..*start + w].copy_from_slice(g.row(i));
                }
                acc(*a, d)?;
            }
            Op::Recip(a, eps) => {
                let d = val(*a).map(|x| if x > *eps { -1.0 / (x * x) } else { 0.0 });
                acc(*a, g.mul(&d)?)?;
            }
            Op::RowNormalize(a, eps) => {
                let x = val(*a);
                let y = &node.value;
                let mut d = Tensor::zeros(x.shape());
                for i in 0..x.rows() {
                    let norm = x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                    let gi = g.row(i);
                    let out = d.row_mut(i);
                    if norm > *eps {
                        let yg: f64 = y.row(i).iter().zip(gi).map(|(p, q)| p * q).sum();
                        for ((o, &gv), &yv) in out.iter_mut().zip(gi).zip(y.row(i)) {
                            *o = (gv - yv * yg) / norm;
                        }
                    } else {
                        for (o, &gv) in out.iter_mut().zip(gi) {
                            *o = gv / eps;
                        }
                    }
                }
                acc(*a, d)?;
            }
            Op::GatherRows(a, index) => {
                let n = val(*a).rows();
                acc(*a, g.scatter_add_rows(index, n)?)?;
            }
            Op::ScatterAddRows(a, index) => acc(*a, g.gather_rows(index)?)?,
            Op::Minimum(a, b) => {
                let (x, y) = (val(*a), val(*b));
                let da = Tensor::new(
                    x.shape(),
                    g.data()
                        .iter()
                        .zip(x.data())
                        .zip(y.data())
                        .map(|((gv, p), q)| if p <= q { *gv } else { 0.0 })
                        .collect(),
                )?;
                let db = g.sub(&da)?;
                acc(*a, da)?;
                acc(*b, db)?;
            }
            Op::MinAll(a, arg) => {
                let mut d = Tensor::zeros(val(*a).shape());
                d.data_mut()[*arg] = g.item();
                acc(*a, d)?;
            }
        }
        Ok(())
    }
}
