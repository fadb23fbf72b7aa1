//! Matrix-granular reverse-mode tape.
//!
//! Every primitive appends a node holding its forward value. `backward`
//! walks the nodes once in reverse order, accumulating vector-Jacobian
//! products into the parents that require gradients.

use super::{Matrix, NnError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Relu(Var),
    Sub(Var, Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    /// `argmax[out_row * cols + c]` is the input row that won column `c`.
    MaxPool { input: Var, argmax: Vec<usize> },
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Recorded forward computation.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `shape` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Matrix {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(shape.0, shape.1))
    }
}

fn fnv_mix(hash: &mut u64, value: u64) {
    for byte in value.to_le_bytes() {
        *hash ^= u64::from(byte);
        *hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
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

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        debug_assert!(value.is_finite(), "non-finite activation in {op:?}");
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable input (parameters, inputs whose gradient is wanted).
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// Adds a `1 x cols` bias row to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, NnError> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(NnError::shape(
                "add_bias",
                format!("1x{}", xv.cols()),
                format!("{}x{}", bv.rows(), bv.cols()),
            ));
        }
        let mut value = xv.clone();
        let b = bv.row(0).to_vec();
        for r in 0..value.rows() {
            for (o, bb) in value.row_mut(r).iter_mut().zip(&b) {
                *o += bb;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(value, Op::AddBias(x, bias), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        let rg = self.rg(x);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(NnError::shape(
                "sub",
                format!("{:?}", av.shape()),
                format!("{:?}", bv.shape()),
            ));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x - y).collect();
        let value = Matrix::from_vec(av.rows(), av.cols(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        let rows = parts.first().map_or(0, |&p| self.value(p).rows());
        let mut cols = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows {
                return Err(NnError::shape(
                    "concat_cols",
                    format!("{rows} rows"),
                    format!("{} rows", v.rows()),
                ));
            }
            cols += v.cols();
        }
        let mut value = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut offset = 0;
            for &p in parts {
                let src = self.nodes[p.0].value.row(r);
                value.row_mut(r)[offset..offset + src.len()].copy_from_slice(src);
                offset += src.len();
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        let cols = parts.first().map_or(0, |&p| self.value(p).cols());
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(NnError::shape(
                    "concat_rows",
                    format!("{cols} cols"),
                    format!("{} cols", v.cols()),
                ));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let value = Matrix::from_vec(rows, cols, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Output row `k` is input row `rows[k]`.
    pub fn gather_rows(&mut self, x: Var, rows: Vec<usize>) -> Result<Var, NnError> {
        let xv = self.value(x);
        let mut value = Matrix::zeros(rows.len(), xv.cols());
        for (k, &r) in rows.iter().enumerate() {
            if r >= xv.rows() {
                return Err(NnError::IndexOutOfRange {
                    op: "gather_rows",
                    index: r,
                    len: xv.rows(),
                });
            }
            value.row_mut(k).copy_from_slice(xv.row(r));
        }
        let rg = self.rg(x);
        Ok(self.push(value, Op::GatherRows(x, rows), rg))
    }

    /// Column-wise max over each group of rows. Ties go to the lowest row
    /// index; the gradient is routed to that single row.
    pub fn max_pool_groups(&mut self, x: Var, groups: &[Vec<usize>]) -> Result<Var, NnError> {
        let xv = self.value(x);
        let cols = xv.cols();
        let mut value = Matrix::zeros(groups.len(), cols);
        let mut argmax = vec![0usize; groups.len() * cols];
        for (g, members) in groups.iter().enumerate() {
            let Some(&first) = members.first() else {
                return Err(NnError::EmptyGroup(g));
            };
            for &r in members {
                if r >= xv.rows() {
                    return Err(NnError::IndexOutOfRange {
                        op: "max_pool_groups",
                        index: r,
                        len: xv.rows(),
                    });
                }
            }
            for c in 0..cols {
                let mut best_row = first;
                let mut best = xv.get(first, c);
                for &r in &members[1..] {
                    let v = xv.get(r, c);
                    if v > best || (v == best && r < best_row) {
                        best = v;
                        best_row = r;
                    }
                }
                value.set(g, c, best);
                argmax[g * cols + c] = best_row;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(value, Op::MaxPool { input: x, argmax }, rg))
    }

    /// Row index that won each pooled entry of a max-pool node.
    pub fn argmax(&self, pooled: Var) -> Option<&[usize]> {
        match &self.nodes[pooled.0].op {
            Op::MaxPool { argmax, .. } => Some(argmax),
            _ => None,
        }
    }

    /// Hash of every ReLU on/off pattern and max-pool winner. Two evaluations
    /// with equal signatures lie on the same smooth piece of the function.
    pub fn activation_signature(&self) -> u64 {
        let mut hash = 0xcbf2_9ce4_8422_2325;
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for &v in self.nodes[x.0].value.data() {
                        fnv_mix(&mut hash, u64::from(v > 0.0));
                    }
                }
                Op::MaxPool { argmax, .. } => {
                    for &a in argmax {
                        fnv_mix(&mut hash, a as u64);
                    }
                }
                _ => {}
            }
        }
        hash
    }

    /// Reverse accumulation from `output` seeded with `output_grad`.
    pub fn backward(&self, output: Var, output_grad: &Matrix) -> Result<Gradients, NnError> {
        let out_shape = self.value(output).shape();
        if output_grad.shape() != out_shape {
            return Err(NnError::shape(
                "backward",
                format!("{out_shape:?}"),
                format!("{:?}", output_grad.shape()),
            ));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; output.0 + 1];
        grads[output.0] = Some(output_grad.clone());

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = Some(g);
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        let ga = g.matmul_t(self.value(*b));
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.rg(*b) {
                        let gb = self.value(*a).t_matmul(&g);
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::AddBias(x, bias) => {
                    if self.rg(*bias) {
                        let mut gb = Matrix::zeros(1, g.cols());
                        for r in 0..g.rows() {
                            for (o, v) in gb.row_mut(0).iter_mut().zip(g.row(r)) {
                                *o += v;
                            }
                        }
                        accumulate(&mut grads, *bias, gb);
                    }
                    if self.rg(*x) {
                        accumulate(&mut grads, *x, g.clone());
                    }
                }
                Op::Relu(x) => {
                    if self.rg(*x) {
                        let input = self.value(*x);
                        let mut gx = g.clone();
                        for (o, &v) in gx.data_mut().iter_mut().zip(input.data()) {
                            if v <= 0.0 {
                                *o = 0.0;
                            }
                        }
                        accumulate(&mut grads, *x, gx);
                    }
                }
                Op::Sub(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, g.map(|v| -v));
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let cols = self.value(p).cols();
                        if self.rg(p) {
                            let mut gp = Matrix::zeros(g.rows(), cols);
                            for r in 0..g.rows() {
                                gp.row_mut(r)
                                    .copy_from_slice(&g.row(r)[offset..offset + cols]);
                            }
                            accumulate(&mut grads, p, gp);
                        }
                        offset += cols;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let rows = self.value(p).rows();
                        if self.rg(p) {
                            let cols = g.cols();
                            let data = g.data()[offset * cols..(offset + rows) * cols].to_vec();
                            accumulate(&mut grads, p, Matrix::from_vec(rows, cols, data)?);
                        }
                        offset += rows;
                    }
                }
                Op::GatherRows(x, rows) => {
                    if self.rg(*x) {
                        let shape = self.value(*x).shape();
                        let mut gx = Matrix::zeros(shape.0, shape.1);
                        for (k, &r) in rows.iter().enumerate() {
                            for (o, v) in gx.row_mut(r).iter_mut().zip(g.row(k)) {
                                *o += v;
                            }
                        }
                        accumulate(&mut grads, *x, gx);
                    }
                }
                Op::MaxPool { input, argmax } => {
                    if self.rg(*input) {
                        let shape = self.value(*input).shape();
                        let cols = shape.1;
                        let mut gx = Matrix::zeros(shape.0, cols);
                        for out_row in 0..g.rows() {
                            for c in 0..cols {
                                let r = argmax[out_row * cols + c];
                                let cur = gx.get(r, c);
                                gx.set(r, c, cur + g.get(out_row, c));
                            }
                        }
                        accumulate(&mut grads, *input, gx);
                    }
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
