//! Tape-based reverse-mode differentiation over dense row-major matrices.
//!
//! Every value on the tape is a 2-D [`Tensor`]; vectors are `1×n` rows and
//! scalars are `1×1`. Nodes are appended in evaluation order, so a single
//! reverse sweep over the node list visits every node after all of its
//! consumers.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Shape(format!(
                "{rows}x{cols} tensor needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn scalar(v: f64) -> Self {
        Self { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn row(v: Vec<f64>) -> Self {
        Self { rows: 1, cols: v.len(), data: v }
    }

    pub fn column(v: Vec<f64>) -> Self {
        Self { rows: v.len(), cols: 1, data: v }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    fn zip(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Self) -> Self {
        let mut out = vec![0.0; self.rows * other.cols];
        for i in 0..self.rows {
            let orow = &mut out[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Self { rows: self.rows, cols: other.cols, data: out }
    }

    /// `selfᵀ · other`.
    fn t_matmul(&self, other: &Self) -> Self {
        let mut out = vec![0.0; self.cols * other.cols];
        for k in 0..self.rows {
            let arow = &self.data[k * self.cols..(k + 1) * self.cols];
            let brow = &other.data[k * other.cols..(k + 1) * other.cols];
            for (i, &a) in arow.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let orow = &mut out[i * other.cols..(i + 1) * other.cols];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Self { rows: self.cols, cols: other.cols, data: out }
    }

    /// `self · otherᵀ`.
    fn matmul_t(&self, other: &Self) -> Self {
        let mut out = vec![0.0; self.rows * other.rows];
        for i in 0..self.rows {
            let arow = &self.data[i * self.cols..(i + 1) * self.cols];
            for j in 0..other.rows {
                let brow = &other.data[j * other.cols..(j + 1) * other.cols];
                out[i * other.rows + j] = arow.iter().zip(brow).map(|(a, b)| a * b).sum();
            }
        }
        Self { rows: self.rows, cols: other.rows, data: out }
    }
}

/// Handle to a node of a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var {
    pub id: usize,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    MatMul(usize, usize),
    /// `x + row` with `row` broadcast over the rows of `x`.
    AddRow(usize, usize),
    /// `scale·x + shift`.
    Affine(usize, f64),
    Tanh(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    MaxConst(usize, f64),
    Sum(usize),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Append-only record of an evaluated program.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    inputs: BTreeMap<String, usize>,
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

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        let v = Var { id: self.nodes.len(), rows: value.rows, cols: value.cols };
        self.nodes.push(Node { op, value });
        v
    }

    /// Registers a named differentiable input.
    pub fn input(&mut self, name: &str, value: Tensor) -> Var {
        let v = self.push(Op::Leaf, value);
        self.inputs.insert(name.to_string(), v.id);
        v
    }

    /// A leaf that receives an adjoint but is not reported as an input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.id].value
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if (a.rows, a.cols) != (b.rows, b.cols) {
            return Err(Error::Shape(format!(
                "{what}: {}x{} vs {}x{}",
                a.rows, a.cols, b.rows, b.cols
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a).zip(self.value(b), |x, y| x + y);
        Ok(self.push(Op::Add(a.id, b.id), v))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.value(a).zip(self.value(b), |x, y| x - y);
        Ok(self.push(Op::Sub(a.id, b.id), v))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.value(a).zip(self.value(b), |x, y| x * y);
        Ok(self.push(Op::Mul(a.id, b.id), v))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "div")?;
        if self.value(b).data.contains(&0.0) {
            return Err(Error::Domain("division by zero".into()));
        }
        let v = self.value(a).zip(self.value(b), |x, y| x / y);
        Ok(self.push(Op::Div(a.id, b.id), v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        if a.cols != b.rows {
            return Err(Error::Shape(format!(
                "matmul: {}x{} · {}x{}",
                a.rows, a.cols, b.rows, b.cols
            )));
        }
        let v = self.value(a).matmul(self.value(b));
        Ok(self.push(Op::MatMul(a.id, b.id), v))
    }

    /// Adds a `1×cols` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        if row.rows != 1 || row.cols != x.cols {
            return Err(Error::Shape(format!(
                "add_row: {}x{} + {}x{}",
                x.rows, x.cols, row.rows, row.cols
            )));
        }
        let xv = self.value(x);
        let rv = self.value(row);
        let mut out = xv.clone();
        for r in 0..out.rows {
            for c in 0..out.cols {
                out.data[r * out.cols + c] += rv.data[c];
            }
        }
        Ok(self.push(Op::AddRow(x.id, row.id), out))
    }

    /// Elementwise `scale·x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let v = self.value(x).map(|t| scale * t + shift);
        self.push(Op::Affine(x.id, scale), v)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::tanh);
        self.push(Op::Tanh(x.id), v)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        self.push(Op::Sigmoid(x.id), v)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::exp);
        self.push(Op::Exp(x.id), v)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data.iter().any(|&t| !(t > 0.0)) {
            return Err(Error::Domain("log of a nonpositive value".into()));
        }
        let v = self.value(x).map(f64::ln);
        Ok(self.push(Op::Log(x.id), v))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data.iter().any(|&t| !(t > 0.0)) {
            return Err(Error::Domain("square root of a nonpositive value".into()));
        }
        let v = self.value(x).map(f64::sqrt);
        Ok(self.push(Op::Sqrt(x.id), v))
    }

    pub fn max_const(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|t| t.max(c));
        self.push(Op::MaxConst(x.id, c), v)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        self.push(Op::Sum(x.id), Tensor::scalar(s))
    }

    /// Reverse sweep from a scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if (output.rows, output.cols) != (1, 1) {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar output, got {}x{}",
                output.rows, output.cols
            )));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; output.id + 1];
        adj[output.id] = Some(Tensor::scalar(1.0));
        for id in (0..=output.id).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &self.nodes[id];
            let send = |target: usize, t: Tensor, adj: &mut Vec<Option<Tensor>>| match &mut adj[target] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            };
            match node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    send(a, g.clone(), &mut adj);
                    send(b, g.clone(), &mut adj);
                }
                Op::Sub(a, b) => {
                    send(a, g.clone(), &mut adj);
                    send(b, g.map(|x| -x), &mut adj);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
                    send(a, g.zip(bv, |x, y| x * y), &mut adj);
                    send(b, g.zip(av, |x, y| x * y), &mut adj);
                }
                Op::Div(a, b) => {
                    let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
                    send(a, g.zip(bv, |x, y| x / y), &mut adj);
                    let gb = Tensor {
                        rows: g.rows,
                        cols: g.cols,
                        data: (0..g.data.len())
                            .map(|k| -g.data[k] * av.data[k] / (bv.data[k] * bv.data[k]))
                            .collect(),
                    };
                    send(b, gb, &mut adj);
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
                    send(a, g.matmul_t(bv), &mut adj);
                    send(b, av.t_matmul(&g), &mut adj);
                }
                Op::AddRow(x, row) => {
                    let mut gr = Tensor::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            gr.data[c] += g.data[r * g.cols + c];
                        }
                    }
                    send(x, g.clone(), &mut adj);
                    send(row, gr, &mut adj);
                }
                Op::Affine(x, scale) => send(x, g.map(|t| t * scale), &mut adj),
                Op::Tanh(x) => {
                    let y = &node.value;
                    send(x, g.zip(y, |gi, yi| gi * (1.0 - yi * yi)), &mut adj);
                }
                Op::Sigmoid(x) => {
                    let y = &node.value;
                    send(x, g.zip(y, |gi, yi| gi * yi * (1.0 - yi)), &mut adj);
                }
                Op::Exp(x) => {
                    let y = &node.value;
                    send(x, g.zip(y, |gi, yi| gi * yi), &mut adj);
                }
                Op::Log(x) => {
                    let xv = &self.nodes[x].value;
                    send(x, g.zip(xv, |gi, xi| gi / xi), &mut adj);
                }
                Op::Sqrt(x) => {
                    let y = &node.value;
                    send(x, g.zip(y, |gi, yi| 0.5 * gi / yi), &mut adj);
                }
                Op::MaxConst(x, c) => {
                    let xv = &self.nodes[x].value;
                    send(x, g.zip(xv, |gi, xi| if xi > c { gi } else { 0.0 }), &mut adj);
                }
                Op::Sum(x) => {
                    let xv = &self.nodes[x].value;
                    send(x, Tensor { rows: xv.rows, cols: xv.cols, data: vec![g.data[0]; xv.data.len()] }, &mut adj);
                }
            }
            // leaves keep their adjoint so inputs and constants can be queried
            if matches!(node.op, Op::Leaf) {
                adj[id] = Some(g);
            }
        }
        let mut by_name = BTreeMap::new();
        for (name, &id) in &self.inputs {
            if id <= output.id {
                let t = adj[id].clone().unwrap_or_else(|| {
                    let v = &self.nodes[id].value;
                    Tensor::zeros(v.rows, v.cols)
                });
                by_name.insert(name.clone(), t);
            }
        }
        Ok(Gradients { by_id: adj, by_name })
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Adjoints of a completed backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    by_id: Vec<Option<Tensor>>,
    by_name: BTreeMap<String, Tensor>,
}

impl Gradients {
    /// Gradient with respect to a named input.
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name)
    }

    /// Gradient with respect to any leaf.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.by_id
            .get(v.id)
            .cloned()
            .flatten()
            .unwrap_or_else(|| Tensor::zeros(v.rows, v.cols))
    }

    pub fn inputs(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.by_name.iter()
    }
}

/// Evaluates `program` on the named inputs and returns its outputs with the tape.
pub fn eval_graph<F>(inputs: &[(&str, Tensor)], program: F) -> Result<(Vec<Tensor>, Tape)>
where
    F: FnOnce(&mut Tape, &[Var]) -> Result<Vec<Var>>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|(name, t)| tape.input(name, t.clone()))
        .collect();
    let outs = program(&mut tape, &vars)?;
    let values = outs.iter().map(|v| tape.value(*v).clone()).collect();
    Ok((values, tape))
}

/// Reverse-mode gradients of a scalar `output` with respect to every registered input.
pub fn backward(tape: &Tape, output: Var) -> Result<Gradients> {
    tape.backward(output)
}
