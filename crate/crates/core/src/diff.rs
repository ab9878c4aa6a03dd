//! Reverse-mode differentiation over a dynamically recorded tensor tape.
//!
//! Nodes hold row-major matrices. A computation is recorded by calling the
//! op methods on [`Tape`]; [`Tape::backward`] then sweeps the tape once in
//! reverse to accumulate adjoints. Domain-specific kernels with a closed-form
//! vector-Jacobian product (the signal superposition losses) plug in through
//! [`CustomOp`].
//!
//! Flat parameter vectors with a named segment layout ([`ParamVector`]) are
//! the currency for [`grad`], [`fd_check`] and [`hvp`].

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A recorded operation with a hand-written vector-Jacobian product.
pub trait CustomOp: Send {
    fn name(&self) -> &'static str;

    /// Accumulates `∂L/∂input_i` into `input_grads[i]` (pre-sized, zeroed)
    /// given `∂L/∂output`.
    fn backward(&self, out_grad: &[f64], input_grads: &mut [Vec<f64>]);
}

enum Op {
    Input,
    Constant,
    MatMul(Var, Var),
    AddColBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    ConstOver(Var),
    Tanh(Var),
    Softplus(Var),
    Sqrt(Var),
    Square(Var),
    Sum(Var),
    ConcatRows(Vec<Var>),
    Broadcast(Var),
    Custom(Vec<Var>, Box<dyn CustomOp>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Constant => "constant",
            Op::MatMul(..) => "matmul",
            Op::AddColBias(..) => "add_bias",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::ConstOver(..) => "const_over",
            Op::Tanh(..) => "tanh",
            Op::Softplus(..) => "softplus",
            Op::Sqrt(..) => "sqrt",
            Op::Square(..) => "square",
            Op::Sum(..) => "sum",
            Op::ConcatRows(..) => "concat_rows",
            Op::Broadcast(..) => "broadcast",
            Op::Custom(_, op) => op.name(),
        }
    }
}

struct Node {
    value: Vec<f64>,
    rows: usize,
    cols: usize,
    op: Op,
    needs_grad: bool,
}

/// Single-use recording of one evaluation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    first_bad: Option<(usize, &'static str)>,
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    adj: Vec<Vec<f64>>,
    sizes: Vec<usize>,
}

impl Gradients {
    /// Adjoint of `v`; zeros if the output does not depend on it.
    pub fn get(&self, v: Var) -> Vec<f64> {
        let a = &self.adj[v.0];
        if a.is_empty() {
            vec![0.0; self.sizes[v.0]]
        } else {
            a.clone()
        }
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

    fn push(&mut self, value: Vec<f64>, rows: usize, cols: usize, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        let idx = self.nodes.len();
        if self.first_bad.is_none() && value.iter().any(|v| !v.is_finite()) {
            self.first_bad = Some((idx, op.name()));
        }
        self.nodes.push(Node {
            value,
            rows,
            cols,
            op,
            needs_grad,
        });
        Var(idx)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let n = self.node(v);
        assert_eq!(n.value.len(), 1, "node {} is not a scalar", v.0);
        n.value[0]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    /// First node whose value was non-finite, if any.
    pub fn check_finite(&self) -> Result<()> {
        match self.first_bad {
            Some((node, op)) => Err(Error::NumericOverflow { node, op }),
            None => Ok(()),
        }
    }

    /// Differentiable leaf.
    pub fn input(&mut self, values: &[f64], rows: usize, cols: usize) -> Var {
        assert_eq!(values.len(), rows * cols);
        self.push(values.to_vec(), rows, cols, Op::Input, true)
    }

    pub fn input_scalar(&mut self, v: f64) -> Var {
        self.input(&[v], 1, 1)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, values: Vec<f64>, rows: usize, cols: usize) -> Var {
        assert_eq!(values.len(), rows * cols);
        self.push(values, rows, cols, Op::Constant, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dimensions");
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for (kk, &aik) in av[i * k..(i + 1) * k].iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                for (o, &bkj) in orow.iter_mut().zip(&bv[kk * n..(kk + 1) * n]) {
                    *o += aik * bkj;
                }
            }
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(out, m, n, Op::MatMul(a, b), ng)
    }

    /// `y[i, j] = x[i, j] + b[i]`.
    pub fn add_col_bias(&mut self, x: Var, b: Var) -> Var {
        let (m, n) = self.shape(x);
        assert_eq!(self.value(b).len(), m, "bias length");
        let bv = self.value(b);
        let out: Vec<f64> = self
            .value(x)
            .chunks(n)
            .zip(bv)
            .flat_map(|(row, &bi)| row.iter().map(move |v| v + bi))
            .collect();
        let ng = self.ng(x) || self.ng(b);
        self.push(out, m, n, Op::AddColBias(x, b), ng)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (m, n) = self.shape(a);
        let bl = self.value(b).len();
        assert!(bl == m * n || bl == 1, "binary op shape mismatch");
        let av = self.value(a);
        let bv = self.value(b);
        let out: Vec<f64> = if bl == 1 {
            av.iter().map(|&x| f(x, bv[0])).collect()
        } else {
            av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
        };
        let ng = self.ng(a) || self.ng(b);
        self.push(out, m, n, op, ng)
    }

    /// Elementwise; `b` may be a 1×1 scalar that broadcasts.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let (m, n) = self.shape(x);
        let out = self.value(x).iter().map(|&v| f(v)).collect();
        let ng = self.ng(x);
        self.push(out, m, n, op, ng)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn offset(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::Offset(x))
    }

    /// `y_i = c_i / x_i` for constant numerators.
    pub fn const_over(&mut self, x: Var, numerators: Vec<f64>) -> Var {
        let (m, n) = self.shape(x);
        assert_eq!(numerators.len(), m * n);
        let out = self.value(x).iter().zip(&numerators).map(|(&v, &c)| c / v).collect();
        let ng = self.ng(x);
        self.push(out, m, n, Op::ConstOver(x), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, f64::sqrt, Op::Sqrt(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let ng = self.ng(x);
        self.push(vec![s], 1, 1, Op::Sum(x), ng)
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.shape(parts[0]).1;
        let mut out = Vec::new();
        let mut rows = 0;
        let mut ng = false;
        for &p in parts {
            let (r, c) = self.shape(p);
            assert_eq!(c, cols, "concat_rows column mismatch");
            out.extend_from_slice(self.value(p));
            rows += r;
            ng |= self.ng(p);
        }
        self.push(out, rows, cols, Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Repeats a 1×1 node into a `rows × cols` matrix.
    pub fn broadcast(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let v = self.scalar(x);
        let ng = self.ng(x);
        self.push(vec![v; rows * cols], rows, cols, Op::Broadcast(x), ng)
    }

    /// Records a node whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], op: Box<dyn CustomOp>, value: Vec<f64>, rows: usize, cols: usize) -> Var {
        let ng = inputs.iter().any(|&v| self.ng(v));
        self.push(value, rows, cols, Op::Custom(inputs.to_vec(), op), ng)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(self.node(out).value.len(), 1, "backward needs a scalar output");
        let n = self.nodes.len();
        let mut adj: Vec<Vec<f64>> = vec![Vec::new(); n];
        adj[out.0] = vec![1.0];
        for i in (0..=out.0).rev() {
            if adj[i].is_empty() || !self.nodes[i].needs_grad {
                continue;
            }
            let g = std::mem::take(&mut adj[i]);
            self.propagate(i, &g, &mut adj);
            adj[i] = g;
        }
        Gradients {
            adj,
            sizes: self.nodes.iter().map(|n| n.value.len()).collect(),
        }
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Vec<f64>]) {
        let node = &self.nodes[i];
        let acc = |v: Var, adj: &mut [Vec<f64>], f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let a = &mut adj[v.0];
            if a.is_empty() {
                *a = vec![0.0; self.nodes[v.0].value.len()];
            }
            f(a);
        };
        match &node.op {
            Op::Input | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(*a);
                let nn = node.cols;
                let av = self.value(*a);
                let bv = self.value(*b);
                acc(*a, adj, &mut |da| {
                    for ii in 0..m {
                        let grow = &g[ii * nn..(ii + 1) * nn];
                        for kk in 0..k {
                            let brow = &bv[kk * nn..(kk + 1) * nn];
                            da[ii * k + kk] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                acc(*b, adj, &mut |db| {
                    for ii in 0..m {
                        let grow = &g[ii * nn..(ii + 1) * nn];
                        for kk in 0..k {
                            let aik = av[ii * k + kk];
                            if aik == 0.0 {
                                continue;
                            }
                            for (d, &gv) in db[kk * nn..(kk + 1) * nn].iter_mut().zip(grow) {
                                *d += aik * gv;
                            }
                        }
                    }
                });
            }
            Op::AddColBias(x, b) => {
                let nn = node.cols;
                acc(*x, adj, &mut |dx| dx.iter_mut().zip(g).for_each(|(d, v)| *d += v));
                acc(*b, adj, &mut |db| {
                    for (r, d) in db.iter_mut().enumerate() {
                        *d += g[r * nn..(r + 1) * nn].iter().sum::<f64>();
                    }
                });
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                acc(*a, adj, &mut |da| da.iter_mut().zip(g).for_each(|(d, v)| *d += v));
                acc(*b, adj, &mut |db| {
                    if db.len() == 1 {
                        db[0] += sign * g.iter().sum::<f64>();
                    } else {
                        db.iter_mut().zip(g).for_each(|(d, v)| *d += sign * v);
                    }
                });
            }
            Op::Mul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let bval = |j: usize| if bv.len() == 1 { bv[0] } else { bv[j] };
                acc(*a, adj, &mut |da| {
                    for (j, d) in da.iter_mut().enumerate() {
                        *d += g[j] * bval(j);
                    }
                });
                acc(*b, adj, &mut |db| {
                    if db.len() == 1 {
                        db[0] += g.iter().zip(av).map(|(x, y)| x * y).sum::<f64>();
                    } else {
                        db.iter_mut().zip(g.iter().zip(av)).for_each(|(d, (x, y))| *d += x * y);
                    }
                });
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                let out = &node.value;
                let bval = |j: usize| if bv.len() == 1 { bv[0] } else { bv[j] };
                acc(*a, adj, &mut |da| {
                    for (j, d) in da.iter_mut().enumerate() {
                        *d += g[j] / bval(j);
                    }
                });
                // d(a/b)/db = -(a/b)/b
                acc(*b, adj, &mut |db| {
                    if db.len() == 1 {
                        db[0] -= g.iter().zip(out).map(|(x, y)| x * y).sum::<f64>() / bv[0];
                    } else {
                        for (j, d) in db.iter_mut().enumerate() {
                            *d -= g[j] * out[j] / bv[j];
                        }
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, adj, &mut |dx| dx.iter_mut().zip(g).for_each(|(d, v)| *d += c * v)),
            Op::Offset(x) => acc(*x, adj, &mut |dx| dx.iter_mut().zip(g).for_each(|(d, v)| *d += v)),
            Op::ConstOver(x) => {
                let xv = self.value(*x);
                let out = &node.value;
                acc(*x, adj, &mut |dx| {
                    for j in 0..dx.len() {
                        dx[j] -= g[j] * out[j] / xv[j];
                    }
                });
            }
            Op::Tanh(x) => {
                let out = &node.value;
                acc(*x, adj, &mut |dx| {
                    for j in 0..dx.len() {
                        dx[j] += g[j] * (1.0 - out[j] * out[j]);
                    }
                });
            }
            Op::Softplus(x) => {
                let xv = self.value(*x);
                acc(*x, adj, &mut |dx| {
                    for j in 0..dx.len() {
                        dx[j] += g[j] * sigmoid(xv[j]);
                    }
                });
            }
            Op::Sqrt(x) => {
                let out = &node.value;
                acc(*x, adj, &mut |dx| {
                    for j in 0..dx.len() {
                        dx[j] += g[j] * 0.5 / out[j];
                    }
                });
            }
            Op::Square(x) => {
                let xv = self.value(*x);
                acc(*x, adj, &mut |dx| {
                    for j in 0..dx.len() {
                        dx[j] += g[j] * 2.0 * xv[j];
                    }
                });
            }
            Op::Sum(x) => acc(*x, adj, &mut |dx| dx.iter_mut().for_each(|d| *d += g[0])),
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.node(p).value.len();
                    acc(p, adj, &mut |dp| {
                        dp.iter_mut().zip(&g[off..off + len]).for_each(|(d, v)| *d += v)
                    });
                    off += len;
                }
            }
            Op::Broadcast(x) => acc(*x, adj, &mut |dx| dx[0] += g.iter().sum::<f64>()),
            Op::Custom(inputs, op) => {
                let mut grads: Vec<Vec<f64>> =
                    inputs.iter().map(|&v| vec![0.0; self.node(v).value.len()]).collect();
                op.backward(g, &mut grads);
                for (&v, gv) in inputs.iter().zip(&grads) {
                    acc(v, adj, &mut |dv| dv.iter_mut().zip(gv).for_each(|(d, x)| *d += x));
                }
            }
        }
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

impl Segment {
    pub fn new(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        Self {
            name: name.into(),
            rows,
            cols,
        }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Named segments of a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Layout {
    pub segments: Vec<Segment>,
}

impl Layout {
    pub fn new(segments: Vec<Segment>) -> Self {
        Self { segments }
    }

    pub fn len(&self) -> usize {
        self.segments.iter().map(Segment::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Start offset of every segment.
    pub fn offsets(&self) -> Vec<usize> {
        self.segments
            .iter()
            .scan(0, |off, s| {
                let o = *off;
                *off += s.len();
                Some(o)
            })
            .collect()
    }

    /// `(offset, len)` of the named segment.
    pub fn find(&self, name: &str) -> Option<(usize, usize)> {
        let offs = self.offsets();
        self.segments
            .iter()
            .zip(offs)
            .find(|(s, _)| s.name == name)
            .map(|(s, o)| (o, s.len()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub layout: Layout,
    pub values: Vec<f64>,
}

impl ParamVector {
    pub fn new(layout: Layout, values: Vec<f64>) -> Result<Self> {
        if layout.len() != values.len() {
            return Err(Error::InvalidArgument(format!(
                "layout expects {} entries, got {}",
                layout.len(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("parameter vector has non-finite entries".into()));
        }
        Ok(Self { layout, values })
    }

    pub fn zeros(layout: Layout) -> Self {
        let n = layout.len();
        Self {
            layout,
            values: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn segment(&self, name: &str) -> Option<&[f64]> {
        self.layout.find(name).map(|(o, l)| &self.values[o..o + l])
    }

    pub fn with_values(&self, values: Vec<f64>) -> Self {
        Self {
            layout: self.layout.clone(),
            values,
        }
    }

    /// Records one differentiable leaf per segment.
    pub fn record(&self, tape: &mut Tape) -> Vec<Var> {
        let mut off = 0;
        self.layout
            .segments
            .iter()
            .map(|s| {
                let v = tape.input(&self.values[off..off + s.len()], s.rows, s.cols);
                off += s.len();
                v
            })
            .collect()
    }

    pub fn norm_inf(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }
}

/// Value and reverse-accumulated gradient of a scalar program.
pub fn grad<F>(loss_fn: F, at: &ParamVector) -> Result<(f64, ParamVector)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let leaves = at.record(&mut tape);
    let out = loss_fn(&mut tape, &leaves)?;
    tape.check_finite()?;
    let value = tape.scalar(out);
    let grads = tape.backward(out);
    let flat = leaves.iter().flat_map(|&v| grads.get(v)).collect();
    Ok((value, at.with_values(flat)))
}

/// Forward value only.
pub fn value<F>(loss_fn: &F, at: &ParamVector) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let leaves = at.record(&mut tape);
    let out = loss_fn(&mut tape, &leaves)?;
    tape.check_finite()?;
    Ok(tape.scalar(out))
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub analytic: ParamVector,
    /// Finite-difference gradient; `NaN` on coordinates that were not probed.
    pub fd: ParamVector,
    pub checked: Vec<usize>,
    pub max_rel_error: f64,
}

/// Relative error with the `1e-12` denominator guard.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

/// Compares the tape gradient with fourth-order central differences on
/// `n_coords` randomly chosen coordinates (all of them if `n_coords` is 0 or
/// exceeds the length). The step on coordinate `i` is `h·max(1, |x_i|)`.
pub fn fd_check<F>(loss_fn: F, at: &ParamVector, h: f64, n_coords: usize, seed: u64) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (_, analytic) = grad(&loss_fn, at)?;
    let n = at.len();
    let checked: Vec<usize> = if n_coords == 0 || n_coords >= n {
        (0..n).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = sample(&mut rng, n, n_coords).into_vec();
        idx.sort_unstable();
        idx
    };
    let mut fd = vec![f64::NAN; n];
    let mut max_rel_error: f64 = 0.0;
    for &i in &checked {
        let step = h * at.values[i].abs().max(1.0);
        let eval = |delta: f64| {
            let mut v = at.values.clone();
            v[i] += delta;
            value(&loss_fn, &at.with_values(v))
        };
        let d = (-eval(2.0 * step)? + 8.0 * eval(step)? - 8.0 * eval(-step)? + eval(-2.0 * step)?) / (12.0 * step);
        fd[i] = d;
        max_rel_error = max_rel_error.max(rel_error(analytic.values[i], d));
    }
    Ok(GradReport {
        fd: at.with_values(fd),
        analytic,
        checked,
        max_rel_error,
    })
}

/// Hessian-vector product by symmetric differences of gradients with step
/// `1e-4·(1 + ‖at‖∞)`.
pub fn hvp<F>(loss_fn: F, at: &ParamVector, dir: &ParamVector) -> Result<ParamVector>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    hvp_with_step(loss_fn, at, dir, 1e-4 * (1.0 + at.norm_inf()))
}

pub fn hvp_with_step<F>(loss_fn: F, at: &ParamVector, dir: &ParamVector, h: f64) -> Result<ParamVector>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if dir.layout != at.layout {
        return Err(Error::InvalidArgument("direction layout differs from point layout".into()));
    }
    let shifted = |s: f64| at.with_values(at.values.iter().zip(&dir.values).map(|(a, d)| a + s * d).collect());
    let (_, gp) = grad(&loss_fn, &shifted(h))?;
    let (_, gm) = grad(&loss_fn, &shifted(-h))?;
    Ok(at.with_values(
        gp.values.iter().zip(&gm.values).map(|(p, m)| (p - m) / (2.0 * h)).collect(),
    ))
}
