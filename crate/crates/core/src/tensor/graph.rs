use super::Tensor;
use crate::error::{shape_err, Error, Result};

/// Handle to a node of a [`Graph`]. Only meaningful for the graph that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Relu(Var),
    Ln(Var),
    Exp(Var),
    Abs(Var),
    Powf(Var, f64),
    Clamp(Var, f64, f64),
    Maximum(Var, Var),
    Minimum(Var, Var),
    SinCos(Var),
    Softmax(Var, usize),
    Concat(Vec<Var>, usize),
    Reshape(Var),
    Transpose(Var),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
    },
    AddBias(Var, Var),
    Sum(Var),
    Mean(Var),
    SelectRows(Var, Vec<usize>),
    BatchedMatVec(Var, Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// Per-op saved state (layer norm keeps its per-row mean and reciprocal std).
    saved: Vec<f64>,
}

/// Append-only record of executed operations.
///
/// Nodes are stored in execution order, so every operation's inputs precede
/// it and the reverse of insertion order is a valid reverse topological order.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

/// `outer × len × inner` decomposition of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        value.check_finite(name)?;
        self.push_unchecked(value, op, requires_grad, Vec::new())
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, requires_grad: bool, saved: Vec<f64>) -> Result<Var> {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            saved,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Inserts a trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    /// Inserts a leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
            saved: Vec::new(),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.node(v).value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(shape_err(op, format!("expected rank 2, got {s:?}"))),
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(t, op, rg, name)
    }

    fn unary(&mut self, name: &'static str, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&x| f(x)).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(&[a]);
        self.push(t, op, rg, name)
    }

    /// Rank-2 matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(shape_err("matmul", format!("[{m}, {k}] @ [{k2}, {n}]")));
        }
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(vec![m, n], data)?, Op::MatMul(a, b), rg, "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise product. A single-element operand scales the other tensor.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.value(a).numel(), self.value(b).numel());
        if na == 1 && nb != 1 || nb == 1 && na != 1 {
            let (s, x) = if na == 1 { (a, b) } else { (b, a) };
            let sv = self.value(s).item();
            let data = self.value(x).data().iter().map(|&v| sv * v).collect();
            let t = Tensor::new(self.shape(x).to_vec(), data)?;
            let rg = self.rg(&[a, b]);
            return self.push(t, Op::Mul(a, b), rg, "mul");
        }
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("scale", a, Op::Scale(a, c), |x| c * x)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("add_scalar", a, Op::AddScalar(a), |x| x + c)
    }

    /// `c - a`, elementwise.
    pub fn rsub_scalar(&mut self, c: f64, a: Var) -> Result<Var> {
        let n = self.scale(a, -1.0)?;
        self.add_scalar(n, c)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, Op::Sigmoid(a), sigmoid)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.unary("ln", a, Op::Ln(a), f64::ln)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, Op::Exp(a), f64::exp)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary("abs", a, Op::Abs(a), f64::abs)
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Result<Var> {
        self.unary("powf", a, Op::Powf(a, p), |x| x.powf(p))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary("clamp", a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("maximum", a, b, Op::Maximum(a, b), f64::max)
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("minimum", a, b, Op::Minimum(a, b), f64::min)
    }

    /// Doubles the last axis: entry `i` becomes `sin` at `2i` and `cos` at `2i + 1`.
    pub fn sin_cos(&mut self, a: Var) -> Result<Var> {
        let mut shape = self.shape(a).to_vec();
        *shape.last_mut().expect("rank >= 1") *= 2;
        let data = self
            .value(a)
            .data()
            .iter()
            .flat_map(|&x| super::sin_cos(x))
            .collect();
        let rg = self.rg(&[a]);
        self.push(Tensor::new(shape, data)?, Op::SinCos(a), rg, "sin_cos")
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(shape_err("softmax", format!("axis {axis} for shape {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        if len == 0 {
            return Err(Error::EmptyAxis);
        }
        let x = self.value(a).data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let max = (0..len).map(|k| x[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for k in 0..len {
                    let e = (x[at(k)] - max).exp();
                    out[at(k)] = e;
                    total += e;
                }
                for k in 0..len {
                    out[at(k)] /= total;
                }
            }
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::new(shape, out)?, Op::Softmax(a, axis), rg, "softmax")
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", format!("axis {axis} for shape {base:?}")));
        }
        let mut extent = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(shape_err("concat", format!("{base:?} vs {s:?} on axis {axis}")));
            }
            extent += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = extent;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let chunk = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = self.rg(parts);
        self.push(Tensor::new(shape, out)?, Op::Concat(parts.to_vec(), axis), rg, "concat")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(&[a]);
        self.push(t, Op::Reshape(a), rg, "reshape")
    }

    /// Rank-2 transpose.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2("transpose", a)?;
        let data = transpose_raw(self.value(a).data(), r, c);
        let rg = self.rg(&[a]);
        self.push(Tensor::new(vec![c, r], data)?, Op::Transpose(a), rg, "transpose")
    }

    /// Half-open range `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(shape_err(
                "slice",
                format!("{start}..{end} on axis {axis} of {shape:?}"),
            ));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            out.extend_from_slice(&x[(o * len + start) * inner..(o * len + end) * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = end - start;
        let rg = self.rg(&[a]);
        self.push(
            Tensor::new(new_shape, out)?,
            Op::Slice { x: a, axis, start },
            rg,
            "slice",
        )
    }

    /// Normalizes each row of a `[n, d]` tensor, then applies per-column gain and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (n, d) = self.dims2("layer_norm", x)?;
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(shape_err("layer_norm", format!("gain/shift must have {d} entries")));
        }
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = vec![0.0; n * d];
        let mut saved = Vec::with_capacity(2 * n);
        for r in 0..n {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                out[r * d + j] = (row[j] - mean) * rstd * g[j] + b[j];
            }
            saved.push(mean);
            saved.push(rstd);
        }
        let t = Tensor::new(vec![n, d], out)?;
        t.check_finite("layer_norm")?;
        let rg = self.rg(&[x, gamma, beta]);
        self.push_unchecked(t, Op::LayerNorm { x, gamma, beta }, rg, saved)
    }

    /// Adds a length-`d` bias vector to every row of a `[n, d]` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, d) = self.dims2("add_bias", x)?;
        if self.value(bias).numel() != d {
            return Err(shape_err(
                "add_bias",
                format!("bias of {} entries for width {d}", self.value(bias).numel()),
            ));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for r in 0..n {
            for (o, bv) in out[r * d..(r + 1) * d].iter_mut().zip(b) {
                *o += bv;
            }
        }
        let rg = self.rg(&[x, bias]);
        self.push(Tensor::new(vec![n, d], out)?, Op::AddBias(x, bias), rg, "add_bias")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg, "mean")
    }

    /// Gathers rows of a rank-2 tensor; indices may repeat.
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (n, d) = self.dims2("select_rows", a)?;
        if rows.is_empty() || rows.iter().any(|&r| r >= n) {
            return Err(shape_err("select_rows", format!("indices {rows:?} for {n} rows")));
        }
        let x = self.value(a).data();
        let out: Vec<f64> = rows.iter().flat_map(|&r| x[r * d..(r + 1) * d].iter().copied()).collect();
        let rg = self.rg(&[a]);
        self.push(
            Tensor::new(vec![rows.len(), d], out)?,
            Op::SelectRows(a, rows.to_vec()),
            rg,
            "select_rows",
        )
    }

    /// `out[b] = mats[b] @ vecs[b]` for `mats: [B, r, c]`, `vecs: [B, c]`.
    pub fn batched_matvec(&mut self, mats: Var, vecs: Var) -> Result<Var> {
        let (bm, r, c) = match *self.shape(mats) {
            [b, r, c] => (b, r, c),
            ref s => return Err(shape_err("batched_matvec", format!("matrices {s:?}"))),
        };
        let (bv, cv) = self.dims2("batched_matvec", vecs)?;
        if bm != bv || c != cv {
            return Err(shape_err(
                "batched_matvec",
                format!("[{bm}, {r}, {c}] x [{bv}, {cv}]"),
            ));
        }
        let m = self.value(mats).data();
        let v = self.value(vecs).data();
        let mut out = vec![0.0; bm * r];
        for b in 0..bm {
            let vb = &v[b * c..(b + 1) * c];
            for i in 0..r {
                let mrow = &m[(b * r + i) * c..(b * r + i + 1) * c];
                out[b * r + i] = mrow.iter().zip(vb).map(|(x, y)| x * y).sum();
            }
        }
        let rg = self.rg(&[mats, vecs]);
        self.push(
            Tensor::new(vec![bm, r], out)?,
            Op::BatchedMatVec(mats, vecs),
            rg,
            "batched_matvec",
        )
    }

    /// Reverse pass from a scalar root. Allowed once per graph.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        if !self.value(root).is_scalar() {
            return Err(Error::NonScalarRoot(self.shape(root).to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &gy, &mut grads)?;
            grads[idx] = Some(gy);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last backward root with respect to `v`, when `v` required one.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Tensor::new(self.shape(v).to_vec(), g.clone()).ok()
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
        contrib(slot);
    }

    fn propagate(&self, idx: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let y = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if self.requires_grad(a) {
                    let bt = transpose_raw(val(b), k, n);
                    let ga = matmul_raw(gy, &bt, m, n, k);
                    self.accumulate(grads, a, |g| add_into(g, &ga));
                }
                if self.requires_grad(b) {
                    let at = transpose_raw(val(a), m, k);
                    let gb = matmul_raw(&at, gy, k, m, n);
                    self.accumulate(grads, b, |g| add_into(g, &gb));
                }
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, |g| add_into(g, gy));
                self.accumulate(grads, b, |g| add_into(g, gy));
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, |g| add_into(g, gy));
                self.accumulate(grads, b, |g| g.iter_mut().zip(gy).for_each(|(o, d)| *o -= d));
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (val(a), val(b));
                let scalar_pair = av.len() != bv.len();
                for (target, other) in [(a, bv), (b, av)] {
                    self.accumulate(grads, target, |g| {
                        if !scalar_pair {
                            for i in 0..g.len() {
                                g[i] += gy[i] * other[i];
                            }
                        } else if g.len() == 1 {
                            g[0] += gy.iter().zip(other).map(|(d, o)| d * o).sum::<f64>();
                        } else {
                            for i in 0..g.len() {
                                g[i] += gy[i] * other[0];
                            }
                        }
                    });
                }
            }
            &Op::Div(a, b) => {
                let (av, bv) = (val(a), val(b));
                self.accumulate(grads, a, |g| {
                    for i in 0..g.len() {
                        g[i] += gy[i] / bv[i];
                    }
                });
                self.accumulate(grads, b, |g| {
                    for i in 0..g.len() {
                        g[i] -= gy[i] * av[i] / (bv[i] * bv[i]);
                    }
                });
            }
            &Op::Scale(a, c) => self.accumulate(grads, a, |g| {
                g.iter_mut().zip(gy).for_each(|(o, d)| *o += c * d)
            }),
            &Op::AddScalar(a) => self.accumulate(grads, a, |g| add_into(g, gy)),
            &Op::Sigmoid(a) => self.accumulate(grads, a, |g| {
                for i in 0..g.len() {
                    g[i] += gy[i] * y[i] * (1.0 - y[i]);
                }
            }),
            &Op::Relu(a) => {
                let x = val(a);
                self.accumulate(grads, a, |g| {
                    for i in 0..g.len() {
                        if x[i] > 0.0 {
                            g[i] += gy[i];
                        }
                    }
                })
            }
            &Op::Ln(a) => {
                let x = val(a);
                self.accumulate(grads, a, |g| {
                    for i in 0..g.len() {
                        g[i] += gy[i] / x[i];
                    }
                })
            }
            &Op::Exp(a) => self.accumulate(grads, a, |g| {
                for i in 0..g.len() {
                    g[i] += gy[i] * y[i];
                }
            }),
            &Op::Abs(a) => {
                let x = val(a);
                self.accumulate(grads, a, |g| {
                    for i in 0..g.len() {
                        g[i] += gy[i] * x[i].signum() * f64::from(x[i] != 0.0);
                    }
                })
            }
            &Op::Powf(a, p) => {
                let x = val(a);
                self.accumulate(grads, a, |g| {
                    for i in 0..g.len() {
                        if p != 0.0 {
                            g[i] += gy[i] * p * x[i].powf(p - 1.0);
                        }
                    }
                })
            }
            &Op::Clamp(a, lo, hi) => {
                let x = val(a);
                self.accumulate(grads, a, |g| {
                    for i in 0..g.len() {
                        if x[i] >= lo && x[i] <= hi {
                            g[i] += gy[i];
                        }
                    }
                })
            }
            &Op::Maximum(a, b) | &Op::Minimum(a, b) => {
                let take_max = matches!(node.op, Op::Maximum(..));
                let (av, bv) = (val(a), val(b));
                let picks_a = |i: usize| if take_max { av[i] >= bv[i] } else { av[i] <= bv[i] };
                self.accumulate(grads, a, |g| {
                    for i in 0..g.len() {
                        if picks_a(i) {
                            g[i] += gy[i];
                        }
                    }
                });
                self.accumulate(grads, b, |g| {
                    for i in 0..g.len() {
                        if !picks_a(i) {
                            g[i] += gy[i];
                        }
                    }
                });
            }
            &Op::SinCos(a) => self.accumulate(grads, a, |g| {
                for i in 0..g.len() {
                    // d sin = cos, d cos = -sin
                    g[i] += gy[2 * i] * y[2 * i + 1] - gy[2 * i + 1] * y[2 * i];
                }
            }),
            &Op::Softmax(a, axis) => {
                let (outer, len, inner) = split_axis(node.value.shape(), axis);
                self.accumulate(grads, a, |g| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| (o * len + k) * inner + i;
                            let dot: f64 = (0..len).map(|k| gy[at(k)] * y[at(k)]).sum();
                            for k in 0..len {
                                g[at(k)] += y[at(k)] * (gy[at(k)] - dot);
                            }
                        }
                    }
                })
            }
            Op::Concat(parts, axis) => {
                let (outer, _, inner) = split_axis(node.value.shape(), *axis);
                let total = node.value.shape()[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let chunk = self.shape(p)[*axis] * inner;
                    self.accumulate(grads, p, |g| {
                        for o in 0..outer {
                            let src = &gy[o * total + offset..o * total + offset + chunk];
                            add_into(&mut g[o * chunk..(o + 1) * chunk], src);
                        }
                    });
                    offset += chunk;
                }
            }
            &Op::Reshape(a) => self.accumulate(grads, a, |g| add_into(g, gy)),
            &Op::Transpose(a) => {
                let (r, c) = (self.shape(a)[0], self.shape(a)[1]);
                let gt = transpose_raw(gy, c, r);
                self.accumulate(grads, a, |g| add_into(g, &gt));
            }
            &Op::Slice { x, axis, start } => {
                let (outer, len, inner) = split_axis(self.shape(x), axis);
                let width = node.value.shape()[axis] * inner;
                self.accumulate(grads, x, |g| {
                    for o in 0..outer {
                        let dst = (o * len + start) * inner;
                        add_into(&mut g[dst..dst + width], &gy[o * width..(o + 1) * width]);
                    }
                });
            }
            &Op::LayerNorm { x, gamma, beta } => {
                let (n, d) = (self.shape(x)[0], self.shape(x)[1]);
                let xv = val(x);
                let gv = val(gamma);
                let xhat = |r: usize, j: usize| (xv[r * d + j] - node.saved[2 * r]) * node.saved[2 * r + 1];
                self.accumulate(grads, gamma, |g| {
                    for r in 0..n {
                        for j in 0..d {
                            g[j] += gy[r * d + j] * xhat(r, j);
                        }
                    }
                });
                self.accumulate(grads, beta, |g| {
                    for r in 0..n {
                        add_into(g, &gy[r * d..(r + 1) * d]);
                    }
                });
                self.accumulate(grads, x, |g| {
                    for r in 0..n {
                        let rstd = node.saved[2 * r + 1];
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for j in 0..d {
                            let dh = gy[r * d + j] * gv[j];
                            sum_dh += dh;
                            sum_dh_h += dh * xhat(r, j);
                        }
                        let df = d as f64;
                        for j in 0..d {
                            let dh = gy[r * d + j] * gv[j];
                            g[r * d + j] += rstd / df * (df * dh - sum_dh - xhat(r, j) * sum_dh_h);
                        }
                    }
                });
            }
            &Op::AddBias(x, bias) => {
                let d = self.value(bias).numel();
                self.accumulate(grads, x, |g| add_into(g, gy));
                self.accumulate(grads, bias, |g| {
                    for row in gy.chunks(d) {
                        add_into(g, row);
                    }
                });
            }
            &Op::Sum(a) => self.accumulate(grads, a, |g| g.iter_mut().for_each(|o| *o += gy[0])),
            &Op::Mean(a) => {
                let n = self.value(a).numel() as f64;
                self.accumulate(grads, a, |g| g.iter_mut().for_each(|o| *o += gy[0] / n))
            }
            Op::SelectRows(a, rows) => {
                let d = self.shape(*a)[1];
                self.accumulate(grads, *a, |g| {
                    for (k, &r) in rows.iter().enumerate() {
                        add_into(&mut g[r * d..(r + 1) * d], &gy[k * d..(k + 1) * d]);
                    }
                });
            }
            &Op::BatchedMatVec(mats, vecs) => {
                let s = self.shape(mats);
                let (bn, r, c) = (s[0], s[1], s[2]);
                let (m, v) = (val(mats), val(vecs));
                self.accumulate(grads, mats, |g| {
                    for b in 0..bn {
                        for i in 0..r {
                            let d = gy[b * r + i];
                            let base = (b * r + i) * c;
                            for j in 0..c {
                                g[base + j] += d * v[b * c + j];
                            }
                        }
                    }
                });
                self.accumulate(grads, vecs, |g| {
                    for b in 0..bn {
                        for i in 0..r {
                            let d = gy[b * r + i];
                            let base = (b * r + i) * c;
                            for j in 0..c {
                                g[b * c + j] += d * m[base + j];
                            }
                        }
                    }
                });
            }
        }
        Ok(())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
