//! Tape-based reverse-mode differentiation.
//!
//! Every primitive appends one node to a [`Tape`]; parents always sit at
//! lower indices, so walking the node list from the end visits each node
//! exactly once in reverse topological order. Values are stored on the
//! tape and never mutated after they are recorded.
//!
//! ```
//! use mixpro::autodiff::Tape;
//! use mixpro::tensor::Tensor;
//!
//! let mut tape = Tape::new();
//! let w = tape.param(Tensor::vector(vec![3.0]).unwrap());
//! let sq = tape.mul(w, w).unwrap();
//! let loss = tape.sum(sq).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.wrt(w).data(), &[6.0]);
//! ```

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{matmul_raw, transpose_raw, Tensor};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Mix(Var, Var, f64),
    PadRows(Var),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    MaskedSoftmaxRows(Var),
    LayerNormRows { x: Var, gamma: Var, beta: Var, inv_std: Vec<f64>, normed: Vec<f64> },
    Gelu(Var),
    Sum(Var),
    SoftCrossEntropy { logits: Var, target: Vec<f64>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Recording of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<Var>,
}

/// Gradients of one scalar with respect to every node of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<Var>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` does not influence the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    /// Gradients for every registered parameter, in registration order.
    pub fn params(&self) -> Vec<Tensor> {
        self.params.iter().map(|&p| self.wrt(p)).collect()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a constant input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Records a trainable input whose gradient [`Gradients::params`] reports.
    pub fn param(&mut self, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf);
        self.params.push(v);
        v
    }

    pub fn params(&self) -> &[Var] {
        &self.params
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn checked(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, name: &str) -> Result<Var> {
        let value = Tensor::new(shape, data).map_err(|e| match e {
            Error::NonFinite(m) => Error::NonFinite(format!("{name}: {m}")),
            other => other,
        })?;
        Ok(self.push(value, op))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let (shape, data) = (out.shape().to_vec(), out.into_data());
        self.checked(shape, data, Op::MatMul(a, b), "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transpose()?;
        Ok(self.push(t, Op::Transpose(a)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let (shape, data) = (out.shape().to_vec(), out.into_data());
        self.checked(shape, data, Op::Add(a, b), "add")
    }

    /// `[n×m] + [m]`, adding the vector to every row.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (n, m) = self.value(a).dims2()?;
        let r = self.value(row);
        if r.shape() != [m] {
            return Err(Error::shape(format!("add_row: [{n}, {m}] + {:?}", r.shape())));
        }
        let rv = r.data();
        let data = self.value(a).data().chunks(m).flat_map(|chunk| chunk.iter().zip(rv).map(|(x, b)| x + b)).collect();
        self.checked(vec![n, m], data, Op::AddRow(a, row), "add_row")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        x.same_shape(y, "mul")?;
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        self.checked(x.shape().to_vec(), data, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let x = self.value(a);
        let data = x.data().iter().map(|v| c * v).collect();
        self.checked(x.shape().to_vec(), data, Op::Scale(a, c), "scale")
    }

    /// Convex mix `lambda * a + (1 - lambda) * b`; `lambda` is not differentiated.
    pub fn mix(&mut self, a: Var, b: Var, lambda: f64) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        x.same_shape(y, "mix")?;
        let data = mix_values(x.data(), y.data(), lambda);
        self.checked(x.shape().to_vec(), data, Op::Mix(a, b, lambda), "mix")
    }

    /// Appends zero rows until the matrix has `rows` rows.
    pub fn pad_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        let (n, m) = self.value(a).dims2()?;
        if rows < n {
            return Err(Error::shape(format!("pad_rows: cannot shrink {n} rows to {rows}")));
        }
        let mut data = self.value(a).data().to_vec();
        data.resize(rows * m, 0.0);
        Ok(self.push(Tensor::from_parts_unchecked(vec![rows, m], data), Op::PadRows(a)))
    }

    /// Rows of `table` at `ids`, as a `[ids.len() × m]` matrix.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (n, m) = t.dims2()?;
        let mut data = Vec::with_capacity(ids.len() * m);
        for &id in ids {
            if id >= n {
                return Err(Error::contract(format!("gather_rows: id {id} >= {n} rows")));
            }
            data.extend_from_slice(&t.data()[id * m..(id + 1) * m]);
        }
        Ok(self.push(Tensor::from_parts_unchecked(vec![ids.len(), m], data), Op::GatherRows(table, ids.to_vec())))
    }

    /// Row `i` of a matrix as a 1-D vector.
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        let g = self.gather_rows(a, &[i])?;
        let m = self.value(g).shape()[1];
        self.reshape(g, vec![m])
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        Ok(self.push(t, Op::Reshape(a)))
    }

    /// Columns `start..start + width` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let (n, m) = self.value(a).dims2()?;
        if start + width > m {
            return Err(Error::shape(format!("slice_cols {start}+{width} of {m}")));
        }
        let data = self.value(a).data().chunks(m).flat_map(|r| r[start..start + width].iter().copied()).collect();
        Ok(self.push(Tensor::from_parts_unchecked(vec![n, width], data), Op::SliceCols(a, start)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::contract("concat_cols of nothing"))?;
        let n = self.value(*first).dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != n {
                return Err(Error::shape(format!("concat_cols: {r} rows vs {n}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push(Tensor::from_parts_unchecked(vec![n, total], data), Op::ConcatCols(parts.to_vec())))
    }

    /// Row-wise softmax over the entries where `allowed` is true; disallowed
    /// entries get probability exactly zero. A row with nothing allowed is
    /// all zeros.
    pub fn masked_softmax_rows(&mut self, a: Var, allowed: &Arc<Vec<bool>>) -> Result<Var> {
        let (n, m) = self.value(a).dims2()?;
        if allowed.len() != n * m {
            return Err(Error::shape(format!("softmax mask has {} entries for [{n}, {m}]", allowed.len())));
        }
        let x = self.value(a).data();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &x[i * m..(i + 1) * m];
            let ok = &allowed[i * m..(i + 1) * m];
            let max = row.iter().zip(ok).filter(|(_, &k)| k).map(|(v, _)| *v).fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut total = 0.0;
            for j in 0..m {
                if ok[j] {
                    let e = (row[j] - max).exp();
                    out[i * m + j] = e;
                    total += e;
                }
            }
            for o in &mut out[i * m..(i + 1) * m] {
                *o /= total;
            }
        }
        self.checked(vec![n, m], out, Op::MaskedSoftmaxRows(a), "softmax")
    }

    /// Per-row layer normalisation with learned gain and bias (both `[m]`).
    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (n, m) = self.value(x).dims2()?;
        if self.value(gamma).shape() != [m] || self.value(beta).shape() != [m] {
            return Err(Error::shape("layer_norm gain/bias width"));
        }
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut normed = vec![0.0; n * m];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &xv[i * m..(i + 1) * m];
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..m {
                let h = (row[j] - mean) * is;
                normed[i * m + j] = h;
                out[i * m + j] = h * g[j] + b[j];
            }
        }
        self.checked(vec![n, m], out, Op::LayerNormRows { x, gamma, beta, inv_std, normed }, "layer_norm")
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let data = x.data().iter().map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_K * v * v * v)).tanh())).collect();
        self.checked(x.shape().to_vec(), data, Op::Gelu(a), "gelu")
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.checked(Vec::new(), vec![s], Op::Sum(a), "sum")
    }

    /// `-sum_c target[c] * log softmax(logits)[c]` for 1-D logits.
    pub fn soft_cross_entropy(&mut self, logits: Var, target: &[f64]) -> Result<Var> {
        let z = self.value(logits);
        if z.shape() != [target.len()] {
            return Err(Error::shape(format!("cross-entropy logits {:?} vs target len {}", z.shape(), target.len())));
        }
        let (log_probs, probs) = log_softmax(z.data());
        let loss = -target.iter().zip(&log_probs).map(|(y, lp)| y * lp).sum::<f64>();
        self.checked(
            Vec::new(),
            vec![loss],
            Op::SoftCrossEntropy { logits, target: target.to_vec(), probs },
            "cross_entropy",
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::contract(format!("backward needs a scalar loss, got shape {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|d| Tensor::from_parts_unchecked(n.value.shape().to_vec(), d)))
            .collect();
        Ok(Gradients { grads, shapes, params: self.params.clone() })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let shape = |v: Var| self.nodes[v.0].value.shape();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (n, k) = (shape(*a)[0], shape(*a)[1]);
                let m = shape(*b)[1];
                // dA = G B^T, dB = A^T G
                let bt = transpose_raw(val(*b), k, m);
                accumulate(grads, *a, &matmul_raw(g, &bt, n, m, k));
                let at = transpose_raw(val(*a), n, k);
                accumulate(grads, *b, &matmul_raw(&at, g, k, n, m));
            }
            Op::Transpose(a) => {
                let (r, c) = (shape(*a)[0], shape(*a)[1]);
                accumulate(grads, *a, &transpose_raw(g, c, r));
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g);
                accumulate(grads, *b, g);
            }
            Op::AddRow(a, row) => {
                accumulate(grads, *a, g);
                let m = shape(*row)[0];
                let mut gr = vec![0.0; m];
                for chunk in g.chunks(m) {
                    for (acc, v) in gr.iter_mut().zip(chunk) {
                        *acc += v;
                    }
                }
                accumulate(grads, *row, &gr);
            }
            Op::Mul(a, b) => {
                let ga: Vec<f64> = g.iter().zip(val(*b)).map(|(g, y)| g * y).collect();
                let gb: Vec<f64> = g.iter().zip(val(*a)).map(|(g, x)| g * x).collect();
                accumulate(grads, *a, &ga);
                accumulate(grads, *b, &gb);
            }
            Op::Scale(a, c) => {
                let ga: Vec<f64> = g.iter().map(|v| c * v).collect();
                accumulate(grads, *a, &ga);
            }
            Op::Mix(a, b, lambda) => {
                let ga: Vec<f64> = g.iter().map(|v| lambda * v).collect();
                let gb: Vec<f64> = g.iter().map(|v| (1.0 - lambda) * v).collect();
                accumulate(grads, *a, &ga);
                accumulate(grads, *b, &gb);
            }
            Op::PadRows(a) => {
                let n = val(*a).len();
                accumulate(grads, *a, &g[..n]);
            }
            Op::GatherRows(table, ids) => {
                let (n, m) = (shape(*table)[0], shape(*table)[1]);
                let mut gt = vec![0.0; n * m];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..m {
                        gt[id * m + j] += g[r * m + j];
                    }
                }
                accumulate(grads, *table, &gt);
            }
            Op::Reshape(a) => accumulate(grads, *a, g),
            Op::SliceCols(a, start) => {
                let (n, m) = (shape(*a)[0], shape(*a)[1]);
                let w = node.value.shape()[1];
                let mut ga = vec![0.0; n * m];
                for i in 0..n {
                    ga[i * m + start..i * m + start + w].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                accumulate(grads, *a, &ga);
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape()[1];
                let n = node.value.shape()[0];
                let mut offset = 0;
                for &p in parts {
                    let w = shape(p)[1];
                    let mut gp = Vec::with_capacity(n * w);
                    for i in 0..n {
                        gp.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                    }
                    accumulate(grads, p, &gp);
                    offset += w;
                }
            }
            Op::MaskedSoftmaxRows(a) => {
                let m = node.value.shape()[1];
                let y = node.value.data();
                let mut ga = vec![0.0; y.len()];
                for ((gr, yr), out) in g.chunks(m).zip(y.chunks(m)).zip(ga.chunks_mut(m)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..m {
                        out[j] = yr[j] * (gr[j] - dot);
                    }
                }
                accumulate(grads, *a, &ga);
            }
            Op::LayerNormRows { x, gamma, beta, inv_std, normed } => {
                let m = shape(*gamma)[0];
                let gam = val(*gamma);
                let mut gx = vec![0.0; normed.len()];
                let mut gg = vec![0.0; m];
                let mut gb = vec![0.0; m];
                for (i, &is) in inv_std.iter().enumerate() {
                    let gr = &g[i * m..(i + 1) * m];
                    let hr = &normed[i * m..(i + 1) * m];
                    let mut mean_gh = 0.0;
                    let mut mean_ghh = 0.0;
                    for j in 0..m {
                        gg[j] += gr[j] * hr[j];
                        gb[j] += gr[j];
                        let gh = gr[j] * gam[j];
                        mean_gh += gh;
                        mean_ghh += gh * hr[j];
                    }
                    mean_gh /= m as f64;
                    mean_ghh /= m as f64;
                    for j in 0..m {
                        gx[i * m + j] = is * (gr[j] * gam[j] - mean_gh - hr[j] * mean_ghh);
                    }
                }
                accumulate(grads, *x, &gx);
                accumulate(grads, *gamma, &gg);
                accumulate(grads, *beta, &gb);
            }
            Op::Gelu(a) => {
                let ga: Vec<f64> = val(*a)
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| {
                        let t = (GELU_C * (v + GELU_K * v * v * v)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * v * v);
                        gv * (0.5 * (1.0 + t) + 0.5 * v * dt)
                    })
                    .collect();
                accumulate(grads, *a, &ga);
            }
            Op::Sum(a) => {
                let n = val(*a).len();
                accumulate(grads, *a, &vec![g[0]; n]);
            }
            Op::SoftCrossEntropy { logits, target, probs } => {
                let mass: f64 = target.iter().sum();
                let gl: Vec<f64> = probs.iter().zip(target).map(|(p, y)| g[0] * (p * mass - y)).collect();
                accumulate(grads, *logits, &gl);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

pub(crate) fn mix_values(a: &[f64], b: &[f64], lambda: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| lambda * x + (1.0 - lambda) * y).collect()
}

/// Numerically stable `(log_softmax, softmax)` of a vector.
pub fn log_softmax(z: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    let log_probs: Vec<f64> = z.iter().map(|v| v - lse).collect();
    let probs = log_probs.iter().map(|v| v.exp()).collect();
    (log_probs, probs)
}
