//! Reverse-mode automatic differentiation on a linear operation tape.
//!
//! Every forward operation appends a node holding its output value and a
//! backward rule. Nodes are in topological order by construction, so one
//! reverse sweep computes vector-Jacobian products for the whole graph.
//! `backward` borrows the tape immutably and returns a fresh [`Gradients`]
//! buffer, so several backward passes (one per attribution step, say) can
//! reuse a single forward pass.
//!
//! All reductions run in a fixed order; identical inputs give bit-identical
//! outputs.

use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    /// [rows, cols] + broadcast [cols]
    AddRow { matrix: Var, row: Var, rows: usize, cols: usize },
    /// [m, k] @ [k, n]
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Transpose { a: Var, rows: usize, cols: usize },
    /// Contiguous row block of a [rows, cols] matrix.
    RowSlice { a: Var, start: usize, len: usize, cols: usize },
    /// Contiguous column block of a [rows, cols] matrix.
    ColSlice { a: Var, start: usize, len: usize, rows: usize, cols: usize },
    /// Horizontal concatenation of same-height matrices; widths saved for backward.
    ColConcat { parts: Vec<(Var, usize)>, rows: usize },
    Softmax { a: Var, axis: usize },
    /// Row-wise softmax over the causal prefix: row r normalizes columns 0..=r.
    CausalSoftmax { a: Var, n: usize },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        rows: usize,
        cols: usize,
        // per-row stats saved at forward time
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    /// Row gather from a [vocab, dim] table; backward scatter-adds.
    EmbedLookup { table: Var, ids: Vec<usize>, dim: usize },
    /// Sum over masked rows of -log softmax(logits[row])[target[row]].
    CrossEntropySum {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        rows: usize,
        cols: usize,
    },
}

struct Node {
    op: Op,
    value: Vec<f64>,
    shape: Vec<usize>,
    /// True when a requires-grad leaf is reachable below this node.
    needs_grad: bool,
}

/// Per-node gradient buffers produced by one backward sweep.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the swept loss w.r.t. `v`, if any flowed there.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Copy the gradient for `v` into `tensor.grad`, accumulating if one is
    /// already present. A missing gradient writes zeros.
    pub fn write_to(&self, v: Var, tensor: &mut Tensor) -> Result<()> {
        let n = tensor.numel();
        let mut acc = match tensor.grad() {
            Some(g) => g.to_vec(),
            None => vec![0.0; n],
        };
        if let Some(g) = self.get(v) {
            if g.len() != n {
                return Err(Error::Shape(format!(
                    "gradient length {} does not match tensor length {n}",
                    g.len()
                )));
            }
            for (a, gi) in acc.iter_mut().zip(g) {
                *a += gi;
            }
        }
        tensor.set_grad(acc)
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar_value(&self, v: Var) -> Result<f64> {
        let node = &self.nodes[v.0];
        if node.value.len() != 1 {
            return Err(Error::Shape(format!(
                "expected scalar, got shape {:?}",
                node.shape
            )));
        }
        Ok(node.value[0])
    }

    fn push(&mut self, op: Op, value: Vec<f64>, shape: Vec<usize>, needs_grad: bool) -> Var {
        self.nodes.push(Node { op, value, shape, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ── Leaves ───────────────────────────────────────────────────────

    /// Record raw data as a leaf.
    pub fn input(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(self.push(Op::Leaf, data, shape, requires_grad))
    }

    /// Record a tensor's data as a leaf; `requires_grad` follows the tensor.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(Op::Leaf, t.data().to_vec(), t.shape().to_vec(), t.requires_grad())
    }

    /// Leaf that never receives gradient regardless of the tensor flag.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(Op::Leaf, t.data().to_vec(), t.shape().to_vec(), false)
    }

    // ── Elementwise and reductions ───────────────────────────────────

    fn check_same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::Shape(format!(
                "{op}: shape {:?} vs {:?}",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b, "add")?;
        let value: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a, b), value, shape, needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b, "sub")?;
        let value: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Sub(a, b), value, shape, needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b, "mul")?;
        let value: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul(a, b), value, shape, needs))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let value: Vec<f64> = self.nodes[a.0].value.iter().map(|x| x * c).collect();
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.needs(a);
        Ok(self.push(Op::Scale(a, c), value, shape, needs))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total: f64 = self.nodes[a.0].value.iter().sum();
        let needs = self.needs(a);
        Ok(self.push(Op::Sum(a), vec![total], vec![1], needs))
    }

    pub fn add_row(&mut self, matrix: Var, row: Var) -> Result<Var> {
        let (rows, cols) = self.as_2d(matrix, "add_row")?;
        let rlen = self.nodes[row.0].value.len();
        if rlen != cols {
            return Err(Error::Shape(format!(
                "add_row: matrix has {cols} columns, row has {rlen}"
            )));
        }
        let mut value = self.nodes[matrix.0].value.clone();
        let rowv = &self.nodes[row.0].value;
        for r in 0..rows {
            for c in 0..cols {
                value[r * cols + c] += rowv[c];
            }
        }
        let needs = self.needs(matrix) || self.needs(row);
        Ok(self.push(Op::AddRow { matrix, row, rows, cols }, value, vec![rows, cols], needs))
    }

    // ── Linear algebra ───────────────────────────────────────────────

    fn as_2d(&self, v: Var, op: &str) -> Result<(usize, usize)> {
        let s = &self.nodes[v.0].shape;
        if s.len() != 2 {
            return Err(Error::Shape(format!("{op}: expected 2-d tensor, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.as_2d(a, "matmul")?;
        let (k2, n) = self.as_2d(b, "matmul")?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul: inner dims {k} vs {k2} do not agree"
            )));
        }
        let value = matmul_kernel(&self.nodes[a.0].value, &self.nodes[b.0].value, m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMul { a, b, m, k, n }, value, vec![m, n], needs))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.as_2d(a, "transpose")?;
        let value = transpose_kernel(&self.nodes[a.0].value, rows, cols);
        let needs = self.needs(a);
        Ok(self.push(Op::Transpose { a, rows, cols }, value, vec![cols, rows], needs))
    }

    pub fn row_slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.as_2d(a, "row_slice")?;
        if start + len > rows {
            return Err(Error::Index(format!(
                "row_slice: rows {start}..{} out of 0..{rows}",
                start + len
            )));
        }
        let value = self.nodes[a.0].value[start * cols..(start + len) * cols].to_vec();
        let needs = self.needs(a);
        Ok(self.push(Op::RowSlice { a, start, len, cols }, value, vec![len, cols], needs))
    }

    pub fn col_slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.as_2d(a, "col_slice")?;
        if start + len > cols {
            return Err(Error::Index(format!(
                "col_slice: cols {start}..{} out of 0..{cols}",
                start + len
            )));
        }
        let src = &self.nodes[a.0].value;
        let mut value = Vec::with_capacity(rows * len);
        for r in 0..rows {
            value.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let needs = self.needs(a);
        Ok(self.push(Op::ColSlice { a, start, len, rows, cols }, value, vec![rows, len], needs))
    }

    pub fn col_concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("col_concat: no parts".into()));
        }
        let (rows, _) = self.as_2d(parts[0], "col_concat")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.as_2d(p, "col_concat")?;
            if r != rows {
                return Err(Error::Shape(format!(
                    "col_concat: row counts differ ({rows} vs {r})"
                )));
            }
            widths.push((p, c));
        }
        let total: usize = widths.iter().map(|(_, c)| c).sum();
        let mut value = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &(p, c) in &widths {
                let src = &self.nodes[p.0].value;
                value.extend_from_slice(&src[r * c..(r + 1) * c]);
            }
        }
        let needs = widths.iter().any(|&(p, _)| self.needs(p));
        Ok(self.push(Op::ColConcat { parts: widths, rows }, value, vec![rows, total], needs))
    }

    // ── Nonlinearities ───────────────────────────────────────────────

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.nodes[a.0].shape.clone();
        if axis >= shape.len() {
            return Err(Error::Index(format!(
                "softmax: axis {axis} out of range for shape {shape:?}"
            )));
        }
        if self.nodes[a.0].value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericDomain("softmax: non-finite input".into()));
        }
        let value = softmax_kernel(&self.nodes[a.0].value, &shape, axis);
        let needs = self.needs(a);
        Ok(self.push(Op::Softmax { a, axis }, value, shape, needs))
    }

    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.as_2d(a, "causal_softmax")?;
        if rows != cols {
            return Err(Error::Shape(format!(
                "causal_softmax: expected square score matrix, got [{rows}, {cols}]"
            )));
        }
        if self.nodes[a.0].value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericDomain("causal_softmax: non-finite input".into()));
        }
        let x = &self.nodes[a.0].value;
        let mut value = vec![0.0; rows * cols];
        for r in 0..rows {
            let prefix = &x[r * cols..r * cols + r + 1];
            let m = prefix.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (c, &v) in prefix.iter().enumerate() {
                let e = (v - m).exp();
                value[r * cols + c] = e;
                denom += e;
            }
            for c in 0..=r {
                value[r * cols + c] /= denom;
            }
        }
        let needs = self.needs(a);
        Ok(self.push(Op::CausalSoftmax { a, n: rows }, value, vec![rows, cols], needs))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (rows, cols) = self.as_2d(x, "layer_norm")?;
        if self.nodes[gamma.0].value.len() != cols || self.nodes[beta.0].value.len() != cols {
            return Err(Error::Shape(format!(
                "layer_norm: gamma/beta must have length {cols}"
            )));
        }
        const EPS: f64 = 1e-5;
        let xv = &self.nodes[x.0].value;
        let g = &self.nodes[gamma.0].value;
        let b = &self.nodes[beta.0].value;
        let mut value = vec![0.0; rows * cols];
        let mut mean = vec![0.0; rows];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mu: f64 = row.iter().sum::<f64>() / cols as f64;
            let var: f64 = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + EPS).sqrt();
            mean[r] = mu;
            inv_std[r] = inv;
            for c in 0..cols {
                value[r * cols + c] = (row[c] - mu) * inv * g[c] + b[c];
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Op::LayerNorm { x, gamma, beta, rows, cols, mean, inv_std },
            value,
            vec![rows, cols],
            needs,
        ))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let value: Vec<f64> = self.nodes[a.0].value.iter().map(|&x| gelu(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.needs(a);
        Ok(self.push(Op::Gelu(a), value, shape, needs))
    }

    // ── Lookup and loss ──────────────────────────────────────────────

    pub fn embed_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, dim) = self.as_2d(table, "embed_lookup")?;
        for &id in ids {
            if id >= vocab {
                return Err(Error::Index(format!(
                    "embed_lookup: token id {id} out of vocab {vocab}"
                )));
            }
        }
        let src = &self.nodes[table.0].value;
        let mut value = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            value.extend_from_slice(&src[id * dim..(id + 1) * dim]);
        }
        let needs = self.needs(table);
        Ok(self.push(
            Op::EmbedLookup { table, ids: ids.to_vec(), dim },
            value,
            vec![ids.len(), dim],
            needs,
        ))
    }

    /// Masked sum of per-row cross-entropies: Σ −log softmax(logits[r])[targets[r]]
    /// over rows with `mask[r]` set.
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (rows, cols) = self.as_2d(logits, "cross_entropy_sum")?;
        if targets.len() != rows || mask.len() != rows {
            return Err(Error::Shape(format!(
                "cross_entropy_sum: {rows} logit rows, {} targets, {} mask entries",
                targets.len(),
                mask.len()
            )));
        }
        for (r, &t) in targets.iter().enumerate() {
            if mask[r] && t >= cols {
                return Err(Error::Index(format!(
                    "cross_entropy_sum: target {t} out of range {cols} at row {r}"
                )));
            }
        }
        let x = &self.nodes[logits.0].value;
        let mut total = 0.0;
        for r in 0..rows {
            if !mask[r] {
                continue;
            }
            let row = &x[r * cols..(r + 1) * cols];
            total += log_sum_exp(row) - row[targets[r]];
        }
        let needs = self.needs(logits);
        Ok(self.push(
            Op::CrossEntropySum {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                rows,
                cols,
            },
            vec![total],
            vec![1],
            needs,
        ))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients accumulate additively
    /// across fan-out.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let node = &self.nodes[loss.0];
        if node.value.len() != 1 {
            return Err(Error::Shape(format!(
                "backward: loss must be scalar, got shape {:?}",
                node.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad && i != loss.0 {
                continue;
            }
            let Some(g) = grads[i].clone() else { continue };
            self.backward_node(i, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, update: &[f64]) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, u) in existing.iter_mut().zip(update) {
                    *e += u;
                }
            }
            None => grads[v.0] = Some(update.to_vec()),
        }
    }

    fn backward_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g);
                self.accumulate(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                self.accumulate(grads, *b, &neg);
            }
            Op::Mul(a, b) => {
                let da: Vec<f64> = g.iter().zip(&self.nodes[b.0].value).map(|(gi, bv)| gi * bv).collect();
                self.accumulate(grads, *a, &da);
                let db: Vec<f64> = g.iter().zip(&self.nodes[a.0].value).map(|(gi, av)| gi * av).collect();
                self.accumulate(grads, *b, &db);
            }
            Op::Scale(a, c) => {
                let da: Vec<f64> = g.iter().map(|gi| gi * c).collect();
                self.accumulate(grads, *a, &da);
            }
            Op::Sum(a) => {
                let da = vec![g[0]; self.nodes[a.0].value.len()];
                self.accumulate(grads, *a, &da);
            }
            Op::AddRow { matrix, row, rows, cols } => {
                self.accumulate(grads, *matrix, g);
                let mut drow = vec![0.0; *cols];
                for r in 0..*rows {
                    for c in 0..*cols {
                        drow[c] += g[r * cols + c];
                    }
                }
                self.accumulate(grads, *row, &drow);
            }
            Op::MatMul { a, b, m, k, n } => {
                // dA = g @ Bᵀ ; dB = Aᵀ @ g
                let (m, k, n) = (*m, *k, *n);
                let bt = transpose_kernel(&self.nodes[b.0].value, k, n);
                let da = matmul_kernel(g, &bt, m, n, k);
                self.accumulate(grads, *a, &da);
                let at = transpose_kernel(&self.nodes[a.0].value, m, k);
                let db = matmul_kernel(&at, g, k, m, n);
                self.accumulate(grads, *b, &db);
            }
            Op::Transpose { a, rows, cols } => {
                let da = transpose_kernel(g, *cols, *rows);
                self.accumulate(grads, *a, &da);
            }
            Op::RowSlice { a, start, len, cols } => {
                let total = self.nodes[a.0].value.len();
                let mut da = vec![0.0; total];
                da[start * cols..(start + len) * cols].copy_from_slice(g);
                self.accumulate(grads, *a, &da);
            }
            Op::ColSlice { a, start, len, rows, cols } => {
                let mut da = vec![0.0; rows * cols];
                for r in 0..*rows {
                    for c in 0..*len {
                        da[r * cols + start + c] = g[r * len + c];
                    }
                }
                self.accumulate(grads, *a, &da);
            }
            Op::ColConcat { parts, rows } => {
                let total: usize = parts.iter().map(|(_, c)| c).sum();
                let mut offset = 0;
                for &(p, c) in parts {
                    let mut dp = vec![0.0; rows * c];
                    for r in 0..*rows {
                        dp[r * c..(r + 1) * c]
                            .copy_from_slice(&g[r * total + offset..r * total + offset + c]);
                    }
                    self.accumulate(grads, p, &dp);
                    offset += c;
                }
            }
            Op::Softmax { a, axis } => {
                let shape = &self.nodes[idx].shape;
                let y = &self.nodes[idx].value;
                let da = softmax_backward_kernel(y, g, shape, *axis);
                self.accumulate(grads, *a, &da);
            }
            Op::CausalSoftmax { a, n } => {
                let n = *n;
                let y = &self.nodes[idx].value;
                let mut da = vec![0.0; n * n];
                for r in 0..n {
                    let mut dot = 0.0;
                    for c in 0..=r {
                        dot += g[r * n + c] * y[r * n + c];
                    }
                    for c in 0..=r {
                        da[r * n + c] = y[r * n + c] * (g[r * n + c] - dot);
                    }
                }
                self.accumulate(grads, *a, &da);
            }
            Op::LayerNorm { x, gamma, beta, rows, cols, mean, inv_std } => {
                let (rows, cols) = (*rows, *cols);
                let xv = &self.nodes[x.0].value;
                let gv = &self.nodes[gamma.0].value;
                let mut dx = vec![0.0; rows * cols];
                let mut dgamma = vec![0.0; cols];
                let mut dbeta = vec![0.0; cols];
                for r in 0..rows {
                    let row = &xv[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let inv = inv_std[r];
                    let mu = mean[r];
                    // x̂ and the two row means the VJP needs
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for c in 0..cols {
                        let xhat = (row[c] - mu) * inv;
                        let dxhat = gr[c] * gv[c];
                        mean_dxhat += dxhat;
                        mean_dxhat_xhat += dxhat * xhat;
                        dgamma[c] += gr[c] * xhat;
                        dbeta[c] += gr[c];
                    }
                    mean_dxhat /= cols as f64;
                    mean_dxhat_xhat /= cols as f64;
                    for c in 0..cols {
                        let xhat = (row[c] - mu) * inv;
                        let dxhat = gr[c] * gv[c];
                        dx[r * cols + c] = inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                    }
                }
                self.accumulate(grads, *x, &dx);
                self.accumulate(grads, *gamma, &dgamma);
                self.accumulate(grads, *beta, &dbeta);
            }
            Op::Gelu(a) => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[a.0].value)
                    .map(|(gi, &x)| gi * gelu_grad(x))
                    .collect();
                self.accumulate(grads, *a, &da);
            }
            Op::EmbedLookup { table, ids, dim } => {
                let mut dt = vec![0.0; self.nodes[table.0].value.len()];
                for (row, &id) in ids.iter().enumerate() {
                    for c in 0..*dim {
                        dt[id * dim + c] += g[row * dim + c];
                    }
                }
                self.accumulate(grads, *table, &dt);
            }
            Op::CrossEntropySum { logits, targets, mask, rows, cols } => {
                let x = &self.nodes[logits.0].value;
                let scale = g[0];
                let mut dl = vec![0.0; rows * cols];
                for r in 0..*rows {
                    if !mask[r] {
                        continue;
                    }
                    let row = &x[r * cols..(r + 1) * cols];
                    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut denom = 0.0;
                    for c in 0..*cols {
                        let e = (row[c] - m).exp();
                        dl[r * cols + c] = e;
                        denom += e;
                    }
                    for c in 0..*cols {
                        dl[r * cols + c] = dl[r * cols + c] / denom * scale;
                    }
                    dl[r * cols + targets[r]] -= scale;
                }
                self.accumulate(grads, *logits, &dl);
            }
        }
    }
}

// ── Shared kernels ───────────────────────────────────────────────────

fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_kernel(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Max-subtracted softmax along `axis` of a row-major buffer.
pub(crate) fn softmax_kernel(data: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let lane = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = vec![0.0; data.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * lane * inner + i;
            let mut m = f64::NEG_INFINITY;
            for l in 0..lane {
                m = m.max(data[base + l * inner]);
            }
            let mut denom = 0.0;
            for l in 0..lane {
                let e = (data[base + l * inner] - m).exp();
                out[base + l * inner] = e;
                denom += e;
            }
            for l in 0..lane {
                out[base + l * inner] /= denom;
            }
        }
    }
    out
}

fn softmax_backward_kernel(y: &[f64], g: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let lane = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = vec![0.0; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * lane * inner + i;
            let mut dot = 0.0;
            for l in 0..lane {
                dot += y[base + l * inner] * g[base + l * inner];
            }
            for l in 0..lane {
                out[base + l * inner] = y[base + l * inner] * (g[base + l * inner] - dot);
            }
        }
    }
    out
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_COEF: f64 = 0.044715;

/// tanh-approximation GELU.
fn gelu(x: f64) -> f64 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    let t = u.tanh();
    let du = GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}
