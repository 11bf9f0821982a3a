//! Reverse-mode differentiation substrate: dense 64-bit tensors, a Wengert
//! tape, and a central-difference gradient checker.
//!
//! The tape is append-only; operations reference earlier nodes by index, so
//! a single reverse sweep visits every recorded operation exactly once.
//! Gradients accumulate (add) into slots; callers zero them per step.

use crate::error::{Error, Result};

const STD_SMOOTHING: f64 = 1e-12;
const REL_ERR_FLOOR: f64 = 1e-8;

/// Dense row-major tensor of 64-bit reals with an optional gradient slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Checked constructor: every dimension positive, value count = product of dims.
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Domain(format!(
                "tensor shape must have positive dimensions, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::Domain(format!(
                "shape {shape:?} implies {numel} values, got {}",
                values.len()
            )));
        }
        Ok(Tensor {
            shape,
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], values)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Domain("matrix needs at least one row".into()));
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Domain("ragged rows in matrix literal".into()));
        }
        Tensor::matrix(rows.len(), cols, rows.iter().flatten().copied().collect())
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            shape: vec![rows, cols],
            values: vec![0.0; rows * cols],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            values: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    /// Marks the tensor trainable and allocates its gradient slot.
    pub fn trainable(mut self) -> Self {
        self.grad = Some(vec![0.0; self.values.len()]);
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[1]
        } else {
            1
        }
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols() + c]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Adds `g` into the gradient slot, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.values.len() {
            return Err(Error::dimension("gradient accumulation", &self.shape, &[g.len()]));
        }
        let slot = self.grad.get_or_insert_with(|| vec![0.0; self.values.len()]);
        for (s, gi) in slot.iter_mut().zip(g) {
            *s += gi;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Transpose { a: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Relu { a: Var },
    Scale { a: Var, c: f64 },
    RowSum { a: Var },
    ColSum { a: Var },
    ColMean { a: Var },
    ColStd { a: Var },
    /// Row i of the output is the mean of the table rows listed in `groups[i]`.
    GatherMeanRows { table: Var, groups: Vec<Vec<usize>> },
    /// Row-wise softmax restricted to positions where the mask was 1.
    /// The mask itself is not stored: masked outputs are exactly zero, which
    /// the softmax VJP maps to zero input gradient.
    MaskedSoftmax { a: Var },
    CrossEntropy { logits: Var, label: usize },
    /// Arithmetic mean of scalar nodes.
    MeanScalars { items: Vec<Var> },
}

struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Append-only record of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        let n = values.len();
        self.nodes.push(Node {
            shape,
            values,
            grad: vec![0.0; n],
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a tensor as a leaf, honoring its `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.values.clone(), t.requires_grad, Op::Leaf)
    }

    /// Registers a leaf that never receives gradient (adjacency matrices, masks).
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.values.clone(), false, Op::Leaf)
    }

    pub fn values(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].values
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn grad(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].grad
    }

    /// Copies a node's current values out as a plain tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor {
            shape: self.nodes[v.0].shape.clone(),
            values: self.nodes[v.0].values.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar_value(&self, v: Var) -> Result<f64> {
        let node = &self.nodes[v.0];
        if node.values.len() != 1 {
            return Err(Error::dimension("scalar access", &node.shape, &[1]));
        }
        Ok(node.values[0])
    }

    fn dims2(&self, v: Var, context: &str) -> Result<(usize, usize)> {
        let s = &self.nodes[v.0].shape;
        if s.len() != 2 {
            return Err(Error::Domain(format!("{context} requires a rank-2 tensor, got shape {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    fn binary_requires(&self, a: Var, b: Var) -> bool {
        self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad
    }

    // ── Forward operations ───────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, ka) = self.dims2(a, "matmul lhs")?;
        let (kb, c) = self.dims2(b, "matmul rhs")?;
        if ka != kb {
            return Err(Error::dimension(
                "matmul",
                &self.nodes[a.0].shape,
                &self.nodes[b.0].shape,
            ));
        }
        let av = &self.nodes[a.0].values;
        let bv = &self.nodes[b.0].values;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for k in 0..ka {
                let aik = av[i * ka + k];
                if aik == 0.0 {
                    continue;
                }
                let brow = &bv[k * c..(k + 1) * c];
                let orow = &mut out[i * c..(i + 1) * c];
                for (o, bkj) in orow.iter_mut().zip(brow) {
                    *o += aik * bkj;
                }
            }
        }
        let rg = self.binary_requires(a, b);
        Ok(self.push(vec![r, c], out, rg, Op::MatMul { a, b }))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "transpose")?;
        let av = &self.nodes[a.0].values;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = av[i * c + j];
            }
        }
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(vec![c, r], out, rg, Op::Transpose { a }))
    }

    fn elementwise_binary(&mut self, a: Var, b: Var, context: &str) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::dimension(
                context,
                &self.nodes[a.0].shape,
                &self.nodes[b.0].shape,
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise_binary(a, b, "add")?;
        let out: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.binary_requires(a, b);
        Ok(self.push(self.nodes[a.0].shape.clone(), out, rg, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise_binary(a, b, "sub")?;
        let out: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x - y)
            .collect();
        let rg = self.binary_requires(a, b);
        Ok(self.push(self.nodes[a.0].shape.clone(), out, rg, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise_binary(a, b, "mul")?;
        let out: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.binary_requires(a, b);
        Ok(self.push(self.nodes[a.0].shape.clone(), out, rg, Op::Mul { a, b }))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out: Vec<f64> = self.nodes[a.0].values.iter().map(|&x| x.max(0.0)).collect();
        let rg = self.nodes[a.0].requires_grad;
        self.push(self.nodes[a.0].shape.clone(), out, rg, Op::Relu { a })
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out: Vec<f64> = self.nodes[a.0].values.iter().map(|&x| c * x).collect();
        let rg = self.nodes[a.0].requires_grad;
        self.push(self.nodes[a.0].shape.clone(), out, rg, Op::Scale { a, c })
    }

    /// n×d → n×1 row sums.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "row_sum")?;
        let av = &self.nodes[a.0].values;
        let out: Vec<f64> = (0..r).map(|i| av[i * c..(i + 1) * c].iter().sum()).collect();
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(vec![r, 1], out, rg, Op::RowSum { a }))
    }

    /// n×d → 1×d column sums.
    pub fn col_sum(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "col_sum")?;
        let av = &self.nodes[a.0].values;
        let mut out = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                out[j] += av[i * c + j];
            }
        }
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(vec![1, c], out, rg, Op::ColSum { a }))
    }

    /// n×d → 1×d column means.
    pub fn col_mean(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "col_mean")?;
        let av = &self.nodes[a.0].values;
        let mut out = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                out[j] += av[i * c + j];
            }
        }
        out.iter_mut().for_each(|v| *v /= r as f64);
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(vec![1, c], out, rg, Op::ColMean { a }))
    }

    /// n×d → 1×d column population standard deviations, smoothed under the
    /// square root so the derivative exists at zero variance.
    pub fn col_std(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "col_std")?;
        let av = &self.nodes[a.0].values;
        let mut mean = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                mean[j] += av[i * c + j];
            }
        }
        mean.iter_mut().for_each(|v| *v /= r as f64);
        let mut out = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                let d = av[i * c + j] - mean[j];
                out[j] += d * d;
            }
        }
        for v in out.iter_mut() {
            *v = (*v / r as f64 + STD_SMOOTHING).sqrt();
        }
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(vec![1, c], out, rg, Op::ColStd { a }))
    }

    /// Row i of the result is the mean of `table` rows `groups[i]`.
    ///
    /// Groups are summed in ascending index order, which makes the result
    /// exactly invariant under permutation of a group's indices.
    pub fn gather_mean_rows(&mut self, table: Var, groups: &[Vec<usize>]) -> Result<Var> {
        let (v, d) = self.dims2(table, "gather_mean_rows")?;
        if groups.is_empty() {
            return Err(Error::Domain("gather_mean_rows needs at least one group".into()));
        }
        let mut sorted: Vec<Vec<usize>> = Vec::with_capacity(groups.len());
        for (i, g) in groups.iter().enumerate() {
            if g.is_empty() {
                return Err(Error::Domain(format!("gather_mean_rows group {i} is empty")));
            }
            if let Some(&bad) = g.iter().find(|&&id| id >= v) {
                return Err(Error::Domain(format!(
                    "gather_mean_rows index {bad} out of range for table with {v} rows"
                )));
            }
            let mut s = g.clone();
            s.sort_unstable();
            sorted.push(s);
        }
        let tv = &self.nodes[table.0].values;
        let mut out = vec![0.0; sorted.len() * d];
        for (i, g) in sorted.iter().enumerate() {
            let row = &mut out[i * d..(i + 1) * d];
            for &id in g {
                for (o, t) in row.iter_mut().zip(&tv[id * d..(id + 1) * d]) {
                    *o += t;
                }
            }
            let inv = 1.0 / g.len() as f64;
            row.iter_mut().for_each(|x| *x *= inv);
        }
        let rg = self.nodes[table.0].requires_grad;
        Ok(self.push(
            vec![sorted.len(), d],
            out,
            rg,
            Op::GatherMeanRows { table, groups: sorted },
        ))
    }

    /// Row-wise softmax over positions where `mask` is 1; masked positions
    /// produce 0. A row with no unmasked positions produces all zeros.
    pub fn masked_softmax(&mut self, a: Var, mask: Var) -> Result<Var> {
        self.elementwise_binary(a, mask, "masked_softmax")?;
        let (r, c) = self.dims2(a, "masked_softmax")?;
        let av = &self.nodes[a.0].values;
        let mv = &self.nodes[mask.0].values;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &av[i * c..(i + 1) * c];
            let mrow = &mv[i * c..(i + 1) * c];
            let mut hi = f64::NEG_INFINITY;
            for j in 0..c {
                if mrow[j] != 0.0 && row[j] > hi {
                    hi = row[j];
                }
            }
            if hi == f64::NEG_INFINITY {
                continue;
            }
            let mut denom = 0.0;
            for j in 0..c {
                if mrow[j] != 0.0 {
                    let e = (row[j] - hi).exp();
                    out[i * c + j] = e;
                    denom += e;
                }
            }
            for j in 0..c {
                out[i * c + j] /= denom;
            }
        }
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(vec![r, c], out, rg, Op::MaskedSoftmax { a }))
    }

    /// Negative log-softmax of the labeled logit, with max-subtraction.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let n = self.nodes[logits.0].values.len();
        let shape = &self.nodes[logits.0].shape;
        if shape.len() > 2 || (shape.len() == 2 && shape[0] != 1) {
            return Err(Error::Domain(format!(
                "cross_entropy expects a logit vector, got shape {shape:?}"
            )));
        }
        if label >= n {
            return Err(Error::Domain(format!(
                "label {label} out of range for {n} classes"
            )));
        }
        let lv = &self.nodes[logits.0].values;
        let hi = lv.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = lv.iter().map(|&x| (x - hi).exp()).sum::<f64>().ln() + hi;
        let loss = lse - lv[label];
        let rg = self.nodes[logits.0].requires_grad;
        Ok(self.push(vec![1], vec![loss], rg, Op::CrossEntropy { logits, label }))
    }

    /// Arithmetic mean of scalar nodes (batch loss assembly).
    pub fn mean_scalars(&mut self, items: &[Var]) -> Result<Var> {
        if items.is_empty() {
            return Err(Error::Domain("mean over zero scalars".into()));
        }
        let mut total = 0.0;
        let mut rg = false;
        for &it in items {
            total += self.scalar_value(it)?;
            rg |= self.nodes[it.0].requires_grad;
        }
        let mean = total / items.len() as f64;
        Ok(self.push(
            vec![1],
            vec![mean],
            rg,
            Op::MeanScalars { items: items.to_vec() },
        ))
    }

    // ── Backward pass ────────────────────────────────────────────────

    /// Seeds the scalar `loss` with gradient 1 and sweeps the tape in
    /// reverse. Leaf gradients accumulate across backward calls; callers
    /// zero them per step. Intermediate gradients are reset on every call.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let v = self.scalar_value(loss)?;
        if !v.is_finite() {
            return Err(Error::Numeric(format!("loss is not finite: {v}")));
        }
        for node in &mut self.nodes[..=loss.0] {
            if !matches!(node.op, Op::Leaf) {
                node.grad.iter_mut().for_each(|g| *g = 0.0);
            }
        }
        self.nodes[loss.0].grad[0] += 1.0;
        for idx in (0..=loss.0).rev() {
            self.backward_node(idx);
        }
        Ok(())
    }

    fn backward_node(&mut self, idx: usize) {
        if !self.nodes[idx].requires_grad {
            return;
        }
        // Split off the upstream gradient so input slots can be borrowed mutably.
        let g = std::mem::take(&mut self.nodes[idx].grad);
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (a, b) = (*a, *b);
                let (r, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let c = self.nodes[b.0].shape[1];
                if self.nodes[a.0].requires_grad {
                    // dA = dC · Bᵀ
                    let bv = &self.nodes[b.0].values;
                    let mut da = vec![0.0; r * k];
                    for i in 0..r {
                        for kk in 0..k {
                            let mut s = 0.0;
                            for j in 0..c {
                                s += g[i * c + j] * bv[kk * c + j];
                            }
                            da[i * k + kk] = s;
                        }
                    }
                    add_into(&mut self.nodes[a.0].grad, &da);
                }
                if self.nodes[b.0].requires_grad {
                    // dB = Aᵀ · dC
                    let av = &self.nodes[a.0].values;
                    let mut db = vec![0.0; k * c];
                    for i in 0..r {
                        for kk in 0..k {
                            let aik = av[i * k + kk];
                            if aik == 0.0 {
                                continue;
                            }
                            for j in 0..c {
                                db[kk * c + j] += aik * g[i * c + j];
                            }
                        }
                    }
                    add_into(&mut self.nodes[b.0].grad, &db);
                }
            }
            Op::Transpose { a } => {
                let a = *a;
                if self.nodes[a.0].requires_grad {
                    let (r, c) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let da = &mut self.nodes[a.0].grad;
                    for i in 0..r {
                        for j in 0..c {
                            da[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                if self.nodes[a.0].requires_grad {
                    add_into(&mut self.nodes[a.0].grad, &g);
                }
                if self.nodes[b.0].requires_grad {
                    add_into(&mut self.nodes[b.0].grad, &g);
                }
            }
            Op::Sub { a, b } => {
                let (a, b) = (*a, *b);
                if self.nodes[a.0].requires_grad {
                    add_into(&mut self.nodes[a.0].grad, &g);
                }
                if self.nodes[b.0].requires_grad {
                    for (slot, gi) in self.nodes[b.0].grad.iter_mut().zip(&g) {
                        *slot -= gi;
                    }
                }
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                if self.nodes[a.0].requires_grad {
                    let bv = self.nodes[b.0].values.clone();
                    for ((slot, gi), bi) in self.nodes[a.0].grad.iter_mut().zip(&g).zip(&bv) {
                        *slot += gi * bi;
                    }
                }
                if self.nodes[b.0].requires_grad {
                    let av = self.nodes[a.0].values.clone();
                    for ((slot, gi), ai) in self.nodes[b.0].grad.iter_mut().zip(&g).zip(&av) {
                        *slot += gi * ai;
                    }
                }
            }
            Op::Relu { a } => {
                let a = *a;
                if self.nodes[a.0].requires_grad {
                    let av = self.nodes[a.0].values.clone();
                    for ((slot, gi), ai) in self.nodes[a.0].grad.iter_mut().zip(&g).zip(&av) {
                        if *ai > 0.0 {
                            *slot += gi;
                        }
                    }
                }
            }
            Op::Scale { a, c } => {
                let (a, c) = (*a, *c);
                if self.nodes[a.0].requires_grad {
                    for (slot, gi) in self.nodes[a.0].grad.iter_mut().zip(&g) {
                        *slot += c * gi;
                    }
                }
            }
            Op::RowSum { a } => {
                let a = *a;
                if self.nodes[a.0].requires_grad {
                    let (r, c) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let da = &mut self.nodes[a.0].grad;
                    for i in 0..r {
                        for j in 0..c {
                            da[i * c + j] += g[i];
                        }
                    }
                }
            }
            Op::ColSum { a } => {
                let a = *a;
                if self.nodes[a.0].requires_grad {
                    let (r, c) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let da = &mut self.nodes[a.0].grad;
                    for i in 0..r {
                        for j in 0..c {
                            da[i * c + j] += g[j];
                        }
                    }
                }
            }
            Op::ColMean { a } => {
                let a = *a;
                if self.nodes[a.0].requires_grad {
                    let (r, c) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let inv = 1.0 / r as f64;
                    let da = &mut self.nodes[a.0].grad;
                    for i in 0..r {
                        for j in 0..c {
                            da[i * c + j] += g[j] * inv;
                        }
                    }
                }
            }
            Op::ColStd { a } => {
                let a = *a;
                if self.nodes[a.0].requires_grad {
                    let (r, c) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let av = self.nodes[a.0].values.clone();
                    let sv = self.nodes[idx].values.clone();
                    let mut mean = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            mean[j] += av[i * c + j];
                        }
                    }
                    mean.iter_mut().for_each(|v| *v /= r as f64);
                    let da = &mut self.nodes[a.0].grad;
                    for i in 0..r {
                        for j in 0..c {
                            // d std_j / d x_ij = (x_ij − μ_j) / (n · std_j)
                            da[i * c + j] += g[j] * (av[i * c + j] - mean[j]) / (r as f64 * sv[j]);
                        }
                    }
                }
            }
            Op::GatherMeanRows { table, groups } => {
                let table = *table;
                if self.nodes[table.0].requires_grad {
                    let d = self.nodes[table.0].shape[1];
                    let groups = groups.clone();
                    let dt = &mut self.nodes[table.0].grad;
                    for (i, group) in groups.iter().enumerate() {
                        let inv = 1.0 / group.len() as f64;
                        for &id in group {
                            for j in 0..d {
                                dt[id * d + j] += g[i * d + j] * inv;
                            }
                        }
                    }
                }
            }
            Op::MaskedSoftmax { a } => {
                let a = *a;
                if self.nodes[a.0].requires_grad {
                    let (r, c) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let yv = self.nodes[idx].values.clone();
                    let da = &mut self.nodes[a.0].grad;
                    for i in 0..r {
                        let y = &yv[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let dot: f64 = y.iter().zip(gr).map(|(yi, gi)| yi * gi).sum();
                        for j in 0..c {
                            da[i * c + j] += y[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, label } => {
                let (logits, label) = (*logits, *label);
                if self.nodes[logits.0].requires_grad {
                    let lv = self.nodes[logits.0].values.clone();
                    let hi = lv.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = lv.iter().map(|&x| (x - hi).exp()).sum();
                    let dl = &mut self.nodes[logits.0].grad;
                    for (j, slot) in dl.iter_mut().enumerate() {
                        let p = (lv[j] - hi).exp() / denom;
                        let one_hot = if j == label { 1.0 } else { 0.0 };
                        *slot += g[0] * (p - one_hot);
                    }
                }
            }
            Op::MeanScalars { items } => {
                let items = items.clone();
                let inv = g[0] / items.len() as f64;
                for it in items {
                    if self.nodes[it.0].requires_grad {
                        self.nodes[it.0].grad[0] += inv;
                    }
                }
            }
        }
        self.nodes[idx].grad = g;
    }
}

fn add_into(slot: &mut [f64], g: &[f64]) {
    for (s, gi) in slot.iter_mut().zip(g) {
        *s += gi;
    }
}

// ── Gradient checking ────────────────────────────────────────────────

/// Per-entry comparison of tape gradients against central differences.
pub struct GradCheckReport {
    /// Tape gradient per parameter, aligned with the input slice.
    pub analytic: Vec<Vec<f64>>,
    /// Central-difference gradient per parameter.
    pub numeric: Vec<Vec<f64>>,
    /// Worst relative error over all entries.
    pub max_rel_error: f64,
}

/// Relative error with the floor denominator used throughout.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Worst relative error between two aligned gradient sets.
pub fn max_relative_error(analytic: &[Vec<f64>], numeric: &[Vec<f64>]) -> f64 {
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(numeric) {
        for (&ai, &ni) in a.iter().zip(n) {
            worst = worst.max(relative_error(ai, ni));
        }
    }
    worst
}

/// Checks the tape gradient of `loss_fn` against central finite differences
/// for every entry of every parameter.
///
/// The closure receives a fresh tape and one leaf per parameter (in slice
/// order, all treated as trainable) and must return the scalar loss node.
pub fn grad_check_report<F>(params: &[Tensor], loss_fn: F, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::Domain(format!("eps must be in (0, 1e-2], got {eps}")));
    }
    for (i, p) in params.iter().enumerate() {
        if !p.is_finite() {
            return Err(Error::Domain(format!("parameter {i} contains non-finite values")));
        }
    }

    // Analytic pass: one forward + backward.
    let analytic: Vec<Vec<f64>> = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params
            .iter()
            .map(|t| {
                let mut t = t.clone();
                t.requires_grad = true;
                tape.leaf(&t)
            })
            .collect();
        let loss = loss_fn(&mut tape, &vars)?;
        tape.backward(loss)?;
        vars.iter().map(|&v| tape.grad(v).to_vec()).collect()
    };

    // Numeric pass: two forwards per parameter entry.
    let forward_value = |work: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = work.iter().map(|t| tape.constant(t)).collect();
        let loss = loss_fn(&mut tape, &vars)?;
        let value = tape.scalar_value(loss)?;
        if !value.is_finite() {
            return Err(Error::Numeric(format!("loss is not finite: {value}")));
        }
        Ok(value)
    };
    let mut work: Vec<Tensor> = params.to_vec();
    let mut numeric: Vec<Vec<f64>> = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let mut column = vec![0.0; params[pi].numel()];
        for ei in 0..params[pi].numel() {
            let orig = work[pi].values[ei];
            work[pi].values[ei] = orig + eps;
            let plus = forward_value(&work)?;
            work[pi].values[ei] = orig - eps;
            let minus = forward_value(&work)?;
            work[pi].values[ei] = orig;
            column[ei] = (plus - minus) / (2.0 * eps);
        }
        numeric.push(column);
    }

    let max_rel_error = max_relative_error(&analytic, &numeric);
    Ok(GradCheckReport {
        analytic,
        numeric,
        max_rel_error,
    })
}

/// Convenience wrapper returning only the worst relative error.
pub fn grad_check<F>(params: &[Tensor], loss_fn: F, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    grad_check_report(params, loss_fn, eps).map(|r| r.max_rel_error)
}
