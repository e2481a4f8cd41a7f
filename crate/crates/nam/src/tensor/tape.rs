use super::linalg;
use super::{Result, Scalar, Tensor, TensorError};

/// Handle to a node on a [`Tape`]. Only valid for the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<S: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Smul(Var, Var),
    MatMul(Var, Var),
    MatVec(Var, Var),
    Outer(Var, Var),
    Transpose(Var),
    Concat(Vec<Var>),
    ConcatCols(Vec<Var>),
    Slice {
        input: Var,
        start: usize,
    },
    SliceCols {
        input: Var,
        start: usize,
    },
    Row {
        input: Var,
        index: usize,
    },
    StackRows(Vec<Var>),
    Roll {
        input: Var,
        shift: i64,
    },
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    Softmax(Var),
    L2Norm(Var),
    LayerNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        eps: S,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Sum(Var),
    AddRow {
        mat: Var,
        row: Var,
    },
    MaskedCe {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
    },
}

/// Reverse-mode differentiation tape. Operations append nodes; `backward`
/// replays their adjoints in exact reverse execution order. One tape per
/// worker; tapes are not shared across threads.
pub struct Tape<S: Scalar> {
    values: Vec<Tensor<S>>,
    ops: Vec<Op<S>>,
    needs: Vec<bool>,
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            ops: Vec::new(),
            needs: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Inserts a differentiable leaf; `backward` will populate its gradient.
    pub fn leaf(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Inserts a non-differentiable input.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.values[v.0]
    }

    /// Gradient of the last `backward` seed with respect to `v`, if tracked.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, needs: bool) -> Var {
        self.values.push(value);
        self.ops.push(op);
        self.needs.push(needs);
        self.grads.push(None);
        Var(self.values.len() - 1)
    }

    fn push_from(&mut self, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Var {
        let needs = inputs.iter().any(|v| self.needs[v.0]);
        self.push(value, op, needs)
    }

    fn shape_of(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape_of(a) != self.shape_of(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape_of(a).to_vec(),
                rhs: self.shape_of(b).to_vec(),
            });
        }
        Ok(())
    }

    // ── Elementwise and scalar ops ──────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.values[a.0]
            .data()
            .iter()
            .zip(self.values[b.0].data())
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::new(self.shape_of(a).to_vec(), data)?;
        Ok(self.push_from(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = self.values[a.0]
            .data()
            .iter()
            .zip(self.values[b.0].data())
            .map(|(&x, &y)| x - y)
            .collect();
        let t = Tensor::new(self.shape_of(a).to_vec(), data)?;
        Ok(self.push_from(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.values[a.0]
            .data()
            .iter()
            .zip(self.values[b.0].data())
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor::new(self.shape_of(a).to_vec(), data)?;
        Ok(self.push_from(t, Op::Mul(a, b), &[a, b]))
    }

    /// Multiplies by a compile-time constant (not tracked for gradients).
    pub fn scale(&mut self, a: Var, c: S) -> Result<Var> {
        let data = self.values[a.0].data().iter().map(|&x| x * c).collect();
        let t = Tensor::new(self.shape_of(a).to_vec(), data)?;
        Ok(self.push_from(t, Op::Scale(a, c), &[a]))
    }

    /// Multiplies a tensor by a scalar variable (shape `[1]`), e.g. a gate
    /// probability. Differentiable in both arguments.
    pub fn smul(&mut self, a: Var, s: Var) -> Result<Var> {
        if !self.values[s.0].is_scalar() {
            return Err(TensorError::BadShape {
                op: "smul",
                expected: "a scalar [1] multiplier",
                shape: self.shape_of(s).to_vec(),
            });
        }
        let sv = self.values[s.0].data()[0];
        let data = self.values[a.0].data().iter().map(|&x| x * sv).collect();
        let t = Tensor::new(self.shape_of(a).to_vec(), data)?;
        Ok(self.push_from(t, Op::Smul(a, s), &[a, s]))
    }

    // ── Linear algebra ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.values[a.0].dims2("matmul")?;
        let (kb, n) = self.values[b.0].dims2("matmul")?;
        if ka != kb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, ka],
                rhs: vec![kb, n],
            });
        }
        let data = linalg::matmul(self.values[a.0].data(), self.values[b.0].data(), m, ka, n);
        let t = Tensor::new(vec![m, n], data)?;
        Ok(self.push_from(t, Op::MatMul(a, b), &[a, b]))
    }

    pub fn matvec(&mut self, a: Var, x: Var) -> Result<Var> {
        let (m, k) = self.values[a.0].dims2("matvec")?;
        if self.shape_of(x) != [k] {
            return Err(TensorError::ShapeMismatch {
                op: "matvec",
                lhs: vec![m, k],
                rhs: self.shape_of(x).to_vec(),
            });
        }
        let data = linalg::matvec(self.values[a.0].data(), self.values[x.0].data(), m, k);
        Ok(self.push_from(Tensor::vector(data), Op::MatVec(a, x), &[a, x]))
    }

    /// Outer product v k^T of two vectors.
    pub fn outer(&mut self, v: Var, k: Var) -> Result<Var> {
        let (vs, ks) = (self.shape_of(v), self.shape_of(k));
        if vs.len() != 1 || ks.len() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "outer",
                lhs: vs.to_vec(),
                rhs: ks.to_vec(),
            });
        }
        let (m, n) = (vs[0], ks[0]);
        let data = linalg::outer(self.values[v.0].data(), self.values[k.0].data());
        let t = Tensor::new(vec![m, n], data)?;
        Ok(self.push_from(t, Op::Outer(v, k), &[v, k]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.values[a.0].dims2("transpose")?;
        let data = linalg::transpose(self.values[a.0].data(), r, c);
        let t = Tensor::new(vec![c, r], data)?;
        Ok(self.push_from(t, Op::Transpose(a), &[a]))
    }

    // ── Shape ops ───────────────────────────────────────────────────────

    /// Concatenates vectors into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::EmptyAxis { op: "concat" });
        }
        let mut data = Vec::new();
        for &p in parts {
            if self.shape_of(p).len() != 1 {
                return Err(TensorError::BadShape {
                    op: "concat",
                    expected: "rank-1 parts",
                    shape: self.shape_of(p).to_vec(),
                });
            }
            data.extend_from_slice(self.values[p.0].data());
        }
        Ok(self.push_from(Tensor::vector(data), Op::Concat(parts.to_vec()), parts))
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::EmptyAxis { op: "concat_cols" });
        }
        let (rows, _) = self.values[parts[0].0].dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.values[p.0].dims2("concat_cols")?;
            if r != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape_of(parts[0]).to_vec(),
                    rhs: vec![r, c],
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![S::zero(); rows * total];
        let mut col = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.values[p.0].data();
            for i in 0..rows {
                data[i * total + col..i * total + col + w]
                    .copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            col += w;
        }
        let t = Tensor::new(vec![rows, total], data)?;
        Ok(self.push_from(t, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Contiguous sub-vector `[start, start+len)`.
    pub fn slice(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape_of(input);
        if shape.len() != 1 {
            return Err(TensorError::BadShape {
                op: "slice",
                expected: "a rank-1 tensor",
                shape: shape.to_vec(),
            });
        }
        if start + len > shape[0] {
            return Err(TensorError::IndexOutOfRange {
                op: "slice",
                index: start + len,
                bound: shape[0],
            });
        }
        let data = self.values[input.0].data()[start..start + len].to_vec();
        Ok(self.push_from(Tensor::vector(data), Op::Slice { input, start }, &[input]))
    }

    /// Contiguous column range of a matrix.
    pub fn slice_cols(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.values[input.0].dims2("slice_cols")?;
        if start + len > cols {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                bound: cols,
            });
        }
        let src = self.values[input.0].data();
        let mut data = vec![S::zero(); rows * len];
        for i in 0..rows {
            data[i * len..(i + 1) * len]
                .copy_from_slice(&src[i * cols + start..i * cols + start + len]);
        }
        let t = Tensor::new(vec![rows, len], data)?;
        Ok(self.push_from(t, Op::SliceCols { input, start }, &[input]))
    }

    /// Extracts matrix row `index` as a vector.
    pub fn row(&mut self, input: Var, index: usize) -> Result<Var> {
        let (rows, cols) = self.values[input.0].dims2("row")?;
        if index >= rows {
            return Err(TensorError::IndexOutOfRange {
                op: "row",
                index,
                bound: rows,
            });
        }
        let data = self.values[input.0].data()[index * cols..(index + 1) * cols].to_vec();
        Ok(self.push_from(Tensor::vector(data), Op::Row { input, index }, &[input]))
    }

    /// Stacks equal-length vectors as matrix rows.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        if rows.is_empty() {
            return Err(TensorError::EmptyAxis { op: "stack_rows" });
        }
        let cols = {
            let s = self.shape_of(rows[0]);
            if s.len() != 1 {
                return Err(TensorError::BadShape {
                    op: "stack_rows",
                    expected: "rank-1 rows",
                    shape: s.to_vec(),
                });
            }
            s[0]
        };
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            if self.shape_of(r) != [cols] {
                return Err(TensorError::ShapeMismatch {
                    op: "stack_rows",
                    lhs: vec![cols],
                    rhs: self.shape_of(r).to_vec(),
                });
            }
            data.extend_from_slice(self.values[r.0].data());
        }
        let t = Tensor::new(vec![rows.len(), cols], data)?;
        Ok(self.push_from(t, Op::StackRows(rows.to_vec()), rows))
    }

    /// Circular shift of a vector: shift +1 maps e_i to e_{i+1}, the last
    /// coordinate wrapping to the first. A permutation for any shift.
    pub fn roll(&mut self, input: Var, shift: i64) -> Result<Var> {
        let shape = self.shape_of(input);
        if shape.len() != 1 {
            return Err(TensorError::BadShape {
                op: "roll",
                expected: "a rank-1 tensor",
                shape: shape.to_vec(),
            });
        }
        let n = shape[0];
        if n == 0 {
            return Err(TensorError::EmptyAxis { op: "roll" });
        }
        let data = roll_data(self.values[input.0].data(), shift);
        Ok(self.push_from(Tensor::vector(data), Op::Roll { input, shift }, &[input]))
    }

    // ── Nonlinearities ──────────────────────────────────────────────────

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let data = self.values[a.0]
            .data()
            .iter()
            .map(|&x| S::one() / (S::one() + (-x).exp()))
            .collect();
        let t = Tensor::new(self.shape_of(a).to_vec(), data)?;
        Ok(self.push_from(t, Op::Sigmoid(a), &[a]))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let data = self.values[a.0].data().iter().map(|&x| x.tanh()).collect();
        let t = Tensor::new(self.shape_of(a).to_vec(), data)?;
        Ok(self.push_from(t, Op::Tanh(a), &[a]))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let data = self.values[a.0]
            .data()
            .iter()
            .map(|&x| gelu_fwd(x))
            .collect();
        let t = Tensor::new(self.shape_of(a).to_vec(), data)?;
        Ok(self.push_from(t, Op::Gelu(a), &[a]))
    }

    /// Softmax along the last axis (whole vector, or per matrix row).
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.last_axis("softmax", a)?;
        let src = self.values[a.0].data();
        let mut data = vec![S::zero(); src.len()];
        for r in 0..rows {
            softmax_row(&src[r * cols..(r + 1) * cols], &mut data[r * cols..(r + 1) * cols]);
        }
        let t = Tensor::new(self.shape_of(a).to_vec(), data)?;
        Ok(self.push_from(t, Op::Softmax(a), &[a]))
    }

    /// x / (|x| + eps) along the last axis.
    pub fn l2norm(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.last_axis("l2norm", a)?;
        let src = self.values[a.0].data();
        let mut data = src.to_vec();
        for r in 0..rows {
            super::l2_normalize_eps(&mut data[r * cols..(r + 1) * cols]);
        }
        let t = Tensor::new(self.shape_of(a).to_vec(), data)?;
        Ok(self.push_from(t, Op::L2Norm(a), &[a]))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: S) -> Result<Var> {
        let (rows, cols) = self.last_axis("layer_norm", x)?;
        if self.shape_of(gamma) != [cols] || self.shape_of(beta) != [cols] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape_of(x).to_vec(),
                rhs: self.shape_of(gamma).to_vec(),
            });
        }
        let src = self.values[x.0].data();
        let g = self.values[gamma.0].data();
        let b = self.values[beta.0].data();
        let mut data = vec![S::zero(); src.len()];
        for r in 0..rows {
            let xr = &src[r * cols..(r + 1) * cols];
            let (mean, inv_std) = row_moments(xr, eps);
            for j in 0..cols {
                data[r * cols + j] = (xr[j] - mean) * inv_std * g[j] + b[j];
            }
        }
        let t = Tensor::new(self.shape_of(x).to_vec(), data)?;
        Ok(self.push_from(
            t,
            Op::LayerNorm {
                input: x,
                gamma,
                beta,
                eps,
            },
            &[x, gamma, beta],
        ))
    }

    // ── Lookup, reduction, loss ─────────────────────────────────────────

    /// Gathers rows of an embedding table: ids `[n]` -> `[n, d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.values[table.0].dims2("embedding")?;
        if ids.is_empty() {
            return Err(TensorError::EmptyAxis { op: "embedding" });
        }
        let src = self.values[table.0].data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(TensorError::IndexOutOfRange {
                    op: "embedding",
                    index: id,
                    bound: vocab,
                });
            }
            data.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let t = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.push_from(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Sum of all elements, as a `[1]` scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.values[a.0].data().iter().copied().sum();
        Ok(self.push_from(Tensor::scalar(s), Op::Sum(a), &[a]))
    }

    /// Adds a row vector to every row of a matrix.
    pub fn add_row(&mut self, mat: Var, row: Var) -> Result<Var> {
        let (rows, cols) = self.values[mat.0].dims2("add_row")?;
        if self.shape_of(row) != [cols] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: vec![rows, cols],
                rhs: self.shape_of(row).to_vec(),
            });
        }
        let rv = self.values[row.0].data().to_vec();
        let data = self.values[mat.0]
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + rv[i % cols])
            .collect();
        let t = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push_from(t, Op::AddRow { mat, row }, &[mat, row]))
    }

    /// Cross-entropy of `logits[t]` against `targets[t]`, averaged over the
    /// positions where `mask[t]` is true; other positions contribute nothing.
    pub fn masked_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<Var> {
        let (rows, cols) = self.values[logits.0].dims2("masked_cross_entropy")?;
        if targets.len() != rows || mask.len() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "masked_cross_entropy",
                lhs: vec![rows, cols],
                rhs: vec![targets.len(), mask.len()],
            });
        }
        let masked = mask.iter().filter(|&&m| m).count();
        if masked == 0 {
            return Err(TensorError::NoMaskedPositions);
        }
        let src = self.values[logits.0].data();
        let mut total = S::zero();
        for t in 0..rows {
            if !mask[t] {
                continue;
            }
            if targets[t] >= cols {
                return Err(TensorError::IndexOutOfRange {
                    op: "masked_cross_entropy",
                    index: targets[t],
                    bound: cols,
                });
            }
            let row = &src[t * cols..(t + 1) * cols];
            total = total + (log_sum_exp(row) - row[targets[t]]);
        }
        let loss = total / S::from_usize(masked).unwrap();
        Ok(self.push_from(
            Tensor::scalar(loss),
            Op::MaskedCe {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
            },
            &[logits],
        ))
    }

    fn last_axis(&self, op: &'static str, a: Var) -> Result<(usize, usize)> {
        let shape = self.shape_of(a);
        let (rows, cols) = match shape[..] {
            [n] => (1, n),
            [r, c] => (r, c),
            _ => {
                return Err(TensorError::BadShape {
                    op,
                    expected: "a rank-1 or rank-2 tensor",
                    shape: shape.to_vec(),
                })
            }
        };
        if cols == 0 {
            return Err(TensorError::EmptyAxis { op });
        }
        Ok((rows, cols))
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Seeds d(loss)/d(loss) = 1 and accumulates gradients for every
    /// gradient-tracked node reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.0 >= self.values.len() {
            return Err(TensorError::DetachedVar);
        }
        if !self.values[loss.0].is_scalar() {
            return Err(TensorError::NonScalarLoss {
                shape: self.values[loss.0].shape().to_vec(),
            });
        }
        for i in 0..self.values.len() {
            self.grads[i] = if self.needs[i] {
                Some(vec![S::zero(); self.values[i].numel()])
            } else {
                None
            };
        }
        if !self.needs[loss.0] {
            return Ok(()); // no trainable leaf reachable
        }
        self.grads[loss.0].as_mut().unwrap()[0] = S::one();

        for i in (0..=loss.0).rev() {
            if !self.needs[i] {
                continue;
            }
            let g = match &self.grads[i] {
                Some(g) => g.clone(),
                None => continue,
            };
            self.adjoint(i, &g);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var, contribution: &[S]) {
        if let Some(g) = self.grads[v.0].as_mut() {
            for (gi, &c) in g.iter_mut().zip(contribution) {
                *gi = *gi + c;
            }
        }
    }

    fn adjoint(&mut self, i: usize, g: &[S]) {
        match &self.ops[i] {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.acc(a, g);
                self.acc(b, g);
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                self.acc(a, g);
                let neg: Vec<S> = g.iter().map(|&x| -x).collect();
                self.acc(b, &neg);
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let da: Vec<S> = g
                    .iter()
                    .zip(self.values[b.0].data())
                    .map(|(&gi, &bi)| gi * bi)
                    .collect();
                let db: Vec<S> = g
                    .iter()
                    .zip(self.values[a.0].data())
                    .map(|(&gi, &ai)| gi * ai)
                    .collect();
                self.acc(a, &da);
                self.acc(b, &db);
            }
            Op::Scale(a, c) => {
                let (a, c) = (*a, *c);
                let da: Vec<S> = g.iter().map(|&x| x * c).collect();
                self.acc(a, &da);
            }
            Op::Smul(a, s) => {
                let (a, s) = (*a, *s);
                let sv = self.values[s.0].data()[0];
                let da: Vec<S> = g.iter().map(|&x| x * sv).collect();
                let ds = [linalg::dot(g, self.values[a.0].data())];
                self.acc(a, &da);
                self.acc(s, &ds);
            }
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = (self.values[a.0].shape()[0], self.values[a.0].shape()[1]);
                let n = self.values[b.0].shape()[1];
                // dA = G B^T,  dB = A^T G
                let bt = linalg::transpose(self.values[b.0].data(), k, n);
                let da = linalg::matmul(g, &bt, m, n, k);
                let at = linalg::transpose(self.values[a.0].data(), m, k);
                let db = linalg::matmul(&at, g, k, m, n);
                self.acc(a, &da);
                self.acc(b, &db);
            }
            Op::MatVec(a, x) => {
                let (a, x) = (*a, *x);
                let (m, k) = (self.values[a.0].shape()[0], self.values[a.0].shape()[1]);
                let da = linalg::outer(g, self.values[x.0].data());
                let dx = linalg::matvec_t(self.values[a.0].data(), g, m, k);
                self.acc(a, &da);
                self.acc(x, &dx);
            }
            Op::Outer(v, k) => {
                let (v, k) = (*v, *k);
                let (m, n) = (self.values[v.0].numel(), self.values[k.0].numel());
                let dv = linalg::matvec(g, self.values[k.0].data(), m, n);
                let dk = linalg::matvec_t(g, self.values[v.0].data(), m, n);
                self.acc(v, &dv);
                self.acc(k, &dk);
            }
            Op::Transpose(a) => {
                let a = *a;
                let (r, c) = (self.values[a.0].shape()[0], self.values[a.0].shape()[1]);
                let da = linalg::transpose(g, c, r);
                self.acc(a, &da);
            }
            Op::Concat(parts) => {
                let parts = parts.clone();
                let mut start = 0;
                for p in parts {
                    let len = self.values[p.0].numel();
                    let dp = g[start..start + len].to_vec();
                    self.acc(p, &dp);
                    start += len;
                }
            }
            Op::ConcatCols(parts) => {
                let parts = parts.clone();
                let total = self.values[i].shape()[1];
                let rows = self.values[i].shape()[0];
                let mut col = 0;
                for p in parts {
                    let w = self.values[p.0].shape()[1];
                    let mut dp = vec![S::zero(); rows * w];
                    for r in 0..rows {
                        dp[r * w..(r + 1) * w]
                            .copy_from_slice(&g[r * total + col..r * total + col + w]);
                    }
                    self.acc(p, &dp);
                    col += w;
                }
            }
            Op::Slice { input, start } => {
                let (input, start) = (*input, *start);
                let mut di = vec![S::zero(); self.values[input.0].numel()];
                di[start..start + g.len()].copy_from_slice(g);
                self.acc(input, &di);
            }
            Op::SliceCols { input, start } => {
                let (input, start) = (*input, *start);
                let (rows, cols) = (
                    self.values[input.0].shape()[0],
                    self.values[input.0].shape()[1],
                );
                let w = self.values[i].shape()[1];
                let mut di = vec![S::zero(); rows * cols];
                for r in 0..rows {
                    di[r * cols + start..r * cols + start + w]
                        .copy_from_slice(&g[r * w..(r + 1) * w]);
                }
                self.acc(input, &di);
            }
            Op::Row { input, index } => {
                let (input, index) = (*input, *index);
                let cols = self.values[input.0].shape()[1];
                let mut di = vec![S::zero(); self.values[input.0].numel()];
                di[index * cols..(index + 1) * cols].copy_from_slice(g);
                self.acc(input, &di);
            }
            Op::StackRows(rows) => {
                let rows = rows.clone();
                let cols = self.values[i].shape()[1];
                for (r, v) in rows.into_iter().enumerate() {
                    let dr = g[r * cols..(r + 1) * cols].to_vec();
                    self.acc(v, &dr);
                }
            }
            Op::Roll { input, shift } => {
                let (input, shift) = (*input, *shift);
                let di = roll_data(g, -shift);
                self.acc(input, &di);
            }
            Op::Sigmoid(a) => {
                let a = *a;
                let da: Vec<S> = g
                    .iter()
                    .zip(self.values[i].data())
                    .map(|(&gi, &s)| gi * s * (S::one() - s))
                    .collect();
                self.acc(a, &da);
            }
            Op::Tanh(a) => {
                let a = *a;
                let da: Vec<S> = g
                    .iter()
                    .zip(self.values[i].data())
                    .map(|(&gi, &t)| gi * (S::one() - t * t))
                    .collect();
                self.acc(a, &da);
            }
            Op::Gelu(a) => {
                let a = *a;
                let da: Vec<S> = g
                    .iter()
                    .zip(self.values[a.0].data())
                    .map(|(&gi, &x)| gi * gelu_bwd(x))
                    .collect();
                self.acc(a, &da);
            }
            Op::Softmax(a) => {
                let a = *a;
                let out = self.values[i].data();
                let cols = *self.values[i].shape().last().unwrap();
                let rows = out.len() / cols;
                let mut da = vec![S::zero(); out.len()];
                for r in 0..rows {
                    let o = &out[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dotv = linalg::dot(gr, o);
                    for j in 0..cols {
                        da[r * cols + j] = o[j] * (gr[j] - dotv);
                    }
                }
                self.acc(a, &da);
            }
            Op::L2Norm(a) => {
                let a = *a;
                let src = self.values[a.0].data();
                let cols = *self.values[a.0].shape().last().unwrap();
                let rows = src.len() / cols;
                let eps = S::norm_eps();
                let mut da = vec![S::zero(); src.len()];
                for r in 0..rows {
                    let x = &src[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let norm = x.iter().map(|&v| v * v).sum::<S>().sqrt();
                    let denom = norm + eps;
                    let gx = linalg::dot(gr, x);
                    for j in 0..cols {
                        let mut d = gr[j] / denom;
                        if norm > S::zero() {
                            d = d - x[j] * gx / (norm * denom * denom);
                        }
                        da[r * cols + j] = d;
                    }
                }
                self.acc(a, &da);
            }
            Op::LayerNorm {
                input,
                gamma,
                beta,
                eps,
            } => {
                let (input, gamma, beta, eps) = (*input, *gamma, *beta, *eps);
                let src = self.values[input.0].data();
                let gm = self.values[gamma.0].data();
                let cols = *self.values[input.0].shape().last().unwrap();
                let rows = src.len() / cols;
                let mut dx = vec![S::zero(); src.len()];
                let mut dgamma = vec![S::zero(); cols];
                let mut dbeta = vec![S::zero(); cols];
                let d_f = S::from_usize(cols).unwrap();
                for r in 0..rows {
                    let x = &src[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let (mean, inv_std) = row_moments(x, eps);
                    let xhat: Vec<S> = x.iter().map(|&v| (v - mean) * inv_std).collect();
                    let mut dxhat = vec![S::zero(); cols];
                    for j in 0..cols {
                        dgamma[j] = dgamma[j] + gr[j] * xhat[j];
                        dbeta[j] = dbeta[j] + gr[j];
                        dxhat[j] = gr[j] * gm[j];
                    }
                    let sum_dxhat: S = dxhat.iter().copied().sum();
                    let sum_dxhat_xhat = linalg::dot(&dxhat, &xhat);
                    for j in 0..cols {
                        dx[r * cols + j] = inv_std / d_f
                            * (d_f * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                    }
                }
                self.acc(input, &dx);
                self.acc(gamma, &dgamma);
                self.acc(beta, &dbeta);
            }
            Op::Embedding { table, ids } => {
                let (table, ids) = (*table, ids.clone());
                let d = self.values[table.0].shape()[1];
                let mut dt = vec![S::zero(); self.values[table.0].numel()];
                for (row, &id) in ids.iter().enumerate() {
                    linalg::axpy(
                        &mut dt[id * d..(id + 1) * d],
                        S::one(),
                        &g[row * d..(row + 1) * d],
                    );
                }
                self.acc(table, &dt);
            }
            Op::Sum(a) => {
                let a = *a;
                let da = vec![g[0]; self.values[a.0].numel()];
                self.acc(a, &da);
            }
            Op::AddRow { mat, row } => {
                let (mat, row) = (*mat, *row);
                let cols = self.values[row.0].numel();
                let mut dr = vec![S::zero(); cols];
                for (idx, &gi) in g.iter().enumerate() {
                    dr[idx % cols] = dr[idx % cols] + gi;
                }
                self.acc(mat, g);
                self.acc(row, &dr);
            }
            Op::MaskedCe {
                logits,
                targets,
                mask,
            } => {
                let (logits, targets, mask) = (*logits, targets.clone(), mask.clone());
                let src = self.values[logits.0].data();
                let cols = self.values[logits.0].shape()[1];
                let rows = src.len() / cols;
                let m_count = S::from_usize(mask.iter().filter(|&&m| m).count()).unwrap();
                let scale = g[0] / m_count;
                let mut dl = vec![S::zero(); src.len()];
                for t in 0..rows {
                    if !mask[t] {
                        continue;
                    }
                    let rowv = &src[t * cols..(t + 1) * cols];
                    let mut sm = vec![S::zero(); cols];
                    softmax_row(rowv, &mut sm);
                    for c in 0..cols {
                        let indicator = if c == targets[t] { S::one() } else { S::zero() };
                        dl[t * cols + c] = scale * (sm[c] - indicator);
                    }
                }
                self.acc(logits, &dl);
            }
        }
    }
}

fn roll_data<S: Scalar>(v: &[S], shift: i64) -> Vec<S> {
    let n = v.len() as i64;
    let s = shift.rem_euclid(n) as usize;
    let mut out = vec![v[0]; v.len()];
    for (i, &x) in v.iter().enumerate() {
        out[(i + s) % v.len()] = x;
    }
    out
}

fn softmax_row<S: Scalar>(row: &[S], out: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    for (o, &x) in out.iter_mut().zip(row) {
        let e = (x - max).exp();
        *o = e;
        sum = sum + e;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

fn log_sum_exp<S: Scalar>(row: &[S]) -> S {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let sum: S = row.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

fn row_moments<S: Scalar>(x: &[S], eps: S) -> (S, S) {
    let n = S::from_usize(x.len()).unwrap();
    let mean = x.iter().copied().sum::<S>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
    (mean, S::one() / (var + eps).sqrt())
}

fn gelu_fwd<S: Scalar>(x: S) -> S {
    let half = S::from_f64(0.5).unwrap();
    let c = S::from_f64(0.797_884_560_802_865_4).unwrap(); // sqrt(2/pi)
    let k = S::from_f64(0.044715).unwrap();
    half * x * (S::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_bwd<S: Scalar>(x: S) -> S {
    let half = S::from_f64(0.5).unwrap();
    let c = S::from_f64(0.797_884_560_802_865_4).unwrap();
    let k = S::from_f64(0.044715).unwrap();
    let three = S::from_f64(3.0).unwrap();
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let sech2 = S::one() - t * t;
    let d_inner = c * (S::one() + three * k * x * x);
    half * (S::one() + t) + half * x * sech2 * d_inner
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < tol)
    }

    #[test]
    fn outer_product_definition() {
        let mut tape = Tape::<f64>::new();
        let v = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let k = tape.constant(Tensor::vector(vec![3.0, 4.0]));
        let o = tape.outer(v, k).unwrap();
        assert_eq!(tape.value(o).shape(), &[2, 2]);
        assert_eq!(tape.value(o).data(), &[3.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn l2norm_three_four_five() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::vector(vec![3.0, 4.0]));
        let y = tape.l2norm(x).unwrap();
        assert!(close(tape.value(y).data(), &[0.6, 0.8], 1e-7));
    }

    #[test]
    fn matmul_identity_is_noop() {
        let mut tape = Tape::<f64>::new();
        let eye = tape.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let a = tape.constant(Tensor::matrix(2, 2, vec![0.3, -1.2, 4.5, 2.0]).unwrap());
        let prod = tape.matmul(eye, a).unwrap();
        assert_eq!(tape.value(prod).data(), tape.value(a).data());
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn sigmoid_grad_at_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(0.0));
        let s = tape.sigmoid(x).unwrap();
        tape.backward(s).unwrap();
        assert!((tape.grad(x).unwrap()[0] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let err = tape.backward(x).unwrap_err();
        assert!(matches!(err, TensorError::NonScalarLoss { .. }));
    }

    #[test]
    fn backward_rejects_foreign_var() {
        let mut other = Tape::<f64>::new();
        let x = other.leaf(Tensor::scalar(1.0));
        let sq = other.mul(x, x).unwrap();
        let mut tape = Tape::<f64>::new();
        assert_eq!(tape.backward(sq).unwrap_err(), TensorError::DetachedVar);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let err = tape.add(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "add",
                lhs: vec![2],
                rhs: vec![3],
            }
        );
    }

    #[test]
    fn roll_shifts_basis_and_inverts() {
        let mut tape = Tape::<f64>::new();
        let e1 = tape.constant(Tensor::basis(4, 0).unwrap());
        let r = tape.roll(e1, 1).unwrap();
        assert_eq!(tape.value(r).data(), Tensor::<f64>::basis(4, 1).unwrap().data());
        let back = tape.roll(r, -1).unwrap();
        assert_eq!(tape.value(back).data(), tape.value(e1).data());
        // wrap-around: rolling the last basis vector forward lands on the first
        let e_last = tape.constant(Tensor::basis(4, 3).unwrap());
        let wrapped = tape.roll(e_last, 1).unwrap();
        assert_eq!(
            tape.value(wrapped).data(),
            Tensor::<f64>::basis(4, 0).unwrap().data()
        );
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0]).unwrap());
        let s = tape.softmax(a).unwrap();
        let d = tape.value(s).data();
        assert!((d[0..3].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((d[3..6].iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_empty_axis() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::new(vec![0], vec![]).unwrap());
        assert!(matches!(
            tape.softmax(a).unwrap_err(),
            TensorError::EmptyAxis { .. }
        ));
    }

    #[test]
    fn masked_ce_ignores_unmasked_positions() {
        let mut tape = Tape::<f64>::new();
        // Row 0 is masked out; only row 1 contributes.
        let logits = tape.leaf(Tensor::matrix(2, 2, vec![5.0, -5.0, 1.0, 2.0]).unwrap());
        let loss = tape
            .masked_cross_entropy(logits, &[1, 0], &[false, true])
            .unwrap();
        let expected = ((1.0_f64).exp() + (2.0_f64).exp()).ln() - 1.0;
        assert!((tape.value(loss).data()[0] - expected).abs() < 1e-12);
        tape.backward(loss).unwrap();
        let g = tape.grad(logits).unwrap();
        assert_eq!(&g[0..2], &[0.0, 0.0]);
    }

    #[test]
    fn masked_ce_requires_masked_position() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.leaf(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        assert_eq!(
            tape.masked_cross_entropy(logits, &[0], &[false])
                .unwrap_err(),
            TensorError::NoMaskedPositions
        );
    }

    #[test]
    fn concat_then_slice_roundtrip_grads() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.leaf(Tensor::vector(vec![3.0]));
        let c = tape.concat(&[a, b]).unwrap();
        let s = tape.slice(c, 1, 2).unwrap(); // [2.0, 3.0]
        assert_eq!(tape.value(s).data(), &[2.0, 3.0]);
        let sq = tape.mul(s, s).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[0.0, 4.0]);
        assert_eq!(tape.grad(b).unwrap(), &[6.0]);
    }
}
