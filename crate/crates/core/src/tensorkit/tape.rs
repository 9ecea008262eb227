// SPDX-License-Identifier: MIT OR Apache-2.0

use super::kernels::{matmul_nn, matmul_nt, matmul_tn};
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var },
    MatMulNt { a: Var, b: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: T },
    AddBias { x: Var, bias: Var },
    Gelu { x: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, mean: Vec<T>, rstd: Vec<T> },
    Softmax { x: Var, axis: usize },
    Embedding { table: Var, ids: Vec<usize> },
    GatherRows { x: Var, rows: Vec<usize> },
    ScatterRows { base: Var, src: Var, rows: Vec<usize> },
    CausalAttention { qkv: Var, heads: usize, segments: Vec<usize>, probs: Vec<T> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    Sum { x: Var },
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Ordered record of executed differentiable ops.
#[derive(Debug, Clone, Default)]
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
}

fn check_finite<T: Element>(data: &[T], op: &str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{op} produced a non-finite value")))
    }
}

fn accumulate<T: Element>(slot: &mut Option<Vec<T>>, delta: &[T]) {
    match slot {
        Some(g) => g.iter_mut().zip(delta).for_each(|(g, &d)| *g = *g + d),
        None => *slot = Some(delta.to_vec()),
    }
}

fn gelu_parts<T: Element>(x: T) -> (T, T) {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let k = T::of(0.044_715);
    let half = T::of(0.5);
    let one = T::one();
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let y = half * x * (one + t);
    let dy = half * (one + t) + half * x * (one - t * t) * c * (one + T::of(3.0) * k * x * x);
    (y, dy)
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Records an input. Gradients are tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let needs = tensor.requires_grad();
        self.push(tensor, Op::Leaf, needs)
    }

    /// Records a trainable input.
    pub fn param(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.node(v).value
    }

    /// Gradient of a node after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.node(v).value.grad()
    }

    pub fn take_value(&mut self, v: Var) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::scalar(T::zero()))
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner dimensions {m}x{k} · {k2}x{n}"
            )));
        }
        let out = matmul_nn(self.value(a).data(), self.value(b).data(), m, k, n);
        check_finite(&out, "matmul")?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b }, needs))
    }

    /// `a[m×k] · b[n×k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (n, k2) = self.dims2(b)?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul_nt inner dimensions {m}x{k} · ({n}x{k2})ᵀ"
            )));
        }
        let out = matmul_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        check_finite(&out, "matmul_nt")?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNt { a, b }, needs))
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Dimension(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        check_finite(&out, "add")?;
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Add { a, b }, needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        check_finite(&out, "mul")?;
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul { a, b }, needs))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let out: Vec<T> = self.value(x).data().iter().map(|&v| v * factor).collect();
        check_finite(&out, "scale")?;
        let shape = self.value(x).shape().to_vec();
        let needs = self.needs(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Scale { x, factor }, needs))
    }

    /// Adds a `[n]` bias to every row of `x[.., n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        if self.value(bias).numel() != n {
            return Err(Error::Dimension(format!(
                "bias of length {} for rows of length {n}",
                self.value(bias).numel()
            )));
        }
        let b = self.value(bias).data();
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(&v, &bb)| v + bb))
            .collect();
        check_finite(&out, "add_bias")?;
        let shape = self.value(x).shape().to_vec();
        let needs = self.needs(&[x, bias]);
        Ok(self.push(Tensor::new(shape, out)?, Op::AddBias { x, bias }, needs))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out: Vec<T> = self.value(x).data().iter().map(|&v| gelu_parts(v).0).collect();
        check_finite(&out, "gelu")?;
        let shape = self.value(x).shape().to_vec();
        let needs = self.needs(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Gelu { x }, needs))
    }

    /// Normalizes each row of `x[.., n]` to zero mean and unit variance,
    /// then applies `gain` and `bias` (both length `n`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let n = self.value(x).last_dim();
        if self.value(gain).numel() != n || self.value(bias).numel() != n {
            return Err(Error::Dimension(format!(
                "layer_norm gain/bias must have length {n}"
            )));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let nt = T::of(n as f64);
        let rows = self.value(x).numel() / n;
        let mut out = Vec::with_capacity(rows * n);
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        for row in self.value(x).data().chunks(n) {
            let mean = row.iter().copied().sum::<T>() / nt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nt;
            let rstd = T::one() / (var + eps).sqrt();
            for ((&v, &gg), &bb) in row.iter().zip(g).zip(b) {
                out.push((v - mean) * rstd * gg + bb);
            }
            means.push(mean);
            rstds.push(rstd);
        }
        check_finite(&out, "layer_norm")?;
        let shape = self.value(x).shape().to_vec();
        let needs = self.needs(&[x, gain, bias]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean: means,
                rstd: rstds,
            },
            needs,
        ))
    }

    /// Softmax along `axis`, computed with max-subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::Dimension(format!(
                "softmax axis {axis} for shape {shape:?}"
            )));
        }
        let input = self.value(x).data();
        check_finite(input, "softmax input")?;
        let (outer, len, inner) = axis_split(&shape, axis);
        let mut out = vec![T::zero(); input.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| o * len * inner + a * inner + i;
                let max = (0..len)
                    .map(|a| input[at(a)])
                    .fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for a in 0..len {
                    let e = (input[at(a)] - max).exp();
                    out[at(a)] = e;
                    total = total + e;
                }
                for a in 0..len {
                    out[at(a)] = out[at(a)] / total;
                }
            }
        }
        check_finite(&out, "softmax")?;
        let needs = self.needs(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { x, axis }, needs))
    }

    /// Rows `ids` of `table[V×d]`, giving `[ids.len()×d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2(table)?;
        if ids.is_empty() {
            return Err(Error::Input("embedding of an empty id list".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Index(format!("token id {bad} outside vocabulary of {v}")));
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(t.row(i));
        }
        let needs = self.needs(&[table]);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            needs,
        ))
    }

    /// Rows `rows` of `x[m×n]`, giving `[rows.len()×n]`.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if rows.is_empty() {
            return Err(Error::Input("gather of zero rows".into()));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::Index(format!("row {bad} outside {m} rows")));
        }
        let t = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            out.extend_from_slice(t.row(r));
        }
        let needs = self.needs(&[x]);
        Ok(self.push(
            Tensor::new(vec![rows.len(), n], out)?,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            needs,
        ))
    }

    /// Copy of `base[m×n]` with row `rows[i]` replaced by row `i` of `src`.
    pub fn scatter_rows(&mut self, base: Var, src: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2(base)?;
        let (s, n2) = self.dims2(src)?;
        if n != n2 || s != rows.len() {
            return Err(Error::Dimension(format!(
                "scatter of {s}x{n2} source into {} rows of width {n}",
                rows.len()
            )));
        }
        let mut seen = vec![false; m];
        for &r in rows {
            if r >= m {
                return Err(Error::Index(format!("row {r} outside {m} rows")));
            }
            if std::mem::replace(&mut seen[r], true) {
                return Err(Error::Contract(format!("row {r} scattered twice")));
            }
        }
        let mut out = self.value(base).data().to_vec();
        let src_t = self.value(src);
        for (i, &r) in rows.iter().enumerate() {
            out[r * n..(r + 1) * n].copy_from_slice(src_t.row(i));
        }
        let needs = self.needs(&[base, src]);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::ScatterRows {
                base,
                src,
                rows: rows.to_vec(),
            },
            needs,
        ))
    }

    /// Multi-head causal self-attention over packed sequences.
    ///
    /// `qkv` is `[rows × 3d]` with query, key and value blocks side by side;
    /// `segments` lists the lengths of the sequences packed along the rows.
    /// Attention never crosses a segment boundary and row `i` of a segment
    /// attends to rows `0..=i` of the same segment. Output is `[rows × d]`.
    pub fn causal_attention(&mut self, qkv: Var, heads: usize, segments: &[usize]) -> Result<Var> {
        let (rows, w) = self.dims2(qkv)?;
        if w % 3 != 0 || heads == 0 || (w / 3) % heads != 0 {
            return Err(Error::Dimension(format!(
                "qkv width {w} not divisible into 3 x {heads} heads"
            )));
        }
        if segments.iter().sum::<usize>() != rows || segments.contains(&0) {
            return Err(Error::Dimension(format!(
                "segments {segments:?} do not tile {rows} rows"
            )));
        }
        let d = w / 3;
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let data = self.value(qkv).data();
        let mut out = vec![T::zero(); rows * d];
        let mut probs = Vec::with_capacity(segments.iter().map(|l| heads * l * l).sum());
        let mut start = 0;
        for &len in segments {
            for h in 0..heads {
                let qo = h * dh;
                let ko = d + h * dh;
                let vo = 2 * d + h * dh;
                let block = probs.len();
                probs.resize(block + len * len, T::zero());
                for i in 0..len {
                    let q = &data[(start + i) * w + qo..(start + i) * w + qo + dh];
                    let p_row = &mut probs[block + i * len..block + (i + 1) * len];
                    let mut max = T::neg_infinity();
                    for (j, p) in p_row.iter_mut().enumerate().take(i + 1) {
                        let k = &data[(start + j) * w + ko..(start + j) * w + ko + dh];
                        let s = q.iter().zip(k).map(|(&a, &b)| a * b).sum::<T>() * scale;
                        *p = s;
                        max = max.max(s);
                    }
                    let mut total = T::zero();
                    for p in p_row.iter_mut().take(i + 1) {
                        *p = (*p - max).exp();
                        total = total + *p;
                    }
                    let o = &mut out[(start + i) * d + h * dh..(start + i) * d + (h + 1) * dh];
                    for (j, p) in p_row.iter_mut().enumerate().take(i + 1) {
                        *p = *p / total;
                        let v = &data[(start + j) * w + vo..(start + j) * w + vo + dh];
                        for (oo, &vv) in o.iter_mut().zip(v) {
                            *oo = *oo + *p * vv;
                        }
                    }
                }
            }
            start += len;
        }
        check_finite(&out, "causal_attention")?;
        let needs = self.needs(&[qkv]);
        Ok(self.push(
            Tensor::new(vec![rows, d], out)?,
            Op::CausalAttention {
                qkv,
                heads,
                segments: segments.to_vec(),
                probs,
            },
            needs,
        ))
    }

    /// Mean negative log-softmax probability of `targets` under `logits[n×V]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, v) = self.dims2(logits)?;
        if targets.len() != n {
            return Err(Error::Dimension(format!(
                "{} targets for {n} logit rows",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Index(format!("target {bad} outside {v} classes")));
        }
        let x = self.value(logits).data();
        check_finite(x, "cross_entropy input")?;
        let mut probs = vec![T::zero(); n * v];
        let mut total = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = &x[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (p, &l) in probs[r * v..(r + 1) * v].iter_mut().zip(row) {
                *p = (l - max).exp();
                z = z + *p;
            }
            for p in &mut probs[r * v..(r + 1) * v] {
                *p = *p / z;
            }
            total = total + (max + z.ln() - row[t]);
        }
        let loss = total / T::of(n as f64);
        check_finite(&[loss], "cross_entropy")?;
        let needs = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            needs,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum::<T>();
        check_finite(&[s], "sum")?;
        let needs = self.needs(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Sum { x }, needs))
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Afterwards every tracked node holds a gradient; nodes the loss does not
    /// depend on hold zeros. Returns the number of ops replayed.
    pub fn backward(&mut self, loss: Var) -> Result<usize> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward from non-scalar of shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        let mut visited = 0;
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            visited += 1;
            self.backward_op(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if node.needs_grad {
                let g = g.unwrap_or_else(|| vec![T::zero(); node.value.numel()]);
                node.value.set_grad(Some(g))?;
            }
        }
        Ok(visited)
    }

    fn backward_op(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let needs = |v: &Var| self.nodes[v.0].needs_grad;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = self.dims2(*a)?;
                let n = self.value(*b).shape()[1];
                if needs(a) {
                    let da = matmul_nt(g, self.value(*b).data(), m, n, k);
                    accumulate(&mut grads[a.0], &da);
                }
                if needs(b) {
                    let db = matmul_tn(self.value(*a).data(), g, m, k, n);
                    accumulate(&mut grads[b.0], &db);
                }
            }
            Op::MatMulNt { a, b } => {
                let (m, k) = self.dims2(*a)?;
                let n = self.value(*b).shape()[0];
                if needs(a) {
                    let da = matmul_nn(g, self.value(*b).data(), m, n, k);
                    accumulate(&mut grads[a.0], &da);
                }
                if needs(b) {
                    let db = matmul_tn(g, self.value(*a).data(), m, n, k);
                    accumulate(&mut grads[b.0], &db);
                }
            }
            Op::Add { a, b } => {
                if needs(a) {
                    accumulate(&mut grads[a.0], g);
                }
                if needs(b) {
                    accumulate(&mut grads[b.0], g);
                }
            }
            Op::Mul { a, b } => {
                if needs(a) {
                    let da: Vec<T> = g
                        .iter()
                        .zip(self.value(*b).data())
                        .map(|(&g, &y)| g * y)
                        .collect();
                    accumulate(&mut grads[a.0], &da);
                }
                if needs(b) {
                    let db: Vec<T> = g
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(&g, &x)| g * x)
                        .collect();
                    accumulate(&mut grads[b.0], &db);
                }
            }
            Op::Scale { x, factor } => {
                let dx: Vec<T> = g.iter().map(|&g| g * *factor).collect();
                accumulate(&mut grads[x.0], &dx);
            }
            Op::AddBias { x, bias } => {
                if needs(x) {
                    accumulate(&mut grads[x.0], g);
                }
                if needs(bias) {
                    let n = self.value(*bias).numel();
                    let mut db = vec![T::zero(); n];
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, &r)| *d = *d + r);
                    }
                    accumulate(&mut grads[bias.0], &db);
                }
            }
            Op::Gelu { x } => {
                let dx: Vec<T> = g
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&g, &v)| g * gelu_parts(v).1)
                    .collect();
                accumulate(&mut grads[x.0], &dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            } => {
                let n = self.value(*gain).numel();
                let nt = T::of(n as f64);
                let gv = self.value(*gain).data();
                let xv = self.value(*x).data();
                let mut dx = vec![T::zero(); xv.len()];
                let mut dgain = vec![T::zero(); n];
                let mut dbias = vec![T::zero(); n];
                for (r, (xrow, grow)) in xv.chunks(n).zip(g.chunks(n)).enumerate() {
                    let xhat: Vec<T> = xrow.iter().map(|&v| (v - mean[r]) * rstd[r]).collect();
                    let dxhat: Vec<T> = grow.iter().zip(gv).map(|(&a, &b)| a * b).collect();
                    let m1 = dxhat.iter().copied().sum::<T>() / nt;
                    let m2 = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<T>() / nt;
                    for c in 0..n {
                        dx[r * n + c] = rstd[r] * (dxhat[c] - m1 - xhat[c] * m2);
                        dgain[c] = dgain[c] + grow[c] * xhat[c];
                        dbias[c] = dbias[c] + grow[c];
                    }
                }
                if needs(x) {
                    accumulate(&mut grads[x.0], &dx);
                }
                if needs(gain) {
                    accumulate(&mut grads[gain.0], &dgain);
                }
                if needs(bias) {
                    accumulate(&mut grads[bias.0], &dbias);
                }
            }
            Op::Softmax { x, axis } => {
                let y = self.nodes[i].value.data();
                let (outer, len, inner) = axis_split(self.value(*x).shape(), *axis);
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for c in 0..inner {
                        let at = |a: usize| o * len * inner + a * inner + c;
                        let dot = (0..len).map(|a| g[at(a)] * y[at(a)]).sum::<T>();
                        for a in 0..len {
                            dx[at(a)] = y[at(a)] * (g[at(a)] - dot);
                        }
                    }
                }
                accumulate(&mut grads[x.0], &dx);
            }
            Op::Embedding { table, ids } => {
                let t = self.value(*table);
                let d = t.last_dim();
                let slot = grads[table.0].get_or_insert_with(|| vec![T::zero(); t.numel()]);
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..d {
                        slot[id * d + c] = slot[id * d + c] + g[r * d + c];
                    }
                }
            }
            Op::GatherRows { x, rows } => {
                let t = self.value(*x);
                let n = t.last_dim();
                let slot = grads[x.0].get_or_insert_with(|| vec![T::zero(); t.numel()]);
                for (i, &r) in rows.iter().enumerate() {
                    for c in 0..n {
                        slot[r * n + c] = slot[r * n + c] + g[i * n + c];
                    }
                }
            }
            Op::ScatterRows { base, src, rows } => {
                let n = self.value(*base).last_dim();
                if needs(base) {
                    let mut db = g.to_vec();
                    for &r in rows {
                        db[r * n..(r + 1) * n].iter_mut().for_each(|v| *v = T::zero());
                    }
                    accumulate(&mut grads[base.0], &db);
                }
                if needs(src) {
                    let mut ds = Vec::with_capacity(rows.len() * n);
                    for &r in rows {
                        ds.extend_from_slice(&g[r * n..(r + 1) * n]);
                    }
                    accumulate(&mut grads[src.0], &ds);
                }
            }
            Op::CausalAttention {
                qkv,
                heads,
                segments,
                probs,
            } => {
                let dqkv = attention_backward(self.value(*qkv), *heads, segments, probs, g);
                accumulate(&mut grads[qkv.0], &dqkv);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let v = self.value(*logits).last_dim();
                let scale = g[0] / T::of(targets.len() as f64);
                let mut dx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    dx[r * v + t] = dx[r * v + t] - scale;
                }
                accumulate(&mut grads[logits.0], &dx);
            }
            Op::Sum { x } => {
                let dx = vec![g[0]; self.value(*x).numel()];
                accumulate(&mut grads[x.0], &dx);
            }
        }
        Ok(())
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn attention_backward<T: Element>(
    qkv: &Tensor<T>,
    heads: usize,
    segments: &[usize],
    probs: &[T],
    g: &[T],
) -> Vec<T> {
    let w = qkv.last_dim();
    let d = w / 3;
    let dh = d / heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let data = qkv.data();
    let mut dqkv = vec![T::zero(); data.len()];
    let mut block = 0;
    let mut start = 0;
    let mut dp = Vec::new();
    for &len in segments {
        for h in 0..heads {
            let qo = h * dh;
            let ko = d + h * dh;
            let vo = 2 * d + h * dh;
            for i in 0..len {
                let p_row = &probs[block + i * len..block + i * len + i + 1];
                let go = &g[(start + i) * d + h * dh..(start + i) * d + (h + 1) * dh];
                dp.clear();
                for (j, &p) in p_row.iter().enumerate() {
                    let vrow = (start + j) * w + vo;
                    let v = &data[vrow..vrow + dh];
                    dp.push(go.iter().zip(v).map(|(&a, &b)| a * b).sum::<T>());
                    for c in 0..dh {
                        dqkv[vrow + c] = dqkv[vrow + c] + p * go[c];
                    }
                }
                let dot = p_row.iter().zip(&dp).map(|(&p, &d)| p * d).sum::<T>();
                let qrow = (start + i) * w + qo;
                for (j, &p) in p_row.iter().enumerate() {
                    let ds = p * (dp[j] - dot) * scale;
                    let krow = (start + j) * w + ko;
                    for c in 0..dh {
                        dqkv[qrow + c] = dqkv[qrow + c] + ds * data[krow + c];
                        dqkv[krow + c] = dqkv[krow + c] + ds * data[qrow + c];
                    }
                }
            }
            block += len * len;
        }
        start += len;
    }
    dqkv
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn mat(tape: &mut Tape<f64>, r: usize, c: usize, seed: f64, grad: bool) -> Var {
        let t = Tensor::from_fn(&[r, c], |i| ((i as f64 + 1.0) * seed).sin());
        tape.leaf(t.with_requires_grad(grad))
    }

    #[test]
    fn identity_and_zero_products() {
        let mut tape = Tape::<f32>::new();
        let i3 = tape.leaf(Tensor::identity(3));
        let x = tape.leaf(Tensor::from_fn(&[3, 2], |i| i as f32 - 2.5));
        let y = tape.matmul(i3, x).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
        let z = tape.leaf(Tensor::zeros(&[2, 4]));
        let w = tape.leaf(Tensor::from_fn(&[4, 2], |i| i as f32));
        let o = tape.matmul(z, w).unwrap();
        assert!(tape.value(o).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_rejects_mismatched_inner_dims() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn matmul_matches_triple_loop_reference() {
        let mut tape = Tape::<f32>::new();
        let a = Tensor::<f32>::from_fn(&[3, 2], |i| (i as f32 * 1.7).sin());
        let b = Tensor::<f32>::from_fn(&[2, 3], |i| (i as f32 * 0.6).cos());
        let mut want = [0.0f64; 9];
        for i in 0..3 {
            for j in 0..3 {
                for p in 0..2 {
                    want[i * 3 + j] += a.data()[i * 2 + p] as f64 * b.data()[p * 3 + j] as f64;
                }
            }
        }
        let (va, vb) = (tape.leaf(a), tape.leaf(b));
        let c = tape.matmul(va, vb).unwrap();
        for (&got, &w) in tape.value(c).data().iter().zip(&want) {
            assert_relative_eq!(got as f64, w, max_relative = 1e-6, epsilon = 1e-7);
        }
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(&[1, 3]));
        let s = tape.softmax(x, 1).unwrap();
        for &v in tape.value(s).data() {
            assert_relative_eq!(v, 1.0 / 3.0, epsilon = 1e-7);
        }
        let big = tape.leaf(Tensor::new(vec![2], vec![1000.0, 0.0]).unwrap());
        let s = tape.softmax(big, 0).unwrap();
        assert_relative_eq!(tape.value(s).data()[0], 1.0, epsilon = 1e-7);
        assert!(tape.value(s).data()[1] < 1e-30);
    }

    #[test]
    fn softmax_along_leading_axis_normalizes_columns() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::from_fn(&[3, 4], |i| (i as f32 * 0.77).sin() * 3.0));
        let s = tape.softmax(x, 0).unwrap();
        let y = tape.value(s).data();
        for c in 0..4 {
            let total: f32 = (0..3).map(|r| y[r * 4 + c]).sum();
            assert!((total - 1.0).abs() < 1e-6);
        }
        assert!(tape.softmax(x, 2).is_err());
    }

    #[test]
    fn softmax_rejects_non_finite_input() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![f32::NAN, 0.0]).unwrap());
        assert!(matches!(tape.softmax(x, 0), Err(Error::Numeric(_))));
        let y = tape.leaf(Tensor::new(vec![2], vec![f32::INFINITY, 0.0]).unwrap());
        assert!(matches!(tape.softmax(y, 0), Err(Error::Numeric(_))));
    }

    #[test]
    fn ops_refuse_to_produce_infinities() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::full(&[2], f32::MAX));
        assert!(matches!(tape.add(x, x), Err(Error::Numeric(_))));
    }

    #[test]
    fn layer_norm_edge_cases() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::full(&[1, 5], 3.25));
        let g = tape.leaf(Tensor::ones(&[5]));
        let b = tape.leaf(Tensor::zeros(&[5]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

        let x = tape.leaf(Tensor::from_fn(&[2, 4], |i| (i as f32).powi(2)));
        let g0 = tape.leaf(Tensor::zeros(&[4]));
        let bias = tape.leaf(Tensor::from_fn(&[4], |i| i as f32 - 1.0));
        let y = tape.layer_norm(x, g0, bias, 1e-5).unwrap();
        assert_eq!(tape.value(y).row(0), &[-1.0, 0.0, 1.0, 2.0]);
        assert_eq!(tape.value(y).row(1), &[-1.0, 0.0, 1.0, 2.0]);

        let bad = tape.leaf(Tensor::zeros(&[3]));
        assert!(tape.layer_norm(x, bad, bias, 1e-5).is_err());
    }

    #[test]
    fn cross_entropy_reference_cases() {
        let mut tape = Tape::<f32>::new();
        let z = tape.leaf(Tensor::zeros(&[2, 4]));
        let l = tape.cross_entropy(z, &[0, 3]).unwrap();
        assert_relative_eq!(tape.value(l).item().unwrap(), 4f32.ln(), epsilon = 1e-6);

        let mut one_hot = Tensor::<f32>::zeros(&[1, 4]);
        one_hot.data_mut()[2] = 1e4;
        let x = tape.leaf(one_hot);
        let l = tape.cross_entropy(x, &[2]).unwrap();
        assert!(tape.value(l).item().unwrap().abs() < 1e-6);

        assert!(matches!(tape.cross_entropy(x, &[4]), Err(Error::Index(_))));
    }

    #[test]
    fn backward_of_sum_is_ones_and_unreached_leaves_get_zeros() {
        let mut tape = Tape::<f64>::new();
        let x = mat(&mut tape, 2, 3, 0.3, true);
        let unused = mat(&mut tape, 2, 2, 0.1, true);
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
        assert_eq!(tape.grad(unused).unwrap(), &[0.0; 4]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = mat(&mut tape, 2, 3, 0.3, true);
        let y = tape.scale(x, 2.0).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn matmul_sum_gradients_match_hand_formula() {
        // d/dA sum(A·B) = 1·Bᵀ, d/dB sum(A·B) = Aᵀ·1
        let mut tape = Tape::<f64>::new();
        let a = mat(&mut tape, 2, 3, 0.7, true);
        let b = mat(&mut tape, 3, 4, 1.3, true);
        let c = tape.matmul(a, b).unwrap();
        let s = tape.sum(c).unwrap();
        tape.backward(s).unwrap();
        let av = tape.value(a).data().to_vec();
        let bv = tape.value(b).data().to_vec();
        for i in 0..2 {
            for p in 0..3 {
                let want: f64 = (0..4).map(|j| bv[p * 4 + j]).sum();
                assert_relative_eq!(tape.grad(a).unwrap()[i * 3 + p], want, epsilon = 1e-12);
            }
        }
        for p in 0..3 {
            for j in 0..4 {
                let want: f64 = (0..2).map(|i| av[i * 3 + p]).sum();
                assert_relative_eq!(tape.grad(b).unwrap()[p * 4 + j], want, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn backward_visits_each_tracked_op_once() {
        let mut tape = Tape::<f64>::new();
        let x = mat(&mut tape, 2, 2, 0.5, true);
        let y = tape.add(x, x).unwrap();
        let z = tape.mul(y, x).unwrap();
        let s = tape.sum(z).unwrap();
        assert_eq!(tape.backward(s).unwrap(), 4);
        // d/dx sum(2x·x) = 4x
        for (g, v) in tape.grad(x).unwrap().iter().zip(tape.value(x).data()) {
            assert_relative_eq!(*g, 4.0 * v, epsilon = 1e-12);
        }
    }

    #[test]
    fn attention_single_position_copies_value() {
        let mut tape = Tape::<f32>::new();
        let qkv = tape.leaf(Tensor::from_fn(&[1, 6], |i| i as f32));
        let o = tape.causal_attention(qkv, 1, &[1]).unwrap();
        assert_eq!(tape.value(o).data(), &[4.0, 5.0]);
        assert!(tape.causal_attention(qkv, 1, &[2]).is_err());
    }

    #[test]
    fn scatter_rows_replaces_and_routes_gradients() {
        let mut tape = Tape::<f64>::new();
        let base = mat(&mut tape, 3, 2, 0.4, true);
        let src = mat(&mut tape, 1, 2, 0.9, true);
        let y = tape.scatter_rows(base, src, &[1]).unwrap();
        assert_eq!(tape.value(y).row(1), tape.value(src).row(0));
        assert_eq!(tape.value(y).row(0), tape.value(base).row(0));
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(base).unwrap(), &[1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
        assert_eq!(tape.grad(src).unwrap(), &[1.0, 1.0]);
        assert!(tape.scatter_rows(base, src, &[3]).is_err());
    }
}
