//! Per-evaluation reverse-mode tape over [`Tensor`] values.
//!
//! Every operation appends a node holding its output value and whatever it
//! needs for the backward pass. A [`Tape`] is owned by one evaluation and is not
//! shared across threads; kernels may still fan out internally.

use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;

use super::scan::{scan_rows_blocked, scan_rows_sequential};
use super::{NumericsError, Scalar, Tensor};

static NEXT_TAPE_ID: AtomicUsize = AtomicUsize::new(1);

/// Multiply-accumulate count above which matrix kernels split rows across threads.
const PAR_MACS: usize = 1 << 16;

/// Which schedule the taped scan uses for its forward and adjoint recurrences.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScanMode {
    Sequential,
    #[default]
    Parallel,
}

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: usize,
    idx: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.idx
    }
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Exp,
    Softplus,
    Sigmoid,
    Silu,
    Neg,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    Unary(Var, Unary),
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Embedding {
        table: Var,
        tokens: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ExpandCols {
        x: Var,
        repeat: usize,
    },
    HeadOuter {
        v: Var,
        b: Var,
        heads: usize,
    },
    HeadContract {
        s: Var,
        c: Var,
        heads: usize,
    },
    Scan {
        decay: Var,
        input: Var,
        h0: Option<Var>,
        batch: usize,
        mode: ScanMode,
    },
    ShiftSeq {
        x: Var,
        batch: usize,
    },
    Sum(Var),
    Mean(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        batch: usize,
        offset: usize,
        probs: Vec<T>,
    },
    ConcatSeq {
        a: Var,
        b: Var,
        batch: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    cost: usize,
}

/// Reverse-mode tape.
pub struct Tape<T> {
    id: usize,
    nodes: Vec<Node<T>>,
    activations: usize,
    peak: usize,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients<T> {
    tape: usize,
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to `v`; `None` if `v` does not influence the output.
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads[v.idx]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.idx].clone(), g.clone()).expect("grad shape"))
    }

    /// Like [`Gradients::get`] but returns zeros when `v` is disconnected.
    pub fn get_or_zero(&self, v: Var) -> Tensor<T> {
        self.get(v).unwrap_or_else(|| Tensor::zeros(&self.shapes[v.idx]))
    }
}

fn shape_err(op: &str, detail: String) -> NumericsError {
    NumericsError::Shape(format!("{op}: {detail}"))
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn matmul_kernel<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    if n == 0 {
        return out;
    }
    let row = |(i, o): (usize, &mut [T])| {
        let ar = &a[i * k..(i + 1) * k];
        for (p, &av) in ar.iter().enumerate() {
            let br = &b[p * n..(p + 1) * n];
            for (oj, &bj) in o.iter_mut().zip(br) {
                *oj += av * bj;
            }
        }
    };
    if m * k * n >= PAR_MACS {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    out
}

/// `a · bᵀ` with `a: [m,k]`, `b: [n,k]`.
fn matmul_nt_kernel<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    if n == 0 {
        return out;
    }
    let row = |(i, o): (usize, &mut [T])| {
        let ar = &a[i * k..(i + 1) * k];
        for (j, oj) in o.iter_mut().enumerate() {
            let br = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in ar.iter().zip(br) {
                acc += x * y;
            }
            *oj = acc;
        }
    };
    if m * k * n >= PAR_MACS {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    out
}

/// `aᵀ · g` with `a: [m,k]`, `g: [m,n]`, summing rows in index order.
fn matmul_tn_kernel<T: Scalar>(a: &[T], g: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * n];
    if n == 0 {
        return out;
    }
    let row = |(p, o): (usize, &mut [T])| {
        for i in 0..m {
            let av = a[i * k + p];
            let gr = &g[i * n..(i + 1) * n];
            for (oj, &gj) in o.iter_mut().zip(gr) {
                *oj += av * gj;
            }
        }
    };
    if m * k * n >= PAR_MACS {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    out
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
    match &mut grads[v.idx] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            activations: 0,
            peak: 0,
        }
    }

    /// Drops every node; the peak activation counter is kept.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.activations = 0;
        self.id = NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// Current node count, for a later [`Tape::truncate`].
    pub fn mark(&self) -> usize {
        self.nodes.len()
    }

    /// Drops every node recorded after `mark`. Variables created after the mark
    /// must not be used again.
    pub fn truncate(&mut self, mark: usize) {
        for n in self.nodes.drain(mark.min(self.nodes.len())..) {
            self.activations -= n.cost;
        }
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Scalars currently held by non-leaf nodes (outputs plus saved aux data).
    pub fn activation_elems(&self) -> usize {
        self.activations
    }

    /// Largest value [`Tape::activation_elems`] has reached over this tape's life.
    pub fn peak_activation_elems(&self) -> usize {
        self.peak
    }

    fn check(&self, v: Var) -> Result<&Node<T>, NumericsError> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(NumericsError::Usage("variable does not belong to this tape".into()));
        }
        Ok(&self.nodes[v.idx])
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.check(v).expect("foreign variable").value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.idx].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool, aux: usize) -> Var {
        let cost = if matches!(op, Op::Leaf) { 0 } else { value.len() + aux };
        self.activations += cost;
        self.peak = self.peak.max(self.activations);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            cost,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true, 0)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false, 0)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.idx].requires_grad)
    }

    fn dims2(&self, v: Var, op: &str) -> Result<(usize, usize), NumericsError> {
        let t = &self.check(v)?.value;
        if t.shape().len() != 2 {
            return Err(shape_err(op, format!("expected a matrix, got {:?}", t.shape())));
        }
        Ok((t.shape()[0], t.shape()[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        let out = matmul_kernel(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg, 0))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (m, k) = self.dims2(a, "matmul_nt")?;
        let (n, k2) = self.dims2(b, "matmul_nt")?;
        if k != k2 {
            return Err(shape_err("matmul_nt", format!("[{m},{k}] x [{n},{k2}]^T")));
        }
        let out = matmul_nt_kernel(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMulNt(a, b), rg, 0))
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var, NumericsError> {
        self.check(a)?;
        self.check(b)?;
        let out = self
            .value(a)
            .zip_map(self.value(b), f)
            .map_err(|e| shape_err(name, e.to_string()))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, op, rg, 0))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn row_broadcast(&mut self, a: Var, r: Var, name: &str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var, NumericsError> {
        let (m, n) = self.dims2(a, name)?;
        let rv = &self.check(r)?.value;
        if rv.len() != n {
            return Err(shape_err(name, format!("row of {} onto [{m},{n}]", rv.len())));
        }
        let rv = rv.data();
        let data: Vec<T> = self
            .value(a)
            .data()
            .chunks(n.max(1))
            .flat_map(|row| row.iter().zip(rv).map(|(&x, &y)| f(x, y)))
            .collect();
        let rg = self.rg(&[a, r]);
        Ok(self.push(Tensor::matrix(m, n, data)?, op, rg, 0))
    }

    /// `a[m,n] + r[n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, r: Var) -> Result<Var, NumericsError> {
        self.row_broadcast(a, r, "add_row", |x, y| x + y, Op::AddRow(a, r))
    }

    /// `a[m,n] ⊙ r[n]` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, r: Var) -> Result<Var, NumericsError> {
        self.row_broadcast(a, r, "mul_row", |x, y| x * y, Op::MulRow(a, r))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var, NumericsError> {
        let out = self.check(a)?.value.map(|x| x * c);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Scale(a, c), rg, 0))
    }

    fn unary(&mut self, a: Var, kind: Unary) -> Result<Var, NumericsError> {
        let f: fn(T) -> T = match kind {
            Unary::Exp => |x: T| x.exp(),
            Unary::Softplus => softplus,
            Unary::Sigmoid => sigmoid,
            Unary::Silu => |x: T| x * sigmoid(x),
            Unary::Neg => |x: T| -x,
        };
        let out = self.check(a)?.value.map(f);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Unary(a, kind), rg, 0))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.unary(a, Unary::Exp)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.unary(a, Unary::Softplus)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn silu(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.unary(a, Unary::Silu)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.unary(a, Unary::Neg)
    }

    /// Row-wise `x / sqrt(mean(x²) + eps) ⊙ gain`.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: T) -> Result<Var, NumericsError> {
        let (m, n) = self.dims2(x, "rms_norm")?;
        if self.check(gain)?.value.len() != n {
            return Err(shape_err("rms_norm", format!("gain of {} for width {n}", self.value(gain).len())));
        }
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let mut inv_rms = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m * n);
        let nf = T::lit(n as f64);
        for row in xv.chunks(n.max(1)).take(m) {
            let ms = row.iter().map(|&v| v * v).sum::<T>() / nf;
            let r = T::one() / (ms + eps).sqrt();
            inv_rms.push(r);
            out.extend(row.iter().zip(g).map(|(&v, &gj)| v * r * gj));
        }
        let rg = self.rg(&[x, gain]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::RmsNorm { x, gain, inv_rms }, rg, m))
    }

    /// Mean softmax cross-entropy over rows of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, NumericsError> {
        let (m, v) = self.dims2(logits, "cross_entropy")?;
        if labels.len() != m {
            return Err(shape_err("cross_entropy", format!("{} labels for {m} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= v) {
            return Err(shape_err("cross_entropy", format!("label {bad} out of {v} classes")));
        }
        let lv = self.value(logits).data();
        let mut probs = Vec::with_capacity(m * v);
        let mut total = T::zero();
        for (row, &label) in lv.chunks(v).zip(labels) {
            let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let se: T = row.iter().map(|&z| (z - mx).exp()).sum();
            let lse = mx + se.ln();
            total += lse - row[label];
            probs.extend(row.iter().map(|&z| (z - lse).exp()));
        }
        let loss = total / T::lit(m.max(1) as f64);
        let rg = self.rg(&[logits]);
        let aux = probs.len();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
            aux,
        ))
    }

    /// Gathers rows of `table[V,d]` by token index.
    pub fn embedding(&mut self, table: Var, tokens: &[usize]) -> Result<Var, NumericsError> {
        let (v, d) = self.dims2(table, "embedding")?;
        if let Some(&bad) = tokens.iter().find(|&&t| t >= v) {
            return Err(shape_err("embedding", format!("token {bad} out of vocabulary {v}")));
        }
        let out = self.value(table).select_rows(tokens);
        let rg = self.rg(&[table]);
        let _ = d;
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                tokens: tokens.to_vec(),
            },
            rg,
            0,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let (m, n) = self.dims2(x, "slice_cols")?;
        if start + len > n {
            return Err(shape_err("slice_cols", format!("[{start}, {}) of width {n}", start + len)));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(m * len);
        for row in xv.chunks(n.max(1)).take(m) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::matrix(m, len, out)?, Op::SliceCols { x, start }, rg, 0))
    }

    /// Repeats every column `repeat` times: `[m,g] -> [m, g·repeat]`.
    pub fn expand_cols(&mut self, x: Var, repeat: usize) -> Result<Var, NumericsError> {
        let (m, g) = self.dims2(x, "expand_cols")?;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(m * g * repeat);
        for row in xv.chunks(g.max(1)).take(m) {
            for &val in row {
                out.extend(std::iter::repeat_n(val, repeat));
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::matrix(m, g * repeat, out)?, Op::ExpandCols { x, repeat }, rg, 0))
    }

    /// Per-head outer product: `v[m,H·P]`, `b[m,H·N]` → `[m, H·P·N]`.
    pub fn head_outer(&mut self, v: Var, b: Var, heads: usize) -> Result<Var, NumericsError> {
        let (m, hp) = self.dims2(v, "head_outer")?;
        let (m2, hn) = self.dims2(b, "head_outer")?;
        if m != m2 || heads == 0 || hp % heads != 0 || hn % heads != 0 {
            return Err(shape_err("head_outer", format!("[{m},{hp}] x [{m2},{hn}] over {heads} heads")));
        }
        let (p, n) = (hp / heads, hn / heads);
        let vv = self.value(v).data();
        let bv = self.value(b).data();
        let mut out = Vec::with_capacity(m * hp * n);
        for r in 0..m {
            for h in 0..heads {
                for i in 0..p {
                    let x = vv[r * hp + h * p + i];
                    out.extend(bv[r * hn + h * n..r * hn + (h + 1) * n].iter().map(|&y| x * y));
                }
            }
        }
        let rg = self.rg(&[v, b]);
        Ok(self.push(Tensor::matrix(m, hp * n, out)?, Op::HeadOuter { v, b, heads }, rg, 0))
    }

    /// Per-head contraction over state: `s[m,H·P·N]`, `c[m,H·N]` → `[m,H·P]`.
    pub fn head_contract(&mut self, s: Var, c: Var, heads: usize) -> Result<Var, NumericsError> {
        let (m, hpn) = self.dims2(s, "head_contract")?;
        let (m2, hn) = self.dims2(c, "head_contract")?;
        if m != m2 || heads == 0 || hn % heads != 0 || hpn % hn != 0 {
            return Err(shape_err("head_contract", format!("[{m},{hpn}] x [{m2},{hn}] over {heads} heads")));
        }
        let n = hn / heads;
        let p = hpn / hn;
        let sv = self.value(s).data();
        let cv = self.value(c).data();
        let mut out = Vec::with_capacity(m * heads * p);
        for r in 0..m {
            for h in 0..heads {
                let cr = &cv[r * hn + h * n..r * hn + (h + 1) * n];
                for i in 0..p {
                    let base = r * hpn + (h * p + i) * n;
                    let mut acc = T::zero();
                    for (&x, &y) in sv[base..base + n].iter().zip(cr) {
                        acc += x * y;
                    }
                    out.push(acc);
                }
            }
        }
        let rg = self.rg(&[s, c]);
        Ok(self.push(Tensor::matrix(m, heads * p, out)?, Op::HeadContract { s, c, heads }, rg, 0))
    }

    /// Linear recurrence over `batch` sequences laid out as consecutive row blocks.
    /// `decay` and `input` are `[batch·len, C]`; `h0`, when given, is `[batch, C]`.
    pub fn scan(&mut self, decay: Var, input: Var, h0: Option<Var>, batch: usize, mode: ScanMode) -> Result<Var, NumericsError> {
        let (m, ch) = self.dims2(decay, "scan")?;
        if self.value(input).shape() != [m, ch] {
            return Err(shape_err(
                "scan",
                format!("decay [{m},{ch}] vs input {:?}", self.value(input).shape()),
            ));
        }
        if batch == 0 || m % batch != 0 {
            return Err(shape_err("scan", format!("{m} rows do not split into {batch} sequences")));
        }
        if let Some(h) = h0 {
            if self.check(h)?.value.shape() != [batch, ch] {
                return Err(shape_err("scan", format!("h0 {:?} for [{batch},{ch}]", self.value(h).shape())));
            }
        }
        let len = m / batch;
        let a = self.value(decay).data();
        let u = self.value(input).data();
        let h0v = h0.map(|h| self.value(h).data());
        let mut out = vec![T::zero(); m * ch];
        let seq = len * ch;
        let run = |(b, o): (usize, &mut [T])| {
            let init = h0v.map(|h| &h[b * ch..(b + 1) * ch]);
            let (aa, uu) = (&a[b * seq..(b + 1) * seq], &u[b * seq..(b + 1) * seq]);
            match mode {
                ScanMode::Sequential => scan_rows_sequential(aa, uu, init, ch, o),
                ScanMode::Parallel => scan_rows_blocked(aa, uu, init, ch, o),
            }
        };
        if seq > 0 {
            if batch > 1 && m * ch >= PAR_MACS {
                out.par_chunks_mut(seq).enumerate().for_each(run);
            } else {
                out.chunks_mut(seq).enumerate().for_each(run);
            }
        }
        let mut vars = vec![decay, input];
        vars.extend(h0);
        let rg = self.rg(&vars);
        Ok(self.push(
            Tensor::matrix(m, ch, out)?,
            Op::Scan {
                decay,
                input,
                h0,
                batch,
                mode,
            },
            rg,
            0,
        ))
    }

    /// Shifts each sequence one step later: `y_t = x_{t-1}`, `y_0 = 0`.
    pub fn shift_seq(&mut self, x: Var, batch: usize) -> Result<Var, NumericsError> {
        let (m, ch) = self.dims2(x, "shift_seq")?;
        if batch == 0 || m % batch != 0 {
            return Err(shape_err("shift_seq", format!("{m} rows over {batch} sequences")));
        }
        let len = m / batch;
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); m * ch];
        for b in 0..batch {
            for t in 1..len {
                let dst = (b * len + t) * ch;
                let src = (b * len + t - 1) * ch;
                out[dst..dst + ch].copy_from_slice(&xv[src..src + ch]);
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::matrix(m, ch, out)?, Op::ShiftSeq { x, batch }, rg, 0))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, NumericsError> {
        let s: T = self.check(x)?.value.data().iter().copied().sum();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), rg, 0))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, NumericsError> {
        let t = &self.check(x)?.value;
        let s: T = t.data().iter().copied().sum::<T>() / T::lit(t.len().max(1) as f64);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Mean(x), rg, 0))
    }

    /// Multi-head causal attention. `q` is `[batch·Lq, H·dh]`, `k`/`v` are
    /// `[batch·Lk, H·dh]`; query `i` sits at absolute position `offset + i` and
    /// sees keys `0..=offset+i`.
    #[allow(clippy::too_many_arguments)]
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize, batch: usize, offset: usize) -> Result<Var, NumericsError> {
        let (mq, d) = self.dims2(q, "attention")?;
        let (mk, dk) = self.dims2(k, "attention")?;
        if self.value(v).shape() != [mk, dk] || d != dk || heads == 0 || d % heads != 0 {
            return Err(shape_err("attention", format!("q [{mq},{d}] k [{mk},{dk}] heads {heads}")));
        }
        if batch == 0 || mq % batch != 0 || mk % batch != 0 {
            return Err(shape_err("attention", format!("rows {mq}/{mk} over {batch} sequences")));
        }
        let (lq, lk) = (mq / batch, mk / batch);
        if offset + lq > lk {
            return Err(shape_err(
                "attention",
                format!("queries at {offset}..{} exceed {lk} keys", offset + lq),
            ));
        }
        let dh = d / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![T::zero(); mq * d];
        let mut probs = vec![T::zero(); batch * heads * lq * lk];
        for b in 0..batch {
            for h in 0..heads {
                for i in 0..lq {
                    let qr = &qv[(b * lq + i) * d + h * dh..][..dh];
                    let visible = offset + i + 1;
                    let pr = &mut probs[((b * heads + h) * lq + i) * lk..][..lk];
                    let mut mx = T::neg_infinity();
                    for j in 0..visible {
                        let kr = &kv[(b * lk + j) * d + h * dh..][..dh];
                        let s = qr.iter().zip(kr).map(|(&x, &y)| x * y).sum::<T>() * scale;
                        pr[j] = s;
                        mx = mx.max(s);
                    }
                    let mut z = T::zero();
                    for pj in pr.iter_mut().take(visible) {
                        *pj = (*pj - mx).exp();
                        z += *pj;
                    }
                    let orow = &mut out[(b * lq + i) * d + h * dh..][..dh];
                    for j in 0..visible {
                        pr[j] /= z;
                        let vr = &vv[(b * lk + j) * d + h * dh..][..dh];
                        for (o, &x) in orow.iter_mut().zip(vr) {
                            *o += pr[j] * x;
                        }
                    }
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        let aux = probs.len();
        Ok(self.push(
            Tensor::matrix(mq, d, out)?,
            Op::Attention {
                q,
                k,
                v,
                heads,
                batch,
                offset,
                probs,
            },
            rg,
            aux,
        ))
    }

    /// Concatenates along the sequence axis per batch element.
    pub fn concat_seq(&mut self, a: Var, b: Var, batch: usize) -> Result<Var, NumericsError> {
        let (ma, c) = self.dims2(a, "concat_seq")?;
        let (mb, c2) = self.dims2(b, "concat_seq")?;
        if c != c2 || batch == 0 || ma % batch != 0 || mb % batch != 0 {
            return Err(shape_err("concat_seq", format!("[{ma},{c}] ++ [{mb},{c2}] over {batch}")));
        }
        let (la, lb) = (ma / batch, mb / batch);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity((ma + mb) * c);
        for s in 0..batch {
            out.extend_from_slice(&av[s * la * c..(s + 1) * la * c]);
            out.extend_from_slice(&bv[s * lb * c..(s + 1) * lb * c]);
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::matrix(ma + mb, c, out)?, Op::ConcatSeq { a, b, batch }, rg, 0))
    }

    /// Backward pass from a scalar output.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, NumericsError> {
        let node = self.check(loss)?;
        if node.value.len() != 1 {
            return Err(NumericsError::Usage(format!(
                "backward needs a scalar, got shape {:?}",
                node.value.shape()
            )));
        }
        self.backward_seeded(loss, &Tensor::full(node.value.shape(), T::one()))
    }

    /// Vector-Jacobian product: propagates `seed` (shaped like `out`) to every input.
    pub fn backward_seeded(&self, out: Var, seed: &Tensor<T>) -> Result<Gradients<T>, NumericsError> {
        let node = self.check(out)?;
        if !node.requires_grad {
            return Err(NumericsError::Usage("output does not depend on any differentiable input".into()));
        }
        if node.value.shape() != seed.shape() {
            return Err(NumericsError::Shape(format!(
                "seed {:?} for output {:?}",
                seed.shape(),
                node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; out.idx + 1];
        grads[out.idx] = Some(seed.data().to_vec());
        for idx in (0..=out.idx).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.backward_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        // Only differentiable nodes report gradients.
        for (idx, slot) in grads.iter_mut().enumerate() {
            if !self.nodes[idx].requires_grad {
                *slot = None;
            }
        }
        Ok(Gradients {
            tape: self.id,
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.idx].requires_grad
    }

    fn backward_node(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let val = |v: Var| self.nodes[v.idx].value.data();
        let dims = |v: Var| {
            let s = self.nodes[v.idx].value.shape();
            (s[0], s[1])
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims(*a);
                let n = dims(*b).1;
                if self.wants(*a) {
                    accumulate(grads, *a, matmul_nt_kernel(g, val(*b), m, n, k));
                }
                if self.wants(*b) {
                    accumulate(grads, *b, matmul_tn_kernel(val(*a), g, m, k, n));
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = dims(*a);
                let n = dims(*b).0;
                if self.wants(*a) {
                    accumulate(grads, *a, matmul_kernel(g, val(*b), m, n, k));
                }
                if self.wants(*b) {
                    accumulate(grads, *b, matmul_tn_kernel(g, val(*a), m, n, k));
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.iter().map(|&x| -x).collect());
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.iter().zip(val(*b)).map(|(&x, &y)| x * y).collect());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.iter().zip(val(*a)).map(|(&x, &y)| x * y).collect());
                }
            }
            Op::AddRow(a, r) => {
                let n = dims(*a).1;
                if self.wants(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if self.wants(*r) {
                    let mut acc = vec![T::zero(); n];
                    for row in g.chunks(n.max(1)) {
                        for (s, &x) in acc.iter_mut().zip(row) {
                            *s += x;
                        }
                    }
                    accumulate(grads, *r, acc);
                }
            }
            Op::MulRow(a, r) => {
                let n = dims(*a).1;
                let rv = val(*r);
                if self.wants(*a) {
                    let ga = g
                        .chunks(n.max(1))
                        .flat_map(|row| row.iter().zip(rv).map(|(&x, &y)| x * y))
                        .collect();
                    accumulate(grads, *a, ga);
                }
                if self.wants(*r) {
                    let mut acc = vec![T::zero(); n];
                    for (grow, arow) in g.chunks(n.max(1)).zip(val(*a).chunks(n.max(1))) {
                        for ((s, &x), &y) in acc.iter_mut().zip(grow).zip(arow) {
                            *s += x * y;
                        }
                    }
                    accumulate(grads, *r, acc);
                }
            }
            Op::Scale(a, c) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.iter().map(|&x| x * *c).collect());
                }
            }
            Op::Unary(a, kind) => {
                if self.wants(*a) {
                    let x = val(*a);
                    let y = node.value.data();
                    let ga: Vec<T> = match kind {
                        Unary::Exp => g.iter().zip(y).map(|(&gi, &yi)| gi * yi).collect(),
                        Unary::Softplus => g.iter().zip(x).map(|(&gi, &xi)| gi * sigmoid(xi)).collect(),
                        Unary::Sigmoid => g.iter().zip(y).map(|(&gi, &yi)| gi * yi * (T::one() - yi)).collect(),
                        Unary::Silu => g
                            .iter()
                            .zip(x)
                            .map(|(&gi, &xi)| {
                                let s = sigmoid(xi);
                                gi * s * (T::one() + xi * (T::one() - s))
                            })
                            .collect(),
                        Unary::Neg => g.iter().map(|&gi| -gi).collect(),
                    };
                    accumulate(grads, *a, ga);
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (m, n) = dims(*x);
                let xv = val(*x);
                let gv = val(*gain);
                let nf = T::lit(n as f64);
                let mut dx = vec![T::zero(); m * n];
                let mut dgain = vec![T::zero(); n];
                for r in 0..m {
                    let rr = inv_rms[r];
                    let xr = &xv[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let mut dot = T::zero();
                    for j in 0..n {
                        let xhat = xr[j] * rr;
                        dgain[j] += gr[j] * xhat;
                        dot += gr[j] * gv[j] * xhat;
                    }
                    let mean_dot = dot / nf;
                    for j in 0..n {
                        let xhat = xr[j] * rr;
                        dx[r * n + j] = rr * (gr[j] * gv[j] - xhat * mean_dot);
                    }
                }
                if self.wants(*x) {
                    accumulate(grads, *x, dx);
                }
                if self.wants(*gain) {
                    accumulate(grads, *gain, dgain);
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                if self.wants(*logits) {
                    let (m, v) = dims(*logits);
                    let scale = g[0] / T::lit(m.max(1) as f64);
                    let mut dl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                    for (r, &l) in labels.iter().enumerate() {
                        dl[r * v + l] -= scale;
                    }
                    accumulate(grads, *logits, dl);
                }
            }
            Op::Embedding { table, tokens } => {
                if self.wants(*table) {
                    let (v, d) = dims(*table);
                    let mut dt = vec![T::zero(); v * d];
                    for (r, &tok) in tokens.iter().enumerate() {
                        for j in 0..d {
                            dt[tok * d + j] += g[r * d + j];
                        }
                    }
                    accumulate(grads, *table, dt);
                }
            }
            Op::SliceCols { x, start } => {
                if self.wants(*x) {
                    let (m, n) = dims(*x);
                    let len = node.value.shape()[1];
                    let mut dx = vec![T::zero(); m * n];
                    for r in 0..m {
                        dx[r * n + start..r * n + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::ExpandCols { x, repeat } => {
                if self.wants(*x) {
                    let dx = g.chunks(*repeat).map(|c| c.iter().copied().sum::<T>()).collect();
                    accumulate(grads, *x, dx);
                }
            }
            Op::HeadOuter { v, b, heads } => {
                let (m, hp) = dims(*v);
                let hn = dims(*b).1;
                let (p, n) = (hp / heads, hn / heads);
                let (vv, bv) = (val(*v), val(*b));
                let mut dv = vec![T::zero(); m * hp];
                let mut db = vec![T::zero(); m * hn];
                for r in 0..m {
                    for h in 0..*heads {
                        for i in 0..p {
                            let grow = &g[r * hp * n + (h * p + i) * n..][..n];
                            let brow = &bv[r * hn + h * n..][..n];
                            let x = vv[r * hp + h * p + i];
                            let mut acc = T::zero();
                            for j in 0..n {
                                acc += grow[j] * brow[j];
                                db[r * hn + h * n + j] += grow[j] * x;
                            }
                            dv[r * hp + h * p + i] = acc;
                        }
                    }
                }
                if self.wants(*v) {
                    accumulate(grads, *v, dv);
                }
                if self.wants(*b) {
                    accumulate(grads, *b, db);
                }
            }
            Op::HeadContract { s, c, heads } => {
                let (m, hpn) = dims(*s);
                let hn = dims(*c).1;
                let n = hn / heads;
                let p = hpn / hn;
                let (sv, cv) = (val(*s), val(*c));
                let mut ds = vec![T::zero(); m * hpn];
                let mut dc = vec![T::zero(); m * hn];
                for r in 0..m {
                    for h in 0..*heads {
                        for i in 0..p {
                            let gi = g[r * heads * p + h * p + i];
                            let base = r * hpn + (h * p + i) * n;
                            for j in 0..n {
                                ds[base + j] = gi * cv[r * hn + h * n + j];
                                dc[r * hn + h * n + j] += gi * sv[base + j];
                            }
                        }
                    }
                }
                if self.wants(*s) {
                    accumulate(grads, *s, ds);
                }
                if self.wants(*c) {
                    accumulate(grads, *c, dc);
                }
            }
            Op::Scan {
                decay,
                input,
                h0,
                batch,
                mode,
            } => {
                let (m, ch) = dims(*decay);
                let len = m / batch;
                let seq = len * ch;
                let a = val(*decay);
                let h = node.value.data();
                let h0v = h0.map(val);
                // Adjoint: δ_t = g_t + a_{t+1} ⊙ δ_{t+1}, run as a forward scan on reversed rows.
                let mut delta = vec![T::zero(); m * ch];
                for b in 0..*batch {
                    let mut rev_a = vec![T::zero(); seq];
                    let mut rev_g = vec![T::zero(); seq];
                    for r in 0..len {
                        let t = len - 1 - r;
                        rev_g[r * ch..(r + 1) * ch].copy_from_slice(&g[b * seq + t * ch..][..ch]);
                        if t + 1 < len {
                            rev_a[r * ch..(r + 1) * ch].copy_from_slice(&a[b * seq + (t + 1) * ch..][..ch]);
                        }
                    }
                    let mut rev_d = vec![T::zero(); seq];
                    match mode {
                        ScanMode::Sequential => scan_rows_sequential(&rev_a, &rev_g, None, ch, &mut rev_d),
                        ScanMode::Parallel => scan_rows_blocked(&rev_a, &rev_g, None, ch, &mut rev_d),
                    }
                    for r in 0..len {
                        let t = len - 1 - r;
                        delta[b * seq + t * ch..][..ch].copy_from_slice(&rev_d[r * ch..(r + 1) * ch]);
                    }
                }
                if self.wants(*decay) {
                    let mut da = vec![T::zero(); m * ch];
                    for b in 0..*batch {
                        for t in 0..len {
                            for c in 0..ch {
                                let prev = if t > 0 {
                                    h[b * seq + (t - 1) * ch + c]
                                } else {
                                    h0v.map_or(T::zero(), |hv| hv[b * ch + c])
                                };
                                da[b * seq + t * ch + c] = delta[b * seq + t * ch + c] * prev;
                            }
                        }
                    }
                    accumulate(grads, *decay, da);
                }
                if let Some(hv) = h0 {
                    if self.wants(*hv) {
                        let mut dh0 = vec![T::zero(); batch * ch];
                        for b in 0..*batch {
                            for c in 0..ch {
                                if len > 0 {
                                    dh0[b * ch + c] = a[b * seq + c] * delta[b * seq + c];
                                }
                            }
                        }
                        accumulate(grads, *hv, dh0);
                    }
                }
                if self.wants(*input) {
                    accumulate(grads, *input, delta);
                }
            }
            Op::ShiftSeq { x, batch } => {
                if self.wants(*x) {
                    let (m, ch) = dims(*x);
                    let len = m / batch;
                    let mut dx = vec![T::zero(); m * ch];
                    for b in 0..*batch {
                        for t in 1..len {
                            let dst = (b * len + t - 1) * ch;
                            let src = (b * len + t) * ch;
                            dx[dst..dst + ch].copy_from_slice(&g[src..src + ch]);
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Sum(x) => {
                if self.wants(*x) {
                    let n = self.nodes[x.idx].value.len();
                    accumulate(grads, *x, vec![g[0]; n]);
                }
            }
            Op::Mean(x) => {
                if self.wants(*x) {
                    let n = self.nodes[x.idx].value.len();
                    accumulate(grads, *x, vec![g[0] / T::lit(n.max(1) as f64); n]);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                batch,
                offset,
                probs,
            } => {
                let (mq, d) = dims(*q);
                let mk = dims(*k).0;
                let (lq, lk) = (mq / batch, mk / batch);
                let dh = d / heads;
                let scale = T::one() / T::lit(dh as f64).sqrt();
                let (qv, kv, vv) = (val(*q), val(*k), val(*v));
                let mut dq = vec![T::zero(); mq * d];
                let mut dk = vec![T::zero(); mk * d];
                let mut dv = vec![T::zero(); mk * d];
                let mut dp = vec![T::zero(); lk];
                for b in 0..*batch {
                    for h in 0..*heads {
                        for i in 0..lq {
                            let visible = offset + i + 1;
                            let pr = &probs[((b * heads + h) * lq + i) * lk..][..lk];
                            let go = &g[(b * lq + i) * d + h * dh..][..dh];
                            let mut dot = T::zero();
                            for j in 0..visible {
                                let vr = &vv[(b * lk + j) * d + h * dh..][..dh];
                                let dvr = &mut dv[(b * lk + j) * d + h * dh..][..dh];
                                let mut s = T::zero();
                                for e in 0..dh {
                                    dvr[e] += pr[j] * go[e];
                                    s += go[e] * vr[e];
                                }
                                dp[j] = s;
                                dot += pr[j] * s;
                            }
                            let qr = &qv[(b * lq + i) * d + h * dh..][..dh];
                            for j in 0..visible {
                                let ds = pr[j] * (dp[j] - dot) * scale;
                                let kr = &kv[(b * lk + j) * d + h * dh..][..dh];
                                let dqr = &mut dq[(b * lq + i) * d + h * dh..][..dh];
                                for e in 0..dh {
                                    dqr[e] += ds * kr[e];
                                }
                                let dkr = &mut dk[(b * lk + j) * d + h * dh..][..dh];
                                for e in 0..dh {
                                    dkr[e] += ds * qr[e];
                                }
                            }
                        }
                    }
                }
                if self.wants(*q) {
                    accumulate(grads, *q, dq);
                }
                if self.wants(*k) {
                    accumulate(grads, *k, dk);
                }
                if self.wants(*v) {
                    accumulate(grads, *v, dv);
                }
            }
            Op::ConcatSeq { a, b, batch } => {
                let (ma, c) = dims(*a);
                let mb = dims(*b).0;
                let (la, lb) = (ma / batch, mb / batch);
                let mut da = Vec::with_capacity(ma * c);
                let mut db = Vec::with_capacity(mb * c);
                for s in 0..*batch {
                    let base = s * (la + lb) * c;
                    da.extend_from_slice(&g[base..base + la * c]);
                    db.extend_from_slice(&g[base + la * c..base + (la + lb) * c]);
                }
                if self.wants(*a) {
                    accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    accumulate(grads, *b, db);
                }
            }
        }
    }
}
