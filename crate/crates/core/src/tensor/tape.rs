use rand::Rng;

use super::kernels::{axpy, dot, gemm_nn, gemm_nt, gemm_tn};
use super::{Scalar, Tensor};
use crate::error::{bail, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Target id for one row of a cross-entropy loss; `None` marks an ignored row.
pub type Label = Option<u32>;

/// Which keys each query row may look at. Rows are grouped into independent
/// blocks of `seq_len`; attention never crosses a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionMask {
    pub seq_len: usize,
    pub causal: bool,
    /// Maximum `|i - j|` a query may reach; `None` means unrestricted.
    pub window: Option<usize>,
}

impl AttentionMask {
    #[inline]
    pub fn allows(&self, i: usize, j: usize) -> bool {
        if self.causal && j > i {
            return false;
        }
        match self.window {
            Some(w) => i.abs_diff(j) <= w,
            None => true,
        }
    }

    fn key_range(&self, i: usize) -> (usize, usize) {
        let lo = self.window.map_or(0, |w| i.saturating_sub(w));
        let hi = if self.causal {
            i + 1
        } else {
            self.window
                .map_or(self.seq_len, |w| (i + w + 1).min(self.seq_len))
        };
        (lo, hi)
    }
}

/// Result of [`Tape::cross_entropy`].
#[derive(Debug, Clone, Copy)]
pub struct CrossEntropy {
    pub loss: Var,
    /// Number of non-ignored rows that contributed.
    pub supervised: usize,
}

impl CrossEntropy {
    /// Set when every row was ignored and the loss was defined as zero.
    pub fn is_empty(&self) -> bool {
        self.supervised == 0
    }
}

enum Op<T> {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Linear {
        x: usize,
        w: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        a: usize,
        c: T,
    },
    Sum {
        a: usize,
    },
    Reshape {
        a: usize,
    },
    SliceCols {
        a: usize,
        start: usize,
        cols: usize,
    },
    Softmax {
        a: usize,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu {
        a: usize,
    },
    GeGlu {
        a: usize,
    },
    Rotary {
        a: usize,
        cos: Vec<T>,
        sin: Vec<T>,
        heads: usize,
        head_dim: usize,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        probs: Vec<T>,
        mask: AttentionMask,
        heads: usize,
    },
    Embedding {
        table: usize,
        ids: Vec<u32>,
    },
    Dropout {
        a: usize,
        mask: Vec<T>,
    },
    CrossEntropy {
        logits: usize,
        rows: Vec<(usize, u32)>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Ordered record of executed operations. Values are computed eagerly when an
/// op is pushed; [`Tape::backward`] walks the record once in reverse.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Var {
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        let needs_grad = value.requires_grad();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a trainable input; its gradient is populated by `backward`.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value.with_requires_grad(true))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn matrix_dims(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => bail!(Dimension, "{what} must be 2-D, got {s:?}"),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul lhs")?;
        let (k2, n) = self.matrix_dims(b, "matmul rhs")?;
        if k != k2 {
            bail!(
                Dimension,
                "matmul inner dimensions differ: {m}x{k} · {k2}x{n}"
            );
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nn(self.data(a), self.data(b), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(
            value,
            Op::MatMul {
                a: a.0,
                b: b.0,
                m,
                k,
                n,
            },
            &[a.0, b.0],
        ))
    }

    /// `x · wᵀ` with `w` stored as `[out × in]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(x, "linear input")?;
        let (n, k2) = self.matrix_dims(w, "linear weight")?;
        if k != k2 {
            bail!(Dimension, "linear: input width {k} vs weight {n}x{k2}");
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nt(self.data(x), self.data(w), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(
            value,
            Op::Linear {
                x: x.0,
                w: w.0,
                m,
                k,
                n,
            },
            &[x.0, w.0],
        ))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            bail!(
                Dimension,
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            );
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| *x + *y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Add { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| *x * *y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Mul { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let data = self.data(a).iter().map(|x| *x * c).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        self.push(value, Op::Scale { a: a.0, c }, &[a.0])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().fold(T::zero(), |acc, x| acc + *x);
        self.push(Tensor::scalar(s), Op::Sum { a: a.0 }, &[a.0])
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self
            .value(a)
            .clone()
            .with_requires_grad(false)
            .reshape(shape)?;
        Ok(self.push(value, Op::Reshape { a: a.0 }, &[a.0]))
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = self.matrix_dims(a, "slice_cols input")?;
        if start >= end || end > cols {
            bail!(
                Dimension,
                "slice_cols {start}..{end} out of range for width {cols}"
            );
        }
        let width = end - start;
        let src = self.data(a);
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            out.extend_from_slice(&src[r * cols + start..r * cols + end]);
        }
        let value = Tensor::new(vec![rows, width], out)?;
        Ok(self.push(
            value,
            Op::SliceCols {
                a: a.0,
                start,
                cols,
            },
            &[a.0],
        ))
    }

    /// Softmax over the last dimension, max-subtracted.
    pub fn softmax_last(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let n = x.last_dim();
        if n == 0 {
            bail!(Dimension, "softmax over an empty dimension");
        }
        let mut out = x.data().to_vec();
        for row in out.chunks_exact_mut(n) {
            softmax_in_place(row);
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.push(value, Op::Softmax { a: a.0 }, &[a.0]))
    }

    /// Bias-free layer norm over the last dimension: `(x - mean) / sqrt(var + eps) * gain`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let h = self.value(x).last_dim();
        if self.shape(gain) != [h] {
            bail!(
                Dimension,
                "layer_norm gain {:?} does not match width {h}",
                self.shape(gain)
            );
        }
        let eps = T::from_f64(eps);
        let hf = T::from_f64(h as f64);
        let src = self.data(x);
        let g = self.data(gain);
        let rows = src.len() / h;
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * h..(r + 1) * h];
            let mean = row.iter().fold(T::zero(), |a, v| a + *v) / hf;
            let var = row
                .iter()
                .fold(T::zero(), |a, v| a + (*v - mean) * (*v - mean))
                / hf;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..h {
                let xh = (row[j] - mean) * rs;
                xhat[r * h + j] = xh;
                out[r * h + j] = xh * g[j];
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                xhat,
                rstd,
            },
            &[x.0, gain.0],
        ))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let data = self.data(a).iter().map(|v| v.gelu()).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        self.push(value, Op::Gelu { a: a.0 }, &[a.0])
    }

    /// Gated unit: splits the last dimension in half and returns
    /// `gelu(first) * second`.
    pub fn geglu(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.matrix_dims(a, "geglu input")?;
        if cols % 2 != 0 {
            bail!(Dimension, "geglu needs an even width, got {cols}");
        }
        let half = cols / 2;
        let src = self.data(a);
        let mut out = Vec::with_capacity(rows * half);
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            for j in 0..half {
                out.push(row[j].gelu() * row[half + j]);
            }
        }
        let value = Tensor::new(vec![rows, half], out)?;
        Ok(self.push(value, Op::GeGlu { a: a.0 }, &[a.0]))
    }

    /// Rotary position embedding on a `[rows × heads × head_dim]` tensor.
    /// Dimension `i` is paired with `i + head_dim/2` (non-interleaved) and
    /// rotated by `position * base^(-2i/head_dim)`.
    pub fn rotary(&mut self, a: Var, positions: &[usize], base: f64) -> Result<Var> {
        let (rows, heads, d) = match self.shape(a) {
            [r, h, d] => (*r, *h, *d),
            s => bail!(
                Dimension,
                "rotary expects [seq, heads, head_dim], got {s:?}"
            ),
        };
        if d % 2 != 0 {
            bail!(Config, "rotary needs an even head dimension, got {d}");
        }
        if positions.len() != rows {
            bail!(
                Dimension,
                "rotary got {} positions for {rows} rows",
                positions.len()
            );
        }
        let half = d / 2;
        let mut cos = vec![T::zero(); rows * half];
        let mut sin = vec![T::zero(); rows * half];
        for (r, &pos) in positions.iter().enumerate() {
            for i in 0..half {
                let inv_freq = base.powf(-2.0 * i as f64 / d as f64);
                let angle = pos as f64 * inv_freq;
                cos[r * half + i] = T::from_f64(angle.cos());
                sin[r * half + i] = T::from_f64(angle.sin());
            }
        }
        let src = self.data(a);
        let mut out = vec![T::zero(); src.len()];
        for r in 0..rows {
            for h in 0..heads {
                let base_idx = (r * heads + h) * d;
                for i in 0..half {
                    let (c, s) = (cos[r * half + i], sin[r * half + i]);
                    let x1 = src[base_idx + i];
                    let x2 = src[base_idx + half + i];
                    out[base_idx + i] = x1 * c - x2 * s;
                    out[base_idx + half + i] = x2 * c + x1 * s;
                }
            }
        }
        let value = Tensor::new(vec![rows, heads, d], out)?;
        Ok(self.push(
            value,
            Op::Rotary {
                a: a.0,
                cos,
                sin,
                heads,
                head_dim: d,
            },
            &[a.0],
        ))
    }

    /// Scaled dot-product attention over `[rows × heads·head_dim]` inputs.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: AttentionMask,
    ) -> Result<Var> {
        let (rows, width) = self.matrix_dims(q, "attention query")?;
        self.same_shape(q, k, "attention q/k")?;
        self.same_shape(q, v, "attention q/v")?;
        if heads == 0 || width % heads != 0 {
            bail!(Dimension, "width {width} not divisible into {heads} heads");
        }
        let s = mask.seq_len;
        if s == 0 || rows % s != 0 {
            bail!(
                Dimension,
                "{rows} rows are not a whole number of length-{s} blocks"
            );
        }
        let d = width / heads;
        let blocks = rows / s;
        let scale = T::from_f64(1.0 / (d as f64).sqrt());
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut probs = vec![T::zero(); blocks * heads * s * s];
        let mut out = vec![T::zero(); rows * width];
        let mut scores = vec![T::zero(); s];
        for b in 0..blocks {
            for h in 0..heads {
                let pbase = (b * heads + h) * s * s;
                for i in 0..s {
                    let qi = &qd[(b * s + i) * width + h * d..][..d];
                    let (lo, hi) = mask.key_range(i);
                    let mut max = T::neg_infinity();
                    for j in lo..hi {
                        let kj = &kd[(b * s + j) * width + h * d..][..d];
                        let sc = dot(qi, kj) * scale;
                        scores[j] = sc;
                        max = max.max(sc);
                    }
                    let mut total = T::zero();
                    for sc in &mut scores[lo..hi] {
                        *sc = (*sc - max).exp();
                        total = total + *sc;
                    }
                    let prow = &mut probs[pbase + i * s..pbase + (i + 1) * s];
                    let orow = &mut out[(b * s + i) * width + h * d..][..d];
                    for j in lo..hi {
                        let p = scores[j] / total;
                        prow[j] = p;
                        axpy(p, &vd[(b * s + j) * width + h * d..][..d], orow);
                    }
                }
            }
        }
        let value = Tensor::new(vec![rows, width], out)?;
        Ok(self.push(
            value,
            Op::Attention {
                q: q.0,
                k: k.0,
                v: v.0,
                probs,
                mask,
                heads,
            },
            &[q.0, k.0, v.0],
        ))
    }

    /// Row lookup into a `[vocab × hidden]` table.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let (vocab, h) = self.matrix_dims(table, "embedding table")?;
        let src = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * h);
        for &id in ids {
            let id = id as usize;
            if id >= vocab {
                bail!(Input, "token id {id} out of range for vocabulary {vocab}");
            }
            out.extend_from_slice(&src[id * h..(id + 1) * h]);
        }
        let value = Tensor::new(vec![ids.len(), h], out)?;
        Ok(self.push(
            value,
            Op::Embedding {
                table: table.0,
                ids: ids.to_vec(),
            },
            &[table.0],
        ))
    }

    /// Inverted dropout: zeroes each element with probability `p` and scales
    /// survivors by `1/(1-p)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return a;
        }
        let keep = T::from_f64(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(a).numel())
            .map(|_| {
                if rng.gen::<f64>() < p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let data = self
            .data(a)
            .iter()
            .zip(&mask)
            .map(|(x, m)| *x * *m)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        self.push(value, Op::Dropout { a: a.0, mask }, &[a.0])
    }

    /// Mean negative log-softmax over non-ignored rows of `[n × V]` logits.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[Label]) -> Result<CrossEntropy> {
        let (n, vocab) = self.matrix_dims(logits, "cross_entropy logits")?;
        if labels.len() != n {
            bail!(Dimension, "{} labels for {n} logit rows", labels.len());
        }
        let x = self.data(logits);
        let mut rows = Vec::new();
        let mut probs = Vec::new();
        let mut total = 0.0f64;
        for (r, label) in labels.iter().enumerate() {
            let Some(label) = *label else { continue };
            if label as usize >= vocab {
                bail!(Input, "label {label} out of range for vocabulary {vocab}");
            }
            let row = &x[r * vocab..(r + 1) * vocab];
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::numerical(format!("non-finite logits in row {r}")));
            }
            let start = probs.len();
            probs.extend_from_slice(row);
            let lse = softmax_in_place(&mut probs[start..]);
            total += (lse - row[label as usize]).as_f64();
            rows.push((r, label));
        }
        let supervised = rows.len();
        let loss = if supervised == 0 {
            log::warn!("cross_entropy: every position is ignored; loss defined as 0");
            T::zero()
        } else {
            T::from_f64(total / supervised as f64)
        };
        if !loss.is_finite() {
            return Err(Error::numerical("non-finite loss"));
        }
        let var = self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: logits.0,
                rows,
                probs,
            },
            &[logits.0],
        );
        Ok(CrossEntropy {
            loss: var,
            supervised,
        })
    }

    /// Reverse pass from a scalar root. Afterwards [`Tape::grad`] answers for
    /// every node that depends on a parameter, and parameter leaves carry
    /// their gradient in [`Tensor::grad`].
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            bail!(
                Usage,
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            );
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let nodes = &self.nodes;
            let val = |i: usize| nodes[i].value.data();
            let wants = |i: usize| nodes[i].needs_grad;
            let mut acc = |i: usize, local: Vec<T>| {
                if !nodes[i].needs_grad {
                    return;
                }
                match &mut grads[i] {
                    Some(existing) => {
                        for (e, l) in existing.iter_mut().zip(local) {
                            *e = *e + l;
                        }
                    }
                    slot @ None => *slot = Some(local),
                }
            };

            match &node.op {
                Op::Leaf => {}
                &Op::MatMul { a, b, m, k, n } => {
                    if wants(a) {
                        let mut da = vec![T::zero(); m * k];
                        gemm_nt(&g, val(b), &mut da, m, n, k);
                        acc(a, da);
                    }
                    if wants(b) {
                        let mut db = vec![T::zero(); k * n];
                        gemm_tn(val(a), &g, &mut db, m, k, n);
                        acc(b, db);
                    }
                }
                &Op::Linear { x, w, m, k, n } => {
                    if wants(x) {
                        let mut dx = vec![T::zero(); m * k];
                        gemm_nn(&g, val(w), &mut dx, m, n, k);
                        acc(x, dx);
                    }
                    if wants(w) {
                        let mut dw = vec![T::zero(); n * k];
                        gemm_tn(&g, val(x), &mut dw, m, n, k);
                        acc(w, dw);
                    }
                }
                &Op::Add { a, b } => {
                    acc(a, g.clone());
                    acc(b, g.clone());
                }
                &Op::Mul { a, b } => {
                    let da = g.iter().zip(val(b)).map(|(g, y)| *g * *y).collect();
                    let db = g.iter().zip(val(a)).map(|(g, x)| *g * *x).collect();
                    acc(a, da);
                    acc(b, db);
                }
                &Op::Scale { a, c } => acc(a, g.iter().map(|v| *v * c).collect()),
                &Op::Sum { a } => acc(a, vec![g[0]; val(a).len()]),
                &Op::Reshape { a } => acc(a, g.clone()),
                &Op::SliceCols { a, start, cols } => {
                    let width = node.value.last_dim();
                    let rows = g.len() / width;
                    let mut da = vec![T::zero(); rows * cols];
                    for r in 0..rows {
                        da[r * cols + start..r * cols + start + width]
                            .copy_from_slice(&g[r * width..(r + 1) * width]);
                    }
                    acc(a, da);
                }
                &Op::Softmax { a } => {
                    let n = node.value.last_dim();
                    let y = node.value.data();
                    let mut da = vec![T::zero(); y.len()];
                    for ((dx, yr), gr) in da
                        .chunks_exact_mut(n)
                        .zip(y.chunks_exact(n))
                        .zip(g.chunks_exact(n))
                    {
                        let inner = dot(yr, gr);
                        for j in 0..n {
                            dx[j] = yr[j] * (gr[j] - inner);
                        }
                    }
                    acc(a, da);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    xhat,
                    rstd,
                } => {
                    let (x, gain) = (*x, *gain);
                    let gv = val(gain);
                    let h = gv.len();
                    let hf = T::from_f64(h as f64);
                    if wants(gain) {
                        let mut dg = vec![T::zero(); h];
                        for (gr, xr) in g.chunks_exact(h).zip(xhat.chunks_exact(h)) {
                            for j in 0..h {
                                dg[j] = dg[j] + gr[j] * xr[j];
                            }
                        }
                        acc(gain, dg);
                    }
                    if wants(x) {
                        let mut dx = vec![T::zero(); g.len()];
                        let mut dxhat = vec![T::zero(); h];
                        for (r, (gr, xr)) in g.chunks_exact(h).zip(xhat.chunks_exact(h)).enumerate()
                        {
                            for j in 0..h {
                                dxhat[j] = gr[j] * gv[j];
                            }
                            let mean_d = dxhat.iter().fold(T::zero(), |a, v| a + *v) / hf;
                            let mean_dx = dot(&dxhat, xr) / hf;
                            let out = &mut dx[r * h..(r + 1) * h];
                            for j in 0..h {
                                out[j] = rstd[r] * (dxhat[j] - mean_d - xr[j] * mean_dx);
                            }
                        }
                        acc(x, dx);
                    }
                }
                &Op::Gelu { a } => {
                    let da = g
                        .iter()
                        .zip(val(a))
                        .map(|(g, x)| *g * x.gelu_grad())
                        .collect();
                    acc(a, da);
                }
                &Op::GeGlu { a } => {
                    let src = val(a);
                    let half = node.value.last_dim();
                    let cols = half * 2;
                    let mut da = vec![T::zero(); src.len()];
                    for (r, gr) in g.chunks_exact(half).enumerate() {
                        let row = &src[r * cols..(r + 1) * cols];
                        let drow = &mut da[r * cols..(r + 1) * cols];
                        for j in 0..half {
                            let (u, gate) = (row[j], row[half + j]);
                            drow[j] = gr[j] * gate * u.gelu_grad();
                            drow[half + j] = gr[j] * u.gelu();
                        }
                    }
                    acc(a, da);
                }
                Op::Rotary {
                    a,
                    cos,
                    sin,
                    heads,
                    head_dim,
                } => {
                    let (heads, d) = (*heads, *head_dim);
                    let half = d / 2;
                    let rows = g.len() / (heads * d);
                    let mut da = vec![T::zero(); g.len()];
                    for r in 0..rows {
                        for h in 0..heads {
                            let bi = (r * heads + h) * d;
                            for i in 0..half {
                                let (c, s) = (cos[r * half + i], sin[r * half + i]);
                                let (g1, g2) = (g[bi + i], g[bi + half + i]);
                                da[bi + i] = g1 * c + g2 * s;
                                da[bi + half + i] = g2 * c - g1 * s;
                            }
                        }
                    }
                    acc(*a, da);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    probs,
                    mask,
                    heads,
                } => {
                    let (q, k, v, heads) = (*q, *k, *v, *heads);
                    let (qd, kd, vd) = (val(q), val(k), val(v));
                    let width = node.value.last_dim();
                    let rows = g.len() / width;
                    let d = width / heads;
                    let s = mask.seq_len;
                    let blocks = rows / s;
                    let scale = T::from_f64(1.0 / (d as f64).sqrt());
                    let mut dq = vec![T::zero(); g.len()];
                    let mut dk = vec![T::zero(); g.len()];
                    let mut dv = vec![T::zero(); g.len()];
                    let mut dp = vec![T::zero(); s];
                    for b in 0..blocks {
                        for h in 0..heads {
                            let pbase = (b * heads + h) * s * s;
                            for i in 0..s {
                                let off_i = (b * s + i) * width + h * d;
                                let gi = &g[off_i..off_i + d];
                                let prow = &probs[pbase + i * s..pbase + (i + 1) * s];
                                let (lo, hi) = mask.key_range(i);
                                let mut inner = T::zero();
                                for j in lo..hi {
                                    let off_j = (b * s + j) * width + h * d;
                                    dp[j] = dot(gi, &vd[off_j..off_j + d]);
                                    inner = inner + prow[j] * dp[j];
                                    axpy(prow[j], gi, &mut dv[off_j..off_j + d]);
                                }
                                for j in lo..hi {
                                    let off_j = (b * s + j) * width + h * d;
                                    let ds = prow[j] * (dp[j] - inner) * scale;
                                    axpy(ds, &kd[off_j..off_j + d], &mut dq[off_i..off_i + d]);
                                    axpy(ds, &qd[off_i..off_i + d], &mut dk[off_j..off_j + d]);
                                }
                            }
                        }
                    }
                    acc(q, dq);
                    acc(k, dk);
                    acc(v, dv);
                }
                Op::Embedding { table, ids } => {
                    let table = *table;
                    let h = node.value.last_dim();
                    let mut dt = vec![T::zero(); val(table).len()];
                    for (r, &id) in ids.iter().enumerate() {
                        let id = id as usize;
                        for (t, gv) in dt[id * h..(id + 1) * h]
                            .iter_mut()
                            .zip(&g[r * h..(r + 1) * h])
                        {
                            *t = *t + *gv;
                        }
                    }
                    acc(table, dt);
                }
                Op::Dropout { a, mask } => {
                    acc(*a, g.iter().zip(mask).map(|(g, m)| *g * *m).collect());
                }
                Op::CrossEntropy {
                    logits,
                    rows,
                    probs,
                } => {
                    let logits = *logits;
                    let vocab = nodes[logits].value.last_dim();
                    let mut dl = vec![T::zero(); val(logits).len()];
                    if !rows.is_empty() {
                        let coef = g[0] / T::from_f64(rows.len() as f64);
                        for (slot, &(r, label)) in rows.iter().enumerate() {
                            let p = &probs[slot * vocab..(slot + 1) * vocab];
                            let out = &mut dl[r * vocab..(r + 1) * vocab];
                            for j in 0..vocab {
                                out[j] = p[j] * coef;
                            }
                            out[label as usize] = out[label as usize] - coef;
                        }
                    }
                    acc(logits, dl);
                }
            }
            grads[idx] = Some(g);
        }

        for (node, g) in self.nodes.iter_mut().zip(&grads) {
            if node.value.requires_grad() {
                let g = g
                    .clone()
                    .unwrap_or_else(|| vec![T::zero(); node.value.numel()]);
                node.value.set_grad(g);
            }
        }
        self.grads = grads;
        Ok(())
    }
}

/// In-place max-subtracted softmax; returns the log-sum-exp of the input row.
fn softmax_in_place<T: Scalar>(row: &mut [T]) -> T {
    let max = row.iter().fold(T::neg_infinity(), |m, v| m.max(*v));
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
    max + total.ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        t(
            shape,
            &(0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>(),
        )
    }

    #[test]
    fn matmul_identity_and_hand_cases() {
        let mut tape = Tape::new();
        let i2 = tape.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let c = tape.matmul(i2, b).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = tape.leaf(t(&[1, 2], &[1.0, 2.0]));
        let b = tape.leaf(t(&[2, 1], &[3.0, 4.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_cases() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[1, 4], &[0.0; 4]));
        let y = tape.softmax_last(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.25; 4]);

        let x = tape.leaf(t(&[1, 2], &[1000.0, 0.0]));
        let y = tape.softmax_last(x).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - 1.0).abs() < 1e-12 && d[1].abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let row = random(&mut rng, &[1, 9]);
        let oracle: Vec<f64> = {
            let e: Vec<f64> = row.data().iter().map(|v| v.exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|v| v / s).collect()
        };
        let x = tape.leaf(row);
        let y = tape.softmax_last(x).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_cases() {
        let mut tape = Tape::<f64>::new();
        let ones = tape.leaf(t(&[3], &[1.0; 3]));
        let x = tape.leaf(t(&[1, 3], &[5.0; 3]));
        let y = tape.layer_norm(x, ones, 1e-12).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0; 3]);

        let ones2 = tape.leaf(t(&[2], &[1.0; 2]));
        let x = tape.leaf(t(&[1, 2], &[1.0, -1.0]));
        let y = tape.layer_norm(x, ones2, 0.0).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, -1.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let row = random(&mut rng, &[1, 7]);
        let gain = random(&mut rng, &[7]);
        let eps = 1e-12;
        let mean: f64 = row.data().iter().sum::<f64>() / 7.0;
        let var: f64 = row.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 7.0;
        let oracle: Vec<f64> = row
            .data()
            .iter()
            .zip(gain.data())
            .map(|(v, g)| (v - mean) / (var + eps).sqrt() * g)
            .collect();
        let x = tape.leaf(row);
        let g = tape.leaf(gain);
        let y = tape.layer_norm(x, g, eps).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rotary_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut tape = Tape::<f64>::new();
        let x0 = random(&mut rng, &[1, 2, 4]);
        let xv = tape.leaf(x0.clone());
        let y = tape.rotary(xv, &[0], 10_000.0).unwrap();
        assert_eq!(tape.value(y).data(), x0.data());

        // position 1, base 10000, d = 4: frequencies 1 and 1e-2.
        let x1 = t(&[1, 1, 4], &[0.3, -1.2, 0.8, 0.5]);
        let xv = tape.leaf(x1.clone());
        let y = tape.rotary(xv, &[1], 10_000.0).unwrap();
        let thetas = [1.0f64, 10_000f64.powf(-0.5)];
        let xs = x1.data();
        let mut oracle = [0.0; 4];
        for i in 0..2 {
            let (c, s) = (thetas[i].cos(), thetas[i].sin());
            oracle[i] = xs[i] * c - xs[i + 2] * s;
            oracle[i + 2] = xs[i + 2] * c + xs[i] * s;
        }
        for (a, b) in tape.value(y).data().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-9);
        }

        let odd = tape.leaf(Tensor::zeros(&[1, 1, 3]));
        assert!(matches!(tape.rotary(odd, &[0], 1e4), Err(Error::Config(_))));
    }

    #[test]
    fn cross_entropy_cases() {
        let v = 50_368;
        let mut tape = Tape::<f64>::new();
        let logits = tape.leaf(Tensor::zeros(&[2, v]));
        let ce = tape.cross_entropy(logits, &[Some(5), Some(7)]).unwrap();
        assert!((tape.value(ce.loss).item() - (v as f64).ln()).abs() < 1e-3);

        let mut hot = vec![0.0; 10];
        hot[4] = 1e4;
        let logits = tape.leaf(t(&[1, 10], &hot));
        let ce = tape.cross_entropy(logits, &[Some(4)]).unwrap();
        assert!(tape.value(ce.loss).item() < 1e-12);

        let logits = tape.leaf(Tensor::zeros(&[2, 3]));
        let ce = tape.cross_entropy(logits, &[None, None]).unwrap();
        assert!(ce.is_empty());
        assert_eq!(tape.value(ce.loss).item(), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(&mut rng, &[3, 10])
            .data()
            .iter()
            .map(|v| v * 4.0)
            .collect::<Vec<_>>();
        let labels = [Some(2), None, Some(9)];
        let mut oracle = 0.0;
        for (r, l) in [(0usize, 2usize), (2, 9)] {
            let row = &x[r * 10..(r + 1) * 10];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            oracle += lse - row[l];
        }
        oracle /= 2.0;
        let logits = tape.leaf(t(&[3, 10], &x));
        let ce = tape.cross_entropy(logits, &labels).unwrap();
        assert!((tape.value(ce.loss).item() - oracle).abs() < 1e-10);
    }

    #[test]
    fn cross_entropy_rejects_non_finite() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.leaf(t(&[1, 2], &[f64::NAN, 0.0]));
        assert!(matches!(
            tape.cross_entropy(logits, &[Some(0)]),
            Err(Error::Numerical { .. })
        ));
    }

    #[test]
    fn backward_simple_roots() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
        assert_eq!(tape.value(x).grad().unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn attention_mask_ranges_agree_with_allows() {
        for causal in [false, true] {
            for window in [None, Some(0), Some(2), Some(10)] {
                let mask = AttentionMask {
                    seq_len: 7,
                    causal,
                    window,
                };
                for i in 0..7 {
                    let (lo, hi) = mask.key_range(i);
                    for j in 0..7 {
                        assert_eq!(mask.allows(i, j), (lo..hi).contains(&j));
                    }
                }
            }
        }
    }
}
