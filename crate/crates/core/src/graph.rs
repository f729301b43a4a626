//! Reverse-mode autodiff over a recorded op tape.
//!
//! A [`Graph`] is rebuilt for every forward pass: each op computes its output
//! eagerly and is pushed onto the tape; [`Graph::backward`] replays the tape
//! in reverse, accumulating gradients into per-buffer slots. Buffers are
//! immutable once written; gradient slots are zero-initialized and additive,
//! so a buffer used by several consumers collects all their contributions.
//!
//! Gradients are only materialized along paths that reach a buffer registered
//! with `needs_grad` (a trainable parameter). Frozen parameters and raw
//! inputs short-circuit their whole upstream backward work.

use crate::error::{Error, Result};
use crate::tensor::{gemm, softmax_row_inplace, Real, Tensor};

pub type BufId = usize;

pub(crate) const LN_EPS: f64 = 1e-5;
pub(crate) const GELU_C0: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
pub(crate) const GELU_C1: f64 = 0.044_715;

/// Attention mask: which (query row, key column) pairs may attend.
#[derive(Debug, Clone)]
pub enum AttnMask {
    /// Every position may attend everywhere.
    Full,
    /// Row i attends to columns 0..=i (requires square score matrix).
    Causal,
    /// Explicit allow matrix, row-major rows x cols.
    Custom(Vec<bool>),
}

impl AttnMask {
    fn allows(&self, i: usize, j: usize, cols: usize) -> bool {
        match self {
            AttnMask::Full => true,
            AttnMask::Causal => j <= i,
            AttnMask::Custom(allow) => allow[i * cols + j],
        }
    }

    /// Every row must keep at least one allowed entry.
    pub fn validate(&self, rows: usize, cols: usize) -> Result<()> {
        match self {
            AttnMask::Full => Ok(()),
            AttnMask::Causal => {
                if rows != cols {
                    return Err(Error::Shape {
                        op: "attention mask",
                        detail: format!("causal mask needs square scores, got {rows}x{cols}"),
                    });
                }
                Ok(())
            }
            AttnMask::Custom(allow) => {
                if allow.len() != rows * cols {
                    return Err(Error::Shape {
                        op: "attention mask",
                        detail: format!(
                            "mask has {} entries for {rows}x{cols} scores",
                            allow.len()
                        ),
                    });
                }
                for i in 0..rows {
                    if !allow[i * cols..(i + 1) * cols].iter().any(|&a| a) {
                        return Err(Error::InvalidArg {
                            what: "attention mask",
                            detail: format!("row {i} forbids every key"),
                        });
                    }
                }
                Ok(())
            }
        }
    }
}

struct Buf<T> {
    data: Vec<T>,
    rows: usize,
    cols: usize,
    needs_grad: bool,
}

enum Op<T> {
    /// out = a @ b, with `b_t` meaning b is stored transposed (n, k).
    Matmul {
        a: BufId,
        b: BufId,
        b_t: bool,
        out: BufId,
    },
    Add {
        a: BufId,
        b: BufId,
        out: BufId,
    },
    /// out[i, :] = a[i, :] + b[0, :]
    AddRow {
        a: BufId,
        b: BufId,
        out: BufId,
    },
    Scale {
        a: BufId,
        c: T,
        out: BufId,
    },
    Softmax {
        a: BufId,
        out: BufId,
    },
    Gelu {
        a: BufId,
        out: BufId,
    },
    LayerNorm {
        x: BufId,
        gain: BufId,
        bias: BufId,
        out: BufId,
        /// (mean, 1/std) per row, saved at forward time.
        stats: Vec<(T, T)>,
    },
    Gather {
        table: BufId,
        ids: Vec<usize>,
        out: BufId,
    },
    /// Mixed embedding select: ids below `k` index `stat`, ids at or above
    /// `k` index `dynm` (shifted by k).
    SelectEmbed {
        stat: BufId,
        dynm: Option<BufId>,
        ids: Vec<u32>,
        k: usize,
        out: BufId,
    },
    MeanRows {
        a: BufId,
        out: BufId,
    },
    SliceCols {
        a: BufId,
        start: usize,
        out: BufId,
    },
    ConcatCols {
        parts: Vec<BufId>,
        out: BufId,
    },
    ConcatRows {
        parts: Vec<BufId>,
        out: BufId,
    },
    /// Mean over non-ignored positions of the smoothed negative log
    /// likelihood; output is a 1x1 scalar.
    CrossEntropy {
        probs: BufId,
        labels: Vec<u32>,
        ignore: u32,
        smoothing: T,
        count: usize,
        out: BufId,
    },
    Dropout {
        a: BufId,
        keep: Vec<bool>,
        scale: T,
        out: BufId,
    },
}

impl<T> Op<T> {
    fn out(&self) -> BufId {
        match self {
            Op::Matmul { out, .. }
            | Op::Add { out, .. }
            | Op::AddRow { out, .. }
            | Op::Scale { out, .. }
            | Op::Softmax { out, .. }
            | Op::Gelu { out, .. }
            | Op::LayerNorm { out, .. }
            | Op::Gather { out, .. }
            | Op::SelectEmbed { out, .. }
            | Op::MeanRows { out, .. }
            | Op::SliceCols { out, .. }
            | Op::ConcatCols { out, .. }
            | Op::ConcatRows { out, .. }
            | Op::CrossEntropy { out, .. }
            | Op::Dropout { out, .. } => *out,
        }
    }
}

pub struct Graph<T: Real> {
    bufs: Vec<Buf<T>>,
    ops: Vec<Option<Op<T>>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn acc<T: Real>(slot: &mut Option<Vec<T>>, len: usize) -> &mut Vec<T> {
    slot.get_or_insert_with(|| vec![T::ZERO; len])
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            bufs: Vec::new(),
            ops: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn num_ops(&self) -> usize {
        self.ops.len()
    }

    fn push(&mut self, data: Vec<T>, rows: usize, cols: usize, needs_grad: bool) -> BufId {
        assert_eq!(data.len(), rows * cols, "buffer size mismatch");
        self.bufs.push(Buf {
            data,
            rows,
            cols,
            needs_grad,
        });
        self.grads.push(None);
        self.bufs.len() - 1
    }

    /// Raw input, no gradient tracked.
    pub fn input(&mut self, rows: usize, cols: usize, data: Vec<T>) -> BufId {
        self.push(data, rows, cols, false)
    }

    /// Parameter buffer; gradient is tracked iff `trainable`.
    pub fn param(&mut self, t: &Tensor<T>, trainable: bool) -> BufId {
        let (rows, cols) = match *t.shape() {
            [r, c] => (r, c),
            [n] => (1, n),
            ref s => panic!("parameters must be vectors or matrices, got {s:?}"),
        };
        self.push(t.data().to_vec(), rows, cols, trainable)
    }

    pub fn data(&self, id: BufId) -> &[T] {
        &self.bufs[id].data
    }

    pub fn shape(&self, id: BufId) -> (usize, usize) {
        (self.bufs[id].rows, self.bufs[id].cols)
    }

    pub fn scalar(&self, id: BufId) -> T {
        assert_eq!(self.bufs[id].data.len(), 1, "scalar() on non-scalar buffer");
        self.bufs[id].data[0]
    }

    pub fn grad(&self, id: BufId) -> Option<&[T]> {
        self.grads[id].as_deref()
    }

    fn out_needs(&self, inputs: &[BufId]) -> bool {
        inputs.iter().any(|&i| self.bufs[i].needs_grad)
    }

    fn record(&mut self, op: Op<T>) {
        self.ops.push(Some(op));
    }

    // ── ops ──────────────────────────────────────────────────────────────

    /// out = a @ b; if `b_t`, b is stored as its transpose (n, k).
    pub fn matmul(&mut self, a: BufId, b: BufId, b_t: bool) -> BufId {
        let (m, ka) = self.shape(a);
        let (br, bc) = self.shape(b);
        let (kb, n) = if b_t { (bc, br) } else { (br, bc) };
        assert_eq!(ka, kb, "matmul inner dims: {ka} vs {kb}");
        let mut out = vec![T::ZERO; m * n];
        gemm(
            m,
            ka,
            n,
            &self.bufs[a].data,
            false,
            &self.bufs[b].data,
            b_t,
            &mut out,
            false,
        );
        let needs = self.out_needs(&[a, b]);
        let out = self.push(out, m, n, needs);
        self.record(Op::Matmul { a, b, b_t, out });
        out
    }

    pub fn add(&mut self, a: BufId, b: BufId) -> BufId {
        let (m, n) = self.shape(a);
        assert_eq!(self.shape(b), (m, n), "add shape mismatch");
        let data = self.bufs[a]
            .data
            .iter()
            .zip(&self.bufs[b].data)
            .map(|(&x, &y)| x + y)
            .collect();
        let needs = self.out_needs(&[a, b]);
        let out = self.push(data, m, n, needs);
        self.record(Op::Add { a, b, out });
        out
    }

    /// Broadcast-add a row vector b (1, n) onto every row of a (m, n).
    pub fn add_row(&mut self, a: BufId, b: BufId) -> BufId {
        let (m, n) = self.shape(a);
        assert_eq!(self.shape(b), (1, n), "add_row: b must be (1, {n})");
        let data = {
            let bd = &self.bufs[b].data;
            self.bufs[a]
                .data
                .chunks(n)
                .flat_map(|row| row.iter().zip(bd).map(|(&x, &y)| x + y))
                .collect()
        };
        let needs = self.out_needs(&[a, b]);
        let out = self.push(data, m, n, needs);
        self.record(Op::AddRow { a, b, out });
        out
    }

    pub fn scale(&mut self, a: BufId, c: T) -> BufId {
        let (m, n) = self.shape(a);
        let data = self.bufs[a].data.iter().map(|&x| x * c).collect();
        let needs = self.out_needs(&[a]);
        let out = self.push(data, m, n, needs);
        self.record(Op::Scale { a, c, out });
        out
    }

    /// Row-wise masked softmax, stabilized by per-row max subtraction.
    /// Masked-out entries get probability exactly zero.
    pub fn softmax_rows(&mut self, a: BufId, mask: &AttnMask) -> BufId {
        let (m, n) = self.shape(a);
        let mut data = self.bufs[a].data.clone();
        for i in 0..m {
            softmax_row_inplace(&mut data[i * n..(i + 1) * n], |j| mask.allows(i, j, n));
        }
        let needs = self.out_needs(&[a]);
        let out = self.push(data, m, n, needs);
        self.record(Op::Softmax { a, out });
        out
    }

    pub fn gelu(&mut self, a: BufId) -> BufId {
        let (m, n) = self.shape(a);
        let c0 = T::from_f64(GELU_C0);
        let c1 = T::from_f64(GELU_C1);
        let half = T::from_f64(0.5);
        let data = self.bufs[a]
            .data
            .iter()
            .map(|&x| {
                let u = c0 * (x + c1 * x * x * x);
                half * x * (T::ONE + u.tanh())
            })
            .collect();
        let needs = self.out_needs(&[a]);
        let out = self.push(data, m, n, needs);
        self.record(Op::Gelu { a, out });
        out
    }

    pub fn layer_norm(&mut self, x: BufId, gain: BufId, bias: BufId) -> BufId {
        let (m, n) = self.shape(x);
        assert_eq!(self.shape(gain), (1, n), "layer_norm gain shape");
        assert_eq!(self.shape(bias), (1, n), "layer_norm bias shape");
        let eps = T::from_f64(LN_EPS);
        let inv_n = T::from_f64(1.0 / n as f64);
        let mut data = vec![T::ZERO; m * n];
        let mut stats = Vec::with_capacity(m);
        for i in 0..m {
            let row = &self.bufs[x].data[i * n..(i + 1) * n];
            let mut mean = T::ZERO;
            for &v in row {
                mean += v;
            }
            mean *= inv_n;
            let mut var = T::ZERO;
            for &v in row {
                let d = v - mean;
                var += d * d;
            }
            var *= inv_n;
            let rstd = T::ONE / (var + eps).sqrt();
            stats.push((mean, rstd));
            let g = &self.bufs[gain].data;
            let b = &self.bufs[bias].data;
            for j in 0..n {
                data[i * n + j] = (row[j] - mean) * rstd * g[j] + b[j];
            }
        }
        let needs = self.out_needs(&[x, gain, bias]);
        let out = self.push(data, m, n, needs);
        self.record(Op::LayerNorm {
            x,
            gain,
            bias,
            out,
            stats,
        });
        out
    }

    /// Row lookup: out[i, :] = table[ids[i], :].
    pub fn gather(&mut self, table: BufId, ids: &[usize]) -> BufId {
        let (k, d) = self.shape(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            assert!(id < k, "gather: id {id} out of range {k}");
            data.extend_from_slice(&self.bufs[table].data[id * d..(id + 1) * d]);
        }
        let needs = self.out_needs(&[table]);
        let out = self.push(data, ids.len(), d, needs);
        self.record(Op::Gather {
            table,
            ids: ids.to_vec(),
            out,
        });
        out
    }

    /// Extended-vocabulary embedding select. Ids below `k` pull rows of the
    /// static table; id `k + n` pulls row n of `dynm`. The static table is
    /// never touched by any dynamic-side projection.
    pub fn select_embed(
        &mut self,
        stat: BufId,
        dynm: Option<BufId>,
        ids: &[u32],
        k: usize,
    ) -> BufId {
        let (ks, d) = self.shape(stat);
        assert_eq!(ks, k, "select_embed: static table rows");
        let n_dyn = dynm.map(|b| self.shape(b).0).unwrap_or(0);
        if let Some(db) = dynm {
            assert_eq!(self.shape(db).1, d, "select_embed: dynamic width");
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            let id = id as usize;
            if id < k {
                data.extend_from_slice(&self.bufs[stat].data[id * d..(id + 1) * d]);
            } else {
                let r = id - k;
                assert!(
                    r < n_dyn,
                    "select_embed: dynamic id {id} out of range K+{n_dyn}"
                );
                let db = dynm.unwrap();
                data.extend_from_slice(&self.bufs[db].data[r * d..(r + 1) * d]);
            }
        }
        let mut ins = vec![stat];
        if let Some(db) = dynm {
            ins.push(db);
        }
        let needs = self.out_needs(&ins);
        let out = self.push(data, ids.len(), d, needs);
        self.record(Op::SelectEmbed {
            stat,
            dynm,
            ids: ids.to_vec(),
            k,
            out,
        });
        out
    }

    /// Mean over rows: (t, d) -> (1, d).
    pub fn mean_rows(&mut self, a: BufId) -> BufId {
        let (t, d) = self.shape(a);
        assert!(t > 0, "mean_rows of empty matrix");
        let inv = T::from_f64(1.0 / t as f64);
        let mut data = vec![T::ZERO; d];
        for row in self.bufs[a].data.chunks(d) {
            for (o, &v) in data.iter_mut().zip(row) {
                *o += v;
            }
        }
        for v in data.iter_mut() {
            *v *= inv;
        }
        let needs = self.out_needs(&[a]);
        let out = self.push(data, 1, d, needs);
        self.record(Op::MeanRows { a, out });
        out
    }

    pub fn slice_cols(&mut self, a: BufId, start: usize, len: usize) -> BufId {
        let (m, n) = self.shape(a);
        assert!(start + len <= n, "slice_cols out of range");
        let mut data = Vec::with_capacity(m * len);
        for row in self.bufs[a].data.chunks(n) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let needs = self.out_needs(&[a]);
        let out = self.push(data, m, len, needs);
        self.record(Op::SliceCols { a, start, out });
        out
    }

    pub fn concat_cols(&mut self, parts: &[BufId]) -> BufId {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let m = self.shape(parts[0]).0;
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                let (pm, pn) = self.shape(p);
                assert_eq!(pm, m, "concat_cols: row mismatch");
                data.extend_from_slice(&self.bufs[p].data[i * pn..(i + 1) * pn]);
            }
        }
        let needs = self.out_needs(parts);
        let out = self.push(data, m, total, needs);
        self.record(Op::ConcatCols {
            parts: parts.to_vec(),
            out,
        });
        out
    }

    pub fn concat_rows(&mut self, parts: &[BufId]) -> BufId {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let n = self.shape(parts[0]).1;
        let total: usize = parts.iter().map(|&p| self.shape(p).0).sum();
        let mut data = Vec::with_capacity(total * n);
        for &p in parts {
            assert_eq!(self.shape(p).1, n, "concat_rows: col mismatch");
            data.extend_from_slice(&self.bufs[p].data);
        }
        let needs = self.out_needs(parts);
        let out = self.push(data, total, n, needs);
        self.record(Op::ConcatRows {
            parts: parts.to_vec(),
            out,
        });
        out
    }

    /// Label-smoothed cross entropy over probability rows; the gradient with
    /// respect to upstream logits (through the softmax producing `probs`)
    /// comes out as the usual p - q. Returns a scalar buffer.
    pub fn cross_entropy(
        &mut self,
        probs: BufId,
        labels: &[u32],
        ignore: u32,
        smoothing: f64,
    ) -> Result<BufId> {
        let (m, c) = self.shape(probs);
        if labels.len() != m {
            return Err(Error::Shape {
                op: "cross_entropy",
                detail: format!("{} labels for {m} rows", labels.len()),
            });
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::InvalidArg {
                what: "cross_entropy smoothing",
                detail: format!("{smoothing} outside [0, 1)"),
            });
        }
        let count = labels.iter().filter(|&&l| l != ignore).count();
        if count == 0 {
            return Err(Error::InvalidArg {
                what: "cross_entropy labels",
                detail: "every position is ignored".into(),
            });
        }
        for (i, &l) in labels.iter().enumerate() {
            if l != ignore && l as usize >= c {
                return Err(Error::InvalidArg {
                    what: "cross_entropy labels",
                    detail: format!("label {l} at row {i} outside {c} classes"),
                });
            }
        }
        let sm = T::from_f64(smoothing);
        let loss = ce_forward(&self.bufs[probs].data, c, labels, ignore, sm, count)?;
        let needs = self.out_needs(&[probs]);
        let out = self.push(vec![loss], 1, 1, needs);
        self.record(Op::CrossEntropy {
            probs,
            labels: labels.to_vec(),
            ignore,
            smoothing: sm,
            count,
            out,
        });
        Ok(out)
    }

    /// Inverted-scale dropout with an explicit keep mask (1/(1-p) on kept
    /// entries), so eval-time forwards need no rescaling.
    pub fn dropout(&mut self, a: BufId, keep: Vec<bool>, p: f64) -> BufId {
        let (m, n) = self.shape(a);
        assert_eq!(keep.len(), m * n, "dropout mask size");
        assert!((0.0..1.0).contains(&p), "dropout rate {p}");
        let scale = T::from_f64(1.0 / (1.0 - p));
        let data = self.bufs[a]
            .data
            .iter()
            .zip(&keep)
            .map(|(&x, &k)| if k { x * scale } else { T::ZERO })
            .collect();
        let needs = self.out_needs(&[a]);
        let out = self.push(data, m, n, needs);
        self.record(Op::Dropout {
            a,
            keep,
            scale,
            out,
        });
        out
    }

    /// Attention weights softmax(Q Kt / sqrt(d)) applied to V.
    /// Q: (n, d), K: (m, d), V: (m, dv). Rejects masks that forbid a whole
    /// row and mismatched widths.
    pub fn scaled_dot_attention(
        &mut self,
        q: BufId,
        k: BufId,
        v: BufId,
        mask: &AttnMask,
    ) -> Result<BufId> {
        let (n, dq) = self.shape(q);
        let (m, dk) = self.shape(k);
        let (mv, _dv) = self.shape(v);
        if dq != dk {
            return Err(Error::Shape {
                op: "scaled_dot_attention",
                detail: format!("query width {dq} vs key width {dk}"),
            });
        }
        if m != mv {
            return Err(Error::Shape {
                op: "scaled_dot_attention",
                detail: format!("{m} keys vs {mv} values"),
            });
        }
        mask.validate(n, m)?;
        let scores = self.matmul(q, k, true);
        let scaled = self.scale(scores, T::from_f64(1.0 / (dq as f64).sqrt()));
        let weights = self.softmax_rows(scaled, mask);
        Ok(self.matmul(weights, v, false))
    }

    // ── backward ─────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss buffer. Gradients accumulate across
    /// every use of a buffer; callers run one backward per graph.
    pub fn backward(&mut self, loss: BufId) {
        assert_eq!(
            self.bufs[loss].data.len(),
            1,
            "backward from non-scalar buffer"
        );
        self.backward_from(loss, &[T::ONE]);
    }

    /// Reverse sweep seeded with an explicit upstream gradient, for stitching
    /// a consumer graph's gradient into the producer of a shared buffer.
    pub fn backward_from(&mut self, out: BufId, seed: &[T]) {
        assert_eq!(
            seed.len(),
            self.bufs[out].data.len(),
            "seed gradient size mismatch"
        );
        let g = acc(&mut self.grads[out], seed.len());
        for (gi, si) in g.iter_mut().zip(seed) {
            *gi += *si;
        }
        for oi in (0..self.ops.len()).rev() {
            let op = self.ops[oi].take().expect("op already taken");
            let out = op.out();
            if self.bufs[out].needs_grad {
                if let Some(dout) = self.grads[out].take() {
                    backward_op(&self.bufs, &mut self.grads, &op, &dout);
                    self.grads[out] = Some(dout);
                }
            }
            self.ops[oi] = Some(op);
        }
    }
}

/// Applies one op's vector-Jacobian product, adding into input grad slots.
/// `bufs` is read-only here, so saved activations stay available.
fn backward_op<T: Real>(
    bufs: &[Buf<T>],
    grads: &mut [Option<Vec<T>>],
    op: &Op<T>,
    dout: &[T],
) {
    let needs = |id: BufId| bufs[id].needs_grad;
    let len = |id: BufId| bufs[id].data.len();
    match op {
        Op::Matmul { a, b, b_t, out } => {
            let m = bufs[*a].rows;
            let k = bufs[*a].cols;
            let n = bufs[*out].cols;
            if needs(*a) {
                let da = acc(&mut grads[*a], m * k);
                // dA = dC @ B_log^T
                gemm(m, n, k, dout, false, &bufs[*b].data, !*b_t, da, true);
            }
            if needs(*b) {
                let db = acc(&mut grads[*b], len(*b));
                if *b_t {
                    // b stored (n, k): dB_stored = dC^T @ A
                    gemm(n, m, k, dout, true, &bufs[*a].data, false, db, true);
                } else {
                    // b stored (k, n): dB = A^T @ dC
                    gemm(k, m, n, &bufs[*a].data, true, dout, false, db, true);
                }
            }
        }
        Op::Add { a, b, .. } => {
            for &x in &[*a, *b] {
                if needs(x) {
                    let g = acc(&mut grads[x], len(x));
                    for (gi, di) in g.iter_mut().zip(dout) {
                        *gi += *di;
                    }
                }
            }
        }
        Op::AddRow { a, b, .. } => {
            let (m, n) = (bufs[*a].rows, bufs[*a].cols);
            if needs(*a) {
                let g = acc(&mut grads[*a], m * n);
                for (gi, di) in g.iter_mut().zip(dout) {
                    *gi += *di;
                }
            }
            if needs(*b) {
                let g = acc(&mut grads[*b], n);
                for i in 0..m {
                    for j in 0..n {
                        g[j] += dout[i * n + j];
                    }
                }
            }
        }
        Op::Scale { a, c, .. } => {
            if needs(*a) {
                let g = acc(&mut grads[*a], len(*a));
                for (gi, di) in g.iter_mut().zip(dout) {
                    *gi += *c * *di;
                }
            }
        }
        Op::Softmax { a, out } => {
            if needs(*a) {
                let (m, n) = (bufs[*a].rows, bufs[*a].cols);
                let y = &bufs[*out].data;
                let g = acc(&mut grads[*a], m * n);
                for i in 0..m {
                    let yr = &y[i * n..(i + 1) * n];
                    let dr = &dout[i * n..(i + 1) * n];
                    let mut dot = T::ZERO;
                    for (yj, dj) in yr.iter().zip(dr) {
                        dot += *yj * *dj;
                    }
                    for j in 0..n {
                        g[i * n + j] += yr[j] * (dr[j] - dot);
                    }
                }
            }
        }
        Op::Gelu { a, .. } => {
            if needs(*a) {
                let c0 = T::from_f64(GELU_C0);
                let c1 = T::from_f64(GELU_C1);
                let half = T::from_f64(0.5);
                let three = T::from_f64(3.0);
                let x = &bufs[*a].data;
                let g = acc(&mut grads[*a], x.len());
                for (i, &xi) in x.iter().enumerate() {
                    let u = c0 * (xi + c1 * xi * xi * xi);
                    let t = u.tanh();
                    let du = c0 * (T::ONE + three * c1 * xi * xi);
                    let dy = half * (T::ONE + t) + half * xi * (T::ONE - t * t) * du;
                    g[i] += dy * dout[i];
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            stats,
            ..
        } => {
            let (m, n) = (bufs[*x].rows, bufs[*x].cols);
            let inv_n = T::from_f64(1.0 / n as f64);
            let xd = &bufs[*x].data;
            let gd = &bufs[*gain].data;
            if needs(*bias) {
                let g = acc(&mut grads[*bias], n);
                for i in 0..m {
                    for j in 0..n {
                        g[j] += dout[i * n + j];
                    }
                }
            }
            if needs(*gain) {
                let g = acc(&mut grads[*gain], n);
                for i in 0..m {
                    let (mean, rstd) = stats[i];
                    for j in 0..n {
                        let xh = (xd[i * n + j] - mean) * rstd;
                        g[j] += dout[i * n + j] * xh;
                    }
                }
            }
            if needs(*x) {
                let g = acc(&mut grads[*x], m * n);
                for i in 0..m {
                    let (mean, rstd) = stats[i];
                    let mut s1 = T::ZERO; // mean of dy*gain
                    let mut s2 = T::ZERO; // mean of dy*gain*xhat
                    for j in 0..n {
                        let dyg = dout[i * n + j] * gd[j];
                        let xh = (xd[i * n + j] - mean) * rstd;
                        s1 += dyg;
                        s2 += dyg * xh;
                    }
                    s1 *= inv_n;
                    s2 *= inv_n;
                    for j in 0..n {
                        let dyg = dout[i * n + j] * gd[j];
                        let xh = (xd[i * n + j] - mean) * rstd;
                        g[i * n + j] += rstd * (dyg - s1 - xh * s2);
                    }
                }
            }
        }
        Op::Gather { table, ids, .. } => {
            if needs(*table) {
                let d = bufs[*table].cols;
                let g = acc(&mut grads[*table], len(*table));
                for (i, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        g[id * d + j] += dout[i * d + j];
                    }
                }
            }
        }
        Op::SelectEmbed {
            stat,
            dynm,
            ids,
            k,
            ..
        } => {
            let d = bufs[*stat].cols;
            if needs(*stat) {
                let g = acc(&mut grads[*stat], len(*stat));
                for (i, &id) in ids.iter().enumerate() {
                    let id = id as usize;
                    if id < *k {
                        for j in 0..d {
                            g[id * d + j] += dout[i * d + j];
                        }
                    }
                }
            }
            if let Some(db) = dynm {
                if needs(*db) {
                    let g = acc(&mut grads[*db], len(*db));
                    for (i, &id) in ids.iter().enumerate() {
                        let id = id as usize;
                        if id >= *k {
                            let r = id - *k;
                            for j in 0..d {
                                g[r * d + j] += dout[i * d + j];
                            }
                        }
                    }
                }
            }
        }
        Op::MeanRows { a, .. } => {
            if needs(*a) {
                let (t, d) = (bufs[*a].rows, bufs[*a].cols);
                let inv = T::from_f64(1.0 / t as f64);
                let g = acc(&mut grads[*a], t * d);
                for i in 0..t {
                    for j in 0..d {
                        g[i * d + j] += dout[j] * inv;
                    }
                }
            }
        }
        Op::SliceCols { a, start, out } => {
            if needs(*a) {
                let (m, n) = (bufs[*a].rows, bufs[*a].cols);
                let w = bufs[*out].cols;
                let g = acc(&mut grads[*a], m * n);
                for i in 0..m {
                    for j in 0..w {
                        g[i * n + start + j] += dout[i * w + j];
                    }
                }
            }
        }
        Op::ConcatCols { parts, out } => {
            let m = bufs[*out].rows;
            let total = bufs[*out].cols;
            let mut offset = 0;
            for &p in parts {
                let w = bufs[p].cols;
                if needs(p) {
                    let g = acc(&mut grads[p], m * w);
                    for i in 0..m {
                        for j in 0..w {
                            g[i * w + j] += dout[i * total + offset + j];
                        }
                    }
                }
                offset += w;
            }
        }
        Op::ConcatRows { parts, .. } => {
            let n = bufs[parts[0]].cols;
            let mut row0 = 0;
            for &p in parts {
                let r = bufs[p].rows;
                if needs(p) {
                    let g = acc(&mut grads[p], r * n);
                    for i in 0..r * n {
                        g[i] += dout[row0 * n + i];
                    }
                }
                row0 += r;
            }
        }
        Op::CrossEntropy {
            probs,
            labels,
            ignore,
            smoothing,
            count,
            ..
        } => {
            if needs(*probs) {
                let (m, c) = (bufs[*probs].rows, bufs[*probs].cols);
                let pd = &bufs[*probs].data;
                let g = acc(&mut grads[*probs], m * c);
                let uni = *smoothing * T::from_f64(1.0 / c as f64);
                let on = T::ONE - *smoothing;
                let inv_cnt = T::from_f64(1.0 / *count as f64);
                let floor = T::from_f64(1e-45);
                let d0 = dout[0];
                for (i, &l) in labels.iter().enumerate() {
                    if l == *ignore {
                        continue;
                    }
                    for j in 0..c {
                        let q = if j == l as usize { on + uni } else { uni };
                        if q != T::ZERO {
                            let p = pd[i * c + j].maximum(floor);
                            g[i * c + j] += d0 * (-q / p) * inv_cnt;
                        }
                    }
                }
            }
        }
        Op::Dropout { a, keep, scale, .. } => {
            if needs(*a) {
                let g = acc(&mut grads[*a], len(*a));
                for ((gi, di), &kp) in g.iter_mut().zip(dout).zip(keep) {
                    if kp {
                        *gi += *di * *scale;
                    }
                }
            }
        }
    }
}

fn ce_forward<T: Real>(
    probs: &[T],
    c: usize,
    labels: &[u32],
    ignore: u32,
    smoothing: T,
    count: usize,
) -> Result<T> {
    let uni = smoothing * T::from_f64(1.0 / c as f64);
    let on = T::ONE - smoothing;
    let floor = T::from_f64(1e-45);
    let mut total = T::ZERO;
    for (i, &l) in labels.iter().enumerate() {
        if l == ignore {
            continue;
        }
        let row = &probs[i * c..(i + 1) * c];
        let mut sum = T::ZERO;
        for &p in row {
            if !p.is_finite() || p.to_f64() < -1e-6 {
                return Err(Error::NonFinite {
                    op: "cross_entropy",
                    detail: format!("probability {p} at row {i}"),
                });
            }
            sum += p;
        }
        if (sum - T::ONE).abs().to_f64() > 1e-3 {
            return Err(Error::InvalidArg {
                what: "cross_entropy probs",
                detail: format!("row {i} sums to {sum}, expected 1"),
            });
        }
        let mut row_loss = T::ZERO;
        if smoothing != T::ZERO {
            for &p in row {
                row_loss += uni * -(p.maximum(floor).ln());
            }
        }
        row_loss += on * -(row[l as usize].maximum(floor).ln());
        total += row_loss;
    }
    Ok(total * T::from_f64(1.0 / count as f64))
}

/// Standalone probability-space cross entropy matching the tape op: mean over
/// non-ignored rows of the label-smoothed negative log likelihood.
pub fn cross_entropy<T: Real>(
    probs: &Tensor<T>,
    labels: &[u32],
    ignore: u32,
    smoothing: f64,
) -> Result<T> {
    let shape = probs.shape();
    if shape.len() != 2 {
        return Err(Error::Shape {
            op: "cross_entropy",
            detail: format!("expected matrix, got {shape:?}"),
        });
    }
    let (m, c) = (shape[0], shape[1]);
    if labels.len() != m {
        return Err(Error::Shape {
            op: "cross_entropy",
            detail: format!("{} labels for {m} rows", labels.len()),
        });
    }
    let count = labels.iter().filter(|&&l| l != ignore).count();
    if count == 0 {
        return Err(Error::InvalidArg {
            what: "cross_entropy labels",
            detail: "every position is ignored".into(),
        });
    }
    for (i, &l) in labels.iter().enumerate() {
        if l != ignore && l as usize >= c {
            return Err(Error::InvalidArg {
                what: "cross_entropy labels",
                detail: format!("label {l} at row {i} outside {c} classes"),
            });
        }
    }
    ce_forward(
        probs.data(),
        c,
        labels,
        ignore,
        T::from_f64(smoothing),
        count,
    )
}

/// Standalone attention forward matching the tape composite.
pub fn scaled_dot_attention<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    mask: &AttnMask,
) -> Result<Tensor<T>> {
    let mut g: Graph<T> = Graph::new();
    let to2 = |t: &Tensor<T>| -> Result<(usize, usize)> {
        match *t.shape() {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::Shape {
                op: "scaled_dot_attention",
                detail: format!("expected matrix, got {s:?}"),
            }),
        }
    };
    let (qn, qd) = to2(q)?;
    let (kn, kd) = to2(k)?;
    let (vn, vd) = to2(v)?;
    let qi = g.input(qn, qd, q.data().to_vec());
    let ki = g.input(kn, kd, k.data().to_vec());
    let vi = g.input(vn, vd, v.data().to_vec());
    let out = g.scaled_dot_attention(qi, ki, vi, mask)?;
    Ok(Tensor::new(vec![qn, vd], g.data(out).to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn t2(rows: usize, cols: usize, data: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![rows, cols], data.to_vec())
    }

    #[test]
    fn attention_uniform_weights_average_values() {
        // Q K^T all zeros -> uniform weights -> output rows are the value mean.
        let q = t2(2, 3, &[0.0; 6]);
        let k = t2(4, 3, &[0.0; 12]);
        let v = t2(4, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let out = scaled_dot_attention(&q, &k, &v, &AttnMask::Full).unwrap();
        for i in 0..2 {
            assert!((out.row(i)[0] - 4.0).abs() < 1e-12);
            assert!((out.row(i)[1] - 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_two_by_two_hand_case() {
        // d = 1, Q = [[1],[2]], K = [[1],[3]], V = [[10],[20]].
        // Row i weights: softmax([q_i*1, q_i*3]).
        let q = t2(2, 1, &[1.0, 2.0]);
        let k = t2(2, 1, &[1.0, 3.0]);
        let v = t2(2, 1, &[10.0, 20.0]);
        let out = scaled_dot_attention(&q, &k, &v, &AttnMask::Full).unwrap();
        for (i, qi) in [1.0f64, 2.0].iter().enumerate() {
            let e1 = (qi * 1.0).exp();
            let e2 = (qi * 3.0).exp();
            let want = (e1 * 10.0 + e2 * 20.0) / (e1 + e2);
            assert!((out.row(i)[0] - want).abs() < 1e-10, "row {i}");
        }
    }

    #[test]
    fn attention_causal_mask_blocks_future() {
        let q = t2(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let k = t2(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let v = t2(3, 1, &[1.0, 100.0, 10000.0]);
        let out = scaled_dot_attention(&q, &k, &v, &AttnMask::Causal).unwrap();
        // Row 0 may only see value 0.
        assert!((out.row(0)[0] - 1.0).abs() < 1e-12);
        // Row 1 sees values 0 and 1 only.
        assert!(out.row(1)[0] < 100.0 + 1e-9);
    }

    #[test]
    fn attention_rejects_fully_forbidden_row() {
        let q = t2(2, 2, &[0.0; 4]);
        let k = t2(2, 2, &[0.0; 4]);
        let v = t2(2, 2, &[0.0; 4]);
        let mask = AttnMask::Custom(vec![true, true, false, false]);
        assert!(scaled_dot_attention(&q, &k, &v, &mask).is_err());
    }

    #[test]
    fn attention_rejects_width_mismatch() {
        let q = t2(1, 3, &[0.0; 3]);
        let k = t2(2, 2, &[0.0; 4]);
        let v = t2(2, 2, &[0.0; 4]);
        assert!(scaled_dot_attention(&q, &k, &v, &AttnMask::Full).is_err());
    }

    #[test]
    fn cross_entropy_perfect_prediction_is_zero() {
        let probs = t2(1, 3, &[0.0, 1.0, 0.0]);
        let loss = cross_entropy(&probs, &[1], u32::MAX, 0.0).unwrap();
        assert!(loss.abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_uniform_row_is_log_v() {
        let v = 8usize;
        let probs = Tensor::new(vec![1, v], vec![1.0 / v as f64; v]);
        for smoothing in [0.0, 0.1] {
            let loss = cross_entropy(&probs, &[3], u32::MAX, smoothing).unwrap();
            assert!(
                (loss - (v as f64).ln()).abs() < 1e-9,
                "smoothing {smoothing}: {loss}"
            );
        }
    }

    #[test]
    fn cross_entropy_ignores_masked_positions() {
        let probs = t2(2, 2, &[0.9, 0.1, 0.5, 0.5]);
        let only_first = cross_entropy(&t2(1, 2, &[0.9, 0.1]), &[0], 7, 0.0).unwrap();
        let with_ignored = cross_entropy(&probs, &[0, 7], 7, 0.0).unwrap();
        assert!((only_first - with_ignored).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_all_ignored() {
        let probs = t2(1, 2, &[0.5, 0.5]);
        assert!(cross_entropy(&probs, &[7], 7, 0.0).is_err());
    }

    #[test]
    fn cross_entropy_rejects_unnormalized_rows() {
        let probs = t2(1, 2, &[0.9, 0.9]);
        assert!(cross_entropy(&probs, &[0], u32::MAX, 0.0).is_err());
    }

    #[test]
    fn softmax_then_ce_gradient_is_p_minus_q() {
        // Composition check: d loss / d logits = p - q for a single row.
        let mut g: Graph<f64> = Graph::new();
        let logits = Tensor::new(vec![1, 3], vec![0.3, -0.2, 0.9]);
        let mut lt = logits.clone();
        lt.set_requires_grad(true);
        let li = g.param(&lt, true);
        let probs = g.softmax_rows(li, &AttnMask::Full);
        let loss = g.cross_entropy(probs, &[2], u32::MAX, 0.1).unwrap();
        g.backward(loss);
        let grad = g.grad(li).unwrap();
        let p = crate::tensor::softmax(logits.data()).unwrap();
        for j in 0..3 {
            let q = if j == 2 { 0.9 + 0.1 / 3.0 } else { 0.1 / 3.0 };
            assert!(
                (grad[j] - (p[j] - q)).abs() < 1e-9,
                "coord {j}: {} vs {}",
                grad[j],
                p[j] - q
            );
        }
    }

    #[test]
    fn backward_accumulates_across_multiple_uses() {
        // a is consumed twice by add(a, a); both uses must contribute.
        // mean_rows over the single row is identity, slicing and re-adding
        // the two columns sums entries: tot = 2*a0 + 2*a1, d tot/d a = 2.
        let mut g: Graph<f64> = Graph::new();
        let mut a = Tensor::new(vec![1, 2], vec![1.0, 2.0]);
        a.set_requires_grad(true);
        let ai = g.param(&a, true);
        let s = g.add(ai, ai);
        let m = g.mean_rows(s);
        let col0 = g.slice_cols(m, 0, 1);
        let col1 = g.slice_cols(m, 1, 1);
        let tot = g.add(col0, col1);
        g.backward(tot);
        let grad = g.grad(ai).unwrap();
        assert!((grad[0] - 2.0).abs() < 1e-12);
        assert!((grad[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn frozen_buffers_get_no_gradient() {
        let mut g: Graph<f64> = Graph::new();
        let a = Tensor::new(vec![1, 2], vec![1.0, 2.0]);
        let b = Tensor::new(vec![1, 2], vec![3.0, 4.0]);
        let ai = g.param(&a, false);
        let bi = g.param(&b, true);
        let s = g.add(ai, bi);
        let m = g.mean_rows(s);
        let c0 = g.slice_cols(m, 0, 1);
        g.backward(c0);
        assert!(g.grad(ai).is_none());
        assert!(g.grad(bi).is_some());
    }

    #[test]
    fn gather_scatters_gradient_to_rows() {
        let mut g: Graph<f64> = Graph::new();
        let mut table = Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        table.set_requires_grad(true);
        let ti = g.param(&table, true);
        let rows = g.gather(ti, &[2, 0, 2]);
        let m = g.mean_rows(rows); // each column averaged over 3 picks
        let c = g.slice_cols(m, 0, 1);
        g.backward(c);
        let grad = g.grad(ti).unwrap();
        // Row 2 picked twice, row 0 once, row 1 never; d mean/d row = 1/3.
        assert!((grad[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((grad[2 * 2] - 2.0 / 3.0).abs() < 1e-12);
        assert!(grad[2].abs() < 1e-12);
    }
}
