//! Reverse-mode tape over dense `Tensor`s.
//!
//! Every primitive appends one node holding its value and the inputs it was
//! computed from. Nodes are appended in evaluation order, so walking the node
//! list backwards is a valid reverse topological order.

use super::tensor::{log_softmax_row, logsumexp_row, matmul_into, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Exp(Var),
    Log(Var),
    Gelu(Var),
    MatMul(Var, Var),
    Softmax(Var),
    LogSoftmax(Var),
    LogSumExp(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    SliceCols {
        x: Var,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<Var>),
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        segments: Vec<(usize, usize)>,
        heads: usize,
        probs: Vec<f64>,
    },
    RowEntropy(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// A single-use recording of primitive operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    adj: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros if `v` does not influence the seeds.
    pub fn wrt(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.adj[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("adjoint shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn wrt_slice(&self, v: Var) -> Option<&[f64]> {
        self.adj[v.0].as_deref()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn dims2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        [n] => Ok((1, *n)),
        s => Err(shape_err(op, format!("expected 1-D or 2-D, got {s:?}"))),
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        value.check_finite(name)?;
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, "leaf")
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, op: Op, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(value, op, name)
    }

    fn map(&mut self, a: Var, op: Op, name: &'static str, f: impl Fn(f64) -> f64) -> Result<Var> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(value, op, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    /// `x[m,n] + b[n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = dims2(self.value(x), "add_row")?;
        if self.value(b).len() != n {
            return Err(shape_err("add_row", format!("bias {} vs cols {n}", self.value(b).len())));
        }
        let (tx, tb) = (self.value(x), self.value(b));
        let mut data = tx.data().to_vec();
        for i in 0..m {
            for (o, &bv) in data[i * n..(i + 1) * n].iter_mut().zip(tb.data()) {
                *o += bv;
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        self.push(value, Op::AddRow(x, b), "add_row")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map(a, Op::Scale(a, c), "scale", |x| x * c)
    }

    /// `x * s` where `s` is a one-element node.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(shape_err("scale_by", "scalar operand must have one element"));
        }
        let c = self.value(s).data()[0];
        self.map(x, Op::ScaleBy(x, s), "scale_by", |v| v * c)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Exp(a), "exp", f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Log(a), "log", f64::ln)
    }

    /// tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Gelu(a), "gelu", |x| {
            0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.value(a), "matmul")?;
        let (k2, n) = dims2(self.value(b), "matmul")?;
        if self.value(b).shape().len() != 2 || k != k2 {
            return Err(shape_err(
                "matmul",
                format!("{:?} x {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), "matmul")
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = dims2(ta, "softmax")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            log_softmax_row(&ta.data()[i * n..(i + 1) * n], &mut out[i * n..(i + 1) * n]);
        }
        out.iter_mut().for_each(|v| *v = v.exp());
        let value = Tensor::new(ta.shape().to_vec(), out)?;
        self.push(value, Op::Softmax(a), "softmax")
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = dims2(ta, "log_softmax")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            log_softmax_row(&ta.data()[i * n..(i + 1) * n], &mut out[i * n..(i + 1) * n]);
        }
        let value = Tensor::new(ta.shape().to_vec(), out)?;
        self.push(value, Op::LogSoftmax(a), "log_softmax")
    }

    /// Row-wise log-sum-exp, `[m,n] -> [m]`.
    pub fn logsumexp(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = dims2(ta, "logsumexp")?;
        let out = (0..m).map(|i| logsumexp_row(&ta.data()[i * n..(i + 1) * n])).collect();
        self.push(Tensor::vector(out), Op::LogSumExp(a), "logsumexp")
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (m, n) = dims2(self.value(x), "layer_norm")?;
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(shape_err("layer_norm", "gain/bias extent differs from row width"));
        }
        let tx = self.value(x);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &tx.data()[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            "layer_norm",
        )
    }

    /// Rows of `table[V,d]` selected by `ids`, `-> [ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = dims2(self.value(table), "embedding")?;
        let tt = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::OutOfVocab { token: id, vocab: v });
            }
            out.extend_from_slice(&tt.data()[id * d..(id + 1) * d]);
        }
        let value = Tensor::matrix(ids.len(), d, out)?;
        self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            "embedding",
        )
    }

    /// `out[i] = x[i, idx[i]]`.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = dims2(self.value(x), "gather")?;
        if idx.len() != m || idx.iter().any(|&j| j >= n) {
            return Err(shape_err("gather", format!("{} indices for {m}x{n}", idx.len())));
        }
        let tx = self.value(x);
        let out = idx.iter().enumerate().map(|(i, &j)| tx.data()[i * n + j]).collect();
        self.push(
            Tensor::vector(out),
            Op::Gather {
                x,
                idx: idx.to_vec(),
            },
            "gather",
        )
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = dims2(self.value(x), "select_rows")?;
        if rows.iter().any(|&r| r >= m) {
            return Err(shape_err("select_rows", "row index out of range"));
        }
        let tx = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            out.extend_from_slice(&tx.data()[r * n..(r + 1) * n]);
        }
        let value = Tensor::matrix(rows.len(), n, out)?;
        self.push(
            value,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            "select_rows",
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(shape_err("mean", "empty tensor"));
        }
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), "mean")
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = dims2(self.value(x), "slice_cols")?;
        if start + len > n {
            return Err(shape_err("slice_cols", format!("{start}+{len} > {n}")));
        }
        let tx = self.value(x);
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&tx.data()[i * n + start..i * n + start + len]);
        }
        let value = Tensor::matrix(m, len, out)?;
        self.push(value, Op::SliceCols { x, start, len }, "slice_cols")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(shape_err("concat_cols", "no inputs"));
        }
        let m = dims2(self.value(parts[0]), "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = dims2(self.value(p), "concat_cols")?;
            if pm != m {
                return Err(shape_err("concat_cols", "row counts differ"));
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let value = Tensor::matrix(m, n, out)?;
        self.push(value, Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    /// Multi-head causal self-attention over packed sequences.
    ///
    /// `q`, `k`, `v` are `[N, d]` with rows of several sequences stacked;
    /// `segments` lists `(start_row, len)` per sequence. Attention never
    /// crosses a segment boundary, and query row `i` only sees keys `<= i`.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, segments: &[(usize, usize)], heads: usize) -> Result<Var> {
        self.same_shape(q, k, "causal_attention")?;
        self.same_shape(q, v, "causal_attention")?;
        let (rows, d) = dims2(self.value(q), "causal_attention")?;
        if heads == 0 || d % heads != 0 {
            return Err(shape_err("causal_attention", format!("{d} not divisible by {heads} heads")));
        }
        let covered: usize = segments.iter().map(|s| s.1).sum();
        if covered != rows || segments.iter().any(|&(s, l)| s + l > rows) {
            return Err(shape_err("causal_attention", "segments do not tile the rows"));
        }
        let hd = d / heads;
        let inv = 1.0 / (hd as f64).sqrt();
        let (tq, tk, tv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![0.0; rows * d];
        let mut probs = Vec::new();
        let mut scores = Vec::new();
        for &(start, len) in segments {
            for h in 0..heads {
                let off = h * hd;
                for i in 0..len {
                    let qi = &tq[(start + i) * d + off..(start + i) * d + off + hd];
                    scores.clear();
                    for j in 0..=i {
                        let kj = &tk[(start + j) * d + off..(start + j) * d + off + hd];
                        let s: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
                        scores.push(s * inv);
                    }
                    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for s in scores.iter_mut() {
                        *s = (*s - max).exp();
                        z += *s;
                    }
                    let orow = &mut out[(start + i) * d + off..(start + i) * d + off + hd];
                    for (j, s) in scores.iter().enumerate() {
                        let p = s / z;
                        probs.push(p);
                        let vj = &tv[(start + j) * d + off..(start + j) * d + off + hd];
                        for (o, &vv) in orow.iter_mut().zip(vj) {
                            *o += p * vv;
                        }
                    }
                }
            }
        }
        let value = Tensor::matrix(rows, d, out)?;
        self.push(
            value,
            Op::CausalAttention {
                q,
                k,
                v,
                segments: segments.to_vec(),
                heads,
                probs,
            },
            "causal_attention",
        )
    }

    /// Row entropy from log-probabilities, `[m,n] -> [m]`.
    pub fn row_entropy(&mut self, logp: Var) -> Result<Var> {
        let t = self.value(logp);
        let (m, n) = dims2(t, "row_entropy")?;
        let out = (0..m)
            .map(|i| -t.data()[i * n..(i + 1) * n].iter().map(|&l| l.exp() * l).sum::<f64>())
            .collect();
        self.push(Tensor::vector(out), Op::RowEntropy(logp), "row_entropy")
    }

    /// Back-propagates the given seeds. Each seed `(v, s)` contributes
    /// `d(s · v)/d(leaf)` to every leaf's gradient.
    pub fn backward(&self, seeds: &[(Var, Tensor)]) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::Tape("backward called before any forward op was recorded".into()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut top = 0;
        for (v, s) in seeds {
            if v.0 >= self.nodes.len() {
                return Err(Error::Tape(format!("seed node {} not on this tape", v.0)));
            }
            if s.shape() != self.value(*v).shape() {
                return Err(shape_err(
                    "backward",
                    format!("seed {:?} vs output {:?}", s.shape(), self.value(*v).shape()),
                ));
            }
            s.check_finite("backward seed")?;
            accumulate(&mut adj[v.0], s.data());
            top = top.max(v.0);
        }
        for idx in (0..=top).rev() {
            let Some(g) = adj[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut adj)?;
            adj[idx] = Some(g);
        }
        for (i, a) in adj.iter().enumerate() {
            if let Some(a) = a {
                if a.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite { op: op_name(&self.nodes[i].op) });
                }
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { adj, shapes })
    }

    fn backprop_node(&self, idx: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(&mut adj[a.0], g);
                accumulate(&mut adj[b.0], g);
            }
            Op::Sub(a, b) => {
                accumulate(&mut adj[a.0], g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                accumulate(&mut adj[b.0], &neg);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let ga: Vec<f64> = g.iter().zip(vb).map(|(x, y)| x * y).collect();
                let gb: Vec<f64> = g.iter().zip(va).map(|(x, y)| x * y).collect();
                accumulate(&mut adj[a.0], &ga);
                accumulate(&mut adj[b.0], &gb);
            }
            Op::AddRow(x, b) => {
                accumulate(&mut adj[x.0], g);
                let n = self.value(*b).len();
                let mut gb = vec![0.0; n];
                for row in g.chunks(n) {
                    for (o, v) in gb.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                accumulate(&mut adj[b.0], &gb);
            }
            Op::Scale(a, c) => {
                let ga: Vec<f64> = g.iter().map(|v| v * c).collect();
                accumulate(&mut adj[a.0], &ga);
            }
            Op::ScaleBy(x, s) => {
                let c = self.value(*s).data()[0];
                let vx = self.value(*x).data();
                let gx: Vec<f64> = g.iter().map(|v| v * c).collect();
                let gs: f64 = g.iter().zip(vx).map(|(a, b)| a * b).sum();
                accumulate(&mut adj[x.0], &gx);
                accumulate(&mut adj[s.0], &[gs]);
            }
            Op::Exp(a) => {
                let ga: Vec<f64> = g.iter().zip(out).map(|(x, y)| x * y).collect();
                accumulate(&mut adj[a.0], &ga);
            }
            Op::Log(a) => {
                let va = self.value(*a).data();
                let ga: Vec<f64> = g.iter().zip(va).map(|(x, y)| x / y).collect();
                accumulate(&mut adj[a.0], &ga);
            }
            Op::Gelu(a) => {
                let va = self.value(*a).data();
                let ga: Vec<f64> = g
                    .iter()
                    .zip(va)
                    .map(|(gv, &x)| {
                        let u = GELU_C * (x + GELU_A * x * x * x);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        gv * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                    })
                    .collect();
                accumulate(&mut adj[a.0], &ga);
            }
            Op::MatMul(a, b) => {
                let (m, k) = dims2(self.value(*a), "matmul")?;
                let n = self.value(*b).shape()[1];
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let mut ga = vec![0.0; m * k];
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &vb[p * n..(p + 1) * n];
                        ga[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                    }
                }
                let mut gb = vec![0.0; k * n];
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let aip = va[i * k + p];
                        if aip == 0.0 {
                            continue;
                        }
                        for (o, &gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                            *o += aip * gv;
                        }
                    }
                }
                accumulate(&mut adj[a.0], &ga);
                accumulate(&mut adj[b.0], &gb);
            }
            Op::Softmax(a) => {
                let n = node.value.cols();
                let mut ga = vec![0.0; g.len()];
                for ((gr, yr), or) in g.chunks(n).zip(out.chunks(n)).zip(ga.chunks_mut(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                    for ((o, &gv), &y) in or.iter_mut().zip(gr).zip(yr) {
                        *o = y * (gv - dot);
                    }
                }
                accumulate(&mut adj[a.0], &ga);
            }
            Op::LogSoftmax(a) => {
                let n = node.value.cols();
                let mut ga = vec![0.0; g.len()];
                for ((gr, yr), or) in g.chunks(n).zip(out.chunks(n)).zip(ga.chunks_mut(n)) {
                    let s: f64 = gr.iter().sum();
                    for ((o, &gv), &y) in or.iter_mut().zip(gr).zip(yr) {
                        *o = gv - y.exp() * s;
                    }
                }
                accumulate(&mut adj[a.0], &ga);
            }
            Op::LogSumExp(a) => {
                let ta = self.value(*a);
                let n = ta.cols();
                let mut ga = vec![0.0; ta.len()];
                for (i, (xr, or)) in ta.data().chunks(n).zip(ga.chunks_mut(n)).enumerate() {
                    for (o, &x) in or.iter_mut().zip(xr) {
                        *o = g[i] * (x - out[i]).exp();
                    }
                }
                accumulate(&mut adj[a.0], &ga);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = node.value.cols();
                let gam = self.value(*gamma).data();
                let mut gx = vec![0.0; g.len()];
                let mut gg = vec![0.0; n];
                let mut gbeta = vec![0.0; n];
                for (i, gr) in g.chunks(n).enumerate() {
                    let hr = &xhat[i * n..(i + 1) * n];
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..n {
                        let dh = gr[j] * gam[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[j];
                        gg[j] += gr[j] * hr[j];
                        gbeta[j] += gr[j];
                    }
                    mean_dh /= n as f64;
                    mean_dh_h /= n as f64;
                    for j in 0..n {
                        let dh = gr[j] * gam[j];
                        gx[i * n + j] = rstd[i] * (dh - mean_dh - hr[j] * mean_dh_h);
                    }
                }
                accumulate(&mut adj[x.0], &gx);
                accumulate(&mut adj[gamma.0], &gg);
                accumulate(&mut adj[beta.0], &gbeta);
            }
            Op::Embedding { table, ids } => {
                let tt = self.value(*table);
                let d = tt.cols();
                let mut gt = vec![0.0; tt.len()];
                for (r, &id) in ids.iter().enumerate() {
                    for (o, &gv) in gt[id * d..(id + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                        *o += gv;
                    }
                }
                accumulate(&mut adj[table.0], &gt);
            }
            Op::Gather { x, idx } => {
                let tx = self.value(*x);
                let n = tx.cols();
                let mut gx = vec![0.0; tx.len()];
                for (i, &j) in idx.iter().enumerate() {
                    gx[i * n + j] += g[i];
                }
                accumulate(&mut adj[x.0], &gx);
            }
            Op::SelectRows { x, rows } => {
                let tx = self.value(*x);
                let n = tx.cols();
                let mut gx = vec![0.0; tx.len()];
                for (i, &r) in rows.iter().enumerate() {
                    for (o, &gv) in gx[r * n..(r + 1) * n].iter_mut().zip(&g[i * n..(i + 1) * n]) {
                        *o += gv;
                    }
                }
                accumulate(&mut adj[x.0], &gx);
            }
            Op::Sum(a) => {
                let ga = vec![g[0]; self.value(*a).len()];
                accumulate(&mut adj[a.0], &ga);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                let ga = vec![g[0] / n as f64; n];
                accumulate(&mut adj[a.0], &ga);
            }
            Op::SliceCols { x, start, len } => {
                let tx = self.value(*x);
                let n = tx.cols();
                let mut gx = vec![0.0; tx.len()];
                for (i, gr) in g.chunks(*len).enumerate() {
                    gx[i * n + start..i * n + start + len].copy_from_slice(gr);
                }
                accumulate(&mut adj[x.0], &gx);
            }
            Op::ConcatCols(parts) => {
                let n = node.value.cols();
                let mut off = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    let mut gp = Vec::with_capacity(self.value(*p).len());
                    for gr in g.chunks(n) {
                        gp.extend_from_slice(&gr[off..off + w]);
                    }
                    accumulate(&mut adj[p.0], &gp);
                    off += w;
                }
            }
            Op::CausalAttention {
                q,
                k,
                v,
                segments,
                heads,
                probs,
            } => {
                let d = node.value.cols();
                let hd = d / heads;
                let inv = 1.0 / (hd as f64).sqrt();
                let (tq, tk, tv) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let mut gq = vec![0.0; tq.len()];
                let mut gk = vec![0.0; tk.len()];
                let mut gv = vec![0.0; tv.len()];
                let mut pi = 0;
                let mut dp = Vec::new();
                for &(start, len) in segments {
                    for h in 0..*heads {
                        let off = h * hd;
                        for i in 0..len {
                            let ri = (start + i) * d + off;
                            let gi = &g[ri..ri + hd];
                            let p = &probs[pi..pi + i + 1];
                            pi += i + 1;
                            dp.clear();
                            for j in 0..=i {
                                let rj = (start + j) * d + off;
                                dp.push(gi.iter().zip(&tv[rj..rj + hd]).map(|(a, b)| a * b).sum::<f64>());
                                for (o, &gval) in gv[rj..rj + hd].iter_mut().zip(gi) {
                                    *o += p[j] * gval;
                                }
                            }
                            let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                            for j in 0..=i {
                                let ds = p[j] * (dp[j] - dot) * inv;
                                if ds == 0.0 {
                                    continue;
                                }
                                let rj = (start + j) * d + off;
                                for c in 0..hd {
                                    gq[ri + c] += ds * tk[rj + c];
                                    gk[rj + c] += ds * tq[ri + c];
                                }
                            }
                        }
                    }
                }
                accumulate(&mut adj[q.0], &gq);
                accumulate(&mut adj[k.0], &gk);
                accumulate(&mut adj[v.0], &gv);
            }
            Op::RowEntropy(a) => {
                let ta = self.value(*a);
                let n = ta.cols();
                let mut ga = vec![0.0; ta.len()];
                for (i, (lr, or)) in ta.data().chunks(n).zip(ga.chunks_mut(n)).enumerate() {
                    for (o, &l) in or.iter_mut().zip(lr) {
                        *o = -g[i] * l.exp() * (l + 1.0);
                    }
                }
                accumulate(&mut adj[a.0], &ga);
            }
        }
        Ok(())
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
        None => *slot = Some(g.to_vec()),
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::AddRow(..) => "add_row",
        Op::Scale(..) => "scale",
        Op::ScaleBy(..) => "scale_by",
        Op::Exp(..) => "exp",
        Op::Log(..) => "log",
        Op::Gelu(..) => "gelu",
        Op::MatMul(..) => "matmul",
        Op::Softmax(..) => "softmax",
        Op::LogSoftmax(..) => "log_softmax",
        Op::LogSumExp(..) => "logsumexp",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Embedding { .. } => "embedding",
        Op::Gather { .. } => "gather",
        Op::SelectRows { .. } => "select_rows",
        Op::Sum(..) => "sum",
        Op::Mean(..) => "mean",
        Op::SliceCols { .. } => "slice_cols",
        Op::ConcatCols(..) => "concat_cols",
        Op::CausalAttention { .. } => "causal_attention",
        Op::RowEntropy(..) => "row_entropy",
    }
}
