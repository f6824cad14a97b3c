use super::{Bcast, Graph, Op, Var};
use crate::error::Result;
use crate::tensor::{dot, matmul_into, Tensor};

const LN_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-12;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn softmax_row(src: &[f64], dst: &mut [f64]) {
    let m = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = (s - m).exp();
        z += *d;
    }
    for d in dst.iter_mut() {
        *d /= z;
    }
}

fn logsumexp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl Graph {
    fn bcast(&self, op: &'static str, a: Var, b: Var) -> Result<Bcast> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        Ok(if (ar, ac) == (br, bc) {
            Bcast::Full
        } else if (br, bc) == (1, 1) {
            Bcast::Scalar
        } else if br == 1 && bc == ac {
            Bcast::Row
        } else if bc == 1 && br == ar {
            Bcast::Col
        } else {
            return Err(self.shape_err(op, format!("cannot broadcast {br}x{bc} onto {ar}x{ac}")));
        })
    }

    fn zip_bcast(&self, a: Var, b: Var, kind: Bcast, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let av = self.value(a);
        let bv = self.value(b);
        let (r, c) = av.shape();
        let mut out = Tensor::zeros(r, c);
        for i in 0..r {
            for j in 0..c {
                let bij = match kind {
                    Bcast::Full => bv.get(i, j),
                    Bcast::Row => bv.get(0, j),
                    Bcast::Col => bv.get(i, 0),
                    Bcast::Scalar => bv.get(0, 0),
                };
                out.set(i, j, f(av.get(i, j), bij));
            }
        }
        out
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(x).map(f);
        self.push_op(value, op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac != br {
            return Err(self.shape_err("matmul", format!("{ar}x{ac} · {br}x{bc}")));
        }
        let mut out = Tensor::zeros(ar, bc);
        matmul_into(
            self.value(a).data(),
            self.value(b).data(),
            out.data_mut(),
            ar,
            ac,
            bc,
        );
        Ok(self.push_op(out, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let k = self.bcast("add", a, b)?;
        let v = self.zip_bcast(a, b, k, |x, y| x + y);
        Ok(self.push_op(v, Op::Add(a, b, k)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let k = self.bcast("sub", a, b)?;
        let v = self.zip_bcast(a, b, k, |x, y| x - y);
        Ok(self.push_op(v, Op::Sub(a, b, k)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let k = self.bcast("mul", a, b)?;
        let v = self.zip_bcast(a, b, k, |x, y| x * y);
        Ok(self.push_op(v, Op::Mul(a, b, k)))
    }

    /// `scale·x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        self.unary(x, |v| scale * v + shift, Op::Affine(x, scale))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    pub fn recip(&mut self, x: Var) -> Var {
        self.unary(x, |v| 1.0 / v, Op::Recip(x))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(self.shape_err("concat_rows", "no inputs".into()));
        };
        let cols = self.shape(first).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(self.shape_err(
                    "concat_rows",
                    format!("node {} has {} cols, expected {cols}", p.0, t.cols()),
                ));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let v = Tensor::from_vec(rows, cols, data)?;
        Ok(self.push_op(v, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(self.shape_err("concat_cols", "no inputs".into()));
        };
        let rows = self.shape(first).0;
        for &p in parts {
            if self.shape(p).0 != rows {
                return Err(self.shape_err(
                    "concat_cols",
                    format!("node {} has {} rows, expected {rows}", p.0, self.shape(p).0),
                ));
            }
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let src = self.value(p).row(r);
                out.row_mut(r)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        Ok(self.push_op(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, _) = self.shape(x);
        if start + len > r {
            return Err(self.shape_err("slice_rows", format!("{start}+{len} > {r} rows")));
        }
        let v = self.value(x).slice_rows(start, len);
        Ok(self.push_op(v, Op::SliceRows(x, start)))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if start + len > c {
            return Err(self.shape_err("slice_cols", format!("{start}+{len} > {c} cols")));
        }
        let src = self.value(x);
        let mut out = Tensor::zeros(r, len);
        for i in 0..r {
            out.row_mut(i).copy_from_slice(&src.row(i)[start..start + len]);
        }
        Ok(self.push_op(out, Op::SliceCols(x, start)))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(self.shape_err("gather_rows", format!("row {bad} out of {r}")));
        }
        let src = self.value(x);
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(src.row(i));
        }
        let v = Tensor::from_vec(idx.len(), c, data)?;
        Ok(self.push_op(v, Op::GatherRows(x, idx.to_vec())))
    }

    /// Place row `i` of `x` at row `idx[i]` of an `n_rows`-row zero tensor.
    pub fn scatter_rows(&mut self, x: Var, idx: &[usize], n_rows: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if idx.len() != r {
            return Err(self.shape_err("scatter_rows", format!("{} indices for {r} rows", idx.len())));
        }
        let mut seen = vec![false; n_rows];
        for &i in idx {
            if i >= n_rows || seen[i] {
                return Err(self.shape_err("scatter_rows", format!("bad or repeated target row {i}")));
            }
            seen[i] = true;
        }
        let mut out = Tensor::zeros(n_rows, c);
        let src = self.value(x);
        for (k, &i) in idx.iter().enumerate() {
            out.row_mut(i).copy_from_slice(src.row(k));
        }
        Ok(self.push_op(out, Op::ScatterRows(x, idx.to_vec())))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let v = self.value(x).transpose();
        self.push_op(v, Op::Transpose(x))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let mut out = Tensor::zeros(src.rows(), src.cols());
        for r in 0..src.rows() {
            softmax_row(src.row(r), out.row_mut(r));
        }
        self.push_op(out, Op::Softmax(x))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let mut out = src.clone();
        for r in 0..src.rows() {
            let lse = logsumexp(src.row(r));
            for v in out.row_mut(r) {
                *v -= lse;
            }
        }
        self.push_op(out, Op::LogSoftmax(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| 0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh()),
            Op::Gelu(x),
        )
    }

    /// Row-wise layer normalization with `1×c` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        if self.shape(gamma) != (1, c) || self.shape(beta) != (1, c) {
            return Err(self.shape_err("layer_norm", format!("gain/bias must be 1x{c}")));
        }
        let src = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut xhat = Tensor::zeros(r, c);
        let mut out = Tensor::zeros(r, c);
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = src.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat.set(i, j, h);
                out.set(i, j, h * g.get(0, j) + b.get(0, j));
            }
        }
        Ok(self.push_op(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Multi-head scaled dot-product attention over stacked sequences.
    ///
    /// `q`, `k`, `v` are `(n_seq·seq_len) × e`; every block of `seq_len` rows is
    /// one sequence and attends only within itself. Heads split `e` evenly.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, seq_len: usize) -> Result<Var> {
        let (n, e) = self.shape(q);
        if self.shape(k) != (n, e) || self.shape(v) != (n, e) {
            return Err(self.shape_err("attention", "q, k, v shapes differ".into()));
        }
        if heads == 0 || e % heads != 0 {
            return Err(self.shape_err("attention", format!("{e} not divisible into {heads} heads")));
        }
        if seq_len == 0 || n % seq_len != 0 {
            return Err(self.shape_err("attention", format!("{n} rows not a multiple of seq_len {seq_len}")));
        }
        let dh = e / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let n_seq = n / seq_len;
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![0.0; n_seq * heads * seq_len * seq_len];
        let mut out = Tensor::zeros(n, e);
        let mut scores = vec![0.0; seq_len];
        for s in 0..n_seq {
            let base = s * seq_len;
            for h in 0..heads {
                let off = h * dh;
                for i in 0..seq_len {
                    let qi = &qv.row(base + i)[off..off + dh];
                    for (t, sc) in scores.iter_mut().enumerate() {
                        *sc = dot(qi, &kv.row(base + t)[off..off + dh]) * scale;
                    }
                    let p0 = ((s * heads + h) * seq_len + i) * seq_len;
                    let p = &mut probs[p0..p0 + seq_len];
                    softmax_row(&scores, p);
                    let dst = &mut out.row_mut(base + i)[off..off + dh];
                    for (t, &pt) in p.iter().enumerate() {
                        let vt = &vv.row(base + t)[off..off + dh];
                        for (d, &x) in dst.iter_mut().zip(vt) {
                            *d += pt * x;
                        }
                    }
                }
            }
        }
        Ok(self.push_op(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                seq_len,
                probs,
            },
        ))
    }

    /// Summed cross-entropy of row-wise logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(logits);
        if labels.len() != r {
            return Err(self.shape_err("cross_entropy", format!("{} labels for {r} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(self.shape_err("cross_entropy", format!("label {bad} out of {c} classes")));
        }
        let src = self.value(logits);
        let mut probs = Tensor::zeros(r, c);
        let mut loss = 0.0;
        for i in 0..r {
            softmax_row(src.row(i), probs.row_mut(i));
            loss += logsumexp(src.row(i)) - src.get(i, labels[i]);
        }
        Ok(self.push_op(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push_op(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len().max(1) as f64;
        self.push_op(Tensor::scalar(s), Op::Mean(x))
    }

    /// Pairwise cosine similarity: `a` is `n×d`, `b` is `k×d`, output `n×k`.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, d) = self.shape(a);
        let (k, d2) = self.shape(b);
        if d != d2 {
            return Err(self.shape_err("cosine", format!("{n}x{d} vs {k}x{d2}")));
        }
        let normalize = |t: &Tensor| {
            let mut hat = t.clone();
            let mut norms = Vec::with_capacity(t.rows());
            for r in 0..t.rows() {
                let nrm = dot(t.row(r), t.row(r)).sqrt().max(NORM_EPS);
                norms.push(nrm);
                for v in hat.row_mut(r) {
                    *v /= nrm;
                }
            }
            (hat, norms)
        };
        let (a_hat, a_norm) = normalize(self.value(a));
        let (b_hat, b_norm) = normalize(self.value(b));
        let out = a_hat.matmul_t(&b_hat);
        Ok(self.push_op(
            out,
            Op::Cosine {
                a,
                b,
                a_hat,
                b_hat,
                a_norm,
                b_norm,
            },
        ))
    }

    /// Output column `j` is the row-wise maximum over the columns in
    /// `groups[j]`; the gradient routes to the (lowest-index) maximiser.
    pub fn group_max(&mut self, x: Var, groups: &[Vec<usize>]) -> Result<Var> {
        let (r, c) = self.shape(x);
        if groups.iter().any(|g| g.is_empty() || g.iter().any(|&j| j >= c)) {
            return Err(self.shape_err("group_max", format!("empty group or column out of {c}")));
        }
        let src = self.value(x);
        let mut out = Tensor::zeros(r, groups.len());
        let mut picked = Vec::with_capacity(r * groups.len());
        for i in 0..r {
            for (j, g) in groups.iter().enumerate() {
                let mut best = g[0];
                for &col in g {
                    if src.get(i, col) > src.get(i, best) {
                        best = col;
                    }
                }
                out.set(i, j, src.get(i, best));
                picked.push(best);
            }
        }
        Ok(self.push_op(out, Op::GroupMax { x, picked }))
    }

    /// Forward value `hard`, gradient passed straight through to `soft`.
    pub fn straight_through(&mut self, hard: Tensor, soft: Var) -> Result<Var> {
        if hard.shape() != self.shape(soft) {
            return Err(self.shape_err("straight_through", "hard/soft shapes differ".into()));
        }
        Ok(self.push_op(hard, Op::StraightThrough(soft)))
    }
}

fn accumulate(grads: &mut [Option<Tensor>], g: &Graph, v: Var, delta: Tensor) {
    if !g.requires_grad(v) {
        return;
    }
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&delta),
        slot @ None => *slot = Some(delta),
    }
}

fn reduce_bcast(dy: &Tensor, kind: Bcast, b_shape: (usize, usize)) -> Tensor {
    match kind {
        Bcast::Full => dy.clone(),
        Bcast::Scalar => Tensor::scalar(dy.data().iter().sum()),
        Bcast::Row => {
            let mut out = Tensor::zeros(1, b_shape.1);
            for r in 0..dy.rows() {
                for (o, &v) in out.data_mut().iter_mut().zip(dy.row(r)) {
                    *o += v;
                }
            }
            out
        }
        Bcast::Col => {
            let mut out = Tensor::zeros(b_shape.0, 1);
            for r in 0..dy.rows() {
                out.set(r, 0, dy.row(r).iter().sum());
            }
            out
        }
    }
}

fn elementwise(x: &Tensor, dy: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = x.data().iter().zip(dy.data()).map(|(&a, &b)| f(a, b)).collect();
    Tensor::from_vec(x.rows(), x.cols(), data).expect("same shape")
}

pub(super) fn backprop(g: &Graph, out: Var, dy: &Tensor, grads: &mut [Option<Tensor>]) {
    let node = &g.nodes[out.0];
    let y = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            if g.requires_grad(*a) {
                accumulate(grads, g, *a, dy.matmul_t(g.value(*b)));
            }
            if g.requires_grad(*b) {
                accumulate(grads, g, *b, g.value(*a).t_matmul(dy));
            }
        }
        Op::Add(a, b, k) | Op::Sub(a, b, k) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
            accumulate(grads, g, *a, dy.clone());
            if g.requires_grad(*b) {
                let mut db = reduce_bcast(dy, *k, g.shape(*b));
                if sign < 0.0 {
                    db = db.map(|v| -v);
                }
                accumulate(grads, g, *b, db);
            }
        }
        Op::Mul(a, b, k) => {
            if g.requires_grad(*a) {
                let da = g.zip_bcast_tensor(dy, *b, *k);
                accumulate(grads, g, *a, da);
            }
            if g.requires_grad(*b) {
                let prod = elementwise(g.value(*a), dy, |x, d| x * d);
                accumulate(grads, g, *b, reduce_bcast(&prod, *k, g.shape(*b)));
            }
        }
        Op::Affine(x, s) => accumulate(grads, g, *x, dy.map(|d| d * s)),
        Op::Recip(x) => accumulate(grads, g, *x, elementwise(y, dy, |r, d| -d * r * r)),
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for &p in parts {
                let r = g.shape(p).0;
                accumulate(grads, g, p, dy.slice_rows(off, r));
                off += r;
            }
        }
        Op::ConcatCols(parts) => {
            let mut off = 0;
            for &p in parts {
                let (r, c) = g.shape(p);
                let mut d = Tensor::zeros(r, c);
                for i in 0..r {
                    d.row_mut(i).copy_from_slice(&dy.row(i)[off..off + c]);
                }
                accumulate(grads, g, p, d);
                off += c;
            }
        }
        Op::SliceRows(x, start) => {
            let (r, c) = g.shape(*x);
            let mut d = Tensor::zeros(r, c);
            d.data_mut()[start * c..start * c + dy.len()].copy_from_slice(dy.data());
            accumulate(grads, g, *x, d);
        }
        Op::SliceCols(x, start) => {
            let (r, c) = g.shape(*x);
            let mut d = Tensor::zeros(r, c);
            for i in 0..r {
                d.row_mut(i)[*start..start + dy.cols()].copy_from_slice(dy.row(i));
            }
            accumulate(grads, g, *x, d);
        }
        Op::GatherRows(x, idx) => {
            let (r, c) = g.shape(*x);
            let mut d = Tensor::zeros(r, c);
            for (k, &i) in idx.iter().enumerate() {
                for (o, &v) in d.row_mut(i).iter_mut().zip(dy.row(k)) {
                    *o += v;
                }
            }
            accumulate(grads, g, *x, d);
        }
        Op::ScatterRows(x, idx) => {
            let (_, c) = g.shape(*x);
            let mut data = Vec::with_capacity(idx.len() * c);
            for &i in idx {
                data.extend_from_slice(dy.row(i));
            }
            accumulate(grads, g, *x, Tensor::from_vec(idx.len(), c, data).expect("shape"));
        }
        Op::Transpose(x) => accumulate(grads, g, *x, dy.transpose()),
        Op::Softmax(x) => {
            let mut d = Tensor::zeros(y.rows(), y.cols());
            for r in 0..y.rows() {
                let s = dot(dy.row(r), y.row(r));
                for ((o, &yv), &dv) in d.row_mut(r).iter_mut().zip(y.row(r)).zip(dy.row(r)) {
                    *o = yv * (dv - s);
                }
            }
            accumulate(grads, g, *x, d);
        }
        Op::LogSoftmax(x) => {
            let mut d = Tensor::zeros(y.rows(), y.cols());
            for r in 0..y.rows() {
                let s: f64 = dy.row(r).iter().sum();
                for ((o, &yv), &dv) in d.row_mut(r).iter_mut().zip(y.row(r)).zip(dy.row(r)) {
                    *o = dv - yv.exp() * s;
                }
            }
            accumulate(grads, g, *x, d);
        }
        Op::Sigmoid(x) => accumulate(grads, g, *x, elementwise(y, dy, |s, d| d * s * (1.0 - s))),
        Op::Tanh(x) => accumulate(grads, g, *x, elementwise(y, dy, |t, d| d * (1.0 - t * t))),
        Op::Exp(x) => accumulate(grads, g, *x, elementwise(y, dy, |e, d| d * e)),
        Op::Log(x) => accumulate(grads, g, *x, elementwise(g.value(*x), dy, |v, d| d / v)),
        Op::Softplus(x) => {
            accumulate(grads, g, *x, elementwise(g.value(*x), dy, |v, d| d * sigmoid(v)))
        }
        Op::Gelu(x) => accumulate(
            grads,
            g,
            *x,
            elementwise(g.value(*x), dy, |v, d| {
                let u = GELU_C * (v + 0.044715 * v * v * v);
                let t = u.tanh();
                let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
                d * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
            }),
        ),
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let (r, c) = xhat.shape();
            let gv = g.value(*gamma);
            if g.requires_grad(*x) {
                let mut dx = Tensor::zeros(r, c);
                for i in 0..r {
                    let xh = xhat.row(i);
                    let dyr = dy.row(i);
                    let dxh: Vec<f64> = (0..c).map(|j| dyr[j] * gv.get(0, j)).collect();
                    let m1 = dxh.iter().sum::<f64>() / c as f64;
                    let m2 = dot(&dxh, xh) / c as f64;
                    for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
                        *o = inv_std[i] * (dxh[j] - m1 - xh[j] * m2);
                    }
                }
                accumulate(grads, g, *x, dx);
            }
            if g.requires_grad(*gamma) {
                let prod = elementwise(xhat, dy, |h, d| h * d);
                accumulate(grads, g, *gamma, reduce_bcast(&prod, Bcast::Row, (1, c)));
            }
            if g.requires_grad(*beta) {
                accumulate(grads, g, *beta, reduce_bcast(dy, Bcast::Row, (1, c)));
            }
        }
        Op::Attention {
            q,
            k,
            v,
            heads,
            seq_len,
            probs,
        } => {
            let (n, e) = g.shape(*q);
            let (heads, seq_len) = (*heads, *seq_len);
            let dh = e / heads;
            let scale = 1.0 / (dh as f64).sqrt();
            let (qv, kv, vv) = (g.value(*q), g.value(*k), g.value(*v));
            let mut dq = Tensor::zeros(n, e);
            let mut dk = Tensor::zeros(n, e);
            let mut dv = Tensor::zeros(n, e);
            let mut dp = vec![0.0; seq_len];
            for s in 0..n / seq_len {
                let base = s * seq_len;
                for h in 0..heads {
                    let off = h * dh;
                    for i in 0..seq_len {
                        let p0 = ((s * heads + h) * seq_len + i) * seq_len;
                        let p = &probs[p0..p0 + seq_len];
                        let dyi = &dy.row(base + i)[off..off + dh];
                        for t in 0..seq_len {
                            dp[t] = dot(dyi, &vv.row(base + t)[off..off + dh]);
                            let dvt = &mut dv.row_mut(base + t)[off..off + dh];
                            for (o, &d) in dvt.iter_mut().zip(dyi) {
                                *o += p[t] * d;
                            }
                        }
                        let sdot = dot(&dp, p);
                        let qi: Vec<f64> = qv.row(base + i)[off..off + dh].to_vec();
                        for t in 0..seq_len {
                            let ds = p[t] * (dp[t] - sdot) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            let kt = &kv.row(base + t)[off..off + dh];
                            let dqi = &mut dq.row_mut(base + i)[off..off + dh];
                            for (o, &x) in dqi.iter_mut().zip(kt) {
                                *o += ds * x;
                            }
                            let dkt = &mut dk.row_mut(base + t)[off..off + dh];
                            for (o, &x) in dkt.iter_mut().zip(&qi) {
                                *o += ds * x;
                            }
                        }
                    }
                }
            }
            accumulate(grads, g, *q, dq);
            accumulate(grads, g, *k, dk);
            accumulate(grads, g, *v, dv);
        }
        Op::CrossEntropy {
            logits,
            labels,
            probs,
        } => {
            let s = dy.item();
            let mut d = probs.clone();
            for (i, &yl) in labels.iter().enumerate() {
                let v = d.get(i, yl) - 1.0;
                d.set(i, yl, v);
            }
            accumulate(grads, g, *logits, d.map(|v| v * s));
        }
        Op::Sum(x) => {
            let (r, c) = g.shape(*x);
            accumulate(grads, g, *x, Tensor::filled(r, c, dy.item()));
        }
        Op::Mean(x) => {
            let (r, c) = g.shape(*x);
            accumulate(grads, g, *x, Tensor::filled(r, c, dy.item() / (r * c).max(1) as f64));
        }
        Op::Cosine {
            a,
            b,
            a_hat,
            b_hat,
            a_norm,
            b_norm,
        } => {
            let unnormalize = |hat: &Tensor, dhat: Tensor, norms: &[f64]| {
                let mut d = dhat;
                for r in 0..hat.rows() {
                    let proj = dot(hat.row(r), d.row(r));
                    for (o, &h) in d.row_mut(r).iter_mut().zip(hat.row(r)) {
                        *o = (*o - h * proj) / norms[r];
                    }
                }
                d
            };
            if g.requires_grad(*a) {
                let da_hat = dy.matmul(b_hat);
                accumulate(grads, g, *a, unnormalize(a_hat, da_hat, a_norm));
            }
            if g.requires_grad(*b) {
                let db_hat = dy.t_matmul(a_hat);
                accumulate(grads, g, *b, unnormalize(b_hat, db_hat, b_norm));
            }
        }
        Op::GroupMax { x, picked } => {
            let (r, c) = g.shape(*x);
            let n_groups = y.cols();
            let mut d = Tensor::zeros(r, c);
            for i in 0..r {
                for j in 0..n_groups {
                    let col = picked[i * n_groups + j];
                    let v = d.get(i, col) + dy.get(i, j);
                    d.set(i, col, v);
                }
            }
            accumulate(grads, g, *x, d);
        }
        Op::StraightThrough(soft) => accumulate(grads, g, *soft, dy.clone()),
    }
}

impl Graph {
    fn zip_bcast_tensor(&self, dy: &Tensor, b: Var, kind: Bcast) -> Tensor {
        let bv = self.value(b);
        let mut out = dy.clone();
        for i in 0..dy.rows() {
            for j in 0..dy.cols() {
                let bij = match kind {
                    Bcast::Full => bv.get(i, j),
                    Bcast::Row => bv.get(0, j),
                    Bcast::Col => bv.get(i, 0),
                    Bcast::Scalar => bv.get(0, 0),
                };
                out.set(i, j, dy.get(i, j) * bij);
            }
        }
        out
    }
}
