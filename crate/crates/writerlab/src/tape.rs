//! Reverse-mode automatic differentiation over a linear operation tape.
//!
//! One tape lives for one forward/backward cycle. Leaves are copied in from
//! plain [`Tensor`] values; after `backward` the caller reads gradients out
//! per leaf and accumulates them wherever it keeps its parameters.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    /// (m,n) x (n,p) -> (m,p)
    Matmul(Var, Var),
    /// a (m,n) x b (p,n) transposed -> (m,p)
    MatmulNT(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// (s,d) + row vector (d) broadcast over rows
    AddRow(Var, Var),
    Gelu(Var),
    /// rstd/mean cached per row at forward time
    LayerNorm { x: Var, gain: Var, bias: Var, mean: Vec<f64>, rstd: Vec<f64> },
    Embed { table: Var, ids: Vec<usize> },
    /// Row-wise softmax; when `causal`, row i is a softmax over columns 0..=i.
    SoftmaxRows { x: Var, causal: bool },
    Softmax(Var),
    /// mask holds 0.0 or 1/(1-p) per element
    Dropout { x: Var, mask: Vec<f64> },
    CrossEntropy { logits: Var, target: usize, probs: Vec<f64> },
    /// Mean of -log p(target) over positions where loss_mask is true.
    CrossEntropyMasked { logits: Var, targets: Vec<usize>, loss_mask: Vec<bool>, probs: Vec<f64> },
    Sum(Var),
    /// Column slice of a (s,d) matrix.
    SliceCols { x: Var, start: usize, len: usize },
    ConcatCols(Vec<Var>),
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires: bool,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Vec<f64>>,
    backward_done: bool,
}

fn rc(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (1, *n),
        [r, c] => (*r, *c),
        _ => (shape[0], shape[1..].iter().product()),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, requires: bool, op: Op) -> Var {
        self.nodes.push(Node { shape, value, requires, op });
        Var(self.nodes.len() - 1)
    }

    fn req(&self, v: Var) -> bool {
        self.nodes[v.0].requires
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn value_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.nodes[v.0].shape.clone(), self.nodes[v.0].value.clone()).expect("node shape consistent")
    }

    /// Copy a tensor onto the tape as a leaf.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), t.requires_grad, Op::Leaf)
    }

    /// Leaf that never receives gradient regardless of the tensor flag.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), false, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = rc(self.shape(a));
        let (n2, p) = rc(self.shape(b));
        if n != n2 {
            return Err(Error::Shape(format!(
                "matmul inner dims differ: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![0.0; m * p];
        {
            let av = self.value(a);
            let bv = self.value(b);
            for i in 0..m {
                for kk in 0..n {
                    let aik = av[i * n + kk];
                    if aik == 0.0 {
                        continue;
                    }
                    let brow = &bv[kk * p..(kk + 1) * p];
                    let orow = &mut out[i * p..(i + 1) * p];
                    for (o, bj) in orow.iter_mut().zip(brow) {
                        *o += aik * bj;
                    }
                }
            }
        }
        let requires = self.req(a) || self.req(b);
        Ok(self.push(vec![m, p], out, requires, Op::Matmul(a, b)))
    }

    /// `a · bᵀ` for a (m,n) and b (p,n); the common projection pattern.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = rc(self.shape(a));
        let (p, n2) = rc(self.shape(b));
        if n != n2 {
            return Err(Error::Shape(format!(
                "matmul_nt inner dims differ: {:?} vs {:?}ᵀ",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![0.0; m * p];
        {
            let av = self.value(a);
            let bv = self.value(b);
            for i in 0..m {
                let arow = &av[i * n..(i + 1) * n];
                for j in 0..p {
                    let brow = &bv[j * n..(j + 1) * n];
                    out[i * p + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
                }
            }
        }
        let requires = self.req(a) || self.req(b);
        Ok(self.push(vec![m, p], out, requires, Op::MatmulNT(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "add shapes differ: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let value: Vec<f64> =
            self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let requires = self.req(a) || self.req(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, value, requires, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "mul shapes differ: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let value: Vec<f64> =
            self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let requires = self.req(a) || self.req(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, value, requires, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value: Vec<f64> = self.value(a).iter().map(|x| x * k).collect();
        let requires = self.req(a);
        let shape = self.shape(a).to_vec();
        self.push(shape, value, requires, Op::Scale(a, k))
    }

    /// Broadcast-add a length-d row vector to every row of a (s,d) matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (s, d) = rc(self.shape(a));
        if self.value(bias).len() != d {
            return Err(Error::Shape(format!(
                "add_row bias len {} vs row width {}",
                self.value(bias).len(),
                d
            )));
        }
        let mut value = self.value(a).to_vec();
        let bv = self.value(bias).to_vec();
        for r in 0..s {
            for c in 0..d {
                value[r * d + c] += bv[c];
            }
        }
        let requires = self.req(a) || self.req(bias);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, value, requires, Op::AddRow(a, bias)))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value: Vec<f64> = self.value(a).iter().map(|&x| gelu(x)).collect();
        let requires = self.req(a);
        let shape = self.shape(a).to_vec();
        self.push(shape, value, requires, Op::Gelu(a))
    }

    /// Row-wise layer normalization with learned gain and bias (each length d).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let (s, d) = rc(self.shape(x));
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(Error::Shape("layer_norm gain/bias width mismatch".into()));
        }
        let xv = self.value(x).to_vec();
        let gv = self.value(gain).to_vec();
        let bv = self.value(bias).to_vec();
        let mut value = vec![0.0; s * d];
        let mut means = vec![0.0; s];
        let mut rstds = vec![0.0; s];
        for r in 0..s {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + EPS).sqrt();
            means[r] = mean;
            rstds[r] = rstd;
            for c in 0..d {
                value[r * d + c] = (row[c] - mean) * rstd * gv[c] + bv[c];
            }
        }
        let requires = self.req(x) || self.req(gain) || self.req(bias);
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, value, requires, Op::LayerNorm { x, gain, bias, mean: means, rstd: rstds }))
    }

    /// Gather rows of `table` (v,d) by token id -> (ids.len(), d).
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = rc(self.shape(table));
        for &id in ids {
            if id >= v {
                return Err(Error::Index(format!("token id {} outside table of {} rows", id, v)));
            }
        }
        let tv = self.value(table);
        let mut value = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            value.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let requires = self.req(table);
        Ok(self.push(vec![ids.len(), d], value, requires, Op::Embed { table, ids: ids.to_vec() }))
    }

    /// Row-wise softmax over a (s,c) matrix. With `causal` set, row i is a
    /// softmax over columns 0..=i and the rest are exactly zero (requires s==c).
    pub fn softmax_rows(&mut self, x: Var, causal: bool) -> Result<Var> {
        let (s, c) = rc(self.shape(x));
        if causal && s != c {
            return Err(Error::Shape(format!("causal softmax needs square input, got {}x{}", s, c)));
        }
        let xv = self.value(x).to_vec();
        let mut value = vec![0.0; s * c];
        for r in 0..s {
            let width = if causal { r + 1 } else { c };
            let row = &xv[r * c..r * c + width];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for j in 0..width {
                let e = (row[j] - max).exp();
                value[r * c + j] = e;
                denom += e;
            }
            for j in 0..width {
                value[r * c + j] /= denom;
            }
        }
        let requires = self.req(x);
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, value, requires, Op::SoftmaxRows { x, causal }))
    }

    /// Softmax over a vector, max-subtracted for stability.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(Error::Domain("softmax of empty vector".into()));
        }
        let xv = self.value(x);
        let max = xv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = xv.iter().map(|v| (v - max).exp()).collect();
        let denom: f64 = exps.iter().sum();
        let value: Vec<f64> = exps.iter().map(|e| e / denom).collect();
        let requires = self.req(x);
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, value, requires, Op::Softmax(x)))
    }

    /// Train-mode dropout with inverted scaling; eval mode must simply skip
    /// this op so evaluation is the bit-exact identity.
    pub fn dropout<R: Rng>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {} outside [0,1)", p)));
        }
        let keep = 1.0 - p;
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { 1.0 / keep })
            .collect();
        let value: Vec<f64> = self.value(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let requires = self.req(x);
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, value, requires, Op::Dropout { x, mask }))
    }

    /// −log softmax(logits)[target] for a vector of logits.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let v = self.value(logits).len();
        if target >= v {
            return Err(Error::Index(format!("target {} outside vocab {}", target, v)));
        }
        let probs = stable_softmax(self.value(logits));
        let loss = -probs[target].max(f64::MIN_POSITIVE).ln();
        let requires = self.req(logits);
        Ok(self.push(vec![], vec![loss], requires, Op::CrossEntropy { logits, target, probs }))
    }

    /// Mean next-token cross entropy over positions where loss_mask is true.
    pub fn cross_entropy_masked(
        &mut self,
        logits: Var,
        targets: &[usize],
        loss_mask: &[bool],
    ) -> Result<Var> {
        let (s, v) = rc(self.shape(logits));
        if targets.len() != s || loss_mask.len() != s {
            return Err(Error::Shape(format!(
                "cross_entropy_masked: {} rows vs {} targets / {} mask",
                s,
                targets.len(),
                loss_mask.len()
            )));
        }
        let count = loss_mask.iter().filter(|m| **m).count();
        if count == 0 {
            return Err(Error::Data("cross_entropy_masked: empty loss mask".into()));
        }
        for (i, &t) in targets.iter().enumerate() {
            if loss_mask[i] && t >= v {
                return Err(Error::Index(format!("target {} outside vocab {}", t, v)));
            }
        }
        let xv = self.value(logits).to_vec();
        let mut probs = vec![0.0; s * v];
        let mut total = 0.0;
        for r in 0..s {
            let p = stable_softmax(&xv[r * v..(r + 1) * v]);
            if loss_mask[r] {
                total += -p[targets[r]].max(f64::MIN_POSITIVE).ln();
            }
            probs[r * v..(r + 1) * v].copy_from_slice(&p);
        }
        let loss = total / count as f64;
        let requires = self.req(logits);
        Ok(self.push(
            vec![],
            vec![loss],
            requires,
            Op::CrossEntropyMasked {
                logits,
                targets: targets.to_vec(),
                loss_mask: loss_mask.to_vec(),
                probs,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total: f64 = self.value(x).iter().sum();
        let requires = self.req(x);
        self.push(vec![], vec![total], requires, Op::Sum(x))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (s, d) = rc(self.shape(x));
        if start + len > d {
            return Err(Error::Shape(format!("slice {}..{} outside width {}", start, start + len, d)));
        }
        let xv = self.value(x);
        let mut value = Vec::with_capacity(s * len);
        for r in 0..s {
            value.extend_from_slice(&xv[r * d + start..r * d + start + len]);
        }
        let requires = self.req(x);
        Ok(self.push(vec![s, len], value, requires, Op::SliceCols { x, start, len }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_cols of zero parts".into()));
        }
        let s = rc(self.shape(parts[0])).0;
        let mut width = 0;
        for &p in parts {
            let (sp, dp) = rc(self.shape(p));
            if sp != s {
                return Err(Error::Shape("concat_cols row count mismatch".into()));
            }
            width += dp;
        }
        let mut value = Vec::with_capacity(s * width);
        for r in 0..s {
            for &p in parts {
                let (_, dp) = rc(self.shape(p));
                value.extend_from_slice(&self.value(p)[r * dp..(r + 1) * dp]);
            }
        }
        let requires = parts.iter().any(|&p| self.req(p));
        Ok(self.push(vec![s, width], value, requires, Op::ConcatCols(parts.to_vec())))
    }

    /// Run reverse-mode accumulation from a scalar loss. Each node is visited
    /// exactly once, in reverse topological (= creation) order.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Contract("backward called twice on one tape".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        let n = self.nodes.len();
        let mut grads: Vec<Vec<f64>> = self.nodes.iter().map(|nd| vec![0.0; nd.value.len()]).collect();
        grads[loss.0][0] = 1.0;

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires {
                continue;
            }
            let g = std::mem::take(&mut grads[i]);
            if g.iter().all(|&v| v == 0.0) {
                grads[i] = g;
                continue;
            }
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Matmul(a, b) => {
                    let (m, nn) = rc(&self.nodes[a.0].shape);
                    let p = rc(&self.nodes[b.0].shape).1;
                    // dA = dC · Bᵀ
                    if self.nodes[a.0].requires {
                        let bv = &self.nodes[b.0].value;
                        let da = &mut grads[a.0];
                        for r in 0..m {
                            for c in 0..nn {
                                let mut acc = 0.0;
                                for j in 0..p {
                                    acc += g[r * p + j] * bv[c * p + j];
                                }
                                da[r * nn + c] += acc;
                            }
                        }
                    }
                    // dB = Aᵀ · dC
                    if self.nodes[b.0].requires {
                        let av = &self.nodes[a.0].value;
                        let db = &mut grads[b.0];
                        for c in 0..nn {
                            for j in 0..p {
                                let mut acc = 0.0;
                                for r in 0..m {
                                    acc += av[r * nn + c] * g[r * p + j];
                                }
                                db[c * p + j] += acc;
                            }
                        }
                    }
                }
                Op::MatmulNT(a, b) => {
                    // C = A·Bᵀ, A (m,n), B (p,n): dA = dC·B, dB = dCᵀ·A
                    let (m, nn) = rc(&self.nodes[a.0].shape);
                    let p = rc(&self.nodes[b.0].shape).0;
                    if self.nodes[a.0].requires {
                        let bv = &self.nodes[b.0].value;
                        let da = &mut grads[a.0];
                        for r in 0..m {
                            for j in 0..p {
                                let gij = g[r * p + j];
                                if gij == 0.0 {
                                    continue;
                                }
                                for c in 0..nn {
                                    da[r * nn + c] += gij * bv[j * nn + c];
                                }
                            }
                        }
                    }
                    if self.nodes[b.0].requires {
                        let av = &self.nodes[a.0].value;
                        let db = &mut grads[b.0];
                        for j in 0..p {
                            for r in 0..m {
                                let gij = g[r * p + j];
                                if gij == 0.0 {
                                    continue;
                                }
                                for c in 0..nn {
                                    db[j * nn + c] += gij * av[r * nn + c];
                                }
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.nodes[a.0].requires {
                        for (d, s) in grads[a.0].iter_mut().zip(&g) {
                            *d += s;
                        }
                    }
                    if self.nodes[b.0].requires {
                        for (d, s) in grads[b.0].iter_mut().zip(&g) {
                            *d += s;
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.nodes[a.0].requires {
                        let bv = self.nodes[b.0].value.clone();
                        for ((d, s), y) in grads[a.0].iter_mut().zip(&g).zip(&bv) {
                            *d += s * y;
                        }
                    }
                    if self.nodes[b.0].requires {
                        let av = self.nodes[a.0].value.clone();
                        for ((d, s), y) in grads[b.0].iter_mut().zip(&g).zip(&av) {
                            *d += s * y;
                        }
                    }
                }
                Op::Scale(a, k) => {
                    let (a, k) = (*a, *k);
                    if self.nodes[a.0].requires {
                        for (d, s) in grads[a.0].iter_mut().zip(&g) {
                            *d += s * k;
                        }
                    }
                }
                Op::AddRow(a, bias) => {
                    let (a, bias) = (*a, *bias);
                    let d = *self.nodes[i].shape.last().unwrap();
                    if self.nodes[a.0].requires {
                        for (dst, src) in grads[a.0].iter_mut().zip(&g) {
                            *dst += src;
                        }
                    }
                    if self.nodes[bias.0].requires {
                        let db = &mut grads[bias.0];
                        for (idx, src) in g.iter().enumerate() {
                            db[idx % d] += src;
                        }
                    }
                }
                Op::Gelu(a) => {
                    let a = *a;
                    if self.nodes[a.0].requires {
                        let xv = self.nodes[a.0].value.clone();
                        for ((d, s), x) in grads[a.0].iter_mut().zip(&g).zip(&xv) {
                            *d += s * gelu_deriv(*x);
                        }
                    }
                }
                Op::LayerNorm { x, gain, bias, mean, rstd } => {
                    let (x, gain, bias) = (*x, *gain, *bias);
                    let d = *self.nodes[i].shape.last().unwrap();
                    let s = self.nodes[i].value.len() / d;
                    let xv = self.nodes[x.0].value.clone();
                    let gv = self.nodes[gain.0].value.clone();
                    let mean = mean.clone();
                    let rstd = rstd.clone();
                    if self.nodes[bias.0].requires {
                        let db = &mut grads[bias.0];
                        for r in 0..s {
                            for c in 0..d {
                                db[c] += g[r * d + c];
                            }
                        }
                    }
                    if self.nodes[gain.0].requires {
                        let dg = &mut grads[gain.0];
                        for r in 0..s {
                            for c in 0..d {
                                let xhat = (xv[r * d + c] - mean[r]) * rstd[r];
                                dg[c] += g[r * d + c] * xhat;
                            }
                        }
                    }
                    if self.nodes[x.0].requires {
                        let dx = &mut grads[x.0];
                        for r in 0..s {
                            // dy/dx through normalization within the row
                            let mut sum_gy = 0.0;
                            let mut sum_gy_xhat = 0.0;
                            for c in 0..d {
                                let gy = g[r * d + c] * gv[c];
                                let xhat = (xv[r * d + c] - mean[r]) * rstd[r];
                                sum_gy += gy;
                                sum_gy_xhat += gy * xhat;
                            }
                            for c in 0..d {
                                let gy = g[r * d + c] * gv[c];
                                let xhat = (xv[r * d + c] - mean[r]) * rstd[r];
                                dx[r * d + c] += rstd[r]
                                    * (gy - sum_gy / d as f64 - xhat * sum_gy_xhat / d as f64);
                            }
                        }
                    }
                }
                Op::Embed { table, ids } => {
                    let table = *table;
                    let ids = ids.clone();
                    if self.nodes[table.0].requires {
                        let d = rc(&self.nodes[table.0].shape).1;
                        let dt = &mut grads[table.0];
                        for (row, &id) in ids.iter().enumerate() {
                            for c in 0..d {
                                dt[id * d + c] += g[row * d + c];
                            }
                        }
                    }
                }
                Op::SoftmaxRows { x, causal } => {
                    let (x, causal) = (*x, *causal);
                    if self.nodes[x.0].requires {
                        let (s, c) = rc(&self.nodes[i].shape);
                        let y = self.nodes[i].value.clone();
                        let dx = &mut grads[x.0];
                        for r in 0..s {
                            let width = if causal { r + 1 } else { c };
                            let mut dot = 0.0;
                            for j in 0..width {
                                dot += g[r * c + j] * y[r * c + j];
                            }
                            for j in 0..width {
                                dx[r * c + j] += y[r * c + j] * (g[r * c + j] - dot);
                            }
                        }
                    }
                }
                Op::Softmax(x) => {
                    let x = *x;
                    if self.nodes[x.0].requires {
                        let y = self.nodes[i].value.clone();
                        let dot: f64 = g.iter().zip(&y).map(|(a, b)| a * b).sum();
                        for ((d, s), yj) in grads[x.0].iter_mut().zip(&g).zip(&y) {
                            *d += yj * (s - dot);
                        }
                    }
                }
                Op::Dropout { x, mask } => {
                    let x = *x;
                    let mask = mask.clone();
                    if self.nodes[x.0].requires {
                        for ((d, s), m) in grads[x.0].iter_mut().zip(&g).zip(&mask) {
                            *d += s * m;
                        }
                    }
                }
                Op::CrossEntropy { logits, target, probs } => {
                    let (logits, target) = (*logits, *target);
                    let probs = probs.clone();
                    if self.nodes[logits.0].requires {
                        let dl = &mut grads[logits.0];
                        for (j, p) in probs.iter().enumerate() {
                            let one = if j == target { 1.0 } else { 0.0 };
                            dl[j] += g[0] * (p - one);
                        }
                    }
                }
                Op::CrossEntropyMasked { logits, targets, loss_mask, probs } => {
                    let logits = *logits;
                    let targets = targets.clone();
                    let loss_mask = loss_mask.clone();
                    let probs = probs.clone();
                    if self.nodes[logits.0].requires {
                        let v = rc(&self.nodes[logits.0].shape).1;
                        let count = loss_mask.iter().filter(|m| **m).count() as f64;
                        let dl = &mut grads[logits.0];
                        for (r, &masked) in loss_mask.iter().enumerate() {
                            if !masked {
                                continue;
                            }
                            for j in 0..v {
                                let one = if j == targets[r] { 1.0 } else { 0.0 };
                                dl[r * v + j] += g[0] * (probs[r * v + j] - one) / count;
                            }
                        }
                    }
                }
                Op::Sum(x) => {
                    let x = *x;
                    if self.nodes[x.0].requires {
                        for d in grads[x.0].iter_mut() {
                            *d += g[0];
                        }
                    }
                }
                Op::SliceCols { x, start, len } => {
                    let (x, start, len) = (*x, *start, *len);
                    if self.nodes[x.0].requires {
                        let d = rc(&self.nodes[x.0].shape).1;
                        let s = self.nodes[i].value.len() / len;
                        let dx = &mut grads[x.0];
                        for r in 0..s {
                            for c in 0..len {
                                dx[r * d + start + c] += g[r * len + c];
                            }
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let parts = parts.clone();
                    let total_w = *self.nodes[i].shape.last().unwrap();
                    let s = self.nodes[i].value.len() / total_w;
                    let mut offset = 0;
                    for p in parts {
                        let dp = rc(&self.nodes[p.0].shape).1;
                        if self.nodes[p.0].requires {
                            let dx = &mut grads[p.0];
                            for r in 0..s {
                                for c in 0..dp {
                                    dx[r * dp + c] += g[r * total_w + offset + c];
                                }
                            }
                        }
                        offset += dp;
                    }
                }
            }
            grads[i] = g;
        }
        debug_assert_eq!(n, self.nodes.len());
        self.grads = grads;
        Ok(())
    }

    /// Gradient buffer for a node; zeros when the node never required grad.
    pub fn grad(&self, v: Var) -> &[f64] {
        &self.grads[v.0]
    }

    /// Accumulate a leaf's gradient back into the tensor it came from.
    /// Tensors that did not require grad are left untouched (grad stays absent).
    pub fn grad_into(&self, v: Var, t: &mut Tensor) {
        if self.nodes[v.0].requires {
            t.accumulate_grad(self.grad(v));
        }
    }
}

fn stable_softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let denom: f64 = exps.iter().sum();
    exps.iter().map(|e| e / denom).collect()
}

/// tanh-approximation GELU.
fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * C * (1.0 + 3.0 * 0.044715 * x * x)
}
