use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Variance floor used by every layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation families, used for fault injection and reporting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    BatchMatMul,
    Add,
    AddTiled,
    Mul,
    Scale,
    Relu,
    SoftmaxRows,
    LayerNorm,
    CrossEntropy,
    MaxOverTime,
    SplitHeads,
    MergeHeads,
    GradReverse,
    Sum,
    Reshape,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        rows: usize,
        inner: usize,
        cols: usize,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    AddTiled(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    MaxOverTime {
        x: Var,
        argmax: Vec<usize>,
        gap: f64,
    },
    SplitHeads {
        x: Var,
        batch: usize,
        steps: usize,
        heads: usize,
    },
    MergeHeads {
        x: Var,
        batch: usize,
        steps: usize,
        heads: usize,
    },
    GradReverse(Var),
    Sum(Var),
    Reshape(Var),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::BatchMatMul { .. } => OpKind::BatchMatMul,
            Op::Add(..) => OpKind::Add,
            Op::AddTiled(..) => OpKind::AddTiled,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Relu(_) => OpKind::Relu,
            Op::SoftmaxRows(_) => OpKind::SoftmaxRows,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::MaxOverTime { .. } => OpKind::MaxOverTime,
            Op::SplitHeads { .. } => OpKind::SplitHeads,
            Op::MergeHeads { .. } => OpKind::MergeHeads,
            Op::GradReverse(_) => OpKind::GradReverse,
            Op::Sum(_) => OpKind::Sum,
            Op::Reshape(_) => OpKind::Reshape,
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Define-by-run tape for reverse-mode differentiation.
///
/// Nodes are appended in creation order, which is already a topological
/// order, so backward walks the tape from the loss down to index zero and
/// visits every reachable node once. Only leaves keep a persistent gradient
/// buffer; intermediate adjoints are scratch and dropped after use.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    fault: Option<(OpKind, f64)>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Scales the backward contribution of every `kind` op by `factor`.
    /// Only useful for proving that gradient checks catch broken backwards.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: OpKind, factor: f64) {
        self.fault = Some((kind, factor));
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf (parameter or input that receives a gradient).
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf; zeros if backward never reached it.
    pub fn grad(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        let data = node
            .grad
            .clone()
            .unwrap_or_else(|| vec![0.0; node.value.len()]);
        Tensor::new(node.value.shape().to_vec(), data).expect("grad shape")
    }

    /// Clears every accumulated gradient.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            if let Some(g) = n.grad.as_mut() {
                g.iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ----- forward ops -------------------------------------------------

    /// Matrix product. `a` may carry leading axes, which are flattened into
    /// rows; `b` must be `k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sb.len() != 2 || *sa.last().unwrap() != sb[0] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let inner = sb[0];
        let cols = sb[1];
        let rows = self.value(a).len() / inner;
        let mut out = vec![0.0; rows * cols];
        gemm_nn(
            self.value(a).data(),
            self.value(b).data(),
            rows,
            inner,
            cols,
            &mut out,
        );
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = cols;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::MatMul {
                a,
                b,
                rows,
                inner,
                cols,
            },
            ng,
        ))
    }

    /// Batched product over `[batch, m, k]` and `[batch, k, n]` (or
    /// `[batch, n, k]` when `trans_b`).
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::shape("batch_matmul", &sa, &sb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b {
            if sb[2] != k {
                return Err(Error::shape("batch_matmul", &sa, &sb));
            }
            sb[1]
        } else {
            if sb[1] != k {
                return Err(Error::shape("batch_matmul", &sa, &sb));
            }
            sb[2]
        };
        let mut out = vec![0.0; batch * m * n];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                let ab = &av[i * m * k..(i + 1) * m * k];
                let bb = &bv[i * k * n..(i + 1) * k * n];
                let ob = &mut out[i * m * n..(i + 1) * m * n];
                if trans_b {
                    gemm_nt(ab, bb, m, k, n, ob);
                } else {
                    gemm_nn(ab, bb, m, k, n, ob);
                }
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(
            Tensor::new([batch, m, n], out)?,
            Op::BatchMatMul {
                a,
                b,
                trans_b,
                batch,
                m,
                k,
                n,
            },
            ng,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    /// `a + b` with `b` repeated cyclically over `a`'s flat layout; covers
    /// bias rows and per-timestep positional tables.
    pub fn add_tiled(&mut self, a: Var, b: Var) -> Result<Var> {
        let (la, lb) = (self.value(a).len(), self.value(b).len());
        if lb == 0 || la % lb != 0 {
            return Err(Error::shape("add_tiled", self.shape(a), self.shape(b)));
        }
        let bv = self.value(b).data();
        let out: Vec<f64> = self
            .value(a)
            .data()
            .chunks(lb)
            .flat_map(|c| c.iter().zip(bv).map(|(x, y)| x + y))
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::AddTiled(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|x| x * c).collect())
            .expect("same shape");
        let ng = self.ng(a);
        self.push(t, Op::Scale(a, c), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let t = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect(),
        )
        .expect("same shape");
        let ng = self.ng(a);
        self.push(t, Op::Relu(a), ng)
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let d = v.last_dim();
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(d) {
            softmax_in_place(row);
        }
        let t = Tensor::new(v.shape().to_vec(), out).expect("same shape");
        let ng = self.ng(a);
        self.push(t, Op::SoftmaxRows(a), ng)
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        let xv = self.value(x);
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = s;
            for j in 0..d {
                let h = (row[j] - mean) * s;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let c = lv.last_dim();
        if lv.rank() != 2 || lv.rows() != targets.len() || targets.is_empty() {
            return Err(Error::shape(
                "cross_entropy",
                lv.shape(),
                &[targets.len(), c],
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::ClassIndex {
                index: bad,
                classes: c,
            });
        }
        let mut probs = lv.data().to_vec();
        let mut loss = 0.0;
        for (row, &t) in probs.chunks_mut(c).zip(targets) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            softmax_in_place(row);
        }
        loss /= targets.len() as f64;
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Per-feature maximum over consecutive blocks of `steps` rows:
    /// `[batch·steps, d] → [batch, d]`. Ties go to the lowest step.
    pub fn max_over_time(&mut self, x: Var, steps: usize) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        let rows = xv.rows();
        if steps == 0 || rows == 0 || !rows.is_multiple_of(steps) {
            return Err(Error::shape("max_over_time", xv.shape(), &[steps]));
        }
        let batch = rows / steps;
        let mut out = vec![0.0; batch * d];
        let mut argmax = vec![0usize; batch * d];
        let mut gap = f64::INFINITY;
        for bi in 0..batch {
            for j in 0..d {
                let mut best = xv.at(bi * steps, j);
                let mut arg = 0;
                let mut second = f64::NEG_INFINITY;
                for s in 1..steps {
                    let v = xv.at(bi * steps + s, j);
                    if v > best {
                        second = best;
                        best = v;
                        arg = s;
                    } else if v > second {
                        second = v;
                    }
                }
                out[bi * d + j] = best;
                argmax[bi * d + j] = bi * steps + arg;
                gap = gap.min(best - second);
            }
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::new([batch, d], out)?,
            Op::MaxOverTime { x, argmax, gap },
            ng,
        ))
    }

    /// `[batch·steps, heads·dh] → [batch·heads, steps, dh]`
    pub fn split_heads(&mut self, x: Var, batch: usize, steps: usize, heads: usize) -> Result<Var> {
        let xv = self.value(x);
        let width = xv.last_dim();
        if heads == 0 || !width.is_multiple_of(heads) || xv.rows() != batch * steps {
            return Err(Error::shape("split_heads", xv.shape(), &[batch, steps, heads]));
        }
        let dh = width / heads;
        let mut out = vec![0.0; xv.len()];
        for b in 0..batch {
            for s in 0..steps {
                let src = xv.row(b * steps + s);
                for h in 0..heads {
                    let dst = ((b * heads + h) * steps + s) * dh;
                    out[dst..dst + dh].copy_from_slice(&src[h * dh..(h + 1) * dh]);
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::new([batch * heads, steps, dh], out)?,
            Op::SplitHeads {
                x,
                batch,
                steps,
                heads,
            },
            ng,
        ))
    }

    /// Inverse of [`Graph::split_heads`].
    pub fn merge_heads(&mut self, x: Var, batch: usize, steps: usize, heads: usize) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() != 3 || s[0] != batch * heads || s[1] != steps {
            return Err(Error::shape("merge_heads", s, &[batch, steps, heads]));
        }
        let dh = s[2];
        let mut out = vec![0.0; xv.len()];
        let data = xv.data();
        for b in 0..batch {
            for st in 0..steps {
                for h in 0..heads {
                    let src = ((b * heads + h) * steps + st) * dh;
                    let dst = (b * steps + st) * heads * dh + h * dh;
                    out[dst..dst + dh].copy_from_slice(&data[src..src + dh]);
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::new([batch * steps, heads * dh], out)?,
            Op::MergeHeads {
                x,
                batch,
                steps,
                heads,
            },
            ng,
        ))
    }

    /// Identity forward, negated gradient backward.
    pub fn grad_reverse(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        let ng = self.ng(x);
        self.push(t, Op::GradReverse(x), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    /// Smallest distance of any recorded ReLU input from zero, or of any
    /// temporal maximum from its runner-up. Finite differences with steps
    /// below this margin never cross a kink.
    pub fn kink_margin(&self) -> f64 {
        let mut m = f64::INFINITY;
        for n in &self.nodes {
            match &n.op {
                Op::Relu(a) => {
                    for v in self.nodes[a.0].value.data() {
                        m = m.min(v.abs());
                    }
                }
                Op::MaxOverTime { gap, .. } => m = m.min(*gap),
                _ => {}
            }
        }
        m
    }

    // ----- backward ----------------------------------------------------

    /// Accumulates `d loss / d leaf` into every differentiable leaf.
    /// Calling it twice without [`Graph::zero_grad`] doubles the gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", self.shape(loss), &[1]));
        }
        let mut adj: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(mut dy) = adj[i].take() else {
                continue;
            };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                match node.grad.as_mut() {
                    Some(g) => g.iter_mut().zip(&dy).for_each(|(g, d)| *g += d),
                    None => node.grad = Some(dy),
                }
                continue;
            }
            if let Some((kind, factor)) = self.fault {
                if self.nodes[i].op.kind() == kind {
                    dy.iter_mut().for_each(|v| *v *= factor);
                }
            }
            self.propagate(i, &dy, &mut adj);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, dy: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        let len = |v: Var| self.nodes[v.0].value.len();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul {
                a,
                b,
                rows,
                inner,
                cols,
            } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if needs(*a) {
                    let g = slot(adj, *a, len(*a));
                    gemm_nt(dy, bv, *rows, *cols, *inner, g);
                }
                if needs(*b) {
                    let g = slot(adj, *b, len(*b));
                    gemm_tn(av, dy, *inner, *rows, *cols, g);
                }
            }
            Op::BatchMatMul {
                a,
                b,
                trans_b,
                batch,
                m,
                k,
                n,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if needs(*a) {
                    let g = slot(adj, *a, len(*a));
                    for bi in 0..*batch {
                        let dyb = &dy[bi * m * n..(bi + 1) * m * n];
                        let bb = &bv[bi * k * n..(bi + 1) * k * n];
                        let gb = &mut g[bi * m * k..(bi + 1) * m * k];
                        if *trans_b {
                            gemm_nn(dyb, bb, m, n, k, gb);
                        } else {
                            gemm_nt(dyb, bb, m, n, k, gb);
                        }
                    }
                }
                if needs(*b) {
                    let g = slot(adj, *b, len(*b));
                    for bi in 0..*batch {
                        let dyb = &dy[bi * m * n..(bi + 1) * m * n];
                        let ab = &av[bi * m * k..(bi + 1) * m * k];
                        let gb = &mut g[bi * k * n..(bi + 1) * k * n];
                        if *trans_b {
                            // d(bᵀ) = aᵀ·dy, stored as n×k: dy ᵀ·a
                            gemm_tn(dyb, ab, n, m, k, gb);
                        } else {
                            gemm_tn(ab, dyb, k, m, n, gb);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if needs(v) {
                        let g = slot(adj, v, len(v));
                        g.iter_mut().zip(dy).for_each(|(g, d)| *g += d);
                    }
                }
            }
            Op::AddTiled(a, b) => {
                if needs(*a) {
                    let g = slot(adj, *a, len(*a));
                    g.iter_mut().zip(dy).for_each(|(g, d)| *g += d);
                }
                if needs(*b) {
                    let lb = len(*b);
                    let g = slot(adj, *b, lb);
                    for chunk in dy.chunks(lb) {
                        g.iter_mut().zip(chunk).for_each(|(g, d)| *g += d);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if needs(*a) {
                    let g = slot(adj, *a, len(*a));
                    for ((g, d), y) in g.iter_mut().zip(dy).zip(bv) {
                        *g += d * y;
                    }
                }
                if needs(*b) {
                    let g = slot(adj, *b, len(*b));
                    for ((g, d), x) in g.iter_mut().zip(dy).zip(av) {
                        *g += d * x;
                    }
                }
            }
            Op::Scale(a, c) => {
                let g = slot(adj, *a, len(*a));
                g.iter_mut().zip(dy).for_each(|(g, d)| *g += d * c);
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let g = slot(adj, *a, len(*a));
                for ((g, d), x) in g.iter_mut().zip(dy).zip(x) {
                    if *x > 0.0 {
                        *g += d;
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                let y = node.value.data();
                let d = node.value.last_dim();
                let g = slot(adj, *a, len(*a));
                for ((gr, dr), yr) in g.chunks_mut(d).zip(dy.chunks(d)).zip(y.chunks(d)) {
                    let dot: f64 = dr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((g, dv), yv) in gr.iter_mut().zip(dr).zip(yr) {
                        *g += yv * (dv - dot);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = self.value(*x).last_dim();
                let gv = self.value(*gain).data();
                if needs(*gain) {
                    let g = slot(adj, *gain, d);
                    for (dr, hr) in dy.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            g[j] += dr[j] * hr[j];
                        }
                    }
                }
                if needs(*bias) {
                    let g = slot(adj, *bias, d);
                    for dr in dy.chunks(d) {
                        g.iter_mut().zip(dr).for_each(|(g, d)| *g += d);
                    }
                }
                if needs(*x) {
                    let g = slot(adj, *x, len(*x));
                    let inv_d = 1.0 / d as f64;
                    let mut dh = vec![0.0; d];
                    for (r, ((gr, dr), hr)) in g
                        .chunks_mut(d)
                        .zip(dy.chunks(d))
                        .zip(xhat.chunks(d))
                        .enumerate()
                    {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..d {
                            dh[j] = dr[j] * gv[j];
                            mean_dh += dh[j];
                            mean_dh_h += dh[j] * hr[j];
                        }
                        mean_dh *= inv_d;
                        mean_dh_h *= inv_d;
                        for j in 0..d {
                            gr[j] += rstd[r] * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let c = self.value(*logits).last_dim();
                let scale = dy[0] / targets.len() as f64;
                let g = slot(adj, *logits, len(*logits));
                for (r, &t) in targets.iter().enumerate() {
                    for j in 0..c {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        g[r * c + j] += scale * (probs[r * c + j] - onehot);
                    }
                }
            }
            Op::MaxOverTime { x, argmax, .. } => {
                let d = self.value(*x).last_dim();
                let g = slot(adj, *x, len(*x));
                for (idx, (&row, dv)) in argmax.iter().zip(dy).enumerate() {
                    g[row * d + idx % d] += dv;
                }
            }
            Op::SplitHeads {
                x,
                batch,
                steps,
                heads,
            } => {
                let dh = node.value.last_dim();
                let g = slot(adj, *x, len(*x));
                for b in 0..*batch {
                    for s in 0..*steps {
                        for h in 0..*heads {
                            let src = ((b * heads + h) * steps + s) * dh;
                            let dst = (b * steps + s) * heads * dh + h * dh;
                            for j in 0..dh {
                                g[dst + j] += dy[src + j];
                            }
                        }
                    }
                }
            }
            Op::MergeHeads {
                x,
                batch,
                steps,
                heads,
            } => {
                let dh = self.value(*x).last_dim();
                let g = slot(adj, *x, len(*x));
                for b in 0..*batch {
                    for s in 0..*steps {
                        for h in 0..*heads {
                            let dst = ((b * heads + h) * steps + s) * dh;
                            let src = (b * steps + s) * heads * dh + h * dh;
                            for j in 0..dh {
                                g[dst + j] += dy[src + j];
                            }
                        }
                    }
                }
            }
            Op::GradReverse(a) => {
                let g = slot(adj, *a, len(*a));
                g.iter_mut().zip(dy).for_each(|(g, d)| *g -= d);
            }
            Op::Sum(a) => {
                let g = slot(adj, *a, len(*a));
                g.iter_mut().for_each(|g| *g += dy[0]);
            }
            Op::Reshape(a) => {
                let g = slot(adj, *a, len(*a));
                g.iter_mut().zip(dy).for_each(|(g, d)| *g += d);
            }
        }
    }
}

fn slot(adj: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    adj[v.0].get_or_insert_with(|| vec![0.0; len])
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}
