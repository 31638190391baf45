//! Define-by-run tape of dense f64 tensors.
//!
//! Every operation appends a node whose parents already live on the tape, so
//! node ids are a topological order and `backward` is a single reverse sweep.

use super::AutodiffError;

/// Sigmoid outputs are clamped into `[SIGMOID_EPS, 1 - SIGMOID_EPS]`.
pub const SIGMOID_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

/// Provenance of a node: the primitive plus parent ids and scalar attributes.
#[derive(Debug, Clone)]
pub enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Log(NodeId),
    Mean(NodeId),
    Sum(NodeId),
    Softmax(NodeId),
    ConcatCols(NodeId, NodeId),
    SliceCols {
        src: NodeId,
        start: usize,
    },
    SelectBlocks {
        src: NodeId,
        starts: Vec<usize>,
        width: usize,
    },
    Detach(NodeId),
    GradReverse(NodeId, f64),
    SmoothL1(NodeId),
    Clamp(NodeId, f64, f64),
    CrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    WeightedBce {
        probs: NodeId,
        coeffs: Vec<f64>,
        is_source: Vec<bool>,
    },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Log(..) => "log",
            Op::Mean(..) => "mean",
            Op::Sum(..) => "sum",
            Op::Softmax(..) => "softmax",
            Op::ConcatCols(..) => "concat",
            Op::SliceCols { .. } => "slice",
            Op::SelectBlocks { .. } => "select_blocks",
            Op::Detach(..) => "detach",
            Op::GradReverse(..) => "grad_reverse",
            Op::SmoothL1(..) => "smooth_l1",
            Op::Clamp(..) => "clamp",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::WeightedBce { .. } => "weighted_bce",
        }
    }

    fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MatMul(a, b)
            | Op::AddBias(a, b)
            | Op::ConcatCols(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Log(a)
            | Op::Mean(a)
            | Op::Sum(a)
            | Op::Softmax(a)
            | Op::Detach(a)
            | Op::GradReverse(a, _)
            | Op::SmoothL1(a)
            | Op::Clamp(a, ..) => vec![*a],
            Op::SliceCols { src, .. } | Op::SelectBlocks { src, .. } => vec![*src],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::WeightedBce { probs, .. } => vec![*probs],
        }
    }
}

#[derive(Debug, Clone)]
pub struct TensorNode {
    pub id: NodeId,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Vec<f64>,
    pub op: Op,
}

impl TensorNode {
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1],
        }
    }
}

/// Append-only sequence of nodes.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<TensorNode>,
}

fn matrix_shape(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        2 => (shape[0], shape[1]),
        n => panic!("tensors of rank {n} are not supported"),
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

    pub fn node(&self, id: NodeId) -> &TensorNode {
        &self.nodes[id.0]
    }

    pub fn data(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn grad(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].grad
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let n = &self.nodes[id.0];
        assert_eq!(n.data.len(), 1, "node {} is not scalar", id.0);
        n.data[0]
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> NodeId {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "{}: data length does not match shape {:?}",
            op.name(),
            shape
        );
        let id = NodeId(self.nodes.len());
        let grad = vec![0.0; data.len()];
        self.nodes.push(TensorNode {
            id,
            shape,
            data,
            grad,
            op,
        });
        id
    }

    pub fn leaf(&mut self, shape: &[usize], data: Vec<f64>) -> NodeId {
        self.push(shape.to_vec(), data, Op::Leaf)
    }

    pub fn scalar_leaf(&mut self, value: f64) -> NodeId {
        self.push(vec![], vec![value], Op::Leaf)
    }

    /// Row-major matrix leaf.
    pub fn matrix(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> NodeId {
        self.push(vec![rows, cols], data, Op::Leaf)
    }

    fn dims(&self, id: NodeId) -> (usize, usize) {
        matrix_shape(&self.nodes[id.0].shape)
    }

    fn zip_same(&mut self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64, op: Op) -> NodeId {
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        assert_eq!(
            na.shape,
            nb.shape,
            "{}: shape mismatch {:?} vs {:?}",
            op.name(),
            na.shape,
            nb.shape
        );
        let data = na.data.iter().zip(&nb.data).map(|(x, y)| f(*x, *y)).collect();
        let shape = na.shape.clone();
        self.push(shape, data, op)
    }

    fn map(&mut self, a: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let n = &self.nodes[a.0];
        let data = n.data.iter().map(|x| f(*x)).collect();
        let shape = n.shape.clone();
        self.push(shape, data, op)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip_same(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip_same(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip_same(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.map(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        assert_eq!(k, k2, "matmul: inner dimensions {k} vs {k2}");
        let (da, db) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = da[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &db[p * n..(p + 1) * n];
                for (o, bv) in row.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        self.push(vec![m, n], out, Op::MatMul(a, b))
    }

    /// Adds a `[cols]` bias to every row of a `[rows, cols]` matrix.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let (m, n) = self.dims(x);
        let bn = self.nodes[bias.0].data.len();
        assert_eq!(bn, n, "add_bias: bias length {bn} vs {n} columns");
        let (dx, db) = (&self.nodes[x.0].data, &self.nodes[bias.0].data);
        let mut out = dx.clone();
        for r in 0..m {
            for (o, b) in out[r * n..(r + 1) * n].iter_mut().zip(db) {
                *o += b;
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, out, Op::AddBias(x, bias))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// Logistic sigmoid clamped into `[1e-7, 1 - 1e-7]`.
    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.map(a, |x| sigmoid(x).clamp(SIGMOID_EPS, 1.0 - SIGMOID_EPS), Op::Sigmoid(a))
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.map(a, f64::ln, Op::Log(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let d = &self.nodes[a.0].data;
        let m = if d.is_empty() {
            0.0
        } else {
            d.iter().sum::<f64>() / d.len() as f64
        };
        self.push(vec![], vec![m], Op::Mean(a))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.nodes[a.0].data.iter().sum::<f64>();
        self.push(vec![], vec![s], Op::Sum(a))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.dims(a);
        let d = &self.nodes[a.0].data;
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            softmax_row(&d[r * n..(r + 1) * n], &mut out[r * n..(r + 1) * n]);
        }
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, out, Op::Softmax(a))
    }

    /// Concatenates two matrices along the last dimension.
    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ma, na) = self.dims(a);
        let (mb, nb) = self.dims(b);
        assert_eq!(ma, mb, "concat: row counts {ma} vs {mb}");
        let (da, db) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        let mut out = Vec::with_capacity(ma * (na + nb));
        for r in 0..ma {
            out.extend_from_slice(&da[r * na..(r + 1) * na]);
            out.extend_from_slice(&db[r * nb..(r + 1) * nb]);
        }
        self.push(vec![ma, na + nb], out, Op::ConcatCols(a, b))
    }

    /// Columns `start..end` of every row.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        let (m, n) = self.dims(a);
        assert!(start <= end && end <= n, "slice: {start}..{end} out of {n} columns");
        let w = end - start;
        let d = &self.nodes[a.0].data;
        let mut out = Vec::with_capacity(m * w);
        for r in 0..m {
            out.extend_from_slice(&d[r * n + start..r * n + end]);
        }
        self.push(vec![m, w], out, Op::SliceCols { src: a, start })
    }

    /// Per-row column block: row `r` keeps columns `starts[r]..starts[r]+width`.
    ///
    /// Used to read the class-specific channel block of a regression head.
    pub fn select_blocks(&mut self, a: NodeId, starts: &[usize], width: usize) -> NodeId {
        let (m, n) = self.dims(a);
        assert_eq!(starts.len(), m, "select_blocks: one start per row");
        let d = &self.nodes[a.0].data;
        let mut out = Vec::with_capacity(m * width);
        for (r, &s) in starts.iter().enumerate() {
            assert!(s + width <= n, "select_blocks: block {s}+{width} out of {n}");
            out.extend_from_slice(&d[r * n + s..r * n + s + width]);
        }
        self.push(
            vec![m, width],
            out,
            Op::SelectBlocks {
                src: a,
                starts: starts.to_vec(),
                width,
            },
        )
    }

    /// Stop-gradient: identical values, no gradient flows to `a`.
    pub fn detach(&mut self, a: NodeId) -> NodeId {
        self.map(a, |x| x, Op::Detach(a))
    }

    /// Identity forward; backward multiplies the incoming gradient by `-lambda`.
    pub fn grad_reverse(&mut self, a: NodeId, lambda: f64) -> Result<NodeId, AutodiffError> {
        if lambda.is_nan() || lambda < 0.0 {
            return Err(AutodiffError::NegativeLambda(lambda));
        }
        Ok(self.map(a, |x| x, Op::GradReverse(a, lambda)))
    }

    /// Elementwise smooth L1 with unit transition point.
    pub fn smooth_l1(&mut self, a: NodeId) -> NodeId {
        self.map(a, smooth_l1, Op::SmoothL1(a))
    }

    /// Elementwise clamp to `[lo, hi]`; gradient passes only strictly inside.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        assert!(lo < hi, "clamp needs lo < hi");
        self.map(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    /// Mean softmax cross-entropy of `[N, C]` logits against class indices.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId, AutodiffError> {
        let (m, c) = self.dims(logits);
        if labels.len() != m {
            return Err(AutodiffError::BatchMismatch {
                expected: m,
                got: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(AutodiffError::LabelOutOfRange { label: bad, classes: c });
        }
        let d = &self.nodes[logits.0].data;
        let mut probs = vec![0.0; m * c];
        let mut total = 0.0;
        for r in 0..m {
            let row = &d[r * c..(r + 1) * c];
            let (arg, max) = row
                .iter()
                .cloned()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (j, x)| if x > acc.1 { (j, x) } else { acc });
            let rest: f64 = row
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != arg)
                .map(|(_, x)| (x - max).exp())
                .sum();
            total += (max - row[labels[r]]) + rest.ln_1p();
            softmax_row(row, &mut probs[r * c..(r + 1) * c]);
        }
        let loss = if m == 0 { 0.0 } else { total / m as f64 };
        Ok(self.push(
            vec![],
            vec![loss],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Weighted domain-discriminator objective over probabilities `d` in (0, 1):
    ///
    /// `mean_src(w * ln d) + mean_tgt(w * ln(1 - d))`
    ///
    /// where each mean divides by the number of items of that domain.
    pub fn weighted_bce(
        &mut self,
        probs: NodeId,
        is_source: &[bool],
        weights: &[f64],
    ) -> Result<NodeId, AutodiffError> {
        let n = self.nodes[probs.0].data.len();
        if is_source.len() != n || weights.len() != n {
            return Err(AutodiffError::BatchMismatch {
                expected: n,
                got: is_source.len().min(weights.len()),
            });
        }
        if let Some(&w) = weights.iter().find(|w| !(**w >= 0.0)) {
            return Err(AutodiffError::NegativeWeight(w));
        }
        let n_src = is_source.iter().filter(|s| **s).count();
        let n_tgt = n - n_src;
        if n_src == 0 || n_tgt == 0 {
            return Err(AutodiffError::BatchComposition { n_src, n_tgt });
        }
        let d = &self.nodes[probs.0].data;
        let mut coeffs = Vec::with_capacity(n);
        let mut value = 0.0;
        for i in 0..n {
            let p = d[i].clamp(SIGMOID_EPS, 1.0 - SIGMOID_EPS);
            if is_source[i] {
                let c = weights[i] / n_src as f64;
                value += c * p.ln();
                coeffs.push(c);
            } else {
                let c = weights[i] / n_tgt as f64;
                value += c * (1.0 - p).ln();
                coeffs.push(c);
            }
        }
        Ok(self.push(
            vec![],
            vec![value],
            Op::WeightedBce {
                probs,
                coeffs,
                is_source: is_source.to_vec(),
            },
        ))
    }

    /// Reverse sweep from a scalar root. Unreachable nodes keep zero gradient.
    pub fn backward(&mut self, root: NodeId) -> Result<(), AutodiffError> {
        let len = self.nodes[root.0].data.len();
        if len != 1 {
            return Err(AutodiffError::NonScalarRoot(self.nodes[root.0].shape.clone()));
        }
        for n in &mut self.nodes {
            n.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        let mut reachable = vec![false; root.0 + 1];
        reachable[root.0] = true;
        self.nodes[root.0].grad[0] = 1.0;
        for id in (0..=root.0).rev() {
            if !reachable[id] {
                continue;
            }
            let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
            let parents = op.parents();
            for p in &parents {
                debug_assert!(p.0 < id, "parent ids precede children");
            }
            let blocked = matches!(op, Op::Detach(_));
            if !blocked {
                for p in &parents {
                    reachable[p.0] = true;
                }
                let grad = std::mem::take(&mut self.nodes[id].grad);
                self.propagate(id, &op, &grad);
                self.nodes[id].grad = grad;
            }
            self.nodes[id].op = op;
        }
        Ok(())
    }

    fn acc(&mut self, p: NodeId, f: impl Fn(usize) -> f64) {
        let g = &mut self.nodes[p.0].grad;
        for (i, gi) in g.iter_mut().enumerate() {
            *gi += f(i);
        }
    }

    fn propagate(&mut self, id: usize, op: &Op, g: &[f64]) {
        match op {
            Op::Leaf | Op::Detach(_) => {}
            Op::Add(a, b) => {
                self.acc(*a, |i| g[i]);
                self.acc(*b, |i| g[i]);
            }
            Op::Sub(a, b) => {
                self.acc(*a, |i| g[i]);
                self.acc(*b, |i| -g[i]);
            }
            Op::Mul(a, b) => {
                let da = self.nodes[a.0].data.clone();
                let db = self.nodes[b.0].data.clone();
                self.acc(*a, |i| g[i] * db[i]);
                self.acc(*b, |i| g[i] * da[i]);
            }
            Op::Scale(a, c) => self.acc(*a, |i| g[i] * c),
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let (_, n) = self.dims(*b);
                let da = self.nodes[a.0].data.clone();
                let db = self.nodes[b.0].data.clone();
                // dA = G B^T
                {
                    let ga = &mut self.nodes[a.0].grad;
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &db[p * n..(p + 1) * n];
                            ga[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                // dB = A^T G
                let gb = &mut self.nodes[b.0].grad;
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let av = da[i * k + p];
                        if av == 0.0 {
                            continue;
                        }
                        for (o, gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                            *o += av * gv;
                        }
                    }
                }
            }
            Op::AddBias(x, bias) => {
                let (m, n) = self.dims(*x);
                self.acc(*x, |i| g[i]);
                let gb = &mut self.nodes[bias.0].grad;
                for r in 0..m {
                    for (o, gv) in gb.iter_mut().zip(&g[r * n..(r + 1) * n]) {
                        *o += gv;
                    }
                }
            }
            Op::Relu(a) => {
                let da = self.nodes[a.0].data.clone();
                self.acc(*a, |i| if da[i] > 0.0 { g[i] } else { 0.0 });
            }
            Op::Sigmoid(a) => {
                let raw = self.nodes[a.0].data.clone();
                self.acc(*a, |i| {
                    let s = sigmoid(raw[i]);
                    if s < SIGMOID_EPS || s > 1.0 - SIGMOID_EPS {
                        0.0
                    } else {
                        g[i] * s * (1.0 - s)
                    }
                });
            }
            Op::Log(a) => {
                let da = self.nodes[a.0].data.clone();
                self.acc(*a, |i| g[i] / da[i]);
            }
            Op::Mean(a) => {
                let n = self.nodes[a.0].data.len().max(1) as f64;
                self.acc(*a, |_| g[0] / n);
            }
            Op::Sum(a) => self.acc(*a, |_| g[0]),
            Op::Softmax(a) => {
                let (m, n) = self.dims(*a);
                let s = self.nodes[id].data.clone();
                let mut out = vec![0.0; m * n];
                for r in 0..m {
                    let sr = &s[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let dot: f64 = sr.iter().zip(gr).map(|(x, y)| x * y).sum();
                    for j in 0..n {
                        out[r * n + j] = sr[j] * (gr[j] - dot);
                    }
                }
                self.acc(*a, |i| out[i]);
            }
            Op::ConcatCols(a, b) => {
                let (m, na) = self.dims(*a);
                let (_, nb) = self.dims(*b);
                let w = na + nb;
                self.acc(*a, |i| g[(i / na) * w + i % na]);
                self.acc(*b, |i| g[(i / nb) * w + na + i % nb]);
                let _ = m;
            }
            Op::SliceCols { src, start } => {
                let (_, n) = self.dims(*src);
                let w = self.dims(NodeId(id)).1;
                let start = *start;
                self.acc(*src, |i| {
                    let (r, c) = (i / n, i % n);
                    if c >= start && c < start + w {
                        g[r * w + c - start]
                    } else {
                        0.0
                    }
                });
            }
            Op::SelectBlocks { src, starts, width } => {
                let (_, n) = self.dims(*src);
                let gs = &mut self.nodes[src.0].grad;
                for (r, &s) in starts.iter().enumerate() {
                    for j in 0..*width {
                        gs[r * n + s + j] += g[r * width + j];
                    }
                }
            }
            Op::GradReverse(a, lambda) => self.acc(*a, |i| -lambda * g[i]),
            Op::SmoothL1(a) => {
                let da = self.nodes[a.0].data.clone();
                self.acc(*a, |i| g[i] * smooth_l1_grad(da[i]));
            }
            Op::Clamp(a, lo, hi) => {
                let da = self.nodes[a.0].data.clone();
                self.acc(*a, |i| if da[i] > *lo && da[i] < *hi { g[i] } else { 0.0 });
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let (m, c) = self.dims(*logits);
                let scale = g[0] / m.max(1) as f64;
                self.acc(*logits, |i| {
                    let (r, j) = (i / c, i % c);
                    let onehot = if labels[r] == j { 1.0 } else { 0.0 };
                    scale * (probs[i] - onehot)
                });
            }
            Op::WeightedBce {
                probs,
                coeffs,
                is_source,
            } => {
                let d = self.nodes[probs.0].data.clone();
                self.acc(*probs, |i| {
                    let p = d[i];
                    if p < SIGMOID_EPS || p > 1.0 - SIGMOID_EPS {
                        return 0.0;
                    }
                    if is_source[i] {
                        g[0] * coeffs[i] / p
                    } else {
                        -g[0] * coeffs[i] / (1.0 - p)
                    }
                });
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn smooth_l1(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

pub fn smooth_l1_grad(x: f64) -> f64 {
    x.clamp(-1.0, 1.0)
}

pub fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}
