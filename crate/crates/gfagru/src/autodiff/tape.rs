use crate::autodiff::tensor::{bcast_index, Tensor};
use crate::error::{Error, Result};
use crate::genfactor::{self, TailParams};

pub type NodeId = usize;

/// Primitive operations recorded on the tape. Operands are node ids, which
/// always point at earlier nodes, so node order is a topological order.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    /// base^exponent, elementwise; base must be strictly positive.
    Pow(NodeId, NodeId),
    Max(NodeId, NodeId),
    Min(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Softplus(NodeId),
    MatMul(NodeId, NodeId),
    Sum(NodeId),
    SoftmaxRows(NodeId),
    ConcatCols(Vec<NodeId>),
    SliceCols {
        src: NodeId,
        start: usize,
        end: usize,
    },
    /// Elementwise inverse of the generative transform `g(.; u, v, a)`.
    /// `u` and `v` are single-element nodes; gradients follow the implicit
    /// function theorem.
    GInverse {
        y: NodeId,
        u: NodeId,
        v: NodeId,
        a: f64,
    },
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Gradients keyed by node id. Leaves that no path reaches hold no entry,
/// which reads back as a zero tensor.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    pub fn wrt_or_zeros(&self, id: NodeId, like: &Tensor) -> Tensor {
        match self.wrt(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(like.shape().to_vec()).expect("leaf shape is valid"),
        }
    }
}

/// Reverse-mode tape over dense tensors.
///
/// Every operation validates shapes and checks its result for non-finite
/// values; `backward` may be called exactly once per tape.
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    /// Registers a trainable input.
    pub fn leaf(&mut self, value: Tensor) -> Result<NodeId> {
        self.push("leaf", Op::Leaf, value)
    }

    /// Registers a non-trainable input; identical mechanics to `leaf`, the
    /// distinction is purely for the caller's bookkeeping.
    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.push("const", Op::Leaf, value)
    }

    pub fn scalar_const(&mut self, v: f64) -> Result<NodeId> {
        self.constant(Tensor::scalar(v))
    }

    fn push(&mut self, opname: &'static str, op: Op, value: Tensor) -> Result<NodeId> {
        let id = self.nodes.len();
        if let Some(index) = value.first_nonfinite() {
            return Err(Error::NonFinite {
                op: opname,
                node: id,
                index,
            });
        }
        self.nodes.push(Node { op, value });
        Ok(id)
    }

    fn ew_forward(
        &mut self,
        opname: &'static str,
        a: NodeId,
        b: NodeId,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        let (r, c) = Tensor::broadcast_dims(ta, tb, opname)?;
        let mut out = vec![0.0; r * c];
        let (da, db) = (ta.data(), tb.data());
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = f(da[bcast_index(ta, i, j)], db[bcast_index(tb, i, j)]);
            }
        }
        self.push(opname, op, Tensor::matrix(r, c, out)?)
    }

    fn map_forward(
        &mut self,
        opname: &'static str,
        x: NodeId,
        op: Op,
        f: impl Fn(f64) -> f64,
    ) -> Result<NodeId> {
        let t = &self.nodes[x].value;
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())?;
        self.push(opname, op, out)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.ew_forward("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.ew_forward("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.ew_forward("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.ew_forward("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    /// Elementwise `base^exponent`; errors if any base is not strictly positive.
    pub fn pow(&mut self, base: NodeId, exponent: NodeId) -> Result<NodeId> {
        let id = self.nodes.len();
        if let Some(index) = self.nodes[base].value.data().iter().position(|&v| v <= 0.0) {
            return Err(Error::NonFinite {
                op: "pow(base<=0)",
                node: id,
                index,
            });
        }
        self.ew_forward("pow", base, exponent, Op::Pow(base, exponent), |x, y| {
            x.powf(y)
        })
    }

    pub fn max(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.ew_forward("max", a, b, Op::Max(a, b), f64::max)
    }

    pub fn min(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.ew_forward("min", a, b, Op::Min(a, b), f64::min)
    }

    pub fn neg(&mut self, x: NodeId) -> Result<NodeId> {
        self.map_forward("neg", x, Op::Neg(x), |v| -v)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.map_forward("scale", x, Op::Scale(x, c), |v| c * v)
    }

    pub fn add_const(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.map_forward("add_const", x, Op::AddConst(x), |v| v + c)
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.map_forward("exp", x, Op::Exp(x), f64::exp)
    }

    pub fn ln(&mut self, x: NodeId) -> Result<NodeId> {
        self.map_forward("ln", x, Op::Ln(x), f64::ln)
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.map_forward("tanh", x, Op::Tanh(x), f64::tanh)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.map_forward("sigmoid", x, Op::Sigmoid(x), sigmoid)
    }

    pub fn softplus(&mut self, x: NodeId) -> Result<NodeId> {
        self.map_forward("softplus", x, Op::Softplus(x), softplus)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        let (m, k) = ta.dims2();
        let (k2, n) = tb.dims2();
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                detail: format!("{:?} x {:?}", ta.shape(), tb.shape()),
            });
        }
        let mut out = vec![0.0; m * n];
        let (da, db) = (ta.data(), tb.data());
        for i in 0..m {
            for p in 0..k {
                let aip = da[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &db[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += aip * brow[j];
                }
            }
        }
        self.push("matmul", Op::MatMul(a, b), Tensor::matrix(m, n, out)?)
    }

    /// Full reduction to a 1x1 tensor.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s: f64 = self.nodes[x].value.data().iter().sum();
        self.push("sum", Op::Sum(x), Tensor::matrix(1, 1, vec![s])?)
    }

    /// Row-wise softmax with max-subtraction for stability.
    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let t = &self.nodes[x].value;
        let (r, c) = t.dims2();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &t.data()[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..c {
                let e = (row[j] - m).exp();
                out[i * c + j] = e;
                z += e;
            }
            for j in 0..c {
                out[i * c + j] /= z;
            }
        }
        self.push("softmax", Op::SoftmaxRows(x), Tensor::matrix(r, c, out)?)
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Shape {
                op: "concat_cols",
                detail: "no inputs".into(),
            });
        }
        let rows = self.nodes[parts[0]].value.dims2().0;
        let mut cols = 0;
        for &p in parts {
            let (r, c) = self.nodes[p].value.dims2();
            if r != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    detail: format!("row mismatch: {rows} vs {r}"),
                });
            }
            cols += c;
        }
        let mut out = vec![0.0; rows * cols];
        let mut offset = 0;
        for &p in parts {
            let t = &self.nodes[p].value;
            let (_, c) = t.dims2();
            for i in 0..rows {
                out[i * cols + offset..i * cols + offset + c]
                    .copy_from_slice(&t.data()[i * c..(i + 1) * c]);
            }
            offset += c;
        }
        self.push(
            "concat_cols",
            Op::ConcatCols(parts.to_vec()),
            Tensor::matrix(rows, cols, out)?,
        )
    }

    /// Column range `[start, end)` of a matrix.
    pub fn slice_cols(&mut self, src: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let t = &self.nodes[src].value;
        let (rows, cols) = t.dims2();
        if start >= end || end > cols {
            return Err(Error::Shape {
                op: "slice_cols",
                detail: format!("range {start}..{end} out of {cols} columns"),
            });
        }
        let w = end - start;
        let mut out = vec![0.0; rows * w];
        for i in 0..rows {
            out[i * w..(i + 1) * w].copy_from_slice(&t.data()[i * cols + start..i * cols + end]);
        }
        self.push(
            "slice_cols",
            Op::SliceCols { src, start, end },
            Tensor::matrix(rows, w, out)?,
        )
    }

    /// Elementwise `g^{-1}(y; u, v, a)` with tail-parameter gradients through
    /// the implicit function theorem. `u` and `v` must be single elements.
    pub fn g_inverse(&mut self, y: NodeId, u: NodeId, v: NodeId, a: f64) -> Result<NodeId> {
        if self.nodes[u].value.len() != 1 || self.nodes[v].value.len() != 1 {
            return Err(Error::Shape {
                op: "g_inverse",
                detail: "tail parameters must be scalars".into(),
            });
        }
        let tail = TailParams {
            u: self.nodes[u].value.item(),
            v: self.nodes[v].value.item(),
        };
        let ty = &self.nodes[y].value;
        let mut out = Vec::with_capacity(ty.len());
        for &yv in ty.data() {
            out.push(genfactor::g_inverse(yv, tail, a, genfactor::INV_TOL)?);
        }
        let value = Tensor::new(ty.shape().to_vec(), out)?;
        self.push("g_inverse", Op::GInverse { y, u, v, a }, value)
    }

    /// Reverse pass seeded with ones; requires a single-element root.
    pub fn backward(&mut self, root: NodeId) -> Result<Gradients> {
        if self.nodes[root].value.len() != 1 {
            return Err(Error::Shape {
                op: "backward",
                detail: "scalar seed requires a single-element root".into(),
            });
        }
        let seed = Tensor::new(self.nodes[root].value.shape().to_vec(), vec![1.0])?;
        self.backward_seeded(root, seed)
    }

    /// Reverse pass with an explicit seed of the root's shape. Consumes the
    /// tape's single backward allowance.
    pub fn backward_seeded(&mut self, root: NodeId, seed: Tensor) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Numerical {
                context: "backward",
                detail: "backward already called on this tape".into(),
            });
        }
        self.consumed = true;
        if seed.shape() != self.nodes[root].value.shape() {
            return Err(Error::Shape {
                op: "backward",
                detail: format!(
                    "seed shape {:?} vs root shape {:?}",
                    seed.shape(),
                    self.nodes[root].value.shape()
                ),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root] = Some(seed);

        for id in (0..=root).rev() {
            if matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            let gout = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.dispatch_backward(id, &gout, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn dispatch_backward(&self, id: NodeId, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &self.nodes[id].value;
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.ew_backward(*a, *b, out, gout, grads, |_, _, _| (1.0, 1.0));
            }
            Op::Sub(a, b) => {
                self.ew_backward(*a, *b, out, gout, grads, |_, _, _| (1.0, -1.0));
            }
            Op::Mul(a, b) => {
                self.ew_backward(*a, *b, out, gout, grads, |x, y, _| (y, x));
            }
            Op::Div(a, b) => {
                self.ew_backward(*a, *b, out, gout, grads, |_, y, o| (1.0 / y, -o / y));
            }
            Op::Pow(a, b) => {
                self.ew_backward(*a, *b, out, gout, grads, |x, y, o| {
                    (y * o / x, o * x.ln())
                });
            }
            Op::Max(a, b) => {
                // Ties route the gradient to the first operand.
                self.ew_backward(*a, *b, out, gout, grads, |x, y, _| {
                    if x >= y {
                        (1.0, 0.0)
                    } else {
                        (0.0, 1.0)
                    }
                });
            }
            Op::Min(a, b) => {
                self.ew_backward(*a, *b, out, gout, grads, |x, y, _| {
                    if x <= y {
                        (1.0, 0.0)
                    } else {
                        (0.0, 1.0)
                    }
                });
            }
            Op::Neg(x) => self.map_backward(*x, out, gout, grads, |_, _, g| -g),
            Op::Scale(x, c) => {
                let c = *c;
                self.map_backward(*x, out, gout, grads, move |_, _, g| c * g)
            }
            Op::AddConst(x) => self.map_backward(*x, out, gout, grads, |_, _, g| g),
            Op::Exp(x) => self.map_backward(*x, out, gout, grads, |_, o, g| g * o),
            Op::Ln(x) => self.map_backward(*x, out, gout, grads, |v, _, g| g / v),
            Op::Tanh(x) => self.map_backward(*x, out, gout, grads, |_, o, g| g * (1.0 - o * o)),
            Op::Sigmoid(x) => self.map_backward(*x, out, gout, grads, |_, o, g| g * o * (1.0 - o)),
            Op::Softplus(x) => self.map_backward(*x, out, gout, grads, |v, _, g| g * sigmoid(v)),
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (m, k) = ta.dims2();
                let (_, n) = tb.dims2();
                let g = gout.data();
                let mut ga = vec![0.0; m * k];
                for i in 0..m {
                    for p in 0..k {
                        let brow = &tb.data()[p * n..(p + 1) * n];
                        let grow = &g[i * n..(i + 1) * n];
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += grow[j] * brow[j];
                        }
                        ga[i * k + p] = acc;
                    }
                }
                let mut gb = vec![0.0; k * n];
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let aip = ta.data()[i * k + p];
                        if aip == 0.0 {
                            continue;
                        }
                        let gbrow = &mut gb[p * n..(p + 1) * n];
                        for j in 0..n {
                            gbrow[j] += aip * grow[j];
                        }
                    }
                }
                accumulate(grads, *a, shaped(ta, ga));
                accumulate(grads, *b, shaped(tb, gb));
            }
            Op::Sum(x) => {
                let tx = &self.nodes[*x].value;
                let seed = gout.item();
                accumulate(grads, *x, shaped(tx, vec![seed; tx.len()]));
            }
            Op::SoftmaxRows(x) => {
                let tx = &self.nodes[*x].value;
                let (r, c) = tx.dims2();
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    let alpha = &out.data()[i * c..(i + 1) * c];
                    let grow = &gout.data()[i * c..(i + 1) * c];
                    let dot: f64 = alpha.iter().zip(grow).map(|(a, g)| a * g).sum();
                    for j in 0..c {
                        gx[i * c + j] = alpha[j] * (grow[j] - dot);
                    }
                }
                accumulate(grads, *x, shaped(tx, gx));
            }
            Op::ConcatCols(parts) => {
                let (rows, cols) = out.dims2();
                let mut offset = 0;
                for &p in parts {
                    let tp = &self.nodes[p].value;
                    let (_, c) = tp.dims2();
                    let mut gp = vec![0.0; rows * c];
                    for i in 0..rows {
                        gp[i * c..(i + 1) * c]
                            .copy_from_slice(&gout.data()[i * cols + offset..i * cols + offset + c]);
                    }
                    accumulate(grads, p, shaped(tp, gp));
                    offset += c;
                }
            }
            Op::SliceCols { src, start, end } => {
                let ts = &self.nodes[*src].value;
                let (rows, cols) = ts.dims2();
                let w = end - start;
                let mut gs = vec![0.0; rows * cols];
                for i in 0..rows {
                    gs[i * cols + start..i * cols + end]
                        .copy_from_slice(&gout.data()[i * w..(i + 1) * w]);
                }
                accumulate(grads, *src, shaped(ts, gs));
            }
            Op::GInverse { y, u, v, a } => {
                let tail = TailParams {
                    u: self.nodes[*u].value.item(),
                    v: self.nodes[*v].value.item(),
                };
                let ty = &self.nodes[*y].value;
                let xs = out.data();
                let mut gy = vec![0.0; ty.len()];
                let mut gu = 0.0;
                let mut gv = 0.0;
                for (e, (&x, g)) in xs.iter().zip(gout.data()).enumerate() {
                    let gp = genfactor::g_prime(x, tail, *a);
                    gy[e] = g / gp;
                    // dg/du = x^2 u^{x-1} / a, dg/dv = -x^2 v^{-x-1} / a;
                    // dx/dnu = -(dg/dnu) / g'(x).
                    let dgdu = x * x * tail.u.powf(x - 1.0) / a;
                    let dgdv = -x * x * tail.v.powf(-x - 1.0) / a;
                    gu -= g * dgdu / gp;
                    gv -= g * dgdv / gp;
                }
                accumulate(grads, *y, shaped(ty, gy));
                accumulate(grads, *u, shaped(&self.nodes[*u].value, vec![gu]));
                accumulate(grads, *v, shaped(&self.nodes[*v].value, vec![gv]));
            }
        }
    }

    /// Backward for unary elementwise ops; `df` maps (input, out, gout) to
    /// the input gradient contribution.
    fn map_backward(
        &self,
        x: NodeId,
        out: &Tensor,
        gout: &Tensor,
        grads: &mut [Option<Tensor>],
        df: impl Fn(f64, f64, f64) -> f64,
    ) {
        let tx = &self.nodes[x].value;
        debug_assert_eq!(tx.len(), out.len());
        let gx: Vec<f64> = tx
            .data()
            .iter()
            .zip(out.data())
            .zip(gout.data())
            .map(|((v, o), g)| df(*v, *o, *g))
            .collect();
        accumulate(grads, x, shaped(tx, gx));
    }

    /// Backward for elementwise binary ops with broadcasting; `df` maps
    /// (a, b, out) to the pair of local partials.
    fn ew_backward(
        &self,
        a: NodeId,
        b: NodeId,
        out: &Tensor,
        gout: &Tensor,
        grads: &mut [Option<Tensor>],
        df: impl Fn(f64, f64, f64) -> (f64, f64),
    ) {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        let (r, c) = gout.dims2();
        let mut ga = vec![0.0; ta.len()];
        let mut gb = vec![0.0; tb.len()];
        let (da, db) = (ta.data(), tb.data());
        for i in 0..r {
            for j in 0..c {
                let ia = bcast_index(ta, i, j);
                let ib = bcast_index(tb, i, j);
                let g = gout.data()[i * c + j];
                let (pa, pb) = df(da[ia], db[ib], out.data()[i * c + j]);
                ga[ia] += pa * g;
                gb[ib] += pb * g;
            }
        }
        accumulate(grads, a, shaped(ta, ga));
        accumulate(grads, b, shaped(tb, gb));
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn shaped(like: &Tensor, data: Vec<f64>) -> Tensor {
    Tensor::new(like.shape().to_vec(), data).expect("gradient shape mirrors operand")
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, contrib: Tensor) {
    match &mut grads[id] {
        Some(g) => {
            for (acc, c) in g.data_mut().iter_mut().zip(contrib.data()) {
                *acc += c;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}
