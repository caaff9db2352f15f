use super::tensor::{numel, Tensor};
use super::TensorError;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds understood by [`Graph::forward_op`].
#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Div,
    Scale(f64),
    MatMul,
    Transpose,
    Permute(Vec<usize>),
    Reshape(Vec<usize>),
    Softmax { axis: usize, temperature: f64 },
    LogSoftmax { axis: usize, temperature: f64 },
    Log,
    Exp,
    Sqrt,
    Huber { delta: f64 },
    Mean,
    Sum,
    SumAxis(usize),
    LayerNorm { eps: f64 },
    Gelu,
    Embedding { ids: Vec<usize>, ids_shape: Vec<usize> },
    ScaledDot,
    Concat { axis: usize },
    Slice { axis: usize, start: usize, end: usize },
}

#[derive(Debug, Clone, Copy)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

/// How an operand's elements map onto the broadcast output.
#[derive(Debug, Clone)]
enum Bcast {
    Same,
    Scalar,
    Cycle(usize),
    Map(Vec<usize>),
}

impl Bcast {
    #[inline]
    fn idx(&self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Scalar => 0,
            Bcast::Cycle(n) => i % n,
            Bcast::Map(m) => m[i],
        }
    }

    fn build(out: &[usize], inp: &[usize]) -> Self {
        if out == inp {
            return Bcast::Same;
        }
        let n_in = numel(inp);
        if n_in == 1 {
            return Bcast::Scalar;
        }
        if inp.len() <= out.len() && out[out.len() - inp.len()..] == *inp {
            return Bcast::Cycle(n_in);
        }
        // General right-aligned broadcast with size-1 axes.
        let pad = out.len() - inp.len();
        let mut in_strides = vec![0usize; out.len()];
        let mut stride = 1;
        for ax in (0..inp.len()).rev() {
            in_strides[ax + pad] = if inp[ax] == 1 { 0 } else { stride };
            stride *= inp[ax];
        }
        let total = numel(out);
        let mut map = vec![0usize; total];
        let mut counter = vec![0usize; out.len()];
        let mut offset = 0usize;
        for slot in map.iter_mut() {
            *slot = offset;
            for ax in (0..out.len()).rev() {
                counter[ax] += 1;
                offset += in_strides[ax];
                if counter[ax] < out[ax] {
                    break;
                }
                offset -= in_strides[ax] * counter[ax];
                counter[ax] = 0;
            }
        }
        Bcast::Map(map)
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

#[derive(Debug, Clone, Copy)]
enum MatMulMode {
    Batched,
    SharedRight,
    SharedLeft,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Binary { kind: BinKind, a: Var, b: Var, amap: Bcast, bmap: Bcast },
    Scale { a: Var, c: f64 },
    MatMul { a: Var, b: Var, mode: MatMulMode, batch: usize, m: usize, k: usize, n: usize },
    Transpose { a: Var },
    Permute { a: Var, perm: Vec<usize> },
    Reshape { a: Var },
    Softmax { a: Var, axis: usize, t: f64 },
    LogSoftmax { a: Var, axis: usize, t: f64 },
    Log { a: Var },
    Exp { a: Var },
    Sqrt { a: Var },
    Huber { a: Var, delta: f64 },
    Gelu { a: Var },
    Sum { a: Var },
    Mean { a: Var },
    SumAxis { a: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize> },
    ScaledDot { a: Var, b: Var, batch: usize, n: usize, m: usize, k: usize, scale: f64 },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize, end: usize },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Append-only tape of tensor operations supporting reverse-mode differentiation.
///
/// Nodes are stored in creation order, so inputs always precede their
/// consumers and a reverse sweep is a valid topological traversal.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let n = shape[axis];
    let inner = numel(&shape[axis + 1..]);
    (outer, n, inner)
}

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::Shape { op, detail }
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

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node { value, requires_grad, grad: None, op });
        Var(self.nodes.len() - 1)
    }

    fn checked(&mut self, name: &'static str, value: Tensor, requires_grad: bool, op: Op) -> Result<Var, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        Ok(self.push(value, requires_grad, op))
    }

    /// Leaf that accumulates a gradient during [`Graph::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass; present for every grad-requiring leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Generic entry point; the named helpers below call into the same kernels.
    pub fn forward_op(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var, TensorError> {
        let arity = |n: usize| -> Result<(), TensorError> {
            if inputs.len() != n {
                Err(TensorError::Contract(format!("{kind:?} takes {n} inputs, got {}", inputs.len())))
            } else {
                Ok(())
            }
        };
        match kind {
            OpKind::Add => arity(2).and_then(|_| self.add(inputs[0], inputs[1])),
            OpKind::Sub => arity(2).and_then(|_| self.sub(inputs[0], inputs[1])),
            OpKind::Mul => arity(2).and_then(|_| self.mul(inputs[0], inputs[1])),
            OpKind::Div => arity(2).and_then(|_| self.div(inputs[0], inputs[1])),
            OpKind::Scale(c) => arity(1).and_then(|_| self.scale(inputs[0], c)),
            OpKind::MatMul => arity(2).and_then(|_| self.matmul(inputs[0], inputs[1])),
            OpKind::Transpose => arity(1).and_then(|_| self.transpose(inputs[0])),
            OpKind::Permute(ref p) => arity(1).and_then(|_| self.permute(inputs[0], p)),
            OpKind::Reshape(ref s) => arity(1).and_then(|_| self.reshape(inputs[0], s)),
            OpKind::Softmax { axis, temperature } => arity(1).and_then(|_| self.softmax(inputs[0], axis, temperature)),
            OpKind::LogSoftmax { axis, temperature } => {
                arity(1).and_then(|_| self.log_softmax(inputs[0], axis, temperature))
            }
            OpKind::Log => arity(1).and_then(|_| self.log(inputs[0])),
            OpKind::Exp => arity(1).and_then(|_| self.exp(inputs[0])),
            OpKind::Sqrt => arity(1).and_then(|_| self.sqrt(inputs[0])),
            OpKind::Huber { delta } => arity(1).and_then(|_| self.huber(inputs[0], delta)),
            OpKind::Mean => arity(1).and_then(|_| self.mean(inputs[0])),
            OpKind::Sum => arity(1).and_then(|_| self.sum(inputs[0])),
            OpKind::SumAxis(axis) => arity(1).and_then(|_| self.sum_axis(inputs[0], axis)),
            OpKind::LayerNorm { eps } => arity(3).and_then(|_| self.layer_norm(inputs[0], inputs[1], inputs[2], eps)),
            OpKind::Gelu => arity(1).and_then(|_| self.gelu(inputs[0])),
            OpKind::Embedding { ref ids, ref ids_shape } => {
                arity(1).and_then(|_| self.embedding(inputs[0], ids, ids_shape))
            }
            OpKind::ScaledDot => arity(2).and_then(|_| self.scaled_dot(inputs[0], inputs[1])),
            OpKind::Concat { axis } => self.concat(inputs, axis),
            OpKind::Slice { axis, start, end } => arity(1).and_then(|_| self.slice(inputs[0], axis, start, end)),
        }
    }

    // ----- elementwise -------------------------------------------------

    fn binary(&mut self, kind: BinKind, a: Var, b: Var) -> Result<Var, TensorError> {
        let name = match kind {
            BinKind::Add => "add",
            BinKind::Sub => "sub",
            BinKind::Mul => "mul",
            BinKind::Div => "div",
        };
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb)
            .ok_or_else(|| shape_err(name, format!("cannot broadcast {sa:?} with {sb:?}")))?;
        let amap = Bcast::build(&out_shape, &sa);
        let bmap = Bcast::build(&out_shape, &sb);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let n = numel(&out_shape);
        let mut out = Vec::with_capacity(n);
        macro_rules! fill {
            ($f:expr) => {
                match (&amap, &bmap) {
                    (Bcast::Same, Bcast::Same) => out.extend(da.iter().zip(db).map(|(&x, &y)| $f(x, y))),
                    (Bcast::Same, Bcast::Cycle(m)) => {
                        for chunk in da.chunks(*m) {
                            out.extend(chunk.iter().zip(db).map(|(&x, &y)| $f(x, y)));
                        }
                    }
                    (Bcast::Same, Bcast::Scalar) => {
                        let y = db[0];
                        out.extend(da.iter().map(|&x| $f(x, y)));
                    }
                    _ => out.extend((0..n).map(|i| $f(da[amap.idx(i)], db[bmap.idx(i)]))),
                }
            };
        }
        match kind {
            BinKind::Add => fill!(|x: f64, y: f64| x + y),
            BinKind::Sub => fill!(|x: f64, y: f64| x - y),
            BinKind::Mul => fill!(|x: f64, y: f64| x * y),
            BinKind::Div => fill!(|x: f64, y: f64| x / y),
        }
        let rg = self.rg(&[a, b]);
        self.checked(name, Tensor::raw(out_shape, out), rg, Op::Binary { kind, a, b, amap, bmap })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinKind::Div, a, b)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        let v = self.value(a);
        let out = Tensor::raw(v.shape().to_vec(), v.data().iter().map(|x| x * c).collect());
        let rg = self.rg(&[a]);
        self.checked("scale", out, rg, Op::Scale { a, c })
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var, TensorError> {
        let v = self.value(a);
        let out = Tensor::raw(v.shape().to_vec(), v.data().iter().map(|&x| f(x)).collect());
        let rg = self.rg(&[a]);
        self.checked(name, out, rg, op)
    }

    pub fn log(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary("log", a, f64::ln, Op::Log { a })
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary("exp", a, f64::exp, Op::Exp { a })
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary("sqrt", a, f64::sqrt, Op::Sqrt { a })
    }

    /// Elementwise Huber penalty `0.5 r²` for `|r| ≤ δ`, `δ(|r| − δ/2)` otherwise.
    pub fn huber(&mut self, a: Var, delta: f64) -> Result<Var, TensorError> {
        if !(delta > 0.0) {
            return Err(TensorError::Parameter(format!("huber delta must be positive, got {delta}")));
        }
        self.unary(
            "huber",
            a,
            move |r| if r.abs() <= delta { 0.5 * r * r } else { delta * (r.abs() - 0.5 * delta) },
            Op::Huber { a, delta },
        )
    }

    /// tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary("gelu", a, gelu_fwd, Op::Gelu { a })
    }

    // ----- reductions --------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.checked("sum", Tensor::scalar(s), rg, Op::Sum { a })
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        let v = self.value(a);
        let s: f64 = v.data().iter().sum::<f64>() / v.numel() as f64;
        let rg = self.rg(&[a]);
        self.checked("mean", Tensor::scalar(s), rg, Op::Mean { a })
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(shape_err("sum_axis", format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let d = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let base = (o * n + j) * inner;
                for i in 0..inner {
                    out[o * inner + i] += d[base + i];
                }
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = 1;
        let rg = self.rg(&[a]);
        self.checked("sum_axis", Tensor::raw(out_shape, out), rg, Op::SumAxis { a, axis })
    }

    // ----- shape ops ---------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let v = self.value(a);
        if numel(shape) != v.numel() || shape.iter().any(|&d| d == 0) {
            return Err(shape_err("reshape", format!("{:?} -> {shape:?}", v.shape())));
        }
        let out = Tensor::raw(shape.to_vec(), v.data().to_vec());
        let rg = self.rg(&[a]);
        Ok(self.push(out, rg, Op::Reshape { a }))
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        let r = shape.len();
        if r < 2 {
            return Err(shape_err("transpose", format!("rank {r} < 2")));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        let out = permute_tensor(self.value(a), &perm);
        let rg = self.rg(&[a]);
        Ok(self.push(out, rg, Op::Transpose { a }))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var, TensorError> {
        let shape = self.shape(a);
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err("permute", format!("invalid permutation {perm:?} for {shape:?}")));
        }
        let out = permute_tensor(self.value(a), perm);
        let rg = self.rg(&[a]);
        Ok(self.push(out, rg, Op::Permute { a, perm: perm.to_vec() }))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = inputs.first().ok_or_else(|| TensorError::Contract("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(i, (x, y))| i != axis && x != y) {
                return Err(shape_err("concat", format!("{s:?} incompatible with {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for v in inputs {
                let n = self.shape(*v)[axis];
                let d = self.value(*v).data();
                out.extend_from_slice(&d[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let rg = self.rg(inputs);
        Ok(self.push(Tensor::raw(out_shape, out), rg, Op::Concat { inputs: inputs.to_vec(), axis }))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(shape_err("slice", format!("[{start}, {end}) on axis {axis} of {shape:?}")));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            out.extend_from_slice(&d[(o * n + start) * inner..(o * n + end) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = end - start;
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::raw(out_shape, out), rg, Op::Slice { a, axis, start, end }))
    }

    // ----- linear algebra ----------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}: operands need rank >= 2")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}: inner extents differ")));
        }
        let (mode, batch_dims) = if sb.len() == 2 {
            (MatMulMode::SharedRight, sa[..sa.len() - 2].to_vec())
        } else if sa.len() == 2 {
            (MatMulMode::SharedLeft, sb[..sb.len() - 2].to_vec())
        } else if sa[..sa.len() - 2] == sb[..sb.len() - 2] {
            (MatMulMode::Batched, sa[..sa.len() - 2].to_vec())
        } else {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}: batch extents differ")));
        };
        let batch = numel(&batch_dims);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            let ao = match mode {
                MatMulMode::SharedLeft => 0,
                _ => bi * m * k,
            };
            let bo = match mode {
                MatMulMode::SharedRight => 0,
                _ => bi * k * n,
            };
            let c = &mut out[bi * m * n..(bi + 1) * m * n];
            gemm_nn(&da[ao..ao + m * k], &db[bo..bo + k * n], c, m, k, n);
        }
        let mut out_shape = batch_dims;
        out_shape.extend([m, n]);
        let rg = self.rg(&[a, b]);
        self.checked("matmul", Tensor::raw(out_shape, out), rg, Op::MatMul { a, b, mode, batch, m, k, n })
    }

    /// `a·bᵀ / √k` over the last axis; batch extents of `a` and `b` must match.
    pub fn scaled_dot(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] || sa.last() != sb.last() {
            return Err(shape_err("scaled_dot", format!("{sa:?} vs {sb:?}")));
        }
        let r = sa.len();
        let (n, m, k) = (sa[r - 2], sb[r - 2], sa[r - 1]);
        let batch = numel(&sa[..r - 2]);
        let scale = 1.0 / (k as f64).sqrt();
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; batch * n * m];
        for bi in 0..batch {
            let ab = &da[bi * n * k..(bi + 1) * n * k];
            let bb = &db[bi * m * k..(bi + 1) * m * k];
            for i in 0..n {
                let ai = &ab[i * k..(i + 1) * k];
                for j in 0..m {
                    out[(bi * n + i) * m + j] = dot(ai, &bb[j * k..(j + 1) * k]) * scale;
                }
            }
        }
        let mut out_shape = sa[..r - 2].to_vec();
        out_shape.extend([n, m]);
        let rg = self.rg(&[a, b]);
        self.checked("scaled_dot", Tensor::raw(out_shape, out), rg, Op::ScaledDot { a, b, batch, n, m, k, scale })
    }

    // ----- normalisation & lookup --------------------------------------

    pub fn softmax(&mut self, a: Var, axis: usize, temperature: f64) -> Result<Var, TensorError> {
        let (out, _) = self.softmax_impl("softmax", a, axis, temperature, false)?;
        let rg = self.rg(&[a]);
        self.checked("softmax", out, rg, Op::Softmax { a, axis, t: temperature })
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize, temperature: f64) -> Result<Var, TensorError> {
        let (out, _) = self.softmax_impl("log_softmax", a, axis, temperature, true)?;
        let rg = self.rg(&[a]);
        self.checked("log_softmax", out, rg, Op::LogSoftmax { a, axis, t: temperature })
    }

    fn softmax_impl(&self, name: &'static str, a: Var, axis: usize, t: f64, log: bool) -> Result<(Tensor, ()), TensorError> {
        if !(t > 0.0) || !t.is_finite() {
            return Err(TensorError::Parameter(format!("{name} temperature must be positive, got {t}")));
        }
        let v = self.value(a);
        let shape = v.shape().to_vec();
        if axis >= shape.len() {
            return Err(shape_err(name, format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let d = v.data();
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for j in 0..n {
                    mx = mx.max(d[at(j)] / t);
                }
                let mut z = 0.0;
                for j in 0..n {
                    z += (d[at(j)] / t - mx).exp();
                }
                let lz = z.ln();
                for j in 0..n {
                    let s = d[at(j)] / t - mx;
                    out[at(j)] = if log { s - lz } else { s.exp() / z };
                }
            }
        }
        Ok((Tensor::raw(shape, out), ()))
    }

    /// Layer normalisation over the last axis with affine `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| shape_err("layer_norm", "scalar input".into()))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(shape_err(
                "layer_norm",
                format!("gamma {:?} / beta {:?} vs feature extent {d}", self.shape(gamma), self.shape(beta)),
            ));
        }
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = xs.len() / d;
        let mut xhat = vec![0.0; xs.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        self.checked("layer_norm", Tensor::raw(shape, out), rg, Op::LayerNorm { x, gamma, beta, xhat, rstd })
    }

    /// Row gather: `table[ids]`, output shape `ids_shape ++ [table columns]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], ids_shape: &[usize]) -> Result<Var, TensorError> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(shape_err("embedding", format!("table must be 2-d, got {ts:?}")));
        }
        if numel(ids_shape) != ids.len() {
            return Err(shape_err("embedding", format!("ids shape {ids_shape:?} vs {} ids", ids.len())));
        }
        let (rows, d) = (ts[0], ts[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(TensorError::Index { op: "embedding", index: bad, bound: rows });
        }
        let td = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        let mut out_shape = ids_shape.to_vec();
        out_shape.push(d);
        let rg = self.rg(&[table]);
        Ok(self.push(Tensor::raw(out_shape, out), rg, Op::Embedding { table, ids: ids.to_vec() }))
    }

    // ----- backward ----------------------------------------------------

    /// Populate gradients of every grad-requiring leaf with `∂loss/∂leaf`.
    ///
    /// Leaves that do not influence `loss` receive an all-zero gradient.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if loss.0 >= self.nodes.len() {
            return Err(TensorError::Contract("loss is not a node of this graph".into()));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        for node in &mut self.nodes {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                node.grad = Some(vec![0.0; node.value.numel()]);
            } else {
                node.grad = None;
            }
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if matches!(self.nodes[idx].op, Op::Leaf) {
                let slot = self.nodes[idx].grad.get_or_insert_with(|| vec![0.0; g.len()]);
                for (s, v) in slot.iter_mut().zip(&g) {
                    *s += v;
                }
                continue;
            }
            self.propagate(idx, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let y = node.value.data();
        let acc = |v: Var, grads: &mut [Option<Vec<f64>>], f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let n = self.nodes[v.0].value.numel();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, a, b, amap, bmap } => {
                let da = self.value(*a).data();
                let db = self.value(*b).data();
                let kind = *kind;
                acc(*a, grads, &mut |s| {
                    for (i, gi) in g.iter().enumerate() {
                        let (ia, ib) = (amap.idx(i), bmap.idx(i));
                        s[ia] += match kind {
                            BinKind::Add | BinKind::Sub => *gi,
                            BinKind::Mul => gi * db[ib],
                            BinKind::Div => gi / db[ib],
                        };
                    }
                });
                acc(*b, grads, &mut |s| {
                    for (i, gi) in g.iter().enumerate() {
                        let (ia, ib) = (amap.idx(i), bmap.idx(i));
                        s[ib] += match kind {
                            BinKind::Add => *gi,
                            BinKind::Sub => -gi,
                            BinKind::Mul => gi * da[ia],
                            BinKind::Div => -gi * da[ia] / (db[ib] * db[ib]),
                        };
                    }
                });
            }
            Op::Scale { a, c } => acc(*a, grads, &mut |s| {
                for (si, gi) in s.iter_mut().zip(g) {
                    *si += gi * c;
                }
            }),
            Op::MatMul { a, b, mode, batch, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let da = self.value(*a).data();
                let db = self.value(*b).data();
                let mode = *mode;
                let aoff = |bi: usize| if matches!(mode, MatMulMode::SharedLeft) { 0 } else { bi * m * k };
                let boff = |bi: usize| if matches!(mode, MatMulMode::SharedRight) { 0 } else { bi * k * n };
                acc(*a, grads, &mut |s| {
                    for bi in 0..*batch {
                        let gc = &g[bi * m * n..(bi + 1) * m * n];
                        let bm = &db[boff(bi)..boff(bi) + k * n];
                        let ao = aoff(bi);
                        // dA = dC · Bᵀ
                        for i in 0..m {
                            let grow = &gc[i * n..(i + 1) * n];
                            for p in 0..k {
                                s[ao + i * k + p] += dot(grow, &bm[p * n..(p + 1) * n]);
                            }
                        }
                    }
                });
                acc(*b, grads, &mut |s| {
                    for bi in 0..*batch {
                        let gc = &g[bi * m * n..(bi + 1) * m * n];
                        let am = &da[aoff(bi)..aoff(bi) + m * k];
                        let bo = boff(bi);
                        // dB = Aᵀ · dC
                        for i in 0..m {
                            let grow = &gc[i * n..(i + 1) * n];
                            for p in 0..k {
                                let coef = am[i * k + p];
                                if coef != 0.0 {
                                    axpy(coef, grow, &mut s[bo + p * n..bo + (p + 1) * n]);
                                }
                            }
                        }
                    }
                });
            }
            Op::Transpose { a } => {
                let shape = node.value.shape();
                let r = shape.len();
                let mut perm: Vec<usize> = (0..r).collect();
                perm.swap(r - 2, r - 1);
                let gt = permute_data(g, shape, &perm);
                acc(*a, grads, &mut |s| add_into(s, &gt));
            }
            Op::Permute { a, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let gt = permute_data(g, node.value.shape(), &inv);
                acc(*a, grads, &mut |s| add_into(s, &gt));
            }
            Op::Reshape { a } => acc(*a, grads, &mut |s| add_into(s, g)),
            Op::Softmax { a, axis, t } => {
                let (outer, n, inner) = axis_split(node.value.shape(), *axis);
                acc(*a, grads, &mut |s| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * n + j) * inner + i;
                            let dotp: f64 = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..n {
                                s[at(j)] += y[at(j)] * (g[at(j)] - dotp) / t;
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax { a, axis, t } => {
                let (outer, n, inner) = axis_split(node.value.shape(), *axis);
                acc(*a, grads, &mut |s| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * n + j) * inner + i;
                            let gs: f64 = (0..n).map(|j| g[at(j)]).sum();
                            for j in 0..n {
                                s[at(j)] += (g[at(j)] - y[at(j)].exp() * gs) / t;
                            }
                        }
                    }
                });
            }
            Op::Log { a } => {
                let x = self.value(*a).data();
                acc(*a, grads, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] / x[i];
                    }
                });
            }
            Op::Exp { a } => acc(*a, grads, &mut |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * y[i];
                }
            }),
            Op::Sqrt { a } => acc(*a, grads, &mut |s| {
                for i in 0..s.len() {
                    s[i] += g[i] / (2.0 * y[i]);
                }
            }),
            Op::Huber { a, delta } => {
                let x = self.value(*a).data();
                acc(*a, grads, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * x[i].clamp(-delta, *delta);
                    }
                });
            }
            Op::Gelu { a } => {
                let x = self.value(*a).data();
                acc(*a, grads, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * gelu_grad(x[i]);
                    }
                });
            }
            Op::Sum { a } => acc(*a, grads, &mut |s| {
                for si in s.iter_mut() {
                    *si += g[0];
                }
            }),
            Op::Mean { a } => acc(*a, grads, &mut |s| {
                let c = g[0] / s.len() as f64;
                for si in s.iter_mut() {
                    *si += c;
                }
            }),
            Op::SumAxis { a, axis } => {
                let (outer, n, inner) = axis_split(self.value(*a).shape(), *axis);
                acc(*a, grads, &mut |s| {
                    for o in 0..outer {
                        for j in 0..n {
                            for i in 0..inner {
                                s[(o * n + j) * inner + i] += g[o * inner + i];
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let gm = self.value(*gamma).data();
                let d = gm.len();
                let rows = rstd.len();
                acc(*x, grads, &mut |s| {
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let xr = &xhat[r * d..(r + 1) * d];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            let dxh = gr[j] * gm[j];
                            m1 += dxh;
                            m2 += dxh * xr[j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            let dxh = gr[j] * gm[j];
                            s[r * d + j] += rstd[r] * (dxh - m1 - xr[j] * m2);
                        }
                    }
                });
                acc(*gamma, grads, &mut |s| {
                    for r in 0..rows {
                        for j in 0..d {
                            s[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                });
                acc(*beta, grads, &mut |s| {
                    for r in 0..rows {
                        for j in 0..d {
                            s[j] += g[r * d + j];
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = self.value(*table).shape()[1];
                acc(*table, grads, &mut |s| {
                    for (row, &i) in ids.iter().enumerate() {
                        add_into(&mut s[i * d..(i + 1) * d], &g[row * d..(row + 1) * d]);
                    }
                });
            }
            Op::ScaledDot { a, b, batch, n, m, k, scale } => {
                let (n, m, k, scale) = (*n, *m, *k, *scale);
                let da = self.value(*a).data();
                let db = self.value(*b).data();
                acc(*a, grads, &mut |s| {
                    for bi in 0..*batch {
                        for i in 0..n {
                            for j in 0..m {
                                let c = g[(bi * n + i) * m + j] * scale;
                                if c != 0.0 {
                                    let bj = &db[(bi * m + j) * k..(bi * m + j + 1) * k];
                                    axpy(c, bj, &mut s[(bi * n + i) * k..(bi * n + i + 1) * k]);
                                }
                            }
                        }
                    }
                });
                acc(*b, grads, &mut |s| {
                    for bi in 0..*batch {
                        for i in 0..n {
                            let ai = &da[(bi * n + i) * k..(bi * n + i + 1) * k];
                            for j in 0..m {
                                let c = g[(bi * n + i) * m + j] * scale;
                                if c != 0.0 {
                                    axpy(c, ai, &mut s[(bi * m + j) * k..(bi * m + j + 1) * k]);
                                }
                            }
                        }
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let out_shape = node.value.shape();
                let (outer, total, inner) = axis_split(out_shape, *axis);
                let mut start = 0;
                for v in inputs {
                    let nv = self.value(*v).shape()[*axis];
                    acc(*v, grads, &mut |s| {
                        for o in 0..outer {
                            let src = &g[(o * total + start) * inner..(o * total + start + nv) * inner];
                            add_into(&mut s[o * nv * inner..(o + 1) * nv * inner], src);
                        }
                    });
                    start += nv;
                }
            }
            Op::Slice { a, axis, start, end } => {
                let (outer, n, inner) = axis_split(self.value(*a).shape(), *axis);
                let w = end - start;
                acc(*a, grads, &mut |s| {
                    for o in 0..outer {
                        let dst = &mut s[(o * n + start) * inner..(o * n + end) * inner];
                        add_into(dst, &g[o * w * inner..(o + 1) * w * inner]);
                    }
                });
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let coef = a[i * k + p];
            if coef != 0.0 {
                axpy(coef, &b[p * n..(p + 1) * n], crow);
            }
        }
    }
}

fn permute_tensor(t: &Tensor, perm: &[usize]) -> Tensor {
    let shape = t.shape();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    Tensor::raw(out_shape, permute_data(t.data(), shape, perm))
}

/// Reorder `data` (laid out with `shape`) so that output axis `i` is input axis `perm[i]`.
fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let r = shape.len();
    let mut in_strides = vec![1usize; r];
    for ax in (0..r.saturating_sub(1)).rev() {
        in_strides[ax] = in_strides[ax + 1] * shape[ax + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = data.len();
    let mut out = Vec::with_capacity(total);
    if r == 0 {
        return data.to_vec();
    }
    let last = r - 1;
    let (last_n, last_s) = (out_shape[last], strides[last]);
    let mut counter = vec![0usize; r];
    let mut offset = 0usize;
    while out.len() < total {
        for j in 0..last_n {
            out.push(data[offset + j * last_s]);
        }
        // advance the outer counters
        let mut ax = last;
        loop {
            if ax == 0 {
                break;
            }
            ax -= 1;
            counter[ax] += 1;
            offset += strides[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
    out
}
