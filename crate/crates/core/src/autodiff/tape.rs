//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every operation appends a node holding its materialized output and the
//! ids of its inputs. Nodes are only ever appended, so the tape is in
//! topological order by construction and `backward` is one reverse sweep.

use rand::RngCore as _;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{gemm, Element, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Mode {
    Train,
    #[default]
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    /// Population variance (divides by the count).
    Var,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, shared_rhs: bool },
    Transpose { x: Var },
    Permute { x: Var, axes: Vec<usize> },
    Reshape { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddPerRow { x: Var, c: Var },
    MulPerRow { x: Var, c: Var },
    Scale { x: Var, c: T },
    AddScalar { x: Var },
    Pow { x: Var, p: T },
    Relu { x: Var },
    Square { x: Var },
    Sigmoid { x: Var },
    Swish { x: Var },
    Gelu { x: Var },
    Log { x: Var },
    Exp { x: Var },
    Reduce { x: Var, axis: usize, kind: ReduceKind },
    SumAll { x: Var },
    Softmax { x: Var },
    MaskedFill { x: Var, keep: Vec<bool> },
    MulConst { x: Var, c: Vec<T> },
    Rope { x: Var, cos: Vec<T>, sin: Vec<T> },
    Embedding { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<T>, count: usize },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul { a, b, .. } | Add { a, b } | Sub { a, b } | Mul { a, b } => vec![*a, *b],
            AddPerRow { x, c } | MulPerRow { x, c } => vec![*x, *c],
            Transpose { x }
            | Permute { x, .. }
            | Reshape { x }
            | Scale { x, .. }
            | AddScalar { x }
            | Pow { x, .. }
            | Relu { x }
            | Square { x }
            | Sigmoid { x }
            | Swish { x }
            | Gelu { x }
            | Log { x }
            | Exp { x }
            | Reduce { x, .. }
            | SumAll { x }
            | Softmax { x }
            | MaskedFill { x, .. }
            | MulConst { x, .. }
            | Rope { x, .. } => vec![*x],
            Embedding { table, .. } => vec![*table],
            CrossEntropy { logits, .. } => vec![*logits],
        }
    }

    fn name(&self) -> &'static str {
        use Op::*;
        match self {
            Leaf => "leaf",
            MatMul { .. } => "matmul",
            Transpose { .. } => "transpose",
            Permute { .. } => "permute",
            Reshape { .. } => "reshape",
            Add { .. } => "add",
            Sub { .. } => "sub",
            Mul { .. } => "hadamard",
            AddPerRow { .. } => "add_per_row",
            MulPerRow { .. } => "mul_per_row",
            Scale { .. } => "scale",
            AddScalar { .. } => "add_scalar",
            Pow { .. } => "pow",
            Relu { .. } => "relu",
            Square { .. } => "square",
            Sigmoid { .. } => "sigmoid",
            Swish { .. } => "swish",
            Gelu { .. } => "gelu",
            Log { .. } => "log",
            Exp { .. } => "exp",
            Reduce { .. } => "reduce",
            SumAll { .. } => "sum",
            Softmax { .. } => "row_softmax",
            MaskedFill { .. } => "masked_fill",
            MulConst { .. } => "mul_const",
            Rope { .. } => "rope",
            Embedding { .. } => "embedding",
            CrossEntropy { .. } => "cross_entropy",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients of the leaves that requested them.
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    live_bytes: usize,
    peak_bytes: usize,
    memory_limit: Option<usize>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

// Shape of `small` with leading ones stripped must be a suffix of `big`.
fn suffix_broadcast(big: &[usize], small: &[usize]) -> bool {
    let first = small.iter().position(|&d| d != 1).unwrap_or(small.len());
    let core = &small[first..];
    core.len() <= big.len() && big[big.len() - core.len()..] == *core
}

fn split_rows(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap_or(&1);
    let rows = shape.iter().product::<usize>() / cols.max(1);
    (rows, cols)
}

fn permute_data<T: Copy>(data: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    if data.is_empty() {
        return out;
    }
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    loop {
        out.push(data[offset]);
        let mut axis = rank;
        loop {
            if axis == 0 {
                return out;
            }
            axis -= 1;
            idx[axis] += 1;
            offset += strides[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            offset -= strides[axis] * idx[axis];
            idx[axis] = 0;
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn sigmoid<T: Element>(x: T) -> T {
    T::one() / (T::one() + (-x).fast_exp())
}

fn map_each<T>(x: Var, n: usize, f: impl Fn(usize) -> T) -> Vec<(Var, Vec<T>)> {
    vec![(x, (0..n).map(f).collect())]
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            live_bytes: 0,
            peak_bytes: 0,
            memory_limit: None,
        }
    }

    /// Tape that refuses to hold more than `bytes` of tensor data at once.
    pub fn with_memory_limit(bytes: usize) -> Self {
        Self {
            memory_limit: Some(bytes),
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Bytes of tensor data currently held (values plus live gradients).
    pub fn live_bytes(&self) -> usize {
        self.live_bytes
    }

    /// High-water mark of [`Tape::live_bytes`].
    pub fn peak_bytes(&self) -> usize {
        self.peak_bytes
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn reserve(&mut self, bytes: usize) -> Result<()> {
        if let Some(limit) = self.memory_limit {
            if self.live_bytes + bytes > limit {
                return Err(Error::OutOfMemory {
                    requested: bytes,
                    live: self.live_bytes,
                    limit,
                });
            }
        }
        self.live_bytes += bytes;
        self.peak_bytes = self.peak_bytes.max(self.live_bytes);
        Ok(())
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        let inputs = op.inputs();
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        #[cfg(debug_assertions)]
        {
            let has_nan = |t: &Tensor<T>| t.data().iter().any(|x| x.is_nan());
            if has_nan(&value) && !inputs.iter().any(|v| has_nan(&self.nodes[v.0].value)) {
                panic!("{} produced NaN from NaN-free inputs", op.name());
            }
        }
        self.reserve(value.size_bytes())?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.reserve(value.size_bytes())?;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A trainable leaf; `backward` reports its gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, true)
    }

    /// A leaf that takes no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let out = self.value(x).map(f);
        self.push(out, op)
    }

    // ---- linear algebra ----------------------------------------------

    /// Matrix product over the last two axes.
    ///
    /// `a` is `[..., m, k]`. `b` is either a shared `[k, p]` matrix or has
    /// the same leading axes as `a`: `[..., k, p]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, p) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let shared_rhs = sb.len() == 2;
        if !shared_rhs && sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.extend([m, p]);
        let mut out = vec![T::zero(); batch * m * p];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        if shared_rhs {
            gemm(batch * m, k, p, ad, false, bd, false, &mut out, false);
        } else {
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    p,
                    &ad[i * m * k..(i + 1) * m * k],
                    false,
                    &bd[i * k * p..(i + 1) * k * p],
                    false,
                    &mut out[i * m * p..(i + 1) * m * p],
                    false,
                );
            }
        }
        self.push(Tensor::new(&out_shape, out)?, Op::MatMul { a, b, shared_rhs })
    }

    /// Swaps the last two axes (materialized).
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let rank = self.shape(x).len();
        if rank < 2 {
            return Err(Error::Input(format!(
                "transpose needs rank >= 2, got {:?}",
                self.shape(x)
            )));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        let shape = self.shape(x).to_vec();
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let data = permute_data(self.value(x).data(), &shape, &axes);
        self.push(Tensor::new(&out_shape, data)?, Op::Transpose { x })
    }

    /// General axis permutation: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len()
            || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true))
        {
            return Err(Error::Input(format!(
                "invalid permutation {axes:?} for shape {shape:?}"
            )));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let data = permute_data(self.value(x).data(), &shape, axes);
        self.push(
            Tensor::new(&out_shape, data)?,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        self.push(t, Op::Reshape { x })
    }

    // ---- elementwise -------------------------------------------------

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: impl FnOnce(Var, Var) -> Op<T>,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if !suffix_broadcast(&sa, &sb) {
            return Err(Error::shape(name, &sa, &sb));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(ad.len());
        if !bd.is_empty() {
            for chunk in ad.chunks(bd.len()) {
                out.extend(chunk.iter().zip(bd).map(|(&x, &y)| f(x, y)));
            }
        }
        self.push(Tensor::new(&sa, out)?, op(a, b))
    }

    /// `a + b`, with `b` broadcast over leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if !suffix_broadcast(self.shape(a), self.shape(b))
            && suffix_broadcast(self.shape(b), self.shape(a))
        {
            return self.add(b, a);
        }
        self.binary("add", a, b, |x, y| x + y, |a, b| Op::Add { a, b })
    }

    /// `a - b`, with `b` broadcast over leading axes of `a`.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    /// Elementwise product, with `b` broadcast over leading axes of `a`.
    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        if !suffix_broadcast(self.shape(a), self.shape(b))
            && suffix_broadcast(self.shape(b), self.shape(a))
        {
            return self.hadamard(b, a);
        }
        self.binary("hadamard", a, b, |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    fn check_per_row(&self, name: &'static str, x: Var, c: Var) -> Result<()> {
        let (sx, sc) = (self.shape(x), self.shape(c));
        if sx.is_empty() || sx[..sx.len() - 1] != *sc {
            return Err(Error::shape(name, sx, sc));
        }
        Ok(())
    }

    /// Adds `c[row]` to every element of each last-axis row of `x`.
    /// `c` has the shape of `x` without its last axis.
    pub fn add_per_row(&mut self, x: Var, c: Var) -> Result<Var> {
        self.check_per_row("add_per_row", x, c)?;
        let (_, cols) = split_rows(self.shape(x));
        let (xd, cd) = (self.value(x).data(), self.value(c).data());
        let out: Vec<T> = xd
            .chunks(cols.max(1))
            .zip(cd)
            .flat_map(|(row, &c)| row.iter().map(move |&v| v + c))
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::new(&shape, out)?, Op::AddPerRow { x, c })
    }

    /// Multiplies each last-axis row of `x` by `c[row]`.
    pub fn mul_per_row(&mut self, x: Var, c: Var) -> Result<Var> {
        self.check_per_row("mul_per_row", x, c)?;
        let (_, cols) = split_rows(self.shape(x));
        let (xd, cd) = (self.value(x).data(), self.value(c).data());
        let out: Vec<T> = xd
            .chunks(cols.max(1))
            .zip(cd)
            .flat_map(|(row, &c)| row.iter().map(move |&v| v * c))
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::new(&shape, out)?, Op::MulPerRow { x, c })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        self.unary(x, |v| v * c, Op::Scale { x, c })
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        self.unary(x, |v| v + c, Op::AddScalar { x })
    }

    pub fn pow(&mut self, x: Var, p: f64) -> Result<Var> {
        let p = T::of(p);
        self.unary(x, |v| v.powf(p), Op::Pow { x, p })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.max(T::zero()), Op::Relu { x })
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v * v, Op::Square { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, sigmoid, Op::Sigmoid { x })
    }

    /// `x · sigmoid(x)`.
    pub fn swish(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v * sigmoid(v), Op::Swish { x })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let (c, a) = (T::of(GELU_C), T::of(GELU_A));
        let half = T::of(0.5);
        self.unary(
            x,
            |v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh()),
            Op::Gelu { x },
        )
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.ln(), Op::Log { x })
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.exp(), Op::Exp { x })
    }

    // ---- reductions --------------------------------------------------

    /// Reduces `axis` away.
    pub fn reduce(&mut self, x: Var, axis: usize, kind: ReduceKind) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Input(format!(
                "reduce axis {axis} out of range for shape {shape:?}"
            )));
        }
        let len = shape[axis];
        if len == 0 {
            return Err(Error::Input(format!("reduce over empty axis {axis}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let xd = self.value(x).data();
        let inv = T::one() / T::of(len as f64);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| xd[(o * len + j) * inner + i];
                let sum = (0..len).fold(T::zero(), |acc, j| acc + at(j));
                out[o * inner + i] = match kind {
                    ReduceKind::Sum => sum,
                    ReduceKind::Mean => sum * inv,
                    ReduceKind::Var => {
                        let mean = sum * inv;
                        (0..len).fold(T::zero(), |acc, j| {
                            let d = at(j) - mean;
                            acc + d * d
                        }) * inv
                    }
                };
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        self.push(Tensor::new(&out_shape, out)?, Op::Reduce { x, axis, kind })
    }

    /// Sum over the last axis.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let axis = self.shape(x).len().checked_sub(1).ok_or_else(|| {
            Error::Input("sum_last on a scalar".into())
        })?;
        self.reduce(x, axis, ReduceKind::Sum)
    }

    /// Sum of every element, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().fold(T::zero(), |a, &b| a + b);
        self.push(Tensor::scalar(s), Op::SumAll { x })
    }

    /// Softmax over the last axis, max-subtracted. `-inf` entries get zero
    /// weight; a row that is entirely `-inf` becomes all zeros.
    pub fn row_softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (rows, cols) = split_rows(&shape);
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); xd.len()];
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            if max == T::neg_infinity() {
                continue;
            }
            let dst = &mut out[r * cols..(r + 1) * cols];
            let mut total = T::zero();
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = (v - max).exp();
                total = total + *d;
            }
            let inv = T::one() / total;
            for d in dst.iter_mut() {
                *d = *d * inv;
            }
        }
        self.push(Tensor::new(&shape, out)?, Op::Softmax { x })
    }

    // ---- masking and constants ---------------------------------------

    /// Replaces entries where `keep` is false by `value`; no gradient flows
    /// through replaced entries.
    pub fn masked_fill(&mut self, x: Var, keep: &[bool], value: f64) -> Result<Var> {
        if keep.len() != self.value(x).numel() {
            return Err(Error::shape("masked_fill", self.shape(x), &[keep.len()]));
        }
        let v = T::of(value);
        let out: Vec<T> = self
            .value(x)
            .data()
            .iter()
            .zip(keep)
            .map(|(&d, &k)| if k { d } else { v })
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(
            Tensor::new(&shape, out)?,
            Op::MaskedFill {
                x,
                keep: keep.to_vec(),
            },
        )
    }

    /// Elementwise product with a constant of the same size.
    pub fn mul_const(&mut self, x: Var, c: &Tensor<T>) -> Result<Var> {
        if c.numel() != self.value(x).numel() {
            return Err(Error::shape("mul_const", self.shape(x), c.shape()));
        }
        let out: Vec<T> = self
            .value(x)
            .data()
            .iter()
            .zip(c.data())
            .map(|(&a, &b)| a * b)
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(
            Tensor::new(&shape, out)?,
            Op::MulConst {
                x,
                c: c.data().to_vec(),
            },
        )
    }

    /// Inverted dropout. In eval mode, or with rate 0, returns `x` itself.
    pub fn dropout(&mut self, x: Var, rate: f64, mode: Mode, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let keep_scale = T::of(1.0 / (1.0 - rate));
        let n = self.value(x).numel();
        // drop when a uniform u32 falls below rate·2³²
        let threshold = (rate * 4_294_967_296.0) as u64;
        let mask: Vec<T> = (0..n)
            .map(|_| {
                if (rng.next_u32() as u64) < threshold {
                    T::zero()
                } else {
                    keep_scale
                }
            })
            .collect();
        let mask = Tensor::new(self.shape(x), mask)?;
        self.mul_const(x, &mask)
    }

    // ---- model-specific primitives -----------------------------------

    /// Rotary position embedding over the last axis of `x: [..., n, d]`.
    ///
    /// Pairs `(x[2i], x[2i+1])` of row `m` are rotated by `positions[m] * thetas[i]`.
    pub fn rope(&mut self, x: Var, positions: &[f64], thetas: &[f64]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::Input(format!("rope needs rank >= 2, got {shape:?}")));
        }
        let (n, d) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        if d % 2 != 0 || thetas.len() * 2 != d {
            return Err(Error::Config(format!(
                "rope dimension {d} must be even and match {} frequencies",
                thetas.len()
            )));
        }
        if positions.len() != n {
            return Err(Error::shape("rope", &shape, &[positions.len()]));
        }
        let half = d / 2;
        let mut cos = Vec::with_capacity(n * half);
        let mut sin = Vec::with_capacity(n * half);
        for &m in positions {
            for &th in thetas {
                let (s, c) = (m * th).sin_cos();
                cos.push(T::of(c));
                sin.push(T::of(s));
            }
        }
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); xd.len()];
        for (r, (src, dst)) in xd.chunks(d).zip(out.chunks_mut(d)).enumerate() {
            let row = (r % n) * half;
            for i in 0..half {
                let (c, s) = (cos[row + i], sin[row + i]);
                let (a, b) = (src[2 * i], src[2 * i + 1]);
                dst[2 * i] = a * c - b * s;
                dst[2 * i + 1] = b * c + a * s;
            }
        }
        self.push(Tensor::new(&shape, out)?, Op::Rope { x, cos, sin })
    }

    /// Gathers rows of `table: [v, d]`; output shape is `prefix ++ [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], prefix: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(Error::Input(format!("embedding table must be rank 2, got {ts:?}")));
        }
        if prefix.iter().product::<usize>() != ids.len() {
            return Err(Error::shape("embedding", prefix, &[ids.len()]));
        }
        let (v, d) = (ts[0], ts[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Input(format!("token id {bad} out of range for vocabulary of {v}")));
        }
        let td = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        let mut shape = prefix.to_vec();
        shape.push(d);
        self.push(
            Tensor::new(&shape, out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Mean token cross-entropy over the rows of `logits: [..., v]` whose
    /// target is `Some`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let (rows, v) = split_rows(&shape);
        if rows != targets.len() {
            return Err(Error::shape("softmax_cross_entropy", &shape, &[targets.len()]));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= v) {
            return Err(Error::Input(format!("target {bad} out of range for {v} classes")));
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(Error::Input("every target is ignored".into()));
        }
        let ld = self.value(logits).data();
        let mut probs = vec![T::zero(); ld.len()];
        let mut total = 0.0f64;
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            let row = &ld[r * v..(r + 1) * v];
            let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let dst = &mut probs[r * v..(r + 1) * v];
            let mut z = T::zero();
            for (p, &x) in dst.iter_mut().zip(row) {
                *p = (x - max).exp();
                z = z + *p;
            }
            for p in dst.iter_mut() {
                *p = *p / z;
            }
            total += (z.ln() + max - row[t]).f64();
        }
        let loss = T::of(total / count as f64);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
        )
    }

    // ---- backward ----------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Gradients of shared inputs
    /// accumulate; the returned set holds gradients of trainable leaves.
    pub fn backward(&mut self, loss: Var) -> Result<Grads<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        let bytes = std::mem::size_of::<T>();
        self.reserve(bytes)?;
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                if grads[i].take().is_some() {
                    self.live_bytes -= self.nodes[i].value.numel() * bytes;
                }
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let contributions = self.node_backward(i, &g)?;
            let freed = g.len() * bytes;
            for (v, c) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&c) {
                            *a = *a + *b;
                        }
                    }
                    slot @ None => {
                        self.reserve(c.len() * bytes)?;
                        *slot = Some(c);
                    }
                }
            }
            self.live_bytes -= freed;
        }

        let out = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| match (g, &node.op) {
                (Some(g), Op::Leaf) if node.requires_grad => {
                    Some(Tensor::new(node.value.shape(), g).expect("gradient shape"))
                }
                _ => None,
            })
            .collect::<Vec<_>>();
        // leaf gradients are handed to the caller
        let held: usize = out.iter().flatten().map(|t| t.size_bytes()).sum();
        self.live_bytes -= held;
        Ok(Grads { grads: out })
    }

    fn node_backward(&self, i: usize, g: &[T]) -> Result<Vec<(Var, Vec<T>)>> {
        let node = &self.nodes[i];
        let y = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let shp = |v: Var| self.nodes[v.0].value.shape();
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::MatMul { a, b, shared_rhs } => {
                let sa = shp(*a);
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let p = shp(*b)[shp(*b).len() - 1];
                let batch: usize = sa[..sa.len() - 2].iter().product();
                let (ad, bd) = (val(*a), val(*b));
                let mut da = vec![T::zero(); ad.len()];
                let mut db = vec![T::zero(); bd.len()];
                if *shared_rhs {
                    gemm(batch * m, p, k, g, false, bd, true, &mut da, false);
                    gemm(k, batch * m, p, ad, true, g, false, &mut db, false);
                } else {
                    for t in 0..batch {
                        let gs = &g[t * m * p..(t + 1) * m * p];
                        let as_ = &ad[t * m * k..(t + 1) * m * k];
                        let bs = &bd[t * k * p..(t + 1) * k * p];
                        gemm(m, p, k, gs, false, bs, true, &mut da[t * m * k..(t + 1) * m * k], false);
                        gemm(k, m, p, as_, true, gs, false, &mut db[t * k * p..(t + 1) * k * p], false);
                    }
                }
                vec![(*a, da), (*b, db)]
            }
            Op::Transpose { x } => {
                let rank = node.value.shape().len();
                let mut axes: Vec<usize> = (0..rank).collect();
                axes.swap(rank - 2, rank - 1);
                vec![(*x, permute_data(g, node.value.shape(), &axes))]
            }
            Op::Permute { x, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                vec![(*x, permute_data(g, node.value.shape(), &inverse))]
            }
            Op::Reshape { x } => vec![(*x, g.to_vec())],
            Op::Add { a, b } | Op::Sub { a, b } => {
                let nb = val(*b).len().max(1);
                let mut db = vec![T::zero(); nb];
                for chunk in g.chunks(nb) {
                    for (d, &gi) in db.iter_mut().zip(chunk) {
                        *d = *d + gi;
                    }
                }
                if matches!(node.op, Op::Sub { .. }) {
                    db.iter_mut().for_each(|d| *d = -*d);
                }
                vec![(*a, g.to_vec()), (*b, db)]
            }
            Op::Mul { a, b } => {
                let (ad, bd) = (val(*a), val(*b));
                let nb = bd.len().max(1);
                let mut da = Vec::with_capacity(g.len());
                let mut db = vec![T::zero(); nb];
                for (gc, ac) in g.chunks(nb).zip(ad.chunks(nb)) {
                    da.extend(gc.iter().zip(bd).map(|(&gi, &b)| gi * b));
                    for ((d, &gi), &a) in db.iter_mut().zip(gc).zip(ac) {
                        *d = *d + gi * a;
                    }
                }
                vec![(*a, da), (*b, db)]
            }
            Op::AddPerRow { x, c } => {
                let (_, cols) = split_rows(node.value.shape());
                let dc = g.chunks(cols).map(|r| r.iter().fold(T::zero(), |a, &b| a + b)).collect();
                vec![(*x, g.to_vec()), (*c, dc)]
            }
            Op::MulPerRow { x, c } => {
                let (_, cols) = split_rows(node.value.shape());
                let (xd, cd) = (val(*x), val(*c));
                let dx = g
                    .chunks(cols.max(1))
                    .zip(cd)
                    .flat_map(|(row, &c)| row.iter().map(move |&v| v * c))
                    .collect();
                let dc = g
                    .chunks(cols)
                    .zip(xd.chunks(cols))
                    .map(|(gr, xr)| gr.iter().zip(xr).fold(T::zero(), |a, (&p, &q)| a + p * q))
                    .collect();
                vec![(*x, dx), (*c, dc)]
            }
            Op::Scale { x, c } => map_each(*x, g.len(), |i| g[i] * *c),
            Op::AddScalar { x } => vec![(*x, g.to_vec())],
            Op::Pow { x, p } => {
                let xd = val(*x);
                map_each(*x, g.len(), |i| g[i] * *p * xd[i].powf(*p - T::one()))
            }
            Op::Relu { x } => {
                let xd = val(*x);
                map_each(*x, g.len(), |i| if xd[i] > T::zero() { g[i] } else { T::zero() })
            }
            Op::Square { x } => {
                let xd = val(*x);
                let two = T::of(2.0);
                map_each(*x, g.len(), |i| g[i] * two * xd[i])
            }
            Op::Sigmoid { x } => map_each(*x, g.len(), |i| g[i] * y[i] * (T::one() - y[i])),
            Op::Swish { x } => {
                let xd = val(*x);
                map_each(*x, g.len(), |i| {
                    let s = sigmoid(xd[i]);
                    g[i] * (s + xd[i] * s * (T::one() - s))
                })
            }
            Op::Gelu { x } => {
                let xd = val(*x);
                let (c, a) = (T::of(GELU_C), T::of(GELU_A));
                let (half, three) = (T::of(0.5), T::of(3.0));
                map_each(*x, g.len(), |i| {
                    let v = xd[i];
                    let t = (c * (v + a * v * v * v)).tanh();
                    let dt = (T::one() - t * t) * c * (T::one() + three * a * v * v);
                    g[i] * (half * (T::one() + t) + half * v * dt)
                })
            }
            Op::Log { x } => {
                let xd = val(*x);
                map_each(*x, g.len(), |i| g[i] / xd[i])
            }
            Op::Exp { x } => map_each(*x, g.len(), |i| g[i] * y[i]),
            Op::Reduce { x, axis, kind } => {
                let shape = shp(*x);
                let len = shape[*axis];
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let xd = val(*x);
                let inv = T::one() / T::of(len as f64);
                let two = T::of(2.0);
                let mut dx = vec![T::zero(); xd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let gi = g[o * inner + i];
                        let idx = |j: usize| (o * len + j) * inner + i;
                        match kind {
                            ReduceKind::Sum => (0..len).for_each(|j| dx[idx(j)] = gi),
                            ReduceKind::Mean => (0..len).for_each(|j| dx[idx(j)] = gi * inv),
                            ReduceKind::Var => {
                                let mean = (0..len).fold(T::zero(), |a, j| a + xd[idx(j)]) * inv;
                                for j in 0..len {
                                    dx[idx(j)] = gi * two * (xd[idx(j)] - mean) * inv;
                                }
                            }
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::SumAll { x } => vec![(*x, vec![g[0]; val(*x).len()])],
            Op::Softmax { x } => {
                let (_, cols) = split_rows(node.value.shape());
                let mut dx = vec![T::zero(); y.len()];
                for ((dr, yr), gr) in dx.chunks_mut(cols).zip(y.chunks(cols)).zip(g.chunks(cols)) {
                    let dot = yr.iter().zip(gr).fold(T::zero(), |a, (&p, &q)| a + p * q);
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot);
                    }
                }
                vec![(*x, dx)]
            }
            Op::MaskedFill { x, keep } => {
                map_each(*x, g.len(), |i| if keep[i] { g[i] } else { T::zero() })
            }
            Op::MulConst { x, c } => map_each(*x, g.len(), |i| g[i] * c[i]),
            Op::Rope { x, cos, sin } => {
                let shape = node.value.shape();
                let (n, d) = (shape[shape.len() - 2], shape[shape.len() - 1]);
                let half = d / 2;
                let mut dx = vec![T::zero(); g.len()];
                for (r, (src, dst)) in g.chunks(d).zip(dx.chunks_mut(d)).enumerate() {
                    let row = (r % n) * half;
                    for i in 0..half {
                        let (c, s) = (cos[row + i], sin[row + i]);
                        let (a, b) = (src[2 * i], src[2 * i + 1]);
                        dst[2 * i] = a * c + b * s;
                        dst[2 * i + 1] = b * c - a * s;
                    }
                }
                vec![(*x, dx)]
            }
            Op::Embedding { table, ids } => {
                let d = shp(*table)[1];
                let mut dt = vec![T::zero(); val(*table).len()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] = dt[id * d + j] + g[r * d + j];
                    }
                }
                vec![(*table, dt)]
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let v = *shp(*logits).last().unwrap();
                let scale = g[0] / T::of(*count as f64);
                let mut dl = vec![T::zero(); probs.len()];
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    for j in 0..v {
                        dl[r * v + j] = probs[r * v + j] * scale;
                    }
                    dl[r * v + t] = dl[r * v + t] - scale;
                }
                vec![(*logits, dl)]
            }
        })
    }
}
