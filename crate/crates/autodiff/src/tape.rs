//! Operation tape.
//!
//! Every primitive evaluates eagerly, stores its value and records the inputs
//! needed to replay adjoints. When the tape is created with
//! [`Tape::with_tangents`], each primitive also pushes a tangent forward
//! (forward-mode). Tangents are never differentiated in reverse: they behave
//! as constants for [`Tape::backward`].
//!
//! Primitive set: `add`, `sub`, `mul`, `scale`, `matmul`, `affine`, `tanh`,
//! `silu`, `sin`, `cos`, `square`, `sum`, `mean`, `concat`, `slice`,
//! `reshape`, `gather`, `stop_gradient`. `add` and `affine` broadcast a `[1, n]` right operand
//! over the rows of an `[m, n]` left operand; nothing else broadcasts.

use std::sync::Arc;

use crate::array::NdArray;
use crate::error::{AdError, Result};
use crate::kernels::{gemm, silu, silu_prime};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Index value that makes [`Tape::gather`] emit a zero.
pub const GATHER_ZERO: usize = usize::MAX;

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Affine(Var, Var, Var),
    Tanh(Var),
    Silu(Var),
    Sin(Var),
    Cos(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize, end: usize },
    Reshape(Var),
    Gather { input: Var, index: Arc<[usize]> },
    StopGradient(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::Affine(..) => "affine",
            Op::Tanh(..) => "tanh",
            Op::Silu(..) => "silu",
            Op::Sin(..) => "sin",
            Op::Cos(..) => "cos",
            Op::Square(..) => "square",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape(..) => "reshape",
            Op::Gather { .. } => "gather",
            Op::StopGradient(..) => "stop_gradient",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: NdArray,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    tangents: bool,
}

/// Adjoints produced by one reverse sweep.
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    visit_order: Vec<usize>,
}

impl Gradients {
    /// Gradient with respect to `var`; zeros when the loss does not depend on it.
    pub fn wrt(&self, var: Var) -> NdArray {
        let shape = self.shapes[var.0].clone();
        match &self.adjoints[var.0] {
            Some(g) => NdArray::from_parts(shape, g.clone(), None),
            None => NdArray::zeros(&shape),
        }
    }

    /// Indices of the recorded operations whose adjoints were replayed, in
    /// the order they were visited.
    pub fn visit_order(&self) -> &[usize] {
        &self.visit_order
    }
}

fn any_tangent(tape: &Tape, vars: &[Var]) -> bool {
    tape.tangents && vars.iter().any(|v| tape.nodes[v.0].value.tangent().is_some())
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src.to_vec()),
    }
}

fn add_scaled_into(dst: &mut Option<Vec<f64>>, src: &[f64], alpha: f64) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += alpha * b),
        None => *dst = Some(src.iter().map(|b| alpha * b).collect()),
    }
}

impl Tape {
    /// A tape that only records values for reverse mode.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            tangents: false,
        }
    }

    /// A tape that also propagates tangents of its inputs.
    pub fn with_tangents() -> Self {
        Self {
            nodes: Vec::new(),
            tangents: true,
        }
    }

    pub fn tracks_tangents(&self) -> bool {
        self.tangents
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(AdError::UnknownVar(v.0))
        }
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn val(&self, v: Var) -> &NdArray {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: NdArray, op: Op, requires_grad: bool) -> Result<Var> {
        value.ensure_finite(op.name())?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn input(&self, value: NdArray) -> NdArray {
        if self.tangents {
            value
        } else {
            value.without_tangent()
        }
    }

    /// A differentiable input. Its tangent, if any, seeds forward mode.
    pub fn leaf(&mut self, value: NdArray) -> Result<Var> {
        let value = self.input(value);
        self.push(value, Op::Leaf, true)
    }

    /// An input that receives no gradient. Its tangent, if any, is still
    /// propagated in forward mode.
    pub fn constant(&mut self, value: NdArray) -> Result<Var> {
        let value = self.input(value);
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &NdArray {
        self.val(v)
    }

    /// Tangent of `v`; zeros when no input tangent reaches it.
    pub fn tangent_of(&self, v: Var) -> NdArray {
        let value = self.val(v);
        match value.tangent() {
            Some(t) => NdArray::from_parts(value.shape().to_vec(), t.to_vec(), None),
            None => NdArray::zeros(value.shape()),
        }
    }

    /// Name of the primitive that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.node(v).op.name()
    }

    /// Direct inputs of the primitive that produced `v`.
    pub fn inputs_of(&self, v: Var) -> Vec<Var> {
        match &self.node(v).op {
            Op::Leaf | Op::Constant => Vec::new(),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Affine(a, b, c) => vec![*a, *b, *c],
            Op::Scale(a, _)
            | Op::Tanh(a)
            | Op::Silu(a)
            | Op::Sin(a)
            | Op::Cos(a)
            | Op::Square(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Reshape(a)
            | Op::StopGradient(a) => vec![*a],
            Op::Concat { parts, .. } => parts.clone(),
            Op::Slice { input, .. } | Op::Gather { input, .. } => vec![*input],
        }
    }

    /// Whether reverse mode propagates adjoints into `v`.
    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    fn grad_any(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.node(*v).requires_grad)
    }

    /// Row-broadcast compatibility: `b` equals `a` or is `[1, n]` under `[m, n]`.
    fn broadcast_rows(&self, op: &'static str, a: Var, b: Var) -> Result<bool> {
        let (sa, sb) = (self.val(a).shape(), self.val(b).shape());
        if sa == sb {
            return Ok(false);
        }
        if sa.len() == 2 && sb.len() == 2 && sb[0] == 1 && sa[1] == sb[1] {
            return Ok(true);
        }
        Err(AdError::ShapeMismatch {
            op,
            left: sa.to_vec(),
            right: sb.to_vec(),
        })
    }

    fn binary_broadcast(&mut self, a: Var, b: Var, sign: f64, op: Op) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let bcast = self.broadcast_rows(op.name(), a, b)?;
        let (va, vb) = (self.val(a), self.val(b));
        let cols = vb.len().max(1);
        let data: Vec<f64> = if bcast {
            va.data()
                .iter()
                .enumerate()
                .map(|(i, x)| x + sign * vb.data()[i % cols])
                .collect()
        } else {
            va.data()
                .iter()
                .zip(vb.data())
                .map(|(x, y)| x + sign * y)
                .collect()
        };
        let tangent = if any_tangent(self, &[a, b]) {
            let mut t = va.tangent().map_or_else(|| vec![0.0; data.len()], <[f64]>::to_vec);
            if let Some(tb) = vb.tangent() {
                for (i, ti) in t.iter_mut().enumerate() {
                    *ti += sign * tb[if bcast { i % cols } else { i }];
                }
            }
            Some(t)
        } else {
            None
        };
        let value = NdArray::from_parts(va.shape().to_vec(), data, tangent);
        let rg = self.grad_any(&[a, b]);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_broadcast(a, b, 1.0, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_broadcast(a, b, -1.0, Op::Sub(a, b))
    }

    /// Elementwise product of equally shaped arrays.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (va, vb) = (self.val(a), self.val(b));
        va.check_same_shape("mul", vb)?;
        let data: Vec<f64> = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let tangent = if any_tangent(self, &[a, b]) {
            let mut t = vec![0.0; data.len()];
            if let Some(ta) = va.tangent() {
                t.iter_mut().zip(ta.iter().zip(vb.data())).for_each(|(o, (d, y))| *o += d * y);
            }
            if let Some(tb) = vb.tangent() {
                t.iter_mut().zip(tb.iter().zip(va.data())).for_each(|(o, (d, x))| *o += d * x);
            }
            Some(t)
        } else {
            None
        };
        let value = NdArray::from_parts(va.shape().to_vec(), data, tangent);
        let rg = self.grad_any(&[a, b]);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, alpha: f64) -> Result<Var> {
        self.check(a)?;
        let va = self.val(a);
        let data = va.data().iter().map(|x| alpha * x).collect();
        let tangent = if any_tangent(self, &[a]) {
            va.tangent().map(|t| t.iter().map(|x| alpha * x).collect())
        } else {
            None
        };
        let value = NdArray::from_parts(va.shape().to_vec(), data, tangent);
        let rg = self.grad_any(&[a]);
        self.push(value, Op::Scale(a, alpha), rg)
    }

    fn matmul_dims(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize, usize)> {
        let (m, k) = self.val(a).dims2(op)?;
        let (k2, n) = self.val(b).dims2(op)?;
        if k != k2 {
            return Err(AdError::ShapeMismatch {
                op,
                left: self.val(a).shape().to_vec(),
                right: self.val(b).shape().to_vec(),
            });
        }
        Ok((m, k, n))
    }

    fn product_with_tangent(&self, a: Var, b: Var, m: usize, k: usize, n: usize) -> (Vec<f64>, Option<Vec<f64>>) {
        let (va, vb) = (self.val(a), self.val(b));
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, va.data(), false, vb.data(), false, &mut out, false);
        let tangent = if any_tangent(self, &[a, b]) {
            let mut t = vec![0.0; m * n];
            let mut written = false;
            if let Some(ta) = va.tangent() {
                gemm(m, k, n, ta, false, vb.data(), false, &mut t, written);
                written = true;
            }
            if let Some(tb) = vb.tangent() {
                gemm(m, k, n, va.data(), false, tb, false, &mut t, written);
            }
            Some(t)
        } else {
            None
        };
        (out, tangent)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (m, k, n) = self.matmul_dims("matmul", a, b)?;
        let (data, tangent) = self.product_with_tangent(a, b, m, k, n);
        let value = NdArray::from_parts(vec![m, n], data, tangent);
        let rg = self.grad_any(&[a, b]);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// `x W + b` with `x: [m, k]`, `W: [k, n]` and `b: [1, n]` broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        self.check(b)?;
        let (m, k, n) = self.matmul_dims("affine", x, w)?;
        let vb = self.val(b);
        if vb.shape() != [1, n] {
            return Err(AdError::ShapeMismatch {
                op: "affine",
                left: vec![1, n],
                right: vb.shape().to_vec(),
            });
        }
        let (mut data, mut tangent) = self.product_with_tangent(x, w, m, k, n);
        for row in data.chunks_mut(n) {
            row.iter_mut().zip(vb.data()).for_each(|(o, bias)| *o += bias);
        }
        if any_tangent(self, &[x, w, b]) {
            let t = tangent.get_or_insert_with(|| vec![0.0; m * n]);
            if let Some(tb) = vb.tangent() {
                for row in t.chunks_mut(n) {
                    row.iter_mut().zip(tb).for_each(|(o, d)| *o += d);
                }
            }
        }
        let value = NdArray::from_parts(vec![m, n], data, tangent);
        let rg = self.grad_any(&[x, w, b]);
        self.push(value, Op::Affine(x, w, b), rg)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64, df: impl Fn(f64) -> f64) -> Result<Var> {
        self.check(a)?;
        let va = self.val(a);
        let data = va.data().iter().map(|&x| f(x)).collect();
        let tangent = if any_tangent(self, &[a]) {
            va.tangent()
                .map(|t| t.iter().zip(va.data()).map(|(d, &x)| d * df(x)).collect())
        } else {
            None
        };
        let value = NdArray::from_parts(va.shape().to_vec(), data, tangent);
        let rg = self.grad_any(&[a]);
        self.push(value, op, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Tanh(a), f64::tanh, |x| {
            let y = x.tanh();
            1.0 - y * y
        })
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Silu(a), silu, silu_prime)
    }

    pub fn sin(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sin(a), f64::sin, f64::cos)
    }

    pub fn cos(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Cos(a), f64::cos, |x| -x.sin())
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Square(a), |x| x * x, |x| 2.0 * x)
    }

    fn reduce(&mut self, a: Var, mean: bool) -> Result<Var> {
        self.check(a)?;
        let va = self.val(a);
        let scale = if mean {
            if va.is_empty() {
                return Err(AdError::Invalid {
                    op: "mean",
                    reason: "empty array".into(),
                });
            }
            1.0 / va.len() as f64
        } else {
            1.0
        };
        let s: f64 = va.data().iter().sum::<f64>() * scale;
        let tangent = if any_tangent(self, &[a]) {
            va.tangent().map(|t| vec![t.iter().sum::<f64>() * scale])
        } else {
            None
        };
        let value = NdArray::from_parts(Vec::new(), vec![s], tangent);
        let rg = self.grad_any(&[a]);
        let op = if mean { Op::Mean(a) } else { Op::Sum(a) };
        self.push(value, op, rg)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.reduce(a, false)
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.reduce(a, true)
    }

    /// Concatenates rank-2 arrays along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() || axis > 1 {
            return Err(AdError::Invalid {
                op: "concat",
                reason: format!("{} parts along axis {axis}", parts.len()),
            });
        }
        for &p in parts {
            self.check(p)?;
        }
        let dims: Vec<(usize, usize)> = parts
            .iter()
            .map(|&p| self.val(p).dims2("concat"))
            .collect::<Result<_>>()?;
        let (r0, c0) = dims[0];
        for (&p, &(r, c)) in parts.iter().zip(&dims) {
            let fixed_ok = if axis == 0 { c == c0 } else { r == r0 };
            if !fixed_ok {
                return Err(AdError::ShapeMismatch {
                    op: "concat",
                    left: self.val(parts[0]).shape().to_vec(),
                    right: self.val(p).shape().to_vec(),
                });
            }
        }
        let with_tangent = any_tangent(self, parts);
        let gather = |tape: &Tape, pick: &dyn Fn(&NdArray) -> Option<Vec<f64>>| -> Vec<f64> {
            if axis == 0 {
                parts
                    .iter()
                    .flat_map(|&p| {
                        let v = tape.val(p);
                        pick(v).unwrap_or_else(|| vec![0.0; v.len()])
                    })
                    .collect()
            } else {
                let blocks: Vec<Vec<f64>> = parts
                    .iter()
                    .map(|&p| {
                        let v = tape.val(p);
                        pick(v).unwrap_or_else(|| vec![0.0; v.len()])
                    })
                    .collect();
                let mut out = Vec::with_capacity(blocks.iter().map(Vec::len).sum());
                for r in 0..r0 {
                    for (blk, &(_, c)) in blocks.iter().zip(&dims) {
                        out.extend_from_slice(&blk[r * c..(r + 1) * c]);
                    }
                }
                out
            }
        };
        let data = gather(self, &|v| Some(v.data().to_vec()));
        let tangent = with_tangent.then(|| gather(self, &|v| v.tangent().map(<[f64]>::to_vec)));
        let shape = if axis == 0 {
            vec![dims.iter().map(|d| d.0).sum(), c0]
        } else {
            vec![r0, dims.iter().map(|d| d.1).sum()]
        };
        let value = NdArray::from_parts(shape, data, tangent);
        let rg = self.grad_any(parts);
        self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        )
    }

    /// Rows (`axis = 0`) or columns (`axis = 1`) `start..end` of a rank-2 array.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.check(a)?;
        let va = self.val(a);
        let (r, c) = va.dims2("slice")?;
        let extent = match axis {
            0 => r,
            1 => c,
            _ => {
                return Err(AdError::Invalid {
                    op: "slice",
                    reason: format!("axis {axis}"),
                })
            }
        };
        if start > end || end > extent {
            return Err(AdError::Invalid {
                op: "slice",
                reason: format!("range {start}..{end} out of 0..{extent}"),
            });
        }
        let take = |src: &[f64]| -> Vec<f64> {
            if axis == 0 {
                src[start * c..end * c].to_vec()
            } else {
                (0..r).flat_map(|i| src[i * c + start..i * c + end].iter().copied()).collect()
            }
        };
        let data = take(va.data());
        let tangent = if any_tangent(self, &[a]) {
            va.tangent().map(take)
        } else {
            None
        };
        let shape = if axis == 0 {
            vec![end - start, c]
        } else {
            vec![r, end - start]
        };
        let value = NdArray::from_parts(shape, data, tangent);
        let rg = self.grad_any(&[a]);
        self.push(
            value,
            Op::Slice {
                input: a,
                axis,
                start,
                end,
            },
            rg,
        )
    }

    /// Same data under a new shape with the same element count.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check(a)?;
        let va = self.val(a);
        let n: usize = shape.iter().product();
        if n != va.len() {
            return Err(AdError::ShapeMismatch {
                op: "reshape",
                left: va.shape().to_vec(),
                right: shape.to_vec(),
            });
        }
        let tangent = if any_tangent(self, &[a]) {
            va.tangent().map(<[f64]>::to_vec)
        } else {
            None
        };
        let value = NdArray::from_parts(shape.to_vec(), va.data().to_vec(), tangent);
        let rg = self.grad_any(&[a]);
        self.push(value, Op::Reshape(a), rg)
    }

    /// `out.flat[i] = a.flat[index[i]]`, or zero where `index[i]` is
    /// [`GATHER_ZERO`]. Indices may repeat; adjoints of repeats accumulate.
    pub fn gather(&mut self, a: Var, index: Arc<[usize]>, shape: &[usize]) -> Result<Var> {
        self.check(a)?;
        let va = self.val(a);
        let n: usize = shape.iter().product();
        if n != index.len() {
            return Err(AdError::Invalid {
                op: "gather",
                reason: format!("{} indices for shape {shape:?}", index.len()),
            });
        }
        if let Some(&bad) = index.iter().find(|&&i| i != GATHER_ZERO && i >= va.len()) {
            return Err(AdError::Invalid {
                op: "gather",
                reason: format!("index {bad} out of range for {} elements", va.len()),
            });
        }
        let take = |src: &[f64]| -> Vec<f64> {
            index
                .iter()
                .map(|&i| if i == GATHER_ZERO { 0.0 } else { src[i] })
                .collect()
        };
        let data = take(va.data());
        let tangent = if any_tangent(self, &[a]) {
            va.tangent().map(take)
        } else {
            None
        };
        let value = NdArray::from_parts(shape.to_vec(), data, tangent);
        let rg = self.grad_any(&[a]);
        self.push(value, Op::Gather { input: a, index }, rg)
    }

    /// Value passthrough that blocks both reverse adjoints and forward tangents.
    pub fn stop_gradient(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let va = self.val(a);
        let value = NdArray::from_parts(va.shape().to_vec(), va.data().to_vec(), None);
        self.push(value, Op::StopGradient(a), false)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check(loss)?;
        let v = self.val(loss);
        if v.len() != 1 {
            return Err(AdError::NotScalar {
                shape: v.shape().to_vec(),
            });
        }
        self.backward_seeded(&[(loss, NdArray::from_parts(v.shape().to_vec(), vec![1.0], None))])
    }

    /// Reverse sweep seeded with arbitrary output cotangents (a VJP).
    pub fn backward_seeded(&self, seeds: &[(Var, NdArray)]) -> Result<Gradients> {
        let n = self.nodes.len();
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; n];
        let mut start = 0;
        for (var, seed) in seeds {
            self.check(*var)?;
            self.val(*var).check_same_shape("backward", seed)?;
            add_into(&mut adj[var.0], seed.data());
            start = start.max(var.0 + 1);
        }
        let mut visit_order = Vec::new();
        for i in (0..start).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                adj[i] = Some(g);
                continue;
            }
            visit_order.push(i);
            self.propagate(node, &g, &mut adj);
            adj[i] = Some(g);
        }
        Ok(Gradients {
            adjoints: adj,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            visit_order,
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf | Op::Constant | Op::StopGradient(_) => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Add(..)) { 1.0 } else { -1.0 };
                if self.wants(*a) {
                    add_into(&mut adj[a.0], g);
                }
                if self.wants(*b) {
                    let vb = self.val(*b);
                    if vb.len() == g.len() {
                        add_scaled_into(&mut adj[b.0], g, sign);
                    } else {
                        let cols = vb.len();
                        let mut red = vec![0.0; cols];
                        for row in g.chunks(cols) {
                            red.iter_mut().zip(row).for_each(|(o, x)| *o += x);
                        }
                        add_scaled_into(&mut adj[b.0], &red, sign);
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let d: Vec<f64> = g.iter().zip(self.val(*b).data()).map(|(x, y)| x * y).collect();
                    add_into(&mut adj[a.0], &d);
                }
                if self.wants(*b) {
                    let d: Vec<f64> = g.iter().zip(self.val(*a).data()).map(|(x, y)| x * y).collect();
                    add_into(&mut adj[b.0], &d);
                }
            }
            Op::Scale(a, alpha) => {
                if self.wants(*a) {
                    add_scaled_into(&mut adj[a.0], g, *alpha);
                }
            }
            Op::MatMul(a, b) | Op::Affine(a, b, _) => {
                let (va, vb) = (self.val(*a), self.val(*b));
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                if self.wants(*a) {
                    // dA = G B^T
                    let dst = adj[a.0].get_or_insert_with(|| vec![0.0; m * k]);
                    gemm(m, n, k, g, false, vb.data(), true, dst, true);
                }
                if self.wants(*b) {
                    // dB = A^T G
                    let dst = adj[b.0].get_or_insert_with(|| vec![0.0; k * n]);
                    gemm(k, m, n, va.data(), true, g, false, dst, true);
                }
                if let Op::Affine(_, _, bias) = node.op {
                    if self.wants(bias) {
                        let mut red = vec![0.0; n];
                        for row in g.chunks(n) {
                            red.iter_mut().zip(row).for_each(|(o, x)| *o += x);
                        }
                        add_into(&mut adj[bias.0], &red);
                    }
                }
            }
            Op::Tanh(a) => {
                if self.wants(*a) {
                    let d: Vec<f64> = g
                        .iter()
                        .zip(node.value.data())
                        .map(|(x, y)| x * (1.0 - y * y))
                        .collect();
                    add_into(&mut adj[a.0], &d);
                }
            }
            Op::Silu(a) | Op::Sin(a) | Op::Cos(a) | Op::Square(a) => {
                if self.wants(*a) {
                    let df: fn(f64) -> f64 = match node.op {
                        Op::Silu(_) => silu_prime,
                        Op::Sin(_) => f64::cos,
                        Op::Cos(_) => |x: f64| -x.sin(),
                        _ => |x: f64| 2.0 * x,
                    };
                    let d: Vec<f64> = g
                        .iter()
                        .zip(self.val(*a).data())
                        .map(|(x, &u)| x * df(u))
                        .collect();
                    add_into(&mut adj[a.0], &d);
                }
            }
            Op::Sum(a) | Op::Mean(a) => {
                if self.wants(*a) {
                    let len = self.val(*a).len();
                    let s = if matches!(node.op, Op::Mean(_)) {
                        g[0] / len as f64
                    } else {
                        g[0]
                    };
                    let dst = adj[a.0].get_or_insert_with(|| vec![0.0; len]);
                    dst.iter_mut().for_each(|o| *o += s);
                }
            }
            Op::Concat { parts, axis } => {
                let cols_total = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let (r, c) = (self.val(p).shape()[0], self.val(p).shape()[1]);
                    if self.wants(p) {
                        let piece: Vec<f64> = if *axis == 0 {
                            g[offset * cols_total..(offset + r) * cols_total].to_vec()
                        } else {
                            (0..r)
                                .flat_map(|i| g[i * cols_total + offset..i * cols_total + offset + c].iter().copied())
                                .collect()
                        };
                        add_into(&mut adj[p.0], &piece);
                    }
                    offset += if *axis == 0 { r } else { c };
                }
            }
            Op::Slice {
                input,
                axis,
                start,
                end,
            } => {
                if self.wants(*input) {
                    let (r, c) = (self.val(*input).shape()[0], self.val(*input).shape()[1]);
                    let dst = adj[input.0].get_or_insert_with(|| vec![0.0; r * c]);
                    if *axis == 0 {
                        dst[start * c..end * c].iter_mut().zip(g).for_each(|(o, x)| *o += x);
                    } else {
                        let w = end - start;
                        for i in 0..r {
                            dst[i * c + start..i * c + end]
                                .iter_mut()
                                .zip(&g[i * w..(i + 1) * w])
                                .for_each(|(o, x)| *o += x);
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if self.wants(*a) {
                    add_into(&mut adj[a.0], g);
                }
            }
            Op::Gather { input, index } => {
                if self.wants(*input) {
                    let len = self.val(*input).len();
                    let dst = adj[input.0].get_or_insert_with(|| vec![0.0; len]);
                    for (&i, x) in index.iter().zip(g) {
                        if i != GATHER_ZERO {
                            dst[i] += x;
                        }
                    }
                }
            }
        }
    }
}
