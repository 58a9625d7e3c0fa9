//! The recording tape and its primitives.
//!
//! Every complex primitive is treated as a smooth map on the underlying
//! `(re, im)` pairs. Gradients of a real scalar loss `L` are stored as
//! complex numbers `∂L/∂re + i·∂L/∂im`, so for a primitive `y = f(a)` with
//! local linearization `dy = J(da)` the backward rule solves
//! `Re(conj(g_y)·dy) = Re(conj(g_a)·da)` for `g_a`.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::batchnorm::{self, BnMode, BnSaved, BnStats, Whitener};
use crate::error::{AutodiffError, Result};
use crate::linalg;
use crate::tensor::{broadcast_index_map, broadcast_shape, rows_cols, CTensor};
use crate::C64;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Floor applied to vector norms before dividing by them.
pub const NORM_FLOOR: f64 = 1e-12;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

/// Counters for numerically guarded events seen while recording.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Diagnostics {
    /// Inverses that fell back to the ridge-regularized form.
    pub regularized_inverses: usize,
    /// Norm evaluations that hit [`NORM_FLOOR`].
    pub guarded_norms: usize,
    /// Entries clamped by [`Tape::clamp_min_real`].
    pub clamped: usize,
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Neg,
    Conj,
    Scale(C64),
    Re,
    ExpI,
    LeakyRelu(f64),
    CRelu,
    Sigmoid,
    Reciprocal,
    AbsSq,
    Sqrt,
    Ln,
    ClampMin(f64),
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug)]
enum MatMulKind {
    /// `[.., p, q] × [q, r]` with `m` rows in total.
    Shared { m: usize, q: usize, r: usize },
    /// `[B, p, q] × [B, q, r]`.
    Batched {
        batch: usize,
        p: usize,
        q: usize,
        r: usize,
    },
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Unary(usize, Unary),
    Binary {
        a: usize,
        b: usize,
        kind: Binary,
        map_a: Option<Vec<usize>>,
        map_b: Option<Vec<usize>>,
    },
    MatMul {
        a: usize,
        b: usize,
        kind: MatMulKind,
    },
    Hermitian {
        a: usize,
        batch: usize,
        m: usize,
        n: usize,
    },
    Reshape(usize),
    Concat {
        parts: Vec<(usize, usize)>,
        outer: usize,
        inner: usize,
    },
    Narrow {
        a: usize,
        outer: usize,
        len: usize,
        inner: usize,
        start: usize,
        width: usize,
    },
    SoftmaxLast {
        a: usize,
        cols: usize,
    },
    /// Reduction along one axis described as `(outer, len, inner)`.
    L2Norm {
        a: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    SumAxis {
        a: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    SumAll(usize),
    Diagonal {
        a: usize,
        batch: usize,
        n: usize,
    },
    PdInverse {
        a: usize,
        batch: usize,
        n: usize,
        ridges: Vec<f64>,
    },
    BatchNorm {
        x: usize,
        scale: usize,
        shift: usize,
        rows: usize,
        features: usize,
        saved: Box<BnSaved>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Unary(a, _)
            | Op::Hermitian { a, .. }
            | Op::Reshape(a)
            | Op::SoftmaxLast { a, .. }
            | Op::Narrow { a, .. }
            | Op::L2Norm { a, .. }
            | Op::SumAxis { a, .. }
            | Op::SumAll(a)
            | Op::Diagonal { a, .. }
            | Op::PdInverse { a, .. } => vec![*a],
            Op::Binary { a, b, .. } | Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Concat { parts, .. } => parts.iter().map(|p| p.0).collect(),
            Op::BatchNorm {
                x, scale, shift, ..
            } => vec![*x, *scale, *shift],
        }
    }
}

struct Node {
    value: CTensor,
    op: Op,
    requires_grad: bool,
}

/// Running statistics consumed by evaluation-mode batch normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct BnRunning<'a> {
    pub mean: &'a [C64],
    pub cov: &'a [[f64; 3]],
}

/// A single-owner record of primitive applications.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    diagnostics: Diagnostics,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            diagnostics: Diagnostics::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn diagnostics(&self) -> &Diagnostics {
        &self.diagnostics
    }

    /// A leaf whose gradient is reported by [`Tape::backward`].
    pub fn leaf(&mut self, value: CTensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: CTensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &CTensor {
        assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.index].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id {
            return Err(AutodiffError::ForeignVar);
        }
        Ok(v.index)
    }

    fn push_raw(&mut self, value: CTensor, op: Op, requires_grad: bool) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index,
        }
    }

    fn push(&mut self, value: CTensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|&i| self.nodes[i].requires_grad);
        self.push_raw(value, op, requires_grad)
    }

    fn val(&self, i: usize) -> &CTensor {
        &self.nodes[i].value
    }

    // ----- elementwise -------------------------------------------------

    fn unary(&mut self, a: Var, kind: Unary) -> Result<Var> {
        let ai = self.check(a)?;
        let input = self.val(ai);
        let mut clamped = 0;
        let out = input.map(|z| match kind {
            Unary::Neg => -z,
            Unary::Conj => z.conj(),
            Unary::Scale(s) => s * z,
            Unary::Re => C64::new(z.re, 0.0),
            Unary::ExpI => C64::new(z.re.cos(), z.re.sin()),
            Unary::LeakyRelu(slope) => C64::new(if z.re > 0.0 { z.re } else { slope * z.re }, 0.0),
            Unary::CRelu => C64::new(z.re.max(0.0), z.im.max(0.0)),
            Unary::Sigmoid => C64::new(sigmoid(z.re), 0.0),
            Unary::Reciprocal => z.inv(),
            Unary::AbsSq => C64::new(z.norm_sqr(), 0.0),
            Unary::Sqrt => C64::new(z.re.max(0.0).sqrt(), 0.0),
            Unary::Ln => C64::new(z.re.ln(), 0.0),
            Unary::ClampMin(lo) => C64::new(z.re.max(lo), 0.0),
        });
        if let Unary::ClampMin(lo) = kind {
            clamped = input.data().iter().filter(|z| z.re < lo).count();
        }
        self.diagnostics.clamped += clamped;
        Ok(self.push(out, Op::Unary(ai, kind)))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Neg)
    }

    pub fn conj(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Conj)
    }

    /// Multiplication by a complex constant.
    pub fn scale(&mut self, a: Var, s: C64) -> Result<Var> {
        self.unary(a, Unary::Scale(s))
    }

    pub fn scale_real(&mut self, a: Var, s: f64) -> Result<Var> {
        self.unary(a, Unary::Scale(C64::new(s, 0.0)))
    }

    /// Real part, as a real tensor.
    pub fn re(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Re)
    }

    /// `e^{i·Re(φ)}`.
    pub fn exp_i(&mut self, phi: Var) -> Result<Var> {
        self.unary(phi, Unary::ExpI)
    }

    pub fn leaky_relu_real(&mut self, a: Var, slope: f64) -> Result<Var> {
        self.unary(a, Unary::LeakyRelu(slope))
    }

    /// ReLU applied to the real and imaginary parts independently.
    pub fn crelu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::CRelu)
    }

    pub fn sigmoid_real(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn reciprocal(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Reciprocal)
    }

    /// `|a|²` as a real tensor.
    pub fn abs_sq(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::AbsSq)
    }

    pub fn sqrt_real(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Sqrt)
    }

    pub fn ln_real(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Ln)
    }

    /// `max(Re(a), lo)`; entries below `lo` are counted in the diagnostics.
    pub fn clamp_min_real(&mut self, a: Var, lo: f64) -> Result<Var> {
        self.unary(a, Unary::ClampMin(lo))
    }

    fn binary(&mut self, a: Var, b: Var, kind: Binary) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (self.val(ai).shape(), self.val(bi).shape());
        let out_shape = broadcast_shape(sa, sb)?;
        let map_a = (sa != out_shape.as_slice()).then(|| broadcast_index_map(sa, &out_shape));
        let map_b = (sb != out_shape.as_slice()).then(|| broadcast_index_map(sb, &out_shape));
        let (da, db) = (self.val(ai).data(), self.val(bi).data());
        let total: usize = out_shape.iter().product();
        let mut data = Vec::with_capacity(total);
        for i in 0..total {
            let x = da[map_a.as_ref().map_or(i, |m| m[i])];
            let y = db[map_b.as_ref().map_or(i, |m| m[i])];
            data.push(match kind {
                Binary::Add => x + y,
                Binary::Sub => x - y,
                Binary::Mul => x * y,
            });
        }
        let out = CTensor::new(out_shape, data)?;
        Ok(self.push(
            out,
            Op::Binary {
                a: ai,
                b: bi,
                kind,
                map_a,
                map_b,
            },
        ))
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub)
    }

    /// Elementwise complex product with broadcasting.
    pub fn cmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }

    /// Elementwise quotient `a / b`.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let inv = self.reciprocal(b)?;
        self.cmul(a, inv)
    }

    // ----- structural ----------------------------------------------------

    /// Matrix product. `b` either 2-D (shared across every leading index of
    /// `a`) or 3-D with the same batch size as a 3-D `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (self.val(ai).shape().to_vec(), self.val(bi).shape().to_vec());
        if sa.is_empty() {
            return Err(AutodiffError::Shape("matmul of a scalar".into()));
        }
        let q = *sa.last().unwrap();
        match sb.len() {
            2 => {
                if sb[0] != q {
                    return Err(AutodiffError::Shape(format!(
                        "matmul inner dims differ: {sa:?} × {sb:?}"
                    )));
                }
                let r = sb[1];
                let m: usize = sa[..sa.len() - 1].iter().product();
                let data = linalg::matmul(self.val(ai).data(), self.val(bi).data(), m, q, r);
                let mut shape = sa.clone();
                *shape.last_mut().unwrap() = r;
                let out = CTensor::new(shape, data)?;
                Ok(self.push(
                    out,
                    Op::MatMul {
                        a: ai,
                        b: bi,
                        kind: MatMulKind::Shared { m, q, r },
                    },
                ))
            }
            3 if sa.len() == 3 && sa[0] == sb[0] && sb[1] == q => {
                let (batch, p, r) = (sa[0], sa[1], sb[2]);
                let (da, db) = (self.val(ai).data(), self.val(bi).data());
                let mut data = vec![C64::new(0.0, 0.0); batch * p * r];
                for bt in 0..batch {
                    linalg::matmul_acc(
                        &da[bt * p * q..(bt + 1) * p * q],
                        &db[bt * q * r..(bt + 1) * q * r],
                        p,
                        q,
                        r,
                        &mut data[bt * p * r..(bt + 1) * p * r],
                    );
                }
                let out = CTensor::new(vec![batch, p, r], data)?;
                Ok(self.push(
                    out,
                    Op::MatMul {
                        a: ai,
                        b: bi,
                        kind: MatMulKind::Batched { batch, p, q, r },
                    },
                ))
            }
            _ => Err(AutodiffError::Shape(format!(
                "unsupported matmul shapes {sa:?} × {sb:?}"
            ))),
        }
    }

    /// Conjugate transpose of the last two axes.
    pub fn hermitian(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let shape = self.val(ai).shape().to_vec();
        if shape.len() < 2 {
            return Err(AutodiffError::Shape(format!(
                "hermitian needs at least 2 axes, got {shape:?}"
            )));
        }
        let (m, n) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let batch = self.val(ai).len() / (m * n).max(1);
        let src = self.val(ai).data();
        let mut data = Vec::with_capacity(src.len());
        for bt in 0..batch {
            data.extend(linalg::hermitian(&src[bt * m * n..(bt + 1) * m * n], m, n));
        }
        let mut out_shape = shape;
        let len = out_shape.len();
        out_shape.swap(len - 2, len - 1);
        let out = CTensor::new(out_shape, data)?;
        Ok(self.push(out, Op::Hermitian { a: ai, batch, m, n }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ai = self.check(a)?;
        let out = self.val(ai).reshaped(shape)?;
        Ok(self.push(out, Op::Reshape(ai)))
    }

    /// Concatenation along `axis`; all other axes must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| AutodiffError::Shape("concat of nothing".into()))?;
        let base = self.val(self.check(first)?).shape().to_vec();
        if axis >= base.len() {
            return Err(AutodiffError::Shape(format!(
                "concat axis {axis} out of range for {base:?}"
            )));
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut indexed = Vec::with_capacity(parts.len());
        let mut total_len = 0;
        for &p in parts {
            let pi = self.check(p)?;
            let s = self.val(pi).shape();
            if s.len() != base.len()
                || s[..axis] != base[..axis]
                || s[axis + 1..] != base[axis + 1..]
            {
                return Err(AutodiffError::Shape(format!(
                    "concat shape {s:?} incompatible with {base:?} on axis {axis}"
                )));
            }
            indexed.push((pi, s[axis]));
            total_len += s[axis];
        }
        let mut data = Vec::with_capacity(outer * total_len * inner);
        for o in 0..outer {
            for &(pi, len) in &indexed {
                let chunk = len * inner;
                data.extend_from_slice(&self.val(pi).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total_len;
        let out = CTensor::new(shape, data)?;
        Ok(self.push(
            out,
            Op::Concat {
                parts: indexed,
                outer,
                inner,
            },
        ))
    }

    /// Entries `start..start + width` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, width: usize) -> Result<Var> {
        let ai = self.check(a)?;
        let shape = self.val(ai).shape().to_vec();
        let (outer, len, inner) = Self::axis_split(&shape, axis)?;
        if start + width > len {
            return Err(AutodiffError::Shape(format!(
                "narrow {start}..{} exceeds axis {axis} of {shape:?}",
                start + width
            )));
        }
        let src = self.val(ai).data();
        let mut data = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let base = (o * len + start) * inner;
            data.extend_from_slice(&src[base..base + width * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = width;
        let out = CTensor::new(out_shape, data)?;
        Ok(self.push(
            out,
            Op::Narrow {
                a: ai,
                outer,
                len,
                inner,
                start,
                width,
            },
        ))
    }

    /// Diagonal of the last two (square) axes.
    pub fn diagonal(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let shape = self.val(ai).shape().to_vec();
        let len = shape.len();
        if len < 2 || shape[len - 1] != shape[len - 2] {
            return Err(AutodiffError::Shape(format!(
                "diagonal needs square trailing axes, got {shape:?}"
            )));
        }
        let n = shape[len - 1];
        let batch = self.val(ai).len() / (n * n).max(1);
        let src = self.val(ai).data();
        let data = (0..batch)
            .flat_map(|b| (0..n).map(move |i| b * n * n + i * n + i))
            .map(|i| src[i])
            .collect();
        let out = CTensor::new(shape[..len - 1].to_vec(), data)?;
        Ok(self.push(out, Op::Diagonal { a: ai, batch, n }))
    }

    // ----- reductions ------------------------------------------------------

    fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
        if axis >= shape.len() {
            return Err(AutodiffError::Shape(format!(
                "axis {axis} out of range for {shape:?}"
            )));
        }
        Ok((
            shape[..axis].iter().product(),
            shape[axis],
            shape[axis + 1..].iter().product(),
        ))
    }

    /// Sum along `axis`, keeping it with size 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ai = self.check(a)?;
        let shape = self.val(ai).shape().to_vec();
        let (outer, len, inner) = Self::axis_split(&shape, axis)?;
        let src = self.val(ai).data();
        let mut data = vec![C64::new(0.0, 0.0); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    data[o * inner + i] += src[(o * len + l) * inner + i];
                }
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = 1;
        let out = CTensor::new(out_shape, data)?;
        Ok(self.push(
            out,
            Op::SumAxis {
                a: ai,
                outer,
                len,
                inner,
            },
        ))
    }

    /// Euclidean norm along `axis` (kept with size 1). The backward pass
    /// divides by `max(‖a‖, NORM_FLOOR)`, so the gradient at the zero vector
    /// is zero; callers dividing by the norm clamp it themselves.
    pub fn l2_norm(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ai = self.check(a)?;
        let shape = self.val(ai).shape().to_vec();
        let (outer, len, inner) = Self::axis_split(&shape, axis)?;
        let src = self.val(ai).data();
        let mut data = vec![C64::new(0.0, 0.0); outer * inner];
        let mut guarded = 0;
        for o in 0..outer {
            for i in 0..inner {
                let s: f64 = (0..len)
                    .map(|l| src[(o * len + l) * inner + i].norm_sqr())
                    .sum();
                let n = s.sqrt();
                if n < NORM_FLOOR {
                    guarded += 1;
                }
                data[o * inner + i] = C64::new(n, 0.0);
            }
        }
        self.diagnostics.guarded_norms += guarded;
        let mut out_shape = shape;
        out_shape[axis] = 1;
        let out = CTensor::new(out_shape, data)?;
        Ok(self.push(
            out,
            Op::L2Norm {
                a: ai,
                outer,
                len,
                inner,
            },
        ))
    }

    /// Sum of every entry, as a scalar.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let s: C64 = self.val(ai).data().iter().sum();
        Ok(self.push(CTensor::scalar(s), Op::SumAll(ai)))
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        let s = self.sum_all(a)?;
        self.scale_real(s, 1.0 / n as f64)
    }

    /// Softmax over the last axis of the real parts.
    pub fn softmax_real(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let (rows, cols) = rows_cols(self.val(ai).shape());
        let src = self.val(ai).data();
        let mut data = Vec::with_capacity(src.len());
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let max = row.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|z| (z.re - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            data.extend(exps.iter().map(|e| C64::new(e / total, 0.0)));
        }
        let out = CTensor::new(self.val(ai).shape().to_vec(), data)?;
        Ok(self.push(out, Op::SoftmaxLast { a: ai, cols }))
    }

    // ----- linear algebra ----------------------------------------------------

    /// Inverse of each Hermitian positive-definite matrix in the trailing two
    /// axes. Ill-conditioned inputs (1-norm condition estimate above 1e12)
    /// are inverted as `(A + εI)` with `ε = 1e-9·tr(A)/n` and counted in the
    /// diagnostics.
    pub fn hermitian_pd_inverse(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let shape = self.val(ai).shape().to_vec();
        let len = shape.len();
        if len < 2 || shape[len - 1] != shape[len - 2] {
            return Err(AutodiffError::Shape(format!(
                "inverse needs square trailing axes, got {shape:?}"
            )));
        }
        let n = shape[len - 1];
        let batch = self.val(ai).len() / (n * n).max(1);
        let src = self.val(ai).data();
        let mut data = Vec::with_capacity(src.len());
        let mut ridges = Vec::with_capacity(batch);
        for bt in 0..batch {
            let block = &src[bt * n * n..(bt + 1) * n * n];
            let scale = block.iter().map(|z| z.norm()).fold(1.0, f64::max);
            let asym = linalg::hermitian_asymmetry(block, n);
            if asym > 1e-10 * scale {
                return Err(AutodiffError::NotHermitian(asym));
            }
            let inv = linalg::hermitian_pd_inverse(block, n);
            ridges.push(inv.ridge);
            data.extend(inv.inverse);
        }
        self.diagnostics.regularized_inverses += ridges.iter().filter(|&&r| r > 0.0).count();
        let out = CTensor::new(shape, data)?;
        Ok(self.push(
            out,
            Op::PdInverse {
                a: ai,
                batch,
                n,
                ridges,
            },
        ))
    }

    /// Complex batch normalization over every leading row of `x`
    /// (`[.., H]`), with `scale` of shape `[2, H]` and `shift` of shape `[H]`.
    ///
    /// With `running = None` batch statistics are used (training mode) and
    /// returned so the caller can update its running estimates. Otherwise
    /// the supplied running statistics are used and `None` is returned.
    pub fn batch_norm(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        mode: BnMode,
        eps: f64,
        running: Option<BnRunning<'_>>,
    ) -> Result<(Var, Option<BnStats>)> {
        let (xi, si, bi) = (self.check(x)?, self.check(scale)?, self.check(shift)?);
        let (rows, features) = rows_cols(self.val(xi).shape());
        if self.val(si).shape() != [2, features] || self.val(bi).shape() != [features] {
            return Err(AutodiffError::Shape(format!(
                "batch norm params {:?}/{:?} do not fit {features} features",
                self.val(si).shape(),
                self.val(bi).shape()
            )));
        }
        let training = running.is_none();
        let (mean, cov, stats) = match running {
            None => {
                if rows < 2 {
                    return Err(AutodiffError::BatchTooSmall(rows));
                }
                let stats = BnStats::compute(self.val(xi).data(), rows, features);
                (stats.mean.clone(), stats.cov.clone(), Some(stats))
            }
            Some(r) => {
                if r.mean.len() != features || r.cov.len() != features {
                    return Err(AutodiffError::Shape(
                        "running statistics width mismatch".into(),
                    ));
                }
                (r.mean.to_vec(), r.cov.to_vec(), None)
            }
        };
        let whiteners: Vec<Whitener> = cov.iter().map(|&c| Whitener::new(c, eps, mode)).collect();
        let (data, saved) = batchnorm::forward(
            self.val(xi).data(),
            rows,
            features,
            self.val(si).data(),
            self.val(bi).data(),
            mean,
            whiteners,
            training,
        );
        let out = CTensor::new(self.val(xi).shape().to_vec(), data)?;
        let var = self.push(
            out,
            Op::BatchNorm {
                x: xi,
                scale: si,
                shift: bi,
                rows,
                features,
                saved: Box::new(saved),
            },
        );
        Ok((var, stats))
    }

    // ----- reverse pass ------------------------------------------------------

    /// Gradients of a real scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let li = self.check(loss)?;
        let lv = self.val(li);
        if lv.len() != 1 {
            return Err(AutodiffError::InvalidLoss(format!(
                "shape {:?} is not scalar",
                lv.shape()
            )));
        }
        if lv.data()[0].im != 0.0 {
            return Err(AutodiffError::InvalidLoss(format!(
                "imaginary part {}",
                lv.data()[0].im
            )));
        }
        let mut grads: Vec<Option<CTensor>> = vec![None; self.nodes.len()];
        grads[li] = Some(CTensor::filled(lv.shape(), C64::new(1.0, 0.0)));
        for idx in (0..=li).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if self.nodes[idx].requires_grad {
                self.propagate(idx, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }

    fn propagate(&self, idx: usize, g: &CTensor, grads: &mut [Option<CTensor>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        let wants = |i: usize| self.nodes[i].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Unary(a, kind) => {
                if !wants(*a) {
                    return;
                }
                let x = self.val(*a);
                let data: Vec<C64> = x
                    .data()
                    .iter()
                    .zip(y.data())
                    .zip(g.data())
                    .map(|((&x, &y), &g)| unary_grad(*kind, x, y, g))
                    .collect();
                accumulate(grads, *a, CTensor::new(x.shape().to_vec(), data).unwrap());
            }
            Op::Binary {
                a,
                b,
                kind,
                map_a,
                map_b,
            } => {
                let (xa, xb) = (self.val(*a), self.val(*b));
                let ia = |i: usize| map_a.as_ref().map_or(i, |m| m[i]);
                let ib = |i: usize| map_b.as_ref().map_or(i, |m| m[i]);
                if wants(*a) {
                    let mut ga = CTensor::zeros(xa.shape());
                    let d = ga.data_mut();
                    for (i, &gi) in g.data().iter().enumerate() {
                        d[ia(i)] += match kind {
                            Binary::Add | Binary::Sub => gi,
                            Binary::Mul => xb.data()[ib(i)].conj() * gi,
                        };
                    }
                    accumulate(grads, *a, ga);
                }
                if wants(*b) {
                    let mut gb = CTensor::zeros(xb.shape());
                    let d = gb.data_mut();
                    for (i, &gi) in g.data().iter().enumerate() {
                        d[ib(i)] += match kind {
                            Binary::Add => gi,
                            Binary::Sub => -gi,
                            Binary::Mul => xa.data()[ia(i)].conj() * gi,
                        };
                    }
                    accumulate(grads, *b, gb);
                }
            }
            Op::MatMul { a, b, kind } => {
                let (xa, xb) = (self.val(*a), self.val(*b));
                match *kind {
                    MatMulKind::Shared { m, q, r } => {
                        if wants(*a) {
                            let mut ga = CTensor::zeros(xa.shape());
                            linalg::matmul_a_bh_acc(g.data(), xb.data(), m, r, q, ga.data_mut());
                            accumulate(grads, *a, ga);
                        }
                        if wants(*b) {
                            let mut gb = CTensor::zeros(xb.shape());
                            linalg::matmul_ah_b_acc(xa.data(), g.data(), m, q, r, gb.data_mut());
                            accumulate(grads, *b, gb);
                        }
                    }
                    MatMulKind::Batched { batch, p, q, r } => {
                        if wants(*a) {
                            let mut ga = CTensor::zeros(xa.shape());
                            let d = ga.data_mut();
                            for bt in 0..batch {
                                linalg::matmul_a_bh_acc(
                                    &g.data()[bt * p * r..(bt + 1) * p * r],
                                    &xb.data()[bt * q * r..(bt + 1) * q * r],
                                    p,
                                    r,
                                    q,
                                    &mut d[bt * p * q..(bt + 1) * p * q],
                                );
                            }
                            accumulate(grads, *a, ga);
                        }
                        if wants(*b) {
                            let mut gb = CTensor::zeros(xb.shape());
                            let d = gb.data_mut();
                            for bt in 0..batch {
                                linalg::matmul_ah_b_acc(
                                    &xa.data()[bt * p * q..(bt + 1) * p * q],
                                    &g.data()[bt * p * r..(bt + 1) * p * r],
                                    p,
                                    q,
                                    r,
                                    &mut d[bt * q * r..(bt + 1) * q * r],
                                );
                            }
                            accumulate(grads, *b, gb);
                        }
                    }
                }
            }
            Op::Hermitian { a, batch, m, n } => {
                if !wants(*a) {
                    return;
                }
                // y = A^H, so g_A = (g_y)^H
                let mut data = Vec::with_capacity(g.len());
                for bt in 0..*batch {
                    data.extend(linalg::hermitian(
                        &g.data()[bt * m * n..(bt + 1) * m * n],
                        *n,
                        *m,
                    ));
                }
                let shape = self.val(*a).shape().to_vec();
                accumulate(grads, *a, CTensor::new(shape, data).unwrap());
            }
            Op::Reshape(a) => {
                if wants(*a) {
                    let shape = self.val(*a).shape().to_vec();
                    accumulate(grads, *a, g.reshaped(&shape).unwrap());
                }
            }
            Op::Concat {
                parts,
                outer,
                inner,
            } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let mut offset = 0;
                for &(pi, len) in parts {
                    if wants(pi) {
                        let mut data = Vec::with_capacity(outer * len * inner);
                        for o in 0..*outer {
                            let start = (o * total + offset) * inner;
                            data.extend_from_slice(&g.data()[start..start + len * inner]);
                        }
                        let shape = self.val(pi).shape().to_vec();
                        accumulate(grads, pi, CTensor::new(shape, data).unwrap());
                    }
                    offset += len;
                }
            }
            Op::Narrow {
                a,
                outer,
                len,
                inner,
                start,
                width,
            } => {
                if !wants(*a) {
                    return;
                }
                let shape = self.val(*a).shape().to_vec();
                let mut ga = CTensor::zeros(&shape);
                let d = ga.data_mut();
                for o in 0..*outer {
                    let dst = (o * len + start) * inner;
                    let src = o * width * inner;
                    d[dst..dst + width * inner]
                        .copy_from_slice(&g.data()[src..src + width * inner]);
                }
                accumulate(grads, *a, ga);
            }
            Op::SoftmaxLast { a, cols } => {
                if !wants(*a) {
                    return;
                }
                let cols = *cols;
                let rows = y.len() / cols.max(1);
                let mut data = Vec::with_capacity(y.len());
                for r in 0..rows {
                    let yr = &y.data()[r * cols..(r + 1) * cols];
                    let gr = &g.data()[r * cols..(r + 1) * cols];
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y.re * g.re).sum();
                    data.extend(
                        yr.iter()
                            .zip(gr)
                            .map(|(y, g)| C64::new(y.re * (g.re - dot), 0.0)),
                    );
                }
                let shape = self.val(*a).shape().to_vec();
                accumulate(grads, *a, CTensor::new(shape, data).unwrap());
            }
            Op::L2Norm {
                a,
                outer,
                len,
                inner,
            } => {
                if !wants(*a) {
                    return;
                }
                let x = self.val(*a);
                let mut ga = CTensor::zeros(x.shape());
                let d = ga.data_mut();
                for o in 0..*outer {
                    for i in 0..*inner {
                        let n = y.data()[o * inner + i].re.max(NORM_FLOOR);
                        let gn = g.data()[o * inner + i].re;
                        for l in 0..*len {
                            let k = (o * len + l) * inner + i;
                            d[k] = x.data()[k] * (gn / n);
                        }
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::SumAxis {
                a,
                outer,
                len,
                inner,
            } => {
                if !wants(*a) {
                    return;
                }
                let shape = self.val(*a).shape().to_vec();
                let mut ga = CTensor::zeros(&shape);
                let d = ga.data_mut();
                for o in 0..*outer {
                    for l in 0..*len {
                        for i in 0..*inner {
                            d[(o * len + l) * inner + i] = g.data()[o * inner + i];
                        }
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::SumAll(a) => {
                if wants(*a) {
                    let shape = self.val(*a).shape().to_vec();
                    accumulate(grads, *a, CTensor::filled(&shape, g.data()[0]));
                }
            }
            Op::Diagonal { a, batch, n } => {
                if !wants(*a) {
                    return;
                }
                let shape = self.val(*a).shape().to_vec();
                let mut ga = CTensor::zeros(&shape);
                let d = ga.data_mut();
                for bt in 0..*batch {
                    for i in 0..*n {
                        d[bt * n * n + i * n + i] = g.data()[bt * n + i];
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::PdInverse {
                a,
                batch,
                n,
                ridges,
            } => {
                if !wants(*a) {
                    return;
                }
                let n = *n;
                let shape = self.val(*a).shape().to_vec();
                let mut ga = CTensor::zeros(&shape);
                let d = ga.data_mut();
                for (bt, &ridge) in ridges.iter().enumerate().take(*batch) {
                    let r = bt * n * n..(bt + 1) * n * n;
                    let yh = linalg::hermitian(&y.data()[r.clone()], n, n);
                    let tmp = linalg::matmul(&yh, &g.data()[r.clone()], n, n, n);
                    let block = linalg::matmul(&tmp, &yh, n, n, n);
                    let trace_re: f64 = (0..n).map(|i| -block[i * n + i].re).sum();
                    for (k, v) in block.iter().enumerate() {
                        d[r.start + k] = -v;
                    }
                    if ridge > 0.0 {
                        let extra = trace_re * linalg::RIDGE_SCALE / n as f64;
                        for i in 0..n {
                            d[r.start + i * n + i] += C64::new(extra, 0.0);
                        }
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::BatchNorm {
                x,
                scale,
                shift,
                rows,
                features,
                saved,
            } => {
                let (gx, gs, gb) = batchnorm::backward(
                    saved,
                    self.val(*x).data(),
                    *rows,
                    *features,
                    self.val(*scale).data(),
                    g.data(),
                );
                if wants(*x) {
                    let shape = self.val(*x).shape().to_vec();
                    accumulate(grads, *x, CTensor::new(shape, gx).unwrap());
                }
                if wants(*scale) {
                    accumulate(grads, *scale, CTensor::new(vec![2, *features], gs).unwrap());
                }
                if wants(*shift) {
                    accumulate(grads, *shift, CTensor::new(vec![*features], gb).unwrap());
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<CTensor>], i: usize, g: CTensor) {
    match &mut grads[i] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

/// Logistic function, evaluated without overflow for either sign.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn unary_grad(kind: Unary, x: C64, y: C64, g: C64) -> C64 {
    let real = |v: f64| C64::new(v, 0.0);
    match kind {
        Unary::Neg => -g,
        Unary::Conj => g.conj(),
        Unary::Scale(s) => s.conj() * g,
        Unary::Re => real(g.re),
        // d/dφ e^{iφ} = i·y
        Unary::ExpI => real(-g.re * y.im + g.im * y.re),
        Unary::LeakyRelu(slope) => real(if x.re > 0.0 { g.re } else { slope * g.re }),
        Unary::CRelu => C64::new(
            if x.re > 0.0 { g.re } else { 0.0 },
            if x.im > 0.0 { g.im } else { 0.0 },
        ),
        Unary::Sigmoid => real(g.re * y.re * (1.0 - y.re)),
        Unary::Reciprocal => (-(y * y)).conj() * g,
        Unary::AbsSq => x * (2.0 * g.re),
        Unary::Sqrt => real(if y.re > 0.0 { g.re / (2.0 * y.re) } else { 0.0 }),
        Unary::Ln => real(g.re / x.re),
        Unary::ClampMin(lo) => real(if x.re >= lo { g.re } else { 0.0 }),
    }
}

/// Gradients produced by [`Tape::backward`].
#[derive(Clone, Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<CTensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; zeros when the loss does not depend on it.
    pub fn get(&self, v: Var) -> CTensor {
        assert_eq!(v.tape, self.tape, "variable from another tape");
        self.grads[v.index]
            .clone()
            .unwrap_or_else(|| CTensor::zeros(&self.shapes[v.index]))
    }
}
