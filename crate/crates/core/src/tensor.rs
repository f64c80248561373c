//! Dense row-major tensors of rank 0 through 3 and the eager kernels the
//! recorded graph in [`crate::autograd`] is built from.
//!
//! Every kernel checks shapes up front and rejects non-finite output, so a
//! NaN or infinity surfaces as [`Error::NonFinite`] at the operation that
//! produced it instead of propagating silently.

use std::fmt;
use std::iter::Sum;
use std::str::FromStr;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn as_str(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "f32" | "32" => Ok(Precision::F32),
            "f64" | "64" => Ok(Precision::F64),
            other => Err(format!("unknown precision `{other}` (expected f32 or f64)")),
        }
    }
}

/// Scalar element type. Implemented for `f32` (training) and `f64`
/// (gradient checks and reference tests).
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + fmt::Debug
    + fmt::Display
    + Sum
    + Send
    + Sync
    + 'static
{
    const PRECISION: Precision;
    const BYTES: usize;

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("finite literal")
    }
}

impl Real for f32 {
    const PRECISION: Precision = Precision::F32;
    const BYTES: usize = 4;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Real for f64 {
    const PRECISION: Precision = Precision::F64;
    const BYTES: usize = 8;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.len() > 3 {
            return Err(Error::dim("tensor", format!("rank {} > 3", shape.len())));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![T::zero(); n],
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    /// Build a rank-2 tensor from nested rows. Panics on ragged input; meant
    /// for tests and small literals.
    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Tensor {
            shape: vec![rows.len(), cols],
            data: rows.iter().flatten().copied().collect(),
        }
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::lit(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::dim(op, format!("expected rank 2, got shape {:?}", self.shape))),
        }
    }

    pub fn dims3(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [g, r, c] => Ok((g, r, c)),
            _ => Err(Error::dim(op, format!("expected rank 3, got shape {:?}", self.shape))),
        }
    }

    /// Extent of the last axis (1 for a scalar).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn at2(&self, i: usize, j: usize) -> T {
        self.data[i * self.shape[1] + j]
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.last_dim();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.len() > 3 {
            return Err(Error::dim(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or(U::nan()))
                .collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect()
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn norm_sq(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub(crate) fn checked(self, stage: &str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite {
                stage: stage.to_string(),
            })
        }
    }
}

/// Logistic function clamped to the open interval (0, 1) at the current
/// precision, so saturated inputs never round to exactly 0 or 1.
#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    let one = T::one();
    let s = if x >= T::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    };
    let hi = one - T::epsilon() / T::lit(2.0);
    s.max(T::min_positive_value()).min(hi)
}

/// Hyperbolic tangent clamped to the open interval (-1, 1).
#[inline]
pub fn tanh<T: Real>(x: T) -> T {
    let hi = T::one() - T::epsilon() / T::lit(2.0);
    x.tanh().max(-hi).min(hi)
}

fn same_shape<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::dim(
            op,
            format!("shapes {:?} and {:?} differ", a.shape, b.shape),
        ));
    }
    Ok(())
}

/// Pointwise operations selectable by name.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pointwise {
    Sigmoid,
    Tanh,
    Add,
    Mul,
    Sub,
}

impl FromStr for Pointwise {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "sigmoid" => Pointwise::Sigmoid,
            "tanh" => Pointwise::Tanh,
            "add" => Pointwise::Add,
            "mul" => Pointwise::Mul,
            "sub" => Pointwise::Sub,
            other => return Err(Error::Usage(format!("unknown pointwise op `{other}`"))),
        })
    }
}

pub fn elementwise<T: Real>(op: Pointwise, a: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let unary = |f: fn(T) -> T| Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().map(|&v| f(v)).collect(),
    };
    let binary = |f: fn(T, T) -> T| -> Result<Tensor<T>> {
        let b = b.ok_or_else(|| Error::Usage(format!("{op:?} needs two operands")))?;
        same_shape("elementwise", a, b)?;
        Ok(Tensor {
            shape: a.shape.clone(),
            data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
        })
    };
    let out = match op {
        Pointwise::Sigmoid => unary(sigmoid),
        Pointwise::Tanh => unary(tanh),
        Pointwise::Add => binary(|x, y| x + y)?,
        Pointwise::Mul => binary(|x, y| x * y)?,
        Pointwise::Sub => binary(|x, y| x - y)?,
    };
    out.checked("elementwise")
}

/// `out[p,r] = a[p,q] · b[q,r]`, accumulating in i-k-j order.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (p, q) = a.dims2("matmul")?;
    let (q2, r) = b.dims2("matmul")?;
    if q != q2 {
        return Err(Error::dim(
            "matmul",
            format!("inner extents differ: {:?} x {:?}", a.shape, b.shape),
        ));
    }
    let mut out = vec![T::zero(); p * r];
    matmul_into(&a.data, &b.data, &mut out, p, q, r);
    Tensor::new(vec![p, r], out)?.checked("matmul")
}

/// out[p,r] += a[p,q] · b[q,r]
pub(crate) fn matmul_into<T: Real>(a: &[T], b: &[T], out: &mut [T], p: usize, q: usize, r: usize) {
    for i in 0..p {
        let orow = &mut out[i * r..(i + 1) * r];
        for k in 0..q {
            let aik = a[i * q + k];
            if aik == T::zero() {
                continue;
            }
            let brow = &b[k * r..(k + 1) * r];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + aik * bv;
            }
        }
    }
}

/// out[p,r] += a[p,q] · b[r,q]^T
pub(crate) fn matmul_bt_into<T: Real>(a: &[T], b: &[T], out: &mut [T], p: usize, q: usize, r: usize) {
    for i in 0..p {
        let arow = &a[i * q..(i + 1) * q];
        for j in 0..r {
            let brow = &b[j * q..(j + 1) * q];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc = acc + x * y;
            }
            out[i * r + j] = out[i * r + j] + acc;
        }
    }
}

/// out[q,r] += a[p,q]^T · b[p,r]
pub(crate) fn matmul_at_into<T: Real>(a: &[T], b: &[T], out: &mut [T], p: usize, q: usize, r: usize) {
    for i in 0..p {
        let brow = &b[i * r..(i + 1) * r];
        for k in 0..q {
            let aik = a[i * q + k];
            if aik == T::zero() {
                continue;
            }
            let orow = &mut out[k * r..(k + 1) * r];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + aik * bv;
            }
        }
    }
}

/// Softmax over the last axis of a tensor of any rank, with the row maximum
/// subtracted before exponentiation.
pub fn softmax_rows<T: Real>(a: &Tensor<T>) -> Result<Tensor<T>> {
    if !a.is_finite() {
        return Err(Error::NonFinite {
            stage: "softmax_rows input".into(),
        });
    }
    let c = a.last_dim();
    let mut data = a.data.clone();
    if c > 0 {
        for row in data.chunks_mut(c) {
            softmax_in_place(row);
        }
    }
    Tensor::new(a.shape.clone(), data)?.checked("softmax_rows")
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

/// Stack rank-2 parts that share a column extent, in argument order.
pub fn concat_rows<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::dim("concat_rows", "no parts"))?;
    let (_, cols) = first.dims2("concat_rows")?;
    let mut rows = 0;
    let mut data = Vec::new();
    for p in parts {
        let (r, c) = p.dims2("concat_rows")?;
        if c != cols {
            return Err(Error::dim(
                "concat_rows",
                format!("column extents differ: {cols} vs {c} (shape {:?})", p.shape),
            ));
        }
        rows += r;
        data.extend_from_slice(&p.data);
    }
    Tensor::new(vec![rows, cols], data)
}

/// Place rank-2 parts that share a row extent side by side.
pub fn concat_cols<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::dim("concat_cols", "no parts"))?;
    let (rows, _) = first.dims2("concat_cols")?;
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        let (r, c) = p.dims2("concat_cols")?;
        if r != rows {
            return Err(Error::dim(
                "concat_cols",
                format!("row extents differ: {rows} vs {r} (shape {:?})", p.shape),
            ));
        }
        widths.push(c);
    }
    let total: usize = widths.iter().sum();
    let mut data = Vec::with_capacity(rows * total);
    for i in 0..rows {
        for (p, &w) in parts.iter().zip(&widths) {
            data.extend_from_slice(&p.data[i * w..(i + 1) * w]);
        }
    }
    Tensor::new(vec![rows, total], data)
}

/// Add a bias vector `[q]` to every row of `a[p,q]`. This is the only
/// broadcasting form supported anywhere in the crate.
pub fn add_bias_row<T: Real>(a: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, q) = a.dims2("add_bias_row")?;
    if bias.shape != [q] {
        return Err(Error::dim(
            "add_bias_row",
            format!("bias shape {:?} does not match row width {q}", bias.shape),
        ));
    }
    let mut data = a.data.clone();
    for row in data.chunks_mut(q.max(1)) {
        for (v, &b) in row.iter_mut().zip(&bias.data) {
            *v = *v + b;
        }
    }
    Tensor::new(a.shape.clone(), data)?.checked("add_bias_row")
}
