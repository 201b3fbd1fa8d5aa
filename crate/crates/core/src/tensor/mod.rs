//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! The substrate is deliberately small: rank-N value storage, a flat tape of
//! operations ([`tape::Tape`]), a parameter store with Adam ([`params`]), a
//! bit-exact checkpoint format ([`checkpoint`]), and finite-difference
//! gradient verification ([`gradcheck`]). Everything runs on a single thread;
//! determinism comes from fixed evaluation and accumulation order, not from
//! locks.
//!
//! Tensors are generic over [`Scalar`] so the same graph code can train in
//! `f32` and be gradient-checked in `f64`.

mod checkpoint;
mod gradcheck;
mod params;
mod tape;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use gradcheck::{grad_check, GradCheckReport};
pub use params::{lr_decay_factor, AdamConfig, Binding, Param, ParamGroup, ParamStore};
pub use tape::{Grads, Tape, Var};

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("invalid reshape from {from:?} to {to:?}")]
    InvalidReshape { from: Vec<usize>, to: Vec<usize> },
    #[error("axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { axis: usize, rank: usize },
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),
    #[error("unknown parameter group {0:?}")]
    UnknownGroup(String),
}

/// Element type shared by the whole tensor stack. Implemented for `f32`
/// (training) and `f64` (gradient checking); self-contained so the math
/// methods never collide with blanket numeric traits.
pub trait Scalar:
    Copy
    + PartialOrd
    + fmt::Debug
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + 'static
{
    /// Byte width used by the checkpoint format.
    const WIDTH: u8;
    fn zero() -> Self;
    fn one() -> Self;
    fn neg_infinity() -> Self;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn abs(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn recip(self) -> Self;
    /// Writes the exact IEEE bit pattern, little-endian.
    fn write_le<W: std::io::Write>(self, w: &mut W) -> std::io::Result<()>;
    fn read_le<R: std::io::Read>(r: &mut R) -> std::io::Result<Self>;
}

macro_rules! impl_scalar {
    ($t:ty, $width:expr) => {
        impl Scalar for $t {
            const WIDTH: u8 = $width;
            fn zero() -> Self {
                0.0
            }
            fn one() -> Self {
                1.0
            }
            fn neg_infinity() -> Self {
                <$t>::NEG_INFINITY
            }
            fn from_f64(x: f64) -> Self {
                x as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn abs(self) -> Self {
                self.abs()
            }
            fn exp(self) -> Self {
                self.exp()
            }
            fn ln(self) -> Self {
                self.ln()
            }
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            fn tanh(self) -> Self {
                self.tanh()
            }
            fn recip(self) -> Self {
                self.recip()
            }
            fn write_le<W: std::io::Write>(self, w: &mut W) -> std::io::Result<()> {
                w.write_all(&self.to_le_bytes())
            }
            fn read_le<R: std::io::Read>(r: &mut R) -> std::io::Result<Self> {
                let mut b = [0u8; $width];
                r.read_exact(&mut b)?;
                Ok(<$t>::from_le_bytes(b))
            }
        }
    };
}

impl_scalar!(f32, 4);
impl_scalar!(f64, 8);

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// Value of a rank-0 tensor.
    pub fn item(&self) -> T {
        assert!(
            self.shape.is_empty() || self.numel() == 1,
            "item() on tensor of shape {:?}",
            self.shape
        );
        self.data[0]
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.data.len(),
            "invalid reshape from {:?} to {:?}",
            self.shape,
            shape
        );
        self.shape = shape.to_vec();
        self
    }

    /// Converts element type, used to run the same model in f32 and f64.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::from_f64(x.to_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// `self += other`, shapes must match.
    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    /// `self += scale * other`, shapes must match.
    pub fn add_scaled(&mut self, other: &Tensor<T>, scale: T) {
        assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + scale * b;
        }
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[T] {
        assert_eq!(self.shape.len(), 2);
        let n = self.shape[1];
        &self.data[i * n..(i + 1) * n]
    }

    /// 2-D transpose, eager copy.
    pub fn transposed(&self) -> Self {
        assert_eq!(self.shape.len(), 2, "transpose requires rank 2");
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor {
            shape: vec![n, m],
            data: out,
        }
    }
}

/// `a @ b` for rank-2 operands, `[m,k] x [k,n] -> [m,n]`.
///
/// Accumulates along `k` in ascending order with the output row contiguous in
/// the inner loop, which both vectorizes and keeps results reproducible.
pub fn matmul_nn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    assert_eq!(a.shape.len(), 2);
    assert_eq!(b.shape.len(), 2);
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let a_row = &a.data[i * k..(i + 1) * k];
        let c_row = &mut out[i * n..(i + 1) * n];
        for (kk, &a_ik) in a_row.iter().enumerate() {
            let b_row = &b.data[kk * n..(kk + 1) * n];
            for (c, &b_kj) in c_row.iter_mut().zip(b_row) {
                *c = *c + a_ik * b_kj;
            }
        }
    }
    Tensor {
        shape: vec![m, n],
        data: out,
    }
}

/// `a @ b^T`, `[m,k] x [n,k] -> [m,n]`. Both operands are traversed row-wise.
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    assert_eq!(a.shape.len(), 2);
    assert_eq!(b.shape.len(), 2);
    let (m, k) = (a.shape[0], a.shape[1]);
    let (n, k2) = (b.shape[0], b.shape[1]);
    assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let a_row = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b.data[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc = acc + x * y;
            }
            out[i * n + j] = acc;
        }
    }
    Tensor {
        shape: vec![m, n],
        data: out,
    }
}

/// `a^T @ b`, `[k,m] x [k,n] -> [m,n]`.
pub fn matmul_tn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    assert_eq!(a.shape.len(), 2);
    assert_eq!(b.shape.len(), 2);
    let (k, m) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
    let mut out = vec![T::zero(); m * n];
    for kk in 0..k {
        let a_row = &a.data[kk * m..(kk + 1) * m];
        let b_row = &b.data[kk * n..(kk + 1) * n];
        for (i, &a_ki) in a_row.iter().enumerate() {
            let c_row = &mut out[i * n..(i + 1) * n];
            for (c, &b_kj) in c_row.iter_mut().zip(b_row) {
                *c = *c + a_ki * b_kj;
            }
        }
    }
    Tensor {
        shape: vec![m, n],
        data: out,
    }
}
