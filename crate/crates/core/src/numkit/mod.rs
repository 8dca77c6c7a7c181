//! Dense tensors, a define-by-run reverse-mode tape and the Adam optimizer.
//!
//! Only the handful of operations the actor, critic and state modules need are
//! provided. Everything is generic over [`Scalar`], which is implemented for
//! `f32` and `f64`.

mod graph;
mod optim;
mod tensor;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub use graph::{Activation, Graph, Var};
pub use optim::{Adam, AdamConfig, Param};
pub use tensor::Tensor;

/// Floating-point element type of every numeric container in the crate.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Default
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64`, used for constants and file payloads.
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable in every Scalar")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }

    /// `c = op(a) * op(b)` where `op(a)` is `m x k` and `op(b)` is `k x n`;
    /// a transposed operand is stored in its untransposed row-major form.
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], a_t: bool, b: &[Self], b_t: bool, c: &mut [Self]);
}

/// Row and column strides of a row-major operand, swapped when transposed.
fn strides(rows: usize, cols: usize, transposed: bool) -> (isize, isize) {
    if transposed {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            fn gemm(m: usize, k: usize, n: usize, a: &[$t], a_t: bool, b: &[$t], b_t: bool, c: &mut [$t]) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                let (rsa, csa) = strides(m, k, a_t);
                let (rsb, csb) = strides(k, n, b_t);
                // SAFETY: the asserts above bound every index the kernel touches
                // for the given dimensions and strides.
                unsafe {
                    $gemm(
                        m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, 0.0,
                        c.as_mut_ptr(), n as isize, 1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Uniform fan-in initialisation in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn fan_in_uniform<T: Scalar, R: rand::Rng + ?Sized>(
    rng: &mut R,
    fan_in: usize,
    fan_out: usize,
) -> Tensor<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| T::of(rng.random_range(-bound..=bound)))
        .collect();
    Tensor::from_vec(vec![fan_in, fan_out], data).expect("sizes agree")
}
