//! Minimal reverse-mode autodiff over dense row-major arrays.
//!
//! A [`Graph`] records every operation of one forward pass as a node on a
//! tape; [`Graph::backward`] walks the tape in reverse and returns
//! [`Gradients`] keyed by parameter. Parameters live in a [`ParamStore`] that
//! the graph borrows, so no weights are copied per pass. Convolutions and
//! matrix products go through im2col + GEMM.
//!
//! The engine is generic over [`Float`], so the same model code runs in `f32`
//! for training and `f64` for finite-difference gradient checks.

mod graph;
pub(crate) mod kernels;
mod params;

pub use graph::{Gradients, Graph, Var};
pub use params::{Init, Param, ParamBuilder, ParamId, ParamStore};

/// Bilinear resize (half-pixel centres) of `planes` stacked `from`-sized planes.
pub fn resize_bilinear<F: Float>(x: &[F], planes: usize, from: (usize, usize), to: (usize, usize)) -> Vec<F> {
    assert_eq!(x.len(), planes * from.0 * from.1, "resize_bilinear: buffer size");
    if from == to {
        return x.to_vec();
    }
    let ty = kernels::AxisTaps::new(from.0, to.0);
    let tx = kernels::AxisTaps::new(from.1, to.1);
    kernels::resize_planes(x, planes, from, &ty, &tx)
}

/// Numerically stable logistic function.
pub fn sigmoid<F: Float>(x: F) -> F {
    kernels::sigmoid(x)
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus<F: Float>(x: F) -> F {
    kernels::softplus(x)
}

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

/// Scalar type the engine can run on.
pub trait Float:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    /// Name used in checkpoint indexes.
    const DTYPE: &'static str;

    /// `c = alpha * a * b + beta * c` on strided row/column-major views.
    ///
    /// # Safety
    /// Every index reachable through the given dimensions and strides must be
    /// inside the corresponding allocation.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn of(x: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(x).expect("representable")
    }

    fn f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Float for f32 {
    const DTYPE: &'static str = "F32";

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Float for f64 {
    const DTYPE: &'static str = "F64";

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}
