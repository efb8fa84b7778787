//! Minimal differentiable building blocks for the volumetric networks.
//!
//! Everything is generic over [`Scalar`] (f32 for training speed, f64 for
//! finite-difference gradient checks). Feature maps live in [`PaddedBatch`]
//! buffers that carry a one-voxel zero ring so 3x3x3 convolutions reduce to
//! 27 strided GEMM accumulations over one contiguous range — no im2col.
//!
//! Determinism: batch items are processed independently (optionally in
//! parallel) and every cross-item reduction happens sequentially in item
//! order, so results are bit-identical regardless of thread count.

mod adam;
mod attention;
mod batch;
mod conv;
mod linear;
mod ops;
mod spectral;

pub use adam::Adam;
pub use attention::{AttentionTrace, SelfAttention};
pub use batch::PaddedBatch;
pub use conv::{Conv1x1, Conv3x3, SUPPORTED_EXTENTS};
pub use linear::Linear;
pub use ops::{
    avgpool2, avgpool2_backward, global_sum, global_sum_backward, relu, relu_backward, tanh,
    tanh_backward, upsample2, upsample2_backward,
};
pub use spectral::SpectralNorm;

use std::sync::OnceLock;

/// Element type of all tensors: f32 in training, f64 in gradient checks.
pub trait Scalar:
    num_traits::Float + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static
{
    /// Size of the little-endian on-disk encoding.
    const ELEM_BYTES: usize;

    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
    /// Fused multiply-add via the inherent std method (the trait-provided
    /// one can fall back to a soft-float path).
    fn fmadd(self, a: Self, b: Self) -> Self;

    /// c[m x n] += alpha * a[m x k] * b[k x n] + (beta - 1) * c, with
    /// arbitrary element strides. Thin wrapper over `matrixmultiply`.
    ///
    /// # Safety
    /// Every addressed element must lie within the respective slice; callers
    /// are responsible for the stride arithmetic.
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
}

impl Scalar for f32 {
    const ELEM_BYTES: usize = 4;
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
    #[inline(always)]
    fn fmadd(self, a: Self, b: Self) -> Self {
        f32::mul_add(self, a, b)
    }
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

impl Scalar for f64 {
    const ELEM_BYTES: usize = 8;
    fn from_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
    #[inline(always)]
    fn fmadd(self, a: Self, b: Self) -> Self {
        f64::mul_add(self, a, b)
    }
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

/// Bounds-checked strided GEMM over slices. Offsets and strides are in
/// elements; strides must be non-negative.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: (&[T], usize, usize, usize),
    b: (&[T], usize, usize, usize),
    beta: f64,
    c: (&mut [T], usize, usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let (a_buf, a_off, rsa, csa) = a;
    let (b_buf, b_off, rsb, csb) = b;
    let (c_buf, c_off, rsc, csc) = c;
    if k == 0 {
        // GEMM with an empty inner dimension only scales c.
        for i in 0..m {
            for j in 0..n {
                let idx = c_off + i * rsc + j * csc;
                c_buf[idx] = c_buf[idx] * T::from_f64(beta);
            }
        }
        return;
    }
    let a_max = a_off + (m - 1) * rsa + (k - 1) * csa;
    let b_max = b_off + (k - 1) * rsb + (n - 1) * csb;
    let c_max = c_off + (m - 1) * rsc + (n - 1) * csc;
    assert!(a_max < a_buf.len(), "gemm: a out of bounds");
    assert!(b_max < b_buf.len(), "gemm: b out of bounds");
    assert!(c_max < c_buf.len(), "gemm: c out of bounds");
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::from_f64(alpha),
            a_buf.as_ptr().add(a_off),
            rsa as isize,
            csa as isize,
            b_buf.as_ptr().add(b_off),
            rsb as isize,
            csb as isize,
            T::from_f64(beta),
            c_buf.as_mut_ptr().add(c_off),
            rsc as isize,
            csc as isize,
        );
    }
}

static FORCE_SERIAL: OnceLock<bool> = OnceLock::new();

/// True when `TEMPGAN_DETERMINISTIC=1`: all per-item parallelism collapses
/// to sequential loops. Results are identical either way; the switch exists
/// to take scheduling out of the picture entirely.
pub fn serial_mode() -> bool {
    *FORCE_SERIAL.get_or_init(|| {
        std::env::var("TEMPGAN_DETERMINISTIC").map(|v| v == "1").unwrap_or(false)
    })
}

/// Run `f(item, chunk)` over equally sized chunks of `data`, in parallel
/// unless serial mode is forced.
pub fn par_chunks_mut<T: Send, F: Fn(usize, &mut [T]) + Sync>(data: &mut [T], chunk: usize, f: F) {
    debug_assert!(chunk > 0 && data.len() % chunk == 0);
    if serial_mode() || data.len() / chunk <= 1 {
        for (i, c) in data.chunks_mut(chunk).enumerate() {
            f(i, c);
        }
    } else {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
}

/// Run `f(item)` for every item index, in parallel unless serial mode is
/// forced. Use only when `f` writes to disjoint memory per item.
pub fn par_items<F: Fn(usize) + Sync + Send>(n: usize, f: F) {
    if serial_mode() || n <= 1 {
        for i in 0..n {
            f(i);
        }
    } else {
        use rayon::prelude::*;
        (0..n).into_par_iter().for_each(f);
    }
}

/// A trainable tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub value: Vec<T>,
    pub grad: Vec<T>,
    pub shape: Vec<usize>,
}

impl<T: Scalar> Param<T> {
    pub fn new(shape: Vec<usize>, value: Vec<T>) -> Self {
        let len: usize = shape.iter().product();
        assert_eq!(len, value.len(), "param shape/value mismatch");
        Param {
            grad: vec![T::zero(); len],
            value,
            shape,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len: usize = shape.iter().product();
        Param::new(shape, vec![T::zero(); len])
    }

    /// He-style normal init scaled by 1/sqrt(fan_in).
    pub fn he_normal(shape: Vec<usize>, fan_in: usize, rng: &mut crate::rng::Rng) -> Self {
        let len: usize = shape.iter().product();
        let std = (2.0 / fan_in as f64).sqrt();
        let value = (0..len)
            .map(|_| T::from_f64(rng.normal() * std))
            .collect();
        Param::new(shape, value)
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}

/// Visitor callback for named parameters; visit order is the canonical
/// parameter order (optimizer slots and checkpoints rely on it).
pub type ParamVisitor<'a, T> = dyn FnMut(String, &mut Param<T>) + 'a;

/// Visitor callback for non-trainable named buffers (spectral-norm power
/// iteration vectors).
pub type BufferVisitor<'a, T> = dyn FnMut(String, &mut Vec<T>) + 'a;
