//! 3D convolutions on padded batches.
//!
//! The 3x3x3 same-padding convolution uses direct register-tiled kernels:
//! output rows are accumulated across all 27 taps and input channels in
//! one pass, with the x axis as the vector lane (input rows are contiguous
//! thanks to the pad ring, including the +-1 shifts). Each batch item runs
//! independently; weight-gradient partials are reduced in item order.

use super::{gemm, par_chunks_mut, Param, ParamVisitor, Scalar, SpectralNorm};
use super::batch::PaddedBatch;
use crate::rng::Rng;

/// Spatial x extents the conv kernels are monomorphized for.
pub const SUPPORTED_EXTENTS: [usize; 15] = [1, 2, 3, 4, 5, 6, 8, 12, 16, 24, 32, 48, 64, 96, 128];

/// Output-channel tile of the direct kernels.
const CO_TILE: usize = 4;
/// Upper bound on the x extent (vector accumulator width).
const MAX_W: usize = 128;
/// Fixed inner-block width; loops over a constant trip count are what the
/// auto-vectorizer actually turns into packed FMA.
const LANES: usize = 16;

/// One stencil element: w[0]*x0 + w[1]*x1 + w[2]*x2 + a, fused.
#[inline(always)]
fn fused3<T: Scalar>(x0: T, x1: T, x2: T, w: &[T; 3], a: T) -> T {
    w[0].fmadd(x0, w[1].fmadd(x1, w[2].fmadd(x2, a)))
}

/// y[co, z, y, :] = bias + sum over (ci, taps) of w * shifted x rows.
///
/// The x axis is the vector lane: the three kx taps fuse into one pass per
/// input row, and a fixed 4-wide output-channel tile keeps 12 fused
/// multiply-adds per element in flight.
#[allow(clippy::too_many_arguments)]
#[inline(never)]
fn conv3x3_fwd_item<T: Scalar, const W: usize>(
    x: &[T],
    y: &mut [T],
    w: &[T],
    bias: &[T],
    cin: usize,
    cout: usize,
    d: usize,
    h: usize,
) {
    let wd = W;
    let (hp, wp) = (h + 2, wd + 2);
    let cs = (d + 2) * hp * wp;
    let mut acc = [[T::zero(); MAX_W]; CO_TILE];
    for co0 in (0..cout).step_by(CO_TILE) {
        let nt = CO_TILE.min(cout - co0);
        for z in 0..d {
            for yy in 0..h {
                let [a0, a1, a2, a3] = &mut acc;
                for a in [&mut *a0, &mut *a1, &mut *a2, &mut *a3] {
                    a[..wd].iter_mut().for_each(|v| *v = T::zero());
                }
                for ci in 0..cin {
                    let xc = &x[ci * cs..(ci + 1) * cs];
                    for kz in 0..3 {
                        for ky in 0..3 {
                            let row = &xc[((z + kz) * hp + (yy + ky)) * wp..][..wp];
                            // Weight triple (kx = 0, 1, 2) per tile lane;
                            // lanes beyond the tile use zero weights.
                            let wt = |t: usize| -> [T; 3] {
                                if t < nt {
                                    let base = ((co0 + t) * cin + ci) * 27 + (kz * 3 + ky) * 3;
                                    [w[base], w[base + 1], w[base + 2]]
                                } else {
                                    [T::zero(); 3]
                                }
                            };
                            let [w0, w1, w2, w3] = [wt(0), wt(1), wt(2), wt(3)];
                            let full = wd / LANES * LANES;
                            let mut i0 = 0;
                            while i0 < full {
                                for l in 0..LANES {
                                    let i = i0 + l;
                                    let (x0, x1, x2) = (row[i], row[i + 1], row[i + 2]);
                                    a0[i] = fused3(x0, x1, x2, &w0, a0[i]);
                                    a1[i] = fused3(x0, x1, x2, &w1, a1[i]);
                                    a2[i] = fused3(x0, x1, x2, &w2, a2[i]);
                                    a3[i] = fused3(x0, x1, x2, &w3, a3[i]);
                                }
                                i0 += LANES;
                            }
                            for i in full..wd {
                                let (x0, x1, x2) = (row[i], row[i + 1], row[i + 2]);
                                a0[i] = fused3(x0, x1, x2, &w0, a0[i]);
                                a1[i] = fused3(x0, x1, x2, &w1, a1[i]);
                                a2[i] = fused3(x0, x1, x2, &w2, a2[i]);
                                a3[i] = fused3(x0, x1, x2, &w3, a3[i]);
                            }
                        }
                    }
                }
                for (t, a) in acc.iter().take(nt).enumerate() {
                    let dst = (co0 + t) * cs + ((z + 1) * hp + yy + 1) * wp + 1;
                    let bv = bias[co0 + t];
                    for (o, &av) in y[dst..dst + wd].iter_mut().zip(&a[..wd]) {
                        *o = av + bv;
                    }
                }
            }
        }
    }
}

/// dx[ci, z + kz, y + ky, :] += w * gy rows (the transposed stencil).
///
/// Gradient rows are staged in a locally zero-extended buffer so the three
/// kx shifts fuse into one pass, mirroring the forward kernel.
#[allow(clippy::too_many_arguments)]
#[inline(never)]
fn conv3x3_bwd_input_item<T: Scalar, const W: usize>(
    gy: &[T],
    dx: &mut [T],
    w: &[T],
    cin: usize,
    cout: usize,
    d: usize,
    h: usize,
) {
    let wd = W;
    let (hp, wp) = (h + 2, wd + 2);
    let cs = (d + 2) * hp * wp;
    let mut acc = [[T::zero(); MAX_W + 4]; CO_TILE];
    let mut g2 = [T::zero(); MAX_W + 4];
    for ci0 in (0..cin).step_by(CO_TILE) {
        let nt = CO_TILE.min(cin - ci0);
        for z in 0..d {
            for yy in 0..h {
                for kz in 0..3 {
                    for ky in 0..3 {
                        let [a0, a1, a2, a3] = &mut acc;
                        for a in [&mut *a0, &mut *a1, &mut *a2, &mut *a3] {
                            a[..wp].iter_mut().for_each(|v| *v = T::zero());
                        }
                        for co in 0..cout {
                            let gyrow =
                                &gy[co * cs + ((z + 1) * hp + yy + 1) * wp + 1..][..wd];
                            // g2[2..2+wd] holds the row, zeros elsewhere, so
                            // acc[j] += sum_kx w[kx] * gyrow[j - kx] is one
                            // fused pass with in-bounds indexing.
                            g2[2..2 + wd].copy_from_slice(gyrow);
                            let wt = |t: usize| -> [T; 3] {
                                if t < nt {
                                    let base =
                                        (co * cin + ci0 + t) * 27 + (kz * 3 + ky) * 3;
                                    // Reversed: offset j+2-kx pairs w[2] with
                                    // g2[j], w[0] with g2[j+2].
                                    [w[base + 2], w[base + 1], w[base]]
                                } else {
                                    [T::zero(); 3]
                                }
                            };
                            let [w0, w1, w2, w3] = [wt(0), wt(1), wt(2), wt(3)];
                            let full = wp / LANES * LANES;
                            let mut j0 = 0;
                            while j0 < full {
                                for l in 0..LANES {
                                    let j = j0 + l;
                                    let (g0, g1, gg) = (g2[j], g2[j + 1], g2[j + 2]);
                                    a0[j] = fused3(g0, g1, gg, &w0, a0[j]);
                                    a1[j] = fused3(g0, g1, gg, &w1, a1[j]);
                                    a2[j] = fused3(g0, g1, gg, &w2, a2[j]);
                                    a3[j] = fused3(g0, g1, gg, &w3, a3[j]);
                                }
                                j0 += LANES;
                            }
                            for j in full..wp {
                                let (g0, g1, gg) = (g2[j], g2[j + 1], g2[j + 2]);
                                a0[j] = fused3(g0, g1, gg, &w0, a0[j]);
                                a1[j] = fused3(g0, g1, gg, &w1, a1[j]);
                                a2[j] = fused3(g0, g1, gg, &w2, a2[j]);
                                a3[j] = fused3(g0, g1, gg, &w3, a3[j]);
                            }
                        }
                        for (t, a) in acc.iter().take(nt).enumerate() {
                            let dst = (ci0 + t) * cs + ((z + kz) * hp + yy + ky) * wp;
                            for (o, &av) in dx[dst..dst + wp].iter_mut().zip(&a[..wp]) {
                                *o = *o + av;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// dw[co, ci, tap] += dot(gy row, shifted x row) over all output rows.
///
/// Dots accumulate in fixed lane arrays (reduced once at the end) because
/// strict FP semantics keep plain reduction loops scalar.
#[allow(clippy::too_many_arguments)]
#[inline(never)]
fn conv3x3_bwd_weights_item<T: Scalar, const W: usize>(
    x: &[T],
    gy: &[T],
    dw: &mut [T],
    db: &mut [T],
    cin: usize,
    cout: usize,
    d: usize,
    h: usize,
) {
    let wd = W;
    const DOT_LANES: usize = 8;
    let (hp, wp) = (h + 2, wd + 2);
    let cs = (d + 2) * hp * wp;
    let full = wd / DOT_LANES * DOT_LANES;
    for co in 0..cout {
        let gyc = &gy[co * cs..(co + 1) * cs];
        for ci in 0..cin {
            let xc = &x[ci * cs..(ci + 1) * cs];
            let dwrow = &mut dw[(co * cin + ci) * 27..(co * cin + ci + 1) * 27];
            for kz in 0..3 {
                for ky in 0..3 {
                    let mut lanes = [[T::zero(); DOT_LANES]; 3];
                    for z in 0..d {
                        for yy in 0..h {
                            let gyrow = &gyc[((z + 1) * hp + yy + 1) * wp + 1..][..wd];
                            let row = &xc[((z + kz) * hp + (yy + ky)) * wp..][..wp];
                            let mut i0 = 0;
                            while i0 < full {
                                for l in 0..DOT_LANES {
                                    let g = gyrow[i0 + l];
                                    lanes[0][l] = g.fmadd(row[i0 + l], lanes[0][l]);
                                    lanes[1][l] = g.fmadd(row[i0 + l + 1], lanes[1][l]);
                                    lanes[2][l] = g.fmadd(row[i0 + l + 2], lanes[2][l]);
                                }
                                i0 += DOT_LANES;
                            }
                            for i in full..wd {
                                let g = gyrow[i];
                                lanes[0][0] = g.fmadd(row[i], lanes[0][0]);
                                lanes[1][0] = g.fmadd(row[i + 1], lanes[1][0]);
                                lanes[2][0] = g.fmadd(row[i + 2], lanes[2][0]);
                            }
                        }
                    }
                    for kx in 0..3 {
                        let mut dot = T::zero();
                        for l in 0..DOT_LANES {
                            dot = dot + lanes[kx][l];
                        }
                        let idx = (kz * 3 + ky) * 3 + kx;
                        dwrow[idx] = dwrow[idx] + dot;
                    }
                }
            }
        }
        let mut bias_acc = 0.0f64;
        for z in 0..d {
            for yy in 0..h {
                let gyrow = &gyc[((z + 1) * hp + yy + 1) * wp + 1..][..wd];
                for &gv in gyrow {
                    bias_acc += gv.as_f64();
                }
            }
        }
        db[co] = db[co] + T::from_f64(bias_acc);
    }
}


/// Widths with dedicated monomorphic kernels. Constant trip counts are
/// what lets LLVM keep the row accumulators in registers; a shared
/// dynamic-width instantiation (W = 0 sentinel is never used; odd widths
/// fall back to MAX_W-bounded loops via the const kernels' dynamic twin)
/// would lose that.
macro_rules! dispatch_width {
    ($wd:expr, $f:ident::<$t:ty>($($arg:expr),* $(,)?)) => {
        match $wd {
            1 => $f::<$t, 1>($($arg),*),
            2 => $f::<$t, 2>($($arg),*),
            3 => $f::<$t, 3>($($arg),*),
            4 => $f::<$t, 4>($($arg),*),
            5 => $f::<$t, 5>($($arg),*),
            6 => $f::<$t, 6>($($arg),*),
            8 => $f::<$t, 8>($($arg),*),
            12 => $f::<$t, 12>($($arg),*),
            16 => $f::<$t, 16>($($arg),*),
            24 => $f::<$t, 24>($($arg),*),
            32 => $f::<$t, 32>($($arg),*),
            48 => $f::<$t, 48>($($arg),*),
            64 => $f::<$t, 64>($($arg),*),
            96 => $f::<$t, 96>($($arg),*),
            128 => $f::<$t, 128>($($arg),*),
            other => panic!(
                "unsupported volume width {other}: widths must be one of \
                 1-6, 8, 12, 16, 24, 32, 48, 64, 96, 128"
            ),
        }
    };
}

/// 3x3x3 stride-1 same-padding convolution with bias and optional spectral
/// normalization of the weight (viewed as a (cout, cin*27) matrix).
#[derive(Debug, Clone)]
pub struct Conv3x3<T> {
    pub w: Param<T>,
    pub b: Param<T>,
    pub cin: usize,
    pub cout: usize,
    sn: Option<SpectralNorm<T>>,
    /// Weight actually applied in the last forward (w / sigma when
    /// spectrally normalized); empty when sn is off.
    w_eff: Vec<T>,
    sigma: f64,
}

impl<T: Scalar> Conv3x3<T> {
    pub fn new(cin: usize, cout: usize, rng: &mut Rng) -> Self {
        let w = Param::he_normal(vec![cout, cin, 27], cin * 27, rng);
        Conv3x3 {
            w,
            b: Param::zeros(vec![cout]),
            cin,
            cout,
            sn: None,
            w_eff: Vec::new(),
            sigma: 1.0,
        }
    }

    pub fn with_spectral_norm(mut self, rng: &mut Rng) -> Self {
        self.sn = Some(SpectralNorm::new(&self.w.value, self.cout, self.cin * 27, rng));
        self
    }

    pub fn spectral_sigma(&self) -> f64 {
        self.sigma
    }

    fn resolve_weight(&mut self, update_sn: bool) {
        if let Some(sn) = &mut self.sn {
            let (w_eff, sigma) =
                sn.effective(&self.w.value, self.cout, self.cin * 27, update_sn);
            self.w_eff = w_eff;
            self.sigma = sigma;
        }
    }

    fn weight(&self) -> &[T] {
        if self.sn.is_some() {
            &self.w_eff
        } else {
            &self.w.value
        }
    }

    pub fn forward(&mut self, x: &PaddedBatch<T>, update_sn: bool) -> PaddedBatch<T> {
        assert_eq!(x.channels(), self.cin, "conv3x3 input channels");
        self.resolve_weight(update_sn);
        let weight = self.weight().to_vec();
        let bias: Vec<T> = self.b.value.clone();
        let (n, d, h, w) = (x.n(), x.depth(), x.height(), x.width());
        let mut y = PaddedBatch::zeros(n, self.cout, d, h, w);
        let (cin, cout) = (self.cin, self.cout);
        let item_stride = y.item_stride();
        let x_ref = &x;
        par_chunks_mut(y.data_mut(), item_stride, |i, y_item| {
            dispatch_width!(
                w,
                conv3x3_fwd_item::<T>(x_ref.item(i), y_item, &weight, &bias, cin, cout, d, h)
            );
        });
        y
    }

    /// Propagate gradients: returns dL/dx and accumulates dL/dw, dL/db.
    /// `x` must be the forward input; `gy` must have a zero pad ring.
    pub fn backward(&mut self, x: &PaddedBatch<T>, gy: &PaddedBatch<T>) -> PaddedBatch<T> {
        assert_eq!(gy.channels(), self.cout);
        let weight = self.weight().to_vec();
        let (n, d, h, w) = (x.n(), x.depth(), x.height(), x.width());
        let mut gx = PaddedBatch::zeros(n, self.cin, d, h, w);
        let (cin, cout) = (self.cin, self.cout);
        let wlen = self.w.len();

        // Per-item weight/bias gradient partials, reduced in item order.
        let mut partials: Vec<(Vec<T>, Vec<T>)> = vec![(Vec::new(), Vec::new()); n];
        let gx_item_stride = gx.item_stride();
        {
            let partial_slots: Vec<_> = partials.iter_mut().collect();
            let x_ref = &x;
            let gy_ref = &gy;
            let weight_ref = &weight;
            // Pair each item's gx chunk with its partial slot.
            let mut slot_iter: Vec<(usize, &mut (Vec<T>, Vec<T>))> =
                partial_slots.into_iter().enumerate().collect();
            let gx_data = gx.data_mut();
            let run = |(i, slot): &mut (usize, &mut (Vec<T>, Vec<T>)), gx_item: &mut [T]| {
                let i = *i;
                let x_item = x_ref.item(i);
                let gy_item = gy_ref.item(i);
                let mut dw = vec![T::zero(); wlen];
                let mut db = vec![T::zero(); cout];
                dispatch_width!(
                    w,
                    conv3x3_bwd_input_item::<T>(gy_item, gx_item, weight_ref, cin, cout, d, h)
                );
                dispatch_width!(
                    w,
                    conv3x3_bwd_weights_item::<T>(x_item, gy_item, &mut dw, &mut db, cin, cout, d, h)
                );
                slot.0 = dw;
                slot.1 = db;
            };
            if super::serial_mode() || n <= 1 {
                for (pair, gx_item) in slot_iter.iter_mut().zip(gx_data.chunks_mut(gx_item_stride))
                {
                    run(pair, gx_item);
                }
            } else {
                use rayon::prelude::*;
                slot_iter
                    .par_iter_mut()
                    .zip(gx_data.par_chunks_mut(gx_item_stride))
                    .for_each(|(pair, gx_item)| run(pair, gx_item));
            }
        }
        gx.zero_pad_ring();

        // Sequential reduction keeps the result independent of scheduling.
        let mut dw_eff = vec![T::zero(); wlen];
        let mut db_total = vec![T::zero(); cout];
        for (dw, db) in &partials {
            for (acc, v) in dw_eff.iter_mut().zip(dw) {
                *acc = *acc + *v;
            }
            for (acc, v) in db_total.iter_mut().zip(db) {
                *acc = *acc + *v;
            }
        }
        match &self.sn {
            Some(sn) => {
                let dw_raw = sn.grad_raw(&dw_eff, &self.w_eff, self.sigma);
                for (g, v) in self.w.grad.iter_mut().zip(&dw_raw) {
                    *g = *g + *v;
                }
            }
            None => {
                for (g, v) in self.w.grad.iter_mut().zip(&dw_eff) {
                    *g = *g + *v;
                }
            }
        }
        for (g, v) in self.b.grad.iter_mut().zip(&db_total) {
            *g = *g + *v;
        }
        gx
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        f(format!("{prefix}/weight"), &mut self.w);
        f(format!("{prefix}/bias"), &mut self.b);
    }

    pub fn visit_buffers(&mut self, prefix: &str, f: &mut super::BufferVisitor<'_, T>) {
        if let Some(sn) = &mut self.sn {
            f(format!("{prefix}/sn_u"), &mut sn.u);
            f(format!("{prefix}/sn_v"), &mut sn.v);
        }
    }
}

/// 1x1x1 convolution (a per-voxel linear map), bias-free. Used for skip
/// connections and attention projections.
#[derive(Debug, Clone)]
pub struct Conv1x1<T> {
    pub w: Param<T>,
    pub cin: usize,
    pub cout: usize,
    sn: Option<SpectralNorm<T>>,
    w_eff: Vec<T>,
    sigma: f64,
}

impl<T: Scalar> Conv1x1<T> {
    pub fn new(cin: usize, cout: usize, rng: &mut Rng) -> Self {
        Conv1x1 {
            w: Param::he_normal(vec![cout, cin], cin, rng),
            cin,
            cout,
            sn: None,
            w_eff: Vec::new(),
            sigma: 1.0,
        }
    }

    pub fn with_spectral_norm(mut self, rng: &mut Rng) -> Self {
        self.sn = Some(SpectralNorm::new(&self.w.value, self.cout, self.cin, rng));
        self
    }

    pub fn spectral_sigma(&self) -> f64 {
        self.sigma
    }

    fn resolve_weight(&mut self, update_sn: bool) {
        if let Some(sn) = &mut self.sn {
            let (w_eff, sigma) = sn.effective(&self.w.value, self.cout, self.cin, update_sn);
            self.w_eff = w_eff;
            self.sigma = sigma;
        }
    }

    pub(crate) fn weight(&self) -> &[T] {
        if self.sn.is_some() {
            &self.w_eff
        } else {
            &self.w.value
        }
    }

    pub fn forward(&mut self, x: &PaddedBatch<T>, update_sn: bool) -> PaddedBatch<T> {
        assert_eq!(x.channels(), self.cin);
        self.resolve_weight(update_sn);
        let weight = self.weight().to_vec();
        let (n, d, h, w) = (x.n(), x.depth(), x.height(), x.width());
        let mut y = PaddedBatch::zeros(n, self.cout, d, h, w);
        let cs = x.channel_stride();
        let (cin, cout) = (self.cin, self.cout);
        let item_stride = y.item_stride();
        let x_ref = &x;
        // The pad ring of x is zero, so convolving the full padded buffer
        // leaves y's ring zero as well.
        par_chunks_mut(y.data_mut(), item_stride, |i, y_item| {
            gemm(
                cout,
                cin,
                cs,
                1.0,
                (&weight, 0, cin, 1),
                (x_ref.item(i), 0, cs, 1),
                0.0,
                (y_item, 0, cs, 1),
            );
        });
        y
    }

    pub fn backward(&mut self, x: &PaddedBatch<T>, gy: &PaddedBatch<T>) -> PaddedBatch<T> {
        assert_eq!(gy.channels(), self.cout);
        let weight = self.weight().to_vec();
        let (n, d, h, w) = (x.n(), x.depth(), x.height(), x.width());
        let mut gx = PaddedBatch::zeros(n, self.cin, d, h, w);
        let cs = x.channel_stride();
        let (cin, cout) = (self.cin, self.cout);
        let wlen = self.w.len();

        let mut partials: Vec<Vec<T>> = vec![Vec::new(); n];
        {
            let x_ref = &x;
            let gy_ref = &gy;
            let weight_ref = &weight;
            let gx_item_stride = gx.item_stride();
            let gx_data = gx.data_mut();
            let mut slots: Vec<(usize, &mut Vec<T>)> =
                partials.iter_mut().enumerate().collect();
            let run = |(i, slot): &mut (usize, &mut Vec<T>), gx_item: &mut [T]| {
                let i = *i;
                gemm(
                    cin,
                    cout,
                    cs,
                    1.0,
                    (weight_ref, 0, 1, cin),
                    (gy_ref.item(i), 0, cs, 1),
                    0.0,
                    (gx_item, 0, cs, 1),
                );
                let mut dw = vec![T::zero(); wlen];
                gemm(
                    cout,
                    cs,
                    cin,
                    1.0,
                    (gy_ref.item(i), 0, cs, 1),
                    (x_ref.item(i), 0, 1, cs),
                    0.0,
                    (&mut dw, 0, cin, 1),
                );
                **slot = dw;
            };
            if super::serial_mode() || n <= 1 {
                for (pair, gx_item) in slots.iter_mut().zip(gx_data.chunks_mut(gx_item_stride)) {
                    run(pair, gx_item);
                }
            } else {
                use rayon::prelude::*;
                slots
                    .par_iter_mut()
                    .zip(gx_data.par_chunks_mut(gx_item_stride))
                    .for_each(|(pair, gx_item)| run(pair, gx_item));
            }
        }

        let mut dw_eff = vec![T::zero(); wlen];
        for dw in &partials {
            for (acc, v) in dw_eff.iter_mut().zip(dw) {
                *acc = *acc + *v;
            }
        }
        match &self.sn {
            Some(sn) => {
                let dw_raw = sn.grad_raw(&dw_eff, &self.w_eff, self.sigma);
                for (g, v) in self.w.grad.iter_mut().zip(&dw_raw) {
                    *g = *g + *v;
                }
            }
            None => {
                for (g, v) in self.w.grad.iter_mut().zip(&dw_eff) {
                    *g = *g + *v;
                }
            }
        }
        gx
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        f(format!("{prefix}/weight"), &mut self.w);
    }

    pub fn visit_buffers(&mut self, prefix: &str, f: &mut super::BufferVisitor<'_, T>) {
        if let Some(sn) = &mut self.sn {
            f(format!("{prefix}/sn_u"), &mut sn.u);
            f(format!("{prefix}/sn_v"), &mut sn.v);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Naive reference convolution, zero padding.
    fn conv_reference(
        x: &PaddedBatch<f64>,
        w: &[f64],
        b: &[f64],
        cin: usize,
        cout: usize,
    ) -> PaddedBatch<f64> {
        let (n, d, h, wd) = (x.n(), x.depth(), x.height(), x.width());
        let mut y = PaddedBatch::zeros(n, cout, d, h, wd);
        for i in 0..n {
            for co in 0..cout {
                for z in 0..d {
                    for yy in 0..h {
                        for xx in 0..wd {
                            let mut acc = b[co];
                            for ci in 0..cin {
                                for kz in 0..3usize {
                                    for ky in 0..3usize {
                                        for kx in 0..3usize {
                                            let sz = z as isize + kz as isize - 1;
                                            let sy = yy as isize + ky as isize - 1;
                                            let sx = xx as isize + kx as isize - 1;
                                            if sz < 0
                                                || sy < 0
                                                || sx < 0
                                                || sz >= d as isize
                                                || sy >= h as isize
                                                || sx >= wd as isize
                                            {
                                                continue;
                                            }
                                            let wv = w[(co * cin + ci) * 27
                                                + (kz * 3 + ky) * 3
                                                + kx];
                                            acc += wv
                                                * x.get(i, ci, sz as usize, sy as usize, sx as usize);
                                        }
                                    }
                                }
                            }
                            y.set(i, co, z, yy, xx, acc);
                        }
                    }
                }
            }
        }
        y
    }

    fn random_batch(rng: &mut Rng, n: usize, c: usize, d: usize, h: usize, w: usize) -> PaddedBatch<f64> {
        let mut b = PaddedBatch::zeros(n, c, d, h, w);
        for i in 0..n {
            for ch in 0..c {
                for z in 0..d {
                    for y in 0..h {
                        for x in 0..w {
                            b.set(i, ch, z, y, x, rng.normal());
                        }
                    }
                }
            }
        }
        b
    }

    #[test]
    fn conv3x3_matches_reference() {
        let mut rng = Rng::new(10);
        let mut conv = Conv3x3::<f64>::new(3, 2, &mut rng);
        // Nonzero bias to exercise that path.
        for (i, b) in conv.b.value.iter_mut().enumerate() {
            *b = 0.1 * (i as f64 + 1.0);
        }
        let x = random_batch(&mut rng, 2, 3, 4, 5, 6);
        let y = conv.forward(&x, false);
        let y_ref = conv_reference(&x, &conv.w.value, &conv.b.value, 3, 2);
        assert!(y.pad_ring_is_zero());
        for i in 0..2 {
            for co in 0..2 {
                for z in 0..4 {
                    for yy in 0..5 {
                        for xx in 0..6 {
                            let a = y.get(i, co, z, yy, xx);
                            let b = y_ref.get(i, co, z, yy, xx);
                            assert!((a - b).abs() < 1e-10, "mismatch at {i},{co},{z},{yy},{xx}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn conv3x3_gradients_match_finite_differences() {
        let mut rng = Rng::new(11);
        let mut conv = Conv3x3::<f64>::new(2, 2, &mut rng);
        let x = random_batch(&mut rng, 1, 2, 3, 3, 3);
        // Loss = sum of outputs weighted by a fixed random tensor.
        let y0 = conv.forward(&x, false);
        let mut gy = PaddedBatch::zeros(1, 2, 3, 3, 3);
        let mut weights = Vec::new();
        for ch in 0..2 {
            for z in 0..3 {
                for yy in 0..3 {
                    for xx in 0..3 {
                        let g = rng.normal();
                        gy.set(0, ch, z, yy, xx, g);
                        weights.push(g);
                    }
                }
            }
        }
        let loss = |y: &PaddedBatch<f64>| {
            let mut acc = 0.0;
            let mut it = weights.iter();
            for ch in 0..2 {
                for z in 0..3 {
                    for yy in 0..3 {
                        for xx in 0..3 {
                            acc += it.next().unwrap() * y.get(0, ch, z, yy, xx);
                        }
                    }
                }
            }
            acc
        };
        let _ = loss(&y0);
        let gx = conv.backward(&x, &gy);

        let h = 1e-6;
        // Input gradient.
        for z in 0..3 {
            let mut xp = x.clone();
            xp.set(0, 1, z, 1, 2, x.get(0, 1, z, 1, 2) + h);
            let mut xm = x.clone();
            xm.set(0, 1, z, 1, 2, x.get(0, 1, z, 1, 2) - h);
            let fd = (loss(&conv.forward(&xp, false)) - loss(&conv.forward(&xm, false))) / (2.0 * h);
            let an = gx.get(0, 1, z, 1, 2);
            assert!((fd - an).abs() < 1e-6 * (1.0 + fd.abs()), "dx {fd} vs {an}");
        }
        // Weight gradient (a few entries).
        for &wi in &[0usize, 13, 40, 80] {
            let orig = conv.w.value[wi];
            conv.w.value[wi] = orig + h;
            let lp = loss(&conv.forward(&x, false));
            conv.w.value[wi] = orig - h;
            let lm = loss(&conv.forward(&x, false));
            conv.w.value[wi] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let an = conv.w.grad[wi];
            assert!((fd - an).abs() < 1e-6 * (1.0 + fd.abs()), "dw[{wi}] {fd} vs {an}");
        }
        // Bias gradient.
        let orig = conv.b.value[0];
        conv.b.value[0] = orig + h;
        let lp = loss(&conv.forward(&x, false));
        conv.b.value[0] = orig - h;
        let lm = loss(&conv.forward(&x, false));
        conv.b.value[0] = orig;
        let fd = (lp - lm) / (2.0 * h);
        assert!((fd - conv.b.grad[0]).abs() < 1e-6 * (1.0 + fd.abs()));
    }

    #[test]
    fn conv1x1_forward_and_gradients() {
        let mut rng = Rng::new(12);
        let mut conv = Conv1x1::<f64>::new(3, 2, &mut rng);
        let x = random_batch(&mut rng, 2, 3, 2, 2, 2);
        let y = conv.forward(&x, false);
        // Reference: per-voxel matrix multiply.
        for i in 0..2 {
            for z in 0..2 {
                for yy in 0..2 {
                    for xx in 0..2 {
                        for co in 0..2 {
                            let mut acc = 0.0;
                            for ci in 0..3 {
                                acc += conv.w.value[co * 3 + ci] * x.get(i, ci, z, yy, xx);
                            }
                            assert!((y.get(i, co, z, yy, xx) - acc).abs() < 1e-12);
                        }
                    }
                }
            }
        }
        assert!(y.pad_ring_is_zero());

        // Gradient check on one weight and one input voxel.
        let mut gy = PaddedBatch::zeros(2, 2, 2, 2, 2);
        let mut coefs = Vec::new();
        for i in 0..2 {
            for ch in 0..2 {
                for z in 0..2 {
                    for yy in 0..2 {
                        for xx in 0..2 {
                            let g = rng.normal();
                            gy.set(i, ch, z, yy, xx, g);
                            coefs.push(g);
                        }
                    }
                }
            }
        }
        let loss = |conv: &mut Conv1x1<f64>, x: &PaddedBatch<f64>| {
            let y = conv.forward(x, false);
            let mut acc = 0.0;
            let mut it = coefs.iter();
            for i in 0..2 {
                for ch in 0..2 {
                    for z in 0..2 {
                        for yy in 0..2 {
                            for xx in 0..2 {
                                acc += it.next().unwrap() * y.get(i, ch, z, yy, xx);
                            }
                        }
                    }
                }
            }
            acc
        };
        let gx = conv.backward(&x, &gy);
        let h = 1e-6;
        let orig = conv.w.value[4];
        conv.w.value[4] = orig + h;
        let lp = loss(&mut conv, &x);
        conv.w.value[4] = orig - h;
        let lm = loss(&mut conv, &x);
        conv.w.value[4] = orig;
        let fd = (lp - lm) / (2.0 * h);
        assert!((fd - conv.w.grad[4]).abs() < 1e-6 * (1.0 + fd.abs()));

        let mut xp = x.clone();
        xp.set(1, 2, 1, 0, 1, x.get(1, 2, 1, 0, 1) + h);
        let mut xm = x.clone();
        xm.set(1, 2, 1, 0, 1, x.get(1, 2, 1, 0, 1) - h);
        let fd = (loss(&mut conv, &xp) - loss(&mut conv, &xm)) / (2.0 * h);
        assert!((fd - gx.get(1, 2, 1, 0, 1)).abs() < 1e-6 * (1.0 + fd.abs()));
    }
}

#[cfg(test)]
mod bench {
    use super::*;

    #[test]
    #[ignore]
    fn conv_throughput() {
        let mut rng = Rng::new(1);
        let (cin, cout, d) = (12usize, 6usize, 32usize);
        let mut conv = Conv3x3::<f32>::new(cin, cout, &mut rng);
        let mut x = PaddedBatch::<f32>::zeros(1, cin, d, d, d);
        x.data_mut().iter_mut().for_each(|v| *v = 0.1);
        x.zero_pad_ring();
        let t0 = std::time::Instant::now();
        let reps = 50;
        let mut sink = 0.0f32;
        for _ in 0..reps {
            let y = conv.forward(&x, false);
            sink += y.get(0, 0, 0, 0, 0);
        }
        let dt = t0.elapsed().as_secs_f64();
        let macs = (cin * cout * 27 * d * d * d * reps) as f64;
        println!("fwd: {:.1} ms/call, {:.2} GMAC/s (sink {sink})", dt * 1000.0 / reps as f64, macs / dt / 1e9);

        // Raw kernel, no wrapper.
        let mut y = PaddedBatch::<f32>::zeros(1, cout, d, d, d);
        let t0 = std::time::Instant::now();
        for _ in 0..reps {
            conv3x3_fwd_item::<f32, 32>(x.item(0), y.item_mut(0), &conv.w.value, &conv.b.value, cin, cout, d, d);
        }
        let dt = t0.elapsed().as_secs_f64();
        sink += y.get(0, 0, 1, 1, 1);
        println!("raw fwd: {:.1} ms/call, {:.2} GMAC/s (sink {sink})", dt * 1000.0 / reps as f64, macs / dt / 1e9);

        let gy = x.clone();
        let gy = {
            let mut g = PaddedBatch::<f32>::zeros(1, cout, d, d, d);
            g.data_mut().iter_mut().for_each(|v| *v = 0.05);
            g.zero_pad_ring();
            drop(gy);
            g
        };
        let t0 = std::time::Instant::now();
        for _ in 0..reps {
            let gx = conv.backward(&x, &gy);
            sink += gx.get(0, 0, 0, 0, 0);
        }
        let dt = t0.elapsed().as_secs_f64();
        println!("bwd: {:.1} ms/call, {:.2} GMAC/s x2 (sink {sink})", dt * 1000.0 / reps as f64, 2.0 * macs / dt / 1e9);
    }
}
