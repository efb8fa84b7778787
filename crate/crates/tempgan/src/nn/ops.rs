//! Elementwise and resampling ops on padded batches.
//!
//! Every op writes interior voxels only (or preserves zeros elementwise),
//! so the pad-ring invariant survives without extra passes.

use super::batch::PaddedBatch;
use super::{par_chunks_mut, Scalar};

/// max(0, x) over the whole buffer; zero pads map to zero.
pub fn relu<T: Scalar>(x: &PaddedBatch<T>) -> PaddedBatch<T> {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| {
        if *v < T::zero() {
            *v = T::zero();
        }
    });
    y
}

/// dx = dy where the forward output was positive. The convention at the
/// kink is relu'(0) = 0.
pub fn relu_backward<T: Scalar>(y: &PaddedBatch<T>, gy: &PaddedBatch<T>) -> PaddedBatch<T> {
    let mut gx = gy.clone();
    for (g, &o) in gx.data_mut().iter_mut().zip(y.data()) {
        if o <= T::zero() {
            *g = T::zero();
        }
    }
    gx
}

/// tanh over the whole buffer; zero pads map to zero.
pub fn tanh<T: Scalar>(x: &PaddedBatch<T>) -> PaddedBatch<T> {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| *v = v.tanh());
    y
}

/// dx = dy * (1 - y^2).
pub fn tanh_backward<T: Scalar>(y: &PaddedBatch<T>, gy: &PaddedBatch<T>) -> PaddedBatch<T> {
    let mut gx = gy.clone();
    for (g, &o) in gx.data_mut().iter_mut().zip(y.data()) {
        *g = *g * (T::one() - o * o);
    }
    gx
}

/// Nearest-neighbor 2x upsampling of each spatial axis.
pub fn upsample2<T: Scalar>(x: &PaddedBatch<T>) -> PaddedBatch<T> {
    let (n, c, d, h, w) = (x.n(), x.channels(), x.depth(), x.height(), x.width());
    let mut y = PaddedBatch::zeros(n, c, 2 * d, 2 * h, 2 * w);
    let item_stride = y.item_stride();
    let x_cs = x.channel_stride();
    let y_cs = item_stride / c;
    let (xo, yo) = (x.interior_offset(0, 0, 0), {
        let t = PaddedBatch::<T>::zeros(1, 1, 2 * d, 2 * h, 2 * w);
        t.interior_offset(0, 0, 0)
    });
    let (xhp, xwp) = (h + 2, w + 2);
    let (yhp, ywp) = (2 * h + 2, 2 * w + 2);
    let x_ref = &x;
    par_chunks_mut(y.data_mut(), item_stride, |i, y_item| {
        let x_item = x_ref.item(i);
        for ch in 0..c {
            let xc = &x_item[ch * x_cs..];
            let yc = &mut y_item[ch * y_cs..(ch + 1) * y_cs];
            for z in 0..2 * d {
                for yy in 0..2 * h {
                    let src = &xc[xo + ((z / 2) * xhp + yy / 2) * xwp..][..w];
                    let dst = &mut yc[yo + (z * yhp + yy) * ywp..][..2 * w];
                    for (pair, &v) in dst.chunks_mut(2).zip(src) {
                        pair[0] = v;
                        pair[1] = v;
                    }
                }
            }
        }
    });
    y
}

/// Sum the gradients of the eight children of each source voxel.
pub fn upsample2_backward<T: Scalar>(gy: &PaddedBatch<T>) -> PaddedBatch<T> {
    let (n, c) = (gy.n(), gy.channels());
    let (d, h, w) = (gy.depth() / 2, gy.height() / 2, gy.width() / 2);
    let mut gx = PaddedBatch::zeros(n, c, d, h, w);
    let item_stride = gx.item_stride();
    let gy_cs = gy.channel_stride();
    let gx_cs = item_stride / c;
    let gyo = gy.interior_offset(0, 0, 0);
    let gxo = {
        let t = PaddedBatch::<T>::zeros(1, 1, d, h, w);
        t.interior_offset(0, 0, 0)
    };
    let (gyhp, gywp) = (2 * h + 2, 2 * w + 2);
    let (gxhp, gxwp) = (h + 2, w + 2);
    let gy_ref = &gy;
    par_chunks_mut(gx.data_mut(), item_stride, |i, gx_item| {
        let gy_item = gy_ref.item(i);
        for ch in 0..c {
            let gyc = &gy_item[ch * gy_cs..];
            let gxc = &mut gx_item[ch * gx_cs..(ch + 1) * gx_cs];
            for z in 0..d {
                for yy in 0..h {
                    let row0 = &gyc[gyo + (2 * z * gyhp + 2 * yy) * gywp..][..2 * w];
                    let row1 = &gyc[gyo + (2 * z * gyhp + 2 * yy + 1) * gywp..][..2 * w];
                    let row2 = &gyc[gyo + ((2 * z + 1) * gyhp + 2 * yy) * gywp..][..2 * w];
                    let row3 = &gyc[gyo + ((2 * z + 1) * gyhp + 2 * yy + 1) * gywp..][..2 * w];
                    let dst = &mut gxc[gxo + (z * gxhp + yy) * gxwp..][..w];
                    for (xx, o) in dst.iter_mut().enumerate() {
                        let a = row0[2 * xx] + row0[2 * xx + 1] + row1[2 * xx] + row1[2 * xx + 1];
                        let b = row2[2 * xx] + row2[2 * xx + 1] + row3[2 * xx] + row3[2 * xx + 1];
                        *o = a + b;
                    }
                }
            }
        }
    });
    gx
}

/// 2x average pooling; spatial dims must be even.
pub fn avgpool2<T: Scalar>(x: &PaddedBatch<T>) -> PaddedBatch<T> {
    let (n, c, d, h, w) = (x.n(), x.channels(), x.depth(), x.height(), x.width());
    assert!(d % 2 == 0 && h % 2 == 0 && w % 2 == 0, "avgpool2 needs even dims");
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let mut y = PaddedBatch::zeros(n, c, od, oh, ow);
    let eighth = T::from_f64(0.125);
    let item_stride = y.item_stride();
    let x_cs = x.channel_stride();
    let y_cs = item_stride / c;
    let xo = x.interior_offset(0, 0, 0);
    let yo = {
        let t = PaddedBatch::<T>::zeros(1, 1, od, oh, ow);
        t.interior_offset(0, 0, 0)
    };
    let (xhp, xwp) = (h + 2, w + 2);
    let (yhp, ywp) = (oh + 2, ow + 2);
    let x_ref = &x;
    par_chunks_mut(y.data_mut(), item_stride, |i, y_item| {
        let x_item = x_ref.item(i);
        for ch in 0..c {
            let xc = &x_item[ch * x_cs..];
            let yc = &mut y_item[ch * y_cs..(ch + 1) * y_cs];
            for z in 0..od {
                for yy in 0..oh {
                    let row0 = &xc[xo + (2 * z * xhp + 2 * yy) * xwp..][..w];
                    let row1 = &xc[xo + (2 * z * xhp + 2 * yy + 1) * xwp..][..w];
                    let row2 = &xc[xo + ((2 * z + 1) * xhp + 2 * yy) * xwp..][..w];
                    let row3 = &xc[xo + ((2 * z + 1) * xhp + 2 * yy + 1) * xwp..][..w];
                    let dst = &mut yc[yo + (z * yhp + yy) * ywp..][..ow];
                    for (xx, o) in dst.iter_mut().enumerate() {
                        let a = row0[2 * xx] + row0[2 * xx + 1] + row1[2 * xx] + row1[2 * xx + 1];
                        let b = row2[2 * xx] + row2[2 * xx + 1] + row3[2 * xx] + row3[2 * xx + 1];
                        *o = (a + b) * eighth;
                    }
                }
            }
        }
    });
    y
}

/// Distribute each pooled gradient equally over its eight children.
pub fn avgpool2_backward<T: Scalar>(gy: &PaddedBatch<T>) -> PaddedBatch<T> {
    let (n, c) = (gy.n(), gy.channels());
    let (d, h, w) = (gy.depth() * 2, gy.height() * 2, gy.width() * 2);
    let mut gx = PaddedBatch::zeros(n, c, d, h, w);
    let eighth = T::from_f64(0.125);
    let item_stride = gx.item_stride();
    let gy_cs = gy.channel_stride();
    let gx_cs = item_stride / c;
    let gyo = gy.interior_offset(0, 0, 0);
    let gxo = {
        let t = PaddedBatch::<T>::zeros(1, 1, d, h, w);
        t.interior_offset(0, 0, 0)
    };
    let (gyhp, gywp) = (h / 2 + 2, w / 2 + 2);
    let (gxhp, gxwp) = (h + 2, w + 2);
    let gy_ref = &gy;
    par_chunks_mut(gx.data_mut(), item_stride, |i, gx_item| {
        let gy_item = gy_ref.item(i);
        for ch in 0..c {
            let gyc = &gy_item[ch * gy_cs..];
            let gxc = &mut gx_item[ch * gx_cs..(ch + 1) * gx_cs];
            for z in 0..d {
                for yy in 0..h {
                    let src = &gyc[gyo + ((z / 2) * gyhp + yy / 2) * gywp..][..w / 2];
                    let dst = &mut gxc[gxo + (z * gxhp + yy) * gxwp..][..w];
                    for (pair, &v) in dst.chunks_mut(2).zip(src) {
                        let scaled = v * eighth;
                        pair[0] = scaled;
                        pair[1] = scaled;
                    }
                }
            }
        }
    });
    gx
}

/// Per-channel sum over all voxels, returning an (n x c) row-major matrix.
/// Relies on the zero pad ring.
pub fn global_sum<T: Scalar>(x: &PaddedBatch<T>) -> Vec<T> {
    let (n, c) = (x.n(), x.channels());
    let cs = x.channel_stride();
    let mut out = vec![T::zero(); n * c];
    for i in 0..n {
        let item = x.item(i);
        for ch in 0..c {
            let mut acc = 0.0f64;
            for &v in &item[ch * cs..(ch + 1) * cs] {
                acc += v.as_f64();
            }
            out[i * c + ch] = T::from_f64(acc);
        }
    }
    out
}

/// Broadcast per-channel gradients back over the interior.
pub fn global_sum_backward<T: Scalar>(
    g: &[T],
    n: usize,
    c: usize,
    d: usize,
    h: usize,
    w: usize,
) -> PaddedBatch<T> {
    let mut gx = PaddedBatch::zeros(n, c, d, h, w);
    for i in 0..n {
        for ch in 0..c {
            let gv = g[i * c + ch];
            for z in 0..d {
                for yy in 0..h {
                    for xx in 0..w {
                        gx.set(i, ch, z, yy, xx, gv);
                    }
                }
            }
        }
    }
    gx
}
