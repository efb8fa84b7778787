//! Batched feature maps with a one-voxel zero pad ring.
//!
//! Layout per item: channels-major, then z, y, x (x fastest), every channel
//! padded to (d+2) x (h+2) x (w+2). The pad ring is maintained as zero by
//! every op that writes the buffer; 3x3x3 convolutions rely on it for both
//! correctness (zero padding) and speed (one contiguous GEMM range).

use super::Scalar;
use crate::volume_io::{Dims, Volume, VolumeError};

#[derive(Debug, Clone, PartialEq)]
pub struct PaddedBatch<T> {
    n: usize,
    c: usize,
    d: usize,
    h: usize,
    w: usize,
    data: Vec<T>,
}

impl<T: Scalar> PaddedBatch<T> {
    pub fn zeros(n: usize, c: usize, d: usize, h: usize, w: usize) -> Self {
        let len = n * c * (d + 2) * (h + 2) * (w + 2);
        PaddedBatch {
            n,
            c,
            d,
            h,
            w,
            data: vec![T::zero(); len],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn channels(&self) -> usize {
        self.c
    }
    pub fn depth(&self) -> usize {
        self.d
    }
    pub fn height(&self) -> usize {
        self.h
    }
    pub fn width(&self) -> usize {
        self.w
    }

    /// Padded elements per channel.
    #[inline]
    pub fn channel_stride(&self) -> usize {
        (self.d + 2) * (self.h + 2) * (self.w + 2)
    }

    /// Padded elements per item.
    #[inline]
    pub fn item_stride(&self) -> usize {
        self.c * self.channel_stride()
    }

    /// Interior voxels per channel.
    #[inline]
    pub fn interior_len(&self) -> usize {
        self.d * self.h * self.w
    }

    /// Flat padded offset of interior voxel (z, y, x) within one channel.
    #[inline]
    pub fn interior_offset(&self, z: usize, y: usize, x: usize) -> usize {
        ((z + 1) * (self.h + 2) + (y + 1)) * (self.w + 2) + (x + 1)
    }

    #[inline]
    pub fn index(&self, item: usize, ch: usize, z: usize, y: usize, x: usize) -> usize {
        (item * self.c + ch) * self.channel_stride() + self.interior_offset(z, y, x)
    }

    #[inline]
    pub fn get(&self, item: usize, ch: usize, z: usize, y: usize, x: usize) -> T {
        self.data[self.index(item, ch, z, y, x)]
    }

    #[inline]
    pub fn set(&mut self, item: usize, ch: usize, z: usize, y: usize, x: usize, v: T) {
        let i = self.index(item, ch, z, y, x);
        self.data[i] = v;
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn item(&self, i: usize) -> &[T] {
        let s = self.item_stride();
        &self.data[i * s..(i + 1) * s]
    }

    pub fn item_mut(&mut self, i: usize) -> &mut [T] {
        let s = self.item_stride();
        &mut self.data[i * s..(i + 1) * s]
    }

    /// First interior flat offset (the GEMM range start for 3x3x3 convs).
    #[inline]
    pub fn gemm_start(&self) -> usize {
        self.interior_offset(0, 0, 0)
    }

    /// Length of the contiguous flat range covering all interior voxels.
    #[inline]
    pub fn gemm_len(&self) -> usize {
        self.interior_offset(self.d - 1, self.h - 1, self.w - 1) - self.gemm_start() + 1
    }

    /// Zero the pad ring of every channel of every item. Required after any
    /// write that may have touched pad positions.
    pub fn zero_pad_ring(&mut self) {
        let (d, h, w) = (self.d, self.h, self.w);
        let (hp, wp) = (h + 2, w + 2);
        let cs = self.channel_stride();
        for chan in self.data.chunks_mut(cs) {
            // z = 0 and z = d+1 slabs.
            chan[..hp * wp].iter_mut().for_each(|v| *v = T::zero());
            chan[(d + 1) * hp * wp..].iter_mut().for_each(|v| *v = T::zero());
            for z in 1..=d {
                let slab = &mut chan[z * hp * wp..(z + 1) * hp * wp];
                // y = 0 and y = h+1 rows.
                slab[..wp].iter_mut().for_each(|v| *v = T::zero());
                slab[(h + 1) * wp..].iter_mut().for_each(|v| *v = T::zero());
                for y in 1..=h {
                    slab[y * wp] = T::zero();
                    slab[y * wp + w + 1] = T::zero();
                }
            }
        }
    }

    /// Gather one item's interior into a compact (c x N) row-major matrix,
    /// N = d*h*w with x fastest.
    pub fn gather_interior(&self, item: usize, out: &mut [T]) {
        let n = self.interior_len();
        debug_assert_eq!(out.len(), self.c * n);
        let cs = self.channel_stride();
        let base = item * self.item_stride();
        for ch in 0..self.c {
            let chan = &self.data[base + ch * cs..base + (ch + 1) * cs];
            let mut o = ch * n;
            for z in 0..self.d {
                for y in 0..self.h {
                    let row = self.interior_offset(z, y, 0);
                    out[o..o + self.w].copy_from_slice(&chan[row..row + self.w]);
                    o += self.w;
                }
            }
        }
    }

    /// Scatter-add a compact (c x N) matrix back into one item's interior,
    /// scaled by `scale`.
    pub fn scatter_interior_add(&mut self, item: usize, src: &[T], scale: T) {
        let n = self.interior_len();
        debug_assert_eq!(src.len(), self.c * n);
        let cs = self.channel_stride();
        let base = item * self.item_stride();
        for ch in 0..self.c {
            let mut o = ch * n;
            for z in 0..self.d {
                for y in 0..self.h {
                    let row = base + ch * cs + self.interior_offset(z, y, 0);
                    for x in 0..self.w {
                        self.data[row + x] = self.data[row + x] + scale * src[o + x];
                    }
                    o += self.w;
                }
            }
        }
    }

    /// Build a single-channel batch from volumes (all dims equal).
    pub fn from_volumes(volumes: &[&Volume]) -> Self {
        assert!(!volumes.is_empty());
        let dims = volumes[0].dims();
        let mut batch = Self::zeros(volumes.len(), 1, dims.z, dims.y, dims.x);
        for (i, v) in volumes.iter().enumerate() {
            assert_eq!(v.dims(), dims, "mixed dims in batch");
            batch.fill_channel_from_voxels(i, 0, v.voxels());
        }
        batch
    }

    /// Build a 3-channel batch from volume triplets, channel order (first,
    /// middle, last).
    pub fn from_triplets(triplets: &[[&Volume; 3]]) -> Self {
        assert!(!triplets.is_empty());
        let dims = triplets[0][0].dims();
        let mut batch = Self::zeros(triplets.len(), 3, dims.z, dims.y, dims.x);
        for (i, t) in triplets.iter().enumerate() {
            for (ch, v) in t.iter().enumerate() {
                assert_eq!(v.dims(), dims, "mixed dims in triplet batch");
                batch.fill_channel_from_voxels(i, ch, v.voxels());
            }
        }
        batch
    }

    fn fill_channel_from_voxels(&mut self, item: usize, ch: usize, voxels: &[f32]) {
        debug_assert_eq!(voxels.len(), self.interior_len());
        for z in 0..self.d {
            for y in 0..self.h {
                let src = (z * self.h + y) * self.w;
                let dst = self.index(item, ch, z, y, 0);
                for x in 0..self.w {
                    self.data[dst + x] = T::from_f64(voxels[src + x] as f64);
                }
            }
        }
    }

    /// Extract single-channel items back into volumes. Values are clamped
    /// to [-1, 1] (the generator's tanh keeps them there up to rounding).
    pub fn to_volumes(&self) -> Result<Vec<Volume>, VolumeError> {
        assert_eq!(self.c, 1, "to_volumes expects single-channel batches");
        let dims = Dims::new(self.w, self.h, self.d);
        let mut out = Vec::with_capacity(self.n);
        for i in 0..self.n {
            let mut voxels = Vec::with_capacity(self.interior_len());
            for z in 0..self.d {
                for y in 0..self.h {
                    for x in 0..self.w {
                        let v = self.get(i, 0, z, y, x).as_f64() as f32;
                        voxels.push(v.clamp(-1.0, 1.0));
                    }
                }
            }
            out.push(Volume::new(dims, voxels)?);
        }
        Ok(out)
    }

    /// Reinterpret the (item, channel) axes without moving data: consecutive
    /// single-channel items become channels of one item and vice versa.
    /// Requires `n * c == self.n() * self.channels()`.
    pub fn reshape_items_channels(self, n: usize, c: usize) -> Self {
        assert_eq!(n * c, self.n * self.c, "item/channel reshape must preserve count");
        PaddedBatch {
            n,
            c,
            d: self.d,
            h: self.h,
            w: self.w,
            data: self.data,
        }
    }

    /// Stack batches of identical shape along the item axis.
    pub fn concat(parts: &[&PaddedBatch<T>]) -> Self {
        assert!(!parts.is_empty());
        let first = parts[0];
        let mut out = Self::zeros(
            parts.iter().map(|p| p.n()).sum(),
            first.c,
            first.d,
            first.h,
            first.w,
        );
        let mut offset = 0usize;
        for p in parts {
            assert!(
                p.c == first.c && p.d == first.d && p.h == first.h && p.w == first.w,
                "concat shape mismatch"
            );
            let len = p.data.len();
            out.data[offset..offset + len].copy_from_slice(&p.data);
            offset += len;
        }
        out
    }

    /// Elementwise check that the pad ring is all zero (test helper).
    pub fn pad_ring_is_zero(&self) -> bool {
        let cs = self.channel_stride();
        let (hp, wp) = (self.h + 2, self.w + 2);
        for chan in self.data.chunks(cs) {
            for (idx, &v) in chan.iter().enumerate() {
                let x = idx % wp;
                let y = (idx / wp) % hp;
                let z = idx / (wp * hp);
                let interior = x >= 1
                    && x <= self.w
                    && y >= 1
                    && y <= self.h
                    && z >= 1
                    && z <= self.d;
                if !interior && v != T::zero() {
                    return false;
                }
            }
        }
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn volume_round_trip() {
        let dims = Dims::new(3, 4, 2);
        let voxels: Vec<f32> = (0..dims.count()).map(|i| (i as f32 / 50.0) - 0.2).collect();
        let v = Volume::new(dims, voxels).unwrap();
        let batch = PaddedBatch::<f64>::from_volumes(&[&v]);
        assert!(batch.pad_ring_is_zero());
        assert_eq!(batch.get(0, 0, 1, 2, 0), v.get(0, 2, 1) as f64);
        let back = batch.to_volumes().unwrap();
        assert_eq!(back[0].dims(), dims);
        for (a, b) in back[0].voxels().iter().zip(v.voxels()) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn gather_scatter_round_trip() {
        let mut batch = PaddedBatch::<f64>::zeros(2, 3, 2, 3, 4);
        let mut val = 0.0;
        for ch in 0..3 {
            for z in 0..2 {
                for y in 0..3 {
                    for x in 0..4 {
                        batch.set(1, ch, z, y, x, val);
                        val += 1.0;
                    }
                }
            }
        }
        let mut compact = vec![0.0; 3 * batch.interior_len()];
        batch.gather_interior(1, &mut compact);
        assert_eq!(compact[0], 0.0);
        assert_eq!(compact[1], 1.0);
        let mut other = PaddedBatch::<f64>::zeros(2, 3, 2, 3, 4);
        other.scatter_interior_add(1, &compact, 2.0);
        assert_eq!(other.get(1, 2, 1, 2, 3), 2.0 * batch.get(1, 2, 1, 2, 3));
        assert!(other.pad_ring_is_zero());
    }

    #[test]
    fn zero_pad_ring_clears_only_pads() {
        let mut batch = PaddedBatch::<f32>::zeros(1, 2, 3, 3, 3);
        batch.data_mut().iter_mut().for_each(|v| *v = 1.0);
        batch.zero_pad_ring();
        assert!(batch.pad_ring_is_zero());
        for ch in 0..2 {
            for z in 0..3 {
                for y in 0..3 {
                    for x in 0..3 {
                        assert_eq!(batch.get(0, ch, z, y, x), 1.0);
                    }
                }
            }
        }
    }

    #[test]
    fn gemm_range_covers_exactly_padded_buffer() {
        let batch = PaddedBatch::<f32>::zeros(1, 1, 4, 5, 6);
        let (hp, wp) = (5 + 2, 6 + 2);
        // Worst-case tap offset magnitude for a 3x3x3 kernel.
        let max_tap = hp * wp + wp + 1;
        assert_eq!(batch.gemm_start(), max_tap);
        assert_eq!(
            batch.gemm_start() + batch.gemm_len() + max_tap,
            batch.channel_stride()
        );
    }
}
