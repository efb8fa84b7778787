//! Spectral normalization by power iteration.
//!
//! The weight is viewed as a (rows x cols) matrix W; persistent vectors u
//! and v track its top singular pair. In training mode each forward runs
//! one power iteration (u, v updated without gradient), then the layer
//! applies W / sigma with sigma = u^T W v. u and v are treated as constants
//! in the backward pass, the standard estimator.

use super::Scalar;
use crate::rng::Rng;

const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct SpectralNorm<T> {
    pub u: Vec<T>,
    pub v: Vec<T>,
}

fn normalized(x: &[f64]) -> Vec<f64> {
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt() + NORM_EPS;
    x.iter().map(|v| v / n).collect()
}

impl<T: Scalar> SpectralNorm<T> {
    /// Random u, then one power iteration against the initial weight so
    /// sigma is meaningful from the first forward on.
    pub fn new(w: &[T], rows: usize, cols: usize, rng: &mut Rng) -> Self {
        let u: Vec<f64> = normalized(&(0..rows).map(|_| rng.normal()).collect::<Vec<_>>());
        let mut sn = SpectralNorm {
            u: u.iter().map(|&x| T::from_f64(x)).collect(),
            v: vec![T::zero(); cols],
        };
        sn.power_iterate(w, rows, cols);
        sn
    }

    /// v <- normalize(W^T u); u <- normalize(W v).
    pub fn power_iterate(&mut self, w: &[T], rows: usize, cols: usize) {
        debug_assert_eq!(w.len(), rows * cols);
        let u: Vec<f64> = self.u.iter().map(|v| v.as_f64()).collect();
        let mut v = vec![0.0f64; cols];
        for (r, &ur) in u.iter().enumerate() {
            let row = &w[r * cols..(r + 1) * cols];
            for (c, wv) in row.iter().enumerate() {
                v[c] += ur * wv.as_f64();
            }
        }
        let v = normalized(&v);
        let mut nu = vec![0.0f64; rows];
        for (r, nur) in nu.iter_mut().enumerate() {
            let row = &w[r * cols..(r + 1) * cols];
            *nur = row.iter().zip(&v).map(|(wv, vc)| wv.as_f64() * vc).sum();
        }
        let nu = normalized(&nu);
        self.u = nu.into_iter().map(T::from_f64).collect();
        self.v = v.into_iter().map(T::from_f64).collect();
    }

    /// sigma = u^T W v with the stored vectors.
    pub fn sigma(&self, w: &[T], rows: usize, cols: usize) -> f64 {
        let mut acc = 0.0;
        for r in 0..rows {
            let ur = self.u[r].as_f64();
            let row = &w[r * cols..(r + 1) * cols];
            let dot: f64 = row
                .iter()
                .zip(&self.v)
                .map(|(wv, vc)| wv.as_f64() * vc.as_f64())
                .sum();
            acc += ur * dot;
        }
        acc
    }

    /// Normalized weight and the sigma used. `update` runs one power
    /// iteration first (training); gradient checks keep u, v frozen.
    pub fn effective(&mut self, w: &[T], rows: usize, cols: usize, update: bool) -> (Vec<T>, f64) {
        if update {
            self.power_iterate(w, rows, cols);
        }
        let mut sigma = self.sigma(w, rows, cols);
        if sigma.abs() < NORM_EPS {
            sigma = NORM_EPS;
        }
        let inv = 1.0 / sigma;
        let w_eff = w.iter().map(|&x| T::from_f64(x.as_f64() * inv)).collect();
        (w_eff, sigma)
    }

    /// Pull the gradient w.r.t. the normalized weight back to the raw one:
    /// dW = (g - (sum g .* W_eff) u v^T) / sigma.
    pub fn grad_raw(&self, g_eff: &[T], w_eff: &[T], sigma: f64) -> Vec<T> {
        let rows = self.u.len();
        let cols = self.v.len();
        debug_assert_eq!(g_eff.len(), rows * cols);
        let dot: f64 = g_eff
            .iter()
            .zip(w_eff)
            .map(|(g, w)| g.as_f64() * w.as_f64())
            .sum();
        let inv = 1.0 / sigma;
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            let ur = self.u[r].as_f64();
            for c in 0..cols {
                let g = g_eff[r * cols + c].as_f64();
                out[r * cols + c] = T::from_f64((g - dot * ur * self.v[c].as_f64()) * inv);
            }
        }
        out
    }
}
