//! Fully connected layer over batches of vectors.

use super::{gemm, Param, ParamVisitor, Scalar, SpectralNorm};
use crate::rng::Rng;

#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub w: Param<T>,
    pub b: Param<T>,
    pub cin: usize,
    pub cout: usize,
    sn: Option<SpectralNorm<T>>,
    w_eff: Vec<T>,
    sigma: f64,
}

impl<T: Scalar> Linear<T> {
    pub fn new(cin: usize, cout: usize, rng: &mut Rng) -> Self {
        Linear {
            w: Param::he_normal(vec![cout, cin], cin, rng),
            b: Param::zeros(vec![cout]),
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

    fn weight(&self) -> &[T] {
        if self.sn.is_some() {
            &self.w_eff
        } else {
            &self.w.value
        }
    }

    /// x is (n x cin) row-major; returns (n x cout).
    pub fn forward(&mut self, x: &[T], n: usize, update_sn: bool) -> Vec<T> {
        debug_assert_eq!(x.len(), n * self.cin);
        self.resolve_weight(update_sn);
        let mut y = vec![T::zero(); n * self.cout];
        for i in 0..n {
            y[i * self.cout..(i + 1) * self.cout].copy_from_slice(&self.b.value);
        }
        gemm(
            n,
            self.cin,
            self.cout,
            1.0,
            (x, 0, self.cin, 1),
            (self.weight(), 0, 1, self.cin),
            1.0,
            (&mut y, 0, self.cout, 1),
        );
        y
    }

    /// Returns dL/dx and accumulates dL/dw, dL/db.
    pub fn backward(&mut self, x: &[T], gy: &[T], n: usize) -> Vec<T> {
        debug_assert_eq!(gy.len(), n * self.cout);
        let mut gx = vec![T::zero(); n * self.cin];
        gemm(
            n,
            self.cout,
            self.cin,
            1.0,
            (gy, 0, self.cout, 1),
            (self.weight(), 0, self.cin, 1),
            0.0,
            (&mut gx, 0, self.cin, 1),
        );
        let mut dw_eff = vec![T::zero(); self.cout * self.cin];
        gemm(
            self.cout,
            n,
            self.cin,
            1.0,
            (gy, 0, 1, self.cout),
            (x, 0, self.cin, 1),
            0.0,
            (&mut dw_eff, 0, self.cin, 1),
        );
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
        for i in 0..n {
            for o in 0..self.cout {
                self.b.grad[o] = self.b.grad[o] + gy[i * self.cout + o];
            }
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
