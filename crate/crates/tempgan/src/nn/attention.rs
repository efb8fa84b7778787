//! Self-attention over all voxel positions of a feature map.
//!
//! Query/key use c/8 channels, value c/2, with an output projection back to
//! c and a zero-initialized scale so the block starts as the identity:
//! y = x + gamma * Wo (V softmax(Q^T K)^T). Attention logits are unscaled.

use super::batch::PaddedBatch;
use super::{gemm, Param, ParamVisitor, Scalar, SpectralNorm};
use crate::rng::Rng;

/// One projection weight with optional spectral normalization.
#[derive(Debug, Clone)]
struct Proj<T> {
    p: Param<T>,
    rows: usize,
    cols: usize,
    sn: Option<SpectralNorm<T>>,
    w_eff: Vec<T>,
    sigma: f64,
}

impl<T: Scalar> Proj<T> {
    fn new(rows: usize, cols: usize, rng: &mut Rng) -> Self {
        Proj {
            p: Param::he_normal(vec![rows, cols], cols, rng),
            rows,
            cols,
            sn: None,
            w_eff: Vec::new(),
            sigma: 1.0,
        }
    }

    fn spectral(mut self, rng: &mut Rng) -> Self {
        self.sn = Some(SpectralNorm::new(&self.p.value, self.rows, self.cols, rng));
        self
    }

    fn resolve(&mut self, update_sn: bool) {
        if let Some(sn) = &mut self.sn {
            let (w_eff, sigma) = sn.effective(&self.p.value, self.rows, self.cols, update_sn);
            self.w_eff = w_eff;
            self.sigma = sigma;
        }
    }

    fn weight(&self) -> &[T] {
        if self.sn.is_some() {
            &self.w_eff
        } else {
            &self.p.value
        }
    }

    fn accumulate(&mut self, dw_eff: &[T]) {
        match &self.sn {
            Some(sn) => {
                let dw = sn.grad_raw(dw_eff, &self.w_eff, self.sigma);
                for (g, v) in self.p.grad.iter_mut().zip(&dw) {
                    *g = *g + *v;
                }
            }
            None => {
                for (g, v) in self.p.grad.iter_mut().zip(dw_eff) {
                    *g = *g + *v;
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct SelfAttention<T> {
    c: usize,
    cq: usize,
    cv: usize,
    wq: Proj<T>,
    wk: Proj<T>,
    wv: Proj<T>,
    wo: Proj<T>,
    pub gamma: Param<T>,
}

/// Saved per-item intermediates for the backward pass.
pub struct AttentionTrace<T> {
    items: Vec<ItemTrace<T>>,
}

struct ItemTrace<T> {
    x: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    p: Vec<T>,
    o: Vec<T>,
    z: Vec<T>,
}

impl<T: Scalar> SelfAttention<T> {
    pub fn new(c: usize, rng: &mut Rng) -> Self {
        let cq = (c / 8).max(1);
        let cv = (c / 2).max(1);
        SelfAttention {
            c,
            cq,
            cv,
            wq: Proj::new(cq, c, rng),
            wk: Proj::new(cq, c, rng),
            wv: Proj::new(cv, c, rng),
            wo: Proj::new(c, cv, rng),
            gamma: Param::zeros(vec![1]),
        }
    }

    pub fn with_spectral_norm(mut self, rng: &mut Rng) -> Self {
        self.wq = self.wq.spectral(rng);
        self.wk = self.wk.spectral(rng);
        self.wv = self.wv.spectral(rng);
        self.wo = self.wo.spectral(rng);
        self
    }

    fn resolve(&mut self, update_sn: bool) {
        self.wq.resolve(update_sn);
        self.wk.resolve(update_sn);
        self.wv.resolve(update_sn);
        self.wo.resolve(update_sn);
    }

    fn item_pass(&self, x: Vec<T>, n_pos: usize) -> ItemTrace<T> {
        let (c, cq, cv) = (self.c, self.cq, self.cv);
        let proj = |w: &[T], rows: usize, x: &[T]| -> Vec<T> {
            let mut out = vec![T::zero(); rows * n_pos];
            gemm(
                rows,
                c,
                n_pos,
                1.0,
                (w, 0, c, 1),
                (x, 0, n_pos, 1),
                0.0,
                (&mut out, 0, n_pos, 1),
            );
            out
        };
        let q = proj(self.wq.weight(), cq, &x);
        let k = proj(self.wk.weight(), cq, &x);
        let v = proj(self.wv.weight(), cv, &x);

        // Logits A[i, j] = q[:, i] . k[:, j], softmax over j.
        let mut p = vec![T::zero(); n_pos * n_pos];
        gemm(
            n_pos,
            cq,
            n_pos,
            1.0,
            (&q, 0, 1, n_pos),
            (&k, 0, n_pos, 1),
            0.0,
            (&mut p, 0, n_pos, 1),
        );
        for row in p.chunks_mut(n_pos) {
            let mut m = f64::NEG_INFINITY;
            for v in row.iter() {
                m = m.max(v.as_f64());
            }
            let mut sum = 0.0;
            for v in row.iter_mut() {
                let e = (v.as_f64() - m).exp();
                sum += e;
                *v = T::from_f64(e);
            }
            let inv = T::from_f64(1.0 / sum);
            row.iter_mut().for_each(|v| *v = *v * inv);
        }

        // O[:, i] = sum_j P[i, j] V[:, j].
        let mut o = vec![T::zero(); cv * n_pos];
        gemm(
            cv,
            n_pos,
            n_pos,
            1.0,
            (&v, 0, n_pos, 1),
            (&p, 0, 1, n_pos),
            0.0,
            (&mut o, 0, n_pos, 1),
        );
        let mut z = vec![T::zero(); c * n_pos];
        gemm(
            c,
            cv,
            n_pos,
            1.0,
            (self.wo.weight(), 0, cv, 1),
            (&o, 0, n_pos, 1),
            0.0,
            (&mut z, 0, n_pos, 1),
        );
        ItemTrace { x, q, k, v, p, o, z }
    }

    /// Forward without trace (inference).
    pub fn forward(&mut self, x: &PaddedBatch<T>, update_sn: bool) -> PaddedBatch<T> {
        let (y, _) = self.forward_train(x, update_sn);
        y
    }

    /// Forward keeping per-item intermediates for `backward`.
    pub fn forward_train(
        &mut self,
        x: &PaddedBatch<T>,
        update_sn: bool,
    ) -> (PaddedBatch<T>, AttentionTrace<T>) {
        assert_eq!(x.channels(), self.c);
        self.resolve(update_sn);
        let n_pos = x.interior_len();
        let n = x.n();

        let compute = |i: usize| -> ItemTrace<T> {
            let mut xi = vec![T::zero(); self.c * n_pos];
            x.gather_interior(i, &mut xi);
            self.item_pass(xi, n_pos)
        };
        let items: Vec<ItemTrace<T>> = if super::serial_mode() || n <= 1 {
            (0..n).map(compute).collect()
        } else {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(compute).collect()
        };

        let mut y = x.clone();
        let gamma = self.gamma.value[0];
        for (i, item) in items.iter().enumerate() {
            y.scatter_interior_add(i, &item.z, gamma);
        }
        (y, AttentionTrace { items })
    }

    /// Gradients through the attention block; accumulates weight and gamma
    /// gradients and returns dL/dx.
    pub fn backward(&mut self, trace: &AttentionTrace<T>, gy: &PaddedBatch<T>) -> PaddedBatch<T> {
        let n = gy.n();
        let n_pos = gy.interior_len();
        let (c, cq, cv) = (self.c, self.cq, self.cv);
        let gamma = self.gamma.value[0];

        struct ItemGrads<T> {
            dx: Vec<T>,
            dwq: Vec<T>,
            dwk: Vec<T>,
            dwv: Vec<T>,
            dwo: Vec<T>,
            dgamma: f64,
        }

        let compute = |i: usize| -> ItemGrads<T> {
            let t = &trace.items[i];
            let mut g = vec![T::zero(); c * n_pos];
            gy.gather_interior(i, &mut g);

            let dgamma: f64 = g
                .iter()
                .zip(&t.z)
                .map(|(a, b)| a.as_f64() * b.as_f64())
                .sum();

            // dZ = gamma * G
            let dz: Vec<T> = g.iter().map(|&v| v * gamma).collect();

            // dWo = dZ . O^T ; dO = Wo^T . dZ
            let mut dwo = vec![T::zero(); c * cv];
            gemm(
                c,
                n_pos,
                cv,
                1.0,
                (&dz, 0, n_pos, 1),
                (&t.o, 0, 1, n_pos),
                0.0,
                (&mut dwo, 0, cv, 1),
            );
            let mut d_o = vec![T::zero(); cv * n_pos];
            gemm(
                cv,
                c,
                n_pos,
                1.0,
                (self.wo.weight(), 0, 1, cv),
                (&dz, 0, n_pos, 1),
                0.0,
                (&mut d_o, 0, n_pos, 1),
            );

            // dV = dO . P ; dP = dO^T . V
            let mut dv = vec![T::zero(); cv * n_pos];
            gemm(
                cv,
                n_pos,
                n_pos,
                1.0,
                (&d_o, 0, n_pos, 1),
                (&t.p, 0, n_pos, 1),
                0.0,
                (&mut dv, 0, n_pos, 1),
            );
            let mut dp = vec![T::zero(); n_pos * n_pos];
            gemm(
                n_pos,
                cv,
                n_pos,
                1.0,
                (&d_o, 0, 1, n_pos),
                (&t.v, 0, n_pos, 1),
                0.0,
                (&mut dp, 0, n_pos, 1),
            );

            // Softmax backward per row: dA = P .* (dP - rowdot(dP, P)).
            let mut da = dp;
            for (row_da, row_p) in da.chunks_mut(n_pos).zip(t.p.chunks(n_pos)) {
                let dot: f64 = row_da
                    .iter()
                    .zip(row_p)
                    .map(|(a, b)| a.as_f64() * b.as_f64())
                    .sum();
                for (a, &pv) in row_da.iter_mut().zip(row_p) {
                    *a = T::from_f64(pv.as_f64() * (a.as_f64() - dot));
                }
            }

            // dQ = K . dA^T ; dK = Q . dA
            let mut dq = vec![T::zero(); cq * n_pos];
            gemm(
                cq,
                n_pos,
                n_pos,
                1.0,
                (&t.k, 0, n_pos, 1),
                (&da, 0, 1, n_pos),
                0.0,
                (&mut dq, 0, n_pos, 1),
            );
            let mut dk = vec![T::zero(); cq * n_pos];
            gemm(
                cq,
                n_pos,
                n_pos,
                1.0,
                (&t.q, 0, n_pos, 1),
                (&da, 0, n_pos, 1),
                0.0,
                (&mut dk, 0, n_pos, 1),
            );

            // Projection weight grads and the input gradient.
            let outer = |d: &[T], rows: usize| -> Vec<T> {
                let mut dw = vec![T::zero(); rows * c];
                gemm(
                    rows,
                    n_pos,
                    c,
                    1.0,
                    (d, 0, n_pos, 1),
                    (&t.x, 0, 1, n_pos),
                    0.0,
                    (&mut dw, 0, c, 1),
                );
                dw
            };
            let dwq = outer(&dq, cq);
            let dwk = outer(&dk, cq);
            let dwv = outer(&dv, cv);

            let mut dx = g; // identity path
            let add_back = |w: &[T], rows: usize, d: &[T], dx: &mut [T]| {
                gemm(
                    c,
                    rows,
                    n_pos,
                    1.0,
                    (w, 0, 1, c),
                    (d, 0, n_pos, 1),
                    1.0,
                    (dx, 0, n_pos, 1),
                );
            };
            add_back(self.wq.weight(), cq, &dq, &mut dx);
            add_back(self.wk.weight(), cq, &dk, &mut dx);
            add_back(self.wv.weight(), cv, &dv, &mut dx);

            ItemGrads {
                dx,
                dwq,
                dwk,
                dwv,
                dwo,
                dgamma,
            }
        };

        let grads: Vec<ItemGrads<T>> = if super::serial_mode() || n <= 1 {
            (0..n).map(compute).collect()
        } else {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(compute).collect()
        };

        let mut gx = PaddedBatch::zeros(n, c, gy.depth(), gy.height(), gy.width());
        let mut dwq = vec![T::zero(); cq * c];
        let mut dwk = vec![T::zero(); cq * c];
        let mut dwv = vec![T::zero(); cv * c];
        let mut dwo = vec![T::zero(); c * cv];
        let mut dgamma = 0.0f64;
        for (i, g) in grads.iter().enumerate() {
            gx.scatter_interior_add(i, &g.dx, T::one());
            for (a, b) in dwq.iter_mut().zip(&g.dwq) {
                *a = *a + *b;
            }
            for (a, b) in dwk.iter_mut().zip(&g.dwk) {
                *a = *a + *b;
            }
            for (a, b) in dwv.iter_mut().zip(&g.dwv) {
                *a = *a + *b;
            }
            for (a, b) in dwo.iter_mut().zip(&g.dwo) {
                *a = *a + *b;
            }
            dgamma += g.dgamma;
        }
        self.wq.accumulate(&dwq);
        self.wk.accumulate(&dwk);
        self.wv.accumulate(&dwv);
        self.wo.accumulate(&dwo);
        self.gamma.grad[0] = self.gamma.grad[0] + T::from_f64(dgamma);
        gx
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        f(format!("{prefix}/query/weight"), &mut self.wq.p);
        f(format!("{prefix}/key/weight"), &mut self.wk.p);
        f(format!("{prefix}/value/weight"), &mut self.wv.p);
        f(format!("{prefix}/out/weight"), &mut self.wo.p);
        f(format!("{prefix}/gamma"), &mut self.gamma);
    }

    pub fn visit_buffers(&mut self, prefix: &str, f: &mut super::BufferVisitor<'_, T>) {
        for (name, proj) in [
            ("query", &mut self.wq),
            ("key", &mut self.wk),
            ("value", &mut self.wv),
            ("out", &mut self.wo),
        ] {
            if let Some(sn) = &mut proj.sn {
                f(format!("{prefix}/{name}/sn_u"), &mut sn.u);
                f(format!("{prefix}/{name}/sn_v"), &mut sn.v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_batch(rng: &mut Rng, n: usize, c: usize, s: usize) -> PaddedBatch<f64> {
        let mut b = PaddedBatch::zeros(n, c, s, s, s);
        for i in 0..n {
            for ch in 0..c {
                for z in 0..s {
                    for y in 0..s {
                        for x in 0..s {
                            b.set(i, ch, z, y, x, rng.normal() * 0.5);
                        }
                    }
                }
            }
        }
        b
    }

    #[test]
    fn zero_gamma_is_identity() {
        let mut rng = Rng::new(40);
        let mut attn = SelfAttention::<f64>::new(8, &mut rng);
        let x = random_batch(&mut rng, 2, 8, 2);
        let y = attn.forward(&x, false);
        for (a, b) in y.data().iter().zip(x.data()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = Rng::new(41);
        let mut attn = SelfAttention::<f64>::new(8, &mut rng);
        let x = random_batch(&mut rng, 1, 8, 2);
        let (_, trace) = attn.forward_train(&x, false);
        let n_pos = x.interior_len();
        for row in trace.items[0].p.chunks(n_pos) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = Rng::new(42);
        let mut attn = SelfAttention::<f64>::new(4, &mut rng);
        attn.gamma.value[0] = 0.7; // nonzero so the attention path matters
        let x = random_batch(&mut rng, 1, 4, 2);
        let gy = random_batch(&mut rng, 1, 4, 2);
        let mut coefs = vec![0.0; gy.data().len()];
        coefs.copy_from_slice(gy.data());

        let loss = |attn: &mut SelfAttention<f64>, x: &PaddedBatch<f64>| -> f64 {
            let y = attn.forward(x, false);
            y.data().iter().zip(&coefs).map(|(a, b)| a * b).sum()
        };

        let (_, trace) = attn.forward_train(&x, false);
        let gx = attn.backward(&trace, &gy);

        let h = 1e-6;
        // Input gradient at several voxels.
        for (ch, z, yy, xx) in [(0, 0, 0, 0), (1, 1, 0, 1), (3, 0, 1, 1)] {
            let mut xp = x.clone();
            xp.set(0, ch, z, yy, xx, x.get(0, ch, z, yy, xx) + h);
            let mut xm = x.clone();
            xm.set(0, ch, z, yy, xx, x.get(0, ch, z, yy, xx) - h);
            let fd = (loss(&mut attn, &xp) - loss(&mut attn, &xm)) / (2.0 * h);
            let an = gx.get(0, ch, z, yy, xx);
            assert!(
                (fd - an).abs() < 1e-5 * (1.0 + fd.abs()),
                "dx at {ch},{z},{yy},{xx}: {fd} vs {an}"
            );
        }
        // Weight and gamma gradients.
        let check_param = |attn: &mut SelfAttention<f64>,
                           which: usize,
                           idx: usize,
                           x: &PaddedBatch<f64>| {
            let read = |attn: &SelfAttention<f64>| match which {
                0 => attn.wq.p.value[idx],
                1 => attn.wk.p.value[idx],
                2 => attn.wv.p.value[idx],
                3 => attn.wo.p.value[idx],
                _ => attn.gamma.value[0],
            };
            let write = |attn: &mut SelfAttention<f64>, v: f64| match which {
                0 => attn.wq.p.value[idx] = v,
                1 => attn.wk.p.value[idx] = v,
                2 => attn.wv.p.value[idx] = v,
                3 => attn.wo.p.value[idx] = v,
                _ => attn.gamma.value[0] = v,
            };
            let grad = |attn: &SelfAttention<f64>| match which {
                0 => attn.wq.p.grad[idx],
                1 => attn.wk.p.grad[idx],
                2 => attn.wv.p.grad[idx],
                3 => attn.wo.p.grad[idx],
                _ => attn.gamma.grad[0],
            };
            let orig = read(attn);
            write(attn, orig + h);
            let lp = loss(attn, x);
            write(attn, orig - h);
            let lm = loss(attn, x);
            write(attn, orig);
            let fd = (lp - lm) / (2.0 * h);
            let an = grad(attn);
            assert!(
                (fd - an).abs() < 1e-5 * (1.0 + fd.abs()),
                "param {which}[{idx}]: {fd} vs {an}"
            );
        };
        check_param(&mut attn, 0, 1, &x);
        check_param(&mut attn, 1, 2, &x);
        check_param(&mut attn, 2, 3, &x);
        check_param(&mut attn, 3, 0, &x);
        check_param(&mut attn, 4, 0, &x);
    }
}
