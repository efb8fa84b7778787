//! Discriminators: residual average-pool downsampling blocks, optional
//! self-attention, global-sum head. The image discriminator takes one
//! channel; the temporal discriminator is the same network with three.

use super::{add_batches, NetConfig, NetError};
use crate::nn::{
    avgpool2, avgpool2_backward, global_sum, global_sum_backward, relu, relu_backward,
    AttentionTrace, BufferVisitor, Conv1x1, Conv3x3, Linear, PaddedBatch, ParamVisitor, Scalar,
    SelfAttention,
};
use crate::rng::Rng;

struct DiscBlock<T> {
    conv1: Conv3x3<T>,
    conv2: Conv3x3<T>,
    skip: Conv1x1<T>,
    first: bool,
}

impl<T: Scalar> DiscBlock<T> {
    fn new(cin: usize, cout: usize, first: bool, sn: bool, rng: &mut Rng) -> Self {
        let mut conv1 = Conv3x3::new(cin, cout, rng);
        let mut conv2 = Conv3x3::new(cout, cout, rng);
        let mut skip = Conv1x1::new(cin, cout, rng);
        if sn {
            conv1 = conv1.with_spectral_norm(rng);
            conv2 = conv2.with_spectral_norm(rng);
            skip = skip.with_spectral_norm(rng);
        }
        DiscBlock {
            conv1,
            conv2,
            skip,
            first,
        }
    }

    fn forward_infer(&mut self, x: &PaddedBatch<T>, update_sn: bool) -> PaddedBatch<T> {
        let h1 = if self.first {
            self.conv1.forward(x, update_sn)
        } else {
            let a = relu(x);
            self.conv1.forward(&a, update_sn)
        };
        let r = relu(&h1);
        drop(h1);
        let p = avgpool2(&r);
        drop(r);
        let h2 = self.conv2.forward(&p, update_sn);
        drop(p);
        let px = avgpool2(x);
        let s = self.skip.forward(&px, update_sn);
        add_batches(&h2, &s)
    }

    fn forward_train(
        &mut self,
        x: PaddedBatch<T>,
        update_sn: bool,
    ) -> (PaddedBatch<T>, DiscBlockTrace<T>) {
        let a = if self.first { x.clone() } else { relu(&x) };
        let h1 = self.conv1.forward(&a, update_sn);
        let r = relu(&h1);
        drop(h1);
        let p = avgpool2(&r);
        let h2 = self.conv2.forward(&p, update_sn);
        let px = avgpool2(&x);
        let s = self.skip.forward(&px, update_sn);
        let y = add_batches(&h2, &s);
        (y, DiscBlockTrace { x, a, r, p, px })
    }

    fn backward(&mut self, tr: &DiscBlockTrace<T>, gy: &PaddedBatch<T>) -> PaddedBatch<T> {
        let dp = self.conv2.backward(&tr.p, gy);
        let dr = avgpool2_backward(&dp);
        let dh1 = relu_backward(&tr.r, &dr);
        let da = self.conv1.backward(&tr.a, &dh1);
        let dx_main = if self.first {
            da
        } else {
            relu_backward(&tr.x, &da)
        };
        let dpx = self.skip.backward(&tr.px, gy);
        let dx_skip = avgpool2_backward(&dpx);
        add_batches(&dx_main, &dx_skip)
    }
}

struct DiscBlockTrace<T> {
    x: PaddedBatch<T>,
    a: PaddedBatch<T>,
    r: PaddedBatch<T>,
    p: PaddedBatch<T>,
    px: PaddedBatch<T>,
}

/// Saved activations of one training forward.
pub struct DiscTrace<T> {
    blocks: Vec<DiscBlockTrace<T>>,
    attn: Option<AttentionTrace<T>>,
    y_last: PaddedBatch<T>,
    feats: Vec<T>,
    n: usize,
}

pub struct DiscriminatorNet<T> {
    cfg: NetConfig,
    in_channels: usize,
    blocks: Vec<DiscBlock<T>>,
    attn: Option<SelfAttention<T>>,
    attn_after: usize,
    head: Linear<T>,
}

impl<T: Scalar> DiscriminatorNet<T> {
    /// `in_channels` is 1 for the image discriminator, 3 for the temporal
    /// one.
    pub fn new(cfg: NetConfig, in_channels: usize, rng: &mut Rng) -> Result<Self, NetError> {
        cfg.validate()?;
        let sn = cfg.spectral_norm;
        let blocks: Vec<DiscBlock<T>> = (0..cfg.num_levels)
            .map(|i| {
                let cin = if i == 0 { in_channels } else { cfg.disc_ch(i - 1) };
                DiscBlock::new(cin, cfg.disc_ch(i), i == 0, sn, rng)
            })
            .collect();
        let attn_after = cfg.disc_attention_index();
        let attn = attn_after.map(|i| {
            let a = SelfAttention::new(cfg.disc_ch(i), rng);
            if sn {
                a.with_spectral_norm(rng)
            } else {
                a
            }
        });
        let mut head = Linear::new(cfg.disc_ch(cfg.num_levels - 1), 1, rng);
        if sn {
            head = head.with_spectral_norm(rng);
        }
        Ok(DiscriminatorNet {
            cfg,
            in_channels,
            blocks,
            attn,
            attn_after: attn_after.unwrap_or(usize::MAX),
            head,
        })
    }

    pub fn cfg(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    /// Inference scores for a batch.
    pub fn forward(&mut self, x: &PaddedBatch<T>, update_sn: bool) -> Vec<f64> {
        assert_eq!(x.channels(), self.in_channels, "discriminator input channels");
        let n = x.n();
        let mut h = self.blocks[0].forward_infer(x, update_sn);
        if self.attn_after == 0 {
            h = self.attn.as_mut().expect("attention").forward(&h, update_sn);
        }
        for i in 1..self.blocks.len() {
            h = self.blocks[i].forward_infer(&h, update_sn);
            if i == self.attn_after {
                let attn = self.attn.as_mut().expect("attention");
                h = attn.forward(&h, update_sn);
            }
        }
        let r = relu(&h);
        drop(h);
        let feats = global_sum(&r);
        let scores_t = self.head.forward(&feats, n, update_sn);
        scores_t.iter().map(|s| s.as_f64()).collect()
    }

    /// Training forward keeping activations.
    pub fn forward_train(
        &mut self,
        x: &PaddedBatch<T>,
        update_sn: bool,
    ) -> (Vec<f64>, DiscTrace<T>) {
        assert_eq!(x.channels(), self.in_channels, "discriminator input channels");
        let n = x.n();
        let mut h = x.clone();
        let mut traces = Vec::with_capacity(self.blocks.len());
        let mut attn_trace = None;
        for i in 0..self.blocks.len() {
            let (next, tr) = self.blocks[i].forward_train(h, update_sn);
            h = next;
            traces.push(tr);
            if i == self.attn_after {
                let attn = self.attn.as_mut().expect("attention");
                let (next, tr) = attn.forward_train(&h, update_sn);
                h = next;
                attn_trace = Some(tr);
            }
        }
        let r = relu(&h);
        let feats = global_sum(&r);
        let scores_t = self.head.forward(&feats, n, update_sn);
        let scores: Vec<f64> = scores_t.iter().map(|s| s.as_f64()).collect();
        (
            scores,
            DiscTrace {
                blocks: traces,
                attn: attn_trace,
                y_last: h,
                feats,
                n,
            },
        )
    }

    /// Backpropagate per-item score gradients; accumulates parameter
    /// gradients and returns dL/dx.
    pub fn backward(&mut self, trace: &DiscTrace<T>, g_scores: &[f64]) -> PaddedBatch<T> {
        assert_eq!(g_scores.len(), trace.n);
        let g_vec: Vec<T> = g_scores.iter().map(|&g| T::from_f64(g)).collect();
        let gf = self.head.backward(&trace.feats, &g_vec, trace.n);
        let g = global_sum_backward(
            &gf,
            trace.n,
            trace.y_last.channels(),
            trace.y_last.depth(),
            trace.y_last.height(),
            trace.y_last.width(),
        );
        let mut g = relu_backward(&trace.y_last, &g);
        for i in (0..self.blocks.len()).rev() {
            if i == self.attn_after {
                let attn = self.attn.as_mut().expect("attention");
                g = attn.backward(trace.attn.as_ref().expect("attention trace"), &g);
            }
            g = self.blocks[i].backward(&trace.blocks[i], &g);
        }
        g
    }

    /// Largest power-iteration sigma estimate across spectrally normalized
    /// layers (diagnostic).
    pub fn max_sigma(&self) -> f64 {
        let mut m = 0.0f64;
        for b in &self.blocks {
            m = m.max(b.conv1.spectral_sigma());
            m = m.max(b.conv2.spectral_sigma());
            m = m.max(b.skip.spectral_sigma());
        }
        m.max(self.head.spectral_sigma())
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.conv1.visit_params(&format!("{prefix}/block{i}/conv1"), f);
            b.conv2.visit_params(&format!("{prefix}/block{i}/conv2"), f);
            b.skip.visit_params(&format!("{prefix}/block{i}/skip"), f);
        }
        if let Some(attn) = &mut self.attn {
            attn.visit_params(&format!("{prefix}/attention"), f);
        }
        self.head.visit_params(&format!("{prefix}/head"), f);
    }

    pub fn visit_buffers(&mut self, prefix: &str, f: &mut BufferVisitor<'_, T>) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.conv1.visit_buffers(&format!("{prefix}/block{i}/conv1"), f);
            b.conv2.visit_buffers(&format!("{prefix}/block{i}/conv2"), f);
            b.skip.visit_buffers(&format!("{prefix}/block{i}/skip"), f);
        }
        if let Some(attn) = &mut self.attn {
            attn.visit_buffers(&format!("{prefix}/attention"), f);
        }
        self.head.visit_buffers(&format!("{prefix}/head"), f);
    }

    pub fn zero_grads(&mut self) {
        self.visit_params("d", &mut |_, p| p.zero_grad());
    }

    pub fn param_count(&mut self) -> usize {
        let mut count = 0;
        self.visit_params("d", &mut |_, p| count += p.len());
        count
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume_io::Dims;

    fn tiny_cfg(sn: bool) -> NetConfig {
        NetConfig {
            latent_size: 6,
            base_channels: 2,
            num_levels: 2,
            volume_dims: Dims::cubic(8),
            use_self_attention: true,
            attention_level: Some(0),
            spectral_norm: sn,
        }
    }

    fn random_input(rng: &mut Rng, n: usize, c: usize, s: usize) -> PaddedBatch<f64> {
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
    fn scores_are_finite_and_deterministic() {
        let mut rng = Rng::new(70);
        let mut d = DiscriminatorNet::<f64>::new(tiny_cfg(true), 1, &mut rng).unwrap();
        let x = random_input(&mut rng, 3, 1, 8);
        let a = d.forward(&x, false);
        let b = d.forward(&x, false);
        assert_eq!(a.len(), 3);
        assert!(a.iter().all(|s| s.is_finite()));
        assert_eq!(a, b);
    }

    #[test]
    fn batch_scores_are_order_equivariant() {
        let mut rng = Rng::new(71);
        let mut d = DiscriminatorNet::<f64>::new(tiny_cfg(false), 1, &mut rng).unwrap();
        let x = random_input(&mut rng, 2, 1, 8);
        let scores = d.forward(&x, false);
        // Swap items and rescore.
        let mut swapped = PaddedBatch::zeros(2, 1, 8, 8, 8);
        for z in 0..8 {
            for y in 0..8 {
                for xx in 0..8 {
                    swapped.set(0, 0, z, y, xx, x.get(1, 0, z, y, xx));
                    swapped.set(1, 0, z, y, xx, x.get(0, 0, z, y, xx));
                }
            }
        }
        let s2 = d.forward(&swapped, false);
        assert!((scores[0] - s2[1]).abs() < 1e-9);
        assert!((scores[1] - s2[0]).abs() < 1e-9);
    }

    #[test]
    fn triplet_scores_are_order_sensitive() {
        let mut rng = Rng::new(72);
        let mut d = DiscriminatorNet::<f64>::new(tiny_cfg(false), 3, &mut rng).unwrap();
        let x = random_input(&mut rng, 1, 3, 8);
        // Reverse channel order.
        let mut rev = PaddedBatch::zeros(1, 3, 8, 8, 8);
        for ch in 0..3 {
            for z in 0..8 {
                for y in 0..8 {
                    for xx in 0..8 {
                        rev.set(0, 2 - ch, z, y, xx, x.get(0, ch, z, y, xx));
                    }
                }
            }
        }
        let a = d.forward(&x, false)[0];
        let b = d.forward(&rev, false)[0];
        assert!((a - b).abs() > 1e-9, "order-insensitive scores {a} vs {b}");
    }

    #[test]
    fn param_count_matches_hand_arithmetic() {
        let mut rng = Rng::new(73);
        let cfg = NetConfig::desk_default();
        let mut d = DiscriminatorNet::<f32>::new(cfg, 1, &mut rng).unwrap();
        let block = |cin: usize, cout: usize| {
            cout * cin * 27 + cout + cout * cout * 27 + cout + cout * cin
        };
        // Blocks 1->16, 16->32, 32->64; attention at c=32; head 64 -> 1.
        let expected = block(1, 16)
            + block(16, 32)
            + block(32, 64)
            + (4 * 32 + 4 * 32 + 16 * 32 + 32 * 16 + 1)
            + (64 + 1);
        assert_eq!(d.param_count(), expected);
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut rng = Rng::new(74);
        // Spectral norm ON with frozen u, v (update_sn = false) is part of
        // the differentiable path and must check out too.
        let mut d = DiscriminatorNet::<f64>::new(tiny_cfg(true), 3, &mut rng).unwrap();
        if let Some(attn) = &mut d.attn {
            attn.gamma.value[0] = 0.3;
        }
        let x = random_input(&mut rng, 1, 3, 8);
        let (_, trace) = d.forward_train(&x, false);
        let gx = d.backward(&trace, &[1.0]);
        let h = 1e-6;
        let mut checked = 0;
        for (ch, z, y, xx) in [(0usize, 1usize, 2usize, 3usize), (1, 0, 4, 7), (2, 5, 6, 0)] {
            let mut xp = x.clone();
            xp.set(0, ch, z, y, xx, x.get(0, ch, z, y, xx) + h);
            let mut xm = x.clone();
            xm.set(0, ch, z, y, xx, x.get(0, ch, z, y, xx) - h);
            let fd = (d.forward(&xp, false)[0] - d.forward(&xm, false)[0]) / (2.0 * h);
            let an = gx.get(0, ch, z, y, xx);
            let rel = (fd - an).abs() / (1.0 + fd.abs());
            assert!(rel <= 1e-3, "voxel {ch},{z},{y},{xx}: fd {fd} analytic {an}");
            checked += 1;
        }
        assert_eq!(checked, 3);
    }
}
