//! The image generator: latent projection, residual upsampling blocks,
//! optional self-attention, saturating output.

use super::{add_batches, NetConfig, NetError};
use crate::nn::{
    relu, relu_backward, tanh, tanh_backward, upsample2, upsample2_backward, AttentionTrace,
    BufferVisitor, Conv1x1, Conv3x3, Linear, PaddedBatch, ParamVisitor, Scalar, SelfAttention,
};
use crate::rng::Rng;

struct GenBlock<T> {
    conv1: Conv3x3<T>,
    conv2: Conv3x3<T>,
    skip: Conv1x1<T>,
}

impl<T: Scalar> GenBlock<T> {
    fn new(cin: usize, cout: usize, rng: &mut Rng) -> Self {
        GenBlock {
            conv1: Conv3x3::new(cin, cout, rng),
            conv2: Conv3x3::new(cout, cout, rng),
            skip: Conv1x1::new(cin, cout, rng),
        }
    }

    fn forward_infer(&mut self, x: &PaddedBatch<T>) -> PaddedBatch<T> {
        let r1 = relu(x);
        let u1 = upsample2(&r1);
        drop(r1);
        let h1 = self.conv1.forward(&u1, false);
        drop(u1);
        let r2 = relu(&h1);
        drop(h1);
        let h2 = self.conv2.forward(&r2, false);
        drop(r2);
        let ux = upsample2(x);
        let s = self.skip.forward(&ux, false);
        add_batches(&h2, &s)
    }

    fn forward_train(&mut self, x: PaddedBatch<T>) -> (PaddedBatch<T>, GenBlockTrace<T>) {
        let r1 = relu(&x);
        let u1 = upsample2(&r1);
        drop(r1);
        let h1 = self.conv1.forward(&u1, false);
        let r2 = relu(&h1);
        drop(h1);
        let h2 = self.conv2.forward(&r2, false);
        let ux = upsample2(&x);
        let s = self.skip.forward(&ux, false);
        let y = add_batches(&h2, &s);
        (y, GenBlockTrace { x, u1, r2, ux })
    }

    fn backward(&mut self, tr: &GenBlockTrace<T>, gy: &PaddedBatch<T>) -> PaddedBatch<T> {
        let dr2 = self.conv2.backward(&tr.r2, gy);
        let dh1 = relu_backward(&tr.r2, &dr2);
        let du1 = self.conv1.backward(&tr.u1, &dh1);
        let dr1 = upsample2_backward(&du1);
        // relu(x) has the same sign mask as x.
        let dx_main = relu_backward(&tr.x, &dr1);
        let dux = self.skip.backward(&tr.ux, gy);
        let dx_skip = upsample2_backward(&dux);
        add_batches(&dx_main, &dx_skip)
    }
}

struct GenBlockTrace<T> {
    x: PaddedBatch<T>,
    u1: PaddedBatch<T>,
    r2: PaddedBatch<T>,
    ux: PaddedBatch<T>,
}

/// Saved activations of one training forward.
pub struct GenTrace<T> {
    z: Vec<T>,
    n: usize,
    blocks: Vec<GenBlockTrace<T>>,
    attn: Option<AttentionTrace<T>>,
    pre_final: PaddedBatch<T>,
    out: PaddedBatch<T>,
}

pub struct GeneratorNet<T> {
    cfg: NetConfig,
    input: Linear<T>,
    blocks: Vec<GenBlock<T>>,
    attn: Option<SelfAttention<T>>,
    attn_after: usize,
    output: Conv3x3<T>,
}

impl<T: Scalar> GeneratorNet<T> {
    pub fn new(cfg: NetConfig, rng: &mut Rng) -> Result<Self, NetError> {
        cfg.validate()?;
        let base = cfg.base_grid();
        let input = Linear::new(cfg.latent_size, cfg.gen_ch(0) * base.count(), rng);
        let blocks = (0..cfg.num_levels)
            .map(|i| GenBlock::new(cfg.gen_ch(i), cfg.gen_ch(i + 1), rng))
            .collect();
        let attn_after = cfg.gen_attention_index();
        let attn = attn_after.map(|i| SelfAttention::new(cfg.gen_ch(i + 1), rng));
        let output = Conv3x3::new(cfg.gen_ch(cfg.num_levels), 1, rng);
        Ok(GeneratorNet {
            cfg,
            input,
            blocks,
            attn,
            attn_after: attn_after.unwrap_or(usize::MAX),
            output,
        })
    }

    pub fn cfg(&self) -> &NetConfig {
        &self.cfg
    }

    /// Reshape the projection output (n x c0*voxels, channel-major) into a
    /// padded batch on the base grid.
    fn project(&mut self, z: &[T], n: usize) -> PaddedBatch<T> {
        let base = self.cfg.base_grid();
        let c0 = self.cfg.gen_ch(0);
        let flat = self.input.forward(z, n, false);
        let mut h = PaddedBatch::zeros(n, c0, base.z, base.y, base.x);
        for i in 0..n {
            let item = &flat[i * c0 * base.count()..(i + 1) * c0 * base.count()];
            h.scatter_interior_add(i, item, T::one());
        }
        h
    }

    /// Inference forward: z is (n x latent_size) row-major.
    pub fn forward(&mut self, z: &[T], n: usize) -> PaddedBatch<T> {
        let mut h = self.project(z, n);
        for i in 0..self.blocks.len() {
            h = self.blocks[i].forward_infer(&h);
            if i == self.attn_after {
                let attn = self.attn.as_mut().expect("attention index implies attention");
                h = attn.forward(&h, false);
            }
        }
        let r = relu(&h);
        drop(h);
        let pre = self.output.forward(&r, false);
        tanh(&pre)
    }

    /// Training forward, keeping activations for `backward`.
    pub fn forward_train(&mut self, z: &[T], n: usize) -> (PaddedBatch<T>, GenTrace<T>) {
        let mut h = self.project(z, n);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        let mut attn = None;
        for i in 0..self.blocks.len() {
            let (next, tr) = self.blocks[i].forward_train(h);
            h = next;
            blocks.push(tr);
            if i == self.attn_after {
                let a = self.attn.as_mut().expect("attention index implies attention");
                let (next, tr) = a.forward_train(&h, false);
                h = next;
                attn = Some(tr);
            }
        }
        let pre_final = relu(&h);
        drop(h);
        let pre = self.output.forward(&pre_final, false);
        let out = tanh(&pre);
        (
            out.clone(),
            GenTrace {
                z: z.to_vec(),
                n,
                blocks,
                attn,
                pre_final,
                out,
            },
        )
    }

    /// Backpropagate through the trace; accumulates parameter gradients and
    /// returns dL/dz as (n x latent_size).
    pub fn backward(&mut self, trace: &GenTrace<T>, g_out: &PaddedBatch<T>) -> Vec<T> {
        let g = tanh_backward(&trace.out, g_out);
        let g = self.output.backward(&trace.pre_final, &g);
        let mut g = relu_backward(&trace.pre_final, &g);
        for i in (0..self.blocks.len()).rev() {
            if i == self.attn_after {
                let attn = self.attn.as_mut().expect("attention");
                g = attn.backward(trace.attn.as_ref().expect("attention trace"), &g);
            }
            g = self.blocks[i].backward(&trace.blocks[i], &g);
        }
        // Back through the projection reshape.
        let base = self.cfg.base_grid();
        let c0 = self.cfg.gen_ch(0);
        let mut flat_g = vec![T::zero(); trace.n * c0 * base.count()];
        for i in 0..trace.n {
            g.gather_interior(i, &mut flat_g[i * c0 * base.count()..(i + 1) * c0 * base.count()]);
        }
        self.input.backward(&trace.z, &flat_g, trace.n)
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        self.input.visit_params(&format!("{prefix}/input"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.conv1.visit_params(&format!("{prefix}/block{i}/conv1"), f);
            b.conv2.visit_params(&format!("{prefix}/block{i}/conv2"), f);
            b.skip.visit_params(&format!("{prefix}/block{i}/skip"), f);
        }
        if let Some(attn) = &mut self.attn {
            attn.visit_params(&format!("{prefix}/attention"), f);
        }
        self.output.visit_params(&format!("{prefix}/output"), f);
    }

    pub fn visit_buffers(&mut self, prefix: &str, f: &mut BufferVisitor<'_, T>) {
        self.input.visit_buffers(&format!("{prefix}/input"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.conv1.visit_buffers(&format!("{prefix}/block{i}/conv1"), f);
            b.conv2.visit_buffers(&format!("{prefix}/block{i}/conv2"), f);
            b.skip.visit_buffers(&format!("{prefix}/block{i}/skip"), f);
        }
        if let Some(attn) = &mut self.attn {
            attn.visit_buffers(&format!("{prefix}/attention"), f);
        }
        self.output.visit_buffers(&format!("{prefix}/output"), f);
    }

    pub fn zero_grads(&mut self) {
        self.visit_params("g", &mut |_, p| p.zero_grad());
    }

    pub fn param_count(&mut self) -> usize {
        let mut count = 0;
        self.visit_params("g", &mut |_, p| count += p.len());
        count
    }
}
