use std::time::Instant;
use tempgan::networks::{DiscriminatorNet, GeneratorNet, NetConfig};
use tempgan::rng::Rng;
use tempgan::volume_io::Dims;

fn main() {
    let cfg = NetConfig {
        latent_size: 64,
        base_channels: 8,
        num_levels: 3,
        volume_dims: Dims::cubic(32),
        use_self_attention: true,
        attention_level: None,
        spectral_norm: true,
    };
    let mut rng = Rng::new(1);
    let mut g = GeneratorNet::<f32>::new(cfg.clone(), &mut rng).unwrap();
    let mut d = DiscriminatorNet::<f32>::new(cfg.clone(), 1, &mut rng).unwrap();
    let n = 4;
    let z: Vec<f32> = (0..n * 64).map(|_| rng.normal() as f32).collect();

    let reps = 5;
    let t0 = Instant::now();
    for _ in 0..reps { let _ = g.forward(&z, n); }
    println!("G fwd (n={n}):        {:6.1} ms", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    let t0 = Instant::now();
    for _ in 0..reps { let _ = g.forward_train(&z, n); }
    println!("G fwd_train:          {:6.1} ms", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    let (out, trace) = g.forward_train(&z, n);
    let t0 = Instant::now();
    for _ in 0..reps { let _ = g.backward(&trace, &out); }
    println!("G backward:           {:6.1} ms", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    let x = g.forward(&z, n);
    let t0 = Instant::now();
    for _ in 0..reps { let _ = d.forward_train(&x, true); }
    println!("D fwd_train (n={n}):   {:6.1} ms", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    let (_, dtrace) = d.forward_train(&x, true);
    let t0 = Instant::now();
    for _ in 0..reps { let _ = d.backward(&dtrace, &[1.0, 1.0, 1.0, 1.0]); }
    println!("D backward:           {:6.1} ms", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);
}
