use tempgan::nn::{Conv3x3, PaddedBatch};
use tempgan::rng::Rng;

fn main() {
    let mut rng = Rng::new(1);
    let (cin, cout, d) = (12usize, 6usize, 32usize);
    let mut conv = Conv3x3::<f32>::new(cin, cout, &mut rng);
    let mut x = PaddedBatch::<f32>::zeros(1, cin, d, d, d);
    x.data_mut().iter_mut().for_each(|v| *v = 0.1);
    x.zero_pad_ring();
    let reps = 100;
    let t0 = std::time::Instant::now();
    let mut sink = 0.0f32;
    for _ in 0..reps {
        let y = conv.forward(&x, false);
        sink += y.get(0, 0, 0, 0, 0);
    }
    let dt = t0.elapsed().as_secs_f64();
    let macs = (cin * cout * 27 * d * d * d * reps) as f64;
    println!("lib fwd: {:.2} ms/call, {:.2} GMAC/s (sink {sink})", dt * 1000.0 / reps as f64, macs / dt / 1e9);
}
