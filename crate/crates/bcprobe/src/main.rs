// Verbatim transplant of tempgan's Scalar + conv3x3_fwd_item.
pub trait Scalar:
    num_traits::Float + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static
{
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
    fn fmadd(self, a: Self, b: Self) -> Self;
}
impl Scalar for f32 {
    fn from_f64(x: f64) -> Self { x as f32 }
    fn as_f64(self) -> f64 { self as f64 }
    #[inline(always)]
    fn fmadd(self, a: Self, b: Self) -> Self { f32::mul_add(self, a, b) }
}
const CO_TILE: usize = 4;
const MAX_W: usize = 128;
const LANES: usize = 16;

#[inline(always)]
fn fused3<T: Scalar>(x0: T, x1: T, x2: T, w: &[T; 3], a: T) -> T {
    w[0].fmadd(x0, w[1].fmadd(x1, w[2].fmadd(x2, a)))
}


#[allow(clippy::too_many_arguments)]
#[inline(never)]
fn conv3x3_fwd_item<T: Scalar>(
    x: &[T],
    y: &mut [T],
    w: &[T],
    bias: &[T],
    cin: usize,
    cout: usize,
    d: usize,
    h: usize,
    wd: usize,
) {
    assert!(wd <= MAX_W, "volume width {wd} exceeds kernel limit {MAX_W}");
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

fn main() {
    let (cin, cout, d) = (12usize, 6usize, 32usize);
    let cs = 34 * 34 * 34;
    let x = vec![0.1f32; cin * cs];
    let mut y = vec![0.0f32; cout * cs];
    let w = vec![0.01f32; cout * cin * 27];
    let b = vec![0.0f32; cout];
    let reps = 100;
    let t0 = std::time::Instant::now();
    for _ in 0..reps {
        conv3x3_fwd_item(&x, &mut y, &w, &b, cin, cout, d, d, d);
    }
    let dt = t0.elapsed().as_secs_f64();
    let macs = (cin * cout * 27 * d * d * d * reps) as f64;
    println!("fwd {:.2} ms/call {:.2} GMAC/s (sink {})", dt * 1000.0 / reps as f64, macs / dt / 1e9, y[cs + 35*35]);
}
