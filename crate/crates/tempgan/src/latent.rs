//! Latent codes, the learned linear direction, and shift-magnitude
//! sampling — the latent-walk mechanism that turns one latent vector into
//! an ordered sequence.
//!
//! The direction is stored unnormalized and renormalized at every use, so
//! the optimizer works on an unconstrained vector while every shift sees a
//! unit-length direction.

use thiserror::Error;

use crate::nn::Scalar;
use crate::rng::Rng;

/// Shift magnitudes are drawn uniformly from [-ALPHA_MAX, ALPHA_MAX].
pub const ALPHA_MAX: f64 = 6.0;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LatentError {
    #[error("latent dimension mismatch: {a} vs {b}")]
    DimensionMismatch { a: usize, b: usize },
    #[error("degenerate direction: ||raw|| is zero")]
    DegenerateDirection,
}

/// A latent vector z.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode<T> {
    pub values: Vec<T>,
}

impl<T: Scalar> LatentCode<T> {
    pub fn new(values: Vec<T>) -> Self {
        LatentCode { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Draw from the standard normal prior.
    pub fn sample(rng: &mut Rng, len: usize) -> Self {
        LatentCode {
            values: (0..len).map(|_| T::from_f64(rng.normal())).collect(),
        }
    }
}

/// The trainable direction; the effective direction is `raw` normalized to
/// unit Euclidean length.
#[derive(Debug, Clone, PartialEq)]
pub struct Direction<T> {
    pub raw: Vec<T>,
}

impl<T: Scalar> Direction<T> {
    pub fn new(raw: Vec<T>) -> Self {
        Direction { raw }
    }

    /// Random initial direction on the unit sphere.
    pub fn sample(rng: &mut Rng, len: usize) -> Self {
        loop {
            let raw: Vec<T> = (0..len).map(|_| T::from_f64(rng.normal())).collect();
            let d = Direction { raw };
            if d.norm() > 1e-6 {
                return d;
            }
        }
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.raw
            .iter()
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    /// Unit-length effective direction.
    pub fn unit(&self) -> Result<Vec<T>, LatentError> {
        let n = self.norm();
        if n <= 0.0 {
            return Err(LatentError::DegenerateDirection);
        }
        Ok(self
            .raw
            .iter()
            .map(|v| T::from_f64(v.as_f64() / n))
            .collect())
    }
}

/// An ordered (non-decreasing) list of shift magnitudes.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftMagnitudes {
    alphas: Vec<f64>,
}

impl ShiftMagnitudes {
    /// Sorts the input; the non-decreasing invariant always holds.
    pub fn new(mut alphas: Vec<f64>) -> Self {
        alphas.sort_by(|a, b| a.partial_cmp(b).unwrap());
        ShiftMagnitudes { alphas }
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn len(&self) -> usize {
        self.alphas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alphas.is_empty()
    }
}

/// `count` i.i.d. draws from U[-6, 6], sorted ascending.
pub fn sample_alpha(rng: &mut Rng, count: usize) -> ShiftMagnitudes {
    ShiftMagnitudes::new(
        (0..count)
            .map(|_| rng.uniform(-ALPHA_MAX, ALPHA_MAX))
            .collect(),
    )
}

/// `t` evenly spaced magnitudes spanning [lo, hi]; the single-element case
/// returns the midpoint so the center sample corresponds to the unshifted
/// code.
pub fn evenly_spaced_alphas(t: usize, lo: f64, hi: f64) -> ShiftMagnitudes {
    if t == 1 {
        return ShiftMagnitudes::new(vec![(lo + hi) / 2.0]);
    }
    ShiftMagnitudes::new(
        (0..t)
            .map(|i| lo + (hi - lo) * i as f64 / (t - 1) as f64)
            .collect(),
    )
}

/// z + alpha * (raw / ||raw||).
pub fn shift_latent<T: Scalar>(
    z: &LatentCode<T>,
    d: &Direction<T>,
    alpha: f64,
) -> Result<LatentCode<T>, LatentError> {
    if z.len() != d.len() {
        return Err(LatentError::DimensionMismatch {
            a: z.len(),
            b: d.len(),
        });
    }
    let unit = d.unit()?;
    let values = z
        .values
        .iter()
        .zip(&unit)
        .map(|(&zv, &dv)| zv + T::from_f64(alpha) * dv)
        .collect();
    Ok(LatentCode { values })
}

/// One shifted code per magnitude; each element depends only on (z, d, αᵢ).
pub fn temporal_generate<T: Scalar>(
    z: &LatentCode<T>,
    d: &Direction<T>,
    alphas: &ShiftMagnitudes,
) -> Result<Vec<LatentCode<T>>, LatentError> {
    alphas
        .alphas()
        .iter()
        .map(|&a| shift_latent(z, d, a))
        .collect()
}

/// Accumulate the gradient of a loss w.r.t. `raw` given the upstream
/// gradient w.r.t. one shifted code z + alpha * unit(raw).
///
/// With u = raw/||raw||, the Jacobian of u w.r.t. raw is
/// (I - u uᵀ) / ||raw||, so the contribution is
/// alpha * (g - u (u·g)) / ||raw||.
pub fn accumulate_direction_grad<T: Scalar>(
    d: &Direction<T>,
    alpha: f64,
    upstream: &[T],
    grad_raw: &mut [T],
) -> Result<(), LatentError> {
    if upstream.len() != d.len() || grad_raw.len() != d.len() {
        return Err(LatentError::DimensionMismatch {
            a: d.len(),
            b: upstream.len(),
        });
    }
    let norm = d.norm();
    if norm <= 0.0 {
        return Err(LatentError::DegenerateDirection);
    }
    let unit: Vec<f64> = d.raw.iter().map(|v| v.as_f64() / norm).collect();
    let dot: f64 = unit
        .iter()
        .zip(upstream)
        .map(|(u, g)| u * g.as_f64())
        .sum();
    for i in 0..d.len() {
        let g = (alpha / norm) * (upstream[i].as_f64() - unit[i] * dot);
        grad_raw[i] = grad_raw[i] + T::from_f64(g);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn code(values: &[f64]) -> LatentCode<f64> {
        LatentCode::new(values.to_vec())
    }

    #[test]
    fn sample_alpha_is_sorted_and_bounded() {
        let mut rng = Rng::new(1);
        for _ in 0..100 {
            let a = sample_alpha(&mut rng, 5);
            assert!(a.alphas().windows(2).all(|w| w[0] <= w[1]));
            assert!(a
                .alphas()
                .iter()
                .all(|&x| (-ALPHA_MAX..=ALPHA_MAX).contains(&x)));
        }
        let single = sample_alpha(&mut rng, 1);
        assert_eq!(single.len(), 1);
    }

    #[test]
    fn sample_alpha_uniform_moments() {
        let mut rng = Rng::new(2);
        let n = 100_000;
        let mut sum = 0.0;
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for _ in 0..n {
            let a = sample_alpha(&mut rng, 1).alphas()[0];
            sum += a;
            lo = lo.min(a);
            hi = hi.max(a);
        }
        let mean = sum / n as f64;
        assert!((-0.1..=0.1).contains(&mean), "mean {mean}");
        assert!(lo >= -ALPHA_MAX && hi <= ALPHA_MAX);
    }

    #[test]
    fn evenly_spaced_examples() {
        assert_eq!(evenly_spaced_alphas(3, -6.0, 6.0).alphas(), &[-6.0, 0.0, 6.0]);
        assert_eq!(evenly_spaced_alphas(1, -6.0, 6.0).alphas(), &[0.0]);
        assert_eq!(evenly_spaced_alphas(2, 0.0, 1.0).alphas(), &[0.0, 1.0]);
    }

    #[test]
    fn zero_shift_is_identity() {
        let z = code(&[0.5, -0.25, 3.0]);
        let d = Direction::new(vec![1.0, 2.0, -1.0]);
        let out = shift_latent(&z, &d, 0.0).unwrap();
        assert_eq!(out, z);
    }

    #[test]
    fn shift_normalizes_direction_first() {
        let mut z = code(&[0.0; 8]);
        z.values[0] = 0.0;
        let mut raw = vec![0.0; 8];
        raw[0] = 2.0;
        let d = Direction::new(raw);
        let out = shift_latent(&z, &d, 3.0).unwrap();
        assert!((out.values[0] - 3.0).abs() < 1e-12);
        assert!(out.values[1..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shifts_compose_additively() {
        let mut rng = Rng::new(3);
        for _ in 0..100 {
            let z = LatentCode::<f64>::sample(&mut rng, 16);
            let d = Direction::<f64>::sample(&mut rng, 16);
            let a = rng.uniform(-6.0, 6.0);
            let b = rng.uniform(-6.0, 6.0);
            let two = shift_latent(&shift_latent(&z, &d, a).unwrap(), &d, b).unwrap();
            let one = shift_latent(&z, &d, a + b).unwrap();
            for (x, y) in two.values.iter().zip(&one.values) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn shift_is_scale_invariant_in_direction() {
        let mut rng = Rng::new(4);
        let z = LatentCode::<f64>::sample(&mut rng, 32);
        let d = Direction::<f64>::sample(&mut rng, 32);
        let scaled = Direction::new(d.raw.iter().map(|v| v * 17.5).collect());
        let a = shift_latent(&z, &d, 2.3).unwrap();
        let b = shift_latent(&z, &scaled, 2.3).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn unit_direction_has_unit_norm() {
        let mut rng = Rng::new(5);
        let d = Direction::<f64>::sample(&mut rng, 64);
        let u = d.unit().unwrap();
        let n: f64 = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
    }

    #[test]
    fn degenerate_direction_is_an_error() {
        let z = code(&[1.0, 2.0]);
        let d = Direction::new(vec![0.0, 0.0]);
        assert_eq!(
            shift_latent(&z, &d, 1.0),
            Err(LatentError::DegenerateDirection)
        );
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let z = code(&[1.0, 2.0]);
        let d = Direction::new(vec![1.0, 2.0, 3.0]);
        assert!(matches!(
            shift_latent(&z, &d, 1.0),
            Err(LatentError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn temporal_generate_matches_pairwise_differences() {
        let mut rng = Rng::new(6);
        let z = LatentCode::<f64>::sample(&mut rng, 24);
        let d = Direction::<f64>::sample(&mut rng, 24);
        let unit = d.unit().unwrap();
        let alphas = sample_alpha(&mut rng, 7);
        let codes = temporal_generate(&z, &d, &alphas).unwrap();
        assert_eq!(codes.len(), 7);
        for i in 0..7 {
            for j in i + 1..7 {
                let da = alphas.alphas()[j] - alphas.alphas()[i];
                for k in 0..24 {
                    let diff = codes[j].values[k] - codes[i].values[k];
                    assert!((diff - da * unit[k]).abs() < 1e-9);
                }
            }
        }
        // The middle element of (-1, 0, 1) equals z.
        let sym = temporal_generate(&z, &d, &ShiftMagnitudes::new(vec![-1.0, 0.0, 1.0])).unwrap();
        for (a, b) in sym[1].values.iter().zip(&z.values) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn projections_along_direction_are_sorted() {
        let mut rng = Rng::new(7);
        let z = LatentCode::<f64>::sample(&mut rng, 16);
        let d = Direction::<f64>::sample(&mut rng, 16);
        let unit = d.unit().unwrap();
        let alphas = sample_alpha(&mut rng, 9);
        let codes = temporal_generate(&z, &d, &alphas).unwrap();
        let proj: Vec<f64> = codes
            .iter()
            .map(|c| c.values.iter().zip(&unit).map(|(a, b)| a * b).sum())
            .collect();
        assert!(proj.windows(2).all(|w| w[1] >= w[0] - 1e-9));
    }

    #[test]
    fn direction_gradient_matches_finite_differences() {
        let mut rng = Rng::new(8);
        let dim = 6;
        let z = LatentCode::<f64>::sample(&mut rng, dim);
        let d = Direction::<f64>::sample(&mut rng, dim);
        let alpha = 1.7;
        // Loss = w . shift(z, d, alpha) for a fixed random w.
        let w: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let loss = |raw: &[f64]| -> f64 {
            let dir = Direction::new(raw.to_vec());
            let s = shift_latent(&z, &dir, alpha).unwrap();
            s.values.iter().zip(&w).map(|(a, b)| a * b).sum()
        };
        let mut grad = vec![0.0; dim];
        accumulate_direction_grad(&d, alpha, &w, &mut grad).unwrap();
        let h = 1e-6;
        for i in 0..dim {
            let mut plus = d.raw.clone();
            let mut minus = d.raw.clone();
            plus[i] += h;
            minus[i] -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            assert!(
                (fd - grad[i]).abs() <= 1e-5 * (1.0 + fd.abs()),
                "component {i}: fd {fd} analytic {}",
                grad[i]
            );
        }
    }
}
