//! Fréchet distance between Gaussian feature distributions.
//!
//! d^2 = ||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2)), with the matrix
//! square root evaluated through the symmetric form
//! S1^(1/2) S2 S1^(1/2) (same trace), eigendecomposed with negative
//! eigenvalues clamped to zero.

use nalgebra::{DMatrix, DVector};

use super::EvalError;

/// Relative clamp tolerance for negative eigenvalues: anything more
/// negative than this times the largest eigenvalue fails the PSD check.
const PSD_TOLERANCE: f64 = 1e-6;
/// Absolute symmetry tolerance on covariance matrices.
const SYMMETRY_TOLERANCE: f64 = 1e-8;

/// Mean and covariance of a feature distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

impl GaussianStats {
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self, EvalError> {
        let stats = GaussianStats { mean, covariance };
        stats.validate()?;
        Ok(stats)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Sample mean and unbiased sample covariance. Needs >= 2 samples;
    /// fewer samples than dim + 1 leaves the covariance rank-deficient,
    /// which is tolerated but logged.
    pub fn from_samples(samples: &[Vec<f64>]) -> Result<Self, EvalError> {
        let n = samples.len();
        if n < 2 {
            return Err(EvalError::TooFewSamples { got: n, need: 2 });
        }
        let d = samples[0].len();
        if samples.iter().any(|s| s.len() != d) {
            return Err(EvalError::DimensionMismatch {
                a: d,
                b: samples.iter().map(|s| s.len()).find(|&l| l != d).unwrap(),
            });
        }
        if n < d + 1 {
            log::warn!("covariance from {n} samples in {d} dims is rank-deficient");
        }
        let mut mean = DVector::zeros(d);
        for s in samples {
            for (i, &v) in s.iter().enumerate() {
                mean[i] += v;
            }
        }
        mean /= n as f64;
        let mut cov = DMatrix::zeros(d, d);
        for s in samples {
            let centered = DVector::from_iterator(d, s.iter().enumerate().map(|(i, &v)| v - mean[i]));
            cov += &centered * centered.transpose();
        }
        cov /= (n - 1) as f64;
        // The accumulation is symmetric by construction up to rounding.
        let cov = (&cov + cov.transpose()) * 0.5;
        Ok(GaussianStats {
            mean,
            covariance: cov,
        })
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        let d = self.mean.len();
        if self.covariance.nrows() != d || self.covariance.ncols() != d {
            return Err(EvalError::DimensionMismatch {
                a: d,
                b: self.covariance.nrows(),
            });
        }
        let asym = (&self.covariance - self.covariance.transpose()).abs().max();
        if asym > SYMMETRY_TOLERANCE {
            return Err(EvalError::NotSymmetric { deviation: asym });
        }
        let eigen = self.covariance.clone().symmetric_eigen();
        let max_eig = eigen.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
        let floor = -PSD_TOLERANCE * max_eig.max(1.0);
        if let Some(bad) = eigen.eigenvalues.iter().find(|&&l| l < floor) {
            return Err(EvalError::NotPsd { eigenvalue: *bad });
        }
        Ok(())
    }
}

/// Symmetric PSD square root via eigendecomposition, negatives clamped.
fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eigen = sym.symmetric_eigen();
    let sqrt_vals = DVector::from_iterator(
        eigen.eigenvalues.len(),
        eigen.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()),
    );
    &eigen.eigenvectors * DMatrix::from_diagonal(&sqrt_vals) * eigen.eigenvectors.transpose()
}

/// Fréchet (2-Wasserstein) distance squared between two Gaussians.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64, EvalError> {
    if a.dim() != b.dim() {
        return Err(EvalError::DimensionMismatch {
            a: a.dim(),
            b: b.dim(),
        });
    }
    a.validate()?;
    b.validate()?;

    let mean_term = (&a.mean - &b.mean).norm_squared();
    let s1_half = sqrt_psd(&a.covariance);
    let inner = &s1_half * &b.covariance * &s1_half;
    let sym = (&inner + inner.transpose()) * 0.5;
    let eigen = sym.symmetric_eigen();
    let tr_sqrt: f64 = eigen.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).sum();
    let dist = mean_term + a.covariance.trace() + b.covariance.trace() - 2.0 * tr_sqrt;
    Ok(dist.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random_stats(rng: &mut Rng, d: usize) -> GaussianStats {
        // Random PSD covariance A A^T / d plus jitter on the diagonal.
        let a = DMatrix::from_fn(d, d, |_, _| rng.normal());
        let cov = (&a * a.transpose()) / d as f64 + DMatrix::identity(d, d) * 0.1;
        let mean = DVector::from_fn(d, |_, _| rng.normal());
        GaussianStats::new(mean, cov).unwrap()
    }

    #[test]
    fn identical_stats_give_zero() {
        let mut rng = Rng::new(80);
        for _ in 0..10 {
            let s = random_stats(&mut rng, 6);
            let d = frechet_distance(&s, &s).unwrap();
            assert!(d.abs() <= 1e-6, "self distance {d}");
        }
    }

    #[test]
    fn one_dimensional_closed_form() {
        // N(0,1) vs N(1,4): (0-1)^2 + (1-2)^2 = 2.
        let a = GaussianStats::new(DVector::from_vec(vec![0.0]), DMatrix::from_vec(1, 1, vec![1.0]))
            .unwrap();
        let b = GaussianStats::new(DVector::from_vec(vec![1.0]), DMatrix::from_vec(1, 1, vec![4.0]))
            .unwrap();
        let d = frechet_distance(&a, &b).unwrap();
        assert!((d - 2.0).abs() <= 1e-6, "distance {d}");
    }

    #[test]
    fn equal_covariances_reduce_to_mean_separation() {
        let mut rng = Rng::new(81);
        for _ in 0..10 {
            let s = random_stats(&mut rng, 5);
            let shift = DVector::from_fn(5, |_, _| rng.normal());
            let b = GaussianStats::new(&s.mean + &shift, s.covariance.clone()).unwrap();
            let d = frechet_distance(&s, &b).unwrap();
            assert!(
                (d - shift.norm_squared()).abs() <= 1e-6 * (1.0 + shift.norm_squared()),
                "distance {d} vs {}",
                shift.norm_squared()
            );
        }
    }

    #[test]
    fn distance_is_symmetric() {
        let mut rng = Rng::new(82);
        for _ in 0..20 {
            let a = random_stats(&mut rng, 4);
            let b = random_stats(&mut rng, 4);
            let ab = frechet_distance(&a, &b).unwrap();
            let ba = frechet_distance(&b, &a).unwrap();
            assert!((ab - ba).abs() <= 1e-6 * (1.0 + ab.abs()), "{ab} vs {ba}");
        }
    }

    #[test]
    fn widening_mean_gap_increases_distance() {
        let mut rng = Rng::new(83);
        let a = random_stats(&mut rng, 4);
        let dir = DVector::from_fn(4, |_, _| rng.normal());
        let mut last = -1.0;
        for k in 1..5 {
            let b = GaussianStats::new(&a.mean + &dir * (k as f64), a.covariance.clone()).unwrap();
            let d = frechet_distance(&a, &b).unwrap();
            assert!(d > last, "distance not increasing: {d} after {last}");
            last = d;
        }
    }

    #[test]
    fn asymmetric_covariance_is_rejected() {
        let mut cov = DMatrix::identity(3, 3);
        cov[(0, 1)] = 0.5; // not mirrored
        let s = GaussianStats {
            mean: DVector::zeros(3),
            covariance: cov,
        };
        assert!(matches!(s.validate(), Err(EvalError::NotSymmetric { .. })));
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let a = GaussianStats::new(DVector::zeros(2), DMatrix::identity(2, 2)).unwrap();
        let b = GaussianStats::new(DVector::zeros(3), DMatrix::identity(3, 3)).unwrap();
        assert!(matches!(
            frechet_distance(&a, &b),
            Err(EvalError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn sample_stats_match_hand_computation() {
        let samples = vec![vec![1.0, 2.0], vec![3.0, 0.0], vec![5.0, 4.0]];
        let s = GaussianStats::from_samples(&samples).unwrap();
        assert_eq!(s.mean[0], 3.0);
        assert_eq!(s.mean[1], 2.0);
        // Unbiased covariance: var_x = ((-2)^2 + 0 + 2^2)/2 = 4.
        assert!((s.covariance[(0, 0)] - 4.0).abs() < 1e-12);
        assert!((s.covariance[(1, 1)] - 4.0).abs() < 1e-12);
        assert!((s.covariance[(0, 1)] - 2.0).abs() < 1e-12);
    }
}
