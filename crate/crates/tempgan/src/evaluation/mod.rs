//! Quantitative evaluation: slice-wise Fréchet distance along the three
//! anatomical axes plus direction-effect metrics (foreground centroid
//! curves, scene consistency, tumor volume curves) that measure what the
//! learned direction actually does to generated volumes.

mod features;
mod frechet;

pub use features::{
    extract_slice_features, volume_slices, Axis, SliceFeatureExtractor, EXTRACTOR_SEED,
    FEATURE_DIM,
};
pub use frechet::{frechet_distance, GaussianStats};

use thiserror::Error;

use crate::latent::{shift_latent, Direction, LatentCode, LatentError, ShiftMagnitudes, ALPHA_MAX};
use crate::networks::{GeneratorNet, NetError};
use crate::rng::Rng;
use crate::volume_io::{Dims, Volume, VolumeError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dimension mismatch: {a} vs {b}")]
    DimensionMismatch { a: usize, b: usize },
    #[error("covariance not symmetric (max deviation {deviation})")]
    NotSymmetric { deviation: f64 },
    #[error("covariance not positive semidefinite (eigenvalue {eigenvalue})")]
    NotPsd { eigenvalue: f64 },
    #[error("too few samples: got {got}, need {need}")]
    TooFewSamples { got: usize, need: usize },
    #[error("alpha list must not be empty")]
    EmptyAlphas,
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Latent(#[from] LatentError),
}

/// Generate volumes for a batch of latent codes in one forward pass.
pub fn generate_batch(
    gen: &mut GeneratorNet<f32>,
    codes: &[LatentCode<f32>],
) -> Result<Vec<Volume>, EvalError> {
    let latent = gen.cfg().latent_size;
    let mut flat = Vec::with_capacity(codes.len() * latent);
    for c in codes {
        if c.len() != latent {
            return Err(EvalError::DimensionMismatch {
                a: latent,
                b: c.len(),
            });
        }
        flat.extend_from_slice(&c.values);
    }
    let out = gen.forward(&flat, codes.len());
    Ok(out.to_volumes()?)
}

/// Generate every z at one shift magnitude.
pub fn generate_at_alpha(
    gen: &mut GeneratorNet<f32>,
    direction: &Direction<f32>,
    zs: &[LatentCode<f32>],
    alpha: f64,
) -> Result<Vec<Volume>, EvalError> {
    let shifted: Result<Vec<_>, LatentError> =
        zs.iter().map(|z| shift_latent(z, direction, alpha)).collect();
    generate_batch(gen, &shifted?)
}

/// Volumes at independent z with one uniform random shift each — the
/// "random time steps" sample the Fréchet scores are computed on.
pub fn sample_random_step_volumes(
    gen: &mut GeneratorNet<f32>,
    direction: &Direction<f32>,
    count: usize,
    rng: &mut Rng,
) -> Result<Vec<Volume>, EvalError> {
    let latent = gen.cfg().latent_size;
    let mut codes = Vec::with_capacity(count);
    for _ in 0..count {
        let z = LatentCode::<f32>::sample(rng, latent);
        let alpha = rng.uniform(-ALPHA_MAX, ALPHA_MAX);
        codes.push(shift_latent(&z, direction, alpha)?);
    }
    generate_batch(gen, &codes)
}

/// Uniform noise volumes in [-1, 1] (the degenerate baseline for sanity
/// ordering checks).
pub fn uniform_noise_volumes(rng: &mut Rng, dims: Dims, count: usize) -> Vec<Volume> {
    (0..count)
        .map(|_| {
            Volume::new(
                dims,
                (0..dims.count())
                    .map(|_| rng.uniform(-1.0, 1.0) as f32)
                    .collect(),
            )
            .expect("uniform noise in range")
        })
        .collect()
}

/// One axis row of a Fréchet report.
#[derive(Debug, Clone)]
pub struct AxisScore {
    pub axis: Axis,
    pub score: f64,
    pub n_real_slices: usize,
    pub n_fake_slices: usize,
}

/// Per-axis Fréchet scores between a real and a generated volume set.
#[derive(Debug, Clone)]
pub struct FidReport {
    pub rows: Vec<AxisScore>,
}

pub fn fid_report(
    real: &[Volume],
    generated: &[Volume],
    extractor: &SliceFeatureExtractor,
) -> Result<FidReport, EvalError> {
    let mut rows = Vec::with_capacity(3);
    for axis in Axis::ALL {
        let (real_stats, n_real_slices) = extract_slice_features(real, axis, extractor)?;
        let (fake_stats, n_fake_slices) = extract_slice_features(generated, axis, extractor)?;
        rows.push(AxisScore {
            axis,
            score: frechet_distance(&real_stats, &fake_stats)?,
            n_real_slices,
            n_fake_slices,
        });
    }
    Ok(FidReport { rows })
}

/// Intensity-weighted centroid of voxels with value > 0, or None when the
/// foreground is empty.
pub fn foreground_centroid(v: &Volume) -> Option<[f64; 3]> {
    let dims = v.dims();
    let mut wsum = 0.0f64;
    let mut acc = [0.0f64; 3];
    for z in 0..dims.z {
        for y in 0..dims.y {
            for x in 0..dims.x {
                let val = v.get(x, y, z) as f64;
                if val > 0.0 {
                    wsum += val;
                    acc[0] += val * x as f64;
                    acc[1] += val * y as f64;
                    acc[2] += val * z as f64;
                }
            }
        }
    }
    if wsum > 0.0 {
        Some([acc[0] / wsum, acc[1] / wsum, acc[2] / wsum])
    } else {
        None
    }
}

/// Mean foreground centroid per shift magnitude over a fixed set of latent
/// draws. Empty-foreground volumes are recorded as missing, not errors.
#[derive(Debug, Clone)]
pub struct CentroidRow {
    pub alpha: f64,
    /// Mean centroid (x, y, z) over draws with nonempty foreground.
    pub mean: Option<[f64; 3]>,
    pub missing: usize,
    pub draws: usize,
}

pub fn centroid_shift_curve(
    gen: &mut GeneratorNet<f32>,
    direction: &Direction<f32>,
    zs: &[LatentCode<f32>],
    alphas: &ShiftMagnitudes,
) -> Result<Vec<CentroidRow>, EvalError> {
    if alphas.is_empty() {
        return Err(EvalError::EmptyAlphas);
    }
    let mut rows = Vec::with_capacity(alphas.len());
    for &alpha in alphas.alphas() {
        let volumes = generate_at_alpha(gen, direction, zs, alpha)?;
        let mut acc = [0.0f64; 3];
        let mut found = 0usize;
        for v in &volumes {
            if let Some(c) = foreground_centroid(v) {
                for (a, b) in acc.iter_mut().zip(c) {
                    *a += b;
                }
                found += 1;
            }
        }
        rows.push(CentroidRow {
            alpha,
            mean: (found > 0).then(|| {
                [
                    acc[0] / found as f64,
                    acc[1] / found as f64,
                    acc[2] / found as f64,
                ]
            }),
            missing: zs.len() - found,
            draws: zs.len(),
        });
    }
    Ok(rows)
}

/// Mean absolute voxel difference between the alpha-extreme volumes,
/// restricted to the voxels whose per-step change is at or below the 90th
/// percentile (the static part of the scene). Lower is better; 0 when
/// alpha_min equals alpha_max; at most 2 for [-1, 1] data.
pub fn scene_consistency(
    gen: &mut GeneratorNet<f32>,
    direction: &Direction<f32>,
    zs: &[LatentCode<f32>],
    alphas: &ShiftMagnitudes,
) -> Result<f64, EvalError> {
    if alphas.len() < 2 {
        return Err(EvalError::EmptyAlphas);
    }
    let mut total = 0.0f64;
    for z in zs {
        let volumes: Result<Vec<_>, EvalError> = alphas
            .alphas()
            .iter()
            .map(|&a| {
                let code = shift_latent(z, direction, a)?;
                Ok(generate_batch(gen, &[code])?.remove(0))
            })
            .collect();
        let volumes = volumes?;
        let count = volumes[0].voxels().len();
        let mut step_diff = vec![0.0f32; count];
        for pair in volumes.windows(2) {
            for (d, (a, b)) in step_diff
                .iter_mut()
                .zip(pair[0].voxels().iter().zip(pair[1].voxels()))
            {
                *d = d.max((a - b).abs());
            }
        }
        let mut sorted = step_diff.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let threshold = sorted[(0.9 * (count - 1) as f64).floor() as usize];

        let first = volumes.first().unwrap().voxels();
        let last = volumes.last().unwrap().voxels();
        let mut acc = 0.0f64;
        let mut n = 0usize;
        for i in 0..count {
            if step_diff[i] <= threshold {
                acc += (last[i] - first[i]).abs() as f64;
                n += 1;
            }
        }
        total += if n > 0 { acc / n as f64 } else { 0.0 };
    }
    Ok(total / zs.len() as f64)
}

/// Tumor volume per shift magnitude: voxels above `threshold` inside a
/// tracked region fixed from the first (most negative) alpha. Sequences
/// whose initial tumor is smaller than `min_voxels` are skipped.
#[derive(Debug, Clone)]
pub struct TumorVolumeCurve {
    pub alphas: Vec<f64>,
    /// Mean voxel count per alpha over tumor-bearing sequences.
    pub mean_volumes: Vec<f64>,
    pub tumor_sequences: usize,
}

pub fn tumor_volume_curve(
    gen: &mut GeneratorNet<f32>,
    direction: &Direction<f32>,
    zs: &[LatentCode<f32>],
    alphas: &ShiftMagnitudes,
    threshold: f32,
    min_voxels: usize,
) -> Result<TumorVolumeCurve, EvalError> {
    if alphas.is_empty() {
        return Err(EvalError::EmptyAlphas);
    }
    let mut sums = vec![0.0f64; alphas.len()];
    let mut tumor_sequences = 0usize;
    for z in zs {
        let volumes: Result<Vec<_>, EvalError> = alphas
            .alphas()
            .iter()
            .map(|&a| {
                let code = shift_latent(z, direction, a)?;
                Ok(generate_batch(gen, &[code])?.remove(0))
            })
            .collect();
        let volumes = volumes?;
        let dims = volumes[0].dims();

        // Tracked region: bounding box of the initial tumor plus margin 2.
        let first = &volumes[0];
        let mut bounds: Option<[usize; 6]> = None;
        let mut initial = 0usize;
        for zz in 0..dims.z {
            for yy in 0..dims.y {
                for xx in 0..dims.x {
                    if first.get(xx, yy, zz) > threshold {
                        initial += 1;
                        let b = bounds.get_or_insert([xx, xx, yy, yy, zz, zz]);
                        b[0] = b[0].min(xx);
                        b[1] = b[1].max(xx);
                        b[2] = b[2].min(yy);
                        b[3] = b[3].max(yy);
                        b[4] = b[4].min(zz);
                        b[5] = b[5].max(zz);
                    }
                }
            }
        }
        if initial < min_voxels {
            continue;
        }
        tumor_sequences += 1;
        let b = bounds.unwrap();
        let margin = 2usize;
        let lo = |v: usize| v.saturating_sub(margin);
        let hi = |v: usize, n: usize| (v + margin).min(n - 1);
        for (ai, vol) in volumes.iter().enumerate() {
            let mut count = 0usize;
            for zz in lo(b[4])..=hi(b[5], dims.z) {
                for yy in lo(b[2])..=hi(b[3], dims.y) {
                    for xx in lo(b[0])..=hi(b[1], dims.x) {
                        if vol.get(xx, yy, zz) > threshold {
                            count += 1;
                        }
                    }
                }
            }
            sums[ai] += count as f64;
        }
    }
    let mean_volumes = sums
        .iter()
        .map(|s| {
            if tumor_sequences > 0 {
                s / tumor_sequences as f64
            } else {
                0.0
            }
        })
        .collect();
    Ok(TumorVolumeCurve {
        alphas: alphas.alphas().to_vec(),
        mean_volumes,
        tumor_sequences,
    })
}

/// Spearman rank correlation with average ranks on ties; None when either
/// input has zero rank variance.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let rx = ranks(xs);
    let ry = ranks(ys);
    pearson(&rx, &ry)
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).unwrap());
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut dx = 0.0;
    let mut dy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        num += (x - mx) * (y - my);
        dx += (x - mx) * (x - mx);
        dy += (y - my) * (y - my);
    }
    if dx <= 0.0 || dy <= 0.0 {
        return None;
    }
    Some(num / (dx * dy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::NetConfig;

    fn tiny_generator(seed: u64) -> GeneratorNet<f32> {
        let cfg = NetConfig {
            latent_size: 6,
            base_channels: 2,
            num_levels: 2,
            volume_dims: Dims::cubic(8),
            use_self_attention: false,
            attention_level: None,
            spectral_norm: false,
        };
        GeneratorNet::new(cfg, &mut Rng::new(seed)).unwrap()
    }

    #[test]
    fn spearman_basics() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[5.0, 3.0, 1.0]), Some(-1.0));
        // Monotone nonlinear map keeps rank correlation at 1.
        assert_eq!(
            spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 8.0, 27.0, 64.0]),
            Some(1.0)
        );
        // Constant input has no ranking.
        assert_eq!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), None);
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(ranks(&[10.0, 20.0, 20.0, 30.0]), vec![1.0, 2.5, 2.5, 4.0]);
    }

    #[test]
    fn centroid_of_known_blob() {
        let dims = Dims::cubic(8);
        let mut voxels = vec![-1.0f32; dims.count()];
        voxels[dims.index(2, 3, 4)] = 0.5;
        voxels[dims.index(4, 3, 4)] = 0.5;
        let v = Volume::new(dims, voxels).unwrap();
        let c = foreground_centroid(&v).unwrap();
        assert_eq!(c, [3.0, 3.0, 4.0]);
        let empty = Volume::constant(dims, -1.0).unwrap();
        assert!(foreground_centroid(&empty).is_none());
    }

    #[test]
    fn scene_consistency_is_zero_for_equal_alphas() {
        let mut gen = tiny_generator(1);
        let mut rng = Rng::new(2);
        let dir = Direction::<f32>::sample(&mut rng, 6);
        let zs: Vec<LatentCode<f32>> =
            (0..2).map(|_| LatentCode::sample(&mut rng, 6)).collect();
        let alphas = ShiftMagnitudes::new(vec![1.5, 1.5]);
        let v = scene_consistency(&mut gen, &dir, &zs, &alphas).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn scene_consistency_is_bounded() {
        let mut gen = tiny_generator(3);
        let mut rng = Rng::new(4);
        let dir = Direction::<f32>::sample(&mut rng, 6);
        let zs: Vec<LatentCode<f32>> =
            (0..2).map(|_| LatentCode::sample(&mut rng, 6)).collect();
        let alphas = ShiftMagnitudes::new(vec![-6.0, 0.0, 6.0]);
        let v = scene_consistency(&mut gen, &dir, &zs, &alphas).unwrap();
        assert!((0.0..=2.0).contains(&v), "consistency {v}");
    }

    #[test]
    fn centroid_curve_has_one_row_per_alpha() {
        let mut gen = tiny_generator(5);
        let mut rng = Rng::new(6);
        let dir = Direction::<f32>::sample(&mut rng, 6);
        let zs: Vec<LatentCode<f32>> =
            (0..3).map(|_| LatentCode::sample(&mut rng, 6)).collect();
        let alphas = ShiftMagnitudes::new(vec![-2.0]);
        let rows = centroid_shift_curve(&mut gen, &dir, &zs, &alphas).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].draws, 3);
        assert!(rows[0].missing <= 3);
    }

    #[test]
    fn fid_report_has_three_axes_and_zero_self_distance() {
        let mut rng = Rng::new(7);
        let vols: Vec<Volume> = (0..3)
            .map(|_| {
                Volume::new(
                    Dims::cubic(8),
                    (0..512).map(|_| rng.uniform(-1.0, 1.0) as f32).collect(),
                )
                .unwrap()
            })
            .collect();
        let ex = SliceFeatureExtractor::new();
        let report = fid_report(&vols, &vols, &ex).unwrap();
        assert_eq!(report.rows.len(), 3);
        for row in &report.rows {
            assert!(row.score.abs() <= 1e-6, "{:?} self-score {}", row.axis, row.score);
            assert_eq!(row.n_real_slices, 24);
            assert_eq!(row.n_fake_slices, 24);
        }
    }

    #[test]
    fn real_halves_closer_than_noise() {
        // Structured textures vs uniform noise: the sanity ordering the
        // full pipeline relies on, here at miniature scale.
        let synth = crate::synth::SynthConfig {
            kind: crate::synth::SynthKind::Shift,
            dims: Dims::cubic(16),
            num_patients: 8,
            steps_per_sequence: 3,
            magnitude_range: (-2.0, 2.0),
            seed: 42,
            tumor_free_fraction: 0.0,
        };
        let mut all = Vec::new();
        for p in 0..8 {
            all.extend(crate::synth::generate_shift_sequence(&synth, p).unwrap().volumes);
        }
        let (half_a, half_b) = all.split_at(12);
        let noise = uniform_noise_volumes(&mut Rng::new(43), Dims::cubic(16), 12);
        let ex = SliceFeatureExtractor::new();
        let close = fid_report(half_a, half_b, &ex).unwrap();
        let far = fid_report(half_a, &noise, &ex).unwrap();
        for (c, f) in close.rows.iter().zip(&far.rows) {
            assert!(
                c.score < f.score,
                "{:?}: halves {} not closer than noise {}",
                c.axis,
                c.score,
                f.score
            );
        }
    }
}
