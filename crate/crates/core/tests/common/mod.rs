//! Shared fixtures for integration tests: a synthetic blob-pattern dataset
//! and the closed-form flow-map oracle for Gaussian data.

#![allow(dead_code)]

use diffaug::diffusion::LabeledSample;
use diffaug::numerics::Grid;
use diffaug::schedule::NoiseSchedule;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Blob centers per class on a 32 x 32 canvas; far apart so the classes are
/// trivially separable.
pub const BLOB_CENTERS: [(f64, f64); 3] = [(9.0, 9.0), (9.0, 23.0), (23.0, 16.0)];

/// One synthetic "spectrogram": a soft Gaussian bump at the class position
/// over a dark background, with jitter and pixel noise, clamped to [-1, 1].
pub fn blob_sample(class: usize, size: usize, rng: &mut ChaCha8Rng) -> Grid {
    let (cy, cx) = BLOB_CENTERS[class];
    let scale = size as f64 / 32.0;
    let cy = cy * scale + rng.gen_range(-1.5..1.5) * scale;
    let cx = cx * scale + rng.gen_range(-1.5..1.5) * scale;
    let radius = 5.5 * scale;
    let amplitude = 1.7 * rng.gen_range(0.85..1.15);
    let noise_std = 0.06;
    Grid::from_fn(&[size, size], |i| {
        let y = (i / size) as f64;
        let x = (i % size) as f64;
        let d2 = (y - cy).powi(2) + (x - cx).powi(2);
        let bump = amplitude * (-d2 / (2.0 * radius * radius)).exp();
        let z: f32 = rng.sample(StandardNormal);
        ((-0.85 + bump) as f32 + noise_std * z).clamp(-1.0, 1.0)
    })
}

/// Balanced 3-class dataset with folds assigned round-robin in 1..=folds.
pub fn blob_dataset(per_class: usize, size: usize, folds: u32, seed: u64) -> Vec<LabeledSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(3 * per_class);
    for class in 0..3 {
        for i in 0..per_class {
            out.push(LabeledSample {
                spectrogram: blob_sample(class, size, &mut rng),
                class_id: class,
                fold: (i % folds as usize + 1) as u32,
            });
        }
    }
    out
}

/// Exact probability-flow endpoint for scalar Gaussian data: the flow
/// transports the marginal quantile, so a trajectory started at
/// `x(T) = a_T mu + std_T z` ends at `x(t_end) = a_end mu + std_end z` with
/// the same `z`, where `std_t = sqrt(a_t^2 sigma0^2 + s_t^2)`.
pub fn exact_flow_endpoint(
    schedule: &NoiseSchedule,
    mu: f64,
    sigma0: f64,
    x_start: f64,
    t_start: f64,
    t_end: f64,
) -> f64 {
    let (a0, s0) = schedule.marginal_coeffs_at(t_start);
    let (a1, s1) = schedule.marginal_coeffs_at(t_end);
    let std0 = (a0 * a0 * sigma0 * sigma0 + s0 * s0).sqrt();
    let std1 = (a1 * a1 * sigma0 * sigma0 + s1 * s1).sqrt();
    let z = (x_start - a0 * mu) / std0;
    a1 * mu + std1 * z
}

/// Mean and standard deviation of a sample set.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}
