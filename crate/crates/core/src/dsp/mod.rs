//! Waveform-domain augmentation: background-noise mixing, pitch shifting,
//! time stretching, the stochastic policy combining them, and log-mel
//! featurization.

pub mod features;
pub mod vocoder;

pub use features::{featurize, FeaturizeConfig};
pub use vocoder::{pitch_shift, time_stretch};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

/// Mono audio in `[-1, 1]` at a fixed sample rate.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if samples.iter().any(|v| !v.is_finite() || v.abs() > 1.0 + 1e-6) {
            return Err(Error::invalid("samples must be finite and within [-1, 1]"));
        }
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Pure sine tone, handy for synthesis and tests.
    pub fn sine(freq_hz: f64, seconds: f64, sample_rate: u32, amplitude: f32) -> Self {
        let n = (seconds * sample_rate as f64).round() as usize;
        let samples = (0..n)
            .map(|i| {
                let t = i as f64 / sample_rate as f64;
                (amplitude as f64 * (std::f64::consts::TAU * freq_hz * t).sin()) as f32
            })
            .collect();
        Waveform {
            samples,
            sample_rate,
        }
    }

    /// Linear-interpolation resampling to a new rate.
    pub fn resampled(&self, new_rate: u32) -> Result<Waveform> {
        if new_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if new_rate == self.sample_rate || self.samples.is_empty() {
            return Ok(Waveform {
                samples: self.samples.clone(),
                sample_rate: new_rate,
            });
        }
        let new_len = ((self.samples.len() as f64) * new_rate as f64 / self.sample_rate as f64)
            .round()
            .max(1.0) as usize;
        Ok(Waveform {
            samples: resample_to_len(&self.samples, new_len),
            sample_rate: new_rate,
        })
    }
}

/// Stretch or squeeze `x` onto `new_len` samples by linear interpolation.
pub(crate) fn resample_to_len(x: &[f32], new_len: usize) -> Vec<f32> {
    assert!(!x.is_empty() && new_len > 0);
    if new_len == x.len() {
        return x.to_vec();
    }
    let scale = (x.len() - 1) as f64 / (new_len - 1).max(1) as f64;
    (0..new_len)
        .map(|i| {
            let pos = i as f64 * scale;
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(x.len() - 1);
            let w = (pos - lo as f64) as f32;
            x[lo] * (1.0 - w) + x[hi] * w
        })
        .collect()
}

/// Superimpose a random contiguous slice of `ambience`, scaled by `weight`,
/// onto `x`; the result is clamped back into `[-1, 1]`. The ambience must be
/// at least as long as `x` and share its sample rate.
pub fn mix_noise(
    x: &Waveform,
    ambience: &Waveform,
    weight: f32,
    rng: &mut impl Rng,
) -> Result<Waveform> {
    if ambience.sample_rate != x.sample_rate {
        return Err(Error::invalid(format!(
            "ambience rate {} != signal rate {}",
            ambience.sample_rate, x.sample_rate
        )));
    }
    if ambience.len() < x.len() {
        return Err(Error::invalid(format!(
            "ambience too short: {} < {} samples",
            ambience.len(),
            x.len()
        )));
    }
    let offset = rng.gen_range(0..=(ambience.len() - x.len()));
    let samples = x
        .samples
        .iter()
        .zip(&ambience.samples[offset..offset + x.len()])
        .map(|(&a, &b)| (a + weight * b).clamp(-1.0, 1.0))
        .collect();
    Ok(Waveform {
        samples,
        sample_rate: x.sample_rate,
    })
}

/// One waveform transform with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum Transform {
    MixNoise { weight: f32 },
    PitchShiftUp { factor: f64 },
    PitchShiftDown { factor: f64 },
    TimeStretch { min_rate: f64, max_rate: f64 },
}

impl Transform {
    fn is_pitch_up(&self) -> bool {
        matches!(self, Transform::PitchShiftUp { .. })
    }
    fn is_pitch_down(&self) -> bool {
        matches!(self, Transform::PitchShiftDown { .. })
    }
}

/// A transform with its independent application probability.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyEntry {
    pub transform: Transform,
    pub probability: f64,
}

/// Every sample receives at least one and at most two transforms per pass.
pub const MIN_TRANSFORMS: usize = 1;
pub const MAX_TRANSFORMS: usize = 2;

/// Stochastic augmentation policy: independent Bernoulli draws per entry,
/// opposite pitch directions never applied together, and the selection
/// forced into `[MIN_TRANSFORMS, MAX_TRANSFORMS]`.
#[derive(Clone, Debug)]
pub struct AugmentPolicy {
    pub entries: Vec<PolicyEntry>,
    pub ambience: Vec<Waveform>,
}

impl AugmentPolicy {
    /// Default parameter set: ambience mixing (p 0.6, weight 0.6), pitch
    /// shift up and down (p 0.8 each, frequency ratio 2), and time stretch
    /// (p 0.7, rate drawn from [0.8, 1.25]).
    pub fn table_defaults(ambience: Vec<Waveform>) -> Self {
        AugmentPolicy {
            entries: vec![
                PolicyEntry {
                    transform: Transform::MixNoise { weight: 0.6 },
                    probability: 0.6,
                },
                PolicyEntry {
                    transform: Transform::PitchShiftUp { factor: 2.0 },
                    probability: 0.8,
                },
                PolicyEntry {
                    transform: Transform::PitchShiftDown { factor: 2.0 },
                    probability: 0.8,
                },
                PolicyEntry {
                    transform: Transform::TimeStretch {
                        min_rate: 0.8,
                        max_rate: 1.25,
                    },
                    probability: 0.7,
                },
            ],
            ambience,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::invalid("policy needs at least one transform"));
        }
        for e in &self.entries {
            if !(0.0..=1.0).contains(&e.probability) {
                return Err(Error::invalid(format!(
                    "probability {} outside [0, 1]",
                    e.probability
                )));
            }
            match e.transform {
                Transform::PitchShiftUp { factor } | Transform::PitchShiftDown { factor } => {
                    if factor <= 0.0 {
                        return Err(Error::invalid("pitch factor must be > 0"));
                    }
                }
                Transform::TimeStretch { min_rate, max_rate } => {
                    if !(min_rate > 0.0 && min_rate <= max_rate) {
                        return Err(Error::invalid("stretch range must satisfy 0 < min <= max"));
                    }
                }
                Transform::MixNoise { .. } => {
                    if self.ambience.is_empty() {
                        return Err(Error::invalid(
                            "noise mixing requires at least one ambience clip",
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Select which policy entries apply this pass, by index in declaration
/// order: independent Bernoulli draws, both pitch directions never kept
/// together, more than [`MAX_TRANSFORMS`] reduced to a uniformly random
/// pair, an empty draw replaced with one uniformly random entry.
pub fn draw_transform_set(policy: &AugmentPolicy, rng: &mut impl Rng) -> Vec<usize> {
    let mut selected: Vec<usize> = Vec::new();
    for (i, entry) in policy.entries.iter().enumerate() {
        if rng.gen_bool(entry.probability) {
            selected.push(i);
        }
    }
    let up = selected
        .iter()
        .position(|&i| policy.entries[i].transform.is_pitch_up());
    let down = selected
        .iter()
        .position(|&i| policy.entries[i].transform.is_pitch_down());
    if let (Some(a), Some(b)) = (up, down) {
        let drop = if rng.gen_bool(0.5) { a } else { b };
        selected.remove(drop);
    }
    if selected.len() > MAX_TRANSFORMS {
        selected.shuffle(rng);
        selected.truncate(MAX_TRANSFORMS);
        selected.sort_unstable();
    }
    if selected.is_empty() {
        selected.push(rng.gen_range(0..policy.entries.len()));
    }
    selected
}

/// Draw a transform set and apply it in declaration order.
pub fn apply_policy(x: &Waveform, policy: &AugmentPolicy, rng: &mut impl Rng) -> Result<Waveform> {
    policy.validate()?;
    let chosen = draw_transform_set(policy, rng);
    let mut out = x.clone();
    for idx in chosen {
        out = match &policy.entries[idx].transform {
            Transform::MixNoise { weight } => {
                let clip = policy
                    .ambience
                    .get(rng.gen_range(0..policy.ambience.len()))
                    .expect("validated non-empty");
                mix_noise(&out, clip, *weight, rng)?
            }
            Transform::PitchShiftUp { factor } => pitch_shift(&out, *factor)?,
            Transform::PitchShiftDown { factor } => pitch_shift(&out, 1.0 / *factor)?,
            Transform::TimeStretch { min_rate, max_rate } => {
                let rate = if min_rate == max_rate {
                    *min_rate
                } else {
                    rng.gen_range(*min_rate..*max_rate)
                };
                time_stretch(&out, rate)?
            }
        };
    }
    Ok(out)
}

/// Synthesize demonstration ambience clips (low-passed noise at a few
/// cutoffs) for pipelines that have no recorded background material on hand.
pub fn demo_ambience(seed: u64, seconds: f64, sample_rate: u32) -> Vec<Waveform> {
    use rand::SeedableRng;
    let n = (seconds * sample_rate as f64) as usize;
    [0.02f32, 0.1, 0.4]
        .iter()
        .enumerate()
        .map(|(i, &alpha)| {
            let mut rng =
                rand_chacha::ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64 * 7919));
            let mut state = 0.0f32;
            let mut samples = Vec::with_capacity(n);
            let mut peak = 1e-6f32;
            for _ in 0..n {
                let white: f32 = rng.gen_range(-1.0..1.0);
                state += alpha * (white - state);
                samples.push(state);
                peak = peak.max(state.abs());
            }
            let scale = 0.5 / peak;
            for v in &mut samples {
                *v *= scale;
            }
            Waveform {
                samples,
                sample_rate,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tone() -> Waveform {
        Waveform::sine(440.0, 0.5, 22050, 0.5)
    }

    #[test]
    fn mix_with_zero_weight_is_identity() {
        let x = tone();
        let amb = demo_ambience(0, 1.0, 22050).remove(0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = mix_noise(&x, &amb, 0.0, &mut rng).unwrap();
        assert_eq!(out.samples, x.samples);
    }

    #[test]
    fn mix_preserves_length_and_is_seed_reproducible() {
        let x = tone();
        let amb = demo_ambience(1, 1.0, 22050).remove(0);
        let a = mix_noise(&x, &amb, 0.6, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = mix_noise(&x, &amb, 0.6, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a.len(), x.len());
        assert_eq!(a.samples, b.samples);
        let c = mix_noise(&x, &amb, 0.6, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        assert_ne!(a.samples, c.samples, "different seed picks another segment");
    }

    #[test]
    fn mix_rejects_short_ambience_and_rate_mismatch() {
        let x = tone();
        let short = Waveform::sine(100.0, 0.1, 22050, 0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(mix_noise(&x, &short, 0.6, &mut rng).is_err());
        let wrong_rate = Waveform::sine(100.0, 1.0, 16000, 0.3);
        assert!(mix_noise(&x, &wrong_rate, 0.6, &mut rng).is_err());
    }

    #[test]
    fn policy_bounds_hold_over_many_draws() {
        let policy = AugmentPolicy::table_defaults(demo_ambience(2, 1.0, 22050));
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        for _ in 0..10_000 {
            let set = draw_transform_set(&policy, &mut rng);
            assert!((MIN_TRANSFORMS..=MAX_TRANSFORMS).contains(&set.len()));
            let ups = set
                .iter()
                .filter(|&&i| policy.entries[i].transform.is_pitch_up())
                .count();
            let downs = set
                .iter()
                .filter(|&&i| policy.entries[i].transform.is_pitch_down())
                .count();
            assert!(ups + downs <= 1, "both pitch directions selected");
            // declaration order is preserved
            assert!(set.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn all_zero_probabilities_force_exactly_one() {
        let mut policy = AugmentPolicy::table_defaults(demo_ambience(3, 1.0, 22050));
        for e in &mut policy.entries {
            e.probability = 0.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..200 {
            let set = draw_transform_set(&policy, &mut rng);
            assert_eq!(set.len(), 1);
            seen.insert(set[0]);
        }
        assert_eq!(seen.len(), policy.entries.len(), "forced pick must be uniform-ish");
    }

    #[test]
    fn all_one_probabilities_give_two_without_pitch_conflict() {
        let mut policy = AugmentPolicy::table_defaults(demo_ambience(4, 1.0, 22050));
        for e in &mut policy.entries {
            e.probability = 1.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..500 {
            let set = draw_transform_set(&policy, &mut rng);
            assert_eq!(set.len(), 2);
            let ups = set
                .iter()
                .filter(|&&i| policy.entries[i].transform.is_pitch_up())
                .count();
            let downs = set
                .iter()
                .filter(|&&i| policy.entries[i].transform.is_pitch_down())
                .count();
            assert!(ups + downs <= 1);
        }
    }

    #[test]
    fn empirical_rates_match_independent_simulation() {
        // the oracle reimplements the selection rule with its own control
        // flow and rng and tallies application rates per entry
        fn oracle_rates(p: &[f64], n: usize, seed: u64) -> Vec<f64> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut counts = vec![0usize; p.len()];
            for _ in 0..n {
                let mut sel: Vec<usize> = Vec::new();
                for (i, &prob) in p.iter().enumerate() {
                    if rng.gen_bool(prob) {
                        sel.push(i);
                    }
                }
                // indices 1 and 2 are the two pitch directions
                if sel.contains(&1) && sel.contains(&2) {
                    let keep_up = rng.gen_bool(0.5);
                    sel.retain(|&i| i != if keep_up { 1 } else { 2 });
                }
                while sel.len() > 2 {
                    let kill = rng.gen_range(0..sel.len());
                    sel.remove(kill);
                }
                if sel.is_empty() {
                    sel.push(rng.gen_range(0..p.len()));
                }
                for i in sel {
                    counts[i] += 1;
                }
            }
            counts.iter().map(|&c| c as f64 / n as f64).collect()
        }

        let policy = AugmentPolicy::table_defaults(demo_ambience(5, 1.0, 22050));
        let probs: Vec<f64> = policy.entries.iter().map(|e| e.probability).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let n = 10_000;
        let mut counts = vec![0usize; probs.len()];
        for _ in 0..n {
            for i in draw_transform_set(&policy, &mut rng) {
                counts[i] += 1;
            }
        }
        let mine: Vec<f64> = counts.iter().map(|&c| c as f64 / n as f64).collect();
        let oracle = oracle_rates(&probs, 1_000_000, 31);
        for (i, (a, b)) in mine.iter().zip(&oracle).enumerate() {
            assert!(
                (a - b).abs() < 0.01,
                "entry {i}: rate {a} vs oracle {b}"
            );
        }
    }

    #[test]
    fn policy_with_noise_requires_ambience() {
        let policy = AugmentPolicy::table_defaults(Vec::new());
        assert!(policy.validate().is_err());
    }

    #[test]
    fn resample_preserves_endpoints() {
        let x = vec![0.0f32, 1.0, 0.0, -1.0, 0.0];
        let y = resample_to_len(&x, 9);
        assert_eq!(y.len(), 9);
        assert_eq!(y[0], x[0]);
        assert_eq!(y[8], x[4]);
    }
}
