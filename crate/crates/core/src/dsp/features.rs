//! Log-mel spectrogram featurization to a fixed-size grid.
//!
//! Magnitude STFT (Hann window), triangular mel filterbank, `ln(1 + S/floor)`
//! compression, per-sample min-max normalization to `[-1, 1]`, and a linear
//! resize of the time axis to the target frame count. Rows are mel bands,
//! columns are frames.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::Waveform;
use crate::error::{Error, Result};
use crate::numerics::Grid;

#[derive(Clone, Debug)]
pub struct FeaturizeConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    /// Mel bands = output rows.
    pub mel_bands: usize,
    /// Output columns after the time-axis resize.
    pub frames: usize,
    pub fmin_hz: f64,
    /// Upper band edge; `None` selects Nyquist.
    pub fmax_hz: Option<f64>,
    /// Additive floor inside the log compression.
    pub log_floor: f64,
}

impl Default for FeaturizeConfig {
    fn default() -> Self {
        FeaturizeConfig {
            sample_rate: 22050,
            n_fft: 1024,
            hop: 256,
            mel_bands: 128,
            frames: 128,
            fmin_hz: 20.0,
            fmax_hz: None,
            log_floor: 1e-3,
        }
    }
}

impl FeaturizeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 || self.n_fft == 0 || self.hop == 0 {
            return Err(Error::invalid("sample_rate, n_fft and hop must be positive"));
        }
        if !self.n_fft.is_power_of_two() {
            return Err(Error::invalid("n_fft must be a power of two"));
        }
        if self.mel_bands == 0 || self.frames == 0 {
            return Err(Error::invalid("mel_bands and frames must be positive"));
        }
        if self.log_floor <= 0.0 {
            return Err(Error::invalid("log_floor must be > 0"));
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        let fmax = self.fmax_hz.unwrap_or(nyquist);
        if !(self.fmin_hz >= 0.0 && self.fmin_hz < fmax && fmax <= nyquist) {
            return Err(Error::invalid(format!(
                "band range [{}, {fmax}] invalid for nyquist {nyquist}",
                self.fmin_hz
            )));
        }
        Ok(())
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filterbank rows over FFT bin center frequencies.
fn mel_filterbank(config: &FeaturizeConfig) -> Vec<Vec<f32>> {
    let bins = config.n_fft / 2 + 1;
    let nyquist = config.sample_rate as f64 / 2.0;
    let fmax = config.fmax_hz.unwrap_or(nyquist);
    let mel_lo = hz_to_mel(config.fmin_hz);
    let mel_hi = hz_to_mel(fmax);
    let edges: Vec<f64> = (0..config.mel_bands + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (config.mel_bands + 1) as f64))
        .collect();
    let bin_hz: Vec<f64> = (0..bins)
        .map(|k| k as f64 * config.sample_rate as f64 / config.n_fft as f64)
        .collect();
    (0..config.mel_bands)
        .map(|band| {
            let (lo, mid, hi) = (edges[band], edges[band + 1], edges[band + 2]);
            bin_hz
                .iter()
                .map(|&f| {
                    let w = if f <= lo || f >= hi {
                        0.0
                    } else if f <= mid {
                        (f - lo) / (mid - lo)
                    } else {
                        (hi - f) / (hi - mid)
                    };
                    w as f32
                })
                .collect()
        })
        .collect()
}

/// Magnitude STFT: `spectra[frame][bin]`, Hann window, zero-padded so at
/// least one frame always exists. Magnitudes are normalized by the window
/// sum, so a full-scale tone lands near half its waveform amplitude.
fn stft_magnitudes(samples: &[f32], n_fft: usize, hop: usize) -> Vec<Vec<f32>> {
    let mut padded = samples.to_vec();
    if padded.len() < n_fft {
        padded.resize(n_fft, 0.0);
    }
    let num_frames = (padded.len() - n_fft) / hop + 1;
    let window: Vec<f32> = (0..n_fft)
        .map(|i| {
            let x = std::f64::consts::PI * i as f64 / n_fft as f64;
            (x.sin() * x.sin()) as f32
        })
        .collect();
    let window_sum: f32 = window.iter().sum();
    let mut planner = FftPlanner::<f32>::new();
    let fft = planner.plan_fft_forward(n_fft);
    let mut out = Vec::with_capacity(num_frames);
    let mut buf = vec![Complex::new(0.0f32, 0.0); n_fft];
    for frame in 0..num_frames {
        let base = frame * hop;
        for i in 0..n_fft {
            buf[i] = Complex::new(padded[base + i] * window[i], 0.0);
        }
        fft.process(&mut buf);
        out.push(
            buf[..n_fft / 2 + 1]
                .iter()
                .map(|c| c.norm() / window_sum)
                .collect(),
        );
    }
    out
}

/// Featurize a waveform to a `[mel_bands, frames]` grid in `[-1, 1]`.
/// All-zero input produces a constant grid at the normalization floor (-1).
pub fn featurize(x: &Waveform, config: &FeaturizeConfig) -> Result<Grid> {
    config.validate()?;
    if x.is_empty() {
        return Err(Error::invalid("cannot featurize an empty waveform"));
    }
    let resampled;
    let samples: &[f32] = if x.sample_rate == config.sample_rate {
        &x.samples
    } else {
        resampled = x.resampled(config.sample_rate)?;
        &resampled.samples
    };

    let spectra = stft_magnitudes(samples, config.n_fft, config.hop);
    let filterbank = mel_filterbank(config);
    let num_frames = spectra.len();

    // mel projection and log compression, [band][frame]
    let mut mel = vec![vec![0.0f32; num_frames]; config.mel_bands];
    for (frame, spectrum) in spectra.iter().enumerate() {
        for (band, filter) in filterbank.iter().enumerate() {
            let mut acc = 0.0f64;
            for (w, m) in filter.iter().zip(spectrum) {
                acc += *w as f64 * *m as f64;
            }
            mel[band][frame] = (1.0 + acc / config.log_floor).ln() as f32;
        }
    }

    // per-sample min-max normalization to [-1, 1]
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for row in &mel {
        for &v in row {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    let span = hi - lo;
    for row in &mut mel {
        for v in row.iter_mut() {
            *v = if span > 0.0 {
                (2.0 * (*v - lo) / span - 1.0).clamp(-1.0, 1.0)
            } else {
                -1.0
            };
        }
    }

    // time-axis resize to the target frame count
    let mut data = Vec::with_capacity(config.mel_bands * config.frames);
    for row in &mel {
        data.extend(super::resample_to_len(row, config.frames));
    }
    Grid::new(vec![config.mel_bands, config.frames], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn silent_input_is_constant_floor() {
        let x = Waveform::new(vec![0.0; 22050], 22050).unwrap();
        let g = featurize(&x, &FeaturizeConfig::default()).unwrap();
        assert_eq!(g.shape(), &[128, 128]);
        assert!(g.data().iter().all(|&v| v == -1.0));
    }

    #[test]
    fn output_dims_fixed_for_any_input_length() {
        let config = FeaturizeConfig::default();
        for len in [300usize, 1024, 5000, 44100] {
            let x = Waveform::new(vec![0.1; len], 22050).unwrap();
            let g = featurize(&x, &config).unwrap();
            assert_eq!(g.shape(), &[128, 128], "len={len}");
        }
    }

    #[test]
    fn output_always_within_unit_range() {
        let x = Waveform::sine(880.0, 0.7, 22050, 0.9);
        let g = featurize(&x, &FeaturizeConfig::default()).unwrap();
        assert!(g.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
    }

    #[test]
    fn pure_tone_energy_concentrates_in_adjacent_rows() {
        let x = Waveform::sine(1000.0, 1.0, 22050, 0.8);
        let g = featurize(&x, &FeaturizeConfig::default()).unwrap();
        // energy of the shifted grid (background sits at -1 -> 0)
        let mut row_energy = vec![0.0f64; 128];
        for band in 0..128 {
            for frame in 0..128 {
                let v = (g.data()[band * 128 + frame] + 1.0) as f64;
                row_energy[band] += v * v;
            }
        }
        let total: f64 = row_energy.iter().sum();
        let best3 = row_energy
            .windows(3)
            .map(|w| w.iter().sum::<f64>())
            .fold(0.0f64, f64::max);
        assert!(
            best3 / total > 0.6,
            "3-row concentration {} of {total}",
            best3
        );
    }

    #[test]
    fn mel_filterbank_covers_requested_band() {
        let config = FeaturizeConfig::default();
        let fb = mel_filterbank(&config);
        assert_eq!(fb.len(), 128);
        // every filter has non-negative weights and at least the top ones
        // span several bins
        for row in &fb {
            assert!(row.iter().all(|&w| w >= 0.0));
        }
        let nonzero_rows = fb.iter().filter(|r| r.iter().any(|&w| w > 0.0)).count();
        assert!(nonzero_rows > 120, "only {nonzero_rows} usable filters");
    }

    #[test]
    fn resampling_input_rate_changes_nothing_structural() {
        let x = Waveform::sine(1000.0, 0.5, 44100, 0.8);
        let g = featurize(&x, &FeaturizeConfig::default()).unwrap();
        assert_eq!(g.shape(), &[128, 128]);
    }
}
