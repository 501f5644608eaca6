//! Phase-vocoder time stretching and resampling-based pitch shifting.
//!
//! Analysis frames are taken at a (fractional) hop of `rate * 256` samples
//! and re-laid at a fixed synthesis hop of 256, with per-bin phase advance
//! corrected by the measured instantaneous frequency. Overlap-add output is
//! normalized by the accumulated squared window.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{resample_to_len, Waveform};
use crate::error::{Error, Result};

const WINDOW: usize = 1024;
const HOP_SYNTHESIS: usize = 256;

fn hann(n: usize) -> Vec<f32> {
    (0..n)
        .map(|i| {
            let x = std::f64::consts::PI * i as f64 / n as f64;
            (x.sin() * x.sin()) as f32
        })
        .collect()
}

fn wrap_phase(x: f64) -> f64 {
    x - std::f64::consts::TAU * (x / std::f64::consts::TAU).round()
}

/// Change duration by `1 / rate` while preserving pitch: `rate > 1` speeds
/// the signal up, `rate < 1` slows it down. Output length is
/// `round(len / rate)` within one synthesis hop.
pub fn time_stretch(x: &Waveform, rate: f64) -> Result<Waveform> {
    if rate <= 0.0 || !rate.is_finite() {
        return Err(Error::invalid(format!("stretch rate {rate} must be > 0")));
    }
    if x.is_empty() {
        return Err(Error::invalid("cannot stretch an empty waveform"));
    }
    let out_len = ((x.len() as f64 / rate).round() as usize).max(1);

    // pad the input so every analysis frame is complete
    let hop_analysis = HOP_SYNTHESIS as f64 * rate;
    let num_frames = (out_len + WINDOW) / HOP_SYNTHESIS + 1;
    let needed = (hop_analysis * (num_frames - 1) as f64).ceil() as usize + WINDOW;
    let mut padded = x.samples.clone();
    padded.resize(padded.len().max(needed), 0.0);

    let window = hann(WINDOW);
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(WINDOW);
    let ifft = planner.plan_fft_inverse(WINDOW);
    let bins = WINDOW / 2;

    let mut prev_phase = vec![0.0f64; bins + 1];
    let mut syn_phase = vec![0.0f64; bins + 1];
    let mut out = vec![0.0f32; (num_frames - 1) * HOP_SYNTHESIS + WINDOW];
    let mut norm = vec![0.0f32; out.len()];
    let mut spec = vec![Complex::new(0.0f64, 0.0); WINDOW];

    for frame in 0..num_frames {
        let pos = (frame as f64 * hop_analysis).round() as usize;
        for i in 0..WINDOW {
            spec[i] = Complex::new((padded[pos + i] * window[i]) as f64, 0.0);
        }
        fft.process(&mut spec);

        let mut shifted = vec![Complex::new(0.0f64, 0.0); WINDOW];
        for k in 0..=bins {
            let mag = spec[k].norm();
            let phase = spec[k].arg();
            if frame == 0 {
                syn_phase[k] = phase;
            } else {
                let omega = std::f64::consts::TAU * k as f64 / WINDOW as f64;
                let expected = omega * hop_analysis;
                let deviation = wrap_phase(phase - prev_phase[k] - expected);
                let true_freq = omega + deviation / hop_analysis;
                syn_phase[k] += HOP_SYNTHESIS as f64 * true_freq;
            }
            prev_phase[k] = phase;
            shifted[k] = Complex::from_polar(mag, syn_phase[k]);
            if k != 0 && k != bins {
                shifted[WINDOW - k] = shifted[k].conj();
            }
        }
        ifft.process(&mut shifted);

        let base = frame * HOP_SYNTHESIS;
        for i in 0..WINDOW {
            // ifft output still carries the analysis window; one synthesis
            // window on top gives w^2-weighted overlap-add
            let v = (shifted[i].re / WINDOW as f64) as f32;
            out[base + i] += v * window[i];
            norm[base + i] += window[i] * window[i];
        }
    }

    let mut samples: Vec<f32> = out
        .iter()
        .zip(&norm)
        .map(|(&v, &n)| if n > 1e-6 { (v / n).clamp(-1.0, 1.0) } else { 0.0 })
        .collect();
    samples.truncate(out_len);
    samples.resize(out_len, 0.0);
    Ok(Waveform {
        samples,
        sample_rate: x.sample_rate,
    })
}

/// Multiply frequencies by `factor` while preserving duration: stretch time
/// by `1 / factor`, then resample the result back onto the original length.
pub fn pitch_shift(x: &Waveform, factor: f64) -> Result<Waveform> {
    if factor <= 0.0 || !factor.is_finite() {
        return Err(Error::invalid(format!("pitch factor {factor} must be > 0")));
    }
    if x.is_empty() {
        return Err(Error::invalid("cannot pitch-shift an empty waveform"));
    }
    let stretched = time_stretch(x, 1.0 / factor)?;
    let samples = resample_to_len(&stretched.samples, x.len());
    Ok(Waveform {
        samples,
        sample_rate: x.sample_rate,
    })
}
