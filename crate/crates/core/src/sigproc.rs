//! EEG preprocessing: power-line notch, Butterworth high-pass, resampling.
//!
//! Filters are causal IIR cascades of biquads in transposed direct form II,
//! starting from zero state. All functions are pure.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FilterSpec {
    Notch {
        center_hz: f64,
        sample_rate_hz: f64,
        q: f64,
    },
    Highpass {
        cutoff_hz: f64,
        sample_rate_hz: f64,
        order: usize,
    },
}

pub const DEFAULT_NOTCH_Q: f64 = 30.0;
pub const DEFAULT_HIGHPASS_ORDER: usize = 4;

impl FilterSpec {
    pub fn notch(center_hz: f64, sample_rate_hz: f64) -> Self {
        FilterSpec::Notch {
            center_hz,
            sample_rate_hz,
            q: DEFAULT_NOTCH_Q,
        }
    }

    pub fn highpass(cutoff_hz: f64, sample_rate_hz: f64) -> Self {
        FilterSpec::Highpass {
            cutoff_hz,
            sample_rate_hz,
            order: DEFAULT_HIGHPASS_ORDER,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (f, fs) = match *self {
            FilterSpec::Notch {
                center_hz,
                sample_rate_hz,
                q,
            } => {
                if !(q > 0.0) {
                    return Err(Error::Config(format!("notch Q must be > 0, got {q}")));
                }
                (center_hz, sample_rate_hz)
            }
            FilterSpec::Highpass {
                cutoff_hz,
                sample_rate_hz,
                order,
            } => {
                if order == 0 {
                    return Err(Error::Config("high-pass order must be >= 1".into()));
                }
                (cutoff_hz, sample_rate_hz)
            }
        };
        if !(fs > 0.0) || !(f > 0.0) {
            return Err(Error::Config(format!(
                "frequencies must be positive (f = {f}, fs = {fs})"
            )));
        }
        if f >= fs / 2.0 {
            return Err(Error::Config(format!(
                "{f} Hz is not below the Nyquist frequency {} Hz",
                fs / 2.0
            )));
        }
        Ok(())
    }
}

/// Normalized biquad (`a0 = 1`).
#[derive(Clone, Copy, Debug, PartialEq)]
struct Biquad {
    b0: f64,
    b1: f64,
    b2: f64,
    a1: f64,
    a2: f64,
}

impl Biquad {
    fn notch(f0: f64, fs: f64, q: f64) -> Self {
        let w0 = 2.0 * PI * f0 / fs;
        let alpha = w0.sin() / (2.0 * q);
        let c = w0.cos();
        let a0 = 1.0 + alpha;
        Biquad {
            b0: 1.0 / a0,
            b1: -2.0 * c / a0,
            b2: 1.0 / a0,
            a1: -2.0 * c / a0,
            a2: (1.0 - alpha) / a0,
        }
    }

    /// Second-order high-pass section via the bilinear transform with
    /// pre-warping at the cutoff.
    fn highpass(fc: f64, fs: f64, q: f64) -> Self {
        let w0 = 2.0 * PI * fc / fs;
        let alpha = w0.sin() / (2.0 * q);
        let c = w0.cos();
        let a0 = 1.0 + alpha;
        Biquad {
            b0: (1.0 + c) / 2.0 / a0,
            b1: -(1.0 + c) / a0,
            b2: (1.0 + c) / 2.0 / a0,
            a1: -2.0 * c / a0,
            a2: (1.0 - alpha) / a0,
        }
    }

    /// First-order high-pass section (for odd orders), stored as a biquad.
    fn highpass_first_order(fc: f64, fs: f64) -> Self {
        let k = (PI * fc / fs).tan();
        let norm = 1.0 / (1.0 + k);
        Biquad {
            b0: norm,
            b1: -norm,
            b2: 0.0,
            a1: (k - 1.0) * norm,
            a2: 0.0,
        }
    }

    fn run(&self, x: &[f64]) -> Vec<f64> {
        let (mut s1, mut s2) = (0.0, 0.0);
        x.iter()
            .map(|&v| {
                let y = self.b0 * v + s1;
                s1 = self.b1 * v - self.a1 * y + s2;
                s2 = self.b2 * v - self.a2 * y;
                y
            })
            .collect()
    }
}

fn butterworth_highpass_sections(fc: f64, fs: f64, order: usize) -> Vec<Biquad> {
    let mut sections: Vec<Biquad> = (1..=order / 2)
        .map(|k| {
            let q = 1.0 / (2.0 * ((2 * k - 1) as f64 * PI / (2 * order) as f64).sin());
            Biquad::highpass(fc, fs, q)
        })
        .collect();
    if order % 2 == 1 {
        sections.push(Biquad::highpass_first_order(fc, fs));
    }
    sections
}

fn check_length(signal: &[f64]) -> Result<()> {
    if signal.len() < 3 {
        return Err(Error::Config(format!(
            "filtering needs at least 3 samples, got {}",
            signal.len()
        )));
    }
    Ok(())
}

/// Second-order IIR notch.
pub fn notch_filter(signal: &[f64], spec: &FilterSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    let FilterSpec::Notch {
        center_hz,
        sample_rate_hz,
        q,
    } = *spec
    else {
        return Err(Error::Config("notch_filter needs a notch spec".into()));
    };
    check_length(signal)?;
    Ok(Biquad::notch(center_hz, sample_rate_hz, q).run(signal))
}

/// Butterworth high-pass as a cascade of second-order sections.
pub fn highpass_filter(signal: &[f64], spec: &FilterSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    let FilterSpec::Highpass {
        cutoff_hz,
        sample_rate_hz,
        order,
    } = *spec
    else {
        return Err(Error::Config("highpass_filter needs a high-pass spec".into()));
    };
    check_length(signal)?;
    let mut y = signal.to_vec();
    for s in butterworth_highpass_sections(cutoff_hz, sample_rate_hz, order) {
        y = s.run(&y);
    }
    Ok(y)
}

/// Sinc lobes kept on each side of the interpolation kernel.
pub const RESAMPLE_HALF_TAPS: usize = 16;

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Hann-windowed sinc interpolation to a new rate.
///
/// When downsampling, the kernel is stretched so its cutoff sits at the
/// output Nyquist frequency. Weights are normalized per output sample, which
/// keeps constants exact and tames the edges.
pub fn resample(signal: &[f64], fs_in: f64, fs_out: f64) -> Result<Vec<f64>> {
    if !(fs_in > 0.0) || !(fs_out > 0.0) {
        return Err(Error::Config(format!(
            "sample rates must be positive (in {fs_in}, out {fs_out})"
        )));
    }
    if signal.is_empty() {
        return Ok(Vec::new());
    }
    let n_out = (signal.len() as f64 * fs_out / fs_in).round() as usize;
    let ratio = fs_in / fs_out;
    let cutoff = (fs_out / fs_in).min(1.0);
    let half_width = RESAMPLE_HALF_TAPS as f64 / cutoff;
    let n = signal.len() as isize;
    Ok((0..n_out)
        .map(|m| {
            let center = m as f64 * ratio;
            let lo = (center - half_width).ceil() as isize;
            let hi = (center + half_width).floor() as isize;
            let (mut acc, mut wsum) = (0.0, 0.0);
            for i in lo.max(0)..=hi.min(n - 1) {
                let u = i as f64 - center;
                let window = 0.5 * (1.0 + (PI * u / half_width).cos());
                let w = cutoff * sinc(cutoff * u) * window;
                acc += w * signal[i as usize];
                wsum += w;
            }
            if wsum.abs() > 1e-12 {
                acc / wsum
            } else {
                0.0
            }
        })
        .collect())
}

/// Settings for the full per-channel pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub notch_hz: f64,
    pub notch_q: f64,
    pub highpass_hz: f64,
    pub highpass_order: usize,
    pub target_rate_hz: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            notch_hz: 60.0,
            notch_q: DEFAULT_NOTCH_Q,
            highpass_hz: 0.5,
            highpass_order: DEFAULT_HIGHPASS_ORDER,
            target_rate_hz: 128.0,
        }
    }
}

/// Notch, high-pass and resample every channel of a time-major window.
/// Returns the new time-major window and its number of time steps.
pub fn preprocess_window(
    values: &[f64],
    channels: usize,
    fs_in: f64,
    cfg: &PreprocessConfig,
) -> Result<(Vec<f64>, usize)> {
    if channels == 0 || values.len() % channels != 0 {
        return Err(Error::Dimension(format!(
            "{} values do not split into {channels} channels",
            values.len()
        )));
    }
    let t = values.len() / channels;
    let notch = FilterSpec::Notch {
        center_hz: cfg.notch_hz,
        sample_rate_hz: fs_in,
        q: cfg.notch_q,
    };
    let hp = FilterSpec::Highpass {
        cutoff_hz: cfg.highpass_hz,
        sample_rate_hz: fs_in,
        order: cfg.highpass_order,
    };
    let mut per_channel = Vec::with_capacity(channels);
    for c in 0..channels {
        let x: Vec<f64> = (0..t).map(|i| values[i * channels + c]).collect();
        let y = highpass_filter(&notch_filter(&x, &notch)?, &hp)?;
        per_channel.push(resample(&y, fs_in, cfg.target_rate_hz)?);
    }
    let t_out = per_channel[0].len();
    let mut out = vec![0.0; t_out * channels];
    for (c, ch) in per_channel.iter().enumerate() {
        for (i, v) in ch.iter().enumerate() {
            out[i * channels + c] = *v;
        }
    }
    Ok((out, t_out))
}
