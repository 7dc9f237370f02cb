//! Synthetic multi-annotator EEG.
//!
//! Background is pink noise plus an alpha rhythm. A fraction of windows carry
//! a spike-and-wave discharge whose size is set by a latent salience; eight
//! simulated annotators vote on each window with logistic response curves.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::{
    split, Dataset, EEGSample, DEFAULT_CHANNELS, DEFAULT_SAMPLE_RATE_HZ, DEFAULT_SPLIT_FRACTIONS,
    DEFAULT_TIME_STEPS, NUM_ANNOTATORS,
};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackgroundConfig {
    /// Spectral exponent: power falls as 1/f^exponent.
    pub pink_exponent: f64,
    pub noise_rms_uv: f64,
    pub alpha_amplitude_uv: f64,
    pub alpha_band_hz: (f64, f64),
}

impl Default for BackgroundConfig {
    fn default() -> Self {
        BackgroundConfig {
            pink_exponent: 1.0,
            noise_rms_uv: 20.0,
            alpha_amplitude_uv: 10.0,
            alpha_band_hz: (8.0, 12.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpikeMorphology {
    pub transient_ms: (f64, f64),
    pub slow_wave_ms: (f64, f64),
    /// Peak amplitude at salience 1.
    pub amplitude_uv: (f64, f64),
    /// Slow-wave peak relative to the transient peak.
    pub slow_wave_ratio: f64,
    /// Half-extent of the affected channel run.
    pub spread_channels: (usize, usize),
}

impl Default for SpikeMorphology {
    fn default() -> Self {
        SpikeMorphology {
            transient_ms: (20.0, 70.0),
            slow_wave_ms: (150.0, 350.0),
            amplitude_uv: (150.0, 250.0),
            slow_wave_ratio: 0.5,
            spread_channels: (4, 10),
        }
    }
}

/// Annotator `j` votes positive with probability
/// `sigmoid(sensitivities[j] * (s - biases[j]) + noise * e)`, `e ~ N(0, 1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnnotatorModel {
    pub sensitivities: Vec<f64>,
    pub biases: Vec<f64>,
    pub noise: f64,
}

impl Default for AnnotatorModel {
    fn default() -> Self {
        let n = NUM_ANNOTATORS;
        AnnotatorModel {
            sensitivities: (0..n).map(|j| 10.0 + 4.0 * ((j * 3) % n) as f64 / (n - 1) as f64).collect(),
            biases: (0..n).map(|j| 0.35 + 0.3 * j as f64 / (n - 1) as f64).collect(),
            noise: 1.0,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl AnnotatorModel {
    pub fn validate(&self) -> Result<()> {
        if self.sensitivities.len() != NUM_ANNOTATORS || self.biases.len() != NUM_ANNOTATORS {
            return Err(Error::Config(format!(
                "annotator model needs exactly {NUM_ANNOTATORS} sensitivities and biases"
            )));
        }
        if !(self.noise >= 0.0) || self.sensitivities.iter().chain(&self.biases).any(|v| !v.is_finite()) {
            return Err(Error::Config("annotator parameters must be finite, noise >= 0".into()));
        }
        Ok(())
    }

    /// Draws the vote count for one window of salience `s`.
    pub fn vote<R: Rng>(&self, salience: f64, rng: &mut R) -> u8 {
        let mut votes = 0;
        for (a, b) in self.sensitivities.iter().zip(&self.biases) {
            let e: f64 = StandardNormal.sample(rng);
            let p = sigmoid(a * (salience - b) + self.noise * e);
            if rng.random::<f64>() < p {
                votes += 1;
            }
        }
        votes
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub seed: u64,
    pub time_steps: usize,
    pub channels: usize,
    pub sample_rate_hz: f64,
    /// Fraction of windows containing a discharge.
    pub spike_rate: f64,
    pub background: BackgroundConfig,
    pub spike: SpikeMorphology,
    pub annotators: AnnotatorModel,
    /// Gives every window a discharge of this salience.
    pub forced_salience: Option<f64>,
    pub split_fractions: [f64; 3],
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_samples: 2000,
            seed: 0,
            time_steps: DEFAULT_TIME_STEPS,
            channels: DEFAULT_CHANNELS,
            sample_rate_hz: DEFAULT_SAMPLE_RATE_HZ,
            spike_rate: 0.5,
            background: BackgroundConfig::default(),
            spike: SpikeMorphology::default(),
            annotators: AnnotatorModel::default(),
            forced_salience: None,
            split_fractions: DEFAULT_SPLIT_FRACTIONS,
        }
    }
}

fn check_range(name: &str, (lo, hi): (f64, f64)) -> Result<()> {
    if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
        return Err(Error::Config(format!("{name} range ({lo}, {hi}) must be positive and ordered")));
    }
    Ok(())
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::Config("n_samples must be positive".into()));
        }
        if self.time_steps < 4 || self.channels == 0 || !(self.sample_rate_hz > 0.0) {
            return Err(Error::Config("window shape and sample rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.spike_rate) {
            return Err(Error::Config(format!("spike_rate {} outside [0, 1]", self.spike_rate)));
        }
        if let Some(s) = self.forced_salience {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::Config(format!("forced salience {s} outside [0, 1]")));
            }
        }
        check_range("transient width", self.spike.transient_ms)?;
        check_range("slow-wave width", self.spike.slow_wave_ms)?;
        check_range("amplitude", self.spike.amplitude_uv)?;
        let window_ms = 1000.0 * self.time_steps as f64 / self.sample_rate_hz;
        if self.spike.transient_ms.1 + self.spike.slow_wave_ms.1 > window_ms {
            return Err(Error::Config("discharge does not fit in the window".into()));
        }
        if self.spike.spread_channels.0 > self.spike.spread_channels.1 {
            return Err(Error::Config("channel spread range is not ordered".into()));
        }
        let bg = &self.background;
        if !(bg.noise_rms_uv >= 0.0) || !(bg.alpha_amplitude_uv >= 0.0) || !bg.pink_exponent.is_finite() {
            return Err(Error::Config("background parameters must be finite and nonnegative".into()));
        }
        self.annotators.validate()
    }
}

fn pink_noise(rng: &mut ChaCha8Rng, fft: &dyn Fft<f64>, n: usize, exponent: f64) -> Vec<f64> {
    let mut spec = vec![Complex::new(0.0, 0.0); n];
    for k in 1..=n / 2 {
        let amp = (k as f64).powf(-exponent / 2.0);
        let re: f64 = StandardNormal.sample(rng);
        let im: f64 = StandardNormal.sample(rng);
        spec[k] = Complex::new(re * amp, im * amp);
        if k == n - k {
            spec[k].im = 0.0;
        } else {
            spec[n - k] = spec[k].conj();
        }
    }
    fft.process(&mut spec);
    let x: Vec<f64> = spec.iter().map(|c| c.re).collect();
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    if rms > 0.0 {
        x.into_iter().map(|v| v / rms).collect()
    } else {
        x
    }
}

/// Triangular transient followed by a half-sine slow wave, both negative.
fn discharge_waveform(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> Vec<f64> {
    let m = &cfg.spike;
    let fs = cfg.sample_rate_hz;
    let transient = rng.random_range(m.transient_ms.0..=m.transient_ms.1) / 1000.0 * fs;
    let slow = rng.random_range(m.slow_wave_ms.0..=m.slow_wave_ms.1) / 1000.0 * fs;
    let total = transient + slow;
    let onset = rng.random_range(0.0..=(cfg.time_steps as f64 - total).max(0.0));
    (0..cfg.time_steps)
        .map(|t| {
            let u = t as f64 - onset;
            if u < 0.0 || u >= total {
                0.0
            } else if u < transient {
                -(1.0 - (2.0 * u / transient - 1.0).abs())
            } else {
                -m.slow_wave_ratio * (PI * (u - transient) / slow).sin()
            }
        })
        .collect()
}

fn generate_one(index: usize, cfg: &SynthConfig, fft: &dyn Fft<f64>) -> EEGSample {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let (t_len, c_len) = (cfg.time_steps, cfg.channels);
    let bg = &cfg.background;
    let mut x = vec![0.0f64; t_len * c_len];

    let alpha_hz = rng.random_range(bg.alpha_band_hz.0..=bg.alpha_band_hz.1);
    let alpha_phase = rng.random_range(0.0..2.0 * PI);
    for c in 0..c_len {
        let noise = pink_noise(&mut rng, fft, t_len, bg.pink_exponent);
        let gain = rng.random_range(0.5..=1.0) * bg.alpha_amplitude_uv;
        for t in 0..t_len {
            let alpha = (2.0 * PI * alpha_hz * t as f64 / cfg.sample_rate_hz + alpha_phase).sin();
            x[t * c_len + c] = bg.noise_rms_uv * noise[t] + gain * alpha;
        }
    }

    let salience = match cfg.forced_salience {
        Some(s) => s,
        None if rng.random::<f64>() < cfg.spike_rate => rng.random::<f64>(),
        None => 0.0,
    };
    if salience > 0.0 {
        let wave = discharge_waveform(&mut rng, cfg);
        let amp = salience * rng.random_range(cfg.spike.amplitude_uv.0..=cfg.spike.amplitude_uv.1);
        let center = rng.random_range(0..c_len) as f64;
        let half = rng.random_range(cfg.spike.spread_channels.0..=cfg.spike.spread_channels.1) as f64;
        let sigma = (half / 2.0).max(0.5);
        for c in 0..c_len {
            let d = c as f64 - center;
            if d.abs() > half {
                continue;
            }
            let g = amp * (-d * d / (2.0 * sigma * sigma)).exp();
            for t in 0..t_len {
                x[t * c_len + c] += g * wave[t];
            }
        }
    }

    EEGSample {
        sample_id: index as u64,
        votes: cfg.annotators.vote(salience, &mut rng),
        values: x.into_iter().map(|v| v as f32).collect(),
    }
}

/// Generates `n_samples` windows with ids `0..n` and a stratified split
/// seeded by the same seed.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let fft: Arc<dyn Fft<f64>> = FftPlanner::new().plan_fft_inverse(cfg.time_steps);
    let samples: Vec<EEGSample> = (0..cfg.n_samples)
        .into_par_iter()
        .map(|i| generate_one(i, cfg, fft.as_ref()))
        .collect();
    let mut manifest = split(&samples, cfg.split_fractions, cfg.seed)?
        .with_shape(cfg.time_steps, cfg.channels)
        .with_sample_rate(cfg.sample_rate_hz);
    manifest.generator_seed = Some(cfg.seed);
    manifest.config_digest = Some(crate::digest::json_digest(cfg));
    Ok(Dataset { manifest, samples })
}
