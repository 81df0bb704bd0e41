//! Synthetic datasets with planted TRFs, attention gain modulation and a
//! controlled signal-to-noise ratio.
//!
//! EEG channel `c` of a trial is
//! `g_att * (trf_c * env_att) + g_ign * (trf_c * env_ign) + noise`,
//! with the noise scaled so the pre-standardisation power ratio matches the
//! requested SNR. Every random stream is derived from the config seed, so a
//! dataset is bit-reproducible.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Participant, Speaker, SpeakerFeatures, TrialBundle};
use crate::error::{AadError, Result};
use crate::features::{onset_envelope_raw, FeatureKind, FeatureSignal, FEATURE_FS};
use crate::linear::{LagSpec, SpeakerRole, Trf};
use crate::signal::{mean_std, standardize, standardize_slice, MultiSignal, Signal};

/// Cutoff of the surrogate speech envelope.
const FEATURE_CUTOFF_HZ: f64 = 7.5;
const FEATURE_FILTER_ORDER: usize = 256;

pub fn seed_for(base: u64, tag: &[u64]) -> u64 {
    // splitmix64 over the tag words
    let mut z = base ^ 0x9E37_79B9_7F4A_7C15;
    for &t in tag {
        z = z.wrapping_add(t.wrapping_mul(0x9E37_79B9_7F4A_7C15)).wrapping_add(0x632B_E59B_D9B4_E019);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

pub(crate) fn gaussian_noise(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

fn lowpass_taps(cutoff: f64, fs: f64, order: usize) -> Vec<f64> {
    let fc = cutoff / fs;
    let centre = order as f64 / 2.0;
    let mut h: Vec<f64> = (0..=order)
        .map(|n| {
            let x = n as f64 - centre;
            let s = if x == 0.0 { 2.0 * fc } else { (2.0 * PI * fc * x).sin() / (PI * x) };
            s * (0.54 - 0.46 * (2.0 * PI * n as f64 / order as f64).cos())
        })
        .collect();
    let sum: f64 = h.iter().sum();
    h.iter_mut().for_each(|v| *v /= sum);
    h
}

/// Envelope before standardisation: low-passed Gaussian noise lifted to be
/// strictly positive.
pub fn gen_feature_raw(duration: f64, fs: f64, seed: u64) -> Result<Signal> {
    if !(duration > 0.0) {
        return Err(AadError::param("duration must be positive"));
    }
    let n = (duration * fs).round() as usize;
    let h = lowpass_taps(FEATURE_CUTOFF_HZ.min(fs / 4.0), fs, FEATURE_FILTER_ORDER);
    let w = gaussian_noise(n + h.len(), seed);
    // valid part of the convolution only, so no edge transient
    let mut y: Vec<f64> = (0..n)
        .map(|i| h.iter().enumerate().map(|(k, hk)| hk * w[i + h.len() - 1 - k]).sum())
        .collect();
    let min = y.iter().cloned().fold(f64::INFINITY, f64::min);
    let (_, sd) = mean_std(&y);
    y.iter_mut().for_each(|v| *v += -min + 0.1 * sd);
    Signal::new(y, fs)
}

/// Standardised surrogate speech envelope band-limited below 8 Hz.
pub fn gen_feature(duration: f64, fs: f64, seed: u64) -> Result<FeatureSignal> {
    let raw = gen_feature_raw(duration, fs, seed)?;
    Ok(FeatureSignal::new(standardize(&raw)?, FeatureKind::Envelope))
}

/// One Gaussian-windowed deflection of a planted TRF.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    /// seconds
    pub latency: f64,
    pub amplitude: f64,
    /// Gaussian standard deviation, seconds
    pub width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrfShape {
    pub peaks: Vec<Peak>,
    /// Per-channel scale of the shared shape; its length is the channel count.
    pub channel_gains: Vec<f64>,
}

impl Default for TrfShape {
    fn default() -> Self {
        Self {
            peaks: vec![
                Peak { latency: 0.1, amplitude: 1.0, width: 0.04 },
                Peak { latency: 0.2, amplitude: -0.7, width: 0.045 },
            ],
            channel_gains: vec![1.0, 0.6],
        }
    }
}

/// Planted TRF on the default 160-tap axis.
pub fn gen_trf(shape: &TrfShape, n_channels: usize) -> Result<Trf> {
    let lags = LagSpec::forward_default();
    let (lo, hi) = (lags.lag_min as f64 / lags.fs, lags.lag_max as f64 / lags.fs);
    for p in &shape.peaks {
        if !(p.latency >= lo && p.latency <= hi) {
            return Err(AadError::param(format!("peak latency {} s outside [{lo}, {hi}] s", p.latency)));
        }
        if !(p.width > 0.0) {
            return Err(AadError::param("peak width must be positive"));
        }
    }
    let lat = lags.latencies();
    let base: Vec<f64> = lat
        .iter()
        .map(|&t| {
            shape
                .peaks
                .iter()
                .map(|p| p.amplitude * (-0.5 * ((t - p.latency) / p.width).powi(2)).exp())
                .sum()
        })
        .collect();
    let channels: Vec<String> = (0..n_channels).map(|c| format!("ch{}", c + 1)).collect();
    let coefficients = (0..n_channels)
        .map(|c| {
            let g = shape.channel_gains.get(c).copied().unwrap_or(1.0);
            base.iter().map(|v| g * v).collect()
        })
        .collect();
    Ok(Trf { coefficients, channels, lags, kind: FeatureKind::Envelope, role: SpeakerRole::Attended, lambda: 0.0 })
}

/// `y[t] = sum_l kernel[l] x[t - l]` over the lag window, zero-filled.
pub fn convolve_trf(x: &[f64], kernel: &[f64], lags: &LagSpec) -> Vec<f64> {
    let n = x.len() as i64;
    (0..n)
        .map(|t| {
            lags.lags()
                .zip(kernel)
                .filter_map(|(l, k)| {
                    let u = t - l;
                    (u >= 0 && u < n).then(|| k * x[u as usize])
                })
                .sum()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub participants: usize,
    pub trials: usize,
    /// seconds per trial
    pub duration: f64,
    pub gain_attended: f64,
    pub gain_ignored: f64,
    pub snr_db: f64,
    pub seed: u64,
    pub trf: TrfShape,
    /// 1/f noise instead of white
    pub pink_noise: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            participants: 18,
            trials: 16,
            duration: 150.0,
            gain_attended: 1.0,
            gain_ignored: 0.5,
            snr_db: -5.0,
            seed: 0,
            trf: TrfShape::default(),
            pink_noise: false,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gain_attended > 0.0 && self.gain_attended >= self.gain_ignored && self.gain_ignored >= 0.0) {
            return Err(AadError::Config("need gain_attended > 0 and gain_attended >= gain_ignored >= 0".into()));
        }
        if !(self.duration > 0.0) || self.trials == 0 || self.participants == 0 {
            return Err(AadError::Config("need positive duration, trials and participants".into()));
        }
        if self.trf.channel_gains.is_empty() {
            return Err(AadError::Config("planted TRF needs at least one channel".into()));
        }
        Ok(())
    }
}

/// Speaker attended in a 1-based trial: blocks of four alternate, starting
/// with the male narrator.
pub fn attended_speaker(trial_index: usize) -> Speaker {
    if ((trial_index - 1) / 4).is_multiple_of(2) {
        Speaker::Male
    } else {
        Speaker::Female
    }
}

fn pink(n: usize, seed: u64) -> Vec<f64> {
    let w = gaussian_noise(n, seed);
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut buf: Vec<Complex64> = w.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fwd.process(&mut buf);
    for (k, v) in buf.iter_mut().enumerate() {
        let f = k.min(n - k) as f64;
        *v = if f == 0.0 { Complex64::default() } else { *v / f.sqrt() };
    }
    inv.process(&mut buf);
    buf.iter().map(|c| c.re).collect()
}

/// Feature pair of one speaker in one trial.
fn speaker_features(duration: f64, seed: u64) -> Result<SpeakerFeatures> {
    let raw = gen_feature_raw(duration, FEATURE_FS, seed)?;
    let onsets = onset_envelope_raw(&raw);
    Ok(SpeakerFeatures {
        envelope: FeatureSignal::new(standardize(&raw)?, FeatureKind::Envelope),
        onsets: FeatureSignal::new(standardize(&onsets)?, FeatureKind::Onsets),
    })
}

/// Measured pre-standardisation SNR in dB is returned alongside the trial.
pub fn gen_trial_with_snr(
    config: &SynthConfig,
    trial_index: usize,
    seed: u64,
) -> Result<(TrialBundle, f64)> {
    config.validate()?;
    let trf = gen_trf(&config.trf, config.trf.channel_gains.len())?;
    let male = speaker_features(config.duration, seed_for(seed, &[1]))?;
    let female = speaker_features(config.duration, seed_for(seed, &[2]))?;
    let label = attended_speaker(trial_index);
    let (att, ign) = match label {
        Speaker::Male => (&male, &female),
        Speaker::Female => (&female, &male),
    };
    let lags = trf.lags;
    let n = att.envelope.len();
    let mut p_sig = 0.0;
    let mut p_noise = 0.0;
    let mut data = Vec::with_capacity(trf.n_channels());
    for (c, kernel) in trf.coefficients.iter().enumerate() {
        let a = convolve_trf(att.envelope.samples(), kernel, &lags);
        let i = convolve_trf(ign.envelope.samples(), kernel, &lags);
        let clean: Vec<f64> =
            a.iter().zip(&i).map(|(a, i)| config.gain_attended * a + config.gain_ignored * i).collect();
        let sig_power = clean.iter().map(|v| v * v).sum::<f64>() / n as f64;
        let raw_noise = if config.pink_noise {
            pink(n, seed_for(seed, &[3, c as u64]))
        } else {
            gaussian_noise(n, seed_for(seed, &[3, c as u64]))
        };
        let noise_power = raw_noise.iter().map(|v| v * v).sum::<f64>() / n as f64;
        let scale = if sig_power > 0.0 {
            (sig_power / 10f64.powf(config.snr_db / 10.0) / noise_power).sqrt()
        } else {
            1.0
        };
        let noise: Vec<f64> = raw_noise.iter().map(|v| v * scale).collect();
        p_sig += sig_power;
        p_noise += noise.iter().map(|v| v * v).sum::<f64>() / n as f64;
        let eeg: Vec<f64> = clean.iter().zip(&noise).map(|(s, e)| s + e).collect();
        data.push(standardize_slice(&eeg)?);
    }
    let snr = 10.0 * (p_sig / p_noise).log10();
    let eeg = MultiSignal::new(trf.channels.clone(), data, FEATURE_FS)?;
    let trial = TrialBundle {
        index: trial_index,
        eeg,
        attended_label: label,
        attended: att.clone(),
        ignored: ign.clone(),
    };
    Ok((trial, snr))
}

pub fn gen_trial(config: &SynthConfig, trial_index: usize, seed: u64) -> Result<TrialBundle> {
    gen_trial_with_snr(config, trial_index, seed).map(|(t, _)| t)
}

pub fn gen_participant(config: &SynthConfig, participant: usize) -> Result<Participant> {
    let trials = (1..=config.trials)
        .map(|k| gen_trial(config, k, seed_for(config.seed, &[participant as u64, k as u64])))
        .collect::<Result<Vec<_>>>()?;
    Ok(Participant { id: format!("P{:02}", participant + 1), trials })
}

pub fn gen_dataset(config: &SynthConfig) -> Result<Dataset> {
    config.validate()?;
    let participants = (0..config.participants)
        .map(|p| gen_participant(config, p))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { participants })
}

/// Ground truth written next to a synthetic dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthTruth {
    pub config: SynthConfig,
    pub trf: Trf,
}

impl SynthTruth {
    pub fn new(config: &SynthConfig) -> Result<Self> {
        Ok(Self { config: config.clone(), trf: gen_trf(&config.trf, config.trf.channel_gains.len())? })
    }
}
