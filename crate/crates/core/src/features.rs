//! Speech features: the gammatone-subband temporal envelope and its onsets.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{AadError, Result};
use crate::signal::{resample, standardize, MultiSignal, Signal};

/// Sampling rate every feature ends up at.
pub const FEATURE_FS: f64 = 64.0;

pub const N_BANDS: usize = 28;
pub const BANK_FMIN: f64 = 50.0;
pub const BANK_FMAX: f64 = 5000.0;
const GAMMATONE_ORDER: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Envelope,
    Onsets,
}

impl FeatureKind {
    pub const ALL: [FeatureKind; 2] = [FeatureKind::Envelope, FeatureKind::Onsets];

    pub fn as_str(self) -> &'static str {
        match self {
            FeatureKind::Envelope => "envelope",
            FeatureKind::Onsets => "onsets",
        }
    }
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FeatureKind {
    type Err = AadError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "envelope" => Ok(FeatureKind::Envelope),
            "onsets" | "onset_envelope" => Ok(FeatureKind::Onsets),
            other => Err(AadError::param(format!("unknown feature kind {other:?}"))),
        }
    }
}

/// A speech feature time series tagged with its kind.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSignal {
    pub signal: Signal,
    pub kind: FeatureKind,
}

impl FeatureSignal {
    pub fn new(signal: Signal, kind: FeatureKind) -> Self {
        Self { signal, kind }
    }

    pub fn samples(&self) -> &[f64] {
        self.signal.samples()
    }

    pub fn len(&self) -> usize {
        self.signal.len()
    }

    pub fn is_empty(&self) -> bool {
        self.signal.is_empty()
    }

    pub fn fs(&self) -> f64 {
        self.signal.fs()
    }
}

/// Glasberg & Moore ERB-number of a frequency in Hz.
pub fn erb_number(f: f64) -> f64 {
    21.4 * (1.0 + 0.00437 * f).log10()
}

fn erb_number_inverse(e: f64) -> f64 {
    (10f64.powf(e / 21.4) - 1.0) / 0.00437
}

/// Equivalent rectangular bandwidth (Hz) at `f`.
pub fn erb_bandwidth(f: f64) -> f64 {
    24.7 * (4.37 * f / 1000.0 + 1.0)
}

/// `n` centre frequencies equally spaced on the ERB-number scale, with the
/// endpoints pinned to exactly `fmin` and `fmax`.
pub fn erb_centers(n: usize, fmin: f64, fmax: f64) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(AadError::param("need at least two centre frequencies"));
    }
    if !(fmin > 0.0 && fmin < fmax) {
        return Err(AadError::param(format!("need 0 < fmin < fmax, got {fmin}, {fmax}")));
    }
    let (lo, hi) = (erb_number(fmin), erb_number(fmax));
    let step = (hi - lo) / (n - 1) as f64;
    let mut out: Vec<f64> = (0..n).map(|i| erb_number_inverse(lo + step * i as f64)).collect();
    out[0] = fmin;
    out[n - 1] = fmax;
    Ok(out)
}

/// Fourth-order gammatone filterbank on an ERB-spaced grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GammatoneBank {
    center_frequencies: Vec<f64>,
    fs: f64,
}

impl GammatoneBank {
    pub fn new(fs: f64) -> Result<Self> {
        Self::with_centers(erb_centers(N_BANDS, BANK_FMIN, BANK_FMAX)?, fs)
    }

    pub fn with_centers(center_frequencies: Vec<f64>, fs: f64) -> Result<Self> {
        if center_frequencies.windows(2).any(|w| w[1] <= w[0]) {
            return Err(AadError::param("centre frequencies must be strictly increasing"));
        }
        if center_frequencies.iter().any(|&f| !(f > 0.0 && f < fs / 2.0)) {
            return Err(AadError::param("centre frequency outside (0, fs/2)"));
        }
        Ok(Self { center_frequencies, fs })
    }

    pub fn center_frequencies(&self) -> &[f64] {
        &self.center_frequencies
    }

    pub fn fs(&self) -> f64 {
        self.fs
    }

    pub fn order(&self) -> usize {
        GAMMATONE_ORDER
    }

    pub fn n_bands(&self) -> usize {
        self.center_frequencies.len()
    }

    /// Filters `x` through band `band`: a cascade of four complex one-pole
    /// resonators at the centre frequency. The real part, doubled and scaled
    /// by `(1 - r)^4`, has unit gain at the centre frequency.
    pub fn filter_band(&self, band: usize, x: &[f64]) -> Vec<f64> {
        let fc = self.center_frequencies[band];
        let b = 1.019 * erb_bandwidth(fc);
        let r = (-2.0 * PI * b / self.fs).exp();
        let theta = 2.0 * PI * fc / self.fs;
        let (pr, pi) = (r * theta.cos(), r * theta.sin());
        let gain = 2.0 * (1.0 - r).powi(GAMMATONE_ORDER as i32);
        let mut state = [(0.0f64, 0.0f64); GAMMATONE_ORDER];
        x.iter()
            .map(|&v| {
                let (mut ur, mut ui) = (v, 0.0);
                for s in state.iter_mut() {
                    let yr = ur + pr * s.0 - pi * s.1;
                    let yi = ui + pr * s.1 + pi * s.0;
                    *s = (yr, yi);
                    ur = yr;
                    ui = yi;
                }
                gain * ur
            })
            .collect()
    }
}

/// One output channel per gammatone band.
pub fn gammatone_subbands(audio: &Signal, bank: &GammatoneBank) -> Result<MultiSignal> {
    if audio.fs() != bank.fs() {
        return Err(AadError::param(format!(
            "audio at {} Hz, filterbank at {} Hz",
            audio.fs(),
            bank.fs()
        )));
    }
    let names = bank.center_frequencies().iter().map(|f| format!("gt{f:.1}")).collect();
    let data = (0..bank.n_bands()).map(|b| bank.filter_band(b, audio.samples())).collect();
    MultiSignal::new(names, data, audio.fs())
}

/// Envelope before standardisation: mean of the half-wave rectified subbands,
/// resampled to 64 Hz. Negative resampling ripple is clipped so the result
/// stays non-negative.
pub fn auditory_envelope_raw(audio: &Signal) -> Result<Signal> {
    let bank = GammatoneBank::new(audio.fs())?;
    let mut acc = vec![0.0; audio.len()];
    for band in 0..bank.n_bands() {
        let y = bank.filter_band(band, audio.samples());
        for (a, v) in acc.iter_mut().zip(y) {
            *a += v.max(0.0);
        }
    }
    let n = bank.n_bands() as f64;
    acc.iter_mut().for_each(|v| *v /= n);
    let env = resample(&Signal::new(acc, audio.fs())?, FEATURE_FS)?;
    let fs = env.fs();
    Signal::new(env.into_samples().into_iter().map(|v| v.max(0.0)).collect(), fs)
}

/// Standardised 64 Hz auditory envelope.
pub fn auditory_envelope(audio: &Signal) -> Result<FeatureSignal> {
    let raw = auditory_envelope_raw(audio)?;
    Ok(FeatureSignal::new(standardize(&raw)?, FeatureKind::Envelope))
}

/// Half-wave rectified first difference (scaled by fs) of an envelope. The
/// forward difference leaves the last sample undefined; it repeats the one
/// before it.
pub fn onset_envelope_raw(envelope: &Signal) -> Signal {
    let x = envelope.samples();
    let fs = envelope.fs();
    let mut d: Vec<f64> = x.windows(2).map(|w| ((w[1] - w[0]) * fs).max(0.0)).collect();
    let last = d.last().copied().unwrap_or(0.0);
    d.push(last);
    d.truncate(x.len());
    Signal::new(d, fs).expect("finite differences of finite samples")
}

/// Standardised onset envelope of an envelope feature.
///
/// Rectification is positively homogeneous and standardisation removes
/// scale, so the result is the same whether or not `envelope` was already
/// standardised.
pub fn onset_envelope(envelope: &FeatureSignal) -> Result<FeatureSignal> {
    if envelope.kind != FeatureKind::Envelope {
        return Err(AadError::param("onset envelope needs an envelope feature"));
    }
    let raw = onset_envelope_raw(&envelope.signal);
    Ok(FeatureSignal::new(standardize(&raw)?, FeatureKind::Onsets))
}

/// Both features of an audio waveform.
pub fn extract(audio: &Signal, kind: FeatureKind) -> Result<FeatureSignal> {
    let raw = auditory_envelope_raw(audio)?;
    match kind {
        FeatureKind::Envelope => Ok(FeatureSignal::new(standardize(&raw)?, FeatureKind::Envelope)),
        FeatureKind::Onsets => {
            Ok(FeatureSignal::new(standardize(&onset_envelope_raw(&raw))?, FeatureKind::Onsets))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linear::pearson;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    const AUDIO_FS: f64 = 44100.0;

    fn am_noise(seconds: f64, seed: u64) -> (Signal, Vec<f64>) {
        let n = (seconds * AUDIO_FS) as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let modulator = |t: f64| 0.5 * (1.0 - (2.0 * PI * 2.0 * t).cos());
        let x: Vec<f64> = (0..n)
            .map(|i| {
                let v: f64 = StandardNormal.sample(&mut rng);
                v * modulator(i as f64 / AUDIO_FS)
            })
            .collect();
        let m64 = (0..(seconds * FEATURE_FS) as usize).map(|i| modulator(i as f64 / FEATURE_FS)).collect();
        (Signal::new(x, AUDIO_FS).unwrap(), m64)
    }

    #[test]
    fn erb_grid_defaults() {
        let c = erb_centers(28, 50.0, 5000.0).unwrap();
        assert_eq!(c.len(), 28);
        assert_eq!(c[0], 50.0);
        assert_eq!(c[27], 5000.0);
        let e: Vec<f64> = c.iter().map(|&f| erb_number(f)).collect();
        // endpoint ERB-numbers from the formula: 1.8366 and 29.0805
        assert!((e[0] - 1.8366).abs() < 1e-3 && (e[27] - 29.0805).abs() < 1e-3);
        for w in e.windows(2) {
            assert!((w[1] - w[0] - 1.00905).abs() < 1e-4);
        }
        assert_eq!(erb_centers(2, 80.0, 900.0).unwrap(), vec![80.0, 900.0]);
        assert!(erb_centers(1, 50.0, 100.0).is_err());
        assert!(erb_centers(5, 100.0, 50.0).is_err());
    }

    #[test]
    fn subbands_shape_and_zero_input() {
        let bank = GammatoneBank::new(AUDIO_FS).unwrap();
        assert_eq!(bank.n_bands(), 28);
        assert_eq!(bank.order(), 4);
        let z = Signal::new(vec![0.0; 2000], AUDIO_FS).unwrap();
        let sb = gammatone_subbands(&z, &bank).unwrap();
        assert_eq!(sb.n_channels(), 28);
        assert!(sb.data().iter().flatten().all(|&v| v == 0.0));
        let wrong = Signal::new(vec![0.0; 10], 16000.0).unwrap();
        assert!(gammatone_subbands(&wrong, &bank).is_err());
    }

    #[test]
    fn tone_at_centre_peaks_in_its_band() {
        let bank = GammatoneBank::new(AUDIO_FS).unwrap();
        let n = (0.4 * AUDIO_FS) as usize;
        for (k, &fc) in bank.center_frequencies().iter().enumerate() {
            let tone: Vec<f64> = (0..n).map(|i| (2.0 * PI * fc * i as f64 / AUDIO_FS).sin()).collect();
            let tail = n / 2;
            let rms: Vec<f64> = (0..bank.n_bands())
                .map(|b| {
                    let y = bank.filter_band(b, &tone);
                    (y[tail..].iter().map(|v| v * v).sum::<f64>() / (n - tail) as f64).sqrt()
                })
                .collect();
            let argmax = (0..rms.len()).max_by(|&a, &b| rms[a].partial_cmp(&rms[b]).unwrap()).unwrap();
            assert_eq!(argmax, k, "tone at {fc} Hz");
            // unit peak gain: sine RMS is 1/sqrt(2)
            assert!((rms[k] * 2f64.sqrt() - 1.0).abs() < 0.05, "band {k} gain {}", rms[k] * 2f64.sqrt());
        }
    }

    #[test]
    fn silence_is_degenerate() {
        let z = Signal::new(vec![0.0; 44100], AUDIO_FS).unwrap();
        assert!(matches!(auditory_envelope(&z), Err(AadError::DegenerateSignal(_))));
    }

    #[test]
    fn envelope_tracks_modulator_and_onsets_are_sparser() {
        let (audio, modulator) = am_noise(8.0, 11);
        let raw = auditory_envelope_raw(&audio).unwrap();
        assert_eq!(raw.fs(), 64.0);
        assert_eq!(raw.len(), modulator.len());
        assert!(raw.samples().iter().all(|&v| v >= 0.0));
        let rho = pearson(raw.samples(), &modulator).unwrap();
        assert!(rho > 0.8, "envelope/modulator correlation {rho}");

        let env = auditory_envelope(&audio).unwrap();
        let z = pearson(env.samples(), raw.samples()).unwrap();
        assert!((z - 1.0).abs() < 1e-12);

        let onsets = onset_envelope_raw(&raw);
        assert!(onsets.samples().iter().all(|&v| v >= 0.0));
        let sparsity = |x: &[f64]| {
            let max = x.iter().cloned().fold(0.0, f64::max);
            x.iter().filter(|&&v| v < 0.1 * max).count() as f64 / x.len() as f64
        };
        assert!(sparsity(onsets.samples()) > sparsity(raw.samples()));

        // same result from the raw or the standardised envelope
        let a = onset_envelope(&FeatureSignal::new(raw.clone(), FeatureKind::Envelope)).unwrap();
        let b = onset_envelope(&env).unwrap();
        for (u, v) in a.samples().iter().zip(b.samples()) {
            assert!((u - v).abs() < 1e-9);
        }
        let c = extract(&audio, FeatureKind::Onsets).unwrap();
        assert_eq!(c.samples(), a.samples());
    }

    #[test]
    fn envelope_is_positively_homogeneous() {
        let (audio, _) = am_noise(1.0, 3);
        let e1 = auditory_envelope_raw(&audio).unwrap();
        let e2 = auditory_envelope_raw(&audio.scaled(3.5, 0.0)).unwrap();
        for (u, v) in e1.samples().iter().zip(e2.samples()) {
            assert!((3.5 * u - v).abs() < 1e-9 * (1.0 + v.abs()));
        }
    }

    #[test]
    fn onset_edge_cases() {
        let c = Signal::new(vec![2.0; 50], 64.0).unwrap();
        assert!(onset_envelope_raw(&c).samples().iter().all(|&v| v == 0.0));
        let s = 0.75;
        let ramp = Signal::new((0..50).map(|i| s * i as f64 / 64.0).collect(), 64.0).unwrap();
        assert!(onset_envelope_raw(&ramp).samples().iter().all(|&v| (v - s).abs() < 1e-12));
        let down = Signal::new((0..50).map(|i| -(i as f64)).collect(), 64.0).unwrap();
        assert!(onset_envelope_raw(&down).samples().iter().all(|&v| v == 0.0));
        let on = FeatureSignal::new(ramp, FeatureKind::Onsets);
        assert!(onset_envelope(&on).is_err());
    }
}
