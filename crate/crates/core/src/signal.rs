//! Uniformly sampled signal containers and preprocessing primitives.
//!
//! Everything here is a pure function of its inputs. Containers validate
//! their invariants on construction (positive sampling rate, finite samples,
//! equal channel lengths) and are immutable afterwards.

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{AadError, Result};

/// A single uniformly sampled time series.
#[derive(Debug, Clone, PartialEq)]
pub struct Signal {
    samples: Vec<f64>,
    fs: f64,
}

impl Signal {
    pub fn new(samples: Vec<f64>, fs: f64) -> Result<Self> {
        if !(fs > 0.0 && fs.is_finite()) {
            return Err(AadError::param(format!("sampling rate must be positive, got {fs}")));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(AadError::param(format!("non-finite sample at index {i}")));
        }
        Ok(Self { samples, fs })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn fs(&self) -> f64 {
        self.fs
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.fs
    }

    /// Samples `[start, end)` as a new signal at the same rate.
    pub fn slice(&self, start: usize, end: usize) -> Signal {
        Signal { samples: self.samples[start..end].to_vec(), fs: self.fs }
    }

    pub fn scaled(&self, a: f64, b: f64) -> Signal {
        Signal { samples: self.samples.iter().map(|v| a * v + b).collect(), fs: self.fs }
    }
}

/// Several equal-length channels sharing one sampling rate.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiSignal {
    channels: Vec<String>,
    data: Vec<Vec<f64>>,
    fs: f64,
}

impl MultiSignal {
    pub fn new(channels: Vec<String>, data: Vec<Vec<f64>>, fs: f64) -> Result<Self> {
        if !(fs > 0.0 && fs.is_finite()) {
            return Err(AadError::param(format!("sampling rate must be positive, got {fs}")));
        }
        if channels.len() != data.len() {
            return Err(AadError::Length(format!(
                "{} channel names for {} channels",
                channels.len(),
                data.len()
            )));
        }
        if channels.is_empty() {
            return Err(AadError::param("multi-channel signal needs at least one channel"));
        }
        for (i, name) in channels.iter().enumerate() {
            if channels[..i].contains(name) {
                return Err(AadError::param(format!("duplicate channel name {name:?}")));
            }
        }
        let n = data[0].len();
        if data.iter().any(|c| c.len() != n) {
            return Err(AadError::Length("channels differ in length".into()));
        }
        if data.iter().flatten().any(|v| !v.is_finite()) {
            return Err(AadError::param("non-finite sample"));
        }
        Ok(Self { channels, data, fs })
    }

    /// Builds from signals that must share a sampling rate.
    pub fn from_signals(channels: Vec<String>, signals: Vec<Signal>) -> Result<Self> {
        let fs = signals.first().map(Signal::fs).ok_or_else(|| AadError::param("no signals"))?;
        if signals.iter().any(|s| s.fs() != fs) {
            return Err(AadError::param("channels sampled at different rates"));
        }
        Self::new(channels, signals.into_iter().map(Signal::into_samples).collect(), fs)
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channels
    }

    pub fn n_channels(&self) -> usize {
        self.data.len()
    }

    pub fn len(&self) -> usize {
        self.data[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn fs(&self) -> f64 {
        self.fs
    }

    pub fn channel(&self, i: usize) -> &[f64] {
        &self.data[i]
    }

    pub fn data(&self) -> &[Vec<f64>] {
        &self.data
    }

    pub fn channel_signal(&self, i: usize) -> Signal {
        Signal { samples: self.data[i].clone(), fs: self.fs }
    }

    pub fn slice(&self, start: usize, end: usize) -> MultiSignal {
        MultiSignal {
            channels: self.channels.clone(),
            data: self.data.iter().map(|c| c[start..end].to_vec()).collect(),
            fs: self.fs,
        }
    }

    pub fn scaled(&self, a: f64) -> MultiSignal {
        MultiSignal {
            channels: self.channels.clone(),
            data: self.data.iter().map(|c| c.iter().map(|v| a * v).collect()).collect(),
            fs: self.fs,
        }
    }

    /// Applies `f` to each channel independently.
    pub fn map_channels<F>(&self, f: F) -> Result<MultiSignal>
    where
        F: Fn(&Signal) -> Result<Signal>,
    {
        let out = self
            .data
            .iter()
            .map(|c| f(&Signal { samples: c.clone(), fs: self.fs }))
            .collect::<Result<Vec<_>>>()?;
        MultiSignal::from_signals(self.channels.clone(), out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowKind {
    Hamming,
    Kaiser,
}

/// Finite impulse response filter with its design metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct FirFilter {
    coefficients: Vec<f64>,
    pub cutoff_hz: f64,
    pub order: usize,
    pub window: WindowKind,
    pub fs: f64,
}

impl FirFilter {
    /// Wraps arbitrary coefficients (order = length - 1).
    pub fn from_coefficients(coefficients: Vec<f64>, fs: f64) -> Result<Self> {
        if coefficients.is_empty() || coefficients.iter().any(|c| !c.is_finite()) {
            return Err(AadError::param("filter coefficients must be finite and non-empty"));
        }
        let order = coefficients.len() - 1;
        Ok(Self { coefficients, cutoff_hz: 0.0, order, window: WindowKind::Hamming, fs })
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn len(&self) -> usize {
        self.coefficients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coefficients.is_empty()
    }

    /// Group delay in whole samples used for alignment.
    pub fn delay(&self) -> usize {
        self.order / 2
    }

    /// |H(f)| evaluated by direct DTFT.
    pub fn magnitude_response(&self, freq_hz: f64) -> f64 {
        let w = 2.0 * PI * freq_hz / self.fs;
        let (re, im) = self
            .coefficients
            .iter()
            .enumerate()
            .fold((0.0, 0.0), |(re, im), (k, h)| {
                let phase = w * k as f64;
                (re + h * phase.cos(), im - h * phase.sin())
            });
        re.hypot(im)
    }
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = PI * x;
        px.sin() / px
    }
}

fn hamming(n: usize, len: usize) -> f64 {
    if len == 1 {
        return 1.0;
    }
    0.54 - 0.46 * (2.0 * PI * n as f64 / (len - 1) as f64).cos()
}

/// Zeroth-order modified Bessel function of the first kind.
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let half = x / 2.0;
    for k in 1..200 {
        term *= (half / k as f64) * (half / k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

/// Hamming-windowed sinc high-pass built by spectral inversion of the matching
/// low-pass. For odd orders the centre falls between samples and the delta is
/// replaced by a windowed half-sample-delayed sinc. Both parts are normalised
/// to unit DC gain so the result has exactly zero DC gain.
pub fn design_highpass_sinc(cutoff_hz: f64, order: usize, fs: f64) -> Result<FirFilter> {
    if order < 2 {
        return Err(AadError::param(format!("filter order must be >= 2, got {order}")));
    }
    if !(fs > 0.0) || !(cutoff_hz > 0.0 && cutoff_hz < fs / 2.0) {
        return Err(AadError::param(format!(
            "cutoff {cutoff_hz} Hz outside (0, {}) Hz",
            fs / 2.0
        )));
    }
    let len = order + 1;
    let centre = order as f64 / 2.0;
    let fc = cutoff_hz / fs;
    let window: Vec<f64> = (0..len).map(|n| hamming(n, len)).collect();

    let mut lowpass: Vec<f64> = (0..len)
        .map(|n| window[n] * 2.0 * fc * sinc(2.0 * fc * (n as f64 - centre)))
        .collect();
    let lp_sum: f64 = lowpass.iter().sum();
    lowpass.iter_mut().for_each(|v| *v /= lp_sum);

    let mut allpass: Vec<f64> = if order.is_multiple_of(2) {
        (0..len).map(|n| if n == order / 2 { 1.0 } else { 0.0 }).collect()
    } else {
        (0..len).map(|n| window[n] * sinc(n as f64 - centre)).collect()
    };
    let ap_sum: f64 = allpass.iter().sum();
    allpass.iter_mut().for_each(|v| *v /= ap_sum);

    // symmetrise to remove rounding asymmetry
    let mut coefficients: Vec<f64> = allpass.iter().zip(&lowpass).map(|(a, l)| a - l).collect();
    for n in 0..len / 2 {
        let m = 0.5 * (coefficients[n] + coefficients[len - 1 - n]);
        coefficients[n] = m;
        coefficients[len - 1 - n] = m;
    }
    Ok(FirFilter { coefficients, cutoff_hz, order, window: WindowKind::Hamming, fs })
}

/// Linear convolution with zero-padded edges. The output has the input's
/// length; with `compensate_delay` it is advanced by `order / 2` samples.
pub fn apply_fir(filter: &FirFilter, signal: &Signal, compensate_delay: bool) -> Result<Signal> {
    let h = filter.coefficients();
    let x = signal.samples();
    if x.len() <= h.len() && h.len() > 1 {
        return Err(AadError::Length(format!(
            "signal of {} samples is not longer than the {}-tap filter",
            x.len(),
            h.len()
        )));
    }
    let shift = if compensate_delay { filter.delay() } else { 0 };
    let n = x.len();
    let out: Vec<f64> = (0..n)
        .map(|i| {
            let t = i + shift;
            let k_lo = t.saturating_sub(n - 1);
            let k_hi = t.min(h.len() - 1);
            if k_lo > k_hi {
                return 0.0;
            }
            (k_lo..=k_hi).map(|k| h[k] * x[t - k]).sum()
        })
        .collect();
    Signal::new(out, signal.fs())
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a
}

/// Largest accepted numerator/denominator of a resampling ratio.
pub const MAX_RATIO_TERM: u64 = 1 << 20;

/// Reduced `(up, down)` with `target_fs / fs = up / down`.
pub fn rational_ratio(fs: f64, target_fs: f64) -> Result<(u64, u64)> {
    if !(fs > 0.0 && target_fs > 0.0 && fs.is_finite() && target_fs.is_finite()) {
        return Err(AadError::param("sampling rates must be positive"));
    }
    let is_int = |v: f64| (v - v.round()).abs() < 1e-9 && v.round() < MAX_RATIO_TERM as f64;
    if is_int(fs) && is_int(target_fs) {
        let (a, b) = (target_fs.round() as u64, fs.round() as u64);
        let g = gcd(a, b);
        return Ok((a / g, b / g));
    }
    // continued-fraction convergents of target/fs
    let x = target_fs / fs;
    let (mut h0, mut h1) = (0u64, 1u64);
    let (mut k0, mut k1) = (1u64, 0u64);
    let mut r = x;
    for _ in 0..64 {
        let a = r.floor();
        if a > MAX_RATIO_TERM as f64 {
            break;
        }
        let a = a as u64;
        let h2 = a.checked_mul(h1).and_then(|v| v.checked_add(h0));
        let k2 = a.checked_mul(k1).and_then(|v| v.checked_add(k0));
        let (Some(h2), Some(k2)) = (h2, k2) else { break };
        if h2 > MAX_RATIO_TERM || k2 > MAX_RATIO_TERM {
            break;
        }
        (h0, h1, k0, k1) = (h1, h2, k1, k2);
        if ((h1 as f64 / k1 as f64) - x).abs() <= 1e-12 * x {
            let g = gcd(h1, k1);
            return Ok((h1 / g, k1 / g));
        }
        let frac = r - a as f64;
        if frac < 1e-15 {
            break;
        }
        r = 1.0 / frac;
    }
    Err(AadError::param(format!(
        "ratio {target_fs}/{fs} has no rational form with terms <= {MAX_RATIO_TERM}"
    )))
}

const RESAMPLE_ZERO_CROSSINGS: f64 = 16.0;
const RESAMPLE_KAISER_BETA: f64 = 8.0;

/// Polyphase coefficient table for a fixed `up/down` ratio.
struct Polyphase {
    up: usize,
    down: usize,
    half: isize,
    /// `phases[p][j]` weights input sample `base - half + j` for phase `p`.
    phases: Vec<Vec<f64>>,
}

impl Polyphase {
    fn new(up: u64, down: u64) -> Self {
        let (up, down) = (up as usize, down as usize);
        let fc = (up as f64 / down as f64).min(1.0);
        let half_width = RESAMPLE_ZERO_CROSSINGS / fc;
        let half = half_width.ceil() as isize;
        let i0 = bessel_i0(RESAMPLE_KAISER_BETA);
        let phases = (0..up)
            .map(|p| {
                let frac = p as f64 / up as f64;
                let mut taps: Vec<f64> = (-half..=half + 1)
                    .map(|j| {
                        // distance from the output instant back to the input sample
                        let tau = frac - j as f64;
                        let r = tau / half_width;
                        if r.abs() >= 1.0 {
                            return 0.0;
                        }
                        let w = bessel_i0(RESAMPLE_KAISER_BETA * (1.0 - r * r).sqrt()) / i0;
                        fc * sinc(fc * tau) * w
                    })
                    .collect();
                let s: f64 = taps.iter().sum();
                taps.iter_mut().for_each(|v| *v /= s);
                taps
            })
            .collect();
        Self { up, down, half, phases }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let n_out = ((x.len() as f64) * self.up as f64 / self.down as f64).round() as usize;
        let n = x.len() as isize;
        (0..n_out)
            .map(|m| {
                let pos = m * self.down;
                let base = (pos / self.up) as isize;
                let taps = &self.phases[pos % self.up];
                let start = base - self.half;
                let lo = (-start).max(0) as usize;
                let hi = ((n - start).min(taps.len() as isize)).max(0) as usize;
                if lo >= hi {
                    return 0.0;
                }
                let xs = &x[(start + lo as isize) as usize..(start + hi as isize) as usize];
                taps[lo..hi].iter().zip(xs).map(|(h, v)| h * v).sum()
            })
            .collect()
    }
}

/// Rational polyphase resampling with a Kaiser-windowed sinc anti-alias
/// filter at `min(fs, target_fs) / 2`.
pub fn resample(signal: &Signal, target_fs: f64) -> Result<Signal> {
    let (up, down) = rational_ratio(signal.fs(), target_fs)?;
    if up == down {
        return Ok(signal.clone());
    }
    let pp = Polyphase::new(up, down);
    Signal::new(pp.apply(signal.samples()), target_fs)
}

pub fn resample_multi(signal: &MultiSignal, target_fs: f64) -> Result<MultiSignal> {
    let (up, down) = rational_ratio(signal.fs(), target_fs)?;
    if up == down {
        return Ok(signal.clone());
    }
    let pp = Polyphase::new(up, down);
    let data = signal.data().iter().map(|c| pp.apply(c)).collect();
    MultiSignal::new(signal.channel_names().to_vec(), data, target_fs)
}

/// Mean and population standard deviation.
pub fn mean_std(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Zero mean, unit population standard deviation.
pub fn standardize(signal: &Signal) -> Result<Signal> {
    Signal::new(standardize_slice(signal.samples())?, signal.fs())
}

pub fn standardize_multi(signal: &MultiSignal) -> Result<MultiSignal> {
    let data = signal
        .data()
        .iter()
        .map(|c| standardize_slice(c))
        .collect::<Result<Vec<_>>>()?;
    MultiSignal::new(signal.channel_names().to_vec(), data, signal.fs())
}

pub(crate) fn standardize_slice(x: &[f64]) -> Result<Vec<f64>> {
    if x.len() < 2 {
        return Err(AadError::DegenerateSignal("fewer than two samples".into()));
    }
    let (mean, std) = mean_std(x);
    let scale = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if !(std > 1e-12 * scale) || std == 0.0 {
        return Err(AadError::DegenerateSignal("zero variance".into()));
    }
    Ok(x.iter().map(|v| (v - mean) / std).collect())
}

/// Lag (in samples) by which `recorded` trails `reference`, chosen to
/// maximise the overlap-normalised cross-correlation within `±max_lag`.
pub fn xcorr_align(recorded: &Signal, reference: &Signal, max_lag: usize) -> Result<i64> {
    if recorded.fs() != reference.fs() {
        return Err(AadError::param("signals sampled at different rates"));
    }
    let (x, y) = (recorded.samples(), reference.samples());
    if max_lag >= x.len().min(y.len()) {
        return Err(AadError::param("max_lag must be shorter than both signals"));
    }
    let n = x.len() + y.len();
    let size = n.next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(size);
    let inv = planner.plan_fft_inverse(size);
    let mut fx: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fx.resize(size, Complex64::new(0.0, 0.0));
    let mut fy: Vec<Complex64> = y.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fy.resize(size, Complex64::new(0.0, 0.0));
    fwd.process(&mut fx);
    fwd.process(&mut fy);
    let mut prod: Vec<Complex64> = fx.iter().zip(&fy).map(|(a, b)| a * b.conj()).collect();
    inv.process(&mut prod);
    // prod[lag mod size] / size = sum_t x[t] y[t - lag]

    let prefix = |s: &[f64]| {
        let mut p = vec![0.0; s.len() + 1];
        for (i, v) in s.iter().enumerate() {
            p[i + 1] = p[i] + v * v;
        }
        p
    };
    let (px, py) = (prefix(x), prefix(y));
    let (nx, ny) = (x.len() as i64, y.len() as i64);
    let mut best: Option<(f64, i64)> = None;
    for lag in -(max_lag as i64)..=(max_lag as i64) {
        // overlap: t in [max(0, lag), min(nx, ny + lag))
        let lo = lag.max(0);
        let hi = nx.min(ny + lag);
        if hi <= lo {
            continue;
        }
        let ex = px[hi as usize] - px[lo as usize];
        let ey = py[(hi - lag) as usize] - py[(lo - lag) as usize];
        if ex <= 0.0 || ey <= 0.0 {
            continue;
        }
        let idx = lag.rem_euclid(size as i64) as usize;
        let c = prod[idx].re / size as f64 / (ex * ey).sqrt();
        if best.is_none_or(|(b, _)| c > b) {
            best = Some((c, lag));
        }
    }
    best.map(|(_, lag)| lag)
        .ok_or_else(|| AadError::Alignment("no lag with non-zero overlap energy".into()))
}
