//! Cross-validated TRFs, difference TRFs, misalignment null TRFs and the
//! sign-flip cluster permutation test.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::dataset::TrialBundle;
use crate::error::{AadError, Result};
use crate::features::FeatureKind;
use crate::linear::{LagSpec, RidgeSystem, SpeakerRole, Trf, TrfMoments};
use crate::synth::seed_for;

/// Shortest misalignment used for null TRFs, seconds.
pub const DEFAULT_MIN_SHIFT: f64 = 5.0;
pub const DEFAULT_N_SHIFTS: usize = 500;
pub const DEFAULT_N_PERM: usize = 1000;
pub const DEFAULT_THRESHOLD_PCT: f64 = 99.0;

/// Per-participant TRFs sharing one axis, with a cached grand average.
#[derive(Debug, Clone, Default)]
pub struct TrfSet {
    members: Vec<(String, Trf)>,
    grand: Option<Trf>,
}

impl TrfSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, participant: impl Into<String>, trf: Trf) -> Result<()> {
        if let Some((_, first)) = self.members.first() {
            if !first.same_axes(&trf) {
                return Err(AadError::param("TRF axes differ from the set"));
            }
        }
        self.members.push((participant.into(), trf));
        self.grand = None;
        Ok(())
    }

    pub fn members(&self) -> &[(String, Trf)] {
        &self.members
    }

    pub fn trfs(&self) -> Vec<Trf> {
        self.members.iter().map(|(_, t)| t.clone()).collect()
    }

    pub fn grand_average(&mut self) -> Result<&Trf> {
        if self.grand.is_none() {
            self.grand = Some(Trf::mean(&self.trfs())?);
        }
        Ok(self.grand.as_ref().expect("just set"))
    }
}

fn check_trials(trials: &[TrialBundle]) -> Result<()> {
    if trials.len() < 2 {
        return Err(AadError::param(format!("cross-validation needs >= 2 trials, got {}", trials.len())));
    }
    let first = &trials[0];
    for t in trials {
        t.validate()?;
        if t.eeg.channel_names() != first.eeg.channel_names() || t.fs() != first.fs() {
            return Err(AadError::param("trials disagree on channels or sampling rate"));
        }
    }
    Ok(())
}

fn sub_moments(total: &TrfMoments, part: &TrfMoments) -> TrfMoments {
    TrfMoments { gram: &total.gram - &part.gram, cross: &total.cross - &part.cross, rows: total.rows - part.rows }
}

/// Leave-one-trial-out fold TRFs: fold `i` is fitted on every trial but `i`.
pub fn crossval_trf_folds(
    trials: &[TrialBundle],
    kind: FeatureKind,
    role: SpeakerRole,
    lags: &LagSpec,
) -> Result<Vec<Trf>> {
    check_trials(trials)?;
    let per: Vec<TrfMoments> = trials
        .iter()
        .map(|t| TrfMoments::from_signals(t.feature(role, kind).samples(), &t.eeg, lags))
        .collect();
    let mut total = per[0].clone();
    for m in &per[1..] {
        total.add(m);
    }
    let channels = trials[0].eeg.channel_names().to_vec();
    per.iter()
        .map(|m| sub_moments(&total, m).fit(channels.clone(), *lags, kind, role))
        .collect()
}

/// Mean of the leave-one-trial-out fold TRFs.
pub fn crossval_trf(trials: &[TrialBundle], kind: FeatureKind, role: SpeakerRole) -> Result<Trf> {
    crossval_trf_with(trials, kind, role, &LagSpec::forward_default())
}

pub fn crossval_trf_with(
    trials: &[TrialBundle],
    kind: FeatureKind,
    role: SpeakerRole,
    lags: &LagSpec,
) -> Result<Trf> {
    Trf::mean(&crossval_trf_folds(trials, kind, role, lags)?)
}

/// `attended - ignored`.
pub fn difference_trf(attended: &Trf, ignored: &Trf) -> Result<Trf> {
    if !attended.same_axes(ignored) {
        return Err(AadError::param("difference of TRFs with different axes"));
    }
    let mut out = attended.clone();
    for (row, other) in out.coefficients.iter_mut().zip(&ignored.coefficients) {
        for (a, b) in row.iter_mut().zip(other) {
            *a -= b;
        }
    }
    out.role = SpeakerRole::Difference;
    Ok(out)
}

/// Null TRFs from circularly misaligned features.
#[derive(Debug, Clone)]
pub struct NullTrfs {
    /// Misalignment of each shift, samples.
    pub shifts: Vec<usize>,
    pub folds: usize,
    /// Shift-major: entry `s * folds + f` is shift `s`, held-out trial `f`.
    pub trfs: Vec<Trf>,
}

impl NullTrfs {
    pub fn get(&self, shift: usize, fold: usize) -> &Trf {
        &self.trfs[shift * self.folds + fold]
    }

    /// The null counterpart of `crossval_trf`: one fold-averaged TRF per shift.
    pub fn fold_means(&self) -> Result<Vec<Trf>> {
        self.trfs.chunks(self.folds).map(Trf::mean).collect()
    }
}

/// Circular cross-correlation `c[m] = sum_u x[u] y[(u + m) mod n]`.
fn circular_xcorr(planner: &mut FftPlanner<f64>, x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = x.len();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut a: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    let mut b: Vec<Complex64> = y.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fwd.process(&mut a);
    fwd.process(&mut b);
    for (p, q) in a.iter_mut().zip(&b) {
        *p = p.conj() * q;
    }
    inv.process(&mut a);
    a.iter().map(|c| c.re / n as f64).collect()
}

/// Repeats the leave-one-trial-out fit with the feature circularly shifted
/// by `n_shifts` distinct random offsets of at least `min_shift` seconds
/// (from either end of the shortest trial).
///
/// The lag design is circular too, so the feature Gram matrix is unchanged
/// by any shift and each fold is factored once; the cross products for all
/// shifts come from one FFT cross-correlation per trial and channel.
pub fn null_trfs(
    trials: &[TrialBundle],
    kind: FeatureKind,
    role: SpeakerRole,
    n_shifts: usize,
    min_shift: f64,
    seed: u64,
) -> Result<NullTrfs> {
    null_trfs_with(trials, kind, role, n_shifts, min_shift, seed, &LagSpec::forward_default())
}

#[allow(clippy::too_many_arguments)]
pub fn null_trfs_with(
    trials: &[TrialBundle],
    kind: FeatureKind,
    role: SpeakerRole,
    n_shifts: usize,
    min_shift: f64,
    seed: u64,
    lags: &LagSpec,
) -> Result<NullTrfs> {
    check_trials(trials)?;
    if n_shifts == 0 {
        return Err(AadError::param("need at least one shift"));
    }
    if !(min_shift > lags.span_seconds()) {
        return Err(AadError::param(format!(
            "minimum shift {min_shift} s must exceed the TRF span {} s",
            lags.span_seconds()
        )));
    }
    let fs = trials[0].fs();
    let shortest = trials.iter().map(|t| t.len()).min().unwrap_or(0);
    let lo = (min_shift * fs).ceil() as usize;
    if shortest < 2 * lo || shortest - 2 * lo + 1 < n_shifts {
        return Err(AadError::param(format!(
            "{n_shifts} shifts of >= {min_shift} s do not fit in a {} s trial",
            shortest as f64 / fs
        )));
    }
    let mut candidates: Vec<usize> = (lo..=shortest - lo).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    candidates.shuffle(&mut rng);
    let shifts: Vec<usize> = candidates[..n_shifts].to_vec();

    let taps = lags.taps();
    let n_ch = trials[0].eeg.n_channels();
    let mut planner = FftPlanner::<f64>::new();
    let mut grams = Vec::with_capacity(trials.len());
    // per trial: (shift * n_ch + channel) x taps cross products
    let mut crosses: Vec<DMatrix<f64>> = Vec::with_capacity(trials.len());
    for t in trials {
        let x = t.feature(role, kind).samples();
        let n = x.len() as i64;
        let auto = circular_xcorr(&mut planner, x, x);
        let gram = DMatrix::from_fn(taps, taps, |i, j| {
            let d = (i as i64 - j as i64).rem_euclid(n);
            auto[d as usize] * n as f64
        });
        grams.push(gram);
        let mut cross = DMatrix::zeros(taps, n_shifts * n_ch);
        for c in 0..n_ch {
            let cc = circular_xcorr(&mut planner, x, t.eeg.channel(c));
            for (s, &shift) in shifts.iter().enumerate() {
                // shifted feature x_s[t] = x[t - shift]; column for lag l is
                // x_s[t - l], so the cross product is c[l + shift]
                for (k, l) in lags.lags().enumerate() {
                    let m = (l + shift as i64).rem_euclid(n) as usize;
                    cross[(k, s * n_ch + c)] = cc[m] * n as f64;
                }
            }
        }
        crosses.push(cross);
    }
    let gram_total = grams.iter().fold(DMatrix::zeros(taps, taps), |a, g| a + g);
    let cross_total = crosses.iter().fold(DMatrix::zeros(taps, n_shifts * n_ch), |a, c| a + c);
    let rows_total: usize = trials.iter().map(|t| t.len()).sum();
    let channels = trials[0].eeg.channel_names().to_vec();

    let folds = trials.len();
    let mut per_fold: Vec<Vec<Trf>> = Vec::with_capacity(folds);
    for f in 0..folds {
        let gram = &gram_total - &grams[f];
        let cross = &cross_total - &crosses[f];
        let rows = (rows_total - trials[f].len()) as f64;
        let lambda = gram.trace() / rows / taps as f64;
        let system = RidgeSystem::new(gram, cross);
        let mut fold_trfs = Vec::with_capacity(n_shifts);
        for s in 0..n_shifts {
            let coefficients =
                (0..n_ch).map(|c| system.solve(lambda * rows, s * n_ch + c)).collect::<Result<Vec<_>>>()?;
            fold_trfs.push(Trf {
                coefficients,
                channels: channels.clone(),
                lags: *lags,
                kind,
                role: SpeakerRole::Null,
                lambda,
            });
        }
        per_fold.push(fold_trfs);
    }
    let mut trfs = Vec::with_capacity(n_shifts * folds);
    for s in 0..n_shifts {
        for fold in &per_fold {
            trfs.push(fold[s].clone());
        }
    }
    Ok(NullTrfs { shifts, folds, trfs })
}

/// One supra-threshold run of the averaged TRF's power on one channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub channel: String,
    pub start_ms: f64,
    pub end_ms: f64,
    /// samples
    pub size: usize,
    /// summed instantaneous power
    pub mass: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterResult {
    pub clusters: Vec<Cluster>,
    pub threshold: f64,
    /// Size of the largest observed cluster.
    pub statistic: usize,
    pub n_perm: usize,
}

impl ClusterResult {
    pub fn min_p(&self) -> Option<f64> {
        self.clusters.iter().map(|c| c.p_value).min_by(f64::total_cmp)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Linear-interpolation percentile (`pct` in `[0, 100]`).
pub fn percentile(values: &mut [f64], pct: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 1 {
        return values[0];
    }
    let pos = pct.clamp(0.0, 100.0) / 100.0 * (n - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 >= n {
        values[n - 1]
    } else {
        values[i] + frac * (values[i + 1] - values[i])
    }
}

/// Maximal runs `(start, end_exclusive)` where `power > threshold`.
fn runs(power: &[f64], threshold: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, &p) in power.iter().enumerate() {
        match (p > threshold, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push((s, i));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, power.len()));
    }
    out
}

fn max_cluster_size(coefs: &[Vec<f64>], threshold: f64) -> usize {
    coefs
        .iter()
        .map(|row| {
            let mut best = 0;
            let mut run = 0;
            for v in row {
                if v * v > threshold {
                    run += 1;
                    best = best.max(run);
                } else {
                    run = 0;
                }
            }
            best
        })
        .max()
        .unwrap_or(0)
}

/// Sign-flip cluster permutation test over participants.
///
/// The threshold is the `threshold_pct` percentile of the null TRFs' squared
/// coefficients, so the nulls should be on the scale of the averaged TRF.
/// Clusters are found per channel; the test statistic is the largest
/// cluster size over channels and each cluster's p-value is the fraction of
/// permutations whose largest cluster is at least as large.
pub fn cluster_permutation_test(
    participant_trfs: &[Trf],
    null_trfs: &[Trf],
    n_perm: usize,
    threshold_pct: f64,
    seed: u64,
) -> Result<ClusterResult> {
    if participant_trfs.len() < 2 {
        return Err(AadError::param("cluster test needs >= 2 participant TRFs"));
    }
    if null_trfs.is_empty() {
        return Err(AadError::param("cluster test needs a non-empty null set"));
    }
    if n_perm == 0 {
        return Err(AadError::param("need at least one permutation"));
    }
    let first = &participant_trfs[0];
    if participant_trfs.iter().chain(null_trfs).any(|t| !t.same_axes(first)) {
        return Err(AadError::param("participant and null TRFs must share axes"));
    }
    let mut null_power: Vec<f64> = null_trfs.iter().flat_map(|t| t.flat()).map(|v| v * v).collect();
    let threshold = percentile(&mut null_power, threshold_pct);

    let mean = Trf::mean(participant_trfs)?;
    let lat = mean.latencies();
    let mut clusters = Vec::new();
    for (c, row) in mean.coefficients.iter().enumerate() {
        let power: Vec<f64> = row.iter().map(|v| v * v).collect();
        for (s, e) in runs(&power, threshold) {
            clusters.push(Cluster {
                channel: mean.channels[c].clone(),
                start_ms: lat[s] * 1000.0,
                end_ms: lat[e - 1] * 1000.0,
                size: e - s,
                mass: power[s..e].iter().sum(),
                p_value: 1.0,
            });
        }
    }
    let statistic = clusters.iter().map(|c| c.size).max().unwrap_or(0);

    let n = participant_trfs.len();
    let (n_ch, taps) = (first.n_channels(), first.taps());
    let mut perm_max = Vec::with_capacity(n_perm);
    let mut acc = vec![vec![0.0; taps]; n_ch];
    for p in 0..n_perm {
        let mut rng = ChaCha8Rng::seed_from_u64(seed_for(seed, &[p as u64]));
        acc.iter_mut().for_each(|r| r.iter_mut().for_each(|v| *v = 0.0));
        for t in participant_trfs {
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            for (a, row) in acc.iter_mut().zip(&t.coefficients) {
                for (x, v) in a.iter_mut().zip(row) {
                    *x += sign * v;
                }
            }
        }
        acc.iter_mut().for_each(|r| r.iter_mut().for_each(|v| *v /= n as f64));
        perm_max.push(max_cluster_size(&acc, threshold));
    }
    for c in &mut clusters {
        c.p_value = perm_max.iter().filter(|&&m| m >= c.size).count() as f64 / n_perm as f64;
    }
    Ok(ClusterResult { clusters, threshold, statistic, n_perm })
}

/// Significance decisions `p < 0.05 / m`.
pub fn bonferroni(p_values: &[f64], m: usize) -> Result<Vec<bool>> {
    bonferroni_alpha(p_values, m, 0.05)
}

pub fn bonferroni_alpha(p_values: &[f64], m: usize, alpha: f64) -> Result<Vec<bool>> {
    if m == 0 {
        return Err(AadError::param("Bonferroni count must be >= 1"));
    }
    let thr = alpha / m as f64;
    Ok(p_values.iter().map(|&p| p < thr).collect())
}

/// Long-format TRF curves: `curve,role,kind,channel,latency_ms,coefficient`.
pub fn write_trf_csv(path: &Path, curves: &[(String, Trf)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["curve", "role", "kind", "channel", "latency_ms", "coefficient"])?;
    for (name, trf) in curves {
        let lat = trf.latencies();
        for (c, row) in trf.coefficients.iter().enumerate() {
            for (k, v) in row.iter().enumerate() {
                w.write_record([
                    name.as_str(),
                    trf.role.as_str(),
                    trf.kind.as_str(),
                    trf.channels[c].as_str(),
                    &format!("{:.4}", lat[k] * 1000.0),
                    &format!("{v:e}"),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Single-channel view of a TRF.
pub fn channel_trf(trf: &Trf, channel: usize) -> Trf {
    Trf {
        coefficients: vec![trf.coefficients[channel].clone()],
        channels: vec![trf.channels[channel].clone()],
        ..trf.clone()
    }
}
