//! Nested cross-validation, segmentation, attention markers, t-tests and
//! chance levels.

use std::collections::BTreeMap;
use std::ops::Range;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, ContinuousCDF, DiscreteCDF, StudentsT};

use crate::dataset::TrialBundle;
use crate::error::{AadError, Result};
use crate::features::FeatureKind;
use crate::linear::{
    lead_columns, moment_matrices, pearson_from_moments, pearson_or_zero, reconstruct_samples,
    BackwardModel, Column, LagSpec, RidgeSystem, SpeakerRole,
};
use crate::synth::seed_for;

/// Segment lengths evaluated by default, seconds.
pub const SEGMENT_LENGTHS: [f64; 9] = [0.1, 0.25, 0.5, 1.0, 2.0, 5.0, 10.0, 20.0, 30.0];

/// A contiguous stretch of one trial, in samples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Piece {
    /// position in the trial slice
    pub trial: usize,
    pub range: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OuterFold {
    pub test: usize,
    /// Training trials in their seeded concatenation order.
    pub train: Vec<usize>,
    pub inner: usize,
}

impl OuterFold {
    /// Splits the concatenated training trials into `inner` contiguous
    /// folds whose sizes differ by at most one sample.
    pub fn inner_pieces(&self, lengths: &[usize]) -> Vec<Vec<Piece>> {
        let total: usize = self.train.iter().map(|&t| lengths[t]).sum();
        let bounds: Vec<usize> = (0..=self.inner).map(|k| k * total / self.inner).collect();
        let mut folds = vec![Vec::new(); self.inner];
        let mut offset = 0;
        for &t in &self.train {
            let (a, b) = (offset, offset + lengths[t]);
            for k in 0..self.inner {
                let lo = bounds[k].max(a);
                let hi = bounds[k + 1].min(b);
                if hi > lo {
                    folds[k].push(Piece { trial: t, range: lo - a..hi - a });
                }
            }
            offset = b;
        }
        folds
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NestedCvPlan {
    pub outer: Vec<OuterFold>,
    pub seed: u64,
}

/// One outer fold per held-out trial; each fold's training trials are
/// concatenated in a seeded order before the inner split.
pub fn make_nested_cv(n_trials: usize, inner: usize, seed: u64) -> Result<NestedCvPlan> {
    if n_trials < 2 || inner < 2 {
        return Err(AadError::param("nested CV needs >= 2 trials and >= 2 inner folds"));
    }
    let outer = (0..n_trials)
        .map(|test| {
            let mut train: Vec<usize> = (0..n_trials).filter(|&t| t != test).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed_for(seed, &[test as u64]));
            train.shuffle(&mut rng);
            OuterFold { test, train, inner }
        })
        .collect();
    Ok(NestedCvPlan { outer, seed })
}

/// `1e-9, 1e-8, ..., 1e9`.
pub fn lambda_grid() -> Vec<f64> {
    (-9..=9).map(|e| 10f64.powi(e)).collect()
}

#[derive(Debug, Clone)]
pub struct TunedBackward {
    pub test: usize,
    pub model: BackwardModel,
    /// Mean inner-validation correlation per grid penalty.
    pub scores: Vec<f64>,
}

/// Index of the largest finite score, first on ties.
pub fn select_best(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if s.is_finite() && best.is_none_or(|b| s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

pub(crate) fn trial_lengths(trials: &[TrialBundle]) -> Vec<usize> {
    trials.iter().map(|t| t.len()).collect()
}

/// Backward-model moment matrices over `[EEG leads.., feature, 1]` for
/// every range each trial needs under `plan`.
struct PieceMoments {
    per_trial: Vec<BTreeMap<(usize, usize), DMatrix<f64>>>,
}

impl PieceMoments {
    fn build(
        plan: &NestedCvPlan,
        trials: &[TrialBundle],
        columns: &[Column],
        feature: impl Fn(&TrialBundle) -> &[f64],
    ) -> Self {
        let lengths = trial_lengths(trials);
        let mut wanted: Vec<Vec<(usize, usize)>> = vec![Vec::new(); trials.len()];
        for fold in &plan.outer {
            for &t in &fold.train {
                wanted[t].push((0, lengths[t]));
            }
            for pieces in fold.inner_pieces(&lengths) {
                for p in pieces {
                    wanted[p.trial].push((p.range.start, p.range.end));
                }
            }
        }
        let per_trial = trials
            .iter()
            .zip(wanted)
            .map(|(t, mut ranges)| {
                ranges.sort();
                ranges.dedup();
                if ranges.is_empty() {
                    return BTreeMap::new();
                }
                let ones = vec![1.0; t.len()];
                let mut sources: Vec<&[f64]> = t.eeg.data().iter().map(|c| c.as_slice()).collect();
                sources.push(feature(t));
                sources.push(&ones);
                let rs: Vec<Range<usize>> = ranges.iter().map(|&(a, b)| a..b).collect();
                let mats = moment_matrices(&sources, columns, &rs);
                ranges.into_iter().zip(mats).collect()
            })
            .collect();
        Self { per_trial }
    }

    fn get(&self, trial: usize, range: &Range<usize>) -> &DMatrix<f64> {
        &self.per_trial[trial][&(range.start, range.end)]
    }
}

/// Per outer fold: every grid penalty is fitted on four inner folds and
/// scored by Pearson correlation on the fifth; the penalty with the best
/// mean inner score is refitted on all training trials.
pub fn tune_backward(
    plan: &NestedCvPlan,
    trials: &[TrialBundle],
    kind: FeatureKind,
) -> Result<Vec<TunedBackward>> {
    tune_backward_with(plan, trials, kind, SpeakerRole::Attended, &LagSpec::backward_default(), &lambda_grid())
}

pub fn tune_backward_with(
    plan: &NestedCvPlan,
    trials: &[TrialBundle],
    kind: FeatureKind,
    role: SpeakerRole,
    lags: &LagSpec,
    grid: &[f64],
) -> Result<Vec<TunedBackward>> {
    if plan.outer.len() != trials.len() {
        return Err(AadError::param(format!(
            "plan covers {} trials, {} given",
            plan.outer.len(),
            trials.len()
        )));
    }
    if grid.is_empty() {
        return Err(AadError::param("empty penalty grid"));
    }
    let n_ch = trials[0].eeg.n_channels();
    let mut columns = lead_columns(0..n_ch, lags);
    let d = columns.len();
    columns.push(Column { source: n_ch, shift: 0 });
    columns.push(Column { source: n_ch + 1, shift: 0 });
    let (y, ones) = (d, d + 1);
    let moments = PieceMoments::build(plan, trials, &columns, |t| t.feature(role, kind).samples());
    let lengths = trial_lengths(trials);

    let mut out = Vec::with_capacity(plan.outer.len());
    for fold in &plan.outer {
        let mut total = DMatrix::zeros(d + 2, d + 2);
        for &t in &fold.train {
            total += moments.get(t, &(0..lengths[t]));
        }
        let mut scores = vec![0.0; grid.len()];
        let folds = fold.inner_pieces(&lengths);
        for pieces in &folds {
            let mut val = DMatrix::zeros(d + 2, d + 2);
            for p in pieces {
                val += moments.get(p.trial, &p.range);
            }
            let train = &total - &val;
            let rows = train[(ones, ones)];
            let system = RidgeSystem::new(train.view((0, 0), (d, d)).clone_owned(), train.view((0, y), (d, 1)).clone_owned());
            for (i, &lam) in grid.iter().enumerate() {
                let r = match system.solve(lam * rows, 0) {
                    Ok(w) => pearson_from_moments(&val, &w, y, ones),
                    Err(_) => f64::NAN,
                };
                scores[i] += r / folds.len() as f64;
            }
        }
        let best = select_best(&scores)
            .filter(|&b| scores[b] != 0.0)
            .ok_or_else(|| AadError::Tuning(format!("all inner correlations degenerate for held-out trial {}", fold.test)))?;
        let lambda = grid[best];
        let rows = total[(ones, ones)];
        let system = RidgeSystem::new(total.view((0, 0), (d, d)).clone_owned(), total.view((0, y), (d, 1)).clone_owned());
        let weights = system.solve(lambda * rows, 0)?;
        let model = BackwardModel {
            weights,
            channels: trials[0].eeg.channel_names().to_vec(),
            lags: *lags,
            lambda,
            kind,
            role,
        };
        out.push(TunedBackward { test: fold.test, model, scores });
    }
    Ok(out)
}

/// Segment of a trial in samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

impl Segment {
    pub fn range(&self) -> Range<usize> {
        self.start..self.start + self.len
    }
}

/// Segments of `length` seconds starting every `hop` seconds, kept only if
/// they fit entirely in `n` samples.
pub fn segment_bounds(n: usize, fs: f64, length: f64, hop: f64) -> Result<Vec<Segment>> {
    if !(length > 0.0) || !(hop > 0.0) {
        return Err(AadError::param("segment length and hop must be positive"));
    }
    let len = ((length * fs).round() as usize).max(1);
    let step = ((hop * fs).round() as usize).max(1);
    if len > n {
        return Ok(Vec::new());
    }
    Ok((0..=(n - len) / step).map(|k| Segment { start: k * step, len }).collect())
}

pub fn segment_trial(trial: &TrialBundle, length: f64, hop: f64) -> Result<Vec<Segment>> {
    segment_bounds(trial.len(), trial.fs(), length, hop)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionMarker {
    pub rho_attended: f64,
    pub rho_ignored: f64,
    pub delta: f64,
    /// seconds
    pub start: f64,
    /// seconds
    pub length: f64,
}

impl AttentionMarker {
    pub fn new(rho_attended: f64, rho_ignored: f64, start: f64, length: f64) -> Self {
        Self { rho_attended, rho_ignored, delta: rho_attended - rho_ignored, start, length }
    }

    pub fn correct(&self) -> bool {
        self.delta > 0.0
    }
}

/// Markers of one reconstruction against both streams, segment by segment.
pub fn markers_from_reconstruction(
    rec: &[f64],
    attended: &[f64],
    ignored: &[f64],
    segments: &[Segment],
    fs: f64,
) -> Vec<AttentionMarker> {
    segments
        .iter()
        .map(|s| {
            let r = s.range();
            AttentionMarker::new(
                pearson_or_zero(&rec[r.clone()], &attended[r.clone()]),
                pearson_or_zero(&rec[r.clone()], &ignored[r]),
                s.start as f64 / fs,
                s.len as f64 / fs,
            )
        })
        .collect()
}

/// Each segment's reconstruction against the features of a uniformly drawn
/// different segment.
pub fn null_markers_from_reconstruction(
    rec: &[f64],
    attended: &[f64],
    ignored: &[f64],
    segments: &[Segment],
    fs: f64,
    seed: u64,
) -> Result<Vec<AttentionMarker>> {
    let n = segments.len();
    if n < 2 {
        return Err(AadError::param("null markers need >= 2 segments"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(segments
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut j = rng.random_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            let (own, other) = (s.range(), segments[j].range());
            AttentionMarker::new(
                pearson_or_zero(&rec[own.clone()], &attended[other.clone()]),
                pearson_or_zero(&rec[own], &ignored[other]),
                s.start as f64 / fs,
                s.len as f64 / fs,
            )
        })
        .collect())
}

pub fn markers_backward(
    model: &BackwardModel,
    trial: &TrialBundle,
    segments: &[Segment],
) -> Result<Vec<AttentionMarker>> {
    let rec = reconstruct_samples(model, &trial.eeg)?;
    Ok(markers_from_reconstruction(
        &rec,
        trial.attended.get(model.kind).samples(),
        trial.ignored.get(model.kind).samples(),
        segments,
        trial.fs(),
    ))
}

pub fn null_markers(
    model: &BackwardModel,
    trial: &TrialBundle,
    segments: &[Segment],
    seed: u64,
) -> Result<Vec<AttentionMarker>> {
    let rec = reconstruct_samples(model, &trial.eeg)?;
    null_markers_from_reconstruction(
        &rec,
        trial.attended.get(model.kind).samples(),
        trial.ignored.get(model.kind).samples(),
        segments,
        trial.fs(),
        seed,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TTestKind {
    Unpaired,
    Paired,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tail {
    /// alternative: mean(a) > mean(b)
    Single,
    Double,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (m, x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0))
}

/// Student t-test; unpaired uses the pooled variance. Returns `(t, p)`.
pub fn ttest(kind: TTestKind, tail: Tail, a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.len() < 2 || b.len() < 2 {
        return Err(AadError::param("t-test needs >= 2 samples per group"));
    }
    let (t, df) = match kind {
        TTestKind::Unpaired => {
            let (ma, va) = mean_var(a);
            let (mb, vb) = mean_var(b);
            let (na, nb) = (a.len() as f64, b.len() as f64);
            let pooled = ((na - 1.0) * va + (nb - 1.0) * vb) / (na + nb - 2.0);
            if !(pooled > 0.0) {
                return Err(AadError::DegenerateTest("both groups have zero variance".into()));
            }
            ((ma - mb) / (pooled * (1.0 / na + 1.0 / nb)).sqrt(), na + nb - 2.0)
        }
        TTestKind::Paired => {
            if a.len() != b.len() {
                return Err(AadError::Length("paired t-test needs equal group sizes".into()));
            }
            let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
            let (m, v) = mean_var(&diff);
            if !(v > 0.0) {
                return Err(AadError::DegenerateTest("paired differences have zero variance".into()));
            }
            let n = diff.len() as f64;
            (m / (v / n).sqrt(), n - 1.0)
        }
    };
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| AadError::DegenerateTest(e.to_string()))?;
    let p = match tail {
        Tail::Single => dist.sf(t),
        Tail::Double => 2.0 * dist.sf(t.abs()),
    };
    Ok((t, p.clamp(0.0, 1.0)))
}

/// Smallest `k / n` whose fair-coin binomial CDF reaches `1 - alpha`.
pub fn chance_level(n: usize, alpha: f64) -> Result<f64> {
    if n == 0 {
        return Err(AadError::param("chance level needs n >= 1"));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(AadError::param("alpha must lie in (0, 1)"));
    }
    let dist = Binomial::new(0.5, n as u64).map_err(|e| AadError::param(e.to_string()))?;
    let target = 1.0 - alpha;
    // the CDF is increasing in k, so bisect
    let (mut lo, mut hi) = (0u64, n as u64);
    while lo < hi {
        let mid = (lo + hi) / 2;
        if dist.cdf(mid) >= target {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    Ok(lo as f64 / n as f64)
}
