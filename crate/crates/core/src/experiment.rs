//! End-to-end runs: nested cross-validated decoding over segment lengths,
//! attention-marker statistics and the TRF analysis, with their CSV/JSON
//! outputs.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cca::{self, corr_from_projections, decide, fit_cca_moments, fit_lda, project, trial_moments, Decision};
use crate::cnn::{cnn_reconstruct, hyper_grid, train_cnn, window_starts, CnnData, CnnHyper, TrainBudget};
use crate::dataset::{read_dataset, Participant, TrialBundle};
use crate::error::{AadError, Result};
use crate::evaluation::{
    chance_level, lambda_grid, make_nested_cv, markers_from_reconstruction, null_markers_from_reconstruction,
    segment_bounds, trial_lengths, tune_backward_with, ttest, NestedCvPlan, OuterFold, Piece, Segment, TTestKind,
    Tail, SEGMENT_LENGTHS,
};
use crate::features::FeatureKind;
use crate::linear::{pearson_or_zero, reconstruct_samples, LagSpec, SpeakerRole, Trf};
use crate::synth::seed_for;
use crate::trf_analysis::{
    bonferroni, bonferroni_alpha, channel_trf, cluster_permutation_test, crossval_trf, difference_trf, null_trfs, write_trf_csv,
    ClusterResult,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Linear,
    Cnn,
    Cca,
}

impl Algorithm {
    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::Linear => "linear",
            Algorithm::Cnn => "cnn",
            Algorithm::Cca => "cca",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Algorithm {
    type Err = AadError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Algorithm::Linear),
            "cnn" => Ok(Algorithm::Cnn),
            "cca" => Ok(Algorithm::Cca),
            other => Err(AadError::param(format!("unknown algorithm {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MarkerConfig {
    /// seconds
    pub segment: f64,
    /// 1 s hop instead of back-to-back segments
    pub overlap: bool,
    pub alpha: f64,
}

impl Default for MarkerConfig {
    fn default() -> Self {
        Self { segment: 5.0, overlap: false, alpha: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CnnConfig {
    pub grid: Vec<CnnHyper>,
    pub budget: TrainBudget,
}

impl Default for CnnConfig {
    fn default() -> Self {
        Self { grid: hyper_grid(), budget: TrainBudget::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CcaConfig {
    pub shrinkage: Vec<f64>,
    pub n_components: Vec<usize>,
    /// LDA training segment length, seconds
    pub lda_segment: f64,
}

impl Default for CcaConfig {
    fn default() -> Self {
        Self { shrinkage: cca::SHRINKAGE_GRID.to_vec(), n_components: vec![1, 2, 4, 8, 16], lda_segment: 5.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrfConfig {
    pub n_shifts: usize,
    /// seconds
    pub min_shift: f64,
    pub n_perm: usize,
    pub threshold_pct: f64,
}

impl Default for TrfConfig {
    fn default() -> Self {
        Self {
            n_shifts: crate::trf_analysis::DEFAULT_N_SHIFTS,
            min_shift: crate::trf_analysis::DEFAULT_MIN_SHIFT,
            n_perm: crate::trf_analysis::DEFAULT_N_PERM,
            threshold_pct: crate::trf_analysis::DEFAULT_THRESHOLD_PCT,
        }
    }
}

/// Everything a run depends on; loaded from one TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: PathBuf,
    pub out: PathBuf,
    pub seed: u64,
    pub algorithms: Vec<Algorithm>,
    pub features: Vec<FeatureKind>,
    /// seconds
    pub segment_lengths: Vec<f64>,
    /// seconds between segment starts
    pub hop: f64,
    pub inner_folds: usize,
    /// Restrict to these participant ids; empty means all.
    pub participants: Vec<String>,
    pub lambda_grid: Vec<f64>,
    /// Write every segment decision to segments.csv.
    pub write_segments: bool,
    pub markers: MarkerConfig,
    pub cnn: CnnConfig,
    pub cca: CcaConfig,
    pub trf: TrfConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("dataset"),
            out: PathBuf::from("results"),
            seed: 0,
            algorithms: vec![Algorithm::Linear, Algorithm::Cnn, Algorithm::Cca],
            features: FeatureKind::ALL.to_vec(),
            segment_lengths: SEGMENT_LENGTHS.to_vec(),
            hop: 1.0,
            inner_folds: 5,
            participants: Vec::new(),
            lambda_grid: lambda_grid(),
            write_segments: true,
            markers: MarkerConfig::default(),
            cnn: CnnConfig::default(),
            cca: CcaConfig::default(),
            trf: TrfConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| AadError::ingestion(path, e))?;
        let cfg: ExperimentConfig = toml::from_str(&text).map_err(|e| AadError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate().map_err(|e| AadError::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(AadError::Config(m.into()));
        if self.algorithms.is_empty() {
            return bad("algorithm list is empty");
        }
        if self.features.is_empty() {
            return bad("feature list is empty");
        }
        if self.segment_lengths.is_empty() || self.segment_lengths.iter().any(|&l| !(l > 0.0)) {
            return bad("segment lengths must be positive");
        }
        if !(self.hop > 0.0) || !(self.markers.segment > 0.0) {
            return bad("hop and marker segment must be positive");
        }
        if self.inner_folds < 2 {
            return bad("need at least two inner folds");
        }
        if self.lambda_grid.is_empty() || self.lambda_grid.iter().any(|&l| !(l >= 0.0)) {
            return bad("penalty grid must be non-empty and non-negative");
        }
        if self.algorithms.contains(&Algorithm::Cnn) && self.cnn.grid.is_empty() {
            return bad("CNN grid is empty");
        }
        if self.algorithms.contains(&Algorithm::Cca)
            && (self.cca.shrinkage.is_empty() || self.cca.n_components.is_empty() || self.cca.n_components.contains(&0))
        {
            return bad("CCA grids must be non-empty with positive component counts");
        }
        Ok(())
    }
}

/// Worker threads: `AAD_JOBS` if set to a positive integer, else rayon's default.
pub fn jobs_from_env() -> Option<usize> {
    std::env::var("AAD_JOBS").ok().and_then(|v| v.trim().parse::<usize>().ok()).filter(|&n| n > 0)
}

pub fn configure_jobs() {
    if let Some(n) = jobs_from_env() {
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub participant: String,
    pub algorithm: Algorithm,
    pub feature: FeatureKind,
    pub segment_length: f64,
    pub n_segments: usize,
    pub n_correct: usize,
    pub accuracy: f64,
    pub chance_level: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRow {
    pub participant: String,
    pub algorithm: Algorithm,
    pub feature: FeatureKind,
    pub segment_length: f64,
    pub trial: usize,
    pub start: f64,
    /// Delta rho for reconstruction decoders, LDA margin for CCA.
    pub score: f64,
    pub decision: String,
    pub truth: String,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkerRow {
    pub participant: String,
    pub algorithm: Algorithm,
    pub feature: FeatureKind,
    pub trial: usize,
    pub start: f64,
    pub length: f64,
    pub null: bool,
    pub rho_attended: f64,
    pub rho_ignored: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionRow {
    pub participant: String,
    pub feature: FeatureKind,
    pub trial: usize,
    /// attended-speaker model against the attended feature
    pub attended_rho: f64,
    /// ignored-speaker model against the ignored feature
    pub ignored_rho: f64,
    pub attended_lambda: f64,
    pub ignored_lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkerStat {
    pub participant: String,
    pub algorithm: Algorithm,
    pub feature: FeatureKind,
    pub n_true: usize,
    pub n_null: usize,
    pub mean_delta: f64,
    pub mean_null_delta: f64,
    pub t: f64,
    pub p: f64,
    pub threshold: f64,
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanAccuracy {
    pub algorithm: Algorithm,
    pub feature: FeatureKind,
    pub segment_length: f64,
    pub participants: usize,
    pub mean_accuracy: f64,
    pub sem: f64,
    pub mean_segments: f64,
    /// chance level at the mean per-participant segment count
    pub chance_level: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Summary {
    pub config: ExperimentConfig,
    pub participants: Vec<String>,
    pub accuracy: Vec<MeanAccuracy>,
    pub marker_stats: Vec<MarkerStat>,
    pub reconstruction: Vec<ReconstructionRow>,
}

#[derive(Debug, Clone, Default)]
pub struct Report {
    pub accuracy: Vec<AccuracyRow>,
    pub segments: Vec<SegmentRow>,
    pub markers: Vec<MarkerRow>,
    pub reconstruction: Vec<ReconstructionRow>,
}

fn kind_tag(kind: FeatureKind) -> u64 {
    match kind {
        FeatureKind::Envelope => 1,
        FeatureKind::Onsets => 2,
    }
}

fn algo_tag(a: Algorithm) -> u64 {
    match a {
        Algorithm::Linear => 1,
        Algorithm::Cnn => 2,
        Algorithm::Cca => 3,
    }
}

/// What an outer fold hands to the segment evaluation.
enum FoldOutcome {
    /// reconstruction of the held-out trial's attended feature
    Reconstruction(Vec<f64>),
    /// per-segment scorer: CCA projections plus the LDA
    Cca { u: Vec<Vec<f64>>, v_male: Vec<Vec<f64>>, v_female: Vec<Vec<f64>>, lda: cca::LdaClassifier },
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    p_idx: usize,
    participant: &'a Participant,
    plan: NestedCvPlan,
}

fn pieces_segments(pieces: &[Piece], fs: f64, length: f64) -> Vec<(usize, Segment)> {
    let mut out = Vec::new();
    for p in pieces {
        if let Ok(segs) = segment_bounds(p.range.len(), fs, length, length) {
            out.extend(segs.into_iter().map(|s| (p.trial, Segment { start: s.start + p.range.start, len: s.len })));
        }
    }
    out
}

fn linear_folds(ctx: &Ctx, kind: FeatureKind, out: &mut Report) -> Result<Vec<FoldOutcome>> {
    let trials = &ctx.participant.trials;
    let lags = LagSpec::backward_default();
    let att = tune_backward_with(&ctx.plan, trials, kind, SpeakerRole::Attended, &lags, &ctx.cfg.lambda_grid)?;
    let ign = tune_backward_with(&ctx.plan, trials, kind, SpeakerRole::Ignored, &lags, &ctx.cfg.lambda_grid)?;
    let mut outcomes = Vec::with_capacity(att.len());
    for (a, i) in att.iter().zip(&ign) {
        let test = &trials[a.test];
        let rec = reconstruct_samples(&a.model, &test.eeg)?;
        let rec_ign = reconstruct_samples(&i.model, &test.eeg)?;
        out.reconstruction.push(ReconstructionRow {
            participant: ctx.participant.id.clone(),
            feature: kind,
            trial: test.index,
            attended_rho: pearson_or_zero(&rec, test.attended.get(kind).samples()),
            ignored_rho: pearson_or_zero(&rec_ign, test.ignored.get(kind).samples()),
            attended_lambda: a.model.lambda,
            ignored_lambda: i.model.lambda,
        });
        outcomes.push(FoldOutcome::Reconstruction(rec));
    }
    Ok(outcomes)
}

fn cnn_folds(ctx: &Ctx, kind: FeatureKind) -> Result<Vec<FoldOutcome>> {
    let trials = &ctx.participant.trials;
    let lengths = trial_lengths(trials);
    let data = CnnData {
        eeg: trials.iter().map(|t| &t.eeg).collect(),
        target: trials.iter().map(|t| t.attended.get(kind).samples()).collect(),
    };
    let mut outcomes = Vec::with_capacity(trials.len());
    for (f_idx, fold) in ctx.plan.outer.iter().enumerate() {
        let pieces = fold.inner_pieces(&lengths);
        let (val_pieces, train_pieces) = pieces.split_last().expect("at least two inner folds");
        let windows = |ps: &[Piece]| -> Vec<(usize, usize)> {
            ps.iter().flat_map(|p| window_starts(p.trial, p.range.clone(), lengths[p.trial])).collect()
        };
        let train: Vec<(usize, usize)> = train_pieces.iter().flat_map(|ps| windows(ps)).collect();
        let val = windows(val_pieces);
        let mut best: Option<crate::cnn::TrainedCnn> = None;
        for (h_idx, hyper) in ctx.cfg.cnn.grid.iter().enumerate() {
            let seed = seed_for(ctx.cfg.seed, &[ctx.p_idx as u64, algo_tag(Algorithm::Cnn), kind_tag(kind), f_idx as u64, h_idx as u64]);
            let trained = train_cnn(&data, &train, &val, *hyper, &ctx.cfg.cnn.budget, seed)?;
            if best.as_ref().is_none_or(|b| trained.best_val_rho > b.best_val_rho) {
                best = Some(trained);
            }
        }
        let best = best.ok_or_else(|| AadError::Tuning("empty CNN grid".into()))?;
        outcomes.push(FoldOutcome::Reconstruction(cnn_reconstruct(&best.model, &trials[fold.test].eeg)?));
    }
    Ok(outcomes)
}

/// Correlation-difference vectors (attended minus ignored) of segments.
fn diff_vectors(
    projections: &[Option<(Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>)>],
    segments: &[(usize, Segment)],
    n_comp: usize,
) -> Vec<Vec<f64>> {
    segments
        .iter()
        .map(|(t, s)| {
            let (u, va, vi) = projections[*t].as_ref().expect("projected");
            let ca = corr_from_projections(&u[..n_comp], &va[..n_comp], s.range());
            let ci = corr_from_projections(&u[..n_comp], &vi[..n_comp], s.range());
            ca.iter().zip(&ci).map(|(a, b)| a - b).collect()
        })
        .collect()
}

type Projections = Vec<Option<(Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>)>>;

fn project_trials(model: &cca::CcaModel, trials: &[TrialBundle], which: &[usize], kind: FeatureKind) -> Result<Projections> {
    let mut out: Projections = vec![None; trials.len()];
    for &t in which {
        let tr = &trials[t];
        let (u, va) = project(model, &tr.eeg, tr.attended.get(kind).samples())?;
        let (_, vi) = project(model, &tr.eeg, tr.ignored.get(kind).samples())?;
        out[t] = Some((u, va, vi));
    }
    Ok(out)
}

fn lda_from_segments(proj: &Projections, segments: &[(usize, Segment)], n_comp: usize) -> Result<cca::LdaClassifier> {
    let pos = diff_vectors(proj, segments, n_comp);
    let neg: Vec<Vec<f64>> = pos.iter().map(|v| v.iter().map(|x| -x).collect()).collect();
    fit_lda(&pos, &neg)
}

fn cca_fold(ctx: &Ctx, kind: FeatureKind, fold: &OuterFold) -> Result<FoldOutcome> {
    let trials = &ctx.participant.trials;
    let lengths = trial_lengths(trials);
    let fs = trials[0].fs();
    let (el, fl) = (cca::eeg_lags(), cca::feature_lags());
    let pieces = fold.inner_pieces(&lengths);
    let cfg = &ctx.cfg.cca;

    // moments of every training trial over its full range and inner pieces
    let mut moments = std::collections::BTreeMap::new();
    for &t in &fold.train {
        let mut ranges = vec![0..lengths[t]];
        ranges.extend(pieces.iter().flatten().filter(|p| p.trial == t).map(|p| p.range.clone()));
        let ms = trial_moments(&trials[t].eeg, trials[t].attended.get(kind).samples(), &el, &fl, &ranges);
        for (r, m) in ranges.into_iter().zip(ms) {
            moments.insert((t, r.start, r.end), m);
        }
    }
    let total = fold
        .train
        .iter()
        .map(|&t| moments[&(t, 0, lengths[t])].moments.clone())
        .reduce(|a, b| a + b)
        .expect("non-empty training set");
    let (p, q) = (trials[0].eeg.n_channels() * el.taps(), fl.taps());

    let grid: Vec<(f64, usize)> =
        cfg.shrinkage.iter().flat_map(|&g| cfg.n_components.iter().map(move |&n| (g, n.min(q)))).collect();
    let mut scores = vec![0.0; grid.len()];
    for (k, val_pieces) in pieces.iter().enumerate() {
        let mut val = total.clone() * 0.0;
        for pc in val_pieces {
            val += &moments[&(pc.trial, pc.range.start, pc.range.end)].moments;
        }
        let train_m = cca::CcaMoments { moments: &total - &val, p, q };
        let train_pieces: Vec<Piece> =
            pieces.iter().enumerate().filter(|(j, _)| *j != k).flat_map(|(_, ps)| ps.iter().cloned()).collect();
        let train_segs = pieces_segments(&train_pieces, fs, cfg.lda_segment);
        let val_segs = pieces_segments(val_pieces, fs, cfg.lda_segment);
        for &gamma in &cfg.shrinkage {
            let Ok(model) = fit_cca_moments(&train_m, gamma, el, fl) else {
                grid.iter().enumerate().filter(|(_, g)| g.0 == gamma).for_each(|(i, _)| scores[i] = f64::NAN);
                continue;
            };
            let proj = project_trials(&model, trials, &fold.train, kind)?;
            for (i, &(g, n)) in grid.iter().enumerate() {
                if g != gamma {
                    continue;
                }
                let acc = match lda_from_segments(&proj, &train_segs, n) {
                    Ok(lda) if !val_segs.is_empty() => {
                        let d = diff_vectors(&proj, &val_segs, n);
                        d.iter().filter(|v| lda.margin(v) >= 0.0).count() as f64 / d.len() as f64
                    }
                    _ => f64::NAN,
                };
                scores[i] += acc / pieces.len() as f64;
            }
        }
    }
    let best = crate::evaluation::select_best(&scores)
        .ok_or_else(|| AadError::Tuning(format!("no CCA setting could be scored for held-out trial {}", fold.test)))?;
    let (gamma, n_comp) = grid[best];
    let model = fit_cca_moments(&cca::CcaMoments { moments: total, p, q }, gamma, el, fl)?.truncated(n_comp);
    let proj = project_trials(&model, trials, &fold.train, kind)?;
    let all_train: Vec<Piece> = fold.train.iter().map(|&t| Piece { trial: t, range: 0..lengths[t] }).collect();
    let lda = lda_from_segments(&proj, &pieces_segments(&all_train, fs, cfg.lda_segment), model.n_comp())?;
    let test = &trials[fold.test];
    let (male, female) = match test.attended_label {
        crate::dataset::Speaker::Male => (&test.attended, &test.ignored),
        crate::dataset::Speaker::Female => (&test.ignored, &test.attended),
    };
    let (u, v_male) = project(&model, &test.eeg, male.get(kind).samples())?;
    let (_, v_female) = project(&model, &test.eeg, female.get(kind).samples())?;
    Ok(FoldOutcome::Cca { u, v_male, v_female, lda })
}

fn cca_folds(ctx: &Ctx, kind: FeatureKind) -> Result<Vec<FoldOutcome>> {
    ctx.plan.outer.iter().map(|f| cca_fold(ctx, kind, f)).collect()
}

fn evaluate_participant(cfg: &ExperimentConfig, p_idx: usize, participant: &Participant) -> Result<Report> {
    let trials = &participant.trials;
    let plan = make_nested_cv(trials.len(), cfg.inner_folds, seed_for(cfg.seed, &[p_idx as u64]))?;
    let ctx = Ctx { cfg, p_idx, participant, plan };
    let mut out = Report::default();
    for &kind in &cfg.features {
        for &algo in &cfg.algorithms {
            let outcomes = match algo {
                Algorithm::Linear => linear_folds(&ctx, kind, &mut out)?,
                Algorithm::Cnn => cnn_folds(&ctx, kind)?,
                Algorithm::Cca => cca_folds(&ctx, kind)?,
            };
            for &length in &cfg.segment_lengths {
                let (mut n, mut correct) = (0, 0);
                for (fold, outcome) in ctx.plan.outer.iter().zip(&outcomes) {
                    let test = &trials[fold.test];
                    let segs = segment_bounds(test.len(), test.fs(), length, cfg.hop)?;
                    let truth = test.attended_label;
                    for s in &segs {
                        let (score, pick_attended) = match outcome {
                            FoldOutcome::Reconstruction(rec) => {
                                let r = s.range();
                                let ra = pearson_or_zero(&rec[r.clone()], &test.attended.get(kind).samples()[r.clone()]);
                                let ri = pearson_or_zero(&rec[r.clone()], &test.ignored.get(kind).samples()[r]);
                                let delta = ra - ri;
                                (delta, delta > 0.0)
                            }
                            FoldOutcome::Cca { u, v_male, v_female, lda } => {
                                let cm = corr_from_projections(u, v_male, s.range());
                                let cf = corr_from_projections(u, v_female, s.range());
                                let (d, margin) = decide(lda, &cm, &cf);
                                let male = d == Decision::A;
                                (margin, male == (truth == crate::dataset::Speaker::Male))
                            }
                        };
                        let decision = if pick_attended { truth } else { truth.other() };
                        n += 1;
                        correct += pick_attended as usize;
                        if cfg.write_segments {
                            out.segments.push(SegmentRow {
                                participant: participant.id.clone(),
                                algorithm: algo,
                                feature: kind,
                                segment_length: length,
                                trial: test.index,
                                start: s.start as f64 / test.fs(),
                                score,
                                decision: decision.to_string(),
                                truth: truth.to_string(),
                                correct: pick_attended,
                            });
                        }
                    }
                }
                let accuracy = if n > 0 { correct as f64 / n as f64 } else { f64::NAN };
                out.accuracy.push(AccuracyRow {
                    participant: participant.id.clone(),
                    algorithm: algo,
                    feature: kind,
                    segment_length: length,
                    n_segments: n,
                    n_correct: correct,
                    accuracy,
                    chance_level: if n > 0 { chance_level(n, 0.05)? } else { f64::NAN },
                });
            }
            // marker segments for the significance tests
            if algo != Algorithm::Cca {
                let hop = if cfg.markers.overlap { 1.0 } else { cfg.markers.segment };
                for (f_idx, (fold, outcome)) in ctx.plan.outer.iter().zip(&outcomes).enumerate() {
                    let FoldOutcome::Reconstruction(rec) = outcome else { continue };
                    let test = &trials[fold.test];
                    let segs = segment_bounds(test.len(), test.fs(), cfg.markers.segment, hop)?;
                    let (a, i) = (test.attended.get(kind).samples(), test.ignored.get(kind).samples());
                    let real = markers_from_reconstruction(rec, a, i, &segs, test.fs());
                    let seed = seed_for(cfg.seed, &[p_idx as u64, algo_tag(algo), kind_tag(kind), f_idx as u64, 99]);
                    let null = if segs.len() >= 2 {
                        null_markers_from_reconstruction(rec, a, i, &segs, test.fs(), seed)?
                    } else {
                        Vec::new()
                    };
                    for (is_null, set) in [(false, real), (true, null)] {
                        for m in set {
                            out.markers.push(MarkerRow {
                                participant: participant.id.clone(),
                                algorithm: algo,
                                feature: kind,
                                trial: test.index,
                                start: m.start,
                                length: m.length,
                                null: is_null,
                                rho_attended: m.rho_attended,
                                rho_ignored: m.rho_ignored,
                                delta: m.delta,
                            });
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

fn select_participants(cfg: &ExperimentConfig, mut participants: Vec<Participant>) -> Result<Vec<Participant>> {
    if !cfg.participants.is_empty() {
        for id in &cfg.participants {
            if !participants.iter().any(|p| &p.id == id) {
                return Err(AadError::Config(format!("participant {id} not in dataset")));
            }
        }
        participants.retain(|p| cfg.participants.contains(&p.id));
    }
    if participants.is_empty() {
        return Err(AadError::Config("no participants selected".into()));
    }
    Ok(participants)
}

/// Runs every configured decoder on every participant, in parallel across
/// participants; results are merged in participant order.
pub fn evaluate(cfg: &ExperimentConfig, participants: &[Participant]) -> Result<Report> {
    cfg.validate()?;
    let parts: Vec<Report> = participants
        .par_iter()
        .enumerate()
        .map(|(i, p)| evaluate_participant(cfg, i, p))
        .collect::<Result<Vec<_>>>()?;
    let mut report = Report::default();
    for r in parts {
        report.accuracy.extend(r.accuracy);
        report.segments.extend(r.segments);
        report.markers.extend(r.markers);
        report.reconstruction.extend(r.reconstruction);
    }
    Ok(report)
}

/// Per participant, algorithm and feature: single-tailed unpaired t-test
/// of true against null markers, Bonferroni-corrected over participants.
pub fn marker_stats(markers: &[MarkerRow], alpha: f64) -> Result<Vec<MarkerStat>> {
    let mut keys: Vec<(String, Algorithm, FeatureKind)> =
        markers.iter().map(|m| (m.participant.clone(), m.algorithm, m.feature)).collect();
    keys.dedup();
    keys.sort();
    keys.dedup();
    let n_participants = {
        let mut ids: Vec<&String> = keys.iter().map(|k| &k.0).collect();
        ids.sort();
        ids.dedup();
        ids.len().max(1)
    };
    let threshold = alpha / n_participants as f64;
    let mut out = Vec::with_capacity(keys.len());
    for (pid, algo, kind) in keys {
        let sel = |null: bool| -> Vec<f64> {
            markers
                .iter()
                .filter(|m| m.participant == pid && m.algorithm == algo && m.feature == kind && m.null == null)
                .map(|m| m.delta)
                .collect()
        };
        let (real, null) = (sel(false), sel(true));
        let (t, p) = match ttest(TTestKind::Unpaired, Tail::Single, &real, &null) {
            Ok(v) => v,
            Err(AadError::DegenerateTest(_)) => (0.0, 1.0),
            Err(e) => return Err(e),
        };
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
        out.push(MarkerStat {
            participant: pid,
            algorithm: algo,
            feature: kind,
            n_true: real.len(),
            n_null: null.len(),
            mean_delta: mean(&real),
            mean_null_delta: mean(&null),
            t,
            p,
            threshold,
            significant: bonferroni_alpha(&[p], n_participants, alpha)?[0],
        });
    }
    Ok(out)
}

/// Mean accuracy over participants per (algorithm, feature, length).
pub fn mean_accuracy(rows: &[AccuracyRow]) -> Result<Vec<MeanAccuracy>> {
    let mut keys: Vec<(Algorithm, FeatureKind, u64)> =
        rows.iter().map(|r| (r.algorithm, r.feature, r.segment_length.to_bits())).collect();
    keys.sort_by(|a, b| (a.0, a.1, f64::from_bits(a.2)).partial_cmp(&(b.0, b.1, f64::from_bits(b.2))).expect("finite lengths"));
    keys.dedup();
    let mut out = Vec::new();
    for (algo, kind, bits) in keys {
        let len = f64::from_bits(bits);
        let sel: Vec<&AccuracyRow> = rows
            .iter()
            .filter(|r| r.algorithm == algo && r.feature == kind && r.segment_length == len && r.n_segments > 0)
            .collect();
        if sel.is_empty() {
            continue;
        }
        let n = sel.len() as f64;
        let mean = sel.iter().map(|r| r.accuracy).sum::<f64>() / n;
        let sem = if sel.len() > 1 {
            (sel.iter().map(|r| (r.accuracy - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
        } else {
            0.0
        };
        let mean_segments = sel.iter().map(|r| r.n_segments as f64).sum::<f64>() / n;
        out.push(MeanAccuracy {
            algorithm: algo,
            feature: kind,
            segment_length: len,
            participants: sel.len(),
            mean_accuracy: mean,
            sem,
            mean_segments,
            chance_level: chance_level((mean_segments.round() as usize).max(1), 0.05)?,
        });
    }
    Ok(out)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| AadError::ingestion(path, e))?;
    r.deserialize().collect::<std::result::Result<Vec<T>, _>>().map_err(|e| AadError::ingestion(path, e))
}

/// Loads the dataset, evaluates it and writes results.csv, segments.csv,
/// markers.csv, reconstruction.csv and summary.json under `cfg.out`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<(Report, Summary)> {
    cfg.validate()?;
    let participants = select_participants(cfg, read_dataset(&cfg.dataset)?.participants)?;
    let report = evaluate(cfg, &participants)?;
    let summary = Summary {
        config: cfg.clone(),
        participants: participants.iter().map(|p| p.id.clone()).collect(),
        accuracy: mean_accuracy(&report.accuracy)?,
        marker_stats: marker_stats(&report.markers, cfg.markers.alpha)?,
        reconstruction: report.reconstruction.clone(),
    };
    fs::create_dir_all(&cfg.out)?;
    write_csv(&cfg.out.join("results.csv"), &report.accuracy)?;
    if cfg.write_segments {
        write_csv(&cfg.out.join("segments.csv"), &report.segments)?;
    }
    write_csv(&cfg.out.join("markers.csv"), &report.markers)?;
    write_csv(&cfg.out.join("reconstruction.csv"), &report.reconstruction)?;
    fs::write(cfg.out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok((report, summary))
}

/// Marker statistics recomputed from a results directory's markers.csv.
pub fn stats_from_results(dir: &Path, alpha: f64) -> Result<Vec<MarkerStat>> {
    let markers: Vec<MarkerRow> = read_csv(&dir.join("markers.csv"))?;
    marker_stats(&markers, alpha)
}

/// Plain-text accuracy table from a results directory's results.csv.
pub fn report_from_results(dir: &Path) -> Result<String> {
    let rows: Vec<AccuracyRow> = read_csv(&dir.join("results.csv"))?;
    let means = mean_accuracy(&rows)?;
    let mut s = String::from("algorithm  feature   length_s  participants  mean_acc  sem     chance\n");
    for m in &means {
        s.push_str(&format!(
            "{:<10} {:<9} {:>8}  {:>12}  {:>8.3}  {:.3}  {:.3}{}\n",
            m.algorithm.as_str(),
            m.feature.as_str(),
            m.segment_length,
            m.participants,
            m.mean_accuracy,
            m.sem,
            m.chance_level,
            if m.mean_accuracy > m.chance_level { "  *" } else { "" }
        ));
    }
    Ok(s)
}

/// One cluster test of the TRF analysis.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrfTest {
    pub feature: FeatureKind,
    pub role: SpeakerRole,
    pub channel: String,
    pub result: ClusterResult,
    /// smallest cluster p below 0.05 / number of tests
    pub significant: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrfReport {
    pub participants: Vec<String>,
    pub bonferroni_m: usize,
    pub tests: Vec<TrfTest>,
}

/// Per participant and feature: cross-validated attended, ignored and
/// difference TRFs plus their misalignment nulls (fold-averaged per
/// shift). Nulls are grand-averaged across participants shift by shift so
/// the cluster threshold is on the scale of the grand-average TRF.
pub fn run_trf_analysis(cfg: &ExperimentConfig) -> Result<TrfReport> {
    let participants = select_participants(cfg, read_dataset(&cfg.dataset)?.participants)?;
    if participants.len() < 2 {
        return Err(AadError::Config("TRF cluster tests need at least two participants".into()));
    }
    let roles = [SpeakerRole::Attended, SpeakerRole::Ignored, SpeakerRole::Difference];
    type PerParticipant = Vec<(FeatureKind, [Trf; 3], [Vec<Trf>; 3])>;
    let per: Vec<PerParticipant> = participants
        .par_iter()
        .enumerate()
        .map(|(p_idx, p)| -> Result<PerParticipant> {
            let mut v = Vec::new();
            for &kind in &cfg.features {
                let a = crossval_trf(&p.trials, kind, SpeakerRole::Attended)?;
                let i = crossval_trf(&p.trials, kind, SpeakerRole::Ignored)?;
                let d = difference_trf(&a, &i)?;
                let seed = seed_for(cfg.seed, &[p_idx as u64, kind_tag(kind), 7]);
                let na = null_trfs(&p.trials, kind, SpeakerRole::Attended, cfg.trf.n_shifts, cfg.trf.min_shift, seed)?.fold_means()?;
                let ni = null_trfs(&p.trials, kind, SpeakerRole::Ignored, cfg.trf.n_shifts, cfg.trf.min_shift, seed)?.fold_means()?;
                let nd = na.iter().zip(&ni).map(|(x, y)| difference_trf(x, y)).collect::<Result<Vec<_>>>()?;
                v.push((kind, [a, i, d], [na, ni, nd]));
            }
            Ok(v)
        })
        .collect::<Result<Vec<_>>>()?;

    fs::create_dir_all(&cfg.out)?;
    let mut curves = Vec::new();
    let mut tests = Vec::new();
    let n_channels = per[0][0].1[0].n_channels();
    let m = cfg.features.len() * roles.len() * n_channels;
    for (k_idx, &kind) in cfg.features.iter().enumerate() {
        for (r_idx, &role) in roles.iter().enumerate() {
            let trfs: Vec<Trf> = per.iter().map(|pp| pp[k_idx].1[r_idx].clone()).collect();
            for (pid, t) in participants.iter().zip(&trfs) {
                curves.push((pid.id.clone(), t.clone()));
            }
            let grand = Trf::mean(&trfs)?;
            curves.push(("grand_average".to_string(), grand));
            let n_shifts = per[0][k_idx].2[r_idx].len();
            let null_grand = (0..n_shifts)
                .map(|s| Trf::mean(&per.iter().map(|pp| pp[k_idx].2[r_idx][s].clone()).collect::<Vec<_>>()))
                .collect::<Result<Vec<_>>>()?;
            for c in 0..n_channels {
                let parts: Vec<Trf> = trfs.iter().map(|t| channel_trf(t, c)).collect();
                let nulls: Vec<Trf> = null_grand.iter().map(|t| channel_trf(t, c)).collect();
                let seed = seed_for(cfg.seed, &[kind_tag(kind), r_idx as u64, c as u64, 13]);
                let result = cluster_permutation_test(&parts, &nulls, cfg.trf.n_perm, cfg.trf.threshold_pct, seed)?;
                let significant = result.min_p().is_some_and(|p| bonferroni(&[p], m).map(|v| v[0]).unwrap_or(false));
                tests.push(TrfTest { feature: kind, role, channel: trfs[0].channels[c].clone(), result, significant });
            }
        }
    }
    write_trf_csv(&cfg.out.join("trf_curves.csv"), &curves)?;
    let report = TrfReport { participants: participants.iter().map(|p| p.id.clone()).collect(), bonferroni_m: m, tests };
    fs::write(cfg.out.join("clusters.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}
