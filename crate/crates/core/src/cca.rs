//! Canonical correlation analysis between lagged EEG and lagged features,
//! and a shrinkage LDA over correlation-difference vectors.

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{AadError, Result};
use crate::io::{read_f32, write_f32};
use crate::linear::{design_matrix, lag_columns, lead_columns, moment_matrices, pearson_or_zero, Column, LagSpec};
use crate::signal::MultiSignal;

pub const SHRINKAGE_GRID: [f64; 3] = [0.0, 1e-4, 1e-2];
const LDA_SHRINKAGE: f64 = 1e-3;

/// EEG side: leads `[0, 1 s)`.
pub fn eeg_lags() -> LagSpec {
    LagSpec::backward_default()
}

/// Feature side: lags `[0, 250 ms)`.
pub fn feature_lags() -> LagSpec {
    LagSpec { lag_min: 0, lag_max: 16, fs: 64.0 }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CcaModel {
    /// eeg dims x n_comp
    pub wx: DMatrix<f64>,
    /// feature dims x n_comp
    pub wy: DMatrix<f64>,
    pub mean_x: Vec<f64>,
    pub mean_y: Vec<f64>,
    /// Training canonical correlations, non-increasing.
    pub rho: Vec<f64>,
    pub eeg_lags: LagSpec,
    pub feature_lags: LagSpec,
    pub shrinkage: f64,
}

impl CcaModel {
    pub fn n_comp(&self) -> usize {
        self.rho.len()
    }

    /// The leading `n` component pairs.
    pub fn truncated(&self, n: usize) -> CcaModel {
        let n = n.min(self.n_comp());
        CcaModel {
            wx: self.wx.columns(0, n).clone_owned(),
            wy: self.wy.columns(0, n).clone_owned(),
            rho: self.rho[..n].to_vec(),
            ..self.clone()
        }
    }
}

/// Centred covariances of the joint columns `[X, Y]`, built from raw
/// moments over `[X, Y, 1]` (the ones column last).
#[derive(Debug, Clone)]
pub struct CcaMoments {
    pub moments: DMatrix<f64>,
    pub p: usize,
    pub q: usize,
}

impl CcaMoments {
    pub fn n(&self) -> f64 {
        let k = self.p + self.q;
        self.moments[(k, k)]
    }

    fn covariance(&self) -> (DMatrix<f64>, Vec<f64>) {
        let k = self.p + self.q;
        let n = self.n();
        let sums = self.moments.view((0, k), (k, 1));
        let mean: Vec<f64> = sums.iter().map(|s| s / n).collect();
        let mv = DVector::from_column_slice(&mean);
        let c = (self.moments.view((0, 0), (k, k)) - n * &mv * mv.transpose()) / (n - 1.0);
        (c, mean)
    }
}

fn shrink(c: &DMatrix<f64>, gamma: f64) -> DMatrix<f64> {
    let d = c.nrows();
    let mu = c.trace() / d as f64;
    c * (1.0 - gamma) + DMatrix::identity(d, d) * (gamma * mu)
}

/// `C^{-1/2}` of a symmetric positive definite matrix.
fn inv_sqrt(c: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(c.clone());
    let max = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let tol = max * c.nrows() as f64 * f64::EPSILON * 64.0;
    if eig.eigenvalues.iter().any(|&v| !(v > tol)) {
        return Err(AadError::Singular(format!("{what} covariance is rank deficient")));
    }
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| 1.0 / v.sqrt()));
    Ok(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

pub fn fit_cca_moments(m: &CcaMoments, shrinkage: f64, eeg_lags: LagSpec, feature_lags: LagSpec) -> Result<CcaModel> {
    if !(0.0..=1.0).contains(&shrinkage) {
        return Err(AadError::param(format!("shrinkage {shrinkage} outside [0, 1]")));
    }
    if m.n() < 2.0 {
        return Err(AadError::Length("CCA needs at least two rows".into()));
    }
    let (c, mean) = m.covariance();
    let (p, q) = (m.p, m.q);
    let cxx = shrink(&c.view((0, 0), (p, p)).clone_owned(), shrinkage);
    let cyy = shrink(&c.view((p, p), (q, q)).clone_owned(), shrinkage);
    let cxy = c.view((0, p), (p, q)).clone_owned();
    let kx = inv_sqrt(&cxx, "EEG")?;
    let ky = inv_sqrt(&cyy, "feature")?;
    let k = &kx * cxy * &ky;
    let svd = k.svd(true, true);
    let u = svd.u.expect("requested");
    let vt = svd.v_t.expect("requested");
    let r = svd.singular_values.len();
    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let wx = DMatrix::from_fn(p, r, |i, j| (&kx * u.column(order[j]))[i]);
    let wy = DMatrix::from_fn(q, r, |i, j| (&ky * vt.row(order[j]).transpose())[i]);
    let rho = order.iter().map(|&j| svd.singular_values[j].clamp(0.0, 1.0)).collect();
    Ok(CcaModel {
        wx,
        wy,
        mean_x: mean[..p].to_vec(),
        mean_y: mean[p..].to_vec(),
        rho,
        eeg_lags,
        feature_lags,
        shrinkage,
    })
}

/// CCA of two design matrices with shrinkage-regularised whitening.
pub fn fit_cca(x: &DMatrix<f64>, y: &DMatrix<f64>, shrinkage: f64) -> Result<CcaModel> {
    if x.nrows() != y.nrows() {
        return Err(AadError::Length(format!("{} vs {} rows", x.nrows(), y.nrows())));
    }
    let (n, p, q) = (x.nrows(), x.ncols(), y.ncols());
    let mut joint = DMatrix::zeros(n, p + q + 1);
    joint.view_mut((0, 0), (n, p)).copy_from(x);
    joint.view_mut((0, p), (n, q)).copy_from(y);
    joint.column_mut(p + q).fill(1.0);
    let m = CcaMoments { moments: joint.transpose() * &joint, p, q };
    let lx = LagSpec { lag_min: 0, lag_max: p as i64, fs: 1.0 };
    let ly = LagSpec { lag_min: 0, lag_max: q as i64, fs: 1.0 };
    fit_cca_moments(&m, shrinkage, lx, ly)
}

/// Joint columns for a trial: EEG leads, then feature lags, then ones.
/// Sources are `[eeg channels.., feature, ones]`.
pub fn trial_columns(n_channels: usize, eeg_lags: &LagSpec, feature_lags: &LagSpec) -> Vec<Column> {
    let mut cols = lead_columns(0..n_channels, eeg_lags);
    cols.extend(lag_columns(n_channels..n_channels + 1, feature_lags));
    cols.push(Column { source: n_channels + 1, shift: 0 });
    cols
}

/// Moments of one trial over the given row ranges.
pub fn trial_moments(
    eeg: &MultiSignal,
    feature: &[f64],
    eeg_lags: &LagSpec,
    feature_lags: &LagSpec,
    ranges: &[std::ops::Range<usize>],
) -> Vec<CcaMoments> {
    let ones = vec![1.0; eeg.len()];
    let mut sources: Vec<&[f64]> = eeg.data().iter().map(|c| c.as_slice()).collect();
    sources.push(feature);
    sources.push(&ones);
    let cols = trial_columns(eeg.n_channels(), eeg_lags, feature_lags);
    let p = eeg.n_channels() * eeg_lags.taps();
    let q = feature_lags.taps();
    moment_matrices(&sources, &cols, ranges).into_iter().map(|moments| CcaMoments { moments, p, q }).collect()
}

/// Projected canonical components of a whole recording, one vector per
/// component, lag context zero-filled at the edges.
pub fn project(model: &CcaModel, eeg: &MultiSignal, feature: &[f64]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let p = eeg.n_channels() * model.eeg_lags.taps();
    if p != model.wx.nrows() || feature.len() != eeg.len() {
        return Err(AadError::param("segment does not match the CCA model's dimensions"));
    }
    let t = eeg.len();
    let sources: Vec<&[f64]> = eeg.data().iter().map(|c| c.as_slice()).collect();
    let xcols = lead_columns(0..eeg.n_channels(), &model.eeg_lags);
    let ycols = lag_columns(0..1, &model.feature_lags);
    let project_side = |srcs: &[&[f64]], cols: &[Column], w: &DMatrix<f64>, mean: &[f64]| -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; t]; w.ncols()];
        for (j, col) in cols.iter().enumerate() {
            let src = srcs[col.source];
            // rows whose shifted index stays inside the signal
            let lo = (-col.shift).clamp(0, t as i64) as usize;
            let hi = (t as i64 - col.shift).clamp(0, t as i64) as usize;
            for (k, o) in out.iter_mut().enumerate() {
                let wk = w[(j, k)];
                let off = wk * mean[j];
                o.iter_mut().for_each(|v| *v -= off);
                for i in lo..hi {
                    o[i] += wk * src[(i as i64 + col.shift) as usize];
                }
            }
        }
        out
    };
    let u = project_side(&sources, &xcols, &model.wx, &model.mean_x);
    let v = project_side(&[feature], &ycols, &model.wy, &model.mean_y);
    Ok((u, v))
}

/// Per-component Pearson correlations on `range`; degenerate entries are 0.
pub fn corr_from_projections(u: &[Vec<f64>], v: &[Vec<f64>], range: std::ops::Range<usize>) -> Vec<f64> {
    u.iter().zip(v).map(|(a, b)| pearson_or_zero(&a[range.clone()], &b[range.clone()])).collect()
}

/// Correlation vector of one self-contained segment.
pub fn correlation_vector(model: &CcaModel, eeg: &MultiSignal, feature: &[f64]) -> Result<Vec<f64>> {
    let (u, v) = project(model, eeg, feature)?;
    Ok(corr_from_projections(&u, &v, 0..eeg.len()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LdaClassifier {
    pub w: Vec<f64>,
    pub bias: f64,
}

impl LdaClassifier {
    pub fn margin(&self, x: &[f64]) -> f64 {
        self.w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + self.bias
    }
}

/// Two-class LDA with a small ridge on the pooled covariance and the
/// boundary at the class-mean midpoint.
pub fn fit_lda(positive: &[Vec<f64>], negative: &[Vec<f64>]) -> Result<LdaClassifier> {
    if positive.len() < 2 || negative.len() < 2 {
        return Err(AadError::param("LDA needs >= 2 samples per class"));
    }
    let d = positive[0].len();
    if positive.iter().chain(negative).any(|v| v.len() != d) || d == 0 {
        return Err(AadError::param("LDA samples differ in dimension"));
    }
    let mean = |set: &[Vec<f64>]| -> DVector<f64> {
        set.iter().fold(DVector::zeros(d), |a, v| a + DVector::from_column_slice(v)) / set.len() as f64
    };
    let (mp, mn) = (mean(positive), mean(negative));
    let diff = &mp - &mn;
    if diff.norm() <= 1e-14 * (mp.norm() + mn.norm()).max(1e-300) {
        return Err(AadError::DegenerateClassifier("class means coincide".into()));
    }
    let mut s = DMatrix::zeros(d, d);
    for (set, m) in [(positive, &mp), (negative, &mn)] {
        for v in set {
            let c = DVector::from_column_slice(v) - m;
            s += &c * c.transpose();
        }
    }
    s /= (positive.len() + negative.len() - 2) as f64;
    let tr = s.trace();
    let s = s + DMatrix::identity(d, d) * (LDA_SHRINKAGE * tr / d as f64);
    let w = s
        .cholesky()
        .ok_or_else(|| AadError::DegenerateClassifier("pooled covariance is singular".into()))?
        .solve(&diff);
    let bias = -w.dot(&((&mp + &mn) / 2.0));
    Ok(LdaClassifier { w: w.iter().copied().collect(), bias })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    A,
    B,
}

/// `d = corr(eeg, A) - corr(eeg, B)`; A wins iff `w.d + b >= 0`.
pub fn decide(lda: &LdaClassifier, corr_a: &[f64], corr_b: &[f64]) -> (Decision, f64) {
    let d: Vec<f64> = corr_a.iter().zip(corr_b).map(|(a, b)| a - b).collect();
    let margin = lda.margin(&d);
    (if margin >= 0.0 { Decision::A } else { Decision::B }, margin)
}

pub fn decode_cca(
    model: &CcaModel,
    lda: &LdaClassifier,
    eeg: &MultiSignal,
    feat_a: &[f64],
    feat_b: &[f64],
) -> Result<(Decision, f64)> {
    let ca = correlation_vector(model, eeg, feat_a)?;
    let cb = correlation_vector(model, eeg, feat_b)?;
    Ok(decide(lda, &ca, &cb))
}

#[derive(Debug, Serialize, Deserialize)]
struct CcaHeader {
    p: usize,
    q: usize,
    n_comp: usize,
    rho: Vec<f64>,
    eeg_lags: LagSpec,
    feature_lags: LagSpec,
    shrinkage: f64,
    lda: Option<LdaClassifier>,
}

/// Writes `<stem>.json` (header) and `<stem>.f32` (means then projections,
/// column-major).
pub fn save_cca(path_stem: &Path, model: &CcaModel, lda: Option<&LdaClassifier>) -> Result<()> {
    let header = CcaHeader {
        p: model.wx.nrows(),
        q: model.wy.nrows(),
        n_comp: model.n_comp(),
        rho: model.rho.clone(),
        eeg_lags: model.eeg_lags,
        feature_lags: model.feature_lags,
        shrinkage: model.shrinkage,
        lda: lda.cloned(),
    };
    let mut payload = model.mean_x.clone();
    payload.extend(&model.mean_y);
    payload.extend(model.wx.iter());
    payload.extend(model.wy.iter());
    let mut extra = Map::new();
    extra.insert("cca".into(), serde_json::to_value(&header)?);
    write_f32(&path_stem.with_extension("f32"), &["cca".into()], &[&payload], 0.0, extra)
}

pub fn load_cca(path_stem: &Path) -> Result<(CcaModel, Option<LdaClassifier>)> {
    let path = path_stem.with_extension("f32");
    let (side, data) = read_f32(&path)?;
    let header: CcaHeader = serde_json::from_value(side.extra.get("cca").cloned().unwrap_or(Value::Null))
        .map_err(|e| AadError::ingestion(&path, e))?;
    let v = &data[0];
    let (p, q, r) = (header.p, header.q, header.n_comp);
    if v.len() != p + q + p * r + q * r {
        return Err(AadError::ingestion(&path, "CCA payload size does not match its header"));
    }
    let model = CcaModel {
        mean_x: v[..p].to_vec(),
        mean_y: v[p..p + q].to_vec(),
        wx: DMatrix::from_column_slice(p, r, &v[p + q..p + q + p * r]),
        wy: DMatrix::from_column_slice(q, r, &v[p + q + p * r..]),
        rho: header.rho,
        eeg_lags: header.eeg_lags,
        feature_lags: header.feature_lags,
        shrinkage: header.shrinkage,
    };
    Ok((model, header.lda))
}

/// Design matrices `(X, Y)` of a trial without the ones column.
pub fn trial_design(eeg: &MultiSignal, feature: &[f64], eeg_lags: &LagSpec, feature_lags: &LagSpec) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut sources: Vec<&[f64]> = eeg.data().iter().map(|c| c.as_slice()).collect();
    sources.push(feature);
    let x = design_matrix(&sources, &lead_columns(0..eeg.n_channels(), eeg_lags), 0..eeg.len());
    let y = design_matrix(&sources, &lag_columns(eeg.n_channels()..eeg.n_channels() + 1, feature_lags), 0..eeg.len());
    (x, y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
    }

    /// Canonical correlations as square roots of the eigenvalues of
    /// `L^-1 Cxy Cyy^-1 Cyx L^-T` with `Cxx = L L^T`.
    fn oracle_rho(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Vec<f64> {
        let n = x.nrows() as f64;
        let center = |m: &DMatrix<f64>| {
            let mut c = m.clone();
            for mut col in c.column_iter_mut() {
                let mu = col.mean();
                col.add_scalar_mut(-mu);
            }
            c
        };
        let (xc, yc) = (center(x), center(y));
        let cxx = xc.transpose() * &xc / (n - 1.0);
        let cyy = yc.transpose() * &yc / (n - 1.0);
        let cxy = xc.transpose() * &yc / (n - 1.0);
        let l = cxx.cholesky().unwrap().l();
        let linv = l.clone().try_inverse().unwrap();
        let m = &linv * &cxy * cyy.try_inverse().unwrap() * cxy.transpose() * linv.transpose();
        let m = (&m + m.transpose()) / 2.0;
        let mut ev: Vec<f64> = SymmetricEigen::new(m).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).collect();
        ev.sort_by(|a, b| b.total_cmp(a));
        ev.truncate(x.ncols().min(y.ncols()));
        ev
    }

    #[test]
    fn matches_generalized_eigen_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let x = randn(80, 6, &mut rng);
            let y = x.columns(0, 4) * randn(4, 4, &mut rng) + randn(80, 4, &mut rng);
            let m = fit_cca(&x, &y, 0.0).unwrap();
            let o = oracle_rho(&x, &y);
            for (a, b) in m.rho.iter().zip(&o) {
                assert!((a - b).abs() < 1e-8, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn self_correlation_is_one_and_components_uncorrelated() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = randn(200, 5, &mut rng);
        let m = fit_cca(&x, &x, 0.0).unwrap();
        assert!(m.rho.iter().all(|r| (r - 1.0).abs() < 1e-9));

        let y = x.columns(0, 3) * randn(3, 3, &mut rng) + randn(200, 3, &mut rng) * 2.0;
        let m = fit_cca(&x, &y, 0.0).unwrap();
        assert!(m.rho.windows(2).all(|w| w[0] >= w[1]));
        let mx = DMatrix::from_fn(200, 5, |i, j| x[(i, j)] - m.mean_x[j]);
        let my = DMatrix::from_fn(200, 3, |i, j| y[(i, j)] - m.mean_y[j]);
        let u = mx * &m.wx;
        let v = my * &m.wy;
        let cov_u = u.transpose() * &u / 199.0;
        for i in 0..3 {
            assert!((cov_u[(i, i)] - 1.0).abs() < 1e-9);
            let r = crate::linear::pearson(u.column(i).as_slice(), v.column(i).as_slice()).unwrap();
            assert!((r - m.rho[i]).abs() < 1e-9);
            for j in 0..3 {
                if i != j {
                    let c = crate::linear::pearson(u.column(i).as_slice(), v.column(j).as_slice()).unwrap();
                    assert!(c.abs() < 1e-6);
                    assert!(cov_u[(i, j)].abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn independent_noise_has_small_correlations() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = randn(10_000, 10, &mut rng);
        let y = randn(10_000, 10, &mut rng);
        let m = fit_cca(&x, &y, 0.0).unwrap();
        assert!(m.rho.iter().all(|&r| r < 0.1));
    }

    #[test]
    fn invariant_to_invertible_transforms() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = randn(100, 4, &mut rng);
        let y = x.columns(0, 3) + randn(100, 3, &mut rng);
        let a = randn(4, 4, &mut rng) + DMatrix::identity(4, 4) * 3.0;
        let m1 = fit_cca(&x, &y, 0.0).unwrap();
        let m2 = fit_cca(&(&x * a), &y, 0.0).unwrap();
        for (p, q) in m1.rho.iter().zip(&m2.rho) {
            assert!((p - q).abs() < 1e-8);
        }
    }

    #[test]
    fn rank_deficiency_needs_shrinkage() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut x = randn(50, 3, &mut rng);
        let c0 = x.column(0).clone_owned();
        x.set_column(2, &c0);
        let y = randn(50, 2, &mut rng);
        assert!(matches!(fit_cca(&x, &y, 0.0), Err(AadError::Singular(_))));
        assert!(fit_cca(&x, &y, 1e-2).is_ok());
    }

    #[test]
    fn moments_path_matches_design_path() {
        let cfg = crate::synth::SynthConfig { trials: 1, duration: 20.0, ..Default::default() };
        let t = crate::synth::gen_trial(&cfg, 1, 3).unwrap();
        let f = t.attended.envelope.samples();
        let (el, fl) = (eeg_lags(), feature_lags());
        let m = trial_moments(&t.eeg, f, &el, &fl, &[0..t.len()]).remove(0);
        let a = fit_cca_moments(&m, 0.0, el, fl).unwrap();
        let (x, y) = trial_design(&t.eeg, f, &el, &fl);
        let b = fit_cca(&x, &y, 0.0).unwrap();
        for (p, q) in a.rho.iter().zip(&b.rho) {
            assert!((p - q).abs() < 1e-9);
        }
        // training data, matched feature: first entry reproduces rho_1
        let cv = correlation_vector(&a, &t.eeg, f).unwrap();
        assert!((cv[0] - a.rho[0]).abs() < 1e-6, "{} vs {}", cv[0], a.rho[0]);
        let unrelated = t.ignored.envelope.samples();
        let cu = correlation_vector(&a, &t.eeg, unrelated).unwrap();
        let mean_abs = |v: &[f64]| v.iter().map(|x| x.abs()).sum::<f64>() / v.len() as f64;
        assert!(mean_abs(&cu) < mean_abs(&cv));
    }

    #[test]
    fn lda_symmetry_separation_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pos: Vec<Vec<f64>> = (0..30).map(|_| vec![1.0 + 0.2 * rng.random::<f64>(), rng.random::<f64>() - 0.5]).collect();
        let neg: Vec<Vec<f64>> = pos.iter().map(|v| v.iter().map(|x| -x).collect()).collect();
        let lda = fit_lda(&pos, &neg).unwrap();
        assert!(lda.bias.abs() < 1e-12);
        assert!(pos.iter().all(|v| lda.margin(v) > 0.0));
        assert!(neg.iter().all(|v| lda.margin(v) < 0.0));
        // orthogonal perturbations leave the decision unchanged
        let ortho = [-lda.w[1], lda.w[0]];
        for v in &pos {
            let moved: Vec<f64> = v.iter().zip(&ortho).map(|(a, b)| a + 5.0 * b).collect();
            assert!((lda.margin(&moved) - lda.margin(v)).abs() < 1e-9);
        }
        assert!(matches!(fit_lda(&pos, &pos), Err(AadError::DegenerateClassifier(_))));
        assert!(fit_lda(&pos[..1], &neg).is_err());
    }

    #[test]
    fn decode_ties_and_antisymmetry() {
        let cfg = crate::synth::SynthConfig { trials: 1, duration: 20.0, ..Default::default() };
        let t = crate::synth::gen_trial(&cfg, 1, 3).unwrap();
        let (el, fl) = (eeg_lags(), feature_lags());
        let a = t.attended.envelope.samples();
        let b = t.ignored.envelope.samples();
        let m = fit_cca_moments(&trial_moments(&t.eeg, a, &el, &fl, &[0..t.len()]).remove(0), 1e-2, el, fl)
            .unwrap()
            .truncated(4);
        let lda = LdaClassifier { w: vec![1.0, 0.5, 0.25, 0.1], bias: 0.0 };
        let (d, margin) = decode_cca(&m, &lda, &t.eeg, a, a).unwrap();
        assert_eq!(d, Decision::A);
        assert_eq!(margin, 0.0);
        let (_, m1) = decode_cca(&m, &lda, &t.eeg, a, b).unwrap();
        let (_, m2) = decode_cca(&m, &lda, &t.eeg, b, a).unwrap();
        assert!((m1 + m2).abs() < 1e-12);
        let a2: Vec<f64> = a.iter().map(|v| 3.0 * v).collect();
        let b2: Vec<f64> = b.iter().map(|v| 0.5 * v).collect();
        let (d3, _) = decode_cca(&m, &lda, &t.eeg, &a2, &b2).unwrap();
        assert_eq!(d3, decode_cca(&m, &lda, &t.eeg, a, b).unwrap().0);
    }

    #[test]
    fn save_load_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = randn(60, 4, &mut rng);
        let y = randn(60, 2, &mut rng);
        let m = fit_cca(&x, &y, 1e-4).unwrap();
        let lda = LdaClassifier { w: vec![1.0, -2.0], bias: 0.5 };
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("cca_model");
        save_cca(&stem, &m, Some(&lda)).unwrap();
        let (back, l) = load_cca(&stem).unwrap();
        assert_eq!(l, Some(lda));
        for (a, b) in back.rho.iter().zip(&m.rho) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((back.wx[(3, 1)] - m.wx[(3, 1)]).abs() < 1e-5 * m.wx[(3, 1)].abs().max(1.0));
    }
}
