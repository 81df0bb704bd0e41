//! A small convolutional stimulus-reconstruction network, written out by
//! hand with exact reverse-mode gradients and an Adam optimiser.
//!
//! Each block is conv (same padding) -> ReLU -> BatchNorm -> average pool,
//! plus a skip path (1x1 conv, pooled) added to the block output. A linear
//! readout maps the last block to one scalar: the feature value at the
//! window onset.

use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{AadError, Result};
use crate::io::{read_f32, write_f32};
use crate::linear::pearson;
use crate::signal::MultiSignal;
use crate::synth::seed_for;

/// Window length in samples (1 s at 64 Hz).
pub const WINDOW: usize = 64;
pub const IN_CHANNELS: usize = 2;
pub const FEATURE_MAPS: usize = 16;
pub const POOL: usize = 2;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
/// Smallest batch the correlation loss accepts.
pub const MIN_BATCH: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CnnHyper {
    pub kernel: usize,
    pub blocks: usize,
}

/// Kernel sizes {3, 5} x block counts {1, 2, 3}.
pub fn hyper_grid() -> Vec<CnnHyper> {
    let mut g = Vec::new();
    for kernel in [3, 5] {
        for blocks in [1, 2, 3] {
            g.push(CnnHyper { kernel, blocks });
        }
    }
    g
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Shape and parameter offsets of one block; the trainable values live in
/// the model's flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub pool: usize,
    /// temporal length entering the block
    pub input_len: usize,
    /// out x in x k
    pub conv_w: Range<usize>,
    pub conv_b: Range<usize>,
    pub bn_scale: Range<usize>,
    pub bn_offset: Range<usize>,
    /// out x in
    pub skip_w: Range<usize>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl ConvBlock {
    pub fn output_len(&self) -> usize {
        self.input_len / self.pool
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CnnModel {
    pub hyper: CnnHyper,
    pub blocks: Vec<ConvBlock>,
    pub readout_w: Range<usize>,
    pub readout_b: usize,
    pub params: Vec<f64>,
    pub mode: Mode,
}

/// Per-block activations kept for the backward pass.
struct BlockCache {
    input: Vec<f64>,
    z: Vec<f64>,
    xhat: Vec<f64>,
    mean: Vec<f64>,
    var: Vec<f64>,
}

struct ForwardCache {
    blocks: Vec<BlockCache>,
    last: Vec<f64>,
}

impl CnnModel {
    /// Fresh model with uniform fan-in initialisation.
    pub fn new(hyper: CnnHyper, seed: u64) -> Result<Self> {
        if ![3, 5].contains(&hyper.kernel) || !(1..=3).contains(&hyper.blocks) {
            return Err(AadError::param(format!("hyperparameters {hyper:?} outside the grid")));
        }
        let mut next = 0;
        let mut take = |n: usize| {
            let r = next..next + n;
            next += n;
            r
        };
        let mut blocks = Vec::new();
        let (mut cin, mut len) = (IN_CHANNELS, WINDOW);
        for _ in 0..hyper.blocks {
            let f = FEATURE_MAPS;
            blocks.push(ConvBlock {
                in_channels: cin,
                out_channels: f,
                kernel: hyper.kernel,
                pool: POOL,
                input_len: len,
                conv_w: take(f * cin * hyper.kernel),
                conv_b: take(f),
                bn_scale: take(f),
                bn_offset: take(f),
                skip_w: take(f * cin),
                running_mean: vec![0.0; f],
                running_var: vec![1.0; f],
            });
            cin = f;
            len /= POOL;
        }
        let readout_w = take(cin * len);
        let readout_b = take(1).start;
        let mut params = vec![0.0; next];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |r: &Range<usize>, fan_in: usize, params: &mut [f64]| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for v in &mut params[r.clone()] {
                *v = rng.random_range(-bound..bound);
            }
        };
        for b in &blocks {
            fill(&b.conv_w, b.in_channels * b.kernel, &mut params);
            fill(&b.skip_w, b.in_channels, &mut params);
            params[b.bn_scale.clone()].iter_mut().for_each(|v| *v = 1.0);
        }
        fill(&readout_w, cin * len, &mut params);
        Ok(Self { hyper, blocks, readout_w, readout_b, params, mode: Mode::Train })
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    /// Temporal length entering the readout.
    pub fn readout_len(&self) -> usize {
        self.blocks.last().map_or(WINDOW, |b| b.output_len())
    }

    fn check_input(&self, input: &[f64]) -> Result<usize> {
        let per = IN_CHANNELS * WINDOW;
        if input.is_empty() || !input.len().is_multiple_of(per) {
            return Err(AadError::param(format!(
                "input must be a batch of {IN_CHANNELS} x {WINDOW} windows, got {} values",
                input.len()
            )));
        }
        Ok(input.len() / per)
    }

    /// Predictions for a batch laid out `batch x channel x time`. Train mode
    /// normalises with batch statistics, eval mode with running ones;
    /// running statistics are never touched here.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        let b = self.check_input(input)?;
        Ok(self.run(input, b, self.mode == Mode::Train).0)
    }

    fn run(&self, input: &[f64], batch: usize, batch_stats: bool) -> (Vec<f64>, ForwardCache) {
        let p = &self.params;
        let mut x = input.to_vec();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let (cin, f, k, l) = (blk.in_channels, blk.out_channels, blk.kernel, blk.input_len);
            let pad = k / 2;
            let w = &p[blk.conv_w.clone()];
            let bias = &p[blk.conv_b.clone()];
            let mut z = vec![0.0; batch * f * l];
            for bi in 0..batch {
                let xb = &x[bi * cin * l..(bi + 1) * cin * l];
                for fo in 0..f {
                    let zrow = &mut z[(bi * f + fo) * l..(bi * f + fo + 1) * l];
                    zrow.iter_mut().for_each(|v| *v = bias[fo]);
                    for c in 0..cin {
                        let xr = &xb[c * l..(c + 1) * l];
                        for j in 0..k {
                            let wv = w[(fo * cin + c) * k + j];
                            // z[t] += w * x[t + j - pad]
                            let off = j as isize - pad as isize;
                            let lo = (-off).max(0) as usize;
                            let hi = (l as isize - off).min(l as isize) as usize;
                            for t in lo..hi {
                                zrow[t] += wv * xr[(t as isize + off) as usize];
                            }
                        }
                    }
                }
            }
            let a: Vec<f64> = z.iter().map(|v| v.max(0.0)).collect();
            let n = (batch * l) as f64;
            let (mean, var) = if batch_stats {
                let mut mean = vec![0.0; f];
                let mut var = vec![0.0; f];
                for fo in 0..f {
                    let mut s = 0.0;
                    for bi in 0..batch {
                        s += a[(bi * f + fo) * l..(bi * f + fo + 1) * l].iter().sum::<f64>();
                    }
                    let m = s / n;
                    let mut v = 0.0;
                    for bi in 0..batch {
                        v += a[(bi * f + fo) * l..(bi * f + fo + 1) * l].iter().map(|x| (x - m) * (x - m)).sum::<f64>();
                    }
                    mean[fo] = m;
                    var[fo] = v / n;
                }
                (mean, var)
            } else {
                (blk.running_mean.clone(), blk.running_var.clone())
            };
            let gamma = &p[blk.bn_scale.clone()];
            let beta = &p[blk.bn_offset.clone()];
            let skip = &p[blk.skip_w.clone()];
            let lo = l / blk.pool;
            let mut xhat = vec![0.0; batch * f * l];
            let mut out = vec![0.0; batch * f * lo];
            let mut h = vec![0.0; l];
            for bi in 0..batch {
                let xb = &x[bi * cin * l..(bi + 1) * cin * l];
                for fo in 0..f {
                    let inv = 1.0 / (var[fo] + BN_EPS).sqrt();
                    let base = (bi * f + fo) * l;
                    for t in 0..l {
                        let xh = (a[base + t] - mean[fo]) * inv;
                        xhat[base + t] = xh;
                        h[t] = gamma[fo] * xh + beta[fo];
                    }
                    for c in 0..cin {
                        let sw = skip[fo * cin + c];
                        let xr = &xb[c * l..(c + 1) * l];
                        for t in 0..l {
                            h[t] += sw * xr[t];
                        }
                    }
                    let orow = &mut out[(bi * f + fo) * lo..(bi * f + fo + 1) * lo];
                    for (t, o) in orow.iter_mut().enumerate() {
                        *o = h[t * blk.pool..(t + 1) * blk.pool].iter().sum::<f64>() / blk.pool as f64;
                    }
                }
            }
            caches.push(BlockCache { input: x, z, xhat, mean, var });
            x = out;
        }
        let rw = &p[self.readout_w.clone()];
        let per = rw.len();
        let preds = (0..batch)
            .map(|bi| x[bi * per..(bi + 1) * per].iter().zip(rw).map(|(a, b)| a * b).sum::<f64>() + p[self.readout_b])
            .collect();
        (preds, ForwardCache { blocks: caches, last: x })
    }

    /// ReLU on/off pattern of every pre-activation in train mode.
    pub fn activation_pattern(&self, input: &[f64]) -> Result<Vec<bool>> {
        let b = self.check_input(input)?;
        let (_, cache) = self.run(input, b, true);
        Ok(cache.blocks.iter().flat_map(|c| c.z.iter().map(|&v| v > 0.0)).collect())
    }

    /// Batch loss and its exact gradient with respect to every parameter.
    pub fn gradients(&self, input: &[f64], targets: &[f64]) -> Result<(f64, Vec<f64>)> {
        if self.mode != Mode::Train {
            return Err(AadError::State("gradients need train mode".into()));
        }
        let batch = self.check_input(input)?;
        if targets.len() != batch {
            return Err(AadError::Length(format!("{batch} windows but {} targets", targets.len())));
        }
        let (preds, cache) = self.run(input, batch, true);
        let (loss, dpred) = loss_and_grad(&preds, targets)?;
        Ok((loss, self.backward(&cache, &dpred, batch)))
    }

    fn backward(&self, cache: &ForwardCache, dpred: &[f64], batch: usize) -> Vec<f64> {
        let p = &self.params;
        let mut g = vec![0.0; p.len()];
        let rw = &p[self.readout_w.clone()];
        let per = rw.len();
        let mut dx = vec![0.0; batch * per];
        for bi in 0..batch {
            let d = dpred[bi];
            g[self.readout_b] += d;
            let xr = &cache.last[bi * per..(bi + 1) * per];
            for i in 0..per {
                g[self.readout_w.start + i] += d * xr[i];
                dx[bi * per + i] = d * rw[i];
            }
        }
        for (blk, bc) in self.blocks.iter().zip(&cache.blocks).rev() {
            let (cin, f, k, l) = (blk.in_channels, blk.out_channels, blk.kernel, blk.input_len);
            let pad = k / 2;
            let lo = l / blk.pool;
            // un-pool
            let mut dh = vec![0.0; batch * f * l];
            for (i, v) in dh.iter_mut().enumerate() {
                let (row, t) = (i / l, i % l);
                *v = dx[row * lo + t / blk.pool] / blk.pool as f64;
            }
            let mut dinput = vec![0.0; batch * cin * l];
            // skip path
            for bi in 0..batch {
                for fo in 0..f {
                    let dr = &dh[(bi * f + fo) * l..(bi * f + fo + 1) * l];
                    for c in 0..cin {
                        let xr = &bc.input[(bi * cin + c) * l..(bi * cin + c + 1) * l];
                        let gi = blk.skip_w.start + fo * cin + c;
                        g[gi] += dr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>();
                        let sw = p[gi];
                        let di = &mut dinput[(bi * cin + c) * l..(bi * cin + c + 1) * l];
                        for t in 0..l {
                            di[t] += sw * dr[t];
                        }
                    }
                }
            }
            // batch norm (batch statistics) and ReLU
            let n = (batch * l) as f64;
            let mut dz = vec![0.0; batch * f * l];
            for fo in 0..f {
                let gamma = p[blk.bn_scale.start + fo];
                let (mut sum_d, mut sum_dx) = (0.0, 0.0);
                for bi in 0..batch {
                    let base = (bi * f + fo) * l;
                    for t in 0..l {
                        let d = dh[base + t];
                        g[blk.bn_offset.start + fo] += d;
                        g[blk.bn_scale.start + fo] += d * bc.xhat[base + t];
                        let dxh = d * gamma;
                        sum_d += dxh;
                        sum_dx += dxh * bc.xhat[base + t];
                    }
                }
                let inv = 1.0 / (bc.var[fo] + BN_EPS).sqrt();
                for bi in 0..batch {
                    let base = (bi * f + fo) * l;
                    for t in 0..l {
                        let dxh = dh[base + t] * gamma;
                        let da = inv / n * (n * dxh - sum_d - bc.xhat[base + t] * sum_dx);
                        dz[base + t] = if bc.z[base + t] > 0.0 { da } else { 0.0 };
                    }
                }
            }
            // convolution
            for bi in 0..batch {
                for fo in 0..f {
                    let dr = &dz[(bi * f + fo) * l..(bi * f + fo + 1) * l];
                    g[blk.conv_b.start + fo] += dr.iter().sum::<f64>();
                    for c in 0..cin {
                        let xr = &bc.input[(bi * cin + c) * l..(bi * cin + c + 1) * l];
                        for j in 0..k {
                            let off = j as isize - pad as isize;
                            let t0 = (-off).max(0) as usize;
                            let t1 = (l as isize - off).min(l as isize) as usize;
                            let wi = blk.conv_w.start + (fo * cin + c) * k + j;
                            let wv = p[wi];
                            let mut acc = 0.0;
                            let di = &mut dinput[(bi * cin + c) * l..(bi * cin + c + 1) * l];
                            for t in t0..t1 {
                                let u = (t as isize + off) as usize;
                                acc += dr[t] * xr[u];
                                di[u] += wv * dr[t];
                            }
                            g[wi] += acc;
                        }
                    }
                }
            }
            dx = dinput;
        }
        g
    }

    /// Folds a batch's statistics into the running estimates.
    fn update_running(&mut self, input: &[f64]) -> Result<()> {
        let b = self.check_input(input)?;
        let (_, cache) = self.run(input, b, true);
        for (blk, c) in self.blocks.iter_mut().zip(&cache.blocks) {
            for fo in 0..blk.out_channels {
                blk.running_mean[fo] = (1.0 - BN_MOMENTUM) * blk.running_mean[fo] + BN_MOMENTUM * c.mean[fo];
                blk.running_var[fo] = (1.0 - BN_MOMENTUM) * blk.running_var[fo] + BN_MOMENTUM * c.var[fo];
            }
        }
        Ok(())
    }
}

/// Negative Pearson correlation of a batch and its gradient.
pub fn loss(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    loss_and_grad(predictions, targets).map(|(l, _)| l)
}

fn loss_and_grad(p: &[f64], y: &[f64]) -> Result<(f64, Vec<f64>)> {
    let b = p.len();
    if b != y.len() {
        return Err(AadError::Length("predictions and targets differ in length".into()));
    }
    if b < MIN_BATCH {
        return Err(AadError::param(format!("batch of {b} is below the minimum {MIN_BATCH}")));
    }
    let n = b as f64;
    let mp = p.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, c) in p.iter().zip(y) {
        sxy += (a - mp) * (c - my);
        sxx += (a - mp) * (a - mp);
        syy += (c - my) * (c - my);
    }
    if !(syy > 0.0) {
        return Err(AadError::DegenerateCorrelation("constant targets in batch".into()));
    }
    if !(sxx > 0.0) {
        return Err(AadError::DegenerateCorrelation("constant predictions in batch".into()));
    }
    let r = sxy / (sxx * syy).sqrt();
    let grad = p
        .iter()
        .zip(y)
        .map(|(a, c)| -((c - my) / (sxx * syy).sqrt() - r * (a - mp) / sxx))
        .collect();
    Ok((-r, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n: usize, lr: f64) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], step: 0, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    /// One bias-corrected Adam update in place.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(AadError::Length("Adam state, parameters and gradients differ in shape".into()));
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
        Ok(())
    }
}

pub fn adam_step(state: &mut AdamState, params: &mut [f64], grads: &[f64]) -> Result<()> {
    state.update(params, grads)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainBudget {
    pub max_epochs: usize,
    /// evaluations without improvement before stopping
    pub patience: usize,
    pub batch_size: usize,
    /// Caps the batches drawn per epoch; `None` uses every window.
    pub max_batches_per_epoch: Option<usize>,
    /// Every `val_stride`-th validation window is scored.
    pub val_stride: usize,
    pub learning_rate: f64,
}

impl Default for TrainBudget {
    fn default() -> Self {
        Self { max_epochs: 100, patience: 5, batch_size: 256, max_batches_per_epoch: None, val_stride: 1, learning_rate: 1e-3 }
    }
}

/// EEG recordings and their aligned targets; windows are `(recording, start)`.
pub struct CnnData<'a> {
    pub eeg: Vec<&'a MultiSignal>,
    pub target: Vec<&'a [f64]>,
}

impl CnnData<'_> {
    fn fill(&self, windows: &[(usize, usize)], input: &mut Vec<f64>, targets: &mut Vec<f64>) {
        input.clear();
        targets.clear();
        for &(r, s) in windows {
            push_window(self.eeg[r], s, input);
            targets.push(self.target[r][s]);
        }
    }
}

/// Appends the `IN_CHANNELS x WINDOW` window starting at `start`,
/// zero-filled past the end of the recording.
fn push_window(eeg: &MultiSignal, start: usize, out: &mut Vec<f64>) {
    let t = eeg.len();
    for c in 0..IN_CHANNELS {
        let ch = eeg.channel(c);
        let end = (start + WINDOW).min(t);
        out.extend_from_slice(&ch[start..end]);
        out.extend(std::iter::repeat_n(0.0, start + WINDOW - end));
    }
}

/// Window starts in `range` of a recording of `len` samples whose windows
/// fit entirely inside it.
pub fn window_starts(recording: usize, range: Range<usize>, len: usize) -> Vec<(usize, usize)> {
    let last = len.saturating_sub(WINDOW);
    range.filter(|&s| s <= last && len >= WINDOW).map(|s| (recording, s)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_rho: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedCnn {
    pub model: CnnModel,
    pub best_val_rho: f64,
    pub log: Vec<LogEntry>,
}

/// Predictions for the given windows in eval mode.
pub fn predict_windows(model: &CnnModel, data: &CnnData, windows: &[(usize, usize)]) -> Result<Vec<f64>> {
    let mut eval = model.clone();
    eval.set_mode(Mode::Eval);
    let mut out = Vec::with_capacity(windows.len());
    let (mut input, mut targets) = (Vec::new(), Vec::new());
    for chunk in windows.chunks(256) {
        data.fill(chunk, &mut input, &mut targets);
        out.extend(eval.forward(&input)?);
    }
    Ok(out)
}

fn validation_rho(model: &CnnModel, data: &CnnData, val: &[(usize, usize)]) -> Result<f64> {
    let preds = predict_windows(model, data, val)?;
    let targets: Vec<f64> = val.iter().map(|&(r, s)| data.target[r][s]).collect();
    Ok(pearson(&preds, &targets).unwrap_or(0.0))
}

/// Mini-batch Adam on the training windows with early stopping on the
/// validation correlation; returns the best-validation model.
pub fn train_cnn(
    data: &CnnData,
    train: &[(usize, usize)],
    val: &[(usize, usize)],
    hyper: CnnHyper,
    budget: &TrainBudget,
    seed: u64,
) -> Result<TrainedCnn> {
    if train.len() < MIN_BATCH {
        return Err(AadError::param("not enough training windows"));
    }
    if val.is_empty() {
        return Err(AadError::param("no validation windows"));
    }
    let val: Vec<(usize, usize)> = val.iter().step_by(budget.val_stride.max(1)).copied().collect();
    let mut model = CnnModel::new(hyper, seed_for(seed, &[0]))?;
    let mut adam = AdamState::new(model.n_params(), budget.learning_rate);
    let mut best = model.clone();
    let mut best_rho = validation_rho(&model, data, &val)?;
    let mut log = vec![LogEntry { epoch: 0, train_loss: f64::NAN, val_rho: best_rho }];
    let mut order = train.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed_for(seed, &[1]));
    let mut stale = 0;
    let (mut input, mut targets) = (Vec::new(), Vec::new());
    for epoch in 1..=budget.max_epochs {
        order.shuffle(&mut rng);
        let mut batches: Vec<&[(usize, usize)]> = order.chunks(budget.batch_size.max(MIN_BATCH)).collect();
        if let Some(cap) = budget.max_batches_per_epoch {
            batches.truncate(cap);
        }
        let (mut total, mut counted) = (0.0, 0);
        for batch in batches {
            if batch.len() < MIN_BATCH {
                continue;
            }
            data.fill(batch, &mut input, &mut targets);
            // degenerate batches are skipped
            let Ok((l, g)) = model.gradients(&input, &targets) else { continue };
            model.update_running(&input)?;
            adam.update(&mut model.params, &g)?;
            total += l;
            counted += 1;
        }
        let rho = validation_rho(&model, data, &val)?;
        let train_loss = if counted > 0 { total / counted as f64 } else { f64::NAN };
        log.push(LogEntry { epoch, train_loss, val_rho: rho });
        if rho > best_rho {
            best_rho = rho;
            best = model.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= budget.patience {
                break;
            }
        }
    }
    best.set_mode(Mode::Eval);
    Ok(TrainedCnn { model: best, best_val_rho: best_rho, log })
}

/// Reconstruction at every sample of a recording (windows past the end are
/// zero-filled).
pub fn cnn_reconstruct(model: &CnnModel, eeg: &MultiSignal) -> Result<Vec<f64>> {
    if eeg.n_channels() != IN_CHANNELS {
        return Err(AadError::param(format!("CNN expects {IN_CHANNELS} channels")));
    }
    let mut eval = model.clone();
    eval.set_mode(Mode::Eval);
    let mut out = Vec::with_capacity(eeg.len());
    let mut input = Vec::new();
    let starts: Vec<usize> = (0..eeg.len()).collect();
    for chunk in starts.chunks(256) {
        input.clear();
        for &s in chunk {
            push_window(eeg, s, &mut input);
        }
        out.extend(eval.forward(&input)?);
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct Topology {
    hyper: CnnHyper,
    blocks: Vec<ConvBlock>,
    readout_w: Range<usize>,
    readout_b: usize,
}

/// Checkpoint: `<stem>.f32` holds the parameters, its sidecar the topology
/// and running statistics.
pub fn save_cnn(path_stem: &Path, model: &CnnModel) -> Result<()> {
    let topo = Topology {
        hyper: model.hyper,
        blocks: model.blocks.clone(),
        readout_w: model.readout_w.clone(),
        readout_b: model.readout_b,
    };
    let mut extra = Map::new();
    extra.insert("topology".into(), serde_json::to_value(&topo)?);
    write_f32(&path_stem.with_extension("f32"), &["params".into()], &[&model.params], 0.0, extra)
}

pub fn load_cnn(path_stem: &Path) -> Result<CnnModel> {
    let path = path_stem.with_extension("f32");
    let (side, mut data) = read_f32(&path)?;
    let topo: Topology = serde_json::from_value(side.extra.get("topology").cloned().unwrap_or(Value::Null))
        .map_err(|e| AadError::ingestion(&path, e))?;
    let params = data.remove(0);
    if params.len() != topo.readout_b + 1 {
        return Err(AadError::ingestion(&path, "parameter count does not match the topology"));
    }
    Ok(CnnModel {
        hyper: topo.hyper,
        blocks: topo.blocks,
        readout_w: topo.readout_w,
        readout_b: topo.readout_b,
        params,
        mode: Mode::Eval,
    })
}

pub fn write_training_log(path: &Path, log: &[LogEntry]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for e in log {
        w.serialize(e)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn batch(b: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..b * IN_CHANNELS * WINDOW).map(|_| StandardNormal.sample(&mut rng)).collect();
        let y: Vec<f64> = (0..b).map(|_| StandardNormal.sample(&mut rng)).collect();
        (x, y)
    }

    #[test]
    fn grid_and_shapes() {
        assert_eq!(hyper_grid().len(), 6);
        for h in hyper_grid() {
            let m = CnnModel::new(h, 1).unwrap();
            assert_eq!(m.readout_len(), WINDOW >> h.blocks);
            let lens: Vec<usize> = m.blocks.iter().map(|b| b.output_len()).collect();
            assert_eq!(lens, [32, 16, 8][..h.blocks].to_vec());
        }
        assert!(CnnModel::new(CnnHyper { kernel: 4, blocks: 1 }, 0).is_err());
        assert!(CnnModel::new(CnnHyper { kernel: 3, blocks: 4 }, 0).is_err());
        let m = CnnModel::new(CnnHyper { kernel: 3, blocks: 1 }, 0).unwrap();
        assert!(m.forward(&[0.0; 100]).is_err());
    }

    #[test]
    fn dead_network_outputs_readout_bias() {
        let mut m = CnnModel::new(CnnHyper { kernel: 5, blocks: 2 }, 3).unwrap();
        m.params.iter_mut().for_each(|v| *v = 0.0);
        m.params[m.readout_b] = 0.75;
        let (x, _) = batch(4, 1);
        for mode in [Mode::Train, Mode::Eval] {
            m.set_mode(mode);
            assert!(m.forward(&x).unwrap().iter().all(|&v| v == 0.75));
        }
    }

    #[test]
    fn eval_forward_is_deterministic_and_stateless() {
        let mut m = CnnModel::new(CnnHyper { kernel: 3, blocks: 3 }, 2).unwrap();
        m.set_mode(Mode::Eval);
        let (x, _) = batch(5, 2);
        let before = m.clone();
        assert_eq!(m.forward(&x).unwrap(), m.forward(&x).unwrap());
        assert_eq!(m, before);
        m.set_mode(Mode::Train);
        m.update_running(&x).unwrap();
        assert_ne!(m.blocks[0].running_mean, before.blocks[0].running_mean);
    }

    #[test]
    fn batchnorm_normalises_in_train_mode() {
        let m = CnnModel::new(CnnHyper { kernel: 5, blocks: 1 }, 4).unwrap();
        let (x, _) = batch(16, 3);
        let (_, cache) = m.run(&x, 16, true);
        let c = &cache.blocks[0];
        let l = WINDOW;
        for fo in 0..FEATURE_MAPS {
            let vals: Vec<f64> = (0..16).flat_map(|b| c.xhat[(b * FEATURE_MAPS + fo) * l..(b * FEATURE_MAPS + fo + 1) * l].to_vec()).collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-6);
            // unit variance up to the eps in the denominator
            let corrected = var * (c.var[fo] + BN_EPS) / c.var[fo];
            assert!((corrected - 1.0).abs() < 1e-9, "var {var}");
            assert!((var - 1.0).abs() < 2.0 * BN_EPS / c.var[fo]);
        }
    }

    #[test]
    fn loss_fixtures() {
        let (_, y) = batch(64, 5);
        assert!((loss(&y, &y).unwrap() + 1.0).abs() < 1e-12);
        let neg: Vec<f64> = y.iter().map(|v| -v).collect();
        assert!((loss(&neg, &y).unwrap() - 1.0).abs() < 1e-12);
        let (_, z) = batch(64, 6);
        assert!(loss(&z, &y).unwrap().abs() < 3.0 / 8.0);
        assert!(matches!(loss(&y, &[1.0; 64]), Err(AadError::DegenerateCorrelation(_))));
        assert!(loss(&y[..4], &y[..4]).is_err());
    }

    #[test]
    fn gradients_need_train_mode_and_descend() {
        let mut m = CnnModel::new(CnnHyper { kernel: 3, blocks: 2 }, 8).unwrap();
        let (x, y) = batch(16, 7);
        let (l0, g) = m.gradients(&x, &y).unwrap();
        let mut stepped = m.clone();
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (p, gv) in stepped.params.iter_mut().zip(&g) {
            *p -= 1e-3 / norm * gv;
        }
        let (l1, _) = stepped.gradients(&x, &y).unwrap();
        assert!(l1 < l0);
        m.set_mode(Mode::Eval);
        assert!(matches!(m.gradients(&x, &y), Err(AadError::State(_))));
    }

    #[test]
    fn dead_relu_paths_have_zero_conv_gradient() {
        let mut m = CnnModel::new(CnnHyper { kernel: 3, blocks: 1 }, 9).unwrap();
        let b = &m.blocks[0];
        let (w, bias) = (b.conv_w.clone(), b.conv_b.clone());
        m.params[w].iter_mut().for_each(|v| *v = 0.0);
        m.params[bias].iter_mut().for_each(|v| *v = -1.0);
        let (x, y) = batch(8, 1);
        let (_, g) = m.gradients(&x, &y).unwrap();
        let b = &m.blocks[0];
        assert!(g[b.conv_w.clone()].iter().all(|&v| v == 0.0));
        assert!(g[b.conv_b.clone()].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let m = CnnModel::new(CnnHyper { kernel: 3, blocks: 2 }, 5).unwrap();
        let (x, y) = batch(8, 11);
        let (_, g) = m.gradients(&x, &y).unwrap();
        let mut worst: f64 = 0.0;
        for i in (0..m.n_params()).step_by(7) {
            let mut h = 1e-5;
            let num = loop {
                let mut a = m.clone();
                let mut b = m.clone();
                a.params[i] += h;
                b.params[i] -= h;
                if a.activation_pattern(&x).unwrap() == b.activation_pattern(&x).unwrap() || h < 1e-9 {
                    let la = loss(&a.forward(&x).unwrap(), &y).unwrap();
                    let lb = loss(&b.forward(&x).unwrap(), &y).unwrap();
                    break (la - lb) / (2.0 * h);
                }
                h /= 10.0;
            };
            let rel = (g[i] - num).abs() / g[i].abs().max(num.abs()).max(1e-6);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn adam_first_step_and_zero_gradient() {
        let mut s = AdamState::new(3, 1e-3);
        let mut p = vec![1.0, -2.0, 0.5];
        adam_step(&mut s, &mut p, &[0.0; 3]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
        let mut s = AdamState::new(3, 1e-3);
        let g = [0.3, -2.0, 7.0];
        let before = p.clone();
        adam_step(&mut s, &mut p, &g).unwrap();
        for i in 0..3 {
            let step = before[i] - p[i];
            assert!(((step.abs() - 1e-3) / 1e-3).abs() < 1e-6);
            assert_eq!(step.signum(), g[i].signum());
        }
        assert!(adam_step(&mut s, &mut p, &[1.0]).is_err());
    }

    #[test]
    fn learns_a_linear_mapping() {
        // target at window onset is a fixed linear readout of the EEG window
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let n = 64 * 120;
        let feat = crate::synth::gen_feature(n as f64 / 64.0, 64.0, 3).unwrap();
        let f = feat.samples();
        let chans: Vec<Vec<f64>> = (0..2)
            .map(|c| {
                (0..n)
                    .map(|t| {
                        let drive = if t >= 8 { f[t - 8] } else { 0.0 };
                        (if c == 0 { 1.0 } else { 0.6 }) * drive + 0.7 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
                    })
                    .collect()
            })
            .collect();
        let eeg = MultiSignal::new(vec!["a".into(), "b".into()], chans, 64.0).unwrap();
        let data = CnnData { eeg: vec![&eeg], target: vec![f] };
        let split = n * 3 / 4;
        let train = window_starts(0, 0..split - WINDOW, n);
        let val = window_starts(0, split..n, n);
        let budget = TrainBudget { max_epochs: 12, max_batches_per_epoch: Some(12), ..Default::default() };
        let out = train_cnn(&data, &train, &val, CnnHyper { kernel: 5, blocks: 2 }, &budget, 1).unwrap();
        assert!(out.best_val_rho >= out.log[0].val_rho);
        assert!(out.best_val_rho > 0.5, "val rho {}", out.best_val_rho);
        let rec = cnn_reconstruct(&out.model, &eeg).unwrap();
        assert_eq!(rec.len(), n);
    }

    #[test]
    fn checkpoint_round_trip_and_log() {
        let m = CnnModel::new(CnnHyper { kernel: 5, blocks: 3 }, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("cnn");
        save_cnn(&stem, &m).unwrap();
        let back = load_cnn(&stem).unwrap();
        assert_eq!(back.blocks, m.blocks);
        for (a, b) in back.params.iter().zip(&m.params) {
            assert_eq!(*a as f32, *b as f32);
        }
        write_training_log(&dir.path().join("log.csv"), &[LogEntry { epoch: 0, train_loss: 0.5, val_rho: 0.1 }]).unwrap();
        let text = std::fs::read_to_string(dir.path().join("log.csv")).unwrap();
        assert!(text.starts_with("epoch,train_loss,val_rho"));
    }
}
