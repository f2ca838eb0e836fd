//! Two-phase training, loss baselines, gradient monitoring, and the
//! segmentation-head trainer.
//!
//! Phase 1 trains encoder + FC1 with BCE. Phase 2 re-initializes FC2
//! and jointly optimizes encoder, FC1 and FC2 on `L_bce + lambda *
//! L_sce`, where the SCE term is computed per positive class on
//! class-masked features (the soft mask is the class activation map of
//! the current FC1, differentiable end to end unless `detach_mask` is
//! set). Batch composition is a pure function of `(seed, epoch)`;
//! per-sample gradients are computed in parallel and reduced in index
//! order, so training is bit-deterministic.

use crate::autodiff::{Elem, Tape, Var};
use crate::error::{RecamError, Result};
use crate::nets::{
    self, tape_segment, ArchConfig, ClassifierState, SegArchConfig, SegmenterState,
};
use crate::rngstream::{stream, Domain};
use crate::synthgen::ImageSample;
use ndarray::{Array1, Array2, Array3, ArrayD, ArrayViewMutD};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// How the SCE term of phase 2 is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceMode {
    /// Per positive class on masked features through FC2.
    Recam,
    /// Vanilla SCE on FC1 logits with labels normalized to sum 1.
    VanillaOnFc1,
    /// SCE on FC1 logits for single-label samples only.
    SingleOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineLoss {
    BceOnly,
    SceOnly,
    SceSingleOnly,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub phase1_epochs: usize,
    pub phase2_epochs: usize,
    pub lr_phase1: f64,
    pub lr_phase2: f64,
    pub batch_size: usize,
    pub lambda: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub sce_mode: SceMode,
    /// Stop gradients through the soft mask (ablation).
    pub detach_mask: bool,
    /// Random horizontal flip augmentation.
    pub augment: bool,
    /// Record mean logit gradients every N steps on a single-label probe.
    pub monitor_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            phase1_epochs: 16,
            phase2_epochs: 4,
            lr_phase1: 2e-3,
            lr_phase2: 5e-4,
            batch_size: 16,
            lambda: 1.0,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            sce_mode: SceMode::Recam,
            detach_mask: false,
            augment: false,
            monitor_every: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(RecamError::Config("batch_size must be positive".into()));
        }
        if self.lr_phase1 <= 0.0 || self.lr_phase2 <= 0.0 {
            return Err(RecamError::Config("learning rates must be positive".into()));
        }
        if self.lambda < 0.0 {
            return Err(RecamError::Config("lambda must be >= 0".into()));
        }
        if self.sce_mode == SceMode::Recam && self.phase2_epochs == 0 {
            return Err(RecamError::Config("sce_mode=recam requires phase2_epochs >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub step: usize,
    pub l_bce: f64,
    pub l_sce: f64,
    pub l_total: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GradientRecord {
    pub step: usize,
    /// dL/dz_p for the (single) positive class.
    pub grad_positive: f64,
    /// dL/dz_q for the highest-logit negative class.
    pub grad_negative: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradientTrace {
    pub rows: Vec<GradientRecord>,
}

impl GradientTrace {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,grad_positive,grad_negative\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{}\n", r.step, r.grad_positive, r.grad_negative));
        }
        s
    }
}

pub struct TrainOutput<T: Elem> {
    pub state: ClassifierState<T>,
    pub log: Vec<TrainLogRow>,
    pub trace: Option<GradientTrace>,
}

pub fn train_log_csv(log: &[TrainLogRow]) -> String {
    let mut s = String::from("step,l_bce,l_sce,l_total,lr\n");
    for r in log {
        s.push_str(&format!("{},{},{},{},{}\n", r.step, r.l_bce, r.l_sce, r.l_total, r.lr));
    }
    s
}

// ---------------------------------------------------------------------------
// Optimizers
// ---------------------------------------------------------------------------

struct Optimizer<T: Elem> {
    kind: OptimizerKind,
    m: Vec<ArrayD<T>>,
    v: Vec<ArrayD<T>>,
    t: usize,
}

impl<T: Elem> Optimizer<T> {
    fn new(kind: OptimizerKind) -> Self {
        Optimizer { kind, m: Vec::new(), v: Vec::new(), t: 0 }
    }

    fn step(&mut self, params: Vec<ArrayViewMutD<'_, T>>, grads: &[ArrayD<T>], lr: f64) {
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| ArrayD::zeros(g.raw_dim())).collect();
            self.v = grads.iter().map(|g| ArrayD::zeros(g.raw_dim())).collect();
        }
        match self.kind {
            OptimizerKind::Sgd => {
                let lr = T::from_f64(lr);
                for (mut p, g) in params.into_iter().zip(grads.iter()) {
                    p.zip_mut_with(g, |pv, &gv| *pv = *pv - lr * gv);
                }
            }
            OptimizerKind::Adam => {
                self.t += 1;
                let b1 = T::from_f64(0.9);
                let b2 = T::from_f64(0.999);
                let eps = T::from_f64(1e-8);
                let one = T::one();
                let bc1 = T::from_f64(1.0 - 0.9f64.powi(self.t as i32));
                let bc2 = T::from_f64(1.0 - 0.999f64.powi(self.t as i32));
                let lr = T::from_f64(lr);
                for (((mut p, g), m), v) in
                    params.into_iter().zip(grads.iter()).zip(self.m.iter_mut()).zip(self.v.iter_mut())
                {
                    m.zip_mut_with(g, |mv, &gv| *mv = b1 * *mv + (one - b1) * gv);
                    v.zip_mut_with(g, |vv, &gv| *vv = b2 * *vv + (one - b2) * gv * gv);
                    ndarray::Zip::from(&mut p).and(&*m).and(&*v).for_each(|pv, &mv, &vv| {
                        let mhat = mv / bc1;
                        let vhat = vv / bc2;
                        *pv = *pv - lr * mhat / (vhat.sqrt() + eps);
                    });
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Per-sample losses on tape
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
enum LossMode {
    Bce,
    /// SCE with labels normalized to sum to 1 (on FC1 logits).
    SceNormalized,
    /// BCE for multi-label samples, vanilla SCE for single-label ones.
    SceSingleElseBce,
    /// Phase-2 objective with the given sce path.
    Combined { lambda: f64, sce: SceMode, detach_mask: bool },
}

fn pixels_as<T: Elem>(s: &ImageSample, flip: bool) -> Array3<T> {
    let (c, h, w) = s.pixels.dim();
    Array3::from_shape_fn((c, h, w), |(ci, i, j)| {
        let jj = if flip { w - 1 - j } else { j };
        T::from_f64(s.pixels[(ci, i, jj)] as f64)
    })
}

fn label_as<T: Elem>(label: &[u8]) -> Array1<T> {
    label.iter().map(|&v| T::from_f64(v as f64)).collect()
}

fn one_hot<T: Elem>(k: usize, n: usize) -> Array1<T> {
    let mut v = Array1::zeros(n);
    v[k] = T::one();
    v
}

struct SampleGrads<T: Elem> {
    grads: Vec<Option<ArrayD<T>>>,
    l_bce: f64,
    l_sce: f64,
}

/// Build the per-sample loss on tape and return parameter gradients in
/// `ClassifierState::params` order.
fn sample_grads<T: Elem>(
    state: &ClassifierState<T>,
    sample: &ImageSample,
    mode: LossMode,
    flip: bool,
) -> Result<SampleGrads<T>> {
    let mut tape = Tape::<T>::new();
    let x = tape.constant(pixels_as::<T>(sample, flip).into_dyn());
    let params = nets::tape_params(&mut tape, state, true);
    let f = nets::tape_encode(&mut tape, x, &params, &state.arch);
    let z = nets::tape_head(&mut tape, f, params.fc1, params.fc1_bias);
    let y = label_as::<T>(&sample.label);
    let k_total = sample.label.len();
    let positives = sample.positives();

    let (loss, l_bce, l_sce) = match mode {
        LossMode::Bce => {
            let l = tape.bce_with_logits(z, y);
            (l, tape.scalar(l).to_f64(), 0.0)
        }
        LossMode::SceNormalized => {
            let total: f64 = positives.len() as f64;
            let target: Array1<T> =
                y.iter().map(|&v| T::from_f64(v.to_f64() / total)).collect();
            let l = tape.sce_soft_target(z, target);
            (l, 0.0, tape.scalar(l).to_f64())
        }
        LossMode::SceSingleElseBce => {
            if positives.len() == 1 {
                let l = tape.sce_soft_target(z, one_hot(positives[0], k_total));
                (l, 0.0, tape.scalar(l).to_f64())
            } else {
                let l = tape.bce_with_logits(z, y);
                (l, tape.scalar(l).to_f64(), 0.0)
            }
        }
        LossMode::Combined { lambda, sce, detach_mask } => {
            let l_bce = tape.bce_with_logits(z, y.clone());
            let sce_term: Option<Var> = match sce {
                SceMode::Recam => {
                    let mut acc: Option<Var> = None;
                    for &k in &positives {
                        let a = tape.cam_project(f, params.fc1, k);
                        let m = if detach_mask {
                            let val = {
                                let raw = tape
                                    .value(a)
                                    .view()
                                    .into_dimensionality::<ndarray::Ix2>()
                                    .expect("map 2-d");
                                crate::autodiff::max_normalize(raw)
                            };
                            tape.constant(val.into_dyn())
                        } else {
                            tape.max_normalize(a)
                        };
                        let fk = tape.mask_mul(f, m);
                        let zk = nets::tape_head(&mut tape, fk, params.fc2, params.fc2_bias);
                        let lk = tape.sce_soft_target(zk, one_hot(k, k_total));
                        acc = Some(match acc {
                            None => lk,
                            Some(prev) => tape.add(prev, lk),
                        });
                    }
                    let inv = T::from_f64(1.0 / positives.len() as f64);
                    acc.map(|a| tape.scale(a, inv))
                }
                SceMode::VanillaOnFc1 => {
                    let total: f64 = positives.len() as f64;
                    let target: Array1<T> =
                        y.iter().map(|&v| T::from_f64(v.to_f64() / total)).collect();
                    Some(tape.sce_soft_target(z, target))
                }
                SceMode::SingleOnly => {
                    if positives.len() == 1 {
                        Some(tape.sce_soft_target(z, one_hot(positives[0], k_total)))
                    } else {
                        None
                    }
                }
            };
            match sce_term {
                Some(ls) => {
                    let scaled = tape.scale(ls, T::from_f64(lambda));
                    let total = tape.add(l_bce, scaled);
                    (total, tape.scalar(l_bce).to_f64(), tape.scalar(ls).to_f64())
                }
                None => (l_bce, tape.scalar(l_bce).to_f64(), 0.0),
            }
        }
    };

    let loss_val = tape.scalar(loss).to_f64();
    if !loss_val.is_finite() {
        return Err(RecamError::Divergence { step: 0, reason: "non-finite loss".into() });
    }
    let mut grads_out = tape.backward(loss);
    let grads = params.ordered().iter().map(|&v| grads_out.take(v)).collect();
    Ok(SampleGrads { grads, l_bce, l_sce })
}

fn shuffled(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = stream(seed, Domain::BatchOrder, epoch);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

fn flip_coin(seed: u64, epoch: u64, sample: usize) -> bool {
    let mut rng = stream(seed, Domain::Augmentation, epoch * (1 << 24) + sample as u64);
    rng.random::<f64>() < 0.5
}

/// The shared minibatch loop. `epoch_offset` keeps phase-2 batch order
/// on the epoch indices that would have followed phase 1.
fn run_training<T: Elem>(
    mut state: ClassifierState<T>,
    corpus: &[ImageSample],
    cfg: &TrainConfig,
    epochs: usize,
    epoch_offset: usize,
    lr0: f64,
    mode: LossMode,
) -> Result<TrainOutput<T>> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(RecamError::Contract("corpus is empty".into()));
    }
    if corpus.iter().any(|s| s.positives().is_empty()) {
        return Err(RecamError::Contract("every sample needs at least one positive class".into()));
    }

    let monitor_set: Vec<&ImageSample> =
        corpus.iter().filter(|s| s.is_single_label()).take(32).collect();
    let monitor_loss = match mode {
        LossMode::SceNormalized => MonitorLoss::Sce,
        _ => MonitorLoss::Bce,
    };

    let steps_per_epoch = corpus.len().div_ceil(cfg.batch_size);
    let total_steps = (steps_per_epoch * epochs).max(1);
    let mut opt = Optimizer::<T>::new(cfg.optimizer);
    let mut log = Vec::with_capacity(total_steps);
    let mut trace = GradientTrace::default();
    let mut step = 0usize;

    for epoch in 0..epochs {
        let order = shuffled(corpus.len(), cfg.seed, (epoch_offset + epoch) as u64);
        for batch in order.chunks(cfg.batch_size) {
            let lr = lr0 * (1.0 - step as f64 / total_steps as f64).max(0.0);
            let results: Vec<SampleGrads<T>> = batch
                .par_iter()
                .map(|&i| {
                    let flip = cfg.augment
                        && flip_coin(cfg.seed, (epoch_offset + epoch) as u64, i);
                    sample_grads(&state, &corpus[i], mode, flip)
                })
                .collect::<Result<Vec<_>>>()
                .map_err(|e| match e {
                    RecamError::Divergence { reason, .. } => {
                        RecamError::Divergence { step, reason }
                    }
                    other => other,
                })?;

            // Reduce in index order for determinism.
            let inv = T::from_f64(1.0 / batch.len() as f64);
            let shapes: Vec<_> = state.params().iter().map(|p| p.raw_dim()).collect();
            let mut mean: Vec<ArrayD<T>> =
                shapes.into_iter().map(ArrayD::zeros).collect();
            let mut l_bce = 0.0;
            let mut l_sce = 0.0;
            for r in &results {
                l_bce += r.l_bce;
                l_sce += r.l_sce;
                for (acc, g) in mean.iter_mut().zip(r.grads.iter()) {
                    if let Some(g) = g {
                        acc.zip_mut_with(g, |a, &b| *a = *a + b * inv);
                    }
                }
            }
            l_bce /= results.len() as f64;
            l_sce /= results.len() as f64;
            let lambda = match mode {
                LossMode::Combined { lambda, .. } => lambda,
                LossMode::SceNormalized | LossMode::SceSingleElseBce => 1.0,
                LossMode::Bce => 0.0,
            };
            let l_total = l_bce + lambda * l_sce * if matches!(mode, LossMode::Combined { .. }) { 1.0 } else { 0.0 }
                + if matches!(mode, LossMode::SceNormalized | LossMode::SceSingleElseBce) { l_sce } else { 0.0 };
            if !l_total.is_finite() {
                return Err(RecamError::Divergence { step, reason: "non-finite loss".into() });
            }

            opt.step(state.params_mut(), &mean, lr);
            if state.params().iter().any(|p| p.iter().any(|v| !v.is_finite())) {
                return Err(RecamError::Divergence { step, reason: "non-finite parameter".into() });
            }
            log.push(TrainLogRow { step, l_bce, l_sce, l_total, lr });

            if let Some(every) = cfg.monitor_every {
                if every > 0 && step % every == 0 && !monitor_set.is_empty() {
                    let (gp, gq) = monitor_mean(&state, &monitor_set, monitor_loss)?;
                    trace.rows.push(GradientRecord {
                        step,
                        grad_positive: gp,
                        grad_negative: gq,
                    });
                }
            }
            step += 1;
        }
    }
    let trace = if cfg.monitor_every.is_some() { Some(trace) } else { None };
    Ok(TrainOutput { state, log, trace })
}

/// Phase 1: BCE training of encoder + FC1 from random init.
pub fn train_phase1<T: Elem>(
    corpus: &[ImageSample],
    arch: &ArchConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutput<T>> {
    let state = ClassifierState::<T>::init(arch.clone(), cfg.lambda, cfg.seed)?;
    run_training(state, corpus, cfg, cfg.phase1_epochs, 0, cfg.lr_phase1, LossMode::Bce)
}

/// Phase 2: re-initialize FC2, then jointly optimize encoder, FC1, FC2
/// on the combined objective.
pub fn train_phase2<T: Elem>(
    mut state: ClassifierState<T>,
    corpus: &[ImageSample],
    cfg: &TrainConfig,
) -> Result<TrainOutput<T>> {
    state.reinit_fc2(cfg.seed);
    state.lambda = cfg.lambda;
    run_training(
        state,
        corpus,
        cfg,
        cfg.phase2_epochs,
        cfg.phase1_epochs,
        cfg.lr_phase2,
        LossMode::Combined { lambda: cfg.lambda, sce: cfg.sce_mode, detach_mask: cfg.detach_mask },
    )
}

/// Continue plain BCE training from an existing state on the batch
/// schedule that follows phase 1 (used by loss-path isolation checks).
pub fn continue_bce_training<T: Elem>(
    state: ClassifierState<T>,
    corpus: &[ImageSample],
    cfg: &TrainConfig,
) -> Result<TrainOutput<T>> {
    run_training(
        state,
        corpus,
        cfg,
        cfg.phase2_epochs,
        cfg.phase1_epochs,
        cfg.lr_phase2,
        LossMode::Bce,
    )
}

/// Single-loss baselines (no FC2 involvement).
pub fn train_baseline<T: Elem>(
    corpus: &[ImageSample],
    arch: &ArchConfig,
    loss: BaselineLoss,
    cfg: &TrainConfig,
) -> Result<TrainOutput<T>> {
    let mode = match loss {
        BaselineLoss::BceOnly => LossMode::Bce,
        BaselineLoss::SceOnly => LossMode::SceNormalized,
        BaselineLoss::SceSingleOnly => LossMode::SceSingleElseBce,
    };
    let state = ClassifierState::<T>::init(arch.clone(), cfg.lambda, cfg.seed)?;
    run_training(state, corpus, cfg, cfg.phase1_epochs, 0, cfg.lr_phase1, mode)
}

// ---------------------------------------------------------------------------
// Gradient monitoring
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MonitorLoss {
    Bce,
    Sce,
}

/// Gradients of the monitored loss with respect to the FC1 logits of a
/// single-label sample: `(dL/dz_p, dL/dz_q)` with `q` the highest-logit
/// negative class.
pub fn monitor_on_logits<T: Elem>(
    z: &Array1<T>,
    positive: usize,
    loss: MonitorLoss,
) -> Result<(f64, f64)> {
    let k = z.len();
    if positive >= k {
        return Err(RecamError::Contract("positive class out of range".into()));
    }
    let mut tape = Tape::<T>::new();
    let zv = tape.leaf(z.clone().into_dyn(), true);
    let l = match loss {
        MonitorLoss::Bce => {
            let y = one_hot::<T>(positive, k);
            tape.bce_with_logits(zv, y)
        }
        MonitorLoss::Sce => tape.sce_soft_target(zv, one_hot::<T>(positive, k)),
    };
    let grads = tape.backward(l);
    let g = grads.get(zv).expect("logit gradient");
    let q = (0..k)
        .filter(|&j| j != positive)
        .max_by(|&a, &b| z[a].partial_cmp(&z[b]).expect("finite logits"))
        .ok_or_else(|| RecamError::Contract("need at least 2 classes".into()))?;
    Ok((g[positive].to_f64(), g[q].to_f64()))
}

fn monitor_mean<T: Elem>(
    state: &ClassifierState<T>,
    samples: &[&ImageSample],
    loss: MonitorLoss,
) -> Result<(f64, f64)> {
    let per: Vec<(f64, f64)> = samples
        .par_iter()
        .map(|s| {
            let f = nets::encode(pixels_as::<T>(s, false).view(), state)?;
            let z = nets::classify_fc1(&f, state)?;
            monitor_on_logits(&z, s.positives()[0], loss)
        })
        .collect::<Result<Vec<_>>>()?;
    let n = per.len() as f64;
    Ok((per.iter().map(|p| p.0).sum::<f64>() / n, per.iter().map(|p| p.1).sum::<f64>() / n))
}

/// Per-sample gradient records over a single-label subset at a frozen
/// state. Errors on any multi-label sample.
pub fn monitor_gradients<T: Elem>(
    state: &ClassifierState<T>,
    samples: &[ImageSample],
    loss: MonitorLoss,
) -> Result<GradientTrace> {
    if let Some(s) = samples.iter().find(|s| !s.is_single_label()) {
        return Err(RecamError::Contract(format!(
            "monitor_gradients requires single-label samples, {} is not",
            s.id
        )));
    }
    let rows = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let f = nets::encode(pixels_as::<T>(s, false).view(), state)?;
            let z = nets::classify_fc1(&f, state)?;
            let (gp, gq) = monitor_on_logits(&z, s.positives()[0], loss)?;
            Ok(GradientRecord { step: i, grad_positive: gp, grad_negative: gq })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GradientTrace { rows })
}

// ---------------------------------------------------------------------------
// Segmentation-head training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for SegTrainConfig {
    fn default() -> Self {
        SegTrainConfig {
            epochs: 6,
            lr: 2e-3,
            batch_size: 16,
            optimizer: OptimizerKind::Adam,
            seed: 0,
        }
    }
}

/// Train the segmentation head on per-pixel pseudo labels (one mask per
/// corpus image, 255 = ignore).
pub fn train_segmenter<T: Elem>(
    masks: &[Array2<u8>],
    corpus: &[ImageSample],
    arch: &SegArchConfig,
    cfg: &SegTrainConfig,
) -> Result<(SegmenterState<T>, Vec<TrainLogRow>)> {
    if corpus.is_empty() {
        return Err(RecamError::Contract("corpus is empty".into()));
    }
    if masks.len() != corpus.len() {
        return Err(RecamError::Contract(format!(
            "need one pseudo mask per image: {} masks vs {} images",
            masks.len(),
            corpus.len()
        )));
    }
    for (m, s) in masks.iter().zip(corpus.iter()) {
        if m.dim() != s.gt_mask.dim() {
            return Err(RecamError::Contract(format!("mask shape mismatch on {}", s.id)));
        }
        if m.iter().all(|&v| v == 255) {
            return Err(RecamError::Contract(format!("mask for {} is fully ignored", s.id)));
        }
    }

    let mut state = SegmenterState::<T>::init(arch.clone(), cfg.seed)?;
    let steps_per_epoch = corpus.len().div_ceil(cfg.batch_size);
    let total_steps = (steps_per_epoch * cfg.epochs).max(1);
    let mut opt = Optimizer::<T>::new(cfg.optimizer);
    let mut log = Vec::new();
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let order = shuffled(corpus.len(), cfg.seed, epoch as u64);
        for batch in order.chunks(cfg.batch_size) {
            let lr = cfg.lr * (1.0 - step as f64 / total_steps as f64).max(0.0);
            let results: Vec<(Vec<Option<ArrayD<T>>>, f64)> = batch
                .par_iter()
                .map(|&i| {
                    let mut tape = Tape::<T>::new();
                    let x = tape.constant(pixels_as::<T>(&corpus[i], false).into_dyn());
                    let (pvars, logits) = tape_segment(&mut tape, x, &state);
                    let l = tape.seg_cross_entropy(logits, masks[i].clone());
                    let lv = tape.scalar(l).to_f64();
                    if !lv.is_finite() {
                        return Err(RecamError::Divergence {
                            step: 0,
                            reason: "non-finite loss".into(),
                        });
                    }
                    let mut g = tape.backward(l);
                    Ok((pvars.iter().map(|&v| g.take(v)).collect(), lv))
                })
                .collect::<Result<Vec<_>>>()
                .map_err(|e| match e {
                    RecamError::Divergence { reason, .. } => {
                        RecamError::Divergence { step, reason }
                    }
                    other => other,
                })?;

            let inv = T::from_f64(1.0 / batch.len() as f64);
            let shapes: Vec<_> =
                state.convs.iter().flat_map(|l| [l.weight.view().into_dyn().raw_dim(), l.bias.view().into_dyn().raw_dim()]).collect();
            let mut mean: Vec<ArrayD<T>> = shapes.into_iter().map(ArrayD::zeros).collect();
            let mut loss = 0.0;
            for (grads, lv) in &results {
                loss += lv;
                for (acc, g) in mean.iter_mut().zip(grads.iter()) {
                    if let Some(g) = g {
                        acc.zip_mut_with(g, |a, &b| *a = *a + b * inv);
                    }
                }
            }
            loss /= results.len() as f64;
            opt.step(state.params_mut(), &mean, lr);
            log.push(TrainLogRow { step, l_bce: 0.0, l_sce: 0.0, l_total: loss, lr });
            step += 1;
        }
    }
    Ok((state, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses;
    use crate::synthgen::{generate_dataset, DatasetSpec};

    fn toy_spec(seed: u64, fraction: f64) -> DatasetSpec {
        DatasetSpec {
            num_classes: 4,
            confusable_groups: vec![vec![0, 1]],
            image_size: (32, 32),
            single_label_fraction: fraction,
            max_objects_per_image: 2,
            background_styles: 2,
            seed,
        }
    }

    fn quick_cfg(seed: u64) -> TrainConfig {
        TrainConfig {
            phase1_epochs: 2,
            phase2_epochs: 1,
            lr_phase1: 2e-3,
            lr_phase2: 1e-3,
            batch_size: 4,
            seed,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn overfits_one_sample() {
        let corpus = generate_dataset(&toy_spec(5, 1.0), 1).unwrap();
        let mut cfg = quick_cfg(1);
        cfg.phase1_epochs = 200;
        cfg.batch_size = 1;
        cfg.lr_phase1 = 5e-3;
        let out = train_phase1::<f32>(&corpus, &ArchConfig::tiny(4), &cfg).unwrap();
        let last = out.log.last().unwrap();
        assert!(last.l_bce < 0.05, "final loss {}", last.l_bce);
    }

    #[test]
    fn training_is_deterministic_and_lambda_free_in_phase1() {
        let corpus = generate_dataset(&toy_spec(6, 0.5), 12).unwrap();
        let arch = ArchConfig::tiny(4);
        let a = train_phase1::<f32>(&corpus, &arch, &quick_cfg(2)).unwrap();
        let b = train_phase1::<f32>(&corpus, &arch, &quick_cfg(2)).unwrap();
        let mut cfg_lambda = quick_cfg(2);
        cfg_lambda.lambda = 7.5;
        let c = train_phase1::<f32>(&corpus, &arch, &cfg_lambda).unwrap();
        for ((pa, pb), pc) in
            a.state.params().iter().zip(b.state.params().iter()).zip(c.state.params().iter())
        {
            assert_eq!(pa, pb);
            assert_eq!(pa, pc);
        }
    }

    #[test]
    fn phase1_loss_decreases() {
        let corpus = generate_dataset(&toy_spec(7, 0.6), 24).unwrap();
        let mut cfg = quick_cfg(3);
        cfg.phase1_epochs = 4;
        let out = train_phase1::<f32>(&corpus, &ArchConfig::tiny(4), &cfg).unwrap();
        let steps_per_epoch = corpus.len().div_ceil(cfg.batch_size);
        let first: f64 = out.log[..steps_per_epoch].iter().map(|r| r.l_bce).sum::<f64>()
            / steps_per_epoch as f64;
        let last: f64 = out.log[out.log.len() - steps_per_epoch..]
            .iter()
            .map(|r| r.l_bce)
            .sum::<f64>()
            / steps_per_epoch as f64;
        assert!(last < first, "first {first}, last {last}");
    }

    #[test]
    fn rejects_empty_and_unlabeled_corpora() {
        let arch = ArchConfig::tiny(4);
        let cfg = quick_cfg(1);
        assert!(matches!(
            train_phase1::<f32>(&[], &arch, &cfg),
            Err(RecamError::Contract(_))
        ));
        let mut corpus = generate_dataset(&toy_spec(8, 1.0), 1).unwrap();
        corpus[0].label = vec![0, 0, 0, 0];
        assert!(matches!(
            train_phase1::<f32>(&corpus, &arch, &cfg),
            Err(RecamError::Contract(_))
        ));
    }

    #[test]
    fn lambda_zero_phase2_matches_continued_bce_training() {
        let corpus = generate_dataset(&toy_spec(9, 0.5), 10).unwrap();
        let arch = ArchConfig::tiny(4);
        let mut cfg = quick_cfg(4);
        cfg.phase1_epochs = 1;
        cfg.phase2_epochs = 2;
        let phase1 = train_phase1::<f64>(&corpus, &arch, &cfg).unwrap();

        let mut cfg0 = cfg.clone();
        cfg0.lambda = 0.0;
        let a = train_phase2::<f64>(phase1.state.clone(), &corpus, &cfg0).unwrap();
        let mut bstate = phase1.state.clone();
        bstate.reinit_fc2(cfg0.seed);
        let b = continue_bce_training::<f64>(bstate, &corpus, &cfg0).unwrap();

        // Encoder and FC1 updates coincide to 1e-12 at 64-bit, and FC2
        // receives exactly zero update from the lambda-scaled SCE term.
        let names = a.state.param_names();
        for ((pa, pb), name) in
            a.state.params().iter().zip(b.state.params().iter()).zip(names.iter())
        {
            for (x, y) in pa.iter().zip(pb.iter()) {
                assert!((x - y).abs() <= 1e-12, "{name} differs: {x} vs {y}");
            }
        }
    }

    #[test]
    fn single_label_recam_equals_vanilla_sce_on_masked_logits() {
        // With one positive class, Eq. 7's average collapses to the
        // vanilla SCE of that class's masked-feature logits.
        let corpus = generate_dataset(&toy_spec(10, 1.0), 1).unwrap();
        let state = ClassifierState::<f64>::init(ArchConfig::tiny(4), 1.0, 3).unwrap();
        let s = &corpus[0];
        let k = s.positives()[0];

        let f = nets::encode(pixels_as::<f64>(s, false).view(), &state).unwrap();
        let cam = crate::activation::extract_cam(&f, state.fc1.row(k), k).unwrap();
        let fk = crate::activation::mask_features(&f, cam.normalized.view()).unwrap();
        let zk = nets::classify_fc2(&fk, &state).unwrap();
        let y = one_hot::<f64>(k, 4);
        let expect = losses::sce_soft_target(zk.view(), y.view()).unwrap();

        let g = sample_grads(
            &state,
            s,
            LossMode::Combined { lambda: 1.0, sce: SceMode::Recam, detach_mask: false },
            false,
        )
        .unwrap();
        assert!((g.l_sce - expect).abs() < 1e-12, "{} vs {expect}", g.l_sce);
    }

    #[test]
    fn sce_single_only_on_multi_label_corpus_behaves_like_bce() {
        let corpus = generate_dataset(&toy_spec(11, 0.0), 6).unwrap();
        assert!(corpus.iter().all(|s| !s.is_single_label()));
        let arch = ArchConfig::tiny(4);
        let cfg = quick_cfg(5);
        let a = train_baseline::<f32>(&corpus, &arch, BaselineLoss::SceSingleOnly, &cfg).unwrap();
        let b = train_baseline::<f32>(&corpus, &arch, BaselineLoss::BceOnly, &cfg).unwrap();
        for (pa, pb) in a.state.params().iter().zip(b.state.params().iter()) {
            assert_eq!(pa, pb);
        }
    }

    #[test]
    fn bce_only_baseline_equals_phase1() {
        let corpus = generate_dataset(&toy_spec(12, 0.7), 8).unwrap();
        let arch = ArchConfig::tiny(4);
        let cfg = quick_cfg(6);
        let a = train_baseline::<f32>(&corpus, &arch, BaselineLoss::BceOnly, &cfg).unwrap();
        let b = train_phase1::<f32>(&corpus, &arch, &cfg).unwrap();
        for (pa, pb) in a.state.params().iter().zip(b.state.params().iter()) {
            assert_eq!(pa, pb);
        }
    }

    #[test]
    fn sce_only_on_single_label_corpus_is_vanilla_sce() {
        // Normalized multi-hot of a one-hot label is the one-hot itself;
        // check the per-sample loss value against the losses module.
        let corpus = generate_dataset(&toy_spec(13, 1.0), 3).unwrap();
        let state = ClassifierState::<f64>::init(ArchConfig::tiny(4), 1.0, 9).unwrap();
        for s in &corpus {
            let f = nets::encode(pixels_as::<f64>(s, false).view(), &state).unwrap();
            let z = nets::classify_fc1(&f, &state).unwrap();
            let y = one_hot::<f64>(s.positives()[0], 4);
            let expect = losses::sce_soft_target(z.view(), y.view()).unwrap();
            let g = sample_grads(&state, s, LossMode::SceNormalized, false).unwrap();
            assert!((g.l_sce - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn monitor_matches_closed_forms_on_uniform_logits() {
        let z = Array1::<f64>::zeros(5);
        let (gp, gq) = monitor_on_logits(&z, 0, MonitorLoss::Bce).unwrap();
        assert!((gp + 0.1).abs() < 1e-15);
        assert!((gq - 0.1).abs() < 1e-15);
        let (gp, gq) = monitor_on_logits(&z, 0, MonitorLoss::Sce).unwrap();
        assert!((gp + 0.8).abs() < 1e-15);
        assert!((gq - 0.2).abs() < 1e-15);
    }

    #[test]
    fn monitor_cross_checks_losses_module_oracles() {
        let corpus = generate_dataset(&toy_spec(14, 1.0), 6).unwrap();
        let state = ClassifierState::<f64>::init(ArchConfig::tiny(4), 1.0, 2).unwrap();
        let trace_bce = monitor_gradients(&state, &corpus, MonitorLoss::Bce).unwrap();
        let trace_sce = monitor_gradients(&state, &corpus, MonitorLoss::Sce).unwrap();
        for (i, s) in corpus.iter().enumerate() {
            let f = nets::encode(pixels_as::<f64>(s, false).view(), &state).unwrap();
            let z = nets::classify_fc1(&f, &state).unwrap();
            let p = s.positives()[0];
            let y: Array1<f64> = label_as(&s.label);
            let gb = losses::grad_bce(z.view(), y.view()).unwrap();
            let gs = losses::grad_sce(z.view(), y.view()).unwrap();
            let q = (0..4)
                .filter(|&j| j != p)
                .max_by(|&a, &b| z[a].partial_cmp(&z[b]).unwrap())
                .unwrap();
            assert!((trace_bce.rows[i].grad_positive - gb[p]).abs() < 1e-12);
            assert!((trace_bce.rows[i].grad_negative - gb[q]).abs() < 1e-12);
            assert!((trace_sce.rows[i].grad_positive - gs[p]).abs() < 1e-12);
            assert!((trace_sce.rows[i].grad_negative - gs[q]).abs() < 1e-12);
        }
    }

    #[test]
    fn monitor_rejects_multi_label_samples() {
        let corpus = generate_dataset(&toy_spec(15, 0.0), 2).unwrap();
        let state = ClassifierState::<f64>::init(ArchConfig::tiny(4), 1.0, 2).unwrap();
        assert!(matches!(
            monitor_gradients(&state, &corpus, MonitorLoss::Bce),
            Err(RecamError::Contract(_))
        ));
    }

    #[test]
    fn sce_gradient_reaches_the_encoder_through_masks() {
        let corpus = generate_dataset(&toy_spec(16, 0.5), 4).unwrap();
        let state = ClassifierState::<f64>::init(ArchConfig::tiny(4), 1.0, 7).unwrap();
        // Isolate the SCE term by differentiating it alone.
        let s = &corpus[0];
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(pixels_as::<f64>(s, false).into_dyn());
        let params = nets::tape_params(&mut tape, &state, true);
        let f = nets::tape_encode(&mut tape, x, &params, &state.arch);
        let mut acc: Option<Var> = None;
        for &k in &s.positives() {
            let a = tape.cam_project(f, params.fc1, k);
            let m = tape.max_normalize(a);
            let fk = tape.mask_mul(f, m);
            let zk = nets::tape_head(&mut tape, fk, params.fc2, None);
            let lk = tape.sce_soft_target(zk, one_hot(k, 4));
            acc = Some(match acc {
                None => lk,
                Some(p) => tape.add(p, lk),
            });
        }
        let l_sce = acc.unwrap();
        let grads = tape.backward(l_sce);
        let enc_norm: f64 = params
            .conv_w
            .iter()
            .filter_map(|&v| grads.get(v))
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum();
        assert!(enc_norm > 0.0, "no gradient reached the encoder");
        // FC1 is touched only through the mask, so it must receive
        // gradient when the mask is differentiable.
        let fc1_norm: f64 =
            grads.get(params.fc1).map(|g| g.iter().map(|x| x * x).sum()).unwrap_or(0.0);
        assert!(fc1_norm > 0.0, "no gradient reached FC1 through the mask");
    }

    #[test]
    fn detached_mask_blocks_fc1_gradient_from_sce() {
        let corpus = generate_dataset(&toy_spec(17, 1.0), 1).unwrap();
        let state = ClassifierState::<f64>::init(ArchConfig::tiny(4), 1.0, 7).unwrap();
        let s = &corpus[0];
        let k = s.positives()[0];

        let mut tape = Tape::<f64>::new();
        let x = tape.constant(pixels_as::<f64>(s, false).into_dyn());
        let params = nets::tape_params(&mut tape, &state, true);
        let f = nets::tape_encode(&mut tape, x, &params, &state.arch);
        let a = tape.cam_project(f, params.fc1, k);
        let m_val = {
            let raw = tape.value(a).view().into_dimensionality::<ndarray::Ix2>().unwrap();
            crate::autodiff::max_normalize(raw)
        };
        let m = tape.constant(m_val.into_dyn());
        let fk = tape.mask_mul(f, m);
        let zk = nets::tape_head(&mut tape, fk, params.fc2, None);
        let l = tape.sce_soft_target(zk, one_hot(k, 4));
        let grads = tape.backward(l);
        let fc1_grad_norm: f64 =
            grads.get(params.fc1).map(|g| g.iter().map(|x| x * x).sum()).unwrap_or(0.0);
        assert_eq!(fc1_grad_norm, 0.0, "detached mask must not route gradient to FC1");
    }

    #[test]
    fn lambda_zero_leaves_fc2_unchanged() {
        let corpus = generate_dataset(&toy_spec(18, 0.5), 8).unwrap();
        let arch = ArchConfig::tiny(4);
        let mut cfg = quick_cfg(8);
        cfg.phase1_epochs = 1;
        cfg.phase2_epochs = 1;
        cfg.lambda = 0.0;
        let phase1 = train_phase1::<f32>(&corpus, &arch, &cfg).unwrap();
        let mut expect_fc2 = phase1.state.clone();
        expect_fc2.reinit_fc2(cfg.seed);
        let out = train_phase2::<f32>(phase1.state, &corpus, &cfg).unwrap();
        assert_eq!(out.state.fc2, expect_fc2.fc2);
    }

    #[test]
    fn segmenter_ignores_ignore_pixels_and_is_deterministic() {
        let corpus = generate_dataset(&toy_spec(19, 1.0), 4).unwrap();
        let masks: Vec<Array2<u8>> = corpus.iter().map(|s| s.gt_mask.clone()).collect();
        let arch = SegArchConfig::small(4);
        let cfg = SegTrainConfig { epochs: 1, batch_size: 2, ..SegTrainConfig::default() };
        let (a, log_a) = train_segmenter::<f32>(&masks, &corpus, &arch, &cfg).unwrap();
        let (b, _) = train_segmenter::<f32>(&masks, &corpus, &arch, &cfg).unwrap();
        assert_eq!(a.convs[0].weight, b.convs[0].weight);
        assert!(!log_a.is_empty());

        // Ignored pixels contribute exactly zero gradient to the logits.
        let state = SegmenterState::<f64>::init(arch.clone(), 3).unwrap();
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(pixels_as::<f64>(&corpus[0], false).into_dyn());
        let (_, logits) = tape_segment(&mut tape, x, &state);
        let mut m = corpus[0].gt_mask.clone();
        for j in 0..m.ncols() {
            m[(0, j)] = 255;
        }
        let l = tape.seg_cross_entropy(logits, m);
        let grads = tape.backward(l);
        let dz = grads.get(logits).unwrap();
        let dz3 = dz.view().into_dimensionality::<ndarray::Ix3>().unwrap();
        for k in 0..5 {
            for j in 0..dz3.dim().2 {
                assert_eq!(dz3[(k, 0, j)], 0.0);
            }
        }
    }

    #[test]
    fn segmenter_rejects_mismatched_masks() {
        let corpus = generate_dataset(&toy_spec(20, 1.0), 3).unwrap();
        let masks: Vec<Array2<u8>> = corpus.iter().take(2).map(|s| s.gt_mask.clone()).collect();
        let arch = SegArchConfig::small(4);
        let cfg = SegTrainConfig::default();
        assert!(matches!(
            train_segmenter::<f32>(&masks, &corpus, &arch, &cfg),
            Err(RecamError::Contract(_))
        ));
    }

    #[test]
    fn seg_loss_decreases_over_training() {
        let corpus = generate_dataset(&toy_spec(21, 0.6), 12).unwrap();
        let masks: Vec<Array2<u8>> = corpus.iter().map(|s| s.gt_mask.clone()).collect();
        let arch = SegArchConfig::small(4);
        let cfg = SegTrainConfig { epochs: 3, batch_size: 4, ..SegTrainConfig::default() };
        let (_, log) = train_segmenter::<f32>(&masks, &corpus, &arch, &cfg).unwrap();
        let spe = corpus.len().div_ceil(cfg.batch_size);
        let first: f64 = log[..spe].iter().map(|r| r.l_total).sum::<f64>() / spe as f64;
        let last: f64 =
            log[log.len() - spe..].iter().map(|r| r.l_total).sum::<f64>() / spe as f64;
        assert!(last < first, "first {first}, last {last}");
    }
}
