//! Losses, the training loop step, batch order and evaluation.

use alloc::format;
use alloc::vec::Vec;

use crate::corpus::Utterance;
use crate::duration::DurationSeq;
use crate::error::{Error, Result};
use crate::extractor::DurationExtractor;
use crate::frames::AcousticFrames;
use crate::graph::{Graph, Var};
use crate::model::AcousticModel;
use crate::optim::{AdamConfig, AdamState};
use crate::params::{GradStore, ParamId, ParamStore};
use crate::rng::{RngStream, StreamKind};

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct LossWeights {
    pub before: f64,
    pub after: f64,
    pub duration: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            before: 1.0,
            after: 1.0,
            duration: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum Phase {
    Extractor,
    Main,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub phase: Phase,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Steps without a new best loss before training counts as converged.
    pub plateau_patience: usize,
}

impl TrainConfig {
    /// Main-phase defaults: lr 1e-4, batch 32, 300k steps.
    pub fn main(seed: u64) -> Self {
        Self {
            lr: 1e-4,
            batch_size: 32,
            max_steps: 300_000,
            seed,
            weights: LossWeights::default(),
            phase: Phase::Main,
            clip_norm: None,
            plateau_patience: 500,
        }
    }

    /// Extractor defaults: as the main phase plus clipping at norm 5.
    pub fn extractor(seed: u64) -> Self {
        Self {
            phase: Phase::Extractor,
            clip_norm: Some(5.0),
            ..Self::main(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip norm must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

/// One logged step. Losses are batch means.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainRecord {
    pub step: usize,
    pub total: f64,
    pub l1_before: f64,
    pub l1_after: f64,
    pub l1_dur: f64,
}

/// The scalar nodes of one utterance's loss.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub before: Var,
    pub after: Var,
    pub duration: Var,
}

/// Mean absolute error on the frames before and after the postnet and on the
/// raw durations, combined with `weights`.
pub fn total_loss(
    g: &mut Graph<'_>,
    before: Var,
    after: Var,
    target: &AcousticFrames,
    dur_raw: Var,
    dur_target: &DurationSeq,
    weights: &LossWeights,
) -> Result<LossTerms> {
    if dur_target.total() != target.len() {
        return Err(Error::Contract(format!(
            "target durations sum to {} but the target has {} frames",
            dur_target.total(),
            target.len()
        )));
    }
    if g.value(dur_raw).len() != dur_target.len() {
        return Err(Error::Contract(format!(
            "{} predicted durations for {} targets",
            g.value(dur_raw).len(),
            dur_target.len()
        )));
    }
    for v in [before, after] {
        if g.shape(v) != target.tensor().shape() {
            return Err(Error::Contract(format!(
                "prediction shape {:?} differs from target shape {:?}",
                g.shape(v),
                target.tensor().shape()
            )));
        }
    }
    let tv = g.input(target.tensor().clone());
    let l_before = g.l1(before, tv)?;
    let l_after = g.l1(after, tv)?;
    let dt = g.input(crate::tensor::Tensor::new(
        g.shape(dur_raw),
        dur_target.frames.iter().map(|&f| f as f64).collect(),
    )?);
    let l_dur = g.l1(dur_raw, dt)?;
    let a = g.scale(l_before, weights.before);
    let b = g.scale(l_after, weights.after);
    let c = g.scale(l_dur, weights.duration);
    let total = g.add_all(&[a, b, c])?;
    Ok(LossTerms {
        total,
        before: l_before,
        after: l_after,
        duration: l_dur,
    })
}

/// Epoch-wise shuffled batch order; batches run across epoch boundaries.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    seed: u64,
    n: usize,
    batch_size: usize,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl BatchSampler {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::Contract("cannot sample batches from an empty set".into()));
        }
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        let mut s = Self {
            seed,
            n,
            batch_size,
            epoch: 0,
            order: Vec::new(),
            pos: 0,
        };
        s.reshuffle();
        Ok(s)
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.n).collect();
        RngStream::substream(self.seed, StreamKind::Data, self.epoch).shuffle(&mut self.order);
        self.pos = 0;
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch_size);
        while out.len() < self.batch_size {
            if self.pos == self.n {
                self.epoch += 1;
                self.reshuffle();
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// "No new best for `patience` consecutive updates".
#[derive(Debug, Clone)]
pub struct PlateauDetector {
    patience: usize,
    best: f64,
    since_best: usize,
}

impl PlateauDetector {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            since_best: 0,
        }
    }

    /// Records a loss and reports whether training has plateaued.
    pub fn update(&mut self, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        self.since_best >= self.patience
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

/// Optimiser state plus the step counter and batch order.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub adam: AdamState,
    step: usize,
    sampler: BatchSampler,
}

impl Trainer {
    pub fn new(config: TrainConfig, params: &ParamStore, dataset_len: usize) -> Result<Self> {
        config.validate()?;
        let adam = AdamState::new(
            AdamConfig {
                lr: config.lr,
                ..AdamConfig::default()
            },
            params,
        );
        let sampler = BatchSampler::new(dataset_len, config.batch_size, config.seed)?;
        Ok(Self {
            config,
            adam,
            step: 0,
            sampler,
        })
    }

    /// Steps completed so far.
    pub fn step(&self) -> usize {
        self.step
    }

    /// Draws the next batch and applies one update. `loss_of` builds one
    /// utterance's loss on a training-mode graph.
    pub fn step_with<F>(&mut self, params: &mut ParamStore, mut loss_of: F) -> Result<TrainRecord>
    where
        F: FnMut(&mut Graph<'_>, usize) -> Result<LossTerms>,
    {
        let step = self.step + 1;
        let batch = self.sampler.next_batch();
        let mut grads = GradStore::zeros_like(params);
        let mut sums = [0.0f64; 4];
        for (k, &idx) in batch.iter().enumerate() {
            let rng = RngStream::substream(self.config.seed, StreamKind::Dropout, ((step as u64) << 16) | k as u64);
            let mut g = Graph::training(params, rng);
            let terms = loss_of(&mut g, idx)?;
            let parts = [terms.total, terms.before, terms.after, terms.duration].map(|v| g.scalar(v));
            if !parts.iter().all(|x| x.is_finite()) {
                return Err(Error::Numeric(format!("non-finite loss at step {step}")));
            }
            for (s, p) in sums.iter_mut().zip(parts) {
                *s += p;
            }
            g.backward(terms.total)?.accumulate_into(&mut grads);
        }
        let b = batch.len() as f64;
        grads.scale(1.0 / b);
        if let Some(c) = self.config.clip_norm {
            grads.clip_global_norm(c);
        }
        self.adam
            .step(params, &grads)
            .map_err(|e| Error::Numeric(format!("step {step}: {e}")))?;
        self.step = step;
        Ok(TrainRecord {
            step,
            total: sums[0] / b,
            l1_before: sums[1] / b,
            l1_after: sums[2] / b,
            l1_dur: sums[3] / b,
        })
    }

    /// One main-phase update. Target durations drive the length regulator;
    /// the duration loss is checked to reach no encoder parameter.
    pub fn train_step(
        &mut self,
        model: &AcousticModel,
        params: &mut ParamStore,
        data: &[Utterance],
    ) -> Result<TrainRecord> {
        let encoder_ids = encoder_params(params);
        let weights = self.config.weights;
        let step = self.step + 1;
        self.step_with(params, |g, idx| {
            let u = &data[idx];
            let durs = u
                .durations
                .as_ref()
                .ok_or_else(|| Error::Contract(format!("utterance {} has no durations", u.id)))?;
            let out = model.forward_train(g, &u.tokens, &u.frames, &durs.frames)?;
            let terms = total_loss(g, out.before, out.after, &u.frames, out.dur_raw, durs, &weights)?;
            let leaked = g
                .reachable_params(terms.duration)
                .into_iter()
                .any(|id| encoder_ids.binary_search(&id).is_ok());
            if leaked {
                return Err(Error::Contract(format!(
                    "duration loss reaches encoder parameters at step {step}"
                )));
            }
            Ok(terms)
        })
    }

    /// One extractor update: L1 before and after its postnet.
    pub fn train_extractor_step(
        &mut self,
        extractor: &DurationExtractor,
        params: &mut ParamStore,
        data: &[Utterance],
    ) -> Result<TrainRecord> {
        let w = self.config.weights;
        self.step_with(params, |g, idx| {
            let u = &data[idx];
            let out = extractor.forward_teacher_forced(g, &u.tokens, &u.frames)?;
            let tv = g.input(u.frames.tensor().clone());
            let before = g.l1(out.before, tv)?;
            let after = g.l1(out.after, tv)?;
            let a = g.scale(before, w.before);
            let b = g.scale(after, w.after);
            let total = g.add(a, b)?;
            let duration = g.input(crate::tensor::Tensor::scalar(0.0));
            Ok(LossTerms {
                total,
                before,
                after,
                duration,
            })
        })
    }
}

/// Sorted ids of every parameter under `encoder.`.
pub fn encoder_params(params: &ParamStore) -> Vec<ParamId> {
    let mut ids: Vec<ParamId> = params.ids_with_prefix("encoder.").collect();
    ids.sort();
    ids
}

/// Mean of per-utterance metrics.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EvalMetrics {
    /// L1 before the postnet, target durations.
    pub l1_before: f64,
    pub l1_after: f64,
    /// Mean |raw − target| over tokens.
    pub dur_l1: f64,
    /// Mean |rounded − target| over tokens.
    pub dur_mae: f64,
    /// |Σ predicted − Σ target| frames.
    pub length_error: f64,
}

/// Per-utterance metrics in evaluation mode (no dropout).
pub fn evaluate_utterance(model: &AcousticModel, params: &ParamStore, u: &Utterance) -> Result<EvalMetrics> {
    let durs = u
        .durations
        .as_ref()
        .ok_or_else(|| Error::Contract(format!("utterance {} has no durations", u.id)))?;
    let mut g = Graph::new(params);
    let out = model.forward_train(&mut g, &u.tokens, &u.frames, &durs.frames)?;
    let terms = total_loss(
        &mut g,
        out.before,
        out.after,
        &u.frames,
        out.dur_raw,
        durs,
        &LossWeights::default(),
    )?;
    let raw = g.value(out.dur_raw).to_vec();
    let predicted = DurationSeq::from_raw(raw);
    let n = durs.len() as f64;
    let dur_mae = predicted
        .frames
        .iter()
        .zip(&durs.frames)
        .map(|(&a, &b)| (a as f64 - b as f64).abs())
        .sum::<f64>()
        / n;
    Ok(EvalMetrics {
        l1_before: g.scalar(terms.before),
        l1_after: g.scalar(terms.after),
        dur_l1: g.scalar(terms.duration),
        dur_mae,
        length_error: (predicted.total() as f64 - durs.total() as f64).abs(),
    })
}

pub fn evaluate(model: &AcousticModel, params: &ParamStore, data: &[Utterance]) -> Result<EvalMetrics> {
    if data.is_empty() {
        return Err(Error::Contract("cannot evaluate an empty set".into()));
    }
    let per: Vec<EvalMetrics> = data
        .iter()
        .map(|u| evaluate_utterance(model, params, u))
        .collect::<Result<_>>()?;
    Ok(average(&per))
}

pub fn average(per: &[EvalMetrics]) -> EvalMetrics {
    let n = per.len() as f64;
    let mut m = EvalMetrics::default();
    for e in per {
        m.l1_before += e.l1_before;
        m.l1_after += e.l1_after;
        m.dur_l1 += e.dur_l1;
        m.dur_mae += e.dur_mae;
        m.length_error += e.length_error;
    }
    m.l1_before /= n;
    m.l1_after /= n;
    m.dur_l1 /= n;
    m.dur_mae /= n;
    m.length_error /= n;
    m
}
