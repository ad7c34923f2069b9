//! Deterministic single-pair-batch training and evaluation loops.

use std::borrow::Cow;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DepthBackend, FramePair};
use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::graph::Graph;
use crate::network::{Inference, Model, PairInput};
use crate::nn::{cosine_lr, Adam, ParamStore};
use crate::posenet::Dropout;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub schedule: Schedule,
    pub iterations: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    pub dropout: bool,
    /// Iterations per logged window.
    pub log_every: usize,
    /// Learning-rate multiplier for the loss balance parameters `s_t`, `s_q`.
    pub balance_lr_scale: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            schedule: Schedule::Cosine,
            iterations: 1000,
            clip_norm: 10.0,
            dropout: true,
            log_every: 50,
            balance_lr_scale: 1.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.clip_norm >= 0.0) {
            return Err(Error::Config("clip norm must be non-negative".into()));
        }
        if !(self.balance_lr_scale > 0.0 && self.balance_lr_scale.is_finite()) {
            return Err(Error::Config("balance_lr_scale must be positive".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be positive".into()));
        }
        Ok(())
    }

    pub fn rate(&self, step: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.learning_rate,
            Schedule::Cosine => cosine_lr(self.learning_rate, step, self.iterations),
        }
    }
}

/// Network input plus supervision for one pair.
#[derive(Debug, Clone)]
pub struct PreparedPair {
    pub input: PairInput,
    pub gt: Pose,
    pub index: (usize, usize),
}

/// Depth-completion key of a frame: `SEQ/NNNNNN`, or `NNNNNN` without a sequence.
pub fn frame_key(sequence: &str, frame: usize) -> String {
    if sequence.is_empty() {
        format!("{frame:06}")
    } else {
        format!("{sequence}/{frame:06}")
    }
}

/// Completes depth if needed and stacks the network input.
pub fn prepare_pair(pair: &FramePair, sequence: &str, backend: &DepthBackend, use_depth: bool) -> Result<PreparedPair> {
    pair.validate()?;
    let mut pair = pair.clone();
    let keys = (frame_key(sequence, pair.index.0), frame_key(sequence, pair.index.1));
    pair.complete(backend, (&keys.0, &keys.1))?;
    let (da, db) = (pair.dense_depth_a.as_ref().expect("completed"), pair.dense_depth_b.as_ref().expect("completed"));
    let gt = pair.gt_relative.ok_or_else(|| Error::InvalidInput(format!("pair {:?} has no ground-truth pose", pair.index)))?;
    Ok(PreparedPair {
        input: PairInput::new(&pair.rgb_a, da, &pair.rgb_b, db, use_depth)?,
        gt,
        index: pair.index,
    })
}

/// Training data addressed by pair index. `iteration` lets a source vary
/// what it returns over time (augmentation) while staying deterministic.
pub trait PairSource {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn get(&self, index: usize, iteration: usize) -> Result<Cow<'_, PreparedPair>>;
}

impl PairSource for [PreparedPair] {
    fn len(&self) -> usize {
        <[PreparedPair]>::len(self)
    }

    fn get(&self, index: usize, _iteration: usize) -> Result<Cow<'_, PreparedPair>> {
        Ok(Cow::Borrowed(&self[index]))
    }
}

/// Mean loss over one logging window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub iteration: usize,
    pub loss: f64,
    pub learning_rate: f64,
}

impl LogEntry {
    pub fn line(&self) -> String {
        format!("{} {:.17e} {:.17e}", self.iteration, self.loss, self.learning_rate)
    }
}

/// Optimizes `store` in place. Pairs are visited in a per-epoch shuffled
/// order; dropout masks use a seed derived from the iteration number.
pub fn train_pairs<S: PairSource + ?Sized>(
    model: &Model,
    store: &mut ParamStore,
    pairs: &S,
    opt: &OptimizerConfig,
    alpha: &[f64],
    seed: u64,
    mut on_log: impl FnMut(&LogEntry),
) -> Result<Vec<LogEntry>> {
    opt.validate()?;
    if pairs.is_empty() {
        return Err(Error::Empty("training pairs"));
    }
    let mut adam = Adam::new(store);
    adam.set_lr_scale(model.s_t, opt.balance_lr_scale);
    adam.set_lr_scale(model.s_q, opt.balance_lr_scale);
    let mut order_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = Vec::new();
    let mut log = Vec::new();
    let (mut window, mut count) = (0.0, 0usize);
    let clip = (opt.clip_norm > 0.0).then_some(opt.clip_norm);
    for it in 0..opt.iterations {
        if order.is_empty() {
            order = (0..pairs.len()).collect();
            order.shuffle(&mut order_rng);
            order.reverse();
        }
        let pair = pairs.get(order.pop().expect("refilled"), it)?;
        let mut g = Graph::new();
        let mut drop_rng = ChaCha8Rng::seed_from_u64(seed ^ (it as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut dropout = if opt.dropout { Dropout::On(&mut drop_rng) } else { Dropout::Off };
        let out = model.forward(&mut g, store, &pair.input, &mut dropout)?;
        let loss = model.loss(&mut g, store, &out, &pair.gt, alpha)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Diverged {
                iteration: it,
                detail: format!("loss {value} on pair {:?}", pair.index),
            });
        }
        let grads = g.backward(loss);
        let lr = opt.rate(it);
        adam.update(store, &grads, lr, clip);
        window += value;
        count += 1;
        if count == opt.log_every || it + 1 == opt.iterations {
            let entry = LogEntry {
                iteration: it + 1,
                loss: window / count as f64,
                learning_rate: lr,
            };
            on_log(&entry);
            log.push(entry);
            window = 0.0;
            count = 0;
        }
    }
    Ok(log)
}

/// Per-pair inference results in sequence order.
pub fn infer_pairs(model: &Model, store: &ParamStore, pairs: &[PreparedPair]) -> Result<Vec<Inference>> {
    pairs.iter().map(|p| model.infer(store, &p.input)).collect()
}

/// Loss of every pair without dropout, using the trained balance parameters.
pub fn evaluation_loss(model: &Model, store: &ParamStore, pairs: &[PreparedPair], alpha: &[f64]) -> Result<f64> {
    let mut total = 0.0;
    for p in pairs {
        let mut g = Graph::new();
        let out = model.forward(&mut g, store, &p.input, &mut Dropout::Off)?;
        let loss = model.loss(&mut g, store, &out, &p.gt, alpha)?;
        total += g.value(loss).item();
    }
    Ok(total / pairs.len() as f64)
}
