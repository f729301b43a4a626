//! Training loops: backbone pretraining and adapter training over a frozen
//! backbone.
//!
//! Both stages share the same batch machinery. Every utterance in a batch
//! gets its own tape, built and run backward in parallel; the per-utterance
//! gradients are then summed in utterance order, so results are bit-equal
//! no matter how many threads participate. When a biasing list is in play
//! the list is encoded once per batch, the summed dV seeds that shared
//! graph's backward, and the adapter gradients come out of both graphs.
//!
//! Adapter training asserts, via content hash, that the frozen backbone
//! partition is byte-identical before and after; a drift is a hard error,
//! not a warning.

use crate::decode::{beam_search, DecodeConfig, ModelScorer};
use crate::error::{Error, Result};
use crate::metrics::{align, attribute, ErrorSplit};
use crate::model::{Model, Partition, Stage};
use crate::optim::{clip_global_norm, Adam};
use crate::rng::{StreamRng, Streams};
use crate::tensor::{Real, Tensor};
use crate::vocab::{DynamicVocab, StaticVocab};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::time::Instant;

/// One training utterance: features plus the static-token transcript and
/// its words (kept for biasing-list construction).
#[derive(Debug, Clone)]
pub struct TrainItem<T: Real> {
    pub id: String,
    pub feats: Tensor<T>,
    pub tokens: Vec<u32>,
    pub words: Vec<String>,
}

impl<T: Real> TrainItem<T> {
    pub fn from_text(
        vocab: &StaticVocab,
        id: impl Into<String>,
        text: &str,
        feats: Tensor<T>,
    ) -> Result<Self> {
        Ok(TrainItem {
            id: id.into(),
            feats,
            tokens: vocab.tokenize(text)?,
            words: text.split_whitespace().map(str::to_string).collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    /// Warmup steps for the inverse-sqrt schedule.
    pub warmup: usize,
    pub label_smoothing: f64,
    pub clip_norm: f64,
    /// Emit a step record every this many steps (the first step always
    /// logs).
    pub log_every: usize,
    /// Biasing-list sampling, adapter stage only: up to this many distinct
    /// words are drawn from each reference in the batch.
    pub bias_positives: usize,
    /// Distractors drawn per batch from the lexicon pool, never overlapping
    /// any reference word of the batch.
    pub bias_distractors: usize,
    /// The assembled list is clamped into this size band; short lists are
    /// topped up with extra distractors, long ones truncated after a
    /// shuffle.
    pub bias_n_min: usize,
    pub bias_n_max: usize,
    /// How many validation utterances are decoded for the per-epoch error
    /// rates in the log. Zero skips decoding (loss is still reported).
    pub val_decode_cap: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 16,
            peak_lr: 2e-3,
            warmup: 300,
            label_smoothing: 0.1,
            clip_norm: 1.0,
            log_every: 25,
            bias_positives: 1,
            bias_distractors: 24,
            bias_n_min: 8,
            bias_n_max: 64,
            val_decode_cap: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.epochs == 0 || self.batch_size == 0 {
            problems.push("epochs and batch_size must be positive".to_string());
        }
        if !(self.peak_lr.is_finite() && self.peak_lr > 0.0) {
            problems.push(format!("peak_lr {} must be positive", self.peak_lr));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            problems.push(format!(
                "label_smoothing {} outside [0, 1)",
                self.label_smoothing
            ));
        }
        if !(self.clip_norm.is_finite() && self.clip_norm > 0.0) {
            problems.push(format!("clip_norm {} must be positive", self.clip_norm));
        }
        if self.log_every == 0 {
            problems.push("log_every must be positive".to_string());
        }
        if self.bias_n_min > self.bias_n_max || self.bias_n_max == 0 {
            problems.push(format!(
                "biasing-list band {}..={} is inconsistent",
                self.bias_n_min, self.bias_n_max
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Model(problems.join("; ")))
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TrainEvent {
    Step {
        stage: Stage,
        epoch: usize,
        step: u64,
        loss: f64,
        lr: f64,
        grad_norm: f64,
        /// Milliseconds spent since the previous step record.
        wall_ms: u64,
    },
    Val {
        stage: Stage,
        epoch: usize,
        step: u64,
        val_loss: f64,
        /// Word error rate over the decoded validation subset, as a
        /// fraction; absent when decoding is disabled.
        #[serde(skip_serializing_if = "Option::is_none")]
        val_wer: Option<f64>,
        /// Error rate restricted to the dev biasing list's words (adapter
        /// stage only).
        #[serde(skip_serializing_if = "Option::is_none")]
        val_bwer: Option<f64>,
    },
}

/// Mean loss and store-aligned gradients for one batch.
pub struct BatchGrads<T: Real> {
    pub loss: f64,
    pub tokens: usize,
    /// Indexed like the parameter store; `None` where nothing flowed.
    pub grads: Vec<Option<Vec<T>>>,
}

/// Forward-plus-backward over a batch. `items` pair features with labels
/// (already rewritten against the list when `spellings` is given). The
/// returned gradients are the gradient of the mean utterance loss.
pub fn batch_grads<T: Real>(
    model: &Model<T>,
    items: &[(&Tensor<T>, Vec<u32>)],
    spellings: Option<&[Vec<u32>]>,
    smoothing: f64,
) -> Result<BatchGrads<T>> {
    if items.is_empty() {
        return Err(Error::InvalidArg {
            what: "batch",
            detail: "empty batch".into(),
        });
    }
    let mut ctx = spellings.map(|s| model.bias_context(s)).transpose()?;
    let losses = items
        .par_iter()
        .map(|(f, l)| {
            let mut bl = model.utterance_loss(f, l, ctx.as_ref(), smoothing)?;
            bl.run_backward();
            Ok(bl)
        })
        .collect::<Result<Vec<_>>>()?;

    let b = items.len();
    let mut grads: Vec<Option<Vec<T>>> = vec![None; model.store.len()];
    let accumulate = |grads: &mut Vec<Option<Vec<T>>>, idx: usize, g: &[T]| {
        let slot = grads[idx].get_or_insert_with(|| vec![T::ZERO; g.len()]);
        for (a, &v) in slot.iter_mut().zip(g) {
            *a += v;
        }
    };
    let (n, db) = ctx.as_ref().map(|c| (c.n, c.d_bias)).unwrap_or((0, 0));
    let mut dv_sum = vec![T::ZERO; n * db];
    let mut loss_sum = 0.0;
    let mut tokens = 0;
    for bl in &losses {
        loss_sum += bl.value();
        tokens += bl.tokens;
        for (idx, g) in bl.param_grads() {
            accumulate(&mut grads, idx, g);
        }
        if let Some(dv) = bl.v_grad(n, db) {
            for (a, v) in dv_sum.iter_mut().zip(dv) {
                *a += v;
            }
        }
    }
    if let Some(c) = ctx.as_mut() {
        c.backprop(&dv_sum);
        for (idx, g) in c.param_grads() {
            accumulate(&mut grads, idx, g);
        }
    }
    let scale = T::from_f64(1.0 / b as f64);
    for g in grads.iter_mut().flatten() {
        for v in g.iter_mut() {
            *v *= scale;
        }
    }
    Ok(BatchGrads {
        loss: loss_sum / b as f64,
        tokens,
        grads,
    })
}

/// Forward-only mean loss over a batch.
pub fn batch_loss<T: Real>(
    model: &Model<T>,
    items: &[(&Tensor<T>, Vec<u32>)],
    spellings: Option<&[Vec<u32>]>,
    smoothing: f64,
) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::InvalidArg {
            what: "batch",
            detail: "empty batch".into(),
        });
    }
    let ctx = spellings.map(|s| model.bias_context(s)).transpose()?;
    let vals = items
        .par_iter()
        .map(|(f, l)| {
            model
                .utterance_loss(f, l, ctx.as_ref(), smoothing)
                .map(|bl| bl.value())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Loads gradients into the store, clips, and takes one optimizer step.
fn apply_grads<T: Real>(
    model: &mut Model<T>,
    opt: &mut Adam<T>,
    grads: Vec<Option<Vec<T>>>,
    clip: f64,
) -> Result<(f64, f64)> {
    model.store.zero_grads();
    for (idx, g) in grads.into_iter().enumerate() {
        if let Some(g) = g {
            let (name, part, t) = model.store.entry_mut(idx);
            if part != Partition::Trainable {
                return Err(Error::Model(format!(
                    "gradient arrived for frozen tensor {name:?}"
                )));
            }
            t.accumulate_grad(&g);
        }
    }
    let mut trainable = model.store.trainable_mut();
    let norm = clip_global_norm(&mut trainable, clip)?;
    let lr = opt.step(&mut trainable)?;
    model.store.zero_grads();
    Ok((norm, lr))
}

fn shuffled_order(streams: &Streams, name: &str, epoch: usize, len: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    streams.substream(name, epoch as u64).shuffle(&mut order);
    order
}

/// Backbone pretraining. The model must be in the pretrain stage; every
/// parameter trains.
pub fn pretrain<T: Real>(
    model: &mut Model<T>,
    train: &[TrainItem<T>],
    val: &[TrainItem<T>],
    cfg: &TrainConfig,
    seed: u64,
    log: &mut dyn FnMut(&TrainEvent),
) -> Result<()> {
    if model.stage != Stage::Pretrain {
        return Err(Error::Model("pretrain requires a pretrain-stage model".into()));
    }
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Model("no training data".into()));
    }
    let streams = Streams::new(seed);
    let mut opt = Adam::new(cfg.peak_lr, cfg.warmup);
    let mut step: u64 = 0;
    let mut clock = Instant::now();
    for epoch in 0..cfg.epochs {
        for chunk in shuffled_order(&streams, "order/pretrain", epoch, train.len())
            .chunks(cfg.batch_size)
        {
            let items: Vec<(&Tensor<T>, Vec<u32>)> = chunk
                .iter()
                .map(|&i| (&train[i].feats, train[i].tokens.clone()))
                .collect();
            let bg = batch_grads(model, &items, None, cfg.label_smoothing)?;
            step += 1;
            if !bg.loss.is_finite() {
                return Err(Error::Diverged {
                    step,
                    loss: bg.loss,
                });
            }
            let (grad_norm, lr) =
                apply_grads(model, &mut opt, bg.grads, cfg.clip_norm).map_err(|e| match e {
                    Error::NonFinite { .. } => Error::Diverged {
                        step,
                        loss: bg.loss,
                    },
                    other => other,
                })?;
            if step == 1 || step % cfg.log_every as u64 == 0 {
                log(&TrainEvent::Step {
                    stage: Stage::Pretrain,
                    epoch,
                    step,
                    loss: bg.loss,
                    lr,
                    grad_norm,
                    wall_ms: take_ms(&mut clock),
                });
            }
        }
        if !val.is_empty() {
            let val_loss = eval_split(model, val, None, cfg)?;
            let val_wer = decoded_rates(model, val, None, cfg)?.map(|s| s.0);
            log(&TrainEvent::Val {
                stage: Stage::Pretrain,
                epoch,
                step,
                val_loss,
                val_wer,
                val_bwer: None,
            });
        }
    }
    Ok(())
}

fn take_ms(clock: &mut Instant) -> u64 {
    let ms = clock.elapsed().as_millis() as u64;
    *clock = Instant::now();
    ms
}

/// Greedy-decodes the head of a split and scores it. With a list in play
/// the hypothesis ids are expanded back to static tokens before scoring and
/// the listed error rate is reported alongside. Returns `None` when the
/// decode cap is zero.
fn decoded_rates<T: Real>(
    model: &Model<T>,
    data: &[TrainItem<T>],
    dev_list: Option<&DynamicVocab>,
    cfg: &TrainConfig,
) -> Result<Option<(f64, Option<f64>)>> {
    if cfg.val_decode_cap == 0 || data.is_empty() {
        return Ok(None);
    }
    let subset = &data[..data.len().min(cfg.val_decode_cap)];
    let tables = match dev_list {
        Some(dv) if !dv.is_empty() => {
            let spellings: Vec<Vec<u32>> =
                dv.words().iter().map(|w| w.ids.clone()).collect();
            Some(model.bias_tables(&spellings)?)
        }
        _ => None,
    };
    let dcfg = DecodeConfig {
        beam: 1,
        max_steps: model.cfg.max_len.min(64),
        mu: 0.0,
    };
    let vocab = StaticVocab::chars();
    let alignments = subset
        .par_iter()
        .map(|it| {
            let enc = model.encode_utterance(&it.feats)?;
            let scorer = ModelScorer {
                model,
                enc: &enc,
                tables: tables.as_ref(),
            };
            let got = beam_search(&scorer, &dcfg)?;
            let statics = match dev_list {
                Some(dv) => dv.expand(&got.tokens)?,
                None => got.tokens.clone(),
            };
            let text = vocab.detokenize(&statics)?;
            let hyp: Vec<String> = text.split_whitespace().map(str::to_string).collect();
            Ok(align(&it.words, &hyp))
        })
        .collect::<Result<Vec<_>>>()?;
    let listed: HashSet<&str> = dev_list
        .map(|dv| dv.words().iter().map(|w| w.text.as_str()).collect())
        .unwrap_or_default();
    let mut split = ErrorSplit::default();
    for a in &alignments {
        split += attribute(a, |w| listed.contains(w));
    }
    let wer = split.wer().ok_or_else(|| {
        Error::Model("validation subset has no reference words".into())
    })?;
    Ok(Some((wer, split.b_wer())))
}

/// Mean teacher-forced loss over a split, batched to bound peak memory.
fn eval_split<T: Real>(
    model: &Model<T>,
    data: &[TrainItem<T>],
    spellings: Option<&[Vec<u32>]>,
    cfg: &TrainConfig,
) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for chunk in data.chunks(cfg.batch_size) {
        let items: Vec<(&Tensor<T>, Vec<u32>)> = chunk
            .iter()
            .map(|it| (&it.feats, it.tokens.clone()))
            .collect();
        sum += batch_loss(model, &items, spellings, cfg.label_smoothing)? * chunk.len() as f64;
        count += chunk.len();
    }
    Ok(sum / count as f64)
}

/// Assembles one batch's biasing list. Positives: up to `bias_positives`
/// distinct words from each reference, preferring words spelled with two or
/// more subword tokens (a single-token word already has a dedicated output
/// class, so its dynamic token would be degenerate). Distractors:
/// `bias_distractors` pool words, never overlapping any reference word of
/// the batch. The combined list is shuffled, then clamped into
/// `bias_n_min..=bias_n_max`, topping up with further distractors when
/// short.
fn batch_biasing_list(
    vocab: &StaticVocab,
    items: &[&TrainItem<impl Real>],
    pool: &[String],
    cfg: &TrainConfig,
    rng: &mut StreamRng,
) -> Vec<String> {
    let batch_words: HashSet<&str> = items
        .iter()
        .flat_map(|it| it.words.iter().map(String::as_str))
        .collect();
    let mut list: Vec<String> = Vec::new();
    let mut in_list: HashSet<String> = HashSet::new();
    let multi_token = |w: &str| vocab.tokenize(w).map(|t| t.len() >= 2).unwrap_or(false);
    for it in items {
        let mut distinct: Vec<&String> = Vec::new();
        let mut seen: HashSet<&str> = HashSet::new();
        for w in &it.words {
            if seen.insert(w.as_str()) {
                distinct.push(w);
            }
        }
        rng.shuffle(&mut distinct);
        // Multi-token words first, then the rest if the quota allows.
        distinct.sort_by_key(|w| !multi_token(w));
        for w in distinct.into_iter().take(cfg.bias_positives) {
            if in_list.insert(w.clone()) {
                list.push(w.clone());
            }
        }
    }
    let mut order: Vec<usize> = (0..pool.len()).collect();
    rng.shuffle(&mut order);
    let mut spare = order
        .into_iter()
        .map(|i| &pool[i])
        .filter(|w| !batch_words.contains(w.as_str()));
    for w in spare.by_ref().take(cfg.bias_distractors) {
        if in_list.insert(w.clone()) {
            list.push(w.clone());
        }
    }
    rng.shuffle(&mut list);
    list.truncate(cfg.bias_n_max);
    for w in spare {
        if list.len() >= cfg.bias_n_min {
            break;
        }
        if in_list.insert(w.clone()) {
            list.push(w.clone());
        }
    }
    list
}

/// Rewrites a batch against a fresh list and produces the inputs for
/// [`batch_grads`]: (features, rewritten labels) plus the list spellings.
fn prepare_bias_batch<'a, T: Real>(
    vocab: &StaticVocab,
    items: &[&'a TrainItem<T>],
    pool: &[String],
    cfg: &TrainConfig,
    rng: &mut StreamRng,
) -> Result<(Vec<(&'a Tensor<T>, Vec<u32>)>, Vec<Vec<u32>>, Vec<String>)> {
    let words = batch_biasing_list(vocab, items, pool, cfg, rng);
    let dv = DynamicVocab::new(vocab, &words)?;
    let spellings: Vec<Vec<u32>> = dv.words().iter().map(|w| w.ids.clone()).collect();
    let batch: Vec<(&Tensor<T>, Vec<u32>)> = items
        .iter()
        .map(|it| (&it.feats, dv.rewrite(&it.tokens)))
        .collect();
    Ok((batch, spellings, words))
}

/// Adapter training over a frozen backbone. Each batch gets its own
/// biasing list (batch words plus distractors from `pool`); labels are
/// rewritten against it so list words are supervised as single dynamic
/// tokens. The frozen partition is hash-checked before and after.
pub fn train_bias<T: Real>(
    model: &mut Model<T>,
    vocab: &StaticVocab,
    train: &[TrainItem<T>],
    val: &[TrainItem<T>],
    pool: &[String],
    cfg: &TrainConfig,
    seed: u64,
    log: &mut dyn FnMut(&TrainEvent),
) -> Result<()> {
    if model.stage != Stage::Bias {
        return Err(Error::Model(
            "adapter training requires the adapter stage".into(),
        ));
    }
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Model("no training data".into()));
    }
    if pool.is_empty() {
        return Err(Error::Model("empty distractor pool".into()));
    }
    let frozen_before = model.store.partition_hash(Partition::Frozen);
    let streams = Streams::new(seed);
    let mut opt = Adam::new(cfg.peak_lr, cfg.warmup);
    let mut step: u64 = 0;
    let mut clock = Instant::now();
    // One fixed dev list for the whole run, so the logged listed-word rate
    // tracks learning rather than list churn.
    let dev_list = if val.is_empty() || cfg.val_decode_cap == 0 {
        None
    } else {
        let head: Vec<&TrainItem<T>> =
            val.iter().take(cfg.val_decode_cap).collect();
        let mut rng = streams.stream("biaslist/dev");
        let words = batch_biasing_list(vocab, &head, pool, cfg, &mut rng);
        Some(DynamicVocab::new(vocab, &words)?)
    };
    for epoch in 0..cfg.epochs {
        let order = shuffled_order(&streams, "order/bias", epoch, train.len());
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let items: Vec<&TrainItem<T>> = chunk.iter().map(|&i| &train[i]).collect();
            let mut list_rng = streams.substream(
                &format!("biaslist/train/{epoch}"),
                batch_idx as u64,
            );
            let (batch, spellings, _) =
                prepare_bias_batch(vocab, &items, pool, cfg, &mut list_rng)?;
            let sp = (!spellings.is_empty()).then_some(&spellings[..]);
            let bg = batch_grads(model, &batch, sp, cfg.label_smoothing)?;
            step += 1;
            if !bg.loss.is_finite() {
                return Err(Error::Diverged {
                    step,
                    loss: bg.loss,
                });
            }
            let (grad_norm, lr) =
                apply_grads(model, &mut opt, bg.grads, cfg.clip_norm).map_err(|e| match e {
                    Error::NonFinite { .. } => Error::Diverged {
                        step,
                        loss: bg.loss,
                    },
                    other => other,
                })?;
            if step == 1 || step % cfg.log_every as u64 == 0 {
                log(&TrainEvent::Step {
                    stage: Stage::Bias,
                    epoch,
                    step,
                    loss: bg.loss,
                    lr,
                    grad_norm,
                    wall_ms: take_ms(&mut clock),
                });
            }
        }
        if !val.is_empty() {
            let mut val_loss = 0.0;
            let mut count = 0usize;
            for (batch_idx, chunk) in val.chunks(cfg.batch_size).enumerate() {
                let items: Vec<&TrainItem<T>> = chunk.iter().collect();
                let mut list_rng =
                    streams.substream(&format!("biaslist/val/{epoch}"), batch_idx as u64);
                let (batch, spellings, _) =
                    prepare_bias_batch(vocab, &items, pool, cfg, &mut list_rng)?;
                let sp = (!spellings.is_empty()).then_some(&spellings[..]);
                val_loss += batch_loss(model, &batch, sp, cfg.label_smoothing)?
                    * chunk.len() as f64;
                count += chunk.len();
            }
            let rates = decoded_rates(model, val, dev_list.as_ref(), cfg)?;
            log(&TrainEvent::Val {
                stage: Stage::Bias,
                epoch,
                step,
                val_loss: val_loss / count as f64,
                val_wer: rates.map(|r| r.0),
                val_bwer: rates.and_then(|r| r.1),
            });
        }
    }
    let frozen_after = model.store.partition_hash(Partition::Frozen);
    if frozen_before != frozen_after {
        return Err(Error::Model(
            "frozen backbone changed during adapter training".into(),
        ));
    }
    Ok(())
}
