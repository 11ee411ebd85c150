//! Adam training loops for base models, bridges and LoRA adapters, with a
//! seeded train/validation split and lowest-validation-loss selection.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::calm::{BoundCrossAttn, ComposedModel};
use crate::error::{Error, Result};
use crate::lm::{TokenId, TransformerModel};
use crate::lora::LoraModel;
use crate::tensor::{seeded_rng, GradCheckReport, Tape, Tensor, Var};

/// Target id for positions excluded from the loss.
pub const IGNORE: usize = usize::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip: f64,
    pub split_ratio: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 16,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 1.0,
            split_ratio: 0.85,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(Error::config(
                "split_ratio",
                format!("{} is not in (0, 1)", self.split_ratio),
            ));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", "must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("beta1/beta2", "must lie in [0, 1)"));
        }
        if self.eps <= 0.0 || self.grad_clip <= 0.0 {
            return Err(Error::config("eps/grad_clip", "must be positive"));
        }
        Ok(())
    }
}

/// Loss curve of one run. Index 0 is measured before the first update;
/// index `e` after epoch `e`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub best_epoch: usize,
    pub checkpoint_id: String,
    pub trainable_params: usize,
}

/// Index of the minimum; the earliest index wins ties.
pub fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v < values[best] {
            best = i;
        }
    }
    best
}

/// Seeded shuffle, then the first `floor(ratio * N)` items train and the rest
/// validate.
pub fn split_dataset<T: Clone>(items: &[T], ratio: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if items.len() < 2 {
        return Err(Error::Data(format!(
            "need at least 2 examples to split, got {}",
            items.len()
        )));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::config("split_ratio", format!("{ratio} is not in (0, 1)")));
    }
    let n_train = (ratio * items.len() as f64).floor() as usize;
    if n_train == 0 || n_train == items.len() {
        return Err(Error::Data(format!(
            "split of {} examples at ratio {ratio} leaves one side empty",
            items.len()
        )));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut seeded_rng(seed));
    let train = order[..n_train].iter().map(|&i| items[i].clone()).collect();
    let val = order[n_train..].iter().map(|&i| items[i].clone()).collect();
    Ok((train, val))
}

/// A token sequence whose tokens from `loss_from` on are prediction targets.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Example {
    pub tokens: Vec<TokenId>,
    pub loss_from: usize,
}

impl Example {
    /// Every next-token prediction counts.
    pub fn full(tokens: Vec<TokenId>) -> Self {
        Example { tokens, loss_from: 1 }
    }
}

/// Right-padded `[batch, seq]` inputs with aligned targets.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Vec<TokenId>,
    pub targets: Vec<usize>,
    pub batch: usize,
    pub seq: usize,
    /// Unpadded input prefix of each row.
    pub rows: Vec<Vec<TokenId>>,
}

impl Batch {
    pub fn new(examples: &[&Example], pad: TokenId) -> Result<Self> {
        let seq = examples
            .iter()
            .map(|e| e.tokens.len().saturating_sub(1))
            .max()
            .unwrap_or(0);
        if seq == 0 {
            return Err(Error::Data("examples need at least two tokens".into()));
        }
        let mut inputs = Vec::with_capacity(examples.len() * seq);
        let mut targets = Vec::with_capacity(examples.len() * seq);
        let mut rows = Vec::with_capacity(examples.len());
        for e in examples {
            let n = e.tokens.len() - 1;
            let row = &e.tokens[..n];
            inputs.extend_from_slice(row);
            inputs.extend(std::iter::repeat_n(pad, seq - n));
            for t in 0..seq {
                let pos = t + 1;
                targets.push(if pos < e.tokens.len() && pos >= e.loss_from {
                    e.tokens[pos]
                } else {
                    IGNORE
                });
            }
            rows.push(row.to_vec());
        }
        Ok(Batch {
            inputs,
            targets,
            batch: examples.len(),
            seq,
            rows,
        })
    }

    pub fn target_count(&self) -> usize {
        self.targets.iter().filter(|&&t| t != IGNORE).count()
    }
}

/// A model with a distinguished set of trainable tensors.
pub trait Trainable {
    /// Records the masked next-token loss of `batch`; returns the loss and one
    /// var per trainable tensor (in [`Trainable::trainable_mut`] order).
    fn batch_loss(&mut self, tape: &mut Tape, batch: &Batch) -> Result<(Var, Vec<Var>)>;
    fn trainable(&self) -> Vec<&Tensor>;
    fn trainable_mut(&mut self) -> Vec<&mut Tensor>;
    /// Bytes of everything that must not change during training.
    fn frozen_bytes(&self) -> Vec<u8>;
}

impl Trainable for TransformerModel {
    fn batch_loss(&mut self, tape: &mut Tape, batch: &Batch) -> Result<(Var, Vec<Var>)> {
        let bound = self.bind(tape);
        let (_, logits) = self.forward_vars(tape, &bound, &batch.inputs, batch.batch, batch.seq)?;
        let loss = tape.cross_entropy(logits, &batch.targets, IGNORE)?;
        Ok((loss, bound.vars))
    }

    fn trainable(&self) -> Vec<&Tensor> {
        self.params().iter().collect()
    }

    fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        self.params_mut().iter_mut().collect()
    }

    fn frozen_bytes(&self) -> Vec<u8> {
        Vec::new()
    }
}

impl Trainable for LoraModel {
    fn batch_loss(&mut self, tape: &mut Tape, batch: &Batch) -> Result<(Var, Vec<Var>)> {
        let (logits, bound) = self.forward_on(tape, &batch.inputs, batch.batch, batch.seq)?;
        let loss = tape.cross_entropy(logits, &batch.targets, IGNORE)?;
        Ok((loss, bound.a.iter().chain(&bound.b).copied().collect()))
    }

    fn trainable(&self) -> Vec<&Tensor> {
        self.trainable_tensors()
    }

    fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        self.trainable_tensors_mut()
    }

    fn frozen_bytes(&self) -> Vec<u8> {
        self.anchor().weight_bytes()
    }
}

/// A composed model plus a cache of augment states keyed by input row; the
/// augment is frozen, so its states never change during training.
pub struct CachedComposed<'a> {
    pub model: &'a mut ComposedModel,
    cache: HashMap<Vec<TokenId>, Vec<Tensor>>,
}

impl<'a> CachedComposed<'a> {
    pub fn new(model: &'a mut ComposedModel) -> Self {
        CachedComposed {
            model,
            cache: HashMap::new(),
        }
    }

    fn states_for(&mut self, batch: &Batch) -> Result<Vec<Tensor>> {
        let missing: Vec<&Vec<TokenId>> = {
            let mut seen = std::collections::HashSet::new();
            batch
                .rows
                .iter()
                .filter(|r| !self.cache.contains_key(*r) && seen.insert(*r))
                .collect()
        };
        // Rows sharing a length are run through the augment together.
        let mut by_len: HashMap<usize, Vec<&Vec<TokenId>>> = HashMap::new();
        for r in missing {
            by_len.entry(r.len()).or_default().push(r);
        }
        let mut lens: Vec<usize> = by_len.keys().copied().collect();
        lens.sort_unstable();
        for len in lens {
            let rows = &by_len[&len];
            let flat: Vec<TokenId> = rows.iter().flat_map(|r| r.iter().copied()).collect();
            let states = self.model.augment_states(&flat, rows.len(), len)?;
            for (ri, r) in rows.iter().enumerate() {
                let per_conn = states
                    .iter()
                    .map(|s| {
                        let d = s.shape()[2];
                        let chunk = s.data()[ri * len * d..(ri + 1) * len * d].to_vec();
                        Tensor::new(vec![len, d], chunk).expect("consistent shape")
                    })
                    .collect();
                self.cache.insert((*r).clone(), per_conn);
            }
        }
        let n_conn = self.model.spec().pairs.len();
        let mut out = Vec::with_capacity(n_conn);
        for c in 0..n_conn {
            let d = self.model.augment().config().width;
            let mut data = vec![0.0; batch.batch * batch.seq * d];
            for (ri, r) in batch.rows.iter().enumerate() {
                let src = self.cache[r][c].data();
                let dst = ri * batch.seq * d;
                data[dst..dst + src.len()].copy_from_slice(src);
            }
            out.push(Tensor::new(vec![batch.batch, batch.seq, d], data)?);
        }
        Ok(out)
    }
}

impl Trainable for CachedComposed<'_> {
    fn batch_loss(&mut self, tape: &mut Tape, batch: &Batch) -> Result<(Var, Vec<Var>)> {
        let states = self.states_for(batch)?;
        let (logits, bound) = self
            .model
            .forward_on(tape, &batch.inputs, batch.batch, batch.seq, &states)?;
        let loss = tape.cross_entropy(logits, &batch.targets, IGNORE)?;
        Ok((loss, bound.bridges.iter().flat_map(|b| b.vars()).collect()))
    }

    fn trainable(&self) -> Vec<&Tensor> {
        self.model.trainable_tensors()
    }

    fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        self.model.trainable_tensors_mut()
    }

    fn frozen_bytes(&self) -> Vec<u8> {
        let mut b = self.model.anchor().weight_bytes();
        b.extend(self.model.augment().weight_bytes());
        b
    }
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: i32,
}

impl Adam {
    fn new(params: &[&Tensor]) -> Self {
        Adam {
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            step: 0,
        }
    }

    fn update(&mut self, params: &mut [&mut Tensor], cfg: &TrainConfig) {
        self.step += 1;
        let norm: f64 = params
            .iter()
            .filter_map(|p| p.grad())
            .flat_map(|g| g.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        let clip = if norm > cfg.grad_clip {
            cfg.grad_clip / norm
        } else {
            1.0
        };
        let bc1 = 1.0 - cfg.beta1.powi(self.step);
        let bc2 = 1.0 - cfg.beta2.powi(self.step);
        for (k, p) in params.iter_mut().enumerate() {
            let Some(g) = p.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let data = p.data_mut();
            for i in 0..data.len() {
                let gi = g[i] * clip;
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                data[i] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
            }
        }
    }
}

fn batches<'e>(examples: &'e [Example], order: &[usize], size: usize) -> Vec<Vec<&'e Example>> {
    order
        .chunks(size)
        .map(|c| c.iter().map(|&i| &examples[i]).collect())
        .collect()
}

/// Token-weighted mean loss over `examples` without updating anything.
pub fn mean_loss<M: Trainable>(model: &mut M, examples: &[Example], batch_size: usize, pad: TokenId) -> Result<f64> {
    let order: Vec<usize> = (0..examples.len()).collect();
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in batches(examples, &order, batch_size.max(1)) {
        let batch = Batch::new(&chunk, pad)?;
        let n = batch.target_count();
        if n == 0 {
            continue;
        }
        let mut tape = Tape::new();
        let (loss, _) = model.batch_loss(&mut tape, &batch)?;
        total += tape.value(loss)[0] * n as f64;
        count += n;
    }
    if count == 0 {
        return Err(Error::Data("no loss targets in evaluation set".into()));
    }
    Ok(total / count as f64)
}

/// Whether the trainer restores the lowest-validation-loss weights at the end.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selection {
    BestValidation,
    LastEpoch,
}

/// Shared Adam loop. Checks that non-trainable state is byte-identical after
/// training.
pub fn fit<M: Trainable>(
    model: &mut M,
    train: &[Example],
    val: &[Example],
    cfg: &TrainConfig,
    pad: TokenId,
    selection: Selection,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data("training and validation sets must be non-empty".into()));
    }
    let frozen_before = model.frozen_bytes();
    let mut adam = Adam::new(&model.trainable());
    let mut report = TrainReport {
        train_loss: vec![mean_loss(model, train, cfg.batch_size, pad)?],
        val_loss: vec![mean_loss(model, val, cfg.batch_size, pad)?],
        best_epoch: 0,
        checkpoint_id: String::new(),
        trainable_params: model.trainable().iter().map(|t| t.numel()).sum(),
    };
    let mut best: Vec<Tensor> = model.trainable().into_iter().cloned().collect();
    let mut rng = seeded_rng(cfg.seed ^ 0x7472_6169_6e00);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut count = 0usize;
        for chunk in batches(train, &order, cfg.batch_size) {
            let batch = Batch::new(&chunk, pad)?;
            let n = batch.target_count();
            if n == 0 {
                continue;
            }
            let mut tape = Tape::new();
            let (loss, vars) = model.batch_loss(&mut tape, &batch)?;
            tape.backward(loss)?;
            total += tape.value(loss)[0] * n as f64;
            count += n;
            let mut params = model.trainable_mut();
            for (p, &v) in params.iter_mut().zip(&vars) {
                p.clear_grad();
                tape.write_grad(v, p);
            }
            adam.update(&mut params, cfg);
        }
        report.train_loss.push(total / count.max(1) as f64);
        let vl = mean_loss(model, val, cfg.batch_size, pad)?;
        if !vl.is_finite() {
            return Err(Error::Data(format!("validation loss diverged to {vl}")));
        }
        report.val_loss.push(vl);
        if selection == Selection::BestValidation
            && vl < report.val_loss[argmin(&report.val_loss[..report.val_loss.len() - 1])]
        {
            best = model.trainable().into_iter().cloned().collect();
        }
    }
    for p in model.trainable_mut() {
        p.clear_grad();
    }
    report.best_epoch = match selection {
        Selection::BestValidation => argmin(&report.val_loss),
        Selection::LastEpoch => cfg.epochs,
    };
    if selection == Selection::BestValidation {
        for (p, b) in model.trainable_mut().into_iter().zip(best) {
            p.data_mut().copy_from_slice(b.data());
        }
    }
    report.checkpoint_id = format!("epoch-{:02}", report.best_epoch);
    if model.frozen_bytes() != frozen_before {
        return Err(Error::FrozenViolation(
            "non-trainable weights changed during training".into(),
        ));
    }
    Ok(report)
}

/// Next-token training of an unfrozen base model on its whole corpus. The
/// validation curve is measured on a seeded `1 - split_ratio` probe of the
/// corpus (the corpus is the knowledge to store, so nothing is held out), and
/// the final weights are kept.
pub fn pretrain(
    model: &mut TransformerModel,
    corpus: &[Vec<TokenId>],
    cfg: &TrainConfig,
    pad: TokenId,
) -> Result<TrainReport> {
    if corpus.is_empty() {
        return Err(Error::Data("empty pretraining corpus".into()));
    }
    if model.is_frozen() {
        return Err(Error::FrozenViolation("cannot pretrain a frozen model".into()));
    }
    let all: Vec<Example> = corpus.iter().cloned().map(Example::full).collect();
    let probe = if all.len() >= 2 {
        split_dataset(&all, cfg.split_ratio, cfg.seed)?.1
    } else {
        all.clone()
    };
    fit(model, &all, &probe, cfg, pad, Selection::LastEpoch)
}

/// Trains only the bridges on `qa` (answer-span loss), split with
/// `cfg.split_ratio`. Returns with the lowest-validation-loss bridges loaded.
pub fn train_connector(cm: &mut ComposedModel, qa: &[Example], cfg: &TrainConfig, pad: TokenId) -> Result<TrainReport> {
    if qa.is_empty() {
        return Err(Error::Data("empty connector dataset".into()));
    }
    if !cm.anchor().is_frozen() || !cm.augment().is_frozen() {
        return Err(Error::FrozenViolation("anchor and augment must be frozen".into()));
    }
    let (train, val) = split_dataset(qa, cfg.split_ratio, cfg.seed)?;
    fit(
        &mut CachedComposed::new(cm),
        &train,
        &val,
        cfg,
        pad,
        Selection::BestValidation,
    )
}

/// Trains only the adapter matrices; otherwise as [`train_connector`].
pub fn train_lora(model: &mut LoraModel, qa: &[Example], cfg: &TrainConfig, pad: TokenId) -> Result<TrainReport> {
    if qa.is_empty() {
        return Err(Error::Data("empty LoRA dataset".into()));
    }
    if !model.anchor().is_frozen() {
        return Err(Error::FrozenViolation("anchor must be frozen".into()));
    }
    let (train, val) = split_dataset(qa, cfg.split_ratio, cfg.seed)?;
    fit(model, &train, &val, cfg, pad, Selection::BestValidation)
}

/// Central-difference step for [`connector_grad_check`]. Trained bridges have
/// query/key gradients near 1e-6, where a 1e-6 step leaves only a few
/// significant digits after cancellation; 1e-4 keeps the `O(step^2)`
/// truncation error far below the tolerance.
pub const CONNECTOR_GRAD_EPSILON: f64 = 1e-4;

/// Largest relative error [`connector_grad_check`] results are held to.
pub const CONNECTOR_GRAD_TOLERANCE: f64 = 1e-4;

/// Relative-error denominator floor for [`connector_grad_check`]. With a loss
/// near 1 and a 1e-4 step, rounding in the forward pass leaves about 1e-10 of
/// noise in each difference quotient, so saturated query/key coordinates with
/// gradients of 1e-16..1e-10 cannot be resolved relatively. Flooring at
/// `1e-10 / CONNECTOR_GRAD_TOLERANCE` holds them to an absolute error of 1e-10.
pub const CONNECTOR_GRAD_FLOOR: f64 = 1e-6;

/// Finite-difference check of the bridge gradients of the masked composed
/// loss on `examples` (one padded batch). Returns the worst relative error
/// over [`crate::tensor::GRAD_CHECK_SAMPLES`] coordinates per tensor.
pub fn connector_grad_check(
    cm: &ComposedModel,
    examples: &[Example],
    pad: TokenId,
    epsilon: f64,
) -> Result<GradCheckReport> {
    if examples.is_empty() {
        return Err(Error::Data("gradient check needs at least one example".into()));
    }
    let refs: Vec<&Example> = examples.iter().collect();
    let batch = Batch::new(&refs, pad)?;
    let states = cm.augment_states(&batch.inputs, batch.batch, batch.seq)?;
    let params: Vec<Tensor> = cm.trainable_tensors().into_iter().cloned().collect();
    let layout: Vec<bool> = cm.weights().iter().map(|w| w.proj.is_some()).collect();
    crate::tensor::grad_check_report(
        |tape, vars| {
            let mut it = vars.iter().copied();
            let mut next = || it.next().expect("one var per bridge tensor");
            let bridges: Vec<BoundCrossAttn> = layout
                .iter()
                .map(|&has_proj| BoundCrossAttn {
                    w_q: next(),
                    w_k: next(),
                    w_v: next(),
                    w_o: next(),
                    proj: has_proj.then(&mut next),
                })
                .collect();
            let (logits, _) = cm.forward_with(tape, &bridges, &batch.inputs, batch.batch, batch.seq, &states)?;
            tape.cross_entropy(logits, &batch.targets, IGNORE)
        },
        &params,
        epsilon,
        CONNECTOR_GRAD_FLOOR,
    )
}
