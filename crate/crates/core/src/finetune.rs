//! Tuning schemes, the frozen/tunable partition, Adam/AdamW with an
//! optional cosine-with-warmup schedule, and the training/evaluation loops.
//!
//! The central safety property: a parameter outside the tunable set never
//! receives a gradient and is never touched by the optimizer, so frozen
//! tensors are bitwise invariant under training.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Layer, Model, ParamId};
use crate::tensor::Tensor;

/// Which parameter family a scheme tunes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SchemeVariant {
    /// Head only; backbone frozen.
    LinearProbe,
    /// Filter atoms D (+ head).
    AtomsOnly,
    /// Filter atoms D and Kronecker block atoms B (+ head).
    AtomsPlusLinear,
    /// Overcomplete (beta, D1) and Kronecker block atoms B (+ head).
    OvercompletePlusLinear,
    /// Zero-init LoRA adapters on the dense convs (+ head).
    LoRABaseline { r: usize },
    /// Every dense parameter.
    FullFinetune,
}

impl SchemeVariant {
    pub fn name(&self) -> String {
        match self {
            SchemeVariant::LinearProbe => "linear-probe".into(),
            SchemeVariant::AtomsOnly => "atoms-only".into(),
            SchemeVariant::AtomsPlusLinear => "atoms-plus-linear".into(),
            SchemeVariant::OvercompletePlusLinear => "overcomplete-plus-linear".into(),
            SchemeVariant::LoRABaseline { r } => format!("lora-baseline(r={r})"),
            SchemeVariant::FullFinetune => "full-finetune".into(),
        }
    }
}

/// A scheme plus the bias/norm tuning flags; defaults keep both frozen so
/// the tunable counts match the closed-form accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TuningScheme {
    pub variant: SchemeVariant,
    pub tune_bias: bool,
    pub tune_norm: bool,
}

impl TuningScheme {
    pub fn new(variant: SchemeVariant) -> Self {
        TuningScheme {
            variant,
            tune_bias: false,
            tune_norm: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    Adam,
    AdamW,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Schedule {
    Constant,
    CosineWithWarmup { warmup_epochs: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub schedule: Schedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            weight_decay: 0.0,
            epochs: 10,
            batch_size: 32,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            schedule: Schedule::Constant,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument("learning_rate must be finite and >= 0".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidArgument("weight_decay must be finite and >= 0".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("epochs and batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Labeled image set held in memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Tensor, // (n, c, h, w)
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::ShapeMismatch("images must be (n, c, h, w)".into()));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} images vs {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Dataset {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Borrow sample i as a (c, h, w) tensor (copies the slice).
    pub fn sample(&self, i: usize) -> Tensor {
        let (c, h, w) = (
            self.images.shape()[1],
            self.images.shape()[2],
            self.images.shape()[3],
        );
        let chw = c * h * w;
        Tensor::new(
            vec![c, h, w],
            self.images.data()[i * chw..(i + 1) * chw].to_vec(),
        )
        .expect("sample slice")
    }
}

/// The frozen/tunable split of a model under a scheme.
#[derive(Debug, Clone)]
pub struct Partition {
    pub tunable: BTreeSet<ParamId>,
    pub frozen: BTreeSet<ParamId>,
    /// Scalar counts per tunable id, in id order.
    pub counts: BTreeMap<ParamId, usize>,
}

impl Partition {
    pub fn tunable_count(&self) -> usize {
        self.counts.values().sum()
    }
}

/// Decide which parameters a scheme tunes. Errors if the scheme needs a
/// decomposition the model does not have.
pub fn freeze_partition(model: &Model, scheme: &TuningScheme) -> Result<Partition> {
    let all: BTreeSet<ParamId> = model.param_ids().into_iter().collect();
    let mut tunable = BTreeSet::new();
    tunable.insert(ParamId::HeadWeight);
    tunable.insert(ParamId::HeadBias);

    let mut has_atoms = false;
    let mut has_over = false;
    let mut has_kron = false;
    let mut has_lora = false;
    let mut has_dense_conv = false;
    for (idx, layer) in model.layers.iter().enumerate() {
        match layer {
            Layer::Decomposed(_) => has_atoms = true,
            Layer::Overcomplete(_) => has_over = true,
            Layer::Kron { .. } => has_kron = true,
            Layer::Conv { lora, .. } => {
                has_dense_conv = true;
                if lora.is_some() {
                    has_lora = true;
                }
            }
            _ => {}
        }
        let _ = idx;
    }

    let mismatch = |missing: &str| Error::SchemeMismatch {
        scheme: scheme.variant.name(),
        missing: missing.into(),
    };
    match scheme.variant {
        SchemeVariant::LinearProbe => {}
        SchemeVariant::AtomsOnly => {
            if !has_atoms && !has_over {
                return Err(mismatch("decomposed conv layers"));
            }
            for (idx, layer) in model.layers.iter().enumerate() {
                match layer {
                    Layer::Decomposed(_) => {
                        tunable.insert(ParamId::Atoms(idx));
                    }
                    // overcomplete layers expose (beta, D1) as their atom
                    // parameters; there is no separate D to tune
                    Layer::Overcomplete(_) => {
                        tunable.insert(ParamId::Beta(idx));
                        tunable.insert(ParamId::SubAtoms(idx));
                    }
                    _ => {}
                }
            }
        }
        SchemeVariant::AtomsPlusLinear => {
            if !has_atoms {
                return Err(mismatch("decomposed conv layers"));
            }
            if !has_kron {
                return Err(mismatch("a Kronecker-factored linear layer"));
            }
            for (idx, layer) in model.layers.iter().enumerate() {
                match layer {
                    Layer::Decomposed(_) => {
                        tunable.insert(ParamId::Atoms(idx));
                    }
                    Layer::Kron { .. } => {
                        tunable.insert(ParamId::KronB(idx));
                    }
                    _ => {}
                }
            }
        }
        SchemeVariant::OvercompletePlusLinear => {
            if !has_over {
                return Err(mismatch("overcomplete conv layers"));
            }
            if !has_kron {
                return Err(mismatch("a Kronecker-factored linear layer"));
            }
            for (idx, layer) in model.layers.iter().enumerate() {
                match layer {
                    Layer::Overcomplete(_) => {
                        tunable.insert(ParamId::Beta(idx));
                        tunable.insert(ParamId::SubAtoms(idx));
                    }
                    Layer::Kron { .. } => {
                        tunable.insert(ParamId::KronB(idx));
                    }
                    _ => {}
                }
            }
        }
        SchemeVariant::LoRABaseline { .. } => {
            if !has_lora {
                return Err(mismatch("LoRA adapters on dense conv layers"));
            }
            for (idx, layer) in model.layers.iter().enumerate() {
                if let Layer::Conv { lora: Some(_), .. } = layer {
                    tunable.insert(ParamId::LoraDown(idx));
                    tunable.insert(ParamId::LoraUp(idx));
                }
            }
        }
        SchemeVariant::FullFinetune => {
            if !has_dense_conv {
                return Err(mismatch("dense conv layers"));
            }
            for id in &all {
                tunable.insert(*id);
            }
        }
    }
    if scheme.tune_bias || scheme.variant == SchemeVariant::FullFinetune {
        for id in &all {
            if matches!(id, ParamId::ConvBias(_) | ParamId::KronBias(_)) {
                tunable.insert(*id);
            }
        }
    }
    if scheme.tune_norm || scheme.variant == SchemeVariant::FullFinetune {
        for id in &all {
            if matches!(id, ParamId::NormGain(_) | ParamId::NormBias(_)) {
                tunable.insert(*id);
            }
        }
    }

    let mut counts = BTreeMap::new();
    for id in &tunable {
        let t = model
            .param(*id)
            .ok_or_else(|| Error::InvalidArgument(format!("{id:?} missing from model")))?;
        counts.insert(*id, t.len());
    }
    let frozen: BTreeSet<ParamId> = all.difference(&tunable).copied().collect();
    Ok(Partition {
        tunable,
        frozen,
        counts,
    })
}

/// Adam / AdamW over the tunable set, with deterministic (id-ordered)
/// state iteration. beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
pub struct Optimizer {
    kind: OptimizerKind,
    weight_decay: f64,
    step: u64,
    state: BTreeMap<ParamId, (Tensor, Tensor)>, // (m, v)
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, weight_decay: f64) -> Self {
        Optimizer {
            kind,
            weight_decay,
            step: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update over the given gradients. Only parameters present in
    /// `grads` are touched; `grads` must be a subset of the tunable set.
    pub fn step(
        &mut self,
        model: &mut Model,
        grads: &BTreeMap<ParamId, Tensor>,
        tunable: &BTreeSet<ParamId>,
        lr: f64,
    ) -> Result<()> {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.step += 1;
        let t = self.step;
        let bias1 = 1.0 - B1.powi(t as i32);
        let bias2 = 1.0 - B2.powi(t as i32);
        for (id, g) in grads {
            if !tunable.contains(id) {
                return Err(Error::FrozenWrite(format!("{id:?}")));
            }
            let shape = g.shape().to_vec();
            let (m, v) = self
                .state
                .entry(*id)
                .or_insert_with(|| (Tensor::zeros(&shape), Tensor::zeros(&shape)));
            let p = model
                .param_mut(*id)
                .ok_or_else(|| Error::InvalidArgument(format!("{id:?} missing from model")))?;
            if p.shape() != g.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "gradient {:?} vs parameter {:?} for {id:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            let decay = self.weight_decay;
            for i in 0..g.len() {
                let mut gi = g.data()[i] as f64;
                let pi = p.data()[i] as f64;
                if decay > 0.0 && matches!(self.kind, OptimizerKind::Adam) {
                    // L2-style decay folded into the gradient
                    gi += decay * pi;
                }
                let mi = B1 * m.data()[i] as f64 + (1.0 - B1) * gi;
                let vi = B2 * v.data()[i] as f64 + (1.0 - B2) * gi * gi;
                m.data_mut()[i] = mi as f32;
                v.data_mut()[i] = vi as f32;
                let mhat = mi / bias1;
                let vhat = vi / bias2;
                let mut next = pi - lr * mhat / (vhat.sqrt() + EPS);
                if decay > 0.0 && matches!(self.kind, OptimizerKind::AdamW) {
                    // decoupled decay, applied to tunables only
                    next -= lr * decay * pi;
                }
                p.data_mut()[i] = next as f32;
            }
        }
        Ok(())
    }
}

/// Learning rate at optimizer step `step` of `total_steps`.
pub fn scheduled_lr(cfg: &TrainConfig, steps_per_epoch: usize, step: u64) -> f64 {
    match cfg.schedule {
        Schedule::Constant => cfg.learning_rate,
        Schedule::CosineWithWarmup { warmup_epochs } => {
            let warmup = (warmup_epochs * steps_per_epoch) as f64;
            let total = (cfg.epochs * steps_per_epoch) as f64;
            let s = step as f64;
            if warmup > 0.0 && s < warmup {
                cfg.learning_rate * (s + 1.0) / warmup
            } else {
                let span = (total - warmup).max(1.0);
                let frac = ((s - warmup) / span).clamp(0.0, 1.0);
                cfg.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

/// Softmax cross-entropy for one sample: (loss, dloss/dlogits, argmax).
/// Argmax ties break toward the lowest index.
pub fn cross_entropy(logits: &Tensor, label: usize) -> (f64, Tensor, usize) {
    let k = logits.len();
    let mx = logits
        .data()
        .iter()
        .fold(f64::NEG_INFINITY, |a, &b| a.max(b as f64));
    let mut z = 0.0f64;
    let mut exps = vec![0.0f64; k];
    for i in 0..k {
        exps[i] = ((logits.data()[i] as f64) - mx).exp();
        z += exps[i];
    }
    let mut grad = Tensor::zeros(&[k]);
    for i in 0..k {
        grad.data_mut()[i] = (exps[i] / z) as f32;
    }
    grad.data_mut()[label] -= 1.0;
    let loss = -(exps[label] / z).ln();
    let mut best = 0;
    for i in 1..k {
        if logits.data()[i] > logits.data()[best] {
            best = i;
        }
    }
    (loss, grad, best)
}

/// One epoch record of the training history.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub eval_accuracy: Option<f64>,
    pub eval_loss: Option<f64>,
    pub learning_rate: f64,
}

/// Train `model` in place under `scheme`. Shuffles per epoch from the run
/// seed; gradients are averaged over each batch in sample order, so the
/// result is deterministic. Returns the per-epoch history.
pub fn train(
    model: &mut Model,
    data: &Dataset,
    eval: Option<&Dataset>,
    scheme: &TuningScheme,
    cfg: &TrainConfig,
) -> Result<Vec<EpochRecord>> {
    train_with(model, data, eval, scheme, cfg, |_, _| Ok(()))
}

/// [`train`] with a per-epoch observer (checkpointing, logging).
pub fn train_with(
    model: &mut Model,
    data: &Dataset,
    eval: Option<&Dataset>,
    scheme: &TuningScheme,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&Model, &EpochRecord) -> Result<()>,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    if data.num_classes != model.num_classes() {
        return Err(Error::ShapeMismatch(format!(
            "dataset has {} classes, model head has {}",
            data.num_classes,
            model.num_classes()
        )));
    }
    let partition = freeze_partition(model, scheme)?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = data.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        let mut last_lr = cfg.learning_rate;
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut batch_grads: BTreeMap<ParamId, Tensor> = BTreeMap::new();
            let inv = 1.0 / batch.len() as f32;
            let mut batch_loss = 0.0f64;
            for &i in batch {
                let x = data.sample(i);
                let (logits, caches, feat) = model.forward_sample(&x)?;
                let (loss, mut grad_logits, pred) = cross_entropy(&logits, data.labels[i]);
                if !loss.is_finite() {
                    return Err(Error::NonFinite {
                        iteration: batch_idx,
                        context: format!("training loss in epoch {epoch}"),
                    });
                }
                batch_loss += loss;
                if pred == data.labels[i] {
                    correct += 1;
                }
                grad_logits.scale(inv);
                let grads =
                    model.backward_sample(&caches, &feat, &grad_logits, &partition.tunable)?;
                for (id, g) in grads {
                    match batch_grads.get_mut(&id) {
                        Some(acc) => acc.add_assign(&g)?,
                        None => {
                            batch_grads.insert(id, g);
                        }
                    }
                }
            }
            loss_sum += batch_loss;
            let lr = scheduled_lr(cfg, steps_per_epoch, opt.steps_taken());
            last_lr = lr;
            if cfg.learning_rate > 0.0 {
                opt.step(model, &batch_grads, &partition.tunable, lr)?;
            }
        }
        let (eval_accuracy, eval_loss) = match eval {
            Some(set) => {
                let (acc, loss) = evaluate(model, set)?;
                (Some(acc), Some(loss))
            }
            None => (None, None),
        };
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / n as f64,
            train_accuracy: correct as f64 / n as f64,
            eval_accuracy,
            eval_loss,
            learning_rate: last_lr,
        };
        on_epoch(model, &record)?;
        history.push(record);
    }
    Ok(history)
}

/// Accuracy (argmax, ties to the lowest index) and mean loss.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation set".into()));
    }
    let mut correct = 0usize;
    let mut loss_sum = 0.0f64;
    for i in 0..data.len() {
        let x = data.sample(i);
        let (logits, _, _) = model.forward_sample(&x)?;
        let (loss, _, pred) = cross_entropy(&logits, data.labels[i]);
        loss_sum += loss;
        if pred == data.labels[i] {
            correct += 1;
        }
    }
    Ok((correct as f64 / data.len() as f64, loss_sum / data.len() as f64))
}

/// Bitwise snapshot of a set of parameters, for frozen-conservation checks.
pub fn snapshot(model: &Model, ids: &BTreeSet<ParamId>) -> BTreeMap<ParamId, Vec<u32>> {
    let mut out = BTreeMap::new();
    for id in ids {
        if let Some(t) = model.param(*id) {
            out.insert(*id, t.data().iter().map(|v| v.to_bits()).collect());
        }
    }
    out
}

/// All ids whose current bits differ from the snapshot.
pub fn changed_since(model: &Model, snap: &BTreeMap<ParamId, Vec<u32>>) -> Vec<ParamId> {
    let mut changed = Vec::new();
    for (id, bits) in snap {
        let now: Vec<u32> = model
            .param(*id)
            .map(|t| t.data().iter().map(|v| v.to_bits()).collect())
            .unwrap_or_default();
        if &now != bits {
            changed.push(*id);
        }
    }
    changed
}
