//! Classifier training: supervised-contrastive pretraining of the encoder,
//! then cross-entropy fine-tuning of the whole network, both with Adam and
//! a per-step cosine learning-rate schedule.
//!
//! Only [`SliceRecord`]s are accepted, so no segmentation mask can reach
//! these code paths.

mod augment;
mod schedule;
mod supcon;

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use augment::AugmentPolicy;
pub use schedule::{cosine_lr, Adam};
pub use supcon::{supcon_loss, supcon_loss_and_grad, EmbeddingBatch};

use crate::adapter::ClassifierHandle;
use crate::cam::softmax;
use crate::data::SliceRecord;
use crate::error::{Error, Result};
use crate::exec;
use crate::math;
use crate::nn::{Init, Linear, Network, Trace};
use crate::tensor::Tensor3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub temperature: f64,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub accuracy_gate: f64,
    /// Output width of the contrastive projection head.
    pub projection_dim: usize,
    /// Start fine-tuning from a zeroed classification head.
    pub zero_init_head: bool,
    pub augment: AugmentPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            initial_lr: 1e-4,
            min_lr: 5e-6,
            weight_decay: 1e-5,
            temperature: 0.07,
            pretrain_epochs: 2,
            finetune_epochs: 10,
            batch_size: 32,
            seed: 0,
            accuracy_gate: 0.9,
            projection_dim: 32,
            zero_init_head: true,
            augment: AugmentPolicy::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_lr > 0.0 && self.min_lr <= self.initial_lr && self.initial_lr.is_finite()) {
            return Err(Error::Validation(format!(
                "learning rates must satisfy 0 < min_lr ({}) <= initial_lr ({})",
                self.min_lr, self.initial_lr
            )));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Validation("temperature must be positive".into()));
        }
        if !(self.accuracy_gate > 0.0 && self.accuracy_gate < 1.0) {
            return Err(Error::Validation("accuracy gate must lie in (0, 1)".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Validation("weight decay must be non-negative".into()));
        }
        if self.batch_size == 0 || self.projection_dim == 0 {
            return Err(Error::Validation("batch size and projection width must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Finetune,
}

/// One optimizer step. `accuracy` is the batch accuracy during fine-tuning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub phase: Phase,
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub entries: Vec<LogEntry>,
}

impl TrainingLog {
    pub fn phase(&self, phase: Phase) -> impl Iterator<Item = &LogEntry> {
        self.entries.iter().filter(move |e| e.phase == phase)
    }

    /// Mean loss of each epoch of `phase`.
    pub fn epoch_losses(&self, phase: Phase) -> Vec<f64> {
        let mut out: Vec<(f64, usize)> = Vec::new();
        for e in self.phase(phase) {
            if out.len() <= e.epoch {
                out.resize(e.epoch + 1, (0.0, 0));
            }
            out[e.epoch].0 += e.loss;
            out[e.epoch].1 += 1;
        }
        out.into_iter().map(|(s, n)| s / n.max(1) as f64).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateStatus {
    Passed,
    /// Test accuracy did not exceed the gate; CAM quality is not meaningful.
    BelowGate,
}

pub struct Pretrained {
    pub encoder: ClassifierHandle,
    pub projection: Linear,
    pub log: TrainingLog,
}

pub struct Finetuned {
    pub classifier: ClassifierHandle,
    pub test_accuracy: f64,
    pub gate: GateStatus,
    pub log: TrainingLog,
}

fn check_records(records: &[SliceRecord], net: &Network) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Validation("no training records".into()));
    }
    let k = net.num_classes();
    if let Some(r) = records.iter().find(|r| r.label as usize >= k) {
        return Err(Error::ClassIndex {
            index: r.label as usize,
            num_classes: k,
        });
    }
    records.iter().try_for_each(|r| net.check_input(&r.image))
}

fn batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

fn total_steps(n: usize, config: &TrainConfig, epochs: usize) -> usize {
    epochs * n.div_ceil(config.batch_size)
}

/// Adds every tensor of `g` into `acc`.
fn accumulate(acc: &mut Network, g: &Network) {
    for (a, b) in acc.params_mut().into_iter().zip(g.params()) {
        a.values.iter_mut().zip(b.values).for_each(|(x, y)| *x += y);
    }
}

/// Backpropagates per-sample pooled-feature gradients through the stages
/// and sums the parameter gradients into `grads`, in sample order.
fn backprop_features(net: &Network, traces: &[Trace], d_pooled: &[Vec<f64>], grads: &mut Network) {
    let pairs: Vec<(&Trace, &Vec<f64>)> = traces.iter().zip(d_pooled).collect();
    let per_sample = exec::map(&pairs, |(t, d)| {
        let mut g = net.zeros_like();
        net.features_backward(t, d, None, Some(&mut g));
        g
    });
    for g in &per_sample {
        accumulate(grads, g);
    }
}

fn traces(net: &Network, images: &[Tensor3]) -> Result<Vec<Trace>> {
    exec::map(images, |x| net.trace(x)).into_iter().collect()
}

fn adam_step(opt: &mut Adam, lr: f64, net: &mut Network, grads: &Network, extra: Option<(&mut Linear, &Linear)>) {
    let mut slots: Vec<(&mut [f64], &[f64])> = net
        .params_mut()
        .into_iter()
        .zip(grads.params())
        .filter(|(p, _)| p.trainable)
        .map(|(p, g)| (p.values.as_mut_slice(), g.values))
        .collect();
    if let Some((lin, g)) = extra {
        slots.push((lin.weight.as_mut_slice(), g.weight.as_slice()));
        slots.push((lin.bias.as_mut_slice(), g.bias.as_slice()));
    }
    opt.step(lr, slots);
}

fn l2_normalize(u: &[f64]) -> (Vec<f64>, f64) {
    let n = math::sqrt(u.iter().map(|v| v * v).sum::<f64>()).max(1e-12);
    (u.iter().map(|v| v / n).collect(), n)
}

/// SupCon loss of a fixed set of images under `encoder` + `projection`,
/// each image acting as its own view (no augmentation).
pub fn supcon_eval_loss(
    encoder: &Network,
    projection: &Linear,
    images: &[Tensor3],
    labels: &[usize],
    temperature: f64,
) -> Result<f64> {
    let rows: Vec<Vec<f64>> = exec::map(images, |x| encoder.features(x))
        .into_iter()
        .map(|f| f.map(|f| l2_normalize(&projection.forward(&f)).0))
        .collect::<Result<_>>()?;
    supcon_loss(&EmbeddingBatch::new(&rows, labels)?, temperature)
}

/// Builds the projection head used during pretraining.
pub fn projection_head(encoder: &Network, config: &TrainConfig) -> Linear {
    let mut proj = Linear::new("projection", encoder.head.in_features, config.projection_dim);
    Init::new(config.seed ^ 0x5eed_0001).linear(&mut proj);
    proj
}

/// Contrastive pretraining of the encoder on two augmented views of every
/// training slice. The classification head is left untouched.
pub fn pretrain_supcon(config: &TrainConfig, network: Network, records: &[SliceRecord]) -> Result<Pretrained> {
    config.validate()?;
    check_records(records, &network)?;
    let mut net = network;
    let mut proj = projection_head(&net, config);
    let mut log = TrainingLog::default();
    let mut opt = Adam::new(config.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0002);
    let last = total_steps(records.len(), config, config.pretrain_epochs).saturating_sub(1);
    let mut step = 0;
    for epoch in 0..config.pretrain_epochs {
        for batch in batches(records.len(), config.batch_size, &mut rng) {
            let mut images = Vec::with_capacity(2 * batch.len());
            let mut labels = Vec::with_capacity(2 * batch.len());
            for &i in &batch {
                for _ in 0..2 {
                    images.push(config.augment.apply(&records[i].image, &mut rng));
                    labels.push(records[i].label as usize);
                }
            }
            let tr = traces(&net, &images)?;
            let mut us = Vec::with_capacity(tr.len());
            let mut rows = Vec::with_capacity(tr.len());
            for t in &tr {
                let u = proj.forward(&t.pooled);
                let (z, n) = l2_normalize(&u);
                rows.push(z);
                us.push(n);
            }
            let emb = EmbeddingBatch::new(&rows, &labels)?;
            let (loss, dz) = supcon_loss_and_grad(&emb, config.temperature)
                .map_err(|e| match e {
                    Error::Diverged(m) => Error::Diverged(format!("pretrain epoch {epoch} step {step}: {m}")),
                    other => other,
                })?;
            let d = config.projection_dim;
            let mut gproj = Linear::new("projection", proj.in_features, d);
            let mut d_pooled = Vec::with_capacity(tr.len());
            for (i, t) in tr.iter().enumerate() {
                let z = &rows[i];
                let g = &dz[i * d..(i + 1) * d];
                let zg: f64 = z.iter().zip(g).map(|(a, b)| a * b).sum();
                let du: Vec<f64> = z.iter().zip(g).map(|(zk, gk)| (gk - zk * zg) / us[i]).collect();
                d_pooled.push(proj.backward(&t.pooled, &du, Some(&mut gproj)));
            }
            let mut grads = net.zeros_like();
            backprop_features(&net, &tr, &d_pooled, &mut grads);
            let lr = cosine_lr(step, last, config.initial_lr, config.min_lr)?;
            adam_step(&mut opt, lr, &mut net, &grads, Some((&mut proj, &gproj)));
            log.entries.push(LogEntry {
                phase: Phase::Pretrain,
                epoch,
                step,
                lr,
                loss,
                accuracy: None,
            });
            step += 1;
        }
    }
    Ok(Pretrained {
        encoder: ClassifierHandle::new(net),
        projection: proj,
        log,
    })
}

/// Mean cross-entropy and per-sample logit gradients (already divided by
/// the batch size), plus the number of correct argmax predictions.
pub fn cross_entropy(logits: &[Vec<f64>], labels: &[usize]) -> (f64, Vec<Vec<f64>>, usize) {
    let b = logits.len() as f64;
    let mut loss = 0.0;
    let mut correct = 0;
    let mut grads = Vec::with_capacity(logits.len());
    for (l, &y) in logits.iter().zip(labels) {
        let p = softmax(l).expect("finite logits");
        loss -= math::log(p[y].max(1e-300));
        let pred = argmax(l);
        correct += (pred == y) as usize;
        let mut g: Vec<f64> = p.iter().map(|v| v / b).collect();
        g[y] -= 1.0 / b;
        grads.push(g);
    }
    (loss / b, grads, correct)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Cross-entropy fine-tuning of every trainable parameter, followed by the
/// accuracy gate on `test`.
pub fn finetune_classifier(
    config: &TrainConfig,
    encoder: ClassifierHandle,
    train: &[SliceRecord],
    test: &[SliceRecord],
) -> Result<Finetuned> {
    config.validate()?;
    let mut net = encoder.into_network();
    check_records(train, &net)?;
    if config.zero_init_head && config.finetune_epochs > 0 {
        net.head.weight.iter_mut().for_each(|w| *w = 0.0);
        net.head.bias.iter_mut().for_each(|w| *w = 0.0);
    }
    let mut log = TrainingLog::default();
    let mut opt = Adam::new(config.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0003);
    let last = total_steps(train.len(), config, config.finetune_epochs).saturating_sub(1);
    let mut step = 0;
    for epoch in 0..config.finetune_epochs {
        for batch in batches(train.len(), config.batch_size, &mut rng) {
            let images: Vec<Tensor3> = batch.iter().map(|&i| train[i].image.clone()).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| train[i].label as usize).collect();
            let tr = traces(&net, &images)?;
            let logits: Vec<Vec<f64>> = tr.iter().map(|t| t.logits.clone()).collect();
            let (loss, d_logits, correct) = cross_entropy(&logits, &labels);
            if !loss.is_finite() {
                return Err(Error::Diverged(format!("finetune epoch {epoch} step {step}: loss is {loss}")));
            }
            let mut grads = net.zeros_like();
            let d_pooled: Vec<Vec<f64>> = tr
                .iter()
                .zip(&d_logits)
                .map(|(t, d)| net.head_backward(t, d, Some(&mut grads)))
                .collect();
            backprop_features(&net, &tr, &d_pooled, &mut grads);
            let lr = cosine_lr(step, last, config.initial_lr, config.min_lr)?;
            adam_step(&mut opt, lr, &mut net, &grads, None);
            log.entries.push(LogEntry {
                phase: Phase::Finetune,
                epoch,
                step,
                lr,
                loss,
                accuracy: Some(correct as f64 / batch.len() as f64),
            });
            step += 1;
        }
    }
    let classifier = ClassifierHandle::new(net);
    let test_accuracy = evaluate_accuracy(&classifier, test)?;
    let gate = if test_accuracy > config.accuracy_gate {
        GateStatus::Passed
    } else {
        GateStatus::BelowGate
    };
    Ok(Finetuned {
        classifier,
        test_accuracy,
        gate,
        log,
    })
}

/// Pretraining followed by fine-tuning, with the two logs concatenated.
pub fn train_classifier(
    config: &TrainConfig,
    network: Network,
    train: &[SliceRecord],
    test: &[SliceRecord],
) -> Result<Finetuned> {
    let pre = pretrain_supcon(config, network, train)?;
    let mut out = finetune_classifier(config, pre.encoder, train, test)?;
    let mut log = pre.log;
    log.entries.append(&mut out.log.entries);
    out.log = log;
    Ok(out)
}

/// Fraction of records whose argmax prediction equals the label.
pub fn evaluate_accuracy(handle: &ClassifierHandle, records: &[SliceRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Validation("cannot evaluate accuracy on an empty set".into()));
    }
    let preds = exec::map(records, |r| handle.forward(&r.image).map(|l| l.argmax()));
    let mut correct = 0;
    for (p, r) in preds.into_iter().zip(records) {
        correct += (p? == r.label as usize) as usize;
    }
    Ok(correct as f64 / records.len() as f64)
}
