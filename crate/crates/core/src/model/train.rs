//! Adam training loop and confusion-matrix evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::net::Model;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seeds;

/// Single-channel images with class labels, stored as `[N, 1, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Samples<S> {
    pub data: Vec<S>,
    pub labels: Vec<usize>,
    pub height: usize,
    pub width: usize,
}

impl<S: Scalar> Samples<S> {
    pub fn new(height: usize, width: usize) -> Self {
        Self { data: Vec::new(), labels: Vec::new(), height, width }
    }

    pub fn push(&mut self, image: &[S], label: usize) -> Result<()> {
        if image.len() != self.height * self.width {
            return Err(Error::Data(format!(
                "image of {} values for a {}x{} set",
                image.len(),
                self.height,
                self.width
            )));
        }
        self.data.extend_from_slice(image);
        self.labels.push(label);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[S] {
        let n = self.height * self.width;
        &self.data[i * n..(i + 1) * n]
    }

    /// Gathers `indices` into an input tensor and its labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<S>, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * self.height * self.width);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let x = Tensor {
            shape: vec![indices.len(), 1, self.height, self.width],
            data,
        };
        (x, indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// Applies `f` to every image.
    pub fn map_images(&self, mut f: impl FnMut(usize, &[S]) -> Vec<S>) -> Self {
        let mut out = Self::new(self.height, self.width);
        for i in 0..self.len() {
            out.data.extend(f(i, self.image(i)));
            out.labels.push(self.labels[i]);
        }
        out
    }
}

/// Learning-rate schedule over the whole run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// `lr * (1 + cos(pi * k / K)) / 2` at step `k` of `K`.
    Cosine,
}

impl LrSchedule {
    /// Multiplier of the initial rate at step `k` of `total`.
    pub fn factor(self, k: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine => {
                0.5 * (1.0 + (std::f64::consts::PI * k as f64 / total.max(1) as f64).cos())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Initial learning rate.
    pub lr: f64,
    pub schedule: LrSchedule,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 0.00147,
            schedule: LrSchedule::Cosine,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
            batch_size: 256,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn toy() -> Self {
        Self { batch_size: 16, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.eps_adam <= 0.0 || self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("eps_adam, batch_size and epochs must be positive".into()));
        }
        Ok(())
    }
}

/// Adam with bias-corrected moments.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u32,
}

impl Adam {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps_adam,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u32 {
        self.t
    }

    pub fn step<S: Scalar>(&mut self, model: &mut Model<S>, grads: &[Tensor<S>]) {
        if self.m.is_empty() {
            self.m = model.params().iter().map(|p| vec![0.0; p.value.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (k, (p, g)) in model.params_mut().iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, (w, gi)) in p.value.data.iter_mut().zip(&g.data).enumerate() {
                let gi = gi.as_f64();
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let update = self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                *w = S::of(w.as_f64() - update);
            }
        }
    }
}

/// One optimization step on a batch; returns the batch loss and the number of
/// correctly classified samples.
pub fn train_step<S: Scalar>(
    model: &mut Model<S>,
    opt: &mut Adam,
    x: &Tensor<S>,
    labels: &[usize],
) -> Result<(f64, usize)> {
    let (loss, logits, grads) = model.loss_and_grads(x, labels)?;
    let correct = logits
        .argmax_rows()?
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    opt.step(model, &grads);
    Ok((loss, correct))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean loss over the training set before the first update.
    pub initial_loss: f64,
    pub epochs: Vec<EpochRecord>,
}

impl TrainReport {
    /// `epoch,train_loss,val_acc` rows; a missing validation accuracy is empty.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_acc\n");
        for e in &self.epochs {
            let va = e.val_acc.map(|v| format!("{v:.6}")).unwrap_or_default();
            s.push_str(&format!("{},{:.6},{}\n", e.epoch, e.train_loss, va));
        }
        s
    }

    pub fn final_val_acc(&self) -> Option<f64> {
        self.epochs.last().and_then(|e| e.val_acc)
    }
}

/// Mean cross-entropy over a sample set, evaluated in chunks.
pub fn mean_loss<S: Scalar>(model: &Model<S>, set: &Samples<S>, chunk: usize) -> Result<f64> {
    let mut total = 0.0;
    let idx: Vec<usize> = (0..set.len()).collect();
    for part in idx.chunks(chunk.max(1)) {
        let (x, labels) = set.batch(part);
        let probs = model.predict_proba(&x)?;
        let p: Vec<f64> = probs.data.iter().map(|v| v.as_f64()).collect();
        total += super::graph::cross_entropy(&p, &labels, model.config.num_classes) * part.len() as f64;
    }
    Ok(total / set.len() as f64)
}

/// Trains `model` in place. Batch order is a pure function of `cfg.seed` and
/// the epoch index.
pub fn train<S: Scalar>(
    model: &mut Model<S>,
    train_set: &Samples<S>,
    val_set: Option<&Samples<S>>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("empty training split".into()));
    }
    let initial_loss = mean_loss(model, train_set, 64)?;
    let mut opt = Adam::new(cfg);
    let total_steps = cfg.epochs * train_set.len().div_ceil(cfg.batch_size);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seeds::derive(cfg.seed, epoch as u64)));
        let (mut loss_sum, mut correct) = (0.0, 0);
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let (x, labels) = train_set.batch(batch);
            opt.lr = cfg.lr * cfg.schedule.factor(opt.steps() as usize, total_steps);
            let (loss, ok) = match train_step(model, &mut opt, &x, &labels) {
                Ok(r) => r,
                Err(Error::Numeric { .. }) => return Err(Error::Diverged { epoch, step }),
                Err(e) => return Err(e),
            };
            if !loss.is_finite() || !model.is_finite() {
                return Err(Error::Diverged { epoch, step });
            }
            loss_sum += loss * batch.len() as f64;
            correct += ok;
        }
        let val_acc = match val_set {
            Some(v) => Some(evaluate(model, v)?.accuracy()),
            None => None,
        };
        let n = train_set.len() as f64;
        let rec = EpochRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / n,
            train_acc: correct as f64 / n,
            val_acc,
        };
        log::info!(
            "epoch {} loss {:.4} train acc {:.3} val acc {:?}",
            rec.epoch,
            rec.train_loss,
            rec.train_acc,
            rec.val_acc
        );
        epochs.push(rec);
    }
    Ok(TrainReport { initial_loss, epochs })
}

/// Counts with rows = true class, columns = predicted class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self { classes, counts: vec![vec![0; classes]; classes] }
    }

    pub fn record(&mut self, truth: usize, predicted: usize) {
        self.counts[truth][predicted] += 1;
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sums(&self) -> Vec<usize> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn accuracy(&self) -> f64 {
        let diag: usize = (0..self.classes).map(|i| self.counts[i][i]).sum();
        diag as f64 / self.total().max(1) as f64
    }

    /// Recall of each class; `None` for classes without samples.
    pub fn per_class_accuracy(&self) -> Vec<Option<f64>> {
        self.counts
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let n: usize = row.iter().sum();
                (n > 0).then(|| row[i] as f64 / n as f64)
            })
            .collect()
    }

    /// CSV with a header row of predicted labels and one row per true label.
    pub fn to_csv(&self, labels: &[String]) -> String {
        let name = |i: usize| labels.get(i).cloned().unwrap_or_else(|| i.to_string());
        let mut s = String::from("true\\pred");
        for j in 0..self.classes {
            s.push(',');
            s.push_str(&name(j));
        }
        s.push('\n');
        for (i, row) in self.counts.iter().enumerate() {
            s.push_str(&name(i));
            for c in row {
                s.push_str(&format!(",{c}"));
            }
            s.push('\n');
        }
        s
    }
}

/// Confusion matrix of `model` on `set`.
pub fn evaluate<S: Scalar>(model: &Model<S>, set: &Samples<S>) -> Result<ConfusionMatrix> {
    if set.is_empty() {
        return Err(Error::Data("cannot evaluate an empty split".into()));
    }
    let k = model.config.num_classes;
    if let Some(&bad) = set.labels.iter().find(|&&l| l >= k) {
        return Err(Error::Data(format!("label {bad} outside {k} classes")));
    }
    let mut cm = ConfusionMatrix::new(k);
    let idx: Vec<usize> = (0..set.len()).collect();
    for part in idx.chunks(64) {
        let (x, labels) = set.batch(part);
        for (p, t) in model.logits(&x)?.argmax_rows()?.into_iter().zip(labels) {
            cm.record(t, p);
        }
    }
    Ok(cm)
}
