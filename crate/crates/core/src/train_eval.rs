//! SGD with momentum, the training loop and classification metrics.

use crate::config::{parse_bool, parse_value};
use crate::data_io::DatasetBatch;
use crate::error::{Error, Result};
use crate::layers::{softmax_xent, Layer, LayerParams, Mode};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
            batch_size: 32,
            epochs: 10,
            seed: 0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be non-negative, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight_decay must be non-negative, got {}", self.weight_decay)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }

    /// Applies one `key = value` setting. Returns `false` for keys that are
    /// not training settings.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "lr" => self.lr = parse_value(key, value)?,
            "momentum" => self.momentum = parse_value(key, value)?,
            "weight_decay" => self.weight_decay = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "shuffle" => self.shuffle = parse_bool(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_text(&self) -> String {
        format!(
            "lr = {}\nmomentum = {}\nweight_decay = {}\nbatch_size = {}\nepochs = {}\nseed = {}\nshuffle = {}\n",
            self.lr, self.momentum, self.weight_decay, self.batch_size, self.epochs, self.seed, self.shuffle
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub loss: f64,
    pub accuracy: f64,
    pub per_class_accuracy: Vec<f64>,
    pub per_class_correct: Vec<usize>,
    pub per_class_total: Vec<usize>,
}

impl Metrics {
    fn from_counts(loss: f64, correct: Vec<usize>, total: Vec<usize>) -> Self {
        let n: usize = total.iter().sum();
        let hits: usize = correct.iter().sum();
        Self {
            loss,
            accuracy: if n == 0 { 0.0 } else { hits as f64 / n as f64 },
            per_class_accuracy: correct
                .iter()
                .zip(&total)
                .map(|(&c, &t)| if t == 0 { 0.0 } else { c as f64 / t as f64 })
                .collect(),
            per_class_correct: correct,
            per_class_total: total,
        }
    }
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// SGD with momentum and L2 weight decay.
///
/// `v <- momentum * v + grad + weight_decay * w`, then `w <- w - lr * v`.
/// Gradients are zeroed after every step.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    velocities: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step(&mut self, params: Vec<&mut LayerParams>, cfg: &TrainConfig) -> Result<()> {
        let mut slots = 0;
        for p in params {
            let parts = std::iter::once((&mut p.weights, &mut p.grad_weights))
                .chain(p.bias.as_mut().zip(p.grad_bias.as_mut()));
            for (w, g) in parts {
                if self.velocities.len() == slots {
                    self.velocities.push(vec![0.0; w.len()]);
                }
                let v = &mut self.velocities[slots];
                if v.len() != w.len() {
                    return Err(Error::shape("optimizer state does not match the parameters".to_string()));
                }
                for ((vi, wi), gi) in v.iter_mut().zip(w.data_mut()).zip(g.data_mut()) {
                    *vi = cfg.momentum * *vi + *gi + cfg.weight_decay * *wi;
                    *wi -= cfg.lr * *vi;
                    *gi = 0.0;
                    if !wi.is_finite() {
                        return Err(Error::NonFinite("SGD update".into()));
                    }
                }
                slots += 1;
            }
        }
        Ok(())
    }
}

/// One [`Sgd::step`], for callers that keep the optimizer state themselves.
pub fn sgd_step(params: Vec<&mut LayerParams>, opt: &mut Sgd, cfg: &TrainConfig) -> Result<()> {
    opt.step(params, cfg)
}

fn diverged(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::NonFinite(_) => Error::TrainingDiverged { epoch, batch },
        other => other,
    }
}

/// One pass over `data` in mini-batches.
///
/// The visiting order is a shuffle drawn from `SplitMix64::stream(seed,
/// epoch)` when `cfg.shuffle` is set. The returned loss is the sample-mean
/// of the per-batch losses and the accuracy is measured on the training-mode
/// logits of each batch before its update.
pub fn train_epoch(
    model: &mut dyn Layer,
    opt: &mut Sgd,
    data: &DatasetBatch,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<Metrics> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset("training set".into()));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    if cfg.shuffle {
        SplitMix64::stream(cfg.seed, epoch as u64).shuffle(&mut order);
    }
    let k = data.classes();
    let mut correct = vec![0; k];
    let mut total = vec![0; k];
    let mut loss_sum = 0.0;
    for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
        let (x, labels) = data.gather(chunk);
        let mut step = || -> Result<f64> {
            model.params_mut().into_iter().for_each(LayerParams::zero_grads);
            let logits = model.forward(&x, Mode::Train)?;
            let (loss, grad) = softmax_xent(&logits, &labels)?;
            tally(&logits, &labels, &mut correct, &mut total)?;
            model.backward(&grad)?;
            opt.step(model.params_mut(), cfg)?;
            Ok(loss)
        };
        let loss = step().map_err(|e| diverged(e, epoch, b))?;
        loss_sum += loss * chunk.len() as f64;
    }
    Ok(Metrics::from_counts(loss_sum / data.len() as f64, correct, total))
}

fn tally(logits: &Tensor, labels: &[usize], correct: &mut [usize], total: &mut [usize]) -> Result<()> {
    let k = logits.shape()[1];
    if k != correct.len() {
        return Err(Error::shape(format!("{k} logits for {} classes", correct.len())));
    }
    for (row, &label) in logits.data().chunks(k).zip(labels) {
        total[label] += 1;
        if argmax(row) == label {
            correct[label] += 1;
        }
    }
    Ok(())
}

/// Inference-mode loss and accuracy, evaluated in batches of `batch_size`.
pub fn evaluate(model: &mut dyn Layer, data: &DatasetBatch, batch_size: usize) -> Result<Metrics> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("evaluation set".into()));
    }
    let k = data.classes();
    let mut correct = vec![0; k];
    let mut total = vec![0; k];
    let mut loss_sum = 0.0;
    let order: Vec<usize> = (0..data.len()).collect();
    for chunk in order.chunks(batch_size.max(1)) {
        let (x, labels) = data.gather(chunk);
        let logits = model.forward(&x, Mode::Infer)?;
        let (loss, _) = softmax_xent(&logits, &labels)?;
        tally(&logits, &labels, &mut correct, &mut total)?;
        loss_sum += loss * chunk.len() as f64;
    }
    Ok(Metrics::from_counts(loss_sum / data.len() as f64, correct, total))
}

pub const LOG_HEADER: &str = "epoch\ttrain_loss\ttrain_acc\tval_loss\tval_acc";

/// One tab-separated log line; validation columns are `NaN` when absent.
pub fn log_line(epoch: usize, train: &Metrics, val: Option<&Metrics>) -> String {
    let (vl, va) = val.map_or((f64::NAN, f64::NAN), |m| (m.loss, m.accuracy));
    format!("{epoch}\t{:.6}\t{:.6}\t{vl:.6}\t{va:.6}", train.loss, train.accuracy)
}

/// Runs `cfg.epochs` epochs, calling `on_epoch` after each one.
pub fn fit(
    model: &mut dyn Layer,
    train: &DatasetBatch,
    val: Option<&DatasetBatch>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &Metrics, Option<&Metrics>),
) -> Result<Vec<Metrics>> {
    let mut opt = Sgd::new();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let m = train_epoch(model, &mut opt, train, cfg, epoch)?;
        let v = val.map(|v| evaluate(model, v, cfg.batch_size)).transpose()?;
        on_epoch(epoch, &m, v.as_ref());
        history.push(m);
    }
    Ok(history)
}

/// Wraps a classifier so that its forward output is the cross-entropy on
/// fixed labels, for checking whole models against finite differences.
///
/// The output holds `2N` terms, `lse_i / N` then `-z_{i,y_i} / N`, whose sum
/// is the mean loss. Keeping the two halves of each per-sample loss apart
/// exposes their magnitudes, which cancel inside the scalar loss. Pass
/// `&mut model` to keep ownership.
pub struct LossProbe<L: Layer> {
    pub model: L,
    pub labels: Vec<usize>,
    softmax: Option<Tensor>,
}

impl<L: Layer> LossProbe<L> {
    pub fn new(model: L, labels: Vec<usize>) -> Self {
        Self {
            model,
            labels,
            softmax: None,
        }
    }

    /// Mean cross-entropy, the sum of the forward terms.
    pub fn loss(terms: &Tensor) -> f64 {
        terms.sum()
    }
}

impl<L: Layer> Layer for LossProbe<L> {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let logits = self.model.forward(x, mode)?;
        // validates shapes and labels
        softmax_xent(&logits, &self.labels)?;
        let (n, k) = (self.labels.len(), logits.shape()[1]);
        let mut terms = vec![0.0; 2 * n];
        let mut softmax = vec![0.0; n * k];
        for (i, (row, &label)) in logits.data().chunks(k).zip(&self.labels).enumerate() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let log_z = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            terms[i] = log_z / n as f64;
            terms[n + i] = -row[label] / n as f64;
            for (s, &v) in softmax[i * k..(i + 1) * k].iter_mut().zip(row) {
                *s = (v - log_z).exp();
            }
        }
        self.softmax = Some(Tensor::from_vec(vec![n, k], softmax)?);
        Tensor::from_vec(vec![2 * n], terms)
    }

    fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let softmax = self.softmax.take().ok_or(Error::StaleCache)?;
        let n = self.labels.len();
        let k = softmax.shape()[1];
        if upstream.len() != 2 * n {
            return Err(Error::shape(format!("upstream has {} terms, expected {}", upstream.len(), 2 * n)));
        }
        let u = upstream.data();
        let mut grad = softmax.into_data();
        for (i, &label) in self.labels.iter().enumerate() {
            let row = &mut grad[i * k..(i + 1) * k];
            row.iter_mut().for_each(|g| *g *= u[i] / n as f64);
            row[label] -= u[n + i] / n as f64;
        }
        self.model.backward(&Tensor::from_vec(vec![n, k], grad)?)
    }

    fn params(&self) -> Vec<&LayerParams> {
        self.model.params()
    }

    fn params_mut(&mut self) -> Vec<&mut LayerParams> {
        self.model.params_mut()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(w: f64, g: f64) -> LayerParams {
        let mut p = LayerParams::new(Tensor::new(&[1], &[w]).unwrap(), None);
        p.grad_weights.data_mut()[0] = g;
        p
    }

    fn cfg(lr: f64, momentum: f64, weight_decay: f64) -> TrainConfig {
        TrainConfig {
            lr,
            momentum,
            weight_decay,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn plain_step() {
        let mut p = one(1.0, 0.5);
        Sgd::new().step(vec![&mut p], &cfg(0.1, 0.0, 0.0)).unwrap();
        assert!((p.weights.data()[0] - 0.95).abs() < 1e-15);
        assert_eq!(p.grad_weights.data()[0], 0.0);
    }

    #[test]
    fn momentum_recurrence() {
        let c = cfg(0.1, 0.9, 0.0);
        let mut opt = Sgd::new();
        let mut p = one(0.0, 2.0);
        opt.step(vec![&mut p], &c).unwrap();
        p.grad_weights.data_mut()[0] = 2.0;
        opt.step(vec![&mut p], &c).unwrap();
        assert!((opt.velocities[0][0] - 1.9 * 2.0).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_step() {
        let mut p = one(1.0, 0.0);
        Sgd::new().step(vec![&mut p], &cfg(0.1, 0.0, 0.1)).unwrap();
        assert!((p.weights.data()[0] - 0.99).abs() < 1e-15);
    }

    #[test]
    fn non_finite_update() {
        let mut p = one(1.0, f64::INFINITY);
        assert!(matches!(
            Sgd::new().step(vec![&mut p], &cfg(0.1, 0.0, 0.0)),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn argmax_first_tie() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0; 7]), 0);
    }

    #[test]
    fn config_keys() {
        let mut c = TrainConfig::default();
        assert!(c.set("lr", "0.5").unwrap());
        assert!(c.set("shuffle", "false").unwrap());
        assert!(!c.set("colour", "red").unwrap());
        assert!(c.set("epochs", "x").is_err());
        assert_eq!(c.lr, 0.5);
        c.momentum = 1.0;
        assert!(c.validate().is_err());
    }
}
