use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::rng::rng_from;
use crate::tape::Tape;

use super::dataset::{Sample, ShapesDataset};
use super::model::{ForwardOptions, Model};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 6,
            lr: 1e-3,
            batch_size: 32,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct TrainLog {
    /// Entry 0 is the untrained model (loss is NaN there).
    pub epochs: Vec<EpochLog>,
    pub final_loss: f64,
}

impl TrainLog {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("epoch\tmean_loss\tval_accuracy\n");
        for e in &self.epochs {
            s.push_str(&format!("{}\t{:.6}\t{:.4}\n", e.epoch, e.mean_loss, e.val_accuracy));
        }
        s
    }
}

/// Fraction of `samples` whose argmax prediction equals the label.
pub fn accuracy(model: &Model, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(f64::NAN);
    }
    let x = ShapesDataset::batch(samples)?;
    let logits = model.logits(&x)?;
    let k = model.spec().classes();
    let hits = samples
        .iter()
        .enumerate()
        .filter(|(i, s)| argmax(&logits.data()[i * k..(i + 1) * k]) == s.label)
        .count();
    Ok(hits as f64 / samples.len() as f64)
}

pub(crate) fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Minibatch Adam on cross-entropy over `dataset.train`, one seeded shuffle
/// per epoch. Aborts on a non-finite loss.
pub fn train(model: &Model, dataset: &ShapesDataset, cfg: &TrainConfig) -> Result<(Model, TrainLog)> {
    if dataset.train.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::InvalidArgument("batch size and learning rate must be positive".into()));
    }
    if dataset.config.classes != model.spec().classes() {
        return Err(Error::InvalidArgument(format!(
            "dataset has {} classes, model {}",
            dataset.config.classes,
            model.spec().classes()
        )));
    }
    let mut model = model.clone();
    let mut adam = Adam::new(cfg.lr);
    let mut log = TrainLog::default();
    log.epochs.push(EpochLog {
        epoch: 0,
        mean_loss: f64::NAN,
        val_accuracy: accuracy(&model, &dataset.val)?,
    });
    let mut order: Vec<usize> = (0..dataset.train.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng_from(cfg.seed, &[0x7EA1, epoch as u64]));
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let x = ShapesDataset::batch(chunk.iter().map(|&i| &dataset.train[i]))?;
            let y: Vec<usize> = chunk.iter().map(|&i| dataset.train[i].label).collect();
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true);
            let xv = tape.constant(x);
            let logits = model.forward(&mut tape, &bound, xv, ForwardOptions::default())?;
            let loss = tape.cross_entropy(logits, &y)?;
            let lv = tape.value(loss).item()? as f64;
            if !lv.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss became {lv} at epoch {epoch}, batch {batches}"
                )));
            }
            tape.backward(loss)?;
            let grads: Vec<_> = bound
                .vars()
                .flat_map(|(_, w, b)| [tape.grad(w).cloned(), tape.grad(b).cloned()])
                .collect();
            let mut params: Vec<&mut crate::tensor::Tensor<f32>> = model
                .params_mut()
                .iter_mut()
                .flatten()
                .flat_map(|p| [&mut p.weight, &mut p.bias])
                .collect();
            let grad_refs: Vec<_> = grads.iter().map(Option::as_ref).collect();
            adam.step(&mut params, &grad_refs);
            total += lv;
            batches += 1;
        }
        let mean_loss = total / batches as f64;
        log.final_loss = mean_loss;
        log.epochs.push(EpochLog {
            epoch,
            mean_loss,
            val_accuracy: accuracy(&model, &dataset.val)?,
        });
    }
    Ok((model, log))
}
