//! AdaGrad training and accuracy evaluation.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph};
use crate::model::{argmax, cross_entropy, Model, TrainConfig};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::text::batch::make_batches;
use crate::text::dataset::EncodedExample;

/// One AdaGrad update of a single coordinate.
pub fn adagrad_update(param: &mut f64, grad: f64, acc: &mut f64, lr: f64, eps: f64) {
    *acc += grad * grad;
    *param -= lr * grad / (acc.sqrt() + eps);
}

/// Per-parameter squared-gradient accumulators.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaGrad {
    pub learning_rate: f64,
    pub epsilon: f64,
    acc: Vec<Tensor>,
}

impl AdaGrad {
    pub fn new(store: &ParamStore, learning_rate: f64, epsilon: f64) -> Self {
        AdaGrad {
            learning_rate,
            epsilon,
            acc: store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn accumulator(&self, id: ParamId) -> &Tensor {
        &self.acc[id.index()]
    }

    /// Updates every parameter that has a gradient, except those in `frozen`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, frozen: &[ParamId]) {
        for (id, g) in grads.iter() {
            if frozen.contains(&id) {
                continue;
            }
            let acc = self.acc[id.index()].data_mut();
            let p = store.get_mut(id).data_mut();
            for ((p, a), &g) in p.iter_mut().zip(acc.iter_mut()).zip(g.data()) {
                adagrad_update(p, g, a, self.learning_rate, self.epsilon);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochMetric {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
}

/// Seed of the batch shuffle in `epoch` (1-based).
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(epoch as u64)
}

/// Trains `model` in place. Emits a `train` metric every epoch (online
/// loss and accuracy over the epoch's batches) and a `dev` metric every
/// `eval_every` epochs when `dev` is given.
pub fn train(
    model: &mut Model,
    data: &[EncodedExample],
    dev: Option<&[EncodedExample]>,
    config: &TrainConfig,
    mut on_metric: impl FnMut(&EpochMetric),
) -> Result<Vec<EpochMetric>> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyInput("training set is empty".into()));
    }
    let frozen = if config.fine_tune_embeddings {
        vec![]
    } else {
        vec![model.embedding]
    };
    let mut opt = AdaGrad::new(&model.store, config.learning_rate, config.adagrad_epsilon);
    let mut metrics = Vec::new();
    for epoch in 1..=config.epochs {
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (b, batch) in make_batches(data, config.batch_size, epoch_seed(model.config.seed, epoch))?
            .iter()
            .enumerate()
        {
            let grads = {
                let mut g = Graph::new(&model.store);
                let mut losses = Vec::with_capacity(batch.len());
                for r in 0..batch.len() {
                    let view = batch.example(r);
                    let (loss, probs) = model.example_loss(&mut g, &view)?;
                    if argmax(g.value(probs).data()) == view.label {
                        correct += 1;
                    }
                    loss_sum += g.value(loss).data()[0];
                    losses.push(loss);
                }
                let total = g.mean(&losses)?;
                let value = g.value(total).data()[0];
                if !value.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "loss {value} in epoch {epoch}, batch {b} (examples {:?})",
                        batch.indices
                    )));
                }
                g.backward(total)?
            };
            opt.step(&mut model.store, &grads, &frozen);
        }
        let m = EpochMetric {
            epoch,
            split: "train".into(),
            loss: loss_sum / data.len() as f64,
            accuracy: correct as f64 / data.len() as f64,
        };
        on_metric(&m);
        metrics.push(m);
        if let Some(dev) = dev.filter(|d| !d.is_empty()) {
            if epoch % config.eval_every == 0 || epoch == config.epochs {
                let r = evaluate(model, dev, 1)?;
                let m = EpochMetric {
                    epoch,
                    split: "dev".into(),
                    loss: r.loss,
                    accuracy: r.accuracy,
                };
                on_metric(&m);
                metrics.push(m);
            }
        }
    }
    Ok(metrics)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub n: usize,
    pub correct: usize,
    /// Mean cross-entropy.
    pub loss: f64,
    /// `confusion[gold][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

impl EvalReport {
    /// Recall of each class; `None` for classes absent from the data.
    pub fn recalls(&self) -> Vec<Option<f64>> {
        self.confusion
            .iter()
            .enumerate()
            .map(|(k, row)| {
                let n: usize = row.iter().sum();
                (n > 0).then(|| row[k] as f64 / n as f64)
            })
            .collect()
    }
}

fn predict_all(model: &Model, data: &[EncodedExample]) -> Result<Vec<(usize, f64)>> {
    data.iter()
        .map(|ex| {
            let p = model.predict(ex)?;
            Ok((argmax(&p), cross_entropy(&p, ex.label)))
        })
        .collect()
}

/// Argmax accuracy. With `workers > 1` examples are split into contiguous
/// shards scored on separate threads; the result does not depend on the
/// worker count.
pub fn evaluate(model: &Model, data: &[EncodedExample], workers: usize) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Contract("cannot evaluate on an empty dataset".into()));
    }
    let k = model.config.num_classes;
    if let Some(ex) = data.iter().find(|e| e.label >= k) {
        return Err(Error::Contract(format!(
            "label {} out of range for {k} classes",
            ex.label
        )));
    }
    let workers = workers.clamp(1, data.len());
    let preds: Vec<(usize, f64)> = if workers == 1 {
        predict_all(model, data)?
    } else {
        let chunk = data.len().div_ceil(workers);
        std::thread::scope(|s| {
            let handles: Vec<_> = data
                .chunks(chunk)
                .map(|part| s.spawn(move || predict_all(model, part)))
                .collect();
            let mut all = Vec::with_capacity(data.len());
            for h in handles {
                all.extend(h.join().expect("evaluation worker panicked")?);
            }
            Ok::<_, Error>(all)
        })?
    };
    let mut confusion = vec![vec![0usize; k]; k];
    let mut loss = 0.0;
    for (ex, (pred, l)) in data.iter().zip(&preds) {
        confusion[ex.label][*pred] += 1;
        loss += l;
    }
    let correct = (0..k).map(|c| confusion[c][c]).sum();
    Ok(EvalReport {
        accuracy: correct as f64 / data.len() as f64,
        n: data.len(),
        correct,
        loss: loss / data.len() as f64,
        confusion,
    })
}
