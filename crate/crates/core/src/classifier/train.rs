use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::metrics::{metrics_from_scores, MetricsReport};
use super::model::{stack_signals, Classifier};
use crate::error::{Error, Result};
use crate::nn::{Adam, EarlyStop, Graph, Real, Tensor, Var};
use crate::record::{Dataset, EcgRecord};
use crate::rng;

/// Per-epoch training record.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub wall_time_s: f64,
}

impl History {
    pub fn epochs(&self) -> usize {
        self.train_loss.len()
    }

    /// Equality ignoring wall time.
    pub fn same_trajectory(&self, other: &Self) -> bool {
        self.train_loss == other.train_loss
            && self.val_loss == other.val_loss
            && self.best_epoch == other.best_epoch
            && self.stopped_early == other.stopped_early
    }
}

enum Inputs<'d, S: Real> {
    Records(Vec<&'d EcgRecord>),
    Features(Tensor<S>),
}

impl<S: Real> Inputs<'_, S> {
    fn len(&self) -> usize {
        match self {
            Inputs::Records(r) => r.len(),
            Inputs::Features(t) => t.dim(0),
        }
    }

    fn logits(&self, model: &Classifier<S>, g: &mut Graph<S>, idx: &[usize]) -> Result<Var> {
        match self {
            Inputs::Records(r) => {
                let batch: Vec<&EcgRecord> = idx.iter().map(|&i| r[i]).collect();
                let x = g.input(stack_signals(&batch, model.leads, model.length)?);
                model.forward(g, x)
            }
            Inputs::Features(t) => {
                let w = t.dim(1);
                let mut data = Vec::with_capacity(idx.len() * w);
                for &i in idx {
                    data.extend_from_slice(&t.data()[i * w..(i + 1) * w]);
                }
                let x = g.input(Tensor::new(&[idx.len(), w], data)?);
                model.head(g, x)
            }
        }
    }
}

fn labels_of(ds: &Dataset) -> Vec<usize> {
    ds.records().iter().map(|r| r.label.id()).collect()
}

fn check_labels(labels: &[usize], n_classes: usize) -> Result<()> {
    match labels.iter().find(|&&l| l >= n_classes) {
        Some(&bad) => Err(Error::Index {
            index: bad,
            bound: n_classes,
        }),
        None => Ok(()),
    }
}

fn mean_loss<S: Real>(model: &Classifier<S>, inputs: &Inputs<S>, labels: &[usize]) -> Result<f64> {
    let n = inputs.len();
    let bs = model.config.batch_size * 4;
    let mut total = 0.0;
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(bs) {
        let mut g = Graph::new(&model.store, false, 0);
        let logits = inputs.logits(model, &mut g, chunk)?;
        let targets: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
        let l = g.cross_entropy(logits, &targets)?;
        total += g.value(l).item() * chunk.len() as f64;
    }
    Ok(total / n.max(1) as f64)
}

#[allow(clippy::too_many_arguments)]
fn fit<S: Real>(
    model: &mut Classifier<S>,
    train: &Inputs<S>,
    train_labels: &[usize],
    val: &Inputs<S>,
    val_labels: &[usize],
    lr: f64,
    max_epochs: usize,
    seed: u64,
) -> Result<History> {
    let start = Instant::now();
    let n = train.len();
    if n == 0 {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let cfg = model.config.clone();
    let mut adam = Adam::new(lr);
    let mut stop = EarlyStop::new(cfg.patience, cfg.min_delta);
    let mut best = model.store.values();
    let mut history = History::default();
    model.store.zero_grad();
    for epoch in 0..max_epochs {
        let order = rng::permutation(&mut rng::child(seed, epoch as u64), n);
        let mut epoch_loss = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let grads = {
                let mut g = Graph::new(&model.store, true, rng::mix(seed, ((epoch as u64) << 24) | b as u64));
                let logits = train.logits(model, &mut g, chunk)?;
                let targets: Vec<usize> = chunk.iter().map(|&i| train_labels[i]).collect();
                let loss = g.cross_entropy(logits, &targets)?;
                epoch_loss += g.value(loss).item() * chunk.len() as f64;
                g.backward(loss)
            };
            model.store.accumulate(&grads);
            adam.step(&mut model.store)?;
        }
        let train_loss = epoch_loss / n as f64;
        let val_loss = if val.len() > 0 {
            mean_loss(model, val, val_labels)?
        } else {
            train_loss
        };
        if !val_loss.is_finite() {
            return Err(Error::Numeric(format!("validation loss at epoch {epoch}")));
        }
        history.train_loss.push(train_loss);
        history.val_loss.push(val_loss);
        if stop.observe(val_loss) {
            best = model.store.values();
            history.best_epoch = epoch;
        }
        log::debug!("epoch {epoch}: train {train_loss:.4} val {val_loss:.4}");
        if stop.should_stop() {
            history.stopped_early = true;
            break;
        }
    }
    model.store.restore(&best);
    history.wall_time_s = start.elapsed().as_secs_f64();
    Ok(history)
}

fn warn_missing_classes(ds: &Dataset, n_classes: usize) {
    let present = ds.class_counts().len();
    if present < n_classes {
        log::warn!("training set covers {present} of {n_classes} classes");
    }
}

/// Trains all parameters with early stopping on `val` (or on the training
/// loss when `val` is empty) and restores the best epoch's weights.
pub fn train_classifier<S: Real>(model: &mut Classifier<S>, train: &Dataset, val: &Dataset, seed: u64) -> Result<History> {
    let (tl, vl) = (labels_of(train), labels_of(val));
    check_labels(&tl, model.config.n_classes)?;
    check_labels(&vl, model.config.n_classes)?;
    warn_missing_classes(train, model.config.n_classes);
    let ti = Inputs::Records(train.records().iter().collect());
    let vi = Inputs::Records(val.records().iter().collect());
    let (lr, epochs) = (model.config.lr, model.config.max_epochs);
    fit(model, &ti, &tl, &vi, &vl, lr, epochs, seed)
}

/// Like [`train_classifier`] with explicit class indices instead of
/// rhythm labels (e.g. real-vs-synthetic discrimination).
pub fn train_on_labels<S: Real>(
    model: &mut Classifier<S>,
    train: &[&EcgRecord],
    train_labels: &[usize],
    val: &[&EcgRecord],
    val_labels: &[usize],
    seed: u64,
) -> Result<History> {
    if train.len() != train_labels.len() || val.len() != val_labels.len() {
        return Err(Error::shape("labels", [train.len(), val.len()], [train_labels.len(), val_labels.len()]));
    }
    check_labels(train_labels, model.config.n_classes)?;
    check_labels(val_labels, model.config.n_classes)?;
    let ti = Inputs::Records(train.to_vec());
    let vi = Inputs::Records(val.to_vec());
    let (lr, epochs) = (model.config.lr, model.config.max_epochs);
    fit(model, &ti, train_labels, &vi, val_labels, lr, epochs, seed)
}

/// Freezes the conv trunk and retrains only the dense head at `lr`. The
/// trunk carries no stochastic layers, so its features are computed once
/// and reused across epochs.
pub fn fine_tune_head<S: Real>(model: &mut Classifier<S>, train: &Dataset, val: &Dataset, lr: f64, seed: u64) -> Result<History> {
    let start = Instant::now();
    let head = model.head_layer_names();
    let head_refs: Vec<&str> = head.iter().map(String::as_str).collect();
    model.store.freeze_all_except(&head_refs)?;
    let (tl, vl) = (labels_of(train), labels_of(val));
    check_labels(&tl, model.config.n_classes)?;
    check_labels(&vl, model.config.n_classes)?;
    let train_recs: Vec<&EcgRecord> = train.records().iter().collect();
    let val_recs: Vec<&EcgRecord> = val.records().iter().collect();
    let ti = Inputs::Features(model.features(&train_recs)?);
    let vi = Inputs::Features(model.features(&val_recs)?);
    let epochs = model.config.max_epochs;
    let mut h = fit(model, &ti, &tl, &vi, &vl, lr, epochs, seed)?;
    h.wall_time_s = start.elapsed().as_secs_f64();
    Ok(h)
}

/// Scores the model on `test`. Wall time is left at 0 for the caller.
pub fn evaluate<S: Real>(model: &Classifier<S>, test: &Dataset) -> Result<MetricsReport> {
    let recs: Vec<&EcgRecord> = test.records().iter().collect();
    let scores = model.predict_scores(&recs)?;
    let truth = labels_of(test);
    check_labels(&truth, model.config.n_classes)?;
    Ok(metrics_from_scores(&scores, &truth, model.config.n_classes))
}

/// Fraction of `ds` classified correctly.
pub fn accuracy<S: Real>(model: &Classifier<S>, ds: &Dataset) -> Result<f64> {
    Ok(evaluate(model, ds)?.accuracy)
}
