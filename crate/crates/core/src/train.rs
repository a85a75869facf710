//! Minibatch training: Adam, a plateau learning-rate schedule on validation
//! GAP, and early stopping.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{pad_record, PaddedVideo, VideoRecord};
use crate::encoder::{Gradients, Model, Parameterized};
use crate::error::{Error, Result};
use crate::metrics::{self, Prediction};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    /// Iterations between validation events.
    pub eval_every: usize,
    /// Validation events without improvement before stopping.
    pub early_stop_patience: usize,
    pub lr_factor: f64,
    /// Validation events without improvement before the learning rate drops.
    pub lr_patience: usize,
    pub max_iters: usize,
    /// Shuffling seed. Not read from config files; experiments set it from
    /// their top-level seed.
    #[serde(skip)]
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-4,
            batch_size: 64,
            eval_every: 10_000,
            early_stop_patience: 5,
            lr_factor: 0.1,
            lr_patience: 3,
            max_iters: 100_000,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("eval_every", self.eval_every),
            ("early_stop_patience", self.early_stop_patience),
            ("lr_patience", self.lr_patience),
            ("max_iters", self.max_iters),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(name, "must be >= 1"));
            }
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config("lr", "must be positive"));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return Err(Error::config("lr_factor", "must be in (0, 1)"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(name, "must be in [0, 1)"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::config("adam_eps", "must be positive"));
        }
        Ok(())
    }
}

/// Adam with bias-corrected moments.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &Gradients) {
        assert_eq!(params.len(), grads.0.len(), "parameter/gradient count mismatch");
        if self.m.is_empty() {
            self.m = grads.0.iter().map(|g| Tensor::zeros(g.shape())).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (((p, g), m), v) in params
            .into_iter()
            .zip(&grads.0)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            let pd = p.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            for (k, &gk) in g.data().iter().enumerate() {
                md[k] = self.beta1 * md[k] + (1.0 - self.beta1) * gk;
                vd[k] = self.beta2 * vd[k] + (1.0 - self.beta2) * gk * gk;
                let m_hat = md[k] / c1;
                let v_hat = vd[k] / c2;
                pd[k] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Multiplies the learning rate by `factor` once the monitored metric (higher
/// is better) has failed to improve for `patience` consecutive evaluations.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    pub factor: f64,
    pub patience: usize,
    best: f64,
    bad_evals: usize,
}

impl PlateauScheduler {
    pub fn new(factor: f64, patience: usize) -> Self {
        PlateauScheduler {
            factor,
            patience,
            best: f64::NEG_INFINITY,
            bad_evals: 0,
        }
    }

    /// Returns the learning rate to use from now on.
    pub fn observe(&mut self, metric: f64, lr: f64) -> f64 {
        if metric > self.best {
            self.best = metric;
            self.bad_evals = 0;
            return lr;
        }
        self.bad_evals += 1;
        if self.bad_evals >= self.patience {
            self.bad_evals = 0;
            lr * self.factor
        } else {
            lr
        }
    }
}

#[derive(Debug, Clone)]
pub struct EarlyStopping {
    pub patience: usize,
    best: f64,
    bad_evals: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::NEG_INFINITY,
            bad_evals: 0,
        }
    }

    /// Records a metric; returns `(improved, should_stop)`.
    pub fn observe(&mut self, metric: f64) -> (bool, bool) {
        if metric > self.best {
            self.best = metric;
            self.bad_evals = 0;
            (true, false)
        } else {
            self.bad_evals += 1;
            (false, self.bad_evals >= self.patience)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iter: usize,
    /// Mean training loss since the previous evaluation.
    pub loss: f64,
    pub val_gap: f64,
    /// Learning rate after this evaluation's scheduler step.
    pub lr: f64,
    pub best: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: Vec<LogRecord>,
    pub best: Model,
    pub best_val_gap: f64,
    pub best_iter: usize,
    pub iters: usize,
    pub stopped_early: bool,
}

/// Scores for every record, in input order.
pub fn predict_all(model: &Model, records: &[PaddedVideo]) -> Result<Vec<Prediction>> {
    records
        .par_iter()
        .map(|r| {
            Ok(Prediction {
                scores: model.predict(r)?,
                labels: r.labels.clone(),
            })
        })
        .collect()
}

/// Mean loss and summed-then-averaged gradient over a batch. Items run in
/// parallel; the reduction is in item order, so results match a serial run bit
/// for bit.
pub fn batch_loss_and_grads(model: &Model, batch: &[&PaddedVideo]) -> Result<(f64, Gradients)> {
    let per_item: Vec<(f64, Gradients)> = batch
        .par_iter()
        .map(|v| model.loss_and_grads(v))
        .collect::<Result<_>>()?;
    let mut total = Gradients::zeros_for(model);
    let mut loss = 0.0;
    for (l, g) in &per_item {
        loss += l;
        total.accumulate(g);
    }
    let k = 1.0 / batch.len() as f64;
    total.scale(k);
    Ok((loss * k, total))
}

fn diverged(e: Error, iter: usize) -> Error {
    match e {
        Error::NonFinite(op) => Error::Diverged {
            iter,
            reason: format!("non-finite values in {op}"),
        },
        other => other,
    }
}

pub fn train(
    mut model: Model,
    train_set: &[VideoRecord],
    val_set: &[VideoRecord],
    cfg: &TrainConfig,
    on_eval: &mut dyn FnMut(&LogRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::config("data", "training set is empty"));
    }
    if val_set.is_empty() {
        return Err(Error::config("data", "validation set is empty"));
    }
    let frames = model.config.max_frames;
    let train_padded: Vec<PaddedVideo> = train_set.iter().map(|r| pad_record(r, frames)).collect();
    let val_padded: Vec<PaddedVideo> = val_set.iter().map(|r| pad_record(r, frames)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_padded.len()).collect();
    let mut cursor = order.len();

    let mut adam = Adam::new(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps);
    let mut scheduler = PlateauScheduler::new(cfg.lr_factor, cfg.lr_patience);
    let mut stopper = EarlyStopping::new(cfg.early_stop_patience);

    let mut log = Vec::new();
    let mut best = model.clone();
    let mut best_gap = f64::NEG_INFINITY;
    let mut best_iter = 0;
    let mut loss_sum = 0.0;
    let mut loss_count = 0usize;
    let mut stopped_early = false;
    let mut iter = 0;

    while iter < cfg.max_iters {
        let mut batch: Vec<&PaddedVideo> = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(train_padded.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&train_padded[order[cursor]]);
            cursor += 1;
        }
        iter += 1;
        let (loss, grads) = batch_loss_and_grads(&model, &batch).map_err(|e| diverged(e, iter))?;
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::Diverged {
                iter,
                reason: format!("loss {loss}"),
            });
        }
        adam.step(model.params_mut(), &grads);
        loss_sum += loss;
        loss_count += 1;

        if iter % cfg.eval_every == 0 || iter == cfg.max_iters {
            let preds = predict_all(&model, &val_padded).map_err(|e| diverged(e, iter))?;
            let val_gap = metrics::gap(&preds, metrics::GAP_TOP_K)?;
            let (improved, stop) = stopper.observe(val_gap);
            if improved {
                best = model.clone();
                best_gap = val_gap;
                best_iter = iter;
            }
            adam.lr = scheduler.observe(val_gap, adam.lr);
            let rec = LogRecord {
                iter,
                loss: loss_sum / loss_count as f64,
                val_gap,
                lr: adam.lr,
                best: improved,
            };
            on_eval(&rec);
            log.push(rec);
            loss_sum = 0.0;
            loss_count = 0;
            if stop {
                stopped_early = true;
                break;
            }
        }
    }
    Ok(TrainOutcome {
        log,
        best,
        best_val_gap: best_gap,
        best_iter,
        iters: iter,
        stopped_early,
    })
}
