//! Mini-batch training with early stopping, plus evaluation metrics.

mod adamw;

pub use adamw::{AdamW, AdamWConfig};

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{NewsItem, LABEL_FAKE};
use crate::error::{Error, Result};
use crate::model::{MatchCache, MmcanModel};
use crate::params::{derive_seed, ParamStore, Session};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Upper bound on epochs.
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub lambda_kl: f64,
    /// Stop after this many consecutive epochs without a strict improvement
    /// in validation accuracy.
    pub patience: usize,
    pub seed: u64,
    /// Treat the peer distribution in each KL term as a constant.
    pub detach_peer: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 80,
            batch_size: 64,
            lr: 1e-3,
            weight_decay: 0.01,
            lambda_kl: 0.01,
            patience: 10,
            seed: 0,
            detach_peer: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(
                "lr must be positive and weight_decay non-negative".into(),
            ));
        }
        if !(self.lambda_kl >= 0.0) {
            return Err(Error::Config(format!("lambda_kl must be >= 0, got {}", self.lambda_kl)));
        }
        Ok(())
    }
}

/// Binary classification metrics with "fake" as the positive class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision_fake: f64,
    pub recall_fake: f64,
    pub f1_fake: f64,
    pub precision_real: f64,
    pub recall_real: f64,
    pub f1_real: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

impl Metrics {
    /// From confusion counts. Undefined ratios are reported as 0.
    pub fn from_counts(tp: usize, fp: usize, fn_: usize, tn: usize) -> Self {
        let precision_fake = ratio(tp, tp + fp);
        let recall_fake = ratio(tp, tp + fn_);
        let precision_real = ratio(tn, tn + fn_);
        let recall_real = ratio(tn, tn + fp);
        Metrics {
            accuracy: ratio(tp + tn, tp + fp + fn_ + tn),
            precision_fake,
            recall_fake,
            f1_fake: f1(precision_fake, recall_fake),
            precision_real,
            recall_real,
            f1_real: f1(precision_real, recall_real),
        }
    }

    pub fn from_labels(predicted: &[u8], truth: &[u8]) -> Self {
        let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
        for (&p, &t) in predicted.iter().zip(truth) {
            match (p == LABEL_FAKE, t == LABEL_FAKE) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => tn += 1,
            }
        }
        Self::from_counts(tp, fp, fn_, tn)
    }

    /// Mean of the two per-class F1 scores.
    pub fn average_f1(&self) -> f64 {
        (self.f1_fake + self.f1_real) / 2.0
    }

    pub const CSV_HEADER: &'static str =
        "accuracy,precision_fake,recall_fake,f1_fake,precision_real,recall_real,f1_real";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.accuracy,
            self.precision_fake,
            self.recall_fake,
            self.f1_fake,
            self.precision_real,
            self.recall_real,
            self.f1_real
        )
    }
}

pub fn evaluate_metrics(model: &MmcanModel, items: &[NewsItem], cache: &MatchCache) -> Result<Metrics> {
    if items.is_empty() {
        return Err(Error::EmptyDataset("evaluation set"));
    }
    let refs: Vec<&NewsItem> = items.iter().collect();
    let preds = model.predict(&refs, cache)?;
    let predicted: Vec<u8> = preds.iter().map(|p| p.label).collect();
    let truth: Vec<u8> = items.iter().map(|it| it.label).collect();
    Ok(Metrics::from_labels(&predicted, &truth))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val: Metrics,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose weights were kept.
    pub best_epoch: usize,
}

impl History {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut body = String::from("epoch,train_loss,val_accuracy,val_f1_fake,val_f1_real\n");
        for r in &self.epochs {
            body.push_str(&format!(
                "{},{},{},{},{}\n",
                r.epoch, r.train_loss, r.val.accuracy, r.val.f1_fake, r.val.f1_real
            ));
        }
        f.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Trains `model` in place. On return the model holds the weights of the
/// epoch with the best validation accuracy (earliest on ties).
///
/// `observer` sees each epoch's record as it completes.
pub fn fit(
    model: &mut MmcanModel,
    train: &[NewsItem],
    val: &[NewsItem],
    cfg: &TrainConfig,
    mut observer: impl FnMut(&EpochRecord),
) -> Result<History> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset("training set"));
    }
    if val.is_empty() {
        return Err(Error::EmptyDataset("validation set"));
    }
    let cache = model.precompute_matching(train.iter().chain(val))?;
    let mut opt = AdamW::new(
        &model.store,
        AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
    );

    let mut history = History::default();
    let mut best: Option<(f64, ParamStore)> = None;
    let mut stale = 0usize;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, epoch as u64]));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let items: Vec<&NewsItem> = chunk.iter().map(|&i| &train[i]).collect();
            let batch = model.make_batch(&items, &cache)?;
            let grads = {
                let mut s = Session::train(&model.store, derive_seed(&[cfg.seed, epoch as u64, b as u64]));
                let out = model.forward(&mut s, &batch, cfg.lambda_kl, cfg.detach_peer)?;
                let loss = s.g.scalar_value(out.loss);
                if !loss.is_finite() {
                    return Err(Error::NanLoss { epoch });
                }
                loss_sum += loss * items.len() as f64;
                seen += items.len();
                s.backward(out.loss)?
            };
            model.store.zero_grad();
            model.store.accumulate(&grads);
            opt.step(&mut model.store)?;
        }

        let val_metrics = evaluate_metrics(model, val, &cache)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / seen as f64,
            val: val_metrics,
        };
        observer(&record);
        history.epochs.push(record);

        let improved = best.as_ref().is_none_or(|(acc, _)| val_metrics.accuracy > *acc);
        if improved {
            best = Some((val_metrics.accuracy, model.store.clone()));
            history.best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }

    if let Some((_, store)) = best {
        model.store = store;
    }
    model.store.zero_grad();
    Ok(history)
}
