//! Mini-batch training with validation-AUC model selection.

use std::io::Write;
use std::path::Path;

use num_traits::ToPrimitive;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diff::optim::{adam_step, AdamConfig};
use crate::diff::{ops, Mode, ParamStore, Real, Tape, Tensor};
use crate::models::{EdaAutoencoder, Model};
use crate::preprocess::NormStats;

use super::corpus::{Corpus, Sample};
use super::metrics::{auc_roc, macro_ovr_auc};
use super::splits::balanced_batches;
use super::TrainError;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub backbone_lr: f64,
    pub weight_decay: f64,
    pub label_ratio: f64,
    pub seed: u64,
    /// Validation and test windows are thinned to every n-th window.
    pub eval_stride: usize,
    pub eval_batch: usize,
    /// Autoencoder reconstruction epochs on training-fold EDA before
    /// supervised training (0 disables).
    pub pretrain_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 64,
            base_lr: 1e-4,
            backbone_lr: 1e-5,
            weight_decay: 1e-5,
            label_ratio: 1.5,
            seed: 0,
            eval_stride: 1,
            eval_batch: 256,
            pretrain_epochs: 0,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            head_lr: self.base_lr,
            backbone_lr: self.backbone_lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auc: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Curves {
    pub rows: Vec<EpochRecord>,
}

impl Curves {
    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "epoch,train_loss,val_auc")?;
        for r in &self.rows {
            writeln!(w, "{},{},{}", r.epoch, r.train_loss, r.val_auc)?;
        }
        w.flush()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub best_epoch: usize,
    pub best_val_auc: f64,
    pub curves: Curves,
}

fn softmax_rows(logits: &[f64], classes: usize) -> Vec<Vec<f64>> {
    logits
        .chunks(classes)
        .map(|row| {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

/// Class probabilities for every sample, in order.
pub fn predict_proba<T: Real>(
    model: &Model,
    store: &ParamStore<T>,
    corpus: &Corpus,
    samples: &[Sample],
    norm: &[NormStats; 4],
    batch: usize,
) -> Result<Vec<Vec<f64>>, TrainError> {
    let c = model.num_classes();
    let mut out = Vec::with_capacity(samples.len());
    let idx: Vec<usize> = (0..samples.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let x = corpus.batch_tensor::<T>(samples, chunk, norm);
        let mut tape = Tape::new(Mode::Infer, 0);
        let xv = tape.constant(x);
        let o = model.forward(&mut tape, store, xv)?;
        out.extend(softmax_rows(&tape.value(o.logits).to_f64_vec(), c));
    }
    Ok(out)
}

/// Binary AUC on the positive-class probability, or one-vs-rest macro AUC
/// for more classes. `None` when undefined.
pub fn score_auc(probs: &[Vec<f64>], samples: &[Sample], classes: usize) -> Option<f64> {
    if classes == 2 {
        let s: Vec<f64> = probs.iter().map(|p| p[1]).collect();
        let l: Vec<u8> = samples.iter().map(|x| u8::from(x.target != 0)).collect();
        auc_roc(&s, &l).ok()
    } else {
        let t: Vec<usize> = samples.iter().map(|x| x.target).collect();
        macro_ovr_auc(probs, &t, classes)
    }
}

/// Trains `store` in place for `cfg.epochs` epochs of balanced batches and
/// restores the parameters of the epoch with the best validation AUC.
#[allow(clippy::too_many_arguments)]
pub fn train_model(
    model: &Model,
    store: &mut ParamStore<f32>,
    corpus: &Corpus,
    train: &[Sample],
    val: &[Sample],
    norm: &[NormStats; 4],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    let classes = model.num_classes();
    let adam = cfg.adam();
    let is_pos: Vec<bool> = train.iter().map(Sample::is_positive).collect();
    let targets: Vec<usize> = train.iter().map(|s| s.target).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(usize, f64, ParamStore<f32>)> = None;
    let mut curves = Curves::default();
    for epoch in 1..=cfg.epochs {
        let batches = balanced_batches(&is_pos, cfg.batch_size, cfg.label_ratio, &mut rng)?;
        let mut loss_sum = 0.0;
        for (bi, batch) in batches.iter().enumerate() {
            let x = corpus.batch_tensor::<f32>(train, batch, norm);
            let labels: Vec<usize> = batch.iter().map(|&i| targets[i]).collect();
            let mut tape = Tape::new(Mode::Train, cfg.seed ^ ((epoch as u64) << 32) ^ bi as u64);
            let xv = tape.constant(x);
            let o = model.forward(&mut tape, store, xv)?;
            let loss = ops::softmax_cross_entropy(&mut tape, o.logits, &labels)?;
            let lv = tape.value(loss).data()[0].to_f64().unwrap_or(f64::NAN);
            if !lv.is_finite() {
                return Err(TrainError::DivergedLoss { epoch });
            }
            loss_sum += lv;
            tape.backward_scalar(loss, store)?;
            tape.commit_buffers(store);
            adam_step(store, &adam);
        }
        let train_loss = loss_sum / batches.len() as f64;
        let probs = predict_proba(model, store, corpus, val, norm, cfg.eval_batch)?;
        let val_auc = score_auc(&probs, val, classes).unwrap_or(f64::NAN);
        log::info!("epoch {epoch}: loss {train_loss:.5} val_auc {val_auc:.4}");
        curves.rows.push(EpochRecord {
            epoch,
            train_loss,
            val_auc,
        });
        // an undefined validation AUC never displaces a defined one
        let better = match &best {
            None => true,
            Some((_, b, _)) => val_auc > *b || (b.is_nan() && !val_auc.is_nan()),
        };
        if better {
            best = Some((epoch, val_auc, store.clone()));
        }
    }
    let Some((best_epoch, best_val_auc, snap)) = best else {
        return Ok(TrainOutcome {
            best_epoch: 0,
            best_val_auc: f64::NAN,
            curves,
        });
    };
    *store = snap;
    Ok(TrainOutcome {
        best_epoch,
        best_val_auc,
        curves,
    })
}

/// Reconstruction pretraining of the EDA autoencoder on unlabeled tonic
/// windows (each of equal length). Returns the mean loss per epoch.
pub fn pretrain_autoencoder<T: Real>(
    ae: &EdaAutoencoder,
    store: &mut ParamStore<T>,
    windows: &[Vec<f64>],
    epochs: usize,
    batch: usize,
    lr: f64,
    seed: u64,
) -> Result<Vec<f64>, TrainError> {
    if windows.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let len = windows[0].len();
    let adam = AdamConfig::uniform(lr);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut n = 0;
        for chunk in order.chunks(batch.max(1)) {
            let data: Vec<f64> = chunk
                .iter()
                .flat_map(|&i| windows[i].iter().copied())
                .collect();
            let x = Tensor::<T>::from_f64(&[chunk.len(), len, 1], &data);
            let mut tape = Tape::new(Mode::Train, seed ^ epoch as u64);
            let xv = tape.constant(x.clone());
            let y = ae.reconstruct(&mut tape, store, xv)?;
            let loss = ops::mse(&mut tape, y, &x)?;
            let lv = tape.value(loss).data()[0].to_f64().unwrap_or(f64::NAN);
            if !lv.is_finite() {
                return Err(TrainError::DivergedLoss { epoch: epoch + 1 });
            }
            total += lv * chunk.len() as f64;
            n += chunk.len();
            tape.backward_scalar(loss, store)?;
            tape.commit_buffers(store);
            adam_step(store, &adam);
        }
        losses.push(total / n as f64);
    }
    Ok(losses)
}

/// Mean reconstruction MSE in inference mode.
pub fn reconstruction_mse<T: Real>(
    ae: &EdaAutoencoder,
    store: &ParamStore<T>,
    windows: &[Vec<f64>],
) -> Result<f64, TrainError> {
    if windows.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let len = windows[0].len();
    let data: Vec<f64> = windows.iter().flatten().copied().collect();
    let x = Tensor::<T>::from_f64(&[windows.len(), len, 1], &data);
    let mut tape = Tape::new(Mode::Infer, 0);
    let xv = tape.constant(x.clone());
    let y = ae.reconstruct(&mut tape, store, xv)?;
    let loss = ops::mse(&mut tape, y, &x)?;
    Ok(tape.value(loss).data()[0].to_f64().unwrap_or(f64::NAN))
}
