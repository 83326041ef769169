//! Nested cross-validation over a corpus, the horizon sweep and the KNN
//! baselines.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::baselines::{eda_features, knn_fit, temp_features, ZScore, DEFAULT_MIN_PROMINENCE};
use crate::diff::ParamStore;
use crate::models::{Modality, Model, ModelConfig};
use crate::preprocess::{minmax_apply, NormStats};
use crate::segmentation::{LabelSpec, Task, WINDOW_SAMPLES};

use super::corpus::{subsample, Corpus, Sample};
use super::metrics::{argmax, auc_roc, confusion_matrix, prf_metrics};
use super::splits::{nested_cv_splits, FoldSplit};
use super::trainer::{
    predict_proba, pretrain_autoencoder, score_auc, train_model, Curves, TrainConfig,
};
use super::TrainError;

#[derive(Clone, Debug, PartialEq)]
pub struct CvConfig {
    pub folds: usize,
    pub runs: usize,
    pub seed: u64,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            runs: 5,
            seed: 0,
        }
    }
}

impl CvConfig {
    /// Four-class runs use four outer folds.
    pub fn for_task(&self, task: Task) -> Self {
        let mut c = self.clone();
        if task == Task::FourClass {
            c.folds = 4;
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub cv: CvConfig,
    pub task: Task,
    pub horizon_s: f64,
    /// Worker threads across folds.
    pub jobs: usize,
}

/// Test metrics of one (run, fold).
#[derive(Clone, Debug, PartialEq)]
pub struct FoldResult {
    pub run: usize,
    pub fold: usize,
    pub horizon_s: f64,
    pub task: Task,
    pub model: String,
    pub auc: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1_macro: f64,
    pub n_test: usize,
    pub n_test_pos: usize,
    pub per_subject_auc: Vec<(String, f64)>,
    /// `[true][predicted]` counts.
    pub confusion: Vec<Vec<u64>>,
    pub best_epoch: usize,
    pub curves: Curves,
}

/// Everything needed to reuse a fold's trained model.
#[derive(Clone, Debug)]
pub struct TrainedFold {
    pub split: FoldSplit,
    pub model: Model,
    pub store: ParamStore<f32>,
    pub norm: [NormStats; 4],
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub test_probs: Vec<Vec<f64>>,
}

fn fold_seed(base: u64, run: usize, fold: usize) -> u64 {
    base.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ ((run as u64) << 20) ^ fold as u64
}

fn test_metrics(
    corpus: &Corpus,
    test: &[Sample],
    probs: &[Vec<f64>],
    classes: usize,
) -> (f64, f64, f64, f64, Vec<(String, f64)>, Vec<Vec<u64>>) {
    let auc = score_auc(probs, test, classes).unwrap_or(f64::NAN);
    let scores: Vec<f64> = probs.iter().map(|p| 1.0 - p[0]).collect();
    let bin: Vec<u8> = test.iter().map(|s| u8::from(s.target != 0)).collect();
    let prf = prf_metrics(&scores, &bin, 0.5);
    let mut subjects: Vec<String> = test
        .iter()
        .map(|s| corpus.subject_of(s).to_string())
        .collect();
    subjects.sort();
    subjects.dedup();
    let per_subject = subjects
        .into_iter()
        .map(|subj| {
            let (s, l): (Vec<f64>, Vec<u8>) = test
                .iter()
                .zip(&scores)
                .filter(|(x, _)| corpus.subject_of(x) == subj)
                .map(|(x, &p)| (p, u8::from(x.target != 0)))
                .unzip();
            let a = auc_roc(&s, &l).unwrap_or(f64::NAN);
            (subj, a)
        })
        .collect();
    let pred: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
    let truth: Vec<usize> = test.iter().map(|s| s.target).collect();
    let confusion = confusion_matrix(&pred, &truth, classes);
    (
        auc,
        prf.precision,
        prf.recall,
        prf.f1_macro,
        per_subject,
        confusion,
    )
}

/// Trains and evaluates one split.
pub fn run_fold(
    corpus: &Corpus,
    exp: &ExperimentConfig,
    samples: &[Sample],
    split: &FoldSplit,
) -> Result<(FoldResult, TrainedFold), TrainError> {
    let classes = exp.task.num_classes();
    let train = corpus.select(samples, &split.train_subjects);
    let val = subsample(
        &corpus.select(samples, &split.val_subjects),
        exp.train.eval_stride,
    );
    let test = subsample(
        &corpus.select(samples, &split.test_subjects),
        exp.train.eval_stride,
    );
    if exp.task != Task::Binary {
        for c in 0..classes {
            if !train.iter().any(|s| s.target == c) {
                return Err(TrainError::MissingClassInTrain(
                    exp.task.class_names()[c].to_string(),
                ));
            }
        }
    }
    let tag = format!("run{}_fold{}", split.run_id, split.fold_id);
    let norm = corpus.fit_norm(&split.train_subjects, &tag)?;
    let seed = fold_seed(exp.train.seed, split.run_id, split.fold_id);
    let mut mcfg = exp.model.clone();
    mcfg.fusion.num_classes = classes;
    let mut store = ParamStore::<f32>::new();
    let model = Model::build(&mcfg, &mut store, seed)?;
    if exp.train.pretrain_epochs > 0 {
        if let Some(ae) = &model.eda {
            let wins: Vec<Vec<f64>> = train
                .iter()
                .map(|s| {
                    let d = &corpus.sessions[s.session].session;
                    d.tonic[s.start_sample..s.start_sample + WINDOW_SAMPLES].to_vec()
                })
                .collect();
            pretrain_autoencoder(
                ae,
                &mut store,
                &wins,
                exp.train.pretrain_epochs,
                exp.train.batch_size,
                exp.train.base_lr,
                seed,
            )?;
        }
    }
    let mut tcfg = exp.train.clone();
    tcfg.seed = seed;
    let outcome = train_model(&model, &mut store, corpus, &train, &val, &norm, &tcfg)?;
    let probs = predict_proba(&model, &store, corpus, &test, &norm, exp.train.eval_batch)?;
    let (auc, precision, recall, f1_macro, per_subject_auc, confusion) =
        test_metrics(corpus, &test, &probs, classes);
    let result = FoldResult {
        run: split.run_id,
        fold: split.fold_id,
        horizon_s: exp.horizon_s,
        task: exp.task,
        model: mcfg.kind.label(),
        auc,
        precision,
        recall,
        f1_macro,
        n_test: test.len(),
        n_test_pos: test.iter().filter(|s| s.is_positive()).count(),
        per_subject_auc,
        confusion,
        best_epoch: outcome.best_epoch,
        curves: outcome.curves,
    };
    log::info!(
        "{} H={} run {} fold {}: test AUC {:.4} (best epoch {})",
        result.model,
        exp.horizon_s,
        split.run_id,
        split.fold_id,
        auc,
        result.best_epoch
    );
    let trained = TrainedFold {
        split: split.clone(),
        model,
        store,
        norm,
        train,
        test,
        test_probs: probs,
    };
    Ok((result, trained))
}

/// Full nested cross-validation at one horizon. `keep` decides which
/// trained folds are returned alongside the metrics.
pub fn run_nested_cv(
    corpus: &Corpus,
    exp: &ExperimentConfig,
    keep: impl Fn(&FoldSplit) -> bool + Sync,
) -> Result<(Vec<FoldResult>, Vec<TrainedFold>), TrainError> {
    let spec = LabelSpec::new(exp.horizon_s, exp.task)?;
    let samples = corpus.labeled(&spec);
    let cv = exp.cv.for_task(exp.task);
    let splits = nested_cv_splits(&corpus.subjects(), cv.folds, cv.runs, cv.seed)?;
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<(usize, Result<(FoldResult, Option<TrainedFold>), TrainError>)>> =
        Mutex::new(Vec::new());
    let work = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        if i >= splits.len() {
            break;
        }
        let r = run_fold(corpus, exp, &samples, &splits[i])
            .map(|(res, t)| (res, keep(&splits[i]).then_some(t)));
        results.lock().unwrap().push((i, r));
    };
    let jobs = exp.jobs.max(1).min(splits.len());
    if jobs == 1 {
        work();
    } else {
        std::thread::scope(|s| {
            for _ in 0..jobs {
                s.spawn(work);
            }
        });
    }
    let mut results = results.into_inner().unwrap();
    results.sort_by_key(|(i, _)| *i);
    let mut out = Vec::new();
    let mut kept = Vec::new();
    for (_, r) in results {
        match r {
            Ok((res, t)) => {
                out.push(res);
                kept.extend(t);
            }
            Err(TrainError::MissingClassInTrain(c)) => {
                log::warn!("fold skipped: class {c} missing from training subjects");
            }
            Err(e) => return Err(e),
        }
    }
    Ok((out, kept))
}

/// Default horizon grid in seconds.
pub const DEFAULT_HORIZONS: [f64; 8] = [30.0, 60.0, 120.0, 300.0, 600.0, 900.0, 1200.0, 1800.0];

/// One nested cross-validation per horizon, labels regenerated each time.
pub fn horizon_sweep(
    corpus: &Corpus,
    exp: &ExperimentConfig,
    horizons: &[f64],
) -> Result<Vec<FoldResult>, TrainError> {
    let mut all = Vec::new();
    for &h in horizons {
        let mut e = exp.clone();
        e.horizon_s = h;
        all.extend(run_nested_cv(corpus, &e, |_| false)?.0);
    }
    Ok(all)
}

/// Handcrafted-feature vector of one window for a KNN baseline.
pub fn knn_features(
    corpus: &Corpus,
    s: &Sample,
    modality: Modality,
    norm: &[NormStats; 4],
) -> Vec<f64> {
    let d = &corpus.sessions[s.session].session;
    let r = s.start_sample..s.start_sample + WINDOW_SAMPLES;
    match modality {
        Modality::Eda => eda_features(&d.tonic[r], DEFAULT_MIN_PROMINENCE).values,
        Modality::Temp => temp_features(&minmax_apply(&d.temp[r], &norm[3])).values,
        Modality::Acc => {
            let mut v = Vec::new();
            for (c, st) in d.accel.iter().zip(norm) {
                v.extend(
                    temp_features(&minmax_apply(&c[r.clone()], st)).values[..2]
                        .iter()
                        .copied(),
                );
            }
            v
        }
    }
}

/// Nested cross-validation of a z-scored KNN on handcrafted features.
pub fn run_knn_cv(
    corpus: &Corpus,
    horizon_s: f64,
    cv: &CvConfig,
    modality: Modality,
    k: usize,
    eval_stride: usize,
) -> Result<Vec<FoldResult>, TrainError> {
    let spec = LabelSpec::new(horizon_s, Task::Binary)?;
    let samples = corpus.labeled(&spec);
    let splits = nested_cv_splits(&corpus.subjects(), cv.folds, cv.runs, cv.seed)?;
    let mut out = Vec::new();
    for split in &splits {
        let train = corpus.select(&samples, &split.train_subjects);
        let test = subsample(&corpus.select(&samples, &split.test_subjects), eval_stride);
        let norm = corpus.fit_norm(&split.train_subjects, "knn")?;
        let xs: Vec<Vec<f64>> = train
            .iter()
            .map(|s| knn_features(corpus, s, modality, &norm))
            .collect();
        let z = ZScore::fit(&xs)?;
        let pts: Vec<Vec<f64>> = xs.iter().map(|x| z.apply(x)).collect();
        let labels: Vec<usize> = train.iter().map(|s| s.target).collect();
        let model = knn_fit(pts, labels, k)?;
        let probs: Vec<Vec<f64>> = test
            .iter()
            .map(|s| {
                let p = model
                    .predict(&z.apply(&knn_features(corpus, s, modality, &norm)))
                    .score;
                vec![1.0 - p, p]
            })
            .collect();
        let (auc, precision, recall, f1_macro, per_subject_auc, confusion) =
            test_metrics(corpus, &test, &probs, 2);
        out.push(FoldResult {
            run: split.run_id,
            fold: split.fold_id,
            horizon_s,
            task: Task::Binary,
            model: format!("knn_{}", modality.as_str()),
            auc,
            precision,
            recall,
            f1_macro,
            n_test: test.len(),
            n_test_pos: test.iter().filter(|s| s.is_positive()).count(),
            per_subject_auc,
            confusion,
            best_epoch: 0,
            curves: Curves::default(),
        });
    }
    Ok(out)
}
