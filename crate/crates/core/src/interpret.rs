//! Modality-level Shapley attribution and 1D Grad-CAM.

use std::io::Write;
use std::path::Path;

use crate::diff::{DiffError, Mode, ParamStore, Real, Tape, Tensor, Var};
use crate::models::{Modality, ModalityFeatures, Model};
use crate::preprocess::NormStats;
use crate::train::{Corpus, Sample};

#[derive(Debug, thiserror::Error)]
pub enum InterpretError {
    #[error("model has not been trained")]
    UntrainedModel,
    #[error("model has no convolutional layer on the accelerometer path")]
    NoConvLayer,
    #[error("baseline does not match the model: {0}")]
    BaselineMismatch(String),
    #[error("no windows to explain")]
    Empty,
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type R<T> = Result<T, InterpretError>;

/// A model together with its parameters and how long it was trained.
pub struct TrainedModel<'a, T: Real> {
    pub model: &'a Model,
    pub store: &'a ParamStore<T>,
    pub epochs_trained: usize,
}

impl<'a, T: Real> TrainedModel<'a, T> {
    fn check(&self) -> R<()> {
        if self.epochs_trained == 0 {
            return Err(InterpretError::UntrainedModel);
        }
        Ok(())
    }
}

/// Exact Shapley values of an `n`-player game, `v` indexed by coalition
/// bitmask (bit `i` set means player `i` present).
pub fn exact_shapley(n: usize, v: &[f64]) -> Vec<f64> {
    assert_eq!(v.len(), 1 << n, "value table must cover every coalition");
    let fact = |k: usize| (1..=k).map(|x| x as f64).product::<f64>();
    let nf = fact(n);
    (0..n)
        .map(|i| {
            let bit = 1usize << i;
            (0..1usize << n)
                .filter(|s| s & bit == 0)
                .map(|s| {
                    let k = s.count_ones() as usize;
                    fact(k) * fact(n - k - 1) / nf * (v[s | bit] - v[s])
                })
                .sum()
        })
        .collect()
}

/// Training-fold mean embeddings used in place of a masked modality.
#[derive(Clone, Debug, PartialEq)]
pub struct Baseline {
    pub modalities: Vec<Modality>,
    /// Mean pooled embedding per modality, length `d`.
    pub pooled: Vec<Vec<f64>>,
    /// Mean sequence embedding per modality, shape `(T', d)` row-major.
    pub sequence: Vec<(usize, usize, Vec<f64>)>,
}

fn add_into(acc: &mut Vec<f64>, t: &[f64], rows: usize) {
    let per = t.len() / rows;
    if acc.is_empty() {
        acc.resize(per, 0.0);
    }
    for r in 0..rows {
        for (a, v) in acc.iter_mut().zip(&t[r * per..(r + 1) * per]) {
            *a += v;
        }
    }
}

impl Baseline {
    /// Averages every modality's embeddings over `batches` of `(B, L, 5)`
    /// inputs.
    pub fn fit<T: Real>(
        model: &Model,
        store: &ParamStore<T>,
        batches: impl IntoIterator<Item = Tensor<T>>,
    ) -> R<Self> {
        let mods = model.modalities();
        let mut pooled = vec![Vec::new(); mods.len()];
        let mut seq = vec![Vec::new(); mods.len()];
        let mut seq_shape = vec![(0, 0); mods.len()];
        let mut n = 0usize;
        for x in batches {
            let b = x.shape()[0];
            let mut tape = Tape::new(Mode::Infer, 0);
            let xv = tape.constant(x);
            let enc = model.encode(&mut tape, store, xv)?;
            for (i, (_, o)) in enc.outputs.iter().enumerate() {
                add_into(&mut pooled[i], &tape.value(o.pooled).to_f64_vec(), b);
                let s = tape.shape(o.sequence);
                seq_shape[i] = (s[1], s[2]);
                add_into(&mut seq[i], &tape.value(o.sequence).to_f64_vec(), b);
            }
            n += b;
        }
        if n == 0 {
            return Err(InterpretError::Empty);
        }
        let scale = |v: Vec<f64>| v.into_iter().map(|x| x / n as f64).collect::<Vec<_>>();
        Ok(Self {
            modalities: mods,
            pooled: pooled.into_iter().map(scale).collect(),
            sequence: seq
                .into_iter()
                .zip(seq_shape)
                .map(|(v, (t, d))| (t, d, scale(v)))
                .collect(),
        })
    }

    /// Baseline from labeled corpus windows, typically the training fold.
    pub fn from_corpus<T: Real>(
        model: &Model,
        store: &ParamStore<T>,
        corpus: &Corpus,
        samples: &[Sample],
        norm: &[NormStats; 4],
        batch: usize,
    ) -> R<Self> {
        let idx: Vec<usize> = (0..samples.len()).collect();
        let batches = idx
            .chunks(batch.max(1))
            .map(|c| corpus.batch_tensor::<T>(samples, c, norm))
            .collect::<Vec<_>>();
        Self::fit(model, store, batches)
    }
}

fn broadcast<T: Real>(tape: &mut Tape<T>, b: usize, shape: &[usize], v: &[f64]) -> Var {
    let mut data = Vec::with_capacity(b * v.len());
    for _ in 0..b {
        data.extend_from_slice(v);
    }
    let mut full = vec![b];
    full.extend_from_slice(shape);
    tape.constant(Tensor::from_f64(&full, &data))
}

fn positive_probability(logits: &[f64], classes: usize) -> Vec<f64> {
    logits
        .chunks(classes)
        .map(|row| {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            1.0 - (row[0] - m).exp() / z
        })
        .collect()
}

/// Per-window value table: `values[w][mask]` is the positive-class
/// probability with the modalities outside `mask` replaced by the baseline.
pub fn coalition_values<T: Real>(
    m: &TrainedModel<T>,
    x: Tensor<T>,
    baseline: &Baseline,
) -> R<Vec<Vec<f64>>> {
    m.check()?;
    let mods = m.model.modalities();
    if baseline.modalities != mods {
        return Err(InterpretError::BaselineMismatch(format!(
            "baseline covers {:?}, model uses {:?}",
            baseline.modalities, mods
        )));
    }
    let b = x.shape()[0];
    let n = mods.len();
    let mut tape = Tape::new(Mode::Infer, 0);
    let xv = tape.constant(x);
    let enc = m.model.encode(&mut tape, m.store, xv)?;
    let present = enc.features();
    let mut absent = Vec::with_capacity(n);
    for (i, f) in present.iter().enumerate() {
        let (t, d, ref seq) = baseline.sequence[i];
        if tape.shape(f.sequence)[1..] != [t, d] || baseline.pooled[i].len() != d {
            return Err(InterpretError::BaselineMismatch(format!(
                "{} embedding shape",
                mods[i].as_str()
            )));
        }
        absent.push(ModalityFeatures {
            sequence: broadcast(&mut tape, b, &[t, d], seq),
            pooled: broadcast(&mut tape, b, &[d], &baseline.pooled[i]),
        });
    }
    let classes = m.model.num_classes();
    let mut table = vec![vec![0.0; 1 << n]; b];
    for mask in 0..1usize << n {
        let feats: Vec<ModalityFeatures> = (0..n)
            .map(|i| {
                if mask >> i & 1 == 1 {
                    present[i]
                } else {
                    absent[i]
                }
            })
            .collect();
        let out = m.model.head_forward(&mut tape, m.store, &feats)?;
        let p = positive_probability(&tape.value(out.logits).to_f64_vec(), classes);
        for (row, v) in table.iter_mut().zip(p) {
            row[mask] = v;
        }
    }
    Ok(table)
}

/// Shapley values of one window, in `Modality::ALL` order (absent
/// modalities get 0).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindowShapley {
    pub phi: [f64; 3],
    pub v_full: f64,
    pub v_empty: f64,
}

/// Exact modality Shapley values for every window of `x: (B, L, 5)`.
pub fn modality_shapley<T: Real>(
    m: &TrainedModel<T>,
    x: Tensor<T>,
    baseline: &Baseline,
) -> R<Vec<WindowShapley>> {
    let mods = m.model.modalities();
    let table = coalition_values(m, x, baseline)?;
    Ok(table
        .into_iter()
        .map(|v| {
            let phi = exact_shapley(mods.len(), &v);
            let mut full = [0.0; 3];
            for (k, md) in mods.iter().enumerate() {
                full[Modality::ALL
                    .iter()
                    .position(|a| a == md)
                    .expect("known modality")] = phi[k];
            }
            WindowShapley {
                phi: full,
                v_full: v[v.len() - 1],
                v_empty: v[0],
            }
        })
        .collect())
}

/// Dataset-level summary: mean |φ| per modality and their shares.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModalityAttribution {
    pub phi_acc: f64,
    pub phi_eda: f64,
    pub phi_temp: f64,
    /// Shares of the mean absolute values, summing to 1 (all 0 when every
    /// φ vanishes).
    pub normalized: [f64; 3],
    pub n_samples: usize,
}

impl ModalityAttribution {
    pub fn summarize(windows: &[WindowShapley]) -> R<Self> {
        if windows.is_empty() {
            return Err(InterpretError::Empty);
        }
        let n = windows.len() as f64;
        let mut m = [0.0; 3];
        for w in windows {
            for k in 0..3 {
                m[k] += w.phi[k].abs() / n;
            }
        }
        let total: f64 = m.iter().sum();
        let normalized = if total > 0.0 {
            m.map(|v| v / total)
        } else {
            [0.0; 3]
        };
        Ok(Self {
            phi_acc: m[0],
            phi_eda: m[1],
            phi_temp: m[2],
            normalized,
            n_samples: windows.len(),
        })
    }

    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "modality,phi_mean_abs,share")?;
        for (k, md) in Modality::ALL.iter().enumerate() {
            let v = [self.phi_acc, self.phi_eda, self.phi_temp][k];
            writeln!(w, "{},{},{}", md.as_str(), v, self.normalized[k])?;
        }
        w.flush()
    }
}

/// Temporal class-activation map of one window.
#[derive(Clone, Debug, PartialEq)]
pub struct CamMap {
    pub values: Vec<f64>,
    pub source_layer: String,
    pub sample: usize,
}

impl CamMap {
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        best
    }
}

/// Linear interpolation of `src` to `len` points with aligned sample
/// centers.
pub fn interpolate(src: &[f64], len: usize) -> Vec<f64> {
    let n = src.len();
    if n == 0 {
        return vec![0.0; len];
    }
    (0..len)
        .map(|j| {
            let p = ((j as f64 + 0.5) * n as f64 / len as f64 - 0.5).clamp(0.0, (n - 1) as f64);
            let i = p.floor() as usize;
            let f = p - i as f64;
            if i + 1 < n {
                src[i] * (1.0 - f) + src[i + 1] * f
            } else {
                src[i]
            }
        })
        .collect()
}

/// Grad-CAM from an activation map `A: (B, T', C)` and the gradient of the
/// target logit with respect to it. One map of length `out_len` per row.
pub fn cam_from_grads(
    act: &[f64],
    grad: &[f64],
    b: usize,
    t: usize,
    c: usize,
    out_len: usize,
) -> Vec<Vec<f64>> {
    (0..b)
        .map(|bi| {
            let base = bi * t * c;
            let w: Vec<f64> = (0..c)
                .map(|ch| (0..t).map(|ti| grad[base + ti * c + ch]).sum::<f64>() / t as f64)
                .collect();
            let raw: Vec<f64> = (0..t)
                .map(|ti| {
                    let s: f64 = (0..c).map(|ch| w[ch] * act[base + ti * c + ch]).sum();
                    s.max(0.0)
                })
                .collect();
            let mut v = interpolate(&raw, out_len);
            let mx = v.iter().copied().fold(0.0, f64::max);
            if mx > 0.0 {
                v.iter_mut().for_each(|x| *x /= mx);
            } else {
                v.iter_mut().for_each(|x| *x = 0.0);
            }
            v
        })
        .collect()
}

/// Runs backward from `logits[:, target]` and builds the CAM over
/// `activation`. `store` receives (and keeps) parameter gradients.
pub fn grad_cam_on_tape<T: Real>(
    tape: &mut Tape<T>,
    store: &mut ParamStore<T>,
    activation: Var,
    logits: Var,
    target: usize,
    out_len: usize,
) -> R<Vec<Vec<f64>>> {
    let ls = tape.shape(logits).to_vec();
    let (b, classes) = (ls[0], ls[1]);
    if target >= classes {
        return Err(DiffError::ShapeMismatch {
            layer: "grad-cam target".into(),
            expected: vec![classes],
            got: vec![target],
        }
        .into());
    }
    let mut seed = Tensor::<T>::zeros(&ls);
    for bi in 0..b {
        seed.data_mut()[bi * classes + target] = T::one();
    }
    let act = tape.value(activation).clone();
    let shape = act.shape().to_vec();
    let grads = tape.backward(logits, seed, store)?;
    let g = grads
        .get(activation)
        .map(Tensor::to_f64_vec)
        .unwrap_or_else(|| vec![0.0; act.len()]);
    Ok(cam_from_grads(
        &act.to_f64_vec(),
        &g,
        shape[0],
        shape[1],
        shape[2],
        out_len,
    ))
}

/// Grad-CAM of every window in `x: (B, L, 5)` over the last convolutional
/// map of the accelerometer encoder.
pub fn grad_cam<T: Real>(m: &TrainedModel<T>, x: Tensor<T>, target: usize) -> R<Vec<CamMap>> {
    m.check()?;
    if m.model.acc.is_none() {
        return Err(InterpretError::NoConvLayer);
    }
    let len = x.shape()[1];
    let mut tape = Tape::new(Mode::Infer, 0);
    let xv = tape.constant(x);
    let out = m.model.forward(&mut tape, m.store, xv)?;
    let a = out
        .encoded
        .get(Modality::Acc)
        .and_then(|o| o.last_conv)
        .ok_or(InterpretError::NoConvLayer)?;
    let mut scratch = m.store.clone();
    let maps = grad_cam_on_tape(&mut tape, &mut scratch, a, out.logits, target, len)?;
    let layer = format!("acc.{}.last_conv", m.model.cfg.accel_arch.as_str());
    Ok(maps
        .into_iter()
        .enumerate()
        .map(|(i, values)| CamMap {
            values,
            source_layer: layer.clone(),
            sample: i,
        })
        .collect())
}

/// Largest positive-class probability first; used to pick windows to
/// explain.
pub fn rank_by_confidence(probs: &[Vec<f64>]) -> Vec<usize> {
    let score: Vec<f64> = probs.iter().map(|p| 1.0 - p[0]).collect();
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| score[b].total_cmp(&score[a]).then(a.cmp(&b)));
    idx
}
