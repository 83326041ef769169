//! Handcrafted EDA / temperature window features and a KNN classifier.

use std::cmp::Ordering;

use crate::data::{std_dev, SAMPLE_RATE_HZ};

/// Default peak prominence threshold on tonic EDA, µS.
pub const DEFAULT_MIN_PROMINENCE: f64 = 0.05;
pub const DEFAULT_K: usize = 5;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum BaselineError {
    #[error("k = {k} exceeds the {n} training points")]
    KTooLarge { k: usize, n: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("feature vectors have inconsistent dimensions")]
    DimensionMismatch,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub names: Vec<&'static str>,
    pub zscored: bool,
}

pub const EDA_FEATURES: [&str; 4] = ["peak_count", "max_amplitude", "mean", "std"];
pub const TEMP_FEATURES: [&str; 3] = ["mean", "std", "ols_slope"];

/// Prominence of the peak at `i` with height `x[i]`: walk outwards until
/// a strictly higher sample or the edge, take the minimum on each side,
/// and subtract the higher of the two minima from the peak height.
pub fn prominence(x: &[f64], i: usize) -> f64 {
    let h = x[i];
    let mut left_min = h;
    for &v in x[..i].iter().rev() {
        if v > h {
            break;
        }
        left_min = left_min.min(v);
    }
    let mut right_min = h;
    for &v in &x[i + 1..] {
        if v > h {
            break;
        }
        right_min = right_min.min(v);
    }
    h - left_min.max(right_min)
}

/// Local maxima (flat tops reported at their leftmost sample) whose
/// prominence is at least `min_prominence`. Edges are never peaks.
pub fn detect_peaks(x: &[f64], min_prominence: f64) -> Vec<usize> {
    let n = x.len();
    let mut out = Vec::new();
    let mut i = 1;
    while i + 1 < n {
        if x[i - 1] < x[i] {
            // extend across a plateau
            let mut j = i;
            while j + 1 < n && x[j + 1] == x[i] {
                j += 1;
            }
            if j + 1 < n && x[j + 1] < x[i] && prominence(x, i) >= min_prominence {
                out.push(i);
            }
            i = j + 1;
        } else {
            i += 1;
        }
    }
    out
}

fn mean(x: &[f64]) -> f64 {
    if x.is_empty() {
        0.0
    } else {
        x.iter().sum::<f64>() / x.len() as f64
    }
}

/// `[peak_count, max_amplitude, mean, std]` of a tonic EDA slice.
pub fn eda_features(tonic: &[f64], min_prominence: f64) -> FeatureVector {
    let peaks = detect_peaks(tonic, min_prominence).len() as f64;
    let max = tonic.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    FeatureVector {
        values: vec![peaks, max, mean(tonic), std_dev(tonic)],
        names: EDA_FEATURES.to_vec(),
        zscored: false,
    }
}

/// Least-squares slope of `x` against time in seconds.
pub fn ols_slope(x: &[f64], rate_hz: f64) -> f64 {
    let n = x.len();
    if n < 2 {
        return 0.0;
    }
    let tm = (n as f64 - 1.0) / 2.0;
    let xm = mean(x);
    let mut sxy = 0.0;
    let mut stt = 0.0;
    for (i, &v) in x.iter().enumerate() {
        let dt = i as f64 - tm;
        sxy += dt * (v - xm);
        stt += dt * dt;
    }
    sxy / stt * rate_hz
}

/// `[mean, std, ols_slope (°C/s)]` of a temperature slice.
pub fn temp_features(temp: &[f64]) -> FeatureVector {
    FeatureVector {
        values: vec![
            mean(temp),
            std_dev(temp),
            ols_slope(temp, SAMPLE_RATE_HZ as f64),
        ],
        names: TEMP_FEATURES.to_vec(),
        zscored: false,
    }
}

/// Per-feature standardization fitted on training vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct ZScore {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ZScore {
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self, BaselineError> {
        let d = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != d) {
            return Err(BaselineError::DimensionMismatch);
        }
        let mut mean = vec![0.0; d];
        let mut std = vec![0.0; d];
        for j in 0..d {
            let col: Vec<f64> = rows.iter().map(|r| r[j]).collect();
            mean[j] = self::mean(&col);
            std[j] = std_dev(&col);
        }
        Ok(Self { mean, std })
    }

    /// Zero-variance features map to 0.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(&v, (&m, &s))| if s > 0.0 { (v - m) / s } else { 0.0 })
            .collect()
    }

    pub fn apply_fv(&self, fv: &FeatureVector) -> FeatureVector {
        FeatureVector {
            values: self.apply(&fv.values),
            names: fv.names.clone(),
            zscored: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KnnModel {
    pub k: usize,
    pub train_points: Vec<Vec<f64>>,
    pub train_labels: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KnnPrediction {
    pub label: usize,
    /// Fraction of the k neighbors labeled 1.
    pub score: f64,
}

pub fn knn_fit(
    points: Vec<Vec<f64>>,
    labels: Vec<usize>,
    k: usize,
) -> Result<KnnModel, BaselineError> {
    if k == 0 {
        return Err(BaselineError::ZeroK);
    }
    if points.len() != labels.len() {
        return Err(BaselineError::DimensionMismatch);
    }
    if k > points.len() {
        return Err(BaselineError::KTooLarge { k, n: points.len() });
    }
    let d = points[0].len();
    if points.iter().any(|p| p.len() != d) {
        return Err(BaselineError::DimensionMismatch);
    }
    Ok(KnnModel {
        k,
        train_points: points,
        train_labels: labels,
    })
}

fn by_distance(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

impl KnnModel {
    /// Indices of the k nearest training points, nearest first; equal
    /// distances resolve to the lower training index.
    pub fn neighbors(&self, x: &[f64]) -> Vec<usize> {
        let mut d: Vec<(f64, usize)> = self
            .train_points
            .iter()
            .enumerate()
            .map(|(i, p)| {
                (
                    p.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(),
                    i,
                )
            })
            .collect();
        if self.k < d.len() {
            d.select_nth_unstable_by(self.k - 1, by_distance);
            d.truncate(self.k);
        }
        d.sort_by(by_distance);
        d.into_iter().map(|(_, i)| i).collect()
    }

    /// Majority vote; a tied vote goes to the nearest neighbor among the
    /// tied classes.
    pub fn predict(&self, x: &[f64]) -> KnnPrediction {
        let nn = self.neighbors(x);
        let labels: Vec<usize> = nn.iter().map(|&i| self.train_labels[i]).collect();
        let n_classes = labels.iter().copied().max().unwrap_or(0) + 1;
        let mut votes = vec![0usize; n_classes];
        for &l in &labels {
            votes[l] += 1;
        }
        let top = *votes.iter().max().unwrap();
        let label = *labels.iter().find(|&&l| votes[l] == top).unwrap();
        let pos = labels.iter().filter(|&&l| l == 1).count();
        KnnPrediction {
            label,
            score: pos as f64 / self.k as f64,
        }
    }
}
