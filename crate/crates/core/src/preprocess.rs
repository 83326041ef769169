//! Channel min-max scaling and EDA tonic/phasic separation.

use std::io::Write;
use std::path::Path;

use crate::data::{Recording, SAMPLE_RATE_HZ};

/// Default smoothness weight for the tonic fit at 30 Hz.
pub const DEFAULT_LAMBDA: f64 = 6400.0;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum PreprocessError {
    #[error("min-max statistics need at least one training sample")]
    EmptyTrainingSet,
    #[error("sequence of length {0} is too short (need at least 3)")]
    SequenceTooShort(usize),
    #[error("smoothness weight must be finite and non-negative, got {0}")]
    InvalidLambda(f64),
}

/// Channels that are min-max scaled. EDA is decomposed instead.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NormChannel {
    AccX,
    AccY,
    AccZ,
    Temp,
}

impl NormChannel {
    pub const ALL: [NormChannel; 4] = [
        NormChannel::AccX,
        NormChannel::AccY,
        NormChannel::AccZ,
        NormChannel::Temp,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            NormChannel::AccX => "acc_x",
            NormChannel::AccY => "acc_y",
            NormChannel::AccZ => "acc_z",
            NormChannel::Temp => "temp",
        }
    }

    pub fn of(self, rec: &Recording) -> &[f64] {
        match self {
            NormChannel::AccX => &rec.accel[0],
            NormChannel::AccY => &rec.accel[1],
            NormChannel::AccZ => &rec.accel[2],
            NormChannel::Temp => &rec.temp,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub channel: NormChannel,
    pub min: f64,
    pub max: f64,
    /// Identifier of the training fold the statistics came from.
    pub fitted_on: String,
}

/// Global min/max of one channel over a set of sample sequences.
pub fn minmax_fit_slices<'a>(
    channel: NormChannel,
    train: impl IntoIterator<Item = &'a [f64]>,
    fitted_on: &str,
) -> Result<NormStats, PreprocessError> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut any = false;
    for xs in train {
        for &v in xs {
            lo = lo.min(v);
            hi = hi.max(v);
            any = true;
        }
    }
    if !any {
        return Err(PreprocessError::EmptyTrainingSet);
    }
    Ok(NormStats {
        channel,
        min: lo,
        max: hi,
        fitted_on: fitted_on.to_string(),
    })
}

pub fn minmax_fit(
    train: &[&Recording],
    channel: NormChannel,
    fitted_on: &str,
) -> Result<NormStats, PreprocessError> {
    minmax_fit_slices(channel, train.iter().map(|r| channel.of(r)), fitted_on)
}

/// `(x - min) / (max - min)` clamped to `[0, 1]`; all zeros when the
/// statistics are degenerate.
pub fn minmax_apply(x: &[f64], stats: &NormStats) -> Vec<f64> {
    let span = stats.max - stats.min;
    if span <= 0.0 {
        return vec![0.0; x.len()];
    }
    x.iter()
        .map(|&v| ((v - stats.min) / span).clamp(0.0, 1.0))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TonicPhasic {
    pub tonic: Vec<f64>,
    pub phasic: Vec<f64>,
    pub lambda: f64,
}

/// Symmetric positive-definite pentadiagonal matrix stored by diagonals:
/// `d0[i] = A[i][i]`, `d1[i] = A[i][i+1]`, `d2[i] = A[i][i+2]`.
#[derive(Clone, Debug)]
pub struct Pentadiagonal {
    pub d0: Vec<f64>,
    pub d1: Vec<f64>,
    pub d2: Vec<f64>,
}

impl Pentadiagonal {
    /// `I + lambda * D2ᵀ D2` for a length-`n` sequence.
    pub fn smoother(n: usize, lambda: f64) -> Self {
        let mut d0 = vec![1.0; n];
        let mut d1 = vec![0.0; n.saturating_sub(1)];
        let mut d2 = vec![0.0; n.saturating_sub(2)];
        const C: [f64; 3] = [1.0, -2.0, 1.0];
        for r in 0..n.saturating_sub(2) {
            for a in 0..3 {
                d0[r + a] += lambda * C[a] * C[a];
                for b in a + 1..3 {
                    let v = lambda * C[a] * C[b];
                    match b - a {
                        1 => d1[r + a] += v,
                        _ => d2[r + a] += v,
                    }
                }
            }
        }
        Self { d0, d1, d2 }
    }

    pub fn len(&self) -> usize {
        self.d0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.d0.is_empty()
    }

    /// Solves `A x = b` by banded LDLᵀ factorization in O(n).
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.len();
        assert_eq!(b.len(), n);
        // L has unit diagonal and two subdiagonals l1[i] = L[i+1][i],
        // l2[i] = L[i+2][i].
        let mut d = vec![0.0; n];
        let mut l1 = vec![0.0; n.saturating_sub(1)];
        let mut l2 = vec![0.0; n.saturating_sub(2)];
        for i in 0..n {
            let mut di = self.d0[i];
            if i >= 1 {
                di -= l1[i - 1] * l1[i - 1] * d[i - 1];
            }
            if i >= 2 {
                di -= l2[i - 2] * l2[i - 2] * d[i - 2];
            }
            d[i] = di;
            if i + 1 < n {
                let mut a = self.d1[i];
                if i >= 1 {
                    a -= l2[i - 1] * l1[i - 1] * d[i - 1];
                }
                l1[i] = a / di;
            }
            if i + 2 < n {
                l2[i] = self.d2[i] / di;
            }
        }
        let mut y = b.to_vec();
        for i in 0..n {
            if i >= 1 {
                y[i] -= l1[i - 1] * y[i - 1];
            }
            if i >= 2 {
                y[i] -= l2[i - 2] * y[i - 2];
            }
        }
        for (yi, di) in y.iter_mut().zip(&d) {
            *yi /= di;
        }
        for i in (0..n).rev() {
            if i + 1 < n {
                y[i] -= l1[i] * y[i + 1];
            }
            if i + 2 < n {
                y[i] -= l2[i] * y[i + 2];
            }
        }
        y
    }
}

/// Splits EDA into a smooth tonic level and the phasic residual.
///
/// The tonic minimizes `‖y − t‖² + λ‖D₂t‖²`; its normal equations
/// `(I + λD₂ᵀD₂) t = y` are pentadiagonal and solved directly.
pub fn eda_decompose(eda: &[f64], lambda: f64) -> Result<TonicPhasic, PreprocessError> {
    if eda.len() < 3 {
        return Err(PreprocessError::SequenceTooShort(eda.len()));
    }
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(PreprocessError::InvalidLambda(lambda));
    }
    let tonic = if lambda == 0.0 {
        eda.to_vec()
    } else {
        // Affine sequences lie in the null space of D₂ and pass through
        // unchanged, so only the residual from the least-squares line goes
        // through the (ill-conditioned for large λ) solve.
        let line = affine_fit(eda);
        let resid: Vec<f64> = eda.iter().zip(&line).map(|(y, a)| y - a).collect();
        let smooth = Pentadiagonal::smoother(eda.len(), lambda).solve(&resid);
        line.iter().zip(&smooth).map(|(a, s)| a + s).collect()
    };
    let phasic = eda.iter().zip(&tonic).map(|(y, t)| y - t).collect();
    Ok(TonicPhasic {
        tonic,
        phasic,
        lambda,
    })
}

/// Least-squares line through `(i, y[i])`, evaluated at each index.
pub fn affine_fit(y: &[f64]) -> Vec<f64> {
    let n = y.len() as f64;
    let xm = (n - 1.0) / 2.0;
    let ym = y.iter().sum::<f64>() / n;
    let sxx: f64 = (0..y.len()).map(|i| (i as f64 - xm).powi(2)).sum();
    let sxy: f64 = y
        .iter()
        .enumerate()
        .map(|(i, v)| (i as f64 - xm) * (v - ym))
        .sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    (0..y.len()).map(|i| ym + slope * (i as f64 - xm)).collect()
}

/// Second differences of a sequence.
pub fn second_difference(x: &[f64]) -> Vec<f64> {
    x.windows(3).map(|w| w[0] - 2.0 * w[1] + w[2]).collect()
}

/// Writes `t_s,tonic_uS,phasic_uS` rows.
pub fn write_tonic_dump(tp: &TonicPhasic, start_s: f64, path: &Path) -> std::io::Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "t_s,tonic_uS,phasic_uS")?;
    for (i, (t, p)) in tp.tonic.iter().zip(&tp.phasic).enumerate() {
        writeln!(
            w,
            "{},{},{}",
            start_s + i as f64 / SAMPLE_RATE_HZ as f64,
            t,
            p
        )?;
    }
    w.flush()
}

/// A recording after decomposition: raw acceleration and temperature
/// (scaled later with fold statistics) plus tonic EDA.
#[derive(Clone, Debug, PartialEq)]
pub struct ProcessedSession {
    pub subject_id: String,
    pub session_id: String,
    pub accel: [Vec<f64>; 3],
    pub tonic: Vec<f64>,
    pub temp: Vec<f64>,
}

impl ProcessedSession {
    pub fn from_recording(rec: &Recording, lambda: f64) -> Result<Self, PreprocessError> {
        let tp = eda_decompose(&rec.eda, lambda)?;
        Ok(Self {
            subject_id: rec.subject_id.clone(),
            session_id: rec.session_id.clone(),
            accel: rec.accel.clone(),
            tonic: tp.tonic,
            temp: rec.temp.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.tonic.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tonic.is_empty()
    }

    pub fn channel(&self, c: NormChannel) -> &[f64] {
        match c {
            NormChannel::AccX => &self.accel[0],
            NormChannel::AccY => &self.accel[1],
            NormChannel::AccZ => &self.accel[2],
            NormChannel::Temp => &self.temp,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats(min: f64, max: f64) -> NormStats {
        NormStats {
            channel: NormChannel::Temp,
            min,
            max,
            fitted_on: "t".into(),
        }
    }

    #[test]
    fn fit_examples() {
        let s = minmax_fit_slices(NormChannel::AccX, [[2.0, 4.0, 6.0].as_slice()], "f").unwrap();
        assert_eq!((s.min, s.max), (2.0, 6.0));
        let a = [0.0, 0.5, 1.0];
        let b = [-1.0, 0.0, 2.0];
        let s = minmax_fit_slices(NormChannel::AccX, [a.as_slice(), b.as_slice()], "f").unwrap();
        assert_eq!((s.min, s.max), (-1.0, 2.0));
        assert_eq!(
            minmax_fit_slices(NormChannel::AccX, [[].as_slice()], "f"),
            Err(PreprocessError::EmptyTrainingSet)
        );
    }

    #[test]
    fn apply_examples() {
        assert_eq!(
            minmax_apply(&[4.0, 8.0, 0.0], &stats(2.0, 6.0)),
            vec![0.5, 1.0, 0.0]
        );
        assert_eq!(minmax_apply(&[3.0, 3.0], &stats(3.0, 3.0)), vec![0.0, 0.0]);
    }

    #[test]
    fn constant_and_ramp_are_exact() {
        for lambda in [0.0, 1.0, 6400.0, 1e6] {
            let c = vec![2.5; 40];
            let tp = eda_decompose(&c, lambda).unwrap();
            for (t, p) in tp.tonic.iter().zip(&tp.phasic) {
                assert!(
                    (t - 2.5).abs() < 1e-12 && p.abs() < 1e-12,
                    "lambda {lambda}"
                );
            }
            let ramp: Vec<f64> = (0..40).map(|i| 1.0 + 0.01 * i as f64).collect();
            let tp = eda_decompose(&ramp, lambda).unwrap();
            for (t, y) in tp.tonic.iter().zip(&ramp) {
                assert!((t - y).abs() < 1e-9, "lambda {lambda}");
            }
        }
    }

    #[test]
    fn lambda_zero_is_identity() {
        let y = vec![1.0, 3.0, 2.0, 5.0];
        assert_eq!(eda_decompose(&y, 0.0).unwrap().tonic, y);
    }

    #[test]
    fn short_input_rejected() {
        assert_eq!(
            eda_decompose(&[1.0, 2.0], 1.0),
            Err(PreprocessError::SequenceTooShort(2))
        );
    }

    #[test]
    fn smoother_diagonals_for_small_n() {
        let a = Pentadiagonal::smoother(3, 1.0);
        assert_eq!(a.d0, vec![2.0, 5.0, 2.0]);
        assert_eq!(a.d1, vec![-2.0, -2.0]);
        assert_eq!(a.d2, vec![1.0]);
        let a = Pentadiagonal::smoother(6, 1.0);
        assert_eq!(a.d0, vec![2.0, 6.0, 7.0, 7.0, 6.0, 2.0]);
        assert_eq!(a.d1, vec![-2.0, -4.0, -4.0, -4.0, -2.0]);
        assert_eq!(a.d2, vec![1.0; 4]);
    }
}
