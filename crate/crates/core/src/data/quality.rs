use super::Recording;

/// Thresholds for the EDA-based session gate.
#[derive(Clone, Debug, PartialEq)]
#[allow(non_snake_case)]
pub struct QualityConfig {
    /// Sessions (and windows) whose EDA standard deviation falls below this
    /// are treated as flat-lined, in µS.
    pub flatline_std_uS: f64,
    /// Longest tolerated ingestion gap in seconds.
    pub max_dropout_s: f64,
}

impl Default for QualityConfig {
    fn default() -> Self {
        Self {
            flatline_std_uS: 0.01,
            max_dropout_s: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Accept,
    RejectFlatline,
    RejectDropout,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Accept => "accept",
            Verdict::RejectFlatline => "reject_flatline",
            Verdict::RejectDropout => "reject_dropout",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
#[allow(non_snake_case)]
pub struct QualityReport {
    pub session_id: String,
    pub eda_std: f64,
    /// Fraction of non-overlapping 150-sample blocks whose EDA std is below
    /// the flatline threshold.
    pub flatline_fraction: f64,
    pub max_dropout_s: f64,
    pub verdict: Verdict,
}

/// Population standard deviation.
pub fn std_dev(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    (x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

/// EDA-only session gate: flat-line first, then dropout.
pub fn screen_session(rec: &Recording, cfg: &QualityConfig) -> QualityReport {
    let eda_std = std_dev(&rec.eda);
    let blocks: Vec<&[f64]> = rec.eda.chunks_exact(150).collect();
    let flatline_fraction = if blocks.is_empty() {
        if eda_std < cfg.flatline_std_uS {
            1.0
        } else {
            0.0
        }
    } else {
        blocks
            .iter()
            .filter(|b| std_dev(b) < cfg.flatline_std_uS)
            .count() as f64
            / blocks.len() as f64
    };
    let max_dropout_s = rec.max_gap_s();
    let verdict = if eda_std < cfg.flatline_std_uS {
        Verdict::RejectFlatline
    } else if max_dropout_s > cfg.max_dropout_s {
        Verdict::RejectDropout
    } else {
        Verdict::Accept
    };
    QualityReport {
        session_id: rec.session_id.clone(),
        eda_std,
        flatline_fraction,
        max_dropout_s,
        verdict,
    }
}

#[cfg(test)]
mod tests {
    use super::super::{Gap, SensorLocation};
    use super::*;

    fn rec(eda: Vec<f64>, gaps: Vec<Gap>) -> Recording {
        let n = eda.len();
        Recording::new(
            "S1",
            "s",
            SensorLocation::LeftWrist,
            30,
            [vec![0.0; n], vec![0.0; n], vec![1.0; n]],
            eda,
            vec![33.0; n],
            0.0,
            gaps,
        )
        .unwrap()
    }

    #[test]
    fn constant_eda_is_flatline() {
        let r = screen_session(&rec(vec![2.0; 600], vec![]), &QualityConfig::default());
        assert_eq!(r.verdict, Verdict::RejectFlatline);
        assert_eq!(r.flatline_fraction, 1.0);
    }

    #[test]
    fn sinusoid_is_accepted() {
        let eda = (0..900)
            .map(|i| 3.0 + 0.2 * (i as f64 / 30.0 * 0.5).sin())
            .collect();
        let r = screen_session(&rec(eda, vec![]), &QualityConfig::default());
        assert_eq!(r.verdict, Verdict::Accept);
    }

    #[test]
    fn long_gap_is_dropout() {
        let eda: Vec<f64> = (0..3000)
            .map(|i| 3.0 + 0.2 * (i as f64 / 40.0).sin())
            .collect();
        let gap = Gap {
            start_sample: 900,
            len_samples: 300,
        };
        let cfg = QualityConfig {
            max_dropout_s: 5.0,
            ..Default::default()
        };
        let r = screen_session(&rec(eda, vec![gap]), &cfg);
        assert_eq!(r.max_dropout_s, 10.0);
        assert_eq!(r.verdict, Verdict::RejectDropout);
    }
}
