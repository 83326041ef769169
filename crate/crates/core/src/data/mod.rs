//! Canonical data model: multimodal recordings, behavior annotations,
//! the two-stage behavior taxonomy and session quality screening.

mod io;
mod quality;
mod taxonomy;

use std::fmt;
use std::path::PathBuf;

pub use io::{
    load_annotations, load_manifest, load_recording, load_taxonomy, write_annotations,
    write_manifest, write_recording, write_taxonomy,
};
pub use quality::{screen_session, std_dev, QualityConfig, QualityReport, Verdict};
pub use taxonomy::{BehaviorTaxonomy, TopBin};

/// Nominal sampling rate of every channel.
pub const SAMPLE_RATE_HZ: u32 = 30;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("file not found: {0}")]
    FileNotFound(PathBuf),
    #[error("malformed row at line {line}: {reason}")]
    MalformedRow { line: u64, reason: String },
    #[error("channel length mismatch: {0}")]
    ChannelLengthMismatch(String),
    #[error("sample rate mismatch: expected {expected} Hz, found {found}")]
    SampleRateMismatch { expected: u32, found: String },
    #[error("unknown behavior {0:?}")]
    UnknownBehavior(String),
    #[error("invalid taxonomy: {0}")]
    InvalidTaxonomy(String),
    #[error("duplicate manifest entry for subject {subject}, session {session}")]
    DuplicateEntry { subject: String, session: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SensorLocation {
    LeftWrist,
    RightWrist,
    LeftAnkle,
    RightAnkle,
}

impl SensorLocation {
    pub const ALL: [SensorLocation; 4] = [
        SensorLocation::LeftWrist,
        SensorLocation::RightWrist,
        SensorLocation::LeftAnkle,
        SensorLocation::RightAnkle,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SensorLocation::LeftWrist => "left_wrist",
            SensorLocation::RightWrist => "right_wrist",
            SensorLocation::LeftAnkle => "left_ankle",
            SensorLocation::RightAnkle => "right_ankle",
        }
    }

    /// Accepts `left_wrist`, `Left wrist`, `LeftWrist`, ...
    pub fn parse(s: &str) -> Option<Self> {
        let norm: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        match norm.as_str() {
            "leftwrist" => Some(SensorLocation::LeftWrist),
            "rightwrist" => Some(SensorLocation::RightWrist),
            "leftankle" => Some(SensorLocation::LeftAnkle),
            "rightankle" => Some(SensorLocation::RightAnkle),
            _ => None,
        }
    }
}

impl fmt::Display for SensorLocation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A run of samples that were missing at ingestion and have been filled
/// by linear interpolation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gap {
    pub start_sample: usize,
    pub len_samples: usize,
}

impl Gap {
    pub fn duration_s(&self) -> f64 {
        self.len_samples as f64 / SAMPLE_RATE_HZ as f64
    }

    pub fn start_s(&self) -> f64 {
        self.start_sample as f64 / SAMPLE_RATE_HZ as f64
    }
}

/// A time-synchronized 30 Hz session of tri-axial acceleration (g), EDA
/// (µS) and skin temperature (°C).
#[derive(Clone, Debug, PartialEq)]
pub struct Recording {
    pub subject_id: String,
    pub session_id: String,
    pub sensor_location: SensorLocation,
    pub sample_rate_hz: u32,
    /// x, y, z
    pub accel: [Vec<f64>; 3],
    pub eda: Vec<f64>,
    pub temp: Vec<f64>,
    pub start_epoch_s: f64,
    pub gaps: Vec<Gap>,
}

impl Recording {
    /// Validates channel lengths, the sample rate and finiteness.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        subject_id: impl Into<String>,
        session_id: impl Into<String>,
        sensor_location: SensorLocation,
        sample_rate_hz: u32,
        accel: [Vec<f64>; 3],
        eda: Vec<f64>,
        temp: Vec<f64>,
        start_epoch_s: f64,
        gaps: Vec<Gap>,
    ) -> Result<Self, DataError> {
        if sample_rate_hz != SAMPLE_RATE_HZ {
            return Err(DataError::SampleRateMismatch {
                expected: SAMPLE_RATE_HZ,
                found: sample_rate_hz.to_string(),
            });
        }
        let n = eda.len();
        let lens = [
            accel[0].len(),
            accel[1].len(),
            accel[2].len(),
            n,
            temp.len(),
        ];
        if lens.iter().any(|&l| l != n) {
            return Err(DataError::ChannelLengthMismatch(format!(
                "acc_x/acc_y/acc_z/eda/temp lengths {lens:?}"
            )));
        }
        let all = accel.iter().flatten().chain(&eda).chain(&temp);
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(DataError::ChannelLengthMismatch(
                "non-finite sample after ingestion".into(),
            ));
        }
        Ok(Self {
            subject_id: subject_id.into(),
            session_id: session_id.into(),
            sensor_location,
            sample_rate_hz,
            accel,
            eda,
            temp,
            start_epoch_s,
            gaps,
        })
    }

    pub fn len(&self) -> usize {
        self.eda.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eda.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.len() as f64 / self.sample_rate_hz as f64
    }

    /// Longest ingestion gap in seconds (0 when none).
    pub fn max_gap_s(&self) -> f64 {
        self.gaps.iter().map(Gap::duration_s).fold(0.0, f64::max)
    }
}

/// A raw behavior interval, half-open `[start_s, end_s)` relative to the
/// recording start.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationEvent {
    pub behavior_raw: String,
    pub start_s: f64,
    pub end_s: f64,
}

impl AnnotationEvent {
    pub fn new(behavior_raw: impl Into<String>, start_s: f64, end_s: f64) -> Option<Self> {
        (start_s < end_s && start_s.is_finite() && end_s.is_finite()).then(|| Self {
            behavior_raw: behavior_raw.into(),
            start_s,
            end_s,
        })
    }

    pub fn overlaps(&self, start_s: f64, end_s: f64) -> bool {
        self.start_s < end_s && start_s < self.end_s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub subject_id: String,
    pub session_id: String,
    pub sensor_location: SensorLocation,
    pub data_path: PathBuf,
    pub annotation_path: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub taxonomy_path: PathBuf,
}

impl DatasetManifest {
    /// Checks that `(subject_id, session_id)` pairs are unique.
    pub fn validate(&self) -> Result<(), DataError> {
        let mut seen = std::collections::HashSet::new();
        for e in &self.entries {
            if !seen.insert((e.subject_id.as_str(), e.session_id.as_str())) {
                return Err(DataError::DuplicateEntry {
                    subject: e.subject_id.clone(),
                    session: e.session_id.clone(),
                });
            }
        }
        Ok(())
    }

    pub fn subjects(&self) -> Vec<String> {
        let mut s: Vec<String> = self.entries.iter().map(|e| e.subject_id.clone()).collect();
        s.sort();
        s.dedup();
        s
    }
}
