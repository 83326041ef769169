//! Sliding windows, window-level EDA gating and detection / look-ahead
//! labels.

use std::io::Write;
use std::path::Path;

use crate::data::{std_dev, AnnotationEvent, BehaviorTaxonomy, DataError, TopBin, SAMPLE_RATE_HZ};
use crate::preprocess::{minmax_apply, NormChannel, NormStats, ProcessedSession};

pub const WINDOW_SAMPLES: usize = 150;
pub const STRIDE_SAMPLES: usize = 30;
pub const WINDOW_S: f64 = WINDOW_SAMPLES as f64 / SAMPLE_RATE_HZ as f64;
pub const MAX_HORIZON_S: f64 = 1800.0;
/// Number of model input channels: acc x/y/z, tonic EDA, temperature.
pub const N_CHANNELS: usize = 5;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SegmentError {
    #[error("recording of {len} samples is shorter than one {window}-sample window")]
    RecordingTooShort { len: usize, window: usize },
    #[error("horizon {0} s outside [0, 1800]")]
    InvalidHorizon(f64),
    #[error("window and stride must be positive")]
    InvalidGeometry,
}

/// Class of a labeled window; `None` means no behavior.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LabelClass {
    None,
    Aggression,
    Sib,
    Stereotypy,
}

impl LabelClass {
    pub fn from_bin(b: TopBin) -> Self {
        match b {
            TopBin::Aggression => LabelClass::Aggression,
            TopBin::Sib => LabelClass::Sib,
            TopBin::Stereotypy => LabelClass::Stereotypy,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LabelClass::None => "None",
            LabelClass::Aggression => "Aggression",
            LabelClass::Sib => "SIB",
            LabelClass::Stereotypy => "Stereotypy",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        if s.trim().eq_ignore_ascii_case("none") {
            Some(LabelClass::None)
        } else {
            TopBin::parse(s).map(Self::from_bin)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Task {
    Binary,
    FourClass,
    ThreeClassRisk,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Binary => "binary",
            Task::FourClass => "four_class",
            Task::ThreeClassRisk => "three_class_risk",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "binary" => Some(Task::Binary),
            "four_class" | "4class" | "four" => Some(Task::FourClass),
            "three_class_risk" | "3class" | "three" | "risk" => Some(Task::ThreeClassRisk),
            _ => None,
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            Task::Binary => 2,
            Task::FourClass => 4,
            Task::ThreeClassRisk => 3,
        }
    }

    /// Training target index for a window class.
    pub fn target(self, c: LabelClass) -> usize {
        match (self, c) {
            (_, LabelClass::None) => 0,
            (Task::Binary, _) => 1,
            (Task::FourClass, LabelClass::Aggression) => 1,
            (Task::FourClass, LabelClass::Sib) => 2,
            (Task::FourClass, LabelClass::Stereotypy) => 3,
            (Task::ThreeClassRisk, LabelClass::Aggression | LabelClass::Sib) => 1,
            (Task::ThreeClassRisk, LabelClass::Stereotypy) => 2,
        }
    }

    pub fn class_names(self) -> &'static [&'static str] {
        match self {
            Task::Binary => &["None", "Behavior"],
            Task::FourClass => &["None", "Aggression", "SIB", "Stereotypy"],
            Task::ThreeClassRisk => &["None", "HighRisk", "Stereotypy"],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelSpec {
    pub horizon_s: f64,
    pub task: Task,
    /// Highest priority first.
    pub class_priority: Vec<TopBin>,
}

impl LabelSpec {
    pub fn new(horizon_s: f64, task: Task) -> Result<Self, SegmentError> {
        if !(0.0..=MAX_HORIZON_S).contains(&horizon_s) {
            return Err(SegmentError::InvalidHorizon(horizon_s));
        }
        Ok(Self {
            horizon_s,
            task,
            class_priority: vec![TopBin::Aggression, TopBin::Sib, TopBin::Stereotypy],
        })
    }

    pub fn detection() -> Self {
        Self::new(0.0, Task::Binary).unwrap()
    }

    fn rank(&self, b: TopBin) -> usize {
        self.class_priority
            .iter()
            .position(|&p| p == b)
            .unwrap_or(self.class_priority.len())
    }
}

/// An annotation interval mapped to its top bin.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BehaviorEvent {
    pub class: TopBin,
    pub start_s: f64,
    pub end_s: f64,
}

impl BehaviorEvent {
    pub fn overlaps(&self, start_s: f64, end_s: f64) -> bool {
        self.start_s < end_s && start_s < self.end_s
    }
}

/// Maps raw annotations through the taxonomy.
pub fn map_events(
    events: &[AnnotationEvent],
    taxonomy: &BehaviorTaxonomy,
) -> Result<Vec<BehaviorEvent>, DataError> {
    events
        .iter()
        .map(|e| {
            Ok(BehaviorEvent {
                class: taxonomy.map_behavior(&e.behavior_raw)?,
                start_s: e.start_s,
                end_s: e.end_s,
            })
        })
        .collect()
}

/// A 150-sample window. The samples themselves stay in the owning
/// [`ProcessedSession`]; [`Window::channels`] materializes the `(150, 5)`
/// model input.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub subject_id: String,
    pub session_id: String,
    pub start_sample: usize,
    pub start_s: f64,
    pub length_samples: usize,
    pub label_binary: u8,
    pub label_class: LabelClass,
    pub horizon_s: f64,
}

impl Window {
    /// Row-major `(150, 5)` input: scaled acc x/y/z, tonic EDA, scaled
    /// temperature. `norm` holds statistics for acc x, y, z and temp.
    pub fn channels(&self, session: &ProcessedSession, norm: &[NormStats; 4]) -> Vec<f64> {
        let r = self.start_sample..self.start_sample + self.length_samples;
        let scaled: Vec<Vec<f64>> = NormChannel::ALL
            .iter()
            .zip(norm)
            .map(|(&c, s)| minmax_apply(&session.channel(c)[r.clone()], s))
            .collect();
        let tonic = &session.tonic[r];
        let mut out = Vec::with_capacity(self.length_samples * N_CHANNELS);
        for i in 0..self.length_samples {
            out.extend_from_slice(&[
                scaled[0][i],
                scaled[1][i],
                scaled[2][i],
                tonic[i],
                scaled[3][i],
            ]);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Segmentation {
    pub windows: Vec<Window>,
    /// Windows before gating.
    pub total: usize,
    /// Windows dropped by the EDA gate.
    pub rejected: usize,
}

pub fn window_count(len: usize, window: usize, stride: usize) -> usize {
    if len < window {
        0
    } else {
        (len - window) / stride + 1
    }
}

/// Cuts a session into windows and drops those whose tonic EDA standard
/// deviation falls below `flatline_std_uS`.
#[allow(non_snake_case)]
pub fn segment(
    session: &ProcessedSession,
    window: usize,
    stride: usize,
    flatline_std_uS: f64,
) -> Result<Segmentation, SegmentError> {
    if window == 0 || stride == 0 {
        return Err(SegmentError::InvalidGeometry);
    }
    let len = session.len();
    if len < window {
        return Err(SegmentError::RecordingTooShort { len, window });
    }
    let total = window_count(len, window, stride);
    let mut windows = Vec::with_capacity(total);
    for k in 0..total {
        let s = k * stride;
        if std_dev(&session.tonic[s..s + window]) < flatline_std_uS {
            continue;
        }
        windows.push(Window {
            subject_id: session.subject_id.clone(),
            session_id: session.session_id.clone(),
            start_sample: s,
            start_s: s as f64 / SAMPLE_RATE_HZ as f64,
            length_samples: window,
            label_binary: 0,
            label_class: LabelClass::None,
            horizon_s: 0.0,
        });
    }
    let rejected = total - windows.len();
    Ok(Segmentation {
        windows,
        total,
        rejected,
    })
}

/// Labels each window from the look-ahead interval `[s+H, s+H+len)`.
/// Windows whose look-ahead extends past `session_end_s` are dropped.
pub fn assign_labels(
    windows: &[Window],
    events: &[BehaviorEvent],
    spec: &LabelSpec,
    session_end_s: f64,
) -> Vec<Window> {
    let mut out = Vec::with_capacity(windows.len());
    for w in windows {
        let len_s = w.length_samples as f64 / SAMPLE_RATE_HZ as f64;
        let a = w.start_s + spec.horizon_s;
        let b = a + len_s;
        if b > session_end_s + 1e-9 {
            continue;
        }
        let class = events
            .iter()
            .filter(|e| e.overlaps(a, b))
            .min_by_key(|e| spec.rank(e.class))
            .map(|e| LabelClass::from_bin(e.class))
            .unwrap_or(LabelClass::None);
        let mut w = w.clone();
        w.label_class = class;
        w.label_binary = u8::from(class != LabelClass::None);
        w.horizon_s = spec.horizon_s;
        out.push(w);
    }
    out
}

/// Writes `subject,session,start_s,horizon_s,label_binary,label_class`.
pub fn write_windows_csv(windows: &[Window], path: &Path) -> std::io::Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        w,
        "subject,session,start_s,horizon_s,label_binary,label_class"
    )?;
    for x in windows {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            x.subject_id,
            x.session_id,
            x.start_s,
            x.horizon_s,
            x.label_binary,
            x.label_class.as_str()
        )?;
    }
    w.flush()
}
