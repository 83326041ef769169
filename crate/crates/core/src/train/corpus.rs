//! Preprocessed sessions with their windows, and batch materialization.

use crate::data::{screen_session, QualityConfig, QualityReport, Recording, Verdict};
use crate::diff::{Real, Tensor};
use crate::preprocess::{minmax_fit_slices, NormChannel, NormStats, ProcessedSession};
use crate::segmentation::{
    assign_labels, segment, BehaviorEvent, LabelClass, LabelSpec, Window, N_CHANNELS,
    STRIDE_SAMPLES, WINDOW_SAMPLES,
};

use super::TrainError;

#[derive(Clone, Debug)]
pub struct SessionData {
    pub session: ProcessedSession,
    pub events: Vec<BehaviorEvent>,
    /// Gated, unlabeled windows.
    pub windows: Vec<Window>,
    pub duration_s: f64,
}

/// All accepted sessions of a cohort.
#[derive(Clone, Debug, Default)]
pub struct Corpus {
    pub sessions: Vec<SessionData>,
    pub quality: Vec<QualityReport>,
}

/// A labeled window reference into a [`Corpus`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sample {
    pub session: usize,
    pub start_sample: usize,
    pub class: LabelClass,
    pub target: usize,
}

impl Sample {
    pub fn is_positive(&self) -> bool {
        self.class != LabelClass::None
    }
}

impl Corpus {
    /// Screens, decomposes and windows every recording. Rejected sessions
    /// are kept only in `quality`.
    pub fn build(
        items: Vec<(Recording, Vec<BehaviorEvent>)>,
        lambda: f64,
        quality: &QualityConfig,
    ) -> Result<Self, TrainError> {
        let mut c = Corpus::default();
        for (rec, events) in items {
            let q = screen_session(&rec, quality);
            let accepted = q.verdict == Verdict::Accept;
            if !accepted {
                log::info!(
                    "session {}/{} rejected: {}",
                    rec.subject_id,
                    rec.session_id,
                    q.verdict.as_str()
                );
            }
            c.quality.push(q);
            if !accepted {
                continue;
            }
            let session = ProcessedSession::from_recording(&rec, lambda)?;
            let seg = segment(
                &session,
                WINDOW_SAMPLES,
                STRIDE_SAMPLES,
                quality.flatline_std_uS,
            )?;
            log::debug!(
                "session {}/{}: {} windows, {} gated",
                rec.subject_id,
                rec.session_id,
                seg.total,
                seg.rejected
            );
            c.sessions.push(SessionData {
                session,
                events,
                windows: seg.windows,
                duration_s: rec.duration_s(),
            });
        }
        Ok(c)
    }

    pub fn subjects(&self) -> Vec<String> {
        let mut s: Vec<String> = self
            .sessions
            .iter()
            .map(|d| d.session.subject_id.clone())
            .collect();
        s.sort();
        s.dedup();
        s
    }

    pub fn subject_of(&self, s: &Sample) -> &str {
        &self.sessions[s.session].session.subject_id
    }

    /// Labels every window for `spec`, in session then time order.
    pub fn labeled(&self, spec: &LabelSpec) -> Vec<Sample> {
        let mut out = Vec::new();
        for (i, d) in self.sessions.iter().enumerate() {
            for w in assign_labels(&d.windows, &d.events, spec, d.duration_s) {
                out.push(Sample {
                    session: i,
                    start_sample: w.start_sample,
                    class: w.label_class,
                    target: spec.task.target(w.label_class),
                });
            }
        }
        out
    }

    /// Labeled windows for `spec` as full [`Window`] records.
    pub fn labeled_windows(&self, spec: &LabelSpec) -> Vec<Window> {
        self.sessions
            .iter()
            .flat_map(|d| assign_labels(&d.windows, &d.events, spec, d.duration_s))
            .collect()
    }

    /// Samples whose subject is in `subjects`.
    pub fn select(&self, samples: &[Sample], subjects: &[String]) -> Vec<Sample> {
        samples
            .iter()
            .filter(|s| subjects.iter().any(|x| x == self.subject_of(s)))
            .copied()
            .collect()
    }

    /// Min-max statistics of acc x/y/z and temperature over the sessions of
    /// `subjects`.
    pub fn fit_norm(
        &self,
        subjects: &[String],
        fitted_on: &str,
    ) -> Result<[NormStats; 4], TrainError> {
        let sessions: Vec<&ProcessedSession> = self
            .sessions
            .iter()
            .map(|d| &d.session)
            .filter(|s| subjects.contains(&s.subject_id))
            .collect();
        let fit =
            |c: NormChannel| minmax_fit_slices(c, sessions.iter().map(|s| s.channel(c)), fitted_on);
        Ok([
            fit(NormChannel::AccX)?,
            fit(NormChannel::AccY)?,
            fit(NormChannel::AccZ)?,
            fit(NormChannel::Temp)?,
        ])
    }

    /// Row-major `(150, 5)` input of one sample.
    pub fn window_input(&self, s: &Sample, norm: &[NormStats; 4]) -> Vec<f64> {
        let d = &self.sessions[s.session];
        let w = Window {
            subject_id: String::new(),
            session_id: String::new(),
            start_sample: s.start_sample,
            start_s: 0.0,
            length_samples: WINDOW_SAMPLES,
            label_binary: 0,
            label_class: LabelClass::None,
            horizon_s: 0.0,
        };
        w.channels(&d.session, norm)
    }

    /// `(B, 150, 5)` batch for the given sample indices.
    pub fn batch_tensor<T: Real>(
        &self,
        samples: &[Sample],
        idx: &[usize],
        norm: &[NormStats; 4],
    ) -> Tensor<T> {
        let mut data = Vec::with_capacity(idx.len() * WINDOW_SAMPLES * N_CHANNELS);
        for &i in idx {
            data.extend(self.window_input(&samples[i], norm));
        }
        Tensor::from_f64(&[idx.len(), WINDOW_SAMPLES, N_CHANNELS], &data)
    }
}

/// Every `stride`-th sample (all when `stride <= 1`).
pub fn subsample(samples: &[Sample], stride: usize) -> Vec<Sample> {
    samples.iter().step_by(stride.max(1)).copied().collect()
}
