//! Seeded synthetic cohort with planted behavior precursors.
//!
//! Each session is a 30 Hz recording whose accelerometer, EDA and
//! temperature streams carry class-specific signatures during annotated
//! events and a weaker version of them over the `precursor_lead_s` seconds
//! before every onset. Everything planted is recorded as ground truth.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal, Poisson};

use crate::data::{
    write_annotations, write_manifest, write_recording, write_taxonomy, AnnotationEvent,
    BehaviorTaxonomy, DataError, DatasetManifest, ManifestEntry, Recording, SensorLocation, TopBin,
    SAMPLE_RATE_HZ,
};
use crate::segmentation::{map_events, BehaviorEvent};

const FS: f64 = SAMPLE_RATE_HZ as f64;
const SCR_RISE_S: f64 = 0.75;
const SCR_DECAY_S: f64 = 2.0;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// Events per hour for each top bin.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassRates {
    pub aggression: f64,
    pub sib: f64,
    pub stereotypy: f64,
}

impl ClassRates {
    pub fn total(&self) -> f64 {
        self.aggression + self.sib + self.stereotypy
    }

    pub fn get(&self, b: TopBin) -> f64 {
        match b {
            TopBin::Aggression => self.aggression,
            TopBin::Sib => self.sib,
            TopBin::Stereotypy => self.stereotypy,
        }
    }

    pub fn zero() -> Self {
        Self {
            aggression: 0.0,
            sib: 0.0,
            stereotypy: 0.0,
        }
    }
}

impl Default for ClassRates {
    fn default() -> Self {
        Self {
            aggression: 0.15,
            sib: 0.45,
            stereotypy: 1.4,
        }
    }
}

/// Signature gain per modality; 0 plants nothing in that stream.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Strengths {
    pub acc: f64,
    pub eda: f64,
    pub temp: f64,
}

impl Strengths {
    pub fn uniform(s: f64) -> Self {
        Self {
            acc: s,
            eda: s,
            temp: s,
        }
    }

    /// Strong motion signature with faint physiological ones.
    pub fn motion_dominant() -> Self {
        Self {
            acc: 1.0,
            eda: 0.15,
            temp: 0.15,
        }
    }
}

impl Default for Strengths {
    fn default() -> Self {
        Self::uniform(1.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseLevels {
    /// Std of the pink-noise accelerometer floor per axis (g).
    pub acc_g: f64,
    /// Std of fast AR(1) EDA micro-fluctuation (µS).
    pub eda_us: f64,
    /// Std of the slow EDA wander (µS).
    pub eda_wander_us: f64,
    /// Std of white temperature noise (°C).
    pub temp_c: f64,
}

impl Default for NoiseLevels {
    fn default() -> Self {
        Self {
            acc_g: 0.02,
            eda_us: 0.03,
            eda_wander_us: 0.12,
            temp_c: 0.02,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_subjects: usize,
    /// Sessions per subject, cycled when shorter than `n_subjects`.
    pub sessions_per_subject: Vec<usize>,
    pub session_minutes: f64,
    pub event_rate_per_h: ClassRates,
    pub precursor_lead_s: f64,
    /// Event durations are drawn uniformly from this range.
    pub event_duration_s: (f64, f64),
    /// Mean spacing of precursor mini-bursts.
    pub mini_burst_interval_s: f64,
    /// Mini-burst amplitude relative to the full event signature.
    pub mini_burst_gain: f64,
    /// Rate of label-independent walking-like motion bouts.
    pub distractor_rate_per_h: f64,
    /// Scales between-subject and between-session offsets (sensor tilt,
    /// EDA baseline, temperature offset).
    pub subject_spread: f64,
    pub strength: Strengths,
    pub noise: NoiseLevels,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_subjects: 9,
            sessions_per_subject: vec![3, 2, 2, 1, 2, 3, 1, 2, 2],
            session_minutes: 60.0,
            event_rate_per_h: ClassRates::default(),
            precursor_lead_s: 600.0,
            event_duration_s: (20.0, 60.0),
            mini_burst_interval_s: 2.0,
            mini_burst_gain: 0.5,
            distractor_rate_per_h: 4.0,
            subject_spread: 0.3,
            strength: Strengths::default(),
            noise: NoiseLevels::default(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidConfig(m.to_string()));
        let r = &self.event_rate_per_h;
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if self.n_subjects == 0 {
            return bad("n_subjects must be positive");
        }
        if self.sessions_per_subject.is_empty() || self.sessions_per_subject.contains(&0) {
            return bad("every subject needs at least one session");
        }
        if !(self.session_minutes.is_finite() && self.session_minutes * 60.0 >= 10.0) {
            return bad("session_minutes must cover at least 10 s");
        }
        if ![r.aggression, r.sib, r.stereotypy]
            .into_iter()
            .all(finite_nonneg)
        {
            return bad("event rates must be finite and >= 0");
        }
        if !finite_nonneg(self.precursor_lead_s) {
            return bad("precursor_lead_s must be finite and >= 0");
        }
        let (lo, hi) = self.event_duration_s;
        if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && lo <= hi) {
            return bad("event_duration_s must satisfy 0 < min <= max");
        }
        if !(self.mini_burst_interval_s.is_finite() && self.mini_burst_interval_s > 0.0) {
            return bad("mini_burst_interval_s must be positive");
        }
        if !finite_nonneg(self.mini_burst_gain) {
            return bad("mini_burst_gain must be finite and >= 0");
        }
        if !finite_nonneg(self.subject_spread) {
            return bad("subject_spread must be finite and >= 0");
        }
        if !finite_nonneg(self.distractor_rate_per_h) {
            return bad("distractor_rate_per_h must be finite and >= 0");
        }
        let s = &self.strength;
        if ![s.acc, s.eda, s.temp].into_iter().all(finite_nonneg) {
            return bad("signature strengths must be finite and >= 0");
        }
        let n = &self.noise;
        if ![n.acc_g, n.eda_us, n.eda_wander_us, n.temp_c]
            .into_iter()
            .all(finite_nonneg)
        {
            return bad("noise levels must be finite and >= 0");
        }
        Ok(())
    }

    pub fn sessions_of(&self, subject: usize) -> usize {
        self.sessions_per_subject[subject % self.sessions_per_subject.len()]
    }

    pub fn total_sessions(&self) -> usize {
        (0..self.n_subjects).map(|s| self.sessions_of(s)).sum()
    }
}

/// What a ground-truth row describes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum TruthKind {
    Event,
    Precursor,
    MiniBurst,
}

impl TruthKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TruthKind::Event => "event",
            TruthKind::Precursor => "precursor",
            TruthKind::MiniBurst => "burst",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "event" => Some(TruthKind::Event),
            "precursor" => Some(TruthKind::Precursor),
            "burst" => Some(TruthKind::MiniBurst),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TruthRow {
    pub subject: String,
    pub session: String,
    pub kind: TruthKind,
    pub class: TopBin,
    pub start_s: f64,
    pub end_s: f64,
}

/// A behavior episode to plant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlannedEvent {
    pub class: TopBin,
    pub onset_s: f64,
    pub duration_s: f64,
}

#[derive(Clone, Debug)]
pub struct SynthSession {
    pub recording: Recording,
    pub annotations: Vec<AnnotationEvent>,
    pub truth: Vec<TruthRow>,
}

impl SynthSession {
    pub fn events(&self) -> Vec<BehaviorEvent> {
        map_events(&self.annotations, &BehaviorTaxonomy::standard())
            .expect("synthetic names are in the taxonomy")
    }
}

#[derive(Clone, Debug)]
pub struct Cohort {
    pub config: SynthConfig,
    pub sessions: Vec<SynthSession>,
}

pub fn subject_id(i: usize) -> String {
    format!("S{:02}", i + 1)
}

pub fn session_id(i: usize) -> String {
    format!("s{:02}", i + 1)
}

/// Raw annotation names used per class; all present in the standard
/// taxonomy.
fn raw_names(b: TopBin) -> &'static [&'static str] {
    match b {
        TopBin::Aggression => &["aggression", "disruptive behavior"],
        TopBin::Sib => &["self-injurious behavior", "hand bite"],
        TopBin::Stereotypy => &["motor stereotypies", "jumping", "dropping"],
    }
}

fn session_rng(seed: u64, global_index: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(1 + global_index as u64);
    r
}

fn subject_rng(seed: u64, subject: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x5u64.rotate_left(40));
    r.set_stream(1 + subject as u64);
    r
}

/// Draws a sequence of non-overlapping episodes. Consecutive episodes are
/// separated by at least the precursor lead, so every precursor phase is
/// free of other events; the remaining spacing is exponential so that the
/// long-run rate matches the configured total.
pub fn plan_events(cfg: &SynthConfig, duration_s: f64, rng: &mut impl Rng) -> Vec<PlannedEvent> {
    let rates = cfg.event_rate_per_h;
    let total = rates.total();
    if total <= 0.0 {
        return Vec::new();
    }
    let (dlo, dhi) = cfg.event_duration_s;
    let cycle = 3600.0 / total;
    let extra_mean = (cycle - cfg.precursor_lead_s - 0.5 * (dlo + dhi)).max(60.0);
    let gap = Exp::new(1.0 / extra_mean).expect("positive rate");
    let mut out = Vec::new();
    let mut t = cfg.precursor_lead_s + gap.sample(rng);
    loop {
        let dur = rng.random_range(dlo..=dhi);
        if t + dur > duration_s - 1.0 {
            break;
        }
        let u = rng.random::<f64>() * total;
        let class = if u < rates.stereotypy {
            TopBin::Stereotypy
        } else if u < rates.stereotypy + rates.sib {
            TopBin::Sib
        } else {
            TopBin::Aggression
        };
        out.push(PlannedEvent {
            class,
            onset_s: t,
            duration_s: dur,
        });
        t += dur + cfg.precursor_lead_s + gap.sample(rng);
    }
    out
}

fn idx(t: f64) -> usize {
    (t * FS).round().max(0.0) as usize
}

/// Difference-of-exponentials SCR with unit peak.
fn scr_kernel(t: f64) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    let tp =
        (SCR_DECAY_S / SCR_RISE_S).ln() * SCR_RISE_S * SCR_DECAY_S / (SCR_DECAY_S - SCR_RISE_S);
    let f = |x: f64| (-x / SCR_DECAY_S).exp() - (-x / SCR_RISE_S).exp();
    f(t) / f(tp)
}

fn add_scr(eda: &mut [f64], onset_s: f64, amp: f64) {
    let a = idx(onset_s);
    let b = (a + (12.0 * SCR_DECAY_S * FS) as usize).min(eda.len());
    for (i, v) in eda.iter_mut().enumerate().take(b).skip(a) {
        *v += amp * scr_kernel(i as f64 / FS - onset_s);
    }
}

/// Pink noise from white noise through a fixed pole/zero filter bank,
/// rescaled to the requested standard deviation.
fn pink_noise(n: usize, std: f64, rng: &mut impl Rng) -> Vec<f64> {
    let white = Normal::new(0.0, 1.0).expect("unit normal");
    let mut b = [0.0f64; 7];
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let w = white.sample(rng);
        b[0] = 0.99886 * b[0] + w * 0.0555179;
        b[1] = 0.99332 * b[1] + w * 0.0750759;
        b[2] = 0.96900 * b[2] + w * 0.1538520;
        b[3] = 0.86650 * b[3] + w * 0.3104856;
        b[4] = 0.55000 * b[4] + w * 0.5329522;
        b[5] = -0.7616 * b[5] - w * 0.0168980;
        out.push(b[0] + b[1] + b[2] + b[3] + b[4] + b[5] + b[6] + w * 0.5362);
        b[6] = w * 0.115926;
    }
    let mean = out.iter().sum::<f64>() / n.max(1) as f64;
    let sd = (out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n.max(1) as f64).sqrt();
    let k = if sd > 0.0 { std / sd } else { 0.0 };
    out.iter_mut().for_each(|v| *v = (*v - mean) * k);
    out
}

/// AR(1) process with time constant `tau_s` and stationary std `std`.
fn ar1(n: usize, tau_s: f64, std: f64, rng: &mut impl Rng) -> Vec<f64> {
    let a = (-1.0 / (tau_s * FS)).exp();
    let white = Normal::new(0.0, std * (1.0 - a * a).sqrt()).expect("finite std");
    let mut x = Normal::new(0.0, std).expect("finite std").sample(rng);
    (0..n)
        .map(|_| {
            x = a * x + white.sample(rng);
            x
        })
        .collect()
}

fn random_direction(rng: &mut impl Rng) -> [f64; 3] {
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    loop {
        let v: [f64; 3] = [n.sample(rng), n.sample(rng), n.sample(rng)];
        let m = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if m > 1e-6 {
            return [v[0] / m, v[1] / m, v[2] / m];
        }
    }
}

/// Raised-cosine edges of `ramp_s` seconds.
fn envelope(t: f64, dur: f64, ramp_s: f64) -> f64 {
    let r = ramp_s.min(dur / 2.0);
    if t < 0.0 || t > dur {
        0.0
    } else if t < r {
        0.5 - 0.5 * (PI * t / r).cos()
    } else if t > dur - r {
        0.5 - 0.5 * (PI * (dur - t) / r).cos()
    } else {
        1.0
    }
}

/// Adds the class motion signature over `[start_s, start_s+dur)`.
fn add_motion(
    acc: &mut [Vec<f64>; 3],
    class: TopBin,
    start_s: f64,
    dur: f64,
    gain: f64,
    rng: &mut impl Rng,
) {
    if gain <= 0.0 {
        return;
    }
    let n = acc[0].len();
    let a = idx(start_s).min(n);
    let b = idx(start_s + dur).min(n);
    match class {
        TopBin::Stereotypy => {
            let f = rng.random_range(2.0..4.0);
            let amp = 0.5 * gain * rng.random_range(0.8..1.2);
            let dir = random_direction(rng);
            let phase = rng.random_range(0.0..2.0 * PI);
            for i in a..b {
                let t = i as f64 / FS - start_s;
                let v = amp * envelope(t, dur, 1.0) * (2.0 * PI * f * t + phase).sin();
                for k in 0..3 {
                    acc[k][i] += v * dir[k];
                }
            }
        }
        TopBin::Aggression | TopBin::Sib => {
            // damped ~8 Hz transients arriving at about 1.5 per second
            let arrivals = Exp::new(1.5).expect("positive rate");
            let mut t = arrivals.sample(rng) * 0.5;
            while t < dur {
                let amp = gain * rng.random_range(1.0..2.0);
                let f = rng.random_range(7.0..9.0);
                let dir = random_direction(rng);
                let s = idx(start_s + t);
                let e = (s + (0.5 * FS) as usize).min(b);
                for i in s..e {
                    let u = (i - s) as f64 / FS;
                    let v = amp * (-u / 0.08).exp() * (2.0 * PI * f * u).sin();
                    for k in 0..3 {
                        acc[k][i] += v * dir[k];
                    }
                }
                t += arrivals.sample(rng);
            }
        }
    }
}

/// Walking-like bouts independent of any label.
fn add_distractors(acc: &mut [Vec<f64>; 3], rate_per_h: f64, duration_s: f64, rng: &mut impl Rng) {
    if rate_per_h <= 0.0 {
        return;
    }
    let count = Poisson::new(rate_per_h * duration_s / 3600.0)
        .map(|p| p.sample(rng) as usize)
        .unwrap_or(0);
    let n = acc[0].len();
    for _ in 0..count {
        let start = rng.random_range(0.0..duration_s);
        let dur = rng.random_range(10.0..40.0);
        let f = rng.random_range(1.6..2.2);
        let amp = 0.12;
        let dir = random_direction(rng);
        for i in idx(start).min(n)..idx(start + dur).min(n) {
            let t = i as f64 / FS - start;
            let v = amp * envelope(t, dur, 2.0) * (2.0 * PI * f * t).sin();
            for k in 0..3 {
                acc[k][i] += v * dir[k];
            }
        }
    }
}

/// Ramp from 0 at `onset-lead` to 1 at onset, held through the event, then
/// exponential recovery with `recover_s`.
fn precursor_profile(t: f64, ev: &PlannedEvent, lead: f64, recover_s: f64) -> f64 {
    let end = ev.onset_s + ev.duration_s;
    if t < ev.onset_s - lead {
        0.0
    } else if t < ev.onset_s {
        if lead > 0.0 {
            (t - (ev.onset_s - lead)) / lead
        } else {
            1.0
        }
    } else if t < end {
        1.0
    } else {
        (-(t - end) / recover_s).exp()
    }
}

/// Per-subject physiology shared by that subject's sessions.
#[derive(Clone, Copy, Debug)]
struct SubjectTraits {
    eda_base_us: f64,
    temp_offset_c: f64,
    gravity: [f64; 3],
}

fn subject_traits(seed: u64, subject: usize, spread: f64) -> SubjectTraits {
    let mut rng = subject_rng(seed, subject);
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    let g: [f64; 3] = [
        0.3 * spread * n.sample(&mut rng),
        0.3 * spread * n.sample(&mut rng),
        1.0,
    ];
    let m = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
    SubjectTraits {
        eda_base_us: 4.0 + spread * rng.random_range(-2.0..2.0),
        temp_offset_c: 0.5 * spread * n.sample(&mut rng),
        gravity: [g[0] / m, g[1] / m, g[2] / m],
    }
}

/// Synthesizes one session with the given episodes planted.
pub fn synthesize_session(
    cfg: &SynthConfig,
    subject: usize,
    session: usize,
    events: &[PlannedEvent],
    rng: &mut impl Rng,
) -> Result<SynthSession, SynthError> {
    let traits = subject_traits(cfg.seed, subject, cfg.subject_spread);
    let duration_s = cfg.session_minutes * 60.0;
    let n = (duration_s * FS).round() as usize;
    let sid = subject_id(subject);
    let sess = session_id(session);
    let s = cfg.strength;
    let lead = cfg.precursor_lead_s;
    let mut truth = Vec::new();
    let mut annotations = Vec::new();

    // accelerometer floor
    let mut acc = [
        pink_noise(n, cfg.noise.acc_g, rng),
        pink_noise(n, cfg.noise.acc_g, rng),
        pink_noise(n, cfg.noise.acc_g, rng),
    ];
    for (k, ch) in acc.iter_mut().enumerate() {
        ch.iter_mut().for_each(|v| *v += traits.gravity[k]);
    }
    add_distractors(&mut acc, cfg.distractor_rate_per_h, duration_s, rng);

    // EDA floor
    let drift_period = rng.random_range(600.0..1800.0);
    let drift_phase = rng.random_range(0.0..2.0 * PI);
    let session_offset =
        0.3 * cfg.subject_spread * Normal::new(0.0, 1.0).expect("unit normal").sample(rng);
    let fast = ar1(n, 2.0, cfg.noise.eda_us, rng);
    let wander = ar1(n, 20.0, cfg.noise.eda_wander_us, rng);
    let mut eda: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / FS;
            traits.eda_base_us
                + session_offset
                + 0.4 * (2.0 * PI * t / drift_period + drift_phase).sin()
                + fast[i]
                + wander[i]
        })
        .collect();
    // spontaneous non-specific SCRs, about one per minute
    if cfg.noise.eda_us > 0.0 {
        let gaps = Exp::new(1.0 / 60.0).expect("positive rate");
        let mut t = gaps.sample(rng);
        while t < duration_s {
            let amp = rng.random_range(0.03..0.1);
            add_scr(&mut eda, t, amp);
            t += gaps.sample(rng);
        }
    }

    // temperature floor
    let temp_period = rng.random_range(1200.0..2400.0);
    let temp_phase = rng.random_range(0.0..2.0 * PI);
    let tn = Normal::new(0.0, cfg.noise.temp_c.max(0.0)).expect("finite std");
    let mut temp: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / FS;
            33.0 + traits.temp_offset_c
                + 0.3 * (2.0 * PI * t / temp_period + temp_phase).sin()
                + tn.sample(rng)
        })
        .collect();

    for ev in events {
        let end = ev.onset_s + ev.duration_s;
        if ev.onset_s < 0.0 || end > duration_s || ev.duration_s <= 0.0 {
            return Err(SynthError::InvalidConfig(format!(
                "planned event [{}, {end}) outside session of {duration_s} s",
                ev.onset_s
            )));
        }
        let names = raw_names(ev.class);
        let raw = names[rng.random_range(0..names.len())];
        annotations.push(AnnotationEvent::new(raw, ev.onset_s, end).expect("non-empty interval"));
        let row = |kind, a: f64, b: f64| TruthRow {
            subject: sid.clone(),
            session: sess.clone(),
            kind,
            class: ev.class,
            start_s: a,
            end_s: b,
        };
        truth.push(row(TruthKind::Event, ev.onset_s, end));
        let pre_start = (ev.onset_s - lead).max(0.0);
        if lead > 0.0 {
            truth.push(row(TruthKind::Precursor, pre_start, ev.onset_s));
        }

        // full signature during the event
        add_motion(&mut acc, ev.class, ev.onset_s, ev.duration_s, s.acc, rng);
        add_scr(
            &mut eda,
            ev.onset_s + rng.random_range(1.0..3.0),
            s.eda * rng.random_range(0.4..0.8),
        );
        let mut t = ev.onset_s + 10.0;
        while t < end {
            add_scr(
                &mut eda,
                t + rng.random_range(1.0..3.0),
                s.eda * rng.random_range(0.2..0.4),
            );
            t += 10.0;
        }

        // precursor mini-bursts, each followed by a small SCR
        if lead > 0.0 {
            let gaps = Exp::new(1.0 / cfg.mini_burst_interval_s).expect("positive rate");
            let mut t = pre_start + gaps.sample(rng);
            loop {
                let dur = rng.random_range(2.0..4.0);
                if t + dur > ev.onset_s {
                    break;
                }
                add_motion(&mut acc, ev.class, t, dur, s.acc * cfg.mini_burst_gain, rng);
                add_scr(
                    &mut eda,
                    t + rng.random_range(1.0..3.0),
                    s.eda * rng.random_range(0.1..0.3),
                );
                truth.push(row(TruthKind::MiniBurst, t, t + dur));
                t += dur + gaps.sample(rng);
            }
        }

        // slow tonic rise and cooling over the precursor phase; a
        // post-arousal temperature dip after onset
        let a = idx(pre_start);
        let b = idx(end + 5.0 * 300.0).min(n);
        for i in a..b {
            let t = i as f64 / FS;
            eda[i] += 0.6 * s.eda * precursor_profile(t, ev, lead, 180.0);
            temp[i] -= 0.15 * s.temp * precursor_profile(t, ev, lead, 300.0);
            let u = t - ev.onset_s;
            if u > 0.0 {
                temp[i] -= 0.1 * s.temp * 1.5 * ((-u / 300.0).exp() - (-u / 30.0).exp());
            }
        }
    }

    eda.iter_mut().for_each(|v| *v = v.max(0.05));
    let start_epoch = 1.7e9 + subject as f64 * 86_400.0 + session as f64 * 7_200.0;
    let recording = Recording::new(
        sid,
        sess,
        SensorLocation::LeftAnkle,
        SAMPLE_RATE_HZ,
        acc,
        eda,
        temp,
        start_epoch,
        Vec::new(),
    )?;
    truth.sort_by(|a, b| a.start_s.total_cmp(&b.start_s).then(a.kind.cmp(&b.kind)));
    Ok(SynthSession {
        recording,
        annotations,
        truth,
    })
}

/// Generates every session of the cohort. Sessions use independent seeded
/// streams, so the output does not depend on `jobs`.
pub fn generate_cohort(cfg: &SynthConfig, jobs: usize) -> Result<Cohort, SynthError> {
    cfg.validate()?;
    let mut plan = Vec::new();
    for subj in 0..cfg.n_subjects {
        for sess in 0..cfg.sessions_of(subj) {
            plan.push((subj, sess));
        }
    }
    let duration_s = cfg.session_minutes * 60.0;
    let build = |k: usize| -> Result<SynthSession, SynthError> {
        let (subj, sess) = plan[k];
        let mut rng = session_rng(cfg.seed, k);
        let events = plan_events(cfg, duration_s, &mut rng);
        synthesize_session(cfg, subj, sess, &events, &mut rng)
    };
    let slots: Vec<Mutex<Option<Result<SynthSession, SynthError>>>> =
        (0..plan.len()).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|sc| {
        for _ in 0..jobs.clamp(1, plan.len().max(1)) {
            sc.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::Relaxed);
                if k >= plan.len() {
                    break;
                }
                *slots[k].lock().expect("slot lock") = Some(build(k));
            });
        }
    });
    let sessions = slots
        .into_iter()
        .map(|m| {
            m.into_inner()
                .expect("slot lock")
                .expect("every slot filled")
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Cohort {
        config: cfg.clone(),
        sessions,
    })
}

impl Cohort {
    /// Recordings paired with their mapped events, as consumed by corpus
    /// construction.
    pub fn corpus_items(&self) -> Vec<(Recording, Vec<BehaviorEvent>)> {
        self.sessions
            .iter()
            .map(|s| (s.recording.clone(), s.events()))
            .collect()
    }

    pub fn truth(&self) -> impl Iterator<Item = &TruthRow> {
        self.sessions.iter().flat_map(|s| s.truth.iter())
    }

    /// Writes `manifest.csv`, `taxonomy.csv`, `ground_truth.csv` and one
    /// recording and annotation file per session under `dir`.
    pub fn write(&self, dir: &Path) -> Result<DatasetManifest, SynthError> {
        let mk = |p: &Path| {
            std::fs::create_dir_all(p).map_err(|source| SynthError::Io {
                path: p.to_path_buf(),
                source,
            })
        };
        mk(&dir.join("recordings"))?;
        mk(&dir.join("annotations"))?;
        let mut entries = Vec::new();
        for s in &self.sessions {
            let r = &s.recording;
            let name = format!("{}_{}.csv", r.subject_id, r.session_id);
            let data_path = dir.join("recordings").join(&name);
            let annotation_path = dir.join("annotations").join(&name);
            write_recording(r, &data_path)?;
            write_annotations(&s.annotations, &annotation_path)?;
            entries.push(ManifestEntry {
                subject_id: r.subject_id.clone(),
                session_id: r.session_id.clone(),
                sensor_location: r.sensor_location,
                data_path,
                annotation_path,
            });
        }
        let manifest = DatasetManifest {
            entries,
            taxonomy_path: dir.join("taxonomy.csv"),
        };
        write_taxonomy(&BehaviorTaxonomy::standard(), &manifest.taxonomy_path)?;
        write_manifest(&manifest, &dir.join("manifest.csv"))?;
        let rows: Vec<TruthRow> = self.truth().cloned().collect();
        write_ground_truth(&rows, &dir.join("ground_truth.csv"))?;
        Ok(manifest)
    }
}

pub const GROUND_TRUTH_HEADER: [&str; 6] =
    ["subject", "session", "kind", "class", "start_s", "end_s"];

pub fn write_ground_truth(rows: &[TruthRow], path: &Path) -> Result<(), SynthError> {
    let io = |e: csv::Error| SynthError::Io {
        path: path.to_path_buf(),
        source: e.into(),
    };
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(GROUND_TRUTH_HEADER).map_err(io)?;
    for r in rows {
        w.write_record([
            r.subject.as_str(),
            r.session.as_str(),
            r.kind.as_str(),
            r.class.as_str(),
            &r.start_s.to_string(),
            &r.end_s.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|source| SynthError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_ground_truth(path: &Path) -> Result<Vec<TruthRow>, SynthError> {
    let io = |e: csv::Error| SynthError::Io {
        path: path.to_path_buf(),
        source: e.into(),
    };
    let mut r = csv::Reader::from_path(path).map_err(io)?;
    let headers = r.headers().map_err(io)?.clone();
    if headers.iter().ne(GROUND_TRUTH_HEADER) {
        return Err(DataError::MalformedRow {
            line: 1,
            reason: format!("expected header {}", GROUND_TRUTH_HEADER.join(",")),
        }
        .into());
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(io)?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let bad = |reason: &str| {
            SynthError::Data(DataError::MalformedRow {
                line,
                reason: reason.to_string(),
            })
        };
        if rec.len() != 6 {
            return Err(bad("expected 6 fields"));
        }
        out.push(TruthRow {
            subject: rec[0].to_string(),
            session: rec[1].to_string(),
            kind: TruthKind::parse(&rec[2]).ok_or_else(|| bad("unknown kind"))?,
            class: TopBin::parse(&rec[3]).ok_or_else(|| bad("unknown class"))?,
            start_s: rec[4].parse().map_err(|_| bad("bad start_s"))?,
            end_s: rec[5].parse().map_err(|_| bad("bad end_s"))?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scr_peak_is_one() {
        let peak = (1..2000)
            .map(|i| scr_kernel(i as f64 * 0.001 * 10.0))
            .fold(0.0, f64::max);
        assert!((peak - 1.0).abs() < 1e-4, "{peak}");
    }

    #[test]
    fn ar1_std() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = ar1(200_000, 0.5, 0.2, &mut rng);
        let sd = crate::data::std_dev(&x);
        assert!((sd - 0.2).abs() < 0.01, "{sd}");
    }
}
