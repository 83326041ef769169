//! Run configuration: `section.key = value` files, `CH_SEED`, and one
//! command-line flag per key.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::models::{AccelArch, FusionKind, Modality, ModelConfig, ModelKind};
use crate::segmentation::Task;
use crate::synth::SynthConfig;
use crate::train::{CvConfig, TrainConfig, DEFAULT_HORIZONS};

/// Which modalities feed the model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ModalitySel {
    All,
    Only(Modality),
}

impl FromStr for ModalitySel {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        if s == "all" {
            return Ok(ModalitySel::All);
        }
        Modality::parse(s)
            .map(ModalitySel::Only)
            .ok_or_else(|| format!("expected all|acc|eda|temp, got {s:?}"))
    }
}

impl fmt::Display for ModalitySel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModalitySel::All => f.write_str("all"),
            ModalitySel::Only(m) => f.write_str(m.as_str()),
        }
    }
}

/// Comma-separated list.
#[derive(Clone, Debug, PartialEq)]
pub struct List<T>(pub Vec<T>);

impl<T: FromStr> FromStr for List<T>
where
    T::Err: fmt::Display,
{
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        s.split(',')
            .map(|p| p.trim().parse::<T>().map_err(|e| format!("{p:?}: {e}")))
            .collect::<Result<Vec<_>, _>>()
            .map(List)
    }
}

impl<T: fmt::Display> fmt::Display for List<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|v| v.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

/// Optional path; the empty string means unset.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptPath(pub Option<PathBuf>);

impl FromStr for OptPath {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Ok(OptPath((!s.is_empty()).then(|| PathBuf::from(s))))
    }
}

impl fmt::Display for OptPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.0 {
            Some(p) => write!(f, "{}", p.display()),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSel(pub Task);

impl FromStr for TaskSel {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Task::parse(s)
            .map(TaskSel)
            .ok_or_else(|| format!("unknown task {s:?}"))
    }
}

impl fmt::Display for TaskSel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.0.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArchSel(pub AccelArch);

impl FromStr for ArchSel {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        AccelArch::parse(s)
            .map(ArchSel)
            .ok_or_else(|| format!("expected resnet|dclstm|transformer, got {s:?}"))
    }
}

impl fmt::Display for ArchSel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.0.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionSel(pub FusionKind);

impl FromStr for FusionSel {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        FusionKind::parse(s)
            .map(FusionSel)
            .ok_or_else(|| format!("expected concat|tvit|xvit, got {s:?}"))
    }
}

impl fmt::Display for FusionSel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.0.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSection {
    /// External manifest; unset means the synthetic cohort.
    pub manifest: OptPath,
    pub taxonomy: OptPath,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreprocessSection {
    pub lambda: f64,
    pub flatline_std_us: f64,
    pub max_dropout_s: f64,
    pub dump_tonic: OptPath,
    pub windows: OptPath,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSection {
    pub arch: ArchSel,
    pub fusion: FusionSel,
    pub modality: ModalitySel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSection {
    pub kind: TaskSel,
    pub horizon_s: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExplainSection {
    pub n_windows: usize,
    pub shap_windows: usize,
    pub sample_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSection {
    pub seed: u64,
    pub jobs: usize,
    pub out: PathBuf,
}

/// Every tunable of a run. `synth.seed`, `train.seed` and `cv.seed` all
/// follow `run.seed`.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub data: DataSection,
    pub preprocess: PreprocessSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub cv: CvConfig,
    pub task: TaskSection,
    pub sweep_horizons: List<f64>,
    pub explain: ExplainSection,
    pub run: RunSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            data: DataSection {
                manifest: OptPath(None),
                taxonomy: OptPath(None),
            },
            preprocess: PreprocessSection {
                lambda: crate::preprocess::DEFAULT_LAMBDA,
                flatline_std_us: 0.01,
                max_dropout_s: 1.0,
                dump_tonic: OptPath(None),
                windows: OptPath(None),
            },
            model: ModelSection {
                arch: ArchSel(AccelArch::ResNet),
                fusion: FusionSel(FusionKind::ConcatMlp),
                modality: ModalitySel::All,
            },
            train: TrainConfig::default(),
            cv: CvConfig::default(),
            task: TaskSection {
                kind: TaskSel(Task::Binary),
                horizon_s: 0.0,
            },
            sweep_horizons: List(DEFAULT_HORIZONS.to_vec()),
            explain: ExplainSection {
                n_windows: 4,
                shap_windows: 256,
                sample_seed: 0,
            },
            run: RunSection {
                seed: 0,
                jobs: 1,
                out: PathBuf::from("out"),
            },
        }
    }
}

impl RunConfig {
    /// Propagates `run.seed` to every seeded component.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.synth.seed = c.run.seed;
        c.train.seed = c.run.seed;
        c.cv.seed = c.run.seed;
        c
    }

    pub fn model_config(&self) -> ModelConfig {
        let kind = match self.model.modality {
            ModalitySel::All => ModelKind::Fused(self.model.fusion.0),
            ModalitySel::Only(m) => ModelKind::Unimodal(m),
        };
        ModelConfig::new(kind, self.model.arch.0, self.task.kind.0.num_classes())
    }

    /// `key -> value` for every key.
    pub fn echo(&self) -> BTreeMap<String, String> {
        KEYS.iter()
            .map(|k| (k.key.to_string(), (k.get)(self)))
            .collect()
    }

    /// The echo in config-file grammar.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.echo() {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let def = KEYS
            .iter()
            .find(|k| k.key == key)
            .ok_or_else(|| ConfigError {
                key: key.to_string(),
                message: "unknown key".into(),
            })?;
        (def.set)(self, value.trim()).map_err(|message| ConfigError {
            key: key.to_string(),
            message,
        })
    }

    /// Applies a config file. Blank lines and `#` comments are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError {
                key: format!("line {}", i + 1),
                message: "expected `section.key = value`".into(),
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
#[error("config key {key}: {message}")]
pub struct ConfigError {
    pub key: String,
    pub message: String,
}

/// One configuration key and its command-line flag.
pub struct KeyDef {
    pub key: &'static str,
    pub flag: &'static str,
    pub help: &'static str,
    pub get: fn(&RunConfig) -> String,
    pub set: fn(&mut RunConfig, &str) -> Result<(), String>,
}

macro_rules! key {
    ($key:literal, $flag:literal, $help:literal, $($f:ident).+) => {
        KeyDef {
            key: $key,
            flag: $flag,
            help: $help,
            get: |c| c.$($f).+.to_string(),
            set: |c, v| {
                c.$($f).+ = v.parse().map_err(|e| format!("{e}"))?;
                Ok(())
            },
        }
    };
}

macro_rules! pair_key {
    ($key:literal, $flag:literal, $help:literal, $($f:ident).+ , $idx:tt) => {
        KeyDef {
            key: $key,
            flag: $flag,
            help: $help,
            get: |c| c.$($f).+.$idx.to_string(),
            set: |c, v| {
                c.$($f).+.$idx = v.parse().map_err(|e| format!("{e}"))?;
                Ok(())
            },
        }
    };
}

pub static KEYS: &[KeyDef] = &[
    // synthetic cohort
    key!(
        "synth.n_subjects",
        "synth-n-subjects",
        "number of synthetic subjects",
        synth.n_subjects
    ),
    KeyDef {
        key: "synth.sessions_per_subject",
        flag: "synth-sessions-per-subject",
        help: "comma-separated session counts, cycled over subjects",
        get: |c| List(c.synth.sessions_per_subject.clone()).to_string(),
        set: |c, v| {
            c.synth.sessions_per_subject = v.parse::<List<usize>>()?.0;
            Ok(())
        },
    },
    key!(
        "synth.session_minutes",
        "synth-session-minutes",
        "length of each session",
        synth.session_minutes
    ),
    key!(
        "synth.rate_aggression",
        "synth-rate-aggression",
        "aggression events per hour",
        synth.event_rate_per_h.aggression
    ),
    key!(
        "synth.rate_sib",
        "synth-rate-sib",
        "self-injury events per hour",
        synth.event_rate_per_h.sib
    ),
    key!(
        "synth.rate_stereotypy",
        "synth-rate-stereotypy",
        "stereotypy events per hour",
        synth.event_rate_per_h.stereotypy
    ),
    key!(
        "synth.precursor_lead_s",
        "synth-precursor-lead-s",
        "seconds of precursor signature before each onset",
        synth.precursor_lead_s
    ),
    pair_key!(
        "synth.event_min_s",
        "synth-event-min-s",
        "shortest event",
        synth.event_duration_s,
        0
    ),
    pair_key!(
        "synth.event_max_s",
        "synth-event-max-s",
        "longest event",
        synth.event_duration_s,
        1
    ),
    key!(
        "synth.mini_burst_interval_s",
        "synth-mini-burst-interval-s",
        "mean spacing of precursor bursts",
        synth.mini_burst_interval_s
    ),
    key!(
        "synth.mini_burst_gain",
        "synth-mini-burst-gain",
        "precursor burst amplitude relative to events",
        synth.mini_burst_gain
    ),
    key!(
        "synth.distractor_rate_per_h",
        "synth-distractor-rate-per-h",
        "label-free motion bouts per hour",
        synth.distractor_rate_per_h
    ),
    key!(
        "synth.subject_spread",
        "synth-subject-spread",
        "scale of between-subject offsets",
        synth.subject_spread
    ),
    key!(
        "synth.strength_acc",
        "synth-strength-acc",
        "accelerometer signature gain",
        synth.strength.acc
    ),
    key!(
        "synth.strength_eda",
        "synth-strength-eda",
        "EDA signature gain",
        synth.strength.eda
    ),
    key!(
        "synth.strength_temp",
        "synth-strength-temp",
        "temperature signature gain",
        synth.strength.temp
    ),
    key!(
        "synth.noise_acc_g",
        "synth-noise-acc-g",
        "accelerometer noise floor (g)",
        synth.noise.acc_g
    ),
    key!(
        "synth.noise_eda_us",
        "synth-noise-eda-us",
        "fast EDA noise (uS)",
        synth.noise.eda_us
    ),
    key!(
        "synth.noise_eda_wander_us",
        "synth-noise-eda-wander-us",
        "slow EDA wander (uS)",
        synth.noise.eda_wander_us
    ),
    key!(
        "synth.noise_temp_c",
        "synth-noise-temp-c",
        "temperature noise (C)",
        synth.noise.temp_c
    ),
    // data
    key!(
        "data.manifest",
        "manifest",
        "external manifest CSV (empty: synthetic cohort)",
        data.manifest
    ),
    key!(
        "data.taxonomy",
        "taxonomy",
        "taxonomy CSV (empty: next to the manifest)",
        data.taxonomy
    ),
    // preprocessing
    key!(
        "preprocess.lambda",
        "lambda",
        "tonic smoothness penalty",
        preprocess.lambda
    ),
    key!(
        "preprocess.flatline_std_us",
        "flatline-std-us",
        "EDA flatline threshold (uS)",
        preprocess.flatline_std_us
    ),
    key!(
        "preprocess.max_dropout_s",
        "max-dropout-s",
        "longest tolerated ingestion gap",
        preprocess.max_dropout_s
    ),
    key!(
        "preprocess.dump_tonic",
        "dump-tonic",
        "write t_s,tonic_uS,phasic_uS of the first session here",
        preprocess.dump_tonic
    ),
    key!(
        "preprocess.windows",
        "windows",
        "write the labeled window table here",
        preprocess.windows
    ),
    // model
    key!(
        "model.arch",
        "arch",
        "accelerometer encoder: resnet|dclstm|transformer",
        model.arch
    ),
    key!(
        "model.fusion",
        "fusion",
        "fusion head: concat|tvit|xvit",
        model.fusion
    ),
    key!(
        "model.modality",
        "modality",
        "all (fused) or a single modality: acc|eda|temp",
        model.modality
    ),
    // training
    key!("train.epochs", "epochs", "training epochs", train.epochs),
    key!(
        "train.batch_size",
        "batch-size",
        "mini-batch size",
        train.batch_size
    ),
    key!(
        "train.base_lr",
        "base-lr",
        "head learning rate",
        train.base_lr
    ),
    key!(
        "train.backbone_lr",
        "backbone-lr",
        "encoder learning rate",
        train.backbone_lr
    ),
    key!(
        "train.weight_decay",
        "weight-decay",
        "Adam weight decay",
        train.weight_decay
    ),
    key!(
        "train.label_ratio",
        "label-ratio",
        "negatives per positive in a batch",
        train.label_ratio
    ),
    key!(
        "train.eval_stride",
        "eval-stride",
        "keep every n-th validation/test window",
        train.eval_stride
    ),
    key!(
        "train.eval_batch",
        "eval-batch",
        "inference batch size",
        train.eval_batch
    ),
    key!(
        "train.pretrain_epochs",
        "pretrain-epochs",
        "EDA autoencoder pretraining epochs",
        train.pretrain_epochs
    ),
    key!("cv.folds", "folds", "outer folds", cv.folds),
    key!("cv.runs", "runs", "repeated runs", cv.runs),
    key!(
        "task.kind",
        "task",
        "binary|four_class|three_class",
        task.kind
    ),
    key!(
        "task.horizon_s",
        "horizon",
        "prediction horizon in seconds",
        task.horizon_s
    ),
    key!(
        "sweep.horizons",
        "sweep-horizons",
        "comma-separated horizons for sweep",
        sweep_horizons
    ),
    key!(
        "explain.n_windows",
        "explain-windows",
        "Grad-CAM windows to render",
        explain.n_windows
    ),
    key!(
        "explain.shap_windows",
        "shap-windows",
        "test windows averaged for Shapley shares",
        explain.shap_windows
    ),
    key!(
        "explain.sample_seed",
        "sample-seed",
        "seed for picking explained windows",
        explain.sample_seed
    ),
    key!(
        "run.seed",
        "seed",
        "master seed (CH_SEED overrides the config file)",
        run.seed
    ),
    key!("run.jobs", "jobs", "worker threads", run.jobs),
    KeyDef {
        key: "run.out",
        flag: "out",
        help: "output directory",
        get: |c| c.run.out.display().to_string(),
        set: |c, v| {
            c.run.out = PathBuf::from(v);
            Ok(())
        },
    },
];
