//! Command-line driver. Each subcommand is a stage whose outputs live in
//! `<out>/<stage>/<hash>/`, where the hash covers the configuration keys
//! the stage reads and the hash of the stage it consumes. A stage is
//! complete once its `DONE` marker exists.

pub mod config;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::error::{ContextKind, ContextValue, ErrorKind};
use clap::{Arg, ArgAction, ArgMatches, Command};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    load_annotations, load_manifest, load_recording, load_taxonomy, screen_session, QualityConfig,
};
use crate::diff::checkpoint::Checkpoint;
use crate::diff::ParamStore;
use crate::interpret::{
    grad_cam, modality_shapley, rank_by_confidence, Baseline, ModalityAttribution, TrainedModel,
};
use crate::models::Model;
use crate::preprocess::{eda_decompose, write_tonic_dump};
use crate::segmentation::{map_events, write_windows_csv, LabelSpec, Task};
use crate::synth::generate_cohort;
use crate::train::corpus::subsample;
use crate::train::report::{
    aggregate, auc_vs_horizon_svg, confusion_svg, write_metrics_csv, write_summary_json,
};
use crate::train::trainer::EpochRecord;
use crate::train::{
    horizon_sweep, nested_cv_splits, predict_proba, run_nested_cv, Corpus, Curves,
    ExperimentConfig, FoldResult,
};

pub use config::{ConfigError, KeyDef, RunConfig, KEYS};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("stage {stage} has not been run for this configuration (expected {})", expected.display())]
    MissingInput {
        stage: &'static str,
        expected: PathBuf,
    },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Other(#[from] anyhow::Error),
}

impl CliError {
    /// One-line JSON description for stderr.
    pub fn machine_line(&self) -> String {
        let v = match self {
            CliError::MissingInput { stage, expected } => serde_json::json!({
                "error": "MissingInput",
                "stage": stage,
                "expected": expected.display().to_string(),
            }),
            CliError::Config(e) => serde_json::json!({
                "error": "ConfigError",
                "key": e.key,
                "detail": e.message,
            }),
            CliError::Other(e) => serde_json::json!({
                "error": "Failed",
                "detail": format!("{e:#}"),
            }),
        };
        v.to_string()
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Other(_) => 1,
            _ => 2,
        }
    }
}

pub const SUBCOMMANDS: [(&str, &str); 8] = [
    ("synth", "generate the synthetic cohort"),
    ("ingest", "load and quality-screen the manifest"),
    (
        "preprocess",
        "decompose EDA and window every accepted session",
    ),
    ("train", "nested cross-validation at task.horizon_s"),
    ("eval", "aggregate the trained folds into metrics and plots"),
    ("sweep", "nested cross-validation over sweep.horizons"),
    ("explain", "modality Shapley shares and Grad-CAM maps"),
    ("report", "collect stage outputs into <out>/report"),
];

pub fn command() -> Command {
    let mut cmd = Command::new("cbpredict")
        .version(env!("CARGO_PKG_VERSION"))
        .about("Detection and forecasting of challenging behaviors from wearable signals")
        .subcommand_required(true)
        .arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .global(true)
                .help("`section.key = value` configuration file"),
        )
        .arg(
            Arg::new("verbose")
                .short('v')
                .long("verbose")
                .action(ArgAction::Count)
                .global(true)
                .help("more log output (repeatable)"),
        );
    for k in KEYS {
        cmd = cmd.arg(
            Arg::new(k.key)
                .long(k.flag)
                .value_name("VALUE")
                .global(true)
                .help(format!("{} [{}]", k.help, k.key)),
        );
    }
    for (name, about) in SUBCOMMANDS {
        cmd = cmd.subcommand(Command::new(name).about(about));
    }
    cmd
}

/// Defaults, then the config file, then `CH_SEED`, then flags.
pub fn resolve_config(m: &ArgMatches, env_seed: Option<&str>) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = m.get_one::<String>("config") {
        let text = fs::read_to_string(path).with_context(|| format!("reading {path}"))?;
        cfg.apply_text(&text)?;
    }
    if let Some(s) = env_seed {
        cfg.set("run.seed", s).map_err(|e| ConfigError {
            key: "CH_SEED".into(),
            message: e.message,
        })?;
    }
    for k in KEYS {
        if let Some(v) = m.get_one::<String>(k.key) {
            cfg.set(k.key, v)?;
        }
    }
    Ok(cfg.resolved())
}

pub fn run(args: impl IntoIterator<Item = OsString>) -> Result<(), CliError> {
    let m = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            // a closed pipe (e.g. `| head`) is not an error here
            let _ = write!(std::io::stdout(), "{e}");
            return Ok(());
        }
        Err(e) => {
            let key = match e.get(ContextKind::InvalidArg) {
                Some(ContextValue::String(s)) => s.clone(),
                _ => "argv".to_string(),
            };
            return Err(CliError::Config(ConfigError {
                key,
                message: e.kind().to_string(),
            }));
        }
    };
    let verbose = m.get_count("verbose");
    let level = match verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .try_init();
    let env_seed = std::env::var("CH_SEED").ok();
    let cfg = resolve_config(&m, env_seed.as_deref())?;
    let (name, _) = m.subcommand().expect("subcommand required");
    let stages = Stages::new(&cfg);
    match name {
        "synth" => stages.synth().map(drop),
        "ingest" => stages.ingest().map(drop),
        "preprocess" => stages.preprocess().map(drop),
        "train" => stages.train().map(drop),
        "eval" => stages.eval().map(drop),
        "sweep" => stages.sweep().map(drop),
        "explain" => stages.explain().map(drop),
        "report" => stages.report().map(drop),
        _ => unreachable!("unknown subcommand"),
    }
}

/// Keys whose values cannot change a stage's outputs.
const UNHASHED: [&str; 4] = [
    "run.jobs",
    "run.out",
    "preprocess.dump_tonic",
    "preprocess.windows",
];

fn hash_hex(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(&h.finalize()[..8])
}

fn file_digest(path: &Path) -> anyhow::Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hash_hex(&[&bytes]))
}

fn io<T>(r: std::io::Result<T>, path: &Path) -> anyhow::Result<T> {
    r.with_context(|| format!("writing {}", path.display()))
}

/// A completed stage directory.
#[derive(Clone, Debug)]
pub struct StageDir {
    pub stage: &'static str,
    pub hash: String,
    pub dir: PathBuf,
}

impl StageDir {
    fn done(&self) -> bool {
        self.dir.join("DONE").exists()
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }
}

/// Serialized form of a [`FoldResult`].
#[derive(Clone, Debug, Serialize, Deserialize)]
struct FoldRecord {
    run: usize,
    fold: usize,
    horizon_s: f64,
    task: String,
    model: String,
    auc: f64,
    precision: f64,
    recall: f64,
    f1_macro: f64,
    n_test: usize,
    n_test_pos: usize,
    per_subject_auc: Vec<(String, f64)>,
    confusion: Vec<Vec<u64>>,
    best_epoch: usize,
    curves: Vec<(usize, f64, f64)>,
}

impl From<&FoldResult> for FoldRecord {
    fn from(r: &FoldResult) -> Self {
        Self {
            run: r.run,
            fold: r.fold,
            horizon_s: r.horizon_s,
            task: r.task.as_str().into(),
            model: r.model.clone(),
            auc: r.auc,
            precision: r.precision,
            recall: r.recall,
            f1_macro: r.f1_macro,
            n_test: r.n_test,
            n_test_pos: r.n_test_pos,
            per_subject_auc: r.per_subject_auc.clone(),
            confusion: r.confusion.clone(),
            best_epoch: r.best_epoch,
            curves: r
                .curves
                .rows
                .iter()
                .map(|e| (e.epoch, e.train_loss, e.val_auc))
                .collect(),
        }
    }
}

impl FoldRecord {
    fn into_result(self) -> anyhow::Result<FoldResult> {
        Ok(FoldResult {
            run: self.run,
            fold: self.fold,
            horizon_s: self.horizon_s,
            task: Task::parse(&self.task).with_context(|| format!("unknown task {}", self.task))?,
            model: self.model,
            auc: self.auc,
            precision: self.precision,
            recall: self.recall,
            f1_macro: self.f1_macro,
            n_test: self.n_test,
            n_test_pos: self.n_test_pos,
            per_subject_auc: self.per_subject_auc,
            confusion: self.confusion,
            best_epoch: self.best_epoch,
            curves: Curves {
                rows: self
                    .curves
                    .into_iter()
                    .map(|(epoch, train_loss, val_auc)| EpochRecord {
                        epoch,
                        train_loss,
                        val_auc,
                    })
                    .collect(),
            },
        })
    }
}

fn write_folds(results: &[FoldResult], path: &Path) -> anyhow::Result<()> {
    let recs: Vec<FoldRecord> = results.iter().map(FoldRecord::from).collect();
    io(fs::write(path, serde_json::to_string_pretty(&recs)?), path)
}

fn read_folds(path: &Path) -> anyhow::Result<Vec<FoldResult>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let recs: Vec<FoldRecord> = serde_json::from_str(&text)?;
    recs.into_iter().map(FoldRecord::into_result).collect()
}

/// Stage resolution for one configuration.
pub struct Stages<'a> {
    cfg: &'a RunConfig,
    echo: BTreeMap<String, String>,
}

impl<'a> Stages<'a> {
    pub fn new(cfg: &'a RunConfig) -> Self {
        Self {
            cfg,
            echo: cfg.echo(),
        }
    }

    fn locate(&self, stage: &'static str, sections: &[&str], upstream: &str) -> StageDir {
        let mut text = format!("{stage}\n{}\n", env!("CARGO_PKG_VERSION"));
        for (k, v) in &self.echo {
            if UNHASHED.contains(&k.as_str()) {
                continue;
            }
            if sections
                .iter()
                .any(|s| k == s || k.starts_with(&format!("{s}.")))
            {
                text.push_str(&format!("{k} = {v}\n"));
            }
        }
        text.push_str(&format!("upstream = {upstream}\n"));
        let hash = hash_hex(&[text.as_bytes()]);
        StageDir {
            stage,
            dir: self.cfg.run.out.join(stage).join(&hash),
            hash,
        }
    }

    fn require(&self, s: StageDir) -> Result<StageDir, CliError> {
        if s.done() {
            Ok(s)
        } else {
            Err(CliError::MissingInput {
                stage: s.stage,
                expected: s.dir,
            })
        }
    }

    fn begin(&self, s: &StageDir) -> anyhow::Result<()> {
        if s.dir.exists() {
            fs::remove_dir_all(&s.dir).with_context(|| format!("clearing {}", s.dir.display()))?;
        }
        fs::create_dir_all(&s.dir).with_context(|| format!("creating {}", s.dir.display()))?;
        let p = s.path("config.txt");
        io(fs::write(&p, self.cfg.to_text()), &p)
    }

    fn finish(&self, s: &StageDir) -> anyhow::Result<()> {
        let p = s.path("DONE");
        io(fs::write(&p, format!("{}\n", s.hash)), &p)?;
        log::info!("{} -> {}", s.stage, s.dir.display());
        Ok(())
    }

    fn synth_dir(&self) -> StageDir {
        self.locate("synth", &["synth", "run.seed"], "")
    }

    /// Manifest path and a digest of everything it points at.
    fn source(&self) -> Result<(PathBuf, String), CliError> {
        match &self.cfg.data.manifest.0 {
            Some(p) => {
                let m = load_manifest(p, self.cfg.data.taxonomy.0.as_deref())
                    .map_err(anyhow::Error::from)?;
                let mut parts = vec![file_digest(p)?, file_digest(&m.taxonomy_path)?];
                for e in &m.entries {
                    parts.push(file_digest(&e.data_path)?);
                    parts.push(file_digest(&e.annotation_path)?);
                }
                Ok((p.clone(), hash_hex(&[parts.join(",").as_bytes()])))
            }
            None => {
                let s = self.require(self.synth_dir())?;
                Ok((s.path("manifest.csv"), format!("synth:{}", s.hash)))
            }
        }
    }

    fn ingest_dir(&self) -> Result<(StageDir, PathBuf), CliError> {
        let (manifest, digest) = self.source()?;
        let s = self.locate(
            "ingest",
            &[
                "data",
                "preprocess.flatline_std_us",
                "preprocess.max_dropout_s",
            ],
            &digest,
        );
        Ok((s, manifest))
    }

    fn preprocess_dir(&self) -> Result<(StageDir, PathBuf), CliError> {
        let (ingest, manifest) = self.ingest_dir()?;
        let ingest = self.require(ingest)?;
        Ok((
            self.locate("preprocess", &["preprocess"], &ingest.hash),
            manifest,
        ))
    }

    fn train_dir(&self) -> Result<(StageDir, PathBuf), CliError> {
        let (pre, manifest) = self.preprocess_dir()?;
        let pre = self.require(pre)?;
        Ok((
            self.locate(
                "train",
                &["model", "train", "cv", "task", "run.seed"],
                &pre.hash,
            ),
            manifest,
        ))
    }

    fn quality(&self) -> QualityConfig {
        QualityConfig {
            flatline_std_uS: self.cfg.preprocess.flatline_std_us,
            max_dropout_s: self.cfg.preprocess.max_dropout_s,
        }
    }

    fn corpus(&self, manifest: &Path) -> anyhow::Result<Corpus> {
        let m = load_manifest(manifest, self.cfg.data.taxonomy.0.as_deref())?;
        let tax = load_taxonomy(&m.taxonomy_path)?;
        let mut items = Vec::with_capacity(m.entries.len());
        for e in &m.entries {
            let rec = load_recording(e)?;
            let events = map_events(&load_annotations(&e.annotation_path)?, &tax)?;
            items.push((rec, events));
        }
        Ok(Corpus::build(
            items,
            self.cfg.preprocess.lambda,
            &self.quality(),
        )?)
    }

    fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            model: self.cfg.model_config(),
            train: self.cfg.train.clone(),
            cv: self.cfg.cv.clone(),
            task: self.cfg.task.kind.0,
            horizon_s: self.cfg.task.horizon_s,
            jobs: self.cfg.run.jobs,
        }
    }

    pub fn synth(&self) -> Result<StageDir, CliError> {
        let s = self.synth_dir();
        if s.done() {
            log::info!("synth cached at {}", s.dir.display());
            return Ok(s);
        }
        self.begin(&s)?;
        let cohort =
            generate_cohort(&self.cfg.synth, self.cfg.run.jobs).map_err(anyhow::Error::from)?;
        cohort.write(&s.dir).map_err(anyhow::Error::from)?;
        self.finish(&s)?;
        Ok(s)
    }

    pub fn ingest(&self) -> Result<StageDir, CliError> {
        let (s, manifest) = self.ingest_dir()?;
        if s.done() {
            log::info!("ingest cached at {}", s.dir.display());
            return Ok(s);
        }
        self.begin(&s)?;
        let m = load_manifest(&manifest, self.cfg.data.taxonomy.0.as_deref())
            .map_err(anyhow::Error::from)?;
        let tax = load_taxonomy(&m.taxonomy_path).map_err(anyhow::Error::from)?;
        let q = self.quality();
        let p = s.path("quality.csv");
        let mut out = String::from("subject_id,session_id,samples,gaps,eda_std,flatline_fraction,max_dropout_s,events,verdict\n");
        for e in &m.entries {
            let rec = load_recording(e).map_err(anyhow::Error::from)?;
            let events = map_events(
                &load_annotations(&e.annotation_path).map_err(anyhow::Error::from)?,
                &tax,
            )
            .map_err(anyhow::Error::from)?;
            let r = screen_session(&rec, &q);
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                rec.subject_id,
                rec.session_id,
                rec.len(),
                rec.gaps.len(),
                r.eda_std,
                r.flatline_fraction,
                r.max_dropout_s,
                events.len(),
                r.verdict.as_str()
            ));
        }
        io(fs::write(&p, out), &p)?;
        let mp = s.path("manifest_path.txt");
        io(fs::write(&mp, format!("{}\n", manifest.display())), &mp)?;
        self.finish(&s)?;
        Ok(s)
    }

    pub fn preprocess(&self) -> Result<StageDir, CliError> {
        let (s, manifest) = self.preprocess_dir()?;
        let cached = s.done();
        let corpus = self.corpus(&manifest)?;
        if !cached {
            self.begin(&s)?;
            let p = s.path("windows.csv");
            let w = corpus.labeled_windows(&LabelSpec::detection());
            io(write_windows_csv(&w, &p), &p)?;
            let p = s.path("sessions.csv");
            let mut out = String::from("subject_id,session_id,samples,windows,events\n");
            for d in &corpus.sessions {
                out.push_str(&format!(
                    "{},{},{},{},{}\n",
                    d.session.subject_id,
                    d.session.session_id,
                    d.session.len(),
                    d.windows.len(),
                    d.events.len()
                ));
            }
            io(fs::write(&p, out), &p)?;
            self.finish(&s)?;
        } else {
            log::info!("preprocess cached at {}", s.dir.display());
        }
        // side outputs are written on every invocation
        if let Some(p) = &self.cfg.preprocess.windows.0 {
            let spec = LabelSpec::new(self.cfg.task.horizon_s, self.cfg.task.kind.0)
                .map_err(anyhow::Error::from)?;
            io(write_windows_csv(&corpus.labeled_windows(&spec), p), p)?;
        }
        if let Some(p) = &self.cfg.preprocess.dump_tonic.0 {
            let m = load_manifest(&manifest, self.cfg.data.taxonomy.0.as_deref())
                .map_err(anyhow::Error::from)?;
            let e = m.entries.first().context("manifest has no sessions")?;
            let rec = load_recording(e).map_err(anyhow::Error::from)?;
            let tp =
                eda_decompose(&rec.eda, self.cfg.preprocess.lambda).map_err(anyhow::Error::from)?;
            io(write_tonic_dump(&tp, 0.0, p), p)?;
        }
        Ok(s)
    }

    pub fn train(&self) -> Result<StageDir, CliError> {
        let (s, manifest) = self.train_dir()?;
        if s.done() {
            log::info!("train cached at {}", s.dir.display());
            return Ok(s);
        }
        let corpus = self.corpus(&manifest)?;
        self.begin(&s)?;
        let exp = self.experiment();
        let (results, kept) = run_nested_cv(&corpus, &exp, |sp| sp.run_id == 0 && sp.fold_id == 0)
            .map_err(anyhow::Error::from)?;
        let p = s.path("metrics.csv");
        io(write_metrics_csv(&results, &p), &p)?;
        write_folds(&results, &s.path("folds.json"))?;
        let curves = s.path("curves");
        io(fs::create_dir_all(&curves), &curves)?;
        for r in &results {
            let p = curves.join(format!("run{}_fold{}.csv", r.run, r.fold));
            io(r.curves.write_csv(&p), &p)?;
        }
        if let Some(t) = kept.first() {
            let best = results
                .iter()
                .find(|r| r.run == t.split.run_id && r.fold == t.split.fold_id)
                .map(|r| r.best_epoch)
                .unwrap_or(0);
            let meta: BTreeMap<String, String> = [
                ("run".to_string(), t.split.run_id.to_string()),
                ("fold".to_string(), t.split.fold_id.to_string()),
                ("best_epoch".to_string(), best.to_string()),
                (
                    "epochs_trained".to_string(),
                    self.cfg.train.epochs.to_string(),
                ),
            ]
            .into();
            let manifest: Vec<String> = self.cfg.to_text().lines().map(String::from).collect();
            Checkpoint::from_store(&t.store, manifest, meta)
                .save(&s.path("model.ckpt"))
                .map_err(anyhow::Error::from)?;
        }
        self.finish(&s)?;
        Ok(s)
    }

    pub fn eval(&self) -> Result<StageDir, CliError> {
        let (train, _) = self.train_dir()?;
        let train = self.require(train)?;
        let s = self.locate("eval", &[], &train.hash);
        if s.done() {
            log::info!("eval cached at {}", s.dir.display());
            return Ok(s);
        }
        self.begin(&s)?;
        let results = read_folds(&train.path("folds.json"))?;
        let rows = aggregate(&results);
        let p = s.path("metrics.csv");
        io(write_metrics_csv(&results, &p), &p)?;
        let p = s.path("summary.json");
        io(
            write_summary_json(&rows, &self.echo, &self.provenance(&s), &p),
            &p,
        )?;
        let task = self.cfg.task.kind.0;
        for r in &rows {
            println!(
                "{} {} H={}s AUC {:.3} +/- {:.3} P {:.3} R {:.3} F1 {:.3}",
                r.model,
                r.task,
                r.horizon_s,
                r.auc.mean,
                r.auc.ci95,
                r.precision.mean,
                r.recall.mean,
                r.f1_macro.mean
            );
            let p = s.path(&format!("confusion_{}.svg", task.as_str()));
            io(
                fs::write(&p, confusion_svg(&r.confusion, task.class_names())),
                &p,
            )?;
        }
        self.finish(&s)?;
        Ok(s)
    }

    pub fn sweep(&self) -> Result<StageDir, CliError> {
        let (pre, manifest) = self.preprocess_dir()?;
        let pre = self.require(pre)?;
        let s = self.locate(
            "sweep",
            &["model", "train", "cv", "task.kind", "sweep", "run.seed"],
            &pre.hash,
        );
        if s.done() {
            log::info!("sweep cached at {}", s.dir.display());
            return Ok(s);
        }
        let corpus = self.corpus(&manifest)?;
        self.begin(&s)?;
        let results = horizon_sweep(&corpus, &self.experiment(), &self.cfg.sweep_horizons.0)
            .map_err(anyhow::Error::from)?;
        let rows = aggregate(&results);
        let p = s.path("metrics.csv");
        io(write_metrics_csv(&results, &p), &p)?;
        let p = s.path("summary.json");
        io(
            write_summary_json(&rows, &self.echo, &self.provenance(&s), &p),
            &p,
        )?;
        let p = s.path("auc_vs_horizon.svg");
        io(fs::write(&p, auc_vs_horizon_svg(&rows)), &p)?;
        self.finish(&s)?;
        Ok(s)
    }

    pub fn explain(&self) -> Result<StageDir, CliError> {
        let (train, manifest) = self.train_dir()?;
        let train = self.require(train)?;
        let s = self.locate("explain", &["explain"], &train.hash);
        if s.done() {
            log::info!("explain cached at {}", s.dir.display());
            return Ok(s);
        }
        let ckpt_path = train.path("model.ckpt");
        let ckpt = Checkpoint::load(&ckpt_path).map_err(anyhow::Error::from)?;
        let corpus = self.corpus(&manifest)?;
        self.begin(&s)?;

        let meta = |k: &str| -> anyhow::Result<usize> {
            ckpt.metadata
                .get(k)
                .with_context(|| format!("checkpoint lacks {k}"))?
                .parse()
                .with_context(|| format!("checkpoint field {k}"))
        };
        let (run, fold, epochs) = (meta("run")?, meta("fold")?, meta("epochs_trained")?);
        let task = self.cfg.task.kind.0;
        let cv = self.cfg.cv.for_task(task);
        let split = nested_cv_splits(&corpus.subjects(), cv.folds, cv.runs, cv.seed)
            .map_err(anyhow::Error::from)?
            .into_iter()
            .find(|sp| sp.run_id == run && sp.fold_id == fold)
            .context("checkpoint fold not found")?;
        let mut store = ParamStore::<f32>::new();
        let model =
            Model::build(&self.cfg.model_config(), &mut store, 0).map_err(anyhow::Error::from)?;
        ckpt.restore_into(&mut store).map_err(anyhow::Error::from)?;
        let norm = corpus
            .fit_norm(&split.train_subjects, &format!("run{run}_fold{fold}"))
            .map_err(anyhow::Error::from)?;
        let spec = LabelSpec::new(self.cfg.task.horizon_s, task).map_err(anyhow::Error::from)?;
        let samples = corpus.labeled(&spec);
        let stride = self.cfg.train.eval_stride;
        let train_s = subsample(&corpus.select(&samples, &split.train_subjects), stride);
        let test = subsample(&corpus.select(&samples, &split.test_subjects), stride);
        let batch = self.cfg.train.eval_batch;
        let trained = TrainedModel {
            model: &model,
            store: &store,
            epochs_trained: epochs,
        };
        let baseline = Baseline::from_corpus(&model, &store, &corpus, &train_s, &norm, batch)
            .map_err(anyhow::Error::from)?;

        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.explain.sample_seed);
        let mut pick: Vec<usize> = (0..test.len()).collect();
        pick.shuffle(&mut rng);
        pick.truncate(self.cfg.explain.shap_windows);
        pick.sort_unstable();
        let mut phis = Vec::with_capacity(pick.len());
        for c in pick.chunks(batch.max(1)) {
            let x = corpus.batch_tensor::<f32>(&test, c, &norm);
            phis.extend(modality_shapley(&trained, x, &baseline).map_err(anyhow::Error::from)?);
        }
        let attr = ModalityAttribution::summarize(&phis).map_err(anyhow::Error::from)?;
        let p = s.path("shap.csv");
        io(attr.write_csv(&p), &p)?;

        let pos: Vec<usize> = (0..test.len()).filter(|&i| test[i].is_positive()).collect();
        let pos_samples: Vec<_> = pos.iter().map(|&i| test[i]).collect();
        let probs = predict_proba(&model, &store, &corpus, &pos_samples, &norm, batch)
            .map_err(anyhow::Error::from)?;
        let mut ranked = rank_by_confidence(&probs);
        ranked.truncate(self.cfg.explain.n_windows * 4);
        ranked.shuffle(&mut rng);
        ranked.truncate(self.cfg.explain.n_windows);
        let mut index =
            String::from("file,subject_id,session_id,start_s,class,p_positive,source_layer\n");
        for &r in &ranked {
            let smp = pos_samples[r];
            let x = corpus.batch_tensor::<f32>(&pos_samples, &[r], &norm);
            let target = crate::train::metrics::argmax(&probs[r]).max(1);
            let cam = match grad_cam(&trained, x, target) {
                Ok(mut c) => c.remove(0),
                Err(crate::interpret::InterpretError::NoConvLayer) => {
                    log::warn!("accelerometer encoder has no convolutional map; skipping Grad-CAM");
                    break;
                }
                Err(e) => return Err(anyhow::Error::from(e).into()),
            };
            let input = corpus.window_input(&smp, &norm);
            let traces: Vec<Vec<f64>> = (0..5)
                .map(|c| input.iter().skip(c).step_by(5).copied().collect())
                .collect();
            let d = &corpus.sessions[smp.session].session;
            let start_s = smp.start_sample as f64 / crate::data::SAMPLE_RATE_HZ as f64;
            let name = format!(
                "cam_{}_{}_{}.svg",
                d.subject_id, d.session_id, smp.start_sample
            );
            let title = format!(
                "{} {} t={start_s}s {} p={:.3}",
                d.subject_id,
                d.session_id,
                smp.class.as_str(),
                1.0 - probs[r][0]
            );
            let p = s.path(&name);
            io(
                fs::write(
                    &p,
                    crate::train::report::cam_svg(&traces, &cam.values, &title),
                ),
                &p,
            )?;
            index.push_str(&format!(
                "{name},{},{},{start_s},{},{},{}\n",
                d.subject_id,
                d.session_id,
                smp.class.as_str(),
                1.0 - probs[r][0],
                cam.source_layer
            ));
        }
        let p = s.path("cams.csv");
        io(fs::write(&p, index), &p)?;
        self.finish(&s)?;
        Ok(s)
    }

    /// Copies the outputs of every completed stage for this configuration
    /// into `<out>/report`. Evaluation is required; sweep and explain are
    /// included when present.
    pub fn report(&self) -> Result<PathBuf, CliError> {
        let (train, manifest) = self.train_dir()?;
        let train = self.require(train)?;
        let eval = self.require(self.locate("eval", &[], &train.hash))?;
        let dest = self.cfg.run.out.join("report");
        io(fs::create_dir_all(&dest), &dest)?;
        let mut copied = Vec::new();
        let mut copy_from = |dir: &Path, pred: &dyn Fn(&str) -> bool| -> anyhow::Result<()> {
            let mut names: Vec<String> = fs::read_dir(dir)?
                .filter_map(|e| e.ok())
                .map(|e| e.file_name().to_string_lossy().into_owned())
                .filter(|n| pred(n))
                .collect();
            names.sort();
            for n in names {
                let to = dest.join(&n);
                fs::copy(dir.join(&n), &to).with_context(|| format!("copying {n}"))?;
                copied.push(n);
            }
            Ok(())
        };
        copy_from(&eval.dir, &|n| {
            n == "metrics.csv" || n == "summary.json" || n.starts_with("confusion_")
        })?;
        if let Ok((pre, _)) = self.preprocess_dir() {
            let sweep = self.locate(
                "sweep",
                &["model", "train", "cv", "task.kind", "sweep", "run.seed"],
                &pre.hash,
            );
            if sweep.done() {
                copy_from(&sweep.dir, &|n| n == "auc_vs_horizon.svg")?;
                fs::copy(sweep.path("metrics.csv"), dest.join("sweep_metrics.csv"))
                    .context("copying sweep metrics")?;
            } else {
                log::warn!("no sweep for this configuration; auc_vs_horizon.svg omitted");
            }
        }
        let explain = self.locate("explain", &["explain"], &train.hash);
        if explain.done() {
            copy_from(&explain.dir, &|n| {
                n == "shap.csv" || n == "cams.csv" || n.starts_with("cam_")
            })?;
        } else {
            log::warn!("no explain run for this configuration; shap.csv omitted");
        }
        let p = dest.join("config.txt");
        io(fs::write(&p, self.cfg.to_text()), &p)?;
        let p = dest.join("provenance.txt");
        io(
            fs::write(
                &p,
                format!(
                    "manifest = {}\ntrain = {}\neval = {}\n",
                    manifest.display(),
                    train.hash,
                    eval.hash
                ),
            ),
            &p,
        )?;
        log::info!("report: {} files in {}", copied.len(), dest.display());
        Ok(dest)
    }

    fn provenance(&self, s: &StageDir) -> String {
        format!(
            "cbpredict {} {} {}",
            env!("CARGO_PKG_VERSION"),
            s.stage,
            s.hash
        )
    }
}
