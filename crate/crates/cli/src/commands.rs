//! The five verbs. Each takes the parsed [`RunConfig`] plus its own
//! arguments and writes its artifacts under the output root.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use fsvos::checkpoint::{load_model, load_trainer, save_model, save_trainer, Manifest};
use fsvos::data::io::{read_dataset, write_dataset, DatasetManifest};
use fsvos::data::{ImageDataset, VideoClip};
use fsvos::metrics::Aggregate;
use fsvos::model::HEAD_PREFIX;
use fsvos::relearn::{
    infer_video_relearned, relearn, LossWeights, RelearnOutcome, TeacherStudentPair,
};
use fsvos::segmenter::{infer_video_naive, LossRecord, Phase1Trainer};
use fsvos::{Error, ModelState};
use log::{info, warn};
use serde::Serialize;

use crate::ablation::{run_ablation, AblationTable};
use crate::config::RunConfig;
use crate::eval::{metrics_csv, score_clip, write_overlays, FrameRow};

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

pub fn gen_data(cfg: &RunConfig, out: Option<PathBuf>) -> Result<(PathBuf, DatasetManifest)> {
    let dir = out.unwrap_or_else(|| cfg.dataset_dir());
    let manifest = write_dataset(
        &dir,
        &cfg.synth,
        cfg.data.images_per_class,
        cfg.data.clips_per_class,
    )?;
    info!(
        "wrote {} images and {} clips to {}",
        manifest.images.len(),
        manifest.clips.len(),
        dir.display()
    );
    Ok((dir, manifest))
}

/// Clips of a generated dataset, keyed `class/index`.
pub struct LoadedData {
    pub images: ImageDataset,
    pub clips: Vec<(String, VideoClip)>,
}

pub fn load_data(dir: &Path) -> Result<LoadedData> {
    if !dir.join("manifest.json").exists() {
        bail!(
            "no dataset at {}; run `fsvos gen-data` first",
            dir.display()
        );
    }
    let (manifest, images, clips) = read_dataset(dir)?;
    let clips = manifest
        .clips
        .iter()
        .map(|e| format!("{}/{:05}", e.class, e.id))
        .zip(clips)
        .collect();
    Ok(LoadedData { images, clips })
}

#[derive(Clone, Debug, Default)]
pub struct TrainArgs {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Total iterations to reach; defaults to the full schedule.
    pub iterations: Option<usize>,
    pub resume: Option<PathBuf>,
}

pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub manifest: Manifest,
    pub log: Vec<LossRecord>,
}

pub fn train_image(cfg: &RunConfig, args: &TrainArgs) -> Result<TrainSummary> {
    let data = load_data(&args.data.clone().unwrap_or_else(|| cfg.dataset_dir()))?;
    let mut trainer = match &args.resume {
        Some(dir) => {
            let t =
                load_trainer(dir).with_context(|| format!("resuming from {}", dir.display()))?;
            if t.model.arch != cfg.model {
                warn!("resumed checkpoint architecture differs from the config; using the checkpoint's");
            }
            info!("resuming at iteration {}", t.iteration);
            t
        }
        None => Phase1Trainer::new(ModelState::init(&cfg.model, cfg.seed)?, cfg.seed),
    };
    let until = args
        .iterations
        .unwrap_or_else(|| cfg.phase1.total_iterations());
    let log = trainer.run_until(&data.images, &cfg.phase1, until, |_| {})?;

    let dir = args.out.clone().unwrap_or_else(|| cfg.phase1_dir());
    let manifest = save_trainer(&dir, &trainer)?;
    let mut csv = String::from("iteration,optimizer,lr,loss\n");
    for r in &log {
        let opt = serde_json::to_value(r.optimizer)?;
        writeln!(
            csv,
            "{},{},{:e},{:.8}",
            r.iteration,
            opt.as_str().unwrap_or(""),
            r.lr,
            r.loss
        )?;
    }
    write(&dir.join("loss.csv"), &csv)?;
    info!(
        "phase-1 checkpoint at {} (iteration {})",
        dir.display(),
        trainer.iteration
    );
    Ok(TrainSummary {
        checkpoint: dir,
        manifest,
        log,
    })
}

#[derive(Clone, Debug, Default)]
pub struct RelearnArgs {
    pub checkpoint: PathBuf,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub clip: usize,
    pub lambda1: Option<f64>,
    pub lambda2: Option<f64>,
    pub lambda3: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct FreezeReport {
    pub teacher_unchanged: bool,
    pub head_unchanged: bool,
    pub teacher_grad_max: f64,
}

impl FreezeReport {
    pub fn holds(&self) -> bool {
        self.teacher_unchanged && self.head_unchanged && self.teacher_grad_max == 0.0
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RelearnReport {
    pub clip: String,
    pub variant: String,
    pub weights: LossWeights,
    pub iterations: usize,
    pub stopped_early: bool,
    pub source_hash: String,
    pub freeze: FreezeReport,
    pub checkpoint: PathBuf,
}

/// Name of a weighting in the ablation vocabulary.
pub fn variant_name(w: &LossWeights) -> &'static str {
    match (w.temporal > 0.0, w.feature > 0.0, w.prediction > 0.0) {
        (true, true, true) => "full",
        (false, true, true) => "no-l_t",
        (true, false, true) => "no-l_f",
        (true, true, false) => "no-l_p",
        (false, false, false) => "none",
        _ => "partial",
    }
}

fn load_phase1(path: &Path) -> Result<ModelState> {
    let model =
        load_model(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    if model.arch.temporal_unit {
        return Err(Error::config(format!(
            "{} already carries a temporal unit; pass a phase-1 checkpoint",
            path.display()
        ))
        .into());
    }
    Ok(model)
}

fn relearn_log_csv(out: &RelearnOutcome) -> Result<String> {
    let mut csv = String::from("iteration,epoch,first_frame,l_t,l_f,l_p,total\n");
    for r in &out.log {
        writeln!(
            csv,
            "{},{},{},{:.8e},{:.8e},{:.8e},{:.8e}",
            r.iteration, r.epoch, r.first_frame, r.l_t, r.l_f, r.l_p, r.total
        )?;
    }
    Ok(csv)
}

pub fn relearn_clip(cfg: &RunConfig, args: &RelearnArgs) -> Result<RelearnReport> {
    let phase1 = load_phase1(&args.checkpoint)?;
    let data = load_data(&args.data.clone().unwrap_or_else(|| cfg.dataset_dir()))?;
    let Some((clip_id, clip)) = data.clips.get(args.clip) else {
        bail!(
            "clip index {} out of range ({} clips)",
            args.clip,
            data.clips.len()
        );
    };
    let weights = LossWeights::new(
        args.lambda1.unwrap_or(cfg.lambda.temporal),
        args.lambda2.unwrap_or(cfg.lambda.feature),
        args.lambda3.unwrap_or(cfg.lambda.prediction),
    )?;
    let variant = variant_name(&weights);
    let pair = TeacherStudentPair::new(&phase1, cfg.relearn.seed)?;
    let outcome = relearn(&pair, clip, &weights, &cfg.relearn)?;

    let dir = args
        .out
        .clone()
        .unwrap_or_else(|| cfg.relearn_dir().join(clip_id));
    let mut student = outcome.student.clone();
    student.meta.insert("clip".into(), clip_id.clone());
    student.meta.insert("variant".into(), variant.into());
    save_model(&dir, &student)?;
    write(&dir.join("loss.csv"), &relearn_log_csv(&outcome)?)?;

    // re-check against what is on disk, not only what is in memory
    let saved = load_model(&dir)?;
    let reloaded_teacher = load_model(&args.checkpoint)?;
    let freeze = FreezeReport {
        teacher_unchanged: reloaded_teacher.params.bytes_with_prefix("")
            == pair.teacher.params.bytes_with_prefix(""),
        head_unchanged: saved.params.bytes_with_prefix(HEAD_PREFIX)
            == phase1.params.bytes_with_prefix(HEAD_PREFIX),
        teacher_grad_max: outcome.teacher_grad_max,
    };
    let report = RelearnReport {
        clip: clip_id.clone(),
        variant: variant.into(),
        weights,
        iterations: outcome.log.len(),
        stopped_early: outcome.stopped_early,
        source_hash: saved.source_hash.clone().unwrap_or_default(),
        freeze,
        checkpoint: dir.clone(),
    };
    write(
        &dir.join("report.json"),
        &serde_json::to_string_pretty(&report)?,
    )?;
    if !report.freeze.holds() {
        return Err(Error::FreezeViolation(format!("{:?}", report.freeze)).into());
    }
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Naive,
    Relearned,
}

impl EvalMode {
    pub fn name(self) -> &'static str {
        match self {
            EvalMode::Naive => "naive",
            EvalMode::Relearned => "relearned",
        }
    }
}

#[derive(Clone, Debug)]
pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub mode: EvalMode,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Evaluate a single clip instead of all of them.
    pub clip: Option<usize>,
    pub overlays: bool,
}

pub struct EvalSummary {
    pub rows: Vec<FrameRow>,
    pub summary: Aggregate,
    pub overlays: usize,
    pub dir: PathBuf,
}

pub fn eval(cfg: &RunConfig, args: &EvalArgs) -> Result<EvalSummary> {
    let model = load_model(&args.checkpoint)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    let data = load_data(&args.data.clone().unwrap_or_else(|| cfg.dataset_dir()))?;
    let clips: Vec<&(String, VideoClip)> = match args.clip {
        Some(i) => vec![data
            .clips
            .get(i)
            .with_context(|| format!("clip index {i} out of range"))?],
        None => data.clips.iter().collect(),
    };
    let dir = args
        .out
        .clone()
        .unwrap_or_else(|| cfg.eval_dir().join(args.mode.name()));
    let pair = match (args.mode, model.arch.temporal_unit) {
        (EvalMode::Relearned, false) => Some(TeacherStudentPair::new(&model, cfg.relearn.seed)?),
        _ => None,
    };
    let mut rows = Vec::new();
    let mut overlays = 0;
    for (id, clip) in clips {
        let pred = match (args.mode, &pair) {
            (EvalMode::Naive, _) => infer_video_naive(clip, &model)?,
            (EvalMode::Relearned, None) => infer_video_relearned(clip, &model, cfg.window())?,
            (EvalMode::Relearned, Some(p)) => {
                let out = relearn(p, clip, &cfg.lambda, &cfg.relearn)?;
                infer_video_relearned(clip, &out.student, cfg.window())?
            }
        };
        rows.extend(score_clip(id, clip, &pred)?);
        if args.overlays {
            overlays += write_overlays(&dir.join("overlays").join(id), clip, &pred)?;
        }
    }
    let (csv, summary) = metrics_csv(&rows, args.mode.name())?;
    write(&dir.join("metrics.csv"), &csv)?;
    info!(
        "{}: mean dice {:.4} over {} frames",
        args.mode.name(),
        summary.mean.dice,
        summary.count
    );
    Ok(EvalSummary {
        rows,
        summary,
        overlays,
        dir,
    })
}

#[derive(Clone, Debug)]
pub struct AblateArgs {
    pub checkpoint: PathBuf,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Use only the first `n` clips.
    pub max_clips: Option<usize>,
}

pub fn ablate(cfg: &RunConfig, args: &AblateArgs) -> Result<(PathBuf, AblationTable)> {
    let phase1 = load_phase1(&args.checkpoint)?;
    let mut data = load_data(&args.data.clone().unwrap_or_else(|| cfg.dataset_dir()))?;
    if let Some(n) = args.max_clips {
        data.clips.truncate(n);
    }
    if data.clips.is_empty() {
        bail!("no clips to evaluate");
    }
    let table = run_ablation(
        &phase1,
        &data.clips,
        &cfg.lambda,
        &cfg.relearn,
        cfg.window(),
    )?;
    let dir = args.out.clone().unwrap_or_else(|| cfg.ablate_dir());
    write(&dir.join("table.md"), &table.to_markdown())?;
    write(&dir.join("table.csv"), &table.to_csv())?;
    write(
        &dir.join("table.json"),
        &serde_json::to_string_pretty(&table)?,
    )?;
    for r in table.rows.iter().filter(|r| r.flagged) {
        warn!(
            "row (L_t {}, L_f {}, L_p {}) collapsed to dice {:.4}",
            r.temporal, r.feature, r.prediction, r.mean.dice
        );
    }
    Ok((dir, table))
}
