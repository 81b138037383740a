//! Self-supervised adaptation of a phase-1 segmenter to one video clip.
//!
//! The student is the phase-1 model with a temporal attention unit between
//! neck and head; its head is frozen. A frozen teacher copy of the phase-1
//! model sees the same support set and frames. The objective combines
//! temporal consistency of the student's attended features, feature
//! agreement with the teacher and prediction agreement with the teacher.

pub mod temporal;

pub use temporal::temporal_attention;

use std::ops::Range;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::backbone::FeatureMap;
use crate::data::{LabeledImage, VideoClip};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::{ModelState, HEAD_PREFIX};
use crate::optim::{sgd_step, GradMap};
use crate::segmenter::{forward_nodes, predict, SegPrediction, SupportInput};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub temporal: f64,
    pub feature: f64,
    pub prediction: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            temporal: 1.0,
            feature: 1.0,
            prediction: 1.0,
        }
    }
}

impl LossWeights {
    pub fn new(temporal: f64, feature: f64, prediction: f64) -> Result<Self> {
        let w = Self {
            temporal,
            feature,
            prediction,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("temporal", self.temporal),
            ("feature", self.feature),
            ("prediction", self.prediction),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!(
                    "loss weight `{name}` must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Which tensor the feature-consistency term compares.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureTap {
    /// Fusion output, before the neck.
    PreNeck,
    /// Neck output, the tensor that feeds the head (or the temporal unit).
    PostNeck,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RelearnConfig {
    pub lr: f64,
    /// Frames per temporal batch.
    pub batch_size: usize,
    /// Passes over the clip's query frames.
    pub epochs: usize,
    /// Hard cap on optimisation steps, on top of `epochs`.
    pub max_iterations: Option<usize>,
    /// Stop once a step's total loss falls below this.
    pub early_stop_loss: f64,
    pub feature_tap: FeatureTap,
    /// Seed for the temporal unit's initial weights.
    pub seed: u64,
    pub log_every: usize,
}

impl Default for RelearnConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            batch_size: 4,
            epochs: 20,
            max_iterations: None,
            early_stop_loss: 1e-5,
            feature_tap: FeatureTap::PostNeck,
            seed: 0,
            log_every: 20,
        }
    }
}

impl RelearnConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::config("relearn lr must be finite and non-negative"));
        }
        if self.batch_size < 2 {
            return Err(Error::config(
                "relearn batch_size must be at least 2 to form a frame pair",
            ));
        }
        Ok(())
    }
}

/// Consecutive video frames, `[b, c, h, w]`, with their clip-level indices.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalBatch {
    frames: Tensor,
    frame_indices: Vec<usize>,
}

impl TemporalBatch {
    pub fn new(frames: Tensor, frame_indices: Vec<usize>) -> Result<Self> {
        if frames.rank() != 4 || frames.shape()[0] != frame_indices.len() {
            return Err(Error::shape(format!(
                "{} indices for frames {:?}",
                frame_indices.len(),
                frames.shape()
            )));
        }
        if frame_indices.is_empty() || frame_indices.windows(2).any(|w| w[1] != w[0] + 1) {
            return Err(Error::Validation(format!(
                "frame indices {frame_indices:?} are not consecutive"
            )));
        }
        Ok(Self {
            frames,
            frame_indices,
        })
    }

    /// Frames `range` of `clip`'s query sequence.
    pub fn from_clip(clip: &VideoClip, range: Range<usize>) -> Result<Self> {
        let queries = clip.query_frames();
        if range.is_empty() || range.end > queries.len() {
            return Err(Error::Validation(format!(
                "window {range:?} outside {} query frames",
                queries.len()
            )));
        }
        let offset = clip.annotated_prefix();
        Self::new(
            Tensor::stack(&queries[range.clone()])?,
            range.map(|i| i + offset).collect(),
        )
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn frame_indices(&self) -> &[usize] {
        &self.frame_indices
    }

    pub fn len(&self) -> usize {
        self.frame_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_indices.is_empty()
    }
}

/// Non-overlapping windows of `size` over `n` frames. A trailing window of
/// a single frame is merged into the previous one.
pub fn relearn_windows(n: usize, size: usize) -> Result<Vec<Range<usize>>> {
    if size < 2 {
        return Err(Error::config("window size must be at least 2"));
    }
    if n < 2 {
        return Err(Error::Validation(format!(
            "relearning needs at least two query frames, got {n}"
        )));
    }
    let mut out: Vec<Range<usize>> = (0..n).step_by(size).map(|s| s..(s + size).min(n)).collect();
    if out.len() > 1 && out.last().is_some_and(|r| r.len() == 1) {
        let last = out.pop().expect("non-empty");
        out.last_mut().expect("len > 1").end = last.end;
    }
    Ok(out)
}

/// Non-overlapping windows of `window` over `n` frames; the tail may be shorter.
pub fn inference_windows(n: usize, window: usize) -> Result<Vec<Range<usize>>> {
    if window == 0 {
        return Err(Error::config("inference window must be at least 1"));
    }
    Ok((0..n)
        .step_by(window)
        .map(|s| s..(s + window).min(n))
        .collect())
}

/// `1 − mean cos(f_t, f_{t+1})` over consecutive pairs of flattened frames.
pub fn loss_temporal(features: &[Tensor]) -> Result<f64> {
    if features.len() < 2 {
        return Err(Error::Validation(
            "temporal consistency needs at least two frames".into(),
        ));
    }
    let stacked = Tensor::stack(features)?;
    let mut g = Graph::new();
    let x = g.constant(stacked);
    let l = g.temporal_consistency(x);
    Ok(g.value(l).data()[0])
}

/// Mean squared difference over every element of two feature maps.
pub fn loss_feature(student: &FeatureMap, teacher: &FeatureMap) -> Result<f64> {
    mse(&student.data, &teacher.data)
}

/// Mean squared difference between foreground-probability maps.
pub fn loss_prediction(student: &SegPrediction, teacher: &SegPrediction) -> Result<f64> {
    if student.probs.shape() != teacher.probs.shape() {
        return Err(Error::shape(format!(
            "prediction shapes {:?} and {:?} differ",
            student.probs.shape(),
            teacher.probs.shape()
        )));
    }
    let mut g = Graph::new();
    let s = g.constant(student.probs.clone());
    let t = g.constant(teacher.probs.clone());
    let sf = g.select_channel(s, 1);
    let tf = g.select_channel(t, 1);
    let l = g.mse(sf, tf);
    Ok(g.value(l).data()[0])
}

fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "feature shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    let mut g = Graph::new();
    let (x, y) = (g.constant(a.clone()), g.constant(b.clone()));
    let l = g.mse(x, y);
    Ok(g.value(l).data()[0])
}

pub fn total_loss(l_t: f64, l_f: f64, l_p: f64, w: &LossWeights) -> f64 {
    w.temporal * l_t + w.feature * l_f + w.prediction * l_p
}

/// The frozen phase-1 teacher and the student being adapted.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherStudentPair {
    pub teacher: ModelState,
    pub student: ModelState,
}

impl TeacherStudentPair {
    /// Teacher: `phase1` with every parameter frozen. Student: `phase1` plus
    /// a temporal unit, everything trainable except the head.
    pub fn new(phase1: &ModelState, seed: u64) -> Result<Self> {
        if phase1.arch.temporal_unit {
            return Err(Error::config(
                "expected a phase-1 model without a temporal unit",
            ));
        }
        let mut teacher = phase1.clone();
        teacher.params.freeze_all();
        let mut student = phase1.with_temporal_unit(seed);
        student.params.set_frozen("", false);
        student.params.set_frozen(HEAD_PREFIX, true);
        student.source_hash = Some(phase1.content_hash());
        Ok(Self { teacher, student })
    }

    fn check(&self) -> Result<()> {
        if self.teacher.arch.temporal_unit || !self.student.arch.temporal_unit {
            return Err(Error::config(
                "teacher must lack and student must carry a temporal unit",
            ));
        }
        if self.teacher.params.iter().any(|(_, p)| !p.frozen) {
            return Err(Error::config("teacher has unfrozen parameters"));
        }
        if self
            .student
            .params
            .iter()
            .any(|(n, p)| n.starts_with(HEAD_PREFIX) && !p.frozen)
        {
            return Err(Error::config("student head is not frozen"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_t: f64,
    pub l_f: f64,
    pub l_p: f64,
    pub total: f64,
}

/// Losses and student gradients for one temporal batch.
pub struct ObjectiveEval {
    pub losses: LossBreakdown,
    pub grads: GradMap,
    /// Largest absolute gradient that reached any teacher parameter.
    pub teacher_grad_max: f64,
}

/// Evaluate the relearning objective on `frames` (`[b, c, h, w]`, `b ≥ 2`)
/// and back-propagate into the student's trainable parameters.
pub fn evaluate_objective(
    pair: &TeacherStudentPair,
    support: &[LabeledImage],
    frames: &Tensor,
    weights: &LossWeights,
    tap: FeatureTap,
) -> Result<ObjectiveEval> {
    let support = SupportInput::new(support)?;
    objective(pair, &pair.student, &support, frames, weights, tap)
}

fn objective(
    pair: &TeacherStudentPair,
    student: &ModelState,
    support: &SupportInput,
    frames: &Tensor,
    weights: &LossWeights,
    tap: FeatureTap,
) -> Result<ObjectiveEval> {
    if frames.rank() != 4 || frames.shape()[0] < 2 {
        return Err(Error::shape(format!(
            "temporal batch needs [b>=2, c, h, w], got {:?}",
            frames.shape()
        )));
    }
    let mut g = Graph::new();
    let tp = pair.teacher.params.bind_tracked(&mut g);
    let sp = student.params.bind(&mut g, true);
    let t = forward_nodes(&mut g, &tp, &pair.teacher.arch, support, frames, false)?;
    let s = forward_nodes(&mut g, &sp, &student.arch, support, frames, true)?;
    let pick = |n: &crate::segmenter::ForwardNodes| match tap {
        FeatureTap::PreNeck => n.fused,
        FeatureTap::PostNeck => n.neck,
    };
    let t_feat = g.detach(pick(&t));
    let t_fg = g.select_channel(t.probs, 1);
    let t_fg = g.detach(t_fg);

    let attended = s.temporal.expect("student pass runs the temporal unit");
    let l_t = g.temporal_consistency(attended);
    let l_f = g.mse(pick(&s), t_feat);
    let s_fg = g.select_channel(s.probs, 1);
    let l_p = g.mse(s_fg, t_fg);
    let total = g.weighted_sum(&[
        (l_t, weights.temporal),
        (l_f, weights.feature),
        (l_p, weights.prediction),
    ]);
    let scalar = |v: Var| g.value(v).data()[0];
    let losses = LossBreakdown {
        l_t: scalar(l_t),
        l_f: scalar(l_f),
        l_p: scalar(l_p),
        total: scalar(total),
    };
    if !losses.total.is_finite() {
        return Err(Error::Numeric(format!(
            "relearn loss is not finite: {losses:?}"
        )));
    }
    let mut grads = g.backward(total);
    let teacher_grad_max = tp
        .iter()
        .filter_map(|(_, v)| grads.get(v))
        .flat_map(|t| t.data().iter().map(|x| x.abs()))
        .fold(0.0, f64::max);
    let grads = sp.collect_grads(&mut grads);
    Ok(ObjectiveEval {
        losses,
        grads,
        teacher_grad_max,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelearnRecord {
    pub iteration: usize,
    pub epoch: usize,
    /// First clip-level frame index of the batch.
    pub first_frame: usize,
    pub l_t: f64,
    pub l_f: f64,
    pub l_p: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct RelearnOutcome {
    pub student: ModelState,
    pub log: Vec<RelearnRecord>,
    /// Largest teacher gradient seen over the run; zero when the teacher
    /// was properly isolated.
    pub teacher_grad_max: f64,
    pub stopped_early: bool,
}

/// Adapt `pair.student` to `clip` using only its frames and annotated prefix.
pub fn relearn(
    pair: &TeacherStudentPair,
    clip: &VideoClip,
    weights: &LossWeights,
    cfg: &RelearnConfig,
) -> Result<RelearnOutcome> {
    weights.validate()?;
    cfg.validate()?;
    pair.check()?;
    let support = SupportInput::new(&clip.support())?;
    let windows = relearn_windows(clip.query_frames().len(), cfg.batch_size)?;
    let batches = windows
        .into_iter()
        .map(|r| TemporalBatch::from_clip(clip, r))
        .collect::<Result<Vec<_>>>()?;

    let head_before = pair.student.params.bytes_with_prefix(HEAD_PREFIX);
    let teacher_before = pair.teacher.params.bytes_with_prefix("");
    let mut student = pair.student.clone();
    let limit = cfg.max_iterations.unwrap_or(usize::MAX);
    let mut log = Vec::new();
    let mut teacher_grad_max = 0.0f64;
    let mut stopped_early = false;

    'epochs: for epoch in 0..cfg.epochs {
        for batch in &batches {
            if log.len() >= limit {
                break 'epochs;
            }
            let eval = objective(
                pair,
                &student,
                &support,
                batch.frames(),
                weights,
                cfg.feature_tap,
            )?;
            teacher_grad_max = teacher_grad_max.max(eval.teacher_grad_max);
            sgd_step(&mut student.params, &eval.grads, cfg.lr);
            if student.params.bytes_with_prefix(HEAD_PREFIX) != head_before {
                return Err(Error::FreezeViolation(format!(
                    "student head changed at iteration {}",
                    log.len()
                )));
            }
            let l = eval.losses;
            let rec = RelearnRecord {
                iteration: log.len(),
                epoch,
                first_frame: batch.frame_indices()[0],
                l_t: l.l_t,
                l_f: l.l_f,
                l_p: l.l_p,
                total: l.total,
            };
            if cfg.log_every > 0 && rec.iteration.is_multiple_of(cfg.log_every) {
                info!(
                    "relearn iter {:>4} L_t {:.5} L_f {:.5} L_p {:.5} total {:.5}",
                    rec.iteration, rec.l_t, rec.l_f, rec.l_p, rec.total
                );
            }
            log.push(rec);
            if l.total < cfg.early_stop_loss {
                stopped_early = true;
                break 'epochs;
            }
        }
    }
    if pair.teacher.params.bytes_with_prefix("") != teacher_before {
        return Err(Error::FreezeViolation("teacher parameters changed".into()));
    }
    if teacher_grad_max != 0.0 {
        warn!("teacher received a gradient of magnitude {teacher_grad_max}");
    }
    student
        .meta
        .insert("relearn_iterations".into(), log.len().to_string());
    student.meta.insert(
        "loss_weights".into(),
        format!(
            "{},{},{}",
            weights.temporal, weights.feature, weights.prediction
        ),
    );
    Ok(RelearnOutcome {
        student,
        log,
        teacher_grad_max,
        stopped_early,
    })
}

/// Segment the query frames of `clip` with a relearned student, `window`
/// consecutive frames at a time through the temporal unit.
pub fn infer_video_relearned(
    clip: &VideoClip,
    student: &ModelState,
    window: usize,
) -> Result<SegPrediction> {
    let support = clip.support();
    let queries = clip.query_frames();
    let parts = inference_windows(queries.len(), window)?
        .into_iter()
        .map(|r| predict(student, &support, &Tensor::stack(&queries[r])?, true))
        .collect::<Result<Vec<_>>>()?;
    SegPrediction::concat(&parts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relearn_windows_merge_single_tail() {
        assert_eq!(relearn_windows(8, 4).unwrap(), vec![0..4, 4..8]);
        assert_eq!(relearn_windows(9, 4).unwrap(), vec![0..4, 4..9]);
        assert_eq!(relearn_windows(7, 4).unwrap(), vec![0..4, 4..7]);
        assert_eq!(relearn_windows(3, 4).unwrap(), vec![0..3]);
        assert!(relearn_windows(1, 4).is_err());
        assert!(relearn_windows(5, 1).is_err());
    }

    #[test]
    fn inference_windows_partition() {
        assert_eq!(inference_windows(7, 4).unwrap(), vec![0..4, 4..7]);
        assert_eq!(inference_windows(3, 1).unwrap(), vec![0..1, 1..2, 2..3]);
        assert!(inference_windows(3, 0).is_err());
    }

    #[test]
    fn total_loss_examples() {
        let ones = LossWeights::default();
        assert!((total_loss(0.2, 0.1, 0.3, &ones) - 0.6).abs() < 1e-15);
        assert_eq!(
            total_loss(0.2, 0.1, 0.3, &LossWeights::new(0.0, 0.0, 0.0).unwrap()),
            0.0
        );
        assert_eq!(
            total_loss(0.5, 9.0, 9.0, &LossWeights::new(2.0, 0.0, 0.0).unwrap()),
            1.0
        );
        assert!(LossWeights::new(-1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn batch_indices_must_be_consecutive() {
        let f = Tensor::zeros(&[2, 1, 2, 2]);
        assert!(TemporalBatch::new(f.clone(), vec![3, 4]).is_ok());
        assert!(TemporalBatch::new(f, vec![3, 5]).is_err());
    }
}
