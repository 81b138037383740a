//! Leave-one-loss-out study: a baseline without relearning, the three
//! variants that drop one term, and the full objective.

use std::fmt::Write as _;

use fsvos::data::VideoClip;
use fsvos::metrics::{aggregate, SegScore};
use fsvos::relearn::{
    infer_video_relearned, relearn, LossWeights, RelearnConfig, TeacherStudentPair,
};
use fsvos::segmenter::infer_video_naive;
use fsvos::{ModelState, Result};
use log::info;
use serde::Serialize;

use crate::eval::score_clip;

/// `(L_t, L_f, L_p)` switches per row; the all-off row is the baseline and
/// skips relearning entirely.
pub const ROWS: [(bool, bool, bool); 5] = [
    (false, false, false),
    (false, true, true),
    (true, false, true),
    (true, true, false),
    (true, true, true),
];

/// A row without `L_p` is flagged when its Dice drops below this fraction of
/// the baseline.
pub const COLLAPSE_FRACTION: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub temporal: bool,
    pub feature: bool,
    pub prediction: bool,
    /// Mean over clips of the per-clip mean score.
    pub mean: SegScore,
    pub clip_dice: Vec<f64>,
    pub flagged: bool,
}

impl AblationRow {
    pub fn is_baseline(&self) -> bool {
        !(self.temporal || self.feature || self.prediction)
    }

    pub fn is_full(&self) -> bool {
        self.temporal && self.feature && self.prediction
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

/// Scale each enabled term by the configured weight.
fn weights_for(row: (bool, bool, bool), base: &LossWeights) -> LossWeights {
    let on = |b: bool, w: f64| if b { w } else { 0.0 };
    LossWeights {
        temporal: on(row.0, base.temporal),
        feature: on(row.1, base.feature),
        prediction: on(row.2, base.prediction),
    }
}

/// Run every row of [`ROWS`] on `clips` (each must carry evaluation masks).
pub fn run_ablation(
    phase1: &ModelState,
    clips: &[(String, VideoClip)],
    weights: &LossWeights,
    cfg: &RelearnConfig,
    window: usize,
) -> Result<AblationTable> {
    let pair = TeacherStudentPair::new(phase1, cfg.seed)?;
    let mut rows = Vec::with_capacity(ROWS.len());
    for row in ROWS {
        let w = weights_for(row, weights);
        let mut per_clip = Vec::with_capacity(clips.len());
        for (id, clip) in clips {
            let pred = if row == (false, false, false) {
                infer_video_naive(clip, phase1)?
            } else {
                let out = relearn(&pair, clip, &w, cfg)?;
                infer_video_relearned(clip, &out.student, window)?
            };
            let scores: Vec<SegScore> = score_clip(id, clip, &pred)?
                .into_iter()
                .map(|r| r.score)
                .collect();
            per_clip.push(aggregate(&scores)?.mean);
        }
        let mean = aggregate(&per_clip)?.mean;
        info!("ablation {row:?}: dice {:.4}", mean.dice);
        rows.push(AblationRow {
            temporal: row.0,
            feature: row.1,
            prediction: row.2,
            mean,
            clip_dice: per_clip.iter().map(|s| s.dice).collect(),
            flagged: false,
        });
    }
    let baseline = rows[0].mean.dice;
    for r in rows
        .iter_mut()
        .filter(|r| !r.prediction && !r.is_baseline())
    {
        r.flagged = r.mean.dice < COLLAPSE_FRACTION * baseline;
    }
    Ok(AblationTable { rows })
}

impl AblationTable {
    pub fn baseline(&self) -> &AblationRow {
        &self.rows[0]
    }

    pub fn full(&self) -> &AblationRow {
        self.rows.iter().find(|r| r.is_full()).expect("full row")
    }

    pub fn leave_one_out(&self) -> impl Iterator<Item = &AblationRow> {
        self.rows
            .iter()
            .filter(|r| !r.is_baseline() && !r.is_full())
    }

    pub fn to_markdown(&self) -> String {
        let mark = |b: bool| if b { "✓" } else { "✗" };
        let mut out = String::from("| L_t | L_f | L_p | Dice | FG-IoU | FB-IoU | note |\n");
        out.push_str("|:---:|:---:|:---:|---:|---:|---:|---|\n");
        for r in &self.rows {
            let note = if r.flagged { "collapse" } else { "" };
            writeln!(
                out,
                "| {} | {} | {} | {:.4} | {:.4} | {:.4} | {note} |",
                mark(r.temporal),
                mark(r.feature),
                mark(r.prediction),
                r.mean.dice,
                r.mean.fg_iou,
                r.mean.fb_iou
            )
            .expect("writing to a String");
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("l_t,l_f,l_p,dice,fg_iou,bg_iou,fb_iou,flagged\n");
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{:.6},{:.6},{:.6},{:.6},{}",
                u8::from(r.temporal),
                u8::from(r.feature),
                u8::from(r.prediction),
                r.mean.dice,
                r.mean.fg_iou,
                r.mean.bg_iou,
                r.mean.fb_iou,
                r.flagged
            )
            .expect("writing to a String");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_follow_the_on_off_pattern() {
        assert_eq!(ROWS.iter().filter(|r| r.0 && r.1 && r.2).count(), 1);
        let drops: Vec<usize> = ROWS[1..4]
            .iter()
            .map(|r| [r.0, r.1, r.2].iter().filter(|b| !**b).count())
            .collect();
        assert_eq!(drops, vec![1, 1, 1]);
    }

    #[test]
    fn disabled_terms_get_zero_weight() {
        let w = weights_for(
            (true, false, true),
            &LossWeights::new(2.0, 3.0, 4.0).unwrap(),
        );
        assert_eq!((w.temporal, w.feature, w.prediction), (2.0, 0.0, 4.0));
    }
}
