//! Per-frame scoring, CSV output and mask overlays.

use std::fmt::Write as _;
use std::path::Path;

use fsvos::data::io::save_image_png;
use fsvos::data::VideoClip;
use fsvos::metrics::{aggregate, score_masks, Aggregate, SegScore};
use fsvos::segmenter::SegPrediction;
use fsvos::{Error, Result, Tensor};

/// One scored query frame. `frame_id` is the clip-level frame index.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameRow {
    pub clip_id: String,
    pub frame_id: usize,
    pub score: SegScore,
}

/// Score a clip's predictions against its evaluation masks.
pub fn score_clip(clip_id: &str, clip: &VideoClip, pred: &SegPrediction) -> Result<Vec<FrameRow>> {
    let gts = clip
        .evaluation_masks()
        .ok_or_else(|| Error::Validation(format!("clip {clip_id} has no evaluation masks")))?;
    let scores = score_masks(&pred.masks(), gts)?;
    Ok(clip
        .query_indices()
        .zip(scores)
        .map(|(frame_id, score)| FrameRow {
            clip_id: clip_id.to_string(),
            frame_id,
            score,
        })
        .collect())
}

pub const CSV_HEADER: &str = "clip_id,frame_id,dice,fg_iou,bg_iou,fb_iou";

fn csv_line(out: &mut String, clip: &str, frame: &str, s: &SegScore) {
    writeln!(
        out,
        "{clip},{frame},{:.6},{:.6},{:.6},{:.6}",
        s.dice, s.fg_iou, s.bg_iou, s.fb_iou
    )
    .expect("writing to a String");
}

/// Per-frame rows followed by a `mean` summary row.
pub fn metrics_csv(rows: &[FrameRow], label: &str) -> Result<(String, Aggregate)> {
    let scores: Vec<SegScore> = rows.iter().map(|r| r.score).collect();
    let summary = aggregate(&scores)?;
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        csv_line(&mut out, &r.clip_id, &r.frame_id.to_string(), &r.score);
    }
    csv_line(
        &mut out,
        &format!("mean:{label}"),
        &summary.count.to_string(),
        &summary.mean,
    );
    Ok((out, summary))
}

/// Frame with the predicted mask tinted red, `[3, h, w]`.
pub fn overlay(frame: &Tensor, mask: &Tensor) -> Tensor {
    let (c, h, w) = (frame.shape()[0], frame.shape()[1], frame.shape()[2]);
    Tensor::from_fn(&[3, h, w], |i| {
        let (ch, px) = (i / (h * w), i % (h * w));
        let v = frame.data()[ch.min(c - 1) * h * w + px];
        if mask.data()[px] > 0.5 {
            let tint = if ch == 0 { 1.0 } else { 0.0 };
            0.5 * v + 0.5 * tint
        } else {
            v
        }
    })
}

/// One PNG per query frame, named by clip-level frame index.
pub fn write_overlays(dir: &Path, clip: &VideoClip, pred: &SegPrediction) -> Result<usize> {
    std::fs::create_dir_all(dir)?;
    let masks = pred.masks();
    for (t, (frame, mask)) in clip
        .query_indices()
        .zip(clip.query_frames().iter().zip(&masks))
    {
        save_image_png(
            &dir.join(format!("overlay_{t:04}.png")),
            &overlay(frame, mask),
        )?;
    }
    Ok(masks.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlay_tints_only_masked_pixels() {
        let frame = Tensor::full(&[3, 1, 2], 0.2);
        let mask = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let o = overlay(&frame, &mask);
        assert_eq!(o.data(), &[0.6, 0.2, 0.1, 0.2, 0.1, 0.2]);
    }

    #[test]
    fn csv_has_summary_row() {
        let s = SegScore {
            dice: 1.0,
            fg_iou: 1.0,
            bg_iou: 1.0,
            fb_iou: 1.0,
        };
        let rows = vec![FrameRow {
            clip_id: "a".into(),
            frame_id: 1,
            score: s,
        }];
        let (csv, agg) = metrics_csv(&rows, "naive").unwrap();
        assert_eq!(agg.count, 1);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert!(lines[2].starts_with("mean:naive,1,1.000000"));
    }
}
