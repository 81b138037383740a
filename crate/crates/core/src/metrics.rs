//! Dice and foreground/background IoU on binary masks.

use serde::{Deserialize, Serialize};

use crate::data::validate_binary;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegScore {
    pub dice: f64,
    pub fg_iou: f64,
    pub bg_iou: f64,
    /// Mean of `fg_iou` and `bg_iou`.
    pub fb_iou: f64,
}

/// Pixel counts `(|P∩G|, |P|, |G|, n)`.
fn counts(pred: &Tensor, gt: &Tensor) -> Result<(usize, usize, usize, usize)> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(format!(
            "prediction {:?} and ground truth {:?} differ in shape",
            pred.shape(),
            gt.shape()
        )));
    }
    validate_binary(pred)?;
    validate_binary(gt)?;
    let (mut inter, mut p, mut g) = (0, 0, 0);
    for (&a, &b) in pred.data().iter().zip(gt.data()) {
        let (a, b) = (a > 0.5, b > 0.5);
        inter += usize::from(a && b);
        p += usize::from(a);
        g += usize::from(b);
    }
    Ok((inter, p, g, pred.numel()))
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// `2|P∩G| / (|P| + |G|)`; two empty masks score 1.
pub fn dice(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    let (inter, p, g, _) = counts(pred, gt)?;
    Ok(ratio(2 * inter, p + g))
}

pub fn fb_iou(pred: &Tensor, gt: &Tensor) -> Result<SegScore> {
    let (inter, p, g, n) = counts(pred, gt)?;
    let fg_iou = ratio(inter, p + g - inter);
    // background: complement counts
    let bg_inter = n - (p + g - inter);
    let bg_union = n - inter;
    let bg_iou = ratio(bg_inter, bg_union);
    Ok(SegScore {
        dice: ratio(2 * inter, p + g),
        fg_iou,
        bg_iou,
        fb_iou: 0.5 * (fg_iou + bg_iou),
    })
}

/// Per-field mean of a non-empty score list.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: SegScore,
    pub count: usize,
}

pub fn aggregate(scores: &[SegScore]) -> Result<Aggregate> {
    if scores.is_empty() {
        return Err(Error::Validation("cannot aggregate zero scores".into()));
    }
    let n = scores.len() as f64;
    let mean = |f: fn(&SegScore) -> f64| scores.iter().map(f).sum::<f64>() / n;
    Ok(Aggregate {
        mean: SegScore {
            dice: mean(|s| s.dice),
            fg_iou: mean(|s| s.fg_iou),
            bg_iou: mean(|s| s.bg_iou),
            fb_iou: mean(|s| s.fb_iou),
        },
        count: scores.len(),
    })
}

/// Score every predicted mask against its ground truth.
pub fn score_masks(preds: &[Tensor], gts: &[Tensor]) -> Result<Vec<SegScore>> {
    if preds.len() != gts.len() {
        return Err(Error::Validation(format!(
            "{} predictions for {} ground-truth masks",
            preds.len(),
            gts.len()
        )));
    }
    preds.iter().zip(gts).map(|(p, g)| fb_iou(p, g)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(v: &[f64]) -> Tensor {
        Tensor::new(vec![1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn dice_examples() {
        assert_eq!(dice(&m(&[1., 1., 0.]), &m(&[1., 1., 0.])).unwrap(), 1.0);
        assert_eq!(dice(&m(&[1., 0., 0.]), &m(&[0., 1., 0.])).unwrap(), 0.0);
        assert_eq!(dice(&m(&[1., 1., 0.]), &m(&[0., 1., 1.])).unwrap(), 0.5);
        assert_eq!(dice(&m(&[0., 0.]), &m(&[0., 0.])).unwrap(), 1.0);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        assert!(dice(&m(&[1., 0.]), &m(&[1., 0., 0.])).is_err());
        assert!(fb_iou(&m(&[1., 0.]), &m(&[1., 0.5])).is_err());
    }

    #[test]
    fn aggregate_of_nothing_fails() {
        assert!(aggregate(&[]).is_err());
    }
}
