//! Few-shot image segmenter: cosine pseudo mask from high-level features,
//! cross-resolution fusion with mid-level query and support features, a
//! two-scale neck and a conv head with per-pixel softmax.

mod train;

pub use train::{
    batch_loss, train_phase1, LossRecord, OptimizerKind, Phase1Config, Phase1Outcome, Phase1Trainer,
};

use serde::{Deserialize, Serialize};

use crate::backbone::{self, FeatureMap};
use crate::data::{Episode, LabeledImage, VideoClip};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::{ArchConfig, ModelState};
use crate::params::Bound;
use crate::relearn::temporal;
use crate::tensor::{ConvSpec, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeckKind {
    /// Two-scale exchange neck.
    Light,
    /// Fused features go straight to the head.
    Identity,
}

/// How masked support mid-level features enter the fusion concat.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupportPooling {
    /// Spatially aligned maps, averaged over shots.
    Spatial,
    /// Masked average pooling to one vector, broadcast over space.
    MaskedAverage,
}

/// Min-max normalised query localisation prior, `[b, 1, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoMask {
    pub data: Tensor,
}

/// Output of the fusion 1x1 projection at mid-level stride.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedFeature {
    pub data: FeatureMap,
}

/// Per-pixel `{background, foreground}` probabilities, `[b, 2, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SegPrediction {
    pub probs: Tensor,
}

impl SegPrediction {
    pub fn len(&self) -> usize {
        self.probs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Foreground probability map of item `i`, `[h, w]`.
    pub fn foreground(&self, i: usize) -> Tensor {
        let (_, _, h, w) = self.probs.dims4();
        let d = &self.probs.data()[(2 * i + 1) * h * w..(2 * i + 2) * h * w];
        Tensor::from_parts(vec![h, w], d.to_vec())
    }

    /// Argmax mask of item `i`, `[h, w]` with values in `{0, 1}`.
    pub fn mask(&self, i: usize) -> Tensor {
        let (_, _, h, w) = self.probs.dims4();
        let d = self.probs.data();
        let bg = &d[2 * i * h * w..(2 * i + 1) * h * w];
        let fg = &d[(2 * i + 1) * h * w..(2 * i + 2) * h * w];
        let m = bg
            .iter()
            .zip(fg)
            .map(|(b, f)| if f > b { 1.0 } else { 0.0 })
            .collect();
        Tensor::from_parts(vec![h, w], m)
    }

    pub fn masks(&self) -> Vec<Tensor> {
        (0..self.len()).map(|i| self.mask(i)).collect()
    }

    /// Item `i` as a single-element prediction.
    pub fn item(&self, i: usize) -> SegPrediction {
        SegPrediction {
            probs: self.probs.batch_item(i),
        }
    }

    pub fn concat(parts: &[SegPrediction]) -> Result<SegPrediction> {
        let probs: Vec<Tensor> = parts.iter().map(|p| p.probs.clone()).collect();
        Ok(SegPrediction {
            probs: Tensor::cat_first(&probs)?,
        })
    }
}

/// Downsample a `[h, w]` mask by `stride`; a cell is foreground when any
/// pixel it covers is.
pub fn mask_to_grid(mask: &Tensor, stride: usize) -> Result<Vec<bool>> {
    let (h, w) = match mask.shape() {
        [h, w] => (*h, *w),
        s => return Err(Error::shape(format!("expected [h,w] mask, got {s:?}"))),
    };
    if h % stride != 0 || w % stride != 0 {
        return Err(Error::shape(format!(
            "mask {h}x{w} is not divisible by stride {stride}"
        )));
    }
    let (gh, gw) = (h / stride, w / stride);
    let d = mask.data();
    let mut out = vec![false; gh * gw];
    for y in 0..h {
        for x in 0..w {
            if d[y * w + x] > 0.0 {
                out[(y / stride) * gw + x / stride] = true;
            }
        }
    }
    Ok(out)
}

/// Support images already multiplied by their masks, with the masks.
pub(crate) struct SupportInput {
    pub masked: Tensor,
    pub masks: Vec<Tensor>,
}

impl SupportInput {
    pub fn new(support: &[LabeledImage]) -> Result<Self> {
        if support.is_empty() {
            return Err(Error::Validation("support set is empty".into()));
        }
        let masked: Vec<Tensor> = support.iter().map(LabeledImage::masked_image).collect();
        Ok(Self {
            masked: Tensor::stack(&masked)?,
            masks: support.iter().map(|s| s.mask().clone()).collect(),
        })
    }
}

/// Nodes of one forward pass that the losses tap into.
pub(crate) struct ForwardNodes {
    pub fused: Var,
    pub neck: Var,
    /// Temporal unit output, when the pass used one.
    pub temporal: Option<Var>,
    pub logits: Var,
    pub probs: Var,
}

pub(crate) fn pseudo_mask_node(
    g: &mut Graph,
    query_high: Var,
    support_high: Var,
    masks: &[Tensor],
    stride: usize,
) -> Result<Var> {
    let fg = masks
        .iter()
        .map(|m| mask_to_grid(m, stride))
        .collect::<Result<Vec<_>>>()?;
    Ok(g.pseudo_mask(query_high, support_high, &fg))
}

pub(crate) fn fuse_node(
    g: &mut Graph,
    p: &Bound,
    arch: &ArchConfig,
    pseudo: Var,
    query_mid: Var,
    support_mid: Var,
    masks: &[Tensor],
) -> Result<Var> {
    let (k, _, hm, wm) = g.value(query_mid).dims4();
    let (_, _, sh, sw) = g.value(support_mid).dims4();
    let (pk, _, ph, pw) = g.value(pseudo).dims4();
    let ratio = arch.backbone.high_stride() / arch.backbone.mid_stride();
    if (sh, sw) != (hm, wm) || pk != k || (ph * ratio, pw * ratio) != (hm, wm) {
        return Err(Error::shape(format!(
            "fusion inputs misaligned: pseudo {ph}x{pw} (x{ratio}), query {hm}x{wm}, support {sh}x{sw}"
        )));
    }
    let up = g.upsample(pseudo, hm, wm);
    let pooled = match arch.support_pooling {
        SupportPooling::Spatial => g.mean_batch(support_mid),
        SupportPooling::MaskedAverage => {
            let stride = arch.backbone.mid_stride();
            let weights = masks
                .iter()
                .map(|m| {
                    mask_to_grid(m, stride)
                        .map(|cells| cells.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect())
                })
                .collect::<Result<Vec<Vec<f64>>>>()?;
            let v = g.masked_avg_pool(support_mid, weights);
            g.expand_spatial(v, hm, wm)
        }
    };
    let support_rep = g.repeat_batch(pooled, k);
    let cat = g.concat_channels(&[up, query_mid, support_rep]);
    Ok(g.conv2d(
        cat,
        p.get("fuse.weight"),
        Some(p.get("fuse.bias")),
        ConvSpec::new(1, 1, 0),
    ))
}

fn conv(g: &mut Graph, p: &Bound, name: &str, x: Var, spec: ConvSpec) -> Var {
    g.conv2d(
        x,
        p.get(&format!("{name}.weight")),
        Some(p.get(&format!("{name}.bias"))),
        spec,
    )
}

pub(crate) fn neck_node(g: &mut Graph, p: &Bound, arch: &ArchConfig, f: Var) -> Var {
    match arch.neck {
        NeckKind::Identity => f,
        NeckKind::Light => {
            let (_, _, h, w) = g.value(f).dims4();
            let down = conv(g, p, "neck.down", f, ConvSpec::new(3, 2, 1));
            let lo = g.relu(down);
            // fine scale: lateral conv + upsampled coarse
            let lat_hi = conv(g, p, "neck.lat_hi", f, ConvSpec::new(3, 1, 1));
            let lo_up = g.upsample(lo, h, w);
            let hi_sum = g.add(lat_hi, lo_up);
            let hi = g.relu(hi_sum);
            // coarse scale: lateral conv + downsampled fine
            let lat_lo = conv(g, p, "neck.lat_lo", lo, ConvSpec::new(3, 1, 1));
            let f_down = conv(g, p, "neck.cross_down", f, ConvSpec::new(3, 2, 1));
            let lo_sum = g.add(lat_lo, f_down);
            let lo2 = g.relu(lo_sum);
            let lo2_up = g.upsample(lo2, h, w);
            g.add(hi, lo2_up)
        }
    }
}

/// Head logits upsampled to `(h, w)`.
pub(crate) fn head_node(g: &mut Graph, p: &Bound, x: Var, out_h: usize, out_w: usize) -> Var {
    let c3 = conv(g, p, "head.conv3", x, ConvSpec::new(3, 1, 1));
    let a = g.relu(c3);
    let logits = conv(g, p, "head.conv1", a, ConvSpec::new(1, 1, 0));
    g.upsample(logits, out_h, out_w)
}

/// Full pipeline for `queries` (`[k, c, h, w]`) conditioned on `support`.
/// The temporal unit runs (over the query axis) iff `use_temporal`.
pub(crate) fn forward_nodes(
    g: &mut Graph,
    p: &Bound,
    arch: &ArchConfig,
    support: &SupportInput,
    queries: &Tensor,
    use_temporal: bool,
) -> Result<ForwardNodes> {
    let (_, c, h, w) = queries.dims4();
    let (_, sc, sh, sw) = support.masked.dims4();
    if (sc, sh, sw) != (c, h, w) || c != arch.backbone.in_channels {
        return Err(Error::shape(format!(
            "support {:?} and query {:?} do not match the model input",
            support.masked.shape(),
            queries.shape()
        )));
    }
    arch.check_input(h, w)?;
    if use_temporal && !arch.temporal_unit {
        return Err(Error::config("model has no temporal unit"));
    }
    let s = g.constant(support.masked.clone());
    let q = g.constant(queries.clone());
    let (s_mid, s_high) = backbone::forward(g, p, &arch.backbone, s);
    let (q_mid, q_high) = backbone::forward(g, p, &arch.backbone, q);
    let pseudo = pseudo_mask_node(
        g,
        q_high,
        s_high,
        &support.masks,
        arch.backbone.high_stride(),
    )?;
    let fused = fuse_node(g, p, arch, pseudo, q_mid, s_mid, &support.masks)?;
    let neck = neck_node(g, p, arch, fused);
    let temporal = use_temporal.then(|| temporal::attention_node(g, p, neck));
    let logits = head_node(g, p, temporal.unwrap_or(neck), h, w);
    let probs = g.softmax_channels(logits);
    Ok(ForwardNodes {
        fused,
        neck,
        temporal,
        logits,
        probs,
    })
}

/// Eval-mode prediction for a query batch.
pub(crate) fn predict(
    model: &ModelState,
    support: &[LabeledImage],
    queries: &Tensor,
    use_temporal: bool,
) -> Result<SegPrediction> {
    let support = SupportInput::new(support)?;
    let mut g = Graph::new();
    let p = model.params.bind(&mut g, false);
    let nodes = forward_nodes(&mut g, &p, &model.arch, &support, queries, use_temporal)?;
    Ok(SegPrediction {
        probs: g.value(nodes.probs).clone(),
    })
}

/// Cosine pseudo mask of each query against the masked support features.
/// `support_masks` are the image-resolution support masks, one per shot.
pub fn pseudo_mask(
    query_high: &FeatureMap,
    support_high_masked: &FeatureMap,
    support_masks: &[Tensor],
) -> Result<PseudoMask> {
    let (_, qc, _, _) = query_high.data.dims4();
    let (n, sc, _, _) = support_high_masked.data.dims4();
    if qc != sc {
        return Err(Error::shape(format!(
            "query has {qc} channels, support {sc}"
        )));
    }
    if support_masks.len() != n {
        return Err(Error::shape(format!(
            "{} support masks for {n} support feature maps",
            support_masks.len()
        )));
    }
    let mut g = Graph::new();
    let q = g.constant(query_high.data.clone());
    let s = g.constant(support_high_masked.data.clone());
    let out = pseudo_mask_node(&mut g, q, s, support_masks, support_high_masked.stride)?;
    Ok(PseudoMask {
        data: g.value(out).clone(),
    })
}

/// Concat `[up(pseudo), query_mid, support_mid]` and project back to the
/// mid-level channel count.
pub fn fuse(
    model: &ModelState,
    pseudo: &PseudoMask,
    query_mid: &FeatureMap,
    support_mid_masked: &FeatureMap,
    support_masks: &[Tensor],
) -> Result<FusedFeature> {
    let mut g = Graph::new();
    let p = model.params.bind(&mut g, false);
    let pv = g.constant(pseudo.data.clone());
    let q = g.constant(query_mid.data.clone());
    let s = g.constant(support_mid_masked.data.clone());
    let f = fuse_node(&mut g, &p, &model.arch, pv, q, s, support_masks)?;
    Ok(FusedFeature {
        data: FeatureMap {
            data: g.value(f).clone(),
            stride: query_mid.stride,
        },
    })
}

/// Multi-scale refinement; output has the input's spatial size.
pub fn neck(model: &ModelState, f: &FusedFeature) -> Result<FeatureMap> {
    let (_, _, h, w) = f.data.data.dims4();
    if model.arch.neck == NeckKind::Light && (h % 2 != 0 || w % 2 != 0) {
        return Err(Error::shape(format!("neck input {h}x{w} must be even")));
    }
    let mut g = Graph::new();
    let p = model.params.bind(&mut g, false);
    let x = g.constant(f.data.data.clone());
    let y = neck_node(&mut g, &p, &model.arch, x);
    Ok(FeatureMap {
        data: g.value(y).clone(),
        stride: f.data.stride,
    })
}

/// 3x3 conv, ReLU, 1x1 conv to two classes, bilinear upsampling by the
/// feature stride and a per-pixel softmax.
pub fn head(model: &ModelState, features: &FeatureMap) -> Result<SegPrediction> {
    let (_, _, h, w) = features.data.dims4();
    let mut g = Graph::new();
    let p = model.params.bind(&mut g, false);
    let x = g.constant(features.data.clone());
    let logits = head_node(&mut g, &p, x, h * features.stride, w * features.stride);
    let probs = g.softmax_channels(logits);
    Ok(SegPrediction {
        probs: g.value(probs).clone(),
    })
}

/// Segment every query of `episode` conditioned on its support set.
pub fn forward_episode(episode: &Episode, model: &ModelState) -> Result<SegPrediction> {
    let queries: Vec<Tensor> = episode.query.iter().map(|q| q.image().clone()).collect();
    predict(model, &episode.support, &Tensor::stack(&queries)?, false)
}

/// Segment each query frame of `clip` on its own, with the annotated prefix
/// as support. Returns one prediction per query frame, in frame order.
pub fn infer_video_naive(clip: &VideoClip, model: &ModelState) -> Result<SegPrediction> {
    let support = clip.support();
    let queries = Tensor::stack(clip.query_frames())?;
    predict(model, &support, &queries, false)
}
