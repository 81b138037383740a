//! Small convolutional feature extractor with a mid-level and a high-level tap.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{apply_mask, validate_binary, LabeledImage};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::ModelState;
use crate::params::{Bound, ParamStore};
use crate::tensor::{ConvSpec, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub in_channels: usize,
    /// Output channels of each stage.
    pub widths: Vec<usize>,
    /// Spatial reduction applied by the first conv of each stage.
    pub downsample: Vec<usize>,
    pub convs_per_stage: usize,
    /// Stage whose output is the mid-level tap.
    pub mid_tap: usize,
    /// Stage whose output is the high-level tap.
    pub high_tap: usize,
    /// Stages whose parameters are excluded from phase-1 updates.
    pub frozen_stages: Vec<usize>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            widths: vec![8, 16, 32, 32],
            downsample: vec![2, 2, 2, 1],
            convs_per_stage: 2,
            mid_tap: 1,
            high_tap: 3,
            frozen_stages: Vec::new(),
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let n = self.widths.len();
        if n == 0 || self.downsample.len() != n {
            return Err(Error::config(
                "backbone widths and downsample must be non-empty and of equal length",
            ));
        }
        if self.widths.contains(&0) || self.downsample.contains(&0) || self.in_channels == 0 {
            return Err(Error::config(
                "backbone widths/downsample/in_channels must be positive",
            ));
        }
        if self.convs_per_stage == 0 {
            return Err(Error::config("convs_per_stage must be at least 1"));
        }
        if self.mid_tap >= self.high_tap || self.high_tap >= n {
            return Err(Error::config(format!(
                "need mid_tap < high_tap < {n}, got {} and {}",
                self.mid_tap, self.high_tap
            )));
        }
        if let Some(s) = self.frozen_stages.iter().find(|&&s| s >= n) {
            return Err(Error::config(format!("frozen stage {s} does not exist")));
        }
        Ok(())
    }

    /// Cumulative stride at the output of `stage`.
    pub fn stride_at(&self, stage: usize) -> usize {
        self.downsample[..=stage].iter().product()
    }

    pub fn mid_stride(&self) -> usize {
        self.stride_at(self.mid_tap)
    }

    pub fn high_stride(&self) -> usize {
        self.stride_at(self.high_tap)
    }

    pub fn mid_channels(&self) -> usize {
        self.widths[self.mid_tap]
    }

    pub fn high_channels(&self) -> usize {
        self.widths[self.high_tap]
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let s = self.high_stride();
        if !h.is_multiple_of(s) || !w.is_multiple_of(s) || h == 0 || w == 0 {
            return Err(Error::shape(format!(
                "input {h}x{w} is not divisible by the backbone stride {s}"
            )));
        }
        Ok(())
    }

    pub(crate) fn init_params<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        let mut c_in = self.in_channels;
        for stage in 0..=self.high_tap {
            let c_out = self.widths[stage];
            for j in 0..self.convs_per_stage {
                store.insert_conv(&conv_name(stage, j), c_out, c_in, 3, rng);
                c_in = c_out;
            }
            if self.frozen_stages.contains(&stage) {
                store.set_frozen(&format!("backbone.s{stage}."), true);
            }
        }
    }
}

fn conv_name(stage: usize, j: usize) -> String {
    format!("backbone.s{stage}.c{j}")
}

/// A feature map with its stride relative to the input image.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub data: Tensor,
    pub stride: usize,
}

/// Graph-level forward: `x` is `[b, c, h, w]`; returns `(mid, high)`.
pub(crate) fn forward(g: &mut Graph, p: &Bound, cfg: &BackboneConfig, x: Var) -> (Var, Var) {
    let mut h = x;
    let mut mid = None;
    for stage in 0..=cfg.high_tap {
        for j in 0..cfg.convs_per_stage {
            let name = conv_name(stage, j);
            let stride = if j == 0 { cfg.downsample[stage] } else { 1 };
            h = g.conv2d(
                h,
                p.get(&format!("{name}.weight")),
                Some(p.get(&format!("{name}.bias"))),
                ConvSpec::new(3, stride, 1),
            );
            h = g.relu(h);
        }
        if stage == cfg.mid_tap {
            mid = Some(h);
        }
    }
    (mid.expect("mid_tap < high_tap"), h)
}

/// Mid- and high-level features of a `[b, c, h, w]` batch.
pub fn extract(model: &ModelState, images: &Tensor) -> Result<(FeatureMap, FeatureMap)> {
    let cfg = &model.arch.backbone;
    if images.rank() != 4 || images.shape()[1] != cfg.in_channels {
        return Err(Error::shape(format!(
            "expected [b, {}, h, w] images, got {:?}",
            cfg.in_channels,
            images.shape()
        )));
    }
    cfg.check_input(images.shape()[2], images.shape()[3])?;
    let mut g = Graph::new();
    let p = model.params.bind(&mut g, false);
    let x = g.constant(images.clone());
    let (mid, high) = forward(&mut g, &p, cfg, x);
    Ok((
        FeatureMap {
            data: g.value(mid).clone(),
            stride: cfg.mid_stride(),
        },
        FeatureMap {
            data: g.value(high).clone(),
            stride: cfg.high_stride(),
        },
    ))
}

/// Features of `image ⊙ mask` (mask broadcast over channels).
pub fn extract_masked(
    model: &ModelState,
    image: &Tensor,
    mask: &Tensor,
) -> Result<(FeatureMap, FeatureMap)> {
    if image.rank() != 3 || mask.rank() != 2 || image.shape()[1..] != *mask.shape() {
        return Err(Error::shape(format!(
            "image {:?} and mask {:?} do not align",
            image.shape(),
            mask.shape()
        )));
    }
    validate_binary(mask)?;
    let masked = apply_mask(image, mask);
    let mut shape = vec![1];
    shape.extend_from_slice(masked.shape());
    extract(model, &masked.reshape(&shape)?)
}

pub fn extract_masked_support(
    model: &ModelState,
    support: &LabeledImage,
) -> Result<(FeatureMap, FeatureMap)> {
    extract_masked(model, support.image(), support.mask())
}
