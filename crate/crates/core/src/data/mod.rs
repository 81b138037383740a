//! Episodic data: labelled images, episodes, video clips and the synthetic
//! shape generator that stands in for real image and video collections.

mod episode;
pub mod io;
mod shapes;
mod synth;

pub use episode::{clip_to_episode, sample_episode, Episode, ImageDataset};
pub use shapes::{ShapeClass, ShapeParams};
pub use synth::{
    generate_image_dataset, generate_novel_images, generate_video_clip, render_image_sample,
    Appearance, SynthConfig,
};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One image with its binary object mask.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    image: Tensor,
    mask: Tensor,
    class_id: usize,
}

impl LabeledImage {
    /// `image` is `[c, h, w]` in `[0, 1]`; `mask` is `[h, w]` with values in `{0, 1}`.
    pub fn new(image: Tensor, mask: Tensor, class_id: usize) -> Result<Self> {
        if image.rank() != 3 || mask.rank() != 2 {
            return Err(Error::shape(format!(
                "expected image [c,h,w] and mask [h,w], got {:?} and {:?}",
                image.shape(),
                mask.shape()
            )));
        }
        if image.shape()[1..] != *mask.shape() {
            return Err(Error::shape(format!(
                "image {:?} and mask {:?} differ spatially",
                image.shape(),
                mask.shape()
            )));
        }
        validate_binary(&mask)?;
        Ok(Self {
            image,
            mask,
            class_id,
        })
    }

    pub fn image(&self) -> &Tensor {
        &self.image
    }

    pub fn mask(&self) -> &Tensor {
        &self.mask
    }

    pub fn class_id(&self) -> usize {
        self.class_id
    }

    /// `(h, w)`.
    pub fn size(&self) -> (usize, usize) {
        (self.mask.shape()[0], self.mask.shape()[1])
    }

    /// Image with the mask applied to every channel.
    pub fn masked_image(&self) -> Tensor {
        apply_mask(&self.image, &self.mask)
    }
}

pub(crate) fn validate_binary(mask: &Tensor) -> Result<()> {
    if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Validation("mask must be binary (0 or 1)".into()));
    }
    Ok(())
}

/// Hadamard product of a `[c, h, w]` image with a `[h, w]` mask broadcast over channels.
pub fn apply_mask(image: &Tensor, mask: &Tensor) -> Tensor {
    let hw = mask.numel();
    assert_eq!(image.numel() % hw, 0);
    let mut out = image.clone();
    for plane in out.data_mut().chunks_mut(hw) {
        for (v, m) in plane.iter_mut().zip(mask.data()) {
            *v *= m;
        }
    }
    out
}

/// An ordered frame sequence whose first `annotated_prefix` frames carry
/// masks. Masks of the remaining frames may be stored for scoring but are
/// only reachable through [`VideoClip::evaluation_masks`].
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    frames: Vec<Tensor>,
    support_masks: Vec<Tensor>,
    evaluation_masks: Option<Vec<Tensor>>,
    class_id: usize,
}

impl VideoClip {
    /// `frames` are `[c, h, w]`; `support_masks` annotate the leading frames;
    /// `evaluation_masks`, if given, cover every frame after them.
    pub fn new(
        frames: Vec<Tensor>,
        support_masks: Vec<Tensor>,
        evaluation_masks: Option<Vec<Tensor>>,
        class_id: usize,
    ) -> Result<Self> {
        let n = support_masks.len();
        if n == 0 {
            return Err(Error::Validation(
                "a clip needs at least one annotated frame".into(),
            ));
        }
        if frames.len() < n + 1 {
            return Err(Error::Validation(format!(
                "clip has {} frames but {} annotated; need at least one query frame",
                frames.len(),
                n
            )));
        }
        let shape = frames[0].shape().to_vec();
        if shape.len() != 3 || frames.iter().any(|f| f.shape() != shape.as_slice()) {
            return Err(Error::shape("clip frames must share one [c,h,w] shape"));
        }
        let check_mask = |m: &Tensor| -> Result<()> {
            if m.shape() != &shape[1..] {
                return Err(Error::shape(format!(
                    "mask {:?} does not match frame {:?}",
                    m.shape(),
                    shape
                )));
            }
            validate_binary(m)
        };
        for m in &support_masks {
            check_mask(m)?;
        }
        if let Some(ev) = &evaluation_masks {
            if ev.len() != frames.len() - n {
                return Err(Error::Validation(format!(
                    "expected {} evaluation masks, got {}",
                    frames.len() - n,
                    ev.len()
                )));
            }
            for m in ev {
                check_mask(m)?;
            }
        }
        Ok(Self {
            frames,
            support_masks,
            evaluation_masks,
            class_id,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn annotated_prefix(&self) -> usize {
        self.support_masks.len()
    }

    pub fn class_id(&self) -> usize {
        self.class_id
    }

    pub fn frames(&self) -> &[Tensor] {
        &self.frames
    }

    pub fn query_frames(&self) -> &[Tensor] {
        &self.frames[self.annotated_prefix()..]
    }

    /// Clip-level indices of the query frames.
    pub fn query_indices(&self) -> std::ops::Range<usize> {
        self.annotated_prefix()..self.frames.len()
    }

    /// The annotated prefix as labelled images.
    pub fn support(&self) -> Vec<LabeledImage> {
        self.frames
            .iter()
            .zip(&self.support_masks)
            .map(|(f, m)| LabeledImage {
                image: f.clone(),
                mask: m.clone(),
                class_id: self.class_id,
            })
            .collect()
    }

    /// Ground truth of the query frames. For scoring only; adaptation code
    /// must never call this.
    pub fn evaluation_masks(&self) -> Option<&[Tensor]> {
        self.evaluation_masks.as_deref()
    }
}
