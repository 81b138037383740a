//! On-disk dataset layout:
//!
//! ```text
//! <root>/manifest.json
//! <root>/images/<class>/<id>.png        8-bit RGB (or gray)
//! <root>/masks/<class>/<id>.png         8-bit gray, {0, 255}
//! <root>/clips/<class>/<id>/frame_%04d.png
//! <root>/clips/<class>/<id>/mask_%04d.png
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::{
    generate_image_dataset, generate_video_clip, ImageDataset, LabeledImage, ShapeClass,
    SynthConfig, VideoClip,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATASET_FORMAT: &str = "fsvos-dataset";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub synth: SynthConfig,
    pub splits: Splits,
    pub images: Vec<ImageEntry>,
    pub clips: Vec<ClipEntry>,
}

/// Image classes feed phase-1 training; clip classes are held out for video evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train_image_classes: Vec<String>,
    pub test_clip_classes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub class: String,
    pub id: usize,
    pub image: String,
    pub mask: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipEntry {
    pub class: String,
    pub id: usize,
    pub dir: String,
    pub frames: usize,
    pub annotated_prefix: usize,
}

/// Encode a `[c, h, w]` image in `[0, 1]` as 8-bit PNG (c = 1 or 3).
pub fn save_image_png(path: &Path, image: &Tensor) -> Result<()> {
    let (c, h, w) = match image.shape() {
        [c, h, w] => (*c, *h, *w),
        s => return Err(Error::shape(format!("expected [c,h,w], got {s:?}"))),
    };
    let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let d = image.data();
    match c {
        3 => {
            let img: RgbImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
                let j = y as usize * w + x as usize;
                Rgb([q(d[j]), q(d[h * w + j]), q(d[2 * h * w + j])])
            });
            img.save(path)?;
        }
        1 => {
            let img: GrayImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
                Luma([q(d[y as usize * w + x as usize])])
            });
            img.save(path)?;
        }
        _ => {
            return Err(Error::shape(format!(
                "cannot encode {c}-channel image as PNG"
            )))
        }
    }
    Ok(())
}

/// Encode a `[h, w]` binary mask as 8-bit gray with values {0, 255}.
pub fn save_mask_png(path: &Path, mask: &Tensor) -> Result<()> {
    let (h, w) = match mask.shape() {
        [h, w] => (*h, *w),
        s => return Err(Error::shape(format!("expected [h,w], got {s:?}"))),
    };
    let d = mask.data();
    let img: GrayImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Luma([if d[y as usize * w + x as usize] > 0.5 {
            255
        } else {
            0
        }])
    });
    img.save(path)?;
    Ok(())
}

pub fn load_image_png(path: &Path, channels: usize) -> Result<Tensor> {
    let img = image::open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = match channels {
        3 => {
            let rgb = img.to_rgb8();
            (0..3)
                .flat_map(|c| {
                    rgb.pixels()
                        .map(move |p| p[c] as f64 / 255.0)
                        .collect::<Vec<_>>()
                })
                .collect()
        }
        1 => img
            .to_luma8()
            .pixels()
            .map(|p| p[0] as f64 / 255.0)
            .collect(),
        _ => {
            return Err(Error::shape(format!(
                "cannot decode {channels}-channel image"
            )))
        }
    };
    Tensor::new(vec![channels, h, w], data)
}

pub fn load_mask_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img
        .pixels()
        .map(|p| if p[0] >= 128 { 1.0 } else { 0.0 })
        .collect();
    Tensor::new(vec![h, w], data)
}

fn rel(parts: &[&str]) -> String {
    parts.join("/")
}

/// Generate the image split and `clips_per_class` clips per novel class and
/// write them under `root`.
pub fn write_dataset(
    root: &Path,
    cfg: &SynthConfig,
    n_per_class: usize,
    clips_per_class: usize,
) -> Result<DatasetManifest> {
    cfg.validate()?;
    let images = generate_image_dataset(cfg, n_per_class)?;
    let mut manifest = DatasetManifest {
        format: DATASET_FORMAT.into(),
        version: 1,
        seed: cfg.seed,
        synth: cfg.clone(),
        splits: Splits {
            train_image_classes: cfg.base_classes.clone(),
            test_clip_classes: cfg.novel_classes.clone(),
        },
        images: Vec::new(),
        clips: Vec::new(),
    };
    for (i, item) in images.iter().enumerate() {
        let class = ShapeClass::from_id(item.class_id())
            .expect("generated id")
            .name();
        let id = i % n_per_class;
        let image = rel(&["images", class, &format!("{id:05}.png")]);
        let mask = rel(&["masks", class, &format!("{id:05}.png")]);
        fs::create_dir_all(root.join("images").join(class))?;
        fs::create_dir_all(root.join("masks").join(class))?;
        save_image_png(&root.join(&image), item.image())?;
        save_mask_png(&root.join(&mask), item.mask())?;
        manifest.images.push(ImageEntry {
            class: class.into(),
            id,
            image,
            mask,
        });
    }
    for class in cfg.novel()? {
        for id in 0..clips_per_class {
            let clip = generate_video_clip(cfg, class, id as u64)?;
            let dir = rel(&["clips", class.name(), &format!("{id:05}")]);
            write_clip(&root.join(&dir), &clip)?;
            manifest.clips.push(ClipEntry {
                class: class.name().into(),
                id,
                dir,
                frames: clip.len(),
                annotated_prefix: clip.annotated_prefix(),
            });
        }
    }
    fs::write(
        root.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

/// Write frames and every available mask of `clip` into `dir`.
pub fn write_clip(dir: &Path, clip: &VideoClip) -> Result<()> {
    fs::create_dir_all(dir)?;
    let support = clip.support();
    for (t, f) in clip.frames().iter().enumerate() {
        save_image_png(&dir.join(format!("frame_{t:04}.png")), f)?;
    }
    for (t, s) in support.iter().enumerate() {
        save_mask_png(&dir.join(format!("mask_{t:04}.png")), s.mask())?;
    }
    if let Some(ev) = clip.evaluation_masks() {
        for (i, m) in ev.iter().enumerate() {
            let t = clip.annotated_prefix() + i;
            save_mask_png(&dir.join(format!("mask_{t:04}.png")), m)?;
        }
    }
    Ok(())
}

/// Read a clip directory. The first `annotated_prefix` masks become support;
/// later masks, when all present, become evaluation ground truth.
pub fn read_clip(
    dir: &Path,
    annotated_prefix: usize,
    channels: usize,
    class_id: usize,
) -> Result<VideoClip> {
    let mut frames = Vec::new();
    loop {
        let p = dir.join(format!("frame_{:04}.png", frames.len()));
        if !p.exists() {
            break;
        }
        frames.push(load_image_png(&p, channels)?);
    }
    let mask_path = |t: usize| dir.join(format!("mask_{t:04}.png"));
    let support = (0..annotated_prefix)
        .map(|t| load_mask_png(&mask_path(t)))
        .collect::<Result<Vec<_>>>()?;
    let rest: Vec<PathBuf> = (annotated_prefix..frames.len()).map(mask_path).collect();
    let evaluation = if rest.iter().all(|p| p.exists()) {
        Some(
            rest.iter()
                .map(|p| load_mask_png(p))
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };
    VideoClip::new(frames, support, evaluation, class_id)
}

pub fn read_manifest(root: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(root.join("manifest.json"))?;
    let m: DatasetManifest = serde_json::from_str(&text)?;
    if m.format != DATASET_FORMAT {
        return Err(Error::config(format!(
            "unexpected dataset format `{}`",
            m.format
        )));
    }
    m.synth.validate()?;
    Ok(m)
}

/// Load the image split and every clip listed in `root/manifest.json`.
pub fn read_dataset(root: &Path) -> Result<(DatasetManifest, ImageDataset, Vec<VideoClip>)> {
    let m = read_manifest(root)?;
    let ch = m.synth.channels;
    let images = m
        .images
        .iter()
        .map(|e| {
            let class = ShapeClass::from_name(&e.class)?;
            LabeledImage::new(
                load_image_png(&root.join(&e.image), ch)?,
                load_mask_png(&root.join(&e.mask))?,
                class.id(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let clips = m
        .clips
        .iter()
        .map(|e| {
            let class = ShapeClass::from_name(&e.class)?;
            read_clip(&root.join(&e.dir), e.annotated_prefix, ch, class.id())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((m, ImageDataset::new(images), clips))
}
