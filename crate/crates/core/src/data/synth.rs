use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::shapes::{ShapeClass, ShapeParams};
use super::{LabeledImage, VideoClip};
use crate::error::{Error, Result};
use crate::rng::substream;
use crate::tensor::Tensor;

/// Synthetic data generator settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// `(height, width)` in pixels.
    pub image_size: (usize, usize),
    pub channels: usize,
    pub base_classes: Vec<String>,
    pub novel_classes: Vec<String>,
    pub frames_per_clip: usize,
    pub annotated_prefix: usize,
    /// Maximum per-frame object translation, in pixels.
    pub motion_step: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: (64, 64),
            channels: 3,
            base_classes: ["triangle", "cross", "ring", "star"]
                .map(String::from)
                .to_vec(),
            novel_classes: ["ellipse", "rectangle"].map(String::from).to_vec(),
            frames_per_clip: 8,
            annotated_prefix: 1,
            motion_step: 2.0,
            noise_std: 0.05,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Check names, class disjointness and the clip protocol.
    pub fn validate(&self) -> Result<()> {
        let base = self.base()?;
        let novel = self.novel()?;
        if base.is_empty() {
            return Err(Error::config("base_classes must not be empty"));
        }
        if let Some(c) = base.iter().find(|c| novel.contains(c)) {
            return Err(Error::config(format!(
                "class `{c}` is listed as both base and novel"
            )));
        }
        let (h, w) = self.image_size;
        if h < 16 || w < 16 {
            return Err(Error::config("image_size must be at least 16x16"));
        }
        if self.channels == 0 {
            return Err(Error::config("channels must be positive"));
        }
        if self.annotated_prefix == 0 {
            return Err(Error::config("annotated_prefix must be at least 1"));
        }
        if self.frames_per_clip < self.annotated_prefix + 1 {
            return Err(Error::config(
                "frames_per_clip must exceed annotated_prefix by at least one",
            ));
        }
        if !(self.motion_step >= 0.0 && self.noise_std >= 0.0) {
            return Err(Error::config(
                "motion_step and noise_std must be non-negative",
            ));
        }
        Ok(())
    }

    pub fn base(&self) -> Result<Vec<ShapeClass>> {
        resolve(&self.base_classes)
    }

    pub fn novel(&self) -> Result<Vec<ShapeClass>> {
        resolve(&self.novel_classes)
    }

    /// Object radius range scaled to the image size.
    fn scale(&self) -> f64 {
        self.image_size.0.min(self.image_size.1) as f64 / 64.0
    }
}

fn resolve(names: &[String]) -> Result<Vec<ShapeClass>> {
    let mut out: Vec<ShapeClass> = Vec::with_capacity(names.len());
    for n in names {
        let c = ShapeClass::from_name(n)?;
        if out.contains(&c) {
            return Err(Error::config(format!("class `{n}` listed twice")));
        }
        out.push(c);
    }
    Ok(out)
}

/// Background and object textures for one image or clip.
#[derive(Clone, Debug, PartialEq)]
pub struct Appearance {
    bg: Vec<f64>,
    bg_wave: Wave,
    fg: Vec<f64>,
    fg_wave: Wave,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Wave {
    amp: f64,
    freq: f64,
    dir: f64,
    phase: f64,
}

impl Wave {
    fn sample(rng: &mut ChaCha8Rng, amp: f64, freq: (f64, f64)) -> Self {
        Self {
            amp,
            freq: rng.random_range(freq.0..freq.1),
            dir: rng.random_range(0.0..PI),
            phase: rng.random_range(0.0..2.0 * PI),
        }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        let t = x * self.dir.cos() + y * self.dir.sin();
        self.amp * (2.0 * PI * self.freq * t + self.phase).sin()
    }
}

impl Appearance {
    pub fn sample(channels: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            bg: (0..channels).map(|_| rng.random_range(0.1..0.4)).collect(),
            bg_wave: Wave::sample(rng, 0.08, (0.02, 0.08)),
            fg: (0..channels).map(|_| rng.random_range(0.55..0.9)).collect(),
            fg_wave: Wave::sample(rng, 0.06, (0.1, 0.25)),
        }
    }

    /// `[c, h, w]` image of the textures composited through `mask`, plus
    /// Gaussian noise, clamped to `[0, 1]`.
    pub fn render(
        &self,
        h: usize,
        w: usize,
        mask: &[f64],
        noise_std: f64,
        rng: &mut ChaCha8Rng,
    ) -> Tensor {
        let c = self.bg.len();
        let noise = (noise_std > 0.0).then(|| Normal::new(0.0, noise_std).expect("valid std"));
        let mut data = vec![0.0; c * h * w];
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let (px, py) = (x as f64, y as f64);
                    let j = y * w + x;
                    let mut v = if mask[j] > 0.0 {
                        self.fg[ci] + self.fg_wave.at(px, py)
                    } else {
                        self.bg[ci] + self.bg_wave.at(px, py)
                    };
                    if let Some(n) = &noise {
                        v += n.sample(rng);
                    }
                    data[ci * h * w + j] = v.clamp(0.0, 1.0);
                }
            }
        }
        Tensor::from_parts(vec![c, h, w], data)
    }
}

fn sample_shape(
    class: ShapeClass,
    radius: (f64, f64),
    aspect: (f64, f64),
    size: (usize, usize),
    rng: &mut ChaCha8Rng,
) -> ShapeParams {
    let mut p = ShapeParams {
        class,
        cx: 0.0,
        cy: 0.0,
        radius: rng.random_range(radius.0..radius.1),
        aspect: rng.random_range(aspect.0..aspect.1),
        angle: rng.random_range(0.0..2.0 * PI),
    };
    let margin = p.extent() + 1.0;
    let (h, w) = (size.0 as f64, size.1 as f64);
    p.cx = rng.random_range(margin..(w - margin).max(margin + 1e-9));
    p.cy = rng.random_range(margin..(h - margin).max(margin + 1e-9));
    if class == ShapeClass::Rectangle {
        // Integer placement keeps the pixel count equal to the drawn area.
        p.cx = p.cx.round();
        p.cy = p.cy.round();
    }
    p
}

/// One image sample of `class`, plus the silhouette that produced its mask.
pub fn render_image_sample(
    cfg: &SynthConfig,
    class: ShapeClass,
    rng: &mut ChaCha8Rng,
) -> (LabeledImage, ShapeParams) {
    let (h, w) = cfg.image_size;
    let s = cfg.scale();
    let params = sample_shape(class, (10.0 * s, 20.0 * s), (0.6, 1.0), (h, w), rng);
    let appearance = Appearance::sample(cfg.channels, rng);
    let mask = params.rasterize(h, w);
    let image = appearance.render(h, w, &mask, cfg.noise_std, rng);
    let mask = Tensor::from_parts(vec![h, w], mask);
    let sample = LabeledImage::new(image, mask, class.id()).expect("generator output is valid");
    (sample, params)
}

/// `n_per_class` labelled images for every base class, in config order.
/// Each sample draws from its own substream, so output is a pure function
/// of `(cfg, n_per_class)`.
pub fn generate_image_dataset(cfg: &SynthConfig, n_per_class: usize) -> Result<Vec<LabeledImage>> {
    cfg.validate()?;
    generate_images(cfg, &cfg.base()?, "image", n_per_class)
}

/// Held-out labelled images of the novel classes, for episodic evaluation.
/// Drawn from substreams disjoint from both the base images and the clips.
pub fn generate_novel_images(cfg: &SynthConfig, n_per_class: usize) -> Result<Vec<LabeledImage>> {
    cfg.validate()?;
    generate_images(cfg, &cfg.novel()?, "novel-image", n_per_class)
}

fn generate_images(
    cfg: &SynthConfig,
    classes: &[ShapeClass],
    stream: &str,
    n_per_class: usize,
) -> Result<Vec<LabeledImage>> {
    if n_per_class == 0 {
        return Err(Error::config("n_per_class must be at least 1"));
    }
    let mut out = Vec::with_capacity(n_per_class * classes.len());
    for class in classes {
        for i in 0..n_per_class {
            let mut rng = substream(cfg.seed, &format!("{stream}/{}", class.name()), i as u64);
            out.push(render_image_sample(cfg, *class, &mut rng).0);
        }
    }
    Ok(out)
}

/// Clip number `index` of a novel `class`: a textured object that
/// translates, rotates and breathes smoothly over `frames_per_clip` frames.
pub fn generate_video_clip(cfg: &SynthConfig, class: ShapeClass, index: u64) -> Result<VideoClip> {
    cfg.validate()?;
    if cfg.base()?.contains(&class) {
        return Err(Error::Protocol(format!(
            "`{class}` is a base class; video clips are drawn from novel classes only"
        )));
    }
    if !cfg.novel()?.contains(&class) {
        return Err(Error::config(format!(
            "`{class}` is not a configured novel class"
        )));
    }
    let (h, w) = cfg.image_size;
    let s = cfg.scale();
    let mut rng = substream(cfg.seed, &format!("clip/{}", class.name()), index);

    let step = cfg.motion_step;
    let scale_amp = 0.01 * step;
    let mut params = sample_shape(class, (16.0 * s, 22.0 * s), (0.8, 1.0), (h, w), &mut rng);
    let base_radius = params.radius;
    let base_angle = params.angle;
    let appearance = Appearance::sample(cfg.channels, &mut rng);

    let speed = step * rng.random_range(0.5..1.0);
    let heading = rng.random_range(0.0..2.0 * PI);
    let (mut vx, mut vy) = (speed * heading.cos(), speed * heading.sin());
    let omega = 0.01 * step * rng.random_range(-1.0..1.0);
    let period = rng.random_range(6.0..12.0);

    let widest = ShapeParams {
        radius: base_radius * (1.0 + scale_amp),
        ..params
    };
    let margin = widest.extent() + 1.0;
    let (lo_x, hi_x) = (margin, (w as f64 - margin).max(margin));
    let (lo_y, hi_y) = (margin, (h as f64 - margin).max(margin));
    params.cx = params.cx.clamp(lo_x, hi_x);
    params.cy = params.cy.clamp(lo_y, hi_y);

    let mut frames = Vec::with_capacity(cfg.frames_per_clip);
    let mut masks = Vec::with_capacity(cfg.frames_per_clip);
    for t in 0..cfg.frames_per_clip {
        if t > 0 {
            if !(lo_x..=hi_x).contains(&(params.cx + vx)) {
                vx = -vx;
            }
            if !(lo_y..=hi_y).contains(&(params.cy + vy)) {
                vy = -vy;
            }
            params.cx = (params.cx + vx).clamp(lo_x, hi_x);
            params.cy = (params.cy + vy).clamp(lo_y, hi_y);
        }
        params.radius = base_radius * (1.0 + scale_amp * (2.0 * PI * t as f64 / period).sin());
        params.angle = base_angle + omega * t as f64;
        let mask = params.rasterize(h, w);
        frames.push(appearance.render(h, w, &mask, cfg.noise_std, &mut rng));
        masks.push(Tensor::from_parts(vec![h, w], mask));
    }
    let n = cfg.annotated_prefix;
    let evaluation = masks.split_off(n);
    VideoClip::new(frames, masks, Some(evaluation), class.id())
}
