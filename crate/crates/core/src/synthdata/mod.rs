//! Deterministic two-domain synthetic segmentation benchmark.

mod io;

pub use io::{
    generate_dataset, load_dataset, read_pgm, read_ppm, read_scene, write_dataset, write_pgm, write_ppm, write_scene,
    Dataset, DatasetConfig, ManifestEntry, Split, DATASET_FORMAT,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use segda_grad::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

/// An image in `[0, 1]` with a per-pixel class mask.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledScene {
    /// `3 × H × W`.
    pub image: Tensor,
    /// Row-major class ids.
    pub mask: Vec<usize>,
    pub num_classes: usize,
    pub domain: Domain,
    pub seed: u64,
}

impl LabeledScene {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ShapeKind {
    Rect,
    Disc,
    Triangle,
    Bar,
}

/// Scene layout parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    /// Including background class 0.
    pub num_classes: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Extent range of rectangles, discs and triangles in pixels.
    pub min_size: usize,
    pub max_size: usize,
    /// Hue spacing between consecutive foreground classes, in degrees.
    pub hue_step: f64,
    /// Per-instance hue jitter, in degrees.
    pub hue_jitter: f64,
    /// Per-pixel Gaussian noise on shapes and background.
    pub pixel_noise: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            num_classes: 6,
            min_shapes: 3,
            max_shapes: 5,
            min_size: 12,
            max_size: 24,
            hue_step: 72.0,
            hue_jitter: 5.0,
            pixel_noise: 0.02,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.height % 4 != 0 || self.width % 4 != 0 {
            return Err(CoreError::Config(format!("scene extent {}×{} must be positive multiples of 4", self.height, self.width)));
        }
        if !(4..=12).contains(&self.num_classes) {
            return Err(CoreError::Config(format!("{} classes outside [4, 12]", self.num_classes)));
        }
        if self.min_shapes > self.max_shapes {
            return Err(CoreError::Config("min_shapes exceeds max_shapes".into()));
        }
        if self.min_size < 3 || self.min_size > self.max_size || self.max_size > self.height.min(self.width) {
            return Err(CoreError::Config(format!(
                "shape sizes [{}, {}] do not fit a {}×{} canvas",
                self.min_size, self.max_size, self.height, self.width
            )));
        }
        if !(self.hue_step.is_finite() && self.hue_jitter >= 0.0 && self.pixel_noise >= 0.0) {
            return Err(CoreError::Config("colour parameters must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Colour and noise shift applied to make target-domain scenes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainShift {
    pub brightness: f64,
    pub contrast: f64,
    pub hue_degrees: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for DomainShift {
    fn default() -> Self {
        Self { brightness: -0.15, contrast: 0.7, hue_degrees: 25.0, noise_sigma: 0.05, seed: 0 }
    }
}

impl DomainShift {
    pub fn identity() -> Self {
        Self { brightness: 0.0, contrast: 1.0, hue_degrees: 0.0, noise_sigma: 0.0, seed: 0 }
    }
}

fn kind_of(class: usize) -> ShapeKind {
    match (class - 1) % 4 {
        0 => ShapeKind::Rect,
        1 => ShapeKind::Disc,
        2 => ShapeKind::Triangle,
        _ => ShapeKind::Bar,
    }
}

pub(crate) fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Rotates an RGB colour about the grey axis.
pub(crate) fn rotate_hue(rgb: [f64; 3], degrees: f64) -> [f64; 3] {
    let (s, c) = degrees.to_radians().sin_cos();
    let k = 1.0 / 3f64.sqrt();
    let [r, g, b] = rgb;
    let dot = k * (r + g + b);
    let cross = [k * (b - g), k * (r - b), k * (g - r)];
    [
        r * c + cross[0] * s + k * dot * (1.0 - c),
        g * c + cross[1] * s + k * dot * (1.0 - c),
        b * c + cross[2] * s + k * dot * (1.0 - c),
    ]
}

fn class_colour(config: &SceneConfig, class: usize, rng: &mut ChaCha8Rng) -> [f64; 3] {
    let hue = (class - 1) as f64 * config.hue_step + rng.gen_range(-1.0..=1.0) * config.hue_jitter;
    hsv_to_rgb(hue, rng.gen_range(0.7..0.9), rng.gen_range(0.75..0.9))
}

fn coverage(kind: ShapeKind, config: &SceneConfig, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let (h, w) = (config.height as i64, config.width as i64);
    let size = |rng: &mut ChaCha8Rng| rng.gen_range(config.min_size..=config.max_size) as i64;
    let mut pixels = Vec::new();
    let push_if = |pixels: &mut Vec<(usize, usize)>, inside: &dyn Fn(f64, f64) -> bool, r0: i64, r1: i64, c0: i64, c1: i64| {
        for r in r0.max(0)..r1.min(h) {
            for c in c0.max(0)..c1.min(w) {
                if inside(r as f64 + 0.5, c as f64 + 0.5) {
                    pixels.push((r as usize, c as usize));
                }
            }
        }
    };
    match kind {
        ShapeKind::Rect => {
            let (sh, sw) = (size(rng), size(rng));
            let (r0, c0) = (rng.gen_range(0..=h - sh), rng.gen_range(0..=w - sw));
            push_if(&mut pixels, &|_, _| true, r0, r0 + sh, c0, c0 + sw);
        }
        ShapeKind::Disc => {
            let d = size(rng);
            let (r0, c0) = (rng.gen_range(0..=h - d), rng.gen_range(0..=w - d));
            let rad = d as f64 / 2.0;
            let (cr, cc) = (r0 as f64 + rad, c0 as f64 + rad);
            push_if(&mut pixels, &|y, x| (y - cr).powi(2) + (x - cc).powi(2) <= rad * rad, r0, r0 + d, c0, c0 + d);
        }
        ShapeKind::Triangle => {
            let d = size(rng);
            let (r0, c0) = (rng.gen_range(0..=h - d), rng.gen_range(0..=w - d));
            let df = d as f64;
            let apex = c0 as f64 + rng.gen_range(0.0..df);
            let v = [(r0 as f64, apex), ((r0 + d) as f64, c0 as f64), ((r0 + d) as f64, (c0 + d) as f64)];
            let edge = |a: (f64, f64), b: (f64, f64), p: (f64, f64)| (b.1 - a.1) * (p.0 - a.0) - (b.0 - a.0) * (p.1 - a.1);
            let inside = move |y: f64, x: f64| {
                let e = [edge(v[0], v[1], (y, x)), edge(v[1], v[2], (y, x)), edge(v[2], v[0], (y, x))];
                e.iter().all(|&s| s >= 0.0) || e.iter().all(|&s| s <= 0.0)
            };
            push_if(&mut pixels, &inside, r0, r0 + d, c0, c0 + d);
        }
        ShapeKind::Bar => {
            let thick = rng.gen_range(3..=4);
            let len = rng.gen_range(config.max_size as i64..=(config.max_size as i64 * 2).min(h.min(w)));
            let (bh, bw) = if rng.gen_bool(0.5) { (len, thick) } else { (thick, len) };
            let (r0, c0) = (rng.gen_range(0..=h - bh), rng.gen_range(0..=w - bw));
            push_if(&mut pixels, &|_, _| true, r0, r0 + bh, c0, c0 + bw);
        }
    }
    pixels
}

/// Background class 0 (low-saturation striped texture) with a random
/// number of coloured shapes drawn on top. Later shapes occlude earlier
/// ones. Returns the scene and the classes scheduled for drawing.
pub fn generate_scene_with_schedule(seed: u64, config: &SceneConfig) -> Result<(LabeledScene, Vec<usize>)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (config.height, config.width);
    let hw = h * w;
    let noise = Normal::new(0.0, config.pixel_noise.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let mut image = vec![0.0; 3 * hw];
    let mut mask = vec![0usize; hw];

    let grey = rng.gen_range(0.35..0.6);
    let tint = [rng.gen_range(-0.04..0.04), rng.gen_range(-0.04..0.04), rng.gen_range(-0.04..0.04)];
    let freq = rng.gen_range(0.2..0.6);
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
    for r in 0..h {
        for c in 0..w {
            let t = 0.08 * ((r as f64 * angle.sin() + c as f64 * angle.cos()) * freq).sin();
            for k in 0..3 {
                image[k * hw + r * w + c] = grey + tint[k] + t;
            }
        }
    }

    let shapes = rng.gen_range(config.min_shapes..=config.max_shapes);
    let mut schedule = Vec::with_capacity(shapes);
    for _ in 0..shapes {
        let class = rng.gen_range(1..config.num_classes);
        let colour = class_colour(config, class, &mut rng);
        for (r, c) in coverage(kind_of(class), config, &mut rng) {
            mask[r * w + c] = class;
            for k in 0..3 {
                image[k * hw + r * w + c] = colour[k];
            }
        }
        schedule.push(class);
    }
    if config.pixel_noise > 0.0 {
        for v in image.iter_mut() {
            *v += noise.sample(&mut rng);
        }
    }
    for v in image.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    let scene = LabeledScene {
        image: Tensor::new(vec![3, h, w], image)?,
        mask,
        num_classes: config.num_classes,
        domain: Domain::Source,
        seed,
    };
    Ok((scene, schedule))
}

pub fn generate_scene(seed: u64, config: &SceneConfig) -> Result<LabeledScene> {
    Ok(generate_scene_with_schedule(seed, config)?.0)
}

/// Hue rotation, contrast about mid-grey, brightness offset and Gaussian
/// noise, then clamping. The noise stream depends on both seeds.
pub fn domain_shift(scene: &LabeledScene, shift: &DomainShift) -> LabeledScene {
    let mut rng = ChaCha8Rng::seed_from_u64(shift.seed);
    rng.set_stream(scene.seed);
    let noise = (shift.noise_sigma > 0.0).then(|| Normal::new(0.0, shift.noise_sigma).expect("valid sigma"));
    let hw = scene.height() * scene.width();
    let src = scene.image.data();
    let mut out = vec![0.0; 3 * hw];
    for j in 0..hw {
        let rgb = rotate_hue([src[j], src[hw + j], src[2 * hw + j]], shift.hue_degrees);
        for k in 0..3 {
            out[k * hw + j] = (rgb[k] - 0.5) * shift.contrast + 0.5 + shift.brightness;
        }
    }
    if let Some(n) = noise {
        for v in out.iter_mut() {
            *v += n.sample(&mut rng);
        }
    }
    for v in out.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    LabeledScene {
        image: Tensor::new(scene.image.shape().to_vec(), out).expect("same shape"),
        mask: scene.mask.clone(),
        num_classes: scene.num_classes,
        domain: Domain::Target,
        seed: scene.seed,
    }
}
