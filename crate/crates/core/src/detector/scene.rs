//! Synthetic single-target frames with look-alike distractors.
//!
//! Each frame is a grayscale sky: a random base level with a vertical
//! gradient and Gaussian sensor noise. With probability `presence` it holds
//! one target, an "X"-shaped bright object whose tight box is the ground
//! truth. Distractors are filled ellipses of the same size range and
//! contrast, so a detector must learn shape rather than brightness.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::eval::BBox;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    /// Side length of the square image in pixels.
    pub image_size: usize,
    /// Probability that a frame holds a target.
    pub presence: f64,
    /// Inclusive range of target and distractor extents in pixels.
    pub target_size: [usize; 2],
    /// Inclusive range of distractor counts per frame.
    pub distractors: [usize; 2],
    /// Standard deviation of the additive pixel noise, in `[0, 1]` units.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            presence: 0.7,
            target_size: [6, 16],
            distractors: [0, 3],
            noise: 0.05,
            seed: 7,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.target_size;
        if self.image_size < 4 {
            return Err(Error::config(format!("image_size {} is too small", self.image_size)));
        }
        if !(0.0..=1.0).contains(&self.presence) {
            return Err(Error::config(format!("presence {} outside [0, 1]", self.presence)));
        }
        if lo < 3 || lo > hi {
            return Err(Error::config(format!(
                "target_size [{lo}, {hi}] must satisfy 3 <= min <= max"
            )));
        }
        if hi > self.image_size {
            return Err(Error::config(format!(
                "targets up to {hi} px do not fit a {} px image",
                self.image_size
            )));
        }
        if self.distractors[0] > self.distractors[1] {
            return Err(Error::config("distractors range has min > max"));
        }
        if !(self.noise >= 0.0 && self.noise <= 1.0) {
            return Err(Error::config(format!("noise {} outside [0, 1]", self.noise)));
        }
        Ok(())
    }
}

/// One grayscale image with its optional ground-truth box.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub id: u64,
    pub size: usize,
    /// Row-major 8-bit intensities, `size * size` of them.
    pub pixels: Vec<u8>,
    pub gt: Option<BBox<f64>>,
}

impl Frame {
    pub fn ground_truth(&self) -> crate::eval::GroundTruth<f64> {
        crate::eval::GroundTruth {
            frame: self.id,
            bbox: self.gt,
        }
    }
}

/// Generates `count` frames; the same spec always yields the same frames.
pub fn generate_dataset(spec: &SceneSpec, count: usize) -> Result<Vec<Frame>> {
    spec.validate()?;
    if count == 0 {
        return Err(Error::config("frame count must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::config(e.to_string()))?;
    Ok((0..count as u64)
        .map(|id| render_frame(spec, id, &mut rng, &noise))
        .collect())
}

fn render_frame(spec: &SceneSpec, id: u64, rng: &mut ChaCha8Rng, noise: &Normal<f64>) -> Frame {
    let n = spec.image_size;
    let [lo, hi] = spec.target_size;
    let base = rng.random_range(0.15..0.45);
    let tilt = rng.random_range(-0.12..0.12);
    let mut canvas: Vec<f64> = (0..n * n)
        .map(|i| base + tilt * ((i / n) as f64 / n as f64 - 0.5))
        .collect();

    let distractors = rng.random_range(spec.distractors[0]..=spec.distractors[1]);
    for _ in 0..distractors {
        let rx = rng.random_range(lo..=hi) as f64 / 2.0;
        let ry = rng.random_range(lo..=hi) as f64 / 2.0;
        let cx = rng.random_range(rx..=n as f64 - rx);
        let cy = rng.random_range(ry..=n as f64 - ry);
        let contrast = rng.random_range(0.2..0.5);
        paint(&mut canvas, n, |x, y| {
            let dx = (x - cx) / rx;
            let dy = (y - cy) / ry;
            dx * dx + dy * dy <= 1.0
        }, contrast);
    }

    let gt = if rng.random_bool(spec.presence) {
        let w = rng.random_range(lo..=hi);
        let h = rng.random_range(lo..=hi);
        let x1 = rng.random_range(0..=n - w) as f64;
        let y1 = rng.random_range(0..=n - h) as f64;
        let (w, h) = (w as f64, h as f64);
        let contrast = rng.random_range(0.2..0.5);
        // arm half-thickness in normalised box coordinates
        let arm = 0.2;
        paint(&mut canvas, n, |x, y| {
            let u = (x - x1) / w;
            let v = (y - y1) / h;
            (0.0..=1.0).contains(&u)
                && (0.0..=1.0).contains(&v)
                && ((u - v).abs() < arm || (u + v - 1.0).abs() < arm)
        }, contrast);
        Some(BBox { x1, y1, x2: x1 + w, y2: y1 + h })
    } else {
        None
    };

    let pixels = canvas
        .into_iter()
        .map(|v| ((v + noise.sample(rng)).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    Frame { id, size: n, pixels, gt }
}

/// Adds `contrast` to every pixel whose centre satisfies `inside`.
fn paint(canvas: &mut [f64], n: usize, inside: impl Fn(f64, f64) -> bool, contrast: f64) {
    for y in 0..n {
        for x in 0..n {
            if inside(x as f64 + 0.5, y as f64 + 0.5) {
                canvas[y * n + x] += contrast;
            }
        }
    }
}
