//! Procedural 3x32x32 shape datasets for the transfer-learning demo.
//!
//! Ten parametric shape classes, balanced by construction (class = index
//! mod 10). Target variants apply a fixed spatial rotation or channel
//! permutation plus optional color jitter, so the source/target pair forms
//! a small but honest domain shift.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::finetune::Dataset;
use crate::tensor::Tensor;

pub const IMAGE_SIDE: usize = 32;
pub const NUM_CLASSES: usize = 10;

/// Known dataset variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    /// The source distribution: shapes, random color and placement.
    ShapesSource,
    /// Every source image rotated 90 degrees, plus color jitter.
    ShapesRotatedTarget,
    /// Every source image with its channels cyclically permuted, plus jitter.
    ChannelsPermutedTarget,
}

impl Task {
    pub fn parse(name: &str) -> Result<Task> {
        match name {
            "shapes-source" => Ok(Task::ShapesSource),
            "shapes-rotated-target" => Ok(Task::ShapesRotatedTarget),
            "channels-permuted-target" => Ok(Task::ChannelsPermutedTarget),
            other => Err(Error::InvalidArgument(format!(
                "unknown task '{other}'; expected shapes-source, shapes-rotated-target, or channels-permuted-target"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Task::ShapesSource => "shapes-source",
            Task::ShapesRotatedTarget => "shapes-rotated-target",
            Task::ChannelsPermutedTarget => "channels-permuted-target",
        }
    }
}

/// Generation knobs beyond the task/seed/count triple.
#[derive(Debug, Clone, Copy)]
pub struct GenOptions {
    /// Strength of the per-sample color jitter on target variants; 0 makes
    /// a target image an exact transform of its paired source image.
    pub jitter: f32,
}

impl Default for GenOptions {
    fn default() -> Self {
        GenOptions { jitter: 0.25 }
    }
}

/// Generate `n` samples of a task. Deterministic per (task, seed, n); the
/// i-th target sample is the transform of the i-th source sample for the
/// same seed (paired generation).
pub fn gen_synthetic(task: Task, seed: u64, n: usize, opts: &GenOptions) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be >= 1".into()));
    }
    let s = IMAGE_SIDE;
    let mut images = Tensor::zeros(&[n, 3, s, s]);
    let mut labels = Vec::with_capacity(n);
    let chw = 3 * s * s;
    for i in 0..n {
        let class = i % NUM_CLASSES;
        labels.push(class);
        let mut img = render_source(seed, i, class);
        match task {
            Task::ShapesSource => {}
            Task::ShapesRotatedTarget => {
                img = rotate90(&img);
                jitter(&mut img, seed, i, opts.jitter);
            }
            Task::ChannelsPermutedTarget => {
                img = permute_channels(&img);
                jitter(&mut img, seed, i, opts.jitter);
            }
        }
        images.data_mut()[i * chw..(i + 1) * chw].copy_from_slice(img.data());
    }
    Dataset::new(images, labels, NUM_CLASSES)
}

/// Render the i-th source-distribution sample of class `class`.
pub fn render_source(seed: u64, index: usize, class: usize) -> Tensor {
    // one stream per sample so target variants can re-render the identical
    // source image
    let mut rng = ChaCha8Rng::seed_from_u64(
        seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(index as u64),
    );
    let s = IMAGE_SIDE as f32;
    let cx = s / 2.0 + rng.gen_range(-4.0..4.0);
    let cy = s / 2.0 + rng.gen_range(-4.0..4.0);
    let r = rng.gen_range(6.0..11.0f32);
    let color: [f32; 3] = [
        rng.gen_range(0.4..1.0),
        rng.gen_range(0.4..1.0),
        rng.gen_range(0.4..1.0),
    ];
    let bg = rng.gen_range(0.0..0.15f32);
    let mut img = Tensor::zeros(&[3, IMAGE_SIDE, IMAGE_SIDE]);
    for y in 0..IMAGE_SIDE {
        for x in 0..IMAGE_SIDE {
            let dx = x as f32 - cx;
            let dy = y as f32 - cy;
            let inside = match class {
                // disk
                0 => dx * dx + dy * dy <= r * r,
                // ring
                1 => {
                    let d2 = dx * dx + dy * dy;
                    d2 <= r * r && d2 >= (r - 3.0) * (r - 3.0)
                }
                // axis-aligned square
                2 => dx.abs() <= r * 0.8 && dy.abs() <= r * 0.8,
                // diamond
                3 => dx.abs() + dy.abs() <= r,
                // plus sign
                4 => (dx.abs() <= 2.0 && dy.abs() <= r) || (dy.abs() <= 2.0 && dx.abs() <= r),
                // X cross
                5 => {
                    ((dx - dy).abs() <= 2.5 || (dx + dy).abs() <= 2.5)
                        && dx.abs() <= r
                        && dy.abs() <= r
                }
                // horizontal bar (rotation-sensitive)
                6 => dy.abs() <= 2.5 && dx.abs() <= r,
                // upward triangle (rotation-sensitive)
                7 => dy >= -r * 0.6 && dy <= r * 0.6 && dx.abs() <= (dy + r * 0.6) * 0.7,
                // top half-disk (rotation-sensitive)
                8 => dx * dx + dy * dy <= r * r && dy <= 0.0,
                // corner L (rotation-sensitive)
                _ => (dx.abs() <= 2.5 && dy >= -r && dy <= r)
                    || (dy >= r - 2.5 && dy <= r && dx >= 0.0 && dx <= r),
            };
            for c in 0..3 {
                let noise = rng.gen_range(-0.05..0.05f32);
                let v = if inside { color[c] } else { bg };
                img.set(&[c, y, x], (v + noise).clamp(0.0, 1.0));
            }
        }
    }
    img
}

/// 90-degree counterclockwise rotation: out(y, x) = in(x, S-1-y).
pub fn rotate90(img: &Tensor) -> Tensor {
    let s = img.shape()[1];
    Tensor::from_fn(img.shape(), |ix| img.at(&[ix[0], ix[2], s - 1 - ix[1]]))
}

/// Cyclic channel permutation (R, G, B) -> (G, B, R).
pub fn permute_channels(img: &Tensor) -> Tensor {
    Tensor::from_fn(img.shape(), |ix| img.at(&[(ix[0] + 1) % 3, ix[1], ix[2]]))
}

/// Per-sample multiplicative gain and offset per channel, from a jitter
/// stream independent of the shape stream.
fn jitter(img: &mut Tensor, seed: u64, index: usize, strength: f32) {
    if strength == 0.0 {
        return;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(
        seed.wrapping_mul(0xc2b2_ae3d_27d4_eb4f)
            .wrapping_add(index as u64)
            ^ 0x5bd1_e995,
    );
    let s = img.shape()[1];
    let hw = s * s;
    for c in 0..3 {
        let gain = 1.0 + rng.gen_range(-strength..strength);
        let offset = rng.gen_range(-0.5 * strength..0.5 * strength);
        for v in &mut img.data_mut()[c * hw..(c + 1) * hw] {
            *v = (*v * gain + offset).clamp(0.0, 1.0);
        }
    }
}
