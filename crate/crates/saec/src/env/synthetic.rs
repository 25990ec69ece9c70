//! Procedural target images for desk-scale training.
//!
//! Every generator produces global structure that crosses the centered mask,
//! so the masked region is predictable from its surroundings and inpainting
//! is learnable from context alone. Generation is a pure function of
//! `(kind, seed, shape)`.

use std::f64::consts::PI;

use rand::Rng as _;
use rand::SeedableRng as _;
use rand_chacha::ChaCha8Rng;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::{EnvError, ImageShape, Sample};

/// Procedural dataset families.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticKind {
    /// Oriented sinusoidal stripes.
    Stripes,
    /// Smooth sums of random Gaussian bumps.
    Blobs,
    /// Clamped linear ramps.
    Gradients,
}

impl SyntheticKind {
    /// Parse a dataset-kind name as it appears in config files.
    pub fn parse(s: &str) -> Result<Self, EnvError> {
        match s {
            "stripes" => Ok(SyntheticKind::Stripes),
            "blobs" => Ok(SyntheticKind::Blobs),
            "gradients" => Ok(SyntheticKind::Gradients),
            other => Err(EnvError::UnknownKind(other.to_string())),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SyntheticKind::Stripes => "stripes",
            SyntheticKind::Blobs => "blobs",
            SyntheticKind::Gradients => "gradients",
        }
    }
}

/// Binary mask `[c, h, w]`: a centered square of side `h/2` set to 1 (the
/// region the agent must synthesize), matching the paper's center-crop ratio
/// (a quarter of the area).
pub fn make_center_mask<S: Scalar>(shape: ImageShape) -> Tensor<S> {
    let side = shape.h / 2;
    let top = (shape.h - side) / 2;
    let left = (shape.w - side) / 2;
    let mut data = vec![S::zero(); shape.numel()];
    for c in 0..shape.c {
        for y in top..top + side {
            for x in left..left + side.min(shape.w - left) {
                data[(c * shape.h + y) * shape.w + x] = S::one();
            }
        }
    }
    Tensor::constant(&shape.dims(), data).expect("mask data matches shape")
}

/// Deterministically generate one `Sample` of the given kind.
///
/// The image lives in `[-1, 1]`; the mask is the standard centered square.
/// Same `(kind, seed, shape)` always yields bit-identical output.
pub fn make_synthetic_sample<S: Scalar>(
    kind: SyntheticKind,
    seed: u64,
    shape: ImageShape,
) -> Sample<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let field = match kind {
        SyntheticKind::Stripes => stripes(&mut rng, shape),
        SyntheticKind::Blobs => blobs(&mut rng, shape),
        SyntheticKind::Gradients => gradients(&mut rng, shape),
    };
    let data: Vec<S> = field.into_iter().map(S::from_f64_c).collect();
    let image = Tensor::constant(&shape.dims(), data).expect("image data matches shape");
    Sample {
        image,
        mask: make_center_mask(shape),
    }
}

/// Oriented sinusoid: amplitude 0.9, frequency 1-3 cycles per image,
/// per-channel phase offsets.
fn stripes(rng: &mut ChaCha8Rng, shape: ImageShape) -> Vec<f64> {
    let theta = rng.gen_range(0.0..PI);
    let freq = rng.gen_range(1.0..3.0);
    let phase = rng.gen_range(0.0..2.0 * PI);
    let channel_shift: Vec<f64> = (0..shape.c).map(|_| rng.gen_range(0.0..0.6)).collect();
    let (dx, dy) = (theta.cos(), theta.sin());
    let mut out = Vec::with_capacity(shape.numel());
    for c in 0..shape.c {
        for y in 0..shape.h {
            for x in 0..shape.w {
                let u = x as f64 / shape.w as f64;
                let v = y as f64 / shape.h as f64;
                let t = 2.0 * PI * freq * (u * dx + v * dy) + phase + channel_shift[c];
                out.push(0.9 * t.sin());
            }
        }
    }
    out
}

/// Sum of 4-7 Gaussian bumps squashed through tanh; bump widths are at least
/// an eighth of the image so each bump straddles the mask boundary.
fn blobs(rng: &mut ChaCha8Rng, shape: ImageShape) -> Vec<f64> {
    let k = rng.gen_range(4..=7);
    let bumps: Vec<(f64, f64, f64, f64)> = (0..k)
        .map(|_| {
            (
                rng.gen_range(0.0..1.0),   // center x
                rng.gen_range(0.0..1.0),   // center y
                rng.gen_range(0.12..0.35), // sigma
                rng.gen_range(-1.0..1.0),  // amplitude
            )
        })
        .collect();
    let channel_gain: Vec<f64> = (0..shape.c).map(|_| rng.gen_range(0.8..1.0)).collect();
    let mut out = Vec::with_capacity(shape.numel());
    for c in 0..shape.c {
        for y in 0..shape.h {
            for x in 0..shape.w {
                let u = x as f64 / shape.w as f64;
                let v = y as f64 / shape.h as f64;
                let mut s = 0.0;
                for &(cx, cy, sigma, amp) in &bumps {
                    let d2 = (u - cx).powi(2) + (v - cy).powi(2);
                    s += amp * (-d2 / (2.0 * sigma * sigma)).exp();
                }
                out.push((1.5 * channel_gain[c] * s).tanh());
            }
        }
    }
    out
}

/// Clamped linear ramp through the image center; the center region stays in
/// the linear range, so the masked area is never fully saturated.
fn gradients(rng: &mut ChaCha8Rng, shape: ImageShape) -> Vec<f64> {
    let theta = rng.gen_range(0.0..2.0 * PI);
    let slope = rng.gen_range(0.8..1.6);
    let channel_offset: Vec<f64> = (0..shape.c).map(|_| rng.gen_range(-0.3..0.3)).collect();
    let (dx, dy) = (theta.cos(), theta.sin());
    let mut out = Vec::with_capacity(shape.numel());
    for c in 0..shape.c {
        for y in 0..shape.h {
            for x in 0..shape.w {
                let u = x as f64 / shape.w as f64 - 0.5;
                let v = y as f64 / shape.h as f64 - 0.5;
                let raw = 2.0 * slope * (u * dx + v * dy) + channel_offset[c];
                out.push(raw.clamp(-0.95, 0.95));
            }
        }
    }
    out
}
