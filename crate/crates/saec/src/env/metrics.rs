//! Image-quality metrics: PSNR and SSIM over images in `[-1, 1]`.
//!
//! Both metrics interpret pixel values on the `[0, 1]` scale after an affine
//! remap from the network's `[-1, 1]` convention, and both accumulate in
//! `f64` regardless of the tensor's scalar type.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::EnvError;

/// SSIM window side, in pixels.
pub const SSIM_WINDOW: usize = 8;
/// SSIM window stride, in pixels.
pub const SSIM_STRIDE: usize = 4;
/// SSIM luminance stabilizer `(0.01)^2` on the `[0, 1]` scale.
pub const SSIM_C1: f64 = 0.01 * 0.01;
/// SSIM contrast stabilizer `(0.03)^2` on the `[0, 1]` scale.
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Peak signal-to-noise ratio in dB: `10·log10(1 / MSE)` with MSE computed
/// on the `[0, 1]` scale, capped at 100 dB when `MSE < 1e-10`.
///
/// The cap is continuous — the formula itself yields exactly 100 dB at
/// `MSE = 1e-10`. Any pair of equal shapes is accepted.
pub fn psnr<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<f64, EnvError> {
    if a.shape() != b.shape() {
        return Err(EnvError::ShapeMismatch {
            op: "psnr",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let ad = a.data();
    let bd = b.data();
    if ad.is_empty() {
        return Err(EnvError::Invalid {
            op: "psnr",
            msg: "empty image".into(),
        });
    }
    let mut acc = 0.0f64;
    for (&x, &y) in ad.iter().zip(bd.iter()) {
        // The [-1,1] -> [0,1] remap halves every difference.
        let d = (x.to_f64_c() - y.to_f64_c()) * 0.5;
        acc += d * d;
    }
    let mse = acc / ad.len() as f64;
    if mse < 1e-10 {
        Ok(100.0)
    } else {
        Ok(10.0 * (1.0 / mse).log10())
    }
}

/// Mean structural similarity over 8x8 uniform windows with stride 4.
///
/// Images must be `[c, h, w]` with `h, w >= 8`; multi-channel images are
/// reduced to grayscale by the channel mean before windowing. Window
/// statistics use uniform weights summing to 1 (population variance), so
/// values deviate slightly from Gaussian-window implementations.
pub fn ssim<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<f64, EnvError> {
    if a.shape() != b.shape() {
        return Err(EnvError::ShapeMismatch {
            op: "ssim",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    if a.rank() != 3 {
        return Err(EnvError::Invalid {
            op: "ssim",
            msg: format!("want a [c, h, w] image, got shape {:?}", a.shape()),
        });
    }
    let (h, w) = (a.shape()[1], a.shape()[2]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(EnvError::ImageTooSmall {
            h,
            w,
            window: SSIM_WINDOW,
        });
    }
    let ga = to_gray01(a);
    let gb = to_gray01(b);

    let mut acc = 0.0f64;
    let mut windows = 0usize;
    let mut wy = 0;
    while wy + SSIM_WINDOW <= h {
        let mut wx = 0;
        while wx + SSIM_WINDOW <= w {
            acc += window_ssim(&ga, &gb, w, wy, wx);
            windows += 1;
            wx += SSIM_STRIDE;
        }
        wy += SSIM_STRIDE;
    }
    Ok(acc / windows as f64)
}

/// Channel-mean grayscale on the `[0, 1]` scale, row-major `[h, w]`.
fn to_gray01<S: Scalar>(img: &Tensor<S>) -> Vec<f64> {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let data = img.data();
    let mut gray = vec![0.0f64; h * w];
    for ch in 0..c {
        let plane = &data[ch * h * w..(ch + 1) * h * w];
        for (g, &v) in gray.iter_mut().zip(plane.iter()) {
            *g += (v.to_f64_c() + 1.0) * 0.5;
        }
    }
    let inv_c = 1.0 / c as f64;
    for g in &mut gray {
        *g *= inv_c;
    }
    gray
}

/// SSIM of one window anchored at `(wy, wx)`; two-pass moments for accuracy.
fn window_ssim(ga: &[f64], gb: &[f64], w: usize, wy: usize, wx: usize) -> f64 {
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut mu_a = 0.0;
    let mut mu_b = 0.0;
    for y in wy..wy + SSIM_WINDOW {
        for x in wx..wx + SSIM_WINDOW {
            mu_a += ga[y * w + x];
            mu_b += gb[y * w + x];
        }
    }
    mu_a /= n;
    mu_b /= n;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    let mut cov = 0.0;
    for y in wy..wy + SSIM_WINDOW {
        for x in wx..wx + SSIM_WINDOW {
            let da = ga[y * w + x] - mu_a;
            let db = gb[y * w + x] - mu_b;
            var_a += da * da;
            var_b += db * db;
            cov += da * db;
        }
    }
    var_a /= n;
    var_b /= n;
    cov /= n;
    let num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2);
    let den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2);
    num / den
}
