//! Episodic image-inpainting environment.
//!
//! Image-to-image translation is posed as a small MDP: the state is the
//! target image with a masked region progressively replaced by the agent's
//! predictions, the action is a full-resolution image, and the reward is an
//! image-quality metric between the composite and the ground truth. Episodes
//! run a fixed horizon `T`; the final state is the `T`-fold composition of
//! the per-step predictions.
//!
//! Data comes either from procedural generators ([`synthetic`]) or from a
//! directory of portable-pixmap files ([`load_image_directory`]).

pub mod metrics;
pub mod pnm;
pub mod synthetic;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom as _;
use rand::Rng as _;
use rand::SeedableRng as _;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

/// Errors from environment construction, stepping, metrics, and image I/O.
#[derive(Debug, Error)]
pub enum EnvError {
    /// Two images that must agree in shape do not.
    #[error("{op}: shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// `env_step` called on a state whose episode is over.
    #[error("env_step: episode already finished (t = {t} of {horizon})")]
    EpisodeFinished { t: usize, horizon: usize },
    /// A data source with no samples to draw from.
    #[error("{0}: empty data source")]
    EmptyDataSource(&'static str),
    /// Image too small for the SSIM window.
    #[error("ssim: image {h}x{w} smaller than the {window}x{window} window")]
    ImageTooSmall { h: usize, w: usize, window: usize },
    /// Unrecognized synthetic dataset kind.
    #[error("unknown dataset kind `{0}` (expected stripes, blobs, gradients, or directory)")]
    UnknownKind(String),
    /// Filesystem failure.
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
    /// A raster file that exists but cannot be decoded.
    #[error("{path}: {msg}")]
    BadImage { path: String, msg: String },
    /// A directory scan that produced no usable images.
    #[error("{path}: no decodable images found")]
    NoImages { path: String },
    /// Invalid argument.
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    /// Tensor-level failure bubbling up.
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Channels, height, and width of every image flowing through a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageShape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl ImageShape {
    pub fn new(c: usize, h: usize, w: usize) -> Self {
        ImageShape { c, h, w }
    }

    /// Shape as tensor dims `[c, h, w]`.
    pub fn dims(&self) -> Vec<usize> {
        vec![self.c, self.h, self.w]
    }

    pub fn numel(&self) -> usize {
        self.c * self.h * self.w
    }
}

/// Which half of a data source to draw from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

/// The metric used as the per-step reward.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RewardKind {
    Psnr,
    Ssim,
}

impl RewardKind {
    pub fn parse(s: &str) -> Result<Self, EnvError> {
        match s {
            "psnr" => Ok(RewardKind::Psnr),
            "ssim" => Ok(RewardKind::Ssim),
            other => Err(EnvError::Invalid {
                op: "reward_kind",
                msg: format!("unknown reward kind `{other}` (expected psnr or ssim)"),
            }),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            RewardKind::Psnr => "psnr",
            RewardKind::Ssim => "ssim",
        }
    }
}

/// Absolute metric per step, or the improvement over the previous step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RewardMode {
    Absolute,
    Delta,
}

impl RewardMode {
    pub fn parse(s: &str) -> Result<Self, EnvError> {
        match s {
            "absolute" => Ok(RewardMode::Absolute),
            "delta" => Ok(RewardMode::Delta),
            other => Err(EnvError::Invalid {
                op: "reward_mode",
                msg: format!("unknown reward mode `{other}` (expected absolute or delta)"),
            }),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            RewardMode::Absolute => "absolute",
            RewardMode::Delta => "delta",
        }
    }
}

/// Full reward configuration: metric, mode, and a scale applied last.
#[derive(Debug, Clone, Copy)]
pub struct RewardSpec {
    pub kind: RewardKind,
    pub mode: RewardMode,
    /// Multiplier applied to the (possibly differenced) metric; keeps
    /// discounted PSNR sums at a magnitude early critics can track.
    pub scale: f64,
}

impl RewardSpec {
    /// Raw metric value (pre-mode, pre-scale) between image and target.
    pub fn metric<S: Scalar>(&self, a: &Tensor<S>, b: &Tensor<S>) -> Result<f64, EnvError> {
        match self.kind {
            RewardKind::Psnr => metrics::psnr(a, b),
            RewardKind::Ssim => metrics::ssim(a, b),
        }
    }
}

/// One data item: an image in `[-1, 1]` and its binary mask (1 = synthesize).
#[derive(Debug, Clone)]
pub struct Sample<S: Scalar> {
    pub image: Tensor<S>,
    pub mask: Tensor<S>,
}

/// Resize interpolation for directory ingestion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResizeMethod {
    Nearest,
    Bilinear,
}

impl ResizeMethod {
    pub fn parse(s: &str) -> Result<Self, EnvError> {
        match s {
            "nearest" => Ok(ResizeMethod::Nearest),
            "bilinear" => Ok(ResizeMethod::Bilinear),
            other => Err(EnvError::Invalid {
                op: "resize",
                msg: format!("unknown resize method `{other}` (expected nearest or bilinear)"),
            }),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ResizeMethod::Nearest => "nearest",
            ResizeMethod::Bilinear => "bilinear",
        }
    }
}

/// Where episodes draw their target images from.
#[derive(Debug)]
pub enum DataSource<S: Scalar> {
    /// Procedural images: unbounded, the same law for both splits (the seed
    /// stream keeps train and eval draws distinct).
    Synthetic {
        kind: synthetic::SyntheticKind,
        shape: ImageShape,
    },
    /// Fixed images loaded from disk, pre-split into train and eval.
    Directory {
        train: Vec<Sample<S>>,
        eval: Vec<Sample<S>>,
    },
}

impl<S: Scalar> DataSource<S> {
    /// Number of distinct samples in a split; `None` for unbounded sources.
    pub fn len(&self, split: Split) -> Option<usize> {
        match self {
            DataSource::Synthetic { .. } => None,
            DataSource::Directory { train, eval } => Some(match split {
                Split::Train => train.len(),
                Split::Eval => eval.len(),
            }),
        }
    }

    /// Image shape every sample from this source has.
    pub fn shape(&self) -> Option<ImageShape> {
        match self {
            DataSource::Synthetic { shape, .. } => Some(*shape),
            DataSource::Directory { train, eval } => {
                let s = train.first().or_else(|| eval.first())?;
                let d = s.image.shape();
                Some(ImageShape::new(d[0], d[1], d[2]))
            }
        }
    }

    /// Draw one sample deterministically from `seed`.
    pub fn draw(&self, split: Split, seed: u64) -> Result<Sample<S>, EnvError> {
        match self {
            DataSource::Synthetic { kind, shape } => {
                Ok(synthetic::make_synthetic_sample(*kind, seed, *shape))
            }
            DataSource::Directory { train, eval } => {
                let pool = match split {
                    Split::Train => train,
                    Split::Eval => eval,
                };
                if pool.is_empty() {
                    return Err(EnvError::EmptyDataSource("draw"));
                }
                let idx = ChaCha8Rng::seed_from_u64(seed).gen_range(0..pool.len());
                Ok(pool[idx].clone())
            }
        }
    }
}

/// Mutable episode state.
///
/// `current` equals `target` outside the mask at every step; inside the mask
/// it holds the fill value at `t = 0` and the latest composite afterwards.
#[derive(Debug, Clone)]
pub struct EnvState<S: Scalar> {
    /// Observation `x_t`, shape `[c, h, w]`.
    pub current: Tensor<S>,
    /// Ground-truth image `y`.
    pub target: Tensor<S>,
    /// Binary mask, 1 where the agent must synthesize; same shape as `current`.
    pub mask: Tensor<S>,
    /// Steps taken so far.
    pub t: usize,
    /// Episode horizon `T`.
    pub horizon: usize,
}

/// Mask fill value: mid-gray in `[-1, 1]`, an unbiased starting point.
pub const MASK_FILL: f64 = 0.0;

/// Start an episode: draw a sample, blank the masked region to [`MASK_FILL`],
/// and return the state together with the target image.
///
/// Deterministic in `seed`; the unmasked region of `current` equals the
/// target exactly.
pub fn env_reset<S: Scalar>(
    source: &DataSource<S>,
    split: Split,
    seed: u64,
    horizon: usize,
) -> Result<(EnvState<S>, Tensor<S>), EnvError> {
    let sample = source.draw(split, seed)?;
    let fill = S::from_f64_c(MASK_FILL);
    let current: Vec<S> = {
        let img = sample.image.data();
        let mask = sample.mask.data();
        img.iter()
            .zip(mask.iter())
            .map(|(&v, &m)| if m > S::zero() { fill } else { v })
            .collect()
    };
    let current = Tensor::constant(sample.image.shape(), current)?;
    let target = sample.image;
    let state = EnvState {
        current,
        target: target.clone(),
        mask: sample.mask,
        t: 0,
        horizon,
    };
    Ok((state, target))
}

/// Pixelwise composite `mask·ỹ + (1−mask)·current`: the prediction replaces
/// exactly the masked pixels.
pub fn compose_state<S: Scalar>(
    current: &Tensor<S>,
    y_tilde: &Tensor<S>,
    mask: &Tensor<S>,
) -> Result<Tensor<S>, EnvError> {
    for other in [y_tilde, mask] {
        if current.shape() != other.shape() {
            return Err(EnvError::ShapeMismatch {
                op: "compose_state",
                lhs: current.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
    }
    let out: Vec<S> = {
        let c = current.data();
        let y = y_tilde.data();
        let m = mask.data();
        (0..c.len())
            .map(|i| m[i] * y[i] + (S::one() - m[i]) * c[i])
            .collect()
    };
    Ok(Tensor::constant(current.shape(), out)?)
}

/// Apply one image action: compose, score, advance the step counter.
///
/// The reward is the configured metric of the new composite against the
/// target (`absolute` mode) or its improvement over the previous composite
/// (`delta` mode), times `reward.scale`. `done` is true exactly when the
/// horizon is reached.
pub fn env_step<S: Scalar>(
    state: &EnvState<S>,
    y_tilde: &Tensor<S>,
    reward: &RewardSpec,
) -> Result<(EnvState<S>, f64, bool), EnvError> {
    if state.t >= state.horizon {
        return Err(EnvError::EpisodeFinished {
            t: state.t,
            horizon: state.horizon,
        });
    }
    let next_current = compose_state(&state.current, y_tilde, &state.mask)?;
    let metric_next = reward.metric(&next_current, &state.target)?;
    let raw = match reward.mode {
        RewardMode::Absolute => metric_next,
        RewardMode::Delta => metric_next - reward.metric(&state.current, &state.target)?,
    };
    let r = raw * reward.scale;
    let t = state.t + 1;
    let done = t == state.horizon;
    let next = EnvState {
        current: next_current,
        target: state.target.clone(),
        mask: state.mask.clone(),
        t,
        horizon: state.horizon,
    };
    Ok((next, r, done))
}

/// Load every portable-pixmap file under `path` into a [`DataSource`].
///
/// Files are ordered lexicographically by name (deterministic across
/// reloads), decoded, adapted to `shape.c` channels (channel mean to go
/// 3 -> 1, replication to go 1 -> 3), resized to `shape` with `resize`, and
/// split by a seeded shuffle: `floor(n · train_fraction)` images train, the
/// rest evaluate. Every sample gets the standard centered mask.
pub fn load_image_directory<S: Scalar>(
    path: &Path,
    shape: ImageShape,
    resize: ResizeMethod,
    train_fraction: f64,
    seed: u64,
) -> Result<DataSource<S>, EnvError> {
    let entries = std::fs::read_dir(path).map_err(|e| EnvError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("pgm" | "ppm" | "pnm")
            )
        })
        .collect();
    files.sort_by_key(|p| p.file_name().map(|n| n.to_os_string()));
    if files.is_empty() {
        return Err(EnvError::NoImages {
            path: path.display().to_string(),
        });
    }
    let mask = synthetic::make_center_mask::<S>(shape);
    let mut samples = Vec::with_capacity(files.len());
    for file in &files {
        let raw = pnm::read_pnm::<S>(file)?;
        let adapted = adapt_channels(&raw, shape.c).map_err(|msg| EnvError::BadImage {
            path: file.display().to_string(),
            msg,
        })?;
        let image = resize_image(&adapted, shape.h, shape.w, resize)?;
        samples.push(Sample {
            image,
            mask: mask.clone(),
        });
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((samples.len() as f64) * train_fraction).floor() as usize;
    let mut train = Vec::with_capacity(n_train);
    let mut eval = Vec::with_capacity(samples.len() - n_train.min(samples.len()));
    for (rank, &idx) in order.iter().enumerate() {
        if rank < n_train {
            train.push(samples[idx].clone());
        } else {
            eval.push(samples[idx].clone());
        }
    }
    Ok(DataSource::Directory { train, eval })
}

/// Convert channel count: identity, 3 -> 1 by mean, or 1 -> 3 by replication.
fn adapt_channels<S: Scalar>(img: &Tensor<S>, want_c: usize) -> Result<Tensor<S>, String> {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    if c == want_c {
        return Ok(img.clone());
    }
    let data = img.data();
    let plane = h * w;
    let out: Vec<S> = match (c, want_c) {
        (3, 1) => {
            let third = S::from_f64_c(1.0 / 3.0);
            (0..plane)
                .map(|i| (data[i] + data[plane + i] + data[2 * plane + i]) * third)
                .collect()
        }
        (1, 3) => data.iter().cycle().take(3 * plane).copied().collect(),
        _ => return Err(format!("cannot adapt {c} channels to {want_c}")),
    };
    drop(data);
    Tensor::constant(&[want_c, h, w], out).map_err(|e| e.to_string())
}

/// Resize `[c, h, w]` to `[c, out_h, out_w]`.
fn resize_image<S: Scalar>(
    img: &Tensor<S>,
    out_h: usize,
    out_w: usize,
    method: ResizeMethod,
) -> Result<Tensor<S>, EnvError> {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    if h == out_h && w == out_w {
        return Ok(img.clone());
    }
    let data = img.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    for ch in 0..c {
        let plane = &data[ch * h * w..(ch + 1) * h * w];
        for y in 0..out_h {
            for x in 0..out_w {
                let fy = (y as f64 + 0.5) * sy - 0.5;
                let fx = (x as f64 + 0.5) * sx - 0.5;
                let v = match method {
                    ResizeMethod::Nearest => {
                        let iy = fy.round().clamp(0.0, (h - 1) as f64) as usize;
                        let ix = fx.round().clamp(0.0, (w - 1) as f64) as usize;
                        plane[iy * w + ix].to_f64_c()
                    }
                    ResizeMethod::Bilinear => {
                        let fy = fy.clamp(0.0, (h - 1) as f64);
                        let fx = fx.clamp(0.0, (w - 1) as f64);
                        let y0 = fy.floor() as usize;
                        let x0 = fx.floor() as usize;
                        let y1 = (y0 + 1).min(h - 1);
                        let x1 = (x0 + 1).min(w - 1);
                        let ty = fy - y0 as f64;
                        let tx = fx - x0 as f64;
                        let p00 = plane[y0 * w + x0].to_f64_c();
                        let p01 = plane[y0 * w + x1].to_f64_c();
                        let p10 = plane[y1 * w + x0].to_f64_c();
                        let p11 = plane[y1 * w + x1].to_f64_c();
                        let top = p00 + (p01 - p00) * tx;
                        let bot = p10 + (p11 - p10) * tx;
                        top + (bot - top) * ty
                    }
                };
                out.push(S::from_f64_c(v));
            }
        }
    }
    drop(data);
    Ok(Tensor::constant(&[c, out_h, out_w], out)?)
}
