//! The four networks of the framework, as pure forward functions.
//!
//! - **Actor** (policy φ): a small convolutional encoder over the state that
//!   emits the mean and bounded log-std of a diagonal Gaussian over the
//!   latent action, plus per-level skip features for the executor.
//! - **Executor** (ψ): a decoder that projects the latent action to the
//!   bottleneck resolution and upsamples back to image size, concatenating
//!   the actor's skip features along the channel axis so detail can bypass
//!   the stochastic bottleneck; tanh output head.
//! - **Twin critics** (θ₁, θ₂ and their EMA targets): convolutional encoders
//!   over the state whose flattened features are concatenated with the
//!   latent action and scored by a two-layer head.
//! - **Discriminator**: the same encoder shape with a single logit head,
//!   judging composed outputs unconditionally.
//!
//! All forwards are deterministic given parameters and inputs; stochasticity
//! enters only through the explicit `noise` argument of [`sample_latent`].

use std::f64::consts::PI;

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::nn::{init_conv, init_conv_t, init_dense, log_std_bounds, NnError, ParamSet};
use crate::rng::{event_rng, streams};
use crate::scalar::Scalar;
use crate::tensor::tape::{Act, Tape};
use crate::tensor::{Tensor, TensorError};

/// Regularizer inside the squash correction `log(1 - tanh²(u) + ε)`.
pub const SQUASH_EPS: f64 = 1e-6;

/// Hidden width of the critic's scoring head.
pub const CRITIC_HIDDEN: usize = 256;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("agent: {0}")]
    Invalid(String),
}

/// Network geometry shared by every component.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchConfig {
    /// Image channels.
    pub c: usize,
    /// Image height and width.
    pub h: usize,
    pub w: usize,
    /// Number of encoder levels `L` (downsampling by 2 each).
    pub levels: usize,
    /// Channel widths per level, `widths.len() == levels`.
    pub widths: Vec<usize>,
    /// Latent action dimension.
    pub z_dim: usize,
    /// Whether executor upsampling concatenates actor skip features.
    pub skips_enabled: bool,
    /// Nonlinearity used throughout the hidden layers.
    pub activation: Act,
}

impl ArchConfig {
    /// The paper-scale default: 1x32x32 images, three levels, 16 latents.
    pub fn default_desk() -> Self {
        ArchConfig {
            c: 1,
            h: 32,
            w: 32,
            levels: 3,
            widths: vec![16, 32, 64],
            z_dim: 16,
            skips_enabled: true,
            activation: Act::Relu,
        }
    }

    /// Check internal consistency (divisibility, matching widths).
    pub fn validate(&self) -> Result<(), AgentError> {
        if self.widths.len() != self.levels {
            return Err(AgentError::Invalid(format!(
                "widths {:?} must have one entry per level ({})",
                self.widths, self.levels
            )));
        }
        if self.levels == 0 || self.z_dim == 0 || self.c == 0 {
            return Err(AgentError::Invalid(
                "levels, z_dim, and channels must be positive".into(),
            ));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(AgentError::Invalid("zero-width level".into()));
        }
        let div = 1usize << self.levels;
        if self.h % div != 0 || self.w % div != 0 || self.h / div == 0 || self.w / div == 0 {
            return Err(AgentError::Invalid(format!(
                "image {}x{} must be divisible by 2^levels = {div} with a nonzero bottleneck",
                self.h, self.w
            )));
        }
        Ok(())
    }

    /// Bottleneck spatial size `(h/2^L, w/2^L)`.
    pub fn bottleneck(&self) -> (usize, usize) {
        (self.h >> self.levels, self.w >> self.levels)
    }

    /// Flattened encoder feature length at the bottleneck.
    pub fn flat_dim(&self) -> usize {
        let (bh, bw) = self.bottleneck();
        self.widths[self.levels - 1] * bh * bw
    }

    /// Output channels of executor upsample block `l`.
    fn up_out(&self, l: usize) -> usize {
        if l > 0 {
            self.widths[l - 1]
        } else {
            self.widths[0]
        }
    }

    /// Input channels of executor upsample block `l` (blocks run from
    /// `levels-1` down to 0; each block after the first also carries the
    /// previous level's concatenated skip).
    fn up_in(&self, l: usize) -> usize {
        if l == self.levels - 1 {
            self.widths[self.levels - 1]
        } else {
            self.up_out(l + 1)
                + if self.skips_enabled {
                    self.widths[l + 1]
                } else {
                    0
                }
        }
    }

    /// Input channels of the executor's final image head.
    fn head_in(&self) -> usize {
        self.up_out(0)
            + if self.skips_enabled {
                self.widths[0]
            } else {
                0
            }
    }
}

// ---- parameter construction ----

/// Actor parameters: `enc{l}/{k,b}` stride-1 convs and the two dense heads
/// `mean/{w,b}`, `log_std/{w,b}`.
pub fn init_actor<S: Scalar>(
    rng: &mut ChaCha8Rng,
    arch: &ArchConfig,
) -> Result<ParamSet<S>, AgentError> {
    let mut ps = ParamSet::new();
    let mut in_c = arch.c;
    for l in 0..arch.levels {
        init_conv(&mut ps, rng, &format!("enc{l}"), arch.widths[l], in_c, 3, 3)?;
        in_c = arch.widths[l];
    }
    init_dense(&mut ps, rng, "mean", arch.flat_dim(), arch.z_dim)?;
    init_dense(&mut ps, rng, "log_std", arch.flat_dim(), arch.z_dim)?;
    Ok(ps)
}

/// Executor parameters: the latent projection `proj/{w,b}`, one transposed
/// conv `up{l}/{k,b}` per level, and the image head `head/{k,b}`.
pub fn init_executor<S: Scalar>(
    rng: &mut ChaCha8Rng,
    arch: &ArchConfig,
) -> Result<ParamSet<S>, AgentError> {
    let mut ps = ParamSet::new();
    init_dense(&mut ps, rng, "proj", arch.z_dim, arch.flat_dim())?;
    for l in (0..arch.levels).rev() {
        init_conv_t(
            &mut ps,
            rng,
            &format!("up{l}"),
            arch.up_in(l),
            arch.up_out(l),
            2,
            2,
        )?;
    }
    init_conv(&mut ps, rng, "head", arch.c, arch.head_in(), 3, 3)?;
    Ok(ps)
}

/// Critic parameters: `enc{l}/{k,b}` stride-2 convs, then `fc/{w,b}` over
/// the flattened features concatenated with the latent action, and the
/// scalar head `out/{w,b}`.
pub fn init_critic<S: Scalar>(
    rng: &mut ChaCha8Rng,
    arch: &ArchConfig,
) -> Result<ParamSet<S>, AgentError> {
    let mut ps = ParamSet::new();
    let mut in_c = arch.c;
    for l in 0..arch.levels {
        init_conv(&mut ps, rng, &format!("enc{l}"), arch.widths[l], in_c, 3, 3)?;
        in_c = arch.widths[l];
    }
    init_dense(
        &mut ps,
        rng,
        "fc",
        arch.flat_dim() + arch.z_dim,
        CRITIC_HIDDEN,
    )?;
    init_dense(&mut ps, rng, "out", CRITIC_HIDDEN, 1)?;
    Ok(ps)
}

/// Discriminator parameters: encoder plus a single logit head `out/{w,b}`.
pub fn init_discriminator<S: Scalar>(
    rng: &mut ChaCha8Rng,
    arch: &ArchConfig,
) -> Result<ParamSet<S>, AgentError> {
    let mut ps = ParamSet::new();
    let mut in_c = arch.c;
    for l in 0..arch.levels {
        init_conv(&mut ps, rng, &format!("enc{l}"), arch.widths[l], in_c, 3, 3)?;
        in_c = arch.widths[l];
    }
    init_dense(&mut ps, rng, "out", arch.flat_dim(), 1)?;
    Ok(ps)
}

/// All parameter sets of one agent.
#[derive(Debug)]
pub struct Agent<S: Scalar> {
    pub arch: ArchConfig,
    /// Policy φ: encoder + Gaussian heads.
    pub actor: ParamSet<S>,
    /// Executor ψ: decoder from latent to image action.
    pub executor: ParamSet<S>,
    /// Twin critics θ₁, θ₂.
    pub q1: ParamSet<S>,
    pub q2: ParamSet<S>,
    /// EMA target critics θ̄₁, θ̄₂ (never receive gradients).
    pub target_q1: ParamSet<S>,
    pub target_q2: ParamSet<S>,
    /// Discriminator.
    pub discriminator: ParamSet<S>,
}

impl<S: Scalar> Agent<S> {
    /// Initialize every network from the master seed's init stream. Target
    /// critics start as exact copies of the online critics.
    pub fn init(arch: ArchConfig, master_seed: u64) -> Result<Self, AgentError> {
        arch.validate()?;
        let mut rng = event_rng(master_seed, streams::INIT, 0);
        let actor = init_actor(&mut rng, &arch)?;
        let executor = init_executor(&mut rng, &arch)?;
        let q1 = init_critic(&mut rng, &arch)?;
        let q2 = init_critic(&mut rng, &arch)?;
        let target_q1 = q1.detached();
        let target_q2 = q2.detached();
        let discriminator = init_discriminator(&mut rng, &arch)?;
        Ok(Agent {
            arch,
            actor,
            executor,
            q1,
            q2,
            target_q1,
            target_q2,
            discriminator,
        })
    }
}

// ---- layer helpers ----

fn dense<S: Scalar>(
    tape: &Tape<S>,
    ps: &ParamSet<S>,
    name: &str,
    x: &Tensor<S>,
) -> Result<Tensor<S>, AgentError> {
    let w = ps.get(&format!("{name}/w"))?;
    let b = ps.get(&format!("{name}/b"))?;
    Ok(tape.add(&tape.matmul(x, w)?, b)?)
}

fn conv<S: Scalar>(
    tape: &Tape<S>,
    ps: &ParamSet<S>,
    name: &str,
    x: &Tensor<S>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<S>, AgentError> {
    let k = ps.get(&format!("{name}/k"))?;
    let b = ps.get(&format!("{name}/b"))?;
    Ok(tape.add(&tape.conv2d(x, k, stride, pad)?, b)?)
}

fn conv_t<S: Scalar>(
    tape: &Tape<S>,
    ps: &ParamSet<S>,
    name: &str,
    x: &Tensor<S>,
    stride: usize,
) -> Result<Tensor<S>, AgentError> {
    let k = ps.get(&format!("{name}/k"))?;
    let b = ps.get(&format!("{name}/b"))?;
    Ok(tape.add(&tape.conv2d_transpose(x, k, stride)?, b)?)
}

fn check_image<S: Scalar>(arch: &ArchConfig, x: &Tensor<S>, op: &str) -> Result<(), AgentError> {
    if x.rank() != 4 || x.shape()[1] != arch.c || x.shape()[2] != arch.h || x.shape()[3] != arch.w {
        return Err(AgentError::Invalid(format!(
            "{op}: want [n, {}, {}, {}] input, got {:?}",
            arch.c,
            arch.h,
            arch.w,
            x.shape()
        )));
    }
    Ok(())
}

// ---- forward passes ----

/// Actor outputs: Gaussian head plus per-level skip features.
#[derive(Debug)]
pub struct ActorOutput<S: Scalar> {
    /// `[n, z_dim]` Gaussian mean.
    pub mean: Tensor<S>,
    /// `[n, z_dim]` log standard deviation, clamped to the stable range.
    pub log_std: Tensor<S>,
    /// Pre-pool features per level: `skips[l]` is
    /// `[n, widths[l], h/2^l, w/2^l]`.
    pub skips: Vec<Tensor<S>>,
}

/// Encode a batch of states `[n, c, h, w]` into policy parameters and skips.
pub fn actor_forward<S: Scalar>(
    tape: &Tape<S>,
    params: &ParamSet<S>,
    arch: &ArchConfig,
    x: &Tensor<S>,
) -> Result<ActorOutput<S>, AgentError> {
    check_image(arch, x, "actor_forward")?;
    let n = x.shape()[0];
    let mut h = x.clone();
    let mut skips = Vec::with_capacity(arch.levels);
    for l in 0..arch.levels {
        let pre = tape.activation(
            arch.activation,
            &conv(tape, params, &format!("enc{l}"), &h, 1, 1)?,
        )?;
        skips.push(pre.clone());
        h = tape.max_pool2(&pre)?;
    }
    let flat = tape.reshape(&h, &[n, arch.flat_dim()])?;
    let mean = dense(tape, params, "mean", &flat)?;
    // Squash the raw head smoothly into (lo, hi) instead of clamping: the
    // gradient stays alive at the band edges, so entropy pressure can always
    // widen a policy that the reconstruction loss has squeezed to the floor.
    let (lo, hi) = log_std_bounds::<S>();
    let half = (hi - lo) * S::from_f64_c(0.5);
    let center = (hi + lo) * S::from_f64_c(0.5);
    let raw = tape.tanh(&dense(tape, params, "log_std", &flat)?)?;
    let log_std = tape.add_const(&tape.scale(&raw, half)?, center)?;
    Ok(ActorOutput {
        mean,
        log_std,
        skips,
    })
}

/// Reparameterized draw from the tanh-squashed Gaussian policy.
///
/// `noise` must be standard-normal of shape `[n, z_dim]` and is treated as a
/// constant, so gradients reach `mean` and `log_std` through the sample
/// (`u = mean + exp(log_std)·noise`) and through the squash correction; the
/// Gaussian density term `-eps²/2` is constant under reparameterization.
///
/// Returns the action `z = tanh(u)` in `(-1, 1)` and the per-sample
/// log-density `[n]`:
/// `Σ_i [ log N(u_i; mean_i, σ_i) − log(1 − tanh²(u_i) + 1e-6) ]`.
pub fn sample_latent<S: Scalar>(
    tape: &Tape<S>,
    out: &ActorOutput<S>,
    noise: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>), AgentError> {
    if noise.shape() != out.mean.shape() {
        return Err(AgentError::Invalid(format!(
            "sample_latent: noise shape {:?} must match mean shape {:?}",
            noise.shape(),
            out.mean.shape()
        )));
    }
    let std = tape.exp(&out.log_std)?;
    let u = tape.add(&out.mean, &tape.mul(&std, noise)?)?;
    let z = tape.tanh(&u)?;
    // log N(u; mean, σ) = -eps²/2 - ln(2π)/2 - log_std, with eps constant.
    let half_ln_2pi = 0.5 * (2.0 * PI).ln();
    let const_part: Vec<S> = noise
        .data()
        .iter()
        .map(|&e| {
            let e = e.to_f64_c();
            S::from_f64_c(-0.5 * e * e - half_ln_2pi)
        })
        .collect();
    let const_part = Tensor::constant(noise.shape(), const_part)?;
    let gauss = tape.sub(&const_part, &out.log_std)?;
    let zz = tape.mul(&z, &z)?;
    let one_minus = tape.add_const(&tape.neg(&zz)?, S::from_f64_c(1.0 + SQUASH_EPS))?;
    let corr = tape.ln(&one_minus)?;
    let log_prob = tape.sum_last_axis(&tape.sub(&gauss, &corr)?)?;
    Ok((z, log_prob))
}

/// The evaluation-time action: the squashed policy mean, no sampling.
pub fn deterministic_latent<S: Scalar>(
    tape: &Tape<S>,
    out: &ActorOutput<S>,
) -> Result<Tensor<S>, AgentError> {
    Ok(tape.tanh(&out.mean)?)
}

/// Log-density of the 1-D tanh-squashed Gaussian at `z`, matching
/// [`sample_latent`]'s formula exactly (including the `1e-6` regularizer).
/// Used by tests to verify normalization by quadrature.
pub fn squashed_log_density(mean: f64, log_std: f64, z: f64) -> f64 {
    let sigma = log_std.exp();
    let u = z.atanh();
    let eps = (u - mean) / sigma;
    -0.5 * eps * eps - 0.5 * (2.0 * PI).ln() - log_std - (1.0 - z * z + SQUASH_EPS).ln()
}

/// Smallest gap between the winner and runner-up of any 2×2 pooling window
/// across the given feature maps (shape `[n, f, h, w]`, even h and w).
///
/// Finite-difference gradient checks through max-pooling are only valid when
/// this margin dwarfs the perturbation-induced value shifts; test code scans
/// candidate inputs until the margin clears a safety threshold.
pub fn min_pool_margin<S: Scalar>(maps: &[Tensor<S>]) -> f64 {
    let mut margin = f64::INFINITY;
    for s in maps {
        let (n, f, h, w) = (s.shape()[0], s.shape()[1], s.shape()[2], s.shape()[3]);
        let d = s.data();
        for img in 0..n {
            for ch in 0..f {
                let base = (img * f + ch) * h * w;
                for y in (0..h).step_by(2) {
                    for x in (0..w).step_by(2) {
                        let mut vals = [
                            d[base + y * w + x].to_f64_c(),
                            d[base + y * w + x + 1].to_f64_c(),
                            d[base + (y + 1) * w + x].to_f64_c(),
                            d[base + (y + 1) * w + x + 1].to_f64_c(),
                        ];
                        vals.sort_by(f64::total_cmp);
                        margin = margin.min(vals[3] - vals[2]);
                    }
                }
            }
        }
    }
    margin
}

/// Decode a latent action (and skip features) into an image action in
/// `[-1, 1]`, shape `[n, c, h, w]`.
///
/// The latent is projected and reshaped to the bottleneck resolution, then
/// each upsample block doubles the spatial size with a stride-2 transposed
/// convolution; when skips are enabled the matching actor feature map is
/// concatenated along the channel axis right after the block, feeding the
/// next transposed convolution (the last one feeds the tanh image head).
pub fn executor_forward<S: Scalar>(
    tape: &Tape<S>,
    params: &ParamSet<S>,
    arch: &ArchConfig,
    z: &Tensor<S>,
    skips: &[Tensor<S>],
) -> Result<Tensor<S>, AgentError> {
    if z.rank() != 2 || z.shape()[1] != arch.z_dim {
        return Err(AgentError::Invalid(format!(
            "executor_forward: want [n, {}] latent, got {:?}",
            arch.z_dim,
            z.shape()
        )));
    }
    if arch.skips_enabled && skips.len() != arch.levels {
        return Err(AgentError::Invalid(format!(
            "executor_forward: want {} skip tensors, got {}",
            arch.levels,
            skips.len()
        )));
    }
    let n = z.shape()[0];
    let (bh, bw) = arch.bottleneck();
    let proj = tape.activation(arch.activation, &dense(tape, params, "proj", z)?)?;
    let mut h = tape.reshape(&proj, &[n, arch.widths[arch.levels - 1], bh, bw])?;
    for l in (0..arch.levels).rev() {
        h = tape.activation(
            arch.activation,
            &conv_t(tape, params, &format!("up{l}"), &h, 2)?,
        )?;
        if arch.skips_enabled {
            h = tape.concat(&h, &skips[l], 1)?;
        }
    }
    let img = conv(tape, params, "head", &h, 1, 1)?;
    Ok(tape.tanh(&img)?)
}

/// Score a `(state, latent action)` pair with one critic; returns `[n]`.
/// Pass whichever of θ₁/θ₂/θ̄₁/θ̄₂ is wanted as `params`.
pub fn critic_forward<S: Scalar>(
    tape: &Tape<S>,
    params: &ParamSet<S>,
    arch: &ArchConfig,
    x: &Tensor<S>,
    z: &Tensor<S>,
) -> Result<Tensor<S>, AgentError> {
    check_image(arch, x, "critic_forward")?;
    if z.rank() != 2 || z.shape() != [x.shape()[0], arch.z_dim] {
        return Err(AgentError::Invalid(format!(
            "critic_forward: want [{}, {}] latent, got {:?}",
            x.shape()[0],
            arch.z_dim,
            z.shape()
        )));
    }
    let n = x.shape()[0];
    let mut h = x.clone();
    for l in 0..arch.levels {
        h = tape.activation(
            arch.activation,
            &conv(tape, params, &format!("enc{l}"), &h, 2, 1)?,
        )?;
    }
    let flat = tape.reshape(&h, &[n, arch.flat_dim()])?;
    let hz = tape.concat(&flat, z, 1)?;
    let hid = tape.activation(arch.activation, &dense(tape, params, "fc", &hz)?)?;
    let q = dense(tape, params, "out", &hid)?;
    Ok(tape.reshape(&q, &[n])?)
}

/// Discriminator logits for a batch of images; returns `[n]`.
pub fn discriminator_forward<S: Scalar>(
    tape: &Tape<S>,
    params: &ParamSet<S>,
    arch: &ArchConfig,
    x: &Tensor<S>,
) -> Result<Tensor<S>, AgentError> {
    check_image(arch, x, "discriminator_forward")?;
    let n = x.shape()[0];
    let mut h = x.clone();
    for l in 0..arch.levels {
        h = tape.activation(
            arch.activation,
            &conv(tape, params, &format!("enc{l}"), &h, 2, 1)?,
        )?;
    }
    let flat = tape.reshape(&h, &[n, arch.flat_dim()])?;
    let logit = dense(tape, params, "out", &flat)?;
    Ok(tape.reshape(&logit, &[n])?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::normal_vec;
    use crate::tensor::gradcheck::grad_check;

    fn tiny_arch() -> ArchConfig {
        ArchConfig {
            c: 1,
            h: 8,
            w: 8,
            levels: 2,
            widths: vec![2, 3],
            z_dim: 2,
            skips_enabled: true,
            // tanh keeps every op smooth so finite differences are reliable
            activation: Act::Tanh,
        }
    }

    fn default_arch() -> ArchConfig {
        ArchConfig::default_desk()
    }

    fn test_state(arch: &ArchConfig, n: usize, seed: u64) -> Tensor<f64> {
        let rng = &mut event_rng(seed, streams::UPDATE_LATENT, 99);
        let data = normal_vec::<f64>(rng, n * arch.c * arch.h * arch.w);
        let data = data.into_iter().map(|v| (0.5 * v).tanh()).collect();
        Tensor::constant(&[n, arch.c, arch.h, arch.w], data).unwrap()
    }

    fn std_noise(n: usize, z_dim: usize, seed: u64) -> Tensor<f64> {
        let rng = &mut event_rng(seed, streams::UPDATE_LATENT, 0);
        Tensor::constant(&[n, z_dim], normal_vec(rng, n * z_dim)).unwrap()
    }

    #[test]
    fn validate_rejects_inconsistent_configs() {
        let mut bad = default_arch();
        bad.widths = vec![16, 32];
        assert!(bad.validate().is_err());
        let mut odd = default_arch();
        odd.h = 20; // not divisible by 8
        assert!(odd.validate().is_err());
        assert!(default_arch().validate().is_ok());
    }

    #[test]
    fn actor_shapes_and_log_std_stays_in_band() {
        let arch = default_arch();
        let agent = Agent::<f64>::init(arch.clone(), 1).unwrap();
        let tape = Tape::new();
        let x = test_state(&arch, 2, 7);
        let out = actor_forward(&tape, &agent.actor, &arch, &x).unwrap();
        assert_eq!(out.mean.shape(), &[2, 16]);
        assert_eq!(out.log_std.shape(), &[2, 16]);
        assert_eq!(out.skips.len(), 3);
        assert_eq!(out.skips[0].shape(), &[2, 16, 32, 32]);
        assert_eq!(out.skips[1].shape(), &[2, 32, 16, 16]);
        assert_eq!(out.skips[2].shape(), &[2, 64, 8, 8]);
        for &v in out.log_std.data().iter() {
            assert!((-2.5..=2.0).contains(&v));
        }
    }

    #[test]
    fn executor_decodes_to_image_range() {
        let arch = default_arch();
        let agent = Agent::<f64>::init(arch.clone(), 2).unwrap();
        let tape = Tape::new();
        let x = test_state(&arch, 2, 8);
        let out = actor_forward(&tape, &agent.actor, &arch, &x).unwrap();
        let (z, _) = sample_latent(&tape, &out, &std_noise(2, 16, 3)).unwrap();
        let img = executor_forward(&tape, &agent.executor, &arch, &z, &out.skips).unwrap();
        assert_eq!(img.shape(), &[2, 1, 32, 32]);
        for &v in img.data().iter() {
            assert!((-1.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn critic_and_discriminator_shapes() {
        let arch = default_arch();
        let agent = Agent::<f64>::init(arch.clone(), 3).unwrap();
        let tape = Tape::new();
        let x = test_state(&arch, 4, 9);
        let z = std_noise(4, 16, 5);
        for params in [&agent.q1, &agent.q2, &agent.target_q1, &agent.target_q2] {
            let q = critic_forward(&tape, params, &arch, &x, &z).unwrap();
            assert_eq!(q.shape(), &[4]);
        }
        let d = discriminator_forward(&tape, &agent.discriminator, &arch, &x).unwrap();
        assert_eq!(d.shape(), &[4]);
    }

    #[test]
    fn forwards_are_deterministic() {
        let arch = default_arch();
        let agent = Agent::<f64>::init(arch.clone(), 4).unwrap();
        let x = test_state(&arch, 2, 11);
        let noise = std_noise(2, 16, 13);
        let run = || {
            let tape = Tape::new();
            let out = actor_forward(&tape, &agent.actor, &arch, &x).unwrap();
            let (z, lp) = sample_latent(&tape, &out, &noise).unwrap();
            let img = executor_forward(&tape, &agent.executor, &arch, &z, &out.skips).unwrap();
            let q = critic_forward(&tape, &agent.q1, &arch, &x, &z).unwrap();
            (img.to_vec(), lp.to_vec(), q.to_vec())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn init_is_seed_deterministic() {
        let arch = default_arch();
        let a = Agent::<f64>::init(arch.clone(), 42).unwrap();
        let b = Agent::<f64>::init(arch.clone(), 42).unwrap();
        let c = Agent::<f64>::init(arch, 43).unwrap();
        for (pa, pb) in a.actor.iter().zip(b.actor.iter()) {
            assert_eq!(pa.0, pb.0);
            assert_eq!(pa.1.to_vec(), pb.1.to_vec());
        }
        let first = |ag: &Agent<f64>| ag.actor.get("enc0/k").unwrap().to_vec();
        assert_ne!(first(&a), first(&c));
        // targets start as exact copies of the online critics
        for (on, tg) in [(&a.q1, &a.target_q1), (&a.q2, &a.target_q2)] {
            for (po, pt) in on.iter().zip(tg.iter()) {
                assert_eq!(po.1.to_vec(), pt.1.to_vec());
                assert!(!pt.1.requires_grad());
            }
        }
        // q1 and q2 are independently initialized
        assert_ne!(
            a.q1.get("enc0/k").unwrap().to_vec(),
            a.q2.get("enc0/k").unwrap().to_vec()
        );
    }

    #[test]
    fn different_latents_give_different_images() {
        let arch = default_arch();
        let agent = Agent::<f64>::init(arch.clone(), 5).unwrap();
        let tape = Tape::new();
        let x = test_state(&arch, 1, 17);
        let out = actor_forward(&tape, &agent.actor, &arch, &x).unwrap();
        let (za, _) = sample_latent(&tape, &out, &std_noise(1, 16, 1)).unwrap();
        let (zb, _) = sample_latent(&tape, &out, &std_noise(1, 16, 2)).unwrap();
        let ia = executor_forward(&tape, &agent.executor, &arch, &za, &out.skips).unwrap();
        let ib = executor_forward(&tape, &agent.executor, &arch, &zb, &out.skips).unwrap();
        assert_ne!(ia.to_vec(), ib.to_vec());
    }

    #[test]
    fn skips_are_live_when_enabled_and_ignored_when_disabled() {
        let mut arch = default_arch();
        let agent = Agent::<f64>::init(arch.clone(), 6).unwrap();
        let tape = Tape::new();
        let x = test_state(&arch, 1, 19);
        let out = actor_forward(&tape, &agent.actor, &arch, &x).unwrap();
        let (z, _) = sample_latent(&tape, &out, &std_noise(1, 16, 4)).unwrap();
        let base = executor_forward(&tape, &agent.executor, &arch, &z, &out.skips).unwrap();
        // perturb one skip level: the output must change
        let bumped: Vec<Tensor<f64>> = out
            .skips
            .iter()
            .enumerate()
            .map(|(l, s)| {
                if l == 0 {
                    let data: Vec<f64> = s.data().iter().map(|&v| v + 0.25).collect();
                    Tensor::constant(s.shape(), data).unwrap()
                } else {
                    s.clone()
                }
            })
            .collect();
        let moved = executor_forward(&tape, &agent.executor, &arch, &z, &bumped).unwrap();
        assert_ne!(base.to_vec(), moved.to_vec());

        // with skips disabled the executor runs on the latent alone
        arch.skips_enabled = false;
        let plain = Agent::<f64>::init(arch.clone(), 6).unwrap();
        let img = executor_forward(&tape, &plain.executor, &arch, &z, &[]).unwrap();
        assert_eq!(img.shape(), &[1, 1, 32, 32]);
    }

    #[test]
    fn sample_latent_stays_inside_the_open_cube() {
        let arch = default_arch();
        let agent = Agent::<f64>::init(arch.clone(), 7).unwrap();
        let tape = Tape::new();
        let x = test_state(&arch, 8, 23);
        let out = actor_forward(&tape, &agent.actor, &arch, &x).unwrap();
        let (z, lp) = sample_latent(&tape, &out, &std_noise(8, 16, 6)).unwrap();
        for &v in z.data().iter() {
            assert!(v > -1.0 && v < 1.0);
        }
        for &v in lp.data().iter() {
            assert!(v.is_finite());
        }
    }

    #[test]
    fn squashed_density_integrates_to_one() {
        // trapezoid quadrature over z in (-1, 1) for several head settings
        for &(mean, log_std) in &[(0.0, 0.0), (0.5, -1.0), (-1.0, 0.5), (0.3, -2.0)] {
            let n = 400_001usize;
            let a = -1.0 + 1e-12;
            let b = 1.0 - 1e-12;
            let dz = (b - a) / (n - 1) as f64;
            let mut total = 0.0;
            for i in 0..n {
                let z = a + i as f64 * dz;
                let p = squashed_log_density(mean, log_std, z).exp();
                let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
                total += w * p * dz;
            }
            assert!(
                (total - 1.0).abs() < 1e-3,
                "mean {mean}, log_std {log_std}: integral {total}"
            );
        }
    }

    #[test]
    fn sampled_mean_matches_symmetry_prediction() {
        // mean 0 => E[tanh(sigma * eps)] = 0 by symmetry
        let n = 100_000usize;
        let rng = &mut event_rng(0, streams::UPDATE_LATENT, 7);
        let eps = normal_vec::<f64>(rng, n);
        let sigma = 0.5f64;
        let zs: Vec<f64> = eps.iter().map(|e| (sigma * e).tanh()).collect();
        let mean = zs.iter().sum::<f64>() / n as f64;
        let var = zs.iter().map(|z| (z - mean).powi(2)).sum::<f64>() / n as f64;
        let sigma_mean = (var / n as f64).sqrt();
        assert!(
            mean.abs() < 3.0 * sigma_mean,
            "mean {mean} vs 3σ {sigma_mean}"
        );
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        // One joint loss through actor -> sample -> executor (with skips) and
        // the log-density: mean(y_hat²) + mean(log_prob). Fixed noise keeps
        // the objective deterministic; tanh activations keep it smooth (the
        // squared image term avoids the |.| kink near zero pixels), and the
        // input is chosen so every pooling window has a clear winner — max
        // pooling is non-differentiable at ties, where finite differences
        // are meaningless.
        let arch = tiny_arch();
        let agent = Agent::<f64>::init(arch.clone(), 11).unwrap();
        let x = (31..)
            .map(|seed| test_state(&arch, 2, seed))
            .find(|x| {
                let tape = Tape::new();
                let out = actor_forward(&tape, &agent.actor, &arch, x).unwrap();
                min_pool_margin(&out.skips) > 0.02
            })
            .unwrap();
        let noise = std_noise(2, arch.z_dim, 8);
        let leaves: Vec<(String, Tensor<f64>)> = agent
            .actor
            .iter()
            .map(|(n, t)| (format!("actor.{n}"), t.clone()))
            .chain(
                agent
                    .executor
                    .iter()
                    .map(|(n, t)| (format!("exec.{n}"), t.clone())),
            )
            .collect();
        let leaf_refs: Vec<(&str, &Tensor<f64>)> =
            leaves.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let report = grad_check(&leaf_refs, 1e-3, &mut |tape| {
            let out = actor_forward(tape, &agent.actor, &arch, &x).unwrap();
            let (z, lp) = sample_latent(tape, &out, &noise).unwrap();
            let img = executor_forward(tape, &agent.executor, &arch, &z, &out.skips).unwrap();
            let rec = tape.mean_all(&tape.mul(&img, &img)?)?;
            let ent = tape.mean_all(&lp)?;
            tape.add(&rec, &ent)
        })
        .unwrap();
        assert!(
            report.passes(1e-4),
            "max rel err {:e} at {:?}",
            report.max_rel_err,
            report.worst
        );
    }

    #[test]
    fn critic_gradients_match_finite_differences() {
        let arch = tiny_arch();
        let agent = Agent::<f64>::init(arch.clone(), 13).unwrap();
        let x = test_state(&arch, 2, 37);
        let z = std_noise(2, arch.z_dim, 9);
        let leaves: Vec<(String, Tensor<f64>)> = agent
            .q1
            .iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        let leaf_refs: Vec<(&str, &Tensor<f64>)> =
            leaves.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let report = grad_check(&leaf_refs, 1e-3, &mut |tape| {
            let q = critic_forward(tape, &agent.q1, &arch, &x, &z).unwrap();
            tape.mean_all(&q)
        })
        .unwrap();
        assert!(
            report.passes(1e-4),
            "max rel err {:e} at {:?}",
            report.max_rel_err,
            report.worst
        );
    }
}
