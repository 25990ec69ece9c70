//! The five training objectives: joint reconstruction + adversarial loss for
//! the generator (actor + executor), the discriminator's real/fake loss, twin
//! soft Bellman residuals for the critics, the entropy-regularized policy
//! loss, and the temperature loss.
//!
//! Every function takes the tape it should record on; callers decide which
//! parameter sets are live and which are detached, and these functions keep
//! the stop-gradient discipline: targets are built from detached copies so
//! each backward pass reaches exactly the parameters its optimizer owns.

use crate::agent::{
    actor_forward, critic_forward, discriminator_forward, executor_forward, sample_latent, Agent,
};
use crate::nn::ParamSet;
use crate::replay::Transition;
use crate::scalar::Scalar;
use crate::tensor::tape::Tape;
use crate::tensor::Tensor;

use super::TrainerError;

/// Learned entropy temperature. α is parameterized as `exp(log α)`, so it is
/// positive for every value of the underlying parameter.
#[derive(Debug)]
pub struct Temperature<S: Scalar> {
    /// Rank-0 trainable tensor holding log α.
    pub log_alpha: Tensor<S>,
    /// Entropy floor H̄ = −z_dim: the policy is pushed to keep at least this
    /// much differential entropy per action.
    pub target_entropy: f64,
}

impl<S: Scalar> Temperature<S> {
    pub fn new(z_dim: usize, initial_log_alpha: f64) -> Self {
        Temperature {
            log_alpha: Tensor::scalar_param(S::from_f64_c(initial_log_alpha)),
            target_entropy: -(z_dim as f64),
        }
    }

    /// Current α = exp(log α); structurally positive.
    pub fn alpha(&self) -> f64 {
        self.log_alpha.item().to_f64_c().exp()
    }
}

/// Scalar diagnostics for one gradient step, in `f64` regardless of the
/// training scalar type so logging is uniform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub l_rec: f64,
    pub l_adv: f64,
    pub l_dl: f64,
    pub j_q1: f64,
    pub j_q2: f64,
    pub j_pi: f64,
    pub j_alpha: f64,
    pub alpha_value: f64,
    pub mean_q: f64,
    pub mean_logprob: f64,
}

impl LossReport {
    /// First non-finite field, if any. Training aborts on it.
    pub fn first_non_finite(&self) -> Option<(&'static str, f64)> {
        [
            ("l_rec", self.l_rec),
            ("l_adv", self.l_adv),
            ("l_dl", self.l_dl),
            ("j_q1", self.j_q1),
            ("j_q2", self.j_q2),
            ("j_pi", self.j_pi),
            ("j_alpha", self.j_alpha),
            ("alpha", self.alpha_value),
            ("mean_q", self.mean_q),
            ("mean_logprob", self.mean_logprob),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
    }
}

/// A sampled minibatch stacked into batch tensors.
#[derive(Debug)]
pub struct BatchTensors<S: Scalar> {
    /// Ground-truth targets `[n, c, h, w]`.
    pub y: Tensor<S>,
    /// Observations `[n, c, h, w]`.
    pub x_t: Tensor<S>,
    /// Latent actions taken at `x_t`, `[n, z_dim]`.
    pub z_t: Tensor<S>,
    /// Rewards received.
    pub r_t: Vec<f64>,
    /// Successor observations `[n, c, h, w]`.
    pub x_next: Tensor<S>,
    /// Episode-termination flags.
    pub done: Vec<bool>,
}

impl<S: Scalar> BatchTensors<S> {
    pub fn len(&self) -> usize {
        self.r_t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r_t.is_empty()
    }
}

/// Stack sampled transitions along a new batch axis.
pub fn assemble_batch<S: Scalar>(batch: &[Transition<S>]) -> Result<BatchTensors<S>, TrainerError> {
    if batch.is_empty() {
        return Err(TrainerError::EmptyBatch);
    }
    let ys: Vec<&Tensor<S>> = batch.iter().map(|t| &t.y).collect();
    let xs: Vec<&Tensor<S>> = batch.iter().map(|t| &t.x_t).collect();
    let zs: Vec<&Tensor<S>> = batch.iter().map(|t| &t.z_t).collect();
    let nexts: Vec<&Tensor<S>> = batch.iter().map(|t| &t.x_next).collect();
    Ok(BatchTensors {
        y: Tensor::stack(&ys)?,
        x_t: Tensor::stack(&xs)?,
        z_t: Tensor::stack(&zs)?,
        r_t: batch.iter().map(|t| t.r_t).collect(),
        x_next: Tensor::stack(&nexts)?,
        done: batch.iter().map(|t| t.done).collect(),
    })
}

/// Mask-composite on the tape: `x + m·(ỹ − x)`, so masked pixels come from
/// the prediction and unmasked pixels are passed through bit-exactly. `mask`
/// is `[1, c, h, w]` and broadcasts over the batch.
pub fn compose_on_tape<S: Scalar>(
    tape: &Tape<S>,
    x: &Tensor<S>,
    y_tilde: &Tensor<S>,
    mask: &Tensor<S>,
) -> Result<Tensor<S>, TrainerError> {
    let delta = tape.mul(mask, &tape.sub(y_tilde, x)?)?;
    Ok(tape.add(x, &delta)?)
}

/// Mean absolute error over all elements.
pub fn mae<S: Scalar>(
    tape: &Tape<S>,
    a: &Tensor<S>,
    b: &Tensor<S>,
) -> Result<Tensor<S>, TrainerError> {
    Ok(tape.mean_all(&tape.abs(&tape.sub(a, b)?)?)?)
}

/// Outputs of [`dl_loss`]: the joint objective, its two pieces, and the
/// composed prediction (reused detached by the discriminator update so both
/// sides of the adversarial game see the same fake batch).
#[derive(Debug)]
pub struct DlLosses<S: Scalar> {
    /// `λ_rec·l_rec + λ_adv·l_adv`.
    pub l_dl: Tensor<S>,
    /// MAE between the composite and the target.
    pub l_rec: Tensor<S>,
    /// Non-saturating generator loss; a constant zero when `lambda_adv == 0`
    /// (the discriminator is not evaluated at all).
    pub l_adv: Tensor<S>,
    /// The composite `T(x_t)`, `[n, c, h, w]`.
    pub composed: Tensor<S>,
}

/// Supervised + adversarial objective for the generator: one actor → sample
/// → executor pass composed into the state, scored by MAE against the target
/// and (optionally) by the discriminator.
///
/// Gradients flow to the actor φ and executor ψ. The discriminator is
/// evaluated through a detached copy, so its parameters see nothing from
/// this loss; the adversarial term is the non-saturating `−log D(T(x_t))`,
/// computed as `softplus(−logit)` which never exponentiates a large positive
/// argument.
pub fn dl_loss<S: Scalar>(
    tape: &Tape<S>,
    agent: &Agent<S>,
    batch: &BatchTensors<S>,
    mask: &Tensor<S>,
    noise: &Tensor<S>,
    lambda_rec: f64,
    lambda_adv: f64,
) -> Result<DlLosses<S>, TrainerError> {
    let out = actor_forward(tape, &agent.actor, &agent.arch, &batch.x_t)?;
    let (z, _log_prob) = sample_latent(tape, &out, noise)?;
    let y_tilde = executor_forward(tape, &agent.executor, &agent.arch, &z, &out.skips)?;
    let composed = compose_on_tape(tape, &batch.x_t, &y_tilde, mask)?;
    let l_rec = mae(tape, &composed, &batch.y)?;
    let (l_adv, l_dl) = if lambda_adv > 0.0 {
        let disc = agent.discriminator.detached();
        let logits = discriminator_forward(tape, &disc, &agent.arch, &composed)?;
        let l_adv = tape.mean_all(&tape.softplus(&tape.neg(&logits)?)?)?;
        let l_dl = tape.add(
            &tape.scale(&l_rec, S::from_f64_c(lambda_rec))?,
            &tape.scale(&l_adv, S::from_f64_c(lambda_adv))?,
        )?;
        (l_adv, l_dl)
    } else {
        let zero = Tensor::scalar(S::zero());
        let l_dl = tape.scale(&l_rec, S::from_f64_c(lambda_rec))?;
        (zero, l_dl)
    };
    Ok(DlLosses {
        l_dl,
        l_rec,
        l_adv,
        composed,
    })
}

/// Binary real/fake objective from logits:
/// `mean softplus(−logit_real) + mean softplus(logit_fake)`, i.e. the
/// negative log-likelihood of calling real images real and generated images
/// fake, in a form that is numerically stable for large logits.
pub fn adversarial_disc_loss<S: Scalar>(
    tape: &Tape<S>,
    logit_real: &Tensor<S>,
    logit_fake: &Tensor<S>,
) -> Result<Tensor<S>, TrainerError> {
    let real_term = tape.mean_all(&tape.softplus(&tape.neg(logit_real)?)?)?;
    let fake_term = tape.mean_all(&tape.softplus(logit_fake)?)?;
    Ok(tape.add(&real_term, &fake_term)?)
}

/// Discriminator update objective. `composed` is re-entered as plain data,
/// so no gradient can leak back into the generator that produced it;
/// gradients reach only the discriminator parameters.
pub fn discriminator_loss<S: Scalar>(
    tape: &Tape<S>,
    agent: &Agent<S>,
    y: &Tensor<S>,
    composed: &Tensor<S>,
) -> Result<Tensor<S>, TrainerError> {
    let fake = composed.detached();
    let logit_real = discriminator_forward(tape, &agent.discriminator, &agent.arch, y)?;
    let logit_fake = discriminator_forward(tape, &agent.discriminator, &agent.arch, &fake)?;
    adversarial_disc_loss(tape, &logit_real, &logit_fake)
}

/// ½·mean((q − target)²): the per-critic temporal-difference objective.
pub fn bellman_residual<S: Scalar>(
    tape: &Tape<S>,
    q: &Tensor<S>,
    target: &Tensor<S>,
) -> Result<Tensor<S>, TrainerError> {
    let d = tape.sub(q, target)?;
    let half = S::from_f64_c(0.5);
    Ok(tape.scale(&tape.mean_all(&tape.mul(&d, &d)?)?, half)?)
}

/// Twin-critic losses against one shared frozen target.
#[derive(Debug)]
pub struct CriticLosses<S: Scalar> {
    pub j_q1: Tensor<S>,
    pub j_q2: Tensor<S>,
    /// The bootstrap target `r + γ(1−done)[min Q̄(x₊,z′) − α·log π(z′|x₊)]`,
    /// `[n]`, constant on the tape.
    pub target: Tensor<S>,
}

/// Soft Bellman residuals for both critics.
///
/// The target draws a fresh action z′ at `x_next` from the current policy
/// (through detached actor parameters) and scores it with the EMA target
/// critics, so the target tensor carries no gradient; each `J_Qi` then
/// reaches exactly the parameters of critic i.
pub fn critic_loss<S: Scalar>(
    tape: &Tape<S>,
    agent: &Agent<S>,
    alpha: f64,
    batch: &BatchTensors<S>,
    gamma: f64,
    noise_next: &Tensor<S>,
) -> Result<CriticLosses<S>, TrainerError> {
    let scratch = Tape::new();
    let actor = agent.actor.detached();
    let out = actor_forward(&scratch, &actor, &agent.arch, &batch.x_next)?;
    let (z_next, lp_next) = sample_latent(&scratch, &out, noise_next)?;
    let qt1 = critic_forward(
        &scratch,
        &agent.target_q1,
        &agent.arch,
        &batch.x_next,
        &z_next,
    )?;
    let qt2 = critic_forward(
        &scratch,
        &agent.target_q2,
        &agent.arch,
        &batch.x_next,
        &z_next,
    )?;

    let n = batch.len();
    let mut tvec = Vec::with_capacity(n);
    {
        let q1d = qt1.data();
        let q2d = qt2.data();
        let lpd = lp_next.data();
        for i in 0..n {
            let qmin = q1d[i].to_f64_c().min(q2d[i].to_f64_c());
            let not_done = if batch.done[i] { 0.0 } else { 1.0 };
            let v = batch.r_t[i] + gamma * not_done * (qmin - alpha * lpd[i].to_f64_c());
            tvec.push(S::from_f64_c(v));
        }
    }
    let target = Tensor::constant(&[n], tvec)?;

    let q1 = critic_forward(tape, &agent.q1, &agent.arch, &batch.x_t, &batch.z_t)?;
    let q2 = critic_forward(tape, &agent.q2, &agent.arch, &batch.x_t, &batch.z_t)?;
    let j_q1 = bellman_residual(tape, &q1, &target)?;
    let j_q2 = bellman_residual(tape, &q2, &target)?;
    Ok(CriticLosses { j_q1, j_q2, target })
}

/// Outputs of [`actor_loss`].
#[derive(Debug)]
pub struct ActorLosses<S: Scalar> {
    /// `mean(α·log π(z|x) − min(Q₁,Q₂)(x, z))` on a fresh reparameterized z.
    pub j_pi: Tensor<S>,
    /// Per-sample log-density of the fresh action, `[n]`, live on the tape
    /// (the temperature loss detaches it).
    pub log_prob: Tensor<S>,
    /// Batch mean of `min(Q₁,Q₂)` on the fresh action.
    pub mean_q: f64,
    /// Batch mean of `log_prob`.
    pub mean_logprob: f64,
}

/// Entropy-regularized policy objective on a fresh reparameterized action.
/// Both critics are evaluated through detached copies: gradients flow to the
/// actor φ only (the executor is not involved — critics score the latent).
pub fn actor_loss<S: Scalar>(
    tape: &Tape<S>,
    agent: &Agent<S>,
    alpha: f64,
    x_t: &Tensor<S>,
    noise: &Tensor<S>,
) -> Result<ActorLosses<S>, TrainerError> {
    let out = actor_forward(tape, &agent.actor, &agent.arch, x_t)?;
    let (z, log_prob) = sample_latent(tape, &out, noise)?;
    let q1 = critic_forward(tape, &agent.q1.detached(), &agent.arch, x_t, &z)?;
    let q2 = critic_forward(tape, &agent.q2.detached(), &agent.arch, x_t, &z)?;
    let qmin = tape.min_elem(&q1, &q2)?;
    let weighted_lp = tape.scale(&log_prob, S::from_f64_c(alpha))?;
    let j_pi = tape.mean_all(&tape.sub(&weighted_lp, &qmin)?)?;
    let mean_of = |t: &Tensor<S>| {
        let d = t.data();
        d.iter().map(|v| v.to_f64_c()).sum::<f64>() / d.len() as f64
    };
    let mean_q = mean_of(&qmin);
    let mean_logprob = mean_of(&log_prob);
    Ok(ActorLosses {
        j_pi,
        log_prob,
        mean_q,
        mean_logprob,
    })
}

/// Temperature objective `J(α) = mean(−exp(log α)·(log π + H̄))`. The
/// log-probs are detached here, so the gradient reaches only `log_alpha`:
/// when the policy's entropy is above the floor (mean log π + H̄ < 0) the
/// gradient is positive and descent lowers α, and vice versa.
pub fn alpha_loss<S: Scalar>(
    tape: &Tape<S>,
    temperature: &Temperature<S>,
    log_prob: &Tensor<S>,
) -> Result<Tensor<S>, TrainerError> {
    let lp = tape.detach(log_prob);
    let shifted = tape.add_const(&lp, S::from_f64_c(temperature.target_entropy))?;
    let mean_term = tape.mean_all(&shifted)?;
    let alpha = tape.exp(&temperature.log_alpha)?;
    Ok(tape.neg(&tape.mul(&alpha, &mean_term)?)?)
}

/// Zero the gradients of every parameter in the given sets; called before
/// each backward pass so optimizer steps consume exactly one loss's grads.
pub fn zero_grads<S: Scalar>(sets: &[&ParamSet<S>]) {
    for set in sets {
        set.zero_grads();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::ArchConfig;
    use crate::rng::{event_rng, normal_vec, streams};
    use crate::tensor::tape::Act;

    type T = Tensor<f64>;

    fn tiny_arch() -> ArchConfig {
        ArchConfig {
            c: 1,
            h: 8,
            w: 8,
            levels: 2,
            widths: vec![2, 3],
            z_dim: 2,
            skips_enabled: true,
            activation: Act::Tanh,
        }
    }

    fn tiny_agent(seed: u64) -> Agent<f64> {
        Agent::init(tiny_arch(), seed).unwrap()
    }

    fn center_mask_1chw(arch: &ArchConfig) -> T {
        let shape = crate::env::ImageShape::new(arch.c, arch.h, arch.w);
        let m = crate::env::synthetic::make_center_mask::<f64>(shape);
        Tensor::constant(&[1, arch.c, arch.h, arch.w], m.to_vec()).unwrap()
    }

    fn fake_batch(arch: &ArchConfig, n: usize, seed: u64) -> BatchTensors<f64> {
        let mut rng = event_rng(seed, streams::EVAL, 7);
        let img = arch.c * arch.h * arch.w;
        let mk_img = |rng: &mut _| {
            let v: Vec<f64> = normal_vec::<f64>(rng, n * img)
                .into_iter()
                .map(|x: f64| (0.5 * x).tanh())
                .collect();
            Tensor::constant(&[n, arch.c, arch.h, arch.w], v).unwrap()
        };
        let y = mk_img(&mut rng);
        let x_t = mk_img(&mut rng);
        let x_next = mk_img(&mut rng);
        let z: Vec<f64> = normal_vec::<f64>(&mut rng, n * arch.z_dim)
            .into_iter()
            .map(|x: f64| x.tanh())
            .collect();
        let z_t = Tensor::constant(&[n, arch.z_dim], z).unwrap();
        BatchTensors {
            y,
            x_t,
            z_t,
            r_t: (0..n).map(|i| 0.1 * i as f64).collect(),
            x_next,
            done: (0..n).map(|i| i == n - 1).collect(),
        }
    }

    fn noise(arch: &ArchConfig, n: usize, seed: u64) -> T {
        let mut rng = event_rng(seed, streams::UPDATE_LATENT, 0);
        Tensor::constant(&[n, arch.z_dim], normal_vec(&mut rng, n * arch.z_dim)).unwrap()
    }

    fn grad_state(set: &ParamSet<f64>) -> Vec<bool> {
        set.iter().map(|(_, t)| t.has_grad()).collect()
    }

    fn all_have_grads(set: &ParamSet<f64>) -> bool {
        grad_state(set).iter().all(|&b| b)
    }

    fn none_have_grads(set: &ParamSet<f64>) -> bool {
        grad_state(set).iter().all(|&b| !b)
    }

    #[test]
    fn mae_matches_hand_oracle_on_constants() {
        let tape = Tape::new();
        let a: T = Tensor::full(&[2, 3], 0.2);
        let b: T = Tensor::full(&[2, 3], 0.5);
        let l = mae(&tape, &a, &b).unwrap();
        assert!((l.item() - 0.3).abs() < 1e-15, "got {}", l.item());
        let same = mae(&tape, &a, &a).unwrap();
        assert_eq!(same.item(), 0.0);
    }

    #[test]
    fn dl_loss_without_adversary_is_weighted_mae_and_reaches_both_networks() {
        let arch = tiny_arch();
        let agent = tiny_agent(11);
        let batch = fake_batch(&arch, 3, 5);
        let mask = center_mask_1chw(&arch);
        let tape = Tape::new();
        let dl = dl_loss(&tape, &agent, &batch, &mask, &noise(&arch, 3, 1), 10.0, 0.0).unwrap();
        assert_eq!(dl.l_adv.item(), 0.0);
        assert!((dl.l_dl.item() - 10.0 * dl.l_rec.item()).abs() < 1e-15);

        tape.backward(&dl.l_dl).unwrap();
        assert!(all_have_grads(&agent.actor), "dl loss must reach the actor");
        assert!(
            all_have_grads(&agent.executor),
            "dl loss must reach the executor"
        );
        assert!(none_have_grads(&agent.q1));
        assert!(none_have_grads(&agent.discriminator));
    }

    #[test]
    fn dl_loss_with_adversary_leaves_discriminator_untouched() {
        let arch = tiny_arch();
        let agent = tiny_agent(12);
        let batch = fake_batch(&arch, 2, 6);
        let mask = center_mask_1chw(&arch);
        let tape = Tape::new();
        let dl = dl_loss(&tape, &agent, &batch, &mask, &noise(&arch, 2, 2), 10.0, 1.0).unwrap();
        let want = 10.0 * dl.l_rec.item() + dl.l_adv.item();
        assert!((dl.l_dl.item() - want).abs() < 1e-12);
        assert!(dl.l_adv.item() > 0.0, "softplus is strictly positive");

        tape.backward(&dl.l_dl).unwrap();
        assert!(all_have_grads(&agent.actor));
        assert!(all_have_grads(&agent.executor));
        assert!(
            none_have_grads(&agent.discriminator),
            "generator loss must not write grads into the discriminator"
        );
    }

    #[test]
    fn composite_keeps_unmasked_pixels_bit_exact() {
        let arch = tiny_arch();
        let agent = tiny_agent(13);
        let batch = fake_batch(&arch, 2, 7);
        let mask = center_mask_1chw(&arch);
        let tape = Tape::new();
        let dl = dl_loss(&tape, &agent, &batch, &mask, &noise(&arch, 2, 3), 10.0, 1.0).unwrap();

        let m = mask.to_vec();
        let x = batch.x_t.to_vec();
        let c = dl.composed.to_vec();
        let img = arch.c * arch.h * arch.w;
        let mut outside = 0usize;
        for i in 0..c.len() {
            if m[i % img] == 0.0 {
                assert_eq!(c[i].to_bits(), x[i].to_bits());
                outside += 1;
            }
        }
        assert!(outside > 0, "mask must leave context pixels");
    }

    #[test]
    fn discriminator_loss_is_two_log_two_for_an_undecided_discriminator() {
        let arch = tiny_arch();
        let agent = tiny_agent(14);
        // Zero the output head: logits are exactly 0 ⇒ D ≡ 1/2 on both sides.
        for name in ["out/w", "out/b"] {
            let t = agent.discriminator.get(name).unwrap();
            let mut d = t.data_mut();
            for v in d.iter_mut() {
                *v = 0.0;
            }
        }
        let batch = fake_batch(&arch, 3, 8);
        let tape = Tape::new();
        let loss = discriminator_loss(&tape, &agent, &batch.y, &batch.x_t).unwrap();
        let want = 2.0 * std::f64::consts::LN_2;
        assert!(
            (loss.item() - want).abs() < 1e-12,
            "got {}, want {}",
            loss.item(),
            want
        );
    }

    #[test]
    fn discriminator_loss_vanishes_for_a_perfect_discriminator() {
        let tape = Tape::new();
        let real = Tensor::full(&[4], 500.0);
        let fake = Tensor::full(&[4], -500.0);
        let loss = adversarial_disc_loss(&tape, &real, &fake).unwrap();
        assert!(loss.item() >= 0.0);
        assert!(loss.item() < 1e-200, "got {}", loss.item());
    }

    #[test]
    fn discriminator_loss_trains_only_the_discriminator() {
        let arch = tiny_arch();
        let agent = tiny_agent(15);
        let batch = fake_batch(&arch, 2, 9);
        let mask = center_mask_1chw(&arch);

        // Produce a composite through the live generator, then feed it to the
        // discriminator loss; the detach inside must block the path back.
        let gen_tape = Tape::new();
        let dl = dl_loss(
            &gen_tape,
            &agent,
            &batch,
            &mask,
            &noise(&arch, 2, 4),
            10.0,
            1.0,
        )
        .unwrap();

        let tape = Tape::new();
        let loss = discriminator_loss(&tape, &agent, &batch.y, &dl.composed).unwrap();
        tape.backward(&loss).unwrap();
        assert!(all_have_grads(&agent.discriminator));
        assert!(none_have_grads(&agent.actor));
        assert!(none_have_grads(&agent.executor));
    }

    #[test]
    fn critic_target_reduces_to_reward_when_gamma_is_zero() {
        let arch = tiny_arch();
        let agent = tiny_agent(16);
        let batch = fake_batch(&arch, 4, 10);
        let tape = Tape::new();
        let out = critic_loss(&tape, &agent, 0.7, &batch, 0.0, &noise(&arch, 4, 5)).unwrap();
        let tv = out.target.to_vec();
        for (got, want) in tv.iter().zip(&batch.r_t) {
            assert_eq!(got.to_bits(), want.to_bits());
        }
    }

    #[test]
    fn critic_target_skips_bootstrap_on_terminal_transitions() {
        let arch = tiny_arch();
        let agent = tiny_agent(17);
        let mut batch = fake_batch(&arch, 3, 11);
        batch.done = vec![true; 3];
        let tape = Tape::new();
        let out = critic_loss(&tape, &agent, 0.3, &batch, 0.99, &noise(&arch, 3, 6)).unwrap();
        for (got, want) in out.target.to_vec().iter().zip(&batch.r_t) {
            assert_eq!(got.to_bits(), want.to_bits());
        }
    }

    #[test]
    fn bellman_residual_matches_hand_values() {
        let tape = Tape::new();
        let q = Tensor::full(&[1], 1.0);
        let t = Tensor::full(&[1], 0.0);
        let j = bellman_residual(&tape, &q, &t).unwrap();
        assert_eq!(j.item(), 0.5);
        let j0 = bellman_residual(&tape, &q, &q).unwrap();
        assert_eq!(j0.item(), 0.0);
    }

    #[test]
    fn critic_loss_reaches_only_its_own_critic() {
        let arch = tiny_arch();
        let agent = tiny_agent(18);
        let batch = fake_batch(&arch, 3, 12);
        let tape = Tape::new();
        let out = critic_loss(&tape, &agent, 0.2, &batch, 0.99, &noise(&arch, 3, 7)).unwrap();

        tape.backward(&out.j_q1).unwrap();
        assert!(all_have_grads(&agent.q1));
        assert!(none_have_grads(&agent.q2));
        assert!(none_have_grads(&agent.actor));
        assert!(none_have_grads(&agent.executor));
        assert!(none_have_grads(&agent.target_q1));
        assert!(none_have_grads(&agent.target_q2));

        tape.backward(&out.j_q2).unwrap();
        assert!(all_have_grads(&agent.q2));
        assert!(none_have_grads(&agent.actor));
    }

    #[test]
    fn actor_loss_reaches_only_the_actor() {
        let arch = tiny_arch();
        let agent = tiny_agent(19);
        let batch = fake_batch(&arch, 3, 13);
        let tape = Tape::new();
        let pi = actor_loss(&tape, &agent, 0.2, &batch.x_t, &noise(&arch, 3, 8)).unwrap();
        assert!(pi.j_pi.item().is_finite());
        assert!(pi.mean_q.is_finite());
        assert!(pi.mean_logprob.is_finite());

        tape.backward(&pi.j_pi).unwrap();
        assert!(all_have_grads(&agent.actor));
        assert!(none_have_grads(&agent.q1), "critics are detached in J_π");
        assert!(none_have_grads(&agent.q2));
        assert!(none_have_grads(&agent.executor));
    }

    #[test]
    fn alpha_loss_is_zero_with_zero_gradient_at_the_entropy_floor() {
        let temp = Temperature::<f64>::new(2, 0.3);
        assert_eq!(temp.target_entropy, -2.0);
        let tape = Tape::new();
        // log π ≡ −H̄ exactly ⇒ the shifted term is identically zero.
        let lp = Tensor::full(&[5], 2.0);
        let j = alpha_loss(&tape, &temp, &lp).unwrap();
        assert_eq!(j.item(), 0.0);
        tape.backward(&j).unwrap();
        let g = temp.log_alpha.grad().unwrap();
        assert_eq!(g, vec![0.0]);
    }

    #[test]
    fn alpha_gradient_sign_follows_the_entropy_error() {
        let temp = Temperature::<f64>::new(2, 0.0);
        // Entropy above the floor: log π + H̄ < 0 ⇒ positive gradient ⇒
        // descent lowers α.
        let tape = Tape::new();
        let lp = Tensor::full(&[4], 2.0 - 0.5);
        let j = alpha_loss(&tape, &temp, &lp).unwrap();
        tape.backward(&j).unwrap();
        assert!(temp.log_alpha.grad().unwrap()[0] > 0.0);

        // Entropy below the floor: gradient flips.
        let tape2 = Tape::new();
        let lp2 = Tensor::full(&[4], 2.0 + 0.5);
        let j2 = alpha_loss(&tape2, &temp, &lp2).unwrap();
        temp.log_alpha.zero_grad();
        tape2.backward(&j2).unwrap();
        assert!(temp.log_alpha.grad().unwrap()[0] < 0.0);
    }

    #[test]
    fn alpha_loss_touches_nothing_but_log_alpha() {
        let arch = tiny_arch();
        let agent = tiny_agent(20);
        let temp = Temperature::<f64>::new(arch.z_dim, 0.0);
        let batch = fake_batch(&arch, 2, 14);
        let tape = Tape::new();
        let pi = actor_loss(&tape, &agent, temp.alpha(), &batch.x_t, &noise(&arch, 2, 9)).unwrap();
        let j = alpha_loss(&tape, &temp, &pi.log_prob).unwrap();
        tape.backward(&j).unwrap();
        assert!(temp.log_alpha.has_grad());
        assert!(
            none_have_grads(&agent.actor),
            "log-probs enter the temperature loss detached"
        );
    }

    #[test]
    fn temperature_is_structurally_positive_and_floor_matches_latent_dim() {
        let t16 = Temperature::<f64>::new(16, 0.0);
        assert_eq!(t16.target_entropy, -16.0);
        assert_eq!(t16.alpha(), 1.0);
        let tiny = Temperature::<f64>::new(16, -300.0);
        assert!(tiny.alpha() > 0.0);
    }

    #[test]
    fn assemble_batch_stacks_in_order() {
        let arch = tiny_arch();
        let img = [arch.c, arch.h, arch.w];
        let mk = |v: f64| Tensor::full(&img, v);
        let t0 = Transition {
            y: mk(0.1),
            x_t: mk(0.2),
            z_t: Tensor::full(&[arch.z_dim], 0.3),
            r_t: 1.0,
            x_next: mk(0.4),
            done: false,
        };
        let t1 = Transition {
            y: mk(0.5),
            x_t: mk(0.6),
            z_t: Tensor::full(&[arch.z_dim], 0.7),
            r_t: 2.0,
            x_next: mk(0.8),
            done: true,
        };
        let b = assemble_batch(&[t0, t1]).unwrap();
        assert_eq!(b.len(), 2);
        assert_eq!(b.y.shape(), [2, arch.c, arch.h, arch.w]);
        assert_eq!(b.z_t.shape(), [2, arch.z_dim]);
        assert_eq!(b.r_t, vec![1.0, 2.0]);
        assert_eq!(b.done, vec![false, true]);
        assert_eq!(b.y.at(&[0, 0, 0, 0]), 0.1);
        assert_eq!(b.y.at(&[1, 0, 0, 0]), 0.5);
        assert!(assemble_batch::<f64>(&[]).is_err());
    }

    #[test]
    fn loss_report_flags_non_finite_fields() {
        let mut r = LossReport {
            l_rec: 0.1,
            l_adv: 0.2,
            l_dl: 0.3,
            j_q1: 0.4,
            j_q2: 0.5,
            j_pi: 0.6,
            j_alpha: 0.7,
            alpha_value: 1.0,
            mean_q: 0.0,
            mean_logprob: -1.0,
        };
        assert!(r.first_non_finite().is_none());
        r.j_q2 = f64::NAN;
        assert_eq!(r.first_non_finite().unwrap().0, "j_q2");
        r.j_q2 = 0.5;
        r.mean_logprob = f64::INFINITY;
        assert_eq!(r.first_non_finite().unwrap().0, "mean_logprob");
    }
}
