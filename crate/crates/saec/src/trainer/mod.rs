//! The training loop: play one episode into the replay buffer, then run a
//! fixed number of gradient steps, each updating — in this order — the
//! generator (actor + executor) on the supervised/adversarial objective, the
//! discriminator, the twin critics, the policy, the entropy temperature,
//! and finally the EMA target critics.
//!
//! All randomness is counter-addressed (see [`crate::rng`]): episode
//! content, rollout noise, minibatch indices, and update noise each draw
//! from their own stream keyed by a monotonic counter, so a resumed run
//! replays the exact event sequence of an uninterrupted one.

mod checkpoint;
mod losses;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use losses::{
    actor_loss, adversarial_disc_loss, alpha_loss, assemble_batch, bellman_residual,
    compose_on_tape, critic_loss, discriminator_loss, dl_loss, mae, zero_grads, ActorLosses,
    BatchTensors, CriticLosses, DlLosses, LossReport, Temperature,
};

use crate::agent::{
    actor_forward, deterministic_latent, executor_forward, sample_latent, Agent, AgentError,
    ArchConfig,
};
use crate::env::{
    env_reset, env_step, metrics, synthetic::make_center_mask, DataSource, EnvError, ImageShape,
    RewardKind, RewardMode, RewardSpec, Split,
};
use crate::nn::{ema_update, NnError, OptAlgo, Optimizer, ParamSet};
use crate::replay::{ReplayBuffer, ReplayError, Transition};
use crate::rng::{event_rng, mix, normal_vec, streams};
use crate::scalar::Scalar;
use crate::tensor::tape::Tape;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum TrainerError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error("cannot assemble an empty batch")]
    EmptyBatch,
    #[error("non-finite loss: {what} = {value} at gradient step {step}; aborting")]
    NonFinite {
        what: &'static str,
        value: f64,
        step: u64,
    },
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: String, msg: String },
    #[error("invalid settings: {0}")]
    Invalid(String),
}

/// Everything the trainer needs to know, independent of any config-file
/// syntax. See [`TrainSettings::validate`] for the accepted ranges.
#[derive(Debug, Clone)]
pub struct TrainSettings {
    pub arch: ArchConfig,
    /// Discount γ.
    pub gamma: f64,
    /// EMA rate τ for the target critics.
    pub tau: f64,
    /// Learning rate of the supervised/adversarial generator update (also
    /// used for the discriminator, which has no rate of its own).
    pub lr_dl: f64,
    /// Critic learning rate.
    pub lr_q: f64,
    /// Policy learning rate.
    pub lr_pi: f64,
    /// Temperature learning rate.
    pub lr_alpha: f64,
    /// Weight of the reconstruction term in the generator loss.
    pub lambda_rec: f64,
    /// Weight of the adversarial term; 0 disables the discriminator
    /// entirely (no forward pass, no update).
    pub lambda_adv: f64,
    /// Minibatch size for gradient steps.
    pub batch: usize,
    /// Replay buffer capacity.
    pub capacity: usize,
    /// Gradient steps start once the buffer holds this many transitions.
    pub min_buffer: usize,
    /// Gradient steps per iteration (G).
    pub grad_steps: usize,
    /// Environment steps per episode (T).
    pub horizon: usize,
    pub reward: RewardSpec,
    pub master_seed: u64,
    pub optimizer: OptAlgo,
    /// Global-norm gradient clip; 0 disables.
    pub grad_clip: f64,
    pub init_log_alpha: f64,
}

impl TrainSettings {
    /// Defaults sized for a single desktop core: 1×32×32 images, three
    /// levels, 16-dim latents.
    pub fn default_desk(master_seed: u64) -> Self {
        TrainSettings {
            arch: ArchConfig::default_desk(),
            gamma: 0.99,
            tau: 0.005,
            lr_dl: 3e-4,
            lr_q: 3e-4,
            lr_pi: 3e-4,
            // The temperature has to track the policy's log-density closely:
            // the reconstruction loss keeps pushing the policy narrow, and a
            // slow controller lets the entropy term lag far behind.
            lr_alpha: 1e-3,
            lambda_rec: 10.0,
            // The adversary is a realism regularizer, not the main training
            // signal. At weight 1 the generator starts chasing whatever fools
            // the (small, quickly confident) discriminator once the
            // reconstruction gradient shrinks, and translation quality
            // collapses; at 0.1 reconstruction stays in charge.
            lambda_adv: 0.1,
            batch: 32,
            capacity: 10_000,
            min_buffer: 128,
            grad_steps: 2,
            horizon: 3,
            reward: RewardSpec {
                kind: RewardKind::Psnr,
                mode: RewardMode::Absolute,
                scale: 0.1,
            },
            master_seed,
            optimizer: OptAlgo::adam_default(),
            grad_clip: 0.0,
            // α₀ = 0.1: the entropy bonus starts an order of magnitude below
            // the step rewards instead of level with them, so early policy
            // updates chase reconstruction and reward rather than entropy.
            init_log_alpha: -2.302585092994046,
        }
    }

    pub fn validate(&self) -> Result<(), TrainerError> {
        self.arch.validate()?;
        let inval = |msg: String| Err(TrainerError::Invalid(msg));
        for (name, v) in [
            ("lr_dl", self.lr_dl),
            ("lr_q", self.lr_q),
            ("lr_pi", self.lr_pi),
            ("lr_alpha", self.lr_alpha),
            ("lambda_rec", self.lambda_rec),
            ("lambda_adv", self.lambda_adv),
            ("grad_clip", self.grad_clip),
        ] {
            if !v.is_finite() || v < 0.0 {
                return inval(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        for (name, v) in [("gamma", self.gamma), ("tau", self.tau)] {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return inval(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if self.horizon < 1 {
            return inval("horizon must be >= 1".into());
        }
        if self.batch < 1 {
            return inval("batch must be >= 1".into());
        }
        if self.capacity < 1 {
            return inval("buffer capacity must be >= 1".into());
        }
        if self.min_buffer < 1 {
            return inval("min_buffer must be >= 1".into());
        }
        if !self.reward.scale.is_finite() || self.reward.scale <= 0.0 {
            return inval(format!(
                "reward scale must be finite and > 0, got {}",
                self.reward.scale
            ));
        }
        if !self.init_log_alpha.is_finite() {
            return inval("init_log_alpha must be finite".into());
        }
        Ok(())
    }
}

/// Monotonic event counters; these (plus the master seed) fully address
/// every random event, so checkpoints persist them instead of RNG state.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counters {
    pub iterations: u64,
    pub episodes: u64,
    pub env_steps: u64,
    pub grad_steps: u64,
}

/// What one iteration produced, for logging.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationReport {
    /// Index of the episode this iteration played (0-based).
    pub episode: u64,
    /// Mean reward over the episode's environment steps.
    pub reward_mean: f64,
    /// Final composite vs target, after the last step of the episode.
    pub final_psnr: f64,
    pub final_ssim: f64,
    /// Cumulative environment steps after this iteration.
    pub env_steps: u64,
    /// Cumulative gradient steps after this iteration.
    pub grad_steps: u64,
    /// Diagnostics from this iteration's last gradient step; `None` while
    /// the buffer is still below `min_buffer` (rollout-only warm-up).
    pub losses: Option<LossReport>,
}

#[derive(Debug)]
struct OptBundle<S: Scalar> {
    dl_actor: Optimizer<S>,
    dl_exec: Optimizer<S>,
    disc: Optimizer<S>,
    q1: Optimizer<S>,
    q2: Optimizer<S>,
    pi: Optimizer<S>,
    alpha: Optimizer<S>,
}

/// Agent, temperature, replay buffer, optimizers, and counters: the full
/// mutable state of a training run.
#[derive(Debug)]
pub struct Trainer<S: Scalar> {
    pub settings: TrainSettings,
    pub agent: Agent<S>,
    pub temperature: Temperature<S>,
    pub buffer: ReplayBuffer<S>,
    pub counters: Counters,
    /// Center mask shaped `[1, c, h, w]` for broadcasting over batches.
    mask: Tensor<S>,
    /// View holding `log_alpha` so the temperature optimizer has a ParamSet.
    alpha_params: ParamSet<S>,
    opts: OptBundle<S>,
}

impl<S: Scalar> Trainer<S> {
    pub fn new(settings: TrainSettings) -> Result<Self, TrainerError> {
        settings.validate()?;
        let agent = Agent::init(settings.arch.clone(), settings.master_seed)?;
        let temperature = Temperature::new(settings.arch.z_dim, settings.init_log_alpha);
        let mut alpha_params = ParamSet::new();
        alpha_params.insert("log_alpha", temperature.log_alpha.clone())?;
        let arch = &settings.arch;
        let mask_chw = make_center_mask::<S>(ImageShape::new(arch.c, arch.h, arch.w));
        let mask = Tensor::constant(&[1, arch.c, arch.h, arch.w], mask_chw.to_vec())?;
        let opt = |lr: f64| Optimizer::new(settings.optimizer, lr, settings.grad_clip);
        let opts = OptBundle {
            dl_actor: opt(settings.lr_dl),
            dl_exec: opt(settings.lr_dl),
            disc: opt(settings.lr_dl),
            q1: opt(settings.lr_q),
            q2: opt(settings.lr_q),
            pi: opt(settings.lr_pi),
            alpha: opt(settings.lr_alpha),
        };
        Ok(Trainer {
            buffer: ReplayBuffer::new(settings.capacity),
            settings,
            agent,
            temperature,
            counters: Counters::default(),
            mask,
            alpha_params,
            opts,
        })
    }

    /// The broadcastable center mask used for composition, `[1, c, h, w]`.
    pub fn mask(&self) -> &Tensor<S> {
        &self.mask
    }

    /// One sampled action for the current state: actor → reparameterized
    /// draw → executor. Returns (image action `[c,h,w]`, latent `[z_dim]`).
    fn propose(&self, x: &Tensor<S>) -> Result<(Tensor<S>, Tensor<S>), TrainerError> {
        let arch = &self.agent.arch;
        let tape = Tape::new();
        let xb = batchify(x)?;
        let out = actor_forward(&tape, &self.agent.actor, arch, &xb)?;
        let mut rng = event_rng(
            self.settings.master_seed,
            streams::ROLLOUT_LATENT,
            self.counters.env_steps,
        );
        let noise = Tensor::constant(&[1, arch.z_dim], normal_vec(&mut rng, arch.z_dim))?;
        let (z, _log_prob) = sample_latent(&tape, &out, &noise)?;
        let img = executor_forward(&tape, &self.agent.executor, arch, &z, &out.skips)?;
        Ok((unbatch(&img)?, unbatch(&z)?))
    }

    /// The mode action for the current state: actor → `tanh(mean)` →
    /// executor, with no randomness. Used for evaluation and sample export.
    /// Returns the proposed image, shape `[c, h, w]`.
    pub fn propose_deterministic(&self, x: &Tensor<S>) -> Result<Tensor<S>, TrainerError> {
        let arch = &self.agent.arch;
        let tape = Tape::new();
        let xb = batchify(x)?;
        let out = actor_forward(&tape, &self.agent.actor, arch, &xb)?;
        let z = deterministic_latent(&tape, &out)?;
        let img = executor_forward(&tape, &self.agent.executor, arch, &z, &out.skips)?;
        unbatch(&img)
    }

    /// One full iteration: an episode of `horizon` environment steps pushed
    /// into the buffer, then `grad_steps` gradient steps (skipped while the
    /// buffer is below `min_buffer`).
    pub fn train_iteration(
        &mut self,
        source: &DataSource<S>,
    ) -> Result<IterationReport, TrainerError> {
        let horizon = self.settings.horizon;
        let episode = self.counters.episodes;
        let seed = mix(self.settings.master_seed, streams::EPISODE, episode);
        let (mut state, y) = env_reset(source, Split::Train, seed, horizon)?;

        let mut reward_sum = 0.0;
        for _ in 0..horizon {
            let (y_tilde, z_t) = self.propose(&state.current)?;
            let (next, r, done) = env_step(&state, &y_tilde, &self.settings.reward)?;
            self.buffer.push(Transition {
                y: y.clone(),
                x_t: state.current.clone(),
                z_t,
                r_t: r,
                x_next: next.current.clone(),
                done,
            });
            reward_sum += r;
            state = next;
            self.counters.env_steps += 1;
        }
        self.counters.episodes += 1;
        let final_psnr = metrics::psnr(&state.current, &y)?;
        let final_ssim = metrics::ssim(&state.current, &y)?;

        let mut losses = None;
        if self.buffer.len() >= self.settings.min_buffer {
            for _ in 0..self.settings.grad_steps {
                losses = Some(self.gradient_step()?);
            }
        }
        self.counters.iterations += 1;

        Ok(IterationReport {
            episode,
            reward_mean: reward_sum / horizon as f64,
            final_psnr,
            final_ssim,
            env_steps: self.counters.env_steps,
            grad_steps: self.counters.grad_steps,
            losses,
        })
    }

    /// One gradient step in the fixed update order. Each loss gets its own
    /// tape; gradients are zeroed right before every backward pass so each
    /// optimizer consumes exactly one loss's gradients.
    fn gradient_step(&mut self) -> Result<LossReport, TrainerError> {
        let step = self.counters.grad_steps;
        let master = self.settings.master_seed;
        let (gamma, tau) = (self.settings.gamma, self.settings.tau);
        let (lam_rec, lam_adv) = (self.settings.lambda_rec, self.settings.lambda_adv);

        let sample_seed = mix(master, streams::REPLAY_SAMPLE, step);
        let transitions = self.buffer.sample(self.settings.batch, sample_seed)?;
        let batch = assemble_batch(&transitions)?;
        let n = batch.len();
        let zd = self.agent.arch.z_dim;

        // Fixed draw order within the step's update stream: generator noise,
        // bootstrap noise, policy noise.
        let mut rng = event_rng(master, streams::UPDATE_LATENT, step);
        let noise_dl = Tensor::constant(&[n, zd], normal_vec(&mut rng, n * zd))?;
        let noise_next = Tensor::constant(&[n, zd], normal_vec(&mut rng, n * zd))?;
        let noise_pi = Tensor::constant(&[n, zd], normal_vec(&mut rng, n * zd))?;

        // (1) Generator on the supervised + adversarial objective, then the
        // discriminator on the same (detached) fake batch.
        let (l_rec, l_adv, l_dl) = {
            let tape = Tape::new();
            let dl = dl_loss(
                &tape,
                &self.agent,
                &batch,
                &self.mask,
                &noise_dl,
                lam_rec,
                lam_adv,
            )?;
            self.agent.actor.zero_grads();
            self.agent.executor.zero_grads();
            tape.backward(&dl.l_dl)?;
            self.opts.dl_actor.step(&self.agent.actor)?;
            self.opts.dl_exec.step(&self.agent.executor)?;
            if lam_adv > 0.0 {
                let dtape = Tape::new();
                let dloss = discriminator_loss(&dtape, &self.agent, &batch.y, &dl.composed)?;
                self.agent.discriminator.zero_grads();
                dtape.backward(&dloss)?;
                self.opts.disc.step(&self.agent.discriminator)?;
            }
            (
                dl.l_rec.item().to_f64_c(),
                dl.l_adv.item().to_f64_c(),
                dl.l_dl.item().to_f64_c(),
            )
        };

        let alpha = self.temperature.alpha();

        // (2) Twin critics toward the frozen soft bootstrap target.
        let (j_q1, j_q2) = {
            let tape = Tape::new();
            let cl = critic_loss(&tape, &self.agent, alpha, &batch, gamma, &noise_next)?;
            self.agent.q1.zero_grads();
            self.agent.q2.zero_grads();
            tape.backward(&cl.j_q1)?;
            tape.backward(&cl.j_q2)?;
            self.opts.q1.step(&self.agent.q1)?;
            self.opts.q2.step(&self.agent.q2)?;
            (cl.j_q1.item().to_f64_c(), cl.j_q2.item().to_f64_c())
        };

        // (3) Policy against the (detached) updated critics.
        let (j_pi, mean_q, mean_logprob, log_prob) = {
            let tape = Tape::new();
            let pi = actor_loss(&tape, &self.agent, alpha, &batch.x_t, &noise_pi)?;
            self.agent.actor.zero_grads();
            tape.backward(&pi.j_pi)?;
            self.opts.pi.step(&self.agent.actor)?;
            (
                pi.j_pi.item().to_f64_c(),
                pi.mean_q,
                pi.mean_logprob,
                pi.log_prob,
            )
        };

        // (4) Temperature on the detached log-probs.
        let j_alpha = {
            let tape = Tape::new();
            let j = alpha_loss(&tape, &self.temperature, &log_prob)?;
            self.temperature.log_alpha.zero_grad();
            tape.backward(&j)?;
            self.opts.alpha.step(&self.alpha_params)?;
            j.item().to_f64_c()
        };

        // (5) EMA refresh of the target critics.
        ema_update(&self.agent.target_q1, &self.agent.q1, tau)?;
        ema_update(&self.agent.target_q2, &self.agent.q2, tau)?;

        self.counters.grad_steps += 1;
        let report = LossReport {
            l_rec,
            l_adv,
            l_dl,
            j_q1,
            j_q2,
            j_pi,
            j_alpha,
            alpha_value: self.temperature.alpha(),
            mean_q,
            mean_logprob,
        };
        if let Some((what, value)) = report.first_non_finite() {
            return Err(TrainerError::NonFinite { what, value, step });
        }
        Ok(report)
    }

    /// The parameter sets a checkpoint persists, with their stable prefixes.
    pub(crate) fn named_sets(&self) -> [(&'static str, &ParamSet<S>); 7] {
        [
            ("actor", &self.agent.actor),
            ("executor", &self.agent.executor),
            ("q1", &self.agent.q1),
            ("q2", &self.agent.q2),
            ("target_q1", &self.agent.target_q1),
            ("target_q2", &self.agent.target_q2),
            ("disc", &self.agent.discriminator),
        ]
    }

    pub(crate) fn opt_entries(&self) -> [(&'static str, &Optimizer<S>); 7] {
        let o = &self.opts;
        [
            ("dl_actor", &o.dl_actor),
            ("dl_exec", &o.dl_exec),
            ("disc", &o.disc),
            ("q1", &o.q1),
            ("q2", &o.q2),
            ("pi", &o.pi),
            ("alpha", &o.alpha),
        ]
    }

    pub(crate) fn opt_entries_mut(&mut self) -> [(&'static str, &mut Optimizer<S>); 7] {
        let OptBundle {
            dl_actor,
            dl_exec,
            disc,
            q1,
            q2,
            pi,
            alpha,
        } = &mut self.opts;
        [
            ("dl_actor", dl_actor),
            ("dl_exec", dl_exec),
            ("disc", disc),
            ("q1", q1),
            ("q2", q2),
            ("pi", pi),
            ("alpha", alpha),
        ]
    }
}

/// `[d...]` -> `[1, d...]` as a fresh constant.
fn batchify<S: Scalar>(t: &Tensor<S>) -> Result<Tensor<S>, TrainerError> {
    let mut shape = Vec::with_capacity(t.rank() + 1);
    shape.push(1);
    shape.extend_from_slice(t.shape());
    Ok(Tensor::constant(&shape, t.to_vec())?)
}

/// `[1, d...]` -> `[d...]` as a fresh constant.
fn unbatch<S: Scalar>(t: &Tensor<S>) -> Result<Tensor<S>, TrainerError> {
    debug_assert_eq!(t.shape().first(), Some(&1));
    Ok(Tensor::constant(&t.shape()[1..], t.to_vec())?)
}
