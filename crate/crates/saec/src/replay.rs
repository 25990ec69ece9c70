//! Experience replay: a fixed-capacity FIFO pool with seeded uniform sampling.
//!
//! The pool stores full interaction tuples — including the target image,
//! because the supervised pathway trains on replayed pairs, not only live
//! rollouts. Sampling is uniform with replacement and a pure function of the
//! seed, so gradient steps are reproducible. Cloned transitions share tensor
//! storage (cheap reference bumps); buffer contents are treated as immutable.

use rand::Rng as _;
use rand::SeedableRng as _;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("replay: cannot sample from an empty buffer")]
    Empty,
}

/// One interaction tuple `(y, x_t, z_t, r_t, x_{t+1}, done)`.
#[derive(Debug, Clone)]
pub struct Transition<S: Scalar> {
    /// Ground-truth target image `[c, h, w]`.
    pub y: Tensor<S>,
    /// State before the action.
    pub x_t: Tensor<S>,
    /// Latent action `[z_dim]`.
    pub z_t: Tensor<S>,
    /// Reward received.
    pub r_t: f64,
    /// State after the action.
    pub x_next: Tensor<S>,
    /// Whether this step ended the episode (truncates the bootstrap target).
    pub done: bool,
}

/// FIFO ring of transitions; once full, each push evicts the oldest entry.
#[derive(Debug)]
pub struct ReplayBuffer<S: Scalar> {
    capacity: usize,
    items: Vec<Transition<S>>,
    cursor: usize,
}

impl<S: Scalar> ReplayBuffer<S> {
    /// Empty buffer holding at most `capacity` transitions (at least 1).
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1, "replay capacity must be positive");
        ReplayBuffer {
            capacity,
            items: Vec::new(),
            cursor: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Append a transition, evicting the oldest once at capacity.
    pub fn push(&mut self, t: Transition<S>) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.cursor] = t;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
    }

    /// Draw `batch` transitions uniformly with replacement, deterministic in
    /// `seed`. Errors only when the buffer is empty.
    pub fn sample(&self, batch: usize, seed: u64) -> Result<Vec<Transition<S>>, ReplayError> {
        if self.items.is_empty() {
            return Err(ReplayError::Empty);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok((0..batch)
            .map(|_| self.items[rng.gen_range(0..self.items.len())].clone())
            .collect())
    }

    /// Iterate over stored transitions in storage order (for checkpointing).
    pub fn iter(&self) -> impl Iterator<Item = &Transition<S>> {
        self.items.iter()
    }

    /// Write cursor position (for checkpointing).
    pub fn cursor(&self) -> usize {
        self.cursor
    }

    /// Restore storage order and cursor exactly (inverse of [`iter`]).
    pub fn restore(capacity: usize, items: Vec<Transition<S>>, cursor: usize) -> Self {
        assert!(capacity >= 1 && items.len() <= capacity && cursor < capacity.max(1));
        ReplayBuffer {
            capacity,
            items,
            cursor,
        }
    }
}
