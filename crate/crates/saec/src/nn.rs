//! Named parameter sets, initialization, optimizers, and target-network
//! averaging.
//!
//! Parameters live in a [`ParamSet`]: an ordered name -> tensor map. The
//! deterministic iteration order (sorted names) is what makes optimizer
//! updates, checkpoints, and EMA traversals reproducible.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;

use crate::rng::uniform_vec;
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("parameter {0:?} not found")]
    MissingParam(String),
    #[error("parameter {0:?} already present")]
    DuplicateParam(String),
    #[error("parameter {0:?} has no gradient (was backward run and the param on the loss path?)")]
    MissingGrad(String),
    #[error("parameter {name:?}: shape {got:?} does not match {want:?}")]
    ShapeMismatch {
        name: String,
        want: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("parameter sets differ: missing {missing:?}, unexpected {extra:?}")]
    NameSetMismatch {
        missing: Vec<String>,
        extra: Vec<String>,
    },
    #[error("parameter {name:?}: {source}")]
    BadValue { name: String, source: TensorError },
}

/// Ordered collection of named tensors.
#[derive(Default, Debug)]
pub struct ParamSet<S: Scalar> {
    map: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        ParamSet {
            map: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, t: Tensor<S>) -> Result<(), NnError> {
        if self.map.contains_key(name) {
            return Err(NnError::DuplicateParam(name.to_string()));
        }
        self.map.insert(name.to_string(), t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<S>, NnError> {
        self.map
            .get(name)
            .ok_or_else(|| NnError::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    /// Name-sorted iteration.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|k| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total scalar count across all tensors.
    pub fn total_elements(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }

    pub fn zero_grads(&self) {
        for t in self.map.values() {
            t.zero_grad();
        }
    }

    /// Copy with every tensor detached (fresh storage, no grad required).
    /// Used for stop-gradient evaluations through frozen networks.
    pub fn detached(&self) -> ParamSet<S> {
        let map = self
            .map
            .iter()
            .map(|(k, v)| (k.clone(), v.detached()))
            .collect();
        ParamSet { map }
    }

    /// Copy with fresh storage, preserving grad requirements.
    pub fn deep_clone(&self) -> ParamSet<S> {
        let map = self
            .map
            .iter()
            .map(|(k, v)| (k.clone(), v.deep_clone()))
            .collect();
        ParamSet { map }
    }

    pub fn validate_finite(&self) -> Result<(), NnError> {
        for (name, t) in &self.map {
            t.validate_finite().map_err(|source| NnError::BadValue {
                name: name.clone(),
                source,
            })?;
        }
        Ok(())
    }

    /// Both sets must have identical names and shapes.
    pub fn check_same_layout(&self, other: &ParamSet<S>) -> Result<(), NnError> {
        let missing: Vec<String> = self
            .map
            .keys()
            .filter(|k| !other.map.contains_key(*k))
            .cloned()
            .collect();
        let extra: Vec<String> = other
            .map
            .keys()
            .filter(|k| !self.map.contains_key(*k))
            .cloned()
            .collect();
        if !missing.is_empty() || !extra.is_empty() {
            return Err(NnError::NameSetMismatch { missing, extra });
        }
        for (name, t) in &self.map {
            let o = &other.map[name];
            if t.shape() != o.shape() {
                return Err(NnError::ShapeMismatch {
                    name: name.clone(),
                    want: t.shape().to_vec(),
                    got: o.shape().to_vec(),
                });
            }
        }
        Ok(())
    }
}

// ---- initialization ----

const DEFAULT_LOG_STD_MIN: f64 = -2.5;
const DEFAULT_LOG_STD_MAX: f64 = 2.0;

/// Band for policy log-stds. The actor maps its raw head output into this
/// open interval with a tanh squash rather than a hard clamp: the
/// reconstruction objective constantly pushes the policy toward zero
/// variance, and a clamp would zero the gradient at the floor, leaving the
/// entropy term no path to widen the policy again. A floor of −5 also keeps
/// log-densities bounded enough for the critic targets to track.
pub fn log_std_bounds<S: Scalar>() -> (S, S) {
    (
        S::from_f64_c(DEFAULT_LOG_STD_MIN),
        S::from_f64_c(DEFAULT_LOG_STD_MAX),
    )
}

fn fan_in_bound(fan_in: usize) -> f64 {
    (1.0 / fan_in as f64).sqrt()
}

/// Weight tensor drawn from U(-sqrt(1/fan_in), sqrt(1/fan_in)).
pub fn init_weight<S: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<S> {
    let data = uniform_vec(
        rng,
        crate::tensor::shape::numel(shape),
        fan_in_bound(fan_in),
    );
    Tensor::param(shape, data).expect("consistent init shape")
}

/// Dense layer parameters: `{name}/w` [in, out] and `{name}/b` [1, out]
/// (bias zero-initialized, shaped for row broadcasting).
pub fn init_dense<S: Scalar>(
    ps: &mut ParamSet<S>,
    rng: &mut ChaCha8Rng,
    name: &str,
    in_dim: usize,
    out_dim: usize,
) -> Result<(), NnError> {
    ps.insert(
        &format!("{name}/w"),
        init_weight(rng, &[in_dim, out_dim], in_dim),
    )?;
    ps.insert(
        &format!("{name}/b"),
        Tensor::param(&[1, out_dim], vec![S::zero(); out_dim]).expect("bias shape"),
    )
}

/// Convolution parameters: `{name}/k` [f, c, kh, kw] and `{name}/b`
/// [1, f, 1, 1]; fan-in is c*kh*kw.
pub fn init_conv<S: Scalar>(
    ps: &mut ParamSet<S>,
    rng: &mut ChaCha8Rng,
    name: &str,
    f: usize,
    c: usize,
    kh: usize,
    kw: usize,
) -> Result<(), NnError> {
    ps.insert(
        &format!("{name}/k"),
        init_weight(rng, &[f, c, kh, kw], c * kh * kw),
    )?;
    ps.insert(
        &format!("{name}/b"),
        Tensor::param(&[1, f, 1, 1], vec![S::zero(); f]).expect("bias shape"),
    )
}

/// Transposed-convolution parameters: `{name}/k` [c_in, f_out, kh, kw] and
/// `{name}/b` [1, f_out, 1, 1]; fan-in is c_in*kh*kw.
pub fn init_conv_t<S: Scalar>(
    ps: &mut ParamSet<S>,
    rng: &mut ChaCha8Rng,
    name: &str,
    c_in: usize,
    f_out: usize,
    kh: usize,
    kw: usize,
) -> Result<(), NnError> {
    ps.insert(
        &format!("{name}/k"),
        init_weight(rng, &[c_in, f_out, kh, kw], c_in * kh * kw),
    )?;
    ps.insert(
        &format!("{name}/b"),
        Tensor::param(&[1, f_out, 1, 1], vec![S::zero(); f_out]).expect("bias shape"),
    )
}

// ---- optimizers ----

/// Update algorithm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptAlgo {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd,
}

impl OptAlgo {
    pub fn adam_default() -> Self {
        OptAlgo::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter-set optimizer. Reads accumulated grads, updates values in
/// place, and never mutates the grad buffers (callers zero them).
#[derive(Debug)]
pub struct Optimizer<S: Scalar> {
    pub algo: OptAlgo,
    pub lr: f64,
    /// Global-norm clip threshold; 0 disables clipping.
    pub grad_clip: f64,
    step_count: u64,
    m: BTreeMap<String, Vec<S>>,
    v: BTreeMap<String, Vec<S>>,
}

impl<S: Scalar> Optimizer<S> {
    pub fn new(algo: OptAlgo, lr: f64, grad_clip: f64) -> Self {
        Optimizer {
            algo,
            lr,
            grad_clip,
            step_count: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn adam(lr: f64) -> Self {
        Self::new(OptAlgo::adam_default(), lr, 0.0)
    }

    pub fn sgd(lr: f64) -> Self {
        Self::new(OptAlgo::Sgd, lr, 0.0)
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Apply one update from the grads currently on `params`. Every tensor
    /// in the set must have a gradient.
    pub fn step(&mut self, params: &ParamSet<S>) -> Result<(), NnError> {
        // gather grads up front so a missing one aborts before any mutation
        let mut grads: Vec<(&str, &Tensor<S>, Vec<S>)> = Vec::with_capacity(params.len());
        for (name, t) in params.iter() {
            let g = t
                .grad()
                .ok_or_else(|| NnError::MissingGrad(name.to_string()))?;
            grads.push((name, t, g));
        }

        let mut scale = S::one();
        if self.grad_clip > 0.0 {
            let mut sq = 0.0f64;
            for (_, _, g) in &grads {
                for x in g {
                    let v = x.to_f64_c();
                    sq += v * v;
                }
            }
            let norm = sq.sqrt();
            if norm > self.grad_clip {
                scale = S::from_f64_c(self.grad_clip / norm);
            }
        }

        self.step_count += 1;
        let lr = S::from_f64_c(self.lr);
        match self.algo {
            OptAlgo::Sgd => {
                for (_, t, g) in &grads {
                    let mut d = t.data_mut();
                    for (p, &gi) in d.iter_mut().zip(g) {
                        *p -= lr * gi * scale;
                    }
                }
            }
            OptAlgo::Adam { beta1, beta2, eps } => {
                let b1 = S::from_f64_c(beta1);
                let b2 = S::from_f64_c(beta2);
                let epsv = S::from_f64_c(eps);
                let t_i = self.step_count as i32;
                let c1 = S::from_f64_c(1.0 - beta1.powi(t_i));
                let c2 = S::from_f64_c(1.0 - beta2.powi(t_i));
                for (name, t, g) in &grads {
                    let m = self
                        .m
                        .entry(name.to_string())
                        .or_insert_with(|| vec![S::zero(); g.len()]);
                    let v = self
                        .v
                        .entry(name.to_string())
                        .or_insert_with(|| vec![S::zero(); g.len()]);
                    if m.len() != g.len() {
                        return Err(NnError::ShapeMismatch {
                            name: name.to_string(),
                            want: vec![m.len()],
                            got: vec![g.len()],
                        });
                    }
                    let mut d = t.data_mut();
                    for i in 0..g.len() {
                        let gi = g[i] * scale;
                        m[i] = b1 * m[i] + (S::one() - b1) * gi;
                        v[i] = b2 * v[i] + (S::one() - b2) * gi * gi;
                        let mhat = m[i] / c1;
                        let vhat = v[i] / c2;
                        d[i] -= lr * mhat / (vhat.sqrt() + epsv);
                    }
                }
            }
        }
        Ok(())
    }

    /// State export for checkpoints: (step count, first moments, second
    /// moments). Moment maps are empty for SGD.
    pub fn state(&self) -> (u64, &BTreeMap<String, Vec<S>>, &BTreeMap<String, Vec<S>>) {
        (self.step_count, &self.m, &self.v)
    }

    /// Restore state saved by [`Optimizer::state`].
    pub fn restore(
        &mut self,
        step_count: u64,
        m: BTreeMap<String, Vec<S>>,
        v: BTreeMap<String, Vec<S>>,
    ) {
        self.step_count = step_count;
        self.m = m;
        self.v = v;
    }
}

/// Polyak averaging into `target`: target <- tau * online + (1 - tau) *
/// target. Layouts must match exactly.
pub fn ema_update<S: Scalar>(
    target: &ParamSet<S>,
    online: &ParamSet<S>,
    tau: f64,
) -> Result<(), NnError> {
    target.check_same_layout(online)?;
    let t = S::from_f64_c(tau);
    let one_minus = S::one() - t;
    for (name, dst) in target.iter() {
        let src = online.get(name)?;
        let s = src.data();
        let mut d = dst.data_mut();
        for (dv, &sv) in d.iter_mut().zip(s.iter()) {
            *dv = t * sv + one_minus * *dv;
        }
    }
    Ok(())
}
