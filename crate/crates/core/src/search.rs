//! Gumbel-Softmax architecture weights, the parameter-count penalty,
//! alternating weight/logit updates and 1-best extraction.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::softmax;
use crate::params::{clip_grad_norm, collect_grads, Adam, ParamSet};
use crate::supernet::{ArchSpace, CostModel, DerivedArch};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Exponential per-epoch temperature decay from `start` to `end`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TempSchedule {
    pub start: f64,
    pub end: f64,
}

impl Default for TempSchedule {
    fn default() -> Self {
        Self { start: 1.0, end: 0.1 }
    }
}

impl TempSchedule {
    pub fn constant(t: f64) -> Self {
        Self { start: t, end: t }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.end > 0.0 && self.start >= self.end && self.start.is_finite()) {
            return Err(Error::config(
                "temperature",
                format!("need start ≥ end > 0, got {} → {}", self.start, self.end),
            ));
        }
        Ok(())
    }

    /// Temperature for `epoch` of `epochs` (0-based); the last epoch runs
    /// at `end`.
    pub fn at(&self, epoch: usize, epochs: usize) -> f64 {
        if epochs <= 1 {
            return self.start;
        }
        let frac = epoch.min(epochs - 1) as f64 / (epochs - 1) as f64;
        self.start * (self.end / self.start).powf(frac)
    }
}

/// Serializable position of a ChaCha stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Free logits `ℓ = log α` per choice group, with sampling temperature,
/// penalty factor and the Gumbel noise stream.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchLogits {
    pub logits: Vec<Vec<f64>>,
    pub temperature: f64,
    pub eta: f64,
    rng: ChaCha8Rng,
}

impl ArchLogits {
    /// Zero logits (uniform prior) for groups of the given sizes.
    pub fn new(sizes: impl IntoIterator<Item = usize>, seed: u64) -> Self {
        Self {
            logits: sizes.into_iter().map(|n| vec![0.0; n]).collect(),
            temperature: 1.0,
            eta: 0.0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn for_space(space: &ArchSpace, seed: u64) -> Self {
        Self::new(space.group_choices().iter().map(Vec::len), seed)
    }

    pub fn from_parts(logits: Vec<Vec<f64>>, temperature: f64, eta: f64, rng: RngState) -> Self {
        Self {
            logits,
            temperature,
            eta,
            rng: rng.restore(),
        }
    }

    pub fn rng_state(&self) -> RngState {
        RngState::capture(&self.rng)
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.logits.iter().map(Vec::len).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::invalid(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.eta >= 0.0) {
            return Err(Error::invalid(format!(
                "penalty factor must be nonnegative, got {}",
                self.eta
            )));
        }
        if self.logits.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite architecture logit"));
        }
        Ok(())
    }

    /// Draws `G = −ln(−ln U)`, `U ~ Uniform(0, 1)`, for every logit.
    pub fn gumbel_noise(&mut self) -> Vec<Vec<f64>> {
        let rng = &mut self.rng;
        self.logits
            .iter()
            .map(|g| {
                g.iter()
                    .map(|_| {
                        let u: f64 = rng.sample(rand::distributions::Open01);
                        -(-u.ln()).ln()
                    })
                    .collect()
            })
            .collect()
    }

    /// Gumbel-Softmax sample of every group's mixing weights.
    pub fn sample_weights(&mut self) -> Result<Vec<Vec<f64>>> {
        let noise = self.gumbel_noise();
        self.weights_with_noise(&noise)
    }

    /// Mixing weights for explicit noise (zero noise gives `softmax(ℓ/T)`).
    pub fn weights_with_noise(&self, noise: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        self.logits
            .iter()
            .zip(noise)
            .map(|(l, g)| gumbel_softmax(l, g, self.temperature))
            .collect()
    }

    /// Noise-free `softmax(ℓ)`.
    pub fn expected_weights(&self) -> Vec<Vec<f64>> {
        self.logits.iter().map(|l| softmax(l)).collect()
    }

    /// Per group, the index of the largest logit; ties go to the earlier
    /// (smaller) candidate.
    pub fn argmax_indices(&self) -> Vec<usize> {
        self.logits
            .iter()
            .map(|l| {
                let mut best = 0;
                for (i, &v) in l.iter().enumerate() {
                    if v > l[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }

    /// 1-best architecture.
    pub fn extract(&self, space: &ArchSpace) -> Result<DerivedArch> {
        if self.sizes() != space.group_choices().iter().map(Vec::len).collect::<Vec<_>>() {
            return Err(Error::invalid("logits do not match the search space"));
        }
        space.arch_from_indices(&self.argmax_indices())
    }

    /// Records the logits on `tape` as trainable leaves.
    pub fn register(&self, tape: &mut Tape) -> Vec<Var> {
        self.logits
            .iter()
            .map(|l| tape.param(Tensor::from_vec(l.clone())))
            .collect()
    }
}

/// `softmax((ℓ + G) / T)`.
pub fn gumbel_softmax(logits: &[f64], noise: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        return Err(Error::invalid(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if logits.len() != noise.len() {
        return Err(Error::dim("gumbel_softmax", &[logits.len()], &[noise.len()]));
    }
    let z: Vec<f64> = logits.iter().zip(noise).map(|(l, g)| (l + g) / temperature).collect();
    Ok(softmax(&z))
}

/// [`gumbel_softmax`] on a tape, differentiable in the logits.
pub fn gumbel_softmax_on_tape(tape: &mut Tape, logits: Var, noise: &[f64], temperature: f64) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(Error::invalid(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let g = tape.constant(Tensor::from_vec(noise.to_vec()));
    let z = tape.add(logits, g)?;
    let z = tape.scale(z, 1.0 / temperature);
    tape.softmax(z, 0)
}

/// `task_loss + η · E[#params]` with the expectation under `softmax(ℓ)`.
/// With `η = 0` the task loss is returned untouched.
pub fn penalized_loss(tape: &mut Tape, task_loss: Var, logits: &[Var], cost: &CostModel, eta: f64) -> Result<Var> {
    if !(eta >= 0.0) {
        return Err(Error::invalid(format!("penalty factor must be nonnegative, got {eta}")));
    }
    if eta == 0.0 {
        return Ok(task_loss);
    }
    let weights = logits.iter().map(|&l| tape.softmax(l, 0)).collect::<Result<Vec<_>>>()?;
    let expected = cost.expected_on_tape(tape, &weights)?;
    let penalty = tape.scale(expected, eta);
    tape.add(task_loss, penalty)
}

/// A model whose forward pass is mixed by per-group weights.
pub trait SearchTask {
    type Batch: ?Sized;

    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;
    fn cost_model(&self) -> &CostModel;
    fn batch_len(batch: &Self::Batch) -> usize;

    /// Mean task loss over `batch`; `mix[g]` is group `g`'s `[n_g]` weight
    /// vector.
    fn loss(&self, tape: &mut Tape, w: &[Var], mix: &[Var], batch: &Self::Batch) -> Result<Var>;
}

/// Optimizer state for the two alternating updates.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchOptimizers {
    pub weights: Adam,
    pub logits: Adam,
    /// Joint gradient-norm limit for the weight update.
    pub clip: Option<f64>,
}

impl SearchOptimizers {
    pub fn new(params: &ParamSet, logits: &ArchLogits, lr_weights: f64, lr_logits: f64) -> Self {
        Self {
            weights: Adam::for_params(lr_weights, params),
            logits: Adam::new(lr_logits, logits.sizes()),
            clip: Some(5.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    /// Task loss on the training batch.
    pub train: f64,
    /// Task loss on the held-out batch.
    pub heldout: f64,
    /// Held-out objective including the penalty.
    pub penalized: f64,
}

impl StepLosses {
    pub fn is_finite(&self) -> bool {
        self.train.is_finite() && self.heldout.is_finite() && self.penalized.is_finite()
    }
}

/// One weight update on `train` with sampled, frozen mixing weights, then
/// one logit update on `heldout` with frozen weights. An update whose loss
/// is not finite is skipped; the caller decides how to react.
pub fn alternating_step<T: SearchTask>(
    task: &mut T,
    logits: &mut ArchLogits,
    opt: &mut SearchOptimizers,
    train: &T::Batch,
    heldout: &T::Batch,
) -> Result<StepLosses> {
    if T::batch_len(train) == 0 || T::batch_len(heldout) == 0 {
        return Err(Error::invalid("empty batch"));
    }
    logits.validate()?;

    // weights
    let lambda = logits.sample_weights()?;
    let mut tape = Tape::new();
    let w = task.params().register(&mut tape, true);
    let mix: Vec<Var> = lambda
        .iter()
        .map(|l| tape.constant(Tensor::from_vec(l.clone())))
        .collect();
    let loss = task.loss(&mut tape, &w, &mix, train)?;
    let train_loss = tape.value(loss).item();
    if train_loss.is_finite() {
        let mut grads = tape.backward(loss)?;
        let mut g = collect_grads(&mut grads, &tape, &w);
        if let Some(max) = opt.clip {
            clip_grad_norm(&mut g, max);
        }
        opt.weights.step_params(task.params_mut(), &g)?;
    }

    // logits
    let noise = logits.gumbel_noise();
    let mut tape = Tape::new();
    let w = task.params().register(&mut tape, false);
    let lv = logits.register(&mut tape);
    let mix = lv
        .iter()
        .zip(&noise)
        .map(|(&l, g)| gumbel_softmax_on_tape(&mut tape, l, g, logits.temperature))
        .collect::<Result<Vec<_>>>()?;
    let task_loss = task.loss(&mut tape, &w, &mix, heldout)?;
    let heldout_loss = tape.value(task_loss).item();
    let total = penalized_loss(&mut tape, task_loss, &lv, task.cost_model(), logits.eta)?;
    let penalized = tape.value(total).item();
    if penalized.is_finite() {
        let mut grads = tape.backward(total)?;
        let g = collect_grads(&mut grads, &tape, &lv);
        let mut targets: Vec<&mut [f64]> = logits.logits.iter_mut().map(|v| v.as_mut_slice()).collect();
        let gs: Vec<&[f64]> = g.iter().map(Tensor::data).collect();
        opt.logits.update(&mut targets, &gs)?;
    }

    Ok(StepLosses {
        train: train_loss,
        heldout: heldout_loss,
        penalized,
    })
}
