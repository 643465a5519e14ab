//! Epoch loops for supernet search and derived-model training, and
//! evaluation by greedy decoding.

use std::marker::PhantomData;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{shuffled_indices, Utterance};
use crate::decode::{greedy_decode, ErrorCounts};
use crate::error::{Error, Result};
use crate::losses::{utterance_loss, LossConfig};
use crate::params::{clip_grad_norm, collect_grads, Adam, ParamSet};
use crate::search::{alternating_step, ArchLogits, SearchOptimizers, SearchTask};
use crate::supernet::{space_cost_model, ConformerModel, CostModel, Pick};
use crate::tape::{Tape, Var};

/// A supernet trained on utterance batches.
pub struct SupernetTask<'c> {
    pub model: ConformerModel,
    pub cost: CostModel,
    pub loss: LossConfig,
    corpus: PhantomData<&'c Utterance>,
}

impl<'c> SupernetTask<'c> {
    pub fn new(model: ConformerModel, loss: LossConfig) -> Self {
        let cost = space_cost_model(model.space());
        Self {
            model,
            cost,
            loss,
            corpus: PhantomData,
        }
    }
}

impl<'c> SearchTask for SupernetTask<'c> {
    type Batch = [&'c Utterance];

    fn params(&self) -> &ParamSet {
        self.model.params()
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        self.model.params_mut()
    }

    fn cost_model(&self) -> &CostModel {
        &self.cost
    }

    fn batch_len(batch: &Self::Batch) -> usize {
        batch.len()
    }

    fn loss(&self, tape: &mut Tape, w: &[Var], mix: &[Var], batch: &Self::Batch) -> Result<Var> {
        let picks: Vec<Pick> = mix.iter().map(|&v| Pick::Mix(v)).collect();
        batch_loss(&self.model, tape, w, &picks, batch, &self.loss)
    }
}

/// Mean hybrid loss over `batch`.
pub fn batch_loss(
    model: &ConformerModel,
    tape: &mut Tape,
    w: &[Var],
    picks: &[Pick],
    batch: &[&Utterance],
    cfg: &LossConfig,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let mut total: Option<Var> = None;
    for u in batch {
        let l = utterance_loss(model, tape, w, picks, &u.features, &u.tokens, cfg)?;
        total = Some(match total {
            Some(t) => tape.add(t, l)?,
            None => l,
        });
    }
    Ok(tape.scale(total.unwrap(), 1.0 / batch.len() as f64))
}

/// Shuffled batches of indices `0..n`; the last batch may be short.
pub fn make_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    shuffled_indices(n, rng)
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}

/// Mean losses over one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    /// Mean held-out loss of the logit steps (search stages only).
    pub heldout_loss: Option<f64>,
    /// Gumbel-Softmax temperature (search stages only).
    pub temperature: Option<f64>,
    /// Dev TER for derived stages.
    pub dev_ter: Option<f64>,
}

/// One pass over `train`, each weight batch paired with the next held-out
/// batch (cycling).
#[allow(clippy::too_many_arguments)]
pub fn supernet_epoch<'c>(
    task: &mut SupernetTask<'c>,
    logits: &mut ArchLogits,
    opt: &mut SearchOptimizers,
    train: &[&'c Utterance],
    heldout: &[&'c Utterance],
    batch_size: usize,
    rng: &mut ChaCha8Rng,
    epoch: usize,
) -> Result<EpochStats> {
    let tb = make_batches(train.len(), batch_size, rng);
    let hb = make_batches(heldout.len(), batch_size, rng);
    if tb.is_empty() || hb.is_empty() {
        return Err(Error::invalid("search needs nonempty train and held-out splits"));
    }
    let (mut tl, mut hl) = (0.0, 0.0);
    for (i, b) in tb.iter().enumerate() {
        let train_batch: Vec<&Utterance> = b.iter().map(|&j| train[j]).collect();
        let held_batch: Vec<&Utterance> = hb[i % hb.len()].iter().map(|&j| heldout[j]).collect();
        let s = alternating_step(task, logits, opt, &train_batch, &held_batch)?;
        if !s.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        tl += s.train;
        hl += s.heldout;
    }
    Ok(EpochStats {
        epoch,
        train_loss: tl / tb.len() as f64,
        heldout_loss: Some(hl / tb.len() as f64),
        temperature: Some(logits.temperature),
        dev_ter: None,
    })
}

/// One pass of plain training of a materialized model.
pub fn derived_epoch(
    model: &mut ConformerModel,
    opt: &mut Adam,
    train: &[&Utterance],
    batch_size: usize,
    cfg: &LossConfig,
    clip: Option<f64>,
    rng: &mut ChaCha8Rng,
    epoch: usize,
) -> Result<f64> {
    let picks = single_picks(model);
    let batches = make_batches(train.len(), batch_size, rng);
    if batches.is_empty() {
        return Err(Error::invalid("empty training split"));
    }
    let mut total = 0.0;
    for b in &batches {
        let batch: Vec<&Utterance> = b.iter().map(|&j| train[j]).collect();
        let mut tape = Tape::new();
        let w = model.bind(&mut tape, true);
        let loss = batch_loss(model, &mut tape, &w, &picks, &batch, cfg)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        let mut grads = tape.backward(loss)?;
        let mut g = collect_grads(&mut grads, &tape, &w);
        if let Some(max) = clip {
            clip_grad_norm(&mut g, max);
        }
        opt.step_params(model.params_mut(), &g)?;
        total += value;
    }
    Ok(total / batches.len() as f64)
}

/// Picks for a materialized (single-candidate) model.
pub fn single_picks(model: &ConformerModel) -> Vec<Pick> {
    vec![Pick::Choice(0); model.space().groups().len()]
}

/// Decoding length limit for an utterance of `frames` frames.
pub fn max_decode_len(frames: usize) -> usize {
    (frames / 4).max(1)
}

/// Greedy hypotheses and accumulated error counts.
pub fn evaluate(model: &ConformerModel, picks: &[Pick], utts: &[&Utterance]) -> Result<(ErrorCounts, Vec<Vec<usize>>)> {
    let mut counts = ErrorCounts::default();
    let mut hyps = Vec::with_capacity(utts.len());
    for u in utts {
        let h = greedy_decode(model, picks, &u.features, max_decode_len(u.frames()))?;
        counts.add(&h.tokens, &u.tokens);
        hyps.push(h.tokens);
    }
    Ok((counts, hyps))
}
