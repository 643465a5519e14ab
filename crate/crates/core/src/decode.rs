//! Greedy attention decoding and token error rate.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::supernet::{ConformerModel, ModelInput, Pick};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Decoded token sequence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    /// Set when decoding hit the length limit before emitting the sentinel.
    pub truncated: bool,
}

/// Argmax decoding from the sentinel until the sentinel is emitted again or
/// `max_len` tokens have been produced. Ties go to the lower token id.
pub fn greedy_decode(model: &ConformerModel, picks: &[Pick], features: &Tensor, max_len: usize) -> Result<Hypothesis> {
    let mut tape = Tape::new();
    let w = model.bind(&mut tape, false);
    let enc = model.encode(&mut tape, &w, picks, ModelInput::new(features))?;
    let sentinel = model.space().sentinel();
    let mut prefix = vec![sentinel];
    loop {
        if prefix.len() > max_len {
            return Ok(Hypothesis {
                tokens: prefix[1..].to_vec(),
                truncated: true,
            });
        }
        let logits = model.decode(&mut tape, &w, picks, &enc, &prefix)?;
        let v = model.space().vocab;
        let row = &tape.value(logits).data()[(prefix.len() - 1) * v..];
        let next = argmax(row);
        if next == sentinel {
            return Ok(Hypothesis {
                tokens: prefix[1..].to_vec(),
                truncated: false,
            });
        }
        prefix.push(next);
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Levenshtein distance with unit costs.
pub fn edit_distance(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Accumulated edit counts over a set of utterances.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorCounts {
    pub edits: usize,
    pub reference_tokens: usize,
}

impl ErrorCounts {
    pub fn add(&mut self, hyp: &[usize], reference: &[usize]) {
        self.edits += edit_distance(hyp, reference);
        self.reference_tokens += reference.len();
    }

    /// Edits per reference token; an empty reference counts as one token.
    pub fn rate(&self) -> f64 {
        self.edits as f64 / self.reference_tokens.max(1) as f64
    }
}

/// Edits between `hyp` and `reference` divided by the reference length.
pub fn token_error_rate(hyp: &[usize], reference: &[usize]) -> f64 {
    let mut c = ErrorCounts::default();
    c.add(hyp, reference);
    c.rate()
}
