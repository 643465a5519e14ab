//! CTC, label-smoothed attention cross-entropy and their interpolation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::log_sum_exp;
use crate::supernet::{ConformerModel, ModelInput, Pick, BLANK};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Interpolation and smoothing of the training objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight of the CTC term; the attention term gets the rest.
    pub ctc_weight: f64,
    pub label_smoothing: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            ctc_weight: 0.3,
            label_smoothing: 0.1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ctc_weight) {
            return Err(Error::config("loss.ctc_weight", "must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::config("loss.label_smoothing", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Frames needed to emit `reference`: one per label plus a blank between
/// each pair of repeated labels.
pub fn ctc_min_frames(reference: &[usize]) -> usize {
    reference.len() + reference.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Value of the CTC loss and its gradient with respect to `log_probs`
/// (`[T, V]`, row-major).
pub fn ctc_loss_and_grad(
    log_probs: &[f64],
    frames: usize,
    vocab: usize,
    reference: &[usize],
    blank: usize,
) -> Result<(f64, Vec<f64>)> {
    if log_probs.len() != frames * vocab {
        return Err(Error::dim("ctc_loss", &[frames, vocab], &[log_probs.len()]));
    }
    if let Some(&bad) = reference.iter().find(|&&y| y >= vocab || y == blank) {
        return Err(Error::invalid(format!(
            "reference label {bad} is blank or out of vocabulary"
        )));
    }
    let required = ctc_min_frames(reference);
    if frames < required || frames == 0 {
        return Err(Error::InfeasibleAlignment { frames, required });
    }

    // blank-interleaved labels: b y1 b y2 ... b
    let ext: Vec<usize> = std::iter::once(blank)
        .chain(reference.iter().flat_map(|&y| [y, blank]))
        .collect();
    let s_len = ext.len();
    let lp = |t: usize, s: usize| log_probs[t * vocab + ext[s]];
    let skip = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];
    let ninf = f64::NEG_INFINITY;

    let mut alpha = vec![ninf; frames * s_len];
    alpha[0] = lp(0, 0);
    if s_len > 1 {
        alpha[1] = lp(0, 1);
    }
    for t in 1..frames {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut terms = vec![prev[s]];
            if s >= 1 {
                terms.push(prev[s - 1]);
            }
            if skip(s) {
                terms.push(prev[s - 2]);
            }
            alpha[t * s_len + s] = log_sum_exp(terms.iter().copied()) + lp(t, s);
        }
    }

    let mut beta = vec![ninf; frames * s_len];
    let last = (frames - 1) * s_len;
    beta[last + s_len - 1] = lp(frames - 1, s_len - 1);
    if s_len > 1 {
        beta[last + s_len - 2] = lp(frames - 1, s_len - 2);
    }
    for t in (0..frames - 1).rev() {
        for s in 0..s_len {
            let next = &beta[(t + 1) * s_len..(t + 2) * s_len];
            let mut terms = vec![next[s]];
            if s + 1 < s_len {
                terms.push(next[s + 1]);
            }
            if s + 2 < s_len && skip(s + 2) {
                terms.push(next[s + 2]);
            }
            beta[t * s_len + s] = log_sum_exp(terms.iter().copied()) + lp(t, s);
        }
    }

    let end = &alpha[last..];
    let log_p = if s_len > 1 {
        log_sum_exp([end[s_len - 1], end[s_len - 2]].into_iter())
    } else {
        end[0]
    };
    if !log_p.is_finite() {
        // feasible, so only non-finite inputs get here; let the caller see it
        return Ok((-log_p, vec![0.0; frames * vocab]));
    }

    // ∂(−log p)/∂ log y_t(k) = −Σ_{s: ext_s = k} α_t(s) β_t(s) / (y_t(k) p)
    let mut grad = vec![0.0; frames * vocab];
    for t in 0..frames {
        for s in 0..s_len {
            let a = alpha[t * s_len + s] + beta[t * s_len + s];
            if a > ninf {
                grad[t * vocab + ext[s]] -= (a - lp(t, s) - log_p).exp();
            }
        }
    }
    Ok((-log_p, grad))
}

/// CTC loss of `[T, V]` log-posteriors against `reference`, as `[1]`.
pub fn ctc_loss(tape: &mut Tape, log_probs: Var, reference: &[usize]) -> Result<Var> {
    let shape = tape.shape(log_probs).to_vec();
    if shape.len() != 2 {
        return Err(Error::dim("ctc_loss", &shape, &[0, 0]));
    }
    let (value, grad) = ctc_loss_and_grad(tape.value(log_probs).data(), shape[0], shape[1], reference, BLANK)?;
    tape.custom_scalar(log_probs, value, grad)
}

/// Mean label-smoothed cross-entropy of teacher-forced logits `[n, V]`
/// against `targets` (length `n`, ending with the end sentinel).
pub fn attention_ce_loss(tape: &mut Tape, logits: Var, targets: &[usize], smoothing: f64) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != targets.len() {
        return Err(Error::dim("attention_ce_loss", &shape, &[targets.len()]));
    }
    if !(0.0..=1.0).contains(&smoothing) {
        return Err(Error::invalid(format!("label smoothing {smoothing} outside [0, 1]")));
    }
    let (n, v) = (shape[0], shape[1]);
    if let Some(&bad) = targets.iter().find(|&&y| y >= v) {
        return Err(Error::invalid(format!("target {bad} outside vocabulary of {v}")));
    }
    let x = tape.value(logits).data();
    let off = smoothing / v as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; n * v];
    for (r, &y) in targets.iter().enumerate() {
        let row = &x[r * v..(r + 1) * v];
        let lse = log_sum_exp(row.iter().copied());
        for (k, &z) in row.iter().enumerate() {
            let q = if k == y { 1.0 - smoothing + off } else { off };
            if q > 0.0 {
                loss -= q * (z - lse);
            }
            grad[r * v + k] = ((z - lse).exp() - q) / n as f64;
        }
    }
    tape.custom_scalar(logits, loss / n as f64, grad)
}

/// `weight · ctc + (1 − weight) · aed`.
pub fn hybrid_loss(tape: &mut Tape, ctc: Var, aed: Var, weight: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&weight) {
        return Err(Error::invalid(format!("CTC weight {weight} outside [0, 1]")));
    }
    if weight == 0.0 {
        return Ok(aed);
    }
    if weight == 1.0 {
        return Ok(ctc);
    }
    let a = tape.scale(ctc, weight);
    let b = tape.scale(aed, 1.0 - weight);
    tape.add(a, b)
}

/// Decoder input (sentinel then tokens) and targets (tokens then sentinel).
pub fn teacher_forcing(tokens: &[usize], sentinel: usize) -> (Vec<usize>, Vec<usize>) {
    let input = std::iter::once(sentinel).chain(tokens.iter().copied()).collect();
    let target = tokens.iter().copied().chain(std::iter::once(sentinel)).collect();
    (input, target)
}

/// Hybrid loss of one utterance under `picks`.
pub fn utterance_loss(
    model: &ConformerModel,
    tape: &mut Tape,
    w: &[Var],
    picks: &[Pick],
    features: &Tensor,
    tokens: &[usize],
    cfg: &LossConfig,
) -> Result<Var> {
    let enc = model.encode(tape, w, picks, ModelInput::new(features))?;
    let lp = model.ctc_log_probs(tape, w, &enc)?;
    let ctc = ctc_loss(tape, lp, tokens)?;
    let (input, target) = teacher_forcing(tokens, model.space().sentinel());
    let logits = model.decode(tape, w, picks, &enc, &input)?;
    let aed = attention_ce_loss(tape, logits, &target, cfg.label_smoothing)?;
    hybrid_loss(tape, ctc, aed, cfg.ctc_weight)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_frame_single_label() {
        let lp = vec![(1.0f64 / 3.0).ln(); 3];
        let (l, _) = ctc_loss_and_grad(&lp, 1, 3, &[1], 0).unwrap();
        assert!((l + (1.0f64 / 3.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_reference_is_all_blank_path() {
        let lp: Vec<f64> = [0.5f64, 0.3, 0.2, 0.6, 0.1, 0.3].iter().map(|p| p.ln()).collect();
        let (l, _) = ctc_loss_and_grad(&lp, 2, 3, &[], 0).unwrap();
        assert!((l + (0.5f64 * 0.6).ln()).abs() < 1e-12);
    }

    #[test]
    fn repeated_labels_need_a_separating_blank() {
        assert_eq!(ctc_min_frames(&[1, 1]), 3);
        let lp = vec![0.0; 2 * 3];
        let r = ctc_loss_and_grad(&lp, 2, 3, &[1, 1], 0);
        assert!(matches!(r, Err(Error::InfeasibleAlignment { frames: 2, required: 3 })));
    }

    #[test]
    fn hybrid_weights() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::scalar(1.0));
        let a = tape.constant(Tensor::scalar(2.0));
        let h = hybrid_loss(&mut tape, c, a, 0.3).unwrap();
        assert!((tape.value(h).item() - 1.7).abs() < 1e-12);
        assert_eq!(hybrid_loss(&mut tape, c, a, 0.0).unwrap(), a);
        assert_eq!(hybrid_loss(&mut tape, c, a, 1.0).unwrap(), c);
        assert!(matches!(
            hybrid_loss(&mut tape, c, a, 1.5),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn cross_entropy_edge_cases() {
        let mut tape = Tape::new();
        let v = 5;
        let x = tape.constant(Tensor::zeros(&[2, v]));
        let l = attention_ce_loss(&mut tape, x, &[1, 4], 0.0).unwrap();
        assert!((tape.value(l).item() - (v as f64).ln()).abs() < 1e-12);

        let mut onehot = vec![f64::NEG_INFINITY; 2 * v];
        onehot[1] = 0.0;
        onehot[v + 4] = 0.0;
        let x = tape.constant(Tensor::new(vec![2, v], onehot).unwrap());
        let l = attention_ce_loss(&mut tape, x, &[1, 4], 0.0).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);

        let r = attention_ce_loss(&mut tape, x, &[1], 0.0);
        assert!(matches!(r, Err(Error::Dimension { .. })));
    }
}
