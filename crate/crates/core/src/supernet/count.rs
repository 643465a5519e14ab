//! Closed-form parameter counts.
//!
//! Every block's parameter count is affine in its FD, CK and in the product
//! AH·ADIM of each attention, so the count of an architecture is a constant
//! plus linear and bilinear terms over the choice groups. The same terms give
//! the expected count under independent per-group mixing weights.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

use super::space::{ArchSpace, GroupKind, Side};

#[derive(Clone, Debug, PartialEq)]
pub enum CostTerm {
    /// `coeff · value(group)`
    Linear { group: usize, coeff: u64 },
    /// `coeff · value(a) · value(b)`
    Product { a: usize, b: usize, coeff: u64 },
}

/// Parameter count as a function of per-group choices.
#[derive(Clone, Debug, PartialEq)]
pub struct CostModel {
    pub constant: u64,
    pub terms: Vec<CostTerm>,
    /// Candidate values per group.
    pub choices: Vec<Vec<usize>>,
}

impl CostModel {
    /// Exact count for one choice index per group.
    pub fn exact(&self, indices: &[usize]) -> u64 {
        let v = |g: usize| self.choices[g][indices[g]] as u64;
        self.constant
            + self
                .terms
                .iter()
                .map(|t| match *t {
                    CostTerm::Linear { group, coeff } => coeff * v(group),
                    CostTerm::Product { a, b, coeff } => coeff * v(a) * v(b),
                })
                .sum::<u64>()
    }

    /// Expected count when each group's choice is drawn independently with
    /// probabilities `weights[g]`.
    pub fn expected(&self, weights: &[Vec<f64>]) -> f64 {
        let mean: Vec<f64> = self
            .choices
            .iter()
            .zip(weights)
            .map(|(c, w)| c.iter().zip(w).map(|(&v, p)| v as f64 * p).sum())
            .collect();
        self.constant as f64
            + self
                .terms
                .iter()
                .map(|t| match *t {
                    CostTerm::Linear { group, coeff } => coeff as f64 * mean[group],
                    CostTerm::Product { a, b, coeff } => coeff as f64 * mean[a] * mean[b],
                })
                .sum::<f64>()
    }

    /// [`CostModel::expected`] recorded on a tape; `weights[g]` are `[n_g]`.
    pub fn expected_on_tape(&self, tape: &mut Tape, weights: &[Var]) -> Result<Var> {
        let mut mean = Vec::with_capacity(weights.len());
        for (c, &w) in self.choices.iter().zip(weights) {
            let vals = tape.constant(Tensor::from_vec(c.iter().map(|&v| v as f64).collect()));
            let prod = tape.mul(w, vals)?;
            mean.push(tape.sum(prod));
        }
        let mut total = tape.constant(Tensor::scalar(self.constant as f64));
        for t in &self.terms {
            let term = match *t {
                CostTerm::Linear { group, coeff } => tape.scale(mean[group], coeff as f64),
                CostTerm::Product { a, b, coeff } => {
                    let ab = tape.mul(mean[a], mean[b])?;
                    tape.scale(ab, coeff as f64)
                }
            };
            total = tape.add(total, term)?;
        }
        Ok(total)
    }

    /// Cost of each candidate of `group` with every other group at its
    /// expected value; used to reason about penalty gradients.
    pub fn candidate_costs(&self, group: usize, weights: &[Vec<f64>]) -> Vec<f64> {
        (0..self.choices[group].len())
            .map(|i| {
                let mut w = weights.to_vec();
                w[group] = (0..self.choices[group].len())
                    .map(|j| if i == j { 1.0 } else { 0.0 })
                    .collect();
                self.expected(&w)
            })
            .collect()
    }
}

/// Parameter counts of the fixed (non-searched) pieces and per-block
/// coefficients for a model width `d`.
pub(crate) struct Coefficients {
    pub fixed: u64,
    pub enc_const: u64,
    pub enc_fd: u64,
    pub enc_attn: u64,
    pub enc_ck: u64,
    pub dec_const: u64,
    pub dec_fd: u64,
    pub dec_attn: u64,
}

impl Coefficients {
    pub fn new(space: &ArchSpace) -> Self {
        let d = space.d_model as u64;
        let f = space.feat_dim as u64;
        let v = space.vocab as u64;
        // attention projections: q/k/v (d·ha + ha each) and output (ha·d)
        let attn = 4 * d + 3;
        Self {
            // front-end (2f·d + d, 2d·d + d), CTC head, embedding, decoder
            // norm, decoder output projection
            fixed: (2 * f * d + d) + (2 * d * d + d) + (d * v + v) + v * d + 2 * d + (d * v + v),
            // 5 norms, 2 FFN output biases, attention output bias,
            // pointwise convs (d·2d + 2d, d·d + d), depthwise bias, conv norm
            enc_const: 10 * d + 2 * d + d + (2 * d * d + 2 * d) + (d * d + d) + d + 2 * d,
            enc_fd: 2 * (2 * d + 1),
            enc_attn: attn,
            enc_ck: d,
            // 3 norms, 2 attention output biases, FFN output bias
            dec_const: 6 * d + 2 * d + d,
            dec_fd: 2 * d + 1,
            dec_attn: attn,
        }
    }
}

/// Cost model of a full encoder-decoder space.
pub fn space_cost_model(space: &ArchSpace) -> CostModel {
    let c = Coefficients::new(space);
    let groups = space.groups();
    let pos = |side: Side, block: usize, kind: GroupKind| {
        groups
            .iter()
            .position(|g| g.side == side && g.block == block && g.kind == kind)
    };
    let mut constant = c.fixed;
    let mut terms = Vec::new();
    for b in 0..space.encoder.len() {
        let g = |k| pos(Side::Encoder, b, k).unwrap();
        constant += c.enc_const;
        terms.push(CostTerm::Linear {
            group: g(GroupKind::Fd),
            coeff: c.enc_fd,
        });
        terms.push(CostTerm::Product {
            a: g(GroupKind::Ah),
            b: g(GroupKind::Adim),
            coeff: c.enc_attn,
        });
        terms.push(CostTerm::Linear {
            group: g(GroupKind::Ck),
            coeff: c.enc_ck,
        });
    }
    for b in 0..space.decoder.len() {
        let g = |k| pos(Side::Decoder, b, k);
        constant += c.dec_const;
        terms.push(CostTerm::Linear {
            group: g(GroupKind::Fd).unwrap(),
            coeff: c.dec_fd,
        });
        let (ah, adim) = (g(GroupKind::Ah).unwrap(), g(GroupKind::Adim).unwrap());
        match (g(GroupKind::CrossAh), g(GroupKind::CrossAdim)) {
            (Some(xah), Some(xadim)) => {
                terms.push(CostTerm::Product {
                    a: ah,
                    b: adim,
                    coeff: c.dec_attn,
                });
                terms.push(CostTerm::Product {
                    a: xah,
                    b: xadim,
                    coeff: c.dec_attn,
                });
            }
            _ => terms.push(CostTerm::Product {
                a: ah,
                b: adim,
                coeff: 2 * c.dec_attn,
            }),
        }
    }
    CostModel {
        constant,
        terms,
        choices: space.group_choices(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::supernet::space::SpaceConfig;

    #[test]
    fn one_hot_expectation_equals_exact_count() {
        let space = SpaceConfig::desk().build().unwrap();
        let model = space_cost_model(&space);
        let idx: Vec<usize> = (0..model.choices.len()).map(|g| (g * 7) % 3).collect();
        let w: Vec<Vec<f64>> = model
            .choices
            .iter()
            .zip(&idx)
            .map(|(c, &i)| (0..c.len()).map(|j| if j == i { 1.0 } else { 0.0 }).collect())
            .collect();
        assert_eq!(model.expected(&w), model.exact(&idx) as f64);
    }

    #[test]
    fn tape_expectation_matches_plain() {
        let space = SpaceConfig::desk().build().unwrap();
        let model = space_cost_model(&space);
        let w: Vec<Vec<f64>> = model
            .choices
            .iter()
            .map(|c| vec![1.0 / c.len() as f64; c.len()])
            .collect();
        let mut tape = Tape::new();
        let vars: Vec<Var> = w.iter().map(|v| tape.constant(Tensor::from_vec(v.clone()))).collect();
        let e = model.expected_on_tape(&mut tape, &vars).unwrap();
        assert!((tape.value(e).item() - model.expected(&w)).abs() < 1e-6);
    }
}
