//! Named parameter storage and the Adam optimizer.

use crate::error::{Error, Result};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Ordered collection of named tensors. Order is part of the identity of a
/// set: checkpoints and optimizers address parameters by position.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Position of a parameter inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> u64 {
        self.tensors.iter().map(|t| t.numel() as u64).sum()
    }

    /// Copies every tensor onto `tape` as a leaf.
    pub fn register(&self, tape: &mut Tape, requires_grad: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| tape.leaf(t.clone(), requires_grad))
            .collect()
    }

    pub fn bit_eq(&self, other: &ParamSet) -> bool {
        self.names == other.names
            && self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.bit_eq(b))
    }
}

/// Collects gradients for `vars` into a list aligned with them; vars that
/// did not require grad yield zeros.
pub fn collect_grads(grads: &mut Gradients, tape: &Tape, vars: &[Var]) -> Vec<Tensor> {
    vars.iter()
        .map(|&v| grads.take(v).unwrap_or_else(|| Tensor::zeros(tape.shape(v))))
        .collect()
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, shapes: impl IntoIterator<Item = usize>) -> Self {
        let sizes: Vec<usize> = shapes.into_iter().collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_params(lr: f64, params: &ParamSet) -> Self {
        Self::new(lr, params.tensors().iter().map(Tensor::numel))
    }

    /// Applies one update. `grads` must align with `targets`.
    pub fn update(&mut self, targets: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if targets.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::invalid(format!(
                "optimizer tracks {} tensors, got {} targets and {} grads",
                self.m.len(),
                targets.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (target, grad)) in targets.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            if target.len() != m.len() || grad.len() != m.len() {
                return Err(Error::invalid(format!("optimizer slot {i} size changed")));
            }
            for j in 0..m.len() {
                let g = grad[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                target[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    pub fn step_params(&mut self, params: &mut ParamSet, grads: &[Tensor]) -> Result<()> {
        let mut targets: Vec<&mut [f64]> = params.tensors.iter_mut().map(|t| t.data_mut()).collect();
        let g: Vec<&[f64]> = grads.iter().map(Tensor::data).collect();
        self.update(&mut targets, &g)
    }
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}
