//! Test-only oracles shared by the integration suites.
#![allow(dead_code)]

use hpadapt::{losses, Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::uniform(shape, 1.0, rng)
}

/// Reduces an op output to a scalar with fixed random weights so every
/// output entry contributes a distinct amount.
fn weighted_sum(tape: &mut Tape, out: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

fn eval<F>(f: &F, inputs: &[Tensor], weights: &Tensor) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars).unwrap();
    let s = weighted_sum(&mut tape, out, weights).unwrap();
    tape.value(s).item()
}

/// Norm-wise relative error between analytic and central-difference
/// gradients, worst over all inputs.
pub fn grad_check<F>(f: F, inputs: &[Tensor], rng: &mut impl Rng) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars).unwrap();
    let weights = Tensor::uniform(tape.shape(out), 1.0, rng);
    let loss = weighted_sum(&mut tape, out, &weights).unwrap();
    let grads = tape.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).unwrap().data().to_vec();
        let mut numeric = vec![0.0; analytic.len()];
        for j in 0..analytic.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            numeric[j] = (eval(&f, &plus, &weights) - eval(&f, &minus, &weights)) / (2.0 * FD_STEP);
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    worst
}

pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-10 {
        diff
    } else {
        diff / scale
    }
}

/// Sum over every CTC alignment of `reference` by explicit enumeration of
/// all `vocab^frames` label paths.
pub fn ctc_brute_force(log_probs: &[Vec<f64>], reference: &[usize], blank: usize) -> f64 {
    let frames = log_probs.len();
    let vocab = log_probs[0].len();
    let mut total = 0.0;
    let mut path = vec![0usize; frames];
    loop {
        if collapse(&path, blank) == reference {
            let lp: f64 = path.iter().enumerate().map(|(t, &k)| log_probs[t][k]).sum();
            total += lp.exp();
        }
        // odometer increment
        let mut pos = 0;
        loop {
            if pos == frames {
                return -total.ln();
            }
            path[pos] += 1;
            if path[pos] < vocab {
                break;
            }
            path[pos] = 0;
            pos += 1;
        }
    }
}

pub fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path {
        if Some(k) != prev && k != blank {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

/// Plain quadratic-table Levenshtein distance.
pub fn edit_distance_oracle(a: &[usize], b: &[usize]) -> usize {
    let mut table = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in table.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        table[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let sub = table[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            table[i][j] = sub.min(table[i - 1][j] + 1).min(table[i][j - 1] + 1);
        }
    }
    table[a.len()][b.len()]
}

pub fn random_log_probs(frames: usize, vocab: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    (0..frames)
        .map(|_| {
            let raw: Vec<f64> = (0..vocab).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let lse = raw.iter().map(|v| v.exp()).sum::<f64>().ln();
            raw.iter().map(|v| v - lse).collect()
        })
        .collect()
}

pub type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// One gradient-check case per differentiable forward op: name, input
/// shapes and the op applied to those inputs.
pub fn op_cases() -> Vec<(&'static str, Vec<Vec<usize>>, OpFn)> {
    vec![
        (
            "matmul",
            vec![vec![3, 4], vec![4, 2]],
            Box::new(|t, v| t.matmul(v[0], v[1])),
        ),
        ("add", vec![vec![3, 4], vec![3, 4]], Box::new(|t, v| t.add(v[0], v[1]))),
        (
            "add_leading_batch",
            vec![vec![3, 4], vec![4]],
            Box::new(|t, v| t.add(v[0], v[1])),
        ),
        ("mul", vec![vec![3, 4], vec![3, 4]], Box::new(|t, v| t.mul(v[0], v[1]))),
        (
            "mul_leading_batch",
            vec![vec![2, 3, 4], vec![3, 4]],
            Box::new(|t, v| t.mul(v[0], v[1])),
        ),
        (
            "scale_by",
            vec![vec![3, 4], vec![1]],
            Box::new(|t, v| t.scale_by(v[0], v[1])),
        ),
        ("scale", vec![vec![5]], Box::new(|t, v| Ok(t.scale(v[0], -1.7)))),
        ("slice", vec![vec![4, 5]], Box::new(|t, v| t.slice(v[0], 1, 1, 3))),
        (
            "concat",
            vec![vec![2, 3], vec![2, 2]],
            Box::new(|t, v| t.concat(&[v[0], v[1]], 1)),
        ),
        ("transpose", vec![vec![3, 4]], Box::new(|t, v| t.transpose(v[0]))),
        ("reshape", vec![vec![3, 4]], Box::new(|t, v| t.reshape(v[0], &[6, 2]))),
        ("softmax_axis1", vec![vec![3, 4]], Box::new(|t, v| t.softmax(v[0], 1))),
        ("softmax_axis0", vec![vec![3, 4]], Box::new(|t, v| t.softmax(v[0], 0))),
        ("log_softmax", vec![vec![3, 5]], Box::new(|t, v| t.log_softmax(v[0], 1))),
        (
            "layer_norm",
            vec![vec![3, 6], vec![6], vec![6]],
            Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)),
        ),
        ("swish", vec![vec![3, 4]], Box::new(|t, v| Ok(t.swish(v[0])))),
        ("sigmoid", vec![vec![3, 4]], Box::new(|t, v| Ok(t.sigmoid(v[0])))),
        ("glu", vec![vec![3, 6]], Box::new(|t, v| t.glu(v[0]))),
        (
            "depthwise_conv1d",
            vec![vec![7, 3], vec![3, 5]],
            Box::new(|t, v| t.depthwise_conv1d(v[0], v[1])),
        ),
        (
            "embedding",
            vec![vec![5, 3]],
            Box::new(|t, v| t.embedding(v[0], &[4, 0, 4, 2])),
        ),
        (
            "masked_fill",
            vec![vec![2, 3]],
            Box::new(|t, v| t.masked_fill(v[0], &[true, false, false, true, false, true], -3.0)),
        ),
        ("log_sum_exp", vec![vec![3, 4]], Box::new(|t, v| t.log_sum_exp(v[0], 1))),
        ("sum", vec![vec![3, 4]], Box::new(|t, v| Ok(t.sum(v[0])))),
        (
            "ctc_loss",
            vec![vec![6, 4]],
            Box::new(|t, v| {
                let lp = t.log_softmax(v[0], 1)?;
                losses::ctc_loss(t, lp, &[1, 3, 3])
            }),
        ),
        (
            "attention_ce_loss",
            vec![vec![3, 5]],
            Box::new(|t, v| losses::attention_ce_loss(t, v[0], &[1, 4, 2], 0.1)),
        ),
        (
            "hybrid_loss",
            vec![vec![1], vec![1]],
            Box::new(|t, v| losses::hybrid_loss(t, v[0], v[1], 0.3)),
        ),
    ]
}
