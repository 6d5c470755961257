#![allow(dead_code)]

use kcd_core::consistency::{ConsistencyMatrix, ConsistencyMetric, MetricKind};
use kcd_core::lab::model::{distill_losses, flatten_grads, forward_with_activations, loss_and_grad, FeatureTarget, KdConfig};
use kcd_core::lab::ModelWeights;
use kcd_core::{Matrix, PooledActivations};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

pub fn pooled(m: Matrix) -> PooledActivations {
    PooledActivations::from_matrix(m).unwrap()
}

pub fn wrap(m: Matrix) -> ConsistencyMatrix {
    ConsistencyMatrix { m, metric: ConsistencyMetric::new(MetricKind::Correlation, 1e-8).unwrap(), sample_count: 0 }
}

/// Γ of an index map, summed in student-channel order.
pub fn gamma(m: &Matrix, map: &[usize]) -> f64 {
    map.iter().enumerate().map(|(j, &i)| m[(i, j)]).sum()
}

/// Largest Γ over all permutations (Heap's algorithm).
pub fn brute_force_max(m: &Matrix) -> f64 {
    let n = m.rows();
    let mut p: Vec<usize> = (0..n).collect();
    let mut c = vec![0usize; n];
    let mut best = gamma(m, &p);
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                p.swap(0, i);
            } else {
                p.swap(c[i], i);
            }
            best = best.max(gamma(m, &p));
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    best
}

pub fn is_bijection(map: &[usize]) -> bool {
    let mut seen = vec![false; map.len()];
    map.iter().all(|&i| i < map.len() && !std::mem::replace(&mut seen[i], true))
}

/// Which part of the total loss to differentiate.
#[derive(Clone, Copy)]
pub enum Term {
    Cls,
    Condis,
    Kd,
}

/// Relative error between the analytic gradient of one loss term and a
/// central finite difference of that term alone.
pub fn grad_rel_error(
    model: &ModelWeights,
    x: &Matrix,
    labels: &[i64],
    targets: &[FeatureTarget],
    teacher_logits: Option<&Matrix>,
    kd: Option<&KdConfig>,
    term: Term,
) -> f64 {
    let analytic = {
        let (_, full) = loss_and_grad(model, x, labels, targets, teacher_logits, kd).unwrap();
        let full = flatten_grads(&full);
        match term {
            Term::Cls => full,
            Term::Condis | Term::Kd => {
                // strip the cross-entropy part, which is always present
                let (_, base) = loss_and_grad(model, x, labels, &[], None, None).unwrap();
                full.iter().zip(flatten_grads(&base)).map(|(a, b)| a - b).collect()
            }
        }
    };
    let value = |m: &ModelWeights| {
        let fwd = forward_with_activations(m, x).unwrap();
        let p = distill_losses(&fwd, targets, teacher_logits, labels, kd).unwrap();
        match term {
            Term::Cls => p.l_cls,
            Term::Condis => p.l_condis,
            Term::Kd => p.l_kd,
        }
    };
    let theta = model.flat_params();
    let h = 1e-6;
    let mut probe = model.clone();
    let mut num = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let mut t = theta.clone();
        t[i] = theta[i] + h;
        probe.set_flat_params(&t);
        let up = value(&probe);
        t[i] = theta[i] - h;
        probe.set_flat_params(&t);
        let down = value(&probe);
        num.push((up - down) / (2.0 * h));
    }
    let diff: f64 = analytic.iter().zip(&num).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nn: f64 = num.iter().map(|v| v * v).sum::<f64>().sqrt();
    diff / na.max(nn).max(1e-12)
}
