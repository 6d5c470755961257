//! Learned channel transforms fit on frozen pooled features: a single linear
//! layer (closed-form ridge) and a single residual block (gradient descent).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::activations::PooledActivations;
use crate::error::{shape_err, KcdError, Result};
use crate::linalg::{cholesky, cholesky_solve, Matrix};
use crate::matching::{Provenance, ResidualBlock, Strategy, TransformKind, Transformation};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub ridge_lambda: f64,
    pub lr: f64,
    pub epochs: usize,
    /// Hidden width of the residual block; `None` means the channel count.
    pub hidden: Option<usize>,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig { ridge_lambda: 1e-6, lr: 1e-2, epochs: 500, hidden: None, seed: 0 }
    }
}

impl FitConfig {
    fn validate(&self) -> Result<()> {
        if !(self.ridge_lambda >= 0.0 && self.ridge_lambda.is_finite()) {
            return Err(KcdError::Config("ridge_lambda must be >= 0".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.epochs == 0 {
            return Err(KcdError::Config("lr and epochs must be positive".into()));
        }
        if self.hidden == Some(0) {
            return Err(KcdError::Config("hidden width must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LinearFit {
    pub transform: Transformation,
    /// `‖X_T W − X_S‖²_F` at the solution.
    pub residual: f64,
}

#[derive(Debug, Clone)]
pub struct ResidualFit {
    pub transform: Transformation,
    /// Mean squared error after each accepted epoch, starting with the initial value.
    pub loss_curve: Vec<f64>,
}

impl ResidualFit {
    pub fn initial_loss(&self) -> f64 {
        self.loss_curve[0]
    }

    pub fn final_loss(&self) -> f64 {
        *self.loss_curve.last().unwrap()
    }
}

fn check_pair(t: &PooledActivations, s: &PooledActivations) -> Result<()> {
    if t.matrix().shape() != s.matrix().shape() {
        return shape_err(format!(
            "teacher features are {:?}, student {:?}",
            t.matrix().shape(),
            s.matrix().shape()
        ));
    }
    Ok(())
}

/// Ridge solution `W = (XᵀX + λI)⁻¹ XᵀY` with `X` teacher and `Y` student features.
pub fn fit_linear_transform(
    pooled_t: &PooledActivations,
    pooled_s: &PooledActivations,
    cfg: &FitConfig,
) -> Result<LinearFit> {
    cfg.validate()?;
    check_pair(pooled_t, pooled_s)?;
    let x = pooled_t.matrix();
    let y = pooled_s.matrix();
    let mut gram = x.t_matmul(x)?;
    for i in 0..gram.rows() {
        gram[(i, i)] += cfg.ridge_lambda;
    }
    let l = cholesky(&gram, 1e-12).map_err(|e| match e {
        KcdError::SingularSystem(msg) => KcdError::SingularSystem(format!(
            "{msg}; teacher Gram matrix is rank deficient, use ridge_lambda > 0"
        )),
        other => other,
    })?;
    let w = cholesky_solve(&l, &x.t_matmul(y)?)?;
    let residual = x.matmul(&w)?.sub(y)?.frobenius_sq();
    let c = w.rows();
    let transform = Transformation::new(
        TransformKind::Linear(w),
        c,
        Provenance { metric: Some("mse".into()), strategy: Strategy::LearnedFc.to_string(), source_hashes: vec![], seed: None },
    )?;
    Ok(LinearFit { transform, residual })
}

/// Gradients of the residual block parameters.
#[derive(Debug, Clone)]
pub struct ResidualGrad {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

/// Mean squared error of `block(x)` against `y` and its gradient.
pub fn residual_loss_and_grad(block: &ResidualBlock, x: &Matrix, y: &Matrix) -> Result<(f64, ResidualGrad)> {
    let (b, c) = x.shape();
    if y.shape() != (b, c) {
        return shape_err("residual fit target shape differs from input");
    }
    let mut pre = x.matmul(&block.w1)?;
    for r in 0..b {
        for (v, bias) in pre.row_mut(r).iter_mut().zip(&block.b1) {
            *v += bias;
        }
    }
    let act = pre.map(|v| v.max(0.0));
    let mut out = act.matmul(&block.w2)?;
    for r in 0..b {
        for ((v, bias), xv) in out.row_mut(r).iter_mut().zip(&block.b2).zip(x.row(r)) {
            *v += bias + xv;
        }
    }
    let diff = out.sub(y)?;
    let n = (b * c) as f64;
    let loss = diff.frobenius_sq() / n;

    let d_out = diff.map(|v| 2.0 * v / n);
    let w2 = act.t_matmul(&d_out)?;
    let b2 = (0..c).map(|j| (0..b).map(|r| d_out[(r, j)]).sum()).collect();
    let mut d_pre = d_out.matmul_t(&block.w2)?;
    for r in 0..b {
        for (g, p) in d_pre.row_mut(r).iter_mut().zip(pre.row(r)) {
            if *p <= 0.0 {
                *g = 0.0;
            }
        }
    }
    let w1 = x.t_matmul(&d_pre)?;
    let b1 = (0..d_pre.cols()).map(|j| (0..b).map(|r| d_pre[(r, j)]).sum()).collect();
    Ok((loss, ResidualGrad { w1, b1, w2, b2 }))
}

fn step(block: &ResidualBlock, g: &ResidualGrad, lr: f64) -> ResidualBlock {
    let upd_m = |m: &Matrix, gm: &Matrix| {
        let mut out = m.clone();
        for (v, d) in out.as_mut_slice().iter_mut().zip(gm.as_slice()) {
            *v -= lr * d;
        }
        out
    };
    let upd_v = |v: &[f64], gv: &[f64]| v.iter().zip(gv).map(|(a, d)| a - lr * d).collect();
    ResidualBlock {
        w1: upd_m(&block.w1, &g.w1),
        b1: upd_v(&block.b1, &g.b1),
        w2: upd_m(&block.w2, &g.w2),
        b2: upd_v(&block.b2, &g.b2),
    }
}

/// Initial residual block: identity map with a small random first layer.
pub fn init_residual_block(c: usize, hidden: usize, seed: u64) -> ResidualBlock {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 0.01).unwrap();
    ResidualBlock {
        w1: Matrix::from_fn(c, hidden, |_, _| normal.sample(&mut rng)),
        b1: vec![0.0; hidden],
        w2: Matrix::zeros(hidden, c),
        b2: vec![0.0; c],
    }
}

/// Full-batch gradient descent on MSE. A step that would raise the loss is
/// rejected and the learning rate halved, so the loss curve never increases.
pub fn fit_residual_transform(
    pooled_t: &PooledActivations,
    pooled_s: &PooledActivations,
    cfg: &FitConfig,
) -> Result<ResidualFit> {
    cfg.validate()?;
    check_pair(pooled_t, pooled_s)?;
    if pooled_t.batch() < 2 {
        return Err(KcdError::InsufficientSamples("residual fit needs at least two samples".into()));
    }
    let x = pooled_t.matrix();
    let y = pooled_s.matrix();
    let c = x.cols();
    let mut block = init_residual_block(c, cfg.hidden.unwrap_or(c), cfg.seed);
    let (mut loss, mut grad) = residual_loss_and_grad(&block, x, y)?;
    let mut curve = vec![loss];
    let mut lr = cfg.lr;
    for epoch in 0..cfg.epochs {
        if loss == 0.0 {
            break;
        }
        loop {
            let trial = step(&block, &grad, lr);
            let (trial_loss, trial_grad) = residual_loss_and_grad(&trial, x, y)?;
            if !trial_loss.is_finite() {
                return Err(KcdError::Divergence(format!(
                    "non-finite loss at epoch {epoch} with lr {lr:e}"
                )));
            }
            if trial_loss <= loss {
                block = trial;
                loss = trial_loss;
                grad = trial_grad;
                break;
            }
            lr *= 0.5;
            if lr < cfg.lr * 1e-12 {
                break;
            }
        }
        curve.push(loss);
    }
    let transform = Transformation::new(
        TransformKind::Residual(block),
        c,
        Provenance {
            metric: Some("mse".into()),
            strategy: Strategy::LearnedRes.to_string(),
            source_hashes: vec![],
            seed: Some(cfg.seed),
        },
    )?;
    Ok(ResidualFit { transform, loss_curve: curve })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn underdetermined_fit_is_singular() {
        let x = PooledActivations::from_matrix(Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap()).unwrap();
        let cfg = FitConfig { ridge_lambda: 0.0, ..FitConfig::default() };
        assert!(matches!(fit_linear_transform(&x, &x, &cfg), Err(KcdError::SingularSystem(_))));
        // ridge makes it solvable
        assert!(fit_linear_transform(&x, &x, &FitConfig { ridge_lambda: 0.1, ..cfg }).is_ok());
    }

    #[test]
    fn residual_fit_on_identical_features_stays_at_zero() {
        let x = PooledActivations::from_matrix(Matrix::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]).unwrap()).unwrap();
        let fit = fit_residual_transform(&x, &x, &FitConfig::default()).unwrap();
        assert_eq!(fit.initial_loss(), 0.0);
        assert_eq!(fit.final_loss(), 0.0);
    }

    #[test]
    fn config_validation() {
        let bad = FitConfig { lr: 0.0, ..FitConfig::default() };
        assert!(bad.validate().is_err());
        let bad = FitConfig { ridge_lambda: -1.0, ..FitConfig::default() };
        assert!(bad.validate().is_err());
    }
}
