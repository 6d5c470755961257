//! A plain ReLU multilayer perceptron with hand-written backpropagation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::activations::PooledActivations;
use crate::error::{shape_err, KcdError, Result};
use crate::linalg::Matrix;

/// Width of the hidden layer that teacher and student share for distillation.
pub const PAIRED_WIDTH: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `fan_in × fan_out`
    pub w: Matrix,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelWeights {
    pub arch_tag: String,
    pub init_seed: u64,
    pub layers: Vec<Dense>,
}

/// Hidden widths for an architecture tag.
///
/// `student-small` has one hidden layer, `teacher-deep` three, both ending in
/// a [`PAIRED_WIDTH`] layer. `mlp:a,b,...` spells the widths out.
pub fn hidden_widths(arch_tag: &str) -> Result<Vec<usize>> {
    match arch_tag {
        "student-small" => Ok(vec![PAIRED_WIDTH]),
        "student-wide" => Ok(vec![64, PAIRED_WIDTH]),
        "teacher-deep" => Ok(vec![64, 64, PAIRED_WIDTH]),
        "linear" => Ok(vec![]),
        other => {
            let spec = other
                .strip_prefix("mlp:")
                .ok_or_else(|| KcdError::Config(format!("unknown architecture '{other}'")))?;
            spec.split(',')
                .map(|s| match s.trim().parse::<usize>() {
                    Ok(w) if w > 0 => Ok(w),
                    _ => Err(KcdError::Config(format!("bad layer width '{s}' in '{other}'"))),
                })
                .collect()
        }
    }
}

/// Gaussian weights scaled by `1/√fan_in`, zero biases.
pub fn init_model(arch_tag: &str, input_dim: usize, classes: usize, seed: u64) -> Result<ModelWeights> {
    if input_dim == 0 || classes == 0 {
        return Err(KcdError::Config("input_dim and classes must be positive".into()));
    }
    let mut widths = vec![input_dim];
    widths.extend(hidden_widths(arch_tag)?);
    widths.push(classes);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = widths
        .windows(2)
        .map(|w| {
            let scale = 1.0 / (w[0] as f64).sqrt();
            Dense {
                w: Matrix::from_fn(w[0], w[1], |_, _| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    scale * z
                }),
                b: vec![0.0; w[1]],
            }
        })
        .collect();
    Ok(ModelWeights { arch_tag: arch_tag.to_string(), init_seed: seed, layers })
}

impl ModelWeights {
    pub fn input_dim(&self) -> usize {
        self.layers[0].w.rows()
    }

    pub fn classes(&self) -> usize {
        self.layers.last().unwrap().w.cols()
    }

    pub fn hidden_count(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn hidden_width(&self, layer: usize) -> usize {
        self.layers[layer].w.cols()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.as_slice().len() + l.b.len()).sum()
    }

    /// Flatten parameters layer by layer, weights before biases.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.w.as_slice());
            out.extend_from_slice(&l.b);
        }
        out
    }

    pub fn set_flat_params(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.param_count());
        let mut off = 0;
        for l in &mut self.layers {
            let n = l.w.as_slice().len();
            l.w.as_mut_slice().copy_from_slice(&p[off..off + n]);
            off += n;
            let nb = l.b.len();
            l.b.copy_from_slice(&p[off..off + nb]);
            off += nb;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(|l| l.w.all_finite() && l.b.iter().all(|v| v.is_finite()))
    }

    /// Little-endian bytes of every parameter, for exact comparisons and hashing.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.flat_params().iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Forward {
    pub logits: Matrix,
    /// Post-ReLU output of every hidden layer, `b × width`.
    pub hidden: Vec<Matrix>,
}

impl Forward {
    pub fn pooled(&self, layer: usize) -> Result<PooledActivations> {
        PooledActivations::from_matrix(self.hidden[layer].clone())
    }
}

fn affine(x: &Matrix, layer: &Dense) -> Result<Matrix> {
    let mut z = x.matmul(&layer.w)?;
    for r in 0..z.rows() {
        for (v, b) in z.row_mut(r).iter_mut().zip(&layer.b) {
            *v += b;
        }
    }
    Ok(z)
}

pub fn forward_with_activations(model: &ModelWeights, batch: &Matrix) -> Result<Forward> {
    if batch.cols() != model.input_dim() {
        return shape_err(format!(
            "batch has width {}, model expects {}",
            batch.cols(),
            model.input_dim()
        ));
    }
    let mut hidden = Vec::with_capacity(model.hidden_count());
    let mut cur = batch.clone();
    for layer in &model.layers[..model.hidden_count()] {
        cur = affine(&cur, layer)?.map(|v| v.max(0.0));
        hidden.push(cur.clone());
    }
    let logits = affine(&cur, model.layers.last().unwrap())?;
    Ok(Forward { logits, hidden })
}

pub fn softmax_rows(z: &Matrix, temperature: f64) -> Matrix {
    let mut out = z.clone();
    for r in 0..z.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = ((*v - max) / temperature).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

fn log_softmax_row(row: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = row.iter().map(|v| v / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scaled.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    scaled.iter().map(|v| v - lse).collect()
}

pub fn accuracy(model: &ModelWeights, x: &Matrix, labels: &[i64]) -> Result<f64> {
    let logits = forward_with_activations(model, x)?.logits;
    let hits = labels
        .iter()
        .enumerate()
        .filter(|(r, &y)| {
            let row = logits.row(*r);
            let mut best = 0;
            for (k, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = k;
                }
            }
            best as i64 == y
        })
        .count();
    Ok(hits as f64 / labels.len().max(1) as f64)
}

/// Mean cross-entropy of `logits` against integer labels.
pub fn cross_entropy(logits: &Matrix, labels: &[i64]) -> f64 {
    let b = logits.rows();
    let total: f64 = (0..b)
        .map(|r| -log_softmax_row(logits.row(r), 1.0)[labels[r] as usize])
        .sum();
    total / b as f64
}

/// Hinton-style soft-label loss `T² · mean_b KL(softmax(z_T/T) ‖ softmax(z_S/T))`.
pub fn kd_loss(student_logits: &Matrix, teacher_logits: &Matrix, temperature: f64) -> f64 {
    let b = student_logits.rows();
    let total: f64 = (0..b)
        .map(|r| {
            let lp = log_softmax_row(teacher_logits.row(r), temperature);
            let lq = log_softmax_row(student_logits.row(r), temperature);
            lp.iter().zip(&lq).map(|(p, q)| p.exp() * (p - q)).sum::<f64>()
        })
        .sum();
    temperature * temperature * total / b as f64
}

/// Soft-label settings: temperature `T` and loss weight `λ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KdConfig {
    pub temperature: f64,
    pub weight: f64,
}

/// Feature supervision for one student hidden layer.
#[derive(Debug, Clone)]
pub struct FeatureTarget {
    pub student_layer: usize,
    pub alpha: f64,
    /// Already-transformed teacher features, `b × width`.
    pub target: Matrix,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub l_cls: f64,
    pub l_condis: f64,
    pub l_kd: f64,
    pub total: f64,
}

/// Loss terms of one batch given precomputed forward passes.
///
/// `l_condis` is `Σ α · mean((target − student)²)` over the supervised
/// layers; `l_kd` is weighted by `λ` when enabled.
pub fn distill_losses(
    student: &Forward,
    targets: &[FeatureTarget],
    teacher_logits: Option<&Matrix>,
    labels: &[i64],
    kd: Option<&KdConfig>,
) -> Result<LossParts> {
    let l_cls = cross_entropy(&student.logits, labels);
    let mut l_condis = 0.0;
    for t in targets {
        let acts = student
            .hidden
            .get(t.student_layer)
            .ok_or_else(|| KcdError::Config(format!("student has no hidden layer {}", t.student_layer)))?;
        if acts.shape() != t.target.shape() {
            return shape_err(format!(
                "student layer {} is {:?}, target is {:?}",
                t.student_layer,
                acts.shape(),
                t.target.shape()
            ));
        }
        if t.alpha != 0.0 {
            l_condis += t.alpha * acts.sub(&t.target)?.frobenius_sq() / acts.as_slice().len() as f64;
        }
    }
    let l_kd = match (kd, teacher_logits) {
        (Some(cfg), Some(tl)) if cfg.weight != 0.0 => cfg.weight * kd_loss(&student.logits, tl, cfg.temperature),
        (Some(cfg), None) if cfg.weight != 0.0 => {
            return Err(KcdError::Config("soft-label loss needs teacher logits".into()))
        }
        _ => 0.0,
    };
    Ok(LossParts { l_cls, l_condis, l_kd, total: l_cls + l_condis + l_kd })
}

/// Loss and parameter gradient (same layout as [`ModelWeights::flat_params`])
/// for one batch.
pub fn loss_and_grad(
    model: &ModelWeights,
    x: &Matrix,
    labels: &[i64],
    targets: &[FeatureTarget],
    teacher_logits: Option<&Matrix>,
    kd: Option<&KdConfig>,
) -> Result<(LossParts, Vec<Dense>)> {
    let fwd = forward_with_activations(model, x)?;
    let parts = distill_losses(&fwd, targets, teacher_logits, labels, kd)?;
    let b = x.rows();
    let inv_b = 1.0 / b as f64;

    // dL/dlogits
    let mut dz = softmax_rows(&fwd.logits, 1.0);
    for (r, &y) in labels.iter().enumerate() {
        dz[(r, y as usize)] -= 1.0;
    }
    dz = dz.map(|v| v * inv_b);
    if let (Some(cfg), Some(tl)) = (kd, teacher_logits) {
        if cfg.weight != 0.0 {
            let ps = softmax_rows(&fwd.logits, cfg.temperature);
            let pt = softmax_rows(tl, cfg.temperature);
            let k = cfg.weight * cfg.temperature * inv_b;
            for ((g, s), t) in dz.as_mut_slice().iter_mut().zip(ps.as_slice()).zip(pt.as_slice()) {
                *g += k * (s - t);
            }
        }
    }

    let mut grads: Vec<Dense> = Vec::with_capacity(model.layers.len());
    for l in (0..model.layers.len()).rev() {
        let input = if l == 0 { x } else { &fwd.hidden[l - 1] };
        let dw = input.t_matmul(&dz)?;
        let db = (0..dz.cols()).map(|j| (0..b).map(|r| dz[(r, j)]).sum()).collect();
        grads.push(Dense { w: dw, b: db });
        if l == 0 {
            break;
        }
        let mut da = dz.matmul_t(&model.layers[l].w)?;
        let h = l - 1;
        for t in targets.iter().filter(|t| t.student_layer == h && t.alpha != 0.0) {
            let n = da.as_slice().len() as f64;
            let acts = &fwd.hidden[h];
            for ((g, a), tv) in da.as_mut_slice().iter_mut().zip(acts.as_slice()).zip(t.target.as_slice()) {
                *g += 2.0 * t.alpha * (a - tv) / n;
            }
        }
        for (g, a) in da.as_mut_slice().iter_mut().zip(fwd.hidden[h].as_slice()) {
            if *a <= 0.0 {
                *g = 0.0;
            }
        }
        dz = da;
    }
    grads.reverse();
    Ok((parts, grads))
}

pub fn flatten_grads(grads: &[Dense]) -> Vec<f64> {
    let mut out = Vec::new();
    for g in grads {
        out.extend_from_slice(g.w.as_slice());
        out.extend_from_slice(&g.b);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arch_tags() {
        assert_eq!(hidden_widths("student-small").unwrap(), vec![PAIRED_WIDTH]);
        assert_eq!(hidden_widths("mlp:8,4").unwrap(), vec![8, 4]);
        assert!(hidden_widths("resnet").is_err());
        assert!(hidden_widths("mlp:8,0").is_err());
    }

    #[test]
    fn init_is_seeded() {
        let a = init_model("teacher-deep", 16, 4, 1).unwrap();
        assert_eq!(a.to_bytes(), init_model("teacher-deep", 16, 4, 1).unwrap().to_bytes());
        assert_ne!(a.to_bytes(), init_model("teacher-deep", 16, 4, 2).unwrap().to_bytes());
        let s = init_model("student-small", 16, 4, 1).unwrap();
        assert_eq!(s.hidden_width(s.hidden_count() - 1), a.hidden_width(a.hidden_count() - 1));
    }

    #[test]
    fn zero_model_gives_uniform_softmax() {
        let mut m = init_model("student-small", 3, 4, 0).unwrap();
        let zeros = vec![0.0; m.param_count()];
        m.set_flat_params(&zeros);
        let x = Matrix::from_rows(&[vec![1.0, -2.0, 3.0]]).unwrap();
        let f = forward_with_activations(&m, &x).unwrap();
        assert!(f.logits.as_slice().iter().all(|&v| v == 0.0));
        let p = softmax_rows(&f.logits, 1.0);
        assert!(p.as_slice().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn identity_layer_activation_is_relu() {
        let mut m = init_model("mlp:3", 3, 2, 0).unwrap();
        m.layers[0].w = Matrix::identity(3);
        let x = Matrix::from_rows(&[vec![1.5, -2.0, 0.25]]).unwrap();
        let f = forward_with_activations(&m, &x).unwrap();
        assert_eq!(f.hidden[0].row(0), &[1.5, 0.0, 0.25]);
    }

    #[test]
    fn identical_logits_give_zero_kd() {
        let z = Matrix::from_rows(&[vec![1.0, 2.0, -1.0], vec![0.0, 0.5, 3.0]]).unwrap();
        assert!(kd_loss(&z, &z, 4.0).abs() < 1e-15);
    }

    #[test]
    fn condis_is_zero_when_student_matches_target() {
        let m = init_model("student-small", 4, 3, 7).unwrap();
        let x = Matrix::from_fn(5, 4, |i, j| (i as f64 - j as f64) * 0.3);
        let f = forward_with_activations(&m, &x).unwrap();
        let t = FeatureTarget { student_layer: 0, alpha: 1.0, target: f.hidden[0].clone() };
        let parts = distill_losses(&f, &[t], None, &[0, 1, 2, 0, 1], None).unwrap();
        assert_eq!(parts.l_condis, 0.0);
        assert_eq!(parts.total, parts.l_cls);
    }

    #[test]
    fn mismatched_target_width_is_rejected() {
        let m = init_model("student-small", 4, 3, 7).unwrap();
        let x = Matrix::zeros(2, 4);
        let f = forward_with_activations(&m, &x).unwrap();
        let t = FeatureTarget { student_layer: 0, alpha: 1.0, target: Matrix::zeros(2, 3) };
        assert!(matches!(distill_losses(&f, &[t], None, &[0, 1], None), Err(KcdError::ShapeMismatch(_))));
        assert!(forward_with_activations(&m, &Matrix::zeros(2, 5)).is_err());
    }
}
