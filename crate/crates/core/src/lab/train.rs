//! Mini-batch SGD for plain training and knowledge-consistent distillation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::activations::PooledActivations;
use crate::consistency::{consistency_matrix, ConsistencyMetric};
use crate::error::{KcdError, Result};
use crate::lab::dataset::Dataset;
use crate::lab::model::{
    accuracy, cross_entropy, forward_with_activations, loss_and_grad, FeatureTarget, KdConfig, LossParts,
    ModelWeights,
};
use crate::linalg::Matrix;
use crate::matching::{derive_from_matrix, PerClassTransformSet, Strategy, Transformation};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Multiply the learning rate by `lr_decay_gamma` every this many epochs.
    pub lr_decay_every: Option<usize>,
    pub lr_decay_gamma: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 30, lr: 0.1, lr_decay_every: Some(10), lr_decay_gamma: 0.5, batch_size: 64, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(KcdError::Config(format!("lr must be >= 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(KcdError::Config("batch_size must be positive".into()));
        }
        if self.lr_decay_every == Some(0) || !(self.lr_decay_gamma > 0.0) {
            return Err(KcdError::Config("lr decay needs every >= 1 and gamma > 0".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_decay_every {
            Some(every) => self.lr * self.lr_decay_gamma.powi((epoch / every) as i32),
            None => self.lr,
        }
    }
}

/// One supervised (teacher hidden layer, student hidden layer) pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerPair {
    pub teacher_layer: usize,
    pub student_layer: usize,
    pub alpha: f64,
}

/// Which transform the teacher's paired features go through.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum TransformRef {
    #[default]
    None,
    Single(Transformation),
    PerClass(PerClassTransformSet),
}

/// Periodic re-derivation of the transform from the student being distilled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DynamicRefresh {
    pub every_epochs: usize,
    pub metric: ConsistencyMetric,
    pub strategy: Strategy,
    pub record_samples: usize,
}

#[derive(Debug, Clone, Default)]
pub struct DistillSetup {
    pub pairs: Vec<LayerPair>,
    pub kd: Option<KdConfig>,
    pub transform: TransformRef,
    pub dynamic: Option<DynamicRefresh>,
}

impl DistillSetup {
    fn validate(&self, teacher: Option<&ModelWeights>, student: &ModelWeights) -> Result<()> {
        if let Some(kd) = &self.kd {
            if !(kd.temperature > 0.0) || !(kd.weight >= 0.0) {
                return Err(KcdError::Config("KD needs T > 0 and weight >= 0".into()));
            }
        }
        let active = self.pairs.iter().any(|p| p.alpha != 0.0) || self.kd.is_some_and(|k| k.weight != 0.0);
        if active && teacher.is_none() {
            return Err(KcdError::Config("distillation terms need a teacher".into()));
        }
        for p in &self.pairs {
            if !(p.alpha >= 0.0) {
                return Err(KcdError::Config(format!("alpha must be >= 0, got {}", p.alpha)));
            }
            if p.student_layer >= student.hidden_count() {
                return Err(KcdError::Config(format!("student has no hidden layer {}", p.student_layer)));
            }
            if let Some(t) = teacher {
                if p.teacher_layer >= t.hidden_count() {
                    return Err(KcdError::Config(format!("teacher has no hidden layer {}", p.teacher_layer)));
                }
                if t.hidden_width(p.teacher_layer) != student.hidden_width(p.student_layer) {
                    return Err(KcdError::ShapeMismatch(format!(
                        "teacher layer {} has width {}, student layer {} has {}",
                        p.teacher_layer,
                        t.hidden_width(p.teacher_layer),
                        p.student_layer,
                        student.hidden_width(p.student_layer)
                    )));
                }
            }
        }
        if let Some(d) = &self.dynamic {
            if d.every_epochs == 0 || d.record_samples < 2 {
                return Err(KcdError::Config("dynamic refresh needs every >= 1 and >= 2 recorded samples".into()));
            }
            if !matches!(d.strategy, Strategy::Greedy | Strategy::Bipartite | Strategy::Identity | Strategy::Random) {
                return Err(KcdError::Config("dynamic refresh derives transforms from a matrix".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Batch-size weighted means of the training loss terms over the epoch.
    pub train: LossParts,
    pub train_acc: f64,
    pub test_loss: f64,
    pub test_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefreshRecord {
    pub epoch: usize,
    pub gamma: f64,
    pub map: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub refreshes: Vec<RefreshRecord>,
}

impl TrainHistory {
    pub fn final_test_acc(&self) -> f64 {
        self.epochs.last().map_or(0.0, |e| e.test_acc)
    }
}

fn transform_targets(
    raw: &Matrix,
    labels: &[i64],
    transform: &TransformRef,
) -> Result<Matrix> {
    let pooled = PooledActivations::from_matrix(raw.clone())?;
    match transform {
        TransformRef::None => Ok(raw.clone()),
        TransformRef::Single(t) => Ok(t.apply(&pooled)?.into_matrix()),
        TransformRef::PerClass(set) => {
            let mut out = Matrix::zeros(raw.rows(), raw.cols());
            for p in 0..set.k_partitions {
                let rows: Vec<usize> = labels
                    .iter()
                    .enumerate()
                    .filter(|(_, l)| set.class_to_partition.get(l) == Some(&p))
                    .map(|(r, _)| r)
                    .collect();
                if rows.is_empty() {
                    continue;
                }
                let moved = set.transforms[p].apply(&pooled.select_rows(&rows))?;
                for (k, &r) in rows.iter().enumerate() {
                    out.row_mut(r).copy_from_slice(moved.matrix().row(k));
                }
            }
            if let Some(l) = labels.iter().find(|l| !set.class_to_partition.contains_key(l)) {
                return Err(KcdError::Partition(format!("label {l} has no partition")));
            }
            Ok(out)
        }
    }
}

/// Train `student_init` on the training split with cross-entropy plus any
/// feature and soft-label terms in `setup`. The teacher is never updated.
pub fn distill_train(
    student_init: &ModelWeights,
    teacher: Option<&ModelWeights>,
    data: &Dataset,
    cfg: &TrainConfig,
    setup: &DistillSetup,
) -> Result<(ModelWeights, TrainHistory)> {
    cfg.validate()?;
    setup.validate(teacher, student_init)?;
    let (x_train, y_train) = data.train_split();
    let (x_test, y_test) = data.test_split();
    if x_train.rows() == 0 {
        return Err(KcdError::Config("empty training split".into()));
    }

    let active_pairs: Vec<LayerPair> = setup.pairs.iter().copied().filter(|p| p.alpha != 0.0).collect();
    let kd = setup.kd.filter(|k| k.weight != 0.0);
    let teacher_fwd = match teacher {
        Some(t) if !active_pairs.is_empty() || kd.is_some() => Some(forward_with_activations(t, &x_train)?),
        _ => None,
    };
    let mut transform = setup.transform.clone();
    let build_targets = |transform: &TransformRef| -> Result<Vec<Matrix>> {
        let tf = teacher_fwd.as_ref();
        active_pairs
            .iter()
            .map(|p| transform_targets(&tf.unwrap().hidden[p.teacher_layer], &y_train, transform))
            .collect()
    };
    let mut targets = build_targets(&transform)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let record_rows: Vec<usize> = match &setup.dynamic {
        Some(d) => {
            let mut idx: Vec<usize> = (0..x_train.rows()).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed0fd15c));
            idx.truncate(d.record_samples.min(idx.len()));
            idx.sort_unstable();
            idx
        }
        None => vec![],
    };

    let mut model = student_init.clone();
    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..x_train.rows()).collect();
    for epoch in 0..cfg.epochs {
        if let (Some(d), Some(tf)) = (&setup.dynamic, teacher_fwd.as_ref()) {
            if epoch > 0 && epoch % d.every_epochs == 0 && !active_pairs.is_empty() {
                let pair = active_pairs[0];
                let rec_x = x_train.select_rows(&record_rows);
                let s_acts = forward_with_activations(&model, &rec_x)?.pooled(pair.student_layer)?;
                let t_acts = PooledActivations::from_matrix(tf.hidden[pair.teacher_layer].select_rows(&record_rows))?;
                let m = consistency_matrix(&t_acts, &s_acts, d.metric)?;
                let t = derive_from_matrix(&m, d.strategy, cfg.seed.wrapping_add(epoch as u64))?;
                let map = t.index_map().unwrap_or_default();
                let gamma = map.iter().enumerate().map(|(j, &i)| m.m[(i, j)]).sum();
                history.refreshes.push(RefreshRecord { epoch, gamma, map });
                transform = TransformRef::Single(t);
                targets = build_targets(&transform)?;
            }
        }

        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut sums = LossParts::default();
        for chunk in order.chunks(cfg.batch_size) {
            let xb = x_train.select_rows(chunk);
            let yb: Vec<i64> = chunk.iter().map(|&i| y_train[i]).collect();
            let feature_targets: Vec<FeatureTarget> = active_pairs
                .iter()
                .zip(&targets)
                .map(|(p, t)| FeatureTarget { student_layer: p.student_layer, alpha: p.alpha, target: t.select_rows(chunk) })
                .collect();
            let tl = match (&kd, &teacher_fwd) {
                (Some(_), Some(tf)) => Some(tf.logits.select_rows(chunk)),
                _ => None,
            };
            let (parts, grads) = loss_and_grad(&model, &xb, &yb, &feature_targets, tl.as_ref(), kd.as_ref())?;
            if !parts.total.is_finite() {
                return Err(KcdError::Divergence(format!("non-finite loss in epoch {epoch}")));
            }
            let w = chunk.len() as f64;
            sums.l_cls += w * parts.l_cls;
            sums.l_condis += w * parts.l_condis;
            sums.l_kd += w * parts.l_kd;
            sums.total += w * parts.total;
            if lr != 0.0 {
                for (layer, g) in model.layers.iter_mut().zip(&grads) {
                    for (p, d) in layer.w.as_mut_slice().iter_mut().zip(g.w.as_slice()) {
                        *p -= lr * d;
                    }
                    for (p, d) in layer.b.iter_mut().zip(&g.b) {
                        *p -= lr * d;
                    }
                }
            }
        }
        if !model.all_finite() {
            return Err(KcdError::Divergence(format!("non-finite weights after epoch {epoch}")));
        }
        let n = x_train.rows() as f64;
        let train = LossParts {
            l_cls: sums.l_cls / n,
            l_condis: sums.l_condis / n,
            l_kd: sums.l_kd / n,
            total: sums.total / n,
        };
        let (test_loss, test_acc) = if x_test.rows() > 0 {
            let logits = forward_with_activations(&model, &x_test)?.logits;
            (cross_entropy(&logits, &y_test), accuracy(&model, &x_test, &y_test)?)
        } else {
            (0.0, 0.0)
        };
        history.epochs.push(EpochRecord {
            epoch,
            lr,
            train,
            train_acc: accuracy(&model, &x_train, &y_train)?,
            test_loss,
            test_acc,
        });
    }
    Ok((model, history))
}

/// Cross-entropy only training.
pub fn train_classifier(
    init: &ModelWeights,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<(ModelWeights, TrainHistory)> {
    distill_train(init, None, data, cfg, &DistillSetup::default())
}
