//! The end-to-end knowledge-consistent distillation run: baseline student,
//! transform derivation, reinitialization from the same seed, distillation.

use serde::{Deserialize, Serialize};

use crate::activations::PooledActivations;
use crate::analysis::{
    channel_overlap, class_average_activations, feature_distance_report, DistanceReport, OverlapReport,
};
use crate::consistency::{consistency_matrix, consistency_score, score_transformed, ConsistencyMetric, MetricKind, DEFAULT_EPSILON};
use crate::error::{KcdError, Result};
use crate::lab::dataset::{make_synthetic_dataset, Dataset, GenSpec};
use crate::lab::model::{accuracy, forward_with_activations, init_model, KdConfig, ModelWeights};
use crate::lab::train::{
    distill_train, train_classifier, DistillSetup, DynamicRefresh, LayerPair, TrainConfig, TrainHistory,
    TransformRef,
};
use crate::learned::{fit_linear_transform, fit_residual_transform, FitConfig};
use crate::matching::{derive_from_matrix, per_class_transforms, Provenance, Strategy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherSpec {
    #[serde(default = "default_teacher_arch")]
    pub arch: String,
    pub seed: u64,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_teacher_arch() -> String {
    "teacher-deep".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudentSpec {
    #[serde(default = "default_student_arch")]
    pub arch: String,
    /// Seed of θ₀, used for the baseline run.
    pub init_seed: u64,
    /// Seed for the distillation run; differs from `init_seed` only in the
    /// mismatched-initialization ablation.
    #[serde(default)]
    pub reinit_seed: Option<u64>,
}

fn default_student_arch() -> String {
    "student-small".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillSpec {
    #[serde(default = "default_metric")]
    pub metric: MetricKind,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    pub strategy: Strategy,
    /// Ω; empty means the last hidden layers of both models with `alpha`.
    #[serde(default)]
    pub layer_pairs: Vec<LayerPair>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub kd: Option<KdConfig>,
    #[serde(default)]
    pub per_class_k: Option<usize>,
    #[serde(default)]
    pub dynamic_refresh_epochs: Option<usize>,
    #[serde(default = "default_record_samples")]
    pub record_samples: usize,
    #[serde(default)]
    pub random_seed: u64,
    #[serde(default)]
    pub fit: FitConfig,
}

fn default_metric() -> MetricKind {
    MetricKind::Correlation
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

fn default_alpha() -> f64 {
    1.0
}

fn default_record_samples() -> usize {
    512
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: GenSpec,
    pub teacher: TeacherSpec,
    pub student: StudentSpec,
    pub train: TrainConfig,
    pub distill: DistillSpec,
    #[serde(default = "default_overlap_k")]
    pub overlap_k: Vec<usize>,
}

fn default_overlap_k() -> Vec<usize> {
    vec![2, 4, 8]
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| KcdError::Config(format!("run config: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// The toy reference run: four classes in 16 dimensions, deep teacher,
    /// one-hidden-layer student, bipartite matching on correlation.
    pub fn reference(seed: u64) -> Self {
        RunConfig {
            dataset: GenSpec {
                classes: 4,
                d: 16,
                clusters_per_class: 10,
                noise: 0.4,
                n: 4000,
                seed,
                center_scale: 0.8,
                test_fraction: 0.25,
                student_train: Some(200),
            },
            teacher: TeacherSpec {
                arch: default_teacher_arch(),
                seed: 1000 + seed,
                train: TrainConfig { seed: 2000 + seed, epochs: 60, ..TrainConfig::default() },
            },
            student: StudentSpec { arch: default_student_arch(), init_seed: 3000 + seed, reinit_seed: None },
            train: TrainConfig { seed: 4000 + seed, ..TrainConfig::default() },
            distill: DistillSpec {
                metric: MetricKind::Correlation,
                epsilon: DEFAULT_EPSILON,
                strategy: Strategy::Bipartite,
                layer_pairs: vec![],
                alpha: 0.3,
                kd: None,
                per_class_k: None,
                dynamic_refresh_epochs: None,
                record_samples: 512,
                random_seed: 5000 + seed,
                fit: FitConfig::default(),
            },
            overlap_k: default_overlap_k(),
        }
    }

    fn metric(&self) -> Result<ConsistencyMetric> {
        ConsistencyMetric::new(self.distill.metric, self.distill.epsilon)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaReport {
    /// Γ of the untransformed pairing (sum over partitions when per-class).
    pub identity: f64,
    pub transformed: f64,
    /// `(identity, transformed)` per class partition, when per-class.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_partition: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformSummary {
    pub kind: String,
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub map: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub partition_maps: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub consistency_split: String,
    pub distance_split: String,
    pub overlap_split: String,
    pub tool_version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub init_mismatch: bool,
    pub student_init_seed: u64,
    pub student_distill_seed: u64,
    pub teacher_test_acc: f64,
    pub baseline: TrainHistory,
    pub baseline_test_acc: f64,
    pub gamma: GammaReport,
    pub transform: TransformSummary,
    /// Teacher vs baseline student on the test split, before and after
    /// transforming the teacher features.
    pub pair_distance_identity: DistanceReport,
    pub pair_distance_transformed: DistanceReport,
    /// Top-k overlap of class profiles (training split), teacher vs baseline student.
    pub overlap_identity: OverlapReport,
    pub overlap_transformed: OverlapReport,
    pub distilled: TrainHistory,
    pub distilled_test_acc: f64,
    /// Transformed teacher vs distilled student on the test split.
    pub distilled_distance: DistanceReport,
    pub metadata: RunMetadata,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// Per-epoch curves of both student runs.
    pub fn curves_csv(&self) -> String {
        let mut out = String::from("run,epoch,lr,train_total,train_cls,train_condis,train_kd,train_acc,test_loss,test_acc\n");
        for (name, h) in [("baseline", &self.baseline), ("distilled", &self.distilled)] {
            for e in &h.epochs {
                out.push_str(&format!(
                    "{name},{},{},{},{},{},{},{},{},{}\n",
                    e.epoch, e.lr, e.train.total, e.train.l_cls, e.train.l_condis, e.train.l_kd, e.train_acc, e.test_loss, e.test_acc
                ));
            }
        }
        out
    }
}

/// Resolve Ω, defaulting to the last hidden layer of each model.
pub fn resolve_pairs(cfg: &DistillSpec, teacher: &ModelWeights, student: &ModelWeights) -> Vec<LayerPair> {
    if cfg.layer_pairs.is_empty() {
        vec![LayerPair {
            teacher_layer: teacher.hidden_count() - 1,
            student_layer: student.hidden_count() - 1,
            alpha: cfg.alpha,
        }]
    } else {
        cfg.layer_pairs.clone()
    }
}

/// Intermediate products of the first half of the run, before reinitialization.
#[derive(Debug, Clone)]
pub struct DerivedTransform {
    pub transform: TransformRef,
    pub gamma: GammaReport,
    pub summary: TransformSummary,
}

pub fn train_teacher(data: &Dataset, spec: &TeacherSpec) -> Result<ModelWeights> {
    let init = init_model(&spec.arch, data.input_dim(), data.classes(), spec.seed)?;
    Ok(train_classifier(&init, data, &spec.train)?.0)
}

/// Compute `M` between teacher and trained student on the training split and
/// derive the transform the config asks for.
pub fn derive_transform(
    cfg: &RunConfig,
    teacher: &ModelWeights,
    student: &ModelWeights,
    data: &Dataset,
) -> Result<DerivedTransform> {
    let metric = cfg.metric()?;
    let pair = resolve_pairs(&cfg.distill, teacher, student)[0];
    let (x, labels) = data.train_split();
    let t_acts = forward_with_activations(teacher, &x)?.pooled(pair.teacher_layer)?;
    let s_acts = forward_with_activations(student, &x)?.pooled(pair.student_layer)?;
    let c = t_acts.channels();
    let strategy = cfg.distill.strategy;

    if let Some(k) = cfg.distill.per_class_k {
        let set = per_class_transforms(&t_acts, &s_acts, &labels, k, metric, strategy)?;
        let mut per_partition = Vec::with_capacity(k);
        for (p, t) in set.transforms.iter().enumerate() {
            let rows: Vec<usize> = labels
                .iter()
                .enumerate()
                .filter(|(_, l)| set.class_to_partition[l] == p)
                .map(|(r, _)| r)
                .collect();
            let m = consistency_matrix(&t_acts.select_rows(&rows), &s_acts.select_rows(&rows), metric)?;
            per_partition.push((consistency_score(&m, None)?, consistency_score(&m, Some(t))?));
        }
        let gamma = GammaReport {
            identity: per_partition.iter().map(|p| p.0).sum(),
            transformed: per_partition.iter().map(|p| p.1).sum(),
            per_partition,
        };
        let summary = TransformSummary {
            kind: format!("per_class_{}", set.transforms[0].kind().name()),
            provenance: set.transforms[0].provenance.clone(),
            map: None,
            partition_maps: set.transforms.iter().filter_map(|t| t.index_map()).collect(),
        };
        return Ok(DerivedTransform { transform: TransformRef::PerClass(set), gamma, summary });
    }

    let m = consistency_matrix(&t_acts, &s_acts, metric)?;
    let transform = match strategy {
        Strategy::LearnedFc => fit_linear_transform(&t_acts, &s_acts, &cfg.distill.fit)?.transform,
        Strategy::LearnedRes => fit_residual_transform(&t_acts, &s_acts, &cfg.distill.fit)?.transform,
        _ => derive_from_matrix(&m, strategy, cfg.distill.random_seed)?,
    };
    debug_assert_eq!(transform.channels(), c);
    let gamma = GammaReport {
        identity: consistency_score(&m, None)?,
        transformed: score_transformed(&t_acts, &s_acts, metric, &transform)?,
        per_partition: vec![],
    };
    let summary = TransformSummary {
        kind: transform.kind().name().to_string(),
        provenance: transform.provenance.clone(),
        map: transform.index_map(),
        partition_maps: vec![],
    };
    let transform = if strategy == Strategy::Identity { TransformRef::None } else { TransformRef::Single(transform) };
    Ok(DerivedTransform { transform, gamma, summary })
}

fn transformed_teacher(
    teacher_acts: &PooledActivations,
    labels: &[i64],
    transform: &TransformRef,
) -> Result<PooledActivations> {
    match transform {
        TransformRef::None => Ok(teacher_acts.clone()),
        TransformRef::Single(t) => t.apply(teacher_acts),
        TransformRef::PerClass(set) => {
            let mut m = teacher_acts.matrix().clone();
            for (r, l) in labels.iter().enumerate() {
                let t = set
                    .for_label(*l)
                    .ok_or_else(|| KcdError::Partition(format!("label {l} has no partition")))?;
                let row = PooledActivations::from_matrix(teacher_acts.matrix().select_rows(&[r]))?;
                m.row_mut(r).copy_from_slice(t.apply(&row)?.matrix().row(0));
            }
            PooledActivations::from_matrix(m)
        }
    }
}

/// Everything up to and including the baseline student (lines 1-3 of the
/// procedure). Independent of the transform strategy.
#[derive(Debug, Clone)]
pub struct TrainedPair {
    /// Dataset as the student sees it.
    pub data: Dataset,
    pub teacher: ModelWeights,
    pub teacher_test_acc: f64,
    pub theta0: ModelWeights,
    pub baseline: ModelWeights,
    pub baseline_hist: TrainHistory,
    pub baseline_test_acc: f64,
}

pub fn train_pair(cfg: &RunConfig) -> Result<TrainedPair> {
    let data = make_synthetic_dataset(&cfg.dataset)?;
    let teacher = train_teacher(&data, &cfg.teacher)?;
    let (x_test, y_test) = data.test_split();
    let teacher_test_acc = accuracy(&teacher, &x_test, &y_test)?;
    let data = data.student_view();
    let theta0 = init_model(&cfg.student.arch, data.input_dim(), data.classes(), cfg.student.init_seed)?;
    let (baseline, baseline_hist) = train_classifier(&theta0, &data, &cfg.train)?;
    let baseline_test_acc = accuracy(&baseline, &x_test, &y_test)?;
    Ok(TrainedPair { data, teacher, teacher_test_acc, theta0, baseline, baseline_hist, baseline_test_acc })
}

/// Run the whole procedure for one configuration.
pub fn run_algorithm1(cfg: &RunConfig) -> Result<RunReport> {
    run_from_pair(cfg, &train_pair(cfg)?)
}

/// Report plus the models and transform behind it.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: RunReport,
    pub distilled: ModelWeights,
    pub transform: TransformRef,
}

/// Derive the transform, reinitialize and distill, reusing a trained pair
/// built from the same dataset, teacher, student and training settings.
pub fn run_from_pair(cfg: &RunConfig, pair_state: &TrainedPair) -> Result<RunReport> {
    Ok(run_outcome(cfg, pair_state)?.report)
}

pub fn run_outcome(cfg: &RunConfig, pair_state: &TrainedPair) -> Result<RunOutcome> {
    let TrainedPair { data, teacher, teacher_test_acc, theta0, baseline, baseline_hist, baseline_test_acc } =
        pair_state;
    let (x_test, y_test) = data.test_split();
    let derived = derive_transform(cfg, teacher, baseline, data)?;
    let pairs = resolve_pairs(&cfg.distill, teacher, baseline);
    let pair = pairs[0];

    // diagnostics on the trained pair
    let t_test = forward_with_activations(teacher, &x_test)?.pooled(pair.teacher_layer)?;
    let s_test = forward_with_activations(baseline, &x_test)?.pooled(pair.student_layer)?;
    let pair_distance_identity = feature_distance_report(&t_test, &s_test)?;
    let pair_distance_transformed =
        feature_distance_report(&transformed_teacher(&t_test, &y_test, &derived.transform)?, &s_test)?;

    let (x_train, y_train) = data.train_split();
    let t_train = forward_with_activations(teacher, &x_train)?.pooled(pair.teacher_layer)?;
    let s_train = forward_with_activations(baseline, &x_train)?.pooled(pair.student_layer)?;
    let prof_s = class_average_activations(&s_train, &y_train)?;
    let prof_t = class_average_activations(&t_train, &y_train)?;
    let prof_tt = class_average_activations(&transformed_teacher(&t_train, &y_train, &derived.transform)?, &y_train)?;
    let ks: Vec<usize> = cfg.overlap_k.iter().copied().filter(|&k| k >= 1 && k <= t_train.channels()).collect();
    let overlap_identity = channel_overlap(&prof_t, &prof_s, &ks)?;
    let overlap_transformed = channel_overlap(&prof_tt, &prof_s, &ks)?;

    // reinitialize from θ₀ (or a different seed for the ablation) and distill
    let distill_seed = cfg.student.reinit_seed.unwrap_or(cfg.student.init_seed);
    let init_mismatch = distill_seed != cfg.student.init_seed;
    let student0 = if init_mismatch {
        init_model(&cfg.student.arch, data.input_dim(), data.classes(), distill_seed)?
    } else {
        theta0.clone()
    };
    let metric = cfg.metric()?;
    let setup = DistillSetup {
        pairs,
        kd: cfg.distill.kd,
        transform: derived.transform.clone(),
        dynamic: cfg.distill.dynamic_refresh_epochs.map(|every| DynamicRefresh {
            every_epochs: every,
            metric,
            strategy: cfg.distill.strategy,
            record_samples: cfg.distill.record_samples,
        }),
    };
    let (distilled, distilled_hist) = distill_train(&student0, Some(teacher), data, &cfg.train, &setup)?;
    let distilled_test_acc = accuracy(&distilled, &x_test, &y_test)?;
    let d_test = forward_with_activations(&distilled, &x_test)?.pooled(pair.student_layer)?;
    let distilled_distance =
        feature_distance_report(&transformed_teacher(&t_test, &y_test, &derived.transform)?, &d_test)?;

    let report = RunReport {
        config: cfg.clone(),
        init_mismatch,
        student_init_seed: cfg.student.init_seed,
        student_distill_seed: distill_seed,
        teacher_test_acc: *teacher_test_acc,
        baseline: baseline_hist.clone(),
        baseline_test_acc: *baseline_test_acc,
        gamma: derived.gamma,
        transform: derived.summary,
        pair_distance_identity,
        pair_distance_transformed,
        overlap_identity,
        overlap_transformed,
        distilled: distilled_hist,
        distilled_test_acc,
        distilled_distance,
        metadata: RunMetadata {
            consistency_split: "train".into(),
            distance_split: "test".into(),
            overlap_split: "train".into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
        },
    };
    Ok(RunOutcome { report, distilled, transform: derived.transform })
}
