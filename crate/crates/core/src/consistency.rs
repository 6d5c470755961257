//! Teacher/student channel consistency matrices and the consistency score Γ.
//!
//! `M[i][j]` scores teacher channel `i` against student channel `j` over the
//! batch; larger always means more consistent.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activations::{read_matrix_npy, write_matrix_npy, PooledActivations};
use crate::error::{shape_err, KcdError, Result};
use crate::linalg::Matrix;
use crate::matching::{TransformKind, Transformation};

pub const DEFAULT_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    L1,
    L2,
    Correlation,
    Cosine,
    KlDivergence,
}

impl MetricKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MetricKind::L1 => "l1",
            MetricKind::L2 => "l2",
            MetricKind::Correlation => "correlation",
            MetricKind::Cosine => "cosine",
            MetricKind::KlDivergence => "kl_divergence",
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MetricKind {
    type Err = KcdError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "l1" => MetricKind::L1,
            "l2" => MetricKind::L2,
            "correlation" | "corr" | "pearson" => MetricKind::Correlation,
            "cosine" => MetricKind::Cosine,
            "kl" | "kl_divergence" | "kl-divergence" => MetricKind::KlDivergence,
            other => return Err(KcdError::Config(format!("unknown metric '{other}'"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyMetric {
    pub kind: MetricKind,
    pub epsilon: f64,
}

impl ConsistencyMetric {
    pub fn new(kind: MetricKind, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(KcdError::Config(format!("epsilon must be positive, got {epsilon}")));
        }
        Ok(ConsistencyMetric { kind, epsilon })
    }
}

impl From<MetricKind> for ConsistencyMetric {
    fn from(kind: MetricKind) -> Self {
        ConsistencyMetric { kind, epsilon: DEFAULT_EPSILON }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyMatrix {
    pub m: Matrix,
    pub metric: ConsistencyMetric,
    pub sample_count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MatrixSidecar {
    metric: MetricKind,
    epsilon: f64,
    sample_count: usize,
    channels: usize,
}

impl ConsistencyMatrix {
    pub fn channels(&self) -> usize {
        self.m.rows()
    }

    /// Write the matrix to `path` (NPY) and its metadata to `path` + `.json`.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_matrix_npy(&self.m, path)?;
        let side = MatrixSidecar {
            metric: self.metric.kind,
            epsilon: self.metric.epsilon,
            sample_count: self.sample_count,
            channels: self.m.rows(),
        };
        std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&side).unwrap() + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m = read_matrix_npy(path)?;
        let text = std::fs::read_to_string(sidecar_path(path))?;
        let side: MatrixSidecar =
            serde_json::from_str(&text).map_err(|e| KcdError::Format(format!("matrix sidecar: {e}")))?;
        if side.channels != m.rows() || m.rows() != m.cols() {
            return shape_err("sidecar channel count disagrees with the stored matrix");
        }
        Ok(ConsistencyMatrix {
            m,
            metric: ConsistencyMetric::new(side.metric, side.epsilon)?,
            sample_count: side.sample_count,
        })
    }
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

/// Column statistics prepared once per side so each `(i, j)` pair is cheap.
struct Prepared {
    columns: Vec<Vec<f64>>,
}

fn prepare(x: &Matrix, kind: MetricKind) -> Prepared {
    let b = x.rows() as f64;
    let columns = (0..x.cols())
        .map(|j| {
            let col = x.column(j);
            match kind {
                MetricKind::Correlation => {
                    // b·x − Σx: the mean-centred column scaled by b, which
                    // leaves the Pearson ratio unchanged
                    let sum: f64 = col.iter().sum();
                    col.iter().map(|v| b * v - sum).collect()
                }
                MetricKind::KlDivergence => log_softmax(&col),
                _ => col,
            }
        })
        .collect();
    Prepared { columns }
}

pub(crate) fn log_softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    v.iter().map(|x| x - lse).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn pair_score(t: &[f64], s: &[f64], t_sq: f64, s_sq: f64, metric: &ConsistencyMetric) -> f64 {
    let eps = metric.epsilon;
    match metric.kind {
        MetricKind::L1 => 1.0 / (t.iter().zip(s).map(|(a, b)| (a - b).abs()).sum::<f64>() + eps),
        MetricKind::L2 => {
            1.0 / (t.iter().zip(s).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() + eps)
        }
        MetricKind::Correlation => {
            if t_sq == 0.0 || s_sq == 0.0 {
                0.0
            } else {
                (dot(t, s) / (t_sq * s_sq).sqrt()).clamp(-1.0, 1.0)
            }
        }
        MetricKind::Cosine => (dot(t, s) / (t_sq.sqrt() * s_sq.sqrt() + eps)).clamp(-1.0, 1.0),
        MetricKind::KlDivergence => {
            // inputs are log-softmaxes over the batch
            let kl: f64 = t.iter().zip(s).map(|(lp, lq)| lp.exp() * (lp - lq)).sum();
            -kl.max(0.0)
        }
    }
}

/// Build the `c × c` consistency matrix between pooled teacher and student features.
pub fn consistency_matrix(
    teacher: &PooledActivations,
    student: &PooledActivations,
    metric: ConsistencyMetric,
) -> Result<ConsistencyMatrix> {
    if teacher.batch() != student.batch() {
        return shape_err(format!(
            "teacher has {} samples, student {}",
            teacher.batch(),
            student.batch()
        ));
    }
    if teacher.channels() != student.channels() {
        return shape_err(format!(
            "teacher has {} channels, student {}",
            teacher.channels(),
            student.channels()
        ));
    }
    if metric.kind == MetricKind::Correlation && teacher.batch() < 2 {
        return Err(KcdError::InsufficientSamples(
            "correlation needs at least two samples".into(),
        ));
    }
    let c = teacher.channels();
    let tp = prepare(teacher.matrix(), metric.kind);
    let sp = prepare(student.matrix(), metric.kind);
    let sq = |cols: &[Vec<f64>]| cols.iter().map(|v| dot(v, v)).collect::<Vec<_>>();
    let (t_sq, s_sq) = (sq(&tp.columns), sq(&sp.columns));

    let rows: Vec<Vec<f64>> = (0..c)
        .into_par_iter()
        .map(|i| {
            (0..c)
                .map(|j| pair_score(&tp.columns[i], &sp.columns[j], t_sq[i], s_sq[j], &metric))
                .collect()
        })
        .collect();
    let m = Matrix::from_rows(&rows)?;
    if !m.all_finite() {
        return Err(KcdError::InvalidValue("consistency matrix has non-finite entries".into()));
    }
    Ok(ConsistencyMatrix { m, metric, sample_count: teacher.batch() })
}

/// Γ: the trace of `M`, or `Σ_j M[map[j], j]` under an index-map transform.
///
/// Linear and residual transforms change the features themselves; use
/// [`score_transformed`] for those.
pub fn consistency_score(m: &ConsistencyMatrix, transform: Option<&Transformation>) -> Result<f64> {
    let c = m.m.rows();
    if m.m.cols() != c {
        return shape_err("consistency matrix must be square");
    }
    let Some(t) = transform else {
        return Ok(m.m.trace());
    };
    if t.channels() != c {
        return shape_err(format!("transform targets {} channels, matrix has {c}", t.channels()));
    }
    match t.kind() {
        TransformKind::Identity => Ok(m.m.trace()),
        TransformKind::Permutation(map) | TransformKind::IndexMap(map) => {
            Ok(map.iter().enumerate().map(|(j, &i)| m.m[(i, j)]).sum())
        }
        TransformKind::Linear(_) | TransformKind::Residual(_) => Err(KcdError::Config(
            "learned transforms need features; use score_transformed".into(),
        )),
    }
}

/// Γ of any transform, recomputing `M` on transformed teacher features when
/// the transform is not an index map.
pub fn score_transformed(
    teacher: &PooledActivations,
    student: &PooledActivations,
    metric: ConsistencyMetric,
    transform: &Transformation,
) -> Result<f64> {
    match transform.kind() {
        TransformKind::Linear(_) | TransformKind::Residual(_) => {
            let moved = transform.apply(teacher)?;
            Ok(consistency_matrix(&moved, student, metric)?.m.trace())
        }
        _ => consistency_score(&consistency_matrix(teacher, student, metric)?, Some(transform)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pooled(cols: &[&[f64]]) -> PooledActivations {
        let b = cols[0].len();
        let m = Matrix::from_fn(b, cols.len(), |i, j| cols[j][i]);
        PooledActivations::from_matrix(m).unwrap()
    }

    #[test]
    fn anti_correlated_pair() {
        let t = pooled(&[&[1.0, 2.0, 3.0]]);
        let s = pooled(&[&[3.0, 2.0, 1.0]]);
        let m = consistency_matrix(&t, &s, MetricKind::Correlation.into()).unwrap();
        assert_eq!(m.m[(0, 0)], -1.0);
    }

    #[test]
    fn worked_correlation_example_is_exact() {
        let t = pooled(&[&[1.0, 0.0, 1.0]]);
        let s = pooled(&[&[0.0, 1.0, 1.0]]);
        let m = consistency_matrix(&t, &s, MetricKind::Correlation.into()).unwrap();
        assert_eq!(m.m[(0, 0)], -0.5);
    }

    #[test]
    fn l2_entry_matches_hand_norm() {
        let t = pooled(&[&[0.0, 0.0]]);
        let s = pooled(&[&[3.0, 4.0]]);
        let m = consistency_matrix(&t, &s, MetricKind::L2.into()).unwrap();
        assert_eq!(m.m[(0, 0)], 1.0 / (5.0 + 1e-8));
        let m1 = consistency_matrix(&t, &s, MetricKind::L1.into()).unwrap();
        assert_eq!(m1.m[(0, 0)], 1.0 / (7.0 + 1e-8));
    }

    #[test]
    fn constant_channel_correlates_to_zero() {
        let t = pooled(&[&[2.0, 2.0, 2.0]]);
        let s = pooled(&[&[1.0, 5.0, 3.0]]);
        let m = consistency_matrix(&t, &s, MetricKind::Correlation.into()).unwrap();
        assert_eq!(m.m[(0, 0)], 0.0);
    }

    #[test]
    fn kl_is_zero_on_identical_and_negative_otherwise() {
        let t = pooled(&[&[0.5, 1.0, -2.0], &[3.0, 0.0, 1.0]]);
        let m = consistency_matrix(&t, &t, MetricKind::KlDivergence.into()).unwrap();
        assert_eq!(m.m[(0, 0)], 0.0);
        assert_eq!(m.m[(1, 1)], 0.0);
        assert!(m.m[(0, 1)] < 0.0 && m.m[(1, 0)] < 0.0);
    }

    #[test]
    fn errors_on_mismatch_and_tiny_batches() {
        let a = pooled(&[&[1.0, 2.0]]);
        let b = pooled(&[&[1.0, 2.0, 3.0]]);
        assert!(matches!(
            consistency_matrix(&a, &b, MetricKind::L2.into()),
            Err(KcdError::ShapeMismatch(_))
        ));
        let two = pooled(&[&[1.0, 2.0], &[0.0, 1.0]]);
        assert!(matches!(
            consistency_matrix(&a, &two, MetricKind::L2.into()),
            Err(KcdError::ShapeMismatch(_))
        ));
        let one = pooled(&[&[1.0]]);
        assert!(matches!(
            consistency_matrix(&one, &one, MetricKind::Correlation.into()),
            Err(KcdError::InsufficientSamples(_))
        ));
        assert!(ConsistencyMetric::new(MetricKind::L2, 0.0).is_err());
    }

    #[test]
    fn score_is_trace_without_transform() {
        let m = ConsistencyMatrix {
            m: Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap(),
            metric: MetricKind::L2.into(),
            sample_count: 2,
        };
        assert_eq!(consistency_score(&m, None).unwrap(), 5.0);
    }
}
