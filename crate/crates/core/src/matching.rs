//! Channel transformations of teacher features and the matchers that derive
//! them from a consistency matrix.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::activations::{read_matrix_npy, write_matrix_npy, ActivationTensor, PooledActivations};
use crate::consistency::{consistency_matrix, ConsistencyMatrix, ConsistencyMetric};
use crate::error::{shape_err, KcdError, Result};
use crate::hungarian;
use crate::linalg::Matrix;

/// A residual block `y = x + relu(x·W₁ + b₁)·W₂ + b₂` acting on row vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

impl ResidualBlock {
    pub fn channels(&self) -> usize {
        self.w1.rows()
    }

    pub fn hidden(&self) -> usize {
        self.w1.cols()
    }

    fn validate(&self) -> Result<()> {
        let (c, h) = self.w1.shape();
        if self.w2.shape() != (h, c) || self.b1.len() != h || self.b2.len() != c {
            return shape_err("residual block weights do not chain c -> hidden -> c");
        }
        let finite = self.w1.all_finite()
            && self.w2.all_finite()
            && self.b1.iter().chain(&self.b2).all(|v| v.is_finite());
        if !finite {
            return Err(KcdError::InvalidValue("residual block has non-finite weights".into()));
        }
        Ok(())
    }

    /// Apply to every row of `x`.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut hidden = x.matmul(&self.w1)?;
        for r in 0..hidden.rows() {
            for (v, b) in hidden.row_mut(r).iter_mut().zip(&self.b1) {
                *v = (*v + b).max(0.0);
            }
        }
        let mut y = hidden.matmul(&self.w2)?;
        for r in 0..y.rows() {
            for ((v, b), xv) in y.row_mut(r).iter_mut().zip(&self.b2).zip(x.row(r)) {
                *v += b + xv;
            }
        }
        Ok(y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TransformKind {
    Identity,
    /// `map[j]` is the teacher channel feeding student channel `j`; a bijection.
    Permutation(Vec<usize>),
    /// Like a permutation but repeats are allowed (1-to-N).
    IndexMap(Vec<usize>),
    /// Pooled rows are right-multiplied by this `c × c` matrix.
    Linear(Matrix),
    Residual(ResidualBlock),
}

impl TransformKind {
    pub fn name(&self) -> &'static str {
        match self {
            TransformKind::Identity => "identity",
            TransformKind::Permutation(_) => "permutation",
            TransformKind::IndexMap(_) => "index_map",
            TransformKind::Linear(_) => "linear",
            TransformKind::Residual(_) => "residual",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub metric: Option<String>,
    pub strategy: String,
    #[serde(default)]
    pub source_hashes: Vec<String>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transformation {
    kind: TransformKind,
    channels: usize,
    pub provenance: Provenance,
}

impl Transformation {
    pub fn new(kind: TransformKind, channels: usize, provenance: Provenance) -> Result<Self> {
        if channels == 0 {
            return shape_err("a transformation needs at least one channel");
        }
        match &kind {
            TransformKind::Identity => {}
            TransformKind::Permutation(map) => {
                check_map(map, channels)?;
                let mut seen = vec![false; channels];
                for &i in map {
                    if std::mem::replace(&mut seen[i], true) {
                        return Err(KcdError::InvalidValue(format!(
                            "permutation repeats teacher channel {i}"
                        )));
                    }
                }
            }
            TransformKind::IndexMap(map) => check_map(map, channels)?,
            TransformKind::Linear(w) => {
                if w.shape() != (channels, channels) {
                    return shape_err(format!("linear weights must be {channels}x{channels}"));
                }
                if !w.all_finite() {
                    return Err(KcdError::InvalidValue("linear weights are not finite".into()));
                }
            }
            TransformKind::Residual(block) => {
                block.validate()?;
                if block.channels() != channels {
                    return shape_err("residual block channel count mismatch");
                }
            }
        }
        Ok(Transformation { kind, channels, provenance })
    }

    pub fn kind(&self) -> &TransformKind {
        &self.kind
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// The teacher-channel lookup table, if this is an index-map style transform.
    pub fn index_map(&self) -> Option<Vec<usize>> {
        match &self.kind {
            TransformKind::Identity => Some((0..self.channels).collect()),
            TransformKind::Permutation(m) | TransformKind::IndexMap(m) => Some(m.clone()),
            _ => None,
        }
    }

    /// Inverse of a permutation (identity inverts to itself).
    pub fn inverse(&self) -> Result<Transformation> {
        let kind = match &self.kind {
            TransformKind::Identity => TransformKind::Identity,
            TransformKind::Permutation(map) => {
                let mut inv = vec![0; map.len()];
                for (j, &i) in map.iter().enumerate() {
                    inv[i] = j;
                }
                TransformKind::Permutation(inv)
            }
            other => {
                return Err(KcdError::Config(format!("{} transforms have no exact inverse", other.name())))
            }
        };
        Transformation::new(kind, self.channels, self.provenance.clone())
    }

    pub fn apply<X: ChannelFeatures>(&self, x: &X) -> Result<X> {
        apply_transform(self, x)
    }

    /// Write the record as JSON at `path`; weight matrices go to sibling NPY files.
    pub fn save(&self, path: &Path) -> Result<()> {
        let stem = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let sibling = |suffix: &str| -> PathBuf { path.with_file_name(format!("{stem}.{suffix}.npy")) };
        let rel = |p: &Path| p.file_name().unwrap().to_string_lossy().into_owned();

        let mut weights = BTreeMap::new();
        let mut map = None;
        match &self.kind {
            TransformKind::Identity => {}
            TransformKind::Permutation(m) | TransformKind::IndexMap(m) => map = Some(m.clone()),
            TransformKind::Linear(w) => {
                let p = sibling("w");
                write_matrix_npy(w, &p)?;
                weights.insert("w".to_string(), rel(&p));
            }
            TransformKind::Residual(block) => {
                let entries = [
                    ("w1", block.w1.clone()),
                    ("b1", Matrix::from_vec(1, block.b1.len(), block.b1.clone())?),
                    ("w2", block.w2.clone()),
                    ("b2", Matrix::from_vec(1, block.b2.len(), block.b2.clone())?),
                ];
                for (name, m) in entries {
                    let p = sibling(name);
                    write_matrix_npy(&m, &p)?;
                    weights.insert(name.to_string(), rel(&p));
                }
            }
        }
        let record = TransformRecord {
            kind: self.kind.name().to_string(),
            channels: self.channels,
            map,
            weights,
            provenance: self.provenance.clone(),
        };
        std::fs::write(path, serde_json::to_string_pretty(&record).unwrap() + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Transformation> {
        let text = std::fs::read_to_string(path)?;
        let record: TransformRecord = serde_json::from_str(&text)
            .map_err(|e| KcdError::Format(format!("transformation record: {e}")))?;
        let dir = path.parent().unwrap_or(Path::new("."));
        let weight = |name: &str| -> Result<Matrix> {
            let file = record
                .weights
                .get(name)
                .ok_or_else(|| KcdError::Format(format!("record lacks weight '{name}'")))?;
            read_matrix_npy(&dir.join(file))
        };
        let need_map = || {
            record.map.clone().ok_or_else(|| KcdError::Format("record lacks 'map'".into()))
        };
        let kind = match record.kind.as_str() {
            "identity" => TransformKind::Identity,
            "permutation" => TransformKind::Permutation(need_map()?),
            "index_map" => TransformKind::IndexMap(need_map()?),
            "linear" => TransformKind::Linear(weight("w")?),
            "residual" => TransformKind::Residual(ResidualBlock {
                w1: weight("w1")?,
                b1: weight("b1")?.into_vec(),
                w2: weight("w2")?,
                b2: weight("b2")?.into_vec(),
            }),
            other => return Err(KcdError::Format(format!("unknown transformation kind '{other}'"))),
        };
        Transformation::new(kind, record.channels, record.provenance)
    }
}

fn check_map(map: &[usize], channels: usize) -> Result<()> {
    if map.len() != channels {
        return shape_err(format!("map has {} entries for {channels} channels", map.len()));
    }
    if let Some(&bad) = map.iter().find(|&&i| i >= channels) {
        return Err(KcdError::InvalidValue(format!("teacher channel {bad} out of range")));
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct TransformRecord {
    kind: String,
    channels: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    map: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    weights: BTreeMap<String, String>,
    provenance: Provenance,
}

/// Values a [`Transformation`] can act on along the channel axis.
pub trait ChannelFeatures: Sized {
    fn channel_count(&self) -> usize;
    fn gather_channels(&self, map: &[usize]) -> Self;
    fn map_rows(&self, f: &dyn Fn(&Matrix) -> Result<Matrix>) -> Result<Self>;
}

impl ChannelFeatures for PooledActivations {
    fn channel_count(&self) -> usize {
        self.channels()
    }

    fn gather_channels(&self, map: &[usize]) -> Self {
        let m = self.matrix().select_columns(map);
        PooledActivations::new(m, self.source_hw()).expect("gather keeps values finite")
    }

    fn map_rows(&self, f: &dyn Fn(&Matrix) -> Result<Matrix>) -> Result<Self> {
        PooledActivations::new(f(self.matrix())?, self.source_hw())
    }
}

impl ChannelFeatures for ActivationTensor {
    fn channel_count(&self) -> usize {
        self.channels()
    }

    fn gather_channels(&self, map: &[usize]) -> Self {
        let mut out = self.clone();
        for b in 0..self.batch() {
            for (j, &i) in map.iter().enumerate() {
                out.plane_mut(b, j).copy_from_slice(self.plane(b, i));
            }
        }
        out
    }

    /// Channel mixing at each spatial position (a 1×1 convolution).
    fn map_rows(&self, f: &dyn Fn(&Matrix) -> Result<Matrix>) -> Result<Self> {
        let [b, c, h, w] = self.shape();
        let hw = h * w;
        // rows = (sample, position), columns = channels
        let mut rows = Matrix::zeros(b * hw, c);
        for s in 0..b {
            for ch in 0..c {
                for (p, &v) in self.plane(s, ch).iter().enumerate() {
                    rows[(s * hw + p, ch)] = v;
                }
            }
        }
        let mapped = f(&rows)?;
        let mut data = vec![0.0; self.data().len()];
        for s in 0..b {
            for ch in 0..c {
                for p in 0..hw {
                    data[(s * c + ch) * hw + p] = mapped[(s * hw + p, ch)];
                }
            }
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(KcdError::InvalidValue("transform produced non-finite activations".into()));
        }
        Ok(self.with_data(data))
    }
}

pub fn apply_transform<X: ChannelFeatures>(t: &Transformation, x: &X) -> Result<X> {
    if t.channels != x.channel_count() {
        return shape_err(format!(
            "transform targets {} channels, input has {}",
            t.channels,
            x.channel_count()
        ));
    }
    match &t.kind {
        TransformKind::Identity => x.map_rows(&|m| Ok(m.clone())),
        TransformKind::Permutation(map) | TransformKind::IndexMap(map) => Ok(x.gather_channels(map)),
        TransformKind::Linear(w) => x.map_rows(&|m| m.matmul(w)),
        TransformKind::Residual(block) => x.map_rows(&|m| block.forward(m)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Identity,
    Random,
    Greedy,
    Bipartite,
    LearnedFc,
    LearnedRes,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Identity => "identity",
            Strategy::Random => "random",
            Strategy::Greedy => "greedy",
            Strategy::Bipartite => "bipartite",
            Strategy::LearnedFc => "learned_fc",
            Strategy::LearnedRes => "learned_res",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = KcdError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "identity" => Strategy::Identity,
            "random" => Strategy::Random,
            "greedy" => Strategy::Greedy,
            "bipartite" => Strategy::Bipartite,
            "learned_fc" | "fc" => Strategy::LearnedFc,
            "learned_res" | "res" => Strategy::LearnedRes,
            other => return Err(KcdError::Config(format!("unknown strategy '{other}'"))),
        })
    }
}

fn matrix_provenance(m: &ConsistencyMatrix, strategy: Strategy) -> Provenance {
    Provenance {
        metric: Some(m.metric.kind.to_string()),
        strategy: strategy.to_string(),
        source_hashes: vec![],
        seed: None,
    }
}

fn check_square(m: &ConsistencyMatrix) -> Result<usize> {
    let (r, c) = m.m.shape();
    if r != c {
        return shape_err(format!("consistency matrix is {r}x{c}, not square"));
    }
    if r == 0 {
        return shape_err("empty consistency matrix");
    }
    if let Some(v) = m.m.as_slice().iter().find(|v| !v.is_finite()) {
        return Err(KcdError::InvalidValue(format!("consistency entry {v}")));
    }
    Ok(r)
}

/// For each student channel take the most consistent teacher channel
/// (column argmax, lowest index on ties).
pub fn match_greedy(m: &ConsistencyMatrix) -> Result<Transformation> {
    let c = check_square(m)?;
    let map = (0..c)
        .map(|j| {
            let mut best = 0;
            for i in 1..c {
                if m.m[(i, j)] > m.m[(best, j)] {
                    best = i;
                }
            }
            best
        })
        .collect();
    Transformation::new(TransformKind::IndexMap(map), c, matrix_provenance(m, Strategy::Greedy))
}

/// One-to-one channel matching maximizing Γ, via Kuhn–Munkres.
pub fn match_bipartite(m: &ConsistencyMatrix) -> Result<Transformation> {
    let c = check_square(m)?;
    // rows of the assignment are student channels, columns teacher channels
    let assignment = hungarian::solve_max(&m.m.transpose())?;
    Transformation::new(
        TransformKind::Permutation(assignment.cols_for_row),
        c,
        matrix_provenance(m, Strategy::Bipartite),
    )
}

pub fn match_random(c: usize, seed: u64) -> Result<Transformation> {
    let mut map: Vec<usize> = (0..c).collect();
    map.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Transformation::new(
        TransformKind::Permutation(map),
        c,
        Provenance { metric: None, strategy: Strategy::Random.to_string(), source_hashes: vec![], seed: Some(seed) },
    )
}

pub fn identity_transform(c: usize) -> Result<Transformation> {
    Transformation::new(
        TransformKind::Identity,
        c,
        Provenance { strategy: Strategy::Identity.to_string(), ..Provenance::default() },
    )
}

/// Derive a transform from `M` with one of the matrix-based strategies.
pub fn derive_from_matrix(m: &ConsistencyMatrix, strategy: Strategy, seed: u64) -> Result<Transformation> {
    match strategy {
        Strategy::Identity => identity_transform(m.channels()),
        Strategy::Random => match_random(m.channels(), seed),
        Strategy::Greedy => match_greedy(m),
        Strategy::Bipartite => match_bipartite(m),
        Strategy::LearnedFc | Strategy::LearnedRes => Err(KcdError::Config(format!(
            "strategy '{strategy}' is fit on features, not derived from a matrix"
        ))),
    }
}

/// One transform per contiguous block of class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PerClassTransformSet {
    pub k_partitions: usize,
    pub class_to_partition: BTreeMap<i64, usize>,
    pub transforms: Vec<Transformation>,
}

impl PerClassTransformSet {
    pub fn for_label(&self, label: i64) -> Option<&Transformation> {
        self.class_to_partition.get(&label).map(|&p| &self.transforms[p])
    }

    pub fn channels(&self) -> usize {
        self.transforms[0].channels()
    }
}

/// Split the sorted distinct labels into `k` equal contiguous blocks.
pub fn partition_classes(labels: &[i64], k: usize) -> Result<BTreeMap<i64, usize>> {
    let classes: BTreeSet<i64> = labels.iter().copied().collect();
    if k == 0 || classes.is_empty() || !classes.len().is_multiple_of(k) {
        return Err(KcdError::Partition(format!(
            "{} classes cannot be split into {k} equal partitions",
            classes.len()
        )));
    }
    let block = classes.len() / k;
    Ok(classes.into_iter().enumerate().map(|(r, label)| (label, r / block)).collect())
}

pub fn per_class_transforms(
    pooled_t: &PooledActivations,
    pooled_s: &PooledActivations,
    labels: &[i64],
    k: usize,
    metric: ConsistencyMetric,
    strategy: Strategy,
) -> Result<PerClassTransformSet> {
    if !matches!(strategy, Strategy::Greedy | Strategy::Bipartite) {
        return Err(KcdError::Config("per-class transforms use greedy or bipartite".into()));
    }
    if labels.len() != pooled_t.batch() || labels.len() != pooled_s.batch() {
        return shape_err("labels are not aligned with the pooled features");
    }
    let class_to_partition = partition_classes(labels, k)?;
    let transforms = (0..k)
        .map(|p| {
            let rows: Vec<usize> = labels
                .iter()
                .enumerate()
                .filter(|(_, l)| class_to_partition[l] == p)
                .map(|(r, _)| r)
                .collect();
            let m = consistency_matrix(&pooled_t.select_rows(&rows), &pooled_s.select_rows(&rows), metric)?;
            derive_from_matrix(&m, strategy, 0)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PerClassTransformSet { k_partitions: k, class_to_partition, transforms })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::consistency::MetricKind;

    fn cm(rows: &[Vec<f64>]) -> ConsistencyMatrix {
        ConsistencyMatrix { m: Matrix::from_rows(rows).unwrap(), metric: MetricKind::Correlation.into(), sample_count: 4 }
    }

    #[test]
    fn greedy_takes_column_argmax() {
        let t = match_greedy(&cm(&[vec![0.9, 0.8], vec![0.1, 0.7]])).unwrap();
        assert_eq!(t.kind(), &TransformKind::IndexMap(vec![0, 0]));
    }

    #[test]
    fn greedy_on_identity_is_identity_map() {
        let m = cm(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
        assert_eq!(match_greedy(&m).unwrap().index_map().unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn bipartite_small_cases() {
        let swap = match_bipartite(&cm(&[vec![0.0, 1.0], vec![1.0, 0.0]])).unwrap();
        assert_eq!(swap.kind(), &TransformKind::Permutation(vec![1, 0]));
        let diag = match_bipartite(&cm(&[vec![2.0, 1.0], vec![1.0, 2.0]])).unwrap();
        assert_eq!(diag.kind(), &TransformKind::Permutation(vec![0, 1]));
    }

    #[test]
    fn rejects_non_square_and_nan() {
        let rect = ConsistencyMatrix { m: Matrix::zeros(2, 3), metric: MetricKind::L2.into(), sample_count: 2 };
        assert!(matches!(match_greedy(&rect), Err(KcdError::ShapeMismatch(_))));
        assert!(matches!(match_bipartite(&rect), Err(KcdError::ShapeMismatch(_))));
        let nan = cm(&[vec![f64::NAN, 0.0], vec![0.0, 1.0]]);
        assert!(matches!(match_bipartite(&nan), Err(KcdError::InvalidValue(_))));
    }

    #[test]
    fn random_is_seeded() {
        assert_eq!(match_random(1, 9).unwrap().index_map().unwrap(), vec![0]);
        assert_eq!(match_random(10, 3).unwrap(), match_random(10, 3).unwrap());
        assert_ne!(match_random(10, 3).unwrap().index_map(), match_random(10, 4).unwrap().index_map());
    }

    #[test]
    fn apply_swaps_and_duplicates() {
        let x = PooledActivations::from_matrix(Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap()).unwrap();
        let swap = Transformation::new(TransformKind::Permutation(vec![1, 0]), 2, Provenance::default()).unwrap();
        assert_eq!(swap.apply(&x).unwrap().matrix().row(0), &[2.0, 1.0]);
        let dup = Transformation::new(TransformKind::IndexMap(vec![0, 0]), 2, Provenance::default()).unwrap();
        assert_eq!(dup.apply(&x).unwrap().matrix().row(1), &[3.0, 3.0]);
        let bad = identity_transform(3).unwrap();
        assert!(matches!(bad.apply(&x), Err(KcdError::ShapeMismatch(_))));
    }

    #[test]
    fn permutation_validation() {
        assert!(Transformation::new(TransformKind::Permutation(vec![0, 0]), 2, Provenance::default()).is_err());
        assert!(Transformation::new(TransformKind::IndexMap(vec![0, 2]), 2, Provenance::default()).is_err());
    }

    #[test]
    fn partitions_are_contiguous_blocks() {
        let labels = [3, 1, 0, 2, 5, 4];
        let p = partition_classes(&labels, 3).unwrap();
        assert_eq!(p.values().copied().collect::<Vec<_>>(), vec![0, 0, 1, 1, 2, 2]);
        assert!(matches!(partition_classes(&[0, 1, 2, 3], 3), Err(KcdError::Partition(_))));
    }
}
