use rand::{Rng, SeedableRng};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{KcdError, Result};
use crate::linalg::Matrix;

/// Parameters of the Gaussian-cluster classification task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenSpec {
    pub classes: usize,
    pub d: usize,
    pub clusters_per_class: usize,
    /// Standard deviation of the isotropic noise around each cluster centre.
    pub noise: f64,
    pub n: usize,
    pub seed: u64,
    /// Standard deviation of the cluster centres themselves.
    #[serde(default = "default_center_scale")]
    pub center_scale: f64,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    /// Size of the training subset the student sees; the teacher always
    /// trains on the whole training split. `None` means the whole split.
    #[serde(default)]
    pub student_train: Option<usize>,
}

fn default_center_scale() -> f64 {
    1.0
}

fn default_test_fraction() -> f64 {
    0.25
}

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(KcdError::Config(format!("dataset spec: {m}")));
        if self.classes < 2 {
            return bad("classes must be >= 2");
        }
        if self.d == 0 || self.clusters_per_class == 0 {
            return bad("d and clusters_per_class must be >= 1");
        }
        if self.n < self.classes {
            return bad("n must be >= classes");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) || !(self.center_scale > 0.0 && self.center_scale.is_finite()) {
            return bad("noise must be >= 0 and center_scale > 0");
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return bad("test_fraction must be in [0, 1)");
        }
        if self.student_train == Some(0) {
            return bad("student_train must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Matrix,
    pub labels: Vec<i64>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    /// Subset of `train` used for the student, sorted.
    pub student_train: Vec<usize>,
    pub centers: Matrix,
    pub spec: GenSpec,
}

impl Dataset {
    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn split(&self, idx: &[usize]) -> (Matrix, Vec<i64>) {
        (self.inputs.select_rows(idx), idx.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn train_split(&self) -> (Matrix, Vec<i64>) {
        self.split(&self.train)
    }

    pub fn test_split(&self) -> (Matrix, Vec<i64>) {
        self.split(&self.test)
    }

    /// The same dataset with the training split narrowed to the student's subset.
    pub fn student_view(&self) -> Dataset {
        Dataset { train: self.student_train.clone(), ..self.clone() }
    }
}

/// Sample `n` points, labels cycling through the classes, each drawn around
/// a random one of its class's cluster centres.
pub fn make_synthetic_dataset(spec: &GenSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_centers = spec.classes * spec.clusters_per_class;
    let centers = Matrix::from_fn(n_centers, spec.d, |_, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        spec.center_scale * z
    });
    let mut inputs = Matrix::zeros(spec.n, spec.d);
    let mut labels = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let class = i % spec.classes;
        let cluster = rng.random_range(0..spec.clusters_per_class);
        let center = centers.row(class * spec.clusters_per_class + cluster);
        for (x, c) in inputs.row_mut(i).iter_mut().zip(center) {
            let z: f64 = StandardNormal.sample(&mut rng);
            *x = c + spec.noise * z;
        }
        labels.push(class as i64);
    }
    let mut order: Vec<usize> = (0..spec.n).collect();
    order.shuffle(&mut rng);
    let n_test = (spec.n as f64 * spec.test_fraction).round() as usize;
    let mut test = order[..n_test].to_vec();
    let mut train = order[n_test..].to_vec();
    let mut student_train = match spec.student_train {
        Some(k) if k < train.len() => train[..k].to_vec(),
        _ => train.clone(),
    };
    test.sort_unstable();
    train.sort_unstable();
    student_train.sort_unstable();
    Ok(Dataset { inputs, labels, train, test, student_train, centers, spec: spec.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> GenSpec {
        GenSpec { classes: 3, d: 4, clusters_per_class: 1, noise: 0.0, n: 60, seed: 5, center_scale: 1.0, test_fraction: 0.25, student_train: None }
    }

    #[test]
    fn deterministic_and_disjoint() {
        let a = make_synthetic_dataset(&spec()).unwrap();
        let b = make_synthetic_dataset(&spec()).unwrap();
        assert_eq!(a, b);
        let mut all: Vec<usize> = a.train.iter().chain(&a.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..60).collect::<Vec<_>>());
        assert_eq!(a.test.len(), 15);
    }

    #[test]
    fn noiseless_single_cluster_is_nearest_centroid_separable() {
        let ds = make_synthetic_dataset(&spec()).unwrap();
        let (x, y) = ds.test_split();
        for (r, &label) in y.iter().enumerate() {
            let nearest = (0..ds.centers.rows())
                .min_by(|&a, &b| {
                    let d = |k: usize| ds.centers.row(k).iter().zip(x.row(r)).map(|(c, v)| (c - v).powi(2)).sum::<f64>();
                    d(a).total_cmp(&d(b))
                })
                .unwrap();
            assert_eq!(nearest as i64, label);
        }
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(make_synthetic_dataset(&GenSpec { classes: 1, ..spec() }).is_err());
        assert!(make_synthetic_dataset(&GenSpec { n: 2, ..spec() }).is_err());
        assert!(make_synthetic_dataset(&GenSpec { d: 0, ..spec() }).is_err());
    }
}
