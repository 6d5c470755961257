//! Diagnostics over trained teacher/student pairs: class-average activation
//! profiles, top-k channel overlap, and feature distances.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::activations::PooledActivations;
use crate::consistency::log_softmax;
use crate::error::{shape_err, KcdError, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassActivationProfile {
    /// Class labels in ascending order; row `r` of `means` belongs to `classes[r]`.
    pub classes: Vec<i64>,
    pub means: Matrix,
    pub sample_counts: Vec<usize>,
}

impl ClassActivationProfile {
    pub fn channels(&self) -> usize {
        self.means.cols()
    }

    pub fn class_mean(&self, label: i64) -> Option<&[f64]> {
        self.classes.binary_search(&label).ok().map(|r| self.means.row(r))
    }

    /// Per-class rows as CSV: `class,count,c0,c1,...`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,count");
        for j in 0..self.channels() {
            out.push_str(&format!(",c{j}"));
        }
        out.push('\n');
        for (r, label) in self.classes.iter().enumerate() {
            out.push_str(&format!("{label},{}", self.sample_counts[r]));
            for v in self.means.row(r) {
                out.push_str(&format!(",{v:e}"));
            }
            out.push('\n');
        }
        out
    }
}

pub fn class_average_activations(pooled: &PooledActivations, labels: &[i64]) -> Result<ClassActivationProfile> {
    class_average_with_classes(pooled, labels, None)
}

/// Like [`class_average_activations`] but requires every class in `expected`
/// to be present.
pub fn class_average_with_classes(
    pooled: &PooledActivations,
    labels: &[i64],
    expected: Option<&[i64]>,
) -> Result<ClassActivationProfile> {
    if labels.len() != pooled.batch() {
        return shape_err(format!("{} labels for {} rows", labels.len(), pooled.batch()));
    }
    let c = pooled.channels();
    let mut sums: BTreeMap<i64, (Vec<f64>, usize)> = BTreeMap::new();
    if let Some(classes) = expected {
        for &k in classes {
            sums.insert(k, (vec![0.0; c], 0));
        }
    }
    for (r, &label) in labels.iter().enumerate() {
        let entry = sums.entry(label).or_insert_with(|| (vec![0.0; c], 0));
        if expected.is_some_and(|e| !e.contains(&label)) {
            return Err(KcdError::Config(format!("label {label} is not an expected class")));
        }
        for (acc, v) in entry.0.iter_mut().zip(pooled.matrix().row(r)) {
            *acc += v;
        }
        entry.1 += 1;
    }
    let mut classes = Vec::with_capacity(sums.len());
    let mut rows = Vec::with_capacity(sums.len());
    let mut counts = Vec::with_capacity(sums.len());
    for (label, (sum, n)) in sums {
        if n == 0 {
            return Err(KcdError::EmptyClass(format!("class {label} has no samples")));
        }
        classes.push(label);
        rows.push(sum.into_iter().map(|s| s / n as f64).collect());
        counts.push(n);
    }
    Ok(ClassActivationProfile { classes, means: Matrix::from_rows(&rows)?, sample_counts: counts })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub k_values: Vec<usize>,
    /// Mean overlap across classes, one per entry of `k_values`.
    pub mean_overlap: Vec<f64>,
    pub classes: Vec<i64>,
    /// `per_class[ki][r]` is the ratio for `k_values[ki]` and `classes[r]`.
    pub per_class: Vec<Vec<f64>>,
}

impl OverlapReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,class,overlap\n");
        for (ki, &k) in self.k_values.iter().enumerate() {
            for (r, class) in self.classes.iter().enumerate() {
                out.push_str(&format!("{k},{class},{}\n", self.per_class[ki][r]));
            }
        }
        out
    }
}

/// Channel indices of the `k` largest values, ties to the lowest index.
pub fn top_k_channels(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

pub fn channel_overlap(
    profile_t: &ClassActivationProfile,
    profile_s: &ClassActivationProfile,
    k_values: &[usize],
) -> Result<OverlapReport> {
    if profile_t.classes != profile_s.classes {
        return shape_err("profiles cover different class sets");
    }
    let c = profile_t.channels();
    if profile_s.channels() != c {
        return shape_err("profiles have different channel counts");
    }
    if k_values.is_empty() {
        return Err(KcdError::Config("no k values given".into()));
    }
    if let Some(&bad) = k_values.iter().find(|&&k| k == 0 || k > c) {
        return Err(KcdError::Config(format!("k = {bad} outside 1..={c}")));
    }
    let mut per_class = Vec::with_capacity(k_values.len());
    let mut mean_overlap = Vec::with_capacity(k_values.len());
    for &k in k_values {
        let ratios: Vec<f64> = (0..profile_t.classes.len())
            .map(|r| {
                let mut in_t = vec![false; c];
                for i in top_k_channels(profile_t.means.row(r), k) {
                    in_t[i] = true;
                }
                let shared = top_k_channels(profile_s.means.row(r), k).into_iter().filter(|&i| in_t[i]).count();
                shared as f64 / k as f64
            })
            .collect();
        mean_overlap.push(ratios.iter().sum::<f64>() / ratios.len() as f64);
        per_class.push(ratios);
    }
    Ok(OverlapReport {
        k_values: k_values.to_vec(),
        mean_overlap,
        classes: profile_t.classes.clone(),
        per_class,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceReport {
    pub mean_l2: f64,
    pub mean_kl: f64,
}

/// Mean per-sample Euclidean distance and mean `KL(softmax(t) ‖ softmax(s))`
/// over the channel axis.
pub fn feature_distance_report(acts_t: &PooledActivations, acts_s: &PooledActivations) -> Result<DistanceReport> {
    if acts_t.matrix().shape() != acts_s.matrix().shape() {
        return shape_err(format!(
            "teacher features are {:?}, student {:?}",
            acts_t.matrix().shape(),
            acts_s.matrix().shape()
        ));
    }
    let b = acts_t.batch();
    let (mut l2, mut kl) = (0.0, 0.0);
    for r in 0..b {
        let t = acts_t.matrix().row(r);
        let s = acts_s.matrix().row(r);
        l2 += t.iter().zip(s).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let (lp, lq) = (log_softmax(t), log_softmax(s));
        let row_kl: f64 = lp.iter().zip(&lq).map(|(p, q)| p.exp() * (p - q)).sum();
        kl += row_kl.max(0.0);
    }
    Ok(DistanceReport { mean_l2: l2 / b as f64, mean_kl: kl / b as f64 })
}
