//! Activation tensors, global average pooling and activation manifests.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, KcdError, Result};
use crate::linalg::Matrix;
use crate::npy::{self, Dtype, NpyData};

/// A `b × c × h × w` activation map stored row-major.
///
/// Values are held as `f64` whatever the on-disk dtype; `f32` tensors
/// round-trip exactly because every `f32` is representable as `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTensor {
    shape: [usize; 4],
    dtype: Dtype,
    data: Vec<f64>,
}

impl ActivationTensor {
    pub fn new(shape: [usize; 4], dtype: Dtype, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return shape_err(format!("every dimension must be >= 1, got {shape:?}"));
        }
        if data.len() != shape.iter().product::<usize>() {
            return shape_err(format!(
                "{} values do not fill shape {shape:?}",
                data.len()
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(KcdError::InvalidValue(format!(
                "non-finite activation at flat index {pos}"
            )));
        }
        Ok(ActivationTensor { shape, dtype, data })
    }

    /// Wrap a `b × c` matrix as a tensor with `h = w = 1`.
    pub fn from_matrix(m: &Matrix, dtype: Dtype) -> Result<Self> {
        Self::new([m.rows(), m.cols(), 1, 1], dtype, m.as_slice().to_vec())
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn spatial(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    pub fn dtype(&self) -> Dtype {
        self.dtype
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Spatial slice of one `(sample, channel)` pair.
    pub fn plane(&self, b: usize, c: usize) -> &[f64] {
        let hw = self.spatial();
        let start = (b * self.shape[1] + c) * hw;
        &self.data[start..start + hw]
    }

    pub(crate) fn plane_mut(&mut self, b: usize, c: usize) -> &mut [f64] {
        let hw = self.spatial();
        let start = (b * self.shape[1] + c) * hw;
        &mut self.data[start..start + hw]
    }

    pub(crate) fn with_data(&self, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), self.data.len());
        ActivationTensor { shape: self.shape, dtype: self.dtype, data }
    }

    pub fn select_batch(&self, idx: &[usize]) -> ActivationTensor {
        let per = self.shape[1] * self.spatial();
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend_from_slice(&self.data[i * per..(i + 1) * per]);
        }
        ActivationTensor {
            shape: [idx.len(), self.shape[1], self.shape[2], self.shape[3]],
            dtype: self.dtype,
            data,
        }
    }
}

/// Per-channel global-average-pooled features, a `b × c` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledActivations {
    data: Matrix,
    source_hw: (usize, usize),
}

impl PooledActivations {
    pub fn new(data: Matrix, source_hw: (usize, usize)) -> Result<Self> {
        if data.rows() == 0 || data.cols() == 0 {
            return shape_err("pooled activations need b >= 1 and c >= 1");
        }
        if !data.all_finite() {
            return Err(KcdError::InvalidValue("non-finite pooled activation".into()));
        }
        Ok(PooledActivations { data, source_hw })
    }

    /// Pooled features that did not come from a spatial map.
    pub fn from_matrix(data: Matrix) -> Result<Self> {
        Self::new(data, (1, 1))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.data
    }

    pub fn into_matrix(self) -> Matrix {
        self.data
    }

    pub fn batch(&self) -> usize {
        self.data.rows()
    }

    pub fn channels(&self) -> usize {
        self.data.cols()
    }

    pub fn source_hw(&self) -> (usize, usize) {
        self.source_hw
    }

    pub fn select_rows(&self, idx: &[usize]) -> PooledActivations {
        PooledActivations { data: self.data.select_rows(idx), source_hw: self.source_hw }
    }

    pub fn to_tensor(&self, dtype: Dtype) -> Result<ActivationTensor> {
        ActivationTensor::from_matrix(&self.data, dtype)
    }
}

/// Read a tensor from an NPY file. Arrays with fewer than four dimensions get
/// trailing singleton dimensions.
pub fn read_npy(path: &Path) -> Result<ActivationTensor> {
    let arr = npy::read(path)?;
    let ndim = arr.shape.len();
    if !(2..=4).contains(&ndim) {
        return Err(KcdError::Format(format!(
            "activation arrays need 2 to 4 dimensions, found {ndim}"
        )));
    }
    let mut shape = [1usize; 4];
    shape[..ndim].copy_from_slice(&arr.shape);
    match arr.data {
        NpyData::Float { dtype, values } => ActivationTensor::new(shape, dtype, values),
        NpyData::Int(_) => Err(KcdError::Format(
            "activation arrays must be '<f4' or '<f8'".into(),
        )),
    }
}

/// Write a tensor as a four-dimensional NPY v1.0 array.
pub fn write_npy(tensor: &ActivationTensor, path: &Path) -> Result<()> {
    npy::write_float(path, &tensor.shape, tensor.dtype, &tensor.data)
}

pub fn read_matrix_npy(path: &Path) -> Result<Matrix> {
    let t = read_npy(path)?;
    let [b, c, h, w] = t.shape();
    if h * w != 1 {
        return shape_err(format!("expected a 2-D matrix, found shape {:?}", t.shape()));
    }
    Matrix::from_vec(b, c, t.data)
}

pub fn write_matrix_npy(m: &Matrix, path: &Path) -> Result<()> {
    npy::write_float(path, &[m.rows(), m.cols()], Dtype::F64, m.as_slice())
}

pub fn read_labels(path: &Path) -> Result<Vec<i64>> {
    let arr = npy::read(path)?;
    if arr.shape.len() != 1 {
        return shape_err(format!("labels must be 1-D, found shape {:?}", arr.shape));
    }
    match arr.data {
        NpyData::Int(v) => Ok(v),
        NpyData::Float { .. } => Err(KcdError::Format("labels must be an integer array".into())),
    }
}

pub fn write_labels(labels: &[i64], path: &Path) -> Result<()> {
    npy::write_i64(path, &[labels.len()], labels)
}

pub fn global_average_pool(tensor: &ActivationTensor) -> PooledActivations {
    let [b, c, h, w] = tensor.shape();
    let data = if h * w == 1 {
        Matrix::from_vec(b, c, tensor.data.clone()).expect("shape checked at construction")
    } else {
        let n = (h * w) as f64;
        Matrix::from_fn(b, c, |i, j| tensor.plane(i, j).iter().sum::<f64>() / n)
    };
    PooledActivations { data, source_hw: (h, w) }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub tensor: PathBuf,
    pub labels: PathBuf,
    #[serde(default = "default_split")]
    pub split: String,
    #[serde(default)]
    pub layer: String,
}

fn default_split() -> String {
    "train".to_string()
}

/// A list of activation shards with their labels, stored as TOML.
///
/// Relative paths resolve against the manifest's own directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationManifest {
    #[serde(default)]
    pub dataset_seed: u64,
    pub entries: Vec<ManifestEntry>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl ActivationManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut m: ActivationManifest =
            toml::from_str(&text).map_err(|e| KcdError::Config(format!("manifest: {e}")))?;
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Entries restricted to one split tag (and optionally one layer tag).
    pub fn filtered(&self, split: &str, layer: Option<&str>) -> ActivationManifest {
        ActivationManifest {
            dataset_seed: self.dataset_seed,
            entries: self
                .entries
                .iter()
                .filter(|e| e.split == split && layer.is_none_or(|l| e.layer == l))
                .cloned()
                .collect(),
            base_dir: self.base_dir.clone(),
        }
    }
}

/// Pool every shard of a manifest and concatenate in manifest order.
pub fn load_activation_set(manifest: &ActivationManifest) -> Result<(PooledActivations, Vec<i64>)> {
    if manifest.entries.is_empty() {
        return Err(KcdError::Config("manifest has no entries".into()));
    }
    let mut parts = Vec::with_capacity(manifest.entries.len());
    let mut labels = Vec::new();
    let mut hw = None;
    for entry in &manifest.entries {
        let tensor = read_npy(&manifest.resolve(&entry.tensor))?;
        let shard_labels = read_labels(&manifest.resolve(&entry.labels))?;
        if shard_labels.len() != tensor.batch() {
            return shape_err(format!(
                "{} labels for {} samples in {}",
                shard_labels.len(),
                tensor.batch(),
                entry.tensor.display()
            ));
        }
        if let Some(first) = parts.first().map(|p: &Matrix| p.cols()) {
            if first != tensor.channels() {
                return shape_err(format!(
                    "shard {} has {} channels, expected {first}",
                    entry.tensor.display(),
                    tensor.channels()
                ));
            }
        }
        let pooled = global_average_pool(&tensor);
        hw.get_or_insert(pooled.source_hw);
        parts.push(pooled.into_matrix());
        labels.extend(shard_labels);
    }
    let data = Matrix::vstack(&parts)?;
    Ok((PooledActivations { data, source_hw: hw.unwrap_or((1, 1)) }, labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_averages_spatial_plane() {
        let t = ActivationTensor::new([1, 1, 2, 2], Dtype::F64, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(global_average_pool(&t).matrix()[(0, 0)], 2.5);
    }

    #[test]
    fn pool_of_unit_spatial_is_identity() {
        let vals = vec![0.1, -3.3, 7.25, 1e-300, 5.0, 6.0];
        let t = ActivationTensor::new([3, 2, 1, 1], Dtype::F64, vals.clone()).unwrap();
        let p = global_average_pool(&t);
        assert_eq!(p.matrix().as_slice(), vals.as_slice());
    }

    #[test]
    fn pool_preserves_constants() {
        let v = 0.3;
        let t = ActivationTensor::new([2, 3, 4, 5], Dtype::F64, vec![v; 120]).unwrap();
        let p = global_average_pool(&t);
        assert!(p.matrix().as_slice().iter().all(|x| (x - v).abs() < 1e-15));
    }

    #[test]
    fn tensor_rejects_non_finite_and_empty_dims() {
        assert!(matches!(
            ActivationTensor::new([1, 1, 1, 1], Dtype::F64, vec![f64::NAN]),
            Err(KcdError::InvalidValue(_))
        ));
        assert!(matches!(
            ActivationTensor::new([0, 1, 1, 1], Dtype::F64, vec![]),
            Err(KcdError::ShapeMismatch(_))
        ));
    }
}
