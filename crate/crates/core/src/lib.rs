//! Teacher/student channel consistency, channel matching, and
//! knowledge-consistent distillation on a deterministic MLP bench.
// `!(x > 0.0)` style checks are meant to reject NaN too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod activations;
pub mod analysis;
pub mod consistency;
pub mod error;
pub mod hungarian;
pub mod lab;
pub mod learned;
pub mod linalg;
pub mod matching;
pub mod npy;

pub use activations::{global_average_pool, read_npy, write_npy, ActivationTensor, PooledActivations};
pub use consistency::{consistency_matrix, consistency_score, ConsistencyMatrix, ConsistencyMetric, MetricKind};
pub use error::{KcdError, Result};
pub use linalg::Matrix;
pub use matching::{apply_transform, match_bipartite, match_greedy, match_random, Strategy, Transformation};

/// Hex SHA-256 of a byte string, used for artifact provenance.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}
