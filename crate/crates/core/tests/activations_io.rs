mod common;

use common::*;
use kcd_core::activations::{
    load_activation_set, read_labels, read_matrix_npy, write_labels, write_matrix_npy, ActivationManifest,
};
use kcd_core::npy::{self, Dtype};
use kcd_core::{global_average_pool, read_npy, write_npy, ActivationTensor, KcdError, Matrix};
use proptest::prelude::*;

fn tensor_strategy() -> impl Strategy<Value = (Vec<usize>, Vec<f64>)> {
    (1usize..4, 1usize..5, 1usize..4, 1usize..4).prop_flat_map(|(b, c, h, w)| {
        (Just(vec![b, c, h, w]), prop::collection::vec(-1e6f64..1e6, b * c * h * w))
    })
}

proptest! {
    #[test]
    fn f64_round_trip_is_bit_exact((shape, data) in tensor_strategy()) {
        let bytes = npy::encode_float(&shape, Dtype::F64, &data);
        let back = npy::decode(&bytes).unwrap();
        prop_assert_eq!(&back.shape, &shape);
        let npy::NpyData::Float { values, dtype } = back.data else { panic!("float payload") };
        prop_assert_eq!(dtype, Dtype::F64);
        prop_assert!(values.iter().zip(&data).all(|(a, b)| a.to_bits() == b.to_bits()));
        prop_assert_eq!(npy::encode_float(&shape, Dtype::F64, &values), bytes);
    }

    #[test]
    fn f32_round_trip_is_bit_exact((shape, data) in tensor_strategy()) {
        let data: Vec<f64> = data.iter().map(|&v| v as f32 as f64).collect();
        let bytes = npy::encode_float(&shape, Dtype::F32, &data);
        prop_assert_eq!((bytes.len() - data.len() * 4) % 64, 0);
        let npy::NpyData::Float { values, .. } = npy::decode(&bytes).unwrap().data else { panic!("float payload") };
        prop_assert!(values.iter().zip(&data).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn pooling_is_linear((shape, a) in tensor_strategy(), alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
        let sh = [shape[0], shape[1], shape[2], shape[3]];
        let b: Vec<f64> = a.iter().rev().copied().collect();
        let combo: Vec<f64> = a.iter().zip(&b).map(|(x, y)| alpha * x + beta * y).collect();
        let pa = global_average_pool(&ActivationTensor::new(sh, Dtype::F64, a).unwrap());
        let pb = global_average_pool(&ActivationTensor::new(sh, Dtype::F64, b).unwrap());
        let pc = global_average_pool(&ActivationTensor::new(sh, Dtype::F64, combo).unwrap());
        for ((x, y), z) in pa.matrix().as_slice().iter().zip(pb.matrix().as_slice()).zip(pc.matrix().as_slice()) {
            prop_assert!((alpha * x + beta * y - z).abs() <= 1e-9 * (1.0 + z.abs()));
        }
    }

    #[test]
    fn pooling_commutes_with_batch_selection((shape, data) in tensor_strategy()) {
        let t = ActivationTensor::new([shape[0], shape[1], shape[2], shape[3]], Dtype::F64, data).unwrap();
        let idx: Vec<usize> = (0..shape[0]).rev().collect();
        let left = global_average_pool(&t.select_batch(&idx));
        let right = global_average_pool(&t).select_rows(&idx);
        prop_assert_eq!(left.matrix(), right.matrix());
    }
}

#[test]
fn pooling_a_pooled_tensor_is_identity() {
    let m = uniform(&mut rng(1), 5, 3);
    let once = pooled(m.clone());
    let again = global_average_pool(&once.to_tensor(Dtype::F64).unwrap());
    assert_eq!(again.matrix(), &m);
    assert_eq!(global_average_pool(&ActivationTensor::new([1, 1, 2, 2], Dtype::F64, vec![1.0, 2.0, 3.0, 6.0]).unwrap()).matrix()[(0, 0)], 3.0);
}

#[test]
fn files_round_trip_and_keep_dtype() {
    let dir = tempfile::tempdir().unwrap();
    let t = ActivationTensor::new([2, 2, 1, 3], Dtype::F32, (0..12).map(|v| v as f64 * 0.5).collect()).unwrap();
    let p = dir.path().join("t.npy");
    write_npy(&t, &p).unwrap();
    assert_eq!(read_npy(&p).unwrap(), t);

    let m = uniform(&mut rng(2), 4, 3);
    write_matrix_npy(&m, &dir.path().join("m.npy")).unwrap();
    assert_eq!(read_matrix_npy(&dir.path().join("m.npy")).unwrap(), m);

    write_labels(&[3, -1, 7], &dir.path().join("y.npy")).unwrap();
    assert_eq!(read_labels(&dir.path().join("y.npy")).unwrap(), vec![3, -1, 7]);
    assert!(matches!(read_labels(&p), Err(KcdError::ShapeMismatch(_) | KcdError::Format(_))));
}

#[test]
fn non_finite_values_are_rejected() {
    assert!(matches!(ActivationTensor::new([1, 1, 1, 2], Dtype::F64, vec![0.0, f64::INFINITY]), Err(KcdError::InvalidValue(_))));
    assert!(matches!(ActivationTensor::new([1, 2, 1, 1], Dtype::F64, vec![0.0]), Err(KcdError::ShapeMismatch(_) | KcdError::InvalidValue(_))));
}

#[test]
fn fortran_order_is_unsupported() {
    let good = npy::encode_float(&[2, 2], Dtype::F64, &[1.0, 2.0, 3.0, 4.0]);
    let at = good.windows(5).position(|w| w == b"False").unwrap();
    let mut bad = good.clone();
    bad[at..at + 5].copy_from_slice(b"True ");
    assert!(matches!(npy::decode(&bad), Err(KcdError::UnsupportedLayout(_))));
}

#[test]
fn manifest_concatenates_shards_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let a = uniform(&mut rng(3), 3, 4);
    let b = uniform(&mut rng(4), 2, 4);
    write_matrix_npy(&a, &p.join("a.npy")).unwrap();
    write_matrix_npy(&b, &p.join("b.npy")).unwrap();
    write_labels(&[0, 1, 0], &p.join("ya.npy")).unwrap();
    write_labels(&[1, 1], &p.join("yb.npy")).unwrap();
    write_matrix_npy(&uniform(&mut rng(5), 2, 5), &p.join("c.npy")).unwrap();
    std::fs::write(
        p.join("m.toml"),
        r#"
dataset_seed = 9
[[entries]]
tensor = "a.npy"
labels = "ya.npy"
layer = "l3"
[[entries]]
tensor = "b.npy"
labels = "yb.npy"
layer = "l3"
[[entries]]
tensor = "c.npy"
labels = "yb.npy"
split = "val"
layer = "l3"
"#,
    )
    .unwrap();
    let m = ActivationManifest::load(&p.join("m.toml")).unwrap();
    let (acts, labels) = load_activation_set(&m.filtered("train", Some("l3"))).unwrap();
    assert_eq!(labels, vec![0, 1, 0, 1, 1]);
    assert_eq!(acts.matrix(), &Matrix::vstack(&[a, b]).unwrap());
    assert!(matches!(load_activation_set(&m), Err(KcdError::ShapeMismatch(_))));
    assert!(load_activation_set(&m.filtered("test", None)).is_err());
}
