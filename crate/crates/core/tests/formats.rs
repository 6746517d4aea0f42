mod common;

use common::random_dataset;
use patchbench::codec::{load_tensor, save_tensor, tensor_from_bytes, tensor_to_bytes};
use patchbench::datasets::load_idx;
use patchbench::metrics::random_patch;
use patchbench::nn::{convnet, load_model, save_model, train_model, ModelGroup, ModelSpec, TrainConfig, TrainedModel};
use patchbench::patchops::Patch;
use patchbench::{Error, Tensor};
use proptest::prelude::*;

fn offset(e: Error) -> u64 {
    match e {
        Error::Format { offset, .. } => offset,
        other => panic!("expected a positioned format error, got {other}"),
    }
}

fn trained() -> TrainedModel {
    let data = random_dataset(24, &[1, 8, 8], 3, (0.0, 1.0), 2);
    let spec = ModelSpec {
        model_id: "tiny".into(),
        group: ModelGroup::HeldOutOther,
        layers: convnet(&[1, 8, 8], &[3], 3, 3).unwrap(),
    };
    let cfg = TrainConfig { learning_rate: 0.1, epochs: 2, batch_size: 8, seed: 4 };
    let mut m = train_model(&spec, &data, &cfg).unwrap();
    m.clean_acc_cache = Some(0.5);
    m
}

#[test]
fn model_files_round_trip_and_guard() {
    let m = trained();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.pfm");
    save_model(&m, &path).unwrap();
    let back = load_model(&path).unwrap();
    assert!(back.bit_eq(&m));
    assert_eq!(back.group(), ModelGroup::HeldOutOther);
    assert_eq!(back.clean_acc_cache, Some(0.5));

    let bytes = m.to_bytes();
    let mut bad = bytes.clone();
    bad[0] = b'Q';
    assert_eq!(offset(TrainedModel::from_bytes(&bad).unwrap_err()), 0);
    // cut in the middle of the last parameter tensor
    let cut = bytes.len() - 6;
    let at = offset(TrainedModel::from_bytes(&bytes[..cut]).unwrap_err());
    assert!(at > 4 && at < cut as u64, "offset {at}");
    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(TrainedModel::from_bytes(&trailing).is_err());
}

#[test]
fn patch_files_round_trip_and_guard() {
    let mut p = random_patch(5, 3, 8);
    p.target_class = 4;
    p.patch_id = "patch-t4".into();
    p.provenance.loss_last = Some(0.25);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.pfp");
    p.save(&path).unwrap();
    assert!(Patch::load(&path).unwrap().bit_eq(&p));

    let bytes = p.to_bytes();
    let mut bad = bytes.clone();
    bad[3] = b'9';
    assert_eq!(offset(Patch::from_bytes(&bad).unwrap_err()), 0);
    let cut = bytes.len() - 10;
    let at = offset(Patch::from_bytes(&bytes[..cut]).unwrap_err());
    assert!(at > 4 && at < cut as u64);
}

#[test]
fn tensor_files_round_trip_and_guard() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.pft");
    let t = Tensor::new(vec![2, 3, 4], (0..24).map(|i| i as f32 * 0.37 - 3.0).collect()).unwrap();
    save_tensor(&path, &t).unwrap();
    assert!(load_tensor(&path).unwrap().bit_eq(&t));
    let scalar = Tensor::scalar(7.5);
    assert!(tensor_from_bytes(&tensor_to_bytes(&scalar)).unwrap().bit_eq(&scalar));

    let bytes = tensor_to_bytes(&t);
    assert_eq!(&bytes[..4], b"PFT1");
    assert_eq!(bytes[4], 1);
    assert_eq!(bytes.len(), 4 + 1 + 4 + 3 * 8 + 24 * 4);
    // the payload starts after magic, dtype, rank and three dims
    assert_eq!(offset(tensor_from_bytes(&bytes[..bytes.len() - 3]).unwrap_err()), 33);
    let mut bad = bytes.clone();
    bad[1] = b'X';
    assert_eq!(offset(tensor_from_bytes(&bad).unwrap_err()), 0);

    let missing = dir.path().join("nope.pft");
    let err = load_tensor(&missing).unwrap_err();
    assert!(err.to_string().contains("nope.pft"), "{err}");
}

#[test]
fn handcrafted_idx_pair_loads() {
    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = (dir.path().join("images"), dir.path().join("labels"));
    // two 2x2 images, big-endian header
    let mut images = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2];
    images.extend_from_slice(&[0, 255, 51, 102, 255, 0, 204, 153]);
    std::fs::write(&ip, &images).unwrap();
    std::fs::write(&lp, [0, 0, 8, 1, 0, 0, 0, 2, 3, 1]).unwrap();
    let d = load_idx(&ip, &lp).unwrap();
    assert_eq!(d.images.shape(), &[2, 1, 2, 2]);
    assert_eq!(d.images.data(), &[0.0, 1.0, 0.2, 0.4, 1.0, 0.0, 0.8, 0.6]);
    assert_eq!(d.labels, vec![3, 1]);

    std::fs::write(&lp, [0, 0, 8, 1, 0, 0, 0, 1, 3]).unwrap();
    assert!(load_idx(&ip, &lp).is_err(), "label count differs from image count");
    std::fs::write(&ip, &images[..images.len() - 1]).unwrap();
    std::fs::write(&lp, [0, 0, 8, 1, 0, 0, 0, 2, 3, 1]).unwrap();
    assert_eq!(offset(load_idx(&ip, &lp).unwrap_err()), 16);
}

proptest! {
    #[test]
    fn any_tensor_round_trips(dims in prop::collection::vec(1usize..4, 0..4), scale in -1e6f32..1e6) {
        let n: usize = dims.iter().product();
        let t = Tensor::new(dims, (0..n).map(|i| scale / (i as f32 + 1.0)).collect()).unwrap();
        prop_assert!(tensor_from_bytes(&tensor_to_bytes(&t)).unwrap().bit_eq(&t));
    }

    #[test]
    fn truncated_tensors_never_decode(cut in 0usize..57) {
        let t = Tensor::new(vec![2, 3], vec![0.5; 6]).unwrap();
        let bytes = tensor_to_bytes(&t);
        prop_assert!(tensor_from_bytes(&bytes[..cut.min(bytes.len() - 1)]).is_err());
    }
}
