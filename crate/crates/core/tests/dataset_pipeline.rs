use std::fs;

use rodiff_core::dataset::{generate, read_record, Dataset, DatasetManifest, GenerateOptions, Split, MODEL_FILE};
use rodiff_core::model::RodModel;
use rodiff_core::Error;

#[test]
fn generation_is_reproducible_and_resumable() {
    let model = RodModel::default();
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let first = generate(&model, 5, 9, &a, &GenerateOptions { threads: Some(1) }).unwrap();

    // Simulate an interrupted run: one record and the manifest never landed.
    let victim = first.records.iter().find_map(|r| r.path.clone()).unwrap();
    fs::remove_file(a.join(&victim)).unwrap();
    fs::remove_file(a.join("manifest.json")).unwrap();
    let resumed = generate(&model, 5, 9, &a, &GenerateOptions::default()).unwrap();
    assert_eq!(resumed.content_hash(), first.content_hash());
    assert!(a.join(&victim).exists());

    let b = tmp.path().join("b");
    let other = generate(&model, 5, 9, &b, &GenerateOptions::default()).unwrap();
    assert_eq!(other.to_json(), first.to_json());
    for r in first.records.iter().filter(|r| r.valid) {
        let p = r.path.as_ref().unwrap();
        assert_eq!(fs::read(a.join(p)).unwrap(), fs::read(b.join(p)).unwrap());
    }
    assert_eq!(DatasetManifest::load(&a).unwrap(), first);
}

#[test]
fn splits_partition_the_valid_records() {
    let model = RodModel::default();
    let tmp = tempfile::tempdir().unwrap();
    let m = generate(&model, 12, 4, tmp.path(), &GenerateOptions::default()).unwrap();
    let ds = Dataset::open(tmp.path()).unwrap();
    let train = ds.load_split(Split::Train).unwrap();
    let test = ds.load_split(Split::Test).unwrap();
    assert_eq!(train.len() + test.len(), m.n_valid);
    for r in m.records.iter().filter(|r| r.valid) {
        let t = read_record(&tmp.path().join(r.path.as_ref().unwrap())).unwrap();
        assert_eq!(<[f64; 3]>::from(t.goal), r.goal);
        assert!(t.valid);
    }
}

#[test]
fn model_mismatch_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    generate(&RodModel::default(), 1, 0, tmp.path(), &GenerateOptions::default()).unwrap();
    let stiffer = RodModel {
        youngs_modulus: 2e6,
        ..RodModel::default()
    };
    let err = generate(&stiffer, 1, 0, tmp.path(), &GenerateOptions::default()).unwrap_err();
    assert!(err.is_validation(), "{err}");

    stiffer.save(&tmp.path().join(MODEL_FILE)).unwrap();
    assert!(matches!(Dataset::open(tmp.path()), Err(Error::Validation { .. })));
}
