use add_sentinel::formats::{read_queries, write_queries, QueryRecord};
use add_sentinel::reference::{fit_reference, load_reference, save_reference};
use add_sentinel::scenarios::{presets, Setup};
use add_sentinel::SentinelError;

#[test]
fn save_load_fit_is_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    let setup = Setup::new(presets::separation_world(3), 40).unwrap();
    let path = dir.path().join("model.addref");
    save_reference(&setup.reference, &path).unwrap();
    let loaded = load_reference(&path).unwrap();
    assert_eq!(&loaded, setup.reference.as_ref());

    // fit again from a stream file written and read back
    let records: Vec<QueryRecord> = setup
        .train_features
        .iter()
        .zip(&setup.train_labels)
        .map(|(f, &l)| QueryRecord {
            account_id: "train".into(),
            feature: f.clone(),
            label: l as i32,
        })
        .collect();
    let qpath = dir.path().join("train.addqry");
    write_queries(&qpath, setup.world.dim(), &records).unwrap();
    let (_, back) = read_queries(&qpath).unwrap();
    let feats: Vec<Vec<f32>> = back.iter().map(|r| r.feature.clone()).collect();
    let labels: Vec<i64> = back.iter().map(|r| r.label as i64).collect();
    let refit = fit_reference(&feats, &labels, setup.world.num_classes()).unwrap();
    let second = dir.path().join("again.addref");
    save_reference(&refit, &second).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&second).unwrap());
}

#[test]
fn load_reports_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let setup = Setup::new(presets::separation_world(4), 20).unwrap();
    let path = dir.path().join("model.addref");
    save_reference(&setup.reference, &path).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x10;
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(load_reference(&path), Err(SentinelError::ChecksumMismatch { .. })));
    assert!(matches!(
        load_reference(&dir.path().join("missing")),
        Err(SentinelError::IoFailure(_))
    ));
}
