use fghash::dataset::{load_manifest, read_manifest, synth_generate, write_manifest, Split, SynthConfig};
use fghash::Error;

#[test]
fn manifest_round_trip_quantizes_to_bytes() {
    let ds = synth_generate(&SynthConfig {
        num_classes: 3,
        per_class_db: 2,
        per_class_query: 1,
        ..SynthConfig::default()
    })
    .unwrap();
    ds.validate_splits().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_manifest(&ds, dir.path()).unwrap();
    let back = load_manifest(&manifest, 32).unwrap();
    assert_eq!(back.labels, ds.labels);
    assert_eq!(back.splits, ds.splits);
    for (a, b) in back.images.iter().zip(&ds.images) {
        assert_eq!(a.shape(), b.shape());
        let worst = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(worst <= 0.5 / 255.0 + 1e-12, "quantization error {worst}");
    }
    let (db, _) = back.split(Split::TrainDb);
    let (q, ql) = back.split(Split::Query);
    assert_eq!((db.len(), q.len()), (6, 3));
    assert_eq!(ql, vec![0, 1, 2]);
}

#[test]
fn manifest_paths_are_relative_to_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let sub = dir.path().join("imgs");
    std::fs::create_dir(&sub).unwrap();
    std::fs::write(sub.join("a.ppm"), b"P6\n1 1\n255\n\x00\x80\xff").unwrap();
    let manifest = dir.path().join("m.csv");
    std::fs::write(&manifest, "relative_path,label,split\nimgs/a.ppm, 4, query\n").unwrap();
    let entries = read_manifest(&manifest).unwrap();
    assert_eq!(entries.len(), 1);
    assert_eq!(entries[0].path, sub.join("a.ppm"));
    assert_eq!((entries[0].label, entries[0].split), (4, Split::Query));
    let ds = load_manifest(&manifest, 2).unwrap();
    assert_eq!(ds.images[0].shape(), &[2, 2, 3]);
    assert_eq!(&ds.images[0].data()[..3], &[0.0, 128.0 / 255.0, 1.0]);
}

#[test]
fn manifest_errors_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("m.csv");
    for (body, needle) in [
        ("a.ppm,1\n", "line 1"),
        ("a.ppm,x,query\n", "bad label"),
        ("a.ppm,1,test\n", "unknown split"),
        ("missing.ppm,1,query\n", "cannot read"),
    ] {
        std::fs::write(&manifest, body).unwrap();
        let err = load_manifest(&manifest, 8).unwrap_err();
        assert!(matches!(err, Error::Ingestion(_)), "{err}");
        assert!(err.to_string().contains(needle), "`{err}` lacks `{needle}`");
    }
}
