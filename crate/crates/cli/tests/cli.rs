use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fghash::retrieval::{coarse_rank, pack, read_labels, rerank, write_labels};
use fghash::{FeatureMatrix, PackedCodes, RetrievalIndex};

fn fghash(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fghash"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &str = "\
dataset = synth
output_dir = out
image_side = 16
bits = 8
outer_iters = 2
epochs_per_iter = 1
batch_size = 8
samples_per_epoch = 12
synth_classes = 3
synth_per_class_db = 6
synth_per_class_query = 2
synth_patch_size = 4
top_n = 10
top_k = 5
";

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("run.cfg");
    fs::write(&p, body).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn config_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "dataset = synth\n");
    let o = fghash(&["train", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("output_dir"), "{}", stderr(&o));

    let cfg = write_config(dir.path(), &format!("{TINY}shape = round\n"));
    let o = fghash(&["train", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unknown key `shape`"));

    let cfg = write_config(dir.path(), TINY);
    let o = fghash(&["train", "--config", s(&cfg), "--topk", "50"]);
    assert_eq!(o.status.code(), Some(2));

    let o = fghash(&["train", "--config", s(&dir.path().join("absent.cfg"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn divergent_training_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("{TINY}learning_rate = 1e250\n"));
    let o = fghash(&["train", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite"));
}

#[test]
fn train_encode_index_query_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let o = fghash(&["train", "--config", s(&cfg)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = dir.path().join("out");
    for f in ["model.fht1", "db.fhc1", "db_labels.csv", "train.log", "index/codes.fhc1", "index/features.fhf1"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    assert!(out.join("checkpoints/iter_0001.fht1").exists());
    assert!(out.join("checkpoints/iter_0002.fht1").exists());
    let log = fs::read_to_string(out.join("train.log")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 6);
    assert!(lines[0].starts_with("iter=1 phase=theta loss="));
    assert!(lines[5].starts_with("iter=2 phase=anchor loss="));

    let data = dir.path().join("data");
    let o = fghash(&["synth", "--out", s(&data), "--config", s(&cfg)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest = data.join("manifest.csv");

    // re-encoding the database: compare against the learned codes
    let codes = dir.path().join("db_net.fhc1");
    let labels = dir.path().join("db_net.csv");
    let feats = dir.path().join("db_net.fhf1");
    let o = fghash(&[
        "encode", "--model", s(&out.join("model.fht1")), "--manifest", s(&manifest), "--split", "train-db",
        "--out", s(&codes), "--labels", s(&labels), "--features", s(&feats), "--bits", "8",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let net = PackedCodes::read_fhc1(&codes, read_labels(&labels).unwrap()).unwrap();
    let learned = PackedCodes::read_fhc1(&out.join("db.fhc1"), read_labels(&out.join("db_labels.csv")).unwrap()).unwrap();
    assert_eq!(net.len(), 18);
    assert_eq!(net.labels(), learned.labels());

    // index built from the network codes, then queried with K = N and no features
    let idx_dir = dir.path().join("idx");
    let o = fghash(&["index", "--codes", s(&codes), "--labels", s(&labels), "--out", s(&idx_dir)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = fghash(&[
        "query", "--index", s(&idx_dir), "--model", s(&out.join("model.fht1")), "--manifest", s(&manifest),
        "--split", "query", "--topn", "4", "--topk", "4",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows[0], "query,rank,id");
    assert_eq!(rows.len(), 1 + 6 * 4);

    // with features the CLI output equals the library composition
    let o = fghash(&[
        "query", "--index", s(&out.join("index")), "--model", s(&out.join("model.fht1")), "--manifest",
        s(&manifest), "--split", "query", "--topn", "10", "--topk", "5",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ranked = stdout(&o);
    let qcodes = dir.path().join("q.fhc1");
    let qfeats = dir.path().join("q.fhf1");
    let o = fghash(&[
        "encode", "--model", s(&out.join("model.fht1")), "--manifest", s(&manifest), "--split", "query",
        "--out", s(&qcodes), "--features", s(&qfeats),
    ]);
    assert!(o.status.success());
    let index = RetrievalIndex::load(&out.join("index")).unwrap();
    let q = PackedCodes::read_fhc1(&qcodes, vec![0; 6]).unwrap();
    let qf = FeatureMatrix::read_fhf1(&qfeats).unwrap();
    let mut expected = String::from("query,rank,id\n");
    for qi in 0..6 {
        let short: Vec<usize> = coarse_rank(q.code(qi), index.codes(), 10).unwrap().iter().map(|p| p.0).collect();
        let top = rerank(qf.row(qi), &short, index.features().unwrap(), 5).unwrap();
        for (r, id) in top.iter().enumerate() {
            expected.push_str(&format!("{qi},{},{id}\n", r + 1));
        }
    }
    assert_eq!(ranked, expected);

    let o = fghash(&["eval", "--config", s(&cfg), "--run", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("MAP"));
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    assert!(fghash(&["train", "--config", s(&cfg)]).status.success());
    let resumed_cfg = dir.path().join("resumed.cfg");
    fs::write(&resumed_cfg, TINY.replace("output_dir = out", "output_dir = resumed")).unwrap();
    let ck = dir.path().join("out/checkpoints/iter_0001.fht1");
    let o = fghash(&["train", "--config", s(&resumed_cfg), "--resume", s(&ck)]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["model.fht1", "db.fhc1"] {
        assert_eq!(
            fs::read(dir.path().join("out").join(f)).unwrap(),
            fs::read(dir.path().join("resumed").join(f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn seed_override_changes_training_but_not_data() {
    let dir = tempfile::tempdir().unwrap();
    let a = write_config(dir.path(), TINY);
    let b = dir.path().join("b.cfg");
    fs::write(&b, TINY.replace("output_dir = out", "output_dir = out_b")).unwrap();
    assert!(fghash(&["train", "--config", s(&a)]).status.success());
    assert!(fghash(&["train", "--config", s(&b), "--seed", "99"]).status.success());
    let (oa, ob) = (dir.path().join("out"), dir.path().join("out_b"));
    assert_eq!(fs::read(oa.join("db_labels.csv")).unwrap(), fs::read(ob.join("db_labels.csv")).unwrap());
    assert_ne!(fs::read(oa.join("model.fht1")).unwrap(), fs::read(ob.join("model.fht1")).unwrap());
}

#[test]
fn encode_edge_cases() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &TINY.replace("outer_iters = 2", "outer_iters = 1"));
    assert!(fghash(&["train", "--config", s(&cfg)]).status.success());
    let model = dir.path().join("out/model.fht1");
    let empty = dir.path().join("empty.csv");
    fs::write(&empty, "").unwrap();
    let codes = dir.path().join("empty.fhc1");
    let o = fghash(&["encode", "--model", s(&model), "--manifest", s(&empty), "--out", s(&codes)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(PackedCodes::read_fhc1(&codes, Vec::new()).unwrap().is_empty());
    let o = fghash(&["encode", "--model", s(&model), "--manifest", s(&empty), "--out", s(&codes), "--bits", "16"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn index_fixture_scores_by_hand() {
    let dir = tempfile::tempdir().unwrap();
    // database labels 1,0,1 at Hamming distances 0,1,2 from the query
    let db = PackedCodes::from_codes(
        [[1i8, 1], [1, -1], [-1, -1]].iter().map(|c| c.as_slice()),
        2,
        vec![1, 0, 1],
    )
    .unwrap();
    db.write_fhc1(&dir.path().join("db.fhc1")).unwrap();
    write_labels(&dir.path().join("db.csv"), db.labels()).unwrap();
    let out = dir.path().join("idx");
    let o = fghash(&["index", "--codes", s(&dir.path().join("db.fhc1")), "--labels", s(&dir.path().join("db.csv")), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let index = RetrievalIndex::load(&out).unwrap();
    let q = PackedCodes::from_words(2, pack(&[1, 1]).unwrap(), vec![1]).unwrap();
    let r = fghash::retrieval::evaluate(&index, &q, None, 3, 3).unwrap();
    assert!((r.map - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    assert!((r.precision_at_k - 2.0 / 3.0).abs() < 1e-12);
}

#[test]
fn bench_reports_every_mode() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bench.csv");
    let o = fghash(&[
        "bench", "--n", "3000", "--bits", "32", "--dim", "64", "--queries", "3", "--reps", "3", "--modes",
        "linear,hamming,pq", "--pq-k", "16", "--pq-train", "500", "--csv", s(&csv),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = stdout(&o);
    assert_eq!(table.lines().count(), 4);
    assert!(table.contains("12.0KB"), "{table}");
    let rows = fs::read_to_string(&csv).unwrap();
    assert_eq!(rows.lines().count(), 4);
    assert!(rows.lines().nth(1).unwrap().starts_with("linear,3000,64,"));

    let o = fghash(&["bench", "--modes", "hamming", "--queries", "2", "--reps", "1"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("404.0KB"), "{}", stdout(&o));

    let o = fghash(&["bench", "--modes", "linear,sorting"]);
    assert_eq!(o.status.code(), Some(2));
}
