use fghash::anchor::exchange;
use fghash::dataset::{build_similarity, synth_generate, Split, SynthConfig};
use fghash::model::embed;
use fghash::trainer::{code_objective, encode, v_column_update, CodeMatrix};
use fghash::{Checkpoint, LossWeights, ModelConfig, ModelParams, Tensor, TrainConfig, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Brute-force minimum of the code objective over all `2^n` settings of
/// column `k`.
fn column_minimum(u: &Tensor, v: &CodeMatrix, s: &fghash::SimilarityMatrix, k: usize) -> f64 {
    let n = v.rows();
    let mut best = f64::INFINITY;
    for mask in 0u32..(1 << n) {
        let col: Vec<i8> = (0..n).map(|j| if mask >> j & 1 == 1 { 1 } else { -1 }).collect();
        let mut w = v.clone();
        w.set_column(k, &col);
        best = best.min(code_objective(u, &w, s).unwrap());
    }
    best
}

#[test]
fn column_updates_are_exact_minimizers_and_monotone() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..50 {
        let n = rng.random_range(1..=8);
        let m = rng.random_range(1..=8);
        let q = rng.random_range(1..=4);
        let classes = rng.random_range(1..=3);
        let u = Tensor::matrix(m, q, (0..m * q).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let ql: Vec<usize> = (0..m).map(|_| rng.random_range(0..classes)).collect();
        let dl: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let s = build_similarity(&ql, &dl);
        let mut v = CodeMatrix::random(n, q, &mut rng);
        let mut prev = code_objective(&u, &v, &s).unwrap();
        for _sweep in 0..3 {
            for k in 0..q {
                let col = v_column_update(&u, &v, &s, k).unwrap();
                v.set_column(k, &col);
                let obj = code_objective(&u, &v, &s).unwrap();
                let best = column_minimum(&u, &v, &s, k);
                assert!((obj - best).abs() <= 1e-9 * best.max(1.0), "column {k}: {obj} vs optimum {best}");
                assert!(obj <= prev, "objective rose from {prev} to {obj}");
                prev = obj;
            }
        }
    }
}

fn tiny_data() -> (Vec<Tensor>, Vec<usize>) {
    let ds = synth_generate(&SynthConfig {
        num_classes: 3,
        per_class_db: 4,
        per_class_query: 1,
        image_side: 16,
        patch_size: 4,
        ..SynthConfig::default()
    })
    .unwrap();
    ds.split(Split::TrainDb)
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        image_side: 16,
        bits: 8,
        ..ModelConfig::default()
    }
}

fn tiny_train(n: usize) -> TrainConfig {
    TrainConfig {
        outer_iters: 3,
        epochs_per_iter: 1,
        batch_size: 4,
        samples_per_epoch: n,
        warmup_fraction: 0.34,
        momentum: 0.5,
        ..TrainConfig::default()
    }
}

#[test]
fn anchors_are_class_part_means_after_an_iteration() {
    let (images, labels) = tiny_data();
    let model = tiny_model();
    let w = LossWeights::defaults(model.bits, images.len());
    let mut trainer = Trainer::new(&images, &labels, &model, tiny_train(images.len()), w).unwrap();
    trainer.step().unwrap();
    let locals: Vec<Vec<Vec<f64>>> = images.iter().map(|x| embed(trainer.params(), x).unwrap().local).collect();
    for (class, anchors) in trainer.anchors().classes() {
        let members: Vec<usize> = (0..labels.len()).filter(|i| labels[*i] == class).collect();
        for (j, anchor) in anchors.vectors.iter().enumerate() {
            for (c, value) in anchor.iter().enumerate() {
                let mean = members.iter().map(|i| locals[*i][j][c]).sum::<f64>() / members.len() as f64;
                assert!((value - mean).abs() <= 1e-12, "class {class} part {j}: {value} vs {mean}");
            }
        }
    }
}

#[test]
fn exchange_extremes() {
    let local = vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]];
    let anchors = vec![vec![-1.0, -2.0], vec![-3.0, -4.0], vec![-5.0, -6.0]];
    assert_eq!(exchange(&local, &anchors, &[1.0; 3]).unwrap(), local);
    assert_eq!(exchange(&local, &anchors, &[0.0; 3]).unwrap(), anchors);
}

#[test]
fn encoding_ignores_anchor_contents() {
    let (images, labels) = tiny_data();
    let model = tiny_model();
    let w = LossWeights::defaults(model.bits, images.len());
    let mut trainer = Trainer::new(&images, &labels, &model, tiny_train(images.len()), w).unwrap();
    trainer.step().unwrap();
    let mut ck = trainer.checkpoint();
    let before: Vec<Vec<i8>> = images.iter().map(|x| encode(trainer.params(), x).unwrap()).collect();
    let names: Vec<String> = ck.entries().filter(|(n, _)| n.starts_with("anchor/")).map(|(n, _)| n.to_string()).collect();
    assert!(!names.is_empty());
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for name in names {
        let t = ck.get(&name).unwrap();
        let noisy = t.data().iter().map(|v| v + rng.random_range(-10.0..10.0)).collect();
        ck.insert(name.clone(), Tensor::new(t.shape().to_vec(), noisy).unwrap());
    }
    let params = ModelParams::from_checkpoint(&ck).unwrap();
    let after: Vec<Vec<i8>> = images.iter().map(|x| encode(&params, x).unwrap()).collect();
    assert_eq!(before, after);
}

#[test]
fn resume_continues_the_same_trajectory() {
    let (images, labels) = tiny_data();
    let model = tiny_model();
    let w = LossWeights::defaults(model.bits, images.len());
    let cfg = TrainConfig {
        samples_per_epoch: 8,
        ..tiny_train(images.len())
    };
    let mut straight = Trainer::new(&images, &labels, &model, cfg.clone(), w).unwrap();
    let straight_log = straight.run().unwrap();

    let mut first = Trainer::new(&images, &labels, &model, cfg.clone(), w).unwrap();
    first.step().unwrap();
    let mut bytes = Vec::new();
    first.checkpoint().write_to(&mut bytes).unwrap();
    let ck = Checkpoint::read_from(bytes.as_slice()).unwrap();
    let mut resumed = Trainer::resume(&ck, &images, &labels, cfg, w).unwrap();
    assert_eq!(resumed.iteration(), 1);
    let resumed_log = resumed.run().unwrap();

    assert_eq!(straight.codes(), resumed.codes());
    assert_eq!(straight.params().tensors(), resumed.params().tensors());
    assert_eq!(straight.anchors(), resumed.anchors());
    let losses = |log: &[fghash::trainer::LogEntry]| log.iter().map(|e| (e.iter, e.phase, e.loss)).collect::<Vec<_>>();
    assert_eq!(losses(&straight_log[3..]), losses(&resumed_log));
}

#[test]
fn zero_epochs_yield_one_code_sweep_for_the_initial_network() {
    let (images, labels) = tiny_data();
    let model = tiny_model();
    let w = LossWeights::defaults(model.bits, images.len());
    let cfg = TrainConfig {
        outer_iters: 1,
        epochs_per_iter: 0,
        samples_per_epoch: images.len(),
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(&images, &labels, &model, cfg, w).unwrap();
    let initial = trainer.params().tensors().to_vec();
    let mut expected = trainer.codes().clone();
    trainer.step().unwrap();
    assert!(trainer.is_done());
    assert_eq!(trainer.params().tensors(), initial.as_slice());

    let relaxed: Vec<f64> = images.iter().flat_map(|x| embed(trainer.params(), x).unwrap().relaxed).collect();
    let u = Tensor::matrix(images.len(), model.bits, relaxed).unwrap();
    let s = build_similarity(&labels, &labels);
    for k in 0..model.bits {
        let col = v_column_update(&u, &expected, &s, k).unwrap();
        expected.set_column(k, &col);
    }
    assert_eq!(trainer.codes(), &expected);
}

#[test]
fn training_lowers_the_objective() {
    let (images, labels) = tiny_data();
    let model = tiny_model();
    let w = LossWeights::defaults(model.bits, images.len());
    let mut trainer = Trainer::new(&images, &labels, &model, tiny_train(images.len()), w).unwrap();
    let before = trainer.objective().unwrap().total;
    trainer.run().unwrap();
    let after = trainer.objective().unwrap().total;
    assert!(after < before, "objective {before} -> {after}");
}
