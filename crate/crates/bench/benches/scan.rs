use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fghash::pq::pq_train;
use fghash::retrieval::{coarse_rank, hamming, linear_scan, pack};
use fghash::PqIndex;
use fghash_bench::{random_code, random_codes, random_features, rng};

fn hamming_pair(c: &mut Criterion) {
    let mut r = rng(1);
    let a = pack(&random_code(64, &mut r)).unwrap();
    let b = pack(&random_code(64, &mut r)).unwrap();
    c.bench_function("hamming/64bit", |bench| bench.iter(|| hamming(&a, &b).unwrap()));
}

fn coarse(c: &mut Criterion) {
    let mut group = c.benchmark_group("coarse_rank");
    for bits in [32, 64] {
        let db = random_codes(100_000, bits, 2);
        let query = pack(&random_code(bits, &mut rng(3))).unwrap();
        group.bench_with_input(BenchmarkId::new("n100000_top100", bits), &bits, |bench, _| {
            bench.iter(|| coarse_rank(&query, &db, 100).unwrap())
        });
    }
    group.finish();
}

fn linear(c: &mut Criterion) {
    let feats = random_features(20_000, 512, 4);
    let query = feats.row(0).to_vec();
    c.bench_function("linear_scan/n20000_d512", |bench| bench.iter(|| linear_scan(&query, &feats, 10).unwrap()));
}

fn product_quantization(c: &mut Criterion) {
    let feats = random_features(20_000, 512, 5);
    let train = random_features(2_000, 512, 6);
    let (codebook, _) = pq_train(&train, 8, 256, 4, 7).unwrap();
    let index = PqIndex::build(codebook, &feats).unwrap();
    let query = feats.row(0).to_vec();
    c.bench_function("pq_query/n20000_m8_k256", |bench| bench.iter(|| index.query(&query, 10).unwrap()));
}

criterion_group! {
    name = scans;
    config = Criterion::default().sample_size(20);
    targets = hamming_pair, coarse, linear, product_quantization
}
criterion_main!(scans);
