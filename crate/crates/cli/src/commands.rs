use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use fghash::dataset::{load_manifest, write_manifest, Split};
use fghash::model::{embed, Embedding};
use fghash::pq::pq_train;
use fghash::retrieval::{
    coarse_rank, evaluate, format_bytes, linear_scan, memory_estimate, read_labels, write_labels, EvalReport,
    Representation, ScanTiming,
};
use fghash::trainer::{alternate_train, ObjectiveReport, TrainOutcome};
use fghash::{
    Checkpoint, Dataset, FeatureMatrix, ModelParams, PackedCodes, PqIndex, RetrievalIndex, SynthConfig, Tensor,
    Trainer,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::config::{ConfigError, RunConfig};

pub const MODEL_FILE: &str = "model.fht1";
pub const DB_CODES_FILE: &str = "db.fhc1";
pub const DB_LABELS_FILE: &str = "db_labels.csv";
pub const INDEX_DIR: &str = "index";
pub const LOG_FILE: &str = "train.log";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// Command-line values that take precedence over the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub bits: Option<usize>,
    pub parts: Option<usize>,
    pub no_exchange: bool,
    pub top_n: Option<usize>,
    pub top_k: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) -> Result<(), ConfigError> {
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        if let Some(b) = self.bits {
            cfg.model.bits = b;
        }
        if let Some(p) = self.parts {
            cfg.model.parts = p;
        }
        if self.no_exchange {
            cfg.train.exchange = false;
        }
        if let Some(n) = self.top_n {
            cfg.top_n = n;
        }
        if let Some(k) = self.top_k {
            cfg.top_k = k;
        }
        cfg.validate()
    }
}

/// Embeds every image with the network, in parallel over images.
pub fn embed_all(params: &ModelParams, images: &[Tensor]) -> fghash::Result<Vec<Embedding>> {
    images.par_iter().map(|x| embed(params, x)).collect()
}

fn packed(embs: &[Embedding], bits: usize, labels: Vec<usize>) -> fghash::Result<PackedCodes> {
    PackedCodes::from_codes(embs.iter().map(|e| e.code.as_slice()), bits, labels)
}

fn features(embs: &[Embedding], dim: usize) -> fghash::Result<FeatureMatrix> {
    let data = embs.iter().flat_map(|e| e.features.iter().map(|v| *v as f32)).collect();
    FeatureMatrix::new(embs.len(), dim, data)
}

/// Index over the learned database codes with the network's real-valued
/// features for re-ranking.
pub fn build_index(params: &ModelParams, codes: &fghash::CodeMatrix, db: &[Tensor], labels: &[usize]) -> fghash::Result<RetrievalIndex> {
    let bits = params.config().bits;
    let packed = PackedCodes::from_codes(codes.iter_rows(), bits, labels.to_vec())?;
    let embs = embed_all(params, db)?;
    let feats = features(&embs, params.config().feature_dim())?;
    RetrievalIndex::new(packed, Some(feats))
}

/// Encodes labeled queries with the network and scores them against
/// `index`.
pub fn evaluate_queries(
    params: &ModelParams,
    index: &RetrievalIndex,
    queries: &[Tensor],
    labels: &[usize],
    top_n: usize,
    top_k: usize,
) -> fghash::Result<EvalReport> {
    let embs = embed_all(params, queries)?;
    let codes = packed(&embs, params.config().bits, labels.to_vec())?;
    let feats = features(&embs, params.config().feature_dim())?;
    let top_n = top_n.min(index.len());
    evaluate(index, &codes, Some(&feats), top_n, top_k.min(top_n))
}

pub struct TrainSummary {
    pub initial: ObjectiveReport,
    pub last: ObjectiveReport,
    pub db_size: usize,
    pub seconds: f64,
}

pub fn train(cfg: &RunConfig, resume: Option<&Path>) -> Result<TrainSummary> {
    let start = Instant::now();
    let ds = cfg.load_dataset()?;
    let (db, labels) = ds.split(Split::TrainDb);
    let weights = cfg.weights(db.len());
    let mut trainer = match resume {
        Some(p) => {
            let ck = Checkpoint::load(p).with_context(|| format!("loading checkpoint {}", p.display()))?;
            let t = Trainer::resume(&ck, &db, &labels, cfg.train.clone(), weights)?;
            if t.params().config() != &cfg.model {
                return Err(ConfigError("checkpoint model does not match the configured model".into()).into());
            }
            t
        }
        None => Trainer::new(&db, &labels, &cfg.model, cfg.train.clone(), weights)?,
    };
    let out = &cfg.output_dir;
    fs::create_dir_all(out.join(CHECKPOINT_DIR))
        .with_context(|| format!("creating output directory {}", out.display()))?;
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(resume.is_some())
        .write(true)
        .truncate(resume.is_none())
        .open(out.join(LOG_FILE))?;
    let initial = trainer.objective()?;
    log::info!("initial objective {:.6e}", initial.total);
    while !trainer.is_done() {
        for entry in trainer.step()? {
            writeln!(log, "{entry}")?;
        }
        let ck_path = out.join(CHECKPOINT_DIR).join(format!("iter_{:04}.fht1", trainer.iteration()));
        trainer.checkpoint().save(&ck_path)?;
    }
    let last = trainer.objective()?;
    log::info!("final objective {:.6e}", last.total);
    trainer.checkpoint().save(out.join(MODEL_FILE))?;
    let (params, codes, _) = trainer.into_parts();
    let index = build_index(&params, &codes, &db, &labels)?;
    index.codes().write_fhc1(&out.join(DB_CODES_FILE))?;
    write_labels(&out.join(DB_LABELS_FILE), &labels)?;
    index.save(&out.join(INDEX_DIR))?;
    Ok(TrainSummary {
        initial,
        last,
        db_size: db.len(),
        seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn load_model(path: &Path) -> Result<ModelParams> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading model {}", path.display()))?;
    Ok(ModelParams::from_checkpoint(&ck)?)
}

fn load_images(manifest: &Path, side: usize, split: Option<Split>) -> Result<Dataset> {
    let mut ds = load_manifest(manifest, side)?;
    if let Some(s) = split {
        let keep: Vec<usize> = ds.indices(s);
        ds = Dataset {
            images: keep.iter().map(|i| ds.images[*i].clone()).collect(),
            labels: keep.iter().map(|i| ds.labels[*i]).collect(),
            splits: vec![s; keep.len()],
        };
    }
    Ok(ds)
}

pub struct EncodeArgs<'a> {
    pub model: &'a Path,
    pub manifest: &'a Path,
    pub out: &'a Path,
    pub labels_out: Option<&'a Path>,
    pub features_out: Option<&'a Path>,
    pub bits: Option<usize>,
    pub split: Option<Split>,
}

/// Returns the number of encoded items.
pub fn encode(args: &EncodeArgs<'_>) -> Result<usize> {
    let params = load_model(args.model)?;
    let cfg = params.config();
    if let Some(b) = args.bits {
        if b != cfg.bits {
            return Err(ConfigError(format!("--bits {b} does not match the model's {} bits", cfg.bits)).into());
        }
    }
    let ds = load_images(args.manifest, cfg.image_side, args.split)?;
    let embs = embed_all(&params, &ds.images)?;
    packed(&embs, cfg.bits, ds.labels.clone())?.write_fhc1(args.out)?;
    if let Some(p) = args.labels_out {
        write_labels(p, &ds.labels)?;
    }
    if let Some(p) = args.features_out {
        features(&embs, cfg.feature_dim())?.write_fhf1(p)?;
    }
    Ok(ds.len())
}

pub fn index(codes: &Path, labels: &Path, features: Option<&Path>, out: &Path) -> Result<RetrievalIndex> {
    let labels = read_labels(labels)?;
    let codes = PackedCodes::read_fhc1(codes, labels)?;
    let feats = features.map(FeatureMatrix::read_fhf1).transpose()?;
    let index = RetrievalIndex::new(codes, feats)?;
    index.save(out)?;
    Ok(index)
}

pub struct QueryArgs<'a> {
    pub index: &'a Path,
    pub model: &'a Path,
    pub manifest: &'a Path,
    pub split: Option<Split>,
    pub top_n: usize,
    pub top_k: usize,
}

/// Ranked database ids per query.
pub fn query(args: &QueryArgs<'_>) -> Result<Vec<Vec<usize>>> {
    let params = load_model(args.model)?;
    let index = RetrievalIndex::load(args.index)?;
    let cfg = params.config();
    if index.codes().bits() != cfg.bits {
        return Err(ConfigError(format!(
            "index holds {}-bit codes but the model produces {} bits",
            index.codes().bits(),
            cfg.bits
        ))
        .into());
    }
    if args.top_k > args.top_n {
        return Err(ConfigError(format!("--topk {} exceeds --topn {}", args.top_k, args.top_n)).into());
    }
    let ds = load_images(args.manifest, cfg.image_side, args.split)?;
    let embs = embed_all(&params, &ds.images)?;
    let codes = packed(&embs, cfg.bits, ds.labels.clone())?;
    (0..codes.len())
        .into_par_iter()
        .map(|qi| {
            let f: Option<Vec<f32>> = index
                .features()
                .map(|_| embs[qi].features.iter().map(|v| *v as f32).collect());
            index
                .search(codes.code(qi), f.as_deref(), args.top_n, args.top_k)
                .map_err(Into::into)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub label: String,
    pub bits: usize,
    pub exchange: Option<bool>,
    pub report: EvalReport,
}

/// Trains from scratch on the database split and evaluates the query
/// split: network-encoded queries against the learned database codes.
pub fn train_and_evaluate(cfg: &RunConfig, ds: &Dataset) -> Result<(TrainOutcome, EvalReport)> {
    let (db, labels) = ds.split(Split::TrainDb);
    let (queries, qlabels) = ds.split(Split::Query);
    let outcome = alternate_train(&db, &labels, &cfg.model, cfg.train.clone(), cfg.weights(db.len()))?;
    let index = build_index(&outcome.params, &outcome.codes, &db, &labels)?;
    let report = evaluate_queries(&outcome.params, &index, &queries, &qlabels, cfg.top_n, cfg.top_k)?;
    Ok((outcome, report))
}

/// One row per trained run directory, or, without runs, one row per seed
/// of a fresh training run.
pub fn eval(cfg: &RunConfig, runs: &[PathBuf], seeds: &[u64]) -> Result<Vec<EvalRow>> {
    let ds = cfg.load_dataset()?;
    let (queries, qlabels) = ds.split(Split::Query);
    let mut rows = Vec::new();
    if !runs.is_empty() {
        for run in runs {
            let params = load_model(&run.join(MODEL_FILE))?;
            let index = RetrievalIndex::load(&run.join(INDEX_DIR))?;
            let report = evaluate_queries(&params, &index, &queries, &qlabels, cfg.top_n, cfg.top_k)?;
            rows.push(EvalRow {
                label: run.display().to_string(),
                bits: params.config().bits,
                exchange: None,
                report,
            });
        }
        return Ok(rows);
    }
    let seeds = if seeds.is_empty() { vec![cfg.train.seed] } else { seeds.to_vec() };
    for seed in seeds {
        let mut c = cfg.clone();
        c.train.seed = seed;
        let (_, report) = train_and_evaluate(&c, &ds)?;
        rows.push(EvalRow {
            label: format!("seed={seed}"),
            bits: c.model.bits,
            exchange: Some(c.train.exchange),
            report,
        });
    }
    Ok(rows)
}

pub fn write_eval_table<W: Write>(mut w: W, rows: &[EvalRow], top_k: usize) -> std::io::Result<()> {
    writeln!(w, "{:<24} {:>5} {:>9} {:>8} {:>8} {:>8}", "run", "bits", "exchange", "MAP", format!("P@{top_k}"), "queries")?;
    for r in rows {
        let ex = r.exchange.map_or("-".to_string(), |e| e.to_string());
        writeln!(
            w,
            "{:<24} {:>5} {:>9} {:>8.4} {:>8.4} {:>8}",
            r.label, r.bits, ex, r.report.map, r.report.precision_at_k, r.report.queries
        )?;
    }
    if rows.len() > 1 {
        let n = rows.len() as f64;
        let map = rows.iter().map(|r| r.report.map).sum::<f64>() / n;
        let p = rows.iter().map(|r| r.report.precision_at_k).sum::<f64>() / n;
        writeln!(w, "{:<24} {:>5} {:>9} {:>8.4} {:>8.4} {:>8}", "mean", "", "", map, p, "")?;
    }
    Ok(())
}

pub fn write_eval_csv(path: &Path, rows: &[EvalRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["run", "bits", "exchange", "map", "precision_at_k", "queries"])?;
    for r in rows {
        w.write_record([
            r.label.clone(),
            r.bits.to_string(),
            r.exchange.map_or(String::new(), |e| e.to_string()),
            r.report.map.to_string(),
            r.report.precision_at_k.to_string(),
            r.report.queries.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BenchMode {
    Linear,
    Hamming,
    Pq,
}

impl std::str::FromStr for BenchMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "linear" => Ok(Self::Linear),
            "hamming" => Ok(Self::Hamming),
            "pq" => Ok(Self::Pq),
            other => Err(format!("unknown bench mode `{other}` (expected linear, hamming or pq)")),
        }
    }
}

impl std::fmt::Display for BenchMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Linear => "linear",
            Self::Hamming => "hamming",
            Self::Pq => "pq",
        })
    }
}

#[derive(Clone, Debug)]
pub struct BenchArgs {
    pub n: usize,
    pub bits: usize,
    pub dim: usize,
    pub queries: usize,
    pub reps: usize,
    pub k: usize,
    pub modes: Vec<BenchMode>,
    pub pq_m: usize,
    pub pq_k: usize,
    /// Vectors sampled to train the PQ codebooks.
    pub pq_train: usize,
    pub pq_iters: usize,
    pub seed: u64,
    /// Scan a saved index instead of random data; its first rows are the
    /// queries.
    pub index: Option<PathBuf>,
}

impl Default for BenchArgs {
    fn default() -> Self {
        Self {
            n: 101_000,
            bits: 32,
            dim: 512,
            queries: 10,
            reps: 5,
            k: 10,
            modes: vec![BenchMode::Linear, BenchMode::Hamming],
            pq_m: 8,
            pq_k: 256,
            pq_train: 5_000,
            pq_iters: 8,
            seed: 1,
            index: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BenchRow {
    pub mode: BenchMode,
    pub n: usize,
    /// Bits for codes, dimension for real vectors, subspaces for PQ.
    pub width: usize,
    pub timing: ScanTiming,
    /// Linear-scan median over this mode's median.
    pub speedup: Option<f64>,
    pub memory: u64,
}

fn time_scans(reps: usize, nq: usize, scan: impl Fn(usize) -> Result<usize> + Sync) -> Result<ScanTiming> {
    let mut runs = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        let sink: usize = (0..nq).into_par_iter().map(&scan).sum::<Result<usize>>()?;
        runs.push(start.elapsed().as_secs_f64());
        std::hint::black_box(sink);
    }
    Ok(ScanTiming::from_runs(runs, nq))
}

fn random_codes(n: usize, bits: usize, rng: &mut impl Rng) -> fghash::Result<PackedCodes> {
    let rows: Vec<Vec<i8>> = (0..n)
        .map(|_| (0..bits).map(|_| if rng.random_bool(0.5) { 1 } else { -1 }).collect())
        .collect();
    PackedCodes::from_codes(rows.iter().map(|r| r.as_slice()), bits, vec![0; n])
}

fn random_features(n: usize, dim: usize, rng: &mut impl Rng) -> fghash::Result<FeatureMatrix> {
    let data = (0..n * dim).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    FeatureMatrix::new(n, dim, data)
}

/// Times exhaustive scans of each requested representation.
pub fn bench(args: &BenchArgs) -> Result<Vec<BenchRow>> {
    if args.reps == 0 || args.queries == 0 {
        return Err(ConfigError("bench needs at least one query and one repetition".into()).into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let (db_codes, db_feats, q_codes, q_feats) = match &args.index {
        Some(dir) => {
            let idx = RetrievalIndex::load(dir)?;
            let nq = args.queries.min(idx.len());
            let codes = idx.codes();
            let words = codes.words()[..nq * codes.words_per_code()].to_vec();
            let qc = PackedCodes::from_words(codes.bits(), words, vec![0; nq])?;
            let feats = idx.features().cloned();
            let qf = feats
                .as_ref()
                .map(|f| FeatureMatrix::new(nq, f.dim(), (0..nq).flat_map(|i| f.row(i).to_vec()).collect()))
                .transpose()?;
            (codes.clone(), feats, qc, qf)
        }
        None => {
            let needs_real = args.modes.iter().any(|m| *m != BenchMode::Hamming);
            let codes = random_codes(args.n, args.bits, &mut rng)?;
            let qc = random_codes(args.queries, args.bits, &mut rng)?;
            let (f, qf) = if needs_real {
                (
                    Some(random_features(args.n, args.dim, &mut rng)?),
                    Some(random_features(args.queries, args.dim, &mut rng)?),
                )
            } else {
                (None, None)
            };
            (codes, f, qc, qf)
        }
    };
    let n = db_codes.len();
    if args.k > n {
        return Err(ConfigError(format!("k = {} exceeds database size {n}", args.k)).into());
    }
    let need_feats = || {
        db_feats
            .as_ref()
            .zip(q_feats.as_ref())
            .ok_or_else(|| ConfigError("linear and pq modes need real-valued features".into()))
    };
    let mut rows = Vec::new();
    for mode in &args.modes {
        let row = match mode {
            BenchMode::Hamming => BenchRow {
                mode: *mode,
                n,
                width: db_codes.bits(),
                timing: time_scans(args.reps, q_codes.len(), |qi| {
                    Ok(coarse_rank(q_codes.code(qi), &db_codes, args.k)?.first().map_or(0, |p| p.0))
                })?,
                speedup: None,
                memory: memory_estimate(n, Representation::Codes { bits: db_codes.bits() }),
            },
            BenchMode::Linear => {
                let (db, q) = need_feats()?;
                BenchRow {
                    mode: *mode,
                    n,
                    width: db.dim(),
                    timing: time_scans(args.reps, q.rows(), |qi| {
                        Ok(linear_scan(q.row(qi), db, args.k)?.first().copied().unwrap_or(0))
                    })?,
                    speedup: None,
                    memory: memory_estimate(n, Representation::Real { dim: db.dim() }),
                }
            }
            BenchMode::Pq => {
                let (db, q) = need_feats()?;
                let sample = rand::seq::index::sample(&mut rng, n, args.pq_train.clamp(args.pq_k.min(n), n));
                let train = FeatureMatrix::new(
                    sample.len(),
                    db.dim(),
                    sample.iter().flat_map(|i| db.row(i).to_vec()).collect(),
                )?;
                let (cb, _) = pq_train(&train, args.pq_m, args.pq_k.min(train.rows()), args.pq_iters, args.seed)?;
                let pq = PqIndex::build(cb, db)?;
                BenchRow {
                    mode: *mode,
                    n,
                    width: args.pq_m,
                    timing: time_scans(args.reps, q.rows(), |qi| {
                        Ok(pq.query(q.row(qi), args.k)?.first().copied().unwrap_or(0))
                    })?,
                    speedup: None,
                    memory: memory_estimate(n, Representation::Pq { m: args.pq_m, k: args.pq_k }),
                }
            }
        };
        rows.push(row);
    }
    if let Some(base) = rows.iter().find(|r| r.mode == BenchMode::Linear).map(|r| r.timing.median) {
        for r in &mut rows {
            r.speedup = Some(base / r.timing.median);
        }
    }
    Ok(rows)
}

pub fn write_bench_table<W: Write>(mut w: W, rows: &[BenchRow]) -> std::io::Result<()> {
    writeln!(
        w,
        "{:<8} {:>8} {:>6} {:>12} {:>12} {:>12} {:>9} {:>10}",
        "mode", "n", "width", "median_s", "spread_s", "queries/s", "speedup", "memory"
    )?;
    for r in rows {
        let speedup = r.speedup.map_or("-".to_string(), |s| format!("{s:.1}x"));
        writeln!(
            w,
            "{:<8} {:>8} {:>6} {:>12.6} {:>12.6} {:>12.1} {:>9} {:>10}",
            r.mode.to_string(),
            r.n,
            r.width,
            r.timing.median,
            r.timing.spread(),
            r.timing.throughput,
            speedup,
            format_bytes(r.memory)
        )?;
    }
    Ok(())
}

pub fn write_bench_csv(path: &Path, rows: &[BenchRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["mode", "n", "width", "median_s", "spread_s", "queries_per_s", "speedup", "memory_bytes"])?;
    for r in rows {
        w.write_record([
            r.mode.to_string(),
            r.n.to_string(),
            r.width.to_string(),
            r.timing.median.to_string(),
            r.timing.spread().to_string(),
            r.timing.throughput.to_string(),
            r.speedup.map_or(String::new(), |s| s.to_string()),
            r.memory.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the synthetic dataset as PPM images plus a manifest.
pub fn synth(cfg: &SynthConfig, out: &Path) -> Result<PathBuf> {
    let ds = fghash::dataset::synth_generate(cfg).map_err(|e| match e {
        fghash::Error::Contract(m) => anyhow::Error::new(ConfigError(m)),
        other => other.into(),
    })?;
    Ok(write_manifest(&ds, out)?)
}
