//! Bit-packed code index, Hamming ranking with real-feature re-ranking,
//! retrieval metrics and memory/speed accounting.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use crate::checkpoint::Cursor;
use crate::error::{contract_err, dim_err, Error, Result};

/// 64-bit words needed for a `q`-bit code.
pub fn words_for(q: usize) -> usize {
    q.div_ceil(64)
}

/// Packs a sign vector: bit `b` is set iff `code[b] == +1`, LSB-first.
pub fn pack(code: &[i8]) -> Result<Vec<u64>> {
    let mut words = vec![0u64; words_for(code.len())];
    for (b, v) in code.iter().enumerate() {
        match v {
            1 => words[b / 64] |= 1 << (b % 64),
            -1 => {}
            other => return contract_err(format!("code entry {b} is {other}, expected -1 or +1")),
        }
    }
    Ok(words)
}

pub fn unpack(words: &[u64], q: usize) -> Vec<i8> {
    (0..q)
        .map(|b| if words[b / 64] >> (b % 64) & 1 == 1 { 1 } else { -1 })
        .collect()
}

pub fn hamming(a: &[u64], b: &[u64]) -> Result<u32> {
    if a.len() != b.len() {
        return dim_err(format!("packed codes of {} and {} words", a.len(), b.len()));
    }
    Ok(hamming_unchecked(a, b))
}

#[inline]
fn hamming_unchecked(a: &[u64], b: &[u64]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

/// Packed codes of `n` items with their class labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedCodes {
    n: usize,
    q: usize,
    words: Vec<u64>,
    labels: Vec<usize>,
}

impl PackedCodes {
    pub fn from_codes<'a>(codes: impl IntoIterator<Item = &'a [i8]>, q: usize, labels: Vec<usize>) -> Result<Self> {
        let mut words = Vec::with_capacity(labels.len() * words_for(q));
        let mut n = 0;
        for (i, c) in codes.into_iter().enumerate() {
            if c.len() != q {
                return dim_err(format!("code {i} has length {}, expected {q}", c.len()));
            }
            words.extend(pack(c)?);
            n += 1;
        }
        if n != labels.len() {
            return dim_err(format!("{n} codes but {} labels", labels.len()));
        }
        Ok(Self { n, q, words, labels })
    }

    /// Wraps already-packed words. Padding bits past `q` must be zero.
    pub fn from_words(q: usize, words: Vec<u64>, labels: Vec<usize>) -> Result<Self> {
        let w = words_for(q);
        let n = labels.len();
        if words.len() != n * w {
            return dim_err(format!("{} words for {n} codes of {w} words", words.len()));
        }
        if !q.is_multiple_of(64) && w > 0 {
            let mask = !0u64 << (q % 64);
            if words.chunks(w).any(|c| c[w - 1] & mask != 0) {
                return contract_err("padding bits beyond q are set");
            }
        }
        Ok(Self { n, q, words, labels })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn bits(&self) -> usize {
        self.q
    }

    pub fn words_per_code(&self) -> usize {
        words_for(self.q)
    }

    pub fn code(&self, i: usize) -> &[u64] {
        let w = self.words_per_code();
        &self.words[i * w..(i + 1) * w]
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn unpack_row(&self, i: usize) -> Vec<i8> {
        unpack(self.code(i), self.q)
    }

    /// `FHC1`, then `n` and `q` as little-endian u64, then the words.
    pub fn write_fhc1(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(20 + self.words.len() * 8);
        buf.extend_from_slice(b"FHC1");
        buf.extend_from_slice(&(self.n as u64).to_le_bytes());
        buf.extend_from_slice(&(self.q as u64).to_le_bytes());
        for w in &self.words {
            buf.extend_from_slice(&w.to_le_bytes());
        }
        fs::write(path, buf)?;
        Ok(())
    }

    /// Reads an `FHC1` file; labels come from a separate source.
    pub fn read_fhc1(path: &Path, labels: Vec<usize>) -> Result<Self> {
        let bytes = fs::read(path)?;
        let bad = |reason: String| Error::Format { kind: "FHC1", reason };
        let mut cur = Cursor::new(&bytes, "FHC1");
        if cur.take(4)? != b"FHC1" {
            return Err(bad("bad magic".into()));
        }
        let n = cur.u64()? as usize;
        let q = cur.u64()? as usize;
        if n != labels.len() {
            return Err(bad(format!("header says {n} codes, {} labels given", labels.len())));
        }
        let count = n
            .checked_mul(words_for(q))
            .ok_or_else(|| bad("header sizes overflow".into()))?;
        let mut words = Vec::with_capacity(count);
        for _ in 0..count {
            words.push(cur.u64()?);
        }
        if !cur.is_done() {
            return Err(bad("trailing bytes".into()));
        }
        Self::from_words(q, words, labels).map_err(|e| bad(e.to_string()))
    }
}

/// Row-major single-precision feature matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    n: usize,
    d: usize,
    data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(n: usize, d: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != n * d {
            return dim_err(format!("{} values for a {n}x{d} feature matrix", data.len()));
        }
        Ok(Self { n, d, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * d);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != d {
                return dim_err(format!("feature row {i} has length {}, expected {d}", r.len()));
            }
            data.extend(r.iter().map(|v| *v as f32));
        }
        Ok(Self { n: rows.len(), d, data })
    }

    pub fn rows(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    /// `FHF1`, then `n` and `d` as little-endian u64, then f32 values.
    pub fn write_fhf1(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(20 + self.data.len() * 4);
        buf.extend_from_slice(b"FHF1");
        buf.extend_from_slice(&(self.n as u64).to_le_bytes());
        buf.extend_from_slice(&(self.d as u64).to_le_bytes());
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn read_fhf1(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let bad = |reason: String| Error::Format { kind: "FHF1", reason };
        let mut cur = Cursor::new(&bytes, "FHF1");
        if cur.take(4)? != b"FHF1" {
            return Err(bad("bad magic".into()));
        }
        let n = cur.u64()? as usize;
        let d = cur.u64()? as usize;
        let count = n.checked_mul(d).ok_or_else(|| bad("header sizes overflow".into()))?;
        let raw = cur.take(count.checked_mul(4).ok_or_else(|| bad("header sizes overflow".into()))?)?;
        if !cur.is_done() {
            return Err(bad("trailing bytes".into()));
        }
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self { n, d, data })
    }
}

/// Writes `id,label` rows with a header.
pub fn write_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_io)?;
    w.write_record(["id", "label"]).map_err(csv_io)?;
    for (i, l) in labels.iter().enumerate() {
        w.write_record([i.to_string(), l.to_string()]).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads `id,label` rows; ids must run `0, 1, 2, ...`.
pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(csv_io)?;
    let mut labels = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_io)?;
        let bad = || Error::Format {
            kind: "labels CSV",
            reason: format!("row {} must be `id,label` with id {}", line + 1, labels.len()),
        };
        if rec.len() != 2 {
            return Err(bad());
        }
        let id: usize = rec[0].parse().map_err(|_| bad())?;
        let label: usize = rec[1].parse().map_err(|_| bad())?;
        if id != labels.len() {
            return Err(bad());
        }
        labels.push(label);
    }
    Ok(labels)
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Packed codes plus optional re-rank features. Immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalIndex {
    codes: PackedCodes,
    features: Option<FeatureMatrix>,
}

pub const CODES_FILE: &str = "codes.fhc1";
pub const LABELS_FILE: &str = "labels.csv";
pub const FEATURES_FILE: &str = "features.fhf1";

impl RetrievalIndex {
    pub fn new(codes: PackedCodes, features: Option<FeatureMatrix>) -> Result<Self> {
        if let Some(f) = &features {
            if f.rows() != codes.len() {
                return dim_err(format!("{} feature rows for {} codes", f.rows(), codes.len()));
            }
        }
        Ok(Self { codes, features })
    }

    pub fn codes(&self) -> &PackedCodes {
        &self.codes
    }

    pub fn features(&self) -> Option<&FeatureMatrix> {
        self.features.as_ref()
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    /// Saves `codes.fhc1`, `labels.csv` and, when present, `features.fhf1`
    /// into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.codes.write_fhc1(&dir.join(CODES_FILE))?;
        write_labels(&dir.join(LABELS_FILE), self.codes.labels())?;
        let fpath = dir.join(FEATURES_FILE);
        match &self.features {
            Some(f) => f.write_fhf1(&fpath)?,
            None if fpath.exists() => fs::remove_file(fpath)?,
            None => {}
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let labels = read_labels(&dir.join(LABELS_FILE))?;
        let codes = PackedCodes::read_fhc1(&dir.join(CODES_FILE), labels)?;
        let fpath = dir.join(FEATURES_FILE);
        let features = if fpath.exists() {
            Some(FeatureMatrix::read_fhf1(&fpath)?)
        } else {
            None
        };
        Self::new(codes, features)
    }

    /// The `top_n` nearest items by Hamming distance, ties by ascending id.
    pub fn coarse_rank(&self, query: &[u64], top_n: usize) -> Result<Vec<(usize, u32)>> {
        coarse_rank(query, &self.codes, top_n)
    }

    /// Reorders `candidates` by Euclidean distance to `query` on the stored
    /// features, ties by id, and keeps the first `k`.
    pub fn rerank(&self, query: &[f32], candidates: &[usize], k: usize) -> Result<Vec<usize>> {
        let Some(f) = &self.features else {
            return contract_err("index has no re-rank features");
        };
        rerank(query, candidates, f, k)
    }

    /// Coarse Hamming shortlist of `top_n`, then re-rank to `top_k` when a
    /// query feature is given. Without a feature the shortlist is truncated.
    pub fn search(&self, code: &[u64], feature: Option<&[f32]>, top_n: usize, top_k: usize) -> Result<Vec<usize>> {
        if top_k > top_n {
            return contract_err(format!("K = {top_k} exceeds N = {top_n}"));
        }
        let coarse: Vec<usize> = self.coarse_rank(code, top_n)?.into_iter().map(|(i, _)| i).collect();
        match feature {
            Some(f) => self.rerank(f, &coarse, top_k),
            None if top_k == top_n => Ok(coarse),
            None => Ok(coarse[..top_k].to_vec()),
        }
    }
}

pub fn coarse_rank(query: &[u64], codes: &PackedCodes, top_n: usize) -> Result<Vec<(usize, u32)>> {
    if top_n > codes.len() {
        return contract_err(format!("N = {top_n} exceeds index size {}", codes.len()));
    }
    if query.len() != codes.words_per_code() {
        return dim_err(format!(
            "query has {} words, index codes have {}",
            query.len(),
            codes.words_per_code()
        ));
    }
    let w = codes.words_per_code();
    let dists: Vec<u32> = codes.words.chunks(w.max(1)).take(codes.len()).map(|c| hamming_unchecked(query, c)).collect();
    Ok(select_by_histogram(&dists, codes.bits(), top_n))
}

/// The `k` smallest distances in `0..=max`, ties by index, via counting.
fn select_by_histogram(dists: &[u32], max: usize, k: usize) -> Vec<(usize, u32)> {
    if k == 0 {
        return Vec::new();
    }
    let mut hist = vec![0usize; max + 1];
    for d in dists {
        hist[*d as usize] += 1;
    }
    let mut threshold = 0;
    let mut seen = 0;
    for (d, c) in hist.iter().enumerate() {
        seen += c;
        if seen >= k {
            threshold = d as u32;
            break;
        }
    }
    // Bucket offsets for a stable counting sort of the survivors.
    let mut offsets = vec![0usize; threshold as usize + 2];
    for d in 0..=threshold as usize {
        offsets[d + 1] = offsets[d] + hist[d];
    }
    let mut out = vec![(0usize, 0u32); offsets[threshold as usize + 1]];
    for (i, d) in dists.iter().enumerate() {
        if *d <= threshold {
            let slot = &mut offsets[*d as usize];
            out[*slot] = (i, *d);
            *slot += 1;
        }
    }
    out.truncate(k);
    out
}

pub fn squared_distance(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn rerank(query: &[f32], candidates: &[usize], features: &FeatureMatrix, k: usize) -> Result<Vec<usize>> {
    if k > candidates.len() {
        return contract_err(format!("K = {k} exceeds {} candidates", candidates.len()));
    }
    if query.len() != features.dim() {
        return dim_err(format!("query feature has length {}, index {}", query.len(), features.dim()));
    }
    let mut scored = Vec::with_capacity(candidates.len());
    for &c in candidates {
        if c >= features.rows() {
            return Err(Error::Lookup(format!("candidate {c} not in index")));
        }
        scored.push((squared_distance(query, features.row(c)), c));
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().take(k).map(|(_, c)| c).collect())
}

/// Exact top-`k` by squared Euclidean distance over all rows, ties by id.
pub fn linear_scan(query: &[f32], features: &FeatureMatrix, k: usize) -> Result<Vec<usize>> {
    if k > features.rows() {
        return contract_err(format!("K = {k} exceeds index size {}", features.rows()));
    }
    if query.len() != features.dim() {
        return dim_err(format!("query feature has length {}, index {}", query.len(), features.dim()));
    }
    let mut scored: Vec<(f32, usize)> = (0..features.rows())
        .map(|i| (squared_distance(query, features.row(i)), i))
        .collect();
    let cmp = |a: &(f32, usize), b: &(f32, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k == 0 {
        return Ok(Vec::new());
    }
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, cmp);
        scored.truncate(k);
    }
    scored.sort_by(cmp);
    Ok(scored.into_iter().map(|(_, i)| i).collect())
}

/// Fraction of the first `k` ranked items sharing `query_label`.
pub fn precision_at_k(ranked_labels: &[usize], query_label: usize, k: usize) -> Result<f64> {
    if ranked_labels.is_empty() || k == 0 {
        return contract_err("precision needs a nonempty list and K > 0");
    }
    if k > ranked_labels.len() {
        return contract_err(format!("K = {k} exceeds list length {}", ranked_labels.len()));
    }
    let hits = ranked_labels[..k].iter().filter(|l| **l == query_label).count();
    Ok(hits as f64 / k as f64)
}

/// Mean over relevant positions `r` of precision@r; `None` when nothing is
/// relevant.
pub fn average_precision(relevance: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, rel) in relevance.iter().enumerate() {
        if *rel {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// MAP over full rankings. Queries without any relevant item are skipped
/// with a warning; an error is returned when none remain.
pub fn mean_average_precision(rankings: &[Vec<usize>], query_labels: &[usize]) -> Result<f64> {
    if rankings.len() != query_labels.len() {
        return dim_err(format!("{} rankings for {} queries", rankings.len(), query_labels.len()));
    }
    let mut total = 0.0;
    let mut counted = 0usize;
    for (qi, (ranked, label)) in rankings.iter().zip(query_labels).enumerate() {
        let rel: Vec<bool> = ranked.iter().map(|l| l == label).collect();
        match average_precision(&rel) {
            Some(ap) => {
                total += ap;
                counted += 1;
            }
            None => log::warn!("query {qi} has no relevant database items; excluded from MAP"),
        }
    }
    if counted == 0 {
        return contract_err("no query has a relevant database item");
    }
    Ok(total / counted as f64)
}

/// MAP over the full Hamming ranking and mean P@K after coarse ranking
/// and re-ranking.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    pub map: f64,
    pub precision_at_k: f64,
    pub queries: usize,
}

/// Scores labeled query codes (and features, for re-ranking) against
/// `index`.
pub fn evaluate(
    index: &RetrievalIndex,
    queries: &PackedCodes,
    query_features: Option<&FeatureMatrix>,
    top_n: usize,
    top_k: usize,
) -> Result<EvalReport> {
    if queries.is_empty() {
        return contract_err("no queries to evaluate");
    }
    if let Some(f) = query_features {
        if f.rows() != queries.len() {
            return dim_err(format!("{} query features for {} queries", f.rows(), queries.len()));
        }
    }
    let db_labels = index.codes().labels();
    let mut rankings = Vec::with_capacity(queries.len());
    let mut precision = 0.0;
    for qi in 0..queries.len() {
        let full = index.coarse_rank(queries.code(qi), index.len())?;
        rankings.push(full.iter().map(|(i, _)| db_labels[*i]).collect::<Vec<_>>());
        let feature = match (query_features, index.features()) {
            (Some(f), Some(_)) => Some(f.row(qi)),
            _ => None,
        };
        let top = index.search(queries.code(qi), feature, top_n, top_k)?;
        let labels: Vec<usize> = top.iter().map(|i| db_labels[*i]).collect();
        precision += precision_at_k(&labels, queries.labels()[qi], top_k)?;
    }
    Ok(EvalReport {
        map: mean_average_precision(&rankings, queries.labels())?,
        precision_at_k: precision / queries.len() as f64,
        queries: queries.len(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Representation {
    /// Binary codes of `bits` bits.
    Codes { bits: usize },
    /// Single-precision real vectors.
    Real { dim: usize },
    /// Product-quantized vectors with `m` subspaces of `k` centroids.
    Pq { m: usize, k: usize },
}

/// Payload bytes for `n` items, bookkeeping excluded.
pub fn memory_estimate(n: usize, rep: Representation) -> u64 {
    let n = n as u64;
    match rep {
        Representation::Codes { bits } => (n * bits as u64).div_ceil(8),
        Representation::Real { dim } => n * dim as u64 * 4,
        Representation::Pq { m, k } => {
            let bits = if k <= 1 { 0 } else { (usize::BITS - (k - 1).leading_zeros()) as u64 };
            (n * m as u64 * bits).div_ceil(8)
        }
    }
}

/// Decimal units with one fractional digit: `404.0KB`, `206.8MB`.
pub fn format_bytes(bytes: u64) -> String {
    const UNITS: [(&str, f64); 3] = [("GB", 1e9), ("MB", 1e6), ("KB", 1e3)];
    for (unit, scale) in UNITS {
        if bytes as f64 >= scale {
            return format!("{:.1}{unit}", bytes as f64 / scale);
        }
    }
    format!("{bytes}B")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScanMode {
    PackedHamming,
    RealLinear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScanTiming {
    /// Seconds per repetition over all queries, sorted ascending.
    pub runs: Vec<f64>,
    pub median: f64,
    /// Queries per second at the median.
    pub throughput: f64,
}

impl ScanTiming {
    pub fn from_runs(mut runs: Vec<f64>, queries: usize) -> Self {
        runs.sort_by(f64::total_cmp);
        let mid = runs.len() / 2;
        let median = if runs.is_empty() {
            f64::NAN
        } else if runs.len() % 2 == 1 {
            runs[mid]
        } else {
            0.5 * (runs[mid - 1] + runs[mid])
        };
        Self {
            runs,
            median,
            throughput: queries as f64 / median,
        }
    }

    pub fn spread(&self) -> f64 {
        match (self.runs.first(), self.runs.last()) {
            (Some(a), Some(b)) => b - a,
            _ => f64::NAN,
        }
    }
}

/// Times `reps` exhaustive scans of every query against `index`, keeping
/// the top `k` per query.
pub fn bench_scan(
    index: &RetrievalIndex,
    query_codes: &PackedCodes,
    query_features: Option<&FeatureMatrix>,
    mode: ScanMode,
    k: usize,
    reps: usize,
) -> Result<ScanTiming> {
    if reps == 0 {
        return contract_err("need at least one repetition");
    }
    let nq = match mode {
        ScanMode::PackedHamming => query_codes.len(),
        ScanMode::RealLinear => {
            if index.features().is_none() {
                return contract_err("linear scan needs index features");
            }
            query_features
                .ok_or_else(|| Error::Contract("linear scan needs query features".into()))?
                .rows()
        }
    };
    let mut runs = Vec::with_capacity(reps);
    let mut sink = 0usize;
    for _ in 0..reps {
        let start = Instant::now();
        for qi in 0..nq {
            let top = match mode {
                ScanMode::PackedHamming => index.coarse_rank(query_codes.code(qi), k)?.first().map(|p| p.0),
                ScanMode::RealLinear => {
                    linear_scan(query_features.unwrap().row(qi), index.features().unwrap(), k)?.first().copied()
                }
            };
            sink = sink.wrapping_add(top.unwrap_or(0));
        }
        runs.push(start.elapsed().as_secs_f64());
    }
    std::hint::black_box(sink);
    Ok(ScanTiming::from_runs(runs, nq))
}

/// Writes ranked ids as CSV rows `query,rank,id`.
pub fn write_rankings<W: Write>(mut w: W, rankings: &[Vec<usize>]) -> std::io::Result<()> {
    writeln!(w, "query,rank,id")?;
    for (q, ids) in rankings.iter().enumerate() {
        for (r, id) in ids.iter().enumerate() {
            writeln!(w, "{q},{},{id}", r + 1)?;
        }
    }
    Ok(())
}
