//! Product quantization baseline: per-subspace k-means codebooks, byte
//! codes and asymmetric-distance (lookup table) queries.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Cursor;
use crate::error::{contract_err, dim_err, Error, Result};
use crate::retrieval::FeatureMatrix;

/// `m` subspaces of `k` centroids each, over vectors of dimension `d`.
#[derive(Clone, Debug, PartialEq)]
pub struct PqCodebook {
    m: usize,
    k: usize,
    d: usize,
    /// `m × k × (d/m)`, row-major.
    centroids: Vec<f64>,
}

/// k-means objective (sum of squared distances) per subspace, one value
/// per assignment step.
pub type KMeansTrace = Vec<Vec<f64>>;

impl PqCodebook {
    pub fn new(m: usize, k: usize, d: usize, centroids: Vec<f64>) -> Result<Self> {
        check_shape(m, k, d)?;
        if centroids.len() != m * k * (d / m) {
            return dim_err(format!("{} centroid values for m={m}, k={k}, d={d}", centroids.len()));
        }
        if centroids.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("PQ centroids".into()));
        }
        Ok(Self { m, k, d, centroids })
    }

    pub fn subspaces(&self) -> usize {
        self.m
    }

    pub fn centroids_per_subspace(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn sub_dim(&self) -> usize {
        self.d / self.m
    }

    pub fn centroid(&self, sub: usize, c: usize) -> &[f64] {
        let s = self.sub_dim();
        let start = (sub * self.k + c) * s;
        &self.centroids[start..start + s]
    }

    /// Nearest centroid per subspace, ties to the lowest index.
    pub fn encode(&self, v: &[f32]) -> Result<Vec<u8>> {
        if v.len() != self.d {
            return dim_err(format!("vector of length {}, codebook dimension {}", v.len(), self.d));
        }
        let s = self.sub_dim();
        Ok((0..self.m)
            .map(|j| nearest(&v[j * s..(j + 1) * s], (0..self.k).map(|c| self.centroid(j, c))).0 as u8)
            .collect())
    }

    pub fn reconstruct(&self, code: &[u8]) -> Vec<f64> {
        code.iter()
            .enumerate()
            .flat_map(|(j, c)| self.centroid(j, *c as usize).iter().copied())
            .collect()
    }

    /// Squared distances from each query sub-vector to every centroid,
    /// laid out `m × k`.
    pub fn lookup_table(&self, query: &[f32]) -> Result<Vec<f64>> {
        if query.len() != self.d {
            return dim_err(format!("query of length {}, codebook dimension {}", query.len(), self.d));
        }
        let s = self.sub_dim();
        let mut lut = Vec::with_capacity(self.m * self.k);
        for j in 0..self.m {
            let q = &query[j * s..(j + 1) * s];
            for c in 0..self.k {
                lut.push(sq_dist(q, self.centroid(j, c)));
            }
        }
        Ok(lut)
    }
}

fn check_shape(m: usize, k: usize, d: usize) -> Result<()> {
    if m == 0 || k == 0 || d == 0 || !d.is_multiple_of(m) {
        return contract_err(format!("need m > 0 dividing d and k > 0, got m={m}, k={k}, d={d}"));
    }
    if k > 256 {
        return contract_err(format!("k = {k} does not fit one byte per subspace"));
    }
    Ok(())
}

fn sq_dist(a: &[f32], c: &[f64]) -> f64 {
    a.iter().zip(c).map(|(x, y)| (*x as f64 - y).powi(2)).sum()
}

fn nearest<'a>(v: &[f32], centroids: impl Iterator<Item = &'a [f64]>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.enumerate() {
        let d = sq_dist(v, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Trains one k-means codebook per subspace. Initialization samples
/// centroids proportionally to squared distance; clusters left empty by an
/// assignment are moved onto the point farthest from its centroid.
pub fn pq_train(data: &FeatureMatrix, m: usize, k: usize, iters: usize, seed: u64) -> Result<(PqCodebook, KMeansTrace)> {
    let d = data.dim();
    check_shape(m, k, d)?;
    let n = data.rows();
    if n < k {
        return contract_err(format!("{n} training vectors for {k} centroids"));
    }
    let s = d / m;
    let mut centroids = Vec::with_capacity(m * k * s);
    let mut trace = Vec::with_capacity(m);
    for j in 0..m {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(j as u64);
        let sub: Vec<&[f32]> = (0..n).map(|i| &data.row(i)[j * s..(j + 1) * s]).collect();
        let (c, t) = kmeans(&sub, k, iters, &mut rng);
        centroids.extend(c.into_iter().flatten());
        trace.push(t);
    }
    Ok((PqCodebook::new(m, k, d, centroids)?, trace))
}

fn kmeans(points: &[&[f32]], k: usize, iters: usize, rng: &mut impl Rng) -> (Vec<Vec<f64>>, Vec<f64>) {
    let n = points.len();
    let to_f64 = |p: &[f32]| p.iter().map(|v| *v as f64).collect::<Vec<f64>>();
    let mut centroids = vec![to_f64(points[rng.random_range(0..n)])];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, w) in d2.iter().enumerate() {
                if *w > 0.0 && r < *w {
                    pick = i;
                    break;
                }
                r -= w;
            }
            if d2[pick] == 0.0 {
                pick = d2.iter().rposition(|w| *w > 0.0).unwrap_or(pick);
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        let c = to_f64(points[pick]);
        for (w, p) in d2.iter_mut().zip(points) {
            *w = w.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }

    let s = centroids[0].len();
    let mut assign = vec![usize::MAX; n];
    let mut trace = Vec::new();
    for _ in 0..iters.max(1) {
        let mut changed = false;
        let mut objective = 0.0;
        let mut dist = vec![0.0; n];
        for (i, p) in points.iter().enumerate() {
            let (c, d) = nearest(p, centroids.iter().map(|c| c.as_slice()));
            changed |= assign[i] != c;
            assign[i] = c;
            dist[i] = d;
            objective += d;
        }
        trace.push(objective);
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; s]; k];
        let mut counts = vec![0usize; k];
        for (p, a) in points.iter().zip(&assign) {
            counts[*a] += 1;
            sums[*a].iter_mut().zip(p.iter()).for_each(|(acc, v)| *acc += *v as f64);
        }
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                centroids[c] = sums[c].iter().map(|v| v * inv).collect();
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = dist
                    .iter()
                    .enumerate()
                    .fold(0, |best, (i, d)| if *d > dist[best] { i } else { best });
                centroids[c] = to_f64(points[far]);
                dist[far] = 0.0;
            }
        }
    }
    (centroids, trace)
}

/// A PQ-encoded database.
#[derive(Clone, Debug, PartialEq)]
pub struct PqIndex {
    codebook: PqCodebook,
    n: usize,
    codes: Vec<u8>,
}

impl PqIndex {
    pub fn build(codebook: PqCodebook, data: &FeatureMatrix) -> Result<Self> {
        let mut codes = Vec::with_capacity(data.rows() * codebook.m);
        for i in 0..data.rows() {
            codes.extend(codebook.encode(data.row(i))?);
        }
        Ok(Self {
            codebook,
            n: data.rows(),
            codes,
        })
    }

    pub fn codebook(&self) -> &PqCodebook {
        &self.codebook
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn code(&self, i: usize) -> &[u8] {
        let m = self.codebook.m;
        &self.codes[i * m..(i + 1) * m]
    }

    /// Asymmetric squared distance from the query to every item.
    pub fn adc_distances(&self, query: &[f32]) -> Result<Vec<f64>> {
        let lut = self.codebook.lookup_table(query)?;
        let (m, k) = (self.codebook.m, self.codebook.k);
        Ok(self
            .codes
            .chunks(m)
            .map(|code| code.iter().enumerate().map(|(j, c)| lut[j * k + *c as usize]).sum())
            .collect())
    }

    /// Top `top_k` items by ADC distance, ties by id.
    pub fn query(&self, query: &[f32], top_k: usize) -> Result<Vec<usize>> {
        if top_k > self.n {
            return contract_err(format!("K = {top_k} exceeds index size {}", self.n));
        }
        let mut scored: Vec<(f64, usize)> = self.adc_distances(query)?.into_iter().zip(0..).collect();
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if top_k == 0 {
            return Ok(Vec::new());
        }
        if top_k < scored.len() {
            scored.select_nth_unstable_by(top_k - 1, cmp);
            scored.truncate(top_k);
        }
        scored.sort_by(cmp);
        Ok(scored.into_iter().map(|(_, i)| i).collect())
    }

    /// `FHQ1`, `m, k, d` as little-endian u64, centroids as f64, then `n`
    /// as u64 and the `n × m` code bytes.
    pub fn save(&self, path: &Path) -> Result<()> {
        let cb = &self.codebook;
        let mut buf = Vec::with_capacity(36 + cb.centroids.len() * 8 + self.codes.len());
        buf.extend_from_slice(b"FHQ1");
        for v in [cb.m, cb.k, cb.d] {
            buf.extend_from_slice(&(v as u64).to_le_bytes());
        }
        for c in &cb.centroids {
            buf.extend_from_slice(&c.to_le_bytes());
        }
        buf.extend_from_slice(&(self.n as u64).to_le_bytes());
        buf.extend_from_slice(&self.codes);
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let bad = |reason: String| Error::Format { kind: "FHQ1", reason };
        let mut cur = Cursor::new(&bytes, "FHQ1");
        if cur.take(4)? != b"FHQ1" {
            return Err(bad("bad magic".into()));
        }
        let m = cur.u64()? as usize;
        let k = cur.u64()? as usize;
        let d = cur.u64()? as usize;
        check_shape(m, k, d).map_err(|e| bad(e.to_string()))?;
        let count = m * k * (d / m);
        let raw = cur.take(count.checked_mul(8).ok_or_else(|| bad("header sizes overflow".into()))?)?;
        let centroids = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let codebook = PqCodebook::new(m, k, d, centroids).map_err(|e| bad(e.to_string()))?;
        let n = cur.u64()? as usize;
        let codes = cur
            .take(n.checked_mul(m).ok_or_else(|| bad("header sizes overflow".into()))?)?
            .to_vec();
        if !cur.is_done() {
            return Err(bad("trailing bytes".into()));
        }
        if codes.iter().any(|c| *c as usize >= k) {
            return Err(bad("code byte out of range".into()));
        }
        Ok(Self { codebook, n, codes })
    }
}
