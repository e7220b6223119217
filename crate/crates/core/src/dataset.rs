//! Labeled image sets: a synthetic fine-grained generator, PPM/CSV
//! manifest ingestion, and pairwise similarity labels.
//!
//! A manifest is a CSV file of `relative_path,label,split` rows, where the
//! split is `train-db` or `query` and paths are relative to the manifest's
//! directory. Images are binary PPM (`P6`, 8-bit).

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{contract_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    TrainDb,
    Query,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::TrainDb => "train-db",
            Split::Query => "query",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train-db" => Ok(Split::TrainDb),
            "query" => Ok(Split::Query),
            other => Err(format!("unknown split tag `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub splits: Vec<Split>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|i| self.splits[*i] == split).collect()
    }

    /// Images and labels of one split, in dataset order.
    pub fn split(&self, split: Split) -> (Vec<Tensor>, Vec<usize>) {
        self.indices(split)
            .into_iter()
            .map(|i| (self.images[i].clone(), self.labels[i]))
            .unzip()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    /// Checks that labels are dense and every class occurs in both splits.
    pub fn validate_splits(&self) -> Result<()> {
        for class in 0..self.num_classes() {
            for split in [Split::TrainDb, Split::Query] {
                if !(0..self.len()).any(|i| self.labels[i] == class && self.splits[i] == split) {
                    return contract_err(format!("class {class} is missing from split {split}"));
                }
            }
        }
        Ok(())
    }
}

/// `S[i][j] = +1` when labels match, else `-1`; row-major `[m, n]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SimilarityMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<i8>,
}

impl SimilarityMatrix {
    pub fn get(&self, i: usize, j: usize) -> i8 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[i8] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

pub fn build_similarity(query_labels: &[usize], db_labels: &[usize]) -> SimilarityMatrix {
    let data = query_labels
        .iter()
        .flat_map(|q| db_labels.iter().map(move |d| if q == d { 1 } else { -1 }))
        .collect();
    SimilarityMatrix {
        rows: query_labels.len(),
        cols: db_labels.len(),
        data,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub per_class_db: usize,
    pub per_class_query: usize,
    pub image_side: usize,
    /// Class-specific patches per image.
    pub parts: usize,
    pub patch_size: usize,
    /// Standard deviation of each patch's position jitter, in pixels.
    pub position_jitter: f64,
    /// Standard deviation of additive per-pixel noise.
    pub pixel_noise: f64,
    /// Amplitude of the class-specific perturbation of each shared patch.
    pub class_contrast: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 8,
            per_class_db: 50,
            per_class_query: 10,
            image_side: 32,
            parts: 4,
            patch_size: 6,
            position_jitter: 1.0,
            pixel_noise: 0.05,
            class_contrast: 0.35,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.parts == 0 {
            return contract_err("synthetic images need at least one part");
        }
        if self.num_classes == 0 {
            return contract_err("need at least one class");
        }
        if self.patch_size == 0 || self.patch_size * 2 > self.image_side {
            return contract_err(format!(
                "patch of side {} does not fit a {}-pixel image",
                self.patch_size, self.image_side
            ));
        }
        if self.position_jitter < 0.0 || self.pixel_noise < 0.0 || self.class_contrast < 0.0 {
            return contract_err("noise and contrast settings must be nonnegative");
        }
        Ok(())
    }
}

/// Nominal top-left corners of the part patches, spread on a ring.
fn part_anchors(cfg: &SynthConfig) -> Vec<(f64, f64)> {
    let side = cfg.image_side as f64;
    let p = cfg.patch_size as f64;
    let radius = (side - p) / 4.0;
    let center = (side - p) / 2.0;
    (0..cfg.parts)
        .map(|j| {
            let angle = std::f64::consts::TAU * j as f64 / cfg.parts as f64 + 0.4;
            (center + radius * angle.sin(), center + radius * angle.cos())
        })
        .collect()
}

/// Generates a dataset in which every class shares one background texture
/// and one set of part patterns, and differs only by small per-class
/// perturbations of the patches. Patch positions jitter per image.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let side = cfg.image_side;
    let ps = cfg.patch_size;
    let patch_len = ps * ps * 3;

    // smooth background: a few low-frequency waves per channel
    let waves: Vec<(f64, f64, f64, f64)> = (0..3 * 3)
        .map(|_| {
            (
                rng.random_range(0.5..2.5),
                rng.random_range(0.5..2.5),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.05..0.12),
            )
        })
        .collect();
    let mut background = vec![0.0; side * side * 3];
    for y in 0..side {
        for x in 0..side {
            for c in 0..3 {
                let mut v = 0.5;
                for (fx, fy, phase, amp) in &waves[c * 3..c * 3 + 3] {
                    let t = std::f64::consts::TAU * (fx * x as f64 + fy * y as f64) / side as f64;
                    v += amp * (t + phase).sin();
                }
                background[(y * side + x) * 3 + c] = v;
            }
        }
    }

    let base: Vec<Vec<f64>> = (0..cfg.parts)
        .map(|_| (0..patch_len).map(|_| rng.random_range(0.1..0.9)).collect())
        .collect();
    let patterns: Vec<Vec<Vec<f64>>> = (0..cfg.num_classes)
        .map(|_| {
            base.iter()
                .map(|b| {
                    b.iter()
                        .map(|v| (v + cfg.class_contrast * rng.random_range(-1.0..1.0)).clamp(0.0, 1.0))
                        .collect()
                })
                .collect()
        })
        .collect();

    let anchors = part_anchors(cfg);
    let jitter = Normal::new(0.0, cfg.position_jitter).unwrap();
    let noise = Normal::new(0.0, cfg.pixel_noise).unwrap();
    let max_corner = (side - ps) as f64;

    let mut ds = Dataset {
        images: Vec::new(),
        labels: Vec::new(),
        splits: Vec::new(),
    };
    for (split, per_class) in [(Split::TrainDb, cfg.per_class_db), (Split::Query, cfg.per_class_query)] {
        for (class, class_patterns) in patterns.iter().enumerate() {
            for _ in 0..per_class {
                let mut img = background.clone();
                for (j, (ay, ax)) in anchors.iter().enumerate() {
                    let oy = (ay + jitter.sample(&mut rng)).round().clamp(0.0, max_corner) as usize;
                    let ox = (ax + jitter.sample(&mut rng)).round().clamp(0.0, max_corner) as usize;
                    let pat = &class_patterns[j];
                    for py in 0..ps {
                        for px in 0..ps {
                            let dst = ((oy + py) * side + ox + px) * 3;
                            let src = (py * ps + px) * 3;
                            img[dst..dst + 3].copy_from_slice(&pat[src..src + 3]);
                        }
                    }
                }
                if cfg.pixel_noise > 0.0 {
                    for v in img.iter_mut() {
                        *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
                    }
                }
                ds.images.push(Tensor::new(vec![side, side, 3], img)?);
                ds.labels.push(class);
                ds.splits.push(split);
            }
        }
    }
    Ok(ds)
}

fn ingest_err(line: usize, msg: impl fmt::Display) -> Error {
    Error::Ingestion(format!("manifest line {line}: {msg}"))
}

/// Parses a binary `P6` PPM with maxval at most 255 into `[H, W, 3]`
/// values scaled to `[0, 1]`.
pub fn parse_ppm(bytes: &[u8]) -> std::result::Result<Tensor, String> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else if bytes[pos].is_ascii_whitespace() {
                pos += 1;
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err("truncated PPM header".into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P6" {
        return Err(format!("expected magic P6, found `{}`", fields[0]));
    }
    let num = |s: &str, what: &str| -> std::result::Result<usize, String> {
        s.parse::<usize>().map_err(|_| format!("bad PPM {what} `{s}`"))
    };
    let w = num(&fields[1], "width")?;
    let h = num(&fields[2], "height")?;
    let maxval = num(&fields[3], "maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(format!("unsupported PPM maxval {maxval}"));
    }
    if w == 0 || h == 0 {
        return Err("PPM has zero extent".into());
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err("missing whitespace after PPM header".into());
    }
    pos += 1;
    let need = w * h * 3;
    if bytes.len() < pos + need {
        return Err(format!("PPM raster needs {need} bytes, found {}", bytes.len() - pos));
    }
    let scale = 1.0 / maxval as f64;
    let data = bytes[pos..pos + need].iter().map(|b| *b as f64 * scale).collect();
    Tensor::new(vec![h, w, 3], data).map_err(|e| e.to_string())
}

pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let (h, w, c) = image.hwc()?;
    if c != 3 {
        return contract_err(format!("PPM needs 3 channels, image has {c}"));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

/// Nearest-neighbor resize of a `[H, W, C]` image to `side x side`.
pub fn resize_nearest(image: &Tensor, side: usize) -> Result<Tensor> {
    let (h, w, c) = image.hwc()?;
    if h == side && w == side {
        return Ok(image.clone());
    }
    let src = image.data();
    let mut out = Vec::with_capacity(side * side * c);
    for y in 0..side {
        let sy = y * h / side;
        for x in 0..side {
            let sx = x * w / side;
            let base = (sy * w + sx) * c;
            out.extend_from_slice(&src[base..base + c]);
        }
    }
    Tensor::new(vec![side, side, c], out)
}

/// One parsed manifest row.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: usize,
    pub split: Split,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Ingestion(format!("cannot read manifest {}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut entries = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 1;
        let rec = rec.map_err(|e| ingest_err(line, e))?;
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        if rec.len() != 3 {
            return Err(ingest_err(line, format!("expected 3 fields, found {}", rec.len())));
        }
        if line == 1 && &rec[0] == "relative_path" {
            continue;
        }
        let label = rec[1]
            .parse::<usize>()
            .map_err(|_| ingest_err(line, format!("bad label `{}`", &rec[1])))?;
        let split = rec[2].parse::<Split>().map_err(|e| ingest_err(line, e))?;
        entries.push(ManifestEntry {
            path: base.join(&rec[0]),
            label,
            split,
        });
    }
    Ok(entries)
}

/// Loads every manifest row, resizing images to `side x side`.
pub fn load_manifest(path: &Path, side: usize) -> Result<Dataset> {
    let entries = read_manifest(path)?;
    let mut ds = Dataset {
        images: Vec::with_capacity(entries.len()),
        labels: Vec::with_capacity(entries.len()),
        splits: Vec::with_capacity(entries.len()),
    };
    for (i, e) in entries.iter().enumerate() {
        let line = i + 1;
        let bytes = fs::read(&e.path)
            .map_err(|err| ingest_err(line, format!("cannot read {}: {err}", e.path.display())))?;
        let img = parse_ppm(&bytes).map_err(|msg| ingest_err(line, format!("{}: {msg}", e.path.display())))?;
        ds.images.push(resize_nearest(&img, side)?);
        ds.labels.push(e.label);
        ds.splits.push(e.split);
    }
    Ok(ds)
}

/// Writes each image as `img_<index>.ppm` under `dir` together with
/// `manifest.csv`, returning the manifest path.
pub fn write_manifest(ds: &Dataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let manifest = dir.join("manifest.csv");
    let mut out = fs::File::create(&manifest)?;
    for (i, img) in ds.images.iter().enumerate() {
        let name = format!("img_{i:05}.ppm");
        fs::write(dir.join(&name), encode_ppm(img)?)?;
        writeln!(out, "{name},{},{}", ds.labels[i], ds.splits[i])?;
    }
    Ok(manifest)
}
