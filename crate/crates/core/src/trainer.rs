//! Alternating optimization of network parameters, database codes and
//! anchors, plus out-of-sample encoding.
//!
//! Each outer iteration:
//!
//! 1. samples `m` database items as the query subset;
//! 2. runs minibatch SGD on the network with codes and anchors fixed;
//! 3. re-encodes the subset and sweeps the closed-form column updates of
//!    the database codes `V` (all `n` rows);
//! 4. refreshes the anchors from the subset's local vectors.
//!
//! The per-sample loss pairs the sample's relaxed code with every row of
//! `V`, so `S` is `m x n` and items never drawn into a subset still get
//! codes.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::anchor::{draw_xi, exchange, AnchorBank, ClassGroups};
use crate::autodiff::Graph;
use crate::checkpoint::Checkpoint;
use crate::dataset::{build_similarity, SimilarityMatrix};
use crate::error::{contract_err, dim_err, Error, Result};
use crate::losses::{
    channel_loss, spatial_loss, squared_loss_rows, weighted_total, LossWeights, ObjectiveTerms,
};
use crate::model::{
    embed, forward_features, hash_centered, hash_input, Embedding, HashMode, ModelConfig, ModelParams,
};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Outer alternating iterations.
    pub outer_iters: usize,
    /// SGD passes over the sampled subset per outer iteration.
    pub epochs_per_iter: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Fractions of `outer_iters` after which the learning rate drops 10x.
    pub lr_decay_at: Vec<f64>,
    /// Size `m` of the per-iteration query subset.
    pub samples_per_epoch: usize,
    /// Leading fraction of outer iterations run without feature exchange.
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub exchange: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            outer_iters: 15,
            epochs_per_iter: 2,
            batch_size: 64,
            learning_rate: 0.001,
            lr_decay_at: vec![0.6, 0.8],
            samples_per_epoch: 200,
            warmup_fraction: 0.25,
            weight_decay: 1e-4,
            momentum: 0.0,
            exchange: true,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.outer_iters == 0 || self.batch_size == 0 || self.samples_per_epoch == 0 {
            return contract_err("outer_iters, batch_size and samples_per_epoch must be positive");
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 || self.weight_decay < 0.0 {
            return contract_err("learning rate must be positive and weight decay nonnegative");
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return contract_err(format!("warmup fraction {} outside [0, 1]", self.warmup_fraction));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return contract_err(format!("momentum {} outside [0, 1)", self.momentum));
        }
        Ok(())
    }

    /// Learning rate in effect during outer iteration `iter` (0-based).
    pub fn lr_at(&self, iter: usize) -> f64 {
        let progress = iter as f64 / self.outer_iters as f64;
        let drops = self.lr_decay_at.iter().filter(|m| progress >= **m).count();
        self.learning_rate * 0.1f64.powi(drops as i32)
    }

    /// Number of leading outer iterations without exchange.
    pub fn warmup_iters(&self) -> usize {
        (self.warmup_fraction * self.outer_iters as f64).ceil() as usize
    }
}

/// Database codes `V ∈ {−1,+1}^{n×q}`, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodeMatrix {
    n: usize,
    q: usize,
    data: Vec<i8>,
}

impl CodeMatrix {
    pub fn from_rows(rows: &[Vec<i8>], q: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * q);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != q {
                return dim_err(format!("code row {i} has length {}, expected {q}", r.len()));
            }
            if r.iter().any(|v| *v != 1 && *v != -1) {
                return contract_err(format!("code row {i} has entries outside {{-1, +1}}"));
            }
            data.extend_from_slice(r);
        }
        Ok(Self { n: rows.len(), q, data })
    }

    pub fn random(n: usize, q: usize, rng: &mut impl Rng) -> Self {
        let data = (0..n * q).map(|_| if rng.random_bool(0.5) { 1 } else { -1 }).collect();
        Self { n, q, data }
    }

    pub fn rows(&self) -> usize {
        self.n
    }

    pub fn bits(&self) -> usize {
        self.q
    }

    pub fn row(&self, i: usize) -> &[i8] {
        &self.data[i * self.q..(i + 1) * self.q]
    }

    pub fn get(&self, i: usize, k: usize) -> i8 {
        self.data[i * self.q + k]
    }

    pub fn column(&self, k: usize) -> Vec<i8> {
        (0..self.n).map(|i| self.get(i, k)).collect()
    }

    pub fn set_column(&mut self, k: usize, col: &[i8]) {
        for (i, v) in col.iter().enumerate() {
            self.data[i * self.q + k] = *v;
        }
    }

    pub fn as_tensor(&self) -> Tensor {
        Tensor::matrix(self.n, self.q, self.data.iter().map(|v| *v as f64).collect()).unwrap()
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[i8]> {
        self.data.chunks(self.q.max(1)).take(self.n)
    }
}

/// `m` distinct indices drawn uniformly from `0..n`.
pub fn sample_epoch(n: usize, m: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if m > n {
        return contract_err(format!("cannot sample {m} distinct items from {n}"));
    }
    Ok(rand::seq::index::sample(rng, n, m).into_vec())
}

fn check_consistent(relaxed: &Tensor, codes: &CodeMatrix, s: &SimilarityMatrix) -> Result<(usize, usize)> {
    let (m, q) = relaxed.rows_cols()?;
    if q != codes.q || s.rows != m || s.cols != codes.n {
        return dim_err(format!(
            "relaxed codes {m}x{q}, database codes {}x{}, similarity {}x{} are inconsistent",
            codes.n, codes.q, s.rows, s.cols
        ));
    }
    Ok((m, q))
}

/// `‖Ũ Vᵀ − q S‖²_F`.
pub fn code_objective(relaxed: &Tensor, codes: &CodeMatrix, s: &SimilarityMatrix) -> Result<f64> {
    let (m, q) = check_consistent(relaxed, codes, s)?;
    let mut total = 0.0;
    for i in 0..m {
        let u = relaxed.row(i);
        for j in 0..codes.n {
            let ip: f64 = u.iter().zip(codes.row(j)).map(|(a, b)| a * *b as f64).sum();
            total += (ip - q as f64 * s.get(i, j) as f64).powi(2);
        }
    }
    Ok(total)
}

/// Closed-form minimizer of the code objective over column `k` of `V`
/// with every other column fixed:
/// `V_{*k} = sign(q·Q_{*k} − V_{/k} Ũ_{/k}ᵀ Ũ_{*k})` with `Q = Sᵀ Ũ`.
/// Entries whose argument is exactly zero keep their current sign.
pub fn v_column_update(relaxed: &Tensor, codes: &CodeMatrix, s: &SimilarityMatrix, k: usize) -> Result<Vec<i8>> {
    let (m, q) = check_consistent(relaxed, codes, s)?;
    if k >= q {
        return contract_err(format!("column {k} out of range for {q} bits"));
    }
    // cross[l] = Σ_i Ũ_il Ũ_ik for l ≠ k
    let mut cross = vec![0.0; q];
    for i in 0..m {
        let u = relaxed.row(i);
        for l in 0..q {
            cross[l] += u[l] * u[k];
        }
    }
    cross[k] = 0.0;
    let mut qk = vec![0.0; codes.n];
    for i in 0..m {
        let uik = relaxed.row(i)[k];
        if uik == 0.0 {
            continue;
        }
        for (acc, sv) in qk.iter_mut().zip(s.row(i)) {
            *acc += *sv as f64 * uik;
        }
    }
    Ok((0..codes.n)
        .map(|j| {
            let other: f64 = codes.row(j).iter().zip(&cross).map(|(v, c)| *v as f64 * c).sum();
            let arg = q as f64 * qk[j] - other;
            if arg > 0.0 {
                1
            } else if arg < 0.0 {
                -1
            } else {
                codes.get(j, k)
            }
        })
        .collect())
}

/// Updates the columns of `V` in order `0..q`.
pub fn v_update_sweep(relaxed: &Tensor, codes: &mut CodeMatrix, s: &SimilarityMatrix) -> Result<()> {
    for k in 0..codes.q {
        let col = v_column_update(relaxed, codes, s, k)?;
        codes.set_column(k, &col);
    }
    Ok(())
}

/// Fixed inputs of the network phase.
pub struct ThetaContext<'a> {
    pub images: &'a [Tensor],
    pub labels: &'a [usize],
    pub codes: &'a CodeMatrix,
    pub anchors: &'a AnchorBank,
    pub weights: &'a LossWeights,
}

/// Value and parameter gradients of a batch objective.
pub struct BatchGradient {
    /// Batch objective divided by `batch_size · n`.
    pub loss: f64,
    /// One gradient per parameter tensor, in parameter order.
    pub grads: Vec<Vec<f64>>,
}

/// Objective of `batch` scaled by `1 / (|batch| · n)`, with its gradient.
///
/// The whole minibatch shares one graph: hash inputs are centered on their
/// minibatch mean (the stored population mean for a single-sample batch).
/// `xis[b]` holds the exchange draws for sample `b`, or is empty to skip
/// the exchange for that sample.
pub fn batch_gradient(
    params: &ModelParams,
    batch: &[usize],
    ctx: &ThetaContext<'_>,
    xis: &[Vec<f64>],
) -> Result<BatchGradient> {
    let cfg = params.config();
    let n = ctx.codes.rows();
    if ctx.codes.bits() != cfg.bits {
        return dim_err(format!("codes have {} bits, model has {}", ctx.codes.bits(), cfg.bits));
    }
    if batch.is_empty() || xis.len() != batch.len() {
        return contract_err("need a nonempty batch with one exchange draw per sample");
    }
    let mut g = Graph::new();
    let p = params.bind(&mut g, true);
    let codes = g.input(ctx.codes.as_tensor());
    let mut forwards = Vec::with_capacity(batch.len());
    for (b, &idx) in batch.iter().enumerate() {
        let x = g.input(ctx.images[idx].clone());
        let f = forward_features(&mut g, cfg, &p, x)?;
        let local = if xis[b].is_empty() {
            f.local_vectors.clone()
        } else {
            let anchor_nodes: Vec<_> = ctx
                .anchors
                .get(ctx.labels[idx])?
                .iter()
                .map(|a| g.input(Tensor::vector(a.clone())))
                .collect();
            exchange(&f.local_vectors, &anchor_nodes, &xis[b])?
        };
        let input = hash_input(&mut g, &local, f.global)?;
        forwards.push((f, input));
    }
    let center = if batch.len() > 1 {
        let mut sum = forwards[0].1;
        for (_, x) in &forwards[1..] {
            sum = g.add(sum, *x)?;
        }
        g.scale(sum, 1.0 / batch.len() as f64)?
    } else {
        g.input(Tensor::vector(params.input_norm().mean.clone()))
    };
    let mut total = None;
    for ((f, input), &idx) in forwards.iter().zip(batch) {
        let label = ctx.labels[idx];
        let relaxed = hash_centered(&mut g, &p, *input, center, HashMode::Relaxed)?;
        let targets = g.input(Tensor::vector(
            ctx.labels[..n]
                .iter()
                .map(|l| if *l == label { cfg.bits as f64 } else { -(cfg.bits as f64) })
                .collect(),
        ));
        let terms = sample_terms(&mut g, relaxed, codes, targets, &f.local_maps, &f.local_vectors, ctx.weights)?;
        let sample = weighted_total(&mut g, &terms, ctx.weights)?;
        total = Some(match total {
            None => sample,
            Some(t) => g.add(t, sample)?,
        });
    }
    let scaled = g.scale(total.unwrap(), 1.0 / (batch.len() * n) as f64)?;
    let loss = g.value(scaled).item()?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("batch objective ({loss})")));
    }
    let gr = g.backward(scaled)?;
    let grads = p
        .ids()
        .iter()
        .zip(params.tensors())
        .map(|(id, (_, t))| gr.get(*id).map_or_else(|| vec![0.0; t.len()], |d| d.to_vec()))
        .collect();
    Ok(BatchGradient { loss, grads })
}

fn sample_terms(
    g: &mut Graph,
    relaxed: crate::autodiff::NodeId,
    codes: crate::autodiff::NodeId,
    targets: crate::autodiff::NodeId,
    maps: &[crate::autodiff::NodeId],
    vectors: &[crate::autodiff::NodeId],
    weights: &LossWeights,
) -> Result<ObjectiveTerms> {
    let squared = squared_loss_rows(g, relaxed, codes, targets)?;
    let (spatial, channel) = if maps.len() >= 2 {
        (
            Some(spatial_loss(g, maps)?),
            Some(channel_loss(g, vectors, weights.margin)?),
        )
    } else {
        (None, None)
    };
    Ok(ObjectiveTerms {
        squared,
        spatial,
        channel,
    })
}

/// SGD state carried across steps.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SgdState {
    velocity: Vec<Vec<f64>>,
}

/// One SGD step with weight decay on the gradient of the batch objective.
/// Exchange draws come from `rng` when `exchange_on`.
#[allow(clippy::too_many_arguments)]
pub fn theta_step(
    params: &mut ModelParams,
    batch: &[usize],
    ctx: &ThetaContext<'_>,
    exchange_on: bool,
    lr: f64,
    weight_decay: f64,
    momentum: f64,
    state: &mut SgdState,
    rng: &mut impl Rng,
) -> Result<f64> {
    let parts = params.config().parts;
    let xis: Vec<Vec<f64>> = batch
        .iter()
        .map(|_| if exchange_on { draw_xi(rng, parts) } else { Vec::new() })
        .collect();
    let bg = batch_gradient(params, batch, ctx, &xis)?;
    if state.velocity.is_empty() {
        state.velocity = bg.grads.iter().map(|g| vec![0.0; g.len()]).collect();
    }
    for (((_, t), g), v) in params.tensors_mut().zip(&bg.grads).zip(&mut state.velocity) {
        for ((p, gv), vel) in t.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
            let step = gv + weight_decay * *p;
            *vel = momentum * *vel + step;
            *p -= lr * *vel;
        }
    }
    Ok(bg.loss)
}

/// Forward values of one image, without exchange, plus its diversity
/// losses.
#[derive(Clone, Debug)]
pub struct SampleEval {
    pub embedding: Embedding,
    pub spatial: f64,
    pub channel: f64,
}

pub fn evaluate_sample(params: &ModelParams, image: &Tensor, margin: f64) -> Result<SampleEval> {
    let cfg = params.config();
    let embedding = embed(params, image)?;
    if cfg.parts < 2 {
        return Ok(SampleEval {
            embedding,
            spatial: 0.0,
            channel: 0.0,
        });
    }
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let x = g.input(image.clone());
    let f = forward_features(&mut g, cfg, &p, x)?;
    let sp = spatial_loss(&mut g, &f.local_maps)?;
    let cp = channel_loss(&mut g, &f.local_vectors, margin)?;
    Ok(SampleEval {
        embedding,
        spatial: g.value(sp).item()?,
        channel: g.value(cp).item()?,
    })
}

/// Unscaled objective over a query set against all database codes.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ObjectiveReport {
    pub squared: f64,
    pub spatial: f64,
    pub channel: f64,
    pub total: f64,
}

fn objective_from(evals: &[SampleEval], query_labels: &[usize], codes: &CodeMatrix, db_labels: &[usize], w: &LossWeights) -> Result<ObjectiveReport> {
    let relaxed = relaxed_matrix(evals.iter().map(|e| &e.embedding), codes.bits())?;
    let s = build_similarity(query_labels, db_labels);
    let squared = code_objective(&relaxed, codes, &s)?;
    let spatial: f64 = evals.iter().map(|e| e.spatial).sum();
    let channel: f64 = evals.iter().map(|e| e.channel).sum();
    Ok(ObjectiveReport {
        squared,
        spatial,
        channel,
        total: squared + w.lambda * spatial + w.gamma * channel,
    })
}

fn relaxed_matrix<'a>(embs: impl Iterator<Item = &'a Embedding>, q: usize) -> Result<Tensor> {
    let data: Vec<f64> = embs.flat_map(|e| e.relaxed.iter().copied()).collect();
    Tensor::matrix(data.len() / q, q, data)
}

/// Out-of-sample code: the discrete hash of the un-exchanged features.
pub fn encode(params: &ModelParams, image: &Tensor) -> Result<Vec<i8>> {
    Ok(embed(params, image)?.code)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Theta,
    V,
    Anchor,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::Theta => "theta",
            Phase::V => "v",
            Phase::Anchor => "anchor",
        })
    }
}

/// One training-log record.
#[derive(Clone, Debug, PartialEq)]
pub struct LogEntry {
    /// 1-based outer iteration.
    pub iter: usize,
    pub phase: Phase,
    pub loss: f64,
    pub seconds: f64,
}

impl std::fmt::Display for LogEntry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "iter={} phase={} loss={} seconds={:.6}",
            self.iter, self.phase, self.loss, self.seconds
        )
    }
}

/// Training state over a fixed database of labeled images.
pub struct Trainer<'a> {
    images: &'a [Tensor],
    labels: &'a [usize],
    config: TrainConfig,
    weights: LossWeights,
    params: ModelParams,
    codes: CodeMatrix,
    anchors: AnchorBank,
    sgd: SgdState,
    iter: usize,
}

impl<'a> Trainer<'a> {
    /// Fresh state: random network with its hash-input standardization
    /// fitted on the database, random codes, and anchors computed from the
    /// initial network over the whole database.
    pub fn new(
        images: &'a [Tensor],
        labels: &'a [usize],
        model: &ModelConfig,
        config: TrainConfig,
        weights: LossWeights,
    ) -> Result<Self> {
        config.validate()?;
        weights.validate()?;
        if images.len() != labels.len() || images.is_empty() {
            return contract_err("need a nonempty database with one label per image");
        }
        let mut rng = Self::rng_for(config.seed, 0);
        let mut params = ModelParams::init(model, &mut rng)?;
        params.fit_input_norm(images)?;
        let codes = CodeMatrix::random(images.len(), model.bits, &mut rng);
        let mut anchors = AnchorBank::new(model.parts, model.refine_channels);
        let all: Vec<usize> = (0..images.len()).collect();
        let evals = Self::eval_indices(&params, images, &all, weights.margin)?;
        anchors.update(&group_local(&evals, &all, labels))?;
        Ok(Self {
            images,
            labels,
            config,
            weights,
            params,
            codes,
            anchors,
            sgd: SgdState::default(),
            iter: 0,
        })
    }

    fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        rng
    }

    fn eval_indices(params: &ModelParams, images: &[Tensor], idx: &[usize], margin: f64) -> Result<Vec<SampleEval>> {
        idx.iter().map(|i| evaluate_sample(params, &images[*i], margin)).collect()
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn codes(&self) -> &CodeMatrix {
        &self.codes
    }

    pub fn anchors(&self) -> &AnchorBank {
        &self.anchors
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn weights(&self) -> &LossWeights {
        &self.weights
    }

    /// Completed outer iterations.
    pub fn iteration(&self) -> usize {
        self.iter
    }

    pub fn is_done(&self) -> bool {
        self.iter >= self.config.outer_iters
    }

    pub fn into_parts(self) -> (ModelParams, CodeMatrix, AnchorBank) {
        (self.params, self.codes, self.anchors)
    }

    /// Eq.-13-style objective over the whole database, without exchange.
    pub fn objective(&self) -> Result<ObjectiveReport> {
        let all: Vec<usize> = (0..self.images.len()).collect();
        let evals = Self::eval_indices(&self.params, self.images, &all, self.weights.margin)?;
        objective_from(&evals, self.labels, &self.codes, self.labels, &self.weights)
    }

    /// Runs one outer iteration and returns its log records.
    pub fn step(&mut self) -> Result<Vec<LogEntry>> {
        if self.is_done() {
            return contract_err("training already finished");
        }
        let t = self.iter;
        let mut rng = Self::rng_for(self.config.seed, t as u64 + 1);
        let n = self.images.len();
        let m = self.config.samples_per_epoch.min(n);
        let subset = sample_epoch(n, m, &mut rng)?;
        let exchange_on = self.config.exchange && t >= self.config.warmup_iters();
        let lr = self.config.lr_at(t);
        let mut log = Vec::with_capacity(3);

        let start = Instant::now();
        let mut losses = Vec::new();
        for _ in 0..self.config.epochs_per_iter {
            let mut order = subset.clone();
            order.shuffle(&mut rng);
            for batch in order.chunks(self.config.batch_size) {
                let ctx = ThetaContext {
                    images: self.images,
                    labels: self.labels,
                    codes: &self.codes,
                    anchors: &self.anchors,
                    weights: &self.weights,
                };
                let loss = theta_step(
                    &mut self.params,
                    batch,
                    &ctx,
                    exchange_on,
                    lr,
                    self.config.weight_decay,
                    self.config.momentum,
                    &mut self.sgd,
                    &mut rng,
                )
                .map_err(|e| match e {
                    Error::NonFinite(what) => Error::NonFinite(format!(
                        "{what} in iteration {} at learning rate {lr}",
                        t + 1
                    )),
                    other => other,
                })?;
                losses.push(loss);
            }
        }
        let theta_loss = if losses.is_empty() {
            f64::NAN
        } else {
            losses.iter().sum::<f64>() / losses.len() as f64
        };
        log.push(LogEntry {
            iter: t + 1,
            phase: Phase::Theta,
            loss: theta_loss,
            seconds: start.elapsed().as_secs_f64(),
        });

        let start = Instant::now();
        let sub_images: Vec<Tensor> = subset.iter().map(|i| self.images[*i].clone()).collect();
        self.params.fit_input_norm(&sub_images)?;
        let evals = Self::eval_indices(&self.params, self.images, &subset, self.weights.margin)?;
        let relaxed = relaxed_matrix(evals.iter().map(|e| &e.embedding), self.codes.bits())?;
        let sub_labels: Vec<usize> = subset.iter().map(|i| self.labels[*i]).collect();
        let s = build_similarity(&sub_labels, self.labels);
        v_update_sweep(&relaxed, &mut self.codes, &s)?;
        log.push(LogEntry {
            iter: t + 1,
            phase: Phase::V,
            loss: code_objective(&relaxed, &self.codes, &s)?,
            seconds: start.elapsed().as_secs_f64(),
        });

        let start = Instant::now();
        self.anchors.update(&group_local(&evals, &subset, self.labels))?;
        let report = objective_from(&evals, &sub_labels, &self.codes, self.labels, &self.weights)?;
        log.push(LogEntry {
            iter: t + 1,
            phase: Phase::Anchor,
            loss: report.total,
            seconds: start.elapsed().as_secs_f64(),
        });

        self.iter += 1;
        for e in &log {
            log::info!("{e}");
        }
        Ok(log)
    }

    /// Runs the remaining outer iterations.
    pub fn run(&mut self) -> Result<Vec<LogEntry>> {
        let mut all = Vec::new();
        while !self.is_done() {
            all.extend(self.step()?);
        }
        Ok(all)
    }

    /// Parameters, anchors, codes, SGD state and iteration counter.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        self.params.write_checkpoint(&mut ck);
        self.anchors.write_checkpoint(&mut ck);
        ck.insert("state/iter", Tensor::scalar(self.iter as f64));
        ck.insert("state/codes", self.codes.as_tensor());
        for ((name, _), v) in self.params.tensors().iter().zip(&self.sgd.velocity) {
            ck.insert(format!("state/velocity/{name}"), Tensor::vector(v.clone()));
        }
        ck
    }

    /// Restores a trainer from [`Trainer::checkpoint`] output. The
    /// trajectory continues exactly as if training had not stopped.
    pub fn resume(
        ck: &Checkpoint,
        images: &'a [Tensor],
        labels: &'a [usize],
        config: TrainConfig,
        weights: LossWeights,
    ) -> Result<Self> {
        config.validate()?;
        weights.validate()?;
        let params = ModelParams::from_checkpoint(ck)?;
        let anchors = AnchorBank::from_checkpoint(ck)?;
        let codes_t = ck.require("state/codes")?;
        let (n, q) = codes_t.rows_cols()?;
        if n != images.len() || q != params.config().bits {
            return dim_err(format!(
                "checkpoint codes are {n}x{q}, database has {} items and model {} bits",
                images.len(),
                params.config().bits
            ));
        }
        let rows: Vec<Vec<i8>> = (0..n).map(|i| codes_t.row(i).iter().map(|v| *v as i8).collect()).collect();
        let codes = CodeMatrix::from_rows(&rows, q)?;
        let mut velocity = Vec::new();
        for (name, t) in params.tensors() {
            match ck.get(&format!("state/velocity/{name}")) {
                Some(v) if v.len() == t.len() => velocity.push(v.data().to_vec()),
                Some(_) => return dim_err(format!("velocity of `{name}` has the wrong size")),
                None => {
                    velocity.clear();
                    break;
                }
            }
        }
        Ok(Self {
            images,
            labels,
            config,
            weights,
            params,
            codes,
            anchors,
            sgd: SgdState { velocity },
            iter: ck.scalar("state/iter")? as usize,
        })
    }
}

fn group_local(evals: &[SampleEval], idx: &[usize], labels: &[usize]) -> ClassGroups {
    let mut groups = ClassGroups::new();
    for (e, i) in evals.iter().zip(idx) {
        groups.entry(labels[*i]).or_default().push(e.embedding.local.clone());
    }
    groups
}

/// Everything produced by [`alternate_train`].
pub struct TrainOutcome {
    pub params: ModelParams,
    pub codes: CodeMatrix,
    pub anchors: AnchorBank,
    pub log: Vec<LogEntry>,
    pub initial_objective: ObjectiveReport,
    pub final_objective: ObjectiveReport,
}

/// Full alternating schedule from a fresh start.
pub fn alternate_train(
    images: &[Tensor],
    labels: &[usize],
    model: &ModelConfig,
    config: TrainConfig,
    weights: LossWeights,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(images, labels, model, config, weights)?;
    let initial_objective = trainer.objective()?;
    let log = trainer.run()?;
    let final_objective = trainer.objective()?;
    let (params, codes, anchors) = trainer.into_parts();
    Ok(TrainOutcome {
        params,
        codes,
        anchors,
        log,
        initial_objective,
        final_objective,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_relaxed(m: usize, q: usize, rng: &mut impl Rng) -> Tensor {
        Tensor::matrix(m, q, (0..m * q).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn sample_epoch_contracts() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut all = sample_epoch(10, 10, &mut rng).unwrap();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        let a = sample_epoch(50, 7, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = sample_epoch(50, 7, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
        let mut d = a.clone();
        d.sort();
        d.dedup();
        assert_eq!(d.len(), 7);
        assert!(matches!(sample_epoch(3, 4, &mut rng), Err(Error::Contract(_))));
    }

    #[test]
    fn sample_epoch_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (n, m, epochs) = (20, 5, 4000);
        let mut counts = vec![0usize; n];
        for _ in 0..epochs {
            for i in sample_epoch(n, m, &mut rng).unwrap() {
                counts[i] += 1;
            }
        }
        let expected = (epochs * m) as f64 / n as f64;
        let chi2: f64 = counts.iter().map(|c| (*c as f64 - expected).powi(2) / expected).sum();
        // 19 degrees of freedom; 43.8 is the 0.999 quantile
        assert!(chi2 < 43.8, "chi2 = {chi2}");
    }

    #[test]
    fn one_dimensional_column_update() {
        let u = Tensor::matrix(1, 1, vec![0.9]).unwrap();
        let mut v = CodeMatrix::from_rows(&[vec![-1]], 1).unwrap();
        let s = build_similarity(&[0], &[0]);
        v_update_sweep(&u, &mut v, &s).unwrap();
        assert_eq!(v.row(0), &[1]);
    }

    #[test]
    fn zero_relaxed_rows_leave_codes_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let u = Tensor::zeros(&[3, 4]);
        let mut v = CodeMatrix::random(5, 4, &mut rng);
        let before = v.clone();
        let s = build_similarity(&[0, 1, 0], &[0, 1, 1, 0, 2]);
        v_update_sweep(&u, &mut v, &s).unwrap();
        assert_eq!(v, before);
    }

    #[test]
    fn optimal_codes_are_a_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let u = random_relaxed(6, 3, &mut rng);
        let mut v = CodeMatrix::random(7, 3, &mut rng);
        let s = build_similarity(&[0, 1, 2, 0, 1, 2], &[0, 1, 2, 0, 1, 2, 0]);
        for _ in 0..20 {
            v_update_sweep(&u, &mut v, &s).unwrap();
        }
        let settled = v.clone();
        v_update_sweep(&u, &mut v, &s).unwrap();
        assert_eq!(v, settled);
    }

    #[test]
    fn lr_schedule_and_warmup() {
        let cfg = TrainConfig {
            outer_iters: 100,
            learning_rate: 0.001,
            warmup_fraction: 0.5,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.lr_at(0), 0.001);
        assert_eq!(cfg.lr_at(59), 0.001);
        assert!((cfg.lr_at(60) - 1e-4).abs() < 1e-18);
        assert!((cfg.lr_at(80) - 1e-5).abs() < 1e-18);
        assert_eq!(cfg.warmup_iters(), 50);
    }

    #[test]
    fn code_matrix_rejects_non_sign_entries() {
        assert!(CodeMatrix::from_rows(&[vec![1, 0]], 2).is_err());
        assert!(CodeMatrix::from_rows(&[vec![1]], 2).is_err());
    }

    #[test]
    fn log_line_format() {
        let e = LogEntry {
            iter: 3,
            phase: Phase::V,
            loss: 12.5,
            seconds: 0.25,
        };
        assert_eq!(e.to_string(), "iter=3 phase=v loss=12.5 seconds=0.250000");
    }
}
