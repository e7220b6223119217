//! The part-attention hashing network.
//!
//! Pipeline for one image `x`:
//!
//! 1. backbone: conv blocks produce the holistic map `E` of shape `[H, W, C]`;
//! 2. attention head: a 1x1 conv to `M` channels and a logistic squash give
//!    soft masks `A` of shape `[H, W, M]` (channel `j` is the mask of part `j`);
//! 3. each part `E ⊗ A_j` goes through the shared local refinement network
//!    (LFR) and is pooled into a local vector `f_j`;
//! 4. the global refinement network (GFR) maps `E` to the global vector;
//! 5. the hash layer projects `[f_1; ...; f_M; f_global]` to `q` outputs.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, NodeId};
use crate::checkpoint::Checkpoint;
use crate::error::{contract_err, dim_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Number of attention maps / local parts.
    pub parts: usize,
    /// Code length in bits.
    pub bits: usize,
    pub image_side: usize,
    pub in_channels: usize,
    /// Output width of each backbone block; the last entry is `C`.
    pub backbone_widths: Vec<usize>,
    /// Channel width `C'` of both refinement networks.
    pub refine_channels: usize,
    pub refine_kernel: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            parts: 4,
            bits: 16,
            image_side: 32,
            in_channels: 3,
            backbone_widths: vec![8, 16, 32],
            refine_channels: 16,
            refine_kernel: 3,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.parts == 0 {
            return contract_err("part count must be at least 1");
        }
        if self.bits == 0 {
            return contract_err("code length must be at least 1");
        }
        if self.backbone_widths.is_empty() || self.backbone_widths.contains(&0) {
            return contract_err("backbone needs at least one block of nonzero width");
        }
        if self.refine_channels == 0 || self.in_channels == 0 {
            return contract_err("channel widths must be positive");
        }
        if self.refine_kernel.is_multiple_of(2) {
            return contract_err("refinement kernel side must be odd");
        }
        let shrink = 1usize << self.backbone_widths.len();
        if self.image_side == 0 || !self.image_side.is_multiple_of(shrink) {
            return contract_err(format!(
                "image side {} must be a positive multiple of {shrink}",
                self.image_side
            ));
        }
        Ok(())
    }

    /// Channel width `C` of the holistic map.
    pub fn embed_channels(&self) -> usize {
        *self.backbone_widths.last().unwrap()
    }

    /// Spatial side `H = W` of the holistic map. Every backbone block but
    /// the last halves the resolution.
    pub fn embed_side(&self) -> usize {
        self.image_side >> (self.backbone_widths.len() - 1)
    }

    /// Spatial side `H' = W'` of refined local and global maps.
    pub fn refined_side(&self) -> usize {
        self.embed_side() / 2
    }

    /// Length of the concatenated `[f_1; ...; f_M; f_global]` vector.
    pub fn feature_dim(&self) -> usize {
        (self.parts + 1) * self.refine_channels
    }
}

/// Named trainable tensors of the network, plus the fixed per-dimension
/// standardization applied to the hash layer input.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    tensors: Vec<(String, Tensor)>,
    input_norm: InputNorm,
}

/// `x ↦ (x − mean) ⊙ scale` on the hash layer input.
///
/// Post-ReLU pooled features share a large positive offset that would
/// otherwise dominate every hash projection. `scale` is fitted once on the
/// initial network and frozen; training centers each minibatch on its own
/// mean, and `mean` holds the population mean used at inference.
#[derive(Clone, Debug, PartialEq)]
pub struct InputNorm {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl InputNorm {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    /// Mean and inverse standard deviation of each column of `rows`.
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let Some(first) = rows.first() else {
            return contract_err("cannot fit a normalization on zero rows");
        };
        let d = first.len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            if r.len() != d {
                return dim_err(format!("feature row of length {}, expected {d}", r.len()));
            }
            mean.iter_mut().zip(r).for_each(|(m, v)| *m += v / n);
        }
        let mut var = vec![0.0; d];
        for r in rows {
            var.iter_mut().zip(r).zip(&mean).for_each(|((s, v), m)| *s += (v - m).powi(2) / n);
        }
        let scale = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        Ok(Self { mean, scale })
    }
}

const NORM_EPS: f64 = 1e-8;

/// Graph nodes of the parameters for one forward pass.
#[derive(Clone, Debug)]
pub struct BoundParams {
    backbone: Vec<(NodeId, NodeId)>,
    attention: (NodeId, NodeId),
    lfr: (NodeId, NodeId),
    gfr: (NodeId, NodeId),
    hash: NodeId,
    norm: (NodeId, NodeId),
    ids: Vec<NodeId>,
}

impl BoundParams {
    /// Parameter nodes in the same order as [`ModelParams::tensors`].
    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }

    pub fn attention_weight(&self) -> NodeId {
        self.attention.0
    }
}

fn conv_init(rng: &mut impl Rng, k: usize, cin: usize, cout: usize) -> Tensor {
    let std = (2.0 / (k * k * cin) as f64).sqrt();
    let normal = Normal::new(0.0, std).unwrap();
    let data = (0..k * k * cin * cout).map(|_| normal.sample(rng)).collect();
    Tensor::new(vec![k, k, cin, cout], data).unwrap()
}

const CONCAT_GLOBAL: f64 = -1.0;

impl ModelParams {
    pub fn init(config: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut tensors = Vec::new();
        let mut cin = config.in_channels;
        for (i, &w) in config.backbone_widths.iter().enumerate() {
            tensors.push((format!("backbone/{i}/kernel"), conv_init(rng, 3, cin, w)));
            tensors.push((format!("backbone/{i}/bias"), Tensor::zeros(&[w])));
            cin = w;
        }
        let c = config.embed_channels();
        let cr = config.refine_channels;
        let kr = config.refine_kernel;
        tensors.push(("attention/kernel".into(), conv_init(rng, 1, c, config.parts)));
        tensors.push(("attention/bias".into(), Tensor::zeros(&[config.parts])));
        tensors.push(("lfr/kernel".into(), conv_init(rng, kr, c, cr)));
        tensors.push(("lfr/bias".into(), Tensor::zeros(&[cr])));
        tensors.push(("gfr/kernel".into(), conv_init(rng, kr, c, cr)));
        tensors.push(("gfr/bias".into(), Tensor::zeros(&[cr])));
        let d = config.feature_dim();
        let normal = Normal::new(0.0, (1.0 / d as f64).sqrt()).unwrap();
        let w = (0..config.bits * d).map(|_| normal.sample(rng)).collect();
        tensors.push(("hash/weight".into(), Tensor::matrix(config.bits, d, w)?));
        Ok(Self {
            config: config.clone(),
            tensors,
            input_norm: InputNorm::identity(d),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[(String, Tensor)] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Replaces the tensor called `name`, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .tensors
            .iter_mut()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::Lookup(format!("no parameter named `{name}`")))?;
        if slot.1.shape() != value.shape() {
            return dim_err(format!(
                "parameter `{name}` has shape {:?}, got {:?}",
                slot.1.shape(),
                value.shape()
            ));
        }
        slot.1 = value;
        Ok(())
    }

    pub fn input_norm(&self) -> &InputNorm {
        &self.input_norm
    }

    pub fn set_input_norm(&mut self, norm: InputNorm) -> Result<()> {
        let d = self.config.feature_dim();
        if norm.mean.len() != d || norm.scale.len() != d {
            return dim_err(format!("input normalization must have length {d}"));
        }
        if norm.mean.iter().chain(&norm.scale).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("input normalization".into()));
        }
        self.input_norm = norm;
        Ok(())
    }

    /// Fits mean and scale of the hash-input standardization to the
    /// current network's features on `images`.
    pub fn fit_input_norm(&mut self, images: &[Tensor]) -> Result<()> {
        let rows = self.feature_rows(images)?;
        self.set_input_norm(InputNorm::fit(&rows)?)
    }

    /// Refits only the population mean, keeping the scale.
    pub fn refit_input_mean(&mut self, images: &[Tensor]) -> Result<()> {
        let rows = self.feature_rows(images)?;
        let fitted = InputNorm::fit(&rows)?;
        self.set_input_norm(InputNorm {
            mean: fitted.mean,
            scale: self.input_norm.scale.clone(),
        })
    }

    fn feature_rows(&self, images: &[Tensor]) -> Result<Vec<Vec<f64>>> {
        images.iter().map(|x| embed(self, x).map(|e| e.features)).collect()
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.len()).sum()
    }

    /// Puts the parameters on `graph`, as trainable leaves or constants.
    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> BoundParams {
        let ids: Vec<NodeId> = self
            .tensors
            .iter()
            .map(|(_, t)| {
                if trainable {
                    graph.param(t.clone())
                } else {
                    graph.input(t.clone())
                }
            })
            .collect();
        let nb = self.config.backbone_widths.len();
        let backbone = (0..nb).map(|i| (ids[2 * i], ids[2 * i + 1])).collect();
        let o = 2 * nb;
        let norm = (
            graph.input(Tensor::vector(self.input_norm.mean.clone())),
            graph.input(Tensor::vector(self.input_norm.scale.clone())),
        );
        BoundParams {
            norm,
            backbone,
            attention: (ids[o], ids[o + 1]),
            lfr: (ids[o + 2], ids[o + 3]),
            gfr: (ids[o + 4], ids[o + 5]),
            hash: ids[o + 6],
            ids,
        }
    }

    pub fn write_checkpoint(&self, ck: &mut Checkpoint) {
        let c = &self.config;
        ck.insert("meta/parts", Tensor::scalar(c.parts as f64));
        ck.insert("meta/bits", Tensor::scalar(c.bits as f64));
        ck.insert("meta/image_side", Tensor::scalar(c.image_side as f64));
        ck.insert("meta/in_channels", Tensor::scalar(c.in_channels as f64));
        ck.insert(
            "meta/backbone_widths",
            Tensor::vector(c.backbone_widths.iter().map(|w| *w as f64).collect()),
        );
        ck.insert("meta/refine_channels", Tensor::scalar(c.refine_channels as f64));
        ck.insert("meta/refine_kernel", Tensor::scalar(c.refine_kernel as f64));
        ck.insert("meta/concat_order", Tensor::vector(concat_order(c.parts)));
        for (name, t) in &self.tensors {
            ck.insert(name.clone(), t.clone());
        }
        ck.insert("norm/mean", Tensor::vector(self.input_norm.mean.clone()));
        ck.insert("norm/scale", Tensor::vector(self.input_norm.scale.clone()));
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let int = |name: &str| -> Result<usize> {
            let v = ck.scalar(name)?;
            if v < 0.0 || v.fract() != 0.0 {
                return Err(Error::Format {
                    kind: "FHT1",
                    reason: format!("`{name}` is not a count: {v}"),
                });
            }
            Ok(v as usize)
        };
        let config = ModelConfig {
            parts: int("meta/parts")?,
            bits: int("meta/bits")?,
            image_side: int("meta/image_side")?,
            in_channels: int("meta/in_channels")?,
            backbone_widths: ck
                .require("meta/backbone_widths")?
                .data()
                .iter()
                .map(|v| *v as usize)
                .collect(),
            refine_channels: int("meta/refine_channels")?,
            refine_kernel: int("meta/refine_kernel")?,
        };
        config.validate()?;
        if ck.require("meta/concat_order")?.data() != concat_order(config.parts).as_slice() {
            return Err(Error::Format {
                kind: "FHT1",
                reason: "hash weight columns use an unknown feature order".into(),
            });
        }
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut params = Self::init(&config, &mut rng)?;
        for (name, slot) in params.tensors.iter_mut() {
            let stored = ck.require(name)?;
            if stored.shape() != slot.shape() {
                return dim_err(format!(
                    "checkpoint tensor `{name}` has shape {:?}, model expects {:?}",
                    stored.shape(),
                    slot.shape()
                ));
            }
            *slot = stored.clone();
        }
        params.set_input_norm(InputNorm {
            mean: ck.require("norm/mean")?.data().to_vec(),
            scale: ck.require("norm/scale")?.data().to_vec(),
        })?;
        Ok(params)
    }
}

/// Part index of each concatenated block, with the global block last.
fn concat_order(parts: usize) -> Vec<f64> {
    (0..parts).map(|j| j as f64).chain([CONCAT_GLOBAL]).collect()
}

/// Node handles produced by a full feature forward pass.
#[derive(Clone, Debug)]
pub struct Features {
    pub embedding: NodeId,
    pub attention: NodeId,
    pub local_maps: Vec<NodeId>,
    pub local_vectors: Vec<NodeId>,
    pub global: NodeId,
}

fn conv_block(g: &mut Graph, x: NodeId, (kernel, bias): (NodeId, NodeId), pool: bool) -> Result<NodeId> {
    let y = g.conv2d(x, kernel)?;
    let y = g.add_bias(y, bias)?;
    let y = g.relu(y)?;
    if pool {
        g.mean_pool2(y)
    } else {
        Ok(y)
    }
}

/// Holistic feature map `E` of one `[side, side, in_channels]` image.
pub fn backbone_forward(g: &mut Graph, cfg: &ModelConfig, p: &BoundParams, image: NodeId) -> Result<NodeId> {
    let expected = [cfg.image_side, cfg.image_side, cfg.in_channels];
    if g.value(image).shape() != expected {
        return dim_err(format!(
            "image shape {:?} does not match configured {:?}",
            g.value(image).shape(),
            expected
        ));
    }
    let mut x = image;
    let last = p.backbone.len() - 1;
    for (i, block) in p.backbone.iter().enumerate() {
        x = conv_block(g, x, *block, i < last)?;
    }
    Ok(x)
}

/// Soft part masks in `(0, 1)`, shape `[H, W, M]`.
pub fn attention_maps(g: &mut Graph, p: &BoundParams, embedding: NodeId) -> Result<NodeId> {
    let a = g.conv2d(embedding, p.attention.0)?;
    let a = g.add_bias(a, p.attention.1)?;
    g.sigmoid(a)
}

/// `E ⊗ A_j`: the attended copy of `E` for one part mask.
pub fn attend(g: &mut Graph, embedding: NodeId, mask: NodeId) -> Result<NodeId> {
    g.hadamard_map(embedding, mask)
}

fn refine(g: &mut Graph, x: NodeId, weights: (NodeId, NodeId)) -> Result<NodeId> {
    conv_block(g, x, weights, true)
}

/// Shared-weight LFR over each attended tensor, returning `(maps, vectors)`.
pub fn local_refine(g: &mut Graph, p: &BoundParams, attended: &[NodeId]) -> Result<(Vec<NodeId>, Vec<NodeId>)> {
    let mut maps = Vec::with_capacity(attended.len());
    let mut vectors = Vec::with_capacity(attended.len());
    for &e in attended {
        let m = refine(g, e, p.lfr)?;
        vectors.push(g.global_avg_pool(m)?);
        maps.push(m);
    }
    Ok((maps, vectors))
}

/// GFR conv stack on `E` followed by global average pooling.
pub fn global_refine(g: &mut Graph, p: &BoundParams, embedding: NodeId) -> Result<NodeId> {
    let m = refine(g, embedding, p.gfr)?;
    g.global_avg_pool(m)
}

pub fn forward_features(g: &mut Graph, cfg: &ModelConfig, p: &BoundParams, image: NodeId) -> Result<Features> {
    let embedding = backbone_forward(g, cfg, p, image)?;
    let attention = attention_maps(g, p, embedding)?;
    let mut attended = Vec::with_capacity(cfg.parts);
    for j in 0..cfg.parts {
        let mask = g.select_channel(attention, j)?;
        attended.push(attend(g, embedding, mask)?);
    }
    let (local_maps, local_vectors) = local_refine(g, p, &attended)?;
    let global = global_refine(g, p, embedding)?;
    Ok(Features {
        embedding,
        attention,
        local_maps,
        local_vectors,
        global,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HashMode {
    /// `tanh(W x)`, differentiable.
    Relaxed,
    /// `sign(W x)` with `sign(0) = +1`; a constant on the graph.
    Discrete,
}

/// `sign` with the tie convention `sign(0) = +1`.
pub fn sign(x: f64) -> i8 {
    if x >= 0.0 {
        1
    } else {
        -1
    }
}

/// `[local_1; ...; local_M; global]`.
pub fn hash_input(g: &mut Graph, local: &[NodeId], global: NodeId) -> Result<NodeId> {
    let mut blocks = local.to_vec();
    blocks.push(global);
    g.concat(&blocks)
}

/// Standardizes `[local_1; ...; local_M; global]` with the stored
/// population mean and projects it through the hash weights.
pub fn hash_layer(
    g: &mut Graph,
    p: &BoundParams,
    local: &[NodeId],
    global: NodeId,
    mode: HashMode,
) -> Result<NodeId> {
    let x = hash_input(g, local, global)?;
    hash_centered(g, p, x, p.norm.0, mode)
}

/// Hash layer on an input `x` centered on `center` (the population mean, or
/// a minibatch mean node during training).
pub fn hash_centered(g: &mut Graph, p: &BoundParams, x: NodeId, center: NodeId, mode: HashMode) -> Result<NodeId> {
    let d = g.value(x).len();
    let (_, cols) = g.value(p.hash).rows_cols()?;
    if cols != d {
        return dim_err(format!("hash weight has {cols} columns, features have {d}"));
    }
    let centered = g.sub(x, center)?;
    let standardized = g.mul(centered, p.norm.1)?;
    let col = g.reshape(standardized, vec![d, 1])?;
    let pre = g.matmul(p.hash, col)?;
    let q = g.value(pre).len();
    match mode {
        HashMode::Relaxed => {
            let t = g.tanh(pre)?;
            g.reshape(t, vec![q])
        }
        HashMode::Discrete => {
            let codes = g.value(pre).data().iter().map(|v| sign(*v) as f64).collect();
            Ok(g.input(Tensor::vector(codes)))
        }
    }
}

/// Forward-pass values of one image without exchange.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    /// `tanh(W x)`.
    pub relaxed: Vec<f64>,
    /// `sign(W x)`.
    pub code: Vec<i8>,
    /// `[f_1; ...; f_M; f_global]`.
    pub features: Vec<f64>,
    /// The `M` local vectors.
    pub local: Vec<Vec<f64>>,
}

pub fn embed(params: &ModelParams, image: &Tensor) -> Result<Embedding> {
    let cfg = params.config();
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let x = g.input(image.clone());
    let f = forward_features(&mut g, cfg, &p, x)?;
    let relaxed_id = hash_layer(&mut g, &p, &f.local_vectors, f.global, HashMode::Relaxed)?;
    let code_id = hash_layer(&mut g, &p, &f.local_vectors, f.global, HashMode::Discrete)?;
    let local: Vec<Vec<f64>> = f
        .local_vectors
        .iter()
        .map(|id| g.value(*id).data().to_vec())
        .collect();
    let mut features: Vec<f64> = local.iter().flatten().copied().collect();
    features.extend_from_slice(g.value(f.global).data());
    Ok(Embedding {
        relaxed: g.value(relaxed_id).data().to_vec(),
        code: g.value(code_id).data().iter().map(|v| *v as i8).collect(),
        features,
        local,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_image(cfg: &ModelConfig, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = cfg.image_side * cfg.image_side * cfg.in_channels;
        Tensor::new(
            vec![cfg.image_side, cfg.image_side, cfg.in_channels],
            (0..n).map(|_| rng.random::<f64>()).collect(),
        )
        .unwrap()
    }

    fn setup() -> (ModelConfig, ModelParams) {
        let cfg = ModelConfig::default();
        let params = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        (cfg, params)
    }

    #[test]
    fn backbone_shape_determinism_and_finiteness() {
        let (cfg, params) = setup();
        let img = random_image(&cfg, 3);
        let run = || {
            let mut g = Graph::new();
            let p = params.bind(&mut g, false);
            let x = g.input(img.clone());
            let e = backbone_forward(&mut g, &cfg, &p, x).unwrap();
            g.value(e).clone()
        };
        let e = run();
        assert_eq!(e.shape(), &[8, 8, 32]);
        assert!(e.is_finite());
        assert_eq!(e, run());

        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let wrong = g.input(Tensor::zeros(&[16, 16, 3]));
        assert!(backbone_forward(&mut g, &cfg, &p, wrong).is_err());
    }

    #[test]
    fn attention_range_and_zero_head() {
        let (cfg, mut params) = setup();
        let img = random_image(&cfg, 4);
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let x = g.input(img.clone());
        let e = backbone_forward(&mut g, &cfg, &p, x).unwrap();
        let a = attention_maps(&mut g, &p, e).unwrap();
        assert_eq!(g.value(a).shape(), &[8, 8, cfg.parts]);
        assert!(g.value(a).data().iter().all(|v| *v > 0.0 && *v < 1.0));

        let shape = params.get("attention/kernel").unwrap().shape().to_vec();
        params.set("attention/kernel", Tensor::zeros(&shape)).unwrap();
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let x = g.input(img);
        let e = backbone_forward(&mut g, &cfg, &p, x).unwrap();
        let a = attention_maps(&mut g, &p, e).unwrap();
        assert!(g.value(a).data().iter().all(|v| *v == 0.5));
    }

    #[test]
    fn attend_masks() {
        let mut g = Graph::new();
        let e = Tensor::new(vec![3, 3, 2], (1..=18).map(|v| v as f64).collect()).unwrap();
        let ei = g.input(e.clone());
        let ones = g.input(Tensor::full(&[3, 3], 1.0));
        let r = attend(&mut g, ei, ones).unwrap();
        assert_eq!(g.value(r), &e);
        let zeros = g.input(Tensor::zeros(&[3, 3]));
        let r = attend(&mut g, ei, zeros).unwrap();
        assert!(g.value(r).data().iter().all(|v| *v == 0.0));
        let mut hot = Tensor::zeros(&[3, 3]);
        hot.data_mut()[3 + 2] = 1.0;
        let hot = g.input(hot);
        let r = attend(&mut g, ei, hot).unwrap();
        for (i, v) in g.value(r).data().iter().enumerate() {
            let pos = i / 2;
            if pos == 5 {
                assert_eq!(*v, e.data()[i]);
            } else {
                assert_eq!(*v, 0.0);
            }
        }
    }

    #[test]
    fn local_refine_identity_and_definitional_gap() {
        let cfg = ModelConfig {
            refine_kernel: 1,
            refine_channels: 32,
            ..ModelConfig::default()
        };
        let mut params = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let mut eye = Tensor::zeros(&[1, 1, 32, 32]);
        for c in 0..32 {
            eye.data_mut()[c * 32 + c] = 1.0;
        }
        params.set("lfr/kernel", eye).unwrap();
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a: Vec<f64> = (0..8 * 8 * 32).map(|_| rng.random::<f64>()).collect();
        let mut b = a.clone();
        b[17] += 0.5;
        let ta = Tensor::new(vec![8, 8, 32], a).unwrap();
        let ia = g.input(ta.clone());
        let ia2 = g.input(ta.clone());
        let ib = g.input(Tensor::new(vec![8, 8, 32], b).unwrap());
        let (maps, vecs) = local_refine(&mut g, &p, &[ia, ia2, ib]).unwrap();
        let pooled = g.mean_pool2(ia).unwrap();
        assert_eq!(g.value(maps[0]), g.value(pooled));
        for (m, v) in maps.iter().zip(&vecs) {
            let gap = g.global_avg_pool(*m).unwrap();
            assert_eq!(g.value(gap), g.value(*v));
        }
        assert_eq!(g.value(maps[0]), g.value(maps[1]));
        assert_ne!(g.value(maps[0]), g.value(maps[2]));
    }

    #[test]
    fn global_refine_contracts() {
        let (cfg, params) = setup();
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let z = g.input(Tensor::zeros(&[8, 8, 32]));
        let f = global_refine(&mut g, &p, z).unwrap();
        assert_eq!(g.value(f).shape(), &[cfg.refine_channels]);
        assert!(g.value(f).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn hash_layer_modes_and_tie_convention() {
        let (cfg, mut params) = setup();
        let d = cfg.feature_dim();
        let mut w = params.get("hash/weight").unwrap().clone();
        w.data_mut()[..d].iter_mut().for_each(|v| *v = 0.0);
        params.set("hash/weight", w).unwrap();
        let emb = embed(&params, &random_image(&cfg, 5)).unwrap();
        assert_eq!(emb.relaxed.len(), cfg.bits);
        assert_eq!(emb.relaxed[0], 0.0);
        assert_eq!(emb.code[0], 1);
        assert!(emb.code.iter().all(|c| *c == 1 || *c == -1));
        assert!(emb.relaxed.iter().all(|v| *v > -1.0 && *v < 1.0));
        for (r, c) in emb.relaxed.iter().zip(&emb.code) {
            if r.abs() > 1e-9 {
                assert_eq!(sign(*r), *c);
            }
        }

        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let short = g.input(Tensor::zeros(&[cfg.refine_channels]));
        assert!(hash_layer(&mut g, &p, &[short], short, HashMode::Relaxed).is_err());
    }

    #[test]
    fn changing_one_mask_changes_only_that_part() {
        let (cfg, params) = setup();
        let img = random_image(&cfg, 6);
        let run = |bump: Option<usize>| {
            let mut g = Graph::new();
            let p = params.bind(&mut g, false);
            let x = g.input(img.clone());
            let e = backbone_forward(&mut g, &cfg, &p, x).unwrap();
            let a = attention_maps(&mut g, &p, e).unwrap();
            let mut attended = Vec::new();
            for j in 0..cfg.parts {
                let mut m = g.select_channel(a, j).unwrap();
                if bump == Some(j) {
                    m = g.scale(m, 0.5).unwrap();
                }
                attended.push(attend(&mut g, e, m).unwrap());
            }
            let (_, vecs) = local_refine(&mut g, &p, &attended).unwrap();
            vecs.iter().map(|v| g.value(*v).clone()).collect::<Vec<_>>()
        };
        let base = run(None);
        let bumped = run(Some(2));
        for j in 0..cfg.parts {
            assert_eq!(base[j] == bumped[j], j != 2, "part {j}");
        }
    }

    #[test]
    fn checkpoint_round_trip_keeps_config() {
        let (cfg, params) = setup();
        let mut ck = Checkpoint::new();
        params.write_checkpoint(&mut ck);
        let back = ModelParams::from_checkpoint(&ck).unwrap();
        assert_eq!(back.config(), &cfg);
        assert_eq!(back, params);

        ck.insert("meta/concat_order", Tensor::vector(vec![-1.0, 0.0, 1.0, 2.0, 3.0]));
        assert!(ModelParams::from_checkpoint(&ck).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig { parts: 0, ..ModelConfig::default() }.validate().is_err());
        assert!(ModelConfig { bits: 0, ..ModelConfig::default() }.validate().is_err());
        assert!(ModelConfig { image_side: 30, ..ModelConfig::default() }.validate().is_err());
        assert_eq!(ModelConfig::default().embed_side(), 8);
        assert_eq!(ModelConfig::default().refined_side(), 4);
    }
}
