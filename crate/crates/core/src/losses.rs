//! Spatial and channel diversity losses, the pairwise squared loss, and
//! their weighted sum.
//!
//! Both diversity terms average the Hellinger distance over the `M(M-1)/2`
//! unordered part pairs, so the mean distance lies in `[0, 1]`.

use crate::autodiff::{Graph, NodeId};
use crate::error::{contract_err, Result};

/// Offset added under every square root of a probability so that the
/// derivative stays bounded at zero-mass cells.
pub const HELLINGER_EPS: f64 = 1e-12;

const SUM_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Weight of the spatial diversity term.
    pub lambda: f64,
    /// Weight of the channel diversity term.
    pub gamma: f64,
    /// Channel diversity margin `t`.
    pub margin: f64,
}

pub const DEFAULT_MARGIN: f64 = 0.4;

impl LossWeights {
    /// Default weights for `bits`-long codes against a database of
    /// `db_size` items: each diversity term is worth `0.1 q^2` per database
    /// pair, matching the scale of one squared-loss term.
    pub fn defaults(bits: usize, db_size: usize) -> Self {
        let w = 0.1 * (bits * bits) as f64 * db_size as f64;
        Self {
            lambda: w,
            gamma: w,
            margin: DEFAULT_MARGIN,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.margin) {
            return contract_err(format!("margin t = {} outside [0, 1]", self.margin));
        }
        if self.lambda < 0.0 || self.gamma < 0.0 || !self.lambda.is_finite() || !self.gamma.is_finite() {
            return contract_err("loss weights must be finite and nonnegative");
        }
        Ok(())
    }
}

fn check_distribution(p: &[f64], which: &str) -> Result<()> {
    if let Some(v) = p.iter().find(|v| v.is_nan() || **v < 0.0) {
        return contract_err(format!("{which} has a negative or NaN entry {v}"));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > SUM_TOL {
        return contract_err(format!("{which} sums to {s}, not 1"));
    }
    Ok(())
}

/// Hellinger distance `(1/√2)·‖√p − √r‖₂` between two distributions.
pub fn hellinger(p: &[f64], r: &[f64]) -> Result<f64> {
    if p.len() != r.len() {
        return contract_err(format!("distributions of length {} and {}", p.len(), r.len()));
    }
    check_distribution(p, "p")?;
    check_distribution(r, "r")?;
    let ss: f64 = p
        .iter()
        .zip(r)
        .map(|(a, b)| (a.sqrt() - b.sqrt()).powi(2))
        .sum();
    Ok((ss / 2.0).sqrt())
}

/// Differentiable Hellinger distance with the `HELLINGER_EPS` offset.
pub fn hellinger_node(g: &mut Graph, p: NodeId, r: NodeId) -> Result<NodeId> {
    let pe = g.add_scalar(p, HELLINGER_EPS)?;
    let sp = g.sqrt(pe)?;
    let re = g.add_scalar(r, HELLINGER_EPS)?;
    let sr = g.sqrt(re)?;
    let diff = g.sub(sp, sr)?;
    let n = g.norm2(diff)?;
    g.scale(n, std::f64::consts::FRAC_1_SQRT_2)
}

/// Channel-sum of a `[H', W', C']` map, softmaxed over the `H'·W'` positions.
pub fn aggregation_map(g: &mut Graph, map: NodeId) -> Result<NodeId> {
    let s = g.channel_sum(map)?;
    g.softmax(s)
}

fn mean_pairwise_hellinger(g: &mut Graph, dists: &[NodeId]) -> Result<NodeId> {
    let m = dists.len();
    let mut total: Option<NodeId> = None;
    for l in 0..m {
        for k in l + 1..m {
            let h = hellinger_node(g, dists[l], dists[k])?;
            total = Some(match total {
                Some(t) => g.add(t, h)?,
                None => h,
            });
        }
    }
    let pairs = (m * (m - 1) / 2) as f64;
    g.scale(total.expect("at least one pair"), 1.0 / pairs)
}

/// `1 − mean pairwise Hellinger distance` of the parts' aggregation maps.
pub fn spatial_loss(g: &mut Graph, maps: &[NodeId]) -> Result<NodeId> {
    if maps.len() < 2 {
        return contract_err(format!("spatial diversity needs at least 2 parts, got {}", maps.len()));
    }
    let dists = maps
        .iter()
        .map(|m| aggregation_map(g, *m))
        .collect::<Result<Vec<_>>>()?;
    let mean = mean_pairwise_hellinger(g, &dists)?;
    let neg = g.scale(mean, -1.0)?;
    g.add_scalar(neg, 1.0)
}

/// `max(0, t − mean pairwise Hellinger distance)` of the softmaxed local
/// vectors.
pub fn channel_loss(g: &mut Graph, vectors: &[NodeId], margin: f64) -> Result<NodeId> {
    if vectors.len() < 2 {
        return contract_err(format!("channel diversity needs at least 2 parts, got {}", vectors.len()));
    }
    let dists = vectors
        .iter()
        .map(|v| g.softmax(*v))
        .collect::<Result<Vec<_>>>()?;
    let mean = mean_pairwise_hellinger(g, &dists)?;
    let neg = g.scale(mean, -1.0)?;
    let shifted = g.add_scalar(neg, margin)?;
    g.relu(shifted)
}

/// `(ũᵀv − q·S)²` for a single pair.
pub fn squared_loss(relaxed: &[f64], code: &[i8], similarity: i8, bits: usize) -> f64 {
    let ip: f64 = relaxed.iter().zip(code).map(|(u, v)| u * *v as f64).sum();
    (ip - bits as f64 * similarity as f64).powi(2)
}

/// `Σ_j (ũᵀv_j − q·S_j)²` over the rows of a constant `[n, q]` code matrix.
pub fn squared_loss_rows(g: &mut Graph, relaxed: NodeId, codes: NodeId, targets: NodeId) -> Result<NodeId> {
    let q = g.value(relaxed).len();
    let col = g.reshape(relaxed, vec![q, 1])?;
    let ip = g.matmul(codes, col)?;
    let n = g.value(ip).len();
    let ip = g.reshape(ip, vec![n])?;
    let diff = g.sub(ip, targets)?;
    let sq = g.square(diff)?;
    g.sum(sq)
}

/// Per-sample objective terms on the graph.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveTerms {
    pub squared: NodeId,
    pub spatial: Option<NodeId>,
    pub channel: Option<NodeId>,
}

/// `squared + λ·spatial + γ·channel`. Absent diversity terms (a single
/// part) contribute nothing.
pub fn weighted_total(g: &mut Graph, terms: &ObjectiveTerms, weights: &LossWeights) -> Result<NodeId> {
    let mut total = terms.squared;
    if let Some(sp) = terms.spatial {
        let w = g.scale(sp, weights.lambda)?;
        total = g.add(total, w)?;
    }
    if let Some(cp) = terms.channel {
        let w = g.scale(cp, weights.gamma)?;
        total = g.add(total, w)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::tensor::Tensor;
    use approx::assert_abs_diff_eq;

    #[test]
    fn hellinger_examples() {
        assert_eq!(hellinger(&[0.2, 0.3, 0.5], &[0.2, 0.3, 0.5]).unwrap(), 0.0);
        assert_abs_diff_eq!(hellinger(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0, epsilon = 1e-15);
        let expected = (1.0 - 0.5f64.sqrt()).sqrt();
        assert_abs_diff_eq!(hellinger(&[0.5, 0.5], &[1.0, 0.0]).unwrap(), expected, epsilon = 1e-15);
        assert_abs_diff_eq!(expected, 0.5412, epsilon = 1e-4);
    }

    #[test]
    fn hellinger_rejects_invalid_distributions() {
        assert!(matches!(hellinger(&[0.5, 0.6], &[0.5, 0.5]), Err(Error::Contract(_))));
        assert!(matches!(hellinger(&[1.5, -0.5], &[0.5, 0.5]), Err(Error::Contract(_))));
        assert!(matches!(hellinger(&[1.0], &[0.5, 0.5]), Err(Error::Contract(_))));
    }

    fn map_node(g: &mut Graph, h: usize, w: usize, c: usize, f: impl Fn(usize) -> f64) -> NodeId {
        g.input(Tensor::new(vec![h, w, c], (0..h * w * c).map(f).collect()).unwrap())
    }

    #[test]
    fn aggregation_map_examples() {
        let mut g = Graph::new();
        let flat = map_node(&mut g, 3, 3, 4, |_| 0.7);
        let a = aggregation_map(&mut g, flat).unwrap();
        assert_eq!(g.value(a).len(), 9);
        assert!(g.value(a).data().iter().all(|v| (v - 1.0 / 9.0).abs() < 1e-15));

        // position 4 gets +20 after summing its 2 channels
        let spike = map_node(&mut g, 3, 3, 2, |i| if i / 2 == 4 { 10.0 } else { 0.0 });
        let a = aggregation_map(&mut g, spike).unwrap();
        let oracle = 20f64.exp() / (20f64.exp() + 8.0);
        assert_abs_diff_eq!(g.value(a).data()[4], oracle, epsilon = 1e-15);
        assert!(g.value(a).data()[4] > 0.999);
    }

    #[test]
    fn spatial_loss_extremes() {
        let mut g = Graph::new();
        let m1 = map_node(&mut g, 2, 2, 3, |i| (i % 5) as f64 * 0.3);
        let m2 = map_node(&mut g, 2, 2, 3, |i| (i % 5) as f64 * 0.3);
        let m3 = map_node(&mut g, 2, 2, 3, |i| (i % 5) as f64 * 0.3);
        let l = spatial_loss(&mut g, &[m1, m2, m3]).unwrap();
        assert_eq!(g.value(l).item().unwrap(), 1.0);

        // near-disjoint aggregation maps: mass concentrated on different cells
        let a = map_node(&mut g, 1, 2, 1, |i| if i == 0 { 400.0 } else { 0.0 });
        let b = map_node(&mut g, 1, 2, 1, |i| if i == 1 { 400.0 } else { 0.0 });
        let l = spatial_loss(&mut g, &[a, b]).unwrap();
        assert_abs_diff_eq!(g.value(l).item().unwrap(), 0.0, epsilon = 1e-5);

        assert!(matches!(spatial_loss(&mut g, &[a]), Err(Error::Contract(_))));
    }

    #[test]
    fn channel_loss_examples() {
        let mut g = Graph::new();
        let v = g.input(Tensor::vector(vec![0.1, 0.5, -0.2]));
        let l = channel_loss(&mut g, &[v, v, v], 0.4).unwrap();
        assert_abs_diff_eq!(g.value(l).item().unwrap(), 0.4, epsilon = 1e-15);

        let a = g.input(Tensor::vector(vec![500.0, 0.0, 0.0]));
        let b = g.input(Tensor::vector(vec![0.0, 500.0, 0.0]));
        let c = g.input(Tensor::vector(vec![0.0, 0.0, 500.0]));
        let l = channel_loss(&mut g, &[a, b, c], 0.4).unwrap();
        assert_eq!(g.value(l).item().unwrap(), 0.0);
        let l = channel_loss(&mut g, &[a, b, c], 1.0).unwrap();
        assert_abs_diff_eq!(g.value(l).item().unwrap(), 0.0, epsilon = 1e-5);

        let l = channel_loss(&mut g, &[v, a], 0.0).unwrap();
        assert_eq!(g.value(l).item().unwrap(), 0.0);
        let l = channel_loss(&mut g, &[v, v], 0.0).unwrap();
        assert_eq!(g.value(l).item().unwrap(), 0.0);

        assert!(matches!(channel_loss(&mut g, &[v], 0.4), Err(Error::Contract(_))));
    }

    #[test]
    fn squared_loss_examples() {
        let v = [1i8, -1, 1, 1];
        let u: Vec<f64> = v.iter().map(|x| *x as f64).collect();
        assert_eq!(squared_loss(&u, &v, 1, 4), 0.0);
        let neg: Vec<f64> = u.iter().map(|x| -x).collect();
        assert_eq!(squared_loss(&neg, &v, 1, 4), 4.0 * 16.0);
        assert_eq!(squared_loss(&[0.5, -0.5], &[1, 1], -1, 2), 4.0);
    }

    #[test]
    fn squared_loss_rows_sums_pairs() {
        let mut g = Graph::new();
        let u = g.input(Tensor::vector(vec![0.5, -0.5]));
        let codes = g.input(Tensor::matrix(2, 2, vec![1.0, 1.0, -1.0, 1.0]).unwrap());
        let targets = g.input(Tensor::vector(vec![-2.0, 2.0]));
        let l = squared_loss_rows(&mut g, u, codes, targets).unwrap();
        let expected = squared_loss(&[0.5, -0.5], &[1, 1], -1, 2) + squared_loss(&[0.5, -0.5], &[-1, 1], 1, 2);
        assert_eq!(g.value(l).item().unwrap(), expected);
    }

    #[test]
    fn margin_validation() {
        assert!(LossWeights { lambda: 1.0, gamma: 1.0, margin: 1.2 }.validate().is_err());
        assert!(LossWeights { lambda: -1.0, gamma: 1.0, margin: 0.4 }.validate().is_err());
        assert!(LossWeights::defaults(16, 400).validate().is_ok());
        assert_eq!(LossWeights::defaults(16, 400).margin, 0.4);
    }
}
