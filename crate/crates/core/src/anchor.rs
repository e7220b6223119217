//! Per-class anchored local features and the Bernoulli feature exchange.

use std::collections::BTreeMap;

use rand::Rng;

use crate::checkpoint::Checkpoint;
use crate::error::{contract_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ClassAnchors {
    /// One anchor vector per part.
    pub vectors: Vec<Vec<f64>>,
    /// Samples averaged into the anchors at the last refresh.
    pub count: usize,
}

/// Local vectors of a set of samples grouped by class: for each class, one
/// entry per sample holding its `M` part vectors.
pub type ClassGroups = BTreeMap<usize, Vec<Vec<Vec<f64>>>>;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AnchorBank {
    parts: usize,
    dim: usize,
    classes: BTreeMap<usize, ClassAnchors>,
}

impl AnchorBank {
    pub fn new(parts: usize, dim: usize) -> Self {
        Self {
            parts,
            dim,
            classes: BTreeMap::new(),
        }
    }

    pub fn parts(&self) -> usize {
        self.parts
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> impl Iterator<Item = (usize, &ClassAnchors)> {
        self.classes.iter().map(|(c, a)| (*c, a))
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn get(&self, class: usize) -> Result<&[Vec<f64>]> {
        self.classes
            .get(&class)
            .map(|a| a.vectors.as_slice())
            .ok_or_else(|| Error::Lookup(format!("no anchors for class {class}")))
    }

    /// Recomputes anchors as the per-class, per-part mean of `groups`.
    ///
    /// A class listed with no samples keeps its previous anchors; classes
    /// not listed are left untouched. The bank is only modified when every
    /// class in `groups` is valid.
    pub fn update(&mut self, groups: &ClassGroups) -> Result<()> {
        let mut fresh = Vec::with_capacity(groups.len());
        for (&class, samples) in groups {
            if samples.is_empty() {
                if !self.classes.contains_key(&class) {
                    return contract_err(format!(
                        "class {class} has no samples and no previous anchors"
                    ));
                }
                continue;
            }
            let mut sums = vec![vec![0.0; self.dim]; self.parts];
            for (s, sample) in samples.iter().enumerate() {
                if sample.len() != self.parts {
                    return contract_err(format!(
                        "class {class} sample {s} has {} parts, expected {}",
                        sample.len(),
                        self.parts
                    ));
                }
                for (sum, v) in sums.iter_mut().zip(sample) {
                    if v.len() != self.dim {
                        return contract_err(format!(
                            "class {class} sample {s} has a vector of length {}, expected {}",
                            v.len(),
                            self.dim
                        ));
                    }
                    sum.iter_mut().zip(v).for_each(|(a, b)| *a += b);
                }
            }
            let inv = 1.0 / samples.len() as f64;
            for sum in sums.iter_mut() {
                sum.iter_mut().for_each(|v| *v *= inv);
            }
            if sums.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("anchors of class {class}")));
            }
            fresh.push((
                class,
                ClassAnchors {
                    vectors: sums,
                    count: samples.len(),
                },
            ));
        }
        self.classes.extend(fresh);
        Ok(())
    }

    /// Stores anchors as `anchor/<class>/<part>` vectors plus
    /// `anchor_count/<class>` scalars.
    pub fn write_checkpoint(&self, ck: &mut Checkpoint) {
        ck.insert("anchor_meta/shape", Tensor::vector(vec![self.parts as f64, self.dim as f64]));
        for (class, a) in &self.classes {
            for (j, v) in a.vectors.iter().enumerate() {
                ck.insert(format!("anchor/{class}/{j}"), Tensor::vector(v.clone()));
            }
            ck.insert(format!("anchor_count/{class}"), Tensor::scalar(a.count as f64));
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let shape = ck.require("anchor_meta/shape")?.data().to_vec();
        let [parts, dim] = shape[..] else {
            return Err(Error::Format {
                kind: "FHT1",
                reason: "anchor_meta/shape must hold [parts, dim]".into(),
            });
        };
        let mut bank = AnchorBank::new(parts as usize, dim as usize);
        for (name, _) in ck.entries() {
            let Some(class) = name.strip_prefix("anchor_count/") else {
                continue;
            };
            let class: usize = class.parse().map_err(|_| Error::Format {
                kind: "FHT1",
                reason: format!("bad anchor class in `{name}`"),
            })?;
            let mut vectors = Vec::with_capacity(bank.parts);
            for j in 0..bank.parts {
                let v = ck.require(&format!("anchor/{class}/{j}"))?;
                if v.len() != bank.dim {
                    return Err(Error::Format {
                        kind: "FHT1",
                        reason: format!("anchor {class}/{j} has length {}", v.len()),
                    });
                }
                vectors.push(v.data().to_vec());
            }
            let count = ck.scalar(name)? as usize;
            bank.classes.insert(class, ClassAnchors { vectors, count });
        }
        Ok(bank)
    }
}

/// Replaces part `j` by its anchor wherever `xi[j] < 0.5`.
pub fn exchange<T: Clone>(local: &[T], anchors: &[T], xi: &[f64]) -> Result<Vec<T>> {
    if local.len() != anchors.len() || local.len() != xi.len() {
        return contract_err(format!(
            "exchange needs equal part counts, got {} local, {} anchors, {} draws",
            local.len(),
            anchors.len(),
            xi.len()
        ));
    }
    Ok(local
        .iter()
        .zip(anchors)
        .zip(xi)
        .map(|((f, c), x)| if *x >= 0.5 { f.clone() } else { c.clone() })
        .collect())
}

/// `M` independent fair Bernoulli draws as `0.0` / `1.0`.
pub fn draw_xi(rng: &mut impl Rng, parts: usize) -> Vec<f64> {
    (0..parts)
        .map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn groups(entries: Vec<(usize, Vec<Vec<Vec<f64>>>)>) -> ClassGroups {
        entries.into_iter().collect()
    }

    #[test]
    fn single_sample_anchors_equal_sample() {
        let mut bank = AnchorBank::new(2, 3);
        let s = vec![vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 0.0]];
        bank.update(&groups(vec![(0, vec![s.clone()])])).unwrap();
        assert_eq!(bank.get(0).unwrap(), s.as_slice());
    }

    #[test]
    fn two_sample_mean() {
        let mut bank = AnchorBank::new(1, 2);
        bank.update(&groups(vec![(3, vec![vec![vec![0.0, 2.0]], vec![vec![2.0, 0.0]]])]))
            .unwrap();
        assert_eq!(bank.get(3).unwrap()[0], vec![1.0, 1.0]);
    }

    #[test]
    fn order_does_not_matter_and_update_is_idempotent() {
        let a = vec![vec![0.1, 0.7]];
        let b = vec![vec![0.4, -0.2]];
        let c = vec![vec![2.5, 1.0]];
        let mut x = AnchorBank::new(1, 2);
        let mut y = AnchorBank::new(1, 2);
        let g1 = groups(vec![(0, vec![a.clone(), b.clone(), c.clone()])]);
        x.update(&g1).unwrap();
        y.update(&groups(vec![(0, vec![c, a, b])])).unwrap();
        for (p, q) in x.get(0).unwrap()[0].iter().zip(&y.get(0).unwrap()[0]) {
            assert!((p - q).abs() < 1e-15);
        }
        let before = x.clone();
        x.update(&g1).unwrap();
        assert_eq!(x, before);
    }

    #[test]
    fn empty_class_keeps_previous_or_errors() {
        let mut bank = AnchorBank::new(1, 1);
        assert!(matches!(
            bank.update(&groups(vec![(0, vec![])])),
            Err(Error::Contract(_))
        ));
        bank.update(&groups(vec![(0, vec![vec![vec![5.0]]])])).unwrap();
        bank.update(&groups(vec![(0, vec![]), (1, vec![vec![vec![2.0]]])])).unwrap();
        assert_eq!(bank.get(0).unwrap()[0], vec![5.0]);
        assert_eq!(bank.get(1).unwrap()[0], vec![2.0]);
        assert!(matches!(bank.get(9), Err(Error::Lookup(_))));
    }

    #[test]
    fn failed_update_leaves_bank_untouched() {
        let mut bank = AnchorBank::new(1, 1);
        bank.update(&groups(vec![(0, vec![vec![vec![5.0]]])])).unwrap();
        let before = bank.clone();
        let bad = groups(vec![(0, vec![vec![vec![1.0]]]), (1, vec![vec![vec![1.0, 2.0]]])]);
        assert!(bank.update(&bad).is_err());
        assert_eq!(bank, before);
    }

    #[test]
    fn exchange_examples() {
        let g = vec!["g1", "g2", "g3"];
        let c = vec!["c1", "c2", "c3"];
        assert_eq!(exchange(&g, &c, &[1.0, 1.0, 1.0]).unwrap(), g);
        assert_eq!(exchange(&g, &c, &[0.0, 0.0, 0.0]).unwrap(), c);
        assert_eq!(exchange(&g[..2], &c[..2], &[1.0, 0.0]).unwrap(), vec!["g1", "c2"]);
        assert!(exchange(&g, &c, &[1.0]).is_err());
    }

    #[test]
    fn xi_draws() {
        let a = draw_xi(&mut ChaCha8Rng::seed_from_u64(5), 64);
        let b = draw_xi(&mut ChaCha8Rng::seed_from_u64(5), 64);
        assert_eq!(a, b);
        assert!(draw_xi(&mut ChaCha8Rng::seed_from_u64(5), 0).is_empty());

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let parts = 4;
        let mut sums = vec![0.0; parts];
        let n = 10_000;
        for _ in 0..n {
            for (s, x) in sums.iter_mut().zip(draw_xi(&mut rng, parts)) {
                *s += x;
            }
        }
        for s in sums {
            let mean = s / n as f64;
            assert!((0.48..=0.52).contains(&mean), "mean {mean}");
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut bank = AnchorBank::new(2, 2);
        bank.update(&groups(vec![
            (0, vec![vec![vec![1.0, 2.0], vec![3.0, 4.0]]]),
            (7, vec![vec![vec![0.5, 0.5], vec![0.0, -1.0]], vec![vec![1.5, 0.5], vec![2.0, 1.0]]]),
        ]))
        .unwrap();
        let mut ck = Checkpoint::new();
        bank.write_checkpoint(&mut ck);
        assert!(ck.get("anchor/7/1").is_some());
        assert_eq!(AnchorBank::from_checkpoint(&ck).unwrap(), bank);
    }
}
