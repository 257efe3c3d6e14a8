//! Momentum-averaged per-class block centroids and weighted nearest-centroid
//! inference.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::classifier::Lambda;
use crate::error::{dim_err, invalid, Error, Result};
use crate::model::{Part, PartitionSpec, PooledFeatures, StructuredFeatures};
use crate::numkernel::Tensor;

/// Per-class pooled prototypes of the classes present in a batch.
pub type ClassPrototypes = BTreeMap<usize, PooledFeatures>;

fn group_means(samples: impl Iterator<Item = (usize, PooledFeatures)>) -> ClassPrototypes {
    let mut sums: BTreeMap<usize, (PooledFeatures, usize)> = BTreeMap::new();
    for (k, f) in samples {
        match sums.get_mut(&k) {
            None => {
                sums.insert(k, (f, 1));
            }
            Some((acc, n)) => {
                for part in Part::ALL {
                    let dst = match part {
                        Part::Common => &mut acc.common,
                        Part::Specific => &mut acc.specific,
                        Part::Confounding => &mut acc.confounding,
                    };
                    dst.iter_mut().zip(f.part(part)).for_each(|(a, b)| *a += b);
                }
                *n += 1;
            }
        }
    }
    sums.into_iter()
        .map(|(k, (mut f, n))| {
            for v in [&mut f.common, &mut f.specific, &mut f.confounding] {
                v.iter_mut().for_each(|x| *x /= n as f64);
            }
            (k, f)
        })
        .collect()
}

/// Spatially pools every block, then averages the samples of each class.
pub fn batch_part_prototypes(parts: &StructuredFeatures, labels: &[usize]) -> Result<ClassPrototypes> {
    let b = parts.batch_size();
    if b == 0 {
        return dim_err("empty batch");
    }
    if labels.len() != b {
        return dim_err(format!("{} labels for a batch of {b}", labels.len()));
    }
    Ok(group_means((0..b).map(|s| (labels[s], parts.pooled(s)))))
}

/// Class prototypes from already pooled features `[B, d]`.
pub fn prototypes_from_pooled(pooled: &Tensor, labels: &[usize], p: &PartitionSpec) -> Result<ClassPrototypes> {
    if labels.len() != pooled.rows() {
        return dim_err(format!("{} labels for {} rows", labels.len(), pooled.rows()));
    }
    let rows = (0..pooled.rows())
        .map(|r| Ok((labels[r], PooledFeatures::from_vector(pooled.row(r), p)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(group_means(rows.into_iter()))
}

/// Centroids indexed by level, then class. `None` marks a class whose
/// prototype has never been observed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubCentroidBank {
    pub momentum: f64,
    pub levels: Vec<Vec<Option<PooledFeatures>>>,
}

impl SubCentroidBank {
    pub fn new(class_counts: &[usize], momentum: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) {
            return invalid(format!("momentum must lie in [0, 1], got {momentum}"));
        }
        Ok(Self {
            momentum,
            levels: class_counts.iter().map(|&k| vec![None; k]).collect(),
        })
    }

    pub fn centroid(&self, level: usize, class: usize) -> Option<&PooledFeatures> {
        self.levels.get(level)?.get(class)?.as_ref()
    }

    /// `F ← μ·F + (1−μ)·P` for every class present in `protos`; a class
    /// seen for the first time takes its prototype directly.
    pub fn update(&mut self, level: usize, protos: &ClassPrototypes) -> Result<()> {
        let mu = self.momentum;
        let slots = self
            .levels
            .get_mut(level)
            .ok_or_else(|| Error::Validation(format!("bank has no level {level}")))?;
        for (&k, p) in protos {
            let n = slots.len();
            let slot = slots
                .get_mut(k)
                .ok_or_else(|| Error::Validation(format!("class {k} out of range for {n} classes at level {level}")))?;
            match slot {
                None => *slot = Some(p.clone()),
                Some(f) => {
                    for part in Part::ALL {
                        if f.part(part).len() != p.part(part).len() {
                            return dim_err(format!(
                                "{} prototype of length {} against centroid of {}",
                                part.name(),
                                p.part(part).len(),
                                f.part(part).len()
                            ));
                        }
                    }
                    for (dst, src) in [
                        (&mut f.common, &p.common),
                        (&mut f.specific, &p.specific),
                        (&mut f.confounding, &p.confounding),
                    ] {
                        dst.iter_mut().zip(src).for_each(|(a, b)| *a = mu * *a + (1.0 - mu) * b);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Returns `bank` after one momentum step with momentum `mu`.
pub fn momentum_update(bank: &SubCentroidBank, level: usize, protos: &ClassPrototypes, mu: f64) -> Result<SubCentroidBank> {
    let mut next = SubCentroidBank {
        momentum: mu,
        levels: bank.levels.clone(),
    };
    if !(0.0..=1.0).contains(&mu) {
        return invalid(format!("momentum must lie in [0, 1], got {mu}"));
    }
    next.update(level, protos)?;
    next.momentum = bank.momentum;
    Ok(next)
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `argmin_k Σ_part λ_part ‖f^part − F_k^part‖₂` at `level`; the lowest
/// index wins ties.
pub fn subcentroid_predict(f: &PooledFeatures, bank: &SubCentroidBank, level: usize, lam: Lambda) -> Result<usize> {
    lam.validate()?;
    let slots = bank
        .levels
        .get(level)
        .ok_or_else(|| Error::Validation(format!("bank has no level {level}")))?;
    if slots.is_empty() {
        return dim_err("no classes at this level");
    }
    let mut best = (0, f64::INFINITY);
    for (k, slot) in slots.iter().enumerate() {
        let c = slot
            .as_ref()
            .ok_or_else(|| Error::State(format!("centroid of class {k} at level {level} was never initialized")))?;
        let mut dist = 0.0;
        for part in Part::ALL {
            if c.part(part).len() != f.part(part).len() {
                return dim_err(format!("{} feature block does not match centroid", part.name()));
            }
            dist += lam.get(part) * euclid(f.part(part), c.part(part));
        }
        if dist < best.1 {
            best = (k, dist);
        }
    }
    Ok(best.0)
}
