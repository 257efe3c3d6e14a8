//! Seeded synthetic source/target domains over a label hierarchy.
//!
//! An input vector is laid out by a [`PartitionSpec`]:
//!
//! * common block: `Σ_g level_scales[g] · C_g[ancestor_g(k)]`, so classes
//!   that share an ancestor share that ancestor's prototype;
//! * specific block: `specific_scale · S[k]`;
//! * confounding block: `confounding_scale · N[k]`;
//!
//! plus isotropic Gaussian noise. Prototype entries are standard normal.
//! The target domain applies, per shifted channel `i`, the affine map
//! `x_i ← (1 + shift_scale·u_i)·x_i + shift_offset·v_i` with `u, v`
//! standard normal and fixed per seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Domain, HierarchySpec, LabeledSample};
use crate::error::{invalid, Result};
use crate::model::{Part, PartitionSpec};

/// Seed offsets for the independent random streams of a generator.
const PROTOTYPE_STREAM: u64 = 10;
const SHIFT_STREAM: u64 = 20;
const SOURCE_NOISE_STREAM: u64 = 30;
const TARGET_NOISE_STREAM: u64 = 31;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticDomainConfig {
    /// Weight of each level's ancestor prototype in the common block. An
    /// empty list means 1.0 at every level.
    pub level_scales: Vec<f64>,
    pub specific_scale: f64,
    pub confounding_scale: f64,
    pub noise_std: f64,
    pub shift_scale: f64,
    pub shift_offset: f64,
    pub shifted_parts: Vec<Part>,
    pub samples_per_class: usize,
    pub seed: u64,
}

impl Default for SyntheticDomainConfig {
    fn default() -> Self {
        Self {
            level_scales: Vec::new(),
            specific_scale: 1.0,
            confounding_scale: 0.5,
            noise_std: 0.5,
            shift_scale: 1.0,
            shift_offset: 1.0,
            shifted_parts: vec![Part::Specific, Part::Confounding],
            samples_per_class: 100,
            seed: 0,
        }
    }
}

impl SyntheticDomainConfig {
    pub fn validate(&self, levels: usize) -> Result<()> {
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return invalid(format!("noise std must be finite and non-negative, got {}", self.noise_std));
        }
        if self.samples_per_class == 0 {
            return invalid("samples per class must be at least 1");
        }
        if !self.level_scales.is_empty() && self.level_scales.len() != levels {
            return invalid(format!(
                "{} level scales for a {levels}-level hierarchy",
                self.level_scales.len()
            ));
        }
        let scalars = [self.specific_scale, self.confounding_scale, self.shift_scale, self.shift_offset];
        if self.level_scales.iter().chain(&scalars).any(|v| !v.is_finite()) {
            return invalid("synthetic scales must be finite");
        }
        Ok(())
    }
}

/// Class prototypes and target-domain shift drawn from one seed.
#[derive(Debug, Clone)]
pub struct SyntheticGenerator {
    hierarchy: HierarchySpec,
    partition: PartitionSpec,
    cfg: SyntheticDomainConfig,
    /// Mean input of each fine class.
    means: Vec<Vec<f64>>,
    /// Per-channel `(scale, offset)` of the target shift.
    shift: Vec<(f64, f64)>,
}

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

impl SyntheticGenerator {
    pub fn new(h: &HierarchySpec, p: &PartitionSpec, cfg: &SyntheticDomainConfig) -> Result<Self> {
        cfg.validate(h.levels())?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(PROTOTYPE_STREAM));
        let d_c = p.size(Part::Common);
        let level_protos: Vec<Vec<Vec<f64>>> = (0..h.levels())
            .map(|g| (0..h.class_count(g)).map(|_| normals(&mut rng, d_c)).collect())
            .collect();
        let k = h.fine_classes();
        let specific: Vec<Vec<f64>> = (0..k).map(|_| normals(&mut rng, p.size(Part::Specific))).collect();
        let confounding: Vec<Vec<f64>> = (0..k).map(|_| normals(&mut rng, p.size(Part::Confounding))).collect();

        let means = (0..k)
            .map(|fine| {
                let mut common = vec![0.0; d_c];
                for (g, protos) in level_protos.iter().enumerate() {
                    let scale = cfg.level_scales.get(g).copied().unwrap_or(1.0);
                    for (c, v) in common.iter_mut().zip(&protos[h.ancestor(fine, g)]) {
                        *c += scale * v;
                    }
                }
                let mut x = common;
                x.extend(specific[fine].iter().map(|v| cfg.specific_scale * v));
                x.extend(confounding[fine].iter().map(|v| cfg.confounding_scale * v));
                x
            })
            .collect();

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(SHIFT_STREAM));
        let u = normals(&mut rng, p.total());
        let v = normals(&mut rng, p.total());
        let mut shift = vec![(1.0, 0.0); p.total()];
        for part in &cfg.shifted_parts {
            for i in p.range(*part) {
                shift[i] = (1.0 + cfg.shift_scale * u[i], cfg.shift_offset * v[i]);
            }
        }
        Ok(Self {
            hierarchy: h.clone(),
            partition: *p,
            cfg: cfg.clone(),
            means,
            shift,
        })
    }

    /// Noise-free source-domain input of a fine class.
    pub fn prototype(&self, fine_class: usize) -> &[f64] {
        &self.means[fine_class]
    }

    pub fn input_dim(&self) -> usize {
        self.partition.total()
    }

    /// Draws `samples_per_class` samples of every fine class, class-major.
    pub fn sample(&self, domain: Domain) -> Result<Dataset> {
        let stream = match domain {
            Domain::Source => SOURCE_NOISE_STREAM,
            Domain::Target => TARGET_NOISE_STREAM,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed.wrapping_add(stream));
        let mut samples = Vec::with_capacity(self.means.len() * self.cfg.samples_per_class);
        for (fine, mean) in self.means.iter().enumerate() {
            let labels = self.hierarchy.label_vector(fine)?;
            for _ in 0..self.cfg.samples_per_class {
                let x = mean
                    .iter()
                    .zip(&self.shift)
                    .map(|(m, (a, b))| {
                        let n: f64 = StandardNormal.sample(&mut rng);
                        let clean = m + self.cfg.noise_std * n;
                        match domain {
                            Domain::Source => clean,
                            Domain::Target => a * clean + b,
                        }
                    })
                    .collect();
                samples.push(LabeledSample {
                    x,
                    labels: labels.clone(),
                });
            }
        }
        Dataset::new(self.hierarchy.clone(), domain, samples)
    }
}

/// Source and target datasets drawn from one configuration.
pub fn generate_synthetic_domains(
    h: &HierarchySpec,
    p: &PartitionSpec,
    cfg: &SyntheticDomainConfig,
) -> Result<(Dataset, Dataset)> {
    let gen = SyntheticGenerator::new(h, p, cfg)?;
    Ok((gen.sample(Domain::Source)?, gen.sample(Domain::Target)?))
}
