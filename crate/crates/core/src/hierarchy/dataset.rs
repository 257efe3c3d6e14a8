use std::path::Path;

use serde::{Deserialize, Serialize};

use super::HierarchySpec;
use crate::error::{invalid, Result};
use crate::numkernel::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

/// One input vector with its label at every granularity level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabeledSample {
    pub x: Vec<f64>,
    pub labels: Vec<usize>,
}

/// A single domain's samples together with the hierarchy they are labeled by.
///
/// Serialized as `{"hierarchy": {...}, "domain": "source", "samples": [{"x": [...], "labels": [...]}]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dataset {
    pub hierarchy: HierarchySpec,
    #[serde(default = "default_domain")]
    pub domain: Domain,
    pub samples: Vec<LabeledSample>,
}

fn default_domain() -> Domain {
    Domain::Source
}

impl Dataset {
    pub fn new(hierarchy: HierarchySpec, domain: Domain, samples: Vec<LabeledSample>) -> Result<Self> {
        let ds = Self {
            hierarchy,
            domain,
            samples,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Checks input widths and label consistency with the hierarchy.
    pub fn validate(&self) -> Result<()> {
        let h = &self.hierarchy;
        let width = self.input_dim();
        for (i, s) in self.samples.iter().enumerate() {
            if s.x.len() != width {
                return invalid(format!("sample {i}: input width {} differs from {width}", s.x.len()));
            }
            if s.x.iter().any(|v| !v.is_finite()) {
                return invalid(format!("sample {i}: non-finite input"));
            }
            if s.labels.len() != h.levels() {
                return invalid(format!(
                    "sample {i}: {} labels for a {}-level hierarchy",
                    s.labels.len(),
                    h.levels()
                ));
            }
            let expected = h.label_vector(s.labels[0])?;
            if expected != s.labels {
                return invalid(format!(
                    "sample {i}: labels {:?} disagree with hierarchy ancestors {expected:?}",
                    s.labels
                ));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.samples.first().map_or(0, |s| s.x.len())
    }

    /// Inputs of the selected samples stacked into `[n, input_dim]`.
    pub fn batch_inputs(&self, idx: &[usize]) -> Tensor {
        let d = self.input_dim();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(&self.samples[i].x);
        }
        Tensor::matrix(idx.len(), d, data).expect("validated widths")
    }

    /// Labels of the selected samples, one vector per level.
    pub fn batch_labels(&self, idx: &[usize]) -> Vec<Vec<usize>> {
        (0..self.hierarchy.levels())
            .map(|g| idx.iter().map(|&i| self.samples[i].labels[g]).collect())
            .collect()
    }

    pub fn fine_labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.labels[0]).collect()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ds: Self = serde_json::from_str(&text)?;
        ds.validate()?;
        Ok(ds)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}
