use serde::{Deserialize, Serialize};

use crate::error::{dim_err, invalid, Result};
use crate::numkernel::Tensor;

/// One of the three channel blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    Common,
    Specific,
    Confounding,
}

impl Part {
    pub const ALL: [Part; 3] = [Part::Common, Part::Specific, Part::Confounding];

    pub fn name(self) -> &'static str {
        match self {
            Part::Common => "common",
            Part::Specific => "specific",
            Part::Confounding => "confounding",
        }
    }
}

/// Contiguous split of `d` channels into common `[0, d_c)`, specific
/// `[d_c, d_c + d_p)` and confounding `[d_c + d_p, d)` blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawPartition", into = "RawPartition")]
pub struct PartitionSpec {
    common: usize,
    specific: usize,
    confounding: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPartition {
    d: usize,
    d_c: usize,
    d_p: usize,
    d_n: usize,
}

impl TryFrom<RawPartition> for PartitionSpec {
    type Error = crate::error::Error;

    fn try_from(r: RawPartition) -> Result<Self> {
        let p = PartitionSpec::new(r.d_c, r.d_p, r.d_n)?;
        if p.total() != r.d {
            return invalid(format!("partition blocks sum to {} but d = {}", p.total(), r.d));
        }
        Ok(p)
    }
}

impl From<PartitionSpec> for RawPartition {
    fn from(p: PartitionSpec) -> Self {
        RawPartition {
            d: p.total(),
            d_c: p.common,
            d_p: p.specific,
            d_n: p.confounding,
        }
    }
}

impl PartitionSpec {
    pub fn new(common: usize, specific: usize, confounding: usize) -> Result<Self> {
        if common == 0 || specific == 0 || confounding == 0 {
            return invalid(format!(
                "partition blocks must be non-empty, got ({common}, {specific}, {confounding})"
            ));
        }
        Ok(Self {
            common,
            specific,
            confounding,
        })
    }

    pub fn total(&self) -> usize {
        self.common + self.specific + self.confounding
    }

    pub fn size(&self, part: Part) -> usize {
        match part {
            Part::Common => self.common,
            Part::Specific => self.specific,
            Part::Confounding => self.confounding,
        }
    }

    /// Channel index range of a block.
    pub fn range(&self, part: Part) -> std::ops::Range<usize> {
        match part {
            Part::Common => 0..self.common,
            Part::Specific => self.common..self.common + self.specific,
            Part::Confounding => self.common + self.specific..self.total(),
        }
    }

    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.common, self.specific, self.confounding)
    }

    /// Splits a length-`d` vector into its three blocks.
    pub fn split<'a>(&self, v: &'a [f64]) -> Result<[&'a [f64]; 3]> {
        if v.len() != self.total() {
            return dim_err(format!("vector of length {} against {} channels", v.len(), self.total()));
        }
        Ok(Part::ALL.map(|p| &v[self.range(p)]))
    }
}

/// Splits `d` channels by `ratio` (common : specific : confounding). The
/// specific and confounding sizes are floored; the remainder goes to common.
pub fn partition_channels(d: usize, ratio: [f64; 3]) -> Result<PartitionSpec> {
    if d < 3 {
        return invalid(format!("{d} channels cannot hold three non-empty blocks"));
    }
    if ratio.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
        return invalid(format!("ratio entries must be positive, got {ratio:?}"));
    }
    let total: f64 = ratio.iter().sum();
    let specific = (ratio[1] * d as f64 / total).floor() as usize;
    let confounding = (ratio[2] * d as f64 / total).floor() as usize;
    let common = d.saturating_sub(specific + confounding);
    PartitionSpec::new(common, specific, confounding)
        .map_err(|_| crate::error::Error::Validation(format!("{d} channels too few for ratio {ratio:?}")))
}

/// Column slices of a `[rows, d]` matrix by block.
pub(crate) fn split_cols(t: &Tensor, p: &PartitionSpec) -> Result<[Tensor; 3]> {
    if t.cols() != p.total() {
        return dim_err(format!("{} columns against {} channels", t.cols(), p.total()));
    }
    let c = t.slice_cols(0, p.common)?;
    let s = t.slice_cols(p.common, p.common + p.specific)?;
    let n = t.slice_cols(p.common + p.specific, p.total())?;
    Ok([c, s, n])
}
