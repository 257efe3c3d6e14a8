//! Training objective: coarse cross-entropy, fused-label alignment, and the
//! feature-structuralization block (decorrelation, common-part similarity
//! across levels and among siblings, specific-part divergence).
//!
//! Each term is recorded on a [`Tape`] so that one backward pass produces its
//! gradient. The plain functions evaluate the same recordings on constants.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, invalid, Result};
use crate::hierarchy::HierarchySpec;
use crate::model::{ForwardPass, Part, PartitionSpec, StructuredFeatures};
use crate::numkernel::{cosine_similarity, kl_divergence, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossCoefficients {
    /// Weight of the ground-truth label in the fused alignment target.
    pub eps_fuse: f64,
    pub lambda_cs: f64,
    pub lambda_cd: f64,
    pub lambda_sp: f64,
}

impl Default for LossCoefficients {
    fn default() -> Self {
        Self {
            eps_fuse: 0.7,
            lambda_cs: 1.0,
            lambda_cd: 1.0,
            lambda_sp: 1.0,
        }
    }
}

impl LossCoefficients {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.eps_fuse) {
            return invalid(format!("eps_fuse must lie in [0, 1], got {}", self.eps_fuse));
        }
        for (name, v) in [("lambda_cs", self.lambda_cs), ("lambda_cd", self.lambda_cd), ("lambda_sp", self.lambda_sp)] {
            if !(v.is_finite() && v >= 0.0) {
                return invalid(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        Ok(())
    }
}

/// `enable_fs` keeps the structuralization block in the objective;
/// `enable_cs` selects structured (λ-weighted) inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Toggles {
    pub enable_fs: bool,
    pub enable_cs: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self {
            enable_fs: true,
            enable_cs: true,
        }
    }
}

/// Values of every objective term for one batch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents {
    /// Cross-entropy summed over the coarse levels.
    pub l_c: f64,
    /// Fine-level cross-entropy.
    pub l_f: f64,
    pub l_lf: f64,
    pub l_dec: f64,
    pub s_cs: f64,
    pub s_cd: f64,
    pub s_p: f64,
}

impl LossComponents {
    /// `L_dec − λcs·S_cs − λcd·S_cd + λsp·S_p`.
    pub fn structuralization(&self, k: &LossCoefficients) -> f64 {
        self.l_dec - k.lambda_cs * self.s_cs - k.lambda_cd * self.s_cd + k.lambda_sp * self.s_p
    }
}

/// Weighted objective. The structuralization block is dropped when
/// `enable_fs` is off; `enable_cs` has no effect on the objective.
pub fn total_loss(c: &LossComponents, k: &LossCoefficients, toggles: Toggles) -> f64 {
    let base = c.l_c + c.l_f + c.l_lf;
    if toggles.enable_fs {
        base + c.structuralization(k)
    } else {
        base
    }
}

fn zero(tape: &mut Tape) -> Var {
    tape.constant(Tensor::scalar(0.0))
}

fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (b, &y) in labels.iter().enumerate() {
        if y >= classes {
            return invalid(format!("label {y} out of range for {classes} classes"));
        }
        t.data_mut()[b * classes + y] = 1.0;
    }
    Ok(t)
}

/// Mean cross-entropy of `logits: [B, K]` against integer labels.
pub(crate) fn record_ce(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let (b, k) = (tape.value(logits).rows(), tape.value(logits).cols());
    if labels.len() != b {
        return dim_err(format!("{} labels for {b} rows", labels.len()));
    }
    let logp = tape.log_softmax_rows(logits)?;
    let y = tape.constant(one_hot(labels, k)?.map(|v| -v / b as f64));
    let prod = tape.mul(logp, y)?;
    Ok(tape.sum(prod))
}

/// `Σ_{g≥1} CE(logits_g, labels_g)`; `logits[0]` and `labels[0]` are the
/// fine level and are ignored.
pub(crate) fn record_coarse_ce(tape: &mut Tape, logits: &[Var], labels: &[Vec<usize>]) -> Result<Var> {
    let mut acc = zero(tape);
    for (g, &logits_g) in logits.iter().enumerate().skip(1) {
        let labels_g = labels
            .get(g)
            .ok_or_else(|| crate::error::Error::Validation(format!("labels missing for level {g}")))?;
        let ce = record_ce(tape, logits_g, labels_g)?;
        acc = tape.add(acc, ce)?;
    }
    Ok(acc)
}

/// `KL(ε·y_f + (1−ε)·mean_g lift(softmax(logits_g)) ‖ softmax(logits_0))`,
/// averaged over the batch.
pub(crate) fn record_alignment(
    tape: &mut Tape,
    logits: &[Var],
    fine_labels: &[usize],
    h: &HierarchySpec,
    eps: f64,
) -> Result<Var> {
    let fine = logits[0];
    let (b, k) = (tape.value(fine).rows(), tape.value(fine).cols());
    let y = one_hot(fine_labels, k)?;
    let coarse = logits.len() - 1;
    let target = if coarse == 0 {
        tape.constant(y)
    } else {
        let mut lifted_sum: Option<Var> = None;
        for (g, &logits_g) in logits.iter().enumerate().skip(1) {
            let logp = tape.log_softmax_rows(logits_g)?;
            let prob = tape.exp(logp);
            let lift = tape.constant(Tensor::from_rows(&h.lift_matrix(g))?);
            let lifted = tape.matmul(prob, lift)?;
            lifted_sum = Some(match lifted_sum {
                None => lifted,
                Some(s) => tape.add(s, lifted)?,
            });
        }
        let mixed = tape.scale(lifted_sum.expect("coarse levels"), (1.0 - eps) / coarse as f64);
        let truth = tape.constant(y.map(|v| eps * v));
        tape.add(truth, mixed)?
    };
    let logq = tape.log_softmax_rows(fine)?;
    let logt = tape.ln_clamped(target, crate::numkernel::EPS_PROB);
    let diff = tape.sub(logt, logq)?;
    let terms = tape.mul(target, diff)?;
    let s = tape.sum(terms);
    Ok(tape.scale(s, 1.0 / b as f64))
}

/// Channel mean of one block, per sample: `[B, L]`.
fn channel_pooled(tape: &mut Tape, rows: Var, p: &PartitionSpec, part: Part, batch: usize, l: usize) -> Result<Var> {
    let r = p.range(part);
    let s = tape.slice_cols(rows, r.start, r.end)?;
    let m = tape.mean_cols(s)?;
    tape.reshape(m, &[batch, l])
}

/// Mean over samples and levels of the off-diagonal sum of the 3×3 cosine
/// Gram matrix of channel-pooled blocks.
pub(crate) fn record_decorrelation(tape: &mut Tape, features: &[Var], p: &PartitionSpec, batch: usize, l: usize) -> Result<Var> {
    let mut acc = zero(tape);
    for &f in features {
        let [c, s, n] = Part::ALL.map(|part| channel_pooled(tape, f, p, part, batch, l));
        let (c, s, n) = (c?, s?, n?);
        for (a, b) in [(c, s), (c, n), (s, n)] {
            let cos = tape.row_cosine(a, b)?;
            let sum = tape.sum(cos);
            acc = tape.add(acc, sum)?;
        }
    }
    Ok(tape.scale(acc, 2.0 / (batch * features.len()) as f64))
}

/// Mean over samples and adjacent level pairs of the cosine between the
/// flattened common blocks.
pub(crate) fn record_common_granularity(tape: &mut Tape, features: &[Var], p: &PartitionSpec, batch: usize, l: usize) -> Result<Var> {
    if features.len() < 2 {
        return Ok(zero(tape));
    }
    let d_c = p.size(Part::Common);
    let flat: Vec<Var> = features
        .iter()
        .map(|&f| {
            let c = tape.slice_cols(f, 0, d_c)?;
            tape.reshape(c, &[batch, l * d_c])
        })
        .collect::<Result<_>>()?;
    let mut acc = zero(tape);
    for w in flat.windows(2) {
        let cos = tape.row_cosine(w[0], w[1])?;
        let sum = tape.sum(cos);
        acc = tape.add(acc, sum)?;
    }
    Ok(tape.scale(acc, 1.0 / (batch * (features.len() - 1)) as f64))
}

/// Averaging matrix `[classes.len(), B]` whose row `i` is the mean indicator
/// of the samples labeled `classes[i]`.
fn class_mean_matrix(labels: &[usize], classes: &[usize]) -> Tensor {
    let b = labels.len();
    let mut t = Tensor::zeros(&[classes.len(), b]);
    for (i, &k) in classes.iter().enumerate() {
        let members: Vec<usize> = (0..b).filter(|&j| labels[j] == k).collect();
        for j in &members {
            t.data_mut()[i * b + j] = 1.0 / members.len() as f64;
        }
    }
    t
}

fn present_classes(labels: &[usize]) -> Vec<usize> {
    let mut v = labels.to_vec();
    v.sort_unstable();
    v.dedup();
    v
}

/// Off-diagonal sum of the cosine Gram matrix of the per-class prototypes of
/// `classes` taken from `block: [B, d_part]`.
fn prototype_gram_sum(tape: &mut Tape, block: Var, labels: &[usize], classes: &[usize]) -> Result<Option<Var>> {
    if classes.len() < 2 {
        return Ok(None);
    }
    let a = tape.constant(class_mean_matrix(labels, classes));
    let protos = tape.matmul(a, block)?;
    let gram = tape.cosine_gram(protos)?;
    let m = classes.len();
    let mask = Tensor::full(&[m, m], 1.0).zip_map(&Tensor::identity(m), |a, b| a - b)?;
    let mask = tape.constant(mask);
    let off = tape.mul(gram, mask)?;
    Ok(Some(tape.sum(off)))
}

fn pooled_block(tape: &mut Tape, pooled: Var, p: &PartitionSpec, part: Part) -> Result<Var> {
    let r = p.range(part);
    tape.slice_cols(pooled, r.start, r.end)
}

/// Sibling common-prototype similarity from batch class means, normalized
/// per level by parent count and class count, then by `G − 1`.
pub(crate) fn record_sibling_similarity(
    tape: &mut Tape,
    pooled: &[Var],
    labels: &[Vec<usize>],
    h: &HierarchySpec,
    p: &PartitionSpec,
) -> Result<Var> {
    let levels = pooled.len();
    let mut acc = zero(tape);
    if levels < 2 {
        return Ok(acc);
    }
    for g in 0..levels - 1 {
        let block = pooled_block(tape, pooled[g], p, Part::Common)?;
        let present = present_classes(&labels[g]);
        let mut level_acc = zero(tape);
        for q in 0..h.class_count(g + 1) {
            let siblings: Vec<usize> = present
                .iter()
                .copied()
                .filter(|&k| h.parent(g, k) == Some(q))
                .collect();
            if let Some(s) = prototype_gram_sum(tape, block, &labels[g], &siblings)? {
                level_acc = tape.add(level_acc, s)?;
            }
        }
        let norm = 1.0 / (h.class_count(g + 1) * h.class_count(g)) as f64;
        let level_acc = tape.scale(level_acc, norm);
        acc = tape.add(acc, level_acc)?;
    }
    Ok(tape.scale(acc, 1.0 / (levels - 1) as f64))
}

/// Specific-prototype similarity among all classes present at each level,
/// normalized by class count and by `max(G − 1, 1)`.
pub(crate) fn record_specific_divergence(
    tape: &mut Tape,
    pooled: &[Var],
    labels: &[Vec<usize>],
    class_counts: &[usize],
    p: &PartitionSpec,
) -> Result<Var> {
    let mut acc = zero(tape);
    for (g, &pv) in pooled.iter().enumerate() {
        let block = pooled_block(tape, pv, p, Part::Specific)?;
        let present = present_classes(&labels[g]);
        if let Some(s) = prototype_gram_sum(tape, block, &labels[g], &present)? {
            let s = tape.scale(s, 1.0 / class_counts[g] as f64);
            acc = tape.add(acc, s)?;
        }
    }
    Ok(tape.scale(acc, 1.0 / pooled.len().saturating_sub(1).max(1) as f64))
}

/// Handles of every recorded objective term.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub l_c: Var,
    pub l_f: Var,
    pub l_lf: Var,
    pub l_dec: Var,
    pub s_cs: Var,
    pub s_cd: Var,
    pub s_p: Var,
    pub total: Var,
}

impl LossVars {
    pub fn components(&self, tape: &Tape) -> LossComponents {
        LossComponents {
            l_c: tape.scalar(self.l_c),
            l_f: tape.scalar(self.l_f),
            l_lf: tape.scalar(self.l_lf),
            l_dec: tape.scalar(self.l_dec),
            s_cs: tape.scalar(self.s_cs),
            s_cd: tape.scalar(self.s_cd),
            s_p: tape.scalar(self.s_p),
        }
    }

    /// Named terms in a fixed order.
    pub fn named(&self) -> [(&'static str, Var); 8] {
        [
            ("L_c", self.l_c),
            ("L_f", self.l_f),
            ("L_lf", self.l_lf),
            ("L_dec", self.l_dec),
            ("S_cs", self.s_cs),
            ("S_cd", self.s_cd),
            ("S_p", self.s_p),
            ("total", self.total),
        ]
    }
}

/// Records every term and the weighted total for a forward pass. The total
/// is assembled in the same operation order as [`total_loss`].
pub fn record_losses(
    tape: &mut Tape,
    pass: &ForwardPass,
    labels: &[Vec<usize>],
    h: &HierarchySpec,
    p: &PartitionSpec,
    k: &LossCoefficients,
    toggles: Toggles,
) -> Result<LossVars> {
    let levels = pass.logits.len();
    if labels.len() != levels || h.levels() != levels {
        return invalid(format!(
            "{} label levels and a {}-level hierarchy for a {levels}-level model",
            labels.len(),
            h.levels()
        ));
    }
    let (b, l) = (pass.batch, pass.spatial_len);
    let l_c = record_coarse_ce(tape, &pass.logits, labels)?;
    let l_f = record_ce(tape, pass.logits[0], &labels[0])?;
    let l_lf = record_alignment(tape, &pass.logits, &labels[0], h, k.eps_fuse)?;
    let l_dec = record_decorrelation(tape, &pass.features, p, b, l)?;
    let s_cs = record_common_granularity(tape, &pass.features, p, b, l)?;
    let s_cd = record_sibling_similarity(tape, &pass.pooled, labels, h, p)?;
    let s_p = record_specific_divergence(tape, &pass.pooled, labels, h.class_counts(), p)?;

    let base = tape.add(l_c, l_f)?;
    let base = tape.add(base, l_lf)?;
    let total = if toggles.enable_fs {
        let cs = tape.scale(s_cs, k.lambda_cs);
        let cd = tape.scale(s_cd, k.lambda_cd);
        let sp = tape.scale(s_p, k.lambda_sp);
        let fs = tape.sub(l_dec, cs)?;
        let fs = tape.sub(fs, cd)?;
        let fs = tape.add(fs, sp)?;
        tape.add(base, fs)?
    } else {
        base
    };
    Ok(LossVars {
        l_c,
        l_f,
        l_lf,
        l_dec,
        s_cs,
        s_cd,
        s_p,
        total,
    })
}

// ---- plain evaluations ----

/// Mean cross-entropy summed over coarse levels. `coarse_logits[i]` and
/// `labels[i]` belong to level `i + 1`.
pub fn coarse_ce_loss(coarse_logits: &[Tensor], labels: &[Vec<usize>]) -> Result<f64> {
    if labels.len() != coarse_logits.len() {
        return invalid(format!("{} label levels for {} coarse levels", labels.len(), coarse_logits.len()));
    }
    let mut tape = Tape::new();
    let mut acc = zero(&mut tape);
    for (z, y) in coarse_logits.iter().zip(labels) {
        let v = tape.constant(z.clone());
        let ce = record_ce(&mut tape, v, y)?;
        acc = tape.add(acc, ce)?;
    }
    Ok(tape.scalar(acc))
}

/// Spreads each coarse class's probability uniformly over its fine
/// descendants: `[B, K_g] -> [B, K]`.
pub fn lift_to_fine(h: &HierarchySpec, level: usize, probs: &Tensor) -> Result<Tensor> {
    if level >= h.levels() || probs.cols() != h.class_count(level) {
        return dim_err(format!("{} columns for level {level}", probs.cols()));
    }
    probs.matmul(&Tensor::from_rows(&h.lift_matrix(level))?)
}

fn check_distribution(rows: &Tensor, what: &str) -> Result<()> {
    for r in 0..rows.rows() {
        let s: f64 = rows.row(r).iter().sum();
        if (s - 1.0).abs() > 1e-6 || rows.row(r).iter().any(|v| *v < 0.0) {
            return invalid(format!("{what} row {r} is not a distribution (sum {s})"));
        }
    }
    Ok(())
}

/// `KL(ε·y_f + (1−ε)·mean_g ŷ_g ‖ ŷ_f)` averaged over the batch, with every
/// distribution already over the fine classes (see [`lift_to_fine`]).
pub fn prediction_alignment_loss(
    coarse_probs: &[Tensor],
    fine_probs: &Tensor,
    y_f: &[usize],
    eps_fuse: f64,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&eps_fuse) {
        return invalid(format!("eps_fuse must lie in [0, 1], got {eps_fuse}"));
    }
    let (b, k) = (fine_probs.rows(), fine_probs.cols());
    if y_f.len() != b {
        return dim_err(format!("{} labels for {b} rows", y_f.len()));
    }
    check_distribution(fine_probs, "fine prediction")?;
    for c in coarse_probs {
        if c.shape() != fine_probs.shape() {
            return dim_err(format!("coarse prediction {:?} against fine {:?}", c.shape(), fine_probs.shape()));
        }
        check_distribution(c, "coarse prediction")?;
    }
    let y = one_hot(y_f, k)?;
    let mut total = 0.0;
    for r in 0..b {
        let target: Vec<f64> = if coarse_probs.is_empty() {
            y.row(r).to_vec()
        } else {
            (0..k)
                .map(|i| {
                    let mean = coarse_probs.iter().map(|c| c.at2(r, i)).sum::<f64>() / coarse_probs.len() as f64;
                    eps_fuse * y.at2(r, i) + (1.0 - eps_fuse) * mean
                })
                .collect()
        };
        total += kl_divergence(&target, fine_probs.row(r))?;
    }
    Ok(total / b as f64)
}

/// Off-diagonal sum of the 3×3 cosine Gram matrix of channel-pooled blocks,
/// averaged over samples and levels.
pub fn disentanglement_loss(levels: &[StructuredFeatures]) -> Result<f64> {
    if levels.is_empty() {
        return dim_err("no levels");
    }
    let b = levels[0].batch_size();
    let mut total = 0.0;
    for f in levels {
        if f.batch_size() != b {
            return dim_err("levels disagree on batch size");
        }
        for s in 0..b {
            let v = Part::ALL.map(|part| f.channel_pooled(part, s));
            for i in 0..3 {
                for j in 0..3 {
                    if i != j {
                        total += cosine_similarity(&v[i], &v[j])?;
                    }
                }
            }
        }
    }
    Ok(total / (b * levels.len()) as f64)
}

/// Mean cosine between same-sample common blocks `[B, d_c, L]` of adjacent
/// levels.
pub fn common_granularity_similarity(commons: &[Tensor]) -> Result<f64> {
    if commons.len() < 2 {
        log::info!("common-part similarity needs two levels; returning 0");
        return Ok(0.0);
    }
    let b = commons[0].shape()[0];
    let mut total = 0.0;
    for w in commons.windows(2) {
        if w[0].shape() != w[1].shape() {
            return dim_err(format!("common blocks {:?} and {:?}", w[0].shape(), w[1].shape()));
        }
        let n = w[0].len() / b;
        for s in 0..b {
            total += cosine_similarity(&w[0].data()[s * n..(s + 1) * n], &w[1].data()[s * n..(s + 1) * n])?;
        }
    }
    Ok(total / (b * (commons.len() - 1)) as f64)
}

fn gram_off_diagonal(protos: &[&Vec<f64>]) -> Result<f64> {
    let mut s = 0.0;
    for (i, a) in protos.iter().enumerate() {
        for (j, b) in protos.iter().enumerate() {
            if i != j {
                s += cosine_similarity(a, b)?;
            }
        }
    }
    Ok(s)
}

/// Sibling similarity of per-class common prototypes. `protos[g]` maps
/// level-`g` class ids to prototypes, for `g` below the coarsest level.
pub fn common_sibling_similarity(protos: &[BTreeMap<usize, Vec<f64>>], h: &HierarchySpec) -> Result<f64> {
    let levels = h.levels();
    if protos.len() >= levels {
        return invalid(format!("{} prototype levels for a {levels}-level hierarchy", protos.len()));
    }
    let mut total = 0.0;
    for (g, map) in protos.iter().enumerate() {
        let mut level = 0.0;
        for q in 0..h.class_count(g + 1) {
            let sibs: Vec<&Vec<f64>> = map
                .iter()
                .filter(|(k, _)| h.parent(g, **k) == Some(q))
                .map(|(_, v)| v)
                .collect();
            level += gram_off_diagonal(&sibs)?;
        }
        total += level / (h.class_count(g + 1) * h.class_count(g)) as f64;
    }
    Ok(total / (levels - 1).max(1) as f64)
}

/// Similarity among all per-class specific prototypes at each level.
pub fn specific_divergence(protos: &[BTreeMap<usize, Vec<f64>>], class_counts: &[usize]) -> Result<f64> {
    if protos.len() != class_counts.len() {
        return dim_err(format!("{} prototype levels for {} class counts", protos.len(), class_counts.len()));
    }
    let mut total = 0.0;
    for (map, &k) in protos.iter().zip(class_counts) {
        let all: Vec<&Vec<f64>> = map.values().collect();
        total += gram_off_diagonal(&all)? / k as f64;
    }
    Ok(total / protos.len().saturating_sub(1).max(1) as f64)
}
