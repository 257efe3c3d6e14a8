use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Backbone, BatchStats, Gtl, Mode, PartitionSpec};
use crate::classifier::{Lambda, StructuredClassifier};
use crate::error::{dim_err, invalid, Result};
use crate::numkernel::{Tape, Tensor, Var};

/// Architecture of a [`CfsgModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden: usize,
    pub raw_channels: usize,
    pub spatial_len: usize,
    pub partition: PartitionSpec,
    pub class_counts: Vec<usize>,
    /// Separate extractor for the coarse levels.
    pub dual_backbone: bool,
    pub learnable_lambda: bool,
}

/// Extractor(s), one GTL and one classifier per level, optional learnable
/// inference weights stored as their logarithms.
#[derive(Debug, Clone, PartialEq)]
pub struct CfsgModel {
    pub partition: PartitionSpec,
    pub fine_backbone: Backbone,
    pub coarse_backbone: Option<Backbone>,
    pub gtls: Vec<Gtl>,
    pub classifiers: Vec<StructuredClassifier>,
    pub lambda_log: Option<Tensor>,
}

/// Tape handles of every model tensor, in [`CfsgModel::tensors`] order.
#[derive(Debug, Clone)]
pub struct ModelVars {
    fine_backbone: Vec<Var>,
    coarse_backbone: Option<Vec<Var>>,
    gtls: Vec<[Var; 3]>,
    classifiers: Vec<[Var; 2]>,
    lambda_log: Option<Var>,
}

impl ModelVars {
    /// Trainable handles in [`CfsgModel::trainable_mut`] order.
    pub fn trainable(&self) -> Vec<Var> {
        let mut v = self.fine_backbone.clone();
        if let Some(c) = &self.coarse_backbone {
            v.extend(c);
        }
        for g in &self.gtls {
            v.extend(g);
        }
        for c in &self.classifiers {
            v.extend(c);
        }
        v.extend(self.lambda_log);
        v
    }
}

/// Output of one forward pass, per level.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// `F_g` in position rows `[B·L, d]`.
    pub features: Vec<Var>,
    /// Spatial mean of `F_g`: `[B, d]`.
    pub pooled: Vec<Var>,
    pub logits: Vec<Var>,
    /// Train-mode batch mean and biased variance of each GTL.
    pub bn_stats: Vec<Option<BatchStats>>,
    pub batch: usize,
    pub spatial_len: usize,
}

impl CfsgModel {
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        if cfg.class_counts.is_empty() {
            return invalid("model needs at least one level");
        }
        if cfg.input_dim == 0 || cfg.hidden == 0 || cfg.raw_channels == 0 || cfg.spatial_len == 0 {
            return invalid(format!("model dimensions must be positive: {cfg:?}"));
        }
        let fine_backbone = Backbone::random(cfg.input_dim, cfg.hidden, cfg.raw_channels, cfg.spatial_len, rng);
        let coarse_backbone = (cfg.dual_backbone && cfg.class_counts.len() > 1)
            .then(|| Backbone::random(cfg.input_dim, cfg.hidden, cfg.raw_channels, cfg.spatial_len, rng));
        let d = cfg.partition.total();
        let gtls = cfg.class_counts.iter().map(|_| Gtl::random(cfg.raw_channels, d, rng)).collect();
        let classifiers = cfg
            .class_counts
            .iter()
            .map(|&k| StructuredClassifier::random(k, cfg.partition, rng))
            .collect();
        Ok(Self {
            partition: cfg.partition,
            fine_backbone,
            coarse_backbone,
            gtls,
            classifiers,
            lambda_log: cfg.learnable_lambda.then(|| Tensor::zeros(&[3])),
        })
    }

    pub fn levels(&self) -> usize {
        self.gtls.len()
    }

    pub fn spatial_len(&self) -> usize {
        self.fine_backbone.spatial_len
    }

    pub fn input_dim(&self) -> usize {
        self.fine_backbone.input_dim()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        self.classifiers.iter().map(|c| c.classes()).collect()
    }

    /// Inference weights used during training: ones, or the learned values.
    pub fn training_lambda(&self) -> Lambda {
        match &self.lambda_log {
            Some(t) => Lambda::new(t.data()[0].exp(), t.data()[1].exp(), t.data()[2].exp()),
            None => Lambda::ONES,
        }
    }

    /// Checks that all components chain together.
    pub fn validate(&self) -> Result<()> {
        self.fine_backbone.validate()?;
        let raw = self.fine_backbone.raw_channels();
        if let Some(c) = &self.coarse_backbone {
            c.validate()?;
            if c.raw_channels() != raw || c.spatial_len != self.spatial_len() || c.input_dim() != self.input_dim() {
                return dim_err("coarse extractor shape differs from the fine extractor");
            }
        }
        if self.gtls.is_empty() || self.gtls.len() != self.classifiers.len() {
            return dim_err(format!("{} GTLs for {} classifiers", self.gtls.len(), self.classifiers.len()));
        }
        let d = self.partition.total();
        for (g, gtl) in self.gtls.iter().enumerate() {
            let shapes_ok = gtl.weight.shape() == [raw, d]
                && [&gtl.gamma, &gtl.beta, &gtl.running_mean, &gtl.running_var]
                    .iter()
                    .all(|t| t.shape() == [d]);
            if !shapes_ok {
                return dim_err(format!("GTL {g} does not map {raw} to {d} channels"));
            }
        }
        for (g, c) in self.classifiers.iter().enumerate() {
            if c.partition != self.partition {
                return dim_err(format!("classifier {g} partition differs from the model's"));
            }
        }
        if let Some(t) = &self.lambda_log {
            if t.shape() != [3] {
                return dim_err("learnable inference weights must have shape [3]");
            }
        }
        Ok(())
    }

    /// Every tensor with its name and whether it is trained by gradient.
    pub fn tensors(&self) -> Vec<(String, &Tensor, bool)> {
        fn backbone<'a>(name: &str, b: &'a Backbone, out: &mut Vec<(String, &'a Tensor, bool)>) {
            for (i, l) in b.layers.iter().enumerate() {
                out.push((format!("backbone.{name}.{i}.weight"), &l.weight, true));
                out.push((format!("backbone.{name}.{i}.bias"), &l.bias, true));
            }
        }
        let mut out = Vec::new();
        backbone("fine", &self.fine_backbone, &mut out);
        if let Some(c) = &self.coarse_backbone {
            backbone("coarse", c, &mut out);
        }
        for (g, t) in self.gtls.iter().enumerate() {
            out.push((format!("gtl.{g}.weight"), &t.weight, true));
            out.push((format!("gtl.{g}.gamma"), &t.gamma, true));
            out.push((format!("gtl.{g}.beta"), &t.beta, true));
            out.push((format!("gtl.{g}.running_mean"), &t.running_mean, false));
            out.push((format!("gtl.{g}.running_var"), &t.running_var, false));
        }
        for (g, c) in self.classifiers.iter().enumerate() {
            out.push((format!("classifier.{g}.weight"), &c.weight, true));
            out.push((format!("classifier.{g}.bias"), &c.bias, true));
        }
        if let Some(t) = &self.lambda_log {
            out.push(("lambda.log".to_string(), t, true));
        }
        out
    }

    /// Mutable trainable tensors in [`ModelVars::trainable`] order.
    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for l in &mut self.fine_backbone.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        if let Some(c) = &mut self.coarse_backbone {
            for l in &mut c.layers {
                out.push(&mut l.weight);
                out.push(&mut l.bias);
            }
        }
        for t in &mut self.gtls {
            out.push(&mut t.weight);
            out.push(&mut t.gamma);
            out.push(&mut t.beta);
        }
        for c in &mut self.classifiers {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        if let Some(t) = &mut self.lambda_log {
            out.push(t);
        }
        out
    }

    /// Registers all trainable tensors on the tape, as parameters when
    /// `trainable` and as constants otherwise.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ModelVars {
        let mut leaf = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let backbone = |b: &Backbone, leaf: &mut dyn FnMut(&Tensor) -> Var| {
            b.layers
                .iter()
                .flat_map(|l| [leaf(&l.weight), leaf(&l.bias)])
                .collect::<Vec<_>>()
        };
        let fine_backbone = backbone(&self.fine_backbone, &mut leaf);
        let coarse_backbone = self.coarse_backbone.as_ref().map(|c| backbone(c, &mut leaf));
        let gtls = self
            .gtls
            .iter()
            .map(|g| [leaf(&g.weight), leaf(&g.gamma), leaf(&g.beta)])
            .collect();
        let classifiers = self
            .classifiers
            .iter()
            .map(|c| [leaf(&c.weight), leaf(&c.bias)])
            .collect();
        let lambda_log = self.lambda_log.as_ref().map(&mut leaf);
        ModelVars {
            fine_backbone,
            coarse_backbone,
            gtls,
            classifiers,
            lambda_log,
        }
    }

    /// Records the forward pass of `x: [B, input_dim]` for every level.
    pub fn forward(&self, tape: &mut Tape, vars: &ModelVars, x: Var, mode: Mode) -> Result<ForwardPass> {
        let xt = tape.value(x);
        if xt.shape().len() != 2 || xt.cols() != self.input_dim() {
            return dim_err(format!("input {:?} against model input width {}", xt.shape(), self.input_dim()));
        }
        let batch = xt.rows();
        if batch == 0 {
            return dim_err("empty batch");
        }
        let l = self.spatial_len();
        let fine_raw = self.fine_backbone.forward_tape(tape, &vars.fine_backbone, x)?;
        let coarse_raw = match (&self.coarse_backbone, &vars.coarse_backbone) {
            (Some(b), Some(v)) => Some(b.forward_tape(tape, v, x)?),
            _ => None,
        };
        let lambda = match vars.lambda_log {
            Some(v) => {
                let t = tape.reshape(v, &[1, 3])?;
                let e = tape.exp(t);
                Some([tape.slice_cols(e, 0, 1)?, tape.slice_cols(e, 1, 2)?, tape.slice_cols(e, 2, 3)?])
            }
            None => None,
        };

        let mut pass = ForwardPass {
            features: Vec::new(),
            pooled: Vec::new(),
            logits: Vec::new(),
            bn_stats: Vec::new(),
            batch,
            spatial_len: l,
        };
        for g in 0..self.levels() {
            let raw = match coarse_raw {
                Some(c) if g > 0 => c,
                _ => fine_raw,
            };
            let (f, stats) = self.gtls[g].forward_tape(tape, vars.gtls[g], raw, mode)?;
            let pooled = tape.mean_row_groups(f, l)?;
            let [w, b] = vars.classifiers[g];
            let scores = match lambda {
                None => tape.matmul_bt(pooled, w)?,
                Some(lam) => {
                    let mut acc = None;
                    for (i, part) in super::Part::ALL.iter().enumerate() {
                        let r = self.partition.range(*part);
                        let fp = tape.slice_cols(pooled, r.start, r.end)?;
                        let wp = tape.slice_cols(w, r.start, r.end)?;
                        let s = tape.matmul_bt(fp, wp)?;
                        let s = tape.scale_by(s, lam[i])?;
                        acc = Some(match acc {
                            None => s,
                            Some(a) => tape.add(a, s)?,
                        });
                    }
                    acc.expect("three parts")
                }
            };
            let logits = tape.add_row(scores, b)?;
            pass.features.push(f);
            pass.pooled.push(pooled);
            pass.logits.push(logits);
            pass.bn_stats.push(stats);
        }
        Ok(pass)
    }

    /// Eval-mode pooled features `[B, d]` and features `[B, d, L]` at every level.
    pub fn infer(&self, x: &Tensor) -> Result<Vec<(Tensor, Tensor)>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let pass = self.forward(&mut tape, &vars, xv, Mode::Eval)?;
        (0..self.levels())
            .map(|g| {
                let pooled = tape.value(pass.pooled[g]).clone();
                pooled.ensure_finite("pooled features")?;
                let f = super::from_position_rows(tape.value(pass.features[g]), pass.spatial_len)?;
                Ok((pooled, f))
            })
            .collect()
    }

    /// Folds a train-mode pass's batch statistics into the GTL running estimates.
    pub fn update_running_stats(&mut self, pass: &ForwardPass) {
        let rows = pass.batch * pass.spatial_len;
        for (gtl, stats) in self.gtls.iter_mut().zip(&pass.bn_stats) {
            if let Some((mean, var)) = stats {
                gtl.update_running(mean, var, rows);
            }
        }
    }
}
