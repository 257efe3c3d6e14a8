//! Mini-batch training, evaluation and inference-weight sweeps.

mod checkpoint;
mod config;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_SCHEMA};
pub use config::{TrainConfig, CONFIG_SCHEMA};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{predict, Lambda};
use crate::error::{invalid, Error, Result};
use crate::hierarchy::Dataset;
use crate::losses::{record_losses, LossComponents};
use crate::model::{CfsgModel, Mode, ModelConfig, Part, PooledFeatures};
use crate::numkernel::{Tape, Tensor};
use crate::subcentroid::{prototypes_from_pooled, subcentroid_predict, SubCentroidBank};

/// Seed offsets of the training random streams.
const INIT_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;

/// Mean objective terms over one epoch's batches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub components: LossComponents,
    pub total: f64,
    pub fine_train_acc: f64,
}

pub const HISTORY_HEADER: &str = "epoch,L_c,L_f,L_lf,L_dec,S_cs,S_cd,S_p,total,fine_train_acc";

/// Renders the history as CSV with [`HISTORY_HEADER`].
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for r in history {
        let c = &r.components;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.epoch, c.l_c, c.l_f, c.l_lf, c.l_dec, c.s_cs, c.s_cd, c.s_p, r.total, r.fine_train_acc
        ));
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
}

fn model_config(cfg: &TrainConfig, data: &Dataset) -> Result<ModelConfig> {
    Ok(ModelConfig {
        input_dim: data.input_dim(),
        hidden: cfg.hidden,
        raw_channels: cfg.raw_channels,
        spatial_len: cfg.spatial_len,
        partition: cfg.partition()?,
        class_counts: data.hierarchy.class_counts().to_vec(),
        dual_backbone: cfg.dual_backbone,
        learnable_lambda: cfg.learnable_lambda,
    })
}

/// Runs SGD with momentum on the weighted objective. Samples are shuffled
/// once from the seed and visited in that order every epoch.
pub fn train(cfg: &TrainConfig, data: &Dataset) -> Result<TrainOutcome> {
    cfg.validate()?;
    data.validate()?;
    if data.is_empty() {
        return invalid("training set is empty");
    }
    let h = &data.hierarchy;
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(INIT_STREAM));
    let mut model = CfsgModel::init(&model_config(cfg, data)?, &mut init_rng)?;
    let partition = model.partition;
    let mut bank = if cfg.subcentroid_bank {
        Some(SubCentroidBank::new(h.class_counts(), cfg.centroid_momentum)?)
    } else {
        None
    };
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(SHUFFLE_STREAM)));

    let mut velocity: Vec<Tensor> = model.trainable_mut().iter().map(|t| Tensor::zeros(t.shape())).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step: u64 = 0;
    let snapshot = |model: &CfsgModel, bank: &Option<SubCentroidBank>, step| Checkpoint {
        model: model.clone(),
        hierarchy: h.clone(),
        bank: bank.clone(),
        step,
        seed: cfg.seed,
    };

    for epoch in 1..=cfg.epochs {
        let mut sums = [0.0f64; 8];
        let mut correct = 0usize;
        let batches = order.chunks(cfg.batch_size);
        let n_batches = batches.len();
        for idx in batches {
            let x = data.batch_inputs(idx);
            let labels = data.batch_labels(idx);
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape, true);
            let xv = tape.constant(x);
            let pass = model.forward(&mut tape, &vars, xv, Mode::Train)?;
            let losses = record_losses(&mut tape, &pass, &labels, h, &partition, &cfg.coefficients, cfg.toggles())?;
            let c = losses.components(&tape);
            let total = tape.scalar(losses.total);
            let grads = tape.backward(losses.total);
            let params = vars.trainable();
            let finite = total.is_finite() && params.iter().all(|v| grads.get(*v).is_finite());
            if !finite {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    detail: format!("objective {total}"),
                    last_finite: Box::new(snapshot(&model, &bank, step)),
                });
            }

            let fine_logits = tape.value(pass.logits[0]);
            for (r, &y) in labels[0].iter().enumerate() {
                if predict(fine_logits.row(r))? == y {
                    correct += 1;
                }
            }
            for (s, v) in sums.iter_mut().zip([c.l_c, c.l_f, c.l_lf, c.l_dec, c.s_cs, c.s_cd, c.s_p, total]) {
                *s += v;
            }
            if let Some(bank) = &mut bank {
                for (g, (&pooled, labels_g)) in pass.pooled.iter().zip(&labels).enumerate() {
                    let protos = prototypes_from_pooled(tape.value(pooled), labels_g, &partition)?;
                    bank.update(g, &protos)?;
                }
            }

            let before = model.clone();
            for ((t, v), var) in model.trainable_mut().into_iter().zip(&mut velocity).zip(&params) {
                let g = grads.get(*var);
                for ((p, vel), gi) in t.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                    *vel = cfg.momentum * *vel + gi;
                    *p -= cfg.learning_rate * *vel;
                }
            }
            model.update_running_stats(&pass);
            if let Some((name, _, _)) = model.tensors().into_iter().find(|(_, t, _)| !t.is_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    detail: format!("{name} became non-finite after the update"),
                    last_finite: Box::new(snapshot(&before, &bank, step)),
                });
            }
            step += 1;
        }
        let m = |i: usize| sums[i] / n_batches as f64;
        let record = EpochRecord {
            epoch,
            components: LossComponents {
                l_c: m(0),
                l_f: m(1),
                l_lf: m(2),
                l_dec: m(3),
                s_cs: m(4),
                s_cd: m(5),
                s_p: m(6),
            },
            total: m(7),
            fine_train_acc: correct as f64 / data.len() as f64,
        };
        log::debug!("epoch {epoch}: total {:.6}, train acc {:.4}", record.total, record.fine_train_acc);
        history.push(record);
    }
    Ok(TrainOutcome {
        checkpoint: snapshot(&model, &bank, step),
        history,
    })
}

/// How fine predictions are made.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Inference {
    /// λ-weighted linear scores.
    Linear,
    /// λ-weighted nearest sub-centroid.
    SubCentroid,
}

/// Accuracy at every level under one inference setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fine_acc: f64,
    pub per_level_acc: Vec<f64>,
    pub lam_used: Lambda,
}

/// Eval-mode per-block inner products `⟨f^part, W_k^part⟩` at every level,
/// so that logits for many λ reuse one forward pass.
#[derive(Debug, Clone)]
pub struct BlockScores {
    /// `levels[g][part]`: `[B, K_g]`.
    levels: Vec<[Tensor; 3]>,
    biases: Vec<Vec<f64>>,
    pooled: Vec<Tensor>,
    labels: Vec<Vec<usize>>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_compatible(ckpt: &Checkpoint, data: &Dataset) -> Result<()> {
    if ckpt.hierarchy.class_counts() != data.hierarchy.class_counts() {
        return invalid(format!(
            "checkpoint class counts {:?} disagree with dataset {:?}",
            ckpt.hierarchy.class_counts(),
            data.hierarchy.class_counts()
        ));
    }
    if data.input_dim() != ckpt.model.input_dim() && !data.is_empty() {
        return invalid(format!(
            "dataset input width {} against model input {}",
            data.input_dim(),
            ckpt.model.input_dim()
        ));
    }
    Ok(())
}

const EVAL_CHUNK: usize = 256;

impl BlockScores {
    /// Runs the eval-mode forward pass over `data` using up to `threads`
    /// workers; results do not depend on the thread count.
    pub fn compute(ckpt: &Checkpoint, data: &Dataset, threads: usize) -> Result<Self> {
        check_compatible(ckpt, data)?;
        if data.is_empty() {
            return invalid("evaluation set is empty");
        }
        let idx: Vec<usize> = (0..data.len()).collect();
        let chunks: Vec<&[usize]> = idx.chunks(EVAL_CHUNK).collect();
        let model = &ckpt.model;
        let run = |c: &[usize]| model.infer(&data.batch_inputs(c));
        let threads = threads.max(1).min(chunks.len());
        let outputs: Vec<Vec<(Tensor, Tensor)>> = if threads == 1 {
            chunks.iter().map(|c| run(c)).collect::<Result<_>>()?
        } else {
            let per = chunks.len().div_ceil(threads);
            std::thread::scope(|s| {
                let handles: Vec<_> = chunks
                    .chunks(per)
                    .map(|group| s.spawn(move || group.iter().map(|c| run(c)).collect::<Result<Vec<_>>>()))
                    .collect();
                let mut all = Vec::new();
                for hnd in handles {
                    all.extend(hnd.join().expect("evaluation worker panicked")?);
                }
                Ok::<_, Error>(all)
            })?
        };
        let levels = model.levels();
        let p = model.partition;
        let mut pooled = Vec::with_capacity(levels);
        let mut scores = Vec::with_capacity(levels);
        for g in 0..levels {
            let rows: Vec<f64> = outputs.iter().flat_map(|o| o[g].0.data().iter().copied()).collect();
            let pg = Tensor::matrix(data.len(), p.total(), rows)?;
            let cls = &model.classifiers[g];
            let k = cls.classes();
            let block = |part: Part| -> Result<Tensor> {
                let r = p.range(part);
                let mut out = Vec::with_capacity(data.len() * k);
                for b in 0..data.len() {
                    let f = &pg.row(b)[r.clone()];
                    out.extend((0..k).map(|c| dot(f, &cls.weight.row(c)[r.clone()])));
                }
                Tensor::matrix(data.len(), k, out)
            };
            scores.push([block(Part::Common)?, block(Part::Specific)?, block(Part::Confounding)?]);
            pooled.push(pg);
        }
        Ok(Self {
            levels: scores,
            biases: model.classifiers.iter().map(|c| c.bias.data().to_vec()).collect(),
            pooled,
            labels: data.batch_labels(&idx),
        })
    }

    /// Eval-mode pooled features `[N, d]` at a level.
    pub fn pooled(&self, level: usize) -> &Tensor {
        &self.pooled[level]
    }

    /// Structured logits of sample `b` at `level`, with the same operation
    /// order as [`crate::classifier::structured_logits`].
    pub fn logits(&self, level: usize, b: usize, lam: Lambda) -> Vec<f64> {
        let [c, s, n] = &self.levels[level];
        self.biases[level]
            .iter()
            .enumerate()
            .map(|(k, bias)| {
                let mut h = 0.0;
                h += lam.c * c.at2(b, k);
                h += lam.p * s.at2(b, k);
                h += lam.n * n.at2(b, k);
                h + bias
            })
            .collect()
    }

    pub fn accuracy(&self, level: usize, lam: Lambda) -> Result<f64> {
        let labels = &self.labels[level];
        let mut correct = 0;
        for (b, &y) in labels.iter().enumerate() {
            if predict(&self.logits(level, b, lam))? == y {
                correct += 1;
            }
        }
        Ok(correct as f64 / labels.len() as f64)
    }

    fn subcentroid_accuracy(&self, level: usize, bank: &SubCentroidBank, lam: Lambda, p: &crate::model::PartitionSpec) -> Result<f64> {
        let labels = &self.labels[level];
        let mut correct = 0;
        for (b, &y) in labels.iter().enumerate() {
            let f = PooledFeatures::from_vector(self.pooled[level].row(b), p)?;
            if subcentroid_predict(&f, bank, level, lam)? == y {
                correct += 1;
            }
        }
        Ok(correct as f64 / labels.len() as f64)
    }

    /// Per-level report; λ is used as given.
    pub fn report(&self, ckpt: &Checkpoint, lam: Lambda, inference: Inference) -> Result<EvalReport> {
        lam.validate()?;
        let per_level_acc = (0..self.levels.len())
            .map(|g| match inference {
                Inference::Linear => self.accuracy(g, lam),
                Inference::SubCentroid => {
                    let bank = ckpt
                        .bank
                        .as_ref()
                        .ok_or_else(|| Error::State("checkpoint has no sub-centroid bank".into()))?;
                    self.subcentroid_accuracy(g, bank, lam, &ckpt.model.partition)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EvalReport {
            fine_acc: per_level_acc[0],
            per_level_acc,
            lam_used: lam,
        })
    }
}

/// Accuracy of `ckpt` on `data` at every level under inference weights `lam`
/// (used as given; normalize beforehand if required).
pub fn evaluate(ckpt: &Checkpoint, data: &Dataset, lam: Lambda, inference: Inference) -> Result<EvalReport> {
    evaluate_parallel(ckpt, data, lam, inference, 1)
}

pub fn evaluate_parallel(
    ckpt: &Checkpoint,
    data: &Dataset,
    lam: Lambda,
    inference: Inference,
    threads: usize,
) -> Result<EvalReport> {
    BlockScores::compute(ckpt, data, threads)?.report(ckpt, lam, inference)
}

/// Points `(a, b, c)/n` of the simplex grid with spacing `step = 1/n`,
/// ordered by decreasing λ_c, then decreasing λ_p.
pub fn simplex_grid(step: f64) -> Result<Vec<Lambda>> {
    if !(step.is_finite() && step > 0.0 && step <= 1.0) {
        return invalid(format!("grid step must lie in (0, 1], got {step}"));
    }
    let n = (1.0 / step).round();
    if (n * step - 1.0).abs() > 1e-9 {
        return invalid(format!("grid step {step} does not divide 1"));
    }
    let n = n as usize;
    let mut out = Vec::with_capacity((n + 1) * (n + 2) / 2);
    for a in (0..=n).rev() {
        for b in (0..=n - a).rev() {
            let c = n - a - b;
            out.push(Lambda::new(a as f64 / n as f64, b as f64 / n as f64, c as f64 / n as f64));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lam: Lambda,
    pub fine_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    /// Index of the most accurate row; the earliest wins ties.
    pub best: usize,
}

impl SweepResult {
    pub fn best_row(&self) -> &SweepRow {
        &self.rows[self.best]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("lam_c,lam_p,lam_n,fine_acc\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.lam.c, r.lam.p, r.lam.n, r.fine_acc));
        }
        out
    }
}

/// Fine accuracy at every simplex grid point.
pub fn weight_sweep(ckpt: &Checkpoint, data: &Dataset, step: f64) -> Result<SweepResult> {
    let grid = simplex_grid(step)?;
    sweep_scores(&BlockScores::compute(ckpt, data, 1)?, &grid)
}

/// Fine accuracy at the given points using precomputed scores.
pub fn sweep_scores(scores: &BlockScores, grid: &[Lambda]) -> Result<SweepResult> {
    let rows = grid
        .iter()
        .map(|&lam| Ok(SweepRow { lam, fine_acc: scores.accuracy(0, lam)? }))
        .collect::<Result<Vec<_>>>()?;
    let mut best = 0;
    for (i, r) in rows.iter().enumerate() {
        if r.fine_acc > rows[best].fine_acc {
            best = i;
        }
    }
    Ok(SweepResult { rows, best })
}
