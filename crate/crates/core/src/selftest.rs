//! Gradient checks for every objective term and cross-checks of the
//! closed-form pieces against naive reimplementations.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::classifier::{affine_logits, predict, structured_logits, structured_logits_batch, Lambda, StructuredClassifier};
use crate::error::{Error, Result};
use crate::explain::nc_diagnostics;
use crate::hierarchy::{build_hierarchy, HierarchySpec};
use crate::losses::{record_losses, LossCoefficients, Toggles};
use crate::model::{normal_tensor, CfsgModel, Mode, ModelConfig, PartitionSpec, PooledFeatures};
use crate::numkernel::{spearman_rho, Tape, Tensor};
use crate::subcentroid::{subcentroid_predict, SubCentroidBank};
use crate::train::simplex_grid;

/// Objective terms covered by the gradient checks, in recording order.
pub const LOSS_TERMS: [&str; 8] = ["L_c", "L_f", "L_lf", "L_dec", "S_cs", "S_cd", "S_p", "total"];

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Largest accepted norm-wise relative gradient error.
pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelftestReport {
    pub checks: Vec<CheckOutcome>,
    pub seconds: f64,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelftestOptions {
    /// Random parameter draws per gradient check.
    pub draws: usize,
    pub seed: u64,
    /// Loss term whose analytic gradient is deliberately corrupted.
    pub fault: Option<String>,
}

impl Default for SelftestOptions {
    fn default() -> Self {
        Self {
            draws: 100,
            seed: 0,
            fault: None,
        }
    }
}

/// Runs the gradient checks followed by the oracle equivalences.
pub fn run_selftest(opts: &SelftestOptions) -> Result<SelftestReport> {
    let start = Instant::now();
    let mut checks = gradient_checks(opts.draws, opts.seed, opts.fault.as_deref())?;
    checks.push(decomposition_check(opts.seed)?);
    checks.push(spearman_check(opts.seed)?);
    checks.push(simplex_check()?);
    checks.push(similarity_check()?);
    checks.push(collapse_check()?);
    Ok(SelftestReport {
        checks,
        seconds: start.elapsed().as_secs_f64(),
    })
}

struct GradProblem {
    model: CfsgModel,
    x: Tensor,
    labels: Vec<Vec<usize>>,
    h: HierarchySpec,
    coefficients: LossCoefficients,
}

fn grad_hierarchy() -> HierarchySpec {
    build_hierarchy(vec![6, 3, 2], vec![vec![0, 0, 1, 1, 2, 2], vec![0, 0, 1]]).expect("static hierarchy")
}

impl GradProblem {
    /// Small random model with every parameter (including biases, BN
    /// affine terms and learnable weights) moved off its initial value.
    fn draw(index: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(index as u64));
        let h = grad_hierarchy();
        let cfg = ModelConfig {
            input_dim: 5,
            hidden: 8,
            raw_channels: 6,
            spatial_len: 2,
            partition: PartitionSpec::new(5, 3, 2)?,
            class_counts: h.class_counts().to_vec(),
            dual_backbone: index.is_multiple_of(2),
            learnable_lambda: index % 4 < 2,
        };
        let mut model = CfsgModel::init(&cfg, &mut rng)?;
        for t in model.trainable_mut() {
            let noise = normal_tensor(&mut rng, t.shape(), 0.2);
            t.axpy(1.0, &noise);
        }
        let per_class = 2;
        let fine: Vec<usize> = (0..h.fine_classes() * per_class).map(|i| i / per_class).collect();
        let labels = (0..h.levels())
            .map(|g| fine.iter().map(|&k| h.label_vector(k).map(|v| v[g])).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        let x = normal_tensor(&mut rng, &[fine.len(), cfg.input_dim], 1.0);
        let coefficients = LossCoefficients {
            eps_fuse: rng.random_range(0.2..0.9),
            lambda_cs: rng.random_range(0.2..2.0),
            lambda_cd: rng.random_range(0.2..2.0),
            lambda_sp: rng.random_range(0.2..2.0),
        };
        Ok(Self {
            model,
            x,
            labels,
            h,
            coefficients,
        })
    }

    /// Term values and the kink pattern of the evaluation.
    fn values(&self) -> Result<([f64; 8], Vec<bool>)> {
        let mut tape = Tape::new();
        let vars = self.model.bind(&mut tape, false);
        let x = tape.constant(self.x.clone());
        let pass = self.model.forward(&mut tape, &vars, x, Mode::Train)?;
        let lv = record_losses(
            &mut tape,
            &pass,
            &self.labels,
            &self.h,
            &self.model.partition,
            &self.coefficients,
            Toggles::default(),
        )?;
        Ok((lv.named().map(|(_, v)| tape.scalar(v)), tape.kink_pattern()))
    }

    /// Flattened analytic gradient of every term.
    fn analytic(&self, fault: Option<usize>) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let vars = self.model.bind(&mut tape, true);
        let x = tape.constant(self.x.clone());
        let pass = self.model.forward(&mut tape, &vars, x, Mode::Train)?;
        let lv = record_losses(
            &mut tape,
            &pass,
            &self.labels,
            &self.h,
            &self.model.partition,
            &self.coefficients,
            Toggles::default(),
        )?;
        let params = vars.trainable();
        Ok(lv
            .named()
            .iter()
            .enumerate()
            .map(|(i, (_, v))| {
                let mut grads = tape.backward(*v);
                if fault == Some(i) {
                    grads.perturb(params[0], 1e-3);
                }
                params.iter().flat_map(|p| grads.get(*p).into_data()).collect()
            })
            .collect())
    }

    /// Central differences of every term, one parameter coordinate at a
    /// time, and the number of probes whose stencil crosses a kink.
    fn numeric(&mut self) -> Result<(Vec<Vec<f64>>, usize)> {
        let shapes: Vec<usize> = self.model.trainable_mut().iter().map(|t| t.len()).collect();
        let mut out = vec![Vec::with_capacity(shapes.iter().sum()); LOSS_TERMS.len()];
        let (_, base) = self.values()?;
        let mut crossings = 0;
        for (ti, &n) in shapes.iter().enumerate() {
            for i in 0..n {
                let orig = self.model.trainable_mut()[ti].data()[i];
                self.model.trainable_mut()[ti].data_mut()[i] = orig + FD_STEP;
                let (up, up_kinks) = self.values()?;
                self.model.trainable_mut()[ti].data_mut()[i] = orig - FD_STEP;
                let (down, down_kinks) = self.values()?;
                self.model.trainable_mut()[ti].data_mut()[i] = orig;
                if up_kinks != base || down_kinks != base {
                    crossings += 1;
                }
                for (t, col) in out.iter_mut().enumerate() {
                    if !up[t].is_finite() || !down[t].is_finite() {
                        return Err(Error::Numeric(format!("{} not finite under perturbation", LOSS_TERMS[t])));
                    }
                    col.push((up[t] - down[t]) / (2.0 * FD_STEP));
                }
            }
        }
        Ok((out, crossings))
    }
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, falling back to the absolute error when both
/// gradients vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale < 1e-10 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

/// One outcome per loss term: the worst relative error between the tape
/// gradient and central differences over `draws` random models. A draw
/// where some ReLU or log clamp changes side inside the stencil has no
/// derivative to compare against and is replaced by the next one.
pub fn gradient_checks(draws: usize, seed: u64, fault: Option<&str>) -> Result<Vec<CheckOutcome>> {
    let fault_idx = match fault {
        None => None,
        Some(name) => Some(LOSS_TERMS.iter().position(|t| *t == name).ok_or_else(|| {
            Error::Validation(format!("unknown loss term {name:?}; expected one of {}", LOSS_TERMS.join(", ")))
        })?),
    };
    if draws == 0 {
        return Err(Error::Validation("gradient checks need at least one draw".into()));
    }
    let mut worst = [0.0f64; 8];
    let (mut accepted, mut rejected, mut index) = (0, 0, 0);
    while accepted < draws {
        if index >= 3 * draws + 10 {
            return Err(Error::Numeric(format!(
                "only {accepted} of {draws} draws avoided a kink within the difference stencil"
            )));
        }
        let mut problem = GradProblem::draw(index, seed)?;
        index += 1;
        let (numeric, crossings) = problem.numeric()?;
        if crossings > 0 {
            rejected += 1;
            continue;
        }
        let analytic = problem.analytic(fault_idx)?;
        for t in 0..LOSS_TERMS.len() {
            worst[t] = worst[t].max(relative_error(&analytic[t], &numeric[t]));
        }
        accepted += 1;
    }
    Ok(LOSS_TERMS
        .iter()
        .zip(worst)
        .map(|(name, err)| CheckOutcome {
            name: format!("grad {name}"),
            passed: err < GRAD_TOLERANCE,
            detail: format!("max relative error {err:.3e} over {draws} draws ({rejected} kinked draws replaced)"),
        })
        .collect())
}

fn outcome(name: &str, passed: bool, detail: String) -> CheckOutcome {
    CheckOutcome {
        name: name.into(),
        passed,
        detail,
    }
}

/// Unit weights reproduce the unpartitioned affine classifier.
fn decomposition_check(seed: u64) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let p = PartitionSpec::new(5, 3, 2)?;
    let mut cls = StructuredClassifier::random(7, p, &mut rng);
    cls.bias = normal_tensor(&mut rng, &[7], 1.0);
    let x = normal_tensor(&mut rng, &[1000, p.total()], 3.0);
    let structured = structured_logits_batch(&x, &cls, Lambda::ONES)?;
    let mut worst = 0.0f64;
    for r in 0..x.rows() {
        let affine = affine_logits(x.row(r), &cls)?;
        for (a, s) in affine.iter().zip(structured.row(r)) {
            worst = worst.max((a - s).abs());
        }
    }
    Ok(outcome(
        "structured logits at unit weights",
        worst <= 1e-12,
        format!("max deviation {worst:.3e} over 1000 inputs"),
    ))
}

/// Average ranks by counting, quadratic in the input length.
fn naive_ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|v| {
            let below = x.iter().filter(|u| *u < v).count() as f64;
            let equal = x.iter().filter(|u| *u == v).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect()
}

fn naive_pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// Spearman correlation with ties against the naive rank transform.
fn spearman_check(seed: u64) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let x: Vec<f64> = (0..50).map(|_| rng.random_range(0..12) as f64).collect();
        let y: Vec<f64> = (0..50).map(|_| rng.random_range(0..12) as f64).collect();
        let want = naive_pearson(&naive_ranks(&x), &naive_ranks(&y));
        worst = worst.max((spearman_rho(&x, &y)? - want).abs());
    }
    Ok(outcome(
        "spearman with ties",
        worst <= 1e-12,
        format!("max deviation {worst:.3e} over 100 inputs"),
    ))
}

fn simplex_check() -> Result<CheckOutcome> {
    let fine = simplex_grid(0.05)?.len();
    let coarse = simplex_grid(0.5)?.len();
    Ok(outcome(
        "simplex grid size",
        fine == 231 && coarse == 6,
        format!("{fine} points at 0.05, {coarse} at 0.5"),
    ))
}

/// Class similarity against a direct label-vector comparison.
fn similarity_check() -> Result<CheckOutcome> {
    let h = HierarchySpec::benchmark();
    let mut mismatches = 0;
    for i in 0..h.fine_classes() {
        for j in 0..h.fine_classes() {
            let (a, b) = (h.label_vector(i)?, h.label_vector(j)?);
            let same = (0..a.len()).filter(|&g| a[g] == b[g]).count();
            if h.class_similarity(i, j)? != same {
                mismatches += 1;
            }
        }
    }
    Ok(outcome(
        "class similarity",
        mismatches == 0,
        format!("{mismatches} mismatching pairs"),
    ))
}

/// Features sitting exactly on their class means, with equal-norm means and
/// classifier rows proportional to them.
#[derive(Debug, Clone)]
pub struct CollapsedFixture {
    pub partition: PartitionSpec,
    pub classifier: StructuredClassifier,
    pub bank: SubCentroidBank,
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

/// `classes` equiangular means per block, `per_class` samples each.
pub fn collapsed_fixture(classes: usize, per_class: usize) -> Result<CollapsedFixture> {
    let partition = PartitionSpec::new(4, 3, 2)?;
    let mean = |k: usize| {
        let mut v = Vec::with_capacity(partition.total());
        for (offset, len) in [(0.0, 4), (0.5, 3), (1.0, 2)] {
            let angle = std::f64::consts::TAU * k as f64 / classes as f64 + offset;
            let mut block = vec![0.0; len];
            block[0] = angle.cos();
            block[1] = angle.sin();
            v.extend(block);
        }
        v
    };
    let means: Vec<Vec<f64>> = (0..classes).map(mean).collect();
    let weight = Tensor::from_rows(&means.iter().map(|m| m.iter().map(|v| 2.0 * v).collect()).collect::<Vec<_>>())?;
    let classifier = StructuredClassifier::new(weight, Tensor::zeros(&[classes]), partition)?;
    let mut bank = SubCentroidBank::new(&[classes], 0.9)?;
    for (k, m) in means.iter().enumerate() {
        bank.levels[0][k] = Some(PooledFeatures::from_vector(m, &partition)?);
    }
    let labels: Vec<usize> = (0..classes * per_class).map(|i| i % classes).collect();
    let features = labels.iter().map(|&k| means[k].clone()).collect();
    Ok(CollapsedFixture {
        partition,
        classifier,
        bank,
        features,
        labels,
    })
}

/// Nearest-centroid and linear decisions agree under collapse.
fn collapse_check() -> Result<CheckOutcome> {
    let fx = collapsed_fixture(5, 8)?;
    let lam = Lambda::new(0.75, 0.2, 0.05);
    let mut disagree = 0;
    for f in &fx.features {
        let pf = PooledFeatures::from_vector(f, &fx.partition)?;
        let linear = predict(&structured_logits(&pf, &fx.classifier, lam)?)?;
        if subcentroid_predict(&pf, &fx.bank, 0, lam)? != linear {
            disagree += 1;
        }
    }
    let nc = nc_diagnostics(&fx.features, &fx.labels, &fx.classifier.weight)?;
    let nc1_ok = nc.nc1.is_some_and(|v| v.abs() <= 1e-9);
    let nc3_ok = nc.nc3.iter().all(|c| c.is_some_and(|v| (v - 1.0).abs() <= 1e-9));
    Ok(outcome(
        "nearest-centroid equivalence under collapse",
        disagree == 0 && nc1_ok && nc3_ok,
        format!("{disagree} disagreements, nc1 {:?}", nc.nc1),
    ))
}
