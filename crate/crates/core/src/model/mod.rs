//! Feature extractor, Granularity Transition Layers and channel-block
//! disentanglement.
//!
//! Feature maps are `[B, C, L]` tensors (batch, channels, spatial positions)
//! at the public surface. On the tape they are laid out as "position rows"
//! `[B·L, C]`, row `b·L + l`, so that per-position linear maps are plain
//! matrix products and per-channel statistics are column reductions.

mod network;
mod partition;

pub use network::{CfsgModel, ForwardPass, ModelConfig, ModelVars};
pub use partition::{partition_channels, Part, PartitionSpec};
pub(crate) use partition::split_cols;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::numkernel::{Tape, Tensor, Var};

/// Batch-norm stabilizer.
pub const EPS_BN: f64 = 1e-5;
/// Weight of the newest batch in running normalization statistics.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// `[B, C, L] -> [B·L, C]`.
pub fn to_position_rows(t: &Tensor) -> Result<Tensor> {
    let [b, c, l] = three_dims(t)?;
    let mut out = vec![0.0; b * c * l];
    for bi in 0..b {
        for ci in 0..c {
            for li in 0..l {
                out[(bi * l + li) * c + ci] = t.data()[(bi * c + ci) * l + li];
            }
        }
    }
    Tensor::matrix(b * l, c, out)
}

/// Batch mean and biased variance per channel.
pub type BatchStats = (Vec<f64>, Vec<f64>);

/// `[B·L, C] -> [B, C, L]`.
pub fn from_position_rows(t: &Tensor, spatial_len: usize) -> Result<Tensor> {
    let (rows, c) = (t.rows(), t.cols());
    if spatial_len == 0 || rows % spatial_len != 0 {
        return dim_err(format!("{rows} rows are not a multiple of spatial length {spatial_len}"));
    }
    let b = rows / spatial_len;
    let mut out = vec![0.0; rows * c];
    for bi in 0..b {
        for li in 0..spatial_len {
            for ci in 0..c {
                out[(bi * c + ci) * spatial_len + li] = t.data()[(bi * spatial_len + li) * c + ci];
            }
        }
    }
    Tensor::new(vec![b, c, spatial_len], out)
}

fn three_dims(t: &Tensor) -> Result<[usize; 3]> {
    match *t.shape() {
        [b, c, l] => Ok([b, c, l]),
        _ => dim_err(format!("expected a [B, C, L] tensor, got {:?}", t.shape())),
    }
}

/// Per-sample, per-block pooled vectors (mean over spatial positions).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledFeatures {
    pub common: Vec<f64>,
    pub specific: Vec<f64>,
    pub confounding: Vec<f64>,
}

impl PooledFeatures {
    /// Splits a length-`d` pooled vector by the partition.
    pub fn from_vector(v: &[f64], p: &PartitionSpec) -> Result<Self> {
        let [c, s, n] = p.split(v)?;
        Ok(Self {
            common: c.to_vec(),
            specific: s.to_vec(),
            confounding: n.to_vec(),
        })
    }

    pub fn part(&self, part: Part) -> &[f64] {
        match part {
            Part::Common => &self.common,
            Part::Specific => &self.specific,
            Part::Confounding => &self.confounding,
        }
    }

    pub fn concat(&self) -> Vec<f64> {
        let mut v = self.common.clone();
        v.extend_from_slice(&self.specific);
        v.extend_from_slice(&self.confounding);
        v
    }
}

/// A granularity level's feature map split into its three channel blocks,
/// each `[B, d_part, L]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuredFeatures {
    pub common: Tensor,
    pub specific: Tensor,
    pub confounding: Tensor,
}

impl StructuredFeatures {
    pub fn part(&self, part: Part) -> &Tensor {
        match part {
            Part::Common => &self.common,
            Part::Specific => &self.specific,
            Part::Confounding => &self.confounding,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.common.shape()[0]
    }

    pub fn spatial_len(&self) -> usize {
        self.common.shape()[2]
    }

    /// Reassembles `[B, d, L]` by concatenating blocks along channels.
    pub fn concat(&self) -> Tensor {
        let (b, l) = (self.batch_size(), self.spatial_len());
        let widths = Part::ALL.map(|p| self.part(p).shape()[1]);
        let d: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(b * d * l);
        for bi in 0..b {
            for (p, w) in Part::ALL.iter().zip(widths) {
                let t = self.part(*p).data();
                out.extend_from_slice(&t[bi * w * l..(bi + 1) * w * l]);
            }
        }
        Tensor::new(vec![b, d, l], out).expect("consistent block shapes")
    }

    /// Flattened `(channel, position)` values of one block for sample `b`.
    pub fn sample_part(&self, part: Part, b: usize) -> &[f64] {
        let t = self.part(part);
        let n = t.shape()[1] * t.shape()[2];
        &t.data()[b * n..(b + 1) * n]
    }

    /// Spatial mean of every block for sample `b`.
    pub fn pooled(&self, b: usize) -> PooledFeatures {
        let l = self.spatial_len();
        let pool = |part: Part| -> Vec<f64> {
            self.sample_part(part, b)
                .chunks(l)
                .map(|c| c.iter().sum::<f64>() / l as f64)
                .collect()
        };
        PooledFeatures {
            common: pool(Part::Common),
            specific: pool(Part::Specific),
            confounding: pool(Part::Confounding),
        }
    }

    /// Channel mean of one block for sample `b`: a length-`L` vector.
    pub fn channel_pooled(&self, part: Part, b: usize) -> Vec<f64> {
        let t = self.part(part);
        let (w, l) = (t.shape()[1], t.shape()[2]);
        let s = self.sample_part(part, b);
        (0..l)
            .map(|li| (0..w).map(|ci| s[ci * l + li]).sum::<f64>() / w as f64)
            .collect()
    }
}

/// Slices `F_g: [B, d, L]` into its channel blocks.
pub fn disentangle_features(features: &Tensor, p: &PartitionSpec) -> Result<StructuredFeatures> {
    let [b, d, l] = three_dims(features)?;
    if d != p.total() {
        return dim_err(format!("{d} feature channels against partition of {}", p.total()));
    }
    let block = |part: Part| -> Result<Tensor> {
        let r = p.range(part);
        let w = r.len();
        let mut out = Vec::with_capacity(b * w * l);
        for bi in 0..b {
            out.extend_from_slice(&features.data()[(bi * d + r.start) * l..(bi * d + r.end) * l]);
        }
        Tensor::new(vec![b, w, l], out)
    };
    Ok(StructuredFeatures {
        common: block(Part::Common)?,
        specific: block(Part::Specific)?,
        confounding: block(Part::Confounding)?,
    })
}

pub(crate) fn normal_tensor(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("shape")
}

/// Fully connected layer `y = x·W + b` with `W: [in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Dense feature extractor: every layer is followed by rectification. The
/// final layer emits `L·C` values per sample, position-major, read as a
/// `[B, C, L]` map.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub layers: Vec<DenseLayer>,
    pub spatial_len: usize,
}

impl Backbone {
    /// Two He-initialized layers `input_dim -> hidden -> raw_channels·L`.
    pub fn random(input_dim: usize, hidden: usize, raw_channels: usize, spatial_len: usize, rng: &mut impl Rng) -> Self {
        let dims = [input_dim, hidden, raw_channels * spatial_len];
        let layers = dims
            .windows(2)
            .map(|w| DenseLayer {
                weight: normal_tensor(rng, &[w[0], w[1]], (2.0 / w[0] as f64).sqrt()),
                bias: Tensor::zeros(&[w[1]]),
            })
            .collect();
        Self { layers, spatial_len }
    }

    /// Single identity layer over `dim` inputs with `L = 1`.
    pub fn identity(dim: usize) -> Self {
        Self {
            layers: vec![DenseLayer {
                weight: Tensor::identity(dim),
                bias: Tensor::zeros(&[dim]),
            }],
            spatial_len: 1,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn raw_channels(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.cols()) / self.spatial_len
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Validation("backbone has no layers".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.weight.shape().len() != 2 || l.bias.len() != l.weight.cols() {
                return dim_err(format!("backbone layer {i}: weight {:?}, bias {:?}", l.weight.shape(), l.bias.shape()));
            }
            if i > 0 && self.layers[i - 1].weight.cols() != l.weight.rows() {
                return dim_err(format!("backbone layer {i} does not chain with layer {}", i - 1));
            }
        }
        let out = self.layers.last().map_or(0, |l| l.weight.cols());
        if self.spatial_len == 0 || !out.is_multiple_of(self.spatial_len) {
            return dim_err(format!("backbone output {out} not divisible by spatial length {}", self.spatial_len));
        }
        Ok(())
    }

    /// Output in position rows `[B·L, C]`.
    pub(crate) fn forward_tape(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let mut h = x;
        for pair in vars.chunks(2) {
            let z = tape.matmul(h, pair[0])?;
            let z = tape.add_row(z, pair[1])?;
            h = tape.relu(z);
        }
        let b = tape.value(h).rows();
        let c = self.raw_channels();
        tape.reshape(h, &[b * self.spatial_len, c])
    }
}

/// Runs the extractor on `x: [B, input_dim]`, returning `[B, C, L]`.
pub fn forward_backbone(params: &Backbone, x: &Tensor) -> Result<Tensor> {
    params.validate()?;
    if x.rows() == 0 {
        return dim_err("empty batch");
    }
    if x.cols() != params.input_dim() {
        return dim_err(format!("input width {} against backbone input {}", x.cols(), params.input_dim()));
    }
    x.ensure_finite("backbone input")?;
    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .layers
        .iter()
        .flat_map(|l| [l.weight.clone(), l.bias.clone()])
        .map(|t| tape.constant(t))
        .collect();
    let xv = tape.constant(x.clone());
    let out = params.forward_tape(&mut tape, &vars, xv)?;
    from_position_rows(tape.value(out), params.spatial_len)
}

/// Granularity Transition Layer: per-position linear map, per-channel
/// normalization, rectification.
#[derive(Debug, Clone, PartialEq)]
pub struct Gtl {
    /// `[d_raw, d]`.
    pub weight: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

impl Gtl {
    pub fn random(raw_channels: usize, channels: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: normal_tensor(rng, &[raw_channels, channels], (2.0 / raw_channels as f64).sqrt()),
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
        }
    }

    pub fn channels(&self) -> usize {
        self.weight.cols()
    }

    /// `vars = [weight, gamma, beta]`. Returns the activated output in
    /// position rows and, in train mode, the batch mean and biased variance
    /// of the pre-normalization activations.
    pub(crate) fn forward_tape(
        &self,
        tape: &mut Tape,
        vars: [Var; 3],
        x_rows: Var,
        mode: Mode,
    ) -> Result<(Var, Option<BatchStats>)> {
        let z = tape.matmul(x_rows, vars[0])?;
        let (zn, stats) = match mode {
            Mode::Train => {
                let (zn, mean, var) = tape.batch_norm(z, EPS_BN)?;
                (zn, Some((mean, var)))
            }
            Mode::Eval => {
                let neg_mean = tape.constant(self.running_mean.map(|m| -m));
                let inv_std = tape.constant(self.running_var.map(|v| 1.0 / (v + EPS_BN).sqrt()));
                let c = tape.add_row(z, neg_mean)?;
                (tape.mul_row(c, inv_std)?, None)
            }
        };
        let y = tape.mul_row(zn, vars[1])?;
        let y = tape.add_row(y, vars[2])?;
        Ok((tape.relu(y), stats))
    }

    /// Folds batch statistics into the running estimates (unbiased variance).
    pub fn update_running(&mut self, mean: &[f64], var: &[f64], batch_rows: usize) {
        let correction = if batch_rows > 1 {
            batch_rows as f64 / (batch_rows - 1) as f64
        } else {
            1.0
        };
        for (r, m) in self.running_mean.data_mut().iter_mut().zip(mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
        }
        for (r, v) in self.running_var.data_mut().iter_mut().zip(var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * correction;
        }
    }
}

/// Applies a GTL to raw features `[B, d_raw, L]`, returning `[B, d, L]`.
/// Train mode normalizes with batch statistics, eval mode with the running
/// estimates; running estimates are not modified here.
pub fn gtl_forward(params: &Gtl, features: &Tensor, mode: Mode) -> Result<Tensor> {
    let [_, c, l] = three_dims(features)?;
    if c != params.weight.rows() {
        return dim_err(format!("{c} raw channels against GTL input {}", params.weight.rows()));
    }
    features.ensure_finite("GTL input")?;
    let mut tape = Tape::new();
    let rows = tape.constant(to_position_rows(features)?);
    let vars = [
        tape.constant(params.weight.clone()),
        tape.constant(params.gamma.clone()),
        tape.constant(params.beta.clone()),
    ];
    let (out, _) = params.forward_tape(&mut tape, vars, rows, mode)?;
    let out = tape.value(out);
    out.ensure_finite("GTL output")?;
    from_position_rows(out, l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn position_row_round_trip() {
        let t = Tensor::new(vec![2, 3, 4], (0..24).map(f64::from).collect()).unwrap();
        let rows = to_position_rows(&t).unwrap();
        assert_eq!(rows.shape(), &[8, 3]);
        // sample 0, position 1, channel 2 sits at (2*4 + 1)
        assert_eq!(rows.at2(1, 2), 9.0);
        assert_eq!(from_position_rows(&rows, 4).unwrap(), t);
    }

    #[test]
    fn disentangle_slices_channels() {
        let p = PartitionSpec::new(5, 3, 2).unwrap();
        // F_g = [0..9] at every position, L = 2
        let data: Vec<f64> = (0..10).flat_map(|c| [c as f64; 2]).collect();
        let f = Tensor::new(vec![1, 10, 2], data).unwrap();
        let s = disentangle_features(&f, &p).unwrap();
        assert_eq!(s.common.data(), &[0., 0., 1., 1., 2., 2., 3., 3., 4., 4.]);
        assert_eq!(s.specific.data(), &[5., 5., 6., 6., 7., 7.]);
        assert_eq!(s.confounding.data(), &[8., 8., 9., 9.]);
        assert_eq!(s.concat(), f);
    }

    #[test]
    fn disentangle_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = PartitionSpec::new(5, 3, 2).unwrap();
        let f = normal_tensor(&mut rng, &[2, 10, 4], 1.0);
        let s = disentangle_features(&f, &p).unwrap();
        assert_eq!(s.common.shape(), &[2, 5, 4]);
        assert_eq!(s.specific.shape(), &[2, 3, 4]);
        assert_eq!(s.confounding.shape(), &[2, 2, 4]);
        assert_eq!(s.concat(), f);
        let wrong = PartitionSpec::new(5, 3, 3).unwrap();
        assert!(disentangle_features(&f, &wrong).is_err());
    }

    #[test]
    fn backbone_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut zero = Backbone::random(6, 8, 3, 2, &mut rng);
        for l in &mut zero.layers {
            l.weight = Tensor::zeros(l.weight.shape());
        }
        let x = normal_tensor(&mut rng, &[4, 6], 1.0);
        let out = forward_backbone(&zero, &x).unwrap();
        assert_eq!(out.shape(), &[4, 3, 2]);
        assert!(out.data().iter().all(|v| *v == 0.0));

        let id = Backbone::identity(5);
        let x = Tensor::matrix(2, 5, (1..=10).map(f64::from).collect()).unwrap();
        let out = forward_backbone(&id, &x).unwrap();
        assert_eq!(out.data(), x.data());

        let make = || Backbone::random(6, 8, 3, 2, &mut ChaCha8Rng::seed_from_u64(9));
        let x = normal_tensor(&mut rng, &[3, 6], 1.0);
        assert_eq!(
            forward_backbone(&make(), &x).unwrap().data(),
            forward_backbone(&make(), &x).unwrap().data()
        );
        assert!(forward_backbone(&make(), &Tensor::zeros(&[3, 5])).is_err());
    }

    #[test]
    fn gtl_rectifies_negative_preactivations() {
        let mut g = Gtl::random(2, 2, &mut ChaCha8Rng::seed_from_u64(1));
        g.weight = Tensor::matrix(2, 2, vec![-1.0, 0.0, 0.0, -1.0]).unwrap();
        let x = Tensor::new(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = gtl_forward(&g, &x, Mode::Eval).unwrap();
        assert!(out.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gtl_normalization_is_identity_on_standardized_batch() {
        let mut g = Gtl::random(2, 2, &mut ChaCha8Rng::seed_from_u64(2));
        g.weight = Tensor::identity(2);
        // per-channel mean 0, biased variance 1 over the 4 positions
        let x = Tensor::new(vec![2, 2, 2], vec![1., -1., 1., 1., 1., -1., -1., -1.]).unwrap();
        let out = gtl_forward(&g, &x, Mode::Train).unwrap();
        let scale = 1.0 / (1.0 + EPS_BN).sqrt();
        for (o, i) in out.data().iter().zip(x.data()) {
            assert!((o - i.max(0.0) * scale).abs() < 1e-12);
            assert!((o - i.max(0.0)).abs() < 1e-5);
        }
    }

    #[test]
    fn gtl_eval_is_batch_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut g = Gtl::random(3, 4, &mut rng);
        g.running_mean = normal_tensor(&mut rng, &[4], 0.5);
        g.running_var = Tensor::full(&[4], 2.0);
        let x = normal_tensor(&mut rng, &[5, 3, 2], 1.0);
        let batched = gtl_forward(&g, &x, Mode::Eval).unwrap();
        for b in 0..5 {
            let single = Tensor::new(vec![1, 3, 2], x.data()[b * 6..(b + 1) * 6].to_vec()).unwrap();
            let out = gtl_forward(&g, &single, Mode::Eval).unwrap();
            for (a, c) in out.data().iter().zip(&batched.data()[b * 8..(b + 1) * 8]) {
                assert!((a - c).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn gtl_train_statistics_match_affine_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut g = Gtl::random(3, 3, &mut rng);
        g.gamma = Tensor::vector(vec![2.0, 0.5, 1.5]);
        g.beta = Tensor::vector(vec![-1.0, 0.3, 4.0]);
        let x = normal_tensor(&mut rng, &[16, 3, 4], 30.0);
        // inspect pre-rectification values on the tape
        let mut tape = Tape::new();
        let rows = tape.constant(to_position_rows(&x).unwrap());
        let w = tape.constant(g.weight.clone());
        let z = tape.matmul(rows, w).unwrap();
        let (zn, _, _) = tape.batch_norm(z, EPS_BN).unwrap();
        let gam = tape.constant(g.gamma.clone());
        let bet = tape.constant(g.beta.clone());
        let y = tape.mul_row(zn, gam).unwrap();
        let y = tape.add_row(y, bet).unwrap();
        let y = tape.value(y);
        let n = y.rows() as f64;
        for c in 0..3 {
            let col: Vec<f64> = (0..y.rows()).map(|r| y.at2(r, c)).collect();
            let mean = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            assert!((mean - g.beta.data()[c]).abs() < 1e-6);
            assert!((var - g.gamma.data()[c].powi(2)).abs() < 1e-6);
        }
    }
}
