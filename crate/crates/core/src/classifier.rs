//! Partitioned classifier weights and λ-weighted structured inference.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, invalid, Result};
use crate::model::{split_cols, Part, PartitionSpec, PooledFeatures};
use crate::numkernel::Tensor;

/// Inference weights of the common, specific and confounding blocks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lambda {
    pub c: f64,
    pub p: f64,
    pub n: f64,
}

impl Lambda {
    pub const ONES: Lambda = Lambda { c: 1.0, p: 1.0, n: 1.0 };

    pub fn new(c: f64, p: f64, n: f64) -> Self {
        Self { c, p, n }
    }

    pub fn get(&self, part: Part) -> f64 {
        match part {
            Part::Common => self.c,
            Part::Specific => self.p,
            Part::Confounding => self.n,
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.c, self.p, self.n]
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self::new(self.c * s, self.p * s, self.n * s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.as_array().iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return invalid(format!("inference weights must be finite and non-negative, got {self:?}"));
        }
        Ok(())
    }
}

/// Divides the weights by their sum.
pub fn normalize_inference_weights(lam: Lambda) -> Result<Lambda> {
    lam.validate()?;
    let s = lam.c + lam.p + lam.n;
    if s <= 0.0 {
        return invalid("inference weights are all zero");
    }
    Ok(Lambda::new(lam.c / s, lam.p / s, lam.n / s))
}

/// Per-level linear classifier `[K_g, d]` whose columns follow the feature
/// partition.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuredClassifier {
    pub weight: Tensor,
    pub bias: Tensor,
    pub partition: PartitionSpec,
}

impl StructuredClassifier {
    pub fn new(weight: Tensor, bias: Tensor, partition: PartitionSpec) -> Result<Self> {
        if weight.shape().len() != 2 || weight.cols() != partition.total() {
            return dim_err(format!("weight {:?} against {} channels", weight.shape(), partition.total()));
        }
        if bias.len() != weight.rows() {
            return dim_err(format!("bias of length {} for {} classes", bias.len(), weight.rows()));
        }
        Ok(Self { weight, bias, partition })
    }

    /// Gaussian weights with standard deviation `1/√d`, zero bias.
    pub fn random(classes: usize, partition: PartitionSpec, rng: &mut impl Rng) -> Self {
        let d = partition.total();
        let weight = crate::model::normal_tensor(rng, &[classes, d], 1.0 / (d as f64).sqrt());
        Self {
            weight,
            bias: Tensor::zeros(&[classes]),
            partition,
        }
    }

    pub fn classes(&self) -> usize {
        self.weight.rows()
    }

    pub fn blocks(&self) -> [Tensor; 3] {
        split_cols(&self.weight, &self.partition).expect("validated layout")
    }
}

/// Column blocks `(W^c, W^p, W^n)` of a weight matrix.
pub fn disentangle_weights(w: &Tensor, p: &PartitionSpec) -> Result<[Tensor; 3]> {
    if w.shape().len() != 2 {
        return dim_err(format!("weight must be a matrix, got {:?}", w.shape()));
    }
    split_cols(w, p)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `H_k = λ_c⟨f^c,W_k^c⟩ + λ_p⟨f^p,W_k^p⟩ + λ_n⟨f^n,W_k^n⟩ + b_k`.
pub fn structured_logits(f: &PooledFeatures, cls: &StructuredClassifier, lam: Lambda) -> Result<Vec<f64>> {
    let p = &cls.partition;
    for part in Part::ALL {
        if f.part(part).len() != p.size(part) {
            return dim_err(format!(
                "{} block of length {} against weight block of {}",
                part.name(),
                f.part(part).len(),
                p.size(part)
            ));
        }
    }
    lam.validate()?;
    Ok((0..cls.classes())
        .map(|k| {
            let w = cls.weight.row(k);
            let mut h = 0.0;
            for part in Part::ALL {
                h += lam.get(part) * dot(f.part(part), &w[p.range(part)]);
            }
            h + cls.bias.data()[k]
        })
        .collect())
}

/// Structured logits for every row of a pooled feature matrix `[B, d]`.
pub fn structured_logits_batch(pooled: &Tensor, cls: &StructuredClassifier, lam: Lambda) -> Result<Tensor> {
    if pooled.cols() != cls.partition.total() {
        return dim_err(format!("{} feature columns against {} channels", pooled.cols(), cls.partition.total()));
    }
    let mut out = Vec::with_capacity(pooled.rows() * cls.classes());
    for b in 0..pooled.rows() {
        let f = PooledFeatures::from_vector(pooled.row(b), &cls.partition)?;
        out.extend(structured_logits(&f, cls, lam)?);
    }
    Tensor::matrix(pooled.rows(), cls.classes(), out)
}

/// Unpartitioned affine scores `⟨f, W_k⟩ + b_k`.
pub fn affine_logits(f: &[f64], cls: &StructuredClassifier) -> Result<Vec<f64>> {
    if f.len() != cls.partition.total() {
        return dim_err(format!("feature of length {} against {} channels", f.len(), cls.partition.total()));
    }
    Ok((0..cls.classes())
        .map(|k| dot(f, cls.weight.row(k)) + cls.bias.data()[k])
        .collect())
}

/// Index of the largest logit; the lowest index wins ties.
pub fn predict(logits: &[f64]) -> Result<usize> {
    if logits.is_empty() {
        return dim_err("prediction from empty logits");
    }
    let mut best = 0;
    for (i, v) in logits.iter().enumerate() {
        if *v > logits[best] {
            best = i;
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn example() -> (PooledFeatures, StructuredClassifier) {
        let p = PartitionSpec::new(2, 1, 1).unwrap();
        let f = PooledFeatures::from_vector(&[1., 2., 3., 4.], &p).unwrap();
        let w = Tensor::matrix(1, 4, vec![1., 0., 1., 2.]).unwrap();
        let cls = StructuredClassifier::new(w, Tensor::vector(vec![0.5]), p).unwrap();
        (f, cls)
    }

    #[test]
    fn weighted_logit_example() {
        let (f, cls) = example();
        let h = structured_logits(&f, &cls, Lambda::new(0.75, 0.2, 0.05)).unwrap();
        // generic oracle: scale each block of f by its λ, then a plain dot product
        let scaled = [0.75, 0.75 * 2.0, 0.2 * 3.0, 0.05 * 4.0];
        let oracle = dot(&scaled, cls.weight.row(0)) + 0.5;
        assert!((h[0] - 2.25).abs() < 1e-12);
        assert!((h[0] - oracle).abs() < 1e-12);
        // a second class scoring 2.24 loses
        assert_eq!(predict(&[h[0], 2.24]).unwrap(), 0);
    }

    #[test]
    fn zero_feature_gives_bias() {
        let (_, cls) = example();
        let f = PooledFeatures::from_vector(&[0.0; 4], &cls.partition).unwrap();
        assert_eq!(structured_logits(&f, &cls, Lambda::ONES).unwrap(), vec![0.5]);
    }

    #[test]
    fn block_mismatch_is_error() {
        let (_, cls) = example();
        let f = PooledFeatures {
            common: vec![1.0],
            specific: vec![1.0],
            confounding: vec![1.0],
        };
        assert!(structured_logits(&f, &cls, Lambda::ONES).is_err());
    }

    #[test]
    fn weight_blocks() {
        let p = PartitionSpec::new(5, 3, 2).unwrap();
        let w = Tensor::matrix(1, 10, (0..10).map(f64::from).collect()).unwrap();
        let [c, s, n] = disentangle_weights(&w, &p).unwrap();
        assert_eq!(c.data(), &[0., 1., 2., 3., 4.]);
        assert_eq!(s.data(), &[5., 6., 7.]);
        assert_eq!(n.data(), &[8., 9.]);
        assert_eq!(Tensor::concat_cols(&[&c, &s, &n]).unwrap(), w);

        let p = PartitionSpec::new(10, 6, 4).unwrap();
        let w = crate::model::normal_tensor(&mut ChaCha8Rng::seed_from_u64(0), &[31, 20], 1.0);
        let blocks = disentangle_weights(&w, &p).unwrap();
        assert_eq!(blocks[0].shape(), &[31, 10]);
        assert_eq!(blocks[1].shape(), &[31, 6]);
        assert_eq!(blocks[2].shape(), &[31, 4]);
        assert_eq!(Tensor::concat_cols(&[&blocks[0], &blocks[1], &blocks[2]]).unwrap(), w);
    }

    #[test]
    fn normalization_examples() {
        let third = 1.0 / 3.0;
        let n = normalize_inference_weights(Lambda::ONES).unwrap();
        assert!(n.as_array().iter().all(|v| (v - third).abs() < 1e-15));
        let preset = Lambda::new(0.75, 0.2, 0.05);
        let n = normalize_inference_weights(preset).unwrap();
        assert!((n.c - 0.75).abs() < 1e-15 && (n.p - 0.2).abs() < 1e-15 && (n.n - 0.05).abs() < 1e-15);
        assert_eq!(normalize_inference_weights(Lambda::new(3., 1., 0.)).unwrap(), Lambda::new(0.75, 0.25, 0.0));
        assert!(normalize_inference_weights(Lambda::new(0., 0., 0.)).is_err());
        assert!(normalize_inference_weights(Lambda::new(-1., 1., 1.)).is_err());
    }

    #[test]
    fn predict_examples() {
        assert_eq!(predict(&[0.1, 2.0, -1.0]).unwrap(), 1);
        assert_eq!(predict(&[5.0, 5.0]).unwrap(), 0);
        assert!(predict(&[]).is_err());
    }

    fn random_case(seed: u64) -> (Vec<f64>, StructuredClassifier) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = PartitionSpec::new(5, 3, 2).unwrap();
        let mut cls = StructuredClassifier::random(6, p, &mut rng);
        cls.bias = crate::model::normal_tensor(&mut rng, &[6], 1.0);
        let f = crate::model::normal_tensor(&mut rng, &[10], 2.0).into_data();
        (f, cls)
    }

    proptest! {
        #[test]
        fn unit_lambda_is_affine(seed in any::<u64>()) {
            let (f, cls) = random_case(seed);
            let pf = PooledFeatures::from_vector(&f, &cls.partition).unwrap();
            let s = structured_logits(&pf, &cls, Lambda::ONES).unwrap();
            let a = affine_logits(&f, &cls).unwrap();
            for (x, y) in s.iter().zip(&a) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn prediction_invariant_to_lambda_scale(seed in any::<u64>(), c in 0.01f64..100.0,
                                                l in prop::array::uniform3(0.0f64..1.0)) {
            let (f, mut cls) = random_case(seed);
            cls.bias = Tensor::zeros(&[6]);
            let pf = PooledFeatures::from_vector(&f, &cls.partition).unwrap();
            let lam = Lambda::new(l[0], l[1], l[2]);
            let a = predict(&structured_logits(&pf, &cls, lam).unwrap()).unwrap();
            let b = predict(&structured_logits(&pf, &cls, lam.scaled(c)).unwrap()).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn zero_confounding_weight_ignores_block(seed in any::<u64>(),
                                                 noise in prop::collection::vec(-100.0f64..100.0, 2)) {
            let (f, cls) = random_case(seed);
            let lam = Lambda::new(0.6, 0.4, 0.0);
            let pf = PooledFeatures::from_vector(&f, &cls.partition).unwrap();
            let mut moved = pf.clone();
            moved.confounding = noise;
            let a = structured_logits(&pf, &cls, lam).unwrap();
            let b = structured_logits(&moved, &cls, lam).unwrap();
            prop_assert_eq!(predict(&a).unwrap(), predict(&b).unwrap());
            prop_assert_eq!(a, b);
        }
    }
}
