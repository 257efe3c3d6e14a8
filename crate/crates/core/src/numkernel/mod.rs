//! Dense numeric core: tensors, reverse-mode differentiation, probability
//! helpers, finite differences and rank statistics.

mod rank;
mod tape;
mod tensor;

pub use rank::{average_ranks, pearson, spearman_rho};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use crate::error::{dim_err, Error, Result};

/// Lower clamp applied to probabilities before taking logarithms.
pub const EPS_PROB: f64 = 1e-12;
/// Added to cosine denominators.
pub const EPS_NORM: f64 = 1e-12;

/// `⟨a,b⟩ / (‖a‖‖b‖ + ε)`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return dim_err(format!("cosine of lengths {} and {}", a.len(), b.len()));
    }
    Ok(tape::cosine_parts(a, b).0)
}

pub fn softmax(z: &[f64]) -> Result<Vec<f64>> {
    if z.is_empty() {
        return dim_err("softmax of an empty vector");
    }
    let mx = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / s).collect())
}

/// `-Σ target_i ln(max(pred_i, ε))`.
pub fn cross_entropy(target: &[f64], pred: &[f64]) -> Result<f64> {
    if target.len() != pred.len() {
        return dim_err(format!("cross entropy of lengths {} and {}", target.len(), pred.len()));
    }
    Ok(-target
        .iter()
        .zip(pred)
        .map(|(t, p)| t * p.max(EPS_PROB).ln())
        .sum::<f64>())
}

/// `Σ target_i ln(target_i / pred_i)`, terms with zero target dropped.
pub fn kl_divergence(target: &[f64], pred: &[f64]) -> Result<f64> {
    if target.len() != pred.len() {
        return dim_err(format!("KL of lengths {} and {}", target.len(), pred.len()));
    }
    Ok(target
        .iter()
        .zip(pred)
        .filter(|(t, _)| **t > 0.0)
        .map(|(t, p)| t * (t.max(EPS_PROB).ln() - p.max(EPS_PROB).ln()))
        .sum())
}

/// Central-difference gradient of a scalar function of a tensor.
pub fn finite_difference_grad<F>(mut f: F, theta: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let mut probe = theta.clone();
    let mut out = Tensor::zeros(theta.shape());
    for i in 0..theta.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Numeric(format!("objective not finite at coordinate {i}")));
        }
        out.data_mut()[i] = (up - down) / (2.0 * h);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn cosine_examples() {
        assert!(close(cosine_similarity(&[1., 0.], &[1., 0.]).unwrap(), 1.0, 1e-11));
        assert_eq!(cosine_similarity(&[1., 0.], &[0., 1.]).unwrap(), 0.0);
        let v = cosine_similarity(&[1., 1.], &[1., 0.]).unwrap();
        // independent oracle: dot / (|a| |b|)
        let oracle = 1.0 / (2f64.sqrt() * 1.0);
        assert!(close(v, oracle, 1e-12));
        assert!(close(v, std::f64::consts::FRAC_1_SQRT_2, 1e-12));
        assert!(cosine_similarity(&[1., 0.], &[1.]).is_err());
        assert_eq!(cosine_similarity(&[0., 0.], &[0., 0.]).unwrap(), 0.0);
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0., 0.]).unwrap(), vec![0.5, 0.5]);
        for c in [-7.0, 0.0, 3.5] {
            let p = softmax(&[c; 4]).unwrap();
            assert!(p.iter().all(|v| close(*v, 0.25, 1e-15)));
        }
        let p = softmax(&[2f64.ln(), 0.0]).unwrap();
        assert!(close(p[0], 2.0 / 3.0, 1e-15) && close(p[1], 1.0 / 3.0, 1e-15));
        assert!(softmax(&[]).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        assert!(cross_entropy(&[0., 1., 0.], &[0., 1., 0.]).unwrap() <= 1e-9);
        let u = cross_entropy(&[1., 0., 0., 0.], &[0.25; 4]).unwrap();
        assert!(close(u, 4f64.ln(), 1e-12) && close(u, 1.38629, 1e-5));
        assert!(close(cross_entropy(&[1., 0.], &[0.5, 0.5]).unwrap(), 2f64.ln(), 1e-12));
        assert!(cross_entropy(&[1., 0.], &[1.]).is_err());
    }

    #[test]
    fn kl_examples() {
        let p = [0.2, 0.3, 0.5];
        assert!(kl_divergence(&p, &p).unwrap().abs() <= 1e-12);
        assert!(close(kl_divergence(&[1., 0.], &[0.5, 0.5]).unwrap(), 2f64.ln(), 1e-12));
        let v = kl_divergence(&[0.5, 0.5], &[0.25, 0.75]).unwrap();
        let oracle = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!(close(v, oracle, 1e-12) && close(v, 0.14384, 1e-5));
    }

    #[test]
    fn finite_difference_examples() {
        let theta = Tensor::vector(vec![1.0, 2.0]);
        let g = finite_difference_grad(|t| Ok(t.data().iter().map(|v| v * v).sum()), &theta, 1e-5).unwrap();
        assert!(close(g.data()[0], 2.0, 1e-7) && close(g.data()[1], 4.0, 1e-7));

        let g = finite_difference_grad(|_| Ok(3.0), &theta, 1e-5).unwrap();
        assert!(g.data().iter().all(|v| *v == 0.0));

        let zero = Tensor::vector(vec![0.0, 0.0]);
        let g = finite_difference_grad(
            |t| cross_entropy(&[1.0, 0.0], &softmax(t.data())?),
            &zero,
            1e-5,
        )
        .unwrap();
        assert!(close(g.data()[0], -0.5, 1e-7) && close(g.data()[1], 0.5, 1e-7));

        let bad = finite_difference_grad(|t| Ok((t.data()[0] - 1.0).ln()), &theta, 1e-5);
        assert!(matches!(bad, Err(Error::Numeric(_))));
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(z in prop::collection::vec(-50.0f64..50.0, 1..20)) {
            let p = softmax(&z).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(p.iter().all(|v| *v >= 0.0));
        }

        #[test]
        fn softmax_shift_invariant(z in prop::collection::vec(-20.0f64..20.0, 1..10), c in -30.0f64..30.0) {
            let a = softmax(&z).unwrap();
            let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
            let b = softmax(&shifted).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn kl_self_is_zero(w in prop::collection::vec(0.001f64..1.0, 2..12)) {
            let s: f64 = w.iter().sum();
            let p: Vec<f64> = w.iter().map(|v| v / s).collect();
            prop_assert!(kl_divergence(&p, &p).unwrap().abs() <= 1e-12);
        }

        #[test]
        fn cosine_scale_sign(a in prop::collection::vec(-5.0f64..5.0, 1..12), c in 0.1f64..10.0) {
            prop_assume!(a.iter().map(|v| v * v).sum::<f64>() > 1e-3);
            let pos: Vec<f64> = a.iter().map(|v| v * c).collect();
            let neg: Vec<f64> = a.iter().map(|v| -v * c).collect();
            prop_assert!((cosine_similarity(&a, &pos).unwrap() - 1.0).abs() <= 1e-9);
            prop_assert!((cosine_similarity(&a, &neg).unwrap() + 1.0).abs() <= 1e-9);
        }
    }
}
