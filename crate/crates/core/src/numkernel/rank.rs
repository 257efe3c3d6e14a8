use crate::error::{dim_err, Error, Result};

/// 1-based ranks with ties resolved to the mean of the positions they span.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        // positions i..=j (0-based) share rank mean(i+1..=j+1)
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson product-moment correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return dim_err(format!("correlation of lengths {} and {}", x.len(), y.len()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("one input is constant".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Spearman rank correlation: Pearson correlation of average ranks.
pub fn spearman_rho(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return dim_err(format!("spearman of lengths {} and {}", x.len(), y.len()));
    }
    if x.len() < 2 {
        return dim_err("spearman needs at least two observations");
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_get_average_ranks() {
        assert_eq!(average_ranks(&[10., 20., 20., 5.]), vec![2.0, 3.5, 3.5, 1.0]);
    }

    #[test]
    fn spearman_examples() {
        let x = [0.3, 1.5, -2.0, 7.0];
        assert!((spearman_rho(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let asc = [1., 2., 3., 4., 5.];
        let desc = [5., 4., 3., 2., 1.];
        assert!((spearman_rho(&asc, &desc).unwrap() + 1.0).abs() < 1e-12);
        let r = spearman_rho(&[1., 2., 3., 4.], &[1., 3., 2., 4.]).unwrap();
        assert!((r - 0.8).abs() < 1e-12);
    }

    #[test]
    fn spearman_errors() {
        assert!(matches!(
            spearman_rho(&[1., 1., 1.], &[1., 2., 3.]),
            Err(Error::UndefinedCorrelation(_))
        ));
        assert!(spearman_rho(&[1.], &[1.]).is_err());
        assert!(spearman_rho(&[1., 2.], &[1., 2., 3.]).is_err());
    }
}
