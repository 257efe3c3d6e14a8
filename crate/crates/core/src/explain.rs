//! Concept-similarity analysis against the label hierarchy and
//! Neural-Collapse statistics.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::hierarchy::HierarchySpec;
use crate::model::{Part, PartitionSpec};
use crate::numkernel::{cosine_similarity, spearman_rho, Tensor};

/// Columns of the weight matrix compared by a similarity matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Block {
    All,
    Common,
    Specific,
    Confounding,
}

impl Block {
    pub const ALL: [Block; 4] = [Block::All, Block::Common, Block::Specific, Block::Confounding];

    fn columns(self, p: &PartitionSpec) -> std::ops::Range<usize> {
        match self {
            Block::All => 0..p.total(),
            Block::Common => p.range(Part::Common),
            Block::Specific => p.range(Part::Specific),
            Block::Confounding => p.range(Part::Confounding),
        }
    }
}

/// `K×K` cosine similarity between the selected column slices of the rows
/// of `w: [K, d]`.
pub fn concept_similarity_matrix(w: &Tensor, block: Block, p: &PartitionSpec) -> Result<Vec<Vec<f64>>> {
    if w.shape().len() != 2 || w.cols() != p.total() {
        return dim_err(format!("weight {:?} against {} channels", w.shape(), p.total()));
    }
    let cols = block.columns(p);
    let rows: Vec<&[f64]> = (0..w.rows()).map(|k| &w.row(k)[cols.clone()]).collect();
    for (k, r) in rows.iter().enumerate() {
        if r.iter().all(|v| *v == 0.0) {
            log::warn!("class {k} has an all-zero {block:?} weight slice");
        }
    }
    let k = rows.len();
    let mut m = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in i..k {
            let c = cosine_similarity(rows[i], rows[j])?;
            m[i][j] = c;
            m[j][i] = c;
        }
    }
    Ok(m)
}

fn upper_triangle<T: Copy + Into<f64>>(m: &[Vec<T>]) -> Vec<f64> {
    let mut out = Vec::new();
    for (i, row) in m.iter().enumerate() {
        out.extend(row[i + 1..].iter().map(|v| (*v).into()));
    }
    out
}

/// Concept similarities of every block with their rank agreement with the
/// hierarchy similarity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub all: Vec<Vec<f64>>,
    pub common: Vec<Vec<f64>>,
    pub specific: Vec<Vec<f64>>,
    pub confounding: Vec<Vec<f64>>,
    pub ground_truth: Vec<Vec<usize>>,
    pub rho_all: f64,
    pub rho_common: f64,
    pub rho_specific: f64,
    pub rho_confounding: f64,
}

impl SimilarityReport {
    pub fn matrix(&self, block: Block) -> &Vec<Vec<f64>> {
        match block {
            Block::All => &self.all,
            Block::Common => &self.common,
            Block::Specific => &self.specific,
            Block::Confounding => &self.confounding,
        }
    }

    /// One row per class pair `i < j`.
    pub fn pairs_csv(&self) -> String {
        let mut out = String::from("i,j,gt_sim,cos_all,cos_c,cos_p,cos_n\n");
        let k = self.ground_truth.len();
        for i in 0..k {
            for j in i + 1..k {
                out.push_str(&format!(
                    "{i},{j},{},{},{},{},{}\n",
                    self.ground_truth[i][j], self.all[i][j], self.common[i][j], self.specific[i][j], self.confounding[i][j]
                ));
            }
        }
        out
    }
}

/// Spearman correlation between the strict upper triangles of concept
/// similarity and hierarchy similarity, for every block.
pub fn hierarchy_alignment(w: &Tensor, p: &PartitionSpec, h: &HierarchySpec) -> Result<SimilarityReport> {
    if w.rows() != h.fine_classes() {
        return dim_err(format!("{} weight rows for {} fine classes", w.rows(), h.fine_classes()));
    }
    let ground_truth = h.similarity_matrix();
    let gt: Vec<f64> = upper_triangle(
        &ground_truth
            .iter()
            .map(|r| r.iter().map(|&v| v as u32).collect::<Vec<_>>())
            .collect::<Vec<_>>(),
    );
    let mut mats = Vec::with_capacity(4);
    let mut rhos = Vec::with_capacity(4);
    for block in Block::ALL {
        let m = concept_similarity_matrix(w, block, p)?;
        rhos.push(spearman_rho(&upper_triangle(&m), &gt)?);
        mats.push(m);
    }
    let mut mats = mats.into_iter();
    Ok(SimilarityReport {
        all: mats.next().expect("four blocks"),
        common: mats.next().expect("four blocks"),
        specific: mats.next().expect("four blocks"),
        confounding: mats.next().expect("four blocks"),
        ground_truth,
        rho_all: rhos[0],
        rho_common: rhos[1],
        rho_specific: rhos[2],
        rho_confounding: rhos[3],
    })
}

/// Neural-Collapse statistics. `None` marks an undefined value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NcReport {
    /// `tr(Σ_W) / tr(Σ_B)`.
    pub nc1: Option<f64>,
    /// Coefficient of variation of `‖μ_c − μ_G‖` over classes.
    pub nc2: Option<f64>,
    /// `cos(w_c, μ_c)` per class; `None` for classes without samples.
    pub nc3: Vec<Option<f64>>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// NC1–NC3 from per-sample features and the classifier weights `[K, d]`.
pub fn nc_diagnostics(features: &[Vec<f64>], labels: &[usize], w: &Tensor) -> Result<NcReport> {
    if features.len() != labels.len() {
        return dim_err(format!("{} features for {} labels", features.len(), labels.len()));
    }
    let k = w.rows();
    let d = w.cols();
    if features.iter().any(|f| f.len() != d) {
        return dim_err(format!("features must have {d} entries"));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Validation(format!("label {bad} out of range for {k} classes")));
    }
    let mut counts = vec![0usize; k];
    let mut means = vec![vec![0.0; d]; k];
    for (f, &y) in features.iter().zip(labels) {
        counts[y] += 1;
        means[y].iter_mut().zip(f).for_each(|(m, v)| *m += v);
    }
    for (m, &n) in means.iter_mut().zip(&counts) {
        if n > 0 {
            m.iter_mut().for_each(|v| *v /= n as f64);
        }
    }
    let present: Vec<usize> = (0..k).filter(|&c| counts[c] > 0).collect();
    if present.len() < 2 || features.len() < 2 {
        return Err(Error::Validation("need at least two samples in at least two classes".into()));
    }
    let n = features.len() as f64;
    let mut global = vec![0.0; d];
    for f in features {
        global.iter_mut().zip(f).for_each(|(g, v)| *g += v / n);
    }

    let within = features
        .iter()
        .zip(labels)
        .map(|(f, &y)| sq_dist(f, &means[y]))
        .sum::<f64>()
        / n;
    let dists: Vec<f64> = present.iter().map(|&c| sq_dist(&means[c], &global).sqrt()).collect();
    let between = dists.iter().map(|v| v * v).sum::<f64>() / present.len() as f64;
    let nc1 = (between > 0.0).then(|| within / between);
    let mean_dist = dists.iter().sum::<f64>() / dists.len() as f64;
    let nc2 = (mean_dist > 0.0).then(|| {
        let var = dists.iter().map(|v| (v - mean_dist).powi(2)).sum::<f64>() / dists.len() as f64;
        var.sqrt() / mean_dist
    });
    let nc3 = (0..k)
        .map(|c| {
            if counts[c] == 0 {
                Ok(None)
            } else {
                cosine_similarity(w.row(c), &means[c]).map(Some)
            }
        })
        .collect::<Result<_>>()?;
    Ok(NcReport { nc1, nc2, nc3 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hierarchy::build_hierarchy;

    #[test]
    fn similarity_matrix_examples() {
        let p = PartitionSpec::new(1, 1, 1).unwrap();
        let same = Tensor::matrix(3, 3, vec![1., 2., 3., 1., 2., 3., 1., 2., 3.]).unwrap();
        for row in concept_similarity_matrix(&same, Block::All, &p).unwrap() {
            assert!(row.iter().all(|v| (v - 1.0).abs() < 1e-11));
        }
        let eye = Tensor::identity(3);
        let m = concept_similarity_matrix(&eye, Block::All, &p).unwrap();
        for (i, row) in m.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                assert!((v - if i == j { 1.0 } else { 0.0 }).abs() < 1e-11);
            }
        }
        let p2 = PartitionSpec::new(1, 1, 1).unwrap();
        let w = Tensor::matrix(2, 3, vec![1., 0., 0., 1., 1., 0.]).unwrap();
        let m = concept_similarity_matrix(&w, Block::All, &p2).unwrap();
        assert!((m[0][1] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        let c = concept_similarity_matrix(&w, Block::Common, &p2).unwrap();
        assert!((c[0][1] - 1.0).abs() < 1e-11);
    }

    #[test]
    fn monotone_weights_align_perfectly() {
        // tiny hierarchy: similarity 2 within a parent, 1 across
        let h = build_hierarchy(vec![4, 2, 1], vec![vec![0, 0, 1, 1], vec![0, 0]]).unwrap();
        let p = PartitionSpec::new(2, 1, 1).unwrap();
        let w = Tensor::matrix(
            4,
            4,
            vec![1., 0., 1., 0.2, 1., 0., -1., 0.3, 0., 1., 1., 0.1, 0., 1., -1., 0.4],
        )
        .unwrap();
        let r = hierarchy_alignment(&w, &p, &h).unwrap();
        assert!((r.rho_common - 1.0).abs() < 1e-12);
        let csv = r.pairs_csv();
        assert_eq!(csv.lines().count(), 1 + 6);
        assert!(csv.starts_with("i,j,gt_sim,cos_all,cos_c,cos_p,cos_n\n0,1,2,"));
    }

    #[test]
    fn flat_hierarchy_is_undefined() {
        let h = build_hierarchy(vec![3], vec![]).unwrap();
        let p = PartitionSpec::new(1, 1, 1).unwrap();
        let w = Tensor::identity(3);
        assert!(matches!(hierarchy_alignment(&w, &p, &h), Err(Error::UndefinedCorrelation(_))));
    }

    #[test]
    fn collapsed_features() {
        let means = [vec![1., 0., 2.], vec![0., 3., 0.], vec![-1., -1., 1.]];
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for (c, m) in means.iter().enumerate() {
            for _ in 0..4 {
                feats.push(m.clone());
                labels.push(c);
            }
        }
        let w = Tensor::from_rows(&[
            means[0].iter().map(|v| v * 2.0).collect(),
            means[1].iter().map(|v| v * 0.5).collect(),
            means[2].iter().map(|v| v * 7.0).collect(),
        ])
        .unwrap();
        let r = nc_diagnostics(&feats, &labels, &w).unwrap();
        assert!(r.nc1.unwrap().abs() < 1e-9);
        assert!(r.nc3.iter().all(|v| (v.unwrap() - 1.0).abs() < 1e-9));
    }

    #[test]
    fn simplex_means_have_equal_norms() {
        let s = 3f64.sqrt() / 2.0;
        let means = [vec![1.0, 0.0], vec![-0.5, s], vec![-0.5, -s]];
        let feats: Vec<Vec<f64>> = means.to_vec();
        let r = nc_diagnostics(&feats, &[0, 1, 2], &Tensor::from_rows(&means).unwrap()).unwrap();
        assert!(r.nc2.unwrap() <= 1e-9);
    }

    #[test]
    fn degenerate_inputs() {
        let w = Tensor::identity(2);
        assert!(nc_diagnostics(&[vec![1., 0.], vec![2., 0.]], &[0, 0], &w).is_err());
        let same = nc_diagnostics(&[vec![1., 0.], vec![1., 0.], vec![1., 0.]], &[0, 1, 1], &w).unwrap();
        assert_eq!(same.nc1, None);
        assert!(nc_diagnostics(&[vec![1., 0.]], &[5], &w).is_err());
    }
}
