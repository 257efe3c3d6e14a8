//! Multi-granularity label hierarchies.
//!
//! Level 0 is the fine level; coarseness increases with the level index.
//! `parent_maps[g][i]` is the level-`g+1` parent of level-`g` class `i`.

mod dataset;
mod synthetic;

pub use dataset::{Dataset, Domain, LabeledSample};
pub use synthetic::{generate_synthetic_domains, SyntheticDomainConfig, SyntheticGenerator};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawHierarchy {
    class_counts: Vec<usize>,
    parent_maps: Vec<Vec<usize>>,
}

/// Validated label hierarchy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawHierarchy", into = "RawHierarchy")]
pub struct HierarchySpec {
    class_counts: Vec<usize>,
    parent_maps: Vec<Vec<usize>>,
    /// `ancestors[k][g]`: level-`g` ancestor of fine class `k`.
    ancestors: Vec<Vec<usize>>,
}

impl TryFrom<RawHierarchy> for HierarchySpec {
    type Error = Error;

    fn try_from(raw: RawHierarchy) -> Result<Self> {
        build_hierarchy(raw.class_counts, raw.parent_maps)
    }
}

impl From<HierarchySpec> for RawHierarchy {
    fn from(h: HierarchySpec) -> Self {
        RawHierarchy {
            class_counts: h.class_counts,
            parent_maps: h.parent_maps,
        }
    }
}

/// Validates class counts and parent maps into a [`HierarchySpec`].
pub fn build_hierarchy(class_counts: Vec<usize>, parent_maps: Vec<Vec<usize>>) -> Result<HierarchySpec> {
    if class_counts.is_empty() {
        return invalid("hierarchy needs at least one level");
    }
    if let Some(g) = class_counts.iter().position(|&c| c == 0) {
        return invalid(format!("level {g} has no classes"));
    }
    let levels = class_counts.len();
    if parent_maps.len() != levels - 1 {
        return invalid(format!(
            "{levels} levels need {} parent maps, got {}",
            levels - 1,
            parent_maps.len()
        ));
    }
    for (g, map) in parent_maps.iter().enumerate() {
        let (n, parents) = (class_counts[g], class_counts[g + 1]);
        if map.len() < n {
            let missing: Vec<usize> = (map.len()..n).collect();
            return invalid(format!("level {g}: classes {missing:?} have no parent"));
        }
        if map.len() > n {
            return invalid(format!(
                "level {g}: parent map lists {} classes but the level has {n}",
                map.len()
            ));
        }
        let bad: Vec<usize> = (0..n).filter(|&i| map[i] >= parents).collect();
        if !bad.is_empty() {
            return invalid(format!(
                "level {g}: classes {bad:?} map to parent ids outside 0..{parents}"
            ));
        }
        let mut has_child = vec![false; parents];
        map.iter().for_each(|&q| has_child[q] = true);
        let childless: Vec<usize> = (0..parents).filter(|&q| !has_child[q]).collect();
        if !childless.is_empty() {
            return invalid(format!("level {}: classes {childless:?} have no children", g + 1));
        }
    }
    let ancestors = (0..class_counts[0])
        .map(|k| {
            let mut chain = Vec::with_capacity(levels);
            let mut c = k;
            chain.push(c);
            for map in &parent_maps {
                c = map[c];
                chain.push(c);
            }
            chain
        })
        .collect();
    Ok(HierarchySpec {
        class_counts,
        parent_maps,
        ancestors,
    })
}

impl HierarchySpec {
    /// Number of granularity levels `G`.
    pub fn levels(&self) -> usize {
        self.class_counts.len()
    }

    /// Number of fine classes `K`.
    pub fn fine_classes(&self) -> usize {
        self.class_counts[0]
    }

    pub fn class_counts(&self) -> &[usize] {
        &self.class_counts
    }

    pub fn class_count(&self, level: usize) -> usize {
        self.class_counts[level]
    }

    pub fn parent_maps(&self) -> &[Vec<usize>] {
        &self.parent_maps
    }

    /// Parent of level-`level` class `class`; `None` at the top level.
    pub fn parent(&self, level: usize, class: usize) -> Option<usize> {
        self.parent_maps.get(level).map(|m| m[class])
    }

    /// Number of parents of level-`level` classes (`Q_g`); `None` at the top level.
    pub fn parent_count(&self, level: usize) -> Option<usize> {
        self.class_counts.get(level + 1).copied()
    }

    /// Label at every level for a fine class.
    pub fn label_vector(&self, fine_class: usize) -> Result<Vec<usize>> {
        self.ancestors
            .get(fine_class)
            .cloned()
            .ok_or_else(|| Error::Validation(format!("fine class {fine_class} out of range 0..{}", self.fine_classes())))
    }

    pub(crate) fn ancestor(&self, fine_class: usize, level: usize) -> usize {
        self.ancestors[fine_class][level]
    }

    /// Fine classes descending from level-`level` class `class`.
    pub fn fine_descendants(&self, level: usize, class: usize) -> Vec<usize> {
        (0..self.fine_classes())
            .filter(|&k| self.ancestors[k][level] == class)
            .collect()
    }

    /// `G` minus the Hamming distance of the two label vectors.
    pub fn class_similarity(&self, i: usize, j: usize) -> Result<usize> {
        let (a, b) = (self.label_vector(i)?, self.label_vector(j)?);
        let hamming = a.iter().zip(&b).filter(|(x, y)| x != y).count();
        Ok(a.len() - hamming)
    }

    /// `K x K` matrix of [`Self::class_similarity`].
    pub fn similarity_matrix(&self) -> Vec<Vec<usize>> {
        let k = self.fine_classes();
        (0..k)
            .map(|i| (0..k).map(|j| self.class_similarity(i, j).expect("ids in range")).collect())
            .collect()
    }

    /// Lifting matrix `[K_g, K]` spreading each level-`level` class's mass
    /// uniformly over its fine descendants.
    pub fn lift_matrix(&self, level: usize) -> Vec<Vec<f64>> {
        let k = self.fine_classes();
        (0..self.class_counts[level])
            .map(|q| {
                let desc = self.fine_descendants(level, q);
                let w = 1.0 / desc.len() as f64;
                let mut row = vec![0.0; k];
                desc.iter().for_each(|&d| row[d] = w);
                row
            })
            .collect()
    }

    /// Loads a hierarchy config file (`{"class_counts": [...], "parent_maps": [[...]]}`).
    pub fn from_json_file(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Builds a hierarchy with the given class counts that contains every
    /// listed label path (`[fine, level1, ...]`). Classes not named by any
    /// path are attached to parents that would otherwise have no children,
    /// then to parent 0.
    pub fn from_label_paths(class_counts: Vec<usize>, paths: &[Vec<usize>]) -> Result<Self> {
        let levels = class_counts.len();
        if paths.iter().any(|p| p.len() != levels) {
            return invalid(format!("label paths must have {levels} entries"));
        }
        let mut maps = Vec::with_capacity(levels.saturating_sub(1));
        for g in 0..levels.saturating_sub(1) {
            let mut map: Vec<Option<usize>> = vec![None; class_counts[g]];
            for p in paths {
                let slot = map
                    .get_mut(p[g])
                    .ok_or_else(|| Error::Validation(format!("level {g}: class {} out of range", p[g])))?;
                match slot {
                    Some(q) if *q != p[g + 1] => {
                        return invalid(format!(
                            "level {g}: class {} listed with parents {q} and {}",
                            p[g],
                            p[g + 1]
                        ))
                    }
                    _ => *slot = Some(p[g + 1]),
                }
            }
            let used: Vec<usize> = map.iter().flatten().copied().collect();
            let mut uncovered: Vec<usize> = (0..class_counts[g + 1]).filter(|q| !used.contains(q)).collect();
            uncovered.reverse();
            maps.push(
                map.into_iter()
                    .map(|m| m.unwrap_or_else(|| uncovered.pop().unwrap_or(0)))
                    .collect(),
            );
        }
        build_hierarchy(class_counts, maps)
    }

    /// The three-level hierarchy used by the shipped benchmark: 8 fine
    /// classes, 4 parents, 2 grandparents.
    pub fn benchmark() -> Self {
        build_hierarchy(
            vec![8, 4, 2],
            vec![vec![0, 0, 1, 1, 2, 2, 3, 3], vec![0, 0, 1, 1]],
        )
        .expect("static hierarchy")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> HierarchySpec {
        build_hierarchy(vec![4, 2, 1], vec![vec![0, 0, 1, 1], vec![0, 0]]).unwrap()
    }

    pub(crate) fn table_hierarchy() -> HierarchySpec {
        let rows = [
            [8, 5, 3, 3],
            [9, 6, 3, 3],
            [10, 5, 3, 3],
            [11, 7, 3, 3],
            [12, 8, 3, 3],
            [28, 19, 12, 3],
            [29, 19, 12, 3],
            [51, 36, 19, 8],
        ];
        let paths: Vec<Vec<usize>> = rows.iter().map(|r| r.to_vec()).collect();
        HierarchySpec::from_label_paths(vec![52, 37, 20, 9], &paths).unwrap()
    }

    #[test]
    fn builds_tiny_hierarchy() {
        let h = tiny();
        assert_eq!(h.levels(), 3);
        assert_eq!(h.label_vector(2).unwrap(), vec![2, 1, 0]);
    }

    #[test]
    fn builds_cub_shaped_hierarchy() {
        let counts = vec![200, 122, 38, 14];
        let maps = (0..3)
            .map(|g| (0..counts[g]).map(|i| i * counts[g + 1] / counts[g]).collect())
            .collect();
        let h = build_hierarchy(counts, maps).unwrap();
        assert_eq!(h.levels(), 4);
        assert_eq!(h.class_counts(), &[200, 122, 38, 14]);
    }

    #[test]
    fn rejects_orphans_and_bad_ids() {
        let err = build_hierarchy(vec![4, 2], vec![vec![0, 0, 1]]).unwrap_err();
        assert!(err.to_string().contains("[3]"), "{err}");
        assert!(build_hierarchy(vec![4, 2], vec![vec![0, 0, 1, 2]]).is_err());
        assert!(build_hierarchy(vec![4, 3], vec![vec![0, 0, 1, 1]]).is_err());
        assert!(build_hierarchy(vec![4, 2, 1], vec![vec![0, 0, 1, 1]]).is_err());
    }

    #[test]
    fn label_table_rows() {
        let h = table_hierarchy();
        assert_eq!(h.label_vector(8).unwrap(), vec![8, 5, 3, 3]);
        assert_eq!(h.label_vector(51).unwrap(), vec![51, 36, 19, 8]);
        assert!(h.label_vector(52).is_err());
    }

    #[test]
    fn class_similarity_examples() {
        let h = table_hierarchy();
        assert_eq!(h.class_similarity(8, 8).unwrap(), 4);
        assert_eq!(h.class_similarity(8, 10).unwrap(), 3);
        assert_eq!(h.class_similarity(12, 51).unwrap(), 0);
    }

    #[test]
    fn similarity_matrix_examples() {
        let m = tiny().similarity_matrix();
        assert_eq!(
            m,
            vec![vec![3, 2, 1, 1], vec![2, 3, 1, 1], vec![1, 1, 3, 2], vec![1, 1, 2, 3]]
        );
        let flat = build_hierarchy(vec![3], vec![]).unwrap().similarity_matrix();
        assert_eq!(flat, vec![vec![1, 0, 0], vec![0, 1, 0], vec![0, 0, 1]]);
        let h = table_hierarchy();
        let m = h.similarity_matrix();
        for (i, row) in m.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                assert_eq!(*v, m[j][i]);
            }
        }
    }

    #[test]
    fn deeper_common_ancestor_means_higher_similarity() {
        let h = HierarchySpec::benchmark();
        // 0 and 1 share a parent, 0 and 2 only a grandparent, 0 and 4 nothing
        let s = |a, b| h.class_similarity(a, b).unwrap();
        assert!(s(0, 1) > s(0, 2) && s(0, 2) > s(0, 4));
    }

    #[test]
    fn lift_matrix_rows_are_distributions() {
        let h = tiny();
        let m = h.lift_matrix(1);
        assert_eq!(m, vec![vec![0.5, 0.5, 0.0, 0.0], vec![0.0, 0.0, 0.5, 0.5]]);
        assert_eq!(h.lift_matrix(2), vec![vec![0.25; 4]]);
    }

    #[test]
    fn json_round_trip_validates() {
        let h = tiny();
        let s = serde_json::to_string(&h).unwrap();
        assert_eq!(s, r#"{"class_counts":[4,2,1],"parent_maps":[[0,0,1,1],[0,0]]}"#);
        let back: HierarchySpec = serde_json::from_str(&s).unwrap();
        assert_eq!(back, h);
        let bad = r#"{"class_counts":[4,2],"parent_maps":[[0,0,1]]}"#;
        assert!(serde_json::from_str::<HierarchySpec>(bad).is_err());
    }
}
