//! Quality measures against planted ground truth.

use crate::basket::cosine_similarity;
use crate::error::{Error, Result};
use crate::numkit::{self, Matrix};

/// Mean cosine over unordered pairs of rows in the same group and over
/// pairs in different groups. Zero rows are ignored.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSeparation {
    pub within: f64,
    pub between: f64,
}

impl CosineSeparation {
    pub fn gap(&self) -> f64 {
        self.within - self.between
    }
}

pub fn cosine_separation(embeddings: &Matrix, groups: &[usize]) -> Result<CosineSeparation> {
    if groups.len() != embeddings.rows() {
        return Err(Error::dim(format!(
            "{} group labels for {} rows",
            groups.len(),
            embeddings.rows()
        )));
    }
    let live: Vec<usize> = (0..groups.len())
        .filter(|&i| numkit::norm(embeddings.row(i)) > 0.0)
        .collect();
    let (mut ws, mut wn, mut bs, mut bn) = (0.0, 0usize, 0.0, 0usize);
    for (a, &i) in live.iter().enumerate() {
        for &j in &live[a + 1..] {
            let s = cosine_similarity(embeddings.row(i), embeddings.row(j))?;
            if groups[i] == groups[j] {
                ws += s;
                wn += 1;
            } else {
                bs += s;
                bn += 1;
            }
        }
    }
    if wn == 0 || bn == 0 {
        return Err(Error::Empty("within-group or between-group pairs"));
    }
    Ok(CosineSeparation {
        within: ws / wn as f64,
        between: bs / bn as f64,
    })
}

/// Fraction of items whose cluster maps to their group under the best
/// one-to-one matching of clusters to groups.
///
/// Exact; solved by dynamic programming over subsets of groups, so at most
/// 20 distinct groups are supported.
pub fn best_match_agreement(clusters: &[usize], groups: &[usize]) -> Result<f64> {
    if clusters.len() != groups.len() {
        return Err(Error::dim("cluster and group label counts differ"));
    }
    if clusters.is_empty() {
        return Err(Error::Empty("labels"));
    }
    let k = clusters.iter().max().map_or(0, |m| m + 1);
    let g = groups.iter().max().map_or(0, |m| m + 1);
    if g > 20 {
        return Err(Error::config(format!(
            "{g} groups exceed the matching limit of 20"
        )));
    }
    let mut table = vec![vec![0usize; g]; k];
    for (&c, &gr) in clusters.iter().zip(groups) {
        table[c][gr] += 1;
    }
    // best[mask] = most items matched using exactly the groups in `mask`
    let mut best = vec![None::<usize>; 1 << g];
    best[0] = Some(0);
    for row in &table {
        let prev = best.clone();
        for (mask, v) in prev.iter().enumerate() {
            let Some(v) = *v else { continue };
            for (gr, &n) in row.iter().enumerate() {
                if mask & (1 << gr) == 0 {
                    let m = mask | (1 << gr);
                    best[m] = Some(best[m].map_or(v + n, |b| b.max(v + n)));
                }
            }
        }
    }
    let matched = best.iter().flatten().max().copied().unwrap_or(0);
    Ok(matched as f64 / clusters.len() as f64)
}

/// Share of `retrieved` items for which `relevant` holds; `None` for an
/// empty retrieval.
pub fn precision(retrieved: &[usize], relevant: impl Fn(usize) -> bool) -> Option<f64> {
    if retrieved.is_empty() {
        return None;
    }
    Some(retrieved.iter().filter(|&&i| relevant(i)).count() as f64 / retrieved.len() as f64)
}

pub fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn agreement_is_permutation_invariant() {
        let groups = [0, 0, 1, 1, 2, 2];
        assert_eq!(
            best_match_agreement(&[2, 2, 0, 0, 1, 1], &groups).unwrap(),
            1.0
        );
        assert_eq!(
            best_match_agreement(&[0, 0, 0, 0, 0, 0], &groups).unwrap(),
            2.0 / 6.0
        );
        assert_eq!(
            best_match_agreement(&[1, 1, 1, 0, 2, 2], &groups).unwrap(),
            5.0 / 6.0
        );
        assert!(best_match_agreement(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn agreement_matches_brute_force_over_permutations() {
        let clusters = [0, 1, 2, 2, 1, 0, 0, 2, 1, 1];
        let groups = [1, 1, 0, 2, 2, 0, 1, 0, 2, 2];
        let perms = [
            [0, 1, 2],
            [0, 2, 1],
            [1, 0, 2],
            [1, 2, 0],
            [2, 0, 1],
            [2, 1, 0],
        ];
        let brute = perms
            .iter()
            .map(|p| {
                clusters
                    .iter()
                    .zip(&groups)
                    .filter(|&(&c, &g)| p[c] == g)
                    .count()
            })
            .max()
            .unwrap();
        assert_eq!(
            best_match_agreement(&clusters, &groups).unwrap(),
            brute as f64 / 10.0
        );
    }

    #[test]
    fn separation_of_two_axes() {
        let m = Matrix::from_rows(&[
            vec![1.0, 0.0],
            vec![2.0, 0.0],
            vec![0.0, 1.0],
            vec![0.0, 3.0],
        ])
        .unwrap();
        let s = cosine_separation(&m, &[0, 0, 1, 1]).unwrap();
        assert_eq!(s.within, 1.0);
        assert_eq!(s.between, 0.0);
        assert_eq!(s.gap(), 1.0);
    }

    #[test]
    fn precision_and_mean() {
        assert_eq!(precision(&[1, 2, 3, 4], |i| i % 2 == 0), Some(0.5));
        assert_eq!(precision(&[], |_| true), None);
        assert_eq!(mean(&[1.0, 2.0]), Some(1.5));
        assert_eq!(mean(&[]), None);
    }
}
