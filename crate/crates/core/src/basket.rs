//! Cosine-similarity queries over an embedding matrix and market-basket
//! generation from them.
//!
//! All scans are exhaustive. The cached row norms only save recomputation;
//! every similarity is still `a.b / (|a| |b|)` evaluated in the same order as
//! [`cosine_similarity`], so cached and uncached answers agree exactly.

use serde::{Deserialize, Serialize};

use crate::concepts::ConceptModel;
use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::numkit::{self, Matrix};

/// `a.b / (|a| |b|)`, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim(format!(
            "vectors of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    cosine_with_norms(a, numkit::norm(a), b, numkit::norm(b))
}

fn cosine_with_norms(a: &[f64], na: f64, b: &[f64], nb: f64) -> Result<f64> {
    if na == 0.0 || nb == 0.0 {
        return Err(Error::config("cosine similarity of a zero vector"));
    }
    Ok((numkit::dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// A product embedding matrix with cached row norms.
#[derive(Debug, Clone)]
pub struct EmbeddingSpace {
    matrix: Matrix,
    norms: Vec<f64>,
    execution: Execution,
}

const SCAN_CHUNK: usize = 1024;

impl EmbeddingSpace {
    pub fn new(matrix: Matrix) -> Result<Self> {
        if !matrix.is_finite() {
            return Err(Error::NonFinite("embedding space"));
        }
        let norms = matrix.iter_rows().map(numkit::norm).collect();
        Ok(EmbeddingSpace {
            matrix,
            norms,
            execution: Execution::default(),
        })
    }

    pub fn with_execution(mut self, execution: Execution) -> Self {
        self.execution = execution;
        self
    }

    pub fn len(&self) -> usize {
        self.matrix.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn norm(&self, id: usize) -> f64 {
        self.norms[id]
    }

    /// Rows with zero length have no direction and never appear in results.
    pub fn is_zero(&self, id: usize) -> bool {
        self.norms[id] == 0.0
    }

    pub fn row(&self, id: usize) -> Result<&[f64]> {
        if id >= self.len() {
            return Err(Error::OutOfRange {
                index: id,
                len: self.len(),
            });
        }
        Ok(self.matrix.row(id))
    }

    /// Every non-zero row except those in `exclude`, ranked by cosine to `v`:
    /// descending similarity, then ascending id.
    pub fn rank(&self, v: &[f64], exclude: &[usize]) -> Result<Vec<(usize, f64)>> {
        if v.len() != self.dim() {
            return Err(Error::dim(format!(
                "query has {} components, space has {}",
                v.len(),
                self.dim()
            )));
        }
        let nv = numkit::norm(v);
        if nv == 0.0 {
            return Err(Error::config("query vector has zero norm"));
        }
        let ids: Vec<usize> = (0..self.len()).collect();
        let mut scored: Vec<(usize, f64)> = self
            .execution
            .map_chunks(&ids, SCAN_CHUNK, |chunk| {
                chunk
                    .iter()
                    .filter(|&&i| !self.is_zero(i) && !exclude.contains(&i))
                    .map(|&i| {
                        let s = cosine_with_norms(v, nv, self.matrix.row(i), self.norms[i])
                            .expect("zero rows are filtered out");
                        (i, s)
                    })
                    .collect::<Vec<_>>()
            })
            .into_iter()
            .flatten()
            .collect();
        // scores are finite, and -0.0 must tie with 0.0
        scored.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .expect("finite similarities")
                .then(a.0.cmp(&b.0))
        });
        Ok(scored)
    }

    /// The `k` products most similar to `query`, excluding itself.
    pub fn top_k_similar(&self, query: usize, k: usize) -> Result<Vec<(usize, f64)>> {
        if k == 0 {
            return Err(Error::config("k must be >= 1"));
        }
        let mut ranked = self.rank(self.row(query)?, &[query])?;
        ranked.truncate(k);
        Ok(ranked)
    }

    /// Mean of the given rows.
    pub fn combine_embeddings(&self, ids: &[usize]) -> Result<Vec<f64>> {
        if ids.is_empty() {
            return Err(Error::Empty("product ids to combine"));
        }
        let mut out = vec![0.0; self.dim()];
        for &id in ids {
            for (o, x) in out.iter_mut().zip(self.row(id)?) {
                *o += x;
            }
        }
        let n = ids.len() as f64;
        out.iter_mut().for_each(|o| *o /= n);
        Ok(out)
    }
}

/// One member of a generated basket.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Complement {
    pub product: usize,
    pub similarity: f64,
    pub concept: usize,
}

/// Market basket for `query`: rank all products by cosine, keep the top `k`,
/// then drop those in the query's concept.
///
/// The literal procedure can return fewer than `k` products. With
/// `over_fetch` the scan continues down the ranking until `k` products
/// survive the concept filter or the space runs out.
pub fn market_basket(
    space: &EmbeddingSpace,
    concepts: &ConceptModel,
    query: usize,
    k: usize,
    over_fetch: bool,
) -> Result<Vec<Complement>> {
    if k == 0 {
        return Err(Error::config("k must be >= 1"));
    }
    if concepts.dim() != space.dim() {
        return Err(Error::dim(format!(
            "concepts are {}-dimensional, the space is {}-dimensional",
            concepts.dim(),
            space.dim()
        )));
    }
    if concepts.assignment.len() != space.len() {
        return Err(Error::dim(format!(
            "concept model covers {} products, the space has {}",
            concepts.assignment.len(),
            space.len()
        )));
    }
    let own = concepts.concept_of(query)?;
    let mut ranked = space.rank(space.row(query)?, &[query])?;
    if !over_fetch {
        ranked.truncate(k);
    }
    Ok(ranked
        .into_iter()
        .map(|(product, similarity)| Complement {
            product,
            similarity,
            concept: concepts.assignment[product],
        })
        .filter(|c| c.concept != own)
        .take(k)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasketEntry {
    pub product: String,
    pub similarity: f64,
    pub concept: usize,
}

/// JSON shape of a basket query answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasketReport {
    pub query: String,
    pub k: usize,
    pub basket: Vec<BasketEntry>,
}

impl BasketReport {
    pub fn new(query: &str, k: usize, basket: &[Complement], vocab: &Vocabulary) -> Result<Self> {
        let basket = basket
            .iter()
            .map(|c| {
                let product = vocab.product_token(c.product).ok_or(Error::OutOfRange {
                    index: c.product,
                    len: vocab.n_products(),
                })?;
                Ok(BasketEntry {
                    product: product.to_string(),
                    similarity: c.similarity,
                    concept: c.concept,
                })
            })
            .collect::<Result<_>>()?;
        Ok(BasketReport {
            query: query.to_string(),
            k,
            basket,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn four_products() -> EmbeddingSpace {
        EmbeddingSpace::new(
            Matrix::from_rows(&[
                vec![1.0, 0.0],
                vec![0.8, 0.6],
                vec![0.0, 1.0],
                vec![-1.0, 0.0],
            ])
            .unwrap(),
        )
        .unwrap()
    }

    fn two_concepts() -> ConceptModel {
        ConceptModel {
            centroids: Matrix::from_rows(&[vec![0.9, 0.3], vec![-0.5, 0.5]]).unwrap(),
            assignment: vec![0, 0, 1, 1],
            inertia: 0.0,
            inertia_history: vec![],
            k: 2,
            seed: 0,
            iterations_run: 0,
            normalized: false,
        }
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine_similarity(&[3.0, 4.0], &[3.0, 4.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let s = cosine_similarity(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((s - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!(cosine_similarity(&[0.0, 0.0], &[1.0, 1.0]).is_err());
        assert!(cosine_similarity(&[1.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn top_k_examples() {
        let s = four_products();
        let top = s.top_k_similar(0, 2).unwrap();
        assert_eq!(top.iter().map(|t| t.0).collect::<Vec<_>>(), vec![1, 2]);
        assert!((top[0].1 - 0.8).abs() < 1e-12);
        assert_eq!(top[1].1, 0.0);
        assert_eq!(s.top_k_similar(0, 10).unwrap().len(), 3);
        assert!(s.top_k_similar(9, 1).is_err());
        assert!(s.top_k_similar(0, 0).is_err());

        let twins = EmbeddingSpace::new(
            Matrix::from_rows(&[vec![1.0, 1.0], vec![0.0, 1.0], vec![0.0, 1.0]]).unwrap(),
        )
        .unwrap();
        assert_eq!(twins.top_k_similar(0, 1).unwrap()[0].0, 1);
    }

    #[test]
    fn literal_and_over_fetch_baskets() {
        let s = four_products();
        let c = two_concepts();
        let lit = market_basket(&s, &c, 0, 2, false).unwrap();
        assert_eq!(lit.iter().map(|x| x.product).collect::<Vec<_>>(), vec![2]);
        let over = market_basket(&s, &c, 0, 2, true).unwrap();
        assert_eq!(
            over.iter().map(|x| x.product).collect::<Vec<_>>(),
            vec![2, 3]
        );
        // B's only top-1 neighbour is A, which shares its concept
        assert!(market_basket(&s, &c, 1, 1, false).unwrap().is_empty());
        assert!(market_basket(&s, &c, 7, 1, false).is_err());
    }

    #[test]
    fn concept_dimension_must_match() {
        let mut c = two_concepts();
        c.centroids = Matrix::zeros(2, 3);
        assert!(market_basket(&four_products(), &c, 0, 2, false).is_err());
    }

    #[test]
    fn combine_is_the_mean() {
        let s = four_products();
        assert_eq!(s.combine_embeddings(&[1]).unwrap(), vec![0.8, 0.6]);
        assert_eq!(s.combine_embeddings(&[0, 3]).unwrap(), vec![0.0, 0.0]);
        assert!(s.combine_embeddings(&[]).is_err());
        assert!(s.combine_embeddings(&[4]).is_err());
    }

    #[test]
    fn report_json_shape() {
        let s = four_products();
        let vocab = Vocabulary::from_products(&["A", "B", "C", "D"]);
        let b = market_basket(&s, &two_concepts(), 0, 2, false).unwrap();
        let r = BasketReport::new("A", 2, &b, &vocab).unwrap();
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        assert_eq!(v["query"], "A");
        assert_eq!(v["k"], 2);
        assert_eq!(v["basket"][0]["product"], "C");
        assert_eq!(v["basket"][0]["concept"], 1);
    }

    fn brute_top_k(m: &Matrix, q: usize, k: usize) -> Vec<(usize, f64)> {
        let mut all: Vec<(usize, f64)> = (0..m.rows())
            .filter(|&i| i != q && numkit::norm(m.row(i)) > 0.0)
            .map(|i| (i, cosine_similarity(m.row(q), m.row(i)).unwrap()))
            .collect();
        all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        all.truncate(k);
        all
    }

    proptest! {
        #[test]
        fn top_k_equals_brute_force(
            rows in prop::collection::vec(prop::collection::vec(-3i32..4, 3), 2..30),
            k in 1usize..8,
        ) {
            // small integer coordinates make exact ties common
            let m = Matrix::from_rows(
                &rows.iter().map(|r| r.iter().map(|&x| x as f64).collect()).collect::<Vec<_>>(),
            ).unwrap();
            let space = EmbeddingSpace::new(m.clone()).unwrap();
            for q in (0..m.rows()).filter(|&q| !space.is_zero(q)) {
                let fast = space.top_k_similar(q, k).unwrap();
                prop_assert_eq!(&fast, &brute_top_k(&m, q, k));
                let seq = space.clone().with_execution(Execution::Sequential).top_k_similar(q, k).unwrap();
                prop_assert_eq!(fast, seq);
            }
        }

        #[test]
        fn cosine_is_scale_invariant(
            a in prop::collection::vec(-10.0f64..10.0, 4),
            b in prop::collection::vec(-10.0f64..10.0, 4),
            alpha in 1e-3f64..1e3,
        ) {
            prop_assume!(numkit::norm(&a) > 1e-6 && numkit::norm(&b) > 1e-6);
            let scaled: Vec<f64> = a.iter().map(|x| alpha * x).collect();
            let s1 = cosine_similarity(&a, &b).unwrap();
            let s2 = cosine_similarity(&scaled, &b).unwrap();
            prop_assert!((s1 - s2).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&s1));
        }

        #[test]
        fn literal_basket_respects_filters(
            rows in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 2), 3..20),
            assign_seed in prop::collection::vec(0usize..3, 20),
            k in 1usize..6,
        ) {
            let p = rows.len();
            let m = Matrix::from_rows(&rows).unwrap();
            prop_assume!(m.iter_rows().all(|r| numkit::norm(r) > 1e-9));
            let space = EmbeddingSpace::new(m).unwrap();
            let concepts = ConceptModel {
                centroids: Matrix::zeros(3, 2),
                assignment: assign_seed[..p].to_vec(),
                inertia: 0.0,
                inertia_history: vec![],
                k: 3,
                seed: 0,
                iterations_run: 0,
                normalized: false,
            };
            for q in 0..p {
                for over in [false, true] {
                    let b = market_basket(&space, &concepts, q, k, over).unwrap();
                    prop_assert!(b.len() <= k);
                    prop_assert!(b.iter().all(|c| c.product != q));
                    prop_assert!(b.iter().all(|c| c.concept != concepts.assignment[q]));
                }
            }
        }
    }
}
