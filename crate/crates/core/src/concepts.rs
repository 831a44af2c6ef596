//! K-means "concept vectors" over product embeddings.
//!
//! Seeding is k-means++, refinement is plain Lloyd iteration. A cluster
//! that loses all its members is handed the point farthest from its
//! current centroid, so a fitted model never has empty clusters.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::numkit::{self, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KMeansConfig {
    pub k: usize,
    pub seed: u64,
    pub max_iters: usize,
    /// Scale every row to unit length before clustering.
    pub normalize: bool,
    pub execution: Execution,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        KMeansConfig {
            k: 5,
            seed: 42,
            max_iters: 300,
            normalize: false,
            execution: Execution::Sequential,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptModel {
    pub centroids: Matrix,
    /// Cluster of every product row.
    pub assignment: Vec<usize>,
    pub inertia: f64,
    /// Inertia after every Lloyd update.
    pub inertia_history: Vec<f64>,
    pub k: usize,
    pub seed: u64,
    pub iterations_run: usize,
    pub normalized: bool,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid, lowest id on ties.
fn nearest(centroids: &Matrix, v: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, row) in centroids.iter_rows().enumerate() {
        let d = sq_dist(row, v);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn normalized_rows(m: &Matrix) -> Result<Matrix> {
    let mut out = m.clone();
    for i in 0..out.rows() {
        let n = numkit::norm(out.row(i));
        if n == 0.0 {
            return Err(Error::config(format!(
                "row {i} has zero norm and cannot be normalised"
            )));
        }
        out.row_mut(i).iter_mut().for_each(|x| *x /= n);
    }
    Ok(out)
}

fn plus_plus(points: &Matrix, k: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let p = points.rows();
    let mut chosen = vec![rng.gen_range(0..p)];
    let mut d2: Vec<f64> = (0..p)
        .map(|i| sq_dist(points.row(i), points.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.gen::<f64>() * total;
            let mut run = 0.0;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                run += d;
                if d > 0.0 && run > target {
                    pick = Some(i);
                    break;
                }
            }
            // rounding can leave `target` just past the final partial sum
            pick.unwrap_or_else(|| d2.iter().rposition(|&d| d > 0.0).unwrap_or(0))
        } else {
            // every point coincides with a centre already; take unused rows in order
            (0..p).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), points.row(next)));
        }
    }
    let rows: Vec<Vec<f64>> = chosen.iter().map(|&i| points.row(i).to_vec()).collect();
    Matrix::from_rows(&rows).expect("centroid rows share the embedding width")
}

fn means(points: &Matrix, assignment: &[usize], k: usize) -> Matrix {
    let mut c = Matrix::zeros(k, points.cols());
    let mut counts = vec![0usize; k];
    for (i, &a) in assignment.iter().enumerate() {
        counts[a] += 1;
        for (s, x) in c.row_mut(a).iter_mut().zip(points.row(i)) {
            *s += x;
        }
    }
    for (a, &n) in counts.iter().enumerate() {
        if n > 0 {
            c.row_mut(a).iter_mut().for_each(|s| *s /= n as f64);
        }
    }
    c
}

fn inertia(points: &Matrix, centroids: &Matrix, assignment: &[usize]) -> f64 {
    assignment
        .iter()
        .enumerate()
        .map(|(i, &a)| sq_dist(points.row(i), centroids.row(a)))
        .sum()
}

/// Give each empty cluster the point farthest from its centroid, taken
/// from a cluster that can spare it.
fn repair_empty(points: &Matrix, centroids: &mut Matrix, assignment: &mut [usize], k: usize) {
    let mut counts = vec![0usize; k];
    for &a in assignment.iter() {
        counts[a] += 1;
    }
    for c in 0..k {
        if counts[c] > 0 {
            continue;
        }
        let mut far: Option<(usize, f64)> = None;
        for (i, &a) in assignment.iter().enumerate() {
            if counts[a] < 2 {
                continue;
            }
            let d = sq_dist(points.row(i), centroids.row(a));
            if far.is_none_or(|(_, best)| d > best) {
                far = Some((i, d));
            }
        }
        let Some((i, _)) = far else { break };
        counts[assignment[i]] -= 1;
        counts[c] = 1;
        assignment[i] = c;
        centroids.row_mut(c).copy_from_slice(points.row(i));
    }
}

pub fn kmeans_fit(embeddings: &Matrix, config: &KMeansConfig) -> Result<ConceptModel> {
    let (p, _) = embeddings.shape();
    let k = config.k;
    if k < 1 || k > p {
        return Err(Error::config(format!("k must be in 1..={p}, got {k}")));
    }
    if config.max_iters == 0 {
        return Err(Error::config("max_iters must be >= 1"));
    }
    if !embeddings.is_finite() {
        return Err(Error::NonFinite("embeddings to cluster"));
    }
    let owned;
    let points = if config.normalize {
        owned = normalized_rows(embeddings)?;
        &owned
    } else {
        embeddings
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut centroids = plus_plus(points, k, &mut rng);
    let assign_all = |c: &Matrix| -> Vec<usize> {
        config
            .execution
            .map_range(p, |i| nearest(c, points.row(i)).0)
    };

    let mut assignment: Vec<usize> = Vec::new();
    let mut history = Vec::new();
    let mut converged = false;
    for _ in 0..config.max_iters {
        let mut next = assign_all(&centroids);
        repair_empty(points, &mut centroids, &mut next, k);
        if next == assignment {
            converged = true;
            break;
        }
        assignment = next;
        centroids = means(points, &assignment, k);
        history.push(inertia(points, &centroids, &assignment));
    }
    let iterations_run = history.len();
    if !converged {
        // keep the invariant that every row sits with its nearest centroid
        let last = assign_all(&centroids);
        let mut seen = vec![false; k];
        last.iter().for_each(|&a| seen[a] = true);
        if seen.iter().all(|&s| s) {
            assignment = last;
        }
    }
    let inertia = inertia(points, &centroids, &assignment);
    log::debug!("k-means k={k}: {iterations_run} iterations, inertia {inertia:.6}");
    Ok(ConceptModel {
        centroids,
        assignment,
        inertia,
        inertia_history: history,
        k,
        seed: config.seed,
        iterations_run,
        normalized: config.normalize,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    kind: String,
    k: usize,
    seed: u64,
    iterations_run: usize,
    normalized: bool,
    inertia: f64,
    inertia_history: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct AssignmentRow {
    product: String,
    cluster: usize,
}

impl ConceptModel {
    pub fn dim(&self) -> usize {
        self.centroids.cols()
    }

    /// Nearest centroid to `v` (after unit scaling if the model was fitted
    /// on normalised rows); ties go to the lowest cluster id.
    pub fn assign_concept(&self, v: &[f64]) -> Result<usize> {
        if v.len() != self.dim() {
            return Err(Error::dim(format!(
                "vector has {} components, centroids have {}",
                v.len(),
                self.dim()
            )));
        }
        if self.normalized {
            let n = numkit::norm(v);
            if n == 0.0 {
                return Err(Error::config("cannot normalise a zero vector"));
            }
            let u: Vec<f64> = v.iter().map(|x| x / n).collect();
            return Ok(nearest(&self.centroids, &u).0);
        }
        Ok(nearest(&self.centroids, v).0)
    }

    /// Cluster of product `id`.
    pub fn concept_of(&self, id: usize) -> Result<usize> {
        self.assignment.get(id).copied().ok_or(Error::OutOfRange {
            index: id,
            len: self.assignment.len(),
        })
    }

    /// Writes `centroids.bin`, `assignment.csv` and `meta.json`.
    pub fn save(&self, dir: &Path, vocab: &Vocabulary) -> Result<()> {
        if vocab.n_products() != self.assignment.len() {
            return Err(Error::dim(format!(
                "{} assignments for {} products",
                self.assignment.len(),
                vocab.n_products()
            )));
        }
        checkpoint::create_dir(dir)?;
        checkpoint::write_tensor(dir, "centroids", &self.centroids)?;
        let path = dir.join("assignment.csv");
        let mut w = csv::Writer::from_writer(checkpoint::create_file(&path)?);
        for (token, &cluster) in vocab.product_tokens().iter().zip(&self.assignment) {
            w.serialize(AssignmentRow {
                product: token.clone(),
                cluster,
            })?;
        }
        w.flush()?;
        checkpoint::write_meta(
            dir,
            &Meta {
                kind: "concepts".into(),
                k: self.k,
                seed: self.seed,
                iterations_run: self.iterations_run,
                normalized: self.normalized,
                inertia: self.inertia,
                inertia_history: self.inertia_history.clone(),
            },
        )
    }

    pub fn load(dir: &Path, vocab: &Vocabulary) -> Result<Self> {
        let meta: Meta = checkpoint::read_meta(dir)?;
        if meta.kind != "concepts" {
            return Err(Error::config(format!(
                "{} is a {} checkpoint",
                dir.display(),
                meta.kind
            )));
        }
        let centroids = checkpoint::read_tensor(dir, "centroids")?;
        if centroids.rows() != meta.k {
            return Err(Error::dim("centroid count disagrees with meta.json"));
        }
        let mut assignment = vec![usize::MAX; vocab.n_products()];
        let mut r = csv::Reader::from_reader(checkpoint::open_file(&dir.join("assignment.csv"))?);
        for row in r.deserialize() {
            let row: AssignmentRow = row?;
            let id = vocab
                .product(&row.product)
                .ok_or_else(|| Error::UnknownToken(row.product.clone()))?;
            if row.cluster >= meta.k {
                return Err(Error::OutOfRange {
                    index: row.cluster,
                    len: meta.k,
                });
            }
            assignment[id] = row.cluster;
        }
        if assignment.contains(&usize::MAX) {
            return Err(Error::config("assignment.csv does not cover every product"));
        }
        Ok(ConceptModel {
            centroids,
            assignment,
            inertia: meta.inertia,
            inertia_history: meta.inertia_history,
            k: meta.k,
            seed: meta.seed,
            iterations_run: meta.iterations_run,
            normalized: meta.normalized,
        })
    }
}
