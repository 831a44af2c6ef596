//! ProVe: product vectors from a weighted least-squares fit to the log of
//! distance-weighted co-occurrence scores.
//!
//! Every pair of positions `(a, b)` inside a receipt adds `1 / |a - b|` to the
//! score of the two products; the whole receipt is the context window and
//! a product never pairs with itself. The objective sums over both
//! orientations of every stored pair:
//!
//! ```text
//! J = sum_{i != j} f(X_ij) * (w_i . w~_j + b_i + b~_j - ln X_ij)^2
//! f(x) = min(1, (x / x_max)^alpha)
//! ```

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::atomic::AtomicU64;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cbow::cells as cell;
use crate::checkpoint;
use crate::corpus::{EncodedBasket, Vocabulary};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::numkit::{self, format_float, Matrix, Slots};
use crate::p2e::validate_adagrad;

/// Sparse symmetric co-occurrence scores, stored once per unordered pair
/// (`i < j`) and sorted.
#[derive(Debug, Clone, PartialEq)]
pub struct CooccurrenceTable {
    n_products: usize,
    entries: Vec<(u32, u32, f64)>,
}

impl CooccurrenceTable {
    /// Build from arbitrary `(i, j, x)` triples; orientation is normalised
    /// and repeated pairs are summed in input order.
    pub fn from_entries(n_products: usize, triples: &[(usize, usize, f64)]) -> Result<Self> {
        let mut acc: HashMap<(u32, u32), f64> = HashMap::new();
        for &(i, j, x) in triples {
            if i == j {
                return Err(Error::config(format!("diagonal entry ({i}, {i})")));
            }
            if i.max(j) >= n_products {
                return Err(Error::OutOfRange {
                    index: i.max(j),
                    len: n_products,
                });
            }
            if !(x.is_finite() && x > 0.0) {
                return Err(Error::config(format!(
                    "score for ({i}, {j}) must be positive"
                )));
            }
            *acc.entry(key(i, j)).or_insert(0.0) += x;
        }
        Ok(Self::from_map(n_products, acc))
    }

    fn from_map(n_products: usize, map: HashMap<(u32, u32), f64>) -> Self {
        let mut entries: Vec<_> = map.into_iter().map(|((i, j), x)| (i, j, x)).collect();
        entries.sort_unstable_by_key(|&(i, j, _)| (i, j));
        CooccurrenceTable {
            n_products,
            entries,
        }
    }

    pub fn n_products(&self) -> usize {
        self.n_products
    }

    /// Stored (upper-triangle) pairs.
    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `X(i, j) = X(j, i)`; zero when the pair never co-occurred.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return 0.0;
        }
        let k = key(i, j);
        self.entries
            .binary_search_by_key(&k, |&(a, b, _)| (a, b))
            .map_or(0.0, |pos| self.entries[pos].2)
    }

    /// `(i, j, X_ij)` with `i < j`, ascending.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.entries
            .iter()
            .map(|&(i, j, x)| (i as usize, j as usize, x))
    }

    /// Header `P nnz`, then one `i j X_ij` line per stored pair.
    pub fn write_text<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{} {}", self.n_products, self.nnz())?;
        for (i, j, x) in self.iter() {
            writeln!(w, "{i} {j} {}", format_float(x))?;
        }
        Ok(())
    }

    pub fn read_text<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines.next().ok_or(Error::Empty("co-occurrence file"))??;
        let bad = |line: usize, msg: &str| Error::Parse {
            line,
            msg: msg.to_string(),
        };
        let h: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| bad(1, "bad header")))
            .collect::<Result<_>>()?;
        let [p, nnz] = h[..] else {
            return Err(bad(1, "expected `P nnz` header"));
        };
        let mut triples = Vec::with_capacity(nnz);
        for (n, line) in lines.enumerate() {
            let line = line?;
            let f: Vec<&str> = line.split_whitespace().collect();
            let [i, j, x] = f[..] else {
                return Err(bad(n + 2, "expected `i j X`"));
            };
            let i = i.parse().map_err(|_| bad(n + 2, "bad row index"))?;
            let j = j.parse().map_err(|_| bad(n + 2, "bad column index"))?;
            let x = x.parse().map_err(|_| bad(n + 2, "bad score"))?;
            triples.push((i, j, x));
        }
        if triples.len() != nnz {
            return Err(bad(1, "header nnz disagrees with the body"));
        }
        Self::from_entries(p, &triples)
    }
}

fn key(i: usize, j: usize) -> (u32, u32) {
    (i.min(j) as u32, i.max(j) as u32)
}

const SHARD: usize = 512;

pub fn build_cooccurrence(baskets: &[EncodedBasket], vocab: &Vocabulary) -> CooccurrenceTable {
    build_cooccurrence_with(baskets, vocab.n_products(), Execution::default())
}

/// Baskets are split into fixed shards counted independently and merged in
/// shard order, so the table is identical for any thread count.
pub fn build_cooccurrence_with(
    baskets: &[EncodedBasket],
    n_products: usize,
    execution: Execution,
) -> CooccurrenceTable {
    let shards = execution.map_chunks(baskets, SHARD, |chunk| {
        let mut local: HashMap<(u32, u32), f64> = HashMap::new();
        for b in chunk {
            let items = &b.items;
            for a in 0..items.len() {
                for c in a + 1..items.len() {
                    if items[a] == items[c] {
                        continue;
                    }
                    *local.entry(key(items[a], items[c])).or_insert(0.0) += 1.0 / (c - a) as f64;
                }
            }
        }
        local
    });
    let mut shards = shards.into_iter();
    let mut total = shards.next().unwrap_or_default();
    for shard in shards {
        for (k, x) in shard {
            *total.entry(k).or_insert(0.0) += x;
        }
    }
    CooccurrenceTable::from_map(n_products, total)
}

/// The weighting function: `(x / x_max)^alpha` below the cap, 1 above it.
pub fn weight_f(x: f64, x_max: f64, alpha: f64) -> Result<f64> {
    if x.is_nan() || x <= 0.0 {
        return Err(Error::config(format!("weight_f needs x > 0, got {x}")));
    }
    Ok(if x < x_max {
        (x / x_max).powf(alpha)
    } else {
        1.0
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProVeConfig {
    pub dim: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub initial_accumulator: f64,
    pub x_max: f64,
    pub alpha: f64,
    pub seed: u64,
    pub execution: Execution,
    pub deterministic: bool,
}

impl Default for ProVeConfig {
    fn default() -> Self {
        ProVeConfig {
            dim: 128,
            epochs: 50,
            learning_rate: 1.0,
            initial_accumulator: 0.1,
            x_max: 100.0,
            alpha: 0.75,
            seed: 42,
            execution: Execution::default(),
            deterministic: true,
        }
    }
}

impl ProVeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.epochs == 0 {
            return Err(Error::config("prove dim and epochs must be >= 1"));
        }
        if self.x_max.is_nan() || self.x_max <= 0.0 || self.alpha.is_nan() || self.alpha <= 0.0 {
            return Err(Error::config("x_max and alpha must be positive"));
        }
        validate_adagrad(self.learning_rate, self.initial_accumulator)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProVeModel {
    pub w: Matrix,
    pub w_tilde: Matrix,
    pub b: Vec<f64>,
    pub b_tilde: Vec<f64>,
    pub config: ProVeConfig,
    /// Objective before the first epoch.
    pub initial_loss: f64,
    /// Objective after every epoch.
    pub loss_history: Vec<f64>,
    pub vocab_fingerprint: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProVeGradients {
    pub w: Matrix,
    pub w_tilde: Matrix,
    pub b: Vec<f64>,
    pub b_tilde: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    kind: String,
    n_products: usize,
    dim: usize,
    epochs: usize,
    seed: u64,
    learning_rate: f64,
    initial_accumulator: f64,
    x_max: f64,
    alpha: f64,
    vocab_hash: String,
    initial_loss: f64,
    loss_history: Vec<f64>,
}

impl ProVeModel {
    /// Vectors ~ `U(-0.5/D, 0.5/D)`, biases zero.
    pub fn init(n_products: usize, config: ProVeConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        Self::init_with(n_products, config, &mut rng)
    }

    fn init_with(n_products: usize, config: ProVeConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let half = 0.5 / d as f64;
        Ok(ProVeModel {
            w: Matrix::uniform(n_products, d, half, rng),
            w_tilde: Matrix::uniform(n_products, d, half, rng),
            b: vec![0.0; n_products],
            b_tilde: vec![0.0; n_products],
            config,
            initial_loss: f64::NAN,
            loss_history: Vec::new(),
            vocab_fingerprint: String::new(),
        })
    }

    pub fn n_products(&self) -> usize {
        self.w.rows()
    }

    /// `W`, `W~`, `b`, `b~`.
    pub fn params_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.w.as_mut_slice(),
            self.w_tilde.as_mut_slice(),
            &mut self.b,
            &mut self.b_tilde,
        ]
    }

    /// Delivered vectors: `W + W~`.
    pub fn final_embeddings(&self) -> Matrix {
        self.w
            .add(&self.w_tilde)
            .expect("W and W~ always share a shape")
    }

    /// `w_i . w~_j + b_i + b~_j - ln X_ij` for one orientation.
    pub fn residual(&self, i: usize, j: usize, x: f64) -> f64 {
        numkit::dot(self.w.row(i), self.w_tilde.row(j)) + self.b[i] + self.b_tilde[j] - x.ln()
    }

    pub fn loss(&self, table: &CooccurrenceTable) -> Result<f64> {
        Ok(self.loss_and_grads(table)?.0)
    }

    /// The objective and its gradient for every parameter.
    pub fn loss_and_grads(&self, table: &CooccurrenceTable) -> Result<(f64, ProVeGradients)> {
        if table.is_empty() {
            return Err(Error::Empty("co-occurrence table"));
        }
        if table.n_products() != self.n_products() {
            return Err(Error::dim(format!(
                "table over {} products, model has {}",
                table.n_products(),
                self.n_products()
            )));
        }
        let (p, d) = self.w.shape();
        let mut g = ProVeGradients {
            w: Matrix::zeros(p, d),
            w_tilde: Matrix::zeros(p, d),
            b: vec![0.0; p],
            b_tilde: vec![0.0; p],
        };
        let mut j_total = 0.0;
        for (i, j, x) in table.iter() {
            let fx = weight_f(x, self.config.x_max, self.config.alpha)?;
            for (a, c) in [(i, j), (j, i)] {
                let diff = self.residual(a, c, x);
                j_total += fx * diff * diff;
                let s = 2.0 * fx * diff;
                for k in 0..d {
                    g.w.row_mut(a)[k] += s * self.w_tilde.get(c, k);
                    g.w_tilde.row_mut(c)[k] += s * self.w.get(a, k);
                }
                g.b[a] += s;
                g.b_tilde[c] += s;
            }
        }
        Ok((j_total, g))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        checkpoint::create_dir(dir)?;
        checkpoint::write_tensor(dir, "w", &self.w)?;
        checkpoint::write_tensor(dir, "w_tilde", &self.w_tilde)?;
        checkpoint::write_vector(dir, "b", &self.b)?;
        checkpoint::write_vector(dir, "b_tilde", &self.b_tilde)?;
        let c = &self.config;
        checkpoint::write_meta(
            dir,
            &Meta {
                kind: "prove".into(),
                n_products: self.n_products(),
                dim: c.dim,
                epochs: c.epochs,
                seed: c.seed,
                learning_rate: c.learning_rate,
                initial_accumulator: c.initial_accumulator,
                x_max: c.x_max,
                alpha: c.alpha,
                vocab_hash: self.vocab_fingerprint.clone(),
                initial_loss: self.initial_loss,
                loss_history: self.loss_history.clone(),
            },
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: Meta = checkpoint::read_meta(dir)?;
        if meta.kind != "prove" {
            return Err(Error::config(format!(
                "{} is a {} checkpoint",
                dir.display(),
                meta.kind
            )));
        }
        let m = ProVeModel {
            w: checkpoint::read_tensor(dir, "w")?,
            w_tilde: checkpoint::read_tensor(dir, "w_tilde")?,
            b: checkpoint::read_vector(dir, "b")?,
            b_tilde: checkpoint::read_vector(dir, "b_tilde")?,
            config: ProVeConfig {
                dim: meta.dim,
                epochs: meta.epochs,
                learning_rate: meta.learning_rate,
                initial_accumulator: meta.initial_accumulator,
                x_max: meta.x_max,
                alpha: meta.alpha,
                seed: meta.seed,
                ..Default::default()
            },
            initial_loss: meta.initial_loss,
            loss_history: meta.loss_history,
            vocab_fingerprint: meta.vocab_hash,
        };
        let shape = (meta.n_products, meta.dim);
        if m.w.shape() != shape
            || m.w_tilde.shape() != shape
            || m.b.len() != shape.0
            || m.b_tilde.len() != shape.0
        {
            return Err(Error::dim(format!(
                "{}: tensors disagree with meta.json",
                dir.display()
            )));
        }
        Ok(m)
    }

    pub fn export_text<W: Write>(&self, w: W, vocab: &Vocabulary) -> Result<()> {
        checkpoint::write_embedding_text(w, vocab.product_tokens(), &self.final_embeddings())
    }
}

struct Tables<'a, S: ?Sized> {
    w: &'a S,
    w_acc: &'a S,
    wt: &'a S,
    wt_acc: &'a S,
    b: &'a S,
    b_acc: &'a S,
    bt: &'a S,
    bt_acc: &'a S,
    dim: usize,
}

impl<S: Slots + ?Sized> Tables<'_, S> {
    fn pair_step(&self, i: usize, j: usize, ln_x: f64, fx: f64, lr: f64) {
        let d = self.dim;
        for (a, c) in [(i, j), (j, i)] {
            let mut dot = 0.0;
            for k in 0..d {
                dot += self.w.get(a * d + k) * self.wt.get(c * d + k);
            }
            let diff = dot + self.b.get(a) + self.bt.get(c) - ln_x;
            let s = 2.0 * fx * diff;
            for k in 0..d {
                let wa = self.w.get(a * d + k);
                let wc = self.wt.get(c * d + k);
                self.w.adagrad(self.w_acc, a * d + k, s * wc, lr);
                self.wt.adagrad(self.wt_acc, c * d + k, s * wa, lr);
            }
            self.b.adagrad(self.b_acc, a, s, lr);
            self.bt.adagrad(self.bt_acc, c, s, lr);
        }
    }

    fn run(&self, pairs: &[(usize, usize, f64, f64)], order: &[usize], lr: f64) {
        for &n in order {
            let (i, j, ln_x, fx) = pairs[n];
            self.pair_step(i, j, ln_x, fx, lr);
        }
    }
}

const HOGWILD_CHUNK: usize = 1024;

/// Fit the model with per-pair Adagrad over shuffled stored pairs.
pub fn train_prove(table: &CooccurrenceTable, config: ProVeConfig) -> Result<ProVeModel> {
    config.validate()?;
    if table.is_empty() {
        return Err(Error::Empty("co-occurrence table"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = ProVeModel::init_with(table.n_products(), config, &mut rng)?;
    let (cfg, d) = (model.config.clone(), model.config.dim);
    let pairs: Vec<(usize, usize, f64, f64)> = table
        .iter()
        .map(|(i, j, x)| Ok((i, j, x.ln(), weight_f(x, cfg.x_max, cfg.alpha)?)))
        .collect::<Result<_>>()?;
    model.initial_loss = objective(&model, &pairs, cfg.execution);

    let n_params = model.w.as_slice().len();
    let p = model.n_products();
    let mut acc = [
        vec![cfg.initial_accumulator; n_params],
        vec![cfg.initial_accumulator; n_params],
        vec![cfg.initial_accumulator; p],
        vec![cfg.initial_accumulator; p],
    ];
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let lr = cfg.learning_rate;

    if cfg.deterministic || !cfg.execution.is_parallel() {
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            {
                let [aw, awt, ab, abt] = &mut acc;
                let ProVeModel {
                    w,
                    w_tilde,
                    b,
                    b_tilde,
                    ..
                } = &mut model;
                let t = Tables {
                    w: cell(w.as_mut_slice()),
                    w_acc: cell(aw),
                    wt: cell(w_tilde.as_mut_slice()),
                    wt_acc: cell(awt),
                    b: cell(b),
                    b_acc: cell(ab),
                    bt: cell(b_tilde),
                    bt_acc: cell(abt),
                    dim: d,
                };
                t.run(&pairs, &order, lr);
            }
            let j = objective(&model, &pairs, cfg.execution);
            model.loss_history.push(j);
        }
    } else {
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let atoms: Vec<Vec<AtomicU64>> = [
                model.w.as_slice(),
                model.w_tilde.as_slice(),
                &model.b[..],
                &model.b_tilde[..],
            ]
            .into_iter()
            .chain(acc.iter().map(Vec::as_slice))
            .map(numkit::to_atomic)
            .collect();
            {
                let t = Tables::<[AtomicU64]> {
                    w: &atoms[0],
                    wt: &atoms[1],
                    b: &atoms[2],
                    bt: &atoms[3],
                    w_acc: &atoms[4],
                    wt_acc: &atoms[5],
                    b_acc: &atoms[6],
                    bt_acc: &atoms[7],
                    dim: d,
                };
                cfg.execution
                    .map_chunks(&order, HOGWILD_CHUNK, |chunk| t.run(&pairs, chunk, lr));
            }
            let mut it = atoms.into_iter().map(numkit::from_atomic);
            model
                .w
                .as_mut_slice()
                .copy_from_slice(&it.next().unwrap_or_default());
            model
                .w_tilde
                .as_mut_slice()
                .copy_from_slice(&it.next().unwrap_or_default());
            model.b = it.next().unwrap_or_default();
            model.b_tilde = it.next().unwrap_or_default();
            for a in acc.iter_mut() {
                *a = it.next().unwrap_or_default();
            }
            let j = objective(&model, &pairs, cfg.execution);
            model.loss_history.push(j);
        }
    }
    for (epoch, j) in model.loss_history.iter().enumerate() {
        log::info!("prove epoch {:>3}: J = {j:.6}", epoch + 1);
    }
    if !model.w.is_finite() || !model.w_tilde.is_finite() {
        return Err(Error::NonFinite("prove vectors after training"));
    }
    Ok(model)
}

const OBJECTIVE_CHUNK: usize = 4096;

fn objective(model: &ProVeModel, pairs: &[(usize, usize, f64, f64)], execution: Execution) -> f64 {
    execution
        .map_chunks(pairs, OBJECTIVE_CHUNK, |chunk| {
            chunk
                .iter()
                .map(|&(i, j, ln_x, fx)| {
                    let r1 = numkit::dot(model.w.row(i), model.w_tilde.row(j))
                        + model.b[i]
                        + model.b_tilde[j]
                        - ln_x;
                    let r2 = numkit::dot(model.w.row(j), model.w_tilde.row(i))
                        + model.b[j]
                        + model.b_tilde[i]
                        - ln_x;
                    fx * (r1 * r1 + r2 * r2)
                })
                .sum::<f64>()
        })
        .iter()
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{check_gradient, AdagradState};
    use proptest::prelude::*;
    use rand::Rng;

    fn enc(items: &[usize]) -> EncodedBasket {
        EncodedBasket::new(None, items.to_vec())
    }

    #[test]
    fn distance_weighted_counts() {
        let t = build_cooccurrence_with(&[enc(&[0, 1, 2])], 3, Execution::Sequential);
        assert_eq!(t.get(0, 1), 1.0);
        assert_eq!(t.get(0, 2), 0.5);
        assert_eq!(t.get(1, 2), 1.0);
        assert_eq!(t.get(2, 0), 0.5);

        let t = build_cooccurrence_with(&[enc(&[0, 1]), enc(&[0, 1])], 2, Execution::Sequential);
        assert_eq!(t.get(0, 1), 2.0);

        // duplicate A at positions 0 and 1, B at 2
        let t = build_cooccurrence_with(&[enc(&[0, 0, 1])], 2, Execution::Sequential);
        assert_eq!(t.get(0, 1), 1.5);
        assert_eq!(t.get(0, 0), 0.0);
        assert_eq!(t.nnz(), 1);
    }

    #[test]
    fn weighting_function() {
        assert_eq!(weight_f(100.0, 100.0, 0.75).unwrap(), 1.0);
        assert!((weight_f(1.0, 100.0, 0.75).unwrap() - 0.031_622_776_601_683_79).abs() < 1e-12);
        assert_eq!(weight_f(200.0, 100.0, 0.75).unwrap(), 1.0);
        assert!(weight_f(0.0, 100.0, 0.75).is_err());
        assert!(weight_f(-1.0, 100.0, 0.75).is_err());
    }

    fn zero_model(p: usize, d: usize) -> ProVeModel {
        let mut m = ProVeModel::init(
            p,
            ProVeConfig {
                dim: d,
                ..Default::default()
            },
        )
        .unwrap();
        for t in m.params_mut() {
            t.iter_mut().for_each(|x| *x = 0.0);
        }
        m
    }

    #[test]
    fn closed_form_objectives() {
        let m = zero_model(2, 2);
        let t = CooccurrenceTable::from_entries(2, &[(0, 1, 1.0)]).unwrap();
        assert_eq!(m.loss(&t).unwrap(), 0.0);
        let e = std::f64::consts::E;
        let t = CooccurrenceTable::from_entries(2, &[(1, 0, e)]).unwrap();
        let f = weight_f(e, 100.0, 0.75).unwrap();
        assert!((m.loss(&t).unwrap() - 2.0 * f).abs() < 1e-15);
        let empty = CooccurrenceTable::from_entries(2, &[]).unwrap();
        assert!(m.loss(&empty).is_err());
    }

    fn random_table(p: usize, rng: &mut ChaCha8Rng) -> CooccurrenceTable {
        let mut triples = Vec::new();
        for i in 0..p {
            for j in i + 1..p {
                if rng.gen_bool(0.6) {
                    triples.push((i, j, rng.gen_range(0.2..150.0)));
                }
            }
        }
        CooccurrenceTable::from_entries(p, &triples).unwrap()
    }

    fn flat_grads(g: &ProVeGradients) -> Vec<f64> {
        [g.w.as_slice(), g.w_tilde.as_slice(), &g.b, &g.b_tilde].concat()
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let table = random_table(6, &mut rng);
        let mut model = ProVeModel::init(
            6,
            ProVeConfig {
                dim: 3,
                ..Default::default()
            },
        )
        .unwrap();
        for t in model.params_mut() {
            t.iter_mut().for_each(|x| *x = rng.gen_range(-0.5..0.5));
        }
        let (_, g) = model.loss_and_grads(&table).unwrap();
        let mut probe = model.clone();
        let point: Vec<f64> = probe.params_mut().iter().flat_map(|t| t.to_vec()).collect();
        let f = |x: &[f64]| {
            let mut m = model.clone();
            let mut off = 0;
            for t in m.params_mut() {
                t.copy_from_slice(&x[off..off + t.len()]);
                off += t.len();
            }
            m.loss(&table).unwrap()
        };
        let err = check_gradient(f, &flat_grads(&g), &point, 1e-5).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn loss_is_symmetric_under_swapping_tables() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let table = random_table(5, &mut rng);
        let mut m = ProVeModel::init(
            5,
            ProVeConfig {
                dim: 4,
                ..Default::default()
            },
        )
        .unwrap();
        for t in m.params_mut() {
            t.iter_mut().for_each(|x| *x = rng.gen_range(-1.0..1.0));
        }
        let mut swapped = m.clone();
        std::mem::swap(&mut swapped.w, &mut swapped.w_tilde);
        std::mem::swap(&mut swapped.b, &mut swapped.b_tilde);
        let (a, b) = (m.loss(&table).unwrap(), swapped.loss(&table).unwrap());
        assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn single_pair_training_step_is_adagrad_on_the_gradient() {
        let table = CooccurrenceTable::from_entries(3, &[(0, 2, 4.0)]).unwrap();
        let cfg = ProVeConfig {
            dim: 3,
            epochs: 1,
            ..Default::default()
        };
        let got = train_prove(&table, cfg.clone()).unwrap();
        let mut expected = ProVeModel::init(3, cfg).unwrap();
        let (_, g) = expected.loss_and_grads(&table).unwrap();
        let grads = [
            g.w.as_slice(),
            g.w_tilde.as_slice(),
            &g.b[..],
            &g.b_tilde[..],
        ];
        for (t, gr) in expected.params_mut().into_iter().zip(grads) {
            AdagradState::new(t.len(), 1.0, 0.1).step(t, gr).unwrap();
        }
        assert_eq!(got.w, expected.w);
        assert_eq!(got.w_tilde, expected.w_tilde);
        assert_eq!(got.b, expected.b);
        assert_eq!(got.b_tilde, expected.b_tilde);
    }

    #[test]
    fn training_fits_the_log_score() {
        let e = std::f64::consts::E;
        let table = CooccurrenceTable::from_entries(2, &[(0, 1, e)]).unwrap();
        let cfg = ProVeConfig {
            dim: 4,
            epochs: 200,
            ..Default::default()
        };
        let m = train_prove(&table, cfg.clone()).unwrap();
        assert!(m.residual(0, 1, e).abs() < 1e-3);
        assert!(m.residual(1, 0, e).abs() < 1e-3);
        assert_eq!(m, train_prove(&table, cfg).unwrap());
    }

    #[test]
    fn final_embeddings_sum_both_tables() {
        let mut m = zero_model(3, 3);
        m.w = Matrix::identity(3);
        m.w_tilde = Matrix::identity(3);
        let sum = m.final_embeddings();
        assert_eq!(sum.get(1, 1), 2.0);
        assert_eq!(sum.get(0, 1), 0.0);
        m.w_tilde = Matrix::zeros(3, 3);
        assert_eq!(m.final_embeddings(), m.w);
    }

    #[test]
    fn table_text_round_trip() {
        let t = build_cooccurrence_with(
            &[enc(&[0, 3, 1, 2]), enc(&[2, 0])],
            4,
            Execution::Sequential,
        );
        let mut buf = Vec::new();
        t.write_text(&mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("4 6\n0 1 "));
        assert_eq!(CooccurrenceTable::read_text(&buf[..]).unwrap(), t);
    }

    #[test]
    fn checkpoint_round_trip() {
        let t = build_cooccurrence_with(&[enc(&[0, 1, 2])], 3, Execution::Sequential);
        let m = train_prove(
            &t,
            ProVeConfig {
                dim: 2,
                epochs: 3,
                ..Default::default()
            },
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        assert_eq!(ProVeModel::load(dir.path()).unwrap(), m);
    }

    fn brute_force(baskets: &[EncodedBasket], i: usize, j: usize) -> f64 {
        let mut x = 0.0;
        for b in baskets {
            for a in 0..b.items.len() {
                for c in 0..b.items.len() {
                    if a < c
                        && ((b.items[a] == i && b.items[c] == j)
                            || (b.items[a] == j && b.items[c] == i))
                    {
                        x += 1.0 / (c - a) as f64;
                    }
                }
            }
        }
        x
    }

    proptest! {
        #[test]
        fn table_matches_brute_force_and_is_symmetric(
            baskets in prop::collection::vec(prop::collection::vec(0usize..6, 2..7), 1..40),
        ) {
            let baskets: Vec<_> = baskets.into_iter().map(|b| EncodedBasket::new(None, b)).collect();
            let seq = build_cooccurrence_with(&baskets, 6, Execution::Sequential);
            let par = build_cooccurrence_with(&baskets, 6, Execution::Parallel);
            prop_assert_eq!(&seq, &par);
            for i in 0..6 {
                for j in 0..6 {
                    prop_assert_eq!(seq.get(i, j), seq.get(j, i));
                    let expect = if i == j { 0.0 } else { brute_force(&baskets, i, j) };
                    prop_assert!((seq.get(i, j) - expect).abs() < 1e-12);
                }
            }
            prop_assert!(seq.iter().all(|(i, j, x)| i < j && x > 0.0));
        }
    }
}
