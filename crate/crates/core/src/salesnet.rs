//! Spend regression from user and product embeddings.
//!
//! Layout, with kernels stored `in x out`:
//!
//! ```text
//! user id -> user table (U x Du) \
//!                                 concat (Du + Dp) -> dense h1, ReLU -> dense h2, ReLU -> dense 1
//! product id -> product table (P x Dp) /
//! ```
//!
//! Defaults are `Du = 32`, `Dp = 128`, `h1 = 160`, `h2 = 80`, trained with
//! Adam on the mean squared error. Either embedding table can be frozen;
//! a frozen table never gets an optimizer step, so it stays bit-identical.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint;
use crate::corpus::{hex, SpendRecord, Vocabulary};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::numkit::{AdamState, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SalesConfig {
    pub hidden1: usize,
    pub hidden2: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Train on `ln(1 + y)` and map predictions back with `exp(x) - 1`.
    pub log1p: bool,
    pub train_fraction: f64,
    pub execution: Execution,
}

impl Default for SalesConfig {
    fn default() -> Self {
        SalesConfig {
            hidden1: 160,
            hidden2: 80,
            learning_rate: 0.0025,
            batch_size: 512,
            epochs: 35,
            seed: 42,
            log1p: false,
            train_fraction: 0.9,
            execution: Execution::default(),
        }
    }
}

impl SalesConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden1 == 0 || self.hidden2 == 0 {
            return Err(Error::config("hidden widths must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("sales learning rate must be positive"));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::config("batch size and epochs must be >= 1"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::config(
                "train fraction must lie strictly between 0 and 1",
            ));
        }
        Ok(())
    }
}

/// Which embedding tables keep training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExperimentMode {
    pub id: u8,
    pub continue_user: bool,
    pub continue_prod: bool,
}

impl ExperimentMode {
    pub const ALL: [ExperimentMode; 4] = [
        ExperimentMode::new(1, false, false),
        ExperimentMode::new(2, false, true),
        ExperimentMode::new(3, true, false),
        ExperimentMode::new(4, true, true),
    ];

    const fn new(id: u8, continue_user: bool, continue_prod: bool) -> Self {
        ExperimentMode {
            id,
            continue_user,
            continue_prod,
        }
    }

    pub fn from_id(id: u8) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|m| m.id == id)
            .ok_or_else(|| Error::config(format!("experiment mode must be 1-4, got {id}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SalesRow {
    pub user: usize,
    pub product: usize,
    pub amount: f64,
}

/// One row per (user, product) pair with the total spend of the period.
#[derive(Debug, Clone, PartialEq)]
pub struct SalesDataset {
    pub rows: Vec<SalesRow>,
    pub n_users: usize,
    pub n_products: usize,
}

impl SalesDataset {
    pub fn new(rows: Vec<SalesRow>, n_users: usize, n_products: usize) -> Result<Self> {
        for r in &rows {
            if r.user >= n_users {
                return Err(Error::OutOfRange {
                    index: r.user,
                    len: n_users,
                });
            }
            if r.product >= n_products {
                return Err(Error::OutOfRange {
                    index: r.product,
                    len: n_products,
                });
            }
            if !(r.amount.is_finite() && r.amount >= 0.0) {
                return Err(Error::config(format!(
                    "spend {} must be finite and >= 0",
                    r.amount
                )));
            }
        }
        Ok(SalesDataset {
            rows,
            n_users,
            n_products,
        })
    }

    /// Resolve tokens through `vocab`, summing repeated (user, product)
    /// records. Rows come out sorted by (user, product).
    pub fn from_records(records: &[SpendRecord], vocab: &Vocabulary) -> Result<Self> {
        let mut totals: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for r in records {
            let u = vocab
                .user(&r.user)
                .ok_or_else(|| Error::UnknownToken(r.user.clone()))?;
            let p = vocab
                .product(&r.product)
                .ok_or_else(|| Error::UnknownToken(r.product.clone()))?;
            *totals.entry((u, p)).or_insert(0.0) += r.amount;
        }
        let rows = totals
            .into_iter()
            .map(|((user, product), amount)| SalesRow {
                user,
                product,
                amount,
            })
            .collect();
        Self::new(rows, vocab.n_users(), vocab.n_products())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn targets(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.amount).collect()
    }

    /// Seeded random split into train and held-out rows.
    pub fn split(&self, train_fraction: f64, seed: u64) -> Result<(SalesDataset, SalesDataset)> {
        if self.len() < 2 {
            return Err(Error::config("need at least two rows to split"));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_train =
            ((self.len() as f64 * train_fraction).round() as usize).clamp(1, self.len() - 1);
        let pick = |ids: &[usize]| SalesDataset {
            rows: ids.iter().map(|&i| self.rows[i]).collect(),
            n_users: self.n_users,
            n_products: self.n_products,
        };
        Ok((pick(&idx[..n_train]), pick(&idx[n_train..])))
    }

    /// SHA-256 over the rows, recorded in checkpoints.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for r in &self.rows {
            h.update(format!("{},{},{:e}\n", r.user, r.product, r.amount).as_bytes());
        }
        hex(&h.finalize())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SalesModel {
    pub user_table: Matrix,
    pub prod_table: Matrix,
    pub dense1_w: Matrix,
    pub dense1_b: Vec<f64>,
    pub dense2_w: Matrix,
    pub dense2_b: Vec<f64>,
    pub readout_w: Matrix,
    pub readout_b: Vec<f64>,
    pub mode: ExperimentMode,
    pub config: SalesConfig,
    /// Mean training loss seen during each epoch.
    pub loss_history: Vec<f64>,
    pub data_fingerprint: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SalesGradients {
    /// `None` for a frozen table.
    pub user_table: Option<Matrix>,
    pub prod_table: Option<Matrix>,
    pub dense1_w: Matrix,
    pub dense1_b: Vec<f64>,
    pub dense2_w: Matrix,
    pub dense2_b: Vec<f64>,
    pub readout_w: Matrix,
    pub readout_b: Vec<f64>,
}

struct Trace {
    x: Vec<f64>,
    z1: Vec<f64>,
    a1: Vec<f64>,
    z2: Vec<f64>,
    a2: Vec<f64>,
    y: f64,
}

/// `b + x W` for a kernel stored `in x out`.
fn affine(x: &[f64], w: &Matrix, b: &[f64]) -> Vec<f64> {
    let mut z = b.to_vec();
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        for (zj, wij) in z.iter_mut().zip(w.row(i)) {
            *zj += xi * wij;
        }
    }
    z
}

fn relu(z: &[f64]) -> Vec<f64> {
    z.iter().map(|&v| v.max(0.0)).collect()
}

fn he_uniform(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::uniform(fan_in, fan_out, (6.0 / fan_in as f64).sqrt(), rng)
}

impl SalesModel {
    /// Copy the embedding tables and draw He-uniform dense kernels from
    /// `config.seed`. Biases start at zero.
    pub fn init(
        user_table: &Matrix,
        prod_table: &Matrix,
        mode: ExperimentMode,
        config: SalesConfig,
    ) -> Result<Self> {
        config.validate()?;
        if !user_table.is_finite() || !prod_table.is_finite() {
            return Err(Error::NonFinite("initial embedding tables"));
        }
        let input = user_table.cols() + prod_table.cols();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(SalesModel {
            user_table: user_table.clone(),
            prod_table: prod_table.clone(),
            dense1_w: he_uniform(input, config.hidden1, &mut rng),
            dense1_b: vec![0.0; config.hidden1],
            dense2_w: he_uniform(config.hidden1, config.hidden2, &mut rng),
            dense2_b: vec![0.0; config.hidden2],
            readout_w: he_uniform(config.hidden2, 1, &mut rng),
            readout_b: vec![0.0],
            mode,
            config,
            loss_history: Vec::new(),
            data_fingerprint: String::new(),
        })
    }

    pub fn input_width(&self) -> usize {
        self.user_table.cols() + self.prod_table.cols()
    }

    fn check_ids(&self, user: usize, product: usize) -> Result<()> {
        if user >= self.user_table.rows() {
            return Err(Error::OutOfRange {
                index: user,
                len: self.user_table.rows(),
            });
        }
        if product >= self.prod_table.rows() {
            return Err(Error::OutOfRange {
                index: product,
                len: self.prod_table.rows(),
            });
        }
        Ok(())
    }

    fn trace(&self, user: usize, product: usize) -> Trace {
        let mut x = Vec::with_capacity(self.input_width());
        x.extend_from_slice(self.user_table.row(user));
        x.extend_from_slice(self.prod_table.row(product));
        let z1 = affine(&x, &self.dense1_w, &self.dense1_b);
        let a1 = relu(&z1);
        let z2 = affine(&a1, &self.dense2_w, &self.dense2_b);
        let a2 = relu(&z2);
        let y = affine(&a2, &self.readout_w, &self.readout_b)[0];
        Trace {
            x,
            z1,
            a1,
            z2,
            a2,
            y,
        }
    }

    /// Raw network output for one pair.
    pub fn forward(&self, user: usize, product: usize) -> Result<f64> {
        self.check_ids(user, product)?;
        Ok(self.trace(user, product).y)
    }

    /// Predicted spend in currency units (undoes the log transform).
    pub fn predict(&self, user: usize, product: usize) -> Result<f64> {
        let y = self.forward(user, product)?;
        Ok(if self.config.log1p { y.exp_m1() } else { y })
    }

    pub fn predict_all(&self, data: &SalesDataset) -> Result<Vec<f64>> {
        data.rows
            .iter()
            .map(|r| self.predict(r.user, r.product))
            .collect()
    }

    fn target(&self, amount: f64) -> f64 {
        if self.config.log1p {
            amount.ln_1p()
        } else {
            amount
        }
    }

    /// Mean squared error over `batch` and its gradient. Table gradients are
    /// only formed for tables the mode lets train.
    pub fn mse_loss(&self, batch: &[SalesRow]) -> Result<(f64, SalesGradients)> {
        if batch.is_empty() {
            return Err(Error::Empty("sales batch"));
        }
        for r in batch {
            self.check_ids(r.user, r.product)?;
        }
        let scale = 2.0 / batch.len() as f64;
        let parts = self
            .config
            .execution
            .map_chunks(batch, GRAD_CHUNK, |chunk| self.chunk_grads(chunk, scale));
        let mut g = self.zero_grads();
        let mut sse = 0.0;
        for part in parts {
            sse += part.sse;
            add_into(g.dense1_w.as_mut_slice(), part.dense1_w.as_slice());
            add_into(&mut g.dense1_b, &part.dense1_b);
            add_into(g.dense2_w.as_mut_slice(), part.dense2_w.as_slice());
            add_into(&mut g.dense2_b, &part.dense2_b);
            add_into(g.readout_w.as_mut_slice(), part.readout_w.as_slice());
            add_into(&mut g.readout_b, &part.readout_b);
            if let Some(t) = g.user_table.as_mut() {
                for (row, v) in &part.user_rows {
                    add_into(t.row_mut(*row), v);
                }
            }
            if let Some(t) = g.prod_table.as_mut() {
                for (row, v) in &part.prod_rows {
                    add_into(t.row_mut(*row), v);
                }
            }
        }
        Ok((sse / batch.len() as f64, g))
    }

    fn zero_grads(&self) -> SalesGradients {
        SalesGradients {
            user_table: self
                .mode
                .continue_user
                .then(|| Matrix::zeros(self.user_table.rows(), self.user_table.cols())),
            prod_table: self
                .mode
                .continue_prod
                .then(|| Matrix::zeros(self.prod_table.rows(), self.prod_table.cols())),
            dense1_w: Matrix::zeros(self.dense1_w.rows(), self.dense1_w.cols()),
            dense1_b: vec![0.0; self.dense1_b.len()],
            dense2_w: Matrix::zeros(self.dense2_w.rows(), self.dense2_w.cols()),
            dense2_b: vec![0.0; self.dense2_b.len()],
            readout_w: Matrix::zeros(self.readout_w.rows(), 1),
            readout_b: vec![0.0],
        }
    }

    #[allow(clippy::needless_range_loop)]
    fn chunk_grads(&self, chunk: &[SalesRow], scale: f64) -> ChunkGrads {
        let (h1, h2) = (self.dense1_b.len(), self.dense2_b.len());
        let du = self.user_table.cols();
        let mut c = ChunkGrads {
            sse: 0.0,
            dense1_w: Matrix::zeros(self.input_width(), h1),
            dense1_b: vec![0.0; h1],
            dense2_w: Matrix::zeros(h1, h2),
            dense2_b: vec![0.0; h2],
            readout_w: Matrix::zeros(h2, 1),
            readout_b: vec![0.0],
            user_rows: Vec::new(),
            prod_rows: Vec::new(),
        };
        for r in chunk {
            let t = self.trace(r.user, r.product);
            let err = t.y - self.target(r.amount);
            c.sse += err * err;
            let dy = scale * err;

            c.readout_b[0] += dy;
            let mut dz2 = vec![0.0; h2];
            for k in 0..h2 {
                c.readout_w.as_mut_slice()[k] += t.a2[k] * dy;
                if t.z2[k] > 0.0 {
                    dz2[k] = self.readout_w.get(k, 0) * dy;
                }
            }
            let mut dz1 = vec![0.0; h1];
            for j in 0..h1 {
                c.dense2_w
                    .row_mut(j)
                    .iter_mut()
                    .zip(&dz2)
                    .for_each(|(g, d)| *g += t.a1[j] * d);
                if t.z1[j] > 0.0 {
                    dz1[j] = self
                        .dense2_w
                        .row(j)
                        .iter()
                        .zip(&dz2)
                        .map(|(w, d)| w * d)
                        .sum();
                }
            }
            add_into(&mut c.dense2_b, &dz2);
            add_into(&mut c.dense1_b, &dz1);
            let want_dx = self.mode.continue_user || self.mode.continue_prod;
            let mut dx = vec![0.0; if want_dx { t.x.len() } else { 0 }];
            for i in 0..t.x.len() {
                let row = self.dense1_w.row(i);
                c.dense1_w
                    .row_mut(i)
                    .iter_mut()
                    .zip(&dz1)
                    .for_each(|(g, d)| *g += t.x[i] * d);
                if want_dx {
                    dx[i] = row.iter().zip(&dz1).map(|(w, d)| w * d).sum();
                }
            }
            if self.mode.continue_user {
                c.user_rows.push((r.user, dx[..du].to_vec()));
            }
            if self.mode.continue_prod {
                c.prod_rows.push((r.product, dx[du..].to_vec()));
            }
        }
        c
    }

    /// `(name, tensor)` pairs in a fixed order.
    pub fn tensors(&self) -> [(&'static str, &[f64]); 8] {
        [
            ("user_table", self.user_table.as_slice()),
            ("prod_table", self.prod_table.as_slice()),
            ("dense1_w", self.dense1_w.as_slice()),
            ("dense1_b", &self.dense1_b),
            ("dense2_w", self.dense2_w.as_slice()),
            ("dense2_b", &self.dense2_b),
            ("readout_w", self.readout_w.as_slice()),
            ("readout_b", &self.readout_b),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 8] {
        [
            self.user_table.as_mut_slice(),
            self.prod_table.as_mut_slice(),
            self.dense1_w.as_mut_slice(),
            &mut self.dense1_b,
            self.dense2_w.as_mut_slice(),
            &mut self.dense2_b,
            self.readout_w.as_mut_slice(),
            &mut self.readout_b,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|x| x.is_finite()))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        checkpoint::create_dir(dir)?;
        checkpoint::write_tensor(dir, "user_table", &self.user_table)?;
        checkpoint::write_tensor(dir, "prod_table", &self.prod_table)?;
        checkpoint::write_tensor(dir, "dense1_w", &self.dense1_w)?;
        checkpoint::write_vector(dir, "dense1_b", &self.dense1_b)?;
        checkpoint::write_tensor(dir, "dense2_w", &self.dense2_w)?;
        checkpoint::write_vector(dir, "dense2_b", &self.dense2_b)?;
        checkpoint::write_tensor(dir, "readout_w", &self.readout_w)?;
        checkpoint::write_vector(dir, "readout_b", &self.readout_b)?;
        checkpoint::write_meta(
            dir,
            &Meta {
                kind: "salesnet".into(),
                mode: self.mode,
                config: self.config.clone(),
                data_hash: self.data_fingerprint.clone(),
                loss_history: self.loss_history.clone(),
            },
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: Meta = checkpoint::read_meta(dir)?;
        if meta.kind != "salesnet" {
            return Err(Error::config(format!(
                "{} is a {} checkpoint",
                dir.display(),
                meta.kind
            )));
        }
        let m = SalesModel {
            user_table: checkpoint::read_tensor(dir, "user_table")?,
            prod_table: checkpoint::read_tensor(dir, "prod_table")?,
            dense1_w: checkpoint::read_tensor(dir, "dense1_w")?,
            dense1_b: checkpoint::read_vector(dir, "dense1_b")?,
            dense2_w: checkpoint::read_tensor(dir, "dense2_w")?,
            dense2_b: checkpoint::read_vector(dir, "dense2_b")?,
            readout_w: checkpoint::read_tensor(dir, "readout_w")?,
            readout_b: checkpoint::read_vector(dir, "readout_b")?,
            mode: meta.mode,
            config: meta.config,
            loss_history: meta.loss_history,
            data_fingerprint: meta.data_hash,
        };
        let (h1, h2) = (m.dense1_b.len(), m.dense2_b.len());
        if m.dense1_w.shape() != (m.input_width(), h1)
            || m.dense2_w.shape() != (h1, h2)
            || m.readout_w.shape() != (h2, 1)
            || m.readout_b.len() != 1
        {
            return Err(Error::dim(format!(
                "{}: inconsistent layer shapes",
                dir.display()
            )));
        }
        Ok(m)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    kind: String,
    mode: ExperimentMode,
    config: SalesConfig,
    data_hash: String,
    loss_history: Vec<f64>,
}

const GRAD_CHUNK: usize = 64;

struct ChunkGrads {
    sse: f64,
    dense1_w: Matrix,
    dense1_b: Vec<f64>,
    dense2_w: Matrix,
    dense2_b: Vec<f64>,
    readout_w: Matrix,
    readout_b: Vec<f64>,
    user_rows: Vec<(usize, Vec<f64>)>,
    prod_rows: Vec<(usize, Vec<f64>)>,
}

fn add_into(acc: &mut [f64], x: &[f64]) {
    acc.iter_mut().zip(x).for_each(|(a, b)| *a += b);
}

/// Mini-batch Adam on the MSE, starting from copies of the given tables.
pub fn train_sales(
    data: &SalesDataset,
    init_user: &Matrix,
    init_prod: &Matrix,
    mode: ExperimentMode,
    config: &SalesConfig,
) -> Result<SalesModel> {
    if data.is_empty() {
        return Err(Error::Empty("sales training rows"));
    }
    if init_user.rows() < data.n_users || init_prod.rows() < data.n_products {
        return Err(Error::dim(format!(
            "tables cover {} users and {} products, dataset needs {} and {}",
            init_user.rows(),
            init_prod.rows(),
            data.n_users,
            data.n_products
        )));
    }
    let mut model = SalesModel::init(init_user, init_prod, mode, config.clone())?;
    model.data_fingerprint = data.fingerprint();
    let lr = config.learning_rate;
    let mut adam: Vec<AdamState> = model
        .tensors()
        .iter()
        .map(|(_, t)| AdamState::new(t.len(), lr))
        .collect();
    // shuffles draw from their own stream so the kernels match `init`
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut rows = data.rows.clone();
    for epoch in 0..config.epochs {
        rows.shuffle(&mut rng);
        let mut weighted = 0.0;
        for batch in rows.chunks(config.batch_size) {
            let (loss, g) = model.mse_loss(batch)?;
            weighted += loss * batch.len() as f64;
            let grads: [Option<&[f64]>; 8] = [
                g.user_table.as_ref().map(Matrix::as_slice),
                g.prod_table.as_ref().map(Matrix::as_slice),
                Some(g.dense1_w.as_slice()),
                Some(&g.dense1_b),
                Some(g.dense2_w.as_slice()),
                Some(&g.dense2_b),
                Some(g.readout_w.as_slice()),
                Some(&g.readout_b),
            ];
            for ((param, grad), state) in model.tensors_mut().into_iter().zip(grads).zip(&mut adam)
            {
                if let Some(grad) = grad {
                    state.step(param, grad)?;
                }
            }
        }
        let epoch_loss = weighted / rows.len() as f64;
        log::info!(
            "sales mode {} epoch {:>3}: mse {epoch_loss:.6}",
            mode.id,
            epoch + 1
        );
        model.loss_history.push(epoch_loss);
        if !epoch_loss.is_finite() {
            return Err(Error::NonFinite("sales training loss"));
        }
    }
    if !model.is_finite() {
        return Err(Error::NonFinite("sales model parameters"));
    }
    Ok(model)
}

/// Coefficient of determination `1 - SS_res / SS_tot`.
pub fn r2_score(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    if predictions.len() != targets.len() {
        return Err(Error::dim("prediction and target counts differ"));
    }
    if targets.len() < 2 {
        return Err(Error::config("r2 needs at least two targets"));
    }
    let mean = targets.iter().sum::<f64>() / targets.len() as f64;
    let ss_tot: f64 = targets.iter().map(|y| (y - mean) * (y - mean)).sum();
    if ss_tot == 0.0 {
        return Err(Error::config("r2 is undefined for constant targets"));
    }
    let ss_res: f64 = predictions
        .iter()
        .zip(targets)
        .map(|(p, y)| (y - p) * (y - p))
        .sum();
    Ok(1.0 - ss_res / ss_tot)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRow {
    pub mode: ExperimentMode,
    pub r2: f64,
    pub final_train_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub rows: Vec<ExperimentRow>,
    pub n_train: usize,
    pub n_test: usize,
}

impl ExperimentReport {
    /// `mode,continue_user,continue_prod,r2`
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record(["mode", "continue_user", "continue_prod", "r2"])?;
        for r in &self.rows {
            w.write_record([
                r.mode.id.to_string(),
                r.mode.continue_user.to_string(),
                r.mode.continue_prod.to_string(),
                crate::numkit::format_float(r.r2),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mark = |b: bool| if b { "✓" } else { "✗" };
        let mut s = String::new();
        let _ = writeln!(
            s,
            "Embeddings optimization ({} train rows, {} held out)",
            self.n_train, self.n_test
        );
        let _ = writeln!(
            s,
            "{:<6}{:<16}{:<16}{:>10}",
            "mode", "continue user", "continue prod", "R2 (%)"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<6}{:<16}{:<16}{:>10.2}",
                r.mode.id,
                mark(r.mode.continue_user),
                mark(r.mode.continue_prod),
                100.0 * r.r2
            );
        }
        s
    }
}

/// Train one model under `mode` on the seeded split and score the held-out rows.
pub fn run_mode(
    data: &SalesDataset,
    init_user: &Matrix,
    init_prod: &Matrix,
    mode: ExperimentMode,
    config: &SalesConfig,
) -> Result<(ExperimentRow, SalesModel)> {
    config.validate()?;
    let (train, test) = data.split(config.train_fraction, config.seed)?;
    let model = train_sales(&train, init_user, init_prod, mode, config)?;
    let r2 = r2_score(&model.predict_all(&test)?, &test.targets())?;
    log::info!("sales mode {}: held-out r2 {r2:.4}", mode.id);
    let row = ExperimentRow {
        mode,
        r2,
        final_train_loss: model.loss_history.last().copied().unwrap_or(f64::NAN),
    };
    Ok((row, model))
}

/// All four freeze modes from the same tables, kernels and split.
pub fn run_experiments(
    data: &SalesDataset,
    init_user: &Matrix,
    init_prod: &Matrix,
    config: &SalesConfig,
) -> Result<(ExperimentReport, Vec<SalesModel>)> {
    config.validate()?;
    let (train, test) = data.split(config.train_fraction, config.seed)?;
    let mut rows = Vec::new();
    let mut models = Vec::new();
    for mode in ExperimentMode::ALL {
        let (row, model) = run_mode(data, init_user, init_prod, mode, config)?;
        rows.push(row);
        models.push(model);
    }
    Ok((
        ExperimentReport {
            rows,
            n_train: train.len(),
            n_test: test.len(),
        },
        models,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::check_gradient;
    use rand::Rng;

    fn tiny_config() -> SalesConfig {
        SalesConfig {
            hidden1: 4,
            hidden2: 3,
            batch_size: 8,
            epochs: 5,
            learning_rate: 0.01,
            ..Default::default()
        }
    }

    fn tables(rng: &mut ChaCha8Rng) -> (Matrix, Matrix) {
        (
            Matrix::uniform(4, 3, 1.0, rng),
            Matrix::uniform(6, 5, 1.0, rng),
        )
    }

    fn rows(rng: &mut ChaCha8Rng, n: usize) -> Vec<SalesRow> {
        (0..n)
            .map(|_| SalesRow {
                user: rng.gen_range(0..4),
                product: rng.gen_range(0..6),
                amount: rng.gen_range(0.0..3.0),
            })
            .collect()
    }

    #[test]
    fn mode_table() {
        let flags: Vec<_> = ExperimentMode::ALL
            .iter()
            .map(|m| (m.id, m.continue_user, m.continue_prod))
            .collect();
        assert_eq!(
            flags,
            vec![
                (1, false, false),
                (2, false, true),
                (3, true, false),
                (4, true, true)
            ]
        );
        assert!(ExperimentMode::from_id(5).is_err());
        assert_eq!(ExperimentMode::from_id(3).unwrap().id, 3);
    }

    #[test]
    fn default_layout_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let u = Matrix::uniform(3, 32, 0.1, &mut rng);
        let p = Matrix::uniform(5, 128, 0.1, &mut rng);
        let m = SalesModel::init(&u, &p, ExperimentMode::ALL[3], SalesConfig::default()).unwrap();
        assert_eq!(m.dense1_w.shape(), (160, 160));
        assert_eq!(m.dense2_w.shape(), (160, 80));
        assert_eq!(m.readout_w.shape(), (80, 1));
        let limit = (6.0f64 / 160.0).sqrt();
        assert!(m.dense1_w.as_slice().iter().all(|w| w.abs() <= limit));
    }

    fn zero_net(beta: f64) -> SalesModel {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (u, p) = tables(&mut rng);
        let mut m = SalesModel::init(&u, &p, ExperimentMode::ALL[0], tiny_config()).unwrap();
        for t in m.tensors_mut().into_iter().skip(2) {
            t.iter_mut().for_each(|x| *x = 0.0);
        }
        m.readout_b[0] = beta;
        m
    }

    #[test]
    fn zero_network_outputs_its_bias() {
        let m = zero_net(1.25);
        for u in 0..4 {
            for p in 0..6 {
                assert_eq!(m.forward(u, p).unwrap(), 1.25);
            }
        }
        assert!(m.forward(4, 0).is_err());
        assert!(m.forward(0, 6).is_err());
    }

    #[test]
    fn zero_network_loss() {
        let m = zero_net(0.0);
        let batch: Vec<_> = (0..3)
            .map(|i| SalesRow {
                user: i,
                product: i,
                amount: 2.0,
            })
            .collect();
        assert_eq!(m.mse_loss(&batch).unwrap().0, 4.0);
        let m = zero_net(2.0);
        assert_eq!(m.mse_loss(&batch).unwrap().0, 0.0);
        assert!(m.mse_loss(&[]).is_err());
    }

    #[test]
    fn forward_matches_hand_arithmetic() {
        let u = Matrix::from_rows(&[vec![1.0]]).unwrap();
        let p = Matrix::from_rows(&[vec![2.0]]).unwrap();
        let cfg = SalesConfig {
            hidden1: 2,
            hidden2: 1,
            ..Default::default()
        };
        let mut m = SalesModel::init(&u, &p, ExperimentMode::ALL[0], cfg).unwrap();
        m.dense1_w = Matrix::from_rows(&[vec![0.5, -1.0], vec![0.25, 0.1]]).unwrap();
        m.dense1_b = vec![0.1, 0.2];
        m.dense2_w = Matrix::from_rows(&[vec![2.0], vec![3.0]]).unwrap();
        m.dense2_b = vec![-0.5];
        m.readout_w = Matrix::from_rows(&[vec![1.5]]).unwrap();
        m.readout_b = vec![0.3];
        // z1 = [0.5 + 0.5 + 0.1, -1 + 0.2 + 0.2] = [1.1, -0.6] -> a1 = [1.1, 0]
        // z2 = 2.2 - 0.5 = 1.7 -> y = 1.5 * 1.7 + 0.3
        let y = m.forward(0, 0).unwrap();
        assert!((y - (1.5 * 1.7 + 0.3)).abs() < 1e-12);
    }

    fn flat(g: &SalesGradients) -> Vec<f64> {
        let mut v = Vec::new();
        if let Some(t) = &g.user_table {
            v.extend_from_slice(t.as_slice());
        }
        if let Some(t) = &g.prod_table {
            v.extend_from_slice(t.as_slice());
        }
        for t in [
            g.dense1_w.as_slice(),
            &g.dense1_b,
            g.dense2_w.as_slice(),
            &g.dense2_b,
            g.readout_w.as_slice(),
            &g.readout_b,
        ] {
            v.extend_from_slice(t);
        }
        v
    }

    fn trainable(m: &mut SalesModel) -> Vec<&mut [f64]> {
        let (cu, cp) = (m.mode.continue_user, m.mode.continue_prod);
        m.tensors_mut()
            .into_iter()
            .enumerate()
            .filter(|(i, _)| (*i != 0 || cu) && (*i != 1 || cp))
            .map(|(_, t)| t)
            .collect()
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..5 {
            for mode in ExperimentMode::ALL {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let (u, p) = tables(&mut rng);
                let cfg = SalesConfig {
                    seed,
                    ..tiny_config()
                };
                let mut model = SalesModel::init(&u, &p, mode, cfg).unwrap();
                // nonzero biases keep units away from the ReLU kink
                for b in [&mut model.dense1_b, &mut model.dense2_b] {
                    b.iter_mut().for_each(|x| *x = rng.gen_range(-0.3..0.3));
                }
                let batch = rows(&mut rng, 7);
                let (_, g) = model.mse_loss(&batch).unwrap();
                let mut probe = model.clone();
                let point: Vec<f64> = trainable(&mut probe)
                    .iter()
                    .flat_map(|t| t.to_vec())
                    .collect();
                let f = |x: &[f64]| {
                    let mut m = model.clone();
                    let mut off = 0;
                    for t in trainable(&mut m) {
                        t.copy_from_slice(&x[off..off + t.len()]);
                        off += t.len();
                    }
                    m.mse_loss(&batch).unwrap().0
                };
                let err = check_gradient(f, &flat(&g), &point, 1e-6).unwrap();
                assert!(err < 1e-4, "seed {seed} mode {}: {err}", mode.id);
            }
        }
    }

    #[test]
    fn sequential_and_parallel_gradients_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (u, p) = tables(&mut rng);
        let batch = rows(&mut rng, 300);
        let mut m = SalesModel::init(&u, &p, ExperimentMode::ALL[3], tiny_config()).unwrap();
        m.config.execution = Execution::Sequential;
        let a = m.mse_loss(&batch).unwrap();
        m.config.execution = Execution::Parallel;
        assert_eq!(a, m.mse_loss(&batch).unwrap());
    }

    #[test]
    fn frozen_tables_stay_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (u, p) = tables(&mut rng);
        let data = SalesDataset::new(rows(&mut rng, 40), 4, 6).unwrap();
        for mode in ExperimentMode::ALL {
            let m = train_sales(&data, &u, &p, mode, &tiny_config()).unwrap();
            assert_eq!(m.user_table == u, !mode.continue_user, "mode {}", mode.id);
            assert_eq!(m.prod_table == p, !mode.continue_prod, "mode {}", mode.id);
        }
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (u, p) = tables(&mut rng);
        let data = SalesDataset::new(rows(&mut rng, 60), 4, 6).unwrap();
        let cfg = SalesConfig {
            epochs: 40,
            ..tiny_config()
        };
        let a = train_sales(&data, &u, &p, ExperimentMode::ALL[3], &cfg).unwrap();
        let b = train_sales(&data, &u, &p, ExperimentMode::ALL[3], &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.loss_history.last().unwrap() < &a.loss_history[0]);
    }

    #[test]
    fn r2_examples() {
        let y = [1.0, 2.0, 3.0];
        assert_eq!(r2_score(&y, &y).unwrap(), 1.0);
        assert_eq!(r2_score(&[2.0; 3], &y).unwrap(), 0.0);
        assert_eq!(r2_score(&[1.0, 2.0, 4.0], &y).unwrap(), 0.5);
        assert!(r2_score(&[1.0, 1.0], &[3.0, 3.0]).is_err());
        assert!(r2_score(&[1.0], &[3.0]).is_err());
    }

    #[test]
    fn dataset_from_records_aggregates_and_rejects_unknowns() {
        let vocab = crate::corpus::build_vocabulary(
            &[crate::corpus::Basket::new("t", Some("u1"), &["A", "B"])],
            1,
        )
        .unwrap();
        let rec = |u: &str, p: &str, a: f64| SpendRecord {
            user: u.into(),
            product: p.into(),
            amount: a,
        };
        let d = SalesDataset::from_records(
            &[
                rec("u1", "B", 1.0),
                rec("u1", "B", 2.5),
                rec("u1", "A", 1.0),
            ],
            &vocab,
        )
        .unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.rows[1].amount, 3.5);
        assert!(SalesDataset::from_records(&[rec("u2", "A", 1.0)], &vocab).is_err());
        assert!(SalesDataset::from_records(&[rec("u1", "Z", 1.0)], &vocab).is_err());
    }

    #[test]
    fn split_is_seeded_and_covers_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = SalesDataset::new(rows(&mut rng, 50), 4, 6).unwrap();
        let (a, b) = d.split(0.9, 7).unwrap();
        assert_eq!((a.len(), b.len()), (45, 5));
        assert_eq!(d.split(0.9, 7).unwrap(), (a.clone(), b.clone()));
        let mut all: Vec<_> = a
            .rows
            .iter()
            .chain(&b.rows)
            .map(|r| (r.user, r.product, r.amount.to_bits()))
            .collect();
        let mut orig: Vec<_> = d
            .rows
            .iter()
            .map(|r| (r.user, r.product, r.amount.to_bits()))
            .collect();
        all.sort();
        orig.sort();
        assert_eq!(all, orig);
    }

    #[test]
    fn experiments_report_four_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (u, p) = tables(&mut rng);
        let data = SalesDataset::new(rows(&mut rng, 60), 4, 6).unwrap();
        let (report, models) = run_experiments(&data, &u, &p, &tiny_config()).unwrap();
        assert_eq!(
            report.rows.iter().map(|r| r.mode.id).collect::<Vec<_>>(),
            vec![1, 2, 3, 4]
        );
        assert_eq!(models.len(), 4);
        // every mode starts from the same kernels
        let init = SalesModel::init(&u, &p, ExperimentMode::ALL[0], tiny_config()).unwrap();
        let again = SalesModel::init(&u, &p, ExperimentMode::ALL[3], tiny_config()).unwrap();
        assert_eq!(init.dense1_w, again.dense1_w);
        let mut csv = Vec::new();
        report.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("mode,continue_user,continue_prod,r2\n1,false,false,"));
        assert_eq!(text.lines().count(), 5);
        assert!(report.to_text().contains("✓"));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (u, p) = tables(&mut rng);
        let data = SalesDataset::new(rows(&mut rng, 20), 4, 6).unwrap();
        let m = train_sales(&data, &u, &p, ExperimentMode::ALL[2], &tiny_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        assert_eq!(SalesModel::load(dir.path()).unwrap(), m);
    }
}
