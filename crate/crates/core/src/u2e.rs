//! User-to-Embeddings: the CBOW product model with the basket owner's vector
//! prepended to the context, trained jointly with the product vectors.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cbow::{self, CbowAccumulators, CbowParams, TrainSettings};
use crate::checkpoint;
use crate::corpus::{EncodedBasket, Vocabulary};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::numkit::Matrix;
use crate::p2e::validate_adagrad;

pub use crate::cbow::{training_examples, CbowGradients as Gradients, ContextExample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct U2EConfig {
    pub user_dim: usize,
    pub product_dim: usize,
    pub context: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub initial_accumulator: f64,
    pub seed: u64,
    pub execution: Execution,
    pub deterministic: bool,
    /// Users with fewer baskets keep untrustworthy vectors.
    pub min_transactions: u64,
}

impl Default for U2EConfig {
    fn default() -> Self {
        U2EConfig {
            user_dim: 32,
            product_dim: 128,
            context: 4,
            epochs: 50,
            learning_rate: 1.0,
            initial_accumulator: 0.1,
            seed: 42,
            execution: Execution::default(),
            deterministic: true,
            min_transactions: 5,
        }
    }
}

impl U2EConfig {
    pub fn validate(&self) -> Result<()> {
        if self.user_dim == 0 || self.product_dim == 0 {
            return Err(Error::config("u2e dims must be >= 1"));
        }
        if self.context == 0 {
            return Err(Error::config("u2e context must be >= 1"));
        }
        if self.epochs == 0 {
            return Err(Error::config("u2e epochs must be >= 1"));
        }
        validate_adagrad(self.learning_rate, self.initial_accumulator)
    }
}

/// A CBOW example tagged with the basket owner (`None` = anonymous).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserExample {
    pub user: Option<usize>,
    pub example: ContextExample,
}

#[derive(Debug, Clone)]
pub struct U2ELoss {
    pub loss: f64,
    pub gradients: Gradients,
    /// Anonymous examples left out of the batch.
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct U2EModel {
    params: CbowParams,
    pub config: U2EConfig,
    /// Training examples processed per user, summed over epochs.
    pub user_examples: Vec<u64>,
    /// Identified trainable baskets per user.
    pub user_transactions: Vec<u64>,
    /// Anonymous baskets excluded from training.
    pub skipped_anonymous: usize,
    pub loss_history: Vec<f64>,
    pub vocab_fingerprint: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    kind: String,
    n_products: usize,
    n_users: usize,
    user_dim: usize,
    product_dim: usize,
    context: usize,
    epochs: usize,
    seed: u64,
    learning_rate: f64,
    initial_accumulator: f64,
    min_transactions: u64,
    skipped_anonymous: usize,
    vocab_hash: String,
    loss_history: Vec<f64>,
}

impl U2EModel {
    pub fn with_sizes(n_products: usize, n_users: usize, config: U2EConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        Self::init_with(n_products, n_users, String::new(), config, &mut rng)
    }

    fn init_with(
        n_products: usize,
        n_users: usize,
        vocab_fingerprint: String,
        config: U2EConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        if n_products < 2 {
            return Err(Error::config(format!(
                "need at least 2 products, vocabulary has {n_products}"
            )));
        }
        let (dp, du) = (config.product_dim, config.user_dim);
        let prod = Matrix::uniform(n_products, dp, 0.5 / dp as f64, rng);
        let user = Matrix::uniform(n_users, du, 0.5 / du as f64, rng);
        let params = CbowParams {
            prod,
            user: Some(user),
            out_w: Matrix::zeros(n_products, du + config.context * dp),
            out_b: vec![0.0; n_products],
            context: config.context,
        };
        Ok(U2EModel {
            params,
            config,
            user_examples: vec![0; n_users],
            user_transactions: vec![0; n_users],
            skipped_anonymous: 0,
            loss_history: Vec::new(),
            vocab_fingerprint,
        })
    }

    pub fn n_products(&self) -> usize {
        self.params.n_products()
    }

    pub fn n_users(&self) -> usize {
        self.user_embeddings().rows()
    }

    pub fn product_embeddings(&self) -> &Matrix {
        &self.params.prod
    }

    pub fn user_embeddings(&self) -> &Matrix {
        self.params
            .user
            .as_ref()
            .expect("u2e always has a user table")
    }

    pub fn output_weights(&self) -> &Matrix {
        &self.params.out_w
    }

    pub fn output_bias(&self) -> &[f64] {
        &self.params.out_b
    }

    pub fn user_embedding(&self, user: usize) -> Result<&[f64]> {
        if user >= self.n_users() {
            return Err(Error::OutOfRange {
                index: user,
                len: self.n_users(),
            });
        }
        Ok(self.user_embeddings().row(user))
    }

    /// Product embeddings, user embeddings, output weights, output bias.
    pub fn params_mut(&mut self) -> [&mut [f64]; 4] {
        let p = &mut self.params;
        [
            p.prod.as_mut_slice(),
            p.user.as_mut().expect("user table").as_mut_slice(),
            p.out_w.as_mut_slice(),
            p.out_b.as_mut_slice(),
        ]
    }

    pub fn distribution(&self, user: usize, example: &ContextExample) -> Result<Vec<f64>> {
        self.params.distribution(Some(user), example)
    }

    /// Mean negative log-likelihood over the identified examples of `batch`.
    /// Anonymous examples are skipped and counted.
    pub fn forward_loss(&self, batch: &[UserExample]) -> Result<U2ELoss> {
        let kept: Vec<_> = batch
            .iter()
            .filter(|e| e.user.is_some())
            .map(|e| (e.user, &e.example))
            .collect();
        let skipped = batch.len() - kept.len();
        if kept.is_empty() {
            return Err(Error::Empty("batch without identified users"));
        }
        let (loss, gradients) = self.params.loss_and_grads(&kept)?;
        Ok(U2ELoss {
            loss,
            gradients,
            skipped,
        })
    }

    /// Users whose basket count reaches `min_transactions`.
    pub fn optimized_users(&self, min_transactions: u64) -> BTreeSet<usize> {
        self.user_transactions
            .iter()
            .enumerate()
            .filter(|(_, &n)| n >= min_transactions)
            .map(|(u, _)| u)
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        checkpoint::create_dir(dir)?;
        checkpoint::write_tensor(dir, "product_embeddings", &self.params.prod)?;
        checkpoint::write_tensor(dir, "user_embeddings", self.user_embeddings())?;
        checkpoint::write_tensor(dir, "output_weights", &self.params.out_w)?;
        checkpoint::write_vector(dir, "output_bias", &self.params.out_b)?;
        let mut w = checkpoint::create_file(&dir.join("counters.csv"))?;
        writeln!(w, "user,examples,transactions")?;
        for (u, (e, t)) in self
            .user_examples
            .iter()
            .zip(&self.user_transactions)
            .enumerate()
        {
            writeln!(w, "{u},{e},{t}")?;
        }
        w.flush()?;
        let c = &self.config;
        checkpoint::write_meta(
            dir,
            &Meta {
                kind: "u2e".into(),
                n_products: self.n_products(),
                n_users: self.n_users(),
                user_dim: c.user_dim,
                product_dim: c.product_dim,
                context: c.context,
                epochs: c.epochs,
                seed: c.seed,
                learning_rate: c.learning_rate,
                initial_accumulator: c.initial_accumulator,
                min_transactions: c.min_transactions,
                skipped_anonymous: self.skipped_anonymous,
                vocab_hash: self.vocab_fingerprint.clone(),
                loss_history: self.loss_history.clone(),
            },
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: Meta = checkpoint::read_meta(dir)?;
        if meta.kind != "u2e" {
            return Err(Error::config(format!(
                "{} is a {} checkpoint",
                dir.display(),
                meta.kind
            )));
        }
        let params = CbowParams {
            prod: checkpoint::read_tensor(dir, "product_embeddings")?,
            user: Some(checkpoint::read_tensor(dir, "user_embeddings")?),
            out_w: checkpoint::read_tensor(dir, "output_weights")?,
            out_b: checkpoint::read_vector(dir, "output_bias")?,
            context: meta.context,
        };
        if params.prod.shape() != (meta.n_products, meta.product_dim)
            || params.user.as_ref().map(Matrix::shape) != Some((meta.n_users, meta.user_dim))
            || params.out_w.shape()
                != (
                    meta.n_products,
                    meta.user_dim + meta.context * meta.product_dim,
                )
        {
            return Err(Error::dim(format!(
                "{}: tensors disagree with meta.json",
                dir.display()
            )));
        }
        let mut user_examples = Vec::with_capacity(meta.n_users);
        let mut user_transactions = Vec::with_capacity(meta.n_users);
        for (n, line) in checkpoint::open_file(&dir.join("counters.csv"))?
            .lines()
            .enumerate()
            .skip(1)
        {
            let line = line?;
            let f: Vec<&str> = line.split(',').collect();
            let parse = |s: Option<&&str>| -> Result<u64> {
                s.and_then(|s| s.parse().ok()).ok_or(Error::Parse {
                    line: n + 1,
                    msg: "bad counter row".into(),
                })
            };
            user_examples.push(parse(f.get(1))?);
            user_transactions.push(parse(f.get(2))?);
        }
        if user_examples.len() != meta.n_users {
            return Err(Error::dim("counters.csv row count".to_string()));
        }
        Ok(U2EModel {
            params,
            config: U2EConfig {
                user_dim: meta.user_dim,
                product_dim: meta.product_dim,
                context: meta.context,
                epochs: meta.epochs,
                learning_rate: meta.learning_rate,
                initial_accumulator: meta.initial_accumulator,
                seed: meta.seed,
                min_transactions: meta.min_transactions,
                ..Default::default()
            },
            user_examples,
            user_transactions,
            skipped_anonymous: meta.skipped_anonymous,
            loss_history: meta.loss_history,
            vocab_fingerprint: meta.vocab_hash,
        })
    }

    pub fn export_users_text<W: Write>(&self, w: W, vocab: &Vocabulary) -> Result<()> {
        checkpoint::write_embedding_text(w, vocab.user_tokens(), self.user_embeddings())
    }

    pub fn export_products_text<W: Write>(&self, w: W, vocab: &Vocabulary) -> Result<()> {
        checkpoint::write_embedding_text(w, vocab.product_tokens(), &self.params.prod)
    }
}

/// Train user and product vectors jointly on identified baskets.
pub fn train_u2e(
    baskets: &[EncodedBasket],
    vocab: &Vocabulary,
    config: U2EConfig,
) -> Result<U2EModel> {
    train_sized(
        baskets,
        vocab.n_products(),
        vocab.n_users(),
        vocab.fingerprint(),
        config,
    )
}

pub(crate) fn train_sized(
    baskets: &[EncodedBasket],
    n_products: usize,
    n_users: usize,
    fingerprint: String,
    config: U2EConfig,
) -> Result<U2EModel> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = U2EModel::init_with(n_products, n_users, fingerprint, config, &mut rng)?;
    let mut examples = Vec::new();
    for b in baskets.iter().filter(|b| b.items.len() >= 2) {
        let Some(u) = b.user else {
            model.skipped_anonymous += 1;
            continue;
        };
        if u >= n_users {
            return Err(Error::OutOfRange {
                index: u,
                len: n_users,
            });
        }
        model.user_transactions[u] += 1;
        for e in training_examples(&b.items, model.config.context) {
            model.params.check_example(Some(u), &e)?;
            examples.push((Some(u), e));
        }
    }
    if examples.is_empty() {
        return Err(Error::Empty("baskets with an identified user"));
    }
    if model.skipped_anonymous > 0 {
        log::info!("u2e: skipped {} anonymous baskets", model.skipped_anonymous);
    }
    let mut acc = CbowAccumulators::new(&model.params, model.config.initial_accumulator);
    let settings = TrainSettings {
        epochs: model.config.epochs,
        learning_rate: model.config.learning_rate,
        execution: model.config.execution,
        deterministic: model.config.deterministic,
    };
    let counters: Vec<AtomicU64> = (0..n_users).map(|_| AtomicU64::new(0)).collect();
    model.loss_history = cbow::train(
        &mut model.params,
        &mut acc,
        &examples,
        &settings,
        &mut rng,
        &counters,
    );
    model.user_examples = counters.iter().map(|c| c.load(Ordering::Relaxed)).collect();
    for (epoch, loss) in model.loss_history.iter().enumerate() {
        log::info!("u2e epoch {:>3}: mean loss {loss:.6}", epoch + 1);
    }
    if !model.params.prod.is_finite() || !model.user_embeddings().is_finite() {
        return Err(Error::NonFinite("u2e embeddings after training"));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::check_gradient;
    use rand::Rng;

    fn cfg(du: usize, dp: usize, c: usize) -> U2EConfig {
        U2EConfig {
            user_dim: du,
            product_dim: dp,
            context: c,
            epochs: 1,
            ..Default::default()
        }
    }

    fn uex(user: Option<usize>, target: usize, ctx: &[Option<usize>]) -> UserExample {
        UserExample {
            user,
            example: ContextExample {
                target,
                context: ctx.to_vec(),
            },
        }
    }

    #[test]
    fn uniform_initial_loss() {
        let m = U2EModel::with_sizes(8, 2, cfg(3, 2, 2)).unwrap();
        let out = m
            .forward_loss(&[
                uex(Some(1), 3, &[Some(0), None]),
                uex(Some(0), 5, &[Some(2), Some(4)]),
            ])
            .unwrap();
        assert!((out.loss - 8f64.ln()).abs() < 1e-12);
        assert!((out.loss - 2.079442).abs() < 1e-6);
    }

    #[test]
    fn anonymous_examples_are_skipped() {
        let m = U2EModel::with_sizes(4, 2, cfg(2, 2, 1)).unwrap();
        let out = m
            .forward_loss(&[uex(None, 0, &[Some(1)]), uex(Some(1), 2, &[Some(3)])])
            .unwrap();
        assert_eq!(out.skipped, 1);
        assert!(m.forward_loss(&[uex(None, 0, &[Some(1)])]).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut model = U2EModel::with_sizes(5, 3, cfg(2, 4, 2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for t in model.params_mut() {
            t.iter_mut().for_each(|x| *x = rng.gen_range(-0.5..0.5));
        }
        let batch = vec![
            uex(Some(0), 1, &[Some(2), Some(3)]),
            uex(Some(2), 4, &[Some(0), None]),
            uex(Some(2), 0, &[Some(4), Some(4)]),
        ];
        let out = model.forward_loss(&batch).unwrap();
        let g = &out.gradients;
        let analytic: Vec<f64> = [
            g.product_embeddings.as_slice(),
            g.user_embeddings.as_ref().unwrap().as_slice(),
            g.output_weights.as_slice(),
            &g.output_bias,
        ]
        .concat();
        let mut probe = model.clone();
        let point: Vec<f64> = probe.params_mut().iter().flat_map(|t| t.to_vec()).collect();
        let f = |x: &[f64]| {
            let mut m = model.clone();
            let mut off = 0;
            for t in m.params_mut() {
                t.copy_from_slice(&x[off..off + t.len()]);
                off += t.len();
            }
            m.forward_loss(&batch).unwrap().loss
        };
        let err = check_gradient(f, &analytic, &point, 1e-5).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn single_user_counter_equals_example_count() {
        let baskets = vec![
            EncodedBasket::new(Some(0), vec![0, 1, 2]),
            EncodedBasket::new(Some(0), vec![1, 2]),
            EncodedBasket::new(None, vec![0, 2]),
        ];
        let c = U2EConfig {
            epochs: 3,
            ..cfg(2, 3, 2)
        };
        let m = train_sized(&baskets, 3, 1, String::new(), c).unwrap();
        assert_eq!(m.user_examples, vec![3 * 5]);
        assert_eq!(m.user_transactions, vec![2]);
        assert_eq!(m.skipped_anonymous, 1);
    }

    #[test]
    fn untouched_users_keep_their_initial_vectors() {
        let baskets = vec![EncodedBasket::new(Some(1), vec![0, 1]); 4];
        let c = U2EConfig {
            epochs: 5,
            ..cfg(3, 2, 2)
        };
        let init = U2EModel::with_sizes(2, 3, c.clone()).unwrap();
        let m = train_sized(&baskets, 2, 3, String::new(), c).unwrap();
        assert_eq!(
            m.user_embedding(0).unwrap(),
            init.user_embedding(0).unwrap()
        );
        assert_eq!(
            m.user_embedding(2).unwrap(),
            init.user_embedding(2).unwrap()
        );
        assert_ne!(
            m.user_embedding(1).unwrap(),
            init.user_embedding(1).unwrap()
        );
    }

    #[test]
    fn training_is_deterministic_and_requires_users() {
        let baskets = vec![
            EncodedBasket::new(Some(0), vec![0, 1, 2]),
            EncodedBasket::new(Some(1), vec![2, 3]),
        ];
        let c = U2EConfig {
            epochs: 4,
            ..cfg(2, 3, 2)
        };
        let a = train_sized(&baskets, 4, 2, String::new(), c.clone()).unwrap();
        let b = train_sized(&baskets, 4, 2, String::new(), c.clone()).unwrap();
        assert_eq!(a, b);
        let anon = vec![EncodedBasket::new(None, vec![0, 1])];
        assert!(train_sized(&anon, 4, 2, String::new(), c).is_err());
        assert_eq!(U2EConfig::default().epochs, 50);
    }

    #[test]
    fn optimized_users_threshold() {
        let mut m = U2EModel::with_sizes(2, 3, cfg(2, 2, 1)).unwrap();
        m.user_transactions = vec![4, 5, 9];
        assert_eq!(m.optimized_users(5), BTreeSet::from([1, 2]));
        assert_eq!(m.optimized_users(0).len(), 3);
        for a in 0..10 {
            for b in a..10 {
                assert!(m.optimized_users(a).is_superset(&m.optimized_users(b)));
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let baskets = vec![EncodedBasket::new(Some(1), vec![0, 1, 2]); 3];
        let c = U2EConfig {
            epochs: 2,
            ..cfg(2, 3, 2)
        };
        let m = train_sized(&baskets, 3, 2, "abc".into(), c).unwrap();
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        let back = U2EModel::load(dir.path()).unwrap();
        assert_eq!(back.params, m.params);
        assert_eq!(back.user_examples, m.user_examples);
        assert_eq!(back.user_transactions, m.user_transactions);
        assert_eq!(back.vocab_fingerprint, "abc");
    }
}
