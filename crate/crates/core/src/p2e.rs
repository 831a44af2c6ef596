//! Product-to-Embeddings: CBOW over receipts with a concatenated context
//! projection and an exact softmax over the whole product vocabulary.

use std::io::Write;
use std::path::Path;
use std::sync::atomic::AtomicU64;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cbow::{self, CbowAccumulators, CbowParams, TrainSettings};
use crate::checkpoint;
use crate::corpus::{EncodedBasket, Vocabulary};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::numkit::Matrix;

pub use crate::cbow::{training_examples, CbowGradients as Gradients, ContextExample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct P2EConfig {
    pub dim: usize,
    pub context: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub initial_accumulator: f64,
    pub seed: u64,
    pub execution: Execution,
    /// Single-threaded, bitwise reproducible training. When off and
    /// `execution` is parallel, workers update shared tables lock-free.
    pub deterministic: bool,
}

impl Default for P2EConfig {
    fn default() -> Self {
        P2EConfig {
            dim: 128,
            context: 4,
            epochs: 50,
            learning_rate: 1.0,
            initial_accumulator: 0.1,
            seed: 42,
            execution: Execution::default(),
            deterministic: true,
        }
    }
}

impl P2EConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::config("p2e dim must be >= 1"));
        }
        if self.context == 0 {
            return Err(Error::config("p2e context must be >= 1"));
        }
        if self.epochs == 0 {
            return Err(Error::config("p2e epochs must be >= 1"));
        }
        validate_adagrad(self.learning_rate, self.initial_accumulator)
    }
}

pub(crate) fn validate_adagrad(lr: f64, acc0: f64) -> Result<()> {
    if !(lr.is_finite() && lr > 0.0) {
        return Err(Error::config("learning_rate must be positive"));
    }
    if !(acc0.is_finite() && acc0 > 0.0) {
        return Err(Error::config("initial_accumulator must be positive"));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct P2EModel {
    params: CbowParams,
    pub config: P2EConfig,
    /// Mean training loss of every epoch.
    pub loss_history: Vec<f64>,
    pub vocab_fingerprint: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    kind: String,
    n_products: usize,
    dim: usize,
    context: usize,
    epochs: usize,
    seed: u64,
    learning_rate: f64,
    initial_accumulator: f64,
    vocab_hash: String,
    loss_history: Vec<f64>,
}

impl P2EModel {
    /// Fresh model: input embeddings ~ `U(-0.5/D, 0.5/D)`, output layer zero,
    /// so the initial predictive distribution is exactly uniform.
    pub fn init(vocab: &Vocabulary, config: P2EConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        Self::init_with(vocab.n_products(), vocab.fingerprint(), config, &mut rng)
    }

    pub fn with_products(n_products: usize, config: P2EConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        Self::init_with(n_products, String::new(), config, &mut rng)
    }

    fn init_with(
        n_products: usize,
        vocab_fingerprint: String,
        config: P2EConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        if n_products < 2 {
            return Err(Error::config(format!(
                "need at least 2 products, vocabulary has {n_products}"
            )));
        }
        let d = config.dim;
        let params = CbowParams {
            prod: Matrix::uniform(n_products, d, 0.5 / d as f64, rng),
            user: None,
            out_w: Matrix::zeros(n_products, config.context * d),
            out_b: vec![0.0; n_products],
            context: config.context,
        };
        Ok(P2EModel {
            params,
            config,
            loss_history: Vec::new(),
            vocab_fingerprint,
        })
    }

    pub fn n_products(&self) -> usize {
        self.params.n_products()
    }

    /// The delivered product vectors (one row per product).
    pub fn input_embeddings(&self) -> &Matrix {
        &self.params.prod
    }

    pub fn output_weights(&self) -> &Matrix {
        &self.params.out_w
    }

    pub fn output_bias(&self) -> &[f64] {
        &self.params.out_b
    }

    pub fn embedding_of(&self, product: usize) -> Result<&[f64]> {
        if product >= self.n_products() {
            return Err(Error::OutOfRange {
                index: product,
                len: self.n_products(),
            });
        }
        Ok(self.params.prod.row(product))
    }

    /// Mutable access to every parameter, in a fixed order: input embeddings,
    /// output weights, output bias.
    pub fn params_mut(&mut self) -> [&mut [f64]; 3] {
        let p = &mut self.params;
        [
            p.prod.as_mut_slice(),
            p.out_w.as_mut_slice(),
            p.out_b.as_mut_slice(),
        ]
    }

    pub fn distribution(&self, example: &ContextExample) -> Result<Vec<f64>> {
        self.params.distribution(None, example)
    }

    /// Mean negative log-likelihood of `batch` under the full softmax, with
    /// gradients for every parameter.
    pub fn forward_loss(&self, batch: &[ContextExample]) -> Result<(f64, Gradients)> {
        let batch: Vec<_> = batch.iter().map(|e| (None, e)).collect();
        self.params.loss_and_grads(&batch)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        checkpoint::create_dir(dir)?;
        checkpoint::write_tensor(dir, "input_embeddings", &self.params.prod)?;
        checkpoint::write_tensor(dir, "output_weights", &self.params.out_w)?;
        checkpoint::write_vector(dir, "output_bias", &self.params.out_b)?;
        let c = &self.config;
        checkpoint::write_meta(
            dir,
            &Meta {
                kind: "p2e".into(),
                n_products: self.n_products(),
                dim: c.dim,
                context: c.context,
                epochs: c.epochs,
                seed: c.seed,
                learning_rate: c.learning_rate,
                initial_accumulator: c.initial_accumulator,
                vocab_hash: self.vocab_fingerprint.clone(),
                loss_history: self.loss_history.clone(),
            },
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: Meta = checkpoint::read_meta(dir)?;
        if meta.kind != "p2e" {
            return Err(Error::config(format!(
                "{} is a {} checkpoint",
                dir.display(),
                meta.kind
            )));
        }
        let params = CbowParams {
            prod: checkpoint::read_tensor(dir, "input_embeddings")?,
            user: None,
            out_w: checkpoint::read_tensor(dir, "output_weights")?,
            out_b: checkpoint::read_vector(dir, "output_bias")?,
            context: meta.context,
        };
        if params.prod.shape() != (meta.n_products, meta.dim)
            || params.out_w.shape() != (meta.n_products, meta.context * meta.dim)
            || params.out_b.len() != meta.n_products
        {
            return Err(Error::dim(format!(
                "{}: tensors disagree with meta.json",
                dir.display()
            )));
        }
        Ok(P2EModel {
            params,
            config: P2EConfig {
                dim: meta.dim,
                context: meta.context,
                epochs: meta.epochs,
                learning_rate: meta.learning_rate,
                initial_accumulator: meta.initial_accumulator,
                seed: meta.seed,
                ..Default::default()
            },
            loss_history: meta.loss_history,
            vocab_fingerprint: meta.vocab_hash,
        })
    }

    pub fn export_text<W: Write>(&self, w: W, vocab: &Vocabulary) -> Result<()> {
        checkpoint::write_embedding_text(w, vocab.product_tokens(), &self.params.prod)
    }
}

/// Train product embeddings on encoded baskets.
///
/// Every basket with at least two items contributes one example per
/// position; examples are shuffled every epoch and each one triggers an
/// Adagrad update.
pub fn train(baskets: &[EncodedBasket], vocab: &Vocabulary, config: P2EConfig) -> Result<P2EModel> {
    train_sized(baskets, vocab.n_products(), vocab.fingerprint(), config)
}

pub(crate) fn train_sized(
    baskets: &[EncodedBasket],
    n_products: usize,
    fingerprint: String,
    config: P2EConfig,
) -> Result<P2EModel> {
    config.validate()?;
    let examples: Vec<(Option<usize>, ContextExample)> = baskets
        .iter()
        .filter(|b| b.items.len() >= 2)
        .flat_map(|b| training_examples(&b.items, config.context))
        .map(|e| (None, e))
        .collect();
    if examples.is_empty() {
        return Err(Error::Empty("trainable baskets"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = P2EModel::init_with(n_products, fingerprint, config, &mut rng)?;
    for (_, e) in &examples {
        model.params.check_example(None, e)?;
    }
    let mut acc = CbowAccumulators::new(&model.params, model.config.initial_accumulator);
    let settings = TrainSettings {
        epochs: model.config.epochs,
        learning_rate: model.config.learning_rate,
        execution: model.config.execution,
        deterministic: model.config.deterministic,
    };
    let counters: [AtomicU64; 0] = [];
    model.loss_history = cbow::train(
        &mut model.params,
        &mut acc,
        &examples,
        &settings,
        &mut rng,
        &counters,
    );
    for (epoch, loss) in model.loss_history.iter().enumerate() {
        log::info!("p2e epoch {:>3}: mean loss {loss:.6}", epoch + 1);
    }
    if !model.params.prod.is_finite() {
        return Err(Error::NonFinite("p2e embeddings after training"));
    }
    Ok(model)
}
