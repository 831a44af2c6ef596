//! File-to-file stages behind the `prodvec` command-line tool.
//!
//! Everything lives under one output directory:
//!
//! ```text
//! out/corpus/    products.tsv users.tsv encoded.jsonl stats.json
//! out/p2e/       checkpoint, embeddings.txt, loss.csv
//! out/u2e/       checkpoint, users.txt, products.txt, loss.csv
//! out/prove/     checkpoint, cooccurrence.txt, embeddings.txt, loss.csv
//! out/concepts/  centroids.bin assignment.csv meta.json
//! out/sales/     report.csv report.txt mode_<id>/
//! ```

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::basket::{market_basket, BasketReport, EmbeddingSpace};
use crate::checkpoint::{create_dir, create_file, open_file};
use crate::concepts::{kmeans_fit, ConceptModel, KMeansConfig};
use crate::corpus::{
    build_vocabulary, encode_baskets, filter_trainable, generate_synthetic, parse_transactions,
    read_encoded, read_spend, write_encoded, write_jsonl, write_spend, EncodedBasket, InputFormat,
    SyntheticSpec, Vocabulary,
};
use crate::error::{Error, Result};
use crate::numkit::{format_float, Matrix};
use crate::p2e::{self, P2EConfig, P2EModel};
use crate::prove::{build_cooccurrence_with, train_prove, ProVeConfig, ProVeModel};
use crate::salesnet::{
    run_experiments, run_mode, ExperimentMode, ExperimentReport, SalesConfig, SalesDataset,
};
use crate::u2e::{train_u2e, U2EConfig, U2EModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub transactions: PathBuf,
    /// Per-(user, product) spend CSV for the sales stage.
    pub spend: PathBuf,
    pub output: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            transactions: "transactions.jsonl".into(),
            spend: "sales.csv".into(),
            output: "out".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusOptions {
    pub format: InputFormat,
    pub min_count: u64,
    /// Reject unknown products instead of dropping them.
    pub strict: bool,
}

impl Default for CorpusOptions {
    fn default() -> Self {
        CorpusOptions {
            format: InputFormat::Jsonl,
            min_count: 1,
            strict: false,
        }
    }
}

/// Which trained table provides product vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    #[default]
    P2e,
    Prove,
    U2e,
}

impl FromStr for Source {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "p2e" => Ok(Source::P2e),
            "prove" => Ok(Source::Prove),
            "u2e" => Ok(Source::U2e),
            other => Err(Error::config(format!(
                "unknown embedding source `{other}` (p2e, prove, u2e)"
            ))),
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::P2e => "p2e",
            Source::Prove => "prove",
            Source::U2e => "u2e",
        })
    }
}

/// A trainable embedding stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    P2e,
    Prove,
    U2e,
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "p2e" => Ok(Stage::P2e),
            "prove" => Ok(Stage::Prove),
            "u2e" => Ok(Stage::U2e),
            other => Err(Error::config(format!(
                "unknown stage `{other}` (p2e, prove, u2e)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConceptOptions {
    pub source: Source,
    #[serde(flatten)]
    pub kmeans: KMeansConfig,
}

impl Default for ConceptOptions {
    fn default() -> Self {
        ConceptOptions {
            source: Source::P2e,
            kmeans: KMeansConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SalesOptions {
    /// Product table handed to the regressor; the user table always comes
    /// from the joint user model.
    pub product_source: Source,
    #[serde(flatten)]
    pub net: SalesConfig,
}

impl Default for SalesOptions {
    fn default() -> Self {
        SalesOptions {
            product_source: Source::P2e,
            net: SalesConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Overrides every block's seed when present.
    pub seed: Option<u64>,
    /// Forces reproducible (single-writer) embedding training.
    pub deterministic: bool,
    pub paths: Paths,
    pub corpus: CorpusOptions,
    pub p2e: P2EConfig,
    pub u2e: U2EConfig,
    pub prove: ProVeConfig,
    pub concepts: ConceptOptions,
    pub sales: SalesOptions,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        Ok(cfg.resolved())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    /// Push the global seed and determinism flag into every block.
    pub fn resolved(mut self) -> Self {
        if let Some(seed) = self.seed {
            self.p2e.seed = seed;
            self.u2e.seed = seed;
            self.prove.seed = seed;
            self.concepts.kmeans.seed = seed;
            self.sales.net.seed = seed;
        }
        self.p2e.deterministic = self.deterministic;
        self.u2e.deterministic = self.deterministic;
        self.prove.deterministic = self.deterministic;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.p2e.validate()?;
        self.u2e.validate()?;
        self.prove.validate()?;
        self.sales.net.validate()?;
        if self.concepts.kmeans.k == 0 {
            return Err(Error::config("concepts.k must be >= 1"));
        }
        Ok(())
    }

    fn dir(&self, name: &str) -> PathBuf {
        self.paths.output.join(name)
    }
}

const CORPUS: &str = "corpus";

fn write_loss_csv(path: &Path, history: &[f64]) -> Result<()> {
    let mut w = create_file(path)?;
    writeln!(w, "epoch,loss")?;
    for (e, l) in history.iter().enumerate() {
        writeln!(w, "{},{}", e + 1, format_float(*l))?;
    }
    w.flush()?;
    Ok(())
}

fn write_with(path: &Path, f: impl FnOnce(&mut BufWriter<fs::File>) -> Result<()>) -> Result<()> {
    let mut w = create_file(path)?;
    f(&mut w)?;
    w.flush()?;
    Ok(())
}

/// Write a synthetic corpus with its oracle files into `dir`.
pub fn cmd_synth(spec: &SyntheticSpec, dir: &Path) -> Result<SynthSummary> {
    let corpus = generate_synthetic(spec)?;
    create_dir(dir)?;
    write_with(&dir.join("transactions.jsonl"), |w| {
        write_jsonl(&corpus.baskets, w)
    })?;
    corpus.write_oracles(dir)?;
    let spend = corpus.spend_records();
    write_with(&dir.join("sales.csv"), |w| write_spend(&spend, w))?;
    Ok(SynthSummary {
        baskets: corpus.baskets.len(),
        products: spec.n_products(),
        users: spec.n_users,
        spend_rows: spend.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub baskets: usize,
    pub products: usize,
    pub users: usize,
    pub spend_rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub baskets_read: usize,
    pub singletons_dropped: usize,
    pub unknown_items_dropped: usize,
    pub baskets_dropped_after_encoding: usize,
    pub trainable_baskets: usize,
    pub products: usize,
    pub users: usize,
}

/// Parse, filter, build the vocabulary and encode.
pub fn cmd_ingest(cfg: &PipelineConfig) -> Result<CorpusStats> {
    let raw = parse_transactions(&cfg.paths.transactions, cfg.corpus.format)?;
    let trainable = filter_trainable(&raw);
    let vocab = build_vocabulary(&trainable, cfg.corpus.min_count)?;
    let enc = encode_baskets(&trainable, &vocab, cfg.corpus.strict)?;
    if enc.baskets.is_empty() {
        return Err(Error::Empty("trainable baskets after encoding"));
    }
    let stats = CorpusStats {
        baskets_read: raw.len(),
        singletons_dropped: raw.len() - trainable.len(),
        unknown_items_dropped: enc.dropped_items,
        baskets_dropped_after_encoding: enc.dropped_baskets,
        trainable_baskets: enc.baskets.len(),
        products: vocab.n_products(),
        users: vocab.n_users(),
    };
    let dir = cfg.dir(CORPUS);
    create_dir(&dir)?;
    write_with(&dir.join("products.tsv"), |w| vocab.write_products(w))?;
    write_with(&dir.join("users.tsv"), |w| vocab.write_users(w))?;
    write_with(&dir.join("encoded.jsonl"), |w| {
        write_encoded(&enc.baskets, w)
    })?;
    write_with(&dir.join("stats.json"), |w| {
        serde_json::to_writer_pretty(&mut *w, &stats)?;
        Ok(writeln!(w)?)
    })?;
    Ok(stats)
}

/// Vocabulary and encoded baskets written by [`cmd_ingest`].
pub fn load_corpus(cfg: &PipelineConfig) -> Result<(Vocabulary, Vec<EncodedBasket>)> {
    let dir = cfg.dir(CORPUS);
    let vocab = Vocabulary::read(
        open_file(&dir.join("products.tsv"))?,
        open_file(&dir.join("users.tsv"))?,
        cfg.corpus.min_count,
    )?;
    let baskets = read_encoded(open_file(&dir.join("encoded.jsonl"))?)?;
    Ok((vocab, baskets))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub dir: PathBuf,
    pub loss_history: Vec<f64>,
}

pub fn cmd_train(cfg: &PipelineConfig, stage: Stage) -> Result<TrainSummary> {
    let (vocab, baskets) = load_corpus(cfg)?;
    match stage {
        Stage::P2e => {
            let model = p2e::train(&baskets, &vocab, cfg.p2e.clone())?;
            let dir = cfg.dir("p2e");
            model.save(&dir)?;
            write_with(&dir.join("embeddings.txt"), |w| {
                model.export_text(w, &vocab)
            })?;
            write_loss_csv(&dir.join("loss.csv"), &model.loss_history)?;
            Ok(TrainSummary {
                dir,
                loss_history: model.loss_history,
            })
        }
        Stage::U2e => {
            let model = train_u2e(&baskets, &vocab, cfg.u2e.clone())?;
            let dir = cfg.dir("u2e");
            model.save(&dir)?;
            write_with(&dir.join("users.txt"), |w| {
                model.export_users_text(w, &vocab)
            })?;
            write_with(&dir.join("products.txt"), |w| {
                model.export_products_text(w, &vocab)
            })?;
            write_loss_csv(&dir.join("loss.csv"), &model.loss_history)?;
            Ok(TrainSummary {
                dir,
                loss_history: model.loss_history,
            })
        }
        Stage::Prove => {
            let table = build_cooccurrence_with(&baskets, vocab.n_products(), cfg.prove.execution);
            let mut model = train_prove(&table, cfg.prove.clone())?;
            model.vocab_fingerprint = vocab.fingerprint();
            let dir = cfg.dir("prove");
            model.save(&dir)?;
            write_with(&dir.join("cooccurrence.txt"), |w| table.write_text(w))?;
            write_with(&dir.join("embeddings.txt"), |w| {
                model.export_text(w, &vocab)
            })?;
            write_loss_csv(&dir.join("loss.csv"), &model.loss_history)?;
            Ok(TrainSummary {
                dir,
                loss_history: model.loss_history,
            })
        }
    }
}

/// Product vectors from a trained stage.
pub fn product_table(cfg: &PipelineConfig, source: Source) -> Result<Matrix> {
    Ok(match source {
        Source::P2e => P2EModel::load(&cfg.dir("p2e"))?.input_embeddings().clone(),
        Source::Prove => ProVeModel::load(&cfg.dir("prove"))?.final_embeddings(),
        Source::U2e => U2EModel::load(&cfg.dir("u2e"))?
            .product_embeddings()
            .clone(),
    })
}

pub fn cmd_cluster(cfg: &PipelineConfig) -> Result<ConceptModel> {
    let (vocab, _) = load_corpus(cfg)?;
    let table = product_table(cfg, cfg.concepts.source)?;
    let model = kmeans_fit(&table, &cfg.concepts.kmeans)?;
    model.save(&cfg.dir("concepts"), &vocab)?;
    Ok(model)
}

/// Complementary basket for `product`, using the embeddings the concepts
/// were fitted on.
pub fn cmd_basket(
    cfg: &PipelineConfig,
    product: &str,
    k: usize,
    over_fetch: bool,
) -> Result<BasketReport> {
    if k == 0 {
        return Err(Error::config("k must be >= 1"));
    }
    let (vocab, _) = load_corpus(cfg)?;
    let query = vocab
        .product(product)
        .ok_or_else(|| Error::UnknownToken(product.to_string()))?;
    let concepts = ConceptModel::load(&cfg.dir("concepts"), &vocab)?;
    let space = EmbeddingSpace::new(product_table(cfg, cfg.concepts.source)?)?;
    let basket = market_basket(&space, &concepts, query, k, over_fetch)?;
    BasketReport::new(product, k, &basket, &vocab)
}

/// Run one freeze mode (`Some(id)`) or all four, writing the report and
/// a checkpoint per mode.
pub fn cmd_sales(cfg: &PipelineConfig, mode: Option<u8>) -> Result<ExperimentReport> {
    let mode = mode.map(ExperimentMode::from_id).transpose()?;
    let (vocab, _) = load_corpus(cfg)?;
    let records = read_spend(open_file(&cfg.paths.spend)?)?;
    let data = SalesDataset::from_records(&records, &vocab)?;
    let users = U2EModel::load(&cfg.dir("u2e"))?.user_embeddings().clone();
    let products = product_table(cfg, cfg.sales.product_source)?;
    let net = &cfg.sales.net;
    let (report, models) = match mode {
        None => run_experiments(&data, &users, &products, net)?,
        Some(m) => {
            let (train, test) = data.split(net.train_fraction, net.seed)?;
            let (row, model) = run_mode(&data, &users, &products, m, net)?;
            let report = ExperimentReport {
                rows: vec![row],
                n_train: train.len(),
                n_test: test.len(),
            };
            (report, vec![model])
        }
    };
    let dir = cfg.dir("sales");
    create_dir(&dir)?;
    for m in &models {
        m.save(&dir.join(format!("mode_{}", m.mode.id)))?;
    }
    write_with(&dir.join("report.csv"), |w| report.write_csv(w))?;
    write_with(&dir.join("report.txt"), |w| {
        Ok(w.write_all(report.to_text().as_bytes())?)
    })?;
    Ok(report)
}

/// What [`cmd_export`] can write.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportTable {
    P2e,
    Prove,
    U2eUsers,
    U2eProducts,
}

impl FromStr for ExportTable {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "p2e" => Ok(ExportTable::P2e),
            "prove" => Ok(ExportTable::Prove),
            "u2e-users" => Ok(ExportTable::U2eUsers),
            "u2e-products" => Ok(ExportTable::U2eProducts),
            other => Err(Error::config(format!(
                "unknown table `{other}` (p2e, prove, u2e-users, u2e-products)"
            ))),
        }
    }
}

/// Text export of a trained table in `token v1 .. vD` form.
pub fn cmd_export<W: Write>(cfg: &PipelineConfig, table: ExportTable, w: W) -> Result<()> {
    let (vocab, _) = load_corpus(cfg)?;
    match table {
        ExportTable::P2e => P2EModel::load(&cfg.dir("p2e"))?.export_text(w, &vocab),
        ExportTable::Prove => ProVeModel::load(&cfg.dir("prove"))?.export_text(w, &vocab),
        ExportTable::U2eUsers => U2EModel::load(&cfg.dir("u2e"))?.export_users_text(w, &vocab),
        ExportTable::U2eProducts => {
            U2EModel::load(&cfg.dir("u2e"))?.export_products_text(w, &vocab)
        }
    }
}
