//! Transaction data: baskets, file ingestion, the vocabulary, integer
//! encoding and a synthetic generator with known group structure.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// One receipt. Item order is the in-receipt position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Basket {
    #[serde(rename = "tx")]
    pub transaction_id: String,
    #[serde(rename = "user", default, skip_serializing_if = "Option::is_none")]
    pub user_id: Option<String>,
    pub items: Vec<String>,
}

impl Basket {
    pub fn new(tx: impl Into<String>, user: Option<&str>, items: &[&str]) -> Self {
        Basket {
            transaction_id: tx.into(),
            user_id: user.map(str::to_string),
            items: items.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum InputFormat {
    #[default]
    Jsonl,
    Csv,
}

impl FromStr for InputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" | "json" => Ok(InputFormat::Jsonl),
            "csv" => Ok(InputFormat::Csv),
            other => Err(Error::config(format!("unknown input format `{other}`"))),
        }
    }
}

pub fn parse_transactions(path: impl AsRef<Path>, format: InputFormat) -> Result<Vec<Basket>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::file(path, e))?;
    match format {
        InputFormat::Jsonl => read_jsonl(BufReader::new(file)),
        InputFormat::Csv => read_csv(file),
    }
}

/// One basket per line; blank lines are skipped.
pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Vec<Basket>> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let basket: Basket = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: n + 1,
            msg: e.to_string(),
        })?;
        if basket.items.is_empty() {
            return Err(Error::Parse {
                line: n + 1,
                msg: format!("transaction `{}` has no items", basket.transaction_id),
            });
        }
        out.push(basket);
    }
    Ok(out)
}

pub fn write_jsonl<W: Write>(baskets: &[Basket], mut w: W) -> Result<()> {
    for b in baskets {
        serde_json::to_writer(&mut w, b)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Deserialize)]
struct CsvItem {
    transaction_id: String,
    user_id: Option<String>,
    product: String,
    position: usize,
}

/// User and positioned items of a transaction still being read.
type PendingBasket = (Option<String>, Vec<(usize, String)>);

/// Long format: one row per item with header
/// `transaction_id,user_id,product,position`. Transactions keep the order in
/// which they first appear; items are sorted by `position`.
pub fn read_csv<R: Read>(reader: R) -> Result<Vec<Basket>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, PendingBasket> = HashMap::new();
    for rec in rdr.deserialize::<CsvItem>() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            msg: e.to_string(),
        })?;
        let user = rec.user_id.filter(|u| !u.is_empty());
        let entry = groups.entry(rec.transaction_id.clone()).or_insert_with(|| {
            order.push(rec.transaction_id.clone());
            (user.clone(), Vec::new())
        });
        if entry.0 != user {
            return Err(Error::Parse {
                line: 0,
                msg: format!(
                    "transaction `{}` lists more than one user",
                    rec.transaction_id
                ),
            });
        }
        entry.1.push((rec.position, rec.product));
    }
    Ok(order
        .into_iter()
        .map(|tx| {
            let (user_id, mut items) = groups.remove(&tx).unwrap_or_default();
            items.sort_by_key(|(pos, _)| *pos);
            Basket {
                transaction_id: tx,
                user_id,
                items: items.into_iter().map(|(_, p)| p).collect(),
            }
        })
        .collect())
}

pub fn write_csv<W: Write>(baskets: &[Basket], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["transaction_id", "user_id", "product", "position"])?;
    for b in baskets {
        for (pos, item) in b.items.iter().enumerate() {
            wtr.write_record([
                b.transaction_id.as_str(),
                b.user_id.as_deref().unwrap_or(""),
                item.as_str(),
                &pos.to_string(),
            ])?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Single-item receipts carry no co-purchase signal and are dropped.
pub fn filter_trainable(baskets: &[Basket]) -> Vec<Basket> {
    baskets.iter().filter(|b| b.len() >= 2).cloned().collect()
}

/// Bidirectional token/index maps for products and users.
///
/// Indices are dense and assigned in order of first appearance.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Vocabulary {
    product_index: HashMap<String, usize>,
    product_tokens: Vec<String>,
    product_counts: Vec<u64>,
    user_index: HashMap<String, usize>,
    user_tokens: Vec<String>,
    user_counts: Vec<u64>,
    pub min_count: u64,
}

impl Vocabulary {
    pub fn n_products(&self) -> usize {
        self.product_tokens.len()
    }

    pub fn n_users(&self) -> usize {
        self.user_tokens.len()
    }

    pub fn product(&self, token: &str) -> Option<usize> {
        self.product_index.get(token).copied()
    }

    pub fn user(&self, token: &str) -> Option<usize> {
        self.user_index.get(token).copied()
    }

    pub fn product_token(&self, id: usize) -> Option<&str> {
        self.product_tokens.get(id).map(String::as_str)
    }

    pub fn user_token(&self, id: usize) -> Option<&str> {
        self.user_tokens.get(id).map(String::as_str)
    }

    pub fn product_tokens(&self) -> &[String] {
        &self.product_tokens
    }

    pub fn user_tokens(&self) -> &[String] {
        &self.user_tokens
    }

    pub fn product_count(&self, id: usize) -> u64 {
        self.product_counts[id]
    }

    /// Number of baskets the user appears in.
    pub fn user_count(&self, id: usize) -> u64 {
        self.user_counts[id]
    }

    /// Vocabulary with the given products, all counted once and no users.
    pub fn from_products<S: AsRef<str>>(tokens: &[S]) -> Self {
        let mut v = Vocabulary {
            min_count: 1,
            ..Default::default()
        };
        for t in tokens {
            push_token(
                &mut v.product_index,
                &mut v.product_tokens,
                &mut v.product_counts,
                t.as_ref(),
                1,
            );
        }
        v
    }

    /// SHA-256 over all tokens, hex encoded. Changes whenever an index would.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.product_tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        h.update([1u8]);
        for t in &self.user_tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        hex(&h.finalize())
    }

    /// `token<TAB>index<TAB>count` per line, products first then users in
    /// their own file.
    pub fn write_products<W: Write>(&self, w: W) -> Result<()> {
        write_entries(&self.product_tokens, &self.product_counts, w)
    }

    pub fn write_users<W: Write>(&self, w: W) -> Result<()> {
        write_entries(&self.user_tokens, &self.user_counts, w)
    }

    pub fn read<R1: BufRead, R2: BufRead>(products: R1, users: R2, min_count: u64) -> Result<Self> {
        let (product_tokens, product_counts) = read_entries(products)?;
        let (user_tokens, user_counts) = read_entries(users)?;
        let index = |toks: &[String]| {
            toks.iter()
                .enumerate()
                .map(|(i, t)| (t.clone(), i))
                .collect::<HashMap<_, _>>()
        };
        Ok(Vocabulary {
            product_index: index(&product_tokens),
            user_index: index(&user_tokens),
            product_tokens,
            product_counts,
            user_tokens,
            user_counts,
            min_count,
        })
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn push_token(
    index: &mut HashMap<String, usize>,
    tokens: &mut Vec<String>,
    counts: &mut Vec<u64>,
    token: &str,
    count: u64,
) {
    index.entry(token.to_string()).or_insert_with(|| {
        tokens.push(token.to_string());
        counts.push(count);
        tokens.len() - 1
    });
}

fn write_entries<W: Write>(tokens: &[String], counts: &[u64], mut w: W) -> Result<()> {
    for (i, (t, c)) in tokens.iter().zip(counts).enumerate() {
        writeln!(w, "{t}\t{i}\t{c}")?;
    }
    Ok(())
}

fn read_entries<R: BufRead>(r: R) -> Result<(Vec<String>, Vec<u64>)> {
    let mut tokens = Vec::new();
    let mut counts = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let bad = |msg: &str| Error::Parse {
            line: n + 1,
            msg: msg.to_string(),
        };
        let mut parts = line.split('\t');
        let (Some(tok), Some(idx), Some(cnt), None) =
            (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(bad("expected token, index and count"));
        };
        let idx: usize = idx.parse().map_err(|_| bad("bad index"))?;
        if idx != tokens.len() {
            return Err(bad("indices must be dense and ascending"));
        }
        tokens.push(tok.to_string());
        counts.push(cnt.parse().map_err(|_| bad("bad count"))?);
    }
    Ok((tokens, counts))
}

pub fn build_vocabulary(baskets: &[Basket], min_count: u64) -> Result<Vocabulary> {
    if baskets.is_empty() {
        return Err(Error::Empty("baskets"));
    }
    let mut first_seen: Vec<&str> = Vec::new();
    let mut counts: HashMap<&str, u64> = HashMap::new();
    for item in baskets.iter().flat_map(|b| &b.items) {
        let c = counts.entry(item.as_str()).or_insert_with(|| {
            first_seen.push(item.as_str());
            0
        });
        *c += 1;
    }
    let mut vocab = Vocabulary {
        min_count,
        ..Default::default()
    };
    for tok in first_seen {
        let c = counts[tok];
        if c >= min_count {
            push_token(
                &mut vocab.product_index,
                &mut vocab.product_tokens,
                &mut vocab.product_counts,
                tok,
                c,
            );
        }
    }
    if vocab.product_tokens.is_empty() {
        return Err(Error::EmptyVocabulary);
    }
    for user in baskets.iter().filter_map(|b| b.user_id.as_deref()) {
        match vocab.user_index.get(user) {
            Some(&i) => vocab.user_counts[i] += 1,
            None => push_token(
                &mut vocab.user_index,
                &mut vocab.user_tokens,
                &mut vocab.user_counts,
                user,
                1,
            ),
        }
    }
    Ok(vocab)
}

/// A basket with products (and the user, when known) replaced by indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedBasket {
    pub user: Option<usize>,
    pub items: Vec<usize>,
}

impl EncodedBasket {
    pub fn new(user: Option<usize>, items: Vec<usize>) -> Self {
        EncodedBasket { user, items }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Encoded {
    pub baskets: Vec<EncodedBasket>,
    /// Item occurrences not found in the vocabulary.
    pub dropped_items: usize,
    /// Baskets left with fewer than two items after dropping.
    pub dropped_baskets: usize,
}

/// Replace tokens by indices. Unknown products are dropped (or rejected
/// when `strict`), and baskets that fall below two items are removed.
pub fn encode_baskets(baskets: &[Basket], vocab: &Vocabulary, strict: bool) -> Result<Encoded> {
    let mut out = Encoded::default();
    for b in baskets {
        let mut items = Vec::with_capacity(b.items.len());
        for tok in &b.items {
            match vocab.product(tok) {
                Some(i) => items.push(i),
                None if strict => return Err(Error::UnknownToken(tok.clone())),
                None => out.dropped_items += 1,
            }
        }
        let user = match b.user_id.as_deref() {
            None => None,
            Some(u) => match vocab.user(u) {
                Some(i) => Some(i),
                None if strict => return Err(Error::UnknownToken(u.to_string())),
                None => None,
            },
        };
        if items.len() < 2 {
            out.dropped_baskets += 1;
            continue;
        }
        out.baskets.push(EncodedBasket { user, items });
    }
    if out.dropped_items > 0 {
        log::warn!(
            "dropped {} out-of-vocabulary items ({} baskets fell below two items)",
            out.dropped_items,
            out.dropped_baskets
        );
    }
    Ok(out)
}

pub fn decode_basket(basket: &EncodedBasket, vocab: &Vocabulary) -> Vec<String> {
    basket
        .items
        .iter()
        .filter_map(|&i| vocab.product_token(i).map(str::to_string))
        .collect()
}

pub fn write_encoded<W: Write>(baskets: &[EncodedBasket], mut w: W) -> Result<()> {
    for b in baskets {
        serde_json::to_writer(&mut w, b)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_encoded<R: BufRead>(r: R) -> Result<Vec<EncodedBasket>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: n + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Parameters of the planted-group generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_groups: usize,
    pub products_per_group: usize,
    pub n_users: usize,
    pub n_baskets: usize,
    /// Inclusive `[min, max]` basket length.
    pub basket_len_range: (usize, usize),
    pub within_group_prob: f64,
    pub user_group_affinity: f64,
    /// Mean unit price per group.
    pub spend_base: Vec<f64>,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_groups: 5,
            products_per_group: 20,
            n_users: 100,
            n_baskets: 10_000,
            basket_len_range: (2, 6),
            within_group_prob: 0.9,
            user_group_affinity: 0.9,
            spend_base: SyntheticSpec::default_prices(5),
            seed: 42,
        }
    }
}

impl SyntheticSpec {
    /// 1.0, 1.5, 2.0, ... one price per group.
    pub fn default_prices(n_groups: usize) -> Vec<f64> {
        (0..n_groups).map(|g| 1.0 + 0.5 * g as f64).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if self.n_groups == 0 || self.products_per_group == 0 {
            return Err(Error::config("need at least one group with one product"));
        }
        if self.n_users == 0 {
            return Err(Error::config("n_users must be positive"));
        }
        if !prob(self.within_group_prob) || !prob(self.user_group_affinity) {
            return Err(Error::config("probabilities must lie in [0, 1]"));
        }
        let (lo, hi) = self.basket_len_range;
        if lo < 2 || hi < lo {
            return Err(Error::config(format!(
                "basket_len_range must satisfy 2 <= min <= max, got [{lo}, {hi}]"
            )));
        }
        if self.spend_base.len() != self.n_groups {
            return Err(Error::config(format!(
                "spend_base has {} prices for {} groups",
                self.spend_base.len(),
                self.n_groups
            )));
        }
        if self.spend_base.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::config("prices must be finite and nonnegative"));
        }
        Ok(())
    }

    pub fn n_products(&self) -> usize {
        self.n_groups * self.products_per_group
    }
}

pub fn product_token(i: usize) -> String {
    format!("P{i:04}")
}

pub fn user_token(i: usize) -> String {
    format!("U{i:04}")
}

/// Generated baskets plus the ground truth that produced them.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub spec: SyntheticSpec,
    pub baskets: Vec<Basket>,
    pub product_group: BTreeMap<String, usize>,
    pub user_group: BTreeMap<String, usize>,
    /// Spend multiplier `m_u`: the user pays `price * (1 + m_u)`.
    pub user_multiplier: BTreeMap<String, f64>,
}

/// Aggregated spend of one user on one product.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpendRecord {
    pub user: String,
    pub product: String,
    pub amount: f64,
}

/// Draw a corpus with planted product groups.
///
/// Every basket belongs to a uniformly drawn user. Its first item comes from
/// the user's group with probability `user_group_affinity` (otherwise from
/// all products); each later item comes from the first item's group with
/// probability `within_group_prob`, otherwise uniformly from all products.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_products = spec.n_products();
    let ppg = spec.products_per_group;

    let user_groups: Vec<usize> = (0..spec.n_users)
        .map(|_| rng.gen_range(0..spec.n_groups))
        .collect();
    let multipliers: Vec<f64> = (0..spec.n_users).map(|_| rng.gen::<f64>()).collect();

    let (lo, hi) = spec.basket_len_range;
    let mut baskets = Vec::with_capacity(spec.n_baskets);
    for t in 0..spec.n_baskets {
        let user = rng.gen_range(0..spec.n_users);
        let len = rng.gen_range(lo..=hi);
        let seed_item = if rng.gen_bool(spec.user_group_affinity) {
            user_groups[user] * ppg + rng.gen_range(0..ppg)
        } else {
            rng.gen_range(0..n_products)
        };
        let group = seed_item / ppg;
        let mut items = vec![seed_item];
        for _ in 1..len {
            let item = if rng.gen_bool(spec.within_group_prob) {
                group * ppg + rng.gen_range(0..ppg)
            } else {
                rng.gen_range(0..n_products)
            };
            items.push(item);
        }
        // the seed item need not lead the receipt
        items.shuffle(&mut rng);
        baskets.push(Basket {
            transaction_id: format!("T{t:07}"),
            user_id: Some(user_token(user)),
            items: items.into_iter().map(product_token).collect(),
        });
    }

    Ok(SyntheticCorpus {
        spec: spec.clone(),
        baskets,
        product_group: (0..n_products)
            .map(|p| (product_token(p), p / ppg))
            .collect(),
        user_group: user_groups
            .iter()
            .enumerate()
            .map(|(u, &g)| (user_token(u), g))
            .collect(),
        user_multiplier: multipliers
            .iter()
            .enumerate()
            .map(|(u, &m)| (user_token(u), m))
            .collect(),
    })
}

impl SyntheticCorpus {
    /// Unit price a user pays for a product.
    pub fn unit_price(&self, user: &str, product: &str) -> Option<f64> {
        let g = *self.product_group.get(product)?;
        let m = *self.user_multiplier.get(user)?;
        Some(self.spec.spend_base[g] * (1.0 + m))
    }

    /// Total spend per `(user, product)` over the whole corpus, sorted by
    /// user then product token.
    pub fn spend_records(&self) -> Vec<SpendRecord> {
        let mut totals: BTreeMap<(&str, &str), f64> = BTreeMap::new();
        for b in &self.baskets {
            let Some(user) = b.user_id.as_deref() else {
                continue;
            };
            for item in &b.items {
                let price = self.unit_price(user, item).unwrap_or(0.0);
                *totals.entry((user, item.as_str())).or_insert(0.0) += price;
            }
        }
        totals
            .into_iter()
            .map(|((u, p), amount)| SpendRecord {
                user: u.to_string(),
                product: p.to_string(),
                amount,
            })
            .collect()
    }

    /// Baskets per user token.
    pub fn transactions_per_user(&self) -> BTreeMap<String, usize> {
        let mut counts = BTreeMap::new();
        for b in &self.baskets {
            if let Some(u) = &b.user_id {
                *counts.entry(u.clone()).or_insert(0) += 1;
            }
        }
        counts
    }

    pub fn write_oracles(&self, dir: &Path) -> Result<()> {
        let write = |name: &str, rows: Vec<(String, String)>, header: [&str; 2]| -> Result<()> {
            let path = dir.join(name);
            let f = File::create(&path).map_err(|e| Error::file(&path, e))?;
            let mut w = csv::Writer::from_writer(BufWriter::new(f));
            w.write_record(header)?;
            for (a, b) in rows {
                w.write_record([a, b])?;
            }
            w.flush()?;
            Ok(())
        };
        write(
            "product_groups.csv",
            self.product_group
                .iter()
                .map(|(p, g)| (p.clone(), g.to_string()))
                .collect(),
            ["product", "group"],
        )?;
        write(
            "user_groups.csv",
            self.user_group
                .iter()
                .map(|(u, g)| (u.clone(), g.to_string()))
                .collect(),
            ["user", "group"],
        )
    }
}

pub fn write_spend<W: Write>(records: &[SpendRecord], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in records {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}

/// CSV with header `user,product,amount`.
pub fn read_spend<R: Read>(r: R) -> Result<Vec<SpendRecord>> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for rec in rdr.deserialize::<SpendRecord>() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            msg: e.to_string(),
        })?;
        if !(rec.amount.is_finite() && rec.amount >= 0.0) {
            return Err(Error::Parse {
                line: 0,
                msg: format!(
                    "negative or non-finite amount for ({}, {})",
                    rec.user, rec.product
                ),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

/// Read a `key,group` oracle CSV written by [`SyntheticCorpus::write_oracles`].
pub fn read_groups<R: Read>(r: R) -> Result<BTreeMap<String, usize>> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut out = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let key = rec.get(0).unwrap_or_default().to_string();
        let g = rec
            .get(1)
            .and_then(|g| g.parse().ok())
            .ok_or_else(|| Error::Parse {
                line: rec.position().map_or(0, |p| p.line() as usize),
                msg: "bad group id".to_string(),
            })?;
        out.insert(key, g);
    }
    Ok(out)
}
