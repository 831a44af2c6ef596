//! Full-softmax CBOW engine shared by the product (P2E) and user+product
//! (U2E) trainers.
//!
//! The hidden layer is `[user vector?, slot_1, ..., slot_c]` where each slot
//! holds the input embedding of one context product (or zeros when masked).
//! The output layer is a `P x H` weight matrix plus bias over every product.

use std::cell::Cell;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::numkit::{self, Matrix, Slots};

/// A prediction target with its `c` context slots (`None` = masked).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextExample {
    pub target: usize,
    pub context: Vec<Option<usize>>,
}

/// One example per position of `basket`.
///
/// The context of a target is the rest of the basket ordered by in-receipt
/// distance (ties go to the earlier position), truncated to `c` slots;
/// unused slots are masked.
pub fn training_examples(basket: &[usize], c: usize) -> Vec<ContextExample> {
    let n = basket.len();
    let mut order: Vec<usize> = Vec::with_capacity(n);
    (0..n)
        .map(|t| {
            order.clear();
            order.extend((0..n).filter(|&p| p != t));
            order.sort_by_key(|&p| (p.abs_diff(t), p));
            let mut context: Vec<Option<usize>> =
                order.iter().take(c).map(|&p| Some(basket[p])).collect();
            context.resize(c, None);
            ContextExample {
                target: basket[t],
                context,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct CbowParams {
    pub prod: Matrix,
    pub user: Option<Matrix>,
    pub out_w: Matrix,
    pub out_b: Vec<f64>,
    pub context: usize,
}

/// Gradients of the mean batch loss, laid out like [`CbowParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct CbowGradients {
    pub product_embeddings: Matrix,
    pub user_embeddings: Option<Matrix>,
    pub output_weights: Matrix,
    pub output_bias: Vec<f64>,
}

impl CbowParams {
    pub fn n_products(&self) -> usize {
        self.prod.rows()
    }

    pub fn user_dim(&self) -> usize {
        self.user.as_ref().map_or(0, Matrix::cols)
    }

    pub fn hidden_width(&self) -> usize {
        self.user_dim() + self.context * self.prod.cols()
    }

    pub(crate) fn check_example(&self, user: Option<usize>, ex: &ContextExample) -> Result<()> {
        let p = self.n_products();
        if ex.context.len() != self.context {
            return Err(Error::dim(format!(
                "example has {} context slots, model expects {}",
                ex.context.len(),
                self.context
            )));
        }
        for &id in std::iter::once(&ex.target).chain(ex.context.iter().flatten()) {
            if id >= p {
                return Err(Error::OutOfRange { index: id, len: p });
            }
        }
        if let (Some(u), Some(users)) = (user, &self.user) {
            if u >= users.rows() {
                return Err(Error::OutOfRange {
                    index: u,
                    len: users.rows(),
                });
            }
        }
        Ok(())
    }

    pub fn hidden(&self, user: Option<usize>, ex: &ContextExample) -> Vec<f64> {
        let d = self.prod.cols();
        let mut h = Vec::with_capacity(self.hidden_width());
        if let (Some(users), Some(u)) = (&self.user, user) {
            h.extend_from_slice(users.row(u));
        }
        for slot in &ex.context {
            match slot {
                Some(q) => h.extend_from_slice(self.prod.row(*q)),
                None => h.extend(std::iter::repeat_n(0.0, d)),
            }
        }
        h
    }

    /// Predictive distribution over all products.
    pub fn distribution(&self, user: Option<usize>, ex: &ContextExample) -> Result<Vec<f64>> {
        self.check_example(user, ex)?;
        let h = self.hidden(user, ex);
        let logits: Vec<f64> = (0..self.n_products())
            .map(|p| numkit::dot(self.out_w.row(p), &h) + self.out_b[p])
            .collect();
        numkit::softmax(&logits)
    }

    /// Mean negative log-likelihood of `batch` and its gradient.
    #[allow(clippy::needless_range_loop)]
    pub fn loss_and_grads(
        &self,
        batch: &[(Option<usize>, &ContextExample)],
    ) -> Result<(f64, CbowGradients)> {
        if batch.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let p = self.n_products();
        let d = self.prod.cols();
        let du = self.user_dim();
        let hw = self.hidden_width();
        let mut g = CbowGradients {
            product_embeddings: Matrix::zeros(p, d),
            user_embeddings: self.user.as_ref().map(|u| Matrix::zeros(u.rows(), du)),
            output_weights: Matrix::zeros(p, hw),
            output_bias: vec![0.0; p],
        };
        let mut logits = vec![0.0; p];
        let mut probs = vec![0.0; p];
        let mut grad_h = vec![0.0; hw];
        let mut total = 0.0;
        for &(user, ex) in batch {
            self.check_example(user, ex)?;
            if self.user.is_some() && user.is_none() {
                return Err(Error::config("user-aware model needs a user per example"));
            }
            let h = self.hidden(user, ex);
            for (q, l) in logits.iter_mut().enumerate() {
                *l = numkit::dot(self.out_w.row(q), &h) + self.out_b[q];
            }
            total += nll(&logits, ex.target, &mut probs)?;
            grad_h.iter_mut().for_each(|x| *x = 0.0);
            for q in 0..p {
                let dl = probs[q] - if q == ex.target { 1.0 } else { 0.0 };
                let w = self.out_w.row(q);
                for k in 0..hw {
                    grad_h[k] += dl * w[k];
                }
                let gw = g.output_weights.row_mut(q);
                for k in 0..hw {
                    gw[k] += dl * h[k];
                }
                g.output_bias[q] += dl;
            }
            if let (Some(gu), Some(u)) = (g.user_embeddings.as_mut(), user) {
                for (a, b) in gu.row_mut(u).iter_mut().zip(&grad_h[..du]) {
                    *a += b;
                }
            }
            for (s, slot) in ex.context.iter().enumerate() {
                if let Some(q) = slot {
                    let seg = &grad_h[du + s * d..du + (s + 1) * d];
                    for (a, b) in g.product_embeddings.row_mut(*q).iter_mut().zip(seg) {
                        *a += b;
                    }
                }
            }
        }
        let n = batch.len() as f64;
        let scale = |xs: &mut [f64]| xs.iter_mut().for_each(|x| *x /= n);
        scale(g.product_embeddings.as_mut_slice());
        if let Some(u) = g.user_embeddings.as_mut() {
            scale(u.as_mut_slice());
        }
        scale(g.output_weights.as_mut_slice());
        scale(&mut g.output_bias);
        Ok((total / n, g))
    }
}

/// Softmax probabilities into `probs`; returns `-ln p[target]` computed in
/// log space so it stays finite when the probability underflows.
fn nll(logits: &[f64], target: usize, probs: &mut [f64]) -> Result<f64> {
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("output logits"));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &l) in probs.iter_mut().zip(logits) {
        *o = (l - max).exp();
        z += *o;
    }
    for o in probs.iter_mut() {
        *o /= z;
    }
    Ok(max + z.ln() - logits[target])
}

/// Adagrad accumulators for every table of [`CbowParams`].
#[derive(Debug, Clone)]
pub(crate) struct CbowAccumulators {
    prod: Vec<f64>,
    user: Option<Vec<f64>>,
    out_w: Vec<f64>,
    out_b: Vec<f64>,
}

impl CbowAccumulators {
    pub fn new(params: &CbowParams, initial: f64) -> Self {
        CbowAccumulators {
            prod: vec![initial; params.prod.as_slice().len()],
            user: params
                .user
                .as_ref()
                .map(|u| vec![initial; u.as_slice().len()]),
            out_w: vec![initial; params.out_w.as_slice().len()],
            out_b: vec![initial; params.out_b.len()],
        }
    }
}

struct Tables<'a, S: ?Sized> {
    prod: &'a S,
    prod_acc: &'a S,
    user: Option<(&'a S, &'a S)>,
    out_w: &'a S,
    out_w_acc: &'a S,
    out_b: &'a S,
    out_b_acc: &'a S,
    n_products: usize,
    dim: usize,
    user_dim: usize,
}

#[derive(Default)]
struct Scratch {
    h: Vec<f64>,
    row: Vec<f64>,
    logits: Vec<f64>,
    probs: Vec<f64>,
    grad_h: Vec<f64>,
    grad_row: Vec<f64>,
    seen: Vec<usize>,
}

impl<S: Slots + ?Sized> Tables<'_, S> {
    /// One per-example Adagrad step; returns the example's loss measured
    /// before the update.
    fn step(&self, user: Option<usize>, ex: &ContextExample, lr: f64, s: &mut Scratch) -> f64 {
        let (p, d, du) = (self.n_products, self.dim, self.user_dim);
        let hw = du + ex.context.len() * d;
        s.h.clear();
        s.h.resize(hw, 0.0);
        if let (Some((users, _)), Some(u)) = (self.user, user) {
            users.read_into(u * du, &mut s.h[..du]);
        }
        for (k, slot) in ex.context.iter().enumerate() {
            if let Some(q) = slot {
                self.prod
                    .read_into(q * d, &mut s.h[du + k * d..du + (k + 1) * d]);
            }
        }
        s.row.resize(hw, 0.0);
        s.logits.resize(p, 0.0);
        s.probs.resize(p, 0.0);
        for q in 0..p {
            self.out_w.read_into(q * hw, &mut s.row);
            s.logits[q] = numkit::dot(&s.row, &s.h) + self.out_b.get(q);
        }
        let loss = match nll(&s.logits, ex.target, &mut s.probs) {
            Ok(l) => l,
            // diverged parameters: skip the update rather than spread NaNs
            Err(_) => return f64::NAN,
        };

        s.grad_h.clear();
        s.grad_h.resize(hw, 0.0);
        for q in 0..p {
            let dl = s.probs[q] - if q == ex.target { 1.0 } else { 0.0 };
            let base = q * hw;
            for k in 0..hw {
                s.grad_h[k] += dl * self.out_w.get(base + k);
                self.out_w
                    .adagrad(self.out_w_acc, base + k, dl * s.h[k], lr);
            }
            self.out_b.adagrad(self.out_b_acc, q, dl, lr);
        }

        if let (Some((users, acc)), Some(u)) = (self.user, user) {
            for k in 0..du {
                users.adagrad(acc, u * du + k, s.grad_h[k], lr);
            }
        }
        // a product filling several slots gets one update with the summed gradient
        s.seen.clear();
        for slot in ex.context.iter().flatten() {
            if s.seen.contains(slot) {
                continue;
            }
            s.seen.push(*slot);
            s.grad_row.clear();
            s.grad_row.resize(d, 0.0);
            for (k, other) in ex.context.iter().enumerate() {
                if *other == Some(*slot) {
                    for j in 0..d {
                        s.grad_row[j] += s.grad_h[du + k * d + j];
                    }
                }
            }
            for j in 0..d {
                self.prod
                    .adagrad(self.prod_acc, slot * d + j, s.grad_row[j], lr);
            }
        }
        loss
    }

    fn run(
        &self,
        examples: &[(Option<usize>, ContextExample)],
        order: &[usize],
        counters: &[AtomicU64],
        lr: f64,
    ) -> f64 {
        let mut scratch = Scratch::default();
        let mut total = 0.0;
        for &i in order {
            let (user, ex) = &examples[i];
            total += self.step(*user, ex, lr, &mut scratch);
            if let Some(u) = user {
                counters[*u].fetch_add(1, Ordering::Relaxed);
            }
        }
        total
    }
}

pub(crate) struct TrainSettings {
    pub epochs: usize,
    pub learning_rate: f64,
    pub execution: Execution,
    pub deterministic: bool,
}

const HOGWILD_CHUNK: usize = 256;

pub(crate) fn cells(xs: &mut [f64]) -> &[Cell<f64>] {
    Cell::from_mut(xs).as_slice_of_cells()
}

/// Run `epochs` shuffled passes of per-example Adagrad over `examples`.
///
/// Returns the mean loss of every epoch. `counters[u]` is bumped once per
/// processed example of user `u`.
pub(crate) fn train(
    params: &mut CbowParams,
    acc: &mut CbowAccumulators,
    examples: &[(Option<usize>, ContextExample)],
    settings: &TrainSettings,
    rng: &mut ChaCha8Rng,
    counters: &[AtomicU64],
) -> Vec<f64> {
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut history = Vec::with_capacity(settings.epochs);
    let n = examples.len().max(1) as f64;
    let lr = settings.learning_rate;
    let (p, d, du) = (params.n_products(), params.prod.cols(), params.user_dim());

    if settings.deterministic || !settings.execution.is_parallel() {
        let user = match (params.user.as_mut(), acc.user.as_mut()) {
            (Some(u), Some(a)) => Some((cells(u.as_mut_slice()), cells(a))),
            _ => None,
        };
        let tables = Tables {
            prod: cells(params.prod.as_mut_slice()),
            prod_acc: cells(&mut acc.prod),
            user,
            out_w: cells(params.out_w.as_mut_slice()),
            out_w_acc: cells(&mut acc.out_w),
            out_b: cells(&mut params.out_b),
            out_b_acc: cells(&mut acc.out_b),
            n_products: p,
            dim: d,
            user_dim: du,
        };
        for _ in 0..settings.epochs {
            order.shuffle(rng);
            history.push(tables.run(examples, &order, counters, lr) / n);
        }
        return history;
    }

    let prod = numkit::to_atomic(params.prod.as_slice());
    let prod_acc = numkit::to_atomic(&acc.prod);
    let user = match (&params.user, &acc.user) {
        (Some(u), Some(a)) => Some((numkit::to_atomic(u.as_slice()), numkit::to_atomic(a))),
        _ => None,
    };
    let out_w = numkit::to_atomic(params.out_w.as_slice());
    let out_w_acc = numkit::to_atomic(&acc.out_w);
    let out_b = numkit::to_atomic(&params.out_b);
    let out_b_acc = numkit::to_atomic(&acc.out_b);
    {
        let tables = Tables::<[AtomicU64]> {
            prod: &prod,
            prod_acc: &prod_acc,
            user: user.as_ref().map(|(u, a)| (&u[..], &a[..])),
            out_w: &out_w,
            out_w_acc: &out_w_acc,
            out_b: &out_b,
            out_b_acc: &out_b_acc,
            n_products: p,
            dim: d,
            user_dim: du,
        };
        for _ in 0..settings.epochs {
            order.shuffle(rng);
            let sums = settings
                .execution
                .map_chunks(&order, HOGWILD_CHUNK, |chunk| {
                    tables.run(examples, chunk, counters, lr)
                });
            history.push(sums.iter().sum::<f64>() / n);
        }
    }
    let restore = |m: &mut Matrix, v: Vec<AtomicU64>| {
        m.as_mut_slice().copy_from_slice(&numkit::from_atomic(v));
    };
    restore(&mut params.prod, prod);
    acc.prod = numkit::from_atomic(prod_acc);
    if let (Some(u), Some(a), Some((ua, aa))) = (params.user.as_mut(), acc.user.as_mut(), user) {
        restore(u, ua);
        *a = numkit::from_atomic(aa);
    }
    restore(&mut params.out_w, out_w);
    acc.out_w = numkit::from_atomic(out_w_acc);
    params.out_b = numkit::from_atomic(out_b);
    acc.out_b = numkit::from_atomic(out_b_acc);
    history
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(target: usize, ctx: &[Option<usize>]) -> ContextExample {
        ContextExample {
            target,
            context: ctx.to_vec(),
        }
    }

    #[test]
    fn two_item_basket_masks_remaining_slots() {
        let got = training_examples(&[0, 1], 4);
        assert_eq!(
            got,
            vec![
                ex(0, &[Some(1), None, None, None]),
                ex(1, &[Some(0), None, None, None]),
            ]
        );
    }

    #[test]
    fn context_is_nearest_first_with_earlier_tie_break() {
        let got = training_examples(&[10, 11, 12], 2);
        assert_eq!(got[1], ex(11, &[Some(10), Some(12)]));
        let got = training_examples(&[0, 1, 2, 3, 4, 5], 2);
        assert_eq!(got[0], ex(0, &[Some(1), Some(2)]));
        // target D (pos 3): distances 1 -> C,E ; 2 -> B,F
        let got = training_examples(&[0, 1, 2, 3, 4, 5], 3);
        assert_eq!(got[3], ex(3, &[Some(2), Some(4), Some(1)]));
    }
}
