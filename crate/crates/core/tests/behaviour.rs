//! Directional checks of the trainers on small planted corpora.

use prodvec::basket::cosine_similarity;
use prodvec::corpus::{build_vocabulary, encode_baskets, Basket};
use prodvec::p2e::{self, P2EConfig};
use prodvec::u2e::{train_u2e, U2EConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn users_with_disjoint_habits_separate() {
    // users u0 and u1 buy from products 0-4, u2 and u3 from products 5-9
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut baskets = Vec::new();
    for n in 0..800 {
        let user = n % 4;
        let base = if user < 2 { 0 } else { 5 };
        let items: Vec<String> = (0..3)
            .map(|_| format!("P{}", base + rng.gen_range(0..5)))
            .collect();
        let refs: Vec<&str> = items.iter().map(String::as_str).collect();
        baskets.push(Basket::new(
            format!("T{n}"),
            Some(&format!("U{user}")),
            &refs,
        ));
    }
    let vocab = build_vocabulary(&baskets, 1).unwrap();
    let enc = encode_baskets(&baskets, &vocab, true).unwrap();
    let model = train_u2e(
        &enc.baskets,
        &vocab,
        U2EConfig {
            user_dim: 4,
            product_dim: 4,
            context: 2,
            epochs: 20,
            ..Default::default()
        },
    )
    .unwrap();
    let user = |t: &str| model.user_embedding(vocab.user(t).unwrap()).unwrap();
    let cos = |a: &str, b: &str| cosine_similarity(user(a), user(b)).unwrap();
    let within = (cos("U0", "U1") + cos("U2", "U3")) / 2.0;
    let across = cos("U0", "U2");
    assert!(across < within, "across {across:.3} within {within:.3}");
}

#[test]
fn repeated_pair_lowers_the_loss() {
    let baskets: Vec<Basket> = (0..20)
        .map(|n| Basket::new(format!("T{n}"), None, &["A", "B"]))
        .collect();
    let vocab = build_vocabulary(&baskets, 1).unwrap();
    let enc = encode_baskets(&baskets, &vocab, true).unwrap();
    let model = p2e::train(
        &enc.baskets,
        &vocab,
        P2EConfig {
            dim: 8,
            ..Default::default()
        },
    )
    .unwrap();
    let h = &model.loss_history;
    assert_eq!(h.len(), 50);
    assert!(h[49] < h[0]);
}
