mod common;

use amtl::eval::{
    bleu, evaluate, heldout_pairs, model_perplexity, ppl_ratio, EvalConfig, HELDOUT_SEED_OFFSET,
};
use amtl::model::ModelState;
use amtl::toy;
use common::tiny_model;

fn uniform_mlm(mut m: ModelState) -> ModelState {
    let ids: Vec<_> = m
        .params()
        .ids()
        .filter(|&id| m.params().name(id).starts_with("mlm.out"))
        .collect();
    for id in ids {
        m.params_mut().value_mut(id).data_mut().fill(0.0);
    }
    m
}

#[test]
fn uniform_masked_lm_has_vocab_sized_perplexity() {
    let m = uniform_mlm(tiny_model(1));
    let vs = m.vocab().content_size() as f64;
    for s in toy::generate_corpus(4, 10).unwrap() {
        let p = model_perplexity(&s, &m).unwrap();
        assert!((p - vs).abs() < 1e-9 * vs, "{p} vs {vs}");
        assert!((ppl_ratio(&s, &s, &m).unwrap() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn bleu_hand_computed() {
    let r: Vec<char> = "abcdef".chars().collect();
    assert!((bleu(&r, &r, 4) - 1.0).abs() < 1e-15);
    // One substitution in the middle: unigrams 5/6, bigrams (3+1)/(5+1),
    // trigrams (1+1)/(4+1), 4-grams (0+1)/(3+1); equal lengths.
    let c: Vec<char> = "abXdef".chars().collect();
    let want = (5.0f64 / 6.0 * (4.0 / 6.0) * (2.0 / 5.0) * (1.0 / 4.0)).powf(0.25);
    assert!((bleu(&c, &r, 4) - want).abs() < 1e-12);
    // Shorter candidate pays the brevity penalty.
    let short: Vec<char> = "abc".chars().collect();
    let bp = (1.0f64 - 6.0 / 3.0).exp();
    let p = (1.0f64 * (3.0 / 3.0) * (2.0 / 2.0) * (1.0 / 1.0)).powf(0.25);
    assert!((bleu(&short, &r, 4) - bp * p).abs() < 1e-12);
}

#[test]
fn heldout_pairs_avoid_training_sentences() {
    let train = toy::generate_corpus(9, 300).unwrap();
    let vocab = tiny_model(0).vocab().clone();
    let pairs = heldout_pairs(9, 50, &train, &vocab).unwrap();
    assert_eq!(pairs.len(), 50);
    assert_ne!(HELDOUT_SEED_OFFSET, 0);
    for p in &pairs {
        assert!(!train.contains(&p.clean));
        assert_ne!(p.corrupted, p.clean);
        assert!(p.span.0 <= p.span.1 && p.span.1 <= p.corrupted.len());
    }
    assert_eq!(pairs, heldout_pairs(9, 50, &train, &vocab).unwrap());
}

#[test]
fn evaluation_is_deterministic() {
    let m = tiny_model(2);
    let train = toy::generate_corpus(1, 50).unwrap();
    let pairs = heldout_pairs(1, 12, &train, m.vocab()).unwrap();
    let cfg = EvalConfig {
        fast_path: true,
        ..EvalConfig::default()
    };
    let a = evaluate(&m, &pairs, &cfg).unwrap();
    let b = evaluate(&m, &pairs, &cfg).unwrap();
    assert_eq!(a, b);
    let acc = a.slm_topk_acc.unwrap();
    assert!((0.0..=1.0).contains(&acc));
    let fast = a.fast.unwrap();
    assert!(fast.passes_fast <= (EvalConfig::default().corrector.depth + 2 + 1) as f64);
}
