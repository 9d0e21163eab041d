use std::collections::BTreeSet;

use ontoext::tokenizer::{train_bpe, BpeConfig, Tokenizer, TokenizerError, NUM_SPECIAL, UNK};
use ontoext::toy::toy_corpus;
use proptest::prelude::*;

fn train(corpus: &[String], target_vocab: usize) -> Tokenizer {
    train_bpe(corpus, BpeConfig { target_vocab, min_frequency: 2 }).unwrap()
}

fn alphabet(corpus: &[String]) -> usize {
    corpus.iter().flat_map(|s| s.chars()).collect::<BTreeSet<_>>().len()
}

fn smiles_like() -> impl Strategy<Value = String> {
    prop::collection::vec(
        prop::sample::select(vec!["C", "c", "N", "O", "S", "Br", "Cl", "(", ")", "=", "1", "2", "[Na+]", "[O-]", "#"]),
        1..25,
    )
    .prop_map(|parts| parts.concat())
}

#[test]
fn round_trip_on_a_thousand_strings() {
    let corpus = toy_corpus(1000, 77);
    let tok = train(&corpus, 120);
    for s in &corpus {
        let seq = tok.encode(s, 512).unwrap();
        let d = tok.decode(&seq).unwrap();
        assert!(!d.lossy);
        assert_eq!(&d.text, s);
    }
    // unseen strings over the same alphabet
    for s in toy_corpus(1000, 78) {
        assert_eq!(tok.decode(&tok.encode(&s, 512).unwrap()).unwrap().text, s);
    }
}

#[test]
fn retraining_is_byte_identical() {
    let corpus = toy_corpus(1000, 5);
    let a = train(&corpus, 100).to_text();
    let b = train(&corpus, 100).to_text();
    assert_eq!(a, b);
    let reloaded = Tokenizer::from_text(&a).unwrap();
    assert_eq!(reloaded.to_text(), a);
}

#[test]
fn vocabulary_ids_are_contiguous() {
    let corpus = toy_corpus(3000, 9);
    let tok = train(&corpus, 300);
    assert!(tok.vocab_size() <= 300);
    let ids: Vec<u32> = (0..tok.vocab_size() as u32).collect();
    for id in ids {
        assert!(tok.vocab().token(id).is_some(), "ids are contiguous");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn round_trip_and_compression(corpus in prop::collection::vec(smiles_like(), 1..40), extra in 0usize..60) {
        let base = alphabet(&corpus) + NUM_SPECIAL as usize;
        let chars = train(&corpus, base);
        prop_assert!(chars.merges().is_empty());
        let small = train(&corpus, base + extra / 2);
        let large = train(&corpus, base + extra);
        // smaller tables are prefixes of larger ones
        prop_assert_eq!(&large.merges().rules[..small.merges().len()], &small.merges().rules[..]);
        for s in &corpus {
            let n_chars = chars.tokenize(s).len();
            let n_small = small.tokenize(s).len();
            let n_large = large.tokenize(s).len();
            prop_assert_eq!(n_chars, s.chars().count());
            prop_assert!(n_large <= n_small && n_small <= n_chars);
            prop_assert_eq!(&large.decode(&large.encode(s, 1024).unwrap()).unwrap().text, s);
        }
    }

    #[test]
    fn unseen_characters_become_unk(corpus in prop::collection::vec(smiles_like(), 1..10)) {
        let tok = train(&corpus, alphabet(&corpus) + NUM_SPECIAL as usize + 10);
        let seq = tok.encode("C%C", 16).unwrap();
        prop_assert!(seq.ids.contains(&UNK));
        prop_assert!(tok.decode(&seq).unwrap().lossy);
    }
}

#[test]
fn too_small_target_is_rejected() {
    let corpus = vec!["CCO".to_string()];
    assert!(matches!(
        train_bpe(&corpus, BpeConfig { target_vocab: 6, min_frequency: 2 }),
        Err(TokenizerError::VocabTooSmall { .. })
    ));
}
