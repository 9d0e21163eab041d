use ontoext::explain::{aggregate_shares, head_token_share, render_report, token_importance, Prediction};
use ontoext::model::{EncoderModel, Mode};
use ontoext::tokenizer::{train_bpe, BpeConfig, TokenSequence, Tokenizer, BOS, EOS, PAD};
use ontoext::toy::{toy_corpus, toy_model_config};
use proptest::prelude::*;

fn tokenizer() -> Tokenizer {
    train_bpe(&toy_corpus(200, 3), BpeConfig { target_vocab: 40, min_frequency: 2 }).unwrap()
}

fn model(vocab: usize, seed: u64) -> EncoderModel {
    EncoderModel::init(toy_model_config(vocab, 4, seed)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn importance_and_shares_are_normalized(smiles in prop::sample::select(toy_corpus(50, 8)), pad in 0usize..4, seed in 0u64..50) {
        let tok = tokenizer();
        let m = model(tok.vocab_size(), seed);
        let seq = tok.encode(&smiles, 64).unwrap();
        let seq = seq.padded_to(seq.len() + pad);
        let out = m.forward(std::slice::from_ref(&seq), true, Mode::Inference).unwrap();
        let att = out[0].attention.as_ref().unwrap();
        for layer in 0..att.n_layers {
            let a = token_importance(Some(att), &seq, &tok, Some(layer)).unwrap();
            prop_assert!((a.scores.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(a.scores.iter().all(|&s| s >= 0.0));
            prop_assert_eq!(a.positions.len(), seq.len() - pad - 2);
        }
        let s = head_token_share(att, &seq, &tok).unwrap();
        prop_assert_eq!(s.shares.len(), att.n_layers * att.n_heads);
        for row in &s.shares {
            prop_assert!((row.iter().sum::<f64>() - 100.0).abs() < 0.01);
            prop_assert_eq!(row.len(), seq.len() - pad);
        }
    }
}

#[test]
fn uniform_attention_gives_exactly_equal_scores() {
    let tok = tokenizer();
    for n_real in 1..12usize {
        let mut ids = vec![BOS];
        ids.extend((0..n_real).map(|i| 5 + (i % 20) as u32));
        ids.push(EOS);
        ids.push(PAD);
        let t = ids.len();
        let live = t - 1;
        let mut w = Vec::new();
        for _h in 0..2 {
            for _q in 0..t {
                w.extend((0..t).map(|k| if k < live { 1.0 / live as f64 } else { 0.0 }));
            }
        }
        let att = ontoext::model::AttentionSummary::new(1, 2, t, w);
        let seq = TokenSequence::new(ids);
        let a = token_importance(Some(&att), &seq, &tok, None).unwrap();
        let first = a.scores[0];
        assert!(a.scores.iter().all(|&s| s == first), "{:?}", a.scores);
        assert!((first - 1.0 / n_real as f64).abs() < 1e-15);
    }
}

#[test]
fn reports_are_deterministic_and_aggregate_to_100() {
    let tok = tokenizer();
    let m = model(tok.vocab_size(), 1);
    let corpus = toy_corpus(6, 4);
    let mut all = Vec::new();
    for s in &corpus {
        let seq = tok.encode(s, 64).unwrap();
        let render = || {
            let out = m.forward(std::slice::from_ref(&seq), true, Mode::Inference).unwrap();
            let att = out[0].attention.as_ref().unwrap();
            let a = token_importance(Some(att), &seq, &tok, None).unwrap();
            let sh = head_token_share(att, &seq, &tok).unwrap();
            let preds = vec![Prediction { class_id: "T:1".into(), name: "thing".into(), probability: out[0].probabilities[0] }];
            (render_report(s, &a, &sh, &preds), sh)
        };
        let (first, sh) = render();
        assert_eq!(first, render().0);
        all.push(sh);
    }
    let agg = aggregate_shares(&all).unwrap();
    for row in &agg.shares {
        assert!((row.iter().sum::<f64>() - 100.0).abs() < 0.01);
    }
}
