mod common;

use common::{gradient_check, oracle_hidden, oracle_logits, oracle_mlm_logits, tiny_config};
use ontoext::model::{EncoderModel, LabeledSequence, MaskedSequence, MlmLoss, Mode, TrainBatch};
use ontoext::tokenizer::{TokenSequence, BOS, EOS, MASK, PAD};
use proptest::prelude::*;

fn seq(ids: &[u32]) -> TokenSequence {
    TokenSequence::new(ids.to_vec())
}

#[test]
fn forward_matches_straight_line_oracle() {
    let model = EncoderModel::init(tiny_config(3)).unwrap();
    let ids = [BOS, 7, 12, 5, 19, EOS, PAD, PAD];
    let out = model.forward(&[seq(&ids)], false, Mode::Inference).unwrap();
    let oracle = oracle_logits(&model, &ids);
    for (a, b) in out[0].logits.iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
    let hidden = oracle_hidden(&model, &ids);
    for (i, row) in hidden.iter().enumerate().take(6) {
        for (j, v) in row.iter().enumerate() {
            assert!((out[0].hidden[i * 8 + j] - v).abs() < 1e-6);
        }
    }
    for (p, z) in out[0].probabilities.iter().zip(&out[0].logits) {
        assert!(*p > 0.0 && *p < 1.0);
        assert!((p - 1.0 / (1.0 + (-z).exp())).abs() < 1e-15);
    }
}

#[test]
fn mlm_argmax_matches_oracle() {
    let model = EncoderModel::init(tiny_config(5)).unwrap();
    let ids = [BOS, 9, MASK, 11, EOS];
    let out = model.forward(&[seq(&ids)], false, Mode::Inference).unwrap();
    let logits = model.mlm_logits(&out[0].hidden, 5, &[2]).unwrap();
    let oracle = oracle_mlm_logits(&model, &ids, 2);
    let argmax = |v: &[f64]| v.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
    assert_eq!(argmax(&logits[0]), argmax(&oracle));
    for (a, b) in logits[0].iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-6);
    }
}

fn gradcheck_batches() -> (Vec<MaskedSequence>, Vec<LabeledSequence>) {
    let mlm = vec![
        MaskedSequence { input: seq(&[BOS, MASK, 7, 8, EOS, PAD]), targets: vec![(1, 6), (3, 8)] },
        MaskedSequence { input: seq(&[BOS, 10, MASK, EOS]), targets: vec![(2, 15)] },
    ];
    let labeled = vec![
        LabeledSequence { input: seq(&[BOS, 5, 6, 7, EOS, PAD]), labels: vec![1.0, 0.0, 1.0] },
        LabeledSequence { input: seq(&[BOS, 17, 18, EOS]), labels: vec![0.0, 1.0, 0.0] },
    ];
    (mlm, labeled)
}

#[test]
fn gradients_match_finite_differences() {
    let (mlm, labeled) = gradcheck_batches();
    for loss in [MlmLoss::CrossEntropy, MlmLoss::Bce] {
        let mut config = tiny_config(7);
        config.mlm_loss = loss;
        // larger init so every path carries signal
        config.init_std = 0.5;
        let mut model = EncoderModel::init(config).unwrap();
        let check = gradient_check(&mut model, TrainBatch::Mlm(&mlm), 1e-4);
        assert!(check.max_rel_error < 1e-3, "mlm {loss:?}: {}", check.worst);
        assert_eq!(check.checked, model.num_parameters());
    }
    let mut model = EncoderModel::init(common::tiny_config(8)).unwrap();
    let check = gradient_check(&mut model, TrainBatch::Multilabel(&labeled), 1e-4);
    assert!(check.max_rel_error < 1e-3, "multilabel: {}", check.worst);
}

#[test]
fn gradients_ignore_padding() {
    let mut model = EncoderModel::init(tiny_config(2)).unwrap();
    let short = vec![LabeledSequence { input: seq(&[BOS, 5, 6, EOS]), labels: vec![1.0, 0.0, 1.0] }];
    let long = vec![LabeledSequence { input: seq(&[BOS, 5, 6, EOS, PAD, PAD, PAD]), labels: vec![1.0, 0.0, 1.0] }];
    let a = model.loss_and_grad(TrainBatch::Multilabel(&short), Mode::Inference).unwrap();
    let ga: Vec<Vec<f64>> = (0..model.params().len()).map(|s| model.params().grad(s).to_vec()).collect();
    let b = model.loss_and_grad(TrainBatch::Multilabel(&long), Mode::Inference).unwrap();
    assert!((a - b).abs() < 1e-12);
    for (slot, g) in ga.iter().enumerate() {
        for (x, y) in g.iter().zip(model.params().grad(slot)) {
            assert!((x - y).abs() < 1e-10, "{}", model.params().info(slot).name);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn attention_invariants_hold(
        body in prop::collection::vec(5u32..20, 1..8),
        pad in 0usize..6,
        seed in 0u64..1000,
    ) {
        let model = EncoderModel::init(tiny_config(seed)).unwrap();
        let mut ids = vec![BOS];
        ids.extend(&body);
        ids.push(EOS);
        let n = ids.len();
        let padded = seq(&ids).padded_to(n + pad);
        let out = model.forward(&[seq(&ids), padded], true, Mode::Inference).unwrap();
        let att = out[1].attention.as_ref().unwrap();
        for l in 0..2 {
            for h in 0..2 {
                for q in 0..n + pad {
                    let row = att.row(l, h, q);
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                    prop_assert!(row[n..].iter().all(|&w| w == 0.0));
                }
            }
        }
        for i in 0..n * 8 {
            prop_assert!((out[0].hidden[i] - out[1].hidden[i]).abs() < 1e-5);
        }
    }
}
