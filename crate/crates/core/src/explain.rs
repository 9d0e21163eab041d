//! Attention-based explanations: per-token importance, per-head token shares,
//! and a static HTML report.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::model::AttentionSummary;
use crate::tokenizer::{is_special, TokenSequence, Tokenizer, PAD};

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("attention was not captured for this input")]
    NoAttention,
    #[error("layer {layer} out of range for a model with {n_layers} layers")]
    LayerOutOfRange { layer: usize, n_layers: usize },
    #[error("attention covers {attention} positions but the sequence has {sequence}")]
    LengthMismatch { attention: usize, sequence: usize },
    #[error("sequence has no non-special tokens")]
    NoRealTokens,
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenAttribution {
    /// Sequence positions of the scored tokens.
    pub positions: Vec<usize>,
    pub tokens: Vec<String>,
    pub scores: Vec<f64>,
}

/// Percent of each head's attention mass received by each non-PAD position.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadTokenShare {
    pub n_layers: usize,
    pub n_heads: usize,
    pub positions: Vec<usize>,
    pub tokens: Vec<String>,
    /// `[layer * n_heads + head][token]`.
    pub shares: Vec<Vec<f64>>,
}

fn check(att: &AttentionSummary, seq: &TokenSequence) -> Result<(), ExplainError> {
    if att.seq_len != seq.len() {
        return Err(ExplainError::LengthMismatch { attention: att.seq_len, sequence: seq.len() });
    }
    Ok(())
}

fn token_text(tokenizer: &Tokenizer, id: u32) -> String {
    tokenizer.vocab().token(id).unwrap_or("<?>").to_string()
}

/// Mean attention received by each real token over all heads of `layer`
/// (default: last) and all non-PAD queries, renormalized over real tokens.
pub fn token_importance(
    att: Option<&AttentionSummary>,
    seq: &TokenSequence,
    tokenizer: &Tokenizer,
    layer: Option<usize>,
) -> Result<TokenAttribution, ExplainError> {
    let att = att.ok_or(ExplainError::NoAttention)?;
    check(att, seq)?;
    let layer = layer.unwrap_or(att.n_layers - 1);
    if layer >= att.n_layers {
        return Err(ExplainError::LayerOutOfRange { layer, n_layers: att.n_layers });
    }
    let queries: Vec<usize> = (0..seq.len()).filter(|&q| seq.ids[q] != PAD).collect();
    let positions: Vec<usize> = (0..seq.len()).filter(|&k| !is_special(seq.ids[k])).collect();
    if positions.is_empty() {
        return Err(ExplainError::NoRealTokens);
    }
    let mut raw: Vec<f64> = positions
        .iter()
        .map(|&k| {
            let mut sum = 0.0;
            for h in 0..att.n_heads {
                for &q in &queries {
                    sum += att.get(layer, h, q, k);
                }
            }
            sum / (att.n_heads * queries.len()) as f64
        })
        .collect();
    let total: f64 = raw.iter().sum();
    if total > 0.0 {
        raw.iter_mut().for_each(|s| *s /= total);
    } else {
        raw.fill(1.0 / positions.len() as f64);
    }
    let tokens = positions.iter().map(|&k| token_text(tokenizer, seq.ids[k])).collect();
    Ok(TokenAttribution { positions, tokens, scores: raw })
}

pub fn head_token_share(
    att: &AttentionSummary,
    seq: &TokenSequence,
    tokenizer: &Tokenizer,
) -> Result<HeadTokenShare, ExplainError> {
    check(att, seq)?;
    let positions: Vec<usize> = (0..seq.len()).filter(|&k| seq.ids[k] != PAD).collect();
    let mut shares = Vec::with_capacity(att.n_layers * att.n_heads);
    for l in 0..att.n_layers {
        for h in 0..att.n_heads {
            let received: Vec<f64> =
                positions.iter().map(|&k| positions.iter().map(|&q| att.get(l, h, q, k)).sum()).collect();
            let total: f64 = received.iter().sum();
            shares.push(received.iter().map(|r| if total > 0.0 { 100.0 * r / total } else { 0.0 }).collect());
        }
    }
    Ok(HeadTokenShare {
        n_layers: att.n_layers,
        n_heads: att.n_heads,
        tokens: positions.iter().map(|&k| token_text(tokenizer, seq.ids[k])).collect(),
        positions,
        shares,
    })
}

/// Averages per-molecule share matrices by token string. A token absent from
/// a molecule contributes 0 for that molecule, so rows still sum to 100.
pub fn aggregate_shares(items: &[HeadTokenShare]) -> Option<HeadTokenShare> {
    let first = items.first()?;
    let rows = first.n_layers * first.n_heads;
    let mut acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for item in items {
        assert_eq!(item.shares.len(), rows, "share matrices differ in shape");
        for (t, token) in item.tokens.iter().enumerate() {
            let col = acc.entry(token.clone()).or_insert_with(|| vec![0.0; rows]);
            for r in 0..rows {
                col[r] += item.shares[r][t];
            }
        }
    }
    let n = items.len() as f64;
    let tokens: Vec<String> = acc.keys().cloned().collect();
    let shares = (0..rows).map(|r| acc.values().map(|col| col[r] / n).collect()).collect();
    Some(HeadTokenShare {
        n_layers: first.n_layers,
        n_heads: first.n_heads,
        positions: (0..tokens.len()).collect(),
        tokens,
        shares,
    })
}

pub fn attribution_csv(attr: &TokenAttribution) -> Result<Vec<u8>, ExplainError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["token_index", "token", "score"])?;
    for ((p, t), s) in attr.positions.iter().zip(&attr.tokens).zip(&attr.scores) {
        w.write_record([p.to_string(), t.clone(), s.to_string()])?;
    }
    w.into_inner().map_err(|e| ExplainError::Io(e.into_error()))
}

pub fn shares_csv(shares: &HeadTokenShare) -> Result<Vec<u8>, ExplainError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["layer", "head", "token_index", "token", "share"])?;
    for l in 0..shares.n_layers {
        for h in 0..shares.n_heads {
            let row = &shares.shares[l * shares.n_heads + h];
            for ((p, t), s) in shares.positions.iter().zip(&shares.tokens).zip(row) {
                w.write_record([l.to_string(), h.to_string(), p.to_string(), t.clone(), s.to_string()])?;
            }
        }
    }
    w.into_inner().map_err(|e| ExplainError::Io(e.into_error()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub class_id: String,
    pub name: String,
    pub probability: f64,
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            _ => out.push(c),
        }
    }
    out
}

/// Importance band 0..=4 relative to the largest score.
pub fn quintile(score: f64, max: f64) -> usize {
    if max <= 0.0 {
        return 0;
    }
    ((score / max * 5.0).floor() as usize).min(4)
}

const STYLE: &str = "body{font-family:sans-serif;margin:2em}\
.smiles{font-family:monospace;font-size:1.6em}\
.tok{padding:0 1px}.q0{background:#fff5f0}.q1{background:#fcbba1}.q2{background:#fb6a4a}\
.q3{background:#de2d26;color:#fff}.q4{background:#a50f15;color:#fff}\
table{border-collapse:collapse}td,th{border:1px solid #ccc;padding:2px 6px;font-family:monospace;text-align:right}\
.banner{padding:0.5em;background:#fff3cd;border:1px solid #e0c060}";

/// Self-contained HTML: shaded SMILES tokens, head×token share grid, accepted classes.
pub fn render_report(
    smiles: &str,
    attribution: &TokenAttribution,
    shares: &HeadTokenShare,
    predictions: &[Prediction],
) -> String {
    let mut h = String::new();
    let _ = write!(
        h,
        "<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n<title>{}</title>\n<style>{STYLE}</style>\n</head>\n<body>\n",
        escape(smiles)
    );
    let _ = writeln!(h, "<h1>Explanation</h1>\n<p>Input: <code>{}</code></p>", escape(smiles));
    h.push_str("<h2>Token importance</h2>\n<div class=\"smiles\">");
    let max = attribution.scores.iter().copied().fold(0.0, f64::max);
    for (t, s) in attribution.tokens.iter().zip(&attribution.scores) {
        let _ = write!(h, "<span class=\"tok q{}\" title=\"{:.4}\">{}</span>", quintile(*s, max), s, escape(t));
    }
    h.push_str("</div>\n<h2>Attention share per head (%)</h2>\n<table>\n<tr><th>layer-head</th>");
    for t in &shares.tokens {
        let _ = write!(h, "<th>{}</th>", escape(t));
    }
    h.push_str("</tr>\n");
    for l in 0..shares.n_layers {
        for hd in 0..shares.n_heads {
            let _ = write!(h, "<tr><th>{}-{}</th>", l + 1, hd + 1);
            for s in &shares.shares[l * shares.n_heads + hd] {
                let _ = write!(h, "<td style=\"background:rgba(222,45,38,{:.3})\">{:.1}</td>", s / 100.0, s);
            }
            h.push_str("</tr>\n");
        }
    }
    h.push_str("</table>\n<h2>Predicted classes</h2>\n");
    if predictions.is_empty() {
        h.push_str("<p class=\"banner\">no class above threshold</p>\n");
    } else {
        h.push_str("<ul>\n");
        for p in predictions {
            let _ = writeln!(h, "<li>{} {} ({:.3})</li>", escape(&p.class_id), escape(&p.name), p.probability);
        }
        h.push_str("</ul>\n");
    }
    h.push_str("</body>\n</html>\n");
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{train_bpe, BpeConfig, BOS, EOS};

    fn tokenizer() -> Tokenizer {
        train_bpe(&["CNOS"], BpeConfig { target_vocab: 9, min_frequency: 2 }).unwrap()
    }

    /// Summary where every non-PAD query spreads `row(q)` over keys.
    fn summary(n_heads: usize, t: usize, row: impl Fn(usize, usize) -> Vec<f64>) -> AttentionSummary {
        let mut w = Vec::new();
        for h in 0..n_heads {
            for q in 0..t {
                w.extend(row(h, q));
            }
        }
        AttentionSummary::new(1, n_heads, t, w)
    }

    #[test]
    fn single_real_token_scores_one() {
        let tok = tokenizer();
        let seq = TokenSequence::new(vec![BOS, 5, EOS]);
        let att = summary(1, 3, |_, _| vec![0.2, 0.3, 0.5]);
        let a = token_importance(Some(&att), &seq, &tok, None).unwrap();
        assert_eq!(a.scores, vec![1.0]);
        assert_eq!(a.positions, vec![1]);
    }

    #[test]
    fn uniform_attention_is_uniform() {
        let tok = tokenizer();
        let seq = TokenSequence::new(vec![BOS, 5, 6, 7, 8, EOS, PAD]);
        let att = summary(2, 7, |_, _| {
            let mut r = vec![1.0 / 6.0; 6];
            r.push(0.0);
            r
        });
        let a = token_importance(Some(&att), &seq, &tok, None).unwrap();
        assert_eq!(a.scores, vec![0.25; 4]);
        let s = head_token_share(&att, &seq, &tok).unwrap();
        for row in &s.shares {
            assert_eq!(row.len(), 6);
            for v in row {
                assert!((v - 100.0 / 6.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn two_heads_on_two_tokens_average() {
        let tok = tokenizer();
        let seq = TokenSequence::new(vec![BOS, 5, 6, EOS]);
        let att = summary(2, 4, |h, _| if h == 0 { vec![0.0, 1.0, 0.0, 0.0] } else { vec![0.0, 0.0, 1.0, 0.0] });
        let a = token_importance(Some(&att), &seq, &tok, Some(0)).unwrap();
        assert_eq!(a.scores, vec![0.5, 0.5]);
        let s = head_token_share(&att, &seq, &tok).unwrap();
        assert_eq!(s.shares[0], vec![0.0, 100.0, 0.0, 0.0]);
    }

    #[test]
    fn errors() {
        let tok = tokenizer();
        let seq = TokenSequence::new(vec![BOS, 5, EOS]);
        assert!(matches!(token_importance(None, &seq, &tok, None), Err(ExplainError::NoAttention)));
        let att = summary(1, 3, |_, _| vec![0.2, 0.3, 0.5]);
        assert!(matches!(
            token_importance(Some(&att), &seq, &tok, Some(1)),
            Err(ExplainError::LayerOutOfRange { layer: 1, n_layers: 1 })
        ));
    }

    #[test]
    fn report_rendering() {
        let tok = tokenizer();
        let seq = TokenSequence::new(vec![BOS, 5, 6, 7, 8, 5, EOS]);
        let att = summary(1, 7, |_, q| (0..7).map(|k| if k == (q + 1) % 7 { 1.0 } else { 0.0 }).collect());
        let a = token_importance(Some(&att), &seq, &tok, None).unwrap();
        let s = head_token_share(&att, &seq, &tok).unwrap();
        let preds = vec![Prediction { class_id: "X:1".into(), name: "thing <a>".into(), probability: 0.9 }];
        let html = render_report("C<N", &a, &s, &preds);
        assert_eq!(html, render_report("C<N", &a, &s, &preds));
        assert_eq!(html.matches("class=\"tok ").count(), 5);
        assert!(html.contains("C&lt;N"));
        assert!(html.contains("thing &lt;a&gt;"));
        assert!(!html.contains("no class above threshold"));
        assert!(render_report("C", &a, &s, &[]).contains("no class above threshold"));
    }

    #[test]
    fn aggregation_keeps_rows_at_100() {
        let tok = tokenizer();
        let s1 = head_token_share(
            &summary(1, 3, |_, _| vec![0.2, 0.3, 0.5]),
            &TokenSequence::new(vec![BOS, 5, EOS]),
            &tok,
        )
        .unwrap();
        let s2 = head_token_share(
            &summary(1, 4, |_, _| vec![0.1, 0.1, 0.4, 0.4]),
            &TokenSequence::new(vec![BOS, 6, 7, EOS]),
            &tok,
        )
        .unwrap();
        let agg = aggregate_shares(&[s1, s2]).unwrap();
        assert_eq!(agg.tokens.len(), 5);
        assert!((agg.shares[0].iter().sum::<f64>() - 100.0).abs() < 1e-9);
    }
}
