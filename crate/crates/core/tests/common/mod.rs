#![allow(dead_code)]

pub mod dag;
pub mod metrics;

use ontoext::model::{EncoderModel, ModelConfig, Mode, TrainBatch};
use ontoext::tokenizer::PAD;

pub fn tiny_config(seed: u64) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 2,
        hidden_dim: 8,
        ffn_dim: 16,
        vocab_size: 20,
        max_len: 16,
        n_labels: 3,
        attention_dropout: 0.1,
        seed,
        ..ModelConfig::default()
    }
}

type Mat = Vec<Vec<f64>>;

fn mat(flat: &[f64], rows: usize, cols: usize) -> Mat {
    (0..rows).map(|r| flat[r * cols..(r + 1) * cols].to_vec()).collect()
}

fn matmul(a: &Mat, b: &Mat) -> Mat {
    let n = b[0].len();
    a.iter()
        .map(|row| (0..n).map(|j| row.iter().enumerate().map(|(k, x)| x * b[k][j]).sum()).collect())
        .collect()
}

fn add_bias(a: &Mat, b: &[f64]) -> Mat {
    a.iter().map(|row| row.iter().zip(b).map(|(x, y)| x + y).collect()).collect()
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect()).collect()
}

fn norm(a: &Mat, g: &[f64], b: &[f64]) -> Mat {
    a.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mu = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / n;
            row.iter().enumerate().map(|(i, x)| (x - mu) / (var + 1e-5).sqrt() * g[i] + b[i]).collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / 2f64.sqrt()))
}

/// Final hidden states computed step by step from named parameters.
pub fn oracle_hidden(model: &EncoderModel, ids: &[u32]) -> Mat {
    let c = model.config();
    let p = |name: &str| model.params().get(name).unwrap_or_else(|| panic!("missing {name}")).to_vec();
    let (d, f, t) = (c.hidden_dim, c.ffn_dim, ids.len());
    let tok = mat(&p("embeddings.token"), c.vocab_size, d);
    let pos = mat(&p("embeddings.position"), c.max_len, d);
    let mut x: Mat = ids.iter().enumerate().map(|(i, &id)| (0..d).map(|j| tok[id as usize][j] + pos[i][j]).collect()).collect();
    let dh = d / c.n_heads;
    for l in 0..c.n_layers {
        let w = |s: &str, r, k| mat(&p(&format!("layer{l}.{s}")), r, k);
        let v = |s: &str| p(&format!("layer{l}.{s}"));
        let a = norm(&x, &v("ln1.gamma"), &v("ln1.beta"));
        let q = add_bias(&matmul(&a, &w("attn.query.weight", d, d)), &v("attn.query.bias"));
        let k = add_bias(&matmul(&a, &w("attn.key.weight", d, d)), &v("attn.key.bias"));
        let vv = add_bias(&matmul(&a, &w("attn.value.weight", d, d)), &v("attn.value.bias"));
        let mut ctx = vec![vec![0.0; d]; t];
        for h in 0..c.n_heads {
            for i in 0..t {
                let scores: Vec<f64> = (0..t)
                    .map(|j| {
                        let s: f64 = (h * dh..(h + 1) * dh).map(|e| q[i][e] * k[j][e]).sum::<f64>() / (dh as f64).sqrt();
                        if ids[j] == PAD { s + f64::NEG_INFINITY } else { s }
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for j in 0..t {
                    for col in h * dh..(h + 1) * dh {
                        ctx[i][col] += e[j] / z * vv[j][col];
                    }
                }
            }
        }
        let o = add_bias(&matmul(&ctx, &w("attn.output.weight", d, d)), &v("attn.output.bias"));
        x = add(&x, &o);
        let b = norm(&x, &v("ln2.gamma"), &v("ln2.beta"));
        let u = add_bias(&matmul(&b, &w("ffn.in.weight", d, f)), &v("ffn.in.bias"));
        let g: Mat = u.iter().map(|r| r.iter().map(|&z| gelu(z)).collect()).collect();
        let out = add_bias(&matmul(&g, &w("ffn.out.weight", f, d)), &v("ffn.out.bias"));
        x = add(&x, &out);
    }
    norm(&x, &p("final_ln.gamma"), &p("final_ln.beta"))
}

pub fn oracle_logits(model: &EncoderModel, ids: &[u32]) -> Vec<f64> {
    let c = model.config();
    let h = oracle_hidden(model, ids);
    let w = mat(model.params().get("classifier.weight").unwrap(), c.hidden_dim, c.n_labels);
    add_bias(&matmul(&vec![h[0].clone()], &w), model.params().get("classifier.bias").unwrap())[0].clone()
}

pub fn oracle_mlm_logits(model: &EncoderModel, ids: &[u32], pos: usize) -> Vec<f64> {
    let c = model.config();
    let h = oracle_hidden(model, ids);
    let e = mat(model.params().get("embeddings.token").unwrap(), c.vocab_size, c.hidden_dim);
    let bias = model.params().get("mlm.bias").unwrap();
    (0..c.vocab_size).map(|v| bias[v] + (0..c.hidden_dim).map(|j| e[v][j] * h[pos][j]).sum::<f64>()).collect()
}

pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst: String,
    pub checked: usize,
}

/// Compares analytic gradients with central differences over every scalar parameter.
pub fn gradient_check(model: &mut EncoderModel, batch: TrainBatch<'_>, eps: f64) -> GradCheck {
    model.loss_and_grad(batch, Mode::Inference).expect("loss");
    let analytic: Vec<Vec<f64>> = (0..model.params().len()).map(|s| model.params().grad(s).to_vec()).collect();
    let mut result = GradCheck { max_rel_error: 0.0, worst: String::new(), checked: 0 };
    for slot in 0..model.params().len() {
        for i in 0..model.params().value(slot).len() {
            let orig = model.params().value(slot)[i];
            model.params_mut().value_mut(slot)[i] = orig + eps;
            let plus = model.loss(batch, Mode::Inference).unwrap();
            model.params_mut().value_mut(slot)[i] = orig - eps;
            let minus = model.loss(batch, Mode::Inference).unwrap();
            model.params_mut().value_mut(slot)[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[slot][i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > result.max_rel_error {
                result.max_rel_error = rel;
                result.worst = format!("{}[{i}] analytic {a:e} numeric {numeric:e}", model.params().info(slot).name);
            }
            result.checked += 1;
        }
    }
    result
}
