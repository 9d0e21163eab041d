use ontoext::evaluation::{Averaging, Prf};

pub fn safe(n: f64, d: f64) -> f64 {
    if d == 0.0 {
        0.0
    } else {
        n / d
    }
}

pub fn f1_of(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

fn triple(pairs: impl Iterator<Item = (bool, bool)>) -> (f64, f64, f64) {
    let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
    for (t, p) in pairs {
        if t && p {
            tp += 1.0;
        }
        if !t && p {
            fp += 1.0;
        }
        if t && !p {
            fn_ += 1.0;
        }
    }
    let p = safe(tp, tp + fp);
    let r = safe(tp, tp + fn_);
    (p, r, f1_of(p, r))
}

/// Per-definition recomputation, independent of the library's helpers.
pub fn brute_prf(t: &[Vec<bool>], p: &[Vec<bool>], avg: Averaging) -> Prf {
    let n = t.len();
    let k = t[0].len();
    let (ps, rs, fs, ws): (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) = match avg {
        Averaging::Micro => {
            let (a, b, c) = triple((0..n).flat_map(|i| (0..k).map(move |j| (i, j))).map(|(i, j)| (t[i][j], p[i][j])));
            return Prf { precision: a, recall: b, f1: c };
        }
        Averaging::Samples => {
            let mut out = (vec![], vec![], vec![], vec![]);
            for i in 0..n {
                let (a, b, c) = triple((0..k).map(|j| (t[i][j], p[i][j])));
                out.0.push(a);
                out.1.push(b);
                out.2.push(c);
                out.3.push(1.0);
            }
            out
        }
        Averaging::Macro | Averaging::Weighted => {
            let mut out = (vec![], vec![], vec![], vec![]);
            for j in 0..k {
                let (a, b, c) = triple((0..n).map(|i| (t[i][j], p[i][j])));
                out.0.push(a);
                out.1.push(b);
                out.2.push(c);
                let support = (0..n).filter(|&i| t[i][j]).count() as f64;
                out.3.push(if avg == Averaging::Macro { 1.0 } else { support });
            }
            out
        }
    };
    let total: f64 = ws.iter().sum();
    let mean = |v: &[f64]| safe(v.iter().zip(&ws).map(|(x, w)| x * w).sum::<f64>(), total);
    Prf { precision: mean(&ps), recall: mean(&rs), f1: mean(&fs) }
}

pub fn brute_auc(t: &[bool], s: &[f64]) -> Option<f64> {
    let (mut score, mut pairs) = (0.0, 0.0);
    for i in 0..t.len() {
        for j in 0..t.len() {
            if t[i] && !t[j] {
                pairs += 1.0;
                if s[i] > s[j] {
                    score += 1.0;
                } else if s[i] == s[j] {
                    score += 0.5;
                }
            }
        }
    }
    (pairs > 0.0).then(|| score / pairs)
}
