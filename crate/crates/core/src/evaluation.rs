//! Multi-label precision, recall, F1 and ROC-AUC under samples, micro, macro
//! and weighted averaging.
//!
//! Zero denominators give 0. Predictions use `score >= threshold`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::LabelIndex;
use crate::fsutil::write_atomic;
use crate::model::{EncoderModel, ModelError, Mode};
use crate::tokenizer::TokenSequence;

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const REPORT_FILE: &str = "report.json";
pub const PER_CLASS_FILE: &str = "per_class_f1.csv";
pub const PER_MOLECULE_FILE: &str = "per_molecule_f1.csv";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("ROC-AUC undefined for {0} averaging: no column or row has both classes")]
    UndefinedAuc(Averaging),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Averaging {
    Samples,
    Micro,
    Macro,
    Weighted,
}

impl Averaging {
    pub const ALL: [Averaging; 4] = [Averaging::Samples, Averaging::Micro, Averaging::Macro, Averaging::Weighted];
}

impl std::fmt::Display for Averaging {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Averaging::Samples => "samples",
            Averaging::Micro => "micro",
            Averaging::Macro => "macro",
            Averaging::Weighted => "weighted",
        })
    }
}

/// Ground truth, scores and thresholded predictions for `n` rows and `k` labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMatrix {
    pub y_true: Vec<Vec<bool>>,
    pub y_score: Vec<Vec<f64>>,
    pub y_pred: Vec<Vec<bool>>,
    pub threshold: f64,
}

impl PredictionMatrix {
    pub fn new(y_true: Vec<Vec<bool>>, y_score: Vec<Vec<f64>>, threshold: f64) -> Result<Self, EvalError> {
        check_shapes(&y_true, &y_score)?;
        let y_pred = binarize(&y_score, threshold);
        Ok(PredictionMatrix { y_true, y_score, y_pred, threshold })
    }

    pub fn rows(&self) -> usize {
        self.y_true.len()
    }

    pub fn cols(&self) -> usize {
        self.y_true.first().map_or(0, Vec::len)
    }
}

fn check_shapes<A, B>(a: &[Vec<A>], b: &[Vec<B>]) -> Result<usize, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::Shape(format!("{} rows vs {} rows", a.len(), b.len())));
    }
    let k = a.first().map_or(0, Vec::len);
    for (i, (ra, rb)) in a.iter().zip(b).enumerate() {
        if ra.len() != k || rb.len() != k {
            return Err(EvalError::Shape(format!("row {i} has {} and {} columns, expected {k}", ra.len(), rb.len())));
        }
    }
    Ok(k)
}

pub fn binarize(y_score: &[Vec<f64>], threshold: f64) -> Vec<Vec<bool>> {
    y_score.iter().map(|row| row.iter().map(|&s| s >= threshold).collect()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Copy, Default)]
struct Counts {
    tp: u64,
    fp: u64,
    fn_: u64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Counts {
    fn add(&mut self, t: bool, p: bool) {
        match (t, p) {
            (true, true) => self.tp += 1,
            (false, true) => self.fp += 1,
            (true, false) => self.fn_ += 1,
            (false, false) => {}
        }
    }

    fn prf(self) -> Prf {
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        Prf { precision, recall, f1 }
    }
}

fn mean_prf(items: &[Prf], weights: &[f64]) -> Prf {
    let total: f64 = weights.iter().sum();
    if total == 0.0 {
        return Prf { precision: 0.0, recall: 0.0, f1: 0.0 };
    }
    let avg = |f: fn(&Prf) -> f64| items.iter().zip(weights).map(|(p, w)| f(p) * w).sum::<f64>() / total;
    Prf { precision: avg(|p| p.precision), recall: avg(|p| p.recall), f1: avg(|p| p.f1) }
}

/// Per-row scores (one per molecule).
pub fn row_prf(y_true: &[Vec<bool>], y_pred: &[Vec<bool>]) -> Result<Vec<Prf>, EvalError> {
    check_shapes(y_true, y_pred)?;
    Ok(y_true
        .iter()
        .zip(y_pred)
        .map(|(t, p)| {
            let mut c = Counts::default();
            t.iter().zip(p).for_each(|(&a, &b)| c.add(a, b));
            c.prf()
        })
        .collect())
}

/// Per-column scores and supports (one per class).
pub fn column_prf(y_true: &[Vec<bool>], y_pred: &[Vec<bool>]) -> Result<Vec<(Prf, u64)>, EvalError> {
    let k = check_shapes(y_true, y_pred)?;
    Ok((0..k)
        .map(|j| {
            let mut c = Counts::default();
            for (t, p) in y_true.iter().zip(y_pred) {
                c.add(t[j], p[j]);
            }
            (c.prf(), c.tp + c.fn_)
        })
        .collect())
}

pub fn prf(y_true: &[Vec<bool>], y_pred: &[Vec<bool>], averaging: Averaging) -> Result<Prf, EvalError> {
    let k = check_shapes(y_true, y_pred)?;
    if k == 0 {
        return Err(EvalError::Shape("no label columns".into()));
    }
    Ok(match averaging {
        Averaging::Samples => {
            let rows = row_prf(y_true, y_pred)?;
            mean_prf(&rows, &vec![1.0; rows.len()])
        }
        Averaging::Micro => {
            let mut c = Counts::default();
            for (t, p) in y_true.iter().zip(y_pred) {
                t.iter().zip(p).for_each(|(&a, &b)| c.add(a, b));
            }
            c.prf()
        }
        Averaging::Macro | Averaging::Weighted => {
            let cols = column_prf(y_true, y_pred)?;
            let (items, supports): (Vec<Prf>, Vec<u64>) = cols.into_iter().unzip();
            let weights: Vec<f64> = if averaging == Averaging::Macro {
                vec![1.0; items.len()]
            } else {
                supports.iter().map(|&s| s as f64).collect()
            };
            mean_prf(&items, &weights)
        }
    })
}

/// Mann-Whitney AUC of one score list; `None` when only one class is present.
pub fn binary_auc(y_true: &[bool], y_score: &[f64]) -> Option<f64> {
    let mut order: Vec<usize> = (0..y_true.len()).collect();
    order.sort_by(|&a, &b| y_score[a].total_cmp(&y_score[b]));
    let n_pos = y_true.iter().filter(|&&t| t).count() as u64;
    let n_neg = y_true.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    // half-units: a win counts 2, a tie 1
    let mut half_wins: u64 = 0;
    let mut neg_below: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && y_score[order[j]] == y_score[order[i]] {
            j += 1;
        }
        let group = &order[i..j];
        let pos = group.iter().filter(|&&r| y_true[r]).count() as u64;
        let neg = group.len() as u64 - pos;
        half_wins += pos * (2 * neg_below + neg);
        neg_below += neg;
        i = j;
    }
    Some(half_wins as f64 / (2 * n_pos * n_neg) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AucResult {
    pub auc: f64,
    /// Columns (macro, weighted) or rows (samples) skipped for lacking both classes.
    pub excluded: usize,
}

pub fn roc_auc(y_true: &[Vec<bool>], y_score: &[Vec<f64>], averaging: Averaging) -> Result<AucResult, EvalError> {
    let k = check_shapes(y_true, y_score)?;
    let undefined = EvalError::UndefinedAuc(averaging);
    match averaging {
        Averaging::Micro => {
            let t: Vec<bool> = y_true.iter().flatten().copied().collect();
            let s: Vec<f64> = y_score.iter().flatten().copied().collect();
            binary_auc(&t, &s).map(|auc| AucResult { auc, excluded: 0 }).ok_or(undefined)
        }
        Averaging::Samples => {
            let aucs: Vec<Option<f64>> = y_true.iter().zip(y_score).map(|(t, s)| binary_auc(t, s)).collect();
            let valid: Vec<f64> = aucs.iter().flatten().copied().collect();
            if valid.is_empty() {
                return Err(undefined);
            }
            Ok(AucResult { auc: valid.iter().sum::<f64>() / valid.len() as f64, excluded: aucs.len() - valid.len() })
        }
        Averaging::Macro | Averaging::Weighted => {
            let mut total = 0.0;
            let mut weight = 0.0;
            let mut excluded = 0;
            for j in 0..k {
                let t: Vec<bool> = y_true.iter().map(|r| r[j]).collect();
                let s: Vec<f64> = y_score.iter().map(|r| r[j]).collect();
                match binary_auc(&t, &s) {
                    Some(auc) => {
                        let w = if averaging == Averaging::Macro { 1.0 } else { t.iter().filter(|&&x| x).count() as f64 };
                        total += auc * w;
                        weight += w;
                    }
                    None => excluded += 1,
                }
            }
            if weight == 0.0 {
                return Err(undefined);
            }
            Ok(AucResult { auc: total / weight, excluded })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AveragedScores {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    /// `None` when undefined for this averaging.
    pub roc_auc: Option<f64>,
    pub roc_auc_excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub samples: AveragedScores,
    pub micro: AveragedScores,
    pub macro_: AveragedScores,
    pub weighted: AveragedScores,
    pub threshold: f64,
    pub n_molecules: usize,
    pub n_labels: usize,
}

impl MetricReport {
    pub fn get(&self, averaging: Averaging) -> &AveragedScores {
        match averaging {
            Averaging::Samples => &self.samples,
            Averaging::Micro => &self.micro,
            Averaging::Macro => &self.macro_,
            Averaging::Weighted => &self.weighted,
        }
    }

    /// `{"samples": {...}, "micro": {...}, ...}` with run metadata.
    pub fn to_json(&self) -> String {
        let mut map = serde_json::Map::new();
        for avg in Averaging::ALL {
            map.insert(avg.to_string(), serde_json::to_value(self.get(avg)).expect("serializable"));
        }
        map.insert("threshold".into(), self.threshold.into());
        map.insert("n_molecules".into(), self.n_molecules.into());
        map.insert("n_labels".into(), self.n_labels.into());
        let mut out = serde_json::to_string_pretty(&serde_json::Value::Object(map)).expect("serializable");
        out.push('\n');
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassF1 {
    pub class_id: String,
    pub support: u64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MetricReport,
    pub per_class: Vec<ClassF1>,
    pub per_molecule: Vec<f64>,
}

impl Evaluation {
    pub fn per_class_csv(&self) -> Result<Vec<u8>, EvalError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.per_class {
            w.serialize(row)?;
        }
        w.into_inner().map_err(|e| EvalError::Io(e.into_error()))
    }

    pub fn per_molecule_csv(&self) -> Result<Vec<u8>, EvalError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["row_index", "f1"])?;
        for (i, f1) in self.per_molecule.iter().enumerate() {
            w.write_record([i.to_string(), f1.to_string()])?;
        }
        w.into_inner().map_err(|e| EvalError::Io(e.into_error()))
    }

    /// Writes the JSON report and both CSV tables into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), EvalError> {
        std::fs::create_dir_all(dir)?;
        write_atomic(&dir.join(REPORT_FILE), self.report.to_json().as_bytes())?;
        write_atomic(&dir.join(PER_CLASS_FILE), &self.per_class_csv()?)?;
        write_atomic(&dir.join(PER_MOLECULE_FILE), &self.per_molecule_csv()?)?;
        Ok(())
    }
}

pub fn evaluate_matrix(m: &PredictionMatrix, labels: &LabelIndex) -> Result<Evaluation, EvalError> {
    if m.cols() != labels.len() {
        return Err(EvalError::Shape(format!("{} score columns for {} labels", m.cols(), labels.len())));
    }
    let scores = |avg| -> Result<AveragedScores, EvalError> {
        let p = prf(&m.y_true, &m.y_pred, avg)?;
        let (roc_auc, roc_auc_excluded) = match roc_auc(&m.y_true, &m.y_score, avg) {
            Ok(r) => (Some(r.auc), r.excluded),
            Err(EvalError::UndefinedAuc(_)) => (None, if avg == Averaging::Samples { m.rows() } else { m.cols() }),
            Err(e) => return Err(e),
        };
        if roc_auc_excluded > 0 {
            log::warn!("{avg} ROC-AUC skipped {roc_auc_excluded} single-class entries");
        }
        Ok(AveragedScores { f1: p.f1, precision: p.precision, recall: p.recall, roc_auc, roc_auc_excluded })
    };
    let report = MetricReport {
        samples: scores(Averaging::Samples)?,
        micro: scores(Averaging::Micro)?,
        macro_: scores(Averaging::Macro)?,
        weighted: scores(Averaging::Weighted)?,
        threshold: m.threshold,
        n_molecules: m.rows(),
        n_labels: m.cols(),
    };
    let per_class = column_prf(&m.y_true, &m.y_pred)?
        .into_iter()
        .enumerate()
        .map(|(j, (p, support))| ClassF1 { class_id: labels.class(j).to_string(), support, f1: p.f1 })
        .collect();
    let per_molecule = row_prf(&m.y_true, &m.y_pred)?.into_iter().map(|p| p.f1).collect();
    Ok(Evaluation { report, per_class, per_molecule })
}

/// Label probabilities for every input, in order.
pub fn predict_scores(model: &EncoderModel, inputs: &[TokenSequence]) -> Result<Vec<Vec<f64>>, EvalError> {
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(64) {
        out.extend(model.forward(chunk, false, Mode::Inference)?.into_iter().map(|o| o.probabilities));
    }
    Ok(out)
}

pub fn evaluate(
    model: &EncoderModel,
    inputs: &[TokenSequence],
    y_true: Vec<Vec<bool>>,
    labels: &LabelIndex,
    threshold: f64,
) -> Result<Evaluation, EvalError> {
    if model.config().n_labels != labels.len() {
        return Err(EvalError::Shape(format!(
            "model predicts {} labels, label index has {}",
            model.config().n_labels,
            labels.len()
        )));
    }
    let scores = predict_scores(model, inputs)?;
    evaluate_matrix(&PredictionMatrix::new(y_true, scores, threshold)?, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(rows: &[&[u8]]) -> Vec<Vec<bool>> {
        rows.iter().map(|r| r.iter().map(|&x| x == 1).collect()).collect()
    }

    #[test]
    fn binarize_uses_greater_or_equal() {
        assert_eq!(binarize(&[vec![0.5, 0.3, 0.7]], 0.5), vec![vec![true, false, true]]);
        assert_eq!(binarize(&[vec![0.0, 0.0]], 0.5), vec![vec![false, false]]);
    }

    #[test]
    fn worked_micro_and_macro_examples() {
        let t = b(&[&[1, 0], &[1, 1]]);
        let p = b(&[&[1, 0], &[0, 1]]);
        let micro = prf(&t, &p, Averaging::Micro).unwrap();
        assert_eq!(micro.precision, 1.0);
        assert!((micro.recall - 2.0 / 3.0).abs() < 1e-15);
        assert!((micro.f1 - 0.8).abs() < 1e-15);
        let macro_ = prf(&t, &p, Averaging::Macro).unwrap();
        assert!((macro_.f1 - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn identity_predictions_score_one() {
        let t = b(&[&[1, 0, 1], &[0, 1, 0], &[1, 1, 0]]);
        for avg in Averaging::ALL {
            let r = prf(&t, &t, avg).unwrap();
            assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0), "{avg}");
        }
    }

    #[test]
    fn auc_examples() {
        assert_eq!(binary_auc(&[true, false, true, false], &[0.9, 0.8, 0.7, 0.1]), Some(0.75));
        assert_eq!(binary_auc(&[true, false, true, false], &[0.3; 4]), Some(0.5));
        assert_eq!(binary_auc(&[true, false], &[1.0, 0.0]), Some(1.0));
        assert_eq!(binary_auc(&[true, true], &[1.0, 0.0]), None);
    }

    #[test]
    fn single_class_columns_are_excluded() {
        let t = b(&[&[1, 1], &[0, 1]]);
        let s = vec![vec![0.9, 0.2], vec![0.1, 0.4]];
        let r = roc_auc(&t, &s, Averaging::Macro).unwrap();
        assert_eq!((r.auc, r.excluded), (1.0, 1));
        let none = roc_auc(&b(&[&[1], &[1]]), &[vec![0.2], vec![0.3]], Averaging::Macro);
        assert!(matches!(none, Err(EvalError::UndefinedAuc(Averaging::Macro))));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        assert!(matches!(prf(&b(&[&[1, 0]]), &b(&[&[1]]), Averaging::Micro), Err(EvalError::Shape(_))));
    }

    #[test]
    fn perfect_single_molecule_report() {
        let labels = LabelIndex::new(vec!["X:1".parse().unwrap()]).unwrap();
        let m = PredictionMatrix::new(b(&[&[1]]), vec![vec![0.9]], 0.5).unwrap();
        let e = evaluate_matrix(&m, &labels).unwrap();
        for avg in Averaging::ALL {
            let s = e.report.get(avg);
            assert_eq!((s.f1, s.precision, s.recall), (1.0, 1.0, 1.0));
        }
        assert_eq!(e.per_molecule, vec![1.0]);
        let csv = String::from_utf8(e.per_class_csv().unwrap()).unwrap();
        assert_eq!(csv, "class_id,support,f1\nX:1,1,1.0\n");
        let json: serde_json::Value = serde_json::from_str(&e.report.to_json()).unwrap();
        assert_eq!(json["micro"]["f1"], 1.0);
        assert!(json["macro"]["roc_auc"].is_null());
    }
}
