//! Runs every pipeline stage on the synthetic toy ontology.
//!
//! Usage: toy_pipeline <workdir> [seed]

use std::path::PathBuf;
use std::time::Instant;

use ontoext::config::RunConfig;
use ontoext::pipeline::{
    build_dataset_step, classify_step, evaluate_step, explain_step, extend_step, finetune_step, pretrain_step,
    train_tokenizer_step,
};
use ontoext::toy::write_toy_workspace;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().ok_or("usage: toy_pipeline <workdir> [seed]")?);
    let seed: u64 = args.next().map_or(Ok(1), |s| s.parse())?;
    let start = Instant::now();
    let config = RunConfig::load(&write_toy_workspace(&dir, seed)?)?;
    let sizes = build_dataset_step(&config)?;
    println!("dataset: {} labels, {}/{}/{} molecules", sizes.n_labels, sizes.train, sizes.validation, sizes.test);
    let tokenizer = train_tokenizer_step(&config)?;
    println!("tokenizer: {} tokens", tokenizer.vocab_size());
    if let Some(out) = pretrain_step(&config)? {
        let (first, last) = (out.logs.first().unwrap(), out.logs.last().unwrap());
        println!("pretrain: loss {:.4} -> {:.4} ({:.0}s)", first.train_loss, last.train_loss, start.elapsed().as_secs_f64());
    }
    let out = finetune_step(&config)?;
    let last = out.logs.last().unwrap();
    println!("finetune: loss {:.4}, val samples F1 {:?} ({:.0}s)", last.train_loss, last.val_f1_samples, start.elapsed().as_secs_f64());
    let eval = evaluate_step(&config)?;
    println!("test: micro F1 {:.4}, samples F1 {:.4}", eval.report.micro.f1, eval.report.samples.f1);
    let results = classify_step(&config)?;
    println!("classified {} inputs", results.len());
    explain_step(&config)?;
    let report = extend_step(&config)?;
    println!("extended: {} classes added, {} below threshold", report.added.len(), report.below_threshold.len());
    println!("total {:.0}s", start.elapsed().as_secs_f64());
    Ok(())
}
