use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{LevelFilter, Log, Metadata, Record};
use ontoext::config::RunConfig;
use ontoext::pipeline::{self, PipelineError};

/// Extend an ontology with classes predicted by a small transformer.
#[derive(Debug, Parser)]
#[command(name = "ontoext", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration; flags below override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Decision threshold on class probabilities, strictly between 0 and 1.
    #[arg(long, global = true)]
    threshold: Option<f64>,
    #[arg(long, global = true, default_value = "info")]
    log_level: LevelFilter,
    #[arg(long, global = true)]
    ontology: Option<PathBuf>,
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    #[arg(long, global = true)]
    tokenizer: Option<PathBuf>,
    #[arg(long, global = true)]
    init_model: Option<PathBuf>,
    #[arg(long, global = true)]
    pretrained_model: Option<PathBuf>,
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    #[arg(long, global = true)]
    pretrain_corpus: Option<PathBuf>,
    #[arg(long, global = true)]
    input: Option<PathBuf>,
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    #[arg(long, global = true)]
    extended_ontology: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Select label classes and write train/validation/test TSV files.
    BuildDataset,
    /// Learn the BPE vocabulary from the training split.
    TrainTokenizer,
    /// Masked-language-model pretraining; `--epochs 0` copies the input model.
    Pretrain {
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Multi-label fine-tuning of the pretrained model.
    Finetune {
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score the model on the test split.
    Evaluate,
    /// Predict classes for each SMILES line of the input file.
    Classify,
    /// Write attention-based HTML reports for each input.
    Explain {
        #[arg(long)]
        layer: Option<usize>,
        /// Also average head-token shares over all inputs.
        #[arg(long)]
        aggregate: bool,
    },
    /// Insert the inputs into the ontology under their predicted classes.
    Extend,
}

/// `LEVEL<TAB>component<TAB>message` lines on stderr.
struct TabLogger {
    level: LevelFilter,
}

impl Log for TabLogger {
    fn enabled(&self, metadata: &Metadata) -> bool {
        metadata.level() <= self.level
    }

    fn log(&self, record: &Record) {
        if !self.enabled(record.metadata()) {
            return;
        }
        let target = record.target();
        let component = target.strip_prefix("ontoext::").unwrap_or(target);
        let message = record.args().to_string().replace(['\n', '\t'], " ");
        let _ = writeln!(std::io::stderr().lock(), "{}\t{component}\t{message}", record.level());
    }

    fn flush(&self) {}
}

fn apply(common: &Common, command: &Command) -> Result<RunConfig, PipelineError> {
    let mut config = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = Some(seed);
    }
    if let Some(t) = common.threshold {
        config.threshold = t;
    }
    let p = &mut config.paths;
    let overrides = [
        (&common.ontology, &mut p.ontology),
        (&common.dataset, &mut p.dataset),
        (&common.tokenizer, &mut p.tokenizer),
        (&common.init_model, &mut p.init_model),
        (&common.pretrained_model, &mut p.pretrained_model),
        (&common.model, &mut p.model),
        (&common.pretrain_corpus, &mut p.pretrain_corpus),
        (&common.input, &mut p.input),
        (&common.output, &mut p.output),
        (&common.extended_ontology, &mut p.extended_ontology),
    ];
    for (flag, slot) in overrides {
        if flag.is_some() {
            slot.clone_from(flag);
        }
    }
    match *command {
        Command::Pretrain { epochs: Some(e) } => config.pretrain.epochs = e,
        Command::Finetune { epochs: Some(e) } => config.finetune.epochs = e,
        Command::Explain { layer, aggregate } => {
            config.explain.layer = layer.or(config.explain.layer);
            config.explain.aggregate |= aggregate;
        }
        _ => {}
    }
    config.seed()?;
    config.validate()?;
    Ok(config)
}

fn run(cli: &Cli) -> Result<(), PipelineError> {
    let config = apply(&cli.common, &cli.command)?;
    match cli.command {
        Command::BuildDataset => {
            let s = pipeline::build_dataset_step(&config)?;
            log::info!("wrote {} train, {} validation, {} test molecules", s.train, s.validation, s.test);
        }
        Command::TrainTokenizer => {
            pipeline::train_tokenizer_step(&config)?;
        }
        Command::Pretrain { .. } => {
            pipeline::pretrain_step(&config)?;
        }
        Command::Finetune { .. } => {
            pipeline::finetune_step(&config)?;
        }
        Command::Evaluate => {
            pipeline::evaluate_step(&config)?;
        }
        Command::Classify => {
            let results = pipeline::classify_step(&config)?;
            let below = results.iter().filter(|r| r.below_threshold).count();
            log::info!("classified {} inputs, {below} without any class above threshold", results.len());
        }
        Command::Explain { .. } => {
            let n = pipeline::explain_step(&config)?;
            log::info!("wrote {n} explanation reports");
        }
        Command::Extend => {
            pipeline::extend_step(&config)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let logger = Box::new(TabLogger { level: cli.common.log_level });
    if log::set_boxed_logger(logger).is_ok() {
        log::set_max_level(cli.common.log_level);
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = e.to_string().replace(['\n', '\t'], " ");
            eprintln!("error\t{}\t{message}", e.kind());
            ExitCode::FAILURE
        }
    }
}
