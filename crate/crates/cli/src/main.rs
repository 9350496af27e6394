//! Command-line surface for the convmtl toolkit.
//!
//! Subcommands cover the whole pipeline: synthetic corpus generation,
//! auxiliary-target preparation, hyperparameter tuning, single training
//! runs, evaluation, bootstrap comparison, and attention reports. Each
//! command writes a run manifest with seeds and input hashes so its
//! outputs can be reproduced bit-identically.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use convmtl::corpus::{Partition, TaskKind};
use convmtl::error::Error;
use convmtl::model::Variant;
use convmtl::pipeline::{
    cmd_compare, cmd_eval, cmd_generate, cmd_prepare, cmd_report, cmd_train, cmd_tune,
    CompareOptions, PrepareOptions, Preset, TrainCmdOptions, TuneOptions,
};
use convmtl::report::ReportFormat;
use convmtl::synthetic::SyntheticConfig;
use convmtl::training::{HParams, SearchSetup, SearchSpace};
use convmtl::weighting::Scheme;

#[derive(Parser)]
#[command(name = "convmtl", version, about = "Multi-task hierarchical-attention learning for conversational analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic corpus plus its partition manifest.
    Generate(GenerateArgs),
    /// Build auxiliary targets, the MI vector, and the vocabulary.
    Prepare(PrepareArgs),
    /// Random hyperparameter search under an experiment preset.
    Tune(TuneArgs),
    /// One training run with explicit hyperparameters.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one partition.
    Eval(EvalArgs),
    /// Selection-aware bootstrap comparison of two trial tables.
    Compare(CompareArgs),
    /// Render the attention report for one talkturn.
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskKindArg {
    Classification,
    Regression,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Flat,
    Rock,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Variant {
        match v {
            VariantArg::Flat => Variant::Flat,
            VariantArg::Rock => Variant::Rock,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemeArg {
    Random,
    LinearMi,
    SoftmaxMi,
}

impl From<SchemeArg> for Scheme {
    fn from(s: SchemeArg) -> Scheme {
        match s {
            SchemeArg::Random => Scheme::Random,
            SchemeArg::LinearMi => Scheme::LinearMi,
            SchemeArg::SoftmaxMi => Scheme::SoftmaxMi,
        }
    }
}

#[derive(Args, Clone)]
struct TaskArgs {
    /// Primary task flavour.
    #[arg(long, value_enum, default_value = "classification")]
    task_kind: TaskKindArg,
    /// Regression label range, low end.
    #[arg(long, default_value_t = 1.0)]
    lo: f32,
    /// Regression label range, high end.
    #[arg(long, default_value_t = 5.0)]
    hi: f32,
}

impl TaskArgs {
    fn kind(&self) -> TaskKind {
        match self.task_kind {
            TaskKindArg::Classification => TaskKind::Classification { classes: 4 },
            TaskKindArg::Regression => TaskKind::Regression { lo: self.lo, hi: self.hi },
        }
    }
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 60)]
    conversations: usize,
    #[arg(long, default_value_t = 20)]
    turns: usize,
    #[command(flatten)]
    task: TaskArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PrepareArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    partitions: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    task: TaskArgs,
    /// Neighbor count for the k-NN mutual-information estimators.
    #[arg(long, default_value_t = 3)]
    mi_neighbors: usize,
}

#[derive(Args)]
struct TuneArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    partitions: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    task: TaskArgs,
    /// Optional JSON file holding a full TuneOptions object; explicit
    /// flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Experiment preset: h1-baseline, h1-ap, h1-aphf, h2:<P>, h3-flat,
    /// h3-rock, custom.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Talkturn-encoder capacity budget (primary + per-auxiliary units).
    #[arg(long)]
    capacity: Option<usize>,
    /// Comma-separated primary GRU choices, e.g. 1,64,128,192,256.
    #[arg(long)]
    pri_gru_choices: Option<String>,
    #[arg(long)]
    word_cap: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    fusion_dim: Option<usize>,
    /// Shrink the search space and model dims for laptop-scale runs.
    #[arg(long, default_value_t = false)]
    desk_scale: bool,
    #[arg(long)]
    embeddings: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    partitions: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    task: TaskArgs,
    /// Optional JSON file holding a full TrainCmdOptions object;
    /// explicit flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// GRU units for the primary talkturn encoder.
    #[arg(long)]
    pri_gru: Option<usize>,
    #[arg(long)]
    l2: Option<f64>,
    /// Context window size in talkturns.
    #[arg(long)]
    content_size: Option<usize>,
    #[arg(long)]
    gru_dropout: Option<f32>,
    #[arg(long)]
    recurrent_dropout: Option<f32>,
    #[arg(long, value_enum)]
    weight_scheme: Option<SchemeArg>,
    #[arg(long)]
    w_primary: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    capacity: Option<usize>,
    #[arg(long)]
    word_cap: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    fusion_dim: Option<usize>,
    #[arg(long)]
    mi_neighbors: Option<usize>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    partitions: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    task: TaskArgs,
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    baseline: PathBuf,
    #[arg(long)]
    challenger: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    replicates: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "baseline")]
    baseline_label: String,
    #[arg(long, default_value = "challenger")]
    challenger_label: String,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Text,
    Html,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    partitions: PathBuf,
    #[command(flatten)]
    task: TaskArgs,
    #[arg(long)]
    conversation: String,
    #[arg(long)]
    turn: u32,
    #[arg(long, value_enum, default_value = "text")]
    format: FormatArg,
    /// Write the document here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::Config(_)
        | Error::Corpus(_)
        | Error::BadDimension(_)
        | Error::Shape { .. }
        | Error::Mi(_)
        | Error::Eval(_) => 1,
        _ => 2,
    }
}

fn read_json_config<T: serde::de::DeserializeOwned>(path: &PathBuf) -> Result<T, Error> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_str(&text).map_err(convmtl::Error::from)
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Generate(a) => {
            let cfg = SyntheticConfig {
                n_conversations: a.conversations,
                turns_per_conversation: a.turns,
                task_kind: a.task.kind(),
                seed: a.seed,
            };
            cmd_generate(&a.out, &cfg)?;
            println!(
                "wrote {} conversations x {} turns to {}",
                a.conversations,
                a.turns,
                a.out.display()
            );
        }
        Command::Prepare(a) => {
            let opts = PrepareOptions { task_kind: a.task.kind(), mi_neighbors: a.mi_neighbors };
            let mi = cmd_prepare(&a.out, &a.corpus, &a.partitions, &opts)?;
            println!("prepared auxiliary targets; MI range [{:.4}, {:.4}] nats",
                mi.0.iter().cloned().fold(f64::INFINITY, f64::min),
                mi.0.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
        }
        Command::Tune(a) => {
            let mut opts: TuneOptions = match &a.config {
                Some(path) => read_json_config(path)?,
                None => TuneOptions {
                    task_kind: a.task.kind(),
                    preset: Preset::Custom,
                    setup: if a.desk_scale {
                        SearchSetup::desk_scale(Variant::Rock, 30, 50, 0)
                    } else {
                        full_scale_setup()
                    },
                },
            };
            if a.config.is_none() {
                opts.task_kind = a.task.kind();
            }
            if let Some(p) = &a.preset {
                opts.preset = Preset::parse(p)?;
            }
            if let Some(v) = a.variant {
                opts.setup.variant = v.into();
            }
            if let Some(n) = a.trials {
                opts.setup.n_trials = n;
            }
            if let Some(n) = a.max_epochs {
                opts.setup.max_epochs = n;
            }
            if let Some(s) = a.seed {
                opts.setup.master_seed = s;
            }
            if let Some(c) = a.capacity {
                opts.setup.space.capacity = c;
            }
            if let Some(choices) = &a.pri_gru_choices {
                opts.setup.space.p_choices = choices
                    .split(',')
                    .map(|t| {
                        t.trim().parse::<usize>().map_err(|_| {
                            Error::Config(format!("bad pri-gru choice {:?}", t))
                        })
                    })
                    .collect::<Result<_, _>>()?;
            }
            if let Some(n) = a.word_cap {
                opts.setup.word_cap = n;
            }
            if let Some(n) = a.embed_dim {
                opts.setup.embed_dim = n;
            }
            if let Some(n) = a.fusion_dim {
                opts.setup.fusion_dim = n;
            }
            let table = cmd_tune(&a.out, &a.corpus, &a.partitions, a.embeddings.as_deref(), &opts)?;
            let best = table.best_trial().unwrap_or(0);
            println!(
                "{} trials done; best dev {:.4} (trial {}), test {:.4}",
                table.trials.len(),
                table.trials[best].dev_metric,
                best,
                table.trials[best].test_metric
            );
        }
        Command::Train(a) => {
            let mut opts: TrainCmdOptions = match &a.config {
                Some(path) => read_json_config(path)?,
                None => default_train_options(a.task.kind()),
            };
            if a.config.is_none() {
                opts.task_kind = a.task.kind();
            }
            if let Some(p) = &a.preset {
                opts.preset = Preset::parse(p)?;
            }
            if let Some(v) = a.variant {
                opts.variant = v.into();
            }
            let hp = &mut opts.hparams;
            if let Some(v) = a.learning_rate {
                hp.learning_rate = v;
            }
            if let Some(v) = a.batch_size {
                hp.batch_size = v;
            }
            if let Some(v) = a.pri_gru {
                hp.p_units = v;
            }
            if let Some(v) = a.l2 {
                hp.l2 = v;
            }
            if let Some(v) = a.content_size {
                hp.context_len = v;
            }
            if let Some(v) = a.gru_dropout {
                hp.gru_dropout = v;
            }
            if let Some(v) = a.recurrent_dropout {
                hp.recurrent_dropout = v;
            }
            if let Some(v) = a.weight_scheme {
                hp.scheme = v.into();
            }
            if let Some(v) = a.w_primary {
                hp.w_primary = v;
            }
            if let Some(v) = a.seed {
                hp.seed = v;
            }
            if let Some(v) = a.max_epochs {
                opts.max_epochs = v;
            }
            if let Some(v) = a.capacity {
                opts.capacity = v;
            }
            if let Some(v) = a.word_cap {
                opts.word_cap = v;
            }
            if let Some(v) = a.embed_dim {
                opts.embed_dim = v;
            }
            if let Some(v) = a.fusion_dim {
                opts.fusion_dim = v;
            }
            if let Some(v) = a.mi_neighbors {
                opts.mi_neighbors = v;
            }
            let summary =
                cmd_train(&a.out, &a.corpus, &a.partitions, a.embeddings.as_deref(), &opts)?;
            println!(
                "trained {} epochs; best dev {:?} at epoch {}",
                summary.stopped_at, summary.dev_metric, summary.best_epoch
            );
        }
        Command::Eval(a) => {
            let split = match a.split.as_str() {
                "train" => Partition::Train,
                "dev" => Partition::Dev,
                "test" => Partition::Test,
                other => {
                    return Err(Error::Config(format!(
                        "unknown split {:?} (expected train, dev, test)",
                        other
                    )))
                }
            };
            let m = cmd_eval(&a.out, &a.checkpoint, &a.corpus, &a.partitions, a.task.kind(), split)?;
            println!("{} on {} ({} examples): {:.4}", m.metric_name, m.split, m.n_examples, m.metric);
            if let Some(f1) = m.classwise_f1 {
                println!("class-wise F1: {:.3} {:.3} {:.3} {:.3}", f1[0], f1[1], f1[2], f1[3]);
            }
        }
        Command::Compare(a) => {
            let opts = CompareOptions {
                replicates: a.replicates,
                seed: a.seed,
                baseline_label: a.baseline_label,
                challenger_label: a.challenger_label,
            };
            let report = cmd_compare(&a.out, &a.baseline, &a.challenger, &opts)?;
            println!(
                "95% interval [{:.4}, {:.4}] over {} replicates: {}",
                report.interval.0,
                report.interval.1,
                report.replicates,
                if report.significant { "significant" } else { "not significant" }
            );
        }
        Command::Report(a) => {
            let format = match a.format {
                FormatArg::Text => ReportFormat::Text,
                FormatArg::Html => ReportFormat::Html,
            };
            let doc = cmd_report(
                a.out.as_deref(),
                &a.checkpoint,
                &a.corpus,
                &a.partitions,
                a.task.kind(),
                &a.conversation,
                a.turn,
                format,
            )?;
            match &a.out {
                Some(path) => println!("wrote report to {}", path.display()),
                None => print!("{doc}"),
            }
        }
    }
    Ok(())
}

fn full_scale_setup() -> SearchSetup {
    SearchSetup {
        variant: Variant::Rock,
        space: SearchSpace::default(),
        n_trials: 30,
        max_epochs: 350,
        master_seed: 0,
        zero_mask: [false; 16],
        fixed_p: None,
        word_cap: 60,
        embed_dim: 300,
        fusion_dim: 64,
        fine_tune_embeddings: true,
        mi_neighbors: 3,
    }
}

fn default_train_options(task_kind: TaskKind) -> TrainCmdOptions {
    TrainCmdOptions {
        task_kind,
        preset: Preset::Custom,
        variant: Variant::Rock,
        hparams: HParams {
            learning_rate: 0.005,
            batch_size: 32,
            p_units: 32,
            l2: 0.0,
            context_len: 3,
            gru_dropout: 0.05,
            recurrent_dropout: 0.05,
            scheme: Scheme::LinearMi,
            w_primary: 0.8,
            seed: 0,
        },
        capacity: 33,
        word_cap: 60,
        embed_dim: 300,
        fusion_dim: 64,
        fine_tune_embeddings: true,
        max_epochs: 30,
        mi_neighbors: 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
