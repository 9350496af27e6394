//! The artifact-producing pipeline behind the command surface: corpus
//! generation, target preparation, tuning, training, evaluation,
//! comparison, and reporting. Every command writes a run manifest with
//! the seeds and input hashes needed to reproduce its outputs
//! bit-identically.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::aux_targets::{build_aux_table, AuxTargetTable, N_AUX};
use crate::checkpoint::{load_checkpoint, save_checkpoint, sha256_hex};
use crate::corpus::{
    parse_corpus, split_partitions, Corpus, Partition, PartitionManifest, TaskKind, Vocabulary,
};
use crate::embeddings::load_embedding_file;
use crate::error::{Error, Result};
use crate::evaluation::{bootstrap_compare, classwise_f1, BootstrapReport};
use crate::model::{build_model, Variant};
use crate::report::{analyze_example, render, ReportFormat};
use crate::synthetic::{default_partition_manifest, generate_synthetic, SyntheticConfig};
use crate::training::{
    evaluate, prepare_examples, random_search, train, Dataset, HParams, SearchSetup,
    TrainOptions, TrialTable,
};
use crate::weighting::{allocate_weights, mi_vector, MiVector};

pub const MANIFEST_NAME: &str = "run_manifest.json";

// ── Manifests ────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub master_seed: u64,
    pub params: serde_json::Value,
    /// Input path -> content hash.
    pub inputs: BTreeMap<String, String>,
    /// Output file name (relative to the run directory) -> content hash.
    pub outputs: BTreeMap<String, String>,
}

impl RunManifest {
    fn new(command: &str, master_seed: u64, params: serde_json::Value) -> Self {
        RunManifest {
            command: command.to_string(),
            master_seed,
            params,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    fn record_input(&mut self, path: &Path) -> Result<()> {
        let bytes =
            std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        self.inputs.insert(path.display().to_string(), sha256_hex(&bytes));
        Ok(())
    }

    fn record_output(&mut self, dir: &Path, name: &str) -> Result<()> {
        let path = dir.join(name);
        let bytes =
            std::fs::read(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
        self.outputs.insert(name.to_string(), sha256_hex(&bytes));
        Ok(())
    }

    fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_NAME);
        std::fs::write(&path, serde_json::to_string_pretty(self)?)
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_NAME);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Verify that every recorded output still hashes to its manifest
    /// entry.
    pub fn verify_outputs(&self, dir: &Path) -> Result<()> {
        for (name, expect) in &self.outputs {
            let path = dir.join(name);
            let bytes =
                std::fs::read(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
            let got = sha256_hex(&bytes);
            if &got != expect {
                return Err(Error::Artifact(format!("hash mismatch for {}", name)));
            }
        }
        Ok(())
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|e| Error::io(path.display().to_string(), e))
}

// ── Presets ──────────────────────────────────────────────────────────

/// Named experiment constructions: auxiliary-family ablations, the
/// capacity sweep, and the flat-vs-rock hierarchy comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    /// All sixteen auxiliary loss weights forced to zero.
    H1Baseline,
    /// Historical and future label weights forced to zero.
    H1Ap,
    /// All sixteen auxiliary targets active.
    H1Aphf,
    /// Capacity sweep point: primary talkturn encoder pinned to `p`.
    H2 { p: usize },
    /// Flat hierarchy, all targets active.
    H3Flat,
    /// Branched hierarchy, all targets active.
    H3Rock,
    Custom,
}

impl Preset {
    pub fn parse(text: &str) -> Result<Preset> {
        let t = text.trim().to_lowercase();
        Ok(match t.as_str() {
            "h1-baseline" => Preset::H1Baseline,
            "h1-ap" => Preset::H1Ap,
            "h1-aphf" => Preset::H1Aphf,
            "h3-flat" => Preset::H3Flat,
            "h3-rock" => Preset::H3Rock,
            "custom" => Preset::Custom,
            other => {
                if let Some(p) = other.strip_prefix("h2:") {
                    let p = p
                        .parse::<usize>()
                        .map_err(|_| Error::Config(format!("bad capacity split {:?}", other)))?;
                    Preset::H2 { p }
                } else {
                    return Err(Error::Config(format!(
                        "unknown preset {:?} (expected h1-baseline, h1-ap, h1-aphf, h2:<P>, h3-flat, h3-rock, custom)",
                        text
                    )));
                }
            }
        })
    }

    pub fn name(&self) -> String {
        match self {
            Preset::H1Baseline => "h1-baseline".into(),
            Preset::H1Ap => "h1-ap".into(),
            Preset::H1Aphf => "h1-aphf".into(),
            Preset::H2 { p } => format!("h2:{p}"),
            Preset::H3Flat => "h3-flat".into(),
            Preset::H3Rock => "h3-rock".into(),
            Preset::Custom => "custom".into(),
        }
    }

    /// Which auxiliary columns get their loss weight zeroed.
    pub fn zero_mask(&self) -> [bool; N_AUX] {
        let mut mask = [false; N_AUX];
        match self {
            Preset::H1Baseline => mask = [true; N_AUX],
            Preset::H1Ap => {
                for z in mask.iter_mut().skip(8) {
                    *z = true;
                }
            }
            _ => {}
        }
        mask
    }

    pub fn variant(&self) -> Option<Variant> {
        match self {
            Preset::H3Flat => Some(Variant::Flat),
            Preset::Custom => None,
            _ => Some(Variant::Rock),
        }
    }

    /// Apply this preset to a search setup.
    pub fn apply(&self, mut setup: SearchSetup) -> SearchSetup {
        if let Some(v) = self.variant() {
            setup.variant = v;
        }
        setup.zero_mask = self.zero_mask();
        if let Preset::H2 { p } = self {
            setup.fixed_p = Some(*p);
        }
        setup
    }
}

// ── Corpus loading ───────────────────────────────────────────────────

pub fn load_partitioned_corpus(
    corpus_path: &Path,
    partitions_path: &Path,
    task_kind: TaskKind,
) -> Result<Corpus> {
    let corpus = parse_corpus(corpus_path, task_kind)?;
    let manifest = PartitionManifest::read(partitions_path)?;
    split_partitions(corpus, &manifest)
}

pub struct LoadedData {
    pub corpus: Corpus,
    pub table: AuxTargetTable,
    pub vocab: Vocabulary,
}

impl LoadedData {
    pub fn dataset(&self) -> Dataset<'_> {
        Dataset { corpus: &self.corpus, table: &self.table, vocab: &self.vocab }
    }
}

/// Load corpus + partitions and rebuild the auxiliary table and
/// vocabulary deterministically from them.
pub fn load_data(
    corpus_path: &Path,
    partitions_path: &Path,
    task_kind: TaskKind,
) -> Result<LoadedData> {
    let corpus = load_partitioned_corpus(corpus_path, partitions_path, task_kind)?;
    let table = build_aux_table(&corpus)?;
    let vocab = Vocabulary::build(&corpus)?;
    Ok(LoadedData { corpus, table, vocab })
}

// ── generate ─────────────────────────────────────────────────────────

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const PARTITIONS_FILE: &str = "partitions.json";

pub fn cmd_generate(out_dir: &Path, cfg: &SyntheticConfig) -> Result<()> {
    ensure_dir(out_dir)?;
    let corpus = generate_synthetic(cfg)?;
    let manifest = default_partition_manifest(&corpus);
    corpus.write_jsonl(&out_dir.join(CORPUS_FILE))?;
    manifest.write(&out_dir.join(PARTITIONS_FILE))?;

    let mut run = RunManifest::new("generate", cfg.seed, serde_json::to_value(cfg)?);
    run.record_output(out_dir, CORPUS_FILE)?;
    run.record_output(out_dir, PARTITIONS_FILE)?;
    run.write(out_dir)
}

// ── prepare ──────────────────────────────────────────────────────────

pub const AUX_FILE: &str = "aux_targets.jsonl";
pub const MI_FILE: &str = "mi.json";
pub const VOCAB_FILE: &str = "vocab.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrepareOptions {
    pub task_kind: TaskKind,
    pub mi_neighbors: usize,
}

pub fn cmd_prepare(
    out_dir: &Path,
    corpus_path: &Path,
    partitions_path: &Path,
    opts: &PrepareOptions,
) -> Result<MiVector> {
    ensure_dir(out_dir)?;
    let corpus = load_partitioned_corpus(corpus_path, partitions_path, opts.task_kind)?;
    let table = build_aux_table(&corpus)?;
    let vocab = Vocabulary::build(&corpus)?;
    let mi = mi_vector(&corpus, &table, opts.mi_neighbors)?;

    table.write_jsonl(&out_dir.join(AUX_FILE))?;
    write_file(out_dir, MI_FILE, &serde_json::to_string_pretty(&mi)?)?;
    write_file(out_dir, VOCAB_FILE, &vocab.to_json()?)?;

    let mut run = RunManifest::new("prepare", 0, serde_json::to_value(opts)?);
    run.record_input(corpus_path)?;
    run.record_input(partitions_path)?;
    for name in [AUX_FILE, MI_FILE, VOCAB_FILE] {
        run.record_output(out_dir, name)?;
    }
    run.write(out_dir)?;
    Ok(mi)
}

// ── tune ─────────────────────────────────────────────────────────────

pub const TRIALS_FILE: &str = "trials.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TuneOptions {
    pub task_kind: TaskKind,
    pub preset: Preset,
    pub setup: SearchSetup,
}

pub fn cmd_tune(
    out_dir: &Path,
    corpus_path: &Path,
    partitions_path: &Path,
    embeddings_path: Option<&Path>,
    opts: &TuneOptions,
) -> Result<TrialTable> {
    ensure_dir(out_dir)?;
    let data = load_data(corpus_path, partitions_path, opts.task_kind)?;
    let pretrained = match embeddings_path {
        Some(p) => Some(load_embedding_file(p, data_embed_dim(&opts.setup))?),
        None => None,
    };
    let setup = opts.preset.apply(opts.setup.clone());
    let table = random_search(&setup, &data.dataset(), pretrained.as_ref())?;
    write_file(out_dir, TRIALS_FILE, &table.to_json()?)?;

    let mut run =
        RunManifest::new("tune", setup.master_seed, serde_json::to_value(opts)?);
    run.record_input(corpus_path)?;
    run.record_input(partitions_path)?;
    if let Some(p) = embeddings_path {
        run.record_input(p)?;
    }
    run.record_output(out_dir, TRIALS_FILE)?;
    run.write(out_dir)?;
    Ok(table)
}

fn data_embed_dim(setup: &SearchSetup) -> usize {
    setup.embed_dim
}

// ── train ────────────────────────────────────────────────────────────

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const HISTORY_FILE: &str = "history.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainCmdOptions {
    pub task_kind: TaskKind,
    pub preset: Preset,
    pub variant: Variant,
    pub hparams: HParams,
    pub capacity: usize,
    pub word_cap: usize,
    pub embed_dim: usize,
    pub fusion_dim: usize,
    pub fine_tune_embeddings: bool,
    pub max_epochs: usize,
    pub mi_neighbors: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub history: Vec<f64>,
    pub best_epoch: usize,
    pub stopped_at: usize,
    pub dev_metric: Option<f64>,
    pub weights: crate::weighting::WeightVector,
    pub mi: MiVector,
}

pub fn cmd_train(
    out_dir: &Path,
    corpus_path: &Path,
    partitions_path: &Path,
    embeddings_path: Option<&Path>,
    opts: &TrainCmdOptions,
) -> Result<TrainSummary> {
    ensure_dir(out_dir)?;
    let data = load_data(corpus_path, partitions_path, opts.task_kind)?;
    let pretrained = match embeddings_path {
        Some(p) => Some(load_embedding_file(p, opts.embed_dim)?),
        None => None,
    };

    let variant = opts.preset.variant().unwrap_or(opts.variant);
    let hp = &opts.hparams;
    let a_units = match variant {
        Variant::Flat => 0,
        Variant::Rock => opts
            .capacity
            .checked_sub(hp.p_units)
            .ok_or_else(|| Error::Config("p_units exceeds the capacity budget".into()))?,
    };
    let cfg = crate::model::ModelConfig {
        variant,
        p_units: hp.p_units,
        a_units,
        capacity: opts.capacity,
        context_len: hp.context_len,
        word_cap: opts.word_cap,
        embed_dim: opts.embed_dim,
        fusion_dim: opts.fusion_dim,
        gru_dropout: hp.gru_dropout,
        recurrent_dropout: hp.recurrent_dropout,
        fine_tune_embeddings: opts.fine_tune_embeddings,
        task_kind: opts.task_kind,
        aux_kinds: data.table.column_kinds.clone(),
    };
    cfg.validate()?;

    let mi = mi_vector(&data.corpus, &data.table, opts.mi_neighbors)?;
    let mut wrng = rand_chacha::ChaCha8Rng::seed_from_u64(hp.seed);
    let weights = allocate_weights(hp.w_primary, &mi, hp.scheme, &mut wrng)?
        .with_zeroed(&opts.preset.zero_mask());

    let init = build_model(&cfg, &data.vocab, pretrained.as_ref(), hp.seed)?;
    let train_opts = TrainOptions {
        max_epochs: opts.max_epochs,
        batch_size: hp.batch_size,
        learning_rate: hp.learning_rate,
        l2: hp.l2,
        seed: hp.seed,
    };
    let trained = train(&cfg, init, &data.dataset(), &weights, &train_opts, |_, _| false)?;
    save_checkpoint(&out_dir.join(CHECKPOINT_DIR), &trained.params, &cfg, &data.vocab)?;

    let dev_metric = trained.history.get(trained.best_epoch.wrapping_sub(1)).copied();
    let summary = TrainSummary {
        history: trained.history,
        best_epoch: trained.best_epoch,
        stopped_at: trained.stopped_at,
        dev_metric,
        weights,
        mi,
    };
    write_file(out_dir, HISTORY_FILE, &serde_json::to_string_pretty(&summary)?)?;

    let mut run = RunManifest::new("train", hp.seed, serde_json::to_value(opts)?);
    run.record_input(corpus_path)?;
    run.record_input(partitions_path)?;
    if let Some(p) = embeddings_path {
        run.record_input(p)?;
    }
    run.record_output(out_dir, HISTORY_FILE)?;
    run.record_output(out_dir, &format!("{CHECKPOINT_DIR}/manifest.json"))?;
    run.record_output(out_dir, &format!("{CHECKPOINT_DIR}/params.bin"))?;
    run.write(out_dir)?;
    Ok(summary)
}

// ── eval ─────────────────────────────────────────────────────────────

pub const METRICS_FILE: &str = "metrics.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: String,
    pub n_examples: usize,
    pub metric_name: String,
    pub metric: f64,
    pub classwise_f1: Option<[f32; 4]>,
}

pub fn cmd_eval(
    out_dir: &Path,
    checkpoint_dir: &Path,
    corpus_path: &Path,
    partitions_path: &Path,
    task_kind: TaskKind,
    split: Partition,
) -> Result<MetricsReport> {
    ensure_dir(out_dir)?;
    let data = load_data(corpus_path, partitions_path, task_kind)?;
    let (cfg, params) = load_checkpoint(checkpoint_dir, &data.vocab)?;
    let examples = prepare_examples(&data.dataset(), split, &cfg)?;
    let result = evaluate(&params, &cfg, &examples)?;

    let f1 = match task_kind {
        TaskKind::Classification { .. } => {
            let pred: Vec<u8> =
                result.predictions.iter().map(|l| l.as_class()).collect::<Result<_>>()?;
            let truth: Vec<u8> =
                examples.iter().map(|e| e.targets.primary.as_class()).collect::<Result<_>>()?;
            Some(classwise_f1(&pred, &truth)?)
        }
        TaskKind::Regression { .. } => None,
    };
    let report = MetricsReport {
        split: split.name().to_string(),
        n_examples: examples.len(),
        metric_name: match task_kind {
            TaskKind::Classification { .. } => "ma4".into(),
            TaskKind::Regression { .. } => "mae".into(),
        },
        metric: result.metric,
        classwise_f1: f1,
    };
    write_file(out_dir, METRICS_FILE, &serde_json::to_string_pretty(&report)?)?;

    let mut run = RunManifest::new("eval", 0, serde_json::json!({"split": split.name()}));
    run.record_input(corpus_path)?;
    run.record_input(partitions_path)?;
    run.record_input(&checkpoint_dir.join("params.bin"))?;
    run.record_output(out_dir, METRICS_FILE)?;
    run.write(out_dir)?;
    Ok(report)
}

// ── compare ──────────────────────────────────────────────────────────

pub const BOOTSTRAP_FILE: &str = "bootstrap.json";
pub const COMPARISON_FILE: &str = "comparison.txt";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompareOptions {
    pub replicates: usize,
    pub seed: u64,
    pub baseline_label: String,
    pub challenger_label: String,
}

pub fn cmd_compare(
    out_dir: &Path,
    baseline_path: &Path,
    challenger_path: &Path,
    opts: &CompareOptions,
) -> Result<BootstrapReport> {
    ensure_dir(out_dir)?;
    let baseline = TrialTable::from_json(
        &std::fs::read_to_string(baseline_path)
            .map_err(|e| Error::io(baseline_path.display().to_string(), e))?,
    )?;
    let challenger = TrialTable::from_json(
        &std::fs::read_to_string(challenger_path)
            .map_err(|e| Error::io(challenger_path.display().to_string(), e))?,
    )?;
    if baseline.direction != challenger.direction {
        return Err(Error::Eval("trial tables disagree on the metric direction".into()));
    }
    let report = bootstrap_compare(
        &baseline.trials,
        &challenger.trials,
        baseline.direction,
        opts.replicates,
        opts.seed,
    )?;

    write_file(out_dir, BOOTSTRAP_FILE, &serde_json::to_string_pretty(&report)?)?;
    let table = render_comparison(
        &opts.baseline_label,
        &[(opts.challenger_label.clone(), &challenger, Some(&report))],
        &baseline,
    );
    write_file(out_dir, COMPARISON_FILE, &table)?;

    let mut run = RunManifest::new("compare", opts.seed, serde_json::to_value(opts)?);
    run.record_input(baseline_path)?;
    run.record_input(challenger_path)?;
    run.record_output(out_dir, BOOTSTRAP_FILE)?;
    run.record_output(out_dir, COMPARISON_FILE)?;
    run.write(out_dir)?;
    Ok(report)
}

/// Plain-text comparison table. Challenger rows marked `*` have a 95%
/// bootstrap interval that excludes zero against the baseline.
pub fn render_comparison(
    baseline_label: &str,
    rows: &[(String, &TrialTable, Option<&BootstrapReport>)],
    baseline: &TrialTable,
) -> String {
    let mut out = String::new();
    let metric = match baseline.direction {
        crate::evaluation::Direction::Maximize => "MA(4)",
        crate::evaluation::Direction::Minimize => "MAE",
    };
    out.push_str(&format!("{:<24} {:>10} {:>10}\n", "config", format!("dev {metric}"), format!("test {metric}")));
    let best = baseline.best_trial().unwrap_or(0);
    out.push_str(&format!(
        "{:<24} {:>10.4} {:>10.4}\n",
        format!("{} (baseline)", baseline_label),
        baseline.trials[best].dev_metric,
        baseline.trials[best].test_metric,
    ));
    for (label, table, report) in rows {
        let best = table.best_trial().unwrap_or(0);
        let star = match report {
            Some(r) if r.significant => "*",
            _ => "",
        };
        out.push_str(&format!(
            "{:<24} {:>10.4} {:>9.4}{}\n",
            label,
            table.trials[best].dev_metric,
            table.trials[best].test_metric,
            star,
        ));
    }
    out.push_str("\n*: statistically significant difference with the baseline\n");
    out
}

// ── report ───────────────────────────────────────────────────────────

#[allow(clippy::too_many_arguments)]
pub fn cmd_report(
    out_path: Option<&Path>,
    checkpoint_dir: &Path,
    corpus_path: &Path,
    partitions_path: &Path,
    task_kind: TaskKind,
    conversation_id: &str,
    turn_index: u32,
    format: ReportFormat,
) -> Result<String> {
    let data = load_data(corpus_path, partitions_path, task_kind)?;
    let (cfg, params) = load_checkpoint(checkpoint_dir, &data.vocab)?;
    let example =
        analyze_example(&params, &cfg, &data.dataset(), conversation_id, turn_index)?;
    let document = render(&example, format);
    if let Some(path) = out_path {
        std::fs::write(path, &document).map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(document)
}

// ── experiment harness ───────────────────────────────────────────────

/// One labeled tuning run within an experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentArm {
    pub label: String,
    pub preset: Preset,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub arms: Vec<ExperimentArm>,
    pub setup: SearchSetup,
    pub task_kind: TaskKind,
    pub replicates: usize,
}

/// Run every arm of an experiment (the first arm is the baseline),
/// bootstrap each challenger against it, and emit the starred table.
/// Artifacts land under `out_dir/<label>/trials.json`.
pub fn run_experiment(
    out_dir: &Path,
    corpus_path: &Path,
    partitions_path: &Path,
    cfg: &ExperimentConfig,
) -> Result<String> {
    if cfg.arms.is_empty() {
        return Err(Error::Config("an experiment needs at least one arm".into()));
    }
    ensure_dir(out_dir)?;
    let mut tables = Vec::new();
    for arm in &cfg.arms {
        let arm_dir = out_dir.join(&arm.label);
        let opts = TuneOptions {
            task_kind: cfg.task_kind,
            preset: arm.preset,
            setup: cfg.setup.clone(),
        };
        let table = cmd_tune(&arm_dir, corpus_path, partitions_path, None, &opts)?;
        tables.push((arm.label.clone(), table));
    }

    let (baseline_label, baseline) = &tables[0];
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for (label, table) in &tables[1..] {
        let report = bootstrap_compare(
            &baseline.trials,
            &table.trials,
            baseline.direction,
            cfg.replicates,
            cfg.setup.master_seed,
        )?;
        reports.push((label.clone(), report));
    }
    for ((label, table), (_, report)) in tables[1..].iter().zip(&reports) {
        rows.push((label.clone(), table, Some(report)));
    }
    let text = render_comparison(baseline_label, &rows, baseline);
    write_file(out_dir, COMPARISON_FILE, &text)?;
    Ok(text)
}
