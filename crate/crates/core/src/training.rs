//! Mini-batch training with Adam, dev-metric model selection, the
//! median-stopping rule, and random hyperparameter search.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::autodiff::{GradientMap, NodeId, Tape};
use crate::aux_targets::{AuxTargetTable, N_AUX};
use crate::corpus::{build_context_window, ContextWindow, Corpus, Label, Partition, TaskKind, Vocabulary};
use crate::error::{Error, Result};
use crate::evaluation::{ma4, mae, Direction, PerExampleMetrics, TrialMetrics};
use crate::layers::Mode;
use crate::model::{
    bind_model, build_model, compute_loss, forward, primary_prediction, ModelConfig,
    ParameterSet, TargetRow, Variant,
};
use crate::weighting::{allocate_weights, mi_vector, MiVector, Scheme, WeightVector};

// ── Adam ─────────────────────────────────────────────────────────────

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam state: first/second moment per parameter, shared step count.
#[derive(Debug, Default)]
pub struct Adam {
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new() -> Self {
        Adam::default()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update over every parameter that has a gradient entry.
/// Gradients must be finite; a non-finite entry aborts the trial.
pub fn optimizer_step(
    params: &mut ParameterSet,
    grads: &GradientMap,
    state: &mut Adam,
    lr: f64,
) -> Result<()> {
    for (name, g) in grads.iter() {
        if !g.data().iter().all(|v| v.is_finite()) {
            return Err(Error::Training(format!("non-finite gradient in {name}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    let mut failure: Option<Error> = None;
    params.visit_mut(&mut |name, tensor| {
        if failure.is_some() {
            return;
        }
        let g = match grads.get(&name) {
            Some(g) => g,
            None => return, // frozen parameter (e.g. embeddings)
        };
        if g.shape() != tensor.shape() {
            failure = Some(Error::Training(format!("gradient shape mismatch for {name}")));
            return;
        }
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; tensor.len()]);
        let v = state.v.entry(name).or_insert_with(|| vec![0.0; tensor.len()]);
        for ((x, &gi), (mi, vi)) in
            tensor.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut().zip(v.iter_mut()))
        {
            let gi = gi as f64;
            *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
            *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *x -= (lr * m_hat / (v_hat.sqrt() + ADAM_EPS)) as f32;
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

// ── Dataset plumbing ─────────────────────────────────────────────────

/// Borrowed view over everything a training run needs.
#[derive(Clone, Copy)]
pub struct Dataset<'a> {
    pub corpus: &'a Corpus,
    pub table: &'a AuxTargetTable,
    pub vocab: &'a Vocabulary,
}

pub struct Example {
    pub window: ContextWindow,
    pub targets: TargetRow,
}

/// Materialize context windows and target rows for one partition.
pub fn prepare_examples(data: &Dataset, p: Partition, cfg: &ModelConfig) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for r in data.corpus.partition_turns(p) {
        let conv = &data.corpus.conversations[r.conv];
        let turn = &conv.turns[r.turn];
        let window = build_context_window(
            conv,
            turn.turn_index as usize,
            cfg.context_len,
            cfg.word_cap,
            data.vocab,
        )?;
        let aux = data.table.row(&turn.conversation_id, turn.turn_index).ok_or_else(|| {
            Error::Training(format!(
                "auxiliary table is missing ({}, {})",
                turn.conversation_id, turn.turn_index
            ))
        })?;
        out.push(Example { window, targets: TargetRow { primary: turn.label, aux: *aux } });
    }
    Ok(out)
}

/// Dev/test evaluation of one parameter set: primary metric plus the
/// per-example values the bootstrap needs. Regression predictions are
/// clipped to the declared range at metric time.
pub fn evaluate(params: &ParameterSet, cfg: &ModelConfig, examples: &[Example]) -> Result<EvalResult> {
    if examples.is_empty() {
        return Err(Error::Eval("empty evaluation partition".into()));
    }
    let mut tape = Tape::new();
    let bound = bind_model(params, cfg, &mut tape)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0); // eval mode draws nothing
    let mut predictions = Vec::with_capacity(examples.len());
    for ex in examples {
        let out = forward(&mut tape, &bound, cfg, &ex.window, Mode::Eval, &mut rng)?;
        predictions.push(primary_prediction(&tape, &out, &cfg.task_kind));
    }
    match cfg.task_kind {
        TaskKind::Classification { .. } => {
            let pred: Vec<u8> = predictions.iter().map(|l| l.as_class()).collect::<Result<_>>()?;
            let truth: Vec<u8> =
                examples.iter().map(|e| e.targets.primary.as_class()).collect::<Result<_>>()?;
            let metric = ma4(&pred, &truth)? as f64;
            let values = pred
                .iter()
                .zip(&truth)
                .map(|(p, t)| if p == t { 1.0 } else { 0.0 })
                .collect();
            Ok(EvalResult {
                metric,
                predictions,
                per_example: PerExampleMetrics { direction: Direction::Maximize, values },
            })
        }
        TaskKind::Regression { lo, hi } => {
            let pred: Vec<f32> = predictions
                .iter()
                .map(|l| l.as_real().map(|v| v.clamp(lo, hi)))
                .collect::<Result<_>>()?;
            let truth: Vec<f32> =
                examples.iter().map(|e| e.targets.primary.as_real()).collect::<Result<_>>()?;
            let metric = mae(&pred, &truth)? as f64;
            let values = pred.iter().zip(&truth).map(|(p, t)| (p - t).abs()).collect();
            Ok(EvalResult {
                metric,
                predictions: pred.into_iter().map(Label::Real).collect(),
                per_example: PerExampleMetrics { direction: Direction::Minimize, values },
            })
        }
    }
}

pub struct EvalResult {
    pub metric: f64,
    pub per_example: PerExampleMetrics,
    pub predictions: Vec<Label>,
}

pub fn objective_direction(kind: &TaskKind) -> Direction {
    match kind {
        TaskKind::Classification { .. } => Direction::Maximize,
        TaskKind::Regression { .. } => Direction::Minimize,
    }
}

// ── Training loop ────────────────────────────────────────────────────

pub struct TrainOptions {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub seed: u64,
}

pub struct TrainedModel {
    /// Parameters at the best dev epoch (initialization when no epoch ran).
    pub params: ParameterSet,
    /// Dev objective per completed epoch.
    pub history: Vec<f64>,
    /// 1-based epoch of the returned checkpoint; 0 when history is empty.
    pub best_epoch: usize,
    /// Epochs actually run (may be below max_epochs when stopped early).
    pub stopped_at: usize,
}

/// Sum of squared weight-matrix entries times l2, on the tape.
/// Biases, attention context vectors, and the embedding are excluded.
fn l2_term(tape: &mut Tape, params: &ParameterSet, l2: f64) -> Result<Option<NodeId>> {
    if l2 == 0.0 {
        return Ok(None);
    }
    let mut names = Vec::new();
    params.visit(&mut |name, t| {
        if t.shape().len() == 2 && name != "embedding" {
            names.push(name);
        }
    });
    let mut acc: Option<NodeId> = None;
    for name in names {
        let id = match tape.param_id(&name) {
            Some(id) => id,
            None => continue,
        };
        let sq = tape.mul(id, id)?;
        let s = tape.sum(sq)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, s)?,
            None => s,
        });
    }
    match acc {
        Some(a) => Ok(Some(tape.scale(a, l2)?)),
        None => Ok(None),
    }
}

/// Train from the given initialization, evaluating the dev partition
/// each epoch and returning the checkpoint of the best dev epoch.
/// `stop` is consulted after each epoch with the history so far.
pub fn train(
    cfg: &ModelConfig,
    init: ParameterSet,
    data: &Dataset,
    weights: &WeightVector,
    opts: &TrainOptions,
    mut stop: impl FnMut(&[f64], usize) -> bool,
) -> Result<TrainedModel> {
    cfg.validate()?;
    let train_examples = prepare_examples(data, Partition::Train, cfg)?;
    if train_examples.is_empty() {
        return Err(Error::Training("empty train partition".into()));
    }
    let dev_examples = prepare_examples(data, Partition::Dev, cfg)?;
    let direction = objective_direction(&cfg.task_kind);

    let mut params = init;
    let mut best = params.clone();
    let mut best_epoch = 0usize;
    let mut best_metric = match direction {
        Direction::Maximize => f64::NEG_INFINITY,
        Direction::Minimize => f64::INFINITY,
    };
    let mut history = Vec::new();
    let mut adam = Adam::new();
    let mut order: Vec<usize> = (0..train_examples.len()).collect();

    let mut epochs_run = 0usize;
    for epoch in 1..=opts.max_epochs {
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(opts.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9));
        order.shuffle(&mut shuffle_rng);
        let mut dropout_rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xd20f ^ (epoch as u64) << 17);

        for chunk in order.chunks(opts.batch_size.max(1)) {
            let mut tape = Tape::new();
            let bound = bind_model(&params, cfg, &mut tape)?;
            let mut example_losses = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let ex = &train_examples[i];
                let out = forward(&mut tape, &bound, cfg, &ex.window, Mode::Train, &mut dropout_rng)?;
                let (total, _) = compute_loss(&mut tape, &out.predictions, &ex.targets, weights, cfg)?;
                example_losses.push(total);
            }
            let stacked = tape.concat(&example_losses)?;
            let summed = tape.sum(stacked)?;
            let mut batch_loss = tape.scale(summed, 1.0 / chunk.len() as f64)?;
            if let Some(reg) = l2_term(&mut tape, &params, opts.l2)? {
                batch_loss = tape.add(batch_loss, reg)?;
            }
            if !tape.value_f64(batch_loss)[0].is_finite() {
                return Err(Error::Training("non-finite loss".into()));
            }
            let grads = tape.backward(batch_loss)?;
            optimizer_step(&mut params, &grads, &mut adam, opts.learning_rate)?;
        }
        epochs_run = epoch;

        let dev = if dev_examples.is_empty() {
            // degenerate corpora without a dev split fall back to train
            evaluate(&params, cfg, &train_examples)?
        } else {
            evaluate(&params, cfg, &dev_examples)?
        };
        history.push(dev.metric);
        if direction.better(dev.metric, best_metric) || best_epoch == 0 {
            best_metric = dev.metric;
            best_epoch = epoch;
            best = params.clone();
        }
        if stop(&history, epoch) {
            break;
        }
    }
    Ok(TrainedModel { params: best, history, best_epoch, stopped_at: epochs_run })
}

// ── Median stopping ──────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Checkpoint epochs for the median-stopping rule: 5, 7, 9, ..., 349.
pub fn is_stopping_epoch(epoch: usize) -> bool {
    (5..=349).contains(&epoch) && (epoch - 5).is_multiple_of(2)
}

/// Stop a trial whose best objective so far is strictly worse than the
/// median of the other trials' running-average objectives at the same
/// epoch. Trials that have not reached this epoch do not vote.
pub fn median_stop(
    current: &[f64],
    others: &[&[f64]],
    epoch: usize,
    direction: Direction,
) -> StopDecision {
    if !is_stopping_epoch(epoch) || current.len() < epoch {
        return StopDecision::Continue;
    }
    let mut running: Vec<f64> = others
        .iter()
        .filter(|h| h.len() >= epoch)
        .map(|h| h[..epoch].iter().sum::<f64>() / epoch as f64)
        .collect();
    if running.is_empty() {
        return StopDecision::Continue;
    }
    running.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if running.len() % 2 == 1 {
        running[running.len() / 2]
    } else {
        0.5 * (running[running.len() / 2 - 1] + running[running.len() / 2])
    };
    let best = match direction {
        Direction::Maximize => current[..epoch].iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        Direction::Minimize => current[..epoch].iter().cloned().fold(f64::INFINITY, f64::min),
    };
    if direction.better(median, best) {
        StopDecision::Stop
    } else {
        StopDecision::Continue
    }
}

// ── Hyperparameter search ────────────────────────────────────────────

/// One sampled configuration. Field ranges follow the tuning table:
/// log-uniform learning rate and L2, uniform batch/content/dropout,
/// a discrete choice for the primary GRU count, and a round-robin
/// weight scheme.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HParams {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub p_units: usize,
    pub l2: f64,
    pub context_len: usize,
    pub gru_dropout: f32,
    pub recurrent_dropout: f32,
    pub scheme: Scheme,
    pub w_primary: f64,
    pub seed: u64,
}

/// Sampling ranges. Defaults match the full-scale protocol; desk-scale
/// runs shrink the choices and the capacity budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub learning_rate: (f64, f64),
    pub batch_size: (usize, usize),
    pub p_choices: Vec<usize>,
    pub capacity: usize,
    pub l2_max: f64,
    pub context_len: (usize, usize),
    pub dropout: (f32, f32),
    pub w_primary: (f64, f64),
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            learning_rate: (2f64.powi(-10), 2f64.powi(-5)),
            batch_size: (32, 256),
            p_choices: vec![1, 64, 128, 192, 256],
            capacity: 257,
            l2_max: 0.5,
            context_len: (1, 30),
            dropout: (0.01, 0.5),
            w_primary: (0.50, 0.99),
        }
    }
}

/// L2 draws below this value collapse to exactly zero, giving the
/// log-uniform sampler mass at 0.
pub const L2_ZERO_THRESHOLD: f64 = 1e-6;
const L2_LOG_FLOOR: f64 = 1e-7;

pub fn sample_hparams<R: Rng>(space: &SearchSpace, trial_index: usize, rng: &mut R) -> HParams {
    let log_uniform = |rng: &mut R, lo: f64, hi: f64| -> f64 {
        (rng.random::<f64>() * (hi.ln() - lo.ln()) + lo.ln()).exp()
    };
    let learning_rate = log_uniform(rng, space.learning_rate.0, space.learning_rate.1);
    let batch_size = rng.random_range(space.batch_size.0..=space.batch_size.1);
    let p_units = space.p_choices[rng.random_range(0..space.p_choices.len())];
    let raw_l2 = log_uniform(rng, L2_LOG_FLOOR, space.l2_max);
    let l2 = if raw_l2 < L2_ZERO_THRESHOLD { 0.0 } else { raw_l2 };
    let context_len = rng.random_range(space.context_len.0..=space.context_len.1);
    let gru_dropout = rng.random_range(space.dropout.0..=space.dropout.1);
    let recurrent_dropout = rng.random_range(space.dropout.0..=space.dropout.1);
    let w_primary = rng.random_range(space.w_primary.0..=space.w_primary.1);
    HParams {
        learning_rate,
        batch_size,
        p_units,
        l2,
        context_len,
        gru_dropout,
        recurrent_dropout,
        scheme: Scheme::ALL[trial_index % 3],
        w_primary,
        seed: rng.next_u64(),
    }
}

/// Everything a search run needs besides the data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchSetup {
    pub variant: Variant,
    pub space: SearchSpace,
    pub n_trials: usize,
    pub max_epochs: usize,
    pub master_seed: u64,
    /// Auxiliary columns whose loss weight is forced to zero.
    pub zero_mask: [bool; N_AUX],
    /// Pin the capacity split instead of sampling it.
    pub fixed_p: Option<usize>,
    pub word_cap: usize,
    pub embed_dim: usize,
    pub fusion_dim: usize,
    pub fine_tune_embeddings: bool,
    pub mi_neighbors: usize,
}

impl SearchSetup {
    pub fn desk_scale(variant: Variant, n_trials: usize, max_epochs: usize, seed: u64) -> Self {
        SearchSetup {
            variant,
            space: SearchSpace {
                batch_size: (16, 64),
                p_choices: vec![1, 16, 32],
                capacity: 33,
                context_len: (1, 4),
                ..SearchSpace::default()
            },
            n_trials,
            max_epochs,
            master_seed: seed,
            zero_mask: [false; N_AUX],
            fixed_p: None,
            word_cap: 16,
            embed_dim: 32,
            fusion_dim: 16,
            fine_tune_embeddings: true,
            mi_neighbors: crate::weighting::DEFAULT_K,
        }
    }

    pub fn model_config(&self, hp: &HParams, task_kind: TaskKind, aux_kinds: Vec<TaskKind>) -> ModelConfig {
        let p = self.fixed_p.unwrap_or(hp.p_units);
        let a = match self.variant {
            Variant::Flat => 0,
            Variant::Rock => self.space.capacity - p,
        };
        ModelConfig {
            variant: self.variant,
            p_units: p,
            a_units: a,
            capacity: self.space.capacity,
            context_len: hp.context_len,
            word_cap: self.word_cap,
            embed_dim: self.embed_dim,
            fusion_dim: self.fusion_dim,
            gru_dropout: hp.gru_dropout,
            recurrent_dropout: hp.recurrent_dropout,
            fine_tune_embeddings: self.fine_tune_embeddings,
            task_kind,
            aux_kinds,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialRecord {
    pub index: usize,
    pub hparams: HParams,
    pub weights: WeightVector,
    pub history: Vec<f64>,
    pub best_epoch: usize,
    pub stopped_at: usize,
    pub dev_metric: f64,
    pub test_metric: f64,
    pub dev: PerExampleMetrics,
    pub test: PerExampleMetrics,
}

impl TrialMetrics for TrialRecord {
    fn dev(&self) -> &PerExampleMetrics {
        &self.dev
    }
    fn test_metric(&self) -> f64 {
        self.test_metric
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialTable {
    pub direction: Direction,
    pub mi: MiVector,
    pub trials: Vec<TrialRecord>,
}

impl TrialTable {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Index of the best trial by final dev metric (ties to lowest id).
    pub fn best_trial(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, t) in self.trials.iter().enumerate() {
            match best {
                None => best = Some(i),
                Some(b) => {
                    if self.direction.better(t.dev_metric, self.trials[b].dev_metric) {
                        best = Some(i);
                    }
                }
            }
        }
        best
    }
}

/// Random search: sample, allocate weights, train with median stopping
/// against the completed trials, and record per-example dev/test
/// metrics at each trial's best dev epoch.
pub fn random_search(
    setup: &SearchSetup,
    data: &Dataset,
    pretrained: Option<&BTreeMap<String, Vec<f32>>>,
) -> Result<TrialTable> {
    if setup.n_trials < 1 {
        return Err(Error::Config("need at least one trial".into()));
    }
    let mi = mi_vector(data.corpus, data.table, setup.mi_neighbors)?;
    let direction = objective_direction(&data.corpus.task_kind);
    let mut master = ChaCha8Rng::seed_from_u64(setup.master_seed);
    let trial_seeds: Vec<u64> = (0..setup.n_trials).map(|_| master.next_u64()).collect();

    let mut trials: Vec<TrialRecord> = Vec::with_capacity(setup.n_trials);
    let mut failures = Vec::new();
    for (t, &tseed) in trial_seeds.iter().enumerate() {
        match run_trial(setup, data, pretrained, &mi, direction, t, tseed, &trials) {
            Ok(record) => trials.push(record),
            Err(e) => failures.push(format!("trial {}: {}", t, e)),
        }
    }
    if trials.is_empty() {
        return Err(Error::Training(format!("all trials failed: {}", failures.join("; "))));
    }
    Ok(TrialTable { direction, mi, trials })
}

#[allow(clippy::too_many_arguments)]
fn run_trial(
    setup: &SearchSetup,
    data: &Dataset,
    pretrained: Option<&BTreeMap<String, Vec<f32>>>,
    mi: &MiVector,
    direction: Direction,
    index: usize,
    tseed: u64,
    completed: &[TrialRecord],
) -> Result<TrialRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(tseed);
    let hp = sample_hparams(&setup.space, index, &mut rng);
    let weights =
        allocate_weights(hp.w_primary, mi, hp.scheme, &mut rng)?.with_zeroed(&setup.zero_mask);
    let aux_kinds = data.table.column_kinds.clone();
    let cfg = setup.model_config(&hp, data.corpus.task_kind, aux_kinds);
    cfg.validate()?;

    let init = build_model(&cfg, data.vocab, pretrained, hp.seed)?;
    let opts = TrainOptions {
        max_epochs: setup.max_epochs,
        batch_size: hp.batch_size,
        learning_rate: hp.learning_rate,
        l2: hp.l2,
        seed: hp.seed,
    };
    let histories: Vec<Vec<f64>> = completed.iter().map(|t| t.history.clone()).collect();
    let trained = train(&cfg, init, data, &weights, &opts, |hist, epoch| {
        let others: Vec<&[f64]> = histories.iter().map(|h| h.as_slice()).collect();
        median_stop(hist, &others, epoch, direction) == StopDecision::Stop
    })?;

    let dev_examples = prepare_examples(data, Partition::Dev, &cfg)?;
    let test_examples = prepare_examples(data, Partition::Test, &cfg)?;
    let dev = evaluate(&trained.params, &cfg, &dev_examples)?;
    let test = evaluate(&trained.params, &cfg, &test_examples)?;
    Ok(TrialRecord {
        index,
        hparams: hp,
        weights,
        history: trained.history,
        best_epoch: trained.best_epoch,
        stopped_at: trained.stopped_at,
        dev_metric: dev.metric,
        test_metric: test.metric,
        dev: dev.per_example,
        test: test.per_example,
    })
}
