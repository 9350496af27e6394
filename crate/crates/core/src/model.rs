//! The two architectures and the seventeen-task weighted loss.
//!
//! The flat variant runs one shared word encoder and one shared talkturn
//! encoder and attaches all seventeen predictor heads to the same pooled
//! representation. The rock variant gives the primary task its own
//! branch: auxiliary predictors sit directly on their per-task talkturn
//! encoders (fed by one shared auxiliary word encoder), and an attention
//! fusion over all seventeen talkturn embeddings feeds the primary head.
//! Auxiliary supervision therefore cannot back-propagate into the
//! primary branch, while primary supervision reaches the auxiliary
//! branch through the fusion.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{uniform_fill, NodeId, Tape, Tensor};
use crate::aux_targets::N_AUX;
use crate::corpus::{ContextWindow, Label, TaskKind, Vocabulary};
use crate::embeddings::init_embedding_matrix;
use crate::error::{Error, Result};
use crate::layers::{
    attend, bigru_encode, dense, Activation, AttentionParams, DenseNodes, DenseParams,
    DropoutSpec, GruParams, Mode,
};
use crate::weighting::WeightVector;

pub const N_TASKS: usize = 17;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Flat,
    Rock,
}

/// Architecture hyperparameters. For the rock variant the talkturn
/// encoder budget is split as primary P + per-auxiliary A = capacity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub p_units: usize,
    pub a_units: usize,
    pub capacity: usize,
    pub context_len: usize,
    pub word_cap: usize,
    pub embed_dim: usize,
    pub fusion_dim: usize,
    pub gru_dropout: f32,
    pub recurrent_dropout: f32,
    pub fine_tune_embeddings: bool,
    pub task_kind: TaskKind,
    pub aux_kinds: Vec<TaskKind>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.p_units < 1 {
            return Err(Error::Config("p_units must be >= 1".into()));
        }
        if self.variant == Variant::Rock {
            if self.a_units < 1 {
                return Err(Error::Config("a_units must be >= 1".into()));
            }
            if self.p_units + self.a_units != self.capacity {
                return Err(Error::Config(format!(
                    "invalid capacity split: {} + {} != {}",
                    self.p_units, self.a_units, self.capacity
                )));
            }
        }
        if self.context_len < 1 || self.word_cap < 1 {
            return Err(Error::Config("context_len and word_cap must be >= 1".into()));
        }
        if self.embed_dim < 1 || self.fusion_dim < 1 {
            return Err(Error::Config("embed_dim and fusion_dim must be >= 1".into()));
        }
        if self.aux_kinds.len() != N_AUX {
            return Err(Error::Config(format!(
                "expected {} auxiliary task kinds, got {}",
                N_AUX,
                self.aux_kinds.len()
            )));
        }
        for r in [self.gru_dropout, self.recurrent_dropout] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::Config(format!("dropout rate {} outside [0,1)", r)));
            }
        }
        Ok(())
    }

    /// Task kind of head `k` (0 = primary, 1.. = auxiliary columns).
    pub fn head_kind(&self, k: usize) -> &TaskKind {
        if k == 0 {
            &self.task_kind
        } else {
            &self.aux_kinds[k - 1]
        }
    }

    fn head_dims(&self, k: usize) -> usize {
        match self.head_kind(k) {
            TaskKind::Classification { classes } => *classes,
            TaskKind::Regression { .. } => 1,
        }
    }
}

// ── Parameter tree ───────────────────────────────────────────────────

/// A bidirectional GRU plus its pooling attention.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderStack {
    pub fwd: GruParams,
    pub bwd: GruParams,
    pub attn: AttentionParams,
}

impl EncoderStack {
    fn init<R: Rng>(hidden: usize, input: usize, rng: &mut R) -> Result<Self> {
        Ok(EncoderStack {
            fwd: GruParams::init(hidden, input, rng)?,
            bwd: GruParams::init(hidden, input, rng)?,
            attn: AttentionParams::init(2 * hidden, 2 * hidden, rng)?,
        })
    }

    /// Output dimensionality (= attention projection size).
    pub fn out_dim(&self) -> usize {
        self.attn.proj()
    }

    fn bind(&self, prefix: &str, tape: &mut Tape) -> Result<EncoderNodes> {
        Ok(EncoderNodes {
            fwd: self.fwd.bind(&format!("{prefix}.fwd"), tape)?,
            bwd: self.bwd.bind(&format!("{prefix}.bwd"), tape)?,
            attn: self.attn.bind(&format!("{prefix}.attn"), tape)?,
        })
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.fwd.visit(&format!("{prefix}.fwd"), f);
        self.bwd.visit(&format!("{prefix}.bwd"), f);
        self.attn.visit(&format!("{prefix}.attn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.fwd.visit_mut(&format!("{prefix}.fwd"), f);
        self.bwd.visit_mut(&format!("{prefix}.bwd"), f);
        self.attn.visit_mut(&format!("{prefix}.attn"), f);
    }
}

#[derive(Debug, Clone, Copy)]
struct EncoderNodes {
    fwd: crate::layers::GruNodes,
    bwd: crate::layers::GruNodes,
    attn: crate::layers::AttentionNodes,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Architecture {
    Flat {
        word: EncoderStack,
        turn: EncoderStack,
    },
    Rock {
        pri_word: EncoderStack,
        aux_word: EncoderStack,
        /// Seventeen per-task talkturn encoders; index 0 is the primary.
        turn_encoders: Vec<EncoderStack>,
        /// Per-task projections into the fusion space.
        fusion_proj: Vec<DenseParams>,
        /// Fusion attention context vector.
        fusion_ctx: Tensor,
    },
}

/// Every trainable array of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    pub embedding: Tensor,
    pub arch: Architecture,
    /// Seventeen predictor heads; index 0 is the primary.
    pub heads: Vec<DenseParams>,
}

impl ParameterSet {
    /// Walk every parameter in canonical (checkpoint) order.
    pub fn visit(&self, f: &mut dyn FnMut(String, &Tensor)) {
        f("embedding".to_string(), &self.embedding);
        match &self.arch {
            Architecture::Flat { word, turn } => {
                word.visit("word", f);
                turn.visit("turn", f);
            }
            Architecture::Rock { pri_word, aux_word, turn_encoders, fusion_proj, fusion_ctx } => {
                pri_word.visit("pri_word", f);
                aux_word.visit("aux_word", f);
                for (i, enc) in turn_encoders.iter().enumerate() {
                    enc.visit(&format!("turn{i:02}"), f);
                }
                for (i, proj) in fusion_proj.iter().enumerate() {
                    proj.visit(&format!("fusion.proj{i:02}"), f);
                }
                f("fusion.u".to_string(), fusion_ctx);
            }
        }
        for (i, head) in self.heads.iter().enumerate() {
            head.visit(&format!("head{i:02}"), f);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        f("embedding".to_string(), &mut self.embedding);
        match &mut self.arch {
            Architecture::Flat { word, turn } => {
                word.visit_mut("word", f);
                turn.visit_mut("turn", f);
            }
            Architecture::Rock { pri_word, aux_word, turn_encoders, fusion_proj, fusion_ctx } => {
                pri_word.visit_mut("pri_word", f);
                aux_word.visit_mut("aux_word", f);
                for (i, enc) in turn_encoders.iter_mut().enumerate() {
                    enc.visit_mut(&format!("turn{i:02}"), f);
                }
                for (i, proj) in fusion_proj.iter_mut().enumerate() {
                    proj.visit_mut(&format!("fusion.proj{i:02}"), f);
                }
                f("fusion.u".to_string(), fusion_ctx);
            }
        }
        for (i, head) in self.heads.iter_mut().enumerate() {
            head.visit_mut(&format!("head{i:02}"), f);
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }

    /// Parameter names whose gradients flow only from the primary branch
    /// (primary word/talkturn encoders and the primary head).
    pub fn primary_branch_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        match &self.arch {
            Architecture::Flat { .. } => {}
            Architecture::Rock { pri_word, turn_encoders, .. } => {
                pri_word.visit("pri_word", &mut |n, _| names.push(n));
                turn_encoders[0].visit("turn00", &mut |n, _| names.push(n));
            }
        }
        self.heads[0].visit("head00", &mut |n, _| names.push(n));
        names
    }

    /// Parameter names belonging to the auxiliary branch (rock only).
    pub fn aux_branch_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        if let Architecture::Rock { aux_word, turn_encoders, .. } = &self.arch {
            aux_word.visit("aux_word", &mut |n, _| names.push(n));
            for (i, enc) in turn_encoders.iter().enumerate().skip(1) {
                enc.visit(&format!("turn{i:02}"), &mut |n, _| names.push(n));
            }
        }
        names
    }
}

/// Initialize a full parameter set: glorot for weight matrices, zeros
/// for biases, uniform(-0.1, 0.1) for attention context vectors and
/// out-of-vocabulary embedding rows.
pub fn build_model(
    cfg: &ModelConfig,
    vocab: &Vocabulary,
    pretrained: Option<&BTreeMap<String, Vec<f32>>>,
    seed: u64,
) -> Result<ParameterSet> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let embedding = init_embedding_matrix(vocab, cfg.embed_dim, pretrained, &mut rng)?;

    let p = cfg.p_units;
    let arch = match cfg.variant {
        Variant::Flat => Architecture::Flat {
            word: EncoderStack::init(p, cfg.embed_dim, &mut rng)?,
            turn: EncoderStack::init(p, 2 * p, &mut rng)?,
        },
        Variant::Rock => {
            let a = cfg.a_units;
            let pri_word = EncoderStack::init(p, cfg.embed_dim, &mut rng)?;
            let aux_word = EncoderStack::init(a, cfg.embed_dim, &mut rng)?;
            let mut turn_encoders = Vec::with_capacity(N_TASKS);
            turn_encoders.push(EncoderStack::init(p, 2 * p, &mut rng)?);
            for _ in 1..N_TASKS {
                turn_encoders.push(EncoderStack::init(a, 2 * a, &mut rng)?);
            }
            let mut fusion_proj = Vec::with_capacity(N_TASKS);
            for (i, enc) in turn_encoders.iter().enumerate() {
                let _ = i;
                fusion_proj.push(DenseParams::init(cfg.fusion_dim, enc.out_dim(), &mut rng)?);
            }
            let fusion_ctx =
                Tensor::new(vec![cfg.fusion_dim], uniform_fill(cfg.fusion_dim, -0.1, 0.1, &mut rng))?;
            Architecture::Rock { pri_word, aux_word, turn_encoders, fusion_proj, fusion_ctx }
        }
    };

    let head_input = |k: usize| -> usize {
        match cfg.variant {
            Variant::Flat => 2 * p,
            Variant::Rock => {
                if k == 0 {
                    cfg.fusion_dim
                } else {
                    2 * cfg.a_units
                }
            }
        }
    };
    let mut heads = Vec::with_capacity(N_TASKS);
    for k in 0..N_TASKS {
        heads.push(DenseParams::init(cfg.head_dims(k), head_input(k), &mut rng)?);
    }
    Ok(ParameterSet { embedding, arch, heads })
}

// ── Forward pass ─────────────────────────────────────────────────────

/// All node handles after registering one parameter set on a tape.
pub struct BoundModel {
    embedding: NodeId,
    arch: BoundArch,
    heads: Vec<DenseNodes>,
}

enum BoundArch {
    Flat { word: EncoderNodes, turn: EncoderNodes },
    Rock {
        pri_word: EncoderNodes,
        aux_word: EncoderNodes,
        turn_encoders: Vec<EncoderNodes>,
        fusion_proj: Vec<DenseNodes>,
        fusion_ctx: NodeId,
    },
}

/// Register every parameter once on the tape. With
/// `fine_tune_embeddings` off, the embedding matrix is recorded as a
/// constant and receives no gradient.
pub fn bind_model(params: &ParameterSet, cfg: &ModelConfig, tape: &mut Tape) -> Result<BoundModel> {
    let embedding = if cfg.fine_tune_embeddings {
        tape.param("embedding", &params.embedding)?
    } else {
        tape.leaf(&params.embedding)
    };
    let arch = match &params.arch {
        Architecture::Flat { word, turn } => BoundArch::Flat {
            word: word.bind("word", tape)?,
            turn: turn.bind("turn", tape)?,
        },
        Architecture::Rock { pri_word, aux_word, turn_encoders, fusion_proj, fusion_ctx } => {
            BoundArch::Rock {
                pri_word: pri_word.bind("pri_word", tape)?,
                aux_word: aux_word.bind("aux_word", tape)?,
                turn_encoders: turn_encoders
                    .iter()
                    .enumerate()
                    .map(|(i, e)| e.bind(&format!("turn{i:02}"), tape))
                    .collect::<Result<_>>()?,
                fusion_proj: fusion_proj
                    .iter()
                    .enumerate()
                    .map(|(i, p)| p.bind(&format!("fusion.proj{i:02}"), tape))
                    .collect::<Result<_>>()?,
                fusion_ctx: tape.param("fusion.u", fusion_ctx)?,
            }
        }
    };
    let heads = params
        .heads
        .iter()
        .enumerate()
        .map(|(i, h)| h.bind(&format!("head{i:02}"), tape))
        .collect::<Result<_>>()?;
    Ok(BoundModel { embedding, arch, heads })
}

/// Attention weights recorded during one forward pass. Window slots
/// that are fully masked carry zero talkturn weight and an empty word
/// list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    /// Word weights per branch per window slot (flat: one branch;
    /// rock: primary then auxiliary).
    pub word: Vec<Vec<Vec<f32>>>,
    /// Talkturn weights per task over the window slots (flat: one row).
    pub talkturn: Vec<Vec<f32>>,
    /// Task weights (flat: `[1.0]`).
    pub task: Vec<f32>,
}

pub struct ForwardOutput {
    /// Seventeen head outputs; index 0 is the primary.
    pub predictions: Vec<NodeId>,
    pub attention: AttentionRecord,
}

struct WordBranch {
    /// Pooled talkturn embeddings, one per live window slot.
    pooled: Vec<NodeId>,
    /// Word weights per window slot (empty vec for masked slots).
    weights: Vec<Vec<f32>>,
}

/// Run one word-encoder branch over the live rows of a window.
fn encode_words<R: Rng>(
    tape: &mut Tape,
    embedding: NodeId,
    enc: &EncoderNodes,
    window: &ContextWindow,
    d: &DropoutSpec,
    rng: &mut R,
) -> Result<WordBranch> {
    let mut pooled = Vec::new();
    let mut weights = Vec::with_capacity(window.turn_mask.len());
    for (slot, &live) in window.turn_mask.iter().enumerate() {
        if !live {
            weights.push(Vec::new());
            continue;
        }
        let n_words = window.word_mask[slot].iter().filter(|&&m| m).count();
        let ids = &window.token_ids[slot][..n_words];
        let rows = tape.embed(embedding, ids)?;
        let xs: Vec<NodeId> = (0..n_words).map(|t| tape.row(rows, t)).collect::<Result<_>>()?;
        let mask = vec![true; n_words];
        let states = bigru_encode(tape, &enc.fwd, &enc.bwd, &xs, &mask, d, rng)?;
        let (alpha, s) = attend(tape, &enc.attn, &states, &mask)?;
        weights.push(alpha);
        pooled.push(s);
    }
    Ok(WordBranch { pooled, weights })
}

/// Talkturn encoder over pooled embeddings; returns the dense weight
/// row over all window slots plus the pooled vector.
fn encode_turns<R: Rng>(
    tape: &mut Tape,
    enc: &EncoderNodes,
    pooled: &[NodeId],
    turn_mask: &[bool],
    d: &DropoutSpec,
    rng: &mut R,
) -> Result<(Vec<f32>, NodeId)> {
    let mask = vec![true; pooled.len()];
    let states = bigru_encode(tape, &enc.fwd, &enc.bwd, pooled, &mask, d, rng)?;
    let (alpha, v) = attend(tape, &enc.attn, &states, &mask)?;
    // scatter the live weights back over the full window
    let mut dense_row = vec![0.0f32; turn_mask.len()];
    let mut it = alpha.iter();
    for (slot, &live) in turn_mask.iter().enumerate() {
        if live {
            dense_row[slot] = *it.next().expect("one weight per live slot");
        }
    }
    Ok((dense_row, v))
}

fn head_activation(kind: &TaskKind) -> Activation {
    match kind {
        TaskKind::Classification { .. } => Activation::Softmax,
        TaskKind::Regression { .. } => Activation::Linear,
    }
}

/// Forward one context window through the bound model.
pub fn forward<R: Rng>(
    tape: &mut Tape,
    bound: &BoundModel,
    cfg: &ModelConfig,
    window: &ContextWindow,
    mode: Mode,
    rng: &mut R,
) -> Result<ForwardOutput> {
    let d = match mode {
        Mode::Train => DropoutSpec::new(cfg.gru_dropout, cfg.recurrent_dropout, Mode::Train)?,
        Mode::Eval => DropoutSpec::eval(),
    };
    match &bound.arch {
        BoundArch::Flat { word, turn } => {
            let branch = encode_words(tape, bound.embedding, word, window, &d, rng)?;
            let (turn_alpha, v) =
                encode_turns(tape, turn, &branch.pooled, &window.turn_mask, &d, rng)?;
            let predictions = (0..N_TASKS)
                .map(|k| dense(tape, &bound.heads[k], v, head_activation(cfg.head_kind(k))))
                .collect::<Result<_>>()?;
            Ok(ForwardOutput {
                predictions,
                attention: AttentionRecord {
                    word: vec![branch.weights],
                    talkturn: vec![turn_alpha],
                    task: vec![1.0],
                },
            })
        }
        BoundArch::Rock { pri_word, aux_word, turn_encoders, fusion_proj, fusion_ctx } => {
            let pri = encode_words(tape, bound.embedding, pri_word, window, &d, rng)?;
            let aux = encode_words(tape, bound.embedding, aux_word, window, &d, rng)?;

            let (pri_alpha, v_pri) =
                encode_turns(tape, &turn_encoders[0], &pri.pooled, &window.turn_mask, &d, rng)?;
            let mut talkturn = Vec::with_capacity(N_TASKS);
            talkturn.push(pri_alpha);
            let mut task_vectors = Vec::with_capacity(N_TASKS);
            task_vectors.push(v_pri);
            for enc in turn_encoders.iter().skip(1) {
                let (alpha, v) =
                    encode_turns(tape, enc, &aux.pooled, &window.turn_mask, &d, rng)?;
                talkturn.push(alpha);
                task_vectors.push(v);
            }

            // fusion: project each task vector, raw dot-product attention
            let projected: Vec<NodeId> = task_vectors
                .iter()
                .zip(fusion_proj)
                .map(|(&v, proj)| dense(tape, proj, v, Activation::Linear))
                .collect::<Result<_>>()?;
            let stacked = tape.stack_rows(&projected)?;
            let logits = tape.matvec(stacked, *fusion_ctx)?;
            let task_alpha = tape.softmax(logits)?;
            let fused = tape.weighted_sum(task_alpha, stacked)?;
            let task = tape.value(task_alpha).data().to_vec();

            let mut predictions = Vec::with_capacity(N_TASKS);
            predictions.push(dense(
                tape,
                &bound.heads[0],
                fused,
                head_activation(cfg.head_kind(0)),
            )?);
            for (k, (&v, head)) in
                task_vectors.iter().zip(&bound.heads).enumerate().skip(1)
            {
                predictions.push(dense(tape, head, v, head_activation(cfg.head_kind(k)))?);
            }
            Ok(ForwardOutput {
                predictions,
                attention: AttentionRecord {
                    word: vec![pri.weights, aux.weights],
                    talkturn,
                    task,
                },
            })
        }
    }
}

// ── Loss ─────────────────────────────────────────────────────────────

/// Targets for one talkturn: the primary label plus the sixteen
/// auxiliary targets in canonical column order.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetRow {
    pub primary: Label,
    pub aux: [Label; N_AUX],
}

fn task_loss(tape: &mut Tape, pred: NodeId, target: &Label, kind: &TaskKind) -> Result<NodeId> {
    match (kind, target) {
        (TaskKind::Classification { classes }, Label::Class(c)) => {
            if (*c as usize) >= *classes {
                return Err(Error::Eval(format!("class {} out of range", c)));
            }
            let mut onehot = vec![0.0f32; *classes];
            onehot[*c as usize] = 1.0;
            let oh = tape.leaf_vec(&onehot);
            let logp = tape.log(pred)?;
            let picked = tape.mul(logp, oh)?;
            let s = tape.sum(picked)?;
            tape.scale(s, -1.0)
        }
        (TaskKind::Regression { .. }, Label::Real(v)) => {
            let t = tape.leaf_vec(&[*v]);
            let diff = tape.sub(pred, t)?;
            let sq = tape.mul(diff, diff)?;
            tape.sum(sq)
        }
        _ => Err(Error::Eval("label type does not match task kind".into())),
    }
}

/// Weighted 17-task loss for one example. Tasks with weight zero are
/// evaluated for reporting but contribute nothing to the total, so their
/// head gradients are exactly zero.
pub fn compute_loss(
    tape: &mut Tape,
    predictions: &[NodeId],
    targets: &TargetRow,
    weights: &WeightVector,
    cfg: &ModelConfig,
) -> Result<(NodeId, Vec<f32>)> {
    if predictions.len() != N_TASKS {
        return Err(Error::Eval(format!("expected {} predictions", N_TASKS)));
    }
    let w = weights.to_vec17();
    let mut per_task = Vec::with_capacity(N_TASKS);
    let mut total: Option<NodeId> = None;
    for k in 0..N_TASKS {
        let target = if k == 0 { &targets.primary } else { &targets.aux[k - 1] };
        let loss_k = task_loss(tape, predictions[k], target, cfg.head_kind(k))?;
        per_task.push(tape.value_f64(loss_k)[0] as f32);
        if w[k] != 0.0 {
            let scaled = tape.scale(loss_k, w[k])?;
            total = Some(match total {
                Some(acc) => tape.add(acc, scaled)?,
                None => scaled,
            });
        }
    }
    let total = match total {
        Some(t) => t,
        None => tape.leaf_vec(&[0.0]),
    };
    Ok((total, per_task))
}

/// Extract the primary prediction from a finished forward pass:
/// arg-max class for classification, raw scalar for regression.
pub fn primary_prediction(tape: &Tape, out: &ForwardOutput, kind: &TaskKind) -> Label {
    let v = tape.value(out.predictions[0]);
    match kind {
        TaskKind::Classification { .. } => {
            let mut best = 0usize;
            for (i, &p) in v.data().iter().enumerate() {
                if p > v.data()[best] {
                    best = i;
                }
            }
            Label::Class(best as u8)
        }
        TaskKind::Regression { .. } => Label::Real(v.data()[0]),
    }
}

/// Per-column task kinds in canonical order: eight scaled-rank columns
/// (regression on the primary range, or [0,1] for classification
/// primaries) followed by eight shifted-label columns that inherit the
/// primary task kind.
pub fn default_aux_kinds(primary: &TaskKind) -> Vec<TaskKind> {
    let rank_kind = match primary {
        TaskKind::Classification { .. } => TaskKind::Regression { lo: 0.0, hi: 1.0 },
        TaskKind::Regression { lo, hi } => TaskKind::Regression { lo: *lo, hi: *hi },
    };
    let mut kinds = vec![rank_kind; 8];
    kinds.extend(vec![*primary; 8]);
    kinds
}


#[cfg(test)]
mod tests {
    use super::test_support::*;
    use super::*;
    use crate::aux_targets::{build_aux_table, AuxTargetTable};
    use crate::corpus::{build_context_window, Corpus};
    use crate::synthetic::{generate_synthetic, SyntheticConfig};
    use crate::weighting::{MiVector, Scheme};

    fn setup(variant: Variant, p: usize, a: usize, seed: u64) -> (Corpus, AuxTargetTable, Vocabulary, ModelConfig, ParameterSet) {
        let corpus = generate_synthetic(&SyntheticConfig {
            n_conversations: 3,
            turns_per_conversation: 4,
            task_kind: TaskKind::classification(),
            seed,
        })
        .unwrap();
        let manifest = crate::synthetic::default_partition_manifest(&corpus);
        let corpus = crate::corpus::split_partitions(corpus, &manifest).unwrap();
        let table = build_aux_table(&corpus).unwrap();
        let vocab = Vocabulary::build(&corpus).unwrap();
        let cfg = tiny_cfg(variant, p, a);
        let params = build_model(&cfg, &vocab, None, seed).unwrap();
        (corpus, table, vocab, cfg, params)
    }

    fn target_row(corpus: &Corpus, table: &AuxTargetTable, conv: usize, turn: usize) -> TargetRow {
        let t = &corpus.conversations[conv].turns[turn];
        TargetRow { primary: t.label, aux: *table.row(&t.conversation_id, t.turn_index).unwrap() }
    }

    fn uniform_weights(primary: f64) -> WeightVector {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        crate::weighting::allocate_weights(primary, &MiVector::uniform(), Scheme::SoftmaxMi, &mut rng)
            .unwrap()
    }

    #[test]
    fn capacity_split_is_enforced() {
        let mut cfg = tiny_cfg(Variant::Rock, 256, 1);
        cfg.capacity = 257;
        assert!(cfg.validate().is_ok()); // 256 + 1 = 257
        cfg.p_units = 192;
        cfg.a_units = 65;
        assert!(cfg.validate().is_ok()); // 192 + 65 = 257
        cfg.a_units = 64;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn flat_parameter_count_matches_closed_form() {
        let corpus = generate_synthetic(&SyntheticConfig {
            n_conversations: 6,
            turns_per_conversation: 6,
            task_kind: TaskKind::classification(),
            seed: 5,
        })
        .unwrap();
        let manifest = crate::synthetic::default_partition_manifest(&corpus);
        let corpus = crate::corpus::split_partitions(corpus, &manifest).unwrap();
        let vocab = Vocabulary::build(&corpus).unwrap();
        let mut cfg = tiny_cfg(Variant::Flat, 8, 0);
        cfg.embed_dim = 12;
        let params = build_model(&cfg, &vocab, None, 1).unwrap();

        let v = vocab.len();
        let (p, e) = (8usize, 12usize);
        let gru = |input: usize| 3 * (p * input) + 3 * (p * p) + 3 * p;
        let attn = (2 * p) * (2 * p) + 2 * p + 2 * p;
        let heads = (4 * 2 * p + 4) // primary classification
            + 8 * (2 * p + 1)       // rank columns, regression
            + 8 * (4 * 2 * p + 4); // shifted labels, classification
        let expect = v * e + 2 * gru(e) + attn + 2 * gru(2 * p) + attn + heads;
        assert_eq!(params.param_count(), expect);
    }

    #[test]
    fn rock_h2_splits() {
        // capacity 257: P=256 -> A=1, P=192 -> A=65
        for (p, a) in [(256usize, 1usize), (192, 65)] {
            let mut cfg = tiny_cfg(Variant::Rock, p, a);
            cfg.capacity = 257;
            assert!(cfg.validate().is_ok());
        }
    }

    #[test]
    fn forward_flat_shapes_and_determinism() {
        let (corpus, _table, vocab, cfg, params) = setup(Variant::Flat, 3, 0, 42);
        let conv = &corpus.conversations[0];
        let window = build_context_window(conv, 2, cfg.context_len, cfg.word_cap, &vocab).unwrap();
        let mut tape = Tape::new();
        let bound = bind_model(&params, &cfg, &mut tape).unwrap();
        let out1 = forward(&mut tape, &bound, &cfg, &window, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let out2 = forward(&mut tape, &bound, &cfg, &window, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        // classification head: 4 probabilities summing to 1
        let probs = tape.value(out1.predictions[0]);
        assert_eq!(probs.len(), 4);
        let s: f32 = probs.data().iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
        // identical inputs -> identical predictions
        assert_eq!(tape.value(out1.predictions[0]), tape.value(out2.predictions[0]));
        // attention families normalized
        assert!((out1.attention.talkturn[0].iter().sum::<f32>() - 1.0).abs() < 1e-5);
        assert_eq!(out1.attention.task, vec![1.0]);
    }

    #[test]
    fn forward_zero_params_regression_heads_output_bias() {
        let (corpus, _t, vocab, mut cfg, _unused) = setup(Variant::Flat, 2, 0, 43);
        cfg.task_kind = TaskKind::Regression { lo: 1.0, hi: 5.0 };
        cfg.aux_kinds = default_aux_kinds(&cfg.task_kind);
        let mut params = build_model(&cfg, &vocab, None, 43).unwrap();
        // zero every parameter, then poke known biases into two heads
        params.visit_mut(&mut |_, t| {
            for v in t.data_mut() {
                *v = 0.0;
            }
        });
        params.heads[0].b = Tensor::from_vec(vec![2.5]);
        params.heads[5].b = Tensor::from_vec(vec![-0.75]);
        let conv = &corpus.conversations[0];
        let window = build_context_window(conv, 1, cfg.context_len, cfg.word_cap, &vocab).unwrap();
        let mut tape = Tape::new();
        let bound = bind_model(&params, &cfg, &mut tape).unwrap();
        let out = forward(&mut tape, &bound, &cfg, &window, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(tape.value(out.predictions[0]).data(), &[2.5]);
        assert_eq!(tape.value(out.predictions[5]).data(), &[-0.75]);
    }

    #[test]
    fn rock_fusion_symmetric_when_projections_identical() {
        let (corpus, _t, vocab, cfg, mut params) = setup(Variant::Rock, 2, 3, 44);
        // zero all fusion projections; every projected vector becomes the
        // shared bias, so task attention is uniform over the 17 tasks
        if let Architecture::Rock { fusion_proj, .. } = &mut params.arch {
            for proj in fusion_proj.iter_mut() {
                for v in proj.w.data_mut() {
                    *v = 0.0;
                }
                proj.b = Tensor::from_vec(vec![0.3; cfg.fusion_dim]);
            }
        }
        let conv = &corpus.conversations[0];
        let window = build_context_window(conv, 2, cfg.context_len, cfg.word_cap, &vocab).unwrap();
        let mut tape = Tape::new();
        let bound = bind_model(&params, &cfg, &mut tape).unwrap();
        let out = forward(&mut tape, &bound, &cfg, &window, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for &a in &out.attention.task {
            assert!((a - 1.0 / 17.0).abs() < 1e-6, "task weight {}", a);
        }
    }

    #[test]
    fn rock_gradient_isolation_is_exact() {
        let (corpus, table, vocab, cfg, params) = setup(Variant::Rock, 2, 2, 45);
        let conv = &corpus.conversations[0];
        let window = build_context_window(conv, 3, cfg.context_len, cfg.word_cap, &vocab).unwrap();
        let targets = target_row(&corpus, &table, 0, 2);

        let mut tape = Tape::new();
        let bound = bind_model(&params, &cfg, &mut tape).unwrap();
        let out = forward(&mut tape, &bound, &cfg, &window, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();

        // sum of all 16 auxiliary losses, unweighted
        let mut aux_total = None;
        for k in 1..N_TASKS {
            let l = task_loss(&mut tape, out.predictions[k], &targets.aux[k - 1], cfg.head_kind(k))
                .unwrap();
            aux_total = Some(match aux_total {
                Some(acc) => tape.add(acc, l).unwrap(),
                None => l,
            });
        }
        let gmap = tape.backward(aux_total.unwrap()).unwrap();
        for name in params.primary_branch_names() {
            let g = gmap.get(&name).unwrap();
            assert!(
                g.data().iter().all(|&v| v == 0.0),
                "aux loss leaked into {name}"
            );
        }
        // and fusion must be untouched by aux losses too
        assert!(gmap.get("fusion.u").unwrap().data().iter().all(|&v| v == 0.0));

        // primary loss reaches the aux branch through the fusion
        let (pl, _) = compute_loss(
            &mut tape,
            &out.predictions,
            &targets,
            &uniform_weights(0.99).with_zeroed(&[true; N_AUX]),
            &cfg,
        )
        .unwrap();
        let pmap = tape.backward(pl).unwrap();
        let mut reached = false;
        for name in params.aux_branch_names() {
            if pmap.get(&name).unwrap().data().iter().any(|&v| v != 0.0) {
                reached = true;
                break;
            }
        }
        assert!(reached, "primary loss never reached the aux branch");
    }

    #[test]
    fn flat_variant_shares_gradients() {
        let (corpus, table, vocab, cfg, _params) = setup(Variant::Flat, 2, 0, 46);
        let conv = &corpus.conversations[0];
        let window = build_context_window(conv, 2, cfg.context_len, cfg.word_cap, &vocab).unwrap();
        let targets = target_row(&corpus, &table, 0, 1);
        let params = build_model(&cfg, &vocab, None, 46).unwrap();

        let mut tape = Tape::new();
        let bound = bind_model(&params, &cfg, &mut tape).unwrap();
        let out = forward(&mut tape, &bound, &cfg, &window, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let l = task_loss(&mut tape, out.predictions[3], &targets.aux[2], cfg.head_kind(3)).unwrap();
        let gmap = tape.backward(l).unwrap();
        // an auxiliary loss reaches the shared word encoder
        let g = gmap.get("word.fwd.w_z").unwrap();
        assert!(g.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn loss_weighting_hand_cases() {
        let (corpus, table, vocab, cfg, params) = setup(Variant::Flat, 2, 0, 47);
        let conv = &corpus.conversations[0];
        let window = build_context_window(conv, 1, cfg.context_len, cfg.word_cap, &vocab).unwrap();
        let targets = target_row(&corpus, &table, 0, 0);
        let mut tape = Tape::new();
        let bound = bind_model(&params, &cfg, &mut tape).unwrap();
        let out = forward(&mut tape, &bound, &cfg, &window, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();

        // all aux weights zero: total = primary loss exactly
        let w = uniform_weights(0.99).with_zeroed(&[true; N_AUX]);
        assert_eq!(w.primary, 1.0);
        let (total, per_task) = compute_loss(&mut tape, &out.predictions, &targets, &w, &cfg).unwrap();
        assert!((tape.value_f64(total)[0] as f32 - per_task[0]).abs() < 1e-6);

        // zero-weight task heads receive exactly zero gradient; the live
        // primary head does not (its bias gradient is softmax - onehot)
        let gmap = tape.backward(total).unwrap();
        assert!(gmap.get("head05.w").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(gmap.get("head05.b").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(gmap.get("head00.b").unwrap().data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn weighted_average_hand_arithmetic() {
        // two tasks with losses 2 and 4 at weights 0.75 / 0.25 -> 2.5
        let mut tape = Tape::new();
        let a = tape.leaf_vec(&[2.0]);
        let b = tape.leaf_vec(&[4.0]);
        let sa = tape.scale(a, 0.75).unwrap();
        let sb = tape.scale(b, 0.25).unwrap();
        let total = tape.add(sa, sb).unwrap();
        assert_eq!(tape.value_f64(total)[0], 2.5);
    }

    #[test]
    fn rock_end_to_end_matches_finite_differences() {
        // 1-unit branches, 2 words, 2 talkturns
        let (corpus, table, vocab, mut cfg, mut params) = setup(Variant::Rock, 1, 1, 48);
        nudge_relu_biases(&mut params);
        cfg.context_len = 2;
        cfg.word_cap = 2;
        let conv = corpus.conversations[0].clone();
        let window = build_context_window(&conv, 2, cfg.context_len, cfg.word_cap, &vocab).unwrap();
        let targets = target_row(&corpus, &table, 0, 1);
        let weights = uniform_weights(0.6);

        let mut flat_params = std::collections::BTreeMap::new();
        params.visit(&mut |n, t| {
            flat_params.insert(n, t.clone());
        });
        let err = crate::autodiff::finite_difference_check(&flat_params, 1e-3, |tape, ps| {
            let mut p = params.clone();
            p.visit_mut(&mut |n, t| {
                *t = ps[&n].clone();
            });
            let bound = bind_model(&p, &cfg, tape)?;
            let out = forward(tape, &bound, &cfg, &window, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0))?;
            let (total, _) = compute_loss(tape, &out.predictions, &targets, &weights, &cfg)?;
            Ok(total)
        })
        .unwrap();
        assert!(err < 1e-4, "rock end-to-end fd err {}", err);
    }

    #[test]
    fn frozen_embedding_gets_no_gradient_entry() {
        let (corpus, table, vocab, mut cfg, _p) = setup(Variant::Flat, 2, 0, 49);
        cfg.fine_tune_embeddings = false;
        let params = build_model(&cfg, &vocab, None, 49).unwrap();
        let conv = &corpus.conversations[0];
        let window = build_context_window(conv, 1, cfg.context_len, cfg.word_cap, &vocab).unwrap();
        let targets = target_row(&corpus, &table, 0, 0);
        let mut tape = Tape::new();
        let bound = bind_model(&params, &cfg, &mut tape).unwrap();
        let out = forward(&mut tape, &bound, &cfg, &window, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let (total, _) = compute_loss(&mut tape, &out.predictions, &targets, &uniform_weights(0.8), &cfg).unwrap();
        let gmap = tape.backward(total).unwrap();
        assert!(gmap.get("embedding").is_none());
    }
}
