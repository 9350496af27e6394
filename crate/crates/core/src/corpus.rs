//! Data model and ingestion for narrative conversations: JSON-Lines
//! parsing, tokenization, vocabulary building, context windows, and
//! partition manifests.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Names of the four facial action-unit features, in column order.
pub const AU_NAMES: [&str; 4] = ["au05", "au17", "au20", "au25"];
/// Names of the four prosody features, in column order.
pub const PROSODY_NAMES: [&str; 4] = ["tone_happy", "tone_sad", "tone_angry", "tone_fear"];

/// Primary task flavour. Classification is fixed at four classes;
/// regression declares its label range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskKind {
    Classification { classes: usize },
    Regression { lo: f32, hi: f32 },
}

impl TaskKind {
    pub fn classification() -> Self {
        TaskKind::Classification { classes: 4 }
    }

    pub fn is_classification(&self) -> bool {
        matches!(self, TaskKind::Classification { .. })
    }
}

/// A talkturn label: a class id or a real value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Label {
    Class(u8),
    Real(f32),
}

impl Label {
    pub fn as_class(&self) -> Result<u8> {
        match self {
            Label::Class(c) => Ok(*c),
            Label::Real(_) => Err(Error::Corpus("expected a class label".into())),
        }
    }

    pub fn as_real(&self) -> Result<f32> {
        match self {
            Label::Real(v) => Ok(*v),
            Label::Class(_) => Err(Error::Corpus("expected a real label".into())),
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Class(c) => write!(f, "{}", c),
            Label::Real(v) => write!(f, "{:.3}", v),
        }
    }
}

/// One utterance: the narrative text plus the raw auxiliary features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Talkturn {
    pub conversation_id: String,
    pub turn_index: u32,
    pub speaker_id: String,
    pub narrative: String,
    pub label: Label,
    pub au: [f32; 4],
    pub prosody: [f32; 4],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Train,
    Dev,
    Test,
}

impl Partition {
    pub const ALL: [Partition; 3] = [Partition::Train, Partition::Dev, Partition::Test];

    pub fn name(&self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Dev => "dev",
            Partition::Test => "test",
        }
    }
}

/// An ordered run of talkturns by up to a handful of speakers.
#[derive(Debug, Clone, PartialEq)]
pub struct Conversation {
    pub id: String,
    pub turns: Vec<Talkturn>,
    pub partition: Option<Partition>,
}

/// A loaded corpus. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub task_kind: TaskKind,
    pub conversations: Vec<Conversation>,
}

/// Pointer to one talkturn inside a corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TurnRef {
    pub conv: usize,
    pub turn: usize,
}

impl Corpus {
    pub fn n_turns(&self) -> usize {
        self.conversations.iter().map(|c| c.turns.len()).sum()
    }

    pub fn turn(&self, r: TurnRef) -> &Talkturn {
        &self.conversations[r.conv].turns[r.turn]
    }

    /// All talkturns of one partition, in corpus order.
    pub fn partition_turns(&self, p: Partition) -> Vec<TurnRef> {
        let mut out = Vec::new();
        for (ci, conv) in self.conversations.iter().enumerate() {
            if conv.partition == Some(p) {
                out.extend((0..conv.turns.len()).map(|ti| TurnRef { conv: ci, turn: ti }));
            }
        }
        out
    }

    fn validate(&self) -> Result<()> {
        let mut seen_conv = BTreeSet::new();
        for conv in &self.conversations {
            if !seen_conv.insert(conv.id.clone()) {
                return Err(Error::Corpus(format!("duplicate conversation id {:?}", conv.id)));
            }
            if conv.turns.is_empty() {
                return Err(Error::Corpus(format!("conversation {:?} has no talkturns", conv.id)));
            }
            for (i, t) in conv.turns.iter().enumerate() {
                if t.turn_index as usize != i + 1 {
                    return Err(Error::Corpus(format!(
                        "conversation {:?}: turn indices must be contiguous from 1, got {} at position {}",
                        conv.id,
                        t.turn_index,
                        i + 1
                    )));
                }
                if t.narrative.is_empty() {
                    return Err(Error::Corpus(format!(
                        "conversation {:?} turn {}: empty narrative",
                        conv.id, t.turn_index
                    )));
                }
                validate_label(&t.label, &self.task_kind).map_err(|e| {
                    Error::Corpus(format!(
                        "conversation {:?} turn {}: {}",
                        conv.id, t.turn_index, e
                    ))
                })?;
            }
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for conv in &self.conversations {
            for t in &conv.turns {
                out.push_str(&serde_json::to_string(t)?);
                out.push('\n');
            }
        }
        Ok(out)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        f.write_all(self.to_jsonl()?.as_bytes())
            .map_err(|e| Error::io(path.display().to_string(), e))
    }
}

fn validate_label(label: &Label, kind: &TaskKind) -> Result<()> {
    match (label, kind) {
        (Label::Class(c), TaskKind::Classification { classes }) => {
            if (*c as usize) < *classes {
                Ok(())
            } else {
                Err(Error::Corpus(format!("class {} out of range 0..{}", c, classes)))
            }
        }
        (Label::Real(v), TaskKind::Regression { lo, hi }) => {
            if *v >= *lo && *v <= *hi {
                Ok(())
            } else {
                Err(Error::Corpus(format!("label {} outside [{}, {}]", v, lo, hi)))
            }
        }
        _ => Err(Error::Corpus("label type does not match task kind".into())),
    }
}

// ── Parsing ──────────────────────────────────────────────────────────

#[derive(Deserialize)]
struct RawTurn {
    conversation_id: String,
    turn_index: u32,
    speaker_id: String,
    narrative: String,
    label: f64,
    au: [f32; 4],
    prosody: [f32; 4],
}

/// Parse a JSON-Lines corpus. Talkturn lines may arrive in any order;
/// conversations are assembled by id and sorted by turn index, which
/// must be contiguous from 1.
pub fn parse_corpus(path: &Path, task_kind: TaskKind) -> Result<Corpus> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_corpus_reader(BufReader::new(file), task_kind)
}

pub fn parse_corpus_str(text: &str, task_kind: TaskKind) -> Result<Corpus> {
    parse_corpus_reader(BufReader::new(text.as_bytes()), task_kind)
}

fn parse_corpus_reader<R: BufRead>(reader: R, task_kind: TaskKind) -> Result<Corpus> {
    let mut by_conv: BTreeMap<String, BTreeMap<u32, Talkturn>> = BTreeMap::new();
    let mut order: Vec<String> = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io("corpus", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawTurn = serde_json::from_str(&line)
            .map_err(|e| Error::Corpus(format!("line {}: {}", lineno + 1, e)))?;
        let label = match task_kind {
            TaskKind::Classification { .. } => {
                if raw.label.fract() != 0.0 || raw.label < 0.0 || raw.label > 255.0 {
                    return Err(Error::Corpus(format!(
                        "line {}: classification label must be a small integer, got {}",
                        lineno + 1,
                        raw.label
                    )));
                }
                Label::Class(raw.label as u8)
            }
            TaskKind::Regression { .. } => Label::Real(raw.label as f32),
        };
        let turn = Talkturn {
            conversation_id: raw.conversation_id.clone(),
            turn_index: raw.turn_index,
            speaker_id: raw.speaker_id,
            narrative: raw.narrative,
            label,
            au: raw.au,
            prosody: raw.prosody,
        };
        if !by_conv.contains_key(&raw.conversation_id) {
            order.push(raw.conversation_id.clone());
        }
        let slot = by_conv.entry(raw.conversation_id).or_default();
        if slot.insert(raw.turn_index, turn).is_some() {
            return Err(Error::Corpus(format!(
                "line {}: duplicate turn index {} in a conversation",
                lineno + 1,
                raw.turn_index
            )));
        }
    }
    let conversations = order
        .into_iter()
        .map(|id| {
            let turns: Vec<Talkturn> = by_conv.remove(&id).unwrap().into_values().collect();
            Conversation { id, turns, partition: None }
        })
        .collect();
    let corpus = Corpus { task_kind, conversations };
    corpus.validate()?;
    Ok(corpus)
}

// ── Tokenization ─────────────────────────────────────────────────────

const STRIP: [char; 9] = ['.', ',', '!', '?', ';', ':', '"', '(', ')'];

/// Lowercase, split on whitespace, strip leading/trailing punctuation.
pub fn tokenize(narrative: &str) -> Vec<String> {
    narrative
        .split_whitespace()
        .map(|w| w.to_lowercase().trim_matches(|c| STRIP.contains(&c)).to_string())
        .filter(|w| !w.is_empty())
        .collect()
}

// ── Vocabulary ───────────────────────────────────────────────────────

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;

/// Token to id map built from the train partition only. Id 0 is
/// padding, id 1 unknown; remaining ids are dense, ordered by
/// descending train frequency then token text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, u32>,
    counts: BTreeMap<String, u64>,
}

impl Vocabulary {
    pub fn build(corpus: &Corpus) -> Result<Self> {
        let mut counts: BTreeMap<String, u64> = BTreeMap::new();
        for r in corpus.partition_turns(Partition::Train) {
            for tok in tokenize(&corpus.turn(r).narrative) {
                *counts.entry(tok).or_insert(0) += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::Corpus("no train tokens to build a vocabulary from".into()));
        }
        let mut ordered: Vec<(String, u64)> = counts.iter().map(|(t, &c)| (t.clone(), c)).collect();
        ordered.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut tokens = vec!["<pad>".to_string(), "<unk>".to_string()];
        tokens.extend(ordered.into_iter().map(|(t, _)| t));
        let mut v = Vocabulary { tokens, index: BTreeMap::new(), counts };
        v.rebuild_index();
        Ok(v)
    }

    fn rebuild_index(&mut self) {
        self.index =
            self.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Tokens excluding the pad/unk sentinels.
    pub fn real_tokens(&self) -> &[String] {
        &self.tokens[2..]
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut v: Vocabulary = serde_json::from_str(text)?;
        v.rebuild_index();
        Ok(v)
    }
}

// ── Context windows ──────────────────────────────────────────────────

/// A fixed L x T grid of token ids with word and talkturn masks. The
/// current talkturn occupies the last row; missing leading history rows
/// are fully masked.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextWindow {
    pub token_ids: Vec<Vec<u32>>,
    pub word_mask: Vec<Vec<bool>>,
    pub turn_mask: Vec<bool>,
    /// 1-based turn indices backing each row; 0 for masked rows.
    pub turn_indices: Vec<u32>,
}

/// Build the window of talkturns max(1, i-L+1)..=i, each truncated to
/// its first T tokens. `i` is 1-based.
pub fn build_context_window(
    conv: &Conversation,
    i: usize,
    l: usize,
    t: usize,
    vocab: &Vocabulary,
) -> Result<ContextWindow> {
    if i < 1 || i > conv.turns.len() {
        return Err(Error::Corpus(format!(
            "turn index {} out of range 1..={}",
            i,
            conv.turns.len()
        )));
    }
    if l < 1 || t < 1 {
        return Err(Error::Config("window dims must be >= 1".into()));
    }
    let first = i.saturating_sub(l - 1).max(1);
    let n_real = i - first + 1;
    let n_pad = l - n_real;

    let mut token_ids = vec![vec![PAD_ID; t]; l];
    let mut word_mask = vec![vec![false; t]; l];
    let mut turn_mask = vec![false; l];
    let mut turn_indices = vec![0u32; l];

    for (slot, turn_no) in (first..=i).enumerate() {
        let row = n_pad + slot;
        let mut toks = tokenize(&conv.turns[turn_no - 1].narrative);
        if toks.is_empty() {
            // punctuation-only narrative: keep the slot alive as unknown
            toks.push("<unk>".to_string());
        }
        toks.truncate(t);
        for (j, tok) in toks.iter().enumerate() {
            token_ids[row][j] = vocab.id(tok);
            word_mask[row][j] = true;
        }
        turn_mask[row] = true;
        turn_indices[row] = turn_no as u32;
    }
    Ok(ContextWindow { token_ids, word_mask, turn_mask, turn_indices })
}

// ── Partitions ───────────────────────────────────────────────────────

/// The on-disk partition manifest: conversation ids per partition.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PartitionManifest {
    pub train: Vec<String>,
    pub dev: Vec<String>,
    pub test: Vec<String>,
}

impl PartitionManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }
}

/// Apply a manifest to a corpus, checking that every conversation is
/// assigned and that partitions share no speaker.
pub fn split_partitions(mut corpus: Corpus, manifest: &PartitionManifest) -> Result<Corpus> {
    let mut assignment: BTreeMap<&str, Partition> = BTreeMap::new();
    for (ids, p) in [
        (&manifest.train, Partition::Train),
        (&manifest.dev, Partition::Dev),
        (&manifest.test, Partition::Test),
    ] {
        for id in ids {
            if assignment.insert(id, p).is_some() {
                return Err(Error::Corpus(format!(
                    "conversation {:?} assigned to two partitions",
                    id
                )));
            }
        }
    }
    let mut speakers: BTreeMap<String, Partition> = BTreeMap::new();
    for conv in &mut corpus.conversations {
        let p = assignment.get(conv.id.as_str()).copied().ok_or_else(|| {
            Error::Corpus(format!("conversation {:?} missing from the partition manifest", conv.id))
        })?;
        conv.partition = Some(p);
        for t in &conv.turns {
            match speakers.get(&t.speaker_id) {
                Some(&prev) if prev != p => {
                    return Err(Error::Corpus(format!(
                        "speaker {:?} appears in both {} and {}",
                        t.speaker_id,
                        prev.name(),
                        p.name()
                    )));
                }
                _ => {
                    speakers.insert(t.speaker_id.clone(), p);
                }
            }
        }
    }
    Ok(corpus)
}
