//! Seeded synthetic conversation generator.
//!
//! Each talkturn draws a latent state from a 4-state first-order Markov
//! chain (self-transition 0.6, the rest uniform). The state drives the
//! primary label, the action-unit and prosody features, and an optional
//! cue adverb woven into the narrative, so the auxiliary features and
//! label history are genuinely informative about the label.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{Conversation, Corpus, Label, Talkturn, TaskKind};
use crate::error::{Error, Result};

pub const N_STATES: usize = 4;
pub const SELF_TRANSITION: f64 = 0.6;

/// State-linked cue adverbs, inserted as the second narrative word with
/// probability 0.8.
pub const CUE_WORDS: [&str; N_STATES] = ["happily", "sadly", "angrily", "fearfully"];
pub const CUE_PROBABILITY: f64 = 0.8;

/// Mean action-unit activations (au05, au17, au20, au25) per latent
/// state; noise is Gaussian with sigma 0.4.
pub const AU_MEANS: [[f32; 4]; N_STATES] = [
    [0.8, 0.2, 0.2, 0.6],
    [0.2, 0.8, 0.3, 0.2],
    [0.6, 0.3, 0.8, 0.3],
    [0.3, 0.6, 0.4, 0.8],
];
pub const AU_SIGMA: f32 = 0.4;

/// Mean tone scores (happy, sad, angry, fear) per latent state; the
/// matching tone sits at 1.0, the rest at 0.0, noise sigma 0.5.
pub const PROSODY_SIGMA: f32 = 0.5;

/// Size of the content-word pool ("w000".."w199").
pub const CONTENT_VOCAB: usize = 200;

/// Gaussian noise added to regression labels before clamping.
pub const LABEL_SIGMA: f32 = 0.3;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_conversations: usize,
    pub turns_per_conversation: usize,
    pub task_kind: TaskKind,
    pub seed: u64,
}

fn prosody_mean(state: usize, tone: usize) -> f32 {
    if state == tone {
        1.0
    } else {
        0.0
    }
}

/// Regression label means per state: quartile midpoints of [lo, hi].
pub fn regression_state_mean(state: usize, lo: f32, hi: f32) -> f32 {
    lo + (hi - lo) * (2.0 * state as f32 + 1.0) / 8.0
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Corpus> {
    if cfg.n_conversations < 1 || cfg.turns_per_conversation < 1 {
        return Err(Error::Config("synthetic sizes must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let gauss = Normal::new(0.0f64, 1.0).expect("unit normal");

    let mut conversations = Vec::with_capacity(cfg.n_conversations);
    for ci in 0..cfg.n_conversations {
        let conv_id = format!("conv-{ci:04}");
        let speakers = [format!("spk-{ci:04}-a"), format!("spk-{ci:04}-b")];
        let mut state = rng.random_range(0..N_STATES);
        let mut turns = Vec::with_capacity(cfg.turns_per_conversation);
        for ti in 0..cfg.turns_per_conversation {
            if ti > 0 {
                state = step_chain(state, &mut rng);
            }
            let label = match cfg.task_kind {
                TaskKind::Classification { .. } => Label::Class(state as u8),
                TaskKind::Regression { lo, hi } => {
                    let mean = regression_state_mean(state, lo, hi);
                    let v = mean + LABEL_SIGMA * gauss.sample(&mut rng) as f32;
                    Label::Real(v.clamp(lo, hi))
                }
            };
            let mut au = [0.0f32; 4];
            for (j, a) in au.iter_mut().enumerate() {
                *a = AU_MEANS[state][j] + AU_SIGMA * gauss.sample(&mut rng) as f32;
            }
            let mut prosody = [0.0f32; 4];
            for (j, p) in prosody.iter_mut().enumerate() {
                *p = prosody_mean(state, j) + PROSODY_SIGMA * gauss.sample(&mut rng) as f32;
            }
            let narrative = narrative_for(state, &mut rng);
            turns.push(Talkturn {
                conversation_id: conv_id.clone(),
                turn_index: (ti + 1) as u32,
                speaker_id: speakers[ti % 2].clone(),
                narrative,
                label,
                au,
                prosody,
            });
        }
        conversations.push(Conversation { id: conv_id, turns, partition: None });
    }
    Ok(Corpus { task_kind: cfg.task_kind, conversations })
}

fn step_chain<R: Rng>(state: usize, rng: &mut R) -> usize {
    if rng.random::<f64>() < SELF_TRANSITION {
        return state;
    }
    let others: Vec<usize> = (0..N_STATES).filter(|&s| s != state).collect();
    others[rng.random_range(0..others.len())]
}

fn narrative_for<R: Rng>(state: usize, rng: &mut R) -> String {
    let n_words = rng.random_range(3..=10);
    let mut words: Vec<String> =
        (0..n_words).map(|_| format!("w{:03}", rng.random_range(0..CONTENT_VOCAB))).collect();
    if rng.random::<f64>() < CUE_PROBABILITY {
        words.insert(1, CUE_WORDS[state].to_string());
    }
    words.join(" ")
}

/// Deterministic 60/20/20 partition by conversation order. Speakers are
/// conversation-local, so the split is speaker-disjoint by construction.
pub fn default_partition_manifest(corpus: &Corpus) -> crate::corpus::PartitionManifest {
    let n = corpus.conversations.len();
    let n_train = (n * 6).div_euclid(10).max(1);
    let n_dev = ((n - n_train) / 2).max(if n > n_train { 1 } else { 0 });
    let mut manifest = crate::corpus::PartitionManifest::default();
    for (i, conv) in corpus.conversations.iter().enumerate() {
        if i < n_train {
            manifest.train.push(conv.id.clone());
        } else if i < n_train + n_dev {
            manifest.dev.push(conv.id.clone());
        } else {
            manifest.test.push(conv.id.clone());
        }
    }
    manifest
}
