//! Construction of the sixteen auxiliary supervision targets: the eight
//! action/prosody features percentile-ranked against the train partition
//! and scaled onto the primary label range, plus the labels of the four
//! preceding and four following talkturns (clamped at conversation
//! boundaries).

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Label, Partition, TaskKind};
use crate::error::{Error, Result};

pub const N_AUX: usize = 16;

/// Canonical auxiliary column order: four action units, four tones,
/// labels t-1..t-4, labels t+1..t+4.
pub const AUX_NAMES: [&str; N_AUX] = [
    "au05", "au17", "au20", "au25", "tone_happy", "tone_sad", "tone_angry", "tone_fear", "y_m1",
    "y_m2", "y_m3", "y_m4", "y_p1", "y_p2", "y_p3", "y_p4",
];

/// Column index ranges per auxiliary family.
pub const FAMILY_ACTIONS: std::ops::Range<usize> = 0..4;
pub const FAMILY_PROSODY: std::ops::Range<usize> = 4..8;
pub const FAMILY_HISTORICAL: std::ops::Range<usize> = 8..12;
pub const FAMILY_FUTURE: std::ops::Range<usize> = 12..16;

/// Empirical percentile map fitted on train-partition values only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankMap {
    sorted: Vec<f32>,
}

/// Fit a rank map. Keeps a sorted copy (duplicates preserved).
pub fn fit_rank(train_values: &[f32]) -> Result<RankMap> {
    if train_values.is_empty() {
        return Err(Error::Corpus("cannot fit a rank map on no values".into()));
    }
    let mut sorted = train_values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite feature values"));
    Ok(RankMap { sorted })
}

impl RankMap {
    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    pub fn values(&self) -> &[f32] {
        &self.sorted
    }
}

/// Percentile rank: fraction of train values <= x, in [0, 1].
pub fn apply_rank(rm: &RankMap, x: f32) -> f32 {
    let n_le = rm.sorted.partition_point(|&v| v <= x);
    n_le as f32 / rm.sorted.len() as f32
}

/// Affine map of a [0,1] rank onto the primary range. Classification
/// primaries keep the [0,1] range.
pub fn scale_to_primary(rank: f32, task_kind: &TaskKind) -> Result<f32> {
    if !(0.0..=1.0).contains(&rank) {
        return Err(Error::Corpus(format!("rank {} outside [0,1]", rank)));
    }
    Ok(match task_kind {
        TaskKind::Classification { .. } => rank,
        TaskKind::Regression { lo, hi } => lo + rank * (hi - lo),
    })
}

/// Label of the talkturn `k` steps away, clamped to the nearest
/// existing talkturn. `i` is 1-based.
pub fn shifted_label(labels: &[Label], i: usize, k: i32) -> Result<Label> {
    if labels.is_empty() {
        return Err(Error::Corpus("empty conversation".into()));
    }
    if i < 1 || i > labels.len() {
        return Err(Error::Corpus(format!("index {} out of range 1..={}", i, labels.len())));
    }
    let target = (i as i64 + k as i64).clamp(1, labels.len() as i64) as usize;
    Ok(labels[target - 1])
}

/// The sixteen per-talkturn auxiliary targets plus per-column task kinds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuxTargetTable {
    /// Task kind per column, aligned with [`AUX_NAMES`].
    pub column_kinds: Vec<TaskKind>,
    /// Values keyed by (conversation id, 1-based turn index).
    pub rows: BTreeMap<(String, u32), [Label; N_AUX]>,
}

impl AuxTargetTable {
    pub fn row(&self, conversation_id: &str, turn_index: u32) -> Option<&[Label; N_AUX]> {
        self.rows.get(&(conversation_id.to_string(), turn_index))
    }

    /// JSON-Lines dump keyed by (conversation-id, turn-index) for
    /// inspection and caching.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for ((conv, idx), values) in &self.rows {
            let mut obj = serde_json::Map::new();
            obj.insert("conversation_id".into(), serde_json::json!(conv));
            obj.insert("turn_index".into(), serde_json::json!(idx));
            for (name, value) in AUX_NAMES.iter().zip(values.iter()) {
                obj.insert((*name).to_string(), serde_json::to_value(value)?);
            }
            out.push_str(&serde_json::to_string(&serde_json::Value::Object(obj))?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f =
            std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        f.write_all(self.to_jsonl()?.as_bytes())
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    /// Load a table dumped by [`AuxTargetTable::to_jsonl`]. Column kinds
    /// are derived from the primary task kind, matching construction.
    pub fn from_jsonl(text: &str, primary: &TaskKind) -> Result<Self> {
        let column_kinds = crate::model::default_aux_kinds(primary);
        let mut rows = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let obj: serde_json::Map<String, serde_json::Value> = serde_json::from_str(line)
                .map_err(|e| Error::Corpus(format!("aux line {}: {}", lineno + 1, e)))?;
            let conv = obj
                .get("conversation_id")
                .and_then(|v| v.as_str())
                .ok_or_else(|| Error::Corpus(format!("aux line {}: no conversation_id", lineno + 1)))?
                .to_string();
            let idx = obj
                .get("turn_index")
                .and_then(|v| v.as_u64())
                .ok_or_else(|| Error::Corpus(format!("aux line {}: no turn_index", lineno + 1)))?
                as u32;
            let mut values = [Label::Real(0.0); N_AUX];
            for (j, name) in AUX_NAMES.iter().enumerate() {
                let raw = obj
                    .get(*name)
                    .and_then(|v| v.as_f64())
                    .ok_or_else(|| Error::Corpus(format!("aux line {}: missing {}", lineno + 1, name)))?;
                values[j] = match column_kinds[j] {
                    TaskKind::Classification { .. } => Label::Class(raw as u8),
                    TaskKind::Regression { .. } => Label::Real(raw as f32),
                };
            }
            rows.insert((conv, idx), values);
        }
        Ok(AuxTargetTable { column_kinds, rows })
    }
}

/// Fit the eight rank maps on the train partition, rank and scale every
/// talkturn's features, and fill the eight shifted-label columns.
pub fn build_aux_table(corpus: &Corpus) -> Result<AuxTargetTable> {
    let train = corpus.partition_turns(Partition::Train);
    if train.is_empty() {
        return Err(Error::Corpus("no train partition to fit rank maps on".into()));
    }
    let mut rank_maps = Vec::with_capacity(8);
    for f in 0..8 {
        let values: Vec<f32> = train
            .iter()
            .map(|&r| {
                let t = corpus.turn(r);
                if f < 4 {
                    t.au[f]
                } else {
                    t.prosody[f - 4]
                }
            })
            .collect();
        rank_maps.push(fit_rank(&values)?);
    }

    let rank_kind = match corpus.task_kind {
        TaskKind::Classification { .. } => TaskKind::Regression { lo: 0.0, hi: 1.0 },
        TaskKind::Regression { lo, hi } => TaskKind::Regression { lo, hi },
    };
    let mut column_kinds = vec![rank_kind; 8];
    column_kinds.extend(vec![corpus.task_kind; 8]);

    let shifts: [i32; 8] = [-1, -2, -3, -4, 1, 2, 3, 4];
    let mut rows = BTreeMap::new();
    for conv in &corpus.conversations {
        let labels: Vec<Label> = conv.turns.iter().map(|t| t.label).collect();
        for turn in &conv.turns {
            let mut values = [Label::Real(0.0); N_AUX];
            for f in 0..8 {
                let raw = if f < 4 { turn.au[f] } else { turn.prosody[f - 4] };
                let rank = apply_rank(&rank_maps[f], raw);
                values[f] = Label::Real(scale_to_primary(rank, &corpus.task_kind)?);
            }
            for (j, &k) in shifts.iter().enumerate() {
                values[8 + j] = shifted_label(&labels, turn.turn_index as usize, k)?;
            }
            rows.insert((conv.id.clone(), turn.turn_index), values);
        }
    }
    Ok(AuxTargetTable { column_kinds, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Conversation, Talkturn};
    use crate::synthetic::{generate_synthetic, SyntheticConfig};

    #[test]
    fn fit_rank_sorts_and_keeps_duplicates() {
        assert_eq!(fit_rank(&[3.0, 1.0, 2.0]).unwrap().values(), &[1.0, 2.0, 3.0]);
        assert_eq!(fit_rank(&[5.0]).unwrap().len(), 1);
        assert_eq!(fit_rank(&[1.0, 1.0, 2.0]).unwrap().values(), &[1.0, 1.0, 2.0]);
        assert!(fit_rank(&[]).is_err());
    }

    #[test]
    fn rank_boundaries() {
        let rm = fit_rank(&[10.0, 20.0, 30.0, 40.0]).unwrap();
        assert_eq!(apply_rank(&rm, 5.0), 0.0);
        assert_eq!(apply_rank(&rm, 40.0), 1.0);
        assert_eq!(apply_rank(&rm, 25.0), 0.5);
        assert_eq!(apply_rank(&rm, 10.0), 0.25); // min -> 1/N
    }

    #[test]
    fn rank_is_monotone() {
        let rm = fit_rank(&[0.4, -1.0, 2.5, 2.5, 7.0]).unwrap();
        let xs = [-5.0f32, -1.0, 0.0, 0.4, 2.5, 3.0, 7.0, 9.0];
        let ranks: Vec<f32> = xs.iter().map(|&x| apply_rank(&rm, x)).collect();
        assert!(ranks.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn train_value_ranks_are_multiples_of_one_over_n() {
        let rm = fit_rank(&[4.0, 8.0, 15.0, 16.0, 23.0]).unwrap();
        for (i, &v) in rm.values().iter().enumerate() {
            assert!((apply_rank(&rm, v) - (i + 1) as f32 / 5.0).abs() < 1e-6);
        }
    }

    #[test]
    fn scaling_matches_declared_ranges() {
        let reg15 = TaskKind::Regression { lo: 1.0, hi: 5.0 };
        let reg11 = TaskKind::Regression { lo: -1.0, hi: 1.0 };
        let cls = TaskKind::classification();
        assert_eq!(scale_to_primary(0.5, &reg15).unwrap(), 3.0);
        assert_eq!(scale_to_primary(0.5, &reg11).unwrap(), 0.0);
        assert_eq!(scale_to_primary(0.25, &cls).unwrap(), 0.25);
        // endpoints attainable
        assert_eq!(scale_to_primary(0.0, &reg15).unwrap(), 1.0);
        assert_eq!(scale_to_primary(1.0, &reg15).unwrap(), 5.0);
        assert!(scale_to_primary(1.5, &cls).is_err());
    }

    #[test]
    fn shifted_label_clamps() {
        let labels: Vec<Label> = (0..5).map(|i| Label::Class(i as u8 % 4)).collect();
        // turn 3, lag 4 -> turn 1
        assert_eq!(shifted_label(&labels, 3, -4).unwrap(), labels[0]);
        // last turn, lead 1 -> itself
        assert_eq!(shifted_label(&labels, 5, 1).unwrap(), labels[4]);
        let six: Vec<Label> = "abcdef".chars().map(|_| Label::Class(0)).collect();
        let mut six = six;
        six[5] = Label::Class(3);
        assert_eq!(shifted_label(&six, 2, 4).unwrap(), six[5]); // clamp(6,1,6)=6
        assert!(shifted_label(&[], 1, 1).is_err());
    }

    #[test]
    fn shifted_label_inverse_in_interior() {
        let labels: Vec<Label> = (0..8).map(|i| Label::Class((i % 4) as u8)).collect();
        for i in 3..=6usize {
            for k in [-2i32, -1, 1, 2] {
                let j = (i as i32 + k) as usize;
                let forth = shifted_label(&labels, i, k).unwrap();
                assert_eq!(forth, labels[j - 1]);
                let back = shifted_label(&labels, j, -k).unwrap();
                assert_eq!(back, labels[i - 1]);
            }
        }
    }

    fn corpus_with(au05: &[f32]) -> Corpus {
        let turns: Vec<Talkturn> = au05
            .iter()
            .enumerate()
            .map(|(i, &v)| Talkturn {
                conversation_id: "c".into(),
                turn_index: (i + 1) as u32,
                speaker_id: "s".into(),
                narrative: "word".into(),
                label: Label::Class((i % 4) as u8),
                au: [v, 0.0, 0.0, 0.0],
                prosody: [0.0; 4],
            })
            .collect();
        Corpus {
            task_kind: TaskKind::classification(),
            conversations: vec![Conversation {
                id: "c".into(),
                turns,
                partition: Some(Partition::Train),
            }],
        }
    }

    #[test]
    fn degenerate_feature_ranks_to_one() {
        let corpus = corpus_with(&[7.0, 7.0, 7.0]);
        let table = build_aux_table(&corpus).unwrap();
        for values in table.rows.values() {
            assert_eq!(values[0], Label::Real(1.0));
        }
    }

    #[test]
    fn single_turn_conversations_clamp_all_shifts() {
        let corpus = corpus_with(&[1.0]);
        let table = build_aux_table(&corpus).unwrap();
        let row = table.row("c", 1).unwrap();
        for j in 8..16 {
            assert_eq!(row[j], Label::Class(0));
        }
    }

    #[test]
    fn table_shape_and_sampled_cells() {
        let corpus = generate_synthetic(&SyntheticConfig {
            n_conversations: 3,
            turns_per_conversation: 5,
            task_kind: TaskKind::classification(),
            seed: 11,
        })
        .unwrap();
        let manifest = crate::synthetic::default_partition_manifest(&corpus);
        let corpus = crate::corpus::split_partitions(corpus, &manifest).unwrap();
        let table = build_aux_table(&corpus).unwrap();
        assert_eq!(table.column_kinds.len(), N_AUX);
        assert_eq!(table.rows.len(), corpus.n_turns());
        // rank columns stay in the classification range [0,1]
        for values in table.rows.values() {
            for v in &values[..8] {
                let x = v.as_real().unwrap();
                assert!((0.0..=1.0).contains(&x));
            }
        }
        // recompute two sampled cells by hand
        let train = corpus.partition_turns(Partition::Train);
        let au05: Vec<f32> = train.iter().map(|&r| corpus.turn(r).au[0]).collect();
        let rm = fit_rank(&au05).unwrap();
        let conv = &corpus.conversations[0];
        let probe = &conv.turns[2];
        let expect = scale_to_primary(apply_rank(&rm, probe.au[0]), &corpus.task_kind).unwrap();
        assert_eq!(table.row(&conv.id, 3).unwrap()[0], Label::Real(expect));
        let expect_hist = conv.turns[1].label;
        assert_eq!(table.row(&conv.id, 3).unwrap()[8], expect_hist);
    }

    #[test]
    fn dev_values_do_not_influence_train_ranks() {
        let corpus = generate_synthetic(&SyntheticConfig {
            n_conversations: 5,
            turns_per_conversation: 4,
            task_kind: TaskKind::classification(),
            seed: 21,
        })
        .unwrap();
        let manifest = crate::synthetic::default_partition_manifest(&corpus);
        let corpus = crate::corpus::split_partitions(corpus, &manifest).unwrap();
        let table1 = build_aux_table(&corpus).unwrap();

        let mut mutated = corpus.clone();
        for conv in &mut mutated.conversations {
            if conv.partition == Some(Partition::Dev) {
                for t in &mut conv.turns {
                    t.au = [99.0; 4];
                    t.prosody = [-99.0; 4];
                }
            }
        }
        let table2 = build_aux_table(&mutated).unwrap();
        for conv in &corpus.conversations {
            if conv.partition == Some(Partition::Train) {
                for t in &conv.turns {
                    assert_eq!(
                        table1.row(&conv.id, t.turn_index),
                        table2.row(&conv.id, t.turn_index)
                    );
                }
            }
        }
    }

    #[test]
    fn jsonl_dump_has_all_columns() {
        let corpus = corpus_with(&[1.0, 2.0]);
        let table = build_aux_table(&corpus).unwrap();
        let text = table.to_jsonl().unwrap();
        let first: serde_json::Value =
            serde_json::from_str(text.lines().next().unwrap()).unwrap();
        for name in AUX_NAMES {
            assert!(first.get(name).is_some(), "missing column {name}");
        }
    }
}
