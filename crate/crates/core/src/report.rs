//! Attention aggregation across the three levels (word, talkturn, task),
//! z-score bucketing, and text/HTML conversation-analysis reports.

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, Conversation, Corpus, Label, Vocabulary};
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::model::{
    bind_model, forward, primary_prediction, AttentionRecord, ModelConfig, ParameterSet,
};
use crate::training::Dataset;

/// Overall word/talkturn weights after mixing the per-task attention
/// rows with the task weights. Masked window slots keep zero talkturn
/// weight and an empty word list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatedAttention {
    pub talkturn: Vec<f32>,
    pub word: Vec<Vec<f32>>,
}

/// Mix talkturn rows with task weights, and word rows with per-branch
/// task mass (primary task vs. the sixteen auxiliaries), renormalizing
/// each family.
pub fn aggregate(rec: &AttentionRecord) -> Result<AggregatedAttention> {
    if rec.talkturn.is_empty() || rec.task.is_empty() || rec.word.is_empty() {
        return Err(Error::Eval("attention record is missing a family".into()));
    }
    if rec.talkturn.len() != rec.task.len() {
        return Err(Error::Eval(format!(
            "{} talkturn rows vs {} task weights",
            rec.talkturn.len(),
            rec.task.len()
        )));
    }
    let slots = rec.talkturn[0].len();
    let mut talkturn = vec![0.0f32; slots];
    for (row, &mass) in rec.talkturn.iter().zip(&rec.task) {
        if row.len() != slots {
            return Err(Error::Eval("ragged talkturn attention rows".into()));
        }
        for (acc, &w) in talkturn.iter_mut().zip(row) {
            *acc += mass * w;
        }
    }
    normalize(&mut talkturn);

    // branch masses: the primary task's weight and the rest
    let branch_mass: Vec<f32> = match rec.word.len() {
        1 => vec![1.0],
        2 => vec![rec.task[0], rec.task.iter().skip(1).sum()],
        n => return Err(Error::Eval(format!("expected 1 or 2 word branches, got {}", n))),
    };
    let mut word = Vec::with_capacity(slots);
    for slot in 0..slots {
        let n_words = rec.word[0][slot].len();
        let mut mixed = vec![0.0f32; n_words];
        for (branch, &mass) in rec.word.iter().zip(&branch_mass) {
            if branch[slot].len() != n_words {
                return Err(Error::Eval("word branches disagree on window shape".into()));
            }
            for (acc, &w) in mixed.iter_mut().zip(&branch[slot]) {
                *acc += mass * w;
            }
        }
        if !mixed.is_empty() {
            normalize(&mut mixed);
        }
        word.push(mixed);
    }
    Ok(AggregatedAttention { talkturn, word })
}

fn normalize(weights: &mut [f32]) {
    let total: f32 = weights.iter().sum();
    if total > 0.0 {
        for w in weights.iter_mut() {
            *w /= total;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Bucket {
    N,
    L,
    M,
    H,
}

impl Bucket {
    pub fn letter(&self) -> char {
        match self {
            Bucket::N => 'N',
            Bucket::L => 'L',
            Bucket::M => 'M',
            Bucket::H => 'H',
        }
    }

    fn from_z(z: f32) -> Bucket {
        if z < 0.0 {
            Bucket::N
        } else if z < 1.0 {
            Bucket::L
        } else if z < 2.0 {
            Bucket::M
        } else {
            Bucket::H
        }
    }
}

/// Bucket weights by the z-score of each entry (population standard
/// deviation). Degenerate inputs (fewer than two entries, or zero
/// spread) bucket everything as N.
pub fn zscore_bucket(weights: &[f32]) -> Vec<Bucket> {
    let n = weights.len();
    if n < 2 {
        return vec![Bucket::N; n];
    }
    let mean = weights.iter().sum::<f32>() / n as f32;
    let var = weights.iter().map(|w| (w - mean) * (w - mean)).sum::<f32>() / n as f32;
    let sigma = var.sqrt();
    if sigma == 0.0 {
        return vec![Bucket::N; n];
    }
    weights.iter().map(|&w| Bucket::from_z((w - mean) / sigma)).collect()
}

/// One rendered example: words, buckets, and the label header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportExample {
    pub conversation_id: String,
    pub turn_index: u32,
    pub predicted: Label,
    pub truth: Label,
    /// Words per live window slot, oldest first.
    pub rows: Vec<ReportRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    /// Talkturns back from the current one (0 = current).
    pub offset: u32,
    pub bucket: Bucket,
    pub words: Vec<String>,
    pub word_buckets: Vec<Bucket>,
}

/// The display words for each live slot of a context window, mirroring
/// the grid construction (first `t` tokens, unknowns kept as text).
fn window_words(conv: &Conversation, i: usize, l: usize, t: usize) -> Vec<(u32, Vec<String>)> {
    let first = i.saturating_sub(l - 1).max(1);
    (first..=i)
        .map(|turn_no| {
            let mut toks = tokenize(&conv.turns[turn_no - 1].narrative);
            if toks.is_empty() {
                toks.push("<unk>".to_string());
            }
            toks.truncate(t);
            ((i - turn_no) as u32, toks)
        })
        .collect()
}

/// Run one talkturn through the model and bucket its attention.
pub fn analyze_example(
    params: &ParameterSet,
    cfg: &ModelConfig,
    data: &Dataset,
    conversation_id: &str,
    turn_index: u32,
) -> Result<ReportExample> {
    let conv = data
        .corpus
        .conversations
        .iter()
        .find(|c| c.id == conversation_id)
        .ok_or_else(|| Error::Corpus(format!("no conversation {:?}", conversation_id)))?;
    let i = turn_index as usize;
    let window =
        crate::corpus::build_context_window(conv, i, cfg.context_len, cfg.word_cap, data.vocab)?;

    let mut tape = crate::autodiff::Tape::new();
    let bound = bind_model(params, cfg, &mut tape)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let out = forward(&mut tape, &bound, cfg, &window, Mode::Eval, &mut rng)?;
    let predicted = primary_prediction(&tape, &out, &cfg.task_kind);
    let agg = aggregate(&out.attention)?;

    let live_slots: Vec<usize> =
        (0..window.turn_mask.len()).filter(|&s| window.turn_mask[s]).collect();
    let live_weights: Vec<f32> = live_slots.iter().map(|&s| agg.talkturn[s]).collect();
    let turn_buckets = zscore_bucket(&live_weights);

    let words = window_words(conv, i, cfg.context_len, cfg.word_cap);
    if words.len() != live_slots.len() {
        return Err(Error::Eval("window words disagree with the live slots".into()));
    }
    let mut rows = Vec::with_capacity(live_slots.len());
    for ((slot, bucket), (offset, words)) in live_slots.iter().zip(turn_buckets).zip(words) {
        let word_buckets = zscore_bucket(&agg.word[*slot]);
        if word_buckets.len() != words.len() {
            return Err(Error::Eval("word buckets disagree with the displayed words".into()));
        }
        rows.push(ReportRow { offset, bucket, words, word_buckets });
    }
    Ok(ReportExample {
        conversation_id: conv.id.clone(),
        turn_index,
        predicted,
        truth: conv.turns[i - 1].label,
        rows,
    })
}

/// Pick an example and analyze it (used by the command surface).
pub fn analyze_from_corpus(
    params: &ParameterSet,
    cfg: &ModelConfig,
    corpus: &Corpus,
    table: &crate::aux_targets::AuxTargetTable,
    vocab: &Vocabulary,
    conversation_id: &str,
    turn_index: u32,
) -> Result<ReportExample> {
    let data = Dataset { corpus, table, vocab };
    analyze_example(params, cfg, &data, conversation_id, turn_index)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Html,
}

pub fn render(example: &ReportExample, format: ReportFormat) -> String {
    match format {
        ReportFormat::Text => render_text(example),
        ReportFormat::Html => render_html(example),
    }
}

/// Plain-text rendering: one line per window talkturn, prefixed with its
/// attention bucket; words carry a bracket suffix when bucketed M or H.
pub fn render_text(example: &ReportExample) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "conversation {} turn {} | predicted={} true={}\n\n",
        example.conversation_id, example.turn_index, example.predicted, example.truth
    ));
    for row in &example.rows {
        out.push_str(&format!("[{}] i-{}:", row.bucket.letter(), row.offset));
        for (word, bucket) in row.words.iter().zip(&row.word_buckets) {
            match bucket {
                Bucket::M | Bucket::H => {
                    out.push_str(&format!(" {}[{}]", word, bucket.letter()))
                }
                _ => out.push_str(&format!(" {}", word)),
            }
        }
        out.push('\n');
    }
    out
}

fn bucket_style(bucket: Bucket) -> (u32, &'static str) {
    match bucket {
        Bucket::N => (12, "0.45"),
        Bucket::L => (14, "0.65"),
        Bucket::M => (17, "0.85"),
        Bucket::H => (21, "1.00"),
    }
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Self-contained HTML rendering: inline styles only, font size and
/// opacity scale with the word's attention bucket.
pub fn render_html(example: &ReportExample) -> String {
    let mut out = String::new();
    out.push_str("<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n");
    out.push_str("<title>conversation analysis</title>\n</head>\n");
    out.push_str("<body style=\"font-family:monospace;background:#ffffff;color:#111111;padding:16px\">\n");
    out.push_str(&format!(
        "<p><b>conversation {}</b> turn {} &#183; predicted={} &#183; true={}</p>\n",
        escape(&example.conversation_id),
        example.turn_index,
        example.predicted,
        example.truth
    ));
    out.push_str("<table style=\"border-collapse:collapse\">\n");
    for row in &example.rows {
        out.push_str("<tr>\n");
        out.push_str(&format!(
            "<td style=\"border:1px solid #333;padding:1px 5px;text-align:center\">{}</td>\n",
            row.bucket.letter()
        ));
        out.push_str(&format!(
            "<td style=\"padding:1px 8px;white-space:nowrap\">i-{}:</td>\n<td style=\"padding:1px 4px\">",
            row.offset
        ));
        for (k, (word, bucket)) in row.words.iter().zip(&row.word_buckets).enumerate() {
            if k > 0 {
                out.push(' ');
            }
            let (size, opacity) = bucket_style(*bucket);
            out.push_str(&format!(
                "<span style=\"font-size:{}px;opacity:{}\">{}</span>",
                size,
                opacity,
                escape(word)
            ));
        }
        out.push_str("</td>\n</tr>\n");
    }
    out.push_str("</table>\n</body>\n</html>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record_flat(word: Vec<Vec<f32>>, talkturn: Vec<f32>) -> AttentionRecord {
        AttentionRecord { word: vec![word], talkturn: vec![talkturn], task: vec![1.0] }
    }

    #[test]
    fn flat_aggregation_is_identity() {
        let rec = record_flat(
            vec![vec![], vec![0.25, 0.75], vec![0.6, 0.4]],
            vec![0.0, 0.3, 0.7],
        );
        let agg = aggregate(&rec).unwrap();
        assert_eq!(agg.talkturn, vec![0.0, 0.3, 0.7]);
        assert_eq!(agg.word[1], vec![0.25, 0.75]);
        assert_eq!(agg.word[2], vec![0.6, 0.4]);
    }

    #[test]
    fn one_hot_task_weight_selects_primary_branch() {
        // two tasks, task weights one-hot on the primary
        let rec = AttentionRecord {
            word: vec![vec![vec![0.9, 0.1]], vec![vec![0.5, 0.5]]],
            talkturn: vec![vec![1.0], vec![0.2]],
            task: vec![1.0, 0.0],
        };
        let agg = aggregate(&rec).unwrap();
        assert_eq!(agg.word[0], vec![0.9, 0.1]);
        assert_eq!(agg.talkturn, vec![1.0]);
    }

    #[test]
    fn two_task_mixture_by_hand() {
        // alpha_c = (0.6, 0.4); talkturn rows (0.8, 0.2) and (0.5, 0.5)
        // mixed: (0.6*0.8 + 0.4*0.5, 0.6*0.2 + 0.4*0.5) = (0.68, 0.32)
        let rec = AttentionRecord {
            word: vec![
                vec![vec![1.0], vec![1.0]],
                vec![vec![1.0], vec![1.0]],
            ],
            talkturn: vec![vec![0.8, 0.2], vec![0.5, 0.5]],
            task: vec![0.6, 0.4],
        };
        let agg = aggregate(&rec).unwrap();
        assert!((agg.talkturn[0] - 0.68).abs() < 1e-6);
        assert!((agg.talkturn[1] - 0.32).abs() < 1e-6);
    }

    #[test]
    fn aggregation_preserves_normalization() {
        let rec = AttentionRecord {
            word: vec![
                vec![vec![0.2, 0.8], vec![0.4, 0.6]],
                vec![vec![0.7, 0.3], vec![0.1, 0.9]],
            ],
            talkturn: vec![vec![0.5, 0.5]; 17],
            task: (0..17).map(|i| (i + 1) as f32 / 153.0).collect(),
        };
        let agg = aggregate(&rec).unwrap();
        let t: f32 = agg.talkturn.iter().sum();
        assert!((t - 1.0).abs() < 1e-5);
        for row in &agg.word {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn zscore_buckets() {
        // uniform -> sigma 0 -> all N
        assert_eq!(zscore_bucket(&[0.25; 4]), vec![Bucket::N; 4]);
        assert_eq!(zscore_bucket(&[1.0]), vec![Bucket::N]);
        // [0.7, 0.1, 0.1, 0.1]: the 0.7 sits at z ~ 1.73 -> M
        let b = zscore_bucket(&[0.7, 0.1, 0.1, 0.1]);
        assert_eq!(b[0], Bucket::M);
        assert_eq!(b[1], Bucket::N);
        assert_eq!(b.len(), 4);
    }

    #[test]
    fn zscore_is_affine_invariant() {
        let w = [0.05f32, 0.3, 0.45, 0.2];
        let scaled: Vec<f32> = w.iter().map(|v| v * 7.0 + 0.123).collect();
        assert_eq!(zscore_bucket(&w), zscore_bucket(&scaled));
    }

    #[test]
    fn bucket_boundaries_are_closed_below() {
        assert_eq!(Bucket::from_z(0.0), Bucket::L);
        assert_eq!(Bucket::from_z(1.0), Bucket::M);
        assert_eq!(Bucket::from_z(2.0), Bucket::H);
        assert_eq!(Bucket::from_z(-0.001), Bucket::N);
    }

    fn sample_example() -> ReportExample {
        ReportExample {
            conversation_id: "conv-0001".into(),
            turn_index: 3,
            predicted: Label::Class(2),
            truth: Label::Class(2),
            rows: vec![
                ReportRow {
                    offset: 2,
                    bucket: Bucket::N,
                    words: vec!["w017".into(), "sadly".into(), "w042".into()],
                    word_buckets: vec![Bucket::N, Bucket::M, Bucket::L],
                },
                ReportRow {
                    offset: 1,
                    bucket: Bucket::L,
                    words: vec!["w099".into()],
                    word_buckets: vec![Bucket::N],
                },
                ReportRow {
                    offset: 0,
                    bucket: Bucket::H,
                    words: vec!["w003".into(), "angrily".into()],
                    word_buckets: vec![Bucket::N, Bucket::H],
                },
            ],
        }
    }

    #[test]
    fn text_rendering_format() {
        let text = render_text(&sample_example());
        assert!(text.starts_with("conversation conv-0001 turn 3 | predicted=2 true=2\n"));
        assert!(text.contains("[N] i-2: w017 sadly[M] w042"));
        assert!(text.contains("[L] i-1: w099"));
        assert!(text.contains("[H] i-0: w003 angrily[H]"));
        // one bucket tag at the start of each talkturn line
        let tagged = text.lines().filter(|l| l.starts_with('[')).count();
        assert_eq!(tagged, 3);
    }

    #[test]
    fn all_n_buckets_add_no_word_markup() {
        let mut ex = sample_example();
        for row in &mut ex.rows {
            row.word_buckets = vec![Bucket::N; row.words.len()];
        }
        let text = render_text(&ex);
        assert!(!text.contains("]["));
        for line in text.lines().filter(|l| l.starts_with('[')) {
            assert!(!line[3..].contains('['), "unexpected markup in {line:?}");
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let ex = sample_example();
        assert_eq!(render_text(&ex), render_text(&ex));
        assert_eq!(render_html(&ex), render_html(&ex));
    }

    #[test]
    fn html_is_self_contained_and_scaled() {
        let html = render_html(&sample_example());
        assert!(html.starts_with("<!DOCTYPE html>"));
        assert!(!html.contains("<script"));
        assert!(!html.contains("href="));
        assert!(html.contains("font-size:21px"));
        assert!(html.contains("opacity:0.45"));
        assert!(html.contains("predicted=2"));
    }
}
