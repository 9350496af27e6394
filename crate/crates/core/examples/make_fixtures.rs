//! Regenerates the golden report fixtures under tests/fixtures/.

use convmtl::aux_targets::build_aux_table;
use convmtl::corpus::{split_partitions, Partition, TaskKind, Vocabulary};
use convmtl::model::{build_model, default_aux_kinds, ModelConfig, Variant};
use convmtl::report::{analyze_example, render_html, render_text};
use convmtl::synthetic::{default_partition_manifest, generate_synthetic, SyntheticConfig};
use convmtl::training::{train, Dataset, TrainOptions};
use convmtl::weighting::{allocate_weights, mi_vector, Scheme};
use rand::SeedableRng;

fn main() {
    let corpus = generate_synthetic(&SyntheticConfig {
        n_conversations: 12,
        turns_per_conversation: 8,
        task_kind: TaskKind::classification(),
        seed: 2024,
    })
    .unwrap();
    let manifest = default_partition_manifest(&corpus);
    let corpus = split_partitions(corpus, &manifest).unwrap();
    let table = build_aux_table(&corpus).unwrap();
    let vocab = Vocabulary::build(&corpus).unwrap();
    let data = Dataset { corpus: &corpus, table: &table, vocab: &vocab };
    let mi = mi_vector(&corpus, &table, 3).unwrap();

    let cfg = ModelConfig {
        variant: Variant::Rock,
        p_units: 8,
        a_units: 1,
        capacity: 9,
        context_len: 3,
        word_cap: 12,
        embed_dim: 16,
        fusion_dim: 8,
        gru_dropout: 0.05,
        recurrent_dropout: 0.05,
        fine_tune_embeddings: true,
        task_kind: TaskKind::classification(),
        aux_kinds: default_aux_kinds(&TaskKind::classification()),
    };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let weights = allocate_weights(0.8, &mi, Scheme::LinearMi, &mut rng).unwrap();
    let init = build_model(&cfg, &vocab, None, 3).unwrap();
    let opts = TrainOptions {
        max_epochs: 3,
        batch_size: 16,
        learning_rate: 0.01,
        l2: 0.0,
        seed: 3,
    };
    let trained = train(&cfg, init, &data, &weights, &opts, |_, _| false).unwrap();

    let conv = corpus
        .conversations
        .iter()
        .find(|c| c.partition == Some(Partition::Test))
        .unwrap();
    let example = analyze_example(&trained.params, &cfg, &data, &conv.id, 5).unwrap();
    let text = render_text(&example);
    let html = render_html(&example);
    std::fs::write("crates/core/tests/fixtures/report.txt", &text).unwrap();
    std::fs::write("crates/core/tests/fixtures/report.html", &html).unwrap();
    print!("{text}");
    println!("--- wrote fixtures ({} bytes text, {} bytes html)", text.len(), html.len());
}
