// Dataset-scale dry run: a synthetic corpus with R8-sized node counts,
// a few epochs of the default config, extrapolated to 300 epochs.
use duat_core::corpus::{load_corpus_from_strings, CleaningRules};
use duat_core::graph::{build_graph, collect_window_stats};
use duat_core::model::Features;
use duat_core::synthetic::RawCorpus;
use duat_core::train::{train, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn main() {
    let n_docs = 7674usize;
    let vocab = 7700usize;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut texts = String::new();
    let mut meta = String::new();
    for id in 0..n_docs {
        let class = id % 8;
        let len = rng.gen_range(40..80);
        let doc: Vec<String> = (0..len)
            .map(|_| {
                // class-skewed zipf-ish draw
                let base = rng.gen_range(0..vocab / 2);
                let w = if rng.gen_bool(0.5) {
                    (base + class * 481) % vocab
                } else {
                    rng.gen_range(0..vocab)
                };
                format!("t{w}")
            })
            .collect();
        texts.push_str(&doc.join(" "));
        texts.push('\n');
        let split = if id % 10 < 7 { "train" } else { "test" };
        meta.push_str(&format!("{id}\t{split}\tc{class}\n"));
    }
    let raw = RawCorpus { texts, meta };

    let t0 = Instant::now();
    let corpus =
        load_corpus_from_strings(&raw.texts, &raw.meta, &CleaningRules::default(), 5).unwrap();
    println!(
        "corpus: {} docs, {} words ({:.1}s)",
        corpus.n_docs(),
        corpus.vocabulary.len(),
        t0.elapsed().as_secs_f64()
    );

    let t0 = Instant::now();
    let stats = collect_window_stats(&corpus, 20);
    println!(
        "stats: {} windows ({:.1}s)",
        stats.total_windows(),
        t0.elapsed().as_secs_f64()
    );
    let t0 = Instant::now();
    let graph = build_graph(&corpus, &stats);
    println!(
        "graph: {} nodes, {} edges ({:.1}s)",
        graph.n_nodes(),
        graph.edge_count(),
        t0.elapsed().as_secs_f64()
    );

    let features = Features::OneHot { nodes: graph.n_nodes() };
    let config = TrainConfig { epochs: 3, ..TrainConfig::default() };
    let t0 = Instant::now();
    let outcome = train(&config, &corpus, &graph, &features).unwrap();
    let per_epoch = t0.elapsed().as_secs_f64() / 3.0;
    let last = outcome.history.epochs.last().unwrap();
    println!(
        "3 epochs: {:.1}s/epoch -> {:.1} min for 300; epoch-3 train_acc {:.3} test_acc {:.3}",
        per_epoch,
        per_epoch * 300.0 / 60.0,
        last.train_acc,
        last.test_acc
    );
}
