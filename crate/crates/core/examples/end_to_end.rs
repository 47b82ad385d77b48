//! The directory pipeline in one process: synthetic corpus, mine,
//! build-dataset, train, then generate from the checkpoint.
//!
//! cargo run --release --example end_to_end -- [steps]

use gur::config::RunConfig;
use gur::model::Gur;
use gur::objectives::Mode;
use gur::pipeline::{build_dataset, mine, train_to_dir, TRAIN_LOG};
use gur::synthetic::SyntheticSpec;

fn main() -> gur::Result<()> {
    let steps = std::env::args().nth(1).map_or(200, |s| s.parse().expect("steps"));
    let root = tempfile::tempdir().expect("tempdir");
    let p = |n: &str| root.path().join(n);
    let bench = SyntheticSpec::small().try_generate(5)?;
    bench.save(&p("bench"))?;

    let mut cfg = RunConfig::default();
    cfg.seed = 5;
    cfg.miner.document2title = true;
    cfg.train.steps = steps;
    cfg.train.learning_rate = 1e-3;
    cfg.train.short_batch_size = 32;
    cfg.train.document2title_every = 4;
    cfg.validate()?;

    let mined = mine(&p("bench").join("corpus.jsonl"), &p("pairs"), &cfg)?;
    println!(
        "mined {} short and {} long pairs from {} documents",
        mined.short_pairs, mined.long_pairs, mined.documents
    );
    let ds = build_dataset(&p("pairs"), &p("data"), cfg.seed, 8 << 20)?;
    println!(
        "dataset: {} short, {} long, {} document2title",
        ds.short_pairs, ds.long_pairs, ds.document2title
    );
    let summary = train_to_dir(&cfg, &p("data"), &p("ckpt"), Mode::Full)?;
    let first = &summary.records[0];
    let last = summary.records.last().expect("records");
    println!(
        "loss {:.3} -> {:.3} over {} steps; log at {}",
        first.total_loss,
        last.total_loss,
        summary.records.len(),
        TRAIN_LOG
    );

    let model = Gur::<f32>::load(&p("ckpt"))?;
    let doc = &bench.train_docs[0];
    let prompt = format!("document2title: {}", doc.sentences.join(" "));
    println!(
        "title for {:?}: {:?}",
        doc.title.as_deref().unwrap_or(""),
        model.generate_greedy(&prompt, 24)?
    );
    let mut words: Vec<&str> = doc.sentences[0].split(' ').collect();
    words[1] = "<S0>";
    let masked = words.join(" ");
    println!("fill {masked:?}: {:?}", model.generate_greedy(&masked, 12)?);
    Ok(())
}
