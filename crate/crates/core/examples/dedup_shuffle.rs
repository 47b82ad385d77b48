//! External-memory dedup and shuffle of line shards under a small memory
//! budget.
//!
//! cargo run --release --example dedup_shuffle

use std::io::Write;

use gur::corpus::{dedup_and_shuffle, ShuffleOptions};

fn main() -> gur::Result<()> {
    let dir = tempfile::tempdir().expect("tempdir");
    let mut shards = Vec::new();
    for s in 0..4 {
        let path = dir.path().join(format!("shard{s}.jsonl"));
        let mut f = std::fs::File::create(&path).expect("create shard");
        for i in 0..50_000 {
            // Neighbouring shards overlap by half.
            writeln!(f, "{{\"line\": {}}}", s * 25_000 + i).expect("write");
        }
        shards.push(path);
    }
    let out = dir.path().join("out.jsonl");
    let opts = ShuffleOptions {
        seed: 3,
        memory_budget: 1 << 20,
        ..ShuffleOptions::default()
    };
    let stats = dedup_and_shuffle(&shards, &out, &opts)?;
    println!(
        "{} lines in, {} distinct out, {} sorted runs",
        stats.records_in, stats.records_out, stats.runs
    );
    let text = std::fs::read_to_string(&out).expect("read output");
    for line in text.lines().take(5) {
        println!("  {line}");
    }
    let again = dir.path().join("again.jsonl");
    dedup_and_shuffle(&shards, &again, &opts)?;
    println!(
        "same seed, same bytes: {}",
        std::fs::read(&again).expect("read") == text.as_bytes()
    );
    Ok(())
}
