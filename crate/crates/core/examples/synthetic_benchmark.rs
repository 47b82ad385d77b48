//! Generates the synthetic corpus plus retrieval and zero-shot tasks and
//! writes them to a directory.
//!
//! cargo run --example synthetic_benchmark -- /tmp/gur-bench

use gur::synthetic::SyntheticSpec;

fn main() -> gur::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "gur-bench".into());
    let spec = SyntheticSpec::default();
    let bench = spec.try_generate(7)?;
    bench.save(std::path::Path::new(&out))?;
    println!(
        "wrote {out}: {} training documents, {} queries over {} docs, {} zero-shot samples in {} classes",
        bench.train_docs.len(),
        bench.retrieval.queries.len(),
        bench.retrieval.corpus.len(),
        bench.zero_shot_samples.len(),
        bench.labels.len()
    );
    let d = &bench.train_docs[0];
    println!("\nfirst document ({}):", d.title.as_deref().unwrap_or("untitled"));
    for s in &d.sentences {
        println!("  {s}");
    }
    let (qid, q) = &bench.retrieval.queries[0];
    println!("\nquery {qid}: {q}");
    for d in &bench.retrieval.qrels[qid] {
        let text = &bench.retrieval.corpus.iter().find(|(id, _)| id == d).expect("doc").1;
        println!("  relevant {d}: {text}");
    }
    Ok(())
}
