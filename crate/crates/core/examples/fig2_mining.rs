//! Mines the four-sentence Tom and Jerry document and shows which pairs the
//! LCS filter keeps.
//!
//! cargo run --example fig2_mining

use gur::corpus::{normalize_str, Document};
use gur::lcs::longest_common_substring;
use gur::miner::{mine_pairs, MinerConfig};

fn main() {
    let doc = Document::from_text(
        "fig2",
        Some("Tom and Jerry".into()),
        "Spike is chasing Tom. Spike is chasing Jerry. Tom is chasing Jerry. Jerry is chasing Tom.",
    )
    .expect("document has sentences");

    println!("all candidate pairs:");
    for (i, a) in doc.sentences.iter().enumerate() {
        for b in &doc.sentences[i + 1..] {
            let r = longest_common_substring(&normalize_str(a), &normalize_str(b));
            println!("  {a:<24} {b:<24} lcs={:?} weight={}", r.substring.trim(), r.weight);
        }
    }

    let cfg = MinerConfig::default();
    println!("\naccepted (short threshold {}):", cfg.bucket_spec.short_lcs_threshold);
    for p in mine_pairs(&doc, &cfg) {
        println!("  {} | {}  (lcs {:?}, weight {})", p.s1, p.s2, p.lcs, p.weight);
    }
}
