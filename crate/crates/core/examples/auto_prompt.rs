//! Keyword-preserving auto prompts: mask a non-keyword span of a query with a
//! sentinel, then fill it from a generated continuation.
//!
//! cargo run --example auto_prompt

use std::collections::BTreeSet;

use gur::eval::{fill_prompt, make_auto_prompt};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let keywords: BTreeSet<String> = ["separator".to_string(), "北京".to_string()].into();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for query in ["what brand of separator is good", "北京的天气", "separator"] {
        let mut seen = BTreeSet::new();
        for _ in 0..20 {
            seen.insert(make_auto_prompt(query, &keywords, &mut rng).prompt);
        }
        println!("{query:?} ->");
        for p in &seen {
            println!("    {p}");
        }
    }
    let filled = fill_prompt("what brand of separator <S0>", "<S0> works best");
    println!("fill: {filled}");
}
