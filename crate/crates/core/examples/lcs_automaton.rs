//! Suffix automaton LCS against the quadratic DP on mixed Latin and CJK text.
//!
//! cargo run --release --example lcs_automaton

use std::time::Instant;

use gur::lcs::{brute_force_lcs, lcs_weight, SuffixAutomaton};

fn main() -> gur::Result<()> {
    let a = "北京的天气怎么样 what is the weather in beijing today";
    let b = "today the weather in 北京的天气 is sunny";
    let sam = SuffixAutomaton::new(a);
    println!(
        "automaton over {} chars: {} states, {} transitions",
        a.chars().count(),
        sam.num_states(),
        sam.num_transitions()
    );
    let fast = sam.lcs_with(b);
    let slow = brute_force_lcs(a, b)?;
    println!(
        "automaton: {:?} (len {}, weight {})",
        fast.substring, fast.char_length, fast.weight
    );
    println!(
        "dp:        {:?} (len {}, weight {})",
        slow.substring, slow.char_length, slow.weight
    );
    println!(
        "weight of \"北京\" = {}, of \"ab\" = {}",
        lcs_weight("北京"),
        lcs_weight("ab")
    );

    let long_a: String = (0..4000).map(|i| char::from(b'a' + (i * 7 % 5) as u8)).collect();
    let long_b: String = (0..4000).map(|i| char::from(b'a' + (i * 3 % 5) as u8)).collect();
    let t = Instant::now();
    let r = SuffixAutomaton::new(&long_a).lcs_with(&long_b);
    println!("4000 x 4000 chars: lcs length {} in {:?}", r.char_length, t.elapsed());
    Ok(())
}
