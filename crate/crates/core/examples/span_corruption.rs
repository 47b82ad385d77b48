//! Span corruption of one sentence: sentinel-bearing encoder input, decoder
//! target, and the reconstruction that inverts it.
//!
//! cargo run --example span_corruption

use gur::masking::{corrupt, reconstruct, sample_layout, MaskingConfig};
use gur::model::{Vocab, DEFAULT_SENTINELS, EOS};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> gur::Result<()> {
    let text = "Thank you for inviting me to your party last week.";
    let vocab = Vocab::build([text], DEFAULT_SENTINELS);
    let tokens = vocab.tokenize(text);
    let cfg = MaskingConfig::default();
    let dist = cfg.distribution()?;
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = sample_layout(tokens.len(), cfg.rate, &dist, &mut rng)?;
        let ex = corrupt(&tokens, &layout, vocab.sentinels(), EOS)?;
        println!(
            "seed {seed}: {} of {} chars masked in {} spans",
            layout.masked_tokens(),
            tokens.len(),
            layout.spans.len()
        );
        println!("  input : {}", vocab.detokenize(&ex.encoder_input));
        println!("  target: {}", vocab.detokenize(&ex.decoder_target));
        let back = reconstruct(&ex, vocab.sentinels(), EOS)?;
        assert_eq!(back, tokens);
    }
    println!("every reconstruction matched the original");
    Ok(())
}
