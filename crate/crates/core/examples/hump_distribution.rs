//! The hump-shaped span-length law next to a truncated geometric, with an
//! empirical histogram.
//!
//! cargo run --release --example hump_distribution

use gur::masking::{geometric_pmf, hump_geometric_pmf, HumpGeometricParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> gur::Result<()> {
    let params = HumpGeometricParams::default();
    let hump = hump_geometric_pmf(&params)?;
    let geo = geometric_pmf(0.2, params.lower, params.upper)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let draws = 200_000;
    let mut counts = vec![0usize; hump.upper() + 1];
    for _ in 0..draws {
        counts[hump.sample(&mut rng)] += 1;
    }
    println!("len   hump   empirical  geometric");
    for k in hump.lower()..=hump.upper() {
        let emp = counts[k] as f64 / draws as f64;
        println!(
            "{k:>3} {:>7.4} {:>10.4} {:>10.4}  {}",
            hump.prob(k),
            emp,
            geo.prob(k),
            "#".repeat((hump.prob(k) * 100.0) as usize)
        );
    }
    println!("mean: hump {:.4}, geometric {:.4}", hump.mean(), geo.mean());
    Ok(())
}
