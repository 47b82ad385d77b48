//! Trains one model per objective mode on the synthetic benchmark and prints
//! retrieval, zero-shot and LM numbers side by side.
//!
//! cargo run --release --example ablation_training -- [steps]

use gur::ablation::{prepare, run_mode, AblationConfig};
use gur::corpus::BucketSpec;
use gur::masking::MaskingConfig;
use gur::miner::MinerConfig;
use gur::model::ModelConfig;
use gur::objectives::{LossWeights, Mode};
use gur::synthetic::SyntheticSpec;
use gur::trainer::{TrainConfig, TrainSetup};

fn main() -> gur::Result<()> {
    env_logger::init();
    let steps = std::env::args().nth(1).map_or(2000, |s| s.parse().expect("steps"));
    let cfg = AblationConfig {
        synthetic: SyntheticSpec::default(),
        miner: MinerConfig::default(),
        model: ModelConfig::default(),
        setup: TrainSetup {
            train: TrainConfig {
                learning_rate: 1e-3,
                steps,
                short_batch_size: 32,
                ..TrainConfig::default()
            },
            loss: LossWeights::default(),
            masking: MaskingConfig::default(),
            buckets: BucketSpec::default(),
        },
        seed: 7,
    };
    let prep = prepare(&cfg)?;
    println!(
        "{} short pairs, {} long pairs, vocab {}",
        prep.data.short.len(),
        prep.data.long.len(),
        prep.data.vocab().len()
    );
    println!("mode      recall@10  mrr@10  zero-shot  lm_loss  loss first->last  secs");
    for mode in [Mode::Full, Mode::LmOnly, Mode::ClOnly] {
        let (r, _) = run_mode(&cfg, &prep, mode)?;
        println!(
            "{:<9} {:>9.3} {:>7.3} {:>10.3} {:>8.4} {:>8.3}->{:<7.3} {:>5.0}",
            mode.name(),
            r.recall_at_10,
            r.mrr_at_10,
            r.zero_shot_accuracy,
            r.lm_loss,
            r.first_total_loss,
            r.last_total_loss,
            r.train_seconds
        );
    }
    Ok(())
}
