//! Nearest-label zero-shot classification with a freshly trained encoder.
//!
//! cargo run --release --example zero_shot -- [steps]

use gur::corpus::BucketSpec;
use gur::eval::{accuracy, zero_shot_classify};
use gur::masking::MaskingConfig;
use gur::miner::{mine_corpus, MinerConfig};
use gur::model::{Gur, ModelConfig};
use gur::objectives::LossWeights;
use gur::synthetic::SyntheticSpec;
use gur::trainer::{train, TrainConfig, TrainData, TrainSetup};

fn main() -> gur::Result<()> {
    let steps = std::env::args().nth(1).map_or(300, |s| s.parse().expect("steps"));
    let bench = SyntheticSpec::small().try_generate(4)?;
    let buckets = BucketSpec::default();
    let data = TrainData::from_pairs(mine_corpus(&bench.train_docs, &MinerConfig::default()), &buckets);
    let mut model = Gur::<f32>::new(ModelConfig::default(), data.vocab(), 4)?;
    let texts: Vec<&str> = bench.zero_shot_samples.iter().map(|s| s.text.as_str()).collect();
    let gold: Vec<String> = bench.zero_shot_samples.iter().map(|s| s.label.clone()).collect();
    let before = accuracy(&zero_shot_classify(&model, &texts, &bench.labels)?, &gold);
    let setup = TrainSetup {
        train: TrainConfig {
            learning_rate: 1e-3,
            steps,
            short_batch_size: 32,
            ..TrainConfig::default()
        },
        loss: LossWeights::default(),
        masking: MaskingConfig::default(),
        buckets,
    };
    train(&mut model, &data, &setup, |_| Ok(()))?;
    let predicted = zero_shot_classify(&model, &texts, &bench.labels)?;
    println!(
        "{} classes, chance {:.3}",
        bench.labels.len(),
        1.0 / bench.labels.len() as f64
    );
    println!(
        "accuracy before training {before:.3}, after {steps} steps {:.3}",
        accuracy(&predicted, &gold)
    );
    for (s, p) in bench.zero_shot_samples.iter().zip(&predicted).take(4) {
        println!("  {:<40} gold {} predicted {}", s.text, s.label, p);
    }
    Ok(())
}
