//! BM25 against an untrained and a briefly trained dense encoder on the
//! small synthetic retrieval task.
//!
//! cargo run --release --example bm25_vs_dense -- [steps]

use gur::corpus::BucketSpec;
use gur::eval::{dense_search, mrr_at_k, recall_at_k, Bm25Index};
use gur::masking::MaskingConfig;
use gur::miner::{mine_corpus, MinerConfig};
use gur::model::{Gur, ModelConfig};
use gur::objectives::LossWeights;
use gur::synthetic::SyntheticSpec;
use gur::trainer::{train, TrainConfig, TrainData, TrainSetup};

fn main() -> gur::Result<()> {
    let steps = std::env::args().nth(1).map_or(300, |s| s.parse().expect("steps"));
    let bench = SyntheticSpec::small().try_generate(3)?;
    let task = &bench.retrieval;
    let report = |name: &str, ranking: &gur::eval::Ranking| -> gur::Result<()> {
        println!(
            "{name:<14} recall@10 {:.3}  mrr@10 {:.3}",
            recall_at_k(ranking, &task.qrels, 10)?.value,
            mrr_at_k(ranking, &task.qrels, 10)?.value
        );
        Ok(())
    };
    report("bm25", &Bm25Index::from_task(task).rank_task(task, 10))?;

    let buckets = BucketSpec::default();
    let data = TrainData::from_pairs(mine_corpus(&bench.train_docs, &MinerConfig::default()), &buckets);
    let mut model = Gur::<f32>::new(ModelConfig::default(), data.vocab(), 3)?;
    report("dense@init", &dense_search(&model, task, 10)?)?;
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
    report(&format!("dense@{steps}"), &dense_search(&model, task, 10)?)?;
    Ok(())
}
