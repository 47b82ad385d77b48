//! End-to-end ablation runs on the synthetic benchmark: mine, train one
//! model per mode, then score retrieval, zero-shot accuracy and LM loss.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::eval::{accuracy, dense_search, mrr_at_k, recall_at_k, zero_shot_classify};
use crate::masking::CorruptedExample;
use crate::miner::{mine_corpus, MinerConfig};
use crate::model::{Gur, ModelConfig};
use crate::objectives::Mode;
use crate::synthetic::{SyntheticBenchmark, SyntheticSpec};
use crate::trainer::{eval_lm_loss, make_lm_eval_set, train, TrainData, TrainSetup};

#[derive(Debug, Clone)]
pub struct AblationConfig {
    pub synthetic: SyntheticSpec,
    pub miner: MinerConfig,
    pub model: ModelConfig,
    pub setup: TrainSetup,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeReport {
    pub mode: Mode,
    pub recall_at_10: f64,
    pub mrr_at_10: f64,
    pub zero_shot_accuracy: f64,
    pub lm_loss: f64,
    pub first_total_loss: f64,
    pub last_total_loss: f64,
    pub train_seconds: f64,
}

/// Benchmark, mined training data and the fixed LM eval set shared by every
/// mode of one ablation.
pub struct Prepared {
    pub bench: SyntheticBenchmark,
    pub data: TrainData,
    pub lm_eval: Vec<CorruptedExample>,
}

pub fn prepare(cfg: &AblationConfig) -> Result<Prepared> {
    let bench = cfg.synthetic.try_generate(cfg.seed)?;
    let pairs = mine_corpus(&bench.train_docs, &cfg.miner);
    let data = TrainData::from_pairs(pairs, &cfg.setup.buckets);
    let vocab = data.vocab();
    let lm_eval = make_lm_eval_set(
        &vocab,
        &bench.lm_eval,
        &cfg.setup.masking,
        cfg.setup.buckets.short_seq_len,
        cfg.seed ^ 0x1e,
    )?;
    Ok(Prepared { bench, data, lm_eval })
}

pub fn run_mode(cfg: &AblationConfig, prep: &Prepared, mode: Mode) -> Result<(ModeReport, Gur<f32>)> {
    let mut setup = cfg.setup.clone();
    setup.train.mode = mode;
    let mut model = Gur::<f32>::new(cfg.model.clone(), prep.data.vocab(), cfg.seed)?;
    let start = Instant::now();
    let summary = train(&mut model, &prep.data, &setup, |_| Ok(()))?;
    let train_seconds = start.elapsed().as_secs_f64();
    let ranking = dense_search(&model, &prep.bench.retrieval, 10)?;
    let qrels = &prep.bench.retrieval.qrels;
    let texts: Vec<&str> = prep.bench.zero_shot_samples.iter().map(|s| s.text.as_str()).collect();
    let gold: Vec<String> = prep.bench.zero_shot_samples.iter().map(|s| s.label.clone()).collect();
    let predicted = zero_shot_classify(&model, &texts, &prep.bench.labels)?;
    let window = |recs: &[crate::trainer::TrainLogRecord]| {
        recs.iter().map(|r| r.total_loss).sum::<f64>() / recs.len().max(1) as f64
    };
    let n = summary.records.len();
    let w = 20.min(n);
    let report = ModeReport {
        mode,
        recall_at_10: recall_at_k(&ranking, qrels, 10)?.value,
        mrr_at_10: mrr_at_k(&ranking, qrels, 10)?.value,
        zero_shot_accuracy: accuracy(&predicted, &gold),
        lm_loss: eval_lm_loss(&model, &prep.lm_eval)?,
        first_total_loss: window(&summary.records[..w]),
        last_total_loss: window(&summary.records[n - w..]),
        train_seconds,
    };
    Ok((report, model))
}
