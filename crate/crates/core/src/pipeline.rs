//! Directory-level stages: mine a corpus into pair shards, build a training
//! dataset from shards, train a checkpoint from a dataset.

use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::corpus::{dedup_and_shuffle, ShuffleOptions};
use crate::corpus::{read_documents, read_jsonl, write_jsonl, Bucket, BucketSpec};
use crate::error::{GurError, Result};
use crate::miner::{make_document2title_example, mine_corpus, pair_shard_name, write_pair_shards};
use crate::model::Gur;
use crate::objectives::Mode;
use crate::trainer::{
    train, train_file_name, DatasetManifest, TrainData, TrainLogRecord, TrainSummary, D2T_FILE, DATASET_MANIFEST,
};

pub const MINE_MANIFEST: &str = "mine.json";
pub const TRAIN_LOG: &str = "train_log.jsonl";

pub fn d2t_shard_name(shard: usize) -> String {
    format!("d2t.{shard}.jsonl")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MineManifest {
    pub documents: usize,
    pub short_pairs: usize,
    pub long_pairs: usize,
    pub document2title: usize,
    pub lcs_filter: bool,
    pub bucket_spec: BucketSpec,
    pub seed: u64,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).map_err(|e| GurError::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| GurError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| GurError::Config(format!("{}: {e}", path.display())))
}

/// Mines `corpus` (document JSONL) into `out/pairs.<bucket>.0.jsonl`.
pub fn mine(corpus: &Path, out: &Path, cfg: &RunConfig) -> Result<MineManifest> {
    let docs = read_documents(corpus)?;
    std::fs::create_dir_all(out).map_err(|e| GurError::io(out, e))?;
    let miner = cfg.miner_config();
    let pairs = mine_corpus(&docs, &miner);
    write_pair_shards(&pairs, &miner.bucket_spec, out, 0)?;
    let mut d2t = Vec::new();
    if cfg.miner.document2title {
        d2t = docs
            .iter()
            .filter_map(|d| make_document2title_example(d, cfg.miner.document2title_max_chars))
            .collect();
        if !d2t.is_empty() {
            write_jsonl(&out.join(d2t_shard_name(0)), &d2t)?;
        }
    }
    let count = |b: Bucket| pairs.iter().filter(|p| p.bucket(&miner.bucket_spec) == b).count();
    let manifest = MineManifest {
        documents: docs.len(),
        short_pairs: count(Bucket::Short),
        long_pairs: count(Bucket::Long),
        document2title: d2t.len(),
        lcs_filter: miner.lcs_filter,
        bucket_spec: miner.bucket_spec,
        seed: cfg.seed,
    };
    write_json(&out.join(MINE_MANIFEST), &manifest)?;
    info!(
        "mined {} documents: {} short, {} long pairs",
        manifest.documents, manifest.short_pairs, manifest.long_pairs
    );
    Ok(manifest)
}

fn shards_with_prefix(dir: &Path, prefix: &str) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| GurError::io(dir, e))? {
        let path = entry.map_err(|e| GurError::io(dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.starts_with(prefix) && name.ends_with(".jsonl") {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn count_lines(path: &Path) -> Result<usize> {
    let text = std::fs::read(path).map_err(|e| GurError::io(path, e))?;
    Ok(text.iter().filter(|&&b| b == b'\n').count())
}

/// Dedups and shuffles every bucket's shards in `pairs_dir` into
/// `out/train.<bucket>.jsonl` and writes `out/dataset.json`.
pub fn build_dataset(pairs_dir: &Path, out: &Path, seed: u64, memory_budget: usize) -> Result<DatasetManifest> {
    let mined: MineManifest = read_json(&pairs_dir.join(MINE_MANIFEST))?;
    std::fs::create_dir_all(out).map_err(|e| GurError::io(out, e))?;
    let opts = |salt: u64| ShuffleOptions {
        seed: seed ^ salt,
        memory_budget,
        ..ShuffleOptions::default()
    };
    let mut counts = [0usize; 2];
    for (i, bucket) in Bucket::ALL.into_iter().enumerate() {
        let prefix = pair_shard_name(bucket, 0);
        let prefix = prefix.trim_end_matches("0.jsonl");
        let shards = shards_with_prefix(pairs_dir, prefix)?;
        let path = out.join(train_file_name(bucket));
        if shards.is_empty() {
            if path.exists() {
                std::fs::remove_file(&path).map_err(|e| GurError::io(&path, e))?;
            }
            continue;
        }
        counts[i] = dedup_and_shuffle(&shards, &path, &opts(i as u64 + 1))?.records_out;
    }
    let d2t_shards = shards_with_prefix(pairs_dir, "d2t.")?;
    let d2t_path = out.join(D2T_FILE);
    let document2title = if d2t_shards.is_empty() {
        0
    } else {
        dedup_and_shuffle(&d2t_shards, &d2t_path, &opts(0xd2))?;
        count_lines(&d2t_path)?
    };
    let manifest = DatasetManifest {
        lcs_filter: mined.lcs_filter,
        bucket_spec: mined.bucket_spec,
        short_pairs: counts[0],
        long_pairs: counts[1],
        document2title,
        seed,
    };
    write_json(&out.join(DATASET_MANIFEST), &manifest)?;
    Ok(manifest)
}

/// Trains from a dataset directory and writes the checkpoint plus
/// `train_log.jsonl` into `out`.
pub fn train_to_dir(cfg: &RunConfig, data_dir: &Path, out: &Path, mode: Mode) -> Result<TrainSummary> {
    let (data, manifest) = TrainData::load(data_dir)?;
    let mut setup = cfg.train_setup();
    setup.train.mode = mode;
    if manifest.lcs_filter != setup.train.lcs_filter {
        return Err(GurError::ConfigMismatch(format!(
            "dataset was mined with lcs_filter={} but the run expects lcs_filter={}",
            manifest.lcs_filter, setup.train.lcs_filter
        )));
    }
    if manifest.bucket_spec != setup.buckets {
        return Err(GurError::ConfigMismatch(
            "dataset bucket spec differs from the run config".into(),
        ));
    }
    std::fs::create_dir_all(out).map_err(|e| GurError::io(out, e))?;
    let mut model = Gur::<f32>::new(cfg.model.clone(), data.vocab(), cfg.seed)?;
    let log_path = out.join(TRAIN_LOG);
    let file = std::fs::File::create(&log_path).map_err(|e| GurError::io(&log_path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let summary = train(&mut model, &data, &setup, |rec: &TrainLogRecord| {
        use std::io::Write;
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n").map_err(|e| GurError::io(&log_path, e))
    })?;
    {
        use std::io::Write;
        w.flush().map_err(|e| GurError::io(&log_path, e))?;
    }
    model.save(out)?;
    Ok(summary)
}

pub fn read_train_log(path: &Path) -> Result<Vec<TrainLogRecord>> {
    read_jsonl(path)
}
