//! Relevant-pair mining within a document by longest common substring.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{normalize_str, write_jsonl, Bucket, BucketSpec, Document};
use crate::error::Result;
use crate::lcs::{lcs_weight, SuffixAutomaton};

/// Two related sentences from one document. `s1 <= s2` lexicographically so
/// that `(a, b)` and `(b, a)` serialize to the same bytes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentencePair {
    pub s1: String,
    pub s2: String,
    pub lcs: String,
    pub weight: u32,
    pub doc_id: String,
}

impl SentencePair {
    pub fn new(a: &str, b: &str, lcs: String, doc_id: &str) -> Self {
        let (s1, s2) = if a <= b { (a, b) } else { (b, a) };
        SentencePair {
            s1: s1.to_string(),
            s2: s2.to_string(),
            weight: lcs_weight(&lcs),
            lcs,
            doc_id: doc_id.to_string(),
        }
    }

    pub fn bucket(&self, spec: &BucketSpec) -> Bucket {
        spec.bucket_for(self.s1.chars().count(), self.s2.chars().count())
    }

    /// Re-checks the record invariants against the raw sentences.
    pub fn is_consistent(&self) -> bool {
        self.s1 != self.s2
            && self.weight == lcs_weight(&self.lcs)
            && normalize_str(&self.s1).contains(&self.lcs)
            && normalize_str(&self.s2).contains(&self.lcs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MineMode {
    #[serde(alias = "all_pairs")]
    AllPairs,
    #[serde(alias = "title_content")]
    TitleContent,
}

impl std::str::FromStr for MineMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "all-pairs" | "all_pairs" => Ok(MineMode::AllPairs),
            "title-content" | "title_content" => Ok(MineMode::TitleContent),
            _ => Err(format!("unknown mine mode {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MinerConfig {
    pub mode: MineMode,
    /// `false` reproduces the no-LCS-filter ablation.
    pub lcs_filter: bool,
    pub unutilized_only: bool,
    pub bucket_spec: BucketSpec,
}

impl Default for MinerConfig {
    fn default() -> Self {
        MinerConfig {
            mode: MineMode::AllPairs,
            lcs_filter: true,
            unutilized_only: true,
            bucket_spec: BucketSpec::default(),
        }
    }
}

fn lcs_of(sam: &SuffixAutomaton, other_norm: &str) -> String {
    sam.lcs_with(other_norm).substring.trim().to_string()
}

fn accept(cfg: &MinerConfig, a: &str, b: &str, weight: u32) -> bool {
    !cfg.lcs_filter || cfg.bucket_spec.assign(a, b, weight).is_some()
}

/// Candidate pairs of one document that pass the configured filter, in scan
/// order.
pub fn mine_pairs(doc: &Document, cfg: &MinerConfig) -> Vec<SentencePair> {
    let norms: Vec<String> = doc.sentences.iter().map(|s| normalize_str(s)).collect();
    let mut out = Vec::new();
    match cfg.mode {
        MineMode::AllPairs => {
            let mut used = vec![false; doc.sentences.len()];
            for i in 0..doc.sentences.len() {
                if cfg.unutilized_only && used[i] {
                    continue;
                }
                let sam = SuffixAutomaton::new(&norms[i]);
                for j in i + 1..doc.sentences.len() {
                    if cfg.unutilized_only && (used[i] || used[j]) {
                        continue;
                    }
                    let (a, b) = (&doc.sentences[i], &doc.sentences[j]);
                    if a == b {
                        continue;
                    }
                    let lcs = lcs_of(&sam, &norms[j]);
                    if accept(cfg, a, b, lcs_weight(&lcs)) {
                        out.push(SentencePair::new(a, b, lcs, &doc.id));
                        used[i] = true;
                        used[j] = true;
                    }
                }
            }
        }
        MineMode::TitleContent => {
            let Some(title) = &doc.title else {
                return out;
            };
            let sam = SuffixAutomaton::new(&normalize_str(title));
            for (s, norm) in doc.sentences.iter().zip(&norms) {
                if s == title {
                    continue;
                }
                let lcs = lcs_of(&sam, norm);
                if accept(cfg, title, s, lcs_weight(&lcs)) {
                    out.push(SentencePair::new(title, s, lcs, &doc.id));
                }
            }
        }
    }
    out
}

/// Mines every document in parallel; output order follows document order.
pub fn mine_corpus(docs: &[Document], cfg: &MinerConfig) -> Vec<SentencePair> {
    docs.par_iter()
        .map(|d| mine_pairs(d, cfg))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect()
}

pub const DOCUMENT2TITLE_PREFIX: &str = "document2title:";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptExample {
    pub prompt: String,
    pub target: String,
}

/// Title-generation example, or `None` for untitled documents.
pub fn make_document2title_example(doc: &Document, max_content_chars: usize) -> Option<PromptExample> {
    let title = doc.title.as_ref()?;
    let content: String = doc
        .sentences
        .iter()
        .filter(|s| *s != title)
        .cloned()
        .collect::<Vec<_>>()
        .join(" ")
        .chars()
        .take(max_content_chars)
        .collect();
    if content.is_empty() {
        return None;
    }
    Some(PromptExample {
        prompt: format!("{DOCUMENT2TITLE_PREFIX} {content}"),
        target: title.clone(),
    })
}

pub fn pair_shard_name(bucket: Bucket, shard: usize) -> String {
    format!("pairs.{}.{shard}.jsonl", bucket.name())
}

/// Writes `pairs.<bucket>.<shard>.jsonl` files; empty buckets are skipped.
pub fn write_pair_shards(
    pairs: &[SentencePair],
    spec: &BucketSpec,
    out_dir: &Path,
    shard: usize,
) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for bucket in Bucket::ALL {
        let in_bucket: Vec<&SentencePair> = pairs.iter().filter(|p| p.bucket(spec) == bucket).collect();
        if in_bucket.is_empty() {
            continue;
        }
        let path = out_dir.join(pair_shard_name(bucket, shard));
        write_jsonl(&path, in_bucket)?;
        written.push(path);
    }
    Ok(written)
}
