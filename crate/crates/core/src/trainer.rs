//! Joint LM + contrastive training: AdamW, constant-with-warmup schedule,
//! bucket alternation and per-step JSONL logging.

use std::path::Path;
use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{random_crop, read_jsonl, Bucket, BucketSpec};
use crate::error::{GurError, Result};
use crate::masking::{corrupt, sample_layout, CorruptedExample, MaskingConfig, SpanLengthDist, TokenId};
use crate::miner::{PromptExample, SentencePair};
use crate::model::{Gur, Vocab, CLS, DEFAULT_SENTINELS, EOS};
use crate::objectives::{batch_loss_graph, lm_loss, lm_loss_graph, LossWeights, Mode, TrainBatch};
use crate::tensor::{Graph, ParamStore, Scalar};

pub const DATASET_MANIFEST: &str = "dataset.json";
pub const D2T_FILE: &str = "d2t.jsonl";

pub fn train_file_name(bucket: Bucket) -> String {
    format!("train.{}.jsonl", bucket.name())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub steps: u64,
    pub short_batch_size: usize,
    pub long_batch_size: usize,
    pub seed: u64,
    pub mode: Mode,
    /// Must agree with how the dataset was mined.
    pub lcs_filter: bool,
    /// Global gradient norm cap; 0 disables clipping.
    pub clip_norm: f64,
    /// Every n-th step trains on document2title examples instead of pairs; 0 never.
    pub document2title_every: u64,
    pub max_consecutive_skips: u32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            warmup_steps: 100,
            weight_decay: 0.01,
            betas: (0.9, 0.999),
            eps: 1e-8,
            steps: 2000,
            short_batch_size: 64,
            long_batch_size: 16,
            seed: 0,
            mode: Mode::Full,
            lcs_filter: true,
            clip_norm: 1.0,
            document2title_every: 0,
            max_consecutive_skips: 20,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(GurError::Config(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(GurError::Config(format!("betas must lie in [0, 1), got ({b1}, {b2})")));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) || !(self.clip_norm >= 0.0) {
            return Err(GurError::Config(
                "eps must be > 0; weight_decay and clip_norm >= 0".into(),
            ));
        }
        if self.short_batch_size == 0 || self.long_batch_size == 0 {
            return Err(GurError::Config("batch sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW {
            beta1: self.betas.0,
            beta2: self.betas.1,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn batch_size(&self, bucket: Bucket) -> usize {
        match bucket {
            Bucket::Short => self.short_batch_size,
            Bucket::Long => self.long_batch_size,
        }
    }
}

/// Linear warmup from 0 to `learning_rate`, constant afterwards.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    if cfg.warmup_steps == 0 {
        return cfg.learning_rate;
    }
    cfg.learning_rate * (step as f64 / cfg.warmup_steps as f64).min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<T: Scalar>(params: &ParamStore<T>) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        AdamState {
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One AdamW update. A missing gradient counts as zero. Any non-finite
/// gradient entry aborts the step before anything is modified.
pub fn optimizer_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &[Option<Vec<T>>],
    state: &mut AdamState,
    opt: &AdamW,
    lr: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(GurError::invalid(format!(
            "optimizer_step: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (id, g) in params.ids().zip(grads) {
        if let Some(g) = g {
            if g.len() != params.get(id).len() {
                return Err(GurError::ShapeMismatch {
                    op: "optimizer_step",
                    left: params.get(id).shape().to_vec(),
                    right: vec![g.len()],
                });
            }
            if let Some(i) = g.iter().position(|x| !x.is_finite()) {
                return Err(GurError::Numeric(format!(
                    "non-finite gradient in {} at index {i}",
                    params.name(id)
                )));
            }
        }
    }
    state.t += 1;
    let bc1 = 1.0 - opt.beta1.powi(state.t as i32);
    let bc2 = 1.0 - opt.beta2.powi(state.t as i32);
    let decay = 1.0 - lr * opt.weight_decay;
    let ids: Vec<_> = params.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let g = grads[k].as_deref();
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for (i, p) in params.get_mut(id).data_mut().iter_mut().enumerate() {
            let gi = g.map_or(0.0, |g| g[i].to_f64().unwrap_or(0.0));
            m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * gi;
            v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * gi * gi;
            let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + opt.eps);
            let x = p.to_f64().unwrap_or(f64::NAN);
            *p = T::c(x * decay - lr * update);
        }
    }
    Ok(())
}

pub fn global_norm<T: Scalar>(grads: &[Option<Vec<T>>]) -> f64 {
    grads
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|x| {
            let x = x.to_f64().unwrap_or(f64::NAN);
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Option<Vec<T>>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let f = T::c(max_norm / norm);
        grads
            .iter_mut()
            .flatten()
            .for_each(|g| g.iter_mut().for_each(|x| *x *= f));
    }
    norm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub step: u64,
    pub lm_loss: Option<f64>,
    pub cl_loss: Option<f64>,
    pub total_loss: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

/// Written next to the training files by `build-dataset`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub lcs_filter: bool,
    pub bucket_spec: BucketSpec,
    pub short_pairs: usize,
    pub long_pairs: usize,
    pub document2title: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainData {
    pub short: Vec<SentencePair>,
    pub long: Vec<SentencePair>,
    pub document2title: Vec<PromptExample>,
}

impl TrainData {
    pub fn from_pairs(pairs: Vec<SentencePair>, spec: &BucketSpec) -> Self {
        let (short, long) = pairs.into_iter().partition(|p| p.bucket(spec) == Bucket::Short);
        TrainData {
            short,
            long,
            document2title: Vec::new(),
        }
    }

    pub fn load(dir: &Path) -> Result<(Self, DatasetManifest)> {
        let mpath = dir.join(DATASET_MANIFEST);
        let text = std::fs::read_to_string(&mpath).map_err(|e| GurError::io(&mpath, e))?;
        let manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| GurError::Config(format!("{}: {e}", mpath.display())))?;
        let read = |name: String| -> Result<Vec<SentencePair>> {
            let p = dir.join(name);
            if p.exists() {
                read_jsonl(&p)
            } else {
                Ok(Vec::new())
            }
        };
        let short = read(train_file_name(Bucket::Short))?;
        let long = read(train_file_name(Bucket::Long))?;
        let d2t_path = dir.join(D2T_FILE);
        let document2title = if d2t_path.exists() {
            read_jsonl(&d2t_path)?
        } else {
            Vec::new()
        };
        Ok((
            TrainData {
                short,
                long,
                document2title,
            },
            manifest,
        ))
    }

    pub fn bucket(&self, bucket: Bucket) -> &[SentencePair] {
        match bucket {
            Bucket::Short => &self.short,
            Bucket::Long => &self.long,
        }
    }

    /// Character vocabulary over every training text.
    pub fn vocab(&self) -> Vocab {
        let pairs = self.short.iter().chain(&self.long);
        let texts = pairs.flat_map(|p| [p.s1.as_str(), p.s2.as_str()]).chain(
            self.document2title
                .iter()
                .flat_map(|e| [e.prompt.as_str(), e.target.as_str()]),
        );
        Vocab::build(texts, DEFAULT_SENTINELS)
    }
}

fn step_rng(seed: u64, step: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos((step as u128) << 20);
    rng
}

const STREAM_BATCH: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;

/// Walks a seeded permutation of one bucket, reshuffling with a new seed
/// each time it runs out.
struct Cursor {
    bucket: Bucket,
    order: Vec<usize>,
    pos: usize,
    epoch: u64,
    seed: u64,
}

impl Cursor {
    fn new(bucket: Bucket, len: usize, seed: u64) -> Self {
        let mut c = Cursor {
            bucket,
            order: (0..len).collect(),
            pos: 0,
            epoch: 0,
            seed,
        };
        c.shuffle();
        c
    }

    fn epoch_seed(&self) -> u64 {
        self.seed ^ (self.epoch.wrapping_add(1)).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (self.bucket as u64)
    }

    fn shuffle(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.epoch_seed());
        rng.set_stream(STREAM_SHUFFLE);
        self.order.shuffle(&mut rng);
    }

    /// `n` distinct indices; an epoch boundary never splits a batch.
    fn next_batch(&mut self, n: usize) -> Vec<usize> {
        let n = n.min(self.order.len());
        if self.pos + n > self.order.len() {
            self.epoch += 1;
            self.pos = 0;
            self.shuffle();
            info!(
                "{} bucket exhausted; epoch {} reshuffled with seed {}",
                self.bucket.name(),
                self.epoch,
                self.epoch_seed()
            );
        }
        let out = self.order[self.pos..self.pos + n].to_vec();
        self.pos += n;
        out
    }
}

/// Everything besides the model that shapes a training run.
#[derive(Debug, Clone)]
pub struct TrainSetup {
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub masking: MaskingConfig,
    pub buckets: BucketSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub records: Vec<TrainLogRecord>,
    pub skipped_steps: u64,
}

struct BatchBuilder<'a> {
    vocab: &'a Vocab,
    masking: &'a MaskingConfig,
    dist: SpanLengthDist,
}

impl BatchBuilder<'_> {
    fn corrupt_tokens(&self, tokens: &[TokenId], rng: &mut ChaCha8Rng) -> Result<CorruptedExample> {
        let layout = sample_layout(tokens.len(), self.masking.rate, &self.dist, rng)?;
        corrupt(tokens, &layout, self.vocab.sentinels(), EOS)
    }

    fn pairs(&self, pairs: &[&SentencePair], seq_len: usize, rng: &mut ChaCha8Rng) -> Result<TrainBatch> {
        let mut batch = TrainBatch::default();
        for p in pairs {
            let a = random_crop(&self.vocab.tokenize(&p.s1), seq_len - 1, rng)?;
            let b = random_crop(&self.vocab.tokenize(&p.s2), seq_len - 1, rng)?;
            if a.len() >= 2 {
                batch.lm_examples.push(self.corrupt_tokens(&a, rng)?);
            }
            let with_cls = |t: Vec<TokenId>| [CLS].into_iter().chain(t).collect::<Vec<_>>();
            batch.pairs.push((with_cls(a), with_cls(b)));
        }
        Ok(batch)
    }

    fn document2title(&self, examples: &[&PromptExample], seq_len: usize) -> Vec<CorruptedExample> {
        examples
            .iter()
            .map(|e| {
                let mut input = self.vocab.tokenize(&e.prompt);
                input.truncate(seq_len - 1);
                let mut target = self.vocab.tokenize(&e.target);
                target.truncate(seq_len - 1);
                target.push(EOS);
                CorruptedExample {
                    encoder_input: input,
                    decoder_target: target,
                }
            })
            .collect()
    }
}

fn scalar<T: Scalar>(g: &Graph<T>, v: crate::tensor::Var) -> f64 {
    g.value(v).item().to_f64().unwrap_or(f64::NAN)
}

/// Trains `model` in place, calling `on_record` after every accepted step.
pub fn train<T: Scalar>(
    model: &mut Gur<T>,
    data: &TrainData,
    setup: &TrainSetup,
    mut on_record: impl FnMut(&TrainLogRecord) -> Result<()>,
) -> Result<TrainSummary> {
    let cfg = &setup.train;
    cfg.validate()?;
    setup.loss.validate()?;
    setup.buckets.validate()?;
    let active: Vec<Bucket> = Bucket::ALL
        .into_iter()
        .filter(|&b| !data.bucket(b).is_empty())
        .collect();
    if active.is_empty() {
        return Err(GurError::invalid("training data has no sentence pairs"));
    }
    for &b in &active {
        let seq = setup.buckets.seq_len(b);
        if seq > model.config().max_seq {
            return Err(GurError::Config(format!(
                "{} bucket seq_len {seq} exceeds model max_seq {}",
                b.name(),
                model.config().max_seq
            )));
        }
        if cfg.mode.uses_cl() && data.bucket(b).len() < 2 {
            return Err(GurError::invalid(format!(
                "{} bucket needs at least 2 pairs for in-batch negatives",
                b.name()
            )));
        }
    }
    let vocab = model.vocab().clone();
    let builder = BatchBuilder {
        vocab: &vocab,
        masking: &setup.masking,
        dist: setup.masking.distribution()?,
    };
    let d2t_seq = setup.buckets.seq_len(*active.last().expect("non-empty"));
    let use_d2t = cfg.document2title_every > 0 && cfg.mode.uses_lm() && !data.document2title.is_empty();
    let mut cursors: Vec<Cursor> = active
        .iter()
        .map(|&b| Cursor::new(b, data.bucket(b).len(), cfg.seed))
        .collect();
    let mut d2t_cursor = Cursor::new(Bucket::Short, data.document2title.len(), cfg.seed ^ 0xd2d2);
    let opt = cfg.optimizer();
    let mut state = AdamState::new(model.params());
    let mut records = Vec::new();
    let mut skipped = 0u64;
    let mut consecutive = 0u32;
    let mut pair_steps = 0usize;
    let start = Instant::now();

    for step in 1..=cfg.steps {
        let mut rng = step_rng(cfg.seed, step, STREAM_BATCH);
        let d2t_step = use_d2t && step % cfg.document2title_every == 0;
        let batch = if d2t_step {
            let idx = d2t_cursor.next_batch(cfg.short_batch_size);
            let ex: Vec<&PromptExample> = idx.iter().map(|&i| &data.document2title[i]).collect();
            TrainBatch {
                lm_examples: builder.document2title(&ex, d2t_seq),
                pairs: Vec::new(),
            }
        } else {
            let k = pair_steps % active.len();
            pair_steps += 1;
            let bucket = active[k];
            let idx = cursors[k].next_batch(cfg.batch_size(bucket));
            let pairs: Vec<&SentencePair> = idx.iter().map(|&i| &data.bucket(bucket)[i]).collect();
            builder.pairs(&pairs, setup.buckets.seq_len(bucket), &mut rng)?
        };
        let mode = if d2t_step { Mode::LmOnly } else { cfg.mode };
        let mut g = Graph::new();
        let (lm, cl, total) = if d2t_step {
            let l = lm_loss_graph(model, &mut g, &batch.lm_examples)?;
            (Some(l), None, l)
        } else {
            let bl = batch_loss_graph(model, &mut g, &batch, &setup.loss, mode)?;
            (bl.lm, bl.cl, bl.total)
        };
        let lr = lr_at(step, cfg);
        let total_value = scalar(&g, total);
        let outcome = if total_value.is_finite() {
            let grads = g.backward(total)?;
            let mut pg = g.param_grads(&grads, model.params());
            clip_global_norm(&mut pg, cfg.clip_norm);
            optimizer_step(model.params_mut(), &pg, &mut state, &opt, lr).and_then(|_| {
                if model.params().all_finite() {
                    Ok(())
                } else {
                    Err(GurError::Numeric("parameters became non-finite".into()))
                }
            })
        } else {
            Err(GurError::Numeric(format!("total_loss is {total_value}")))
        };
        if let Err(e) = outcome {
            skipped += 1;
            consecutive += 1;
            warn!("step {step} skipped: {e}");
            if consecutive > cfg.max_consecutive_skips {
                return Err(GurError::Numeric(format!(
                    "{consecutive} consecutive steps skipped; last: {e}"
                )));
            }
            continue;
        }
        consecutive = 0;
        let rec = TrainLogRecord {
            step,
            lm_loss: lm.map(|v| scalar(&g, v)),
            cl_loss: cl.map(|v| scalar(&g, v)),
            total_loss: total_value,
            lr,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        on_record(&rec)?;
        records.push(rec);
    }
    Ok(TrainSummary {
        records,
        skipped_steps: skipped,
    })
}

/// Fixed corrupted copies of held-out sentences for comparing LM loss
/// across models.
pub fn make_lm_eval_set(
    vocab: &Vocab,
    sentences: &[String],
    masking: &MaskingConfig,
    seq_len: usize,
    seed: u64,
) -> Result<Vec<CorruptedExample>> {
    let builder = BatchBuilder {
        vocab,
        masking,
        dist: masking.distribution()?,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(sentences.len());
    for s in sentences {
        let mut t = vocab.tokenize(s);
        t.truncate(seq_len - 1);
        if t.len() >= 2 {
            out.push(builder.corrupt_tokens(&t, &mut rng)?);
        }
    }
    Ok(out)
}

/// Token-weighted mean LM loss over `examples`, in chunks of 64.
pub fn eval_lm_loss<T: Scalar>(model: &Gur<T>, examples: &[CorruptedExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(GurError::invalid("empty LM eval set"));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for chunk in examples.chunks(64) {
        let n: usize = chunk.iter().map(|e| e.decoder_target.len()).sum();
        sum += lm_loss(model, chunk)? * n as f64;
        count += n;
    }
    Ok(sum / count as f64)
}

#[cfg(test)]
mod tests;
