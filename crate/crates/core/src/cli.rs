//! Command-line front end. Each subcommand loads an optional run config,
//! applies flag overrides and calls into the library.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::RunConfig;
use crate::corpus::{read_jsonl, write_jsonl, DEFAULT_MEMORY_BUDGET};
use crate::error::{GurError, Result};
use crate::eval::{
    accuracy, dense_search, fill_prompt, load_zero_shot, make_auto_prompt, mrr_at_k, recall_at_k, zero_shot_classify,
    Bm25Index, Ranking, RetrievalTask, TextRecord,
};
use crate::masking::SpanDistKind;
use crate::miner::MineMode;
use crate::model::Gur;
use crate::objectives::Mode;
use crate::pipeline;

pub const BUILD_HASH: &str = env!("GUR_BUILD_HASH");

fn long_version() -> &'static str {
    concat!(env!("CARGO_PKG_VERSION"), " (build ", env!("GUR_BUILD_HASH"), ")")
}

#[derive(Debug, Parser)]
#[command(name = "gur", version = long_version(), about = "LCS pair mining, joint LM + contrastive pretraining and zero-shot evaluation")]
pub struct Cli {
    /// Sequential kernels and reductions throughout.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Worker thread cap.
    #[arg(long, global = true, value_parser = clap::value_parser!(u16).range(1..))]
    pub threads: Option<u16>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Mine LCS-related sentence pairs from a document corpus.
    Mine(MineArgs),
    /// Dedup and shuffle mined shards into a training dataset.
    BuildDataset(BuildArgs),
    /// Train a model from a dataset directory.
    Train(TrainArgs),
    /// Write sentence vectors for a JSONL of {id, text}.
    Represent(RepresentArgs),
    /// Score dense or BM25 retrieval on task directories.
    EvalRetrieval(EvalRetrievalArgs),
    /// Nearest-label zero-shot classification accuracy.
    EvalZeroshot(EvalZeroShotArgs),
    /// Greedy generation, optionally from auto prompts.
    Generate(GenerateArgs),
    /// Run the built-in invariant checks.
    Selftest,
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    /// Run config JSON; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl ConfigArg {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load_or_default(self.config.as_deref())?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct MineArgs {
    #[command(flatten)]
    pub cfg: ConfigArg,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub short_threshold: Option<u32>,
    #[arg(long)]
    pub long_threshold: Option<u32>,
    /// all-pairs | title-content
    #[arg(long)]
    pub mode: Option<MineMode>,
    /// Keep every candidate pair regardless of LCS weight.
    #[arg(long)]
    pub no_lcs_filter: bool,
    /// Also emit document2title prompts.
    #[arg(long)]
    pub document2title: bool,
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    #[command(flatten)]
    pub cfg: ConfigArg,
    /// Directory written by `mine`.
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_MEMORY_BUDGET)]
    pub memory_budget: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArg,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// full | cl-only | lm-only
    #[arg(long)]
    pub mode: Option<Mode>,
    /// Expect a dataset mined without the LCS filter.
    #[arg(long)]
    pub no_lcs_filter: bool,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub mask_rate: Option<f64>,
    /// hump | geometric
    #[arg(long)]
    pub span_dist: Option<SpanDistKind>,
    /// Decay ratio of the span-length law.
    #[arg(long)]
    pub span_p: Option<f64>,
    /// Most likely span length of the hump law.
    #[arg(long)]
    pub span_mode: Option<usize>,
}

#[derive(Debug, Args)]
pub struct RepresentArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// JSONL of {id, text}.
    #[arg(long)]
    pub input: PathBuf,
    /// TSV of `id<TAB>v1,v2,...`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalRetrievalArgs {
    /// Checkpoint for dense retrieval; BM25 when omitted.
    #[arg(long, conflicts_with = "bm25")]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub bm25: bool,
    /// Task directory with queries.jsonl, corpus.jsonl and qrels.tsv.
    #[arg(long, required = true)]
    pub task: Vec<PathBuf>,
    /// Cutoffs, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "10,100")]
    pub k: Vec<usize>,
    /// JSON report path; printed to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalZeroShotArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Directory with samples.jsonl and labels.jsonl.
    #[arg(long, required = true)]
    pub task: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// JSONL of {id, text}.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Mask a random non-keyword span of each input with a sentinel first.
    #[arg(long)]
    pub auto_prompts: bool,
    /// File with one keyword per line, kept intact by auto prompts.
    #[arg(long)]
    pub keywords: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    pub max_new: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn mine(a: &MineArgs) -> Result<()> {
    let mut cfg = a.cfg.load()?;
    if let Some(t) = a.short_threshold {
        cfg.buckets.short_lcs_threshold = t;
    }
    if let Some(t) = a.long_threshold {
        cfg.buckets.long_lcs_threshold = t;
    }
    if let Some(m) = a.mode {
        cfg.miner.mode = m;
    }
    if a.no_lcs_filter {
        cfg.miner.lcs_filter = false;
    }
    if a.document2title {
        cfg.miner.document2title = true;
    }
    cfg.validate()?;
    let m = pipeline::mine(&a.corpus, &a.out, &cfg)?;
    println!("{}", serde_json::to_string(&m)?);
    Ok(())
}

fn build_dataset(a: &BuildArgs) -> Result<()> {
    let cfg = a.cfg.load()?;
    let m = pipeline::build_dataset(&a.pairs, &a.out, cfg.seed, a.memory_budget)?;
    println!("{}", serde_json::to_string(&m)?);
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let mut cfg = a.cfg.load()?;
    if a.no_lcs_filter {
        cfg.miner.lcs_filter = false;
    }
    if let Some(s) = a.steps {
        cfg.train.steps = s;
    }
    if let Some(lr) = a.lr {
        cfg.train.learning_rate = lr;
    }
    if let Some(r) = a.mask_rate {
        cfg.masking.rate = r;
    }
    if let Some(d) = a.span_dist {
        cfg.masking.dist = d;
    }
    if let Some(p) = a.span_p {
        cfg.masking.hump.p = p;
        cfg.masking.geometric_p = p;
    }
    if let Some(m) = a.span_mode {
        cfg.masking.hump.mode = m;
    }
    let mode = a.mode.unwrap_or(cfg.train.mode);
    cfg.validate()?;
    let summary = pipeline::train_to_dir(&cfg, &a.data, &a.out, mode)?;
    let last = summary.records.last();
    println!(
        "{}",
        json!({
            "steps": summary.records.len(),
            "skipped_steps": summary.skipped_steps,
            "final_total_loss": last.map(|r| r.total_loss),
            "checkpoint": a.out,
        })
    );
    Ok(())
}

fn read_texts(path: &Path) -> Result<Vec<TextRecord>> {
    read_jsonl(path)
}

fn represent(a: &RepresentArgs) -> Result<()> {
    let model = Gur::<f32>::load(&a.model)?;
    let records = read_texts(&a.input)?;
    let texts: Vec<&str> = records.iter().map(|r| r.text.as_str()).collect();
    let vectors = model.represent_many(&texts)?;
    let file = std::fs::File::create(&a.out).map_err(|e| GurError::io(&a.out, e))?;
    let mut w = std::io::BufWriter::new(file);
    for (r, v) in records.iter().zip(vectors) {
        let cells: Vec<String> = v.iter().map(|x| format!("{x}")).collect();
        writeln!(w, "{}\t{}", r.id, cells.join(",")).map_err(|e| GurError::io(&a.out, e))?;
    }
    w.flush().map_err(|e| GurError::io(&a.out, e))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TaskReport {
    task: String,
    method: String,
    metrics: serde_json::Map<String, serde_json::Value>,
    queries: usize,
    missing_queries: usize,
}

fn task_name(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

fn emit_report(out: Option<&Path>, report: &serde_json::Value, table: &str) -> Result<()> {
    let text = serde_json::to_string_pretty(report)? + "\n";
    match out {
        Some(p) => {
            std::fs::write(p, text).map_err(|e| GurError::io(p, e))?;
            print!("{table}");
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn eval_retrieval(a: &EvalRetrievalArgs) -> Result<()> {
    if a.k.is_empty() || a.k.contains(&0) {
        return Err(GurError::invalid("--k needs positive cutoffs"));
    }
    let kmax = *a.k.iter().max().expect("non-empty");
    let model = a.model.as_deref().map(Gur::<f32>::load).transpose()?;
    let method = if model.is_some() { "dense" } else { "bm25" };
    let mut reports = Vec::new();
    let mut table = format!("{:<24} {:<6}", "task", "method");
    for k in &a.k {
        table += &format!(" {:>10} {:>8}", format!("recall@{k}"), format!("mrr@{k}"));
    }
    table.push('\n');
    for dir in &a.task {
        let task = RetrievalTask::load(dir)?;
        let ranking: Ranking = match &model {
            Some(m) => dense_search(m, &task, kmax)?,
            None => Bm25Index::from_task(&task).rank_task(&task, kmax),
        };
        let mut metrics = serde_json::Map::new();
        let mut missing = 0;
        let name = task_name(dir);
        table += &format!("{:<24} {:<6}", name, method);
        for &k in &a.k {
            let r = recall_at_k(&ranking, &task.qrels, k)?;
            let m = mrr_at_k(&ranking, &task.qrels, k)?;
            missing = r.missing.len();
            metrics.insert(format!("recall@{k}"), json!(r.value));
            metrics.insert(format!("mrr@{k}"), json!(m.value));
            table += &format!(" {:>10.4} {:>8.4}", r.value, m.value);
        }
        table.push('\n');
        reports.push(TaskReport {
            task: name,
            method: method.into(),
            metrics,
            queries: task.queries.len(),
            missing_queries: missing,
        });
    }
    emit_report(a.out.as_deref(), &json!({ "tasks": reports }), &table)
}

fn eval_zeroshot(a: &EvalZeroShotArgs) -> Result<()> {
    let model = Gur::<f32>::load(&a.model)?;
    let mut reports = Vec::new();
    let mut table = format!("{:<24} {:>8} {:>8}\n", "task", "samples", "accuracy");
    for dir in &a.task {
        let (samples, labels) = load_zero_shot(dir)?;
        let texts: Vec<&str> = samples.iter().map(|s| s.text.as_str()).collect();
        let gold: Vec<String> = samples.iter().map(|s| s.label.clone()).collect();
        let pred = zero_shot_classify(&model, &texts, &labels)?;
        let acc = accuracy(&pred, &gold);
        table += &format!("{:<24} {:>8} {:>8.4}\n", task_name(dir), samples.len(), acc);
        reports.push(json!({"task": task_name(dir), "metrics": {"accuracy": acc}, "samples": samples.len()}));
    }
    emit_report(a.out.as_deref(), &json!({ "tasks": reports }), &table)
}

#[derive(Debug, Serialize)]
struct Generation<'a> {
    id: &'a str,
    prompt: String,
    generated: String,
    filled: String,
}

fn generate(a: &GenerateArgs) -> Result<()> {
    let model = Gur::<f32>::load(&a.model)?;
    let records = read_texts(&a.input)?;
    let keywords: BTreeSet<String> = match &a.keywords {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|e| GurError::io(p, e))?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect(),
        None => BTreeSet::new(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut out = Vec::with_capacity(records.len());
    for r in &records {
        let prompt = if a.auto_prompts {
            make_auto_prompt(&r.text, &keywords, &mut rng).prompt
        } else {
            r.text.clone()
        };
        let generated = model.generate_greedy(&prompt, a.max_new)?;
        let filled = fill_prompt(&prompt, &generated);
        out.push(Generation {
            id: &r.id,
            prompt,
            generated,
            filled,
        });
    }
    write_jsonl(&a.out, &out)
}

fn selftest() -> Result<()> {
    let checks = crate::selftest::run_all();
    let mut failed = 0;
    for c in &checks {
        println!("{} {} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        failed += usize::from(!c.passed);
    }
    if failed > 0 {
        return Err(GurError::Numeric(format!(
            "{failed} of {} selftest checks failed",
            checks.len()
        )));
    }
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    if cli.deterministic {
        crate::tensor::set_deterministic(true);
    }
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n as usize)
            .build_global()
            .map_err(|e| GurError::Config(format!("thread pool: {e}")))?;
    }
    match &cli.command {
        Command::Mine(a) => mine(a),
        Command::BuildDataset(a) => build_dataset(a),
        Command::Train(a) => train(a),
        Command::Represent(a) => represent(a),
        Command::EvalRetrieval(a) => eval_retrieval(a),
        Command::EvalZeroshot(a) => eval_zeroshot(a),
        Command::Generate(a) => generate(a),
        Command::Selftest => selftest(),
    }
}

/// Flattens an error onto one line for stderr.
pub fn error_line(e: &GurError) -> String {
    format!("error: {e}").replace(['\n', '\r'], " ")
}
