//! Zero-shot evaluation: sparse and dense retrieval, nearest-label
//! classification and auto-prompt construction.

pub mod bm25;
mod prompt;

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{normalize_str, read_jsonl};
use crate::error::{GurError, Result};
use crate::lcs::is_cjk_ideograph;

pub use bm25::Bm25Index;
pub use prompt::{fill_prompt, make_auto_prompt, prompt_tokens, AutoPrompt, PromptToken};

/// Query id to ranked document ids, best first.
pub type Ranking = BTreeMap<String, Vec<String>>;
pub type Qrels = BTreeMap<String, BTreeSet<String>>;

/// Normalized whitespace terms, with every CJK ideograph its own term.
pub fn lexical_terms(text: &str) -> Vec<String> {
    let norm = normalize_str(text);
    let mut out = Vec::new();
    for word in norm.split_whitespace() {
        let mut cur = String::new();
        for c in word.chars() {
            if is_cjk_ideograph(c) {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(c.to_string());
            } else {
                cur.push(c);
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct TextRecord {
    pub id: String,
    pub text: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RetrievalTask {
    pub queries: Vec<(String, String)>,
    pub corpus: Vec<(String, String)>,
    pub qrels: Qrels,
}

impl RetrievalTask {
    pub fn new(queries: Vec<(String, String)>, corpus: Vec<(String, String)>, qrels: Qrels) -> Result<Self> {
        let task = RetrievalTask { queries, corpus, qrels };
        task.validate()?;
        Ok(task)
    }

    pub fn validate(&self) -> Result<()> {
        let docs: BTreeSet<&str> = self.corpus.iter().map(|(id, _)| id.as_str()).collect();
        if docs.len() != self.corpus.len() {
            return Err(GurError::invalid("duplicate document id in corpus"));
        }
        for (qid, _) in &self.queries {
            let rel = self
                .qrels
                .get(qid)
                .filter(|r| !r.is_empty())
                .ok_or_else(|| GurError::invalid(format!("query {qid} has no relevant documents")))?;
            if let Some(d) = rel.iter().find(|d| !docs.contains(d.as_str())) {
                return Err(GurError::invalid(format!("qrels for {qid} name unknown document {d}")));
            }
        }
        Ok(())
    }

    /// Reads `queries.jsonl`, `corpus.jsonl` and `qrels.tsv` from `dir`.
    pub fn load(dir: &Path) -> Result<Self> {
        let queries: Vec<TextRecord> = read_jsonl(&dir.join("queries.jsonl"))?;
        let corpus: Vec<TextRecord> = read_jsonl(&dir.join("corpus.jsonl"))?;
        let qrels = read_qrels(&dir.join("qrels.tsv"))?;
        Self::new(
            queries.into_iter().map(|r| (r.id, r.text)).collect(),
            corpus.into_iter().map(|r| (r.id, r.text)).collect(),
            qrels,
        )
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| GurError::io(dir, e))?;
        let recs = |v: &[(String, String)]| -> Vec<TextRecord> {
            v.iter()
                .map(|(id, text)| TextRecord {
                    id: id.clone(),
                    text: text.clone(),
                })
                .collect()
        };
        crate::corpus::write_jsonl(&dir.join("queries.jsonl"), &recs(&self.queries))?;
        crate::corpus::write_jsonl(&dir.join("corpus.jsonl"), &recs(&self.corpus))?;
        let mut tsv = String::new();
        for (q, docs) in &self.qrels {
            for d in docs {
                tsv.push_str(&format!("{q}\t{d}\n"));
            }
        }
        let path = dir.join("qrels.tsv");
        std::fs::write(&path, tsv).map_err(|e| GurError::io(&path, e))
    }
}

pub fn read_qrels(path: &Path) -> Result<Qrels> {
    let f = File::open(path).map_err(|e| GurError::io(path, e))?;
    let mut qrels = Qrels::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| GurError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut cols = line.split('\t');
        match (cols.next(), cols.next()) {
            (Some(q), Some(d)) if !q.is_empty() && !d.is_empty() => {
                qrels.entry(q.to_string()).or_default().insert(d.trim().to_string());
            }
            _ => {
                return Err(GurError::Record {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: "expected `qid<TAB>docid`".into(),
                })
            }
        }
    }
    Ok(qrels)
}

/// Metric value plus the queries that had no ranking and scored 0.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricResult {
    pub value: f64,
    pub missing: Vec<String>,
}

fn per_query_mean(
    ranked: &Ranking,
    qrels: &Qrels,
    k: usize,
    f: impl Fn(&[String], &BTreeSet<String>) -> f64,
) -> Result<MetricResult> {
    if k == 0 {
        return Err(GurError::invalid("K must be at least 1"));
    }
    let mut total = 0.0;
    let mut missing = Vec::new();
    for (qid, rel) in qrels {
        match ranked.get(qid) {
            Some(list) => total += f(&list[..list.len().min(k)], rel),
            None => missing.push(qid.clone()),
        }
    }
    let value = if qrels.is_empty() {
        0.0
    } else {
        total / qrels.len() as f64
    };
    Ok(MetricResult { value, missing })
}

pub fn recall_at_k(ranked: &Ranking, qrels: &Qrels, k: usize) -> Result<MetricResult> {
    per_query_mean(ranked, qrels, k, |top, rel| {
        if rel.is_empty() {
            return 0.0;
        }
        top.iter().filter(|d| rel.contains(*d)).count() as f64 / rel.len() as f64
    })
}

pub fn mrr_at_k(ranked: &Ranking, qrels: &Qrels, k: usize) -> Result<MetricResult> {
    per_query_mean(ranked, qrels, k, |top, rel| {
        top.iter()
            .position(|d| rel.contains(d))
            .map_or(0.0, |r| 1.0 / (r + 1) as f64)
    })
}

/// Anything that maps texts to sentence vectors.
pub trait SentenceEncoder: Sync {
    fn embed_texts(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>>;
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// Indices of `candidates` sorted by descending cosine to `query`; ties go
/// to the smaller key.
fn rank_by_cosine<K: Ord>(query: &[f32], candidates: &[Vec<f32>], keys: &[K]) -> Vec<usize> {
    let scores: Vec<f64> = candidates.iter().map(|c| cosine(query, c)).collect();
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then_with(|| keys[a].cmp(&keys[b])));
    order
}

pub fn dense_search<E: SentenceEncoder + ?Sized>(encoder: &E, task: &RetrievalTask, k: usize) -> Result<Ranking> {
    let doc_texts: Vec<&str> = task.corpus.iter().map(|(_, t)| t.as_str()).collect();
    let doc_ids: Vec<&str> = task.corpus.iter().map(|(id, _)| id.as_str()).collect();
    let q_texts: Vec<&str> = task.queries.iter().map(|(_, t)| t.as_str()).collect();
    let docs = encoder.embed_texts(&doc_texts)?;
    let queries = encoder.embed_texts(&q_texts)?;
    Ok(task
        .queries
        .par_iter()
        .zip(&queries)
        .map(|((qid, _), qv)| {
            let order = rank_by_cosine(qv, &docs, &doc_ids);
            (
                qid.clone(),
                order.into_iter().take(k).map(|i| doc_ids[i].to_string()).collect(),
            )
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelSet {
    labels: Vec<(String, String)>,
}

impl LabelSet {
    pub fn new(labels: Vec<(String, String)>) -> Result<Self> {
        if labels.is_empty() {
            return Err(GurError::invalid("label set is empty"));
        }
        let texts: BTreeSet<&str> = labels.iter().map(|(_, t)| t.as_str()).collect();
        let ids: BTreeSet<&str> = labels.iter().map(|(id, _)| id.as_str()).collect();
        if texts.len() != labels.len() || ids.len() != labels.len() {
            return Err(GurError::invalid("label ids and texts must be distinct"));
        }
        Ok(LabelSet { labels })
    }

    pub fn labels(&self) -> &[(String, String)] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct LabeledSample {
    pub id: String,
    pub text: String,
    pub label: String,
}

/// Reads `samples.jsonl` and `labels.jsonl` from `dir`.
pub fn load_zero_shot(dir: &Path) -> Result<(Vec<LabeledSample>, LabelSet)> {
    let samples: Vec<LabeledSample> = read_jsonl(&dir.join("samples.jsonl"))?;
    let labels: Vec<TextRecord> = read_jsonl(&dir.join("labels.jsonl"))?;
    let set = LabelSet::new(labels.into_iter().map(|r| (r.id, r.text)).collect())?;
    Ok((samples, set))
}

pub fn save_zero_shot(dir: &Path, samples: &[LabeledSample], labels: &LabelSet) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| GurError::io(dir, e))?;
    crate::corpus::write_jsonl(&dir.join("samples.jsonl"), samples)?;
    let recs: Vec<TextRecord> = labels
        .labels
        .iter()
        .map(|(id, text)| TextRecord {
            id: id.clone(),
            text: text.clone(),
        })
        .collect();
    crate::corpus::write_jsonl(&dir.join("labels.jsonl"), &recs)
}

/// Nearest label id per sample.
pub fn zero_shot_classify<E: SentenceEncoder + ?Sized>(
    encoder: &E,
    samples: &[&str],
    labels: &LabelSet,
) -> Result<Vec<String>> {
    let label_texts: Vec<&str> = labels.labels.iter().map(|(_, t)| t.as_str()).collect();
    let label_ids: Vec<&str> = labels.labels.iter().map(|(id, _)| id.as_str()).collect();
    let lv = encoder.embed_texts(&label_texts)?;
    let sv = encoder.embed_texts(samples)?;
    Ok(sv
        .par_iter()
        .map(|v| label_ids[rank_by_cosine(v, &lv, &label_ids)[0]].to_string())
        .collect())
}

pub fn accuracy(predicted: &[String], gold: &[String]) -> f64 {
    if gold.is_empty() {
        return 0.0;
    }
    predicted.iter().zip(gold).filter(|(p, g)| p == g).count() as f64 / gold.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn qrels(pairs: &[(&str, &[&str])]) -> Qrels {
        pairs
            .iter()
            .map(|(q, ds)| (q.to_string(), ds.iter().map(|d| d.to_string()).collect()))
            .collect()
    }

    fn ranking(pairs: &[(&str, &[&str])]) -> Ranking {
        pairs
            .iter()
            .map(|(q, ds)| (q.to_string(), ds.iter().map(|d| d.to_string()).collect()))
            .collect()
    }

    /// Returns a fixed vector per text, looked up by content.
    struct TableEncoder(BTreeMap<String, Vec<f32>>);

    impl SentenceEncoder for TableEncoder {
        fn embed_texts(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>> {
            Ok(texts
                .iter()
                .map(|t| self.0.get(*t).cloned().unwrap_or(vec![1.0, 0.0]))
                .collect())
        }
    }

    struct ConstEncoder;

    impl SentenceEncoder for ConstEncoder {
        fn embed_texts(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>> {
            Ok(texts.iter().map(|_| vec![0.6, 0.8]).collect())
        }
    }

    #[test]
    fn lexical_terms_split_cjk() {
        assert_eq!(lexical_terms("Hello, World!"), vec!["hello", "world"]);
        assert_eq!(lexical_terms("GUR模型 v2"), vec!["gur", "模", "型", "v2"]);
        assert!(lexical_terms("").is_empty());
    }

    #[test]
    fn recall_hand_cases() {
        let q = qrels(&[("q1", &["a"]), ("q2", &["b"])]);
        let r = ranking(&[("q1", &["a", "c"]), ("q2", &["c", "d"])]);
        assert_eq!(recall_at_k(&r, &q, 2).unwrap().value, 0.5);
        let r = ranking(&[("q1", &["a"]), ("q2", &["b"])]);
        assert_eq!(recall_at_k(&r, &q, 1).unwrap().value, 1.0);
        let r = ranking(&[("q1", &["x"]), ("q2", &["y"])]);
        assert_eq!(recall_at_k(&r, &q, 1).unwrap().value, 0.0);
        assert!(recall_at_k(&r, &q, 0).is_err());
    }

    #[test]
    fn missing_query_is_flagged() {
        let q = qrels(&[("q1", &["a"]), ("q2", &["b"])]);
        let r = ranking(&[("q1", &["a"])]);
        let m = recall_at_k(&r, &q, 5).unwrap();
        assert_eq!(m.value, 0.5);
        assert_eq!(m.missing, vec!["q2".to_string()]);
    }

    #[test]
    fn mrr_hand_cases() {
        let q = qrels(&[("q", &["r"])]);
        let r = ranking(&[("q", &["a", "b", "r"])]);
        assert_eq!(mrr_at_k(&r, &q, 10).unwrap().value, 1.0 / 3.0);
        let list: Vec<String> = (0..10).map(|i| format!("x{i}")).chain(["r".to_string()]).collect();
        let r: Ranking = [("q".to_string(), list)].into_iter().collect();
        assert_eq!(mrr_at_k(&r, &q, 10).unwrap().value, 0.0);
        let q = qrels(&[("q1", &["r"]), ("q2", &["r"])]);
        let r = ranking(&[("q1", &["r"]), ("q2", &["a", "b", "c", "r"])]);
        assert_eq!(mrr_at_k(&r, &q, 10).unwrap().value, 0.625);
    }

    #[test]
    fn dense_tie_break_is_doc_id() {
        let task = RetrievalTask::new(
            vec![("q".into(), "query".into())],
            vec![
                ("d2".into(), "x".into()),
                ("d0".into(), "y".into()),
                ("d1".into(), "z".into()),
            ],
            qrels(&[("q", &["d1"])]),
        )
        .unwrap();
        let r = dense_search(&ConstEncoder, &task, 10).unwrap();
        assert_eq!(r["q"], vec!["d0", "d1", "d2"]);
        assert_eq!(dense_search(&ConstEncoder, &task, 2).unwrap()["q"].len(), 2);
    }

    #[test]
    fn dense_ranks_by_cosine() {
        let enc = TableEncoder(
            [
                ("q".to_string(), vec![1.0, 0.0]),
                ("near".to_string(), vec![0.9, 0.1]),
                ("far".to_string(), vec![0.0, 1.0]),
            ]
            .into_iter()
            .collect(),
        );
        let task = RetrievalTask::new(
            vec![("q1".into(), "q".into())],
            vec![("a".into(), "far".into()), ("b".into(), "near".into())],
            qrels(&[("q1", &["b"])]),
        )
        .unwrap();
        assert_eq!(dense_search(&enc, &task, 2).unwrap()["q1"], vec!["b", "a"]);
    }

    #[test]
    fn task_validation() {
        let bad = RetrievalTask::new(
            vec![("q".into(), "t".into())],
            vec![("d".into(), "t".into())],
            qrels(&[("q", &["missing"])]),
        );
        assert!(bad.is_err());
        let bad = RetrievalTask::new(vec![("q".into(), "t".into())], vec![], Qrels::new());
        assert!(bad.is_err());
    }

    #[test]
    fn task_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let task = RetrievalTask::new(
            vec![("q".into(), "a query".into())],
            vec![("d".into(), "a doc".into()), ("e".into(), "x".into())],
            qrels(&[("q", &["d", "e"])]),
        )
        .unwrap();
        task.save(dir.path()).unwrap();
        assert_eq!(RetrievalTask::load(dir.path()).unwrap(), task);
    }

    #[test]
    fn classify_single_label_and_scaling() {
        let labels = LabelSet::new(vec![("only".into(), "label".into())]).unwrap();
        assert_eq!(
            zero_shot_classify(&ConstEncoder, &["a", "b"], &labels).unwrap(),
            vec!["only", "only"]
        );
        assert!(LabelSet::new(vec![("a".into(), "t".into()), ("b".into(), "t".into())]).is_err());

        let table: BTreeMap<String, Vec<f32>> = [("s", vec![0.2, 1.0]), ("la", vec![1.0, 0.0]), ("lb", vec![0.0, 1.0])]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        let labels = LabelSet::new(vec![("A".into(), "la".into()), ("B".into(), "lb".into())]).unwrap();
        let base = zero_shot_classify(&TableEncoder(table.clone()), &["s"], &labels).unwrap();
        assert_eq!(base, vec!["B"]);
        let scaled = table
            .into_iter()
            .map(|(k, v)| (k, v.iter().map(|x| x * 7.5).collect()))
            .collect();
        assert_eq!(
            zero_shot_classify(&TableEncoder(scaled), &["s"], &labels).unwrap(),
            base
        );
    }

    #[test]
    fn recall_monotone_in_k_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let docs: Vec<String> = (0..30).map(|i| format!("d{i}")).collect();
        for _ in 0..200 {
            let mut q = Qrels::new();
            let mut r = Ranking::new();
            for qi in 0..3 {
                let n = rng.gen_range(1..4);
                q.insert(format!("q{qi}"), docs.choose_multiple(&mut rng, n).cloned().collect());
                let mut list = docs.clone();
                list.shuffle(&mut rng);
                r.insert(format!("q{qi}"), list);
            }
            let mut prev = 0.0;
            for k in 1..=30 {
                let v = recall_at_k(&r, &q, k).unwrap().value;
                assert!(v >= prev);
                prev = v;
            }
            assert!((prev - 1.0).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn mrr_bounded_by_one(perm in Just((0..20).collect::<Vec<usize>>()).prop_shuffle(), k in 1usize..25) {
            let list: Vec<String> = perm.iter().map(|i| format!("d{i}")).collect();
            let r: Ranking = [("q".to_string(), list)].into_iter().collect();
            let q = qrels(&[("q", &["d3"])]);
            let mrr = mrr_at_k(&r, &q, k).unwrap().value;
            let rec = recall_at_k(&r, &q, k).unwrap().value;
            prop_assert!((0.0..=1.0).contains(&mrr));
            prop_assert!(mrr <= rec);
        }
    }
}
