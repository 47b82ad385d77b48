//! Okapi BM25 over lexical terms.

use std::collections::HashMap;

use super::{lexical_terms, Ranking, RetrievalTask};

#[derive(Debug, Clone)]
pub struct Bm25Index {
    ids: Vec<String>,
    postings: HashMap<String, Vec<(usize, u32)>>,
    doc_lens: Vec<usize>,
    avg_doc_len: f64,
    pub k1: f64,
    pub b: f64,
}

impl Bm25Index {
    pub fn new<'a>(docs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Self {
        Self::with_params(docs, 1.2, 0.75)
    }

    pub fn with_params<'a>(docs: impl IntoIterator<Item = (&'a str, &'a str)>, k1: f64, b: f64) -> Self {
        let mut ids = Vec::new();
        let mut postings: HashMap<String, Vec<(usize, u32)>> = HashMap::new();
        let mut doc_lens = Vec::new();
        for (idx, (id, text)) in docs.into_iter().enumerate() {
            let terms = lexical_terms(text);
            doc_lens.push(terms.len());
            let mut tf: HashMap<String, u32> = HashMap::new();
            for t in terms {
                *tf.entry(t).or_default() += 1;
            }
            let mut tf: Vec<_> = tf.into_iter().collect();
            tf.sort();
            for (t, n) in tf {
                postings.entry(t).or_default().push((idx, n));
            }
            ids.push(id.to_string());
        }
        let avg_doc_len = if doc_lens.is_empty() {
            0.0
        } else {
            doc_lens.iter().sum::<usize>() as f64 / doc_lens.len() as f64
        };
        Bm25Index {
            ids,
            postings,
            doc_lens,
            avg_doc_len,
            k1,
            b,
        }
    }

    pub fn from_task(task: &RetrievalTask) -> Self {
        Self::new(task.corpus.iter().map(|(id, t)| (id.as_str(), t.as_str())))
    }

    pub fn num_docs(&self) -> usize {
        self.ids.len()
    }

    pub fn avg_doc_len(&self) -> f64 {
        self.avg_doc_len
    }

    pub fn doc_len(&self, doc: usize) -> usize {
        self.doc_lens[doc]
    }

    pub fn doc_index(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|d| d == id)
    }

    /// `ln(1 + (N - n + 0.5) / (n + 0.5))`.
    pub fn idf(&self, term: &str) -> f64 {
        let n = self.postings.get(term).map_or(0, Vec::len) as f64;
        let total = self.ids.len() as f64;
        (1.0 + (total - n + 0.5) / (n + 0.5)).ln()
    }

    fn tf(&self, term: &str, doc: usize) -> u32 {
        self.postings
            .get(term)
            .and_then(|p| p.binary_search_by_key(&doc, |&(d, _)| d).ok().map(|i| p[i].1))
            .unwrap_or(0)
    }

    /// Sum of per-term contributions; terms absent from the document add 0.
    pub fn score(&self, query_terms: &[String], doc: usize) -> f64 {
        let len_norm = 1.0 - self.b + self.b * self.doc_lens[doc] as f64 / self.avg_doc_len.max(f64::MIN_POSITIVE);
        query_terms
            .iter()
            .map(|t| {
                let tf = self.tf(t, doc) as f64;
                if tf == 0.0 {
                    return 0.0;
                }
                self.idf(t) * tf * (self.k1 + 1.0) / (tf + self.k1 * len_norm)
            })
            .sum()
    }

    /// Top `k` documents by score, ties broken by document id.
    pub fn search(&self, query: &str, k: usize) -> Vec<(String, f64)> {
        let terms = lexical_terms(query);
        let mut scored: Vec<(usize, f64)> = (0..self.ids.len()).map(|d| (d, self.score(&terms, d))).collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| self.ids[a.0].cmp(&self.ids[b.0])));
        scored.truncate(k);
        scored.into_iter().map(|(d, s)| (self.ids[d].clone(), s)).collect()
    }

    pub fn rank_task(&self, task: &RetrievalTask, k: usize) -> Ranking {
        task.queries
            .iter()
            .map(|(qid, q)| (qid.clone(), self.search(q, k).into_iter().map(|(d, _)| d).collect()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn terms(s: &str) -> Vec<String> {
        lexical_terms(s)
    }

    #[test]
    fn disjoint_query_scores_zero() {
        let idx = Bm25Index::new([("a", "red fox"), ("b", "blue whale")]);
        for d in 0..2 {
            assert_eq!(idx.score(&terms("green turtle"), d), 0.0);
        }
    }

    #[test]
    fn single_doc() {
        let idx = Bm25Index::new([("only", "fox")]);
        let s = idx.score(&terms("fox"), 0);
        // N=1, n=1: idf = ln(1 + 0.5/1.5); tf=1, len=avg.
        let expected = (1.0f64 + 0.5 / 1.5).ln() * 2.2 / (1.0 + 1.2);
        assert!(s > 0.0);
        assert!((s - expected).abs() < 1e-12);
    }

    #[test]
    fn additive_over_terms() {
        let idx = Bm25Index::new([("a", "red fox jumps"), ("b", "red whale"), ("c", "fox fox den")]);
        let (q1, q2) = (terms("red"), terms("fox den"));
        let both: Vec<String> = q1.iter().chain(&q2).cloned().collect();
        for d in 0..3 {
            let lhs = idx.score(&both, d);
            assert!((lhs - idx.score(&q1, d) - idx.score(&q2, d)).abs() < 1e-12);
        }
    }

    #[test]
    fn cjk_terms_are_characters() {
        let idx = Bm25Index::new([("a", "北京很大"), ("b", "上海")]);
        assert_eq!(idx.doc_len(0), 4);
        assert!(idx.score(&terms("北"), 0) > 0.0);
        assert_eq!(idx.score(&terms("北"), 1), 0.0);
    }
}
