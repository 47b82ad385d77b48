//! Document ingestion: sentence splitting, normalization, length buckets and
//! cropping, plus the JSONL readers and writers used by the pipeline.

mod shuffle;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GurError, Result};

pub use shuffle::{dedup_and_shuffle, ShuffleOptions, DEFAULT_FAN_IN, DEFAULT_MEMORY_BUDGET};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub id: String,
    pub title: Option<String>,
    pub sentences: Vec<String>,
}

impl Document {
    /// Splits `text` into sentences. Returns `None` when nothing survives.
    pub fn from_text(id: impl Into<String>, title: Option<String>, text: &str) -> Option<Self> {
        let sentences = split_sentences(text);
        if sentences.is_empty() {
            return None;
        }
        let title = title.map(|t| t.trim().to_string()).filter(|t| !t.is_empty());
        Some(Document {
            id: id.into(),
            title,
            sentences,
        })
    }
}

/// One line of the input corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DocumentRecord {
    pub id: String,
    #[serde(default)]
    pub title: Option<String>,
    pub text: String,
}

fn is_cjk_terminal(c: char) -> bool {
    matches!(c, '。' | '！' | '？')
}

fn is_ascii_terminal(c: char) -> bool {
    matches!(c, '.' | '!' | '?')
}

/// Rule-based splitter on terminal punctuation.
///
/// ASCII `. ! ?` end a sentence when followed by whitespace or end of input;
/// full-width `。！？` always end one (CJK text is not space-delimited).
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut iter = text.char_indices().peekable();
    while let Some((i, c)) = iter.next() {
        let end = i + c.len_utf8();
        let boundary = if is_cjk_terminal(c) {
            !matches!(iter.peek(), Some(&(_, n)) if is_cjk_terminal(n) || is_ascii_terminal(n))
        } else if is_ascii_terminal(c) {
            match iter.peek() {
                None => true,
                Some(&(_, n)) => n.is_whitespace(),
            }
        } else {
            false
        };
        if boundary {
            push_trimmed(&mut out, &text[start..end]);
            start = end;
        }
    }
    push_trimmed(&mut out, &text[start..]);
    out
}

fn push_trimmed(out: &mut Vec<String>, s: &str) {
    let s = s.trim();
    if !s.is_empty() {
        out.push(s.to_string());
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NormalizedSentence {
    pub raw: String,
    pub norm: String,
}

/// Lowercase, replace punctuation and symbols by spaces, collapse whitespace.
pub fn normalize(sentence: &str) -> NormalizedSentence {
    NormalizedSentence {
        raw: sentence.to_string(),
        norm: normalize_str(sentence),
    }
}

pub fn normalize_str(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut pending_space = false;
    for c in s.chars().flat_map(char::to_lowercase) {
        if c.is_alphanumeric() {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            pending_space = false;
            out.push(c);
        } else {
            pending_space = true;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bucket {
    Short,
    Long,
}

impl Bucket {
    pub const ALL: [Bucket; 2] = [Bucket::Short, Bucket::Long];

    pub fn name(self) -> &'static str {
        match self {
            Bucket::Short => "short",
            Bucket::Long => "long",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BucketSpec {
    pub char_length_boundary: usize,
    pub short_seq_len: usize,
    pub long_seq_len: usize,
    pub short_lcs_threshold: u32,
    pub long_lcs_threshold: u32,
}

impl Default for BucketSpec {
    fn default() -> Self {
        BucketSpec {
            char_length_boundary: 64,
            short_seq_len: 32,
            long_seq_len: 128,
            short_lcs_threshold: 10,
            long_lcs_threshold: 15,
        }
    }
}

impl BucketSpec {
    pub fn validate(&self) -> Result<()> {
        if self.short_seq_len >= self.long_seq_len {
            return Err(GurError::Config(format!(
                "short_seq_len {} must be below long_seq_len {}",
                self.short_seq_len, self.long_seq_len
            )));
        }
        if self.short_lcs_threshold == 0 || self.long_lcs_threshold == 0 {
            return Err(GurError::Config("lcs thresholds must be positive".into()));
        }
        Ok(())
    }

    /// Bucket by the longer of two sentences (in chars).
    pub fn bucket_for(&self, len_a: usize, len_b: usize) -> Bucket {
        if len_a.max(len_b) < self.char_length_boundary {
            Bucket::Short
        } else {
            Bucket::Long
        }
    }

    pub fn threshold(&self, bucket: Bucket) -> u32 {
        match bucket {
            Bucket::Short => self.short_lcs_threshold,
            Bucket::Long => self.long_lcs_threshold,
        }
    }

    pub fn seq_len(&self, bucket: Bucket) -> usize {
        match bucket {
            Bucket::Short => self.short_seq_len,
            Bucket::Long => self.long_seq_len,
        }
    }

    /// Bucket of a pair, or `None` if its LCS weight is below that bucket's
    /// threshold.
    pub fn assign(&self, s1: &str, s2: &str, weight: u32) -> Option<Bucket> {
        let b = self.bucket_for(s1.chars().count(), s2.chars().count());
        (weight >= self.threshold(b)).then_some(b)
    }
}

/// A contiguous window of at most `max_len` items with a uniform start.
pub fn random_crop<T: Clone, R: Rng + ?Sized>(tokens: &[T], max_len: usize, rng: &mut R) -> Result<Vec<T>> {
    if max_len < 1 {
        return Err(GurError::invalid("random_crop max_len must be >= 1"));
    }
    if tokens.len() <= max_len {
        return Ok(tokens.to_vec());
    }
    let start = rng.gen_range(0..=tokens.len() - max_len);
    Ok(tokens[start..start + max_len].to_vec())
}

/// Reads a JSONL document corpus; documents with no sentences are dropped.
pub fn read_documents(path: &Path) -> Result<Vec<Document>> {
    let records: Vec<DocumentRecord> = read_jsonl(path)?;
    let mut seen = std::collections::HashSet::new();
    let mut docs = Vec::with_capacity(records.len());
    for r in records {
        if !seen.insert(r.id.clone()) {
            return Err(GurError::invalid(format!(
                "duplicate document id {:?} in {}",
                r.id,
                path.display()
            )));
        }
        if let Some(d) = Document::from_text(r.id, r.title, &r.text) {
            docs.push(d);
        }
    }
    Ok(docs)
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = File::open(path).map_err(|e| GurError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| GurError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let v = serde_json::from_str(&line).map_err(|e| GurError::Record {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(v);
    }
    Ok(out)
}

pub fn write_jsonl<'a, T: Serialize + 'a>(path: &Path, items: impl IntoIterator<Item = &'a T>) -> Result<()> {
    let f = File::create(path).map_err(|e| GurError::io(path, e))?;
    let mut w = BufWriter::new(f);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n").map_err(|e| GurError::io(path, e))?;
    }
    w.flush().map_err(|e| GurError::io(path, e))
}
