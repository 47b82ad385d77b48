//! External-memory dedup and shuffle of line-oriented shards.
//!
//! Three passes, each bounded by the memory budget:
//! 1. cut the input into in-memory runs sorted by `(hash(record), record)`,
//!    dropping duplicates inside each run;
//! 2. k-way merge the runs (at most `fan_in` at a time), dropping duplicates
//!    across runs;
//! 3. scatter the distinct records into seeded random buckets small enough to
//!    shuffle in memory, then Fisher-Yates each bucket into the output.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{GurError, Result};

pub const DEFAULT_MEMORY_BUDGET: usize = 256 << 20;
pub const DEFAULT_FAN_IN: usize = 64;
const MIN_BUDGET: usize = 1 << 20;
const MIN_READER_BUF: usize = 8 << 10;
// Vec header, hash and allocator slack per buffered record.
const RECORD_OVERHEAD: usize = 48;

#[derive(Debug, Clone)]
pub struct ShuffleOptions {
    pub seed: u64,
    pub memory_budget: usize,
    pub fan_in: usize,
    /// Scratch directory for runs; a fresh temp dir when `None`.
    pub tmp_dir: Option<PathBuf>,
}

impl Default for ShuffleOptions {
    fn default() -> Self {
        ShuffleOptions {
            seed: 0,
            memory_budget: DEFAULT_MEMORY_BUDGET,
            fan_in: DEFAULT_FAN_IN,
            tmp_dir: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShuffleStats {
    pub records_in: usize,
    pub records_out: usize,
    pub runs: usize,
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

type Keyed = (u64, Vec<u8>);

/// Writes the distinct lines of `shards`, in a seed-determined random order,
/// to `out`.
pub fn dedup_and_shuffle(shards: &[PathBuf], out: &Path, opts: &ShuffleOptions) -> Result<ShuffleStats> {
    if opts.memory_budget < MIN_BUDGET {
        return Err(GurError::invalid(format!(
            "memory budget {} below minimum {MIN_BUDGET}",
            opts.memory_budget
        )));
    }
    if opts.fan_in < 2 || opts.memory_budget / (2 * opts.fan_in) < MIN_READER_BUF {
        return Err(GurError::invalid(format!(
            "memory budget {} cannot hold merge fan-in {} ({} bytes per reader, need {MIN_READER_BUF})",
            opts.memory_budget,
            opts.fan_in,
            opts.memory_budget / (2 * opts.fan_in.max(1))
        )));
    }
    for s in shards {
        File::open(s).map_err(|e| GurError::io(s, e))?;
    }

    let scratch_holder;
    let scratch: &Path = match &opts.tmp_dir {
        Some(p) => p,
        None => {
            scratch_holder = tempfile::tempdir().map_err(|e| GurError::io(std::env::temp_dir(), e))?;
            scratch_holder.path()
        }
    };

    let run_budget = opts.memory_budget / 2;
    let (mut runs, records_in, bytes_in) = write_sorted_runs(shards, scratch, run_budget)?;
    let n_runs = runs.len();

    let reader_buf = opts.memory_budget / (2 * opts.fan_in);
    let mut generation = 0;
    while runs.len() > opts.fan_in {
        let mut next = Vec::new();
        for (i, group) in runs.chunks(opts.fan_in).enumerate() {
            let path = scratch.join(format!("merge.{generation}.{i}"));
            let mut w = writer(&path)?;
            merge_runs(group, reader_buf, |rec| write_line(&mut w, &path, rec))?;
            w.flush().map_err(|e| GurError::io(&path, e))?;
            next.push(path);
        }
        for r in &runs {
            let _ = std::fs::remove_file(r);
        }
        runs = next;
        generation += 1;
    }

    // Scatter pass: each bucket should fit in half the budget.
    let n_buckets = (bytes_in * 2 / opts.memory_budget + 1).max(1);
    if n_buckets > 4096 {
        return Err(GurError::invalid(format!(
            "memory budget {} too small for {} input bytes ({n_buckets} shuffle buckets)",
            opts.memory_budget, bytes_in
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let bucket_paths: Vec<PathBuf> = (0..n_buckets).map(|i| scratch.join(format!("scatter.{i}"))).collect();
    let mut bucket_writers = bucket_paths.iter().map(|p| writer(p)).collect::<Result<Vec<_>>>()?;
    let mut records_out = 0usize;
    merge_runs(&runs, reader_buf, |rec| {
        records_out += 1;
        let b = if n_buckets == 1 { 0 } else { rng.gen_range(0..n_buckets) };
        write_line(&mut bucket_writers[b], &bucket_paths[b], rec)
    })?;
    for (w, p) in bucket_writers.iter_mut().zip(&bucket_paths) {
        w.flush().map_err(|e| GurError::io(p, e))?;
    }
    drop(bucket_writers);
    for r in &runs {
        let _ = std::fs::remove_file(r);
    }

    let mut w = writer(out)?;
    for p in &bucket_paths {
        let mut lines = read_lines(p)?;
        lines.shuffle(&mut rng);
        for l in &lines {
            write_line(&mut w, out, l)?;
        }
        let _ = std::fs::remove_file(p);
    }
    w.flush().map_err(|e| GurError::io(out, e))?;

    Ok(ShuffleStats {
        records_in,
        records_out,
        runs: n_runs,
    })
}

fn writer(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(|f| BufWriter::with_capacity(64 << 10, f))
        .map_err(|e| GurError::io(path, e))
}

fn write_line(w: &mut impl Write, path: &Path, rec: &[u8]) -> Result<()> {
    w.write_all(rec)
        .and_then(|_| w.write_all(b"\n"))
        .map_err(|e| GurError::io(path, e))
}

fn read_lines(path: &Path) -> Result<Vec<Vec<u8>>> {
    let f = File::open(path).map_err(|e| GurError::io(path, e))?;
    let mut r = BufReader::new(f);
    let mut out = Vec::new();
    while let Some(l) = next_line(&mut r, path)? {
        out.push(l);
    }
    Ok(out)
}

fn next_line(r: &mut impl BufRead, path: &Path) -> Result<Option<Vec<u8>>> {
    loop {
        let mut buf = Vec::new();
        let n = r.read_until(b'\n', &mut buf).map_err(|e| GurError::io(path, e))?;
        if n == 0 {
            return Ok(None);
        }
        while matches!(buf.last(), Some(b'\n' | b'\r')) {
            buf.pop();
        }
        if !buf.is_empty() {
            return Ok(Some(buf));
        }
    }
}

fn write_sorted_runs(shards: &[PathBuf], scratch: &Path, budget: usize) -> Result<(Vec<PathBuf>, usize, usize)> {
    let mut runs = Vec::new();
    let mut chunk: Vec<Keyed> = Vec::new();
    let mut used = 0usize;
    let (mut records, mut bytes) = (0usize, 0usize);

    let flush = |chunk: &mut Vec<Keyed>, runs: &mut Vec<PathBuf>| -> Result<()> {
        if chunk.is_empty() {
            return Ok(());
        }
        chunk.sort_unstable();
        chunk.dedup();
        let path = scratch.join(format!("run.{}", runs.len()));
        let mut w = writer(&path)?;
        for (_, rec) in chunk.iter() {
            write_line(&mut w, &path, rec)?;
        }
        w.flush().map_err(|e| GurError::io(&path, e))?;
        runs.push(path);
        chunk.clear();
        Ok(())
    };

    for shard in shards {
        let f = File::open(shard).map_err(|e| GurError::io(shard, e))?;
        let mut r = BufReader::new(f);
        while let Some(rec) = next_line(&mut r, shard)? {
            records += 1;
            bytes += rec.len() + 1;
            used += rec.len() + RECORD_OVERHEAD;
            chunk.push((fnv1a(&rec), rec));
            if used >= budget {
                flush(&mut chunk, &mut runs)?;
                used = 0;
            }
        }
    }
    flush(&mut chunk, &mut runs)?;
    Ok((runs, records, bytes))
}

/// Streams the union of sorted runs in `(hash, bytes)` order, each distinct
/// record once.
fn merge_runs(runs: &[PathBuf], buf: usize, mut emit: impl FnMut(&[u8]) -> Result<()>) -> Result<()> {
    let mut readers = Vec::with_capacity(runs.len());
    let mut heap = BinaryHeap::new();
    for (i, p) in runs.iter().enumerate() {
        let f = File::open(p).map_err(|e| GurError::io(p, e))?;
        let mut r = BufReader::with_capacity(buf, f);
        if let Some(rec) = next_line(&mut r, p)? {
            heap.push(Reverse((fnv1a(&rec), rec, i)));
        }
        readers.push(r);
    }
    let mut last: Option<Keyed> = None;
    while let Some(Reverse((h, rec, i))) = heap.pop() {
        if let Some(next) = next_line(&mut readers[i], &runs[i])? {
            heap.push(Reverse((fnv1a(&next), next, i)));
        }
        let dup = matches!(&last, Some((lh, lr)) if *lh == h && *lr == rec);
        if !dup {
            emit(&rec)?;
            last = Some((h, rec));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn write(dir: &Path, name: &str, lines: &[&str]) -> PathBuf {
        let p = dir.join(name);
        let mut s = lines.join("\n");
        s.push('\n');
        std::fs::write(&p, s).unwrap();
        p
    }

    fn opts(seed: u64, budget: usize) -> ShuffleOptions {
        ShuffleOptions {
            seed,
            memory_budget: budget,
            ..ShuffleOptions::default()
        }
    }

    #[test]
    fn three_shards_dedup() {
        let d = tempfile::tempdir().unwrap();
        let shards = vec![
            write(d.path(), "0", &["a", "b"]),
            write(d.path(), "1", &["b", "c"]),
            write(d.path(), "2", &["c"]),
        ];
        let out = d.path().join("out");
        let stats = dedup_and_shuffle(&shards, &out, &opts(7, 1 << 20)).unwrap();
        assert_eq!(stats.records_in, 5);
        assert_eq!(stats.records_out, 3);
        let got: HashSet<String> = std::fs::read_to_string(&out)
            .unwrap()
            .lines()
            .map(String::from)
            .collect();
        assert_eq!(got, ["a", "b", "c"].iter().map(|s| s.to_string()).collect());
    }

    #[test]
    fn same_seed_same_bytes() {
        let d = tempfile::tempdir().unwrap();
        let lines: Vec<String> = (0..500).map(|i| format!("record-{i}")).collect();
        let refs: Vec<&str> = lines.iter().map(String::as_str).collect();
        let shards = vec![write(d.path(), "s", &refs)];
        let (a, b, c) = (d.path().join("a"), d.path().join("b"), d.path().join("c"));
        dedup_and_shuffle(&shards, &a, &opts(3, 1 << 20)).unwrap();
        dedup_and_shuffle(&shards, &b, &opts(3, 1 << 20)).unwrap();
        dedup_and_shuffle(&shards, &c, &opts(4, 1 << 20)).unwrap();
        let (a, b, c) = (
            std::fs::read(a).unwrap(),
            std::fs::read(b).unwrap(),
            std::fs::read(c).unwrap(),
        );
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn million_records_half_duplicates() {
        let d = tempfile::tempdir().unwrap();
        let n = 1_000_000usize;
        let mut shards = Vec::new();
        for s in 0..4 {
            let p = d.path().join(format!("shard{s}"));
            let mut w = BufWriter::new(File::create(&p).unwrap());
            for i in (s..n).step_by(4) {
                writeln!(w, "{{\"k\":{}}}", i % (n / 2)).unwrap();
            }
            w.flush().unwrap();
            shards.push(p);
        }
        // Hash-set oracle over the same shards.
        let mut oracle = HashSet::new();
        for p in &shards {
            for l in std::fs::read_to_string(p).unwrap().lines() {
                oracle.insert(l.to_string());
            }
        }
        let out = d.path().join("out");
        let stats = dedup_and_shuffle(&shards, &out, &opts(11, 8 << 20)).unwrap();
        assert!(stats.runs > 1, "expected external runs, got {}", stats.runs);
        assert_eq!(stats.records_out, n / 2);
        assert_eq!(oracle.len(), n / 2);
        let text = std::fs::read_to_string(&out).unwrap();
        let got: Vec<&str> = text.lines().collect();
        assert_eq!(got.len(), n / 2);
        let got_set: HashSet<&str> = got.iter().copied().collect();
        assert_eq!(got_set.len(), n / 2);
        assert!(got_set.iter().all(|l| oracle.contains(*l)));
    }

    #[test]
    fn multi_pass_merge() {
        let d = tempfile::tempdir().unwrap();
        let lines: Vec<String> = (0..60_000).map(|i| format!("{:08}", i % 20_000)).collect();
        let refs: Vec<&str> = lines.iter().map(String::as_str).collect();
        let shards = vec![write(d.path(), "s", &refs)];
        let out = d.path().join("out");
        let o = ShuffleOptions {
            seed: 1,
            memory_budget: 1 << 20,
            fan_in: 2,
            tmp_dir: Some(d.path().to_path_buf()),
        };
        let stats = dedup_and_shuffle(&shards, &out, &o).unwrap();
        assert!(stats.runs > 2);
        assert_eq!(stats.records_out, 20_000);
    }

    #[test]
    fn errors() {
        let d = tempfile::tempdir().unwrap();
        let missing = d.path().join("nope");
        let err = dedup_and_shuffle(&[missing.clone()], &d.path().join("o"), &opts(0, 1 << 20)).unwrap_err();
        assert!(err.to_string().contains("nope"), "{err}");
        let s = write(d.path(), "s", &["x"]);
        assert!(dedup_and_shuffle(&[s.clone()], &d.path().join("o"), &opts(0, 1000)).is_err());
        let o = ShuffleOptions {
            fan_in: 1024,
            ..opts(0, 1 << 20)
        };
        assert!(dedup_and_shuffle(&[s], &d.path().join("o"), &o).is_err());
    }
}
