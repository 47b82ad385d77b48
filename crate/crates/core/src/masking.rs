//! Span-length distributions and sentinel span corruption.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GurError, Result};

pub type TokenId = u32;

/// `P(k) ∝ p^|k - mode|` on `lower..=upper`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HumpGeometricParams {
    pub p: f64,
    pub mode: usize,
    pub lower: usize,
    pub upper: usize,
}

impl Default for HumpGeometricParams {
    fn default() -> Self {
        HumpGeometricParams {
            p: 0.66,
            mode: 3,
            lower: 1,
            upper: 10,
        }
    }
}

impl HumpGeometricParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.p > 0.0 && self.p < 1.0) {
            return Err(GurError::invalid(format!("hump p must lie in (0,1), got {}", self.p)));
        }
        if !(self.lower <= self.mode && self.mode <= self.upper) {
            return Err(GurError::invalid(format!(
                "need lower <= mode <= upper, got {} {} {}",
                self.lower, self.mode, self.upper
            )));
        }
        if self.lower == 0 {
            return Err(GurError::invalid("span lengths start at 1"));
        }
        Ok(())
    }
}

/// A discrete distribution over span lengths `lower..lower + probs.len()`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpanLengthDist {
    lower: usize,
    probs: Vec<f64>,
    cdf: Vec<f64>,
}

impl SpanLengthDist {
    fn from_weights(lower: usize, weights: Vec<f64>) -> Self {
        let z: f64 = weights.iter().sum();
        let probs: Vec<f64> = weights.iter().map(|w| w / z).collect();
        let mut acc = 0.0;
        let mut cdf: Vec<f64> = probs
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        if let Some(last) = cdf.last_mut() {
            *last = 1.0;
        }
        SpanLengthDist { lower, probs, cdf }
    }

    pub fn lower(&self) -> usize {
        self.lower
    }

    pub fn upper(&self) -> usize {
        self.lower + self.probs.len() - 1
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, k: usize) -> f64 {
        if k < self.lower {
            return 0.0;
        }
        self.probs.get(k - self.lower).copied().unwrap_or(0.0)
    }

    pub fn mean(&self) -> f64 {
        self.probs
            .iter()
            .enumerate()
            .map(|(i, p)| (self.lower + i) as f64 * p)
            .sum()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.gen();
        let idx = self.cdf.partition_point(|&c| c <= u).min(self.probs.len() - 1);
        self.lower + idx
    }
}

pub fn hump_geometric_pmf(params: &HumpGeometricParams) -> Result<SpanLengthDist> {
    params.validate()?;
    let weights = (params.lower..=params.upper)
        .map(|k| params.p.powi(k.abs_diff(params.mode) as i32))
        .collect();
    Ok(SpanLengthDist::from_weights(params.lower, weights))
}

/// Geometric `P(k) ∝ p (1-p)^(k-lower)`, clipped to `lower..=upper`.
pub fn geometric_pmf(p: f64, lower: usize, upper: usize) -> Result<SpanLengthDist> {
    if !(p > 0.0 && p < 1.0) {
        return Err(GurError::invalid(format!("geometric p must lie in (0,1), got {p}")));
    }
    if lower == 0 || lower > upper {
        return Err(GurError::invalid(format!("bad support {lower}..={upper}")));
    }
    let weights = (lower..=upper)
        .map(|k| p * (1.0 - p).powi((k - lower) as i32))
        .collect();
    Ok(SpanLengthDist::from_weights(lower, weights))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpanDistKind {
    Hump,
    Geometric,
}

impl std::str::FromStr for SpanDistKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "hump" => Ok(SpanDistKind::Hump),
            "geometric" => Ok(SpanDistKind::Geometric),
            _ => Err(format!("unknown span distribution {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskingConfig {
    pub rate: f64,
    pub dist: SpanDistKind,
    pub hump: HumpGeometricParams,
    /// Success probability when `dist` is geometric.
    pub geometric_p: f64,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        MaskingConfig {
            rate: 0.15,
            dist: SpanDistKind::Hump,
            hump: HumpGeometricParams::default(),
            geometric_p: 0.2,
        }
    }
}

impl MaskingConfig {
    pub fn distribution(&self) -> Result<SpanLengthDist> {
        match self.dist {
            SpanDistKind::Hump => hump_geometric_pmf(&self.hump),
            SpanDistKind::Geometric => geometric_pmf(self.geometric_p, self.hump.lower, self.hump.upper),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub start: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskLayout {
    /// Sorted by start.
    pub spans: Vec<Span>,
    pub mask_rate_target: f64,
}

impl MaskLayout {
    pub fn empty(rate: f64) -> Self {
        MaskLayout {
            spans: Vec::new(),
            mask_rate_target: rate,
        }
    }

    pub fn masked_tokens(&self) -> usize {
        self.spans.iter().map(|s| s.len).sum()
    }
}

const START_ATTEMPTS: usize = 100;

/// Draws spans until `round(rate * seq_len)` tokens are masked.
///
/// The span that would cross the budget is shortened to land on it exactly.
/// Spans keep at least one unmasked token between them; a start that collides
/// is redrawn up to 100 times before sampling stops.
pub fn sample_layout<R: Rng + ?Sized>(
    seq_len: usize,
    rate: f64,
    dist: &SpanLengthDist,
    rng: &mut R,
) -> Result<MaskLayout> {
    if seq_len < 2 {
        return Err(GurError::invalid(format!("seq_len must be >= 2, got {seq_len}")));
    }
    if !(rate > 0.0 && rate < 0.5) {
        return Err(GurError::invalid(format!("mask rate must lie in (0, 0.5), got {rate}")));
    }
    let budget = (rate * seq_len as f64).round() as usize;
    let mut occupied = vec![false; seq_len];
    let mut spans = Vec::new();
    let mut masked = 0usize;
    'outer: while masked < budget {
        let len = dist.sample(rng).min(budget - masked).max(dist.lower()).min(seq_len);
        for _ in 0..START_ATTEMPTS {
            let start = rng.gen_range(0..=seq_len - len);
            let lo = start.saturating_sub(1);
            let hi = (start + len + 1).min(seq_len);
            if occupied[lo..hi].iter().any(|&o| o) {
                continue;
            }
            occupied[start..start + len].iter_mut().for_each(|o| *o = true);
            spans.push(Span { start, len });
            masked += len;
            continue 'outer;
        }
        break;
    }
    spans.sort_by_key(|s| s.start);
    Ok(MaskLayout {
        spans,
        mask_rate_target: rate,
    })
}

/// Sentinel ids `base, base-1, ..., base-count+1` for spans `0, 1, ...`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Sentinels {
    pub base: TokenId,
    pub count: u32,
}

impl Sentinels {
    pub fn id(&self, i: usize) -> Option<TokenId> {
        (i < self.count as usize).then(|| self.base - i as TokenId)
    }

    pub fn index_of(&self, tok: TokenId) -> Option<usize> {
        (tok <= self.base && self.base - tok < self.count).then(|| (self.base - tok) as usize)
    }
}

/// Surface form of sentinel `i` in prompts and decoded text.
pub fn sentinel_marker(i: usize) -> String {
    format!("<S{i}>")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorruptedExample {
    pub encoder_input: Vec<TokenId>,
    pub decoder_target: Vec<TokenId>,
}

pub fn corrupt(
    tokens: &[TokenId],
    layout: &MaskLayout,
    sentinels: Sentinels,
    eos: TokenId,
) -> Result<CorruptedExample> {
    let mut encoder_input = Vec::with_capacity(tokens.len());
    let mut decoder_target = Vec::new();
    let mut pos = 0;
    for (i, span) in layout.spans.iter().enumerate() {
        if span.start < pos {
            return Err(GurError::invalid(format!(
                "span {i} at {} overlaps previous span ending at {pos}",
                span.start
            )));
        }
        if span.len == 0 || span.start + span.len > tokens.len() {
            return Err(GurError::invalid(format!(
                "span {i} ({}, {}) out of range for {} tokens",
                span.start,
                span.len,
                tokens.len()
            )));
        }
        let s = sentinels
            .id(i)
            .ok_or_else(|| GurError::invalid(format!("layout has more than {} spans", sentinels.count)))?;
        encoder_input.extend_from_slice(&tokens[pos..span.start]);
        encoder_input.push(s);
        decoder_target.push(s);
        decoder_target.extend_from_slice(&tokens[span.start..span.start + span.len]);
        pos = span.start + span.len;
    }
    encoder_input.extend_from_slice(&tokens[pos..]);
    decoder_target.push(eos);
    Ok(CorruptedExample {
        encoder_input,
        decoder_target,
    })
}

/// Substitutes decoded spans back into the encoder input.
pub fn reconstruct(example: &CorruptedExample, sentinels: Sentinels, eos: TokenId) -> Result<Vec<TokenId>> {
    let mut spans: Vec<Vec<TokenId>> = Vec::new();
    for &t in &example.decoder_target {
        if t == eos {
            break;
        }
        match sentinels.index_of(t) {
            Some(i) if i == spans.len() => spans.push(Vec::new()),
            Some(i) => return Err(GurError::invalid(format!("sentinel {i} out of order"))),
            None => spans
                .last_mut()
                .ok_or_else(|| GurError::invalid("target does not start with a sentinel"))?
                .push(t),
        }
    }
    let mut out = Vec::new();
    for &t in &example.encoder_input {
        match sentinels.index_of(t) {
            Some(i) => out.extend_from_slice(
                spans
                    .get(i)
                    .ok_or_else(|| GurError::invalid(format!("no target span for sentinel {i}")))?,
            ),
            None => out.push(t),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const S: Sentinels = Sentinels { base: 1000, count: 32 };
    const EOS: TokenId = 3;

    // Closed-form P(k) by direct summation, independent of SpanLengthDist.
    fn hump_oracle(p: f64, mode: i64, lower: i64, upper: i64) -> Vec<f64> {
        let z: f64 = (lower..=upper).map(|k| p.powi((k - mode).abs() as i32)).sum();
        (lower..=upper).map(|k| p.powi((k - mode).abs() as i32) / z).collect()
    }

    #[test]
    fn hump_defaults() {
        let d = hump_geometric_pmf(&HumpGeometricParams::default()).unwrap();
        let oracle = hump_oracle(0.66, 3, 1, 10);
        for (a, b) in d.probs().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((d.prob(3) - 0.254_395_821_491_393_7).abs() < 1e-12);
        assert!((d.mean() - 3.795_095_995_841_402).abs() < 1e-12);
        assert!((d.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // symmetric decay
        for dlt in 1..=2 {
            assert!((d.prob(3 - dlt) - d.prob(3 + dlt)).abs() < 1e-15);
        }
    }

    #[test]
    fn hump_degenerate_and_invalid() {
        let p = HumpGeometricParams {
            p: 0.66,
            mode: 5,
            lower: 5,
            upper: 5,
        };
        assert_eq!(hump_geometric_pmf(&p).unwrap().probs(), &[1.0]);
        for bad in [
            HumpGeometricParams {
                p: 1.0,
                ..Default::default()
            },
            HumpGeometricParams {
                p: 0.0,
                ..Default::default()
            },
            HumpGeometricParams {
                mode: 11,
                ..Default::default()
            },
        ] {
            assert!(hump_geometric_pmf(&bad).is_err());
        }
    }

    #[test]
    fn geometric_baseline() {
        let d = geometric_pmf(0.2, 1, 10).unwrap();
        let z: f64 = (0..10).map(|k| 0.2 * 0.8f64.powi(k)).sum();
        assert!((d.prob(1) - 0.2 / z).abs() < 1e-15);
        assert!(d.probs().windows(2).all(|w| w[0] > w[1]));
        assert!((d.mean() - 3.8).abs() < 0.1);
        assert_eq!(geometric_pmf(0.5, 1, 1).unwrap().probs(), &[1.0]);
        assert!(geometric_pmf(1.5, 1, 10).is_err());
    }

    #[test]
    fn histogram_matches_pmf() {
        let d = hump_geometric_pmf(&HumpGeometricParams::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 200_000;
        let mut counts = [0usize; 11];
        for _ in 0..n {
            counts[d.sample(&mut rng)] += 1;
        }
        for k in 1..=10 {
            assert!((counts[k] as f64 / n as f64 - d.prob(k)).abs() < 0.005);
        }
        assert_eq!(counts[0], 0);
    }

    #[test]
    fn layout_rate_and_gaps() {
        let d = hump_geometric_pmf(&HumpGeometricParams::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut total = 0.0;
        let trials = 2000;
        for _ in 0..trials {
            let l = sample_layout(128, 0.15, &d, &mut rng).unwrap();
            for w in l.spans.windows(2) {
                assert!(w[0].start + w[0].len < w[1].start);
            }
            assert!(l.spans.iter().all(|s| (1..=10).contains(&s.len)));
            let frac = l.masked_tokens() as f64 / 128.0;
            assert!((0.10..=0.20).contains(&frac));
            total += frac;
        }
        let mean = total / trials as f64;
        assert!((0.14..=0.16).contains(&mean), "{mean}");
        for len in [32, 33, 64, 100] {
            let l = sample_layout(len, 0.15, &d, &mut rng).unwrap();
            let frac = l.masked_tokens() as f64 / len as f64;
            assert!((0.10..=0.20).contains(&frac), "{len}: {frac}");
        }
    }

    #[test]
    fn layout_boundaries() {
        let d = hump_geometric_pmf(&HumpGeometricParams::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = sample_layout(2, 0.15, &d, &mut rng).unwrap();
        assert!(l.spans.is_empty() || (l.spans.len() == 1 && l.spans[0].len == 1));
        assert!(sample_layout(1, 0.15, &d, &mut rng).is_err());
        assert!(sample_layout(10, 0.5, &d, &mut rng).is_err());

        let a = sample_layout(128, 0.15, &d, &mut ChaCha8Rng::seed_from_u64(77)).unwrap();
        let b = sample_layout(128, 0.15, &d, &mut ChaCha8Rng::seed_from_u64(77)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn corrupt_example() {
        let (a, b, c, dd, e) = (10, 11, 12, 13, 14);
        let layout = MaskLayout {
            spans: vec![Span { start: 1, len: 2 }],
            mask_rate_target: 0.15,
        };
        let ex = corrupt(&[a, b, c, dd, e], &layout, S, EOS).unwrap();
        assert_eq!(ex.encoder_input, vec![a, 1000, dd, e]);
        assert_eq!(ex.decoder_target, vec![1000, b, c, EOS]);

        let ex = corrupt(&[a, b], &MaskLayout::empty(0.15), S, EOS).unwrap();
        assert_eq!(ex.encoder_input, vec![a, b]);
        assert_eq!(ex.decoder_target, vec![EOS]);

        let overlapping = MaskLayout {
            spans: vec![Span { start: 0, len: 3 }, Span { start: 2, len: 1 }],
            mask_rate_target: 0.15,
        };
        assert!(corrupt(&[a, b, c, dd, e], &overlapping, S, EOS).is_err());
    }

    #[test]
    fn sentinels_descend() {
        let layout = MaskLayout {
            spans: vec![Span { start: 0, len: 1 }, Span { start: 2, len: 1 }],
            mask_rate_target: 0.15,
        };
        let ex = corrupt(&[5, 6, 7], &layout, S, EOS).unwrap();
        assert_eq!(ex.encoder_input, vec![1000, 6, 999]);
        assert_eq!(ex.decoder_target, vec![1000, 5, 999, 7, EOS]);
    }

    proptest! {
        #[test]
        fn corruption_is_lossless(tokens in proptest::collection::vec(4u32..200, 2..150), seed in any::<u64>()) {
            let d = hump_geometric_pmf(&HumpGeometricParams::default()).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let layout = sample_layout(tokens.len(), 0.15, &d, &mut rng).unwrap();
            let ex = corrupt(&tokens, &layout, S, EOS).unwrap();
            prop_assert_eq!(reconstruct(&ex, S, EOS).unwrap(), tokens);
        }
    }
}
