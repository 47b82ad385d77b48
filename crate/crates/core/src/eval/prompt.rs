//! Auto prompts: mask one non-keyword run of a query with a sentinel.

use std::collections::BTreeSet;
use std::ops::Range;

use rand::Rng;

use crate::corpus::normalize_str;
use crate::lcs::is_cjk_ideograph;
use crate::masking::sentinel_marker;

use super::lexical_terms;

/// A whitespace word or a single CJK ideograph, with its byte range.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptToken {
    pub span: Range<usize>,
    pub term: String,
}

pub fn prompt_tokens(text: &str) -> Vec<PromptToken> {
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    let flush = |start: &mut Option<usize>, end: usize, out: &mut Vec<PromptToken>| {
        if let Some(s) = start.take() {
            out.push(PromptToken {
                span: s..end,
                term: normalize_str(&text[s..end]),
            });
        }
    };
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            flush(&mut start, i, &mut out);
        } else if is_cjk_ideograph(c) {
            flush(&mut start, i, &mut out);
            let end = i + c.len_utf8();
            out.push(PromptToken {
                span: i..end,
                term: c.to_string(),
            });
        } else if start.is_none() {
            start = Some(i);
        }
    }
    flush(&mut start, text.len(), &mut out);
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AutoPrompt {
    pub prompt: String,
    /// Byte range of the query that the sentinel replaced.
    pub masked: Option<Range<usize>>,
    /// True when every token was a keyword and the query is returned as is.
    pub no_op: bool,
}

/// Flags tokens covered by a keyword; multi-term keywords match runs of
/// consecutive tokens.
fn keyword_mask(tokens: &[PromptToken], keywords: &BTreeSet<String>) -> Vec<bool> {
    let mut mask = vec![false; tokens.len()];
    for kw in keywords {
        let terms = lexical_terms(kw);
        if terms.is_empty() {
            continue;
        }
        let joined = terms.join(" ");
        for i in 0..tokens.len() {
            if tokens[i].term == joined {
                mask[i] = true;
            }
            if i + terms.len() <= tokens.len()
                && tokens[i..i + terms.len()].iter().zip(&terms).all(|(t, k)| &t.term == k)
            {
                mask[i..i + terms.len()].iter_mut().for_each(|m| *m = true);
            }
        }
    }
    mask
}

pub fn make_auto_prompt<R: Rng + ?Sized>(query: &str, keywords: &BTreeSet<String>, rng: &mut R) -> AutoPrompt {
    let tokens = prompt_tokens(query);
    let is_kw = keyword_mask(&tokens, keywords);
    let mut runs: Vec<Range<usize>> = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        if is_kw[i] {
            i += 1;
            continue;
        }
        let s = i;
        while i < tokens.len() && !is_kw[i] {
            i += 1;
        }
        runs.push(s..i);
    }
    if runs.is_empty() {
        return AutoPrompt {
            prompt: query.to_string(),
            masked: None,
            no_op: true,
        };
    }
    let run = &runs[rng.gen_range(0..runs.len())];
    let bytes = tokens[run.start].span.start..tokens[run.end - 1].span.end;
    let prompt = format!("{}{}{}", &query[..bytes.start], sentinel_marker(0), &query[bytes.end..]);
    AutoPrompt {
        prompt,
        masked: Some(bytes),
        no_op: false,
    }
}

/// Substitutes each `<Si>` marker in `prompt` with the span the decoder
/// produced after the same marker in `generated`.
pub fn fill_prompt(prompt: &str, generated: &str) -> String {
    let mut spans: Vec<(String, String)> = Vec::new();
    let mut rest = generated;
    let mut i = 0;
    loop {
        let marker = sentinel_marker(i);
        let Some(pos) = rest.find(&marker) else { break };
        let after = &rest[pos + marker.len()..];
        let next = sentinel_marker(i + 1);
        let end = after.find(&next).unwrap_or(after.len());
        spans.push((marker, after[..end].trim().to_string()));
        rest = &after[end..];
        i += 1;
    }
    let mut out = prompt.to_string();
    for (marker, span) in spans {
        out = out.replacen(&marker, &span, 1);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn kws(k: &[&str]) -> BTreeSet<String> {
        k.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn keyword_is_kept() {
        let q = "what brand of separator is good";
        let mut seen = BTreeSet::new();
        for seed in 0..20 {
            let p = make_auto_prompt(q, &kws(&["separator"]), &mut ChaCha8Rng::seed_from_u64(seed));
            assert!(!p.no_op);
            assert!(p.prompt.contains("separator"));
            assert!(p.prompt.contains("<S0>"));
            seen.insert(p.prompt);
        }
        let expected: BTreeSet<String> = ["<S0> separator is good", "what brand of separator <S0>"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        assert_eq!(seen, expected);
    }

    #[test]
    fn all_keywords_is_flagged_no_op() {
        let p = make_auto_prompt("red fox", &kws(&["red", "fox"]), &mut ChaCha8Rng::seed_from_u64(0));
        assert!(p.no_op);
        assert_eq!(p.prompt, "red fox");
        assert_eq!(p.masked, None);
    }

    #[test]
    fn cjk_keyword_spans_characters() {
        let q = "北京的天气怎么样";
        let p = make_auto_prompt(q, &kws(&["北京"]), &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(p.prompt, "北京<S0>");
    }

    #[test]
    fn fill_replaces_markers() {
        assert_eq!(
            fill_prompt("<S0> separator is good", "<S0> which brand of"),
            "which brand of separator is good"
        );
        assert_eq!(fill_prompt("a <S0> c <S1>", "<S0> b <S1> d"), "a b c d");
        assert_eq!(fill_prompt("no markers", "<S0> x"), "no markers");
    }

    #[test]
    fn masked_span_never_touches_keywords() {
        let words = [
            "red", "fox", "jumps", "over", "lazy", "dog", "swift", "den", "blue", "sky",
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..1000 {
            let n = rng.gen_range(1..9);
            let q: Vec<&str> = (0..n).map(|_| words[rng.gen_range(0..words.len())]).collect();
            let q = q.join(" ");
            let kw = kws(&[
                words[rng.gen_range(0..words.len())],
                words[rng.gen_range(0..words.len())],
            ]);
            let p = make_auto_prompt(&q, &kw, &mut rng);
            let kw_tokens: Vec<PromptToken> = prompt_tokens(&q).into_iter().filter(|t| kw.contains(&t.term)).collect();
            match p.masked {
                None => assert!(p.no_op && prompt_tokens(&q).iter().all(|t| kw.contains(&t.term))),
                Some(r) => {
                    for t in &kw_tokens {
                        assert!(t.span.end <= r.start || t.span.start >= r.end, "{q} {kw:?} {r:?}");
                    }
                }
            }
        }
    }
}
