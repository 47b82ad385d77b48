//! Character-level vocabulary with reserved special and sentinel tokens.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{GurError, Result};
use crate::masking::{sentinel_marker, Sentinels, TokenId};

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const CLS: TokenId = 2;
pub const EOS: TokenId = 3;
pub const DEFAULT_SENTINELS: u32 = 32;

const SPECIALS: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[EOS]"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    sentinel_count: u32,
}

impl Vocab {
    /// Specials, then sentinels, then every distinct character of `texts`
    /// in code point order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, sentinel_count: u32) -> Self {
        let chars: BTreeSet<char> = texts.into_iter().flat_map(str::chars).collect();
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        for i in (0..sentinel_count as usize).rev() {
            tokens.push(sentinel_marker(i));
        }
        tokens.extend(chars.into_iter().map(String::from));
        Self::from_tokens(tokens).expect("well-formed vocabulary")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(GurError::invalid("vocabulary must start with [PAD] [UNK] [CLS] [EOS]"));
        }
        let mut sentinel_count = 0u32;
        while let Some(t) = tokens.get(SPECIALS.len() + sentinel_count as usize) {
            if !is_sentinel_marker(t) {
                break;
            }
            sentinel_count += 1;
        }
        for i in 0..sentinel_count as usize {
            let id = SPECIALS.len() + sentinel_count as usize - 1 - i;
            if tokens[id] != sentinel_marker(i) {
                return Err(GurError::invalid(format!(
                    "sentinel block out of order at {}",
                    tokens[id]
                )));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            let is_special = i < SPECIALS.len() + sentinel_count as usize;
            if !is_special && t.chars().count() != 1 {
                return Err(GurError::invalid(format!(
                    "vocabulary entry {t:?} is not one character"
                )));
            }
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(GurError::invalid(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Vocab {
            tokens,
            index,
            sentinel_count,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn sentinels(&self) -> Sentinels {
        Sentinels {
            base: SPECIALS.len() as TokenId + self.sentinel_count - 1,
            count: self.sentinel_count,
        }
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    /// Characters map to their ids, `<Si>` markers to sentinel ids, unknown
    /// characters to `[UNK]`.
    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        let mut out = Vec::with_capacity(text.len());
        let mut rest = text;
        while let Some(c) = rest.chars().next() {
            if c == '<' {
                if let Some((len, id)) = self.sentinel_prefix(rest) {
                    out.push(id);
                    rest = &rest[len..];
                    continue;
                }
            }
            let mut buf = [0u8; 4];
            out.push(self.id(c.encode_utf8(&mut buf)).unwrap_or(UNK));
            rest = &rest[c.len_utf8()..];
        }
        out
    }

    fn sentinel_prefix(&self, s: &str) -> Option<(usize, TokenId)> {
        let end = s.find('>')?;
        let marker = &s[..=end];
        if !is_sentinel_marker(marker) {
            return None;
        }
        let id = self.id(marker)?;
        Some((marker.len(), id))
    }

    /// Inverse of [`Vocab::tokenize`]; `[PAD]`, `[CLS]` and `[EOS]` render
    /// as nothing.
    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        let mut out = String::new();
        for &id in ids {
            match id {
                PAD | CLS | EOS => {}
                _ => out.push_str(self.tokens.get(id as usize).map_or("[UNK]", String::as_str)),
            }
        }
        out
    }
}

fn is_sentinel_marker(t: &str) -> bool {
    t.strip_prefix("<S")
        .and_then(|r| r.strip_suffix('>'))
        .is_some_and(|n| !n.is_empty() && n.bytes().all(|b| b.is_ascii_digit()) && (n == "0" || !n.starts_with('0')))
}

impl Serialize for Vocab {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.tokens.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocab {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let tokens = Vec::<String>::deserialize(d)?;
        Vocab::from_tokens(tokens).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab() -> Vocab {
        Vocab::build(["abc 北京."], DEFAULT_SENTINELS)
    }

    #[test]
    fn layout() {
        let v = vocab();
        assert_eq!(v.id("[CLS]"), Some(CLS));
        assert_eq!(v.sentinels().base, 35);
        assert_eq!(v.id("<S0>"), Some(35));
        assert_eq!(v.id("<S31>"), Some(4));
        assert_eq!(v.sentinels().id(1), v.id("<S1>"));
        assert_eq!(v.len(), 36 + 7);
    }

    #[test]
    fn round_trip_and_oov() {
        let v = vocab();
        let ids = v.tokenize("abc");
        assert_eq!(ids.len(), 3);
        assert_eq!(v.detokenize(&ids), "abc");
        assert!(v.tokenize("").is_empty());
        assert!(v.tokenize("abz").contains(&UNK));
        assert_eq!(v.tokenize("<S0>a<S1>"), vec![35, v.id("a").unwrap(), 34]);
        assert_eq!(v.detokenize(&v.tokenize("<S0>a<S1>")), "<S0>a<S1>");
        assert_eq!(v.tokenize("<S99>").len(), 5);
        assert_eq!(v.tokenize("<S01>").len(), 5);
    }

    #[test]
    fn serde_round_trip() {
        let v = vocab();
        let json = serde_json::to_string(&v).unwrap();
        assert_eq!(serde_json::from_str::<Vocab>(&json).unwrap(), v);
        assert!(serde_json::from_str::<Vocab>(r#"["a","b"]"#).is_err());
    }

    proptest! {
        #[test]
        fn in_vocab_round_trip(s in "[abc 北京.]{0,40}") {
            let v = vocab();
            prop_assert_eq!(v.detokenize(&v.tokenize(&s)), s);
        }
    }
}
