//! Longest common substring via suffix automaton.
//!
//! The automaton of `a` accepts exactly the substrings of `a`; walking `b`
//! through it while following suffix links on mismatch yields, at every
//! position of `b`, the longest suffix of `b[..=j]` that occurs in `a`.

use crate::error::{GurError, Result};

const NO_LINK: u32 = u32::MAX;

#[derive(Debug, Clone)]
struct State {
    // Sorted by char; most states have very few outgoing edges.
    next: Vec<(char, u32)>,
    link: u32,
    max_len: u32,
}

impl State {
    fn root() -> Self {
        State {
            next: Vec::new(),
            link: NO_LINK,
            max_len: 0,
        }
    }

    fn get(&self, c: char) -> Option<u32> {
        self.next
            .binary_search_by_key(&c, |&(k, _)| k)
            .ok()
            .map(|i| self.next[i].1)
    }

    fn set(&mut self, c: char, to: u32) {
        match self.next.binary_search_by_key(&c, |&(k, _)| k) {
            Ok(i) => self.next[i].1 = to,
            Err(i) => self.next.insert(i, (c, to)),
        }
    }
}

/// Minimal DFA over the substrings of one string, built online.
#[derive(Debug, Clone)]
pub struct SuffixAutomaton {
    states: Vec<State>,
    last: u32,
}

impl SuffixAutomaton {
    pub fn new(s: &str) -> Self {
        let cap = 2 * s.chars().count() + 1;
        let mut sam = SuffixAutomaton {
            states: Vec::with_capacity(cap),
            last: 0,
        };
        sam.states.push(State::root());
        for c in s.chars() {
            sam.extend(c);
        }
        sam
    }

    fn extend(&mut self, c: char) {
        let cur = self.states.len() as u32;
        let cur_len = self.states[self.last as usize].max_len + 1;
        self.states.push(State {
            next: Vec::new(),
            link: 0,
            max_len: cur_len,
        });

        let mut p = self.last;
        while p != NO_LINK && self.states[p as usize].get(c).is_none() {
            self.states[p as usize].set(c, cur);
            p = self.states[p as usize].link;
        }

        if p != NO_LINK {
            let q = self.states[p as usize].get(c).expect("edge checked above");
            if self.states[p as usize].max_len + 1 == self.states[q as usize].max_len {
                self.states[cur as usize].link = q;
            } else {
                let clone = self.states.len() as u32;
                let mut cloned = self.states[q as usize].clone();
                cloned.max_len = self.states[p as usize].max_len + 1;
                self.states.push(cloned);
                while p != NO_LINK && self.states[p as usize].get(c) == Some(q) {
                    self.states[p as usize].set(c, clone);
                    p = self.states[p as usize].link;
                }
                self.states[q as usize].link = clone;
                self.states[cur as usize].link = clone;
            }
        }
        self.last = cur;
    }

    pub fn num_states(&self) -> usize {
        self.states.len()
    }

    pub fn num_transitions(&self) -> usize {
        self.states.iter().map(|s| s.next.len()).sum()
    }

    /// Id of the state reached after consuming the whole source string.
    pub fn last(&self) -> usize {
        self.last as usize
    }

    /// Suffix link of `state`; `None` for the initial state.
    pub fn suffix_link(&self, state: usize) -> Option<usize> {
        match self.states[state].link {
            NO_LINK => None,
            l => Some(l as usize),
        }
    }

    pub fn max_length(&self, state: usize) -> usize {
        self.states[state].max_len as usize
    }

    pub fn transition(&self, state: usize, c: char) -> Option<usize> {
        self.states[state].get(c).map(|s| s as usize)
    }

    /// True iff `pattern` is a substring of the source string.
    pub fn contains(&self, pattern: &str) -> bool {
        let mut v = 0u32;
        for c in pattern.chars() {
            match self.states[v as usize].get(c) {
                Some(n) => v = n,
                None => return false,
            }
        }
        true
    }

    /// Longest common substring between the source and `other`.
    ///
    /// Returns `(char_length, end)` where `end` is the exclusive char index in
    /// `other` of the first maximal match.
    fn longest_match(&self, other: &[char]) -> (usize, usize) {
        let (mut v, mut len) = (0u32, 0u32);
        let (mut best, mut best_end) = (0u32, 0usize);
        for (j, &c) in other.iter().enumerate() {
            loop {
                if let Some(n) = self.states[v as usize].get(c) {
                    v = n;
                    len += 1;
                    break;
                }
                let link = self.states[v as usize].link;
                if link == NO_LINK {
                    len = 0;
                    break;
                }
                v = link;
                len = self.states[v as usize].max_len;
            }
            if len > best {
                best = len;
                best_end = j + 1;
            }
        }
        (best as usize, best_end)
    }

    /// Longest common substring of the automaton's source and `other`.
    pub fn lcs_with(&self, other: &str) -> LcsResult {
        let chars: Vec<char> = other.chars().collect();
        let (len, end) = self.longest_match(&chars);
        LcsResult::from_chars(&chars[end - len..end])
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LcsResult {
    pub substring: String,
    pub char_length: usize,
    pub weight: u32,
}

impl LcsResult {
    fn from_chars(chars: &[char]) -> Self {
        let substring: String = chars.iter().collect();
        LcsResult {
            weight: lcs_weight(&substring),
            char_length: chars.len(),
            substring,
        }
    }
}

/// A longest common substring of `a` and `b`.
///
/// Ties are broken by the earliest end position in `b`.
pub fn longest_common_substring(a: &str, b: &str) -> LcsResult {
    SuffixAutomaton::new(a).lcs_with(b)
}

pub fn is_cjk_ideograph(c: char) -> bool {
    matches!(c as u32,
        0x4E00..=0x9FFF
        | 0x3400..=0x4DBF
        | 0xF900..=0xFAFF
        | 0x20000..=0x2A6DF
        | 0x2A700..=0x2EBEF
        | 0x30000..=0x3134F)
}

fn is_latin_letter_or_digit(c: char) -> bool {
    c.is_ascii_alphanumeric() || (matches!(c as u32, 0xC0..=0x24F) && c.is_alphabetic())
}

/// Per-character weight: CJK ideograph 5, Latin letter or digit 1, else 0.
pub fn char_weight(c: char) -> u32 {
    if is_cjk_ideograph(c) {
        5
    } else if is_latin_letter_or_digit(c) {
        1
    } else {
        0
    }
}

pub fn lcs_weight(s: &str) -> u32 {
    s.chars().map(char_weight).sum()
}

/// Largest `|a|·|b|` (in chars) accepted by [`brute_force_lcs`].
pub const BRUTE_FORCE_LIMIT: usize = 1_000_000;

/// Quadratic dynamic-programming LCS, used to cross-check the automaton.
pub fn brute_force_lcs(a: &str, b: &str) -> Result<LcsResult> {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.len().saturating_mul(b.len()) > BRUTE_FORCE_LIMIT {
        return Err(GurError::invalid(format!(
            "brute-force LCS limited to {BRUTE_FORCE_LIMIT} cells, got {}x{}",
            a.len(),
            b.len()
        )));
    }
    // prev[i] = length of common suffix of a[..i] and b[..j]
    let mut prev = vec![0usize; a.len() + 1];
    let mut cur = vec![0usize; a.len() + 1];
    let (mut best, mut best_end) = (0usize, 0usize);
    for j in 1..=b.len() {
        for i in 1..=a.len() {
            cur[i] = if a[i - 1] == b[j - 1] { prev[i - 1] + 1 } else { 0 };
            if cur[i] > best {
                best = cur[i];
                best_end = j;
            }
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(LcsResult::from_chars(&b[best_end - best..best_end]))
}
