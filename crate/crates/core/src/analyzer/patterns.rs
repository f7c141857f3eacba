//! Multi-pattern leak scanning.
//!
//! User-supplied sensitive identifiers (device IDs, phone numbers, emails)
//! are compiled into an Aho-Corasick automaton and matched against cleartext
//! traffic, plus base64- and percent-decoded views of the same bytes.

use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::fmt;
use std::path::Path;

/// Where a match was found relative to the original byte stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LeakEncoding {
    Plain,
    Gzip,
    Base64,
    Urlencoded,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LeakMatch {
    pub pattern_index: usize,
    /// Offset within the scanned view (the decoded view for encoded matches).
    pub offset: usize,
    pub encoding: LeakEncoding,
}

#[derive(Debug, thiserror::Error)]
pub enum PatternError {
    #[error("empty pattern {0:?}")]
    EmptyPattern(String),
    #[error("pattern file line {0}: expected `name = value`")]
    BadLine(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Aho-Corasick automaton over the byte alphabet, converted to a full DFA so
/// the scan is a single table step per input byte.
struct Automaton {
    next: Vec<[u32; 256]>,
    out: Vec<Vec<u32>>,
}

impl Automaton {
    fn build(patterns: &[Vec<u8>]) -> Automaton {
        // Trie construction.
        let mut next: Vec<[u32; 256]> = vec![[u32::MAX; 256]];
        let mut out: Vec<Vec<u32>> = vec![Vec::new()];
        for (idx, pat) in patterns.iter().enumerate() {
            let mut state = 0usize;
            for &b in pat {
                let slot = next[state][b as usize];
                state = if slot == u32::MAX {
                    next.push([u32::MAX; 256]);
                    out.push(Vec::new());
                    let new_state = (next.len() - 1) as u32;
                    next[state][b as usize] = new_state;
                    new_state as usize
                } else {
                    slot as usize
                };
            }
            out[state].push(idx as u32);
        }

        // Failure links via BFS, folded directly into the transition table.
        let mut fail = vec![0u32; next.len()];
        let mut queue = VecDeque::new();
        for b in 0..256 {
            let s = next[0][b];
            if s == u32::MAX {
                next[0][b] = 0;
            } else {
                fail[s as usize] = 0;
                queue.push_back(s);
            }
        }
        while let Some(s) = queue.pop_front() {
            let s = s as usize;
            let f = fail[s] as usize;
            let merged: Vec<u32> = out[f].clone();
            out[s].extend(merged);
            for b in 0..256 {
                let t = next[s][b];
                if t == u32::MAX {
                    next[s][b] = next[f][b];
                } else {
                    fail[t as usize] = next[f][b];
                    queue.push_back(t);
                }
            }
        }

        Automaton { next, out }
    }

    /// All (pattern_index, end_offset) occurrences, overlapping included.
    fn find_all(&self, haystack: &[u8], patterns: &[Vec<u8>]) -> Vec<(usize, usize)> {
        let mut state = 0usize;
        let mut hits = Vec::new();
        for (i, &b) in haystack.iter().enumerate() {
            state = self.next[state][b as usize] as usize;
            for &p in &self.out[state] {
                let start = i + 1 - patterns[p as usize].len();
                hits.push((p as usize, start));
            }
        }
        hits
    }
}

/// Named sensitive strings compiled for multi-pattern search.
pub struct PatternSet {
    names: Vec<String>,
    patterns: Vec<Vec<u8>>,
    automaton: Automaton,
    max_len: usize,
}

impl fmt::Debug for PatternSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PatternSet")
            .field("names", &self.names)
            .finish()
    }
}

impl PatternSet {
    pub fn new(entries: Vec<(String, Vec<u8>)>) -> Result<PatternSet, PatternError> {
        let mut names = Vec::with_capacity(entries.len());
        let mut patterns = Vec::with_capacity(entries.len());
        for (name, value) in entries {
            if value.is_empty() {
                return Err(PatternError::EmptyPattern(name));
            }
            names.push(name);
            patterns.push(value);
        }
        let automaton = Automaton::build(&patterns);
        let max_len = patterns.iter().map(Vec::len).max().unwrap_or(0);
        Ok(PatternSet {
            names,
            patterns,
            automaton,
            max_len,
        })
    }

    pub fn empty() -> PatternSet {
        Self::new(Vec::new()).expect("empty set is valid")
    }

    /// Parse a `name = value` pattern file. `#` starts a comment.
    pub fn from_file(path: &Path) -> Result<PatternSet, PatternError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_config_str(&text)
    }

    pub fn from_config_str(text: &str) -> Result<PatternSet, PatternError> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (name, value) = line
                .split_once('=')
                .ok_or(PatternError::BadLine(lineno + 1))?;
            entries.push((
                name.trim().to_string(),
                value.trim().as_bytes().to_vec(),
            ));
        }
        Self::new(entries)
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.is_empty()
    }

    pub fn len(&self) -> usize {
        self.patterns.len()
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn pattern_len(&self, index: usize) -> usize {
        self.patterns[index].len()
    }

    pub fn max_pattern_len(&self) -> usize {
        self.max_len
    }

    /// All occurrences of all patterns in `haystack`, as (index, offset).
    pub fn find_all(&self, haystack: &[u8]) -> Vec<(usize, usize)> {
        if self.patterns.is_empty() {
            return Vec::new();
        }
        self.automaton.find_all(haystack, &self.patterns)
    }
}

/// Scan cleartext for sensitive values: the raw bytes plus base64- and
/// percent-decoded views. Matches in the raw view are tagged `base_encoding`
/// (callers pass `Gzip` for inflated HTTP bodies).
pub fn scan_for_leaks(
    cleartext: &[u8],
    patterns: &PatternSet,
    base_encoding: LeakEncoding,
) -> Vec<LeakMatch> {
    if patterns.is_empty() {
        return Vec::new();
    }
    let mut matches: Vec<LeakMatch> = patterns
        .find_all(cleartext)
        .into_iter()
        .map(|(pattern_index, offset)| LeakMatch {
            pattern_index,
            offset,
            encoding: base_encoding,
        })
        .collect();

    // Base64 view: decode plausible runs and rescan.
    let min_run = 8usize;
    for (run_start, run) in base64_runs(cleartext, min_run) {
        if let Some(decoded) = decode_base64_forgiving(run) {
            for (pattern_index, offset) in patterns.find_all(&decoded) {
                matches.push(LeakMatch {
                    pattern_index,
                    // Offset into the decoded view of the run; anchor callers
                    // to the run via the original start.
                    offset: run_start + offset_to_encoded(offset),
                    encoding: LeakEncoding::Base64,
                });
            }
        }
    }

    // Percent-decoded view (also folds '+' to space).
    if cleartext.contains(&b'%') {
        let decoded = percent_decode(cleartext);
        if decoded != cleartext {
            for (pattern_index, offset) in patterns.find_all(&decoded) {
                matches.push(LeakMatch {
                    pattern_index,
                    offset,
                    encoding: LeakEncoding::Urlencoded,
                });
            }
        }
    }

    matches
}

fn offset_to_encoded(decoded_offset: usize) -> usize {
    decoded_offset / 3 * 4
}

/// Maximal runs of base64 alphabet bytes of at least `min_len`.
fn base64_runs(buf: &[u8], min_len: usize) -> Vec<(usize, &[u8])> {
    let is_b64 = |b: u8| {
        b.is_ascii_alphanumeric() || b == b'+' || b == b'/' || b == b'-' || b == b'_' || b == b'='
    };
    let mut runs = Vec::new();
    let mut start = None;
    for (i, &b) in buf.iter().enumerate() {
        match (is_b64(b), start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                if i - s >= min_len {
                    runs.push((s, &buf[s..i]));
                }
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        if buf.len() - s >= min_len {
            runs.push((s, &buf[s..]));
        }
    }
    runs
}

/// Decode standard or URL-safe base64, tolerating missing padding. Runs that
/// are mostly plain prose decode fine too; the automaton just finds nothing.
fn decode_base64_forgiving(run: &[u8]) -> Option<Vec<u8>> {
    use base64::engine::general_purpose::{STANDARD_NO_PAD, URL_SAFE_NO_PAD};
    use base64::Engine;
    let trimmed: Vec<u8> = run.iter().copied().filter(|&b| b != b'=').collect();
    // A base64 stream of length ≡ 1 (mod 4) is invalid; drop the tail byte.
    let keep = trimmed.len() - (trimmed.len() % 4 == 1) as usize;
    let trimmed = &trimmed[..keep];
    let standard = !trimmed.iter().any(|&b| b == b'-' || b == b'_');
    if standard {
        STANDARD_NO_PAD.decode(trimmed).ok()
    } else {
        URL_SAFE_NO_PAD.decode(trimmed).ok()
    }
}

/// Percent-decoding with `+` treated as space (form encoding).
pub fn percent_decode(buf: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(buf.len());
    let mut i = 0;
    while i < buf.len() {
        match buf[i] {
            b'%' if i + 2 < buf.len() => {
                let hex = |b: u8| match b {
                    b'0'..=b'9' => Some(b - b'0'),
                    b'a'..=b'f' => Some(b - b'a' + 10),
                    b'A'..=b'F' => Some(b - b'A' + 10),
                    _ => None,
                };
                match (hex(buf[i + 1]), hex(buf[i + 2])) {
                    (Some(hi), Some(lo)) => {
                        out.push((hi << 4) | lo);
                        i += 3;
                    }
                    _ => {
                        out.push(buf[i]);
                        i += 1;
                    }
                }
            }
            b'+' => {
                out.push(b' ');
                i += 1;
            }
            b => {
                out.push(b);
                i += 1;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Naive O(n·m) oracle: scan every start position for every pattern.
    pub fn naive_find_all(haystack: &[u8], patterns: &[Vec<u8>]) -> Vec<(usize, usize)> {
        let mut hits = Vec::new();
        for i in 0..haystack.len() {
            for (pi, pat) in patterns.iter().enumerate() {
                if haystack[i..].starts_with(pat) {
                    hits.push((pi, i));
                }
            }
        }
        hits
    }

    fn sorted(mut v: Vec<(usize, usize)>) -> Vec<(usize, usize)> {
        v.sort_unstable();
        v
    }

    #[test]
    fn imei_match_at_offset() {
        let set = PatternSet::new(vec![(
            "imei".into(),
            b"867530912345678".to_vec(),
        )])
        .unwrap();
        let text = b"id=867530912345678&other=1";
        let m = scan_for_leaks(text, &set, LeakEncoding::Plain);
        let plain: Vec<_> = m
            .iter()
            .filter(|m| m.encoding == LeakEncoding::Plain)
            .collect();
        assert_eq!(plain.len(), 1);
        assert_eq!(plain[0].offset, 3);
        assert_eq!(set.name(plain[0].pattern_index), "imei");
    }

    #[test]
    fn overlapping_matches_found() {
        let set = PatternSet::new(vec![
            ("a".into(), b"aba".to_vec()),
            ("b".into(), b"ba".to_vec()),
        ])
        .unwrap();
        let hay = b"ababa";
        let expect = naive_find_all(hay, &[b"aba".to_vec(), b"ba".to_vec()]);
        assert_eq!(sorted(set.find_all(hay)), sorted(expect));
    }

    #[test]
    fn exhaustive_small_alphabet_equivalence() {
        // All strings length ≤ 6 over {a, b} against a few pattern sets.
        let pattern_sets: Vec<Vec<Vec<u8>>> = vec![
            vec![b"a".to_vec()],
            vec![b"ab".to_vec(), b"ba".to_vec()],
            vec![b"aa".to_vec(), b"aab".to_vec(), b"b".to_vec()],
            vec![b"abab".to_vec(), b"bab".to_vec()],
        ];
        for pats in &pattern_sets {
            let entries = pats
                .iter()
                .enumerate()
                .map(|(i, p)| (format!("p{i}"), p.clone()))
                .collect();
            let set = PatternSet::new(entries).unwrap();
            for len in 0..=6usize {
                for bits in 0..(1usize << len) {
                    let s: Vec<u8> = (0..len)
                        .map(|i| if bits >> i & 1 == 1 { b'b' } else { b'a' })
                        .collect();
                    assert_eq!(
                        sorted(set.find_all(&s)),
                        sorted(naive_find_all(&s, pats)),
                        "diverged on {:?} with {:?}",
                        String::from_utf8_lossy(&s),
                        pats
                    );
                }
            }
        }
    }

    #[test]
    fn random_equivalence_with_naive_oracle() {
        let mut seed = 0x9e3779b97f4a7c15u64;
        let mut next = move || {
            seed ^= seed << 13;
            seed ^= seed >> 7;
            seed ^= seed << 17;
            seed
        };
        for _ in 0..500 {
            let n_pat = 1 + (next() % 4) as usize;
            let pats: Vec<Vec<u8>> = (0..n_pat)
                .map(|_| {
                    let len = 1 + (next() % 6) as usize;
                    (0..len).map(|_| b'a' + (next() % 4) as u8).collect()
                })
                .collect();
            let set = PatternSet::new(
                pats.iter()
                    .enumerate()
                    .map(|(i, p)| (format!("p{i}"), p.clone()))
                    .collect(),
            )
            .unwrap();
            let hay: Vec<u8> = (0..(next() % 200) as usize)
                .map(|_| b'a' + (next() % 4) as u8)
                .collect();
            assert_eq!(sorted(set.find_all(&hay)), sorted(naive_find_all(&hay, &pats)));
        }
    }

    #[test]
    fn base64_embedded_value_detected() {
        use base64::engine::general_purpose::STANDARD;
        use base64::Engine;
        let set = PatternSet::new(vec![("email".into(), b"my@email.com".to_vec())]).unwrap();
        let body = format!(
            "POST /track data={} tail",
            STANDARD.encode(b"uid:my@email.com;x")
        );
        let m = scan_for_leaks(body.as_bytes(), &set, LeakEncoding::Plain);
        assert!(
            m.iter().any(|m| m.encoding == LeakEncoding::Base64),
            "matches: {m:?}"
        );
    }

    #[test]
    fn percent_encoded_value_detected() {
        let set = PatternSet::new(vec![("email".into(), b"my@email.com".to_vec())]).unwrap();
        let body = b"q=my%40email.com&x=1";
        let m = scan_for_leaks(body, &set, LeakEncoding::Plain);
        assert!(m.iter().any(|m| m.encoding == LeakEncoding::Urlencoded));
        // Not present in the plain view.
        assert!(!m.iter().any(|m| m.encoding == LeakEncoding::Plain));
    }

    #[test]
    fn pattern_file_parsing() {
        let set = PatternSet::from_config_str(
            "# device identifiers\nimei = 86753091\n\nphone=5551234567\n",
        )
        .unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(set.name(0), "imei");
        assert!(PatternSet::from_config_str("garbage line\n").is_err());
        assert!(PatternSet::from_config_str("name = \n").is_err());
    }
}
