//! Byte-pair encoding over characters with `@@` continuation markers.
//!
//! Learning repeatedly merges the most frequent adjacent symbol pair across
//! the word-frequency table; equal counts go to the lexicographically
//! smallest pair. Application replays the merge list in order within each
//! word. Every piece except the last of a word carries the `@@` suffix.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MARKER: &str = "@@";

type Pair = (String, String);

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<(String, String)>", into = "Vec<(String, String)>")]
pub struct BpeModel {
    merges: Vec<Pair>,
    ranks: HashMap<Pair, usize>,
}

impl From<Vec<Pair>> for BpeModel {
    fn from(merges: Vec<Pair>) -> Self {
        BpeModel::from_merges(merges)
    }
}

impl From<BpeModel> for Vec<Pair> {
    fn from(m: BpeModel) -> Self {
        m.merges
    }
}

fn merge_word(symbols: &[String], pair: &Pair) -> Vec<String> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == pair.0 && symbols[i + 1] == pair.1 {
            out.push(format!("{}{}", pair.0, pair.1));
            i += 2;
        } else {
            out.push(symbols[i].clone());
            i += 1;
        }
    }
    out
}

fn chars(word: &str) -> Vec<String> {
    word.chars().map(String::from).collect()
}

struct PairStats {
    counts: HashMap<Pair, i64>,
    queue: BTreeSet<(Reverse<i64>, Pair)>,
    words_with: HashMap<Pair, HashSet<usize>>,
}

impl PairStats {
    fn bump(&mut self, pair: &Pair, delta: i64) {
        let c = self.counts.entry(pair.clone()).or_insert(0);
        if *c > 0 {
            self.queue.remove(&(Reverse(*c), pair.clone()));
        }
        *c += delta;
        if *c > 0 {
            self.queue.insert((Reverse(*c), pair.clone()));
        }
    }

    fn add_word(&mut self, idx: usize, symbols: &[String], freq: i64, sign: i64) {
        for w in symbols.windows(2) {
            let p = (w[0].clone(), w[1].clone());
            self.bump(&p, sign * freq);
            if sign > 0 {
                self.words_with.entry(p).or_default().insert(idx);
            }
        }
    }
}

/// Learns up to `n_merges` merges from a token stream.
pub fn learn_bpe<'a, I>(tokens: I, n_merges: usize) -> Result<BpeModel>
where
    I: IntoIterator<Item = &'a str>,
{
    let mut freq: BTreeMap<&str, i64> = BTreeMap::new();
    for t in tokens {
        *freq.entry(t).or_default() += 1;
    }
    if freq.is_empty() {
        return Err(Error::Empty("BPE training corpus"));
    }
    let (words, counts): (Vec<&str>, Vec<i64>) = freq.into_iter().unzip();
    let mut segs: Vec<Vec<String>> = words.iter().map(|w| chars(w)).collect();
    let mut stats = PairStats {
        counts: HashMap::new(),
        queue: BTreeSet::new(),
        words_with: HashMap::new(),
    };
    for (i, s) in segs.iter().enumerate() {
        stats.add_word(i, s, counts[i], 1);
    }

    let mut merges = Vec::new();
    while merges.len() < n_merges {
        let Some((_, best)) = stats.queue.first().cloned() else {
            break;
        };
        let mut affected: Vec<usize> = stats.words_with.remove(&best).unwrap_or_default().into_iter().collect();
        affected.sort_unstable();
        for i in affected {
            if !segs[i].windows(2).any(|w| w[0] == best.0 && w[1] == best.1) {
                continue;
            }
            stats.add_word(i, &segs[i], counts[i], -1);
            segs[i] = merge_word(&segs[i], &best);
            stats.add_word(i, &segs[i], counts[i], 1);
        }
        merges.push(best);
    }
    Ok(BpeModel::from_merges(merges))
}

impl BpeModel {
    pub fn from_merges(merges: Vec<Pair>) -> Self {
        let mut ranks = HashMap::with_capacity(merges.len());
        for (i, p) in merges.iter().enumerate() {
            ranks.entry(p.clone()).or_insert(i);
        }
        BpeModel { merges, ranks }
    }

    pub fn merges(&self) -> &[Pair] {
        &self.merges
    }

    pub fn len(&self) -> usize {
        self.merges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.merges.is_empty()
    }

    /// Pieces of one word, without markers.
    pub fn segment_word(&self, word: &str) -> Vec<String> {
        let mut symbols = chars(word);
        let mut next_rank = 0;
        loop {
            let best = symbols
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0].clone(), w[1].clone())).copied())
                .filter(|&r| r >= next_rank)
                .min();
            let Some(rank) = best else { break };
            symbols = merge_word(&symbols, &self.merges[rank]);
            next_rank = rank + 1;
        }
        symbols
    }

    pub fn apply<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<String> {
        let mut out = Vec::new();
        for t in tokens {
            let pieces = self.segment_word(t.as_ref());
            let last = pieces.len().saturating_sub(1);
            for (i, p) in pieces.into_iter().enumerate() {
                if i < last {
                    out.push(format!("{p}{MARKER}"));
                } else {
                    out.push(p);
                }
            }
        }
        out
    }

    /// Header line with the merge count, then one space-separated pair per line.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = format!("{}\n", self.merges.len());
        for (a, b) in &self.merges {
            text.push_str(&format!("{a} {b}\n"));
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parse_err = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| parse_err(1, "missing merge-count header".into()))?;
        let n: usize = header
            .trim()
            .parse()
            .map_err(|_| parse_err(1, format!("bad merge count '{header}'")))?;
        let mut merges = Vec::with_capacity(n);
        for (i, line) in lines.enumerate() {
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => {
                    merges.push((a.to_string(), b.to_string()))
                }
                _ => return Err(parse_err(i + 2, format!("expected 'left right', got '{line}'"))),
            }
        }
        if merges.len() != n {
            return Err(parse_err(
                1,
                format!("header says {n} merges, file has {}", merges.len()),
            ));
        }
        Ok(BpeModel::from_merges(merges))
    }
}

/// Joins `x@@ y` pieces back into words.
pub fn revert_bpe<S: AsRef<str>>(pieces: &[S]) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut open = false;
    for p in pieces {
        let p = p.as_ref();
        if let Some(stem) = p.strip_suffix(MARKER) {
            cur.push_str(stem);
            open = true;
        } else {
            cur.push_str(p);
            out.push(std::mem::take(&mut cur));
            open = false;
        }
    }
    if open {
        out.push(cur);
    }
    out
}
