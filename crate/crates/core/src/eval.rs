//! Corpus BLEU and tag error rates.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use crate::data::read_lines;
use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 4;
pub const DEFAULT_TAG_DELIMITER: &str = ".";

#[derive(Clone, Debug, PartialEq)]
pub struct BleuReport {
    /// In `[0, 100]`.
    pub score: f64,
    /// Modified precision per order; `None` when the hypotheses have no n-grams of that order.
    pub precisions: [Option<f64>; MAX_ORDER],
    pub matches: [usize; MAX_ORDER],
    pub totals: [usize; MAX_ORDER],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuReport {
    pub fn ratio(&self) -> f64 {
        if self.ref_len == 0 {
            0.0
        } else {
            self.hyp_len as f64 / self.ref_len as f64
        }
    }
}

impl fmt::Display for BleuReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ps: Vec<String> = self
            .precisions
            .iter()
            .map(|p| p.map_or("-".to_string(), |p| format!("{:.1}", 100.0 * p)))
            .collect();
        write!(
            f,
            "BLEU = {:.2}, {} (BP={:.3}, ratio={:.3}, hyp_len={}, ref_len={})",
            self.score,
            ps.join("/"),
            self.brevity_penalty,
            self.ratio(),
            self.hyp_len,
            self.ref_len
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TagReport {
    /// In `[0, 100]`.
    pub rate: f64,
    pub errors: usize,
    pub total: usize,
    pub sentences: usize,
}

impl fmt::Display for TagReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "ERR = {:.2} (errors={}, total={}, sentences={})",
            self.rate, self.errors, self.total, self.sentences
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ScoreReport {
    Bleu(BleuReport),
    TagError(TagReport),
}

impl ScoreReport {
    pub fn metric(&self) -> &'static str {
        match self {
            ScoreReport::Bleu(_) => "bleu",
            ScoreReport::TagError(_) => "tag-error",
        }
    }

    pub fn value(&self) -> f64 {
        match self {
            ScoreReport::Bleu(b) => b.score,
            ScoreReport::TagError(t) => t.rate,
        }
    }

    /// `metric=value`, for scripts.
    pub fn summary(&self) -> String {
        format!("{}={:.2}", self.metric(), self.value())
    }
}

impl fmt::Display for ScoreReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScoreReport::Bleu(b) => b.fmt(f),
            ScoreReport::TagError(t) => t.fmt(f),
        }
    }
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    out
}

fn check_lines(hyp: usize, reference: usize) -> Result<()> {
    if hyp != reference {
        return Err(Error::LineCountMismatch {
            left: "hypothesis".into(),
            left_lines: hyp,
            right: "reference".into(),
            right_lines: reference,
        });
    }
    if hyp == 0 {
        return Err(Error::Empty("corpus"));
    }
    Ok(())
}

/// Corpus BLEU-4 with clipped counts and brevity penalty. Orders without any
/// hypothesis n-gram are left out of the geometric mean. An order with
/// n-grams but no matches, after a lower order with matches, counts
/// `1/2^k` matches for the k-th such order in a row.
pub fn bleu<S: AsRef<str>, T: AsRef<str>>(hypotheses: &[Vec<S>], references: &[Vec<T>]) -> Result<BleuReport> {
    check_lines(hypotheses.len(), references.len())?;
    let mut matches = [0usize; MAX_ORDER];
    let mut totals = [0usize; MAX_ORDER];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (h, r) in hypotheses.iter().zip(references) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=MAX_ORDER {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(r, n);
            for (g, &c) in &hc {
                totals[n - 1] += c;
                matches[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
            }
        }
    }
    let mut precisions = [None; MAX_ORDER];
    let mut log_sum = 0.0;
    let mut orders = 0;
    let mut zero_run = 0;
    let mut dead = false;
    for n in 0..MAX_ORDER {
        if totals[n] == 0 {
            continue;
        }
        let p = if matches[n] > 0 {
            zero_run = 0;
            matches[n] as f64 / totals[n] as f64
        } else if n == 0 {
            dead = true;
            0.0
        } else {
            zero_run += 1;
            0.5f64.powi(zero_run) / totals[n] as f64
        };
        precisions[n] = Some(matches[n] as f64 / totals[n] as f64);
        if p > 0.0 {
            log_sum += p.ln();
        }
        orders += 1;
    }
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len <= ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    let score = if dead || orders == 0 {
        0.0
    } else {
        100.0 * brevity_penalty * (log_sum / orders as f64).exp()
    };
    Ok(BleuReport {
        score: score.clamp(0.0, 100.0),
        precisions,
        matches,
        totals,
        brevity_penalty,
        hyp_len,
        ref_len,
    })
}

/// Percentage of positions whose labels differ.
pub fn tag_error_rate<S: AsRef<str>, T: AsRef<str>>(hypotheses: &[Vec<S>], references: &[Vec<T>]) -> Result<TagReport> {
    check_lines(hypotheses.len(), references.len())?;
    let (mut errors, mut total) = (0, 0);
    for (i, (h, r)) in hypotheses.iter().zip(references).enumerate() {
        if h.len() != r.len() {
            return Err(Error::SentenceLengthMismatch {
                index: i + 1,
                hyp: h.len(),
                reference: r.len(),
            });
        }
        total += r.len();
        errors += h.iter().zip(r).filter(|(a, b)| a.as_ref() != b.as_ref()).count();
    }
    if total == 0 {
        return Err(Error::Empty("tag sequences"));
    }
    Ok(TagReport {
        rate: 100.0 * errors as f64 / total as f64,
        errors,
        total,
        sentences: hypotheses.len(),
    })
}

/// The part of `tag` before the first `delimiter`.
pub fn coarse_from_fine<'a>(tag: &'a str, delimiter: &str) -> Result<&'a str> {
    if tag.is_empty() {
        return Err(Error::Invalid("empty tag".into()));
    }
    if delimiter.is_empty() {
        return Ok(tag);
    }
    Ok(tag.split_once(delimiter).map_or(tag, |(head, _)| head))
}

fn tokenized(path: &Path) -> Result<Vec<Vec<String>>> {
    Ok(read_lines(path)?
        .iter()
        .map(|l| l.split_whitespace().map(String::from).collect())
        .collect())
}

pub fn bleu_files(hyp: &Path, reference: &Path) -> Result<BleuReport> {
    let (h, r) = (tokenized(hyp)?, tokenized(reference)?);
    if h.len() != r.len() {
        return Err(Error::LineCountMismatch {
            left: hyp.display().to_string(),
            left_lines: h.len(),
            right: reference.display().to_string(),
            right_lines: r.len(),
        });
    }
    bleu(&h, &r)
}

/// Error rate between two files of space-separated labels. With `coarse`,
/// both sides are reduced by [`coarse_from_fine`] with that delimiter first.
pub fn tag_error_files(hyp: &Path, reference: &Path, coarse: Option<&str>) -> Result<TagReport> {
    let (mut h, mut r) = (tokenized(hyp)?, tokenized(reference)?);
    if h.len() != r.len() {
        return Err(Error::LineCountMismatch {
            left: hyp.display().to_string(),
            left_lines: h.len(),
            right: reference.display().to_string(),
            right_lines: r.len(),
        });
    }
    if let Some(d) = coarse {
        for seq in h.iter_mut().chain(r.iter_mut()) {
            for t in seq.iter_mut() {
                *t = coarse_from_fine(t, d)?.to_string();
            }
        }
    }
    tag_error_rate(&h, &r)
}
