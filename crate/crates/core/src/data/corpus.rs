use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::bpe::{BpeModel, MARKER};
use super::tokenize::tokenize;
use super::truecase::Truecaser;
use super::vocab::Vocabulary;
use crate::error::{Error, Result};

/// Sentences with this many words or more are dropped.
pub const DEFAULT_MAX_LEN: usize = 60;

/// Text normalization applied to one side of a corpus.
#[derive(Clone, Debug, Default)]
pub struct Pipeline {
    /// Run [`tokenize`]; otherwise split on whitespace only.
    pub tokenize: bool,
    pub truecaser: Option<Truecaser>,
    pub bpe: Option<BpeModel>,
}

impl Pipeline {
    /// Whitespace split, nothing else.
    pub fn identity() -> Self {
        Pipeline::default()
    }

    pub fn with_bpe(bpe: BpeModel) -> Self {
        Pipeline {
            bpe: Some(bpe),
            ..Pipeline::default()
        }
    }

    /// Words of a line after tokenization and truecasing.
    pub fn words(&self, line: &str) -> Vec<String> {
        let toks = if self.tokenize {
            tokenize(line)
        } else {
            line.split_whitespace().map(String::from).collect()
        };
        match &self.truecaser {
            Some(tc) => tc.apply(&toks),
            None => toks,
        }
    }

    pub fn segment(&self, words: &[String]) -> Vec<String> {
        match &self.bpe {
            Some(bpe) => bpe.apply(words),
            None => words.to_vec(),
        }
    }
}

/// Number of words in a BPE-segmented sequence.
pub fn word_count<S: AsRef<str>>(pieces: &[S]) -> usize {
    pieces.iter().filter(|p| !p.as_ref().ends_with(MARKER)).count()
}

/// A training pair in token form.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextExample {
    pub task: String,
    pub source: Vec<String>,
    pub target: Vec<String>,
    /// Source length in words before BPE.
    pub source_words: usize,
}

impl TextExample {
    pub fn encode(&self, src_vocab: &Vocabulary, tgt_vocab: &Vocabulary) -> Example {
        Example {
            task: self.task.clone(),
            source: src_vocab.encode(&self.source),
            target: tgt_vocab.encode(&self.target),
            source_words: self.source_words,
        }
    }
}

/// A training pair in id form. Sequences carry no BOS/EOS.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub task: String,
    pub source: Vec<usize>,
    pub target: Vec<usize>,
    pub source_words: usize,
}

impl Example {
    /// Unpadded source plus target length.
    pub fn tokens(&self) -> usize {
        self.source.len() + self.target.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReadReport {
    pub examples: Vec<TextExample>,
    pub total: usize,
    pub dropped: usize,
}

pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let text = String::from_utf8(bytes).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        msg: format!("not valid UTF-8: {e}"),
    })?;
    Ok(text.lines().map(String::from).collect())
}

/// Reads a line-aligned parallel corpus. Pairs where either side has
/// `max_len` words or more are dropped and counted.
pub fn read_parallel(
    task: &str,
    src_path: &Path,
    tgt_path: &Path,
    max_len: usize,
    src: &Pipeline,
    tgt: &Pipeline,
) -> Result<ReadReport> {
    let src_lines = read_lines(src_path)?;
    let tgt_lines = read_lines(tgt_path)?;
    if src_lines.len() != tgt_lines.len() {
        return Err(Error::LineCountMismatch {
            left: src_path.display().to_string(),
            left_lines: src_lines.len(),
            right: tgt_path.display().to_string(),
            right_lines: tgt_lines.len(),
        });
    }
    let mut examples = Vec::with_capacity(src_lines.len());
    let mut dropped = 0;
    for (s, t) in src_lines.iter().zip(&tgt_lines) {
        let sw = src.words(s);
        let tw = tgt.words(t);
        // pre-segmented input counts words, not pieces
        let (s_words, t_words) = (word_count(&sw), word_count(&tw));
        if s_words >= max_len || t_words >= max_len {
            dropped += 1;
            continue;
        }
        examples.push(TextExample {
            task: task.to_string(),
            source: src.segment(&sw),
            target: tgt.segment(&tw),
            source_words: s_words,
        });
    }
    Ok(ReadReport {
        examples,
        total: src_lines.len(),
        dropped,
    })
}

/// Reads `word<TAB>label` lines with blank lines between sentences. Words go
/// through `pipeline`; labels stay whole, one per word.
pub fn read_tagged(task: &str, path: &Path, pipeline: &Pipeline) -> Result<Vec<TextExample>> {
    let lines = read_lines(path)?;
    let mut examples = Vec::new();
    let mut words: Vec<String> = Vec::new();
    let mut labels: Vec<String> = Vec::new();
    let mut flush = |words: &mut Vec<String>, labels: &mut Vec<String>| {
        if words.is_empty() {
            return;
        }
        let words = std::mem::take(words);
        let words = match &pipeline.truecaser {
            Some(tc) => tc.apply(&words),
            None => words,
        };
        examples.push(TextExample {
            task: task.to_string(),
            source: pipeline.segment(&words),
            target: std::mem::take(labels),
            source_words: words.len(),
        });
    };
    for (n, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            flush(&mut words, &mut labels);
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 2 || cols[0].is_empty() || cols[1].is_empty() || cols[0].contains(' ') {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                msg: format!("expected 'word<TAB>label', found {} column(s)", cols.len()),
            });
        }
        words.push(cols[0].to_string());
        labels.push(cols[1].to_string());
    }
    flush(&mut words, &mut labels);
    if examples.is_empty() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg: "no tagged sentences".into(),
        });
    }
    Ok(examples)
}
