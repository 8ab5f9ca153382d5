//! Greedy, beam and length-constrained decoding.
//!
//! Hypothesis scores are sums of the model's log-softmax values. Masks only
//! restrict which tokens may be chosen: PAD, BOS and UNK never are, and a
//! length constraint forbids EOS until the requested number of labels has
//! been emitted, then allows nothing but EOS.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::data::{BOS, EOS, RESERVED};
use crate::error::{Error, Result};
use crate::layers::{
    attention_cache, cond_gru_step_projected, encode, init_decoder, output_logits, Annotations, AttentionCache,
    SourceBatch,
};
use crate::model::{MultiTaskModel, TaskComponents};
use crate::tensor::{log_softmax_rows, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub beam: usize,
    /// Output length cap as a multiple of the source subword length.
    pub max_len_factor: f64,
    /// Final scores are `log_prob / len^length_penalty`.
    pub length_penalty: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam: 5,
            max_len_factor: 3.0,
            length_penalty: 1.0,
        }
    }
}

impl DecodeConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.beam == 0 {
            out.push("decode.beam must be at least 1".into());
        }
        if !(self.max_len_factor >= 1.0) {
            out.push(format!(
                "decode.max_len_factor must be at least 1, got {}",
                self.max_len_factor
            ));
        }
        if !(self.length_penalty >= 0.0) {
            out.push(format!(
                "decode.length_penalty must be non-negative, got {}",
                self.length_penalty
            ));
        }
        out
    }

    /// Token cap (EOS included) for a source of `source_len` subwords.
    pub fn max_len(&self, source_len: usize) -> usize {
        ((self.max_len_factor * source_len as f64).ceil() as usize).max(1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Task-local ids; ends in EOS when `terminated`.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub terminated: bool,
}

impl Hypothesis {
    /// Tokens without the final EOS.
    pub fn output(&self) -> &[usize] {
        match self.tokens.last() {
            Some(&EOS) if self.terminated => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }

    pub fn normalized_score(&self, length_penalty: f64) -> f64 {
        normalized(self.log_prob, self.tokens.len(), length_penalty)
    }
}

fn normalized(log_prob: f64, len: usize, length_penalty: f64) -> f64 {
    if length_penalty == 0.0 || len == 0 {
        log_prob
    } else {
        log_prob / (len as f64).powf(length_penalty)
    }
}

/// Final-selection order: higher normalized score, then shorter, then
/// lexicographically smaller tokens.
pub fn compare_final(a: &Hypothesis, b: &Hypothesis, length_penalty: f64) -> Ordering {
    b.normalized_score(length_penalty)
        .total_cmp(&a.normalized_score(length_penalty))
        .then(a.tokens.len().cmp(&b.tokens.len()))
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Tokens the decoder may emit at 1-based step `step`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Constraint {
    None,
    Length(usize),
}

impl Constraint {
    fn allows(self, step: usize, token: usize) -> bool {
        let free = token == EOS || token >= RESERVED.len();
        match self {
            Constraint::None => free,
            Constraint::Length(n) if step <= n => token >= RESERVED.len(),
            Constraint::Length(_) => token == EOS,
        }
    }
}

/// Encoder output for one sentence plus the graph it lives on.
struct Session<'m> {
    model: &'m MultiTaskModel,
    c: TaskComponents<'m>,
    g: Graph,
    ann: Annotations,
    cache: AttentionCache,
}

impl<'m> Session<'m> {
    fn start(model: &'m MultiTaskModel, task: &str, source: &[usize]) -> Result<(Self, Var)> {
        let c = model.components(task)?;
        let st = model.params();
        let mut ids = source.to_vec();
        ids.push(EOS);
        let vocab = model.src_vocab().len();
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::IndexOutOfRange {
                what: "source vocabulary",
                index: bad,
                bound: vocab,
            });
        }
        let mut g = Graph::new();
        let src = SourceBatch::single(&ids)?;
        let ann = encode(&mut g, st, c.encoder, &src)?;
        let cache = attention_cache(&mut g, st, c.attention, &ann)?;
        let s0 = init_decoder(&mut g, st, c.decoder.init_w, &ann)?;
        Ok((
            Session {
                model,
                c,
                g,
                ann,
                cache,
            },
            s0,
        ))
    }

    /// Advances `states` (one row per hypothesis) after feeding `prev`.
    /// Returns the new states and the log-softmax rows.
    fn step(&mut self, states: Var, prev: &[usize]) -> Result<(Var, Tensor)> {
        let st = self.model.params();
        let g = &mut self.g;
        let k = prev.len();
        let (ann, cache) = if k == 1 {
            (self.ann.clone(), self.cache.clone())
        } else {
            let rows = vec![0; k];
            (self.ann.select(g, &rows)?, self.cache.select(g, &rows, self.ann.len)?)
        };
        let mapped: Vec<usize> = prev.iter().map(|&y| self.c.to_decoder[y]).collect();
        let table = g.param(st, self.c.decoder.embed);
        let y = g.lookup(table, &mapped)?;
        let w1 = g.param(st, self.c.decoder.gru1.w);
        let b1 = g.param(st, self.c.decoder.gru1.b);
        let yw = g.matmul(y, w1)?;
        let yp = g.add(yw, b1)?;
        let out = cond_gru_step_projected(g, st, self.c.decoder, self.c.attention, yp, states, &ann, &cache)?;
        let logits = output_logits(g, st, self.c.output, out.state, y, out.context)?;
        Ok((out.state, log_softmax_rows(g.value(logits))))
    }
}

struct Live {
    tokens: Vec<usize>,
    log_prob: f64,
}

fn search(
    model: &MultiTaskModel,
    task: &str,
    source: &[usize],
    beam: usize,
    max_len: usize,
    length_penalty: f64,
    constraint: Constraint,
) -> Result<Hypothesis> {
    if beam == 0 {
        return Err(Error::Invalid("beam must be at least 1".into()));
    }
    let (mut sess, s0) = Session::start(model, task, source)?;
    let mut states = s0;
    let mut live = vec![Live {
        tokens: Vec::new(),
        log_prob: 0.0,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for step in 1..=max_len {
        let prev: Vec<usize> = live.iter().map(|h| h.tokens.last().copied().unwrap_or(BOS)).collect();
        let (new_states, lp) = sess.step(states, &prev)?;
        let v = lp.cols();
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (i, h) in live.iter().enumerate() {
            let row = lp.row_slice(i);
            for (y, &l) in row.iter().enumerate().take(v) {
                if constraint.allows(step, y) {
                    cands.push((h.log_prob + l, i, y));
                }
            }
        }
        let keep = beam.min(cands.len());
        let cmp = |a: &(f64, usize, usize), b: &(f64, usize, usize)| {
            b.0.total_cmp(&a.0)
                .then_with(|| live[a.1].tokens.cmp(&live[b.1].tokens))
                .then(a.2.cmp(&b.2))
        };
        if keep < cands.len() {
            cands.select_nth_unstable_by(keep - 1, cmp);
            cands.truncate(keep);
        }
        cands.sort_by(cmp);

        let mut next = Vec::new();
        let mut parents = Vec::new();
        for (score, i, y) in cands {
            let mut tokens = live[i].tokens.clone();
            tokens.push(y);
            if y == EOS {
                finished.push(Hypothesis {
                    tokens,
                    log_prob: score,
                    terminated: true,
                });
            } else {
                next.push(Live {
                    tokens,
                    log_prob: score,
                });
                parents.push(i);
            }
        }
        live = next;
        if live.is_empty() || finished.len() >= beam {
            break;
        }
        states = if parents.len() == prev.len() && parents.iter().enumerate().all(|(a, &b)| a == b) {
            new_states
        } else {
            sess.g.gather_rows(new_states, &parents)?
        };
    }

    let pool: Vec<Hypothesis> = if finished.is_empty() {
        live.into_iter()
            .map(|h| Hypothesis {
                tokens: h.tokens,
                log_prob: h.log_prob,
                terminated: false,
            })
            .collect()
    } else {
        finished
    };
    pool.into_iter()
        .min_by(|a, b| compare_final(a, b, length_penalty))
        .ok_or(Error::Empty("hypotheses"))
}

/// Argmax at every step, lowest id on ties.
pub fn greedy(model: &MultiTaskModel, task: &str, source: &[usize], cfg: &DecodeConfig) -> Result<Hypothesis> {
    search(
        model,
        task,
        source,
        1,
        cfg.max_len(source.len()),
        cfg.length_penalty,
        Constraint::None,
    )
}

pub fn beam_search(model: &MultiTaskModel, task: &str, source: &[usize], cfg: &DecodeConfig) -> Result<Hypothesis> {
    search(
        model,
        task,
        source,
        cfg.beam,
        cfg.max_len(source.len()),
        cfg.length_penalty,
        Constraint::None,
    )
}

/// Beam search with an explicit token cap (EOS included).
pub fn beam_search_capped(
    model: &MultiTaskModel,
    task: &str,
    source: &[usize],
    beam: usize,
    max_len: usize,
    length_penalty: f64,
) -> Result<Hypothesis> {
    if max_len == 0 {
        return Err(Error::Invalid("max_len must be at least 1".into()));
    }
    search(model, task, source, beam, max_len, length_penalty, Constraint::None)
}

/// Emits exactly `target_len` labels followed by EOS.
pub fn constrained_decode(
    model: &MultiTaskModel,
    task: &str,
    source: &[usize],
    target_len: usize,
    cfg: &DecodeConfig,
) -> Result<Hypothesis> {
    if target_len < 1 {
        return Err(Error::Invalid("target length must be at least 1".into()));
    }
    if !model.task(task)?.length_constrained {
        return Err(Error::Invalid(format!("task '{task}' is not length-constrained")));
    }
    search(
        model,
        task,
        source,
        cfg.beam,
        target_len + 1,
        cfg.length_penalty,
        Constraint::Length(target_len),
    )
}

/// Decodes by the task's kind: constrained to `source_words` labels for
/// labeling tasks, beam search otherwise.
pub fn decode(
    model: &MultiTaskModel,
    task: &str,
    source: &[usize],
    source_words: usize,
    cfg: &DecodeConfig,
) -> Result<Hypothesis> {
    if model.task(task)?.length_constrained {
        constrained_decode(model, task, source, source_words, cfg)
    } else {
        beam_search(model, task, source, cfg)
    }
}
