use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use super::corpus::Example;
use super::vocab::{BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::layers::SourceBatch;

/// One task's examples in padded matrix form. Source rows end in EOS; the
/// decoder reads `target_in` (BOS + target) and predicts `target_out`
/// (target + EOS). Both target matrices are block-major, `[b * target_len + t]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub task: String,
    pub source: SourceBatch,
    pub target_in: Vec<usize>,
    pub target_out: Vec<usize>,
    pub target_valid: Vec<bool>,
    pub target_len: usize,
    /// Unpadded source + target tokens, excluding BOS/EOS.
    pub tokens: usize,
    /// Positions of the examples in the slice the batch was built from.
    pub example_ids: Vec<usize>,
}

impl Batch {
    pub fn from_examples(examples: &[&Example]) -> Result<Batch> {
        let first = examples.first().ok_or(Error::Empty("batch"))?;
        if let Some(other) = examples.iter().find(|e| e.task != first.task) {
            return Err(Error::Invalid(format!(
                "batch mixes tasks '{}' and '{}'",
                first.task, other.task
            )));
        }
        let sources: Vec<Vec<usize>> = examples
            .iter()
            .map(|e| e.source.iter().copied().chain([EOS]).collect())
            .collect();
        let source = SourceBatch::from_sequences(&sources, PAD)?;
        let target_len = examples.iter().map(|e| e.target.len() + 1).max().unwrap_or(1);
        let n = examples.len() * target_len;
        let mut target_in = vec![PAD; n];
        let mut target_out = vec![PAD; n];
        let mut target_valid = vec![false; n];
        for (b, e) in examples.iter().enumerate() {
            let row = b * target_len;
            target_in[row] = BOS;
            for (t, &y) in e.target.iter().enumerate() {
                target_in[row + t + 1] = y;
                target_out[row + t] = y;
                target_valid[row + t] = true;
            }
            target_out[row + e.target.len()] = EOS;
            target_valid[row + e.target.len()] = true;
        }
        Ok(Batch {
            task: first.task.clone(),
            source,
            target_in,
            target_out,
            target_valid,
            target_len,
            tokens: examples.iter().map(|e| e.tokens()).sum(),
            example_ids: (0..examples.len()).collect(),
        })
    }

    pub fn size(&self) -> usize {
        self.source.batch
    }

    /// Number of predicted target positions (targets plus EOS).
    pub fn target_tokens(&self) -> usize {
        self.target_valid.iter().filter(|&&v| v).count()
    }
}

/// Buckets examples by source length, shuffles inside each bucket and packs
/// greedily until adding the next example would exceed `token_budget`. An
/// example larger than the budget gets a batch of its own.
pub fn make_batches(examples: &[Example], token_budget: usize, rng: &mut impl Rng) -> Result<Vec<Batch>> {
    if let Some(first) = examples.first() {
        if let Some(other) = examples.iter().find(|e| e.task != first.task) {
            return Err(Error::Invalid(format!(
                "make_batches expects one task, got '{}' and '{}'",
                first.task, other.task
            )));
        }
    }
    let mut buckets: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, e) in examples.iter().enumerate() {
        buckets.entry(e.source.len()).or_default().push(i);
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for bucket in buckets.values_mut() {
        bucket.shuffle(rng);
        let mut cur: Vec<usize> = Vec::new();
        let mut cur_tokens = 0;
        for &i in bucket.iter() {
            let t = examples[i].tokens();
            if !cur.is_empty() && cur_tokens + t > token_budget {
                groups.push(std::mem::take(&mut cur));
                cur_tokens = 0;
            }
            cur.push(i);
            cur_tokens += t;
        }
        if !cur.is_empty() {
            groups.push(cur);
        }
    }
    groups
        .into_iter()
        .map(|ids| {
            let refs: Vec<&Example> = ids.iter().map(|&i| &examples[i]).collect();
            let mut b = Batch::from_examples(&refs)?;
            b.example_ids = ids;
            Ok(b)
        })
        .collect()
}
