//! End-to-end runs: config to trained model, and corpus decoding.

use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::config::{prepare, Prepared, RunConfig};
use crate::data::{revert_bpe, BpeModel, Example, Pipeline};
use crate::decoding::{decode, DecodeConfig};
use crate::error::{Error, Result};
use crate::eval::{bleu, tag_error_rate, BleuReport, TagReport};
use crate::model::MultiTaskModel;
use crate::training::{TrainOutcome, Trainer};

pub const MODEL_FILE: &str = "model.bin";
pub const LOG_FILE: &str = "train.log";
pub const BPE_FILE: &str = "bpe.codes";

/// A finished training run.
#[derive(Debug)]
pub struct TrainedRun {
    pub model: MultiTaskModel,
    pub outcome: TrainOutcome,
    pub prepared: Prepared,
}

/// Prepares data, builds the model and trains it. `on_line` sees each log
/// line as it is produced.
pub fn train_run(cfg: &RunConfig, mut on_line: impl FnMut(&str)) -> Result<TrainedRun> {
    let prepared = prepare(cfg)?;
    let model = prepared.build_model(cfg)?;
    let mut trainer = Trainer::new(model, prepared.data.clone(), cfg.training.clone())?;
    trainer.annotate(format!("run-config {}", cfg.effective_json()));
    for (task, total, dropped) in &prepared.filtered {
        trainer.annotate(format!("data task={task} total={total} dropped={dropped}"));
    }
    let mut shown = 0;
    while !trainer.is_done() {
        trainer.step()?;
        for line in &trainer.log()[shown..] {
            on_line(line);
        }
        shown = trainer.log().len();
    }
    let outcome = trainer.run()?;
    for line in &outcome.log[shown..] {
        on_line(line);
    }
    Ok(TrainedRun {
        model: trainer.into_model(),
        outcome,
        prepared,
    })
}

impl TrainedRun {
    /// Writes the model, the log and any BPE codes into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.model.save(&dir.join(MODEL_FILE))?;
        let log = dir.join(LOG_FILE);
        let text: String = self.outcome.log.iter().map(|l| format!("{l}\n")).collect();
        fs::write(&log, text).map_err(|e| Error::io(&log, e))?;
        if let Some(b) = &self.prepared.bpe {
            b.save(&dir.join(BPE_FILE))?;
        }
        Ok(())
    }
}

/// `requested` after checking its kind, or the model's only task of that kind.
pub fn select_task(model: &MultiTaskModel, requested: Option<&str>, tagging: bool) -> Result<String> {
    let kind = if tagging { "tagging" } else { "translation" };
    match requested {
        Some(name) => {
            if model.task(name)?.length_constrained != tagging {
                return Err(Error::Invalid(format!("task '{name}' is not a {kind} task")));
            }
            Ok(name.to_string())
        }
        None => {
            let fits: Vec<&str> = model
                .tasks()
                .iter()
                .filter(|t| t.length_constrained == tagging)
                .map(|t| t.name.as_str())
                .collect();
            match fits.as_slice() {
                [one] => Ok(one.to_string()),
                [] => Err(Error::Invalid(format!("model has no {kind} task"))),
                _ => Err(Error::Invalid(format!(
                    "model has several {kind} tasks ({}); name one",
                    fits.join(", ")
                ))),
            }
        }
    }
}

/// Decodes raw lines of `task` in parallel, keeping input order. Translation
/// output has BPE reverted; tagging output is one label per word.
pub fn decode_lines(
    model: &MultiTaskModel,
    task: &str,
    lines: &[String],
    bpe: Option<&BpeModel>,
    cfg: &DecodeConfig,
) -> Result<Vec<String>> {
    model.task(task)?;
    let pipeline = match bpe {
        Some(b) => Pipeline::with_bpe(b.clone()),
        None => Pipeline::identity(),
    };
    let vocab = model.decoder_vocab(task)?;
    lines
        .par_iter()
        .map(|line| {
            let words = pipeline.words(line);
            if words.is_empty() {
                return Ok(String::new());
            }
            let pieces = pipeline.segment(&words);
            let ids = model.src_vocab().encode(&pieces);
            let hyp = decode(model, task, &ids, words.len(), cfg)?;
            let toks = vocab.decode(hyp.output());
            Ok(revert_bpe(&toks).join(" "))
        })
        .collect()
}

/// Decoded outputs for encoded examples, as target tokens.
pub fn decode_examples(
    model: &MultiTaskModel,
    task: &str,
    examples: &[Example],
    cfg: &DecodeConfig,
) -> Result<Vec<Vec<String>>> {
    let vocab = model.decoder_vocab(task)?;
    examples
        .par_iter()
        .map(|ex| Ok(vocab.decode(decode(model, task, &ex.source, ex.source_words, cfg)?.output())))
        .collect()
}

fn references(model: &MultiTaskModel, task: &str, examples: &[Example]) -> Result<Vec<Vec<String>>> {
    let vocab = model.decoder_vocab(task)?;
    Ok(examples.iter().map(|ex| vocab.decode(&ex.target)).collect())
}

/// BLEU of decoded `examples` after reverting BPE on both sides.
pub fn evaluate_bleu(
    model: &MultiTaskModel,
    task: &str,
    examples: &[Example],
    cfg: &DecodeConfig,
) -> Result<BleuReport> {
    let hyps: Vec<Vec<String>> = decode_examples(model, task, examples, cfg)?
        .iter()
        .map(|h| revert_bpe(h))
        .collect();
    let refs: Vec<Vec<String>> = references(model, task, examples)?
        .iter()
        .map(|r| revert_bpe(r))
        .collect();
    bleu(&hyps, &refs)
}

/// Label error rate of decoded `examples`.
pub fn evaluate_tags(
    model: &MultiTaskModel,
    task: &str,
    examples: &[Example],
    cfg: &DecodeConfig,
) -> Result<TagReport> {
    let hyps = decode_examples(model, task, examples, cfg)?;
    tag_error_rate(&hyps, &references(model, task, examples)?)
}
