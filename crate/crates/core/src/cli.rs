//! The `mtseq` command line.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::RunConfig;
use crate::data::{learn_bpe, read_lines, tokenize, word_count, BpeModel, Truecaser, DEFAULT_MAX_LEN};
use crate::decoding::DecodeConfig;
use crate::error::Error;
use crate::eval::{bleu_files, tag_error_files, ScoreReport, DEFAULT_TAG_DELIMITER};
use crate::model::MultiTaskModel;
use crate::pipeline::{decode_lines, select_task, train_run};
use crate::synth::SynthConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "mtseq",
    version,
    about = "Multi-task attentional sequence-to-sequence models"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Tokenize, truecase, length-filter and optionally BPE-segment a parallel corpus.
    Preprocess(PreprocessArgs),
    /// Learn BPE merges from text.
    BpeLearn(BpeLearnArgs),
    /// Segment text with learned BPE merges.
    BpeApply(BpeApplyArgs),
    /// Train a model from a TOML run config.
    Train(TrainArgs),
    /// Translate one sentence per line.
    Translate(DecodeArgs),
    /// Label every word of one sentence per line.
    Tag(DecodeArgs),
    /// Score hypotheses against references.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Write the synthetic translation and tagging corpus.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long)]
    pub target: PathBuf,
    /// Receives the processed files under their input names, plus manifest.json.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Apply these BPE merges after filtering.
    #[arg(long)]
    pub bpe: Option<PathBuf>,
    /// Reuse a source truecasing model instead of learning one.
    #[arg(long)]
    pub truecase_source: Option<PathBuf>,
    /// Reuse a target truecasing model instead of learning one.
    #[arg(long)]
    pub truecase_target: Option<PathBuf>,
    /// Drop pairs with this many words or more on either side.
    #[arg(long, default_value_t = DEFAULT_MAX_LEN)]
    pub max_len: usize,
}

#[derive(Args, Debug)]
pub struct BpeLearnArgs {
    /// Plain text files, whitespace tokenized.
    #[arg(long = "input", short, required_unless_present = "tagged")]
    pub inputs: Vec<PathBuf>,
    /// Tagged files (`word<TAB>label`); only words are used.
    #[arg(long)]
    pub tagged: Vec<PathBuf>,
    #[arg(long)]
    pub merges: usize,
    #[arg(long, short)]
    pub output: PathBuf,
}

#[derive(Args, Debug)]
pub struct BpeApplyArgs {
    #[arg(long)]
    pub codes: PathBuf,
    /// Defaults to standard input.
    #[arg(long, short)]
    pub input: Option<PathBuf>,
    /// Defaults to standard output.
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `output_dir` from the config.
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Overrides `training.seed` from the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Do not echo the training log to standard error.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Args, Debug)]
pub struct DecodeArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Task to decode; defaults to the only task of the right kind.
    #[arg(long)]
    pub task: Option<String>,
    /// BPE merges used in training.
    #[arg(long)]
    pub bpe: Option<PathBuf>,
    /// Defaults to standard input.
    #[arg(long, short)]
    pub input: Option<PathBuf>,
    /// Defaults to standard output.
    #[arg(long, short)]
    pub output: Option<PathBuf>,
    #[arg(long, default_value_t = DecodeConfig::default().beam)]
    pub beam: usize,
    #[arg(long, default_value_t = DecodeConfig::default().length_penalty)]
    pub length_penalty: f64,
    #[arg(long, default_value_t = DecodeConfig::default().max_len_factor)]
    pub max_len_factor: f64,
}

#[derive(Subcommand, Debug)]
pub enum EvalCommand {
    /// Corpus BLEU-4.
    Bleu {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
    },
    /// Label error rate.
    Tag {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Compare only the part of each label before the delimiter.
        #[arg(long)]
        coarse: bool,
        #[arg(long, default_value = DEFAULT_TAG_DELIMITER)]
        delimiter: String,
    },
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = SynthConfig::default().seed)]
    pub seed: u64,
}

/// A failed command and its exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) | Failure::Run(Error::Config(_)) => EXIT_USAGE,
            Failure::Run(Error::Divergence(_)) => EXIT_DIVERGENCE,
            Failure::Run(_) => EXIT_RUNTIME,
        }
    }

    pub fn message(&self) -> String {
        match self {
            Failure::Usage(m) => m.clone(),
            Failure::Run(Error::Config(problems)) => {
                let mut m = format!("invalid config ({} problems):", problems.len());
                for p in problems {
                    m.push_str(&format!("\n  - {p}"));
                }
                m
            }
            Failure::Run(e) => e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

/// Parses `args` and runs the command; returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message());
            f.exit_code()
        }
    }
}

pub fn run(command: Command) -> CliResult<()> {
    match command {
        Command::Preprocess(a) => preprocess(&a),
        Command::BpeLearn(a) => bpe_learn(&a),
        Command::BpeApply(a) => bpe_apply(&a),
        Command::Train(a) => train(&a),
        Command::Translate(a) => decode_cmd(&a, false),
        Command::Tag(a) => decode_cmd(&a, true),
        Command::Eval(c) => eval(c),
        Command::Synth(a) => {
            let cfg = SynthConfig {
                seed: a.seed,
                ..SynthConfig::default()
            };
            cfg.generate()?.write(&a.out_dir)?;
            Ok(())
        }
    }
}

fn require_file(flag: &str, p: &Path) -> CliResult<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("{flag}: file {} not found", p.display())))
    }
}

fn read_input(path: Option<&Path>) -> CliResult<Vec<String>> {
    match path {
        Some(p) => {
            require_file("--input", p)?;
            Ok(read_lines(p)?)
        }
        None => {
            let mut text = String::new();
            io::stdin()
                .read_to_string(&mut text)
                .map_err(|e| Error::io("<stdin>", e))?;
            Ok(text.lines().map(String::from).collect())
        }
    }
}

fn write_output(path: Option<&Path>, lines: &[String]) -> CliResult<()> {
    let text: String = lines.iter().map(|l| format!("{l}\n")).collect();
    match path {
        Some(p) => fs::write(p, text).map_err(|e| Error::io(p, e).into()),
        None => io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| Error::io("<stdout>", e).into()),
    }
}

/// Counts written by `preprocess`.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub source: String,
    pub target: String,
    pub max_len: usize,
    pub total: usize,
    pub kept: usize,
    pub dropped: usize,
    pub bpe_merges: Option<usize>,
}

fn file_name(p: &Path) -> CliResult<String> {
    p.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .ok_or_else(|| Failure::Usage(format!("{} has no file name", p.display())))
}

fn preprocess(a: &PreprocessArgs) -> CliResult<()> {
    require_file("--source", &a.source)?;
    require_file("--target", &a.target)?;
    if let Some(b) = &a.bpe {
        require_file("--bpe", b)?;
    }
    for (flag, p) in [
        ("--truecase-source", &a.truecase_source),
        ("--truecase-target", &a.truecase_target),
    ] {
        if let Some(p) = p {
            require_file(flag, p)?;
        }
    }
    if a.max_len == 0 {
        return Err(Failure::Usage("--max-len must be positive".into()));
    }
    let (src_name, tgt_name) = (file_name(&a.source)?, file_name(&a.target)?);
    if src_name == tgt_name {
        return Err(Failure::Usage("--source and --target need different file names".into()));
    }
    let src_lines = read_lines(&a.source)?;
    let tgt_lines = read_lines(&a.target)?;
    if src_lines.len() != tgt_lines.len() {
        return Err(Error::LineCountMismatch {
            left: a.source.display().to_string(),
            left_lines: src_lines.len(),
            right: a.target.display().to_string(),
            right_lines: tgt_lines.len(),
        }
        .into());
    }
    let src_tok: Vec<Vec<String>> = src_lines.iter().map(|l| tokenize(l)).collect();
    let tgt_tok: Vec<Vec<String>> = tgt_lines.iter().map(|l| tokenize(l)).collect();
    fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    let truecaser = |given: &Option<PathBuf>, sents: &[Vec<String>], name: &str| -> CliResult<Truecaser> {
        match given {
            Some(p) => Ok(Truecaser::load(p)?),
            None => {
                let tc = Truecaser::learn(sents.iter().map(Vec::as_slice));
                tc.save(&a.out_dir.join(name))?;
                Ok(tc)
            }
        }
    };
    let tc_src = truecaser(&a.truecase_source, &src_tok, "truecase.source")?;
    let tc_tgt = truecaser(&a.truecase_target, &tgt_tok, "truecase.target")?;
    let bpe = a.bpe.as_deref().map(BpeModel::load).transpose()?;

    let (mut src_out, mut tgt_out) = (Vec::new(), Vec::new());
    let mut dropped = 0;
    for (s, t) in src_tok.iter().zip(&tgt_tok) {
        if word_count(s) >= a.max_len || word_count(t) >= a.max_len {
            dropped += 1;
            continue;
        }
        let (s, t) = (tc_src.apply(s), tc_tgt.apply(t));
        let (s, t) = match &bpe {
            Some(b) => (b.apply(&s), b.apply(&t)),
            None => (s, t),
        };
        src_out.push(s.join(" "));
        tgt_out.push(t.join(" "));
    }
    write_output(Some(&a.out_dir.join(&src_name)), &src_out)?;
    write_output(Some(&a.out_dir.join(&tgt_name)), &tgt_out)?;
    let manifest = Manifest {
        source: src_name,
        target: tgt_name,
        max_len: a.max_len,
        total: src_lines.len(),
        kept: src_out.len(),
        dropped,
        bpe_merges: bpe.as_ref().map(BpeModel::len),
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let path = a.out_dir.join("manifest.json");
    fs::write(&path, format!("{json}\n")).map_err(|e| Error::io(&path, e))?;
    println!("{}", serde_json::to_string(&manifest).expect("manifest serializes"));
    Ok(())
}

fn bpe_learn(a: &BpeLearnArgs) -> CliResult<()> {
    let mut tokens: Vec<String> = Vec::new();
    for p in &a.inputs {
        require_file("--input", p)?;
        for l in read_lines(p)? {
            tokens.extend(l.split_whitespace().map(String::from));
        }
    }
    for p in &a.tagged {
        require_file("--tagged", p)?;
        for l in read_lines(p)? {
            if let Some(w) = l.split('\t').next().filter(|w| !w.trim().is_empty()) {
                tokens.push(w.trim().to_string());
            }
        }
    }
    let model = learn_bpe(tokens.iter().map(String::as_str), a.merges)?;
    model.save(&a.output)?;
    Ok(())
}

fn bpe_apply(a: &BpeApplyArgs) -> CliResult<()> {
    require_file("--codes", &a.codes)?;
    let model = BpeModel::load(&a.codes)?;
    let lines = read_input(a.input.as_deref())?;
    let out: Vec<String> = lines
        .iter()
        .map(|l| {
            let words: Vec<&str> = l.split_whitespace().collect();
            model.apply(&words).join(" ")
        })
        .collect();
    write_output(a.output.as_deref(), &out)
}

fn train(a: &TrainArgs) -> CliResult<()> {
    require_file("--config", &a.config)?;
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(dir) = &a.output_dir {
        cfg.output_dir = std::env::current_dir().map_err(|e| Error::io(".", e))?.join(dir);
    }
    if let Some(seed) = a.seed {
        cfg.training.seed = seed;
    }
    let quiet = a.quiet;
    let run = train_run(&cfg, |line| {
        if !quiet {
            eprintln!("{line}");
        }
    })?;
    let dir = cfg.resolve(&cfg.output_dir);
    run.write(&dir)?;
    println!("model={}", dir.join(crate::pipeline::MODEL_FILE).display());
    Ok(())
}

fn decode_cmd(a: &DecodeArgs, tagging: bool) -> CliResult<()> {
    require_file("--model", &a.model)?;
    if let Some(b) = &a.bpe {
        require_file("--bpe", b)?;
    }
    let cfg = DecodeConfig {
        beam: a.beam,
        length_penalty: a.length_penalty,
        max_len_factor: a.max_len_factor,
    };
    let problems = cfg.problems();
    if !problems.is_empty() {
        return Err(Failure::Usage(problems.join("; ")));
    }
    let model = MultiTaskModel::load(&a.model)?;
    let task = select_task(&model, a.task.as_deref(), tagging).map_err(|e| Failure::Usage(e.to_string()))?;
    let bpe = a.bpe.as_deref().map(BpeModel::load).transpose()?;
    let lines = read_input(a.input.as_deref())?;
    let out = decode_lines(&model, &task, &lines, bpe.as_ref(), &cfg)?;
    write_output(a.output.as_deref(), &out)
}

fn eval(c: EvalCommand) -> CliResult<()> {
    let report = match c {
        EvalCommand::Bleu { hyp, reference } => {
            require_file("--hyp", &hyp)?;
            require_file("--ref", &reference)?;
            ScoreReport::Bleu(bleu_files(&hyp, &reference)?)
        }
        EvalCommand::Tag {
            hyp,
            reference,
            coarse,
            delimiter,
        } => {
            require_file("--hyp", &hyp)?;
            require_file("--ref", &reference)?;
            ScoreReport::TagError(tag_error_files(&hyp, &reference, coarse.then_some(delimiter.as_str()))?)
        }
    };
    println!("{}", report.summary());
    println!("{report}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn exit_codes() {
        assert_eq!(Failure::Usage("x".into()).exit_code(), EXIT_USAGE);
        assert_eq!(Failure::Run(Error::Config(vec![])).exit_code(), EXIT_USAGE);
        assert_eq!(
            Failure::Run(Error::Divergence("nan".into())).exit_code(),
            EXIT_DIVERGENCE
        );
        assert_eq!(Failure::Run(Error::Empty("corpus")).exit_code(), EXIT_RUNTIME);
    }
}
