//! TOML run configuration and the data preparation it drives.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    learn_bpe, read_parallel, read_tagged, BpeModel, Pipeline, TextExample, Vocabulary, DEFAULT_MAX_LEN,
};
use crate::decoding::DecodeConfig;
use crate::error::{Error, Result};
use crate::layers::LayerDims;
use crate::model::{MultiTaskModel, SharingMode, TaskSpec};
use crate::training::{TaskData, TrainingConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Translation,
    Tagging,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub name: String,
    pub kind: TaskKind,
    #[serde(default)]
    pub main: bool,
    /// Translation corpora.
    pub train_source: Option<PathBuf>,
    pub train_target: Option<PathBuf>,
    pub valid_source: Option<PathBuf>,
    pub valid_target: Option<PathBuf>,
    /// Tagging corpora (`word<TAB>label`).
    pub train: Option<PathBuf>,
    pub valid: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Training pairs with this many words or more on either side are dropped.
    pub max_len: usize,
    /// Learn this many joint BPE merges from all training text.
    pub bpe_merges: Option<usize>,
    /// Or load merges from a file.
    pub bpe_model: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            max_len: DEFAULT_MAX_LEN,
            bpe_merges: None,
            bpe_model: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub mode: SharingMode,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub dims: LayerDims,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub decode: DecodeConfig,
    #[serde(default)]
    pub data: DataConfig,
    pub tasks: Vec<TaskConfig>,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("run")
}

impl RunConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(vec![e.message().to_string()]))?;
        cfg.base_dir = base_dir.to_path_buf();
        Ok(cfg)
    }

    /// Reads, parses and validates a config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let cfg = Self::parse(&text, &base)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn output_path(&self, name: &str) -> PathBuf {
        self.resolve(&self.output_dir).join(name)
    }

    pub fn main_task(&self) -> Option<&TaskConfig> {
        self.tasks.iter().find(|t| t.main)
    }

    /// Every problem in the config.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.schema_version != SCHEMA_VERSION {
            out.push(format!(
                "schema_version is {}, this build reads version {SCHEMA_VERSION}",
                self.schema_version
            ));
        }
        if self.tasks.is_empty() {
            out.push("at least one [[tasks]] entry is required".into());
        }
        let mains = self.tasks.iter().filter(|t| t.main).count();
        if mains != 1 {
            out.push(format!("exactly one task must set main = true, found {mains}"));
        }
        let mut names = BTreeSet::new();
        for t in &self.tasks {
            if t.name.is_empty() || t.name.contains([' ', ',', ':', '#', '=']) {
                out.push(format!(
                    "task name '{}' must be non-empty without spaces or ,:#=",
                    t.name
                ));
            }
            if !names.insert(t.name.as_str()) {
                out.push(format!("duplicate task name '{}'", t.name));
            }
            #[allow(clippy::type_complexity)]
            let (need, forbid): (&[(&str, &Option<PathBuf>)], &[(&str, &Option<PathBuf>)]) = match t.kind {
                TaskKind::Translation => (
                    &[
                        ("train_source", &t.train_source),
                        ("train_target", &t.train_target),
                        ("valid_source", &t.valid_source),
                        ("valid_target", &t.valid_target),
                    ],
                    &[("train", &t.train), ("valid", &t.valid)],
                ),
                TaskKind::Tagging => (
                    &[("train", &t.train), ("valid", &t.valid)],
                    &[
                        ("train_source", &t.train_source),
                        ("train_target", &t.train_target),
                        ("valid_source", &t.valid_source),
                        ("valid_target", &t.valid_target),
                    ],
                ),
            };
            for (key, val) in need {
                match val {
                    None => out.push(format!("task '{}' needs {key}", t.name)),
                    Some(p) if !self.resolve(p).is_file() => out.push(format!(
                        "task '{}': {key} file {} not found",
                        t.name,
                        self.resolve(p).display()
                    )),
                    _ => {}
                }
            }
            for (key, val) in forbid {
                if val.is_some() {
                    out.push(format!("task '{}': {key} does not apply to {:?} tasks", t.name, t.kind));
                }
            }
        }
        if let Err(e) = self.dims.validate() {
            out.push(e.to_string());
        }
        out.extend(self.training.problems());
        out.extend(self.decode.problems());
        if self.data.max_len == 0 {
            out.push("data.max_len must be positive".into());
        }
        match (&self.data.bpe_merges, &self.data.bpe_model) {
            (Some(_), Some(_)) => out.push("set at most one of data.bpe_merges and data.bpe_model".into()),
            (None, Some(p)) if !self.resolve(p).is_file() => {
                out.push(format!("data.bpe_model file {} not found", self.resolve(p).display()))
            }
            _ => {}
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }

    /// The config after defaults, as one JSON line.
    pub fn effective_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

/// Everything needed to build and train a model.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub bpe: Option<BpeModel>,
    pub src_vocab: Vocabulary,
    pub tasks: Vec<TaskSpec>,
    pub data: Vec<TaskData>,
    /// `(task, total, dropped)` from the length filter.
    pub filtered: Vec<(String, usize, usize)>,
}

struct RawTask {
    name: String,
    kind: TaskKind,
    train: Vec<TextExample>,
    valid: Vec<TextExample>,
}

/// Reads all corpora, learns or loads BPE, builds vocabularies and encodes.
pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    cfg.validate()?;
    let ident = Pipeline::identity();
    let mut raw = Vec::new();
    let mut filtered = Vec::new();
    for t in &cfg.tasks {
        let p = |x: &Option<PathBuf>| cfg.resolve(x.as_ref().expect("validated"));
        let (train, valid) = match t.kind {
            TaskKind::Translation => {
                let tr = read_parallel(
                    &t.name,
                    &p(&t.train_source),
                    &p(&t.train_target),
                    cfg.data.max_len,
                    &ident,
                    &ident,
                )?;
                let va = read_parallel(
                    &t.name,
                    &p(&t.valid_source),
                    &p(&t.valid_target),
                    usize::MAX,
                    &ident,
                    &ident,
                )?;
                filtered.push((t.name.clone(), tr.total, tr.dropped));
                (tr.examples, va.examples)
            }
            TaskKind::Tagging => {
                let all = read_tagged(&t.name, &p(&t.train), &ident)?;
                let total = all.len();
                let tr: Vec<TextExample> = all.into_iter().filter(|e| e.source_words < cfg.data.max_len).collect();
                filtered.push((t.name.clone(), total, total - tr.len()));
                (tr, read_tagged(&t.name, &p(&t.valid), &ident)?)
            }
        };
        if train.is_empty() {
            return Err(Error::Invalid(format!(
                "task '{}' has no training examples after filtering",
                t.name
            )));
        }
        raw.push(RawTask {
            name: t.name.clone(),
            kind: t.kind,
            train,
            valid,
        });
    }

    let bpe = match (&cfg.data.bpe_model, cfg.data.bpe_merges) {
        (Some(p), _) => Some(BpeModel::load(&cfg.resolve(p))?),
        (None, Some(n)) => {
            let mut tokens: Vec<&str> = Vec::new();
            for r in &raw {
                for e in &r.train {
                    tokens.extend(e.source.iter().map(String::as_str));
                    if r.kind == TaskKind::Translation {
                        tokens.extend(e.target.iter().map(String::as_str));
                    }
                }
            }
            Some(learn_bpe(tokens, n)?)
        }
        (None, None) => None,
    };
    if let Some(b) = &bpe {
        for r in &mut raw {
            for e in r.train.iter_mut().chain(r.valid.iter_mut()) {
                e.source = b.apply(&e.source);
                if r.kind == TaskKind::Translation {
                    e.target = b.apply(&e.target);
                }
            }
        }
    }

    let src_vocab = Vocabulary::from_corpus(raw.iter().flat_map(|r| r.train.iter().map(|e| e.source.as_slice())));
    let mut tasks = Vec::new();
    let mut data = Vec::new();
    for (r, t) in raw.iter().zip(&cfg.tasks) {
        let tv = Vocabulary::from_corpus(r.train.iter().map(|e| e.target.as_slice()));
        let spec = match r.kind {
            TaskKind::Translation => TaskSpec::translation(&r.name, tv.clone()),
            TaskKind::Tagging => TaskSpec::tagging(&r.name, tv.clone()),
        };
        tasks.push(TaskSpec {
            is_main: t.main,
            ..spec
        });
        data.push(TaskData {
            task: r.name.clone(),
            train: r.train.iter().map(|e| e.encode(&src_vocab, &tv)).collect(),
            valid: r.valid.iter().map(|e| e.encode(&src_vocab, &tv)).collect(),
        });
    }
    Ok(Prepared {
        bpe,
        src_vocab,
        tasks,
        data,
        filtered,
    })
}

impl Prepared {
    pub fn build_model(&self, cfg: &RunConfig) -> Result<MultiTaskModel> {
        MultiTaskModel::build(
            cfg.mode,
            self.tasks.clone(),
            cfg.dims,
            self.src_vocab.clone(),
            cfg.training.seed,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, text: &str) {
        fs::write(dir.join(name), text).unwrap();
    }

    fn setup() -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "tr.src", "a b c\nb c\n");
        write(dir.path(), "tr.tgt", "x y\ny\n");
        write(dir.path(), "va.src", "a c\n");
        write(dir.path(), "va.tgt", "x\n");
        write(dir.path(), "tag.tsv", "a\tD\nb\tN\n\nc\tV\n");
        dir
    }

    const GOOD: &str = r#"
schema_version = 1
mode = "shared-encoder"

[dims]
embed_dim = 4
enc_hidden_per_dir = 3
attn_hidden = 5
dec_hidden = 6

[data]
bpe_merges = 3

[[tasks]]
name = "mt"
kind = "translation"
main = true
train_source = "tr.src"
train_target = "tr.tgt"
valid_source = "va.src"
valid_target = "va.tgt"

[[tasks]]
name = "tag"
kind = "tagging"
train = "tag.tsv"
valid = "tag.tsv"
"#;

    #[test]
    fn good_config_prepares() {
        let dir = setup();
        let cfg = RunConfig::parse(GOOD, dir.path()).unwrap();
        cfg.validate().unwrap();
        let p = prepare(&cfg).unwrap();
        assert_eq!(p.tasks.len(), 2);
        assert!(p.tasks[0].is_main && !p.tasks[0].length_constrained);
        assert!(p.tasks[1].length_constrained);
        assert_eq!(p.data[1].train.len(), 2);
        let m = p.build_model(&cfg).unwrap();
        assert_eq!(m.mode(), SharingMode::SharedEncoder);
    }

    #[test]
    fn unknown_keys_rejected() {
        let dir = setup();
        let bad = GOOD.replace("[data]", "[data]\nbpe_mergez = 4");
        assert!(matches!(RunConfig::parse(&bad, dir.path()), Err(Error::Config(_))));
    }

    #[test]
    fn problems_are_enumerated_together() {
        let dir = setup();
        let bad = GOOD
            .replace("schema_version = 1", "schema_version = 7")
            .replace("name = \"tag\"", "name = \"tag\"\nmain = true")
            .replace("\"tag.tsv\"\nvalid", "\"missing.tsv\"\nvalid");
        let cfg = RunConfig::parse(&bad, dir.path()).unwrap();
        let p = cfg.problems();
        assert!(p.iter().any(|m| m.contains("schema_version")), "{p:?}");
        assert!(p.iter().any(|m| m.contains("main = true, found 2")), "{p:?}");
        assert!(p.iter().any(|m| m.contains("missing.tsv")), "{p:?}");
        assert!(p.len() >= 3);
    }
}
