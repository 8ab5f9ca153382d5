use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mtseq::data::Vocabulary;
use mtseq::layers::LayerDims;
use mtseq::model::{MultiTaskModel, SharingMode, TaskSpec};

fn mtseq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtseq")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/synth")
}

fn toy_model(dir: &Path) -> PathBuf {
    let src = Vocabulary::from_tokens(["the", "cat", "sat", "on", "mat", "c", "a", "t", "ca"]);
    let tasks = vec![
        TaskSpec::translation("mt", Vocabulary::from_tokens(["le", "chat", "assis", "ch@@", "at"])).main(),
        TaskSpec::tagging("pos", Vocabulary::from_tokens(["D", "N", "V", "P"])),
    ];
    let model = MultiTaskModel::build(SharingMode::SharedEncoder, tasks, LayerDims::new(4, 3, 5, 6), src, 7).unwrap();
    let path = dir.join("model.bin");
    model.save(&path).unwrap();
    path
}

fn write_pair(dir: &Path) -> (PathBuf, PathBuf) {
    let src = dir.join("corpus.en");
    let tgt = dir.join("corpus.de");
    let long = ["w"; 9].join(" ");
    fs::write(
        &src,
        format!(
            "The cat sat .\n{long}\nA dog , barking .\nThe mat\n{}\n",
            ["x"; 8].join(" ")
        ),
    )
    .unwrap();
    fs::write(&tgt, format!("Die Katze saß .\nkurz\n{long}\nDie Matte\nkurz\n")).unwrap();
    (src, tgt)
}

#[test]
fn preprocess_is_repeatable_and_counts_drops() {
    let dir = tempfile::tempdir().unwrap();
    let (src, tgt) = write_pair(dir.path());
    let codes = dir.path().join("codes");
    fs::write(&codes, "2\nT h\nTh e\n").unwrap();
    let run = |out: &str| {
        let out_dir = dir.path().join(out);
        let o = mtseq(&[
            "preprocess",
            "--source",
            s(&src),
            "--target",
            s(&tgt),
            "--out-dir",
            s(&out_dir),
            "--bpe",
            s(&codes),
            "--max-len",
            "9",
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        let files: Vec<Vec<u8>> = [
            "corpus.en",
            "corpus.de",
            "manifest.json",
            "truecase.source",
            "truecase.target",
        ]
        .iter()
        .map(|f| fs::read(out_dir.join(f)).unwrap())
        .collect();
        (files, stdout(&o))
    };
    let (first, summary) = run("a");
    let (second, _) = run("b");
    assert_eq!(first, second);

    // recount with plain whitespace splitting: pairs with 9+ words on a side
    let src_text = fs::read_to_string(&src).unwrap();
    let tgt_text = fs::read_to_string(&tgt).unwrap();
    let dropped = src_text
        .lines()
        .zip(tgt_text.lines())
        .filter(|(a, b)| a.split_whitespace().count() >= 9 || b.split_whitespace().count() >= 9)
        .count();
    let manifest: serde_json::Value = serde_json::from_slice(&first[2]).unwrap();
    assert_eq!(manifest["dropped"], dropped);
    assert_eq!(manifest["total"], 5);
    assert_eq!(manifest["kept"], 5 - dropped);
    assert_eq!(manifest["bpe_merges"], 2);
    assert_eq!(serde_json::from_str::<serde_json::Value>(&summary).unwrap(), manifest);
    let kept = String::from_utf8(first[0].clone()).unwrap();
    assert_eq!(kept.lines().count(), 5 - dropped);
}

#[test]
fn preprocess_names_the_missing_flag() {
    let dir = tempfile::tempdir().unwrap();
    let (src, tgt) = write_pair(dir.path());
    let o = mtseq(&[
        "preprocess",
        "--source",
        s(&src),
        "--target",
        s(&tgt),
        "--out-dir",
        s(&dir.path().join("out")),
        "--bpe",
        "/nonexistent/codes",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--bpe"), "{}", stderr(&o));
    assert!(stderr(&o).contains("/nonexistent/codes"));
}

#[test]
fn config_with_two_mains_lists_every_problem() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(fixtures().join("multitask.toml"))
        .unwrap()
        .replace("kind = \"tagging\"", "kind = \"tagging\"\nmain = true")
        .replace("\"tag.dev.tsv\"", "\"missing.tsv\"")
        .replace("schema_version = 1", "schema_version = 9");
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, text).unwrap();
    for f in [
        "mt.train.src",
        "mt.train.tgt",
        "mt.dev.src",
        "mt.dev.tgt",
        "tag.train.tsv",
    ] {
        fs::copy(fixtures().join(f), dir.path().join(f)).unwrap();
    }
    let o = mtseq(&["train", "--config", s(&cfg), "--quiet"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("found 2"), "{err}");
    assert!(err.contains("missing.tsv"), "{err}");
    assert!(err.contains("schema_version"), "{err}");
}

#[test]
fn tag_emits_one_label_per_word() {
    let dir = tempfile::tempdir().unwrap();
    let model = toy_model(dir.path());
    let input = dir.path().join("in.txt");
    fs::write(&input, "the cat sat on the mat\ncat\n\nunknown words here\n").unwrap();
    let o = mtseq(&["tag", "--model", s(&model), "-i", s(&input)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let counts: Vec<usize> = out.lines().map(|l| l.split_whitespace().count()).collect();
    assert_eq!(counts, vec![6, 1, 0, 3]);
    assert!(
        out.split_whitespace().all(|t| ["D", "N", "V", "P"].contains(&t)),
        "{out}"
    );
}

#[test]
fn tag_of_empty_file_is_empty() {
    let dir = tempfile::tempdir().unwrap();
    let model = toy_model(dir.path());
    let input = dir.path().join("empty.txt");
    fs::write(&input, "").unwrap();
    let output = dir.path().join("out.txt");
    let o = mtseq(&["tag", "--model", s(&model), "-i", s(&input), "-o", s(&output)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(&output).unwrap(), "");
}

#[test]
fn tag_rejects_translation_task() {
    let dir = tempfile::tempdir().unwrap();
    let model = toy_model(dir.path());
    let o = mtseq(&["tag", "--model", s(&model), "--task", "mt", "-i", s(&model)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("mt"));
}

#[test]
fn translate_reverts_bpe() {
    let dir = tempfile::tempdir().unwrap();
    let model = toy_model(dir.path());
    let codes = dir.path().join("codes");
    fs::write(&codes, "1\nc a\n").unwrap();
    let input = dir.path().join("in.txt");
    fs::write(&input, "the cat sat\ncat cat cat on the mat\n").unwrap();
    let o = mtseq(&[
        "translate",
        "--model",
        s(&model),
        "--bpe",
        s(&codes),
        "-i",
        s(&input),
        "--beam",
        "3",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert_eq!(out.lines().count(), 2);
    assert!(!out.contains("@@"), "{out}");
}

#[test]
fn eval_bleu_and_tag_error() {
    let dir = tempfile::tempdir().unwrap();
    let hyp = dir.path().join("hyp");
    let reference = dir.path().join("ref");
    fs::write(&hyp, "the cat sat on the mat\nN.sg V.3 D\n").unwrap();
    fs::write(&reference, "the cat sat on a mat\nN.pl V.3 N\n").unwrap();

    let o = mtseq(&["eval", "bleu", "--hyp", s(&hyp), "--ref", s(&hyp)]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("BLEU = 100.00"), "{}", stdout(&o));

    let rate = |extra: &[&str]| -> f64 {
        let mut args = vec!["eval", "tag", "--hyp", s(&hyp), "--ref", s(&reference)];
        args.extend_from_slice(extra);
        let o = mtseq(&args);
        assert!(o.status.success(), "{}", stderr(&o));
        let first = stdout(&o).lines().next().unwrap().to_string();
        first.split_once('=').unwrap().1.parse().unwrap()
    };
    let fine = rate(&[]);
    let coarse = rate(&["--coarse"]);
    assert!(coarse <= fine, "{coarse} > {fine}");
    assert!(fine > coarse);

    let short = dir.path().join("short");
    fs::write(&short, "the cat\n").unwrap();
    let o = mtseq(&["eval", "bleu", "--hyp", s(&short), "--ref", s(&reference)]);
    assert_ne!(o.status.code(), Some(0));
    let err = stderr(&o);
    assert!(err.contains('1') && err.contains('2'), "{err}");
}

#[test]
fn bpe_learn_then_apply() {
    let dir = tempfile::tempdir().unwrap();
    let text = dir.path().join("text");
    fs::write(&text, "lower lowest newer newest\nwider widest\n").unwrap();
    let codes = dir.path().join("codes");
    let o = mtseq(&["bpe-learn", "-i", s(&text), "--merges", "5", "--output", s(&codes)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(fs::read_to_string(&codes).unwrap().starts_with("5\n"));
    let out = dir.path().join("out");
    let o = mtseq(&["bpe-apply", "--codes", s(&codes), "-i", s(&text), "-o", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let segmented = fs::read_to_string(&out).unwrap();
    assert!(segmented.contains("@@"));
    assert_eq!(segmented.replace("@@ ", ""), fs::read_to_string(&text).unwrap());
}

fn tiny_config(dir: &Path) -> PathBuf {
    for (f, n) in [
        ("mt.train.src", 80),
        ("mt.train.tgt", 80),
        ("mt.dev.src", 15),
        ("mt.dev.tgt", 15),
    ] {
        let text = fs::read_to_string(fixtures().join(f)).unwrap();
        let head: String = text.lines().take(n).map(|l| format!("{l}\n")).collect();
        fs::write(dir.join(f), head).unwrap();
    }
    for (f, n) in [("tag.train.tsv", 60), ("tag.dev.tsv", 10)] {
        let text = fs::read_to_string(fixtures().join(f)).unwrap();
        let head: Vec<&str> = text.split("\n\n").take(n).collect();
        fs::write(dir.join(f), format!("{}\n", head.join("\n\n"))).unwrap();
    }
    let cfg = fs::read_to_string(fixtures().join("multitask.toml"))
        .unwrap()
        .replace("embed_dim = 32", "embed_dim = 6")
        .replace("enc_hidden_per_dir = 32", "enc_hidden_per_dir = 5")
        .replace("attn_hidden = 32", "attn_hidden = 5")
        .replace("dec_hidden = 48", "dec_hidden = 6")
        .replace("max_epochs = 40", "max_epochs = 2")
        .replace("# bpe_merges = 200", "bpe_merges = 30");
    let path = dir.join("tiny.toml");
    fs::write(&path, cfg).unwrap();
    path
}

#[test]
fn train_is_deterministic_and_decodable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("a");
    let run = || {
        let o = mtseq(&["train", "--config", s(&cfg), "--output-dir", s(&out), "--seed", "4"]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(stdout(&o).starts_with("model="));
        let log = fs::read_to_string(out.join("train.log")).unwrap();
        assert_eq!(stderr(&o).lines().collect::<Vec<_>>(), log.lines().collect::<Vec<_>>());
        (log, fs::read(out.join("model.bin")).unwrap())
    };
    let (log_a, model_a) = run();
    let (log_b, model_b) = run();
    assert_eq!(log_a, log_b);
    assert_eq!(model_a, model_b);
    assert!(log_a.lines().any(|l| l.starts_with("phase-start phase=finetune")));
    assert!(log_a.contains("\"seed\":4"), "{}", log_a.lines().next().unwrap());

    let model = dir.path().join("a/model.bin");
    let codes = dir.path().join("a/bpe.codes");
    let input = dir.path().join("tag.in");
    fs::write(&input, "vazi lutalu rime\nzzzz qqqq\n").unwrap();
    let o = mtseq(&["tag", "--model", s(&model), "--bpe", s(&codes), "-i", s(&input)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let counts: Vec<usize> = stdout(&o).lines().map(|l| l.split_whitespace().count()).collect();
    assert_eq!(counts, vec![3, 2]);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(mtseq(&[]).status.code(), Some(1));
    assert_eq!(mtseq(&["train"]).status.code(), Some(1));
    assert_eq!(mtseq(&["translate", "--model", "/nonexistent"]).status.code(), Some(1));
    assert_eq!(mtseq(&["--version"]).status.code(), Some(0));
}
