use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use attconv_cli::attmap::parse_tsv;
use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_attconv"));
    c.env_remove("ATTCONV_SEED");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json_lines(o: &Output) -> Vec<Value> {
    String::from_utf8_lossy(&o.stdout)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TOY: &str = r#"{"label":"yes","text":"good fine"}
{"label":"no","text":"bad awful"}
{"label":"yes","text":"fine good good"}
{"label":"no","text":"awful bad bad"}
"#;

fn trained(dir: &Path, config: &str) -> PathBuf {
    let cfg = write(dir, "cfg.json", config);
    let data = write(dir, "train.jsonl", TOY);
    let out = dir.join("model.ckpt");
    let o = run(&["train", "--config", s(&cfg), "--train", s(&data), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    out
}

#[test]
fn missing_training_file_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "cfg.json",
        r#"{"variant":"light","context-mode":"intra","d":4}"#,
    );
    let missing = dir.path().join("nowhere.jsonl");
    let o = run(&[
        "train",
        "--config",
        s(&cfg),
        "--train",
        s(&missing),
        "--out",
        s(&dir.path().join("m")),
    ]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("nowhere.jsonl"));
}

#[test]
fn bad_config_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = write(dir.path(), "t.jsonl", TOY);
    for body in [
        r#"{"variant":"light","context-mode":"intra"}"#,
        r#"{"variant":"light","context-mode":"intra","d":4,"num-classes":3}"#,
        r#"{"variant":"light","context-mode":"intra","d":4,"filter-width":5}"#,
        r#"{"variant":"light","context-mode":"intra","d":4,"colour":"red"}"#,
    ] {
        let cfg = write(dir.path(), "cfg.json", body);
        let o = run(&[
            "train",
            "--config",
            s(&cfg),
            "--train",
            s(&data),
            "--out",
            s(&dir.path().join("m")),
        ]);
        assert_eq!(code(&o), 2, "{body}: {}", stderr(&o));
    }
}

#[test]
fn toy_run_converges_and_evaluates_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "cfg.json",
        r#"{"variant":"light","context-mode":"intra","d":6,"epochs":40,"batch-size":2,"learning-rate":0.1}"#,
    );
    let data = write(dir.path(), "train.jsonl", TOY);
    let out = dir.path().join("m.ckpt");
    let o = run(&[
        "train",
        "--config",
        s(&cfg),
        "--train",
        s(&data),
        "--out",
        s(&out),
        "--seed",
        "1",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let metrics = json_lines(&o);
    assert_eq!(metrics.len(), 40);
    assert!(metrics.last().unwrap()["accuracy"].as_f64().unwrap() > 0.95);
    let o = run(&["eval", "--model", s(&out), "--data", s(&data), "--workers", "2"]);
    assert_eq!(code(&o), 0);
    let report = &json_lines(&o)[0];
    assert_eq!(report["accuracy"], 1.0);
    assert_eq!(report["n"], 4);
    assert_eq!(report["confusion"], serde_json::json!([[2, 0], [0, 2]]));
}

#[test]
fn eval_errors() {
    let dir = tempfile::tempdir().unwrap();
    let model = trained(
        dir.path(),
        r#"{"variant":"light","context-mode":"intra","d":4,"epochs":1}"#,
    );
    let empty = write(dir.path(), "empty.jsonl", "");
    assert_eq!(code(&run(&["eval", "--model", s(&model), "--data", s(&empty)])), 3);
    let other = write(dir.path(), "other.jsonl", r#"{"label":"maybe","text":"good"}"#);
    let o = run(&["eval", "--model", s(&model), "--data", s(&other)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("maybe"));

    let mut bytes = std::fs::read(&model).unwrap();
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let manifest = String::from_utf8(bytes[16..16 + len].to_vec()).unwrap();
    let key = "\"format-version\":1";
    let at = manifest.find(key).unwrap() + key.len() - 1;
    bytes[16 + at] = b'7';
    let bumped = dir.path().join("future.ckpt");
    std::fs::write(&bumped, &bytes).unwrap();
    let data = write(dir.path(), "d.jsonl", TOY);
    let o = run(&["eval", "--model", s(&bumped), "--data", s(&data)]);
    assert_eq!(code(&o), 2);
    let msg = stderr(&o);
    assert!(msg.contains('7') && msg.contains('1'), "{msg}");

    let garbage = write(dir.path(), "garbage.ckpt", "not a checkpoint");
    assert_eq!(code(&run(&["eval", "--model", s(&garbage), "--data", s(&data)])), 3);
}

#[test]
fn gradcheck_passes_and_zero_tolerance_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "g.json",
        r#"{"variant":"advanced","context-mode":"single","d":4}"#,
    );
    let o = run(&["gradcheck", "--config", s(&cfg), "--seed", "3"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let lines = json_lines(&o);
    let summary = lines.last().unwrap();
    assert_eq!(summary["passed"], true);
    assert!(lines.len() > 10);

    let o = run(&["gradcheck", "--config", s(&cfg), "--seed", "3", "--tolerance", "0"]);
    assert_eq!(code(&o), 1);
    let summary = json_lines(&o).pop().unwrap();
    let worst = summary["worst_tensor"].as_str().unwrap().to_string();
    assert!(worst.starts_with("advanced.") || worst.starts_with("head.") || worst == "embedding");
    assert!(stderr(&o).contains(&worst));
}

#[test]
fn seed_comes_from_the_environment_when_no_flag_is_given() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "cfg.json",
        r#"{"variant":"light","context-mode":"intra","d":4,"epochs":2,"seed":1}"#,
    );
    let data = write(dir.path(), "t.jsonl", TOY);
    let train = |name: &str, env: Option<&str>, flag: Option<&str>| {
        let out = dir.path().join(name);
        let mut c = bin();
        c.args(["train", "--config", s(&cfg), "--train", s(&data), "--out", s(&out)]);
        if let Some(f) = flag {
            c.args(["--seed", f]);
        }
        if let Some(e) = env {
            c.env("ATTCONV_SEED", e);
        }
        assert!(c.status().unwrap().success());
        std::fs::read(out).unwrap()
    };
    let env5 = train("a", Some("5"), None);
    let flag5 = train("b", None, Some("5"));
    let file1 = train("c", None, None);
    let both = train("d", Some("9"), Some("5"));
    assert_eq!(env5, flag5);
    assert_eq!(both, flag5);
    assert_ne!(file1, flag5);

    let mut c = bin();
    c.args([
        "train",
        "--config",
        s(&cfg),
        "--train",
        s(&data),
        "--out",
        s(&dir.path().join("e")),
    ]);
    c.env("ATTCONV_SEED", "minus one");
    assert_eq!(code(&c.output().unwrap()), 2);
}

#[test]
fn attmap_exports_single_cell_and_rejects_contexts_for_intra() {
    let dir = tempfile::tempdir().unwrap();
    let model = trained(
        dir.path(),
        r#"{"variant":"light","context-mode":"intra","d":4,"epochs":1}"#,
    );
    let input = write(dir.path(), "one.jsonl", r#"{"label":"yes","text":"good"}"#);
    let maps = dir.path().join("maps");
    let o = run(&["attmap", "--model", s(&model), "--input", s(&input), "--out", s(&maps)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let tsv = std::fs::read_to_string(maps.join("ex0_layer0_ctx0.tsv")).unwrap();
    assert_eq!(tsv, "\tgood\ngood\t1\n");
    let o = run(&[
        "attmap",
        "--model",
        s(&model),
        "--input",
        s(&input),
        "--format",
        "svg",
        "--out",
        s(&maps),
    ]);
    assert_eq!(code(&o), 0);
    let svg = std::fs::read_to_string(maps.join("ex0_layer0_ctx0.svg")).unwrap();
    assert_eq!(svg.matches("<rect").count(), 1);

    let longer = write(dir.path(), "many.jsonl", TOY);
    let o = run(&["attmap", "--model", s(&model), "--input", s(&longer), "--out", s(&maps)]);
    assert_eq!(code(&o), 0);
    for rec in json_lines(&o) {
        let (cols, rows) = parse_tsv(&std::fs::read_to_string(rec["file"].as_str().unwrap()).unwrap()).unwrap();
        assert_eq!(rows.len(), cols.len());
        for (_, w) in rows {
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    let ctx = write(
        dir.path(),
        "ctx.jsonl",
        r#"{"label":"yes","text":"good","contexts":["fine"]}"#,
    );
    assert_eq!(
        code(&run(&[
            "attmap",
            "--model",
            s(&model),
            "--input",
            s(&ctx),
            "--out",
            s(&maps)
        ])),
        2
    );

    let plain = trained(
        dir.path(),
        r#"{"variant":"vanilla-cnn","context-mode":"intra","d":4,"epochs":1}"#,
    );
    assert_eq!(
        code(&run(&[
            "attmap",
            "--model",
            s(&plain),
            "--input",
            s(&input),
            "--out",
            s(&maps)
        ])),
        2
    );
}

#[test]
fn params_delta_at_d300() {
    let dir = tempfile::tempdir().unwrap();
    let total = |variant: &str| {
        let cfg = write(
            dir.path(),
            "p.json",
            &format!(r#"{{"variant":"{variant}","context-mode":"intra","d":300,"num-classes":3}}"#),
        );
        let o = run(&["params", "--config", s(&cfg), "--vocab-size", "10"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let t = json_lines(&o).remove(0);
        let rows: u64 = t["tensors"]
            .as_array()
            .unwrap()
            .iter()
            .map(|r| r["size"].as_u64().unwrap())
            .sum();
        assert_eq!(rows, t["total_including_embeddings"].as_u64().unwrap());
        assert_eq!(
            t["total_including_embeddings"].as_u64().unwrap() - t["total_excluding_embeddings"].as_u64().unwrap(),
            10 * 300
        );
        t["total_excluding_embeddings"].as_u64().unwrap()
    };
    let light = total("light");
    assert_eq!(light - total("vanilla-cnn"), 90_000);
    assert!(total("advanced") > light);
}

#[test]
fn synth_writes_loadable_data() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("n.jsonl");
    let o = run(&[
        "synth",
        "--task",
        "nonlocal",
        "--n",
        "40",
        "--seed",
        "2",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ds = attconv::text::load_jsonl(&out).unwrap();
    assert_eq!(ds.len(), 40);
    assert!(ds.examples.iter().all(|e| e.text.len() == 20));
}
