//! End-to-end tests of the `ffb` binary: exit codes, seeds, run directories
//! and output formats against golden files.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ffb_cli::run::FinalEval;

const FFB: &str = env!("CARGO_BIN_EXE_ffb");

fn golden(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

fn ffb_env(dir: &Path, args: &[&str], seed_env: Option<&str>) -> Output {
    let mut c = Command::new(FFB);
    c.current_dir(dir).args(args).env_remove("FFB_SEED");
    if let Some(s) = seed_env {
        c.env("FFB_SEED", s);
    }
    c.output().expect("binary runs")
}

fn ffb(dir: &Path, args: &[&str]) -> Output {
    ffb_env(dir, args, None)
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited")
}

fn ok(o: Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn read(p: impl AsRef<Path>) -> String {
    let p = p.as_ref();
    std::fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

const TINY: &str = r#"
[data]
length = 16

[model]
kind = "transformer"
layers = 1
d_model = 16
heads = 2
max_len = 16

[train]
steps = 30
warmup = 5
batch_size = 4

[train.eval]
every = 10
in_dist_count = 20
sparse_count = 20
dense_count = 10

[final_eval]
in_dist_count = 50
sparse_count = 50
dense_count = 50
"#;

fn tiny_config(dir: &Path, extra: &str) -> String {
    let p = dir.join("tiny.toml");
    std::fs::write(&p, format!("{extra}\n{TINY}")).unwrap();
    p.to_string_lossy().into_owned()
}

fn frozen(run: &Path) -> toml::Table {
    read(run.join("config.toml")).parse().unwrap()
}

fn seeds(run: &Path) -> (i64, i64) {
    let t = frozen(run);
    let train = t["train"].as_table().unwrap();
    (train["data_seed"].as_integer().unwrap(), train["model_seed"].as_integer().unwrap())
}

#[test]
fn gen_matches_golden_corpus_and_meta() {
    let d = tempfile::tempdir().unwrap();
    ok(ffb(d.path(), &["gen", "--p-i", "0.8", "--T", "16", "--count", "8", "--seed", "42", "--out", "c.txt"]));
    assert_eq!(read(d.path().join("c.txt")), read(golden("corpus_p08_T16_n8_s42.txt")));
    assert_eq!(read(d.path().join("c.txt.meta")), read(golden("corpus_p08_T16_n8_s42.txt.meta")));
}

#[test]
fn gen_seed_falls_back_to_environment() {
    let d = tempfile::tempdir().unwrap();
    let args = ["gen", "--p-i", "0.8", "--T", "16", "--count", "8", "--out"];
    ok(ffb_env(d.path(), &[&args[..], &["env.txt"]].concat(), Some("42")));
    assert_eq!(read(d.path().join("env.txt")), read(golden("corpus_p08_T16_n8_s42.txt")));
    ok(ffb_env(d.path(), &[&args[..], &["flag.txt", "--seed", "1"]].concat(), Some("42")));
    assert_ne!(read(d.path().join("flag.txt")), read(golden("corpus_p08_T16_n8_s42.txt")));
}

#[test]
fn eval_reports_match_golden() {
    let d = tempfile::tempdir().unwrap();
    let corpus = golden("corpus_p08_T16_n8_s42.txt");
    let corpus = corpus.to_str().unwrap();
    for (model, stem) in [("oracle", "eval_oracle"), ("constant:0", "eval_constant0")] {
        let out = ok(ffb(d.path(), &["eval", "--model", model, "--data", corpus, "--out", "r.json", "--histogram", "h.csv"]));
        assert!(out.starts_with("sequences 8  reads 14  errors "), "{out}");
        assert_eq!(read(d.path().join("r.json")), read(golden(&format!("{stem}.json"))), "{model}");
        assert_eq!(read(d.path().join("h.csv")), read(golden(&format!("{stem}_hist.csv"))), "{model}");
    }
}

#[test]
fn theory_json_matches_golden() {
    let d = tempfile::tempdir().unwrap();
    let out = ok(ffb(d.path(), &["theory", "drift", "--json", "t.json"]));
    assert!(out.starts_with("PASS crossover at T = 1620\n"), "{out}");
    assert_eq!(read(d.path().join("t.json")), read(golden("theory_drift.json")));
}

#[test]
fn exit_codes() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    // Check failures: the construction with a too-small temperature constant.
    assert_eq!(code(&ffb(p, &["theory", "prop1", "--T", "10", "--c", "1"])), 1);
    assert_eq!(code(&ffb(p, &["theory", "prop1", "--T", "8"])), 0);
    // Usage and configuration errors.
    assert_eq!(code(&ffb(p, &["gen", "--bogus"])), 2);
    assert_eq!(code(&ffb(p, &["gen", "--p-i", "1.5", "--T", "16"])), 2);
    std::fs::write(p.join("bad.toml"), "[train]\nstepz = 3\n").unwrap();
    assert_eq!(code(&ffb(p, &["train", "--config", "bad.toml"])), 2);
    assert_eq!(code(&ffb(p, &["report", "--metric", "nope", "."])), 2);
    assert_eq!(code(&ffb(p, &["train", "--set", "train.sharpen.lambda=-1", "--steps", "10"])), 2);
    // I/O errors.
    assert_eq!(code(&ffb(p, &["train", "--config", "missing.toml"])), 3);
    assert_eq!(code(&ffb(p, &["eval", "--model", "oracle", "--data", "missing.txt"])), 3);
}

#[test]
fn seed_precedence() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    let cfg = tiny_config(p, "seed = 5");
    let train = |out: &str, extra: &[&str], env: Option<&str>| {
        let mut args = vec!["train", "--config", cfg.as_str(), "--steps", "10", "--out-dir", out];
        args.extend_from_slice(extra);
        args.extend_from_slice(&["--set", "final_eval.enabled=false"]);
        ok(ffb_env(p, &args, env));
        seeds(&p.join(out))
    };
    assert_eq!(train("a", &[], Some("9")), (5, 5));
    assert_eq!(train("b", &["--seed", "3"], None), (3, 3));
    assert_eq!(train("c", &["--seed", "3", "--model-seed", "4"], None), (3, 4));
    assert_eq!(train("d", &["--set", "train.data_seed=11"], None), (11, 5));
    assert_eq!(train("e", &["--set", "train.data_seed=11", "--seed", "2"], None), (2, 2));

    let bare = tiny_config(p, "");
    let run_bare = |out: &str, env: Option<&str>| {
        ok(ffb_env(p, &["train", "--config", &bare, "--steps", "10", "--out-dir", out], env));
        seeds(&p.join(out))
    };
    assert_eq!(run_bare("f", Some("9")), (9, 9));
    assert_eq!(run_bare("g", None), (0, 0));
    assert_eq!(code(&ffb_env(p, &["train", "--config", &bare, "--out-dir", "h"], Some("x"))), 2);
}

#[test]
fn frozen_config_reproduces_the_run() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    let cfg = tiny_config(p, "");
    ok(ffb(p, &["train", "--config", &cfg, "--seed", "8", "--lr", "2e-3", "--out-dir", "first"]));
    let first = p.join("first");
    for f in ["config.toml", "train_log.csv", "model.ckpt", "final_eval.json"] {
        assert!(first.join(f).is_file(), "{f}");
    }
    let t = frozen(&first);
    assert_eq!(t["train"]["lr"].as_float(), Some(2e-3));
    assert_eq!(t["model"]["d_model"].as_integer(), Some(16));
    let again = first.join("config.toml");
    ok(ffb(p, &["train", "--config", again.to_str().unwrap(), "--out-dir", "second"]));
    let second = p.join("second");
    assert_eq!(read(first.join("train_log.csv")), read(second.join("train_log.csv")));
    assert_eq!(std::fs::read(first.join("model.ckpt")).unwrap(), std::fs::read(second.join("model.ckpt")).unwrap());
    assert_eq!(read(first.join("final_eval.json")), read(second.join("final_eval.json")));

    let log = read(first.join("train_log.csv"));
    let mut lines = log.lines();
    assert_eq!(lines.next().unwrap(), read(golden("train_log_header_tiny.csv")).trim_end());
    let steps: Vec<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(steps, ["10", "20", "30"]);

    let fe: FinalEval = serde_json::from_str(&read(first.join("final_eval.json"))).unwrap();
    assert_eq!(fe.sets.keys().collect::<Vec<_>>(), ["dense", "in_distribution", "sparse"]);
    for s in fe.sets.values() {
        assert_eq!((s.count, s.length), (50, 16));
        assert_eq!(s.dependency_histogram.values().sum::<u64>(), s.n_errors);
    }
    assert!(fe.attention_entropy.is_some());
}

#[test]
fn sweep_writes_an_index_and_report_aggregates_it() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    let cfg = tiny_config(p, "");
    std::fs::write(
        &cfg,
        format!("{}\n[sweep]\nreplicates = 2\n\n[sweep.grid]\n\"train.lr\" = [1e-3, 3e-3]\n", read(&cfg)),
    )
    .unwrap();
    ok(ffb(p, &["sweep", "--config", &cfg, "--seed", "5", "--out-dir", "sw"]));
    let index = read(p.join("sw/index.csv"));
    let rows: Vec<Vec<&str>> = index.lines().map(|l| l.split(',').collect()).collect();
    assert_eq!(
        rows[0].join(","),
        "run_dir,point,replicate,data_seed,model_seed,status,in_dist_error,sparse_error,dense_error,message"
    );
    assert_eq!(rows.len(), 5);
    let expect = [
        ("point000/rep00", "train.lr=0.001", "5"),
        ("point000/rep01", "train.lr=0.001", "6"),
        ("point001/rep00", "train.lr=0.003", "5"),
        ("point001/rep01", "train.lr=0.003", "6"),
    ];
    for (row, (dir, point, seed)) in rows[1..].iter().zip(expect) {
        assert_eq!((row[0], row[1], row[3], row[4], row[5]), (dir, point, seed, seed, "ok"));
        assert!(p.join("sw").join(dir).join("final_eval.json").is_file());
    }
    // Replicate 0 of each point shares seeds, so only the learning rate differs.
    assert_eq!(seeds(&p.join("sw/point000/rep00")), seeds(&p.join("sw/point001/rep00")));

    let out = ok(ffb(p, &["report", "sw", "--metric", "all", "--out", "r.csv"]));
    assert_eq!(out, read(p.join("r.csv")));
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "metric,n,min,q25,median,q75,max,zero_runs");
    assert_eq!(lines.len(), 4);
    for (l, m) in lines[1..].iter().zip(["in_distribution", "sparse", "dense"]) {
        let f: Vec<&str> = l.split(',').collect();
        assert_eq!((f[0], f[1]), (m, "4"));
        let q: Vec<f64> = f[2..7].iter().map(|v| v.parse().unwrap()).collect();
        assert!(q.windows(2).all(|w| w[0] <= w[1]), "{l}");
    }
    let one = ok(ffb(p, &["report", "sw/point000/rep01"]));
    assert_eq!(one.lines().nth(1).unwrap().split(',').nth(1), Some("1"));
}

#[test]
fn sweep_reports_failed_runs() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    let cfg = tiny_config(p, "");
    std::fs::write(
        &cfg,
        format!("{}\n[sweep.grid]\n\"train.batch_size\" = [2, 0]\n", read(&cfg)),
    )
    .unwrap();
    let o = ffb(p, &["sweep", "--config", &cfg, "--out-dir", "sw"]);
    assert_eq!(code(&o), 1);
    let index = read(p.join("sw/index.csv"));
    let status: Vec<&str> = index.lines().skip(1).map(|l| l.split(',').nth(5).unwrap()).collect();
    assert_eq!(status, ["ok", "config_error"]);
}

#[test]
fn attention_dump_format() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    let cfg = tiny_config(p, "");
    ok(ffb(p, &["train", "--config", &cfg, "--out-dir", "run", "--set", "final_eval.enabled=false"]));
    let out = ok(ffb(p, &["attn-dump", "--checkpoint", "run/model.ckpt", "--input", "w1i0r1", "--out-dir", "attn"]));
    assert_eq!(out.trim(), "2 matrices written to attn");
    assert_eq!(read(p.join("attn/manifest.json")), read(golden("attn_manifest_w1i0r1.json")));
    for h in 0..2 {
        let m: Vec<Vec<f64>> = read(p.join(format!("attn/layer0_head{h}.csv")))
            .lines()
            .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
            .collect();
        assert_eq!(m.len(), 6);
        for (i, row) in m.iter().enumerate() {
            assert_eq!(row.len(), 6);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
            assert!(row[i + 1..].iter().all(|&v| v == 0.0));
        }
    }
    assert_eq!(code(&ffb(p, &["attn-dump", "--checkpoint", "run/model.ckpt", "--input", "w1r"])), 2);
}
