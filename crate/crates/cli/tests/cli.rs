use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const SMALL_GEN: &str = "num_cells = 60\nood_cells = 12\nnum_genes = 48\nmarkers_per_type = 3\n";
const TINY_TRAIN: &str = r#"
epoch_cap = 1
warmup_steps = 1
batch_size = 8
kl_samples = 2
prototype_len = 6

[model]
hidden_size = 8
num_heads = 2
max_len = 12
marker_max_len = 12
gmve_components = 2
"#;

fn repo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn cli(args: &[&str]) -> Output {
    cli_env(args, None)
}

fn cli_env(args: &[&str], seed: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_cellrefine"));
    cmd.args(args).env_remove("CELLREFINE_SEED");
    if let Some(s) = seed {
        cmd.env("CELLREFINE_SEED", s);
    }
    cmd.output().unwrap()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

fn write(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Generated data plus a pretrained checkpoint in one temp dir.
struct Fixture {
    dir: TempDir,
    data: PathBuf,
    train_cfg: String,
    pt: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let gen_cfg = write(dir.path(), "gen.toml", &format!("seed = 2\n{SMALL_GEN}"));
    let train_cfg = write(dir.path(), "train.toml", TINY_TRAIN);
    let data = dir.path().join("data");
    ok(&cli(&["gen-data", "--config", &gen_cfg, "--out", s(&data)]));
    let pt = dir.path().join("pt");
    ok(&cli(&[
        "train",
        "--stage",
        "pretrain",
        "--config",
        &train_cfg,
        "--data",
        s(&data),
        "--out",
        s(&pt),
    ]));
    Fixture {
        dir,
        data,
        train_cfg,
        pt: pt.join("checkpoint.ckpt"),
    }
}

fn fine_tuned(f: &Fixture) -> PathBuf {
    let out = f.dir.path().join("ft");
    ok(&cli(&[
        "train",
        "--stage",
        "fine-tune",
        "--config",
        &f.train_cfg,
        "--data",
        s(&f.data),
        "--init",
        s(&f.pt),
        "--out",
        s(&out),
    ]));
    out.join("checkpoint.ckpt")
}

#[test]
fn usage_errors_exit_two() {
    let out = cli(&["gen-data", "--config", "/nonexistent.toml", "--out", "/tmp/x"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("config not found"));
    assert_eq!(cli(&["no-such-command"]).status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let typo = write(dir.path(), "typo.toml", "num_cels = 10\n");
    let out = cli(&["gen-data", "--config", &typo, "--out", s(&dir.path().join("d"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gen_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "gen.toml", &format!("seed = 9\n{SMALL_GEN}"));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&cli(&["gen-data", "--config", &cfg, "--out", s(&a)]));
    ok(&cli(&["gen-data", "--config", &cfg, "--out", s(&b)]));
    let manifest: Value = serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    let outputs = manifest["outputs"].as_array().unwrap();
    assert_eq!(outputs.len(), 4);
    for f in ["expression.tsv", "metadata.json", "ontology.json", "markers.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn environment_seed_fills_a_missing_config_seed() {
    let dir = tempfile::tempdir().unwrap();
    let unseeded = write(dir.path(), "gen.toml", SMALL_GEN);
    let seeded = write(dir.path(), "seeded.toml", &format!("seed = 3\n{SMALL_GEN}"));
    let run = |cfg: &str, name: &str, seed: Option<&str>| {
        let out = dir.path().join(name);
        ok(&cli_env(&["gen-data", "--config", cfg, "--out", s(&out)], seed));
        fs::read(out.join("expression.tsv")).unwrap()
    };
    let from_env = run(&unseeded, "env", Some("3"));
    assert_eq!(from_env, run(&seeded, "file", None));
    assert_ne!(from_env, run(&unseeded, "default", None));
    // A seed in the config file wins over the environment.
    assert_eq!(run(&seeded, "both", Some("4")), from_env);
}

#[test]
fn tail_fit_edge_cases() {
    let dir = tempfile::tempdir().unwrap();
    let two = write(dir.path(), "two.json", "[10, 20]");
    assert_ne!(cli(&["tail-fit", "--counts", &two]).status.code(), Some(0));

    let counts = write(dir.path(), "c.json", "[1, 2, 4, 8, 16, 32, 64]");
    let out = dir.path().join("fit.json");
    ok(&cli(&[
        "tail-fit",
        "--counts",
        &counts,
        "--fraction",
        "1.0",
        "--out",
        s(&out),
    ]));
    let fit: Value = serde_json::from_slice(&fs::read(&out).unwrap()).unwrap();
    assert!(fit["alpha"].as_f64().unwrap().is_finite());

    let blood = repo().join("data/blood_counts.json");
    let out = cli(&["tail-fit", "--counts", s(&blood)]);
    ok(&out);
    let fit: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!((fit["alpha"].as_f64().unwrap() - 0.37).abs() < 0.05);
}

#[test]
fn pipeline_commands() {
    let f = fixture();
    let ft = fine_tuned(&f);

    let emb = f.dir.path().join("emb.tsv");
    ok(&cli(&[
        "export-embeddings",
        "--checkpoint",
        s(&ft),
        "--data",
        s(&f.data),
        "--out",
        s(&emb),
    ]));
    let text = fs::read_to_string(&emb).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows.len(), 60 + 12 + 1);
    assert!(rows.iter().all(|r| r.split('\t').count() == 2 + 8));

    let report = f.dir.path().join("id.json");
    ok(&cli(&[
        "evaluate",
        "--task",
        "identity",
        "--checkpoint",
        s(&ft),
        "--data",
        s(&f.data),
        "--out",
        s(&report),
        "--k",
        "1,3",
    ]));
    let r: Value = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
    assert!(r["metrics"]["recall@1"].is_number());
    assert!(r["metrics"]["recall@3"].is_number());
    assert!(f.dir.path().join("id.json.manifest.json").exists());

    let few = f.dir.path().join("few.json");
    ok(&cli(&[
        "evaluate",
        "--task",
        "identity",
        "--checkpoint",
        s(&f.pt),
        "--data",
        s(&f.data),
        "--out",
        s(&few),
        "--few-shot",
        "2",
        "--config",
        &f.train_cfg,
    ]));
    let r: Value = serde_json::from_slice(&fs::read(&few).unwrap()).unwrap();
    assert!(r["metrics"]["macro_f1"].is_number());

    // A fine-tuned checkpoint cannot go back to post-pretraining.
    let out = cli(&[
        "train",
        "--stage",
        "post-pretrain",
        "--config",
        &f.train_cfg,
        "--data",
        s(&f.data),
        "--init",
        s(&ft),
        "--out",
        s(&f.dir.path().join("bad")),
    ]);
    assert_eq!(out.status.code(), Some(1));

    // Post-pretraining without a starting checkpoint is a usage error.
    let out = cli(&[
        "train",
        "--stage",
        "post-pretrain",
        "--config",
        &f.train_cfg,
        "--data",
        s(&f.data),
        "--out",
        s(&f.dir.path().join("bad2")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}
