//! End-to-end runs of the `flextok` binary on a tiny configuration.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

const TINY: &str = r#"
seed = 3
[data]
n_images = 4
[tokenizer]
enc_depth = 1
dec_depth = 1
k_max = 4
time_freq_dim = 16
mlp_ratio = 1.0
repa_mlp_ratio = 1.0
[oracle]
grid_side = 4
feature_dim = 8
[train]
batch_size = 2
warmup_tokens = 64
total_tokens = 512
[ar]
depth = 1
mlp_ratio = 1.0
[ar_train]
batch_size = 2
warmup_tokens = 8
total_tokens = 64
[sampler]
steps = 3
batch_size = 2
"#;

fn flextok(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flextok"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> PathBuf {
    let out = flextok(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    PathBuf::from(String::from_utf8(out.stdout).unwrap().trim())
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
    tokenizer: PathBuf,
    ar: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let config = root.join("tiny.toml");
        std::fs::write(&config, TINY).unwrap();
        let c = config.to_str().unwrap();
        let out = root.join("tok");
        ok(&["train-tokenizer", "--config", c, "--out", out.to_str().unwrap()]);
        let tokenizer = out.join("checkpoints/tokenizer.safetensors");
        let out = root.join("ar");
        ok(&["train-ar", "--config", c, "--tokenizer", tokenizer.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        let ar = out.join("checkpoints/ar.safetensors");
        Fixture { _dir: dir, root, config, tokenizer, ar }
    })
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn training_writes_run_directory() {
    let f = fixture();
    let run = f.root.join("tok");
    for name in ["config.toml", "summary.json", "logs/train.csv", "checkpoints/tokenizer.safetensors"] {
        assert!(run.join(name).exists(), "missing {name}");
    }
    let summary: serde_json::Value = serde_json::from_slice(&read(&run.join("summary.json"))).unwrap();
    assert_eq!(summary["command"], "train-tokenizer");
    assert_eq!(summary["seed"], 3);
}

#[test]
fn tokenize_then_detokenize_matches_reconstruct() {
    let f = fixture();
    let (c, t) = (s(&f.config), s(&f.tokenizer));
    let tok_dir = f.root.join("tokenize");
    ok(&["tokenize", "--config", c, "--tokenizer", t, "--k", "2", "--out", s(&tok_dir)]);
    let bytes = read(&tok_dir.join("tokens.bin"));
    let seqs = flextok::io::read_token_file(&tok_dir.join("tokens.bin")).unwrap();
    assert_eq!(seqs.len(), 4);
    assert!(seqs.iter().all(|q| q.len() == 2));
    assert_eq!(bytes.len(), 4 * (4 + 2 * 2));

    let det_dir = f.root.join("detokenize");
    ok(&["detokenize", "--config", c, "--tokenizer", t, "--tokens", s(&tok_dir.join("tokens.bin")), "--out", s(&det_dir)]);
    let rec_dir = f.root.join("reconstruct");
    ok(&["reconstruct", "--config", c, "--tokenizer", t, "--k", "2", "--out", s(&rec_dir)]);
    for i in 0..4 {
        let a = read(&det_dir.join(format!("decoded_{i:04}.png")));
        let b = read(&rec_dir.join(format!("recon_{i:04}.png")));
        assert!(a == b, "image {i} differs between detokenize and reconstruct");
    }
}

#[test]
fn generate_is_reproducible() {
    let f = fixture();
    let args = |out: &Path| {
        vec![
            "generate".to_string(),
            "--config".into(),
            s(&f.config).into(),
            "--tokenizer".into(),
            s(&f.tokenizer).into(),
            "--ar".into(),
            s(&f.ar).into(),
            "--k".into(),
            "3".into(),
            "--class".into(),
            "1".into(),
            "--n".into(),
            "2".into(),
            "--out".into(),
            s(out).into(),
        ]
    };
    let (a, b) = (f.root.join("gen_a"), f.root.join("gen_b"));
    for d in [&a, &b] {
        let v = args(d);
        ok(&v.iter().map(String::as_str).collect::<Vec<_>>());
    }
    let ta = read(&a.join("tokens.bin"));
    assert_eq!(ta, read(&b.join("tokens.bin")));
    let seqs = flextok::io::read_token_file(&a.join("tokens.bin")).unwrap();
    assert_eq!(seqs.len(), 2);
    assert!(seqs.iter().all(|q| q.len() == 3 && q.iter().all(|&c| c < 64000)));
    assert_eq!(read(&a.join("sample_0001.png")), read(&b.join("sample_0001.png")));
}

#[test]
fn missing_checkpoint_is_a_clean_error() {
    let f = fixture();
    let out = flextok(&["reconstruct", "--config", s(&f.config), "--tokenizer", "/nonexistent/t.safetensors"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not exist"));
}

#[test]
fn wrong_checkpoint_kind_is_rejected() {
    let f = fixture();
    let out = flextok(&["reconstruct", "--config", s(&f.config), "--tokenizer", s(&f.ar)]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn out_of_range_k_is_rejected() {
    let f = fixture();
    let out = flextok(&["tokenize", "--config", s(&f.config), "--tokenizer", s(&f.tokenizer), "--k", "5"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_override_suggests_a_key() {
    let out = flextok(&["train-tokenizer", "--train.peak_lrr", "1e-3"]);
    assert_ne!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.peak_lr"));
}
