use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
d_model = 16
d_text = 16
expert_hidden = 8
score_hidden = 8
agg_hidden = 8
lm_heads = 2
lm_ffn = 16
lm_max_seq = 32
max_tokens = 4
batch_size = 4
total_steps = 6
lr = 0.001
";

fn usam(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_usam"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.cfg"), TINY).unwrap();
    let o = usam(
        &["gen-data", "--spec", "tiny.cfg", "--n", "8", "--seed", "5", "--out", "d.bin", "--text"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    dir
}

fn train(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--config", "tiny.cfg", "--data", "d.bin"];
    args.extend_from_slice(extra);
    usam(&args, dir)
}

#[test]
fn gen_data_writes_binary_and_text() {
    let dir = setup();
    let text = std::fs::read_to_string(dir.path().join("d.txt")).unwrap();
    assert_eq!(text.lines().filter(|l| l.contains("task=")).count(), 8);
    assert!(dir.path().join("d.bin").exists());
}

#[test]
fn train_logs_every_step_and_eval_prints_metrics() {
    let dir = setup();
    let o = train(dir.path(), &["--out-dir", "run"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert!(out.contains("trainable parameters:"));
    let steps: Vec<&str> = out.lines().filter(|l| l.starts_with("step=")).collect();
    assert_eq!(steps.len(), 6);
    for key in ["lr=", "L=", "L_CE=", "L_triplet=", "L_sparsity="] {
        assert!(steps[0].contains(key), "{key} missing from `{}`", steps[0]);
    }

    let o = usam(&["eval", "--ckpt", "run/final.ckpt", "--data", "d.bin"], dir.path());
    assert!(o.status.success());
    let table = stdout(&o);
    for key in ["token_accuracy", "exact_match", "L_CE", "mean_S_noise", "routing[copy]", "routing[reverse]"] {
        assert!(table.contains(key), "{key} missing");
    }

    let o = usam(&["inspect-routing", "--ckpt", "run/final.ckpt", "--data", "d.bin"], dir.path());
    assert!(o.status.success());
    let table = stdout(&o);
    assert!(table.lines().any(|l| l.starts_with("copy")));
    assert!(table.lines().any(|l| l.starts_with("reverse")));
    assert!(table.contains("expert2"));

    let o = usam(&["inspect-saclm", "--ckpt", "run/final.ckpt", "--data", "d.bin"], dir.path());
    assert!(o.status.success());
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("example=")).count(), 8);
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let dir = setup();
    assert!(train(dir.path(), &["--out-dir", "full"]).status.success());
    assert!(train(dir.path(), &["--out-dir", "half", "--steps", "3"]).status.success());
    let o = train(dir.path(), &["--out-dir", "rest", "--resume", "half/final.ckpt"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let a = std::fs::read(dir.path().join("full/final.ckpt")).unwrap();
    let b = std::fs::read(dir.path().join("rest/final.ckpt")).unwrap();
    assert!(a == b, "resumed checkpoint differs");
}

#[test]
fn resume_under_another_config_needs_force() {
    let dir = setup();
    assert!(train(dir.path(), &["--out-dir", "a", "--steps", "1"]).status.success());
    let o = train(dir.path(), &["--out-dir", "b", "--resume", "a/final.ckpt", "--ablate", "tapm"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("fingerprint"));
    let o = train(dir.path(), &["--out-dir", "b", "--resume", "a/final.ckpt", "--ablate", "tapm", "--force"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn ablation_flags_train_and_disable_routing_output() {
    let dir = setup();
    for (flag, out) in [("saclm", "s"), ("tapm", "t"), ("enc2", "e")] {
        let o = train(dir.path(), &["--out-dir", out, "--steps", "2", "--ablate", flag]);
        assert!(o.status.success(), "{flag}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let o = usam(&["eval", "--ckpt", "t/final.ckpt", "--data", "d.bin", "--no-decode"], dir.path());
    assert!(o.status.success());
    assert!(!stdout(&o).contains("routing["));
    let o = usam(&["inspect-routing", "--ckpt", "t/final.ckpt", "--data", "d.bin"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn usage_errors_exit_2() {
    let dir = setup();
    assert_eq!(usam(&["train"], dir.path()).status.code(), Some(2));
    assert_eq!(usam(&["frobnicate"], dir.path()).status.code(), Some(2));
    std::fs::write(dir.path().join("bad.cfg"), "learning_rate = 1\n").unwrap();
    let o = usam(&["train", "--config", "bad.cfg", "--data", "d.bin", "--out-dir", "x"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown key"));
}

#[test]
fn damaged_checkpoint_is_rejected() {
    let dir = setup();
    assert!(train(dir.path(), &["--out-dir", "a", "--steps", "1"]).status.success());
    let path = dir.path().join("a/final.ckpt");
    let mut bytes = std::fs::read(&path).unwrap();
    let n = bytes.len();
    bytes[n / 2] ^= 0x40;
    std::fs::write(&path, bytes).unwrap();
    let o = usam(&["eval", "--ckpt", "a/final.ckpt", "--data", "d.bin"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("checksum"));
}

#[test]
fn gradcheck_exit_status_follows_result() {
    let dir = tempfile::tempdir().unwrap();
    let o = usam(&["gradcheck", "--scope", "op", "--eps", "1e-4", "--tol", "1e-4"], dir.path());
    assert!(o.status.success(), "{}", stdout(&o));
    let out = stdout(&o);
    for op in ["matmul", "softmax", "layer_norm", "cosine_distance"] {
        assert!(out.lines().any(|l| l.starts_with(op)), "{op} missing");
    }
    let o = usam(&["gradcheck", "--scope", "op", "--eps", "1e-1", "--tol", "1e-12"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}
