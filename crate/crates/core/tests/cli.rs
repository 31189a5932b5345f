//! End-to-end runs of the `mbdiff` binary on a tiny planted dataset.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
data.seq_len=8
model.d=8
model.ffn_dim=16
denoiser.hidden=16
diffusion.T=20
diffusion.stride=5
stage1.epochs=2
stage1.batch_size=16
stage2.epochs=2
stage2.batch_size=32
stage3.epochs=1
stage3.batch_size=16
";

fn mbdiff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mbdiff")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = mbdiff(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn read(p: &Path) -> String {
    fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn full_pipeline_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let out = root.to_str().unwrap();
    let conf = root.join("tiny.conf");
    fs::write(&conf, TINY).unwrap();
    let conf = conf.to_str().unwrap();
    let data = root.join("synthetic.tsv");
    let data = data.to_str().unwrap();

    ok(&[
        "gen-data", "--out", out, "--seed", "3", "--users", "60", "--items", "40", "--behaviors", "4",
        "--archetypes", "2", "--cluster-size", "5", "--min-len", "5", "--max-len", "10",
    ]);
    for f in ["synthetic.tsv", "synthetic.tsv.header", "synthetic.tsv.manifest", "config.txt"] {
        assert!(root.join(f).exists(), "{f}");
    }
    assert!(read(&root.join("config.txt")).contains("cli.command=gen-data"));

    let stdout = ok(&["entropy", "--data", data, "--out", out]);
    assert!(stdout.contains("MI="));
    assert!(read(&root.join("entropy.txt")).contains("H_B_given_I="));

    ok(&["pretrain", "--config", conf, "--out", out]);
    ok(&["train-diffusion", "--config", conf, "--out", out]);
    ok(&["finetune", "--config", conf, "--out", out]);
    for s in 1..=3 {
        assert!(root.join(format!("stage{s}/manifest.txt")).exists());
        assert!(root.join(format!("stage{s}.log")).exists());
    }
    let echo = read(&root.join("config.txt"));
    assert!(echo.contains("model.d=8") && echo.contains("cli.command=finetune"));

    // Two identical inference runs into separate directories.
    let ckpt = root.join("stage3");
    let ckpt = ckpt.to_str().unwrap();
    let mut runs = Vec::new();
    for name in ["infer-a", "infer-b"] {
        let o = root.join(name);
        ok(&[
            "infer", "--data", data, "--checkpoint", ckpt, "--behavior", "3", "--user", "42", "--k", "10", "--seed",
            "1", "--out", o.to_str().unwrap(),
        ]);
        runs.push((read(&o.join("infer.txt")), read(&o.join("config.txt"))));
    }
    assert_eq!(runs[0], runs[1]);
    assert_eq!(runs[0].0.lines().filter(|l| !l.starts_with('#')).count(), 10);

    // K beyond the catalog is clipped with a warning.
    let o = root.join("infer-all");
    let clipped = mbdiff(&[
        "infer", "--data", data, "--checkpoint", ckpt, "--behavior", "0", "--user", "42", "--k", "1000", "--out",
        o.to_str().unwrap(),
    ]);
    assert!(clipped.status.success());
    assert!(String::from_utf8_lossy(&clipped.stderr).contains("warning"));
    let mut items: Vec<u32> = read(&o.join("infer.txt"))
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.split(' ').nth(1).unwrap().parse().unwrap())
        .collect();
    items.sort_unstable();
    assert_eq!(items, (0..40).collect::<Vec<u32>>());

    let bad = mbdiff(&["infer", "--data", data, "--checkpoint", ckpt, "--behavior", "9", "--user", "42", "--out", out]);
    assert!(!bad.status.success());

    let table = ok(&["evaluate", "--data", data, "--checkpoint", ckpt, "--out", out]);
    assert!(table.contains("R@10"));
    assert!(read(&root.join("eval.kv")).contains("baseline.recall@10="));
    assert!(!read(&root.join("rankings.txt")).is_empty());

    ok(&["attn-dump", "--data", data, "--checkpoint", ckpt, "--user", "5", "--out", out]);
    assert_eq!(read(&root.join("attention_user5.txt.legend")).lines().count(), 8);

    let sw = root.join("sweep");
    ok(&[
        "sweep", "--data", data, "--config", conf, "--axis", "omega", "--values", "0,1,2,5", "--out",
        sw.to_str().unwrap(),
    ]);
    let rows = read(&sw.join("sweep_omega.txt"));
    assert_eq!(rows.lines().skip(1).filter(|l| !l.starts_with('#')).count(), 4);
    assert!(read(&sw.join("sweep_omega.svg")).starts_with("<svg"));

    let fs_dir = root.join("few");
    ok(&[
        "few-shot", "--data", data, "--config", conf, "--behavior", "3", "--ratios", "0,1", "--out",
        fs_dir.to_str().unwrap(),
    ]);
    let few = read(&fs_dir.join("few_shot.txt"));
    assert_eq!(few.lines().filter(|l| !l.starts_with('#') && !l.trim_start().starts_with("ratio")).count(), 2);
}

#[test]
fn grad_check_exit_status_follows_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    ok(&["grad-check", "--target", "linear", "--out", out]);
    assert!(read(&dir.path().join("grad_check.txt")).contains("passed=true"));
    let strict = mbdiff(&["grad-check", "--target", "mcgln-block", "--tolerance", "1e-30", "--out", out]);
    assert!(!strict.status.success());
    assert!(String::from_utf8_lossy(&strict.stderr).contains("gradient error"));
}

#[test]
fn errors_exit_nonzero_after_echoing_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let missing = dir.path().join("absent.tsv");
    let r = mbdiff(&["pretrain", "--data", missing.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(!r.status.success());
    assert!(String::from_utf8_lossy(&r.stderr).contains("absent.tsv"));
    assert!(read(&out.join("config.txt")).contains("cli.command=pretrain"));

    assert!(!mbdiff(&["nonsense"]).status.success());
    assert!(!mbdiff(&["sweep", "--axis", "lr", "--values", "1", "--out", out.to_str().unwrap()]).status.success());
    assert!(!mbdiff(&["grad-check", "--set", "model.width=3", "--out", out.to_str().unwrap()]).status.success());
}
