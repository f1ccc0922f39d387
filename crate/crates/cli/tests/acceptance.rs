//! End-to-end pipeline acceptance: the full command chain exits cleanly and
//! is bit-for-bit reproducible under a fixed seed.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn atomtune(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_atomtune"))
        .args(args)
        .current_dir(dir)
        .env_remove("ATOMTUNE_SEED")
        .output()
        .expect("spawn atomtune")
}

fn run_ok(dir: &Path, args: &[&str]) -> String {
    let out = atomtune(dir, args);
    assert!(
        out.status.success(),
        "`atomtune {}` failed (code {:?}):\n{}",
        args.join(" "),
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// All files under a checkpoint directory, as (relative name, bytes).
fn dir_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn criterion_11_end_to_end_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    run_ok(dir, &["init", "--out", "dense", "--seed", "7"]);
    run_ok(
        dir,
        &["gen-data", "--task", "shapes-source", "--out", "train", "--n", "64", "--seed", "1"],
    );
    run_ok(
        dir,
        &["gen-data", "--task", "shapes-source", "--out", "eval", "--n", "32", "--seed", "2"],
    );
    run_ok(
        dir,
        &[
            "decompose", "--model", "dense", "--out", "dec", "--max-outer", "6", "--max-ista",
            "15", "--seed", "7",
        ],
    );
    let verify_out = run_ok(dir, &["verify", "--model", "dec"]);
    assert!(
        verify_out.contains("all") && verify_out.contains("checks passed"),
        "verify was not all-green: {verify_out}"
    );
    let finetune = |out_dir: &str| {
        run_ok(
            dir,
            &[
                "finetune", "--model", "dec", "--data", "train", "--eval", "eval", "--out",
                out_dir, "--scheme", "atoms-plus-linear", "--epochs", "2", "--batch-size", "16",
                "--seed", "3",
            ],
        );
    };
    finetune("run1");
    finetune("run2");
    for sub in ["final", "best"] {
        let a = dir_bytes(&dir.join("run1").join(sub));
        let b = dir_bytes(&dir.join("run2").join(sub));
        assert!(!a.is_empty(), "missing {sub} checkpoint");
        assert_eq!(
            a.iter().map(|(n, _)| n).collect::<Vec<_>>(),
            b.iter().map(|(n, _)| n).collect::<Vec<_>>(),
            "{sub}: file sets differ between same-seed runs"
        );
        for ((name, bytes_a), (_, bytes_b)) in a.iter().zip(&b) {
            assert_eq!(
                bytes_a, bytes_b,
                "{sub}/{name} differs between same-seed runs"
            );
        }
    }
    assert_eq!(
        fs::read(dir.join("run1/history.jsonl")).unwrap(),
        fs::read(dir.join("run2/history.jsonl")).unwrap(),
        "training history differs between same-seed runs"
    );
    // tuned checkpoints still verify and account cleanly
    let verify_out = run_ok(dir, &["verify", "--model", "run1/final"]);
    assert!(verify_out.contains("checks passed"));
    run_ok(dir, &["eval", "--model", "run1/final", "--data", "eval"]);
    let account_out = run_ok(
        dir,
        &["account", "--model", "run1/final", "--scheme", "atoms-plus-linear"],
    );
    assert!(account_out.contains("total tunable"));
    println!("acceptance criterion 11 (end-to-end CLI pipeline): PASS");
}
