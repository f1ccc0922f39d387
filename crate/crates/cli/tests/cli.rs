//! Integration tests driving the compiled binary.

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

fn assert_ok(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed (code {:?}):\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn unknown_scheme_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = atomtune(
        tmp.path(),
        &[
            "finetune", "--model", "m", "--data", "d", "--out", "o", "--scheme", "bogus",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown scheme"));
}

#[test]
fn missing_model_is_a_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = atomtune(tmp.path(), &["eval", "--model", "nope", "--data", "nope"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn zero_threads_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let out = atomtune(tmp.path(), &["--threads", "0", "init", "--out", "m"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gen_data_seed_sources_agree() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("cfg.json"), r#"{"seed": 5}"#).unwrap();
    assert_ok(
        &atomtune(
            tmp.path(),
            &["gen-data", "--task", "shapes-source", "--out", "a", "--n", "8", "--seed", "5"],
        ),
        "gen-data --seed",
    );
    assert_ok(
        &atomtune(
            tmp.path(),
            &[
                "--config", "cfg.json", "gen-data", "--task", "shapes-source", "--out", "b",
                "--n", "8",
            ],
        ),
        "gen-data --config",
    );
    // env beats both
    let out = Command::new(env!("CARGO_BIN_EXE_atomtune"))
        .args(["gen-data", "--task", "shapes-source", "--out", "c", "--n", "8", "--seed", "9"])
        .current_dir(tmp.path())
        .env("ATOMTUNE_SEED", "5")
        .output()
        .unwrap();
    assert_ok(&out, "gen-data with ATOMTUNE_SEED");
    let a = fs::read(tmp.path().join("a/images.atf")).unwrap();
    let b = fs::read(tmp.path().join("b/images.atf")).unwrap();
    let c = fs::read(tmp.path().join("c/images.atf")).unwrap();
    assert_eq!(a, b, "--seed and config seed diverge");
    assert_eq!(a, c, "ATOMTUNE_SEED did not override --seed");
}

#[test]
fn verify_catches_a_tampered_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    assert_ok(
        &atomtune(tmp.path(), &["init", "--out", "dense", "--seed", "1"]),
        "init",
    );
    assert_ok(
        &atomtune(
            tmp.path(),
            &[
                "decompose", "--model", "dense", "--out", "dec", "--max-outer", "4",
                "--max-ista", "10", "--seed", "1",
            ],
        ),
        "decompose",
    );
    assert_ok(&atomtune(tmp.path(), &["verify", "--model", "dec"]), "verify");
    // flip one hex digit of a composed-filter digest; the blobs still load,
    // so only `verify` can notice
    let path = tmp.path().join("dec/manifest.json");
    let text = fs::read_to_string(&path).unwrap();
    let pos = text.find("\"composed_digest\": \"").unwrap() + "\"composed_digest\": \"".len();
    let mut bytes = text.into_bytes();
    bytes[pos] = if bytes[pos] == b'0' { b'1' } else { b'0' };
    fs::write(&path, bytes).unwrap();
    let out = atomtune(tmp.path(), &["verify", "--model", "dec"]);
    assert_eq!(out.status.code(), Some(3), "tampered digest not flagged");
    assert!(String::from_utf8_lossy(&out.stderr).contains("digest"));
}

#[test]
fn tampered_blob_fails_at_load() {
    let tmp = tempfile::tempdir().unwrap();
    assert_ok(
        &atomtune(tmp.path(), &["init", "--out", "dense", "--seed", "2"]),
        "init",
    );
    let blob = fs::read_dir(tmp.path().join("dense/blobs"))
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();
    let mut bytes = fs::read(&blob).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x40;
    fs::write(&blob, bytes).unwrap();
    let out = atomtune(tmp.path(), &["verify", "--model", "dense"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("digest"));
}

fn decomposed_fixture(dir: &Path) {
    assert_ok(&atomtune(dir, &["init", "--out", "dense", "--seed", "4"]), "init");
    assert_ok(
        &atomtune(
            dir,
            &[
                "decompose", "--model", "dense", "--out", "dec", "--max-outer", "4",
                "--max-ista", "10", "--seed", "4",
            ],
        ),
        "decompose",
    );
}

#[test]
fn zero_lr_finetune_is_bitwise_identity() {
    let tmp = tempfile::tempdir().unwrap();
    decomposed_fixture(tmp.path());
    assert_ok(
        &atomtune(
            tmp.path(),
            &["gen-data", "--task", "shapes-source", "--out", "data", "--n", "16", "--seed", "8"],
        ),
        "gen-data",
    );
    assert_ok(
        &atomtune(
            tmp.path(),
            &[
                "finetune", "--model", "dec", "--data", "data", "--out", "run", "--scheme",
                "atoms-only", "--epochs", "1", "--lr", "0",
            ],
        ),
        "finetune lr=0",
    );
    // every tensor blob byte-identical; only manifest meta may differ
    for entry in fs::read_dir(tmp.path().join("dec/blobs")).unwrap() {
        let name = entry.unwrap().file_name();
        let before = fs::read(tmp.path().join("dec/blobs").join(&name)).unwrap();
        let after = fs::read(tmp.path().join("run/final/blobs").join(&name)).unwrap();
        assert_eq!(before, after, "{name:?} changed under lr=0");
    }
}

/// FNV-1a 64 over shape extents (u32 LE) then values (f32-bit LE), matching
/// the checkpoint digest, so a test can forge a "consistent" corrupt blob.
fn forge_digest(shape: &[u32], values: &[f32]) -> String {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x100_0000_01b3);
        }
    };
    for &e in shape {
        eat(&e.to_le_bytes());
    }
    for &v in values {
        eat(&v.to_le_bytes());
    }
    format!("{h:016x}")
}

#[test]
fn verify_catches_a_flipped_alpha_sign() {
    let tmp = tempfile::tempdir().unwrap();
    decomposed_fixture(tmp.path());
    assert_ok(&atomtune(tmp.path(), &["verify", "--model", "dec"]), "verify clean");
    // flip one alpha sign inside the blob and forge a matching blob digest,
    // so only the composed-filter digest can expose the edit
    let blob_path = tmp.path().join("dec/blobs/layer000.alpha.atf");
    let bytes = fs::read(&blob_path).unwrap();
    let rank = bytes[4] as usize;
    let header = 5 + 4 * rank;
    let shape: Vec<u32> = (0..rank)
        .map(|i| u32::from_le_bytes(bytes[5 + 4 * i..9 + 4 * i].try_into().unwrap()))
        .collect();
    let mut values: Vec<f32> = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    values[0] = -values[0];
    let mut forged = bytes[..header].to_vec();
    for v in &values {
        forged.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&blob_path, forged).unwrap();
    let manifest_path = tmp.path().join("dec/manifest.json");
    let mut manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&manifest_path).unwrap()).unwrap();
    manifest["layers"][0]["blobs"]["alpha"]["digest"] =
        serde_json::Value::String(forge_digest(&shape, &values));
    fs::write(&manifest_path, serde_json::to_string_pretty(&manifest).unwrap()).unwrap();
    let out = atomtune(tmp.path(), &["verify", "--model", "dec"]);
    assert_eq!(out.status.code(), Some(3), "flipped alpha not flagged");
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("layer 0"), "failed layer not named: {stderr}");
}

#[test]
fn account_reports_expected_conv_tunables() {
    let tmp = tempfile::tempdir().unwrap();
    decomposed_fixture(tmp.path());
    let out = atomtune(
        tmp.path(),
        &["account", "--model", "dec", "--scheme", "atoms-only", "--json"],
    );
    assert_ok(&out, "account");
    let report: serde_json::Value =
        serde_json::from_slice(&out.stdout).expect("account --json output");
    let conv_total: u64 = report["layers"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|l| l["kind"] == "decomposed-conv")
        .map(|l| l["tunable"].as_u64().unwrap())
        .sum();
    // four decomposed 3x3 layers at m = 9 atoms: 4 * 81
    assert_eq!(conv_total, 324);
}

#[test]
fn account_methods_table_and_errors() {
    let tmp = tempfile::tempdir().unwrap();
    assert_ok(
        &atomtune(tmp.path(), &["init", "--out", "dense", "--seed", "3"]),
        "init",
    );
    let out = atomtune(
        tmp.path(),
        &["account", "--model", "dense", "--methods", "original,lora,atoms-d"],
    );
    assert_ok(&out, "account table");
    let out = atomtune(tmp.path(), &["account", "--model", "dense", "--methods", ","]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--methods"));
    // the published reference table has one internally inconsistent cell,
    // so the self-check reports it and exits nonzero
    let out = atomtune(tmp.path(), &["account", "--paper-sizes"]);
    assert_eq!(out.status.code(), Some(3));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("MISMATCH"));
    assert_eq!(stdout.matches(" ok").count(), 12);
}
