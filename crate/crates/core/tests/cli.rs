mod common;

use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use sha2::{Digest, Sha256};

fn tvlt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tvlt")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn schema(name: &str) -> jsonschema::Validator {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs").join(name);
    let v: Value = serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap();
    jsonschema::validator_for(&v).unwrap()
}

fn assert_valid(validator: &jsonschema::Validator, doc: &Value) {
    let errors: Vec<String> = validator.iter_errors(doc).map(|e| format!("{} at {}", e, e.instance_path())).collect();
    assert!(errors.is_empty(), "{errors:#?}");
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

fn tree_hashes(dir: &Path, skip: &[&str]) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
            if skip.contains(&rel.as_str()) {
                continue;
            }
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(rel, hex::encode(Sha256::digest(std::fs::read(&path).unwrap())));
            }
        }
    }
    out
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&tvlt(&["--help"])), 0);
    assert_eq!(code(&tvlt(&["no-such-command"])), 2);
    assert_eq!(code(&tvlt(&["bench", "--out", "/tmp/x", "--objective", "contrastive"])), 2);
    assert_eq!(code(&tvlt(&["bench", "--out", "/tmp/x", "--preset", "huge"])), 2);
    assert_eq!(code(&tvlt(&["bench", "--out", "/tmp/x", "--audio-patch", "16by16"])), 2);
}

#[test]
fn unknown_config_keys_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"train": {"stpes": 5}}"#).unwrap();
    let o = tvlt(&["--config", p(&cfg), "gen-data", "--out", p(&dir.path().join("d"))]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("train.stpes"));
}

#[test]
fn missing_files_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.tvlt");
    let out = dir.path().join("o");
    assert_eq!(code(&tvlt(&["eval", "--checkpoint", p(&missing), "--out", p(&out)])), 3);
    let data = dir.path().join("data");
    assert_eq!(code(&tvlt(&["gen-data", "--out", p(&data)])), 0);
    // refuses to overwrite without --force
    assert_eq!(code(&tvlt(&["gen-data", "--out", p(&data)])), 3);
    assert_eq!(code(&tvlt(&["gen-data", "--out", p(&data), "--force"])), 0);
}

#[test]
fn gen_data_is_seed_deterministic_and_writes_a_valid_config() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        assert_eq!(code(&tvlt(&["--seed", seed, "gen-data", "--out", p(&out), "--n-samples", "4"])), 0);
        out
    };
    let (a, b, c) = (run("a", "7"), run("b", "7"), run("c", "8"));
    let skip = ["fingerprint.json"];
    assert_eq!(tree_hashes(&a, &skip), tree_hashes(&b, &skip));
    assert_ne!(tree_hashes(&a, &skip), tree_hashes(&c, &skip));

    let resolved = read_json(&a.join("config.resolved.json"));
    assert_valid(&schema("config.schema.json"), &resolved);
    assert_eq!(resolved["seed"], 7);
    assert_eq!(resolved["data"]["n_samples"], 4);
    let fp = read_json(&a.join("fingerprint.json"));
    let digest = hex::encode(Sha256::digest(std::fs::read(a.join("config.resolved.json")).unwrap()));
    assert_eq!(fp["config_sha256"], digest.as_str());
    assert_eq!(fp["command"], "gen-data");
}

#[test]
fn resolved_config_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    let args = ["--seed", "3", "--steps", "2", "--decoder", "joint", "pretrain", "--out"];
    let mut a = args.to_vec();
    a.push(p(&first));
    assert_eq!(code(&tvlt(&a)), 0);
    let resolved = first.join("config.resolved.json");
    let cfg = read_json(&resolved);
    assert_eq!(cfg["model"]["decoder"], "joint");
    assert_eq!(cfg["train"]["steps"], 2);

    let second = dir.path().join("second");
    assert_eq!(code(&tvlt(&["--config", p(&resolved), "pretrain", "--out", p(&second)])), 0);
    let skip = ["fingerprint.json"];
    assert_eq!(tree_hashes(&first, &skip), tree_hashes(&second, &skip));
}

#[test]
fn selfcheck_passes_and_matches_the_schema() {
    let dir = tempfile::tempdir().unwrap();
    let o = tvlt(&["selfcheck", "--instances", "2", "--out", p(dir.path())]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let printed: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_valid(&schema("selfcheck.schema.json"), &printed);
    assert_eq!(printed, read_json(&dir.path().join("selfcheck.json")));
    assert_eq!(printed["pass"], true);
    let ops: Vec<&str> = printed["checks"].as_array().unwrap().iter().map(|c| c["op"].as_str().unwrap()).collect();
    for want in ["gelu", "softmax", "layer_norm", "end_to_end", "log_mel", "speech_spans", "patchify", "ranking", "mask_partition"] {
        assert!(ops.iter().any(|o| o.contains(want)), "no {want} check in {ops:?}");
    }
}

#[test]
fn flipped_gelu_gradient_is_named() {
    let o = tvlt(&["selfcheck", "--instances", "2", "--inject-fault", "gelu"]);
    assert_eq!(code(&o), 1);
    let report: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_valid(&schema("selfcheck.schema.json"), &report);
    let failed: Vec<String> = report["checks"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|c| c["pass"] == false)
        .map(|c| format!("{}::{}", c["module"].as_str().unwrap(), c["op"].as_str().unwrap()))
        .collect();
    assert!(failed.contains(&"numerics::gelu".to_string()), "{failed:?}");
    assert!(failed.iter().all(|f| f == "numerics::gelu" || f.starts_with("model::end_to_end")), "{failed:?}");
    assert!(String::from_utf8_lossy(&o.stderr).contains("FAIL numerics::gelu"));
    assert_eq!(code(&tvlt(&["selfcheck", "--inject-fault", "nonsense"])), 2);
}

#[test]
fn reconstruct_renders_match_the_mask_plan() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let pre = dir.path().join("pre");
    assert_eq!(code(&tvlt(&["gen-data", "--out", p(&data), "--n-samples", "3"])), 0);
    assert_eq!(code(&tvlt(&["--steps", "2", "pretrain", "--data", p(&data), "--out", p(&pre)])), 0);
    let ckpt = pre.join("checkpoint.tvlt");
    for sample in ["0", "2"] {
        let out = dir.path().join(format!("rec{sample}"));
        let o = tvlt(&["reconstruct", "--checkpoint", p(&ckpt), "--data", p(&data), "--sample", sample, "--out", p(&out)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let check = common::render::check_render_dir(&out);
        assert!(check.mismatches.is_empty(), "{:?}", check.mismatches);
        // 4 frames of 32×32 plus a 48-frame × 128-mel spectrogram
        assert_eq!(check.pixels, 4 * 32 * 32 + 48 * 128);
        assert_eq!(String::from_utf8_lossy(&o.stdout).lines().count(), 3 * 4 + 3);
    }
    let o = tvlt(&["reconstruct", "--checkpoint", p(&ckpt), "--data", p(&data), "--sample", "9", "--out", p(&dir.path().join("bad"))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn finetune_and_eval_write_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let pre = dir.path().join("pre");
    let ft = dir.path().join("ft");
    let ev = dir.path().join("ev");
    assert_eq!(code(&tvlt(&["--steps", "2", "pretrain", "--out", p(&pre)])), 0);
    let m = read_json(&pre.join("metrics.json"));
    assert_eq!(m["loss_curve"].as_array().unwrap().len(), 2);
    // separate decoding: 2 layers × 8 samples × (Lv² + La²) with Lv = 16, La = 24
    assert_eq!(m["decoder_attention_pairs_per_step"], 2 * 8 * (16 * 16 + 24 * 24));
    let ckpt = pre.join("checkpoint.tvlt");
    let o = tvlt(&["--steps", "2", "finetune", "--checkpoint", p(&ckpt), "--head", "multi-label:4", "--out", p(&ft)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = tvlt(&["eval", "--checkpoint", p(&ft.join("checkpoint.tvlt")), "--out", p(&ev)]);
    assert_eq!(code(&o), 0);
    let printed: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(printed, read_json(&ev.join("metrics.json")));
    assert_eq!(code(&tvlt(&["finetune", "--checkpoint", p(&ckpt), "--head", "ranking", "--out", p(&ft)])), 2);
}

#[test]
fn bench_reports_every_stage() {
    let dir = tempfile::tempdir().unwrap();
    let o = tvlt(&["bench", "--runs", "3", "--out", p(dir.path())]);
    assert_eq!(code(&o), 0);
    let r = read_json(&dir.path().join("latency.json"));
    let cases = r["cases"].as_array().unwrap();
    assert_eq!(cases.len(), 2);
    for c in cases {
        for stage in ["fft", "tokenize", "encode"] {
            assert!(c["stages"][stage]["median_ms"].as_f64().unwrap() >= 0.0);
            assert!(c["stages"][stage]["mad_ms"].as_f64().unwrap() >= 0.0);
        }
    }
}
