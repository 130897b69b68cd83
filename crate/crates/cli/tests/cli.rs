use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use axum::body::Body;
use axum::http::{header, Request};
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use progae_core::checkpoint;
use progae_core::config::{Config, Preset, ServeConfig};
use progae_core::data::encode_png;
use progae_core::trainer::TrainState;
use progae_serve::{router, AppState};

fn progae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_progae"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn tiny_config() -> Config {
    let mut cfg = Preset::DeskSynthetic.config();
    cfg.model.latent_dim = 8;
    cfg.model.max_resolution = 8;
    cfg.model.channel_schedule = vec![4, 4];
    cfg.train.phase_samples = vec![40_000, 40_000];
    cfg.train.batch_schedule = vec![4, 4];
    cfg.train.metric_every = 8;
    cfg.data.synthetic.count = 60;
    cfg
}

/// A saved 8x8 checkpoint with the top level active.
fn checkpoint_in(dir: &Path) -> PathBuf {
    let mut state = TrainState::new(tiny_config()).unwrap();
    state.progress.level = 1;
    let path = dir.join("model.ckpt");
    checkpoint::save(&state, &path).unwrap();
    path
}

fn image_in(dir: &Path, name: &str, seed: u64) -> PathBuf {
    let chw: Vec<f64> = (0..3 * 64)
        .map(|i| (((i as u64 * 2654435761 + seed * 97) % 1000) as f64 / 500.0) - 1.0)
        .collect();
    let path = dir.join(name);
    fs::write(&path, encode_png(&chw, 8).unwrap()).unwrap();
    path
}

/// The single written file whose name contains `needle`.
fn output(dir: &Path, needle: &str) -> Vec<u8> {
    let hits: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap().to_string_lossy().contains(needle))
        .collect();
    assert_eq!(hits.len(), 1, "{needle}: {hits:?}");
    fs::read(&hits[0]).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_lists_every_config_key() {
    let o = progae(&["--help"]);
    assert!(o.status.success());
    let text = stdout(&o);
    for key in Config::keys() {
        assert!(text.contains(&key), "help is missing {key}");
    }
}

#[test]
fn usage_errors_exit_with_two() {
    let o = progae(&["no-such-command"]);
    assert_eq!(o.status.code(), Some(2));

    let o = progae(&["show-config", "--train.no_such_key=3"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("train.no_such_key"), "{}", stderr(&o));

    let o = progae(&["show-config", "--train.loss.lambda_x=-1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("lambda_x"), "{}", stderr(&o));
}

#[test]
fn missing_dataset_directory_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = progae(&[
        "train",
        "--out",
        s(&out),
        "--data.source=directory",
        "--data.path=/definitely/not/here",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("data.path"), "{}", stderr(&o));
}

#[test]
fn corrupt_checkpoint_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.ckpt");
    fs::write(&bad, b"garbage bytes").unwrap();
    let o = progae(&["eval", "--checkpoint", s(&bad), "--ppl"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("checkpoint"), "{}", stderr(&o));
}

#[test]
fn show_config_applies_overrides_and_seed() {
    let o = progae(&["show-config", "--seed", "7", "--train.loss.lambda_x=3.5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let cfg = Config::from_toml(&stdout(&o)).unwrap();
    assert_eq!(cfg.seed, 7);
    assert_eq!(cfg.train.loss.lambda_x, 3.5);
}

#[test]
fn train_without_margin_logs_the_plain_encoder_loss() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("tiny.toml");
    tiny_config().save(&cfg_path).unwrap();
    let out = dir.path().join("run");
    let o = progae(&["train", "--config", s(&cfg_path), "--out", s(&out), "--train.margin=inf"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("checkpoint.bin").is_file());

    let lambda_x = tiny_config().train.loss.lambda_x;
    let log = fs::read_to_string(out.join("log.jsonl")).unwrap();
    let mut steps = 0;
    for line in log.lines() {
        let r: Value = serde_json::from_str(line).unwrap();
        assert_eq!(r["schema_version"], 1);
        if r["kind"] != "step" {
            continue;
        }
        steps += 1;
        assert_eq!(r["margin"], "inf");
        let f = |k: &str| r[k].as_f64().unwrap();
        let plain = f("kl_real") - f("kl_fake") + lambda_x * f("recon_x");
        assert!((f("encoder_total") - plain).abs() <= 1e-9 * plain.abs().max(1.0), "{line}");
    }
    assert!(steps > 0);
}

#[test]
fn image_commands_agree_with_each_other() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = checkpoint_in(dir.path());
    let a = image_in(dir.path(), "a.png", 1);
    let b = image_in(dir.path(), "b.png", 2);
    let attr = dir.path().join("attr.json");
    fs::write(
        &attr,
        json!({ "name": "tone", "direction": vec![0.3; 8], "source_counts": [1, 1] }).to_string(),
    )
    .unwrap();

    let rec = dir.path().join("rec");
    let o = progae(&["reconstruct", "--checkpoint", s(&ckpt), "--out", s(&rec), s(&a), s(&b)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let tag = format!("{}-s0", checkpoint::file_hash(&ckpt).unwrap());
    assert!(rec.join(format!("a-rec-{tag}.png")).is_file());
    let (rec_a, rec_b) = (output(&rec, "a-rec"), output(&rec, "b-rec"));

    let man = dir.path().join("man");
    let o = progae(&[
        "manipulate",
        "--checkpoint",
        s(&ckpt),
        "--attribute",
        s(&attr),
        "--lambda",
        "0",
        "--lambda",
        "-1.5",
        "--out",
        s(&man),
        s(&a),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(output(&man, "a-tone+0-"), rec_a);
    assert_ne!(output(&man, "a-tone-1.5-"), rec_a);
    assert!(!output(&man, "sweep").is_empty());

    let int = dir.path().join("int");
    let o = progae(&[
        "interpolate",
        "--checkpoint",
        s(&ckpt),
        "--corners",
        s(&a),
        s(&b),
        "--cells",
        "8",
        "--out",
        s(&int),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(output(&int, "cell0."), rec_a);
    assert_eq!(output(&int, "cell7."), rec_b);
    assert!(!output(&int, "interp-1x8").is_empty());

    let again = dir.path().join("rec2");
    assert!(progae(&["reconstruct", "--checkpoint", s(&ckpt), "--out", s(&again), s(&a)])
        .status
        .success());
    assert_eq!(output(&again, "a-rec"), rec_a);
}

async fn post(app: &axum::Router, path: &str, body: Value) -> Value {
    let req = Request::post(path)
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    assert!(resp.status().is_success(), "{path}: {}", resp.status());
    serde_json::from_slice(&resp.into_body().collect().await.unwrap().to_bytes()).unwrap()
}

fn unb64(v: &Value) -> Vec<u8> {
    STANDARD.decode(v.as_str().unwrap()).unwrap()
}

#[tokio::test]
async fn service_matches_cli_outputs_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = checkpoint_in(dir.path());
    let corners: Vec<PathBuf> = (0..4)
        .map(|k| image_in(dir.path(), &format!("c{k}.png"), 10 + k))
        .collect();

    let out = dir.path().join("out");
    let o = progae(&["reconstruct", "--checkpoint", s(&ckpt), "--out", s(&out), s(&corners[0])]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut args = vec!["interpolate", "--checkpoint", s(&ckpt), "--rows", "3", "--cols", "4", "--out", s(&out)];
    args.push("--corners");
    args.extend(corners.iter().map(|p| s(p)));
    let o = progae(&args);
    assert!(o.status.success(), "{}", stderr(&o));

    let state = AppState::load(ServeConfig {
        checkpoint: s(&ckpt).into(),
        ..ServeConfig::default()
    })
    .unwrap();
    let app = router(std::sync::Arc::new(state));
    let mut codes = Vec::new();
    for c in &corners {
        let r = post(&app, "/encode", json!({ "image": STANDARD.encode(fs::read(c).unwrap()) })).await;
        codes.push(r["code"].clone());
    }
    let dec = post(&app, "/decode", json!({ "code": codes[0] })).await;
    assert_eq!(unb64(&dec["image"]), output(&out, "c0-rec"));

    let grid = post(&app, "/interpolate", json!({ "codes": codes, "grid": { "rows": 3, "cols": 4 } })).await;
    assert_eq!(unb64(&grid["image"]), output(&out, "interp-3x4"));
    for (i, cell) in grid["cells"].as_array().unwrap().iter().enumerate() {
        assert_eq!(unb64(cell), output(&out, &format!("cell{i}.")));
    }
}

#[test]
fn extract_attr_reads_exported_factor_splits() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("tiny.toml");
    tiny_config().save(&cfg_path).unwrap();
    let data = dir.path().join("data");
    let o = progae(&["export-data", "--config", s(&cfg_path), "--out", s(&data), "--split-factor", "hue"]);
    assert!(o.status.success(), "{}", stderr(&o));

    let ckpt = checkpoint_in(dir.path());
    let attr = dir.path().join("attrs").join("hue.json");
    let o = progae(&[
        "extract-attr",
        "--checkpoint",
        s(&ckpt),
        "--set-a",
        s(&data.join("hue/a")),
        "--set-b",
        s(&data.join("hue/b")),
        "--name",
        "hue",
        "--out",
        s(&attr),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: Value = serde_json::from_slice(&fs::read(&attr).unwrap()).unwrap();
    assert_eq!(v["name"], "hue");
    assert_eq!(v["direction"].as_array().unwrap().len(), 8);
    let (a, b) = (v["source_counts"][0].as_u64().unwrap(), v["source_counts"][1].as_u64().unwrap());
    assert!(a > 0 && b > 0 && a.abs_diff(b) <= 1);
}
