use std::path::Path;
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

fn memscore(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_memscore"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = memscore(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn synth(dir: &Path) {
    ok(&["synth", "--out", "data", "--n", "60", "--seed", "3"], dir);
}

#[test]
fn synth_train_eval_plot_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    synth(d);
    for f in ["data/manifest.csv", "data/manifest.meta.json", "data/train.csv", "data/val.csv", "data/test.csv", "data/images/00000.png"] {
        assert!(d.join(f).exists(), "{f}");
    }
    ok(
        &[
            "train", "--manifest", "data/train.csv", "--val", "data/val.csv", "--variant", "m3m",
            "--epochs", "2", "--batch-size", "16", "--eta", "0.01", "--gamma", "0.9", "--seed", "1",
            "--pretrain-epochs", "1", "--out", "m/model.ckpt",
        ],
        d,
    );
    assert!(d.join("m/model.jsonl").exists());
    let first = std::fs::read_to_string(d.join("m/model.jsonl")).unwrap();
    let event: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
    assert_eq!(event["kind"], "train");

    let line = ok(
        &["eval", "--checkpoint", "m/model.ckpt", "--manifest", "data/test.csv", "--out", "r/report.json"],
        d,
    );
    assert!(line.contains("spearman="));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("r/report.json")).unwrap()).unwrap();
    assert!(report["mse"].as_f64().unwrap() >= 0.0);
    assert!(report.get("spearman").is_some());
    let kde = std::fs::read_to_string(d.join("r/report_kde.csv")).unwrap();
    assert_eq!(kde.lines().next().unwrap(), "x,density_predictions,density_truths");
    assert_eq!(kde.lines().count(), 513);

    ok(
        &["plot", "--kind", "kde", "--pred", "r/report_preds.csv", "--truth", "r/report_truths.csv", "--out", "r/kde.svg"],
        d,
    );
    let svg = std::fs::read_to_string(d.join("r/kde.svg")).unwrap();
    // one curve and one legend swatch per series
    assert_eq!(svg.matches(r##"stroke="#E67E22""##).count(), 2);
    assert_eq!(svg.matches(r##"stroke="#0000FF""##).count(), 2);
    assert!(svg.contains("predictions") && svg.contains("ground truth"));
}

#[test]
fn sweep_writes_curves_and_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    synth(d);
    ok(
        &[
            "sweep", "--manifest", "data/train.csv", "--val", "data/val.csv", "--epochs", "2",
            "--eta", "0.01,0.001", "--batch-size", "8,16", "--out", "sw",
        ],
        d,
    );
    let curves = std::fs::read_to_string(d.join("sw/curves.csv")).unwrap();
    assert_eq!(curves.lines().count(), 1 + 4 * 2);
    let summary: Vec<serde_json::Value> =
        serde_json::from_str(&std::fs::read_to_string(d.join("sw/summary.json")).unwrap()).unwrap();
    assert_eq!(summary.len(), 4);
    assert!(d.join("sw/run_3.ckpt").exists());
    ok(&["plot", "--kind", "sweep", "--curves", "sw/curves.csv", "--out", "sw/curves.svg"], d);
    assert!(d.join("sw/curves.svg").exists());
}

#[test]
fn vis_writes_grid_and_sidecar() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    synth(d);
    ok(
        &["train", "--manifest", "data/train.csv", "--val", "data/val.csv", "--epochs", "1", "--out", "m.ckpt"],
        d,
    );
    ok(
        &[
            "vis", "--checkpoint", "m.ckpt", "--layer", "trunk.conv1", "--filters", "0,2,5",
            "--steps", "10", "--out", "v/grid.png", "--manifest", "data/test.csv", "--top-k", "2",
        ],
        d,
    );
    let side: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("v/grid.json")).unwrap()).unwrap();
    let filters = side["filters"].as_array().unwrap();
    assert_eq!(filters.len(), 3);
    for f in filters {
        assert!(f["final_activation"].as_f64().unwrap() >= f["initial_activation"].as_f64().unwrap());
        assert_eq!(f["top_images"].as_array().unwrap().len(), 2);
    }
    assert!(d.join("v/grid.png").exists() && d.join("v/grid_top.png").exists());
}

#[test]
fn failure_classes_have_distinct_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();

    let out = memscore(&["eval", "--bogus"], d);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));

    let out = memscore(&["eval", "--checkpoint", "nope.ckpt", "--manifest", "x.csv", "--out", "r.json"], d);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.trim().lines().count(), 1, "{err}");

    synth(d);
    ok(&["train", "--manifest", "data/train.csv", "--val", "data/val.csv", "--epochs", "1", "--out", "m.ckpt"], d);
    std::fs::write(d.join("bad.csv"), "image_ref,score,source\nimages/00000.png,1.7,x\n").unwrap();
    let out = memscore(&["eval", "--checkpoint", "m.ckpt", "--manifest", "bad.csv", "--out", "r.json"], d);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("row 1"));

    let out = memscore(
        &["train", "--manifest", "data/train.csv", "--val", "data/val.csv", "--eta", "1e9", "--out", "d.ckpt"],
        d,
    );
    assert_eq!(out.status.code(), Some(5));
    assert!(String::from_utf8_lossy(&out.stderr).contains("diverged"));

    let out = memscore(&["train", "--manifest", "data/train.csv", "--val", "data/val.csv", "--frozen", "true", "--out", "f.ckpt"], d);
    assert_eq!(out.status.code(), Some(1));
}

#[tokio::test]
async fn serve_uses_checkpoint_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    synth(d);
    ok(&["train", "--manifest", "data/train.csv", "--val", "data/val.csv", "--epochs", "1", "--out", "m.ckpt"], d);
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let mut child = Command::new(env!("CARGO_BIN_EXE_memscore"))
        .args(["serve", "--bind", &format!("127.0.0.1:{port}")])
        .env("MEMSCORE_CHECKPOINT", d.join("m.ckpt"))
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let base = format!("http://127.0.0.1:{port}");
    let start = Instant::now();
    let health = loop {
        if let Ok(r) = reqwest::get(format!("{base}/healthz")).await {
            break r.json::<serde_json::Value>().await.unwrap();
        }
        assert!(start.elapsed() < Duration::from_secs(30), "server did not start");
        tokio::time::sleep(Duration::from_millis(100)).await;
    };
    let png = std::fs::read(d.join("data/images/00000.png")).unwrap();
    let resp = reqwest::Client::new()
        .post(format!("{base}/score"))
        .body(png)
        .send()
        .await
        .unwrap();
    let score: serde_json::Value = resp.json().await.unwrap();
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(health["model_tag"].as_str().unwrap().starts_with("memnet-"));
    assert_eq!(score["model_tag"], health["model_tag"]);
    assert!((0.0..=1.0).contains(&score["score"].as_f64().unwrap()));
}
