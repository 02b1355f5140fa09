use std::path::Path;
use std::process::{Command, Output};

fn bat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bat")).args(args).env("BAT_LOG", "error").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = bat(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &[&str] = &[
    "--set", "decoder_hidden=8", "--set", "encoding_dim=8", "--set", "position_hidden=8",
    "--set", "interaction_hidden=8", "--set", "attention_dim=8", "--set", "priority_hidden=8",
    "--set", "context_embed=8", "--set", "behavior_hidden=4", "--set", "t_h=1", "--set", "t_f=2",
    "--set", "epochs=2", "--set", "batch_size=8", "--set", "synth_scenes=20",
];

#[test]
fn synth_train_eval_predict_heatmap() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("scenes.bats");
    ok(&["synth", "--out", s(&data), "--kinds", "lane_change,roundabout_arc", "--scenes", "5", "--t-h", "1", "--t-f", "2"]);

    let run = dir.path().join("run");
    let mut args = vec!["train", "--out", s(&run)];
    args.extend_from_slice(TINY);
    ok(&args);
    let ckpt = run.join("checkpoint.batc");
    assert!(ckpt.exists());
    let log = std::fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);

    let table = ok(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--split", "all"]);
    assert!(table.starts_with("split,predictor,n,rmse_1s,rmse_2s\n"));
    assert_eq!(table.lines().count(), 16);

    let json = ok(&["predict", "--checkpoint", s(&ckpt), "--data", s(&data), "--index", "3"]);
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert!(v.is_object());

    let prefix = dir.path().join("hm");
    ok(&["heatmap", "--checkpoint", s(&ckpt), "--data", s(&data), "--grid", "-5,5,-2,30,16,32", "--steps", "0,9", "--out-prefix", s(&prefix)]);
    let made = std::fs::read_dir(dir.path()).unwrap().filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with("hm")).count();
    assert_eq!(made, 3);
}

#[test]
fn errors_report_kind() {
    let dir = tempfile::tempdir().unwrap();
    let out = bat(&["train", "--out", s(dir.path()), "--set", "no_such_key=1"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error: kind=config"), "{err}");

    let out = bat(&["predict", "--checkpoint", s(&dir.path().join("missing.batc")), "--data", "x"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: kind="));
}

#[test]
fn ingest_csv_to_scenes() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("tracks.csv");
    let mut text = String::from("vehicle_id,frame,x,y,lane_id\n");
    for f in 0..60 {
        text.push_str(&format!("1,{f},0,{},1\n", f as f64 * 2.0));
        text.push_str(&format!("2,{f},3.5,{},2\n", 5.0 + f as f64 * 2.0));
    }
    std::fs::write(&csv, text).unwrap();
    let out = dir.path().join("scenes.bats");
    ok(&["ingest", "--input", s(&csv), "--out", s(&out), "--t-h", "1", "--t-f", "2"]);
    assert!(std::fs::metadata(&out).unwrap().len() > 0);

    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "vehicle_id,frame,x,y,lane_id\n1,0,0,zz,1\n").unwrap();
    let res = bat(&["ingest", "--input", s(&bad), "--out", s(&out)]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("line 2"));
}
