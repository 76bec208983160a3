use std::process::Command;

fn unforge() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_unforge"));
    c.env_remove("UNFORGE_CACHE").env_remove("UNFORGE_OUTPUT");
    c
}

fn init(dir: &std::path::Path) -> std::path::PathBuf {
    let cfg = dir.join("toy.json");
    let st = unforge().args(["init", "--preset", "toy", "--seed", "1", "--out"]).arg(&cfg).status().unwrap();
    assert!(st.success());
    cfg
}

#[test]
fn bad_config_exits_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = init(tmp.path());
    let text = std::fs::read_to_string(&cfg).unwrap().replace("\"schema_version\": 1", "\"schema_version\": 99");
    std::fs::write(&cfg, text).unwrap();
    let out = unforge().args(["pretrain", "-c"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("schema_version"));
    let missing = unforge().args(["pretrain", "-c"]).arg(tmp.path().join("nope.json")).output().unwrap();
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn bad_eta_arguments_exit_with_two() {
    let out = unforge().args(["eta", "--c", "2", "--k", "2", "--nd", "15", "--nf", "2"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let ok = unforge()
        .args(["eta", "--c", "2", "--k", "2", "--nd", "16", "--nf", "2", "--trials", "100"])
        .output()
        .unwrap();
    assert!(ok.status.success());
    let v: serde_json::Value = serde_json::from_slice(&ok.stdout).unwrap();
    assert!(v["mc_mean"].as_f64().unwrap() > 0.0);
}

#[test]
fn missing_artifact_exits_with_three() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = init(tmp.path());
    let out = unforge()
        .args(["unlearn", "-c"])
        .arg(&cfg)
        .env("UNFORGE_OUTPUT", tmp.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unforge pretrain"));
}

#[test]
fn data_flags_override_the_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = init(tmp.path());
    let out = unforge()
        .args(["pretrain", "-c"])
        .arg(&cfg)
        .args(["--forget-mode", "random", "--forget-fraction", "0.2", "--seed", "9"])
        .env("UNFORGE_OUTPUT", tmp.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let written: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("runs/toy-1/config.json")).unwrap()).unwrap();
    assert_eq!(written["seed"], 9);
    assert_eq!(written["forget"]["fraction"], 0.2);
    let bad = unforge()
        .args(["pretrain", "-c"])
        .arg(&cfg)
        .args(["--forget-mode", "random", "--forget-fraction", "1.5"])
        .env("UNFORGE_OUTPUT", tmp.path())
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));
}
