use std::process::{Command, Output};

fn doctor(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_doctor"))
        .args(args)
        .output()
        .expect("binary runs")
}

#[test]
fn no_arguments_prints_usage() {
    let out = doctor(&[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn unknown_command_is_a_usage_error() {
    let out = doctor(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn invalid_config_value_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = doctor(&["train", "--lr", "-1", "--data", "x", "--out", dir.path().join("m.json").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gradcheck_passes() {
    let out = doctor(&["gradcheck", "--seed", "7"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(out.status.code(), Some(0), "{text}");
    assert!(text.lines().any(|l| l.starts_with("loss_final ")));
    for line in text.lines() {
        let err: f64 = line.split_whitespace().nth(1).unwrap().parse().unwrap();
        assert!(err <= 1e-4, "{line}");
    }
}

#[test]
fn generate_then_lodo_gives_one_row_per_domain() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.jsonl");
    let data = data.to_str().unwrap();
    let out = doctor(&["gen-data", "--domains", "9", "--per-domain", "200", "--out", data]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let out = doctor(&["lodo", "--data", data, "--epochs", "1", "--baseline"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = String::from_utf8(out.stdout).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("target_domain,accuracy,f1,precision,recall,auc"));
    assert_eq!(lines.count(), 9);
}

#[test]
fn train_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    let data = p("d.jsonl");
    assert_eq!(doctor(&["gen-data", "--domains", "2", "--per-domain", "6", "--seed", "3", "--out", &data]).status.code(), Some(0));
    let run = |ck: &str| {
        let out = doctor(&["train", "--data", &data, "--epochs", "2", "--lr", "0.01", "--seed", "3", "--out", ck]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        (out.stdout, std::fs::read(ck).unwrap())
    };
    let (log_a, ck_a) = run(&p("a.json"));
    let (log_b, ck_b) = run(&p("b.json"));
    assert_eq!(log_a, log_b);
    assert_eq!(ck_a, ck_b);
    assert_eq!(String::from_utf8(log_a).unwrap().lines().count(), 2);

    let emb = |out: &str| {
        let o = doctor(&["dump-embeddings", "--data", &data, "--model", &p("a.json"), "--out", out]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        std::fs::read(out).unwrap()
    };
    let e1 = emb(&p("e1.csv"));
    assert_eq!(e1, emb(&p("e2.csv")));
    let text = String::from_utf8(e1).unwrap();
    assert!(text.starts_with("index,domain,label,emo_0"));
    assert_eq!(text.lines().count(), 13);
}
