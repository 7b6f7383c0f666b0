use qcpo::cmdp::EnvConfig;
use qcpo::trainer::{Trainer, TrainerConfig};
use std::path::Path;
use std::process::{Command, Output};

fn qcpo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qcpo"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_config(dir: &Path) -> std::path::PathBuf {
    let text = format!(
        r#"
[env]
env_id = "two_path"

[trainer]
seed = 4
eps0 = 0.1
batch_steps = 110
subtraj_len = 11
epochs_per_batch = 2
hidden = [8]
n_q = 9
tail_k = 3
max_env_steps = 440

[output]
dir = "{}"
log_every = 0
"#,
        dir.join("out").display()
    );
    let p = dir.join("run.toml");
    std::fs::write(&p, text).unwrap();
    p
}

/// A checkpoint whose policy picks path 2 with probability one to machine precision.
fn path2_checkpoint(dir: &Path) -> std::path::PathBuf {
    let mut t = Trainer::new(
        EnvConfig::two_path(),
        TrainerConfig {
            hidden: vec![4],
            ..TrainerConfig::default()
        },
    )
    .unwrap();
    let w = t.policy.store.find("pi.w1").unwrap();
    t.policy.store.slice_mut(w).fill(0.0);
    let b = t.policy.store.find("pi.b1").unwrap();
    t.policy.store.slice_mut(b).copy_from_slice(&[-50.0, 50.0]);
    let p = dir.join("path2.json");
    t.checkpoint().save(&p).unwrap();
    p
}

#[test]
fn missing_config_exits_with_code_two() {
    let o = qcpo(&["train", "/no/such/dir/run.toml"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/no/such/dir/run.toml"), "{}", stderr(&o));
}

#[test]
fn bad_config_reports_the_field() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path().join("bad.toml");
    std::fs::write(&p, "[env]\nenv_id = \"two_path\"\n[trainer]\nepsilon = 0.1\n").unwrap();
    let o = qcpo(&["train", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let e = stderr(&o);
    assert!(e.contains("epsilon") && e.contains("line"), "{e}");
}

#[test]
fn train_writes_metrics_checkpoint_and_resolved_config() {
    let d = tempfile::tempdir().unwrap();
    let cfg = small_config(d.path());
    let o = qcpo(&["train", cfg.to_str().unwrap(), "--set", "trainer.eps0=0.2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = d.path().join("out");

    let resolved = std::fs::read_to_string(out.join("resolved_config.toml")).unwrap();
    assert!(resolved.contains("eps0 = 0.2"), "{resolved}");

    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "iter,env_steps,avg_return_100ep,outage_prob_100ep,avg_cost_sum_100ep,lambda,emp_quantile,policy_loss,quantile_loss,value_loss,tail_loss,mean_kl,qx_rate"
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 4);
    for (i, row) in rows.iter().enumerate() {
        let fields: Vec<f64> = row.split(',').map(|f| f.parse().unwrap()).collect();
        assert_eq!(fields.len(), 13);
        assert_eq!(fields[0], i as f64);
        assert!(fields.iter().all(|v| v.is_finite()), "{row}");
    }

    let ck = qcpo::checkpoint::Checkpoint::load(&out.join("checkpoint.json")).unwrap();
    assert_eq!(ck.iteration, 4);
    assert_eq!(ck.trainer.eps0, 0.2);
}

#[test]
fn eval_of_a_path_two_policy() {
    let d = tempfile::tempdir().unwrap();
    let ck = path2_checkpoint(d.path());
    let ck = ck.to_str().unwrap();
    let run = || {
        let o = qcpo(&["eval", ck, "--episodes", "50", "--d-th", "10", "--seed", "9"]);
        assert!(o.status.success(), "{}", stderr(&o));
        o.stdout
    };
    let first = run();
    let v: serde_json::Value = serde_json::from_slice(&first).unwrap();
    assert_eq!(v["outage"], 0.0);
    assert!((v["avg_cost"].as_f64().unwrap() - 9.0).abs() < 1e-9);
    assert_eq!(v["gamma"], 1.0);
    assert_eq!(v["episode_costs"].as_array().unwrap().len(), 50);
    assert_eq!(first, run());

    let o = qcpo(&["eval", ck, "--discounted", "--episodes", "5"]);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["gamma"], 0.99);
}

#[test]
fn eval_rejects_zero_episodes_and_env_mismatch() {
    let d = tempfile::tempdir().unwrap();
    let ck = path2_checkpoint(d.path());
    let ck = ck.to_str().unwrap();
    let o = qcpo(&["eval", ck, "--episodes", "0"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("at least one episode"), "{}", stderr(&o));
    let o = qcpo(&["eval", ck, "--env", "hazard-grid"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("HazardGrid"), "{}", stderr(&o));
}

#[test]
fn verify_filters_and_catches_the_fault() {
    let o = qcpo(&["verify", "--only", "pinball"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = String::from_utf8(o.stdout).unwrap();
    assert_eq!(table.lines().count(), 1);
    assert!(table.starts_with("PASS") && table.contains("pinball"), "{table}");

    let o = qcpo(&["verify", "--only", "td_identity", "--fault", "flip-mu-sign"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8(o.stdout).unwrap().starts_with("FAIL"));

    let o = qcpo(&["verify", "--only", "nonsense"]);
    assert!(!o.status.success());
}

#[test]
fn full_verify_passes() {
    let o = qcpo(&["verify"]);
    let table = String::from_utf8(o.stdout).unwrap();
    assert!(o.status.success(), "{table}");
    assert_eq!(table.lines().count(), 5);
}
