use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

/// Tab-separated `user item rating timestamp` lines in the ML100k layout.
fn write_ratings(dir: &Path) -> PathBuf {
    let mut out = String::new();
    let mut state: u64 = 12345;
    for u in 1..=25u64 {
        for t in 0..18u64 {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let item = 1 + (u * 7 + t * 13) % 40;
            let rating = 1 + (state >> 33) % 5;
            out.push_str(&format!("{u}\t{item}\t{rating}\t{}\n", 1000 + t));
        }
    }
    let path = dir.join("u.data");
    std::fs::write(&path, out).unwrap();
    path
}

struct Lab {
    dir: TempDir,
}

impl Lab {
    fn new() -> Lab {
        let dir = tempfile::tempdir().unwrap();
        let data = write_ratings(dir.path());
        let config = format!(
            "# small run\ndataset.path = {}\nembedding.k = 6\nembedding.epochs = 5\nagent.actor_hidden = 16,8\n\
             agent.critic_hidden = 16,8\nagent.batch_size = 8\nagent.M = 12\nagent.T = 4\nagent.eps_decay_steps = 30\n\
             eval.online_sessions = 6\neval.linucb_alphas = 0.1,1\n",
            data.display()
        );
        std::fs::write(dir.path().join("lab.conf"), config).unwrap();
        Lab { dir }
    }

    fn run_env(&self, args: &[&str], env: &[(&str, &str)]) -> Output {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_drr-lab"));
        cmd.current_dir(self.dir.path()).arg("--config").arg("lab.conf").args(args);
        for (k, v) in env {
            cmd.env(k, v);
        }
        cmd.output().unwrap()
    }

    fn run(&self, args: &[&str]) -> Output {
        self.run_env(args, &[])
    }

    fn ok(&self, args: &[&str]) {
        let out = self.run(args);
        assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    }

    fn read(&self, rel: &str) -> String {
        std::fs::read_to_string(self.dir.path().join(rel)).unwrap()
    }

    fn prepare(&self) {
        self.ok(&["prepare-data"]);
        self.ok(&["pretrain-pmf"]);
    }
}

#[test]
fn exit_codes() {
    let lab = Lab::new();
    assert_eq!(lab.run(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(lab.run(&["train", "--set", "agent.gama=1"]).status.code(), Some(2));
    assert_eq!(lab.run(&["train", "--set", "agent.gamma"]).status.code(), Some(2));
    assert_eq!(lab.run(&["train", "--variant", "drr_x"]).status.code(), Some(2));
    assert_eq!(lab.run(&["train"]).status.code(), Some(3));
    assert_eq!(lab.run(&["prepare-data", "--input", "missing.data"]).status.code(), Some(3));
    let out = lab.run_env(&["show-config"], &[("DRR_LAB_THREADS", "zero")]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(lab.run(&["analyze-patterns"]).status.code(), Some(3));
    std::fs::write(lab.dir.path().join("bad.conf"), "agent.gamma = 0.9\nnot a pair\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_drr-lab"))
        .current_dir(lab.dir.path())
        .args(["--config", "bad.conf", "show-config"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn show_config_round_trips() {
    let lab = Lab::new();
    let out = lab.run(&["show-config", "--set", "agent.gamma=0.5"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("agent.gamma = 0.5\n"));
    assert!(text.contains("embedding.k = 6\n"));
    std::fs::write(lab.dir.path().join("dumped.conf"), &text).unwrap();
    let again = Command::new(env!("CARGO_BIN_EXE_drr-lab"))
        .current_dir(lab.dir.path())
        .args(["--config", "dumped.conf", "show-config"])
        .output()
        .unwrap();
    assert_eq!(String::from_utf8(again.stdout).unwrap(), text);
}

#[test]
fn pipeline_writes_reports_and_manifests() {
    let lab = Lab::new();
    lab.prepare();
    lab.ok(&["train", "--variant", "drr_u", "--T", "4"]);
    lab.ok(&["eval-offline", "--variant", "drr_u", "--T", "4", "--baselines"]);
    lab.ok(&["eval-online", "--variant", "drr_u", "--T", "4"]);
    lab.ok(&["eval-online", "--policy", "linucb", "--T", "4"]);
    lab.ok(&["analyze-patterns", "--max-run", "3"]);

    let csv = lab.read("runs/reports/offline-drr_u-T4-seed0.csv");
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("metric,k,value,seed,variant,dataset"));
    for variant in ["drr_u", "popularity", "pmf"] {
        let tail = format!(",0,{variant},ml100k");
        for prefix in ["precision,5,", "precision,10,", "ndcg,5,", "ndcg,10,", "cumulative_reward,,"] {
            assert!(csv.lines().any(|l| l.starts_with(prefix) && l.ends_with(&tail)), "{prefix} row for {variant}");
        }
    }
    let log = lab.read("runs/reports/train-drr_u-T4-seed0.csv");
    assert_eq!(log.lines().next(), Some("episode,step,item,reward,critic_loss"));
    assert_eq!(log.lines().count(), 1 + 12 * 4);
    let patterns = lab.read("runs/reports/patterns.csv");
    assert_eq!(patterns.lines().next(), Some("run_length,polarity,mean_rating,count"));

    let manifest: serde_json::Value =
        serde_json::from_str(&lab.read("runs/checkpoints/drr_u-T4-seed0.ckpt.manifest.json")).unwrap();
    let args: Vec<&str> = manifest["args"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    assert_eq!(args, ["--config", "lab.conf", "train", "--variant", "drr_u", "--T", "4"]);
    assert_eq!(manifest["config"]["agent.variant"], "drr_u");
    assert_eq!(manifest["config"]["agent.T"], "4");
    assert_eq!(manifest["seed"], 0);
    assert!(manifest["wall_time_seconds"].as_f64().unwrap() >= 0.0);
    assert_eq!(manifest["config_digest"].as_str().unwrap().len(), 64);

    let online: serde_json::Value =
        serde_json::from_str(&lab.read("runs/reports/online-drr_u-T4-seed0.csv.manifest.json")).unwrap();
    assert_eq!(online["results"]["session_resets_verified"], true);
    let bandit = lab.read("runs/reports/online-linucb-T4-seed0.csv");
    assert!(bandit.lines().any(|l| l.starts_with("cumulative_reward,,") && l.contains(",linucb,")));
}

#[test]
fn digest_mismatch_needs_force() {
    let lab = Lab::new();
    lab.prepare();
    // embeddings were fitted with 5 epochs
    let out = lab.run(&["train", "--set", "embedding.epochs=6"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--force"));
    lab.ok(&["train", "--set", "embedding.epochs=6", "--force"]);
    // the checkpoint belongs to a different agent configuration
    lab.ok(&["train"]);
    assert_eq!(lab.run(&["eval-offline", "--set", "agent.gamma=0.5"]).status.code(), Some(3));
}

#[test]
fn repeated_runs_are_bitwise_identical() {
    let lab = Lab::new();
    lab.prepare();
    let files = [
        "runs/data/canonical.csv",
        "runs/data/split-seed0.train.csv",
        "runs/embeddings/pmf-seed0.bin",
        "runs/checkpoints/drr_ave-T4-seed0.ckpt",
        "runs/reports/train-drr_ave-T4-seed0.csv",
        "runs/reports/offline-drr_ave-T4-seed0.csv",
        "runs/reports/online-drr_ave-T4-seed0.csv",
        "runs/reports/online-linucb-T4-seed0.csv",
    ];
    let all = |lab: &Lab| {
        lab.prepare();
        lab.ok(&["train"]);
        lab.ok(&["eval-offline", "--baselines"]);
        lab.ok(&["eval-online"]);
        lab.ok(&["eval-online", "--policy", "linucb"]);
        files.map(|f| std::fs::read(lab.dir.path().join(f)).unwrap())
    };
    let first = all(&lab);
    let second = all(&lab);
    for (name, (a, b)) in files.iter().zip(first.iter().zip(&second)) {
        assert!(a == b, "{name} differs between runs");
    }
    let out = lab.run_env(&["eval-offline", "--baselines"], &[("DRR_LAB_THREADS", "3")]);
    assert!(out.status.success());
    assert_eq!(std::fs::read(lab.dir.path().join(files[5])).unwrap(), first[5]);
}

#[test]
fn sweep_writes_a_tidy_table() {
    let lab = Lab::new();
    lab.prepare();
    lab.ok(&["sweep-T", "--T-list", "2,4", "--seeds", "0", "--set", "agent.M=4"]);
    let csv = lab.read("runs/reports/sweep-T-drr_ave.csv");
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "T,seed,metric,k,value");
    assert_eq!(rows.len(), 1 + 2 * 2 * 2);
    let manifest: serde_json::Value =
        serde_json::from_str(&lab.read("runs/reports/sweep-T-drr_ave.csv.manifest.json")).unwrap();
    assert!(manifest["results"]["best_T_is_10"].is_boolean());
    assert_eq!(lab.run(&["sweep-T", "--seeds", "4"]).status.code(), Some(3));
}
