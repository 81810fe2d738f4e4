use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const BASE: &str = r#"
[run]
n_clients = 3
rounds = 6
alpha = 0.005
beta1 = 0.9
epsilon = 0.1
g_inf_clip = 1.0

[schedule]
kind = "fixed"
k = 4

[objective]
kind = "quadratic"
dim = 5
sigma = 0.5
"#;

struct Sandbox {
    dir: TempDir,
}

impl Sandbox {
    fn new() -> Self {
        Self {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn config(&self, name: &str, body: &str) -> PathBuf {
        let path = self.dir.path().join(name);
        std::fs::write(&path, body).unwrap();
        path
    }

    fn out(&self) -> PathBuf {
        self.dir.path().join("out")
    }

    fn fedlalr(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_fedlalr"))
            .args(args)
            .env("FEDLALR_OUTPUT_DIR", self.out())
            .output()
            .unwrap()
    }
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn read_csv(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(String::from)
        .collect()
}

#[test]
fn run_writes_header_and_one_row_per_round() {
    let sb = Sandbox::new();
    let cfg = sb.config("base.toml", BASE);
    let o = sb.fedlalr(&["run", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let lines = read_csv(&sb.out().join("base_seed0.csv"));
    assert_eq!(
        lines[0],
        "round,iters,K_t,loss,grad_norm_sq,avg_grad_norm_sq,comm_vectors,eta_min,eta_max,seed"
    );
    assert_eq!(lines.len(), 1 + 7);
    let last: Vec<&str> = lines[7].split(',').collect();
    assert_eq!(
        (last[0], last[1], last[2], last[6], last[9]),
        ("6", "24", "4", "9", "0")
    );
}

#[test]
fn overrides_and_aliases_apply() {
    let sb = Sandbox::new();
    let cfg = sb.config("base.toml", BASE);
    let o = sb.fedlalr(&[
        "run",
        cfg.to_str().unwrap(),
        "--set",
        "T=2",
        "--set",
        "seed=11",
        "--set",
        "K=1",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let lines = read_csv(&sb.out().join("base_seed11.csv"));
    assert_eq!(lines.len(), 1 + 3);
    assert!(lines[3].starts_with("2,2,1,"), "{}", lines[3]);
}

#[test]
fn unknown_and_missing_keys_exit_two_and_name_the_key() {
    let sb = Sandbox::new();
    let cfg = sb.config(
        "typo.toml",
        &BASE.replace("alpha = 0.005", "alpha = 0.005\nalpah = 1"),
    );
    let o = sb.fedlalr(&["run", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("alpah"), "{}", stderr(&o));

    let cfg = sb.config("missing.toml", &BASE.replace("rounds = 6\n", ""));
    let o = sb.fedlalr(&["run", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("rounds"), "{}", stderr(&o));
}

#[test]
fn out_of_range_values_exit_two() {
    let sb = Sandbox::new();
    for (from, to) in [
        ("beta1 = 0.9", "beta1 = 1.0"),
        ("k = 4", "k = 0"),
        ("epsilon = 0.1", "epsilon = -1.0"),
    ] {
        let cfg = sb.config("bad.toml", &BASE.replace(from, to));
        let o = sb.fedlalr(&["run", cfg.to_str().unwrap()]);
        assert_eq!(code(&o), 2, "{to}: {}", stderr(&o));
    }
}

#[test]
fn missing_config_file_exits_two() {
    let sb = Sandbox::new();
    let o = sb.fedlalr(&["run", sb.dir.path().join("nope.toml").to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn theory_rate_cap_is_enforced_on_request() {
    let sb = Sandbox::new();
    let body = format!(
        "enforce_theory_lr = true\n{}",
        BASE.replace("alpha = 0.005", "alpha = 0.5")
    );
    let cfg = sb.config("cap.toml", &body);
    let o = sb.fedlalr(&["run", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("3*epsilon/(20L)"), "{}", stderr(&o));
    assert!(!sb.out().join("cap_seed0.csv").exists());
}

#[test]
fn check_passes_clean_run_and_fails_injected_fault() {
    let sb = Sandbox::new();
    let cfg = sb.config("check.toml", BASE);
    let o = sb.fedlalr(&["check", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("PASS z-identity"), "{out}");
    assert!(!out.contains("FAIL"), "{out}");

    let o = sb.fedlalr(&[
        "check",
        cfg.to_str().unwrap(),
        "--set",
        "check.inject_vhat_fault=true",
    ]);
    assert_eq!(code(&o), 1, "{}", stdout(&o));
    assert!(
        stdout(&o).contains("FAIL client v_hat nondecreasing"),
        "{}",
        stdout(&o)
    );
}

#[test]
fn check_skips_identity_for_max_aggregation() {
    let sb = Sandbox::new();
    let cfg = sb.config("check.toml", BASE);
    let o = sb.fedlalr(&[
        "check",
        cfg.to_str().unwrap(),
        "--set",
        "run.vhat_aggregation=max",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("SKIP z-identity"));
}

#[test]
fn sweep_writes_per_value_files_and_summary() {
    let sb = Sandbox::new();
    let cfg = sb.config("sw.toml", &format!("seeds = [0, 1]\n{BASE}"));
    let o = sb.fedlalr(&["sweep", cfg.to_str().unwrap(), "--vary", "N=2,4"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for n in [2, 4] {
        for s in [0, 1] {
            assert!(sb.out().join(format!("sw_N{n}_seed{s}.csv")).exists());
        }
    }
    let summary = read_csv(&sb.out().join("sw_summary.csv"));
    assert_eq!(summary.len(), 3);
    assert!(summary[1].starts_with("run.n_clients,2,2,"), "{}", summary[1]);
}

#[test]
fn empty_vary_list_is_a_usage_error() {
    let sb = Sandbox::new();
    let cfg = sb.config("sw.toml", BASE);
    let o = sb.fedlalr(&["sweep", cfg.to_str().unwrap(), "--vary", "N="]);
    assert_eq!(code(&o), 2);
}

#[test]
fn baseline_algorithms_run() {
    let sb = Sandbox::new();
    for alg in ["fedavg", "fedadam"] {
        let cfg = sb.config(&format!("{alg}.toml"), &format!("algorithm = \"{alg}\"\n{BASE}"));
        let o = sb.fedlalr(&["run", cfg.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{alg}: {}", stderr(&o));
        assert_eq!(read_csv(&sb.out().join(format!("{alg}_seed0.csv"))).len(), 8);
    }
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let sb = Sandbox::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let o = sb.fedlalr(&[
                "run",
                path.to_str().unwrap(),
                "--set",
                "T=1",
                "--set",
                "seeds=[0]",
            ]);
            assert_eq!(code(&o), 0, "{}: {}", path.display(), stderr(&o));
        }
    }
}
