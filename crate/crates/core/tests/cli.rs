use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ota_pfl::checkpoint::ModelSnapshot;
use ota_pfl::config::ExperimentConfig;

const BIN: &str = env!("CARGO_BIN_EXE_ota-pfl");

const LOGISTIC: &str = r#"
[model]
kind = "logistic"

[training]
clients = 6
rounds = 10
eta_g = 0.5

[data]
samples_per_client = 30
scheme = "dirichlet"
"#;

const QUADRATIC: &str = r#"
[model]
kind = "quadratic"
dim = 4

[training]
clients = 5
rounds = 60
lambda = 1.0
eta_l = 0.05
local_steps = 1
eta_g_fraction = 0.5

[run]
seed_count = 20
"#;

fn setup(text: &str) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.toml");
    std::fs::write(&path, text).unwrap();
    (dir, path)
}

fn run(cmd: &str, config: &Path, out: &Path, extra: &[&str]) -> Output {
    Command::new(BIN)
        .args([cmd, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap(), "--quiet"])
        .args(extra)
        .output()
        .unwrap()
}

fn body(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(str::to_string)
        .collect()
}

#[test]
fn train_writes_metrics_and_models() {
    let (dir, cfg) = setup(LOGISTIC);
    let out = dir.path().join("out");
    let res = run("train", &cfg, &out, &[]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    let rows = body(&out.join("metrics.csv"));
    assert_eq!(
        rows[0],
        "round,global_loss,mean_personal_loss,mean_personal_acc,generic_acc,w_dist_sq"
    );
    assert_eq!(rows.len(), 1 + 11);
    let snap = ModelSnapshot::load(&out.join("models.bin")).unwrap();
    assert_eq!(snap.personal.len(), 6);
    assert_eq!(snap.global.dim(), 10);
}

#[test]
fn header_echoes_every_setting() {
    let (dir, cfg) = setup(LOGISTIC);
    let out = dir.path().join("out");
    assert_eq!(run("train", &cfg, &out, &["--seed", "3"]).status.code(), Some(0));
    let text = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let header: Vec<&str> = text.lines().take_while(|l| l.starts_with('#')).collect();
    let mut parsed = ExperimentConfig::from_toml(LOGISTIC).unwrap();
    parsed.run.seed = 3;
    parsed.run.output_dir = out.clone();
    for line in parsed.echo() {
        assert!(header.contains(&format!("# {line}").as_str()), "missing {line}");
    }
    assert!(header.iter().any(|l| l.starts_with("# effective.eta_g = ")));
    assert!(header.contains(&"# seed = 3"));
}

#[test]
fn several_seeds_get_their_own_directories() {
    let (dir, cfg) = setup(&format!("{LOGISTIC}\n[run]\nseeds = [4, 9]\n"));
    let out = dir.path().join("out");
    assert_eq!(run("train", &cfg, &out, &[]).status.code(), Some(0));
    for s in [4, 9] {
        assert!(out.join(format!("seed-{s}/metrics.csv")).exists());
        assert!(out.join(format!("seed-{s}/models.bin")).exists());
    }
}

#[test]
fn worker_count_does_not_change_results() {
    let (dir, cfg) = setup(LOGISTIC);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(run("train", &cfg, &a, &["--workers", "1"]).status.code(), Some(0));
    assert_eq!(run("train", &cfg, &b, &["--workers", "4"]).status.code(), Some(0));
    assert_eq!(body(&a.join("metrics.csv")), body(&b.join("metrics.csv")));
    assert_eq!(
        std::fs::read(a.join("models.bin")).unwrap(),
        std::fs::read(b.join("models.bin")).unwrap()
    );
}

#[test]
fn step_size_above_maximum_is_rejected() {
    let text = QUADRATIC
        .replace("eta_g_fraction = 0.5", "eta_g_fraction = 1.5")
        .replace("seed_count = 20", "seed_count = 20\nbound_validation = true");
    let (dir, cfg) = setup(&text);
    let res = run("validate-bounds", &cfg, &dir.path().join("out"), &[]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("eta_g_max"));
}

#[test]
fn unknown_keys_and_missing_files_are_config_errors() {
    let (dir, cfg) = setup(&format!("{LOGISTIC}\n[run]\nsed = 1\n"));
    let res = run("train", &cfg, &dir.path().join("out"), &[]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("sed"));
    let res = run("train", &dir.path().join("absent.toml"), &dir.path().join("out"), &[]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn divergence_exits_with_code_3() {
    let text = QUADRATIC.replace("eta_g_fraction = 0.5", "eta_g_fraction = 8.0");
    let (dir, cfg) = setup(&text.replace("seed_count = 20", "seed_count = 1"));
    let out = dir.path().join("out");
    let res = run("train", &cfg, &out, &[]);
    assert_eq!(res.status.code(), Some(3));
    let rows = body(&out.join("metrics.csv"));
    assert!(rows.len() > 1 && rows.len() < 62);
}

#[test]
fn validate_bounds_passes_on_its_own_problem() {
    let (dir, cfg) = setup(QUADRATIC);
    let out = dir.path().join("out");
    let res = run("validate-bounds", &cfg, &out, &[]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stdout));
    let stdout = String::from_utf8_lossy(&res.stdout);
    assert!(stdout.lines().filter(|l| l.starts_with("PASS")).count() >= 4);
    assert!(out.join("bounds.csv").exists());
    assert!(out.join("rate.csv").exists());
    assert!(out.join("summary.txt").exists());
    assert!(body(&out.join("bounds.csv"))[0].contains("bound_t"));
}

#[test]
fn misreferenced_noise_violates_the_bound() {
    // Noise added to the aggregate directly is (P K)^2 larger than the
    // bound assumes.
    let text = format!("{QUADRATIC}\n[channel]\nkind = \"constant\"\nsigma2 = 1.0\nnoise_reference = \"aggregate\"\n");
    let (dir, cfg) = setup(&text);
    let res = run("validate-bounds", &cfg, &dir.path().join("out"), &[]);
    assert_eq!(res.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&res.stdout).contains("FAIL global error bound"));
}

#[test]
fn unwritable_output_is_an_io_error() {
    let (dir, cfg) = setup(LOGISTIC);
    let file = dir.path().join("plain");
    std::fs::write(&file, b"").unwrap();
    let res = run("train", &cfg, &file.join("out"), &[]);
    assert_eq!(res.status.code(), Some(5));
}

#[test]
fn sweep_writes_index_and_points() {
    let text = format!("{LOGISTIC}\n[sweep]\nlambda = [0.1, 1.0]\nnoisy_client_ratio = [0.0, 0.5]\n");
    let (dir, cfg) = setup(&text);
    let out = dir.path().join("out");
    let res = run("sweep", &cfg, &out, &[]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    let index = body(&out.join("index.csv"));
    assert_eq!(
        index[0],
        "point,lambda,clients,noisy_client_ratio,final_personal_acc,final_generic_acc,final_global_loss,diverged"
    );
    assert_eq!(index.len(), 5);
    for i in 0..4 {
        assert!(index[i + 1].starts_with(&format!("{i},")));
        assert!(index[i + 1].ends_with(",0"));
        let point = body(&out.join(format!("point-{i:04}.csv")));
        assert!(point[0].starts_with("seed,round,"));
        assert_eq!(point.len(), 1 + 11);
    }
}
