use std::path::{Path, PathBuf};
use std::process::Command;

use heatkernel::cli_runner::config::{CoefficientFamily, RandomFamily, SdeFamily, SUITES};
use heatkernel::cli_runner::report::{Check, PlotData};
use heatkernel::cli_runner::{run_suite, suite_criteria, ExperimentConfig};
use heatkernel::error::Error;
use proptest::prelude::*;

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("heatkernel-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn tag(text: &str) -> (String, String) {
    match ExperimentConfig::from_toml(text).unwrap_err() {
        Error::Config { tag, message } => (tag, message),
        other => panic!("expected a config error, got {other}"),
    }
}

const IDENTITY: &str = "suite = \"deterministic-kernel\"\n[coefficient]\nfamily = \"identity\"\n";

#[test]
fn shipped_config_is_the_default() {
    let cfg = ExperimentConfig::load(&workspace().join("configs/default.toml")).unwrap();
    let mut want = ExperimentConfig::default();
    want.run.out_dir = Some("out".into());
    assert_eq!(cfg, want);
    assert_eq!(ExperimentConfig::from_toml("").unwrap(), ExperimentConfig::default());
}

#[test]
fn partial_sections_take_defaults() {
    let cfg = ExperimentConfig::from_toml("[grid]\nn_u = 31\n[mild.fractional]\nn_r = 12\n").unwrap();
    assert_eq!(cfg.grid.n_u, 31);
    assert_eq!(cfg.grid.n_q, ExperimentConfig::default().grid.n_q);
    assert_eq!(cfg.mild.fractional.n_r, 12);
}

#[test]
fn malformed_configs_name_the_violated_condition() {
    let (t, m) = tag("[model]\nq = 5.0\n");
    assert_eq!(t, "D3");
    assert!(m.contains("(D3) p > q > 2d+4"), "{m}");
    assert_eq!(tag("[model]\nalpha = 0.5\n").0, "alpha");
    assert_eq!(tag("[model]\nlambda = 0.9\n").0, "H1");
    assert_eq!(tag("[model]\nk_a = 0.6\n").0, "H1");
    assert_eq!(tag("[model]\nk_a = -0.1\n").0, "H2");
    assert_eq!(tag("[model]\nnoise_decay = 0.5\n").0, "D1");
    assert_eq!(tag("suite = \"everything\"\n").0, "suite");
    assert_eq!(tag("[model]\nlamda = 2.0\n").0, "parse");
    assert_eq!(tag("[grid]\nn_u = 3\n").0, "grid");
    assert_eq!(tag("[malliavin]\nbump_time = 0.2505\n").0, "malliavin");
    // the identity family carries no spatial variation, so K_a is not tested against λ
    assert!(ExperimentConfig::from_toml("[model]\nk_a = 0.6\n[coefficient]\nfamily = \"identity\"\n").is_ok());
}

#[test]
fn hash_ignores_execution_settings() {
    let a = ExperimentConfig::default();
    let mut b = a.clone();
    b.run.workers = 3;
    b.run.out_dir = Some("elsewhere".into());
    assert_eq!(a.hash().unwrap(), b.hash().unwrap());
    b.seed += 1;
    assert_ne!(a.hash().unwrap(), b.hash().unwrap());
}

#[test]
fn every_suite_lists_the_gate_criterion() {
    for s in SUITES {
        assert_eq!(*suite_criteria(s).unwrap().last().unwrap(), 11);
    }
    assert_eq!(suite_criteria("full").unwrap(), (1..=11).collect::<Vec<u8>>());
}

#[test]
fn empty_plot_data_writes_headers() {
    let dir = scratch("empty");
    let files = PlotData::default().write(&dir).unwrap();
    let collapse = std::fs::read_to_string(&files[0]).unwrap();
    assert_eq!(collapse, "instance,order,scaled_distance,scaled_value,envelope\n");
    let agreement = std::fs::read_to_string(&files[2]).unwrap();
    assert_eq!(agreement, "instance,x,t,v_skorohod,v_fractional,combined_se\n");
    assert_eq!(files.len(), 4);
}

#[test]
fn checks_compare_in_the_stated_direction() {
    assert!(Check::at_most("a", 1.0, 1.0, "o").pass);
    assert!(!Check::at_most("a", f64::NAN, 1.0, "o").pass);
    assert!(!Check::at_least("a", 0.5, 1.0, "o").pass);
    assert!(Check::info("a", f64::NAN, "o").pass);
}

#[test]
fn identity_suite_passes_and_repeats_byte_for_byte() {
    let cfg = ExperimentConfig::from_toml(IDENTITY).unwrap();
    let a = run_suite(&cfg, |_, _| {}).unwrap();
    assert!(a.report.pass, "{}", a.report.to_json().unwrap());
    let b = run_suite(&cfg, |_, _| {}).unwrap();
    assert_eq!(a.report.to_json().unwrap(), b.report.to_json().unwrap());
    for c in &a.report.criteria[..1] {
        assert!(c.checks.iter().all(|k| k.value <= 1e-8), "{c:?}");
    }
}

fn binary() -> Command {
    Command::new(env!("CARGO_BIN_EXE_heatkernel"))
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("config.toml");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn exit_status_contract() {
    let dir = scratch("exit");
    let run = |text: &str, out: &str| {
        let cfg = write_config(&dir, text);
        binary()
            .args(["run", "--config"])
            .arg(&cfg)
            .args(["--suite", "deterministic-kernel", "--out"])
            .arg(dir.join(out))
            .env_remove("HEATKERNEL_OUT_DIR")
            .env_remove("HEATKERNEL_WORKERS")
            .output()
            .unwrap()
    };
    let ok = run(IDENTITY, "ok");
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));
    let stdout = String::from_utf8(ok.stdout).unwrap();
    assert_eq!(stdout.lines().filter(|l| l.starts_with("criterion")).count(), 5);
    for f in ["report.json", "collapse.csv", "k_ratios.csv", "agreement.csv", "decay.csv", "timing.json"] {
        assert!(dir.join("ok").join(f).exists(), "{f}");
    }
    let coarse = format!("{IDENTITY}[fdm]\nh = 0.3\ntau = 0.02\n");
    let failed = run(&coarse, "failed");
    assert_eq!(failed.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&failed.stderr).contains("criterion 2 failed"));
    assert_eq!(run("[model]\nq = 5.0\n", "bad").status.code(), Some(2));
    let stuck = run("[grid]\nm_max = 2\n", "stuck");
    assert_eq!(stuck.status.code(), Some(3), "{}", String::from_utf8_lossy(&stuck.stderr));
}

#[test]
fn out_dir_and_workers_come_from_the_environment() {
    let dir = scratch("env");
    let cfg = write_config(&dir, IDENTITY);
    let out = binary()
        .args(["run", "--config"])
        .arg(&cfg)
        .args(["--suite", "deterministic-kernel", "--seed", "7"])
        .env("HEATKERNEL_OUT_DIR", dir.join("from-env"))
        .env("HEATKERNEL_WORKERS", "1")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report = std::fs::read_to_string(dir.join("from-env/report.json")).unwrap();
    assert!(report.contains("\"seed\": 7"));
    // the suite itself is not overridable from the environment
    let bad = binary().args(["run", "--config"]).arg(&cfg).env("HEATKERNEL_SUITE", "full").output().unwrap();
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn validate_and_list_suites() {
    let dir = scratch("validate");
    let out = binary().args(["validate", "--config"]).arg(workspace().join("configs/default.toml")).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let printed = ExperimentConfig::from_toml(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert_eq!(printed.mild.n_paths, 1000);
    let bad = write_config(&dir, "[model]\nalpha = 0.9\n");
    let out = binary().args(["validate", "--config"]).arg(&bad).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("alpha"));
    let out = binary().arg("list-suites").output().unwrap();
    let text = String::from_utf8(out.stdout).unwrap();
    for s in SUITES {
        assert!(text.contains(s));
    }
}

fn arb_config() -> impl Strategy<Value = ExperimentConfig> {
    (
        1.5f64..4.0,
        0.0f64..0.3,
        0.5f64..2.0,
        any::<u64>(),
        prop_oneof![Just(CoefficientFamily::Identity), Just(CoefficientFamily::ModulatedTanh)],
        prop_oneof![Just(RandomFamily::Mixed), Just(RandomFamily::XIndependent)],
        prop_oneof![Just(SdeFamily::Generic), Just(SdeFamily::OrnsteinUhlenbeck)],
        proptest::option::of(0.67f64..0.85),
        prop::collection::vec(-3.0f64..3.0, 1..5),
    )
        .prop_map(|(lambda, k_a, horizon, seed, family, random, sde, alpha, points)| {
            let mut c = ExperimentConfig::default();
            c.model.lambda = lambda;
            c.model.k_a = k_a;
            c.model.horizon = horizon;
            c.model.alpha = alpha;
            c.seed = seed;
            c.coefficient.family = family;
            c.coefficient.random = random;
            c.coefficient.sde = sde;
            c.malliavin.bump_time = 0.25 * horizon;
            c.mild.points = points;
            c
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn config_round_trips(cfg in arb_config()) {
        prop_assume!(cfg.validate().is_ok());
        let text = cfg.to_toml().unwrap();
        prop_assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
    }
}
