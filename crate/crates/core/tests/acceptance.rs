//! The eleven acceptance criteria on the shipped configuration.
//!
//! Lines go straight to the stderr handle so they show without `--nocapture`.

use std::io::Write;
use std::path::Path;

use heatkernel::cli_runner::{emit, run_suite, ExperimentConfig, CRITERIA};

fn shipped() -> ExperimentConfig {
    ExperimentConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml")).unwrap()
}

fn say(line: &str) {
    let mut err = std::io::stderr().lock();
    writeln!(err, "{line}").unwrap();
}

#[test]
fn acceptance_criteria() {
    let cfg = shipped();
    assert_eq!(cfg.suite, "full");
    let out = run_suite(&cfg, |r, secs| say(&format!("[acceptance] {} [{secs:.0} s]", r.summary_line()))).unwrap();
    let ids: Vec<u8> = out.report.criteria.iter().map(|c| c.id).collect();
    assert_eq!(ids, CRITERIA.iter().map(|c| c.0).collect::<Vec<_>>());
    let failing: Vec<String> = out.report.failing().iter().map(|c| c.summary_line()).collect();
    assert!(failing.is_empty(), "{}", failing.join("\n"));
    let dir = std::env::temp_dir().join(format!("heatkernel-acceptance-{}", std::process::id()));
    let files = emit(&out.report, &out.plots, &dir).unwrap();
    assert!(files.iter().all(|f| f.exists()));
    assert!(!out.plots.collapse.is_empty() && !out.plots.k_ratios.is_empty());
    assert!(!out.plots.agreement.is_empty() && !out.plots.decay.is_empty());
}

/// Criterion 11, second half: identical config and seed give identical bytes.
#[test]
fn reports_are_byte_identical() {
    let mut cfg = shipped();
    cfg.suite = "mild-solution".into();
    cfg.mild.n_paths = 40;
    cfg.mild.weak_paths = 20;
    cfg.mild.decay_paths = 20;
    let run = |workers: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build().unwrap();
        pool.install(|| {
            let out = run_suite(&cfg, |_, _| {}).unwrap();
            let dir = std::env::temp_dir().join(format!("heatkernel-determinism-{}-{workers}", std::process::id()));
            emit(&out.report, &out.plots, &dir).unwrap();
            ["report.json", "agreement.csv", "decay.csv"].map(|f| std::fs::read(dir.join(f)).unwrap())
        })
    };
    let (a, b, c) = (run(1), run(1), run(3));
    let same = a == b && a == c;
    say(&format!("[acceptance] criterion 11 {}  byte-identical reports for identical config and seed", if same { "PASS" } else { "FAIL" }));
    assert!(same);
    cfg.seed += 1;
    let other = run_suite(&cfg, |_, _| {}).unwrap().report.to_json().unwrap();
    assert_ne!(other.as_bytes(), &a[0][..]);
}
