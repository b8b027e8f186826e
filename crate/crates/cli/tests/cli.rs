use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cgstates(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cgstates"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn synth_ingest_run_figures_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = cgstates(&["synth", "--stocks", "20", "--days", "300", "--gap-rate", "0.002", "--out", p(&data)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["prices.csv", "sectors.csv", "regimes.csv"] {
        assert!(data.join(f).exists());
    }

    let clean = dir.path().join("clean");
    let out = cgstates(&[
        "ingest",
        "--prices",
        p(&data.join("prices.csv")),
        "--sectors",
        p(&data.join("sectors.csv")),
        "--out",
        p(&clean),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("kept "));

    let config = dir.path().join("run.toml");
    fs::write(&config, "k = 3\nrestarts = 4\nensemble_count = 10\noutput_dir = \"ignored\"\n").unwrap();
    let run_dir = dir.path().join("run");
    let out = cgstates(&[
        "run",
        "--config",
        p(&config),
        "--prices",
        p(&clean.join("prices.csv")),
        "--sectors",
        p(&clean.join("sectors.csv")),
        "--partitions",
        "sectorial,choice2",
        "--k",
        "4",
        "--output-dir",
        p(&run_dir),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = fs::read_to_string(run_dir.join("manifest.json")).unwrap();
    // Flags override the config file.
    assert!(manifest.contains("\"k\": 4"));
    assert!(manifest.contains("\"restarts\": 4"));
    assert!(run_dir.join("figures/choice2_scatter_xy.svg").exists());
    assert!(run_dir.join("figures/sectorial_states.csv").exists());
    assert!(!run_dir.join("random").exists());

    fs::remove_dir_all(run_dir.join("figures")).unwrap();
    let out = cgstates(&["figures", p(&run_dir)]);
    assert!(out.status.success());
    assert!(run_dir.join("figures/index.json").exists());

    let out = cgstates(&["report", p(&run_dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("outputs verified"));
    assert!(text.contains("[choice2]"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.csv");
    let out = cgstates(&["run", "--prices", p(&missing), "--sectors", p(&missing), "--output-dir", p(dir.path())]);
    assert_eq!(out.status.code(), Some(3));

    let spec = dir.path().join("spec.toml");
    fs::write(
        &spec,
        "n_stocks = 10\nn_sectors = 2\nday_count = 40\nseed = 1\n\n[[regimes]]\nduration_days = 40\n\
         market_beta = 0.01\nsector_beta = 0.0\nidiosyncratic_sigma = 0.01\n",
    )
    .unwrap();
    let out = cgstates(&["run", "--synthetic-spec", p(&spec), "--partitions", "", "--output-dir", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("partition"));

    let out = cgstates(&["run", "--synthetic-spec", p(&spec), "--k", "1", "--output-dir", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));

    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "date,A,B\n2020-01-02,1,2\n2020-01-03,x,2\n").unwrap();
    let out = cgstates(&["ingest", "--prices", p(&bad), "--sectors", p(&bad), "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains(":3:"));

    let out = cgstates(&["report", p(&dir.path().join("nowhere"))]);
    assert_eq!(out.status.code(), Some(3));
}
