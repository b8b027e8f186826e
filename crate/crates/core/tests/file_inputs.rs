use std::fs;

use cgstates::correlation::read_upper_triangles;
use cgstates::ingest::{save_price_table, save_sector_map};
use cgstates::pipeline::{run_pipeline, Manifest, RunConfig};
use cgstates::synth::{generate_prices, inject_gaps, RegimeSpec};

#[test]
fn run_from_csv_inputs_with_gaps() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_prices(&RegimeSpec::ladder(24, 4, 260, 0.0011, 3.0, 4)).unwrap();
    let gappy = inject_gaps(&data.prices, 0.01, 3, 4).unwrap();
    save_price_table(&gappy, dir.path().join("prices.csv")).unwrap();
    save_sector_map(&data.sectors, dir.path().join("sectors.csv")).unwrap();
    fs::write(
        dir.path().join("run.toml"),
        "prices = \"prices.csv\"\nsectors = \"sectors.csv\"\noutput_dir = \"out\"\nk = 3\nrestarts = 4\n\
         ensemble_count = 10\npartitions = [\"choice1\", \"choice2\"]\ndump_epochs = true\n",
    )
    .unwrap();
    let cfg = RunConfig::load(dir.path().join("run.toml")).unwrap();
    let run = run_pipeline(&cfg).unwrap();
    let out = dir.path().join("out");
    let m = Manifest::load(&out).unwrap();
    assert_eq!(m, run.manifest);
    assert_eq!(m.inputs.len(), 2);
    assert_eq!(m.stocks_loaded, 24);
    assert!(m.stocks_kept <= 24 && m.stocks_kept >= 2);
    assert_eq!(m.window.epochs, 260 - 20 + 1);
    assert!(m.verify(&out).is_empty());

    let bytes = fs::read(out.join("epochs.bin")).unwrap();
    let epochs = read_upper_triangles(&bytes[..]).unwrap();
    assert_eq!(epochs.len(), m.window.epochs);
    assert_eq!(epochs[0].dim(), m.stocks_kept);

    let stocks = fs::read_to_string(out.join("stocks.csv")).unwrap();
    assert_eq!(stocks.lines().count(), m.stocks_kept + 1);
    for line in stocks.lines().skip(1) {
        let gap: usize = line.rsplit(',').next().unwrap().parse().unwrap();
        assert!(gap <= 2);
    }

    fs::write(out.join("choice1/states.csv"), "tampered").unwrap();
    assert_eq!(m.verify(&out), vec!["choice1/states.csv".to_string()]);
}

#[test]
fn missing_sector_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_prices(&RegimeSpec::ladder(12, 2, 60, 0.0011, 3.0, 1)).unwrap();
    save_price_table(&data.prices, dir.path().join("prices.csv")).unwrap();
    fs::write(dir.path().join("sectors.csv"), "ticker,sector\nS00,FN\n").unwrap();
    let cfg = RunConfig {
        prices: Some(dir.path().join("prices.csv")),
        sectors: Some(dir.path().join("sectors.csv")),
        output_dir: dir.path().join("out"),
        ..RunConfig::default()
    };
    let err = run_pipeline(&cfg).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("ingest"));
}
