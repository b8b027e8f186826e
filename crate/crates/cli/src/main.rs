use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cgstates::coarse::PartitionKind;
use cgstates::correlation::WindowConvention;
use cgstates::figures::emit_figures;
use cgstates::ingest::{filter_stocks, load_price_table, load_sector_map, save_price_table, save_sector_map};
use cgstates::pipeline::{run_pipeline, Manifest, PartitionSummary, RunConfig};
use cgstates::synth::{generate_prices, inject_gaps, save_regimes, RegimeSpec};
use cgstates::{Error, Exec, Result};

#[derive(Parser)]
#[command(name = "cgstates", version, about = "Coarse-grained correlation market states")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
#[allow(clippy::large_enum_variant)]
enum Command {
    /// Load a price table, drop stocks with long quote gaps, write the
    /// cleaned price and sector tables.
    Ingest(IngestArgs),
    /// Generate a planted-regime synthetic panel.
    Synth(SynthArgs),
    /// Run the full pipeline from a config file and/or flags.
    Run(RunArgs),
    /// Render figures for a finished run directory.
    Figures { run_dir: PathBuf },
    /// Verify a run directory and print its summaries.
    Report { run_dir: PathBuf },
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    prices: PathBuf,
    #[arg(long)]
    sectors: PathBuf,
    #[arg(long, default_value_t = 2)]
    max_gap: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// TOML regime spec; replaces the ladder flags below.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 40)]
    stocks: usize,
    #[arg(long, default_value_t = 4)]
    sectors: usize,
    #[arg(long, default_value_t = 1500)]
    days: usize,
    /// Market beta of the calmest regime.
    #[arg(long, default_value_t = 0.0011)]
    base_beta: f64,
    /// Ratio between market betas of adjacent regimes.
    #[arg(long, default_value_t = 3.0)]
    ratio: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Probability that a quote gap starts on a given day.
    #[arg(long, default_value_t = 0.0)]
    gap_rate: f64,
    #[arg(long, default_value_t = 2)]
    max_run: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// TOML config; flags given on the command line override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    prices: Option<PathBuf>,
    #[arg(long)]
    sectors: Option<PathBuf>,
    /// TOML regime spec to generate input instead of reading files.
    #[arg(long)]
    synthetic_spec: Option<PathBuf>,
    #[arg(long)]
    max_gap: Option<usize>,
    #[arg(long)]
    epoch_days: Option<usize>,
    #[arg(long)]
    shift: Option<usize>,
    /// `price_days` or `return_days`.
    #[arg(long)]
    window_convention: Option<String>,
    /// Comma-separated subset of sectorial, choice1, choice2, random.
    #[arg(long, value_delimiter = ',')]
    partitions: Option<Vec<String>>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    restarts: Option<usize>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    standardize_features: bool,
    #[arg(long)]
    lag: Option<usize>,
    #[arg(long)]
    similarity_stride: Option<usize>,
    #[arg(long)]
    ensemble_count: Option<usize>,
    #[arg(long)]
    kmeans_seed: Option<u64>,
    #[arg(long)]
    partition_seed: Option<u64>,
    #[arg(long)]
    ensemble_seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Drop the default crash annotations.
    #[arg(long)]
    no_crash_dates: bool,
    #[arg(long)]
    dump_epochs: bool,
    /// `sequential` or `parallel`.
    #[arg(long)]
    execution: Option<String>,
    #[arg(long)]
    no_figures: bool,
}

fn read_spec(path: &Path) -> Result<RegimeSpec> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    toml::from_str(&text).map_err(|e| Error::Parse {
        source_name: path.display().to_string(),
        line: 0,
        message: e.message().to_string(),
    })
}

fn build_config(a: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(p) = &a.synthetic_spec {
        cfg.synthetic = Some(read_spec(p)?);
        cfg.prices = None;
        cfg.sectors = None;
    }
    if a.prices.is_some() || a.sectors.is_some() {
        cfg.synthetic = None;
    }
    if let Some(v) = &a.prices {
        cfg.prices = Some(v.clone());
    }
    if let Some(v) = &a.sectors {
        cfg.sectors = Some(v.clone());
    }
    macro_rules! set {
        ($($field:ident),*) => { $(if let Some(v) = a.$field { cfg.$field = v; })* };
    }
    set!(max_gap, epoch_days, shift, k, restarts, max_iter, lag, ensemble_count);
    if let Some(v) = a.similarity_stride {
        cfg.similarity_stride = Some(v);
    }
    if let Some(v) = &a.window_convention {
        cfg.window_convention = match v.as_str() {
            "price_days" => WindowConvention::PriceDays,
            "return_days" => WindowConvention::ReturnDays,
            other => return Err(Error::Validation(format!("unknown window convention `{other}`"))),
        };
    }
    if let Some(list) = &a.partitions {
        cfg.partitions = list
            .iter()
            .filter(|s| !s.trim().is_empty())
            .map(|s| s.parse::<PartitionKind>())
            .collect::<Result<_>>()?;
    }
    if a.standardize_features {
        cfg.standardize_features = true;
    }
    if let Some(v) = a.kmeans_seed {
        cfg.seeds.kmeans = v;
    }
    if let Some(v) = a.partition_seed {
        cfg.seeds.partition = v;
    }
    if let Some(v) = a.ensemble_seed {
        cfg.seeds.ensemble = v;
    }
    if let Some(v) = &a.output_dir {
        cfg.output_dir = v.clone();
    }
    if a.no_crash_dates {
        cfg.crash_dates.clear();
    }
    if a.dump_epochs {
        cfg.dump_epochs = true;
    }
    if let Some(v) = &a.execution {
        cfg.execution = match v.as_str() {
            "sequential" => Exec::Sequential,
            "parallel" => Exec::Parallel,
            other => return Err(Error::Validation(format!("unknown execution mode `{other}`"))),
        };
    }
    Ok(cfg)
}

fn ingest(a: &IngestArgs) -> Result<()> {
    let raw = load_price_table(&a.prices)?;
    let kept = filter_stocks(&raw, a.max_gap);
    let sectors = load_sector_map(&a.sectors, &kept)?;
    save_price_table(&kept, a.out.join("prices.csv"))?;
    save_sector_map(&sectors, a.out.join("sectors.csv"))?;
    println!(
        "kept {} of {} stocks over {} days (max gap {})",
        kept.n_tickers(),
        raw.n_tickers(),
        kept.n_days(),
        a.max_gap
    );
    Ok(())
}

fn synth(a: &SynthArgs) -> Result<()> {
    let spec = match &a.spec {
        Some(p) => read_spec(p)?,
        None => RegimeSpec::ladder(a.stocks, a.sectors, a.days, a.base_beta, a.ratio, a.seed),
    };
    let data = generate_prices(&spec)?;
    let prices = if a.gap_rate > 0.0 {
        inject_gaps(&data.prices, a.gap_rate, a.max_run, spec.seed)?
    } else {
        data.prices
    };
    save_price_table(&prices, a.out.join("prices.csv"))?;
    save_sector_map(&data.sectors, a.out.join("sectors.csv"))?;
    save_regimes(prices.days(), &data.regime_by_day, a.out.join("regimes.csv"))?;
    println!(
        "wrote {} stocks x {} days, {} regimes, to {}",
        prices.n_tickers(),
        prices.n_days(),
        spec.regimes.len(),
        a.out.display()
    );
    Ok(())
}

fn run(a: &RunArgs) -> Result<()> {
    let cfg = build_config(a)?;
    let outcome = run_pipeline(&cfg)?;
    let m = &outcome.manifest;
    println!(
        "{} stocks, {} epochs, {} partitions, {} files in {}",
        m.stocks_kept,
        m.window.epochs,
        m.partitions.len(),
        m.outputs.len(),
        cfg.output_dir.display()
    );
    if !a.no_figures {
        let index = emit_figures(&cfg.output_dir)?;
        println!("{} figure files", index.files.len());
    }
    Ok(())
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(", ")
}

fn report(run_dir: &Path) -> Result<()> {
    let m = Manifest::load(run_dir)?;
    let bad = m.verify(run_dir);
    println!("{} {} run: {}", m.tool, m.version, run_dir.display());
    println!(
        "stocks {}/{}; {} price days {}..{}; {} epochs of {} days, shift {}",
        m.stocks_kept,
        m.stocks_loaded,
        m.window.price_days,
        m.window.first_day,
        m.window.last_day,
        m.window.epochs,
        m.window.epoch_days,
        m.window.shift
    );
    if bad.is_empty() {
        println!("checksums: {} outputs verified", m.outputs.len());
    } else {
        println!("checksums: {} of {} outputs missing or changed", bad.len(), m.outputs.len());
        for p in &bad {
            println!("  {p}");
        }
    }
    for p in &m.partitions {
        let path = run_dir.join(p.kind.name()).join("summary.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
        let s: PartitionSummary = serde_json::from_str(&text).map_err(|e| Error::Parse {
            source_name: path.display().to_string(),
            line: e.line() as u64,
            message: e.to_string(),
        })?;
        println!();
        println!("[{}] blocks {:?} sizes {:?}", p.kind, p.labels, p.sizes);
        println!("  state c_bar:   {}", fmt_list(&s.state_avg_corr));
        println!("  state sigma:   {}", fmt_list(&s.state_sigma));
        println!("  occupation:    {:?}", s.occupation);
        if let Some(r) = s.pearson_avg_corr_lambda_max {
            println!("  pearson(avg_corr, lambda_max): {r:.4}");
        }
        match &s.equilibrium {
            Some(pi) => println!("  equilibrium:   {}", fmt_list(pi)),
            None => println!("  equilibrium:   unavailable ({})", s.equilibrium_note.as_deref().unwrap_or("")),
        }
        println!("  tridiagonal mass: {:.4}", s.tridiagonal_mass);
        if let Some(g) = s.markovianity_gap {
            println!("  chapman-kolmogorov gap: {g:.4}");
        }
        if let Some(gt) = &s.ground_truth {
            println!("  adjusted rand vs planted regimes: {:.4}", gt.adjusted_rand);
        }
    }
    let cmp = run_dir.join("comparison.csv");
    if let Ok(text) = fs::read_to_string(&cmp) {
        println!();
        print!("{text}");
    }
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::Validation(format!("{} outputs failed verification", bad.len())))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Ingest(a) => ingest(a),
        Command::Synth(a) => synth(a),
        Command::Run(a) => run(a),
        Command::Figures { run_dir } => emit_figures(run_dir).map(|i| println!("{} figure files", i.files.len())),
        Command::Report { run_dir } => report(run_dir),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
