//! Configuration-driven end-to-end run: ingest, returns, rolling
//! correlations, block averaging per partition, spectral summaries, market
//! states, dynamics and the output tree with its manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::coarse::{
    block_average, ecg_partition_with, ensemble_elements, load_partition_file, random_partition_ensemble_with,
    sectorial_partition, CgMatrix, EcgMembership, Partition, PartitionKind,
};
use crate::correlation::{map_epochs, pearson_matrix, write_upper_triangles, EpochWindows, WindowConvention};
use crate::dynamics::{
    equilibrium, forbidden_transition_check, markovianity_gap, transition_matrix, tridiagonal_mass,
    ForbiddenTransitionReport, TransMatrix,
};
use crate::error::StageContext;
use crate::ingest::{filter_stocks, load_price_table, load_sector_map, PriceTable, SectorMap};
use crate::returns::{log_returns, ReturnsTable};
use crate::spectral::{pearson, spectral_series, SpectralSeries};
use crate::states::{
    compare_labelings, default_stride, feature_matrix, kmeans, order_states, similarity_matrix_with,
    state_mean_matrices, vectorize, Agreement, KMeansConfig, StateSequence,
};
use crate::synth::{epoch_regimes, generate_prices, write_regimes, RegimeSpec};
use crate::util::{sha256_hex, write_atomic};
use crate::{Error, Exec, Result, SquareMatrix};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrashDate {
    pub date: NaiveDate,
    pub name: String,
}

/// The eight crash annotations used by default.
pub fn default_crash_dates() -> Vec<CrashDate> {
    [
        ((2007, 10, 11), "United States bear market"),
        ((2008, 9, 16), "Financial crisis of 2007-2008"),
        ((2010, 5, 6), "2010 flash crash"),
        ((2011, 8, 1), "August 2011 stock markets fall"),
        ((2015, 8, 18), "2015-2016 stock market selloff"),
        ((2018, 9, 20), "Cryptocurrency crash"),
        ((2020, 2, 24), "COVID19 crash"),
        ((2022, 1, 3), "2022 stock market decline"),
    ]
    .into_iter()
    .map(|((y, m, d), name)| CrashDate {
        date: NaiveDate::from_ymd_opt(y, m, d).expect("valid date"),
        name: name.to_string(),
    })
    .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub kmeans: u64,
    pub partition: u64,
    pub ensemble: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            kmeans: 20_060_103,
            partition: 20_230_810,
            ensemble: 4_411,
        }
    }
}

/// Optional `ticker,block` files replacing the built-in two-block
/// partitions.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionFiles {
    pub choice1: Option<PathBuf>,
    pub choice2: Option<PathBuf>,
    pub random: Option<PathBuf>,
}

impl PartitionFiles {
    fn get(&self, kind: PartitionKind) -> Option<&PathBuf> {
        match kind {
            PartitionKind::Sectorial => None,
            PartitionKind::Choice1 => self.choice1.as_ref(),
            PartitionKind::Choice2 => self.choice2.as_ref(),
            PartitionKind::Random => self.random.as_ref(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub prices: Option<PathBuf>,
    pub sectors: Option<PathBuf>,
    pub synthetic: Option<RegimeSpec>,
    /// Longest tolerated run of unquoted days per stock.
    pub max_gap: usize,
    pub epoch_days: usize,
    pub shift: usize,
    pub window_convention: WindowConvention,
    pub partitions: Vec<PartitionKind>,
    pub membership: EcgMembership,
    pub partition_files: PartitionFiles,
    pub k: usize,
    pub restarts: usize,
    pub max_iter: usize,
    pub standardize_features: bool,
    pub lag: usize,
    /// Epoch stride of the similarity matrix; defaults to at most 500 rows.
    pub similarity_stride: Option<usize>,
    /// Random equal splits summarized on the full-horizon matrix; 0 skips.
    pub ensemble_count: usize,
    pub seeds: Seeds,
    pub output_dir: PathBuf,
    pub crash_dates: Vec<CrashDate>,
    /// Also write every epoch's upper triangle to `epochs.bin`.
    pub dump_epochs: bool,
    pub execution: Exec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            prices: None,
            sectors: None,
            synthetic: None,
            max_gap: 2,
            epoch_days: 20,
            shift: 1,
            window_convention: WindowConvention::default(),
            partitions: PartitionKind::ALL.to_vec(),
            membership: EcgMembership::default(),
            partition_files: PartitionFiles::default(),
            k: 5,
            restarts: 100,
            max_iter: 300,
            standardize_features: false,
            lag: 1,
            similarity_stride: None,
            ensemble_count: 1000,
            seeds: Seeds::default(),
            output_dir: PathBuf::from("cgstates-out"),
            crash_dates: default_crash_dates(),
            dump_epochs: false,
            execution: Exec::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse {
            source_name: "<config>".into(),
            line: 0,
            message: e.to_string(),
        })
    }

    /// Reads a TOML config. Relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self = toml::from_str(&text).map_err(|e| Error::Parse {
            source_name: path.display().to_string(),
            line: e
                .span()
                .map(|s| text[..s.start.min(text.len())].lines().count().max(1) as u64)
                .unwrap_or(0),
            message: e.message().to_string(),
        })?;
        if let Some(base) = path.parent() {
            let fix = |p: &mut PathBuf| {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            };
            cfg.prices.as_mut().map(fix);
            cfg.sectors.as_mut().map(fix);
            cfg.partition_files.choice1.as_mut().map(fix);
            cfg.partition_files.choice2.as_mut().map(fix);
            cfg.partition_files.random.as_mut().map(fix);
            fix(&mut cfg.output_dir);
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.partitions.is_empty() {
            return Err(Error::validation("at least one partition kind must be selected"));
        }
        if self.epoch_days < 2 {
            return Err(Error::validation(format!("epoch_days must be at least 2, got {}", self.epoch_days)));
        }
        if self.shift == 0 {
            return Err(Error::validation("shift must be at least 1"));
        }
        if !(2..=12).contains(&self.k) {
            return Err(Error::validation(format!("k must be between 2 and 12, got {}", self.k)));
        }
        if self.restarts == 0 || self.max_iter == 0 {
            return Err(Error::validation("restarts and max_iter must be at least 1"));
        }
        if self.lag == 0 {
            return Err(Error::validation("lag must be at least 1"));
        }
        if self.similarity_stride == Some(0) {
            return Err(Error::validation("similarity_stride must be at least 1"));
        }
        match (&self.synthetic, &self.prices, &self.sectors) {
            (Some(spec), None, None) => spec.validate(),
            (None, Some(_), Some(_)) => Ok(()),
            (None, Some(_), None) => Err(Error::validation("a sector file is required with a price file")),
            (Some(_), _, _) => Err(Error::validation("give either a synthetic spec or input files, not both")),
            (None, None, _) => Err(Error::validation("no input: set prices and sectors, or synthetic")),
        }
    }

    pub fn windows(&self) -> EpochWindows {
        EpochWindows::new(self.epoch_days, self.shift, self.window_convention)
    }

    /// Selected partition kinds, deduplicated, in canonical order.
    pub fn partition_kinds(&self) -> Vec<PartitionKind> {
        PartitionKind::ALL
            .into_iter()
            .filter(|k| self.partitions.contains(k))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDigest {
    pub role: String,
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSummary {
    pub convention: WindowConvention,
    pub epoch_days: usize,
    pub shift: usize,
    pub returns_per_epoch: usize,
    pub price_days: usize,
    pub return_days: usize,
    pub epochs: usize,
    pub first_day: NaiveDate,
    pub last_day: NaiveDate,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionEntry {
    pub kind: PartitionKind,
    pub labels: Vec<String>,
    pub sizes: Vec<usize>,
}

/// Everything needed to reproduce a run and verify its outputs. Contains no
/// timestamps or absolute output locations, so equal configs give equal
/// manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    /// The run configuration without `output_dir`.
    pub config: serde_json::Value,
    pub seeds: Seeds,
    pub inputs: Vec<InputDigest>,
    pub stocks_loaded: usize,
    pub stocks_kept: usize,
    pub window: WindowSummary,
    pub partitions: Vec<PartitionEntry>,
    pub kurtosis: String,
    /// Sorted by path.
    pub outputs: Vec<OutputEntry>,
}

impl Manifest {
    pub fn load(run_dir: impl AsRef<Path>) -> Result<Self> {
        let path = run_dir.as_ref().join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            source_name: path.display().to_string(),
            line: e.line() as u64,
            message: e.to_string(),
        })
    }

    /// The echoed configuration; `output_dir` is left at its default.
    pub fn run_config(&self) -> Result<RunConfig> {
        serde_json::from_value(self.config.clone())
            .map_err(|e| Error::validation(format!("manifest config is unreadable: {e}")))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    /// Re-hashes every listed output under `run_dir`; returns the paths that
    /// are missing or differ.
    pub fn verify(&self, run_dir: impl AsRef<Path>) -> Vec<String> {
        self.outputs
            .iter()
            .filter(|o| match fs::read(run_dir.as_ref().join(&o.path)) {
                Ok(bytes) => sha256_hex(&bytes) != o.sha256,
                Err(_) => true,
            })
            .map(|o| o.path.clone())
            .collect()
    }
}

/// Per-partition results also written to `<kind>/summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSummary {
    pub kind: PartitionKind,
    pub epochs: usize,
    pub k: usize,
    pub inertia: f64,
    pub kmeans_restart: usize,
    pub kmeans_iterations: usize,
    pub tie_flagged: bool,
    pub occupation: Vec<usize>,
    pub state_avg_corr: Vec<f64>,
    pub state_sigma: Vec<f64>,
    pub pearson_avg_corr_lambda_max: Option<f64>,
    pub pearson_avg_corr_lambda_min: Option<f64>,
    pub pearson_lambda_max_lambda_min: Option<f64>,
    pub degenerate_moment_epochs: usize,
    pub similarity_stride: usize,
    pub lag: usize,
    pub empty_transition_rows: Vec<usize>,
    pub tridiagonal_mass: f64,
    pub equilibrium: Option<Vec<f64>>,
    pub equilibrium_note: Option<String>,
    pub markovianity_gap: Option<f64>,
    pub forbidden_transitions: ForbiddenTransitionReport,
    /// Agreement with the planted regimes of synthetic input.
    pub ground_truth: Option<Agreement>,
}

#[derive(Debug, Clone)]
pub struct PartitionOutcome {
    pub partition: Partition,
    pub series: SpectralSeries,
    pub states: StateSequence,
    pub transitions: TransMatrix,
    pub summary: PartitionSummary,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub manifest: Manifest,
    pub epoch_end_dates: Vec<NaiveDate>,
    /// Majority planted regime per epoch for synthetic input.
    pub epoch_regimes: Option<Vec<usize>>,
    pub partitions: Vec<PartitionOutcome>,
}

/// Collects files written under the run directory with their digests.
struct OutputTree {
    root: PathBuf,
    entries: Vec<OutputEntry>,
}

impl OutputTree {
    fn new(root: PathBuf) -> Result<Self> {
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(Self { root, entries: vec![] })
    }

    fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(&self.root.join(rel), bytes)?;
        self.entries.push(OutputEntry {
            path: rel.to_string(),
            bytes: bytes.len() as u64,
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }

    /// Streams a large file through a temp name and records its digest.
    fn write_streamed(&mut self, rel: &str, fill: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
        let path = self.root.join(rel);
        let tmp = path.with_extension("partial");
        let file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut out = HashingWriter {
            inner: BufWriter::new(file),
            hasher: Sha256::new(),
            bytes: 0,
        };
        fill(&mut out)?;
        out.inner.flush().map_err(|e| Error::io(&tmp, e))?;
        let file = out.inner.into_inner().map_err(|e| Error::io(&tmp, e.into_error()))?;
        file.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        self.entries.push(OutputEntry {
            path: rel.to_string(),
            bytes: out.bytes,
            sha256: hex::encode(out.hasher.finalize()),
        });
        Ok(())
    }

    fn into_sorted(mut self) -> Vec<OutputEntry> {
        self.entries.sort_by(|a, b| a.path.cmp(&b.path));
        self.entries
    }
}

struct HashingWriter<W: Write> {
    inner: W,
    hasher: Sha256,
    bytes: u64,
}

impl<W: Write> Write for HashingWriter<W> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.hasher.update(&buf[..n]);
        self.bytes += n as u64;
        Ok(n)
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.inner.flush()
    }
}

fn fmt_date(d: NaiveDate) -> String {
    d.format("%Y-%m-%d").to_string()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_else(|| "NA".into())
}

/// Plain CSV text; fields never contain separators or quotes.
struct Table {
    text: String,
}

impl Table {
    fn new(header: &[&str]) -> Self {
        let mut t = Self { text: String::new() };
        t.row(header.iter().map(|s| s.to_string()));
        t
    }

    fn comment(text: &str, header: &[&str]) -> Self {
        let mut t = Self {
            text: format!("# {text}\n"),
        };
        t.row(header.iter().map(|s| s.to_string()));
        t
    }

    fn row(&mut self, fields: impl IntoIterator<Item = String>) {
        let mut first = true;
        for f in fields {
            if !first {
                self.text.push(',');
            }
            first = false;
            self.text.push_str(&f);
        }
        self.text.push('\n');
    }

    fn bytes(&self) -> &[u8] {
        self.text.as_bytes()
    }
}

fn matrix_table(m: &SquareMatrix, labels: &[String], comment: Option<&str>) -> Table {
    let mut header = vec!["row"];
    header.extend(labels.iter().map(String::as_str));
    let mut t = match comment {
        Some(c) => Table::comment(c, &header),
        None => Table::new(&header),
    };
    for (i, l) in labels.iter().enumerate() {
        t.row(std::iter::once(l.clone()).chain(m.row(i).iter().map(|v| v.to_string())));
    }
    t
}

fn file_digest(role: &str, path: &Path) -> Result<InputDigest> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(InputDigest {
        role: role.into(),
        path: path.display().to_string(),
        sha256: sha256_hex(&bytes),
    })
}

struct Inputs {
    loaded: usize,
    table: PriceTable,
    sectors: SectorMap,
    regime_by_day: Option<Vec<usize>>,
    digests: Vec<InputDigest>,
}

fn load_inputs(cfg: &RunConfig) -> Result<Inputs> {
    if let Some(spec) = &cfg.synthetic {
        let data = generate_prices(spec)?;
        let loaded = data.prices.n_tickers();
        let table = filter_stocks(&data.prices, cfg.max_gap);
        let sectors = if table.n_tickers() == loaded {
            data.sectors
        } else {
            let keep: BTreeMap<String, _> = data
                .sectors
                .tickers()
                .iter()
                .cloned()
                .zip(data.sectors.sectors().iter().copied())
                .collect();
            SectorMap::from_assignments(table.tickers(), &keep)?
        };
        return Ok(Inputs {
            loaded,
            table,
            sectors,
            regime_by_day: Some(data.regime_by_day),
            digests: vec![],
        });
    }
    let (Some(prices), Some(sectors)) = (&cfg.prices, &cfg.sectors) else {
        return Err(Error::validation("no input: set prices and sectors, or synthetic"));
    };
    let raw = load_price_table(prices)?;
    let table = filter_stocks(&raw, cfg.max_gap);
    if table.n_tickers() < 2 {
        return Err(Error::validation(format!(
            "{} of {} stocks pass the gap filter (max_gap = {}); at least 2 needed",
            table.n_tickers(),
            raw.n_tickers(),
            cfg.max_gap
        )));
    }
    let sector_map = load_sector_map(sectors, &table)?;
    Ok(Inputs {
        loaded: raw.n_tickers(),
        table,
        sectors: sector_map,
        regime_by_day: None,
        digests: vec![file_digest("prices", prices)?, file_digest("sectors", sectors)?],
    })
}

fn build_partition(cfg: &RunConfig, kind: PartitionKind, table: &PriceTable, sectors: &SectorMap) -> Result<Partition> {
    if let Some(path) = cfg.partition_files.get(kind) {
        return load_partition_file(path, table.tickers(), kind);
    }
    match kind {
        PartitionKind::Sectorial => sectorial_partition(sectors),
        PartitionKind::Choice1 => ecg_partition_with(1, sectors, cfg.seeds.partition, &cfg.membership),
        PartitionKind::Choice2 => ecg_partition_with(2, sectors, cfg.seeds.partition, &cfg.membership),
        PartitionKind::Random => ecg_partition_with(3, sectors, cfg.seeds.partition, &cfg.membership),
    }
}

/// Price days spanned by each return window.
fn price_day_ranges(windows: &EpochWindows, ranges: &[Range<usize>]) -> Vec<Range<usize>> {
    ranges
        .iter()
        .map(|r| match windows.convention {
            WindowConvention::PriceDays => r.start..r.end + 1,
            WindowConvention::ReturnDays => r.start + 1..r.end + 1,
        })
        .collect()
}

struct EpochResult {
    cg: Vec<CgMatrix>,
    degenerate: Vec<usize>,
}

/// Runs the whole pipeline and writes the output tree under
/// `cfg.output_dir`, finishing with `manifest.json`.
pub fn run_pipeline(cfg: &RunConfig) -> Result<RunOutcome> {
    cfg.validate().stage("config")?;
    let exec = cfg.execution;
    let mut out = OutputTree::new(cfg.output_dir.clone()).stage("output")?;

    let inputs = load_inputs(cfg).stage("ingest")?;
    let table = &inputs.table;
    let mut stocks = Table::new(&["ticker", "sector", "longest_gap"]);
    for (i, t) in table.tickers().iter().enumerate() {
        stocks.row([t.clone(), inputs.sectors.sectors()[i].to_string(), table.longest_gap(i).to_string()]);
    }
    out.write("stocks.csv", stocks.bytes()).stage("ingest")?;
    if let Some(reg) = &inputs.regime_by_day {
        let mut buf = Vec::new();
        write_regimes(table.days(), reg, &mut buf)?;
        out.write("regimes.csv", &buf).stage("ingest")?;
    }

    let returns = log_returns(table).stage("returns")?;
    let windows = cfg.windows();
    let ranges = windows.ranges(returns.n_days()).stage("correlation")?;
    let n_epochs = ranges.len();

    let kinds = cfg.partition_kinds();
    let partitions: Vec<Partition> = kinds
        .iter()
        .map(|&k| build_partition(cfg, k, table, &inputs.sectors))
        .collect::<Result<_>>()
        .stage("coarse_grain")?;

    let per_epoch = map_epochs(&returns, windows, exec, |c| {
        let cg = partitions
            .iter()
            .map(|p| block_average(&c, p))
            .collect::<Result<Vec<_>>>()
            .stage_epoch("coarse_grain", c.epoch_index)?;
        Ok(EpochResult {
            cg,
            degenerate: c.degenerate,
        })
    })?;
    let days = returns.days();
    let end_dates: Vec<NaiveDate> = ranges.iter().map(|r| days[r.end - 1]).collect();

    let mut quality = Table::comment(
        "stocks with zero return variance within an epoch; their correlations are set to 0",
        &["epoch_index", "date", "tickers"],
    );
    for (e, r) in per_epoch.iter().enumerate() {
        if !r.degenerate.is_empty() {
            let names: Vec<&str> = r.degenerate.iter().map(|&i| table.tickers()[i].as_str()).collect();
            quality.row([e.to_string(), fmt_date(end_dates[e]), names.join(";")]);
        }
    }
    out.write("quality.csv", quality.bytes()).stage("correlation")?;

    if cfg.dump_epochs {
        out.write_streamed("epochs.bin", |w| {
            for r in &ranges {
                let c = pearson_matrix(&returns, r.clone())?;
                write_upper_triangles(std::slice::from_ref(&c), &mut *w)
                    .map_err(|e| Error::io("epochs.bin", e))?;
            }
            Ok(())
        })
        .stage("correlation")?;
    }

    if cfg.ensemble_count > 0 {
        write_ensemble(cfg, &returns, &mut out).stage("ensemble")?;
    }

    let regimes = inputs
        .regime_by_day
        .as_ref()
        .map(|reg| epoch_regimes(reg, &price_day_ranges(&windows, &ranges)));
    if let Some(reg) = &regimes {
        let mut t = Table::new(&["epoch_index", "date", "regime"]);
        for (e, g) in reg.iter().enumerate() {
            t.row([e.to_string(), fmt_date(end_dates[e]), g.to_string()]);
        }
        out.write("epoch_regimes.csv", t.bytes()).stage("synthetic")?;
    }

    let mut outcomes = Vec::with_capacity(partitions.len());
    for (pi, partition) in partitions.into_iter().enumerate() {
        let cgs: Vec<CgMatrix> = per_epoch.iter().map(|r| r.cg[pi].clone()).collect();
        let outcome = run_partition(cfg, partition, &cgs, &end_dates, regimes.as_deref(), &mut out)?;
        outcomes.push(outcome);
    }

    let mut comparison = Table::new(&["a", "b", "pearson", "adjusted_rand"]);
    for i in 0..outcomes.len() {
        for j in i + 1..outcomes.len() {
            let ag = compare_labelings(&outcomes[i].states.labels, &outcomes[j].states.labels).stage("report")?;
            comparison.row([
                outcomes[i].partition.kind().to_string(),
                outcomes[j].partition.kind().to_string(),
                fmt_opt(ag.pearson),
                ag.adjusted_rand.to_string(),
            ]);
        }
    }
    out.write("comparison.csv", comparison.bytes()).stage("report")?;

    let mut echo = serde_json::to_value(cfg).expect("config serializes");
    if let Some(obj) = echo.as_object_mut() {
        obj.remove("output_dir");
    }
    let manifest = Manifest {
        tool: "cgstates".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config: echo,
        seeds: cfg.seeds,
        inputs: inputs.digests,
        stocks_loaded: inputs.loaded,
        stocks_kept: table.n_tickers(),
        window: WindowSummary {
            convention: windows.convention,
            epoch_days: windows.epoch_days,
            shift: windows.shift,
            returns_per_epoch: windows.returns_per_epoch(),
            price_days: table.n_days(),
            return_days: returns.n_days(),
            epochs: n_epochs,
            first_day: table.days()[0],
            last_day: *table.days().last().expect("non-empty table"),
        },
        partitions: outcomes
            .iter()
            .map(|o| PartitionEntry {
                kind: o.partition.kind(),
                labels: o.partition.labels().to_vec(),
                sizes: o.partition.sizes(),
            })
            .collect(),
        kurtosis: "excess".into(),
        outputs: out.into_sorted(),
    };
    write_atomic(&cfg.output_dir.join(MANIFEST_FILE), manifest.to_json().as_bytes()).stage("report")?;
    Ok(RunOutcome {
        manifest,
        epoch_end_dates: end_dates,
        epoch_regimes: regimes,
        partitions: outcomes,
    })
}

fn write_ensemble(cfg: &RunConfig, returns: &ReturnsTable, out: &mut OutputTree) -> Result<()> {
    let full = pearson_matrix(returns, 0..returns.n_days())?;
    let ensemble = random_partition_ensemble_with(returns.n_tickers(), cfg.ensemble_count, cfg.seeds.ensemble, cfg.execution)?;
    let xyz = ensemble_elements(&full.values, &ensemble, cfg.execution)?;
    let mut t = Table::comment(
        "random equal splits of the full-horizon correlation matrix; x, z diagonal block means, y off-diagonal",
        &["member", "x", "y", "z"],
    );
    for (m, (x, y, z)) in xyz.iter().enumerate() {
        t.row([m.to_string(), x.to_string(), y.to_string(), z.to_string()]);
    }
    out.write("ensemble_xyz.csv", t.bytes())
}

fn run_partition(
    cfg: &RunConfig,
    partition: Partition,
    cgs: &[CgMatrix],
    end_dates: &[NaiveDate],
    regimes: Option<&[usize]>,
    out: &mut OutputTree,
) -> Result<PartitionOutcome> {
    let kind = partition.kind();
    let dir = kind.name();
    let labels = partition.labels().to_vec();

    let series = spectral_series(cgs).stage("spectral_stats")?;
    let mut t = Table::comment(
        "kurtosis is excess kurtosis; moments over distinct matrix entries; date is the last trading day of the epoch",
        &[
            "epoch_index",
            "date",
            "avg_corr",
            "lambda_min",
            "lambda_max",
            "variance",
            "skewness",
            "kurtosis",
        ],
    );
    for (e, date) in end_dates.iter().enumerate().take(cgs.len()) {
        t.row([
            e.to_string(),
            fmt_date(*date),
            series.avg_corr.values[e].to_string(),
            series.lambda_min.values[e].to_string(),
            series.lambda_max.values[e].to_string(),
            series.variance.values[e].to_string(),
            series.skewness.values[e].to_string(),
            series.kurtosis.values[e].to_string(),
        ]);
    }
    out.write(&format!("{dir}/series.csv"), t.bytes()).stage("report")?;

    let mut header = vec!["epoch_index".to_string(), "date".to_string()];
    for i in 0..labels.len() {
        for j in i..labels.len() {
            header.push(format!("{}|{}", labels[i], labels[j]));
        }
    }
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut t = Table::new(&header_refs);
    for (e, m) in cgs.iter().enumerate() {
        t.row([e.to_string(), fmt_date(end_dates[e])].into_iter().chain(vectorize(&m.values).iter().map(|v| v.to_string())));
    }
    out.write(&format!("{dir}/matrices.csv"), t.bytes()).stage("report")?;

    let features = feature_matrix(cgs, cfg.standardize_features);
    let km = KMeansConfig {
        k: cfg.k,
        seed: cfg.seeds.kmeans,
        restarts: cfg.restarts,
        max_iter: cfg.max_iter,
        exec: cfg.execution,
    };
    let raw = kmeans(&features, &km).stage("market_states")?;
    let states = order_states(&raw, &series.avg_corr.values).stage("market_states")?;

    let mut t = Table::new(&["epoch_index", "date", "state"]);
    for (e, s) in states.labels.iter().enumerate() {
        t.row([e.to_string(), fmt_date(end_dates[e]), s.to_string()]);
    }
    out.write(&format!("{dir}/states.csv"), t.bytes()).stage("report")?;

    if partition.n_blocks() == 2 {
        let mut t = Table::new(&["epoch_index", "date", "x", "y", "z", "state"]);
        for (e, m) in cgs.iter().enumerate() {
            t.row([
                e.to_string(),
                fmt_date(end_dates[e]),
                m.values.get(0, 0).to_string(),
                m.values.get(0, 1).to_string(),
                m.values.get(1, 1).to_string(),
                states.labels[e].to_string(),
            ]);
        }
        out.write(&format!("{dir}/xyz.csv"), t.bytes()).stage("report")?;
    }

    let means = state_mean_matrices(&states.labels, cfg.k, cgs).stage("market_states")?;
    for sm in &means {
        let comment = format!(
            "state {}: c_bar={} sigma_c={} epochs={}",
            sm.state, sm.mean_avg_corr, sm.sigma_avg_corr, sm.members
        );
        let t = matrix_table(&sm.matrix, &labels, Some(&comment));
        out.write(&format!("{dir}/state_means/state_{}.csv", sm.state), t.bytes())
            .stage("report")?;
    }

    let stride = cfg.similarity_stride.unwrap_or_else(|| default_stride(cgs.len()));
    let sim = similarity_matrix_with(cgs, stride, cfg.execution).stage("market_states")?;
    let sim_labels: Vec<String> = sim.epochs.iter().map(|e| e.to_string()).collect();
    let t = matrix_table(
        &sim.values,
        &sim_labels,
        Some(&format!("mean absolute difference of distinct entries; epoch stride {stride}")),
    );
    out.write(&format!("{dir}/similarity.csv"), t.bytes()).stage("report")?;

    let trans = transition_matrix(&states.labels, cfg.k, cfg.lag).stage("dynamics")?;
    let state_names: Vec<String> = (1..=cfg.k).map(|s| s.to_string()).collect();
    let mut t = Table::new(&std::iter::once("from").chain(state_names.iter().map(String::as_str)).collect::<Vec<_>>());
    for (i, row) in trans.counts.iter().enumerate() {
        t.row(std::iter::once((i + 1).to_string()).chain(row.iter().map(|c| c.to_string())));
    }
    out.write(&format!("{dir}/transition_counts.csv"), t.bytes()).stage("report")?;
    let mut probs = matrix_table(&trans.values, &state_names, Some(&format!("lag {}", cfg.lag)));
    probs.text = probs.text.replacen("\nrow,", "\nfrom,", 1);
    out.write(&format!("{dir}/transition_probs.csv"), probs.bytes()).stage("report")?;

    let (eq, eq_note) = match equilibrium(&trans) {
        Ok(pi) => (Some(pi), None),
        Err(Error::Numerical(msg)) => (None, Some(msg)),
        Err(e) => return Err(e).stage("dynamics"),
    };
    let mut t = Table::new(&["state", "probability"]);
    if let Some(pi) = &eq {
        for (s, p) in pi.iter().enumerate() {
            t.row([(s + 1).to_string(), p.to_string()]);
        }
    }
    out.write(&format!("{dir}/equilibrium.csv"), t.bytes()).stage("report")?;

    let band = tridiagonal_mass(&trans);
    let gap = markovianity_gap(&states.labels, cfg.k, cfg.lag).ok();
    let forbidden = forbidden_transition_check(&states.labels, cfg.k, cfg.lag).stage("dynamics")?;

    let mut report = String::new();
    let _ = writeln!(report, "partition: {kind}");
    let _ = writeln!(report, "lag: {}", cfg.lag);
    let _ = writeln!(report, "transitions: {}", trans.total());
    let _ = writeln!(report, "tridiagonal mass: {band}");
    let _ = writeln!(report, "chapman-kolmogorov gap: {}", fmt_opt(gap));
    match &eq {
        Some(pi) => {
            let s: Vec<String> = pi.iter().map(|p| format!("{p:.4}")).collect();
            let _ = writeln!(report, "equilibrium: ({})", s.join(", "));
        }
        None => {
            let _ = writeln!(report, "equilibrium: unavailable ({})", eq_note.as_deref().unwrap_or(""));
        }
    }
    if !trans.empty_rows.is_empty() {
        let rows: Vec<String> = trans.empty_rows.iter().map(|r| (r + 1).to_string()).collect();
        let _ = writeln!(report, "states without outgoing transitions: {}", rows.join(" "));
    }
    if forbidden.checked {
        let _ = writeln!(
            report,
            "entries into state 5: from state 4 = {}, from states 1-3 = {} ({})",
            forbidden.from_four_into_five,
            forbidden.offending.len(),
            if forbidden.passes { "pass" } else { "fail" }
        );
        for (e, a, b) in &forbidden.offending {
            let _ = writeln!(report, "  epoch {e}: {a} -> {b}");
        }
    } else if let Some(n) = &forbidden.notice {
        let _ = writeln!(report, "{n}");
    }
    out.write(&format!("{dir}/markov.txt"), report.as_bytes()).stage("report")?;

    let ground_truth = match regimes {
        Some(reg) => Some(compare_labelings(&states.labels, reg).stage("report")?),
        None => None,
    };
    let corr = |a: &[f64], b: &[f64]| pearson(a, b).ok();
    let summary = PartitionSummary {
        kind,
        epochs: cgs.len(),
        k: cfg.k,
        inertia: states.inertia,
        kmeans_restart: raw.restart,
        kmeans_iterations: raw.iterations,
        tie_flagged: states.tie_flagged,
        occupation: states.occupation(),
        state_avg_corr: states.state_avg_corr.clone(),
        state_sigma: states.state_sigma.clone(),
        pearson_avg_corr_lambda_max: corr(&series.avg_corr.values, &series.lambda_max.values),
        pearson_avg_corr_lambda_min: corr(&series.avg_corr.values, &series.lambda_min.values),
        pearson_lambda_max_lambda_min: corr(&series.lambda_max.values, &series.lambda_min.values),
        degenerate_moment_epochs: series.degenerate_moments.len(),
        similarity_stride: stride,
        lag: cfg.lag,
        empty_transition_rows: trans.empty_rows.iter().map(|r| r + 1).collect(),
        tridiagonal_mass: band,
        equilibrium: eq,
        equilibrium_note: eq_note,
        markovianity_gap: gap,
        forbidden_transitions: forbidden,
        ground_truth,
    };
    let mut json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    json.push('\n');
    out.write(&format!("{dir}/summary.json"), json.as_bytes()).stage("report")?;

    Ok(PartitionOutcome {
        partition,
        series,
        states,
        transitions: trans,
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(dir: &Path) -> RunConfig {
        RunConfig {
            synthetic: Some(RegimeSpec::ladder(20, 4, 300, 0.002, 3.0, 7)),
            k: 3,
            restarts: 5,
            ensemble_count: 20,
            output_dir: dir.to_path_buf(),
            ..RunConfig::default()
        }
    }

    #[test]
    fn config_defaults_and_validation() {
        let cfg = RunConfig::default();
        assert_eq!((cfg.epoch_days, cfg.shift, cfg.k, cfg.ensemble_count), (20, 1, 5, 1000));
        assert_eq!(cfg.crash_dates.len(), 8);
        assert!(matches!(cfg.validate(), Err(Error::Validation(_))));
        let mut ok = small_config(Path::new("x"));
        ok.validate().unwrap();
        ok.partitions.clear();
        assert!(ok.validate().unwrap_err().to_string().contains("partition"));
        let mut bad = small_config(Path::new("x"));
        bad.epoch_days = 1;
        assert!(bad.validate().is_err());
        bad = small_config(Path::new("x"));
        bad.k = 1;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = small_config(Path::new("out"));
        let back = RunConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
        let partial = RunConfig::from_toml_str("k = 4\npartitions = [\"choice2\"]\n").unwrap();
        assert_eq!(partial.k, 4);
        assert_eq!(partial.partitions, vec![PartitionKind::Choice2]);
        assert_eq!(partial.epoch_days, 20);
        assert!(RunConfig::from_toml_str("bogus = 1").is_err());
    }

    #[test]
    fn zero_partitions_is_a_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_config(dir.path());
        cfg.partitions.clear();
        let err = run_pipeline(&cfg).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn smoke_run_writes_a_complete_tree() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(dir.path());
        let run = run_pipeline(&cfg).unwrap();
        let m = &run.manifest;
        assert_eq!(m.window.epochs, 300 - 20 + 1);
        assert_eq!(m.partitions.len(), 4);
        let paths: Vec<&str> = m.outputs.iter().map(|o| o.path.as_str()).collect();
        for want in [
            "comparison.csv",
            "ensemble_xyz.csv",
            "sectorial/series.csv",
            "sectorial/state_means/state_3.csv",
            "choice1/xyz.csv",
            "random/transition_probs.csv",
            "choice2/summary.json",
        ] {
            assert!(paths.contains(&want), "missing {want}");
        }
        assert!(paths.windows(2).all(|w| w[0] < w[1]));
        assert!(m.verify(dir.path()).is_empty());
        assert_eq!(Manifest::load(dir.path()).unwrap(), *m);
        assert_eq!(m.run_config().unwrap().k, 3);
        let no_partials = fs::read_dir(dir.path())
            .unwrap()
            .all(|e| !e.unwrap().file_name().to_string_lossy().ends_with(".partial"));
        assert!(no_partials);
    }

    #[test]
    fn stage_errors_carry_context() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_config(dir.path());
        cfg.synthetic = None;
        cfg.prices = Some(dir.path().join("missing.csv"));
        cfg.sectors = Some(dir.path().join("missing_sectors.csv"));
        let err = run_pipeline(&cfg).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(err.to_string().contains("ingest"));
    }
}
