//! SVG figures rendered from a finished run directory. Each figure is
//! written next to a CSV holding exactly the values it plots.

use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::pipeline::{Manifest, OutputEntry};
use crate::svg::{self, ColorScale};
use crate::util::{csv_error, sha256_hex, write_atomic};
use crate::{Error, Result, SquareMatrix};

pub const FIGURE_DIR: &str = "figures";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FigureIndex {
    /// SVG and sidecar files, relative to the run directory, sorted.
    pub files: Vec<OutputEntry>,
}

struct Csv {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Csv {
    fn read(path: &Path) -> Result<Self> {
        let name = path.display().to_string();
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_path(path)
            .map_err(|e| csv_error(&name, e))?;
        let header = rdr
            .headers()
            .map_err(|e| csv_error(&name, e))?
            .iter()
            .map(str::to_string)
            .collect();
        let rows = rdr
            .records()
            .map(|r| r.map(|r| r.iter().map(str::to_string).collect()))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| csv_error(&name, e))?;
        Ok(Self { header, rows })
    }

    fn col(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::validation(format!("column `{name}` missing")))
    }

    fn strings(&self, name: &str) -> Result<Vec<String>> {
        let c = self.col(name)?;
        Ok(self.rows.iter().map(|r| r[c].clone()).collect())
    }

    fn floats(&self, name: &str) -> Result<Vec<f64>> {
        self.strings(name)?
            .iter()
            .map(|s| s.parse().map_err(|_| Error::validation(format!("`{s}` in column `{name}` is not a number"))))
            .collect()
    }

    fn states(&self) -> Result<Vec<usize>> {
        self.strings("state")?
            .iter()
            .map(|s| s.parse().map_err(|_| Error::validation(format!("bad state `{s}`"))))
            .collect()
    }

    fn dates(&self) -> Result<Vec<NaiveDate>> {
        self.strings("date")?
            .iter()
            .map(|s| NaiveDate::parse_from_str(s, "%Y-%m-%d").map_err(|_| Error::validation(format!("bad date `{s}`"))))
            .collect()
    }

    /// A matrix table: first column is the row label, the rest are values.
    fn matrix(&self) -> Result<(Vec<String>, SquareMatrix)> {
        let labels = self.header[1..].to_vec();
        let rows: Vec<Vec<f64>> = self
            .rows
            .iter()
            .map(|r| {
                r[1..]
                    .iter()
                    .map(|s| s.parse().map_err(|_| Error::validation(format!("`{s}` is not a number"))))
                    .collect()
            })
            .collect::<Result<_>>()?;
        Ok((labels, SquareMatrix::from_rows(&rows)?))
    }
}

fn csv_text(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut s = header.join(",");
    s.push('\n');
    for r in rows {
        s.push_str(&r.join(","));
        s.push('\n');
    }
    s
}

struct Writer<'a> {
    run_dir: &'a Path,
    files: Vec<OutputEntry>,
}

impl Writer<'_> {
    fn put(&mut self, name: &str, text: &str) -> Result<()> {
        let rel = format!("{FIGURE_DIR}/{name}");
        write_atomic(&self.run_dir.join(&rel), text.as_bytes())?;
        self.files.push(OutputEntry {
            path: rel,
            bytes: text.len() as u64,
            sha256: sha256_hex(text.as_bytes()),
        });
        Ok(())
    }

    fn figure(&mut self, stem: &str, svg: &str, sidecar: &str) -> Result<()> {
        self.put(&format!("{stem}.svg"), svg)?;
        self.put(&format!("{stem}.csv"), sidecar)
    }
}

/// Renders every figure for the partitions listed in the run manifest into
/// `<run_dir>/figures/` and writes `figures/index.json`.
pub fn emit_figures(run_dir: impl AsRef<Path>) -> Result<FigureIndex> {
    let run_dir = run_dir.as_ref();
    let manifest = Manifest::load(run_dir)?;
    let cfg = manifest.run_config()?;
    let crashes: Vec<NaiveDate> = cfg.crash_dates.iter().map(|c| c.date).collect();
    let mut w = Writer {
        run_dir,
        files: vec![],
    };

    for entry in &manifest.partitions {
        let kind = entry.kind.name();
        let dir = run_dir.join(kind);

        let states = Csv::read(&dir.join("states.csv"))?;
        let dates = states.dates()?;
        let labels = states.states()?;
        let k = cfg.k;
        let svg = svg::state_dot_rows(&dates, &labels, k, &crashes, &format!("Market states ({kind})"));
        let mut side = csv_text(
            &["epoch_index", "date", "state"],
            states.rows.iter().map(|r| r[..3].to_vec()),
        );
        side.push_str("# crash dates\n");
        for c in &cfg.crash_dates {
            if dates.first().is_some_and(|&lo| c.date >= lo) && dates.last().is_some_and(|&hi| c.date <= hi) {
                side.push_str(&format!("# {} {}\n", c.date.format("%Y-%m-%d"), c.name));
            }
        }
        w.figure(&format!("{kind}_states"), &svg, &side)?;

        let series = Csv::read(&dir.join("series.csv"))?;
        let cols = ["avg_corr", "lambda_max", "lambda_min"];
        let panels: Vec<(String, Vec<f64>)> = cols
            .iter()
            .map(|c| Ok((c.to_string(), series.floats(c)?)))
            .collect::<Result<_>>()?;
        let svg = svg::line_panels(&series.dates()?, &panels, &crashes, &format!("Average correlation and extreme eigenvalues ({kind})"));
        let idx: Vec<usize> = ["epoch_index", "date", "avg_corr", "lambda_max", "lambda_min"]
            .iter()
            .map(|c| series.col(c))
            .collect::<Result<_>>()?;
        let side = csv_text(
            &["epoch_index", "date", "avg_corr", "lambda_max", "lambda_min"],
            series.rows.iter().map(|r| idx.iter().map(|&i| r[i].clone()).collect()),
        );
        w.figure(&format!("{kind}_series"), &svg, &side)?;

        let mut panels = Vec::with_capacity(k);
        let mut side_rows = Vec::new();
        for s in 1..=k {
            let t = Csv::read(&dir.join("state_means").join(format!("state_{s}.csv")))?;
            let (block_labels, m) = t.matrix()?;
            for (i, r) in t.rows.iter().enumerate() {
                for (j, v) in r[1..].iter().enumerate() {
                    side_rows.push(vec![s.to_string(), block_labels[i].clone(), block_labels[j].clone(), v.clone()]);
                }
            }
            panels.push((format!("state {s}"), m, block_labels));
        }
        let block_labels = panels.first().map(|p| p.2.clone()).unwrap_or_default();
        let named: Vec<(String, SquareMatrix)> = panels.into_iter().map(|(n, m, _)| (n, m)).collect();
        let svg = svg::heatmap_row(
            &named,
            Some(&block_labels),
            &format!("State mean matrices ({kind})"),
            ColorScale::Diverging { lo: -1.0, hi: 1.0 },
        );
        w.figure(
            &format!("{kind}_state_means"),
            &svg,
            &csv_text(&["state", "row", "col", "value"], side_rows),
        )?;

        let sim = Csv::read(&dir.join("similarity.csv"))?;
        let (epochs, m) = sim.matrix()?;
        let svg = svg::heatmap(&m, None, &format!("Similarity of epochs ({kind})"), ColorScale::Sequential);
        let side = csv_text(
            &["row_epoch", "col_epoch", "distance"],
            sim.rows.iter().enumerate().flat_map(|(i, r)| {
                let epochs = &epochs;
                r[1..]
                    .iter()
                    .enumerate()
                    .map(move |(j, v)| vec![epochs[i].clone(), epochs[j].clone(), v.clone()])
            }),
        );
        w.figure(&format!("{kind}_similarity"), &svg, &side)?;

        let tp = Csv::read(&dir.join("transition_probs.csv"))?;
        let (names, m) = tp.matrix()?;
        let svg = svg::heatmap(
            &m,
            Some(&names),
            &format!("Transition probabilities ({kind})"),
            ColorScale::Sequential,
        );
        let side = csv_text(
            &["from", "to", "probability"],
            tp.rows.iter().flat_map(|r| {
                let names = &names;
                r[1..]
                    .iter()
                    .enumerate()
                    .map(move |(j, v)| vec![r[0].clone(), names[j].clone(), v.clone()])
            }),
        );
        w.figure(&format!("{kind}_transitions"), &svg, &side)?;

        if entry.labels.len() == 2 {
            let xyz = Csv::read(&dir.join("xyz.csv"))?;
            let st = xyz.states()?;
            for (a, b) in [("x", "y"), ("x", "z"), ("y", "z")] {
                let (va, vb) = (xyz.floats(a)?, xyz.floats(b)?);
                let pts: Vec<(f64, f64)> = va.into_iter().zip(vb).collect();
                let svg = svg::scatter(&pts, &st, a, b, &format!("({a}, {b}) by state ({kind})"));
                let (ia, ib, is) = (xyz.col(a)?, xyz.col(b)?, xyz.col("state")?);
                let side = csv_text(
                    &["epoch_index", a, b, "state"],
                    xyz.rows
                        .iter()
                        .map(|r| vec![r[0].clone(), r[ia].clone(), r[ib].clone(), r[is].clone()]),
                );
                w.figure(&format!("{kind}_scatter_{a}{b}"), &svg, &side)?;
            }
        }
    }

    w.files.sort_by(|a, b| a.path.cmp(&b.path));
    let index = FigureIndex { files: w.files };
    let mut json = serde_json::to_string_pretty(&index).expect("index serializes");
    json.push('\n');
    write_atomic(&run_dir.join(FIGURE_DIR).join("index.json"), json.as_bytes())?;
    Ok(index)
}
