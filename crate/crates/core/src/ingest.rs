//! Price and sector tables.
//!
//! Price CSV: header `date,<ticker1>,<ticker2>,...`, one row per trading day
//! with an ISO-8601 date; an empty cell or `NA` means no closing quote.
//! Rows may appear in any order and are sorted on load. Prices are taken as
//! already adjusted for splits and dividends.
//!
//! Sector CSV: header `ticker,sector`, one of the ten codes in [`Sector`].

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::util::{csv_error, write_atomic};
use crate::{Error, Result};

/// Aligned ticker x trading-day grid of adjusted closing prices.
///
/// Storage is ticker-major: all days of the first ticker, then the second,
/// and so on. Unquoted slots hold `NaN`.
#[derive(Debug, Clone)]
pub struct PriceTable {
    tickers: Vec<String>,
    days: Vec<NaiveDate>,
    prices: Vec<f64>,
    quoted: Vec<bool>,
}

impl PartialEq for PriceTable {
    /// Unquoted slots are ignored; quoted prices compare bitwise.
    fn eq(&self, other: &Self) -> bool {
        self.tickers == other.tickers
            && self.days == other.days
            && self.quoted == other.quoted
            && self
                .prices
                .iter()
                .zip(&other.prices)
                .zip(&self.quoted)
                .all(|((a, b), &q)| !q || a.to_bits() == b.to_bits())
    }
}

impl PriceTable {
    /// Builds a table from ticker-major `prices` and `quoted` grids.
    pub fn new(
        tickers: Vec<String>,
        days: Vec<NaiveDate>,
        prices: Vec<f64>,
        quoted: Vec<bool>,
    ) -> Result<Self> {
        let cells = tickers.len() * days.len();
        if prices.len() != cells || quoted.len() != cells {
            return Err(Error::validation(format!(
                "price grid has {} cells, expected {} tickers x {} days",
                prices.len().max(quoted.len()),
                tickers.len(),
                days.len()
            )));
        }
        if let Some(w) = days.windows(2).find(|w| w[0] >= w[1]) {
            return Err(Error::validation(format!(
                "trading days must be strictly increasing ({} then {})",
                w[0], w[1]
            )));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = tickers.iter().find(|t| !seen.insert(t.as_str())) {
            return Err(Error::validation(format!("duplicate ticker `{dup}`")));
        }
        let n_days = days.len();
        let mut prices = prices;
        for (idx, (p, q)) in prices.iter_mut().zip(&quoted).enumerate() {
            if *q {
                if !(p.is_finite() && *p > 0.0) {
                    return Err(Error::validation(format!(
                        "price for `{}` on {} must be positive and finite, got {p}",
                        tickers[idx / n_days],
                        days[idx % n_days]
                    )));
                }
            } else {
                *p = f64::NAN;
            }
        }
        Ok(Self {
            tickers,
            days,
            prices,
            quoted,
        })
    }

    pub fn tickers(&self) -> &[String] {
        &self.tickers
    }

    pub fn days(&self) -> &[NaiveDate] {
        &self.days
    }

    pub fn n_tickers(&self) -> usize {
        self.tickers.len()
    }

    pub fn n_days(&self) -> usize {
        self.days.len()
    }

    /// Prices of one ticker over all days (`NaN` where unquoted).
    pub fn prices_of(&self, ticker: usize) -> &[f64] {
        let n = self.days.len();
        &self.prices[ticker * n..(ticker + 1) * n]
    }

    pub fn quoted_of(&self, ticker: usize) -> &[bool] {
        let n = self.days.len();
        &self.quoted[ticker * n..(ticker + 1) * n]
    }

    pub fn is_quoted(&self, ticker: usize, day: usize) -> bool {
        self.quoted[ticker * self.days.len() + day]
    }

    pub fn price(&self, ticker: usize, day: usize) -> Option<f64> {
        let idx = ticker * self.days.len() + day;
        self.quoted[idx].then(|| self.prices[idx])
    }

    /// Sub-table with the given tickers, in the given order.
    pub fn select(&self, tickers: &[usize]) -> PriceTable {
        let mut prices = Vec::with_capacity(tickers.len() * self.n_days());
        let mut quoted = Vec::with_capacity(tickers.len() * self.n_days());
        for &t in tickers {
            prices.extend_from_slice(self.prices_of(t));
            quoted.extend_from_slice(self.quoted_of(t));
        }
        PriceTable {
            tickers: tickers.iter().map(|&t| self.tickers[t].clone()).collect(),
            days: self.days.clone(),
            prices,
            quoted,
        }
    }

    /// Copy with a replaced quote mask (used by gap injection).
    pub(crate) fn with_mask(&self, quoted: Vec<bool>) -> PriceTable {
        assert_eq!(quoted.len(), self.quoted.len());
        let prices = self
            .prices
            .iter()
            .zip(&quoted)
            .map(|(&p, &q)| if q { p } else { f64::NAN })
            .collect();
        PriceTable {
            tickers: self.tickers.clone(),
            days: self.days.clone(),
            prices,
            quoted,
        }
    }

    /// Longest run of consecutive unquoted days for one ticker. Runs touching
    /// either end of the horizon count like any other.
    pub fn longest_gap(&self, ticker: usize) -> usize {
        let mut longest = 0;
        let mut run = 0;
        for &q in self.quoted_of(ticker) {
            if q {
                run = 0;
            } else {
                run += 1;
                longest = longest.max(run);
            }
        }
        longest
    }
}

/// Reads a price CSV from disk.
pub fn load_price_table(path: impl AsRef<Path>) -> Result<PriceTable> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_price_table(file, &path.display().to_string())
}

/// Reads a price CSV from any reader; `source_name` labels parse errors.
pub fn read_price_table<R: Read>(reader: R, source_name: &str) -> Result<PriceTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr.headers().map_err(|e| csv_error(source_name, e))?.clone();
    if header.get(0).map(|h| h.eq_ignore_ascii_case("date")) != Some(true) {
        return Err(Error::Parse {
            source_name: source_name.to_string(),
            line: 1,
            message: "first header column must be `date`".into(),
        });
    }
    let tickers: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    if tickers.iter().any(|t| t.is_empty()) {
        return Err(Error::Parse {
            source_name: source_name.to_string(),
            line: 1,
            message: "empty ticker name in header".into(),
        });
    }

    let parse_err = |line: u64, message: String| Error::Parse {
        source_name: source_name.to_string(),
        line,
        message,
    };

    // (date, line, cells) in file order; sorted afterwards.
    let mut rows: Vec<(NaiveDate, u64, Vec<Option<f64>>)> = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| csv_error(source_name, e))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let date_cell = record.get(0).unwrap_or_default();
        let date = NaiveDate::parse_from_str(date_cell, "%Y-%m-%d")
            .map_err(|e| parse_err(line, format!("bad date `{date_cell}`: {e}")))?;
        let mut cells = Vec::with_capacity(tickers.len());
        for (col, raw) in record.iter().skip(1).enumerate() {
            if raw.is_empty() || raw.eq_ignore_ascii_case("na") {
                cells.push(None);
                continue;
            }
            let value: f64 = raw
                .parse()
                .map_err(|_| parse_err(line, format!("bad price `{raw}` for `{}`", tickers[col])))?;
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::validation(format!(
                    "{source_name}:{line}: price for `{}` must be positive and finite, got {raw}",
                    tickers[col]
                )));
            }
            cells.push(Some(value));
        }
        rows.push((date, line, cells));
    }

    rows.sort_by_key(|r| r.0);
    if let Some(w) = rows.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(Error::validation(format!(
            "{source_name}: duplicate date {} (lines {} and {})",
            w[0].0, w[0].1, w[1].1
        )));
    }

    let n_days = rows.len();
    let mut prices = vec![f64::NAN; tickers.len() * n_days];
    let mut quoted = vec![false; tickers.len() * n_days];
    for (d, (_, _, cells)) in rows.iter().enumerate() {
        for (t, cell) in cells.iter().enumerate() {
            if let Some(p) = cell {
                prices[t * n_days + d] = *p;
                quoted[t * n_days + d] = true;
            }
        }
    }
    let days = rows.into_iter().map(|r| r.0).collect();
    PriceTable::new(tickers, days, prices, quoted)
}

/// Serializes a table in the price CSV schema. Floats use the shortest
/// representation that parses back to the same bits.
pub fn write_price_table<W: Write>(table: &PriceTable, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let to_err = |e: csv::Error| csv_error("<price writer>", e);
    let mut header = vec!["date".to_string()];
    header.extend(table.tickers.iter().cloned());
    wtr.write_record(&header).map_err(to_err)?;
    for (d, day) in table.days.iter().enumerate() {
        let mut row = Vec::with_capacity(table.n_tickers() + 1);
        row.push(day.format("%Y-%m-%d").to_string());
        for t in 0..table.n_tickers() {
            row.push(match table.price(t, d) {
                Some(p) => format!("{p}"),
                None => "NA".into(),
            });
        }
        wtr.write_record(&row).map_err(to_err)?;
    }
    wtr.flush().map_err(|e| Error::io("<price writer>", e))
}

pub fn save_price_table(table: &PriceTable, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_price_table(table, &mut buf)?;
    write_atomic(path.as_ref(), &buf)
}

/// Keeps the tickers whose longest run of unquoted days is at most
/// `max_gap`, preserving their order.
pub fn filter_stocks(table: &PriceTable, max_gap: usize) -> PriceTable {
    let keep: Vec<usize> = (0..table.n_tickers())
        .filter(|&t| table.longest_gap(t) <= max_gap)
        .collect();
    table.select(&keep)
}

/// The ten sector codes of the index classification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Sector {
    CD,
    CS,
    EG,
    FN,
    HC,
    ID,
    IT,
    MT,
    TC,
    UT,
}

impl Sector {
    /// Canonical order.
    pub const ALL: [Sector; 10] = [
        Sector::CD,
        Sector::CS,
        Sector::EG,
        Sector::FN,
        Sector::HC,
        Sector::ID,
        Sector::IT,
        Sector::MT,
        Sector::TC,
        Sector::UT,
    ];

    pub fn code(self) -> &'static str {
        match self {
            Sector::CD => "CD",
            Sector::CS => "CS",
            Sector::EG => "EG",
            Sector::FN => "FN",
            Sector::HC => "HC",
            Sector::ID => "ID",
            Sector::IT => "IT",
            Sector::MT => "MT",
            Sector::TC => "TC",
            Sector::UT => "UT",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Sector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Sector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Sector::ALL
            .into_iter()
            .find(|c| c.code().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::validation(format!("unknown sector code `{s}`")))
    }
}

/// Sector of every ticker of a price table, aligned with its ticker order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SectorMap {
    tickers: Vec<String>,
    sectors: Vec<Sector>,
}

impl SectorMap {
    /// Aligns `assignments` to `tickers`; every ticker must be covered.
    pub fn from_assignments(tickers: &[String], assignments: &BTreeMap<String, Sector>) -> Result<Self> {
        let sectors = tickers
            .iter()
            .map(|t| assignments.get(t).copied().ok_or_else(|| Error::MissingSector(t.clone())))
            .collect::<Result<_>>()?;
        Ok(Self {
            tickers: tickers.to_vec(),
            sectors,
        })
    }

    pub fn tickers(&self) -> &[String] {
        &self.tickers
    }

    pub fn sectors(&self) -> &[Sector] {
        &self.sectors
    }

    pub fn len(&self) -> usize {
        self.sectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sectors.is_empty()
    }

    /// Stocks per sector in canonical order.
    pub fn counts(&self) -> [usize; 10] {
        let mut counts = [0; 10];
        for s in &self.sectors {
            counts[s.index()] += 1;
        }
        counts
    }
}

pub fn load_sector_map(path: impl AsRef<Path>, table: &PriceTable) -> Result<SectorMap> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_sector_map(file, &path.display().to_string(), table)
}

/// Reads `ticker,sector` rows. Tickers absent from `table` are ignored, so a
/// map for a wider universe can be reused after filtering.
pub fn read_sector_map<R: Read>(reader: R, source_name: &str, table: &PriceTable) -> Result<SectorMap> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut assignments = BTreeMap::new();
    for record in rdr.records() {
        let record = record.map_err(|e| csv_error(source_name, e))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let (Some(ticker), Some(code)) = (record.get(0), record.get(1)) else {
            return Err(Error::Parse {
                source_name: source_name.to_string(),
                line,
                message: "expected `ticker,sector`".into(),
            });
        };
        let sector: Sector = code
            .parse()
            .map_err(|e: Error| Error::validation(format!("{source_name}:{line}: {e}")))?;
        if let Some(prev) = assignments.insert(ticker.to_string(), sector) {
            if prev != sector {
                return Err(Error::validation(format!(
                    "{source_name}:{line}: ticker `{ticker}` assigned to both {prev} and {sector}"
                )));
            }
        }
    }
    SectorMap::from_assignments(table.tickers(), &assignments)
}

pub fn write_sector_map<W: Write>(map: &SectorMap, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let to_err = |e: csv::Error| csv_error("<sector writer>", e);
    wtr.write_record(["ticker", "sector"]).map_err(to_err)?;
    for (t, s) in map.tickers.iter().zip(&map.sectors) {
        wtr.write_record([t.as_str(), s.code()]).map_err(to_err)?;
    }
    wtr.flush().map_err(|e| Error::io("<sector writer>", e))
}

pub fn save_sector_map(map: &SectorMap, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_sector_map(map, &mut buf)?;
    write_atomic(path.as_ref(), &buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn parse(s: &str) -> Result<PriceTable> {
        read_price_table(s.as_bytes(), "test.csv")
    }

    fn day(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
    }

    #[test]
    fn fully_quoted_table() {
        let t = parse(
            "date,A,B,C\n\
             2020-01-01,1,2,3\n2020-01-02,1,2,3\n2020-01-03,1,2,3\n2020-01-06,1,2,3\n2020-01-07,1,2,3\n",
        )
        .unwrap();
        assert_eq!((t.n_tickers(), t.n_days()), (3, 5));
        assert!((0..3).all(|i| t.quoted_of(i).iter().all(|&q| q)));
    }

    #[test]
    fn na_cell_marks_gap() {
        let t = parse("date,A,B\n2020-01-01,1,2\n2020-01-02,1,2\n2020-01-03,1,NA\n2020-01-06,1,\n").unwrap();
        assert!(!t.is_quoted(1, 2));
        assert!(!t.is_quoted(1, 3));
        assert_eq!(t.price(1, 2), None);
        assert_eq!(t.price(0, 2), Some(1.0));
    }

    #[test]
    fn rows_sorted_by_date() {
        let t = parse("date,A\n2020-01-03,3\n2020-01-01,1\n2020-01-02,2\n").unwrap();
        assert_eq!(t.days(), &[day("2020-01-01"), day("2020-01-02"), day("2020-01-03")]);
        assert_eq!(t.prices_of(0), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn malformed_row_reports_line() {
        let err = parse("date,A,B\n2020-01-01,1,2\n2020-01-02,abc,2\n").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let err = parse("date,A,B\n2020-01-01,1,2\n2020-01-02,1\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err:?}");
    }

    #[test]
    fn non_positive_price_rejected() {
        let err = parse("date,A\n2020-01-01,0\n").unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
        let err = parse("date,A\n2020-01-01,-3.5\n").unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn duplicate_date_rejected() {
        let err = parse("date,A\n2020-01-01,1\n2020-01-02,1\n2020-01-01,2\n").unwrap_err();
        assert!(matches!(err, Error::Validation(ref m) if m.contains("duplicate date")), "{err:?}");
    }

    fn table_with_masks(masks: &[&[bool]]) -> PriceTable {
        let n_days = masks[0].len();
        let days: Vec<NaiveDate> = (0..n_days)
            .map(|d| day("2021-03-01") + chrono::Days::new(d as u64))
            .collect();
        let tickers = (0..masks.len()).map(|i| format!("T{i}")).collect();
        let quoted: Vec<bool> = masks.iter().flat_map(|m| m.iter().copied()).collect();
        let prices = vec![10.0; quoted.len()];
        PriceTable::new(tickers, days, prices, quoted).unwrap()
    }

    #[test]
    fn gap_of_three_removed_two_separate_gaps_of_two_kept() {
        let t = table_with_masks(&[
            &[true, false, false, false, true, true, true, true],
            &[true, false, false, true, true, false, false, true],
            &[true; 8],
        ]);
        let f = filter_stocks(&t, 2);
        assert_eq!(f.tickers(), &["T1".to_string(), "T2".to_string()]);
    }

    #[test]
    fn edge_gaps_count() {
        let t = table_with_masks(&[
            &[false, false, false, true, true],
            &[true, true, false, false, false],
            &[false, false, true, true, false],
        ]);
        let f = filter_stocks(&t, 2);
        assert_eq!(f.tickers(), &["T2".to_string()]);
    }

    #[test]
    fn sector_map_coverage() {
        let t = parse("date,AAA,BBB\n2020-01-01,1,2\n").unwrap();
        let ok = read_sector_map("ticker,sector\nAAA,FN\nBBB,it\nZZZ,UT\n".as_bytes(), "s.csv", &t).unwrap();
        assert_eq!(ok.sectors(), &[Sector::FN, Sector::IT]);

        let err = read_sector_map("ticker,sector\nAAA,FN\n".as_bytes(), "s.csv", &t).unwrap_err();
        assert!(matches!(err, Error::MissingSector(ref s) if s == "BBB"));

        let err = read_sector_map("ticker,sector\nAAA,FN\nBBB,XX\n".as_bytes(), "s.csv", &t).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    fn arb_table() -> impl Strategy<Value = PriceTable> {
        (1usize..5, 1usize..12).prop_flat_map(|(n_t, n_d)| {
            (
                proptest::collection::vec(0.01f64..1e6, n_t * n_d),
                proptest::collection::vec(proptest::bool::weighted(0.7), n_t * n_d),
            )
                .prop_map(move |(prices, quoted)| {
                    let days = (0..n_d)
                        .map(|d| day("2010-01-04") + chrono::Days::new(d as u64))
                        .collect();
                    let tickers = (0..n_t).map(|i| format!("S{i}")).collect();
                    PriceTable::new(tickers, days, prices, quoted).unwrap()
                })
        })
    }

    proptest! {
        #[test]
        fn filter_is_idempotent_and_order_preserving(t in arb_table(), gap in 0usize..4) {
            let once = filter_stocks(&t, gap);
            let twice = filter_stocks(&once, gap);
            prop_assert_eq!(&once, &twice);
            let positions: Vec<usize> = once
                .tickers()
                .iter()
                .map(|n| t.tickers().iter().position(|m| m == n).unwrap())
                .collect();
            prop_assert!(positions.windows(2).all(|w| w[0] < w[1]));
        }

        #[test]
        fn write_then_read_is_bit_identical(t in arb_table()) {
            let mut buf = Vec::new();
            write_price_table(&t, &mut buf).unwrap();
            let back = read_price_table(buf.as_slice(), "rt").unwrap();
            prop_assert_eq!(back.tickers(), t.tickers());
            prop_assert_eq!(back.days(), t.days());
            for i in 0..t.n_tickers() {
                prop_assert_eq!(back.quoted_of(i), t.quoted_of(i));
                for d in 0..t.n_days() {
                    prop_assert_eq!(
                        back.price(i, d).map(f64::to_bits),
                        t.price(i, d).map(f64::to_bits)
                    );
                }
            }
            let mut again = Vec::new();
            write_price_table(&back, &mut again).unwrap();
            prop_assert_eq!(buf, again);
        }
    }
}
