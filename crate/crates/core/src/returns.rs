use chrono::NaiveDate;

use crate::ingest::PriceTable;
use crate::{Error, Result};

/// Log returns, ticker-major, one value per price day after the first.
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnsTable {
    tickers: Vec<String>,
    price_days: Vec<NaiveDate>,
    returns: Vec<f64>,
}

impl ReturnsTable {
    /// Builds a table directly from ticker-major return rows. `price_days`
    /// has one more entry than each row: the day before the first return.
    pub fn new(tickers: Vec<String>, price_days: Vec<NaiveDate>, returns: Vec<f64>) -> Result<Self> {
        if price_days.is_empty() || returns.len() != tickers.len() * (price_days.len() - 1) {
            return Err(Error::validation(format!(
                "returns grid has {} values, expected {} tickers x {} return days",
                returns.len(),
                tickers.len(),
                price_days.len().saturating_sub(1)
            )));
        }
        if returns.iter().any(|r| !r.is_finite()) {
            return Err(Error::validation("returns must be finite"));
        }
        Ok(Self {
            tickers,
            price_days,
            returns,
        })
    }

    /// Convenience constructor for hand-made series: price days are
    /// synthesized as consecutive calendar days from 2000-01-01.
    pub fn from_series(series: &[Vec<f64>]) -> Result<Self> {
        let n = series.first().map_or(0, Vec::len);
        if series.iter().any(|s| s.len() != n) {
            return Err(Error::validation("all series must have the same length"));
        }
        let origin = NaiveDate::from_ymd_opt(2000, 1, 1).expect("valid date");
        let price_days = (0..=n).map(|d| origin + chrono::Days::new(d as u64)).collect();
        let tickers = (0..series.len()).map(|i| format!("S{i}")).collect();
        Self::new(tickers, price_days, series.concat())
    }

    pub fn tickers(&self) -> &[String] {
        &self.tickers
    }

    /// Dates of the returns (the price days minus the first).
    pub fn days(&self) -> &[NaiveDate] {
        &self.price_days[1..]
    }

    /// All price days, including the one preceding the first return.
    pub fn price_days(&self) -> &[NaiveDate] {
        &self.price_days
    }

    pub fn n_tickers(&self) -> usize {
        self.tickers.len()
    }

    pub fn n_days(&self) -> usize {
        self.price_days.len() - 1
    }

    pub fn series(&self, ticker: usize) -> &[f64] {
        let n = self.n_days();
        &self.returns[ticker * n..(ticker + 1) * n]
    }
}

/// Log returns with the missing-quote rules: an unquoted day has return 0,
/// and a quoted day is measured against the last quoted day before it. A
/// quoted day with no earlier quote (leading gap) also gets 0.
pub fn log_returns(table: &PriceTable) -> Result<ReturnsTable> {
    if table.n_days() < 2 {
        return Err(Error::validation(format!(
            "need at least 2 trading days for returns, got {}",
            table.n_days()
        )));
    }
    let n_ret = table.n_days() - 1;
    let mut returns = Vec::with_capacity(table.n_tickers() * n_ret);
    for t in 0..table.n_tickers() {
        let prices = table.prices_of(t);
        let quoted = table.quoted_of(t);
        if !quoted.iter().any(|&q| q) {
            return Err(Error::validation(format!(
                "ticker `{}` has no quoted days",
                table.tickers()[t]
            )));
        }
        let mut last = quoted[0].then_some(prices[0]);
        for d in 1..table.n_days() {
            if !quoted[d] {
                returns.push(0.0);
                continue;
            }
            let p = prices[d];
            returns.push(match last {
                Some(prev) => (p / prev).ln(),
                None => 0.0,
            });
            last = Some(p);
        }
    }
    ReturnsTable::new(table.tickers().to_vec(), table.days().to_vec(), returns)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::E;

    fn table(prices: &[Option<f64>]) -> PriceTable {
        let origin = NaiveDate::from_ymd_opt(2015, 6, 1).unwrap();
        let days = (0..prices.len()).map(|d| origin + chrono::Days::new(d as u64)).collect();
        PriceTable::new(
            vec!["X".into()],
            days,
            prices.iter().map(|p| p.unwrap_or(f64::NAN)).collect(),
            prices.iter().map(Option::is_some).collect(),
        )
        .unwrap()
    }

    #[test]
    fn ratio_e_gives_unit_return() {
        let r = log_returns(&table(&[Some(3.0), Some(3.0 * E)])).unwrap();
        assert!((r.series(0)[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn unquoted_day_is_zero_and_next_quote_uses_last_active_day() {
        // Quotes on days 1 and 4 only; p(4)/p(1) = e^2.
        let r = log_returns(&table(&[Some(2.0), None, None, Some(2.0 * E * E)])).unwrap();
        let s = r.series(0);
        assert_eq!(s.len(), 3);
        assert_eq!(s[0], 0.0);
        assert_eq!(s[1], 0.0);
        assert!((s[2] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn leading_gap_yields_zero_first_return() {
        let r = log_returns(&table(&[None, Some(5.0), Some(10.0)])).unwrap();
        assert_eq!(r.series(0)[0], 0.0);
        assert!((r.series(0)[1] - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn dimensions_drop_first_day() {
        let t = table(&[Some(1.0), Some(2.0), Some(4.0), Some(8.0)]);
        let r = log_returns(&t).unwrap();
        assert_eq!(r.n_days(), 3);
        assert_eq!(r.days(), &t.days()[1..]);
    }

    #[test]
    fn errors() {
        assert!(log_returns(&table(&[Some(1.0)])).is_err());
        assert!(matches!(log_returns(&table(&[None, None])), Err(Error::Validation(_))));
    }
}
