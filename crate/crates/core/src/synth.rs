//! Planted-regime factor-model price panels.
//!
//! Daily log return of stock `i` on day `t` in regime `g`:
//! `beta_m(g) * M_t + beta_s(g) * S_{sector(i), t} + sigma(g) * eps_{i,t}`
//! with independent standard normal factors. Prices start at 100.
//!
//! Stocks are spread round-robin over the ten sector codes; the sector
//! factors group those codes into `n_sectors` contiguous bands.

use std::io::Write;
use std::ops::Range;
use std::path::Path;

use chrono::{Datelike, NaiveDate, Weekday};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::ingest::{PriceTable, Sector, SectorMap};
use crate::util::{csv_error, write_atomic};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Regime {
    pub duration_days: usize,
    pub market_beta: f64,
    pub sector_beta: f64,
    pub idiosyncratic_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeSpec {
    pub n_stocks: usize,
    pub n_sectors: usize,
    pub day_count: usize,
    pub regimes: Vec<Regime>,
    pub seed: u64,
    #[serde(default = "default_start")]
    pub start_date: NaiveDate,
}

fn default_start() -> NaiveDate {
    NaiveDate::from_ymd_opt(2006, 1, 3).expect("valid date")
}

impl RegimeSpec {
    /// Five regimes of equal length whose market betas grow by `ratio`
    /// from `base_beta`, with idiosyncratic sigma 0.01 and sector beta
    /// 0.003.
    pub fn ladder(n_stocks: usize, n_sectors: usize, day_count: usize, base_beta: f64, ratio: f64, seed: u64) -> Self {
        let n_regimes = 5;
        let mut regimes = Vec::with_capacity(n_regimes);
        let mut assigned = 0;
        for g in 0..n_regimes {
            let len = if g + 1 == n_regimes {
                day_count - assigned
            } else {
                day_count / n_regimes
            };
            assigned += len;
            regimes.push(Regime {
                duration_days: len,
                market_beta: base_beta * ratio.powi(g as i32),
                sector_beta: 0.003,
                idiosyncratic_sigma: 0.01,
            });
        }
        Self {
            n_stocks,
            n_sectors,
            day_count,
            regimes,
            seed,
            start_date: default_start(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_stocks < 2 {
            return Err(Error::validation("synthetic data needs at least 2 stocks"));
        }
        if !(1..=Sector::ALL.len()).contains(&self.n_sectors) {
            return Err(Error::validation("n_sectors must be between 1 and 10"));
        }
        if self.regimes.is_empty() {
            return Err(Error::validation("at least one regime required"));
        }
        let total: usize = self.regimes.iter().map(|r| r.duration_days).sum();
        if total != self.day_count {
            return Err(Error::validation(format!(
                "regime durations sum to {total}, day_count is {}",
                self.day_count
            )));
        }
        if self.day_count < 2 {
            return Err(Error::validation("day_count must be at least 2"));
        }
        for (g, r) in self.regimes.iter().enumerate() {
            if r.duration_days == 0 {
                return Err(Error::validation(format!("regime {g} has zero duration")));
            }
            if !(r.market_beta >= 0.0 && r.sector_beta >= 0.0) || !r.market_beta.is_finite() || !r.sector_beta.is_finite() {
                return Err(Error::validation(format!("regime {g}: betas must be finite and >= 0")));
            }
            if !(r.idiosyncratic_sigma > 0.0 && r.idiosyncratic_sigma.is_finite()) {
                return Err(Error::validation(format!("regime {g}: sigma must be positive")));
            }
        }
        Ok(())
    }

    /// Sector code of stock `i`.
    pub fn sector_of(&self, i: usize) -> Sector {
        Sector::ALL[i % Sector::ALL.len()]
    }

    /// Factor band of a sector code.
    pub fn factor_of(&self, sector: Sector) -> usize {
        sector.index() * self.n_sectors / Sector::ALL.len()
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub prices: PriceTable,
    pub sectors: SectorMap,
    /// Regime index of every price day (day 0 belongs to the first regime).
    pub regime_by_day: Vec<usize>,
}

/// Weekdays from `start`, skipping Saturdays and Sundays.
pub fn business_days(start: NaiveDate, count: usize) -> Vec<NaiveDate> {
    let mut out = Vec::with_capacity(count);
    let mut d = start;
    while out.len() < count {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(d);
        }
        d = d.succ_opt().expect("date in range");
    }
    out
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Generates prices and the per-day ground-truth regime.
///
/// The market factor uses stream 0, sector factor `s` stream `1 + s`, and
/// stock `i` stream `1 + n_sectors + i`.
pub fn generate_prices(spec: &RegimeSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let days = spec.day_count;
    let mut regime_by_day = Vec::with_capacity(days);
    for (g, r) in spec.regimes.iter().enumerate() {
        regime_by_day.extend(std::iter::repeat_n(g, r.duration_days));
    }
    let draw = |stream: u64| -> Vec<f64> {
        let mut rng = stream_rng(spec.seed, stream);
        (0..days).map(|_| rng.sample(StandardNormal)).collect()
    };
    let market = draw(0);
    let sector_factors: Vec<Vec<f64>> = (0..spec.n_sectors).map(|s| draw(1 + s as u64)).collect();

    let mut prices = Vec::with_capacity(spec.n_stocks * days);
    for i in 0..spec.n_stocks {
        let noise = draw((1 + spec.n_sectors + i) as u64);
        let factor = &sector_factors[spec.factor_of(spec.sector_of(i))];
        let mut log_p = 100f64.ln();
        prices.push(100.0);
        for t in 1..days {
            let r = &spec.regimes[regime_by_day[t]];
            log_p += r.market_beta * market[t] + r.sector_beta * factor[t] + r.idiosyncratic_sigma * noise[t];
            prices.push(log_p.exp());
        }
    }
    let width = (spec.n_stocks.max(2) - 1).to_string().len();
    let tickers: Vec<String> = (0..spec.n_stocks).map(|i| format!("S{i:0width$}")).collect();
    let table = PriceTable::new(
        tickers.clone(),
        business_days(spec.start_date, days),
        prices,
        vec![true; spec.n_stocks * days],
    )
    .map_err(|e| Error::numerical(format!("generated prices invalid (returns too large?): {e}")))?;
    let assignments = tickers
        .iter()
        .enumerate()
        .map(|(i, t)| (t.clone(), spec.sector_of(i)))
        .collect();
    Ok(SyntheticData {
        sectors: SectorMap::from_assignments(&tickers, &assignments)?,
        prices: table,
        regime_by_day,
    })
}

/// Masks quotes at random. Each ticker uses stream `i` of `seed`; at every
/// quoted day a gap starts with probability `gap_rate`, with a length drawn
/// uniformly from `1..=max_run`, and is followed by at least one quoted day.
pub fn inject_gaps(table: &PriceTable, gap_rate: f64, max_run: usize, seed: u64) -> Result<PriceTable> {
    if !(0.0..1.0).contains(&gap_rate) {
        return Err(Error::validation("gap_rate must lie in [0, 1)"));
    }
    if gap_rate == 0.0 || max_run == 0 {
        return Ok(table.clone());
    }
    let n_days = table.n_days();
    let mut mask = Vec::with_capacity(table.n_tickers() * n_days);
    for i in 0..table.n_tickers() {
        let mut rng = stream_rng(seed, i as u64);
        let mut quoted = table.quoted_of(i).to_vec();
        let mut d = 0;
        while d < n_days {
            if rng.random_bool(gap_rate) {
                let run = rng.random_range(1..=max_run);
                for q in quoted.iter_mut().skip(d).take(run) {
                    *q = false;
                }
                d += run + 1;
            } else {
                d += 1;
            }
        }
        mask.extend(quoted);
    }
    Ok(table.with_mask(mask))
}

/// Regime of each epoch by majority of its days; ties go to the earlier
/// regime. `days` are price-day ranges.
pub fn epoch_regimes(regime_by_day: &[usize], epochs: &[Range<usize>]) -> Vec<usize> {
    epochs
        .iter()
        .map(|r| {
            let mut counts = std::collections::BTreeMap::new();
            for &g in &regime_by_day[r.clone()] {
                *counts.entry(g).or_insert(0usize) += 1;
            }
            counts
                .into_iter()
                .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
                .map(|(g, _)| g)
                .unwrap_or(0)
        })
        .collect()
}

pub fn write_regimes<W: Write>(days: &[NaiveDate], regime_by_day: &[usize], writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let to_err = |e: csv::Error| csv_error("<regime writer>", e);
    wtr.write_record(["date", "regime"]).map_err(to_err)?;
    for (d, g) in days.iter().zip(regime_by_day) {
        wtr.write_record([d.format("%Y-%m-%d").to_string(), g.to_string()])
            .map_err(to_err)?;
    }
    wtr.flush().map_err(|e| Error::io("<regime writer>", e))
}

pub fn save_regimes(days: &[NaiveDate], regime_by_day: &[usize], path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_regimes(days, regime_by_day, &mut buf)?;
    write_atomic(path.as_ref(), &buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correlation::pearson_matrix;
    use crate::ingest::filter_stocks;
    use crate::returns::log_returns;
    use crate::spectral::mean_off_diagonal;

    fn single(n_stocks: usize, days: usize, beta_m: f64, beta_s: f64, sigma: f64) -> RegimeSpec {
        RegimeSpec {
            n_stocks,
            n_sectors: 4,
            day_count: days,
            regimes: vec![Regime {
                duration_days: days,
                market_beta: beta_m,
                sector_beta: beta_s,
                idiosyncratic_sigma: sigma,
            }],
            seed: 17,
            start_date: default_start(),
        }
    }

    fn full_corr(spec: &RegimeSpec) -> crate::SquareMatrix {
        let data = generate_prices(spec).unwrap();
        let r = log_returns(&data.prices).unwrap();
        pearson_matrix(&r, 0..r.n_days()).unwrap().values
    }

    #[test]
    fn independent_noise_is_uncorrelated() {
        let days = 2001;
        let c = full_corr(&single(8, days, 0.0, 0.0, 0.01));
        let bound = 4.0 / ((days - 1) as f64).sqrt();
        for i in 0..8 {
            for j in (i + 1)..8 {
                assert!(c.get(i, j).abs() < bound, "{}", c.get(i, j));
            }
        }
    }

    #[test]
    fn dominant_market_factor_drives_correlation_to_one() {
        let c = full_corr(&single(6, 300, 0.05, 0.0, 1e-5));
        assert!(mean_off_diagonal(&c) > 0.999);
    }

    #[test]
    fn single_factor_population_correlation() {
        // beta^2 / (beta^2 + sigma^2) = 1/2 with beta = sigma.
        let c = full_corr(&single(20, 2001, 0.01, 0.0, 0.01));
        assert!((mean_off_diagonal(&c) - 0.5).abs() < 0.05, "{}", mean_off_diagonal(&c));
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = RegimeSpec::ladder(12, 3, 100, 0.001, 3.0, 5);
        let a = generate_prices(&spec).unwrap();
        let b = generate_prices(&spec).unwrap();
        assert_eq!(a.prices, b.prices);
        assert_eq!(a.regime_by_day, b.regime_by_day);
        assert_eq!(a.regime_by_day.len(), 100);
        assert_eq!(a.sectors.counts().iter().sum::<usize>(), 12);
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = single(4, 10, 0.1, 0.1, 0.1);
        s.day_count = 11;
        assert!(generate_prices(&s).is_err());
        let mut s = single(4, 10, 0.1, 0.1, 0.1);
        s.regimes[0].idiosyncratic_sigma = 0.0;
        assert!(generate_prices(&s).is_err());
        let mut s = single(4, 10, 0.1, 0.1, 0.1);
        s.regimes[0].market_beta = -1.0;
        assert!(generate_prices(&s).is_err());
    }

    #[test]
    fn gaps() {
        let spec = single(30, 200, 0.01, 0.0, 0.01);
        let t = generate_prices(&spec).unwrap().prices;
        assert_eq!(inject_gaps(&t, 0.0, 3, 1).unwrap(), t);

        let a = inject_gaps(&t, 0.05, 3, 9).unwrap();
        let b = inject_gaps(&t, 0.05, 3, 9).unwrap();
        assert_eq!(a, b);
        assert!((0..30).all(|i| a.longest_gap(i) <= 3));
        let long: Vec<usize> = (0..30).filter(|&i| a.longest_gap(i) == 3).collect();
        assert!(!long.is_empty());
        let kept = filter_stocks(&a, 2);
        assert_eq!(kept.n_tickers(), 30 - long.len());
        for i in long {
            assert!(!kept.tickers().contains(&a.tickers()[i]));
        }
        assert!(inject_gaps(&t, 1.0, 3, 1).is_err());
    }

    #[test]
    fn majority_regime() {
        let by_day = [0, 0, 0, 1, 1, 1, 1, 2];
        assert_eq!(epoch_regimes(&by_day, &[0..4, 2..6, 4..8, 2..4]), vec![0, 1, 1, 0]);
    }

    #[test]
    fn business_calendar_skips_weekends() {
        let d = business_days(NaiveDate::from_ymd_opt(2024, 5, 3).unwrap(), 3);
        assert_eq!(d[1], NaiveDate::from_ymd_opt(2024, 5, 6).unwrap());
    }
}
