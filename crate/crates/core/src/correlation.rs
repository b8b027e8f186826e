//! Rolling-epoch Pearson correlation matrices.
//!
//! Correlations use population (1/n) moments. A series with zero variance
//! inside a window has no defined correlation; its off-diagonal entries are
//! set to 0, the diagonal stays 1, and the stock is listed in
//! [`CorrMatrix::degenerate`].

use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::returns::ReturnsTable;
use crate::util::write_atomic;
use crate::{Error, Exec, Result, SquareMatrix};

/// How `epoch_days` is counted.
///
/// With `PriceDays` an epoch spans `epoch_days` consecutive trading days, so
/// it holds `epoch_days - 1` returns and a horizon of `P` price days yields
/// `floor((P - epoch_days) / shift) + 1` epochs (4430 days, 20, 1 gives
/// 4411). With `ReturnDays` an epoch holds `epoch_days` returns and `D`
/// return days yield `floor((D - epoch_days) / shift) + 1` epochs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowConvention {
    #[default]
    PriceDays,
    ReturnDays,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochWindows {
    pub epoch_days: usize,
    pub shift: usize,
    pub convention: WindowConvention,
}

impl EpochWindows {
    pub fn new(epoch_days: usize, shift: usize, convention: WindowConvention) -> Self {
        Self {
            epoch_days,
            shift,
            convention,
        }
    }

    /// Number of returns inside one epoch.
    pub fn returns_per_epoch(&self) -> usize {
        match self.convention {
            WindowConvention::PriceDays => self.epoch_days.saturating_sub(1),
            WindowConvention::ReturnDays => self.epoch_days,
        }
    }

    fn validate(&self, n_returns: usize) -> Result<()> {
        if self.shift == 0 {
            return Err(Error::validation("epoch shift must be at least 1"));
        }
        if self.returns_per_epoch() < 2 {
            return Err(Error::validation(format!(
                "an epoch of {} days ({:?}) holds fewer than 2 returns",
                self.epoch_days, self.convention
            )));
        }
        if self.returns_per_epoch() > n_returns {
            return Err(Error::validation(format!(
                "epoch of {} days does not fit in {} return days",
                self.epoch_days, n_returns
            )));
        }
        Ok(())
    }

    /// Number of epochs over `n_returns` return days.
    pub fn count(&self, n_returns: usize) -> Result<usize> {
        self.validate(n_returns)?;
        Ok((n_returns - self.returns_per_epoch()) / self.shift + 1)
    }

    /// Return-index ranges of every epoch, in order.
    pub fn ranges(&self, n_returns: usize) -> Result<Vec<Range<usize>>> {
        let count = self.count(n_returns)?;
        let len = self.returns_per_epoch();
        Ok((0..count).map(|e| e * self.shift..e * self.shift + len).collect())
    }
}

/// Pearson correlation matrix of one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrMatrix {
    pub values: SquareMatrix,
    pub epoch_index: usize,
    pub epoch_start: NaiveDate,
    pub epoch_end: NaiveDate,
    /// Stocks with zero variance in this epoch.
    pub degenerate: Vec<usize>,
}

/// Correlation over the returns in `window`. Epoch dates are the first and
/// last return days of the window.
pub fn pearson_matrix(returns: &ReturnsTable, window: Range<usize>) -> Result<CorrMatrix> {
    if returns.n_tickers() == 0 {
        return Err(Error::validation("correlation needs at least one stock"));
    }
    if window.len() < 2 || window.end > returns.n_days() {
        return Err(Error::validation(format!(
            "window {window:?} invalid for {} return days",
            returns.n_days()
        )));
    }
    let (values, degenerate) = correlate_window(returns, window.clone());
    Ok(CorrMatrix {
        values,
        epoch_index: 0,
        epoch_start: returns.days()[window.start],
        epoch_end: returns.days()[window.end - 1],
        degenerate,
    })
}

fn correlate_window(returns: &ReturnsTable, window: Range<usize>) -> (SquareMatrix, Vec<usize>) {
    let n = returns.n_tickers();
    let w = window.len();
    let inv_w = 1.0 / w as f64;
    // Standardized series, stock-major; all-zero rows for degenerate stocks.
    let mut z = vec![0.0; n * w];
    let mut degenerate = Vec::new();
    for i in 0..n {
        let s = &returns.series(i)[window.clone()];
        let mean = s.iter().sum::<f64>() * inv_w;
        let var = s.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() * inv_w;
        let sd = var.sqrt();
        let scale = s.iter().fold(0.0_f64, |m, r| m.max(r.abs()));
        // Rounding noise around a constant series is not a variance.
        if sd == 0.0 || sd <= 1e-12 * scale {
            degenerate.push(i);
            continue;
        }
        for (zt, r) in z[i * w..(i + 1) * w].iter_mut().zip(s) {
            *zt = (r - mean) / sd;
        }
    }
    let mut c = SquareMatrix::identity(n);
    for i in 0..n {
        let zi = &z[i * w..(i + 1) * w];
        for j in (i + 1)..n {
            let zj = &z[j * w..(j + 1) * w];
            let dot: f64 = zi.iter().zip(zj).map(|(a, b)| a * b).sum();
            let v = (dot * inv_w).clamp(-1.0, 1.0);
            c.set(i, j, v);
            c.set(j, i, v);
        }
    }
    (c, degenerate)
}

/// Correlation matrices of every epoch, computed with the default executor.
pub fn rolling_correlations(returns: &ReturnsTable, windows: EpochWindows) -> Result<Vec<CorrMatrix>> {
    rolling_correlations_with(returns, windows, Exec::default())
}

pub fn rolling_correlations_with(
    returns: &ReturnsTable,
    windows: EpochWindows,
    exec: Exec,
) -> Result<Vec<CorrMatrix>> {
    map_epochs(returns, windows, exec, Ok)
}

/// Computes each epoch's correlation matrix and hands it to `f`, keeping
/// only `f`'s output. Results come back in epoch order regardless of `exec`.
pub fn map_epochs<T, F>(returns: &ReturnsTable, windows: EpochWindows, exec: Exec, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(CorrMatrix) -> Result<T> + Sync + Send,
{
    if returns.n_tickers() == 0 {
        return Err(Error::validation("correlation needs at least one stock"));
    }
    let ranges = windows.ranges(returns.n_days())?;
    let (starts, ends) = epoch_dates(returns, &windows, &ranges);
    exec.try_map_range(ranges.len(), |e| {
        let (values, degenerate) = correlate_window(returns, ranges[e].clone());
        f(CorrMatrix {
            values,
            epoch_index: e,
            epoch_start: starts[e],
            epoch_end: ends[e],
            degenerate,
        })
    })
}

/// First and last trading day of each epoch under the window convention.
pub fn epoch_dates(
    returns: &ReturnsTable,
    windows: &EpochWindows,
    ranges: &[Range<usize>],
) -> (Vec<NaiveDate>, Vec<NaiveDate>) {
    let days = returns.days();
    let starts = ranges
        .iter()
        .map(|r| match windows.convention {
            // The price day before the first return opens the epoch.
            WindowConvention::PriceDays => returns.price_days()[r.start],
            WindowConvention::ReturnDays => days[r.start],
        })
        .collect();
    let ends = ranges.iter().map(|r| days[r.end - 1]).collect();
    (starts, ends)
}

/// Writes one record per matrix: `N` as little-endian `u64`, then the
/// `N(N-1)/2` strict upper-triangle entries, row-major, as little-endian
/// `f64`.
pub fn write_upper_triangles<W: Write>(matrices: &[CorrMatrix], mut out: W) -> std::io::Result<()> {
    for m in matrices {
        let n = m.values.dim();
        out.write_all(&(n as u64).to_le_bytes())?;
        for i in 0..n {
            for j in (i + 1)..n {
                out.write_all(&m.values.get(i, j).to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn save_upper_triangles(matrices: &[CorrMatrix], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_upper_triangles(matrices, &mut buf).map_err(|e| Error::io(path, e))?;
    write_atomic(path, &buf)
}

/// Reads records written by [`write_upper_triangles`], restoring the unit
/// diagonal and the lower triangle.
pub fn read_upper_triangles<R: Read>(mut input: R) -> Result<Vec<SquareMatrix>> {
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io("<epoch dump>", e))?;
    let mut out = Vec::new();
    let mut pos = 0;
    let take8 = |pos: &mut usize| -> Result<[u8; 8]> {
        let chunk = bytes
            .get(*pos..*pos + 8)
            .ok_or_else(|| Error::validation("truncated epoch dump"))?;
        *pos += 8;
        Ok(chunk.try_into().expect("8 bytes"))
    };
    while pos < bytes.len() {
        let n = u64::from_le_bytes(take8(&mut pos)?) as usize;
        let mut m = SquareMatrix::identity(n);
        for i in 0..n {
            for j in (i + 1)..n {
                let v = f64::from_le_bytes(take8(&mut pos)?);
                m.set(i, j, v);
                m.set(j, i, v);
            }
        }
        out.push(m);
    }
    Ok(out)
}
