//! Per-epoch scalar summaries of correlation and coarse-grained matrices.

use serde::{Deserialize, Serialize};

use crate::coarse::CgMatrix;
use crate::correlation::CorrMatrix;
use crate::{Error, Result, SquareMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantity {
    AvgCorr,
    LambdaMin,
    LambdaMax,
    Variance,
    Skewness,
    Kurtosis,
}

/// One scalar per epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochSeries {
    pub quantity: Quantity,
    pub epoch_index: Vec<usize>,
    pub values: Vec<f64>,
}

impl EpochSeries {
    pub fn new(quantity: Quantity, values: Vec<f64>) -> Self {
        Self {
            quantity,
            epoch_index: (0..values.len()).collect(),
            values,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

pub trait AverageCorrelation {
    /// Mean off-diagonal correlation.
    fn average_correlation(&self) -> f64;
}

impl AverageCorrelation for CorrMatrix {
    fn average_correlation(&self) -> f64 {
        mean_off_diagonal(&self.values)
    }
}

impl AverageCorrelation for CgMatrix {
    /// Pair-count weighted mean over all `B x B` cells; equals the mean
    /// off-diagonal entry of the matrix that was averaged.
    fn average_correlation(&self) -> f64 {
        let mut num = 0.0;
        let mut den = 0u64;
        for (v, &w) in self.values.as_slice().iter().zip(&self.pair_counts) {
            num += w as f64 * v;
            den += w;
        }
        if den == 0 {
            0.0
        } else {
            num / den as f64
        }
    }
}

pub fn average_correlation<M: AverageCorrelation>(m: &M) -> f64 {
    m.average_correlation()
}

pub fn mean_off_diagonal(m: &SquareMatrix) -> f64 {
    let n = m.dim();
    if n < 2 {
        return 0.0;
    }
    let mut sum = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            sum += m.get(i, j) + m.get(j, i);
        }
    }
    sum / (n * (n - 1)) as f64
}

/// Closed-form eigenvalues `(min, max)` of `[[x, y], [y, z]]`.
pub fn eigenvalues_2x2(x: f64, y: f64, z: f64) -> (f64, f64) {
    let mid = 0.5 * (x + z);
    let radius = (0.5 * (x - z)).hypot(y);
    (mid - radius, mid + radius)
}

const JACOBI_MAX_SWEEPS: usize = 100;

/// All eigenvalues of a symmetric matrix in ascending order, by cyclic
/// Jacobi rotations until the off-diagonal norm drops below
/// `1e-12 * ||m||_F`.
pub fn symmetric_eigenvalues(m: &SquareMatrix) -> Result<Vec<f64>> {
    let asym = m.max_asymmetry();
    if asym > 1e-9 {
        return Err(Error::validation(format!(
            "eigensolver needs a symmetric matrix (asymmetry {asym:e})"
        )));
    }
    let n = m.dim();
    // Symmetrize exactly so rotations act on one triangle's values.
    let mut a = SquareMatrix::from_fn(n, |i, j| 0.5 * (m.get(i, j) + m.get(j, i)));
    let tol = 1e-12 * a.frobenius_norm();

    let off_norm = |a: &SquareMatrix| {
        let mut s = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                s += 2.0 * a.get(i, j) * a.get(i, j);
            }
        }
        s.sqrt()
    };

    let mut sweeps = 0;
    while off_norm(&a) > tol {
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(Error::numerical(format!(
                "Jacobi eigensolver did not converge in {JACOBI_MAX_SWEEPS} sweeps"
            )));
        }
        sweeps += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let theta = (a.get(q, q) - a.get(p, p)) / (2.0 * apq);
                let t = if theta.abs() > 1e150 {
                    0.5 / theta
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                // A <- A J
                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                // A <- J^T A
                for k in 0..n {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
                a.set(p, q, 0.0);
                a.set(q, p, 0.0);
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| a.get(i, i)).collect();
    eig.sort_by(f64::total_cmp);
    Ok(eig)
}

/// `(min, max)` eigenvalue of a coarse-grained matrix, closed form for 2x2.
pub fn extreme_eigenvalues(m: &CgMatrix) -> Result<(f64, f64)> {
    if m.dim() == 2 {
        let v = &m.values;
        return Ok(eigenvalues_2x2(v.get(0, 0), v.get(0, 1), v.get(1, 1)));
    }
    let eig = symmetric_eigenvalues(&m.values)?;
    match (eig.first(), eig.last()) {
        (Some(&lo), Some(&hi)) => Ok((lo, hi)),
        _ => Err(Error::validation("empty matrix has no eigenvalues")),
    }
}

/// Population moments of the distinct entries (upper triangle with
/// diagonal). Kurtosis is excess kurtosis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub variance: f64,
    pub skewness: f64,
    pub kurtosis: f64,
    /// Zero variance; skewness and kurtosis were set to 0.
    pub degenerate: bool,
}

pub fn element_moments(m: &SquareMatrix) -> Result<Moments> {
    let n = m.dim();
    if n < 2 {
        return Err(Error::validation("element moments need at least a 2x2 matrix"));
    }
    let entries: Vec<f64> = (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).map(|(i, j)| m.get(i, j)).collect();
    Ok(moments_of(&entries))
}

pub(crate) fn moments_of(values: &[f64]) -> Moments {
    let k = values.len() as f64;
    let mean = values.iter().sum::<f64>() / k;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for v in values {
        let d = v - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    m2 /= k;
    m3 /= k;
    m4 /= k;
    // Variance at rounding level of the entries is treated as zero.
    let scale = values.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    if m2 <= (1e-14 * scale).powi(2) {
        return Moments {
            variance: m2,
            skewness: 0.0,
            kurtosis: 0.0,
            degenerate: true,
        };
    }
    Moments {
        variance: m2,
        skewness: m3 / m2.powf(1.5),
        kurtosis: m4 / (m2 * m2) - 3.0,
        degenerate: false,
    }
}

/// Pearson coefficient of two equally long, non-constant sequences.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::validation(format!(
            "series must have equal length >= 2 (got {} and {})",
            a.len(),
            b.len()
        )));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::validation("Pearson coefficient undefined for a constant series"));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

pub fn series_pearson(a: &EpochSeries, b: &EpochSeries) -> Result<f64> {
    pearson(&a.values, &b.values)
}

/// Every per-epoch summary of a coarse-grained series.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralSeries {
    pub avg_corr: EpochSeries,
    pub lambda_min: EpochSeries,
    pub lambda_max: EpochSeries,
    pub variance: EpochSeries,
    pub skewness: EpochSeries,
    pub kurtosis: EpochSeries,
    /// Epochs whose element variance was zero.
    pub degenerate_moments: Vec<usize>,
}

pub fn spectral_series(matrices: &[CgMatrix]) -> Result<SpectralSeries> {
    let mut cols: [Vec<f64>; 6] = Default::default();
    let mut degenerate = Vec::new();
    for m in matrices {
        let (lo, hi) = extreme_eigenvalues(m)?;
        let mom = element_moments(&m.values)?;
        if mom.degenerate {
            degenerate.push(m.epoch_index);
        }
        for (col, v) in cols.iter_mut().zip([
            m.average_correlation(),
            lo,
            hi,
            mom.variance,
            mom.skewness,
            mom.kurtosis,
        ]) {
            col.push(v);
        }
    }
    let epochs: Vec<usize> = matrices.iter().map(|m| m.epoch_index).collect();
    let [a, lo, hi, var, skew, kurt] = cols;
    let series = |q, v| EpochSeries {
        quantity: q,
        epoch_index: epochs.clone(),
        values: v,
    };
    Ok(SpectralSeries {
        avg_corr: series(Quantity::AvgCorr, a),
        lambda_min: series(Quantity::LambdaMin, lo),
        lambda_max: series(Quantity::LambdaMax, hi),
        variance: series(Quantity::Variance, var),
        skewness: series(Quantity::Skewness, skew),
        kurtosis: series(Quantity::Kurtosis, kurt),
        degenerate_moments: degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coarse::PartitionKind;
    use proptest::prelude::*;

    fn cg(rows: &[Vec<f64>], counts: Vec<u64>) -> CgMatrix {
        CgMatrix {
            values: SquareMatrix::from_rows(rows).unwrap(),
            pair_counts: counts,
            epoch_index: 0,
            kind: PartitionKind::Choice1,
        }
    }

    #[test]
    fn average_correlation_examples() {
        let c = SquareMatrix::from_fn(6, |i, j| if i == j { 1.0 } else { 0.3 });
        assert!((mean_off_diagonal(&c) - 0.3).abs() < 1e-15);
        assert_eq!(mean_off_diagonal(&SquareMatrix::identity(4)), 0.0);
        // Ordered pair counts 2, 4, 4, 2 for two blocks of two.
        let m = cg(&[vec![0.2, 0.4], vec![0.4, 0.6]], vec![2, 4, 4, 2]);
        assert!((m.average_correlation() - 0.4).abs() < 1e-15);
    }

    #[test]
    fn closed_form_examples() {
        let (lo, hi) = eigenvalues_2x2(0.3, 0.3, 0.3);
        assert!(lo.abs() < 1e-15 && (hi - 0.6).abs() < 1e-15);
        assert_eq!(eigenvalues_2x2(1.0, 0.0, 1.0), (1.0, 1.0));
        let (lo, hi) = eigenvalues_2x2(0.2, 0.4, 0.6);
        assert!((lo - (0.4 - 0.2f64.sqrt())).abs() < 1e-15);
        assert!((hi - (0.4 + 0.2f64.sqrt())).abs() < 1e-15);
    }

    #[test]
    fn jacobi_examples() {
        let d = SquareMatrix::from_fn(4, |i, j| if i == j { [3.0, -1.0, 2.0, 0.5][i] } else { 0.0 });
        assert_eq!(symmetric_eigenvalues(&d).unwrap(), vec![-1.0, 0.5, 2.0, 3.0]);

        let c = 0.42;
        let ones = SquareMatrix::from_fn(10, |_, _| c);
        let eig = symmetric_eigenvalues(&ones).unwrap();
        assert!((eig[9] - 10.0 * c).abs() < 1e-12);
        assert!(eig[..9].iter().all(|v| v.abs() < 1e-12));

        let bad = SquareMatrix::from_rows(&[vec![1.0, 0.5], vec![0.4, 1.0]]).unwrap();
        assert!(matches!(symmetric_eigenvalues(&bad), Err(Error::Validation(_))));
    }

    #[test]
    fn moments_examples() {
        let flat = SquareMatrix::from_fn(3, |_, _| 0.25);
        let m = element_moments(&flat).unwrap();
        assert_eq!(m.variance, 0.0);
        assert!(m.degenerate);
        assert_eq!((m.skewness, m.kurtosis), (0.0, 0.0));

        // Entries {0, 0, 1}: mean 1/3, variance 2/9.
        let m = element_moments(&SquareMatrix::from_rows(&[vec![0.0, 0.0], vec![0.0, 1.0]]).unwrap()).unwrap();
        assert!((m.variance - 2.0 / 9.0).abs() < 1e-15);

        // Distinct entries {0,0,0,1,1,1}: symmetric two-point law.
        let two_point = SquareMatrix::from_fn(3, |i, j| if i == j { 0.0 } else { 1.0 });
        let m = element_moments(&two_point).unwrap();
        assert!(m.skewness.abs() < 1e-15);
        assert!((m.kurtosis + 2.0).abs() < 1e-12);

        let sym = SquareMatrix::from_rows(&[vec![-1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!(element_moments(&sym).unwrap().skewness.abs() < 1e-15);
        assert!(element_moments(&SquareMatrix::identity(1)).is_err());
    }

    #[test]
    fn pearson_examples() {
        let a = vec![0.3, 0.1, 0.7, 0.2, 0.5];
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        assert!((pearson(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson(&a, &neg).unwrap() + 1.0).abs() < 1e-15);
        assert!(pearson(&a, &[1.0; 5]).is_err());
        assert!(pearson(&a, &a[..3]).is_err());
    }

    proptest! {
        #[test]
        fn two_by_two_identities(x in -1.0f64..1.0, y in -1.0f64..1.0, z in -1.0f64..1.0) {
            let (lo, hi) = eigenvalues_2x2(x, y, z);
            prop_assert!(lo <= hi);
            prop_assert!((lo + hi - (x + z)).abs() < 1e-12);
            prop_assert!((lo * hi - (x * z - y * y)).abs() < 1e-12);
            let m = SquareMatrix::from_rows(&[vec![x, y], vec![y, z]]).unwrap();
            let eig = symmetric_eigenvalues(&m).unwrap();
            prop_assert!((eig[0] - lo).abs() < 1e-10 && (eig[1] - hi).abs() < 1e-10);
        }

        #[test]
        fn trace_identity(entries in proptest::collection::vec(-1.0f64..1.0, 55)) {
            let mut m = SquareMatrix::zeros(10);
            let mut k = 0;
            for i in 0..10 {
                for j in i..10 {
                    m.set(i, j, entries[k]);
                    m.set(j, i, entries[k]);
                    k += 1;
                }
            }
            let eig = symmetric_eigenvalues(&m).unwrap();
            prop_assert!((eig.iter().sum::<f64>() - m.trace()).abs() < 1e-10);
            let sum_sq: f64 = eig.iter().map(|v| v * v).sum();
            prop_assert!((sum_sq - m.frobenius_norm().powi(2)).abs() < 1e-10);
        }
    }
}
