//! Empirical state-transition dynamics.
//!
//! State labels are `1..=k` throughout, as produced by
//! [`order_states`](crate::states::order_states).

use serde::{Deserialize, Serialize};

use crate::{Error, Result, SquareMatrix};

/// Row-stochastic transition matrix estimated at a fixed lag.
#[derive(Debug, Clone, PartialEq)]
pub struct TransMatrix {
    /// `values[i][j]` = P(state j at t + lag | state i at t), 0-based.
    pub values: SquareMatrix,
    pub counts: Vec<Vec<u64>>,
    pub lag: usize,
    /// Rows without outgoing transitions; left as zeros.
    pub empty_rows: Vec<usize>,
}

impl TransMatrix {
    pub fn k(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Builds from a count table.
    pub fn from_counts(counts: Vec<Vec<u64>>, lag: usize) -> Result<Self> {
        let k = counts.len();
        if counts.iter().any(|r| r.len() != k) {
            return Err(Error::validation("transition count table must be square"));
        }
        let mut values = SquareMatrix::zeros(k);
        let mut empty_rows = Vec::new();
        for (i, row) in counts.iter().enumerate() {
            let total: u64 = row.iter().sum();
            if total == 0 {
                empty_rows.push(i);
                continue;
            }
            for (j, &c) in row.iter().enumerate() {
                values.set(i, j, c as f64 / total as f64);
            }
        }
        Ok(Self {
            values,
            counts,
            lag,
            empty_rows,
        })
    }
}

fn check_labels(labels: &[usize], k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::validation("k must be at least 1"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l == 0 || l > k) {
        return Err(Error::validation(format!("state label {bad} outside 1..={k}")));
    }
    Ok(())
}

fn count_transitions(labels: &[usize], k: usize, lag: usize) -> Vec<Vec<u64>> {
    let mut counts = vec![vec![0u64; k]; k];
    for (a, b) in labels.iter().zip(&labels[lag..]) {
        counts[a - 1][b - 1] += 1;
    }
    counts
}

/// Counts `s_t -> s_{t+lag}` and row-normalizes.
pub fn transition_matrix(labels: &[usize], k: usize, lag: usize) -> Result<TransMatrix> {
    check_labels(labels, k)?;
    if lag == 0 {
        return Err(Error::validation("lag must be at least 1"));
    }
    if labels.len() <= lag {
        return Err(Error::validation(format!(
            "sequence of {} epochs is too short for lag {lag}",
            labels.len()
        )));
    }
    let mut occupied = vec![false; k];
    for &l in labels {
        occupied[l - 1] = true;
    }
    if let Some(s) = occupied.iter().position(|&o| !o) {
        return Err(Error::validation(format!("state {} is never occupied", s + 1)));
    }
    TransMatrix::from_counts(count_transitions(labels, k, lag), lag)
}

const POWER_MAX_ITER: usize = 1_000_000;

/// Stationary distribution by power iteration from the uniform vector.
///
/// Iterates the lazy chain `(I + T) / 2`, which has the same stationary
/// vector but no periodicity, until `||pi T - pi||_1 < 1e-12`.
pub fn equilibrium(t: &TransMatrix) -> Result<Vec<f64>> {
    let k = t.k();
    if let Some(&row) = t.empty_rows.first() {
        return Err(Error::numerical(format!(
            "state {} has no outgoing transitions",
            row + 1
        )));
    }
    check_single_recurrent_class(&t.values)?;

    let step = |pi: &[f64]| -> Vec<f64> {
        (0..k)
            .map(|j| (0..k).map(|i| pi[i] * t.values.get(i, j)).sum::<f64>())
            .collect()
    };
    let mut pi = vec![1.0 / k as f64; k];
    for _ in 0..POWER_MAX_ITER {
        let next = step(&pi);
        let residual: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
        if residual < 1e-12 {
            let norm: f64 = pi.iter().sum();
            return Ok(pi.into_iter().map(|v| v / norm).collect());
        }
        pi = pi.iter().zip(&next).map(|(a, b)| 0.5 * (a + b)).collect();
        let norm: f64 = pi.iter().sum();
        pi.iter_mut().for_each(|v| *v /= norm);
    }
    Err(Error::numerical("power iteration did not reach a 1e-12 residual"))
}

/// Errors unless exactly one closed communicating class exists.
fn check_single_recurrent_class(p: &SquareMatrix) -> Result<()> {
    let k = p.dim();
    // Transitive closure of the support graph.
    let mut reach = vec![vec![false; k]; k];
    for (i, row) in reach.iter_mut().enumerate() {
        row[i] = true;
        for (j, r) in row.iter_mut().enumerate() {
            if p.get(i, j) > 0.0 {
                *r = true;
            }
        }
    }
    #[allow(clippy::needless_range_loop)]
    for m in 0..k {
        for i in 0..k {
            if reach[i][m] {
                for j in 0..k {
                    if reach[m][j] {
                        reach[i][j] = true;
                    }
                }
            }
        }
    }
    // A state is recurrent iff everything it reaches reaches it back.
    let recurrent: Vec<usize> = (0..k).filter(|&i| (0..k).all(|j| !reach[i][j] || reach[j][i])).collect();
    let first = recurrent[0];
    let other_class: Vec<usize> = recurrent.iter().copied().filter(|&j| !reach[first][j]).collect();
    if !other_class.is_empty() {
        let names: Vec<String> = other_class.iter().map(|s| (s + 1).to_string()).collect();
        return Err(Error::numerical(format!(
            "chain is reducible: states {} are unreachable from state {}",
            names.join(", "),
            first + 1
        )));
    }
    Ok(())
}

/// Occupation-weighted probability mass on `|i - j| <= 1`, with weights
/// proportional to each row's transition count.
pub fn tridiagonal_mass(t: &TransMatrix) -> f64 {
    let total = t.total();
    if total == 0 {
        return 0.0;
    }
    let k = t.k();
    let mut mass = 0.0;
    for i in 0..k {
        let w = t.counts[i].iter().sum::<u64>() as f64 / total as f64;
        let band: f64 = (i.saturating_sub(1)..(i + 2).min(k)).map(|j| t.values.get(i, j)).sum();
        mass += w * band;
    }
    mass
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForbiddenTransitionReport {
    /// False when `k != 5`.
    pub checked: bool,
    pub notice: Option<String>,
    /// No entry into state 5 from states 1-3, and at least one from 4.
    pub passes: bool,
    pub from_four_into_five: u64,
    /// `(epoch, from, to)` for every entry into state 5 from states 1-3.
    pub offending: Vec<(usize, usize, usize)>,
}

/// Checks that the top state (5) is entered only from state 4.
pub fn forbidden_transition_check(labels: &[usize], k: usize, lag: usize) -> Result<ForbiddenTransitionReport> {
    if k != 5 {
        return Ok(ForbiddenTransitionReport {
            checked: false,
            notice: Some(format!("check defined for k = 5, skipped for k = {k}")),
            passes: false,
            from_four_into_five: 0,
            offending: vec![],
        });
    }
    let t = transition_matrix(labels, k, lag)?;
    let offending: Vec<(usize, usize, usize)> = labels
        .iter()
        .zip(&labels[lag..])
        .enumerate()
        .filter(|(_, (&a, &b))| b == 5 && a <= 3)
        .map(|(e, (&a, &b))| (e, a, b))
        .collect();
    let from_four = t.counts[3][4];
    Ok(ForbiddenTransitionReport {
        checked: true,
        notice: None,
        passes: offending.is_empty() && from_four > 0,
        from_four_into_five: from_four,
        offending,
    })
}

/// Chapman-Kolmogorov gap `max_ij |T(2 lag) - T(lag)^2|` over rows occupied
/// in both estimates. Zero for a chain that is Markov at this lag, up to
/// sampling noise.
pub fn markovianity_gap(labels: &[usize], k: usize, lag: usize) -> Result<f64> {
    check_labels(labels, k)?;
    if lag == 0 {
        return Err(Error::validation("lag must be at least 1"));
    }
    if labels.len() < 3 || labels.len() <= 2 * lag {
        return Err(Error::validation(format!(
            "sequence of {} epochs is too short for lag {lag}",
            labels.len()
        )));
    }
    let one = TransMatrix::from_counts(count_transitions(labels, k, lag), lag)?;
    let two = TransMatrix::from_counts(count_transitions(labels, k, 2 * lag), 2 * lag)?;
    let squared = one.values.matmul(&one.values);
    let mut gap = 0.0_f64;
    for i in 0..k {
        if one.empty_rows.contains(&i) || two.empty_rows.contains(&i) {
            continue;
        }
        for j in 0..k {
            gap = gap.max((two.values.get(i, j) - squared.get(i, j)).abs());
        }
    }
    Ok(gap)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn alternation_and_absorbing() {
        let alt: Vec<usize> = (0..10).map(|i| 1 + i % 2).collect();
        let t = transition_matrix(&alt, 2, 1).unwrap();
        assert_eq!(t.values.to_rows(), vec![vec![0.0, 1.0], vec![1.0, 0.0]]);
        assert_eq!(t.total(), 9);

        let t = transition_matrix(&[1, 1, 1, 1], 1, 1).unwrap();
        assert_eq!(t.values.to_rows(), vec![vec![1.0]]);
    }

    #[test]
    fn hand_counted() {
        let t = transition_matrix(&[1, 1, 2, 1], 2, 1).unwrap();
        assert_eq!(t.counts, vec![vec![1, 1], vec![1, 0]]);
        assert_eq!(t.values.to_rows(), vec![vec![0.5, 0.5], vec![1.0, 0.0]]);
    }

    #[test]
    fn unoccupied_state_rejected() {
        assert!(matches!(transition_matrix(&[1, 1, 3], 3, 1), Err(Error::Validation(_))));
        assert!(transition_matrix(&[1], 1, 1).is_err());
        assert!(transition_matrix(&[1, 2], 2, 0).is_err());
    }

    #[test]
    fn equilibrium_examples() {
        let t = TransMatrix::from_counts(vec![vec![3, 1], vec![1, 3]], 1).unwrap();
        let pi = equilibrium(&t).unwrap();
        assert!((pi[0] - 0.5).abs() < 1e-12 && (pi[1] - 0.5).abs() < 1e-12);

        // Periodic chain still converges through the lazy iteration.
        let alt = TransMatrix::from_counts(vec![vec![0, 4], vec![4, 0]], 1).unwrap();
        assert!((equilibrium(&alt).unwrap()[0] - 0.5).abs() < 1e-12);

        // Solve pi = pi T for a 3-state chain by hand: T = [[.5,.5,0],[.25,.5,.25],[0,.5,.5]]
        // gives pi = (1/4, 1/2, 1/4).
        let t = TransMatrix::from_counts(vec![vec![2, 2, 0], vec![1, 2, 1], vec![0, 2, 2]], 1).unwrap();
        let pi = equilibrium(&t).unwrap();
        for (got, want) in pi.iter().zip([0.25, 0.5, 0.25]) {
            assert!((got - want).abs() < 1e-10);
        }
    }

    #[test]
    fn reducible_chain_rejected() {
        let t = TransMatrix::from_counts(vec![vec![1, 0], vec![0, 1]], 1).unwrap();
        let err = equilibrium(&t).unwrap_err();
        assert!(err.to_string().contains("unreachable"), "{err}");
        // A transient state feeding one closed class is fine.
        let t = TransMatrix::from_counts(vec![vec![1, 1], vec![0, 2]], 1).unwrap();
        let pi = equilibrium(&t).unwrap();
        assert!(pi[0].abs() < 1e-10 && (pi[1] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn band_mass() {
        let bd = TransMatrix::from_counts(vec![vec![2, 1, 0], vec![1, 2, 1], vec![0, 3, 5]], 1).unwrap();
        assert!((tridiagonal_mass(&bd) - 1.0).abs() < 1e-15);
        let uniform = TransMatrix::from_counts(vec![vec![1; 5]; 5], 1).unwrap();
        assert!((tridiagonal_mass(&uniform) - 13.0 / 25.0).abs() < 1e-15);
    }

    #[test]
    fn band_mass_depends_on_label_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut s = vec![1usize];
        for _ in 0..5000 {
            let cur = *s.last().unwrap() as i64;
            let step: i64 = rng.random_range(-1..=1);
            s.push((cur + step).clamp(1, 5) as usize);
        }
        let sorted = tridiagonal_mass(&transition_matrix(&s, 5, 1).unwrap());
        assert!((sorted - 1.0).abs() < 1e-15);
        let shuffle = [0usize, 3, 1, 5, 2, 4];
        let shuffled: Vec<usize> = s.iter().map(|&l| shuffle[l]).collect();
        assert!(tridiagonal_mass(&transition_matrix(&shuffled, 5, 1).unwrap()) < 0.99);
    }

    #[test]
    fn forbidden_transitions() {
        let ok = [1, 2, 3, 4, 5, 4, 3, 2, 1];
        let r = forbidden_transition_check(&ok, 5, 1).unwrap();
        assert!(r.checked && r.passes);
        assert_eq!(r.from_four_into_five, 1);

        let bad = [1, 2, 5, 4, 5, 3, 2, 1];
        let r = forbidden_transition_check(&bad, 5, 1).unwrap();
        assert!(!r.passes);
        assert_eq!(r.offending, vec![(1, 2, 5)]);

        let r = forbidden_transition_check(&[1, 2, 3, 2], 3, 1).unwrap();
        assert!(!r.checked);
        assert!(r.notice.is_some());
    }

    #[test]
    fn markov_gap_cases() {
        // Deterministic cycle: T^2 = T(2) exactly.
        let cycle: Vec<usize> = (0..300).map(|i| 1 + i % 3).collect();
        assert_eq!(markovianity_gap(&cycle, 3, 1).unwrap(), 0.0);

        // Pattern 1,1,2 repeated is not Markov at lag 1. Row 1 of T(1) is
        // (1/2, 1/2), so T(1)^2 row 2 is (1/2, 1/2) while T(2) row 2 is (1, 0).
        let pattern: Vec<usize> = (0..3000).map(|i| [1, 1, 2][i % 3]).collect();
        let gap = markovianity_gap(&pattern, 2, 1).unwrap();
        assert!(gap > 0.2, "{gap}");
        assert!((gap - 0.5).abs() < 1e-3);

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let iid: Vec<usize> = (0..100_000).map(|_| rng.random_range(1..=4)).collect();
        assert!(markovianity_gap(&iid, 4, 1).unwrap() < 0.05);
    }

    #[test]
    fn equilibrium_matches_occupation_on_markov_data() {
        // Lazy random walk on 4 states.
        let p = [[0.7, 0.3, 0.0, 0.0], [0.2, 0.6, 0.2, 0.0], [0.0, 0.3, 0.5, 0.2], [0.0, 0.0, 0.4, 0.6]];
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut s = vec![1usize];
        for _ in 0..50_000 {
            let row = p[*s.last().unwrap() - 1];
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let next = row.iter().position(|&q| {
                acc += q;
                u < acc
            });
            s.push(next.unwrap_or(3) + 1);
        }
        let t = transition_matrix(&s, 4, 1).unwrap();
        let pi = equilibrium(&t).unwrap();
        let mut resid = 0.0;
        for j in 0..4 {
            let v: f64 = (0..4).map(|i| pi[i] * t.values.get(i, j)).sum();
            resid += (v - pi[j]).abs();
        }
        assert!(resid < 1e-10);
        for (j, &pj) in pi.iter().enumerate() {
            let freq = s.iter().filter(|&&l| l == j + 1).count() as f64 / s.len() as f64;
            assert!((pj - freq).abs() < 5.0 / (s.len() as f64).sqrt(), "{pj} vs {freq}");
        }
        for i in 0..4 {
            let row: f64 = (0..4).map(|j| t.values.get(i, j)).sum();
            assert!((row - 1.0).abs() < 1e-12);
        }
    }
}
