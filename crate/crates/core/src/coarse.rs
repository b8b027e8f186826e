//! Partitions of the stock universe and block averaging of correlation
//! matrices.
//!
//! A diagonal block averages `C_ij` over ordered pairs `i != j` inside the
//! block; an off-diagonal block averages over all `i in a, j in b`. The
//! ordered pair counts are kept alongside the averages so the full-matrix
//! mean off-diagonal correlation can be recovered exactly.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::correlation::CorrMatrix;
use crate::ingest::{Sector, SectorMap};
use crate::util::csv_error;
use crate::{Error, Exec, Result, SquareMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartitionKind {
    Sectorial,
    Choice1,
    Choice2,
    /// Random equal split (the third two-block choice).
    Random,
}

impl PartitionKind {
    pub const ALL: [PartitionKind; 4] = [
        PartitionKind::Sectorial,
        PartitionKind::Choice1,
        PartitionKind::Choice2,
        PartitionKind::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PartitionKind::Sectorial => "sectorial",
            PartitionKind::Choice1 => "choice1",
            PartitionKind::Choice2 => "choice2",
            PartitionKind::Random => "random",
        }
    }

    pub fn is_two_block(self) -> bool {
        self != PartitionKind::Sectorial
    }
}

impl fmt::Display for PartitionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PartitionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sectorial" | "cg" => Ok(PartitionKind::Sectorial),
            "choice1" => Ok(PartitionKind::Choice1),
            "choice2" => Ok(PartitionKind::Choice2),
            "random" | "choice3" => Ok(PartitionKind::Random),
            other => Err(Error::validation(format!("unknown partition kind `{other}`"))),
        }
    }
}

/// Disjoint blocks of stock indices covering `0..n`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    blocks: Vec<Vec<usize>>,
    labels: Vec<String>,
    kind: PartitionKind,
    block_of: Vec<usize>,
}

impl Partition {
    /// Validates disjointness, coverage of `0..n`, non-empty blocks and the
    /// block count implied by `kind`.
    pub fn new(blocks: Vec<Vec<usize>>, labels: Vec<String>, kind: PartitionKind) -> Result<Self> {
        if labels.len() != blocks.len() {
            return Err(Error::validation("one label per block required"));
        }
        let expected = if kind == PartitionKind::Sectorial { 10 } else { 2 };
        if blocks.len() != expected {
            return Err(Error::validation(format!(
                "{kind} partition needs {expected} blocks, got {}",
                blocks.len()
            )));
        }
        if let Some(b) = blocks.iter().position(Vec::is_empty) {
            return Err(Error::validation(format!("{kind} block `{}` is empty", labels[b])));
        }
        let n: usize = blocks.iter().map(Vec::len).sum();
        let mut block_of = vec![usize::MAX; n];
        for (b, members) in blocks.iter().enumerate() {
            for &i in members {
                if i >= n || block_of[i] != usize::MAX {
                    return Err(Error::validation(format!(
                        "{kind} partition: index {i} out of range or in two blocks"
                    )));
                }
                block_of[i] = b;
            }
        }
        if kind == PartitionKind::Random && blocks[0].len().abs_diff(blocks[1].len()) > 1 {
            return Err(Error::validation("random split block sizes differ by more than one"));
        }
        Ok(Self {
            blocks,
            labels,
            kind,
            block_of,
        })
    }

    pub fn blocks(&self) -> &[Vec<usize>] {
        &self.blocks
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn kind(&self) -> PartitionKind {
        self.kind
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Number of stocks covered.
    pub fn n_items(&self) -> usize {
        self.block_of.len()
    }

    pub fn block_of(&self, item: usize) -> usize {
        self.block_of[item]
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.blocks.iter().map(Vec::len).collect()
    }
}

/// One block per sector, in canonical code order.
pub fn sectorial_partition(sectors: &SectorMap) -> Result<Partition> {
    let mut blocks = vec![Vec::new(); Sector::ALL.len()];
    for (i, s) in sectors.sectors().iter().enumerate() {
        blocks[s.index()].push(i);
    }
    if let Some(empty) = blocks.iter().position(Vec::is_empty) {
        return Err(Error::validation(format!(
            "sector {} has no stocks; the sectorial partition needs all ten",
            Sector::ALL[empty]
        )));
    }
    let labels = Sector::ALL.iter().map(|s| s.code().to_string()).collect();
    Partition::new(blocks, labels, PartitionKind::Sectorial)
}

/// Sector membership of the first block of the two sector-based choices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EcgMembership {
    pub choice1: Vec<Sector>,
    pub choice2: Vec<Sector>,
}

impl Default for EcgMembership {
    fn default() -> Self {
        Self {
            // Sectors with strong intra-sector correlation.
            choice1: vec![Sector::EG, Sector::FN, Sector::TC, Sector::UT],
            // Sectors with strong inter-sector correlation.
            choice2: vec![Sector::CD, Sector::FN, Sector::ID],
        }
    }
}

/// Two-block partition for choice 1, 2 or 3 with the default membership.
pub fn ecg_partition(choice: u8, sectors: &SectorMap, seed: u64) -> Result<Partition> {
    ecg_partition_with(choice, sectors, seed, &EcgMembership::default())
}

pub fn ecg_partition_with(
    choice: u8,
    sectors: &SectorMap,
    seed: u64,
    membership: &EcgMembership,
) -> Result<Partition> {
    let (kind, chosen) = match choice {
        1 => (PartitionKind::Choice1, &membership.choice1),
        2 => (PartitionKind::Choice2, &membership.choice2),
        3 => return random_split(sectors.len(), seed, 0),
        other => return Err(Error::validation(format!("ECG choice must be 1, 2 or 3, got {other}"))),
    };
    let (a, b): (Vec<usize>, Vec<usize>) = (0..sectors.len()).partition(|&i| chosen.contains(&sectors.sectors()[i]));
    let name = chosen.iter().map(|s| s.code()).collect::<Vec<_>>().join("+");
    Partition::new(vec![a, b], vec![name, "rest".into()], kind)
}

/// Uniform equal split of `0..n`: a random permutation cut into sizes
/// `ceil(n/2)` and `floor(n/2)`. `stream` selects an independent ChaCha
/// stream under the same seed.
pub fn random_split(n: usize, seed: u64, stream: u64) -> Result<Partition> {
    if n < 2 {
        return Err(Error::validation(format!("random split needs at least 2 stocks, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    let cut = n.div_ceil(2);
    let mut a = perm[..cut].to_vec();
    let mut b = perm[cut..].to_vec();
    a.sort_unstable();
    b.sort_unstable();
    Partition::new(vec![a, b], vec!["A".into(), "B".into()], PartitionKind::Random)
}

/// `count` independent equal splits. Member `m` draws from stream `m` of the
/// seeded generator, so the ensemble is the same however it is computed.
pub fn random_partition_ensemble(n: usize, count: usize, seed: u64) -> Result<Vec<Partition>> {
    random_partition_ensemble_with(n, count, seed, Exec::default())
}

pub fn random_partition_ensemble_with(n: usize, count: usize, seed: u64, exec: Exec) -> Result<Vec<Partition>> {
    if count == 0 {
        return Err(Error::validation("ensemble count must be at least 1"));
    }
    exec.try_map_range(count, |m| random_split(n, seed, m as u64))
}

/// Two-block partition from a `ticker,block` CSV with block in {0, 1}.
pub fn load_partition_file(path: impl AsRef<Path>, tickers: &[String], kind: PartitionKind) -> Result<Partition> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_partition_file(file, &path.display().to_string(), tickers, kind)
}

pub fn read_partition_file<R: Read>(
    reader: R,
    source_name: &str,
    tickers: &[String],
    kind: PartitionKind,
) -> Result<Partition> {
    if !kind.is_two_block() {
        return Err(Error::validation("partition files describe two-block partitions only"));
    }
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut assignment = BTreeMap::new();
    for record in rdr.records() {
        let record = record.map_err(|e| csv_error(source_name, e))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let block = match record.get(1) {
            Some("0") => 0,
            Some("1") => 1,
            other => {
                return Err(Error::Parse {
                    source_name: source_name.into(),
                    line,
                    message: format!("block must be 0 or 1, got {other:?}"),
                })
            }
        };
        assignment.insert(record.get(0).unwrap_or_default().to_string(), block);
    }
    let mut blocks = vec![Vec::new(), Vec::new()];
    for (i, t) in tickers.iter().enumerate() {
        let b = assignment
            .get(t)
            .ok_or_else(|| Error::validation(format!("{source_name}: ticker `{t}` has no block")))?;
        blocks[*b].push(i);
    }
    Partition::new(blocks, vec!["block0".into(), "block1".into()], kind)
}

/// Block-averaged matrix with the ordered pair count behind every entry.
#[derive(Debug, Clone, PartialEq)]
pub struct CgMatrix {
    pub values: SquareMatrix,
    /// Row-major `B x B`; `n_a (n_a - 1)` on the diagonal, `n_a n_b` off it.
    pub pair_counts: Vec<u64>,
    pub epoch_index: usize,
    pub kind: PartitionKind,
}

impl CgMatrix {
    pub fn dim(&self) -> usize {
        self.values.dim()
    }

    pub fn pair_count(&self, a: usize, b: usize) -> u64 {
        self.pair_counts[a * self.dim() + b]
    }
}

pub fn block_average(corr: &CorrMatrix, partition: &Partition) -> Result<CgMatrix> {
    block_average_matrix(&corr.values, partition, corr.epoch_index)
}

/// Block average of any square matrix; its diagonal is never read.
pub fn block_average_matrix(c: &SquareMatrix, partition: &Partition, epoch_index: usize) -> Result<CgMatrix> {
    let n = c.dim();
    if partition.n_items() != n {
        return Err(Error::validation(format!(
            "partition covers {} stocks but the matrix is {n}x{n}",
            partition.n_items()
        )));
    }
    let nb = partition.n_blocks();
    let sizes = partition.sizes();
    if let Some(b) = sizes.iter().position(|&s| s < 2) {
        return Err(Error::validation(format!(
            "{} block `{}` has a single stock; its diagonal average is undefined",
            partition.kind(),
            partition.labels()[b]
        )));
    }

    // Each unordered pair (i<j) contributes to both ordered cells.
    let mut sums = vec![0.0; nb * nb];
    for i in 0..n {
        let a = partition.block_of(i);
        let row = c.row(i);
        for (j, &v) in row.iter().enumerate().skip(i + 1) {
            let b = partition.block_of(j);
            if a == b {
                sums[a * nb + a] += 2.0 * v;
            } else {
                sums[a * nb + b] += v;
                sums[b * nb + a] += v;
            }
        }
    }
    let mut pair_counts = vec![0u64; nb * nb];
    let mut values = SquareMatrix::zeros(nb);
    for a in 0..nb {
        for b in 0..nb {
            let cnt = if a == b {
                sizes[a] * (sizes[a] - 1)
            } else {
                sizes[a] * sizes[b]
            } as u64;
            pair_counts[a * nb + b] = cnt;
            values.set(a, b, sums[a * nb + b] / cnt as f64);
        }
    }
    Ok(CgMatrix {
        values,
        pair_counts,
        epoch_index,
        kind: partition.kind(),
    })
}

/// `(x, y, z)` of a two-block matrix: first diagonal block, cross block,
/// second diagonal block.
pub fn ecg_elements(cg: &CgMatrix) -> Result<(f64, f64, f64)> {
    if cg.dim() != 2 {
        return Err(Error::validation(format!(
            "ECG elements need a 2x2 matrix, got {0}x{0}",
            cg.dim()
        )));
    }
    Ok((cg.values.get(0, 0), cg.values.get(0, 1), cg.values.get(1, 1)))
}

/// `(x, y, z)` of a matrix under every member of a two-block ensemble.
pub fn ensemble_elements(c: &SquareMatrix, ensemble: &[Partition], exec: Exec) -> Result<Vec<(f64, f64, f64)>> {
    exec.try_map_range(ensemble.len(), |m| {
        ecg_elements(&block_average_matrix(c, &ensemble[m], 0)?)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn corr(values: SquareMatrix) -> CorrMatrix {
        let d = chrono::NaiveDate::from_ymd_opt(2020, 1, 1).unwrap();
        CorrMatrix {
            values,
            epoch_index: 3,
            epoch_start: d,
            epoch_end: d,
            degenerate: vec![],
        }
    }

    fn two_block(a: Vec<usize>, b: Vec<usize>) -> Partition {
        Partition::new(vec![a, b], vec!["A".into(), "B".into()], PartitionKind::Choice1).unwrap()
    }

    fn sector_map(codes: &[Sector]) -> SectorMap {
        let tickers: Vec<String> = (0..codes.len()).map(|i| format!("T{i}")).collect();
        let map = tickers.iter().cloned().zip(codes.iter().copied()).collect();
        SectorMap::from_assignments(&tickers, &map).unwrap()
    }

    #[test]
    fn constant_matrix_averages_to_constant() {
        let c = SquareMatrix::from_fn(4, |i, j| if i == j { 1.0 } else { 0.37 });
        let cg = block_average(&corr(c), &two_block(vec![0, 2], vec![1, 3])).unwrap();
        for v in cg.values.as_slice() {
            assert!((v - 0.37).abs() < 1e-15);
        }
        assert_eq!(cg.epoch_index, 3);
    }

    #[test]
    fn hand_built_blocks() {
        let c = SquareMatrix::from_rows(&[
            vec![1.0, 0.2, 0.4, 0.4],
            vec![0.2, 1.0, 0.4, 0.4],
            vec![0.4, 0.4, 1.0, 0.6],
            vec![0.4, 0.4, 0.6, 1.0],
        ])
        .unwrap();
        let cg = block_average(&corr(c), &two_block(vec![0, 1], vec![2, 3])).unwrap();
        assert!((cg.values.get(0, 0) - 0.2).abs() < 1e-15);
        assert!((cg.values.get(0, 1) - 0.4).abs() < 1e-15);
        assert!((cg.values.get(1, 0) - 0.4).abs() < 1e-15);
        assert!((cg.values.get(1, 1) - 0.6).abs() < 1e-15);
        assert_eq!(cg.pair_counts, vec![2, 4, 4, 2]);
        let (x, y, z) = ecg_elements(&cg).unwrap();
        assert_eq!((x, y, z), (cg.values.get(0, 0), cg.values.get(0, 1), cg.values.get(1, 1)));
    }

    #[test]
    fn identity_averages_to_zero() {
        let cg = block_average(&corr(SquareMatrix::identity(5)), &two_block(vec![0, 1, 4], vec![2, 3])).unwrap();
        assert!(cg.values.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn singleton_diagonal_block_is_an_error() {
        let p = two_block(vec![0], vec![1, 2]);
        let err = block_average(&corr(SquareMatrix::identity(3)), &p).unwrap_err();
        assert!(matches!(err, Error::Validation(ref m) if m.contains("`A`")), "{err}");
    }

    #[test]
    fn ecg_elements_rejects_non_2x2() {
        let cg = CgMatrix {
            values: SquareMatrix::zeros(3),
            pair_counts: vec![0; 9],
            epoch_index: 0,
            kind: PartitionKind::Sectorial,
        };
        assert!(ecg_elements(&cg).is_err());
    }

    #[test]
    fn sectorial_partition_canonical_order() {
        let mut codes = Sector::ALL.to_vec();
        codes.reverse();
        let p = sectorial_partition(&sector_map(&codes)).unwrap();
        assert_eq!(p.n_blocks(), 10);
        assert_eq!(p.blocks()[0], vec![9]);
        assert_eq!(p.labels()[0], "CD");
        assert_eq!(p.labels()[9], "UT");
        assert!(p.blocks().iter().all(|b| b.len() == 1));

        let err = sectorial_partition(&sector_map(&[Sector::CD, Sector::FN])).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn ecg_choices_follow_membership() {
        let codes: Vec<Sector> = Sector::ALL.iter().chain(Sector::ALL.iter()).copied().collect();
        let map = sector_map(&codes);
        let p1 = ecg_partition(1, &map, 0).unwrap();
        let in_a: Vec<Sector> = p1.blocks()[0].iter().map(|&i| codes[i]).collect();
        assert!(in_a.iter().all(|s| [Sector::EG, Sector::FN, Sector::TC, Sector::UT].contains(s)));
        assert_eq!(p1.blocks()[0].len(), 8);
        assert_eq!(p1.kind(), PartitionKind::Choice1);

        let p2 = ecg_partition(2, &map, 0).unwrap();
        let in_a: Vec<Sector> = p2.blocks()[0].iter().map(|&i| codes[i]).collect();
        assert!(in_a.iter().all(|s| [Sector::CD, Sector::FN, Sector::ID].contains(s)));
        assert_eq!(p2.blocks()[0].len(), 6);

        let alt = EcgMembership {
            choice2: vec![Sector::CD, Sector::FN, Sector::IT],
            ..Default::default()
        };
        let p2b = ecg_partition_with(2, &map, 0, &alt).unwrap();
        assert!(p2b.blocks()[0].iter().any(|&i| codes[i] == Sector::IT));

        assert!(ecg_partition(4, &map, 0).is_err());
    }

    #[test]
    fn random_split_is_seeded() {
        let codes = [Sector::CD, Sector::CS, Sector::EG, Sector::FN];
        let a = ecg_partition(3, &sector_map(&codes), 11).unwrap();
        let b = ecg_partition(3, &sector_map(&codes), 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.sizes(), vec![2, 2]);
        assert_eq!(a.kind(), PartitionKind::Random);
        assert_eq!(random_split(7, 1, 0).unwrap().sizes(), vec![4, 3]);
    }

    #[test]
    fn ensemble_properties() {
        let e = random_partition_ensemble(322, 1000, 5).unwrap();
        assert_eq!(e.len(), 1000);
        assert!(e.iter().all(|p| p.sizes() == vec![161, 161]));
        let distinct: std::collections::HashSet<_> = e.iter().map(|p| p.blocks()[0].clone()).collect();
        assert_eq!(distinct.len(), 1000);
        assert_eq!(e, random_partition_ensemble_with(322, 1000, 5, Exec::Sequential).unwrap());

        let forced = random_partition_ensemble(2, 1, 9).unwrap();
        assert_eq!(forced[0].sizes(), vec![1, 1]);
        let mut members = forced[0].blocks().concat();
        members.sort();
        assert_eq!(members, vec![0, 1]);
    }

    #[test]
    fn partition_file() {
        let tickers = vec!["A".to_string(), "B".into(), "C".into(), "D".into()];
        let p = read_partition_file(
            "ticker,block\nA,1\nB,0\nC,1\nD,0\n".as_bytes(),
            "p.csv",
            &tickers,
            PartitionKind::Choice2,
        )
        .unwrap();
        assert_eq!(p.blocks(), &[vec![1, 3], vec![0, 2]]);
        assert!(read_partition_file("ticker,block\nA,2\n".as_bytes(), "p.csv", &tickers, PartitionKind::Choice2).is_err());
        assert!(read_partition_file("ticker,block\nA,1\n".as_bytes(), "p.csv", &tickers, PartitionKind::Choice2).is_err());
    }

    proptest! {
        #[test]
        fn within_block_permutation_invariance(n in 4usize..20, seed in 0u64..1000) {
            let values = SquareMatrix::from_fn(n, |i, j| if i == j { 1.0 } else { (((i * 7 + j * 7) % 13) as f64 / 13.0) - 0.5 });
            let p = random_split(n, seed, 0).unwrap();
            let base = block_average_matrix(&values, &p, 0).unwrap();
            // Reverse the order of members inside each block and relabel.
            let mut perm: Vec<usize> = (0..n).collect();
            for b in p.blocks() {
                for (k, &i) in b.iter().enumerate() {
                    perm[i] = b[b.len() - 1 - k];
                }
            }
            let permuted = SquareMatrix::from_fn(n, |i, j| values.get(perm[i], perm[j]));
            let other = block_average_matrix(&permuted, &p, 0).unwrap();
            for (a, b) in base.values.as_slice().iter().zip(other.values.as_slice()) {
                prop_assert!((a - b).abs() < 1e-14);
            }
        }
    }
}
