//! Optimal one-to-one matching of predicted query embeddings to targets.
//!
//! [`hungarian`] is the production solver (shortest augmenting paths with
//! dual potentials, O(m³)); [`brute_force_match`] enumerates permutations
//! and exists to check it.

use crate::error::{Error, Result};
use crate::tensor::{cosine_sim, UnitVector};

/// Square cost matrix, row-major. Rows are predictions, columns targets.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    m: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(m: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != m * m {
            return Err(Error::ShapeMismatch(format!(
                "cost matrix of order {m} needs {} entries, got {}",
                m * m,
                data.len()
            )));
        }
        if data.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(CostMatrix { m, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        if rows.iter().any(|r| r.len() != m) {
            return Err(Error::ShapeMismatch(
                "cost matrix rows must be square".into(),
            ));
        }
        CostMatrix::new(m, rows.concat())
    }

    /// `cost[i][j] = -cos(pred_i, target_j)`.
    pub fn neg_similarity(preds: &[UnitVector], targets: &[UnitVector]) -> Result<Self> {
        if preds.len() != targets.len() {
            return Err(Error::CountMismatch {
                expected: targets.len(),
                got: preds.len(),
            });
        }
        let mut data = Vec::with_capacity(preds.len() * targets.len());
        for p in preds {
            for t in targets {
                data.push(-cosine_sim(p, t)?);
            }
        }
        CostMatrix::new(preds.len(), data)
    }

    pub fn order(&self) -> usize {
        self.m
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.m + col]
    }

    /// Sum of `cost[i][perm[i]]`, accumulated in row order.
    pub fn total(&self, perm: &[usize]) -> f64 {
        perm.iter().enumerate().map(|(i, &j)| self.get(i, j)).sum()
    }
}

/// Bijection from prediction index to target index, plus its cost.
#[derive(Clone, Debug, PartialEq)]
pub struct Matching {
    pub assignment: Vec<usize>,
    pub total: f64,
}

pub fn hungarian(cost: &CostMatrix) -> Matching {
    let n = cost.order();
    if n == 0 {
        return Matching {
            assignment: Vec::new(),
            total: 0.0,
        };
    }
    // 1-based arrays; column 0 is the virtual start column.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut row_of_col = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of_col[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of_col[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost.get(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of_col[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of_col[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of_col[j0] = row_of_col[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        assignment[row_of_col[j] - 1] = j - 1;
    }
    let total = cost.total(&assignment);
    Matching { assignment, total }
}

pub fn match_predictions(preds: &[UnitVector], targets: &[UnitVector]) -> Result<Matching> {
    Ok(hungarian(&CostMatrix::neg_similarity(preds, targets)?))
}

/// Exhaustive minimum over all m! permutations (m <= 9). The first
/// permutation in lexicographic order wins ties.
pub fn brute_force_match(cost: &CostMatrix) -> Result<Matching> {
    let m = cost.order();
    if m > 9 {
        return Err(Error::TooLarge(m));
    }
    let mut perm: Vec<usize> = (0..m).collect();
    let mut best = Matching {
        assignment: perm.clone(),
        total: cost.total(&perm),
    };
    while next_permutation(&mut perm) {
        let total = cost.total(&perm);
        if total < best.total {
            best = Matching {
                assignment: perm.clone(),
                total,
            };
        }
    }
    Ok(best)
}

/// Lexicographic successor in place; false once the last permutation is reached.
pub(crate) fn next_permutation(p: &mut [usize]) -> bool {
    if p.len() < 2 {
        return false;
    }
    let mut i = p.len() - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = p.len() - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{normalize, RngStream};
    use rand::Rng;

    fn random_cost(rng: &mut impl Rng, m: usize) -> CostMatrix {
        CostMatrix::new(m, (0..m * m).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn two_by_two_examples() {
        let diag = CostMatrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let m = hungarian(&diag);
        assert_eq!(m.assignment, vec![0, 1]);
        assert_eq!(m.total, 0.0);

        let anti = CostMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let m = hungarian(&anti);
        assert_eq!(m.assignment, vec![1, 0]);
        assert_eq!(m.total, 0.0);
        assert_eq!(brute_force_match(&anti).unwrap(), m);
    }

    #[test]
    fn agrees_with_brute_force_on_6x6() {
        let mut rng = RngStream::new(6, 6).rng();
        for _ in 0..1000 {
            let c = random_cost(&mut rng, 6);
            assert_eq!(hungarian(&c).total, brute_force_match(&c).unwrap().total);
        }
    }

    #[test]
    fn unique_optimum_gives_identical_permutation() {
        // Integer costs with a planted optimum of strictly lower cost.
        let rows = vec![
            vec![9.0, 2.0, 7.0, 8.0],
            vec![6.0, 4.0, 3.0, 7.0],
            vec![5.0, 8.0, 1.0, 8.0],
            vec![7.0, 6.0, 9.0, 4.0],
        ];
        let c = CostMatrix::from_rows(&rows).unwrap();
        let bf = brute_force_match(&c).unwrap();
        assert_eq!(bf.assignment, vec![1, 0, 2, 3]);
        assert_eq!(hungarian(&c), bf);
    }

    #[test]
    fn degenerate_inputs() {
        let zeros = CostMatrix::new(4, vec![0.0; 16]).unwrap();
        assert_eq!(hungarian(&zeros).total, 0.0);
        assert_eq!(brute_force_match(&zeros).unwrap().total, 0.0);
        assert!(matches!(
            CostMatrix::new(2, vec![0.0, f64::NAN, 0.0, 0.0]),
            Err(Error::NonFinite)
        ));
        assert!(matches!(
            brute_force_match(&CostMatrix::new(10, vec![0.0; 100]).unwrap()),
            Err(Error::TooLarge(10))
        ));
        let one = CostMatrix::new(1, vec![0.3]).unwrap();
        assert_eq!(hungarian(&one).assignment, vec![0]);
    }

    #[test]
    fn matching_recovers_shuffle() {
        let basis: Vec<UnitVector> = (0..3)
            .map(|i| {
                let mut v = [0.0f32; 3];
                v[i] = 1.0;
                normalize(&v).unwrap()
            })
            .collect();
        let shuffle = [2usize, 0, 1];
        let preds: Vec<UnitVector> = shuffle.iter().map(|&i| basis[i].clone()).collect();
        let m = match_predictions(&preds, &basis).unwrap();
        assert_eq!(m.assignment, shuffle.to_vec());
        assert_eq!(m.total, -3.0);
        assert!(matches!(
            match_predictions(&preds[..2], &basis),
            Err(Error::CountMismatch { .. })
        ));
    }

    #[test]
    fn row_and_column_shifts() {
        let mut rng = RngStream::new(8, 0).rng();
        for _ in 0..200 {
            let m = rng.random_range(2..7);
            let c = random_cost(&mut rng, m);
            let base = hungarian(&c).total;
            let shift: f64 = rng.random_range(-2.0..2.0);
            let row = rng.random_range(0..m);
            let mut shifted = c.data.clone();
            for j in 0..m {
                shifted[row * m + j] += shift;
            }
            let s = hungarian(&CostMatrix::new(m, shifted).unwrap()).total;
            assert!((s - (base + shift)).abs() < 1e-12);

            let col = rng.random_range(0..m);
            let mut shifted = c.data.clone();
            for i in 0..m {
                shifted[i * m + col] += shift;
            }
            let s = hungarian(&CostMatrix::new(m, shifted).unwrap()).total;
            assert!((s - (base + shift)).abs() < 1e-12);

            let scale: f64 = rng.random_range(0.1..10.0);
            let scaled = CostMatrix::new(m, c.data.iter().map(|x| x * scale).collect()).unwrap();
            let s = hungarian(&scaled);
            assert!((s.total - base * scale).abs() < 1e-9);
            assert!((c.total(&s.assignment) - base).abs() < 1e-9);
        }
    }

    #[test]
    fn next_permutation_counts() {
        let mut p: Vec<usize> = (0..5).collect();
        let mut n = 1;
        while next_permutation(&mut p) {
            n += 1;
        }
        assert_eq!(n, 120);
    }
}
