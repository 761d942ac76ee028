//! Hidden-layer similarity matrices and their trained-minus-prior shifts.
//!
//! The sampled observable is the Gram matrix of hidden activations,
//! `O = Phi Phi^T / N1`, whose prior average is the analytic kernel (the
//! fully connected kernel, or the patch-averaged local kernel for shared and
//! unshared masks). After training, `delta K = <O> - K` carries the
//! finite-width corrections this crate predicts; its per-label-block means
//! and element variances are the quantities compared against theory.

use nalgebra::{DMatrix, DVector};

use crate::error::{CoreError, Result};

/// Similarity matrix `O = Phi Phi^T / N1` of one snapshot.
pub fn phi_similarity(phi: &DMatrix<f64>) -> DMatrix<f64> {
    let n1 = phi.ncols() as f64;
    let mut o = DMatrix::zeros(phi.nrows(), phi.nrows());
    o.gemm(n1.recip(), phi, &phi.transpose(), 0.0);
    o
}

/// Streaming average of similarity matrices over snapshots.
///
/// Accumulation is a plain sum in snapshot order, so merging accumulators is
/// associative and a fixed iteration order makes runs reproducible.
#[derive(Debug, Clone)]
pub struct SimilarityAccumulator {
    sum: DMatrix<f64>,
    count: usize,
}

impl SimilarityAccumulator {
    pub fn new(p: usize) -> Self {
        Self { sum: DMatrix::zeros(p, p), count: 0 }
    }

    /// Accumulate one snapshot given its hidden activations (`P x N1`).
    pub fn add_phi(&mut self, phi: &DMatrix<f64>) {
        let n1 = phi.ncols() as f64;
        self.sum.gemm(n1.recip(), phi, &phi.transpose(), 1.0);
        self.count += 1;
    }

    /// Accumulate an already-formed similarity matrix.
    pub fn add_similarity(&mut self, o: &DMatrix<f64>) {
        self.sum += o;
        self.count += 1;
    }

    pub fn merge(&mut self, other: &SimilarityAccumulator) {
        self.sum += &other.sum;
        self.count += other.count;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn mean(&self) -> Result<DMatrix<f64>> {
        if self.count == 0 {
            return Err(CoreError::numerical("similarity mean over zero snapshots"));
        }
        Ok(&self.sum / self.count as f64)
    }
}

/// Mean and population variance of the off-diagonal entries of one label
/// block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockStats {
    pub mean: f64,
    pub var: f64,
    pub count: usize,
}

/// Human-readable names of the label blocks, indexed by `y_mu + y_nu`.
pub const BLOCK_NAMES: [&str; 3] = ["00", "01", "11"];

fn block_index(labels: &DVector<f64>, mu: usize, nu: usize) -> Result<usize> {
    let s = labels[mu] + labels[nu];
    if (labels[mu] != 0.0 && labels[mu] != 1.0) || (labels[nu] != 0.0 && labels[nu] != 1.0) {
        return Err(CoreError::config(format!(
            "block statistics need binary labels, got {} and {}",
            labels[mu], labels[nu]
        )));
    }
    Ok(s as usize)
}

/// Per-block mean and variance of a symmetric matrix over unordered pattern
/// pairs `mu < nu`, grouped by the label pair (00, 01, 11). The diagonal
/// `mu = nu` is excluded. Empty blocks are reported as absent.
pub fn block_statistics(
    m: &DMatrix<f64>,
    labels: &DVector<f64>,
) -> Result<[Option<BlockStats>; 3]> {
    let p = labels.len();
    if m.nrows() != p || m.ncols() != p {
        return Err(CoreError::config(format!(
            "matrix is {}x{} but there are {p} labels",
            m.nrows(),
            m.ncols()
        )));
    }
    let mut sums = [0.0f64; 3];
    let mut sq = [0.0f64; 3];
    let mut counts = [0usize; 3];
    for mu in 0..p {
        for nu in mu + 1..p {
            let b = block_index(labels, mu, nu)?;
            let v = m[(mu, nu)];
            sums[b] += v;
            sq[b] += v * v;
            counts[b] += 1;
        }
    }
    let mut out = [None, None, None];
    for b in 0..3 {
        if counts[b] > 0 {
            let n = counts[b] as f64;
            let mean = sums[b] / n;
            let var = (sq[b] / n - mean * mean).max(0.0);
            out[b] = Some(BlockStats { mean, var, count: counts[b] });
        }
    }
    Ok(out)
}

/// Flattened off-diagonal elements of one label block, in a fixed order.
fn block_elements(m: &DMatrix<f64>, labels: &DVector<f64>, block: usize) -> Result<Vec<f64>> {
    let p = labels.len();
    let mut out = Vec::new();
    for mu in 0..p {
        for nu in mu + 1..p {
            if block_index(labels, mu, nu)? == block {
                out.push(m[(mu, nu)]);
            }
        }
    }
    Ok(out)
}

/// Block mean of the chain-ensemble average with a jackknife-over-chains
/// standard error.
#[derive(Debug, Clone, Copy)]
pub struct BlockMean {
    pub mean: f64,
    pub se: f64,
}

/// Debiased element variance of a label block measured from independent
/// chains, with a jackknife-over-chains standard error.
///
/// Each chain provides its own average of the observable; the ensemble mean
/// over `n_ch` chains has per-element variance `true_var + noise / n_ch`,
/// where `noise` is the per-chain Monte Carlo variance, estimated from the
/// between-chain spread. `value` subtracts that floor from the naive element
/// variance; `naive` and `noise_floor` are kept for diagnostics.
#[derive(Debug, Clone, Copy)]
pub struct BlockVariance {
    pub value: f64,
    pub se: f64,
    pub naive: f64,
    pub noise_floor: f64,
}

fn mean_of(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn population_variance(v: &[f64]) -> f64 {
    let m = mean_of(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).max(0.0)
}

fn gather_block_table(
    chains: &[DMatrix<f64>],
    labels: &DVector<f64>,
    block: usize,
) -> Result<Vec<Vec<f64>>> {
    if chains.len() < 2 {
        return Err(CoreError::config(
            "chain-ensemble statistics need at least two chains",
        ));
    }
    let mut table = Vec::with_capacity(chains.len());
    for chain in chains {
        let elems = block_elements(chain, labels, block)?;
        if elems.is_empty() {
            return Err(CoreError::config(format!(
                "label block {} is empty",
                BLOCK_NAMES[block]
            )));
        }
        table.push(elems);
    }
    Ok(table)
}

fn jackknife_se(leave_one_out: &[f64], full: f64) -> f64 {
    let n = leave_one_out.len() as f64;
    let mean = mean_of(leave_one_out);
    let _ = full;
    let ss: f64 = leave_one_out.iter().map(|v| (v - mean) * (v - mean)).sum();
    ((n - 1.0) / n * ss).sqrt()
}

/// Block mean over the chain ensemble. The jackknife runs over chains, so
/// correlations between elements of the same chain are handled honestly.
pub fn block_mean(
    chains: &[DMatrix<f64>],
    labels: &DVector<f64>,
    block: usize,
) -> Result<BlockMean> {
    let table = gather_block_table(chains, labels, block)?;
    let nch = table.len();
    let per_chain_mean: Vec<f64> = table.iter().map(|row| mean_of(row)).collect();
    let full = mean_of(&per_chain_mean);
    let loo: Vec<f64> = (0..nch)
        .map(|skip| {
            let s: f64 = per_chain_mean
                .iter()
                .enumerate()
                .filter(|(c, _)| *c != skip)
                .map(|(_, v)| v)
                .sum();
            s / (nch - 1) as f64
        })
        .collect();
    Ok(BlockMean { mean: full, se: jackknife_se(&loo, full) })
}

fn variance_estimate(table: &[Vec<f64>], skip: Option<usize>) -> (f64, f64, f64) {
    let nel = table[0].len();
    let chains: Vec<&Vec<f64>> = table
        .iter()
        .enumerate()
        .filter(|(c, _)| Some(*c) != skip)
        .map(|(_, row)| row)
        .collect();
    let nch = chains.len() as f64;
    let mut ensemble = vec![0.0f64; nel];
    for row in &chains {
        for (e, v) in row.iter().enumerate() {
            ensemble[e] += v;
        }
    }
    for v in &mut ensemble {
        *v /= nch;
    }
    let naive = population_variance(&ensemble);
    // Unbiased per-element between-chain variance, averaged over elements.
    let mut s2_sum = 0.0;
    for e in 0..nel {
        let mut ss = 0.0;
        for row in &chains {
            let d = row[e] - ensemble[e];
            ss += d * d;
        }
        s2_sum += ss / (nch - 1.0);
    }
    let noise_floor = s2_sum / nel as f64 / nch;
    (naive - noise_floor, naive, noise_floor)
}

/// Debiased block element variance; see [`BlockVariance`].
pub fn block_variance(
    chains: &[DMatrix<f64>],
    labels: &DVector<f64>,
    block: usize,
) -> Result<BlockVariance> {
    let table = gather_block_table(chains, labels, block)?;
    if table.len() < 3 {
        return Err(CoreError::config(
            "debiased block variance needs at least three chains for a jackknife",
        ));
    }
    let (value, naive, noise_floor) = variance_estimate(&table, None);
    let loo: Vec<f64> = (0..table.len())
        .map(|skip| variance_estimate(&table, Some(skip)).0)
        .collect();
    Ok(BlockVariance { value, se: jackknife_se(&loo, value), naive, noise_floor })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::seeded_rng;
    use approx::assert_relative_eq;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn similarity_matches_hand_computation_and_is_psd() {
        // Phi = [[1, 2], [3, 4]], N1 = 2: O = Phi Phi^T / 2.
        let phi = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let o = phi_similarity(&phi);
        assert_relative_eq!(o[(0, 0)], 2.5, epsilon = 1e-14);
        assert_relative_eq!(o[(0, 1)], 5.5, epsilon = 1e-14);
        assert_relative_eq!(o[(1, 0)], 5.5, epsilon = 1e-14);
        assert_relative_eq!(o[(1, 1)], 12.5, epsilon = 1e-14);
        // Gram matrices are symmetric positive semidefinite.
        let eig = o.symmetric_eigenvalues();
        assert!(eig.iter().all(|&l| l > -1e-12));
    }

    #[test]
    fn accumulator_averages_and_merges() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let b = DMatrix::from_row_slice(2, 2, &[3.0, 2.0, 2.0, 3.0]);
        let mut acc = SimilarityAccumulator::new(2);
        assert!(acc.mean().is_err());
        acc.add_similarity(&a);
        acc.add_similarity(&b);
        let m = acc.mean().unwrap();
        assert_relative_eq!(m[(0, 0)], 2.0, epsilon = 1e-14);
        assert_relative_eq!(m[(0, 1)], 1.0, epsilon = 1e-14);

        let mut left = SimilarityAccumulator::new(2);
        left.add_similarity(&a);
        let mut right = SimilarityAccumulator::new(2);
        right.add_similarity(&b);
        left.merge(&right);
        assert_eq!(left.count(), 2);
        assert_eq!(left.mean().unwrap(), m);
    }

    #[test]
    fn single_class_populates_one_block() {
        let m = DMatrix::from_element(3, 3, 1.5);
        let labels = DVector::from_vec(vec![0.0, 0.0, 0.0]);
        let stats = block_statistics(&m, &labels).unwrap();
        assert!(stats[0].is_some());
        assert!(stats[1].is_none());
        assert!(stats[2].is_none());
        let b = stats[0].unwrap();
        assert_eq!(b.count, 3);
        assert_relative_eq!(b.mean, 1.5, epsilon = 1e-14);
        assert_relative_eq!(b.var, 0.0, epsilon = 1e-14);
    }

    #[test]
    fn constant_matrix_gives_constant_means() {
        let m = DMatrix::from_element(4, 4, -0.7);
        let labels = DVector::from_vec(vec![0.0, 1.0, 0.0, 1.0]);
        let stats = block_statistics(&m, &labels).unwrap();
        for b in stats.iter() {
            let b = b.unwrap();
            assert_relative_eq!(b.mean, -0.7, epsilon = 1e-14);
            assert_relative_eq!(b.var, 0.0, epsilon = 1e-14);
        }
        // 00: (0,2); 01: (0,1), (0,3), (1,2), (2,3); 11: (1,3).
        assert_eq!(stats[0].unwrap().count, 1);
        assert_eq!(stats[1].unwrap().count, 4);
        assert_eq!(stats[2].unwrap().count, 1);
    }

    #[test]
    fn block_statistics_match_hand_computation() {
        let mut m = DMatrix::zeros(3, 3);
        m[(0, 1)] = 2.0;
        m[(1, 0)] = 2.0;
        m[(0, 2)] = 4.0;
        m[(2, 0)] = 4.0;
        m[(1, 2)] = 9.0;
        m[(2, 1)] = 9.0;
        // Diagonal values must be ignored entirely.
        m[(0, 0)] = 100.0;
        m[(1, 1)] = 100.0;
        m[(2, 2)] = 100.0;
        let labels = DVector::from_vec(vec![0.0, 1.0, 1.0]);
        let stats = block_statistics(&m, &labels).unwrap();
        assert!(stats[0].is_none());
        let b01 = stats[1].unwrap();
        assert_eq!(b01.count, 2);
        assert_relative_eq!(b01.mean, 3.0, epsilon = 1e-14);
        assert_relative_eq!(b01.var, 1.0, epsilon = 1e-14);
        let b11 = stats[2].unwrap();
        assert_eq!(b11.count, 1);
        assert_relative_eq!(b11.mean, 9.0, epsilon = 1e-14);
    }

    #[test]
    fn non_binary_labels_rejected() {
        let m = DMatrix::zeros(2, 2);
        let labels = DVector::from_vec(vec![0.0, 0.5]);
        assert!(block_statistics(&m, &labels).is_err());
    }

    #[test]
    fn fc_theory_block_11_mean_is_readout_term_for_centered_kernel() {
        // Build a kernel whose 11-block off-diagonal entries average to zero;
        // the predicted shift's 11-block mean then equals lambda1/(qbar*N1).
        let labels = DVector::from_vec(vec![0.0, 1.0, 1.0, 1.0]);
        let mut k = DMatrix::from_diagonal_element(4, 4, 1.0);
        // Pattern indices 1, 2, 3 carry label one; make their off-diagonal
        // entries sum to zero while keeping the matrix positive definite.
        let pairs = [(1usize, 2usize, 0.2), (1, 3, -0.15), (2, 3, -0.05)];
        for &(a, b, v) in &pairs {
            k[(a, b)] = v;
            k[(b, a)] = v;
        }
        k[(0, 1)] = 0.1;
        k[(1, 0)] = 0.1;
        let (qbar, lambda1, n1) = (2.0, 3.0, 50usize);
        let y = labels.clone();
        let dk = crate::predictor::theory_delta_k_fc(&k, &y, qbar, lambda1, n1, crate::data::Beta::Infinite)
            .unwrap();
        let stats = block_statistics(&dk.entries, &labels).unwrap();
        let b11 = stats[2].unwrap();
        assert_relative_eq!(b11.mean, lambda1 / (qbar * n1 as f64), epsilon = 1e-12);
    }

    #[test]
    fn debiased_variance_recovers_signal_under_noise() {
        // True signal: a fixed random block structure. Chains observe the
        // signal plus independent noise much larger than the signal spread.
        let p = 40;
        let nch = 8;
        let labels = DVector::from_fn(p, |i, _| (i % 2) as f64);
        let mut rng = seeded_rng(31);
        let mut signal = DMatrix::zeros(p, p);
        let signal_sd = 0.01;
        for mu in 0..p {
            for nu in mu + 1..p {
                let z: f64 = StandardNormal.sample(&mut rng);
                signal[(mu, nu)] = signal_sd * z;
                signal[(nu, mu)] = signal[(mu, nu)];
            }
        }
        let noise_sd = 0.1;
        let chains: Vec<DMatrix<f64>> = (0..nch)
            .map(|_| {
                let mut m = signal.clone();
                for mu in 0..p {
                    for nu in mu + 1..p {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        m[(mu, nu)] += noise_sd * z;
                        m[(nu, mu)] = m[(mu, nu)];
                    }
                }
                m
            })
            .collect();

        let truth = block_statistics(&signal, &labels).unwrap()[1].unwrap().var;
        let est = block_variance(&chains, &labels, 1).unwrap();
        // The naive estimate is dominated by the noise floor noise^2/nch,
        // roughly 12x the signal variance here; the debiased one is not.
        assert!(est.naive > 5.0 * truth, "naive {} vs truth {truth}", est.naive);
        assert!(
            (est.value - truth).abs() < 4.0 * est.se,
            "debiased {} +- {} vs truth {truth}",
            est.value,
            est.se
        );
        assert!(est.noise_floor > 0.0);

        let bm = block_mean(&chains, &labels, 1).unwrap();
        let truth_mean = block_statistics(&signal, &labels).unwrap()[1].unwrap().mean;
        assert!(
            (bm.mean - truth_mean).abs() < 4.0 * bm.se,
            "mean {} +- {} vs truth {truth_mean}",
            bm.mean,
            bm.se
        );
    }

    #[test]
    fn chain_requirements_enforced() {
        let labels = DVector::from_vec(vec![0.0, 1.0]);
        let one = vec![DMatrix::zeros(2, 2)];
        assert!(block_mean(&one, &labels, 1).is_err());
        let two = vec![DMatrix::zeros(2, 2), DMatrix::zeros(2, 2)];
        assert!(block_variance(&two, &labels, 1).is_err());
        // Block 00 is empty for these labels.
        let three = vec![
            DMatrix::zeros(2, 2),
            DMatrix::zeros(2, 2),
            DMatrix::zeros(2, 2),
        ];
        assert!(block_variance(&three, &labels, 0).is_err());
    }
}
