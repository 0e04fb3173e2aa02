//! Kernel functions, bandwidth selection, and row-stochastic weight matrices.

use serde::{Deserialize, Serialize};

use crate::data::PrivateSignals;
use crate::error::{Error, Result};

/// Scalar kernel applied to `|s_i - s_j| / h`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Kernel {
    /// `exp(-u^2 / 2)`; strictly positive, so rows never degenerate.
    Gaussian,
    /// `0.75 (1 - u^2)` on `|u| < 1`, zero outside.
    Epanechnikov,
}

impl Kernel {
    pub fn eval(&self, u: f64) -> f64 {
        match self {
            Kernel::Gaussian => (-0.5 * u * u).exp(),
            Kernel::Epanechnikov => {
                if u.abs() >= 1.0 {
                    0.0
                } else {
                    0.75 * (1.0 - u * u)
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum BandwidthRule {
    Fixed(f64),
    /// `1.06 * sigma * k^(-1/5)` with `sigma` the pooled sample standard
    /// deviation of all signal coordinates.
    Silverman,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kernel: Kernel,
    pub bandwidth: BandwidthRule,
}

impl KernelSpec {
    pub fn validate(&self) -> Result<()> {
        if let BandwidthRule::Fixed(h) = self.bandwidth {
            if !(h > 0.0) || !h.is_finite() {
                return Err(Error::InvalidArgument(
                    "fixed bandwidth must be strictly positive".into(),
                ));
            }
        }
        Ok(())
    }
}

/// What a row-stochastic matrix represents; the row-sum tolerance enforced at
/// construction depends on it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WeightKind {
    /// Kernel weights `w`; rows sum to 1 within 1e-12 by construction.
    KernelWeights,
    /// Aggregation probabilities `p`; rows sum to 1 within the solver
    /// tolerance 1e-8.
    AggregationProbabilities,
}

impl WeightKind {
    fn row_sum_tolerance(self) -> f64 {
        match self {
            WeightKind::KernelWeights => 1e-12,
            WeightKind::AggregationProbabilities => 1e-8,
        }
    }
}

/// A `k x k` row-stochastic matrix with nonnegative entries, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightMatrix {
    kind: WeightKind,
    k: usize,
    entries: Vec<f64>,
}

impl WeightMatrix {
    pub fn from_rows(kind: WeightKind, rows: Vec<Vec<f64>>) -> Result<Self> {
        let k = rows.len();
        if k == 0 {
            return Err(Error::InvalidArgument("weight matrix needs k >= 1".into()));
        }
        let tol = kind.row_sum_tolerance();
        let mut entries = Vec::with_capacity(k * k);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != k {
                return Err(Error::InvalidArgument(format!(
                    "row {i} has length {}, expected {k}",
                    row.len()
                )));
            }
            let mut sum = 0.0;
            for &v in row {
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::InvalidArgument(format!(
                        "row {i} contains a negative or non-finite entry"
                    )));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > tol {
                return Err(Error::InvalidArgument(format!(
                    "row {i} sums to {sum}, outside tolerance {tol}"
                )));
            }
            entries.extend_from_slice(row);
        }
        Ok(WeightMatrix { kind, k, entries })
    }

    pub fn uniform(k: usize, kind: WeightKind) -> Self {
        WeightMatrix {
            kind,
            k,
            entries: vec![1.0 / k as f64; k * k],
        }
    }

    pub fn identity(k: usize, kind: WeightKind) -> Self {
        let mut entries = vec![0.0; k * k];
        for i in 0..k {
            entries[i * k + i] = 1.0;
        }
        WeightMatrix { kind, k, entries }
    }

    pub fn kind(&self) -> WeightKind {
        self.kind
    }

    pub fn size(&self) -> usize {
        self.k
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.k + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.k..(i + 1) * self.k]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.entries.chunks(self.k)
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.rows().map(|r| r.iter().sum()).collect()
    }
}

/// Silverman's rule on the pooled signal coordinates.
pub(crate) fn silverman_bandwidth(signals: &PrivateSignals) -> Result<f64> {
    let k = signals.count();
    if k < 2 {
        return Err(Error::BandwidthUndefined(
            "silverman rule needs k >= 2 signals".into(),
        ));
    }
    let pooled: Vec<f64> = signals.iter().flat_map(|s| s.iter().copied()).collect();
    let m = pooled.len() as f64;
    let mean = pooled.iter().sum::<f64>() / m;
    let var = pooled.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m - 1.0);
    let sd = var.sqrt();
    if !(sd > 0.0) {
        return Err(Error::BandwidthUndefined(
            "silverman rule is undefined for identical signals".into(),
        ));
    }
    Ok(1.06 * sd * (k as f64).powf(-0.2))
}

/// Kernel weight matrix of the private signals: row `i` holds the normalized
/// kernel similarities of `s_i` to every signal.
pub fn kernel_weights(signals: &PrivateSignals, spec: &KernelSpec) -> Result<WeightMatrix> {
    spec.validate()?;
    let k = signals.count();
    let h = match spec.bandwidth {
        BandwidthRule::Fixed(h) => h,
        BandwidthRule::Silverman => silverman_bandwidth(signals)?,
    };
    let mut rows = Vec::with_capacity(k);
    for i in 0..k {
        let si = signals.get(i);
        let mut row: Vec<f64> = (0..k)
            .map(|j| {
                let sj = signals.get(j);
                let dist = si
                    .iter()
                    .zip(sj)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                spec.kernel.eval(dist / h)
            })
            .collect();
        normalize_row(&mut row, i)?;
        rows.push(row);
    }
    WeightMatrix::from_rows(WeightKind::KernelWeights, rows)
}

/// Normalizes a row of nonnegative kernel evaluations in place.
pub(crate) fn normalize_row(row: &mut [f64], index: usize) -> Result<()> {
    let sum: f64 = row.iter().sum();
    if !(sum > 0.0) || !sum.is_finite() {
        return Err(Error::DegenerateRow { row: index });
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn signals(raw: Vec<Vec<f64>>) -> PrivateSignals {
        PrivateSignals::new(raw).unwrap()
    }

    #[test]
    fn equal_signals_give_uniform_rows() {
        let s = signals(vec![vec![1.5], vec![1.5]]);
        let spec = KernelSpec {
            kernel: Kernel::Gaussian,
            bandwidth: BandwidthRule::Fixed(0.7),
        };
        let w = kernel_weights(&s, &spec).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(w.get(i, j), 0.5);
            }
        }
    }

    #[test]
    fn gaussian_two_signal_weights_match_hand_evaluation() {
        let h = 0.9;
        let s = signals(vec![vec![0.0], vec![h]]);
        let spec = KernelSpec {
            kernel: Kernel::Gaussian,
            bandwidth: BandwidthRule::Fixed(h),
        };
        let w = kernel_weights(&s, &spec).unwrap();
        // Hand evaluation at scaled distances 0 and 1.
        let near = 1.0 / (1.0 + (-0.5f64).exp());
        let far = (-0.5f64).exp() / (1.0 + (-0.5f64).exp());
        assert!((w.get(0, 0) - near).abs() <= 1e-15);
        assert!((w.get(0, 1) - far).abs() <= 1e-15);
        assert!((near - 0.622459).abs() <= 1e-6);
        assert!((far - 0.377541).abs() <= 1e-6);
    }

    #[test]
    fn rows_sum_to_one() {
        let s = signals(vec![vec![0.0, 1.0], vec![2.0, -1.0], vec![0.5, 0.5]]);
        let spec = KernelSpec {
            kernel: Kernel::Gaussian,
            bandwidth: BandwidthRule::Silverman,
        };
        let w = kernel_weights(&s, &spec).unwrap();
        for sum in w.row_sums() {
            assert!((sum - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn bandwidth_extremes_flatten_or_sharpen_gaussian_weights() {
        let s = signals(vec![vec![0.0], vec![1.0]]);
        let wide = kernel_weights(
            &s,
            &KernelSpec {
                kernel: Kernel::Gaussian,
                bandwidth: BandwidthRule::Fixed(1e3),
            },
        )
        .unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!((wide.get(i, j) - 0.5).abs() <= 1e-6);
            }
        }
        let narrow = kernel_weights(
            &s,
            &KernelSpec {
                kernel: Kernel::Gaussian,
                bandwidth: BandwidthRule::Fixed(1e-3),
            },
        )
        .unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((narrow.get(i, j) - expect).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn silverman_rejects_identical_signals() {
        let s = signals(vec![vec![2.0], vec![2.0]]);
        let spec = KernelSpec {
            kernel: Kernel::Gaussian,
            bandwidth: BandwidthRule::Silverman,
        };
        assert!(matches!(
            kernel_weights(&s, &spec),
            Err(Error::BandwidthUndefined(_))
        ));
    }

    #[test]
    fn zero_row_cannot_be_normalized() {
        let mut row = [0.0, 0.0, 0.0];
        assert!(matches!(
            normalize_row(&mut row, 1),
            Err(Error::DegenerateRow { row: 1 })
        ));
    }

    #[test]
    fn epanechnikov_keeps_diagonal_support() {
        // Far-apart signals: off-diagonal entries fall outside the support but
        // the diagonal keeps every row normalizable.
        let s = signals(vec![vec![0.0], vec![100.0]]);
        let spec = KernelSpec {
            kernel: Kernel::Epanechnikov,
            bandwidth: BandwidthRule::Fixed(1.0),
        };
        let w = kernel_weights(&s, &spec).unwrap();
        assert_eq!(w.get(0, 0), 1.0);
        assert_eq!(w.get(0, 1), 0.0);
    }

    #[test]
    fn permuting_signals_permutes_weights() {
        let raw = vec![vec![0.3, 1.0], vec![-1.0, 0.2], vec![2.0, 2.0]];
        let spec = KernelSpec {
            kernel: Kernel::Gaussian,
            bandwidth: BandwidthRule::Fixed(1.3),
        };
        let w = kernel_weights(&signals(raw.clone()), &spec).unwrap();
        let perm = [2usize, 0, 1];
        let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| raw[i].clone()).collect();
        let wp = kernel_weights(&signals(permuted), &spec).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(wp.get(i, j), w.get(perm[i], perm[j]));
            }
        }
    }

    #[test]
    fn from_rows_enforces_row_stochasticity() {
        assert!(WeightMatrix::from_rows(
            WeightKind::KernelWeights,
            vec![vec![0.6, 0.3], vec![0.5, 0.5]],
        )
        .is_err());
        assert!(WeightMatrix::from_rows(
            WeightKind::KernelWeights,
            vec![vec![1.2, -0.2], vec![0.5, 0.5]],
        )
        .is_err());
    }
}
