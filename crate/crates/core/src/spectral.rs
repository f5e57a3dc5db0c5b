//! Feature banks, label matrices and the cached eigenbasis of `X Xᵀ`.
//!
//! One symmetric eigendecomposition `X Xᵀ = U S Uᵀ` per bank is enough to
//! evaluate ridge solutions and evidence for every regularization value and
//! every class: all later work only touches the eigenvalues `s`, the projected
//! targets `h = Uᵀ X y` and `yᵀy`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Eigenvalues below this fraction of the largest one are set to zero.
pub const EIGEN_CLAMP_RATIO: f64 = 1e-12;

/// A D×N matrix of features, one sample per column.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBank {
    name: String,
    data: DMatrix<f64>,
}

impl FeatureBank {
    pub fn new(name: impl Into<String>, data: DMatrix<f64>) -> Result<Self> {
        let name = name.into();
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::InvalidInput(format!(
                "bank '{name}' must have at least one feature and one sample (got {}x{})",
                data.nrows(),
                data.ncols()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            let (row, col) = (pos % data.nrows(), pos / data.nrows());
            return Err(Error::InvalidInput(format!(
                "bank '{name}' has a non-finite entry at ({row}, {col})"
            )));
        }
        Ok(Self { name, data })
    }

    /// Builds a bank from a row-major value sequence of `d` rows and `n` columns.
    pub fn from_row_major(name: impl Into<String>, d: usize, n: usize, values: &[f64]) -> Result<Self> {
        if values.len() != d * n {
            return Err(Error::DimensionMismatch(format!(
                "expected {d}x{n} = {} values, got {}",
                d * n,
                values.len()
            )));
        }
        Self::new(name, DMatrix::from_row_slice(d, n, values))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn d(&self) -> usize {
        self.data.nrows()
    }

    pub fn n(&self) -> usize {
        self.data.ncols()
    }

    pub fn renamed(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// Row-major copy of the entries.
    pub fn to_row_major(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.d() * self.n());
        for r in 0..self.d() {
            out.extend(self.data.row(r).iter().copied());
        }
        out
    }

    /// Keeps only the listed samples, in the given order.
    pub fn select_samples(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.n()) {
            return Err(Error::InvalidInput(format!(
                "sample index {bad} out of range for bank '{}' with {} samples",
                self.name,
                self.n()
            )));
        }
        Self::new(self.name.clone(), self.data.select_columns(indices))
    }
}

/// N×K binary indicator targets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMatrix {
    n: usize,
    k: usize,
    /// Row-major, one row per sample.
    data: Vec<u8>,
}

impl LabelMatrix {
    pub fn from_row_major(n: usize, k: usize, data: Vec<u8>) -> Result<Self> {
        if n == 0 || k == 0 {
            return Err(Error::InvalidInput(format!(
                "label matrix must be at least 1x1 (got {n}x{k})"
            )));
        }
        if data.len() != n * k {
            return Err(Error::DimensionMismatch(format!(
                "expected {n}x{k} = {} labels, got {}",
                n * k,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|&v| v > 1) {
            return Err(Error::InvalidInput(format!(
                "label entry at ({}, {}) is {}, expected 0 or 1",
                pos / k,
                pos % k,
                data[pos]
            )));
        }
        Ok(Self { n, k, data })
    }

    /// One-hot matrix from class indices.
    pub fn one_hot(classes: &[usize], k: usize) -> Result<Self> {
        let mut data = vec![0u8; classes.len() * k];
        for (i, &c) in classes.iter().enumerate() {
            if c >= k {
                return Err(Error::InvalidInput(format!(
                    "class index {c} at sample {i} is out of range for {k} classes"
                )));
            }
            data[i * k + c] = 1;
        }
        Self::from_row_major(classes.len(), k, data)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, sample: usize, class: usize) -> u8 {
        self.data[sample * self.k + class]
    }

    pub fn row(&self, sample: usize) -> &[u8] {
        &self.data[sample * self.k..(sample + 1) * self.k]
    }

    pub fn column(&self, class: usize) -> DVector<f64> {
        DVector::from_iterator(self.n, (0..self.n).map(|i| f64::from(self.get(i, class))))
    }

    pub fn positives(&self, class: usize) -> usize {
        (0..self.n).filter(|&i| self.get(i, class) == 1).count()
    }

    /// N×K matrix of 0.0/1.0 values.
    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.k, |i, c| f64::from(self.get(i, c)))
    }

    /// True when every row carries exactly one positive label.
    pub fn is_one_hot(&self) -> bool {
        (0..self.n).all(|i| self.row(i).iter().filter(|&&v| v == 1).count() == 1)
    }

    /// Index of the first positive label of each sample, `None` for empty rows.
    pub fn first_positive(&self, sample: usize) -> Option<usize> {
        self.row(sample).iter().position(|&v| v == 1)
    }

    pub fn select_samples(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.k);
        for &i in indices {
            if i >= self.n {
                return Err(Error::InvalidInput(format!(
                    "sample index {i} out of range for {} labelled samples",
                    self.n
                )));
            }
            data.extend_from_slice(self.row(i));
        }
        Self::from_row_major(indices.len(), self.k, data)
    }

    /// Every class needs at least one positive and one negative sample to be trainable.
    pub fn check_trainable(&self) -> Result<()> {
        for class in 0..self.k {
            let pos = self.positives(class);
            if pos == 0 {
                return Err(Error::DegenerateLabels {
                    class,
                    reason: "no positive samples".into(),
                });
            }
            if pos == self.n {
                return Err(Error::DegenerateLabels {
                    class,
                    reason: "no negative samples".into(),
                });
            }
        }
        Ok(())
    }
}

/// Spectral data of `X Xᵀ` plus the per-class projections needed downstream.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenBasis {
    /// Orthogonal D×D eigenvector matrix, columns ordered like `s`.
    pub u: DMatrix<f64>,
    /// Eigenvalues in descending order, clamped at zero.
    pub s: DVector<f64>,
    /// Column k holds `Uᵀ X y⁽ᵏ⁾`.
    pub h: DMatrix<f64>,
    /// Entry k holds `y⁽ᵏ⁾ᵀ y⁽ᵏ⁾`.
    pub yty: Vec<f64>,
    pub n: usize,
    pub d: usize,
}

impl EigenBasis {
    pub fn k(&self) -> usize {
        self.h.ncols()
    }

    pub fn h_col(&self, class: usize) -> &[f64] {
        let d = self.d;
        &self.h.as_slice()[class * d..(class + 1) * d]
    }

    pub fn eigenvalues(&self) -> &[f64] {
        self.s.as_slice()
    }

    /// Number of strictly positive (post-clamp) eigenvalues.
    pub fn rank(&self) -> usize {
        self.s.iter().filter(|&&v| v > 0.0).count()
    }

    pub(crate) fn check_class(&self, class: usize) -> Result<()> {
        if class >= self.k() {
            return Err(Error::InvalidInput(format!(
                "class index {class} out of range for {} classes",
                self.k()
            )));
        }
        Ok(())
    }
}

/// `X Xᵀ`, symmetrized as `(M + Mᵀ) / 2`.
pub fn gram(bank: &FeatureBank) -> DMatrix<f64> {
    let x = bank.data();
    let m = x * x.transpose();
    (&m + m.transpose()) * 0.5
}

/// Symmetric eigendecomposition with descending, clamped eigenvalues and
/// sign-canonical eigenvectors. `label` names the source in error messages.
pub fn eigh(m: &DMatrix<f64>, label: &str) -> Result<(DMatrix<f64>, DVector<f64>)> {
    if !m.is_square() {
        return Err(Error::DimensionMismatch(format!(
            "eigh expects a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("matrix for '{label}' has non-finite entries")));
    }
    let dim = m.nrows();
    let eig = m
        .clone()
        .try_symmetric_eigen(f64::EPSILON, 1000 * dim.max(1))
        .ok_or_else(|| Error::EigenFailure { bank: label.to_string() })?;

    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let s_max = order.first().map_or(0.0, |&i| eig.eigenvalues[i].max(0.0));
    let threshold = EIGEN_CLAMP_RATIO * s_max;
    let s = DVector::from_iterator(
        dim,
        order.iter().map(|&i| {
            let v = eig.eigenvalues[i];
            if v < threshold || v <= 0.0 {
                0.0
            } else {
                v
            }
        }),
    );

    let mut u = eig.eigenvectors.select_columns(&order);
    for mut col in u.column_iter_mut() {
        let mut pivot = 0;
        for (i, v) in col.iter().enumerate() {
            if v.abs() > col[pivot].abs() {
                pivot = i;
            }
        }
        if col[pivot] < 0.0 {
            col.neg_mut();
        }
    }
    Ok((u, s))
}

/// Runs the single eigendecomposition for `bank` and projects every label column.
pub fn build_basis(bank: &FeatureBank, labels: &LabelMatrix) -> Result<EigenBasis> {
    if bank.n() != labels.n() {
        return Err(Error::DimensionMismatch(format!(
            "bank '{}' has {} samples but labels have {}",
            bank.name(),
            bank.n(),
            labels.n()
        )));
    }
    let (u, s) = eigh(&gram(bank), bank.name())?;
    let y = labels.to_matrix();
    let xy = bank.data() * &y;
    let h = u.transpose() * xy;
    let yty = (0..labels.k()).map(|c| labels.positives(c) as f64).collect();
    Ok(EigenBasis {
        u,
        s,
        h,
        yty,
        n: bank.n(),
        d: bank.d(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_bank(seed: u64, d: usize, n: usize) -> FeatureBank {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = DMatrix::from_fn(d, n, |_, _| rng.random_range(-1.0..1.0));
        FeatureBank::new("rand", data).unwrap()
    }

    fn unit_columns() -> FeatureBank {
        // columns e1, e1, e2
        FeatureBank::from_row_major("u", 2, 3, &[1.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap()
    }

    #[test]
    fn gram_identity_and_unit_columns() {
        let id = FeatureBank::new("i", DMatrix::identity(2, 2)).unwrap();
        assert_eq!(gram(&id), DMatrix::identity(2, 2));
        let g = gram(&unit_columns());
        assert_eq!(g, DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 1.0]));
    }

    #[test]
    fn gram_matches_triple_loop() {
        let bank = random_bank(7, 8, 20);
        let x = bank.data();
        let g = gram(&bank);
        for i in 0..8 {
            for j in 0..8 {
                let mut acc = 0.0;
                for n in 0..20 {
                    acc += x[(i, n)] * x[(j, n)];
                }
                assert!((g[(i, j)] - acc).abs() <= 1e-12 * acc.abs().max(1.0));
            }
            for j in 0..8 {
                assert_eq!(g[(i, j)], g[(j, i)]);
            }
        }
    }

    #[test]
    fn eigh_diagonal() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 1.0]);
        let (u, s) = eigh(&m, "diag").unwrap();
        assert_eq!(s.as_slice(), &[2.0, 1.0]);
        assert!((u.clone() - DMatrix::identity(2, 2)).amax() < 1e-15);
    }

    #[test]
    fn eigh_clamps_negative_eigenvalue() {
        let m = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let (u, s) = eigh(&m, "swap").unwrap();
        assert!((s[0] - 1.0).abs() < 1e-14);
        assert_eq!(s[1], 0.0);
        let r = std::f64::consts::FRAC_1_SQRT_2;
        assert!((u[(0, 0)] - r).abs() < 1e-14 && (u[(1, 0)] - r).abs() < 1e-14);
        // second column (1,-1)/sqrt2 up to the sign canonicalization
        assert!((u[(0, 1)].abs() - r).abs() < 1e-14);
        assert!((u[(0, 1)] + u[(1, 1)]).abs() < 1e-14);
    }

    #[test]
    fn eigh_reconstructs_random_psd() {
        let bank = random_bank(11, 10, 30);
        let g = gram(&bank);
        let (u, s) = eigh(&g, "rand").unwrap();
        let rec = &u * DMatrix::from_diagonal(&s) * u.transpose();
        assert!((rec - &g).amax() <= 1e-10);
        assert!(s.as_slice().windows(2).all(|w| w[0] >= w[1]));
        assert!((u.transpose() * &u - DMatrix::identity(10, 10)).amax() <= 1e-8);
    }

    #[test]
    fn sign_is_canonical() {
        let bank = random_bank(3, 6, 9);
        let (u, _) = eigh(&gram(&bank), "rand").unwrap();
        for col in u.column_iter() {
            let pivot = col.iamax();
            assert!(col[pivot] > 0.0);
        }
    }

    #[test]
    fn basis_identity_case() {
        let bank = FeatureBank::new("i", DMatrix::identity(2, 2)).unwrap();
        let labels = LabelMatrix::from_row_major(2, 1, vec![1, 0]).unwrap();
        let b = build_basis(&bank, &labels).unwrap();
        assert_eq!(b.s.as_slice(), &[1.0, 1.0]);
        assert_eq!(b.h_col(0), &[1.0, 0.0]);
        assert_eq!(b.yty, vec![1.0]);
    }

    #[test]
    fn basis_unit_columns() {
        let labels = LabelMatrix::from_row_major(3, 1, vec![1, 1, 0]).unwrap();
        let b = build_basis(&unit_columns(), &labels).unwrap();
        assert_eq!(b.s.as_slice(), &[2.0, 1.0]);
        assert_eq!(b.h_col(0), &[2.0, 0.0]);
        assert_eq!(b.yty, vec![2.0]);
    }

    #[test]
    fn basis_h_matches_dense_projection() {
        let bank = random_bank(5, 12, 40);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let classes: Vec<usize> = (0..40).map(|_| rng.random_range(0..5)).collect();
        let labels = LabelMatrix::one_hot(&classes, 5).unwrap();
        let b = build_basis(&bank, &labels).unwrap();
        for k in 0..5 {
            let xy = bank.data() * labels.column(k);
            let expect = b.u.transpose() * xy;
            for d in 0..12 {
                assert!((b.h_col(k)[d] - expect[d]).abs() <= 1e-10);
            }
            assert_eq!(b.yty[k], labels.positives(k) as f64);
        }
    }

    #[test]
    fn rank_bounded_by_sample_count() {
        let bank = random_bank(8, 10, 4);
        let labels = LabelMatrix::one_hot(&[0, 1, 0, 1], 2).unwrap();
        let b = build_basis(&bank, &labels).unwrap();
        assert!(b.rank() <= 4);
        assert_eq!(b.s.len(), 10);
    }

    #[test]
    fn sample_count_mismatch_is_rejected() {
        let labels = LabelMatrix::one_hot(&[0, 1], 2).unwrap();
        let err = build_basis(&unit_columns(), &labels).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch(_)));
    }

    #[test]
    fn non_finite_bank_rejected() {
        let err = FeatureBank::from_row_major("x", 1, 2, &[1.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
    }

    #[test]
    fn label_validation() {
        assert!(LabelMatrix::from_row_major(1, 2, vec![0, 2]).is_err());
        let l = LabelMatrix::from_row_major(2, 2, vec![1, 0, 1, 0]).unwrap();
        assert!(matches!(
            l.check_trainable(),
            Err(Error::DegenerateLabels { class: 0, .. })
        ));
    }
}
