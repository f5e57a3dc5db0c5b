//! Multi-class / multi-label LS-SVM with per-class evidence-optimized
//! regularization.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::evidence::{optimize_lambda, EvidenceResult, OptimOptions};
use crate::spectral::{build_basis, EigenBasis, FeatureBank, LabelMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TrainOptions {
    pub optim: OptimOptions,
    /// Keep classes whose λ optimization hit `max_iters` instead of failing.
    pub accept_unconverged: bool,
}

impl From<OptimOptions> for TrainOptions {
    fn from(optim: OptimOptions) -> Self {
        Self {
            optim,
            accept_unconverged: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    /// D×K, column k is the weight vector of class k.
    pub weights: DMatrix<f64>,
    pub lambdas: Vec<f64>,
    /// Optimization records; empty for models read back from disk.
    pub per_class: Vec<EvidenceResult>,
    pub overall_evidence: f64,
    /// Bank name(s) joined with '+', in concatenation order.
    pub bank_signature: String,
}

impl ClassifierModel {
    pub fn d(&self) -> usize {
        self.weights.nrows()
    }

    pub fn k(&self) -> usize {
        self.weights.ncols()
    }
}

/// Sample-by-class raw scores `xᵀw`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    data: DMatrix<f64>,
}

impl ScoreMatrix {
    pub fn new(data: DMatrix<f64>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("score matrix has non-finite entries".into()));
        }
        Ok(Self { data })
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn n(&self) -> usize {
        self.data.nrows()
    }

    pub fn k(&self) -> usize {
        self.data.ncols()
    }

    pub fn column(&self, class: usize) -> Vec<f64> {
        self.data.column(class).iter().copied().collect()
    }

    pub fn select_samples(&self, indices: &[usize]) -> Self {
        Self {
            data: self.data.select_rows(indices),
        }
    }
}

/// `w = U (S + λI)⁻¹ h⁽ᵏ⁾`.
pub fn solve_weights(basis: &EigenBasis, class: usize, lambda: f64) -> Result<DVector<f64>> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidInput(format!("lambda must be positive, got {lambda}")));
    }
    basis.check_class(class)?;
    let coeffs = DVector::from_iterator(
        basis.d,
        basis
            .h_col(class)
            .iter()
            .zip(basis.eigenvalues())
            .map(|(&h, &s)| h / (s + lambda)),
    );
    Ok(&basis.u * coeffs)
}

/// Sum of per-class log evidences, added in ascending class order.
pub fn overall_evidence(per_class: &[EvidenceResult], accept_unconverged: bool) -> Result<f64> {
    if per_class.is_empty() {
        return Err(Error::InvalidInput("no per-class results to sum".into()));
    }
    let mut ordered: Vec<&EvidenceResult> = per_class.iter().collect();
    ordered.sort_by_key(|r| r.class_index);
    if !accept_unconverged {
        if let Some(r) = ordered.iter().find(|r| !r.converged) {
            return Err(Error::Unconverged {
                class: r.class_index,
                iterations: r.iterations,
            });
        }
    }
    Ok(ordered.iter().map(|r| r.state.log_evidence).sum())
}

/// Trains every class against an already built basis.
pub fn train_with_basis(
    basis: &EigenBasis,
    bank_signature: impl Into<String>,
    opts: &TrainOptions,
) -> Result<ClassifierModel> {
    opts.optim.validate()?;
    let per_class = (0..basis.k())
        .into_par_iter()
        .map(|class| optimize_lambda(basis, class, &opts.optim))
        .collect::<Result<Vec<_>>>()?;
    for r in per_class.iter().filter(|r| !r.converged) {
        log::warn!(
            "class {}: lambda did not converge in {} iterations (last lambda {:e})",
            r.class_index,
            r.iterations,
            r.state.lambda
        );
    }
    let overall = overall_evidence(&per_class, opts.accept_unconverged)?;
    let lambdas: Vec<f64> = per_class.iter().map(|r| r.state.lambda).collect();
    let mut weights = DMatrix::zeros(basis.d, basis.k());
    for (class, &lambda) in lambdas.iter().enumerate() {
        weights.set_column(class, &solve_weights(basis, class, lambda)?);
    }
    Ok(ClassifierModel {
        weights,
        lambdas,
        per_class,
        overall_evidence: overall,
        bank_signature: bank_signature.into(),
    })
}

/// A model with caller-chosen per-class λ (e.g. from cross-validation).
/// `per_class` is left empty; the evidence is still reported as `Σ F(λ⁽ᵏ⁾)`.
pub fn fit_with_lambdas(
    basis: &EigenBasis,
    lambdas: &[f64],
    bank_signature: impl Into<String>,
) -> Result<ClassifierModel> {
    if lambdas.len() != basis.k() {
        return Err(Error::DimensionMismatch(format!(
            "{} lambdas for {} classes",
            lambdas.len(),
            basis.k()
        )));
    }
    let mut weights = DMatrix::zeros(basis.d, basis.k());
    let mut overall = 0.0;
    for (class, &lambda) in lambdas.iter().enumerate() {
        weights.set_column(class, &solve_weights(basis, class, lambda)?);
        overall += crate::evidence::log_evidence_1d(basis, class, lambda)?;
    }
    Ok(ClassifierModel {
        weights,
        lambdas: lambdas.to_vec(),
        per_class: Vec::new(),
        overall_evidence: overall,
        bank_signature: bank_signature.into(),
    })
}

pub fn train(bank: &FeatureBank, labels: &LabelMatrix, opts: &TrainOptions) -> Result<ClassifierModel> {
    labels.check_trainable()?;
    let basis = build_basis(bank, labels)?;
    train_with_basis(&basis, bank.name(), opts)
}

pub fn predict_scores(model: &ClassifierModel, bank: &FeatureBank) -> Result<ScoreMatrix> {
    if bank.d() != model.d() {
        return Err(Error::DimensionMismatch(format!(
            "model expects {} features, bank '{}' has {}",
            model.d(),
            bank.name(),
            bank.d()
        )));
    }
    ScoreMatrix::new(bank.data().transpose() * &model.weights)
}

/// Element-wise mean of equally shaped score matrices.
pub fn average_scores(scores: &[ScoreMatrix]) -> Result<ScoreMatrix> {
    let first = scores
        .first()
        .ok_or_else(|| Error::InvalidInput("no score matrices to average".into()))?;
    let shape = first.data.shape();
    let mut sum = DMatrix::zeros(shape.0, shape.1);
    for (i, s) in scores.iter().enumerate() {
        if s.data.shape() != shape {
            return Err(Error::DimensionMismatch(format!(
                "score matrix {i} is {:?}, expected {:?}",
                s.data.shape(),
                shape
            )));
        }
        sum += &s.data;
    }
    ScoreMatrix::new(sum / scores.len() as f64)
}
