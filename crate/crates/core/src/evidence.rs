//! Log evidence of the Bayesian least-squares model and its maximization.
//!
//! Everything here works in the eigenbasis of `X Xᵀ`: with eigenvalues `s_d`
//! and projected targets `h_d`, each evaluation costs `O(D)` and the D×D
//! posterior precision `A = αI + βXXᵀ` is never formed.
//!
//! Four optimizers are available. [`Method::Aitken`] iterates the one-dimensional
//! update `λ ← γ / (β(λ) mᵀm)` and extrapolates every pair of updates with
//! Aitken's delta-squared formula, falling back to the second update when the
//! extrapolation is unusable. [`Method::LambdaPlain`] runs the same update
//! without extrapolation; [`Method::FixedPointAb`] and [`Method::Em`] are the
//! classic two-parameter MacKay and EM updates of `(α, β)`.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{EigenBasis, FeatureBank};

/// The `yᵀy − Σ h²/(λ+s)` term is treated as zero below this fraction of `yᵀy`.
pub const DEGENERATE_FIT_RATIO: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Aitken,
    FixedPointAb,
    Em,
    LambdaPlain,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Aitken,
        Method::LambdaPlain,
        Method::FixedPointAb,
        Method::Em,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Aitken => "aitken",
            Method::FixedPointAb => "fixed_point_ab",
            Method::Em => "em",
            Method::LambdaPlain => "lambda_plain",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "aitken" => Ok(Method::Aitken),
            "fixed_point_ab" => Ok(Method::FixedPointAb),
            "em" => Ok(Method::Em),
            "lambda_plain" => Ok(Method::LambdaPlain),
            other => Err(Error::InvalidInput(format!(
                "unknown method '{other}' (expected aitken, fixed_point_ab, em or lambda_plain)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimOptions {
    pub lambda_init: f64,
    /// Stop once `|λ − λ₀| < ε` or `|λ − λ₀| < ε·λ₀`.
    pub epsilon: f64,
    pub max_iters: usize,
    pub method: Method,
}

impl Default for OptimOptions {
    fn default() -> Self {
        Self {
            lambda_init: 1.0,
            epsilon: 1e-5,
            max_iters: 500,
            method: Method::Aitken,
        }
    }
}

impl OptimOptions {
    pub fn with_method(method: Method) -> Self {
        Self {
            method,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_init > 0.0 && self.lambda_init.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "lambda_init must be positive and finite, got {}",
                self.lambda_init
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidInput("max_iters must be at least 1".into()));
        }
        Ok(())
    }

    fn has_converged(&self, previous: f64, current: f64) -> bool {
        let step = (current - previous).abs();
        step < self.epsilon || step < self.epsilon * previous
    }
}

/// A point in hyperparameter space with its derived quantities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperparamState {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub log_evidence: f64,
}

impl HyperparamState {
    /// Fills `λ`, `γ` and `L(α, β)` for the given precisions.
    pub fn from_alpha_beta(basis: &EigenBasis, class: usize, alpha: f64, beta: f64) -> Result<Self> {
        let lambda = alpha / beta;
        Ok(Self {
            alpha,
            beta,
            lambda,
            gamma: gamma_of(basis.eigenvalues(), lambda)?,
            log_evidence: log_evidence_ab(basis, class, alpha, beta)?,
        })
    }

    /// The point on the `β = β(λ)` ridge, where `L(α, β) = F(λ)`.
    pub fn from_lambda(basis: &EigenBasis, class: usize, lambda: f64) -> Result<Self> {
        let beta = beta_of_lambda(basis, class, lambda)?;
        Ok(Self {
            alpha: lambda * beta,
            beta,
            lambda,
            gamma: gamma_of(basis.eigenvalues(), lambda)?,
            log_evidence: log_evidence_1d(basis, class, lambda)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    pub lambda: f64,
    pub log_evidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceResult {
    pub class_index: usize,
    pub method: Method,
    pub state: HyperparamState,
    pub iterations: usize,
    pub converged: bool,
    /// Entry 0 is the starting point; entry i is the iterate after outer iteration i.
    pub trace: Vec<TraceRecord>,
    /// Number of Aitken extrapolations replaced by the second plain update.
    pub fallback_count: usize,
}

/// Summary of the Gaussian posterior `N(m, A⁻¹)`, computed spectrally.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorState {
    /// `Uᵀ m`, i.e. `β h_d / (α + β s_d)`.
    pub m_spectral: DVector<f64>,
    pub mtm: f64,
    /// `‖y − Xᵀm‖²`
    pub residual: f64,
    pub tr_ainv: f64,
    pub tr_ainv_gram: f64,
}

impl PosteriorState {
    /// The posterior mean in the original feature coordinates.
    pub fn mean(&self, basis: &EigenBasis) -> DVector<f64> {
        &basis.u * &self.m_spectral
    }
}

fn check_positive(name: &str, value: f64) -> Result<()> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!(
            "{name} must be positive and finite, got {value}"
        )))
    }
}

/// Effective number of parameters `γ = Σ s_d / (λ + s_d)`.
pub fn gamma_of(s: &[f64], lambda: f64) -> Result<f64> {
    check_positive("lambda", lambda)?;
    Ok(s.iter().map(|&sd| sd / (lambda + sd)).sum())
}

/// `yᵀy − Σ h_d² / (λ + s_d)`, rejected when not meaningfully positive.
fn fit_term(basis: &EigenBasis, class: usize, lambda: f64) -> Result<f64> {
    check_positive("lambda", lambda)?;
    basis.check_class(class)?;
    let h = basis.h_col(class);
    let projected: f64 = h
        .iter()
        .zip(basis.eigenvalues())
        .map(|(&hd, &sd)| hd * hd / (lambda + sd))
        .sum();
    let yty = basis.yty[class];
    let term = yty - projected;
    if term <= DEGENERATE_FIT_RATIO * yty || !term.is_finite() {
        return Err(Error::DegenerateFit {
            class,
            lambda,
            residual: term,
        });
    }
    Ok(term)
}

/// Noise precision maximizing the evidence at fixed `λ`.
pub fn beta_of_lambda(basis: &EigenBasis, class: usize, lambda: f64) -> Result<f64> {
    Ok(basis.n as f64 / fit_term(basis, class, lambda)?)
}

/// `L(α, β)` evaluated from `(s, h, yᵀy, N, D)`.
pub fn log_evidence_ab(basis: &EigenBasis, class: usize, alpha: f64, beta: f64) -> Result<f64> {
    check_positive("alpha", alpha)?;
    check_positive("beta", beta)?;
    basis.check_class(class)?;
    let n = basis.n as f64;
    let d = basis.d as f64;
    let h = basis.h_col(class);
    let mut log_det = 0.0;
    let mut quad = 0.0;
    for (&hd, &sd) in h.iter().zip(basis.eigenvalues()) {
        let a = alpha + beta * sd;
        log_det += a.ln();
        quad += hd * hd / a;
    }
    Ok(0.5 * d * alpha.ln() + 0.5 * n * beta.ln() - 0.5 * log_det - 0.5 * beta * basis.yty[class]
        + 0.5 * beta * beta * quad
        - 0.5 * n * (2.0 * PI).ln())
}

/// The one-dimensional log evidence `F(λ) = max_β L(λβ, β)`.
pub fn log_evidence_1d(basis: &EigenBasis, class: usize, lambda: f64) -> Result<f64> {
    let fit = fit_term(basis, class, lambda)?;
    let n = basis.n as f64;
    let log_ratio: f64 = basis
        .eigenvalues()
        .iter()
        .map(|&sd| (lambda / (lambda + sd)).ln())
        .sum();
    Ok(0.5 * log_ratio + 0.5 * n * n.ln() - 0.5 * n - 0.5 * n * (2.0 * PI).ln() - 0.5 * n * fit.ln())
}

pub fn posterior_state(basis: &EigenBasis, class: usize, alpha: f64, beta: f64) -> Result<PosteriorState> {
    check_positive("alpha", alpha)?;
    check_positive("beta", beta)?;
    basis.check_class(class)?;
    let h = basis.h_col(class);
    let lambda = alpha / beta;
    let mut m = DVector::zeros(basis.d);
    let (mut mtm, mut tr_ainv, mut tr_ainv_gram) = (0.0, 0.0, 0.0);
    // y − Xᵀm splits into its component in the row space of X, a sum of
    // positive terms, and the part of y orthogonal to it
    let (mut in_span, mut projected) = (0.0, 0.0);
    for (d, (&hd, &sd)) in h.iter().zip(basis.eigenvalues()).enumerate() {
        let a = alpha + beta * sd;
        let md = beta * hd / a;
        m[d] = md;
        mtm += md * md;
        tr_ainv += 1.0 / a;
        tr_ainv_gram += sd / a;
        if sd > 0.0 {
            let shrink = lambda / (lambda + sd);
            in_span += hd * hd / sd * shrink * shrink;
            projected += hd * hd / sd;
        }
    }
    let orthogonal = if basis.rank() >= basis.n {
        0.0
    } else {
        (basis.yty[class] - projected).max(0.0)
    };
    let residual = in_span + orthogonal;
    Ok(PosteriorState {
        m_spectral: m,
        mtm,
        residual,
        tr_ainv,
        tr_ainv_gram,
    })
}

fn check_step_inputs(class: usize, post: &PosteriorState, lambda: f64) -> Result<()> {
    if post.mtm <= 0.0 {
        return Err(Error::DegenerateClass { class });
    }
    if post.residual <= 0.0 {
        return Err(Error::DegenerateFit {
            class,
            lambda,
            residual: post.residual,
        });
    }
    Ok(())
}

/// MacKay update `α' = γ / mᵀm`, `β' = (N − γ) / ‖y − Xᵀm‖²`.
pub fn fixed_point_step_ab(basis: &EigenBasis, class: usize, state: &HyperparamState) -> Result<HyperparamState> {
    let (alpha, beta) = (state.alpha, state.beta);
    let post = posterior_state(basis, class, alpha, beta)?;
    let lambda = alpha / beta;
    check_step_inputs(class, &post, lambda)?;
    let gamma = gamma_of(basis.eigenvalues(), lambda)?;
    let next_alpha = gamma / post.mtm;
    let next_beta = (basis.n as f64 - gamma) / post.residual;
    HyperparamState::from_alpha_beta(basis, class, next_alpha, next_beta)
}

/// EM update `α' = D / (mᵀm + Tr A⁻¹)`, `β' = N / (‖y − Xᵀm‖² + Tr(A⁻¹XXᵀ))`.
pub fn em_step(basis: &EigenBasis, class: usize, state: &HyperparamState) -> Result<HyperparamState> {
    let (alpha, beta) = (state.alpha, state.beta);
    let post = posterior_state(basis, class, alpha, beta)?;
    check_step_inputs(class, &post, alpha / beta)?;
    let next_alpha = basis.d as f64 / (post.mtm + post.tr_ainv);
    let next_beta = basis.n as f64 / (post.residual + post.tr_ainv_gram);
    HyperparamState::from_alpha_beta(basis, class, next_alpha, next_beta)
}

/// One application of the fixed-point map `λ ↦ γ / (β(λ) mᵀm)`.
pub fn lambda_step(basis: &EigenBasis, class: usize, lambda: f64) -> Result<f64> {
    let gamma = gamma_of(basis.eigenvalues(), lambda)?;
    let beta = beta_of_lambda(basis, class, lambda)?;
    let mtm: f64 = basis
        .h_col(class)
        .iter()
        .zip(basis.eigenvalues())
        .map(|(&hd, &sd)| {
            let m = hd / (lambda + sd);
            m * m
        })
        .sum();
    if mtm <= 0.0 {
        return Err(Error::DegenerateClass { class });
    }
    Ok(gamma / (beta * mtm))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Extrapolation {
    Value(f64),
    /// The secant line is parallel to `y = λ` or crosses it at a non-positive
    /// or non-finite point; use the last plain update instead.
    Fallback,
}

impl Extrapolation {
    /// Accepted next iterate: the extrapolated value, or `l2` on fallback.
    pub fn or_fallback(self, l2: f64) -> f64 {
        match self {
            Extrapolation::Value(v) => v,
            Extrapolation::Fallback => l2,
        }
    }
}

/// Aitken's delta-squared extrapolation through `(l0, l1)`, `(l1, l2)`.
pub fn aitken_extrapolate(l0: f64, l1: f64, l2: f64) -> Extrapolation {
    let d1 = l1 - l0;
    let denom = (l2 - l1) - d1;
    if denom == 0.0 {
        return Extrapolation::Fallback;
    }
    let value = l0 - d1 * d1 / denom;
    if value.is_finite() && value > 0.0 {
        Extrapolation::Value(value)
    } else {
        Extrapolation::Fallback
    }
}

pub fn optimize_lambda(basis: &EigenBasis, class: usize, opts: &OptimOptions) -> Result<EvidenceResult> {
    optimize_lambda_observed(basis, class, opts, &mut |_| {})
}

/// Like [`optimize_lambda`], calling `observer` with every trace record as it is produced.
pub fn optimize_lambda_observed(
    basis: &EigenBasis,
    class: usize,
    opts: &OptimOptions,
    observer: &mut dyn FnMut(&TraceRecord),
) -> Result<EvidenceResult> {
    opts.validate()?;
    basis.check_class(class)?;
    if basis.h_col(class).iter().all(|&v| v == 0.0) {
        return Err(Error::DegenerateClass { class });
    }

    let mut lambda = opts.lambda_init;
    let mut trace = Vec::with_capacity(16);
    let mut record = |trace: &mut Vec<TraceRecord>, iteration: usize, lambda: f64, log_evidence: f64| {
        let rec = TraceRecord {
            iteration,
            lambda,
            log_evidence,
        };
        observer(&rec);
        trace.push(rec);
    };
    record(&mut trace, 0, lambda, log_evidence_1d(basis, class, lambda)?);

    let mut ab = match opts.method {
        Method::FixedPointAb | Method::Em => {
            let beta = beta_of_lambda(basis, class, lambda)?;
            Some(HyperparamState::from_alpha_beta(basis, class, lambda * beta, beta)?)
        }
        _ => None,
    };

    let mut fallback_count = 0;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iters {
        let previous = lambda;
        let stepped: Result<f64> = (|| Ok(match opts.method {
            Method::Aitken => {
                let l1 = lambda_step(basis, class, previous)?;
                let l2 = lambda_step(basis, class, l1)?;
                match aitken_extrapolate(previous, l1, l2) {
                    // an extrapolation landing where the evidence is undefined is
                    // treated like the other failure cases
                    Extrapolation::Value(v) if fit_term(basis, class, v).is_ok() => v,
                    _ => {
                        fallback_count += 1;
                        l2
                    }
                }
            }
            Method::LambdaPlain => lambda_step(basis, class, previous)?,
            Method::FixedPointAb | Method::Em => {
                let state = ab.as_ref().expect("two-parameter state initialized");
                let stepped = if opts.method == Method::Em {
                    em_step(basis, class, state)?
                } else {
                    fixed_point_step_ab(basis, class, state)?
                };
                let next = stepped.lambda;
                ab = Some(stepped);
                next
            }
        }))();
        // failures past the starting point mean the iterates ran off to where
        // the evidence is no longer defined numerically (typically λ → ∞)
        let next = match stepped {
            Ok(v) if v.is_finite() && v > 0.0 && fit_term(basis, class, v).is_ok() => v,
            Ok(v) => {
                log::debug!("class {class}: iterate left the valid domain ({v:e}); stopping");
                break;
            }
            Err(e) => {
                log::debug!("class {class}: step failed at lambda = {previous:e}: {e}; stopping");
                break;
            }
        };
        iterations += 1;
        lambda = next;
        record(&mut trace, iterations, lambda, log_evidence_1d(basis, class, lambda)?);
        if opts.has_converged(previous, lambda) {
            converged = true;
            break;
        }
    }

    Ok(EvidenceResult {
        class_index: class,
        method: opts.method,
        state: HyperparamState::from_lambda(basis, class, lambda)?,
        iterations,
        converged,
        trace,
        fallback_count,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopeDiagnostic {
    pub slope: f64,
    /// `slope < 1`: the fixed-point map is guaranteed to have a fixed point.
    pub certified: bool,
}

/// Limit of `f(λ)/λ` as `λ → ∞`: `‖y‖² ‖X‖_F² / (N ‖Xy‖²)`.
pub fn asymptotic_slope(bank: &FeatureBank, y: &DVector<f64>) -> Result<SlopeDiagnostic> {
    if y.len() != bank.n() {
        return Err(Error::DimensionMismatch(format!(
            "label vector has {} entries, bank '{}' has {} samples",
            y.len(),
            bank.name(),
            bank.n()
        )));
    }
    let yty = y.norm_squared();
    if yty == 0.0 {
        return Err(Error::InvalidInput("label vector is all zero".into()));
    }
    let xy = bank.data() * y;
    let xy2 = xy.norm_squared();
    if xy2 == 0.0 {
        return Err(Error::DegenerateClass { class: 0 });
    }
    let slope = yty * bank.data().norm_squared() / (bank.n() as f64 * xy2);
    let certified = slope < 1.0;
    if !certified {
        log::warn!(
            "bank '{}': asymptotic slope {slope:.6} >= 1, existence of a fixed point is not certified",
            bank.name()
        );
    }
    Ok(SlopeDiagnostic { slope, certified })
}
