//! Evidence-based choice among candidate feature banks, greedy and exhaustive
//! ensembles by feature concatenation, and the cross-validation baseline.
//!
//! Evidence values are compared across banks of different dimension as they
//! are: the `D`-dependent terms of the log evidence are part of the comparison.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::TaskMode;
use crate::error::{Error, Result};
use crate::lssvm::{solve_weights, train, ClassifierModel, TrainOptions};
use crate::metrics::argmax;
use crate::spectral::{build_basis, FeatureBank, LabelMatrix};

/// Relative band inside which a candidate's evidence counts as "no increase".
pub const EVIDENCE_INCREASE_RTOL: f64 = 1e-6;

pub const DEFAULT_EXHAUSTIVE_LIMIT: usize = 12;

/// Banks over the same samples, in the same order, sharing one label matrix.
#[derive(Debug, Clone)]
pub struct CandidateSet {
    banks: Vec<FeatureBank>,
    labels: LabelMatrix,
}

impl CandidateSet {
    pub fn new(banks: Vec<FeatureBank>, labels: LabelMatrix) -> Result<Self> {
        if banks.is_empty() {
            return Err(Error::InvalidInput("candidate set is empty".into()));
        }
        let mut names = HashSet::new();
        for bank in &banks {
            if bank.n() != labels.n() {
                return Err(Error::DimensionMismatch(format!(
                    "bank '{}' has {} samples, labels have {}",
                    bank.name(),
                    bank.n(),
                    labels.n()
                )));
            }
            if bank.name().contains('+') {
                return Err(Error::InvalidInput(format!(
                    "bank name '{}' must not contain '+'",
                    bank.name()
                )));
            }
            if !names.insert(bank.name().to_string()) {
                return Err(Error::InvalidInput(format!("duplicate bank name '{}'", bank.name())));
            }
        }
        Ok(Self { banks, labels })
    }

    pub fn banks(&self) -> &[FeatureBank] {
        &self.banks
    }

    pub fn labels(&self) -> &LabelMatrix {
        &self.labels
    }

    pub fn names(&self) -> Vec<&str> {
        self.banks.iter().map(FeatureBank::name).collect()
    }

    pub fn bank(&self, name: &str) -> Result<&FeatureBank> {
        self.banks
            .iter()
            .find(|b| b.name() == name)
            .ok_or_else(|| Error::InvalidInput(format!("unknown bank '{name}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectionOptions {
    pub train: TrainOptions,
    pub exhaustive_limit: usize,
}

impl Default for SelectionOptions {
    fn default() -> Self {
        Self {
            train: TrainOptions::default(),
            exhaustive_limit: DEFAULT_EXHAUSTIVE_LIMIT,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RankedBank {
    pub name: String,
    pub overall_evidence: f64,
    pub model: ClassifierModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankFailure {
    pub name: String,
    pub error: String,
    pub numerical: bool,
}

impl BankFailure {
    fn new(name: impl Into<String>, err: &Error) -> Self {
        Self {
            name: name.into(),
            error: err.to_string(),
            numerical: err.is_numerical(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Ranking {
    /// Descending overall evidence, ties by name.
    pub ranked: Vec<RankedBank>,
    pub failed: Vec<BankFailure>,
}

/// `after` beats `before` by more than the relative tolerance band.
pub fn evidence_increases(before: f64, after: f64) -> bool {
    after > before + EVIDENCE_INCREASE_RTOL * before.abs()
}

/// Orders named evidence values descending, ties broken by name.
pub fn sort_by_evidence<T>(items: &mut [T], key: impl Fn(&T) -> (&str, f64)) {
    items.sort_by(|a, b| {
        let (na, ea) = key(a);
        let (nb, eb) = key(b);
        eb.total_cmp(&ea).then_with(|| na.cmp(nb))
    });
}

/// Trains one model per bank and sorts them by overall evidence.
pub fn rank_banks(set: &CandidateSet, opts: &SelectionOptions) -> Result<Ranking> {
    let results: Vec<(String, Result<ClassifierModel>)> = set
        .banks
        .par_iter()
        .map(|bank| (bank.name().to_string(), train(bank, &set.labels, &opts.train)))
        .collect();
    let mut ranked = Vec::new();
    let mut failed = Vec::new();
    for (name, result) in results {
        match result {
            Ok(model) => ranked.push(RankedBank {
                overall_evidence: model.overall_evidence,
                name,
                model,
            }),
            Err(e) => {
                log::warn!("bank '{name}' excluded from ranking: {e}");
                failed.push(BankFailure::new(name, &e));
            }
        }
    }
    sort_by_evidence(&mut ranked, |r| (r.name.as_str(), r.overall_evidence));
    Ok(Ranking { ranked, failed })
}

/// Stacks the named banks' feature rows in the given order.
pub fn concat_banks(set: &CandidateSet, names: &[&str]) -> Result<FeatureBank> {
    if names.is_empty() {
        return Err(Error::InvalidInput("cannot concatenate an empty bank list".into()));
    }
    let parts = names
        .iter()
        .map(|n| set.bank(n))
        .collect::<Result<Vec<_>>>()?;
    let d: usize = parts.iter().map(|b| b.d()).sum();
    let n = set.labels.n();
    let mut data = DMatrix::zeros(d, n);
    let mut row = 0;
    for bank in &parts {
        data.view_mut((row, 0), (bank.d(), n)).copy_from(bank.data());
        row += bank.d();
    }
    FeatureBank::new(names.join("+"), data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Greedy,
    Exhaustive,
    SingleBest,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Greedy => "greedy",
            Strategy::Exhaustive => "exhaustive",
            Strategy::SingleBest => "single_best",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(Strategy::Greedy),
            "exhaustive" => Ok(Strategy::Exhaustive),
            "single_best" => Ok(Strategy::SingleBest),
            other => Err(Error::InvalidInput(format!(
                "unknown strategy '{other}' (expected greedy, exhaustive or single_best)"
            ))),
        }
    }
}

/// Runs the ensemble search named by `strategy`.
pub fn build_ensemble(set: &CandidateSet, strategy: Strategy, opts: &SelectionOptions) -> Result<EnsembleReport> {
    match strategy {
        Strategy::Greedy => greedy_ensemble(set, opts),
        Strategy::Exhaustive => exhaustive_ensemble(set, opts),
        Strategy::SingleBest => single_best(set, opts),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Accept,
    Reject,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub bank: String,
    pub action: Action,
    /// `None` for the unconditionally accepted first bank.
    pub evidence_before: Option<f64>,
    /// `None` when training the augmented model failed.
    pub evidence_after: Option<f64>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetEvidence {
    pub banks: Vec<String>,
    pub evidence: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct EnsembleReport {
    pub strategy: Strategy,
    pub decisions: Vec<Decision>,
    /// Concatenation order of the final model.
    pub selected: Vec<String>,
    pub final_model: ClassifierModel,
    /// Every subset trained by the exhaustive search; empty otherwise.
    pub subsets: Vec<SubsetEvidence>,
    /// Number of models trained to produce this report.
    pub trainings: usize,
    pub failed: Vec<BankFailure>,
}

impl EnsembleReport {
    pub fn evidence(&self) -> f64 {
        self.final_model.overall_evidence
    }
}

fn best_single(ranking: Ranking, strategy: Strategy) -> Result<(RankedBank, Vec<RankedBank>, Vec<BankFailure>)> {
    let mut ranked = ranking.ranked.into_iter();
    let first = ranked.next().ok_or_else(|| {
        Error::InvalidInput(format!(
            "no candidate bank could be trained for the {strategy} ensemble"
        ))
    })?;
    Ok((first, ranked.collect(), ranking.failed))
}

/// The bank with the highest overall evidence.
pub fn single_best(set: &CandidateSet, opts: &SelectionOptions) -> Result<EnsembleReport> {
    let ranking = rank_banks(set, opts)?;
    let trainings = set.banks.len();
    let (best, rest, failed) = best_single(ranking, Strategy::SingleBest)?;
    let mut decisions = vec![Decision {
        bank: best.name.clone(),
        action: Action::Accept,
        evidence_before: None,
        evidence_after: Some(best.overall_evidence),
        failure: None,
    }];
    decisions.extend(rest.iter().map(|r| Decision {
        bank: r.name.clone(),
        action: Action::Reject,
        evidence_before: Some(best.overall_evidence),
        evidence_after: Some(r.overall_evidence),
        failure: None,
    }));
    Ok(EnsembleReport {
        strategy: Strategy::SingleBest,
        decisions,
        selected: vec![best.name],
        final_model: best.model,
        subsets: Vec::new(),
        trainings,
        failed,
    })
}

/// Starts from the best single bank and tries the others in order of their
/// standalone evidence, keeping each one only if the concatenated model's
/// evidence strictly increases.
pub fn greedy_ensemble(set: &CandidateSet, opts: &SelectionOptions) -> Result<EnsembleReport> {
    let ranking = rank_banks(set, opts)?;
    let mut trainings = set.banks.len();
    let (best, rest, failed) = best_single(ranking, Strategy::Greedy)?;

    let mut selected = vec![best.name.clone()];
    let mut current = best.model;
    let mut decisions = vec![Decision {
        bank: best.name,
        action: Action::Accept,
        evidence_before: None,
        evidence_after: Some(current.overall_evidence),
        failure: None,
    }];

    for candidate in rest {
        let mut names: Vec<&str> = selected.iter().map(String::as_str).collect();
        names.push(&candidate.name);
        let before = current.overall_evidence;
        trainings += 1;
        let attempt = concat_banks(set, &names).and_then(|bank| train(&bank, &set.labels, &opts.train));
        match attempt {
            Ok(model) if evidence_increases(before, model.overall_evidence) => {
                decisions.push(Decision {
                    bank: candidate.name.clone(),
                    action: Action::Accept,
                    evidence_before: Some(before),
                    evidence_after: Some(model.overall_evidence),
                    failure: None,
                });
                selected.push(candidate.name);
                current = model;
            }
            Ok(model) => decisions.push(Decision {
                bank: candidate.name,
                action: Action::Reject,
                evidence_before: Some(before),
                evidence_after: Some(model.overall_evidence),
                failure: None,
            }),
            Err(e) => {
                log::warn!("candidate '{}' skipped: {e}", candidate.name);
                decisions.push(Decision {
                    bank: candidate.name,
                    action: Action::Reject,
                    evidence_before: Some(before),
                    evidence_after: None,
                    failure: Some(e.to_string()),
                });
            }
        }
    }

    Ok(EnsembleReport {
        strategy: Strategy::Greedy,
        decisions,
        selected,
        final_model: current,
        subsets: Vec::new(),
        trainings,
        failed,
    })
}

/// Trains every non-empty subset and keeps the one with the largest evidence.
/// Ties go to the smaller subset, then to the lexicographically smaller
/// sorted name list. Subsets are concatenated in descending single-bank
/// evidence order, the same order the greedy search uses, so both searches
/// build identical matrices for the same subset.
pub fn exhaustive_ensemble(set: &CandidateSet, opts: &SelectionOptions) -> Result<EnsembleReport> {
    let m = set.banks.len();
    if m > opts.exhaustive_limit {
        return Err(Error::InvalidInput(format!(
            "exhaustive search over {m} banks exceeds the limit of {} ({} trainings)",
            opts.exhaustive_limit,
            (1u128 << m.min(127)) - 1
        )));
    }
    let ranking = rank_banks(set, opts)?;
    let mut order: Vec<String> = ranking.ranked.iter().map(|r| r.name.clone()).collect();
    order.extend(ranking.failed.iter().map(|f| f.name.clone()));

    let masks: Vec<u32> = (1u32..(1u32 << m)).filter(|mask| mask.count_ones() > 1).collect();
    let multi: Vec<(u32, Result<ClassifierModel>)> = masks
        .par_iter()
        .map(|&mask| {
            let names: Vec<&str> = (0..m)
                .filter(|i| mask & (1 << i) != 0)
                .map(|i| order[i].as_str())
                .collect();
            let result = concat_banks(set, &names).and_then(|bank| train(&bank, &set.labels, &opts.train));
            (mask, result)
        })
        .collect();

    let mut candidates: Vec<(Vec<String>, Option<ClassifierModel>)> = Vec::new();
    for r in &ranking.ranked {
        candidates.push((vec![r.name.clone()], Some(r.model.clone())));
    }
    for f in &ranking.failed {
        candidates.push((vec![f.name.clone()], None));
    }
    for (mask, result) in multi {
        let names: Vec<String> = (0..m).filter(|i| mask & (1 << i) != 0).map(|i| order[i].clone()).collect();
        if let Err(e) = &result {
            log::warn!("subset {} failed: {e}", names.join("+"));
        }
        candidates.push((names, result.ok()));
    }

    let subsets: Vec<SubsetEvidence> = candidates
        .iter()
        .map(|(names, model)| SubsetEvidence {
            banks: names.clone(),
            evidence: model.as_ref().map(|m| m.overall_evidence),
        })
        .collect();

    let sorted_names = |names: &[String]| {
        let mut v = names.to_vec();
        v.sort();
        v
    };
    let best = candidates
        .iter()
        .filter_map(|(names, model)| model.as_ref().map(|m| (names, m)))
        .min_by(|(na, ma), (nb, mb)| {
            mb.overall_evidence
                .total_cmp(&ma.overall_evidence)
                .then_with(|| na.len().cmp(&nb.len()))
                .then_with(|| sorted_names(na).cmp(&sorted_names(nb)))
        })
        .ok_or_else(|| Error::InvalidInput("no subset could be trained".into()))?;
    let (selected, final_model) = (best.0.clone(), best.1.clone());

    let evidence_after = final_model.overall_evidence;
    let decisions = order
        .iter()
        .map(|name| Decision {
            bank: name.clone(),
            action: if selected.contains(name) { Action::Accept } else { Action::Reject },
            evidence_before: None,
            evidence_after: Some(evidence_after),
            failure: ranking.failed.iter().find(|f| &f.name == name).map(|f| f.error.clone()),
        })
        .collect();

    Ok(EnsembleReport {
        strategy: Strategy::Exhaustive,
        decisions,
        selected,
        final_model,
        subsets,
        trainings: (1usize << m) - 1,
        failed: ranking.failed,
    })
}

/// `{2⁻¹⁰, 2⁻⁹, …, 2¹⁰}`
pub fn default_grid() -> Vec<f64> {
    (-10..=10).map(|e| 2f64.powi(e)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvOptions {
    pub grid: Vec<f64>,
    pub folds: usize,
    pub seed: u64,
    pub mode: TaskMode,
}

impl Default for CvOptions {
    fn default() -> Self {
        Self {
            grid: default_grid(),
            folds: 5,
            seed: 0,
            mode: TaskMode::SingleLabel,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub grid: Vec<f64>,
    pub folds: usize,
    /// `per_lambda_scores[g][k]`: mean validation score of class k at grid point g.
    pub per_lambda_scores: Vec<Vec<f64>>,
    pub chosen: Vec<f64>,
    pub fold_assignment_seed: u64,
    /// Eigendecompositions performed, counted as they happen.
    pub decompositions: usize,
    pub warnings: Vec<String>,
}

/// Fold index per sample. Samples are shuffled with the seed, grouped by
/// their first positive class, and dealt round-robin so every fold gets a
/// near-equal share of each class.
pub fn fold_assignment(labels: &LabelMatrix, folds: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..labels.n()).collect();
    order.shuffle(&mut rng);
    order.sort_by_key(|&i| labels.first_positive(i).unwrap_or(usize::MAX));
    let mut assignment = vec![0; labels.n()];
    for (pos, &i) in order.iter().enumerate() {
        assignment[i] = pos % folds;
    }
    assignment
}

struct FoldScores {
    /// `[grid][class]`, `None` when the class could not be scored in this fold.
    scores: Vec<Vec<Option<f64>>>,
    warnings: Vec<String>,
    decompositions: usize,
}

fn score_fold(
    bank: &FeatureBank,
    labels: &LabelMatrix,
    assignment: &[usize],
    fold: usize,
    opts: &CvOptions,
) -> Result<FoldScores> {
    let train_idx: Vec<usize> = (0..labels.n()).filter(|&i| assignment[i] != fold).collect();
    let val_idx: Vec<usize> = (0..labels.n()).filter(|&i| assignment[i] == fold).collect();
    let train_labels = labels.select_samples(&train_idx)?;
    let val_labels = labels.select_samples(&val_idx)?;
    let basis = build_basis(&bank.select_samples(&train_idx)?, &train_labels)?;
    let decompositions = 1;
    let val_x = bank.data().select_columns(&val_idx);
    let k = labels.k();

    let mut warnings = Vec::new();
    let usable: Vec<bool> = (0..k)
        .map(|c| {
            let train_pos = train_labels.positives(c);
            let val_pos = val_labels.positives(c);
            let ok = match opts.mode {
                TaskMode::SingleLabel => train_pos > 0 && val_pos > 0,
                TaskMode::MultiLabel => {
                    train_pos > 0 && val_pos > 0 && val_pos < val_labels.n()
                }
            };
            if !ok {
                warnings.push(format!(
                    "fold {fold}: class {c} is missing from the training or validation part; scored on the remaining folds"
                ));
            }
            ok
        })
        .collect();

    let mut scores = Vec::with_capacity(opts.grid.len());
    for &lambda in &opts.grid {
        let mut w = DMatrix::zeros(basis.d, k);
        for c in 0..k {
            w.set_column(c, &solve_weights(&basis, c, lambda)?);
        }
        let s = val_x.transpose() * w;
        let row: Vec<Option<f64>> = match opts.mode {
            TaskMode::SingleLabel => {
                let mut hits = vec![0usize; k];
                let mut totals = vec![0usize; k];
                for (i, _) in val_idx.iter().enumerate() {
                    if let Some(truth) = val_labels.first_positive(i) {
                        totals[truth] += 1;
                        if argmax(s.row(i).iter().copied()) == truth {
                            hits[truth] += 1;
                        }
                    }
                }
                (0..k)
                    .map(|c| usable[c].then(|| hits[c] as f64 / totals[c] as f64))
                    .collect()
            }
            TaskMode::MultiLabel => (0..k)
                .map(|c| {
                    usable[c].then(|| {
                        let (mut tp, mut tn, mut pos, mut neg) = (0usize, 0usize, 0usize, 0usize);
                        for i in 0..val_idx.len() {
                            let predicted = s[(i, c)] >= 0.5;
                            if val_labels.get(i, c) == 1 {
                                pos += 1;
                                tp += usize::from(predicted);
                            } else {
                                neg += 1;
                                tn += usize::from(!predicted);
                            }
                        }
                        0.5 * (tp as f64 / pos as f64 + tn as f64 / neg as f64)
                    })
                })
                .collect(),
        };
        scores.push(row);
    }
    Ok(FoldScores {
        scores,
        warnings,
        decompositions,
    })
}

/// k-fold grid search over λ, one eigendecomposition per fold reused for all
/// grid points and classes.
pub fn cv_grid_search(bank: &FeatureBank, labels: &LabelMatrix, opts: &CvOptions) -> Result<CvReport> {
    if opts.folds < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 folds, got {}", opts.folds)));
    }
    if labels.n() < opts.folds {
        return Err(Error::InvalidInput(format!(
            "{} samples cannot be split into {} folds",
            labels.n(),
            opts.folds
        )));
    }
    if opts.grid.is_empty() || opts.grid.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
        return Err(Error::InvalidInput("lambda grid must be non-empty and positive".into()));
    }
    if bank.n() != labels.n() {
        return Err(Error::DimensionMismatch(format!(
            "bank '{}' has {} samples, labels have {}",
            bank.name(),
            bank.n(),
            labels.n()
        )));
    }
    if opts.mode == TaskMode::SingleLabel && !labels.is_one_hot() {
        return Err(Error::InvalidInput("single-label CV needs one-hot labels".into()));
    }

    let assignment = fold_assignment(labels, opts.folds, opts.seed);
    let per_fold = (0..opts.folds)
        .into_par_iter()
        .map(|fold| score_fold(bank, labels, &assignment, fold, opts))
        .collect::<Result<Vec<_>>>()?;

    let k = labels.k();
    let g = opts.grid.len();
    let mut sums = vec![vec![0.0; k]; g];
    let mut counts = vec![0usize; k];
    let mut warnings = Vec::new();
    for fold in &per_fold {
        warnings.extend(fold.warnings.iter().cloned());
        for (count, score) in counts.iter_mut().zip(&fold.scores[0]) {
            *count += usize::from(score.is_some());
        }
        for (gi, row) in fold.scores.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                if let Some(v) = v {
                    sums[gi][c] += v;
                }
            }
        }
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::InvalidInput(format!("class {c} could not be scored in any fold")));
    }
    let per_lambda_scores: Vec<Vec<f64>> = sums
        .into_iter()
        .map(|row| row.into_iter().zip(&counts).map(|(s, &n)| s / n as f64).collect())
        .collect();
    let chosen = (0..k)
        .map(|c| {
            let best = argmax(per_lambda_scores.iter().map(|row| row[c]));
            opts.grid[best]
        })
        .collect();

    Ok(CvReport {
        grid: opts.grid.clone(),
        folds: opts.folds,
        per_lambda_scores,
        chosen,
        fold_assignment_seed: opts.seed,
        decompositions: per_fold.iter().map(|f| f.decompositions).sum(),
        warnings,
    })
}
