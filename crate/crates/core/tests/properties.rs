use evsel::dataio::{generate_labels, generate_synthetic, l2_normalize_columns, synthesize_bank, SynthSpec};
use evsel::evidence::{gamma_of, optimize_lambda, Method, OptimOptions};
use evsel::lssvm::{predict_scores, solve_weights, train, TrainOptions};
use evsel::metrics::{accuracy, argmax};
use evsel::selection::{
    cv_grid_search, greedy_ensemble, rank_banks, Action, CandidateSet, CvOptions, SelectionOptions,
};
use evsel::spectral::{build_basis, eigh, gram, FeatureBank, LabelMatrix};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_problem(seed: u64, d: usize, n: usize, k: usize, nonneg: bool) -> (FeatureBank, LabelMatrix) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes: Vec<usize> = (0..n).map(|i| if i < k { i } else { rng.random_range(0..k) }).collect();
    let labels = LabelMatrix::one_hot(&classes, k).unwrap();
    let low = if nonneg { 0.0 } else { -1.0 };
    let x = DMatrix::from_fn(d, n, |_, c| rng.random_range(low..1.0) + 0.5 * (classes[c] as f64) / k as f64);
    (FeatureBank::new("p", x).unwrap(), labels)
}

#[test]
fn eigenbasis_orthogonality_and_reconstruction() {
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = rng.random_range(1..25);
        let n = rng.random_range(1..25);
        let (bank, _) = random_problem(seed, d, n, 1, false);
        let g = gram(&bank);
        let (u, s) = eigh(&g, "p").unwrap();
        let scale = g.amax().max(1.0);
        let rec = &u * DMatrix::from_diagonal(&s) * u.transpose();
        assert!((rec - &g).amax() <= 1e-10 * scale, "seed {seed}");
        assert!((u.transpose() * &u - DMatrix::identity(d, d)).amax() <= 1e-10, "seed {seed}");
        let rank = s.iter().filter(|&&v| v > 0.0).count();
        assert!(rank <= d.min(n), "seed {seed}: rank {rank}");
    }
}

#[test]
fn cached_basis_matches_rebuilt_single_class_basis() {
    let (bank, labels) = random_problem(4, 12, 30, 3, true);
    let basis = build_basis(&bank, &labels).unwrap();
    for class in [0, 2] {
        let alone = LabelMatrix::from_row_major(30, 1, (0..30).map(|i| labels.get(i, class)).collect()).unwrap();
        let fresh = build_basis(&bank, &alone).unwrap();
        for lambda in [0.01, 3.0] {
            let cached = solve_weights(&basis, class, lambda).unwrap();
            let rebuilt = solve_weights(&fresh, 0, lambda).unwrap();
            assert!((&cached - &rebuilt).norm() <= 1e-10 * rebuilt.norm());
        }
    }
}

#[test]
fn gamma_stays_below_rank() {
    for seed in 0..20 {
        let (bank, labels) = random_problem(seed, 15, 10, 2, true);
        let basis = build_basis(&bank, &labels).unwrap();
        for lambda in [1e-12, 1e-3, 1.0, 1e3, 1e12] {
            let gamma = gamma_of(basis.eigenvalues(), lambda).unwrap();
            assert!(gamma >= 0.0 && gamma < basis.rank() as f64, "seed {seed} lambda {lambda}");
        }
    }
}

#[test]
fn scaling_features_scales_lambda_and_keeps_predictions() {
    let data = generate_synthetic(&SynthSpec { seed: 3, ..SynthSpec::default() }).unwrap();
    let c = 3.0;
    let scaled = FeatureBank::new("scaled", data.bank.data() * c).unwrap();
    let a = build_basis(&data.bank, &data.labels).unwrap();
    let b = build_basis(&scaled, &data.labels).unwrap();
    for (sa, sb) in a.eigenvalues().iter().zip(b.eigenvalues()) {
        assert!((sb - c * c * sa).abs() <= 1e-10 * c * c * a.eigenvalues()[0]);
    }
    for class in 0..3 {
        for (ha, hb) in a.h_col(class).iter().zip(b.h_col(class)) {
            assert!((hb - c * ha).abs() <= 1e-9);
        }
    }
    let opts = TrainOptions::default();
    let ma = train(&data.bank, &data.labels, &opts).unwrap();
    let mb = train(&scaled, &data.labels, &opts).unwrap();
    for (la, lb) in ma.lambdas.iter().zip(&mb.lambdas) {
        assert!((lb / (c * c) - la).abs() <= 1e-3 * la, "{la} vs {lb}");
    }
    let pa = predict_scores(&ma, &data.bank).unwrap();
    let pb = predict_scores(&mb, &scaled).unwrap();
    for i in 0..pa.n() {
        assert_eq!(
            argmax(pa.data().row(i).iter().copied()),
            argmax(pb.data().row(i).iter().copied())
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn optimizer_iterates_stay_positive_and_terminate(
        seed in 0u64..10_000,
        d in 2usize..20,
        n in 4usize..40,
        nonneg in any::<bool>(),
        log_init in -6.0f64..6.0,
        method in prop::sample::select(Method::ALL.to_vec()),
    ) {
        let (bank, labels) = random_problem(seed, d, n, 2, nonneg);
        let basis = build_basis(&bank, &labels).unwrap();
        let opts = OptimOptions { lambda_init: 10f64.powf(log_init), max_iters: 200, method, ..OptimOptions::default() };
        for class in 0..2 {
            if let Ok(result) = optimize_lambda(&basis, class, &opts) {
                prop_assert!(result.iterations <= opts.max_iters);
                prop_assert!(result.trace.iter().all(|t| t.lambda.is_finite() && t.lambda > 0.0));
                prop_assert!(result.trace.iter().all(|t| t.log_evidence.is_finite()));
            }
        }
    }
}

fn noise_set(seed: u64) -> CandidateSet {
    let labels = generate_labels(120, 3, seed).unwrap();
    let banks = [0.2, 0.5, 0.9]
        .iter()
        .enumerate()
        .map(|(j, &noise)| {
            let spec = SynthSpec { d: 10, noise_level: noise, seed: seed * 7 + j as u64, ..SynthSpec::default() };
            synthesize_bank(&format!("b{j}"), &labels, &spec).unwrap()
        })
        .collect();
    CandidateSet::new(banks, labels).unwrap()
}

#[test]
fn greedy_accepts_strictly_increasing_evidence() {
    let opts = SelectionOptions::default();
    for seed in 0..10 {
        let set = noise_set(seed);
        let report = greedy_ensemble(&set, &opts).unwrap();
        let accepted: Vec<f64> = report
            .decisions
            .iter()
            .filter(|d| d.action == Action::Accept)
            .map(|d| d.evidence_after.unwrap())
            .collect();
        assert!(accepted.windows(2).all(|w| w[1] > w[0]), "seed {seed}");
        let best_single = rank_banks(&set, &opts).unwrap().ranked[0].overall_evidence;
        assert!(report.evidence() >= best_single);
        let again = greedy_ensemble(&set, &opts).unwrap();
        assert_eq!(report.decisions, again.decisions);
        assert_eq!(report.final_model, again.final_model);
    }
}

#[test]
fn cv_performs_one_decomposition_per_fold_for_any_grid() {
    let set = noise_set(1);
    let bank = &set.banks()[0];
    for (folds, points) in [(2, 1), (3, 5), (5, 21)] {
        let opts = CvOptions {
            grid: (0..points).map(|i| 2f64.powi(i - 3)).collect(),
            folds,
            ..CvOptions::default()
        };
        let report = cv_grid_search(bank, set.labels(), &opts).unwrap();
        assert_eq!(report.decompositions, folds);
        let (lo, hi) = (opts.grid[0], opts.grid[points as usize - 1]);
        assert!(report.chosen.iter().all(|&l| l >= lo && l <= hi));
    }
}

#[test]
fn noiseless_banks_are_classified_perfectly() {
    for seed in 0..5 {
        let spec = SynthSpec { noise_level: 0.0, seed, ..SynthSpec::default() };
        let data = generate_synthetic(&spec).unwrap();
        let train_bank = data.bank.select_samples(&data.train).unwrap();
        let model = train(&train_bank, &data.labels.select_samples(&data.train).unwrap(), &TrainOptions::default()).unwrap();
        let scores = predict_scores(&model, &data.bank.select_samples(&data.test).unwrap()).unwrap();
        let acc = accuracy(&scores, &data.labels.select_samples(&data.test).unwrap()).unwrap();
        assert_eq!(acc.mean, 1.0, "seed {seed}");
    }
}

#[test]
fn normalized_nonnegative_banks_certify_fixed_point() {
    let (bank, labels) = random_problem(9, 20, 40, 3, true);
    let (bank, negatives) = l2_normalize_columns(&bank).unwrap();
    assert_eq!(negatives, 0);
    for class in 0..3 {
        let diag = evsel::evidence::asymptotic_slope(&bank, &labels.column(class)).unwrap();
        assert!(diag.certified);
    }
}
