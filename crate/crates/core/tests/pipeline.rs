use ndarray::{concatenate, Array2, Axis};

use msb_core::cohort::{load_cohort, missingness_profile, write_cohort, CsvLayout};
use msb_core::evaluation::{
    generalization_gap, make_folds, run_benchmark, BenchOptions, CvPlan, ModelConfig, ResultTable,
};
use msb_core::metrics::c_index;
use msb_core::simulate::{simulate, Mechanism, SimSpec};
use msb_core::stacking::{train_msb, train_naive_stack, BaseStage, Stacking};
use msb_core::{Cohort, FittedLearner, LearnerKind, LearnerSpec, MsbConfig, Variant};

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut k = 0;
    while k < order.len() {
        let mut end = k;
        while end < order.len() && v[order[end]] == v[order[k]] {
            end += 1;
        }
        for &i in &order[k..end] {
            r[i] = (k + end + 1) as f64 / 2.0;
        }
        k = end;
    }
    r
}

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let mean = (a.len() as f64 + 1.0) / 2.0;
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - mean) * (y - mean)).sum();
    let va: f64 = ra.iter().map(|x| (x - mean).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mean).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn complete_spec(seed: u64) -> SimSpec {
    SimSpec { seed, cell_missing: 0.0, ..SimSpec::small(seed) }.with_mechanism(Mechanism::None)
}

fn split(cohort: &Cohort, seed: u64) -> (Cohort, Cohort) {
    let folds = make_folds(cohort, &CvPlan { repetitions: 1, seed, ..CvPlan::default() }).unwrap();
    (cohort.subset(&folds[0].train), cohort.subset(&folds[0].test))
}

#[test]
fn single_source_single_model_collapses_to_base() {
    let mut diffs = Vec::new();
    for seed in 0..10 {
        let spec = SimSpec {
            n: 300,
            source_sizes: vec![6],
            signal_sources: vec![0],
            signal_features: 3,
            effect: 0.5,
            mechanisms: vec![Mechanism::None],
            cell_missing: 0.0,
            seed,
            ..SimSpec::default()
        };
        let cohort = simulate(&spec).unwrap().cohort;
        let (train, test) = split(&cohort, seed);
        let base = FittedLearner::fit(
            &LearnerSpec::new(LearnerKind::CoxNet).with_seed(seed),
            train.features().view(),
            train.outcomes(),
        )
        .unwrap();
        let c_base = c_index(test.outcomes(), &base.predict_risk(test.features().view()).unwrap()).unwrap();
        let config = MsbConfig {
            include_indicator: false,
            base_specs: vec![LearnerSpec::new(LearnerKind::CoxNet)],
            seed,
            ..MsbConfig::default()
        };
        let model = train_msb(&train, &config).unwrap();
        let c_msb = c_index(test.outcomes(), &model.predict_risk(&test).unwrap()).unwrap();
        diffs.push((c_msb - c_base).abs());
    }
    let worst = diffs.iter().copied().fold(0.0, f64::max);
    assert!(worst <= 0.02, "C-index differences {diffs:?}");
}

#[test]
fn self_prediction_tracks_meta_training_risks() {
    let cohort = simulate(&SimSpec { n: 200, ..complete_spec(4) }).unwrap().cohort;
    let config = MsbConfig { seed: 4, ..MsbConfig::default() };
    let stage = BaseStage::fit(&cohort, &config).unwrap();
    let model = stage.finish(&config, Stacking::OutOfFold).unwrap();
    // complete data: the training Ẑ is the out-of-fold block plus all-zero rates
    let oof = stage.raw_scores(Stacking::OutOfFold).values;
    let z = concatenate![Axis(1), oof, Array2::zeros((cohort.n_rows(), cohort.n_sources()))];
    let meta_training = model.meta_risk(z.view()).unwrap();
    let predicted = model.predict_risk(&cohort).unwrap();
    let rho = spearman(&meta_training, &predicted);
    assert!(rho > 0.8, "rank correlation {rho}");
}

#[test]
fn score_matrix_width() {
    let cohort = simulate(&SimSpec { n: 250, ..SimSpec::default() }).unwrap().cohort;
    let stage = BaseStage::fit(&cohort, &MsbConfig::default()).unwrap();
    assert!(stage.dropped_sources().is_empty());
    let with = stage.finish(&MsbConfig::default(), Stacking::OutOfFold).unwrap();
    assert_eq!(with.labels().len(), 32);
    let config = MsbConfig { include_indicator: false, ..MsbConfig::default() };
    let without = stage.finish(&config, Stacking::OutOfFold).unwrap();
    assert_eq!(without.labels().len(), 24);
}

#[test]
fn naive_scores_are_refit_training_risks() {
    let spec = SimSpec {
        source_sizes: vec![5],
        signal_sources: vec![0],
        mechanisms: vec![Mechanism::None],
        ..complete_spec(6)
    };
    let cohort = simulate(&spec).unwrap().cohort;
    let config = MsbConfig { base_specs: vec![LearnerSpec::new(LearnerKind::Cwgb)], seed: 6, ..MsbConfig::default() };
    let stage = BaseStage::fit(&cohort, &config).unwrap();
    let naive = stage.raw_scores(Stacking::InSample).values;
    assert_eq!(naive.ncols(), 1);
    let refit = stage.sources()[0].learners[0].predict_risk(cohort.features().view()).unwrap();
    assert_eq!(naive.column(0).to_vec(), refit);

    let a = train_naive_stack(&cohort, &config).unwrap();
    let b = train_naive_stack(&cohort, &config).unwrap();
    assert_eq!(a.predict_risk(&cohort).unwrap(), b.predict_risk(&cohort).unwrap());
}

#[test]
fn duplicated_rows_get_identical_predictions() {
    let cohort = simulate(&SimSpec::small(8)).unwrap().cohort;
    let config = MsbConfig {
        variant: Variant::Mia,
        meta_spec: LearnerSpec::new(LearnerKind::Rsf),
        seed: 8,
        ..MsbConfig::default()
    };
    let model = train_msb(&cohort, &config).unwrap();
    let rows: Vec<usize> = (0..10).chain(0..10).collect();
    let doubled = cohort.subset(&rows);
    let grid = [10.0, 100.0, 400.0];
    let p = model.predict(&doubled, &grid).unwrap();
    for i in 0..10 {
        assert_eq!(p.risk[i], p.risk[i + 10]);
        assert_eq!(p.survival[i], p.survival[i + 10]);
    }
}

#[test]
fn cohort_csv_round_trip() {
    let cohort = simulate(&SimSpec { n: 150, ..SimSpec::default() }).unwrap().cohort;
    let dir = tempfile::tempdir().unwrap();
    let (f, m) = (dir.path().join("f.csv"), dir.path().join("m.csv"));
    write_cohort(&cohort, &f, &m, &CsvLayout::default()).unwrap();
    let back = load_cohort(&f, &m, &CsvLayout::default()).unwrap();
    assert_eq!(cohort.features().dim(), back.features().dim());
    let same = cohort.features().iter().zip(back.features().iter()).all(|(a, b)| {
        if a.is_nan() {
            b.is_nan()
        } else {
            a.to_bits() == b.to_bits()
        }
    });
    assert!(same);
    assert_eq!(cohort.outcomes(), back.outcomes());
    assert_eq!(cohort.column_names(), back.column_names());
    assert_eq!(missingness_profile(&cohort), missingness_profile(&back));
}

#[test]
fn gap_recomputed_from_emitted_csv() {
    let cohort = simulate(&SimSpec::small(2)).unwrap().cohort;
    let plan = CvPlan { repetitions: 1, seed: 2, ..CvPlan::default() };
    let models = vec![
        ModelConfig::baseline(LearnerSpec::new(LearnerKind::Cwgb)),
        ModelConfig::naive_stack(MsbConfig {
            base_specs: vec![LearnerSpec::new(LearnerKind::Cwgb)],
            ..MsbConfig::default()
        }),
    ];
    let table = run_benchmark(&cohort, &plan, &models, &BenchOptions::default()).unwrap();
    let mut csv = Vec::new();
    table.write_csv(&mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    for model in table.models() {
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for line in text.lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            if f[0] == model {
                let c: f64 = f[5].parse().unwrap();
                if f[4] == "train" {
                    train.push(c)
                } else {
                    test.push(c)
                }
            }
        }
        let by_hand = train.iter().sum::<f64>() / train.len() as f64 - test.iter().sum::<f64>() / test.len() as f64;
        // the CSV carries 6 decimals
        assert!((by_hand - generalization_gap(&table, &model).unwrap()).abs() < 1e-6);
        let reread = ResultTable::read_csv(text.as_bytes()).unwrap();
        assert!((generalization_gap(&reread, &model).unwrap() - by_hand).abs() < 1e-12);
    }
}
