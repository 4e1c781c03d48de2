use std::collections::BTreeMap;

use ecgsyn::classifier::{evaluate, train_classifier, Classifier, ClassifierConfig};
use ecgsyn::eval::*;
use ecgsyn::record::*;
use ecgsyn::synth::Generator;
use ecgsyn::{Error, Result};

fn fixture(per_class: usize, seed: u64) -> Dataset {
    generate_fixture_dataset(&FixtureSpec {
        per_class,
        seed,
        ..FixtureSpec::default()
    })
    .unwrap()
}

fn small_clf() -> ClassifierConfig {
    ClassifierConfig {
        n_conv_blocks: 3,
        max_epochs: 4,
        patience: 2,
        ..ClassifierConfig::desk()
    }
}

fn real(seed: u64) -> RealSplits {
    RealSplits::new(&fixture(10, seed), &SplitSpec::with_seed(seed)).unwrap()
}

/// Draws fresh fixture records, i.e. a generator that has learned the
/// real distribution exactly.
struct FixtureGenerator {
    name: String,
}

impl Generator for FixtureGenerator {
    fn name(&self) -> &str {
        &self.name
    }
    fn leads(&self) -> usize {
        2
    }
    fn length(&self) -> usize {
        1000
    }
    fn sample(&self, label: RhythmClass, n: usize, seed: u64) -> Result<Vec<Signal>> {
        let ds = generate_fixture_dataset(&FixtureSpec {
            classes: vec![label],
            per_class: n,
            seed,
            ..FixtureSpec::default()
        })?;
        Ok(ds.records().iter().map(|r| r.signal.clone()).collect())
    }
    fn to_bytes(&self) -> Vec<u8> {
        self.name.as_bytes().to_vec()
    }
}

fn matrix_cfg(n_repeats: usize, include_all: bool) -> MatrixConfig {
    MatrixConfig {
        classifier: small_clf(),
        n_repeats,
        seed: 17,
        include_all,
        ..MatrixConfig::default()
    }
}

#[test]
fn real_only_setting_matches_direct_training() {
    let real = real(1);
    let cfg = small_clf();
    let via_harness = run_setting(Setting::TrRTeR, &real, None, &cfg, 5).unwrap();
    let mut model = Classifier::<f32>::new(&cfg, 2, 1000, 5).unwrap();
    train_classifier(&mut model, &real.train, &real.val, 5).unwrap();
    let direct = evaluate(&model, &real.test).unwrap();
    assert!(via_harness.same_scores(&direct), "{via_harness:?} vs {direct:?}");
}

#[test]
fn matrix_row_counts_and_determinism() {
    let real = real(2);
    let g = FixtureGenerator { name: "replay".into() };
    let cfg = matrix_cfg(2, false);
    let a = run_matrix(&[&g], &real, &cfg).unwrap();
    assert!(!a.partial(), "{:?}", a.failures);
    assert_eq!(a.rows.len(), 5 * 2);
    let aggs = a.aggregates();
    assert_eq!(aggs.len(), 5);
    for agg in &aggs {
        assert_eq!(agg.repeats, 2);
        let accs: Vec<f64> = a
            .rows
            .iter()
            .filter(|r| r.setting == agg.setting)
            .map(|r| r.metrics.accuracy)
            .collect();
        assert!((agg.mean.accuracy - (accs[0] + accs[1]) / 2.0).abs() < 1e-12);
    }
    for r in &a.rows {
        let expected_train = match r.setting {
            Setting::TrRTeR | Setting::TrRTeS => real.train.len(),
            Setting::TrRSTeR => real.train.len() + real.train.len(),
            _ => r.train_size,
        };
        assert_eq!(r.train_size, expected_train, "{}", r.setting);
    }
    let csv = a.to_csv(false);
    assert_eq!(csv.lines().count(), 11);
    assert!(csv.starts_with("setting,generator,seed,accuracy,precision,recall,f1,roc_auc,wall_time_s\n"));

    let b = run_matrix(&[&g], &real, &cfg).unwrap();
    assert_eq!(csv, b.to_csv(false));
}

#[test]
fn real_baseline_is_shared_across_generators() {
    let real = real(3);
    let g1 = FixtureGenerator { name: "one".into() };
    let g2 = FixtureGenerator { name: "two".into() };
    let cfg = MatrixConfig {
        settings: vec![Setting::TrRTeR, Setting::TrSTeR],
        ..matrix_cfg(1, true)
    };
    let rep = run_matrix(&[&g1, &g2], &real, &cfg).unwrap();
    assert_eq!(rep.rows.len(), 3 * 2);
    let baseline: Vec<_> = rep.rows.iter().filter(|r| r.setting == Setting::TrRTeR).collect();
    assert_eq!(baseline.len(), 3);
    assert!(baseline.windows(2).all(|w| w[0].metrics.same_scores(&w[1].metrics)));
    let names: Vec<&str> = rep.rows.iter().map(|r| r.generator.as_str()).collect();
    assert!(names.contains(&"all"));
}

#[test]
fn merged_source_counts_are_the_sum() {
    let spec = SplitSpec::with_seed(4);
    let a = SynthSource::new("a", &fixture(10, 40), &spec).unwrap();
    let b = SynthSource::new("b", &fixture(6, 41), &spec).unwrap();
    let all = SynthSource::merge("all", &[a.clone(), b.clone()], &spec).unwrap();
    let mut expected: BTreeMap<RhythmClass, usize> = BTreeMap::new();
    for s in [&a, &b] {
        for (c, n) in s.all.class_counts() {
            *expected.entry(*c).or_default() += n;
        }
    }
    assert_eq!(all.all.class_counts(), &expected);
    assert_eq!(all.all.len(), a.all.len() + b.all.len());
    assert!(all.all.records().iter().all(|r| r.source == Source::Synthetic));
}

#[test]
fn every_setting_keeps_test_data_out_of_training() {
    let real = real(5);
    let synth = SynthSource::new("s", &fixture(10, 50), &SplitSpec::with_seed(6)).unwrap();
    for setting in Setting::ALL {
        let data = setting_data(setting, &real, Some(&synth)).unwrap();
        assert!(overlapping_ids(&data).is_empty(), "{setting}");
    }
    let mixed = setting_data(Setting::TrRSTeR, &real, Some(&synth)).unwrap();
    assert_eq!(mixed.train.len(), real.train.len() + synth.all.len());
    assert_eq!(mixed.test.len(), real.test.len());

    let leaky = SettingData {
        train: real.train.clone(),
        val: real.val.clone(),
        test: real.train.clone(),
    };
    assert_eq!(overlapping_ids(&leaky).len(), real.train.len());
}

#[test]
fn synthetic_settings_need_a_source() {
    let real = real(7);
    for setting in Setting::ALL.into_iter().filter(|s| s.needs_synth()) {
        assert!(matches!(setting_data(setting, &real, None), Err(Error::Source(_))), "{setting}");
    }
    assert!(setting_data(Setting::TrRTeR, &real, None).is_ok());
    let err = run_matrix(&[], &real, &matrix_cfg(1, true)).unwrap_err();
    assert!(matches!(err, Error::Source(_)));
    assert!(err.is_validation());
    let g = FixtureGenerator { name: "all".into() };
    assert!(matches!(run_matrix(&[&g], &real, &matrix_cfg(1, true)), Err(Error::InvalidArgument(_))));
}

#[test]
fn setting_names_round_trip() {
    for s in Setting::ALL {
        assert_eq!(s.to_string().parse::<Setting>().unwrap(), s);
    }
    assert!("TrXTeY".parse::<Setting>().is_err());
}

#[test]
fn transfer_freezes_trunk_and_is_faster() {
    let real = RealSplits::new(&fixture(20, 8), &SplitSpec::with_seed(8)).unwrap();
    let synth = SynthSource::new("s", &fixture(20, 80), &SplitSpec::with_seed(9)).unwrap();
    let pretrained = pretrain_on_source(&synth, &small_clf(), 3).unwrap();
    let plan = TransferPlan {
        fractions: vec![0.5, 1.0],
        n_repeats: 1,
        lr_factor: 0.1,
    };
    let rep = run_transfer(&pretrained, &real, &plan, 11).unwrap();
    assert_eq!(rep.rows.len(), 2);
    assert!(rep.frozen_intact());
    assert_eq!(rep.rows[1].train_size, real.train.len());
    let ft: f64 = rep.rows.iter().map(|r| r.fine_tune.wall_time_s).sum();
    let base: f64 = rep.rows.iter().map(|r| r.baseline.wall_time_s).sum();
    assert!(ft < base, "fine-tune {ft:.2}s, baseline {base:.2}s");
    assert_eq!(rep.aggregates().len(), 2);
    assert_eq!(rep.to_csv(false).lines().count(), 1 + 4);

    let tiny = TransferPlan {
        fractions: vec![0.01],
        ..plan.clone()
    };
    assert!(matches!(run_transfer(&pretrained, &real, &tiny, 11), Err(Error::Stratify { .. })));

    let other = Classifier::<f32>::new(&small_clf(), 3, 1000, 0).unwrap();
    assert!(matches!(run_transfer(&other, &real, &plan, 11), Err(Error::Shape { .. })));
}

#[test]
fn bad_plans_are_rejected() {
    for fractions in [vec![], vec![0.0], vec![0.5, 0.5], vec![0.8, 0.4], vec![1.5]] {
        let plan = TransferPlan {
            fractions,
            ..TransferPlan::default()
        };
        assert!(matches!(plan.validate(), Err(Error::Config(_))));
    }
    assert!(matches!(
        MatrixConfig {
            n_repeats: 0,
            ..MatrixConfig::default()
        }
        .validate(),
        Err(Error::Config(_))
    ));
}
