use ecgsyn::classifier::ClassifierConfig;
use ecgsyn::error::Error;
use ecgsyn::record::*;
use ecgsyn::similarity::*;

fn fixture(per_class: usize, seed: u64) -> Dataset {
    generate_fixture_dataset(&FixtureSpec {
        per_class,
        seed,
        ..FixtureSpec::default()
    })
    .unwrap()
}

fn offset(ds: &Dataset, mv: f64) -> Dataset {
    let records = ds
        .records()
        .iter()
        .map(|r| {
            let data = r.signal.as_slice().iter().map(|v| v + mv).collect();
            let signal = Signal::new(r.leads(), r.samples(), data).unwrap();
            EcgRecord::new(signal, r.fs, r.label, format!("{}+off", r.record_id), r.source.clone()).unwrap()
        })
        .collect();
    Dataset::new(records).unwrap()
}

#[test]
fn constant_offset_is_separable() {
    let real = fixture(6, 1);
    let synth = offset(&real, 10.0);
    let r = two_sample_score(&real, &synth, &ClassifierConfig::two_sample(), 0).unwrap();
    assert!(r.accuracy >= 0.95, "{r:?}");
    assert_eq!((r.n_real, r.n_synth), (42, 42));
}

#[test]
fn same_distribution_is_near_chance() {
    let mut accs = Vec::new();
    for seed in 0..5 {
        let real = fixture(6, 100 + seed);
        let synth = fixture(6, 200 + seed);
        accs.push(two_sample_score(&real, &synth, &ClassifierConfig::two_sample(), seed).unwrap().accuracy);
    }
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    assert!((0.4..=0.6).contains(&mean), "{accs:?}");
}

#[test]
fn relabeling_flips_accuracy() {
    let real = fixture(3, 5);
    let synth = offset(&real, 0.3);
    let p = two_sample_predictions(&real, &synth, &ClassifierConfig::two_sample(), 3).unwrap();
    assert!((p.relabeled().accuracy() - (1.0 - p.accuracy())).abs() < 1e-12);
}

#[test]
fn too_few_records_is_sample_size_error() {
    let real = fixture(1, 0);
    let small = Dataset::new(real.records()[..7].to_vec()).unwrap();
    let r = two_sample_score(&real, &small, &ClassifierConfig::two_sample(), 0);
    assert!(matches!(r, Err(Error::SampleSize { needed: 8, got: 7 })));
}

#[test]
fn embedding_csv_has_one_row_per_record() {
    let real = fixture(2, 0);
    let synth = fixture(1, 9);
    let dir = tempfile::tempdir().unwrap();
    for (mode, width) in [(EmbeddingMode::Raw, 2000), (EmbeddingMode::Pca(50), 20)] {
        let path = dir.path().join("emb.csv");
        let rows = export_embeddings(&real, &synth, mode, &path).unwrap();
        assert_eq!(rows, real.len() + synth.len());
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), rows + 1);
        assert!(lines[0].starts_with("origin,class,f0"));
        assert_eq!(lines[0].split(',').count(), width + 2);
        assert!(lines[1].starts_with("real,"));
        assert!(lines.last().unwrap().starts_with("synth,"));
    }
}

#[test]
fn mmd_orders_shifted_dataset_above_resample() {
    let real = fixture(4, 1);
    let other = fixture(4, 2);
    let shifted = offset(&other, 1.0);
    let null = mmd_rbf(&real, &other, None).unwrap();
    let shift = mmd_rbf(&real, &shifted, None).unwrap();
    assert!(shift.value > null.value, "{null:?} {shift:?}");
    assert_eq!(mmd_rbf(&real, &real, None).unwrap().value, 0.0);
}
